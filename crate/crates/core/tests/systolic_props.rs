use std::collections::HashMap;

use proptest::prelude::*;
use tpuimac::systolic::{
    fold_schedule, gemm_cycles, generate_traces, layer_cycles, simulate_gemm_events, Direction, Region,
};
use tpuimac::{GemmShape, LayerKind, LayerSpec, SystolicConfig};

fn gemm() -> impl Strategy<Value = GemmShape> {
    (1usize..40, 1usize..40, 1usize..40).prop_map(|(m, k, n)| GemmShape::new(m, k, n))
}

fn array() -> impl Strategy<Value = SystolicConfig> {
    (1usize..12, 1usize..12).prop_map(|(r, c)| SystolicConfig::with_array(r, c))
}

proptest! {
    #[test]
    fn closed_form_matches_replay(g in gemm(), cfg in array()) {
        prop_assert_eq!(gemm_cycles(g, &cfg).cycles, simulate_gemm_events(g, &cfg).unwrap());
    }

    #[test]
    fn cycles_monotone(g in gemm(), cfg in array(), dm in 0usize..5, dk in 0usize..5, dn in 0usize..5) {
        let base = gemm_cycles(g, &cfg).cycles;
        prop_assert!(gemm_cycles(GemmShape::new(g.m + dm, g.k, g.n), &cfg).cycles >= base);
        prop_assert!(gemm_cycles(GemmShape::new(g.m, g.k + dk, g.n), &cfg).cycles >= base);
        prop_assert!(gemm_cycles(GemmShape::new(g.m, g.k, g.n + dn), &cfg).cycles >= base);
    }

    #[test]
    fn folds_partition_the_output(g in gemm(), cfg in array()) {
        let folds = fold_schedule(g, &cfg);
        let work: usize = folds.iter().map(|f| f.r * f.c * f.k).sum();
        prop_assert_eq!(work, g.m * g.n * g.k);
        let mut covered = vec![0u8; g.m * g.n];
        for f in &folds {
            prop_assert!(f.r <= cfg.rows && f.c <= cfg.cols);
            for i in f.row_base..f.row_base + f.r {
                for j in f.col_base..f.col_base + f.c {
                    covered[i * g.n + j] += 1;
                }
            }
        }
        prop_assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn utilization_bounds(k in 1usize..300, r in 1usize..33, c in 1usize..33) {
        let cfg = SystolicConfig::default();
        let rep = gemm_cycles(GemmShape::new(r, k, c), &cfg);
        prop_assert!(rep.utilization <= 1.0);
        prop_assert!(rep.utilization <= k as f64 / (k + 2 * cfg.rows + cfg.cols - 2) as f64 + 1e-12);
        let fc = gemm_cycles(GemmShape::new(1, k, c), &cfg);
        let bound = c as f64 / cfg.pes() as f64 * k as f64 / (k + c) as f64;
        prop_assert!(fc.utilization <= bound + 1e-12);
        prop_assert!(fc.utilization < c as f64 / cfg.pes() as f64);
    }

    #[test]
    fn traces_cover_every_output_once(
        side in 3usize..9, f in 1usize..4, cin in 1usize..4, filters in 1usize..6, stride in 1usize..3,
        cfg in array(), depthwise in any::<bool>(),
    ) {
        let f = f.min(side);
        let mut layer = LayerSpec::conv("l", side, f, cin, filters, stride);
        if depthwise {
            layer.kind = LayerKind::DepthwiseConv;
            layer.num_filters = cin;
        }
        let records = generate_traces(&layer, &cfg).unwrap();
        let mut writes: HashMap<u64, usize> = HashMap::new();
        for r in records.iter().filter(|r| r.dir == Direction::W) {
            prop_assert_eq!(r.region, Region::Ofmap);
            *writes.entry(r.address).or_default() += 1;
        }
        prop_assert_eq!(writes.len(), layer.output_elems());
        prop_assert!(writes.values().all(|&n| n == 1));
        let rep = layer_cycles(&layer, &cfg);
        prop_assert_eq!(records.iter().filter(|r| r.dir == Direction::R).count() as u64, rep.reads_elems);
        prop_assert!(records.windows(2).all(|w| w[0].cycle <= w[1].cycle));
        prop_assert!(records.last().unwrap().cycle < rep.cycles);
    }
}

#[test]
fn fc_versus_conv_utilization() {
    let cfg = SystolicConfig::default();
    let fc = gemm_cycles(GemmShape::new(1, 1024, 10), &cfg);
    let conv = gemm_cycles(LayerSpec::conv("c", 28, 5, 1, 32, 1).to_gemm().unwrap(), &cfg);
    assert!(fc.utilization < 0.02);
    assert!(conv.utilization > 0.1, "{}", conv.utilization);
}
