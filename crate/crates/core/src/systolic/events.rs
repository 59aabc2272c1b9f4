//! Cycle-by-cycle replay of the output-stationary array. This is the ground
//! truth the closed-form fold cost is checked against, so it models the
//! registers directly instead of reasoning about arrival times.

use super::{fold_schedule, Fold, SystolicConfig, SystolicError};
use crate::topology::GemmShape;

pub const ORACLE_MAX_PES: usize = 4096;
pub const ORACLE_MAX_MACS: u64 = 100_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub cycles: u64,
    /// `m x n` result, row-major, as it left the bottom of the array.
    pub output: Vec<f64>,
}

/// Replays `a (m x k) * b (k x n)`, both row-major, fold by fold.
pub fn replay_gemm(gemm: GemmShape, cfg: &SystolicConfig, a: &[f64], b: &[f64]) -> Result<Replay, SystolicError> {
    cfg.check()?;
    if cfg.pes() > ORACLE_MAX_PES {
        return Err(SystolicError::OracleScale(format!("{}x{} array exceeds {ORACLE_MAX_PES} PEs", cfg.rows, cfg.cols)));
    }
    if gemm.macs() > ORACLE_MAX_MACS {
        return Err(SystolicError::OracleScale(format!("{} MACs exceeds {ORACLE_MAX_MACS}", gemm.macs())));
    }
    assert_eq!(a.len(), gemm.m * gemm.k, "lhs operand size");
    assert_eq!(b.len(), gemm.k * gemm.n, "rhs operand size");

    let mut output = vec![f64::NAN; gemm.m * gemm.n];
    let mut cycles = 0;
    for fold in fold_schedule(gemm, cfg) {
        cycles += replay_fold(&fold, gemm, a, b, &mut output);
    }
    Ok(Replay { cycles, output })
}

fn replay_fold(fold: &Fold, gemm: GemmShape, a: &[f64], b: &[f64], output: &mut [f64]) -> u64 {
    let (r, c, k) = (fold.r, fold.c, fold.k);
    let at = |i: usize, j: usize| i * c + j;
    let mut a_reg: Vec<Option<f64>> = vec![None; r * c];
    let mut b_reg: Vec<Option<f64>> = vec![None; r * c];
    let mut acc = vec![0.0; r * c];
    let mut macs = vec![0usize; r * c];
    let mut remaining = r * c;
    let mut t = 0usize;

    while remaining > 0 {
        // Row operands move one PE right, column operands one PE down.
        for i in 0..r {
            for j in (1..c).rev() {
                a_reg[at(i, j)] = a_reg[at(i, j - 1)];
            }
            a_reg[at(i, 0)] = t.checked_sub(i).filter(|&s| s < k).map(|s| a[(fold.row_base + i) * gemm.k + s]);
        }
        for j in 0..c {
            for i in (1..r).rev() {
                b_reg[at(i, j)] = b_reg[at(i - 1, j)];
            }
            b_reg[at(0, j)] = t.checked_sub(j).filter(|&s| s < k).map(|s| b[s * gemm.n + fold.col_base + j]);
        }
        for p in 0..r * c {
            match (a_reg[p], b_reg[p]) {
                (Some(x), Some(y)) => {
                    acc[p] += x * y;
                    macs[p] += 1;
                    if macs[p] == k {
                        remaining -= 1;
                    }
                }
                (None, None) => {}
                _ => panic!("operand wavefronts misaligned at PE {p}, cycle {t}"),
            }
        }
        t += 1;
    }

    // Drain: every cycle the bottom row leaves the array and the rest shift down.
    let mut rows: Vec<Option<usize>> = (0..r).map(Some).collect();
    let mut drained = 0;
    while rows.iter().any(Option::is_some) {
        if let Some(i) = rows[r - 1] {
            for j in 0..c {
                output[(fold.row_base + i) * gemm.n + fold.col_base + j] = acc[at(i, j)];
            }
        }
        rows.rotate_right(1);
        rows[0] = None;
        drained += 1;
    }
    (t + drained) as u64
}

/// Cycle count from a full replay, with the replayed product checked
/// against a direct triple loop.
pub fn simulate_gemm_events(gemm: GemmShape, cfg: &SystolicConfig) -> Result<u64, SystolicError> {
    let a: Vec<f64> = (0..gemm.m * gemm.k).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
    let b: Vec<f64> = (0..gemm.k * gemm.n).map(|i| ((i * 5 + 1) % 13) as f64 - 6.0).collect();
    let replay = replay_gemm(gemm, cfg, &a, &b)?;
    for i in 0..gemm.m {
        for j in 0..gemm.n {
            let expect: f64 = (0..gemm.k).map(|s| a[i * gemm.k + s] * b[s * gemm.n + j]).sum();
            assert_eq!(replay.output[i * gemm.n + j], expect, "replayed product differs at ({i}, {j})");
        }
    }
    Ok(replay.cycles)
}
