//! Memory access traces in the order the array consumes and produces data.

use std::fmt;
use std::io::{self, Write};

use serde::Serialize;

use super::{depthwise_gemm, fold_cycles, fold_schedule, SystolicConfig, SystolicError};
use crate::topology::{GemmShape, LayerKind, LayerSpec, TopologyError};

pub const TRACE_HEADER: &str = "cycle,dir,region,address,bytes";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Direction {
    R,
    W,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Region {
    Ifmap,
    Filter,
    Ofmap,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Ifmap => "ifmap",
            Region::Filter => "filter",
            Region::Ofmap => "ofmap",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub cycle: u64,
    pub dir: Direction,
    pub region: Region,
    pub address: u64,
    pub bytes: u64,
}

/// Element-index mapping of one GEMM onto the three tensors.
struct Lowering {
    gemm: GemmShape,
    ifmap: Box<dyn Fn(usize, usize) -> usize>,
    filter: Box<dyn Fn(usize, usize) -> usize>,
    ofmap: Box<dyn Fn(usize, usize) -> usize>,
}

fn lowerings(layer: &LayerSpec) -> Result<Vec<Lowering>, SystolicError> {
    let (_, w_out, _) = layer.output_shape();
    let (w_in, cin, fw, stride) = (layer.ifmap_w, layer.channels_in, layer.filter_w, layer.stride);
    // Position of tap (fy, fx) of output pixel p in the (pre-padded) ifmap.
    let pixel = move |p: usize, fy: usize, fx: usize| {
        let (oy, ox) = (p / w_out, p % w_out);
        (oy * stride + fy) * w_in + ox * stride + fx
    };
    match layer.kind {
        LayerKind::Conv => {
            let gemm = layer.to_gemm()?;
            let n = gemm.n;
            Ok(vec![Lowering {
                gemm,
                ifmap: Box::new(move |p, s| {
                    let (tap, ci) = (s / cin, s % cin);
                    pixel(p, tap / fw, tap % fw) * cin + ci
                }),
                filter: Box::new(move |s, j| s * n + j),
                ofmap: Box::new(move |p, j| p * n + j),
            }])
        }
        LayerKind::Dense => {
            let gemm = layer.to_gemm()?;
            let n = gemm.n;
            Ok(vec![Lowering {
                gemm,
                ifmap: Box::new(|_, s| s),
                filter: Box::new(move |s, j| s * n + j),
                ofmap: Box::new(move |p, j| p * n + j),
            }])
        }
        LayerKind::DepthwiseConv => {
            let gemm = depthwise_gemm(layer);
            Ok((0..cin)
                .map(|ch| Lowering {
                    gemm,
                    ifmap: Box::new(move |p, tap| pixel(p, tap / fw, tap % fw) * cin + ch),
                    filter: Box::new(move |tap, _| tap * cin + ch),
                    ofmap: Box::new(move |p, _| p * cin + ch),
                })
                .collect())
        }
        kind => Err(TopologyError::NoGemm { layer: layer.name.clone(), kind }.into()),
    }
}

fn region_sizes(layer: &LayerSpec) -> [(Region, u64); 3] {
    let taps = (layer.filter_h * layer.filter_w) as u64;
    let filter = match layer.kind {
        LayerKind::DepthwiseConv => taps * layer.channels_in as u64,
        _ => layer.param_count() as u64 - if layer.kind == LayerKind::Conv { layer.num_filters as u64 } else { 0 },
    };
    [
        (Region::Ifmap, (layer.ifmap_h * layer.ifmap_w * layer.channels_in) as u64),
        (Region::Filter, filter),
        (Region::Ofmap, layer.output_elems() as u64),
    ]
}

fn check_regions(layer: &LayerSpec, cfg: &SystolicConfig) -> Result<(), SystolicError> {
    let spans: Vec<(Region, u64, u64)> = region_sizes(layer)
        .into_iter()
        .map(|(region, elems)| {
            let base = match region {
                Region::Ifmap => cfg.ifmap_offset,
                Region::Filter => cfg.filter_offset,
                Region::Ofmap => cfg.ofmap_offset,
            };
            (region, base, base.saturating_add(elems.saturating_mul(cfg.word_bytes)))
        })
        .collect();
    for i in 0..spans.len() {
        for j in i + 1..spans.len() {
            let ((a, a_start, a_end), (b, b_start, b_end)) = (spans[i], spans[j]);
            if a_start < b_end && b_start < a_end {
                return Err(SystolicError::RegionOverlap { a, a_start, a_end, b, b_start, b_end });
            }
        }
    }
    Ok(())
}

/// Per fold: the row operand stream (ifmap, `k*r` reads), the column
/// operand stream (filter, `k*c` reads) and the drained outputs (`r*c`
/// writes), stamped with the cycle they cross the array edge.
pub fn generate_traces(layer: &LayerSpec, cfg: &SystolicConfig) -> Result<Vec<TraceRecord>, SystolicError> {
    cfg.check()?;
    let lowered = lowerings(layer)?;
    check_regions(layer, cfg)?;

    let wb = cfg.word_bytes;
    let rec = |cycle: u64, dir, region, base: u64, idx: usize| TraceRecord {
        cycle,
        dir,
        region,
        address: base + idx as u64 * wb,
        bytes: wb,
    };
    let mut out = Vec::new();
    let mut start = 0u64;
    for low in &lowered {
        for fold in fold_schedule(low.gemm, cfg) {
            let first = out.len();
            let k = fold.k;
            for i in 0..fold.r {
                for s in 0..k {
                    let idx = (low.ifmap)(fold.row_base + i, s);
                    out.push(rec(start + (i + s) as u64, Direction::R, Region::Ifmap, cfg.ifmap_offset, idx));
                }
            }
            for j in 0..fold.c {
                for s in 0..k {
                    let idx = (low.filter)(s, fold.col_base + j);
                    out.push(rec(start + (j + s) as u64, Direction::R, Region::Filter, cfg.filter_offset, idx));
                }
            }
            let drain_start = start + (k + fold.r + fold.c - 2) as u64;
            for d in 0..fold.r {
                let row = fold.row_base + fold.r - 1 - d;
                for j in 0..fold.c {
                    let idx = (low.ofmap)(row, fold.col_base + j);
                    out.push(rec(drain_start + d as u64, Direction::W, Region::Ofmap, cfg.ofmap_offset, idx));
                }
            }
            out[first..].sort_by_key(|r| r.cycle);
            start += fold_cycles(&fold);
        }
    }
    Ok(out)
}

pub fn write_trace_csv<W: Write>(mut w: W, records: &[TraceRecord]) -> io::Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for r in records {
        let dir = match r.dir {
            Direction::R => 'R',
            Direction::W => 'W',
        };
        writeln!(w, "{},{dir},{},{},{}", r.cycle, r.region, r.address, r.bytes)?;
    }
    Ok(())
}
