//! Output-stationary systolic array timing model.
//!
//! Each PE owns one output element. Row operands enter from the left and
//! column operands from the top, both with a one-cycle skew per lane, so
//! PE(i, j) sees its s-th operand pair at cycle `i + j + s`. After the last
//! MAC the accumulators drain down the columns, one row per cycle.

mod events;
mod trace;

pub use events::{replay_gemm, simulate_gemm_events, Replay, ORACLE_MAX_MACS, ORACLE_MAX_PES};
pub use trace::{generate_traces, write_trace_csv, Direction, Region, TraceRecord, TRACE_HEADER};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{GemmShape, LayerKind, LayerSpec, TopologyError};

#[derive(Debug, Error)]
pub enum SystolicError {
    #[error("oracle scale exceeded: {0}")]
    OracleScale(String),
    #[error("address regions overlap: {a} [{a_start:#x}, {a_end:#x}) and {b} [{b_start:#x}, {b_end:#x})")]
    RegionOverlap {
        a: Region,
        a_start: u64,
        a_end: u64,
        b: Region,
        b_start: u64,
        b_end: u64,
    },
    #[error("invalid array configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystolicConfig {
    pub rows: usize,
    pub cols: usize,
    pub ifmap_offset: u64,
    pub filter_offset: u64,
    pub ofmap_offset: u64,
    pub word_bytes: u64,
    /// Cycles per output element charged to pooling layers, which run on
    /// a unit outside the array. Zero by default.
    pub aux_cost_per_elem: u64,
}

impl Default for SystolicConfig {
    fn default() -> Self {
        SystolicConfig {
            rows: 32,
            cols: 32,
            ifmap_offset: 0,
            filter_offset: 100_000_000,
            ofmap_offset: 200_000_000,
            word_bytes: 4,
            aux_cost_per_elem: 0,
        }
    }
}

impl SystolicConfig {
    pub fn with_array(rows: usize, cols: usize) -> Self {
        SystolicConfig { rows, cols, ..Default::default() }
    }

    pub fn pes(&self) -> usize {
        self.rows * self.cols
    }

    pub fn check(&self) -> Result<(), SystolicError> {
        if self.rows == 0 || self.cols == 0 {
            return Err(SystolicError::Config(format!("array must be at least 1x1, got {}x{}", self.rows, self.cols)));
        }
        if self.word_bytes == 0 {
            return Err(SystolicError::Config("word_bytes must be positive".into()));
        }
        Ok(())
    }
}

/// One tile of the output matrix mapped onto the array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fold {
    pub r: usize,
    pub c: usize,
    pub k: usize,
    pub row_base: usize,
    pub col_base: usize,
}

impl Fold {
    /// Fill + compute (`k + r + c - 2`) followed by an `r`-cycle drain.
    pub fn cycles(&self) -> u64 {
        fold_cycles(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycles: u64,
    pub mac_ops: u64,
    pub utilization: f64,
    pub reads_elems: u64,
    pub writes_elems: u64,
}

impl CycleReport {
    fn finish(mut self, pes: usize) -> Self {
        self.utilization = if self.cycles == 0 { 0.0 } else { self.mac_ops as f64 / (pes as f64 * self.cycles as f64) };
        self
    }

    fn add(&mut self, other: &CycleReport) {
        self.cycles += other.cycles;
        self.mac_ops += other.mac_ops;
        self.reads_elems += other.reads_elems;
        self.writes_elems += other.writes_elems;
    }
}

/// Tiles the `m x n` output row-major: `m` runs down the array rows, `n`
/// across the columns.
pub fn fold_schedule(gemm: GemmShape, cfg: &SystolicConfig) -> Vec<Fold> {
    let mut folds = Vec::with_capacity(gemm.m.div_ceil(cfg.rows) * gemm.n.div_ceil(cfg.cols));
    for row_base in (0..gemm.m).step_by(cfg.rows) {
        let r = cfg.rows.min(gemm.m - row_base);
        for col_base in (0..gemm.n).step_by(cfg.cols) {
            let c = cfg.cols.min(gemm.n - col_base);
            folds.push(Fold { r, c, k: gemm.k, row_base, col_base });
        }
    }
    folds
}

pub fn fold_cycles(fold: &Fold) -> u64 {
    (fold.k + 2 * fold.r + fold.c - 2) as u64
}

/// Folds run back to back with no overlap between one drain and the next fill.
pub fn gemm_cycles(gemm: GemmShape, cfg: &SystolicConfig) -> CycleReport {
    let mut report = CycleReport { mac_ops: gemm.macs(), writes_elems: (gemm.m * gemm.n) as u64, ..Default::default() };
    for fold in fold_schedule(gemm, cfg) {
        report.cycles += fold_cycles(&fold);
        report.reads_elems += (fold.k * (fold.r + fold.c)) as u64;
    }
    report.finish(cfg.pes())
}

/// Array cost of one layer. Depthwise convolutions run one single-filter
/// GEMM per channel; pooling goes to the auxiliary unit and flatten is a
/// pure relabelling of the accumulators.
pub fn layer_cycles(layer: &LayerSpec, cfg: &SystolicConfig) -> CycleReport {
    match layer.kind {
        LayerKind::Conv | LayerKind::Dense => gemm_cycles(layer.to_gemm().expect("conv/dense lowers"), cfg),
        LayerKind::DepthwiseConv => {
            let per_channel = gemm_cycles(depthwise_gemm(layer), cfg);
            let mut total = CycleReport::default();
            for _ in 0..layer.channels_in {
                total.add(&per_channel);
            }
            total.finish(cfg.pes())
        }
        LayerKind::MaxPool | LayerKind::AvgPool => CycleReport {
            cycles: cfg.aux_cost_per_elem * layer.output_elems() as u64,
            ..Default::default()
        },
        LayerKind::Flatten => CycleReport::default(),
    }
}

/// The per-channel GEMM of a depthwise layer.
pub fn depthwise_gemm(layer: &LayerSpec) -> GemmShape {
    let (h, w, _) = layer.output_shape();
    GemmShape::new(h * w, layer.filter_h * layer.filter_w, 1)
}
