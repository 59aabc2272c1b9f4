//! Layer placement and end-to-end accounting for TPU-only and TPU+IMAC runs.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::imac::{subarrays_required, CrossbarConfig};
use crate::systolic::{layer_cycles, SystolicConfig};
use crate::topology::{Finding, LayerKind, NetworkTopology};

#[derive(Debug, Error)]
pub enum SchedError {
    #[error("cannot plan {topology}: {msg}")]
    Plan { topology: String, msg: String },
    #[error("topology {topology} failed validation: {}", .findings.join("; "))]
    Invalid { topology: String, findings: Vec<String> },
    #[error("empty workload: hybrid run takes zero cycles")]
    EmptyWorkload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Mode {
    TpuOnly,
    Hybrid,
}

impl Mode {
    pub fn is_hybrid(self) -> bool {
        self == Mode::Hybrid
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Unit {
    #[serde(rename = "TPU")]
    Tpu,
    #[serde(rename = "IMAC")]
    Imac,
    #[serde(rename = "AUX")]
    Aux,
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Unit::Tpu => "TPU",
            Unit::Imac => "IMAC",
            Unit::Aux => "AUX",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExecutionPlan {
    pub assignments: Vec<(String, Unit)>,
    pub handoff_index: Option<usize>,
}

pub fn plan(topology: &NetworkTopology, mode: Mode) -> Result<ExecutionPlan, SchedError> {
    let first_dense = topology.first_dense_index();
    if let (Mode::Hybrid, Some(first)) = (mode, first_dense) {
        if let Some(late) = topology.layers[first..].iter().find(|l| l.kind != LayerKind::Dense) {
            return Err(SchedError::Plan {
                topology: topology.name.clone(),
                msg: format!("FC block must be trailing (`{}` follows a Dense layer)", late.name),
            });
        }
    }
    let assignments = topology
        .layers
        .iter()
        .map(|l| {
            let unit = match l.kind {
                LayerKind::Dense if mode.is_hybrid() => Unit::Imac,
                LayerKind::Dense | LayerKind::Conv | LayerKind::DepthwiseConv => Unit::Tpu,
                LayerKind::MaxPool | LayerKind::AvgPool | LayerKind::Flatten => Unit::Aux,
            };
            (l.name.clone(), unit)
        })
        .collect();
    Ok(ExecutionPlan { assignments, handoff_index: if mode.is_hybrid() { first_dense } else { None } })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub layer: String,
    pub kind: LayerKind,
    pub unit: Unit,
    pub cycles: u64,
    pub utilization: f64,
    /// Crossbar subarrays occupied; IMAC layers only.
    pub subarrays: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub sram_bytes: u64,
    pub rram_bytes: u64,
    pub baseline_sram_bytes: u64,
    pub reduction: f64,
}

impl MemoryReport {
    pub fn total_bytes(&self) -> u64 {
        self.sram_bytes + self.rram_bytes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    pub topology: String,
    pub mode: Mode,
    pub per_layer: Vec<LayerReport>,
    pub total_cycles: u64,
    pub baseline_total_cycles: u64,
    pub speedup: f64,
    pub memory: MemoryReport,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

/// Storage model: FP32 for everything on the digital side, two bits per
/// ternary weight (one differential device pair) in the crossbars.
pub fn memory_report(topology: &NetworkTopology, mode: Mode) -> MemoryReport {
    let total = topology.total_params() as u64;
    let baseline = 4 * total;
    let (sram, rram) = match mode {
        Mode::TpuOnly => (baseline, 0),
        Mode::Hybrid => {
            let dense = topology.dense_params() as u64;
            (4 * (total - dense), (dense * 2).div_ceil(8))
        }
    };
    let reduction = if baseline == 0 { 0.0 } else { 1.0 - (sram + rram) as f64 / baseline as f64 };
    MemoryReport { sram_bytes: sram, rram_bytes: rram, baseline_sram_bytes: baseline, reduction }
}

fn run_mode(
    topology: &NetworkTopology,
    sys: &SystolicConfig,
    xbar: &CrossbarConfig,
    mode: Mode,
) -> Result<Vec<LayerReport>, SchedError> {
    let plan = plan(topology, mode)?;
    Ok(topology
        .layers
        .iter()
        .zip(&plan.assignments)
        .map(|(layer, (_, unit))| {
            let (cycles, utilization, subarrays) = match unit {
                // The whole crossbar evaluates in one settling period.
                Unit::Imac => (1, 0.0, Some(subarrays_required((layer.channels_in, layer.num_filters), xbar))),
                _ => {
                    let r = layer_cycles(layer, sys);
                    (r.cycles, r.utilization, None)
                }
            };
            LayerReport { layer: layer.name.clone(), kind: layer.kind, unit: *unit, cycles, utilization, subarrays }
        })
        .collect())
}

/// Simulates `mode` and, separately, the TPU-only baseline. The Conv->FC
/// handoff is free: the sign bits are tapped straight off the accumulators.
pub fn run(
    topology: &NetworkTopology,
    sys: &SystolicConfig,
    xbar: &CrossbarConfig,
    mode: Mode,
) -> Result<SimulationReport, SchedError> {
    let findings = topology.validate_for_array(mode.is_hybrid(), sys.pes());
    let (errors, warnings): (Vec<&Finding>, Vec<&Finding>) = findings.iter().partition(|f| f.is_error());
    if !errors.is_empty() {
        return Err(SchedError::Invalid {
            topology: topology.name.clone(),
            findings: errors.iter().map(|f| f.to_string()).collect(),
        });
    }

    let per_layer = run_mode(topology, sys, xbar, mode)?;
    let total_cycles: u64 = per_layer.iter().map(|l| l.cycles).sum();
    let baseline_total_cycles = match mode {
        Mode::TpuOnly => total_cycles,
        Mode::Hybrid => run_mode(topology, sys, xbar, Mode::TpuOnly)?.iter().map(|l| l.cycles).sum(),
    };
    let mut report = SimulationReport {
        topology: topology.name.clone(),
        mode,
        per_layer,
        total_cycles,
        baseline_total_cycles,
        speedup: 0.0,
        memory: memory_report(topology, mode),
        warnings: warnings.iter().map(|f| f.to_string()).collect(),
        accuracy: None,
    };
    report.speedup = speedup(&report)?;
    Ok(report)
}

pub fn speedup(report: &SimulationReport) -> Result<f64, SchedError> {
    if report.total_cycles == 0 {
        return Err(SchedError::EmptyWorkload);
    }
    Ok(report.baseline_total_cycles as f64 / report.total_cycles as f64)
}

pub const LAYERS_HEADER: &str = "layer,unit,cycles,utilization";
pub const SUMMARY_HEADER: &str = "total_cycles,baseline_cycles,speedup,sram_mb,rram_mb,total_mb,reduction_pct";

/// Decimal megabytes.
pub fn megabytes(bytes: u64) -> f64 {
    bytes as f64 / 1e6
}

impl SimulationReport {
    pub fn layers_csv(&self) -> String {
        let mut out = format!("{LAYERS_HEADER}\n");
        for l in &self.per_layer {
            out.push_str(&format!("{},{},{},{:.6}\n", l.layer, l.unit, l.cycles, l.utilization));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let m = &self.memory;
        format!(
            "{SUMMARY_HEADER}\n{},{},{:.4},{:.3},{:.3},{:.3},{:.2}\n",
            self.total_cycles,
            self.baseline_total_cycles,
            self.speedup,
            megabytes(m.sram_bytes),
            megabytes(m.rram_bytes),
            megabytes(m.total_bytes()),
            m.reduction * 100.0
        )
    }

    pub fn to_json(&self) -> String {
        let m = &self.memory;
        let doc = serde_json::json!({
            "topology": self.topology,
            "mode": match self.mode { Mode::TpuOnly => "tpu", Mode::Hybrid => "tpu-imac" },
            "layers": self.per_layer,
            "summary": {
                "total_cycles": self.total_cycles,
                "baseline_cycles": self.baseline_total_cycles,
                "speedup": self.speedup,
                "sram_mb": round3(megabytes(m.sram_bytes)),
                "rram_mb": round3(megabytes(m.rram_bytes)),
                "total_mb": round3(megabytes(m.total_bytes())),
                "reduction_pct": m.reduction * 100.0,
            },
            "memory": m,
            "warnings": self.warnings,
            "accuracy": self.accuracy,
        });
        let mut text = serde_json::to_string_pretty(&doc).expect("report serialises");
        text.push('\n');
        text
    }
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}
