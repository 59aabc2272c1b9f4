use std::ops::Range;

use ndarray::{concatenate, Array2, Axis};

use super::net::{self, Architecture};
use super::quant::{sign, ternary_to_array};
use super::train::{step2_forward, EVAL_CHUNK};
use super::{LabeledDataset, MpError, Phase, TrainState};
use crate::imac::{self, program_crossbar, Crossbar, CrossbarConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    /// Exact arithmetic.
    Digital,
    /// FC block on programmed crossbars, read out through the ADC.
    Analog,
}

/// Evaluates `f` over consecutive sample ranges on all available cores and
/// stacks the results in sample order.
fn sharded<F>(n: usize, f: F) -> Result<Array2<f64>, MpError>
where
    F: Fn(Range<usize>) -> Result<Array2<f64>, MpError> + Sync,
{
    let ranges: Vec<Range<usize>> = (0..n).step_by(EVAL_CHUNK).map(|s| s..(s + EVAL_CHUNK).min(n)).collect();
    let workers = std::thread::available_parallelism().map_or(1, |p| p.get()).min(ranges.len()).max(1);
    let per_worker = ranges.len().div_ceil(workers);
    let parts: Vec<Result<Vec<Array2<f64>>, MpError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .chunks(per_worker)
            .map(|mine| {
                let f = &f;
                scope.spawn(move || mine.iter().cloned().map(f).collect::<Result<Vec<_>, _>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut blocks = Vec::new();
    for part in parts {
        blocks.extend(part?);
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    Ok(concatenate(Axis(0), &views).expect("equal widths"))
}

fn boundary(arch: &Architecture, state: &TrainState, data: &LabeledDataset, range: Range<usize>) -> Array2<f64> {
    let idx: Vec<usize> = range.collect();
    arch.conv_forward(&state.conv_weights, data.batch(&idx), false).0
}

fn crossbars(state: &TrainState, cfg: &CrossbarConfig, seed: Option<u64>) -> Result<Vec<Crossbar>, MpError> {
    if state.phase != Phase::Step2 {
        return Err(MpError::State("the analog backend needs a step-2 state".into()));
    }
    if cfg.neuron_slope != state.neuron_slope {
        return Err(MpError::Config(format!(
            "crossbar neuron slope {} differs from the trained slope {}",
            cfg.neuron_slope, state.neuron_slope
        )));
    }
    // Each layer draws its device variation from its own stream.
    state
        .fc_ternary
        .iter()
        .enumerate()
        .map(|(l, t)| Ok(program_crossbar(t, cfg, seed.map(|s| s.wrapping_add(l as u64)))?))
        .collect()
}

fn analog_rows(
    arch: &Architecture,
    state: &TrainState,
    data: &LabeledDataset,
    xbars: &[Crossbar],
    adc: bool,
) -> Result<Array2<f64>, MpError> {
    let classes = arch.classes();
    sharded(data.len(), |range| {
        let z = boundary(arch, state, data, range);
        let mut out = Array2::zeros((z.nrows(), classes));
        for (zrow, mut orow) in z.rows().into_iter().zip(out.rows_mut()) {
            let bits: Vec<f64> = zrow.iter().map(|&v| sign(v)).collect();
            let y = if adc { imac::forward_fc(xbars, &bits)? } else { imac::forward_fc_analog(xbars, &bits)? };
            orow.assign(&ndarray::Array1::from(y));
        }
        Ok(out)
    })
}

/// Per-sample class scores, one row per sample.
///
/// Digital step-1 states give the full-precision logits; digital step-2
/// states the exact sigmoid outputs of the ternary FC block; the analog
/// backend gives the ADC codes (as fractions of full scale).
pub fn class_scores(
    state: &TrainState,
    data: &LabeledDataset,
    backend: Backend,
    xbar_cfg: Option<&CrossbarConfig>,
    seed: Option<u64>,
) -> Result<Array2<f64>, MpError> {
    let arch = state.arch()?;
    match backend {
        Backend::Analog => {
            let cfg = xbar_cfg.ok_or_else(|| MpError::Config("analog evaluation needs a crossbar configuration".into()))?;
            let xbars = crossbars(state, cfg, seed)?;
            analog_rows(&arch, state, data, &xbars, true)
        }
        Backend::Digital if state.phase == Phase::Step1 => sharded(data.len(), |range| {
            let idx: Vec<usize> = range.collect();
            Ok(net::step1_logits(&arch, &state.conv_weights, &state.fc_shadow_weights, data.batch(&idx)))
        }),
        Backend::Digital => {
            let ternary: Vec<Array2<f64>> = state.fc_ternary.iter().map(ternary_to_array).collect();
            let s = state.neuron_slope;
            sharded(data.len(), |range| {
                let x = boundary(&arch, state, data, range).mapv(sign);
                let u = step2_forward(x, &ternary, s).pop().unwrap();
                Ok(u.mapv(|v| 1.0 / (1.0 + (-s * v).exp())))
            })
        }
    }
}

/// Final-layer neuron outputs of the crossbars, before the ADC.
pub fn analog_pre_adc(
    state: &TrainState,
    data: &LabeledDataset,
    xbar_cfg: &CrossbarConfig,
    seed: Option<u64>,
) -> Result<Array2<f64>, MpError> {
    let arch = state.arch()?;
    let xbars = crossbars(state, xbar_cfg, seed)?;
    analog_rows(&arch, state, data, &xbars, false)
}

/// Predicted class per sample; ties resolve to the lowest class index.
pub fn predict(
    state: &TrainState,
    data: &LabeledDataset,
    backend: Backend,
    xbar_cfg: Option<&CrossbarConfig>,
    seed: Option<u64>,
) -> Result<Vec<usize>, MpError> {
    let scores = class_scores(state, data, backend, xbar_cfg, seed)?;
    Ok(scores.rows().into_iter().map(|r| imac::argmax(r.as_slice().expect("row-major"))).collect())
}

/// Fraction of correctly classified samples.
pub fn evaluate(
    state: &TrainState,
    data: &LabeledDataset,
    backend: Backend,
    xbar_cfg: Option<&CrossbarConfig>,
    seed: Option<u64>,
) -> Result<f64, MpError> {
    let predictions = predict(state, data, backend, xbar_cfg, seed)?;
    let correct = predictions.iter().zip(data.labels()).filter(|(&p, &y)| p == y as usize).count();
    Ok(correct as f64 / data.len() as f64)
}
