use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::net::{self, Architecture};
use super::quant::{sign, ternarize, ternary_to_array};
use super::{Hyper, LabeledDataset, MpError, Phase, TrainState};
use crate::topology::{NetworkTopology, Shape3};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub phase: Phase,
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
}

/// Samples pushed through the frozen convolutions at once.
pub(crate) const EVAL_CHUNK: usize = 500;

/// A freshly initialised step-1 state; the same RNG stream then drives
/// the minibatch shuffles.
fn init_state(topology: &NetworkTopology, input: Shape3, hyper: &Hyper, rng: &mut ChaCha8Rng) -> Result<TrainState, MpError> {
    let arch = Architecture::new(topology, input)?;
    let (conv, fc) = arch.init_params(rng);
    Ok(TrainState {
        topology: topology.clone(),
        input_shape: input,
        conv_weights: conv,
        fc_ternary: fc.iter().map(ternarize).collect(),
        fc_shadow_weights: fc,
        phase: Phase::Step1,
        hyper: hyper.clone(),
        neuron_slope: crate::imac::CrossbarConfig::default().neuron_slope,
    })
}

fn check_data(arch: &Architecture, data: &LabeledDataset) -> Result<(), MpError> {
    if data.sample_len() != arch.input_len() {
        return Err(MpError::Config(format!(
            "samples have {} values, network expects {}",
            data.sample_len(),
            arch.input_len()
        )));
    }
    if data.classes() > arch.classes() {
        return Err(MpError::Config(format!("{} classes but {} network outputs", data.classes(), arch.classes())));
    }
    Ok(())
}

fn sgd(param: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    for ((p, v), g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

pub fn train_step1(topology: &NetworkTopology, data: &LabeledDataset, hyper: &Hyper) -> Result<TrainState, MpError> {
    train_step1_observed(topology, data, hyper, &mut |_| {})
}

/// Minibatch SGD with momentum over every parameter, softmax
/// cross-entropy on the logits.
pub fn train_step1_observed(
    topology: &NetworkTopology,
    data: &LabeledDataset,
    hyper: &Hyper,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<TrainState, MpError> {
    hyper.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut state = init_state(topology, data.shape(), hyper, &mut rng)?;
    let arch = state.arch()?;
    check_data(&arch, data)?;

    let mut v_conv: Vec<(Array2<f64>, Array1<f64>)> =
        state.conv_weights.iter().map(|p| (Array2::zeros(p.w.dim()), Array1::zeros(p.b.len()))).collect();
    let mut v_fc: Vec<Array2<f64>> = state.fc_shadow_weights.iter().map(|w| Array2::zeros(w.dim())).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut lr = hyper.learning_rate;

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let labels: Vec<u8> = batch.iter().map(|&i| data.labels()[i]).collect();
            let (loss, grads) =
                net::step1_loss_grads(&arch, &state.conv_weights, &state.fc_shadow_weights, data.batch(batch), &labels);
            if !loss.is_finite() {
                return Err(MpError::Diverged { epoch, loss });
            }
            total += loss * batch.len() as f64;
            for ((p, v), (gw, gb)) in state.conv_weights.iter_mut().zip(&mut v_conv).zip(&grads.conv) {
                sgd(slice_mut(&mut p.w), slice_mut(&mut v.0), gw.as_slice().unwrap(), lr, hyper.momentum);
                sgd(p.b.as_slice_mut().unwrap(), v.1.as_slice_mut().unwrap(), gb.as_slice().unwrap(), lr, hyper.momentum);
            }
            for ((w, v), g) in state.fc_shadow_weights.iter_mut().zip(&mut v_fc).zip(&grads.fc) {
                sgd(slice_mut(w), slice_mut(v), g.as_slice().unwrap(), lr, hyper.momentum);
            }
        }
        state.fc_ternary = state.fc_shadow_weights.iter().map(ternarize).collect();
        on_epoch(&EpochStats { phase: Phase::Step1, epoch, mean_loss: total / data.len() as f64, learning_rate: lr });
        lr *= hyper.lr_decay;
    }
    Ok(state)
}

/// Ternary FC block on sign inputs. Returns the input followed by every
/// layer's output: sigmoid activations for hidden layers, pre-activations
/// for the last.
pub(crate) fn step2_forward(x: Array2<f64>, ternary: &[Array2<f64>], slope: f64) -> Vec<Array2<f64>> {
    let mut acts = vec![x];
    for (l, t) in ternary.iter().enumerate() {
        let mut u = acts[l].dot(t);
        if l + 1 < ternary.len() {
            u.mapv_inplace(|v| 1.0 / (1.0 + (-slope * v).exp()));
        }
        acts.push(u);
    }
    acts
}

/// Sign bits of the frozen network's boundary for every sample, row-major.
pub(crate) fn boundary_signs(arch: &Architecture, state: &TrainState, data: &LabeledDataset) -> Vec<i8> {
    let mut bits = Vec::with_capacity(data.len() * arch.boundary);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let (z, _) = arch.conv_forward(&state.conv_weights, data.batch(chunk), false);
        bits.extend(z.iter().map(|&v| sign(v) as i8));
    }
    bits
}

pub fn train_step2(state: &TrainState, data: &LabeledDataset, hyper: &Hyper, neuron_slope: f64) -> Result<TrainState, MpError> {
    train_step2_observed(state, data, hyper, neuron_slope, &mut |_| {})
}

/// Retrains the FC block only. Forward weights are the ternarised shadow
/// weights and the gradient passes straight through the quantiser to the
/// shadow weights. The convolutions are frozen, so no gradient crosses the
/// sign boundary and the boundary bits are computed once up front.
pub fn train_step2_observed(
    state: &TrainState,
    data: &LabeledDataset,
    hyper: &Hyper,
    neuron_slope: f64,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<TrainState, MpError> {
    if state.phase != Phase::Step1 {
        return Err(MpError::State("step 2 starts from a step-1 state".into()));
    }
    hyper.check()?;
    if !(neuron_slope > 0.0 && neuron_slope.is_finite()) {
        return Err(MpError::Config("neuron slope must be positive".into()));
    }
    let arch = state.arch()?;
    check_data(&arch, data)?;

    let mut next = state.clone();
    next.phase = Phase::Step2;
    next.hyper = hyper.clone();
    next.neuron_slope = neuron_slope;
    next.fc_ternary = next.fc_shadow_weights.iter().map(ternarize).collect();

    let width = arch.boundary;
    let bits = boundary_signs(&arch, state, data);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut velocity: Vec<Array2<f64>> = next.fc_shadow_weights.iter().map(|w| Array2::zeros(w.dim())).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut lr = hyper.learning_rate;

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let mut x = Array2::zeros((batch.len(), width));
            for (mut row, &i) in x.rows_mut().into_iter().zip(batch) {
                for (d, &b) in row.iter_mut().zip(&bits[i * width..(i + 1) * width]) {
                    *d = b as f64;
                }
            }
            let labels: Vec<u8> = batch.iter().map(|&i| data.labels()[i]).collect();
            let ternary: Vec<Array2<f64>> = next.fc_ternary.iter().map(ternary_to_array).collect();
            let acts = step2_forward(x, &ternary, neuron_slope);
            let (loss, mut d) = net::softmax_ce(acts.last().unwrap(), &labels);
            if !loss.is_finite() {
                return Err(MpError::Diverged { epoch, loss });
            }
            total += loss * batch.len() as f64;

            for l in (0..ternary.len()).rev() {
                let grad = acts[l].t().dot(&d);
                if l > 0 {
                    d = d.dot(&ternary[l].t());
                    d.zip_mut_with(&acts[l], |g, &a| *g *= neuron_slope * a * (1.0 - a));
                }
                sgd(
                    slice_mut(&mut next.fc_shadow_weights[l]),
                    slice_mut(&mut velocity[l]),
                    grad.as_slice().unwrap(),
                    lr,
                    hyper.momentum,
                );
            }
            next.fc_ternary = next.fc_shadow_weights.iter().map(ternarize).collect();
        }
        on_epoch(&EpochStats { phase: Phase::Step2, epoch, mean_loss: total / data.len() as f64, learning_rate: lr });
        lr *= hyper.lr_decay;
    }
    Ok(next)
}
