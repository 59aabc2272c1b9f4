//! Two-step mixed-precision training.
//!
//! Step 1 trains the whole network in full precision with a tanh at the
//! conv/FC boundary. Step 2 freezes the convolutions, feeds the FC block the
//! sign of the boundary activations, and retrains the FC layers with ternary
//! forward weights and real-valued shadow weights, so that the result maps
//! directly onto the crossbars.

mod eval;
mod export;
mod mnist;
mod net;
mod quant;
mod train;

pub use eval::{analog_pre_adc, class_scores, evaluate, predict, Backend};
pub use export::{export_weights, import_weights, read_manifest, Manifest, ManifestEntry, MANIFEST_FILE};
pub use mnist::{load_mnist, LabeledDataset};
pub use net::ConvParams;
pub use quant::{sign_binarize, ternarize, ternary_to_array};
pub use train::{train_step1, train_step1_observed, train_step2, train_step2_observed, EpochStats};

use ndarray::Array2;
use thiserror::Error;

use crate::imac::{ImacError, TernaryMatrix};
use crate::topology::{NetworkTopology, Shape3};

#[derive(Debug, Error)]
pub enum MpError {
    #[error("I/O error: {0}")]
    Io(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("topology not trainable: {0}")]
    Topology(String),
    #[error("training state error: {0}")]
    State(String),
    #[error("training diverged: loss became {loss} in epoch {epoch}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("manifest mismatch: {0}")]
    Manifest(String),
    #[error(transparent)]
    Imac(#[from] ImacError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Step1,
    Step2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyper {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate multiplier applied after every epoch.
    pub lr_decay: f64,
    pub seed: u64,
}

impl Hyper {
    pub fn step1(seed: u64) -> Self {
        Hyper { learning_rate: 0.02, momentum: 0.9, epochs: 10, batch_size: 32, lr_decay: 0.7, seed }
    }

    pub fn step2(seed: u64) -> Self {
        Hyper { learning_rate: 0.01, momentum: 0.9, epochs: 5, batch_size: 32, lr_decay: 1.0, seed }
    }

    pub fn check(&self) -> Result<(), MpError> {
        let bad = |m: &str| Err(MpError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub topology: NetworkTopology,
    pub input_shape: Shape3,
    pub conv_weights: Vec<ConvParams>,
    /// Real-valued FC weights, `(inputs, outputs)`, updated by backprop.
    pub fc_shadow_weights: Vec<Array2<f64>>,
    /// Forward-pass FC weights, always `ternarize(fc_shadow_weights)`.
    pub fc_ternary: Vec<TernaryMatrix>,
    pub phase: Phase,
    pub hyper: Hyper,
    /// Sigmoid slope the FC neurons were trained with (step 2).
    pub neuron_slope: f64,
}

impl TrainState {
    pub(crate) fn arch(&self) -> Result<net::Architecture, MpError> {
        net::Architecture::new(&self.topology, self.input_shape)
    }

    /// FNV-1a over the bit patterns of every conv parameter.
    pub fn conv_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.conv_weights {
            for v in p.w.iter().chain(p.b.iter()) {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        h
    }
}
