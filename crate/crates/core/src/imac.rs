//! Functional model of the analog in-memory FC engine.
//!
//! A ternary weight is stored as a differential pair of memristive devices;
//! the column current difference, normalised by `v_read * (g_on - g_off)`,
//! is the exact ternary dot product when the devices are ideal. Crossbar
//! rows are layer inputs and columns are layer outputs.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImacError {
    #[error("weight {0} is not ternary")]
    Domain(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid crossbar configuration: {0}")]
    Config(String),
    #[error("ADC input {0} outside [0, 1]")]
    AdcRange(f64),
    #[error("ternary weight file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossbarConfig {
    pub sub_rows: usize,
    pub sub_cols: usize,
    pub g_on: f64,
    pub g_off: f64,
    pub v_read: f64,
    pub neuron_slope: f64,
    pub adc_bits: u32,
    pub variation_sigma: f64,
}

impl Default for CrossbarConfig {
    fn default() -> Self {
        CrossbarConfig {
            sub_rows: 256,
            sub_cols: 256,
            g_on: 100e-6,
            g_off: 1e-6,
            v_read: 0.1,
            neuron_slope: 0.25,
            adc_bits: 8,
            variation_sigma: 0.0,
        }
    }
}

impl CrossbarConfig {
    pub fn check(&self) -> Result<(), ImacError> {
        let bad = |m: &str| Err(ImacError::Config(m.to_string()));
        if !(self.g_off > 0.0 && self.g_on > self.g_off) {
            return bad("need g_on > g_off > 0");
        }
        if self.sub_rows == 0 || self.sub_cols == 0 {
            return bad("subarray dimensions must be positive");
        }
        if !(1..=32).contains(&self.adc_bits) {
            return bad("adc_bits must be in 1..=32");
        }
        if !(self.variation_sigma >= 0.0 && self.variation_sigma.is_finite()) {
            return bad("variation_sigma must be a non-negative number");
        }
        if !(self.v_read > 0.0) {
            return bad("v_read must be positive");
        }
        if !(self.neuron_slope > 0.0 && self.neuron_slope.is_finite()) {
            return bad("neuron_slope must be positive");
        }
        Ok(())
    }

    /// One ADC step.
    pub fn lsb(&self) -> f64 {
        1.0 / self.levels()
    }

    fn levels(&self) -> f64 {
        ((1u64 << self.adc_bits) - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConductancePair {
    pub g_plus: f64,
    pub g_minus: f64,
}

/// Row-major matrix over {-1, 0, +1}; rows are inputs, columns outputs.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TernaryMatrix {
    rows: usize,
    cols: usize,
    values: Vec<i8>,
}

impl TernaryMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<i8>) -> Result<Self, ImacError> {
        if values.len() != rows * cols {
            return Err(ImacError::Dimension(format!("{} values for a {rows}x{cols} matrix", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(-1..=1).contains(*v)) {
            return Err(ImacError::Domain(v.to_string()));
        }
        Ok(TernaryMatrix { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        TernaryMatrix { rows, cols, values: vec![0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> i8 {
        self.values[row * self.cols + col]
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    /// Exact integer product `x^T W` for an input vector of length `rows`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(&self.values[i * self.cols..(i + 1) * self.cols]) {
                *o += xi * w as f64;
            }
        }
        out
    }

    /// 16-byte header (rows, cols as little-endian u64) then row-major i8.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ImacError> {
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        let bytes: Vec<u8> = self.values.iter().map(|&v| v as u8).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ImacError> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|_| ImacError::Format("truncated header".into()))?;
        let rows = u64::from_le_bytes(header[..8].try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(header[8..].try_into().unwrap()) as usize;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        let expected = rows.checked_mul(cols).ok_or_else(|| ImacError::Format("dimensions overflow".into()))?;
        if body.len() != expected {
            return Err(ImacError::Format(format!("{rows}x{cols} header but {} entries", body.len())));
        }
        Self::new(rows, cols, body.into_iter().map(|b| b as i8).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), ImacError> {
        let mut buf = Vec::with_capacity(16 + self.values.len());
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ImacError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

pub fn encode_ternary(w: i8, cfg: &CrossbarConfig) -> Result<ConductancePair, ImacError> {
    let (g_plus, g_minus) = match w {
        1 => (cfg.g_on, cfg.g_off),
        -1 => (cfg.g_off, cfg.g_on),
        0 => (cfg.g_off, cfg.g_off),
        other => return Err(ImacError::Domain(other.to_string())),
    };
    Ok(ConductancePair { g_plus, g_minus })
}

pub fn decode(pair: ConductancePair, cfg: &CrossbarConfig) -> f64 {
    (pair.g_plus - pair.g_minus) / (cfg.g_on - cfg.g_off)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Crossbar {
    config: CrossbarConfig,
    pairs: Vec<ConductancePair>,
    inputs: usize,
    outputs: usize,
    /// Decoded weights, cached at programming time; the devices never change
    /// after programming.
    effective: Vec<f64>,
}

impl Crossbar {
    pub fn config(&self) -> &CrossbarConfig {
        &self.config
    }

    pub fn layer_dims(&self) -> (usize, usize) {
        (self.inputs, self.outputs)
    }

    pub fn pair(&self, input: usize, output: usize) -> ConductancePair {
        self.pairs[input * self.outputs + output]
    }

    pub fn pairs(&self) -> &[ConductancePair] {
        &self.pairs
    }

    /// `out_j = sum_i x_i * decode(pair_ij)`. The first layer is driven by
    /// sign bits; deeper layers by the previous layer's neuron voltages.
    pub fn mvm(&self, x: &[f64]) -> Result<Vec<f64>, ImacError> {
        if x.len() != self.inputs {
            return Err(ImacError::Dimension(format!("input of length {} for {} crossbar rows", x.len(), self.inputs)));
        }
        let mut out = vec![0.0; self.outputs];
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.effective[i * self.outputs..(i + 1) * self.outputs];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        Ok(out)
    }
}

/// Encodes every weight; with `variation_sigma > 0` each device is scaled
/// by an independent `N(1, sigma)` factor, truncated at six sigma and kept
/// strictly positive.
pub fn program_crossbar(weights: &TernaryMatrix, cfg: &CrossbarConfig, seed: Option<u64>) -> Result<Crossbar, ImacError> {
    cfg.check()?;
    let mut pairs = weights
        .values
        .iter()
        .map(|&w| encode_ternary(w, cfg))
        .collect::<Result<Vec<_>, _>>()?;

    let sigma = cfg.variation_sigma;
    if sigma > 0.0 {
        let seed = seed.ok_or_else(|| ImacError::Config("variation_sigma > 0 requires a seed".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(1.0, sigma).expect("finite sigma");
        let (lo, hi) = ((1.0 - 6.0 * sigma).max(1e-6), 1.0 + 6.0 * sigma);
        for p in &mut pairs {
            p.g_plus *= normal.sample(&mut rng).clamp(lo, hi);
            p.g_minus *= normal.sample(&mut rng).clamp(lo, hi);
        }
    }

    let effective = pairs.iter().map(|&p| decode(p, cfg)).collect();
    Ok(Crossbar { config: cfg.clone(), pairs, inputs: weights.rows, outputs: weights.cols, effective })
}

pub fn neuron(u: f64, cfg: &CrossbarConfig) -> f64 {
    1.0 / (1.0 + (-cfg.neuron_slope * u).exp())
}

/// Uniform quantisation onto `2^bits` levels spanning [0, 1].
pub fn adc_quantize(y: &[f64], cfg: &CrossbarConfig) -> Result<Vec<f64>, ImacError> {
    let levels = cfg.levels();
    y.iter()
        .map(|&v| {
            if !(0.0..=1.0).contains(&v) {
                return Err(ImacError::AdcRange(v));
            }
            Ok((v * levels).round() / levels)
        })
        .collect()
}

/// Analog neuron outputs of the last layer, before the ADC.
pub fn forward_fc_analog(xbars: &[Crossbar], sign_bits: &[f64]) -> Result<Vec<f64>, ImacError> {
    let first = xbars.first().ok_or_else(|| ImacError::Dimension("no FC layers".into()))?;
    if sign_bits.len() != first.inputs {
        return Err(ImacError::Dimension(format!(
            "{} sign bits for a {}-input first layer",
            sign_bits.len(),
            first.inputs
        )));
    }
    for pair in xbars.windows(2) {
        if pair[0].outputs != pair[1].inputs {
            return Err(ImacError::Dimension(format!(
                "layer with {} outputs feeds a layer with {} inputs",
                pair[0].outputs, pair[1].inputs
            )));
        }
    }
    let mut act = sign_bits.to_vec();
    for xbar in xbars {
        act = xbar.mvm(&act)?.into_iter().map(|u| neuron(u, &xbar.config)).collect();
    }
    Ok(act)
}

/// The full FC block: chained crossbars with continuous activations between
/// layers and a single ADC on the final outputs.
pub fn forward_fc(xbars: &[Crossbar], sign_bits: &[f64]) -> Result<Vec<f64>, ImacError> {
    let analog = forward_fc_analog(xbars, sign_bits)?;
    adc_quantize(&analog, &xbars.last().expect("non-empty").config)
}

pub fn subarrays_required(layer_dims: (usize, usize), cfg: &CrossbarConfig) -> usize {
    layer_dims.0.div_ceil(cfg.sub_rows) * layer_dims.1.div_ceil(cfg.sub_cols)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> CrossbarConfig {
        CrossbarConfig::default()
    }

    #[test]
    fn encoding_table() {
        let c = cfg();
        assert_eq!(encode_ternary(1, &c).unwrap(), ConductancePair { g_plus: c.g_on, g_minus: c.g_off });
        assert_eq!(encode_ternary(-1, &c).unwrap(), ConductancePair { g_plus: c.g_off, g_minus: c.g_on });
        assert_eq!(encode_ternary(0, &c).unwrap(), ConductancePair { g_plus: c.g_off, g_minus: c.g_off });
        assert!(encode_ternary(2, &c).is_err());
    }

    #[test]
    fn decode_values() {
        let c = cfg();
        for w in [-1i8, 0, 1] {
            assert_eq!(decode(encode_ternary(w, &c).unwrap(), &c), w as f64);
        }
        let perturbed = ConductancePair { g_plus: 1.05 * c.g_on, g_minus: c.g_off };
        let expect = 1.0 + 0.05 * c.g_on / (c.g_on - c.g_off);
        assert!((decode(perturbed, &c) - expect).abs() < 1e-12);
    }

    #[test]
    fn identity_roundtrip_and_mvm() {
        let x = program_crossbar(&TernaryMatrix::identity(3), &cfg(), None).unwrap();
        assert_eq!(x.mvm(&[1.0, -1.0, 1.0]).unwrap(), vec![1.0, -1.0, 1.0]);

        let w = TernaryMatrix::new(2, 1, vec![1, -1]).unwrap();
        assert_eq!(program_crossbar(&w, &cfg(), None).unwrap().mvm(&[1.0, 1.0]).unwrap(), vec![0.0]);
        let w = TernaryMatrix::new(10, 1, vec![1; 10]).unwrap();
        assert_eq!(program_crossbar(&w, &cfg(), None).unwrap().mvm(&[1.0; 10]).unwrap(), vec![10.0]);
        assert!(program_crossbar(&w, &cfg(), None).unwrap().mvm(&[1.0; 3]).is_err());
    }

    #[test]
    fn variation_needs_seed_and_is_deterministic() {
        let noisy = CrossbarConfig { variation_sigma: 0.1, ..cfg() };
        let w = TernaryMatrix::identity(8);
        assert!(program_crossbar(&w, &noisy, None).is_err());
        let a = program_crossbar(&w, &noisy, Some(9)).unwrap();
        let b = program_crossbar(&w, &noisy, Some(9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, program_crossbar(&w, &noisy, Some(10)).unwrap());
        assert!(a.pairs().iter().all(|p| p.g_plus > 0.0 && p.g_minus > 0.0));
    }

    #[test]
    fn variation_error_magnitude() {
        let sigma = 0.1;
        let c = CrossbarConfig { variation_sigma: sigma, ..cfg() };
        let w = TernaryMatrix::new(100, 100, vec![1; 10_000]).unwrap();
        let x = program_crossbar(&w, &c, Some(3)).unwrap();
        let mean_err: f64 = x.pairs().iter().map(|&p| (decode(p, &c) - 1.0).abs()).sum::<f64>() / 10_000.0;
        let expect = sigma * c.g_on * (2.0 / std::f64::consts::PI).sqrt() / (c.g_on - c.g_off);
        assert!((mean_err / expect - 1.0).abs() < 0.1, "{mean_err} vs {expect}");
    }

    #[test]
    fn neuron_values() {
        assert_eq!(neuron(0.0, &cfg()), 0.5);
        let unit = CrossbarConfig { neuron_slope: 1.0, ..cfg() };
        assert!((neuron(2.0, &unit) - 0.8808).abs() < 1e-4);
        assert!(neuron(1e3, &unit) > 0.999_999);
    }

    #[test]
    fn adc_levels() {
        let c = cfg();
        assert_eq!(adc_quantize(&[0.5], &c).unwrap(), vec![128.0 / 255.0]);
        assert_eq!(adc_quantize(&[0.0, 1.0], &c).unwrap(), vec![0.0, 1.0]);
        let one_bit = CrossbarConfig { adc_bits: 1, ..c.clone() };
        assert_eq!(adc_quantize(&[0.2, 0.7], &one_bit).unwrap(), vec![0.0, 1.0]);
        assert!(adc_quantize(&[1.2], &c).is_err());
    }

    #[test]
    fn fc_forward() {
        let unit = CrossbarConfig { neuron_slope: 1.0, ..cfg() };
        let w = TernaryMatrix::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let x = program_crossbar(&w, &unit, None).unwrap();
        let out = forward_fc(&[x], &[1.0, -1.0]).unwrap();
        let s = |u: f64| 1.0 / (1.0 + (-u).exp());
        assert_eq!(out, adc_quantize(&[s(1.0), s(-1.0)], &unit).unwrap());

        let zero = program_crossbar(&TernaryMatrix::zeros(3, 2), &unit, None).unwrap();
        assert_eq!(forward_fc(std::slice::from_ref(&zero), &[1.0; 3]).unwrap(), vec![128.0 / 255.0; 2]);
        let two = program_crossbar(&TernaryMatrix::zeros(2, 4), &unit, None).unwrap();
        assert!(forward_fc(&[zero.clone(), zero], &[1.0; 3]).is_err());
        assert!(forward_fc(&[two], &[1.0; 3]).is_err());
    }

    #[test]
    fn subarray_counts() {
        let c = cfg();
        assert_eq!(subarrays_required((1024, 1024), &c), 16);
        assert_eq!(subarrays_required((1024, 10), &c), 4);
        assert_eq!(subarrays_required((10, 10), &c), 1);
    }

    #[test]
    fn ternary_file_roundtrip() {
        let m = TernaryMatrix::new(2, 3, vec![1, 0, -1, -1, 1, 0]).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 6);
        assert_eq!(&buf[..8], &2u64.to_le_bytes());
        assert_eq!(TernaryMatrix::read_from(&buf[..]).unwrap(), m);
        assert!(TernaryMatrix::read_from(&buf[..20]).is_err());
        let mut bad = buf.clone();
        bad[16] = 5;
        assert!(TernaryMatrix::read_from(&bad[..]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1, 0.9, 0.9]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }
}
