//! The fixed operator set the trainer needs, with hand-written backward
//! passes. Activations are NHWC and flattened per sample, so a batch is a
//! `(batch, h * w * c)` matrix throughout.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::MpError;
use crate::topology::{LayerKind, NetworkTopology, Shape3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum OpKind {
    Conv,
    Depthwise,
    MaxPool,
    AvgPool,
    Flatten,
}

#[derive(Debug, Clone)]
pub(crate) struct Op {
    pub name: String,
    pub kind: OpKind,
    pub input: Shape3,
    pub pad: (usize, usize),
    pub filter: (usize, usize),
    pub stride: usize,
    pub output: Shape3,
    pub relu: bool,
    pub param: Option<usize>,
}

impl Op {
    fn taps(&self) -> usize {
        self.filter.0 * self.filter.1
    }

    fn rows(&self, batch: usize) -> usize {
        batch * self.output.0 * self.output.1
    }
}

/// Conv weights are `(taps * c_in, c_out)`, matching the row-major
/// `[fh, fw, c_in, c_out]` export layout; depthwise weights are `(taps, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub name: String,
    pub depthwise: bool,
    pub filter: (usize, usize),
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// The trainable structure behind a topology: spatial ops up to the FC
/// boundary, then a chain of bias-free dense layers.
#[derive(Debug, Clone)]
pub(crate) struct Architecture {
    pub ops: Vec<Op>,
    pub boundary: usize,
    pub fc_dims: Vec<(usize, usize)>,
    pub fc_names: Vec<String>,
}

impl Architecture {
    pub fn new(topology: &NetworkTopology, input: Shape3) -> Result<Self, MpError> {
        let bad = |msg: String| MpError::Topology(format!("{}: {msg}", topology.name));
        let first_dense = topology
            .first_dense_index()
            .ok_or_else(|| bad("no Dense layers to train".into()))?;
        if let Some(l) = topology.layers[first_dense..].iter().find(|l| l.kind != LayerKind::Dense) {
            return Err(bad(format!("`{}` follows the FC block", l.name)));
        }

        let mut ops = Vec::new();
        let mut shape = input;
        let mut n_params = 0;
        for layer in &topology.layers[..first_dense] {
            let (h, w, c) = shape;
            if layer.kind == LayerKind::Flatten {
                if layer.input_shape() != shape {
                    return Err(bad(format!("`{}` expects {:?}, gets {shape:?}", layer.name, layer.input_shape())));
                }
                let out = (1, 1, h * w * c);
                ops.push(Op {
                    name: layer.name.clone(),
                    kind: OpKind::Flatten,
                    input: shape,
                    pad: (0, 0),
                    filter: (1, 1),
                    stride: 1,
                    output: out,
                    relu: false,
                    param: None,
                });
                shape = out;
                continue;
            }
            let fits = |declared: usize, actual: usize| declared >= actual && (declared - actual).is_multiple_of(2);
            if layer.channels_in != c || !fits(layer.ifmap_h, h) || !fits(layer.ifmap_w, w) {
                return Err(bad(format!(
                    "`{}` declares {}x{}x{}, incoming map is {h}x{w}x{c}",
                    layer.name, layer.ifmap_h, layer.ifmap_w, layer.channels_in
                )));
            }
            let kind = match layer.kind {
                LayerKind::Conv => OpKind::Conv,
                LayerKind::DepthwiseConv => OpKind::Depthwise,
                LayerKind::MaxPool => OpKind::MaxPool,
                LayerKind::AvgPool => OpKind::AvgPool,
                LayerKind::Flatten | LayerKind::Dense => unreachable!(),
            };
            let param = matches!(kind, OpKind::Conv | OpKind::Depthwise).then(|| {
                n_params += 1;
                n_params - 1
            });
            let output = layer.output_shape();
            ops.push(Op {
                name: layer.name.clone(),
                kind,
                input: shape,
                pad: ((layer.ifmap_h - h) / 2, (layer.ifmap_w - w) / 2),
                filter: (layer.filter_h, layer.filter_w),
                stride: layer.stride,
                output,
                relu: param.is_some(),
                param,
            });
            shape = output;
        }
        // The last conv feeds the boundary raw: tanh in step 1, the sign tap in step 2.
        if let Some(last) = ops.iter_mut().rev().find(|o| o.param.is_some()) {
            last.relu = false;
        }

        let boundary = shape.0 * shape.1 * shape.2;
        let mut fc_dims = Vec::new();
        let mut width = boundary;
        for layer in &topology.layers[first_dense..] {
            if layer.channels_in != width {
                return Err(bad(format!("`{}` expects {} inputs, gets {width}", layer.name, layer.channels_in)));
            }
            fc_dims.push((layer.channels_in, layer.num_filters));
            width = layer.num_filters;
        }
        let fc_names = topology.dense_layers().map(|l| l.name.clone()).collect();
        Ok(Architecture { ops, boundary, fc_dims, fc_names })
    }

    pub fn input_len(&self) -> usize {
        self.ops.first().map_or(self.boundary, |o| o.input.0 * o.input.1 * o.input.2)
    }

    pub fn classes(&self) -> usize {
        self.fc_dims.last().expect("at least one dense layer").1
    }

    /// He-normal weights, zero biases.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> (Vec<ConvParams>, Vec<Array2<f64>>) {
        let mut he = |rows: usize, cols: usize, fan_in: usize| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
        };
        let mut conv = Vec::new();
        for op in self.ops.iter().filter(|o| o.param.is_some()) {
            let taps = op.taps();
            let (cin, cout) = (op.input.2, op.output.2);
            let (w, depthwise) = match op.kind {
                OpKind::Depthwise => (he(taps, cin, taps), true),
                _ => (he(taps * cin, cout, taps * cin), false),
            };
            conv.push(ConvParams { name: op.name.clone(), depthwise, filter: op.filter, w, b: Array1::zeros(cout) });
        }
        let fc = self.fc_dims.iter().map(|&(i, o)| he(i, o, i)).collect();
        (conv, fc)
    }

    /// Conv parameter slots with every value zero.
    pub fn zero_params(&self) -> Vec<ConvParams> {
        self.ops
            .iter()
            .filter(|o| o.param.is_some())
            .map(|op| {
                let (taps, cin, cout) = (op.taps(), op.input.2, op.output.2);
                let depthwise = op.kind == OpKind::Depthwise;
                let dim = if depthwise { (taps, cin) } else { (taps * cin, cout) };
                ConvParams { name: op.name.clone(), depthwise, filter: op.filter, w: Array2::zeros(dim), b: Array1::zeros(cout) }
            })
            .collect()
    }

    /// Spatial part of the network; returns the boundary pre-activations.
    pub fn conv_forward(&self, params: &[ConvParams], x: Array2<f64>, keep: bool) -> (Array2<f64>, Vec<Cache>) {
        let batch = x.nrows();
        let mut act = x;
        let mut caches = Vec::new();
        for op in &self.ops {
            let (next, cache) = op_forward(op, params, &act, batch);
            if keep {
                caches.push(cache);
            }
            act = next;
        }
        (act, caches)
    }

    /// Gradients of the conv parameters given the boundary gradient.
    pub fn conv_backward(&self, params: &[ConvParams], caches: Vec<Cache>, dz: Array2<f64>) -> Vec<(Array2<f64>, Array1<f64>)> {
        let batch = dz.nrows();
        let mut grads: Vec<Option<(Array2<f64>, Array1<f64>)>> = vec![None; params.len()];
        let mut d = dz;
        for (idx, (op, cache)) in self.ops.iter().zip(caches).enumerate().rev() {
            let need_input = idx > 0;
            let (dx, g) = op_backward(op, params, cache, d, batch, need_input);
            if let (Some(p), Some(g)) = (op.param, g) {
                grads[p] = Some(g);
            }
            match dx {
                Some(dx) => d = dx,
                None => break,
            }
        }
        grads.into_iter().map(|g| g.expect("every conv visited")).collect()
    }
}

pub(crate) enum Cache {
    Conv { cols: Array2<f64>, out: Array2<f64> },
    Depthwise { cols: Array2<f64>, out: Array2<f64> },
    MaxPool { argmax: Vec<u32> },
    AvgPool,
    Flatten,
}

fn im2col(op: &Op, x: &[f64], batch: usize) -> Array2<f64> {
    let (h, w, c) = op.input;
    let (ho, wo, _) = op.output;
    let (fh, fw) = op.filter;
    let kk = fh * fw * c;
    let mut cols = Array2::zeros((batch * ho * wo, kk));
    let dst = cols.as_slice_mut().expect("standard layout");
    for n in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((n * ho + oy) * wo + ox) * kk;
                for fy in 0..fh {
                    let Some(y) = (oy * op.stride + fy).checked_sub(op.pad.0).filter(|&y| y < h) else { continue };
                    for fx in 0..fw {
                        let Some(xx) = (ox * op.stride + fx).checked_sub(op.pad.1).filter(|&v| v < w) else { continue };
                        let src = ((n * h + y) * w + xx) * c;
                        let at = row + (fy * fw + fx) * c;
                        dst[at..at + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(op: &Op, dcols: &Array2<f64>, batch: usize) -> Array2<f64> {
    let (h, w, c) = op.input;
    let (ho, wo, _) = op.output;
    let (fh, fw) = op.filter;
    let kk = fh * fw * c;
    let mut dx = Array2::zeros((batch, h * w * c));
    let out = dx.as_slice_mut().expect("standard layout");
    let src = dcols.as_slice().expect("standard layout");
    for n in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((n * ho + oy) * wo + ox) * kk;
                for fy in 0..fh {
                    let Some(y) = (oy * op.stride + fy).checked_sub(op.pad.0).filter(|&y| y < h) else { continue };
                    for fx in 0..fw {
                        let Some(xx) = (ox * op.stride + fx).checked_sub(op.pad.1).filter(|&v| v < w) else { continue };
                        let at = ((n * h + y) * w + xx) * c;
                        let from = row + (fy * fw + fx) * c;
                        for (o, &g) in out[at..at + c].iter_mut().zip(&src[from..from + c]) {
                            *o += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

fn to_batch(a: Array2<f64>, batch: usize) -> Array2<f64> {
    let len = a.len() / batch;
    a.into_shape_with_order((batch, len)).expect("contiguous")
}

fn to_rows(a: Array2<f64>, rows: usize) -> Array2<f64> {
    let width = a.len() / rows;
    let a = if a.is_standard_layout() { a } else { a.as_standard_layout().into_owned() };
    a.into_shape_with_order((rows, width)).expect("contiguous")
}

fn op_forward(op: &Op, params: &[ConvParams], x: &Array2<f64>, batch: usize) -> (Array2<f64>, Cache) {
    let x_slice = x.as_slice().expect("standard layout");
    let c = op.input.2;
    match op.kind {
        OpKind::Flatten => (x.clone(), Cache::Flatten),
        OpKind::Conv => {
            let p = &params[op.param.unwrap()];
            let cols = im2col(op, x_slice, batch);
            let mut out = cols.dot(&p.w) + &p.b;
            if op.relu {
                out.mapv_inplace(|v| v.max(0.0));
            }
            (to_batch(out.clone(), batch), Cache::Conv { cols, out })
        }
        OpKind::Depthwise => {
            let p = &params[op.param.unwrap()];
            let cols = im2col(op, x_slice, batch);
            let taps = op.taps();
            let mut out = Array2::zeros((op.rows(batch), c));
            for (orow, crow) in out.rows_mut().into_iter().zip(cols.rows()) {
                let crow = crow.to_slice().unwrap();
                for (ch, o) in orow.into_iter().enumerate() {
                    let mut s = p.b[ch];
                    for t in 0..taps {
                        s += crow[t * c + ch] * p.w[[t, ch]];
                    }
                    *o = if op.relu { s.max(0.0) } else { s };
                }
            }
            (to_batch(out.clone(), batch), Cache::Depthwise { cols, out })
        }
        OpKind::MaxPool | OpKind::AvgPool => {
            let cols = im2col(op, x_slice, batch);
            let taps = op.taps();
            let rows = op.rows(batch);
            let mut out = Array2::zeros((rows, c));
            let mut argmax = Vec::new();
            let max = op.kind == OpKind::MaxPool;
            if max {
                argmax = vec![0u32; rows * c];
            }
            for (r, (orow, crow)) in out.rows_mut().into_iter().zip(cols.rows()).enumerate() {
                let crow = crow.to_slice().unwrap();
                for (ch, o) in orow.into_iter().enumerate() {
                    if max {
                        let mut best = 0;
                        for t in 1..taps {
                            if crow[t * c + ch] > crow[best * c + ch] {
                                best = t;
                            }
                        }
                        argmax[r * c + ch] = best as u32;
                        *o = crow[best * c + ch];
                    } else {
                        *o = (0..taps).map(|t| crow[t * c + ch]).sum::<f64>() / taps as f64;
                    }
                }
            }
            let cache = if max { Cache::MaxPool { argmax } } else { Cache::AvgPool };
            (to_batch(out, batch), cache)
        }
    }
}

type ParamGrad = (Array2<f64>, Array1<f64>);

fn op_backward(
    op: &Op,
    params: &[ConvParams],
    cache: Cache,
    dout: Array2<f64>,
    batch: usize,
    need_input: bool,
) -> (Option<Array2<f64>>, Option<ParamGrad>) {
    let rows = op.rows(batch);
    let c = op.input.2;
    let taps = op.taps();
    match cache {
        Cache::Flatten => (Some(dout), None),
        Cache::Conv { cols, out } => {
            let p = &params[op.param.unwrap()];
            let mut d = to_rows(dout, rows);
            if op.relu {
                d.zip_mut_with(&out, |g, &o| {
                    if o <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            let dw = cols.t().dot(&d);
            let db = d.sum_axis(Axis(0));
            let dx = need_input.then(|| col2im(op, &d.dot(&p.w.t()), batch));
            (dx, Some((dw, db)))
        }
        Cache::Depthwise { cols, out } => {
            let p = &params[op.param.unwrap()];
            let mut d = to_rows(dout, rows);
            if op.relu {
                d.zip_mut_with(&out, |g, &o| {
                    if o <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            let mut dw = Array2::zeros((taps, c));
            let db = d.sum_axis(Axis(0));
            let mut dcols = Array2::zeros(cols.dim());
            for ((drow, crow), mut dcrow) in d.rows().into_iter().zip(cols.rows()).zip(dcols.rows_mut()) {
                for ch in 0..c {
                    let g = drow[ch];
                    for t in 0..taps {
                        dw[[t, ch]] += crow[t * c + ch] * g;
                        dcrow[t * c + ch] = g * p.w[[t, ch]];
                    }
                }
            }
            let dx = need_input.then(|| col2im(op, &dcols, batch));
            (dx, Some((dw, db)))
        }
        Cache::MaxPool { argmax } => {
            let d = to_rows(dout, rows);
            let mut dcols = Array2::zeros((rows, taps * c));
            for (r, (drow, mut dcrow)) in d.rows().into_iter().zip(dcols.rows_mut()).enumerate() {
                for ch in 0..c {
                    dcrow[argmax[r * c + ch] as usize * c + ch] = drow[ch];
                }
            }
            (need_input.then(|| col2im(op, &dcols, batch)), None)
        }
        Cache::AvgPool => {
            let d = to_rows(dout, rows);
            let mut dcols = Array2::zeros((rows, taps * c));
            for (drow, mut dcrow) in d.rows().into_iter().zip(dcols.rows_mut()) {
                for ch in 0..c {
                    let g = drow[ch] / taps as f64;
                    for t in 0..taps {
                        dcrow[t * c + ch] = g;
                    }
                }
            }
            (need_input.then(|| col2im(op, &dcols, batch)), None)
        }
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub(crate) fn softmax_ce(logits: &Array2<f64>, labels: &[u8]) -> (f64, Array2<f64>) {
    let batch = logits.nrows() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (mut row, &y) in grad.rows_mut().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
        loss -= row[y as usize].ln();
        row[y as usize] -= 1.0;
    }
    grad /= batch;
    (loss / batch, grad)
}

pub(crate) struct Step1Grads {
    pub conv: Vec<ParamGrad>,
    pub fc: Vec<Array2<f64>>,
}

/// Full-precision network: tanh at the boundary, ReLU between dense
/// layers, linear logits.
pub(crate) fn step1_logits(arch: &Architecture, conv: &[ConvParams], fc: &[Array2<f64>], x: Array2<f64>) -> Array2<f64> {
    let (z, _) = arch.conv_forward(conv, x, false);
    let mut a = z.mapv(f64::tanh);
    for (l, w) in fc.iter().enumerate() {
        a = a.dot(w);
        if l + 1 < fc.len() {
            a.mapv_inplace(|v| v.max(0.0));
        }
    }
    a
}

pub(crate) fn step1_loss_grads(
    arch: &Architecture,
    conv: &[ConvParams],
    fc: &[Array2<f64>],
    x: Array2<f64>,
    labels: &[u8],
) -> (f64, Step1Grads) {
    let (z, caches) = arch.conv_forward(conv, x, true);
    let t = z.mapv(f64::tanh);
    let mut acts = vec![t];
    for (l, w) in fc.iter().enumerate() {
        let mut u = acts[l].dot(w);
        if l + 1 < fc.len() {
            u.mapv_inplace(|v| v.max(0.0));
        }
        acts.push(u);
    }
    let (loss, mut d) = softmax_ce(acts.last().unwrap(), labels);

    let mut fc_grads = vec![Array2::zeros((0, 0)); fc.len()];
    for l in (0..fc.len()).rev() {
        fc_grads[l] = acts[l].t().dot(&d);
        d = d.dot(&fc[l].t());
        if l > 0 {
            d.zip_mut_with(&acts[l], |g, &a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            });
        }
    }
    d.zip_mut_with(&acts[0], |g, &t| *g *= 1.0 - t * t);
    let conv_grads = if arch.ops.iter().any(|o| o.param.is_some()) { arch.conv_backward(conv, caches, d) } else { Vec::new() };
    (loss, Step1Grads { conv: conv_grads, fc: fc_grads })
}
