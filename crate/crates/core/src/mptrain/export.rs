//! On-disk weight format.
//!
//! Conv layers: `ndim: u64` then `ndim` u64 dims (`[fh, fw, c_in, c_out]`,
//! depthwise `[fh, fw, c, 1]`), then the f32 weights row-major, then one f32
//! bias per output channel; all little-endian. FC layers use the ternary
//! crossbar format. A text manifest ties the files to the topology.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::net::Architecture;
use super::quant::ternary_to_array;
use super::{ConvParams, Hyper, MpError, Phase, TrainState};
use crate::imac::TernaryMatrix;
use crate::topology::{LayerKind, NetworkTopology};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub layer: String,
    pub kind: LayerKind,
    pub rows: usize,
    pub cols: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub topology: String,
    pub input_shape: (usize, usize, usize),
    pub neuron_slope: f64,
    pub entries: Vec<ManifestEntry>,
}

fn io(path: &Path, e: std::io::Error) -> MpError {
    MpError::Io(format!("{}: {e}", path.display()))
}

fn conv_bytes(p: &ConvParams) -> Vec<u8> {
    let (fh, fw) = p.filter;
    let dims: [usize; 4] = if p.depthwise {
        [fh, fw, p.w.ncols(), 1]
    } else {
        [fh, fw, p.w.nrows() / (fh * fw), p.w.ncols()]
    };
    let mut out = Vec::with_capacity(40 + 4 * (p.w.len() + p.b.len()));
    out.extend_from_slice(&(dims.len() as u64).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in p.w.iter().chain(p.b.iter()) {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn parse_conv(bytes: &[u8], name: &str) -> Result<(Vec<usize>, Vec<f32>), MpError> {
    let bad = |m: String| MpError::Format(format!("{name}: {m}"));
    let u64_at = |at: usize| -> Result<u64, MpError> {
        bytes
            .get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| bad("truncated header".into()))
    };
    let ndim = u64_at(0)? as usize;
    if ndim != 4 {
        return Err(bad(format!("expected 4 dims, found {ndim}")));
    }
    let dims = (0..ndim).map(|i| u64_at(8 + 8 * i).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    let body = &bytes[8 + 8 * ndim..];
    if !body.len().is_multiple_of(4) {
        return Err(bad("body is not a whole number of f32 values".into()));
    }
    let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((dims, values))
}

pub fn export_weights(state: &TrainState, out_dir: &Path) -> Result<Manifest, MpError> {
    if state.phase != Phase::Step2 {
        return Err(MpError::State("only step-2 states are exported".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    let arch = state.arch()?;

    let mut entries = Vec::new();
    for p in &state.conv_weights {
        let file = format!("{}.f32", p.name);
        let path = out_dir.join(&file);
        std::fs::write(&path, conv_bytes(p)).map_err(|e| io(&path, e))?;
        let kind = if p.depthwise { LayerKind::DepthwiseConv } else { LayerKind::Conv };
        entries.push(ManifestEntry { layer: p.name.clone(), kind, rows: p.w.nrows(), cols: p.w.ncols(), file });
    }
    for (name, t) in arch.fc_names.iter().zip(&state.fc_ternary) {
        let file = format!("{name}.tern");
        let path = out_dir.join(&file);
        t.save(&path).map_err(|e| MpError::Io(format!("{}: {e}", path.display())))?;
        entries.push(ManifestEntry { layer: name.clone(), kind: LayerKind::Dense, rows: t.rows(), cols: t.cols(), file });
    }

    let manifest = Manifest {
        topology: state.topology.name.clone(),
        input_shape: state.input_shape,
        neuron_slope: state.neuron_slope,
        entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_text()).map_err(|e| io(&path, e))?;
    Ok(manifest)
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let (h, w, c) = self.input_shape;
        let mut s = format!("# topology: {}\n# input: {h} {w} {c}\n# neuron_slope: {}\n", self.topology, self.neuron_slope);
        for e in &self.entries {
            writeln!(s, "{} {} {} {} {}", e.layer, e.kind, e.rows, e.cols, e.file).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, MpError> {
        let bad = |line: usize, m: &str| MpError::Format(format!("manifest line {line}: {m}"));
        let mut topology = None;
        let mut input_shape = None;
        let mut neuron_slope = None;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let Some((key, value)) = meta.split_once(':') else { continue };
                let value = value.trim();
                match key.trim() {
                    "topology" => topology = Some(value.to_string()),
                    "input" => {
                        let dims: Vec<usize> =
                            value.split_whitespace().map(str::parse).collect::<Result<_, _>>().map_err(|_| bad(i, "bad input shape"))?;
                        let [h, w, c] = dims[..] else { return Err(bad(i, "input shape needs three dims")) };
                        input_shape = Some((h, w, c));
                    }
                    "neuron_slope" => neuron_slope = Some(value.parse().map_err(|_| bad(i, "bad neuron slope"))?),
                    _ => {}
                }
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let [layer, kind, rows, cols, file] = f[..] else { return Err(bad(i, "expected `layer kind rows cols file`")) };
            entries.push(ManifestEntry {
                layer: layer.to_string(),
                kind: kind.parse().map_err(|m: String| bad(i, &m))?,
                rows: rows.parse().map_err(|_| bad(i, "rows is not an integer"))?,
                cols: cols.parse().map_err(|_| bad(i, "cols is not an integer"))?,
                file: file.to_string(),
            });
        }
        Ok(Manifest {
            topology: topology.ok_or_else(|| MpError::Format("manifest has no `# topology:` line".into()))?,
            input_shape: input_shape.ok_or_else(|| MpError::Format("manifest has no `# input:` line".into()))?,
            neuron_slope: neuron_slope.ok_or_else(|| MpError::Format("manifest has no `# neuron_slope:` line".into()))?,
            entries,
        })
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, MpError> {
    let path = dir.join(MANIFEST_FILE);
    Manifest::parse(&std::fs::read_to_string(&path).map_err(|e| io(&path, e))?)
}

/// Rebuilds a step-2 state from an export. Only the ternary FC weights are
/// stored, so they also stand in for the shadow weights.
pub fn import_weights(dir: &Path, topology: &NetworkTopology) -> Result<TrainState, MpError> {
    let manifest = read_manifest(dir)?;
    if manifest.topology != topology.name {
        return Err(MpError::Manifest(format!(
            "weights were exported for `{}`, not `{}`",
            manifest.topology, topology.name
        )));
    }
    let arch = Architecture::new(topology, manifest.input_shape)?;
    let template_conv = arch.zero_params();

    let find = |name: &str| {
        manifest
            .entries
            .iter()
            .find(|e| e.layer == name)
            .ok_or_else(|| MpError::Manifest(format!("no weights for layer `{name}`")))
    };
    let expected = template_conv.len() + arch.fc_names.len();
    if manifest.entries.len() != expected {
        return Err(MpError::Manifest(format!("{} manifest entries, topology has {expected} weighted layers", manifest.entries.len())));
    }

    let mut conv = Vec::new();
    for t in template_conv {
        let e = find(&t.name)?;
        if (e.rows, e.cols) != t.w.dim() {
            return Err(MpError::Manifest(format!("`{}` is {}x{}, topology needs {:?}", e.layer, e.rows, e.cols, t.w.dim())));
        }
        let path = dir.join(&e.file);
        let (_, values) = parse_conv(&std::fs::read(&path).map_err(|err| io(&path, err))?, &e.file)?;
        let n = e.rows * e.cols;
        if values.len() != n + t.b.len() {
            return Err(MpError::Format(format!("{}: {} values, expected {}", e.file, values.len(), n + t.b.len())));
        }
        let as64: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        conv.push(ConvParams {
            w: Array2::from_shape_vec((e.rows, e.cols), as64[..n].to_vec()).expect("sized"),
            b: Array1::from(as64[n..].to_vec()),
            ..t
        });
    }
    let mut fc_ternary = Vec::new();
    for (name, &(rows, cols)) in arch.fc_names.iter().zip(&arch.fc_dims) {
        let e = find(name)?;
        let path = dir.join(&e.file);
        let t = TernaryMatrix::load(&path).map_err(|err| MpError::Format(format!("{}: {err}", path.display())))?;
        if (t.rows(), t.cols()) != (rows, cols) {
            return Err(MpError::Manifest(format!("`{name}` is {}x{}, topology needs {rows}x{cols}", t.rows(), t.cols())));
        }
        fc_ternary.push(t);
    }
    Ok(TrainState {
        topology: topology.clone(),
        input_shape: manifest.input_shape,
        conv_weights: conv,
        fc_shadow_weights: fc_ternary.iter().map(ternary_to_array).collect(),
        fc_ternary,
        phase: Phase::Step2,
        hyper: Hyper::step2(0),
        neuron_slope: manifest.neuron_slope,
    })
}
