//! CNN workload descriptions: the Scale-Sim style layer CSV, shape
//! arithmetic, parameter counting and im2col lowering to GEMM shapes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Column order of the workload CSV.
pub const CSV_HEADER: [&str; 9] = [
    "name",
    "ifmap_h",
    "ifmap_w",
    "filter_h",
    "filter_w",
    "channels_in",
    "num_filters",
    "stride",
    "kind",
];

/// Flatten width the hybrid handoff expects for a 32x32 array.
pub const DEFAULT_HANDOFF_ELEMS: usize = 1024;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error("layer `{layer}`: {msg}")]
    Invalid { layer: String, msg: String },
    #[error("layer `{layer}` ({kind}) has no GEMM lowering")]
    NoGemm { layer: String, kind: LayerKind },
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    DepthwiseConv,
    MaxPool,
    AvgPool,
    Dense,
    Flatten,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "Conv",
            LayerKind::DepthwiseConv => "DepthwiseConv",
            LayerKind::MaxPool => "MaxPool",
            LayerKind::AvgPool => "AvgPool",
            LayerKind::Dense => "Dense",
            LayerKind::Flatten => "Flatten",
        }
    }

    /// Layers with a sliding window over the ifmap.
    pub fn is_spatial(self) -> bool {
        matches!(
            self,
            LayerKind::Conv | LayerKind::DepthwiseConv | LayerKind::MaxPool | LayerKind::AvgPool
        )
    }

    pub fn is_pool(self) -> bool {
        matches!(self, LayerKind::MaxPool | LayerKind::AvgPool)
    }

    pub fn is_conv(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::DepthwiseConv)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "Conv" => LayerKind::Conv,
            "DepthwiseConv" => LayerKind::DepthwiseConv,
            "MaxPool" => LayerKind::MaxPool,
            "AvgPool" => LayerKind::AvgPool,
            "Dense" => LayerKind::Dense,
            "Flatten" => LayerKind::Flatten,
            other => return Err(format!("unknown layer kind `{other}`")),
        })
    }
}

/// One row of the workload file.
///
/// For `Dense`, `channels_in` is the input node count and `num_filters`
/// the output node count; the spatial fields are all 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub ifmap_h: usize,
    pub ifmap_w: usize,
    pub filter_h: usize,
    pub filter_w: usize,
    pub channels_in: usize,
    pub num_filters: usize,
    pub stride: usize,
}

/// Output feature-map shape `(h, w, c)`.
pub type Shape3 = (usize, usize, usize);

impl LayerSpec {
    pub fn conv(name: &str, ifmap: usize, filter: usize, cin: usize, filters: usize, stride: usize) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Conv,
            ifmap_h: ifmap,
            ifmap_w: ifmap,
            filter_h: filter,
            filter_w: filter,
            channels_in: cin,
            num_filters: filters,
            stride,
        }
    }

    pub fn dense(name: &str, inputs: usize, outputs: usize) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Dense,
            ifmap_h: 1,
            ifmap_w: 1,
            filter_h: 1,
            filter_w: 1,
            channels_in: inputs,
            num_filters: outputs,
            stride: 1,
        }
    }

    /// Checks the per-layer invariants.
    pub fn check(&self) -> Result<(), TopologyError> {
        let invalid = |msg: String| TopologyError::Invalid { layer: self.name.clone(), msg };
        for (field, v) in [
            ("ifmap_h", self.ifmap_h),
            ("ifmap_w", self.ifmap_w),
            ("filter_h", self.filter_h),
            ("filter_w", self.filter_w),
            ("channels_in", self.channels_in),
            ("num_filters", self.num_filters),
            ("stride", self.stride),
        ] {
            if v == 0 {
                return Err(invalid(format!("{field} must be positive")));
            }
        }
        if self.kind.is_spatial() && (self.filter_h > self.ifmap_h || self.filter_w > self.ifmap_w) {
            return Err(invalid(format!(
                "filter {}x{} larger than ifmap {}x{}",
                self.filter_h, self.filter_w, self.ifmap_h, self.ifmap_w
            )));
        }
        if self.kind == LayerKind::DepthwiseConv && self.num_filters != self.channels_in {
            return Err(invalid(format!(
                "depthwise layer needs num_filters = channels_in, got {} vs {}",
                self.num_filters, self.channels_in
            )));
        }
        if self.kind == LayerKind::Dense && (self.ifmap_h != 1 || self.ifmap_w != 1) {
            return Err(invalid("dense layer must have a 1x1 ifmap".into()));
        }
        Ok(())
    }

    /// Valid-convolution output shape.
    pub fn output_shape(&self) -> Shape3 {
        match self.kind {
            LayerKind::Dense => (1, 1, self.num_filters),
            LayerKind::Flatten => (1, 1, self.ifmap_h * self.ifmap_w * self.channels_in),
            kind => {
                let h = (self.ifmap_h - self.filter_h) / self.stride + 1;
                let w = (self.ifmap_w - self.filter_w) / self.stride + 1;
                let c = if kind.is_pool() { self.channels_in } else { self.num_filters };
                (h, w, c)
            }
        }
    }

    pub fn input_shape(&self) -> Shape3 {
        (self.ifmap_h, self.ifmap_w, self.channels_in)
    }

    pub fn output_elems(&self) -> usize {
        let (h, w, c) = self.output_shape();
        h * w * c
    }

    /// Trainable parameter count; conv layers include one bias per filter,
    /// dense layers carry none.
    pub fn param_count(&self) -> usize {
        let taps = self.filter_h * self.filter_w;
        match self.kind {
            LayerKind::Conv => taps * self.channels_in * self.num_filters + self.num_filters,
            LayerKind::DepthwiseConv => taps * self.channels_in + self.channels_in,
            LayerKind::Dense => self.channels_in * self.num_filters,
            LayerKind::MaxPool | LayerKind::AvgPool | LayerKind::Flatten => 0,
        }
    }

    /// Multiply-accumulate count of one inference.
    pub fn mac_count(&self) -> u64 {
        let (h, w, _) = self.output_shape();
        let taps = (self.filter_h * self.filter_w) as u64;
        match self.kind {
            LayerKind::Conv => (h * w) as u64 * taps * (self.channels_in * self.num_filters) as u64,
            LayerKind::DepthwiseConv => (h * w) as u64 * taps * self.channels_in as u64,
            LayerKind::Dense => (self.channels_in * self.num_filters) as u64,
            _ => 0,
        }
    }

    /// im2col lowering: rows are ofmap pixels, the inner dimension is the
    /// unrolled filter volume, columns are filters. Dense runs at batch 1.
    pub fn to_gemm(&self) -> Result<GemmShape, TopologyError> {
        match self.kind {
            LayerKind::Conv => {
                let (h, w, _) = self.output_shape();
                Ok(GemmShape::new(h * w, self.filter_h * self.filter_w * self.channels_in, self.num_filters))
            }
            LayerKind::Dense => Ok(GemmShape::new(1, self.channels_in, self.num_filters)),
            kind => Err(TopologyError::NoGemm { layer: self.name.clone(), kind }),
        }
    }

    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.name,
            self.ifmap_h,
            self.ifmap_w,
            self.filter_h,
            self.filter_w,
            self.channels_in,
            self.num_filters,
            self.stride,
            self.kind
        )
    }
}

/// `(m, k, n)` of a matrix multiply on the array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GemmShape {
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl GemmShape {
    pub fn new(m: usize, k: usize, n: usize) -> Self {
        assert!(m >= 1 && k >= 1 && n >= 1, "GEMM dimensions must be positive: ({m}, {k}, {n})");
        GemmShape { m, k, n }
    }

    pub fn macs(&self) -> u64 {
        self.m as u64 * self.k as u64 * self.n as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub severity: Severity,
    pub layer: Option<String>,
    pub message: String,
}

impl Finding {
    fn error(layer: Option<&str>, message: String) -> Self {
        Finding { severity: Severity::Error, layer: layer.map(str::to_string), message }
    }

    fn warning(layer: Option<&str>, message: String) -> Self {
        Finding { severity: Severity::Warning, layer: layer.map(str::to_string), message }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        match &self.layer {
            Some(layer) => write!(f, "{tag}: {layer}: {}", self.message),
            None => write!(f, "{tag}: {}", self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkTopology {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub dataset_tag: String,
}

impl NetworkTopology {
    pub fn new(name: impl Into<String>, dataset_tag: impl Into<String>, layers: Vec<LayerSpec>) -> Self {
        NetworkTopology { name: name.into(), layers, dataset_tag: dataset_tag.into() }
    }

    /// Reads a workload file; the topology is named after the file stem and
    /// a trailing `_mnist` / `_cifar10` / `_cifar100` becomes the dataset tag.
    pub fn from_file(path: &Path) -> Result<Self, TopologyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TopologyError::Io(format!("cannot read {}: {e}", path.display())))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("topology");
        let mut topo = parse_topology(&text)?;
        topo.name = stem.to_string();
        topo.dataset_tag = dataset_from_name(stem).to_string();
        Ok(topo)
    }

    pub fn to_csv(&self) -> String {
        let mut out = CSV_HEADER.join(",");
        out.push('\n');
        for layer in &self.layers {
            out.push_str(&layer.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn dense_params(&self) -> usize {
        self.dense_layers().map(LayerSpec::param_count).sum()
    }

    pub fn dense_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.kind == LayerKind::Dense)
    }

    pub fn first_dense_index(&self) -> Option<usize> {
        self.layers.iter().position(|l| l.kind == LayerKind::Dense)
    }

    /// Structural and shape-chain checks. `array_pes` is the systolic
    /// array's PE count, the flatten width the hybrid handoff expects.
    pub fn validate_for_array(&self, hybrid: bool, array_pes: usize) -> Vec<Finding> {
        let mut findings = Vec::new();
        if self.layers.is_empty() {
            findings.push(Finding::error(None, "topology has no layers".into()));
            return findings;
        }
        for layer in &self.layers {
            if let Err(e) = layer.check() {
                findings.push(Finding::error(Some(&layer.name), e.to_string()));
            }
        }
        if findings.iter().any(Finding::is_error) {
            return findings;
        }

        for pair in self.layers.windows(2) {
            let (prev, next) = (&pair[0], &pair[1]);
            if let Some(msg) = chain_mismatch(prev.output_shape(), next) {
                findings.push(Finding::error(Some(&next.name), msg));
            }
        }

        if hybrid {
            if let Some(first) = self.first_dense_index() {
                if self.layers[first..].iter().any(|l| l.kind != LayerKind::Dense) {
                    findings.push(Finding::error(None, "FC block must be trailing".into()));
                }
                let flatten = self.layers[first].channels_in;
                if first > 0 && flatten != array_pes {
                    findings.push(Finding::warning(
                        Some(&self.layers[first].name),
                        format!("flatten {flatten} ≠ {array_pes}"),
                    ));
                }
            }
        }
        findings
    }

    pub fn validate(&self, hybrid: bool) -> Vec<Finding> {
        self.validate_for_array(hybrid, DEFAULT_HANDOFF_ELEMS)
    }
}

/// Symmetric zero padding is allowed: a spatial layer may declare an ifmap
/// larger than the incoming map by an even amount in each dimension.
fn chain_mismatch(prev_out: Shape3, next: &LayerSpec) -> Option<String> {
    let (h, w, c) = prev_out;
    let describe = || {
        format!(
            "declared input {}x{}x{} does not match previous output {h}x{w}x{c}",
            next.ifmap_h, next.ifmap_w, next.channels_in
        )
    };
    match next.kind {
        LayerKind::Dense => (next.channels_in != h * w * c).then(|| {
            format!("dense input {} does not match previous output {h}x{w}x{c} = {}", next.channels_in, h * w * c)
        }),
        LayerKind::Flatten => (next.input_shape() != prev_out).then(describe),
        _ => {
            let padded = |declared: usize, actual: usize| declared >= actual && (declared - actual).is_multiple_of(2);
            let ok = next.channels_in == c && padded(next.ifmap_h, h) && padded(next.ifmap_w, w);
            (!ok).then(describe)
        }
    }
}

fn dataset_from_name(stem: &str) -> &str {
    let lower = stem.rsplit('_').next().unwrap_or("");
    match lower {
        "mnist" => "MNIST",
        "cifar10" => "CIFAR-10",
        "cifar100" => "CIFAR-100",
        _ => "",
    }
}

/// Parses the workload CSV. Row numbers in errors are 1-based file lines.
pub fn parse_topology(text: &str) -> Result<NetworkTopology, TopologyError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hrow, header) = lines.next().ok_or(TopologyError::Parse { row: 1, msg: "empty workload file".into() })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols != CSV_HEADER {
        return Err(TopologyError::Parse {
            row: hrow + 1,
            msg: format!("expected header `{}`", CSV_HEADER.join(",")),
        });
    }

    let mut layers = Vec::new();
    for (idx, line) in lines {
        let row = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != CSV_HEADER.len() {
            return Err(TopologyError::Parse {
                row,
                msg: format!("expected {} columns, found {}", CSV_HEADER.len(), fields.len()),
            });
        }
        let mut nums = [0usize; 7];
        for (slot, (field, col)) in nums.iter_mut().zip(fields[1..8].iter().zip(&CSV_HEADER[1..8])) {
            let v: i64 = field
                .parse()
                .map_err(|_| TopologyError::Parse { row, msg: format!("{col}: `{field}` is not an integer") })?;
            if v <= 0 {
                return Err(TopologyError::Invalid {
                    layer: fields[0].to_string(),
                    msg: format!("{col} must be positive"),
                });
            }
            *slot = v as usize;
        }
        let kind = fields[8].parse::<LayerKind>().map_err(|msg| TopologyError::Parse { row, msg })?;
        let layer = LayerSpec {
            name: fields[0].to_string(),
            kind,
            ifmap_h: nums[0],
            ifmap_w: nums[1],
            filter_h: nums[2],
            filter_w: nums[3],
            channels_in: nums[4],
            num_filters: nums[5],
            stride: nums[6],
        };
        layer.check()?;
        layers.push(layer);
    }
    Ok(NetworkTopology::new("", "", layers))
}

macro_rules! bundled_csv {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../topologies/", $name, ".csv")))),*]
    };
}

const BUNDLED: &[(&str, &str)] = bundled_csv!(
    "lenet_mnist",
    "vgg9_cifar10",
    "mobilenet_v1_cifar10",
    "mobilenet_v2_cifar10",
    "resnet18_cifar10",
    "mobilenet_v1_cifar100",
    "mobilenet_v2_cifar100",
);

/// Names of the shipped workloads, in the order of the comparison table.
pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(name, _)| *name)
}

pub fn bundled(name: &str) -> Option<NetworkTopology> {
    let (stem, text) = BUNDLED.iter().find(|(n, _)| *n == name)?;
    let mut topo = parse_topology(text).expect("bundled topology parses");
    topo.name = stem.to_string();
    topo.dataset_tag = dataset_from_name(stem).to_string();
    Some(topo)
}

pub fn all_bundled() -> Vec<NetworkTopology> {
    bundled_names().filter_map(bundled).collect()
}
