use std::path::Path;

use ndarray::Array2;

use super::MpError;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Images stored NHWC with pixels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pixels: Vec<f32>,
    labels: Vec<u8>,
    shape: (usize, usize, usize),
    classes: usize,
}

impl LabeledDataset {
    pub fn new(pixels: Vec<f32>, labels: Vec<u8>, shape: (usize, usize, usize), classes: usize) -> Result<Self, MpError> {
        let per = shape.0 * shape.1 * shape.2;
        if labels.is_empty() {
            return Err(MpError::Format("dataset is empty".into()));
        }
        if per == 0 || pixels.len() != labels.len() * per {
            return Err(MpError::Format(format!("{} pixels for {} samples of {per}", pixels.len(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(MpError::Format(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(LabeledDataset { pixels, labels, shape, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(h, w, c)` of one sample.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn sample_len(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Rows of the returned matrix are the selected samples, flattened NHWC.
    pub fn batch(&self, indices: &[usize]) -> Array2<f64> {
        let n = self.sample_len();
        let mut out = Array2::zeros((indices.len(), n));
        for (mut row, &i) in out.rows_mut().into_iter().zip(indices) {
            for (d, &s) in row.iter_mut().zip(self.sample(i)) {
                *d = s as f64;
            }
        }
        out
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        LabeledDataset {
            pixels: self.pixels[..n * self.sample_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            shape: self.shape,
            classes: self.classes,
        }
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn read(path: &Path) -> Result<Vec<u8>, MpError> {
    std::fs::read(path).map_err(|e| MpError::Io(format!("{}: {e}", path.display())))
}

/// Reads an IDX image/label file pair (uncompressed, big-endian headers).
pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset, MpError> {
    let img = read(images_path)?;
    let lbl = read(labels_path)?;
    let fmt = |p: &Path, m: String| MpError::Format(format!("{}: {m}", p.display()));

    if img.len() < 16 || be_u32(&img, 0) != IMAGE_MAGIC {
        return Err(fmt(images_path, "not an IDX image file".into()));
    }
    if lbl.len() < 8 || be_u32(&lbl, 0) != LABEL_MAGIC {
        return Err(fmt(labels_path, "not an IDX label file".into()));
    }
    let (n, rows, cols) = (be_u32(&img, 4) as usize, be_u32(&img, 8) as usize, be_u32(&img, 12) as usize);
    if img.len() != 16 + n * rows * cols {
        return Err(fmt(images_path, format!("expected {n} images of {rows}x{cols}, file has {} bytes", img.len())));
    }
    let n_labels = be_u32(&lbl, 4) as usize;
    if lbl.len() != 8 + n_labels {
        return Err(fmt(labels_path, format!("expected {n_labels} labels, file has {} bytes", lbl.len())));
    }
    if n_labels != n {
        return Err(MpError::Format(format!("{n} images but {n_labels} labels")));
    }
    let pixels = img[16..].iter().map(|&p| p as f32 / 255.0).collect();
    LabeledDataset::new(pixels, lbl[8..].to_vec(), (rows, cols, 1), 10)
}
