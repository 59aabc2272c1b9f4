use ndarray::Array2;

use crate::imac::TernaryMatrix;

/// Hardware sign tap: non-negative accumulators read as +1.
pub fn sign_binarize(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| sign(x)).collect()
}

pub(crate) fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Threshold ternarisation with `delta = 0.7 * mean|w|`.
pub fn ternarize(w: &Array2<f64>) -> TernaryMatrix {
    let (rows, cols) = w.dim();
    let delta = 0.7 * w.iter().map(|x| x.abs()).sum::<f64>() / w.len().max(1) as f64;
    let values = w
        .iter()
        .map(|&x| {
            if x.abs() > delta {
                x.signum() as i8
            } else {
                0
            }
        })
        .collect();
    TernaryMatrix::new(rows, cols, values).expect("ternary codomain")
}

pub fn ternary_to_array(t: &TernaryMatrix) -> Array2<f64> {
    Array2::from_shape_vec((t.rows(), t.cols()), t.values().iter().map(|&v| v as f64).collect()).expect("shape")
}
