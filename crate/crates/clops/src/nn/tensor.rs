//! Dense row-major float64 tensors with shape-checked kernels.

use serde::{Deserialize, Serialize};

use super::NnError;

/// A dense row-major tensor of `f64` values.
///
/// Invariant: `shape.iter().product() == data.len()`, and every stored
/// value is finite. Non-finite values signal a numerical fault and are
/// rejected at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NnError::ShapeMismatch {
                context: "tensor construction",
                expected: shape.clone(),
                actual: vec![data.len()],
            });
        }
        let t = Tensor { shape, data };
        t.check_finite("tensor construction")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Result<Self, NnError> {
        Tensor::new(vec![1], vec![value])
    }

    /// 2-D constructor: `rows x cols` from a flat row-major slice.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NnError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when interpreted as a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns when interpreted as a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[row * c..(row + 1) * c]
    }

    /// The single value of a scalar (one-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn check_finite(&self, context: &'static str) -> Result<(), NnError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NnError::NonFinite { context })
        }
    }
}

/// `a [r x k] * b [k x c] -> [r x c]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return Err(NnError::ShapeMismatch {
            context: "matmul",
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    let (r, k, c) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for kk in 0..k {
            let av = a.data()[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[kk * c..(kk + 1) * c];
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::matrix(r, c, out)
}

/// Row-wise softmax with log-sum-exp stabilization.
///
/// Each output row sums to 1 (within 1e-12 even for logits of magnitude
/// 1e4) and every entry is strictly positive.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor, NnError> {
    if logits.shape().len() != 2 {
        return Err(NnError::ShapeMismatch {
            context: "softmax",
            expected: vec![0, 0],
            actual: logits.shape().to_vec(),
        });
    }
    logits.check_finite("softmax input")?;
    let (r, c) = (logits.rows(), logits.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * c..(i + 1) * c];
        let mut sum = 0.0;
        for j in 0..c {
            let e = (row[j] - max).exp();
            orow[j] = e;
            sum += e;
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::matrix(r, c, out)
}

/// Per-instance cross-entropy: `losses[i] = -ln probs[i][labels[i]]`.
///
/// Losses are returned unreduced; callers decide how to weight and
/// aggregate them.
pub fn per_instance_ce(probs: &Tensor, labels: &[usize]) -> Result<Tensor, NnError> {
    if probs.shape().len() != 2 || probs.rows() != labels.len() {
        return Err(NnError::ShapeMismatch {
            context: "per_instance_ce",
            expected: vec![labels.len()],
            actual: probs.shape().to_vec(),
        });
    }
    let c = probs.cols();
    let mut losses = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(NnError::LabelOutOfRange { label, classes: c });
        }
        losses.push(-probs.at(i, label).ln());
    }
    Tensor::new(vec![labels.len()], losses)
}
