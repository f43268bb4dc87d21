//! Single-head attention over flattened feature maps, with a cross-frame
//! variant that takes keys and values from the previous frame.

use crate::error::{Error, Result};

/// Dense row-major matrix; feature maps are `positions x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `self * other^T`.
    pub fn mul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::contract(format!(
                "inner dimensions differ: {}x{} * ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Vec::with_capacity(self.rows * other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.push(a.iter().zip(other.row(j)).map(|(x, y)| x * y).sum());
            }
        }
        Matrix::new(self.rows, other.rows, out)
    }

    /// `self * other`.
    pub fn mul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::contract(format!(
                "inner dimensions differ: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let dst = &mut out[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        Matrix::new(self.rows, other.cols, out)
    }
}

/// Keys `K = v W_K^T` and values `V = v W_V^T` of one frame's features.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyValue {
    pub keys: Matrix,
    pub values: Matrix,
}

/// Cached keys/values of the previous frame, tagged with the step they were
/// computed at. One entry per attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PrevFrameContext {
    pub t: usize,
    pub layers: Vec<KeyValue>,
}

impl PrevFrameContext {
    /// Rejects a context built at a different step or for another architecture.
    pub fn check(&self, t: usize, layers: usize) -> Result<()> {
        if self.t != t {
            return Err(Error::contract(format!(
                "previous-frame context is from step {} but the current step is {t}",
                self.t
            )));
        }
        if self.layers.len() != layers {
            return Err(Error::contract(format!(
                "previous-frame context has {} attention layers, model has {layers}",
                self.layers.len()
            )));
        }
        Ok(())
    }
}

/// Bias-free projections of one attention layer: `W_Q, W_K` are `d x C`,
/// `W_V` is `C x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

impl AttentionLayer {
    pub fn new(wq: Matrix, wk: Matrix, wv: Matrix) -> Result<Self> {
        let c = wv.rows;
        if wq.rows == 0 || wq.rows != wk.rows || wq.cols != c || wk.cols != c || wv.cols != c {
            return Err(Error::contract(format!(
                "attention projections disagree: W_Q {}x{}, W_K {}x{}, W_V {}x{}",
                wq.rows, wq.cols, wk.rows, wk.cols, wv.rows, wv.cols
            )));
        }
        Ok(Self { wq, wk, wv })
    }

    pub fn head_dim(&self) -> usize {
        self.wq.rows
    }

    pub fn channels(&self) -> usize {
        self.wv.rows
    }

    pub fn query(&self, v: &Matrix) -> Result<Matrix> {
        v.mul_transposed(&self.wq)
    }

    pub fn key_value(&self, v: &Matrix) -> Result<KeyValue> {
        Ok(KeyValue {
            keys: v.mul_transposed(&self.wk)?,
            values: v.mul_transposed(&self.wv)?,
        })
    }

    /// Row-stochastic matrix `Softmax(Q K^T / sqrt(d))`.
    pub fn weights(&self, q: &Matrix, keys: &Matrix) -> Result<Matrix> {
        let mut logits = q.mul_transposed(keys)?;
        let scale = 1.0 / (self.head_dim() as f64).sqrt();
        let n = logits.cols;
        for row in logits.data.chunks_exact_mut(n) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v * scale - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(logits)
    }

    fn attend(&self, q: &Matrix, kv: &KeyValue) -> Result<Matrix> {
        if kv.keys.cols != self.head_dim() || kv.values.cols != self.channels() || kv.keys.rows != kv.values.rows {
            return Err(Error::contract(format!(
                "cached keys {}x{} / values {}x{} do not fit a layer with d={} and C={}",
                kv.keys.rows,
                kv.keys.cols,
                kv.values.rows,
                kv.values.cols,
                self.head_dim(),
                self.channels()
            )));
        }
        self.weights(q, &kv.keys)?.mul(&kv.values)
    }

    pub fn self_attention(&self, v: &Matrix) -> Result<Matrix> {
        let kv = self.key_value(v)?;
        self.attend(&self.query(v)?, &kv)
    }

    /// Queries from the current features, keys and values from `prev`.
    pub fn cross_prev_frame_attention(&self, v: &Matrix, prev: &KeyValue) -> Result<Matrix> {
        self.attend(&self.query(v)?, prev)
    }
}
