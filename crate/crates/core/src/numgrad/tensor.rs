use crate::error::{Error, Result};

/// Guard added to the L2 norm before dividing.
pub const NORM_EPS: f64 = 1e-12;

/// Dense row-major `f64` tensor.
///
/// Scalars have an empty shape. Most kernels below operate on 2-D tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// 1×n row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    /// Builds a matrix from equally long rows. An empty slice gives a 0×0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub(crate) fn require_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.require_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Row-wise `x / (‖x‖ + NORM_EPS)`; a zero row stays zero.
    pub fn l2_normalize_rows(&self) -> Result<Self> {
        let (m, _) = self.require_matrix("l2_normalize_rows")?;
        let mut out = self.clone();
        for i in 0..m {
            let row = out.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let s = norm + NORM_EPS;
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(out)
    }

    /// Depthwise 1-D convolution along rows (the segment axis) with "same"
    /// zero padding. `self` is `T×C`, `kernel` is `C×W`; the kernel tap at
    /// index `(W-1)/2` is aligned with the output position.
    pub fn depthwise_conv(&self, kernel: &Tensor) -> Result<Self> {
        let (t, c) = self.require_matrix("depthwise_conv")?;
        let (kc, w) = kernel.require_matrix("depthwise_conv")?;
        if kc != c || w == 0 {
            return Err(Error::ShapeMismatch {
                op: "depthwise_conv",
                lhs: self.shape.clone(),
                rhs: kernel.shape.clone(),
            });
        }
        let pad = (w - 1) / 2;
        let mut out = vec![0.0; t * c];
        for i in 0..t {
            for j in 0..w {
                let src = i as isize + j as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                for ch in 0..c {
                    out[i * c + ch] += kernel.data[ch * w + j] * self.data[src * c + ch];
                }
            }
        }
        Ok(Self {
            shape: vec![t, c],
            data: out,
        })
    }

    /// Softmax along `axis` of a matrix (0 = down columns, 1 = across rows).
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let mut out = self.log_softmax(axis)?;
        out.data.iter_mut().for_each(|v| *v = v.exp());
        Ok(out)
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Self> {
        let (m, n) = self.require_matrix("softmax")?;
        let mut out = self.clone();
        for_each_line(m, n, axis, |idx| {
            let max = idx.iter().map(|&i| self.data[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + idx.iter().map(|&i| (self.data[i] - max).exp()).sum::<f64>().ln();
            for &i in idx {
                out.data[i] = self.data[i] - lse;
            }
        })?;
        Ok(out)
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let (m, n) = self.require_matrix("select_rows")?;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(Error::ShapeMismatch {
                    op: "select_rows",
                    lhs: self.shape.clone(),
                    rhs: vec![i],
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            shape: vec![indices.len(), n],
            data,
        })
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn norm(a: &[f64]) -> f64 {
        Self::dot(a, a).sqrt()
    }
}

/// Calls `f` with the flat indices of every line of an `m×n` matrix along `axis`.
pub(crate) fn for_each_line(m: usize, n: usize, axis: usize, mut f: impl FnMut(&[usize])) -> Result<()> {
    let mut idx = Vec::new();
    match axis {
        0 => {
            for j in 0..n {
                idx.clear();
                idx.extend((0..m).map(|i| i * n + j));
                f(&idx);
            }
        }
        1 => {
            for i in 0..m {
                idx.clear();
                idx.extend((0..n).map(|j| i * n + j));
                f(&idx);
            }
        }
        _ => {
            return Err(Error::ShapeMismatch {
                op: "axis",
                lhs: vec![m, n],
                rhs: vec![axis],
            })
        }
    }
    Ok(())
}
