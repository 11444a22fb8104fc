//! Dense 64-bit tensors, real or complex.
//!
//! Storage is a flat row-major `Vec<f64>`; a complex tensor interleaves
//! real/imaginary pairs, so `data.len() == 2 * numel`. Tensors are plain
//! immutable values once built — all differentiable arithmetic lives on the
//! tape in [`crate::numerics::autodiff`].

use crate::error::{Error, Result};

/// Dense tensor of 64-bit reals (or interleaved complex pairs).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    complex: bool,
}

impl Tensor {
    /// Real tensor from a flat row-major buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} entries, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            complex: false,
        })
    }

    /// Complex tensor from interleaved re/im pairs.
    pub fn new_complex(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if 2 * n != data.len() {
            return Err(Error::Shape(format!(
                "complex shape {:?} needs {} interleaved entries, got {}",
                shape,
                2 * n,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            complex: true,
        })
    }

    /// All-zero real tensor.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            complex: false,
        }
    }

    /// All-zero complex tensor.
    pub fn zeros_complex(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; 2 * n],
            complex: true,
        }
    }

    /// Rank-0-like scalar stored as shape `[1]`.
    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
            complex: false,
        }
    }

    /// 1-D tensor from a slice.
    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            shape: vec![v.len()],
            data: v.to_vec(),
            complex: false,
        }
    }

    /// Row-major matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    pub fn is_complex(&self) -> bool {
        self.complex
    }

    /// Number of logical entries (complex entries count once).
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        assert!(!self.complex, "item() on complex tensor");
        self.data[0]
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-matrix");
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix");
        self.shape[1]
    }

    /// Entry of a 2-D real tensor.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(!self.complex);
        self.data[r * self.shape[1] + c]
    }

    /// True when every stored component is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the buffer under a new shape with the same entry count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        let mut t = self.clone();
        t.shape = shape;
        Ok(t)
    }

    /// Euclidean norm of a real tensor viewed as a flat vector.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Raw matrix product `a (m×k) @ b (k×n)`, row-major.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Raw 2-D transpose.
pub(crate) fn transpose_kernel(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// A 2-D grid of feature vectors: `h*w` token positions, each holding
/// `channels` reals, stored position-major (`[p][c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMap {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    data: Vec<f64>,
}

impl TokenMap {
    pub fn new(h: usize, w: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if h * w * channels != data.len() {
            return Err(Error::Shape(format!(
                "token map {}x{}x{} needs {} entries, got {}",
                h,
                w,
                channels,
                h * w * channels,
                data.len()
            )));
        }
        Ok(Self {
            h,
            w,
            channels,
            data,
        })
    }

    pub fn zeros(h: usize, w: usize, channels: usize) -> Self {
        Self {
            h,
            w,
            channels,
            data: vec![0.0; h * w * channels],
        }
    }

    /// Number of token positions.
    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The feature vector at position `p` (row-major over the grid).
    pub fn token(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    /// View as a `(positions × channels)` tensor.
    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.positions(), self.channels], self.data.clone())
            .expect("token map buffer consistent")
    }

    /// Rebuild from a `(positions × channels)` tensor.
    pub fn from_tensor(h: usize, w: usize, t: &Tensor) -> Result<Self> {
        if t.shape() != [h * w, t.shape()[1]] {
            return Err(Error::Shape(format!(
                "expected {}x? position-major tensor, got {:?}",
                h * w,
                t.shape()
            )));
        }
        Self::new(h, w, t.shape()[1], t.data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_mismatch_rejected() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new_complex(vec![2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn matmul_kernel_identity() {
        let id = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let v = vec![3.0, -1.0, 2.0];
        assert_eq!(matmul_kernel(&id, &v, 3, 3, 1), v);
    }

    #[test]
    fn matmul_kernel_hand_case() {
        // [[1,2],[3,4]] @ [[0],[1]] = [[2],[4]]
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![0.0, 1.0];
        assert_eq!(matmul_kernel(&a, &b, 2, 2, 1), vec![2.0, 4.0]);
    }

    #[test]
    fn token_map_round_trip() {
        let tm = TokenMap::new(2, 3, 4, (0..24).map(f64::from).collect()).unwrap();
        let t = tm.as_tensor();
        assert_eq!(t.shape(), [6, 4]);
        let back = TokenMap::from_tensor(2, 3, &t).unwrap();
        assert_eq!(back, tm);
        assert_eq!(tm.token(1), &[4.0, 5.0, 6.0, 7.0]);
    }
}
