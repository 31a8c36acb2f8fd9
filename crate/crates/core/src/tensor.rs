//! Dense tensor arithmetic and normalization primitives.
//!
//! `Tensor` is a row-major, flat `Vec<f64>` with shape metadata. Every
//! operation is a pure function with a deterministic (sequential, row-major)
//! reduction order, so repeated runs are bit-reproducible. Storage and math
//! are 64-bit; the on-disk container format (see [`crate::container`])
//! serializes payloads as f32, and seeded initializers generate values on the
//! f32 grid so save/load round trips are lossless.

use crate::error::{Error, Result};

/// Dense n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Flat offset of a multi-index (row-major).
    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &bound)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < bound, "index {ix} out of bounds {bound} at axis {i}");
            flat = flat * bound + ix;
        }
        flat
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        self
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.rank(), 2, "row() requires a rank-2 tensor");
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        assert_eq!(self.rank(), 2, "row_mut() requires a rank-2 tensor");
        let w = self.shape[1];
        &mut self.data[i * w..(i + 1) * w]
    }

    fn check_same_shape(&self, other: &Tensor, context: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::DimensionMismatch {
                context: context.to_string(),
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_vec(&self.shape, data))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_vec(&self.shape, data))
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "hadamard")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::from_vec(&self.shape, data))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor::from_vec(&self.shape, self.data.iter().map(|v| v * s).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product of two rank-2 tensors, `[m,k] x [k,n] -> [m,n]`.
    /// Inner products accumulate sequentially in index order.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::DimensionMismatch {
                context: "matmul".to_string(),
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = other.shape[1];
        let mut out = vec![0.0; m * n];
        // i-p-j loop order for contiguous access; per output element the
        // contributions still accumulate in ascending p order.
        for i in 0..m {
            let lhs_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in lhs_row.iter().enumerate() {
                let rhs_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor::from_vec(&[m, n], out))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transposed(&self) -> Tensor {
        assert_eq!(self.rank(), 2, "transposed() requires a rank-2 tensor");
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_vec(&[n, m], out)
    }

    /// Decompose the index space around `axis` into (outer, axis_len, inner)
    /// so that flat = (o * axis_len + a) * inner + i.
    fn axis_split(&self, axis: usize) -> (usize, usize, usize) {
        assert!(axis < self.rank(), "axis {axis} out of range {:?}", self.shape);
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        (outer, self.shape[axis], inner)
    }

    /// Softmax of `x / temperature` along `axis`, stabilized by max
    /// subtraction. Lane sums accumulate before the final division.
    pub fn softmax(&self, axis: usize, temperature: f64) -> Tensor {
        assert!(temperature > 0.0, "softmax temperature must be positive");
        let (outer, len, inner) = self.axis_split(axis);
        let mut out = vec![0.0; self.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let lane = |a: usize| (o * len + a) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for a in 0..len {
                    m = m.max(self.data[lane(a)]);
                }
                let mut sum = 0.0;
                for a in 0..len {
                    let e = ((self.data[lane(a)] - m) / temperature).exp();
                    out[lane(a)] = e;
                    sum += e;
                }
                for a in 0..len {
                    out[lane(a)] /= sum;
                }
            }
        }
        Tensor::from_vec(&self.shape, out)
    }

    /// Normalize each slice along `axis` to unit Euclidean norm. Zero-norm
    /// slices are left as zeros; the returned count reports how many.
    pub fn l2_normalize(&self, axis: usize) -> (Tensor, usize) {
        let (outer, len, inner) = self.axis_split(axis);
        let mut out = self.data.clone();
        let mut zero_slices = 0;
        for o in 0..outer {
            for i in 0..inner {
                let lane = |a: usize| (o * len + a) * inner + i;
                let mut sq = 0.0;
                for a in 0..len {
                    let v = self.data[lane(a)];
                    sq += v * v;
                }
                let norm = sq.sqrt();
                if norm > 0.0 {
                    for a in 0..len {
                        out[lane(a)] /= norm;
                    }
                } else {
                    zero_slices += 1;
                }
            }
        }
        (Tensor::from_vec(&self.shape, out), zero_slices)
    }
}

/// Euclidean norm of a slice.
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dot product, sequential accumulation.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Squared Euclidean distance between two slices.
pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Central-difference gradient of a scalar function:
/// `(f(x + h e_i) - f(x - h e_i)) / (2h)` per coordinate.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + h;
        let plus = f(&probe);
        probe.data_mut()[i] = original - h;
        let minus = f(&probe);
        probe.data_mut()[i] = original;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Bilinear interpolation with aligned corners. Works for rank-2 `[h,w]` and
/// rank-3 `[h,w,c]` tensors; a 1x1 source broadcasts to a constant output.
pub fn bilinear_resize(src: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (h, w, c) = match src.shape() {
        [h, w] => (*h, *w, 1),
        [h, w, c] => (*h, *w, *c),
        other => panic!("bilinear_resize requires rank 2 or 3, got {other:?}"),
    };
    assert!(h >= 1 && w >= 1 && out_h >= 1 && out_w >= 1);
    let out_shape: Vec<usize> = if src.rank() == 2 {
        vec![out_h, out_w]
    } else {
        vec![out_h, out_w, c]
    };
    let mut out = vec![0.0; out_h * out_w * c];
    let sy = |y: usize| -> f64 {
        if out_h == 1 || h == 1 {
            0.0
        } else {
            y as f64 * (h - 1) as f64 / (out_h - 1) as f64
        }
    };
    let sx = |x: usize| -> f64 {
        if out_w == 1 || w == 1 {
            0.0
        } else {
            x as f64 * (w - 1) as f64 / (out_w - 1) as f64
        }
    };
    let data = src.data();
    for y in 0..out_h {
        let fy = sy(y);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let dy = fy - y0 as f64;
        for x in 0..out_w {
            let fx = sx(x);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let dx = fx - x0 as f64;
            for ch in 0..c {
                let v00 = data[(y0 * w + x0) * c + ch];
                let v01 = data[(y0 * w + x1) * c + ch];
                let v10 = data[(y1 * w + x0) * c + ch];
                let v11 = data[(y1 * w + x1) * c + ch];
                let top = v00 * (1.0 - dx) + v01 * dx;
                let bottom = v10 * (1.0 - dx) + v11 * dx;
                out[(y * out_w + x) * c + ch] = top * (1.0 - dy) + bottom * dy;
            }
        }
    }
    Tensor::from_vec(&out_shape, out)
}
