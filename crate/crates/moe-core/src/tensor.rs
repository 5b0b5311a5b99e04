//! Dense row-major f64 tensors and the value-level kernels built on them.
//!
//! Every operation validates shapes up front and checks that its output is
//! finite; a NaN or infinity is reported as [`Error::NonFinite`] instead of
//! being written into a result buffer.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and a row-major buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::invalid("ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::invalid(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    fn expect_rank(&self, rank: usize, op: &'static str) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::invalid(format!(
                "{op}: expected rank {rank}, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.shape[1] + j] = v;
    }

    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    pub fn set3(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.shape[1] + j) * self.shape[2] + k] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Elementwise map; the result is finiteness-checked.
    pub fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        let t = Tensor {
            shape: self.shape.clone(),
            data,
        };
        t.check_finite(op)?;
        Ok(t)
    }

    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let t = Tensor {
            shape: self.shape.clone(),
            data,
        };
        t.check_finite(op)?;
        Ok(t)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "div", |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.map("scale", |v| v * c)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.expect_rank(2, "matmul")?;
        other.expect_rank(2, "matmul")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                let out = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    out[j] += a * brow[j];
                }
            }
        }
        let t = Tensor {
            shape: vec![m, n],
            data,
        };
        t.check_finite("matmul")?;
        Ok(t)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        self.expect_rank(2, "transpose")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::invalid(format!(
                "reshape to {:?} incompatible with {} elements",
                shape,
                self.data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Row-stabilized softmax over the last axis of a 2-D tensor.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        self.expect_rank(2, "softmax_rows")?;
        self.check_finite("softmax_rows")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        if n == 0 {
            return Err(Error::invalid("softmax_rows: empty rows"));
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[j] = e;
                sum += e;
            }
            for v in out.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor {
            shape: vec![m, n],
            data,
        };
        t.check_finite("softmax_rows")?;
        Ok(t)
    }

    /// Sum over one axis of a 2-D tensor: axis 0 gives column sums,
    /// axis 1 gives row sums.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.expect_rank(2, "sum_axis")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        match axis {
            0 => {
                let mut data = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        data[j] += self.data[i * n + j];
                    }
                }
                Tensor::new(vec![n], data)
            }
            1 => {
                let mut data = vec![0.0; m];
                for i in 0..m {
                    data[i] = self.data[i * n..(i + 1) * n].iter().sum();
                }
                Tensor::new(vec![m], data)
            }
            _ => Err(Error::invalid("sum_axis: axis must be 0 or 1")),
        }
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum_all() / self.data.len() as f64
        }
    }

    /// Greatest absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Index of the largest entry per row, ties resolved to the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        self.expect_rank(2, "argmax_rows")?;
        Ok((0..self.shape[0]).map(|i| argmax(self.row(i))).collect())
    }

    /// `[T,E,C]` slice at a fixed middle index, producing `[T,C]`.
    pub fn slice_middle(&self, index: usize) -> Result<Tensor> {
        self.expect_rank(3, "slice_middle")?;
        let (t, e, c) = (self.shape[0], self.shape[1], self.shape[2]);
        if index >= e {
            return Err(Error::invalid("slice_middle: index out of range"));
        }
        let mut data = Vec::with_capacity(t * c);
        for i in 0..t {
            let base = (i * e + index) * c;
            data.extend_from_slice(&self.data[base..base + c]);
        }
        Ok(Tensor {
            shape: vec![t, c],
            data,
        })
    }
}

/// Argmax with lowest-index tie-breaking.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Indices of all entries ordered by descending value, ties resolved to the
/// lowest index. Scores must be finite.
pub fn sorted_indices_desc(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// The `k` highest-value indices in selection order (non-differentiable).
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx = sorted_indices_desc(values);
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_rows(&[vec![3.0, -1.0], vec![2.5, 4.0]]).unwrap();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let out = eye.matmul(&a).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = crate::rng::Rng::new(7);
        let a = rng.normal_tensor(&[5, 3], 1.0).unwrap();
        let b = rng.normal_tensor(&[3, 4], 1.0).unwrap();
        let fast = a.matmul(&b).unwrap();
        // independent naive product
        let mut naive = Tensor::zeros(&[5, 4]);
        for i in 0..5 {
            for j in 0..4 {
                let mut acc = 0.0;
                for p in 0..3 {
                    acc += a.at2(i, p) * b.at2(p, j);
                }
                naive.set2(i, j, acc);
            }
        }
        assert!(fast.max_abs_diff(&naive).unwrap() < 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn softmax_uniform_row() {
        let t = Tensor::zeros(&[1, 4]);
        let s = t.softmax_rows().unwrap();
        for &v in s.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logit_is_stable() {
        let t = Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap();
        let s = t.softmax_rows().unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-12);
    }

    #[test]
    fn softmax_matches_high_precision_reference() {
        // softmax([1,2,3]) computed with 50-digit arithmetic.
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let s = t.softmax_rows().unwrap();
        let expected = [
            0.090030573170380458,
            0.24472847105479765,
            0.66524095577482189,
        ];
        for (got, want) in s.data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::rng::Rng::new(3);
        for _ in 0..20 {
            let t = rng.normal_tensor(&[6, 5], 3.0).unwrap();
            let s = t.softmax_rows().unwrap();
            let sums = s.sum_axis(1).unwrap();
            for &v in sums.data() {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_is_surfaced() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let err = t.map("ln", |v| v.ln()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn top_k_breaks_ties_by_lowest_index() {
        let v = [1.0, 5.0, 5.0, 2.0];
        assert_eq!(top_k_indices(&v, 3), vec![1, 2, 3]);
        assert_eq!(argmax(&v), 1);
    }

    #[test]
    fn slice_middle_picks_expert_plane() {
        let mut t = Tensor::zeros(&[2, 3, 2]);
        t.set3(1, 2, 0, 7.0);
        let s = t.slice_middle(2).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.at2(1, 0), 7.0);
    }
}
