//! Dense row-major `f64` tensors and the raw kernels the tape is built on.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_slice(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.to_vec())
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Round every entry to the nearest `f32`. Stored parameters are kept in
    /// this form so they survive the 32-bit file formats unchanged.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Plain 2-D matrix product, no tape.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(Error::Contract(format!(
                "transpose2 needs a matrix, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }
}

/// Row-major matrix kernels. Every output element is accumulated over the
/// contraction index in ascending order, independent of how many rows the
/// call covers, so batching never changes per-row results.
pub(crate) mod kernels {
    const TILE: usize = 4;

    /// out[i][j] += Σ_p a(i, p) · b(p, j), p ascending, where `a(i, p)` is
    /// `a[i * ars + p * acs]` and `b(p, j)` is `b[p * n + j]`.
    #[inline(always)]
    #[allow(clippy::too_many_arguments)]
    fn tiled(a: &[f64], ars: usize, acs: usize, b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        assert!(m == 0 || k == 0 || a.len() > (m - 1) * ars + (k - 1) * acs);
        assert!(b.len() >= k * n && out.len() >= m * n);
        let mut i = 0;
        while i < m {
            let mut j = 0;
            while j < n {
                if i + TILE <= m && j + TILE <= n {
                    let mut acc = [[0.0f64; TILE]; TILE];
                    for (r, row) in acc.iter_mut().enumerate() {
                        row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + TILE]);
                    }
                    for p in 0..k {
                        // SAFETY: i + r < m, p < k and j + c < n, so every index
                        // is within the lengths asserted above.
                        unsafe {
                            let bp = b.as_ptr().add(p * n + j);
                            let bv = [*bp, *bp.add(1), *bp.add(2), *bp.add(3)];
                            for (r, row) in acc.iter_mut().enumerate() {
                                let av = *a.get_unchecked((i + r) * ars + p * acs);
                                for c in 0..TILE {
                                    row[c] += av * bv[c];
                                }
                            }
                        }
                    }
                    for (r, row) in acc.iter().enumerate() {
                        out[(i + r) * n + j..(i + r) * n + j + TILE].copy_from_slice(row);
                    }
                } else {
                    for r in i..(i + TILE).min(m) {
                        for c in j..(j + TILE).min(n) {
                            let mut s = out[r * n + c];
                            for p in 0..k {
                                s += a[r * ars + p * acs] * b[p * n + c];
                            }
                            out[r * n + c] = s;
                        }
                    }
                }
                j += TILE;
            }
            i += TILE;
        }
    }

    /// out[m×n] += a[m×k] · b[k×n]
    pub fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        tiled(a, k, 1, b, out, m, k, n);
    }

    /// out[m×n] += a[m×k] · b[n×k]ᵀ
    pub fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        let mut bt = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                bt[p * n + j] = b[j * k + p];
            }
        }
        tiled(a, k, 1, &bt, out, m, k, n);
    }

    /// out[k×n] += a[m×k]ᵀ · b[m×n]
    pub fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        tiled(a, 1, k, b, out, k, m, n);
    }
}
