//! Dense row-major matrices with a recording tape for reverse-mode
//! gradients, the layers the graph auto-encoders need, and Adam.
//!
//! Every value is a 2-D `rows × cols` matrix; vectors are `1 × n` and
//! scalars `1 × 1`.

mod adam;
mod layers;
mod params;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use layers::{
    dropout, leaky, BatchNorm, Embedding, GineLayer, GineMlp, LayerNorm, Linear, Mode, LEAKY_SLOPE,
};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{kl_term, smooth_l1, EdgeList, Segments, Tape, Var};

use crate::prelude::*;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("index {index} out of range for {len} rows in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward needs a 1x1 loss, got {0:?}")]
    NonScalar((usize, usize)),
    #[error("pooling over an empty node mask")]
    EmptyMask,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length");
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_vec(1, n, data)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// The single entry of a `1 × 1` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn fill(&mut self, v: f64) {
        for a in &mut self.data {
            *a = v;
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let mut out = Tensor::zeros(self.rows, other.cols);
        matmul_acc(
            &self.data,
            &other.data,
            &mut out.data,
            self.rows,
            self.cols,
            other.cols,
        );
        out
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

const MR: usize = 4;
/// Inner-dimension block; keeps one panel of `b` cache resident.
const KC: usize = 128;

/// `c += a · b` with `a: n×k`, `b: k×m`, all row-major.
///
/// Output tiles live in local accumulators while `p` runs over the inner
/// dimension in ascending order, so every entry is summed exactly as the
/// naive triple loop would sum it.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    let mut p0 = 0;
    while p0 < k {
        let p1 = (p0 + KC).min(k);
        let mut j0 = 0;
        while j0 < m {
            j0 = match m - j0 {
                w if w >= 16 => strip::<16>(a, b, c, n, k, m, j0, p0, p1),
                w if w >= 8 => strip::<8>(a, b, c, n, k, m, j0, p0, p1),
                w if w >= 4 => strip::<4>(a, b, c, n, k, m, j0, p0, p1),
                _ => strip::<1>(a, b, c, n, k, m, j0, p0, p1),
            };
        }
        p0 = p1;
    }
}

/// Columns `j0..j0+W` of `c`, inner indices `p0..p1`; returns the next column.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn strip<const W: usize>(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    n: usize,
    k: usize,
    m: usize,
    j0: usize,
    p0: usize,
    p1: usize,
) -> usize {
    let mut i0 = 0;
    while i0 + MR <= n {
        let mut acc = [[0.0; W]; MR];
        for (r, row) in acc.iter_mut().enumerate() {
            row.copy_from_slice(&c[(i0 + r) * m + j0..(i0 + r) * m + j0 + W]);
        }
        let arows: [&[f64]; MR] =
            core::array::from_fn(|r| &a[(i0 + r) * k + p0..(i0 + r) * k + p1]);
        for (pp, p) in (p0..p1).enumerate() {
            let bv: &[f64; W] = b[p * m + j0..p * m + j0 + W]
                .try_into()
                .expect("strip width");
            for (row, ar) in acc.iter_mut().zip(&arows) {
                let av = ar[pp];
                for q in 0..W {
                    row[q] += av * bv[q];
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            c[(i0 + r) * m + j0..(i0 + r) * m + j0 + W].copy_from_slice(row);
        }
        i0 += MR;
    }
    for i in i0..n {
        let mut row = [0.0; W];
        row.copy_from_slice(&c[i * m + j0..i * m + j0 + W]);
        for p in p0..p1 {
            let av = a[i * k + p];
            let bv: &[f64; W] = b[p * m + j0..p * m + j0 + W]
                .try_into()
                .expect("strip width");
            for q in 0..W {
                row[q] += av * bv[q];
            }
        }
        c[i * m + j0..i * m + j0 + W].copy_from_slice(&row);
    }
    j0 + W
}

/// `c += aᵀ · b` with `a: n×k`, `b: n×m`, giving `c: k×m`; rows of `a`
/// and `b` are consumed in order.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    let mut at = vec![0.0; n * k];
    for i in 0..n {
        for p in 0..k {
            at[p * n + i] = a[i * k + p];
        }
    }
    matmul_acc(&at, b, c, k, n, m);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::from_rows(&[vec![5.0, 6.0, 7.0], vec![8.0, 9.0, 10.0]]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[21.0, 24.0, 27.0, 47.0, 54.0, 61.0]);
    }

    #[test]
    fn transposed_product_matches() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let b = Tensor::from_rows(&[vec![1.0], vec![0.5], vec![-1.0]]);
        let mut c = Tensor::zeros(2, 1);
        matmul_tn_acc(a.data(), b.data(), c.data_mut(), 3, 2, 1);
        assert_eq!(c, a.transpose().matmul(&b));
    }

    fn naive(a: &Tensor, b: &Tensor, c0: &Tensor) -> Tensor {
        let mut c = c0.clone();
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = c.get(i, j);
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                c.set(i, j, s);
            }
        }
        c
    }

    #[test]
    fn blocked_kernels_match_naive_sums_bitwise() {
        let mut rng = crate::rng::SimRng::seed(3);
        for &(n, k, m) in &[
            (1, 1, 1),
            (5, 3, 17),
            (9, 20, 33),
            (4, 16, 16),
            (7, 5, 40),
            (3, 9, 2),
        ] {
            let t = |r: usize, c: usize, rng: &mut crate::rng::SimRng| {
                Tensor::from_vec(r, c, (0..r * c).map(|_| rng.range(-1.0, 1.0)).collect())
            };
            let (a, b, c0) = (t(n, k, &mut rng), t(k, m, &mut rng), t(n, m, &mut rng));
            let mut c = c0.clone();
            matmul_acc(a.data(), b.data(), c.data_mut(), n, k, m);
            assert_eq!(c, naive(&a, &b, &c0));
            let bt = t(n, m, &mut rng);
            let c1 = t(k, m, &mut rng);
            let mut c = c1.clone();
            matmul_tn_acc(a.data(), bt.data(), c.data_mut(), n, k, m);
            assert_eq!(c, naive(&a.transpose(), &bt, &c1));
        }
    }
}
