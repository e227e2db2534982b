//! Dense row-major `f64` matrices and the small set of numerically careful
//! operations the rest of the crate leans on: symmetric-PSD square roots and
//! solves, Gaussian moment estimation, seeded Gaussian sampling, and CSV I/O.
//!
//! Everything here is deliberately plain: one storage layout (row-major,
//! contiguous), one scalar type (`f64`), shapes checked at the boundary.
//! Eigendecompositions and Cholesky factorizations are delegated to
//! `nalgebra`; the clamping and validation policies around them live here.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Errors from tensor construction, factorization, and I/O.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("matrix is not symmetric positive definite: eigenvalue {eigenvalue:.6e} below tolerance {tolerance:.6e}")]
    NotSpd { eigenvalue: f64, tolerance: f64 },
    #[error("matrix is not symmetric: max |M - M^T| entry is {max_abs_diff:.6e}")]
    NotSymmetric { max_abs_diff: f64 },
    #[error("need at least 2 samples for empirical moments, got {got}")]
    TooFewSamples { got: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("empty matrix where data was required")]
    Empty,
    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type TensorResult<T> = Result<T, TensorError>;

/// Shared thread pool for the crate's data-parallel loops.
///
/// Sized from `CONDOT_THREADS` when that is set to a positive integer,
/// otherwise from the machine. Every parallel loop in the crate splits work
/// so each output element is computed by exactly one task with a fixed
/// internal accumulation order, which keeps results identical across thread
/// counts.
pub fn thread_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("CONDOT_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(0); // 0 lets rayon pick the machine default
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool construction")
    })
}

/// Flop threshold below which matmul stays single-threaded; splitting tiny
/// products across threads costs more than it saves.
const PAR_MATMUL_MIN_FLOPS: usize = 1 << 21;

/// Dense row-major matrix of `f64`.
///
/// The storage contract is fixed: `data[r * cols + c]` is entry `(r, c)`,
/// and `data.len() == rows * cols` always holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> TensorResult<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Build from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> TensorResult<Self> {
        if rows.is_empty() {
            return Err(TensorError::Empty);
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    expected: format!("row of length {cols}"),
                    got: format!("row {i} of length {}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(DenseMatrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A 1xN row matrix.
    pub fn row_vector(values: &[f64]) -> Self {
        DenseMatrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    /// An Nx1 column matrix.
    pub fn col_vector(values: &[f64]) -> Self {
        DenseMatrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Matrix product `self * other`.
    ///
    /// The inner loop runs over rows of `other` (i-k-j order) so both
    /// operands stream in row-major order.
    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul inner dimensions: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = DenseMatrix::zeros(n, m);
        let kernel = |i: usize, orow: &mut [f64]| {
            let arow = &self.data[i * k..(i + 1) * k];
            for (p, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += a * b;
                }
            }
        };
        if n * k * m >= PAR_MATMUL_MIN_FLOPS && n > 1 {
            thread_pool().install(|| {
                out.data
                    .par_chunks_mut(m)
                    .enumerate()
                    .for_each(|(i, orow)| kernel(i, orow));
            });
        } else {
            for (i, orow) in out.data.chunks_mut(m).enumerate() {
                kernel(i, orow);
            }
        }
        out
    }

    /// Apply `self` (d x d) to each row of `x` (n x d) and add `offset`,
    /// i.e. rows become `self * x_i + offset`. Used for affine pushforwards.
    pub fn affine_apply_rows(&self, x: &DenseMatrix, offset: &[f64]) -> DenseMatrix {
        assert_eq!(self.rows, self.cols);
        assert_eq!(self.cols, x.cols());
        assert_eq!(offset.len(), self.rows);
        let mut out = x.matmul(&self.transpose());
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += offset[c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> DenseMatrix {
        self.map(|v| v * k)
    }

    pub fn add(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.shape(), other.shape());
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn sub(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.shape(), other.shape());
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(m.nrows(), m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                out.data[r * m.ncols() + c] = m[(r, c)];
            }
        }
        out
    }
}

/// First and second moments of a Gaussian: mean vector and covariance.
///
/// The covariance must be symmetric (to 1e-10 relative) and is validated on
/// construction via [`GaussianMoments::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMoments {
    pub mean: Vec<f64>,
    pub cov: DenseMatrix,
}

impl GaussianMoments {
    pub fn new(mean: Vec<f64>, cov: DenseMatrix) -> TensorResult<Self> {
        if cov.rows() != cov.cols() || cov.rows() != mean.len() {
            return Err(TensorError::ShapeMismatch {
                expected: format!("{0}-vector with {0}x{0} covariance", mean.len()),
                got: format!("cov {}x{}", cov.rows(), cov.cols()),
            });
        }
        let scale = cov.max_abs().max(1.0);
        let asym = max_asymmetry(&cov);
        if asym > 1e-10 * scale {
            return Err(TensorError::NotSymmetric { max_abs_diff: asym });
        }
        Ok(GaussianMoments { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Standard normal in `d` dimensions.
    pub fn standard(d: usize) -> Self {
        GaussianMoments {
            mean: vec![0.0; d],
            cov: DenseMatrix::identity(d),
        }
    }
}

fn max_asymmetry(m: &DenseMatrix) -> f64 {
    let mut worst = 0.0_f64;
    for r in 0..m.rows() {
        for c in (r + 1)..m.cols() {
            worst = worst.max((m.get(r, c) - m.get(c, r)).abs());
        }
    }
    worst
}

/// Eigenvalue floor used before square roots, solves, and sampling factors:
/// `1e-10 * trace(M) / d`. Zero-trace (all-zero PSD) matrices get a floor of
/// zero so they pass through unchanged.
pub fn eig_floor(m: &DenseMatrix) -> f64 {
    let d = m.rows().max(1) as f64;
    let trace: f64 = (0..m.rows()).map(|i| m.get(i, i)).sum();
    1e-10 * trace.max(0.0) / d
}

struct SymEigen {
    values: Vec<f64>,
    /// Columns are eigenvectors, same order as `values`.
    vectors: DMatrix<f64>,
}

/// Symmetric eigendecomposition with the crate's SPD policy applied:
/// rejects asymmetric input, rejects eigenvalues below `-1e-8 * ||M||`
/// (spectral norm), clamps the rest to `eig_floor`.
fn checked_sym_eigen(m: &DenseMatrix) -> TensorResult<SymEigen> {
    if m.rows() != m.cols() {
        return Err(TensorError::ShapeMismatch {
            expected: "square matrix".into(),
            got: format!("{}x{}", m.rows(), m.cols()),
        });
    }
    if m.rows() == 0 {
        return Err(TensorError::Empty);
    }
    let scale = m.max_abs().max(1e-300);
    let asym = max_asymmetry(m);
    if asym > 1e-8 * scale {
        return Err(TensorError::NotSymmetric { max_abs_diff: asym });
    }
    // Work on the symmetrized matrix so tiny representational asymmetry
    // cannot leak into the factorization.
    let mut sym = m.clone();
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            let v = 0.5 * (m.get(r, c) + m.get(c, r));
            sym.set(r, c, v);
        }
    }
    let eig = sym.to_nalgebra().symmetric_eigen();
    let spectral = eig
        .eigenvalues
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let tol = -1e-8 * spectral;
    let floor = eig_floor(&sym);
    let mut values = Vec::with_capacity(eig.eigenvalues.len());
    for &ev in eig.eigenvalues.iter() {
        if ev < tol {
            return Err(TensorError::NotSpd {
                eigenvalue: ev,
                tolerance: tol,
            });
        }
        values.push(ev.max(floor));
    }
    Ok(SymEigen {
        values,
        vectors: eig.eigenvectors,
    })
}

/// Symmetric PSD eigendecomposition sorted by descending eigenvalue.
///
/// Returns `(values, vectors)` where column `j` of `vectors` is the unit
/// eigenvector for `values[j]`. Each eigenvector's sign is fixed so its
/// largest-magnitude entry is positive (first such entry on ties), making
/// the decomposition deterministic across runs.
pub fn sym_eigen_desc(m: &DenseMatrix) -> TensorResult<(Vec<f64>, DenseMatrix)> {
    let eig = checked_sym_eigen(m)?;
    let d = m.rows();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.values[b].total_cmp(&eig.values[a]));
    let mut values = Vec::with_capacity(d);
    let mut vectors = DenseMatrix::zeros(d, d);
    for (out_col, &src_col) in order.iter().enumerate() {
        values.push(eig.values[src_col]);
        let mut pivot = 0;
        for r in 1..d {
            if eig.vectors[(r, src_col)].abs() > eig.vectors[(pivot, src_col)].abs() {
                pivot = r;
            }
        }
        let flip = if eig.vectors[(pivot, src_col)] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..d {
            vectors.set(r, out_col, flip * eig.vectors[(r, src_col)]);
        }
    }
    Ok((values, vectors))
}

/// Symmetric PSD square root `S` with `S * S = M` (to factorization accuracy),
/// computed via symmetric eigendecomposition.
///
/// Eigenvalues in `[-1e-8 * ||M||, eig_floor)` are clamped up to the floor;
/// anything more negative is a hard [`TensorError::NotSpd`].
///
/// ```
/// use condot::tensor_core::{spd_sqrt, DenseMatrix};
/// let m = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
/// let s = spd_sqrt(&m).unwrap();
/// // eigenvalues of m are 3 and 1, so s = [[(r3+1)/2, (r3-1)/2], ...]
/// assert!((s.get(0, 0) - 1.3660254037844384).abs() < 1e-12);
/// assert!((s.get(0, 1) - 0.3660254037844386).abs() < 1e-12);
/// let back = s.matmul(&s);
/// assert!(back.sub(&m).max_abs() < 1e-10);
/// ```
pub fn spd_sqrt(m: &DenseMatrix) -> TensorResult<DenseMatrix> {
    let eig = checked_sym_eigen(m)?;
    let d = m.rows();
    let q = &eig.vectors;
    let lam = DVector::from_iterator(d, eig.values.iter().map(|v| v.sqrt()));
    let s = q * DMatrix::from_diagonal(&lam) * q.transpose();
    // Symmetrize the reconstruction; floating point can leave ~1e-16 skew.
    let mut out = DenseMatrix::from_nalgebra(&s);
    for r in 0..d {
        for c in (r + 1)..d {
            let v = 0.5 * (out.get(r, c) + out.get(c, r));
            out.set(r, c, v);
            out.set(c, r, v);
        }
    }
    Ok(out)
}

/// Solve `M x = b` for symmetric PSD `M` under the same eigenvalue policy as
/// [`spd_sqrt`]. Uses the clamped eigendecomposition directly so the two
/// operations stay consistent on near-singular input.
pub fn spd_solve(m: &DenseMatrix, b: &[f64]) -> TensorResult<Vec<f64>> {
    if b.len() != m.rows() {
        return Err(TensorError::ShapeMismatch {
            expected: format!("rhs of length {}", m.rows()),
            got: format!("length {}", b.len()),
        });
    }
    let eig = checked_sym_eigen(m)?;
    let q = &eig.vectors;
    let rhs = DVector::from_column_slice(b);
    let mut y = q.transpose() * rhs;
    for (i, v) in y.iter_mut().enumerate() {
        let lam = eig.values[i];
        if lam <= 0.0 {
            return Err(TensorError::NotSpd {
                eigenvalue: lam,
                tolerance: 0.0,
            });
        }
        *v /= lam;
    }
    let x = q * y;
    Ok(x.iter().copied().collect())
}

/// Inverse of a symmetric PSD matrix through the same clamped eigen path.
pub fn spd_inverse(m: &DenseMatrix) -> TensorResult<DenseMatrix> {
    let eig = checked_sym_eigen(m)?;
    let d = m.rows();
    for &v in &eig.values {
        if v <= 0.0 {
            return Err(TensorError::NotSpd {
                eigenvalue: v,
                tolerance: 0.0,
            });
        }
    }
    let q = &eig.vectors;
    let lam = DVector::from_iterator(d, eig.values.iter().map(|v| 1.0 / v));
    let inv = q * DMatrix::from_diagonal(&lam) * q.transpose();
    let mut out = DenseMatrix::from_nalgebra(&inv);
    for r in 0..d {
        for c in (r + 1)..d {
            let v = 0.5 * (out.get(r, c) + out.get(c, r));
            out.set(r, c, v);
            out.set(c, r, v);
        }
    }
    Ok(out)
}

/// Draw `n` samples from `N(mean, cov)` with a seeded, versioned generator
/// (ChaCha8). The covariance is eigenvalue-clamped, then Cholesky-factored;
/// samples are `mean + L z` with `z` drawn row by row, coordinate by
/// coordinate, so the stream is reproducible byte for byte.
pub fn sample_gaussian(moments: &GaussianMoments, n: usize, seed: u64) -> TensorResult<DenseMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_gaussian_with(moments, n, &mut rng)
}

/// Like [`sample_gaussian`] but advancing a caller-owned stream.
pub fn sample_gaussian_with(
    moments: &GaussianMoments,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> TensorResult<DenseMatrix> {
    let d = moments.dim();
    let factor = sampling_factor(&moments.cov)?;
    let mut out = DenseMatrix::zeros(n, d);
    let mut z = vec![0.0; d];
    for r in 0..n {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let row = out.row_mut(r);
        for i in 0..d {
            let mut acc = moments.mean[i];
            // L is lower-triangular: only j <= i contribute.
            for j in 0..=i {
                acc += factor.get(i, j) * z[j];
            }
            row[i] = acc;
        }
    }
    Ok(out)
}

/// Lower-triangular factor used for sampling: Cholesky of the clamped
/// covariance, or the zero matrix for an all-zero covariance (degenerate
/// point mass).
fn sampling_factor(cov: &DenseMatrix) -> TensorResult<DenseMatrix> {
    let eig = checked_sym_eigen(cov)?;
    let d = cov.rows();
    if eig.values.iter().all(|&v| v == 0.0) {
        return Ok(DenseMatrix::zeros(d, d));
    }
    let q = &eig.vectors;
    let lam = DVector::from_column_slice(&eig.values);
    let clamped = q * DMatrix::from_diagonal(&lam) * q.transpose();
    // Symmetrize before factoring; reconstruction skew can be ~1e-16.
    let sym = 0.5 * (&clamped + clamped.transpose());
    match nalgebra::Cholesky::new(sym) {
        Some(chol) => Ok(DenseMatrix::from_nalgebra(&chol.l())),
        None => {
            // The clamp should have made this PD; fall back to the eigen
            // factor Q sqrt(L), which also satisfies F F^T = cov.
            let lam_sqrt = DVector::from_iterator(d, eig.values.iter().map(|v| v.sqrt()));
            let f = q * DMatrix::from_diagonal(&lam_sqrt);
            Ok(DenseMatrix::from_nalgebra(&f))
        }
    }
}

/// Sample mean and unbiased (n-1) covariance of the rows of `x`.
///
/// Accumulation runs in a canonical order (rows sorted lexicographically by
/// value) so the result is exactly invariant under row permutation.
pub fn empirical_moments(x: &DenseMatrix) -> TensorResult<GaussianMoments> {
    let n = x.rows();
    let d = x.cols();
    if n < 2 {
        return Err(TensorError::TooFewSamples { got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| {
        let ra = x.row(a);
        let rb = x.row(b);
        for i in 0..d {
            match ra[i].total_cmp(&rb[i]) {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        std::cmp::Ordering::Equal
    });
    let mut mean = vec![0.0; d];
    for &r in &order {
        let row = x.row(r);
        for i in 0..d {
            mean[i] += row[i];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = DenseMatrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for &r in &order {
        let row = x.row(r);
        for i in 0..d {
            centered[i] = row[i] - mean[i];
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                let v = cov.get(i, j) + ci * centered[j];
                cov.set(i, j, v);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov.get(i, j) / denom;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    GaussianMoments::new(mean, cov)
}

/// Squared Euclidean distances between rows of `x` (n x d) and rows of `y`
/// (m x d), as an n x m matrix.
pub fn pairwise_sq_dists(x: &DenseMatrix, y: &DenseMatrix) -> DenseMatrix {
    assert_eq!(x.cols(), y.cols(), "pairwise distance dimension mismatch");
    let mut out = DenseMatrix::zeros(x.rows(), y.rows());
    for i in 0..x.rows() {
        let xi = x.row(i);
        for j in 0..y.rows() {
            let yj = y.row(j);
            let mut acc = 0.0;
            for k in 0..x.cols() {
                let dk = xi[k] - yj[k];
                acc += dk * dk;
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// Read a matrix from CSV. A header row is optional: if every field of the
/// first line parses as `f64` it is data, otherwise it is skipped.
pub fn read_matrix_csv(path: &Path) -> TensorResult<DenseMatrix> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut expected_cols = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        let parsed: Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(vals) => {
                if let Some(c) = expected_cols {
                    if vals.len() != c {
                        return Err(TensorError::Csv {
                            line: idx + 1,
                            message: format!("expected {c} columns, got {}", vals.len()),
                        });
                    }
                } else {
                    expected_cols = Some(vals.len());
                }
                rows.push(vals);
            }
            Err(e) => {
                if idx == 0 {
                    // Header row; skip it.
                    continue;
                }
                return Err(TensorError::Csv {
                    line: idx + 1,
                    message: format!("unparseable field: {e}"),
                });
            }
        }
    }
    if rows.is_empty() {
        return Err(TensorError::Empty);
    }
    DenseMatrix::from_rows(&rows)
}

/// Write a matrix as headerless CSV with shortest round-trip float
/// formatting, so `read_matrix_csv` recovers it bit for bit.
pub fn write_matrix_csv(path: &Path, m: &DenseMatrix) -> TensorResult<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let mut line = String::new();
    for r in 0..m.rows() {
        line.clear();
        for (c, v) in m.row(r).iter().enumerate() {
            if c > 0 {
                line.push(',');
            }
            // Rust's float Display is shortest-round-trip, which is what the
            // regeneration guarantees rely on.
            line.push_str(&format!("{v}"));
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        let err = DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { len: 3, .. }));
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = a.matmul(&b);
        assert_eq!(c.row(0), &[19.0, 22.0]);
        assert_eq!(c.row(1), &[43.0, 50.0]);
    }

    #[test]
    fn spd_sqrt_two_by_two_frozen_value() {
        let m = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let s = spd_sqrt(&m).unwrap();
        // Eigenvalues 3 and 1; closed form (sqrt3 +- 1)/2.
        assert!((s.get(0, 0) - 1.366_025_403_784_438_4).abs() < 1e-12);
        assert!((s.get(0, 1) - 0.366_025_403_784_438_6).abs() < 1e-12);
        assert!((s.get(1, 0) - s.get(0, 1)).abs() < 1e-15);
        let resid = s.matmul(&s).sub(&m).max_abs();
        assert!(resid < 1e-10, "S*S residual {resid}");
    }

    #[test]
    fn spd_sqrt_identity_is_identity() {
        let s = spd_sqrt(&DenseMatrix::identity(4)).unwrap();
        assert!(s.sub(&DenseMatrix::identity(4)).max_abs() < 1e-12);
    }

    #[test]
    fn spd_sqrt_rejects_indefinite() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -0.5]]).unwrap();
        match spd_sqrt(&m) {
            Err(TensorError::NotSpd { eigenvalue, .. }) => {
                assert!((eigenvalue + 0.5).abs() < 1e-12, "reported {eigenvalue}")
            }
            other => panic!("expected NotSpd, got {other:?}"),
        }
    }

    #[test]
    fn spd_sqrt_rejects_asymmetric() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(spd_sqrt(&m), Err(TensorError::NotSymmetric { .. })));
    }

    #[test]
    fn spd_sqrt_clamps_tiny_negative() {
        // Eigenvalue -1e-12 is within -1e-8*||M|| tolerance: clamped, not fatal.
        let m = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -1e-12]]).unwrap();
        let s = spd_sqrt(&m).unwrap();
        assert!(s.get(1, 1) >= 0.0);
    }

    #[test]
    fn spd_solve_recovers_rhs() {
        let m = DenseMatrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let b = [1.0, 2.0];
        let x = spd_solve(&m, &b).unwrap();
        let r0 = 4.0 * x[0] + 1.0 * x[1] - b[0];
        let r1 = 1.0 * x[0] + 3.0 * x[1] - b[1];
        assert!(r0.abs() < 1e-12 && r1.abs() < 1e-12);
    }

    #[test]
    fn empirical_moments_unbiased_and_symmetric() {
        let x = DenseMatrix::from_rows(&[
            vec![1.0, 2.0],
            vec![3.0, 0.0],
            vec![-1.0, 1.0],
            vec![2.0, 4.0],
        ])
        .unwrap();
        let mom = empirical_moments(&x).unwrap();
        assert!((mom.mean[0] - 1.25).abs() < 1e-15);
        assert!((mom.mean[1] - 1.75).abs() < 1e-15);
        // var of column 0 with n-1 divisor: ((..)^2 sums)/3
        let c0: f64 = [1.0, 3.0, -1.0, 2.0]
            .iter()
            .map(|v| (v - 1.25) * (v - 1.25))
            .sum::<f64>()
            / 3.0;
        assert!((mom.cov.get(0, 0) - c0).abs() < 1e-14);
        assert_eq!(mom.cov.get(0, 1), mom.cov.get(1, 0));
    }

    #[test]
    fn empirical_moments_exactly_permutation_invariant() {
        let x = DenseMatrix::from_rows(&[
            vec![0.1234567891234, -2.5],
            vec![3.00001, 0.77],
            vec![-1.5, 1.25],
            vec![2.25, 4.125],
            vec![0.333333333333, -0.125],
        ])
        .unwrap();
        let perm = DenseMatrix::from_rows(&[
            x.row(3).to_vec(),
            x.row(0).to_vec(),
            x.row(4).to_vec(),
            x.row(2).to_vec(),
            x.row(1).to_vec(),
        ])
        .unwrap();
        let a = empirical_moments(&x).unwrap();
        let b = empirical_moments(&perm).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.cov, b.cov);
    }

    #[test]
    fn empirical_moments_needs_two_samples() {
        let x = DenseMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(
            empirical_moments(&x),
            Err(TensorError::TooFewSamples { got: 1 })
        ));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let mom = GaussianMoments::new(
            vec![1.0, -2.0],
            DenseMatrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap(),
        )
        .unwrap();
        let a = sample_gaussian(&mom, 16, 42).unwrap();
        let b = sample_gaussian(&mom, 16, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_gaussian(&mom, 16, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_covariance_gives_constant_rows() {
        let mom = GaussianMoments::new(vec![3.0, -1.0], DenseMatrix::zeros(2, 2)).unwrap();
        let s = sample_gaussian(&mom, 5, 7).unwrap();
        for r in 0..5 {
            assert_eq!(s.row(r), &[3.0, -1.0]);
        }
    }

    #[test]
    fn sample_moments_converge() {
        let cov = DenseMatrix::from_rows(&[vec![2.0, 0.7], vec![0.7, 1.2]]).unwrap();
        let mom = GaussianMoments::new(vec![0.5, -0.25], cov.clone()).unwrap();
        let s = sample_gaussian(&mom, 60_000, 9).unwrap();
        let est = empirical_moments(&s).unwrap();
        for i in 0..2 {
            assert!((est.mean[i] - mom.mean[i]).abs() < 0.03);
        }
        assert!(est.cov.sub(&cov).max_abs() < 0.05);
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("condot-tensor-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.csv");
        let m = DenseMatrix::from_rows(&[
            vec![std::f64::consts::PI, -1.0e-17],
            vec![0.1, 123456789.123456789],
        ])
        .unwrap();
        write_matrix_csv(&path, &m).unwrap();
        let back = read_matrix_csv(&path).unwrap();
        assert_eq!(m, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn csv_reader_skips_header() {
        let dir = std::env::temp_dir().join(format!("condot-tensor-h-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("h.csv");
        std::fs::write(&path, "x0,x1\n1.0,2.0\n3.0,4.0\n").unwrap();
        let m = read_matrix_csv(&path).unwrap();
        assert_eq!(m.shape(), (2, 2));
        assert_eq!(m.get(1, 1), 4.0);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn csv_reader_reports_line_of_bad_field() {
        let dir = std::env::temp_dir().join(format!("condot-tensor-b-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("b.csv");
        std::fs::write(&path, "1.0,2.0\n3.0,oops\n").unwrap();
        match read_matrix_csv(&path) {
            Err(TensorError::Csv { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected csv error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
