//! Deterministic numerical substrate: dense row-major matrices, a seeded
//! counter-based random stream, and the shared primitives (stable softmax,
//! L2 normalization, Jacobi eigendecomposition, finite differences) that the
//! rest of the crate builds on.
//!
//! Everything here is pure: no global state, no wall-clock entropy, no
//! platform-dependent randomness. Replaying the same [`RngState`] seed and
//! call sequence reproduces every stream bit-for-bit.

use crate::error::{CoreError, Result};

/// Norm cutoff below which a vector is considered degenerate.
pub const NORM_EPS: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(CoreError::EmptyInput("matrix with zero rows".into()));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(CoreError::ShapeMismatch(format!(
                    "ragged rows: expected {} columns, found {}",
                    cols,
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * v` for a column vector `v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `self^T * v`.
    pub fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "matvec_t shape mismatch");
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = self.row(i);
            let s = v[i];
            if s == 0.0 {
                continue;
            }
            for (o, &x) in out.iter_mut().zip(row) {
                *o += s * x;
            }
        }
        out
    }

    /// Rank-one accumulation `self += s * a * b^T`.
    pub fn add_scaled_outer(&mut self, a: &[f64], b: &[f64], s: f64) {
        assert_eq!(a.len(), self.rows);
        assert_eq!(b.len(), self.cols);
        for i in 0..self.rows {
            let ai = s * a[i];
            if ai == 0.0 {
                continue;
            }
            let row = self.row_mut(i);
            for (o, &bj) in row.iter_mut().zip(b) {
                *o += ai * bj;
            }
        }
    }

    pub fn add_scaled(&mut self, other: &Matrix, s: f64) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Small vector helpers
// ---------------------------------------------------------------------------

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn scaled(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Cosine of the angle between two vectors; `None` if either is degenerate.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na <= NORM_EPS || nb <= NORM_EPS {
        None
    } else {
        Some(dot(a, b) / (na * nb))
    }
}

/// Removes from `v` its component along the unit vector `axis`.
pub fn reject_from_unit(v: &[f64], axis: &[f64]) -> Vec<f64> {
    let c = dot(v, axis);
    v.iter().zip(axis).map(|(x, a)| x - c * a).collect()
}

// ---------------------------------------------------------------------------
// RngState
// ---------------------------------------------------------------------------

/// Counter-based deterministic random stream.
///
/// Output `i` of a stream with seed `s` is `mix64(s + (i+1) * GOLDEN_GAMMA)`,
/// the SplitMix64 construction. State is just (seed, counter), so streams are
/// trivially replayable, random-access, and portable across languages: any
/// implementation of the three xor-shift-multiply mixing steps reproduces the
/// exact bit stream.
///
/// Gaussian draws use the sum of 12 uniforms minus 6 (Irwin–Hall), which
/// involves only additions of exactly representable values and is therefore
/// bit-identical on every IEEE-754 platform, unlike Box–Muller whose
/// transcendental calls depend on the system libm. Tails are truncated at
/// six standard deviations, which is immaterial for noise generation here.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    seed: u64,
    counter: u64,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, counter: 0 }
    }

    /// Independent child stream identified by `stream`. Children of the same
    /// (seed, stream) pair are identical; distinct streams decorrelate
    /// through the 64-bit mixer.
    pub fn derive(base_seed: u64, stream: u64) -> Self {
        RngState::new(mix64(base_seed.wrapping_add(mix64(
            stream.wrapping_mul(GOLDEN_GAMMA).wrapping_add(GOLDEN_GAMMA),
        ))))
    }

    /// Forks a child stream, advancing this one by a single draw.
    pub fn fork(&mut self, tag: u64) -> RngState {
        RngState::derive(self.next_u64(), tag)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn position(&self) -> u64 {
        self.counter
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw (Irwin–Hall with 12 uniforms).
    pub fn next_gaussian(&mut self) -> f64 {
        let mut acc = 0.0;
        for _ in 0..12 {
            acc += self.next_f64();
        }
        acc - 6.0
    }

    /// Uniform integer in [0, n). Uses the widening-multiply map, whose bias
    /// is below 2^-64 for the n used here.
    pub fn gen_range(&mut self, n: usize) -> usize {
        assert!(n > 0, "gen_range(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.gen_range(i + 1);
            slice.swap(i, j);
        }
    }

    /// `k` distinct indices drawn from [0, n), in shuffled order.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "choose_distinct: k > n");
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx.truncate(k);
        idx
    }

    pub fn gaussian_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.next_gaussian()).collect()
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = self.next_gaussian();
        }
        m
    }

    /// Random point on the unit sphere in `dim` dimensions.
    pub fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v = self.gaussian_vec(dim);
            let n = norm(&v);
            if n > 1e-6 {
                return scaled(&v, 1.0 / n);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Shared primitives
// ---------------------------------------------------------------------------

/// Softmax over rows, applied independently to each column: output column j
/// is `softmax(logits[., j])`. Max-subtraction keeps `exp` in range for
/// arbitrarily large logits.
pub fn softmax_columns(logits: &Matrix) -> Result<Matrix> {
    if !logits.is_finite() {
        return Err(CoreError::NonFinite { context: "softmax_columns input".into() });
    }
    let (k, n) = (logits.rows(), logits.cols());
    let mut out = Matrix::zeros(k, n);
    for j in 0..n {
        let mut max = f64::NEG_INFINITY;
        for i in 0..k {
            max = max.max(logits.get(i, j));
        }
        let mut sum = 0.0;
        for i in 0..k {
            let e = (logits.get(i, j) - max).exp();
            out.set(i, j, e);
            sum += e;
        }
        for i in 0..k {
            out.set(i, j, out.get(i, j) / sum);
        }
    }
    Ok(out)
}

/// Softmax of a vector of logits, with max-subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Scales `v` to unit L2 norm. Errors if the norm is at or below `eps`; the
/// caller decides the fallback.
pub fn l2_normalize(v: &[f64], eps: f64) -> Result<Vec<f64>> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(CoreError::NonFinite { context: "l2_normalize input".into() });
    }
    if n <= eps {
        return Err(CoreError::DegenerateVector { index: 0, norm: n, eps });
    }
    Ok(scaled(v, 1.0 / n))
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching orthogonal
/// eigenvector matrix `V` (columns are eigenvectors), so `A = V diag(l) V^T`.
/// Input asymmetry beyond 1e-9 (max-abs) is rejected.
pub fn sym_eig(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if a.rows() != a.cols() {
        return Err(CoreError::ShapeMismatch(format!(
            "sym_eig expects square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_finite() {
        return Err(CoreError::NonFinite { context: "sym_eig input".into() });
    }
    let n = a.rows();
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((a.get(i, j) - a.get(j, i)).abs());
        }
    }
    if asym > 1e-9 {
        return Err(CoreError::NotSymmetric(asym));
    }

    let mut m = a.clone();
    // Symmetrize the sub-1e-9 asymmetry so rotations stay exact.
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, s);
            m.set(j, i, s);
        }
    }
    let mut v = Matrix::identity(n);
    let scale = m.frobenius_norm().max(1e-300);
    let tol = 1e-15 * scale;

    const MAX_SWEEPS: usize = 100;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m.get(p, q) * m.get(p, q);
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..(n.saturating_sub(1)) {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = 0.5 * (m.get(q, q) - m.get(p, p)) / apq;
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Rotate rows/columns p and q of m.
                for i in 0..n {
                    let mip = m.get(i, p);
                    let miq = m.get(i, q);
                    m.set(i, p, c * mip - s * miq);
                    m.set(i, q, s * mip + c * miq);
                }
                for i in 0..n {
                    let mpi = m.get(p, i);
                    let mqi = m.get(q, i);
                    m.set(p, i, c * mpi - s * mqi);
                    m.set(q, i, s * mpi + c * mqi);
                }
                // Accumulate the eigenvector basis.
                for i in 0..n {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }

    let mut pairs: Vec<(f64, usize)> = (0..n).map(|i| (m.get(i, i), i)).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let eigenvalues: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_col, &(_, old_col)) in pairs.iter().enumerate() {
        for i in 0..n {
            vectors.set(i, new_col, v.get(i, old_col));
        }
    }
    Ok((eigenvalues, vectors))
}

/// Seeded random orthogonal matrix via modified Gram–Schmidt (with one
/// re-orthogonalization pass) on a Gaussian matrix.
pub fn random_orthogonal(dim: usize, rng: &mut RngState) -> Matrix {
    assert!(dim >= 1, "random_orthogonal: dim >= 1");
    loop {
        let g = rng.gaussian_matrix(dim, dim);
        if let Some(q) = gram_schmidt_columns(&g) {
            return q;
        }
        // Rank-deficient draw; astronomically unlikely — redraw.
    }
}

fn gram_schmidt_columns(g: &Matrix) -> Option<Matrix> {
    let n = g.rows();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| g.get(i, j)).collect()).collect();
    for j in 0..n {
        // Two projection passes keep orthogonality at machine precision.
        for _ in 0..2 {
            for i in 0..j {
                let c = {
                    let (a, b) = (&cols[j], &cols[i]);
                    dot(a, b)
                };
                let prev = cols[i].clone();
                axpy(&mut cols[j], -c, &prev);
            }
        }
        let nrm = norm(&cols[j]);
        if nrm < 1e-8 {
            return None;
        }
        let inv = 1.0 / nrm;
        for x in &mut cols[j] {
            *x *= inv;
        }
    }
    let mut q = Matrix::zeros(n, n);
    for (j, col) in cols.iter().enumerate() {
        for i in 0..n {
            q.set(i, j, col[i]);
        }
    }
    Some(q)
}

/// Central-difference gradient of a scalar function: component `i` is
/// `(f(x + h e_i) - f(x - h e_i)) / (2h)`.
pub fn finite_diff_gradient(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    assert!(h > 0.0, "finite_diff_gradient: h must be positive");
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(CoreError::NonFinite {
                context: format!("finite_diff_gradient at coordinate {i}"),
            });
        }
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}
