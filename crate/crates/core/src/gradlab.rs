//! Numerical validation of the gradient geometry the dual-phase design
//! rests on: analytic per-slot gradient fields of the holistic and matching
//! scores, the inter-slot alignment metric, numerical rank estimation,
//! Sinkhorn limit probes, and the decorrelation feasibility constructions
//! (rotation/scale invariance of the prototype CE, covariance rebase,
//! spectral floor, variance-hinge conflict).

use crate::encoder::{
    compute_loss, second_moment, DecorrelationConfig, DecorrelationKind, EncoderParams,
    LossConfig,
};
use crate::episode::EpisodeBatch;
use crate::error::{CoreError, Result};
use crate::matchers::{assignment_score, cost_matrix, make_coupling, Coupling, CouplingKind};
use crate::tensor::{
    dot, norm, random_orthogonal, reject_from_unit, sym_eig, Matrix, RngState, NORM_EPS,
};

// ---------------------------------------------------------------------------
// Gradient fields
// ---------------------------------------------------------------------------

/// Which variable a per-slot gradient is taken at: the raw projection
/// `y_k = W2 phi_k`, or the unit embedding `z_k` (where rows are tangent to
/// the sphere at their own slot).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradReference {
    RawProjection,
    UnitEmbedding,
}

/// K x D matrix whose row k is the gradient of a scalar score with respect
/// to slot k's reference variable.
#[derive(Debug, Clone)]
pub struct GradientField {
    pub per_slot: Matrix,
    pub reference: GradReference,
}

/// Per-slot gradient of the holistic cosine score `s = <e, P>` where
/// `u = sum_k omega_k y_k` and `e = u/|u|`.
///
/// At the raw projection the rows are `(omega_k / |u|) * reject_e(P)` — one
/// shared direction scaled per slot, a rank-one field. At the unit embedding
/// the shared signal additionally passes through each slot's tangent
/// projection and picks up the `omega_k |y_k| / |u|` scaling, so rows are no
/// longer collinear but keep a shared component.
pub fn holistic_grad(
    y_raw: &Matrix,
    omega: &[f64],
    prototype: &[f64],
    reference: GradReference,
) -> Result<GradientField> {
    let k = y_raw.rows();
    let d = y_raw.cols();
    if omega.len() != k || prototype.len() != d {
        return Err(CoreError::ShapeMismatch(format!(
            "holistic_grad: y {}x{}, {} weights, {}-dim prototype",
            k,
            d,
            omega.len(),
            prototype.len()
        )));
    }
    let u = y_raw.matvec_t(omega);
    let u_norm = norm(&u);
    if u_norm <= NORM_EPS {
        return Err(CoreError::DegenerateVector { index: 0, norm: u_norm, eps: NORM_EPS });
    }
    let e: Vec<f64> = u.iter().map(|&x| x / u_norm).collect();
    let shared = reject_from_unit(prototype, &e);
    let mut field = Matrix::zeros(k, d);
    match reference {
        GradReference::RawProjection => {
            for s in 0..k {
                let scale = omega[s] / u_norm;
                for (f, &g) in field.row_mut(s).iter_mut().zip(&shared) {
                    *f = scale * g;
                }
            }
        }
        GradReference::UnitEmbedding => {
            for s in 0..k {
                let y_norm = norm(y_raw.row(s));
                if y_norm <= NORM_EPS {
                    return Err(CoreError::DegenerateVector {
                        index: s,
                        norm: y_norm,
                        eps: NORM_EPS,
                    });
                }
                let z: Vec<f64> = y_raw.row(s).iter().map(|&x| x / y_norm).collect();
                let tangent = reject_from_unit(&shared, &z);
                let scale = omega[s] * y_norm / u_norm;
                for (f, &g) in field.row_mut(s).iter_mut().zip(&tangent) {
                    *f = scale * g;
                }
            }
        }
    }
    Ok(GradientField { per_slot: field, reference })
}

/// Per-slot gradient of the forward nearest-neighbour score
/// `s = (1/K) sum_k max_j cos(z_k, c_j)` at the unit embeddings:
/// row k is `(1/K) * reject_{z_k}(c_{match(k)})`. Row-argmax ties take the
/// lowest column index (the deterministic subgradient choice).
pub fn chamfer_grad(z_query: &Matrix, z_class: &Matrix) -> Result<GradientField> {
    if z_query.cols() != z_class.cols() {
        return Err(CoreError::ShapeMismatch(format!(
            "chamfer_grad: {}-dim vs {}-dim slots",
            z_query.cols(),
            z_class.cols()
        )));
    }
    let k = z_query.rows();
    let mut field = Matrix::zeros(k, z_query.cols());
    for s in 0..k {
        let zq = z_query.row(s);
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for j in 0..z_class.rows() {
            let v = dot(zq, z_class.row(j));
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        let tangent = reject_from_unit(z_class.row(best), zq);
        let scale = 1.0 / k as f64;
        for (f, &g) in field.row_mut(s).iter_mut().zip(&tangent) {
            *f = scale * g;
        }
    }
    Ok(GradientField { per_slot: field, reference: GradReference::UnitEmbedding })
}

/// Direct term of the coupling-family gradient with the coupling held
/// fixed: row k is `(1/K) * reject_{z_k}(sum_j T_kj c_j)`.
pub fn assignment_grad_direct(
    coupling: &Coupling,
    z_query: &Matrix,
    z_class: &Matrix,
) -> Result<GradientField> {
    let t = &coupling.t;
    if t.rows() != z_query.rows() || t.cols() != z_class.rows() {
        return Err(CoreError::ShapeMismatch(format!(
            "assignment_grad_direct: coupling {}x{} vs {} query and {} class slots",
            t.rows(),
            t.cols(),
            z_query.rows(),
            z_class.rows()
        )));
    }
    let k = z_query.rows();
    let d = z_query.cols();
    let mut field = Matrix::zeros(k, d);
    for s in 0..k {
        let target = z_class.matvec_t(t.row(s));
        let tangent = reject_from_unit(&target, z_query.row(s));
        let scale = 1.0 / k as f64;
        for (f, &g) in field.row_mut(s).iter_mut().zip(&tangent) {
            *f = scale * g;
        }
    }
    Ok(GradientField { per_slot: field, reference: GradReference::UnitEmbedding })
}

/// Full gradient of the coupling-family score including the dependence of
/// the coupling on the query slots, by central differences with the coupling
/// re-solved at every perturbation. Used to quantify how much the
/// frozen-coupling direct term misses.
pub fn assignment_grad_full(
    kind: &CouplingKind,
    z_query: &Matrix,
    z_class: &Matrix,
    step: f64,
) -> Result<GradientField> {
    let k = z_query.rows();
    let d = z_query.cols();
    let zc = z_class.clone();
    let kind = kind.clone();
    let score = move |flat: &[f64]| -> f64 {
        let rows: Vec<Vec<f64>> = flat
            .chunks(d)
            .map(|r| {
                let n = norm(r);
                r.iter().map(|&x| x / n).collect()
            })
            .collect();
        let zq = Matrix::from_rows(&rows).expect("same dim");
        let s = cost_matrix(&zq, &zc).expect("dims checked");
        let coupling = make_coupling(&kind, &s).expect("coupling");
        assignment_score(&coupling, &s).expect("score")
    };
    let flat: Vec<f64> = z_query.data().to_vec();
    let grad = crate::tensor::finite_diff_gradient(score, &flat, step)?;
    let mut field = Matrix::zeros(k, d);
    field.data_mut().copy_from_slice(&grad);
    Ok(GradientField { per_slot: field, reference: GradReference::UnitEmbedding })
}

// ---------------------------------------------------------------------------
// Alignment metric
// ---------------------------------------------------------------------------

/// Scoring function whose per-slot gradient field feeds the alignment
/// metric. The matching score here is the forward nearest-neighbour form on
/// the uncentered unit embeddings — the variable the formal analysis works
/// with; `Blend` combines both at the given mixing weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreKind {
    Holistic,
    Chamfer,
    Blend { gamma: f64 },
}

/// Mean pairwise cosine between per-slot gradients at the unit-embedding
/// reference, averaged over slot pairs, query-class pairs, and episodes.
#[derive(Debug, Clone)]
pub struct AlignmentReport {
    pub mean: f64,
    /// K x K matrix of mean pairwise cosines (diagonal 1).
    pub pairwise: Matrix,
    pub episode_count: usize,
    /// (query, class, pair) samples skipped because a gradient row vanished.
    pub skipped_pairs: usize,
}

pub fn alignment_metric(
    kind: ScoreKind,
    params: &EncoderParams,
    episodes: &[EpisodeBatch],
) -> Result<AlignmentReport> {
    if episodes.is_empty() {
        return Err(CoreError::EmptyInput("alignment_metric: no episodes".into()));
    }
    let tau = params.head.tau();
    let mut k_slots = 0usize;
    let mut sums = Matrix::zeros(1, 1);
    let mut counts = Matrix::zeros(1, 1);
    let mut skipped = 0usize;

    for episode in episodes {
        episode.validate()?;
        let class_ids = episode.support_classes();
        let supports: Vec<crate::encoder::ImageForward> = episode
            .support
            .iter()
            .map(|img| crate::encoder::encode_image(params, &img.aggregates))
            .collect::<Result<_>>()?;
        let prototypes = crate::encoder::compute_prototypes(
            &episode
                .support
                .iter()
                .zip(&supports)
                .map(|(img, fwd)| (fwd.holistic.e.clone(), img.class_id))
                .collect::<Vec<_>>(),
        )?;
        // Per-class pooled support slots (uncentered unit embeddings).
        let mut pools: Vec<Matrix> = Vec::with_capacity(class_ids.len());
        for &c in &class_ids {
            let mut rows = Vec::new();
            for (img, fwd) in episode.support.iter().zip(&supports) {
                if img.class_id == c {
                    for s in 0..fwd.embeddings.z.rows() {
                        rows.push(fwd.embeddings.z.row(s).to_vec());
                    }
                }
            }
            pools.push(Matrix::from_rows(&rows)?);
        }

        for img in &episode.query {
            let fwd = crate::encoder::encode_image(params, &img.aggregates)?;
            if k_slots == 0 {
                k_slots = fwd.embeddings.z.rows();
                sums = Matrix::zeros(k_slots, k_slots);
                counts = Matrix::zeros(k_slots, k_slots);
            }
            for (c_idx, proto) in prototypes.iter().enumerate() {
                let field = match kind {
                    ScoreKind::Holistic => {
                        let mut f = holistic_grad(
                            &fwd.embeddings.y_raw,
                            &fwd.omega,
                            &proto.direction,
                            GradReference::UnitEmbedding,
                        )?;
                        f.per_slot.scale(tau);
                        f
                    }
                    ScoreKind::Chamfer => chamfer_grad(&fwd.embeddings.z, &pools[c_idx])?,
                    ScoreKind::Blend { gamma } => {
                        let mut hol = holistic_grad(
                            &fwd.embeddings.y_raw,
                            &fwd.omega,
                            &proto.direction,
                            GradReference::UnitEmbedding,
                        )?;
                        hol.per_slot.scale(gamma * tau);
                        let ch = chamfer_grad(&fwd.embeddings.z, &pools[c_idx])?;
                        hol.per_slot.add_scaled(&ch.per_slot, (1.0 - gamma) * tau);
                        hol
                    }
                };
                for a in 0..k_slots {
                    for b in (a + 1)..k_slots {
                        match crate::tensor::cosine(field.per_slot.row(a), field.per_slot.row(b))
                        {
                            Some(cos) => {
                                sums.set(a, b, sums.get(a, b) + cos);
                                counts.set(a, b, counts.get(a, b) + 1.0);
                            }
                            None => skipped += 1,
                        }
                    }
                }
            }
        }
    }

    let mut pairwise = Matrix::identity(k_slots);
    let mut total = 0.0;
    let mut total_n = 0usize;
    for a in 0..k_slots {
        for b in (a + 1)..k_slots {
            let n = counts.get(a, b);
            if n > 0.0 {
                let mean = sums.get(a, b) / n;
                pairwise.set(a, b, mean);
                pairwise.set(b, a, mean);
                total += mean;
                total_n += 1;
            }
        }
    }
    if total_n == 0 {
        return Err(CoreError::Invalid("alignment_metric: every gradient pair vanished".into()));
    }
    Ok(AlignmentReport {
        mean: total / total_n as f64,
        pairwise,
        episode_count: episodes.len(),
        skipped_pairs: skipped,
    })
}

// ---------------------------------------------------------------------------
// Rank estimation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RankReport {
    /// Singular values of the K x D field, descending.
    pub singular_values: Vec<f64>,
    pub numerical_rank: usize,
    pub tol_ratio: f64,
    /// Absolute cutoff actually applied: `tol_ratio * sigma_1`.
    pub threshold: f64,
}

/// Numerical rank of a gradient field: singular values via the K x K Gram
/// eigenvalues, rank = count of `sigma_i >= tol_ratio * sigma_1`.
pub fn field_rank(field: &GradientField, tol_ratio: f64) -> Result<RankReport> {
    let f = &field.per_slot;
    if f.rows() == 0 {
        return Err(CoreError::EmptyInput("field_rank: empty field".into()));
    }
    let k = f.rows();
    let mut gram = Matrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = dot(f.row(i), f.row(j));
            gram.set(i, j, v);
            gram.set(j, i, v);
        }
    }
    let (eigs, _) = sym_eig(&gram)?;
    let singular_values: Vec<f64> = eigs.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let sigma1 = singular_values[0];
    if sigma1 == 0.0 {
        return Ok(RankReport { singular_values, numerical_rank: 0, tol_ratio, threshold: 0.0 });
    }
    let threshold = tol_ratio * sigma1;
    let numerical_rank = singular_values.iter().filter(|&&s| s >= threshold).count();
    Ok(RankReport { singular_values, numerical_rank, tol_ratio, threshold })
}

// ---------------------------------------------------------------------------
// Sinkhorn limit probe
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SinkhornProbeRow {
    pub epsilon: f64,
    /// Smallest mass the coupling places on any row's greedy match.
    pub min_peak_mass: f64,
    /// Max-entry deviation from the uniform coupling.
    pub max_uniform_dev: f64,
    /// Frobenius gap between this coupling's direct gradient and the
    /// hard-assignment gradient.
    pub grad_gap_to_hard: f64,
}

#[derive(Debug, Clone)]
pub struct SinkhornProbeReport {
    /// Smallest row margin (best minus second-best cosine).
    pub margin: f64,
    pub collision_free: bool,
    /// Which probe assumptions failed, if any (reported, not fatal).
    pub assumption_failures: Vec<String>,
    pub rows: Vec<SinkhornProbeRow>,
}

/// Sweeps the entropic coupling across regularization levels on one slot
/// configuration, reporting concentration toward the greedy assignment at
/// low epsilon and collapse toward uniform at high epsilon.
pub fn sinkhorn_limit_probe(
    z_query: &Matrix,
    z_class: &Matrix,
    epsilons: &[f64],
    required_margin: f64,
) -> Result<SinkhornProbeReport> {
    let s = cost_matrix(z_query, z_class)?;
    let k = s.rows();
    let mut failures = Vec::new();
    let mut margin = f64::INFINITY;
    let mut greedy = Vec::with_capacity(k);
    for i in 0..k {
        let row = s.row(i);
        let mut best = 0usize;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        let mut second = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if j != best {
                second = second.max(v);
            }
        }
        margin = margin.min(row[best] - second);
        greedy.push(best);
    }
    if margin < required_margin {
        failures.push(format!("row margin {margin:.4} below required {required_margin}"));
    }
    let mut seen = vec![false; s.cols()];
    let mut collision_free = true;
    for &g in &greedy {
        if seen[g] {
            collision_free = false;
        }
        seen[g] = true;
    }
    if !collision_free {
        failures.push("greedy assignment has column collisions".into());
    }

    let hard = make_coupling(&CouplingKind::HardChamfer, &s)?;
    let hard_grad = assignment_grad_direct(&hard, z_query, z_class)?;
    let uniform = 1.0 / s.cols() as f64;

    let mut rows = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let coupling = make_coupling(&CouplingKind::sinkhorn(eps), &s)?;
        let mut min_peak = f64::INFINITY;
        for (i, &g) in greedy.iter().enumerate() {
            min_peak = min_peak.min(coupling.t.get(i, g));
        }
        let mut max_dev = 0.0f64;
        for v in coupling.t.data() {
            max_dev = max_dev.max((v - uniform).abs());
        }
        let grad = assignment_grad_direct(&coupling, z_query, z_class)?;
        let mut diff = grad.per_slot.clone();
        diff.add_scaled(&hard_grad.per_slot, -1.0);
        rows.push(SinkhornProbeRow {
            epsilon: eps,
            min_peak_mass: min_peak,
            max_uniform_dev: max_dev,
            grad_gap_to_hard: diff.frobenius_norm(),
        });
    }
    Ok(SinkhornProbeReport { margin, collision_free, assumption_failures: failures, rows })
}

/// Margin-controlled slot configuration for the probes: query slots sit on
/// `K` orthogonal axes of a randomly rotated frame, class slots mix each
/// axis with a second orthogonal direction, so the cosine matrix has peak
/// `cos(theta)` on the identity assignment and zeros elsewhere.
pub fn margin_configuration(
    k: usize,
    dim: usize,
    theta: f64,
    rng: &mut RngState,
) -> (Matrix, Matrix) {
    assert!(dim >= 2 * k, "margin_configuration needs dim >= 2K");
    let basis = random_orthogonal(dim, rng);
    let mut zq = Matrix::zeros(k, dim);
    let mut zc = Matrix::zeros(k, dim);
    for s in 0..k {
        for i in 0..dim {
            zq.set(s, i, basis.get(i, s));
            zc.set(s, i, theta.cos() * basis.get(i, s) + theta.sin() * basis.get(i, s + k));
        }
    }
    (zq, zc)
}

// ---------------------------------------------------------------------------
// Decorrelation feasibility checks
// ---------------------------------------------------------------------------

fn episode_ce(params: &EncoderParams, episode: &EpisodeBatch) -> Result<f64> {
    Ok(compute_loss(params, episode, &LossConfig::holistic(DecorrelationConfig::none()))?.ce)
}

/// Absolute change in the prototype CE when the projection head is replaced
/// by `U W2` for a random orthogonal `U`, prototypes recomputed. The CE is
/// invariant under this family, so the result should sit at float noise.
pub fn ce_rotation_check(
    params: &EncoderParams,
    episode: &EpisodeBatch,
    rng: &mut RngState,
) -> Result<f64> {
    let base = episode_ce(params, episode)?;
    let u = random_orthogonal(params.dim(), rng);
    let mut rotated = params.clone();
    rotated.head.w2 = u.matmul(&params.head.w2);
    let rotated_ce = episode_ce(&rotated, episode)?;
    Ok((rotated_ce - base).abs())
}

/// Absolute CE change under uniform positive scaling of the head.
pub fn ce_scale_check(params: &EncoderParams, episode: &EpisodeBatch, c: f64) -> Result<f64> {
    if c <= 0.0 {
        return Err(CoreError::Invalid("ce_scale_check: scale must be positive".into()));
    }
    let base = episode_ce(params, episode)?;
    let mut scaled = params.clone();
    scaled.head.w2.scale(c);
    Ok((episode_ce(&scaled, episode)? - base).abs())
}

fn offdiag_frobenius(m: &Matrix) -> f64 {
    let mut acc = 0.0;
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            if i != j {
                acc += m.get(i, j) * m.get(i, j);
            }
        }
    }
    acc.sqrt()
}

fn covariance(y: &Matrix) -> Matrix {
    let (n, d) = (y.rows(), y.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(y.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut cov = Matrix::zeros(d, d);
    for i in 0..n {
        let centered: Vec<f64> = y.row(i).iter().zip(&mean).map(|(&v, &m)| v - m).collect();
        cov.add_scaled_outer(&centered, &centered, 1.0 / n as f64);
    }
    cov
}

fn episode_y_stack(params: &EncoderParams, episode: &EpisodeBatch) -> Result<Matrix> {
    let mut all_rows = Vec::new();
    for img in episode.support.iter().chain(&episode.query) {
        let fw = crate::encoder::encode_image(params, &img.aggregates)?;
        for s in 0..fw.embeddings.y_raw.rows() {
            all_rows.push(fw.embeddings.y_raw.row(s).to_vec());
        }
    }
    Matrix::from_rows(&all_rows)
}

#[derive(Debug, Clone)]
pub struct CcRebaseReport {
    pub w2_rebased: Matrix,
    pub offdiag_before: f64,
    pub offdiag_after: f64,
    pub delta_ce: f64,
}

/// Orthogonal rebase of the projection head that diagonalizes the batch
/// covariance of the raw slot projections. The rotation lives inside the CE
/// symmetry orbit, so the CE stays put while the off-diagonal covariance
/// mass collapses: the joint-feasibility construction run numerically.
pub fn cc_rebase(params: &EncoderParams, episode: &EpisodeBatch) -> Result<CcRebaseReport> {
    let y = episode_y_stack(params, episode)?;
    let sigma_y = covariance(&y);
    let (eigs, v) = sym_eig(&sigma_y)?;
    let max_eig = eigs[0].abs().max(1e-300);
    if eigs[eigs.len() - 1] <= 1e-12 * max_eig {
        return Err(CoreError::Invalid(format!(
            "cc_rebase: projected covariance is singular (min/max eig {:.3e}/{:.3e})",
            eigs[eigs.len() - 1],
            max_eig
        )));
    }
    let w2_rebased = v.transpose().matmul(&params.head.w2);
    let mut rebased = params.clone();
    rebased.head.w2 = w2_rebased.clone();

    let sigma_after = covariance(&episode_y_stack(&rebased, episode)?);
    let delta_ce = (episode_ce(&rebased, episode)? - episode_ce(params, episode)?).abs();
    Ok(CcRebaseReport {
        w2_rebased,
        offdiag_before: offdiag_frobenius(&sigma_y),
        offdiag_after: offdiag_frobenius(&sigma_after),
        delta_ce,
    })
}

#[derive(Debug, Clone)]
pub struct SpectralFloorReport {
    pub loss: f64,
    pub floor: f64,
    pub slack: f64,
}

/// Whitening penalty of a batch of unit rows against its analytic floor
/// `(d-1)^2 / d`, which no unit-norm batch can beat: the trace of the second
/// moment is pinned to 1.
pub fn spectral_floor_check(z_batch: &Matrix) -> Result<SpectralFloorReport> {
    if z_batch.rows() == 0 {
        return Err(CoreError::EmptyInput("spectral_floor_check: empty batch".into()));
    }
    let d = z_batch.cols() as f64;
    let mut s = second_moment(z_batch);
    s.add_scaled(&Matrix::identity(z_batch.cols()), -1.0);
    let f = s.frobenius_norm();
    let loss = f * f;
    let floor = (d - 1.0) * (d - 1.0) / d;
    Ok(SpectralFloorReport { loss, floor, slack: loss - floor })
}

/// Analytic whitening floor for dimension `d`.
pub fn spectral_floor(d: usize) -> f64 {
    let d = d as f64;
    (d - 1.0) * (d - 1.0) / d
}

/// Mean inner product between the variance-hinge anti-gradient and the
/// within-class contraction direction (class centroid minus sample).
/// Negative values mean the hinge fights the prototype loss's
/// cluster-tightening inside each class.
pub fn vicreg_ce_conflict(
    y: &Matrix,
    class_ids: &[usize],
    config: &DecorrelationConfig,
) -> Result<f64> {
    if y.rows() != class_ids.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "vicreg_ce_conflict: {} rows vs {} class ids",
            y.rows(),
            class_ids.len()
        )));
    }
    if config.kind != DecorrelationKind::VicregVariance {
        return Err(CoreError::Invalid(
            "vicreg_ce_conflict expects the variance-hinge configuration".into(),
        ));
    }
    let grad = crate::encoder::decorrelation_gradient(config, y)?;
    let d = y.cols();
    let mut classes: Vec<usize> = class_ids.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut centroids = vec![vec![0.0; d]; classes.len()];
    let mut counts = vec![0usize; classes.len()];
    for (i, &c) in class_ids.iter().enumerate() {
        let idx = classes.binary_search(&c).unwrap();
        counts[idx] += 1;
        for (m, &v) in centroids[idx].iter_mut().zip(y.row(i)) {
            *m += v;
        }
    }
    for (m, &n) in centroids.iter_mut().zip(&counts) {
        for x in m.iter_mut() {
            *x /= n as f64;
        }
    }
    let mut acc = 0.0;
    for (i, &c) in class_ids.iter().enumerate() {
        let idx = classes.binary_search(&c).unwrap();
        let mut inner = 0.0;
        for j in 0..d {
            let contraction = centroids[idx][j] - y.get(i, j);
            inner += (-grad.get(i, j)) * contraction;
        }
        acc += inner;
    }
    Ok(acc / y.rows() as f64)
}
