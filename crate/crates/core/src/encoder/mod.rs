//! Phase-I trainables and objectives: the router MLP that assigns simplex
//! importance weights to slots, the shared projection head, prototype
//! cross-entropy on the holistic embedding, the decorrelation penalties, and
//! one optional training-time matching term. Analytic gradients and the
//! optimizer step live in [`grad`].

mod grad;

pub use grad::{
    encoder_gradients, flatten_params, train_step, unflatten_params, AdamConfig, AdamState,
    EncoderGradients, PARAM_LAYOUT_NOTE,
};

use std::collections::BTreeMap;

use crate::episode::EpisodeBatch;
use crate::error::{CoreError, Result};
use crate::matchers::{center_slots, select_topk};
use crate::slots::SlotAggregates;
use crate::tensor::{dot, l2_normalize, norm, softmax, Matrix, RngState, NORM_EPS};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// One-hidden-layer MLP router: slot weight logits are `v . relu(W1 phi_k)`.
#[derive(Debug, Clone)]
pub struct RouterParams {
    /// h x D hidden projection.
    pub w1: Matrix,
    /// h-dimensional readout.
    pub v: Vec<f64>,
}

impl RouterParams {
    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn seeded(hidden: usize, dim: usize, rng: &mut RngState) -> Self {
        assert!(hidden >= 1);
        let mut w1 = rng.gaussian_matrix(hidden, dim);
        w1.scale(1.0 / (dim as f64).sqrt());
        let v: Vec<f64> =
            (0..hidden).map(|_| rng.next_gaussian() / (hidden as f64).sqrt()).collect();
        RouterParams { w1, v }
    }
}

/// Shared projection head with a learned temperature, kept positive through
/// the log parameterization.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub w2: Matrix,
    pub log_tau: f64,
}

impl ProjectionHead {
    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    /// Identity-initialized head.
    pub fn identity(dim: usize, tau: f64) -> Self {
        assert!(tau > 0.0);
        ProjectionHead { w2: Matrix::identity(dim), log_tau: tau.ln() }
    }
}

/// All Phase-I trainables.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub router: RouterParams,
    pub head: ProjectionHead,
}

impl EncoderParams {
    /// Seeded router, identity projection head.
    pub fn init(dim: usize, hidden: usize, tau: f64, rng: &mut RngState) -> Self {
        EncoderParams {
            router: RouterParams::seeded(hidden, dim, rng),
            head: ProjectionHead::identity(dim, tau),
        }
    }

    pub fn dim(&self) -> usize {
        self.head.w2.rows()
    }
}

// ---------------------------------------------------------------------------
// Embedding types
// ---------------------------------------------------------------------------

/// Raw per-slot projections and their unit-norm versions.
#[derive(Debug, Clone)]
pub struct SlotEmbeddings {
    /// K x D raw projections `W2 phi_k`.
    pub y_raw: Matrix,
    /// K x D unit rows.
    pub z: Matrix,
    /// Norm of each raw row.
    pub norms: Vec<f64>,
}

/// Router-weighted aggregate before and after normalization.
#[derive(Debug, Clone)]
pub struct HolisticEmbedding {
    pub u: Vec<f64>,
    pub e: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Prototype {
    pub class_id: usize,
    pub direction: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Decorrelation configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecorrelationKind {
    None,
    CrossCorrelation,
    VicregVariance,
    Spectral,
}

/// Decorrelation penalty settings. `lambda_d` multiplies every branch so
/// sweeps share one knob; `lambda_d = 1` recovers the plain hinge/whitening
/// forms for the vicreg and spectral branches.
#[derive(Debug, Clone)]
pub struct DecorrelationConfig {
    pub kind: DecorrelationKind,
    pub lambda_d: f64,
    pub gamma_hinge: f64,
    pub std_floor: f64,
}

impl DecorrelationConfig {
    pub fn none() -> Self {
        DecorrelationConfig {
            kind: DecorrelationKind::None,
            lambda_d: 0.0,
            gamma_hinge: 1.0,
            std_floor: 1e-6,
        }
    }

    pub fn cross_correlation(lambda_d: f64) -> Self {
        DecorrelationConfig {
            kind: DecorrelationKind::CrossCorrelation,
            lambda_d,
            gamma_hinge: 1.0,
            std_floor: 1e-6,
        }
    }
}

// ---------------------------------------------------------------------------
// Forward operations
// ---------------------------------------------------------------------------

/// Simplex importance weights: `omega_k = softmax_k(v . relu(W1 phi_k))`.
pub fn route(router: &RouterParams, phi: &SlotAggregates) -> Vec<f64> {
    let pre = phi.phi.matmul(&router.w1.transpose()); // K x h
    let logits: Vec<f64> = (0..pre.rows())
        .map(|k| pre.row(k).iter().zip(&router.v).map(|(&a, &vi)| a.max(0.0) * vi).sum())
        .collect();
    softmax(&logits)
}

/// Per-slot projection `y_k = W2 phi_k` with unit-norm rows `z_k`.
pub fn project_slots(head: &ProjectionHead, phi: &SlotAggregates) -> Result<SlotEmbeddings> {
    let y_raw = phi.phi.matmul(&head.w2.transpose());
    let k = y_raw.rows();
    let mut z = Matrix::zeros(k, y_raw.cols());
    let mut norms = vec![0.0; k];
    for i in 0..k {
        let n = norm(y_raw.row(i));
        if n <= NORM_EPS {
            return Err(CoreError::DegenerateVector { index: i, norm: n, eps: NORM_EPS });
        }
        norms[i] = n;
        let inv = 1.0 / n;
        for (zj, &yj) in z.row_mut(i).iter_mut().zip(y_raw.row(i)) {
            *zj = yj * inv;
        }
    }
    Ok(SlotEmbeddings { y_raw, z, norms })
}

/// Holistic embedding: `u = W2 sum_k omega_k phi_k`, `e = u / |u|`. By
/// linearity this equals the omega-weighted aggregate of the per-slot
/// projections.
pub fn holistic_embed(
    head: &ProjectionHead,
    omega: &[f64],
    phi: &SlotAggregates,
) -> Result<HolisticEmbedding> {
    if omega.len() != phi.num_slots() {
        return Err(CoreError::ShapeMismatch(format!(
            "holistic_embed: {} weights vs {} slots",
            omega.len(),
            phi.num_slots()
        )));
    }
    let weighted = phi.phi.matvec_t(omega); // sum_k omega_k phi_k
    let u = head.w2.matvec(&weighted);
    let e = l2_normalize(&u, NORM_EPS)?;
    Ok(HolisticEmbedding { u, e })
}

/// Everything the gradient pass needs from one image's forward.
#[derive(Debug, Clone)]
pub struct ImageForward {
    pub omega: Vec<f64>,
    /// K x h router pre-activations (for the relu mask).
    pub pre_act: Matrix,
    pub embeddings: SlotEmbeddings,
    pub holistic: HolisticEmbedding,
}

/// Full single-image forward: router weights, slot projections, holistic
/// embedding.
pub fn encode_image(params: &EncoderParams, phi: &SlotAggregates) -> Result<ImageForward> {
    if phi.any_degenerate() {
        let idx = phi.degenerate.iter().position(|&d| d).unwrap();
        return Err(CoreError::DegenerateVector { index: idx, norm: 0.0, eps: NORM_EPS });
    }
    let pre_act = phi.phi.matmul(&params.router.w1.transpose());
    let logits: Vec<f64> = (0..pre_act.rows())
        .map(|k| pre_act.row(k).iter().zip(&params.router.v).map(|(&a, &v)| a.max(0.0) * v).sum())
        .collect();
    let omega = softmax(&logits);
    let embeddings = project_slots(&params.head, phi)?;
    let u = embeddings.y_raw.matvec_t(&omega);
    let e = l2_normalize(&u, NORM_EPS)?;
    Ok(ImageForward { omega, pre_act, embeddings, holistic: HolisticEmbedding { u, e } })
}

/// Normalized per-class means of holistic embeddings, ascending by class id.
pub fn compute_prototypes(embeddings: &[(Vec<f64>, usize)]) -> Result<Vec<Prototype>> {
    if embeddings.is_empty() {
        return Err(CoreError::EmptyInput("compute_prototypes: no embeddings".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<&Vec<f64>>> = BTreeMap::new();
    for (e, c) in embeddings {
        by_class.entry(*c).or_default().push(e);
    }
    let mut out = Vec::with_capacity(by_class.len());
    for (class_id, members) in by_class {
        let d = members[0].len();
        let mut mean = vec![0.0; d];
        for m in &members {
            for (acc, &x) in mean.iter_mut().zip(m.iter()) {
                *acc += x / members.len() as f64;
            }
        }
        let direction = l2_normalize(&mean, NORM_EPS).map_err(|_| {
            CoreError::DegenerateVector { index: class_id, norm: norm(&mean), eps: NORM_EPS }
        })?;
        out.push(Prototype { class_id, direction });
    }
    Ok(out)
}

/// Prototype cross-entropy: mean over queries of the negative log softmax of
/// `tau * <e_q, P_c>` at the true class. Also returns the Q x C class
/// probability matrix (columns follow the prototype order).
pub fn ce_loss(
    queries: &[Vec<f64>],
    labels: &[usize],
    prototypes: &[Prototype],
    tau: f64,
) -> Result<(f64, Matrix)> {
    if queries.is_empty() {
        return Err(CoreError::EmptyInput("ce_loss: no queries".into()));
    }
    if queries.len() != labels.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "ce_loss: {} queries vs {} labels",
            queries.len(),
            labels.len()
        )));
    }
    let positions: Vec<usize> = labels
        .iter()
        .map(|&c| {
            prototypes
                .iter()
                .position(|p| p.class_id == c)
                .ok_or(CoreError::MissingClass(c))
        })
        .collect::<Result<_>>()?;
    let mut probs = Matrix::zeros(queries.len(), prototypes.len());
    let mut loss = 0.0;
    for (q, e) in queries.iter().enumerate() {
        let logits: Vec<f64> =
            prototypes.iter().map(|p| tau * dot(e, &p.direction)).collect();
        let p = softmax(&logits);
        loss -= p[positions[q]].max(f64::MIN_POSITIVE).ln();
        probs.row_mut(q).copy_from_slice(&p);
    }
    Ok((loss / queries.len() as f64, probs))
}

// ---------------------------------------------------------------------------
// Decorrelation penalties
// ---------------------------------------------------------------------------

/// Per-dimension mean and population standard deviation of the rows of `y`.
fn column_stats(y: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (y.rows(), y.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(y.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut var = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            let c = y.get(i, j) - mean[j];
            var[j] += c * c / n as f64;
        }
    }
    let std = var.iter().map(|v| v.sqrt()).collect();
    (mean, std)
}

/// Correlation matrix of the rows of `y` after per-dimension standardization
/// (mean 0, std clamped below by `std_floor`). With the floor inactive the
/// diagonal is exactly 1 and entries lie in [-1, 1].
pub fn correlation_matrix(y: &Matrix, std_floor: f64) -> Result<Matrix> {
    let n = y.rows();
    if n < 2 {
        return Err(CoreError::Invalid(format!(
            "correlation_matrix needs at least 2 rows, got {n}"
        )));
    }
    let d = y.cols();
    let (mean, std) = column_stats(y);
    let denom: Vec<f64> = std.iter().map(|&s| s.max(std_floor)).collect();
    let mut c = Matrix::zeros(d, d);
    for r in 0..n {
        let row = y.row(r);
        let standardized: Vec<f64> =
            (0..d).map(|j| (row[j] - mean[j]) / denom[j]).collect();
        for i in 0..d {
            let si = standardized[i] / n as f64;
            if si == 0.0 {
                continue;
            }
            let crow = c.row_mut(i);
            for (cij, &sj) in crow.iter_mut().zip(&standardized) {
                *cij += si * sj;
            }
        }
    }
    Ok(c)
}

/// Mean off-diagonal correlation magnitude.
pub fn off_diag_mean(c: &Matrix) -> f64 {
    let d = c.rows();
    assert!(d >= 2, "off_diag_mean needs D >= 2");
    let mut acc = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                acc += c.get(i, j).abs();
            }
        }
    }
    acc / (d * (d - 1)) as f64
}

/// Uncentered second-moment matrix `(1/n) Y^T Y`.
pub fn second_moment(y: &Matrix) -> Matrix {
    let (n, d) = (y.rows(), y.cols());
    let mut s = Matrix::zeros(d, d);
    for r in 0..n {
        s.add_scaled_outer(y.row(r), y.row(r), 1.0 / n as f64);
    }
    s
}

/// Decorrelation penalty on a batch of raw projections (rows are slots
/// pooled across the episode's images). All branches carry the `lambda_d`
/// weight:
/// - cross-correlation: sum of squared off-diagonal correlations,
/// - vicreg variance hinge: `sum_d max(0, gamma - std_d)`,
/// - spectral: `|second_moment(y) - I|_F^2`.
pub fn decorrelation_loss(config: &DecorrelationConfig, y: &Matrix) -> Result<f64> {
    match config.kind {
        DecorrelationKind::None => Ok(0.0),
        DecorrelationKind::CrossCorrelation => {
            let c = correlation_matrix(y, config.std_floor)?;
            let mut acc = 0.0;
            for i in 0..c.rows() {
                for j in 0..c.cols() {
                    if i != j {
                        acc += c.get(i, j) * c.get(i, j);
                    }
                }
            }
            Ok(config.lambda_d * acc)
        }
        DecorrelationKind::VicregVariance => {
            let (_, std) = column_stats(y);
            let acc: f64 = std.iter().map(|&s| (config.gamma_hinge - s).max(0.0)).sum();
            Ok(config.lambda_d * acc)
        }
        DecorrelationKind::Spectral => {
            let mut s = second_moment(y);
            s.add_scaled(&Matrix::identity(y.cols()), -1.0);
            let f = s.frobenius_norm();
            Ok(config.lambda_d * f * f)
        }
    }
}

/// Gradient of [`decorrelation_loss`] with respect to every entry of `y`
/// (lambda included). Exposed for the gradient pass and for the dynamics
/// analyses in [`crate::gradlab`].
pub fn decorrelation_gradient(config: &DecorrelationConfig, y: &Matrix) -> Result<Matrix> {
    let (n, d) = (y.rows(), y.cols());
    match config.kind {
        DecorrelationKind::None => Ok(Matrix::zeros(n, d)),
        DecorrelationKind::CrossCorrelation => {
            let (mean, std) = column_stats(y);
            let denom: Vec<f64> = std.iter().map(|&s| s.max(config.std_floor)).collect();
            let mut standardized = Matrix::zeros(n, d);
            for i in 0..n {
                for j in 0..d {
                    standardized.set(i, j, (y.get(i, j) - mean[j]) / denom[j]);
                }
            }
            let c = correlation_matrix(y, config.std_floor)?;
            // dL/dC has the diagonal zeroed.
            let mut c_grad = c.clone();
            c_grad.scale(2.0 * config.lambda_d);
            for i in 0..d {
                c_grad.set(i, i, 0.0);
            }
            // dL/d standardized = (2/n) * standardized * c_grad (c_grad symmetric)
            let mut g_std = standardized.matmul(&c_grad);
            g_std.scale(2.0 / n as f64);
            // Chain through standardization per dimension.
            let mut out = Matrix::zeros(n, d);
            for j in 0..d {
                let mut g_mean = 0.0;
                let mut gx_mean = 0.0;
                for i in 0..n {
                    g_mean += g_std.get(i, j) / n as f64;
                    gx_mean += g_std.get(i, j) * standardized.get(i, j) / n as f64;
                }
                let floored = std[j] <= config.std_floor;
                for i in 0..n {
                    let g = g_std.get(i, j);
                    let val = if floored {
                        // Clamp active: the scale is a constant, only the
                        // mean subtraction back-propagates.
                        (g - g_mean) / denom[j]
                    } else {
                        (g - g_mean - standardized.get(i, j) * gx_mean) / denom[j]
                    };
                    out.set(i, j, val);
                }
            }
            Ok(out)
        }
        DecorrelationKind::VicregVariance => {
            let (mean, std) = column_stats(y);
            let mut out = Matrix::zeros(n, d);
            for j in 0..d {
                if std[j] >= config.gamma_hinge || std[j] < 1e-12 {
                    continue; // hinge inactive, or gradient vanishes with the cluster
                }
                let scale = -config.lambda_d / (n as f64 * std[j]);
                for i in 0..n {
                    out.set(i, j, scale * (y.get(i, j) - mean[j]));
                }
            }
            Ok(out)
        }
        DecorrelationKind::Spectral => {
            let mut s = second_moment(y);
            s.add_scaled(&Matrix::identity(d), -1.0);
            // dL/dY = (4 lambda / n) * Y * (S - I)
            let mut out = y.matmul(&s);
            out.scale(4.0 * config.lambda_d / n as f64);
            Ok(out)
        }
    }
}

// ---------------------------------------------------------------------------
// Loss configuration and episode-level forward
// ---------------------------------------------------------------------------

/// Whether gradients flow through prototypes into the support embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrototypeGradMode {
    FlowThrough,
    StopGradient,
}

/// Training-time matching term: cross-entropy over classes with logits
/// `tau * s_ch(q, c)`, where `s_ch` is the bidirectional Chamfer similarity
/// between the query's top-kappa centered slots and each class's support
/// pool. `mix` blends it with the holistic term:
/// `total = (1 - mix) * ce_holistic + mix * ce_matching + decorrelation`.
#[derive(Debug, Clone)]
pub struct CtConfig {
    pub kappa: usize,
    pub mix: f64,
}

impl Default for CtConfig {
    fn default() -> Self {
        CtConfig { kappa: 4, mix: 0.5 }
    }
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    pub decorrelation: DecorrelationConfig,
    pub ct: Option<CtConfig>,
    pub prototype_grad: PrototypeGradMode,
}

impl LossConfig {
    pub fn holistic(decorrelation: DecorrelationConfig) -> Self {
        LossConfig { decorrelation, ct: None, prototype_grad: PrototypeGradMode::FlowThrough }
    }

    pub fn with_ct(decorrelation: DecorrelationConfig, ct: CtConfig) -> Self {
        LossConfig { decorrelation, ct: Some(ct), prototype_grad: PrototypeGradMode::FlowThrough }
    }

    fn ce_weight(&self) -> f64 {
        match &self.ct {
            Some(ct) => 1.0 - ct.mix,
            None => 1.0,
        }
    }
}

/// Loss components of one episode. `total` is what training minimizes.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub ce: f64,
    pub decorrelation: f64,
    pub ct: Option<f64>,
    pub total: f64,
}

pub(crate) struct EpisodeForward {
    pub supports: Vec<ImageForward>,
    pub queries: Vec<ImageForward>,
    /// Ascending support class ids; prototype order follows this.
    pub class_ids: Vec<usize>,
    /// Norms of the per-class support-embedding means (before normalization).
    pub proto_norms: Vec<f64>,
    pub prototypes: Vec<Vec<f64>>,
    /// Query label positions within `class_ids`.
    pub query_labels: Vec<usize>,
    /// Q x C logits and class probabilities of the holistic CE.
    pub logits: Matrix,
    pub probs: Matrix,
    pub ce: f64,
    /// All raw slot projections, supports first, image-major.
    pub y_stack: Matrix,
}

pub(crate) fn episode_forward(
    params: &EncoderParams,
    episode: &EpisodeBatch,
) -> Result<EpisodeForward> {
    episode.validate()?;
    if episode.query.is_empty() {
        return Err(CoreError::EmptyInput("episode without query images".into()));
    }
    let supports: Vec<ImageForward> = episode
        .support
        .iter()
        .map(|img| encode_image(params, &img.aggregates))
        .collect::<Result<_>>()?;
    let queries: Vec<ImageForward> = episode
        .query
        .iter()
        .map(|img| encode_image(params, &img.aggregates))
        .collect::<Result<_>>()?;

    let class_ids = episode.support_classes();
    let d = params.dim();
    let mut proto_means = vec![vec![0.0; d]; class_ids.len()];
    let mut counts = vec![0usize; class_ids.len()];
    for (img, fw) in episode.support.iter().zip(&supports) {
        let c = class_ids.binary_search(&img.class_id).unwrap();
        for (m, &x) in proto_means[c].iter_mut().zip(&fw.holistic.e) {
            *m += x;
        }
        counts[c] += 1;
    }
    let mut proto_norms = vec![0.0; class_ids.len()];
    let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(class_ids.len());
    for (c, mean) in proto_means.iter_mut().enumerate() {
        for m in mean.iter_mut() {
            *m /= counts[c] as f64;
        }
        let n = norm(mean);
        if n <= NORM_EPS {
            return Err(CoreError::DegenerateVector {
                index: class_ids[c],
                norm: n,
                eps: NORM_EPS,
            });
        }
        proto_norms[c] = n;
        prototypes.push(mean.iter().map(|&x| x / n).collect());
    }

    let tau = params.head.tau();
    let query_labels: Vec<usize> = episode
        .query
        .iter()
        .map(|img| class_ids.binary_search(&img.class_id).unwrap())
        .collect();
    let mut logits = Matrix::zeros(queries.len(), class_ids.len());
    let mut probs = Matrix::zeros(queries.len(), class_ids.len());
    let mut ce = 0.0;
    for (q, fw) in queries.iter().enumerate() {
        let row: Vec<f64> =
            prototypes.iter().map(|p| tau * dot(&fw.holistic.e, p)).collect();
        let p = softmax(&row);
        ce -= p[query_labels[q]].max(f64::MIN_POSITIVE).ln();
        logits.row_mut(q).copy_from_slice(&row);
        probs.row_mut(q).copy_from_slice(&p);
    }
    ce /= queries.len() as f64;

    let k = episode.support[0].aggregates.num_slots();
    let total_slots = (supports.len() + queries.len()) * k;
    let mut y_stack = Matrix::zeros(total_slots, d);
    let mut row = 0;
    for fw in supports.iter().chain(&queries) {
        for s in 0..k {
            y_stack.row_mut(row).copy_from_slice(fw.embeddings.y_raw.row(s));
            row += 1;
        }
    }

    Ok(EpisodeForward {
        supports,
        queries,
        class_ids,
        proto_norms,
        prototypes,
        query_labels,
        logits,
        probs,
        ce,
        y_stack,
    })
}

// ---------------------------------------------------------------------------
// Training-time matching term
// ---------------------------------------------------------------------------

/// Per-image centering/selection state used by the matching term. Rows are
/// indexed by the original slot id; dropped rows have `w_norm = 0`.
pub(crate) struct CtImage {
    pub z_hat: Matrix,
    pub w_norms: Vec<f64>,
    pub selected: Vec<usize>,
}

pub(crate) struct CtForward {
    pub support_images: Vec<CtImage>,
    pub query_images: Vec<CtImage>,
    /// Per class: (support image index, slot id) entries of the pool.
    pub pools: Vec<Vec<(usize, usize)>>,
    pub scores: Matrix,
    pub probs: Matrix,
    pub ce: f64,
    /// fw_match[q][c][i] = pool entry matched by the i-th selected query slot.
    pub fw_match: Vec<Vec<Vec<usize>>>,
    /// bw_match[q][c][j] = selected-query-slot position matched by pool entry j.
    pub bw_match: Vec<Vec<Vec<usize>>>,
}

fn ct_image(fw: &ImageForward, kappa: usize) -> Result<CtImage> {
    let z = &fw.embeddings.z;
    let k = z.rows();
    let d = z.cols();
    let centered = center_slots(z)?;
    let mut z_hat = Matrix::zeros(k, d);
    let mut w_norms = vec![0.0; k];
    // Recover the pre-normalization norms: |z_k - mean|.
    let mut mean = vec![0.0; d];
    for i in 0..k {
        for (m, &v) in mean.iter_mut().zip(z.row(i)) {
            *m += v / k as f64;
        }
    }
    for (&slot, row) in centered
        .source_slot_ids
        .iter()
        .zip(centered.z_hat.data().chunks(d))
    {
        let w: Vec<f64> = z.row(slot).iter().zip(&mean).map(|(v, m)| v - m).collect();
        w_norms[slot] = norm(&w);
        z_hat.row_mut(slot).copy_from_slice(row);
    }
    let ranked = select_topk(&fw.omega, kappa);
    let selected: Vec<usize> =
        ranked.into_iter().filter(|&s| w_norms[s] > 0.0).collect();
    if selected.is_empty() {
        return Err(CoreError::EmptyAfterCentering);
    }
    Ok(CtImage { z_hat, w_norms, selected })
}

pub(crate) fn ct_forward(
    forward: &EpisodeForward,
    episode: &EpisodeBatch,
    tau: f64,
    kappa: usize,
) -> Result<CtForward> {
    let support_images: Vec<CtImage> =
        forward.supports.iter().map(|fw| ct_image(fw, kappa)).collect::<Result<_>>()?;
    let query_images: Vec<CtImage> =
        forward.queries.iter().map(|fw| ct_image(fw, kappa)).collect::<Result<_>>()?;

    let c_count = forward.class_ids.len();
    let mut pools: Vec<Vec<(usize, usize)>> = vec![Vec::new(); c_count];
    for (s_idx, img) in episode.support.iter().enumerate() {
        let c = forward.class_ids.binary_search(&img.class_id).unwrap();
        for &slot in &support_images[s_idx].selected {
            pools[c].push((s_idx, slot));
        }
    }
    for (c, pool) in pools.iter_enumerate_guard()? {
        if pool.is_empty() {
            return Err(CoreError::MissingClass(forward.class_ids[c]));
        }
    }

    let q_count = forward.queries.len();
    let mut scores = Matrix::zeros(q_count, c_count);
    let mut fw_match = vec![vec![Vec::new(); c_count]; q_count];
    let mut bw_match = vec![vec![Vec::new(); c_count]; q_count];
    for q in 0..q_count {
        let qi = &query_images[q];
        for c in 0..c_count {
            let pool = &pools[c];
            let mut fw_total = 0.0;
            let mut fw_idx = Vec::with_capacity(qi.selected.len());
            for &slot in &qi.selected {
                let zq = qi.z_hat.row(slot);
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                for (j, &(s_idx, s_slot)) in pool.iter().enumerate() {
                    let v = dot(zq, support_images[s_idx].z_hat.row(s_slot));
                    if v > best_v {
                        best_v = v;
                        best = j;
                    }
                }
                fw_total += best_v;
                fw_idx.push(best);
            }
            let mut bw_total = 0.0;
            let mut bw_idx = Vec::with_capacity(pool.len());
            for &(s_idx, s_slot) in pool {
                let zp = support_images[s_idx].z_hat.row(s_slot);
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                for (i, &slot) in qi.selected.iter().enumerate() {
                    let v = dot(zp, qi.z_hat.row(slot));
                    if v > best_v {
                        best_v = v;
                        best = i;
                    }
                }
                bw_total += best_v;
                bw_idx.push(best);
            }
            scores.set(
                q,
                c,
                fw_total / qi.selected.len() as f64 + bw_total / pool.len() as f64,
            );
            fw_match[q][c] = fw_idx;
            bw_match[q][c] = bw_idx;
        }
    }

    let mut probs = Matrix::zeros(q_count, c_count);
    let mut ce = 0.0;
    for q in 0..q_count {
        let logits: Vec<f64> = scores.row(q).iter().map(|&s| tau * s).collect();
        let p = softmax(&logits);
        ce -= p[forward.query_labels[q]].max(f64::MIN_POSITIVE).ln();
        probs.row_mut(q).copy_from_slice(&p);
    }
    ce /= q_count as f64;

    Ok(CtForward { support_images, query_images, pools, scores, probs, ce, fw_match, bw_match })
}

// Small helper so the pool-emptiness check above reads cleanly.
trait EnumerateGuard<T> {
    fn iter_enumerate_guard(&self) -> Result<std::iter::Enumerate<std::slice::Iter<'_, T>>>;
}

impl<T> EnumerateGuard<T> for Vec<T> {
    fn iter_enumerate_guard(&self) -> Result<std::iter::Enumerate<std::slice::Iter<'_, T>>> {
        Ok(self.iter().enumerate())
    }
}

/// Training-time matching loss on its own (diagnostic surface; training uses
/// it through [`LossConfig::with_ct`]).
pub fn ct_loss(
    episode: &EpisodeBatch,
    params: &EncoderParams,
    kappa: usize,
) -> Result<f64> {
    let forward = episode_forward(params, episode)?;
    let ct = ct_forward(&forward, episode, params.head.tau(), kappa)?;
    Ok(ct.ce)
}

/// Episode loss under `config`: holistic prototype CE, decorrelation on all
/// pooled raw projections, and optionally the matching term.
pub fn compute_loss(
    params: &EncoderParams,
    episode: &EpisodeBatch,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    let forward = episode_forward(params, episode)?;
    let decorr = decorrelation_loss(&config.decorrelation, &forward.y_stack)?;
    let (ct_term, total) = match &config.ct {
        Some(ct_cfg) => {
            let ct = ct_forward(&forward, episode, params.head.tau(), ct_cfg.kappa)?;
            (
                Some(ct.ce),
                config.ce_weight() * forward.ce + ct_cfg.mix * ct.ce + decorr,
            )
        }
        None => (None, forward.ce + decorr),
    };
    Ok(LossBreakdown { ce: forward.ce, decorrelation: decorr, ct: ct_term, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::EpisodeImage;

    fn aggregates_from_rows(rows: &[Vec<f64>]) -> SlotAggregates {
        let unit: Vec<Vec<f64>> =
            rows.iter().map(|r| l2_normalize(r, NORM_EPS).unwrap()).collect();
        let phi = Matrix::from_rows(&unit).unwrap();
        let degenerate = vec![false; phi.rows()];
        SlotAggregates { phi, degenerate }
    }

    fn random_aggregates(k: usize, d: usize, rng: &mut RngState) -> SlotAggregates {
        let rows: Vec<Vec<f64>> = (0..k).map(|_| rng.unit_vector(d)).collect();
        aggregates_from_rows(&rows)
    }

    #[test]
    fn route_single_slot_and_zero_router() {
        let mut rng = RngState::new(30);
        let phi = random_aggregates(1, 4, &mut rng);
        let router = RouterParams::seeded(3, 4, &mut rng);
        let w = route(&router, &phi);
        assert_eq!(w, vec![1.0]);

        let phi = random_aggregates(5, 4, &mut rng);
        let router = RouterParams { w1: Matrix::zeros(3, 4), v: vec![1.0, -2.0, 0.5] };
        let w = route(&router, &phi);
        for &x in &w {
            assert!((x - 0.2).abs() < 1e-12);
        }
        let total: f64 = w.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn route_duplicate_slots_get_equal_weights() {
        let mut rng = RngState::new(31);
        let row = rng.unit_vector(4);
        let phi = aggregates_from_rows(&[row.clone(), row, rng.unit_vector(4)]);
        let router = RouterParams::seeded(6, 4, &mut rng);
        let w = route(&router, &phi);
        assert!((w[0] - w[1]).abs() < 1e-14);
    }

    #[test]
    fn project_slots_identity_and_scaling() {
        let mut rng = RngState::new(32);
        let phi = random_aggregates(3, 4, &mut rng);
        let head = ProjectionHead::identity(4, 10.0);
        let emb = project_slots(&head, &phi).unwrap();
        for i in 0..3 {
            for (z, p) in emb.z.row(i).iter().zip(phi.phi.row(i)) {
                assert!((z - p).abs() < 1e-12);
            }
        }
        let mut scaled_head = ProjectionHead::identity(4, 10.0);
        scaled_head.w2.scale(2.0);
        let emb2 = project_slots(&scaled_head, &phi).unwrap();
        for (a, b) in emb.z.data().iter().zip(emb2.z.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn project_slots_orthogonal_head_rotates_rows() {
        let mut rng = RngState::new(33);
        let phi = random_aggregates(2, 5, &mut rng);
        let q = crate::tensor::random_orthogonal(5, &mut rng);
        let head = ProjectionHead { w2: q.clone(), log_tau: 0.0 };
        let emb = project_slots(&head, &phi).unwrap();
        for i in 0..2 {
            let expect = q.matvec(phi.phi.row(i));
            for (a, b) in emb.z.row(i).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn annihilating_head_reports_degenerate_slot() {
        let mut rng = RngState::new(29);
        let phi = random_aggregates(3, 4, &mut rng);
        let dead = ProjectionHead { w2: Matrix::zeros(4, 4), log_tau: 0.0 };
        match project_slots(&dead, &phi) {
            Err(CoreError::DegenerateVector { index, .. }) => assert_eq!(index, 0),
            other => panic!("expected a degenerate slot, got {other:?}"),
        }
        match holistic_embed(&dead, &[0.5, 0.3, 0.2], &phi) {
            Err(CoreError::DegenerateVector { .. }) => {}
            other => panic!("expected a degenerate aggregate, got {other:?}"),
        }
    }

    #[test]
    fn holistic_embed_reductions() {
        let mut rng = RngState::new(34);
        let phi = random_aggregates(3, 4, &mut rng);
        let head = ProjectionHead::identity(4, 10.0);
        // one-hot weights pick that slot's z
        let w = vec![0.0, 1.0, 0.0];
        let h = holistic_embed(&head, &w, &phi).unwrap();
        let emb = project_slots(&head, &phi).unwrap();
        for (a, b) in h.e.iter().zip(emb.z.row(1)) {
            assert!((a - b).abs() < 1e-12);
        }
        // identical slots: any simplex weights give the same embedding
        let row = rng.unit_vector(4);
        let same = aggregates_from_rows(&[row.clone(), row.clone(), row]);
        let h1 = holistic_embed(&head, &[0.2, 0.5, 0.3], &same).unwrap();
        let h2 = holistic_embed(&head, &[1.0, 0.0, 0.0], &same).unwrap();
        for (a, b) in h1.e.iter().zip(&h2.e) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prototypes_basic_and_degenerate() {
        let single = compute_prototypes(&[(vec![0.0, 1.0], 3)]).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].class_id, 3);
        assert!((single[0].direction[1] - 1.0).abs() < 1e-12);

        let ninety = compute_prototypes(&[(vec![1.0, 0.0], 0), (vec![0.0, 1.0], 0)]).unwrap();
        let r = 1.0 / 2.0f64.sqrt();
        assert!((ninety[0].direction[0] - r).abs() < 1e-12);
        assert!((ninety[0].direction[1] - r).abs() < 1e-12);

        let antipodal = compute_prototypes(&[(vec![1.0, 0.0], 0), (vec![-1.0, 0.0], 0)]);
        assert!(matches!(antipodal, Err(CoreError::DegenerateVector { .. })));
    }

    #[test]
    fn ce_loss_closed_forms() {
        let protos = vec![
            Prototype { class_id: 0, direction: vec![1.0, 0.0] },
            Prototype { class_id: 1, direction: vec![0.0, 1.0] },
        ];
        // query == true prototype, other orthogonal, tau = 1
        let (loss, _) = ce_loss(&[vec![1.0, 0.0]], &[0], &protos, 1.0).unwrap();
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((loss - expect).abs() < 1e-12);
        assert!((expect - 0.3133).abs() < 1e-4);

        // large tau with a correct margin drives the loss to zero
        let (loss, _) = ce_loss(&[vec![1.0, 0.0]], &[0], &protos, 200.0).unwrap();
        assert!(loss < 1e-12);

        // equidistant from C prototypes -> log C
        let protos3 = vec![
            Prototype { class_id: 0, direction: vec![1.0, 0.0, 0.0] },
            Prototype { class_id: 1, direction: vec![0.0, 1.0, 0.0] },
            Prototype { class_id: 2, direction: vec![0.0, 0.0, 1.0] },
        ];
        let q = l2_normalize(&[1.0, 1.0, 1.0], NORM_EPS).unwrap();
        let (loss, _) = ce_loss(&[q], &[1], &protos3, 7.0).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn correlation_matrix_extremes() {
        // perfectly correlated pair
        let y = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        let c = correlation_matrix(&y, 1e-6).unwrap();
        assert!((c.get(0, 1) - 1.0).abs() < 1e-12);
        assert!((c.get(0, 0) - 1.0).abs() < 1e-9);

        // balanced independent +-1 design
        let y = Matrix::from_rows(&[
            vec![1.0, 1.0],
            vec![1.0, -1.0],
            vec![-1.0, 1.0],
            vec![-1.0, -1.0],
        ])
        .unwrap();
        let c = correlation_matrix(&y, 1e-6).unwrap();
        assert!(c.get(0, 1).abs() < 1e-12);

        // anti-correlated
        let y = Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0], vec![2.0, -2.0]]).unwrap();
        let c = correlation_matrix(&y, 1e-6).unwrap();
        assert!((c.get(0, 1) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn decorrelation_loss_branches() {
        // identity correlation -> zero cross-correlation penalty
        let y = Matrix::from_rows(&[
            vec![1.0, 1.0],
            vec![1.0, -1.0],
            vec![-1.0, 1.0],
            vec![-1.0, -1.0],
        ])
        .unwrap();
        let cfg = DecorrelationConfig::cross_correlation(0.02);
        assert!(decorrelation_loss(&cfg, &y).unwrap().abs() < 1e-12);

        // duplicated dimension: off-diagonal entries are both 1
        let y = Matrix::from_rows(&[vec![1.0, 1.0], vec![-1.0, -1.0], vec![0.5, 0.5]]).unwrap();
        let loss = decorrelation_loss(&cfg, &y).unwrap();
        assert!((loss - 0.04).abs() < 1e-12);

        // spectral on d orthonormal unit rows: (d-1)^2/d
        let y = Matrix::identity(3);
        let spec = DecorrelationConfig {
            kind: DecorrelationKind::Spectral,
            lambda_d: 1.0,
            gamma_hinge: 1.0,
            std_floor: 1e-6,
        };
        let loss = decorrelation_loss(&spec, &y).unwrap();
        assert!((loss - 4.0 / 3.0).abs() < 1e-12);

        let none = DecorrelationConfig::none();
        assert_eq!(decorrelation_loss(&none, &y).unwrap(), 0.0);
    }

    #[test]
    fn off_diag_mean_extremes() {
        assert_eq!(off_diag_mean(&Matrix::identity(4)), 0.0);
        let ones = Matrix::from_fn(3, 3, |_, _| 1.0);
        assert!((off_diag_mean(&ones) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decorrelation_gradient_matches_finite_differences() {
        let mut rng = RngState::new(35);
        let n = 6;
        let d = 4;
        let y = rng.gaussian_matrix(n, d);
        for kind in [
            DecorrelationKind::CrossCorrelation,
            DecorrelationKind::VicregVariance,
            DecorrelationKind::Spectral,
        ] {
            let cfg = DecorrelationConfig {
                kind,
                lambda_d: 0.7,
                gamma_hinge: 2.0, // large enough that the hinge is active
                std_floor: 1e-6,
            };
            let analytic = decorrelation_gradient(&cfg, &y).unwrap();
            let flat: Vec<f64> = y.data().to_vec();
            let fd = crate::tensor::finite_diff_gradient(
                |x| {
                    let m = Matrix::from_rows(
                        &x.chunks(d).map(|c| c.to_vec()).collect::<Vec<_>>(),
                    )
                    .unwrap();
                    decorrelation_loss(&cfg, &m).unwrap()
                },
                &flat,
                1e-6,
            )
            .unwrap();
            for (a, b) in analytic.data().iter().zip(&fd) {
                assert!((a - b).abs() < 1e-6, "{kind:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn cross_correlation_gradient_columns_sum_to_zero() {
        let mut rng = RngState::new(36);
        let y = rng.gaussian_matrix(8, 5);
        let cfg = DecorrelationConfig::cross_correlation(0.02);
        let g = decorrelation_gradient(&cfg, &y).unwrap();
        for j in 0..5 {
            let s: f64 = (0..8).map(|i| g.get(i, j)).sum();
            assert!(s.abs() < 1e-12, "column {j} sums to {s}");
        }
    }

    #[test]
    fn vicreg_descent_moves_away_from_dimension_mean() {
        // Tight cluster: every std is below the hinge threshold.
        let mut rng = RngState::new(37);
        let y = Matrix::from_fn(6, 3, |_, _| 0.05 * rng.next_gaussian());
        let cfg = DecorrelationConfig {
            kind: DecorrelationKind::VicregVariance,
            lambda_d: 1.0,
            gamma_hinge: 1.0,
            std_floor: 1e-6,
        };
        let g = decorrelation_gradient(&cfg, &y).unwrap();
        let (mean, _) = column_stats(&y);
        for i in 0..6 {
            for j in 0..3 {
                let offset = y.get(i, j) - mean[j];
                if offset.abs() < 1e-9 {
                    continue;
                }
                // descent step = -g; moving away from the mean means the
                // step has the same sign as the offset
                assert!((-g.get(i, j)) * offset > 0.0);
            }
        }
    }

    fn tiny_episode(rng: &mut RngState) -> EpisodeBatch {
        let mk = |rng: &mut RngState, class_id| EpisodeImage {
            aggregates: random_aggregates(3, 6, rng),
            class_id,
        };
        EpisodeBatch {
            support: vec![mk(rng, 0), mk(rng, 0), mk(rng, 1), mk(rng, 1)],
            query: vec![mk(rng, 0), mk(rng, 1)],
            way: 2,
            shot: 2,
            queries_per_class: 1,
        }
    }

    #[test]
    fn compute_loss_additivity_with_lambda_zero() {
        let mut rng = RngState::new(38);
        let episode = tiny_episode(&mut rng);
        let params = EncoderParams::init(6, 4, 10.0, &mut rng);
        let none = LossConfig::holistic(DecorrelationConfig::none());
        let zero_lambda = LossConfig::holistic(DecorrelationConfig::cross_correlation(0.0));
        let a = compute_loss(&params, &episode, &none).unwrap();
        let b = compute_loss(&params, &episode, &zero_lambda).unwrap();
        assert!((a.total - b.total).abs() < 1e-15);
        assert_eq!(a.ce, b.ce);
    }

    #[test]
    fn ct_loss_dominance_and_uniform_cases() {
        // Orthogonal class geometries: the query reuses class 0's aggregates,
        // so class 0's matching logit dominates.
        let e = Matrix::identity(8);
        let class0 = aggregates_from_rows(&[e.row(0).to_vec(), e.row(1).to_vec(), e.row(2).to_vec()]);
        let class1 = aggregates_from_rows(&[e.row(4).to_vec(), e.row(5).to_vec(), e.row(6).to_vec()]);
        let episode = EpisodeBatch {
            support: vec![
                EpisodeImage { aggregates: class0.clone(), class_id: 0 },
                EpisodeImage { aggregates: class1.clone(), class_id: 1 },
            ],
            query: vec![EpisodeImage { aggregates: class0.clone(), class_id: 0 }],
            way: 2,
            shot: 1,
            queries_per_class: 1,
        };
        let mut rng = RngState::new(39);
        let params = EncoderParams::init(8, 4, 10.0, &mut rng);
        let loss = ct_loss(&episode, &params, 2).unwrap();
        assert!(loss < 2.0f64.ln(), "dominant class should beat chance: {loss}");

        // identical supports for both classes -> logits equal -> log C
        let episode = EpisodeBatch {
            support: vec![
                EpisodeImage { aggregates: class0.clone(), class_id: 0 },
                EpisodeImage { aggregates: class0.clone(), class_id: 1 },
            ],
            query: vec![EpisodeImage { aggregates: class0, class_id: 0 }],
            way: 2,
            shot: 1,
            queries_per_class: 1,
        };
        let loss = ct_loss(&episode, &params, 2).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }
}
