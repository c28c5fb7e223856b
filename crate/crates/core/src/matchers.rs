//! Gradient-free compositional inference: per-image slot centering, the
//! cosine cost matrix, the row-stochastic coupling family (hard/soft
//! Chamfer, mutual nearest neighbour, entropic transport, Hungarian),
//! bidirectional Chamfer scoring, and the blended episode classifier.
//!
//! All argmax ties break deterministically toward the lowest index.

use crate::encoder::{self, EncoderParams};
use crate::episode::EpisodeBatch;
use crate::error::{CoreError, Result};
use crate::tensor::{dot, l2_normalize, softmax, Matrix, NORM_EPS};

/// Centered unit-norm slot embeddings of one image. Rows that coincided with
/// the per-image mean are dropped; `source_slot_ids` maps surviving rows back
/// to their original slot indices.
#[derive(Debug, Clone)]
pub struct CenteredSlots {
    pub z_hat: Matrix,
    pub source_slot_ids: Vec<usize>,
}

impl CenteredSlots {
    pub fn len(&self) -> usize {
        self.z_hat.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z_hat.rows() == 0
    }

    /// Restricts to the rows whose source slot ids appear in `keep`,
    /// preserving the order of `keep`.
    pub fn select(&self, keep: &[usize]) -> CenteredSlots {
        let mut rows = Vec::new();
        let mut ids = Vec::new();
        for &slot in keep {
            if let Some(pos) = self.source_slot_ids.iter().position(|&s| s == slot) {
                rows.push(self.z_hat.row(pos).to_vec());
                ids.push(slot);
            }
        }
        let z_hat = if rows.is_empty() {
            Matrix::zeros(0, self.z_hat.cols())
        } else {
            Matrix::from_rows(&rows).expect("rows share the embedding dim")
        };
        CenteredSlots { z_hat, source_slot_ids: ids }
    }
}

/// Row-stochastic coupling realizing one matcher from the assignment family.
#[derive(Debug, Clone)]
pub struct Coupling {
    pub t: Matrix,
    pub kind: CouplingTag,
}

/// Which rule produced a coupling, with solver diagnostics where relevant.
#[derive(Debug, Clone, PartialEq)]
pub enum CouplingTag {
    HardChamfer,
    SoftChamfer { beta: f64 },
    MutualNearest,
    Sinkhorn { epsilon: f64, iterations: usize, residual: f64, converged: bool },
    Hungarian,
}

/// Matcher selection for coupling construction.
#[derive(Debug, Clone, PartialEq)]
pub enum CouplingKind {
    HardChamfer,
    SoftChamfer { beta: f64 },
    MutualNearest,
    Sinkhorn { epsilon: f64, max_iters: usize, tol: f64 },
    Hungarian,
}

impl CouplingKind {
    pub fn sinkhorn(epsilon: f64) -> Self {
        CouplingKind::Sinkhorn { epsilon, max_iters: 1000, tol: 1e-9 }
    }
}

/// Full Phase-II matcher configuration: coupling rule, how many slots each
/// side contributes (`kappa`, ranked by router weight), and the blend weight
/// between holistic and Chamfer scores.
#[derive(Debug, Clone)]
pub struct MatcherConfig {
    pub kind: CouplingKind,
    pub kappa: usize,
    pub gamma_blend: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig { kind: CouplingKind::HardChamfer, kappa: 4, gamma_blend: 0.3 }
    }
}

/// Subtracts the per-image slot mean from each unit embedding and
/// re-normalizes. A row equal to the mean carries no relative structure and
/// is dropped (recorded by id); if every row collapses the image is unusable.
pub fn center_slots(z: &Matrix) -> Result<CenteredSlots> {
    if z.rows() < 2 {
        return Err(CoreError::Invalid(format!(
            "center_slots needs at least 2 slots, got {}",
            z.rows()
        )));
    }
    let k = z.rows();
    let d = z.cols();
    let mut mean = vec![0.0; d];
    for i in 0..k {
        for (m, &v) in mean.iter_mut().zip(z.row(i)) {
            *m += v / k as f64;
        }
    }
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    for i in 0..k {
        let centered: Vec<f64> = z.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect();
        match l2_normalize(&centered, NORM_EPS) {
            Ok(unit) => {
                rows.push(unit);
                ids.push(i);
            }
            Err(CoreError::DegenerateVector { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    if rows.is_empty() {
        return Err(CoreError::EmptyAfterCentering);
    }
    Ok(CenteredSlots { z_hat: Matrix::from_rows(&rows)?, source_slot_ids: ids })
}

/// Pairwise cosines between two unit-row sets: `S = A B^T`.
pub fn cost_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(CoreError::ShapeMismatch(format!(
            "cost_matrix: {}-dim rows vs {}-dim rows",
            a.cols(),
            b.cols()
        )));
    }
    Ok(Matrix::from_fn(a.rows(), b.rows(), |i, j| dot(a.row(i), b.row(j))))
}

fn row_argmax(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Builds the coupling realized by `kind` on the similarity matrix `S`
/// (rows: query slots, columns: support slots). Every result is
/// row-stochastic.
pub fn make_coupling(kind: &CouplingKind, s: &Matrix) -> Result<Coupling> {
    if !s.is_finite() {
        return Err(CoreError::NonFinite { context: "make_coupling cost matrix".into() });
    }
    if s.rows() == 0 || s.cols() == 0 {
        return Err(CoreError::EmptyInput("make_coupling: empty cost matrix".into()));
    }
    match kind {
        CouplingKind::HardChamfer => {
            let mut t = Matrix::zeros(s.rows(), s.cols());
            for i in 0..s.rows() {
                t.set(i, row_argmax(s.row(i)), 1.0);
            }
            Ok(Coupling { t, kind: CouplingTag::HardChamfer })
        }
        CouplingKind::SoftChamfer { beta } => {
            let mut t = Matrix::zeros(s.rows(), s.cols());
            for i in 0..s.rows() {
                let logits: Vec<f64> = s.row(i).iter().map(|&v| beta * v).collect();
                t.row_mut(i).copy_from_slice(&softmax(&logits));
            }
            Ok(Coupling { t, kind: CouplingTag::SoftChamfer { beta: *beta } })
        }
        CouplingKind::MutualNearest => {
            // Column argmaxes (nearest query per support slot).
            let mut col_best = vec![0usize; s.cols()];
            for (j, best) in col_best.iter_mut().enumerate() {
                for i in 1..s.rows() {
                    if s.get(i, j) > s.get(*best, j) {
                        *best = i;
                    }
                }
            }
            let mut t = Matrix::zeros(s.rows(), s.cols());
            for i in 0..s.rows() {
                let j = row_argmax(s.row(i));
                // Mutual pair keeps the indicator; otherwise the row falls
                // back to the hard rule, which lands on the same column.
                let _mutual = col_best[j] == i;
                t.set(i, j, 1.0);
            }
            Ok(Coupling { t, kind: CouplingTag::MutualNearest })
        }
        CouplingKind::Sinkhorn { epsilon, max_iters, tol } => {
            sinkhorn_coupling(s, *epsilon, *max_iters, *tol)
        }
        CouplingKind::Hungarian => {
            if s.rows() != s.cols() {
                return Err(CoreError::NonSquareCost { rows: s.rows(), cols: s.cols() });
            }
            let assignment = hungarian_max(s);
            let mut t = Matrix::zeros(s.rows(), s.cols());
            for (i, &j) in assignment.iter().enumerate() {
                t.set(i, j, 1.0);
            }
            Ok(Coupling { t, kind: CouplingTag::Hungarian })
        }
    }
}

/// Log-domain Sinkhorn scaling of `exp(S / epsilon)` to row sums 1 and
/// uniform column sums (`rows/cols` each, so the total mass matches; for a
/// square matrix both marginals are all-ones). Stops when the worst marginal
/// violation drops below `tol`. Non-convergence is reported in the tag, not
/// fatal.
fn sinkhorn_coupling(s: &Matrix, epsilon: f64, max_iters: usize, tol: f64) -> Result<Coupling> {
    if epsilon <= 0.0 {
        return Err(CoreError::Invalid("sinkhorn epsilon must be positive".into()));
    }
    let (nr, nc) = (s.rows(), s.cols());
    let col_target = nr as f64 / nc as f64;
    let log_col_target = col_target.ln();
    // Potentials f (rows), g (cols); T_ij = exp((S_ij + f_i + g_j) / eps).
    let mut f = vec![0.0; nr];
    let mut g = vec![0.0; nc];
    let lse = |items: &mut dyn Iterator<Item = f64>| -> f64 {
        let vals: Vec<f64> = items.collect();
        let max = vals.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        max + vals.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
    };
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    for it in 0..max_iters {
        iterations = it + 1;
        for i in 0..nr {
            let row = s.row(i);
            let l = lse(&mut (0..nc).map(|j| (row[j] + g[j]) / epsilon));
            f[i] = -epsilon * l;
        }
        for j in 0..nc {
            let l = lse(&mut (0..nr).map(|i| (s.get(i, j) + f[i]) / epsilon));
            g[j] = epsilon * (log_col_target - l);
        }
        // Row constraint is exact right after the f update; after the g
        // update only rows can drift, so the residual is the row violation.
        residual = 0.0;
        for i in 0..nr {
            let sum: f64 = (0..nc).map(|j| ((s.get(i, j) + f[i] + g[j]) / epsilon).exp()).sum();
            residual = residual.max((sum - 1.0).abs());
        }
        if residual <= tol {
            break;
        }
    }
    let mut t = Matrix::from_fn(nr, nc, |i, j| ((s.get(i, j) + f[i] + g[j]) / epsilon).exp());
    // Exact row normalization so the row-stochastic contract holds even at
    // the residual tolerance.
    for i in 0..nr {
        let sum: f64 = t.row(i).iter().sum();
        for v in t.row_mut(i) {
            *v /= sum;
        }
    }
    let converged = residual <= tol;
    Ok(Coupling {
        t,
        kind: CouplingTag::Sinkhorn { epsilon, iterations, residual, converged },
    })
}

/// Exact maximum-similarity assignment via the shortest-augmenting-path
/// method on the negated costs, O(K^3). Returns `assign[row] = column`.
fn hungarian_max(s: &Matrix) -> Vec<usize> {
    let n = s.rows();
    // Minimization formulation over cost = -S, with 1-based dummy row/col.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = -s.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Coupling-weighted mean similarity: `(1/K_q) sum_{k,k'} T_{kk'} S_{kk'}`.
pub fn assignment_score(coupling: &Coupling, s: &Matrix) -> Result<f64> {
    let t = &coupling.t;
    if t.rows() != s.rows() || t.cols() != s.cols() {
        return Err(CoreError::ShapeMismatch(format!(
            "assignment_score: coupling {}x{} vs cost {}x{}",
            t.rows(),
            t.cols(),
            s.rows(),
            s.cols()
        )));
    }
    let mut total = 0.0;
    for i in 0..t.rows() {
        total += dot(t.row(i), s.row(i));
    }
    Ok(total / t.rows() as f64)
}

/// Indices of the `kappa` largest weights, descending by weight, ties toward
/// the lower index. `kappa > len` takes everything.
pub fn select_topk(weights: &[f64], kappa: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| {
        weights[b].partial_cmp(&weights[a]).unwrap().then_with(|| a.cmp(&b))
    });
    idx.truncate(kappa.min(weights.len()));
    idx
}

/// Directed mean-of-max cosine from every row of `from` into the set `to`.
pub fn directed_chamfer(from: &Matrix, to: &Matrix) -> Result<f64> {
    if from.rows() == 0 || to.rows() == 0 {
        return Err(CoreError::EmptyInput("directed_chamfer: empty slot set".into()));
    }
    let mut acc = 0.0;
    for i in 0..from.rows() {
        let mut best = f64::NEG_INFINITY;
        for j in 0..to.rows() {
            best = best.max(dot(from.row(i), to.row(j)));
        }
        acc += best;
    }
    Ok(acc / from.rows() as f64)
}

/// Bidirectional Chamfer similarity between a query slot set and a support
/// pool: forward mean-of-max plus backward mean-of-max. Range [-2, 2];
/// symmetric in its two arguments.
pub fn chamfer_score(query: &CenteredSlots, pool: &CenteredSlots) -> Result<f64> {
    Ok(directed_chamfer(&query.z_hat, &pool.z_hat)?
        + directed_chamfer(&pool.z_hat, &query.z_hat)?)
}

/// Bidirectional part-level score through a coupling rule: the forward and
/// backward directions each build their own row-stochastic coupling and take
/// the coupling-weighted mean similarity. With the hard rule both directions
/// reduce to mean-of-max, recovering [`chamfer_score`] exactly (the two
/// implementations are kept separate as a cross-check).
pub fn coupling_pair_score(
    kind: &CouplingKind,
    query: &CenteredSlots,
    pool: &CenteredSlots,
) -> Result<f64> {
    let s = cost_matrix(&query.z_hat, &pool.z_hat)?;
    let forward = assignment_score(&make_coupling(kind, &s)?, &s)?;
    let st = s.transpose();
    let backward = assignment_score(&make_coupling(kind, &st)?, &st)?;
    Ok(forward + backward)
}

/// Blends holistic and Chamfer scores:
/// `gamma * s_hol + (1 - gamma) * tau * s_ch`.
pub fn blend_score(s_hol: f64, s_ch: f64, gamma: f64, tau: f64) -> f64 {
    gamma * s_hol + (1.0 - gamma) * tau * s_ch
}

/// Per-query classification record: blended scores by class (ascending class
/// id) and the predicted class.
#[derive(Debug, Clone)]
pub struct QueryScores {
    pub class_ids: Vec<usize>,
    pub holistic: Vec<f64>,
    pub chamfer: Vec<f64>,
    pub blended: Vec<f64>,
    pub predicted: usize,
    pub actual: usize,
}

#[derive(Debug, Clone)]
pub struct EpisodeClassification {
    pub queries: Vec<QueryScores>,
    pub n_correct: usize,
}

impl EpisodeClassification {
    pub fn accuracy(&self) -> f64 {
        if self.queries.is_empty() {
            0.0
        } else {
            self.n_correct as f64 / self.queries.len() as f64
        }
    }
}

/// Full Phase-II inference over an episode. Per query: the holistic score is
/// the temperature-scaled cosine to each class prototype (computed on the
/// uncentered embeddings); the Chamfer score matches the query's top-kappa
/// centered slots against the union of top-kappa centered slots across that
/// class's supports; the blend picks the class. Prediction ties break to the
/// lower class id.
pub fn classify_episode(
    episode: &EpisodeBatch,
    params: &EncoderParams,
    matcher: &MatcherConfig,
) -> Result<EpisodeClassification> {
    episode.validate()?;
    let class_ids = episode.support_classes();
    let tau = params.head.tau();

    struct ImagePieces {
        embedding: Vec<f64>,
        top_centered: CenteredSlots,
    }

    let prepare = |img: &crate::episode::EpisodeImage| -> Result<ImagePieces> {
        let forward = encoder::encode_image(params, &img.aggregates)?;
        let centered = center_slots(&forward.embeddings.z)?;
        let keep = select_topk(&forward.omega, matcher.kappa);
        let top_centered = centered.select(&keep);
        if top_centered.is_empty() {
            return Err(CoreError::EmptyAfterCentering);
        }
        Ok(ImagePieces { embedding: forward.holistic.e, top_centered })
    };

    let supports: Vec<ImagePieces> =
        episode.support.iter().map(&prepare).collect::<Result<_>>()?;
    let prototypes = encoder::compute_prototypes(
        &episode
            .support
            .iter()
            .zip(&supports)
            .map(|(img, p)| (p.embedding.clone(), img.class_id))
            .collect::<Vec<_>>(),
    )?;

    // Per-class support pools: union of top-kappa centered slots across that
    // class's support images.
    let mut pools: Vec<CenteredSlots> = Vec::with_capacity(class_ids.len());
    for &c in &class_ids {
        let mut rows = Vec::new();
        let mut ids = Vec::new();
        for (img, pieces) in episode.support.iter().zip(&supports) {
            if img.class_id != c {
                continue;
            }
            for (r, &sid) in pieces
                .top_centered
                .z_hat
                .data()
                .chunks(pieces.top_centered.z_hat.cols())
                .zip(&pieces.top_centered.source_slot_ids)
            {
                rows.push(r.to_vec());
                ids.push(sid);
            }
        }
        if rows.is_empty() {
            return Err(CoreError::MissingClass(c));
        }
        pools.push(CenteredSlots { z_hat: Matrix::from_rows(&rows)?, source_slot_ids: ids });
    }

    let mut queries = Vec::with_capacity(episode.query.len());
    let mut n_correct = 0usize;
    for img in &episode.query {
        let pieces = prepare(img)?;
        let mut holistic = Vec::with_capacity(class_ids.len());
        let mut chamfer = Vec::with_capacity(class_ids.len());
        let mut blended = Vec::with_capacity(class_ids.len());
        for (proto, pool) in prototypes.iter().zip(&pools) {
            let s_hol = tau * dot(&pieces.embedding, &proto.direction);
            let s_ch = match matcher.kind {
                CouplingKind::HardChamfer => chamfer_score(&pieces.top_centered, pool)?,
                _ => coupling_pair_score(&matcher.kind, &pieces.top_centered, pool)?,
            };
            holistic.push(s_hol);
            chamfer.push(s_ch);
            blended.push(blend_score(s_hol, s_ch, matcher.gamma_blend, tau));
        }
        let mut best = 0usize;
        for i in 1..blended.len() {
            if blended[i] > blended[best] {
                best = i;
            }
        }
        let predicted = class_ids[best];
        if predicted == img.class_id {
            n_correct += 1;
        }
        queries.push(QueryScores {
            class_ids: class_ids.clone(),
            holistic,
            chamfer,
            blended,
            predicted,
            actual: img.class_id,
        });
    }
    Ok(EpisodeClassification { queries, n_correct })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{norm, RngState};

    fn unit_rows(rows: &[Vec<f64>]) -> Matrix {
        let normed: Vec<Vec<f64>> =
            rows.iter().map(|r| l2_normalize(r, NORM_EPS).unwrap()).collect();
        Matrix::from_rows(&normed).unwrap()
    }

    fn random_unit_rows(rows: usize, dim: usize, rng: &mut RngState) -> Matrix {
        let data: Vec<Vec<f64>> = (0..rows).map(|_| rng.unit_vector(dim)).collect();
        Matrix::from_rows(&data).unwrap()
    }

    #[test]
    fn center_two_orthogonal_slots() {
        let z = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let c = center_slots(&z).unwrap();
        let r = 1.0 / 2.0f64.sqrt();
        assert!((c.z_hat.get(0, 0) - r).abs() < 1e-12);
        assert!((c.z_hat.get(0, 1) + r).abs() < 1e-12);
        assert!((c.z_hat.get(1, 0) + r).abs() < 1e-12);
        assert!((c.z_hat.get(1, 1) - r).abs() < 1e-12);
    }

    #[test]
    fn center_drops_row_equal_to_mean() {
        // Third row is the mean direction of the set; after centering it
        // vanishes and is dropped.
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 1.0];
        let m = l2_normalize(&[0.5, 0.5], NORM_EPS).unwrap();
        // Build rows whose mean equals m: choose a, b, and c with c = 3m - a - b.
        let c: Vec<f64> = (0..2).map(|i| 3.0 * m[i] - a[i] - b[i]).collect();
        let z = Matrix::from_rows(&[a, b, c]).unwrap();
        // mean of rows is exactly m, so any row equal to m would drop; here
        // we instead verify the id bookkeeping on a synthetic exact case.
        let exact = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.5, 0.5], // equals the row mean exactly
        ])
        .unwrap();
        let centered = center_slots(&exact).unwrap();
        assert_eq!(centered.source_slot_ids, vec![0, 1]);
        assert_eq!(centered.len(), 2);
        // And the generic 3-row case stays full rank.
        let generic = center_slots(&z).unwrap();
        assert!(generic.len() >= 2);
    }

    #[test]
    fn center_all_identical_rows_errors() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(center_slots(&z), Err(CoreError::EmptyAfterCentering)));
    }

    #[test]
    fn cost_matrix_identity_and_antipodal() {
        let a = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let s = cost_matrix(&a, &a).unwrap();
        assert!((s.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((s.get(1, 1) - 1.0).abs() < 1e-12);
        assert!(s.get(0, 1).abs() < 1e-12);
        let b = unit_rows(&[vec![-1.0, 0.0]]);
        let s = cost_matrix(&a, &b).unwrap();
        assert!((s.get(0, 0) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cost_matrix_matches_direct_dots() {
        let mut rng = RngState::new(20);
        let a = random_unit_rows(3, 5, &mut rng);
        let b = random_unit_rows(4, 5, &mut rng);
        let s = cost_matrix(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((s.get(i, j) - dot(a.row(i), b.row(j))).abs() < 1e-14);
                assert!(s.get(i, j).abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn hard_coupling_rows_pick_argmax() {
        let s = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.8, 0.2]]).unwrap();
        let c = make_coupling(&CouplingKind::HardChamfer, &s).unwrap();
        assert_eq!(c.t.get(0, 0), 1.0);
        assert_eq!(c.t.get(1, 0), 1.0);
        assert_eq!(c.t.get(0, 1), 0.0);
        assert_eq!(c.t.get(1, 1), 0.0);
    }

    #[test]
    fn soft_coupling_beta_zero_is_uniform() {
        let mut rng = RngState::new(21);
        let s = rng.gaussian_matrix(3, 4);
        let c = make_coupling(&CouplingKind::SoftChamfer { beta: 0.0 }, &s).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((c.t.get(i, j) - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sinkhorn_sharp_diagonal_at_low_epsilon() {
        let s = Matrix::from_rows(&[vec![10.0, 0.0], vec![0.0, 10.0]]).unwrap();
        let c = make_coupling(&CouplingKind::sinkhorn(0.1), &s).unwrap();
        assert!((c.t.get(0, 0) - 1.0).abs() < 1e-6);
        assert!((c.t.get(1, 1) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sinkhorn_high_epsilon_near_uniform() {
        // At epsilon = 100 the deviation from uniform is first-order in the
        // doubly-centered costs over epsilon, so moderate cosine-scale
        // entries land well inside 1e-3.
        let mut rng = RngState::new(22);
        let s = Matrix::from_fn(2, 2, |_, _| 0.4 * rng.next_f64() - 0.2);
        let c = make_coupling(&CouplingKind::sinkhorn(100.0), &s).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((c.t.get(i, j) - 0.5).abs() <= 1e-3);
            }
        }
    }

    #[test]
    fn sinkhorn_rectangular_marginals() {
        let mut rng = RngState::new(23);
        let s = Matrix::from_fn(2, 3, |_, _| rng.next_f64());
        let c = make_coupling(&CouplingKind::sinkhorn(0.5), &s).unwrap();
        for i in 0..2 {
            let r: f64 = c.t.row(i).iter().sum();
            assert!((r - 1.0).abs() < 1e-8);
        }
        for j in 0..3 {
            let col: f64 = (0..2).map(|i| c.t.get(i, j)).sum();
            assert!((col - 2.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn hungarian_requires_square() {
        let s = Matrix::zeros(2, 3);
        assert!(matches!(
            make_coupling(&CouplingKind::Hungarian, &s),
            Err(CoreError::NonSquareCost { .. })
        ));
    }

    #[test]
    fn hungarian_matches_bruteforce_on_small_matrices() {
        let mut rng = RngState::new(24);
        for k in 2..=6 {
            for _ in 0..20 {
                let s = Matrix::from_fn(k, k, |_, _| 2.0 * rng.next_f64() - 1.0);
                let c = make_coupling(&CouplingKind::Hungarian, &s).unwrap();
                // score of the returned permutation
                let got: f64 = (0..k)
                    .map(|i| {
                        let j = row_argmax(c.t.row(i));
                        s.get(i, j)
                    })
                    .sum();
                // brute force over all permutations
                let mut perm: Vec<usize> = (0..k).collect();
                let mut best = f64::NEG_INFINITY;
                permute(&mut perm, 0, &mut |p| {
                    let v: f64 = p.iter().enumerate().map(|(i, &j)| s.get(i, j)).sum();
                    if v > best {
                        best = v;
                    }
                });
                assert!((got - best).abs() < 1e-9, "k={k}: {got} vs {best}");
            }
        }
    }

    fn permute(perm: &mut Vec<usize>, at: usize, visit: &mut impl FnMut(&[usize])) {
        if at == perm.len() {
            visit(perm);
            return;
        }
        for i in at..perm.len() {
            perm.swap(at, i);
            permute(perm, at + 1, visit);
            perm.swap(at, i);
        }
    }

    #[test]
    fn all_couplings_row_stochastic() {
        let mut rng = RngState::new(25);
        let kinds = [
            CouplingKind::HardChamfer,
            CouplingKind::SoftChamfer { beta: 7.0 },
            CouplingKind::MutualNearest,
            CouplingKind::sinkhorn(0.3),
            CouplingKind::Hungarian,
        ];
        for _ in 0..50 {
            let s = Matrix::from_fn(4, 4, |_, _| 2.0 * rng.next_f64() - 1.0);
            for kind in &kinds {
                let c = make_coupling(kind, &s).unwrap();
                for i in 0..4 {
                    let r: f64 = c.t.row(i).iter().sum();
                    assert!((r - 1.0).abs() <= 1e-9, "{kind:?} row sum {r}");
                    assert!(c.t.row(i).iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn assignment_score_identity_and_uniform() {
        let s = Matrix::identity(3);
        let t = Coupling { t: Matrix::identity(3), kind: CouplingTag::HardChamfer };
        assert!((assignment_score(&t, &s).unwrap() - 1.0).abs() < 1e-12);
        let uniform =
            Coupling { t: Matrix::from_fn(3, 3, |_, _| 1.0 / 3.0), kind: CouplingTag::HardChamfer };
        let mean: f64 = s.data().iter().sum::<f64>() / 9.0;
        assert!((assignment_score(&uniform, &s).unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn hard_assignment_score_equals_forward_chamfer() {
        let mut rng = RngState::new(26);
        for _ in 0..100 {
            let a = random_unit_rows(3, 6, &mut rng);
            let b = random_unit_rows(5, 6, &mut rng);
            let s = cost_matrix(&a, &b).unwrap();
            let c = make_coupling(&CouplingKind::HardChamfer, &s).unwrap();
            let via_coupling = assignment_score(&c, &s).unwrap();
            let via_chamfer = directed_chamfer(&a, &b).unwrap();
            assert!((via_coupling - via_chamfer).abs() < 1e-12);
        }
    }

    #[test]
    fn select_topk_ordering_and_ties() {
        assert_eq!(select_topk(&[0.5, 0.3, 0.2], 2), vec![0, 1]);
        assert_eq!(select_topk(&[0.4, 0.4, 0.2], 1), vec![0]);
        assert_eq!(select_topk(&[0.1, 0.9], 5), vec![1, 0]);
    }

    #[test]
    fn chamfer_score_identical_orthogonal_and_mixed() {
        let a = CenteredSlots {
            z_hat: unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
            source_slot_ids: vec![0, 1],
        };
        assert!((chamfer_score(&a, &a).unwrap() - 2.0).abs() < 1e-12);

        let q = CenteredSlots { z_hat: unit_rows(&[vec![1.0, 0.0]]), source_slot_ids: vec![0] };
        let p = CenteredSlots { z_hat: unit_rows(&[vec![0.0, 1.0]]), source_slot_ids: vec![0] };
        assert!(chamfer_score(&q, &p).unwrap().abs() < 1e-12);

        let pool = CenteredSlots {
            z_hat: unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
            source_slot_ids: vec![0, 1],
        };
        assert!((chamfer_score(&q, &pool).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn hard_coupling_pair_score_equals_chamfer_score() {
        let mut rng = RngState::new(29);
        for _ in 0..50 {
            let a = CenteredSlots {
                z_hat: random_unit_rows(3, 6, &mut rng),
                source_slot_ids: vec![0, 1, 2],
            };
            let b = CenteredSlots {
                z_hat: random_unit_rows(5, 6, &mut rng),
                source_slot_ids: vec![0, 1, 2, 3, 4],
            };
            let via_max = chamfer_score(&a, &b).unwrap();
            let via_coupling =
                coupling_pair_score(&CouplingKind::HardChamfer, &a, &b).unwrap();
            assert!((via_max - via_coupling).abs() < 1e-12);
        }
    }

    #[test]
    fn chamfer_score_symmetric() {
        let mut rng = RngState::new(27);
        let a = CenteredSlots {
            z_hat: random_unit_rows(3, 5, &mut rng),
            source_slot_ids: vec![0, 1, 2],
        };
        let b = CenteredSlots {
            z_hat: random_unit_rows(4, 5, &mut rng),
            source_slot_ids: vec![0, 1, 2, 3],
        };
        let ab = chamfer_score(&a, &b).unwrap();
        let ba = chamfer_score(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn blend_score_endpoints() {
        assert_eq!(blend_score(3.0, 0.5, 1.0, 10.0), 3.0);
        assert_eq!(blend_score(3.0, 0.5, 0.0, 10.0), 5.0);
        let mid = blend_score(3.0, 0.5, 0.3, 10.0);
        assert!((mid - (0.3 * 3.0 + 0.7 * 10.0 * 0.5)).abs() < 1e-12);
    }

    use crate::encoder::EncoderParams;
    use crate::episode::{EpisodeBatch, EpisodeImage};
    use crate::slots::SlotAggregates;

    fn image_from_rows(rows: &[Vec<f64>], class_id: usize) -> EpisodeImage {
        let phi = unit_rows(rows);
        EpisodeImage {
            aggregates: SlotAggregates { degenerate: vec![false; phi.rows()], phi },
            class_id,
        }
    }

    #[test]
    fn classify_one_way_always_predicts_that_class() {
        let mut rng = RngState::new(130);
        let mk = |rng: &mut RngState| {
            let rows: Vec<Vec<f64>> = (0..3).map(|_| rng.unit_vector(6)).collect();
            image_from_rows(&rows, 4)
        };
        let episode = EpisodeBatch {
            support: vec![mk(&mut rng)],
            query: vec![mk(&mut rng), mk(&mut rng)],
            way: 1,
            shot: 1,
            queries_per_class: 2,
        };
        let params = EncoderParams::init(6, 4, 10.0, &mut rng);
        let outcome = classify_episode(&episode, &params, &MatcherConfig::default()).unwrap();
        assert_eq!(outcome.n_correct, 2);
        assert!(outcome.queries.iter().all(|q| q.predicted == 4));
    }

    #[test]
    fn classify_duplicated_query_prefers_its_source_class() {
        // gamma = 1 scores purely on the holistic cosine; a query that
        // duplicates a support image sits on its own class prototype.
        let mut rng = RngState::new(131);
        let a = image_from_rows(
            &(0..3).map(|_| rng.unit_vector(8)).collect::<Vec<_>>(),
            0,
        );
        let b = image_from_rows(
            &(0..3).map(|_| rng.unit_vector(8)).collect::<Vec<_>>(),
            1,
        );
        let episode = EpisodeBatch {
            support: vec![a.clone(), b],
            query: vec![a],
            way: 2,
            shot: 1,
            queries_per_class: 1,
        };
        let params = EncoderParams::init(8, 4, 10.0, &mut rng);
        let matcher = MatcherConfig { gamma_blend: 1.0, ..MatcherConfig::default() };
        let outcome = classify_episode(&episode, &params, &matcher).unwrap();
        assert_eq!(outcome.queries[0].predicted, 0);
    }

    #[test]
    fn classify_separable_episode_perfectly_across_seeds() {
        for seed in [1u64, 2, 3] {
            let mut rng = RngState::new(seed);
            // Two classes on disjoint orthogonal slot directions plus noise.
            let e = Matrix::identity(12);
            let render = |rng: &mut RngState, class: usize| {
                let base = 4 * class;
                let rows: Vec<Vec<f64>> = (0..3)
                    .map(|s| {
                        let mut v = e.row(base + s).to_vec();
                        for x in v.iter_mut() {
                            *x += 0.05 * rng.next_gaussian();
                        }
                        v
                    })
                    .collect();
                image_from_rows(&rows, class)
            };
            let episode = EpisodeBatch {
                support: vec![
                    render(&mut rng, 0),
                    render(&mut rng, 0),
                    render(&mut rng, 1),
                    render(&mut rng, 1),
                ],
                query: vec![
                    render(&mut rng, 0),
                    render(&mut rng, 1),
                    render(&mut rng, 0),
                    render(&mut rng, 1),
                ],
                way: 2,
                shot: 2,
                queries_per_class: 2,
            };
            let params = EncoderParams::init(12, 4, 10.0, &mut rng);
            let outcome =
                classify_episode(&episode, &params, &MatcherConfig::default()).unwrap();
            assert_eq!(outcome.n_correct, 4, "seed {seed}");
        }
    }

    #[test]
    fn classify_invariant_under_global_rotation_with_identity_head() {
        // With an identity head and a zeroed router (uniform weights and a
        // rotation-independent slot ranking), every score in the pipeline is
        // a cosine, so jointly rotating all aggregates changes nothing.
        let mut rng = RngState::new(132);
        let d = 8;
        let mk = |rng: &mut RngState, class_id| {
            let rows: Vec<Vec<f64>> = (0..4).map(|_| rng.unit_vector(d)).collect();
            image_from_rows(&rows, class_id)
        };
        let episode = EpisodeBatch {
            support: vec![mk(&mut rng, 0), mk(&mut rng, 0), mk(&mut rng, 1), mk(&mut rng, 1)],
            query: vec![mk(&mut rng, 0), mk(&mut rng, 1), mk(&mut rng, 1)],
            way: 2,
            shot: 2,
            queries_per_class: 1,
        };
        let mut params = EncoderParams::init(d, 4, 10.0, &mut rng);
        params.router.w1 = Matrix::zeros(4, d);
        let matcher = MatcherConfig { kappa: 3, ..MatcherConfig::default() };
        let base = classify_episode(&episode, &params, &matcher).unwrap();

        let u = crate::tensor::random_orthogonal(d, &mut rng);
        let rotate = |img: &EpisodeImage| {
            let rotated = img.aggregates.phi.matmul(&u.transpose());
            EpisodeImage {
                aggregates: SlotAggregates {
                    degenerate: img.aggregates.degenerate.clone(),
                    phi: rotated,
                },
                class_id: img.class_id,
            }
        };
        let rotated = EpisodeBatch {
            support: episode.support.iter().map(&rotate).collect(),
            query: episode.query.iter().map(&rotate).collect(),
            way: 2,
            shot: 2,
            queries_per_class: 1,
        };
        let turned = classify_episode(&rotated, &params, &matcher).unwrap();
        for (a, b) in base.queries.iter().zip(&turned.queries) {
            assert_eq!(a.predicted, b.predicted);
            for (x, y) in a.blended.iter().zip(&b.blended) {
                assert!((x - y).abs() < 1e-9, "score moved under rotation: {x} vs {y}");
            }
        }
    }

    #[test]
    fn centered_norms_are_unit() {
        let mut rng = RngState::new(28);
        let z = random_unit_rows(5, 8, &mut rng);
        let c = center_slots(&z).unwrap();
        for i in 0..c.len() {
            assert!((norm(c.z_hat.row(i)) - 1.0).abs() < 1e-10);
        }
    }
}
