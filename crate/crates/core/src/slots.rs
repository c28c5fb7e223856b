//! Frozen slot attention: iterative competitive-softmax binding of K slot
//! vectors to N patch tokens, the attention-weighted aggregate readout that
//! replaces the recurrent state as the slot representation, and the
//! slot-purity evaluator.
//!
//! Nothing in this module is trained at experiment time. Parameters are
//! either seeded random or constructed so that patch clusters win the
//! softmax (the oracle mode used by the synthetic benchmark).

use crate::error::{CoreError, Result};
use crate::tensor::{dot, l2_normalize, softmax_columns, Matrix, RngState, NORM_EPS};

/// Per-slot attention mass below this is treated as an empty slot: its GRU
/// update input falls back to the zero vector.
const SLOT_MASS_EPS: f64 = 1e-12;

/// Patch tokens of one image: an N x D matrix plus optional per-patch
/// ground-truth category ids (0 = background) for purity evaluation.
#[derive(Debug, Clone)]
pub struct PatchFeatures {
    pub features: Matrix,
    pub patch_labels: Option<Vec<usize>>,
}

impl PatchFeatures {
    pub fn new(features: Matrix) -> Self {
        PatchFeatures { features, patch_labels: None }
    }

    pub fn with_labels(features: Matrix, labels: Vec<usize>) -> Self {
        assert_eq!(features.rows(), labels.len(), "one label per patch");
        PatchFeatures { features, patch_labels: Some(labels) }
    }

    pub fn num_patches(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Standard gated recurrent cell over D-dimensional states:
///
/// ```text
/// r  = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
/// zg = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
/// n  = tanh(W_in x + b_in + r .* (W_hn h + b_hn))
/// h' = (1 - zg) .* n + zg .* h
/// ```
///
/// so `zg -> 0` replaces the state with the candidate and `zg -> 1` keeps it.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_ir: Matrix,
    pub w_iz: Matrix,
    pub w_in: Matrix,
    pub w_hr: Matrix,
    pub w_hz: Matrix,
    pub w_hn: Matrix,
    pub b_ir: Vec<f64>,
    pub b_iz: Vec<f64>,
    pub b_in: Vec<f64>,
    pub b_hr: Vec<f64>,
    pub b_hz: Vec<f64>,
    pub b_hn: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl GruCell {
    pub fn seeded(dim: usize, rng: &mut RngState) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let mat = |rng: &mut RngState| {
            let mut m = rng.gaussian_matrix(dim, dim);
            m.scale(scale);
            m
        };
        GruCell {
            w_ir: mat(rng),
            w_iz: mat(rng),
            w_in: mat(rng),
            w_hr: mat(rng),
            w_hz: mat(rng),
            w_hn: mat(rng),
            b_ir: vec![0.0; dim],
            b_iz: vec![0.0; dim],
            b_in: vec![0.0; dim],
            b_hr: vec![0.0; dim],
            b_hz: vec![0.0; dim],
            b_hn: vec![0.0; dim],
        }
    }

    /// Pass-through cell: gates pinned so `h' ~= tanh(candidate_gain * x)`.
    /// Turns the update into a soft k-means step that moves each slot onto
    /// the mean of the patches it currently wins.
    pub fn pass_through(dim: usize, candidate_gain: f64) -> Self {
        let mut cell = GruCell {
            w_ir: Matrix::zeros(dim, dim),
            w_iz: Matrix::zeros(dim, dim),
            w_in: Matrix::identity(dim),
            w_hr: Matrix::zeros(dim, dim),
            w_hz: Matrix::zeros(dim, dim),
            w_hn: Matrix::zeros(dim, dim),
            b_ir: vec![30.0; dim],
            b_iz: vec![-30.0; dim],
            b_in: vec![0.0; dim],
            b_hr: vec![0.0; dim],
            b_hz: vec![0.0; dim],
            b_hn: vec![0.0; dim],
        };
        cell.w_in.scale(candidate_gain);
        cell
    }

    pub fn step(&self, state: &[f64], input: &[f64]) -> Vec<f64> {
        let d = state.len();
        let ir = self.w_ir.matvec(input);
        let hr = self.w_hr.matvec(state);
        let iz = self.w_iz.matvec(input);
        let hz = self.w_hz.matvec(state);
        let i_n = self.w_in.matvec(input);
        let h_n = self.w_hn.matvec(state);
        let mut out = vec![0.0; d];
        for j in 0..d {
            let r = sigmoid(ir[j] + self.b_ir[j] + hr[j] + self.b_hr[j]);
            let zg = sigmoid(iz[j] + self.b_iz[j] + hz[j] + self.b_hz[j]);
            let n = (i_n[j] + self.b_in[j] + r * (h_n[j] + self.b_hn[j])).tanh();
            out[j] = (1.0 - zg) * n + zg * state[j];
        }
        out
    }
}

/// Frozen slot attention parameters.
#[derive(Debug, Clone)]
pub struct SlotAttentionParams {
    pub w_query: Matrix,
    pub w_key: Matrix,
    pub w_value: Matrix,
    pub gru: GruCell,
    pub prior_mean: Vec<f64>,
    pub prior_log_std: Vec<f64>,
    pub iterations: usize,
}

impl SlotAttentionParams {
    /// Random parameters, for API-level tests and ablations.
    pub fn seeded(dim: usize, iterations: usize, rng: &mut RngState) -> Self {
        assert!(iterations >= 1);
        let scale = 1.0 / (dim as f64).sqrt();
        let mat = |rng: &mut RngState| {
            let mut m = rng.gaussian_matrix(dim, dim);
            m.scale(scale);
            m
        };
        SlotAttentionParams {
            w_query: mat(rng),
            w_key: mat(rng),
            w_value: mat(rng),
            gru: GruCell::seeded(dim, rng),
            prior_mean: vec![0.0; dim],
            prior_log_std: vec![0.0; dim],
            iterations,
        }
    }

    /// Constructed parameters under which patch clusters win the softmax:
    /// identity query/key maps scaled so the attention logits are
    /// `gain * <slot, patch>`, identity values, pass-through GRU.
    pub fn oracle(dim: usize, iterations: usize, gain: f64) -> Self {
        assert!(iterations >= 1);
        assert!(gain > 0.0);
        let a = (gain * (dim as f64).sqrt()).sqrt();
        let mut w_query = Matrix::identity(dim);
        w_query.scale(a);
        let mut w_key = Matrix::identity(dim);
        w_key.scale(a);
        SlotAttentionParams {
            w_query,
            w_key,
            w_value: Matrix::identity(dim),
            gru: GruCell::pass_through(dim, 2.0),
            prior_mean: vec![0.0; dim],
            prior_log_std: vec![0.0; dim],
            iterations,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_query.rows()
    }
}

/// Slot vectors plus the K x N attention matrix from the last iteration.
/// Attention columns (one per patch) are stochastic over slots.
#[derive(Debug, Clone)]
pub struct SlotState {
    pub slots: Matrix,
    pub attn: Matrix,
}

/// Unit-norm attention-weighted aggregates, one row per slot. Rows whose
/// weighted patch sum was degenerate are flagged rather than normalized.
#[derive(Debug, Clone)]
pub struct SlotAggregates {
    pub phi: Matrix,
    pub degenerate: Vec<bool>,
}

impl SlotAggregates {
    pub fn num_slots(&self) -> usize {
        self.phi.rows()
    }

    pub fn dim(&self) -> usize {
        self.phi.cols()
    }

    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }
}

/// Draws K initial slots from the learned Gaussian prior:
/// `slot = prior_mean + exp(prior_log_std) .* noise`.
pub fn init_slots(params: &SlotAttentionParams, k: usize, rng: &mut RngState) -> Matrix {
    assert!(k >= 1, "init_slots: k >= 1");
    let d = params.dim();
    Matrix::from_fn(k, d, |_, j| {
        params.prior_mean[j] + params.prior_log_std[j].exp() * rng.next_gaussian()
    })
}

/// One refinement round: competitive softmax over slots of the scaled
/// query-key products, slot-wise renormalization across patches, and a GRU
/// update of each slot on its attention-weighted value mean.
pub fn attention_iteration(
    params: &SlotAttentionParams,
    slots: &Matrix,
    patches: &PatchFeatures,
) -> Result<SlotState> {
    let d = params.dim();
    if slots.cols() != d || patches.dim() != d {
        return Err(CoreError::ShapeMismatch(format!(
            "attention_iteration: slots {}x{}, patches {}x{}, params dim {}",
            slots.rows(),
            slots.cols(),
            patches.num_patches(),
            patches.dim(),
            d
        )));
    }
    let k = slots.rows();
    let n = patches.num_patches();

    let queries = slots.matmul(&params.w_query.transpose()); // K x D
    let keys = patches.features.matmul(&params.w_key.transpose()); // N x D
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let logits = Matrix::from_fn(k, n, |i, j| inv_sqrt_d * dot(queries.row(i), keys.row(j)));
    let attn = softmax_columns(&logits)?;

    let values = patches.features.matmul(&params.w_value.transpose()); // N x D
    let mut new_slots = Matrix::zeros(k, d);
    for i in 0..k {
        let mass: f64 = attn.row(i).iter().sum();
        let mut update = vec![0.0; d];
        if mass >= SLOT_MASS_EPS {
            for j in 0..n {
                let w = attn.get(i, j) / mass;
                for (u, &v) in update.iter_mut().zip(values.row(j)) {
                    *u += w * v;
                }
            }
        }
        let next = params.gru.step(slots.row(i), &update);
        new_slots.row_mut(i).copy_from_slice(&next);
    }
    Ok(SlotState { slots: new_slots, attn })
}

/// Runs the full refinement loop from prior-sampled slots and returns the
/// final state.
pub fn run_slot_attention(
    params: &SlotAttentionParams,
    patches: &PatchFeatures,
    k: usize,
    rng: &mut RngState,
) -> Result<SlotState> {
    let mut slots = init_slots(params, k, rng);
    let mut state = attention_iteration(params, &slots, patches)?;
    for _ in 1..params.iterations {
        slots = state.slots;
        state = attention_iteration(params, &slots, patches)?;
    }
    Ok(state)
}

/// Attention-weighted aggregate readout: row k is the unit-normalized
/// weighted patch sum for slot k. Normalization makes the result invariant
/// to positive rescaling of a slot's weights, so raw and patch-renormalized
/// weights give the same aggregate.
pub fn aggregate_slots(attn: &Matrix, patches: &PatchFeatures) -> Result<SlotAggregates> {
    if attn.cols() != patches.num_patches() {
        return Err(CoreError::ShapeMismatch(format!(
            "aggregate_slots: attn {}x{} vs {} patches",
            attn.rows(),
            attn.cols(),
            patches.num_patches()
        )));
    }
    let k = attn.rows();
    let d = patches.dim();
    let mut phi = Matrix::zeros(k, d);
    let mut degenerate = vec![false; k];
    for i in 0..k {
        let weighted = patches.features.matvec_t(attn.row(i));
        match l2_normalize(&weighted, NORM_EPS) {
            Ok(unit) => phi.row_mut(i).copy_from_slice(&unit),
            Err(CoreError::DegenerateVector { .. }) => degenerate[i] = true,
            Err(e) => return Err(e),
        }
    }
    Ok(SlotAggregates { phi, degenerate })
}

/// Fraction of slots whose dominant ground-truth category holds a strict
/// majority (> 0.5) of the slot's total attention mass, averaged over slots
/// and then images. Category ids follow the patch labels; 0 is background
/// and participates like any other category. Dominance ties break toward the
/// lower category id.
pub fn slot_purity(attn_batch: &[Matrix], labels_batch: &[Vec<usize>]) -> Result<f64> {
    if attn_batch.is_empty() {
        return Err(CoreError::EmptyInput("slot_purity: empty batch".into()));
    }
    if attn_batch.len() != labels_batch.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "slot_purity: {} attention maps vs {} label vectors",
            attn_batch.len(),
            labels_batch.len()
        )));
    }
    let mut image_scores = Vec::with_capacity(attn_batch.len());
    for (attn, labels) in attn_batch.iter().zip(labels_batch) {
        if attn.cols() != labels.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "slot_purity: {} patches vs {} labels",
                attn.cols(),
                labels.len()
            )));
        }
        if !labels.iter().any(|&c| c != 0) {
            return Err(CoreError::Invalid(
                "slot_purity: image has no non-background category".into(),
            ));
        }
        let num_categories = labels.iter().copied().max().unwrap() + 1;
        let k = attn.rows();
        let mut pure = 0usize;
        for slot in 0..k {
            let mut mass = vec![0.0f64; num_categories];
            let mut total = 0.0;
            for (patch, &cat) in labels.iter().enumerate() {
                let w = attn.get(slot, patch);
                mass[cat] += w;
                total += w;
            }
            // argmax with ties toward the lower category id
            let mut best = 0usize;
            for c in 1..num_categories {
                if mass[c] > mass[best] {
                    best = c;
                }
            }
            if total > 0.0 && mass[best] > 0.5 * total {
                pure += 1;
            }
        }
        image_scores.push(pure as f64 / k as f64);
    }
    Ok(image_scores.iter().sum::<f64>() / image_scores.len() as f64)
}
