//! Analytic gradients of the episode loss with respect to the four
//! trainables (router hidden weights, router readout, projection head,
//! log-temperature), plus the Adam step that consumes them.
//!
//! The backward pass mirrors `episode_forward`/`ct_forward` exactly. Every
//! piece is checked against the central-difference oracle in the acceptance
//! suite; the discrete parts of the matching term (top-kappa selection,
//! argmax matches) are treated as locally constant, which is the exact
//! gradient away from ties.

use super::{
    ct_forward, decorrelation_gradient, episode_forward, CtForward, EncoderParams, EpisodeForward,
    LossBreakdown, LossConfig, PrototypeGradMode,
};
use crate::episode::EpisodeBatch;
use crate::error::{CoreError, Result};
use crate::tensor::{dot, norm, Matrix};

/// Gradients for every trainable, same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct EncoderGradients {
    pub w1: Matrix,
    pub v: Vec<f64>,
    pub w2: Matrix,
    pub log_tau: f64,
}

/// Flat parameter layout shared by gradients, Adam state and the on-disk
/// model format: W1 row-major, then v, then W2 row-major, then log_tau.
pub const PARAM_LAYOUT_NOTE: &str = "W1 rows, v, W2 rows, log_tau";

impl EncoderGradients {
    fn zeros(params: &EncoderParams) -> Self {
        EncoderGradients {
            w1: Matrix::zeros(params.router.w1.rows(), params.router.w1.cols()),
            v: vec![0.0; params.router.v.len()],
            w2: Matrix::zeros(params.head.w2.rows(), params.head.w2.cols()),
            log_tau: 0.0,
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(
            self.w1.data().len() + self.v.len() + self.w2.data().len() + 1,
        );
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.v);
        out.extend_from_slice(self.w2.data());
        out.push(self.log_tau);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite()
            && self.v.iter().all(|x| x.is_finite())
            && self.w2.is_finite()
            && self.log_tau.is_finite()
    }
}

/// Flattens parameters in the shared layout.
pub fn flatten_params(params: &EncoderParams) -> Vec<f64> {
    let mut out = Vec::new();
    out.extend_from_slice(params.router.w1.data());
    out.extend_from_slice(&params.router.v);
    out.extend_from_slice(params.head.w2.data());
    out.push(params.head.log_tau);
    out
}

/// Rebuilds parameters from the shared flat layout.
pub fn unflatten_params(template: &EncoderParams, flat: &[f64]) -> EncoderParams {
    let h = template.router.w1.rows();
    let d = template.router.w1.cols();
    let dd = template.head.w2.rows();
    assert_eq!(flat.len(), h * d + h + dd * dd + 1, "flat layout mismatch");
    let mut params = template.clone();
    let (w1_flat, rest) = flat.split_at(h * d);
    let (v_flat, rest) = rest.split_at(h);
    let (w2_flat, rest) = rest.split_at(dd * dd);
    params.router.w1.data_mut().copy_from_slice(w1_flat);
    params.router.v.copy_from_slice(v_flat);
    params.head.w2.data_mut().copy_from_slice(w2_flat);
    params.head.log_tau = rest[0];
    params
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

struct ImageBackState {
    /// Gradient arriving at the holistic embedding e.
    e_bar: Vec<f64>,
    /// Gradient arriving at the unit slot embeddings z (K x D).
    z_bar: Matrix,
    /// Gradient arriving at the raw projections y (K x D); decorrelation
    /// scatters here directly.
    y_bar: Matrix,
}

impl ImageBackState {
    fn new(k: usize, d: usize) -> Self {
        ImageBackState { e_bar: vec![0.0; d], z_bar: Matrix::zeros(k, d), y_bar: Matrix::zeros(k, d) }
    }
}

/// Analytic gradients of the configured episode loss, together with the loss
/// breakdown from the same forward pass. Prototypes are treated as functions
/// of the support embeddings unless `StopGradient` is set.
pub fn encoder_gradients(
    params: &EncoderParams,
    episode: &EpisodeBatch,
    config: &LossConfig,
) -> Result<(EncoderGradients, LossBreakdown)> {
    let forward = episode_forward(params, episode)?;
    let tau = params.head.tau();
    let ct = match &config.ct {
        Some(cfg) => Some((ct_forward(&forward, episode, tau, cfg.kappa)?, cfg.mix)),
        None => None,
    };
    let decorr_value = super::decorrelation_loss(&config.decorrelation, &forward.y_stack)?;

    let k = episode.support[0].aggregates.num_slots();
    let d = params.dim();
    let n_support = forward.supports.len();
    let n_query = forward.queries.len();
    let q_count = n_query as f64;
    let c_count = forward.class_ids.len();
    let ce_weight = config.ce_weight();

    let mut grads = EncoderGradients::zeros(params);
    let mut states: Vec<ImageBackState> =
        (0..n_support + n_query).map(|_| ImageBackState::new(k, d)).collect();

    // --- holistic prototype CE ---------------------------------------------
    // delta[q][c] = ce_weight / Q * (p - indicator); logits are tau-scaled
    // cosines, so d logit / d log_tau = logit.
    let mut proto_bar = vec![vec![0.0; d]; c_count];
    for q in 0..n_query {
        let fw = &forward.queries[q];
        for c in 0..c_count {
            let indicator = if forward.query_labels[q] == c { 1.0 } else { 0.0 };
            let delta = ce_weight * (forward.probs.get(q, c) - indicator) / q_count;
            if delta == 0.0 {
                continue;
            }
            grads.log_tau += delta * forward.logits.get(q, c);
            let e_bar = &mut states[n_support + q].e_bar;
            for (eb, &p) in e_bar.iter_mut().zip(&forward.prototypes[c]) {
                *eb += tau * delta * p;
            }
            for (pb, &e) in proto_bar[c].iter_mut().zip(&fw.holistic.e) {
                *pb += tau * delta * e;
            }
        }
    }
    if config.prototype_grad == PrototypeGradMode::FlowThrough {
        // P = m / |m|  =>  m_bar = (P_bar - <P_bar, P> P) / |m|, then spread
        // uniformly over the class's supports.
        let mut class_sizes = vec![0usize; c_count];
        for img in &episode.support {
            let c = forward.class_ids.binary_search(&img.class_id).unwrap();
            class_sizes[c] += 1;
        }
        for c in 0..c_count {
            let p = &forward.prototypes[c];
            let pb = &proto_bar[c];
            let along = dot(pb, p);
            let m_bar: Vec<f64> = pb
                .iter()
                .zip(p)
                .map(|(&g, &pi)| (g - along * pi) / forward.proto_norms[c])
                .collect();
            for (s, img) in episode.support.iter().enumerate() {
                if forward.class_ids.binary_search(&img.class_id).unwrap() != c {
                    continue;
                }
                let e_bar = &mut states[s].e_bar;
                for (eb, &m) in e_bar.iter_mut().zip(&m_bar) {
                    *eb += m / class_sizes[c] as f64;
                }
            }
        }
    }

    // --- training-time matching term ----------------------------------------
    let mut ct_value = None;
    if let Some((ct_fw, mix)) = &ct {
        ct_value = Some(ct_fw.ce);
        accumulate_ct_gradients(
            &forward, ct_fw, *mix, tau, n_support, &mut states, &mut grads.log_tau,
        );
    }

    // --- decorrelation on the pooled raw projections ------------------------
    let decorr_grad = decorrelation_gradient(&config.decorrelation, &forward.y_stack)?;
    {
        let mut row = 0;
        for state in states.iter_mut() {
            for s in 0..k {
                let src = decorr_grad.row(row);
                let dst = state.y_bar.row_mut(s);
                for (a, &b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
                row += 1;
            }
        }
    }

    // --- per-image backward --------------------------------------------------
    for (idx, state) in states.into_iter().enumerate() {
        let fw = if idx < n_support {
            &forward.supports[idx]
        } else {
            &forward.queries[idx - n_support]
        };
        let phi = if idx < n_support {
            &episode.support[idx].aggregates
        } else {
            &episode.query[idx - n_support].aggregates
        };
        backward_image(params, fw, phi, state, &mut grads);
    }

    let total = match &ct {
        Some((ct_fw, mix)) => ce_weight * forward.ce + mix * ct_fw.ce + decorr_value,
        None => forward.ce + decorr_value,
    };
    let breakdown =
        LossBreakdown { ce: forward.ce, decorrelation: decorr_value, ct: ct_value, total };
    Ok((grads, breakdown))
}

/// Scatters the matching-term gradient into the per-image `z_bar`
/// accumulators. Selection and argmax indices are locally constant, so the
/// only continuous paths run through the centered unit slots on both sides.
fn accumulate_ct_gradients(
    forward: &EpisodeForward,
    ct: &CtForward,
    mix: f64,
    tau: f64,
    n_support: usize,
    states: &mut [ImageBackState],
    log_tau_grad: &mut f64,
) {
    let q_count = forward.queries.len();
    let c_count = forward.class_ids.len();
    let d = states[0].z_bar.cols();
    let k = states[0].z_bar.rows();
    // zhat_bar per image, indexed like states.
    let mut zhat_bar: Vec<Matrix> = (0..states.len()).map(|_| Matrix::zeros(k, d)).collect();

    for q in 0..q_count {
        let qi = &ct.query_images[q];
        for c in 0..c_count {
            let indicator = if forward.query_labels[q] == c { 1.0 } else { 0.0 };
            let delta = mix * (ct.probs.get(q, c) - indicator) / q_count as f64;
            if delta == 0.0 {
                continue;
            }
            *log_tau_grad += delta * tau * ct.scores.get(q, c);
            let weight = tau * delta;
            let pool = &ct.pools[c];
            let fw_scale = weight / qi.selected.len() as f64;
            for (i, &slot) in qi.selected.iter().enumerate() {
                let (s_idx, s_slot) = pool[ct.fw_match[q][c][i]];
                let z_q = qi.z_hat.row(slot).to_vec();
                let z_s = ct.support_images[s_idx].z_hat.row(s_slot).to_vec();
                let qrow = zhat_bar[n_support + q].row_mut(slot);
                for (a, &b) in qrow.iter_mut().zip(&z_s) {
                    *a += fw_scale * b;
                }
                let srow = zhat_bar[s_idx].row_mut(s_slot);
                for (a, &b) in srow.iter_mut().zip(&z_q) {
                    *a += fw_scale * b;
                }
            }
            let bw_scale = weight / pool.len() as f64;
            for (j, &(s_idx, s_slot)) in pool.iter().enumerate() {
                let slot = qi.selected[ct.bw_match[q][c][j]];
                let z_q = qi.z_hat.row(slot).to_vec();
                let z_s = ct.support_images[s_idx].z_hat.row(s_slot).to_vec();
                let srow = zhat_bar[s_idx].row_mut(s_slot);
                for (a, &b) in srow.iter_mut().zip(&z_q) {
                    *a += bw_scale * b;
                }
                let qrow = zhat_bar[n_support + q].row_mut(slot);
                for (a, &b) in qrow.iter_mut().zip(&z_s) {
                    *a += bw_scale * b;
                }
            }
        }
    }

    // Chain zhat -> z through per-image centering and re-normalization:
    // w_s = z_s - mean(z), zhat_s = w_s / |w_s|. Every slot participates in
    // the mean, so the mean of the w-gradients is subtracted from all rows.
    for (idx, state) in states.iter_mut().enumerate() {
        let img = if idx < n_support {
            &ct.support_images[idx]
        } else {
            &ct.query_images[idx - n_support]
        };
        let mut w_bar = Matrix::zeros(k, d);
        let mut any = false;
        for s in 0..k {
            if img.w_norms[s] == 0.0 {
                continue;
            }
            let g = zhat_bar[idx].row(s);
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            any = true;
            let zh = img.z_hat.row(s);
            let along = dot(g, zh);
            let inv = 1.0 / img.w_norms[s];
            let row = w_bar.row_mut(s);
            for ((wb, &gi), &zi) in row.iter_mut().zip(g).zip(zh) {
                *wb = (gi - along * zi) * inv;
            }
        }
        if !any {
            continue;
        }
        let mut mean_w = vec![0.0; d];
        for s in 0..k {
            for (m, &w) in mean_w.iter_mut().zip(w_bar.row(s)) {
                *m += w / k as f64;
            }
        }
        for s in 0..k {
            let dst = state.z_bar.row_mut(s);
            for ((zb, &w), &m) in dst.iter_mut().zip(w_bar.row(s)).zip(&mean_w) {
                *zb += w - m;
            }
        }
    }
}

/// Propagates one image's accumulated embedding gradients into the parameter
/// gradients.
fn backward_image(
    params: &EncoderParams,
    fw: &super::ImageForward,
    phi: &crate::slots::SlotAggregates,
    state: ImageBackState,
    grads: &mut EncoderGradients,
) {
    let k = fw.omega.len();
    let d = params.dim();
    let mut y_bar = state.y_bar;
    let mut omega_bar = vec![0.0; k];

    // e = u / |u|
    let u_norm = norm(&fw.holistic.u);
    if state.e_bar.iter().any(|&x| x != 0.0) {
        let along = dot(&state.e_bar, &fw.holistic.e);
        let u_bar: Vec<f64> = state
            .e_bar
            .iter()
            .zip(&fw.holistic.e)
            .map(|(&g, &e)| (g - along * e) / u_norm)
            .collect();
        // u = sum_k omega_k y_k
        for s in 0..k {
            let w = fw.omega[s];
            let row = y_bar.row_mut(s);
            for (a, &b) in row.iter_mut().zip(&u_bar) {
                *a += w * b;
            }
            omega_bar[s] = dot(&u_bar, fw.embeddings.y_raw.row(s));
        }
    }

    // z_s = y_s / |y_s|
    for s in 0..k {
        let g = state.z_bar.row(s);
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        let z = fw.embeddings.z.row(s);
        let along = dot(g, z);
        let inv = 1.0 / fw.embeddings.norms[s];
        let row = y_bar.row_mut(s);
        for ((a, &gi), &zi) in row.iter_mut().zip(g).zip(z) {
            *a += (gi - along * zi) * inv;
        }
    }

    // omega = softmax(g), g_s = v . relu(W1 phi_s)
    if omega_bar.iter().any(|&x| x != 0.0) {
        let inner: f64 = fw.omega.iter().zip(&omega_bar).map(|(&w, &ob)| w * ob).sum();
        for s in 0..k {
            let g_bar = fw.omega[s] * (omega_bar[s] - inner);
            if g_bar == 0.0 {
                continue;
            }
            let pre = fw.pre_act.row(s);
            // v accumulates relu(pre); W1 accumulates the masked readout.
            let mut a_bar = vec![0.0; params.router.v.len()];
            for (j, (&p, &vj)) in pre.iter().zip(&params.router.v).enumerate() {
                grads.v[j] += g_bar * p.max(0.0);
                if p > 0.0 {
                    a_bar[j] = g_bar * vj;
                }
            }
            grads.w1.add_scaled_outer(&a_bar, phi.phi.row(s), 1.0);
        }
    }

    // y_s = W2 phi_s
    for s in 0..k {
        let row = y_bar.row(s);
        if row.iter().any(|&x| x != 0.0) {
            grads.w2.add_scaled_outer(row, phi.phi.row(s), 1.0);
        }
    }
    debug_assert_eq!(y_bar.cols(), d);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators in the shared flat layout.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &EncoderParams) -> Self {
        let n = flatten_params(params).len();
        AdamState { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// One Adam update on the configured episode loss. Returns the new
/// parameters, the advanced optimizer state, and the loss breakdown at the
/// pre-update parameters. A non-finite loss or gradient aborts.
pub fn train_step(
    params: &EncoderParams,
    episode: &EpisodeBatch,
    state: &AdamState,
    adam: &AdamConfig,
    loss: &LossConfig,
) -> Result<(EncoderParams, AdamState, LossBreakdown)> {
    let (grads, breakdown) = encoder_gradients(params, episode, loss)?;
    if !breakdown.total.is_finite() {
        return Err(CoreError::NonFinite {
            context: format!(
                "train_step loss (ce={}, decorrelation={}, ct={:?})",
                breakdown.ce, breakdown.decorrelation, breakdown.ct
            ),
        });
    }
    if !grads.is_finite() {
        return Err(CoreError::NonFinite { context: "train_step gradients".into() });
    }
    let mut flat = flatten_params(params);
    let g = grads.flatten();
    let mut new_state = state.clone();
    new_state.step += 1;
    let t = new_state.step as i32;
    let bias1 = 1.0 - adam.beta1.powi(t);
    let bias2 = 1.0 - adam.beta2.powi(t);
    for i in 0..flat.len() {
        new_state.m[i] = adam.beta1 * new_state.m[i] + (1.0 - adam.beta1) * g[i];
        new_state.v[i] = adam.beta2 * new_state.v[i] + (1.0 - adam.beta2) * g[i] * g[i];
        let m_hat = new_state.m[i] / bias1;
        let v_hat = new_state.v[i] / bias2;
        flat[i] -= adam.learning_rate * m_hat / (v_hat.sqrt() + adam.eps);
    }
    Ok((unflatten_params(params, &flat), new_state, breakdown))
}
