//! Synthetic compositional benchmark: a concept pool of unit directions, a
//! grid renderer that composes scenes from concept pairs (the frozen
//! "backbone" is the renderer itself), the seen/novel-combination/
//! unseen-concept splits, episode sampling, continual sessions with an
//! exemplar replay buffer, and the evaluation metrics.
//!
//! Everything derives from one base seed through tagged
//! [`RngState::derive`] streams, so a run is reproducible end to end and
//! episodes can be evaluated on any worker count with identical results.

use std::collections::BTreeMap;

use crate::encoder::{
    AdamConfig, AdamState, EncoderParams, LossConfig,
};
use crate::episode::{EpisodeBatch, EpisodeImage};
use crate::error::{CoreError, Result};
use crate::matchers::{classify_episode, MatcherConfig};
use crate::slots::{
    aggregate_slots, run_slot_attention, slot_purity, PatchFeatures, SlotAggregates,
    SlotAttentionParams,
};
use crate::tensor::{dot, l2_normalize, Matrix, RngState, NORM_EPS};

// Stream tags for seed derivation.
const STREAM_POOL: u64 = 1;
const STREAM_SPLITS: u64 = 2;
const STREAM_SLOT_PARAMS: u64 = 3;
const STREAM_PARAMS_INIT: u64 = 4;
const STREAM_TRAIN: u64 = 5;
const STREAM_REPLAY: u64 = 6;
const STREAM_SESSION_EVAL: u64 = 7;

// ---------------------------------------------------------------------------
// Concept pool and scenes
// ---------------------------------------------------------------------------

/// Shared pool of concept directions plus one background direction; all unit
/// norm, pairwise cosines bounded by the pool's overlap budget.
#[derive(Debug, Clone)]
pub struct ConceptPool {
    pub concepts: Vec<Vec<f64>>,
    pub background: Vec<f64>,
    /// Within-concept angular noise applied to object patches.
    pub spread: f64,
}

impl ConceptPool {
    pub fn dim(&self) -> usize {
        self.background.len()
    }
}

/// A class is an unordered set of distinct concept ids (pairs by default,
/// triples for the richer-composition analogue).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneClass {
    pub class_id: usize,
    pub concept_ids: Vec<usize>,
}

/// Builds `m` unit concept directions (plus background) with pairwise
/// |cosine| at most `max_overlap`, by rejection sampling.
pub fn build_pool(
    m: usize,
    dim: usize,
    spread: f64,
    max_overlap: f64,
    rng: &mut RngState,
) -> Result<ConceptPool> {
    if m == 0 {
        return Err(CoreError::Invalid("build_pool: need at least one concept".into()));
    }
    const MAX_TRIES: usize = 20_000;
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
    let mut tries = 0;
    while directions.len() < m + 1 {
        tries += 1;
        if tries > MAX_TRIES {
            return Err(CoreError::Invalid(format!(
                "build_pool: could not pack {m} concepts at overlap {max_overlap} in {dim} dims; \
                 lower the count or raise the overlap budget"
            )));
        }
        let candidate = rng.unit_vector(dim);
        if directions.iter().all(|d| dot(d, &candidate).abs() <= max_overlap) {
            directions.push(candidate);
        }
    }
    let background = directions.pop().unwrap();
    Ok(ConceptPool { concepts: directions, background, spread })
}

/// Grid layout and background noise of rendered scenes.
#[derive(Debug, Clone)]
pub struct SceneGeometry {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patches_per_cell: usize,
    /// Noise applied to background patches.
    pub noise: f64,
}

impl SceneGeometry {
    pub fn cells(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn num_patches(&self) -> usize {
        self.cells() * self.patches_per_cell
    }
}

/// Renders one scene: each concept of the class occupies a random distinct
/// grid cell and emits unit patches `normalize(concept + spread * noise)`;
/// the remaining cells emit background patches. Patch labels carry
/// `concept_id + 1`, background 0.
pub fn render_scene(
    pool: &ConceptPool,
    scene: &SceneClass,
    geometry: &SceneGeometry,
    rng: &mut RngState,
) -> Result<PatchFeatures> {
    let cells = geometry.cells();
    if scene.concept_ids.len() > cells {
        return Err(CoreError::Invalid(format!(
            "render_scene: {} concepts do not fit a {}-cell grid",
            scene.concept_ids.len(),
            cells
        )));
    }
    let chosen = rng.choose_distinct(cells, scene.concept_ids.len());
    let mut cell_content: Vec<Option<usize>> = vec![None; cells];
    for (slot, &cell) in chosen.iter().enumerate() {
        cell_content[cell] = Some(scene.concept_ids[slot]);
    }
    let mut rows = Vec::with_capacity(geometry.num_patches());
    let mut labels = Vec::with_capacity(geometry.num_patches());
    for content in &cell_content {
        for _ in 0..geometry.patches_per_cell {
            let (base, sigma, label) = match content {
                Some(cid) => (&pool.concepts[*cid], pool.spread, cid + 1),
                None => (&pool.background, geometry.noise, 0),
            };
            let mut patch = base.clone();
            for x in patch.iter_mut() {
                *x += sigma * rng.next_gaussian();
            }
            rows.push(l2_normalize(&patch, NORM_EPS)?);
            labels.push(label);
        }
    }
    Ok(PatchFeatures::with_labels(Matrix::from_rows(&rows)?, labels))
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// Evaluation split: seen combinations, novel combinations of seen concepts,
/// or combinations of entirely held-out concepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Sys,
    Noc,
}

impl SplitPart {
    pub fn name(&self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Sys => "sys",
            SplitPart::Noc => "noc",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub train_classes: Vec<SceneClass>,
    pub sys_classes: Vec<SceneClass>,
    pub noc_classes: Vec<SceneClass>,
    /// Class ids per session; a partition of the train class ids.
    pub sessions: Vec<Vec<usize>>,
}

impl SplitSpec {
    pub fn part(&self, part: SplitPart) -> &[SceneClass] {
        match part {
            SplitPart::Train => &self.train_classes,
            SplitPart::Sys => &self.sys_classes,
            SplitPart::Noc => &self.noc_classes,
        }
    }

    pub fn classes_of_session(&self, session: usize) -> Vec<SceneClass> {
        self.sessions[session]
            .iter()
            .map(|&id| self.train_classes.iter().find(|c| c.class_id == id).unwrap().clone())
            .collect()
    }

    /// Hard hygiene assertion: held-out-concept classes share no concept id
    /// with the training pool.
    pub fn assert_hygiene(&self) -> Result<()> {
        let mut train_concepts: Vec<usize> = self
            .train_classes
            .iter()
            .chain(&self.sys_classes)
            .flat_map(|c| c.concept_ids.iter().copied())
            .collect();
        train_concepts.sort_unstable();
        train_concepts.dedup();
        for class in &self.noc_classes {
            for cid in &class.concept_ids {
                if train_concepts.binary_search(cid).is_ok() {
                    return Err(CoreError::Invalid(format!(
                        "split hygiene violation: held-out concept {cid} appears in training"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Builds the splits: training classes are a random subset of the pairs over
/// the first `n_train_concepts` concepts, partitioned into sessions; the
/// remaining pairs of those concepts form the novel-combination split; pairs
/// of the held-out concepts form the unseen-concept split.
pub fn make_splits(
    pool: &ConceptPool,
    n_train_concepts: usize,
    n_sessions: usize,
    classes_per_session: usize,
    rng: &mut RngState,
) -> Result<SplitSpec> {
    let m = pool.concepts.len();
    if n_train_concepts >= m {
        return Err(CoreError::Invalid(format!(
            "make_splits: {n_train_concepts} training concepts leave no held-out concepts of {m}"
        )));
    }
    let pairs = |ids: &[usize]| -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for i in 0..ids.len() {
            for j in (i + 1)..ids.len() {
                out.push(vec![ids[i], ids[j]]);
            }
        }
        out
    };
    let train_concepts: Vec<usize> = (0..n_train_concepts).collect();
    let held_out: Vec<usize> = (n_train_concepts..m).collect();
    let mut train_pool = pairs(&train_concepts);
    let needed = n_sessions * classes_per_session;
    if train_pool.len() < needed + 1 {
        return Err(CoreError::Invalid(format!(
            "make_splits: {} concept pairs cannot fill {} train classes plus a novel-combination split",
            train_pool.len(),
            needed
        )));
    }
    let noc_pool = pairs(&held_out);
    if noc_pool.is_empty() {
        return Err(CoreError::Invalid(
            "make_splits: need at least two held-out concepts".into(),
        ));
    }
    rng.shuffle(&mut train_pool);
    let mut next_class_id = 0usize;
    let mut mk = |concept_ids: Vec<usize>| {
        let class = SceneClass { class_id: next_class_id, concept_ids };
        next_class_id += 1;
        class
    };
    let train_classes: Vec<SceneClass> =
        train_pool.drain(..needed).map(&mut mk).collect();
    let sys_classes: Vec<SceneClass> = train_pool.into_iter().map(&mut mk).collect();
    let noc_classes: Vec<SceneClass> = noc_pool.into_iter().map(&mut mk).collect();
    let sessions: Vec<Vec<usize>> = (0..n_sessions)
        .map(|s| {
            train_classes[s * classes_per_session..(s + 1) * classes_per_session]
                .iter()
                .map(|c| c.class_id)
                .collect()
        })
        .collect();
    let spec = SplitSpec { train_classes, sys_classes, noc_classes, sessions };
    spec.assert_hygiene()?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Scene encoder (the frozen stand-in for backbone + slot attention)
// ---------------------------------------------------------------------------

/// Frozen rendering-plus-slot-attention pipeline that turns a class into the
/// slot aggregates the trainable encoder consumes.
#[derive(Debug, Clone)]
pub struct SceneEncoder {
    pub pool: ConceptPool,
    pub slot_params: SlotAttentionParams,
    pub num_slots: usize,
    pub geometry: SceneGeometry,
}

impl SceneEncoder {
    pub fn encode(&self, scene: &SceneClass, rng: &mut RngState) -> Result<SlotAggregates> {
        let patches = render_scene(&self.pool, scene, &self.geometry, rng)?;
        let state = run_slot_attention(&self.slot_params, &patches, self.num_slots, rng)?;
        aggregate_slots(&state.attn, &patches)
    }

    /// Variant that keeps the attention maps and patch labels, for the
    /// purity evaluator.
    pub fn encode_with_attention(
        &self,
        scene: &SceneClass,
        rng: &mut RngState,
    ) -> Result<(SlotAggregates, Matrix, Vec<usize>)> {
        let patches = render_scene(&self.pool, scene, &self.geometry, rng)?;
        let state = run_slot_attention(&self.slot_params, &patches, self.num_slots, rng)?;
        let aggregates = aggregate_slots(&state.attn, &patches)?;
        let labels = patches.patch_labels.clone().expect("renderer labels every patch");
        Ok((aggregates, state.attn, labels))
    }
}

/// How the frozen slot-attention parameters are constructed.
#[derive(Debug, Clone, PartialEq)]
pub enum SlotParamMode {
    /// Constructed so patch clusters win the softmax (`gain` sharpens the
    /// attention logits).
    Oracle { gain: f64 },
    /// Seeded random parameters.
    Random,
}

/// Full benchmark geometry; everything the context builder needs.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub dim: usize,
    pub num_slots: usize,
    pub concepts: usize,
    pub train_concepts: usize,
    pub sessions: usize,
    pub classes_per_session: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patches_per_cell: usize,
    pub spread: f64,
    pub scene_noise: f64,
    pub max_overlap: f64,
    pub slot_iterations: usize,
    pub slot_mode: SlotParamMode,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            dim: 32,
            num_slots: 7,
            concepts: 12,
            train_concepts: 8,
            sessions: 3,
            classes_per_session: 4,
            grid_rows: 2,
            grid_cols: 2,
            patches_per_cell: 4,
            spread: 0.3,
            scene_noise: 0.2,
            max_overlap: 0.45,
            slot_iterations: 3,
            slot_mode: SlotParamMode::Oracle { gain: 6.0 },
        }
    }
}

/// Pool, splits and frozen encoder, all derived from one seed.
#[derive(Debug, Clone)]
pub struct BenchContext {
    pub splits: SplitSpec,
    pub encoder: SceneEncoder,
}

pub fn build_context(config: &BenchConfig, seed: u64) -> Result<BenchContext> {
    let mut pool_rng = RngState::derive(seed, STREAM_POOL);
    let pool = build_pool(
        config.concepts,
        config.dim,
        config.spread,
        config.max_overlap,
        &mut pool_rng,
    )?;
    let mut split_rng = RngState::derive(seed, STREAM_SPLITS);
    let splits = make_splits(
        &pool,
        config.train_concepts,
        config.sessions,
        config.classes_per_session,
        &mut split_rng,
    )?;
    let slot_params = match config.slot_mode {
        SlotParamMode::Oracle { gain } => {
            SlotAttentionParams::oracle(config.dim, config.slot_iterations, gain)
        }
        SlotParamMode::Random => {
            let mut rng = RngState::derive(seed, STREAM_SLOT_PARAMS);
            SlotAttentionParams::seeded(config.dim, config.slot_iterations, &mut rng)
        }
    };
    let encoder = SceneEncoder {
        pool,
        slot_params,
        num_slots: config.num_slots,
        geometry: SceneGeometry {
            grid_rows: config.grid_rows,
            grid_cols: config.grid_cols,
            patches_per_cell: config.patches_per_cell,
            noise: config.scene_noise,
        },
    };
    Ok(BenchContext { splits, encoder })
}

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

/// Samples an N-way episode from `classes` with fresh renders for every
/// support and query image.
pub fn sample_episode(
    classes: &[SceneClass],
    way: usize,
    shot: usize,
    queries_per_class: usize,
    encoder: &SceneEncoder,
    rng: &mut RngState,
) -> Result<EpisodeBatch> {
    if classes.len() < way {
        return Err(CoreError::Invalid(format!(
            "sample_episode: {} classes cannot fill a {way}-way episode",
            classes.len()
        )));
    }
    let picks = rng.choose_distinct(classes.len(), way);
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * queries_per_class);
    for &pick in &picks {
        let class = &classes[pick];
        for _ in 0..shot {
            support.push(EpisodeImage {
                aggregates: encoder.encode(class, rng)?,
                class_id: class.class_id,
            });
        }
        for _ in 0..queries_per_class {
            query.push(EpisodeImage {
                aggregates: encoder.encode(class, rng)?,
                class_id: class.class_id,
            });
        }
    }
    let episode = EpisodeBatch { support, query, way, shot, queries_per_class };
    episode.validate()?;
    Ok(episode)
}

// ---------------------------------------------------------------------------
// Replay buffer
// ---------------------------------------------------------------------------

/// Stores up to `capacity` slot-aggregate exemplars per class. Everything
/// upstream of the aggregates is frozen, so aggregates are a sufficient
/// exemplar representation.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    per_class: BTreeMap<usize, Vec<SlotAggregates>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity, per_class: BTreeMap::new() }
    }

    pub fn store(&mut self, class_id: usize, exemplar: SlotAggregates) {
        let slot = self.per_class.entry(class_id).or_default();
        if slot.len() < self.capacity {
            slot.push(exemplar);
        }
    }

    pub fn classes(&self) -> Vec<usize> {
        self.per_class.keys().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.per_class.is_empty()
    }

    /// Draws `count` exemplars of a class, distinct while the stock lasts.
    pub fn draw(&self, class_id: usize, count: usize, rng: &mut RngState) -> Vec<SlotAggregates> {
        let stock = match self.per_class.get(&class_id) {
            Some(s) if !s.is_empty() => s,
            _ => return Vec::new(),
        };
        if count <= stock.len() {
            rng.choose_distinct(stock.len(), count)
                .into_iter()
                .map(|i| stock[i].clone())
                .collect()
        } else {
            (0..count).map(|_| stock[rng.gen_range(stock.len())].clone()).collect()
        }
    }
}

// ---------------------------------------------------------------------------
// Continual training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub steps_per_session: usize,
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    pub replay_per_class: usize,
    pub tau_init: f64,
    pub hidden_dim: usize,
    /// Episodes per session-level accuracy probe.
    pub session_eval_episodes: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 3e-3,
            steps_per_session: 120,
            way: 4,
            shot: 2,
            queries_per_class: 3,
            replay_per_class: 20,
            tau_init: 10.0,
            hidden_dim: 64,
            session_eval_episodes: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionLog {
    pub session: usize,
    pub mean_loss: f64,
    /// Few-shot accuracy over all classes seen so far.
    pub seen_accuracy: f64,
    /// Few-shot accuracy over the first session's classes.
    pub base_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct StepLoss {
    pub session: usize,
    pub step: usize,
    pub ce: f64,
    pub decorrelation: f64,
    pub ct: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub sessions: Vec<SessionLog>,
    pub steps: Vec<StepLoss>,
}

/// Builds one training episode for a session: when the replay buffer has
/// prior-session classes, half the ways come from the buffer's stored
/// aggregates and half are freshly rendered from the current session.
fn training_episode(
    session_classes: &[SceneClass],
    replay: &ReplayBuffer,
    encoder: &SceneEncoder,
    cfg: &TrainingConfig,
    rng: &mut RngState,
) -> Result<EpisodeBatch> {
    let replay_classes = replay.classes();
    let fresh_cap = session_classes.len();
    let mut n_replay = if replay_classes.is_empty() { 0 } else { cfg.way / 2 };
    n_replay = n_replay.min(replay_classes.len());
    let n_fresh = (cfg.way - n_replay).min(fresh_cap);

    let mut support = Vec::new();
    let mut query = Vec::new();
    for &pick in rng.choose_distinct(fresh_cap, n_fresh).iter() {
        let class = &session_classes[pick];
        for _ in 0..cfg.shot {
            support.push(EpisodeImage {
                aggregates: encoder.encode(class, rng)?,
                class_id: class.class_id,
            });
        }
        for _ in 0..cfg.queries_per_class {
            query.push(EpisodeImage {
                aggregates: encoder.encode(class, rng)?,
                class_id: class.class_id,
            });
        }
    }
    for &pick in rng.choose_distinct(replay_classes.len(), n_replay).iter() {
        let class_id = replay_classes[pick];
        let drawn = replay.draw(class_id, cfg.shot + cfg.queries_per_class, rng);
        if drawn.len() < cfg.shot + 1 {
            continue;
        }
        for (i, aggregates) in drawn.into_iter().enumerate() {
            let img = EpisodeImage { aggregates, class_id };
            if i < cfg.shot {
                support.push(img);
            } else {
                query.push(img);
            }
        }
    }
    let episode = EpisodeBatch {
        support,
        query,
        way: n_fresh + n_replay,
        shot: cfg.shot,
        queries_per_class: cfg.queries_per_class,
    };
    episode.validate()?;
    Ok(episode)
}

fn probe_accuracy(
    params: &EncoderParams,
    encoder: &SceneEncoder,
    classes: &[SceneClass],
    episodes: usize,
    way: usize,
    shot: usize,
    queries: usize,
    matcher: &MatcherConfig,
    rng: &mut RngState,
) -> Result<f64> {
    let way = way.min(classes.len());
    let mut total_correct = 0usize;
    let mut total_query = 0usize;
    for _ in 0..episodes {
        let episode = sample_episode(classes, way, shot, queries, encoder, rng)?;
        let outcome = classify_episode(&episode, params, matcher)?;
        total_correct += outcome.n_correct;
        total_query += outcome.queries.len();
    }
    Ok(total_correct as f64 / total_query.max(1) as f64)
}

/// Runs the continual protocol: sessions in order, episodic updates on
/// current-session classes mixed with replayed exemplars, exemplar storage
/// after each session, per-session loss and accuracy logs. The frozen
/// renderer and slot parameters are never touched.
pub fn run_continual_training(
    ctx: &BenchContext,
    train: &TrainingConfig,
    loss: &LossConfig,
    matcher: &MatcherConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut init_rng = RngState::derive(seed, STREAM_PARAMS_INIT);
    let mut params = EncoderParams::init(
        ctx.encoder.pool.dim(),
        train.hidden_dim,
        train.tau_init,
        &mut init_rng,
    );
    let adam = AdamConfig::with_lr(train.learning_rate);
    let mut adam_state = AdamState::new(&params);
    let mut replay = ReplayBuffer::new(train.replay_per_class);
    let mut sessions = Vec::new();
    let mut steps = Vec::new();
    let base_classes = ctx.splits.classes_of_session(0);

    for session in 0..ctx.splits.sessions.len() {
        let session_classes = ctx.splits.classes_of_session(session);
        let mut loss_sum = 0.0;
        for step in 0..train.steps_per_session {
            let mut rng = RngState::derive(
                seed,
                STREAM_TRAIN + (session as u64) * 1_000_000 + step as u64,
            );
            let episode =
                training_episode(&session_classes, &replay, &ctx.encoder, train, &mut rng)?;
            let (next, next_state, breakdown) =
                crate::encoder::train_step(&params, &episode, &adam_state, &adam, loss)?;
            params = next;
            adam_state = next_state;
            loss_sum += breakdown.total;
            steps.push(StepLoss {
                session,
                step,
                ce: breakdown.ce,
                decorrelation: breakdown.decorrelation,
                ct: breakdown.ct,
                total: breakdown.total,
            });
        }
        // Store exemplars for this session's classes.
        for class in &session_classes {
            let mut rng = RngState::derive(
                seed,
                STREAM_REPLAY + (session as u64) * 1_000 + class.class_id as u64,
            );
            for _ in 0..train.replay_per_class {
                replay.store(class.class_id, ctx.encoder.encode(class, &mut rng)?);
            }
        }
        // Session probes.
        let seen: Vec<SceneClass> = (0..=session)
            .flat_map(|s| ctx.splits.classes_of_session(s))
            .collect();
        let mut eval_rng =
            RngState::derive(seed, STREAM_SESSION_EVAL + session as u64);
        let seen_accuracy = probe_accuracy(
            &params,
            &ctx.encoder,
            &seen,
            train.session_eval_episodes,
            train.way.max(2),
            train.shot,
            train.queries_per_class,
            matcher,
            &mut eval_rng,
        )?;
        let base_accuracy = probe_accuracy(
            &params,
            &ctx.encoder,
            &base_classes,
            train.session_eval_episodes,
            train.way.max(2),
            train.shot,
            train.queries_per_class,
            matcher,
            &mut eval_rng,
        )?;
        sessions.push(SessionLog {
            session,
            mean_loss: loss_sum / train.steps_per_session as f64,
            seen_accuracy,
            base_accuracy,
        });
    }
    Ok(TrainOutcome { params, sessions, steps })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub n_correct: usize,
    pub n_query: usize,
}

impl EpisodeRecord {
    pub fn accuracy(&self) -> f64 {
        self.n_correct as f64 / self.n_query.max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct SplitEvaluation {
    pub accuracy: f64,
    /// Normal-approximation 95% half-width over episode accuracies.
    pub ci95: f64,
    pub records: Vec<EpisodeRecord>,
}

#[derive(Debug, Clone)]
pub struct EvalProtocol {
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    pub workers: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol { episodes: 150, way: 5, shot: 1, queries_per_class: 5, workers: 1 }
    }
}

/// Evaluates a trained encoder on one split. Episode `i` always uses the rng
/// stream derived from (`stream_seed`, `i`), so results are identical for
/// any worker count and merge in episode order.
pub fn evaluate_split(
    params: &EncoderParams,
    encoder: &SceneEncoder,
    classes: &[SceneClass],
    protocol: &EvalProtocol,
    matcher: &MatcherConfig,
    stream_seed: u64,
) -> Result<SplitEvaluation> {
    if protocol.episodes == 0 {
        return Err(CoreError::Invalid("evaluate_split: zero episodes".into()));
    }
    let way = protocol.way.min(classes.len());
    let run_episode = |index: usize| -> Result<EpisodeRecord> {
        let mut rng = RngState::derive(stream_seed, index as u64);
        let episode = sample_episode(
            classes,
            way,
            protocol.shot,
            protocol.queries_per_class,
            encoder,
            &mut rng,
        )?;
        let outcome = classify_episode(&episode, params, matcher)?;
        Ok(EpisodeRecord {
            episode: index,
            n_correct: outcome.n_correct,
            n_query: outcome.queries.len(),
        })
    };

    let workers = protocol.workers.max(1).min(protocol.episodes);
    let records: Vec<EpisodeRecord> = if workers == 1 {
        (0..protocol.episodes).map(run_episode).collect::<Result<_>>()?
    } else {
        let mut slots: Vec<Option<Result<EpisodeRecord>>> =
            (0..protocol.episodes).map(|_| None).collect();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for w in 0..workers {
                let run = &run_episode;
                handles.push(scope.spawn(move || {
                    let mut out = Vec::new();
                    let mut i = w;
                    while i < protocol.episodes {
                        out.push((i, run(i)));
                        i += workers;
                    }
                    out
                }));
            }
            for handle in handles {
                for (i, res) in handle.join().expect("evaluation worker panicked") {
                    slots[i] = Some(res);
                }
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("every episode index filled"))
            .collect::<Result<_>>()?
    };

    let accs: Vec<f64> = records.iter().map(|r| r.accuracy()).collect();
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let ci95 = if accs.len() > 1 {
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0);
        1.96 * (var / n).sqrt()
    } else {
        0.0
    };
    Ok(SplitEvaluation { accuracy: mean, ci95, records })
}

/// Slot purity over freshly rendered scenes from `classes`.
pub fn purity_probe(
    encoder: &SceneEncoder,
    classes: &[SceneClass],
    images: usize,
    rng: &mut RngState,
) -> Result<f64> {
    if images == 0 {
        return Err(CoreError::Invalid("purity_probe: zero images".into()));
    }
    let mut attn_batch = Vec::with_capacity(images);
    let mut label_batch = Vec::with_capacity(images);
    for i in 0..images {
        let class = &classes[i % classes.len()];
        let (_, attn, labels) = encoder.encode_with_attention(class, rng)?;
        attn_batch.push(attn);
        label_batch.push(labels);
    }
    slot_purity(&attn_batch, &label_batch)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Harmonic mean `n / sum(1/v)`; every value must be positive.
pub fn harmonic_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(CoreError::EmptyInput("harmonic_mean: no values".into()));
    }
    let mut denom = 0.0;
    for &v in values {
        if v <= 0.0 {
            return Err(CoreError::Invalid(format!(
                "harmonic_mean: non-positive value {v}"
            )));
        }
        denom += 1.0 / v;
    }
    Ok(values.len() as f64 / denom)
}

/// Aggregated evaluation metrics: per-split results, their harmonic mean,
/// the mean off-diagonal correlation of the trained projections, and the
/// base-class forgetting over the continual run.
#[derive(Debug, Clone)]
pub struct MetricsTable {
    /// (split name, evaluation) in evaluation order.
    pub splits: Vec<(&'static str, SplitEvaluation)>,
    pub h_a: f64,
    pub mean_off_diagonal: Option<f64>,
    pub forgetting: Option<f64>,
}

impl MetricsTable {
    /// Builds the table; `h_a` is the harmonic mean of the split accuracies
    /// by construction.
    pub fn new(
        splits: Vec<(&'static str, SplitEvaluation)>,
        mean_off_diagonal: Option<f64>,
        forgetting: Option<f64>,
    ) -> Result<Self> {
        let accs: Vec<f64> = splits.iter().map(|(_, e)| e.accuracy).collect();
        let h_a = harmonic_mean(&accs)?;
        Ok(MetricsTable { splits, h_a, mean_off_diagonal, forgetting })
    }
}

/// Drop in first-session-class accuracy from the first to the last session.
pub fn forgetting_factor(sessions: &[SessionLog]) -> Result<f64> {
    if sessions.len() < 2 {
        return Err(CoreError::Invalid(
            "forgetting_factor needs at least two sessions".into(),
        ));
    }
    Ok(sessions[0].base_accuracy - sessions[sessions.len() - 1].base_accuracy)
}
