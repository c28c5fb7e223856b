//! Experiment configuration: one strict TOML file drives every subcommand.
//! Unknown keys are fatal — a silent typo in a config is the fastest way to
//! report numbers from the wrong experiment. The parsed config round-trips
//! losslessly and its canonical serialization is hashed into every output.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use compose_core::bench::{BenchConfig, EvalProtocol, SlotParamMode, TrainingConfig};
use compose_core::encoder::{
    CtConfig, DecorrelationConfig, DecorrelationKind, LossConfig, PrototypeGradMode,
};
use compose_core::matchers::{CouplingKind, MatcherConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default)]
    pub dims: Dims,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub matcher: MatcherSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub benchmark: BenchmarkSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub gradlab: GradlabSection,
}

fn default_seed() -> u64 {
    42
}

fn default_out_dir() -> String {
    "runs".into()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: default_seed(),
            out_dir: default_out_dir(),
            dims: Dims::default(),
            loss: LossSection::default(),
            matcher: MatcherSection::default(),
            training: TrainingSection::default(),
            benchmark: BenchmarkSection::default(),
            eval: EvalSection::default(),
            gradlab: GradlabSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Dims {
    pub d: usize,
    pub k: usize,
    pub h: usize,
    pub kappa: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims { d: 32, k: 7, h: 64, kappa: 4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda_d: f64,
    /// one of: none, cross_correlation, vicreg_variance, spectral
    pub decorrelation: String,
    pub gamma_hinge: f64,
    pub std_floor: f64,
    /// 0 disables the training-time matching term; 0.5 is the
    /// matching-trained variant's default mixture.
    pub ct_mix: f64,
    /// flow_through or stop_gradient
    pub prototype_gradient: String,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            lambda_d: 0.02,
            decorrelation: "cross_correlation".into(),
            gamma_hinge: 1.0,
            std_floor: 1e-6,
            ct_mix: 0.0,
            prototype_gradient: "flow_through".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MatcherSection {
    /// one of: hard_chamfer, soft_chamfer, mutual_nn, sinkhorn, hungarian
    pub kind: String,
    pub beta: f64,
    pub epsilon: f64,
    pub sinkhorn_max_iters: usize,
    pub sinkhorn_tol: f64,
    pub gamma_blend: f64,
}

impl Default for MatcherSection {
    fn default() -> Self {
        MatcherSection {
            kind: "hard_chamfer".into(),
            beta: 10.0,
            epsilon: 0.1,
            sinkhorn_max_iters: 1000,
            sinkhorn_tol: 1e-9,
            gamma_blend: 0.3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub learning_rate: f64,
    pub steps_per_session: usize,
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    pub replay_per_class: usize,
    pub tau_init: f64,
    pub session_eval_episodes: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainingConfig::default();
        TrainingSection {
            learning_rate: t.learning_rate,
            steps_per_session: t.steps_per_session,
            way: t.way,
            shot: t.shot,
            queries_per_class: t.queries_per_class,
            replay_per_class: t.replay_per_class,
            tau_init: t.tau_init,
            session_eval_episodes: t.session_eval_episodes,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSection {
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
    /// oracle or random
    pub slot_params: String,
    pub oracle_gain: f64,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        let b = BenchConfig::default();
        BenchmarkSection {
            concepts: b.concepts,
            train_concepts: b.train_concepts,
            sessions: b.sessions,
            classes_per_session: b.classes_per_session,
            grid_rows: b.grid_rows,
            grid_cols: b.grid_cols,
            patches_per_cell: b.patches_per_cell,
            spread: b.spread,
            scene_noise: b.scene_noise,
            max_overlap: b.max_overlap,
            slot_iterations: b.slot_iterations,
            slot_params: "oracle".into(),
            oracle_gain: 6.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalProtocol::default();
        EvalSection {
            episodes: e.episodes,
            way: e.way,
            shot: e.shot,
            queries_per_class: e.queries_per_class,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GradlabSection {
    pub alignment_episodes: usize,
    pub rank_tolerance: f64,
    pub epsilons: Vec<f64>,
    pub rank_configs: usize,
    pub gradient_episodes: usize,
}

impl Default for GradlabSection {
    fn default() -> Self {
        GradlabSection {
            alignment_episodes: 300,
            rank_tolerance: 1e-6,
            epsilons: vec![1.0, 0.3, 0.1, 0.03, 0.01, 100.0],
            rank_configs: 100,
            gradient_episodes: 10,
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| format!("config parse error: {e}"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization; embedded in every output
    /// file so mixed-config artifacts are detectable.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            dim: self.dims.d,
            num_slots: self.dims.k,
            concepts: self.benchmark.concepts,
            train_concepts: self.benchmark.train_concepts,
            sessions: self.benchmark.sessions,
            classes_per_session: self.benchmark.classes_per_session,
            grid_rows: self.benchmark.grid_rows,
            grid_cols: self.benchmark.grid_cols,
            patches_per_cell: self.benchmark.patches_per_cell,
            spread: self.benchmark.spread,
            scene_noise: self.benchmark.scene_noise,
            max_overlap: self.benchmark.max_overlap,
            slot_iterations: self.benchmark.slot_iterations,
            slot_mode: match self.benchmark.slot_params.as_str() {
                "oracle" => SlotParamMode::Oracle { gain: self.benchmark.oracle_gain },
                "random" => SlotParamMode::Random,
                other => {
                    // Caught by validate(); default keeps this infallible.
                    let _ = other;
                    SlotParamMode::Oracle { gain: self.benchmark.oracle_gain }
                }
            },
        }
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            learning_rate: self.training.learning_rate,
            steps_per_session: self.training.steps_per_session,
            way: self.training.way,
            shot: self.training.shot,
            queries_per_class: self.training.queries_per_class,
            replay_per_class: self.training.replay_per_class,
            tau_init: self.training.tau_init,
            hidden_dim: self.dims.h,
            session_eval_episodes: self.training.session_eval_episodes,
        }
    }

    pub fn decorrelation_config(&self) -> Result<DecorrelationConfig, String> {
        let kind = match self.loss.decorrelation.as_str() {
            "none" => DecorrelationKind::None,
            "cross_correlation" => DecorrelationKind::CrossCorrelation,
            "vicreg_variance" => DecorrelationKind::VicregVariance,
            "spectral" => DecorrelationKind::Spectral,
            other => return Err(format!("loss.decorrelation: unknown kind '{other}'")),
        };
        Ok(DecorrelationConfig {
            kind,
            lambda_d: self.loss.lambda_d,
            gamma_hinge: self.loss.gamma_hinge,
            std_floor: self.loss.std_floor,
        })
    }

    pub fn loss_config(&self) -> Result<LossConfig, String> {
        let decorrelation = self.decorrelation_config()?;
        let prototype_grad = match self.loss.prototype_gradient.as_str() {
            "flow_through" => PrototypeGradMode::FlowThrough,
            "stop_gradient" => PrototypeGradMode::StopGradient,
            other => return Err(format!("loss.prototype_gradient: unknown mode '{other}'")),
        };
        let ct = if self.loss.ct_mix > 0.0 {
            Some(CtConfig { kappa: self.dims.kappa, mix: self.loss.ct_mix })
        } else {
            None
        };
        Ok(LossConfig { decorrelation, ct, prototype_grad })
    }

    pub fn coupling_kind(&self) -> Result<CouplingKind, String> {
        Ok(match self.matcher.kind.as_str() {
            "hard_chamfer" => CouplingKind::HardChamfer,
            "soft_chamfer" => CouplingKind::SoftChamfer { beta: self.matcher.beta },
            "mutual_nn" => CouplingKind::MutualNearest,
            "sinkhorn" => CouplingKind::Sinkhorn {
                epsilon: self.matcher.epsilon,
                max_iters: self.matcher.sinkhorn_max_iters,
                tol: self.matcher.sinkhorn_tol,
            },
            "hungarian" => CouplingKind::Hungarian,
            other => return Err(format!("matcher.kind: unknown matcher '{other}'")),
        })
    }

    pub fn matcher_config(&self) -> Result<MatcherConfig, String> {
        Ok(MatcherConfig {
            kind: self.coupling_kind()?,
            kappa: self.dims.kappa,
            gamma_blend: self.matcher.gamma_blend,
        })
    }

    pub fn eval_protocol(&self, workers: usize, episodes_override: Option<usize>) -> EvalProtocol {
        EvalProtocol {
            episodes: episodes_override.unwrap_or(self.eval.episodes),
            way: self.eval.way,
            shot: self.eval.shot,
            queries_per_class: self.eval.queries_per_class,
            workers,
        }
    }

    /// Field-level validation beyond what serde enforces.
    pub fn validate(&self) -> Result<(), String> {
        if self.dims.d == 0 || self.dims.k == 0 || self.dims.h == 0 || self.dims.kappa == 0 {
            return Err("dims: every dimension must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.matcher.gamma_blend) {
            return Err(format!(
                "matcher.gamma_blend must lie in [0, 1], got {}",
                self.matcher.gamma_blend
            ));
        }
        if self.loss.lambda_d < 0.0 {
            return Err(format!("loss.lambda_d must be non-negative, got {}", self.loss.lambda_d));
        }
        if !(0.0..=1.0).contains(&self.loss.ct_mix) {
            return Err(format!("loss.ct_mix must lie in [0, 1], got {}", self.loss.ct_mix));
        }
        if self.matcher.epsilon <= 0.0 {
            return Err(format!("matcher.epsilon must be positive, got {}", self.matcher.epsilon));
        }
        if self.training.tau_init <= 0.0 {
            return Err(format!(
                "training.tau_init must be positive, got {}",
                self.training.tau_init
            ));
        }
        match self.benchmark.slot_params.as_str() {
            "oracle" | "random" => {}
            other => return Err(format!("benchmark.slot_params: unknown mode '{other}'")),
        }
        // Exercise the enum mappings so typos surface at load time.
        self.loss_config()?;
        self.matcher_config()?;
        Ok(())
    }
}
