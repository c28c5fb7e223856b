//! `sweep`: one evaluation per value of a single parameter, merged into a
//! long-format table. Training-side parameters retrain per value; inference
//! parameters reuse one trained model.

use std::path::Path;

use compose_core::bench::{
    build_context, evaluate_split, harmonic_mean, run_continual_training, SplitPart,
};
use compose_core::tensor::RngState;

use crate::cli_error::CliError;
use crate::config::ExperimentConfig;
use crate::output::{ensure_dir, fmt, CsvWriter, ManifestBuilder};

const SPLIT_STREAMS: [(SplitPart, u64); 3] =
    [(SplitPart::Train, 101), (SplitPart::Sys, 102), (SplitPart::Noc, 103)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SweepParam {
    LambdaD,
    GammaBlend,
    Shots,
    MatcherKind,
    Beta,
    Epsilon,
}

impl SweepParam {
    fn parse(name: &str) -> Result<Self, CliError> {
        Ok(match name {
            "lambda_d" => SweepParam::LambdaD,
            "gamma_blend" => SweepParam::GammaBlend,
            "shots" => SweepParam::Shots,
            "matcher_kind" => SweepParam::MatcherKind,
            "beta" => SweepParam::Beta,
            "epsilon" => SweepParam::Epsilon,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown sweep parameter '{other}' (expected lambda_d, gamma_blend, shots, \
                     matcher_kind, beta, or epsilon)"
                )))
            }
        })
    }

    /// Does a new value require retraining?
    fn retrains(&self) -> bool {
        matches!(self, SweepParam::LambdaD)
    }
}

fn apply(param: SweepParam, value: &str, config: &ExperimentConfig) -> Result<ExperimentConfig, CliError> {
    let mut out = config.clone();
    let parse_f64 = || -> Result<f64, CliError> {
        value
            .parse::<f64>()
            .map_err(|_| CliError::Usage(format!("sweep value '{value}' is not a number")))
    };
    match param {
        SweepParam::LambdaD => out.loss.lambda_d = parse_f64()?,
        SweepParam::GammaBlend => out.matcher.gamma_blend = parse_f64()?,
        SweepParam::Shots => {
            out.eval.shot = value
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("sweep value '{value}' is not a count")))?
        }
        SweepParam::MatcherKind => out.matcher.kind = value.to_string(),
        SweepParam::Beta => {
            out.matcher.beta = parse_f64()?;
            out.matcher.kind = "soft_chamfer".into();
        }
        SweepParam::Epsilon => {
            out.matcher.epsilon = parse_f64()?;
            out.matcher.kind = "sinkhorn".into();
        }
    }
    out.validate().map_err(CliError::Usage)?;
    Ok(out)
}

pub fn run(
    config: &ExperimentConfig,
    out_dir: &Path,
    param_name: &str,
    values: &[String],
    workers: usize,
    episodes_override: Option<usize>,
) -> Result<(), CliError> {
    config.validate().map_err(CliError::Usage)?;
    if values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    ensure_dir(out_dir)?;
    let param = SweepParam::parse(param_name)?;
    let hash = config.hash();
    let mut manifest = ManifestBuilder::new(&hash, "sweep");

    // Train once when every swept value shares the training configuration.
    let base_model = if param.retrains() {
        None
    } else {
        let ctx = build_context(&config.bench_config(), config.seed)?;
        let loss = config.loss_config().map_err(CliError::Usage)?;
        let matcher = config.matcher_config().map_err(CliError::Usage)?;
        let outcome = run_continual_training(
            &ctx,
            &config.training_config(),
            &loss,
            &matcher,
            config.seed,
        )?;
        Some(outcome.params)
    };

    let mut table = CsvWriter::new(
        &hash,
        &["parameter", "value", "split", "accuracy", "ci95", "episodes"],
    );
    for value in values {
        let variant = apply(param, value, config)?;
        let ctx = build_context(&variant.bench_config(), variant.seed)?;
        let params = match &base_model {
            Some(p) => p.clone(),
            None => {
                let loss = variant.loss_config().map_err(CliError::Usage)?;
                let matcher = variant.matcher_config().map_err(CliError::Usage)?;
                run_continual_training(
                    &ctx,
                    &variant.training_config(),
                    &loss,
                    &matcher,
                    variant.seed,
                )?
                .params
            }
        };
        let matcher = variant.matcher_config().map_err(CliError::Usage)?;
        let protocol = variant.eval_protocol(workers, episodes_override);
        let mut split_accs = Vec::new();
        for (part, stream) in SPLIT_STREAMS {
            let evaluation = evaluate_split(
                &params,
                &ctx.encoder,
                ctx.splits.part(part),
                &protocol,
                &matcher,
                RngState::derive(variant.seed, stream).seed(),
            )?;
            table.row(&[
                param_name.to_string(),
                value.clone(),
                part.name().to_string(),
                fmt(evaluation.accuracy),
                fmt(evaluation.ci95),
                evaluation.records.len().to_string(),
            ]);
            split_accs.push(evaluation.accuracy);
        }
        let h_a = harmonic_mean(&split_accs)?;
        table.row(&[
            param_name.to_string(),
            value.clone(),
            "h_a".to_string(),
            fmt(h_a),
            String::new(),
            String::new(),
        ]);
        println!("{param_name}={value}: h_a {h_a:.4}");
    }
    let path = out_dir.join("sweep.csv");
    table.write(&path)?;
    manifest.record(&path);
    manifest.finish(out_dir)?;
    Ok(())
}
