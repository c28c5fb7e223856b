//! `train`: Phase-I continual training; writes the model, the per-step loss
//! curve, and the per-session log.

use std::path::Path;

use compose_core::bench::{build_context, run_continual_training};

use crate::cli_error::CliError;
use crate::config::ExperimentConfig;
use crate::model_io::save_model;
use crate::output::{ensure_dir, fmt, CsvWriter, ManifestBuilder};

pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<(), CliError> {
    config.validate().map_err(CliError::Usage)?;
    ensure_dir(out_dir)?;
    let hash = config.hash();
    let mut manifest = ManifestBuilder::new(&hash, "train");

    let ctx = build_context(&config.bench_config(), config.seed)?;
    let loss = config.loss_config().map_err(CliError::Usage)?;
    let matcher = config.matcher_config().map_err(CliError::Usage)?;
    let outcome =
        run_continual_training(&ctx, &config.training_config(), &loss, &matcher, config.seed)?;

    let model_path = out_dir.join("model.bin");
    save_model(&model_path, &outcome.params, config.dims.k).map_err(CliError::Usage)?;
    manifest.record(&model_path);

    let mut curve = CsvWriter::new(&hash, &["session", "step", "ce", "decorrelation", "ct", "total"]);
    for step in &outcome.steps {
        curve.row(&[
            step.session.to_string(),
            step.step.to_string(),
            fmt(step.ce),
            fmt(step.decorrelation),
            step.ct.map(fmt).unwrap_or_default(),
            fmt(step.total),
        ]);
    }
    let curve_path = out_dir.join("loss_curve.csv");
    curve.write(&curve_path)?;
    manifest.record(&curve_path);

    let mut sessions =
        CsvWriter::new(&hash, &["session", "mean_loss", "seen_accuracy", "base_accuracy"]);
    for log in &outcome.sessions {
        sessions.row(&[
            log.session.to_string(),
            fmt(log.mean_loss),
            fmt(log.seen_accuracy),
            fmt(log.base_accuracy),
        ]);
    }
    let sessions_path = out_dir.join("sessions.csv");
    sessions.write(&sessions_path)?;
    manifest.record(&sessions_path);

    manifest.finish(out_dir)?;
    println!(
        "trained {} sessions, final mean loss {:.6}; model at {}",
        outcome.sessions.len(),
        outcome.sessions.last().map(|s| s.mean_loss).unwrap_or(f64::NAN),
        model_path.display()
    );
    Ok(())
}
