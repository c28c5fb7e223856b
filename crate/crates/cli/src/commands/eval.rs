//! `eval`: Phase-II evaluation of a trained model on the benchmark splits,
//! with per-episode records and a summary table carrying the harmonic mean
//! and the mean off-diagonal correlation of the trained projections.

use std::path::Path;

use compose_core::bench::{build_context, evaluate_split, sample_episode, MetricsTable, SplitPart};
use compose_core::encoder::{correlation_matrix, encode_image, off_diag_mean, EncoderParams};
use compose_core::tensor::{Matrix, RngState};

use crate::cli_error::CliError;
use crate::config::ExperimentConfig;
use crate::model_io::load_model;
use crate::output::{ensure_dir, fmt, CsvWriter, ManifestBuilder};

const SPLIT_STREAMS: [(SplitPart, u64); 3] =
    [(SplitPart::Train, 101), (SplitPart::Sys, 102), (SplitPart::Noc, 103)];

fn mean_off_diagonal(
    params: &EncoderParams,
    ctx: &compose_core::bench::BenchContext,
    config: &ExperimentConfig,
) -> Result<f64, CliError> {
    let mut rng = RngState::derive(config.seed, 104);
    let way = config.eval.way.min(ctx.splits.train_classes.len());
    let episode =
        sample_episode(&ctx.splits.train_classes, way, 5, 5, &ctx.encoder, &mut rng)?;
    let mut rows = Vec::new();
    for img in episode.support.iter().chain(&episode.query) {
        let fw = encode_image(params, &img.aggregates)?;
        for s in 0..fw.embeddings.y_raw.rows() {
            rows.push(fw.embeddings.y_raw.row(s).to_vec());
        }
    }
    let pooled = Matrix::from_rows(&rows)?;
    Ok(off_diag_mean(&correlation_matrix(&pooled, config.loss.std_floor)?))
}

pub fn run(
    config: &ExperimentConfig,
    out_dir: &Path,
    model_path: &Path,
    workers: usize,
    episodes_override: Option<usize>,
) -> Result<(), CliError> {
    config.validate().map_err(CliError::Usage)?;
    ensure_dir(out_dir)?;
    let hash = config.hash();
    let mut manifest = ManifestBuilder::new(&hash, "eval");

    let model = load_model(model_path).map_err(CliError::Usage)?;
    if model.num_slots != config.dims.k {
        return Err(CliError::Usage(format!(
            "model was trained with {} slots but the config requests {}",
            model.num_slots, config.dims.k
        )));
    }
    let ctx = build_context(&config.bench_config(), config.seed)?;
    let matcher = config.matcher_config().map_err(CliError::Usage)?;
    let protocol = config.eval_protocol(workers, episodes_override);

    let mut episode_rows = CsvWriter::new(
        &hash,
        &["split", "episode", "n_correct", "n_query", "accuracy"],
    );
    let mut splits = Vec::new();
    for (part, stream) in SPLIT_STREAMS {
        let evaluation = evaluate_split(
            &model.params,
            &ctx.encoder,
            ctx.splits.part(part),
            &protocol,
            &matcher,
            RngState::derive(config.seed, stream).seed(),
        )?;
        for record in &evaluation.records {
            episode_rows.row(&[
                part.name().to_string(),
                record.episode.to_string(),
                record.n_correct.to_string(),
                record.n_query.to_string(),
                fmt(record.accuracy()),
            ]);
        }
        println!(
            "{}: accuracy {:.4} +- {:.4} over {} episodes",
            part.name(),
            evaluation.accuracy,
            evaluation.ci95,
            evaluation.records.len()
        );
        splits.push((part.name(), evaluation));
    }
    let c_off = mean_off_diagonal(&model.params, &ctx, config)?;
    let table = MetricsTable::new(splits, Some(c_off), None)?;
    println!("h_a: {:.4}, mean off-diagonal correlation: {:.4}", table.h_a, c_off);

    let mut summary = CsvWriter::new(&hash, &["split", "accuracy", "ci95", "episodes"]);
    for (name, evaluation) in &table.splits {
        summary.row(&[
            name.to_string(),
            fmt(evaluation.accuracy),
            fmt(evaluation.ci95),
            evaluation.records.len().to_string(),
        ]);
    }
    summary.row(&["h_a".to_string(), fmt(table.h_a), String::new(), String::new()]);
    summary.row(&["c_off_mean".to_string(), fmt(c_off), String::new(), String::new()]);

    let episodes_path = out_dir.join("episodes.csv");
    episode_rows.write(&episodes_path)?;
    manifest.record(&episodes_path);
    let summary_path = out_dir.join("summary.csv");
    summary.write(&summary_path)?;
    manifest.record(&summary_path);
    manifest.finish(out_dir)?;
    Ok(())
}
