//! `purity`: slot purity of the frozen attention stage on freshly rendered
//! scenes, per split.

use std::path::Path;

use compose_core::bench::{build_context, purity_probe, SplitPart};
use compose_core::tensor::RngState;

use crate::cli_error::CliError;
use crate::config::ExperimentConfig;
use crate::output::{ensure_dir, fmt, CsvWriter, ManifestBuilder};

pub fn run(config: &ExperimentConfig, out_dir: &Path, images: usize) -> Result<(), CliError> {
    config.validate().map_err(CliError::Usage)?;
    if images == 0 {
        return Err(CliError::Usage("purity needs at least one image".into()));
    }
    ensure_dir(out_dir)?;
    let hash = config.hash();
    let mut manifest = ManifestBuilder::new(&hash, "purity");
    let ctx = build_context(&config.bench_config(), config.seed)?;

    let mut csv = CsvWriter::new(&hash, &["split", "images", "purity"]);
    for (part, stream) in
        [(SplitPart::Train, 301u64), (SplitPart::Sys, 302), (SplitPart::Noc, 303)]
    {
        let mut rng = RngState::derive(config.seed, stream);
        let rho = purity_probe(&ctx.encoder, ctx.splits.part(part), images, &mut rng)?;
        csv.row(&[part.name().to_string(), images.to_string(), fmt(rho)]);
        println!("{}: purity {rho:.4} over {images} images", part.name());
    }
    let path = out_dir.join("purity.csv");
    csv.write(&path)?;
    manifest.record(&path);
    manifest.finish(out_dir)?;
    Ok(())
}
