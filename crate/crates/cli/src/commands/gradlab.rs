//! `gradlab`: the numerical check battery for the gradient-geometry and
//! decorrelation claims, plus the Sinkhorn limit table and alignment/rank
//! reports. Exits 1 naming the first failing check.

use std::path::Path;

use compose_core::encoder::{
    compute_loss, encoder_gradients, decorrelation_gradient, flatten_params, unflatten_params,
    CtConfig, DecorrelationConfig, DecorrelationKind, EncoderParams, LossConfig,
};
use compose_core::episode::{EpisodeBatch, EpisodeImage};
use compose_core::gradlab::{
    alignment_metric, cc_rebase, ce_rotation_check, ce_scale_check, chamfer_grad, field_rank,
    holistic_grad, margin_configuration, sinkhorn_limit_probe, spectral_floor_check,
    vicreg_ce_conflict, GradReference, ScoreKind,
};
use compose_core::slots::SlotAggregates;
use compose_core::tensor::{dot, finite_diff_gradient, norm, Matrix, RngState};

use crate::cli_error::CliError;
use crate::config::ExperimentConfig;
use crate::output::{ensure_dir, fmt, CsvWriter, ManifestBuilder};

/// pass = value <= threshold (Below) or value >= threshold (Above).
enum Sense {
    Below,
    Above,
}

struct Check {
    name: &'static str,
    value: f64,
    threshold: f64,
    sense: Sense,
}

impl Check {
    fn passed(&self) -> bool {
        match self.sense {
            Sense::Below => self.value <= self.threshold,
            Sense::Above => self.value >= self.threshold,
        }
    }
}

fn random_unit_rows(rows: usize, dim: usize, rng: &mut RngState) -> Matrix {
    Matrix::from_rows(&(0..rows).map(|_| rng.unit_vector(dim)).collect::<Vec<_>>()).unwrap()
}

fn simplex(k: usize, rng: &mut RngState) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.next_f64() + 0.05).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|&x| x / total).collect()
}

fn fixture_episode(rng: &mut RngState, way: usize, shot: usize, q: usize, k: usize, d: usize) -> EpisodeBatch {
    let mk = |rng: &mut RngState, class_id| EpisodeImage {
        aggregates: SlotAggregates {
            degenerate: vec![false; k],
            phi: random_unit_rows(k, d, rng),
        },
        class_id,
    };
    let mut support = Vec::new();
    let mut query = Vec::new();
    for c in 0..way {
        for _ in 0..shot {
            support.push(mk(rng, c));
        }
        for _ in 0..q {
            query.push(mk(rng, c));
        }
    }
    EpisodeBatch { support, query, way, shot, queries_per_class: q }
}

fn rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
    let num: f64 =
        analytic.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = reference.iter().map(|b| b * b).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

pub fn run(config: &ExperimentConfig, out_dir: &Path, sabotage: Option<&str>) -> Result<(), CliError> {
    config.validate().map_err(CliError::Usage)?;
    ensure_dir(out_dir)?;
    let hash = config.hash();
    let mut manifest = ManifestBuilder::new(&hash, "gradlab");
    let gl = &config.gradlab;
    let mut checks: Vec<Check> = Vec::new();

    // --- holistic field: rank one and oracle agreement ----------------------
    {
        let mut worst_rank_dev = 0.0f64;
        let mut worst_fd = 0.0f64;
        for i in 0..gl.rank_configs {
            let mut rng = RngState::derive(config.seed, 200 + i as u64);
            let d = 16;
            let k = 7;
            let y = random_unit_rows(k, d, &mut rng);
            let omega = simplex(k, &mut rng);
            let p = rng.unit_vector(d);
            let field = holistic_grad(&y, &omega, &p, GradReference::RawProjection)
                .map_err(CliError::from)?;
            let rank = field_rank(&field, gl.rank_tolerance).map_err(CliError::from)?;
            worst_rank_dev = worst_rank_dev.max((rank.numerical_rank as f64 - 1.0).abs());
            let fd = finite_diff_gradient(
                |flat| {
                    let rows: Vec<Vec<f64>> = flat.chunks(d).map(|r| r.to_vec()).collect();
                    let ym = Matrix::from_rows(&rows).unwrap();
                    let u = ym.matvec_t(&omega);
                    dot(&u, &p) / norm(&u)
                },
                y.data(),
                1e-6,
            )
            .map_err(CliError::from)?;
            worst_fd = worst_fd.max(rel_err(field.per_slot.data(), &fd));
        }
        checks.push(Check {
            name: "holistic_rank_one",
            value: worst_rank_dev,
            threshold: 0.0,
            sense: Sense::Below,
        });
        checks.push(Check {
            name: "holistic_grad_oracle",
            value: worst_fd,
            threshold: 1e-5,
            sense: Sense::Below,
        });
    }

    // --- matching field on the orthogonal-axis construction -----------------
    let mut ranks_csv = CsvWriter::new(
        &hash,
        &["field", "numerical_rank", "expected_rank", "sigma_1", "sigma_last"],
    );
    {
        let k = 7;
        let d = 16;
        let theta = std::f64::consts::FRAC_PI_4;
        let mut zq = Matrix::zeros(k, d);
        let mut zc = Matrix::zeros(k, d);
        for s in 0..k {
            zq.set(s, s, 1.0);
            zc.set(s, s, theta.cos());
            zc.set(s, s + k, theta.sin());
        }
        let field = chamfer_grad(&zq, &zc).map_err(CliError::from)?;
        let expect = theta.sin() / k as f64;
        let mut worst = 0.0f64;
        for s in 0..k {
            for j in 0..d {
                let want = if j == s + k { expect } else { 0.0 };
                worst = worst.max((field.per_slot.get(s, j) - want).abs());
            }
        }
        let rank = field_rank(&field, gl.rank_tolerance).map_err(CliError::from)?;
        checks.push(Check {
            name: "chamfer_construction_exact",
            value: worst,
            threshold: 1e-12,
            sense: Sense::Below,
        });
        checks.push(Check {
            name: "chamfer_construction_rank",
            value: rank.numerical_rank as f64,
            threshold: k as f64,
            sense: Sense::Above,
        });
        ranks_csv.row(&[
            "chamfer_axis_construction".into(),
            rank.numerical_rank.to_string(),
            k.to_string(),
            fmt(rank.singular_values[0]),
            fmt(*rank.singular_values.last().unwrap()),
        ]);

        let mut rng = RngState::derive(config.seed, 300);
        let hol_y = random_unit_rows(k, d, &mut rng);
        let omega = simplex(k, &mut rng);
        let p = rng.unit_vector(d);
        let hol_field =
            holistic_grad(&hol_y, &omega, &p, GradReference::RawProjection).map_err(CliError::from)?;
        let hol_rank = field_rank(&hol_field, gl.rank_tolerance).map_err(CliError::from)?;
        ranks_csv.row(&[
            "holistic_raw_reference".into(),
            hol_rank.numerical_rank.to_string(),
            "1".into(),
            fmt(hol_rank.singular_values[0]),
            fmt(*hol_rank.singular_values.last().unwrap()),
        ]);
    }

    // --- sinkhorn limits -----------------------------------------------------
    let mut sweep_csv = CsvWriter::new(
        &hash,
        &["case", "epsilon", "min_peak_mass", "max_uniform_dev", "grad_gap_to_hard"],
    );
    {
        let mut min_peak_low = f64::INFINITY;
        let mut max_dev_high = 0.0f64;
        let mut monotone_violations = 0usize;
        for case in 0..20 {
            let mut rng = RngState::derive(config.seed, 400 + case as u64);
            let (zq, zc) = margin_configuration(7, 16, 0.75, &mut rng);
            let report = sinkhorn_limit_probe(&zq, &zc, &gl.epsilons, 0.2)
                .map_err(CliError::from)?;
            if !report.assumption_failures.is_empty() {
                return Err(CliError::Check(format!(
                    "sinkhorn probe assumptions failed: {:?}",
                    report.assumption_failures
                )));
            }
            let mut low_gaps: Vec<(f64, f64)> = Vec::new();
            for row in &report.rows {
                sweep_csv.row(&[
                    case.to_string(),
                    fmt(row.epsilon),
                    fmt(row.min_peak_mass),
                    fmt(row.max_uniform_dev),
                    fmt(row.grad_gap_to_hard),
                ]);
                if (row.epsilon - 0.01).abs() < 1e-12 {
                    min_peak_low = min_peak_low.min(row.min_peak_mass);
                }
                if row.epsilon >= 100.0 {
                    max_dev_high = max_dev_high.max(row.max_uniform_dev);
                }
                if row.epsilon <= 1.0 {
                    low_gaps.push((row.epsilon, row.grad_gap_to_hard));
                }
            }
            low_gaps.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            for w in low_gaps.windows(2) {
                if w[1].1 > w[0].1 + 1e-12 {
                    monotone_violations += 1;
                }
            }
        }
        checks.push(Check {
            name: "sinkhorn_low_eps_peak",
            value: min_peak_low,
            threshold: 0.99,
            sense: Sense::Above,
        });
        checks.push(Check {
            name: "sinkhorn_high_eps_uniform",
            value: max_dev_high,
            threshold: 1e-3,
            sense: Sense::Below,
        });
        checks.push(Check {
            name: "sinkhorn_gap_monotone",
            value: monotone_violations as f64,
            threshold: 0.0,
            sense: Sense::Below,
        });
    }

    // --- CE symmetries ---------------------------------------------------------
    {
        let mut rng = RngState::derive(config.seed, 500);
        let episode = fixture_episode(&mut rng, 3, 2, 2, 4, 12);
        let mut params = EncoderParams::init(12, 6, 10.0, &mut rng);
        params.head.w2.add_scaled(&rng.gaussian_matrix(12, 12), 0.2);
        let mut worst_rot = 0.0f64;
        for _ in 0..20 {
            worst_rot =
                worst_rot.max(ce_rotation_check(&params, &episode, &mut rng).map_err(CliError::from)?);
        }
        let worst_scale = ce_scale_check(&params, &episode, 0.1)
            .map_err(CliError::from)?
            .max(ce_scale_check(&params, &episode, 10.0).map_err(CliError::from)?);
        checks.push(Check {
            name: "ce_rotation_invariance",
            value: worst_rot,
            threshold: 1e-9,
            sense: Sense::Below,
        });
        checks.push(Check {
            name: "ce_scale_invariance",
            value: worst_scale,
            threshold: 1e-9,
            sense: Sense::Below,
        });
    }

    // --- covariance rebase -------------------------------------------------------
    {
        let mut worst_offdiag = 0.0f64;
        let mut worst_delta = 0.0f64;
        for i in 0..20 {
            let mut rng = RngState::derive(config.seed, 600 + i as u64);
            let episode = fixture_episode(&mut rng, 2, 2, 2, 4, 6);
            let mut params = EncoderParams::init(6, 4, 10.0, &mut rng);
            params.head.w2.add_scaled(&rng.gaussian_matrix(6, 6), 0.3);
            let report = cc_rebase(&params, &episode).map_err(CliError::from)?;
            worst_offdiag = worst_offdiag.max(report.offdiag_after);
            worst_delta = worst_delta.max(report.delta_ce);
        }
        checks.push(Check {
            name: "cc_rebase_offdiag",
            value: worst_offdiag,
            threshold: 1e-8,
            sense: Sense::Below,
        });
        checks.push(Check {
            name: "cc_rebase_delta_ce",
            value: worst_delta,
            threshold: 1e-9,
            sense: Sense::Below,
        });
    }

    // --- spectral floor -----------------------------------------------------------
    {
        let mut rng = RngState::derive(config.seed, 700);
        let mut min_slack = f64::INFINITY;
        for _ in 0..1000 {
            let d = [8usize, 16, 32][rng.gen_range(3)];
            let n = 2 + rng.gen_range(40);
            let z = random_unit_rows(n, d, &mut rng);
            min_slack =
                min_slack.min(spectral_floor_check(&z).map_err(CliError::from)?.slack);
        }
        let equality = spectral_floor_check(&Matrix::identity(16)).map_err(CliError::from)?;
        checks.push(Check {
            name: "spectral_floor_slack",
            value: min_slack,
            threshold: -1e-9,
            sense: Sense::Above,
        });
        checks.push(Check {
            name: "spectral_floor_equality",
            value: equality.slack.abs(),
            threshold: 1e-9,
            sense: Sense::Below,
        });
    }

    // --- full-encoder gradient oracle ------------------------------------------------
    {
        let kinds = [
            DecorrelationKind::CrossCorrelation,
            DecorrelationKind::VicregVariance,
            DecorrelationKind::Spectral,
        ];
        let mut worst = 0.0f64;
        for i in 0..gl.gradient_episodes {
            let mut rng = RngState::derive(config.seed, 800 + i as u64);
            let episode = fixture_episode(&mut rng, 2, 2, 1, 3, 8);
            let mut params = EncoderParams::init(8, 5, 10.0, &mut rng);
            params.head.w2.add_scaled(&rng.gaussian_matrix(8, 8), 0.1);
            let mut configs: Vec<LossConfig> = kinds
                .iter()
                .map(|&kind| {
                    LossConfig::holistic(DecorrelationConfig {
                        kind,
                        lambda_d: 0.05,
                        gamma_hinge: 2.0,
                        std_floor: 1e-6,
                    })
                })
                .collect();
            configs.push(LossConfig::with_ct(
                DecorrelationConfig::cross_correlation(0.05),
                CtConfig { kappa: 2, mix: 0.5 },
            ));
            for loss_cfg in &configs {
                let (grads, _) =
                    encoder_gradients(&params, &episode, loss_cfg).map_err(CliError::from)?;
                let mut analytic = grads.flatten();
                if sabotage == Some("encoder_grad_oracle") {
                    analytic[0] += 1.0; // deliberately corrupted gradient
                }
                let flat = flatten_params(&params);
                let fd = finite_diff_gradient(
                    |x| {
                        let p = unflatten_params(&params, x);
                        compute_loss(&p, &episode, loss_cfg).unwrap().total
                    },
                    &flat,
                    1e-5,
                )
                .map_err(CliError::from)?;
                worst = worst.max(rel_err(&analytic, &fd));
            }
        }
        checks.push(Check {
            name: "encoder_grad_oracle",
            value: worst,
            threshold: 1e-4,
            sense: Sense::Below,
        });
    }

    // --- tangency of unit-reference fields ----------------------------------------------
    {
        let mut rng = RngState::derive(config.seed, 900);
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let y = random_unit_rows(5, 10, &mut rng);
            let omega = simplex(5, &mut rng);
            let p = rng.unit_vector(10);
            let field = holistic_grad(&y, &omega, &p, GradReference::UnitEmbedding)
                .map_err(CliError::from)?;
            for s in 0..5 {
                let z: Vec<f64> = {
                    let n = norm(y.row(s));
                    y.row(s).iter().map(|&x| x / n).collect()
                };
                worst = worst.max(dot(field.per_slot.row(s), &z).abs());
            }
            let zq = random_unit_rows(4, 10, &mut rng);
            let zc = random_unit_rows(4, 10, &mut rng);
            let ch = chamfer_grad(&zq, &zc).map_err(CliError::from)?;
            for s in 0..4 {
                worst = worst.max(dot(ch.per_slot.row(s), zq.row(s)).abs());
            }
        }
        checks.push(Check {
            name: "tangent_reference_rows",
            value: worst,
            threshold: 1e-10,
            sense: Sense::Below,
        });
    }

    // --- cross-correlation gradient has no mean action ------------------------------------
    {
        let mut rng = RngState::derive(config.seed, 1000);
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let y = rng.gaussian_matrix(12, 6);
            let g = decorrelation_gradient(&DecorrelationConfig::cross_correlation(0.02), &y)
                .map_err(CliError::from)?;
            for j in 0..6 {
                let s: f64 = (0..12).map(|i| g.get(i, j)).sum();
                worst = worst.max(s.abs());
            }
        }
        checks.push(Check {
            name: "cc_grad_zero_mean_action",
            value: worst,
            threshold: 1e-10,
            sense: Sense::Below,
        });
    }

    // --- variance-hinge conflict -----------------------------------------------------------
    {
        let mut worst = f64::NEG_INFINITY;
        for seed_off in 0..3u64 {
            let mut rng = RngState::derive(config.seed, 1100 + seed_off);
            let mut rows = Vec::new();
            let mut classes = Vec::new();
            for c in 0..3 {
                let center = rng.unit_vector(6);
                for _ in 0..10 {
                    let mut v = center.clone();
                    for x in v.iter_mut() {
                        *x += 0.02 * rng.next_gaussian();
                    }
                    rows.push(v);
                    classes.push(c);
                }
            }
            let y = Matrix::from_rows(&rows).unwrap();
            let cfg = DecorrelationConfig {
                kind: DecorrelationKind::VicregVariance,
                lambda_d: 1.0,
                gamma_hinge: 5.0,
                std_floor: 1e-6,
            };
            worst = worst.max(vicreg_ce_conflict(&y, &classes, &cfg).map_err(CliError::from)?);
        }
        checks.push(Check {
            name: "vicreg_within_class_conflict",
            value: worst,
            threshold: 0.0,
            sense: Sense::Below,
        });
    }

    // --- alignment report on a fixture model ------------------------------------------------
    let mut alignment_csv =
        CsvWriter::new(&hash, &["score", "mean_alignment", "episodes", "skipped_pairs"]);
    {
        let mut rng = RngState::derive(config.seed, 1200);
        let episodes: Vec<EpisodeBatch> = (0..gl.alignment_episodes.min(50))
            .map(|_| fixture_episode(&mut rng, 3, 2, 2, config.dims.k, config.dims.d))
            .collect();
        let params = EncoderParams::init(config.dims.d, config.dims.h, 10.0, &mut rng);
        for (label, kind) in [
            ("holistic", ScoreKind::Holistic),
            ("chamfer", ScoreKind::Chamfer),
            ("blend", ScoreKind::Blend { gamma: config.matcher.gamma_blend }),
        ] {
            let report = alignment_metric(kind, &params, &episodes).map_err(CliError::from)?;
            alignment_csv.row(&[
                label.to_string(),
                fmt(report.mean),
                report.episode_count.to_string(),
                report.skipped_pairs.to_string(),
            ]);
        }
    }

    // Apply generic sabotage (negative-control path for any named check).
    if let Some(name) = sabotage {
        if name != "encoder_grad_oracle" {
            let mut found = false;
            for check in checks.iter_mut() {
                if check.name == name {
                    check.value = match check.sense {
                        Sense::Below => check.threshold + 1.0,
                        Sense::Above => check.threshold - 1.0,
                    };
                    found = true;
                }
            }
            if !found {
                return Err(CliError::Usage(format!("--sabotage: unknown check '{name}'")));
            }
        }
    }

    // --- write outputs and verdicts ------------------------------------------------------------
    let mut checks_csv = CsvWriter::new(&hash, &["check", "value", "threshold", "pass"]);
    let mut first_failure: Option<&str> = None;
    for check in &checks {
        let ok = check.passed();
        checks_csv.row(&[
            check.name.to_string(),
            fmt(check.value),
            fmt(check.threshold),
            ok.to_string(),
        ]);
        println!(
            "{}: {} (value {:.3e}, threshold {:.3e})",
            check.name,
            if ok { "PASS" } else { "FAIL" },
            check.value,
            check.threshold
        );
        if !ok && first_failure.is_none() {
            first_failure = Some(check.name);
        }
    }
    for (file, writer) in [
        ("checks.csv", &checks_csv),
        ("ranks.csv", &ranks_csv),
        ("sinkhorn_sweep.csv", &sweep_csv),
        ("alignment.csv", &alignment_csv),
    ] {
        let path = out_dir.join(file);
        writer.write(&path)?;
        manifest.record(&path);
    }
    manifest.finish(out_dir)?;

    match first_failure {
        Some(name) => Err(CliError::Check(format!("check failed: {name}"))),
        None => Ok(()),
    }
}
