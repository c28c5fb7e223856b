//! Acceptance suite: every criterion below runs at its stated tolerance and
//! prints one PASS line (a failed assert prints the failure instead).
//! Criterion 13 (byte-identical CLI outputs) lives in the runner crate's own
//! acceptance test, next to the binary it drives.

use compose_core::bench::{
    build_context, evaluate_split, run_continual_training, sample_episode, BenchConfig,
    EvalProtocol, SplitPart, TrainingConfig,
};
use compose_core::encoder::{
    compute_loss, encoder_gradients, flatten_params, unflatten_params, CtConfig,
    DecorrelationConfig, DecorrelationKind, EncoderParams, LossConfig,
};
use compose_core::episode::{EpisodeBatch, EpisodeImage};
use compose_core::gradlab::{
    cc_rebase, ce_rotation_check, ce_scale_check, chamfer_grad, field_rank, holistic_grad,
    margin_configuration, sinkhorn_limit_probe, spectral_floor, spectral_floor_check,
    alignment_metric, GradReference, ScoreKind,
};
use compose_core::matchers::{
    assignment_score, cost_matrix, directed_chamfer, make_coupling, CouplingKind, MatcherConfig,
};
use compose_core::slots::{slot_purity, SlotAggregates};
use compose_core::tensor::{dot, finite_diff_gradient, norm, Matrix, RngState};

fn random_unit_rows(rows: usize, dim: usize, rng: &mut RngState) -> Matrix {
    Matrix::from_rows(&(0..rows).map(|_| rng.unit_vector(dim)).collect::<Vec<_>>()).unwrap()
}

fn simplex(k: usize, rng: &mut RngState) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.next_f64() + 0.05).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|&x| x / total).collect()
}

fn rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
    let num: f64 =
        analytic.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = reference.iter().map(|b| b * b).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

#[test]
fn criterion_01_holistic_rank_one() {
    let d = 16;
    let k = 7;
    let mut worst_fd = 0.0f64;
    for i in 0..100u64 {
        let mut rng = RngState::derive(0xACC1, i);
        let y = random_unit_rows(k, d, &mut rng);
        let omega = simplex(k, &mut rng);
        let p = rng.unit_vector(d);
        let field = holistic_grad(&y, &omega, &p, GradReference::RawProjection).unwrap();
        let rank = field_rank(&field, 1e-6).unwrap();
        assert_eq!(rank.numerical_rank, 1, "config {i}: rank {}", rank.numerical_rank);
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
        .unwrap();
        worst_fd = worst_fd.max(rel_err(field.per_slot.data(), &fd));
    }
    assert!(worst_fd <= 1e-5, "worst finite-difference rel err {worst_fd}");
    println!(
        "PASS criterion 1: holistic field rank 1 on 100 configs, oracle rel err <= {worst_fd:.2e}"
    );
}

#[test]
fn criterion_02_chamfer_rank_k_exact() {
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
    let field = chamfer_grad(&zq, &zc).unwrap();
    let expect = theta.sin() / k as f64;
    let mut worst = 0.0f64;
    for s in 0..k {
        for j in 0..d {
            let want = if j == s + k { expect } else { 0.0 };
            worst = worst.max((field.per_slot.get(s, j) - want).abs());
        }
    }
    assert!(worst <= 1e-12, "max deviation from the analytic rows: {worst}");
    let rank = field_rank(&field, 1e-6).unwrap();
    assert_eq!(rank.numerical_rank, 7);
    println!("PASS criterion 2: axis-construction rows exact to {worst:.2e}, rank 7");
}

#[test]
fn criterion_03_sinkhorn_limits() {
    let mut worst_peak = f64::INFINITY;
    let mut worst_dev = 0.0f64;
    for i in 0..20u64 {
        let mut rng = RngState::derive(0xACC3, i);
        // Rotated-axis costs with margins between cos(1.2) ~ 0.36 and
        // cos(0.75) ~ 0.73, all collision-free by construction.
        let theta = 0.75 + 0.45 * rng.next_f64();
        let (zq, zc) = margin_configuration(7, 16, theta, &mut rng);
        let report = sinkhorn_limit_probe(&zq, &zc, &[0.01, 100.0], 0.2).unwrap();
        assert!(
            report.assumption_failures.is_empty(),
            "case {i}: {:?}",
            report.assumption_failures
        );
        for row in &report.rows {
            if row.epsilon == 0.01 {
                worst_peak = worst_peak.min(row.min_peak_mass);
            } else {
                worst_dev = worst_dev.max(row.max_uniform_dev);
            }
        }
    }
    assert!(worst_peak >= 0.99, "low-epsilon peak mass {worst_peak}");
    assert!(worst_dev <= 1e-3, "high-epsilon uniform deviation {worst_dev}");
    println!(
        "PASS criterion 3: peak mass >= {worst_peak:.6} at eps 0.01, uniform dev <= {worst_dev:.2e} at eps 100"
    );
}

#[test]
fn criterion_04_spectral_floor() {
    let mut rng = RngState::new(0xACC4);
    let mut min_slack = f64::INFINITY;
    for _ in 0..1000 {
        let d = [8usize, 16, 32][rng.gen_range(3)];
        let n = 2 + rng.gen_range(40);
        let z = random_unit_rows(n, d, &mut rng);
        min_slack = min_slack.min(spectral_floor_check(&z).unwrap().slack);
    }
    assert!(min_slack >= -1e-9, "floor violated by {min_slack}");
    for d in [8usize, 16, 32] {
        let eq = spectral_floor_check(&Matrix::identity(d)).unwrap();
        assert!(eq.slack.abs() <= 1e-9, "equality case at d={d}: slack {}", eq.slack);
    }
    let f768 = spectral_floor(768);
    assert_eq!(f768, 767.0 * 767.0 / 768.0);
    assert!((f768 - 766.0).abs() < 0.01);
    println!(
        "PASS criterion 4: 1000 unit batches above the floor (min slack {min_slack:.2e}), d=768 floor {f768:.4}"
    );
}

fn fixture_episode(
    rng: &mut RngState,
    way: usize,
    shot: usize,
    q: usize,
    k: usize,
    d: usize,
) -> EpisodeBatch {
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

#[test]
fn criterion_05_ce_symmetries() {
    let mut rng = RngState::new(0xACC5);
    let episode = fixture_episode(&mut rng, 3, 2, 2, 4, 12);
    let mut params = EncoderParams::init(12, 6, 10.0, &mut rng);
    params.head.w2.add_scaled(&rng.gaussian_matrix(12, 12), 0.2);
    let mut worst_rot = 0.0f64;
    for _ in 0..20 {
        worst_rot = worst_rot.max(ce_rotation_check(&params, &episode, &mut rng).unwrap());
    }
    assert!(worst_rot <= 1e-9, "rotation invariance broken: {worst_rot}");
    let mut worst_scale = 0.0f64;
    for c in [0.1, 10.0] {
        worst_scale = worst_scale.max(ce_scale_check(&params, &episode, c).unwrap());
    }
    assert!(worst_scale <= 1e-9, "scale invariance broken: {worst_scale}");
    println!(
        "PASS criterion 5: CE invariant under 20 rotations (<= {worst_rot:.2e}) and scaling (<= {worst_scale:.2e})"
    );
}

#[test]
fn criterion_06_cc_rebase() {
    let mut worst_offdiag = 0.0f64;
    let mut worst_delta = 0.0f64;
    for i in 0..20u64 {
        let mut rng = RngState::derive(0xACC6, i);
        let episode = fixture_episode(&mut rng, 2, 2, 2, 4, 6);
        let mut params = EncoderParams::init(6, 4, 10.0, &mut rng);
        params.head.w2.add_scaled(&rng.gaussian_matrix(6, 6), 0.3);
        let report = cc_rebase(&params, &episode).unwrap();
        worst_offdiag = worst_offdiag.max(report.offdiag_after);
        worst_delta = worst_delta.max(report.delta_ce);
    }
    assert!(worst_offdiag <= 1e-8, "off-diagonal mass after rebase: {worst_offdiag}");
    assert!(worst_delta <= 1e-9, "CE moved under rebase: {worst_delta}");
    println!(
        "PASS criterion 6: rebase leaves off-diag <= {worst_offdiag:.2e} and CE within {worst_delta:.2e} on 20 batches"
    );
}

#[test]
fn criterion_07_full_encoder_gradient_oracle() {
    let kinds = [
        DecorrelationKind::CrossCorrelation,
        DecorrelationKind::VicregVariance,
        DecorrelationKind::Spectral,
    ];
    let mut worst = 0.0f64;
    for i in 0..50u64 {
        let mut rng = RngState::derive(0xACC7, i);
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
            let (grads, _) = encoder_gradients(&params, &episode, loss_cfg).unwrap();
            let flat = flatten_params(&params);
            let fd = finite_diff_gradient(
                |x| {
                    let p = unflatten_params(&params, x);
                    compute_loss(&p, &episode, loss_cfg).unwrap().total
                },
                &flat,
                1e-5,
            )
            .unwrap();
            worst = worst.max(rel_err(&grads.flatten(), &fd));
        }
    }
    assert!(worst <= 1e-4, "worst gradient rel err {worst}");
    println!(
        "PASS criterion 7: analytic gradients within {worst:.2e} of central differences on 50 episodes x 4 losses"
    );
}

const TREND_SEEDS: [u64; 3] = [42, 123, 7];

fn trend_eval(
    params: &EncoderParams,
    ctx: &compose_core::bench::BenchContext,
    part: SplitPart,
    seed: u64,
    stream: u64,
) -> f64 {
    let matcher = MatcherConfig::default();
    let protocol = EvalProtocol { workers: 4, ..EvalProtocol::default() };
    evaluate_split(
        params,
        &ctx.encoder,
        ctx.splits.part(part),
        &protocol,
        &matcher,
        RngState::derive(seed, 7_000 + stream).seed(),
    )
    .unwrap()
    .accuracy
}

#[test]
fn criterion_08_alignment_trend() {
    let bench = BenchConfig::default();
    let train = TrainingConfig::default();
    let matcher = MatcherConfig::default();
    for seed in TREND_SEEDS {
        let ctx = build_context(&bench, seed).unwrap();
        let hol_loss = LossConfig::holistic(DecorrelationConfig::cross_correlation(0.02));
        let ct_loss = LossConfig::with_ct(
            DecorrelationConfig::cross_correlation(0.02),
            CtConfig { kappa: 4, mix: 0.5 },
        );
        let hol = run_continual_training(&ctx, &train, &hol_loss, &matcher, seed).unwrap();
        let ct = run_continual_training(&ctx, &train, &ct_loss, &matcher, seed).unwrap();
        let mut ep_rng = RngState::derive(seed, 9_000);
        let episodes: Vec<EpisodeBatch> = (0..40)
            .map(|_| {
                sample_episode(&ctx.splits.train_classes, 4, 3, 3, &ctx.encoder, &mut ep_rng)
                    .unwrap()
            })
            .collect();
        let s_hol = alignment_metric(ScoreKind::Holistic, &hol.params, &episodes).unwrap();
        let s_ct =
            alignment_metric(ScoreKind::Blend { gamma: 0.5 }, &ct.params, &episodes).unwrap();
        assert!(
            s_hol.mean > s_ct.mean,
            "seed {seed}: alignment {:.4} (holistic-trained) vs {:.4} (matching-trained)",
            s_hol.mean,
            s_ct.mean
        );
        println!(
            "PASS criterion 8 (seed {seed}): alignment holistic {:.4} > matching-trained {:.4}",
            s_hol.mean, s_ct.mean
        );
    }
}

#[test]
fn criterion_09_noc_sys_tradeoff_trend() {
    let bench = BenchConfig::default();
    let train = TrainingConfig::default();
    let matcher = MatcherConfig::default();
    for seed in TREND_SEEDS {
        let ctx = build_context(&bench, seed).unwrap();
        let hol_loss = LossConfig::holistic(DecorrelationConfig::cross_correlation(0.02));
        let ct_loss = LossConfig::with_ct(
            DecorrelationConfig::cross_correlation(0.02),
            CtConfig { kappa: 4, mix: 0.5 },
        );
        let hol = run_continual_training(&ctx, &train, &hol_loss, &matcher, seed).unwrap();
        let ct = run_continual_training(&ctx, &train, &ct_loss, &matcher, seed).unwrap();
        let hol_noc = trend_eval(&hol.params, &ctx, SplitPart::Noc, seed, 0);
        let ct_noc = trend_eval(&ct.params, &ctx, SplitPart::Noc, seed, 2);
        let hol_sys = trend_eval(&hol.params, &ctx, SplitPart::Sys, seed, 1);
        let ct_sys = trend_eval(&ct.params, &ctx, SplitPart::Sys, seed, 3);
        assert!(
            hol_noc >= ct_noc,
            "seed {seed}: unseen-concept accuracy {hol_noc:.4} (holistic) < {ct_noc:.4} (matching-trained)"
        );
        assert!(
            ct_sys >= hol_sys,
            "seed {seed}: novel-combination accuracy {ct_sys:.4} (matching-trained) < {hol_sys:.4} (holistic)"
        );
        println!(
            "PASS criterion 9 (seed {seed}): noc {hol_noc:.4} >= {ct_noc:.4}, sys {ct_sys:.4} >= {hol_sys:.4}"
        );
    }
}

#[test]
fn criterion_10_lambda_ablation_trend() {
    let bench = BenchConfig::default();
    let train = TrainingConfig::default();
    let matcher = MatcherConfig::default();
    for seed in TREND_SEEDS {
        let ctx = build_context(&bench, seed).unwrap();
        let with = LossConfig::holistic(DecorrelationConfig::cross_correlation(0.02));
        let without = LossConfig::holistic(DecorrelationConfig::cross_correlation(0.0));
        let trained = run_continual_training(&ctx, &train, &with, &matcher, seed).unwrap();
        let bare = run_continual_training(&ctx, &train, &without, &matcher, seed).unwrap();
        let noc_with = trend_eval(&trained.params, &ctx, SplitPart::Noc, seed, 0);
        let noc_without = trend_eval(&bare.params, &ctx, SplitPart::Noc, seed, 4);
        assert!(
            noc_with > noc_without,
            "seed {seed}: noc {noc_with:.4} with decorrelation vs {noc_without:.4} without"
        );
        println!(
            "PASS criterion 10 (seed {seed}): noc {noc_with:.4} > {noc_without:.4} without decorrelation"
        );
    }
}

#[test]
fn criterion_11_matcher_family_coherence() {
    let mut rng = RngState::new(0xACCB);
    // Two code paths for the forward term agree to 1e-12 on 1000 fuzz cases,
    // and every coupling is row-stochastic.
    let kinds = [
        CouplingKind::HardChamfer,
        CouplingKind::SoftChamfer { beta: 7.0 },
        CouplingKind::MutualNearest,
        CouplingKind::sinkhorn(0.3),
    ];
    let mut worst_gap = 0.0f64;
    let mut worst_row = 0.0f64;
    for _ in 0..1000 {
        let kq = 2 + rng.gen_range(5);
        let ks = 2 + rng.gen_range(5);
        let a = random_unit_rows(kq, 8, &mut rng);
        let b = random_unit_rows(ks, 8, &mut rng);
        let s = cost_matrix(&a, &b).unwrap();
        let hard = make_coupling(&CouplingKind::HardChamfer, &s).unwrap();
        let via_coupling = assignment_score(&hard, &s).unwrap();
        let via_chamfer = directed_chamfer(&a, &b).unwrap();
        worst_gap = worst_gap.max((via_coupling - via_chamfer).abs());
        for kind in &kinds {
            let c = make_coupling(kind, &s).unwrap();
            for i in 0..c.t.rows() {
                let sum: f64 = c.t.row(i).iter().sum();
                worst_row = worst_row.max((sum - 1.0).abs());
            }
        }
    }
    assert!(worst_gap <= 1e-12, "hard coupling vs forward mean-of-max: {worst_gap}");
    assert!(worst_row <= 1e-9, "row-stochasticity violated by {worst_row}");
    // Exact assignment agrees with brute-force permutation search for K <= 6
    // and is itself a permutation (square couplings also row-stochastic).
    for k in 2..=6usize {
        for _ in 0..25 {
            let s = Matrix::from_fn(k, k, |_, _| 2.0 * rng.next_f64() - 1.0);
            let c = make_coupling(&CouplingKind::Hungarian, &s).unwrap();
            let mut cols_used = vec![false; k];
            let mut got = 0.0;
            for i in 0..k {
                let row = c.t.row(i);
                let j = (0..k).find(|&j| row[j] == 1.0).expect("one-hot row");
                assert!(!cols_used[j], "not a permutation");
                cols_used[j] = true;
                got += s.get(i, j);
            }
            let mut perm: Vec<usize> = (0..k).collect();
            let mut best = f64::NEG_INFINITY;
            heap_permutations(&mut perm, k, &mut |p| {
                let v: f64 = p.iter().enumerate().map(|(i, &j)| s.get(i, j)).sum();
                if v > best {
                    best = v;
                }
            });
            assert!(
                (got - best).abs() <= 1e-9,
                "assignment {got} vs brute force {best} at K={k}"
            );
        }
    }
    println!(
        "PASS criterion 11: dual-route gap <= {worst_gap:.2e}, rows stochastic to {worst_row:.2e}, exact assignment matches brute force"
    );
}

fn heap_permutations(perm: &mut Vec<usize>, n: usize, visit: &mut impl FnMut(&[usize])) {
    if n == 1 {
        visit(perm);
        return;
    }
    for i in 0..n {
        heap_permutations(perm, n - 1, visit);
        if n % 2 == 0 {
            perm.swap(i, n - 1);
        } else {
            perm.swap(0, n - 1);
        }
    }
}

#[test]
fn criterion_12_purity_boundary_semantics() {
    // One-hot slots on single-category patches.
    let mut one_hot = Matrix::zeros(2, 4);
    one_hot.set(0, 0, 1.0);
    one_hot.set(1, 3, 1.0);
    let rho = slot_purity(&[one_hot], &[vec![1, 1, 2, 2]]).unwrap();
    assert_eq!(rho, 1.0);

    // Exact half split contributes nothing: strict majority required.
    let mut half = Matrix::zeros(1, 2);
    half.set(0, 0, 0.3);
    half.set(0, 1, 0.3);
    let rho = slot_purity(&[half], &[vec![1, 2]]).unwrap();
    assert_eq!(rho, 0.0);

    // Mixed fixture A: masses 0.8/0.2 and 0.4/0.6 -> both strict majorities.
    let mut a = Matrix::zeros(2, 2);
    a.set(0, 0, 0.8);
    a.set(0, 1, 0.2);
    a.set(1, 0, 0.4);
    a.set(1, 1, 0.6);
    assert_eq!(slot_purity(&[a], &[vec![1, 2]]).unwrap(), 1.0);

    // Mixed fixture B: slot 0 splits 0.5/0.3/0.2 across background and two
    // categories (dominant holds exactly half -> impure); slot 1 is 0.9/0.1.
    let mut b = Matrix::zeros(2, 3);
    b.set(0, 0, 0.5);
    b.set(0, 1, 0.3);
    b.set(0, 2, 0.2);
    b.set(1, 1, 0.9);
    b.set(1, 2, 0.1);
    assert_eq!(slot_purity(&[b], &[vec![0, 1, 2]]).unwrap(), 0.5);

    // Mixed fixture C: two images, 2/3 pure and 0/3 pure -> 1/3 overall.
    let mut c1 = Matrix::zeros(3, 3);
    c1.set(0, 0, 1.0); // pure on category 1
    c1.set(1, 2, 0.7); // 0.7 of 1.0 on category 2 -> pure
    c1.set(1, 0, 0.3);
    c1.set(2, 0, 0.5); // exact half over categories 1 and 2 -> impure
    c1.set(2, 2, 0.5);
    let mut c2 = Matrix::zeros(3, 2);
    for s in 0..3 {
        c2.set(s, 0, 0.5);
        c2.set(s, 1, 0.5);
    }
    let rho = slot_purity(&[c1, c2], &[vec![1, 1, 2], vec![1, 2]]).unwrap();
    assert!((rho - 1.0 / 3.0).abs() < 1e-12, "rho {rho}");

    println!("PASS criterion 12: strict-majority purity semantics on boundary fixtures");
}
