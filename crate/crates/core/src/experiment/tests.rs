use super::*;
use crate::prox::InnerSettings;
use approx::assert_relative_eq;

fn small(problem: ProblemKind, algorithm: Algorithm) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(problem, algorithm);
    c.rows = 16;
    c.cols = 16;
    c.n_outer = 40;
    c.max_inner = 200;
    c.ground_truth_iters = 1000;
    c.fit_from = 5;
    c.fit_to = 40;
    c
}

#[test]
fn parsing() {
    assert_eq!("tvl2-smooth".parse::<ProblemKind>().unwrap(), ProblemKind::Tvl2Smooth);
    assert_eq!("ipd-dual-accel".parse::<Algorithm>().unwrap(), Algorithm::IpdDualAccel);
    assert_eq!("pdhg-accel".parse::<Algorithm>().unwrap().variant(), Variant::ExactPdhgAccel);
    assert_eq!("synth:ramp".parse::<ImageSource>().unwrap(), ImageSource::Synth(SynthKind::Ramp));
    assert_eq!("a/b.pgm".parse::<ImageSource>().unwrap(), ImageSource::File("a/b.pgm".into()));
    assert!("synth:lily".parse::<ImageSource>().is_err());
    assert!("tvl3".parse::<ProblemKind>().is_err());
}

#[test]
fn invalid_combinations_are_rejected() {
    let err = |p, a| ExperimentConfig::new(p, a).validate().is_err();
    assert!(err(ProblemKind::Tvl1, Algorithm::IpdDualAccel));
    assert!(err(ProblemKind::Tvl2, Algorithm::IpdSmooth));
    assert!(err(ProblemKind::Tvl2Smooth, Algorithm::IpdReduced));
    assert!(err(ProblemKind::Tvl1, Algorithm::IpdPrimalAccel));
    assert!(err(ProblemKind::Tvl2, Algorithm::PdhgAccel));
    assert!(!err(ProblemKind::Tvl2, Algorithm::IpdDualAccel));
    assert!(!err(ProblemKind::Tvl2Smooth, Algorithm::IpdSmooth));
    let mut c = ExperimentConfig::new(ProblemKind::Tvl1, Algorithm::IpdReduced);
    c.lambda = -1.0;
    assert!(c.validate().is_err());
    c.lambda = 0.5;
    c.ground_truth_iters = 999;
    assert!(c.validate().is_err());
    c.ground_truth_iters = 1000;
    c.beta = 0.1;
    assert!(c.validate().is_err());
    c.beta = 0.0;
    c.gap_constant = GapConstantMode::Fixed(0.0);
    assert!(c.validate().is_err());
    let mut s = ExperimentConfig::new(ProblemKind::Tvl2Smooth, Algorithm::IpdSmooth);
    s.q = 1.0;
    assert!(s.validate().is_err());
}

#[test]
fn schedules_follow_the_variant() {
    let mut c = ExperimentConfig::new(ProblemKind::Tvl2, Algorithm::IpdDualAccel);
    c.alpha = 0.75;
    assert_eq!(c.primal_schedule(), ScheduleKind::Polynomial { c: 1.0, alpha: 1.5 });
    c.algorithm = Algorithm::IpdBasic;
    assert_eq!(c.primal_schedule(), ScheduleKind::Polynomial { c: 1.0, alpha: 0.75 });
    c.algorithm = Algorithm::Pdhg;
    assert_eq!(c.primal_schedule(), ScheduleKind::Zero);
    let s = ExperimentConfig::new(ProblemKind::Tvl2Smooth, Algorithm::IpdSmooth);
    assert_eq!(s.primal_schedule(), ScheduleKind::Geometric { c: 1.0, q: 0.9 });
    assert_eq!(s.summary_fit(), (SummaryMetric::RelErr, FitMode::SemiLog));
}

#[test]
fn default_blur_scales_with_width() {
    let c = ExperimentConfig::new(ProblemKind::Tvl1, Algorithm::IpdReduced);
    assert_eq!(c.fwhm(64), 3.0);
    assert_eq!(c.fwhm(256), 12.0);
}

#[test]
fn baseline_step_choices() {
    let (t, s) = baseline_steps(8f64.sqrt());
    assert_relative_eq!(t, 0.99 / 8f64.sqrt(), epsilon = 1e-16);
    assert_eq!(t, s);
    let (l, lf) = (8f64.sqrt(), 1e-3);
    let (t, s) = accelerated_baseline_steps(l, lf);
    assert_relative_eq!(t * lf + t * s * l * l, 1.0, epsilon = 1e-14);
}

#[test]
fn smooth_problem_theta() {
    let c = ExperimentConfig::new(ProblemKind::Tvl2Smooth, Algorithm::IpdSmooth);
    let built = build_problem(&c).unwrap();
    assert!((built.norm_estimate - 1.0).abs() < 1e-6);
    let s = initial_steps(&c, &built).unwrap();
    assert!((s.theta - 0.9694).abs() < 1e-3, "θ = {}", s.theta);
}

#[test]
fn gap_constant_examples() {
    let c = tv_gap_at_zero(0.1, &RealGrid::new(1, 3, vec![0.0, 2.0, -1.0]).unwrap());
    assert_relative_eq!(c.value, 0.5, epsilon = 1e-15);
    let fallback = tv_gap_at_zero(0.1, &RealGrid::filled(4, 4, 3.0));
    assert_eq!(fallback.value, 1.0);
    assert!(fallback.provenance.contains("fallback"));

    let mut cfg = small(ProblemKind::Tvl1, Algorithm::IpdReduced);
    cfg.noise = NoiseSpec::None;
    cfg.image = ImageSource::Synth(SynthKind::Constant);
    let built = build_problem(&cfg).unwrap();
    let s0 = initial_steps(&cfg, &built).unwrap();
    let z = RealGrid::zeros(16, 16);
    assert_eq!(gap_constant(&built.nested, &s0, &z, &z).unwrap().value, 1.0);
}

#[test]
fn zero_lambda_prox_returns_the_data() {
    let mut cfg = small(ProblemKind::Tvl2, Algorithm::IpdDualAccel);
    cfg.lambda = 0.0;
    cfg.noise = NoiseSpec::None;
    cfg.blur_fwhm = Some(0.0);
    let built = build_problem(&cfg).unwrap();
    assert_eq!(built.data, built.clean);
    let settings = InnerSettings {
        max_inner: 10,
        step_scale: 0.99,
        warm_start: false,
    };
    let r = built.nested.primal.prox(&built.data, 1.0, 1e-12, None, &settings).unwrap();
    assert_eq!(r.x, built.data);
    assert_eq!(r.cert.achieved_gap, 0.0);
    assert_eq!(built.nested.primal_energy(&r.x).unwrap(), 0.0);
}

#[test]
fn zero_data_ground_truth() {
    let cfg = small(ProblemKind::Tvl2, Algorithm::Pdhg);
    let z = RealGrid::zeros(16, 16);
    let a = ImageOperator::blur_or_identity(cfg.fwhm(16), 16, 16).unwrap();
    let built = build_from_data(&cfg, z.clone(), z.clone(), a).unwrap();
    let gt = compute_ground_truth(&built.stacked, 1000).unwrap();
    assert_eq!(gt.x_star, z);
    assert_eq!(gt.f_star, 0.0);
    assert_eq!(gt.est_accuracy, 0.0);
    assert!(compute_ground_truth(&built.stacked, 999).is_err());
}

#[test]
fn ground_truth_energy_does_not_diverge() {
    let cfg = small(ProblemKind::Tvl1, Algorithm::Pdhg);
    let built = build_problem(&cfg).unwrap();
    let gt = compute_ground_truth(&built.stacked, 2000).unwrap();
    assert!(gt.f_star <= gt.f_half + 1e-12 * energy_scale(gt.f_star));
    assert_eq!(gt.est_accuracy, (gt.f_star - gt.f_half).abs());
}

#[test]
fn relative_error_handles_zero_optimum() {
    assert_eq!(relative_error(3.0, 2.0), 0.5);
    assert_eq!(relative_error(1e-3, 0.0), 1e-3);
    assert_eq!(energy_scale(0.2), 1.0);
    assert_eq!(energy_scale(-40.0), 40.0);
}

#[test]
fn csv_contract() {
    let cfg = small(ProblemKind::Tvl1, Algorithm::IpdReduced);
    let a = run_experiment(&cfg).unwrap();
    let lines: Vec<&str> = a.csv.split('\n').collect();
    assert_eq!(lines[0], CSV_HEADER.join(","));
    assert_eq!(lines.len(), cfg.n_outer + 2);
    assert_eq!(*lines.last().unwrap(), "");
    assert!(!a.csv.contains('\r'));
    let parsed = parse_csv(&a.csv).unwrap();
    assert_eq!(parsed, a.rows);
    assert!(parsed.windows(2).all(|w| w[0].cum_inner_it <= w[1].cum_inner_it));
    assert!(parsed.iter().all(|r| r.relerr >= -1e-6));
    for (row, e) in parsed.iter().zip(a.record.entries()) {
        assert_eq!(row.f.to_bits(), e.primal_energy.to_bits());
        assert_eq!(row.tau.to_bits(), e.tau.to_bits());
    }
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.csv, b.csv);
    assert!(a.summary.bound_ok && a.summary.descent_ok);
}

#[test]
fn csv_rejects_bad_input() {
    assert!(parse_csv("n,tau\n1,2\n").is_err());
    let mut text = CSV_HEADER.join(",");
    text.push_str("\n1,0.5,0.5,1.0,x,0,0,,0,0,0,0,\n");
    assert!(parse_csv(&text).is_err());
}

#[test]
fn written_record_certifies_and_refits() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(ProblemKind::Tvl2, Algorithm::IpdDualAccel);
    cfg.output = Some(dir.path().join("run.csv"));
    let out = run_experiment(&cfg).unwrap();
    let on_disk = std::fs::read_to_string(dir.path().join("run.csv")).unwrap();
    assert_eq!(on_disk, out.csv);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    for key in ["slope", "r2", "bound_ok", "config"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    let report = certify(&dir.path().join("run.csv")).unwrap();
    assert!(report.ok(), "{report:?}");
    assert_eq!(report.rows, 40);
    let fit = rates(&dir.path().join("run.csv"), SummaryMetric::ErgRelErr, 5, 40, FitMode::LogLog).unwrap();
    assert_eq!(Some(fit.slope), out.summary.slope);
}

#[test]
fn tampered_record_fails_certification() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(ProblemKind::Tvl1, Algorithm::IpdReduced);
    let path = dir.path().join("r.csv");
    cfg.output = Some(path.clone());
    run_experiment(&cfg).unwrap();
    let mut rows = read_csv(&path).unwrap();
    rows[3].lag_gap = Some(rows[3].rhs_bound.unwrap() * 2.0 + 1.0);
    let mut sink = CsvSink::new(Vec::new()).unwrap();
    for r in &rows {
        sink.write_row(r).unwrap();
    }
    std::fs::write(&path, sink.into_inner().unwrap()).unwrap();
    let report = certify(&path).unwrap();
    assert_eq!(report.bound_violations, vec![4]);
    assert!(!report.ok());
}

#[test]
fn stage_tagged_errors() {
    let mut cfg = small(ProblemKind::Tvl1, Algorithm::IpdReduced);
    cfg.image = ImageSource::File("/nonexistent/image.pgm".into());
    assert!(matches!(run_experiment(&cfg), Err(Error::Stage { stage: "build", .. })));
    let mut cfg = small(ProblemKind::Tvl1, Algorithm::IpdReduced);
    cfg.output = Some("/nonexistent/dir/out.csv".into());
    assert!(matches!(run_experiment(&cfg), Err(Error::Stage { stage: "write", .. })));
}

#[test]
fn exact_baselines_run_through_the_experiment() {
    let out = run_experiment(&small(ProblemKind::Tvl2, Algorithm::Pdhg)).unwrap();
    assert_eq!(out.rows.len(), 40);
    assert!(out.rows.iter().all(|r| r.inner_it == 0 && r.eps_target == 0.0));
    assert!(out.summary.bound_ok && out.summary.descent_ok);
    let acc = run_experiment(&small(ProblemKind::Tvl2Smooth, Algorithm::PdhgAccel)).unwrap();
    assert!(acc.rows.windows(2).all(|w| w[1].tau < w[0].tau));
}

#[test]
fn paper_literal_changes_only_tvl1_dual_update() {
    let base = small(ProblemKind::Tvl1, Algorithm::IpdReduced);
    let mut lit = base.clone();
    lit.paper_literal = true;
    let a = run_experiment(&base).unwrap();
    let b = run_experiment(&lit).unwrap();
    assert_ne!(a.csv, b.csv);
    assert_eq!(a.summary.f_star, b.summary.f_star);
}

#[test]
fn external_pgm_image() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("img.pgm");
    pgm::write_pgm(&synth_image(SynthKind::Shapes, 12, 20, 1), &path).unwrap();
    let mut cfg = small(ProblemKind::Tvl2, Algorithm::IpdDualAccel);
    cfg.image = ImageSource::File(path);
    let built = build_problem(&cfg).unwrap();
    assert_eq!((built.data.rows(), built.data.cols()), (12, 20));
}
