use std::path::Path;

use calvnet::config::{parse_config, parse_config_str, ProblemKind, RunConfig};
use calvnet::experiment::{
    evaluate_checkpoint, oracle_metrics, run_experiment, run_oracle, CHECKPOINT_FILE, CONFIG_FILE, LOG_FILE,
    METRICS_FILE, ORACLE_FILE, TRAJECTORY_FILE,
};
use calvnet::io::{read_csv, read_text, Checkpoint};
use calvnet::Error;

fn tiny(kind: ProblemKind, dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::for_problem(kind);
    cfg.output_dir = Some(dir.to_path_buf());
    cfg.network.width = 6;
    cfg.network.hidden_layers = 2;
    cfg.train.epochs = 20;
    cfg.train.points_per_epoch = 64;
    cfg.train.chunk_size = 16;
    cfg.train.log_every = 5;
    cfg.train.control_batch = 16;
    cfg.train.alternating_n = 2;
    cfg.evaluation.trajectory_points = 11;
    cfg.evaluation.dump_oracle = true;
    if let Some(m) = cfg.mintime.as_mut() {
        m.pretrain_iters = 20;
    }
    if let Some(g) = cfg.geodesic.as_mut() {
        g.oracle_segments = 16;
        g.oracle_iters = 200;
    }
    cfg.resolve().unwrap();
    cfg
}

const KINDS: [ProblemKind; 4] = [
    ProblemKind::Kalman,
    ProblemKind::Mintime,
    ProblemKind::GeodesicSphere,
    ProblemKind::GeodesicHypar,
];

#[test]
fn every_problem_writes_its_artifacts() {
    for kind in KINDS {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(kind, dir.path());
        let report = run_experiment(&cfg).unwrap();
        for f in [CONFIG_FILE, LOG_FILE, TRAJECTORY_FILE, ORACLE_FILE, CHECKPOINT_FILE, METRICS_FILE] {
            assert!(dir.path().join(f).exists(), "{kind:?}: {f}");
        }
        let (header, rows) = read_csv(&dir.path().join(TRAJECTORY_FILE)).unwrap();
        let (oheader, _) = read_csv(&dir.path().join(ORACLE_FILE)).unwrap();
        assert_eq!(header, oheader, "{kind:?}: oracle and learned share the schema");
        assert_eq!(rows.len(), 11);
        let expected_cols = match kind {
            ProblemKind::Kalman => 1 + 16 + 16 + 16 + 1,
            ProblemKind::Mintime => 6,
            _ => 7,
        };
        assert_eq!(header.len(), expected_cols);
        let json: serde_json::Value = serde_json::from_str(&read_text(&dir.path().join(METRICS_FILE)).unwrap()).unwrap();
        assert_eq!(json["problem"], report.problem);
        assert!(json["headline"]["oracle"].is_number());
        let log = read_text(&dir.path().join(LOG_FILE)).unwrap();
        assert!(log.starts_with("epoch,loss,alpha"));
        assert_eq!(log.lines().count(), 1 + 4 + 1);
    }
}

#[test]
fn kalman_metrics_name_the_headline() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&tiny(ProblemKind::Kalman, dir.path())).unwrap();
    assert_eq!(report.headline.name, "tr_sigma_T");
    let oracle = report.metrics["tr_sigma_T_oracle"];
    assert!((oracle - 3.464101630083736).abs() < 1e-9, "{oracle}");
    let log = read_text(&dir.path().join(LOG_FILE)).unwrap();
    assert!(log.lines().next().unwrap().contains("psi_dynamics"));
}

#[test]
fn mintime_log_records_terminal_time() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&tiny(ProblemKind::Mintime, dir.path())).unwrap();
    let log = read_text(&dir.path().join(LOG_FILE)).unwrap();
    assert!(log.lines().next().unwrap().ends_with(",t_f"));
    let sphere = tempfile::tempdir().unwrap();
    run_experiment(&tiny(ProblemKind::GeodesicSphere, sphere.path())).unwrap();
    let log = read_text(&sphere.path().join(LOG_FILE)).unwrap();
    assert!(log.lines().next().unwrap().ends_with(",lambda_f"));
}

#[test]
fn checkpoint_evaluation_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(ProblemKind::Mintime, dir.path());
    let trained = run_experiment(&cfg).unwrap();
    let ckpt = dir.path().join(CHECKPOINT_FILE);
    let c = Checkpoint::read(&ckpt).unwrap();
    assert_eq!(c.problem, "mintime");
    assert_eq!(c.heads.len(), 3);
    let eval_dir = tempfile::tempdir().unwrap();
    let mut cfg2 = cfg.clone();
    cfg2.output_dir = Some(eval_dir.path().to_path_buf());
    let evaluated = evaluate_checkpoint(&cfg2, &ckpt).unwrap();
    assert_eq!(evaluated.headline, trained.headline);
    assert_eq!(evaluated.metrics, trained.metrics);
    assert_eq!(evaluated.residuals, trained.residuals);

    let mut other = tiny(ProblemKind::GeodesicSphere, eval_dir.path());
    assert!(matches!(evaluate_checkpoint(&other, &ckpt), Err(Error::Config { .. })));
    other = cfg.clone();
    other.network.width = 7;
    assert!(evaluate_checkpoint(&other, &ckpt).is_err());
}

#[test]
fn same_seed_gives_identical_metrics_and_different_seed_does_not() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let ra = run_experiment(&tiny(ProblemKind::GeodesicHypar, a.path())).unwrap();
    let rb = run_experiment(&tiny(ProblemKind::GeodesicHypar, b.path())).unwrap();
    assert_eq!(ra.canonical_json().unwrap(), rb.canonical_json().unwrap());
    let mut cfg = tiny(ProblemKind::GeodesicHypar, c.path());
    cfg.seed = 9;
    cfg.resolve().unwrap();
    let rc = run_experiment(&cfg).unwrap();
    assert_ne!(ra.headline.learned, rc.headline.learned);
}

#[test]
fn config_echo_parses_back_to_the_same_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(ProblemKind::Kalman, dir.path());
    run_experiment(&cfg).unwrap();
    let echoed = parse_config(&dir.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(echoed, cfg);
}

#[test]
fn oracle_only_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(ProblemKind::Mintime, dir.path());
    let m = run_oracle(&cfg).unwrap();
    assert_eq!(m["t_f"], 2.0);
    assert_eq!(m["switch_time"], 1.0);
    let (_, rows) = read_csv(&dir.path().join(ORACLE_FILE)).unwrap();
    assert_eq!(rows.last().unwrap()[0], 2.0);
    let sphere = oracle_metrics(&tiny(ProblemKind::GeodesicSphere, dir.path())).unwrap();
    assert!((sphere["closed_form_length"] - (std::f64::consts::FRAC_PI_2 - 1.0)).abs() < 1e-15);
}

#[test]
fn mintime_config_defaults_and_errors() {
    let cfg = parse_config_str("problem = \"mintime\"").unwrap();
    assert_eq!(cfg.train.learning_rate, 8e-4);
    assert!(matches!(
        parse_config_str("problem = \"mintime\"\n[mintime]\nxf = [1.0, 0.0]"),
        Err(Error::Config { .. })
    ));
    assert!(matches!(parse_config(Path::new("/nonexistent/run.toml")), Err(Error::Io { .. })));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            parse_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 5);
}
