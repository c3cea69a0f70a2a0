//! End-to-end acceptance criteria. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use calvnet::checks::{bangbang_closure, gradient_checks, kalman_closure, riccati_consistency, rk4_order};
use calvnet::config::{parse_config, ProblemKind, RunConfig};
use calvnet::experiment::{run_experiment, MetricsReport};
use calvnet::oracles::DEFAULT_STEP;

struct Outcome {
    passed: bool,
    detail: String,
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str, out: &Path) -> RunConfig {
    let mut cfg = parse_config(&configs().join(format!("{name}.toml"))).expect("shipped config parses");
    cfg.output_dir = Some(out.join(name));
    cfg.evaluation.dump_oracle = true;
    cfg
}

fn run(name: &str, out: &Path) -> (MetricsReport, Duration) {
    let start = Instant::now();
    let report = run_experiment(&load(name, out)).unwrap_or_else(|e| panic!("{name}: {e}"));
    (report, start.elapsed())
}

fn describe(r: &MetricsReport) -> String {
    r.checks
        .iter()
        .map(|c| {
            let v = c.value.map_or("n/a".into(), |v| format!("{v:.4e}"));
            let mark = if c.passed { "" } else { "!" };
            format!("{mark}{}={v}", c.name)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn within(elapsed: Duration, minutes: u64) -> bool {
    elapsed <= Duration::from_secs(60 * minutes)
}

fn c1() -> Outcome {
    let start = Instant::now();
    let worst = gradient_checks(120, 2024).expect("gradient checks run");
    let t = start.elapsed();
    Outcome {
        passed: worst < 1e-4 && t < Duration::from_secs(60),
        detail: format!("120 random cases, max error {worst:.3e} (< 1e-4), {:.1}s", t.as_secs_f64()),
    }
}

fn c2() -> Outcome {
    let order = rk4_order().expect("rk4 runs");
    Outcome {
        passed: order >= 3.8,
        detail: format!("observed order {order:.4} (>= 3.8)"),
    }
}

fn c3() -> Outcome {
    let (are, gap) = riccati_consistency(DEFAULT_STEP).expect("riccati runs");
    Outcome {
        passed: are < 1e-6 && gap < 1e-8,
        detail: format!("ARE residual {are:.3e} (< 1e-6), exact-gain rollout gap {gap:.3e} (< 1e-8)"),
    }
}

fn c7() -> Outcome {
    let k = kalman_closure(DEFAULT_STEP).expect("kalman closure");
    let b = bangbang_closure().expect("bang-bang closure");
    Outcome {
        passed: k < 1e-6 && b < 1e-12,
        detail: format!("Kalman conditions on Riccati oracle {k:.3e} (< 1e-6), bang-bang {b:.3e} (< 1e-12)"),
    }
}

fn c10(out: &Path) -> Outcome {
    // short runs, repeated with different thread counts and chunking
    let mut mismatches = Vec::new();
    for kind in [
        ProblemKind::Kalman,
        ProblemKind::Mintime,
        ProblemKind::GeodesicSphere,
        ProblemKind::GeodesicHypar,
    ] {
        let mut jsons = Vec::new();
        for (i, threads) in ["1", "3"].iter().enumerate() {
            std::env::set_var("CALVNET_THREADS", threads);
            let mut cfg = RunConfig::for_problem(kind);
            cfg.seed = 11;
            cfg.output_dir = Some(out.join(format!("determinism-{}-{i}", kind.as_str())));
            cfg.network.width = 8;
            cfg.train.epochs = 40;
            cfg.train.points_per_epoch = 300;
            cfg.train.chunk_size = 64;
            if let Some(m) = cfg.mintime.as_mut() {
                m.pretrain_iters = 50;
            }
            if let Some(g) = cfg.geodesic.as_mut() {
                g.oracle_segments = 32;
                g.oracle_iters = 500;
            }
            cfg.resolve().expect("valid");
            let r = run_experiment(&cfg).expect("short run");
            jsons.push(std::fs::read_to_string(cfg.output_dir().join("metrics.json")).expect("metrics written"));
            jsons.push(r.canonical_json().expect("json"));
        }
        std::env::remove_var("CALVNET_THREADS");
        let strip = |s: &str| {
            s.lines()
                .filter(|l| !l.trim_start().starts_with("\"wall_clock_seconds\""))
                .collect::<Vec<_>>()
                .join("\n")
        };
        if strip(&jsons[0]) != strip(&jsons[2]) || jsons[1] != jsons[3] {
            mismatches.push(kind.as_str());
        }
    }
    Outcome {
        passed: mismatches.is_empty(),
        detail: if mismatches.is_empty() {
            "metrics JSON byte-identical across re-runs (1 and 3 threads) for all four problems".into()
        } else {
            format!("differences in {mismatches:?}")
        },
    }
}

fn main() {
    let out = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n:>2}: {} {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };

    report(1, c1());
    report(2, c2());
    report(3, c3());

    let (kal, t_kal) = run("kalman", out.path());
    report(
        4,
        Outcome {
            passed: kal.passed && within(t_kal, 30),
            detail: format!(
                "rollout tr Σ(5) {:.6} vs oracle {:.6}; {} ; {:.0}s",
                kal.headline.learned,
                kal.headline.oracle,
                describe(&kal),
                t_kal.as_secs_f64()
            ),
        },
    );

    let (base, t_base) = run("kalman-direct-cost", out.path());
    let larger = base.headline.learned > kal.headline.learned;
    let unbounded = base.metrics.get("rollout_bounded") != Some(&1.0);
    report(
        5,
        Outcome {
            passed: (larger || unbounded) && within(t_base, 30),
            detail: format!(
                "baseline rollout tr Σ(5) {:.6} vs trained {:.6} (larger: {larger}), continuation bounded: {}, network tr Σ(5) {:.4}; {:.0}s",
                base.headline.learned,
                kal.headline.learned,
                !unbounded,
                base.metrics.get("tr_sigma_T_network").copied().unwrap_or(f64::NAN),
                t_base.as_secs_f64()
            ),
        },
    );

    let (mt, t_mt) = run("mintime", out.path());
    report(
        6,
        Outcome {
            passed: mt.passed && within(t_mt, 30),
            detail: format!(
                "t_f {:.4}; {} ; {:.0}s",
                mt.headline.learned,
                describe(&mt),
                t_mt.as_secs_f64()
            ),
        },
    );

    report(7, c7());

    let (sph, t_sph) = run("geodesic-sphere", out.path());
    report(
        8,
        Outcome {
            passed: sph.passed && within(t_sph, 20),
            detail: format!(
                "length {:.6} vs π/2 − 1 = {:.6}; {} ; {:.0}s",
                sph.headline.learned,
                sph.headline.oracle,
                describe(&sph),
                t_sph.as_secs_f64()
            ),
        },
    );

    let (hyp, t_hyp) = run("geodesic-hypar", out.path());
    report(
        9,
        Outcome {
            passed: hyp.passed && within(t_hyp, 20),
            detail: format!(
                "length {:.6} vs polyline {:.6}; {} ; {:.0}s",
                hyp.headline.learned,
                hyp.headline.oracle,
                describe(&hyp),
                t_hyp.as_secs_f64()
            ),
        },
    );

    report(10, c10(out.path()));

    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.passed).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all 10 criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
