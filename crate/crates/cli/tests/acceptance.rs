//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use radner_cli::commands::{run_solve, run_verify, Overrides};
use radner_cli::config::load_config;
use radner_core::bsde::{driver_a, driver_a_trunc, driver_y2, driver_y2_trunc, from_diagonal, to_diagonal};
use radner_core::field::{auto_truncation, Grid, GridSpec};
use radner_core::ode::solve_constant;
use radner_core::rng::CounterRng;
use radner_core::verification::{a_lower_bound, gronwall_y2_bound, HALVING_RATIO};
use radner_core::{solve, BsdeState, MarketModel, VerificationReport};
use serde_json::Value;
use tempfile::TempDir;

const SHIPPED: [&str; 3] = ["pstar", "tanh", "affine"];

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.json"))
}

fn model(name: &str) -> MarketModel {
    let (c, _) = load_config(&config_path(name)).unwrap();
    c.market_model().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

struct Ctx {
    tmp: TempDir,
    reports: Vec<(String, VerificationReport)>,
}

impl Ctx {
    fn out(&self, tag: &str) -> Overrides {
        Overrides {
            out: Some(self.tmp.path().join(tag)),
            ..Overrides::default()
        }
    }

    fn report(&mut self, name: &str) -> &VerificationReport {
        if !self.reports.iter().any(|(n, _)| n == name) {
            let r = run_verify(&config_path(name), &self.out(&format!("verify_{name}")), None).unwrap().report;
            self.reports.push((name.to_string(), r));
        }
        &self.reports.iter().find(|(n, _)| n == name).unwrap().1
    }
}

/// The report's verdict on each named check, failing on absent names.
fn all_pass(report: &VerificationReport, names: &[&str]) -> (bool, Vec<String>) {
    let mut bad = Vec::new();
    for n in names {
        match report.check(n) {
            Some(c) if c.passed => {}
            Some(c) => bad.push(format!("{n}={:.3e}/{:.3e}", c.statistic, c.threshold)),
            None => bad.push(format!("{n} missing")),
        }
    }
    (bad.is_empty(), bad)
}

fn closed_forms(ctx: &mut Ctx) -> Outcome {
    // oracle: kappa = alpha1 sigma, r = rho_S + a_S mu - a_S alpha1 sigma^2 / 2,
    // kappa_PE = a_S sigma, r_PE = rho_S + a_S mu - a_S^2 sigma^2 / 2
    let (a1, a2, sigma, mu, rho) = (2.0f64, 2.0f64, 1.0f64, 0.0f64, 0.0f64);
    let a_s = 1.0 / (1.0 / a1 + 1.0 / a2);
    let expect = [
        ("kappa0", a1 * sigma),
        ("r0", rho + a_s * mu - 0.5 * a_s * a1 * sigma * sigma),
        ("kappa_PE0", a_s * sigma),
        ("r_PE0", rho + a_s * mu - 0.5 * a_s * a_s * sigma * sigma),
    ];
    let start = Instant::now();
    run_solve(&config_path("pstar"), &ctx.out("solve_pstar")).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let s = read_json(&ctx.tmp.path().join("solve_pstar/summary.json"));
    let got = |k: &str| s["initial"][k].as_f64().or_else(|| s["benchmarks"][k].as_f64()).unwrap();
    let mut ok = elapsed < 5.0;
    let mut parts = Vec::new();
    for (k, v) in expect {
        let g = got(k);
        ok &= (g - v).abs() <= 1e-9;
        parts.push(format!("{k}={g}"));
    }
    let sig_a = s["paths"]["sigma_a_max_abs"].as_f64().unwrap();
    ok &= sig_a == 0.0;
    outcome(ok, format!("{} sup|sigma_A|={sig_a} runtime={elapsed:.2}s", parts.join(" ")))
}

fn backend_agreement(_: &mut Ctx) -> Outcome {
    let m = model("pstar");
    let reference = solve_constant(&m, 20_000).unwrap();
    let deviation = |spec: &GridSpec| {
        let grid = Grid::build(&m, spec).unwrap();
        let field = auto_truncation(&m, &grid, 64).unwrap().field;
        let s = field.sample(0.0, m.d0).unwrap();
        (s.a - reference.a[0])
            .abs()
            .max((s.y1 - reference.y1[0]).abs())
            .max((s.y2 - reference.y2[0]).abs())
    };
    let coarse = GridSpec::default();
    let fine = GridSpec {
        n_time: 4 * coarse.n_time,
        n_space: 2 * coarse.n_space,
        ..coarse
    };
    let (e0, e1) = (deviation(&coarse), deviation(&fine));
    let order = (e0 / e1).log2();
    outcome(e0 <= 5e-3 && order >= 1.0, format!("deviation {e0:.3e} -> {e1:.3e}, order {order:.2}"))
}

fn clearing(ctx: &mut Ctx) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["pstar", "tanh"] {
        let r = ctx.report(name);
        let (pass, bad) = all_pass(r, &["clearing_consumption", "clearing_annuity", "clearing_wealth", "clearing_halving"]);
        let dt = r.metadata.dt;
        let worst = ["clearing_consumption", "clearing_annuity", "clearing_wealth"]
            .iter()
            .map(|n| r.check(n).unwrap().statistic)
            .fold(0.0f64, f64::max);
        let halving = r.check("clearing_halving").unwrap().statistic;
        let mut line_ok = pass && r.metadata.n_paths >= 10_000 && halving <= HALVING_RATIO;
        if name == "pstar" {
            // raw residuals, without the sup A scaling of the wealth threshold
            line_ok &= worst <= 10.0 * dt;
        }
        ok &= line_ok;
        let wealth_threshold = r.check("clearing_wealth").unwrap().threshold;
        parts.push(format!(
            "{name}: max {worst:.3e} (10dt={:.3e}, wealth threshold {wealth_threshold:.3e}) halving {halving:.3} {bad:?}",
            10.0 * dt
        ));
    }
    outcome(ok, parts.join("; "))
}

const MARTINGALES: [&str; 6] = [
    "martingale_annuity",
    "martingale_stock",
    "martingale_wealth1",
    "martingale_wealth2",
    "replication_stock",
    "replication_annuity",
];

fn martingales(ctx: &mut Ctx) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["pstar", "tanh"] {
        let (pass, bad) = all_pass(ctx.report(name), &MARTINGALES);
        ok &= pass;
        parts.push(format!("{name}: {} {bad:?}", if pass { "flat" } else { "not flat" }));
    }
    let corrupt = run_verify(&config_path("pstar"), &ctx.out("verify_corrupt"), Some(1.5)).unwrap().report;
    let (suite_pass, failed) = all_pass(&corrupt, &MARTINGALES);
    ok &= !suite_pass && !corrupt.overall_pass;
    parts.push(format!("corrupt kappa x1.5 fails {failed:?}"));
    outcome(ok, parts.join("; "))
}

fn optimality(ctx: &mut Ctx) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["pstar", "tanh"] {
        let r = ctx.report(name);
        let mut names = vec!["duality_gap".to_string(), "value_process_agent2".into(), "feynman_kac_y1".into()];
        names.extend(r.checks.iter().filter(|c| c.name.starts_with("perturbation_")).map(|c| c.name.clone()));
        let n_pert = names.len() - 3;
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let (pass, bad) = all_pass(r, &refs);
        ok &= pass && n_pert >= 8;
        parts.push(format!("{name}: {n_pert} perturbations {bad:?}"));
    }
    outcome(ok, parts.join("; "))
}

fn identities(ctx: &mut Ctx) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["pstar", "tanh"] {
        let r = ctx.report(name);
        let (pass, bad) = all_pass(r, &["identity_mu_s", "identity_short_rate"]);
        let n = r.check("identity_short_rate").map_or(0, |c| c.n_samples);
        ok &= pass && n >= 1000;
        parts.push(format!("{name}: {n} samples {bad:?}"));
    }

    let m = model("tanh");
    let rng = CounterRng::new(7, 0x4143_4345);
    let mut stream = rng.path(0);
    let (mut round_trip, mut band) = (0usize, 0usize);
    let n_band = 8.0;
    for _ in 0..10_000 {
        let mut u = || 2.0 * stream.next_uniform() - 1.0;
        let s = BsdeState {
            a: 6.0 * u(),
            y1: 6.0 * u(),
            y2: 6.0 * u(),
            z_a: 3.0 * u(),
            z1: 3.0 * u(),
            z2: 3.0 * u(),
        };
        let (t, d) = (0.5 * (1.0 + u()), 3.0 * u());
        let (a, z_a, y2, z2) = from_diagonal(m.alpha_sigma, &to_diagonal(m.alpha_sigma, &s));
        if a.to_bits() != s.a.to_bits() || z_a.to_bits() != s.z_a.to_bits() || y2.to_bits() != s.y2.to_bits() || z2.to_bits() != s.z2.to_bits() {
            round_trip += 1;
        }
        let ga = driver_a(&m, t, d, &s).unwrap();
        let g2 = driver_y2(&m, t, d, &s).unwrap();
        if ga.to_bits() != driver_a_trunc(&m, n_band, t, d, &s).to_bits() || g2.to_bits() != driver_y2_trunc(&m, n_band, t, d, &s).to_bits() {
            band += 1;
        }
    }
    ok &= round_trip == 0 && band == 0;
    parts.push(format!("round-trip mismatches {round_trip}/10000, band mismatches {band}/10000"));
    outcome(ok, parts.join("; "))
}

fn bounds(_: &mut Ctx) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in SHIPPED {
        let (cfg, _) = load_config(&config_path(name)).unwrap();
        let m = cfg.market_model().unwrap();
        let solved = solve(&m, &cfg.grid, &cfg.truncation_config()).unwrap();
        let (a_min, a_lo) = (solved.backend.a_min(), a_lower_bound(&m));
        let (y2, y2_bound) = (solved.backend.y2_abs_max(), gronwall_y2_bound(&m));
        // the truncation ladder also runs on the finite-difference grid for constant models
        let (n0, change) = match (solved.truncation, solved.doubled_change) {
            (Some(t), Some(c)) => (t.n, c),
            _ => {
                let grid = Grid::build(&m, &cfg.grid).unwrap();
                let out = auto_truncation(&m, &grid, 64).unwrap();
                let field_a_min = out.field.a_min();
                ok &= field_a_min >= a_lo - 1e-6;
                (out.config.n, out.doubled_change)
            }
        };
        let line_ok = a_min >= a_lo - 1e-6 && y2 <= y2_bound && n0 <= 64 && change <= 1e-10;
        ok &= line_ok;
        parts.push(format!("{name}: a_min {a_min:.4} >= {a_lo:.4}, |y2| {y2:.4} <= {y2_bound:.4}, N0 {n0}, change {change:.1e}"));
    }
    outcome(ok, parts.join("; "))
}

fn reproducibility(ctx: &mut Ctx) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["pstar", "tanh"] {
        let runs: Vec<Vec<String>> = ["a", "b"]
            .iter()
            .map(|tag| run_solve(&config_path(name), &ctx.out(&format!("repro_{name}_{tag}"))).unwrap())
            .collect();
        let mut differing = Vec::new();
        for f in &runs[0] {
            let a = fs::read(ctx.tmp.path().join(format!("repro_{name}_a")).join(f)).unwrap();
            let b = fs::read(ctx.tmp.path().join(format!("repro_{name}_b")).join(f)).unwrap();
            if a != b {
                differing.push(f.clone());
            }
        }
        ok &= runs[0] == runs[1] && differing.is_empty();
        parts.push(format!("{name}: {} files, differing {differing:?}", runs[0].len()));
    }
    outcome(ok, parts.join("; "))
}

fn main() {
    let mut ctx = Ctx {
        tmp: TempDir::new().unwrap(),
        reports: Vec::new(),
    };
    let criteria: [(&str, fn(&mut Ctx) -> Outcome); 8] = [
        ("closed-form constants", closed_forms),
        ("backend agreement", backend_agreement),
        ("clearing", clearing),
        ("martingale and replication suite", martingales),
        ("optimality certificates", optimality),
        ("identities", identities),
        ("bounds and truncation", bounds),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f(&mut ctx);
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        println!("criterion {} [{name}]: {verdict} ({})", i + 1, o.detail);
        failed += usize::from(!o.passed);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
