//! The three commands. Each returns the names of the files it wrote.

use std::path::{Path, PathBuf};

use radner_core::equilibrium::{coefficients_at, pareto_benchmark, pareto_kappa, pareto_rate, prices_at, Coefficients};
use radner_core::verification::{check_clearing, fingerprint, prepare, run_checks, Prepared};
use radner_core::{Backend, Ensemble, Estimate, MarketModel, SolveSummary, VerificationReport};
use serde::Serialize;

use crate::config::{load_config, Format, RunConfig};
use crate::error::CliError;
use crate::output::{fmt_f64, resolve_out_dir, ArtifactWriter};

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub formats: Option<Vec<Format>>,
}

struct Loaded {
    config: RunConfig,
    bytes: Vec<u8>,
    model: MarketModel,
}

fn load(path: &Path, ov: &Overrides) -> Result<Loaded, CliError> {
    let (mut config, bytes) = load_config(path)?;
    if let Some(seed) = ov.seed {
        config.mc.seed = seed;
    }
    if let Some(f) = &ov.formats {
        if f.is_empty() {
            return Err(CliError::Config("--format: choose at least one of csv, json".into()));
        }
        config.output.formats = f.clone();
    }
    let model = config.market_model()?;
    Ok(Loaded { config, bytes, model })
}

fn writer(l: &Loaded, ov: &Overrides) -> Result<ArtifactWriter, CliError> {
    let dir = resolve_out_dir(ov.out.as_deref(), l.config.output.directory.as_deref());
    ArtifactWriter::create(dir, &l.config.output.formats)
}

fn solve_and_simulate(l: &Loaded) -> Result<Prepared, CliError> {
    let c = &l.config;
    Ok(prepare(&l.model, &c.grid, &c.truncation_config(), c.mc.n_paths, c.mc.seed)?)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct InitialValues {
    #[serde(rename = "S0")]
    pub s0: f64,
    #[serde(rename = "A0")]
    pub a0: f64,
    pub kappa0: f64,
    pub r0: f64,
    #[serde(rename = "sigma_A0")]
    pub sigma_a0: f64,
    #[serde(rename = "mu_A0")]
    pub mu_a0: f64,
    #[serde(rename = "sigma_S0")]
    pub sigma_s0: f64,
    #[serde(rename = "mu_S0")]
    pub mu_s0: f64,
    pub a: f64,
    pub y1: f64,
    pub y2: f64,
}

fn initial_values(model: &MarketModel, backend: &Backend) -> Result<InitialValues, CliError> {
    let s = backend.as_source().at(0.0, model.d0)?;
    let (a0, s0) = prices_at(model.alpha_sigma, &s, model.d0);
    let Coefficients {
        kappa,
        sigma_a,
        mu_a,
        sigma_s,
        mu_s,
        r,
    } = coefficients_at(model, &s, 0.0, model.d0);
    Ok(InitialValues {
        s0,
        a0,
        kappa0: kappa,
        r0: r,
        sigma_a0: sigma_a,
        mu_a0: mu_a,
        sigma_s0: sigma_s,
        mu_s0: mu_s,
        a: s.a,
        y1: s.y1,
        y2: s.y2,
    })
}

#[derive(Debug, Serialize)]
struct Benchmarks {
    #[serde(rename = "kappa_PE0")]
    kappa_pe0: f64,
    #[serde(rename = "r_PE0")]
    r_pe0: f64,
    #[serde(rename = "A0_PE")]
    a0_pe: Estimate,
    #[serde(rename = "S0_PE")]
    s0_pe: Estimate,
    /// Closed forms `(r_PE, kappa_PE)` for constant coefficients.
    closed_form: Option<(f64, f64)>,
    gamma: f64,
}

#[derive(Debug, Serialize)]
struct ClearingSummary {
    dt: f64,
    consumption: f64,
    annuity: f64,
    wealth: f64,
}

#[derive(Debug, Serialize)]
struct PathSummary {
    n_paths: usize,
    excluded: usize,
    exported: usize,
    /// Largest `|sigma_A|` over every simulated path and time node.
    sigma_a_max_abs: f64,
}

#[derive(Debug, Serialize)]
struct SolveReport {
    command: &'static str,
    model_fingerprint: String,
    seed: u64,
    solve: SolveSummary,
    initial: InitialValues,
    benchmarks: Benchmarks,
    clearing: ClearingSummary,
    paths: PathSummary,
}

fn benchmarks(model: &MarketModel, prepared: &Prepared) -> Benchmarks {
    let pe = pareto_benchmark(model, &prepared.paths);
    Benchmarks {
        kappa_pe0: pareto_kappa(model, 0.0, model.d0),
        r_pe0: pareto_rate(model, 0.0, model.d0),
        a0_pe: pe.a0,
        s0_pe: pe.s0,
        closed_form: pe.constants,
        gamma: pe.gamma,
    }
}

fn write_backend(out: &mut ArtifactWriter, backend: &Backend) -> Result<(), CliError> {
    match backend {
        Backend::Constant(sol) => {
            let header = ["t", "a", "y1", "y2", "A"].map(String::from);
            let rows = (0..sol.times.len()).map(|n| vec![sol.times[n], sol.a[n], sol.y1[n], sol.y2[n], sol.a[n].exp()]);
            out.numeric_csv("ode_solution.csv", &header, rows)
        }
        Backend::Field(f) => {
            let nodes = f.grid.nodes();
            let width = nodes.len();
            let times = f.grid.times();
            let mut header = vec!["t".to_string()];
            header.extend(nodes.iter().map(|&d| fmt_f64(d)));
            for (name, values) in [("a", &f.a), ("y1", &f.y1), ("y2", &f.y2), ("z_a", &f.z_a), ("z1", &f.z1), ("z2", &f.z2)] {
                let rows = times.iter().enumerate().map(|(n, &t)| {
                    let mut row = Vec::with_capacity(width + 1);
                    row.push(t);
                    row.extend_from_slice(&values[n * width..(n + 1) * width]);
                    row
                });
                out.numeric_csv(&format!("fields/{name}.csv"), &header, rows)?;
            }
            Ok(())
        }
    }
}

fn write_paths(out: &mut ArtifactWriter, ens: &Ensemble, count: usize) -> Result<usize, CliError> {
    let count = count.min(ens.len());
    if count == 0 {
        return Ok(0);
    }
    let mut header = vec!["path".to_string()];
    let mut rows = Vec::new();
    for k in 0..count {
        let p = ens.path(k)?;
        let cols = p.columns();
        if k == 0 {
            header.extend(cols.iter().map(|(name, _)| name.to_string()));
        }
        for n in 0..p.len() {
            let mut row = vec![p.index.to_string()];
            row.extend(cols.iter().map(|(_, v)| fmt_f64(v[n])));
            rows.push(row);
        }
    }
    out.csv("paths.csv", &header, rows)?;
    Ok(count)
}

/// Solves, builds the equilibrium paths and writes fields, paths and a summary.
pub fn run_solve(config_path: &Path, ov: &Overrides) -> Result<Vec<String>, CliError> {
    let l = load(config_path, ov)?;
    let prepared = solve_and_simulate(&l)?;
    let backend = &prepared.solved.backend;
    let ens = Ensemble::new(&l.model, backend.as_source(), &prepared.paths)?;
    let clearing = check_clearing(&ens)?;
    let sigma_a_max_abs = ens
        .map(|p| p.sigma_a.iter().fold(0.0f64, |m, v| m.max(v.abs())))?
        .into_iter()
        .fold(0.0f64, f64::max);

    let mut out = writer(&l, ov)?;
    let exported = if out.wants(Format::Csv) {
        write_backend(&mut out, backend)?;
        write_paths(&mut out, &ens, l.config.output.export_paths)?
    } else {
        0
    };
    let report = SolveReport {
        command: "solve",
        model_fingerprint: fingerprint(&l.model),
        seed: l.config.mc.seed,
        solve: prepared.solved.summary(l.config.grid.n_time),
        initial: initial_values(&l.model, backend)?,
        benchmarks: benchmarks(&l.model, &prepared),
        clearing: ClearingSummary {
            dt: ens.dt(),
            consumption: clearing[0].statistic,
            annuity: clearing[1].statistic,
            wealth: clearing[2].statistic,
        },
        paths: PathSummary {
            n_paths: prepared.paths.n_paths,
            excluded: ens.excluded,
            exported,
            sigma_a_max_abs,
        },
    };
    if out.wants(Format::Json) {
        out.json("summary.json", &report)?;
    }
    out.note("backend", backend.name());
    out.finish("solve", &l.bytes, l.config.mc.seed, l.config.mc.n_paths)
}

/// Outcome of `verify`; the report files are written whether or not it passed.
pub struct VerifyOutcome {
    pub report: VerificationReport,
    pub files: Vec<String>,
    pub dir: PathBuf,
}

pub fn run_verify(config_path: &Path, ov: &Overrides, corrupt_kappa: Option<f64>) -> Result<VerifyOutcome, CliError> {
    let l = load(config_path, ov)?;
    let opts = l.config.verify_options(corrupt_kappa)?;
    if let Some(f) = corrupt_kappa {
        if !f.is_finite() {
            return Err(CliError::Config(format!("--corrupt-kappa: expected a finite factor, got {f}")));
        }
    }
    let prepared = solve_and_simulate(&l)?;
    let report = run_checks(&l.model, &l.config.grid, &prepared, &opts)?;

    let mut out = writer(&l, ov)?;
    if out.wants(Format::Json) {
        out.json("report.json", &report)?;
    }
    if out.wants(Format::Csv) {
        let header = ["name", "statistic", "threshold", "passed", "mandatory", "n_samples", "details"].map(String::from);
        let rows = report.checks.iter().map(|c| {
            vec![
                c.name.clone(),
                fmt_f64(c.statistic),
                fmt_f64(c.threshold),
                c.passed.to_string(),
                c.mandatory.to_string(),
                c.n_samples.to_string(),
                c.details.clone(),
            ]
        });
        out.csv("report.csv", &header, rows)?;
    }
    out.note("backend", prepared.solved.backend.name());
    out.note("overall_pass", report.overall_pass);
    if let Some(f) = corrupt_kappa {
        out.note("corrupt_kappa", f);
    }
    let dir = out.dir().to_path_buf();
    let files = out.finish("verify", &l.bytes, l.config.mc.seed, l.config.mc.n_paths)?;
    Ok(VerifyOutcome { report, files, dir })
}

/// Plain-text table of a verification report.
pub fn report_table(report: &VerificationReport) -> String {
    let width = report.checks.iter().map(|c| c.name.len()).max().unwrap_or(4).max(5);
    let mut s = format!("{:<width$}  {:>12}  {:>12}  result\n", "check", "statistic", "threshold");
    for c in &report.checks {
        let verdict = match (c.passed, c.mandatory) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "info",
        };
        s.push_str(&format!("{:<width$}  {:>12.4e}  {:>12.4e}  {verdict}\n", c.name, c.statistic, c.threshold));
    }
    s.push_str(&format!(
        "overall: {} ({} paths, {} steps, backend {})\n",
        if report.overall_pass { "PASS" } else { "FAIL" },
        report.metadata.n_paths,
        report.metadata.n_steps,
        report.metadata.backend
    ));
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub quantity: &'static str,
    pub value: f64,
    pub value_se: f64,
    pub benchmark: f64,
    pub benchmark_se: f64,
    /// `value - benchmark`.
    pub margin: f64,
    pub margin_se: f64,
    pub ratio: f64,
    /// Sign the margin is expected to have, if any.
    pub expected_sign: Option<i8>,
    pub flag: Option<bool>,
}

impl ComparisonRow {
    fn new(quantity: &'static str, value: f64, benchmark: Estimate, expected_sign: Option<i8>) -> Self {
        let margin = value - benchmark.mean;
        Self {
            quantity,
            value,
            value_se: 0.0,
            benchmark: benchmark.mean,
            benchmark_se: benchmark.se,
            margin,
            margin_se: benchmark.se,
            ratio: value / benchmark.mean,
            expected_sign,
            flag: expected_sign.map(|s| f64::from(s) * margin > 0.0),
        }
    }
}

pub fn comparison_rows(model: &MarketModel, prepared: &Prepared) -> Result<Vec<ComparisonRow>, CliError> {
    let init = initial_values(model, &prepared.solved.backend)?;
    let b = benchmarks(model, prepared);
    let exact = |v: f64| Estimate { mean: v, se: 0.0, n: 1 };
    Ok(vec![
        ComparisonRow::new("kappa", init.kappa0, exact(b.kappa_pe0), Some(1)),
        ComparisonRow::new("r", init.r0, exact(b.r_pe0), Some(-1)),
        ComparisonRow::new("A0", init.a0, b.a0_pe, None),
        ComparisonRow::new("S0", init.s0, b.s0_pe, None),
    ])
}

/// Limited-participation quantities against the Pareto-efficient benchmark.
pub fn run_compare(config_path: &Path, ov: &Overrides) -> Result<(Vec<ComparisonRow>, Vec<String>), CliError> {
    let l = load(config_path, ov)?;
    let prepared = solve_and_simulate(&l)?;
    let rows = comparison_rows(&l.model, &prepared)?;
    let mut out = writer(&l, ov)?;
    if out.wants(Format::Json) {
        out.json("comparison.json", &rows)?;
    }
    if out.wants(Format::Csv) {
        let header = ["quantity", "value", "value_se", "benchmark", "benchmark_se", "margin", "margin_se", "ratio", "expected_sign", "flag"].map(String::from);
        let csv_rows = rows.iter().map(|r| {
            vec![
                r.quantity.to_string(),
                fmt_f64(r.value),
                fmt_f64(r.value_se),
                fmt_f64(r.benchmark),
                fmt_f64(r.benchmark_se),
                fmt_f64(r.margin),
                fmt_f64(r.margin_se),
                fmt_f64(r.ratio),
                r.expected_sign.map_or(String::new(), |s| s.to_string()),
                r.flag.map_or(String::new(), |f| f.to_string()),
            ]
        });
        out.csv("comparison.csv", &header, csv_rows)?;
    }
    out.note("backend", prepared.solved.backend.name());
    let files = out.finish("compare", &l.bytes, l.config.mc.seed, l.config.mc.n_paths)?;
    Ok((rows, files))
}

pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let mut s = format!("{:<8}  {:>14}  {:>14}  {:>12}  {:>10}  flag\n", "quantity", "value", "benchmark", "margin", "se");
    for r in rows {
        let flag = r.flag.map_or("-".to_string(), |f| f.to_string());
        s.push_str(&format!(
            "{:<8}  {:>14.8}  {:>14.8}  {:>12.4e}  {:>10.2e}  {flag}\n",
            r.quantity, r.value, r.benchmark, r.margin, r.margin_se
        ));
    }
    s
}
