//! Configuration-driven pipeline: parse a TOML problem config (or preset),
//! run validate -> solve -> monitor, and emit CSV field dumps plus a single
//! JSON run log.
//!
//! Exit codes: 0 solve and monitors pass, 1 monitors fail or I/O error,
//! 2 subsolution validation failure, 3 homotopy stall, 4 config error.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{parse as parse_expr, ExprAst};
use crate::geometry::{Grid, MetricField, ScalarField};
use crate::monitors::{self, DiagnosticsReport};
use crate::oracles::{manufactured_problem, random_cone_spectrum, ManufacturedParts, OracleError};
use crate::problem::{
    LinearSolverChoice, ProblemError, ProblemSpec, Rhs, SolverSettings, SubsolutionReport,
};
use crate::solver::{
    continuity_solve_with, jacobian_fd_check, residual, HomotopyContext, SolverError, TStepRecord,
};
use crate::spectral::{ConeParams, Spectrum, StructureReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_STALL: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

/// Command-line interface of the `pluris` binary.
#[derive(Debug, Parser)]
#[command(
    name = "pluris",
    about = "Solve Dirichlet problems for Monge-Ampere type equations of p-plurisubharmonic functions"
)]
pub struct CliArgs {
    /// Path to a TOML problem configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides the config's output.directory).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Override points per axis.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Override the tuple size p.
    #[arg(long)]
    pub p: Option<usize>,
    /// Override the number of continuity steps.
    #[arg(long)]
    pub continuity_steps: Option<usize>,
    /// Override the Newton tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Override the Newton iteration cap.
    #[arg(long)]
    pub max_newton: Option<usize>,
    /// Diagnostics level: off, basic or full.
    #[arg(long)]
    pub diagnostics: Option<DiagLevel>,
    /// Seed for the randomized property battery (diagnostics = full).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated list of fields to dump as CSV
    /// (u, subsolution, supersolution, residual, rhs, cone_margin).
    #[arg(long)]
    pub dump_fields: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DiagLevel {
    Off,
    Basic,
    Full,
}

// ---------------------------------------------------------------------------
// Config file model (strict: unknown keys are rejected)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    /// Name of a shipped preset; mutually exclusive with `[problem]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<ProblemConfig>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub diagnostics: DiagConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub n: usize,
    pub p: usize,
    /// Points per axis; defaults to 33 for n <= 3 and 17 for n = 4.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<usize>,
    /// "identity", "conformal" or "entries".
    #[serde(default = "default_metric")]
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conformal_factor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric_entries: Option<Vec<String>>,
    /// Augmented tensor entries in (x, z, p), row-major n*n.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<String>>,
    /// Right-hand side f(x, z, p) > 0. Required unless `u_star` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsolution: Option<String>,
    /// Manufactured exact solution; derives f, phi and the subsolution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_star: Option<String>,
    /// Bump depth of the manufactured subsolution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

fn default_metric() -> String {
    "identity".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub continuity_steps: usize,
    pub tol_newton: f64,
    pub max_newton: usize,
    pub max_bisections: usize,
    pub linear_solver: String,
    pub krylov_tol: f64,
    pub krylov_max_iter: usize,
    pub tol_validate: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let s = SolverSettings::default();
        SolverConfig {
            continuity_steps: s.continuity_steps,
            tol_newton: s.tol_newton,
            max_newton: s.max_newton,
            max_bisections: s.max_bisections,
            linear_solver: "auto".into(),
            krylov_tol: s.krylov_tol,
            krylov_max_iter: s.krylov_max_iter,
            tol_validate: s.tol_validate,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: String,
    pub dump_fields: Vec<String>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            directory: "out".into(),
            dump_fields: vec!["u".into()],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagConfig {
    pub level: DiagLevel,
    pub seed: u64,
    pub structure_samples: usize,
}

impl Default for DiagConfig {
    fn default() -> Self {
        DiagConfig {
            level: DiagLevel::Basic,
            seed: 0,
            structure_samples: 200,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config error: {0}")]
    Invalid(String),
    #[error("unknown preset `{0}` (available: poisson2d, poisson2d_mms, ma2d, ma2d_mms, pma_half, pma_half_mms)")]
    UnknownPreset(String),
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

fn preset_problem(name: &str) -> Option<ProblemConfig> {
    let p = match name {
        "poisson2d" => ProblemConfig {
            n: 2,
            p: 2,
            grid: None,
            metric: "identity".into(),
            conformal_factor: None,
            metric_entries: None,
            a: None,
            f: Some("1 + 0.5*sin(pi*x1)*sin(pi*x2)".into()),
            phi: Some("(x1^2 + x2^2)/2".into()),
            subsolution: Some("(x1^2 + x2^2)/2".into()),
            u_star: None,
            beta: None,
        },
        "poisson2d_mms" => ProblemConfig {
            n: 2,
            p: 2,
            grid: None,
            metric: "identity".into(),
            conformal_factor: None,
            metric_entries: None,
            a: None,
            f: None,
            phi: None,
            subsolution: None,
            u_star: Some("(x1^2 + x2^2)/2 + 0.1*sin(pi*x1)*sin(pi*x2)".into()),
            beta: Some(0.25),
        },
        "ma2d" => ProblemConfig {
            n: 2,
            p: 1,
            grid: None,
            metric: "identity".into(),
            conformal_factor: None,
            metric_entries: None,
            a: Some(vec!["0.1".into(), "0".into(), "0".into(), "0.1".into()]),
            f: Some(
                "(1 + 8*x1*(1-x1)*x2*(1-x2)) * exp(z/10) * (1 + (p1^2 + p2^2)/100)".into(),
            ),
            phi: Some("0.75*(x1^2 + x2^2)".into()),
            subsolution: Some("0.75*(x1^2 + x2^2)".into()),
            u_star: None,
            beta: None,
        },
        "ma2d_mms" => ProblemConfig {
            n: 2,
            p: 1,
            grid: None,
            metric: "identity".into(),
            conformal_factor: None,
            metric_entries: None,
            a: None,
            f: None,
            phi: None,
            subsolution: None,
            u_star: Some("(x1^2 + x2^2)/2 + 0.05*sin(pi*x1)*sin(pi*x2)".into()),
            beta: Some(0.25),
        },
        "pma_half" => ProblemConfig {
            n: 4,
            p: 2,
            grid: None,
            metric: "conformal".into(),
            conformal_factor: Some("0.05*(x1 + x2 + x3 + x4)".into()),
            metric_entries: None,
            a: None,
            f: Some("1 + x1*x2".into()),
            phi: Some("0.75*(x1^2 + x2^2 + x3^2 + x4^2)".into()),
            subsolution: Some("0.75*(x1^2 + x2^2 + x3^2 + x4^2)".into()),
            u_star: None,
            beta: None,
        },
        "pma_half_mms" => ProblemConfig {
            n: 4,
            p: 2,
            grid: Some(11),
            metric: "conformal".into(),
            conformal_factor: Some("0.05*(x1 + x2 + x3 + x4)".into()),
            metric_entries: None,
            a: None,
            f: None,
            phi: None,
            subsolution: None,
            u_star: Some(
                "0.75*(x1^2 + x2^2 + x3^2 + x4^2) + 0.02*sin(pi*x1)*sin(pi*x2)*sin(pi*x3)*sin(pi*x4)"
                    .into(),
            ),
            beta: Some(0.05),
        },
        _ => return None,
    };
    Some(p)
}

/// Full config for a shipped preset name.
pub fn preset_config(name: &str) -> Result<FileConfig, ConfigError> {
    let problem =
        preset_problem(name).ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))?;
    Ok(FileConfig {
        preset: None,
        problem: Some(problem),
        solver: SolverConfig::default(),
        output: OutputConfig::default(),
        diagnostics: DiagConfig::default(),
    })
}

// ---------------------------------------------------------------------------
// Config resolution and spec construction
// ---------------------------------------------------------------------------

/// Parse the config text, expand a preset reference and apply CLI overrides.
pub fn resolve_config(text: &str, args: &CliArgs) -> Result<FileConfig, ConfigError> {
    let file: FileConfig = toml::from_str(text)?;
    let mut resolved = match (&file.preset, &file.problem) {
        (Some(name), None) => {
            let mut cfg = preset_config(name)?;
            cfg.solver = file.solver;
            cfg.output = file.output;
            cfg.diagnostics = file.diagnostics;
            cfg
        }
        (None, Some(_)) => file,
        (Some(_), Some(_)) => {
            return Err(ConfigError::Invalid(
                "give either `preset` or a [problem] section, not both".into(),
            ))
        }
        (None, None) => {
            return Err(ConfigError::Invalid(
                "config needs a `preset` key or a [problem] section".into(),
            ))
        }
    };

    let problem = resolved.problem.as_mut().expect("problem resolved above");
    if let Some(g) = args.grid {
        problem.grid = Some(g);
    }
    if let Some(p) = args.p {
        problem.p = p;
    }
    if let Some(steps) = args.continuity_steps {
        resolved.solver.continuity_steps = steps;
    }
    if let Some(tol) = args.tol {
        resolved.solver.tol_newton = tol;
    }
    if let Some(cap) = args.max_newton {
        resolved.solver.max_newton = cap;
    }
    if let Some(level) = args.diagnostics {
        resolved.diagnostics.level = level;
    }
    if let Some(seed) = args.seed {
        resolved.diagnostics.seed = seed;
    }
    if let Some(fields) = &args.dump_fields {
        resolved.output.dump_fields = fields
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
    }
    if let Some(dir) = &args.out_dir {
        resolved.output.directory = dir.display().to_string();
    }
    validate_config(&resolved)?;
    Ok(resolved)
}

const DUMPABLE_FIELDS: [&str; 6] = [
    "u",
    "subsolution",
    "supersolution",
    "residual",
    "rhs",
    "cone_margin",
];

fn validate_config(cfg: &FileConfig) -> Result<(), ConfigError> {
    let problem = cfg
        .problem
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid("missing [problem]".into()))?;
    if !(2..=4).contains(&problem.n) {
        return Err(ConfigError::Invalid(format!(
            "grid problems support n in 2..=4, got {}",
            problem.n
        )));
    }
    if problem.p < 1 || problem.p > problem.n {
        return Err(ConfigError::Invalid(format!(
            "need 1 <= p <= n, got p = {}, n = {}",
            problem.p, problem.n
        )));
    }
    if problem.n == 4 {
        if let Some(g) = problem.grid {
            if g > 17 {
                return Err(ConfigError::Invalid(format!(
                    "n = 4 grids are capped at 17 points per axis, got {g}"
                )));
            }
        }
    }
    let manufactured = problem.u_star.is_some();
    if manufactured {
        if problem.f.is_some() || problem.phi.is_some() || problem.subsolution.is_some() {
            return Err(ConfigError::Invalid(
                "`u_star` derives f, phi and subsolution; remove those keys".into(),
            ));
        }
    } else if problem.f.is_none() || problem.phi.is_none() || problem.subsolution.is_none() {
        return Err(ConfigError::Invalid(
            "non-manufactured problems need `f`, `phi` and `subsolution`".into(),
        ));
    }
    match problem.metric.as_str() {
        "identity" => {}
        "conformal" => {
            if problem.conformal_factor.is_none() {
                return Err(ConfigError::Invalid(
                    "metric = \"conformal\" needs `conformal_factor`".into(),
                ));
            }
        }
        "entries" => match &problem.metric_entries {
            Some(es) if es.len() == problem.n * problem.n => {}
            _ => {
                return Err(ConfigError::Invalid(format!(
                    "metric = \"entries\" needs `metric_entries` with {} expressions",
                    problem.n * problem.n
                )))
            }
        },
        other => {
            return Err(ConfigError::Invalid(format!(
                "unknown metric kind `{other}` (use identity, conformal or entries)"
            )))
        }
    }
    match cfg.solver.linear_solver.as_str() {
        "auto" | "direct" | "iterative" => {}
        other => {
            return Err(ConfigError::Invalid(format!(
                "unknown linear_solver `{other}` (use auto, direct or iterative)"
            )))
        }
    }
    for field in &cfg.output.dump_fields {
        if !DUMPABLE_FIELDS.contains(&field.as_str()) {
            return Err(ConfigError::Invalid(format!(
                "unknown dump field `{field}` (available: {})",
                DUMPABLE_FIELDS.join(", ")
            )));
        }
    }
    Ok(())
}

fn solver_settings(cfg: &SolverConfig) -> SolverSettings {
    SolverSettings {
        continuity_steps: cfg.continuity_steps,
        tol_newton: cfg.tol_newton,
        max_newton: cfg.max_newton,
        max_bisections: cfg.max_bisections,
        linear_solver: match cfg.linear_solver.as_str() {
            "direct" => LinearSolverChoice::Direct,
            "iterative" => LinearSolverChoice::Iterative,
            _ => LinearSolverChoice::Auto,
        },
        krylov_tol: cfg.krylov_tol,
        krylov_max_iter: cfg.krylov_max_iter,
        tol_validate: cfg.tol_validate,
    }
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("expression error in `{field}`: {source}")]
    Expr {
        field: String,
        source: crate::expr::ExprError,
    },
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Spectral(#[from] crate::spectral::SpectralError),
}

fn parse_named(text: &str, n: usize, field: &str) -> Result<ExprAst, BuildError> {
    parse_expr(text, n).map_err(|source| BuildError::Expr {
        field: field.to_string(),
        source,
    })
}

/// Construct the problem instance described by a resolved config.
pub fn build_spec(cfg: &FileConfig) -> Result<ProblemSpec, BuildError> {
    let problem = cfg
        .problem
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid("missing [problem]".into()))?;
    let n = problem.n;
    let points = problem.grid.unwrap_or(if n == 4 { 17 } else { 33 });
    let grid = Grid::uniform(n, points)?;
    let cp = ConeParams::new(n, problem.p)?;
    let metric = match problem.metric.as_str() {
        "conformal" => {
            let q = parse_named(
                problem.conformal_factor.as_ref().expect("validated"),
                n,
                "conformal_factor",
            )?;
            MetricField::conformal(&grid, &q)?
        }
        "entries" => {
            let entries = problem
                .metric_entries
                .as_ref()
                .expect("validated")
                .iter()
                .enumerate()
                .map(|(i, s)| parse_named(s, n, &format!("metric_entries[{i}]")))
                .collect::<Result<Vec<_>, _>>()?;
            MetricField::from_expressions(&grid, &entries)?
        }
        _ => MetricField::identity(&grid),
    };
    let a_entries = match &problem.a {
        Some(entries) => {
            if entries.len() != n * n {
                return Err(ConfigError::Invalid(format!(
                    "`a` needs {} entries, got {}",
                    n * n,
                    entries.len()
                ))
                .into());
            }
            Some(
                entries
                    .iter()
                    .enumerate()
                    .map(|(i, s)| parse_named(s, n, &format!("a[{i}]")))
                    .collect::<Result<Vec<_>, _>>()?,
            )
        }
        None => None,
    };
    let settings = solver_settings(&cfg.solver);

    if let Some(u_star_text) = &problem.u_star {
        let u_star = parse_named(u_star_text, n, "u_star")?;
        let parts = ManufacturedParts {
            cp,
            grid,
            metric,
            a_entries,
            settings,
            beta: problem.beta.unwrap_or(0.25),
        };
        return Ok(manufactured_problem(&u_star, parts)?);
    }

    let f = parse_named(problem.f.as_ref().expect("validated"), n, "f")?;
    let phi = parse_named(problem.phi.as_ref().expect("validated"), n, "phi")?;
    let subsolution = parse_named(
        problem.subsolution.as_ref().expect("validated"),
        n,
        "subsolution",
    )?;
    Ok(ProblemSpec::new(
        cp,
        grid,
        metric,
        a_entries,
        Rhs::Expr(f),
        phi,
        subsolution,
        settings,
    )?)
}

// ---------------------------------------------------------------------------
// CSV field dumps
// ---------------------------------------------------------------------------

/// Write a grid field as CSV with header `x1,...,xn,value` in row-major grid
/// order. Values round-trip exactly through the shortest-representation
/// float formatting.
pub fn write_field_csv(path: &Path, field: &ScalarField) -> Result<(), std::io::Error> {
    let grid = field.grid();
    let n = grid.dim();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    header.push("value".into());
    w.write_record(&header)?;
    let mut x = vec![0.0; n];
    for lin in 0..grid.len() {
        grid.coords_into(lin, &mut x);
        let mut record: Vec<String> = x.iter().map(|v| format!("{v}")).collect();
        record.push(format!("{}", field.get(lin)));
        w.write_record(&record)?;
    }
    w.flush()
}

/// Read back a CSV field dump; returns the dimension and the values in file
/// (row-major grid) order.
pub fn read_field_csv(path: &Path) -> Result<(usize, Vec<f64>), std::io::Error> {
    let mut r = csv::Reader::from_path(path)?;
    let n = r.headers()?.len() - 1;
    let mut values = Vec::new();
    for record in r.records() {
        let record = record?;
        let v: f64 = record[n]
            .parse()
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{e}")))?;
        values.push(v);
    }
    Ok((n, values))
}

// ---------------------------------------------------------------------------
// Run log
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct SolutionSummary {
    pub residual_sup: f64,
    pub residual_l2: f64,
    pub cone_margin: f64,
    pub continuity_steps: usize,
}

#[derive(Debug, Serialize)]
pub struct RunLog {
    pub config: FileConfig,
    pub validation: Option<SubsolutionReport>,
    pub homotopy: Vec<TStepRecord>,
    pub solution: Option<SolutionSummary>,
    pub diagnostics: Option<DiagnosticsReport>,
    pub random_structure: Option<StructureReport>,
    pub jacobian_probe: Option<f64>,
    pub outputs: Vec<String>,
    pub error: Option<String>,
    /// Timestamps live here so the rest of the log is reproducible.
    pub meta: RunMeta,
}

#[derive(Debug, Serialize, Default)]
pub struct RunMeta {
    pub started_unix_ms: u128,
    pub duration_ms: u128,
}

fn write_log(out_dir: &Path, log: &RunLog) -> Result<PathBuf, std::io::Error> {
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join("run_log.json");
    let text = serde_json::to_string_pretty(log).expect("log serializes");
    fs::write(&path, text)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// Outcome of a full pipeline run, independent of process exit handling.
pub struct RunOutcome {
    pub exit_code: i32,
    pub message: String,
    pub log_path: Option<PathBuf>,
}

/// Run the pipeline for an already resolved config.
pub fn run_pipeline(cfg: FileConfig) -> RunOutcome {
    let started = Instant::now();
    let started_unix_ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let out_dir = PathBuf::from(&cfg.output.directory);
    let mut log = RunLog {
        config: cfg.clone(),
        validation: None,
        homotopy: Vec::new(),
        solution: None,
        diagnostics: None,
        random_structure: None,
        jacobian_probe: None,
        outputs: Vec::new(),
        error: None,
        meta: RunMeta::default(),
    };

    let finish = |mut log: RunLog, exit_code: i32, message: String| -> RunOutcome {
        log.meta.started_unix_ms = started_unix_ms;
        log.meta.duration_ms = started.elapsed().as_millis();
        match write_log(&out_dir, &log) {
            Ok(path) => RunOutcome {
                exit_code,
                message,
                log_path: Some(path),
            },
            Err(e) => RunOutcome {
                exit_code: if exit_code == EXIT_OK { EXIT_FAILURE } else { exit_code },
                message: format!("{message}; additionally failed to write run log: {e}"),
                log_path: None,
            },
        }
    };

    // build
    let spec = match build_spec(&cfg) {
        Ok(spec) => spec,
        Err(err) => {
            let code = match &err {
                BuildError::Config(_) | BuildError::Expr { .. } => EXIT_CONFIG,
                BuildError::Oracle(OracleError::InadmissibleExactSolution { .. }) => {
                    EXIT_VALIDATION
                }
                _ => EXIT_CONFIG,
            };
            let message = format!("failed to build problem: {err}");
            log.error = Some(message.clone());
            return finish(log, code, message);
        }
    };

    // validate
    let validation = match spec.validate_subsolution() {
        Ok(report) => report,
        Err(err) => {
            let message = format!("validation could not be evaluated: {err}");
            log.error = Some(message.clone());
            return finish(log, EXIT_CONFIG, message);
        }
    };
    let validation_pass = validation.pass;
    let failing = validation.failing_points.clone();
    log.validation = Some(validation);
    if !validation_pass {
        let mut message = String::from("subsolution validation failed");
        for fp in failing.iter().take(8) {
            message.push_str(&format!(
                "\n  {} at grid point {:?}: margin {:.3e}",
                fp.kind, fp.index, fp.margin
            ));
        }
        log.error = Some(message.clone());
        return finish(log, EXIT_VALIDATION, message);
    }

    // solve
    let ctx = match HomotopyContext::new(&spec) {
        Ok(ctx) => ctx,
        Err(err) => {
            let message = format!("cannot start homotopy: {err}");
            log.error = Some(message.clone());
            return finish(log, EXIT_VALIDATION, message);
        }
    };
    let result = match continuity_solve_with(&ctx) {
        Ok(result) => result,
        Err(err) => {
            let (code, message) = match &err {
                SolverError::HomotopyStall { last_good_t, .. } => (
                    EXIT_STALL,
                    format!("homotopy stalled (last good t = {last_good_t}): {err}"),
                ),
                _ => (EXIT_STALL, format!("solve failed: {err}")),
            };
            log.error = Some(message.clone());
            return finish(log, code, message);
        }
    };
    log.homotopy = result.log.clone();
    log.solution = Some(SolutionSummary {
        residual_sup: result.final_residual_sup,
        residual_l2: result.final_residual_l2,
        cone_margin: result.final_cone_margin,
        continuity_steps: result.log.len(),
    });

    // monitors
    let mut monitors_pass = true;
    if cfg.diagnostics.level != DiagLevel::Off {
        match monitors::run_monitors(&spec, &result.u) {
            Ok(report) => {
                monitors_pass = report.pass;
                log.diagnostics = Some(report);
            }
            Err(err) => {
                let message = format!("monitors failed to run: {err}");
                log.error = Some(message.clone());
                return finish(log, EXIT_FAILURE, message);
            }
        }
    }
    if cfg.diagnostics.level == DiagLevel::Full {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.diagnostics.seed);
        let samples: Vec<Spectrum> = (0..cfg.diagnostics.structure_samples)
            .map(|_| random_cone_spectrum(&mut rng, spec.cp()))
            .collect();
        match monitors::structure_from_samples(&samples, spec.cp(), 1e-9) {
            Ok(report) => log.random_structure = Some(report),
            Err(err) => {
                log.error = Some(format!("random structure battery failed: {err}"));
            }
        }
        // smooth random direction: low-frequency modes keep the directional
        // second differences O(1), so the probe is not rounded away by the
        // 1/h^2 amplification of white noise
        let v: Vec<f64> = {
            use rand::Rng;
            let n = spec.grid().dim();
            let amps: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut x = vec![0.0; n];
            let mut v: Vec<f64> = ctx
                .interior()
                .iter()
                .map(|&lin| {
                    spec.grid().coords_into(lin, &mut x);
                    amps.iter()
                        .enumerate()
                        .map(|(k, a)| {
                            let freq = (k + 1) as f64 * std::f64::consts::PI;
                            a * x.iter().map(|xi| (freq * xi).sin()).product::<f64>()
                        })
                        .sum()
                })
                .collect();
            let sup = v.iter().fold(0.0_f64, |a, b| a.max(b.abs())).max(1e-12);
            v.iter_mut().for_each(|vi| *vi /= sup);
            v
        };
        if let Ok(dev) = jacobian_fd_check(&ctx, &result.u, 1.0, &v, 1e-7) {
            log.jacobian_probe = Some(dev);
        }
    }

    // field dumps
    if let Err(e) = fs::create_dir_all(&out_dir) {
        let message = format!("cannot create output directory: {e}");
        log.error = Some(message.clone());
        return finish(log, EXIT_FAILURE, message);
    }
    match dump_fields(&cfg, &spec, &ctx, &result.u, &out_dir) {
        Ok(written) => log.outputs = written,
        Err(e) => {
            let message = format!("failed to write field dumps: {e}");
            log.error = Some(message.clone());
            return finish(log, EXIT_FAILURE, message);
        }
    }

    if monitors_pass {
        let summary = format!(
            "solved: residual sup {:.3e}, cone margin {:.3e}, {} homotopy steps",
            result.final_residual_sup,
            result.final_cone_margin,
            result.log.len()
        );
        finish(log, EXIT_OK, summary)
    } else {
        let message = "solve succeeded but monitors failed (see run_log.json)".to_string();
        log.error = Some(message.clone());
        finish(log, EXIT_FAILURE, message)
    }
}

fn dump_fields(
    cfg: &FileConfig,
    spec: &ProblemSpec,
    ctx: &HomotopyContext,
    u: &ScalarField,
    out_dir: &Path,
) -> Result<Vec<String>, Box<dyn std::error::Error>> {
    let grid = spec.grid();
    let mut written = Vec::new();
    for name in &cfg.output.dump_fields {
        let field = match name.as_str() {
            "u" => u.clone(),
            "subsolution" => ctx.initial_state().u,
            "supersolution" => monitors::supersolution_h(spec)?.h,
            "residual" => {
                let res = residual(ctx, u, 1.0)?;
                let mut field = ScalarField::zeros(grid);
                for (row, &lin) in ctx.interior().iter().enumerate() {
                    field.set(lin, res.values[row]);
                }
                field
            }
            "cone_margin" => {
                let res = residual(ctx, u, 1.0)?;
                let mut field = ScalarField::zeros(grid);
                for (row, &lin) in ctx.interior().iter().enumerate() {
                    field.set(lin, res.hessian.margin_at(row));
                }
                field
            }
            "rhs" => {
                let res = residual(ctx, u, 1.0)?;
                let n = grid.dim();
                let mut field = ScalarField::zeros(grid);
                let mut x = vec![0.0; n];
                for (row, &lin) in ctx.interior().iter().enumerate() {
                    grid.coords_into(lin, &mut x);
                    let p = &res.gradients[row * n..(row + 1) * n];
                    field.set(lin, spec.ftilde(&x, u.get(lin), p)?.value);
                }
                field
            }
            other => return Err(format!("unknown dump field `{other}`").into()),
        };
        let path = out_dir.join(format!("{name}.csv"));
        write_field_csv(&path, &field)?;
        written.push(format!("{name}.csv"));
    }
    Ok(written)
}

/// Entry point used by the binary: load config, resolve, run, and map
/// errors onto the exit-code contract.
pub fn run(args: &CliArgs) -> RunOutcome {
    let text = match fs::read_to_string(&args.config) {
        Ok(text) => text,
        Err(e) => {
            return RunOutcome {
                exit_code: EXIT_CONFIG,
                message: format!("cannot read config {}: {e}", args.config.display()),
                log_path: None,
            }
        }
    };
    let cfg = match resolve_config(&text, args) {
        Ok(cfg) => cfg,
        Err(e) => {
            return RunOutcome {
                exit_code: EXIT_CONFIG,
                message: format!("{e}"),
                log_path: None,
            }
        }
    };
    run_pipeline(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args_with_config(path: &str) -> CliArgs {
        CliArgs {
            config: PathBuf::from(path),
            out_dir: None,
            grid: None,
            p: None,
            continuity_steps: None,
            tol: None,
            max_newton: None,
            diagnostics: None,
            seed: None,
            dump_fields: None,
        }
    }

    #[test]
    fn presets_resolve_and_validate() {
        for name in [
            "poisson2d",
            "poisson2d_mms",
            "ma2d",
            "ma2d_mms",
            "pma_half",
            "pma_half_mms",
        ] {
            let cfg = preset_config(name).unwrap();
            validate_config(&cfg).unwrap();
        }
        assert!(matches!(
            preset_config("nope"),
            Err(ConfigError::UnknownPreset(_))
        ));
    }

    #[test]
    fn unknown_key_rejected_with_location() {
        let text = "preset = \"poisson2d\"\nfoo = 1\n";
        let err = resolve_config(text, &args_with_config("x")).unwrap_err();
        let message = format!("{err}");
        assert!(message.contains("foo"), "{message}");
        assert!(message.contains("line"), "{message}");
    }

    #[test]
    fn preset_and_problem_conflict() {
        let text = "preset = \"poisson2d\"\n[problem]\nn = 2\np = 2\n";
        let err = resolve_config(text, &args_with_config("x")).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }

    #[test]
    fn overrides_apply() {
        let mut args = args_with_config("x");
        args.grid = Some(17);
        args.p = Some(1);
        args.seed = Some(7);
        args.dump_fields = Some("u,residual".into());
        let cfg = resolve_config("preset = \"poisson2d\"\n", &args).unwrap();
        let problem = cfg.problem.as_ref().unwrap();
        assert_eq!(problem.grid, Some(17));
        assert_eq!(problem.p, 1);
        assert_eq!(cfg.diagnostics.seed, 7);
        assert_eq!(cfg.output.dump_fields, vec!["u", "residual"]);
    }

    #[test]
    fn manufactured_configs_reject_explicit_f() {
        let text = r#"
[problem]
n = 2
p = 1
u_star = "x1^2 + x2^2"
f = "1"
phi = "0"
subsolution = "0"
"#;
        let err = resolve_config(text, &args_with_config("x")).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }

    #[test]
    fn n4_grid_cap_enforced() {
        let text = "preset = \"pma_half\"\n";
        let mut args = args_with_config("x");
        args.grid = Some(33);
        let err = resolve_config(text, &args).unwrap_err();
        assert!(format!("{err}").contains("capped"));
    }

    #[test]
    fn build_spec_for_all_presets() {
        // small grids keep this fast; n = 4 presets excluded here (heavier)
        for name in ["poisson2d", "poisson2d_mms", "ma2d", "ma2d_mms"] {
            let mut args = args_with_config("x");
            args.grid = Some(9);
            let cfg = resolve_config(&format!("preset = \"{name}\"\n"), &args).unwrap();
            let spec = build_spec(&cfg).unwrap();
            let report = spec.validate_subsolution().unwrap();
            assert!(report.pass, "{name}: {report:?}");
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let grid = Grid::uniform(2, 9).unwrap();
        let field = ScalarField::from_fn(&grid, |x| (x[0] * 7.3).sin() * (1.0 + x[1]) / 3.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.csv");
        write_field_csv(&path, &field).unwrap();
        let (n, values) = read_field_csv(&path).unwrap();
        assert_eq!(n, 2);
        assert_eq!(values.len(), grid.len());
        for (lin, v) in values.iter().enumerate() {
            assert_eq!(v.to_bits(), field.get(lin).to_bits(), "row {lin}");
        }
    }
}
