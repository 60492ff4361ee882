//! Configuration layering and experiment dispatch for the `rabc` binary.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, Command};
use serde::Serialize;
use serde_json::{json, Value};

use rabc_core::control::{plan_one_point, plan_projective, plan_two_point, ControlPlan};
use rabc_core::dynamo::{dynamo_rate, magnetic_growth_series, MagneticInitialField, NormExponent};
use rabc_core::lyapunov::{lyapunov_spectrum, one_point_uniformity, top_lyapunov, UnitVector3};
use rabc_core::transport::{
    fit_exponential_rate, hs_norm_diffusive, init_field, mixing_norm, pullback_evolve, resolution_horizon,
    window_above_floor, InitialCondition,
};
use rabc_core::verify::{verify_all, CertificateReport};
use rabc_core::{noise_path, NoiseConfig, TorusPoint};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_CERTIFICATE: i32 = 2;
/// Environment variable fixing the worker thread count.
pub const THREADS_ENV: &str = "RABC_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Lyapunov,
    Spectrum,
    Mix,
    Dynamo,
    Verify,
    Control,
    ChainStats,
}

impl Experiment {
    const ALL: [(&'static str, Experiment); 7] = [
        ("lyapunov", Self::Lyapunov),
        ("spectrum", Self::Spectrum),
        ("mix", Self::Mix),
        ("dynamo", Self::Dynamo),
        ("verify", Self::Verify),
        ("control", Self::Control),
        ("chain-stats", Self::ChainStats),
    ];

    fn name(self) -> &'static str {
        Self::ALL.iter().find(|(_, e)| *e == self).map(|(n, _)| *n).unwrap_or("?")
    }

    fn default_steps(self) -> usize {
        match self {
            Self::Mix => 20,
            Self::Dynamo => 30,
            Self::ChainStats => 100_000,
            _ => 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlKind {
    OnePoint,
    Projective,
    TwoPoint,
}

/// Effective configuration after layering flags over the config file over
/// defaults. Output location and format are not part of the experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub u_max: f64,
    pub n_steps: usize,
    pub n_ensemble: usize,
    pub grid: usize,
    pub kappa: f64,
    pub s: f64,
    pub p: NormExponent,
    pub initial: String,
    pub samples: usize,
    pub k_cutoff: usize,
    pub bins: usize,
    pub lambda_steps: usize,
    pub b0: String,
    pub kind: ControlKind,
    pub from: [f64; 3],
    pub to: [f64; 3],
    pub from2: [f64; 3],
    pub to2: [f64; 3],
    pub from_dir: [f64; 3],
    pub to_dir: [f64; 3],
    pub eps: f64,
    pub continuous_time: bool,
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[serde(skip)]
    pub format: Format,
}

/// Configuration problem tied to a key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn cfg_err(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.to_string(),
        message: message.into(),
    }
}

/// Keys accepted both as `--key value` flags and as `key = value` lines.
const KEYS: [(&str, &str); 25] = [
    ("seed", "noise seed"),
    ("u-max", "amplitude bound U"),
    ("steps", "iterations"),
    ("ensemble", "trajectories"),
    ("grid", "grid points per axis"),
    ("kappa", "diffusivity"),
    ("s", "Sobolev index of the mix-norm"),
    ("p", "Lebesgue exponent (number or inf)"),
    ("initial", "scalar initial condition: sinx, sinx+cos2y, const:c, modes:..."),
    ("samples", "Monte Carlo characteristics for kappa > 0"),
    ("k-cutoff", "Fourier cutoff for kappa > 0"),
    ("bins", "histogram bins per axis"),
    ("lambda-steps", "iterations per trajectory for the reference top exponent"),
    ("b0", "magnetic initial field: const:x,y,z or abc:a,b,c"),
    ("kind", "control problem: one-point, projective, two-point"),
    ("from", "start point x,y,z"),
    ("to", "target point x,y,z"),
    ("from2", "second start point x,y,z"),
    ("to2", "second target point x,y,z"),
    ("from-dir", "start direction vx,vy,vz"),
    ("to-dir", "target direction vx,vy,vz"),
    ("eps", "contraction gap for two-point control"),
    ("out", "output prefix; writes PREFIX.csv and PREFIX.json"),
    ("format", "stdout format without --out: csv or json"),
    ("continuous-time", "report rates per unit flow time"),
];

fn command() -> Command {
    let names: Vec<&str> = Experiment::ALL.iter().map(|(n, _)| *n).collect();
    let mut cmd = Command::new("rabc")
        .about("Randomized ABC flow experiments")
        .version(env!("CARGO_PKG_VERSION"))
        .arg(
            Arg::new("experiment")
                .required(true)
                .value_parser(clap::builder::PossibleValuesParser::new(names)),
        )
        .arg(Arg::new("config").long("config").value_name("FILE").help("key = value configuration file"));
    for (key, help) in KEYS {
        let arg = Arg::new(key).long(key).help(help);
        cmd = cmd.arg(if key == "continuous-time" {
            arg.action(ArgAction::SetTrue)
        } else {
            arg.allow_hyphen_values(true)
        });
    }
    cmd
}

/// Reads a `key = value` file; `#` starts a comment.
pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| cfg_err("config", format!("{}: {e}", path.display())))?;
    parse_config_text(&text)
}

pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| cfg_err("config", format!("line {} is not `key = value`", i + 1)))?;
        let key = k.trim().replace('_', "-");
        if !KEYS.iter().any(|(name, _)| *name == key) {
            return Err(cfg_err(&key, "unknown key"));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

/// Outcome of argument parsing.
#[derive(Debug)]
pub enum Parsed {
    Run(Box<ExperimentConfig>),
    /// Help or version text, to be printed with exit code 0.
    Info(String),
}

/// Parses `args` (including the program name) into an effective configuration.
pub fn parse_config<I, T>(args: I) -> Result<Parsed, ConfigError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let m = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => Ok(Parsed::Info(e.to_string())),
                _ => {
                    let key = e
                        .get(clap::error::ContextKind::InvalidArg)
                        .map(|a| a.to_string())
                        .unwrap_or_else(|| "arguments".into());
                    Err(cfg_err(key.trim_start_matches('-'), e.kind().to_string()))
                }
            };
        }
    };
    let mut values = match m.get_one::<String>("config") {
        Some(p) => read_config_file(Path::new(p))?,
        None => BTreeMap::new(),
    };
    for (key, _) in KEYS {
        if key == "continuous-time" {
            if m.get_flag(key) {
                values.insert(key.to_string(), "true".into());
            }
        } else if let Some(v) = m.get_one::<String>(key) {
            values.insert(key.to_string(), v.clone());
        }
    }
    let name = m.get_one::<String>("experiment").expect("required");
    let experiment = Experiment::ALL.iter().find(|(n, _)| n == name).map(|(_, e)| *e).expect("validated");
    build_config(experiment, &values).map(|c| Parsed::Run(Box::new(c)))
}

fn get<T: std::str::FromStr>(values: &BTreeMap<String, String>, key: &str, default: T) -> Result<T, ConfigError> {
    match values.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| cfg_err(key, format!("cannot parse `{v}`"))),
    }
}

fn get_triple(values: &BTreeMap<String, String>, key: &str, default: [f64; 3]) -> Result<[f64; 3], ConfigError> {
    let Some(v) = values.get(key) else { return Ok(default) };
    let parts: Vec<f64> = v
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| cfg_err(key, format!("expected three comma-separated numbers, got `{v}`")))?;
    match parts.as_slice() {
        [a, b, c] if parts.iter().all(|x| x.is_finite()) => Ok([*a, *b, *c]),
        _ => Err(cfg_err(key, format!("expected three finite numbers, got `{v}`"))),
    }
}

fn positive(key: &str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(cfg_err(key, format!("must be positive, got {v}")))
    }
}

fn at_least(key: &str, v: usize, min: usize) -> Result<usize, ConfigError> {
    if v >= min {
        Ok(v)
    } else {
        Err(cfg_err(key, format!("must be at least {min}, got {v}")))
    }
}

/// Validates layered `values` into a configuration.
pub fn build_config(experiment: Experiment, values: &BTreeMap<String, String>) -> Result<ExperimentConfig, ConfigError> {
    let u_max = positive("u-max", get(values, "u-max", PI)?)?;
    let grid: usize = get(values, "grid", if experiment == Experiment::Dynamo { 32 } else { 64 })?;
    if experiment == Experiment::Mix && (grid < 8 || !grid.is_power_of_two()) {
        return Err(cfg_err("grid", format!("must be a power of two of at least 8, got {grid}")));
    }
    let grid = at_least("grid", grid, 2)?;
    let kappa: f64 = get(values, "kappa", 0.0)?;
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(cfg_err("kappa", format!("must be non-negative, got {kappa}")));
    }
    let p = match values.get("p").map(|s| s.trim()) {
        Some("inf") | Some("infinity") => NormExponent::Infinity,
        _ => {
            let p: f64 = get(values, "p", 1.0)?;
            NormExponent::new(p).map_err(|e| cfg_err("p", e.to_string()))?
        }
    };
    let initial: String = get(values, "initial", "sinx".to_string())?;
    initial
        .parse::<InitialCondition>()
        .map_err(|e| cfg_err("initial", e.to_string()))?;
    let b0: String = get(values, "b0", "const:0,0,1".to_string())?;
    parse_b0(&b0)?;
    let kind = match values.get("kind").map(|s| s.trim()) {
        None | Some("one-point") => ControlKind::OnePoint,
        Some("projective") => ControlKind::Projective,
        Some("two-point") => ControlKind::TwoPoint,
        Some(other) => return Err(cfg_err("kind", format!("unknown control problem `{other}`"))),
    };
    let format = match values.get("format").map(|s| s.trim()) {
        None | Some("json") => Format::Json,
        Some("csv") => Format::Csv,
        Some(other) => return Err(cfg_err("format", format!("expected csv or json, got `{other}`"))),
    };
    let eps = positive("eps", get(values, "eps", 0.1)?)?;
    let s = get(values, "s", 1.0)?;
    let s = positive("s", s)?;
    Ok(ExperimentConfig {
        experiment,
        seed: get(values, "seed", 42)?,
        u_max,
        n_steps: at_least("steps", get(values, "steps", experiment.default_steps())?, 1)?,
        n_ensemble: at_least("ensemble", get(values, "ensemble", 100)?, 1)?,
        grid,
        kappa,
        s,
        p,
        initial,
        samples: at_least("samples", get(values, "samples", 10_000)?, 100)?,
        k_cutoff: at_least("k-cutoff", get(values, "k-cutoff", 4)?, 1)?,
        bins: at_least("bins", get(values, "bins", 8)?, 2)?,
        lambda_steps: at_least("lambda-steps", get(values, "lambda-steps", 10_000)?, 20)?,
        b0,
        kind,
        from: get_triple(values, "from", [0.0, 0.0, 0.0])?,
        to: get_triple(values, "to", [1.0, 2.0, 3.0])?,
        from2: get_triple(values, "from2", [1.0, 1.0, 1.0])?,
        to2: get_triple(values, "to2", [4.0, 5.0, 6.0])?,
        from_dir: get_triple(values, "from-dir", [0.0, 0.0, 1.0])?,
        to_dir: get_triple(values, "to-dir", [0.0, 1.0, 0.0])?,
        eps,
        continuous_time: get(values, "continuous-time", false)?,
        out: values.get("out").map(PathBuf::from),
        format,
    })
}

fn parse_b0(s: &str) -> Result<MagneticInitialField, ConfigError> {
    let bad = || cfg_err("b0", format!("expected const:x,y,z or abc:a,b,c, got `{s}`"));
    let (tag, rest) = s.split_once(':').ok_or_else(bad)?;
    let mut m = BTreeMap::new();
    m.insert("b0".to_string(), rest.to_string());
    let [a, b, c] = get_triple(&m, "b0", [0.0; 3]).map_err(|_| bad())?;
    let field = match tag.trim() {
        "const" => MagneticInitialField::Constant([a, b, c]),
        "abc" => MagneticInitialField::Abc { a, b, c },
        _ => return Err(bad()),
    };
    if field.is_zero() {
        return Err(cfg_err("b0", "field vanishes identically"));
    }
    Ok(field)
}

/// A table cell; `Empty` becomes an empty CSV field and `null` in JSON.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
    Bool(bool),
    Empty,
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Self::Num(v) => v.to_string(),
            Self::Int(v) => v.to_string(),
            Self::Text(s) => s.clone(),
            Self::Bool(b) => b.to_string(),
            Self::Empty => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Self::Num(v) => json!(v),
            Self::Int(v) => json!(v),
            Self::Text(s) => json!(s),
            Self::Bool(b) => json!(b),
            Self::Empty => Value::Null,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    fn new(columns: &[&'static str]) -> Self {
        Self {
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r.iter().map(Cell::csv)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    fn to_json(&self) -> Vec<Value> {
        self.rows
            .iter()
            .map(|r| {
                let obj: serde_json::Map<String, Value> =
                    self.columns.iter().zip(r).map(|(c, v)| (c.to_string(), v.json())).collect();
                Value::Object(obj)
            })
            .collect()
    }
}

/// Result of one experiment.
#[derive(Debug, Clone)]
pub struct Output {
    pub table: Table,
    pub fit: Value,
    pub certificates: Vec<CertificateReport>,
    pub exit_code: i32,
}

impl Output {
    fn new(table: Table, fit: Value) -> Self {
        Self {
            table,
            fit,
            certificates: Vec::new(),
            exit_code: EXIT_OK,
        }
    }

    /// The JSON report with the effective configuration embedded.
    pub fn report(&self, cfg: &ExperimentConfig) -> String {
        let v = json!({
            "experiment": cfg.experiment.name(),
            "config": cfg,
            "series": self.table.to_json(),
            "fit": self.fit,
            "certificates": self.certificates,
        });
        let mut s = serde_json::to_string_pretty(&v).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Failure while running a valid configuration.
#[derive(Debug)]
pub enum RunError {
    Core(rabc_core::Error),
    Io(std::io::Error),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Core(e) => write!(f, "{e}"),
            Self::Io(e) => write!(f, "{e}"),
        }
    }
}

impl From<rabc_core::Error> for RunError {
    fn from(e: rabc_core::Error) -> Self {
        Self::Core(e)
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

fn time_scale(cfg: &ExperimentConfig) -> f64 {
    if cfg.continuous_time {
        1.0 / 3.0
    } else {
        1.0
    }
}

fn time_unit(cfg: &ExperimentConfig) -> &'static str {
    if cfg.continuous_time {
        "flow-time"
    } else {
        "iteration"
    }
}

fn noise(cfg: &ExperimentConfig) -> Result<NoiseConfig, RunError> {
    Ok(NoiseConfig::new(cfg.u_max, cfg.seed)?)
}

fn point(a: [f64; 3]) -> TorusPoint {
    TorusPoint::new(a[0], a[1], a[2])
}

/// Runs the configured experiment.
pub fn execute(cfg: &ExperimentConfig) -> Result<Output, RunError> {
    match cfg.experiment {
        Experiment::Lyapunov => run_lyapunov(cfg),
        Experiment::Spectrum => run_spectrum(cfg),
        Experiment::Mix => run_mix(cfg),
        Experiment::Dynamo => run_dynamo(cfg),
        Experiment::Verify => run_verify(),
        Experiment::Control => run_control(cfg),
        Experiment::ChainStats => run_chain_stats(cfg),
    }
}

fn run_lyapunov(cfg: &ExperimentConfig) -> Result<Output, RunError> {
    let est = top_lyapunov(
        &noise(cfg)?,
        TorusPoint::origin(),
        UnitVector3::e1(),
        cfg.n_steps,
        cfg.n_ensemble,
    )?;
    let k = time_scale(cfg);
    let mut t = Table::new(&["trajectory", "lambda"]);
    for (i, l) in est.per_trajectory.iter().enumerate() {
        t.rows.push(vec![Cell::Int(i as u64), Cell::Num(l * k)]);
    }
    let (lo, hi) = est.ci95();
    Ok(Output::new(
        t,
        json!({
            "lambda1": est.lambda * k,
            "stderr": est.stderr * k,
            "ci95": [lo * k, hi * k],
            "n_steps": est.n_steps,
            "n_ensemble": est.n_ensemble,
            "time_unit": time_unit(cfg),
        }),
    ))
}

fn run_spectrum(cfg: &ExperimentConfig) -> Result<Output, RunError> {
    let est = lyapunov_spectrum(&noise(cfg)?, TorusPoint::origin(), cfg.n_steps, cfg.n_ensemble)?;
    let k = time_scale(cfg);
    let mut t = Table::new(&["index", "lambda", "stderr"]);
    for i in 0..3 {
        t.rows.push(vec![
            Cell::Int(i as u64 + 1),
            Cell::Num(est.lambdas[i] * k),
            Cell::Num(est.stderrs[i] * k),
        ]);
    }
    Ok(Output::new(
        t,
        json!({
            "sum": est.sum * k,
            "sum_stderr": est.sum_stderr * k,
            "n_steps": est.n_steps,
            "n_ensemble": est.n_ensemble,
            "time_unit": time_unit(cfg),
        }),
    ))
}

fn reference_lambda(cfg: &ExperimentConfig) -> Result<rabc_core::lyapunov::LyapunovEstimate, RunError> {
    Ok(top_lyapunov(
        &noise(cfg)?,
        TorusPoint::origin(),
        UnitVector3::e1(),
        cfg.lambda_steps,
        cfg.n_ensemble,
    )?)
}

fn run_mix(cfg: &ExperimentConfig) -> Result<Output, RunError> {
    let ic: InitialCondition = cfg.initial.parse()?;
    let field0 = init_field(&ic, cfg.grid)?;
    let path = noise_path(&noise(cfg)?, 0, cfg.n_steps);
    let times: Vec<usize> = (0..=cfg.n_steps).collect();
    let tf: Vec<f64> = times.iter().map(|&t| t as f64).collect();
    let k = time_scale(cfg);
    let mut table = Table::new(&["t", "value", "stderr"]);
    if cfg.kappa == 0.0 {
        let fields = pullback_evolve(&field0, path.as_slice(), &times)?;
        let values: Vec<f64> = fields.iter().map(|f| mixing_norm(f, cfg.s)).collect();
        let l2: Vec<f64> = fields.iter().map(|f| f.l2_norm()).collect();
        let l2_dev = l2.iter().map(|v| (v / l2[0] - 1.0).abs()).fold(0.0, f64::max);
        for (t, v) in times.iter().zip(&values) {
            table.rows.push(vec![Cell::Int(*t as u64), Cell::Num(*v), Cell::Empty]);
        }
        let lambda = reference_lambda(cfg)?;
        let horizon = resolution_horizon(cfg.grid, lambda.lambda);
        let window = [0.0, horizon.floor().clamp(1.0, cfg.n_steps as f64)];
        let fit = fit_exponential_rate(&tf, &values, window)?;
        Ok(Output::new(
            table,
            json!({
                "rate": fit.rate * k,
                "rate_stderr": fit.rate_stderr * k,
                "intercept": fit.intercept,
                "r2": fit.r2,
                "window": fit.window,
                "n_points": fit.n_points,
                "resolution_horizon": horizon,
                "lambda1": lambda.lambda,
                "l2_max_relative_deviation": l2_dev,
                "time_unit": time_unit(cfg),
            }),
        ))
    } else {
        let series = hs_norm_diffusive(
            &field0,
            path.as_slice(),
            cfg.kappa,
            cfg.s,
            cfg.k_cutoff,
            cfg.samples,
            &times,
            cfg.seed,
        )?;
        for i in 0..times.len() {
            table.rows.push(vec![
                Cell::Int(times[i] as u64),
                Cell::Num(series.value[i]),
                Cell::Num(series.stderr[i]),
            ]);
        }
        let fit = window_above_floor(&tf, &series.value, &series.noise_floor, 1.0)
            .map(|w| fit_exponential_rate(&tf, &series.value, w))
            .transpose()?;
        Ok(Output::new(
            table,
            json!({
                "rate": fit.map(|f| f.rate * k),
                "rate_stderr": fit.map(|f| f.rate_stderr * k),
                "intercept": fit.map(|f| f.intercept),
                "r2": fit.map(|f| f.r2),
                "window": fit.map(|f| f.window),
                "n_points": fit.map(|f| f.n_points),
                "noise_floor": series.noise_floor,
                "tail_bound": series.tail_bound,
                "k_cutoff": series.k_cutoff,
                "time_unit": time_unit(cfg),
            }),
        ))
    }
}

fn run_dynamo(cfg: &ExperimentConfig) -> Result<Output, RunError> {
    let b0 = parse_b0(&cfg.b0).map_err(|e| RunError::Core(rabc_core::Error::InvalidArgument(e.to_string())))?;
    let path = noise_path(&noise(cfg)?, 0, cfg.n_steps);
    let times: Vec<usize> = (0..=cfg.n_steps).collect();
    let series = magnetic_growth_series(&b0, path.as_slice(), cfg.p, cfg.grid, &times)?;
    let lambda = reference_lambda(cfg)?;
    let rate = dynamo_rate(&series, [0.0, cfg.n_steps as f64], Some(&lambda))?;
    let k = time_scale(cfg);
    let mut table = Table::new(&["n", "norm"]);
    for (t, v) in series.t.iter().zip(&series.values) {
        table.rows.push(vec![Cell::Int(*t as u64), Cell::Num(*v)]);
    }
    let cmp = rate.comparison.expect("lambda supplied");
    Ok(Output::new(
        table,
        json!({
            "rate": rate.fit.rate * k,
            "rate_stderr": rate.fit.rate_stderr * k,
            "intercept": rate.fit.intercept,
            "r2": rate.fit.r2,
            "window": rate.fit.window,
            "n_points": rate.fit.n_points,
            "lambda1": cmp.lambda1 * k,
            "lambda1_stderr": cmp.lambda1_stderr * k,
            "combined_stderr": cmp.combined_stderr * k,
            "consistent_with_lambda1": cmp.consistent,
            "time_unit": time_unit(cfg),
        }),
    ))
}

fn run_verify() -> Result<Output, RunError> {
    let reports = verify_all()?;
    let mut table = Table::new(&["certificate", "check", "computed", "target", "tolerance", "passed", "load_bearing"]);
    for r in &reports {
        for c in &r.checks {
            table.rows.push(vec![
                Cell::Text(r.name.clone()),
                Cell::Text(c.label.clone()),
                Cell::Num(c.computed),
                Cell::Num(c.target),
                Cell::Num(c.tolerance),
                Cell::Bool(c.passed),
                Cell::Bool(c.load_bearing),
            ]);
        }
    }
    let passed = reports.iter().all(|r| r.passed);
    let mut out = Output::new(
        table,
        json!({ "passed": passed, "certificates": reports.len() }),
    );
    out.certificates = reports;
    if !passed {
        out.exit_code = EXIT_CERTIFICATE;
    }
    Ok(out)
}

fn plan_table(plan: &ControlPlan) -> Table {
    let mut t = Table::new(&["step", "A", "B", "C", "alpha", "beta", "gamma"]);
    for (i, w) in plan.samples().iter().enumerate() {
        let mut row = vec![Cell::Int(i as u64)];
        row.extend(w.to_array().iter().map(|v| Cell::Num(*v)));
        t.rows.push(row);
    }
    t
}

fn run_control(cfg: &ExperimentConfig) -> Result<Output, RunError> {
    let dir = |a: [f64; 3]| UnitVector3::new(a[0], a[1], a[2]);
    let result = match cfg.kind {
        ControlKind::OnePoint => plan_one_point(point(cfg.from), point(cfg.to), cfg.u_max),
        ControlKind::Projective => plan_projective(
            point(cfg.from),
            dir(cfg.from_dir)?,
            point(cfg.to),
            dir(cfg.to_dir)?,
            cfg.u_max,
        ),
        ControlKind::TwoPoint => plan_two_point(
            point(cfg.from),
            point(cfg.from2),
            point(cfg.to),
            point(cfg.to2),
            cfg.u_max,
            cfg.eps,
        ),
    };
    match result {
        Ok(plan) => Ok(Output::new(
            plan_table(&plan),
            json!({ "replayed": true, "plan": plan }),
        )),
        Err(rabc_core::Error::ReplayTolerance { position, direction }) => {
            let mut out = Output::new(
                Table::new(&["step", "A", "B", "C", "alpha", "beta", "gamma"]),
                json!({ "replayed": false, "position_error": position, "direction_error": direction }),
            );
            out.exit_code = EXIT_CERTIFICATE;
            Ok(out)
        }
        Err(e) => Err(e.into()),
    }
}

fn run_chain_stats(cfg: &ExperimentConfig) -> Result<Output, RunError> {
    let u = one_point_uniformity(&noise(cfg)?, TorusPoint::origin(), cfg.n_steps, cfg.bins)?;
    let mut t = Table::new(&["chain", "n_samples", "bins_per_axis", "burn_in", "chi_square", "dof", "p_value"]);
    t.rows.push(vec![
        Cell::Text("one-point".into()),
        Cell::Int(u.n_samples as u64),
        Cell::Int(u.bins_per_axis as u64),
        Cell::Int(u.burn_in as u64),
        Cell::Num(u.chi_square),
        Cell::Int(u.degrees_of_freedom as u64),
        Cell::Num(u.p_value),
    ]);
    Ok(Output::new(
        t,
        json!({ "uniform_at_1pct": u.p_value > 0.01, "p_value": u.p_value }),
    ))
}

/// Writes `prefix.csv` and `prefix.json`.
pub fn write_outputs(prefix: &Path, csv: &str, report: &str) -> std::io::Result<()> {
    let with = |ext: &str| {
        let mut p = prefix.as_os_str().to_owned();
        p.push(".");
        p.push(ext);
        PathBuf::from(p)
    };
    fs::write(with("csv"), csv)?;
    fs::write(with("json"), report)
}

/// Thread count requested through [`THREADS_ENV`].
pub fn threads_from_env() -> Result<Option<usize>, ConfigError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(cfg_err(THREADS_ENV, format!("expected a positive integer, got `{v}`"))),
        },
    }
}

/// Full command-line entry point; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cfg = match parse_config(args) {
        Ok(Parsed::Run(c)) => c,
        Ok(Parsed::Info(text)) => {
            print!("{text}");
            return EXIT_OK;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    match threads_from_env() {
        Ok(Some(n)) => {
            // fails only if a global pool already exists, which then stays in use
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        Ok(None) => {}
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    }
    let out = match execute(&cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let csv = out.table.to_csv();
    let report = out.report(&cfg);
    match &cfg.out {
        Some(prefix) => {
            if let Err(e) = write_outputs(prefix, &csv, &report) {
                eprintln!("error: out: {e}");
                return EXIT_CONFIG;
            }
        }
        None => match cfg.format {
            Format::Csv => print!("{csv}"),
            Format::Json => print!("{report}"),
        },
    }
    if out.exit_code == EXIT_CERTIFICATE {
        eprintln!("certificate failure");
    }
    out.exit_code
}
