//! Command-line front end: config parsing, subcommand dispatch and output files.
//!
//! Every CSV carries a header and ends with a `#manifest=manifest.json` line;
//! the manifest itself is written last, atomically, into the same directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::charspec::{classify_regime, fmt_f64, min_speed, RegimeLabel, SpectralProfile, WaveSpec};
use crate::delayode::{delayed_exp, dividing_step, farfield_ode, integrate_dde_steps, FarfieldOptions, History};
use crate::error::{Error, Result};
use crate::lindelay::{evolve_spectral, measure_linear_decay, SpectralField};
use crate::model::ModelParams;
use crate::pde::{level_crossing, DelayField, EquationForm, Grid1D};
use crate::stability::{
    default_window, fit_decay, run_stability, ExperimentSpec, FitModel, Perturbation, PerturbationKind, StabilitySeries,
};
use crate::waves::{classify_profile, compute_profile, ProfileLabel, ProfileOptions};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Speeds,
    Profile,
    Evolve,
    DelayedExp,
    Farfield,
    LinearDecay,
    Stability,
    Sweep,
}

#[derive(Debug, Parser)]
#[command(name = "blowfly", version, about = "Numerical lab for the delayed Nicholson blowflies reaction-diffusion equation")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; BLOWFLY_OUT takes precedence.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for `sweep`.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
}

/// Requested wave speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeedChoice {
    Critical,
    Speed(f64),
    Factor(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LinearSolver {
    Spectral,
    Fd,
}

/// The `[experiment]` section. `t_end` defaults per subcommand.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub t_end: Option<f64>,
    pub sample_dt: f64,
    pub perturbation: PerturbationKind,
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
    pub noise: f64,
    pub x0: Option<f64>,
    pub window: Option<(f64, f64)>,
    pub track_comparison: bool,
    pub form: EquationForm,
    pub snapshot_every: Option<f64>,
    pub stride: Option<usize>,
    pub front: Option<f64>,
    pub k_bar: f64,
    pub solver: LinearSolver,
    pub sweep_r: Vec<f64>,
    pub sweep_c: Vec<f64>,
    pub profile_tol: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            t_end: None,
            sample_dt: 0.5,
            perturbation: PerturbationKind::Bump,
            amplitude: 0.1,
            center: 0.0,
            width: 1.0,
            noise: 0.0,
            x0: None,
            window: None,
            track_comparison: true,
            form: EquationForm::Lab,
            snapshot_every: None,
            stride: None,
            front: None,
            k_bar: 1.0,
            solver: LinearSolver::Spectral,
            sweep_r: vec![0.1, 0.4, 1.0],
            sweep_c: vec![1.0, 1.2, 2.5],
            profile_tol: 1e-10,
        }
    }
}

/// A fully validated configuration file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelParams,
    pub speed: SpeedChoice,
    pub lambda: Option<f64>,
    pub grid: Grid1D,
    pub dt: Option<f64>,
    pub experiment: ExperimentConfig,
    /// Line of every key present in the file.
    #[serde(skip)]
    pub lines: BTreeMap<String, usize>,
}

const MODEL_KEYS: &[&str] = &["D", "delta", "p", "a", "r"];
const WAVE_KEYS: &[&str] = &["c", "c_factor", "lambda"];
const GRID_KEYS: &[&str] = &["L", "n", "dt"];
const EXPERIMENT_KEYS: &[&str] = &[
    "t_end",
    "sample_dt",
    "perturbation",
    "amplitude",
    "center",
    "width",
    "noise",
    "x0",
    "window_start",
    "window_end",
    "track_comparison",
    "form",
    "snapshot_every",
    "stride",
    "front",
    "k_bar",
    "solver",
    "sweep_r",
    "sweep_c",
    "profile_tol",
];

fn cfg_err(line: usize, key: &str, message: impl Into<String>) -> Error {
    Error::Config { line, key: key.into(), message: message.into() }
}

struct Entry {
    line: usize,
    value: String,
}

fn num(key: &str, e: &Entry) -> Result<f64> {
    let v: f64 = e.value.parse().map_err(|_| cfg_err(e.line, key, format!("malformed number '{}'", e.value)))?;
    if !v.is_finite() {
        return Err(cfg_err(e.line, key, format!("{key} must be finite")));
    }
    Ok(v)
}

fn positive(key: &str, e: &Entry) -> Result<f64> {
    let v = num(key, e)?;
    if v <= 0.0 {
        return Err(cfg_err(e.line, key, format!("{key} must be positive")));
    }
    Ok(v)
}

fn list(key: &str, e: &Entry) -> Result<Vec<f64>> {
    e.value
        .split(',')
        .map(|s| {
            let item = Entry { line: e.line, value: s.trim().to_string() };
            num(key, &item)
        })
        .collect()
}

impl RunConfig {
    /// Reads and validates a config file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err(0, "config", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses sectioned `key = value` text; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
        let mut section: Option<&str> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = match name.trim() {
                    "model" => Some("model"),
                    "wave" => Some("wave"),
                    "grid" => Some("grid"),
                    "experiment" => Some("experiment"),
                    other => return Err(cfg_err(line, other, format!("unknown section [{other}]"))),
                };
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| cfg_err(line, content, "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            let sec = section.ok_or_else(|| cfg_err(line, key, "key outside any section"))?;
            let allowed = match sec {
                "model" => MODEL_KEYS,
                "wave" => WAVE_KEYS,
                "grid" => GRID_KEYS,
                _ => EXPERIMENT_KEYS,
            };
            if !allowed.contains(&key) {
                return Err(cfg_err(line, key, format!("unknown key in [{sec}]")));
            }
            if value.is_empty() {
                return Err(cfg_err(line, key, "missing value"));
            }
            if entries.contains_key(key) {
                return Err(cfg_err(line, key, "duplicate key"));
            }
            entries.insert(key.to_string(), Entry { line, value: value.to_string() });
        }
        let lines: BTreeMap<String, usize> = entries.iter().map(|(k, e)| (k.clone(), e.line)).collect();
        let get = |k: &str| entries.get(k);
        let locate = |e: Error| attach_line(e, &lines);

        let reference = ModelParams::reference();
        let mut m = [reference.diffusion, reference.delta, reference.p, reference.a, reference.r];
        for (slot, key) in m.iter_mut().zip(MODEL_KEYS) {
            if let Some(e) = get(key) {
                *slot = num(key, e)?;
            }
        }
        let model = ModelParams::new(m[0], m[1], m[2], m[3], m[4]).map_err(locate)?;
        if model.ratio() <= 1.0 {
            let line = lines.get("p").copied().unwrap_or(0);
            return Err(cfg_err(line, "p", "p must exceed delta (no positive equilibrium)"));
        }

        let speed = match (get("c"), get("c_factor")) {
            (Some(_), Some(e)) => return Err(cfg_err(e.line, "c_factor", "give either c or c_factor, not both")),
            (Some(e), None) if e.value == "critical" => SpeedChoice::Critical,
            (Some(e), None) => SpeedChoice::Speed(positive("c", e)?),
            (None, Some(e)) => SpeedChoice::Factor(positive("c_factor", e)?),
            (None, None) => SpeedChoice::Critical,
        };
        let lambda = get("lambda").map(|e| positive("lambda", e)).transpose()?;

        let half_width = get("L").map(|e| positive("L", e)).transpose()?.unwrap_or(100.0);
        let n = match get("n") {
            Some(e) => e.value.parse::<usize>().map_err(|_| cfg_err(e.line, "n", format!("malformed integer '{}'", e.value)))?,
            None => 4096,
        };
        let grid = Grid1D::new(half_width, n).map_err(locate)?;
        let dt = get("dt").map(|e| positive("dt", e)).transpose()?;

        let mut ex = ExperimentConfig::default();
        if let Some(e) = get("t_end") {
            ex.t_end = Some(positive("t_end", e)?);
        }
        if let Some(e) = get("sample_dt") {
            ex.sample_dt = positive("sample_dt", e)?;
        }
        if let Some(e) = get("perturbation") {
            ex.perturbation = e.value.parse().map_err(|err| attach_line(err, &lines))?;
        }
        if let Some(e) = get("amplitude") {
            ex.amplitude = num("amplitude", e)?;
        }
        if let Some(e) = get("center") {
            ex.center = num("center", e)?;
        }
        if let Some(e) = get("width") {
            ex.width = positive("width", e)?;
        }
        if let Some(e) = get("noise") {
            ex.noise = num("noise", e)?;
            if ex.noise < 0.0 {
                return Err(cfg_err(e.line, "noise", "noise must be non-negative"));
            }
        }
        ex.x0 = get("x0").map(|e| num("x0", e)).transpose()?;
        match (get("window_start"), get("window_end")) {
            (Some(a), Some(b)) => {
                let (lo, hi) = (num("window_start", a)?, num("window_end", b)?);
                if !(lo < hi) {
                    return Err(cfg_err(b.line, "window_end", "window_end must exceed window_start"));
                }
                ex.window = Some((lo, hi));
            }
            (None, None) => {}
            (Some(e), None) | (None, Some(e)) => return Err(cfg_err(e.line, "window_start", "window_start and window_end go together")),
        }
        if let Some(e) = get("track_comparison") {
            ex.track_comparison = match e.value.as_str() {
                "true" => true,
                "false" => false,
                v => return Err(cfg_err(e.line, "track_comparison", format!("expected true or false, got '{v}'"))),
            };
        }
        if let Some(e) = get("form") {
            ex.form = e.value.parse().map_err(|err| attach_line(err, &lines))?;
        }
        ex.snapshot_every = get("snapshot_every").map(|e| positive("snapshot_every", e)).transpose()?;
        if let Some(e) = get("stride") {
            let s = e.value.parse::<usize>().map_err(|_| cfg_err(e.line, "stride", "malformed integer"))?;
            if s == 0 {
                return Err(cfg_err(e.line, "stride", "stride must be positive"));
            }
            ex.stride = Some(s);
        }
        ex.front = get("front").map(|e| num("front", e)).transpose()?;
        if let Some(e) = get("k_bar") {
            ex.k_bar = num("k_bar", e)?;
        }
        if let Some(e) = get("solver") {
            ex.solver = match e.value.as_str() {
                "spectral" => LinearSolver::Spectral,
                "fd" => LinearSolver::Fd,
                v => return Err(cfg_err(e.line, "solver", format!("unknown solver '{v}' (spectral or fd)"))),
            };
        }
        if let Some(e) = get("sweep_r") {
            ex.sweep_r = list("sweep_r", e)?;
            if ex.sweep_r.iter().any(|&r| r < 0.0) {
                return Err(cfg_err(e.line, "sweep_r", "delays must be non-negative"));
            }
        }
        if let Some(e) = get("sweep_c") {
            ex.sweep_c = list("sweep_c", e)?;
            if ex.sweep_c.iter().any(|&f| f < 1.0) {
                return Err(cfg_err(e.line, "sweep_c", "speed factors must be at least 1"));
            }
        }
        if let Some(e) = get("profile_tol") {
            ex.profile_tol = positive("profile_tol", e)?;
        }

        let cfg = RunConfig { model, speed, lambda, grid, dt, experiment: ex, lines };
        cfg.wave()?;
        Ok(cfg)
    }

    /// The wave selected by `[wave]`, validated against `c*`.
    pub fn wave(&self) -> Result<WaveSpec> {
        let mp = &self.model;
        let ws = match self.speed {
            SpeedChoice::Critical => WaveSpec::critical(mp),
            SpeedChoice::Speed(c) => WaveSpec::new(mp, c, self.lambda),
            SpeedChoice::Factor(f) => {
                let (c_star, _) = min_speed(mp).map_err(|e| self.locate(e))?;
                WaveSpec::new(mp, f * c_star, self.lambda)
            }
        };
        ws.map_err(|e| match e {
            Error::Precondition(msg) => {
                let key = if msg.starts_with("lambda") {
                    "lambda"
                } else if matches!(self.speed, SpeedChoice::Factor(_)) {
                    "c_factor"
                } else {
                    "c"
                };
                cfg_err(self.lines.get(key).copied().unwrap_or(0), key, msg)
            }
            other => self.locate(other),
        })
    }

    fn locate(&self, e: Error) -> Error {
        attach_line(e, &self.lines)
    }

    fn t_end(&self, default: f64) -> f64 {
        self.experiment.t_end.unwrap_or(default)
    }

    fn window(&self, t_end: f64) -> (f64, f64) {
        self.experiment.window.unwrap_or_else(|| default_window(self.model.r, t_end))
    }

    fn perturbation(&self) -> Perturbation {
        let ex = &self.experiment;
        Perturbation { kind: ex.perturbation, amplitude: ex.amplitude, center: ex.center, width: ex.width, noise: ex.noise }
    }
}

fn attach_line(e: Error, lines: &BTreeMap<String, usize>) -> Error {
    match e {
        Error::Config { line: 0, key, message } => {
            let line = lines.get(&key).copied().unwrap_or(0);
            Error::Config { line, key, message }
        }
        other => other,
    }
}

/// Exit code of an error: 2 for configuration problems, 3 for numerical ones.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Domain(_) | Error::Regime(_) | Error::Precondition(_) => 2,
        Error::Numerical { .. } | Error::Convergence { .. } | Error::Stability(_) | Error::Fit(_) | Error::Io(_) => 3,
    }
}

/// CSV text builder with 17-significant-digit numbers.
struct Csv {
    buf: String,
}

impl Csv {
    fn new(header: &str) -> Self {
        Self { buf: format!("{header}\n") }
    }

    fn row(&mut self, values: &[f64]) {
        let cells: Vec<String> = values.iter().map(|v| fmt_f64(*v)).collect();
        self.buf.push_str(&cells.join(","));
        self.buf.push('\n');
    }

    fn raw(&mut self, line: &str) {
        self.buf.push_str(line);
        self.buf.push('\n');
    }

    fn finish(mut self) -> String {
        let _ = writeln!(self.buf, "#manifest={MANIFEST_NAME}");
        self.buf
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// One PASS/FAIL acceptance line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Criterion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Criterion {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Collects files, criteria and stage timings for one invocation.
pub struct Run<'a> {
    pub cfg: &'a RunConfig,
    pub out: PathBuf,
    pub seed: u64,
    pub parallel: usize,
    pub criteria: Vec<Criterion>,
    files: Vec<String>,
    stages: Vec<(String, f64)>,
    extra: BTreeMap<String, Value>,
}

impl<'a> Run<'a> {
    pub fn new(cfg: &'a RunConfig, out: PathBuf, seed: u64, parallel: usize) -> Self {
        Self {
            cfg,
            out,
            seed,
            parallel: parallel.max(1),
            criteria: Vec::new(),
            files: Vec::new(),
            stages: Vec::new(),
            extra: BTreeMap::new(),
        }
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        write_atomic(&self.out.join(name), contents)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
        self.write(name, &(text + "\n"))
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self);
        self.stages.push((name.to_string(), start.elapsed().as_secs_f64()));
        out
    }

    fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        let c = Criterion::new(name, passed, detail);
        println!("{}", c.line());
        self.criteria.push(c);
    }

    fn note(&mut self, key: &str, value: Value) {
        self.extra.insert(key.to_string(), value);
    }

    /// Writes the manifest; called once all other files are in place.
    pub fn finish(&mut self, command: Command) -> Result<()> {
        let tolerances = json!({
            "profile_tol": self.cfg.experiment.profile_tol,
            "boundedness_tol": 1e-8,
            "positivity_tol": 1e-12,
            "crossing_floor": crate::waves::CROSSING_FLOOR,
        });
        let manifest = json!({
            "command": command,
            "seed": self.seed,
            "parallel": self.parallel,
            "config": self.cfg,
            "spectral_profile": SpectralProfile::compute(&self.cfg.model).ok(),
            "tolerances": tolerances,
            "criteria": self.criteria,
            "stages": self.stages.iter().map(|(n, s)| json!({"stage": n, "seconds": s})).collect::<Vec<_>>(),
            "files": self.files,
            "results": self.extra,
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
        write_atomic(&self.out.join(MANIFEST_NAME), &(text + "\n"))
    }

    pub fn all_passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }
}

/// Runs one subcommand; criteria failures are recorded, not returned as errors.
pub fn dispatch(command: Command, run: &mut Run) -> Result<()> {
    match command {
        Command::Speeds => speeds(run),
        Command::Profile => profile(run),
        Command::Evolve => evolve(run),
        Command::DelayedExp => delayed_exp_cmd(run),
        Command::Farfield => farfield(run),
        Command::LinearDecay => linear_decay(run),
        Command::Stability => stability(run),
        Command::Sweep => sweep(run),
    }
}

fn speeds(run: &mut Run) -> Result<()> {
    let sp = run.stage("speeds", |r| SpectralProfile::compute(&r.cfg.model))?;
    let mut csv = Csv::new(SpectralProfile::CSV_HEADER);
    csv.raw(&sp.csv_row());
    println!("{}", SpectralProfile::CSV_HEADER);
    println!("{}", sp.csv_row());
    run.write("speeds.csv", &csv.finish())
}

fn profile_options(cfg: &RunConfig) -> ProfileOptions {
    ProfileOptions { tol: cfg.experiment.profile_tol, ..ProfileOptions::default() }
}

fn label_name(l: ProfileLabel) -> &'static str {
    match l {
        ProfileLabel::Monotone => "monotone",
        ProfileLabel::Oscillatory => "oscillatory",
        ProfileLabel::Ambiguous => "ambiguous",
    }
}

fn regime_name(l: RegimeLabel) -> &'static str {
    match l {
        RegimeLabel::Monotone => "monotone",
        RegimeLabel::Oscillatory => "oscillatory",
        RegimeLabel::NoWave => "nowave",
    }
}

fn agrees(profile: ProfileLabel, regime: RegimeLabel) -> bool {
    matches!(
        (profile, regime),
        (ProfileLabel::Ambiguous, _)
            | (ProfileLabel::Monotone, RegimeLabel::Monotone)
            | (ProfileLabel::Oscillatory, RegimeLabel::Oscillatory)
    )
}

fn profile(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let ws = cfg.wave()?;
    let wp = run.stage("profile", |_| compute_profile(&ws, &cfg.model, &cfg.grid, &profile_options(cfg)))?;
    let label = classify_profile(&wp);
    let regime = classify_regime(&cfg.model, ws.c)?;
    let mut csv = Csv::new("xi,phi");
    for (i, phi) in wp.phi.iter().enumerate() {
        csv.row(&[cfg.grid.x(i), *phi]);
    }
    run.write("profile.csv", &csv.finish())?;
    let summary = json!({
        "c": ws.c,
        "residual": wp.residual,
        "crossings": wp.crossings,
        "label": label_name(label),
        "regime": regime_name(regime),
    });
    run.write_json("profile.json", &summary)?;
    run.note("profile", summary);
    run.check("profile_residual", wp.residual < 1e-6, format!("residual {:e} < 1e-6", wp.residual));
    run.check("regime_agreement", agrees(label, regime), format!("profile {} vs regime {}", label_name(label), regime_name(regime)));
    Ok(())
}

fn evolve(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let (mp, grid, ex) = (&cfg.model, cfg.grid, &cfg.experiment);
    let t_end = cfg.t_end(10.0);
    let vp = mp.v_plus();
    let ws = cfg.wave()?;
    let front = ex.front.unwrap_or(0.5 * grid.half_width);
    let wp = match ex.form {
        EquationForm::Lab | EquationForm::Comparison => None,
        _ => Some(run.stage("profile", |_| compute_profile(&ws, mp, &grid, &profile_options(cfg)))?),
    };
    let u0: Vec<f64> = match &wp {
        Some(wp) => cfg.perturbation().sample(&ws, wp, run.seed),
        None => {
            let pseudo = crate::waves::WaveProfile {
                grid,
                phi: vec![vp; grid.n],
                c: ws.c,
                r: mp.r,
                v_plus: vp,
                lambda_tail: ws.lambda,
                residual: 0.0,
                crossings: 0,
            };
            cfg.perturbation().sample(&ws, &pseudo, run.seed)
        }
    };
    let xs = grid.points();
    let initial: Vec<f64> = match ex.form {
        // established population on the right; the front invades leftwards
        EquationForm::Lab => xs.iter().map(|&x| if x >= front { vp } else { 0.0 }).collect(),
        EquationForm::Perturbation => u0,
        EquationForm::Antiweighted => xs.iter().zip(&u0).map(|(x, u)| (-ws.lambda * x).exp() * u).collect(),
        EquationForm::Comparison => xs.iter().zip(&u0).map(|(x, u)| ((-ws.lambda * x).exp() * u).abs()).collect(),
    };
    let dx = grid.dx();
    let hist = |_: f64, x: f64| initial[(((x + grid.half_width) / dx).round() as usize).min(grid.n - 1)];
    let prof = |x: f64| wp.as_ref().map_or(0.0, |w| w.eval(x));
    let mut field = match ex.form {
        EquationForm::Lab => DelayField::lab(mp, grid, &hist, cfg.dt),
        EquationForm::Perturbation => DelayField::perturbation(&ws, mp, &prof, grid, &hist, cfg.dt),
        EquationForm::Antiweighted => DelayField::antiweighted(&ws, mp, &prof, grid, &hist, cfg.dt),
        EquationForm::Comparison => DelayField::comparison(&ws, mp, grid, &hist, cfg.dt),
    }
    .map_err(|e| cfg.locate(e))?;
    let every = ex.snapshot_every.unwrap_or(t_end / 10.0);
    let stride = ex.stride.unwrap_or((grid.n / 512).max(1));
    let mut csv = Csv::new("t,xi,value");
    let mut fronts = Vec::new();
    let snap = |f: &DelayField, csv: &mut Csv, fronts: &mut Vec<(f64, f64)>| {
        let t = f.time();
        for i in (0..grid.n).step_by(stride) {
            csv.row(&[t, grid.x(i), f.current()[i]]);
        }
        if let Some(x) = level_crossing(&grid, f.current(), 0.5 * vp).filter(|_| ex.form == EquationForm::Lab) {
            fronts.push((t, x));
        }
    };
    run.stage("evolve", |_| {
        snap(&field, &mut csv, &mut fronts);
        let count = (t_end / every).round() as usize;
        for k in 1..=count {
            field.advance_to(k as f64 * every)?;
            snap(&field, &mut csv, &mut fronts);
        }
        Ok(())
    })?;
    run.write("evolve.csv", &csv.finish())?;
    // speed over the second half of the run, away from the initial transient
    let speed = match fronts.as_slice() {
        [.., (t2, x2)] if fronts.len() >= 2 => {
            let (ta, xa) = fronts[fronts.len() / 2 - usize::from(fronts.len() == 2)];
            (t2 > &ta).then(|| (xa - x2) / (t2 - ta))
        }
        _ => None,
    };
    let meta = json!({
        "form": ex.form,
        "dt": field.dt(),
        "delay_depth": field.depth(),
        "steps": field.steps(),
        "t_end": field.time(),
        "min_seen": field.min_seen(),
        "sup_final": field.sup_norm(),
        "front_speed": speed,
        "c_star": min_speed(mp)?.0,
    });
    run.write_json("evolve.json", &meta)?;
    run.note("evolve", meta);
    if matches!(ex.form, EquationForm::Lab | EquationForm::Comparison) {
        let min = field.min_seen();
        run.check("positivity", min >= -1e-12, format!("min over run {min:e} >= -1e-12"));
    }
    Ok(())
}

fn delayed_exp_cmd(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let (k_bar, r) = (cfg.experiment.k_bar, cfg.model.r);
    if r <= 0.0 {
        return Err(cfg.locate(cfg_err(0, "r", "the delayed exponential needs r > 0")));
    }
    let t_end = cfg.t_end(10.0);
    let dt = cfg.dt.unwrap_or(1e-3);
    let series =
        run.stage("rk4", |_| integrate_dde_steps(|_, _: &f64, zd: &f64| k_bar * zd, |_| 1.0, r, t_end, dt)).map_err(|e| cfg.locate(e))?;
    let every = ((cfg.experiment.sample_dt / dt).round() as usize).max(1);
    let mut csv = Csv::new("t,formula,rk4,rel_err");
    let mut worst: f64 = 0.0;
    for (i, (t, y)) in series.t.iter().zip(&series.y).enumerate() {
        let exact = delayed_exp(k_bar, r, *t);
        let rel = (y - exact).abs() / exact.abs().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        if i % every == 0 {
            csv.row(&[*t, exact, *y, rel]);
        }
    }
    run.write("delayed_exp.csv", &csv.finish())?;
    run.note("delayed_exp", json!({"k_bar": k_bar, "r": r, "dt": dt, "max_rel_err": worst}));
    run.check("delayed_exp_golden", worst <= 1e-8, format!("max relative error {worst:e} <= 1e-8"));
    Ok(())
}

fn farfield(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let mp = &cfg.model;
    let t_end = cfg.t_end(30.0);
    let opts = FarfieldOptions { dt: cfg.dt.unwrap_or(1e-3), ..FarfieldOptions::default() };
    let history = History::constant(cfg.experiment.amplitude);
    let s = run.stage("farfield", |_| farfield_ode(mp, &history, t_end, &opts))?;
    let dt = dividing_step(mp.r, opts.dt);
    let every = ((cfg.experiment.sample_dt / dt).round() as usize).max(1);
    let mut csv = Csv::new("t,z");
    for (i, (t, z)) in s.t.iter().zip(&s.y).enumerate() {
        if i % every == 0 {
            csv.row(&[*t, *z]);
        }
    }
    run.write("farfield.csv", &csv.finish())?;
    // envelope max |z| over [t, t + max(r, sample_dt)] keeps the fit away from zero crossings
    let span = ((mp.r.max(cfg.experiment.sample_dt)) / dt).round().max(1.0) as usize;
    let mut et = Vec::new();
    let mut ey = Vec::new();
    let mut i = 0;
    while i + span < s.t.len() {
        et.push(s.t[i]);
        ey.push(s.y[i..=i + span].iter().fold(0.0f64, |m, z| m.max(z.abs())));
        i += every;
    }
    let fit = fit_decay(&et, &ey, FitModel::Exponential, (0.25 * t_end, t_end)).ok();
    let rate = fit.map(|f| f.parameter());
    run.note("farfield", json!({"dt": dt, "envelope_fit": fit, "linear_rate_r0": mp.delta - mp.birth_prime_at_v_plus()}));
    let quarter = s.len() / 4;
    let head = s.y[..quarter.max(1)].iter().fold(0.0f64, |m, z| m.max(z.abs()));
    let tail = s.y[3 * quarter..].iter().fold(0.0f64, |m, z| m.max(z.abs()));
    run.check(
        "farfield_decay",
        tail < head && rate.is_some_and(|m| m > 0.0),
        format!("late sup {tail:e} < early sup {head:e}, envelope rate {}", rate.map_or("n/a".into(), |m| format!("{m:.6}"))),
    );
    Ok(())
}

fn linear_decay(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let (mp, grid, ex) = (&cfg.model, cfg.grid, &cfg.experiment);
    let ws = cfg.wave()?;
    let t_end = cfg.t_end(200.0);
    let (a, c0, w) = (ex.amplitude, ex.center, ex.width);
    let hist = move |_: f64, x: f64| a * (-0.5 * ((x - c0) / w).powi(2)).exp();
    let (t, sup, warnings) = run.stage("evolve", |_| -> Result<_> {
        match ex.solver {
            LinearSolver::Spectral => {
                let mut f = SpectralField::comparison(&ws, mp, grid, &hist, cfg.dt).map_err(|e| cfg.locate(e))?;
                let out = evolve_spectral(&mut f, t_end, ex.sample_dt)?;
                Ok((out.t, out.sup, out.warnings))
            }
            LinearSolver::Fd => {
                let mut f = DelayField::comparison(&ws, mp, grid, &hist, cfg.dt).map_err(|e| cfg.locate(e))?;
                let (mut t, mut sup) = (vec![0.0], vec![f.sup_norm()]);
                let count = (t_end / ex.sample_dt).round() as usize;
                for k in 1..=count {
                    f.advance_to(k as f64 * ex.sample_dt)?;
                    t.push(f.time());
                    sup.push(f.sup_norm());
                }
                Ok((t, sup, Vec::new()))
            }
        }
    })?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let mut csv = Csv::new("t,sup");
    for (a, b) in t.iter().zip(&sup) {
        csv.row(&[*a, *b]);
    }
    run.write("linear_decay.csv", &csv.finish())?;
    let report = measure_linear_decay(&t, &sup, &ws, mp, cfg.window(t_end))?;
    run.write_json("linear_decay.json", &report)?;
    run.note("linear_decay", json!({"report": report, "warnings": warnings}));
    if ws.critical {
        let e = report.fit.parameter();
        run.check("linear_critical_rate", (-0.65..=-0.35).contains(&e), format!("exponent {e:.6} in [-0.65, -0.35]"));
    } else {
        let m = report.fit.parameter();
        run.check("linear_decay_rate", report.decaying, format!("rate {m:.6} > 0 (mu0 = {:.6})", report.mu0));
    }
    Ok(())
}

fn stability(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let ex = &cfg.experiment;
    let ws = cfg.wave()?;
    let mut spec = ExperimentSpec::new(cfg.model, ws, cfg.perturbation(), cfg.grid, cfg.t_end(200.0));
    spec.dt = cfg.dt;
    spec.sample_dt = ex.sample_dt;
    spec.x0 = ex.x0;
    spec.window = ex.window;
    spec.track_comparison = ex.track_comparison;
    spec.profile = profile_options(cfg);
    spec.seed = run.seed;
    let out = run.stage("stability", |_| run_stability(&spec)).map_err(|e| cfg.locate(e))?;
    let mut csv = Csv::new(StabilitySeries::CSV_HEADER);
    for i in 0..out.series.len() {
        csv.row(&out.series.row(i));
    }
    run.write("stability.csv", &csv.finish())?;
    let summary = json!({
        "fit": out.fit,
        "guard": out.guard,
        "mu_bound": out.mu_bound,
        "zones": out.zones,
        "boundedness": out.boundedness,
        "profile_residual": out.profile_residual,
        "profile_label": label_name(out.profile_label),
        "x0": out.x0,
        "dt": out.dt,
    });
    run.write_json("stability.json", &summary)?;
    run.note("stability", summary);
    if let Some(b) = out.boundedness {
        run.check("boundedness", b.passed, format!("min(u+ - |u~|) = {:e} >= -1e-8", b.min_gap));
    }
    let p = out.fit.parameter();
    if ws.critical {
        run.check("critical_rate", out.rate_passed(), format!("algebraic exponent {p:.6} in [-0.65, -0.35], R^2 {:.6}", out.fit.r_squared));
        if let (Some(g), Some(ok)) = (out.guard, out.guard_passed()) {
            run.check("critical_guard", ok, format!("mixed-model rate {:.3e} within 2 sigma ({:.3e}) of 0", g.parameter(), g.stderr));
        }
    } else {
        run.check("decay_rate", out.rate_passed(), format!("mixed-model rate {p:.6} > 0, R^2 {:.6}", out.fit.r_squared));
        run.check("mu_bound", out.mu_bound > 0.0, format!("min(delta, mu0) = {:.6} > 0", out.mu_bound));
    }
    let far = out.zones.far.map_or("no fit".to_string(), |f| format!("mu2 {:.6}, R^2 {:.6}", f.parameter(), f.r_squared));
    run.check("far_zone", out.zones.far_passed, far);
    let near = out.zones.near.map_or("no fit".to_string(), |f| format!("parameter {:.6}, R^2 {:.6}", f.parameter(), f.r_squared));
    run.check("near_zone", out.zones.near_passed, near);
    Ok(())
}

/// One `(r, c)` cell of a phase-map sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub id: usize,
    pub r: f64,
    pub c_factor: f64,
    pub c: f64,
    pub regime: RegimeLabel,
    pub label: Option<ProfileLabel>,
    pub residual: f64,
    pub crossings: usize,
    pub agree: bool,
    pub error: Option<String>,
}

/// Computes and classifies one sweep cell.
pub fn sweep_cell(mp: &ModelParams, grid: &Grid1D, opts: &ProfileOptions, id: usize, r: f64, factor: f64) -> SweepCell {
    let mut cell = SweepCell {
        id,
        r,
        c_factor: factor,
        c: f64::NAN,
        regime: RegimeLabel::NoWave,
        label: None,
        residual: f64::NAN,
        crossings: 0,
        agree: false,
        error: None,
    };
    let result = (|| -> Result<()> {
        let m = mp.with_delay(r)?;
        let ws = WaveSpec::from_factor(&m, factor)?;
        cell.c = ws.c;
        cell.regime = classify_regime(&m, ws.c)?;
        if cell.regime == RegimeLabel::NoWave {
            cell.agree = true;
            return Ok(());
        }
        let wp = compute_profile(&ws, &m, grid, opts)?;
        let label = classify_profile(&wp);
        cell.label = Some(label);
        cell.residual = wp.residual;
        cell.crossings = wp.crossings;
        cell.agree = agrees(label, cell.regime);
        Ok(())
    })();
    if let Err(e) = result {
        cell.error = Some(e.to_string());
    }
    cell
}

fn sweep(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let ex = &cfg.experiment;
    let jobs: Vec<(usize, f64, f64)> =
        ex.sweep_r.iter().flat_map(|&r| ex.sweep_c.iter().map(move |&f| (r, f))).enumerate().map(|(i, (r, f))| (i, r, f)).collect();
    let opts = profile_options(cfg);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(run.parallel).build().map_err(|e| Error::Io(e.to_string()))?;
    let cells: Vec<SweepCell> = run.stage("sweep", |_| {
        Ok(pool.install(|| jobs.par_iter().map(|&(i, r, f)| sweep_cell(&cfg.model, &cfg.grid, &opts, i, r, f)).collect()))
    })?;
    let mut csv = Csv::new("id,r,c_factor,c,regime,label,residual,crossings,agree");
    for cell in &cells {
        run.write_json(&format!("sweep/run_{:03}.json", cell.id), cell)?;
        csv.raw(&format!(
            "{},{},{},{},{},{},{},{},{}",
            cell.id,
            fmt_f64(cell.r),
            fmt_f64(cell.c_factor),
            fmt_f64(cell.c),
            regime_name(cell.regime),
            cell.label.map_or("error", label_name),
            fmt_f64(cell.residual),
            cell.crossings,
            cell.agree
        ));
    }
    run.write("sweep.csv", &csv.finish())?;
    let failed: Vec<usize> = cells.iter().filter(|c| c.error.is_some()).map(|c| c.id).collect();
    if !failed.is_empty() {
        let first = cells.iter().find_map(|c| c.error.clone()).unwrap_or_default();
        return Err(Error::numerical(format!("sweep cells {failed:?} failed: {first}"), f64::NAN));
    }
    let agree = cells.iter().filter(|c| c.agree).count();
    run.check("phase_map_agreement", agree == cells.len(), format!("{agree}/{} cells agree", cells.len()));
    Ok(())
}

/// Resolves the output directory: BLOWFLY_OUT, then `--out`, then `./out`.
pub fn output_dir(flag: Option<&Path>) -> PathBuf {
    match std::env::var_os("BLOWFLY_OUT") {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => flag.map_or_else(|| PathBuf::from("out"), Path::to_path_buf),
    }
}

/// Parses, runs and maps the outcome to an exit code.
pub fn execute(cli: &Cli) -> i32 {
    let cfg = match RunConfig::from_file(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let mut run = Run::new(&cfg, output_dir(cli.out.as_deref()), cli.seed, cli.parallel);
    let result = dispatch(cli.command, &mut run).and_then(|_| run.finish(cli.command));
    match result {
        Ok(()) if run.all_passed() => 0,
        Ok(()) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Entry point for the `blowfly` binary.
pub fn main() -> i32 {
    execute(&Cli::parse())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::parse("[model]\ndelta = 1\n").unwrap();
        assert_eq!(cfg.speed, SpeedChoice::Critical);
        assert_eq!(cfg.grid.half_width, 100.0);
        assert_eq!(cfg.grid.n, 4096);
        assert_eq!(cfg.model, ModelParams::reference());
    }

    #[test]
    fn errors_name_line_and_key() {
        let err = RunConfig::parse("[model]\n\ndelta = -1\n").unwrap_err();
        assert_eq!(err, Error::Config { line: 3, key: "delta".into(), message: "delta must be positive".into() });
        let err = RunConfig::parse("[model]\nD = 1\n[wave]\nspeed = 2\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 4, ref key, .. } if key == "speed"));
        let err = RunConfig::parse("[physics]\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));
        let err = RunConfig::parse("[grid]\nn = many\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, ref key, .. } if key == "n"));
    }

    #[test]
    fn slow_wave_rejected() {
        // r = 0, D = δ = 1, p = 2: c* = 2
        let err = RunConfig::parse("[model]\nr = 0\np = 2\n[wave]\nc = 0.5\n").unwrap_err();
        match err {
            Error::Config { line, key, message } => {
                assert_eq!((line, key.as_str()), (5, "c"));
                assert!(message.contains("c below critical speed"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::config("dt", "x")), 2);
        assert_eq!(exit_code(&Error::numerical("x", 1.0)), 3);
        assert_eq!(exit_code(&Error::Convergence { message: "x".into(), residual: 1.0 }), 3);
    }

    #[test]
    fn csv_has_manifest_trailer() {
        let mut c = Csv::new("a,b");
        c.row(&[0.1, 1.0 / 3.0]);
        let text = c.finish();
        assert_eq!(text.lines().last().unwrap(), "#manifest=manifest.json");
        let cell = text.lines().nth(1).unwrap().split(',').nth(1).unwrap();
        assert_eq!(cell.parse::<f64>().unwrap(), 1.0 / 3.0);
    }
}
