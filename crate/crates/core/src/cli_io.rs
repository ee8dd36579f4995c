//! Command-line surface: flat TOML configuration, dispatch to the numerical
//! modules, and result persistence.
//!
//! Every command validates its configuration and builds the dipole model before
//! computing anything. Outputs are collected in memory and written only after the
//! command succeeded, so a failing run leaves the output directory untouched.
//! `result.json` is a pure function of the configuration; wall time goes to
//! `timing.json`.

use std::f64::consts::PI;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::control_synthesis::{
    estimate_t2_min, fixed_point_steer, lambda_map, lost_set, perturbed_target, reach_third_order, t_sharp, SteeringConfig,
    SynthesisConfig, SynthesisError,
};
use crate::expansion::{order_slopes, ExpansionEngine, ExpansionError};
use crate::min_time::{default_bracket, estimate_tmin1, estimate_tmin2, lambda_t, sweep, write_sweep_csv, GridConfig, MinTimeError};
use crate::moment_solver::{project_vt, solve_moments, MomentError, MomentProblem, MomentOperator};
use crate::quadratic_forms::{classify_order, v_plus_control, v_plus_series, q2, q2_tilde, q3, q_s, t_star, ASource, FormError};
use crate::simulator::{fmt_f, propagate, Control, PropagateOptions, SimError};
use crate::spectral_core::{
    lost_directions, omega_of, product_tail_bound, DipoleModel, DipoleProfile, QuadratureConfig, SpectralError, SpectralState,
};
use crate::C64;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 0 success, 1 numerical failure, 2 config error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) | CliError::Io(_) => 1,
        }
    }
}

macro_rules! numerical_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Numerical(e.to_string())
            }
        }
    )*};
}
numerical_from!(SimError, ExpansionError, FormError, MomentError, MinTimeError);

impl From<SynthesisError> for CliError {
    fn from(e: SynthesisError) -> Self {
        match e {
            SynthesisError::UnsupportedLostSet(_)
            | SynthesisError::TooShort { .. }
            | SynthesisError::TargetShape { .. }
            | SynthesisError::NotThirdOrder(_)
            | SynthesisError::LostComponent { .. } => CliError::Config(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Simulate,
    Expand,
    Forms,
    Moments,
    Synthesize,
    Mintime,
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Expand => "expand",
            Command::Forms => "forms",
            Command::Moments => "moments",
            Command::Synthesize => "synthesize",
            Command::Mintime => "mintime",
            Command::Sweep => "sweep",
        }
    }
}

/// Flat run configuration. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Preset name, or `custom` to use `poly` and `ratio_weight`.
    pub dipole: String,
    /// Polynomial coefficients of a custom μ, lowest degree first.
    pub poly: Vec<f64>,
    /// Weight of `φ₂/φ₁ = 2cos(πx)` in a custom μ.
    pub ratio_weight: f64,
    /// Galerkin truncation `N`.
    pub n: usize,
    /// Horizon `T`.
    pub t: f64,
    /// Control cells on `[0, T]`.
    pub cells: usize,
    /// `zero`, `random`, `sine`, `v_plus` or `csv`.
    pub control: String,
    pub control_csv: String,
    pub amplitude: f64,
    /// Angular frequency of the `sine` control.
    pub frequency: f64,
    /// Project the control onto `V_T` (expand, forms).
    pub project: bool,
    /// Store every cell in the simulated trajectory.
    pub record: bool,
    /// Lost direction `K`.
    pub k: usize,
    pub tol: f64,
    pub seed: u64,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    /// `ε = 2^-e` for `e` in `eps_min_exp..=eps_max_exp`.
    pub eps_min_exp: u32,
    pub eps_max_exp: u32,
    /// Number of moment frequencies `ω_1..ω_m`.
    pub frequencies: usize,
    /// `second`, `third` or `steer`.
    pub mode: String,
    /// Target in lost coordinates (`third`: `[re, im]`).
    pub z: Vec<f64>,
    /// `T²_min` used by the schedule; 0 estimates it.
    pub t2_min: f64,
    pub margin: f64,
    pub cells_per_period: usize,
    /// Head length `T₁` of the fixed-point loop; 0 picks `T♯ + 0.15`.
    pub t1: f64,
    /// Truncated `H³` distance of the steering target from `ψ₁(T)`.
    pub delta: f64,
    pub max_iter: usize,
    pub grid_cells: usize,
    pub j_max: usize,
    pub sine_modes: usize,
    pub grid_tol: f64,
    pub bisect_tol: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub t_points: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dipole: "x_minus_half".into(),
            poly: Vec::new(),
            ratio_weight: 0.0,
            n: 64,
            t: 1.0,
            cells: 1000,
            control: "zero".into(),
            control_csv: String::new(),
            amplitude: 1.0,
            frequency: 10.0,
            project: false,
            record: false,
            k: 1,
            tol: 1e-8,
            seed: 0,
            threads: 0,
            eps_min_exp: 3,
            eps_max_exp: 8,
            frequencies: 12,
            mode: "second".into(),
            z: Vec::new(),
            t2_min: 0.0,
            margin: 0.1,
            cells_per_period: 128,
            t1: 0.0,
            delta: 1e-3,
            max_iter: 10,
            grid_cells: 512,
            j_max: 256,
            sine_modes: 64,
            grid_tol: 0.01,
            bisect_tol: 1e-3,
            t_min: 0.05,
            t_max: 0.7,
            t_points: 14,
        }
    }
}

const CONTROLS: [&str; 5] = ["zero", "random", "sine", "v_plus", "csv"];
const MODES: [&str; 3] = ["second", "third", "steer"];

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| bad(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// SHA-256 of the canonical JSON form.
    /// SHA-256 of the JSON form with `threads` cleared, since it does not affect results.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.recorded()).expect("config serialises");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The config as stored in `result.json`.
    pub fn recorded(&self) -> Self {
        Self { threads: 0, ..self.clone() }
    }

    pub fn grid(&self) -> GridConfig {
        GridConfig { cells: self.grid_cells, j_max: self.j_max, sine_modes: self.sine_modes, grid_tol: self.grid_tol, ..Default::default() }
    }

    pub fn model(&self) -> Result<DipoleModel> {
        self.model_with(self.n)
    }

    fn model_with(&self, n: usize) -> Result<DipoleModel> {
        let r = if self.dipole == "custom" {
            if self.poly.is_empty() && self.ratio_weight == 0.0 {
                return Err(bad("custom dipole needs poly or ratio_weight"));
            }
            let p = DipoleProfile::polynomial(&self.poly).with_ratio_weight(self.ratio_weight);
            DipoleModel::from_profile("custom", p, n, QuadratureConfig::default())
        } else {
            DipoleModel::preset(&self.dipole, n)
        };
        r.map_err(|e| match e {
            SpectralError::UnknownDipole(_) | SpectralError::Truncation(_) => bad(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        })
    }

    /// Checks every key the command reads. Does not compute anything beyond the dipole model.
    pub fn validate(&self, cmd: Command) -> Result<DipoleModel> {
        let pos = |name: &str, x: f64| if x.is_finite() && x > 0.0 { Ok(()) } else { Err(bad(format!("{name} must be positive, got {x}"))) };
        if self.n < 2 {
            return Err(bad(format!("n must be at least 2, got {}", self.n)));
        }
        pos("t", self.t)?;
        pos("tol", self.tol)?;
        if self.cells == 0 {
            return Err(bad("cells must be positive"));
        }
        if !self.amplitude.is_finite() {
            return Err(bad("amplitude must be finite"));
        }
        if !CONTROLS.contains(&self.control.as_str()) {
            return Err(bad(format!("unknown control '{}', expected one of {CONTROLS:?}", self.control)));
        }
        if self.control == "csv" && self.control_csv.is_empty() {
            return Err(bad("control = \"csv\" needs control_csv"));
        }
        if self.k == 0 || self.k > self.n {
            return Err(bad(format!("k must lie in 1..={}, got {}", self.n, self.k)));
        }
        match cmd {
            Command::Expand => {
                if self.eps_max_exp < self.eps_min_exp + 5 {
                    return Err(bad("eps range must span at least 5 octaves"));
                }
            }
            Command::Moments => {
                if self.frequencies == 0 || self.frequencies >= self.n {
                    return Err(bad(format!("frequencies must lie in 1..{}", self.n)));
                }
            }
            Command::Synthesize => {
                if !MODES.contains(&self.mode.as_str()) {
                    return Err(bad(format!("unknown mode '{}', expected one of {MODES:?}", self.mode)));
                }
                pos("margin", self.margin + 1.0)?;
                if self.cells_per_period < 16 {
                    return Err(bad("cells_per_period must be at least 16"));
                }
                if self.mode == "third" && !(self.z.is_empty() || self.z.len() == 2) {
                    return Err(bad("third-order target z must be [re, im]"));
                }
                if self.mode == "steer" {
                    pos("delta", self.delta)?;
                    if self.max_iter == 0 {
                        return Err(bad("max_iter must be positive"));
                    }
                }
                if self.t2_min < 0.0 || self.t1 < 0.0 {
                    return Err(bad("t2_min and t1 must be non-negative"));
                }
            }
            Command::Mintime | Command::Sweep => {
                if self.grid_cells < 8 || self.sine_modes == 0 || self.j_max < 2 {
                    return Err(bad("grid_cells ≥ 8, sine_modes ≥ 1 and j_max ≥ 2 required"));
                }
                pos("grid_tol", self.grid_tol)?;
                pos("bisect_tol", self.bisect_tol)?;
                if cmd == Command::Sweep && !(self.t_min > 0.0 && self.t_min < self.t_max && self.t_points >= 2) {
                    return Err(bad("sweep needs 0 < t_min < t_max and t_points ≥ 2"));
                }
            }
            Command::Simulate | Command::Forms => {}
        }
        let n = match cmd {
            Command::Mintime | Command::Sweep => self.n.max(self.j_max),
            Command::Forms => self.n.max(self.j_max),
            _ => self.n,
        };
        let mu = self.model_with(n)?;
        if cmd == Command::Synthesize && self.mode != "third" {
            let lost = lost_set(&mu).indices;
            t_sharp(&lost, 1.0)?;
            if self.mode == "second" && !self.z.is_empty() {
                let dim: usize = lost.iter().map(|&k| if k == 1 { 1 } else { 2 }).sum();
                if self.z.len() != dim {
                    return Err(bad(format!("z has {} entries, the lost space of {lost:?} has dimension {dim}", self.z.len())));
                }
            }
        }
        if self.control == "csv" {
            self.control()?;
        }
        Ok(mu)
    }

    /// The configured control on `[0, T]` (`v_plus` lives on `[0, 2/π]`).
    pub fn control(&self) -> Result<Control> {
        let a = self.amplitude;
        Ok(match self.control.as_str() {
            "zero" => Control::zeros(self.cells, self.t),
            "random" => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let h = self.t / self.cells as f64;
                let vals: Vec<f64> = (0..self.cells).map(|_| rng.random_range(-1.0..1.0)).collect();
                let c = Control::new(vals, h);
                let nrm = c.l2_norm();
                if nrm > 0.0 { c.scaled(a / nrm) } else { c }
            }
            "sine" => {
                let f = self.frequency;
                Control::from_fn(self.t, self.cells, |t| a * (f * t).sin())
            }
            "v_plus" => v_plus_control(self.cells).scaled(a),
            "csv" => {
                let f = fs::File::open(&self.control_csv).map_err(|e| bad(format!("{}: {e}", self.control_csv)))?;
                Control::read_csv(BufReader::new(f)).map_err(|e| bad(format!("{}: {e}", self.control_csv)))?
            }
            other => return Err(bad(format!("unknown control '{other}'"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    pub n: usize,
    /// Kernel truncation `J` where a series is involved.
    pub j_max: Option<usize>,
    /// Bound on the neglected tail `Σ_{k>N}⟨μφ₁,φ_k⟩²` from the `k⁻³` decay.
    pub tail_estimate: f64,
}

impl Truncation {
    pub fn of(mu: &DipoleModel, j_max: Option<usize>) -> Self {
        let c = (1..=mu.n).map(|k| mu.m(1, k).abs() * (k as f64).powi(3)).fold(0.0, f64::max);
        Self { n: mu.n, j_max, tail_estimate: product_tail_bound(c, mu.n) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub command: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub truncation: Truncation,
    pub payload: Value,
}

/// Files produced by a command, in write order.
#[derive(Clone, Debug, Default)]
pub struct Outputs {
    pub files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    fn csv(&mut self, name: &str, header: &str, rows: impl IntoIterator<Item = Vec<f64>>) {
        let mut s = String::from(header);
        s.push('\n');
        for r in rows {
            let line: Vec<String> = r.into_iter().map(fmt_f).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        self.add(name, s.into_bytes());
    }

    fn control(&mut self, name: &str, u: &Control) {
        let mut buf = Vec::new();
        u.write_csv(&mut buf).expect("write to memory");
        self.add(name, buf);
    }

    /// Writes every file into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for (name, bytes) in &self.files {
            let p = dir.join(name);
            let tmp = dir.join(format!(".{name}.tmp"));
            fs::write(&tmp, bytes)?;
            fs::rename(&tmp, &p)?;
            paths.push(p);
        }
        Ok(paths)
    }
}

/// Runs `cmd` and returns the record plus all output files (including `result.json`).
pub fn execute(cmd: Command, cfg: &RunConfig) -> Result<(ResultRecord, Outputs)> {
    let mu = cfg.validate(cmd)?;
    let mut out = Outputs::default();
    let (payload, j_max) = match cmd {
        Command::Simulate => (cmd_simulate(cfg, &mu, &mut out)?, None),
        Command::Expand => (cmd_expand(cfg, &mu, &mut out)?, None),
        Command::Forms => (cmd_forms(cfg, &mu, &mut out)?, Some(cfg.j_max)),
        Command::Moments => (cmd_moments(cfg, &mu, &mut out)?, None),
        Command::Synthesize => (cmd_synthesize(cfg, &mu, &mut out)?, None),
        Command::Mintime => (cmd_mintime(cfg, &mu, &mut out)?, Some(cfg.j_max)),
        Command::Sweep => (cmd_sweep(cfg, &mu, &mut out)?, Some(cfg.j_max)),
    };
    let record = ResultRecord {
        command: cmd.name().to_string(),
        config_hash: cfg.hash(),
        config: cfg.recorded(),
        truncation: Truncation::of(&mu, j_max),
        payload,
    };
    let mut json = serde_json::to_vec_pretty(&record).map_err(|e| CliError::Numerical(e.to_string()))?;
    json.push(b'\n');
    out.files.insert(0, ("result.json".to_string(), json));
    Ok((record, out))
}

/// [`execute`] plus writing the outputs and `timing.json` into `dir`.
pub fn run(cmd: Command, cfg: &RunConfig, dir: &Path) -> Result<ResultRecord> {
    let start = Instant::now();
    let (record, mut out) = execute(cmd, cfg)?;
    let timing = json!({ "command": cmd.name(), "config_hash": record.config_hash, "threads": cfg.threads, "wall_seconds": start.elapsed().as_secs_f64() });
    out.add("timing.json", serde_json::to_vec_pretty(&timing).expect("json"));
    out.write(dir)?;
    Ok(record)
}

fn state_rows(s: &SpectralState) -> impl Iterator<Item = Vec<f64>> + '_ {
    s.coeffs.iter().enumerate().map(|(i, c)| vec![(i + 1) as f64, c.re, c.im, c.norm()])
}

fn cmd_simulate(cfg: &RunConfig, mu: &DipoleModel, out: &mut Outputs) -> Result<Value> {
    let u = cfg.control()?;
    let opts = PropagateOptions { record_cells: cfg.record, ..Default::default() };
    let traj = propagate(&SpectralState::basis(mu.n, 1), &u, mu, None, &opts)?;
    let fin = traj.final_state();
    let mut buf = Vec::new();
    traj.write_csv(&mut buf)?;
    out.add("trajectory.csv", buf);
    out.csv("final_state.csv", "k,re,im,abs", state_rows(fin));
    out.control("control.csv", &u);
    Ok(json!({
        "t": u.duration(),
        "cells": u.len(),
        "control_l2": u.l2_norm(),
        "final_norm": fin.norm(),
        "norm_drift": traj.conserved_norm_drift,
        "c1_abs": fin.coeffs[0].norm(),
    }))
}

fn controlled_freqs(mu: &DipoleModel) -> Vec<f64> {
    lost_set(mu).controlled(mu.n).into_iter().map(omega_of).collect()
}

fn cmd_expand(cfg: &RunConfig, mu: &DipoleModel, out: &mut Outputs) -> Result<Value> {
    let mut v = cfg.control()?;
    if cfg.project {
        v = project_vt(&v, &controlled_freqs(mu))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut side = || Control::new((0..v.len()).map(|_| cfg.amplitude * rng.random_range(-1.0..1.0) / (v.duration()).sqrt()).collect(), v.step);
    let w = side();
    let nu = side();
    let terms = ExpansionEngine::new(mu, v.step, 3).terms(&v, &w, Some(&nu));
    let eps: Vec<f64> = (cfg.eps_min_exp..=cfg.eps_max_exp).map(|e| 2f64.powi(-(e as i32))).collect();
    let slopes = order_slopes(mu, &v, &w, &nu, &eps)?;
    let header = format!("eps,{}", (0..slopes.fits.len()).map(|p| format!("remainder_{p}")).collect::<Vec<_>>().join(","));
    out.csv(
        "slopes.csv",
        &header,
        eps.iter().enumerate().map(|(i, &e)| std::iter::once(e).chain(slopes.fits.iter().map(|f| f.remainders[i])).collect()),
    );
    let zeta = terms.zeta_t.as_ref().map(|z| z.norm());
    Ok(json!({
        "psi_norm": terms.psi_t.norm(),
        "xi_norm": terms.xi_t.norm(),
        "zeta_norm": zeta,
        "tangency": terms.tangency(),
        "second_order_identity": terms.second_order_identity(),
        "slopes": slopes,
    }))
}

fn cmd_forms(cfg: &RunConfig, mu: &DipoleModel, out: &mut Outputs) -> Result<Value> {
    let mut v = cfg.control()?;
    if cfg.project {
        v = project_vt(&v, &controlled_freqs(mu))?;
    }
    let k = cfg.k;
    let j = cfg.j_max.min(mu.n);
    let q2r = q2(k, &v, mu, j)?;
    let q2t = q2_tilde(k, &v, mu, j)?;
    let s = v.primitive();
    let qs_quad = q_s(k, &s, mu, j, ASource::Quadrature)?;
    let qs_series = q_s(k, &s, mu, j, ASource::Series)?;
    let q3r = q3(k, &v, mu, j.min(64))?;
    let class = classify_order(k, mu, j.min(64), 1e-10)?;
    let series = if k == 1 && cfg.control == "v_plus" {
        let value = v_plus_series(mu, j) * cfg.amplitude * cfg.amplitude;
        Some(json!({ "series": value, "q2_tilde": q2t.re, "relative_error": (q2t.re - value).abs() / value.abs().max(f64::MIN_POSITIVE) }))
    } else {
        None
    };
    let tstar = t_star(k, mu, j).ok();
    out.control("control.csv", &v);
    Ok(json!({
        "k": k,
        "control_l2": v.l2_norm(),
        "q2": q2r,
        "q2_tilde": q2t,
        "q_s_quadrature": qs_quad,
        "q_s_series": qs_series,
        "q3": q3r,
        "classification": class,
        "t_star": tstar,
        "series_comparison": series,
    }))
}

fn cmd_moments(cfg: &RunConfig, mu: &DipoleModel, out: &mut Outputs) -> Result<Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let freqs: Vec<f64> = (1..=cfg.frequencies).map(omega_of).collect();
    let targets: Vec<C64> = freqs
        .iter()
        .map(|&w| {
            let re = rng.random_range(-1.0..1.0);
            C64::new(re, if w == 0.0 { 0.0 } else { rng.random_range(-1.0..1.0) })
        })
        .collect();
    let problem = MomentProblem::new(freqs.clone(), targets.clone(), cfg.t);
    let sol = solve_moments(&problem, cfg.cells)?;
    let op = MomentOperator::new(&freqs, cfg.cells, cfg.t / cfg.cells as f64);
    let achieved = op.moments(&sol.control);
    let round_trip = achieved.iter().zip(&targets).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
    let u = cfg.control()?;
    let u = if u.l2_norm() == 0.0 { Control::new((0..cfg.cells).map(|_| rng.random_range(-1.0..1.0)).collect(), cfg.t / cfg.cells as f64) } else { u };
    let projected = project_vt(&u, &controlled_freqs(mu))?;
    let psi = crate::expansion::first_order(&projected, mu);
    out.control("solution.csv", &sol.control);
    out.control("projected.csv", &projected);
    Ok(json!({
        "frequencies": freqs,
        "round_trip_residual": round_trip,
        "gram_condition": sol.condition,
        "control_l2": sol.control.l2_norm(),
        "projected_first_order_norm": psi.norm(),
        "projected_l2": projected.l2_norm(),
    }))
}

fn synthesis_config(cfg: &RunConfig, mu: &DipoleModel) -> Result<SynthesisConfig> {
    let mut s = SynthesisConfig { margin: cfg.margin, cells_per_period: cfg.cells_per_period, seed: cfg.seed, ..Default::default() };
    if lost_set(mu).contains(1) {
        s.t2_min = if cfg.t2_min > 0.0 { cfg.t2_min } else { estimate_t2_min(mu, &cfg.grid(), cfg.bisect_tol)? };
    } else if cfg.t2_min > 0.0 {
        s.t2_min = cfg.t2_min;
    }
    Ok(s)
}

fn cmd_synthesize(cfg: &RunConfig, mu: &DipoleModel, out: &mut Outputs) -> Result<Value> {
    let lost = lost_set(mu);
    match cfg.mode.as_str() {
        "second" => {
            let dim: usize = lost.indices.iter().map(|&k| if k == 1 { 1 } else { 2 }).sum();
            let z = if cfg.z.is_empty() { vec![0.0; dim] } else { cfg.z.clone() };
            if z.len() != dim {
                return Err(bad(format!("z has {} entries, the lost space of {:?} has dimension {dim}", z.len(), lost.indices)));
            }
            let s = synthesis_config(cfg, mu)?;
            let plan = lambda_map(&z, cfg.t, mu, &s)?;
            out.control("control.csv", &plan.control());
            Ok(json!({ "lost": lost.indices, "plan": plan }))
        }
        "third" => {
            let z = if cfg.z.is_empty() { C64::new(0.0, 0.0) } else { C64::new(cfg.z[0], cfg.z[1]) };
            let s = SynthesisConfig { seed: cfg.seed, ..Default::default() };
            let plan = reach_third_order(cfg.k, z, cfg.t, cfg.cells, mu, &s)?;
            out.control("control.csv", &plan.control());
            Ok(json!({ "lost": lost.indices, "plan": plan }))
        }
        _ => {
            let s = synthesis_config(cfg, mu)?;
            let ts = t_sharp(&lost.indices, s.t2_used())?;
            let t1 = if cfg.t1 > 0.0 { cfg.t1 } else { ts + 0.15 };
            let psi_f = perturbed_target(mu.n, cfg.t, cfg.delta, cfg.seed);
            let steer = SteeringConfig { max_outer: cfg.max_iter, ..Default::default() };
            let r = fixed_point_steer(&psi_f, cfg.t, t1, mu, &s, &steer)?;
            out.control("head.csv", &r.head);
            out.control("tail.csv", &r.tail);
            out.csv("history.csv", "iteration,error", r.history.iter().enumerate().map(|(i, e)| vec![i as f64, *e]));
            Ok(json!({ "lost": lost.indices, "t_sharp": ts, "report": r }))
        }
    }
}

fn cmd_mintime(cfg: &RunConfig, mu: &DipoleModel, out: &mut Outputs) -> Result<Value> {
    let grid = cfg.grid();
    let bracket = default_bracket(mu, cfg.j_max, 1e-3)?;
    let t1 = estimate_tmin1(mu, bracket, cfg.bisect_tol, &grid)?;
    let (t2, witness) = estimate_tmin2(mu, bracket, cfg.bisect_tol, &grid)?;
    let h = witness.t / (witness.nodes.len() - 1) as f64;
    out.csv("witness.csv", "t,s", witness.nodes.iter().enumerate().map(|(i, &s)| vec![i as f64 * h, s]));
    let below = lambda_t(bracket.0, mu, &grid).ok();
    Ok(json!({
        "t_star": bracket.0,
        "upper_bound": 2.0 / PI,
        "tmin1": t1,
        "tmin2": t2,
        "lambda_at_t_star": below,
        "witness": { "t": witness.t, "form_value": witness.form_value, "endpoint_values": witness.endpoint_values, "h1_seminorm": witness.h1_seminorm },
    }))
}

fn cmd_sweep(cfg: &RunConfig, mu: &DipoleModel, out: &mut Outputs) -> Result<Value> {
    let m = cfg.t_points;
    let ts: Vec<f64> = (0..m).map(|i| cfg.t_min + (cfg.t_max - cfg.t_min) * i as f64 / (m - 1) as f64).collect();
    let rows = sweep(mu, &ts, &cfg.grid())?;
    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf)?;
    out.add("sweep.csv", buf);
    let lost = lost_directions(mu, mu.n.min(cfg.n), crate::control_synthesis::LOST_TOL);
    Ok(json!({ "rows": rows, "lost": lost.indices }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn toml_round_trip_keeps_hash(n in 2usize..200, t in 0.01f64..5.0, seed in any::<u64>(), z in prop::collection::vec(-1.0f64..1.0, 0..4)) {
            let cfg = RunConfig { n, t, seed, z, ..Default::default() };
            let back = RunConfig::from_toml(&toml::to_string(&cfg).unwrap()).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.hash(), cfg.hash());
        }
    }

    #[test]
    fn unknown_dipole_is_config_error() {
        let cfg = RunConfig { dipole: "x_cubed".into(), ..Default::default() };
        let err = cfg.validate(Command::Simulate).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("unknown dipole"));
    }
}
