//! Batch front end: strict JSON configs, command dispatch and run manifests.
//!
//! Every run writes `manifest.json` into the output directory, even when it
//! fails. Report files (CSV, JSON) are byte-identical for identical inputs;
//! only the `timings` block of the manifest varies between runs.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, ValueEnum};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::control::{
    self, dissipation_scan, hum_solve, kovrijkine_c1, nonthick_counterexample, observability_lower_bound,
    spectral_ratio_scan, thickness_check, CgOptions, ControlError, DissipationOptions, HumProblem, OmegaSpec,
};
use crate::field::{load_fouf, sample_field, save_fouf, white_noise, Field, FieldError, Grid};
use crate::kalman::{analyze_structure, characteristic_exponents, KalmanError};
use crate::matops::MatError;
use crate::propagator::{evolve_path, norm_violations, Mode, Model, ModelSpec, PlanOptions, PropError};
use crate::regularity::{gevrey_scan, mst_scan, subelliptic_report, GevreyOptions, RegError, ScanReport, SphereOptions};
use crate::selftest;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_VERDICT: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Analyze,
    Evolve,
    Gevrey,
    Mst,
    Dissipation,
    Thickness,
    Spectral,
    Observe,
    Hum,
    Counterexample,
    Subelliptic,
    Selftest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Analyze => "analyze",
            Command::Evolve => "evolve",
            Command::Gevrey => "gevrey",
            Command::Mst => "mst",
            Command::Dissipation => "dissipation",
            Command::Thickness => "thickness",
            Command::Spectral => "spectral",
            Command::Observe => "observe",
            Command::Hum => "hum",
            Command::Counterexample => "counterexample",
            Command::Subelliptic => "subelliptic",
            Command::Selftest => "selftest",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fracou", version, about = "Fractional Ornstein-Uhlenbeck semigroups: evolution, regularity and control")]
pub struct Args {
    #[arg(value_enum)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config's `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Seed for every randomized step (overrides the config's `seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override a config entry, e.g. `--set hum.epsilon=1e-8`. Values are
    /// parsed as JSON, falling back to a plain string.
    #[arg(long = "set", value_name = "KEY=VAL")]
    pub set: Vec<String>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Schema(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Prop(#[from] PropError),
    #[error(transparent)]
    Kalman(#[from] KalmanError),
    #[error(transparent)]
    Reg(#[from] RegError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("thread pool: {0}")]
    Threads(String),
}

impl CliError {
    /// Stable machine-readable code recorded in the manifest.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Schema(_) => "schema",
            CliError::Io { .. } => "io",
            CliError::Mat(_) => "matrix",
            CliError::Field(_) => "field",
            CliError::Prop(_) => "propagator",
            CliError::Kalman(_) => "kalman",
            CliError::Reg(_) => "regularity",
            CliError::Control(ControlError::Identity(_)) => "hum_identity",
            CliError::Control(_) => "control",
            CliError::Threads(_) => "threads",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Initial data for commands that evolve a field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSource {
    /// `exp(-|x - center|² / (2 width²))`, centered at the origin by default.
    Gaussian {
        #[serde(default)]
        center: Option<Vec<f64>>,
        width: f64,
    },
    /// Unit-variance complex noise; seeded from the run seed by default.
    WhiteNoise {
        #[serde(default)]
        seed: Option<u64>,
    },
    /// FOUF file, relative to the config file.
    Fouf { path: PathBuf },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    pub rank_tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolveConfig {
    pub times: Vec<f64>,
    pub mode: Mode,
    pub chained: bool,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self { times: vec![0.5], mode: Mode::Forward, chained: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GevreyConfig {
    pub k: usize,
    pub q: f64,
    pub times: Vec<f64>,
    pub options: GevreyOptions,
}

impl Default for GevreyConfig {
    fn default() -> Self {
        Self { k: 0, q: 1.0, times: vec![0.1, 0.15, 0.2, 0.3, 0.4], options: GevreyOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MstConfig {
    pub times: Vec<f64>,
    pub tolerance: f64,
    pub sphere: SphereOptions,
}

impl Default for MstConfig {
    fn default() -> Self {
        Self { times: vec![1e-3, 3e-3, 1e-2, 3e-2, 1e-1], tolerance: 0.02, sphere: SphereOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DissipationConfig {
    pub k_values: Vec<f64>,
    pub times: Vec<f64>,
    pub options: DissipationOptions,
}

impl Default for DissipationConfig {
    fn default() -> Self {
        Self { k_values: vec![2.0, 4.0, 8.0], times: vec![0.1, 0.2, 0.3, 0.4], options: DissipationOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralConfig {
    pub ks: Vec<f64>,
    pub samples: usize,
    pub kovrijkine_k: f64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self { ks: (1..=16).map(f64::from).collect(), samples: 100, kovrijkine_k: std::f64::consts::E }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObserveConfig {
    pub horizons: Vec<f64>,
    pub nt: usize,
    pub probes: usize,
    pub reseed_rounds: usize,
}

impl Default for ObserveConfig {
    fn default() -> Self {
        Self { horizons: vec![0.5, 1.0], nt: 64, probes: 8, reseed_rounds: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HumConfig {
    pub horizon: f64,
    pub epsilon: f64,
    pub nt: usize,
    pub cg: CgOptions,
}

impl Default for HumConfig {
    fn default() -> Self {
        Self { horizon: 1.0, epsilon: 1e-6, nt: 128, cg: CgOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CounterexampleConfig {
    /// Defaults to the model's `s`.
    pub s: Option<f64>,
    pub horizon: f64,
    pub k_values: Vec<usize>,
    pub centers: Option<Vec<Vec<f64>>>,
    pub nt: usize,
    pub min_drop: f64,
}

impl Default for CounterexampleConfig {
    fn default() -> Self {
        Self { s: None, horizon: 1.0, k_values: (1..=8).collect(), centers: None, nt: 64, min_drop: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubellipticConfig {
    /// Band limit of the random fields.
    pub band: f64,
    pub count: usize,
    /// Largest allowed relative change of the maxima under refinement.
    pub stability_tol: f64,
}

impl Default for SubellipticConfig {
    fn default() -> Self {
        Self { band: 3.0, count: 50, stability_tol: 0.1 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub grid: Option<Grid>,
    #[serde(default)]
    pub plan: PlanOptions,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub field: Option<FieldSource>,
    #[serde(default)]
    pub omega: Option<OmegaSpec>,
    #[serde(default)]
    pub analyze: AnalyzeConfig,
    #[serde(default)]
    pub evolve: EvolveConfig,
    #[serde(default)]
    pub gevrey: GevreyConfig,
    #[serde(default)]
    pub mst: MstConfig,
    #[serde(default)]
    pub dissipation: DissipationConfig,
    #[serde(default)]
    pub spectral: SpectralConfig,
    #[serde(default)]
    pub observe: ObserveConfig,
    #[serde(default)]
    pub hum: HumConfig,
    #[serde(default)]
    pub counterexample: CounterexampleConfig,
    #[serde(default)]
    pub subelliptic: SubellipticConfig,
}

/// Sets `path` (dot-separated keys) in a JSON object tree, creating
/// intermediate objects as needed.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Schema(format!("override `{assignment}` is not KEY=VAL")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Schema(format!("override `{assignment}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Schema(format!("override `{key}`: `{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| json!({}));
    }
    unreachable!("key has at least one part")
}

fn check_finite(v: &Value, path: &str) -> Result<()> {
    match v {
        Value::Number(n) if n.as_f64().is_some_and(|x| !x.is_finite()) => {
            Err(CliError::Schema(format!("{path}: non-finite number")))
        }
        Value::Array(a) => a.iter().enumerate().try_for_each(|(i, x)| check_finite(x, &format!("{path}[{i}]"))),
        Value::Object(o) => o.iter().try_for_each(|(k, x)| check_finite(x, &format!("{path}.{k}"))),
        _ => Ok(()),
    }
}

/// Parses a config value strictly: unknown keys and non-finite numbers are
/// rejected.
pub fn parse_config(value: &Value) -> Result<RunConfig> {
    check_finite(value, "$")?;
    serde_json::from_value(value.clone()).map_err(|e| CliError::Schema(e.to_string()))
}

#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    fn new(name: &str, pass: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), pass, detail: detail.into() }
    }
}

struct Ctx {
    cfg: RunConfig,
    base: PathBuf,
    out: PathBuf,
    seed: u64,
    outputs: Vec<String>,
    verdicts: Vec<Verdict>,
    summary: Value,
}

impl Ctx {
    fn model(&self) -> Result<Model> {
        let spec = self.cfg.model.as_ref().ok_or_else(|| CliError::Schema("`model` is required".into()))?;
        Ok(Model::from_spec(spec)?)
    }

    fn omega(&self) -> Result<control::ThickSetSpec> {
        let spec = self.cfg.omega.as_ref().ok_or_else(|| CliError::Schema("`omega` is required".into()))?;
        Ok(spec.build(&self.grid()?, &self.base)?)
    }

    fn grid(&self) -> Result<Grid> {
        if let Some(g) = &self.cfg.grid {
            return Ok(g.clone());
        }
        if let Some(FieldSource::Fouf { path }) = &self.cfg.field {
            return Ok(load_fouf(&self.base.join(path))?.grid().clone());
        }
        Err(CliError::Schema("`grid` is required".into()))
    }

    fn field(&self, default: FieldSource) -> Result<Field> {
        let grid = self.grid()?;
        let source = self.cfg.field.clone().unwrap_or(default);
        let u = match source {
            FieldSource::Gaussian { center, width } => {
                if !(width > 0.0) {
                    return Err(CliError::Schema("field.width must be positive".into()));
                }
                let c = center.unwrap_or_else(|| vec![0.0; grid.dim()]);
                if c.len() != grid.dim() {
                    return Err(CliError::Schema(format!("field.center has {} entries, grid has {} axes", c.len(), grid.dim())));
                }
                sample_field(&grid, |x| {
                    let d2: f64 = x.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum();
                    Complex64::new((-0.5 * d2 / (width * width)).exp(), 0.0)
                })?
            }
            FieldSource::WhiteNoise { seed } => white_noise(&grid, seed.unwrap_or(self.seed)),
            FieldSource::Fouf { path } => {
                let u = load_fouf(&self.base.join(path))?;
                if u.grid() != &grid {
                    return Err(CliError::Schema("field file grid differs from `grid`".into()));
                }
                u
            }
        };
        Ok(u)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        self.outputs.push(name.into());
        Ok(())
    }

    fn write_with<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(BufWriter<fs::File>) -> Result<()>,
    {
        let path = self.out.join(name);
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        f(BufWriter::new(file))?;
        self.outputs.push(name.into());
        Ok(())
    }

    fn save_field(&mut self, name: &str, u: &Field) -> Result<()> {
        save_fouf(u, &self.out.join(name))?;
        self.outputs.push(name.into());
        Ok(())
    }

    fn json(&mut self, name: &str, v: &impl Serialize) -> Result<()> {
        let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Schema(e.to_string()))?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    fn scan(&mut self, name: &str, rep: &ScanReport) -> Result<()> {
        self.json(&format!("{name}.json"), rep)?;
        self.write_with(&format!("{name}.csv"), |w| Ok(rep.write_csv(w)?))?;
        self.verdicts.push(Verdict::new(name, rep.verdict, summarize_checks(rep)));
        Ok(())
    }
}

fn summarize_checks(rep: &ScanReport) -> String {
    let mut parts: Vec<String> = Vec::new();
    if let (Some(f), Some(th)) = (rep.fit, rep.theoretical_slope) {
        parts.push(format!("slope {:.4} vs {:.4}", f.slope, th));
    }
    parts.extend(rep.checks.iter().map(|c| format!("{} {:.3e} {}", c.name, c.value, if c.pass { "ok" } else { "fail" })));
    parts.join("; ")
}

fn analyze(ctx: &mut Ctx) -> Result<()> {
    let model = ctx.model()?;
    let ks = analyze_structure(&model.b, &model.q, ctx.cfg.analyze.rank_tol)?;
    let invariant_error = ks.check_invariants()?;
    let exponents = if ks.holds { Some(characteristic_exponents(&ks, model.s)?) } else { None };
    let report = json!({ "structure": ks, "invariant_error": invariant_error, "exponents": exponents });
    ctx.json("analysis.json", &report)?;
    ctx.summary = json!({ "kalman": ks.holds, "r": ks.r, "dims": ks.dims });
    ctx.verdicts.push(Verdict::new("flag_invariants", invariant_error <= 1e-8, format!("{invariant_error:.1e}")));
    Ok(())
}

fn evolve(ctx: &mut Ctx) -> Result<()> {
    let model = ctx.model()?;
    let u0 = ctx.field(FieldSource::Gaussian { center: None, width: 1.0 })?;
    let ec = ctx.cfg.evolve.clone();
    let before = norm_violations();
    let path = evolve_path(&model, u0.grid(), ec.mode, &ctx.cfg.plan, &u0, &ec.times, ec.chained)?;
    let violations = norm_violations() - before;
    let mut table = String::from("index,t,l2_norm\n");
    for (i, (t, u)) in path.times.iter().zip(&path.snapshots).enumerate() {
        ctx.save_field(&format!("snapshot_{i:04}.fouf"), u)?;
        table.push_str(&format!("{i},{t:e},{:e}\n", crate::field::l2_norm(u)));
    }
    ctx.write("evolve.csv", table.as_bytes())?;
    ctx.summary = json!({ "snapshots": path.times.len(), "drift": path.drift });
    ctx.verdicts.push(Verdict::new("norm_bound", violations == 0, format!("{violations} violations")));
    Ok(())
}

fn gevrey(ctx: &mut Ctx) -> Result<()> {
    let model = ctx.model()?;
    let ks = analyze_structure(&model.b, &model.q, None)?;
    let u0 = ctx.field(FieldSource::WhiteNoise { seed: None })?;
    let g = ctx.cfg.gevrey.clone();
    let rep = gevrey_scan(&model, &ks, g.k, g.q, &u0, &g.times, &g.options, &ctx.cfg.plan)?;
    ctx.scan("gevrey", &rep)
}

fn mst(ctx: &mut Ctx) -> Result<()> {
    let model = ctx.model()?;
    let m = ctx.cfg.mst.clone();
    let sphere = SphereOptions { seed: ctx.seed, ..m.sphere };
    let rep = mst_scan(&model, &m.times, m.tolerance, &sphere, &ctx.cfg.plan)?;
    ctx.scan("mst", &rep)
}

fn dissipation(ctx: &mut Ctx) -> Result<()> {
    let model = ctx.model()?;
    let ks = analyze_structure(&model.b, &model.q, None)?;
    let u0 = ctx.field(FieldSource::WhiteNoise { seed: None })?;
    let d = ctx.cfg.dissipation.clone();
    let rep = dissipation_scan(&model, &ks, &u0, &d.k_values, &d.times, &d.options, &ctx.cfg.plan)?;
    ctx.write("dissipation.json", format!("{}\n", rep.to_json()?).as_bytes())?;
    ctx.write_with("dissipation.csv", |w| Ok(rep.write_csv(w)?))?;
    let detail = rep.checks.iter().map(|c| format!("{} {:.3e}", c.name, c.value)).collect::<Vec<_>>().join("; ");
    ctx.verdicts.push(Verdict::new("dissipation", rep.verdict, detail));
    Ok(())
}

fn thickness(ctx: &mut Ctx) -> Result<()> {
    let omega = ctx.omega()?;
    let rep = thickness_check(&omega);
    let c1 = kovrijkine_c1(omega.gamma, &omega.a, std::f64::consts::E).ok();
    ctx.json("thickness.json", &json!({ "report": rep, "measure": omega.measure(), "kovrijkine_c1": c1 }))?;
    ctx.verdicts.push(Verdict::new("thick", rep.thick, format!("min fraction {:.4} vs gamma {}", rep.min_fraction, rep.gamma)));
    Ok(())
}

fn spectral(ctx: &mut Ctx) -> Result<()> {
    let omega = ctx.omega()?;
    let sc = ctx.cfg.spectral.clone();
    let rep = spectral_ratio_scan(&omega, &sc.ks, sc.samples, sc.kovrijkine_k, ctx.seed)?;
    ctx.scan("spectral", &rep)
}

fn observe(ctx: &mut Ctx) -> Result<()> {
    let model = ctx.model()?;
    let omega = ctx.omega()?;
    let oc = ctx.cfg.observe.clone();
    let mut estimates = Vec::new();
    let mut table = String::from("horizon,c_est,best_probe\n");
    for &t in &oc.horizons {
        let est = observability_lower_bound(&model, t, &omega, oc.nt, oc.probes, oc.reseed_rounds, ctx.seed, &ctx.cfg.plan)?;
        table.push_str(&format!("{t:e},{:e},{}\n", est.c_est, est.best_probe));
        estimates.push(est);
    }
    ctx.json("observe.json", &estimates)?;
    ctx.write("observe.csv", table.as_bytes())?;
    let mut order: Vec<usize> = (0..estimates.len()).collect();
    order.sort_by(|&a, &b| estimates[a].horizon.total_cmp(&estimates[b].horizon));
    let monotone = order.windows(2).all(|w| estimates[w[1]].c_est <= estimates[w[0]].c_est);
    let finite = estimates.iter().all(|e| e.c_est.is_finite());
    let values = estimates.iter().map(|e| format!("T={} C={:.3e}", e.horizon, e.c_est)).collect::<Vec<_>>().join(", ");
    ctx.verdicts.push(Verdict::new("finite", finite, values));
    ctx.verdicts.push(Verdict::new("cost_nonincreasing_in_horizon", monotone, ""));
    Ok(())
}

fn hum(ctx: &mut Ctx) -> Result<()> {
    let model = ctx.model()?;
    let omega = ctx.omega()?;
    let f0 = ctx.field(FieldSource::Gaussian { center: None, width: 1.0 })?;
    let hc = ctx.cfg.hum.clone();
    let sol = hum_solve(&HumProblem {
        model,
        horizon: hc.horizon,
        omega,
        f0,
        epsilon: hc.epsilon,
        nt: hc.nt,
        cg: hc.cg,
        plan: ctx.cfg.plan,
    })?;
    let summary = sol.summary();
    ctx.json("hum.json", &json!({ "parameters": hc, "summary": summary, "times": sol.times }))?;
    for (i, u) in sol.control.iter().enumerate() {
        ctx.save_field(&format!("control_{i:04}.fouf"), u)?;
    }
    ctx.save_field("terminal.fouf", &sol.terminal)?;
    ctx.save_field("g_terminal.fouf", &sol.g_terminal)?;
    ctx.summary = serde_json::to_value(&summary).map_err(|e| CliError::Schema(e.to_string()))?;
    ctx.verdicts.push(Verdict::new(
        "cg_converged",
        sol.converged,
        format!("{} iterations, residual {:.2e}, stagnated {}", sol.iterations, sol.residual, sol.stagnated),
    ));
    ctx.verdicts.push(Verdict::new(
        "optimality_identity",
        sol.identity_residual <= control::IDENTITY_TOL,
        format!("{:.2e}", sol.identity_residual),
    ));
    Ok(())
}

fn counterexample(ctx: &mut Ctx) -> Result<()> {
    let omega = ctx.omega()?;
    let cc = ctx.cfg.counterexample.clone();
    let s = match cc.s {
        Some(s) => s,
        None => ctx.model()?.s,
    };
    let rep = nonthick_counterexample(s, &omega, cc.horizon, &cc.k_values, cc.centers.as_deref(), cc.nt, cc.min_drop)?;
    ctx.scan("counterexample", &rep)
}

fn subelliptic(ctx: &mut Ctx) -> Result<()> {
    let model = ctx.model()?;
    let ks = analyze_structure(&model.b, &model.q, None)?;
    let sc = ctx.cfg.subelliptic.clone();
    let fields = selftest::localized_band_limited(&ctx.grid()?, sc.band, sc.count, ctx.seed);
    let rep = subelliptic_report(&model, &ks, &fields, None)?;
    ctx.json("subelliptic.json", &rep)?;
    let mut table = String::from("index,excluded,boundary_fraction,subelliptic_ratio,drift_ratio\n");
    for s in &rep.samples {
        table.push_str(&format!("{},{},{:e},{:e},{:e}\n", s.index, s.excluded, s.boundary_fraction, s.subelliptic_ratio, s.drift_ratio));
    }
    ctx.write("subelliptic.csv", table.as_bytes())?;
    let finite = [rep.max_subelliptic, rep.max_drift].iter().all(|v| v.is_finite());
    let stable = rep.subelliptic_change < sc.stability_tol && rep.drift_change < sc.stability_tol;
    ctx.verdicts.push(Verdict::new("finite", finite, format!("max {:.4} / {:.4}", rep.max_subelliptic, rep.max_drift)));
    ctx.verdicts.push(Verdict::new(
        "refinement_stable",
        stable,
        format!("{:.1e} / {:.1e}", rep.subelliptic_change, rep.drift_change),
    ));
    Ok(())
}

fn run_selftest(ctx: &mut Ctx) -> Result<()> {
    let results = selftest::run_all();
    let mut table = String::from("id,title,pass,seconds,detail\n");
    for r in &results {
        println!("{r}");
        table.push_str(&format!("{},{},{},{:.3},\"{}\"\n", r.id, r.title, r.pass, r.seconds, r.detail.replace('"', "'")));
        ctx.verdicts.push(Verdict::new(&format!("criterion_{}", r.id), r.pass, r.detail.clone()));
    }
    ctx.json("selftest.json", &results)?;
    ctx.write("selftest.csv", table.as_bytes())
}

fn dispatch(command: Command, ctx: &mut Ctx) -> Result<()> {
    match command {
        Command::Analyze => analyze(ctx),
        Command::Evolve => evolve(ctx),
        Command::Gevrey => gevrey(ctx),
        Command::Mst => mst(ctx),
        Command::Dissipation => dissipation(ctx),
        Command::Thickness => thickness(ctx),
        Command::Spectral => spectral(ctx),
        Command::Observe => observe(ctx),
        Command::Hum => hum(ctx),
        Command::Counterexample => counterexample(ctx),
        Command::Subelliptic => subelliptic(ctx),
        Command::Selftest => run_selftest(ctx),
    }
}

#[derive(Debug, Serialize)]
struct ErrorRecord {
    code: &'static str,
    message: String,
}

/// Runs one command and returns the process exit code.
pub fn run(args: &Args) -> i32 {
    let start = Instant::now();
    let raw: Result<Value> = match &args.config {
        Some(p) => fs::read_to_string(p)
            .map_err(io_err(p))
            .and_then(|s| serde_json::from_str(&s).map_err(|e| CliError::Schema(format!("{}: {e}", p.display())))),
        None => Ok(json!({})),
    };
    let base = args.config.as_ref().and_then(|p| p.parent()).map(Path::to_path_buf).unwrap_or_default();
    let config_value = raw.as_ref().ok().cloned();
    let parsed = raw.and_then(|mut v| {
        for s in &args.set {
            apply_override(&mut v, s)?;
        }
        parse_config(&v)
    });
    let out = args
        .out
        .clone()
        .or_else(|| parsed.as_ref().ok().and_then(|c| c.out.clone()))
        .unwrap_or_else(|| PathBuf::from("out").join(args.command.name()));
    let seed = args.seed.or_else(|| parsed.as_ref().ok().and_then(|c| c.seed)).unwrap_or(0);

    let mut ctx = Ctx {
        cfg: RunConfig::default(),
        base,
        out: out.clone(),
        seed,
        outputs: Vec::new(),
        verdicts: Vec::new(),
        summary: Value::Null,
    };
    let outcome = fs::create_dir_all(&out).map_err(io_err(&out)).and_then(|_| {
        ctx.cfg = parsed?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(args.threads.unwrap_or(0))
            .build()
            .map_err(|e| CliError::Threads(e.to_string()))?;
        pool.install(|| dispatch(args.command, &mut ctx))
    });

    let pass = outcome.is_ok() && ctx.verdicts.iter().all(|v| v.pass);
    let code = match (&outcome, pass) {
        (Err(_), _) => EXIT_ERROR,
        (Ok(()), true) => EXIT_PASS,
        (Ok(()), false) => EXIT_VERDICT,
    };
    let error = outcome.as_ref().err().map(|e| ErrorRecord { code: e.code(), message: e.to_string() });
    if let Some(e) = &error {
        eprintln!("error [{}]: {}", e.code, e.message);
    }
    let mut versions = BTreeMap::new();
    versions.insert("fracou", env!("CARGO_PKG_VERSION").to_string());
    versions.insert("fouf", "1".to_string());
    versions.insert("manifest", "1".to_string());
    let manifest = json!({
        "command": args.command,
        "versions": versions,
        "seed": seed,
        "threads": args.threads,
        "config_path": args.config,
        "config": config_value,
        "overrides": args.set,
        "resolved_config": if outcome.is_ok() { serde_json::to_value(&ctx.cfg).ok() } else { None },
        "summary": ctx.summary,
        "verdicts": ctx.verdicts,
        "pass": pass,
        "exit_code": code,
        "error": error,
        "outputs": ctx.outputs,
        "timings": { "total_seconds": start.elapsed().as_secs_f64() },
    });
    let path = out.join("manifest.json");
    let written = serde_json::to_string_pretty(&manifest).is_ok_and(|s| fs::write(&path, s + "\n").is_ok());
    if !written {
        eprintln!("error [io]: could not write {}", path.display());
        return EXIT_ERROR;
    }
    if args.command != Command::Selftest {
        for v in &ctx.verdicts {
            println!("{:<32} {}  {}", v.name, if v.pass { "PASS" } else { "FAIL" }, v.detail);
        }
    }
    println!("{}: {} (manifest {})", args.command.name(), ["pass", "error", "verdict failure"][code as usize], path.display());
    code
}
