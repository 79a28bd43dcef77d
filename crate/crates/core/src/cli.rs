//! Command-line driver: config loading, dotted overrides, artifact writing
//! and the run manifest.
//!
//! Exit status 0 on success, 1 for any configuration or parameter problem,
//! 2 for failures while running. Errors go to stderr as one JSON object.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::experiments::{
    chaos_convergence_study, penalty_sweep, sweep_kappa_ratio, turnpike_detect, Penalty,
    TurnpikeThresholds,
};
use crate::grid::{TimeGrid, DEFAULT_INTERVALS};
use crate::meanfield::{equilibrium_table, mean_inventory_trajectory, MeanFieldTrajectory};
use crate::model::{validate_params, ParamSet};
use crate::objective::{
    deterministic_objective, evaluate_objective, nash_gap_curve, path_objective, ControlDeviation,
    ObjectiveError,
};
use crate::riccati::{solve_oracle, RiccatiTables};
use crate::simulator::{
    estimate_conditional_means, simulate_mfg_paths, simulate_population, FeedbackLaw, SimConfig,
    SimError,
};
use crate::svg::{render_svg, PlotSpec};
use crate::table::{Cell, Table};
use crate::validation::validate;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const CSV_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const OUT_DIR_ENV: &str = "MFGEXEC_OUT_DIR";
pub const MANIFEST_FILE: &str = "manifest.json";
const DEFAULT_OUT_DIR: &str = "out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Equilibrium,
    Simulate,
    Population,
    NashGap,
    Sweep,
    Turnpike,
    Validate,
    /// Re-runs the command recorded in `--manifest` and compares outputs.
    Replay,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Equilibrium => "equilibrium",
            Command::Simulate => "simulate",
            Command::Population => "population",
            Command::NashGap => "nash-gap",
            Command::Sweep => "sweep",
            Command::Turnpike => "turnpike",
            Command::Validate => "validate",
            Command::Replay => "replay",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mfgexec", version, about = "Mean-field execution equilibrium: tables, simulation and experiments")]
pub struct Cli {
    pub command: Command,
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest of a previous run (replay only).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory; falls back to the config, then $MFGEXEC_OUT_DIR, then ./out.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Overrides `sim.master_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Caps worker threads; outputs do not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Also render SVG charts.
    #[arg(long)]
    pub svg: bool,
    /// Dotted-path override, e.g. `params.psi=0.1`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NashGapBlock {
    pub ns: Vec<usize>,
    pub deviations: Vec<ControlDeviation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    KappaRatio,
    PhiRun,
    Psi,
    Chaos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub kind: SweepKind,
    /// Axis values for `kappa_ratio`, `phi_run` and `psi`.
    #[serde(default)]
    pub values: Vec<f64>,
    /// Population sizes for `chaos`.
    #[serde(default)]
    pub ns: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateBlock {
    /// Adds the three-grid convergence study.
    pub convergence: bool,
}

impl Default for ValidateBlock {
    fn default() -> Self {
        ValidateBlock { convergence: true }
    }
}

fn default_intervals() -> usize {
    DEFAULT_INTERVALS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub params: ParamSet<f64>,
    #[serde(default)]
    pub sim: SimConfig,
    /// Intervals of the Riccati grid.
    #[serde(default = "default_intervals")]
    pub intervals: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub emit_svg: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nash_gap: Option<NashGapBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turnpike: Option<TurnpikeThresholds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validate: Option<ValidateBlock>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{message}")]
    Validation { message: String, key: Option<String> },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn invalid(message: impl Into<String>) -> Self {
        CliError::Validation {
            message: message.into(),
            key: None,
        }
    }

    fn invalid_key(key: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Validation {
            message: message.into(),
            key: Some(key.into()),
        }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation { .. } => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            CliError::Validation { message, key } => {
                json!({ "error": { "kind": "validation", "key": key, "message": message } })
            }
            CliError::Runtime(message) => json!({ "error": { "kind": "runtime", "message": message } }),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::invalid_key("sim", e.to_string())
    }
}

impl From<ObjectiveError> for CliError {
    fn from(e: ObjectiveError) -> Self {
        match e {
            ObjectiveError::Sim(s) => s.into(),
            other => CliError::runtime(other),
        }
    }
}

/// Sets `path` (dot separated, numeric segments index arrays) to `raw`,
/// parsed as JSON when possible and as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::invalid(format!("override `{assignment}` is not KEY=VALUE")))?;
    if path.is_empty() {
        return Err(CliError::invalid(format!("override `{assignment}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut node = doc;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        node = match node {
            Value::Array(items) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| CliError::invalid_key(path, format!("`{seg}` is not an array index")))?;
                items
                    .get_mut(idx)
                    .ok_or_else(|| CliError::invalid_key(path, format!("index {idx} out of range")))?
            }
            Value::Object(map) => map.entry(seg.to_string()).or_insert(if last { Value::Null } else { json!({}) }),
            Value::Null => {
                *node = json!({});
                node.as_object_mut()
                    .expect("just replaced")
                    .entry(seg.to_string())
                    .or_insert(if last { Value::Null } else { json!({}) })
            }
            _ => return Err(CliError::invalid_key(path, format!("`{seg}` is below a scalar"))),
        };
    }
    *node = value;
    Ok(())
}

/// Deserializes a config document, naming the offending key on failure.
pub fn parse_config(doc: Value) -> Result<RunConfig, CliError> {
    let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        let key = match inner.strip_prefix("missing field `").and_then(|s| s.split('`').next()) {
            Some(field) if path == "." => field.to_owned(),
            Some(field) => format!("{path}.{field}"),
            None => path,
        };
        CliError::invalid_key(key.clone(), format!("config key `{key}`: {inner}"))
    })?;
    if cfg.schema_version != CONFIG_SCHEMA_VERSION {
        return Err(CliError::invalid_key(
            "schema_version",
            format!("unsupported config schema_version {} (expected {CONFIG_SCHEMA_VERSION})", cfg.schema_version),
        ));
    }
    Ok(cfg)
}

/// Canonical JSON of the computational config (no output location).
fn canonical(cfg: &RunConfig) -> Value {
    let mut c = cfg.clone();
    c.out_dir = None;
    serde_json::to_value(&c).expect("config serializes")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn config_digest(cfg: &RunConfig) -> String {
    sha256_hex(serde_json::to_string(&canonical(cfg)).expect("json").as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputRecord {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: Command,
    pub config: Value,
    pub config_digest: String,
    pub seed: u64,
    pub schemas: Schemas,
    pub outputs: Vec<OutputRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schemas {
    pub config: u32,
    pub manifest: u32,
    pub csv: u32,
    pub report: u32,
}

const SCHEMAS: Schemas = Schemas {
    config: CONFIG_SCHEMA_VERSION,
    manifest: MANIFEST_SCHEMA_VERSION,
    csv: CSV_SCHEMA_VERSION,
    report: REPORT_SCHEMA_VERSION,
};

/// Collects artifacts in memory; nothing touches disk until the run succeeds.
struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
    svg: bool,
}

impl Artifacts {
    fn csv(&mut self, name: &str, table: &Table) {
        self.files.push((name.to_owned(), table.to_csv_string().into_bytes()));
    }

    fn json<S: Serialize>(&mut self, name: &str, body: &S) {
        let mut v = serde_json::to_value(body).expect("report serializes");
        if let Value::Object(map) = &mut v {
            map.insert("schema_version".into(), json!(REPORT_SCHEMA_VERSION));
        }
        let mut text = serde_json::to_string_pretty(&sorted(v)).expect("json");
        text.push('\n');
        self.files.push((name.to_owned(), text.into_bytes()));
    }

    fn chart(&mut self, name: &str, table: &Table, spec: PlotSpec) -> Result<(), CliError> {
        if self.svg {
            let s = render_svg(table, &spec).map_err(CliError::runtime)?;
            self.files.push((name.to_owned(), s.into_bytes()));
        }
        Ok(())
    }
}

/// Object keys in sorted order, recursively.
fn sorted(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sorted(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sorted).collect()),
        other => other,
    }
}

fn line(title: &str, x: &str, ys: &[&str], group: Option<&str>, x_unit: &str, y_unit: &str) -> PlotSpec {
    PlotSpec::Line {
        title: title.into(),
        x: x.into(),
        ys: ys.iter().map(|s| s.to_string()).collect(),
        group: group.map(str::to_owned),
        x_unit: x_unit.into(),
        y_unit: y_unit.into(),
    }
}

fn checked_params(p: &ParamSet<f64>) -> Result<ParamSet<f64>, CliError> {
    validate_params(*p).map_err(|e| {
        let key = e.violations.first().map(|v| format!("params.{}", v.field));
        CliError::Validation {
            message: e.to_string(),
            key,
        }
    })
}

type Solved = (ParamSet<f64>, RiccatiTables<f64>, MeanFieldTrajectory<f64>);

fn pipeline(cfg: &RunConfig) -> Result<Solved, CliError> {
    let p = checked_params(&cfg.params)?;
    let grid = TimeGrid::uniform(p.horizon, cfg.intervals).map_err(|e| CliError::invalid_key("intervals", e.to_string()))?;
    let tables = solve_oracle(&p, &grid).map_err(CliError::runtime)?;
    let traj = mean_inventory_trajectory(&tables, &p).map_err(CliError::runtime)?;
    Ok((p, tables, traj))
}

fn require<'a, T>(block: &'a Option<T>, name: &str, command: Command) -> Result<&'a T, CliError> {
    block
        .as_ref()
        .ok_or_else(|| CliError::invalid_key(name, format!("command `{}` needs the `{name}` block", command.name())))
}

fn run_equilibrium(cfg: &RunConfig, out: &mut Artifacts) -> Result<(), CliError> {
    let (_, tables, traj) = pipeline(cfg)?;
    out.csv("equilibrium.csv", &equilibrium_table(&tables, &traj));
    let mean = traj.to_table();
    out.csv("mean_trajectory.csv", &mean);
    out.chart(
        "inventories.svg",
        &mean,
        line("Mean inventories", "t", &["Q_bar_a", "Q_bar_n"], None, "time", "shares"),
    )
}

fn run_simulate(cfg: &RunConfig, out: &mut Artifacts) -> Result<(), CliError> {
    let (p, tables, traj) = pipeline(cfg)?;
    cfg.sim.validate()?;
    let ens = simulate_mfg_paths(&p, &tables, &traj, &cfg.sim)?;
    let recorded = cfg.sim.record_controls;
    let mut cols = vec!["path_id", "common_id", "player", "Q_a_T", "Q_n_T", "S_T"];
    if recorded {
        cols.push("J");
    }
    let mut terminal = Table::new(&cols);
    for r in &ens.paths {
        let t = &r.totals;
        let mut row: Vec<Cell> = vec![
            r.path_id.into(),
            r.common_id.into(),
            r.player.into(),
            t.q_a_terminal.into(),
            t.q_n_terminal.into(),
            t.s_terminal.into(),
        ];
        if recorded {
            row.push(path_objective(t, &p).into());
        }
        terminal.push(row).expect("row width matches header");
    }
    out.csv("terminal.csv", &terminal);
    let q_t = ens.terminal_inventory();
    let mean = crate::stats::mean(&q_t);
    let se = crate::stats::std_error(&q_t);
    let v_t = traj.v_bar[traj.v_bar.len() - 1];
    let objective = if recorded {
        Some(evaluate_objective(&ens, &p, 0)?)
    } else {
        None
    };
    out.json(
        "simulate_summary.json",
        &json!({
            "n_paths": ens.paths.len(),
            "mean_terminal_inventory": mean,
            "terminal_inventory_std_error": se,
            "v_bar_terminal": v_t,
            "z_score": if se > 0.0 { (mean - v_t) / se } else { f64::NAN },
            "objective": objective,
            "mean_field_objective": deterministic_objective(&traj, &p),
            "params_digest": ens.params_digest,
            "sim_digest": ens.config_digest,
        }),
    );
    if let Some(dump) = ens.dump_table() {
        out.csv("paths.csv", &dump);
        let law = FeedbackLaw::new(&p, &tables, &traj, cfg.sim.n_steps)?;
        let mut m = Table::new(&["t", "mean_Q_total", "V_bar"]);
        for (k, &t) in ens.times.iter().enumerate() {
            let qs: Vec<f64> = ens
                .paths
                .iter()
                .map(|r| {
                    let a = r.arrays.as_ref().expect("stored paths");
                    a.q_a[k] + a.q_n[k]
                })
                .collect();
            m.push(vec![t.into(), crate::stats::mean(&qs).into(), law.v_bar[k].into()])
                .expect("row width matches header");
        }
        out.csv("simulate_mean.csv", &m);
        out.chart(
            "simulate_mean.svg",
            &m,
            line("Simulated and analytic mean inventory", "t", &["mean_Q_total", "V_bar"], None, "time", "shares"),
        )?;
    }
    Ok(())
}

fn run_population(cfg: &RunConfig, out: &mut Artifacts) -> Result<(), CliError> {
    let (p, tables, traj) = pipeline(cfg)?;
    cfg.sim.validate()?;
    let law = FeedbackLaw::new(&p, &tables, &traj, cfg.sim.n_steps)?;
    let ens = simulate_population(&p, &tables, &traj, &cfg.sim, None)?;
    let cm = estimate_conditional_means(&ens);
    let reference = law.discrete_mean(p.q0_total());
    let avg = |pick: &dyn Fn(&crate::simulator::DrawMeans) -> &Vec<f64>, k: usize| -> f64 {
        crate::stats::mean(&cm.per_draw.iter().map(|d| pick(d)[k]).collect::<Vec<_>>())
    };
    let mut t = Table::new(&[
        "t",
        "mean_Q_total",
        "cross_draw_sd_Q",
        "mean_nu_a",
        "mean_nu_n",
        "reference_Q_total",
        "reference_nu_a",
        "reference_nu_n",
        "analytic_nu_a",
        "analytic_nu_n",
    ]);
    for (k, &time) in cm.times.iter().enumerate() {
        t.push(vec![
            time.into(),
            avg(&|d| &d.q_total, k).into(),
            cm.cross_draw_sd_q[k].into(),
            avg(&|d| &d.nu_a, k).into(),
            avg(&|d| &d.nu_n, k).into(),
            reference.q_total[k].into(),
            reference.nu_a[k].into(),
            reference.nu_n[k].into(),
            law.mean_nu_a[k].into(),
            law.mean_nu_n[k].into(),
        ])
        .expect("row width matches header");
    }
    out.csv("population.csv", &t);
    let mut players = Table::new(&["common_id", "player", "Q_a_T", "Q_n_T", "S_T", "J"]);
    for d in &ens.draws {
        for (j, pt) in d.players.iter().enumerate() {
            players
                .push(vec![
                    d.common_id.into(),
                    j.into(),
                    pt.q_a_terminal.into(),
                    pt.q_n_terminal.into(),
                    pt.s_terminal.into(),
                    path_objective(pt, &p).into(),
                ])
                .expect("row width matches header");
        }
    }
    out.csv("population_players.csv", &players);
    let sup = |pick: &dyn Fn(&crate::simulator::DrawMeans) -> &Vec<f64>, r: &[f64]| -> f64 {
        crate::stats::mean(
            &cm.per_draw
                .iter()
                .map(|d| pick(d).iter().zip(r).fold(0.0, |m, (e, x)| f64::max(m, (2.0 * e - 2.0 * x).abs())))
                .collect::<Vec<_>>(),
        )
    };
    let objective = if cfg.sim.record_controls {
        Some(evaluate_objective(&ens, &p, 0)?)
    } else {
        None
    };
    out.json(
        "population_summary.json",
        &json!({
            "n_players": ens.n_players,
            "n_common": ens.draws.len(),
            "mean_sup_gap_nu_a": sup(&|d| &d.nu_a, &reference.nu_a),
            "mean_sup_gap_nu_n": sup(&|d| &d.nu_n, &reference.nu_n),
            "player_0_objective": objective,
            "params_digest": ens.params_digest,
            "sim_digest": ens.config_digest,
        }),
    );
    out.chart(
        "population.svg",
        &t,
        line("Population mean inventory", "t", &["mean_Q_total", "reference_Q_total"], None, "time", "shares"),
    )
}

fn run_nash_gap(cfg: &RunConfig, out: &mut Artifacts) -> Result<(), CliError> {
    let block = require(&cfg.nash_gap, "nash_gap", Command::NashGap)?;
    if block.ns.is_empty() || block.ns.contains(&0) {
        return Err(CliError::invalid_key("nash_gap.ns", "ns must be nonempty and at least 1"));
    }
    if block.deviations.is_empty() {
        return Err(CliError::invalid_key("nash_gap.deviations", "at least one deviation is required"));
    }
    let (p, tables, traj) = pipeline(cfg)?;
    cfg.sim.validate()?;
    let curve = nash_gap_curve(&p, &tables, &traj, &block.ns, &block.deviations, &cfg.sim)?;
    let table = curve.to_table();
    out.csv("gap_curve.csv", &table);
    let summary = curve.summary();
    out.json(
        "nash_gap_summary.json",
        &json!({
            "fitted_slope": summary.fitted_slope,
            "summary": summary,
            "rows": curve.rows,
            "warnings": curve.warnings,
        }),
    );
    out.chart("gap_curve.svg", &table, line("Unilateral deviation gain", "N", &["gap"], Some("epsilon"), "players", "objective"))
}

fn run_sweep(cfg: &RunConfig, out: &mut Artifacts) -> Result<(), CliError> {
    let block = require(&cfg.sweep, "sweep", Command::Sweep)?;
    let base = cfg.params;
    match block.kind {
        SweepKind::Chaos => {
            if block.ns.is_empty() || block.ns.contains(&0) || block.ns.windows(2).any(|w| w[1] <= w[0]) {
                return Err(CliError::invalid_key("sweep.ns", "ns must be nonempty, positive and increasing"));
            }
            checked_params(&base)?;
            cfg.sim.validate()?;
            let study = chaos_convergence_study(&base, &block.ns, &cfg.sim, cfg.intervals).map_err(CliError::runtime)?;
            let table = study.to_table();
            out.csv("chaos.csv", &table);
            out.json("chaos_report.json", &study);
            out.chart(
                "chaos.svg",
                &table,
                line("Empirical-mean mismatch", "N", &["sup_gap_a", "sup_gap_n"], None, "players", "rate"),
            )
        }
        kind => {
            if block.values.is_empty() {
                return Err(CliError::invalid_key("sweep.values", "values must be nonempty"));
            }
            let result = match kind {
                SweepKind::KappaRatio => {
                    if block.values.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
                        return Err(CliError::invalid_key("sweep.values", "ratios must be positive"));
                    }
                    sweep_kappa_ratio(&base, &block.values, cfg.intervals)
                }
                SweepKind::PhiRun => penalty_sweep(&base, Penalty::PhiRun, &block.values, cfg.intervals),
                SweepKind::Psi => penalty_sweep(&base, Penalty::Psi, &block.values, cfg.intervals),
                SweepKind::Chaos => unreachable!("handled above"),
            };
            let table = result.to_table();
            out.csv("sweep.csv", &table);
            out.json("sweep_report.json", &result);
            if kind == SweepKind::KappaRatio {
                out.chart(
                    "sweep.svg",
                    &table,
                    PlotSpec::Heatmap {
                        title: "Anonymous minus identity-revealed mean inventory".into(),
                        x: "t".into(),
                        y: "value".into(),
                        z: "Q_a_minus_Q_n".into(),
                        x_unit: "time".into(),
                        y_unit: "kappa_a / kappa_n".into(),
                    },
                )
            } else {
                out.chart(
                    "sweep.svg",
                    &table,
                    line("Mean inventory across the sweep", "t", &["V_bar"], Some("value"), "time", "shares"),
                )
            }
        }
    }
}

fn run_turnpike(cfg: &RunConfig, out: &mut Artifacts) -> Result<(), CliError> {
    let thresholds = cfg.turnpike.unwrap_or_default();
    let negative = |x: f64| x.is_nan() || x < 0.0;
    if negative(thresholds.tol_rel) || thresholds.tol_abs.is_some_and(negative) {
        return Err(CliError::invalid_key("turnpike", "tolerances must be nonnegative"));
    }
    let (p, _, traj) = pipeline(cfg)?;
    let report = turnpike_detect(&traj, p.q_target, &thresholds);
    let mut t = Table::new(&["t", "V_bar", "plateau_level"]);
    for (k, &time) in traj.grid.times().iter().enumerate() {
        t.push(vec![time.into(), traj.v_bar[k].into(), report.plateau_level.into()])
            .expect("row width matches header");
    }
    out.csv("turnpike.csv", &t);
    out.json("turnpike_report.json", &json!({ "report": report, "params": p }));
    out.chart(
        "turnpike.svg",
        &t,
        line("Mean inventory and plateau", "t", &["V_bar", "plateau_level"], None, "time", "shares"),
    )
}

fn run_validate(cfg: &RunConfig, out: &mut Artifacts) -> Result<(), CliError> {
    let p = checked_params(&cfg.params)?;
    TimeGrid::uniform(p.horizon, cfg.intervals).map_err(|e| CliError::invalid_key("intervals", e.to_string()))?;
    let block = cfg.validate.unwrap_or_default();
    let report = validate(&p, cfg.intervals, block.convergence).map_err(CliError::runtime)?;
    out.json("validation_report.json", &report);
    Ok(())
}

/// Runs one command and returns its artifacts, without writing anything.
fn execute(command: Command, cfg: &RunConfig) -> Result<Vec<(String, Vec<u8>)>, CliError> {
    let mut out = Artifacts {
        files: Vec::new(),
        svg: cfg.emit_svg,
    };
    match command {
        Command::Equilibrium => run_equilibrium(cfg, &mut out)?,
        Command::Simulate => run_simulate(cfg, &mut out)?,
        Command::Population => run_population(cfg, &mut out)?,
        Command::NashGap => run_nash_gap(cfg, &mut out)?,
        Command::Sweep => run_sweep(cfg, &mut out)?,
        Command::Turnpike => run_turnpike(cfg, &mut out)?,
        Command::Validate => run_validate(cfg, &mut out)?,
        Command::Replay => return Err(CliError::invalid("replay cannot be nested")),
    }
    Ok(out.files)
}

fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R, CliError> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(CliError::invalid_key("workers", "--workers must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(CliError::runtime)?;
            Ok(pool.install(f))
        }
    }
}

fn write_outputs(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<Vec<OutputRecord>, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
    files
        .iter()
        .map(|(name, bytes)| {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
            Ok(OutputRecord {
                file: name.clone(),
                sha256: sha256_hex(bytes),
            })
        })
        .collect()
}

fn resolve_out_dir(flag: Option<&Path>, cfg: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.map(Path::to_path_buf))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn run_and_record(command: Command, cfg: &RunConfig, dir: &Path, workers: Option<usize>) -> Result<Manifest, CliError> {
    let files = with_workers(workers, || execute(command, cfg))??;
    let outputs = write_outputs(dir, &files)?;
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        command,
        config: canonical(cfg),
        config_digest: config_digest(cfg),
        seed: cfg.sim.master_seed,
        schemas: SCHEMAS,
        outputs,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    Ok(manifest)
}

fn read_json(path: &Path, what: &str) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::invalid_key(what, format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::invalid_key(what, format!("{what} {} is not valid JSON: {e}", path.display())))
}

/// Loads the config and applies `--set`, `--seed` and `--svg`.
pub fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::invalid_key("config", format!("command `{}` needs --config", cli.command.name())))?;
    let mut doc = read_json(path, "config")?;
    for s in &cli.set {
        apply_override(&mut doc, s)?;
    }
    let mut cfg = parse_config(doc)?;
    if let Some(seed) = cli.seed {
        cfg.sim.master_seed = seed;
    }
    if cli.svg {
        cfg.emit_svg = true;
    }
    Ok(cfg)
}

fn replay(cli: &Cli) -> Result<Manifest, CliError> {
    let path = cli
        .manifest
        .as_deref()
        .ok_or_else(|| CliError::invalid_key("manifest", "replay needs --manifest"))?;
    let recorded: Manifest = serde_path_to_error::deserialize(read_json(path, "manifest")?)
        .map_err(|e| CliError::invalid_key("manifest", format!("manifest key `{}`: {}", e.path(), e.inner())))?;
    let cfg = parse_config(recorded.config.clone())?;
    let digest = config_digest(&cfg);
    if digest != recorded.config_digest {
        return Err(CliError::invalid_key(
            "config_digest",
            format!("config digest mismatch: manifest records {}, config hashes to {digest}", recorded.config_digest),
        ));
    }
    if recorded.command == Command::Replay {
        return Err(CliError::invalid("manifest records a replay"));
    }
    let dir = resolve_out_dir(cli.out_dir.as_deref(), None);
    let fresh = run_and_record(recorded.command, &cfg, &dir, cli.workers)?;
    if fresh.outputs != recorded.outputs {
        let differing: Vec<&str> = fresh
            .outputs
            .iter()
            .filter(|o| !recorded.outputs.contains(o))
            .map(|o| o.file.as_str())
            .collect();
        return Err(CliError::Runtime(format!("replay outputs differ from the manifest: {}", differing.join(", "))));
    }
    Ok(fresh)
}

/// Parses arguments, runs, and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let err = CliError::invalid(e.to_string().trim().to_owned());
            eprintln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    let result = if cli.command == Command::Replay {
        replay(&cli)
    } else {
        load_config(&cli).and_then(|cfg| {
            let dir = resolve_out_dir(cli.out_dir.as_deref(), cfg.out_dir.as_deref());
            run_and_record(cli.command, &cfg, &dir, cli.workers)
        })
    };
    match result {
        Ok(m) => {
            for o in &m.outputs {
                println!("{}", o.file);
            }
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
