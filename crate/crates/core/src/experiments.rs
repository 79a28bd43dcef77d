//! Parameter sweeps, turnpike detection and the propagation-of-chaos study.
//!
//! Sensitivity metrics are read from the deterministic mean trajectories;
//! only the chaos study is Monte Carlo.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::grid::TimeGrid;
use crate::meanfield::{mean_inventory_trajectory, MeanFieldTrajectory};
use crate::model::{validate_params, ParamSet};
use crate::riccati::solve_oracle;
use crate::rng::{stream_id, Channel};
use crate::simulator::{simulate_population, FeedbackLaw, SimConfig, SimError};
use crate::stats::{self, LinearFit};
use crate::table::{Cell, Table};

/// Identity-revealed cost held fixed in the κ-ratio sweep.
pub const KAPPA_N_FIXED: f64 = 2e-3;

/// Full deterministic pipeline for one parameter set.
pub fn solve_pipeline(
    p: &ParamSet<f64>,
    intervals: usize,
) -> Result<(crate::riccati::RiccatiTables<f64>, MeanFieldTrajectory<f64>), String> {
    let p = validate_params(*p).map_err(|e| e.to_string())?;
    let grid = TimeGrid::uniform(p.horizon, intervals).map_err(|e| e.to_string())?;
    let tables = solve_oracle(&p, &grid).map_err(|e| e.to_string())?;
    let traj = mean_inventory_trajectory(&tables, &p).map_err(|e| e.to_string())?;
    Ok((tables, traj))
}

/// One sweep cell: the exact parameters used and what they produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub value: f64,
    pub params: ParamSet<f64>,
    /// Set when the pipeline failed for this cell; the sweep continues.
    pub error: Option<String>,
    #[serde(skip)]
    pub times: Vec<f64>,
    #[serde(skip)]
    pub series: BTreeMap<String, Vec<f64>>,
    pub scalars: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub parameter: String,
    pub values: Vec<f64>,
    pub base: ParamSet<f64>,
    pub intervals: usize,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    /// Long format: `parameter, value, t` followed by one column per series.
    pub fn to_table(&self) -> Table {
        let names: Vec<String> = self
            .cells
            .iter()
            .find(|c| c.error.is_none())
            .map(|c| c.series.keys().cloned().collect())
            .unwrap_or_default();
        let mut cols = vec!["parameter".to_owned(), "value".to_owned(), "t".to_owned()];
        cols.extend(names.iter().cloned());
        let mut table = Table::new(&cols);
        for c in self.cells.iter().filter(|c| c.error.is_none()) {
            for (k, &t) in c.times.iter().enumerate() {
                let mut row = vec![Cell::from(self.parameter.as_str()), c.value.into(), t.into()];
                row.extend(names.iter().map(|n| Cell::Num(c.series[n][k])));
                table.push(row).expect("row width matches header");
            }
        }
        table
    }

    /// Scalar metric per cell, in sweep order (`NaN` for failed cells).
    pub fn scalar(&self, name: &str) -> Vec<f64> {
        self.cells
            .iter()
            .map(|c| c.scalars.get(name).copied().unwrap_or(f64::NAN))
            .collect()
    }
}

fn run_cells(
    parameter: &str,
    base: &ParamSet<f64>,
    values: &[f64],
    intervals: usize,
    set: impl Fn(&mut ParamSet<f64>, f64) + Sync,
    measure: impl Fn(&ParamSet<f64>, &MeanFieldTrajectory<f64>, &mut SweepCell) + Sync,
) -> SweepResult {
    use rayon::prelude::*;
    let cells = values
        .par_iter()
        .map(|&value| {
            let mut params = *base;
            set(&mut params, value);
            let mut cell = SweepCell {
                value,
                params,
                error: None,
                times: Vec::new(),
                series: BTreeMap::new(),
                scalars: BTreeMap::new(),
            };
            match solve_pipeline(&params, intervals) {
                Ok((_, traj)) => {
                    cell.times = traj.grid.times().to_vec();
                    measure(&params, &traj, &mut cell);
                }
                Err(e) => cell.error = Some(e),
            }
            cell
        })
        .collect();
    SweepResult {
        parameter: parameter.to_owned(),
        values: values.to_vec(),
        base: *base,
        intervals,
        cells,
    }
}

/// `κa = ratio·κn` with `κn` fixed; records `Q̄ᵃ − Q̄ⁿ` on the grid.
pub fn sweep_kappa_ratio(base: &ParamSet<f64>, ratios: &[f64], intervals: usize) -> SweepResult {
    run_cells(
        "kappa_ratio",
        base,
        ratios,
        intervals,
        |p, r| {
            p.kappa_n = KAPPA_N_FIXED;
            p.kappa_a = r * KAPPA_N_FIXED;
        },
        |p, traj, cell| {
            let start = p.q0_a - p.q0_n;
            let diff: Vec<f64> = traj
                .traded_a
                .iter()
                .zip(&traj.traded_n)
                .map(|(a, n)| start + (a - n))
                .collect();
            cell.scalars.insert("terminal_difference".into(), diff[diff.len() - 1]);
            cell.series.insert("Q_a_minus_Q_n".into(), diff);
            cell.series.insert("Q_bar_a".into(), traj.q_bar_a.clone());
            cell.series.insert("Q_bar_n".into(), traj.q_bar_n.clone());
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    PhiRun,
    Psi,
}

impl Penalty {
    pub fn name(self) -> &'static str {
        match self {
            Penalty::PhiRun => "phi_run",
            Penalty::Psi => "psi",
        }
    }
}

/// Indices of the nodes with `T/3 ≤ t ≤ 2T/3`.
fn middle_third(times: &[f64]) -> std::ops::Range<usize> {
    let t_end = times[times.len() - 1];
    let lo = times.iter().position(|&t| t >= t_end / 3.0).unwrap_or(0);
    let hi = times.iter().rposition(|&t| t <= 2.0 * t_end / 3.0).unwrap_or(times.len() - 1);
    lo..hi + 1
}

fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Penalty sweep with terminal level, peak rates and middle-third metrics.
///
/// Scalars: `V_T`, `peak_abs_control`, `mid_max_dev_target`
/// (`max |V̄ − q_target|`), `mid_max_abs` (`max |V̄|`) and `mid_variation`
/// (`max V̄ − min V̄`), the last three over the middle third.
pub fn penalty_sweep(base: &ParamSet<f64>, which: Penalty, values: &[f64], intervals: usize) -> SweepResult {
    run_cells(
        which.name(),
        base,
        values,
        intervals,
        |p, v| match which {
            Penalty::PhiRun => p.phi_run = v,
            Penalty::Psi => p.psi = v,
        },
        |p, traj, cell| {
            let v = &traj.v_bar;
            let mid = &v[middle_third(&cell.times)];
            let (lo, hi) = mid
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            let s = &mut cell.scalars;
            s.insert("V_T".into(), v[v.len() - 1]);
            s.insert(
                "peak_abs_control".into(),
                max_abs(traj.mean_nu_a.iter().chain(&traj.mean_nu_n).copied()),
            );
            s.insert("mid_max_dev_target".into(), max_abs(mid.iter().map(|x| x - p.q_target)));
            s.insert("mid_max_abs".into(), max_abs(mid.iter().copied()));
            s.insert("mid_variation".into(), hi - lo);
            cell.series.insert("V_bar".into(), v.clone());
            cell.series.insert("mean_nu_a".into(), traj.mean_nu_a.clone());
            cell.series.insert("mean_nu_n".into(), traj.mean_nu_n.clone());
        },
    )
}

/// Plateau tolerance `tol_abs + tol_rel·|plateau|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TurnpikeThresholds {
    /// Defaults to `0.02·|q_target|`, or 1 when the target is zero.
    pub tol_abs: Option<f64>,
    pub tol_rel: f64,
}

impl Default for TurnpikeThresholds {
    fn default() -> Self {
        TurnpikeThresholds {
            tol_abs: None,
            tol_rel: 0.02,
        }
    }
}

impl TurnpikeThresholds {
    pub fn resolved_abs(&self, q_target: f64) -> f64 {
        self.tol_abs.unwrap_or(if q_target == 0.0 { 1.0 } else { 0.02 * q_target.abs() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TurnpikeReport {
    pub entry_time: Option<f64>,
    pub exit_time: Option<f64>,
    pub plateau_level: f64,
    pub plateau_max_deviation: f64,
    pub has_turnpike: bool,
    pub tol_abs: f64,
    pub tol_rel: f64,
    pub horizon: f64,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Plateau = median of `V̄` over the middle third; entry and exit are the
/// first and last grid times within tolerance of it.
pub fn turnpike_detect(
    traj: &MeanFieldTrajectory<f64>,
    q_target: f64,
    thresholds: &TurnpikeThresholds,
) -> TurnpikeReport {
    let times = traj.grid.times();
    let v = &traj.v_bar;
    let horizon = traj.grid.horizon();
    let plateau = median(&v[middle_third(times)]);
    let tol_abs = thresholds.resolved_abs(q_target);
    let tol = tol_abs + thresholds.tol_rel * plateau.abs();
    let inside = |k: &usize| (v[*k] - plateau).abs() <= tol;
    let first = (0..v.len()).find(inside);
    let last = (0..v.len()).rev().find(inside);
    let (entry, exit) = match (first, last) {
        (Some(a), Some(b)) if a < b => (Some(a), Some(b)),
        _ => (None, None),
    };
    let plateau_max_deviation = match (entry, exit) {
        (Some(a), Some(b)) => max_abs(v[a..=b].iter().map(|x| x - plateau)),
        _ => f64::NAN,
    };
    let entry_time = entry.map(|k| times[k]);
    let exit_time = exit.map(|k| times[k]);
    let has_turnpike = match (entry_time, exit_time) {
        (Some(a), Some(b)) => b - a >= 0.5 * horizon,
        _ => false,
    };
    TurnpikeReport {
        entry_time,
        exit_time,
        plateau_level: plateau,
        plateau_max_deviation,
        has_turnpike,
        tol_abs,
        tol_rel: thresholds.tol_rel,
        horizon,
    }
}

/// Seed of sweep cell `index`, derived from the master seed.
pub fn cell_seed(master: u64, index: usize) -> u64 {
    stream_id(master, u64::MAX, index as u64, Channel::Common)
}

/// Mean over common draws of `sup_t |2·mean_j ν^{j}_t − 2·reference_t|`, per channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChaosRow {
    pub n: usize,
    pub seed: u64,
    /// Against the exact mean of the Euler scheme.
    pub sup_gap_a: f64,
    pub sup_gap_n: f64,
    pub sup_gap_a_stderr: f64,
    /// Against the continuous-time conditional mean `mean_nu(t)`.
    pub analytic_sup_gap_a: f64,
    pub analytic_sup_gap_n: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChaosStudy {
    pub rows: Vec<ChaosRow>,
    /// Log-log fit of `sup_gap_a` against N.
    pub fit_a: Option<LinearFit>,
    pub fit_n: Option<LinearFit>,
    pub analytic_fit_a: Option<LinearFit>,
    pub config: SimConfig,
}

impl ChaosStudy {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&[
            "N",
            "seed",
            "sup_gap_a",
            "sup_gap_n",
            "sup_gap_a_stderr",
            "analytic_sup_gap_a",
            "analytic_sup_gap_n",
        ]);
        for r in &self.rows {
            t.push(vec![
                r.n.into(),
                r.seed.into(),
                r.sup_gap_a.into(),
                r.sup_gap_n.into(),
                r.sup_gap_a_stderr.into(),
                r.analytic_sup_gap_a.into(),
                r.analytic_sup_gap_n.into(),
            ])
            .expect("row width matches header");
        }
        t
    }
}

fn sup_gap(empirical: &[f64], reference: &[f64]) -> f64 {
    max_abs(empirical.iter().zip(reference).map(|(e, r)| 2.0 * e - 2.0 * r))
}

/// Empirical-mean convergence of the anonymous and identity-revealed rates.
///
/// Each N runs on its own seed derived from `cfg.master_seed` and the cell index.
pub fn chaos_convergence_study(
    base: &ParamSet<f64>,
    ns: &[usize],
    cfg: &SimConfig,
    intervals: usize,
) -> Result<ChaosStudy, String> {
    let (tables, traj) = solve_pipeline(base, intervals)?;
    let law = FeedbackLaw::new(base, &tables, &traj, cfg.n_steps).map_err(|e: SimError| e.to_string())?;
    let discrete = law.discrete_mean(base.q0_total());
    let mut rows = Vec::with_capacity(ns.len());
    for (i, &n) in ns.iter().enumerate() {
        let seed = cell_seed(cfg.master_seed, i);
        let cell_cfg = SimConfig {
            population_n: n,
            master_seed: seed,
            store_paths: false,
            ..*cfg
        };
        let ens = simulate_population(base, &tables, &traj, &cell_cfg, None).map_err(|e| e.to_string())?;
        let per = |pick: &dyn Fn(&crate::simulator::PopulationDraw) -> f64| -> Vec<f64> {
            ens.draws.iter().map(pick).collect()
        };
        let ga = per(&|d| sup_gap(&d.means.nu_a, &discrete.nu_a));
        let gn = per(&|d| sup_gap(&d.means.nu_n, &discrete.nu_n));
        let aa = per(&|d| sup_gap(&d.means.nu_a, &law.mean_nu_a));
        let an = per(&|d| sup_gap(&d.means.nu_n, &law.mean_nu_n));
        rows.push(ChaosRow {
            n,
            seed,
            sup_gap_a: stats::mean(&ga),
            sup_gap_n: stats::mean(&gn),
            sup_gap_a_stderr: stats::std_error(&ga),
            analytic_sup_gap_a: stats::mean(&aa),
            analytic_sup_gap_n: stats::mean(&an),
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let fit = |f: fn(&ChaosRow) -> f64| stats::log_log_fit(&xs, &rows.iter().map(f).collect::<Vec<_>>());
    Ok(ChaosStudy {
        fit_a: fit(|r| r.sup_gap_a),
        fit_n: fit(|r| r.sup_gap_n),
        analytic_fit_a: fit(|r| r.analytic_sup_gap_a),
        rows,
        config: *cfg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_costs_keep_initial_difference() {
        let mut base = ParamSet::reference();
        base.q0_a = 30.0;
        base.q0_n = -10.0;
        let r = sweep_kappa_ratio(&base, &[1.0], 2_000);
        let d = &r.cells[0].series["Q_a_minus_Q_n"];
        assert!(d.iter().all(|&x| x == 40.0));
    }

    #[test]
    fn terminal_difference_decreases_with_ratio() {
        let r = sweep_kappa_ratio(&ParamSet::reference(), &[0.25, 0.5, 1.0, 2.0], 4_000);
        let d = r.scalar("terminal_difference");
        assert!(d.windows(2).all(|w| w[1] < w[0]), "{d:?}");
        assert_eq!(r.cells[2].params.kappa_a, KAPPA_N_FIXED);
    }

    #[test]
    fn difference_scales_with_target() {
        let base = ParamSet::reference();
        let mut half = base;
        half.q_target = 100.0;
        let a = sweep_kappa_ratio(&base, &[0.5], 2_000);
        let b = sweep_kappa_ratio(&half, &[0.5], 2_000);
        let (x, y) = (&a.cells[0].series["Q_a_minus_Q_n"], &b.cells[0].series["Q_a_minus_Q_n"]);
        for k in 0..x.len() {
            assert!((x[k] - 2.0 * y[k]).abs() <= 1e-9 * x[k].abs().max(1.0));
        }
    }

    #[test]
    fn invalid_cells_do_not_abort() {
        let r = sweep_kappa_ratio(&ParamSet::reference(), &[-1.0, 1.0], 1_000);
        assert!(r.cells[0].error.as_deref().unwrap().contains("kappa_a"));
        assert!(r.cells[1].error.is_none());
        assert_eq!(r.to_table().len(), 1_001);
    }

    #[test]
    fn terminal_level_rises_with_psi() {
        let r = penalty_sweep(&ParamSet::reference(), Penalty::Psi, &[0.01, 1.0], 4_000);
        let v = r.scalar("V_T");
        assert!(v[0] < v[1] && v[1] <= 200.0, "{v:?}");
    }

    #[test]
    fn running_penalty_flattens_the_middle() {
        let r = penalty_sweep(&ParamSet::reference(), Penalty::PhiRun, &[0.1, 1.0, 10.0], 4_000);
        let m = r.scalar("mid_max_abs");
        assert!(m[0] > m[1] && m[1] > m[2], "{m:?}");
        let var = r.scalar("mid_variation");
        assert!(var[0] > var[1] && var[1] > var[2], "{var:?}");
    }

    #[test]
    fn zero_terminal_penalty_means_no_trading() {
        let r = penalty_sweep(&ParamSet::reference(), Penalty::Psi, &[0.0], 1_000);
        let c = &r.cells[0];
        assert!(c.error.is_none());
        assert!(c.series["V_bar"].iter().all(|&v| v == 0.0));
        assert_eq!(c.scalars["peak_abs_control"], 0.0);
    }

    fn turnpike_case(phi: f64, q0a: f64, q0n: f64, target: f64, n: usize) -> TurnpikeReport {
        let mut p = ParamSet::reference();
        p.phi_run = phi;
        p.q0_a = q0a;
        p.q0_n = q0n;
        p.q_target = target;
        let (_, traj) = solve_pipeline(&p, n).unwrap();
        turnpike_detect(&traj, target, &TurnpikeThresholds::default())
    }

    #[test]
    fn strong_running_penalty_shows_turnpike() {
        let r = turnpike_case(10.0, 100.0, 100.0, 200.0, 4_000);
        assert!(r.has_turnpike);
        assert!(r.entry_time.unwrap() < 0.15 && 1.0 - r.exit_time.unwrap() < 0.15, "{r:?}");
    }

    #[test]
    fn weak_running_penalty_has_successive_transients() {
        let r = turnpike_case(0.099, 100.0, 100.0, 100.0, 4_000);
        assert!(!r.has_turnpike, "{r:?}");
    }

    #[test]
    fn balanced_start_is_all_plateau() {
        let r = turnpike_case(1.0, 100.0, -100.0, 0.0, 2_000);
        assert_eq!(r.tol_abs, 1.0);
        assert_eq!(r.entry_time, Some(0.0));
        assert_eq!(r.exit_time, Some(1.0));
    }

    #[test]
    fn detection_is_resolution_stable() {
        let coarse = turnpike_case(1.0, 100.0, 100.0, 100.0, 2_000);
        let fine = turnpike_case(1.0, 100.0, 100.0, 100.0, 4_000);
        let step = 1.0 / 2_000.0;
        assert!((coarse.entry_time.unwrap() - fine.entry_time.unwrap()).abs() <= step + 1e-12);
        assert!((coarse.exit_time.unwrap() - fine.exit_time.unwrap()).abs() <= step + 1e-12);
    }

    fn chaos_cfg() -> SimConfig {
        SimConfig {
            n_steps: 500,
            n_paths: 1,
            n_common: 8,
            master_seed: 3,
            population_n: 1,
            record_controls: true,
            store_paths: false,
            noise_refinement: 1,
        }
    }

    #[test]
    fn no_idiosyncratic_noise_no_discrepancy() {
        let mut p = ParamSet::reference();
        p.sigma_a = 0.0;
        p.sigma_n = 0.0;
        let s = chaos_convergence_study(&p, &[1], &chaos_cfg(), 1_000).unwrap();
        assert!(s.rows[0].sup_gap_a < 1e-9 && s.rows[0].sup_gap_n < 1e-9, "{:?}", s.rows[0]);
    }

    #[test]
    fn discrepancy_is_linear_in_noise() {
        let mut p = ParamSet::reference();
        p.sigma_n = 0.0;
        let mut q = p;
        q.sigma_a = 2.0 * p.sigma_a;
        let a = chaos_convergence_study(&p, &[5], &chaos_cfg(), 1_000).unwrap();
        let b = chaos_convergence_study(&q, &[5], &chaos_cfg(), 1_000).unwrap();
        let ratio = b.rows[0].sup_gap_a / a.rows[0].sup_gap_a;
        assert!((ratio - 2.0).abs() < 1e-9, "{ratio}");
    }
}
