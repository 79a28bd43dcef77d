//! Monte Carlo estimation of the trader's objective and of the empirical
//! ε-Nash gap of the equilibrium feedback against a finite population.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{cumulative_simpson, simpson};
use crate::meanfield::MeanFieldTrajectory;
use crate::model::ParamSet;
use crate::riccati::RiccatiTables;
use crate::simulator::{
    simulate_mfg_paths_with, simulate_population, PathEnsemble, PathTotals, PopulationEnsemble,
    SimConfig, SimError,
};
use crate::stats::{self, LinearFit};
use crate::table::Table;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationKind {
    /// Both feedback brackets multiplied by `1 + ε`.
    GainScale,
    /// `ε·q_target/T` added to both rates.
    RateShift,
}

impl DeviationKind {
    pub fn tag(self) -> &'static str {
        match self {
            DeviationKind::GainScale => "gain_scale",
            DeviationKind::RateShift => "rate_shift",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlDeviation {
    pub kind: DeviationKind,
    pub epsilon: f64,
}

impl ControlDeviation {
    pub fn gain_scale(epsilon: f64) -> Self {
        ControlDeviation {
            kind: DeviationKind::GainScale,
            epsilon,
        }
    }

    pub fn rate_shift(epsilon: f64) -> Self {
        ControlDeviation {
            kind: DeviationKind::RateShift,
            epsilon,
        }
    }

    /// Deviated rates from the equilibrium bracket `φq + χ`.
    #[inline]
    pub fn apply(&self, bracket: f64, inv_2ka: f64, inv_2kn: f64, rate_unit: f64) -> (f64, f64) {
        match self.kind {
            DeviationKind::GainScale => {
                let b = bracket * (1.0 + self.epsilon);
                (-b * inv_2ka, -b * inv_2kn)
            }
            DeviationKind::RateShift => {
                let shift = self.epsilon * rate_unit;
                (-bracket * inv_2ka + shift, -bracket * inv_2kn + shift)
            }
        }
    }
}

/// Contributions of each term of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Decomposition {
    pub terminal_wealth: f64,
    pub terminal_penalty: f64,
    pub running_penalty: f64,
    pub transaction_cost_a: f64,
    pub transaction_cost_n: f64,
    pub price_payment: f64,
}

impl Decomposition {
    pub fn terms(&self) -> [f64; 6] {
        [
            self.terminal_wealth,
            self.terminal_penalty,
            self.running_penalty,
            self.transaction_cost_a,
            self.transaction_cost_n,
            self.price_payment,
        ]
    }

    pub fn total(&self) -> f64 {
        stats::sum(self.terms())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub decomposition: Decomposition,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("ensemble was simulated without recorded controls")]
    ControlsNotRecorded,
    #[error("player {player} out of range for {n_players} players")]
    InvalidPlayer { player: usize, n_players: usize },
    #[error("empty ensemble")]
    Empty,
    #[error(transparent)]
    Sim(#[from] SimError),
}

fn terms(t: &PathTotals, p: &ParamSet<f64>) -> Decomposition {
    let q = t.q_terminal();
    Decomposition {
        terminal_wealth: q * t.s_terminal,
        terminal_penalty: -p.psi * (q - p.q_target) * (q - p.q_target),
        running_penalty: -p.phi_run * t.int_q2,
        transaction_cost_a: -p.kappa_a * t.int_nu_a2,
        transaction_cost_n: -p.kappa_n * t.int_nu_n2,
        price_payment: -t.int_nu_s,
    }
}

/// Realized objective of one path.
pub fn path_objective(t: &PathTotals, p: &ParamSet<f64>) -> f64 {
    terms(t, p).total()
}

/// Per-sample totals an objective can be evaluated on.
pub trait ObjectiveSamples {
    /// Samples grouped by common draw; each group is one independent unit.
    fn grouped_totals(&self, player: usize) -> Result<Vec<Vec<PathTotals>>, ObjectiveError>;
}

impl ObjectiveSamples for PathEnsemble {
    /// Every representative path; `player` must be 0.
    fn grouped_totals(&self, player: usize) -> Result<Vec<Vec<PathTotals>>, ObjectiveError> {
        if player != 0 {
            return Err(ObjectiveError::InvalidPlayer { player, n_players: 1 });
        }
        let mut groups = vec![Vec::new(); self.config.n_common.min(self.paths.len())];
        for r in &self.paths {
            groups[r.common_id].push(r.totals);
        }
        Ok(groups)
    }
}

impl ObjectiveSamples for PopulationEnsemble {
    fn grouped_totals(&self, player: usize) -> Result<Vec<Vec<PathTotals>>, ObjectiveError> {
        if player >= self.n_players {
            return Err(ObjectiveError::InvalidPlayer {
                player,
                n_players: self.n_players,
            });
        }
        Ok(self.draws.iter().map(|d| vec![d.players[player]]).collect())
    }
}

/// Sample mean of the realized objective with its standard error.
///
/// The standard error treats each common draw as one independent unit.
pub fn evaluate_objective<E: ObjectiveSamples>(
    ens: &E,
    p: &ParamSet<f64>,
    player: usize,
) -> Result<ObjectiveEstimate, ObjectiveError> {
    let groups = ens.grouped_totals(player)?;
    let all: Vec<&PathTotals> = groups.iter().flatten().collect();
    if all.is_empty() {
        return Err(ObjectiveError::Empty);
    }
    if all.iter().any(|t| !t.controls_recorded) {
        return Err(ObjectiveError::ControlsNotRecorded);
    }
    let per_path: Vec<Decomposition> = all.iter().map(|t| terms(t, p)).collect();
    let avg = |f: fn(&Decomposition) -> f64| stats::mean(&per_path.iter().map(f).collect::<Vec<_>>());
    let decomposition = Decomposition {
        terminal_wealth: avg(|d| d.terminal_wealth),
        terminal_penalty: avg(|d| d.terminal_penalty),
        running_penalty: avg(|d| d.running_penalty),
        transaction_cost_a: avg(|d| d.transaction_cost_a),
        transaction_cost_n: avg(|d| d.transaction_cost_n),
        price_payment: avg(|d| d.price_payment),
    };
    let group_means: Vec<f64> = groups
        .iter()
        .filter(|g| !g.is_empty())
        .map(|g| stats::mean(&g.iter().map(|t| path_objective(t, p)).collect::<Vec<_>>()))
        .collect();
    Ok(ObjectiveEstimate {
        value: stats::mean(&per_path.iter().map(Decomposition::total).collect::<Vec<_>>()),
        std_error: stats::std_error(&group_means),
        n_paths: all.len(),
        decomposition,
    })
}

/// Objective of the noiseless mean trajectory by Simpson quadrature on its grid.
///
/// The price follows `S' = −D v̄`; inventories and rates are the conditional means.
pub fn deterministic_objective(traj: &MeanFieldTrajectory<f64>, p: &ParamSet<f64>) -> Decomposition {
    let h = traj.grid.step();
    let s: Vec<f64> = cumulative_simpson(&traj.price_drift, h)
        .into_iter()
        .map(|x| p.s0 + x)
        .collect();
    let n = traj.v_bar.len() - 1;
    let q = traj.v_bar[n];
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    let pay: Vec<f64> = (0..=n)
        .map(|k| (traj.mean_nu_a[k] + traj.mean_nu_n[k]) * s[k])
        .collect();
    Decomposition {
        terminal_wealth: q * s[n],
        terminal_penalty: -p.psi * (q - p.q_target) * (q - p.q_target),
        running_penalty: -p.phi_run * simpson(&sq(&traj.v_bar), h),
        transaction_cost_a: -p.kappa_a * simpson(&sq(&traj.mean_nu_a), h),
        transaction_cost_n: -p.kappa_n * simpson(&sq(&traj.mean_nu_n), h),
        price_payment: -simpson(&pay, h),
    }
}

/// One `(N, deviation)` cell of the gap curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapRow {
    pub n: usize,
    pub deviation: ControlDeviation,
    pub j_equilibrium: f64,
    pub j_deviated: f64,
    /// `J_deviated − J_equilibrium`, paired draw by draw.
    pub gap: f64,
    pub std_error: f64,
    /// Same deviation for the representative agent against the mean-field price.
    pub mean_field_gap: f64,
    pub mean_field_std_error: f64,
}

impl GapRow {
    /// Finite-population part of the gap, `gap − mean_field_gap`.
    pub fn excess(&self) -> f64 {
        self.gap - self.mean_field_gap
    }

    pub fn noise_dominated(&self) -> bool {
        self.gap.abs() < 2.0 * self.std_error
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapCurve {
    pub rows: Vec<GapRow>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapSummary {
    pub ns: Vec<usize>,
    /// `max` over deviations of the raw gap, per N.
    pub max_gap: Vec<f64>,
    /// `max(0, max_gap)`, the quantity fitted.
    pub max_gap_clamped: Vec<f64>,
    /// Log-log slope of the clamped gaps; `None` when fewer than two are positive.
    pub fitted_slope: Option<f64>,
    pub fit: Option<LinearFit>,
    /// Per deviation: log-log fit of `|gap − mean_field_gap|` against N.
    pub excess_fits: Vec<(ControlDeviation, Option<LinearFit>)>,
}

impl GapCurve {
    /// CSV layout: `N, deviation_kind, epsilon, J_eq, J_dev, gap, stderr`.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["N", "deviation_kind", "epsilon", "J_eq", "J_dev", "gap", "stderr"]);
        for r in &self.rows {
            t.push(vec![
                r.n.into(),
                r.deviation.kind.tag().into(),
                r.deviation.epsilon.into(),
                r.j_equilibrium.into(),
                r.j_deviated.into(),
                r.gap.into(),
                r.std_error.into(),
            ])
            .expect("row width matches header");
        }
        t
    }

    pub fn ns(&self) -> Vec<usize> {
        let mut ns: Vec<usize> = self.rows.iter().map(|r| r.n).collect();
        ns.dedup();
        ns
    }

    pub fn summary(&self) -> GapSummary {
        let ns = self.ns();
        let max_gap: Vec<f64> = ns
            .iter()
            .map(|&n| {
                self.rows
                    .iter()
                    .filter(|r| r.n == n)
                    .map(|r| r.gap)
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let max_gap_clamped: Vec<f64> = max_gap.iter().map(|g| g.max(0.0)).collect();
        let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
        let fit = stats::log_log_fit(&xs, &max_gap_clamped);
        let mut devs: Vec<ControlDeviation> = Vec::new();
        for r in &self.rows {
            if !devs.contains(&r.deviation) {
                devs.push(r.deviation);
            }
        }
        let excess_fits = devs
            .into_iter()
            .map(|d| {
                let (x, y): (Vec<f64>, Vec<f64>) = self
                    .rows
                    .iter()
                    .filter(|r| r.deviation == d)
                    .map(|r| (r.n as f64, r.excess().abs()))
                    .unzip();
                (d, stats::log_log_fit(&x, &y))
            })
            .collect();
        GapSummary {
            ns,
            max_gap,
            max_gap_clamped,
            fitted_slope: fit.map(|f| f.slope),
            fit,
            excess_fits,
        }
    }
}

fn paired(eq: &[f64], dev: &[f64]) -> (f64, f64) {
    let diff: Vec<f64> = dev.iter().zip(eq).map(|(d, e)| d - e).collect();
    (stats::mean(&diff), stats::std_error(&diff))
}

fn player_one_objectives(ens: &PopulationEnsemble, p: &ParamSet<f64>) -> Vec<f64> {
    ens.draws.iter().map(|d| path_objective(&d.players[0], p)).collect()
}

/// Gap of a unilateral deviation by player 1 for each population size.
///
/// Equilibrium and deviated runs share every random stream; the
/// representative-agent gap uses the streams of player 1 in each draw.
pub fn nash_gap_curve(
    p: &ParamSet<f64>,
    tables: &RiccatiTables<f64>,
    traj: &MeanFieldTrajectory<f64>,
    ns: &[usize],
    deviations: &[ControlDeviation],
    cfg: &SimConfig,
) -> Result<GapCurve, ObjectiveError> {
    let rep_cfg = SimConfig {
        n_paths: cfg.n_common,
        record_controls: true,
        store_paths: false,
        ..*cfg
    };
    let rep = |d: Option<&ControlDeviation>| -> Result<Vec<f64>, ObjectiveError> {
        let e = simulate_mfg_paths_with(p, tables, traj, &rep_cfg, d)?;
        Ok(e.paths.iter().map(|r| path_objective(&r.totals, p)).collect())
    };
    let rep_eq = rep(None)?;
    let mut rep_gaps = Vec::with_capacity(deviations.len());
    for d in deviations {
        rep_gaps.push(paired(&rep_eq, &rep(Some(d))?));
    }

    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for &n in ns {
        let cfg_n = SimConfig {
            population_n: n,
            record_controls: true,
            store_paths: false,
            ..*cfg
        };
        let eq = simulate_population(p, tables, traj, &cfg_n, None)?;
        let j_eq = player_one_objectives(&eq, p);
        for (d, &(mf_gap, mf_se)) in deviations.iter().zip(&rep_gaps) {
            let dev = simulate_population(p, tables, traj, &cfg_n, Some(d))?;
            let j_dev = player_one_objectives(&dev, p);
            let (gap, se) = paired(&j_eq, &j_dev);
            let row = GapRow {
                n,
                deviation: *d,
                j_equilibrium: stats::mean(&j_eq),
                j_deviated: stats::mean(&j_dev),
                gap,
                std_error: se,
                mean_field_gap: mf_gap,
                mean_field_std_error: mf_se,
            };
            if row.noise_dominated() && !(gap == 0.0 && se == 0.0) {
                warnings.push(format!(
                    "N={n} {} epsilon={}: |gap| {:.3e} below 2 standard errors ({:.3e})",
                    d.kind.tag(),
                    d.epsilon,
                    gap.abs(),
                    se
                ));
            }
            rows.push(row);
        }
    }
    Ok(GapCurve { rows, warnings })
}
