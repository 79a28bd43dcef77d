//! Euler–Maruyama simulation of the representative agent and of a finite
//! population sharing one common noise.
//!
//! Controls at step `k` read only the state at step `k`. Every random
//! increment comes from a stream keyed by `(seed, draw, player, channel)`, so
//! outputs do not depend on scheduling or on the rayon pool size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::meanfield::MeanFieldTrajectory;
use crate::model::{derive_coefficients, ParamSet};
use crate::objective::ControlDeviation;
use crate::riccati::RiccatiTables;
use crate::rng::{stream_id, Channel, NormalStream};
use crate::stats;
use crate::table::Table;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_steps: usize,
    pub n_paths: usize,
    /// Distinct common-noise draws; representative path `i` uses draw `i mod n_common`.
    pub n_common: usize,
    pub master_seed: u64,
    pub population_n: usize,
    pub record_controls: bool,
    /// Keep full per-step arrays (needed for path dumps and sup-norm checks).
    pub store_paths: bool,
    /// Each Brownian increment is the sum of this many finer increments.
    pub noise_refinement: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_steps: 2_000,
            n_paths: 1_000,
            n_common: 1_000,
            master_seed: 0,
            population_n: 10,
            record_controls: true,
            store_paths: false,
            noise_refinement: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("{field} must be at least 1")]
    Count { field: &'static str },
    #[error("simulation grid ({sim} steps) is finer than the mean-field grid ({mean} intervals)")]
    GridTooCoarse { sim: usize, mean: usize },
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        for (field, v) in [
            ("n_steps", self.n_steps),
            ("n_paths", self.n_paths),
            ("n_common", self.n_common),
            ("population_n", self.population_n),
            ("noise_refinement", self.noise_refinement),
        ] {
            if v == 0 {
                return Err(SimError::Count { field });
            }
        }
        Ok(())
    }

    pub fn dt(&self, horizon: f64) -> f64 {
        horizon / self.n_steps as f64
    }
}

/// Hex SHA-256 of a value's JSON serialization.
pub fn digest<S: Serialize>(value: &S) -> String {
    let bytes = serde_json::to_vec(value).expect("plain data serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Equilibrium feedback tabulated on the simulation grid.
///
/// `ν̂ = −(φ_k q + χ_k)/2κ` with `χ_k = (φ̄ − φ)V̄ + χ̄` at `t_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackLaw {
    pub times: Vec<f64>,
    pub dt: f64,
    pub phi_self: Vec<f64>,
    pub intercept: Vec<f64>,
    /// Representative price drift `−D v̄_t`.
    pub price_drift: Vec<f64>,
    pub v_bar: Vec<f64>,
    pub mean_nu_a: Vec<f64>,
    pub mean_nu_n: Vec<f64>,
    inv_2ka: f64,
    inv_2kn: f64,
    rate_unit: f64,
}

impl FeedbackLaw {
    /// Samples the tables at `t_k = kT/n_steps`; exact node lookup when the
    /// mean-field grid is an integer refinement, linear interpolation otherwise.
    pub fn new(
        p: &ParamSet<f64>,
        tables: &RiccatiTables<f64>,
        traj: &MeanFieldTrajectory<f64>,
        n_steps: usize,
    ) -> Result<Self, SimError> {
        let mean = traj.grid.intervals();
        if n_steps > mean {
            return Err(SimError::GridTooCoarse { sim: n_steps, mean });
        }
        let horizon = p.horizon;
        let dt = horizon / n_steps as f64;
        let times: Vec<f64> = (0..=n_steps)
            .map(|k| if k == n_steps { horizon } else { horizon * k as f64 / n_steps as f64 })
            .collect();
        let sample = |values: &[f64]| -> Vec<f64> {
            if mean.is_multiple_of(n_steps) {
                let stride = mean / n_steps;
                (0..=n_steps).map(|k| values[k * stride]).collect()
            } else {
                times.iter().map(|&t| traj.grid.interpolate(values, t)).collect()
            }
        };
        let c = derive_coefficients(p);
        let v_bar = sample(&traj.v_bar);
        Ok(FeedbackLaw {
            phi_self: sample(&tables.own.phi_self),
            intercept: sample(&traj.chi_self),
            price_drift: sample(&traj.v_small).iter().map(|v| -c.d * v).collect(),
            mean_nu_a: sample(&traj.mean_nu_a),
            mean_nu_n: sample(&traj.mean_nu_n),
            v_bar,
            times,
            dt,
            inv_2ka: 1.0 / (2.0 * p.kappa_a),
            inv_2kn: 1.0 / (2.0 * p.kappa_n),
            rate_unit: p.q_target / horizon,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Equilibrium rates at step `k` for total inventory `q`.
    #[inline]
    pub fn equilibrium(&self, k: usize, q: f64) -> (f64, f64) {
        let bracket = self.phi_self[k] * q + self.intercept[k];
        (-bracket * self.inv_2ka, -bracket * self.inv_2kn)
    }

    /// Rates under an optional deviation from the equilibrium law.
    #[inline]
    pub fn controls(&self, k: usize, q: f64, deviation: Option<&ControlDeviation>) -> (f64, f64) {
        match deviation {
            None => self.equilibrium(k, q),
            Some(d) => {
                let bracket = self.phi_self[k] * q + self.intercept[k];
                d.apply(bracket, self.inv_2ka, self.inv_2kn, self.rate_unit)
            }
        }
    }

    /// Exact mean of the Euler scheme under equilibrium controls:
    /// `m_{k+1} = m_k + Δt·(ν̂ᵃ + ν̂ⁿ)(t_k, m_k)`, with the matching mean rates.
    pub fn discrete_mean(&self, q0_total: f64) -> DiscreteMean {
        let n = self.n_steps();
        let mut q = vec![q0_total; n + 1];
        let mut nu_a = vec![0.0; n + 1];
        let mut nu_n = vec![0.0; n + 1];
        for k in 0..=n {
            let (a, b) = self.equilibrium(k, q[k]);
            nu_a[k] = a;
            nu_n[k] = b;
            if k < n {
                q[k + 1] = q[k] + self.dt * (a + b);
            }
        }
        DiscreteMean { q_total: q, nu_a, nu_n }
    }
}

/// Mean of the discretized equilibrium dynamics on the simulation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMean {
    pub q_total: Vec<f64>,
    pub nu_a: Vec<f64>,
    pub nu_n: Vec<f64>,
}

/// Terminal states and left-point integrals of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct PathTotals {
    pub q_a_terminal: f64,
    pub q_n_terminal: f64,
    pub s_terminal: f64,
    /// `Σ (Qᵃ+Qⁿ)² Δt`
    pub int_q2: f64,
    pub int_nu_a2: f64,
    pub int_nu_n2: f64,
    /// `Σ (νᵃ+νⁿ) S Δt`
    pub int_nu_s: f64,
    pub controls_recorded: bool,
}

impl PathTotals {
    pub fn q_terminal(&self) -> f64 {
        self.q_a_terminal + self.q_n_terminal
    }
}

/// Full per-step arrays of one trajectory (length `n_steps + 1`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PathArrays {
    pub s: Vec<f64>,
    pub q_a: Vec<f64>,
    pub q_n: Vec<f64>,
    pub nu_a: Vec<f64>,
    pub nu_n: Vec<f64>,
}

impl PathArrays {
    fn with_capacity(n: usize) -> Self {
        PathArrays {
            s: Vec::with_capacity(n),
            q_a: Vec::with_capacity(n),
            q_n: Vec::with_capacity(n),
            nu_a: Vec::with_capacity(n),
            nu_n: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, s: f64, qa: f64, qn: f64, na: f64, nn: f64) {
        self.s.push(s);
        self.q_a.push(qa);
        self.q_n.push(qn);
        self.nu_a.push(na);
        self.nu_n.push(nn);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub path_id: usize,
    pub common_id: usize,
    pub player: usize,
    /// Stream identifiers of the common, anonymous and identity-revealed noises.
    pub streams: [u64; 3],
    pub totals: PathTotals,
    pub arrays: Option<PathArrays>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub params: ParamSet<f64>,
    pub config: SimConfig,
    pub times: Vec<f64>,
    pub paths: Vec<PathRecord>,
    pub params_digest: String,
    pub config_digest: String,
}

/// Per-step accumulator of the left-point integrals.
struct Running {
    totals: PathTotals,
    dt: f64,
}

impl Running {
    fn new(dt: f64, record: bool) -> Self {
        Running {
            totals: PathTotals {
                controls_recorded: record,
                ..PathTotals::default()
            },
            dt,
        }
    }

    #[inline]
    fn step(&mut self, q: f64, s: f64, na: f64, nn: f64) {
        let t = &mut self.totals;
        t.int_q2 += q * q * self.dt;
        t.int_nu_a2 += na * na * self.dt;
        t.int_nu_n2 += nn * nn * self.dt;
        t.int_nu_s += (na + nn) * s * self.dt;
    }

    fn finish(mut self, qa: f64, qn: f64, s: f64) -> PathTotals {
        self.totals.q_a_terminal = qa;
        self.totals.q_n_terminal = qn;
        self.totals.s_terminal = s;
        self.totals
    }
}

fn streams_for(seed: u64, common: usize, player: usize) -> [u64; 3] {
    [
        stream_id(seed, common as u64, 0, Channel::Common),
        stream_id(seed, common as u64, player as u64, Channel::IdioA),
        stream_id(seed, common as u64, player as u64, Channel::IdioN),
    ]
}

/// Increment source for one noise channel; silent when its volatility is zero.
struct Noise {
    stream: Option<NormalStream>,
    scale: f64,
    dt: f64,
    refine: usize,
}

impl Noise {
    fn new(seed: u64, common: usize, player: usize, channel: Channel, sigma: f64, dt: f64, refine: usize) -> Self {
        let player = if channel == Channel::Common { 0 } else { player as u64 };
        Noise {
            stream: (sigma != 0.0).then(|| NormalStream::new(seed, common as u64, player, channel)),
            scale: sigma,
            dt,
            refine,
        }
    }

    #[inline]
    fn step(&mut self) -> f64 {
        match &mut self.stream {
            Some(s) => self.scale * s.increment(self.dt, self.refine),
            None => 0.0,
        }
    }
}

/// Simulates the representative agent against the mean-field price drift.
pub fn simulate_mfg_paths(
    p: &ParamSet<f64>,
    tables: &RiccatiTables<f64>,
    traj: &MeanFieldTrajectory<f64>,
    cfg: &SimConfig,
) -> Result<PathEnsemble, SimError> {
    simulate_mfg_paths_with(p, tables, traj, cfg, None)
}

/// [`simulate_mfg_paths`] with every representative path applying `deviation`
/// while the price keeps the equilibrium mean-field drift.
pub fn simulate_mfg_paths_with(
    p: &ParamSet<f64>,
    tables: &RiccatiTables<f64>,
    traj: &MeanFieldTrajectory<f64>,
    cfg: &SimConfig,
    deviation: Option<&ControlDeviation>,
) -> Result<PathEnsemble, SimError> {
    cfg.validate()?;
    let law = FeedbackLaw::new(p, tables, traj, cfg.n_steps)?;
    let n = cfg.n_steps;
    let dt = law.dt;
    let paths: Vec<PathRecord> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let common_id = i % cfg.n_common;
            let player = i / cfg.n_common;
            let seed = cfg.master_seed;
            let r = cfg.noise_refinement;
            let mut w0 = Noise::new(seed, common_id, player, Channel::Common, p.sigma_0, dt, r);
            let mut wa = Noise::new(seed, common_id, player, Channel::IdioA, p.sigma_a, dt, r);
            let mut wn = Noise::new(seed, common_id, player, Channel::IdioN, p.sigma_n, dt, r);
            let (mut s, mut qa, mut qn) = (p.s0, p.q0_a, p.q0_n);
            let mut run = Running::new(dt, cfg.record_controls);
            let mut arrays = cfg.store_paths.then(|| PathArrays::with_capacity(n + 1));
            for k in 0..n {
                let (na, nn) = law.controls(k, qa + qn, deviation);
                if let Some(a) = arrays.as_mut() {
                    a.push(s, qa, qn, na, nn);
                }
                run.step(qa + qn, s, na, nn);
                s += law.price_drift[k] * dt + w0.step();
                qa += na * dt + wa.step();
                qn += nn * dt + wn.step();
            }
            if let Some(a) = arrays.as_mut() {
                let (na, nn) = law.controls(n, qa + qn, deviation);
                a.push(s, qa, qn, na, nn);
            }
            PathRecord {
                path_id: i,
                common_id,
                player,
                streams: streams_for(seed, common_id, player),
                totals: run.finish(qa, qn, s),
                arrays,
            }
        })
        .collect();
    Ok(PathEnsemble {
        params: *p,
        config: *cfg,
        times: law.times,
        paths,
        params_digest: digest(p),
        config_digest: digest(cfg),
    })
}

impl PathEnsemble {
    pub fn terminal_inventory(&self) -> Vec<f64> {
        self.paths.iter().map(|r| r.totals.q_terminal()).collect()
    }

    /// Path dump with columns `path_id, common_id, t, S, Q_a, Q_n, nu_a, nu_n`;
    /// `None` unless paths were stored.
    pub fn dump_table(&self) -> Option<Table> {
        let mut table = Table::new(&["path_id", "common_id", "t", "S", "Q_a", "Q_n", "nu_a", "nu_n"]);
        for r in &self.paths {
            let a = r.arrays.as_ref()?;
            for (k, &t) in self.times.iter().enumerate() {
                table
                    .push(vec![
                        r.path_id.into(),
                        r.common_id.into(),
                        t.into(),
                        a.s[k].into(),
                        a.q_a[k].into(),
                        a.q_n[k].into(),
                        a.nu_a[k].into(),
                        a.nu_n[k].into(),
                    ])
                    .expect("row width matches header");
            }
        }
        Some(table)
    }
}

/// Per-step cross-player statistics of one common draw.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawMeans {
    pub q_total: Vec<f64>,
    /// Cross-player variance of `Qᵃ+Qⁿ`.
    pub q_total_var: Vec<f64>,
    pub nu_a: Vec<f64>,
    pub nu_n: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationDraw {
    pub common_id: usize,
    /// Shared price path.
    pub s: Vec<f64>,
    pub means: DrawMeans,
    /// Player `j` at index `j`; player 0 carries any deviation.
    pub players: Vec<PathTotals>,
    pub player_paths: Option<Vec<PathArrays>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationEnsemble {
    pub params: ParamSet<f64>,
    pub config: SimConfig,
    pub deviation: Option<ControlDeviation>,
    pub n_players: usize,
    pub times: Vec<f64>,
    pub draws: Vec<PopulationDraw>,
    pub params_digest: String,
    pub config_digest: String,
}

/// Simulates `cfg.population_n` players with the realized-average price drift
/// `αa·mean(νᵃ) + αn·mean(νⁿ)`.
pub fn simulate_population(
    p: &ParamSet<f64>,
    tables: &RiccatiTables<f64>,
    traj: &MeanFieldTrajectory<f64>,
    cfg: &SimConfig,
    deviation: Option<&ControlDeviation>,
) -> Result<PopulationEnsemble, SimError> {
    cfg.validate()?;
    let law = FeedbackLaw::new(p, tables, traj, cfg.n_steps)?;
    let draws = (0..cfg.n_common)
        .into_par_iter()
        .map(|c| simulate_draw(p, &law, cfg, c, deviation))
        .collect();
    Ok(PopulationEnsemble {
        params: *p,
        config: *cfg,
        deviation: deviation.copied(),
        n_players: cfg.population_n,
        times: law.times.clone(),
        draws,
        params_digest: digest(p),
        config_digest: digest(cfg),
    })
}

fn simulate_draw(
    p: &ParamSet<f64>,
    law: &FeedbackLaw,
    cfg: &SimConfig,
    common_id: usize,
    deviation: Option<&ControlDeviation>,
) -> PopulationDraw {
    let n = law.n_steps();
    let big_n = cfg.population_n;
    let dt = law.dt;
    let seed = cfg.master_seed;
    let r = cfg.noise_refinement;
    let mut w0 = Noise::new(seed, common_id, 0, Channel::Common, p.sigma_0, dt, r);
    let mut wa: Vec<Noise> = (0..big_n)
        .map(|j| Noise::new(seed, common_id, j, Channel::IdioA, p.sigma_a, dt, r))
        .collect();
    let mut wn: Vec<Noise> = (0..big_n)
        .map(|j| Noise::new(seed, common_id, j, Channel::IdioN, p.sigma_n, dt, r))
        .collect();
    let mut qa = vec![p.q0_a; big_n];
    let mut qn = vec![p.q0_n; big_n];
    let mut na = vec![0.0; big_n];
    let mut nn = vec![0.0; big_n];
    let mut runs: Vec<Running> = (0..big_n).map(|_| Running::new(dt, cfg.record_controls)).collect();
    let mut paths = cfg
        .store_paths
        .then(|| (0..big_n).map(|_| PathArrays::with_capacity(n + 1)).collect::<Vec<_>>());
    let mut s = p.s0;
    let mut s_path = Vec::with_capacity(n + 1);
    let mut means = DrawMeans {
        q_total: Vec::with_capacity(n + 1),
        q_total_var: Vec::with_capacity(n + 1),
        nu_a: Vec::with_capacity(n + 1),
        nu_n: Vec::with_capacity(n + 1),
    };
    let inv_n = 1.0 / big_n as f64;
    let mut q_tot = vec![0.0; big_n];
    for k in 0..=n {
        for j in 0..big_n {
            q_tot[j] = qa[j] + qn[j];
            let dev = if j == 0 { deviation } else { None };
            let (a, b) = law.controls(k, q_tot[j], dev);
            na[j] = a;
            nn[j] = b;
        }
        let mean_a = stats::sum(na.iter().copied()) * inv_n;
        let mean_n = stats::sum(nn.iter().copied()) * inv_n;
        let mean_q = stats::sum(q_tot.iter().copied()) * inv_n;
        // Shifted by player 0 so identical players give exactly zero.
        let shift = q_tot[0];
        let mean_d = stats::sum(q_tot.iter().map(|q| q - shift)) * inv_n;
        let var_q = stats::sum(q_tot.iter().map(|q| (q - shift - mean_d) * (q - shift - mean_d))) * inv_n;
        s_path.push(s);
        means.q_total.push(mean_q);
        means.q_total_var.push(var_q);
        means.nu_a.push(mean_a);
        means.nu_n.push(mean_n);
        if let Some(ps) = paths.as_mut() {
            for j in 0..big_n {
                ps[j].push(s, qa[j], qn[j], na[j], nn[j]);
            }
        }
        if k == n {
            break;
        }
        for j in 0..big_n {
            runs[j].step(q_tot[j], s, na[j], nn[j]);
            qa[j] += na[j] * dt + wa[j].step();
            qn[j] += nn[j] * dt + wn[j].step();
        }
        s += (p.alpha_a * mean_a + p.alpha_n * mean_n) * dt + w0.step();
    }
    PopulationDraw {
        common_id,
        s: s_path,
        means,
        players: runs
            .into_iter()
            .enumerate()
            .map(|(j, run)| run.finish(qa[j], qn[j], s))
            .collect(),
        player_paths: paths,
    }
}

/// Cross-player means per draw and their cross-draw dispersion.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMeans {
    pub times: Vec<f64>,
    pub per_draw: Vec<DrawMeans>,
    /// Cross-draw standard deviation of the mean total inventory at each step.
    pub cross_draw_sd_q: Vec<f64>,
    pub cross_draw_sd_nu_a: Vec<f64>,
    pub cross_draw_sd_nu_n: Vec<f64>,
}

pub fn estimate_conditional_means(ens: &PopulationEnsemble) -> ConditionalMeans {
    let n = ens.times.len();
    let sd = |pick: &dyn Fn(&DrawMeans) -> &Vec<f64>| -> Vec<f64> {
        (0..n)
            .map(|k| {
                let xs: Vec<f64> = ens.draws.iter().map(|d| pick(&d.means)[k]).collect();
                stats::variance(&xs).sqrt()
            })
            .collect()
    };
    ConditionalMeans {
        times: ens.times.clone(),
        per_draw: ens.draws.iter().map(|d| d.means.clone()).collect(),
        cross_draw_sd_q: sd(&|m| &m.q_total),
        cross_draw_sd_nu_a: sd(&|m| &m.nu_a),
        cross_draw_sd_nu_n: sd(&|m| &m.nu_n),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::meanfield::mean_inventory_trajectory;
    use crate::objective::DeviationKind;
    use crate::riccati::solve_oracle;

    fn pipeline(p: &ParamSet<f64>) -> (RiccatiTables<f64>, MeanFieldTrajectory<f64>) {
        let g = TimeGrid::uniform(p.horizon, 2_000).unwrap();
        let t = solve_oracle(p, &g).unwrap();
        let m = mean_inventory_trajectory(&t, p).unwrap();
        (t, m)
    }

    fn small_cfg() -> SimConfig {
        SimConfig {
            n_steps: 500,
            n_paths: 64,
            n_common: 64,
            master_seed: 42,
            population_n: 5,
            record_controls: true,
            store_paths: true,
            noise_refinement: 1,
        }
    }

    #[test]
    fn initial_states_and_lengths() {
        let p = ParamSet::reference();
        let (t, m) = pipeline(&p);
        let e = simulate_mfg_paths(&p, &t, &m, &small_cfg()).unwrap();
        for r in &e.paths {
            let a = r.arrays.as_ref().unwrap();
            assert_eq!(a.q_a.len(), 501);
            assert_eq!((a.q_a[0], a.q_n[0], a.s[0]), (p.q0_a, p.q0_n, p.s0));
            assert_eq!(a.q_a[500] + a.q_n[500], r.totals.q_terminal());
        }
        assert_eq!(e.times[500], p.horizon);
    }

    #[test]
    fn noiseless_paths_follow_the_mean() {
        let mut p = ParamSet::reference();
        p.sigma_0 = 0.0;
        p.sigma_a = 0.0;
        p.sigma_n = 0.0;
        let (t, m) = pipeline(&p);
        let mut cfg = small_cfg();
        cfg.n_paths = 2;
        cfg.n_steps = 2_000;
        let e = simulate_mfg_paths(&p, &t, &m, &cfg).unwrap();
        let a = e.paths[0].arrays.as_ref().unwrap();
        let scale = m.v_bar.iter().fold(0.0f64, |x, v| x.max(v.abs()));
        for k in 0..=2_000 {
            assert!((a.q_a[k] + a.q_n[k] - m.v_bar[k]).abs() <= 5e-3 * scale);
        }
        assert_eq!(e.paths[0].totals, e.paths[1].totals);
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let p = ParamSet::reference();
        let (t, m) = pipeline(&p);
        let cfg = small_cfg();
        let run = |w: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .unwrap()
                .install(|| {
                    (
                        simulate_mfg_paths(&p, &t, &m, &cfg).unwrap(),
                        simulate_population(&p, &t, &m, &cfg, None).unwrap(),
                    )
                })
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn population_of_one_uses_own_controls() {
        let p = ParamSet::reference();
        let (t, m) = pipeline(&p);
        let mut cfg = small_cfg();
        cfg.population_n = 1;
        cfg.n_common = 2;
        let e = simulate_population(&p, &t, &m, &cfg, None).unwrap();
        let d = &e.draws[0];
        let a = &d.player_paths.as_ref().unwrap()[0];
        assert_eq!(d.means.nu_a, a.nu_a);
        assert_eq!(d.means.q_total_var.iter().copied().fold(0.0, f64::max), 0.0);
        let dt = cfg.dt(p.horizon);
        // Without common noise the price moves by the player's own impact only.
        let mut q = p;
        q.sigma_0 = 0.0;
        let e = simulate_population(&q, &t, &m, &cfg, None).unwrap();
        let d = &e.draws[0];
        let a = &d.player_paths.as_ref().unwrap()[0];
        for k in 0..10 {
            let drift = q.alpha_a * a.nu_a[k] + q.alpha_n * a.nu_n[k];
            assert!((d.s[k + 1] - d.s[k] - drift * dt).abs() < 1e-12);
        }
    }

    #[test]
    fn players_share_the_price_path() {
        let p = ParamSet::reference();
        let (t, m) = pipeline(&p);
        let e = simulate_population(&p, &t, &m, &small_cfg(), None).unwrap();
        for d in &e.draws {
            for a in d.player_paths.as_ref().unwrap() {
                assert_eq!(a.s, d.s);
            }
        }
    }

    #[test]
    fn unit_gain_deviation_is_bit_identical() {
        let p = ParamSet::reference();
        let (t, m) = pipeline(&p);
        let cfg = small_cfg();
        let base = simulate_population(&p, &t, &m, &cfg, None).unwrap();
        let dev = ControlDeviation {
            kind: DeviationKind::GainScale,
            epsilon: 0.0,
        };
        let same = simulate_population(&p, &t, &m, &cfg, Some(&dev)).unwrap();
        assert_eq!(base.draws, same.draws);
    }

    #[test]
    fn representative_and_population_share_streams() {
        let p = ParamSet::reference();
        let (t, m) = pipeline(&p);
        let cfg = small_cfg();
        let e = simulate_mfg_paths(&p, &t, &m, &cfg).unwrap();
        let pop = simulate_population(&p, &t, &m, &cfg, None).unwrap();
        assert_eq!(e.paths[3].streams, streams_for(cfg.master_seed, 3, 0));
        // Identical idiosyncratic increments: the inventory noise of player 0
        // matches path 3 once the (deterministic) drift parts are removed.
        let a = e.paths[3].arrays.as_ref().unwrap();
        let b = &pop.draws[3].player_paths.as_ref().unwrap()[0];
        assert_eq!(a.q_a[1] - a.nu_a[0] * cfg.dt(1.0), b.q_a[1] - b.nu_a[0] * cfg.dt(1.0));
    }

    #[test]
    fn no_idiosyncratic_noise_means_no_dispersion() {
        let mut p = ParamSet::reference();
        p.sigma_a = 0.0;
        p.sigma_n = 0.0;
        let (t, m) = pipeline(&p);
        let e = simulate_population(&p, &t, &m, &small_cfg(), None).unwrap();
        let cm = estimate_conditional_means(&e);
        for d in &cm.per_draw {
            assert!(d.q_total_var.iter().all(|&v| v == 0.0));
        }
        // Controls ignore the price, so every draw carries the same means.
        assert!(cm.cross_draw_sd_q.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn discrete_mean_matches_noiseless_path() {
        let mut p = ParamSet::reference();
        p.sigma_a = 0.0;
        p.sigma_n = 0.0;
        let (t, m) = pipeline(&p);
        let cfg = small_cfg();
        let law = FeedbackLaw::new(&p, &t, &m, cfg.n_steps).unwrap();
        let dm = law.discrete_mean(p.q0_total());
        let e = simulate_mfg_paths(&p, &t, &m, &cfg).unwrap();
        let a = e.paths[0].arrays.as_ref().unwrap();
        for k in 0..=cfg.n_steps {
            assert!((a.q_a[k] + a.q_n[k] - dm.q_total[k]).abs() < 1e-9);
            assert!((a.nu_a[k] - dm.nu_a[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn refinement_shrinks_terminal_change() {
        let p = ParamSet::reference();
        let g = TimeGrid::uniform(p.horizon, 8_000).unwrap();
        let t = solve_oracle(&p, &g).unwrap();
        let m = mean_inventory_trajectory(&t, &p).unwrap();
        let terminal = |steps: usize, refine: usize| {
            let cfg = SimConfig {
                n_steps: steps,
                n_paths: 16,
                n_common: 16,
                noise_refinement: refine,
                store_paths: false,
                ..small_cfg()
            };
            simulate_mfg_paths(&p, &t, &m, &cfg).unwrap().terminal_inventory()
        };
        // Same Brownian path sampled at 250, 500, 1000 and 2000 steps.
        let q = [terminal(250, 8), terminal(500, 4), terminal(1_000, 2), terminal(2_000, 1)];
        let change = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let d = [change(&q[0], &q[1]), change(&q[1], &q[2]), change(&q[2], &q[3])];
        assert!(d[0] > d[1] && d[1] > d[2], "{d:?}");
    }

    #[test]
    fn coarse_mean_grid_rejected() {
        let p = ParamSet::reference();
        let (t, m) = pipeline(&p);
        let cfg = SimConfig {
            n_steps: 4_000,
            ..small_cfg()
        };
        assert!(matches!(
            simulate_mfg_paths(&p, &t, &m, &cfg),
            Err(SimError::GridTooCoarse { .. })
        ));
        let bad = SimConfig {
            n_paths: 0,
            ..small_cfg()
        };
        assert_eq!(bad.validate(), Err(SimError::Count { field: "n_paths" }));
    }

    #[test]
    fn path_dump_layout() {
        let p = ParamSet::reference();
        let (t, m) = pipeline(&p);
        let cfg = SimConfig {
            n_paths: 2,
            n_steps: 4,
            ..small_cfg()
        };
        let e = simulate_mfg_paths(&p, &t, &m, &cfg).unwrap();
        let table = e.dump_table().unwrap();
        assert_eq!(table.columns().join(","), "path_id,common_id,t,S,Q_a,Q_n,nu_a,nu_n");
        assert_eq!(table.len(), 10);
        let no_store = SimConfig {
            store_paths: false,
            ..cfg
        };
        assert!(simulate_mfg_paths(&p, &t, &m, &no_store).unwrap().dump_table().is_none());
    }
}
