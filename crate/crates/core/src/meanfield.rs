//! Deterministic conditional-mean layer and the equilibrium feedback controls.
//!
//! Conditional means follow `V̄' = −B(φ̄ V̄ + χ̄)`; each channel's mean inventory
//! moves with `−v̄/2κ`, where `v̄ = φ̄ V̄ + χ̄`. The own-state coefficient of the
//! feedback is `φ` and its intercept is `χ = (φ̄ − φ) V̄ + χ̄`.

use thiserror::Error;

use crate::grid::{cumulative_hermite, cumulative_simpson, hermite_at, TimeGrid};
use crate::model::{derive_coefficients, ParamSet};
use crate::riccati::{substeps, RiccatiError, RiccatiTables, BLOW_UP_LIMIT};
use crate::scalar::Scalar;
use crate::table::{Cell, Table};

/// Threshold below which `φ̄` is treated as vanishing.
pub const PHI_BAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeanFieldError {
    #[error("phi_bar vanishes at t = {time}")]
    PhiBarVanishes { time: f64 },
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
}

/// Conditional-mean paths on the Riccati grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldTrajectory<T> {
    pub grid: TimeGrid<T>,
    /// `Q̄ᵃ + Q̄ⁿ` from the forward ODE.
    pub v_bar: Vec<T>,
    /// `Q̄ᵃ + Q̄ⁿ` from the exponential-integral formula (cross-check only).
    pub v_bar_quadrature: Vec<T>,
    pub q_bar_a: Vec<T>,
    pub q_bar_n: Vec<T>,
    /// Cumulative anonymous trading `Q̄ᵃ_t − Q̄ᵃ_0`.
    pub traded_a: Vec<T>,
    /// Cumulative identity-revealed trading `Q̄ⁿ_t − Q̄ⁿ_0`.
    pub traded_n: Vec<T>,
    /// Mean adjoint slope `v̄ = φ̄ V̄ + χ̄`.
    pub v_small: Vec<T>,
    /// Feedback intercept `χ = (φ̄ − φ) V̄ + χ̄`.
    pub chi_self: Vec<T>,
    pub theta_fn: Vec<T>,
    pub f_fn: Vec<T>,
    pub beta_fn: Vec<T>,
    pub g_fn: Vec<T>,
    pub price_drift: Vec<T>,
    pub mean_nu_a: Vec<T>,
    pub mean_nu_n: Vec<T>,
}

/// Builds the conditional-mean trajectory from oracle tables.
///
/// `V̄`, `Q̄ᵃ`, `Q̄ⁿ` are integrated jointly by RK4 with cubic Hermite
/// midpoints of `φ̄` and `χ̄`. `φ̄` may vanish only at the terminal node
/// (`Ψ = 0`), where `f` is left undefined.
pub fn mean_inventory_trajectory<T: Scalar>(
    tables: &RiccatiTables<T>,
    p: &ParamSet<T>,
) -> Result<MeanFieldTrajectory<T>, MeanFieldError> {
    let grid = &tables.grid;
    let n = grid.intervals();
    let floor = T::lit(PHI_BAR_FLOOR);
    let phi_bar = &tables.mean.phi_bar;
    let chi_bar = &tables.mean.chi_bar;
    let phi = &tables.own.phi_self;
    if let Some(k) = (0..n).find(|&k| phi_bar[k].abs() < floor) {
        return Err(MeanFieldError::PhiBarVanishes {
            time: grid.times()[k].to_f64_lossy(),
        });
    }
    let c = derive_coefficients(p);
    let two = T::lit(2.0);
    let (ia, in_) = (T::one() / (two * p.kappa_a), T::one() / (two * p.kappa_n));
    let h = grid.step();

    let rhs = |phi_b: T, chi_b: T, v: T| {
        let vs = phi_b * v + chi_b;
        [-c.b * vs, -ia * vs, -in_ * vs]
    };
    let mut v_bar = vec![T::zero(); n + 1];
    let mut traded_a = vec![T::zero(); n + 1];
    let mut traded_n = vec![T::zero(); n + 1];
    v_bar[0] = p.q0_total();
    let six = T::lit(6.0);
    let derivs: Vec<[T; 4]> = (0..=n).map(|k| tables.mean_derivative(k)).collect();
    for k in 0..n {
        let (d0, d1) = (derivs[k], derivs[k + 1]);
        let inputs = |s: T| {
            (
                hermite_at(phi_bar[k], phi_bar[k + 1], d0[0], d1[0], h, s),
                hermite_at(chi_bar[k], chi_bar[k + 1], d0[2], d1[2], h, s),
            )
        };
        let m = substeps(h, c.b * phi_bar[k].abs().max(phi_bar[k + 1].abs()));
        let (hs, ds) = (h / T::count(m), T::one() / T::count(m));
        let (mut v, mut qa, mut qn) = (v_bar[k], traded_a[k], traded_n[k]);
        for j in 0..m {
            let s0 = ds * T::count(j);
            let (p0, c0) = inputs(s0);
            let (pm, cm) = inputs(s0 + ds / two);
            let (p1, c1) = if j + 1 == m {
                (phi_bar[k + 1], chi_bar[k + 1])
            } else {
                inputs(s0 + ds)
            };
            let k1 = rhs(p0, c0, v);
            let k2 = rhs(pm, cm, v + hs / two * k1[0]);
            let k3 = rhs(pm, cm, v + hs / two * k2[0]);
            let k4 = rhs(p1, c1, v + hs * k3[0]);
            let incr = |i: usize| hs / six * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
            v = v + incr(0);
            qa = qa + incr(1);
            qn = qn + incr(2);
        }
        v_bar[k + 1] = v;
        traded_a[k + 1] = qa;
        traded_n[k + 1] = qn;
    }

    // V̄_t = e^{−Θ(t)} V̄_0 + ∫_0^t e^{−(Θ(t) − Θ(s))} θ(s) f(s) ds with θ f = −B χ̄.
    let seconds: Vec<[T; 4]> = (0..=n).map(|k| tables.mean_second_derivative(k)).collect();
    let theta_fn: Vec<T> = phi_bar.iter().map(|&x| c.b * x).collect();
    let big_theta = cumulative_hermite(
        &theta_fn,
        &derivs.iter().map(|d| c.b * d[0]).collect::<Vec<_>>(),
        &seconds.iter().map(|d| c.b * d[0]).collect::<Vec<_>>(),
        h,
    );
    let mut forcing = Vec::with_capacity(n + 1);
    let mut forcing_d1 = Vec::with_capacity(n + 1);
    let mut forcing_d2 = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let e = -c.b * big_theta[k].exp();
        let (th, dth) = (theta_fn[k], c.b * derivs[k][0]);
        let (x, dx, ddx) = (chi_bar[k], derivs[k][2], seconds[k][2]);
        forcing.push(e * x);
        forcing_d1.push(e * (dx + th * x));
        forcing_d2.push(e * (ddx + two * th * dx + dth * x + th * th * x));
    }
    let forced = cumulative_hermite(&forcing, &forcing_d1, &forcing_d2, h);
    let v_bar_quadrature: Vec<T> = big_theta
        .iter()
        .zip(&forced)
        .map(|(&th, &fc)| (-th).exp() * (p.q0_total() + fc))
        .collect();

    let v_small: Vec<T> = (0..=n).map(|k| phi_bar[k] * v_bar[k] + chi_bar[k]).collect();
    let chi_self: Vec<T> = (0..=n)
        .map(|k| (phi_bar[k] - phi[k]) * v_bar[k] + chi_bar[k])
        .collect();
    let f_fn = (0..=n)
        .map(|k| {
            if phi_bar[k].abs() < floor {
                T::nan()
            } else {
                -chi_bar[k] / phi_bar[k]
            }
        })
        .collect();
    let beta_fn = phi.iter().map(|&x| c.b * x).collect();
    let g_fn = (0..=n)
        .map(|k| {
            if phi[k].abs() < floor {
                T::nan()
            } else {
                -chi_self[k] / phi[k]
            }
        })
        .collect();
    Ok(MeanFieldTrajectory {
        grid: grid.clone(),
        q_bar_a: traded_a.iter().map(|&x| p.q0_a + x).collect(),
        q_bar_n: traded_n.iter().map(|&x| p.q0_n + x).collect(),
        price_drift: v_small.iter().map(|&x| -c.d * x).collect(),
        mean_nu_a: v_small.iter().map(|&x| -ia * x).collect(),
        mean_nu_n: v_small.iter().map(|&x| -in_ * x).collect(),
        v_bar,
        v_bar_quadrature,
        traded_a,
        traded_n,
        v_small,
        chi_self,
        theta_fn,
        f_fn,
        beta_fn,
        g_fn,
    })
}

/// Trading rates of both channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Controls<T> {
    pub nu_a: T,
    pub nu_n: T,
}

/// Equilibrium feedback `ν̂ = −[φ q + (φ̄ − φ) V̄ + χ̄] / 2κ`, linearly interpolated in `t`.
pub fn feedback_control<T: Scalar>(
    t: T,
    q_total: T,
    traj: &MeanFieldTrajectory<T>,
    tables: &RiccatiTables<T>,
    p: &ParamSet<T>,
) -> Controls<T> {
    let g = &tables.grid;
    let phi = g.interpolate(&tables.own.phi_self, t);
    let phi_bar = g.interpolate(&tables.mean.phi_bar, t);
    let chi_bar = g.interpolate(&tables.mean.chi_bar, t);
    let v_bar = traj.grid.interpolate(&traj.v_bar, t);
    let bracket = phi * q_total + (phi_bar - phi) * v_bar + chi_bar;
    let two = T::lit(2.0);
    Controls {
        nu_a: -bracket / (two * p.kappa_a),
        nu_n: -bracket / (two * p.kappa_n),
    }
}

/// Nested-quadrature form `χ_t = D ∫_t^T v̄_s e^{−D ∫_t^s φ_r dr} ds`.
///
/// Diagnostic only: it vanishes at `t = T`, unlike the algebraic intercept.
pub fn chi_self_quadrature<T: Scalar>(
    tables: &RiccatiTables<T>,
    traj: &MeanFieldTrajectory<T>,
    p: &ParamSet<T>,
) -> Vec<T> {
    let d = derive_coefficients(p).d;
    let h = tables.grid.step();
    let big_phi = cumulative_simpson(&tables.own.phi_self, h);
    let weighted: Vec<T> = traj
        .v_small
        .iter()
        .zip(&big_phi)
        .map(|(&v, &ph)| v * (-d * ph).exp())
        .collect();
    let inner = cumulative_simpson(&weighted, h);
    let total = inner[inner.len() - 1];
    big_phi
        .iter()
        .zip(&inner)
        .map(|(&ph, &i)| d * (d * ph).exp() * (total - i))
        .collect()
}

/// Backward RK4 of the self intercept equations
/// `χ' = φ(χ/2κa + η/2κn) − D v̄`, `η' = ζ(χ/2κa + η/2κn) − D v̄`, `χ_T = η_T = −2Ψ q_T`,
/// driven by the tabulated `v̄`, without assuming `χ = η`.
pub fn solve_self_intercepts<T: Scalar>(
    tables: &RiccatiTables<T>,
    traj: &MeanFieldTrajectory<T>,
    p: &ParamSet<T>,
) -> Result<(Vec<T>, Vec<T>), RiccatiError> {
    let c = derive_coefficients(p);
    let two = T::lit(2.0);
    let (ia, in_) = (T::one() / (two * p.kappa_a), T::one() / (two * p.kappa_n));
    let n = tables.grid.intervals();
    let h = tables.grid.step();
    // v̄' = φ̄' V̄ + φ̄ V̄' + χ̄' with V̄' = −B v̄.
    let v_dot = |k: usize| {
        let dm = tables.mean_derivative(k);
        dm[0] * traj.v_bar[k] - tables.mean.phi_bar[k] * c.b * traj.v_small[k] + dm[2]
    };
    let own = &tables.own;
    let interval = |k: usize| {
        let (s0, s1) = (tables.self_derivative(k), tables.self_derivative(k + 1));
        let (v0, v1) = (v_dot(k), v_dot(k + 1));
        move |s: T| {
            (
                hermite_at(own.phi_self[k], own.phi_self[k + 1], s0[0], s1[0], h, s),
                hermite_at(own.zeta_self[k], own.zeta_self[k + 1], s0[1], s1[1], h, s),
                hermite_at(traj.v_small[k], traj.v_small[k + 1], v0, v1, h, s),
            )
        }
    };
    let rhs = |(phi, zeta, v): (T, T, T), y: [T; 2]| {
        let lin = ia * y[0] + in_ * y[1];
        [phi * lin - c.d * v, zeta * lin - c.d * v]
    };
    let terminal = -two * p.psi * p.q_target;
    let mut chi = vec![terminal; n + 1];
    let mut eta = vec![terminal; n + 1];
    let mut y = [terminal, terminal];
    let six = T::lit(6.0);
    let limit = T::lit(BLOW_UP_LIMIT);
    let axpy = |y: [T; 2], a: T, k: [T; 2]| [y[0] + a * k[0], y[1] + a * k[1]];
    for k in (0..n).rev() {
        let inputs = interval(k);
        let m = substeps(h, c.b * tables.own.phi_self[k].abs().max(tables.own.phi_self[k + 1].abs()));
        let (hb, ds) = (-h / T::count(m), T::one() / T::count(m));
        for j in 0..m {
            let s1 = T::one() - ds * T::count(j);
            let end = inputs(s1);
            let mid = inputs(s1 - ds / two);
            let start = inputs(s1 - ds);
            let k1 = rhs(end, y);
            let k2 = rhs(mid, axpy(y, hb / two, k1));
            let k3 = rhs(mid, axpy(y, hb / two, k2));
            let k4 = rhs(start, axpy(y, hb, k3));
            for i in 0..2 {
                y[i] = y[i] + hb / six * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
            }
        }
        if y.iter().any(|v| !v.is_finite() || v.abs() > limit) {
            return Err(RiccatiError::BlowUp {
                time: tables.grid.times()[k].to_f64_lossy(),
            });
        }
        chi[k] = y[0];
        eta[k] = y[1];
    }
    Ok((chi, eta))
}

impl<T: Scalar> MeanFieldTrajectory<T> {
    /// CSV layout: `t, V_bar, Q_bar_a, Q_bar_n, v_bar, chi_self, mean_nu_a, mean_nu_n, price_drift`.
    pub fn to_table(&self) -> Table {
        let mut table = Table::new(&[
            "t",
            "V_bar",
            "Q_bar_a",
            "Q_bar_n",
            "v_bar",
            "chi_self",
            "mean_nu_a",
            "mean_nu_n",
            "price_drift",
        ]);
        for (k, &t) in self.grid.times().iter().enumerate() {
            let row = [
                t,
                self.v_bar[k],
                self.q_bar_a[k],
                self.q_bar_n[k],
                self.v_small[k],
                self.chi_self[k],
                self.mean_nu_a[k],
                self.mean_nu_n[k],
                self.price_drift[k],
            ];
            table
                .push(row.iter().map(|x| Cell::Num(x.to_f64_lossy())).collect())
                .expect("row width matches header");
        }
        table
    }
}

/// Joined coefficient and mean-trajectory table written by the `equilibrium` command.
pub fn equilibrium_table<T: Scalar>(tables: &RiccatiTables<T>, traj: &MeanFieldTrajectory<T>) -> Table {
    let mut table = Table::new(&[
        "t",
        "phi_bar",
        "zeta_bar",
        "chi_bar",
        "eta_bar",
        "phi_self",
        "chi_self",
        "V_bar",
        "Q_bar_a",
        "Q_bar_n",
        "v_bar",
        "mean_nu_a",
        "mean_nu_n",
        "price_drift",
    ]);
    for (k, &t) in tables.grid.times().iter().enumerate() {
        let row = [
            t,
            tables.mean.phi_bar[k],
            tables.mean.zeta_bar[k],
            tables.mean.chi_bar[k],
            tables.mean.eta_bar[k],
            tables.own.phi_self[k],
            traj.chi_self[k],
            traj.v_bar[k],
            traj.q_bar_a[k],
            traj.q_bar_n[k],
            traj.v_small[k],
            traj.mean_nu_a[k],
            traj.mean_nu_n[k],
            traj.price_drift[k],
        ];
        table
            .push(row.iter().map(|x| Cell::Num(x.to_f64_lossy())).collect())
            .expect("row width matches header");
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::riccati::solve_oracle;

    fn build(p: &ParamSet<f64>, n: usize) -> (RiccatiTables<f64>, MeanFieldTrajectory<f64>) {
        let g = TimeGrid::uniform(p.horizon, n).unwrap();
        let tables = solve_oracle(p, &g).unwrap();
        let traj = mean_inventory_trajectory(&tables, p).unwrap();
        (tables, traj)
    }

    fn sup(v: &[f64]) -> f64 {
        v.iter().fold(0.0, |a, x| a.max(x.abs()))
    }

    #[test]
    fn zero_target_zero_start_stays_flat() {
        let mut p = ParamSet::reference();
        p.q_target = 0.0;
        let (_, traj) = build(&p, 2_000);
        assert!(traj.v_bar.iter().all(|&v| v == 0.0));
        assert!(traj.mean_nu_a.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ode_and_quadrature_agree() {
        let p = ParamSet::reference();
        let (_, traj) = build(&p, 10_000);
        let scale = sup(&traj.v_bar);
        let gap = traj
            .v_bar
            .iter()
            .zip(&traj.v_bar_quadrature)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap <= 1e-6 * scale, "gap {gap} scale {scale}");
        // Buying toward a positive target: increasing after the initial phase.
        let n = traj.v_bar.len();
        assert!(traj.v_bar[n / 2..].windows(2).all(|w| w[1] >= w[0]));
        assert!(traj.v_bar[n - 1] < p.q_target);
    }

    #[test]
    fn nonzero_start_matches_homogeneous_term() {
        let mut p = ParamSet::reference();
        p.q0_a = 100.0;
        p.q0_n = 100.0;
        p.q_target = 100.0;
        let (_, traj) = build(&p, 10_000);
        assert_eq!(traj.v_bar[0], 200.0);
        let gap = traj
            .v_bar
            .iter()
            .zip(&traj.v_bar_quadrature)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap <= 1e-6 * sup(&traj.v_bar), "{gap}");
    }

    #[test]
    fn channel_inventories_are_proportional() {
        let mut p = ParamSet::reference();
        p.q0_a = 7.0;
        p.q0_n = -3.0;
        let (_, traj) = build(&p, 4_000);
        let ratio = p.kappa_n / p.kappa_a;
        for k in 0..traj.v_bar.len() {
            let lhs = traj.q_bar_a[k] - p.q0_a;
            let rhs = ratio * (traj.q_bar_n[k] - p.q0_n);
            assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0));
            let total = traj.q_bar_a[k] + traj.q_bar_n[k];
            assert!((total - traj.v_bar[k]).abs() <= 1e-9 * total.abs().max(1.0));
        }
    }

    #[test]
    fn definitional_identities() {
        let p = ParamSet::reference();
        let (tables, traj) = build(&p, 2_000);
        let c = derive_coefficients(&p);
        for k in 0..traj.v_bar.len() {
            let vb = tables.mean.phi_bar[k] * traj.v_bar[k] + tables.mean.chi_bar[k];
            assert_eq!(traj.v_small[k], vb);
            // Self and mean forms of v̄ coincide when χ is the algebraic intercept.
            let via_self = tables.own.phi_self[k] * traj.v_bar[k] + traj.chi_self[k];
            assert!((via_self - vb).abs() <= 1e-8 * vb.abs().max(1.0));
            assert_eq!(traj.price_drift[k], -c.d * traj.v_small[k]);
        }
        let n = traj.v_bar.len() - 1;
        assert!((traj.chi_self[n] + 2.0 * p.psi * p.q_target).abs() < 1e-9);
    }

    #[test]
    fn control_ratio_and_degenerate_state() {
        let p = ParamSet::reference();
        let (tables, traj) = build(&p, 2_000);
        let u = feedback_control(0.37, 12.5, &traj, &tables, &p);
        assert!((u.nu_a / u.nu_n - 2.0).abs() < 1e-12);
        let u0 = feedback_control(0.0, 0.0, &traj, &tables, &p);
        assert!(u0.nu_a > 0.0);
        assert!((u0.nu_a + tables.mean.chi_bar[0] / (2.0 * p.kappa_a)).abs() < 1e-12);

        let mut z = p;
        z.q_target = 0.0;
        let (tz, jz) = build(&z, 2_000);
        let t = 0.42;
        let v = jz.grid.interpolate(&jz.v_bar, t);
        let u = feedback_control(t, v, &jz, &tz, &z);
        assert_eq!((u.nu_a, u.nu_n), (0.0, 0.0));
    }

    #[test]
    fn self_intercept_oracle_confirms_symmetry_and_algebra() {
        let p = ParamSet::reference();
        let (tables, traj) = build(&p, 10_000);
        let (chi, eta) = solve_self_intercepts(&tables, &traj, &p).unwrap();
        let scale = sup(&chi);
        for k in 0..chi.len() {
            assert!((chi[k] - eta[k]).abs() <= 1e-10 * scale);
            assert!(
                (chi[k] - traj.chi_self[k]).abs() <= 1e-6 * scale,
                "k={k} {} {}",
                chi[k],
                traj.chi_self[k]
            );
        }
    }

    #[test]
    fn chi_quadrature_form_vanishes_at_horizon() {
        let p = ParamSet::reference();
        let (tables, traj) = build(&p, 2_000);
        let q = chi_self_quadrature(&tables, &traj, &p);
        assert_eq!(q[q.len() - 1], 0.0);
        assert_eq!(traj.chi_self[q.len() - 1], -400.0);

        let mut z = p;
        z.q_target = 0.0;
        let (tz, jz) = build(&z, 2_000);
        assert!(chi_self_quadrature(&tz, &jz, &z).iter().all(|&v| v == 0.0));
        assert!(jz.chi_self.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn terminal_inventory_nondecreasing_in_psi() {
        let mut last = f64::NEG_INFINITY;
        for psi in [0.01, 0.1, 1.0, 10.0] {
            let mut p = ParamSet::reference();
            p.psi = psi;
            let (_, traj) = build(&p, 4_000);
            let vt = traj.v_bar[traj.v_bar.len() - 1];
            assert!(vt >= last, "psi={psi} {vt} < {last}");
            last = vt;
        }
    }

    #[test]
    fn psi_zero_has_no_target_pull() {
        let mut p = ParamSet::reference();
        p.psi = 0.0;
        let (tables, traj) = build(&p, 2_000);
        assert!(traj.v_bar.iter().all(|&v| v == 0.0));
        assert!(traj.f_fn[traj.f_fn.len() - 1].is_nan());
        let u = feedback_control(0.5, 0.0, &traj, &tables, &p);
        assert_eq!(u.nu_a, 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]
            #[test]
            fn scale_equivariance(lambda in -3.0..3.0f64, q0a in -50.0..50.0f64, q0n in -50.0..50.0f64) {
                let mut p = ParamSet::reference();
                p.q0_a = q0a;
                p.q0_n = q0n;
                let mut s = p;
                s.q_target *= lambda;
                s.q0_a *= lambda;
                s.q0_n *= lambda;
                let (tp, jp) = build(&p, 1_000);
                let (ts, js) = build(&s, 1_000);
                let scale = sup(&jp.v_bar).max(1.0);
                for k in 0..jp.v_bar.len() {
                    prop_assert!((js.v_bar[k] - lambda * jp.v_bar[k]).abs() <= 1e-9 * scale * lambda.abs().max(1.0));
                    prop_assert!((js.q_bar_a[k] - lambda * jp.q_bar_a[k]).abs() <= 1e-9 * scale * lambda.abs().max(1.0));
                }
                let t = 0.3;
                let up = feedback_control(t, 10.0, &jp, &tp, &p);
                let us = feedback_control(t, 10.0 * lambda, &js, &ts, &s);
                prop_assert!((us.nu_a - lambda * up.nu_a).abs() <= 1e-8 * up.nu_a.abs().max(1.0) * lambda.abs().max(1.0));
            }
        }
    }
}
