//! Backward adjoint ODE systems for the feedback coefficients.
//!
//! The mean-field system couples `(φ̄, ζ̄, χ̄, η̄)`:
//!
//! ```text
//! φ̄' = φ̄²/2κa + ζ̄φ̄/2κn − (αa/2κa)φ̄ − (αn/2κn)ζ̄ − 2φ
//! ζ̄' = ζ̄²/2κn + ζ̄φ̄/2κa − (αn/2κn)ζ̄ − (αa/2κa)φ̄ − 2φ
//! χ̄' = (φ̄−αa)/2κa · χ̄ + (φ̄−αn)/2κn · η̄
//! η̄' = (ζ̄−αa)/2κa · χ̄ + (ζ̄−αn)/2κn · η̄
//! ```
//!
//! with `φ̄_T = ζ̄_T = 2Ψ` and `χ̄_T = η̄_T = −2Ψ q_T`. The self system is
//! `φ' = φ²/2κa + ζφ/2κn − 2φ`, `ζ' = ζ²/2κn + ζφ/2κa − 2φ`, terminal `2Ψ`.
//!
//! Both are integrated backward by classical RK4 without imposing `φ̄ = ζ̄`.
//! The RK4 tables are authoritative; the closed forms below evaluate the
//! printed expressions so that their deviation can be reported.

use serde::Serialize;
use thiserror::Error;

use crate::grid::{cumulative_hermite, TimeGrid};
use crate::model::{Coefficients, ParamSet};
use crate::scalar::Scalar;
use crate::table::{Cell, Table};

/// Magnitude beyond which a backward solution is declared exploded.
pub const BLOW_UP_LIMIT: f64 = 1e12;

/// Largest `h·λ` taken by a single RK4 stage; longer grid intervals are sub-stepped.
pub const MAX_STEP_STIFFNESS: f64 = 1.0;

/// Upper bound on RK4 sub-steps per grid interval.
pub const MAX_SUBSTEPS: usize = 4096;

/// Exponent above which the closed forms are rescaled by `e^{-x}`.
pub const EXP_RESCALE_THRESHOLD: f64 = 300.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RiccatiError {
    #[error("Riccati blow-up at t = {time}")]
    BlowUp { time: f64 },
    #[error("closed-form denominator vanishes at t = {time}")]
    VanishingDenominator { time: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    ClosedForm,
    OdeOracle,
}

impl Source {
    pub fn tag(self) -> &'static str {
        match self {
            Source::ClosedForm => "closed_form",
            Source::OdeOracle => "ode_oracle",
        }
    }
}

/// Mean-field coefficients on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanSystem<T> {
    pub phi_bar: Vec<T>,
    pub zeta_bar: Vec<T>,
    pub chi_bar: Vec<T>,
    pub eta_bar: Vec<T>,
    pub source: Source,
}

/// Self (best-response) quadratic coefficients on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfSystem<T> {
    pub phi_self: Vec<T>,
    pub zeta_self: Vec<T>,
    pub source: Source,
}

/// Time-gridded coefficient tables for both systems.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiTables<T> {
    pub grid: TimeGrid<T>,
    pub params: ParamSet<T>,
    pub mean: MeanSystem<T>,
    pub own: SelfSystem<T>,
}

/// Right-hand side of the four-equation mean-field system.
pub fn mean_rhs<T: Scalar>(p: &ParamSet<T>, y: &[T; 4]) -> [T; 4] {
    let two = T::lit(2.0);
    let (ia, in_) = (T::one() / (two * p.kappa_a), T::one() / (two * p.kappa_n));
    let (ga, gn) = (p.alpha_a * ia, p.alpha_n * in_);
    let run = two * p.phi_run;
    let [phi, zeta, chi, eta] = *y;
    [
        ia * phi * phi + in_ * zeta * phi - ga * phi - gn * zeta - run,
        in_ * zeta * zeta + ia * zeta * phi - gn * zeta - ga * phi - run,
        (phi - p.alpha_a) * ia * chi + (phi - p.alpha_n) * in_ * eta,
        (zeta - p.alpha_a) * ia * chi + (zeta - p.alpha_n) * in_ * eta,
    ]
}

/// Right-hand side of the two-equation self system.
pub fn self_rhs<T: Scalar>(p: &ParamSet<T>, y: &[T; 2]) -> [T; 2] {
    let two = T::lit(2.0);
    let (ia, in_) = (T::one() / (two * p.kappa_a), T::one() / (two * p.kappa_n));
    let run = two * p.phi_run;
    let [phi, zeta] = *y;
    [
        ia * phi * phi + in_ * zeta * phi - run,
        in_ * zeta * zeta + ia * zeta * phi - run,
    ]
}

/// Row-sum bound on the Jacobian of [`mean_rhs`] restricted to each block.
pub fn mean_stiffness<T: Scalar>(p: &ParamSet<T>, y: &[T; 4]) -> T {
    let two = T::lit(2.0);
    let (ia, in_) = (T::one() / (two * p.kappa_a), T::one() / (two * p.kappa_n));
    let (ga, gn) = (p.alpha_a * ia, p.alpha_n * in_);
    let [phi, zeta, _, _] = *y;
    let quad_phi = (two * ia * phi + in_ * zeta - ga).abs() + (in_ * phi - gn).abs();
    let quad_zeta = (two * in_ * zeta + ia * phi - gn).abs() + (ia * zeta - ga).abs();
    let lin_chi = ((phi - p.alpha_a) * ia).abs() + ((phi - p.alpha_n) * in_).abs();
    let lin_eta = ((zeta - p.alpha_a) * ia).abs() + ((zeta - p.alpha_n) * in_).abs();
    quad_phi.max(quad_zeta).max(lin_chi).max(lin_eta)
}

/// `y'' = J(y) y'` for the mean system.
pub fn mean_second_derivative<T: Scalar>(p: &ParamSet<T>, y: &[T; 4]) -> [T; 4] {
    let two = T::lit(2.0);
    let (ia, in_) = (T::one() / (two * p.kappa_a), T::one() / (two * p.kappa_n));
    let (ga, gn) = (p.alpha_a * ia, p.alpha_n * in_);
    let [phi, zeta, chi, eta] = *y;
    let [dp, dz, dc, de] = mean_rhs(p, y);
    [
        (two * ia * phi + in_ * zeta - ga) * dp + (in_ * phi - gn) * dz,
        (ia * zeta - ga) * dp + (two * in_ * zeta + ia * phi - gn) * dz,
        (ia * chi + in_ * eta) * dp + (phi - p.alpha_a) * ia * dc + (phi - p.alpha_n) * in_ * de,
        (ia * chi + in_ * eta) * dz + (zeta - p.alpha_a) * ia * dc + (zeta - p.alpha_n) * in_ * de,
    ]
}

/// Row-sum bound on the Jacobian of [`self_rhs`].
pub fn self_stiffness<T: Scalar>(p: &ParamSet<T>, y: &[T; 2]) -> T {
    let two = T::lit(2.0);
    let (ia, in_) = (T::one() / (two * p.kappa_a), T::one() / (two * p.kappa_n));
    let [phi, zeta] = *y;
    let a = (two * ia * phi + in_ * zeta).abs() + (in_ * phi).abs();
    let b = (two * in_ * zeta + ia * phi).abs() + (ia * zeta).abs();
    a.max(b)
}

/// Number of RK4 sub-steps keeping `h·λ` within [`MAX_STEP_STIFFNESS`].
pub(crate) fn substeps<T: Scalar>(h: T, rate: T) -> usize {
    let x = (h.abs() * rate / T::lit(MAX_STEP_STIFFNESS)).ceil();
    if !x.is_finite() {
        return MAX_SUBSTEPS;
    }
    x.to_usize().unwrap_or(MAX_SUBSTEPS).clamp(1, MAX_SUBSTEPS)
}

fn axpy<T: Scalar, const N: usize>(y: &[T; N], h: T, k: &[T; N]) -> [T; N] {
    let mut out = *y;
    for i in 0..N {
        out[i] = y[i] + h * k[i];
    }
    out
}

/// Classical RK4 from `t = T` back to `t = 0` over every grid interval.
///
/// An interval is split into equal sub-steps when `step · stiffness(y)`
/// exceeds [`MAX_STEP_STIFFNESS`]; on well-resolved grids every interval is
/// a single step.
pub(crate) fn rk4_backward<T: Scalar, const N: usize>(
    grid: &TimeGrid<T>,
    terminal: [T; N],
    rhs: impl Fn(&[T; N]) -> [T; N],
    stiffness: impl Fn(&[T; N]) -> T,
) -> Result<Vec<[T; N]>, RiccatiError> {
    let n = grid.intervals();
    let two = T::lit(2.0);
    let limit = T::lit(BLOW_UP_LIMIT);
    let mut out = vec![terminal; n + 1];
    let mut y = terminal;
    for k in (0..n).rev() {
        let m = substeps(grid.step(), stiffness(&y));
        let h = -grid.step() / T::count(m);
        let half = h / two;
        let sixth = h / T::lit(6.0);
        for _ in 0..m {
            let k1 = rhs(&y);
            let k2 = rhs(&axpy(&y, half, &k1));
            let k3 = rhs(&axpy(&y, half, &k2));
            let k4 = rhs(&axpy(&y, h, &k3));
            for i in 0..N {
                y[i] = y[i] + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
            }
        }
        if y.iter().any(|v| !v.is_finite() || v.abs() > limit) {
            return Err(RiccatiError::BlowUp {
                time: grid.times()[k].to_f64_lossy(),
            });
        }
        out[k] = y;
    }
    Ok(out)
}

fn unzip<T: Copy, const N: usize>(rows: &[[T; N]], i: usize) -> Vec<T> {
    rows.iter().map(|r| r[i]).collect()
}

/// Backward RK4 of the coupled mean-field system.
pub fn solve_mean_system_oracle<T: Scalar>(
    p: &ParamSet<T>,
    grid: &TimeGrid<T>,
) -> Result<MeanSystem<T>, RiccatiError> {
    let two = T::lit(2.0);
    let terminal = [
        two * p.psi,
        two * p.psi,
        -two * p.psi * p.q_target,
        -two * p.psi * p.q_target,
    ];
    let rows = rk4_backward(grid, terminal, |y| mean_rhs(p, y), |y| mean_stiffness(p, y))?;
    Ok(MeanSystem {
        phi_bar: unzip(&rows, 0),
        zeta_bar: unzip(&rows, 1),
        chi_bar: unzip(&rows, 2),
        eta_bar: unzip(&rows, 3),
        source: Source::OdeOracle,
    })
}

/// Backward RK4 of the coupled self system.
pub fn solve_self_system_oracle<T: Scalar>(
    p: &ParamSet<T>,
    grid: &TimeGrid<T>,
) -> Result<SelfSystem<T>, RiccatiError> {
    let two = T::lit(2.0);
    let rows = rk4_backward(
        grid,
        [two * p.psi, two * p.psi],
        |y| self_rhs(p, y),
        |y| self_stiffness(p, y),
    )?;
    Ok(SelfSystem {
        phi_self: unzip(&rows, 0),
        zeta_self: unzip(&rows, 1),
        source: Source::OdeOracle,
    })
}

/// Solves both systems on `grid`.
pub fn solve_oracle<T: Scalar>(
    p: &ParamSet<T>,
    grid: &TimeGrid<T>,
) -> Result<RiccatiTables<T>, RiccatiError> {
    Ok(RiccatiTables {
        grid: grid.clone(),
        params: *p,
        mean: solve_mean_system_oracle(p, grid)?,
        own: solve_self_system_oracle(p, grid)?,
    })
}

/// Printed closed form shared by both Riccati solutions:
///
/// ```text
/// (−L(eˣ−1) − 2Ψ(r₊eˣ − r₋)) / ((r₋eˣ − r₊) − 2ΨB(eˣ−1)),  x = (r₊−r₋)(T−t)
/// ```
fn printed_riccati<T: Scalar>(
    t: T,
    p: &ParamSet<T>,
    lead: T,
    r_plus: T,
    r_minus: T,
    b: T,
) -> Result<T, RiccatiError> {
    let two_psi = T::lit(2.0) * p.psi;
    let x = (r_plus - r_minus) * (p.horizon - t);
    let (num, den) = if x > T::lit(EXP_RESCALE_THRESHOLD) {
        let em = (-x).exp();
        (
            -lead * (T::one() - em) - two_psi * (r_plus - r_minus * em),
            (r_minus - r_plus * em) - two_psi * b * (T::one() - em),
        )
    } else {
        let ex = x.exp();
        (
            -lead * (ex - T::one()) - two_psi * (r_plus * ex - r_minus),
            (r_minus * ex - r_plus) - two_psi * b * (ex - T::one()),
        )
    };
    if den == T::zero() || !den.is_finite() {
        return Err(RiccatiError::VanishingDenominator {
            time: t.to_f64_lossy(),
        });
    }
    Ok(num / den)
}

/// Printed closed form for `φ̄_t` (built on `C` and `δ±`).
pub fn phi_bar_closed_form<T: Scalar>(
    t: T,
    p: &ParamSet<T>,
    c: &Coefficients<T>,
) -> Result<T, RiccatiError> {
    printed_riccati(t, p, c.c, c.delta_plus, c.delta_minus, c.b)
}

/// Printed closed form for `φ_t` (built on `D` and `γ± = ±√(DE)`).
pub fn phi_self_closed_form<T: Scalar>(
    t: T,
    p: &ParamSet<T>,
    c: &Coefficients<T>,
) -> Result<T, RiccatiError> {
    printed_riccati(t, p, c.d, c.gamma_plus, c.gamma_minus, c.b)
}

/// `χ̄_t = −2Ψq_T · exp(−∫_t^T (B φ̄_s − D) ds)` by grid quadrature.
///
/// Derivatives of the integrand come from the symmetric Riccati equation
/// `φ̄' = Bφ̄² − Dφ̄ − C` evaluated on the table.
pub fn chi_bar_from_phibar<T: Scalar>(
    phi_bar: &[T],
    grid: &TimeGrid<T>,
    p: &ParamSet<T>,
    c: &Coefficients<T>,
) -> Vec<T> {
    let two = T::lit(2.0);
    let integrand: Vec<T> = phi_bar.iter().map(|&f| c.b * f - c.d).collect();
    let d1: Vec<T> = phi_bar
        .iter()
        .map(|&f| c.b * (c.b * f * f - c.d * f - c.c))
        .collect();
    let d2: Vec<T> = phi_bar
        .iter()
        .zip(&d1)
        .map(|(&f, &g)| (two * c.b * f - c.d) * g)
        .collect();
    let cum = cumulative_hermite(&integrand, &d1, &d2, grid.step());
    let total = cum[cum.len() - 1];
    let terminal = -T::lit(2.0) * p.psi * p.q_target;
    cum.iter().map(|&ct| terminal * (-(total - ct)).exp()).collect()
}

impl<T: Scalar> RiccatiTables<T> {
    /// Closed-form counterpart of the oracle tables on the same grid.
    ///
    /// `φ̄`, `ζ̄` and `φ`, `ζ` come from the printed formulas and `χ̄ = η̄` from
    /// the exponential-of-integral form driven by the printed `φ̄`.
    pub fn closed_form(p: &ParamSet<T>, c: &Coefficients<T>, grid: &TimeGrid<T>) -> Result<Self, RiccatiError> {
        let phi_bar = grid
            .times()
            .iter()
            .map(|&t| phi_bar_closed_form(t, p, c))
            .collect::<Result<Vec<_>, _>>()?;
        let phi_self = grid
            .times()
            .iter()
            .map(|&t| phi_self_closed_form(t, p, c))
            .collect::<Result<Vec<_>, _>>()?;
        let chi_bar = chi_bar_from_phibar(&phi_bar, grid, p, c);
        Ok(RiccatiTables {
            grid: grid.clone(),
            params: *p,
            mean: MeanSystem {
                zeta_bar: phi_bar.clone(),
                phi_bar,
                eta_bar: chi_bar.clone(),
                chi_bar,
                source: Source::ClosedForm,
            },
            own: SelfSystem {
                zeta_self: phi_self.clone(),
                phi_self,
                source: Source::ClosedForm,
            },
        })
    }

    /// Mean-system state at node `k`.
    pub fn mean_state(&self, k: usize) -> [T; 4] {
        [
            self.mean.phi_bar[k],
            self.mean.zeta_bar[k],
            self.mean.chi_bar[k],
            self.mean.eta_bar[k],
        ]
    }

    /// Time derivatives of the mean system at node `k`.
    pub fn mean_derivative(&self, k: usize) -> [T; 4] {
        mean_rhs(&self.params, &self.mean_state(k))
    }

    pub fn mean_second_derivative(&self, k: usize) -> [T; 4] {
        mean_second_derivative(&self.params, &self.mean_state(k))
    }

    pub fn self_derivative(&self, k: usize) -> [T; 2] {
        self_rhs(&self.params, &[self.own.phi_self[k], self.own.zeta_self[k]])
    }

    /// CSV layout: `t, phi_bar, zeta_bar, chi_bar, eta_bar, phi_self, zeta_self, source`.
    pub fn to_table(&self) -> Table {
        let mut table = Table::new(&[
            "t", "phi_bar", "zeta_bar", "chi_bar", "eta_bar", "phi_self", "zeta_self", "source",
        ]);
        let tag = if self.mean.source == self.own.source {
            self.mean.source.tag().to_owned()
        } else {
            format!("{}+{}", self.mean.source.tag(), self.own.source.tag())
        };
        for (k, &t) in self.grid.times().iter().enumerate() {
            let f = |x: T| Cell::Num(x.to_f64_lossy());
            table
                .push(vec![
                    f(t),
                    f(self.mean.phi_bar[k]),
                    f(self.mean.zeta_bar[k]),
                    f(self.mean.chi_bar[k]),
                    f(self.mean.eta_bar[k]),
                    f(self.own.phi_self[k]),
                    f(self.own.zeta_self[k]),
                    Cell::Text(tag.clone()),
                ])
                .expect("row width matches header");
        }
        table
    }
}

/// Max-norm centered-difference residual of each oracle array against its ODE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualReport {
    pub phi_bar: f64,
    pub zeta_bar: f64,
    pub chi_bar: f64,
    pub eta_bar: f64,
    pub phi_self: f64,
    pub zeta_self: f64,
    pub step: f64,
}

impl ResidualReport {
    pub fn max(&self) -> f64 {
        [
            self.phi_bar,
            self.zeta_bar,
            self.chi_bar,
            self.eta_bar,
            self.phi_self,
            self.zeta_self,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

pub fn ode_residuals<T: Scalar>(tables: &RiccatiTables<T>) -> ResidualReport {
    let n = tables.grid.intervals();
    let h2 = T::lit(2.0) * tables.grid.step();
    let mut r = [0.0f64; 6];
    for k in 1..n {
        let fd = |a: &[T]| (a[k + 1] - a[k - 1]) / h2;
        let m = tables.mean_derivative(k);
        let s = tables.self_derivative(k);
        let diffs = [
            fd(&tables.mean.phi_bar) - m[0],
            fd(&tables.mean.zeta_bar) - m[1],
            fd(&tables.mean.chi_bar) - m[2],
            fd(&tables.mean.eta_bar) - m[3],
            fd(&tables.own.phi_self) - s[0],
            fd(&tables.own.zeta_self) - s[1],
        ];
        for (acc, d) in r.iter_mut().zip(diffs) {
            *acc = acc.max(d.abs().to_f64_lossy());
        }
    }
    ResidualReport {
        phi_bar: r[0],
        zeta_bar: r[1],
        chi_bar: r[2],
        eta_bar: r[3],
        phi_self: r[4],
        zeta_self: r[5],
        step: tables.grid.step().to_f64_lossy(),
    }
}

/// Observed order of the oracle from grids with `n`, `2n`, `4n` intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub coarse_intervals: usize,
    /// Max-norm change (coarse vs. medium) per array: φ̄, ζ̄, χ̄, η̄, φ, ζ.
    pub coarse_change: [f64; 6],
    /// Max-norm change (medium vs. fine).
    pub fine_change: [f64; 6],
    /// `log2(coarse_change / fine_change)`.
    pub order: [f64; 6],
}

impl ConvergenceReport {
    pub fn min_order(&self) -> f64 {
        self.order.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn convergence_order(
    p: &ParamSet<f64>,
    coarse_intervals: usize,
) -> Result<ConvergenceReport, RiccatiError> {
    let solve = |n: usize| -> Result<RiccatiTables<f64>, RiccatiError> {
        let g = TimeGrid::uniform(p.horizon, n).expect("even interval count");
        solve_oracle(p, &g)
    };
    let a = solve(coarse_intervals)?;
    let b = solve(2 * coarse_intervals)?;
    let c = solve(4 * coarse_intervals)?;
    let arrays = |t: &RiccatiTables<f64>| -> [Vec<f64>; 6] {
        [
            t.mean.phi_bar.clone(),
            t.mean.zeta_bar.clone(),
            t.mean.chi_bar.clone(),
            t.mean.eta_bar.clone(),
            t.own.phi_self.clone(),
            t.own.zeta_self.clone(),
        ]
    };
    let (xa, xb, xc) = (arrays(&a), arrays(&b), arrays(&c));
    let mut coarse_change = [0.0; 6];
    let mut fine_change = [0.0; 6];
    let mut order = [0.0; 6];
    for i in 0..6 {
        for k in 0..=coarse_intervals {
            coarse_change[i] = f64::max(coarse_change[i], (xa[i][k] - xb[i][2 * k]).abs());
            fine_change[i] = f64::max(fine_change[i], (xb[i][2 * k] - xc[i][4 * k]).abs());
        }
        order[i] = if coarse_change[i] == 0.0 && fine_change[i] == 0.0 {
            f64::INFINITY
        } else {
            (coarse_change[i] / fine_change[i]).log2()
        };
    }
    Ok(ConvergenceReport {
        coarse_intervals,
        coarse_change,
        fine_change,
        order,
    })
}
