//! Oracle self-checks and the comparison against the printed closed forms.

use serde::Serialize;

use crate::grid::TimeGrid;
use crate::meanfield::{mean_inventory_trajectory, solve_self_intercepts};
use crate::model::{derive_coefficients, validate_params, ParamSet};
use crate::riccati::{
    chi_bar_from_phibar, convergence_order, ode_residuals, solve_oracle, ConvergenceReport,
    ResidualReport, RiccatiTables,
};

/// Coarse grid of the convergence study (refined twice).
///
/// Coarser grids resolve the terminal layer (rate ≈ 2000 at Ψ = 1) with
/// `h·rate` near 1, outside the asymptotic regime of RK4.
pub const CONVERGENCE_COARSE_INTERVALS: usize = crate::grid::DEFAULT_INTERVALS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClosedFormDeviation {
    /// `max_t |closed − oracle| / max_t |oracle|`; `None` when evaluation failed.
    pub max_relative_deviation: Option<f64>,
    /// Pointwise `max_t |closed − oracle| / |oracle|`.
    pub max_pointwise_relative: Option<f64>,
    pub long_horizon_value: Option<f64>,
    pub oracle_fixed_point: f64,
    pub error: Option<&'static str>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TerminalCheck {
    /// Largest of `|φ̄_T − 2Ψ|`, `|ζ̄_T − 2Ψ|`, `|φ_T − 2Ψ|`, `|ζ_T − 2Ψ|`.
    pub slope_error: f64,
    /// Largest of `|χ̄_T + 2Ψq_T|`, `|η̄_T + 2Ψq_T|`.
    pub intercept_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SymmetryCheck {
    pub phi_bar_zeta_bar: f64,
    pub chi_bar_eta_bar: f64,
    pub phi_self_zeta_self: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FixedPointCheck {
    pub phi_bar_0: f64,
    pub phi_bar_fixed_point: f64,
    pub phi_self_0: f64,
    pub phi_self_fixed_point: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub schema_version: u32,
    pub params: ParamSet<f64>,
    pub intervals: usize,
    pub step: f64,
    pub terminal: TerminalCheck,
    pub symmetry: SymmetryCheck,
    pub residuals: ResidualReport,
    /// `10·step²`.
    pub residual_bound: f64,
    pub convergence: Option<ConvergenceReport>,
    pub fixed_points: FixedPointCheck,
    pub closed_form_phi_bar: ClosedFormDeviation,
    pub closed_form_phi_self: ClosedFormDeviation,
    /// `max |χ̄_oracle − χ̄_quadrature| / max |χ̄|`.
    pub chi_bar_quadrature_gap: f64,
    /// `max |V̄_ode − V̄_quadrature| / max |V̄|`.
    pub v_bar_dual_gap: f64,
    /// `max |η − χ| / max |χ|` from the extended intercept system.
    pub self_intercept_symmetry: f64,
    /// `max |χ_ode − χ_algebraic| / max |χ|`.
    pub self_intercept_gap: f64,
}

pub const VALIDATION_SCHEMA_VERSION: u32 = 1;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn relative(gap: f64, scale: f64) -> f64 {
    if scale == 0.0 {
        gap
    } else {
        gap / scale
    }
}

fn closed_form_deviation(closed: Option<&[f64]>, oracle: &[f64], fixed: f64, error: Option<&'static str>) -> ClosedFormDeviation {
    match closed {
        Some(c) => ClosedFormDeviation {
            max_relative_deviation: Some(relative(max_abs_diff(c, oracle), max_abs(oracle))),
            max_pointwise_relative: Some(
                c.iter()
                    .zip(oracle)
                    .fold(0.0, |m, (x, y)| m.max(relative((x - y).abs(), y.abs()))),
            ),
            long_horizon_value: Some(c[0]),
            oracle_fixed_point: fixed,
            error: None,
        },
        None => ClosedFormDeviation {
            max_relative_deviation: None,
            max_pointwise_relative: None,
            long_horizon_value: None,
            oracle_fixed_point: fixed,
            error,
        },
    }
}

/// Runs every oracle check on one parameter set.
///
/// `with_convergence` adds oracle solves on 1, 2 and 4 times the coarse grid.
pub fn validate(p: &ParamSet<f64>, intervals: usize, with_convergence: bool) -> Result<ValidationReport, String> {
    let p = validate_params(*p).map_err(|e| e.to_string())?;
    let grid = TimeGrid::uniform(p.horizon, intervals).map_err(|e| e.to_string())?;
    let coeffs = derive_coefficients(&p);
    let tables = solve_oracle(&p, &grid).map_err(|e| e.to_string())?;
    let traj = mean_inventory_trajectory(&tables, &p).map_err(|e| e.to_string())?;
    let m = &tables.mean;
    let s = &tables.own;
    let last = intervals;
    let two_psi = 2.0 * p.psi;
    let target = -2.0 * p.psi * p.q_target;
    let terminal = TerminalCheck {
        slope_error: [m.phi_bar[last], m.zeta_bar[last], s.phi_self[last], s.zeta_self[last]]
            .iter()
            .fold(0.0, |a, x| a.max((x - two_psi).abs())),
        intercept_error: (m.chi_bar[last] - target).abs().max((m.eta_bar[last] - target).abs()),
    };
    let symmetry = SymmetryCheck {
        phi_bar_zeta_bar: max_abs_diff(&m.phi_bar, &m.zeta_bar),
        chi_bar_eta_bar: max_abs_diff(&m.chi_bar, &m.eta_bar),
        phi_self_zeta_self: max_abs_diff(&s.phi_self, &s.zeta_self),
    };
    let residuals = ode_residuals(&tables);
    let convergence = if with_convergence {
        Some(convergence_order(&p, CONVERGENCE_COARSE_INTERVALS).map_err(|e| e.to_string())?)
    } else {
        None
    };
    let closed = RiccatiTables::closed_form(&p, &coeffs, &grid);
    let (cf_bar, cf_self, cf_err) = match &closed {
        Ok(t) => (Some(t.mean.phi_bar.as_slice()), Some(t.own.phi_self.as_slice()), None),
        Err(_) => (None, None, Some("closed form denominator vanished")),
    };
    let chi_quad = chi_bar_from_phibar(&m.phi_bar, &grid, &p, &coeffs);
    let (chi_ode, eta_ode) = solve_self_intercepts(&tables, &traj, &p).map_err(|e| e.to_string())?;
    let chi_scale = max_abs(&traj.chi_self);
    Ok(ValidationReport {
        schema_version: VALIDATION_SCHEMA_VERSION,
        params: p,
        intervals,
        step: grid.step(),
        terminal,
        symmetry,
        residual_bound: 10.0 * grid.step() * grid.step(),
        residuals,
        convergence,
        fixed_points: FixedPointCheck {
            phi_bar_0: m.phi_bar[0],
            phi_bar_fixed_point: coeffs.fixed_point_mean,
            phi_self_0: s.phi_self[0],
            phi_self_fixed_point: coeffs.fixed_point_self,
        },
        closed_form_phi_bar: closed_form_deviation(cf_bar, &m.phi_bar, coeffs.fixed_point_mean, cf_err),
        closed_form_phi_self: closed_form_deviation(cf_self, &s.phi_self, coeffs.fixed_point_self, cf_err),
        chi_bar_quadrature_gap: relative(max_abs_diff(&chi_quad, &m.chi_bar), max_abs(&m.chi_bar)),
        v_bar_dual_gap: relative(max_abs_diff(&traj.v_bar, &traj.v_bar_quadrature), max_abs(&traj.v_bar)),
        self_intercept_symmetry: relative(max_abs_diff(&chi_ode, &eta_ode), chi_scale),
        self_intercept_gap: relative(max_abs_diff(&chi_ode, &traj.chi_self), chi_scale),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_report_checks() {
        let r = validate(&ParamSet::reference(), 10_000, false).unwrap();
        assert!(r.terminal.slope_error <= 1e-12 && r.terminal.intercept_error <= 1e-12);
        assert!(r.symmetry.phi_bar_zeta_bar <= 1e-10 && r.symmetry.chi_bar_eta_bar <= 1e-10);
        assert!((r.fixed_points.phi_bar_0 - r.fixed_points.phi_bar_fixed_point).abs() < 1e-4);
        assert!((r.fixed_points.phi_self_0 - r.fixed_points.phi_self_fixed_point).abs() < 1e-4);
        assert!(r.chi_bar_quadrature_gap < 1e-6, "{}", r.chi_bar_quadrature_gap);
        assert!(r.v_bar_dual_gap < 1e-6, "{}", r.v_bar_dual_gap);
        assert!(r.self_intercept_gap < 1e-6 && r.self_intercept_symmetry < 1e-10);
        assert!(r.closed_form_phi_bar.max_pointwise_relative.unwrap() > 1e-2);
        assert!(r.closed_form_phi_self.max_pointwise_relative.unwrap() > 1e-2);
    }

    #[test]
    fn report_rejects_invalid_params() {
        let mut p = ParamSet::reference();
        p.kappa_n = 0.0;
        assert!(validate(&p, 100, false).unwrap_err().contains("kappa_n"));
    }
}
