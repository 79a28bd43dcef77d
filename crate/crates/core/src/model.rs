//! Model constants and the scalar coefficients derived from them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Every constant of the execution model.
///
/// Field names match the JSON config keys under `params`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSet<T> {
    /// Permanent impact of the anonymous channel.
    pub alpha_a: T,
    /// Permanent impact of the identity-revealed channel.
    pub alpha_n: T,
    /// Temporary impact (quadratic cost) of the anonymous channel.
    pub kappa_a: T,
    /// Temporary impact (quadratic cost) of the identity-revealed channel.
    pub kappa_n: T,
    /// Mid-price volatility (common noise).
    pub sigma_0: T,
    /// Anonymous inventory volatility.
    pub sigma_a: T,
    /// Identity-revealed inventory volatility.
    pub sigma_n: T,
    /// Running inventory penalty.
    pub phi_run: T,
    /// Terminal penalty.
    pub psi: T,
    /// Terminal inventory target.
    pub q_target: T,
    /// Trading horizon.
    pub horizon: T,
    pub q0_a: T,
    pub q0_n: T,
    pub s0: T,
}

impl ParamSet<f64> {
    /// The reference parameter set used throughout the numerical studies.
    ///
    /// `sigma_0 = 1` and `s0 = 0`: the mid-price is measured as a displacement
    /// from its initial level.
    pub fn reference() -> Self {
        ParamSet {
            alpha_a: 4e-3,
            alpha_n: 5e-3,
            kappa_a: 1.5e-3,
            kappa_n: 3e-3,
            sigma_0: 1.0,
            sigma_a: 2.0,
            sigma_n: 4.0,
            phi_run: 1.0,
            psi: 1.0,
            q_target: 200.0,
            horizon: 1.0,
            q0_a: 0.0,
            q0_n: 0.0,
            s0: 0.0,
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    /// Converts every field to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let c = |x: T| U::lit(x.to_f64_lossy());
        ParamSet {
            alpha_a: c(self.alpha_a),
            alpha_n: c(self.alpha_n),
            kappa_a: c(self.kappa_a),
            kappa_n: c(self.kappa_n),
            sigma_0: c(self.sigma_0),
            sigma_a: c(self.sigma_a),
            sigma_n: c(self.sigma_n),
            phi_run: c(self.phi_run),
            psi: c(self.psi),
            q_target: c(self.q_target),
            horizon: c(self.horizon),
            q0_a: c(self.q0_a),
            q0_n: c(self.q0_n),
            s0: c(self.s0),
        }
    }

    /// Initial total inventory.
    pub fn q0_total(&self) -> T {
        self.q0_a + self.q0_n
    }
}

/// One violated parameter constraint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid parameters: {}", .violations.iter().map(|v| v.message.as_str()).collect::<Vec<_>>().join("; "))]
pub struct ParamError {
    pub violations: Vec<Violation>,
}

impl ParamError {
    pub fn has_field(&self, field: &str) -> bool {
        self.violations.iter().any(|v| v.field == field)
    }
}

/// Checks every invariant of [`ParamSet`], reporting all violations at once.
pub fn validate_params<T: Scalar>(raw: ParamSet<T>) -> Result<ParamSet<T>, ParamError> {
    let mut violations = Vec::new();
    let mut check = |field: &'static str, value: T, ok: bool, what: &str| {
        if !value.is_finite() {
            violations.push(Violation {
                field,
                message: format!("{field} must be finite"),
            });
        } else if !ok {
            violations.push(Violation {
                field,
                message: format!("{field} must be {what}"),
            });
        }
    };
    let zero = T::zero();
    check("alpha_a", raw.alpha_a, raw.alpha_a > zero, "positive");
    check("alpha_n", raw.alpha_n, raw.alpha_n > zero, "positive");
    check("kappa_a", raw.kappa_a, raw.kappa_a > zero, "positive");
    check("kappa_n", raw.kappa_n, raw.kappa_n > zero, "positive");
    check("sigma_0", raw.sigma_0, raw.sigma_0 >= zero, "nonnegative");
    check("sigma_a", raw.sigma_a, raw.sigma_a >= zero, "nonnegative");
    check("sigma_n", raw.sigma_n, raw.sigma_n >= zero, "nonnegative");
    check("phi_run", raw.phi_run, raw.phi_run > zero, "positive");
    check("psi", raw.psi, raw.psi >= zero, "nonnegative");
    check("q_target", raw.q_target, true, "finite");
    check("horizon", raw.horizon, raw.horizon > zero, "positive");
    check("q0_a", raw.q0_a, true, "finite");
    check("q0_n", raw.q0_n, true, "finite");
    check("s0", raw.s0, true, "finite");
    if violations.is_empty() {
        Ok(raw)
    } else {
        Err(ParamError { violations })
    }
}

/// Scalar coefficients of the closed-form equilibrium.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Coefficients<T> {
    pub a: T,
    pub b: T,
    pub c: T,
    pub d: T,
    pub e: T,
    pub delta_plus: T,
    pub delta_minus: T,
    pub gamma_plus: T,
    pub gamma_minus: T,
    /// `A² + B·C`.
    pub r: T,
    /// `D·E`.
    pub s_disc: T,
    /// Stable backward fixed point of `x' = B x² − D x − C`.
    pub fixed_point_mean: T,
    /// Stable backward fixed point of `x' = B x² − C`.
    pub fixed_point_self: T,
}

/// Computes the coefficients from validated parameters.
pub fn derive_coefficients<T: Scalar>(p: &ParamSet<T>) -> Coefficients<T> {
    let two = T::lit(2.0);
    let half = T::lit(0.5);
    let gamma_a = p.alpha_a / (two * p.kappa_a);
    let gamma_n = p.alpha_n / (two * p.kappa_n);
    let d = gamma_a + gamma_n;
    let a = -half * d;
    let b = T::one() / (two * p.kappa_a) + T::one() / (two * p.kappa_n);
    let c = two * p.phi_run;
    let e = two * p.phi_run;
    let r = a * a + b * c;
    let s_disc = d * e;
    let root_r = r.sqrt();
    let root_s = s_disc.sqrt();
    let fixed_point_mean = (d + (d * d + T::lit(4.0) * b * c).sqrt()) / (two * b);
    let fixed_point_self = (c / b).sqrt();
    Coefficients {
        a,
        b,
        c,
        d,
        e,
        delta_plus: a + root_r,
        delta_minus: a - root_r,
        gamma_plus: root_s,
        gamma_minus: -root_s,
        r,
        s_disc,
        fixed_point_mean,
        fixed_point_self,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn reference_set_is_valid() {
        assert!(validate_params(ParamSet::reference()).is_ok());
    }

    #[test]
    fn zero_kappa_is_rejected_by_name() {
        let mut p = ParamSet::reference();
        p.kappa_a = 0.0;
        let err = validate_params(p).unwrap_err();
        assert!(err.has_field("kappa_a"));
        assert!(err.to_string().contains("kappa_a must be positive"));
    }

    #[test]
    fn negative_phi_run_is_rejected() {
        let mut p = ParamSet::reference();
        p.phi_run = -1.0;
        let err = validate_params(p).unwrap_err();
        assert!(err.to_string().contains("phi_run must be positive"));
    }

    #[test]
    fn every_violation_is_reported() {
        let mut p = ParamSet::reference();
        p.kappa_a = 0.0;
        p.phi_run = 0.0;
        p.sigma_a = -1.0;
        p.horizon = f64::NAN;
        let err = validate_params(p).unwrap_err();
        assert_eq!(err.violations.len(), 4);
        for f in ["kappa_a", "phi_run", "sigma_a", "horizon"] {
            assert!(err.has_field(f), "{f}");
        }
    }

    #[test]
    fn psi_zero_is_allowed() {
        let mut p = ParamSet::reference();
        p.psi = 0.0;
        assert!(validate_params(p).is_ok());
    }

    #[test]
    fn reference_coefficients() {
        // Hand arithmetic: alpha/2kappa = 4/3 and 5/6, 1/2kappa = 1000/3 and 500/3.
        let c = derive_coefficients(&ParamSet::reference());
        assert_relative_eq!(c.a, -13.0 / 12.0, max_relative = 1e-14);
        assert_relative_eq!(c.b, 500.0, max_relative = 1e-14);
        assert_eq!(c.c, 2.0);
        assert_eq!(c.e, 2.0);
        assert_relative_eq!(c.d, 13.0 / 6.0, max_relative = 1e-14);
        let root = ((13.0f64 / 12.0).powi(2) + 1000.0).sqrt();
        assert_relative_eq!(c.delta_plus, -13.0 / 12.0 + root, max_relative = 1e-14);
        assert_relative_eq!(c.delta_plus, 30.5580, epsilon = 1e-4);
        assert_relative_eq!(c.delta_minus, -32.7247, epsilon = 1e-4);
        assert_relative_eq!(c.fixed_point_mean, 0.0654493, epsilon = 1e-7);
        assert_relative_eq!(c.fixed_point_self, 0.0632456, epsilon = 1e-7);
        assert_relative_eq!(c.gamma_plus, (13.0f64 / 3.0).sqrt(), max_relative = 1e-14);
        assert_eq!(c.gamma_plus, -c.gamma_minus);
        assert!(c.delta_plus > 0.0 && c.delta_minus < 0.0);
    }

    #[test]
    fn symmetric_channels_collapse() {
        let mut p = ParamSet::reference();
        p.alpha_a = 3e-3;
        p.alpha_n = 3e-3;
        p.kappa_a = 2e-3;
        p.kappa_n = 2e-3;
        let c = derive_coefficients(&p);
        assert_relative_eq!(c.a, -3e-3 / 4e-3, max_relative = 1e-14);
        assert_relative_eq!(c.b, 1.0 / 2e-3, max_relative = 1e-14);
        assert_eq!(c.d, -2.0 * c.a);
    }

    #[test]
    fn generic_over_f32() {
        let c32 = derive_coefficients(&ParamSet::reference().cast::<f32>());
        assert!((c32.fixed_point_mean - 0.0654493).abs() < 1e-6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn valid_params() -> impl Strategy<Value = ParamSet<f64>> {
            (
                1e-4..1e-1f64,
                1e-4..1e-1f64,
                1e-4..1e-1f64,
                1e-4..1e-1f64,
                1e-3..10.0f64,
                0.0..10.0f64,
            )
                .prop_map(|(aa, an, ka, kn, phi, psi)| ParamSet {
                    alpha_a: aa,
                    alpha_n: an,
                    kappa_a: ka,
                    kappa_n: kn,
                    phi_run: phi,
                    psi,
                    ..ParamSet::reference()
                })
        }

        proptest! {
            #[test]
            fn coefficient_invariants(p in valid_params()) {
                let c = derive_coefficients(&validate_params(p).unwrap());
                prop_assert_eq!(c.d, -2.0 * c.a);
                prop_assert_eq!(c.c, c.e);
                prop_assert!(c.b > 0.0 && c.c > 0.0 && c.d > 0.0 && c.r > 0.0 && c.s_disc > 0.0);
                prop_assert!(c.delta_plus > 0.0 && c.delta_minus < 0.0);
                prop_assert_eq!(c.gamma_plus, -c.gamma_minus);
                let x = c.fixed_point_mean;
                let resid = c.b * x * x - c.d * x - c.c;
                prop_assert!(resid.abs() <= 1e-12 * x.abs().max(1.0), "residual {}", resid);
                let again = derive_coefficients(&p);
                prop_assert_eq!(format!("{:?}", again), format!("{:?}", c));
            }
        }
    }
}
