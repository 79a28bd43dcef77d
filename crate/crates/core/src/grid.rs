//! Uniform time grids, grid quadrature and interpolation.

use serde::Serialize;
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("grid needs an even, nonzero number of intervals (got {0})")]
    IntervalCount(usize),
    #[error("horizon must be positive and finite")]
    Horizon,
}

/// Uniform grid on `[0, T]` with an even number of intervals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeGrid<T> {
    t_values: Vec<T>,
    step: T,
}

/// Default node count of the Riccati grid on `[0, T]`.
pub const DEFAULT_INTERVALS: usize = 10_000;

impl<T: Scalar> TimeGrid<T> {
    pub fn uniform(horizon: T, intervals: usize) -> Result<Self, GridError> {
        if intervals == 0 || !intervals.is_multiple_of(2) {
            return Err(GridError::IntervalCount(intervals));
        }
        if horizon <= T::zero() || !horizon.is_finite() {
            return Err(GridError::Horizon);
        }
        let n = T::count(intervals);
        let mut t_values: Vec<T> = (0..=intervals)
            .map(|k| horizon * T::count(k) / n)
            .collect();
        t_values[intervals] = horizon;
        Ok(TimeGrid {
            t_values,
            step: horizon / n,
        })
    }

    pub fn times(&self) -> &[T] {
        &self.t_values
    }

    pub fn step(&self) -> T {
        self.step
    }

    pub fn horizon(&self) -> T {
        self.t_values[self.t_values.len() - 1]
    }

    pub fn intervals(&self) -> usize {
        self.t_values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.t_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_values.is_empty()
    }

    /// Index of the interval containing `t` and the fractional position inside it.
    pub fn locate(&self, t: T) -> (usize, T) {
        let n = self.intervals();
        let t = t.max(T::zero()).min(self.horizon());
        let x = t / self.step;
        let k = x.floor().to_usize().unwrap_or(0).min(n - 1);
        let frac = (x - T::count(k)).max(T::zero()).min(T::one());
        (k, frac)
    }

    /// Linear interpolation of nodal `values` at time `t`.
    pub fn interpolate(&self, values: &[T], t: T) -> T {
        let (k, w) = self.locate(t);
        if w == T::zero() {
            values[k]
        } else if w == T::one() {
            values[k + 1]
        } else {
            values[k] + w * (values[k + 1] - values[k])
        }
    }
}

/// Composite Simpson rule over all nodes (even interval count).
pub fn simpson<T: Scalar>(values: &[T], step: T) -> T {
    let n = values.len() - 1;
    debug_assert!(n.is_multiple_of(2) && n > 0);
    let mut odd = T::zero();
    let mut even = T::zero();
    for (k, &v) in values.iter().enumerate().take(n).skip(1) {
        if k % 2 == 1 {
            odd = odd + v;
        } else {
            even = even + v;
        }
    }
    step / T::lit(3.0) * (values[0] + values[n] + T::lit(4.0) * odd + T::lit(2.0) * even)
}

/// Running integral `∫_0^{t_k} f` at every node.
///
/// Even nodes carry the composite Simpson value; odd nodes add a third-order
/// single-interval correction to the preceding even node.
pub fn cumulative_simpson<T: Scalar>(values: &[T], step: T) -> Vec<T> {
    let n = values.len();
    let mut out = vec![T::zero(); n];
    if n < 2 {
        return out;
    }
    if n == 2 {
        out[1] = step * (values[0] + values[1]) / T::lit(2.0);
        return out;
    }
    let third = step / T::lit(3.0);
    let twelfth = step / T::lit(12.0);
    let four = T::lit(4.0);
    let five = T::lit(5.0);
    let eight = T::lit(8.0);
    out[1] = twelfth * (five * values[0] + eight * values[1] - values[2]);
    for k in 2..n {
        if k % 2 == 0 {
            out[k] = out[k - 2] + third * (values[k - 2] + four * values[k - 1] + values[k]);
        } else {
            out[k] = out[k - 1] + twelfth * (five * values[k] + eight * values[k - 1] - values[k - 2]);
        }
    }
    out
}

/// Running integral from nodal values and first and second derivatives.
///
/// Each interval integrates the quintic Hermite interpolant exactly, so the
/// rule is sixth order and resolves layers a few steps wide.
pub fn cumulative_hermite<T: Scalar>(values: &[T], d1: &[T], d2: &[T], step: T) -> Vec<T> {
    let mut out = vec![T::zero(); values.len()];
    let c1 = step / T::lit(2.0);
    let c2 = step * step / T::lit(10.0);
    let c3 = step * step * step / T::lit(120.0);
    for k in 1..values.len() {
        out[k] = out[k - 1]
            + c1 * (values[k - 1] + values[k])
            + c2 * (d1[k - 1] - d1[k])
            + c3 * (d2[k - 1] + d2[k]);
    }
    out
}

/// Cubic Hermite value at the midpoint of an interval of length `h`.
#[inline]
pub fn hermite_mid<T: Scalar>(y0: T, y1: T, d0: T, d1: T, h: T) -> T {
    (y0 + y1) / T::lit(2.0) + h * (d0 - d1) / T::lit(8.0)
}

/// Cubic Hermite value at fraction `s ∈ [0, 1]` of an interval of length `h`.
#[inline]
pub fn hermite_at<T: Scalar>(y0: T, y1: T, d0: T, d1: T, h: T, s: T) -> T {
    let one = T::one();
    let (two, three) = (T::lit(2.0), T::lit(3.0));
    let s2 = s * s;
    let s3 = s2 * s;
    (two * s3 - three * s2 + one) * y0
        + (s3 - two * s2 + s) * h * d0
        + (three * s2 - two * s3) * y1
        + (s3 - s2) * h * d1
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn uniform_grid_endpoints() {
        let g = TimeGrid::uniform(1.0f64, 10_000).unwrap();
        assert_eq!(g.times()[0], 0.0);
        assert_eq!(g.horizon(), 1.0);
        assert_eq!(g.len(), 10_001);
        for w in g.times().windows(2) {
            assert!(w[1] > w[0]);
            assert!((w[1] - w[0] - g.step()).abs() <= 1e-12);
        }
    }

    #[test]
    fn odd_interval_count_rejected() {
        assert!(matches!(
            TimeGrid::uniform(1.0f64, 7),
            Err(GridError::IntervalCount(7))
        ));
        assert!(TimeGrid::uniform(0.0f64, 8).is_err());
    }

    #[test]
    fn simpson_exact_on_cubics() {
        let g = TimeGrid::uniform(2.0f64, 8).unwrap();
        let f: Vec<f64> = g.times().iter().map(|t| t * t * t - 2.0 * t + 1.0).collect();
        assert_relative_eq!(simpson(&f, g.step()), 4.0 - 4.0 + 2.0, max_relative = 1e-14);
    }

    #[test]
    fn cumulative_simpson_matches_antiderivative() {
        let g = TimeGrid::uniform(1.0f64, 200).unwrap();
        let f: Vec<f64> = g.times().iter().map(|t| (3.0 * t).exp()).collect();
        let c = cumulative_simpson(&f, g.step());
        for (k, t) in g.times().iter().enumerate() {
            let exact = ((3.0 * t).exp() - 1.0) / 3.0;
            assert!((c[k] - exact).abs() < 5e-8, "k={k} {} {}", c[k], exact);
        }
    }

    #[test]
    fn cumulative_hermite_resolves_steep_exponential() {
        let g = TimeGrid::uniform(1.0f64, 100).unwrap();
        let lam = 50.0;
        let f: Vec<f64> = g.times().iter().map(|t| (lam * (t - 1.0)).exp()).collect();
        let d1: Vec<f64> = f.iter().map(|v| lam * v).collect();
        let d2: Vec<f64> = f.iter().map(|v| lam * lam * v).collect();
        let c = cumulative_hermite(&f, &d1, &d2, g.step());
        let exact = (1.0 - (-lam).exp()) / lam;
        assert!((c[100] - exact).abs() < 1e-6 * exact, "{} {}", c[100], exact);
        let simpson_err = (cumulative_simpson(&f, g.step())[100] - exact).abs();
        assert!(simpson_err > 1e-4 * exact);
    }

    #[test]
    fn hermite_at_endpoints_and_midpoint() {
        let (y0, y1, d0, d1, h) = (1.0, 3.0, -2.0, 5.0, 0.5);
        assert_eq!(hermite_at(y0, y1, d0, d1, h, 0.0), y0);
        assert_eq!(hermite_at(y0, y1, d0, d1, h, 1.0), y1);
        assert_relative_eq!(hermite_at(y0, y1, d0, d1, h, 0.5), hermite_mid(y0, y1, d0, d1, h), max_relative = 1e-14);
    }

    #[test]
    fn interpolation_hits_nodes() {
        let g = TimeGrid::uniform(1.0f64, 4).unwrap();
        let v = [0.0, 1.0, 4.0, 9.0, 16.0];
        assert_eq!(g.interpolate(&v, 0.5), 4.0);
        assert_eq!(g.interpolate(&v, 1.0), 16.0);
        assert_relative_eq!(g.interpolate(&v, 0.375), 2.5, max_relative = 1e-12);
    }

    #[test]
    fn hermite_mid_exact_on_cubic() {
        let f = |t: f64| t * t * t;
        let df = |t: f64| 3.0 * t * t;
        let m = hermite_mid(f(1.0), f(1.5), df(1.0), df(1.5), 0.5);
        assert_relative_eq!(m, f(1.25), max_relative = 1e-14);
    }
}
