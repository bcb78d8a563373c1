//! Scale and noise schedules.
//!
//! The forward process is parameterized by a scale `s(t)` and a noise level
//! `σ(t)`. With the linear noise choice `σ(t) = t` the diffusion time and the
//! noise level coincide, so sampler grids are stored in σ units and used
//! directly as times.

use crate::error::{Error, Result};

/// Default interpolation exponent for sampler grids.
pub const DEFAULT_RHO: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    /// `s(t) = 1 / (1 + αt)`, `σ(t) = t`.
    MeanReverting { alpha: f64 },
    /// `s(t) = 1`, `σ(t) = t`: the plain generative process.
    Generative,
}

fn check_time(t: f64) -> Result<()> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::Domain(format!("diffusion time must be >= 0, got {t}")));
    }
    Ok(())
}

impl Schedule {
    pub fn mean_reverting(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::config("schedule.alpha", format!("must be > 0, got {alpha}")));
        }
        Ok(Schedule::MeanReverting { alpha })
    }

    /// Mean-reversion rate; zero for the generative schedule.
    pub fn alpha(&self) -> f64 {
        match *self {
            Schedule::MeanReverting { alpha } => alpha,
            Schedule::Generative => 0.0,
        }
    }

    pub fn s(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(match *self {
            Schedule::MeanReverting { alpha } => 1.0 / (1.0 + alpha * t),
            Schedule::Generative => 1.0,
        })
    }

    pub fn s_dot(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(match *self {
            Schedule::MeanReverting { alpha } => {
                let d = 1.0 + alpha * t;
                -alpha / (d * d)
            }
            Schedule::Generative => 0.0,
        })
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(t)
    }

    pub fn sigma_dot(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(1.0)
    }

    /// Mean-reversion ratio `k(t) = (1 - s) / s`.
    ///
    /// Evaluated in closed form (`αt`) rather than through `s` so that it is
    /// exact at every `t`.
    pub fn k(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(match *self {
            Schedule::MeanReverting { alpha } => alpha * t,
            Schedule::Generative => 0.0,
        })
    }

    /// `-ṡ / s²`, the coefficient of `μ` in the backward ODE. Equals `α`.
    pub fn mean_drift(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.alpha())
    }

    /// Drift and diffusion coefficients `(f, g)` of the forward SDE in x-space:
    /// `f = ṡ/s`, `g = s·sqrt(2σ̇σ)`.
    ///
    /// `g(0)` is returned as its limit 0 so integrators may start at `t = 0`.
    pub fn drift_diffusion(&self, t: f64) -> Result<(f64, f64)> {
        let s = self.s(t)?;
        let f = self.s_dot(t)? / s;
        let g = s * (2.0 * self.sigma_dot(t)? * self.sigma(t)?).sqrt();
        Ok((f, g))
    }
}

/// Descending noise levels from `σ_max` to `σ_min`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaGrid {
    values: Vec<f64>,
    rho: f64,
}

impl SigmaGrid {
    /// Power interpolation between `σ_max^{1/ρ}` and `σ_min^{1/ρ}` over `n`
    /// points, raised back to the `ρ` power.
    pub fn new(sigma_min: f64, sigma_max: f64, n: usize, rho: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::config("sampler.n_steps", format!("grid needs at least 2 points, got {n}")));
        }
        if !(sigma_min.is_finite() && sigma_min > 0.0) {
            return Err(Error::config("sampler.sigma_min", format!("must be > 0, got {sigma_min}")));
        }
        if !(sigma_max.is_finite() && sigma_max > sigma_min) {
            return Err(Error::config(
                "sampler.sigma_max",
                format!("must exceed sigma_min ({sigma_min}), got {sigma_max}"),
            ));
        }
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::config("sampler.rho", format!("must be > 0, got {rho}")));
        }
        let hi = sigma_max.powf(1.0 / rho);
        let lo = sigma_min.powf(1.0 / rho);
        let last = (n - 1) as f64;
        let mut values: Vec<f64> = (0..n)
            .map(|i| (hi + (i as f64 / last) * (lo - hi)).powf(rho))
            .collect();
        // Pin the endpoints against powf round-off.
        values[0] = sigma_max;
        values[n - 1] = sigma_min;
        Ok(SigmaGrid { values, rho })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sigma_max(&self) -> f64 {
        self.values[0]
    }

    pub fn sigma_min(&self) -> f64 {
        self.values[self.values.len() - 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn s_examples() {
        let mr = Schedule::mean_reverting(3.0).unwrap();
        assert_eq!(mr.s(0.0).unwrap(), 1.0);
        assert_relative_eq!(mr.s(2.0).unwrap(), 1.0 / 7.0, max_relative = 1e-15);
        assert_eq!(Schedule::Generative.s(5.0).unwrap(), 1.0);
    }

    #[test]
    fn k_examples() {
        let mr = Schedule::mean_reverting(3.0).unwrap();
        assert_eq!(mr.k(0.0).unwrap(), 0.0);
        assert_eq!(mr.k(2.0).unwrap(), 6.0);
        assert_eq!(Schedule::Generative.k(2.0).unwrap(), 0.0);
    }

    #[test]
    fn derivative_examples() {
        let mr = Schedule::mean_reverting(3.0).unwrap();
        assert_eq!(mr.sigma(0.5).unwrap(), 0.5);
        assert_eq!(mr.sigma_dot(0.5).unwrap(), 1.0);
        assert_relative_eq!(mr.s_dot(1.0).unwrap(), -0.1875, max_relative = 1e-15);
        for alpha in [0.3, 1.0, 3.0, 17.0] {
            let sched = Schedule::mean_reverting(alpha).unwrap();
            for t in [0.0, 0.1, 2.0, 50.0] {
                let s = sched.s(t).unwrap();
                assert_relative_eq!(-sched.s_dot(t).unwrap() / (s * s), alpha, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn drift_diffusion_examples() {
        let (f, _) = Schedule::Generative.drift_diffusion(4.0).unwrap();
        assert_eq!(f, 0.0);
        let mr = Schedule::mean_reverting(3.0).unwrap();
        let (f, g) = mr.drift_diffusion(1.0).unwrap();
        assert_relative_eq!(f, -0.75, max_relative = 1e-15);
        assert_relative_eq!(g, 0.25 * 2f64.sqrt(), max_relative = 1e-15);
        assert_eq!(mr.drift_diffusion(0.0).unwrap().1, 0.0);
    }

    #[test]
    fn negative_time_is_a_domain_error() {
        let mr = Schedule::mean_reverting(3.0).unwrap();
        assert!(matches!(mr.s(-1.0), Err(Error::Domain(_))));
        assert!(matches!(mr.k(-1e-9), Err(Error::Domain(_))));
        assert!(matches!(mr.drift_diffusion(-0.5), Err(Error::Domain(_))));
        assert!(matches!(mr.sigma(f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn grid_examples() {
        let g = SigmaGrid::new(0.001, 100.0, 2, 7.0).unwrap();
        assert_eq!(g.values(), &[100.0, 0.001]);
        let g = SigmaGrid::new(0.001, 100.0, 5, 7.0).unwrap();
        // (100^{1/7} + 0.5 (0.001^{1/7} - 100^{1/7}))^7, evaluated independently.
        assert_relative_eq!(g.values()[2], 2.688134, max_relative = 1e-6);
    }

    #[test]
    fn grid_rejects_bad_config() {
        assert!(SigmaGrid::new(0.001, 100.0, 1, 7.0).is_err());
        assert!(SigmaGrid::new(0.0, 100.0, 5, 7.0).is_err());
        assert!(SigmaGrid::new(1.0, 1.0, 5, 7.0).is_err());
        assert!(SigmaGrid::new(2.0, 1.0, 5, 7.0).is_err());
        assert!(SigmaGrid::new(0.1, 1.0, 5, 0.0).is_err());
    }

    /// σ(t)² = ∫₀ᵗ (g/s)² dξ, checked by composite Simpson quadrature.
    #[test]
    fn noise_level_matches_integrated_diffusion() {
        let sched = Schedule::mean_reverting(3.0).unwrap();
        let integrand = |xi: f64| {
            let (_, g) = sched.drift_diffusion(xi).unwrap();
            let s = sched.s(xi).unwrap();
            (g / s).powi(2)
        };
        for t in [0.1, 1.0, 10.0] {
            let n = 2000;
            let h = t / n as f64;
            let mut acc = integrand(0.0) + integrand(t);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * integrand(i as f64 * h);
            }
            let integral = acc * h / 3.0;
            let sigma = sched.sigma(t).unwrap();
            assert!(((integral - sigma * sigma) / (sigma * sigma)).abs() < 1e-4);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn k_and_s_are_consistent(alpha in 0.01f64..20.0, log_t in -4.0f64..3.0) {
                let t = 10f64.powf(log_t);
                let sched = Schedule::mean_reverting(alpha).unwrap();
                let s = sched.s(t).unwrap();
                let k = sched.k(t).unwrap();
                prop_assert!(((k * s + s) - 1.0).abs() < 1e-12);
            }

            #[test]
            fn schedules_are_monotone(alpha in 0.01f64..20.0, t1 in 0.0f64..100.0, dt in 1e-6f64..100.0) {
                let sched = Schedule::mean_reverting(alpha).unwrap();
                let t2 = t1 + dt;
                prop_assert!(sched.s(t1).unwrap() > sched.s(t2).unwrap());
                prop_assert!(sched.sigma(t1).unwrap() < sched.sigma(t2).unwrap());
                prop_assert!(sched.s(t2).unwrap() > 0.0 && sched.s(t2).unwrap() <= 1.0);
            }

            #[test]
            fn grids_are_strictly_decreasing(
                lo in 1e-4f64..1.0,
                span in 1.5f64..1000.0,
                n in 2usize..200,
                rho in 0.5f64..12.0,
            ) {
                let hi = lo * span;
                let g = SigmaGrid::new(lo, hi, n, rho).unwrap();
                prop_assert_eq!(g.values()[0], hi);
                prop_assert_eq!(g.values()[n - 1], lo);
                for w in g.values().windows(2) {
                    prop_assert!(w[0] > w[1]);
                }
                prop_assert!(g.values().iter().all(|&v| v >= lo && v <= hi));
            }
        }
    }
}
