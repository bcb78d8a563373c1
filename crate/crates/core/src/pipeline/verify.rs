//! Self-checks against closed-form oracles, run by `emrdm verify`.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::denoiser::{GaussianOracle, GaussianOracleParams};
use crate::diffusion::{perturb, simulate_forward_sde, DiffusionTerm};
use crate::error::{Error, Result};
use crate::precondition::PreconditionParams;
use crate::rng;
use crate::sampler::{churn_with_noise, init_states_with_noise, sample, SamplerConfig};
use crate::schedule::Schedule;
use crate::tensor::ImageBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Kernel,
    Sde,
    Precondition,
    Sampler,
    Churn,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Kernel, Suite::Sde, Suite::Precondition, Suite::Sampler, Suite::Churn];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Kernel => "kernel",
            Suite::Sde => "sde",
            Suite::Precondition => "precondition",
            Suite::Sampler => "sampler",
            Suite::Churn => "churn",
        }
    }

    /// `all` expands to every suite.
    pub fn parse(name: &str) -> Result<Vec<Suite>> {
        if name == "all" {
            return Ok(Suite::ALL.to_vec());
        }
        Suite::ALL
            .iter()
            .find(|s| s.name() == name)
            .map(|s| vec![*s])
            .ok_or_else(|| Error::config("suite", format!("unknown suite `{name}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:<12} {:<48} error {:.3e} (tol {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.error,
            self.tolerance
        )
    }
}

fn moments(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// Perturbation-kernel moments over 10⁵ draws.
pub fn kernel_suite(seed: u64) -> Result<Vec<Check>> {
    let n = 100_000;
    let (x0v, muv) = (0.3, 0.5);
    let x0 = ImageBatch::filled(1, 1, 1, n, x0v);
    let mu = ImageBatch::filled(1, 1, 1, n, muv);
    let mut out = Vec::new();
    for alpha in [1.0, 3.0] {
        let sched = Schedule::mean_reverting(alpha)?;
        for t in [0.1, 0.5, 1.0, 3.0] {
            let mut r = rng::stream(seed, &[101, alpha as u64, (t * 10.0) as u64]);
            let x = perturb(&x0, &mu, &sched, t, &mut r)?;
            let (mean, std) = moments(x.as_array().iter().copied());
            out.push(Check {
                suite: "kernel",
                name: format!("mean alpha={alpha} t={t}"),
                error: rel(mean, x0v + sched.k(t)? * muv),
                tolerance: 0.02,
            });
            out.push(Check {
                suite: "kernel",
                name: format!("std alpha={alpha} t={t}"),
                error: rel(std, sched.sigma(t)?),
                tolerance: 0.02,
            });
        }
    }
    Ok(out)
}

/// Euler–Maruyama x-space moments against the scaled kernel.
pub fn sde_suite(seed: u64) -> Result<Vec<Check>> {
    let (n, steps, alpha, t, x0v, muv) = (100_000, 1000, 3.0, 1.0, 0.5, -0.4);
    let sched = Schedule::mean_reverting(alpha)?;
    let x0 = ImageBatch::filled(1, 1, 1, n, x0v);
    let mu = ImageBatch::filled(1, 1, 1, n, muv);
    let x = simulate_forward_sde(&x0, &mu, &sched, t, steps, DiffusionTerm::On, &mut rng::stream(seed, &[102]))?;
    let (mean, std) = moments(x.as_array().iter().copied());
    let s = sched.s(t)?;
    Ok(vec![
        Check {
            suite: "sde",
            name: format!("x-space mean alpha={alpha} t={t}"),
            error: rel(mean, s * (x0v + sched.k(t)? * muv)),
            tolerance: 0.03,
        },
        Check {
            suite: "sde",
            name: format!("x-space std alpha={alpha} t={t}"),
            error: rel(std, s * sched.sigma(t)?),
            tolerance: 0.03,
        },
    ])
}

/// Unit-variance network input and training target under correlated
/// Gaussian `(x0, μ)` with `μ` shared by every time point.
pub fn precondition_suite(seed: u64) -> Result<Vec<Check>> {
    let (sd, smu, cov): (f64, f64, f64) = (0.5, 0.6, 0.2);
    let n = 100_000;
    let mut out = Vec::new();
    let mut r = rng::stream(seed, &[103]);
    let slope = cov / (sd * sd);
    let resid = (smu * smu - slope * slope * sd * sd).sqrt();
    for k in [0.5, 3.0] {
        for sigma in [0.1, 1.0, 10.0] {
            for l in [1usize, 3] {
                let p = PreconditionParams::new(sd, smu, cov, l)?;
                let c = p.coefficients_at(k, sigma)?;
                let mut inputs = Vec::with_capacity(n);
                let mut targets = Vec::with_capacity(n);
                for _ in 0..n {
                    let x0 = sd * r.sample::<f64, _>(StandardNormal);
                    let mu = slope * x0 + resid * r.sample::<f64, _>(StandardNormal);
                    let mut mean_x = 0.0;
                    for li in 0..l {
                        let x = x0 + k * mu + sigma * r.sample::<f64, _>(StandardNormal);
                        if li == 0 {
                            inputs.push(c.c_in * x);
                        }
                        mean_x += x / l as f64;
                    }
                    targets.push((x0 - c.c_skip * mean_x) / c.c_out);
                }
                let (_, si) = moments(inputs.into_iter());
                let (_, st) = moments(targets.into_iter());
                out.push(Check {
                    suite: "precondition",
                    name: format!("input variance k={k} sigma={sigma} L={l}"),
                    error: (si * si - 1.0).abs(),
                    tolerance: 0.02,
                });
                out.push(Check {
                    suite: "precondition",
                    name: format!("target variance k={k} sigma={sigma} L={l}"),
                    error: (st * st - 1.0).abs(),
                    tolerance: 0.03,
                });
            }
        }
    }
    let sched = Schedule::mean_reverting(3.0)?;
    let p = PreconditionParams::new(sd, smu, cov, 1)?;
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let t = 10f64.powf(-3.0 + 5.0 * i as f64 / 99.0);
        let c = p.coefficients(&sched, t)?;
        worst = worst.max((p.loss_weight(&sched, t)? * c.c_out * c.c_out - 1.0).abs());
    }
    out.push(Check {
        suite: "precondition",
        name: "loss weight times c_out^2 on 100 levels".into(),
        error: worst,
        tolerance: 1e-12,
    });
    Ok(out)
}

/// Deterministic oracle sampling: first-order self-convergence and the
/// closed-form endpoint of the flow.
pub fn sampler_suite(seed: u64) -> Result<Vec<Check>> {
    let (alpha, m, muv, sd) = (3.0, 0.2, 0.4, 0.5);
    let sched = Schedule::mean_reverting(alpha)?;
    let oracle = GaussianOracle {
        params: GaussianOracleParams::new(m, sd)?,
        schedule: sched,
    };
    let mu = ImageBatch::filled(1, 1, 1, 1, muv);
    let base = SamplerConfig {
        s_churn: 0.0,
        seed,
        ..SamplerConfig::default()
    };
    let run = |n: usize| -> Result<f64> {
        let cfg = SamplerConfig { n_steps: n, ..base };
        let out = sample(&oracle, &mu, None, &sched, &cfg, &mut rng::stream(seed, &[104]), None)?;
        Ok(out.as_array()[[0, 0, 0, 0]])
    };
    let reference = run(512)?;
    let errors: Vec<f64> = [8, 16, 32, 64]
        .iter()
        .map(|&n| run(n).map(|v| (v - reference).abs()))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (i, n) in [8, 16, 32].iter().enumerate() {
        let ratio = errors[i] / errors[i + 1];
        out.push(Check {
            suite: "sampler",
            name: format!("error ratio N={n} vs N={}", 2 * n),
            error: (ratio - 2.0).abs(),
            tolerance: 0.3,
        });
    }
    let noise = ImageBatch::standard_normal(1, 1, 1, 1, &mut rng::stream(seed, &[104]));
    let start = init_states_with_noise(&mu, &sched, base.sigma_max, &noise)?.as_array()[[0, 0, 0, 0]];
    let y0 = start - sched.k(base.sigma_max)? * muv - m;
    let exact = m
        + sched.k(base.sigma_min)? * muv
        + y0 * ((sd * sd + base.sigma_min.powi(2)) / (sd * sd + base.sigma_max.powi(2))).sqrt();
    out.push(Check {
        suite: "sampler",
        name: "N=512 endpoint vs closed form".into(),
        error: rel(reference, exact),
        tolerance: 0.01,
    });
    Ok(out)
}

/// Kolmogorov–Smirnov distance between churned kernel samples and the
/// kernel at the raised level.
pub fn churn_suite(seed: u64) -> Result<Vec<Check>> {
    let (alpha, t, x0v, muv) = (3.0, 1.0, 0.3, 0.5);
    let n = 10_000;
    let sched = Schedule::mean_reverting(alpha)?;
    let x0 = ImageBatch::filled(1, 1, 1, n, x0v);
    let mu = ImageBatch::filled(1, 1, 1, n, muv);
    let mut out = Vec::new();
    for gamma in [0.2, 1.0] {
        let mut r = rng::stream(seed, &[105, (gamma * 10.0) as u64]);
        let x = perturb(&x0, &mu, &sched, t, &mut r)?;
        let noise = ImageBatch::standard_normal(1, 1, 1, n, &mut r);
        let (x_hat, t_hat) = churn_with_noise(&x, &mu, &sched, t, gamma, 1.0, &noise)?;
        let target = Normal::new(x0v + sched.k(t_hat)? * muv, sched.sigma(t_hat)?)
            .map_err(|e| Error::Domain(e.to_string()))?;
        out.push(Check {
            suite: "churn",
            name: format!("KS distance gamma={gamma}"),
            error: ks_distance(x_hat.as_array().iter().copied().collect(), |v| target.cdf(v)),
            tolerance: 0.02,
        });
    }
    Ok(out)
}

/// One-sample Kolmogorov–Smirnov statistic.
pub fn ks_distance(mut samples: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<Check>> {
    match suite {
        Suite::Kernel => kernel_suite(seed),
        Suite::Sde => sde_suite(seed),
        Suite::Precondition => precondition_suite(seed),
        Suite::Sampler => sampler_suite(seed),
        Suite::Churn => churn_suite(seed),
    }
}
