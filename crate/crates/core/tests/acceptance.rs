//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 4 7`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use emrdm::denoiser::{
    params, ConvNet, GaussianOracle, GaussianOracleParams, NetworkConfig, NetworkKind, Parameters,
    PreconditionedDenoiser, RawNetwork, Tfsa, TfsaConfig,
};
use emrdm::denoiser::tfsa::upsample_masks;
use emrdm::diffusion::{ode_rhs, perturb, perturb_with_noise, simulate_forward_sde, DiffusionState, DiffusionTerm};
use emrdm::error::Result;
use emrdm::pipeline::checkpoint::Checkpoint;
use emrdm::pipeline::config::RunConfig;
use emrdm::pipeline::dataset::{gen_data, DatasetSpec};
use emrdm::pipeline::run::{evaluate, sample_path, sample_test, train, LAST_CHECKPOINT};
use emrdm::precondition::PreconditionParams;
use emrdm::rng;
use emrdm::sampler::{churn, sample, SamplerConfig};
use emrdm::schedule::Schedule;
use emrdm::tensor::ImageBatch;
use ndarray::{array, Array3, Array4};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ok<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn within(elapsed: Duration, limit_s: u64, what: &str) -> std::result::Result<(), String> {
    ensure(
        elapsed < Duration::from_secs(limit_s),
        format!("{what} took {:.1}s (limit {limit_s}s)", elapsed.as_secs_f64()),
    )
}

fn kernel_moments() -> Outcome {
    let start = Instant::now();
    let n = 100_000;
    let (x0v, muv) = (0.3, 0.5);
    let x0 = ImageBatch::filled(1, 1, 1, n, x0v);
    let mu = ImageBatch::filled(1, 1, 1, n, muv);
    let mut worst: f64 = 0.0;
    for alpha in [1.0, 3.0] {
        let sched = ok(Schedule::mean_reverting(alpha))?;
        for (j, t) in [0.1, 0.5, 1.0, 3.0].into_iter().enumerate() {
            let x = ok(perturb(&x0, &mu, &sched, t, &mut rng::stream(11, &[alpha as u64, j as u64])))?;
            let (mean, std) = moments(x.as_array().as_slice().unwrap());
            // Closed form of the kernel under s = 1/(1+αt): mean x0 + αtμ, std t.
            let mean_err = (mean - (x0v + alpha * t * muv)).abs() / (x0v + alpha * t * muv);
            let std_err = (std - t).abs() / t;
            ensure(mean_err < 0.02, format!("mean off by {mean_err:.4} at alpha={alpha} t={t}"))?;
            ensure(std_err < 0.02, format!("std off by {std_err:.4} at alpha={alpha} t={t}"))?;
            worst = worst.max(mean_err).max(std_err);
        }
    }
    within(start.elapsed(), 10, "kernel suite")?;
    Ok(format!("worst relative error {worst:.2e}, {:.2}s", start.elapsed().as_secs_f64()))
}

fn sde_equivalence() -> Outcome {
    let start = Instant::now();
    let (alpha, t, x0v, muv) = (3.0, 1.0, 0.5, -0.4);
    let sched = ok(Schedule::mean_reverting(alpha))?;
    let n = 100_000;
    let x0 = ImageBatch::filled(1, 1, 1, n, x0v);
    let mu = ImageBatch::filled(1, 1, 1, n, muv);
    let x = ok(simulate_forward_sde(&x0, &mu, &sched, t, 1000, DiffusionTerm::On, &mut rng::stream(12, &[])))?;
    let (mean, std) = moments(x.as_array().as_slice().unwrap());
    let s = 1.0 / (1.0 + alpha * t);
    let mean_ref = s * (x0v + alpha * t * muv);
    let std_ref = s * t;
    let mean_err = (mean - mean_ref).abs() / mean_ref.abs();
    let std_err = (std - std_ref).abs() / std_ref;
    ensure(mean_err < 0.03, format!("mean {mean} vs {mean_ref}"))?;
    ensure(std_err < 0.03, format!("std {std} vs {std_ref}"))?;
    within(start.elapsed(), 60, "SDE suite")?;
    Ok(format!(
        "mean err {mean_err:.2e}, std err {std_err:.2e}, {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn precondition_variance() -> Outcome {
    let (sd, smu, cov): (f64, f64, f64) = (0.5, 0.6, 0.2);
    // μ = b·x0 + r·z reproduces Var μ = σ_mu² and Cov(x0, μ) = σ_cov.
    let b = cov / (sd * sd);
    let r = (smu * smu - b * b * sd * sd).sqrt();
    let n = 100_000;
    let mut g = rng::stream(13, &[]);
    let (mut worst_in, mut worst_target): (f64, f64) = (0.0, 0.0);
    for k in [0.5, 3.0] {
        for sigma in [0.1, 1.0, 10.0] {
            for l in [1usize, 3] {
                let c = ok(ok(PreconditionParams::new(sd, smu, cov, l))?.coefficients_at(k, sigma))?;
                let mut inputs = Vec::with_capacity(n);
                let mut targets = Vec::with_capacity(n);
                for _ in 0..n {
                    let x0 = sd * g.sample::<f64, _>(StandardNormal);
                    let mu = b * x0 + r * g.sample::<f64, _>(StandardNormal);
                    let obs: Vec<f64> = (0..l).map(|_| x0 + k * mu + sigma * g.sample::<f64, _>(StandardNormal)).collect();
                    inputs.push(c.c_in * obs[0]);
                    let pooled = obs.iter().sum::<f64>() / l as f64;
                    targets.push((x0 - c.c_skip * pooled) / c.c_out);
                }
                let vi = moments(&inputs).1.powi(2);
                let vt = moments(&targets).1.powi(2);
                ensure((vi - 1.0).abs() < 0.02, format!("input variance {vi} at k={k} sigma={sigma} L={l}"))?;
                ensure((vt - 1.0).abs() < 0.03, format!("target variance {vt} at k={k} sigma={sigma} L={l}"))?;
                worst_in = worst_in.max((vi - 1.0).abs());
                worst_target = worst_target.max((vt - 1.0).abs());
            }
        }
    }
    Ok(format!("worst |Var-1|: input {worst_in:.2e}, target {worst_target:.2e}"))
}

/// Elementwise toy raw network used to exercise every preconditioning path.
struct Toy;

impl RawNetwork for Toy {
    fn forward(&self, inputs: &ImageBatch, c_noise: f64, _cond: Option<&ImageBatch>) -> Result<ImageBatch> {
        Ok(inputs.map(|v| v.tanh() + 0.1 * c_noise))
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * b.abs().max(1.0)
}

fn edm_reduction() -> Outcome {
    let sd = 0.5;
    let sched = Schedule::Generative;
    let p = ok(PreconditionParams::generative(sd, 1))?;
    let edm = |sigma: f64| {
        let norm = (sigma * sigma + sd * sd).sqrt();
        (1.0 / norm, sd * sd / norm.powi(2), sigma * sd / norm, sigma.ln() / 4.0)
    };
    let mut compared = 0;
    for sigma in [0.002, 0.05, 0.3, 1.0, 4.0, 80.0] {
        let c = ok(p.coefficients(&sched, sigma))?;
        let (c_in, c_skip, c_out, c_noise) = edm(sigma);
        for (name, a, b) in [("c_in", c.c_in, c_in), ("c_skip", c.c_skip, c_skip), ("c_out", c.c_out, c_out), ("c_noise", c.c_noise, c_noise)] {
            ensure(close(a, b), format!("{name} at sigma={sigma}: {a} vs {b}"))?;
            compared += 1;
        }

        let mut g = rng::stream(14, &[compared as u64]);
        let x0 = ImageBatch::standard_normal(1, 2, 4, 4, &mut g);
        let mu = ImageBatch::standard_normal(1, 2, 4, 4, &mut g);
        let eps = ImageBatch::standard_normal(1, 2, 4, 4, &mut g);
        let x = ok(perturb_with_noise(&x0, &mu, &sched, sigma, &eps))?;
        for ((a, x0v), e) in x.as_array().iter().zip(x0.as_array()).zip(eps.as_array()) {
            ensure(close(*a, x0v + sigma * e), format!("perturbation at sigma={sigma}"))?;
            compared += 1;
        }

        let den = PreconditionedDenoiser { net: &Toy, params: p, schedule: sched };
        let d = ok(emrdm::denoiser::Denoiser::denoise(&den, &x, &mu, None, sigma))?;
        let rhs = ok(ode_rhs(&ok(DiffusionState::new(x.clone(), mu.clone(), sigma))?, &d, &sched))?;
        for ((dv, r), xv) in d.as_array().iter().zip(rhs.as_array()).zip(x.as_array()) {
            let d_ref = c_skip * xv + c_out * ((c_in * xv).tanh() + 0.1 * c_noise);
            ensure(close(*dv, d_ref), format!("denoiser at sigma={sigma}: {dv} vs {d_ref}"))?;
            ensure(close(*r, (xv - d_ref) / sigma), format!("ODE rhs at sigma={sigma}"))?;
            compared += 2;
        }
    }

    // Deterministic Euler sampler against a straight EDM loop.
    let cfg = SamplerConfig {
        n_steps: 12,
        s_churn: 0.0,
        sigma_max: 80.0,
        sigma_min: 0.002,
        ..SamplerConfig::default()
    };
    let mu = ImageBatch::zeros(1, 2, 4, 4);
    let den = PreconditionedDenoiser { net: &Toy, params: p, schedule: sched };
    let out = ok(sample(&den, &mu, None, &sched, &cfg, &mut rng::stream(15, &[]), None))?;
    let mut x: Vec<f64> = ImageBatch::standard_normal(1, 2, 4, 4, &mut rng::stream(15, &[]))
        .as_array()
        .iter()
        .map(|e| cfg.sigma_max * e)
        .collect();
    let n = cfg.n_steps as f64;
    let (hi, lo) = (cfg.sigma_max.powf(1.0 / 7.0), cfg.sigma_min.powf(1.0 / 7.0));
    let ts: Vec<f64> = (0..=cfg.n_steps).map(|i| (hi + i as f64 / n * (lo - hi)).powf(7.0)).collect();
    for i in 0..cfg.n_steps {
        let (t, t_next) = (ts[i], ts[i + 1]);
        let (c_in, c_skip, c_out, c_noise) = edm(t);
        for v in x.iter_mut() {
            let d = c_skip * *v + c_out * ((c_in * *v).tanh() + 0.1 * c_noise);
            *v += (t_next - t) * (*v - d) / t;
        }
    }
    for (a, b) in out.as_array().iter().zip(&x) {
        ensure(close(*a, *b), format!("sampler output {a} vs EDM reference {b}"))?;
        compared += 1;
    }
    Ok(format!("{compared} quantities agree within 1e-10"))
}

fn oracle_sampling() -> Outcome {
    let (alpha, m, muv, sd) = (3.0, 0.2, 0.4, 0.5);
    let sched = ok(Schedule::mean_reverting(alpha))?;
    let oracle = GaussianOracle {
        params: ok(GaussianOracleParams::new(m, sd))?,
        schedule: sched,
    };
    let mu = ImageBatch::scalar(muv);
    let run = |n_steps: usize| -> std::result::Result<f64, String> {
        let cfg = SamplerConfig { n_steps, s_churn: 0.0, ..SamplerConfig::default() };
        let out = ok(sample(&oracle, &mu, None, &sched, &cfg, &mut rng::stream(16, &[]), None))?;
        Ok(out.as_array()[[0, 0, 0, 0]])
    };
    let reference = run(512)?;
    let errs: Vec<f64> = [8, 16, 32, 64]
        .into_iter()
        .map(|n| run(n).map(|v| (v - reference).abs()))
        .collect::<std::result::Result<_, _>>()?;
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
    for (r, n) in ratios.iter().zip([8, 16, 32]) {
        ensure((1.7..=2.3).contains(r), format!("error ratio N={n}/{} is {r:.3}", 2 * n))?;
    }
    // Exact flow: y = x̃ − αtμ − m scales with √(σ_d² + t²).
    let cfg = SamplerConfig::default();
    let eps = ImageBatch::standard_normal(1, 1, 1, 1, &mut rng::stream(16, &[])).as_array()[[0, 0, 0, 0]];
    let (t0, t1) = (cfg.sigma_max, cfg.sigma_min);
    let y0 = t0 * eps - m;
    let exact = m + alpha * t1 * muv + y0 * ((sd * sd + t1 * t1) / (sd * sd + t0 * t0)).sqrt();
    let rel = (reference - exact).abs() / exact.abs();
    ensure(rel < 0.01, format!("N=512 endpoint {reference} vs analytic {exact}"))?;
    Ok(format!(
        "ratios {:.3}/{:.3}/{:.3}, endpoint rel err {rel:.2e}",
        ratios[0], ratios[1], ratios[2]
    ))
}

fn ks(mut v: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

fn churn_marginal() -> Outcome {
    let (alpha, t, x0v, muv) = (2.0, 1.5, -0.1, 0.6);
    let sched = ok(Schedule::mean_reverting(alpha))?;
    let n = 10_000;
    let x0 = ImageBatch::filled(1, 1, 1, n, x0v);
    let mu = ImageBatch::filled(1, 1, 1, n, muv);
    let mut out = Vec::new();
    for gamma in [0.2, 1.0] {
        let mut g = rng::stream(17, &[(gamma * 10.0) as u64]);
        let x = ok(perturb(&x0, &mu, &sched, t, &mut g))?;
        let (x_hat, t_hat) = ok(churn(&x, &mu, &sched, t, gamma, 1.0, &mut g))?;
        ensure((t_hat - t * (1.0 + gamma)).abs() < 1e-12, format!("t_hat {t_hat}"))?;
        let target = Normal::new(x0v + alpha * t_hat * muv, t_hat).map_err(|e| e.to_string())?;
        let d = ks(x_hat.as_array().iter().copied().collect(), |v| target.cdf(v));
        ensure(d < 0.02, format!("KS {d:.4} at gamma={gamma}"))?;
        out.push(format!("gamma={gamma}: KS {d:.4}"));
    }
    Ok(out.join(", "))
}

fn loss_weight_identity() -> Outcome {
    let sched = ok(Schedule::mean_reverting(1.5))?;
    let mut worst: f64 = 0.0;
    for (sd, smu, cov, l) in [(0.5, 0.6, 0.2, 1), (0.5, 0.6, 0.2, 3), (1.0, 0.0, 0.0, 1)] {
        let p = ok(PreconditionParams::new(sd, smu, cov, l))?;
        for i in 0..100 {
            let sigma = 10f64.powf(-3.0 + 5.0 * i as f64 / 99.0);
            let c = ok(p.coefficients(&sched, sigma))?;
            let lambda = ok(p.loss_weight(&sched, sigma))?;
            worst = worst.max((lambda * c.c_out * c.c_out - 1.0).abs());
        }
    }
    ensure(worst < 1e-14, format!("|lambda c_out^2 - 1| reaches {worst:e}"))?;
    Ok(format!("max |lambda c_out^2 - 1| = {worst:.1e} over 300 levels"))
}

fn tfsa_fusion() -> Outcome {
    let mut g = rng::stream(18, &[]);
    let tfsa = ok(Tfsa::new(TfsaConfig { heads: 2, key_dim: 4, channels: 6 }, &mut g))?;
    let maps: Vec<Array3<f64>> = (0..4)
        .map(|_| Array3::from_shape_simple_fn((6, 4, 4), || 3.0 * g.sample::<f64, _>(StandardNormal)))
        .collect();
    let (_, masks, _) = ok(tfsa.forward_maps(&maps))?;
    let row_err = masks
        .sum_axis(ndarray::Axis(1))
        .iter()
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max);
    ensure(row_err < 1e-6, format!("mask rows sum off by {row_err:e}"))?;
    let mut up_err: f64 = 0.0;
    for (h, w) in [(8, 8), (16, 16), (12, 20)] {
        let up = upsample_masks(&masks, h, w);
        let e = up.sum_axis(ndarray::Axis(1)).iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
        up_err = up_err.max(e);
    }
    ensure(up_err < 1e-5, format!("upsampled masks sum off by {up_err:e}"))?;

    // Single head, unit query, key weight ln3/4: scores differ by ln 3 between
    // values 1 and 5, so masks are 1/4 and 3/4 and the fused value is 4.
    let hand = Tfsa {
        cfg: TfsaConfig { heads: 1, key_dim: 1, channels: 1 },
        query: array![[1.0]],
        key_proj: Array3::from_elem((1, 1, 1), 3f64.ln() / 4.0),
    };
    let (fused, m) = ok(hand.forward_location(array![[1.0], [5.0]].view()))?;
    ensure((m[[0, 0]] - 0.25).abs() < 1e-15 && (m[[0, 1]] - 0.75).abs() < 1e-15, format!("masks {m}"))?;
    ensure((fused[0] - 4.0).abs() < 1e-14, format!("fused {}", fused[0]))?;
    let mut hm = Array4::zeros((1, 2, 1, 1));
    hm[[0, 0, 0, 0]] = 0.25;
    hm[[0, 1, 0, 0]] = 0.75;
    let skips = [Array3::from_elem((2, 4, 4), 2.0), Array3::from_elem((2, 4, 4), 4.0)];
    let (o, _) = ok(emrdm::denoiser::tfsa::fuse_skips(&hm, &skips))?;
    ensure(o.iter().all(|v| *v == 3.5), "skip fusion is not 3.5")?;
    Ok(format!("row err {row_err:.1e}, upsampled err {up_err:.1e}, hand example 4.0 / 3.5"))
}

fn gradient_check() -> Outcome {
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for kind in [NetworkKind::Mono, NetworkKind::Multi] {
        let mut g = rng::stream(19, &[kind as u64]);
        let cfg = NetworkConfig { kind, image_channels: 4, cond_channels: 0, width: 4, heads: 2, key_dim: 3 };
        let mut net = ok(ConvNet::new(cfg, &mut g))?;
        let x = ImageBatch::standard_normal(1, 4, 8, 8, &mut g);
        let r = ImageBatch::standard_normal(1, 4, 8, 8, &mut g);
        let c_noise = -0.3;
        let loss = |n: &ConvNet| -> f64 {
            let y = n.forward(&x, c_noise, None).unwrap();
            y.as_array().iter().zip(r.as_array()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = ok(net.forward_train(&x, c_noise, None))?;
        let mut grad = net.zeros_like();
        net.backward(&cache, &r, &mut grad);
        let analytic: Vec<(String, f64)> = params::collect(&grad)
            .into_iter()
            .flat_map(|t| {
                let name = t.name;
                t.values.into_iter().enumerate().map(move |(i, v)| (format!("{name}[{i}]"), v))
            })
            .collect();
        let h = 1e-5;
        for (target, (name, a)) in analytic.iter().enumerate() {
            let bump = |net: &mut ConvNet, delta: f64| {
                let mut pos = 0;
                net.visit_mut("", &mut |_, _, values| {
                    if (pos..pos + values.len()).contains(&target) {
                        values[target - pos] += delta;
                    }
                    pos += values.len();
                });
            };
            bump(&mut net, h);
            let up = loss(&net);
            bump(&mut net, -2.0 * h);
            let down = loss(&net);
            bump(&mut net, h);
            let numeric = (up - down) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            ensure(rel < 1e-3, format!("{kind:?} {name}: analytic {a} vs numeric {numeric}"))?;
            worst = worst.max(rel);
            checked += 1;
        }
    }
    Ok(format!("{checked} parameters, worst relative error {worst:.1e}"))
}

fn run_config(root: &Path, overrides: &[(&str, &str)]) -> std::result::Result<RunConfig, String> {
    let mut all: Vec<(String, String)> = vec![
        ("paths.data_dir".into(), root.join("data").display().to_string()),
        ("network.kind".into(), "multi".into()),
    ];
    all.extend(overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    ok(RunConfig::from_toml_with("", &all, None))
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    // Cloudy frames reach the network only through the diffusion state, so
    // the schedule comparison isolates the mean-reverting drift.
    let common = [
        ("network.width", "16"),
        ("network.use_cloudy_cond", "false"),
        ("trainer.learning_rate", "2e-3"),
        ("trainer.epochs", "40"),
    ];
    let base = run_config(dir.path(), &common)?;
    ensure(base.data.n_train == 64 && base.data.n_test == 16 && base.data.height == 32, "dataset size")?;
    ok(gen_data(&DatasetSpec::from_config(&base), &base.paths.data_dir))?;
    let mut psnr = Vec::new();
    let mut cloudy = 0.0;
    for (name, extra) in [
        ("l3", vec![("precondition.seq_len", "3")]),
        ("l1", vec![]),
        ("generative", vec![("schedule.kind", "generative")]),
    ] {
        let run_dir = dir.path().join(name).display().to_string();
        let mut o = common.to_vec();
        o.extend(extra);
        o.push(("paths.run_dir", &run_dir));
        let cfg = run_config(dir.path(), &o)?;
        ok(train(&cfg))?;
        ok(sample_test(&cfg, None))?;
        let (restored, baseline) = ok(evaluate(&cfg))?;
        psnr.push(restored.summary().psnr);
        cloudy = baseline.summary().psnr;
    }
    let (l3, l1, gen) = (psnr[0], psnr[1], psnr[2]);
    let detail = format!(
        "PSNR L=3 {l3:.2} dB, L=1 {l1:.2} dB, generative {gen:.2} dB, cloudy {cloudy:.2} dB, {:.0}s",
        start.elapsed().as_secs_f64()
    );
    ensure(l3 > cloudy, format!("(a) model does not beat the cloudy baseline: {detail}"))?;
    ensure(l3 >= l1, format!("(b) L=3 below L=1: {detail}"))?;
    ensure(l1 > gen, format!("(c) mean-reverting below generative: {detail}"))?;
    within(start.elapsed(), 1800, "end-to-end run")?;
    Ok(detail)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let small = [
        ("data.n_train", "8"),
        ("data.n_test", "2"),
        ("data.height", "16"),
        ("data.width", "16"),
        ("precondition.seq_len", "3"),
        ("network.width", "4"),
        ("trainer.batch_size", "8"),
        ("trainer.epochs", "10"),
        ("trainer.val_images", "2"),
        ("trainer.learning_rate", "1e-3"),
        ("sampler.s_churn", "0"),
    ];
    let cfg0 = run_config(dir.path(), &small)?;
    ok(gen_data(&DatasetSpec::from_config(&cfg0), &cfg0.paths.data_dir))?;
    let mut bytes = Vec::new();
    let mut samples = Vec::new();
    for run in ["a", "b"] {
        let run_dir = dir.path().join(run).display().to_string();
        let mut o = small.to_vec();
        o.push(("paths.run_dir", &run_dir));
        let cfg = run_config(dir.path(), &o)?;
        ok(train(&cfg))?;
        let last = cfg.paths.run_dir.join(LAST_CHECKPOINT);
        let ck = ok(Checkpoint::load(&last))?;
        ensure(ck.header.step == 10, format!("trained {} steps, expected 10", ck.header.step))?;
        bytes.push(std::fs::read(&last).map_err(|e| e.to_string())?);
        for _ in 0..2 {
            ok(sample_test(&cfg, None))?;
            samples.push(std::fs::read(sample_path(&cfg.paths.run_dir, 1)).map_err(|e| e.to_string())?);
        }

        let copy = dir.path().join(format!("{run}-copy.emrd"));
        ok(ck.save(&copy))?;
        let reloaded = ok(Checkpoint::load(&copy))?;
        ensure(reloaded == ck, "reloaded checkpoint differs")?;
        let a = params::collect(&ck.trainer.net);
        let b = params::collect(&reloaded.trainer.net);
        ensure(
            a.iter().zip(&b).all(|(x, y)| x.values.iter().zip(&y.values).all(|(p, q)| p.to_bits() == q.to_bits())),
            "parameters not bit-exact after reload",
        )?;
        ensure(std::fs::read(&copy).map_err(|e| e.to_string())? == bytes[bytes.len() - 1], "re-saved checkpoint differs")?;
    }
    ensure(bytes[0] == bytes[1], "two seeded trainings produced different checkpoints")?;
    ensure(samples.windows(2).all(|w| w[0] == w[1]), "deterministic sampling is not reproducible")?;
    Ok(format!("10-step training, sampling and checkpoint reload are bit-identical ({} byte checkpoint)", bytes[0].len()))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 11] = [
        (1, "kernel moments", kernel_moments),
        (2, "SDE vs kernel", sde_equivalence),
        (3, "preconditioning variance", precondition_variance),
        (4, "EDM reduction", edm_reduction),
        (5, "Gaussian-oracle sampling", oracle_sampling),
        (6, "churn marginal", churn_marginal),
        (7, "loss weight identity", loss_weight_identity),
        (8, "attention fusion", tfsa_fusion),
        (9, "gradient check", gradient_check),
        (10, "end-to-end ablation directions", end_to_end),
        (11, "determinism", determinism),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
