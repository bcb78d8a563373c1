//! Run configuration: one TOML file with `[schedule]`, `[precondition]`,
//! `[sampler]`, `[trainer]`, `[data]`, `[network]` and `[paths]` sections
//! plus a top-level `seed`.
//!
//! Overrides use dotted keys (`sampler.n_steps`); the CLI spells them as
//! `--sampler.n-steps`. The `EMRDM_SEED` environment variable replaces the
//! seed from the file, and explicit overrides win over both.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{NetworkConfig, NetworkKind};
use crate::error::{Error, Result};
use crate::precondition::PreconditionParams;
use crate::sampler::SamplerConfig;
use crate::schedule::{Schedule, DEFAULT_RHO};
use crate::trainer::TrainConfig;

pub const SEED_ENV: &str = "EMRDM_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    MeanReverting,
    Generative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub alpha: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            kind: ScheduleKind::MeanReverting,
            alpha: 1.0,
        }
    }
}

impl ScheduleSection {
    pub fn build(&self) -> Result<Schedule> {
        match self.kind {
            ScheduleKind::MeanReverting => Schedule::mean_reverting(self.alpha),
            ScheduleKind::Generative => Ok(Schedule::Generative),
        }
    }
}

/// Statistics left unset are taken from the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreconditionSection {
    /// Number of leading time points the model consumes.
    pub seq_len: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_data: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_mu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_cov: Option<f64>,
}

impl Default for PreconditionSection {
    fn default() -> Self {
        PreconditionSection {
            seq_len: 1,
            sigma_data: None,
            sigma_mu: None,
            sigma_cov: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub n_steps: usize,
    pub s_churn: f64,
    pub s_tmin: f64,
    pub s_tmax: f64,
    pub s_noise: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    /// Write a per-step trace CSV next to the samples.
    pub trace: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        SamplerSection {
            n_steps: d.n_steps,
            s_churn: d.s_churn,
            s_tmin: d.s_tmin,
            s_tmax: d.s_tmax,
            s_noise: d.s_noise,
            sigma_min: d.sigma_min,
            sigma_max: d.sigma_max,
            rho: DEFAULT_RHO,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub p_mean: f64,
    pub p_std: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    /// Training images re-sampled each epoch to track validation PSNR.
    pub val_images: usize,
    /// Continue from `last.emrd` in the run directory when present.
    pub resume: bool,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainerSection {
            p_mean: d.p_mean,
            p_std: d.p_std,
            batch_size: d.batch_size,
            epochs: d.epochs,
            learning_rate: d.learning_rate,
            grad_clip: d.grad_clip,
            val_images: 8,
            resume: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_train: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    /// Cloudy observations generated per target.
    pub seq_len: usize,
    pub cloud_density: f64,
    pub channels: usize,
    pub aux_channels: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_train: 64,
            n_test: 16,
            height: 32,
            width: 32,
            seq_len: 3,
            cloud_density: 0.5,
            channels: 3,
            aux_channels: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkKindName {
    Mono,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub kind: NetworkKindName,
    pub width: usize,
    pub heads: usize,
    pub key_dim: usize,
    /// Feed the cloudy observations to the network alongside the noisy state.
    pub use_cloudy_cond: bool,
    /// Feed the auxiliary modality to the network.
    pub use_aux: bool,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            kind: NetworkKindName::Mono,
            width: 32,
            heads: 4,
            key_dim: 8,
            use_cloudy_cond: true,
            use_aux: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleSection,
    pub precondition: PreconditionSection,
    pub sampler: SamplerSection,
    pub trainer: TrainerSection,
    pub data: DataSection,
    pub network: NetworkSection,
    pub paths: PathsSection,
}


/// Every accepted dotted key, derived from a fully populated config.
pub fn known_keys() -> Vec<String> {
    let mut full = RunConfig::default();
    full.precondition.sigma_data = Some(1.0);
    full.precondition.sigma_mu = Some(1.0);
    full.precondition.sigma_cov = Some(0.0);
    let value = toml::Value::try_from(&full).expect("config serializes");
    let mut keys = Vec::new();
    collect_keys(&value, "", &mut keys);
    keys
}

fn collect_keys(value: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    if let toml::Value::Table(t) = value {
        for (k, v) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            if v.is_table() {
                collect_keys(v, &key, out);
            } else {
                out.push(key);
            }
        }
    }
}

fn check_keys(value: &toml::Value, prefix: &str, known: &[String]) -> Result<()> {
    if let toml::Value::Table(t) = value {
        for (k, v) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            if v.is_table() {
                if !known.iter().any(|n| n.starts_with(&format!("{key}."))) {
                    return Err(Error::config(key, "unknown section"));
                }
                check_keys(v, &key, known)?;
            } else if !known.contains(&key) {
                return Err(Error::config(key, "unknown key"));
            }
        }
    }
    Ok(())
}

/// Parses a scalar override: TOML syntax first (`3`, `0.5`, `true`,
/// `"text"`), otherwise the raw text as a string.
fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut table = root;
    for p in parts {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .expect("checked against known keys");
    }
    table.insert(last.to_string(), value);
}

/// Resolves a user-supplied key (dashes allowed) to a canonical dotted key.
/// A bare key is accepted when exactly one section defines it.
pub fn resolve_key(raw: &str) -> Result<String> {
    let key = raw.replace('-', "_");
    let known = known_keys();
    if known.contains(&key) {
        return Ok(key);
    }
    if !key.contains('.') {
        let matches: Vec<&String> = known
            .iter()
            .filter(|k| k.rsplit('.').next() == Some(key.as_str()))
            .collect();
        match matches.len() {
            1 => return Ok(matches[0].clone()),
            0 => {}
            _ => {
                let names: Vec<&str> = matches.iter().map(|s| s.as_str()).collect();
                return Err(Error::config(raw, format!("ambiguous key; use one of {}", names.join(", "))));
            }
        }
    }
    Err(Error::config(raw, "unknown key"))
}

impl RunConfig {
    /// Parses TOML text, rejecting unknown keys by name.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[], None)
    }

    /// Parses TOML text and applies an optional seed (from the environment)
    /// and then the explicit `key = value` overrides.
    pub fn from_toml_with(text: &str, overrides: &[(String, String)], env_seed: Option<&str>) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::config("<file>", e.message().to_string()))?;
        let known = known_keys();
        check_keys(&toml::Value::Table(table.clone()), "", &known)?;
        if let Some(raw) = env_seed {
            let seed: u64 = raw
                .trim()
                .parse()
                .map_err(|_| Error::config("seed", format!("{SEED_ENV} must be an unsigned integer, got `{raw}`")))?;
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        for (raw_key, raw_value) in overrides {
            let key = resolve_key(raw_key)?;
            set_dotted(&mut table, &key, parse_scalar(raw_value));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(first_key(&e), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let env = std::env::var(SEED_ENV).ok();
        Self::from_toml_with(&text, overrides, env.as_deref())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.sampler_config().validate()?;
        let d = &self.data;
        if d.n_train == 0 {
            return Err(Error::config("data.n_train", "must be >= 1"));
        }
        if d.seq_len == 0 {
            return Err(Error::config("data.seq_len", "must be >= 1"));
        }
        if d.channels == 0 {
            return Err(Error::config("data.channels", "must be >= 1"));
        }
        for (key, v) in [("data.height", d.height), ("data.width", d.width)] {
            if v == 0 || v % crate::denoiser::unet::DOWNSAMPLE != 0 {
                return Err(Error::config(
                    key,
                    format!("must be a positive multiple of {}, got {v}", crate::denoiser::unet::DOWNSAMPLE),
                ));
            }
        }
        if !(0.0..=1.0).contains(&d.cloud_density) {
            return Err(Error::config("data.cloud_density", "must lie in [0, 1]"));
        }
        let p = &self.precondition;
        if p.seq_len == 0 || p.seq_len > d.seq_len {
            return Err(Error::config(
                "precondition.seq_len",
                format!("must lie in 1..={} (data.seq_len)", d.seq_len),
            ));
        }
        let stats: [(&str, Option<f64>, &str, fn(f64) -> bool); 3] = [
            ("precondition.sigma_data", p.sigma_data, "finite and > 0", |v| v > 0.0),
            ("precondition.sigma_mu", p.sigma_mu, "finite and >= 0", |v| v >= 0.0),
            ("precondition.sigma_cov", p.sigma_cov, "finite", |_| true),
        ];
        for (key, value, rule, admissible) in stats {
            if let Some(v) = value {
                if !(v.is_finite() && admissible(v)) {
                    return Err(Error::config(key, format!("must be {rule}, got {v}")));
                }
            }
        }
        if self.network.kind == NetworkKindName::Mono && p.seq_len != 1 {
            return Err(Error::config("network.kind", "a mono network needs precondition.seq_len = 1"));
        }
        if self.trainer.val_images == 0 {
            return Err(Error::config("trainer.val_images", "must be >= 1"));
        }
        self.train_config(PreconditionParams::new(1.0, 0.0, 0.0, p.seq_len)?)?.validate()?;
        self.network_config().validate()
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            n_steps: s.n_steps,
            s_churn: s.s_churn,
            s_tmin: s.s_tmin,
            s_tmax: s.s_tmax,
            s_noise: s.s_noise,
            sigma_min: s.sigma_min,
            sigma_max: s.sigma_max,
            rho: s.rho,
            seed: self.seed,
        }
    }

    pub fn train_config(&self, precondition: PreconditionParams) -> Result<TrainConfig> {
        let t = &self.trainer;
        Ok(TrainConfig {
            p_mean: t.p_mean,
            p_std: t.p_std,
            batch_size: t.batch_size,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            grad_clip: t.grad_clip,
            seed: self.seed,
            precondition,
            schedule: self.schedule.build()?,
        })
    }

    /// Conditioning channels per time point implied by the network flags.
    pub fn cond_channels(&self) -> usize {
        let mut n = 0;
        if self.network.use_cloudy_cond {
            n += self.data.channels;
        }
        if self.network.use_aux {
            n += self.data.aux_channels;
        }
        n
    }

    pub fn network_config(&self) -> NetworkConfig {
        let n = &self.network;
        NetworkConfig {
            kind: match n.kind {
                NetworkKindName::Mono => NetworkKind::Mono,
                NetworkKindName::Multi => NetworkKind::Multi,
            },
            image_channels: self.data.channels,
            cond_channels: self.cond_channels(),
            width: n.width,
            heads: n.heads,
            key_dim: n.key_dim,
        }
    }
}

/// Best-effort extraction of the offending key from a deserialization error.
fn first_key(e: &toml::de::Error) -> String {
    let msg = e.message();
    msg.split('`').nth(1).unwrap_or("<config>").to_string()
}
