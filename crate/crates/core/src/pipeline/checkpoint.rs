//! Checkpoints: a container whose TOML header records everything needed to
//! rebuild the model, and whose tensors hold network weights (`net.*`) and
//! optimizer state (`optimizer.*`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{NetworkKindName, ScheduleSection};
use super::container::{Container, TensorRecord};
use crate::denoiser::{params, ConvNet, NetworkConfig, NetworkKind};
use crate::error::{Error, Result};
use crate::precondition::PreconditionParams;
use crate::rng;
use crate::trainer::Trainer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub kind: NetworkKindName,
    pub image_channels: usize,
    pub cond_channels: usize,
    pub width: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub use_cloudy_cond: bool,
    pub use_aux: bool,
}

impl Topology {
    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            kind: match self.kind {
                NetworkKindName::Mono => NetworkKind::Mono,
                NetworkKindName::Multi => NetworkKind::Multi,
            },
            image_channels: self.image_channels,
            cond_channels: self.cond_channels,
            width: self.width,
            heads: self.heads,
            key_dim: self.key_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub seed: u64,
    pub epoch: usize,
    pub step: u64,
    pub optimizer_steps: u64,
    pub best_val_psnr: f64,
    pub schedule: ScheduleSection,
    pub precondition: PreconditionParams,
    pub network: Topology,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub trainer: Trainer,
}

const NET_PREFIX: &str = "net.";

impl Checkpoint {
    /// Refreshes the progress fields of `header` from `trainer`.
    pub fn new(mut header: CheckpointHeader, trainer: Trainer) -> Self {
        header.epoch = trainer.epoch;
        header.step = trainer.step;
        header.optimizer_steps = trainer.optimizer.steps;
        header.best_val_psnr = trainer.best_val_psnr;
        Checkpoint { header, trainer }
    }

    pub fn to_container(&self) -> Result<Container> {
        let header = toml::to_string(&self.header).map_err(|e| Error::Format(e.to_string()))?;
        let mut c = Container::new(header);
        for t in params::collect(&self.trainer.net) {
            c.push(TensorRecord::from_f64(format!("{NET_PREFIX}{}", t.name), &t.shape, &t.values)?);
        }
        for t in self.trainer.optimizer_tensors() {
            c.push(TensorRecord::from_f64(t.name, &t.shape, &t.values)?);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let header: CheckpointHeader =
            toml::from_str(&c.header).map_err(|e| Error::Format(format!("checkpoint header: {}", e.message())))?;
        let cfg = header.network.network_config();
        // Initial values are overwritten by the stored tensors.
        let mut net = ConvNet::new(cfg, &mut rng::stream(0, &[]))
            .map_err(|e| Error::Format(format!("checkpoint topology: {e}")))?;
        let net_tensors: Vec<_> = c
            .tensors
            .iter()
            .filter_map(|t| {
                t.name.strip_prefix(NET_PREFIX).map(|n| {
                    let mut named = t.to_named();
                    named.name = n.to_string();
                    named
                })
            })
            .collect();
        params::load(&mut net, &net_tensors)?;
        let mut trainer = Trainer::new(net);
        let opt: Vec<_> = c
            .tensors
            .iter()
            .filter(|t| t.name.starts_with("optimizer."))
            .map(|t| t.to_named())
            .collect();
        trainer.load_optimizer_tensors(&opt, header.optimizer_steps)?;
        trainer.epoch = header.epoch;
        trainer.step = header.step;
        trainer.best_val_psnr = header.best_val_psnr;
        Ok(Checkpoint { header, trainer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_container(&Container::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Parameters;

    fn header() -> CheckpointHeader {
        CheckpointHeader {
            seed: 3,
            epoch: 0,
            step: 0,
            optimizer_steps: 0,
            best_val_psnr: f64::NEG_INFINITY,
            schedule: ScheduleSection::default(),
            precondition: PreconditionParams::new(0.5, 0.6, 0.2, 2).unwrap(),
            network: Topology {
                kind: NetworkKindName::Multi,
                image_channels: 2,
                cond_channels: 3,
                width: 4,
                heads: 2,
                key_dim: 2,
                use_cloudy_cond: true,
                use_aux: true,
            },
        }
    }

    fn trainer() -> Trainer {
        let mut net = ConvNet::new(header().network.network_config(), &mut rng::stream(8, &[])).unwrap();
        params::round_to_f32(&mut net);
        let mut t = Trainer::new(net);
        t.optimizer.second_moment.iter_mut().flatten().enumerate().for_each(|(i, v)| *v = (i as f32 * 1e-3) as f64);
        t.epoch = 4;
        t.step = 40;
        t.optimizer.steps = 40;
        t.best_val_psnr = 21.5;
        t
    }

    #[test]
    fn tensors_reload_bit_exactly() {
        let ck = Checkpoint::new(header(), trainer());
        let c = ck.to_container().unwrap();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_container().unwrap().to_bytes(), bytes);
    }

    #[test]
    fn missing_or_reshaped_tensors_are_rejected() {
        let ck = Checkpoint::new(header(), trainer());
        let mut c = ck.to_container().unwrap();
        c.tensors.retain(|t| t.name != "net.decoder.conv_out.bias");
        assert!(matches!(Checkpoint::from_container(&c), Err(Error::Format(_))));

        let mut c = ck.to_container().unwrap();
        c.header = c.header.replace("width = 4", "width = 6");
        assert!(Checkpoint::from_container(&c).is_err());
    }

    #[test]
    fn parameter_count_matches_tensor_table() {
        let ck = Checkpoint::new(header(), trainer());
        let c = ck.to_container().unwrap();
        let mut n = 0;
        ck.trainer.net.visit("", &mut |_, _, v| n += v.len());
        let stored: usize = c.tensors.iter().filter(|t| t.name.starts_with("net.")).map(|t| t.data.len()).sum();
        assert_eq!(stored, n);
    }
}
