//! Small convolutional encoder–decoder used as the raw network.
//!
//! Each time point runs through the same encoder. The mono variant takes a
//! single time point and feeds its skips straight to the decoder. The multi
//! variant fuses the bottleneck features over time with [`Tfsa`] (no residual
//! around it) and collapses every skip level with the attention masks.

use ndarray::{Array3, Array4, ArrayView3};
use rand::Rng;

use super::layers::{
    avg_pool2, avg_pool2_backward, concat_channels, silu, silu_backward, split_channels, upsample2,
    upsample2_backward, Conv2d, ConvCache, NoiseEmbedding,
};
use super::params::{ParamSink, ParamSinkMut, Parameters};
use super::tfsa::{fuse_skips, fuse_skips_backward, FusionCache, Tfsa, TfsaCache, TfsaConfig};
use super::RawNetwork;
use crate::error::{Error, Result};
use crate::tensor::ImageBatch;

/// Spatial downsampling factor between the input and the bottleneck.
pub const DOWNSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetworkKind {
    Mono,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkConfig {
    pub kind: NetworkKind,
    /// Channels of the noisy image (and of the output).
    pub image_channels: usize,
    /// Conditioning channels concatenated to every input slice.
    pub cond_channels: usize,
    /// Channels at full resolution; deeper levels use twice as many.
    pub width: usize,
    pub heads: usize,
    pub key_dim: usize,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 {
            return Err(Error::config("network.image_channels", "must be >= 1"));
        }
        if self.width == 0 {
            return Err(Error::config("network.width", "must be >= 1"));
        }
        if self.kind == NetworkKind::Multi {
            self.tfsa_config().validate()?;
            if !self.width.is_multiple_of(self.heads) {
                return Err(Error::config(
                    "network.heads",
                    format!("width {} is not divisible by {} heads", self.width, self.heads),
                ));
            }
        }
        Ok(())
    }

    fn deep(&self) -> usize {
        2 * self.width
    }

    fn tfsa_config(&self) -> TfsaConfig {
        TfsaConfig {
            heads: self.heads,
            key_dim: self.key_dim,
            channels: self.deep(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Encoder {
    conv1a: Conv2d,
    emb1: NoiseEmbedding,
    conv1b: Conv2d,
    conv2a: Conv2d,
    emb2: NoiseEmbedding,
    conv2b: Conv2d,
    conv3: Conv2d,
    emb3: NoiseEmbedding,
}

struct EncoderCache {
    c1a: ConvCache,
    z1a: Array3<f64>,
    c1b: ConvCache,
    z1b: Array3<f64>,
    c2a: ConvCache,
    z2a: Array3<f64>,
    c2b: ConvCache,
    z2b: Array3<f64>,
    c3: ConvCache,
    z3: Array3<f64>,
}

struct EncoderOut {
    e1: Array3<f64>,
    e2: Array3<f64>,
    bottleneck: Array3<f64>,
}

impl Encoder {
    fn new<R: Rng + ?Sized>(cfg: &NetworkConfig, rng: &mut R) -> Self {
        let input = cfg.image_channels + cfg.cond_channels;
        let (w1, w2) = (cfg.width, cfg.deep());
        Encoder {
            conv1a: Conv2d::new(input, w1, 3, 1.0, rng),
            emb1: NoiseEmbedding::new(w1, rng),
            conv1b: Conv2d::new(w1, w1, 3, 1.0, rng),
            conv2a: Conv2d::new(w1, w2, 3, 1.0, rng),
            emb2: NoiseEmbedding::new(w2, rng),
            conv2b: Conv2d::new(w2, w2, 3, 1.0, rng),
            conv3: Conv2d::new(w2, w2, 3, 1.0, rng),
            emb3: NoiseEmbedding::new(w2, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Encoder {
            conv1a: self.conv1a.zeros_like(),
            emb1: self.emb1.zeros_like(),
            conv1b: self.conv1b.zeros_like(),
            conv2a: self.conv2a.zeros_like(),
            emb2: self.emb2.zeros_like(),
            conv2b: self.conv2b.zeros_like(),
            conv3: self.conv3.zeros_like(),
            emb3: self.emb3.zeros_like(),
        }
    }

    fn forward(&self, x: ArrayView3<f64>, c_noise: f64) -> (EncoderOut, EncoderCache) {
        let (mut z1a, c1a) = self.conv1a.forward(x);
        self.emb1.apply(&mut z1a, c_noise);
        let (h1a, z1a) = silu(z1a);
        let (z1b, c1b) = self.conv1b.forward(h1a.view());
        let (e1, z1b) = silu(z1b);

        let p1 = avg_pool2(&e1);
        let (mut z2a, c2a) = self.conv2a.forward(p1.view());
        self.emb2.apply(&mut z2a, c_noise);
        let (h2a, z2a) = silu(z2a);
        let (z2b, c2b) = self.conv2b.forward(h2a.view());
        let (e2, z2b) = silu(z2b);

        let p2 = avg_pool2(&e2);
        let (mut z3, c3) = self.conv3.forward(p2.view());
        self.emb3.apply(&mut z3, c_noise);
        let (bottleneck, z3) = silu(z3);
        (
            EncoderOut { e1, e2, bottleneck },
            EncoderCache {
                c1a,
                z1a,
                c1b,
                z1b,
                c2a,
                z2a,
                c2b,
                z2b,
                c3,
                z3,
            },
        )
    }

    fn backward(
        &self,
        cache: &EncoderCache,
        c_noise: f64,
        d_e1: &Array3<f64>,
        d_e2: &Array3<f64>,
        d_bottleneck: &Array3<f64>,
        grad: &mut Encoder,
    ) {
        let dz3 = silu_backward(&cache.z3, d_bottleneck);
        self.emb3.backward(&dz3, c_noise, &mut grad.emb3);
        let dp2 = self.conv3.backward(&cache.c3, &dz3, &mut grad.conv3, true).unwrap();
        let de2 = avg_pool2_backward(&dp2) + d_e2;

        let dz2b = silu_backward(&cache.z2b, &de2);
        let dh2a = self.conv2b.backward(&cache.c2b, &dz2b, &mut grad.conv2b, true).unwrap();
        let dz2a = silu_backward(&cache.z2a, &dh2a);
        self.emb2.backward(&dz2a, c_noise, &mut grad.emb2);
        let dp1 = self.conv2a.backward(&cache.c2a, &dz2a, &mut grad.conv2a, true).unwrap();
        let de1 = avg_pool2_backward(&dp1) + d_e1;

        let dz1b = silu_backward(&cache.z1b, &de1);
        let dh1a = self.conv1b.backward(&cache.c1b, &dz1b, &mut grad.conv1b, true).unwrap();
        let dz1a = silu_backward(&cache.z1a, &dh1a);
        self.emb1.backward(&dz1a, c_noise, &mut grad.emb1);
        self.conv1a.backward(&cache.c1a, &dz1a, &mut grad.conv1a, false);
    }
}

impl Parameters for Encoder {
    fn visit(&self, prefix: &str, f: &mut ParamSink<'_>) {
        self.conv1a.visit(&format!("{prefix}.conv1a"), f);
        self.emb1.visit(&format!("{prefix}.emb1"), f);
        self.conv1b.visit(&format!("{prefix}.conv1b"), f);
        self.conv2a.visit(&format!("{prefix}.conv2a"), f);
        self.emb2.visit(&format!("{prefix}.emb2"), f);
        self.conv2b.visit(&format!("{prefix}.conv2b"), f);
        self.conv3.visit(&format!("{prefix}.conv3"), f);
        self.emb3.visit(&format!("{prefix}.emb3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamSinkMut<'_>) {
        self.conv1a.visit_mut(&format!("{prefix}.conv1a"), f);
        self.emb1.visit_mut(&format!("{prefix}.emb1"), f);
        self.conv1b.visit_mut(&format!("{prefix}.conv1b"), f);
        self.conv2a.visit_mut(&format!("{prefix}.conv2a"), f);
        self.emb2.visit_mut(&format!("{prefix}.emb2"), f);
        self.conv2b.visit_mut(&format!("{prefix}.conv2b"), f);
        self.conv3.visit_mut(&format!("{prefix}.conv3"), f);
        self.emb3.visit_mut(&format!("{prefix}.emb3"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Decoder {
    conv_mid: Conv2d,
    conv_d2: Conv2d,
    conv_d1: Conv2d,
    conv_out: Conv2d,
}

struct DecoderCache {
    c_mid: ConvCache,
    z_mid: Array3<f64>,
    c_d2: ConvCache,
    z_d2: Array3<f64>,
    c_d1: ConvCache,
    z_d1: Array3<f64>,
    c_out: ConvCache,
}

impl Decoder {
    fn new<R: Rng + ?Sized>(cfg: &NetworkConfig, rng: &mut R) -> Self {
        let (w1, w2) = (cfg.width, cfg.deep());
        Decoder {
            conv_mid: Conv2d::new(w2, w2, 3, 1.0, rng),
            conv_d2: Conv2d::new(2 * w2, w2, 3, 1.0, rng),
            conv_d1: Conv2d::new(w2 + w1, w1, 3, 1.0, rng),
            // A small output layer keeps the initial prediction near zero.
            conv_out: Conv2d::new(w1, cfg.image_channels, 1, 0.1, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Decoder {
            conv_mid: self.conv_mid.zeros_like(),
            conv_d2: self.conv_d2.zeros_like(),
            conv_d1: self.conv_d1.zeros_like(),
            conv_out: self.conv_out.zeros_like(),
        }
    }

    fn forward(&self, bottleneck: &Array3<f64>, o2: &Array3<f64>, o1: &Array3<f64>) -> (Array3<f64>, DecoderCache) {
        let (z_mid, c_mid) = self.conv_mid.forward(bottleneck.view());
        let (h_mid, z_mid) = silu(z_mid);
        let cat2 = concat_channels(&upsample2(&h_mid), o2);
        let (z_d2, c_d2) = self.conv_d2.forward(cat2.view());
        let (h_d2, z_d2) = silu(z_d2);
        let cat1 = concat_channels(&upsample2(&h_d2), o1);
        let (z_d1, c_d1) = self.conv_d1.forward(cat1.view());
        let (h_d1, z_d1) = silu(z_d1);
        let (out, c_out) = self.conv_out.forward(h_d1.view());
        (
            out,
            DecoderCache {
                c_mid,
                z_mid,
                c_d2,
                z_d2,
                c_d1,
                z_d1,
                c_out,
            },
        )
    }

    /// Returns gradients at the bottleneck and at both skip inputs.
    fn backward(
        &self,
        cache: &DecoderCache,
        d_out: &Array3<f64>,
        grad: &mut Decoder,
    ) -> (Array3<f64>, Array3<f64>, Array3<f64>) {
        let dh_d1 = self.conv_out.backward(&cache.c_out, d_out, &mut grad.conv_out, true).unwrap();
        let dz_d1 = silu_backward(&cache.z_d1, &dh_d1);
        let dcat1 = self.conv_d1.backward(&cache.c_d1, &dz_d1, &mut grad.conv_d1, true).unwrap();
        let (du1, d_o1) = split_channels(&dcat1, self.conv_d2.out_channels());
        let dh_d2 = upsample2_backward(&du1);
        let dz_d2 = silu_backward(&cache.z_d2, &dh_d2);
        let dcat2 = self.conv_d2.backward(&cache.c_d2, &dz_d2, &mut grad.conv_d2, true).unwrap();
        let (du2, d_o2) = split_channels(&dcat2, self.conv_mid.out_channels());
        let dh_mid = upsample2_backward(&du2);
        let dz_mid = silu_backward(&cache.z_mid, &dh_mid);
        let d_b = self.conv_mid.backward(&cache.c_mid, &dz_mid, &mut grad.conv_mid, true).unwrap();
        (d_b, d_o2, d_o1)
    }
}

impl Parameters for Decoder {
    fn visit(&self, prefix: &str, f: &mut ParamSink<'_>) {
        self.conv_mid.visit(&format!("{prefix}.conv_mid"), f);
        self.conv_d2.visit(&format!("{prefix}.conv_d2"), f);
        self.conv_d1.visit(&format!("{prefix}.conv_d1"), f);
        self.conv_out.visit(&format!("{prefix}.conv_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamSinkMut<'_>) {
        self.conv_mid.visit_mut(&format!("{prefix}.conv_mid"), f);
        self.conv_d2.visit_mut(&format!("{prefix}.conv_d2"), f);
        self.conv_d1.visit_mut(&format!("{prefix}.conv_d1"), f);
        self.conv_out.visit_mut(&format!("{prefix}.conv_out"), f);
    }
}

/// Mono- or multi-temporal encoder–decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    cfg: NetworkConfig,
    encoder: Encoder,
    tfsa: Option<Tfsa>,
    decoder: Decoder,
}

struct Fusion {
    tfsa: TfsaCache,
    skip1: FusionCache,
    skip2: FusionCache,
}

/// Everything the backward pass needs from one forward pass.
pub struct NetCache {
    c_noise: f64,
    encoder: Vec<EncoderCache>,
    features: Vec<EncoderOut>,
    fusion: Option<Fusion>,
    decoder: DecoderCache,
    masks: Option<Array4<f64>>,
}

impl NetCache {
    /// Attention masks `(G, L, h0, w0)` of the multi variant.
    pub fn masks(&self) -> Option<&Array4<f64>> {
        self.masks.as_ref()
    }
}

impl ConvNet {
    pub fn new<R: Rng + ?Sized>(cfg: NetworkConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(&cfg, rng);
        let tfsa = match cfg.kind {
            NetworkKind::Mono => None,
            NetworkKind::Multi => Some(Tfsa::new(cfg.tfsa_config(), rng)?),
        };
        let decoder = Decoder::new(&cfg, rng);
        Ok(ConvNet {
            cfg,
            encoder,
            tfsa,
            decoder,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// A parameter-shaped container of zeros, used for gradients.
    pub fn zeros_like(&self) -> Self {
        ConvNet {
            cfg: self.cfg,
            encoder: self.encoder.zeros_like(),
            tfsa: self.tfsa.as_ref().map(Tfsa::zeros_like),
            decoder: self.decoder.zeros_like(),
        }
    }

    /// The same encoder and decoder without temporal fusion.
    pub fn to_mono(&self) -> Self {
        ConvNet {
            cfg: NetworkConfig {
                kind: NetworkKind::Mono,
                ..self.cfg
            },
            encoder: self.encoder.clone(),
            tfsa: None,
            decoder: self.decoder.clone(),
        }
    }

    fn check_inputs(&self, inputs: &ImageBatch, cond: Option<&ImageBatch>) -> Result<()> {
        let [l, c, h, w] = inputs.shape();
        if c != self.cfg.image_channels {
            return Err(Error::Shape(format!(
                "network expects {} image channels, got {c}",
                self.cfg.image_channels
            )));
        }
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(Error::Shape(format!(
                "spatial size {h}x{w} is not divisible by {DOWNSAMPLE}"
            )));
        }
        if self.cfg.kind == NetworkKind::Mono && l != 1 {
            return Err(Error::Shape(format!("mono network takes one time point, got {l}")));
        }
        match (cond, self.cfg.cond_channels) {
            (None, 0) => Ok(()),
            (None, n) => Err(Error::Shape(format!("network expects {n} conditioning channels, got none"))),
            (Some(cb), n) => {
                if cb.channels() != n || cb.len_time() != l || cb.height() != h || cb.width() != w {
                    return Err(Error::Shape(format!(
                        "conditioning shape {:?} does not match [{l}, {n}, {h}, {w}]",
                        cb.shape()
                    )));
                }
                Ok(())
            }
        }
    }

    /// Forward pass keeping intermediate values for [`ConvNet::backward`].
    pub fn forward_train(
        &self,
        inputs: &ImageBatch,
        c_noise: f64,
        cond: Option<&ImageBatch>,
    ) -> Result<(ImageBatch, NetCache)> {
        self.check_inputs(inputs, cond)?;
        let l = inputs.len_time();
        let mut encoder = Vec::with_capacity(l);
        let mut features = Vec::with_capacity(l);
        for li in 0..l {
            let x = match cond {
                Some(cb) => concat_channels(&inputs.time_slice(li).to_owned(), &cb.time_slice(li).to_owned()),
                None => inputs.time_slice(li).to_owned(),
            };
            let (out, cache) = self.encoder.forward(x.view(), c_noise);
            encoder.push(cache);
            features.push(out);
        }

        let (out, decoder, fusion, masks) = match &self.tfsa {
            None => {
                let f = &features[0];
                let (out, dc) = self.decoder.forward(&f.bottleneck, &f.e2, &f.e1);
                (out, dc, None, None)
            }
            Some(tfsa) => {
                let bottlenecks: Vec<Array3<f64>> = features.iter().map(|f| f.bottleneck.clone()).collect();
                let (fused, masks, tcache) = tfsa.forward_maps(&bottlenecks)?;
                let e2: Vec<Array3<f64>> = features.iter().map(|f| f.e2.clone()).collect();
                let e1: Vec<Array3<f64>> = features.iter().map(|f| f.e1.clone()).collect();
                let (o2, skip2) = fuse_skips(&masks, &e2)?;
                let (o1, skip1) = fuse_skips(&masks, &e1)?;
                let (out, dc) = self.decoder.forward(&fused, &o2, &o1);
                let fusion = Fusion {
                    tfsa: tcache,
                    skip1,
                    skip2,
                };
                (out, dc, Some(fusion), Some(masks))
            }
        };
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric {
                step: 0,
                context: format!("network output is not finite at c_noise = {c_noise}"),
            });
        }
        let out = ImageBatch::new(out.insert_axis(ndarray::Axis(0)))?;
        Ok((
            out,
            NetCache {
                c_noise,
                encoder,
                features,
                fusion,
                decoder,
                masks,
            },
        ))
    }

    /// Accumulates parameter gradients of `Σ d_out ⊙ F` into `grad`.
    pub fn backward(&self, cache: &NetCache, d_out: &ImageBatch, grad: &mut ConvNet) {
        let d = d_out.time_slice(0).to_owned();
        let (d_b, d_o2, d_o1) = self.decoder.backward(&cache.decoder, &d, &mut grad.decoder);
        match (&self.tfsa, &cache.fusion) {
            (Some(tfsa), Some(fusion)) => {
                let e2: Vec<Array3<f64>> = cache.features.iter().map(|f| f.e2.clone()).collect();
                let e1: Vec<Array3<f64>> = cache.features.iter().map(|f| f.e1.clone()).collect();
                let (d_e2, d_m2) = fuse_skips_backward(&fusion.skip2, &e2, &d_o2);
                let (d_e1, d_m1) = fuse_skips_backward(&fusion.skip1, &e1, &d_o1);
                let d_masks = d_m1 + d_m2;
                let g_tfsa = grad.tfsa.as_mut().expect("gradient container matches network");
                let d_bs = tfsa.backward_maps(&fusion.tfsa, &d_b, &d_masks, g_tfsa);
                for li in 0..cache.encoder.len() {
                    self.encoder.backward(
                        &cache.encoder[li],
                        cache.c_noise,
                        &d_e1[li],
                        &d_e2[li],
                        &d_bs[li],
                        &mut grad.encoder,
                    );
                }
            }
            _ => {
                self.encoder
                    .backward(&cache.encoder[0], cache.c_noise, &d_o1, &d_o2, &d_b, &mut grad.encoder);
            }
        }
    }
}

impl RawNetwork for ConvNet {
    fn forward(&self, inputs: &ImageBatch, c_noise: f64, cond: Option<&ImageBatch>) -> Result<ImageBatch> {
        self.forward_train(inputs, c_noise, cond).map(|(out, _)| out)
    }
}

impl Parameters for ConvNet {
    fn visit(&self, prefix: &str, f: &mut ParamSink<'_>) {
        self.encoder.visit(&format!("{prefix}.encoder"), f);
        if let Some(t) = &self.tfsa {
            t.visit(&format!("{prefix}.tfsa"), f);
        }
        self.decoder.visit(&format!("{prefix}.decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamSinkMut<'_>) {
        self.encoder.visit_mut(&format!("{prefix}.encoder"), f);
        if let Some(t) = &mut self.tfsa {
            t.visit_mut(&format!("{prefix}.tfsa"), f);
        }
        self.decoder.visit_mut(&format!("{prefix}.decoder"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::params;
    use crate::rng;

    fn cfg(kind: NetworkKind) -> NetworkConfig {
        NetworkConfig {
            kind,
            image_channels: 4,
            cond_channels: 0,
            width: 4,
            heads: 2,
            key_dim: 3,
        }
    }

    #[test]
    fn single_time_point_multi_matches_mono() {
        let mut r = rng::stream(31, &[]);
        let multi = ConvNet::new(cfg(NetworkKind::Multi), &mut r).unwrap();
        let mono = multi.to_mono();
        let x = ImageBatch::standard_normal(1, 4, 8, 8, &mut r);
        let (a, cache) = multi.forward_train(&x, 0.3, None).unwrap();
        let b = mono.forward(&x, 0.3, None).unwrap();
        assert!(cache.masks().unwrap().iter().all(|&m| m == 1.0));
        for (u, v) in a.as_array().iter().zip(b.as_array().iter()) {
            assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn identical_slices_commute() {
        let mut r = rng::stream(32, &[]);
        let mut c = cfg(NetworkKind::Multi);
        c.cond_channels = 2;
        let net = ConvNet::new(c, &mut r).unwrap();
        let a = ImageBatch::standard_normal(1, 4, 8, 8, &mut r).time_slice(0).to_owned();
        let b = ImageBatch::standard_normal(1, 4, 8, 8, &mut r).time_slice(0).to_owned();
        let ca = ImageBatch::standard_normal(1, 2, 8, 8, &mut r).time_slice(0).to_owned();
        let cb = ImageBatch::standard_normal(1, 2, 8, 8, &mut r).time_slice(0).to_owned();
        let x1 = ImageBatch::stack(&[a.clone(), b.clone(), a.clone()]).unwrap();
        let k1 = ImageBatch::stack(&[ca.clone(), cb.clone(), ca.clone()]).unwrap();
        let x2 = ImageBatch::stack(&[a.clone(), a.clone(), b]).unwrap();
        let k2 = ImageBatch::stack(&[ca.clone(), ca, cb]).unwrap();
        let y1 = net.forward(&x1, -0.5, Some(&k1)).unwrap();
        let y2 = net.forward(&x2, -0.5, Some(&k2)).unwrap();
        for (u, v) in y1.as_array().iter().zip(y2.as_array().iter()) {
            assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut r = rng::stream(33, &[]);
        let net = ConvNet::new(cfg(NetworkKind::Multi), &mut r).unwrap();
        let x = ImageBatch::standard_normal(2, 4, 8, 8, &mut r);
        let a = net.forward(&x, 0.1, None).unwrap();
        let b = net.forward(&x, 0.1, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_errors() {
        let mut r = rng::stream(34, &[]);
        let mono = ConvNet::new(cfg(NetworkKind::Mono), &mut r).unwrap();
        assert!(matches!(
            mono.forward(&ImageBatch::zeros(1, 4, 6, 8), 0.0, None),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            mono.forward(&ImageBatch::zeros(2, 4, 8, 8), 0.0, None),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            mono.forward(&ImageBatch::zeros(1, 3, 8, 8), 0.0, None),
            Err(Error::Shape(_))
        ));
        let mut bad = cfg(NetworkKind::Multi);
        bad.heads = 3;
        assert!(matches!(ConvNet::new(bad, &mut r), Err(Error::Config { .. })));
    }

    /// Loss `Σ r ⊙ F`, whose gradient at the output is `r`.
    fn gradient_check(kind: NetworkKind, l: usize, cond_channels: usize) {
        let mut r = rng::stream(35, &[l as u64]);
        let mut c = cfg(kind);
        c.cond_channels = cond_channels;
        let mut net = ConvNet::new(c, &mut r).unwrap();
        let x = ImageBatch::standard_normal(l, 4, 8, 8, &mut r);
        let cond = (cond_channels > 0).then(|| ImageBatch::standard_normal(l, cond_channels, 8, 8, &mut r));
        let weights = ImageBatch::standard_normal(1, 4, 8, 8, &mut r);
        let c_noise = 0.4;
        let loss = |n: &ConvNet| -> f64 {
            let y = n.forward(&x, c_noise, cond.as_ref()).unwrap();
            y.as_array().iter().zip(weights.as_array().iter()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = net.forward_train(&x, c_noise, cond.as_ref()).unwrap();
        let mut grad = net.zeros_like();
        net.backward(&cache, &weights, &mut grad);
        let analytic = params::collect(&grad);

        let total = params::count(&net);
        let mut checked = 0;
        let mut offset = 0;
        for tensor in &analytic {
            // A handful of entries per tensor keeps the test fast.
            let n = tensor.values.len();
            let picks: Vec<usize> = (0..n).step_by((n / 5).max(1)).collect();
            for &i in &picks {
                let h = 1e-5;
                let target = offset + i;
                let bump = |net: &mut ConvNet, delta: f64| {
                    let mut pos = 0;
                    net.visit_mut("", &mut |_, _, values| {
                        if target >= pos && target < pos + values.len() {
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
                let a = tensor.values[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-3, "{}[{i}]: analytic {a} vs numeric {numeric}", tensor.name);
                checked += 1;
            }
            offset += n;
        }
        assert_eq!(offset, total);
        assert!(checked > 50);
    }

    #[test]
    fn mono_gradients_match_finite_differences() {
        gradient_check(NetworkKind::Mono, 1, 0);
    }

    #[test]
    fn multi_gradients_match_finite_differences() {
        gradient_check(NetworkKind::Multi, 1, 0);
        gradient_check(NetworkKind::Multi, 3, 2);
    }

    #[test]
    fn parameter_names_are_unique() {
        let mut r = rng::stream(36, &[]);
        let net = ConvNet::new(cfg(NetworkKind::Multi), &mut r).unwrap();
        let names: Vec<String> = params::collect(&net).into_iter().map(|t| t.name).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.iter().any(|n| n == "tfsa.query"));
    }
}
