//! Perceptual compression: a strided convolutional encoder into an
//! `(H/f) × (W/f) × d` latent, mirrored by a transposed-convolution decoder
//! whose output is squashed into `[0, 1]` with a sigmoid.

use serde::{Deserialize, Serialize};

use crate::artifact::Artifact;
use crate::autograd::{Graph, Var};
use crate::error::{LdpError, Result};
use crate::image::{ImageTensor, LatentShape, LatentTensor};
use crate::nn::{Adam, AdamConfig, Bound, ParamStore};
use crate::rng::RandomSource;

pub const ARTIFACT_KIND: &str = "autoencoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AEConfig {
    pub image_size: usize,
    pub downsample_factor: usize,
    pub latent_depth: usize,
    pub training_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for AEConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            downsample_factor: 8,
            latent_depth: 8,
            training_epochs: 30,
            learning_rate: 2e-3,
            batch_size: 16,
        }
    }
}

impl AEConfig {
    pub fn validate(&self) -> Result<()> {
        let f = self.downsample_factor;
        if f < 2 || !f.is_power_of_two() {
            return Err(LdpError::Config(format!(
                "downsample_factor must be a power of two >= 2, got {f}"
            )));
        }
        if !self.image_size.is_multiple_of(f) {
            return Err(LdpError::Config(format!(
                "image_size {} is not divisible by downsample_factor {f}",
                self.image_size
            )));
        }
        if self.image_size / f < 4 {
            return Err(LdpError::Config(format!(
                "latent side image_size/f = {} must be at least 4",
                self.image_size / f
            )));
        }
        if self.latent_depth == 0 {
            return Err(LdpError::Config("latent_depth must be >= 1".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(LdpError::Config("batch_size and learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> LatentShape {
        let side = self.image_size / self.downsample_factor;
        LatentShape {
            height: side,
            width: side,
            depth: self.latent_depth,
        }
    }

    fn stages(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    /// Channel width after encoder stage `i`.
    fn width(i: usize) -> usize {
        16 << i
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AEParams {
    pub config: AEConfig,
    pub params: ParamStore,
}

impl AEParams {
    pub fn init(config: &AEConfig, rng: &mut RandomSource) -> Result<Self> {
        config.validate()?;
        let n = config.stages();
        let mut ps = ParamStore::new();
        let mut cin = 3;
        for i in 0..n {
            ps.add_conv(&format!("enc.s{i}"), cin, AEConfig::width(i), 3, rng);
            cin = AEConfig::width(i);
        }
        ps.add_conv("enc.out", cin, config.latent_depth, 1, rng);
        ps.add_conv("dec.in", config.latent_depth, cin, 3, rng);
        for i in (0..n).rev() {
            let cout = if i == 0 { 3 } else { AEConfig::width(i - 1) };
            ps.add_conv_t(&format!("dec.s{i}"), AEConfig::width(i), cout, 4, 2, rng);
        }
        Ok(Self {
            config: config.clone(),
            params: ps,
        })
    }

    pub fn latent_shape(&self) -> LatentShape {
        self.config.latent_shape()
    }

    pub fn to_artifact(&self, seed: u64) -> Artifact {
        let mut art = Artifact::new(ARTIFACT_KIND);
        self.params.write_arrays("", &mut art.arrays);
        art.meta.insert("config".into(), serde_json::to_string(&self.config).unwrap());
        art.meta.insert("seed".into(), seed.to_string());
        art
    }

    pub fn from_artifact(art: &Artifact) -> Result<Self> {
        art.expect_kind(ARTIFACT_KIND)?;
        let config: AEConfig = serde_json::from_str(art.meta("config")?)
            .map_err(|e| LdpError::Config(format!("autoencoder config: {e}")))?;
        let reference = Self::init(&config, &mut RandomSource::new(0))?;
        let params = ParamStore::read_arrays("", &art.arrays);
        params.check_layout(&reference.params, "autoencoder")?;
        Ok(Self { config, params })
    }

    fn check_image(&self, h: usize, w: usize) -> Result<()> {
        let s = self.config.image_size;
        if h != s || w != s {
            return Err(LdpError::Shape(format!(
                "autoencoder expects {s}x{s} images, got {h}x{w}"
            )));
        }
        Ok(())
    }

    fn check_latent(&self, shape: LatentShape) -> Result<()> {
        if shape != self.latent_shape() {
            return Err(LdpError::Shape(format!(
                "autoencoder expects latent {:?}, got {:?}",
                self.latent_shape(),
                shape
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &ImageTensor) -> Result<LatentTensor> {
        self.check_image(x.height(), x.width())?;
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        let z = encode_var(&b, &self.config, g.constant(x.to_chw()));
        LatentTensor::from_chw(&z.value())
    }

    pub fn decode(&self, z: &LatentTensor) -> Result<ImageTensor> {
        self.check_latent(z.shape())?;
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        let x = decode_var(&b, &self.config, g.constant(z.to_chw()));
        ImageTensor::from_chw(&x.value())
    }

    pub fn reconstruction_mse(&self, images: &[ImageTensor]) -> Result<f64> {
        let mut total = 0.0;
        for x in images {
            let r = self.decode(&self.encode(x)?)?;
            total += mse(x.data(), r.data());
        }
        Ok(total / images.len().max(1) as f64)
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Differentiable encoder on a `[3, H, W]` input.
pub fn encode_var<'g>(b: &Bound<'g>, cfg: &AEConfig, x: Var<'g>) -> Var<'g> {
    let mut h = x;
    for i in 0..cfg.stages() {
        h = b.conv(h, &format!("enc.s{i}"), 2, 1).silu();
    }
    b.conv(h, "enc.out", 1, 0)
}

/// Differentiable decoder on a `[d, h, w]` latent; output `[3, H, W]` in `[0, 1]`.
pub fn decode_var<'g>(b: &Bound<'g>, cfg: &AEConfig, z: Var<'g>) -> Var<'g> {
    let mut h = b.conv(z, "dec.in", 1, 1).silu();
    for i in (0..cfg.stages()).rev() {
        h = b.conv_t(h, &format!("dec.s{i}"), 2, 1);
        h = if i == 0 { h.sigmoid() } else { h.silu() };
    }
    h
}

/// Per-epoch record from [`train_autoencoder`].
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

/// Minimizes mean per-pixel squared reconstruction error with Adam.
pub fn train_autoencoder(
    dataset: &[ImageTensor],
    cfg: &AEConfig,
    rng: &mut RandomSource,
) -> Result<(AEParams, TrainLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(LdpError::Empty("autoencoder training set".into()));
    }
    let mut ae = AEParams::init(cfg, rng)?;
    for x in dataset {
        ae.check_image(x.height(), x.width())?;
    }
    let inputs: Vec<_> = dataset.iter().map(ImageTensor::to_chw).collect();
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.learning_rate,
        ..Default::default()
    });
    let mut log = TrainLog::default();
    for epoch in 0..cfg.training_epochs {
        let order = rng.permutation(inputs.len());
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let g = Graph::new();
            let b = ae.params.bind(&g);
            let mut loss: Option<Var> = None;
            for &i in batch {
                let x = g.constant(inputs[i].clone());
                let r = decode_var(&b, cfg, encode_var(&b, cfg, x));
                let l = (r - x).square().mean();
                loss = Some(match loss {
                    Some(acc) => acc + l,
                    None => l,
                });
            }
            let loss = loss.expect("non-empty batch").scale(1.0 / batch.len() as f64);
            let value = loss.item();
            if !value.is_finite() {
                return Err(LdpError::Divergence(format!(
                    "autoencoder loss became {value} in epoch {epoch}"
                )));
            }
            epoch_loss += value * batch.len() as f64;
            let grads = g.backward(loss);
            opt.step(&mut ae.params, &b.grads(&grads));
        }
        let mean = epoch_loss / inputs.len() as f64;
        log::info!("autoencoder epoch {epoch}: mse {mean:.6}");
        log.epoch_losses.push(mean);
    }
    if !ae.params.all_finite() {
        return Err(LdpError::Divergence("autoencoder weights are not finite".into()));
    }
    ae.params.round_to_f32();
    Ok((ae, log))
}
