//! Latent-space DDPM: linear noise schedule, closed-form forward noising,
//! the epsilon-prediction objective, and an ancestral reverse chain that is
//! differentiable with respect to its starting noise.

use serde::{Deserialize, Serialize};

use crate::artifact::{Artifact, NamedArray};
use crate::autograd::{Graph, Var};
use crate::error::{LdpError, Result};
use crate::image::{LatentShape, LatentTensor};
use crate::nn::{Adam, AdamConfig, Bound, ParamStore};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

pub const ARTIFACT_KIND: &str = "diffusion";

/// `β_t`, `α_t = 1 − β_t` and `ᾱ_t = Π α_s` for a chain of steps. `timesteps[i]`
/// is the training-schedule step (1-based) that chain step `i + 1` corresponds to;
/// for an unstrided schedule it is simply `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub timesteps: Vec<usize>,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Schedule from explicit betas; requires `0 < β < 1`, non-decreasing.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(LdpError::Config("noise schedule needs at least one step".into()));
        }
        if beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(LdpError::Config("every beta must lie in (0, 1)".into()));
        }
        if beta.windows(2).any(|w| w[1] < w[0]) {
            return Err(LdpError::Config("betas must be non-decreasing".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            timesteps: (1..=beta.len()).collect(),
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// Sub-chain visiting every `stride`-th training step, ending at step `T`.
    /// Its betas are re-derived so that its cumulative products match the
    /// original `ᾱ` at the visited steps.
    pub fn strided(&self, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(LdpError::Config("stride must be >= 1".into()));
        }
        if stride == 1 {
            return Ok(self.clone());
        }
        let t_max = self.len();
        let mut steps: Vec<usize> = (0..)
            .map(|i| i * stride)
            .take_while(|&off| off < t_max)
            .map(|off| t_max - off)
            .collect();
        steps.reverse();
        let alpha_bar: Vec<f64> = steps.iter().map(|&t| self.alpha_bar[t - 1]).collect();
        let mut prev = 1.0;
        let mut alpha = Vec::with_capacity(steps.len());
        for &ab in &alpha_bar {
            alpha.push(ab / prev);
            prev = ab;
        }
        let beta = alpha.iter().map(|a| 1.0 - a).collect();
        Ok(Self {
            timesteps: steps.iter().map(|&t| self.timesteps[t - 1]).collect(),
            beta,
            alpha,
            alpha_bar,
        })
    }
}

/// Linear `β` from `beta_start` to `beta_end` over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(LdpError::Config(format!("schedule needs T >= 2, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(LdpError::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    NoiseSchedule::from_betas(beta)
}

/// `z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · eps` for chain step `t ∈ [1, len]`.
pub fn forward_sample(
    sched: &NoiseSchedule,
    z0: &LatentTensor,
    t: usize,
    eps: &LatentTensor,
) -> Result<LatentTensor> {
    if t == 0 || t > sched.len() {
        return Err(LdpError::Config(format!("timestep {t} outside [1, {}]", sched.len())));
    }
    if z0.shape() != eps.shape() {
        return Err(LdpError::Shape(format!(
            "noise shape {:?} differs from latent {:?}",
            eps.shape(),
            z0.shape()
        )));
    }
    let ab = sched.alpha_bar[t - 1];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let s = z0.shape();
    LatentTensor::new(
        s.height,
        s.width,
        s.depth,
        z0.data().iter().zip(eps.data()).map(|(z, e)| a * z + b * e).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserArch {
    /// Small convolutional U-Net with two downsampling stages; needs `h`, `w`
    /// divisible by 4.
    Conv,
    /// Fully connected network over the flattened latent.
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Stride of the sub-chain used while optimizing patches.
    pub attack_stride: usize,
    pub arch: DenoiserArch,
    pub base_width: usize,
    pub time_embed_dim: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.06,
            attack_stride: 4,
            arch: DenoiserArch::Conv,
            base_width: 32,
            time_embed_dim: 32,
            train_steps: 3000,
            batch_size: 16,
            learning_rate: 1e-3,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        let sched = self.schedule()?;
        let terminal = sched.alpha_bar[sched.len() - 1];
        if terminal >= 0.05 {
            log::warn!("schedule keeps alpha_bar_T = {terminal:.3}; samples from N(0, I) will carry residual noise");
        }
        if self.attack_stride == 0 || self.attack_stride > self.steps {
            return Err(LdpError::Config("attack_stride must be in [1, steps]".into()));
        }
        if self.base_width == 0 || self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(LdpError::Config("base_width > 0 and an even time_embed_dim >= 2 required".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(LdpError::Config("batch_size and learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }

    pub fn attack_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule()?.strided(self.attack_stride)
    }

    fn check_shape(&self, shape: LatentShape) -> Result<()> {
        if shape.is_empty() {
            return Err(LdpError::Shape("empty latent shape".into()));
        }
        if self.arch == DenoiserArch::Conv && (!shape.height.is_multiple_of(4) || !shape.width.is_multiple_of(4)) {
            return Err(LdpError::Shape(format!(
                "convolutional denoiser needs latent sides divisible by 4, got {}x{}",
                shape.height, shape.width
            )));
        }
        Ok(())
    }
}

/// Weights of the noise predictor `ε_θ(z_t, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DiffusionConfig,
    pub latent_shape: LatentShape,
    /// Latents are multiplied by this before entering the diffusion space.
    pub latent_scale: f64,
    /// Sinusoidal embedding, one row per training step.
    pub time_table: Tensor,
    pub params: ParamStore,
}

fn sinusoidal_table(steps: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps * dim);
    for t in 1..=steps {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos());
        }
    }
    let mut t = Tensor::from_parts(vec![steps, dim], data);
    t.round_to_f32();
    t
}

impl DenoiserParams {
    pub fn init(config: &DiffusionConfig, latent_shape: LatentShape, rng: &mut RandomSource) -> Result<Self> {
        config.validate()?;
        config.check_shape(latent_shape)?;
        let e = config.time_embed_dim;
        let mut ps = ParamStore::new();
        ps.add_linear("time.l1", e, e, rng);
        match config.arch {
            DenoiserArch::Conv => {
                let (c, c2, d) = (config.base_width, 2 * config.base_width, latent_shape.depth);
                ps.add_linear("time.b0", e, c, rng);
                ps.add_linear("time.b1", e, c2, rng);
                ps.add_linear("time.b2", e, c2, rng);
                ps.add_conv("in", d, c, 3, rng);
                ps.add_conv("down1", c, c2, 3, rng);
                ps.add_conv("down2", c2, c2, 3, rng);
                ps.add_conv("mid", c2, c2, 3, rng);
                ps.add_conv_t("up1", c2, c2, 4, 2, rng);
                ps.add_conv_t("up0", c2, c, 4, 2, rng);
                ps.init_normal("out.w", &[d, c, 3, 3], c * 9, 0.1, rng);
                ps.init_zeros("out.b", &[d]);
            }
            DenoiserArch::Mlp => {
                let n = latent_shape.len();
                let hdim = 4 * config.base_width;
                ps.add_linear("mlp.l0", n, hdim, rng);
                ps.add_linear("mlp.l1", hdim, hdim, rng);
                ps.add_linear("mlp.l2", hdim, hdim, rng);
                for i in 0..3 {
                    ps.add_linear(&format!("mlp.t{i}"), e, hdim, rng);
                }
                ps.init_normal("mlp.out.w", &[n, hdim], hdim, 0.1, rng);
                ps.init_zeros("mlp.out.b", &[n]);
            }
        }
        Ok(Self {
            config: config.clone(),
            latent_shape,
            latent_scale: 1.0,
            time_table: sinusoidal_table(config.steps, e),
            params: ps,
        })
    }

    /// Replaces the output layer with zeros, making `ε_θ ≡ 0`.
    pub fn zero_output(&mut self) {
        let names: Vec<String> = self
            .params
            .iter()
            .filter(|(k, _)| k.starts_with("out.") || k.starts_with("mlp.out."))
            .map(|(k, _)| k.clone())
            .collect();
        for k in names {
            let t = self.params.get_mut(&k).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn to_artifact(&self, seed: u64) -> Artifact {
        let mut art = Artifact::new(ARTIFACT_KIND);
        self.params.write_arrays("net.", &mut art.arrays);
        art.arrays.insert("time_table".into(), NamedArray::from_tensor(&self.time_table));
        let sched = self.config.schedule().expect("validated config");
        art.arrays.insert(
            "schedule.beta".into(),
            NamedArray::from_tensor(&Tensor::from_parts(vec![sched.len()], sched.beta.clone())),
        );
        art.arrays.insert(
            "latent_scale".into(),
            NamedArray::from_tensor(&Tensor::scalar(self.latent_scale).reshaped(&[1]).unwrap()),
        );
        art.meta.insert("config".into(), serde_json::to_string(&self.config).unwrap());
        art.meta.insert("latent_shape".into(), serde_json::to_string(&self.latent_shape).unwrap());
        art.meta.insert("seed".into(), seed.to_string());
        art
    }

    pub fn from_artifact(art: &Artifact) -> Result<Self> {
        art.expect_kind(ARTIFACT_KIND)?;
        let config: DiffusionConfig = serde_json::from_str(art.meta("config")?)
            .map_err(|e| LdpError::Config(format!("diffusion config: {e}")))?;
        let latent_shape: LatentShape = serde_json::from_str(art.meta("latent_shape")?)
            .map_err(|e| LdpError::Config(format!("diffusion latent shape: {e}")))?;
        let mut out = Self::init(&config, latent_shape, &mut RandomSource::new(0))?;
        let params = ParamStore::read_arrays("net.", &art.arrays);
        params.check_layout(&out.params, "diffusion")?;
        out.params = params;
        let table = art.array("time_table")?.to_tensor();
        if table.shape() != out.time_table.shape() {
            return Err(LdpError::Shape("diffusion time table has the wrong shape".into()));
        }
        out.time_table = table;
        out.latent_scale = art.array("latent_scale")?.data[0] as f64;
        Ok(out)
    }

    fn time_embedding<'g>(&self, g: &'g Graph, step: usize) -> Var<'g> {
        let e = self.config.time_embed_dim;
        let row = self.time_table.data()[(step - 1) * e..step * e].to_vec();
        g.constant(Tensor::from_parts(vec![e], row))
    }

    /// `ε_θ(z, step)` for a `[d, h, w]` latent in diffusion space.
    pub fn predict_noise<'g>(&self, b: &Bound<'g>, z: Var<'g>, step: usize) -> Var<'g> {
        let g = z.graph();
        let temb = b.linear(self.time_embedding(g, step), "time.l1").silu();
        match self.config.arch {
            DenoiserArch::Conv => {
                let h0 = b.conv(z, "in", 1, 1).add_channel_bias(b.linear(temb, "time.b0")).silu();
                let h1 = b.conv(h0, "down1", 2, 1).add_channel_bias(b.linear(temb, "time.b1")).silu();
                let h2 = b.conv(h1, "down2", 2, 1).add_channel_bias(b.linear(temb, "time.b2")).silu();
                let h2 = b.conv(h2, "mid", 1, 1).silu();
                let u1 = (b.conv_t(h2, "up1", 2, 1) + h1).silu();
                let u0 = (b.conv_t(u1, "up0", 2, 1) + h0).silu();
                b.conv(u0, "out", 1, 1)
            }
            DenoiserArch::Mlp => {
                let shape = z.shape();
                let mut h = z.reshape(&[shape.iter().product()]);
                for i in 0..3 {
                    h = (b.linear(h, &format!("mlp.l{i}")) + b.linear(temb, &format!("mlp.t{i}"))).silu();
                }
                b.linear(h, "mlp.out").reshape(&shape)
            }
        }
    }

    fn check_latent(&self, shape: LatentShape) -> Result<()> {
        if shape != self.latent_shape {
            return Err(LdpError::Shape(format!(
                "denoiser expects latent {:?}, got {:?}",
                self.latent_shape, shape
            )));
        }
        Ok(())
    }
}

/// Denoiser plus optimizer state; one [`DiffusionTrainer::train_step`] per batch.
pub struct DiffusionTrainer {
    pub params: DenoiserParams,
    opt: Adam,
}

impl DiffusionTrainer {
    pub fn new(params: DenoiserParams) -> Self {
        let lr = params.config.learning_rate;
        Self {
            params,
            opt: Adam::new(AdamConfig { lr, ..Default::default() }),
        }
    }

    /// One optimizer update on `E‖eps − ε_θ(z_t, t)‖²`, with `t` uniform per
    /// item. Latents are given in autoencoder space. Returns the batch loss
    /// (mean over items and elements) measured before the update.
    pub fn train_step(
        &mut self,
        sched: &NoiseSchedule,
        z0_batch: &[LatentTensor],
        rng: &mut RandomSource,
    ) -> Result<f64> {
        if z0_batch.is_empty() {
            return Err(LdpError::Empty("diffusion training batch".into()));
        }
        let p = &self.params;
        let g = Graph::new();
        let b = p.params.bind(&g);
        let mut total: Option<Var> = None;
        for z0 in z0_batch {
            p.check_latent(z0.shape())?;
            let t = 1 + rng.below(sched.len());
            let eps = rng.normal_tensor(&z0.shape().chw());
            let ab = sched.alpha_bar[t - 1];
            let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
            let zt = z0
                .to_chw()
                .zip_map(&eps, |z, e| sa * z * p.latent_scale + sb * e);
            let pred = p.predict_noise(&b, g.constant(zt), sched.timesteps[t - 1]);
            let l = (pred - g.constant(eps)).square().mean();
            total = Some(match total {
                Some(acc) => acc + l,
                None => l,
            });
        }
        let loss = total.unwrap().scale(1.0 / z0_batch.len() as f64);
        let value = loss.item();
        if !value.is_finite() {
            return Err(LdpError::Divergence(format!("diffusion loss became {value}")));
        }
        let grads = g.backward(loss);
        self.opt.step(&mut self.params.params, &b.grads(&grads));
        Ok(value)
    }
}

/// Trains a denoiser on autoencoder latents for `config.train_steps` steps.
/// The latent scale is set to `1 / std` of the training latents.
pub fn train_diffusion(
    latents: &[LatentTensor],
    config: &DiffusionConfig,
    rng: &mut RandomSource,
) -> Result<(DenoiserParams, Vec<f64>)> {
    let first = latents
        .first()
        .ok_or_else(|| LdpError::Empty("diffusion training set".into()))?;
    let shape = first.shape();
    let mut params = DenoiserParams::init(config, shape, rng)?;
    let n = (latents.len() * shape.len()) as f64;
    let mean = latents.iter().flat_map(|z| z.data()).sum::<f64>() / n;
    let var = latents
        .iter()
        .flat_map(|z| z.data())
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / n;
    params.latent_scale = if var > 1e-12 { (1.0 / var.sqrt()) as f32 as f64 } else { 1.0 };
    let sched = config.schedule()?;
    let mut trainer = DiffusionTrainer::new(params);
    let mut losses = Vec::with_capacity(config.train_steps);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..config.train_steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if order.is_empty() {
                order = rng.permutation(latents.len());
            }
            batch.push(latents[order.pop().unwrap()].clone());
        }
        let loss = trainer.train_step(&sched, &batch, rng)?;
        if step % 100 == 0 {
            log::info!("diffusion step {step}: loss {loss:.5}");
        }
        losses.push(loss);
    }
    let mut params = trainer.params;
    if !params.params.all_finite() {
        return Err(LdpError::Divergence("denoiser weights are not finite".into()));
    }
    params.params.round_to_f32();
    Ok((params, losses))
}

/// Per-step noise for the reverse chain.
pub enum NoiseMode<'a> {
    /// Noise regenerated from this seed on every call: the chain is a
    /// deterministic function of its input.
    Frozen(u64),
    /// Noise drawn from the given source.
    Fresh(&'a mut RandomSource),
    Zero,
}

/// Noise tensors `w_t` for chain steps `len..=1`, listed in the order they are
/// consumed (step `len` first); the final step's entry is zero.
pub fn chain_noises(sched: &NoiseSchedule, shape: LatentShape, mode: NoiseMode<'_>) -> Vec<Tensor> {
    let chw = shape.chw();
    let n = sched.len();
    let mut draw: Box<dyn FnMut() -> Tensor> = match mode {
        NoiseMode::Zero => Box::new(|| Tensor::zeros(&chw)),
        NoiseMode::Frozen(seed) => {
            let mut rng = RandomSource::new(seed);
            Box::new(move || rng.normal_tensor(&chw))
        }
        NoiseMode::Fresh(rng) => Box::new(move || rng.normal_tensor(&chw)),
    };
    (0..n)
        .map(|i| if i + 1 == n { Tensor::zeros(&chw) } else { draw() })
        .collect()
}

/// Differentiable reverse chain over a `[d, h, w]` latent in diffusion space:
/// `z_{t−1} = (z_t − β_t/√(1−ᾱ_t) · ε_θ(z_t, t)) / √α_t + √β_t · w_t`.
pub fn sample_chain_var<'g>(
    params: &DenoiserParams,
    b: &Bound<'g>,
    sched: &NoiseSchedule,
    z_t: Var<'g>,
    noises: &[Tensor],
) -> Result<Var<'g>> {
    let g = z_t.graph();
    let mut z = z_t;
    for (k, t) in (1..=sched.len()).rev().enumerate() {
        let (alpha, beta, ab) = (sched.alpha[t - 1], sched.beta[t - 1], sched.alpha_bar[t - 1]);
        let eps = params.predict_noise(b, z, sched.timesteps[t - 1]);
        z = (z - eps.scale(beta / (1.0 - ab).sqrt())).scale(1.0 / alpha.sqrt());
        if t > 1 {
            z = z + g.constant(noises[k].map(|w| beta.sqrt() * w));
        }
        if !z.value().all_finite() {
            return Err(LdpError::Divergence(format!("reverse chain produced non-finite values at step {t}")));
        }
    }
    Ok(z)
}

/// Runs the reverse chain from `z_t` (in diffusion space) to `z_0`.
pub fn sample_chain(
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    z_t: &LatentTensor,
    mode: NoiseMode<'_>,
) -> Result<LatentTensor> {
    params.check_latent(z_t.shape())?;
    let noises = chain_noises(sched, z_t.shape(), mode);
    let g = Graph::new();
    let b = params.params.bind_frozen(&g);
    let z = sample_chain_var(params, &b, sched, g.constant(z_t.to_chw()), &noises)?;
    LatentTensor::from_chw(&z.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{max_relative_error, numeric_gradient};

    #[test]
    fn two_step_schedule_arithmetic() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.1]).unwrap();
        assert!((s.alpha_bar[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar[1] - 0.81).abs() < 1e-15);
        let s = make_schedule(2, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar[1] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_terminal_and_monotone() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        // Direct cumulative product.
        let mut ab = 1.0;
        for t in 0..100 {
            ab *= 1.0 - (1e-4 + (0.02 - 1e-4) * t as f64 / 99.0);
        }
        assert!((s.alpha_bar[99] - ab).abs() < 1e-12);
        assert!(ab < 0.37);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn schedule_errors() {
        assert!(make_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_schedule(1, 0.1, 0.1).is_err());
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn strided_schedule_matches_cumulative_products() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let st = s.strided(4).unwrap();
        assert_eq!(st.len(), 25);
        assert_eq!(st.timesteps[0], 4);
        assert_eq!(*st.timesteps.last().unwrap(), 100);
        for (i, &t) in st.timesteps.iter().enumerate() {
            assert!((st.alpha_bar[i] - s.alpha_bar[t - 1]).abs() < 1e-15);
        }
        let prod: f64 = st.alpha.iter().product();
        assert!((prod - s.alpha_bar[99]).abs() < 1e-12);
    }

    #[test]
    fn forward_sample_closed_form() {
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap(); // ᾱ = 0.25
        let z0 = LatentTensor::new(1, 1, 1, vec![1.0]).unwrap();
        let eps = LatentTensor::new(1, 1, 1, vec![0.0]).unwrap();
        assert!((forward_sample(&s, &z0, 1, &eps).unwrap().data()[0] - 0.5).abs() < 1e-15);
        assert!(forward_sample(&s, &z0, 2, &eps).is_err());
        assert!(forward_sample(&s, &z0, 0, &eps).is_err());
    }

    #[test]
    fn forward_sample_no_noise_limit() {
        // ᾱ → 1 as β → 0.
        let s = NoiseSchedule::from_betas(vec![1e-300]).unwrap();
        let z0 = LatentTensor::new(1, 2, 1, vec![0.3, -2.0]).unwrap();
        let eps = LatentTensor::new(1, 2, 1, vec![5.0, 5.0]).unwrap();
        assert_eq!(forward_sample(&s, &z0, 1, &eps).unwrap(), z0);
    }

    fn tiny_config(arch: DenoiserArch) -> DiffusionConfig {
        DiffusionConfig {
            steps: 5,
            beta_start: 0.05,
            beta_end: 0.2,
            attack_stride: 1,
            arch,
            base_width: 4,
            time_embed_dim: 4,
            train_steps: 10,
            batch_size: 4,
            learning_rate: 1e-3,
        }
    }

    fn shape4() -> LatentShape {
        LatentShape { height: 4, width: 4, depth: 2 }
    }

    #[test]
    fn zero_network_loss_is_unit_noise_energy() {
        let cfg = DiffusionConfig { arch: DenoiserArch::Conv, ..tiny_config(DenoiserArch::Conv) };
        let mut p = DenoiserParams::init(&cfg, shape4(), &mut RandomSource::new(1)).unwrap();
        p.zero_output();
        let mut trainer = DiffusionTrainer::new(p);
        let sched = cfg.schedule().unwrap();
        let mut rng = RandomSource::new(2);
        let batch: Vec<_> = (0..64).map(|_| LatentTensor::zeros(shape4())).collect();
        let loss = trainer.train_step(&sched, &batch, &mut rng).unwrap();
        // 64 * 32 standard-normal squares: mean 1, std ≈ sqrt(2/2048).
        assert!((loss - 1.0).abs() < 0.15, "{loss}");
    }

    #[test]
    fn single_step_chain_closed_form() {
        let cfg = tiny_config(DenoiserArch::Conv);
        let mut p = DenoiserParams::init(&cfg, shape4(), &mut RandomSource::new(1)).unwrap();
        p.zero_output();
        let s = NoiseSchedule::from_betas(vec![0.3]).unwrap();
        let z = LatentTensor::from_chw(&RandomSource::new(3).normal_tensor(&shape4().chw())).unwrap();
        let out = sample_chain(&p, &s, &z, NoiseMode::Fresh(&mut RandomSource::new(4))).unwrap();
        for (o, i) in out.data().iter().zip(z.data()) {
            assert!((o - i / 0.7f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_chain_is_deterministic() {
        let cfg = tiny_config(DenoiserArch::Conv);
        let p = DenoiserParams::init(&cfg, shape4(), &mut RandomSource::new(1)).unwrap();
        let s = cfg.schedule().unwrap();
        let z = LatentTensor::from_chw(&RandomSource::new(5).normal_tensor(&shape4().chw())).unwrap();
        let a = sample_chain(&p, &s, &z, NoiseMode::Frozen(11)).unwrap();
        let b = sample_chain(&p, &s, &z, NoiseMode::Frozen(11)).unwrap();
        assert_eq!(a, b);
        let c = sample_chain(&p, &s, &z, NoiseMode::Frozen(12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn chain_gradient_matches_finite_differences() {
        for arch in [DenoiserArch::Conv, DenoiserArch::Mlp] {
            let cfg = tiny_config(arch);
            let p = DenoiserParams::init(&cfg, shape4(), &mut RandomSource::new(6)).unwrap();
            let s = cfg.schedule().unwrap();
            let noises = chain_noises(&s, shape4(), NoiseMode::Frozen(7));
            let z = RandomSource::new(8).normal_tensor(&shape4().chw());
            let f = |t: &Tensor| {
                let g = Graph::new();
                let b = p.params.bind_frozen(&g);
                sample_chain_var(&p, &b, &s, g.constant(t.clone()), &noises).unwrap().sum().item()
            };
            let g = Graph::new();
            let b = p.params.bind_frozen(&g);
            let zv = g.leaf(z.clone());
            let out = sample_chain_var(&p, &b, &s, zv, &noises).unwrap().sum();
            let analytic = g.backward(out).get_or_zeros(zv);
            let numeric = numeric_gradient(f, &z, 1e-5);
            let err = max_relative_error(&analytic, &numeric, 1e-4);
            assert!(err < 1e-3, "{arch:?}: {err}");
        }
    }

    #[test]
    fn artifact_round_trip() {
        let cfg = tiny_config(DenoiserArch::Conv);
        let latents: Vec<_> = (0..4)
            .map(|i| LatentTensor::from_chw(&RandomSource::new(i).normal_tensor(&shape4().chw())).unwrap())
            .collect();
        let (p, losses) = train_diffusion(&latents, &cfg, &mut RandomSource::new(9)).unwrap();
        assert_eq!(losses.len(), cfg.train_steps);
        assert!(losses.iter().all(|l| l.is_finite() && *l > 0.0));
        let back = DenoiserParams::from_artifact(&p.to_artifact(9)).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn conv_arch_rejects_indivisible_latents() {
        let cfg = tiny_config(DenoiserArch::Conv);
        let shape = LatentShape { height: 6, width: 6, depth: 2 };
        assert!(DenoiserParams::init(&cfg, shape, &mut RandomSource::new(1)).is_err());
        let cfg = tiny_config(DenoiserArch::Mlp);
        assert!(DenoiserParams::init(&cfg, shape, &mut RandomSource::new(1)).is_ok());
    }
}
