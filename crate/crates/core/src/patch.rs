//! Latent patch search: reparameterized seed noise, the reverse chain and
//! decoder as a patch generator, the smoothness, printability and KL
//! regularizers, differentiable compositing, and the optimization loop.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{Artifact, NamedArray};
use crate::autoencoder::{decode_var, AEParams};
use crate::autograd::{Graph, Var};
use crate::detector::{detection_loss_var, PersonDetector};
use crate::diffusion::{chain_noises, sample_chain_var, DenoiserParams, NoiseMode, NoiseSchedule};
use crate::error::{LdpError, Result};
use crate::geometry::BBox;
use crate::image::{bilinear_taps, ImageTensor, LatentShape, LatentTensor};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

pub const ARTIFACT_KIND: &str = "patch";

/// Stabilizer inside the square root of the total variation.
pub const TV_DELTA: f64 = 1e-8;

/// Mean `μ` and `log σ` of the distribution the seed latent is drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchLatentParams {
    pub mu: LatentTensor,
    pub log_sigma: LatentTensor,
}

impl PatchLatentParams {
    /// `μ = 0`, `σ = 1`.
    pub fn standard(shape: LatentShape) -> Self {
        Self {
            mu: LatentTensor::zeros(shape),
            log_sigma: LatentTensor::zeros(shape),
        }
    }

    pub fn new(mu: LatentTensor, log_sigma: LatentTensor) -> Result<Self> {
        if mu.shape() != log_sigma.shape() {
            return Err(LdpError::Shape(format!(
                "mu {:?} and log_sigma {:?} differ",
                mu.shape(),
                log_sigma.shape()
            )));
        }
        if !mu.data().iter().chain(log_sigma.data()).all(|v| v.is_finite()) {
            return Err(LdpError::NonFinite("patch latent parameters".into()));
        }
        Ok(Self { mu, log_sigma })
    }

    pub fn shape(&self) -> LatentShape {
        self.mu.shape()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.data().iter().map(|v| v.exp()).collect()
    }
}

/// `Z_T = μ + ε·σ`.
pub fn reparameterize(p: &PatchLatentParams, eps: &LatentTensor) -> Result<LatentTensor> {
    if eps.shape() != p.shape() {
        return Err(LdpError::Shape(format!("eps {:?} vs params {:?}", eps.shape(), p.shape())));
    }
    let s = p.shape();
    let data = p
        .mu
        .data()
        .iter()
        .zip(p.log_sigma.data())
        .zip(eps.data())
        .map(|((m, ls), e)| m + e * ls.exp())
        .collect();
    LatentTensor::new(s.height, s.width, s.depth, data)
}

pub fn reparameterize_var<'g>(mu: Var<'g>, log_sigma: Var<'g>, eps: &Tensor) -> Var<'g> {
    mu + log_sigma.exp() * mu.graph().constant(eps.clone())
}

fn check_stack(ae: &AEParams, diff: &DenoiserParams, shape: LatentShape) -> Result<()> {
    if diff.latent_shape != ae.latent_shape() {
        return Err(LdpError::Shape(format!(
            "diffusion latent {:?} does not match autoencoder latent {:?}",
            diff.latent_shape,
            ae.latent_shape()
        )));
    }
    if shape != ae.latent_shape() {
        return Err(LdpError::Shape(format!(
            "seed latent {:?} does not match autoencoder latent {:?}",
            shape,
            ae.latent_shape()
        )));
    }
    Ok(())
}

/// Reverse chain with frozen noise, then decoding; `z_t` is `[d, h, w]` in
/// diffusion space and the result is a `[3, H, W]` patch in `[0, 1]`.
pub fn generate_patch_var<'g>(
    ae: &AEParams,
    diff: &DenoiserParams,
    sched: &NoiseSchedule,
    z_t: Var<'g>,
    noises: &[Tensor],
) -> Result<Var<'g>> {
    let g = z_t.graph();
    let b_diff = diff.params.bind_frozen(g);
    let z0 = sample_chain_var(diff, &b_diff, sched, z_t, noises)?;
    let b_ae = ae.params.bind_frozen(g);
    Ok(decode_var(&b_ae, &ae.config, z0.scale(1.0 / diff.latent_scale)))
}

pub fn generate_patch(
    ae: &AEParams,
    diff: &DenoiserParams,
    sched: &NoiseSchedule,
    z_t: &LatentTensor,
    noise_seed: u64,
) -> Result<ImageTensor> {
    check_stack(ae, diff, z_t.shape())?;
    let noises = chain_noises(sched, z_t.shape(), NoiseMode::Frozen(noise_seed));
    let g = Graph::new();
    let p = generate_patch_var(ae, diff, sched, g.constant(z_t.to_chw()), &noises)?;
    ImageTensor::from_chw(&p.value())
}

fn tv_value_grad(p: &Tensor, want_grad: bool) -> (f64, Option<Tensor>) {
    let (c, h, w) = p.dims3();
    let d = p.data();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Tensor::zeros(p.shape()));
    for k in 0..c {
        for i in 0..h - 1 {
            for j in 0..w - 1 {
                let at = (k * h + i) * w + j;
                let dv = d[at + w] - d[at];
                let dh = d[at + 1] - d[at];
                let r = (dv * dv + dh * dh + TV_DELTA).sqrt();
                total += r;
                if let Some(gr) = grad.as_mut() {
                    let gd = gr.data_mut();
                    gd[at + w] += dv / r;
                    gd[at + 1] += dh / r;
                    gd[at] -= (dv + dh) / r;
                }
            }
        }
    }
    (total, grad)
}

fn check_tv_input(h: usize, w: usize) -> Result<()> {
    if h < 2 || w < 2 {
        return Err(LdpError::Shape(format!("total variation needs at least 2x2, got {h}x{w}")));
    }
    Ok(())
}

/// Total variation of a `[C, H, W]` patch, summed over channels.
pub fn tv_loss_var(p: Var<'_>) -> Result<Var<'_>> {
    let value = p.value();
    let (_, h, w) = value.dims3();
    check_tv_input(h, w)?;
    let (total, grad) = tv_value_grad(&value, true);
    let grad = grad.unwrap();
    Ok(p.graph().op(Tensor::scalar(total), &[p], move |g, _| {
        let k = g.item();
        vec![Some(grad.map(|v| v * k))]
    }))
}

pub fn tv_loss(p: &ImageTensor) -> Result<f64> {
    check_tv_input(p.height(), p.width())?;
    Ok(tv_value_grad(&p.to_chw(), false).0)
}

/// The set of printable colors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrintColorSet {
    colors: Vec<[f64; 3]>,
}

const DEFAULT_PALETTE: &str = include_str!("../data/print_palette.txt");

impl PrintColorSet {
    pub fn new(colors: Vec<[f64; 3]>) -> Result<Self> {
        if colors.is_empty() {
            return Err(LdpError::Empty("print color set".into()));
        }
        if colors.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(LdpError::Config("print colors must lie in [0, 1]".into()));
        }
        Ok(Self { colors })
    }

    /// The bundled 30-color palette.
    pub fn default_palette() -> Self {
        Self::parse(DEFAULT_PALETTE).expect("bundled palette parses")
    }

    /// One `r g b` triplet per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut colors = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| LdpError::Config(format!("palette line {}: {e}", n + 1)))?;
            if vals.len() != 3 {
                return Err(LdpError::Config(format!("palette line {}: expected 3 values", n + 1)));
            }
            colors.push([vals[0], vals[1], vals[2]]);
        }
        Self::new(colors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| LdpError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }
}

fn nps_value_grad(p: &Tensor, colors: &[[f64; 3]], want_grad: bool) -> (f64, Option<Tensor>) {
    let (c, h, w) = p.dims3();
    debug_assert_eq!(c, 3);
    let plane = h * w;
    let d = p.data();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Tensor::zeros(p.shape()));
    for px in 0..plane {
        let v = [d[px], d[plane + px], d[2 * plane + px]];
        let (best, dist) = colors
            .iter()
            .map(|col| {
                let s: f64 = (0..3).map(|k| (v[k] - col[k]).powi(2)).sum();
                (col, s.sqrt())
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        total += dist;
        if let (Some(gr), true) = (grad.as_mut(), dist > 0.0) {
            let gd = gr.data_mut();
            for k in 0..3 {
                gd[k * plane + px] = (v[k] - best[k]) / dist;
            }
        }
    }
    (total, grad)
}

/// Sum over pixels of the distance to the nearest printable color.
pub fn nps_loss_var<'g>(p: Var<'g>, set: &PrintColorSet) -> Var<'g> {
    let (total, grad) = nps_value_grad(&p.value(), &set.colors, true);
    let grad = grad.unwrap();
    p.graph().op(Tensor::scalar(total), &[p], move |g, _| {
        let k = g.item();
        vec![Some(grad.map(|v| v * k))]
    })
}

pub fn nps_loss(p: &ImageTensor, set: &PrintColorSet) -> Result<f64> {
    if set.colors.is_empty() {
        return Err(LdpError::Empty("print color set".into()));
    }
    Ok(nps_value_grad(&p.to_chw(), &set.colors, false).0)
}

/// Mean over elements of `½(μ² + σ² − log σ² − 1)`.
pub fn kl_loss_var<'g>(mu: Var<'g>, log_sigma: Var<'g>) -> Var<'g> {
    let two_ls = log_sigma.scale(2.0);
    (mu.square() + two_ls.exp() - two_ls).add_scalar(-1.0).scale(0.5).mean()
}

pub fn kl_loss(p: &PatchLatentParams) -> f64 {
    let n = p.mu.data().len();
    p.mu
        .data()
        .iter()
        .zip(p.log_sigma.data())
        .map(|(m, ls)| 0.5 * (m * m + (2.0 * ls).exp() - 2.0 * ls - 1.0))
        .sum::<f64>()
        / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.1,
            gamma: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(LdpError::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// `L_det + α·L_kl + β·L_tv + γ·L_nps`.
pub fn total_loss(l_det: f64, l_kl: f64, l_tv: f64, l_nps: f64, w: &LossWeights) -> f64 {
    l_det + w.alpha * l_kl + w.beta * l_tv + w.gamma * l_nps
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformConfig {
    /// Patch side as a fraction of the box height.
    pub patch_scale: f64,
    pub rotation_deg: f64,
    pub scale_jitter: f64,
    pub brightness: f64,
    pub contrast: [f64; 2],
    pub noise_std: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            patch_scale: 0.45,
            rotation_deg: 20.0,
            scale_jitter: 0.1,
            brightness: 0.1,
            contrast: [0.9, 1.1],
            noise_std: 0.01,
        }
    }
}

impl TransformConfig {
    /// No rotation, jitter, color change or noise.
    pub fn identity(patch_scale: f64) -> Self {
        Self {
            patch_scale,
            rotation_deg: 0.0,
            scale_jitter: 0.0,
            brightness: 0.0,
            contrast: [1.0, 1.0],
            noise_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.patch_scale > 0.0
            && self.patch_scale <= 1.0
            && (0.0..=180.0).contains(&self.rotation_deg)
            && (0.0..1.0).contains(&self.scale_jitter)
            && (0.0..=0.5).contains(&self.brightness)
            && self.contrast[0] > 0.0
            && self.contrast[0] <= self.contrast[1]
            && self.contrast[1] <= 2.0
            && (0.0..=0.5).contains(&self.noise_std);
        if !ok {
            return Err(LdpError::Config(format!("invalid transform config {self:?}")));
        }
        Ok(())
    }
}

/// One concrete draw of the patch transform for one box, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
    pub angle: f64,
    pub contrast: f64,
    pub brightness: f64,
    /// Per-pixel noise over the whole `[3, H, W]` image, if any.
    pub noise: Option<Tensor>,
}

pub fn sample_placement(
    bbox: &BBox,
    height: usize,
    width: usize,
    t: &TransformConfig,
    rng: &mut RandomSource,
) -> Placement {
    let jitter = 1.0 + rng.uniform_range(-t.scale_jitter, t.scale_jitter);
    let angle = rng.uniform_range(-t.rotation_deg, t.rotation_deg).to_radians();
    let contrast = rng.uniform_range(t.contrast[0], t.contrast[1]);
    let brightness = rng.uniform_range(-t.brightness, t.brightness);
    let noise = (t.noise_std > 0.0).then(|| rng.normal_tensor(&[3, height, width]).map(|v| v * t.noise_std));
    Placement {
        cx: bbox.cx * width as f64,
        cy: bbox.cy * height as f64,
        side: t.patch_scale * bbox.h * height as f64 * jitter,
        angle,
        contrast,
        brightness,
        noise,
    }
}

struct Tap {
    pixel: usize,
    i0: usize,
    i1: usize,
    j0: usize,
    j1: usize,
    fy: f64,
    fx: f64,
}

/// Pixels of an `height × width` image covered by the placed patch, with
/// bilinear taps into a `q × q` patch.
fn footprint(p: &Placement, height: usize, width: usize, q: usize) -> Vec<Tap> {
    let r = p.side * std::f64::consts::FRAC_1_SQRT_2 + 1.0;
    let y0 = (p.cy - r).floor().max(0.0) as usize;
    let x0 = (p.cx - r).floor().max(0.0) as usize;
    let y1 = ((p.cy + r).ceil().max(0.0) as usize).min(height);
    let x1 = ((p.cx + r).ceil().max(0.0) as usize).min(width);
    let (sin, cos) = p.angle.sin_cos();
    let mut taps = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - p.cx;
            let dy = y as f64 + 0.5 - p.cy;
            let u = (cos * dx + sin * dy) / p.side;
            let v = (-sin * dx + cos * dy) / p.side;
            if u.abs() >= 0.5 || v.abs() >= 0.5 {
                continue;
            }
            let (j0, j1, fx) = bilinear_taps((u + 0.5) * q as f64 - 0.5, q);
            let (i0, i1, fy) = bilinear_taps((v + 0.5) * q as f64 - 0.5, q);
            taps.push(Tap {
                pixel: y * width + x,
                i0,
                i1,
                j0,
                j1,
                fy,
                fx,
            });
        }
    }
    taps
}

/// Largest power-of-two pooling factor that keeps the patch at least as
/// large as its footprint.
fn pool_factor(n: usize, side: f64) -> usize {
    let mut f = 1;
    while n.is_multiple_of(2 * f) && (n / (2 * f)) as f64 >= side {
        f *= 2;
    }
    f
}

/// Composites `patch` (`[3, P, P]`) onto `x` (`[3, H, W]`) at one placement.
/// Returns `None` if the footprint misses the image entirely.
pub fn composite<'g>(x: Var<'g>, patch: Var<'g>, p: &Placement) -> Option<Var<'g>> {
    let xv = x.value();
    let (_, h, w) = xv.dims3();
    let (_, n, _) = patch.value().dims3();
    let pooled = patch.avg_pool(pool_factor(n, p.side));
    let pv = pooled.value();
    let (_, q, _) = pv.dims3();
    let taps = footprint(p, h, w, q);
    if taps.is_empty() {
        return None;
    }
    let plane = h * w;
    let qq = q * q;
    let mut out = (*xv).clone();
    let mut live = vec![false; taps.len() * 3];
    {
        let od = out.data_mut();
        let pd = pv.data();
        for (ti, t) in taps.iter().enumerate() {
            for k in 0..3 {
                let s = |i: usize, j: usize| pd[k * qq + i * q + j];
                let top = s(t.i0, t.j0) * (1.0 - t.fx) + s(t.i0, t.j1) * t.fx;
                let bot = s(t.i1, t.j0) * (1.0 - t.fx) + s(t.i1, t.j1) * t.fx;
                let sample = top * (1.0 - t.fy) + bot * t.fy;
                let noise = p.noise.as_ref().map_or(0.0, |nz| nz.data()[k * plane + t.pixel]);
                let pre = p.contrast * sample + p.brightness + noise;
                live[ti * 3 + k] = pre > 0.0 && pre < 1.0;
                od[k * plane + t.pixel] = pre.clamp(0.0, 1.0);
            }
        }
    }
    let contrast = p.contrast;
    Some(x.graph().op(out, &[x, pooled], move |g, mask| {
        let gd = g.data();
        let dx = mask[0].then(|| {
            let mut d = g.clone();
            let dd = d.data_mut();
            for t in &taps {
                for k in 0..3 {
                    dd[k * plane + t.pixel] = 0.0;
                }
            }
            d
        });
        let dp = mask[1].then(|| {
            let mut d = Tensor::zeros(&[3, q, q]);
            let dd = d.data_mut();
            for (ti, t) in taps.iter().enumerate() {
                for k in 0..3 {
                    if !live[ti * 3 + k] {
                        continue;
                    }
                    let up = gd[k * plane + t.pixel] * contrast;
                    let base = k * qq;
                    dd[base + t.i0 * q + t.j0] += up * (1.0 - t.fy) * (1.0 - t.fx);
                    dd[base + t.i0 * q + t.j1] += up * (1.0 - t.fy) * t.fx;
                    dd[base + t.i1 * q + t.j0] += up * t.fy * (1.0 - t.fx);
                    dd[base + t.i1 * q + t.j1] += up * t.fy * t.fx;
                }
            }
            d
        });
        vec![dx, dp]
    }))
}

/// Composites the patch once per placement; placements whose footprint
/// misses the image are skipped with a warning.
pub fn apply_patch_var<'g>(x: Var<'g>, patch: Var<'g>, placements: &[Placement]) -> Var<'g> {
    let mut out = x;
    for p in placements {
        match composite(out, patch, p) {
            Some(v) => out = v,
            None => log::warn!("patch footprint at ({:.1}, {:.1}) is outside the image, skipped", p.cx, p.cy),
        }
    }
    out
}

pub fn apply_patch(
    x: &ImageTensor,
    boxes: &[BBox],
    patch: &ImageTensor,
    t: &TransformConfig,
    rng: &mut RandomSource,
) -> Result<ImageTensor> {
    if patch.height() != patch.width() {
        return Err(LdpError::Shape(format!("patch must be square, got {}x{}", patch.height(), patch.width())));
    }
    t.validate()?;
    if boxes.is_empty() {
        return Ok(x.clone());
    }
    let placements: Vec<Placement> = boxes
        .iter()
        .map(|b| sample_placement(b, x.height(), x.width(), t, rng))
        .collect();
    let g = Graph::new();
    let out = apply_patch_var(g.constant(x.to_chw()), g.constant(patch.to_chw()), &placements);
    ImageTensor::from_chw(&out.value())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Seed latents tried at the end; the one with the lowest detection loss
    /// becomes the exported patch.
    pub final_candidates: usize,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    /// How tv and nps enter the objective and the loss log.
    pub reduction: Reduction,
}

/// `Sum` uses the raw totals. `Mean` divides tv by the number of patch
/// values and nps by the number of pixels, so the default weights stay
/// meaningful at any patch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 12,
            learning_rate: 0.05,
            beta1: 0.5,
            beta2: 0.999,
            final_candidates: 8,
            cosine_decay: true,
            reduction: Reduction::Mean,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.final_candidates == 0 {
            return Err(LdpError::Config("attack steps, batch_size and final_candidates must be positive".into()));
        }
        self.adam().validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

/// Component losses of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_det: f64,
    pub l_kl: f64,
    pub l_tv: f64,
    pub l_nps: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchResult {
    pub params: PatchLatentParams,
    /// Seed latent of the exported patch.
    pub z_t: LatentTensor,
    pub patch: ImageTensor,
    pub noise_seed: u64,
    pub history: Vec<LossRecord>,
}

/// Everything the optimizer needs besides the detector.
pub struct AttackSetup<'a> {
    pub ae: &'a AEParams,
    pub diff: &'a DenoiserParams,
    pub sched: &'a NoiseSchedule,
    pub images: &'a [ImageTensor],
    pub boxes: &'a [Vec<BBox>],
    pub weights: LossWeights,
    pub transform: TransformConfig,
    pub colors: &'a PrintColorSet,
    pub config: AttackConfig,
}

impl AttackSetup<'_> {
    fn validate<D: PersonDetector + ?Sized>(&self, det: &D) -> Result<Vec<usize>> {
        self.weights.validate()?;
        self.transform.validate()?;
        self.config.validate()?;
        check_stack(self.ae, self.diff, self.ae.latent_shape())?;
        if self.images.len() != self.boxes.len() {
            return Err(LdpError::Shape(format!(
                "{} images but {} box lists",
                self.images.len(),
                self.boxes.len()
            )));
        }
        let n = det.input_size();
        if let Some(x) = self.images.iter().find(|x| x.height() != n || x.width() != n) {
            return Err(LdpError::Shape(format!("detector expects {n}x{n}, got {}x{}", x.height(), x.width())));
        }
        let usable: Vec<usize> = (0..self.images.len()).filter(|&i| !self.boxes[i].is_empty()).collect();
        if usable.is_empty() {
            return Err(LdpError::Empty("no training image has a box to attack".into()));
        }
        Ok(usable)
    }

    fn batch<'g>(&self, g: &'g Graph, patch: Var<'g>, picks: &[usize], rng: &mut RandomSource) -> Vec<Var<'g>> {
        picks
            .iter()
            .map(|&i| {
                let x = &self.images[i];
                let placements: Vec<Placement> = self.boxes[i]
                    .iter()
                    .map(|b| sample_placement(b, x.height(), x.width(), &self.transform, rng))
                    .collect();
                apply_patch_var(g.constant(x.to_chw()), patch, &placements)
            })
            .collect()
    }
}

/// Optimizes `μ` and `log σ` so that patches decoded from `μ + ε·σ` suppress
/// the detector's person confidence on the composited images.
pub fn optimize_patch<D: PersonDetector + ?Sized>(
    setup: &AttackSetup<'_>,
    det: &D,
    rng: &mut RandomSource,
) -> Result<PatchResult> {
    let usable = setup.validate(det)?;
    let shape = setup.ae.latent_shape();
    let chw = shape.chw();
    let noise_seed = rng.next_u64();
    let noises = chain_noises(setup.sched, shape, NoiseMode::Frozen(noise_seed));
    let w = setup.weights;

    let mut store = ParamStore::new();
    store.insert("mu", Tensor::zeros(&chw));
    store.insert("log_sigma", Tensor::zeros(&chw));
    let mut opt = Adam::new(setup.config.adam());
    let mut history = Vec::with_capacity(setup.config.steps);

    let steps = setup.config.steps;
    for step in 0..steps {
        if setup.config.cosine_decay {
            let progress = step as f64 / steps as f64;
            opt.set_lr(setup.config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        }
        let g = Graph::new();
        let b = store.bind(&g);
        let (mu, ls) = (b.get("mu"), b.get("log_sigma"));
        let eps = rng.normal_tensor(&chw);
        let z = reparameterize_var(mu, ls, &eps);
        let patch = generate_patch_var(setup.ae, setup.diff, setup.sched, z, &noises)?;
        let values = patch.value().len() as f64;
        let (tv_k, nps_k) = match setup.config.reduction {
            Reduction::Sum => (1.0, 1.0),
            Reduction::Mean => (1.0 / values, 3.0 / values),
        };
        let l_tv = tv_loss_var(patch)?.scale(tv_k);
        let l_nps = nps_loss_var(patch, setup.colors).scale(nps_k);
        let l_kl = kl_loss_var(mu, ls);
        let picks: Vec<usize> = (0..setup.config.batch_size)
            .map(|_| usable[rng.below(usable.len())])
            .collect();
        let xs = setup.batch(&g, patch, &picks, rng);
        let l_det = detection_loss_var(det, &g, &xs)?;
        let total = l_det + l_kl.scale(w.alpha) + l_tv.scale(w.beta) + l_nps.scale(w.gamma);
        let rec = LossRecord {
            step,
            l_det: l_det.item(),
            l_kl: l_kl.item(),
            l_tv: l_tv.item(),
            l_nps: l_nps.item(),
            l_total: total_loss(l_det.item(), l_kl.item(), l_tv.item(), l_nps.item(), &w),
        };
        if !rec.l_total.is_finite() {
            return Err(LdpError::Divergence(format!(
                "patch loss became non-finite at step {step}: {rec:?}"
            )));
        }
        let grads = g.backward(total);
        opt.step(&mut store, &b.grads(&grads));
        if step % 25 == 0 {
            log::info!(
                "attack step {step}: det {:.4} kl {:.4} tv {:.4} nps {:.4}",
                rec.l_det,
                rec.l_kl,
                rec.l_tv,
                rec.l_nps
            );
        }
        history.push(rec);
    }

    let mut mu = store.get("mu").unwrap().clone();
    let mut ls = store.get("log_sigma").unwrap().clone();
    mu.round_to_f32();
    ls.round_to_f32();
    let params = PatchLatentParams::new(LatentTensor::from_chw(&mu)?, LatentTensor::from_chw(&ls)?)?;

    // Pick the best of a few seed latents on a fixed batch.
    let mut eval_rng = rng.child(0);
    let picks: Vec<usize> = (0..setup.config.batch_size.max(usable.len().min(32)))
        .map(|k| usable[k % usable.len()])
        .collect();
    let eval_seed = eval_rng.next_u64();
    let mut best: Option<(f64, LatentTensor)> = None;
    for _ in 0..setup.config.final_candidates {
        let eps = LatentTensor::from_chw(&eval_rng.normal_tensor(&chw))?;
        let mut z = reparameterize(&params, &eps)?;
        z = LatentTensor::new(shape.height, shape.width, shape.depth, round_f32(z.data()))?;
        let g = Graph::new();
        let patch = generate_patch_var(setup.ae, setup.diff, setup.sched, g.constant(z.to_chw()), &noises)?;
        let xs = setup.batch(&g, patch, &picks, &mut RandomSource::new(eval_seed));
        let l = detection_loss_var(det, &g, &xs)?.item();
        if best.as_ref().is_none_or(|(b, _)| l < *b) {
            best = Some((l, z));
        }
    }
    let (_, z_t) = best.unwrap();
    let patch = generate_patch(setup.ae, setup.diff, setup.sched, &z_t, noise_seed)?;
    Ok(PatchResult {
        params,
        z_t,
        patch,
        noise_seed,
        history,
    })
}

/// Per-step losses as CSV with columns `step, l_det, l_kl, l_tv, l_nps,
/// l_total`; values use the shortest exact decimal form.
pub fn write_loss_csv<W: std::io::Write>(history: &[LossRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| LdpError::Config(format!("csv: {e}"));
    w.write_record(["step", "l_det", "l_kl", "l_tv", "l_nps", "l_total"]).map_err(err)?;
    for r in history {
        w.write_record([
            r.step.to_string(),
            r.l_det.to_string(),
            r.l_kl.to_string(),
            r.l_tv.to_string(),
            r.l_nps.to_string(),
            r.l_total.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| LdpError::Config(format!("csv: {e}")))?;
    Ok(())
}

fn round_f32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

fn latent_array(z: &LatentTensor) -> NamedArray {
    let s = z.shape();
    NamedArray::from_tensor(&Tensor::from_parts(vec![s.height, s.width, s.depth], z.data().to_vec()))
}

impl PatchResult {
    pub fn to_artifact(&self, config_snapshot: &str, seed: u64) -> Artifact {
        let mut art = Artifact::new(ARTIFACT_KIND);
        art.arrays.insert("mu".into(), latent_array(&self.params.mu));
        art.arrays.insert("log_sigma".into(), latent_array(&self.params.log_sigma));
        art.arrays.insert("z_t".into(), latent_array(&self.z_t));
        let p = &self.patch;
        art.arrays.insert(
            "patch".into(),
            NamedArray::from_tensor(&Tensor::from_parts(vec![p.height(), p.width(), 3], p.data().to_vec())),
        );
        art.meta.insert("noise_seed".into(), self.noise_seed.to_string());
        art.meta.insert("config".into(), config_snapshot.to_string());
        art.meta.insert("seed".into(), seed.to_string());
        art
    }
}

/// Loads the exported patch image from a patch artifact.
pub fn patch_from_artifact(art: &Artifact) -> Result<ImageTensor> {
    art.expect_kind(ARTIFACT_KIND)?;
    let a = art.array("patch")?;
    if a.shape.len() != 3 || a.shape[2] != 3 {
        return Err(LdpError::Shape(format!("patch array has shape {:?}", a.shape)));
    }
    ImageTensor::new(a.shape[0], a.shape[1], a.data.iter().map(|&v| v as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::AEConfig;
    use crate::autograd::{max_relative_error, numeric_gradient};
    use crate::detector::{DetectorParams, GridConfig};
    use crate::diffusion::DiffusionConfig;

    fn brute_tv(p: &ImageTensor) -> f64 {
        let mut s = 0.0;
        for c in 0..3 {
            for i in 0..p.height() - 1 {
                for j in 0..p.width() - 1 {
                    let a = p.get(i, j, c);
                    s += ((p.get(i + 1, j, c) - a).powi(2) + (p.get(i, j + 1, c) - a).powi(2) + 1e-8).sqrt();
                }
            }
        }
        s
    }

    fn random_patch(n: usize, rng: &mut RandomSource) -> ImageTensor {
        ImageTensor::new(n, n, (0..n * n * 3).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn tv_examples() {
        let flat = ImageTensor::filled(64, 64, [0.3, 0.6, 0.9]);
        let bound = 63.0 * 63.0 * 3.0 * TV_DELTA.sqrt();
        assert!(tv_loss(&flat).unwrap() <= bound * (1.0 + 1e-12));
        let t = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!((tv_value_grad(&t, false).0 - 1.0).abs() < 1e-8);
        assert!(tv_loss(&ImageTensor::filled(1, 1, [0.0; 3])).is_err());
        let mut rng = RandomSource::new(1);
        for _ in 0..20 {
            let p = random_patch(6, &mut rng);
            assert!((tv_loss(&p).unwrap() - brute_tv(&p)).abs() < 1e-9);
        }
    }

    #[test]
    fn nps_examples() {
        let set = PrintColorSet::new(vec![[0.0; 3], [1.0; 3]]).unwrap();
        let p = ImageTensor::filled(1, 1, [0.4; 3]);
        assert!((nps_loss(&p, &set).unwrap() - 3f64.sqrt() * 0.4).abs() < 1e-12);
        let on = ImageTensor::new(1, 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(nps_loss(&on, &set).unwrap(), 0.0);
        assert!(PrintColorSet::new(vec![]).is_err());
    }

    #[test]
    fn palette_file() {
        let p = PrintColorSet::default_palette();
        assert_eq!(p.colors().len(), 30);
        assert!(PrintColorSet::parse("0.1 0.2\n").is_err());
        assert!(PrintColorSet::parse("# nothing\n").is_err());
        assert!(PrintColorSet::parse("0.1 0.2 1.5\n").is_err());
    }

    #[test]
    fn kl_examples() {
        let s = LatentShape { height: 1, width: 1, depth: 1 };
        assert_eq!(kl_loss(&PatchLatentParams::standard(s)), 0.0);
        let one = |m: f64, sg: f64| {
            PatchLatentParams::new(
                LatentTensor::new(1, 1, 1, vec![m]).unwrap(),
                LatentTensor::new(1, 1, 1, vec![sg.ln()]).unwrap(),
            )
            .unwrap()
        };
        assert!((kl_loss(&one(1.0, 1.0)) - 0.5).abs() < 1e-12);
        assert!((kl_loss(&one(0.0, 2.0)) - 0.5 * (4.0 - 4f64.ln() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert!((total_loss(0.5, 0.2, 1.0, 3.0, &w) - 0.73).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &w), 0.0);
        let a = total_loss(0.3, 0.7, 11.0, 40.0, &w);
        assert!((total_loss(0.6, 1.4, 22.0, 80.0, &w) - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn reparameterize_examples() {
        let s = LatentShape { height: 1, width: 1, depth: 2 };
        let eps = LatentTensor::new(1, 1, 2, vec![0.3, -1.2]).unwrap();
        assert_eq!(reparameterize(&PatchLatentParams::standard(s), &eps).unwrap(), eps);
        let p = PatchLatentParams::new(
            LatentTensor::new(1, 1, 1, vec![2.0]).unwrap(),
            LatentTensor::new(1, 1, 1, vec![0.5f64.ln()]).unwrap(),
        )
        .unwrap();
        let z = reparameterize(&p, &LatentTensor::new(1, 1, 1, vec![1.0]).unwrap()).unwrap();
        assert!((z.data()[0] - 2.5).abs() < 1e-15);
        assert!(reparameterize(&p, &eps).is_err());
    }

    #[test]
    fn pool_factor_keeps_resolution() {
        assert_eq!(pool_factor(64, 12.0), 4);
        assert_eq!(pool_factor(64, 40.0), 1);
        assert_eq!(pool_factor(64, 1.0), 64);
    }

    #[test]
    fn empty_boxes_and_locality() {
        let mut rng = RandomSource::new(2);
        let x = random_patch(32, &mut rng);
        let patch = random_patch(16, &mut rng);
        let t = TransformConfig::default();
        assert_eq!(apply_patch(&x, &[], &patch, &t, &mut rng).unwrap(), x);

        let b = BBox::new(0.5, 0.5, 0.3, 0.6).unwrap();
        let id = TransformConfig::identity(0.3);
        let out = apply_patch(&x, &[b], &patch, &id, &mut rng).unwrap();
        // Axis-aligned footprint: side 0.3 * 0.6 * 32 = 5.76 px around (16, 16).
        let (lo, hi) = (16.0 - 2.88, 16.0 + 2.88);
        let mut changed = 0;
        for y in 0..32 {
            for xx in 0..32 {
                let inside = (y as f64 + 0.5) > lo && (y as f64 + 0.5) < hi && (xx as f64 + 0.5) > lo && (xx as f64 + 0.5) < hi;
                for c in 0..3 {
                    if inside {
                        changed += 1;
                    } else {
                        assert_eq!(out.get(y, xx, c).to_bits(), x.get(y, xx, c).to_bits());
                    }
                }
            }
        }
        assert!(changed > 0);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn outside_footprint_is_skipped() {
        let mut rng = RandomSource::new(3);
        let x = random_patch(16, &mut rng);
        let patch = random_patch(8, &mut rng);
        let g = Graph::new();
        let p = Placement {
            cx: 100.0,
            cy: 100.0,
            side: 4.0,
            angle: 0.0,
            contrast: 1.0,
            brightness: 0.0,
            noise: None,
        };
        let out = apply_patch_var(g.constant(x.to_chw()), g.constant(patch.to_chw()), &[p]);
        assert_eq!(*out.value(), x.to_chw());
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let mut rng = RandomSource::new(4);
        let x = random_patch(16, &mut rng).to_chw().map(|v| 0.2 + 0.6 * v);
        let patch = random_patch(8, &mut rng).to_chw().map(|v| 0.2 + 0.6 * v);
        let b = BBox::new(0.45, 0.55, 0.4, 0.7).unwrap();
        let place = sample_placement(&b, 16, 16, &TransformConfig::default(), &mut rng);
        let f_patch = |p: &Tensor| {
            let g = Graph::new();
            apply_patch_var(g.constant(x.clone()), g.constant(p.clone()), std::slice::from_ref(&place))
                .mean()
                .item()
        };
        let g = Graph::new();
        let pv = g.leaf(patch.clone());
        let xv = g.leaf(x.clone());
        let out = apply_patch_var(xv, pv, std::slice::from_ref(&place)).mean();
        let grads = g.backward(out);
        let num = numeric_gradient(f_patch, &patch, 1e-5);
        assert!(max_relative_error(&grads.get_or_zeros(pv), &num, 1e-6) < 1e-3);
        let f_x = |t: &Tensor| {
            let g = Graph::new();
            apply_patch_var(g.constant(t.clone()), g.constant(patch.clone()), std::slice::from_ref(&place))
                .mean()
                .item()
        };
        let num = numeric_gradient(f_x, &x, 1e-5);
        assert!(max_relative_error(&grads.get_or_zeros(xv), &num, 1e-6) < 1e-3);
    }

    #[test]
    fn regularizer_gradients_match_finite_differences() {
        let mut rng = RandomSource::new(5);
        let p = random_patch(6, &mut rng).to_chw();
        let set = PrintColorSet::default_palette();
        let g = Graph::new();
        let v = g.leaf(p.clone());
        let tv = tv_loss_var(v).unwrap();
        let nps = nps_loss_var(v, &set);
        let gt = g.backward(tv).get_or_zeros(v);
        let gn = g.backward(nps).get_or_zeros(v);
        let nt = numeric_gradient(|t| tv_value_grad(t, false).0, &p, 1e-5);
        let nn = numeric_gradient(|t| nps_value_grad(t, set.colors(), false).0, &p, 1e-5);
        assert!(max_relative_error(&gt, &nt, 1e-6) < 1e-3);
        assert!(max_relative_error(&gn, &nn, 1e-6) < 1e-3);

        let mu = rng.normal_tensor(&[2, 2, 2]);
        let ls = rng.normal_tensor(&[2, 2, 2]).map(|v| 0.3 * v);
        let eps = rng.normal_tensor(&[2, 2, 2]);
        let g = Graph::new();
        let (m, l) = (g.leaf(mu.clone()), g.leaf(ls.clone()));
        let kl = kl_loss_var(m, l);
        let grads = g.backward(kl);
        let kl_of = |m: &Tensor, l: &Tensor| {
            let g = Graph::new();
            kl_loss_var(g.constant(m.clone()), g.constant(l.clone())).item()
        };
        let nm = numeric_gradient(|t| kl_of(t, &ls), &mu, 1e-5);
        let nl = numeric_gradient(|t| kl_of(&mu, t), &ls, 1e-5);
        assert!(max_relative_error(&grads.get_or_zeros(m), &nm, 1e-6) < 1e-3);
        assert!(max_relative_error(&grads.get_or_zeros(l), &nl, 1e-6) < 1e-3);

        let g = Graph::new();
        let (m, l) = (g.leaf(mu.clone()), g.leaf(ls.clone()));
        let z = reparameterize_var(m, l, &eps).sum();
        let grads = g.backward(z);
        assert!(grads.get_or_zeros(m).data().iter().all(|&d| d == 1.0));
        let expect = ls.zip_map(&eps, |l, e| e * l.exp());
        assert!(max_relative_error(&grads.get_or_zeros(l), &expect, 1e-9) < 1e-12);
    }

    struct Stack {
        ae: AEParams,
        diff: DenoiserParams,
        sched: NoiseSchedule,
    }

    fn tiny_stack() -> Stack {
        let ae_cfg = AEConfig {
            image_size: 16,
            downsample_factor: 4,
            latent_depth: 2,
            ..AEConfig::default()
        };
        let ae = AEParams::init(&ae_cfg, &mut RandomSource::new(1)).unwrap();
        let diff_cfg = DiffusionConfig {
            steps: 5,
            beta_start: 0.05,
            beta_end: 0.2,
            attack_stride: 1,
            base_width: 4,
            time_embed_dim: 4,
            ..DiffusionConfig::default()
        };
        let diff = DenoiserParams::init(&diff_cfg, ae.latent_shape(), &mut RandomSource::new(2)).unwrap();
        let sched = diff_cfg.attack_schedule().unwrap();
        Stack { ae, diff, sched }
    }

    #[test]
    fn generate_patch_gradient_matches_finite_differences() {
        let st = tiny_stack();
        let shape = st.ae.latent_shape();
        let noises = chain_noises(&st.sched, shape, NoiseMode::Frozen(3));
        let z = RandomSource::new(4).normal_tensor(&shape.chw());
        let weights = RandomSource::new(5).normal_tensor(&[3, 16, 16]);
        let f = |t: &Tensor| {
            let g = Graph::new();
            let p = generate_patch_var(&st.ae, &st.diff, &st.sched, g.constant(t.clone()), &noises).unwrap();
            (p * g.constant(weights.clone())).sum().item()
        };
        let g = Graph::new();
        let zv = g.leaf(z.clone());
        let p = generate_patch_var(&st.ae, &st.diff, &st.sched, zv, &noises).unwrap();
        let analytic = g.backward((p * g.constant(weights.clone())).sum()).get_or_zeros(zv);
        let numeric = numeric_gradient(f, &z, 1e-5);
        let err = max_relative_error(&analytic, &numeric, 1e-4);
        assert!(err < 1e-3, "{err}");

        let zl = LatentTensor::from_chw(&z).unwrap();
        let a = generate_patch(&st.ae, &st.diff, &st.sched, &zl, 3).unwrap();
        assert_eq!((a.height(), a.width()), (16, 16));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, generate_patch(&st.ae, &st.diff, &st.sched, &zl, 3).unwrap());
    }

    fn tiny_attack(st: &Stack, alpha: f64, steps: usize, seed: u64) -> PatchResult {
        let grid = GridConfig {
            image_size: 16,
            grid_size: 4,
            base_width: 4,
            ..GridConfig::default()
        };
        let det = DetectorParams::init(&grid, &mut RandomSource::new(6)).unwrap();
        let mut rng = RandomSource::new(7);
        let images: Vec<_> = (0..4).map(|_| random_patch(16, &mut rng)).collect();
        let boxes = vec![vec![BBox::new(0.5, 0.5, 0.4, 0.8).unwrap()]; 4];
        let colors = PrintColorSet::default_palette();
        let setup = AttackSetup {
            ae: &st.ae,
            diff: &st.diff,
            sched: &st.sched,
            images: &images,
            boxes: &boxes,
            weights: LossWeights { alpha, ..LossWeights::default() },
            transform: TransformConfig::default(),
            colors: &colors,
            config: AttackConfig {
                steps,
                batch_size: 2,
                final_candidates: 2,
                ..AttackConfig::default()
            },
        };
        optimize_patch(&setup, &det, &mut RandomSource::new(seed)).unwrap()
    }

    #[test]
    fn heavy_kl_weight_keeps_the_standard_normal() {
        let st = tiny_stack();
        let r = tiny_attack(&st, 100.0, 150, 8);
        let kl = kl_loss(&r.params);
        assert!(kl < 1e-3, "{kl}");
        assert_eq!(r.history.len(), 150);
    }

    #[test]
    fn attack_is_deterministic() {
        let st = tiny_stack();
        let a = tiny_attack(&st, 0.5, 5, 9);
        let b = tiny_attack(&st, 0.5, 5, 9);
        assert_eq!(a, b);
        let c = tiny_attack(&st, 0.5, 5, 10);
        assert_ne!(a.params, c.params);
        for r in &a.history {
            let w = LossWeights::default();
            assert!((total_loss(r.l_det, r.l_kl, r.l_tv, r.l_nps, &w) - r.l_total).abs() < 1e-12);
        }
        let art = a.to_artifact("{}", 9);
        let back = patch_from_artifact(&art).unwrap();
        assert!(back.data().iter().zip(a.patch.data()).all(|(x, y)| (x - y).abs() < 1e-6));
    }
}
