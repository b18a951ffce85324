//! The attack target: a single-scale grid detector in the style of early YOLO.
//!
//! Each of the `S × S` cells predicts one box (sigmoid offsets within the cell
//! and sigmoid width/height as image fractions), an objectness logit and class
//! logits. The head output is `[5 + K, S, S]` with channel order
//! `tx, ty, tw, th, obj, cls_0 .. cls_{K-1}`.

mod synth;

pub use synth::{dump_dataset, generate_scene, generate_synthetic_dataset, SceneObject, SynthScene};

use serde::{Deserialize, Serialize};

use crate::artifact::Artifact;
use crate::autograd::{Graph, Var};
use crate::error::{LdpError, Result};
use crate::geometry::{non_max_suppression, BBox, Detection, ScoredBox};
use crate::image::ImageTensor;
use crate::nn::{Adam, AdamConfig, Bound, ParamStore};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

pub const ARTIFACT_KIND: &str = "detector";

/// IoU above which the lower-scoring of two person boxes is suppressed.
pub const NMS_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub image_size: usize,
    pub grid_size: usize,
    pub classes: Vec<String>,
    /// Name of the class whose confidence the attack suppresses.
    pub person_class: String,
    pub confidence_threshold: f64,
    pub base_width: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            grid_size: 8,
            classes: vec!["person".into(), "disk".into(), "square".into()],
            person_class: "person".into(),
            confidence_threshold: 0.5,
            base_width: 16,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.grid_size;
        if s < 2 {
            return Err(LdpError::Config(format!("grid_size must be >= 2, got {s}")));
        }
        if !self.image_size.is_multiple_of(s) || !(self.image_size / s).is_power_of_two() || self.image_size / s < 2 {
            return Err(LdpError::Config(format!(
                "image_size / grid_size must be a power of two >= 2 ({} / {s})",
                self.image_size
            )));
        }
        let persons = self.classes.iter().filter(|c| **c == self.person_class).count();
        if persons != 1 {
            return Err(LdpError::Config(format!(
                "person class {:?} must appear exactly once in classes, found {persons}",
                self.person_class
            )));
        }
        let mut sorted = self.classes.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.classes.len() || self.classes.len() < 2 {
            return Err(LdpError::Config("classes must be >= 2 distinct labels".into()));
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold < 1.0) {
            return Err(LdpError::Config("confidence_threshold must lie in (0, 1)".into()));
        }
        if self.base_width == 0 {
            return Err(LdpError::Config("base_width must be positive".into()));
        }
        Ok(())
    }

    pub fn person_index(&self) -> usize {
        self.classes
            .iter()
            .position(|c| *c == self.person_class)
            .expect("validated config has a person class")
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn stages(&self) -> usize {
        (self.image_size / self.grid_size).trailing_zeros() as usize
    }

    fn width(&self, stage: usize) -> usize {
        (self.base_width << stage).min(4 * self.base_width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorTrainConfig {
    pub scenes: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Probability per person object and epoch of pasting a flat-colored
    /// square over its center, so that occlusion alone does not hide people.
    pub occlusion_prob: f64,
    /// Fraction of occluders that are gray rather than a random flat color.
    pub occluder_gray_fraction: f64,
    /// Objectness target of the cell responsible for an object.
    pub objectness_target: f64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            scenes: 1000,
            epochs: 30,
            learning_rate: 2e-3,
            batch_size: 16,
            occlusion_prob: 0.1,
            occluder_gray_fraction: 1.0,
            objectness_target: 0.9,
        }
    }
}

impl DetectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(LdpError::Config("detector scenes, batch_size and learning_rate must be positive".into()));
        }
        if !(self.objectness_target > 0.5 && self.objectness_target <= 1.0) {
            return Err(LdpError::Config("objectness_target must lie in (0.5, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) || !(0.0..=1.0).contains(&self.occluder_gray_fraction) {
            return Err(LdpError::Config("occlusion_prob and occluder_gray_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub config: GridConfig,
    pub params: ParamStore,
}

impl DetectorParams {
    pub fn init(config: &GridConfig, rng: &mut RandomSource) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new();
        let mut cin = 3;
        for i in 0..config.stages() {
            ps.add_conv(&format!("s{i}"), cin, config.width(i), 3, rng);
            cin = config.width(i);
        }
        ps.add_conv("head1", cin, cin, 3, rng);
        ps.add_conv("head2", cin, cin, 3, rng);
        ps.init_normal("out.w", &[5 + config.num_classes(), cin, 1, 1], cin, 0.1, rng);
        ps.init_zeros("out.b", &[5 + config.num_classes()]);
        Ok(Self {
            config: config.clone(),
            params: ps,
        })
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
        let config: GridConfig = serde_json::from_str(art.meta("config")?)
            .map_err(|e| LdpError::Config(format!("detector config: {e}")))?;
        let reference = Self::init(&config, &mut RandomSource::new(0))?;
        let params = ParamStore::read_arrays("", &art.arrays);
        params.check_layout(&reference.params, "detector")?;
        Ok(Self { config, params })
    }

    fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let s = self.config.image_size;
        if h != s || w != s {
            return Err(LdpError::Shape(format!("detector expects {s}x{s} images, got {h}x{w}")));
        }
        Ok(())
    }

    /// Raw head output `[5 + K, S, S]` for a `[3, H, W]` input.
    pub fn forward<'g>(&self, b: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let mut h = x;
        for i in 0..self.config.stages() {
            h = b.conv(h, &format!("s{i}"), 2, 1).leaky_relu(0.1);
        }
        h = b.conv(h, "head1", 1, 1).leaky_relu(0.1);
        h = b.conv(h, "head2", 1, 1).leaky_relu(0.1);
        b.conv(h, "out", 1, 0)
    }

    /// Differentiable map of `obj × P(person)` per cell, `[1, S, S]`.
    pub fn person_scores<'g>(&self, raw: Var<'g>) -> Var<'g> {
        let k = self.config.num_classes();
        let p = self.config.person_index();
        let obj = raw.slice_channels(4, 5).sigmoid();
        let cls = raw.slice_channels(5, 5 + k).softmax_channels().slice_channels(p, p + 1);
        obj * cls
    }

    /// One candidate per grid cell, row-major over cells.
    pub fn detect(&self, x: &ImageTensor) -> Result<Vec<Detection>> {
        self.check_input(x.height(), x.width())?;
        let g = Graph::new();
        let b = self.params.bind_frozen(&g);
        let raw = self.forward(&b, g.constant(x.to_chw()));
        Ok(decode_head(&raw.value(), self.config.num_classes()))
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Decodes a raw `[5 + K, S, S]` head into `S²` detections.
pub fn decode_head(raw: &Tensor, num_classes: usize) -> Vec<Detection> {
    let (c, s, _) = raw.dims3();
    debug_assert_eq!(c, 5 + num_classes);
    let plane = s * s;
    let d = raw.data();
    let at = |ch: usize, cell: usize| d[ch * plane + cell];
    (0..plane)
        .map(|cell| {
            let (i, j) = (cell / s, cell % s);
            let bbox = BBox {
                cx: (j as f64 + sigmoid(at(0, cell))) / s as f64,
                cy: (i as f64 + sigmoid(at(1, cell))) / s as f64,
                w: sigmoid(at(2, cell)),
                h: sigmoid(at(3, cell)),
            };
            let logits: Vec<f64> = (0..num_classes).map(|k| at(5 + k, cell)).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            Detection {
                bbox,
                obj: sigmoid(at(4, cell)),
                cls: exps.into_iter().map(|e| e / z).collect(),
            }
        })
        .collect()
}

/// Contract for a differentiable person detector that can be attacked and
/// evaluated. Any model honoring it is a valid target.
pub trait PersonDetector {
    /// Side length of the square input the model accepts.
    fn input_size(&self) -> usize;
    fn confidence_threshold(&self) -> f64;
    /// Index of the person class inside each `Detection::cls`.
    fn person_index(&self) -> usize;
    /// All candidates for one image.
    fn detect(&self, x: &ImageTensor) -> Result<Vec<Detection>>;
    /// Per-candidate `obj × P(person)` for each `[3, H, W]` input, as graph nodes.
    fn person_score_maps<'g>(&self, g: &'g Graph, xs: &[Var<'g>]) -> Vec<Var<'g>>;

    /// Person boxes with `obj × P(person) ≥ thresh`, after greedy suppression.
    fn person_boxes(&self, x: &ImageTensor, thresh: f64) -> Result<Vec<ScoredBox>> {
        let p = self.person_index();
        let boxes = self
            .detect(x)?
            .into_iter()
            .map(|d| ScoredBox { bbox: d.bbox, score: d.score(p) })
            .filter(|s| s.score >= thresh)
            .collect();
        Ok(non_max_suppression(boxes, NMS_IOU))
    }

    /// Highest `obj × P(person)` over all candidates.
    fn max_person_confidence(&self, x: &ImageTensor) -> Result<f64> {
        let p = self.person_index();
        Ok(self.detect(x)?.iter().map(|d| d.score(p)).fold(0.0, f64::max))
    }
}

impl PersonDetector for DetectorParams {
    fn input_size(&self) -> usize {
        self.config.image_size
    }

    fn confidence_threshold(&self) -> f64 {
        self.config.confidence_threshold
    }

    fn person_index(&self) -> usize {
        self.config.person_index()
    }

    fn detect(&self, x: &ImageTensor) -> Result<Vec<Detection>> {
        DetectorParams::detect(self, x)
    }

    fn person_score_maps<'g>(&self, g: &'g Graph, xs: &[Var<'g>]) -> Vec<Var<'g>> {
        let b = self.params.bind_frozen(g);
        xs.iter().map(|&x| self.person_scores(self.forward(&b, x))).collect()
    }
}

/// Per-image maximum of a person-score map.
pub fn max_confidence<'g>(scores: Var<'g>) -> Var<'g> {
    scores.max()
}

/// `L_det`: mean over the batch of each image's maximum person confidence.
pub fn detection_loss_var<'g, D: PersonDetector + ?Sized>(det: &D, g: &'g Graph, images: &[Var<'g>]) -> Result<Var<'g>> {
    if images.is_empty() {
        return Err(LdpError::Empty("detection loss batch".into()));
    }
    let mut total: Option<Var> = None;
    for scores in det.person_score_maps(g, images) {
        let m = max_confidence(scores);
        total = Some(match total {
            Some(acc) => acc + m,
            None => m,
        });
    }
    Ok(total.unwrap().scale(1.0 / images.len() as f64))
}

pub fn detection_loss<D: PersonDetector + ?Sized>(det: &D, batch: &[ImageTensor]) -> Result<f64> {
    if batch.is_empty() {
        return Err(LdpError::Empty("detection loss batch".into()));
    }
    let n = det.input_size();
    if let Some(x) = batch.iter().find(|x| x.height() != n || x.width() != n) {
        return Err(LdpError::Shape(format!("detector expects {n}x{n} images, got {}x{}", x.height(), x.width())));
    }
    let g = Graph::new();
    let xs: Vec<_> = batch.iter().map(|x| g.constant(x.to_chw())).collect();
    Ok(detection_loss_var(det, &g, &xs)?.item())
}

const COORD_WEIGHT: f64 = 5.0;
const NOOBJ_WEIGHT: f64 = 0.5;

/// Loss and gradient of the grid training objective for one image: squared
/// error on the responsible cell's box, weighted BCE on objectness everywhere,
/// and cross-entropy on the responsible cell's class. `positive` is the
/// objectness target of a responsible cell.
fn grid_loss_and_grad(raw: &Tensor, objects: &[SceneObject], num_classes: usize, positive: f64) -> (f64, Tensor) {
    let (_, s, _) = raw.dims3();
    let plane = s * s;
    let d = raw.data();
    let mut grad = Tensor::zeros(raw.shape());
    let gd = grad.data_mut();

    let mut owner: Vec<Option<&SceneObject>> = vec![None; plane];
    for o in objects {
        let j = ((o.bbox.cx * s as f64) as usize).min(s - 1);
        let i = ((o.bbox.cy * s as f64) as usize).min(s - 1);
        let cell = i * s + j;
        if owner[cell].is_none_or(|p| p.bbox.area() < o.bbox.area()) {
            owner[cell] = Some(o);
        }
    }

    let mut loss = 0.0;
    for cell in 0..plane {
        let z = d[4 * plane + cell];
        let p = sigmoid(z);
        match owner[cell] {
            Some(o) => {
                let (i, j) = (cell / s, cell % s);
                let obj_target = positive;
                let targets = [
                    o.bbox.cx * s as f64 - j as f64,
                    o.bbox.cy * s as f64 - i as f64,
                    o.bbox.w,
                    o.bbox.h,
                ];
                for (ch, t) in targets.iter().enumerate() {
                    let v = sigmoid(d[ch * plane + cell]);
                    loss += COORD_WEIGHT * (v - t).powi(2);
                    gd[ch * plane + cell] = COORD_WEIGHT * 2.0 * (v - t) * v * (1.0 - v);
                }
                // BCE with a soft target: softplus(z) - t·z.
                loss += z.max(0.0) + (-(z.abs())).exp().ln_1p() - obj_target * z;
                gd[4 * plane + cell] = p - obj_target;
                let logits: Vec<f64> = (0..num_classes).map(|k| d[(5 + k) * plane + cell]).collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z_sum: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                loss += -(logits[o.class] - m - z_sum.ln());
                for (k, l) in logits.iter().enumerate() {
                    let pk = (l - m).exp() / z_sum;
                    gd[(5 + k) * plane + cell] = pk - if k == o.class { 1.0 } else { 0.0 };
                }
            }
            None => {
                // BCE with target 0: softplus(z).
                loss += NOOBJ_WEIGHT * (z.max(0.0) + (-(z.abs())).exp().ln_1p());
                gd[4 * plane + cell] = NOOBJ_WEIGHT * p;
            }
        }
    }
    (loss, grad)
}

/// The training objective as a graph node on the raw head output.
pub fn grid_loss<'g>(raw: Var<'g>, objects: &[SceneObject], num_classes: usize, positive: f64) -> Var<'g> {
    let (loss, grad) = grid_loss_and_grad(&raw.value(), objects, num_classes, positive);
    raw.graph().op(Tensor::scalar(loss), &[raw], move |g, _| {
        let k = g.item();
        vec![Some(grad.map(|v| v * k))]
    })
}

/// Pastes a flat square over each person's center with probability `prob`.
fn occlude(scene: &SynthScene, person: usize, train: &DetectorTrainConfig, rng: &mut RandomSource) -> ImageTensor {
    let mut img = scene.image.clone();
    let size = img.height() as f64;
    for o in scene.objects.iter().filter(|o| o.class == person) {
        if rng.uniform() >= train.occlusion_prob {
            continue;
        }
        let side = o.bbox.h * rng.uniform_range(0.2, 0.5) * size;
        let cx = (o.bbox.cx + rng.uniform_range(-0.1, 0.1) * o.bbox.w) * size;
        let cy = (o.bbox.cy + rng.uniform_range(-0.1, 0.1) * o.bbox.h) * size;
        let color = if rng.uniform() < train.occluder_gray_fraction {
            let v = rng.uniform_range(0.3, 0.7);
            [v, v, v]
        } else {
            [rng.uniform(), rng.uniform(), rng.uniform()]
        };
        let (x0, x1) = ((cx - side / 2.0).round().max(0.0) as usize, ((cx + side / 2.0).round() as usize).min(img.width()));
        let (y0, y1) = ((cy - side / 2.0).round().max(0.0) as usize, ((cy + side / 2.0).round() as usize).min(img.height()));
        for y in y0..y1 {
            for x in x0..x1 {
                for (c, v) in color.iter().enumerate() {
                    img.set(y, x, c, *v);
                }
            }
        }
    }
    img
}

/// Occlusion followed by a random horizontal flip.
fn augment(
    scene: &SynthScene,
    person: usize,
    train: &DetectorTrainConfig,
    rng: &mut RandomSource,
) -> (ImageTensor, Vec<SceneObject>) {
    let img = occlude(scene, person, train, rng);
    if rng.uniform() >= 0.5 {
        return (img, scene.objects.clone());
    }
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.set(y, x, c, img.get(y, w - 1 - x, c));
            }
        }
    }
    let objects = scene
        .objects
        .iter()
        .map(|o| SceneObject {
            bbox: BBox { cx: 1.0 - o.bbox.cx, ..o.bbox },
            class: o.class,
        })
        .collect();
    (out, objects)
}

/// Trains the grid detector with Adam; returns the parameters and the loss
/// of every optimizer step.
pub fn train_detector(
    scenes: &[SynthScene],
    cfg: &GridConfig,
    train: &DetectorTrainConfig,
    rng: &mut RandomSource,
) -> Result<(DetectorParams, Vec<f64>)> {
    train.validate()?;
    if scenes.is_empty() {
        return Err(LdpError::Empty("detector training scenes".into()));
    }
    let mut det = DetectorParams::init(cfg, rng)?;
    for s in scenes {
        det.check_input(s.image.height(), s.image.width())?;
    }
    let mut opt = Adam::new(AdamConfig {
        lr: train.learning_rate,
        ..Default::default()
    });
    let k = cfg.num_classes();
    let person = cfg.person_index();
    let mut losses = Vec::new();
    for epoch in 0..train.epochs {
        // Cosine decay over the run.
        let progress = epoch as f64 / train.epochs.max(1) as f64;
        opt.set_lr(train.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let order = rng.permutation(scenes.len());
        let mut epoch_loss = 0.0;
        for batch in order.chunks(train.batch_size) {
            let g = Graph::new();
            let b = det.params.bind(&g);
            let mut total: Option<Var> = None;
            for &i in batch {
                let (img, objects) = augment(&scenes[i], person, train, rng);
                let raw = det.forward(&b, g.constant(img.to_chw()));
                let l = grid_loss(raw, &objects, k, train.objectness_target);
                total = Some(match total {
                    Some(acc) => acc + l,
                    None => l,
                });
            }
            let loss = total.unwrap().scale(1.0 / batch.len() as f64);
            let value = loss.item();
            if !value.is_finite() {
                return Err(LdpError::Divergence(format!("detector loss became {value} in epoch {epoch}")));
            }
            let grads = g.backward(loss);
            opt.step(&mut det.params, &b.grads(&grads));
            epoch_loss += value * batch.len() as f64;
            losses.push(value);
        }
        log::info!("detector epoch {epoch}: loss {:.4}", epoch_loss / scenes.len() as f64);
    }
    if !det.params.all_finite() {
        return Err(LdpError::Divergence("detector weights are not finite".into()));
    }
    det.params.round_to_f32();
    Ok((det, losses))
}
