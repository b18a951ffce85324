//! Attack measurement: pseudo ground truth, average precision, attack success
//! rate and report types.

use serde::{Deserialize, Serialize};

use crate::detector::{PersonDetector, SynthScene};
use crate::error::{LdpError, Result};
use crate::geometry::{BBox, ScoredBox};
use crate::image::ImageTensor;
use crate::patch::{apply_patch, TransformConfig};
use crate::rng::RandomSource;

/// IoU at which a prediction counts as a match.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Thresholded person detections on clean images, used both as labels and as
/// patch placement targets.
pub fn pseudo_ground_truth<D: PersonDetector + ?Sized>(
    det: &D,
    images: &[ImageTensor],
    thresh: f64,
) -> Result<Vec<Vec<BBox>>> {
    images
        .iter()
        .map(|x| Ok(det.person_boxes(x, thresh)?.into_iter().map(|s| s.bbox).collect()))
        .collect()
}

/// Ranks all predictions by confidence and greedily matches each to the
/// unmatched ground-truth box of highest IoU in its image.
pub fn precision_recall(gt: &[Vec<BBox>], preds: &[Vec<ScoredBox>], iou_thresh: f64) -> Result<Vec<PRPoint>> {
    if gt.len() != preds.len() {
        return Err(LdpError::Shape(format!(
            "{} ground-truth lists but {} prediction lists",
            gt.len(),
            preds.len()
        )));
    }
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(LdpError::Config(format!("iou threshold must lie in (0, 1), got {iou_thresh}")));
    }
    let total: usize = gt.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(LdpError::Undefined("average precision needs at least one ground-truth box".into()));
    }
    let mut ranked: Vec<(usize, &ScoredBox)> = preds
        .iter()
        .enumerate()
        .flat_map(|(i, ps)| ps.iter().map(move |p| (i, p)))
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::with_capacity(ranked.len());
    for (img, p) in ranked {
        let best = gt[img]
            .iter()
            .enumerate()
            .filter(|(k, _)| !used[img][*k])
            .map(|(k, g)| (k, g.iou(&p.bbox)))
            .filter(|(_, iou)| *iou >= iou_thresh)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((k, _)) => {
                used[img][k] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        points.push(PRPoint {
            threshold: p.score,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / total as f64,
        });
    }
    Ok(points)
}

/// Single-class all-point interpolated average precision in `[0, 1]`.
pub fn compute_ap(gt: &[Vec<BBox>], preds: &[Vec<ScoredBox>], iou_thresh: f64) -> Result<f64> {
    let points = precision_recall(gt, preds, iou_thresh)?;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut interp = vec![0.0; points.len()];
    let mut running: f64 = 0.0;
    for (k, p) in points.iter().enumerate().rev() {
        running = running.max(p.precision);
        interp[k] = running;
    }
    for (p, ip) in points.iter().zip(&interp) {
        if p.recall > prev_recall {
            ap += (p.recall - prev_recall) * ip;
            prev_recall = p.recall;
        }
    }
    Ok(ap)
}

/// Mean average precision in percent of `det` on `images` against `gt`, using
/// every person prediction scoring at least `floor`.
pub fn map_percent<D: PersonDetector + ?Sized>(
    det: &D,
    images: &[ImageTensor],
    gt: &[Vec<BBox>],
    floor: f64,
) -> Result<f64> {
    let preds = images
        .iter()
        .map(|x| det.person_boxes(x, floor))
        .collect::<Result<Vec<_>>>()?;
    Ok(100.0 * compute_ap(gt, &preds, MATCH_IOU)?)
}

/// Percent of ground-truth-bearing images in which no patched detection at
/// `thresh` overlaps any of that image's ground-truth boxes.
pub fn compute_asr<D: PersonDetector + ?Sized>(
    det: &D,
    patched: &[ImageTensor],
    gt: &[Vec<BBox>],
    thresh: f64,
) -> Result<f64> {
    if patched.is_empty() {
        return Err(LdpError::Empty("attack success rate image set".into()));
    }
    if patched.len() != gt.len() {
        return Err(LdpError::Shape(format!("{} images but {} ground-truth lists", patched.len(), gt.len())));
    }
    let mut bearing = 0usize;
    let mut escaped = 0usize;
    for (x, boxes) in patched.iter().zip(gt) {
        if boxes.is_empty() {
            continue;
        }
        bearing += 1;
        let found = det.person_boxes(x, thresh)?;
        let hit = found
            .iter()
            .any(|f| boxes.iter().any(|g| g.iou(&f.bbox) >= MATCH_IOU));
        if !hit {
            escaped += 1;
        }
    }
    if bearing == 0 {
        return Err(LdpError::Undefined("no image has a ground-truth person box".into()));
    }
    Ok(100.0 * escaped as f64 / bearing as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Confidence at which clean detections become pseudo ground truth.
    pub gt_threshold: f64,
    /// Lowest confidence of predictions entering the precision-recall curve.
    pub prediction_floor: f64,
    /// Confidence at which a person counts as detected for ASR.
    pub asr_threshold: f64,
    pub held_out_images: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gt_threshold: 0.5,
            prediction_floor: 0.5,
            asr_threshold: 0.5,
            held_out_images: 100,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gt_threshold", self.gt_threshold),
            ("prediction_floor", self.prediction_floor),
            ("asr_threshold", self.asr_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(LdpError::Config(format!("eval.{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.held_out_images == 0 {
            return Err(LdpError::Config("eval.held_out_images must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub train_model: String,
    pub victim_model: String,
    pub clean_map: f64,
    pub patched_map: f64,
    pub asr: f64,
    pub clean_max_conf: Vec<f64>,
    pub patched_max_conf: Vec<f64>,
    pub config: EvalConfig,
}

impl EvalReport {
    pub fn mean_clean_conf(&self) -> f64 {
        mean(&self.clean_max_conf)
    }

    pub fn mean_patched_conf(&self) -> f64 {
        mean(&self.patched_max_conf)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Scores clean and patched versions of the same images against the clean
/// pseudo ground truth.
pub fn evaluate_pair<D: PersonDetector + ?Sized>(
    det: &D,
    clean: &[ImageTensor],
    patched: &[ImageTensor],
    gt: &[Vec<BBox>],
    cfg: &EvalConfig,
) -> Result<(f64, f64, f64, Vec<f64>, Vec<f64>)> {
    let clean_map = map_percent(det, clean, gt, cfg.prediction_floor)?;
    let patched_map = map_percent(det, patched, gt, cfg.prediction_floor)?;
    let asr = compute_asr(det, patched, gt, cfg.asr_threshold)?;
    let cc = clean.iter().map(|x| det.max_person_confidence(x)).collect::<Result<Vec<_>>>()?;
    let pc = patched.iter().map(|x| det.max_person_confidence(x)).collect::<Result<Vec<_>>>()?;
    Ok((clean_map, patched_map, asr, cc, pc))
}

pub const CSV_HEADER: [&str; 5] = ["train_model", "victim_model", "clean_map", "patched_map", "asr"];

/// Writes one CSV row per report.
pub fn write_reports_csv<W: std::io::Write>(reports: &[EvalReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| LdpError::Config(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(err)?;
    for r in reports {
        w.write_record([
            r.train_model.clone(),
            r.victim_model.clone(),
            format!("{:.4}", r.clean_map),
            format!("{:.4}", r.patched_map),
            format!("{:.4}", r.asr),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| LdpError::Config(format!("csv: {e}")))?;
    Ok(())
}

/// AP of the person class against the true labels of synthetic scenes, using
/// every person prediction scoring at least `floor`.
pub fn labelled_ap<D: PersonDetector + ?Sized>(det: &D, scenes: &[SynthScene], person: usize, floor: f64) -> Result<f64> {
    let gt: Vec<Vec<BBox>> = scenes
        .iter()
        .map(|s| s.objects.iter().filter(|o| o.class == person).map(|o| o.bbox).collect())
        .collect();
    let preds = scenes
        .iter()
        .map(|s| det.person_boxes(&s.image, floor))
        .collect::<Result<Vec<_>>>()?;
    compute_ap(&gt, &preds, MATCH_IOU)
}

/// Composites `patch` over every box of every image. Image `i` draws its
/// transforms from child stream `i`, so results do not depend on batching.
pub fn patch_images(
    images: &[ImageTensor],
    boxes: &[Vec<BBox>],
    patch: &ImageTensor,
    transform: &TransformConfig,
    rng: &RandomSource,
) -> Result<Vec<ImageTensor>> {
    if images.len() != boxes.len() {
        return Err(LdpError::Shape(format!("{} images but {} box lists", images.len(), boxes.len())));
    }
    images
        .iter()
        .zip(boxes)
        .enumerate()
        .map(|(i, (x, b))| apply_patch(x, b, patch, transform, &mut rng.child(i as u64)))
        .collect()
}

/// Full protocol for one detector and one patch: pseudo ground truth on the
/// clean images, patch placement on those boxes, then mAP, ASR and confidences
/// over the images that received a patch.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_patch(
    train_model: &str,
    victim_model: &str,
    det: &dyn PersonDetector,
    images: &[ImageTensor],
    patch: &ImageTensor,
    transform: &TransformConfig,
    cfg: &EvalConfig,
    rng: &RandomSource,
) -> Result<EvalReport> {
    cfg.validate()?;
    let all_gt = pseudo_ground_truth(det, images, cfg.gt_threshold)?;
    // Images without a person get no patch and contribute nothing to mAP or
    // ASR at the reporting threshold; only composites are scored.
    let (images, gt): (Vec<ImageTensor>, Vec<Vec<BBox>>) = images
        .iter()
        .zip(all_gt)
        .filter(|(_, g)| !g.is_empty())
        .map(|(x, g)| (x.clone(), g))
        .unzip();
    if images.is_empty() {
        return Err(LdpError::Undefined(format!("no image has a person detection at {}", cfg.gt_threshold)));
    }
    let patched = patch_images(&images, &gt, patch, transform, rng)?;
    let (clean_map, patched_map, asr, clean_max_conf, patched_max_conf) = evaluate_pair(det, &images, &patched, &gt, cfg)?;
    Ok(EvalReport {
        train_model: train_model.to_string(),
        victim_model: victim_model.to_string(),
        clean_map,
        patched_map,
        asr,
        clean_max_conf,
        patched_max_conf,
        config: *cfg,
    })
}

/// A detector with the name used in reports.
#[derive(Clone, Copy)]
pub struct NamedDetector<'a> {
    pub name: &'a str,
    pub det: &'a dyn PersonDetector,
}

/// Transfer matrix: one patch per training detector (from `make_patch`),
/// evaluated against every victim. Row `i`, column `j` is train `i` on victim `j`.
pub fn cross_model_matrix(
    train: &[NamedDetector<'_>],
    victims: &[NamedDetector<'_>],
    images: &[ImageTensor],
    transform: &TransformConfig,
    cfg: &EvalConfig,
    rng: &RandomSource,
    mut make_patch: impl FnMut(usize, &NamedDetector<'_>) -> Result<ImageTensor>,
) -> Result<Vec<Vec<EvalReport>>> {
    if train.is_empty() || victims.is_empty() {
        return Err(LdpError::Empty("cross-model matrix needs training and victim detectors".into()));
    }
    let mut rows = Vec::with_capacity(train.len());
    for (i, t) in train.iter().enumerate() {
        let patch = make_patch(i, t)?;
        let row = victims
            .iter()
            .map(|v| evaluate_patch(t.name, v.name, v.det, images, &patch, transform, cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Patched mAP laid out as a matrix: a `train_model` column, then one column
/// per victim.
pub fn write_matrix_csv<W: std::io::Write>(rows: &[Vec<EvalReport>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| LdpError::Config(format!("csv: {e}"));
    let mut header = vec!["train_model".to_string()];
    if let Some(first) = rows.first() {
        header.extend(first.iter().map(|r| r.victim_model.clone()));
    }
    w.write_record(&header).map_err(err)?;
    for row in rows {
        let mut rec = vec![row.first().map(|r| r.train_model.clone()).unwrap_or_default()];
        rec.extend(row.iter().map(|r| format!("{:.4}", r.patched_map)));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| LdpError::Config(format!("csv: {e}")))?;
    Ok(())
}
