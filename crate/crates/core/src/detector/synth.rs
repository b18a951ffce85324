//! Synthetic detection scenes: textured backgrounds with one to three
//! non-overlapping shapes. The person proxy is an upright figure (head, torso,
//! two legs); the other classes are plain geometric shapes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::hsv_to_rgb;
use crate::error::{LdpError, Result};
use crate::geometry::BBox;
use crate::image::ImageTensor;
use crate::rng::RandomSource;

use super::GridConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub image: ImageTensor,
    pub objects: Vec<SceneObject>,
}

/// Shape drawn for a class: the person proxy gets the figure, every other
/// class cycles through disk / square / triangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Figure,
    Disk,
    Square,
    Triangle,
}

fn shape_for(cfg: &GridConfig, class: usize) -> Shape {
    if class == cfg.person_index() {
        return Shape::Figure;
    }
    let others = [Shape::Disk, Shape::Square, Shape::Triangle];
    let rank = if class > cfg.person_index() { class - 1 } else { class };
    others[rank % others.len()]
}

/// Whether normalized point `(u, v)` within the box (both in `[0, 1]`) is
/// inside the shape; `aspect` is the box's width over height.
fn inside(shape: Shape, u: f64, v: f64, aspect: f64) -> bool {
    match shape {
        Shape::Figure => {
            let head = ((u - 0.5) * aspect).powi(2) + (v - 0.11).powi(2) < 0.11f64.powi(2);
            let torso = (0.22..=0.62).contains(&v);
            let legs = v > 0.62 && ((0.1..=0.42).contains(&u) || (0.58..=0.9).contains(&u));
            head || torso || legs
        }
        Shape::Disk => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        Shape::Square => true,
        Shape::Triangle => (u - 0.5).abs() <= v / 2.0,
    }
}

fn background(size: usize, rng: &mut RandomSource) -> ImageTensor {
    let hue = rng.uniform();
    let c0 = hsv_to_rgb(hue, rng.uniform_range(0.05, 0.5), rng.uniform_range(0.3, 0.9));
    let c1 = hsv_to_rgb(hue + rng.uniform_range(-0.15, 0.15), rng.uniform_range(0.05, 0.5), rng.uniform_range(0.3, 0.9));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.uniform_range(-6.0, 6.0),
                rng.uniform_range(-6.0, 6.0),
                rng.uniform_range(0.0, std::f64::consts::TAU),
                rng.uniform_range(0.02, 0.08),
            )
        })
        .collect();
    let mut img = ImageTensor::filled(size, size, [0.0; 3]);
    for y in 0..size {
        let fy = (y as f64 + 0.5) / size as f64;
        for x in 0..size {
            let fx = (x as f64 + 0.5) / size as f64;
            let t = 0.5 * (fx + fy);
            let tex: f64 = waves
                .iter()
                .map(|&(kx, ky, ph, amp)| amp * (kx * fx * 3.0 + ky * fy * 3.0 + ph).sin())
                .sum();
            for c in 0..3 {
                img.set(y, x, c, (c0[c] * (1.0 - t) + c1[c] * t + tex).clamp(0.0, 1.0));
            }
        }
    }
    img
}

fn contrasting_color(bg: [f64; 3], rng: &mut RandomSource) -> [f64; 3] {
    let luma = |c: [f64; 3]| 0.3 * c[0] + 0.59 * c[1] + 0.11 * c[2];
    let mut best = [0.0; 3];
    let mut best_d = -1.0;
    for _ in 0..8 {
        let c = hsv_to_rgb(rng.uniform(), rng.uniform_range(0.3, 1.0), rng.uniform_range(0.1, 1.0));
        let d = (luma(c) - luma(bg)).abs() + 0.3 * (0..3).map(|k| (c[k] - bg[k]).abs()).sum::<f64>();
        if d > best_d {
            best_d = d;
            best = c;
        }
        if d > 0.45 {
            break;
        }
    }
    best
}

/// Fills the shape into `img` with 2×2 supersampling.
fn draw(img: &mut ImageTensor, shape: Shape, bbox: &BBox, color: [f64; 3], shade: [f64; 3]) {
    let size = img.height() as f64;
    let (x0, y0, x1, y1) = bbox.corners();
    let (px0, py0) = ((x0 * size).floor() as usize, (y0 * size).floor() as usize);
    let (px1, py1) = (
        ((x1 * size).ceil() as usize).min(img.width()),
        ((y1 * size).ceil() as usize).min(img.height()),
    );
    for py in py0..py1 {
        for px in px0..px1 {
            let mut cover = 0.0;
            let mut lower = 0.0;
            for sy in 0..2 {
                for sx in 0..2 {
                    let fx = (px as f64 + 0.25 + 0.5 * sx as f64) / size;
                    let fy = (py as f64 + 0.25 + 0.5 * sy as f64) / size;
                    let u = (fx - x0) / bbox.w;
                    let v = (fy - y0) / bbox.h;
                    if (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) && inside(shape, u, v, bbox.w / bbox.h) {
                        cover += 0.25;
                        if shape == Shape::Figure && v > 0.62 {
                            lower += 0.25;
                        }
                    }
                }
            }
            if cover > 0.0 {
                for c in 0..3 {
                    let fill = (color[c] * (cover - lower) + shade[c] * lower) / cover;
                    let old = img.get(py, px, c);
                    img.set(py, px, c, old * (1.0 - cover) + fill * cover);
                }
            }
        }
    }
}

fn sample_box(shape: Shape, rng: &mut RandomSource) -> BBox {
    let (w, h) = match shape {
        Shape::Figure => {
            let h = rng.uniform_range(0.45, 0.8);
            (h * rng.uniform_range(0.38, 0.46), h)
        }
        _ => {
            let s = rng.uniform_range(0.2, 0.42);
            (s, s * rng.uniform_range(0.85, 1.15))
        }
    };
    let cx = rng.uniform_range(w / 2.0, 1.0 - w / 2.0);
    let cy = rng.uniform_range(h / 2.0, 1.0 - h / 2.0);
    BBox { cx, cy, w, h }
}

/// One scene; depends only on the state of `rng`.
pub fn generate_scene(cfg: &GridConfig, rng: &mut RandomSource) -> SynthScene {
    let size = cfg.image_size;
    let mut image = background(size, rng);
    let n_target = 1 + rng.below(3);
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut attempts = 0;
    while objects.len() < n_target && attempts < 60 {
        attempts += 1;
        let class = rng.below(cfg.classes.len());
        let shape = shape_for(cfg, class);
        let bbox = sample_box(shape, rng);
        // Keep a one-pixel gap between objects.
        let pad = 1.0 / size as f64;
        let grown = BBox { w: bbox.w + 2.0 * pad, h: bbox.h + 2.0 * pad, ..bbox };
        if objects.iter().any(|o| o.bbox.iou(&grown) > 0.0) {
            continue;
        }
        let bg = image.pixel(
            ((bbox.cy * size as f64) as usize).min(size - 1),
            ((bbox.cx * size as f64) as usize).min(size - 1),
        );
        let color = contrasting_color(bg, rng);
        let shade = contrasting_color(bg, rng);
        draw(&mut image, shape, &bbox, color, shade);
        objects.push(SceneObject { bbox, class });
    }
    SynthScene { image, objects }
}

/// `n` scenes; scene `i` depends only on `(rng.seed(), i)`.
pub fn generate_synthetic_dataset(n: usize, cfg: &GridConfig, rng: &RandomSource) -> Result<Vec<SynthScene>> {
    if n == 0 {
        return Err(LdpError::Empty("synthetic dataset size must be >= 1".into()));
    }
    cfg.validate()?;
    Ok((0..n).map(|i| generate_scene(cfg, &mut rng.child(i as u64))).collect())
}

#[derive(Serialize, Deserialize)]
struct LabelFile {
    objects: Vec<LabelEntry>,
}

#[derive(Serialize, Deserialize)]
struct LabelEntry {
    class: String,
    bbox: BBox,
}

/// Writes `scene_NNNNN.png` plus a `scene_NNNNN.json` label file per scene.
pub fn dump_dataset(scenes: &[SynthScene], cfg: &GridConfig, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| LdpError::io(dir, e))?;
    for (i, s) in scenes.iter().enumerate() {
        s.image.save_png(dir.join(format!("scene_{i:05}.png")))?;
        let labels = LabelFile {
            objects: s
                .objects
                .iter()
                .map(|o| LabelEntry {
                    class: cfg.classes[o.class].clone(),
                    bbox: o.bbox,
                })
                .collect(),
        };
        let path = dir.join(format!("scene_{i:05}.json"));
        fs::write(&path, serde_json::to_string_pretty(&labels).unwrap()).map_err(|e| LdpError::io(&path, e))?;
    }
    Ok(())
}
