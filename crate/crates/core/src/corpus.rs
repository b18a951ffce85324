//! Procedural "natural-like" images: smooth gradients overlaid with soft
//! blobs drawn from a small coherent palette.

use crate::image::ImageTensor;
use crate::rng::RandomSource;

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn palette(rng: &mut RandomSource) -> Vec<[f64; 3]> {
    let base = rng.uniform();
    let n = 3 + rng.below(2);
    (0..n)
        .map(|_| {
            hsv_to_rgb(
                base + rng.uniform_range(-0.09, 0.09),
                rng.uniform_range(0.15, 0.75),
                rng.uniform_range(0.25, 0.95),
            )
        })
        .collect()
}

/// One `size × size` image.
pub fn natural_image(size: usize, rng: &mut RandomSource) -> ImageTensor {
    let pal = palette(rng);
    let bg0 = pal[0];
    let bg1 = pal[1];
    let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let n_blobs = 2 + rng.below(4);
    let blobs: Vec<([f64; 3], f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            let c = pal[rng.below(pal.len())];
            let bx = rng.uniform();
            let by = rng.uniform();
            let r = rng.uniform_range(0.08, 0.3);
            let a = rng.uniform_range(0.5, 1.0);
            (c, bx, by, r, a)
        })
        .collect();
    let mut img = ImageTensor::filled(size, size, [0.0; 3]);
    for y in 0..size {
        let fy = (y as f64 + 0.5) / size as f64;
        for x in 0..size {
            let fx = (x as f64 + 0.5) / size as f64;
            let t = (((fx - 0.5) * dx + (fy - 0.5) * dy) + 0.71) / 1.42;
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = bg0[c] * (1.0 - t) + bg1[c] * t;
            }
            for &(col, bx, by, r, a) in &blobs {
                let d2 = (fx - bx).powi(2) + (fy - by).powi(2);
                let w = a * (-d2 / (2.0 * r * r)).exp();
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - w) + col[c] * w;
                }
            }
            for (c, v) in px.iter().enumerate() {
                img.set(y, x, c, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// `n` images; image `i` depends only on `(rng.seed(), i)`.
pub fn natural_images(n: usize, size: usize, rng: &RandomSource) -> Vec<ImageTensor> {
    (0..n)
        .map(|i| natural_image(size, &mut rng.child(i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = natural_images(4, 16, &RandomSource::new(9));
        let b = natural_images(4, 16, &RandomSource::new(9));
        assert_eq!(a, b);
        assert!(a.iter().all(|im| im.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv_to_rgb(1.0 / 3.0, 1.0, 1.0);
        assert!((g[1] - 1.0).abs() < 1e-12 && g[0].abs() < 1e-12);
    }
}
