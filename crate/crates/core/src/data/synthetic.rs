//! Synthetic fundus-like images with exact ground truth: a bright optic
//! disc, dark vessels radiating from it over a textured background.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Modality, Split};
use crate::error::{Result, TowerError};
use crate::image::Image;
use crate::rng::{derive_seed, rng_from_seed};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Disc radius as a fraction of `min(H, W)`.
    pub disc_radius_frac: f64,
    /// Lower bound on the disc radius in pixels; keeps the disc visible on
    /// thumbnails.
    pub min_disc_radius: f64,
    pub min_vessels: usize,
    pub max_vessels: usize,
    /// Vessel half-width in pixels.
    pub vessel_radius: f64,
    /// Relative darkening of vessel pixels, in (0, 1].
    pub vessel_contrast: f64,
    pub noise_sigma: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            disc_radius_frac: 0.04,
            min_disc_radius: 2.0,
            min_vessels: 6,
            max_vessels: 12,
            vessel_radius: 0.5,
            vessel_contrast: 0.55,
            noise_sigma: 0.03,
            val_frac: 0.1,
            test_frac: 0.2,
        }
    }
}

struct Rendered {
    image: Vec<f64>,
    mask: Vec<u8>,
    center: (usize, usize),
}

fn render<R: Rng>(rng: &mut R, h: usize, w: usize, cfg: &SyntheticConfig) -> Rendered {
    let side = h.min(w) as f64;
    let radius = (cfg.disc_radius_frac * side).max(cfg.min_disc_radius);
    let margin = (radius + 1.0).min(side / 2.0 - 1.0).max(0.0);
    let cy = rng
        .random_range(margin.max(0.2 * h as f64)..=(h as f64 - 1.0 - margin).min(0.8 * h as f64));
    let cx = rng
        .random_range(margin.max(0.2 * w as f64)..=(w as f64 - 1.0 - margin).min(0.8 * w as f64));

    // low-frequency background: a few random plane waves
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = rng.random_range(0.0..TAU);
            let freq = rng.random_range(0.5..2.0) * TAU / side;
            (
                theta.cos() * freq,
                theta.sin() * freq,
                rng.random_range(0.0..TAU),
                rng.random_range(0.02..0.05),
            )
        })
        .collect();
    let base = rng.random_range(0.35..0.5);
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma >= 0");
    let mut image: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let tex: f64 = waves
                .iter()
                .map(|&(fy, fx, ph, a)| a * (fy * y + fx * x + ph).sin())
                .sum();
            base + tex + noise.sample(rng)
        })
        .collect();

    // vessels: smooth random walks leaving the disc rim
    let mut mask = vec![0u8; h * w];
    let count = rng.random_range(cfg.min_vessels..=cfg.max_vessels);
    let offset = rng.random_range(0.0..TAU);
    let r2 = cfg.vessel_radius * cfg.vessel_radius;
    for k in 0..count {
        let mut heading = offset + TAU * k as f64 / count as f64 + rng.random_range(-0.3..0.3);
        let mut turn: f64 = rng.random_range(-0.04..0.04);
        let (mut y, mut x) = (cy + radius * heading.sin(), cx + radius * heading.cos());
        let max_len = rng.random_range(0.3..0.6) * side;
        let mut walked = 0.0;
        while walked < max_len && y > -1.0 && x > -1.0 && y < h as f64 && x < w as f64 {
            let (y0, y1) = (
                (y - 1.0).floor().max(0.0) as usize,
                ((y + 1.0).ceil() as usize).min(h - 1),
            );
            let (x0, x1) = (
                (x - 1.0).floor().max(0.0) as usize,
                ((x + 1.0).ceil() as usize).min(w - 1),
            );
            for py in y0..=y1 {
                for px in x0..=x1 {
                    let (dy, dx) = (py as f64 - y, px as f64 - x);
                    if dy * dy + dx * dx <= r2 {
                        mask[py * w + px] = 1;
                    }
                }
            }
            turn = (turn + rng.random_range(-0.02..0.02)).clamp(-0.06, 0.06);
            heading += turn;
            y += 0.5 * heading.sin();
            x += 0.5 * heading.cos();
            walked += 0.5;
        }
    }
    for (v, &m) in image.iter_mut().zip(&mask) {
        if m != 0 {
            *v *= 1.0 - cfg.vessel_contrast;
        }
    }

    // soft-edged disc, drawn last so it stays the brightest structure
    for (i, v) in image.iter_mut().enumerate() {
        let (dy, dx) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
        let d = (dy * dy + dx * dx).sqrt();
        let inside = 1.0 / (1.0 + ((d - radius) / 0.5).exp());
        *v = *v * (1.0 - inside) + 1.0 * inside;
    }
    for (m, &v) in mask.iter_mut().zip(&image) {
        // the disc covers vessel starts
        if v > 0.9 {
            *m = 0;
        }
    }
    Rendered {
        image,
        mask,
        center: (cy.round() as usize, cx.round() as usize),
    }
}

pub fn gen_synthetic_retina<S: Scalar>(
    n: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Dataset<S>> {
    gen_synthetic_retina_with(n, h, w, seed, &SyntheticConfig::default())
}

/// Renders `n` images. Labels split the set at the median vessel density
/// (upper half is class 1); splits are drawn from `seed`.
pub fn gen_synthetic_retina_with<S: Scalar>(
    n: usize,
    h: usize,
    w: usize,
    seed: u64,
    cfg: &SyntheticConfig,
) -> Result<Dataset<S>> {
    if n == 0 {
        return Err(TowerError::Config("synthetic dataset needs n >= 1".into()));
    }
    if h < 8 || w < 8 {
        return Err(TowerError::Config(format!(
            "synthetic images must be at least 8x8, got {h}x{w}"
        )));
    }
    if !(cfg.vessel_contrast > 0.0 && cfg.vessel_contrast <= 1.0) {
        return Err(TowerError::ConfigKey {
            key: "vessel_contrast".into(),
            reason: "must be in (0, 1]".into(),
        });
    }
    if cfg.min_vessels > cfg.max_vessels {
        return Err(TowerError::ConfigKey {
            key: "min_vessels".into(),
            reason: "exceeds max_vessels".into(),
        });
    }
    let mut images = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut centers = Vec::with_capacity(n);
    let mut density = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = rng_from_seed(derive_seed(seed, &[i as u64]));
        let r = render(&mut rng, h, w, cfg);
        let img =
            Image::new(h, w, 1, r.image.iter().map(|&v| S::lit(v)).collect())?.min_max_normalized();
        density.push(r.mask.iter().filter(|&&m| m != 0).count());
        masks.push(Image::new(
            h,
            w,
            1,
            r.mask.iter().map(|&m| S::lit(m as f64)).collect(),
        )?);
        images.push(img);
        centers.push(r.center);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (density[i], i));
    let mut labels = vec![0; n];
    for &i in &order[n / 2..] {
        labels[i] = 1;
    }
    let mut ds = Dataset {
        images,
        ids: (0..n).map(|i| format!("synthetic-{i:05}")).collect(),
        labels: Some(labels),
        masks: Some(masks),
        centers: Some(centers),
        splits: vec![Split::Train; n],
        modality: Modality::Synthetic,
        num_classes: 2,
    };
    ds.assign_random_splits(derive_seed(seed, &[u64::MAX]), cfg.val_frac, cfg.test_frac)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::find_brightness_center;

    #[test]
    fn disc_center_is_recoverable() {
        let ds = gen_synthetic_retina::<f32>(200, 32, 32, 11).unwrap();
        let centers = ds.centers.as_ref().unwrap();
        let hits = ds
            .images
            .iter()
            .zip(centers)
            .filter(|(img, &(r, c))| {
                let (fr, fc) = find_brightness_center(*img).unwrap();
                fr.abs_diff(r) <= 2 && fc.abs_diff(c) <= 2
            })
            .count();
        assert!(hits >= 190, "{hits}/200 centers within 2 px");
    }

    #[test]
    fn vessel_fraction_in_range() {
        for (h, w) in [(32, 32), (64, 48)] {
            let ds = gen_synthetic_retina::<f32>(50, h, w, 3).unwrap();
            for m in ds.masks.as_ref().unwrap() {
                let f = m.data().iter().filter(|&&v| v > 0.5).count() as f64 / (h * w) as f64;
                assert!(f > 0.01 && f < 0.20, "fraction {f}");
            }
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = gen_synthetic_retina::<f32>(40, 16, 16, 9).unwrap();
        let b = gen_synthetic_retina::<f32>(40, 16, 16, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![20, 20]);
        a.validate().unwrap();
        let c = gen_synthetic_retina::<f32>(40, 16, 16, 10).unwrap();
        assert_ne!(a.images, c.images);
    }
}
