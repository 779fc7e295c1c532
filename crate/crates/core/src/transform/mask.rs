//! Binary occlusion masks shaped by anatomical priors.
//!
//! Convention: `1` keeps a pixel, `0` marks it for reconstruction.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TowerError};
use crate::image::Image;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Disc at the brightest point plus radial rays (vessels from the optic disc).
    Rays,
    /// Whole-row or whole-column bands (bone texture).
    Stripe,
    /// Square tiles (organ blocks).
    Block,
}

impl std::str::FromStr for MaskKind {
    type Err = TowerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rays" => Ok(MaskKind::Rays),
            "stripe" => Ok(MaskKind::Stripe),
            "block" => Ok(MaskKind::Block),
            other => Err(TowerError::Config(format!("unknown mask kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for MaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskKind::Rays => "rays",
            MaskKind::Stripe => "stripe",
            MaskKind::Block => "block",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StripeOrientation {
    /// Bands of rows.
    Horizontal,
    /// Bands of columns.
    Vertical,
}

impl std::str::FromStr for StripeOrientation {
    type Err = TowerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "horizontal" => Ok(StripeOrientation::Horizontal),
            "vertical" => Ok(StripeOrientation::Vertical),
            other => Err(TowerError::Config(format!(
                "unknown stripe orientation `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for StripeOrientation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StripeOrientation::Horizontal => "horizontal",
            StripeOrientation::Vertical => "vertical",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub num_rays: usize,
    pub ray_thickness: usize,
    /// Radius in pixels of the disc blanked at the ray origin; 0 disables it.
    pub disc_radius: f64,
    pub stripe_orientation: StripeOrientation,
    pub stripe_width: usize,
    pub block_size: usize,
    pub mask_ratio: f64,
}

impl MaskSpec {
    /// Defaults for an `h x w` image. Disc and vessel scales keep the
    /// roughly 15:1 ratio between optic disc and vessel diameters. The ray
    /// count shrinks below 512 px so thin-ray coverage stays near its
    /// full-resolution share instead of swallowing small images.
    pub fn defaults(kind: MaskKind, h: usize, w: usize) -> Self {
        let side = h.min(w) as f64;
        let ray_thickness = ((0.005 * side).round() as usize).max(1);
        let num_rays =
            ((80.0 * 3.0 * side / (512.0 * ray_thickness as f64)).round() as usize).clamp(1, 80);
        Self {
            kind,
            num_rays,
            ray_thickness,
            disc_radius: 0.04 * side,
            stripe_orientation: StripeOrientation::Horizontal,
            stripe_width: ((side / 14.0).round() as usize).max(1),
            block_size: ((side / 7.0).round() as usize).max(1),
            mask_ratio: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(TowerError::Domain(format!(
                "mask_ratio {} outside [0, 1]",
                self.mask_ratio
            )));
        }
        if !(self.disc_radius >= 0.0) {
            return Err(TowerError::Domain("disc_radius must be >= 0".into()));
        }
        match self.kind {
            MaskKind::Stripe if self.stripe_width < 1 => {
                Err(TowerError::Config("stripe_width must be >= 1".into()))
            }
            MaskKind::Block if self.block_size < 1 => {
                Err(TowerError::Config("block_size must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
    spec: MaskSpec,
    center: Option<(usize, usize)>,
}

impl Mask {
    fn ones(height: usize, width: usize, spec: MaskSpec) -> Self {
        Self {
            height,
            width,
            bits: vec![1; height * width],
            spec,
            center: None,
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>, spec: MaskSpec) -> Result<Self> {
        if bits.len() != height * width || bits.iter().any(|&b| b > 1) {
            return Err(TowerError::Data(
                "mask bits must be an HxW array of 0/1".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            bits,
            spec,
            center: None,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn spec(&self) -> &MaskSpec {
        &self.spec
    }

    pub fn center(&self) -> Option<(usize, usize)> {
        self.center
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.bits[row * self.width + col]
    }

    pub fn masked_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 0).count()
    }

    /// Share of pixels set to 0.
    pub fn masked_fraction(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.masked_count() as f64 / self.bits.len() as f64
    }

    #[inline]
    fn clear(&mut self, row: usize, col: usize) {
        self.bits[row * self.width + col] = 0;
    }
}

/// Separable Gaussian blur with renormalized truncated kernel, computed in f64.
fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let pass = |input: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (k, d) in (-radius..=radius).enumerate() {
                    let (rr, cc) = if along_rows {
                        (r as isize, c as isize + d)
                    } else {
                        (r as isize + d, c as isize)
                    };
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    acc += kernel[k] * input[rr as usize * w + cc as usize];
                    norm += kernel[k];
                }
                out[r * w + c] = acc / norm;
            }
        }
        out
    };
    let tmp = pass(src, true);
    pass(&tmp, false)
}

/// Smoothing scale used to locate the brightest region.
pub const BRIGHTNESS_SIGMA: f64 = 2.0;

/// Row/column of the maximum of the smoothed luminance. Ties (within a
/// relative 1e-12) resolve to the smallest row-major index.
pub fn find_brightness_center<S: Scalar>(img: &Image<S>) -> Result<(usize, usize)> {
    if img.is_empty() {
        return Err(TowerError::Data(
            "cannot locate brightness center of an empty image".into(),
        ));
    }
    let (h, w) = (img.height(), img.width());
    let lum: Vec<f64> = img.luminance().data().iter().map(|v| v.as_f64()).collect();
    let smooth = gaussian_blur(&lum, h, w, BRIGHTNESS_SIGMA);
    let max = smooth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-12 * max.abs().max(1.0);
    let idx = smooth.iter().position(|&v| v >= max - tol).unwrap_or(0);
    Ok((idx / w, idx % w))
}

/// Pixel where a ray from `center` at `angle` (radians, counter-clockwise
/// from the +column axis, rows growing downward) leaves the image.
pub fn ray_endpoint(center: (usize, usize), angle: f64, h: usize, w: usize) -> (usize, usize) {
    let (cr, cc) = (center.0 as f64, center.1 as f64);
    let (dr, dc) = (-angle.sin(), angle.cos());
    let limit = |pos: f64, d: f64, max: f64| -> f64 {
        if d > 1e-12 {
            (max - pos) / d
        } else if d < -1e-12 {
            -pos / d
        } else {
            f64::INFINITY
        }
    };
    let t = limit(cr, dr, (h - 1) as f64).min(limit(cc, dc, (w - 1) as f64));
    let r = (cr + t * dr).round().clamp(0.0, (h - 1) as f64) as usize;
    let c = (cc + t * dc).round().clamp(0.0, (w - 1) as f64) as usize;
    (r, c)
}

/// Integer line walk from `a` to `b` (inclusive). Minor-axis coordinates
/// are the exact rational position rounded half-up.
fn raster_line(a: (usize, usize), b: (usize, usize), mut visit: impl FnMut(isize, isize)) {
    let (r0, c0) = (a.0 as i64, a.1 as i64);
    let (dr, dc) = (b.0 as i64 - r0, b.1 as i64 - c0);
    let n = dr.abs().max(dc.abs());
    if n == 0 {
        visit(r0 as isize, c0 as isize);
        return;
    }
    let step = |i: i64, d: i64| -> i64 { (2 * i * d + n).div_euclid(2 * n) };
    for i in 0..=n {
        let (r, c) = if dc.abs() >= dr.abs() {
            (r0 + step(i, dr), c0 + i * dc.signum())
        } else {
            (r0 + i * dr.signum(), c0 + step(i, dc))
        };
        visit(r as isize, c as isize);
    }
}

/// Rays mask with an explicit global rotation offset (radians).
#[allow(clippy::too_many_arguments)]
pub fn rays_mask_with_offset(
    center: (usize, usize),
    num_rays: usize,
    ray_thickness: usize,
    disc_radius: f64,
    h: usize,
    w: usize,
    offset: f64,
    spec: MaskSpec,
) -> Result<Mask> {
    if center.0 >= h || center.1 >= w {
        return Err(TowerError::Domain(format!(
            "ray center {center:?} outside {h}x{w} image"
        )));
    }
    let mut mask = Mask::ones(h, w, spec);
    mask.center = Some(center);
    if disc_radius > 0.0 {
        let r2 = disc_radius * disc_radius;
        for r in 0..h {
            for c in 0..w {
                let (dy, dx) = (r as f64 - center.0 as f64, c as f64 - center.1 as f64);
                if dy * dy + dx * dx <= r2 {
                    mask.clear(r, c);
                }
            }
        }
    }
    let thick = ray_thickness.max(1) as isize;
    let (lo, hi) = (-(thick - 1) / 2, thick / 2);
    for k in 0..num_rays {
        let angle = offset + 2.0 * PI * k as f64 / num_rays as f64;
        let end = ray_endpoint(center, angle, h, w);
        raster_line(center, end, |r, c| {
            for dr in lo..=hi {
                for dc in lo..=hi {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        mask.clear(rr as usize, cc as usize);
                    }
                }
            }
        });
    }
    Ok(mask)
}

/// Disc plus `num_rays` evenly spaced rays with one random rotation.
pub fn rays_mask<R: Rng + ?Sized>(
    center: (usize, usize),
    num_rays: usize,
    ray_thickness: usize,
    disc_radius: f64,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<Mask> {
    let spacing = if num_rays > 0 {
        2.0 * PI / num_rays as f64
    } else {
        2.0 * PI
    };
    let offset = rng.random::<f64>() * spacing;
    let spec = MaskSpec {
        num_rays,
        ray_thickness,
        disc_radius,
        ..MaskSpec::defaults(MaskKind::Rays, h, w)
    };
    rays_mask_with_offset(
        center,
        num_rays,
        ray_thickness,
        disc_radius,
        h,
        w,
        offset,
        spec,
    )
}

/// Shuffles `sizes` (pixel counts of the units) and returns the units of
/// the prefix whose total lies closest to `target`.
fn pick_units<R: Rng + ?Sized>(sizes: &[usize], target: f64, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.shuffle(rng);
    let (mut best_len, mut best_gap) = (0usize, target.abs());
    let mut total = 0usize;
    for (i, &u) in order.iter().enumerate() {
        total += sizes[u];
        let gap = (total as f64 - target).abs();
        if gap < best_gap - 1e-9 {
            best_gap = gap;
            best_len = i + 1;
        }
    }
    order.truncate(best_len);
    order
}

fn bands(extent: usize, width: usize) -> Vec<(usize, usize)> {
    (0..extent)
        .step_by(width)
        .map(|start| (start, (start + width).min(extent)))
        .collect()
}

pub fn stripe_mask<R: Rng + ?Sized>(
    mask_ratio: f64,
    orientation: StripeOrientation,
    stripe_width: usize,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<Mask> {
    let spec = MaskSpec {
        mask_ratio,
        stripe_orientation: orientation,
        stripe_width,
        ..MaskSpec::defaults(MaskKind::Stripe, h, w)
    };
    spec.validate()?;
    let extent = match orientation {
        StripeOrientation::Horizontal => h,
        StripeOrientation::Vertical => w,
    };
    if stripe_width > extent {
        return Err(TowerError::Config(format!(
            "stripe_width {stripe_width} exceeds image extent {extent}"
        )));
    }
    let bands = bands(extent, stripe_width);
    let sizes: Vec<usize> = bands.iter().map(|(a, b)| b - a).collect();
    let chosen = pick_units(&sizes, mask_ratio * extent as f64, rng);
    let mut mask = Mask::ones(h, w, spec);
    for b in chosen {
        let (a, z) = bands[b];
        for i in a..z {
            match orientation {
                StripeOrientation::Horizontal => (0..w).for_each(|c| mask.clear(i, c)),
                StripeOrientation::Vertical => (0..h).for_each(|r| mask.clear(r, i)),
            }
        }
    }
    Ok(mask)
}

pub fn block_mask<R: Rng + ?Sized>(
    mask_ratio: f64,
    block_size: usize,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<Mask> {
    let spec = MaskSpec {
        mask_ratio,
        block_size,
        ..MaskSpec::defaults(MaskKind::Block, h, w)
    };
    spec.validate()?;
    let rows = bands(h, block_size);
    let cols = bands(w, block_size);
    let cells: Vec<((usize, usize), (usize, usize))> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();
    let sizes: Vec<usize> = cells
        .iter()
        .map(|((r0, r1), (c0, c1))| (r1 - r0) * (c1 - c0))
        .collect();
    let chosen = pick_units(&sizes, mask_ratio * (h * w) as f64, rng);
    let mut mask = Mask::ones(h, w, spec);
    for i in chosen {
        let ((r0, r1), (c0, c1)) = cells[i];
        for r in r0..r1 {
            for c in c0..c1 {
                mask.clear(r, c);
            }
        }
    }
    Ok(mask)
}

/// Generates a mask of `spec.kind` for `img`; rays are anchored at the
/// image's brightness center.
pub fn generate_mask<S: Scalar, R: Rng + ?Sized>(
    img: &Image<S>,
    spec: &MaskSpec,
    rng: &mut R,
) -> Result<Mask> {
    spec.validate()?;
    let (h, w) = (img.height(), img.width());
    let mut mask = match spec.kind {
        MaskKind::Rays => {
            let center = find_brightness_center(img)?;
            rays_mask(
                center,
                spec.num_rays,
                spec.ray_thickness,
                spec.disc_radius,
                h,
                w,
                rng,
            )?
        }
        MaskKind::Stripe => stripe_mask(
            spec.mask_ratio,
            spec.stripe_orientation,
            spec.stripe_width,
            h,
            w,
            rng,
        )?,
        MaskKind::Block => block_mask(spec.mask_ratio, spec.block_size, h, w, rng)?,
    };
    mask.spec = spec.clone();
    Ok(mask)
}

/// Pixel-wise product `img * mask` over every channel. Masked pixels are
/// exactly zero.
pub fn apply_mask<S: Scalar>(img: &Image<S>, mask: &Mask) -> Result<Image<S>> {
    if img.height() != mask.height || img.width() != mask.width {
        return Err(TowerError::Data(format!(
            "mask {}x{} does not match image {}x{}",
            mask.height,
            mask.width,
            img.height(),
            img.width()
        )));
    }
    let c = img.channels();
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if mask.bits[i / c] == 0 {
            *v = S::zero();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn single_bright_pixel_found() {
        let mut img = Image::<f32>::zeros(32, 40, 1);
        img.set(10, 20, 0, 1.0);
        assert_eq!(find_brightness_center(&img).unwrap(), (10, 20));
    }

    #[test]
    fn constant_image_center_is_origin() {
        let img = Image::<f64>::filled(17, 23, 3, 0.37);
        assert_eq!(find_brightness_center(&img).unwrap(), (0, 0));
    }

    #[test]
    fn empty_image_is_an_error() {
        let img = Image::<f32>::zeros(0, 0, 1);
        assert!(matches!(
            find_brightness_center(&img),
            Err(TowerError::Data(_))
        ));
    }

    #[test]
    fn rgb_uses_channel_mean() {
        let mut img = Image::<f32>::zeros(20, 20, 3);
        img.set(5, 6, 2, 1.0);
        assert_eq!(find_brightness_center(&img).unwrap(), (5, 6));
    }

    #[test]
    fn no_rays_no_disc_keeps_everything() {
        let m = rays_mask((3, 3), 0, 1, 0.0, 8, 8, &mut rng_from_seed(1)).unwrap();
        assert!(m.bits().iter().all(|&b| b == 1));
    }

    #[test]
    fn center_outside_image() {
        let r = rays_mask((8, 3), 4, 1, 0.0, 8, 8, &mut rng_from_seed(1));
        assert!(matches!(r, Err(TowerError::Domain(_))));
    }

    #[test]
    fn four_axis_rays() {
        let spec = MaskSpec::defaults(MaskKind::Rays, 9, 9);
        let m = rays_mask_with_offset((4, 4), 4, 1, 0.0, 9, 9, 0.0, spec).unwrap();
        for r in 0..9 {
            for c in 0..9 {
                let on_cross = r == 4 || c == 4;
                assert_eq!(m.get(r, c) == 0, on_cross, "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn disc_only() {
        let spec = MaskSpec::defaults(MaskKind::Rays, 9, 9);
        let m = rays_mask_with_offset((4, 4), 0, 1, 1.0, 9, 9, 0.0, spec).unwrap();
        assert_eq!(m.masked_count(), 5);
    }

    #[test]
    fn stripe_extremes_and_counting() {
        let mut rng = rng_from_seed(2);
        let z = stripe_mask(0.0, StripeOrientation::Horizontal, 2, 28, 28, &mut rng).unwrap();
        assert_eq!(z.masked_count(), 0);
        let all = stripe_mask(1.0, StripeOrientation::Vertical, 3, 28, 28, &mut rng).unwrap();
        assert_eq!(all.masked_count(), 28 * 28);
        let half = stripe_mask(0.5, StripeOrientation::Horizontal, 2, 28, 28, &mut rng).unwrap();
        assert_eq!(half.masked_fraction(), 0.5);
        let zeroed_rows = (0..28).filter(|&r| half.get(r, 0) == 0).count();
        assert_eq!(zeroed_rows, 14);
        // whole bands only
        for b in 0..14 {
            assert_eq!(half.get(2 * b, 5), half.get(2 * b + 1, 17));
        }
    }

    #[test]
    fn stripe_too_wide() {
        let r = stripe_mask(
            0.5,
            StripeOrientation::Horizontal,
            29,
            28,
            40,
            &mut rng_from_seed(0),
        );
        assert!(matches!(r, Err(TowerError::Config(_))));
    }

    #[test]
    fn stripe_seed_determinism() {
        let a = stripe_mask(
            0.5,
            StripeOrientation::Horizontal,
            2,
            28,
            28,
            &mut rng_from_seed(4),
        )
        .unwrap();
        let b = stripe_mask(
            0.5,
            StripeOrientation::Horizontal,
            2,
            28,
            28,
            &mut rng_from_seed(4),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn block_half_ratio_quantization() {
        for seed in 0..10 {
            let m = block_mask(0.5, 4, 28, 28, &mut rng_from_seed(seed)).unwrap();
            let cells = m.masked_count() / 16;
            assert!(cells == 24 || cells == 25);
            assert!((m.masked_fraction() - 0.5).abs() <= 16.0 / 784.0);
        }
        let all = block_mask(1.0, 4, 28, 28, &mut rng_from_seed(1)).unwrap();
        assert_eq!(all.masked_count(), 784);
    }

    #[test]
    fn block_seeds_differ() {
        let masks: Vec<Mask> = (0..10)
            .map(|s| block_mask(0.5, 4, 28, 28, &mut rng_from_seed(s)).unwrap())
            .collect();
        for i in 0..masks.len() {
            for j in i + 1..masks.len() {
                assert_ne!(masks[i].bits(), masks[j].bits());
            }
        }
    }

    #[test]
    fn block_size_zero_rejected() {
        assert!(matches!(
            block_mask(0.5, 0, 8, 8, &mut rng_from_seed(0)),
            Err(TowerError::Config(_))
        ));
        assert!(matches!(
            block_mask(1.5, 2, 8, 8, &mut rng_from_seed(0)),
            Err(TowerError::Domain(_))
        ));
    }

    #[test]
    fn apply_mask_exhaustive_small() {
        let mut rng = rng_from_seed(8);
        let img = Image::<f64>::from_fn(8, 8, 1, |_, _, _| rng.random::<f64>());
        let bits: Vec<u8> = (0..64).map(|_| rng.random_range(0..2u8)).collect();
        let m = Mask::from_bits(
            8,
            8,
            bits.clone(),
            MaskSpec::defaults(MaskKind::Block, 8, 8),
        )
        .unwrap();
        let out = apply_mask(&img, &m).unwrap();
        for ((o, x), b) in out.data().iter().zip(img.data()).zip(&bits) {
            assert_eq!(*o, x * *b as f64);
        }
        let ones = Mask::from_bits(8, 8, vec![1; 64], m.spec().clone()).unwrap();
        assert_eq!(apply_mask(&img, &ones).unwrap(), img);
        let zeros = Mask::from_bits(8, 8, vec![0; 64], m.spec().clone()).unwrap();
        assert!(apply_mask(&img, &zeros)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn apply_mask_shape_mismatch() {
        let m =
            Mask::from_bits(2, 2, vec![1; 4], MaskSpec::defaults(MaskKind::Block, 2, 2)).unwrap();
        assert!(matches!(
            apply_mask(&Image::<f32>::zeros(3, 2, 1), &m),
            Err(TowerError::Data(_))
        ));
    }

    #[test]
    fn default_scales() {
        let s = MaskSpec::defaults(MaskKind::Rays, 512, 512);
        assert_eq!(s.ray_thickness, 3);
        assert!((s.disc_radius - 20.48).abs() < 1e-12);
        assert_eq!(s.num_rays, 80);
        assert_eq!(MaskSpec::defaults(MaskKind::Rays, 28, 28).ray_thickness, 1);
        assert_eq!(MaskSpec::defaults(MaskKind::Rays, 32, 32).num_rays, 15);
    }

    proptest::proptest! {
        #[test]
        fn stripe_ratio_within_one_band(seed in 0u64..10_000, h in 1usize..40, w in 1usize..40, width in 1usize..8, ratio in 0.0f64..=1.0, vertical in proptest::bool::ANY) {
            let orientation = if vertical { StripeOrientation::Vertical } else { StripeOrientation::Horizontal };
            let extent = if vertical { w } else { h };
            proptest::prop_assume!(width <= extent);
            let m = stripe_mask(ratio, orientation, width, h, w, &mut rng_from_seed(seed)).unwrap();
            proptest::prop_assert!(m.bits().iter().all(|&b| b <= 1));
            proptest::prop_assert!((m.masked_fraction() - ratio).abs() <= width as f64 / extent as f64 + 1e-12);
        }

        #[test]
        fn block_ratio_within_one_cell(seed in 0u64..10_000, h in 1usize..40, w in 1usize..40, size in 1usize..9, ratio in 0.0f64..=1.0) {
            let m = block_mask(ratio, size, h, w, &mut rng_from_seed(seed)).unwrap();
            proptest::prop_assert!(m.bits().iter().all(|&b| b <= 1));
            let cell = (size.min(h) * size.min(w)) as f64 / (h * w) as f64;
            proptest::prop_assert!((m.masked_fraction() - ratio).abs() <= cell + 1e-12);
        }

        #[test]
        fn rays_are_seed_deterministic(seed in 0u64..10_000, r in 0usize..20, c in 0usize..20, n in 0usize..100) {
            let a = rays_mask((r, c), n, 1, 1.5, 20, 20, &mut rng_from_seed(seed)).unwrap();
            let b = rays_mask((r, c), n, 1, 1.5, 20, 20, &mut rng_from_seed(seed)).unwrap();
            proptest::prop_assert_eq!(a, b);
        }

        #[test]
        fn masking_is_idempotent_and_commutes_with_translation(seed in 0u64..10_000) {
            let mut rng = rng_from_seed(seed);
            let img = Image::<f64>::from_fn(9, 11, 2, |_, _, _| rng.random::<f64>());
            let m = block_mask(0.5, 3, 9, 11, &mut rng).unwrap();
            let once = apply_mask(&img, &m).unwrap();
            proptest::prop_assert_eq!(apply_mask(&once, &m).unwrap(), once.clone());
            let cp = crate::transform::sample_control_points::<f64, _>(&mut rng, crate::transform::Direction::Random);
            let t = crate::transform::build_translation(&cp, 1000).unwrap();
            let a = crate::transform::apply_translation(&once, &t).unwrap();
            let b = apply_mask(&crate::transform::apply_translation(&img, &t).unwrap(), &m).unwrap();
            for r in 0..9 {
                for c in 0..11 {
                    if m.get(r, c) == 1 {
                        for k in 0..2 {
                            proptest::prop_assert_eq!(a.get(r, c, k), b.get(r, c, k));
                        }
                    }
                }
            }
        }
    }
}
