//! Replayable augmentation plans.
//!
//! A [`TransformPlan`] records every random choice made for one image, so
//! the transformed view can be rebuilt bit-exactly from the plan and the
//! source image alone. Proxy modes apply translation then masking
//! (`x -> x' -> x''`); the classic mode applies rotation, flips, noise and
//! colour jitter.

use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TowerError};
use crate::image::Image;
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;
use crate::transform::bezier::{
    apply_translation_per_channel, build_translation, sample_control_points,
};
use crate::transform::mask::generate_mask;
use crate::transform::{
    apply_mask, apply_translation, ControlPoints, Direction, MaskKind, MaskSpec, DEFAULT_RESOLUTION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProxyMode {
    /// Nonlinear translation only.
    #[serde(rename = "tower_nl")]
    TowerNl,
    /// Masking only.
    #[serde(rename = "tower_m")]
    TowerM,
    /// Translation followed by masking.
    #[serde(rename = "tower_nl+m")]
    TowerNlM,
    /// Rotation, flips, noise and colour jitter.
    #[serde(rename = "classic")]
    Classic,
}

impl ProxyMode {
    pub fn uses_translation(self) -> bool {
        matches!(self, ProxyMode::TowerNl | ProxyMode::TowerNlM)
    }

    pub fn uses_mask(self) -> bool {
        matches!(self, ProxyMode::TowerM | ProxyMode::TowerNlM)
    }
}

impl FromStr for ProxyMode {
    type Err = TowerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tower_nl" => Ok(ProxyMode::TowerNl),
            "tower_m" => Ok(ProxyMode::TowerM),
            "tower_nl+m" => Ok(ProxyMode::TowerNlM),
            "classic" => Ok(ProxyMode::Classic),
            other => Err(TowerError::Config(format!(
                "unknown augmentation mode `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for ProxyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProxyMode::TowerNl => "tower_nl",
            ProxyMode::TowerM => "tower_m",
            ProxyMode::TowerNlM => "tower_nl+m",
            ProxyMode::Classic => "classic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ClassicOp {
    /// Bilinear rotation about the image centre, zero fill.
    Rotate {
        degrees: f64,
    },
    FlipHorizontal,
    FlipVertical,
    /// Transpose; only sampled for square images.
    FlipDiagonal,
    GaussianNoise {
        sigma: f64,
        seed: u64,
    },
    ColorJitter {
        brightness: f64,
        contrast: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformPlan {
    pub image_id: u64,
    pub mode: ProxyMode,
    /// One entry for a shared table, or one per channel.
    pub control_points: Option<Vec<ControlPoints<f64>>>,
    pub resolution: usize,
    pub mask_spec: Option<MaskSpec>,
    pub mask_seed: u64,
    pub classic_ops: Vec<ClassicOp>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub mask: MaskSpec,
    pub direction: Direction,
    pub resolution: usize,
    pub per_channel: bool,
    pub channels: usize,
    pub square: bool,
    pub op_probability: f64,
    pub max_rotation_deg: f64,
    pub max_noise_sigma: f64,
    pub jitter: f64,
}

impl AugmentConfig {
    pub fn for_shape(h: usize, w: usize, channels: usize, mask_kind: MaskKind) -> Self {
        Self {
            mask: MaskSpec::defaults(mask_kind, h, w),
            direction: Direction::Random,
            resolution: DEFAULT_RESOLUTION,
            per_channel: false,
            channels,
            square: h == w,
            op_probability: 0.5,
            max_rotation_deg: 15.0,
            max_noise_sigma: 0.05,
            jitter: 0.1,
        }
    }
}

/// Draws a plan for one image. The plan's own `seed` is the first value
/// drawn, recorded for audit; the mask seed keys the mask's random stream.
pub fn sample_plan<R: Rng + ?Sized>(
    rng: &mut R,
    mode: ProxyMode,
    image_id: u64,
    cfg: &AugmentConfig,
) -> TransformPlan {
    let seed = rng.random::<u64>();
    let control_points = mode.uses_translation().then(|| {
        let n = if cfg.per_channel {
            cfg.channels.max(1)
        } else {
            1
        };
        (0..n)
            .map(|_| sample_control_points::<f64, _>(rng, cfg.direction))
            .collect()
    });
    let mask_seed = rng.random::<u64>();
    let mask_spec = mode.uses_mask().then(|| cfg.mask.clone());
    let mut classic_ops = Vec::new();
    if mode == ProxyMode::Classic {
        let p = cfg.op_probability;
        if rng.random_bool(p) {
            let d = cfg.max_rotation_deg;
            classic_ops.push(ClassicOp::Rotate {
                degrees: rng.random_range(-d..=d),
            });
        }
        if rng.random_bool(p) {
            classic_ops.push(ClassicOp::FlipHorizontal);
        }
        if rng.random_bool(p) {
            classic_ops.push(ClassicOp::FlipVertical);
        }
        if rng.random_bool(p) && cfg.square {
            classic_ops.push(ClassicOp::FlipDiagonal);
        }
        if rng.random_bool(p) {
            let sigma = rng.random_range(0.0..=cfg.max_noise_sigma);
            classic_ops.push(ClassicOp::GaussianNoise {
                sigma,
                seed: rng.random(),
            });
        }
        if rng.random_bool(p) {
            let j = cfg.jitter;
            classic_ops.push(ClassicOp::ColorJitter {
                brightness: rng.random_range(1.0 - j..=1.0 + j),
                contrast: rng.random_range(1.0 - j..=1.0 + j),
            });
        }
    }
    TransformPlan {
        image_id,
        mode,
        control_points,
        resolution: cfg.resolution,
        mask_spec,
        mask_seed,
        classic_ops,
        seed,
    }
}

/// Rebuilds the transformed view described by `plan`.
pub fn apply_plan<S: Scalar>(img: &Image<S>, plan: &TransformPlan) -> Result<Image<S>> {
    img.check_normalized()?;
    let mut out = match &plan.control_points {
        None => img.clone(),
        Some(cps) if cps.len() == 1 => {
            let table = build_translation(&cps[0].cast::<S>(), plan.resolution)?;
            apply_translation(img, &table)?
        }
        Some(cps) => {
            let tables = cps
                .iter()
                .map(|cp| build_translation(&cp.cast::<S>(), plan.resolution))
                .collect::<Result<Vec<_>>>()?;
            apply_translation_per_channel(img, &tables)?
        }
    };
    if let Some(spec) = &plan.mask_spec {
        // rays are anchored on the original image's bright spot
        let mask = generate_mask(img, spec, &mut rng_from_seed(plan.mask_seed))?;
        out = apply_mask(&out, &mask)?;
    }
    for op in &plan.classic_ops {
        out = apply_classic(&out, op)?;
    }
    Ok(out)
}

fn apply_classic<S: Scalar>(img: &Image<S>, op: &ClassicOp) -> Result<Image<S>> {
    let (h, w, ch) = img.shape();
    let clamp = |v: S| v.max(S::zero()).min(S::one());
    Ok(match *op {
        ClassicOp::FlipHorizontal => Image::from_fn(h, w, ch, |r, c, k| img.get(r, w - 1 - c, k)),
        ClassicOp::FlipVertical => Image::from_fn(h, w, ch, |r, c, k| img.get(h - 1 - r, c, k)),
        ClassicOp::FlipDiagonal => {
            if h != w {
                return Err(TowerError::Data(
                    "diagonal flip needs a square image".into(),
                ));
            }
            Image::from_fn(h, w, ch, |r, c, k| img.get(c, r, k))
        }
        ClassicOp::Rotate { degrees } => rotate(img, degrees),
        ClassicOp::GaussianNoise { sigma, seed } => {
            let normal = Normal::new(0.0, sigma).map_err(|e| TowerError::Config(e.to_string()))?;
            let mut rng = rng_from_seed(seed);
            img.map(|v| clamp(v + S::lit(normal.sample(&mut rng))))
        }
        ClassicOp::ColorJitter {
            brightness,
            contrast,
        } => {
            let n = S::lit(img.data().len().max(1) as f64);
            let mean = img.data().iter().fold(S::zero(), |a, &b| a + b) / n;
            let (b, c) = (S::lit(brightness), S::lit(contrast));
            img.map(|v| clamp(((v - mean) * c + mean) * b))
        }
    })
}

fn rotate<S: Scalar>(img: &Image<S>, degrees: f64) -> Image<S> {
    let (h, w, ch) = img.shape();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    Image::from_fn(h, w, ch, |r, c, k| {
        let (dy, dx) = (r as f64 - cy, c as f64 - cx);
        // inverse map destination -> source
        let sy = cos * dy - sin * dx + cy;
        let sx = sin * dy + cos * dx + cx;
        let (y0, x0) = (sy.floor(), sx.floor());
        let (fy, fx) = (sy - y0, sx - x0);
        let sample = |y: f64, x: f64| -> f64 {
            if y < 0.0 || x < 0.0 || y > (h - 1) as f64 || x > (w - 1) as f64 {
                0.0
            } else {
                img.get(y as usize, x as usize, k).as_f64()
            }
        };
        let v = (1.0 - fy) * ((1.0 - fx) * sample(y0, x0) + fx * sample(y0, x0 + 1.0))
            + fy * ((1.0 - fx) * sample(y0 + 1.0, x0) + fx * sample(y0 + 1.0, x0 + 1.0));
        S::lit(v.clamp(0.0, 1.0))
    })
}

/// Appends plans to a line-delimited JSON log.
pub fn write_plan_log<W: Write>(out: &mut W, plans: &[TransformPlan]) -> Result<()> {
    for plan in plans {
        let line = serde_json::to_string(plan).map_err(|e| TowerError::Format(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_plan_log<R: BufRead>(input: R) -> Result<Vec<TransformPlan>> {
    let mut plans = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let plan = serde_json::from_str(&line).map_err(|e| TowerError::Ingestion {
            row: i + 1,
            reason: e.to_string(),
        })?;
        plans.push(plan);
    }
    Ok(plans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn cfg() -> AugmentConfig {
        AugmentConfig::for_shape(16, 16, 1, MaskKind::Block)
    }

    fn test_image(seed: u64) -> Image<f32> {
        let mut rng = rng_from_seed(seed);
        Image::from_fn(16, 16, 1, |_, _, _| rng.random::<f32>())
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(
            "tower_nl+m".parse::<ProxyMode>().unwrap(),
            ProxyMode::TowerNlM
        );
        assert!(matches!(
            "mixup".parse::<ProxyMode>(),
            Err(TowerError::Config(_))
        ));
    }

    #[test]
    fn translation_only_has_no_mask() {
        let plan = sample_plan(&mut rng_from_seed(1), ProxyMode::TowerNl, 0, &cfg());
        assert!(plan.mask_spec.is_none());
        assert!(plan.control_points.is_some());
        let plan = sample_plan(&mut rng_from_seed(1), ProxyMode::TowerM, 0, &cfg());
        assert!(plan.mask_spec.is_some() && plan.control_points.is_none());
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_plan(&mut rng_from_seed(9), ProxyMode::TowerNlM, 3, &cfg());
        let b = sample_plan(&mut rng_from_seed(9), ProxyMode::TowerNlM, 3, &cfg());
        assert_eq!(a, b);
    }

    #[test]
    fn classic_flip_frequency() {
        let mut rng = rng_from_seed(17);
        let n = 10_000;
        let (mut h, mut v, mut d) = (0, 0, 0);
        for i in 0..n {
            let plan = sample_plan(&mut rng, ProxyMode::Classic, i, &cfg());
            for op in &plan.classic_ops {
                match op {
                    ClassicOp::FlipHorizontal => h += 1,
                    ClassicOp::FlipVertical => v += 1,
                    ClassicOp::FlipDiagonal => d += 1,
                    _ => {}
                }
            }
        }
        for count in [h, v, d] {
            let f = count as f64 / n as f64;
            assert!((f - 0.5).abs() < 0.02, "flip frequency {f}");
        }
    }

    #[test]
    fn empty_classic_plan_is_identity() {
        let img = test_image(2);
        let plan = TransformPlan {
            image_id: 0,
            mode: ProxyMode::Classic,
            control_points: None,
            resolution: 1000,
            mask_spec: None,
            mask_seed: 0,
            classic_ops: vec![],
            seed: 0,
        };
        assert_eq!(apply_plan(&img, &plan).unwrap(), img);
    }

    #[test]
    fn identity_curve_and_open_mask_is_identity() {
        let img = test_image(3);
        let mut spec = MaskSpec::defaults(MaskKind::Block, 16, 16);
        spec.mask_ratio = 0.0;
        let plan = TransformPlan {
            image_id: 0,
            mode: ProxyMode::TowerNlM,
            control_points: Some(vec![ControlPoints::identity()]),
            resolution: 1000,
            mask_spec: Some(spec),
            mask_seed: 77,
            classic_ops: vec![],
            seed: 0,
        };
        assert_eq!(apply_plan(&img, &plan).unwrap(), img);
    }

    #[test]
    fn replay_is_bit_exact() {
        let img = test_image(4);
        let mut rng = rng_from_seed(5);
        for mode in [
            ProxyMode::TowerNl,
            ProxyMode::TowerM,
            ProxyMode::TowerNlM,
            ProxyMode::Classic,
        ] {
            for i in 0..20 {
                let plan = sample_plan(&mut rng, mode, i, &cfg());
                let a = apply_plan(&img, &plan).unwrap();
                let b = apply_plan(&img, &plan).unwrap();
                assert_eq!(a.data(), b.data());
                a.check_normalized().unwrap();
            }
        }
    }

    #[test]
    fn log_round_trip_replays() {
        let img = test_image(6);
        let mut rng = rng_from_seed(7);
        let plans: Vec<_> = (0..5)
            .map(|i| {
                sample_plan(
                    &mut rng,
                    if i % 2 == 0 {
                        ProxyMode::TowerNlM
                    } else {
                        ProxyMode::Classic
                    },
                    i,
                    &cfg(),
                )
            })
            .collect();
        let mut buf = Vec::new();
        write_plan_log(&mut buf, &plans).unwrap();
        let back = read_plan_log(buf.as_slice()).unwrap();
        assert_eq!(back, plans);
        for (a, b) in plans.iter().zip(&back) {
            assert_eq!(apply_plan(&img, a).unwrap(), apply_plan(&img, b).unwrap());
        }
    }

    #[test]
    fn rotation_by_zero_is_identity() {
        let img = test_image(8);
        let out = apply_classic(&img, &ClassicOp::Rotate { degrees: 0.0 }).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn flips_are_involutions() {
        let img = test_image(9);
        for op in [
            ClassicOp::FlipHorizontal,
            ClassicOp::FlipVertical,
            ClassicOp::FlipDiagonal,
        ] {
            let twice = apply_classic(&apply_classic(&img, &op).unwrap(), &op).unwrap();
            assert_eq!(twice, img);
        }
    }
}
