//! Pre-training loop: Adam, cosine decay, gradient clipping, early stopping
//! on the validation loss, checkpointing of the best epoch.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{
    apply_plan, sample_plan, write_plan_log, AugmentConfig, ProxyMode, TransformPlan,
};
use crate::config::{parse_bool, parse_value, Configurable, DataConfig};
use crate::data::{carve_validation, Dataset, Split};
use crate::error::{Result, TowerError};
use crate::losses::{contrastive_on_graph, tower_on_graph};
use crate::nn::{
    save_checkpoint, Gradients, Graph, ModelState, Owner, ParamId, Tensor, UNet, UNetConfig,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::scalar::Scalar;
use crate::transform::{Direction, MaskKind, MaskSpec, StripeOrientation};

/// Pre-training arms. Each picks the proxy transform and which loss
/// branches are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PretrainArm {
    /// No pre-training; the network keeps its initialization.
    Random,
    /// Restoration of translated images.
    GenNl,
    /// Restoration of masked images.
    GenM,
    /// Restoration of translated-then-masked images.
    GenNlM,
    /// Contrastive only, proxy views as positives.
    ConNlM,
    /// Contrastive only, classic augmentations as positives.
    ConClassic,
    /// Contrastive and restoration together.
    Tower,
}

impl PretrainArm {
    pub const ALL: [PretrainArm; 7] = [
        PretrainArm::Random,
        PretrainArm::GenNl,
        PretrainArm::GenM,
        PretrainArm::GenNlM,
        PretrainArm::ConNlM,
        PretrainArm::ConClassic,
        PretrainArm::Tower,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PretrainArm::Random => "random",
            PretrainArm::GenNl => "tower_nl",
            PretrainArm::GenM => "tower_m",
            PretrainArm::GenNlM => "tower_nl+m",
            PretrainArm::ConNlM => "contrastive",
            PretrainArm::ConClassic => "classic",
            PretrainArm::Tower => "tower",
        }
    }

    pub fn proxy_mode(self) -> Option<ProxyMode> {
        match self {
            PretrainArm::Random => None,
            PretrainArm::GenNl => Some(ProxyMode::TowerNl),
            PretrainArm::GenM => Some(ProxyMode::TowerM),
            PretrainArm::GenNlM | PretrainArm::ConNlM | PretrainArm::Tower => {
                Some(ProxyMode::TowerNlM)
            }
            PretrainArm::ConClassic => Some(ProxyMode::Classic),
        }
    }

    pub fn contrastive(self) -> bool {
        matches!(
            self,
            PretrainArm::ConNlM | PretrainArm::ConClassic | PretrainArm::Tower
        )
    }

    pub fn generative(self) -> bool {
        matches!(
            self,
            PretrainArm::GenNl | PretrainArm::GenM | PretrainArm::GenNlM | PretrainArm::Tower
        )
    }

    /// Sub-networks whose parameters the arm trains.
    pub fn owners(self) -> Vec<Owner> {
        let mut v = Vec::new();
        if self.contrastive() || self.generative() {
            v.push(Owner::Encoder);
        }
        if self.contrastive() {
            v.push(Owner::Head);
        }
        if self.generative() {
            v.push(Owner::Decoder);
        }
        v
    }
}

impl FromStr for PretrainArm {
    type Err = TowerError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "random" | "none" => PretrainArm::Random,
            "tower_nl" | "gen_nl" => PretrainArm::GenNl,
            "tower_m" | "gen_m" => PretrainArm::GenM,
            "tower_nl+m" | "gen_nl+m" => PretrainArm::GenNlM,
            "contrastive" | "con_nl+m" => PretrainArm::ConNlM,
            "classic" | "con_classic" => PretrainArm::ConClassic,
            "tower" => PretrainArm::Tower,
            other => return Err(TowerError::Config(format!("unknown mode `{other}`"))),
        })
    }
}

impl std::fmt::Display for PretrainArm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: PretrainArm,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub patience: usize,
    pub lambda: f64,
    pub tau: f64,
    pub seed: u64,
    /// Average InfoNCE over both views as anchors.
    pub symmetric: bool,
    pub clip_norm: f64,
    /// Share of training data held out for validation when the dataset has
    /// no validation split.
    pub val_frac: f64,
    pub mask_kind: MaskKind,
    pub mask_ratio: Option<f64>,
    pub num_rays: Option<usize>,
    pub ray_thickness: Option<usize>,
    pub disc_radius: Option<f64>,
    pub stripe_width: Option<usize>,
    pub stripe_orientation: StripeOrientation,
    pub block_size: Option<usize>,
    pub translation_direction: Direction,
    pub translation_resolution: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub head_hidden: usize,
    pub embed_dim: usize,
    /// Write every epoch's plans to `plans/epoch_NNNN.jsonl`.
    pub log_plans: bool,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = UNetConfig::default();
        Self {
            mode: PretrainArm::Tower,
            batch_size: 32,
            lr_init: 1e-3,
            lr_min: 1e-5,
            epochs: 100,
            patience: 30,
            lambda: 1.0,
            tau: 0.1,
            seed: 0,
            symmetric: false,
            clip_norm: 5.0,
            val_frac: 0.1,
            mask_kind: MaskKind::Rays,
            mask_ratio: None,
            num_rays: None,
            ray_thickness: None,
            disc_radius: None,
            stripe_width: None,
            stripe_orientation: StripeOrientation::Horizontal,
            block_size: None,
            translation_direction: Direction::Random,
            translation_resolution: crate::transform::DEFAULT_RESOLUTION,
            base_channels: net.base_channels,
            depth: net.depth,
            head_hidden: net.head_hidden,
            embed_dim: net.embed_dim,
            log_plans: false,
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Network shape for `channels`-channel inputs.
    pub fn unet(&self, channels: usize) -> UNetConfig {
        UNetConfig {
            in_channels: channels,
            out_channels: channels,
            base_channels: self.base_channels,
            depth: self.depth,
            head_hidden: self.head_hidden,
            embed_dim: self.embed_dim,
        }
    }

    /// Mask and translation settings resolved for an image shape.
    pub fn augment(&self, h: usize, w: usize, channels: usize) -> AugmentConfig {
        let mut a = AugmentConfig::for_shape(h, w, channels, self.mask_kind);
        let m: &mut MaskSpec = &mut a.mask;
        if let Some(v) = self.mask_ratio {
            m.mask_ratio = v;
        }
        if let Some(v) = self.num_rays {
            m.num_rays = v;
        }
        if let Some(v) = self.ray_thickness {
            m.ray_thickness = v;
        }
        if let Some(v) = self.disc_radius {
            m.disc_radius = v;
        }
        if let Some(v) = self.stripe_width {
            m.stripe_width = v;
        }
        if let Some(v) = self.block_size {
            m.block_size = v;
        }
        m.stripe_orientation = self.stripe_orientation;
        a.direction = self.translation_direction;
        a.resolution = self.translation_resolution;
        a
    }

    /// Protocol constants of the full-scale runs.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "full_classification" => {
                self.batch_size = 128;
                self.lr_init = 1e-3;
            }
            "full_segmentation" => {
                self.batch_size = 32;
                self.lr_init = 1e-2;
            }
            "desk" => {
                self.batch_size = 32;
                self.lr_init = 1e-3;
            }
            other => {
                return Err(TowerError::ConfigKey {
                    key: "preset".into(),
                    reason: format!(
                        "unknown preset `{other}` (full_classification, full_segmentation, desk)"
                    ),
                })
            }
        }
        Ok(())
    }

    fn key_err(key: &str, reason: &str) -> TowerError {
        TowerError::ConfigKey {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

impl Configurable for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "mode" => {
                self.mode = value
                    .parse()
                    .map_err(|e: TowerError| Self::key_err(key, &e.to_string()))?;
            }
            "preset" => self.apply_preset(value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr_init" => self.lr_init = parse_value(key, value)?,
            "lr_min" => self.lr_min = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "symmetric" => self.symmetric = parse_bool(key, value)?,
            "clip_norm" => self.clip_norm = parse_value(key, value)?,
            "val_frac" => self.val_frac = parse_value(key, value)?,
            "mask_kind" => self.mask_kind = parse_value(key, value)?,
            "mask_ratio" => self.mask_ratio = Some(parse_value(key, value)?),
            "num_rays" => self.num_rays = Some(parse_value(key, value)?),
            "ray_thickness" => self.ray_thickness = Some(parse_value(key, value)?),
            "disc_radius" => self.disc_radius = Some(parse_value(key, value)?),
            "stripe_width" => self.stripe_width = Some(parse_value(key, value)?),
            "stripe_orientation" => self.stripe_orientation = parse_value(key, value)?,
            "block_size" => self.block_size = Some(parse_value(key, value)?),
            "translation_direction" => self.translation_direction = parse_value(key, value)?,
            "translation_resolution" => self.translation_resolution = parse_value(key, value)?,
            "base_channels" => self.base_channels = parse_value(key, value)?,
            "depth" => self.depth = parse_value(key, value)?,
            "head_hidden" => self.head_hidden = parse_value(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "log_plans" => self.log_plans = parse_bool(key, value)?,
            _ => return self.data.set(key, value),
        }
        Ok(true)
    }

    fn validate(&self) -> Result<()> {
        let err = |k: &str, r: &str| Err(Self::key_err(k, r));
        if !(self.lr_init > 0.0) || !self.lr_init.is_finite() {
            return err("lr_init", "must be > 0");
        }
        if !(self.lr_min >= 0.0) || self.lr_min > self.lr_init {
            return err("lr_min", "must lie in [0, lr_init]");
        }
        if self.patience < 1 {
            return err("patience", "must be >= 1");
        }
        if self.batch_size < 1 {
            return err("batch_size", "must be >= 1");
        }
        if self.mode.contrastive() && self.batch_size < 2 {
            return err(
                "batch_size",
                "contrastive modes need at least 2 images per batch",
            );
        }
        if !(self.tau > 0.0) {
            return err("tau", "temperature must be > 0");
        }
        if !(self.lambda >= 0.0) {
            return err("lambda", "must be >= 0");
        }
        if !(self.clip_norm > 0.0) {
            return err("clip_norm", "must be > 0");
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return err("val_frac", "must lie in [0, 1)");
        }
        if let Some(r) = self.mask_ratio {
            if !(0.0..=1.0).contains(&r) {
                return err("mask_ratio", "must lie in [0, 1]");
            }
        }
        if self.translation_resolution < 2 {
            return err("translation_resolution", "must be >= 2");
        }
        self.unet(1).validate()?;
        self.data.validate()
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One Adam update (bias-corrected) of the parameters in `ids`. Every listed
/// parameter must have a gradient.
pub fn adam_step<S: Scalar>(
    st: &mut ModelState<S>,
    grads: &Gradients<S>,
    lr: f64,
    ids: &[ParamId],
) -> Result<()> {
    st.check_gradients(grads)?;
    for &id in ids {
        if grads.get(id).is_none() {
            return Err(TowerError::Usage(format!(
                "no gradient for parameter `{}`",
                st.get(id).name
            )));
        }
    }
    st.step += 1;
    let t = st.step as i32;
    let (b1, b2) = (S::lit(ADAM_BETA1), S::lit(ADAM_BETA2));
    let c1 = S::one() / (S::one() - b1.powi(t));
    let c2 = S::one() / (S::one() - b2.powi(t));
    let (lr, eps) = (S::lit(lr), S::lit(ADAM_EPS));
    for &id in ids {
        let g = grads.get(id).expect("checked above");
        let p = st.get_mut(id);
        let params = p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.m.data_mut().iter_mut())
            .zip(p.v.data_mut().iter_mut());
        for (((w, m), v), &gi) in params.zip(g.data()) {
            *m = b1 * *m + (S::one() - b1) * gi;
            *v = b2 * *v + (S::one() - b2) * gi * gi;
            *w -= lr * (*m * c1) / ((*v * c2).sqrt() + eps);
        }
    }
    Ok(())
}

pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_init: f64, lr_min: f64) -> f64 {
    if total_epochs == 0 {
        return lr_init;
    }
    let e = epoch.min(total_epochs) as f64;
    lr_min
        + 0.5 * (lr_init - lr_min) * (1.0 + (std::f64::consts::PI * e / total_epochs as f64).cos())
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut Gradients<S>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().as_f64();
    if norm > max_norm {
        grads.scale(S::lit(max_norm / norm));
    }
    norm
}

/// Splits `idx` into batches of `size`; a trailing single image joins the
/// previous batch so every batch can form negatives.
pub fn make_batches(idx: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = idx.chunks(size.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Tracks validation losses and decides when to stop.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            bad: 0,
        }
    }

    /// Records `value` (lower is better); returns true when it improves.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        if value < self.best {
            self.best = value;
            self.best_epoch = Some(epoch);
            self.bad = 0;
            true
        } else {
            self.bad += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_con: f64,
    pub loss_gen: f64,
    pub loss_total: f64,
    pub val_con: f64,
    pub val_gen: f64,
    pub val_total: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
    /// Total loss of every optimizer step.
    pub step_losses: Vec<f64>,
}

pub const METRICS_HEADER: &str = "epoch,lr,loss_con,loss_gen,loss_total,val_total";

impl RunMetrics {
    /// CSV without timings, so reruns compare byte for byte.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{:e},{:e}",
                e.epoch, e.lr, e.loss_con, e.loss_gen, e.loss_total, e.val_total
            );
        }
        s
    }
}

pub struct PretrainOutput<S> {
    pub net: UNet,
    /// Parameters of the best validation epoch.
    pub state: ModelState<S>,
    pub metrics: RunMetrics,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default)]
struct BatchLoss {
    con: f64,
    gen: f64,
    total: f64,
}

struct Step<S> {
    loss: BatchLoss,
    grads: Option<Gradients<S>>,
}

/// Forward (and optionally backward) pass of one batch of originals and views.
fn run_batch<S: Scalar>(
    net: &UNet,
    st: &ModelState<S>,
    cfg: &TrainConfig,
    originals: &[&crate::Image<S>],
    views: &[crate::Image<S>],
    train: bool,
) -> Result<Step<S>> {
    let arm = cfg.mode;
    let mut g = Graph::new();
    let x = Tensor::from_images(originals)?;
    let view_refs: Vec<&crate::Image<S>> = views.iter().collect();
    let xv = g.input(Tensor::from_images(&view_refs)?);
    let enc_view = net.forward_encoder(&mut g, st, xv, train)?;
    let con = if arm.contrastive() {
        let xo = g.input(x.clone());
        let enc_orig = net.forward_encoder(&mut g, st, xo, train)?;
        let z = net.forward_head(&mut g, st, enc_orig.representation, train)?;
        let zt = net.forward_head(&mut g, st, enc_view.representation, train)?;
        Some(contrastive_on_graph(
            &mut g,
            z,
            zt,
            S::lit(cfg.tau),
            cfg.symmetric,
        )?)
    } else {
        None
    };
    let gen = if arm.generative() {
        let dec = net.forward_decoder(&mut g, st, &enc_view, train)?;
        Some(g.mse(dec.output, x)?)
    } else {
        None
    };
    let total = tower_on_graph(&mut g, con, gen, S::lit(cfg.lambda))?;
    let loss = BatchLoss {
        con: con.map_or(0.0, |v| g.value(v).item().as_f64()),
        gen: gen.map_or(0.0, |v| g.value(v).item().as_f64()),
        total: g.value(total).item().as_f64(),
    };
    let grads = if train && loss.total.is_finite() {
        Some(g.backward(total)?)
    } else {
        None
    };
    Ok(Step { loss, grads })
}

fn dump_plans(dir: &Path, epoch: usize, step: usize, plans: &[TransformPlan]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| TowerError::file(dir, e))?;
    let path = dir.join(format!("diverged_e{epoch}_s{step}.jsonl"));
    let mut f = fs::File::create(&path).map_err(|e| TowerError::file(&path, e))?;
    write_plan_log(&mut f, plans)?;
    Ok(path)
}

/// Pre-trains a fresh network on the train split of `data` (validation is
/// carved out of it when the dataset has none). With `out_dir`, writes
/// `metrics.csv` and `best.ckpt` there.
pub fn pretrain<S: Scalar>(
    cfg: &TrainConfig,
    data: &Dataset<S>,
    out_dir: Option<&Path>,
) -> Result<PretrainOutput<S>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TowerError::Data(
            "pre-training needs a non-empty dataset".into(),
        ));
    }
    data.validate()?;
    let (h, w, c) = data.shape().expect("non-empty");
    let unet = cfg.unet(c);
    unet.check_input(h, w)?;
    let mut splits = data.splits.clone();
    carve_validation(&mut splits, derive_seed(cfg.seed, &[7]), cfg.val_frac);
    let train_idx: Vec<usize> = (0..data.len())
        .filter(|&i| splits[i] == Split::Train)
        .collect();
    let val_idx: Vec<usize> = (0..data.len())
        .filter(|&i| splits[i] == Split::Val)
        .collect();
    if cfg.mode.contrastive() && train_idx.len() < 2 {
        return Err(TowerError::Contract(
            "contrastive pre-training needs at least 2 training images".into(),
        ));
    }

    let (net, mut st) = UNet::init::<S, _>(&unet, &mut rng_from_seed(derive_seed(cfg.seed, &[0])))?;
    let aug = cfg.augment(h, w, c);
    let owners = cfg.mode.owners();
    let ids: Vec<ParamId> = owners.iter().flat_map(|&o| st.ids_of(o)).collect();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| TowerError::file(dir, e))?;
    }
    let dump_dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(std::env::temp_dir);

    let mut metrics = RunMetrics::default();
    let mut best_state = st.clone();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut stopped_early = false;
    let mut checkpoint = None;
    let Some(proxy) = cfg.mode.proxy_mode() else {
        if let Some(dir) = out_dir {
            let p = dir.join("best.ckpt");
            save_checkpoint(&p, &unet, &st)?;
            fs::write(dir.join("metrics.csv"), metrics.to_csv())
                .map_err(|e| TowerError::file(dir.join("metrics.csv"), e))?;
            checkpoint = Some(p);
        }
        return Ok(PretrainOutput {
            net,
            state: st,
            metrics,
            best_epoch: None,
            stopped_early,
            checkpoint,
        });
    };

    // validation views are fixed for the whole run
    let val_plans: Vec<TransformPlan> = val_idx
        .iter()
        .map(|&i| {
            sample_plan(
                &mut rng_from_seed(derive_seed(cfg.seed, &[3, i as u64])),
                proxy,
                i as u64,
                &aug,
            )
        })
        .collect();
    let val_views: Vec<crate::Image<S>> = val_idx
        .iter()
        .zip(&val_plans)
        .map(|(&i, p)| apply_plan(&data.images[i], p))
        .collect::<Result<_>>()?;

    let mut order = train_idx.clone();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_init, cfg.lr_min);
        order.copy_from_slice(&train_idx);
        order.shuffle(&mut rng_from_seed(derive_seed(
            cfg.seed,
            &[1, epoch as u64],
        )));
        let mut sums = BatchLoss::default();
        let batches = make_batches(&order, cfg.batch_size);
        let mut epoch_plans = Vec::new();
        for (step, batch) in batches.iter().enumerate() {
            let plans: Vec<TransformPlan> = batch
                .iter()
                .map(|&i| {
                    let mut rng =
                        rng_from_seed(derive_seed(cfg.seed, &[2, epoch as u64, i as u64]));
                    sample_plan(&mut rng, proxy, i as u64, &aug)
                })
                .collect();
            let views = batch
                .iter()
                .zip(&plans)
                .map(|(&i, p)| apply_plan(&data.images[i], p))
                .collect::<Result<Vec<_>>>()?;
            let originals: Vec<&crate::Image<S>> = batch.iter().map(|&i| &data.images[i]).collect();
            let out = match run_batch(&net, &st, cfg, &originals, &views, true) {
                Err(TowerError::Numeric(_)) => None,
                Err(e) => return Err(e),
                Ok(s) => Some(s),
            };
            let (loss, grads) = match out {
                Some(Step {
                    loss,
                    grads: Some(g),
                }) if loss.total.is_finite() && g.all_finite() => (loss, g),
                _ => {
                    let dump = dump_plans(&dump_dir, epoch, step, &plans)?;
                    return Err(TowerError::Diverged { epoch, step, dump });
                }
            };
            let mut grads = grads;
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam_step(&mut st, &grads, lr, &ids)?;
            metrics.step_losses.push(loss.total);
            sums.con += loss.con;
            sums.gen += loss.gen;
            sums.total += loss.total;
            if cfg.log_plans {
                epoch_plans.extend(plans);
            }
        }
        if cfg.log_plans {
            if let Some(dir) = out_dir {
                let pdir = dir.join("plans");
                fs::create_dir_all(&pdir).map_err(|e| TowerError::file(&pdir, e))?;
                let p = pdir.join(format!("epoch_{epoch:04}.jsonl"));
                let mut f = fs::File::create(&p).map_err(|e| TowerError::file(&p, e))?;
                write_plan_log(&mut f, &epoch_plans)?;
            }
        }
        let nb = batches.len().max(1) as f64;
        let train_loss = BatchLoss {
            con: sums.con / nb,
            gen: sums.gen / nb,
            total: sums.total / nb,
        };

        let val_loss = if val_idx.len() >= 2 || (!cfg.mode.contrastive() && !val_idx.is_empty()) {
            let mut v = BatchLoss::default();
            let pos: Vec<usize> = (0..val_idx.len()).collect();
            let vb = make_batches(&pos, cfg.batch_size);
            for b in &vb {
                let originals: Vec<&crate::Image<S>> =
                    b.iter().map(|&k| &data.images[val_idx[k]]).collect();
                let views: Vec<crate::Image<S>> = b.iter().map(|&k| val_views[k].clone()).collect();
                let s = run_batch(&net, &st, cfg, &originals, &views, false)?;
                v.con += s.loss.con;
                v.gen += s.loss.gen;
                v.total += s.loss.total;
            }
            let n = vb.len() as f64;
            BatchLoss {
                con: v.con / n,
                gen: v.gen / n,
                total: v.total / n,
            }
        } else {
            train_loss
        };
        if !val_loss.total.is_finite() {
            let dump = dump_plans(&dump_dir, epoch, usize::MAX, &val_plans)?;
            return Err(TowerError::Diverged {
                epoch,
                step: usize::MAX,
                dump,
            });
        }
        metrics.epochs.push(EpochMetrics {
            epoch,
            lr,
            loss_con: train_loss.con,
            loss_gen: train_loss.gen,
            loss_total: train_loss.total,
            val_con: val_loss.con,
            val_gen: val_loss.gen,
            val_total: val_loss.total,
            wall_secs: started.elapsed().as_secs_f64(),
        });
        if stopper.observe(epoch, val_loss.total) {
            best_state = st.clone();
            if let Some(dir) = out_dir {
                let p = dir.join("best.ckpt");
                save_checkpoint(&p, &unet, &best_state)?;
                checkpoint = Some(p);
            }
        }
        if stopper.should_stop() {
            stopped_early = epoch + 1 < cfg.epochs;
            break;
        }
    }
    if let Some(dir) = out_dir {
        let p = dir.join("metrics.csv");
        fs::write(&p, metrics.to_csv()).map_err(|e| TowerError::file(&p, e))?;
    }
    Ok(PretrainOutput {
        net,
        state: best_state,
        metrics,
        best_epoch: stopper.best().map(|(e, _)| e),
        stopped_early,
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{apply_entries, parse_kv};
    use crate::data::gen_synthetic_retina;
    use crate::nn::Tensor;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 1e-3, 1e-5), 1e-3);
        assert!((cosine_lr(10, 10, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(5, 10, 1e-3, 1e-5) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
    }

    fn scalar_state(w: f64) -> (ModelState<f64>, ParamId) {
        let mut st = ModelState::new();
        let id = st.push("w", Owner::Encoder, Tensor::scalar(w)).unwrap();
        (st, id)
    }

    fn grads_for(id: ParamId, g: f64) -> Gradients<f64> {
        let mut graph = Graph::new();
        let p = graph.param(id, Tensor::scalar(0.0));
        let s = graph.scale(p, g);
        graph.backward(s).unwrap()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (mut st, id) = scalar_state(0.0);
        adam_step(&mut st, &grads_for(id, 1.0), 0.1, &[id]).unwrap();
        assert!((st.get(id).value.item() + 0.1).abs() < 1e-6);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let (mut st, id) = scalar_state(0.7);
        adam_step(&mut st, &grads_for(id, 0.0), 0.1, &[id]).unwrap();
        assert_eq!(st.get(id).value.item(), 0.7);
    }

    #[test]
    fn adam_missing_gradient_is_usage_error() {
        let (mut st, id) = scalar_state(0.0);
        let other = st.push("b", Owner::Head, Tensor::scalar(0.0)).unwrap();
        let err = adam_step(&mut st, &grads_for(id, 1.0), 0.1, &[id, other]).unwrap_err();
        assert!(matches!(err, TowerError::Usage(_)));
    }

    #[test]
    fn early_stopping_counts_exactly() {
        let mut es = EarlyStopping::new(3);
        assert!(es.observe(0, 1.0));
        for e in 1..3 {
            assert!(!es.observe(e, 1.0));
            assert!(!es.should_stop());
        }
        assert!(!es.observe(3, 2.0));
        assert!(es.should_stop());
        assert_eq!(es.best(), Some((0, 1.0)));
    }

    #[test]
    fn batches_never_end_with_a_single_image() {
        let idx: Vec<usize> = (0..9).collect();
        let b = make_batches(&idx, 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(make_batches(&idx[..1], 4), vec![vec![0]]);
    }

    #[test]
    fn config_keys() {
        let mut cfg = TrainConfig::default();
        let e = parse_kv("mode = tower_nl\nbatch_size = 4\nsynthetic_n = 10\nmask_ratio = 0.3")
            .unwrap();
        apply_entries(&e, &mut [&mut cfg]).unwrap();
        assert_eq!(cfg.mode, PretrainArm::GenNl);
        assert_eq!(cfg.data.synthetic_n, 10);
        assert_eq!(cfg.mask_ratio, Some(0.3));
        let err = apply_entries(&parse_kv("lr = 1").unwrap(), &mut [&mut cfg]).unwrap_err();
        assert!(matches!(err, TowerError::ConfigKey { key, .. } if key == "lr"));
        cfg.set("lr_init", "0").unwrap();
        assert!(
            matches!(cfg.validate(), Err(TowerError::ConfigKey { key, .. }) if key == "lr_init")
        );
        let mut c2 = TrainConfig {
            mode: PretrainArm::Tower,
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(c2.validate().is_err());
        c2.mode = PretrainArm::GenM;
        c2.validate().unwrap();
        c2.set("preset", "full_segmentation").unwrap();
        assert_eq!((c2.batch_size, c2.lr_init), (32, 1e-2));
    }

    fn small(mode: PretrainArm, seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            mode,
            seed,
            epochs,
            batch_size: 8,
            patience: epochs,
            base_channels: 4,
            head_hidden: 16,
            embed_dim: 8,
            lr_init: 3e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_reduces_loss() {
        let data = gen_synthetic_retina::<f32>(48, 16, 16, 1).unwrap();
        for seed in 0..3 {
            let out = pretrain(&small(PretrainArm::Tower, seed, 50), &data, None).unwrap();
            let steps = &out.metrics.step_losses;
            assert!(steps.len() >= 200, "{} steps", steps.len());
            let first = &out.metrics.epochs[0];
            let last = out.metrics.epochs.last().unwrap();
            assert!(
                last.loss_total < first.loss_total,
                "seed {seed}: {} -> {}",
                first.loss_total,
                last.loss_total
            );
        }
    }

    fn moved(before: &ModelState<f32>, after: &ModelState<f32>, owner: Owner) -> bool {
        before
            .ids_of(owner)
            .iter()
            .any(|&id| before.get(id).value != after.get(id).value)
    }

    #[test]
    fn arms_touch_only_their_branches() {
        let data = gen_synthetic_retina::<f32>(20, 16, 16, 2).unwrap();
        let init = |cfg: &TrainConfig| {
            UNet::init::<f32, _>(
                &cfg.unet(1),
                &mut rng_from_seed(derive_seed(cfg.seed, &[0])),
            )
            .unwrap()
            .1
        };
        for (arm, head, dec) in [
            (PretrainArm::GenNl, false, true),
            (PretrainArm::ConNlM, true, false),
            (PretrainArm::Tower, true, true),
            (PretrainArm::Random, false, false),
        ] {
            let cfg = small(arm, 4, 2);
            let out = pretrain(&cfg, &data, None).unwrap();
            let st0 = init(&cfg);
            assert_eq!(moved(&st0, &out.state, Owner::Head), head, "{arm} head");
            assert_eq!(
                moved(&st0, &out.state, Owner::Decoder),
                dec,
                "{arm} decoder"
            );
            assert_eq!(
                moved(&st0, &out.state, Owner::Encoder),
                arm != PretrainArm::Random,
                "{arm} encoder"
            );
        }
    }

    #[test]
    fn reruns_are_byte_identical() {
        let data = gen_synthetic_retina::<f32>(20, 16, 16, 3).unwrap();
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        let cfg = TrainConfig {
            log_plans: true,
            ..small(PretrainArm::Tower, 9, 3)
        };
        for d in &dirs {
            pretrain(&cfg, &data, Some(d.path())).unwrap();
        }
        for f in ["best.ckpt", "metrics.csv", "plans/epoch_0002.jsonl"] {
            let a = std::fs::read(dirs[0].path().join(f)).unwrap();
            let b = std::fs::read(dirs[1].path().join(f)).unwrap();
            assert!(a == b, "{f} differs");
        }
    }

    #[test]
    fn divergence_dumps_plans() {
        let data = gen_synthetic_retina::<f32>(12, 16, 16, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            lr_init: 1e30,
            lr_min: 1e30,
            clip_norm: 1e30,
            ..small(PretrainArm::GenNl, 1, 20)
        };
        match pretrain(&cfg, &data, Some(dir.path())) {
            Err(TowerError::Diverged { dump, .. }) => {
                let text = std::fs::read_to_string(dump).unwrap();
                assert!(!text.is_empty());
            }
            other => panic!(
                "expected divergence, got {:?}",
                other.map(|o| o.metrics.epochs.len())
            ),
        }
    }
}
