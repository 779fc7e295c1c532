//! Downstream evaluation: fine-tuning for classification and segmentation,
//! rank AUC, Dice, label-fraction sweeps and embedding export.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{parse_bool, parse_value, Configurable};
use crate::data::{Dataset, Split};
use crate::error::{Result, TowerError};
use crate::image::Image;
use crate::nn::{Classifier, Graph, ModelState, Owner, ParamId, Tensor, UNet};
use crate::rng::{derive_seed, rng_from_seed};
use crate::scalar::Scalar;
use crate::trainer::{adam_step, clip_global_norm, make_batches, EarlyStopping};

/// Rank (Mann-Whitney) AUC of binary scores; ties count one half.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(TowerError::Data(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(TowerError::MetricUndefined(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(TowerError::Numeric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Macro one-vs-rest AUC over the classes present in `labels`. `scores` is
/// row-major `N x k`. For two classes this is the AUC of class 1.
pub fn auc(scores: &[f64], k: usize, labels: &[usize]) -> Result<f64> {
    if k == 0 || scores.len() != labels.len() * k {
        return Err(TowerError::Data(format!(
            "{} scores do not form {} rows of {k}",
            scores.len(),
            labels.len()
        )));
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(TowerError::MetricUndefined(
            "labels contain a single class".into(),
        ));
    }
    if let Some(&bad) = present.iter().find(|&&c| c >= k) {
        return Err(TowerError::Data(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut total = 0.0;
    for &c in &present {
        let col: Vec<f64> = scores.chunks(k).map(|r| r[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        total += binary_auc(&col, &pos)?;
    }
    Ok(total / present.len() as f64)
}

/// `2|P & G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(TowerError::Data(format!(
            "mask sizes {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (a, b) = (a != 0, b != 0);
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Draws `fraction` of `pool` per class, at least one sample of every
/// class. Errors when a class has no sample in `pool`.
pub fn stratified_subsample(
    labels: &[usize],
    pool: &[usize],
    num_classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(TowerError::Domain(format!(
            "label fraction {fraction} outside (0, 1]"
        )));
    }
    let mut out = Vec::new();
    for c in 0..num_classes {
        let mut members: Vec<usize> = pool.iter().copied().filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            return Err(TowerError::Stratification { class: c });
        }
        members.shuffle(&mut rng_from_seed(derive_seed(seed, &[c as u64])));
        let k = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        out.extend_from_slice(&members[..k]);
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classify,
    Segment,
}

impl FromStr for TaskKind {
    type Err = TowerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" | "classification" => Ok(TaskKind::Classify),
            "segment" | "segmentation" => Ok(TaskKind::Segment),
            other => Err(TowerError::Config(format!(
                "unknown task `{other}` (classify, segment)"
            ))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Classify => "classify",
            TaskKind::Segment => "segment",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub task: TaskKind,
    pub ft_epochs: usize,
    pub ft_lr: f64,
    pub ft_batch_size: usize,
    pub ft_patience: usize,
    pub ft_clip_norm: f64,
    pub ft_seed: u64,
    pub label_fraction: f64,
    /// Train only the classifier on a frozen encoder.
    pub linear_probe: bool,
    pub trials: usize,
    pub fractions: Vec<f64>,
    /// Segmentation training-loss level used for epochs-to-target.
    pub loss_target: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Classify,
            ft_epochs: 100,
            ft_lr: 1e-3,
            ft_batch_size: 32,
            ft_patience: 10,
            ft_clip_norm: 5.0,
            ft_seed: 0,
            label_fraction: 1.0,
            linear_probe: false,
            trials: 1,
            fractions: vec![0.1, 0.25, 0.5, 1.0],
            loss_target: 0.2,
        }
    }
}

impl FinetuneConfig {
    /// Fine-tuning budgets of the full-scale runs; `desk` restores the
    /// defaults.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "full_classification" => {
                self.task = TaskKind::Classify;
                self.ft_epochs = 100;
            }
            "full_segmentation" => {
                self.task = TaskKind::Segment;
                self.ft_epochs = 200;
            }
            "desk" => {
                let d = Self::default();
                (
                    self.ft_epochs,
                    self.ft_lr,
                    self.ft_batch_size,
                    self.ft_patience,
                ) = (d.ft_epochs, d.ft_lr, d.ft_batch_size, d.ft_patience);
            }
            other => {
                return Err(TowerError::ConfigKey {
                    key: "ft_preset".into(),
                    reason: format!(
                        "unknown preset `{other}` (full_classification, full_segmentation, desk)"
                    ),
                })
            }
        }
        Ok(())
    }
}

pub fn parse_fractions(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|v| parse_value::<f64>(key, v.trim()))
        .collect()
}

impl Configurable for FinetuneConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "task" => {
                self.task = value
                    .parse()
                    .map_err(|e: TowerError| TowerError::ConfigKey {
                        key: key.into(),
                        reason: e.to_string(),
                    })?
            }
            "ft_preset" => self.apply_preset(value)?,
            "ft_epochs" => self.ft_epochs = parse_value(key, value)?,
            "ft_lr" => self.ft_lr = parse_value(key, value)?,
            "ft_batch_size" => self.ft_batch_size = parse_value(key, value)?,
            "ft_patience" => self.ft_patience = parse_value(key, value)?,
            "ft_clip_norm" => self.ft_clip_norm = parse_value(key, value)?,
            "ft_seed" => self.ft_seed = parse_value(key, value)?,
            "label_fraction" => self.label_fraction = parse_value(key, value)?,
            "linear_probe" => self.linear_probe = parse_bool(key, value)?,
            "trials" => self.trials = parse_value(key, value)?,
            "fractions" => self.fractions = parse_fractions(key, value)?,
            "loss_target" => self.loss_target = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn validate(&self) -> Result<()> {
        let err = |k: &str, r: &str| {
            Err(TowerError::ConfigKey {
                key: k.into(),
                reason: r.into(),
            })
        };
        if !(self.ft_lr > 0.0) {
            return err("ft_lr", "must be > 0");
        }
        if self.ft_batch_size < 1 {
            return err("ft_batch_size", "must be >= 1");
        }
        if self.ft_patience < 1 {
            return err("ft_patience", "must be >= 1");
        }
        if !(self.ft_clip_norm > 0.0) {
            return err("ft_clip_norm", "must be > 0");
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return err("label_fraction", "must lie in (0, 1]");
        }
        if self.trials < 1 {
            return err("trials", "must be >= 1");
        }
        if self.fractions.is_empty() || self.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return err("fractions", "every fraction must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Outcome of one fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    /// Test AUC or test Dice.
    pub metric: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Validation AUC or Dice per epoch.
    pub val_metric: Vec<f64>,
    /// First epoch (1-based) whose training loss reached `loss_target`.
    pub epochs_to_target: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: TaskKind,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
    pub label_fraction: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl EvalResult {
    pub fn from_values(task: TaskKind, label_fraction: f64, values: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&values);
        let metric = match task {
            TaskKind::Classify => "auc",
            TaskKind::Segment => "dice",
        };
        Self {
            task,
            metric: metric.into(),
            mean,
            std,
            values,
            label_fraction,
        }
    }
}

fn stack<'a, S: Scalar>(data: &'a Dataset<S>, idx: &[usize]) -> Result<Tensor<S>> {
    let imgs: Vec<&'a Image<S>> = idx.iter().map(|&i| &data.images[i]).collect();
    Tensor::from_images(&imgs)
}

/// Pooled representations of `idx`, `len x D` row-major.
pub fn representations<S: Scalar>(
    net: &UNet,
    st: &ModelState<S>,
    data: &Dataset<S>,
    idx: &[usize],
    batch: usize,
) -> Result<Vec<S>> {
    let mut out = Vec::with_capacity(idx.len() * net.config().repr_dim());
    for chunk in idx.chunks(batch.max(1)) {
        let mut g = Graph::new();
        let x = g.input(stack(data, chunk)?);
        let enc = net.forward_encoder(&mut g, st, x, false)?;
        out.extend_from_slice(g.value(enc.representation).data());
    }
    Ok(out)
}

fn softmax_rows<S: Scalar>(logits: &[S], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let max = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    out
}

/// Class probabilities for `idx`.
fn classify_scores<S: Scalar>(
    net: &UNet,
    st: &ModelState<S>,
    cls: &Classifier,
    data: &Dataset<S>,
    idx: &[usize],
    batch: usize,
    cached: Option<&[S]>,
) -> Result<Vec<f64>> {
    let d = net.config().repr_dim();
    let mut scores = Vec::with_capacity(idx.len() * cls.classes);
    for (b, chunk) in idx.chunks(batch.max(1)).enumerate() {
        let mut g = Graph::new();
        let r = match cached {
            Some(reps) => {
                let start = b * batch.max(1) * d;
                g.input(Tensor::new(
                    vec![chunk.len(), d],
                    reps[start..start + chunk.len() * d].to_vec(),
                )?)
            }
            None => {
                let x = g.input(stack(data, chunk)?);
                net.forward_encoder(&mut g, st, x, false)?.representation
            }
        };
        let logits = cls.forward(&mut g, st, r)?;
        scores.extend(softmax_rows(g.value(logits).data(), cls.classes));
    }
    Ok(scores)
}

/// Validation criterion: AUC when defined, otherwise minus the loss.
fn selection_score(scores: &[f64], k: usize, labels: &[usize]) -> f64 {
    match auc(scores, k, labels) {
        Ok(a) => a,
        Err(_) => {
            let nll: f64 = scores
                .chunks(k)
                .zip(labels)
                .map(|(r, &l)| -(r[l].max(1e-300)).ln())
                .sum();
            -nll / labels.len().max(1) as f64
        }
    }
}

/// Fine-tunes a copy of `state` with a fresh linear head and reports the
/// test AUC of the epoch with the best validation AUC.
pub fn finetune_classify<S: Scalar>(
    net: &UNet,
    state: &ModelState<S>,
    data: &Dataset<S>,
    cfg: &FinetuneConfig,
    label_fraction: f64,
    trial: u64,
) -> Result<TrialResult> {
    cfg.validate()?;
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| TowerError::Data("classification needs class labels".into()))?;
    let k = data.num_classes;
    if k < 2 {
        return Err(TowerError::Data(
            "classification needs at least 2 classes".into(),
        ));
    }
    let seed = derive_seed(cfg.ft_seed, &[trial]);
    let pool = data.indices(Split::Train);
    let train = stratified_subsample(labels, &pool, k, label_fraction, derive_seed(seed, &[0]))?;
    let val = data.indices(Split::Val);
    let test = data.indices(Split::Test);
    if test.is_empty() {
        return Err(TowerError::Data("dataset has no test split".into()));
    }

    let mut st = state.clone();
    st.remove_owner(Owner::Classifier);
    let cls = Classifier::attach(
        &mut st,
        net.config().repr_dim(),
        k,
        &mut rng_from_seed(derive_seed(seed, &[1])),
    )?;
    st.reset_optimizer();
    let ids: Vec<ParamId> = if cfg.linear_probe {
        st.ids_of(Owner::Classifier)
    } else {
        st.ids_of(Owner::Encoder)
            .into_iter()
            .chain(st.ids_of(Owner::Classifier))
            .collect()
    };
    let d = net.config().repr_dim();
    // frozen encoder: representations never change, compute them once
    let cache = |idx: &[usize]| -> Result<Option<Vec<S>>> {
        if cfg.linear_probe {
            Ok(Some(representations(
                net,
                state,
                data,
                idx,
                cfg.ft_batch_size,
            )?))
        } else {
            Ok(None)
        }
    };
    let train_reps = cache(&train)?;
    let val_reps = cache(&val)?;
    let test_reps = cache(&test)?;
    let val_labels: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
    let test_labels: Vec<usize> = test.iter().map(|&i| labels[i]).collect();

    let mut stopper = EarlyStopping::new(cfg.ft_patience);
    let mut best = st.clone();
    let mut result = TrialResult {
        metric: f64::NAN,
        best_epoch: 0,
        epochs_run: 0,
        train_loss: vec![],
        val_metric: vec![],
        epochs_to_target: None,
    };
    let mut pos: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.ft_epochs {
        pos.sort_unstable();
        pos.shuffle(&mut rng_from_seed(derive_seed(seed, &[2, epoch as u64])));
        let mut loss_sum = 0.0;
        let batches = make_batches(&pos, cfg.ft_batch_size);
        for b in &batches {
            let mut g = Graph::new();
            let r = match &train_reps {
                Some(reps) => {
                    let rows: Vec<S> = b
                        .iter()
                        .flat_map(|&p| reps[p * d..(p + 1) * d].iter().copied())
                        .collect();
                    g.input(Tensor::new(vec![b.len(), d], rows)?)
                }
                None => {
                    let idx: Vec<usize> = b.iter().map(|&p| train[p]).collect();
                    let x = g.input(stack(data, &idx)?);
                    net.forward_encoder(&mut g, &st, x, true)?.representation
                }
            };
            let logits = cls.forward(&mut g, &st, r)?;
            let y: Vec<usize> = b.iter().map(|&p| labels[train[p]]).collect();
            let loss = g.softmax_cross_entropy(logits, &y)?;
            let lv = g.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(TowerError::Numeric(format!(
                    "non-finite fine-tuning loss at epoch {epoch}"
                )));
            }
            loss_sum += lv;
            let mut grads = g.backward(loss)?;
            clip_global_norm(&mut grads, cfg.ft_clip_norm);
            adam_step(&mut st, &grads, cfg.ft_lr, &ids)?;
        }
        result
            .train_loss
            .push(loss_sum / batches.len().max(1) as f64);
        result.epochs_run = epoch + 1;
        let criterion = if val.is_empty() {
            -result.train_loss[epoch]
        } else {
            let s = classify_scores(
                net,
                &st,
                &cls,
                data,
                &val,
                cfg.ft_batch_size,
                val_reps.as_deref(),
            )?;
            selection_score(&s, k, &val_labels)
        };
        result.val_metric.push(criterion);
        if stopper.observe(epoch, -criterion) {
            best = st.clone();
            result.best_epoch = epoch;
        }
        if stopper.should_stop() {
            break;
        }
    }
    let scores = classify_scores(
        net,
        &best,
        &cls,
        data,
        &test,
        cfg.ft_batch_size,
        test_reps.as_deref(),
    )?;
    result.metric = auc(&scores, k, &test_labels)?;
    Ok(result)
}

fn binarize<S: Scalar>(m: &Image<S>) -> Vec<u8> {
    let half = S::lit(0.5);
    m.data().iter().map(|&v| (v > half) as u8).collect()
}

/// Mean per-image Dice of `idx` at probability threshold 0.5.
pub fn segment_dice<S: Scalar>(
    net: &UNet,
    st: &ModelState<S>,
    data: &Dataset<S>,
    idx: &[usize],
    batch: usize,
) -> Result<f64> {
    let masks = data
        .masks
        .as_ref()
        .ok_or_else(|| TowerError::Data("segmentation needs ground-truth masks".into()))?;
    let mut total = 0.0;
    for chunk in idx.chunks(batch.max(1)) {
        let mut g = Graph::new();
        let x = g.input(stack(data, chunk)?);
        let enc = net.forward_encoder(&mut g, st, x, false)?;
        let dec = net.forward_decoder(&mut g, st, &enc, false)?;
        let logits = g.value(dec.logits).data();
        let per = logits.len() / chunk.len();
        for (j, &i) in chunk.iter().enumerate() {
            // sigmoid(l) > 0.5 exactly when l > 0
            let pred: Vec<u8> = logits[j * per..(j + 1) * per]
                .iter()
                .map(|&l| (l > S::zero()) as u8)
                .collect();
            total += dice(&pred, &binarize(&masks[i]))?;
        }
    }
    Ok(total / idx.len().max(1) as f64)
}

/// Fine-tunes encoder and decoder of a copy of `state` on the masks with
/// pixel-wise binary cross-entropy; reports test Dice at the best
/// validation epoch.
pub fn finetune_segment<S: Scalar>(
    net: &UNet,
    state: &ModelState<S>,
    data: &Dataset<S>,
    cfg: &FinetuneConfig,
    label_fraction: f64,
    trial: u64,
) -> Result<TrialResult> {
    cfg.validate()?;
    let masks = data
        .masks
        .as_ref()
        .ok_or_else(|| TowerError::Data("segmentation needs ground-truth masks".into()))?;
    if net.config().out_channels != 1 {
        return Err(TowerError::Config(format!(
            "segmentation needs a 1-channel decoder output, network has {}",
            net.config().out_channels
        )));
    }
    if !(label_fraction > 0.0 && label_fraction <= 1.0) {
        return Err(TowerError::Domain(format!(
            "label fraction {label_fraction} outside (0, 1]"
        )));
    }
    let seed = derive_seed(cfg.ft_seed, &[trial]);
    let mut train = data.indices(Split::Train);
    if label_fraction < 1.0 {
        train.shuffle(&mut rng_from_seed(derive_seed(seed, &[0])));
        let k = ((label_fraction * train.len() as f64).round() as usize).clamp(1, train.len());
        train.truncate(k);
        train.sort_unstable();
    }
    if train.is_empty() {
        return Err(TowerError::Data("no training images".into()));
    }
    let val = data.indices(Split::Val);
    let test = data.indices(Split::Test);
    if test.is_empty() {
        return Err(TowerError::Data("dataset has no test split".into()));
    }
    let mut st = state.clone();
    st.remove_owner(Owner::Classifier);
    st.reset_optimizer();
    let ids: Vec<ParamId> = if cfg.linear_probe {
        st.ids_of(Owner::Decoder)
    } else {
        st.ids_of(Owner::Encoder)
            .into_iter()
            .chain(st.ids_of(Owner::Decoder))
            .collect()
    };
    let train_encoder = !cfg.linear_probe;

    let mut stopper = EarlyStopping::new(cfg.ft_patience);
    let mut best = st.clone();
    let mut result = TrialResult {
        metric: f64::NAN,
        best_epoch: 0,
        epochs_run: 0,
        train_loss: vec![],
        val_metric: vec![],
        epochs_to_target: None,
    };
    let mut order = train.clone();
    for epoch in 0..cfg.ft_epochs {
        order.copy_from_slice(&train);
        order.shuffle(&mut rng_from_seed(derive_seed(seed, &[2, epoch as u64])));
        let batches = make_batches(&order, cfg.ft_batch_size);
        let mut loss_sum = 0.0;
        for b in &batches {
            let mut g = Graph::new();
            let x = g.input(stack(data, b)?);
            let enc = net.forward_encoder(&mut g, &st, x, train_encoder)?;
            let dec = net.forward_decoder(&mut g, &st, &enc, true)?;
            let gt: Vec<&Image<S>> = b.iter().map(|&i| &masks[i]).collect();
            let loss = g.bce_with_logits(dec.logits, Tensor::from_images(&gt)?)?;
            let lv = g.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(TowerError::Numeric(format!(
                    "non-finite fine-tuning loss at epoch {epoch}"
                )));
            }
            loss_sum += lv;
            let mut grads = g.backward(loss)?;
            clip_global_norm(&mut grads, cfg.ft_clip_norm);
            adam_step(&mut st, &grads, cfg.ft_lr, &ids)?;
        }
        let mean_loss = loss_sum / batches.len().max(1) as f64;
        result.train_loss.push(mean_loss);
        result.epochs_run = epoch + 1;
        if result.epochs_to_target.is_none() && mean_loss <= cfg.loss_target {
            result.epochs_to_target = Some(epoch + 1);
        }
        let criterion = if val.is_empty() {
            -mean_loss
        } else {
            segment_dice(net, &st, data, &val, cfg.ft_batch_size)?
        };
        result.val_metric.push(criterion);
        if stopper.observe(epoch, -criterion) {
            best = st.clone();
            result.best_epoch = epoch;
        }
        if stopper.should_stop() {
            break;
        }
    }
    result.metric = segment_dice(net, &best, data, &test, cfg.ft_batch_size)?;
    Ok(result)
}

/// Runs `cfg.trials` fine-tuning trials of the configured task.
pub fn evaluate<S: Scalar>(
    net: &UNet,
    state: &ModelState<S>,
    data: &Dataset<S>,
    cfg: &FinetuneConfig,
    label_fraction: f64,
) -> Result<EvalResult> {
    let values = (0..cfg.trials as u64)
        .map(|t| {
            let r = match cfg.task {
                TaskKind::Classify => finetune_classify(net, state, data, cfg, label_fraction, t)?,
                TaskKind::Segment => finetune_segment(net, state, data, cfg, label_fraction, t)?,
            };
            Ok(r.metric)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult::from_values(cfg.task, label_fraction, values))
}

/// A named starting point for fine-tuning.
pub struct Arm<'a, S> {
    pub name: String,
    pub net: &'a UNet,
    pub state: &'a ModelState<S>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub arm: String,
    pub fraction: f64,
    pub trial: usize,
    pub metric: String,
    pub value: f64,
}

/// Full factorial over arms, fractions and trials, in that nesting order.
pub fn label_fraction_sweep<S: Scalar>(
    arms: &[Arm<'_, S>],
    fractions: &[f64],
    data: &Dataset<S>,
    cfg: &FinetuneConfig,
    trials: usize,
) -> Result<Vec<SweepRow>> {
    if let Some(&bad) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(TowerError::Domain(format!(
            "label fraction {bad} outside (0, 1]"
        )));
    }
    let metric = match cfg.task {
        TaskKind::Classify => "auc",
        TaskKind::Segment => "dice",
    };
    let mut rows = Vec::with_capacity(arms.len() * fractions.len() * trials);
    for arm in arms {
        for &f in fractions {
            for t in 0..trials {
                let r = match cfg.task {
                    TaskKind::Classify => {
                        finetune_classify(arm.net, arm.state, data, cfg, f, t as u64)?
                    }
                    TaskKind::Segment => {
                        finetune_segment(arm.net, arm.state, data, cfg, f, t as u64)?
                    }
                };
                rows.push(SweepRow {
                    arm: arm.name.clone(),
                    fraction: f,
                    trial: t,
                    metric: metric.into(),
                    value: r.metric,
                });
            }
        }
    }
    Ok(rows)
}

pub const SWEEP_HEADER: &str = "arm,fraction,trial,metric,value";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.arm, r.fraction, r.trial, r.metric, r.value
        );
    }
    s
}

pub fn read_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| TowerError::Ingestion {
            row: i + 2,
            reason: e.to_string(),
        })?;
        let bad = |what: &str| TowerError::Ingestion {
            row: i + 2,
            reason: format!("bad {what}"),
        };
        if rec.len() != 5 {
            return Err(bad("column count"));
        }
        rows.push(SweepRow {
            arm: rec[0].to_string(),
            fraction: rec[1].parse().map_err(|_| bad("fraction"))?,
            trial: rec[2].parse().map_err(|_| bad("trial"))?,
            metric: rec[3].to_string(),
            value: rec[4].parse().map_err(|_| bad("value"))?,
        });
    }
    Ok(rows)
}

/// Mean metric of `arm` at `fraction`.
pub fn sweep_mean(rows: &[SweepRow], arm: &str, fraction: f64) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.arm == arm && r.fraction == fraction)
        .map(|r| r.value)
        .collect();
    (!v.is_empty()).then(|| mean_std(&v).0)
}

/// Smallest fraction at which `arm` reaches the mean of `reference` at
/// full labels.
pub fn matching_fraction(rows: &[SweepRow], arm: &str, reference: &str) -> Option<f64> {
    let target = sweep_mean(rows, reference, 1.0)?;
    let mut fracs: Vec<f64> = rows
        .iter()
        .filter(|r| r.arm == arm)
        .map(|r| r.fraction)
        .collect();
    fracs.sort_by(f64::total_cmp);
    fracs.dedup();
    fracs
        .into_iter()
        .find(|&f| sweep_mean(rows, arm, f).is_some_and(|m| m >= target))
}

/// CSV of `id, label, r_0 .. r_{D-1}` for every sample.
pub fn export_embeddings<S: Scalar>(
    net: &UNet,
    st: &ModelState<S>,
    data: &Dataset<S>,
) -> Result<String> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let d = net.config().repr_dim();
    let reps = representations(net, st, data, &idx, 64)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..d).map(|j| format!("r{j}")));
    let csv_err = |e: csv::Error| TowerError::Format(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for i in idx {
        let mut rec = vec![
            data.ids[i].clone(),
            data.labels
                .as_ref()
                .map_or(String::new(), |l| l[i].to_string()),
        ];
        rec.extend(reps[i * d..(i + 1) * d].iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| TowerError::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| TowerError::Format(e.to_string()))
}
