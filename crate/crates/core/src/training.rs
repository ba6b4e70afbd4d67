//! Weighted cross-entropy training with AdamW, early stopping on dev loss and
//! averaging of the best checkpoints by dev EER.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{parse_value, unknown_key, KeyValues};
use crate::data_io::{FeatureRecord, Label};
use crate::error::{Error, Result};
use crate::metrics::{compute_eer, ScoreSet};
use crate::nn::Ctx;
use crate::encoders::Variant;
use crate::pipeline::{Model, ModelConfig, Prediction};
use crate::tensor::{Gradients, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// `(w_real, w_fake)`; `None` derives `1 - class frequency` from the training set.
    pub class_weights: Option<(f64, f64)>,
    pub avg_top_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::finetune()
    }
}

impl TrainConfig {
    /// Fine-tuning recipe: learning rate 1e-6.
    pub fn finetune() -> Self {
        Self {
            lr: 1e-6,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            max_epochs: 100,
            patience: 7,
            class_weights: None,
            avg_top_k: 5,
        }
    }

    /// Training from scratch on the synthetic task.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            max_epochs: 12,
            ..Self::finetune()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "finetune" => Ok(Self::finetune()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::Config(format!("unknown training preset {name:?} (finetune, desk)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if self.patience == 0 || self.avg_top_k == 0 || self.batch_size == 0 {
            return bad("patience, avg_top_k and batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("betas must lie in [0, 1) and eps must be positive");
        }
        if let Some((r, f)) = self.class_weights {
            if !(r > 0.0 && f > 0.0) {
                return bad("class weights must be positive");
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("lr", self.lr);
        kv.set("weight_decay", self.weight_decay);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("eps", self.eps);
        kv.set("batch_size", self.batch_size);
        kv.set("max_epochs", self.max_epochs);
        kv.set("patience", self.patience);
        kv.set("avg_top_k", self.avg_top_k);
        match self.class_weights {
            Some((r, f)) => kv.set("class_weights", format!("{r},{f}")),
            None => kv.set("class_weights", "auto"),
        }
        kv
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(p) = kv.get("preset") {
            *self = Self::preset(p)?;
        }
        for (k, v) in kv.iter() {
            match k {
                "preset" => {}
                "lr" => self.lr = parse_value(k, v)?,
                "weight_decay" => self.weight_decay = parse_value(k, v)?,
                "beta1" => self.beta1 = parse_value(k, v)?,
                "beta2" => self.beta2 = parse_value(k, v)?,
                "eps" => self.eps = parse_value(k, v)?,
                "batch_size" => self.batch_size = parse_value(k, v)?,
                "max_epochs" => self.max_epochs = parse_value(k, v)?,
                "patience" => self.patience = parse_value(k, v)?,
                "avg_top_k" => self.avg_top_k = parse_value(k, v)?,
                "class_weights" => {
                    self.class_weights = match v {
                        "auto" => None,
                        _ => {
                            let (r, f) = v
                                .split_once(',')
                                .ok_or_else(|| Error::Config(format!("class_weights: expected `auto` or `w_real,w_fake`, got {v:?}")))?;
                            Some((parse_value(k, r.trim())?, parse_value(k, f.trim())?))
                        }
                    }
                }
                _ => return unknown_key(&format!("train.{k}")),
            }
        }
        Ok(())
    }
}

/// `w_c = 1 - freq_c` over the given labels.
pub fn balanced_class_weights(labels: impl IntoIterator<Item = Label>) -> (f64, f64) {
    let (mut real, mut total) = (0usize, 0usize);
    for l in labels {
        total += 1;
        real += usize::from(l == Label::Real);
    }
    if total == 0 {
        return (1.0, 1.0);
    }
    let fr = real as f64 / total as f64;
    (1.0 - fr, fr)
}

fn class_weight(weights: (f64, f64), label: Label) -> f64 {
    match label {
        Label::Real => weights.0,
        Label::Fake => weights.1,
    }
}

/// `-Σ w_y log softmax(logits)_y / Σ w_y` over a batch of two-class logits.
pub fn wce_loss(logits: &[[f64; 2]], labels: &[Label], weights: (f64, f64)) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "loss needs a non-empty batch with one label per row ({} logits, {} labels)",
            logits.len(),
            labels.len()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (l, &y) in logits.iter().zip(labels) {
        let m = l[0].max(l[1]);
        let lse = m + ((l[0] - m).exp() + (l[1] - m).exp()).ln();
        let w = class_weight(weights, y);
        num += w * (lse - l[y.index()]);
        den += w;
    }
    Ok(num / den)
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.iter() {
            let i = id.index();
            let p = params.get_mut(id);
            if p.shape() != g.shape() || self.m[i].shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                let update = (*mj / c1) / ((*vj / c2).sqrt() + self.eps);
                *w -= self.lr * (update + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// Stops once the monitored loss has failed to decrease for `patience` epochs in a row.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records one epoch's loss; returns true when training should stop.
    pub fn update(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub epoch: usize,
    pub dev_eer: f64,
    pub params: ParamStore,
}

/// Keeps the `k` lowest-EER snapshots; ties go to the earlier epoch.
pub fn retain_top_k(pool: &mut Vec<Snapshot>, candidate: Snapshot, k: usize) {
    pool.push(candidate);
    pool.sort_by(|a, b| a.dev_eer.total_cmp(&b.dev_eer).then(a.epoch.cmp(&b.epoch)));
    pool.truncate(k);
}

/// Element-wise mean of the `k` best snapshots by dev EER (earlier epoch wins ties).
pub fn average_top_k(snapshots: &[Snapshot], k: usize) -> Result<ParamStore> {
    if k == 0 || k > snapshots.len() {
        return Err(Error::InvalidArgument(format!("cannot average top {k} of {} checkpoints", snapshots.len())));
    }
    let mut order: Vec<&Snapshot> = snapshots.iter().collect();
    order.sort_by(|a, b| a.dev_eer.total_cmp(&b.dev_eer).then(a.epoch.cmp(&b.epoch)));
    let chosen = &order[..k];
    let mut avg = chosen[0].params.clone();
    for id in avg.ids().collect::<Vec<_>>() {
        let out = avg.get_mut(id).data_mut();
        for (j, o) in out.iter_mut().enumerate() {
            // Sum in rank order so the result is reproducible bit for bit.
            *o = chosen.iter().map(|s| s.params.get(id).data()[j]).sum::<f64>() / k as f64;
        }
    }
    Ok(avg)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_eer: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Retained snapshots, best first.
    pub top: Vec<Snapshot>,
    /// Weights averaged over the retained snapshots; `None` when no epoch ran.
    pub averaged: Option<ParamStore>,
}

/// Scores every record without dropout.
pub fn predict_all(model: &Model, records: &[FeatureRecord]) -> Result<Vec<Prediction>> {
    records.par_iter().map(|r| model.predict(&r.features)).collect()
}

/// Weighted loss and EER of a model on labelled records.
pub fn evaluate(model: &Model, records: &[FeatureRecord], weights: (f64, f64)) -> Result<(f64, f64)> {
    let preds = predict_all(model, records)?;
    let logits: Vec<[f64; 2]> = preds.iter().map(|p| p.logits).collect();
    let labels: Vec<Label> = records.iter().map(|r| r.label).collect();
    let loss = wce_loss(&logits, &labels, weights)?;
    let scores = ScoreSet::from_labelled(preds.iter().zip(&labels).map(|(p, &l)| (p.score, l)));
    Ok((loss, compute_eer(&scores)?.eer))
}

fn utterance_grad(model: &Model, r: &FeatureRecord, weight: f64, dropout: f64, mut rng: ChaCha8Rng) -> Result<(f64, Gradients)> {
    let mut g = Graph::new(&model.params);
    let mut ctx = Ctx::train(dropout, &mut rng);
    let logits = model.forward(&mut g, &r.features, &mut ctx)?;
    let loss = g.weighted_cross_entropy(logits, r.label.index(), weight)?;
    let l = g.value(loss).data()[0];
    Ok((l, g.backward(loss)?))
}

/// Optional sinks for per-epoch artifacts.
pub struct RunOutput<'a> {
    pub dir: Option<&'a Path>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

impl RunOutput<'_> {
    pub fn none() -> Self {
        Self { dir: None, on_epoch: None }
    }
}

/// Trains `model` in place. Gradients are computed per utterance (in parallel
/// when the thread pool allows) and summed in a fixed order, so results do not
/// depend on the thread count. Per-utterance dropout streams derive from
/// `(seed, epoch, position)`.
pub fn train(
    model: &mut Model,
    train_set: &[FeatureRecord],
    dev_set: &[FeatureRecord],
    cfg: &TrainConfig,
    seed: u64,
    out: RunOutput<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::InvalidArgument("training and dev sets must be non-empty".into()));
    }
    let weights = cfg
        .class_weights
        .unwrap_or_else(|| balanced_class_weights(train_set.iter().map(|r| r.label)));
    let dropout = model.cfg.block.dropout;
    let mut opt = AdamW::new(&model.params, cfg);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut top = Vec::new();
    let mut stopped_early = false;
    let RunOutput { dir, mut on_epoch } = out;
    let mut metrics_file = match dir {
        Some(d) => Some(File::create(d.join("metrics.jsonl"))?),
        None => None,
    };

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut weight_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<(f64, Gradients)>> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let r = &train_set[i];
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    rng.set_stream((b * cfg.batch_size + j) as u64);
                    utterance_grad(model, r, class_weight(weights, r.label), dropout, rng)
                })
                .collect();
            let mut total = Gradients::zeros(&model.params);
            let mut batch_loss = 0.0;
            let mut batch_weight = 0.0;
            for (res, &i) in results.into_iter().zip(batch) {
                let (l, g) = res.map_err(|e| match e {
                    Error::NonFinite { .. } | Error::ScanDiverged { .. } => Error::Diverged { epoch },
                    other => other,
                })?;
                batch_loss += l;
                batch_weight += class_weight(weights, train_set[i].label);
                total.accumulate(&g);
            }
            if !batch_loss.is_finite() || !total.all_finite() {
                return Err(Error::Diverged { epoch });
            }
            total.scale(1.0 / batch_weight);
            opt.step(&mut model.params, &total)?;
            loss_sum += batch_loss;
            weight_sum += batch_weight;
        }
        let train_loss = loss_sum / weight_sum;
        let (dev_loss, dev_eer) = evaluate(model, dev_set, weights).map_err(|e| match e {
            Error::NonFinite { .. } | Error::ScanDiverged { .. } => Error::Diverged { epoch },
            other => other,
        })?;
        if !dev_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            dev_loss,
            dev_eer,
        };
        history.push(rec);
        if let Some(f) = metrics_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
        }
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(&rec);
        }
        retain_top_k(
            &mut top,
            Snapshot {
                epoch,
                dev_eer,
                params: model.params.clone(),
            },
            cfg.avg_top_k,
        );
        if let Some(d) = dir {
            let mut extra = KeyValues::new();
            extra.set("epoch", epoch);
            extra.set("dev_eer", dev_eer);
            model.save(&d.join("last.ckpt"), &extra)?;
        }
        if stopper.update(dev_loss) {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }

    let averaged = if top.is_empty() {
        None
    } else {
        Some(average_top_k(&top, top.len())?)
    };
    if let (Some(d), Some(avg)) = (dir, &averaged) {
        let mut m = model.clone();
        m.params = avg.clone();
        let mut extra = KeyValues::new();
        extra.set("averaged_epochs", top.iter().map(|s| s.epoch.to_string()).collect::<Vec<_>>().join(","));
        m.save(&d.join("model_avg.ckpt"), &extra)?;
        let mut best = model.clone();
        best.params = top[0].params.clone();
        let mut extra = KeyValues::new();
        extra.set("epoch", top[0].epoch);
        extra.set("dev_eer", top[0].dev_eer);
        best.save(&d.join("best.ckpt"), &extra)?;
    }
    Ok(TrainOutcome {
        history,
        stopped_early,
        top,
        averaged,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub checks: Vec<CoordCheck>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&CoordCheck> {
        self.checks.iter().filter(|c| !(c.rel_error < self.tolerance)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    /// Names of parameters with at least one failing coordinate.
    pub fn failing_params(&self) -> Vec<String> {
        let mut names: Vec<String> = self.failures().iter().map(|c| c.param.clone()).collect();
        names.dedup();
        names
    }
}

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares tape gradients of `loss` with central differences on sampled
/// coordinates. Every parameter tensor gets at least one coordinate and the
/// total is at least `min_coords`.
pub fn gradcheck_fn(
    params: &ParamStore,
    loss: impl Fn(&mut Graph<'_>) -> Result<Var>,
    min_coords: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradcheckReport> {
    let grads = {
        let mut g = Graph::new(params);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference(p);
        let l = loss(&mut g)?;
        Ok(g.value(l).data()[0])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_param = min_coords.div_ceil(params.len().max(1)).max(1);
    let mut work = params.clone();
    let mut checks = Vec::new();
    for (id, p) in params.iter() {
        let n = p.value.len();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, per_param).into_vec()
        };
        for idx in picks {
            let orig = work.get(id).data()[idx];
            work.get_mut(id).data_mut()[idx] = orig + FD_STEP;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[idx] = orig - FD_STEP;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads.get(id).data()[idx];
            checks.push(CoordCheck {
                param: p.name.clone(),
                index: idx,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
            });
        }
    }
    Ok(GradcheckReport { tolerance, checks })
}

/// Smallest end-to-end model used for finite-difference checks: one block,
/// width 8, inner width 16, state size 4.
pub fn gradcheck_config(variant: Variant) -> ModelConfig {
    let mut cfg = ModelConfig::new(4, variant, 8, 1);
    cfg.head_hidden = 6;
    cfg.block.mhsa_heads = 2;
    cfg.block.conv_kernel = 3;
    cfg.block.dropout = 0.0;
    cfg.block.mamba.d_state = 4;
    cfg.block.mamba.expand = 2;
    cfg.block.mamba.d_model = 8;
    cfg
}

/// Finite-difference check of the full model's cross-entropy on one random utterance.
pub fn gradcheck(model: &Model, frames: usize, min_coords: usize, tolerance: f64, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = model.cfg.input_dim;
    let x = Tensor::new([frames, c], (0..frames * c).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let target = rng.random_range(0..2usize);
    let loss = |g: &mut Graph<'_>| -> Result<Var> {
        let logits = model.forward(g, &x, &mut Ctx::eval())?;
        g.weighted_cross_entropy(logits, target, 1.0)
    };
    gradcheck_fn(&model.params, loss, min_coords, tolerance, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::CustomOp;

    #[test]
    fn uniform_logits_give_ln2() {
        let l = wce_loss(&[[0.3, 0.3], [-1.0, -1.0]], &[Label::Real, Label::Fake], (1.0, 1.0)).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_predictions_approach_zero_loss() {
        let l = wce_loss(&[[40.0, -40.0], [-40.0, 40.0]], &[Label::Real, Label::Fake], (0.3, 0.7)).unwrap();
        assert!(l < 1e-30);
    }

    #[test]
    fn weight_scale_cancels() {
        let logits = [[0.2, -0.5], [1.0, 0.1], [0.0, 2.0]];
        let labels = [Label::Real, Label::Fake, Label::Fake];
        let a = wce_loss(&logits, &labels, (0.2, 0.8)).unwrap();
        let b = wce_loss(&logits, &labels, (0.4, 1.6)).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(wce_loss(&[], &[], (1.0, 1.0)).is_err());
    }

    #[test]
    fn class_weights_from_frequencies() {
        let labels = [Label::Real, Label::Fake, Label::Fake, Label::Fake];
        assert_eq!(balanced_class_weights(labels), (0.75, 0.25));
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, -2.0]));
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::finetune()
        };
        let mut opt = AdamW::new(&store, &cfg);
        let mut grads = Gradients::zeros(&store);
        let mut one = Graph::new(&store);
        let p = one.param(id);
        let q = one.mul(p, p).unwrap();
        let s = one.sum(q);
        grads.accumulate(&one.backward(s).unwrap());
        opt.step(&mut store, &grads).unwrap();
        // g = 2w; m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        let expect = [1.0 - 0.1 * 2.0 / (2.0 + 1e-8), -2.0 + 0.1 * 4.0 / (4.0 + 1e-8)];
        for (a, b) in store.get(id).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![0.5, 3.0]));
        let before = store.clone();
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::finetune()
        };
        let mut opt = AdamW::new(&store, &cfg);
        opt.step(&mut store, &Gradients::zeros(&before)).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn early_stopping_on_constant_series_stops_at_epoch_eight() {
        let mut s = EarlyStopping::new(7);
        let stop_epoch = (1..=100).find(|_| s.update(1.0)).unwrap();
        assert_eq!(stop_epoch, 8);
    }

    fn snap(epoch: usize, eer: f64, v: f64) -> Snapshot {
        let mut params = ParamStore::new();
        params.add("w", Tensor::vector(vec![v, -v]));
        Snapshot { epoch, dev_eer: eer, params }
    }

    #[test]
    fn averaging_picks_lowest_eers_with_earlier_tie_break() {
        let snaps = [snap(1, 0.2, 1.0), snap(2, 0.1, 2.0), snap(3, 0.1, 3.0), snap(4, 0.3, 4.0)];
        assert_eq!(average_top_k(&snaps, 1).unwrap(), snaps[1].params);
        let avg = average_top_k(&snaps, 3).unwrap();
        assert_eq!(avg.get(avg.id("w").unwrap()).data(), &[2.0, -2.0]);
        assert!(average_top_k(&snaps, 0).is_err());
        assert!(average_top_k(&snaps, 5).is_err());
        let opposite = [snap(1, 0.1, 1.5), snap(2, 0.1, -1.5)];
        let z = average_top_k(&opposite, 2).unwrap();
        assert!(z.get(z.id("w").unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn retained_pool_matches_offline_selection() {
        let eers = [0.4, 0.2, 0.2, 0.5, 0.1, 0.3, 0.2];
        let mut pool = Vec::new();
        for (i, &e) in eers.iter().enumerate() {
            retain_top_k(&mut pool, snap(i + 1, e, i as f64), 3);
        }
        let epochs: Vec<usize> = pool.iter().map(|s| s.epoch).collect();
        assert_eq!(epochs, [5, 2, 3]);
    }

    /// Square whose backward rule is off by a factor of 1.5.
    struct BadSquare;

    impl CustomOp for BadSquare {
        fn name(&self) -> &'static str {
            "bad_square"
        }

        fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
            Ok(vec![Some(inputs[0].mul(grad)?.scale(3.0))])
        }
    }

    #[test]
    fn corrupted_backward_rule_is_caught() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![0.3, -0.7, 1.1]));
        let loss = |g: &mut Graph<'_>| -> Result<Var> {
            let w = g.param(id);
            let sq = g.value(w).map(|v| v * v);
            let y = g.custom(&[w], sq, Box::new(BadSquare));
            Ok(g.sum(y))
        };
        let report = gradcheck_fn(&store, loss, 3, 1e-4, 0).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failing_params(), ["w"]);
    }

    #[test]
    fn clean_model_passes_and_zero_tolerance_fails() {
        use crate::encoders::Variant;
        use crate::pipeline::ModelConfig;
        let mut cfg = ModelConfig::new(8, Variant::PnBiMamba, 8, 1);
        cfg.block.mamba.d_state = 4;
        cfg.head_hidden = 6;
        let model = Model::new(cfg, 3).unwrap();
        let report = gradcheck(&model, 6, 50, 1e-4, 1).unwrap();
        assert!(report.checks.len() >= 50);
        assert!(report.passed(), "max rel {}", report.max_rel_error());
        let strict = GradcheckReport { tolerance: 0.0, ..report };
        assert!(!strict.passed());
    }
}
