//! Training loop: run configuration, AdamW with warmup + cosine schedule,
//! augmentations, window enumeration and evaluation.

use std::f64::consts::PI;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_window, run_window, window_loss, Model, ModelConfig};
use crate::numerics::{Graph, ParamStore};
use crate::pir::NormStats;
use crate::scene_sim::{SceneSample, SimConfig};
use crate::setpred::{evaluate_ap, ApReport, FrameResult, LossBreakdown, LossWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub steps: usize,
    pub warmup: usize,
    /// floor of the cosine schedule
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// global gradient-norm clip; 0 disables
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            batch: 8,
            steps: 1000,
            warmup: 100,
            min_lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if !(self.lr > 0.0) {
            bad.push("optim.lr".into());
        }
        if !(self.weight_decay >= 0.0) {
            bad.push("optim.weight_decay".into());
        }
        if self.batch == 0 {
            bad.push("optim.batch".into());
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            bad.push("optim.min_lr".into());
        }
        if !(0.0..1.0).contains(&self.beta1) {
            bad.push("optim.beta1".into());
        }
        if !(0.0..1.0).contains(&self.beta2) {
            bad.push("optim.beta2".into());
        }
        if !(self.eps > 0.0) {
            bad.push("optim.eps".into());
        }
        if !(self.grad_clip >= 0.0) {
            bad.push("optim.grad_clip".into());
        }
        bad
    }

    /// Linear warmup to `lr`, then cosine decay to `min_lr` at `steps`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}

/// Training-time augmentations; all off by default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augment {
    /// mirror the whole window across the ego x axis with probability 0.5
    pub flip: bool,
    /// image gain/offset jitter amplitude
    pub photometric: f64,
    /// std of Gaussian noise added to point coordinates, metres
    pub point_noise: f64,
    /// per-point drop probability
    pub point_dropout: f64,
}

impl Augment {
    pub fn is_identity(&self) -> bool {
        !self.flip && self.photometric == 0.0 && self.point_noise == 0.0 && self.point_dropout == 0.0
    }

    pub fn problems(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if !(0.0..1.0).contains(&self.photometric) {
            bad.push("augment.photometric".into());
        }
        if !(self.point_noise >= 0.0) {
            bad.push("augment.point_noise".into());
        }
        if !(0.0..1.0).contains(&self.point_dropout) {
            bad.push("augment.point_dropout".into());
        }
        bad
    }

    pub fn apply(&self, window: &[SceneSample], rng: &mut impl Rng) -> Vec<SceneSample> {
        let mut out = window.to_vec();
        if self.flip && rng.random_bool(0.5) {
            out.iter_mut().for_each(mirror);
        }
        if self.photometric > 0.0 {
            let a = self.photometric;
            let gain = 1.0 + rng.random_range(-a..=a);
            let offset = 0.25 * rng.random_range(-a..=a);
            for s in &mut out {
                s.image.data_mut().iter_mut().for_each(|v| *v = (gain * *v + offset).clamp(0.0, 1.0));
            }
        }
        if self.point_dropout > 0.0 {
            for s in &mut out {
                s.points.retain(|_| !rng.random_bool(self.point_dropout));
            }
        }
        if self.point_noise > 0.0 {
            let noise = Normal::new(0.0, self.point_noise).expect("validated std");
            for s in &mut out {
                for p in &mut s.points {
                    p.x += noise.sample(rng);
                    p.y += noise.sample(rng);
                    p.z += noise.sample(rng);
                }
            }
        }
        out
    }
}

/// Reflection `y -> -y` of points, image rows, truths and pose.
pub fn mirror(s: &mut SceneSample) {
    for p in &mut s.points {
        p.y = -p.y;
    }
    let (h, w) = (s.image.rows(), s.image.cols());
    let flipped: Vec<f64> = (0..h).rev().flat_map(|r| s.image.row(r).to_vec()).collect();
    s.image.data_mut().copy_from_slice(&flipped);
    debug_assert_eq!(flipped.len(), h * w);
    for t in &mut s.truths {
        t.cy = -t.cy;
        t.theta = crate::scene_sim::wrap_angle(-t.theta);
    }
    s.ego = crate::scene_sim::EgoPose::new(-s.ego.theta, s.ego.tx, -s.ego.ty, s.ego.t);
}

/// Options that exist in larger training setups but are not provided here.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Reserved {
    pub class_balanced_sampling: bool,
    pub ema: bool,
    pub mixed_precision: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub sim: SimConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub augment: Augment,
    pub reserved: Reserved,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sim: SimConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            augment: Augment::default(),
            reserved: Reserved::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale setting used by the overfit check and the ablation
    /// benchmark: single-target five-frame sequences with 32 px images, four
    /// queries of width 32, learning rate 1e-3 with a short warmup and unit
    /// gradient clipping.
    pub fn compact() -> Self {
        let mut c = Self::default();
        c.sim.frames = 5;
        c.sim.targets = 1;
        c.sim.image_size = 32;
        c.model.embed_dim = 16;
        c.model.pir_hidden = 16;
        c.model.queries = 4;
        c.model.query_dim = 32;
        c.model.backbone.out_dim = 32;
        c.model.backbone.ffn_width = 32;
        c.model.image.size = 32;
        c.model.image.channels = 16;
        c.optim.lr = 1e-3;
        c.optim.warmup = 20;
        c.optim.steps = 2000;
        c.optim.grad_clip = 1.0;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.reserved;
        for (flag, on) in [("class_balanced_sampling", r.class_balanced_sampling), ("ema", r.ema), ("mixed_precision", r.mixed_precision)] {
            if on {
                return Err(Error::NotImplemented(format!("reserved.{flag}")));
            }
        }
        let mut bad = match self.sim.validate() {
            Err(Error::Config(v)) => v,
            Err(e) => return Err(e),
            Ok(()) => Vec::new(),
        };
        bad.extend(self.model.problems());
        bad.extend(self.loss.problems());
        bad.extend(self.optim.problems());
        bad.extend(self.augment.problems());
        if self.sim.image_size != self.model.image.size {
            bad.push("model.image.size (must equal sim.image_size)".into());
        }
        if self.sim.half_extent != self.model.image.half_extent {
            bad.push("model.image.half_extent (must equal sim.half_extent)".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(bad))
        }
    }
}

/// Sample ranges of every window of length up to `history` ending at each
/// frame; windows never cross a sequence start (`t == 0`).
pub fn window_ranges(samples: &[SceneSample], history: usize) -> Vec<Range<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    let mut seq_start = 0;
    for (i, s) in samples.iter().enumerate() {
        if s.t == 0 {
            seq_start = i;
        }
        let start = (i + 1).saturating_sub(history).max(seq_start);
        out.push(start..i + 1);
    }
    out
}

/// Whether a parameter receives decoupled weight decay: weight matrices only.
pub fn decays(name: &str) -> bool {
    let leaf = name.rsplit('/').next().unwrap_or(name);
    leaf == "weight" || leaf.starts_with("w_") || leaf.starts_with("u_")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, a)| vec![0.0; a.len()]).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }

    /// One decoupled-decay update with learning rate `lr`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64, cfg: &OptimConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let decay = if decays(store.name(id)) { cfg.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let values = store.get_mut(id).data_mut();
            for (i, (p, &g)) in values.iter_mut().zip(&grads[k]).enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let step = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
                *p -= lr * (step + decay * *p);
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub cls: f64,
    #[serde(rename = "box")]
    pub boxes: f64,
    pub temp: f64,
    pub total: f64,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub norm: NormStats,
    pub optim: AdamState,
}

impl Trainer {
    /// Fresh model; normalisation statistics are fit on `train`.
    pub fn new(config: RunConfig, train: &[SceneSample]) -> Result<Self> {
        config.validate()?;
        let norm = NormStats::fit(train.iter().flat_map(|s| s.points.iter()));
        let model = Model::new(config.model.clone(), config.seed)?;
        let optim = AdamState::new(&model.store);
        Ok(Self { config, model, norm, optim })
    }

    pub fn step(&self) -> usize {
        self.optim.step as usize
    }

    /// Windows of the batch used at `step`: consecutive slices of a
    /// per-epoch shuffle, so any step can be reproduced without replaying.
    pub fn batch_indices(&self, step: usize, n: usize) -> Vec<usize> {
        let batch = self.config.optim.batch.min(n);
        let per_epoch = (n / batch).max(1);
        let (epoch, slot) = (step / per_epoch, step % per_epoch);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x9e37_79b9_7f4a_7c15 ^ (epoch as u64).wrapping_mul(0x2545_f491));
        order.shuffle(&mut rng);
        order[slot * batch..(slot + 1) * batch].to_vec()
    }

    /// Mean loss and gradient over `windows`, accumulated in batch order.
    pub fn batch_gradients(&self, windows: &[Vec<SceneSample>]) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
        let store = &self.model.store;
        let mut grads: Vec<Vec<f64>> = store.iter().map(|(_, _, a)| vec![0.0; a.len()]).collect();
        let mut sum = LossBreakdown { cls: 0.0, boxes: 0.0, temporal: 0.0, total: 0.0 };
        let scale = 1.0 / windows.len() as f64;
        for window in windows {
            let mut g = Graph::new(store);
            let (loss, _) = window_loss(&mut g, &self.model, window, &self.norm, &self.config.loss)?;
            let values = loss.values(&g);
            if !values.total.is_finite() {
                return Err(Error::NumericDomain(format!(
                    "loss is {} at step {}; first non-finite value: {}",
                    values.total,
                    self.step(),
                    g.first_non_finite().unwrap_or_else(|| "loss".into())
                )));
            }
            let gr = g.backward(loss.total);
            for (id, gv) in gr.iter() {
                if let Some(bad) = gv.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NumericDomain(format!(
                        "non-finite gradient at {}[{bad}] at step {}",
                        store.name(id),
                        self.step()
                    )));
                }
                for (a, &b) in grads[id.index()].iter_mut().zip(gv) {
                    *a += scale * b;
                }
            }
            sum.cls += scale * values.cls;
            sum.boxes += scale * values.boxes;
            sum.temporal += scale * values.temporal;
            sum.total += scale * values.total;
        }
        Ok((sum, grads))
    }

    /// One optimiser step on the batch chosen for the current step.
    pub fn train_step(&mut self, samples: &[SceneSample], windows: &[Range<usize>]) -> Result<StepLog> {
        if windows.is_empty() {
            return Err(Error::Usage("no training windows".into()));
        }
        let step = self.step();
        let picked = self.batch_indices(step, windows.len());
        let aug = &self.config.augment;
        let batch: Vec<Vec<SceneSample>> = picked
            .iter()
            .map(|&i| {
                let w = &samples[windows[i].clone()];
                if aug.is_identity() {
                    w.to_vec()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add((step as u64) << 20 | i as u64));
                    aug.apply(w, &mut rng)
                }
            })
            .collect();
        let (loss, mut grads) = self.batch_gradients(&batch)?;
        let clip = self.config.optim.grad_clip;
        if clip > 0.0 {
            let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                let s = clip / norm;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        let lr = self.config.optim.learning_rate(step);
        self.optim.update(&mut self.model.store, &grads, lr, &self.config.optim);
        if let Some(name) = self.model.store.first_non_finite() {
            return Err(Error::NumericDomain(format!("parameter {name} became non-finite at step {step}")));
        }
        Ok(StepLog { step, lr, cls: loss.cls, boxes: loss.boxes, temp: loss.temporal, total: loss.total })
    }

    /// Runs until `optim.steps`, calling `log` after every step.
    pub fn fit(&mut self, samples: &[SceneSample], log: impl FnMut(&StepLog) -> Result<()>) -> Result<Vec<StepLog>> {
        let windows = window_ranges(samples, self.config.model.history);
        self.fit_windows(samples, &windows, log)
    }

    /// Like [`Trainer::fit`] on an explicit window list.
    pub fn fit_windows(
        &mut self,
        samples: &[SceneSample],
        windows: &[Range<usize>],
        mut log: impl FnMut(&StepLog) -> Result<()>,
    ) -> Result<Vec<StepLog>> {
        let mut out = Vec::new();
        while self.step() < self.config.optim.steps {
            let entry = self.train_step(samples, windows)?;
            log(&entry)?;
            out.push(entry);
        }
        Ok(out)
    }
}

/// Detections for the final frame of every window.
pub fn predict(model: &Model, norm: &NormStats, samples: &[SceneSample]) -> Result<Vec<FrameResult>> {
    predict_windows(model, norm, samples, &window_ranges(samples, model.config.history))
}

pub fn predict_windows(
    model: &Model,
    norm: &NormStats,
    samples: &[SceneSample],
    windows: &[Range<usize>],
) -> Result<Vec<FrameResult>> {
    windows
        .iter()
        .map(|r| {
            let out = run_window(model, &samples[r.clone()], norm)?;
            Ok(FrameResult { detections: out.detections, truths: samples[r.end - 1].truths.clone() })
        })
        .collect()
}

pub fn evaluate(model: &Model, norm: &NormStats, samples: &[SceneSample]) -> Result<ApReport> {
    evaluate_ap(&predict(model, norm, samples)?, model.config.num_classes)
}

/// `(rcs, gate, inside_a_truth_box)` for every point of the final frame of
/// each window; empty when the model has no gate.
pub fn gate_dump(model: &Model, norm: &NormStats, samples: &[SceneSample], margin: f64) -> Result<Vec<(f64, f64, bool)>> {
    let mut out = Vec::new();
    for r in window_ranges(samples, 1) {
        let s = &samples[r.clone()];
        let mut g = Graph::new(&model.store);
        let v = forward_window(&mut g, model, s, norm)?;
        let frame = &v.radar[0];
        if let Some(gates) = frame.gates {
            let truths = &s[0].truths;
            for (p, &gate) in frame.points.iter().zip(g.value(gates).data()) {
                out.push((p.rcs, gate, truths.iter().any(|t| t.contains(p.x, p.y, margin))));
            }
        }
    }
    Ok(out)
}
