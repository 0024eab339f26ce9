//! Training configuration, AdamW, the training loop and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use limm_tensor::{Graph, Tensor};
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::contrastive::{count_with_positives, wwcl_dl_loss, DensityLevelThresholds, MultiQueue, WeightFn};
use crate::data::{augment, generate_benchmark, load_dataset, resolved_sizes, AugmentConfig, BenchmarkConfig, CrowdScene, Split};
use crate::error::{invalid, LimmError, Result};
use crate::heads::{bayesian_loss, filter_large_heads, total_loss, LARGE_HEAD_PX};
use crate::model::{LimmModel, ModelConfig, DENSITY_STRIDE};
use crate::params::{BindMode, ParamStore};
use crate::windowing::sample_windows;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub backbone: String,
    pub ws: usize,
    pub window_partition: bool,
    pub shift: bool,
    pub gsa: bool,
    pub gsa_heads: usize,
    pub proj_dim: usize,
    pub ema_momentum: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { backbone: "tiny-limm".into(), ws: 64, window_partition: true, shift: true, gsa: true, gsa_heads: 8, proj_dim: 64, ema_momentum: 0.99 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveSection {
    pub enabled: bool,
    /// Density levels `N`, background included.
    pub levels: usize,
    /// Capacity `L` of each sub-queue.
    pub queue_len: usize,
    /// Windows `S` sampled per image.
    pub samples: usize,
    pub tau: f64,
    pub weight_fn: WeightFn,
    /// Minimum fill of every reachable sub-queue before the loss applies.
    pub warmup: usize,
    pub thresholds: Option<PathBuf>,
    /// Windows sampled by the `thresholds` command.
    pub threshold_samples: usize,
}

impl Default for ContrastiveSection {
    fn default() -> Self {
        Self { enabled: true, levels: 6, queue_len: 256, samples: 5, tau: 0.07, weight_fn: WeightFn::Pow2, warmup: 32, thresholds: None, threshold_samples: 3000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Bayesian-loss kernel width in density-map cells.
    pub sigma: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 10.0, sigma: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optimiser steps over which the learning rate ramps linearly up to `lr`.
    pub warmup_steps: usize,
}

impl OptimSection {
    /// Learning rate for 0-based optimiser step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / (self.warmup_steps + 1) as f64
        }
    }
}

impl Default for OptimSection {
    fn default() -> Self {
        Self { lr: 1e-4, weight_decay: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, batch_size: 16, epochs: 30, warmup_steps: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directories written by `gen-data`; when absent the synthetic
    /// benchmark below is generated in memory.
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub synthetic: BenchmarkConfig,
    pub augment: AugmentConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { train: None, val: None, test: None, synthetic: BenchmarkConfig::default(), augment: AugmentConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub contrastive: ContrastiveSection,
    pub loss: LossSection,
    pub optim: OptimSection,
    pub data: DataSection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            model: ModelSection::default(),
            contrastive: ContrastiveSection::default(),
            loss: LossSection::default(),
            optim: OptimSection::default(),
            data: DataSection::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LimmError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LimmError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => LimmError::NotFound(path.display().to_string()),
            _ => e.into(),
        })?;
        Self::from_toml(&text).map_err(|e| LimmError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LimmError::Config(m));
        let o = &self.optim;
        if !(o.lr > 0.0) || !(o.weight_decay >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad(format!("optimizer settings out of range: {o:?}"));
        }
        if o.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        let c = &self.contrastive;
        if c.levels < 2 || c.queue_len == 0 || c.samples == 0 || !(c.tau > 0.0) {
            return bad(format!("contrastive settings out of range: {c:?}"));
        }
        if !(self.loss.lambda1 >= 0.0 && self.loss.lambda2 >= 0.0 && self.loss.sigma > 0.0) {
            return bad(format!("loss settings out of range: {:?}", self.loss));
        }
        let a = &self.data.augment;
        if a.crop == 0 || !(a.scale_range.0 > 0.0 && a.scale_range.0 <= a.scale_range.1) || !(0.0..=1.0).contains(&a.flip_prob) {
            return bad(format!("augmentation settings out of range: {a:?}"));
        }
        if a.crop % self.model.ws != 0 {
            return bad(format!("crop {} must be a multiple of the window size {}", a.crop, self.model.ws));
        }
        if self.contrastive.enabled && self.contrastive.samples > (a.crop / self.model.ws).pow(2) {
            return bad(format!("cannot sample {} windows from a {}px crop", self.contrastive.samples, a.crop));
        }
        self.model_config()?.backbone.validate()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let backbone = BackboneConfig { ws: m.ws, window_partition: m.window_partition, shift: m.shift, ..BackboneConfig::preset(&m.backbone)? };
        Ok(ModelConfig {
            backbone,
            gsa: m.gsa,
            gsa_heads: m.gsa_heads,
            contrastive: self.contrastive.enabled,
            proj_dim: m.proj_dim,
            ema_momentum: m.ema_momentum,
        })
    }

    /// Scenes of one split, from disk when a directory is configured.
    pub fn load_split(&self, split: Split) -> Result<Vec<CrowdScene>> {
        let dir = match split {
            Split::Train => &self.data.train,
            Split::Val => &self.data.val,
            Split::Test => &self.data.test,
        };
        match dir {
            Some(d) => load_dataset(d),
            None => generate_benchmark(&self.data.synthetic, split),
        }
    }

    /// Thresholds for contrastive training.
    pub fn load_thresholds(&self) -> Result<Option<DensityLevelThresholds>> {
        if !self.contrastive.enabled {
            return Ok(None);
        }
        let missing = || LimmError::InvalidState("contrastive training needs density thresholds; run `limm thresholds` first".into());
        let path = self.contrastive.thresholds.as_ref().ok_or_else(missing)?;
        if !path.exists() {
            return Err(missing());
        }
        DensityLevelThresholds::load(path).map(Some)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-3 }
    }
}

/// First and second moments of one parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Decoupled weight decay followed by a bias-corrected Adam update.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, hp: &AdamWParams) {
    if state.m.len() != params.len() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
    }
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        params[i] -= hp.lr * hp.weight_decay * params[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
    }
}

/// AdamW over every trainable parameter of a store.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub hp: AdamWParams,
    states: Vec<AdamState>,
}

impl AdamW {
    pub fn new(hp: AdamWParams, store: &ParamStore) -> Self {
        Self { hp, states: vec![AdamState::default(); store.len()] }
    }

    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.param(id).frozen {
                continue;
            }
            let n = store.get(id).numel();
            let zeros;
            let g = match &grads[id.index()] {
                Some(t) => t.data(),
                None => {
                    zeros = vec![0.0; n];
                    &zeros
                }
            };
            adamw_step(store.get_mut(id).data_mut(), g, &mut self.states[id.index()], &self.hp);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RegimeError {
    pub n: usize,
    pub mae: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    pub per_regime: BTreeMap<String, RegimeError>,
    /// MAE on scenes containing at least one head above 50 px.
    pub large_mae: Option<f64>,
    /// `(ground truth, prediction)` per scene.
    pub pairs: Vec<(f64, f64)>,
}

impl EvalReport {
    pub fn from_predictions(scenes: &[CrowdScene], preds: &[f64]) -> Result<Self> {
        if scenes.len() != preds.len() || scenes.is_empty() {
            return Err(invalid!("{} predictions for {} scenes", preds.len(), scenes.len()));
        }
        let n = scenes.len();
        let pairs: Vec<(f64, f64)> = scenes.iter().zip(preds).map(|(s, &p)| (s.count() as f64, p)).collect();
        let mae = pairs.iter().map(|(t, p)| (t - p).abs()).sum::<f64>() / n as f64;
        let rmse = (pairs.iter().map(|(t, p)| (t - p).powi(2)).sum::<f64>() / n as f64).sqrt();
        let mut per_regime: BTreeMap<String, RegimeError> = BTreeMap::new();
        let (mut large_sum, mut large_n) = (0.0, 0usize);
        for (s, (t, p)) in scenes.iter().zip(&pairs) {
            if let Some(r) = s.regime {
                let e = per_regime.entry(r.name().to_string()).or_default();
                e.n += 1;
                e.mae += (t - p).abs();
            }
            if s.large {
                large_sum += (t - p).abs();
                large_n += 1;
            }
        }
        for e in per_regime.values_mut() {
            e.mae /= e.n as f64;
        }
        let large_mae = (large_n > 0).then(|| large_sum / large_n as f64);
        Ok(Self { n, mae, rmse, per_regime, large_mae, pairs })
    }
}

pub fn evaluate(model: &LimmModel, scenes: &[CrowdScene]) -> Result<EvalReport> {
    let preds = scenes.iter().map(|s| model.predict_count(&s.image)).collect::<Result<Vec<_>>>()?;
    EvalReport::from_predictions(scenes, &preds)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub l_fb: f64,
    pub l_gb: f64,
    pub l_wwcl: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,l_fb,l_gb,l_wwcl,val_mae,val_rmse";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.epoch, r.train_loss, r.l_fb, r.l_gb, r.l_wwcl, r.val_mae, r.val_rmse);
    }
    s
}

pub struct TrainOutcome {
    pub model: LimmModel,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

/// One augmented training image prepared before its forward pass.
struct Prepared {
    scene: CrowdScene,
    windows: Vec<usize>,
    levels: Vec<usize>,
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    model: LimmModel,
    opt: AdamW,
    queue: Option<MultiQueue>,
    thresholds: Option<DensityLevelThresholds>,
    rng: ChaCha8Rng,
    steps: usize,
}

#[derive(Default)]
struct BatchLosses {
    total: f64,
    fb: f64,
    gb: f64,
    wwcl: f64,
}

impl Trainer<'_> {
    fn prepare(&mut self, scene: &CrowdScene) -> Result<Prepared> {
        let scene = augment(scene, &self.cfg.data.augment, &mut self.rng)?;
        let (mut windows, mut levels) = (Vec::new(), Vec::new());
        if let Some(th) = &self.thresholds {
            for w in sample_windows(&scene, self.cfg.model.ws, self.cfg.contrastive.samples, &mut self.rng)? {
                windows.push(w.index);
                levels.push(th.level(w.count as f64)?);
            }
        }
        Ok(Prepared { scene, windows, levels })
    }

    fn step(&mut self, batch: &[Prepared]) -> Result<BatchLosses> {
        let cfg = self.cfg;
        let b = batch.len() as f64;
        let snapshot = match (&self.queue, &self.thresholds) {
            (Some(q), Some(th)) if q.is_warm(&th.reachable, cfg.contrastive.warmup) => Some(q.snapshot()),
            _ => None,
        };
        let contrastive_denom = snapshot.as_ref().map_or(0, |s| batch.iter().map(|p| count_with_positives(&p.levels, s)).sum::<usize>());
        let mut grads: Vec<Option<Tensor>> = vec![None; self.model.store.len()];
        let mut losses = BatchLosses::default();
        let mut keys: Vec<(usize, Vec<f64>)> = Vec::new();

        for item in batch {
            let mut g = Graph::new();
            let p = self.model.bind(&mut g, BindMode::Train);
            let image = g.constant(item.scene.image.clone());
            let out = self.model.forward(&mut g, &p, image, true)?;
            let to_map = |pts: &[[f64; 2]]| pts.iter().map(|&[x, y]| [x / DENSITY_STRIDE as f64, y / DENSITY_STRIDE as f64]).collect::<Vec<_>>();
            let fb = bayesian_loss(&mut g, out.density, &to_map(&item.scene.points), cfg.loss.sigma)?;
            let fb = g.scale(fb, 1.0 / b)?;
            let gb = match out.global {
                Some(global) => {
                    let large = filter_large_heads(&item.scene.points, &resolved_sizes(&item.scene), LARGE_HEAD_PX)?;
                    let l = bayesian_loss(&mut g, global, &to_map(&large), cfg.loss.sigma)?;
                    Some(g.scale(l, 1.0 / b)?)
                }
                None => None,
            };
            let mut wwcl = None;
            if !item.windows.is_empty() {
                let (vq, vk) = self.model.project(&mut g, &p, &out.taps, &item.windows)?;
                let vk_val = g.value(vk);
                let c2 = vk_val.shape()[1];
                for (i, &l) in item.levels.iter().enumerate() {
                    keys.push((l, vk_val.data()[i * c2..(i + 1) * c2].to_vec()));
                }
                if let Some(snap) = &snapshot {
                    if count_with_positives(&item.levels, snap) > 0 {
                        let l = wwcl_dl_loss(&mut g, vq, &item.levels, snap, cfg.contrastive.tau, cfg.contrastive.weight_fn, Some(contrastive_denom as f64))?;
                        wwcl = Some(l);
                    }
                }
            }
            let total = total_loss(&mut g, fb, gb, wwcl, cfg.loss.lambda1, cfg.loss.lambda2)?;
            losses.total += g.value(total).item();
            losses.fb += g.value(fb).item();
            losses.gb += gb.map_or(0.0, |v| g.value(v).item());
            losses.wwcl += wwcl.map_or(0.0, |v| g.value(v).item());
            debug!("step {}: predicted {:.2} of {} heads", self.steps, g.value(out.density).sum(), item.scene.count());

            let mut gr = g.backward(total)?;
            for (i, &v) in p.vars().iter().enumerate() {
                if let Some(t) = gr.take(v) {
                    match &mut grads[i] {
                        Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, x)| *a += x),
                        slot => *slot = Some(t),
                    }
                }
            }
        }

        self.opt.hp.lr = cfg.optim.lr_at(self.steps);
        self.steps += 1;
        self.opt.step(&mut self.model.store, &grads);
        if let Some(q) = &mut self.queue {
            for (l, v) in &keys {
                q.push(*l, v)?;
            }
        }
        if let Some(proj) = &self.model.proj {
            proj.ema_update(&mut self.model.store);
        }
        Ok(losses)
    }
}

/// Trains on `train`, validating on `val` after every epoch. With `out_dir`
/// set, writes `metrics.csv`, `best/` and `last/` checkpoints and the
/// resolved config there.
pub fn train(
    cfg: &TrainConfig,
    train: &[CrowdScene],
    val: &[CrowdScene],
    thresholds: Option<DensityLevelThresholds>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(invalid!("training needs non-empty train and validation splits"));
    }
    let model = LimmModel::new(cfg.model_config()?, cfg.seed)?;
    let queue = match (&thresholds, cfg.contrastive.enabled) {
        (_, false) => None,
        (None, true) => return Err(LimmError::InvalidState("contrastive training needs density thresholds; run `limm thresholds` first".into())),
        (Some(th), true) => {
            if th.requested_levels != cfg.contrastive.levels {
                return Err(LimmError::Config(format!("thresholds were computed for {} levels, config asks for {}", th.requested_levels, cfg.contrastive.levels)));
            }
            Some(MultiQueue::new(th.n_levels, cfg.contrastive.queue_len, cfg.model.proj_dim)?)
        }
    };
    let o = &cfg.optim;
    let hp = AdamWParams { lr: o.lr, beta1: o.beta1, beta2: o.beta2, eps: o.eps, weight_decay: o.weight_decay };
    let opt = AdamW::new(hp, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let thresholds = if cfg.contrastive.enabled { thresholds } else { None };
    let mut t = Trainer { cfg, model, opt, queue, thresholds, rng, steps: 0 };

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    }
    let mut metrics = Vec::new();
    let (mut best_epoch, mut best_val_mae) = (0, f64::INFINITY);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=o.epochs {
        let start = Instant::now();
        order.shuffle(&mut t.rng);
        let mut sums = BatchLosses::default();
        for chunk in order.chunks(o.batch_size) {
            let batch = chunk.iter().map(|&i| t.prepare(&train[i])).collect::<Result<Vec<_>>>()?;
            let l = t.step(&batch)?;
            let k = batch.len() as f64;
            sums.total += l.total * k;
            sums.fb += l.fb * k;
            sums.gb += l.gb * k;
            sums.wwcl += l.wwcl * k;
        }
        let n = train.len() as f64;
        let report = evaluate(&t.model, val)?;
        let row = EpochMetrics {
            epoch,
            train_loss: sums.total / n,
            l_fb: sums.fb / n,
            l_gb: sums.gb / n,
            l_wwcl: sums.wwcl / n,
            val_mae: report.mae,
            val_rmse: report.rmse,
        };
        info!(
            "epoch {epoch}: loss {:.4} (fb {:.4} gb {:.4} wwcl {:.4}) val MAE {:.3} RMSE {:.3} in {:.1?}",
            row.train_loss,
            row.l_fb,
            row.l_gb,
            row.l_wwcl,
            row.val_mae,
            row.val_rmse,
            start.elapsed()
        );
        if report.mae < best_val_mae {
            best_val_mae = report.mae;
            best_epoch = epoch;
            if let Some(dir) = out_dir {
                t.model.save(&dir.join("best"))?;
            }
        }
        metrics.push(row);
        if let Some(dir) = out_dir {
            fs::write(dir.join("metrics.csv"), metrics_csv(&metrics))?;
        }
    }
    if let Some(dir) = out_dir {
        t.model.save(&dir.join("last"))?;
    }
    Ok(TrainOutcome { model: t.model, metrics, best_epoch, best_val_mae })
}

/// `level,v0,...` rows of query embeddings for `samples` random windows of
/// every scene.
pub fn embedding_rows(
    model: &LimmModel,
    scenes: &[CrowdScene],
    thresholds: &DensityLevelThresholds,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<String> {
    let ws = model.cfg.backbone.ws;
    let mut out = String::from("level");
    for i in 0..model.cfg.proj_dim {
        let _ = write!(out, ",v{i}");
    }
    out.push('\n');
    for scene in scenes {
        let picked = sample_windows(scene, ws, samples, rng)?;
        let mut g = Graph::new();
        let p = model.bind(&mut g, BindMode::Frozen);
        let image = g.constant(scene.image.clone());
        let taps = model.backbone.forward(&mut g, &p, image)?;
        let picks: Vec<usize> = picked.iter().map(|w| w.index).collect();
        let (vq, _) = model.project(&mut g, &p, &taps, &picks)?;
        let v = g.value(vq);
        let c2 = v.shape()[1];
        for (i, w) in picked.iter().enumerate() {
            let _ = write!(out, "{}", thresholds.level(w.count as f64)?);
            for x in &v.data()[i * c2..(i + 1) * c2] {
                let _ = write!(out, ",{x}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}
