//! Density-level contrastive learning over sampled windows: quantile
//! thresholds, level assignment, query/key projection heads, the per-level
//! memory queue and the distance-weighted loss.

use std::collections::VecDeque;
use std::path::Path;

use limm_tensor::{CustomOp, Graph, PoolKind, Tensor, Var};
use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::CrowdScene;
use crate::error::{invalid, LimmError, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};

/// Count thresholds separating density levels. Level 0 is reserved for empty
/// windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityLevelThresholds {
    /// Raw quantile counts, `requested_levels - 1` of them, ascending.
    pub quantiles: Vec<f64>,
    /// Distinct positive quantiles actually used for level assignment.
    pub thresholds: Vec<f64>,
    pub requested_levels: usize,
    /// Number of levels (and queues) in use.
    pub n_levels: usize,
    /// Levels observed on the calibration sample.
    pub reachable: Vec<usize>,
}

impl DensityLevelThresholds {
    /// Level of a window holding `count` people.
    pub fn level(&self, count: f64) -> Result<usize> {
        if !(count >= 0.0) {
            return Err(invalid!("count must be nonnegative, got {count}"));
        }
        if count == 0.0 {
            return Ok(0);
        }
        let above = self.thresholds.iter().filter(|&&t| t < count).count();
        Ok((1 + above).min(self.n_levels - 1))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => LimmError::NotFound(path.display().to_string()),
            _ => e.into(),
        })?;
        let th: Self = serde_json::from_str(&text)?;
        if th.n_levels < 2 || th.thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid!("malformed thresholds in {}", path.display()));
        }
        Ok(th)
    }
}

pub fn assign_level(count: f64, th: &DensityLevelThresholds) -> Result<usize> {
    th.level(count)
}

/// Thresholds from a calibration sample of window counts: the `k * M / N`-th
/// smallest count (1-based) for `k = 1..N-1`.
pub fn thresholds_from_counts(counts: &[f64], n: usize) -> Result<DensityLevelThresholds> {
    if n < 2 {
        return Err(invalid!("need at least two density levels, got {n}"));
    }
    if counts.len() < n {
        return Err(invalid!("{} samples cannot separate {n} levels", counts.len()));
    }
    let mut sorted = counts.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let quantiles: Vec<f64> = (1..n).map(|k| sorted[((k * m) as f64 / n as f64).round() as usize - 1]).collect();
    let mut thresholds: Vec<f64> = quantiles.iter().copied().filter(|&t| t > 0.0).collect();
    thresholds.dedup();
    if thresholds.len() < n - 1 {
        warn!("density thresholds {quantiles:?} contain zero or repeated counts; using {thresholds:?}");
    }
    let n_levels = (thresholds.len() + 2).min(n);
    let mut th = DensityLevelThresholds { quantiles, thresholds, requested_levels: n, n_levels, reachable: Vec::new() };
    let mut seen = vec![false; n_levels];
    for &c in counts {
        seen[th.level(c)?] = true;
    }
    th.reachable = (0..n_levels).filter(|&l| seen[l]).collect();
    if th.reachable.len() < n {
        warn!("only {} of {n} density levels are reachable on the calibration sample", th.reachable.len());
    }
    Ok(th)
}

/// Samples `m` uniformly placed `ws x ws` windows across `scenes` and derives
/// thresholds from their head counts.
pub fn compute_thresholds<R: Rng + ?Sized>(scenes: &[CrowdScene], ws: usize, n: usize, m: usize, rng: &mut R) -> Result<DensityLevelThresholds> {
    if scenes.is_empty() {
        return Err(invalid!("no training scenes to calibrate thresholds on"));
    }
    if ws == 0 || m < 10 * n {
        return Err(invalid!("need ws > 0 and at least {} samples, got ws={ws}, m={m}", 10 * n));
    }
    let mut counts = Vec::with_capacity(m);
    for _ in 0..m {
        let scene = &scenes[rng.random_range(0..scenes.len())];
        let (h, w) = scene.dims();
        let (y0, x0) = (rng.random_range(0..=h.saturating_sub(ws)) as f64, rng.random_range(0..=w.saturating_sub(ws)) as f64);
        let (y1, x1) = (y0 + ws as f64, x0 + ws as f64);
        let c = scene.points.iter().filter(|&&[x, y]| x >= x0 && x < x1 && y >= y0 && y < y1).count();
        counts.push(c as f64);
    }
    thresholds_from_counts(&counts, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightFn {
    Const1,
    Linear,
    Square,
    Pow2,
}

impl WeightFn {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "const1" => Ok(Self::Const1),
            "linear" => Ok(Self::Linear),
            "square" => Ok(Self::Square),
            "pow2" => Ok(Self::Pow2),
            other => Err(invalid!("unknown weight function {other:?}")),
        }
    }
}

/// Repulsion weight between levels `d` apart; zero for the same level.
pub fn distance_weight(d: usize, f: WeightFn) -> f64 {
    if d == 0 {
        return 0.0;
    }
    let x = d as f64;
    match f {
        WeightFn::Const1 => 1.0,
        WeightFn::Linear => x,
        WeightFn::Square => x * x,
        WeightFn::Pow2 => x.exp2(),
    }
}

/// Pool, two-layer perceptron with GELU, unit normalisation.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ProjectionHead {
    fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// `tap` is `[S, C1, h, w]`; returns `[S, C2]` unit rows.
    pub fn forward(&self, g: &mut Graph, p: &Bound, tap: Var) -> Result<Var> {
        let &[s, c1, _, _] = g.shape(tap) else {
            return Err(invalid!("projection expects [S, C1, h, w], got {:?}", g.shape(tap)));
        };
        let x = g.pool2d(tap, PoolKind::GlobalMean, 0, 0)?;
        let x = g.reshape(x, &[s, c1])?;
        let x = g.linear(x, p.get(self.w1), Some(p.get(self.b1)))?;
        let x = g.gelu(x)?;
        let x = g.linear(x, p.get(self.w2), Some(p.get(self.b2)))?;
        Ok(g.l2_normalize(x, 1e-12)?)
    }
}

/// Query head trained by gradient; key head tracks it by EMA.
#[derive(Debug, Clone)]
pub struct ProjectionPair {
    pub q: ProjectionHead,
    pub k: ProjectionHead,
    pub momentum: f64,
}

impl ProjectionPair {
    pub fn new(store: &mut ParamStore, init: &mut Init, prefix: &str, c1: usize, c2: usize, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid!("EMA momentum must lie in [0, 1), got {momentum}"));
        }
        let w1 = init.fan_in(&[c1, c1], c1);
        let w2 = init.fan_in(&[c2, c1], c1);
        let mut head = |tag: &str, frozen: bool| {
            let add = |store: &mut ParamStore, name: String, t: Tensor| if frozen { store.add_frozen(&name, t) } else { store.add(&name, t) };
            ProjectionHead {
                w1: add(store, format!("{prefix}.{tag}.l1.w"), w1.clone()),
                b1: add(store, format!("{prefix}.{tag}.l1.b"), Tensor::zeros(&[c1])),
                w2: add(store, format!("{prefix}.{tag}.l2.w"), w2.clone()),
                b2: add(store, format!("{prefix}.{tag}.l2.b"), Tensor::zeros(&[c2])),
            }
        };
        let q = head("q", false);
        let k = head("k", true);
        Ok(Self { q, k, momentum })
    }

    /// `P_K <- m P_K + (1 - m) P_Q`.
    pub fn ema_update(&self, store: &mut ParamStore) {
        let m = self.momentum;
        for (kq, kk) in self.q.ids().into_iter().zip(self.k.ids()) {
            let q = store.get(kq).clone();
            for (k, q) in store.get_mut(kk).data_mut().iter_mut().zip(q.data()) {
                *k = m * *k + (1.0 - m) * q;
            }
        }
    }
}

/// Per-level FIFO memory of unit key vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiQueue {
    pub dim: usize,
    pub capacity: usize,
    queues: Vec<VecDeque<Vec<f64>>>,
}

/// Frozen copy of the queue contents used by one loss evaluation.
#[derive(Debug, Clone)]
pub struct QueueSnapshot {
    /// `[J, dim]`.
    pub keys: Tensor,
    pub levels: Vec<usize>,
}

impl MultiQueue {
    pub fn new(n_levels: usize, capacity: usize, dim: usize) -> Result<Self> {
        if n_levels == 0 || capacity == 0 || dim == 0 {
            return Err(invalid!("queue needs levels, capacity and dimension > 0"));
        }
        Ok(Self { dim, capacity, queues: vec![VecDeque::with_capacity(capacity); n_levels] })
    }

    pub fn n_levels(&self) -> usize {
        self.queues.len()
    }

    pub fn push(&mut self, level: usize, v: &[f64]) -> Result<()> {
        if level >= self.queues.len() {
            return Err(invalid!("level {level} out of range for {} queues", self.queues.len()));
        }
        if v.len() != self.dim {
            return Err(invalid!("key of length {} pushed into a queue of dimension {}", v.len(), self.dim));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(invalid!("queue keys must be unit vectors, got norm {norm}"));
        }
        let q = &mut self.queues[level];
        if q.len() == self.capacity {
            q.pop_front();
        }
        q.push_back(v.to_vec());
        Ok(())
    }

    pub fn fill(&self, level: usize) -> usize {
        self.queues.get(level).map_or(0, VecDeque::len)
    }

    pub fn total(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    /// Entries of one level, oldest first.
    pub fn entries(&self, level: usize) -> impl Iterator<Item = &[f64]> {
        self.queues[level].iter().map(Vec::as_slice)
    }

    /// Every listed level holds at least `min` keys.
    pub fn is_warm(&self, levels: &[usize], min: usize) -> bool {
        levels.iter().all(|&l| self.fill(l) >= min)
    }

    pub fn snapshot(&self) -> QueueSnapshot {
        let mut data = Vec::with_capacity(self.total() * self.dim);
        let mut levels = Vec::with_capacity(self.total());
        for (l, q) in self.queues.iter().enumerate() {
            for v in q {
                data.extend_from_slice(v);
                levels.push(l);
            }
        }
        let keys = if levels.is_empty() { Tensor::zeros(&[1, self.dim]) } else { Tensor::new(&[levels.len(), self.dim], data).expect("consistent queue") };
        QueueSnapshot { keys, levels }
    }
}

/// `w_ij`: 1 within a level, `distance_weight(|l_i - l_j|)` across levels.
pub fn weight_matrix(levels_q: &[usize], levels_k: &[usize], f: WeightFn) -> Vec<f64> {
    let mut w = Vec::with_capacity(levels_q.len() * levels_k.len());
    for &a in levels_q {
        for &b in levels_k {
            w.push(if a == b { 1.0 } else { distance_weight(a.abs_diff(b), f) });
        }
    }
    w
}

/// Weighted multi-positive contrastive loss on a similarity matrix `[B, J]`:
/// `sum_i -1/|P_i| sum_p log(exp(s_ip/t) / sum_j w_ij exp(s_ij/t)) / denom`.
struct WeightedContrastive {
    positives: Vec<Vec<usize>>,
    weights: Vec<f64>,
    tau: f64,
    denom: f64,
    /// Row softmax of `s/t + ln w`, filled by `forward`.
    probs: Vec<f64>,
}

impl CustomOp for WeightedContrastive {
    fn name(&self) -> &'static str {
        "weighted_contrastive"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> limm_tensor::Result<Tensor> {
        let s = inputs[0];
        let j = s.shape()[1];
        self.probs = vec![0.0; s.numel()];
        let mut total = 0.0;
        let mut logits = vec![0.0; j];
        for (i, pos) in self.positives.iter().enumerate() {
            if pos.is_empty() {
                continue;
            }
            let row = &s.data()[i * j..(i + 1) * j];
            let w = &self.weights[i * j..(i + 1) * j];
            let mut max = f64::NEG_INFINITY;
            for k in 0..j {
                logits[k] = if w[k] > 0.0 { row[k] / self.tau + w[k].ln() } else { f64::NEG_INFINITY };
                max = max.max(logits[k]);
            }
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let lse = max + z.ln();
            for k in 0..j {
                self.probs[i * j + k] = (logits[k] - lse).exp();
            }
            let mean_pos: f64 = pos.iter().map(|&p| row[p] / self.tau).sum::<f64>() / pos.len() as f64;
            total += lse - mean_pos;
        }
        Ok(Tensor::scalar(total / self.denom))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> limm_tensor::Result<Vec<Option<Tensor>>> {
        let s = inputs[0];
        let j = s.shape()[1];
        let scale = grad.item() / (self.denom * self.tau);
        let mut d = vec![0.0; s.numel()];
        for (i, pos) in self.positives.iter().enumerate() {
            if pos.is_empty() {
                continue;
            }
            for k in 0..j {
                d[i * j + k] = scale * self.probs[i * j + k];
            }
            let share = scale / pos.len() as f64;
            for &p in pos {
                d[i * j + p] -= share;
            }
        }
        Ok(vec![Some(Tensor::new(s.shape(), d)?)])
    }
}

/// Contrastive term on precomputed similarities `s: [B, J]` with explicit
/// weights `[B * J]`. Samples without positives are skipped. The sum over
/// samples is divided by `denom`, or by the number of samples kept.
pub fn weighted_contrastive_loss(
    g: &mut Graph,
    s: Var,
    positives: Vec<Vec<usize>>,
    weights: Vec<f64>,
    tau: f64,
    denom: Option<f64>,
) -> Result<Var> {
    let &[b, j] = g.shape(s) else {
        return Err(invalid!("similarities must be [B, J], got {:?}", g.shape(s)));
    };
    if positives.len() != b || weights.len() != b * j {
        return Err(invalid!("positives/weights do not match a [{b}, {j}] similarity matrix"));
    }
    if !(tau > 0.0) {
        return Err(invalid!("temperature must be positive, got {tau}"));
    }
    if positives.iter().flatten().any(|&p| p >= j) {
        return Err(invalid!("positive index out of range"));
    }
    if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
        return Err(invalid!("weights must be finite and nonnegative"));
    }
    let kept = positives.iter().filter(|p| !p.is_empty()).count();
    if kept == 0 {
        return Err(LimmError::InvalidState("every sample lacks positives in the queue".into()));
    }
    let denom = denom.unwrap_or(kept as f64);
    if !(denom > 0.0) {
        return Err(invalid!("normaliser must be positive"));
    }
    let op = WeightedContrastive { positives, weights, tau, denom, probs: Vec::new() };
    Ok(g.custom(&[s], Box::new(op))?)
}

/// Number of queries whose level has at least one key in the snapshot.
pub fn count_with_positives(levels_q: &[usize], snapshot: &QueueSnapshot) -> usize {
    levels_q.iter().filter(|l| snapshot.levels.contains(l)).count()
}

/// WWCL-DL for query embeddings `vq: [B, C2]` against a queue snapshot.
pub fn wwcl_dl_loss(
    g: &mut Graph,
    vq: Var,
    levels_q: &[usize],
    snapshot: &QueueSnapshot,
    tau: f64,
    f: WeightFn,
    denom: Option<f64>,
) -> Result<Var> {
    let &[b, c2] = g.shape(vq) else {
        return Err(invalid!("queries must be [B, C2], got {:?}", g.shape(vq)));
    };
    if levels_q.len() != b {
        return Err(invalid!("{} levels for {b} queries", levels_q.len()));
    }
    let j = snapshot.levels.len();
    if j == 0 {
        return Err(LimmError::InvalidState("queue is empty".into()));
    }
    if snapshot.keys.shape() != [j, c2] {
        return Err(invalid!("queue keys {:?} do not match query width {c2}", snapshot.keys.shape()));
    }
    let positives: Vec<Vec<usize>> = levels_q
        .iter()
        .map(|&l| (0..j).filter(|&k| snapshot.levels[k] == l).collect())
        .collect();
    for (i, p) in positives.iter().enumerate() {
        if p.is_empty() {
            warn!("query {i} at level {} has no positives in the queue; skipped", levels_q[i]);
        }
    }
    let keys = snapshot.keys.data();
    let kt = Tensor::from_fn(&[1, c2, j], |i| keys[(i % j) * c2 + i / j]);
    let kt = g.constant(kt);
    let q = g.reshape(vq, &[1, b, c2])?;
    let s = g.matmul(q, kt)?;
    let s = g.reshape(s, &[b, j])?;
    let weights = weight_matrix(levels_q, &snapshot.levels, f);
    weighted_contrastive_loss(g, s, positives, weights, tau, denom)
}
