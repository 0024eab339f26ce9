//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::VecDeque;

use limm_core::contrastive::{QueueSnapshot, WeightFn};
use limm_tensor::cases::SplitMix;
use limm_tensor::Tensor;

/// Unweighted multi-positive contrastive loss by direct summation, averaged
/// over the queries that have positives.
pub fn plain_multi_queue_loss(q: &[Vec<f64>], levels_q: &[usize], keys: &[Vec<f64>], levels_k: &[usize], tau: f64) -> f64 {
    let mut total = 0.0;
    let mut kept = 0;
    for (qi, &li) in q.iter().zip(levels_q) {
        let sims: Vec<f64> = keys.iter().map(|k| k.iter().zip(qi).map(|(a, b)| a * b).sum::<f64>() / tau).collect();
        let z: f64 = sims.iter().map(|s| s.exp()).sum();
        let pos: Vec<usize> = (0..keys.len()).filter(|&j| levels_k[j] == li).collect();
        if pos.is_empty() {
            continue;
        }
        kept += 1;
        total += pos.iter().map(|&p| -(sims[p].exp() / z).ln()).sum::<f64>() / pos.len() as f64;
    }
    total / kept as f64
}

/// Weighted variant of the same direct sum, with the weight rule written out.
pub fn weighted_loss_direct(s: &[Vec<f64>], levels_q: &[usize], levels_k: &[usize], tau: f64, f: impl Fn(usize) -> f64) -> f64 {
    let mut total = 0.0;
    let mut kept = 0;
    for (row, &li) in s.iter().zip(levels_q) {
        let w = |j: usize| if levels_k[j] == li { 1.0 } else { f(li.abs_diff(levels_k[j])) };
        let z: f64 = (0..row.len()).map(|j| w(j) * (row[j] / tau).exp()).sum();
        let pos: Vec<usize> = (0..row.len()).filter(|&j| levels_k[j] == li).collect();
        if pos.is_empty() {
            continue;
        }
        kept += 1;
        total += pos.iter().map(|&p| -((row[p] / tau).exp() / z).ln()).sum::<f64>() / pos.len() as f64;
    }
    total / kept as f64
}

pub fn unit_vec(r: &mut SplitMix, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| r.uniform(-1.0, 1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// A random batch and queue with every level represented in the queue.
pub struct ContrastiveInstance {
    pub q: Vec<Vec<f64>>,
    pub levels_q: Vec<usize>,
    pub keys: Vec<Vec<f64>>,
    pub levels_k: Vec<usize>,
    pub tau: f64,
}

impl ContrastiveInstance {
    pub fn random(r: &mut SplitMix) -> Self {
        let n_levels = 2 + (r.next_u64() % 5) as usize;
        let dim = 2 + (r.next_u64() % 8) as usize;
        let b = 1 + (r.next_u64() % 6) as usize;
        let j = n_levels + (r.next_u64() % 20) as usize;
        let levels_k: Vec<usize> = (0..j).map(|i| if i < n_levels { i } else { (r.next_u64() % n_levels as u64) as usize }).collect();
        let levels_q = (0..b).map(|_| (r.next_u64() % n_levels as u64) as usize).collect();
        Self {
            q: (0..b).map(|_| unit_vec(r, dim)).collect(),
            levels_q,
            keys: (0..j).map(|_| unit_vec(r, dim)).collect(),
            levels_k,
            tau: r.uniform(0.05, 1.0),
        }
    }

    pub fn snapshot(&self) -> QueueSnapshot {
        let dim = self.keys[0].len();
        QueueSnapshot { keys: Tensor::new(&[self.keys.len(), dim], self.keys.concat()).unwrap(), levels: self.levels_k.clone() }
    }

    pub fn queries(&self) -> Tensor {
        Tensor::new(&[self.q.len(), self.q[0].len()], self.q.concat()).unwrap()
    }
}

pub fn weight_of(f: WeightFn) -> impl Fn(usize) -> f64 {
    move |d| match f {
        WeightFn::Const1 => 1.0,
        WeightFn::Linear => d as f64,
        WeightFn::Square => (d * d) as f64,
        WeightFn::Pow2 => (1u64 << d) as f64,
    }
}

/// List-based FIFO model of a multi-queue.
pub struct FifoOracle {
    pub capacity: usize,
    pub lists: Vec<VecDeque<Vec<f64>>>,
}

impl FifoOracle {
    pub fn new(n: usize, capacity: usize) -> Self {
        Self { capacity, lists: vec![VecDeque::new(); n] }
    }

    pub fn push(&mut self, level: usize, v: Vec<f64>) {
        let l = &mut self.lists[level];
        l.push_back(v);
        while l.len() > self.capacity {
            l.pop_front();
        }
    }
}

/// Thresholds by sorting: the `round(k M / N)`-th smallest count (1-based).
pub fn brute_quantiles(counts: &[f64], n: usize) -> Vec<f64> {
    let mut s = counts.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (1..n).map(|k| s[(k as f64 * s.len() as f64 / n as f64).round() as usize - 1]).collect()
}

/// Level by explicit comparison against each threshold in turn.
pub fn brute_level(count: f64, thresholds: &[f64], n_levels: usize) -> usize {
    if count == 0.0 {
        return 0;
    }
    let mut level = 1;
    for &t in thresholds {
        if count > t {
            level += 1;
        }
    }
    if level > n_levels - 1 {
        n_levels - 1
    } else {
        level
    }
}

/// Forward value of the weighted contrastive loss on fixed similarities.
pub fn contrastive_value(s: &Tensor, positives: &[Vec<usize>], weights: &[f64], tau: f64) -> f64 {
    let mut g = limm_tensor::Graph::new();
    let sv = g.constant(s.clone());
    let loss = limm_core::contrastive::weighted_contrastive_loss(&mut g, sv, positives.to_vec(), weights.to_vec(), tau, None).unwrap();
    g.value(loss).item()
}

/// Central-difference derivative of the loss with respect to one negative
/// similarity, for each weight in `ws` placed on that negative.
pub fn repulsion_gradients(r: &mut SplitMix, ws: &[f64]) -> Vec<f64> {
    let n_levels = 3 + (r.next_u64() % 4) as usize;
    let b = 1 + (r.next_u64() % 4) as usize;
    let j = 2 * n_levels + (r.next_u64() % 12) as usize;
    let levels_k: Vec<usize> = (0..j).map(|i| if i < n_levels { i } else { (r.next_u64() % n_levels as u64) as usize }).collect();
    let levels_q: Vec<usize> = (0..b).map(|_| (r.next_u64() % n_levels as u64) as usize).collect();
    let tau = r.uniform(0.1, 1.0);
    let s = r.tensor(&[b, j], -1.0, 1.0);
    let positives: Vec<Vec<usize>> = levels_q.iter().map(|&l| (0..j).filter(|&k| levels_k[k] == l).collect()).collect();
    let i = (r.next_u64() % b as u64) as usize;
    let negatives: Vec<usize> = (0..j).filter(|&k| levels_k[k] != levels_q[i]).collect();
    let k = negatives[(r.next_u64() % negatives.len() as u64) as usize];
    let mut weights = limm_core::contrastive::weight_matrix(&levels_q, &levels_k, WeightFn::Pow2);
    let h = 1e-4;
    ws.iter()
        .map(|&w| {
            weights[i * j + k] = w;
            let mut plus = s.clone();
            plus.data_mut()[i * j + k] += h;
            let mut minus = s.clone();
            minus.data_mut()[i * j + k] -= h;
            (contrastive_value(&plus, &positives, &weights, tau) - contrastive_value(&minus, &positives, &weights, tau)) / (2.0 * h)
        })
        .collect()
}
