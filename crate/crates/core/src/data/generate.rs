use limm_tensor::Tensor;
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::{CrowdScene, Regime, Split};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGenConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of ordinary heads per scene.
    pub count_range: (usize, usize),
    pub size_median: f64,
    /// Standard deviation of `ln(size)`.
    pub size_log_sigma: f64,
    pub size_clamp: (f64, f64),
    /// Background clutter in `[0, 1]`.
    pub clutter: f64,
    /// Probability that a scene also receives large heads.
    pub large_fraction: f64,
    pub large_count_range: (usize, usize),
    pub large_size_range: (f64, f64),
    /// Minimum centre distance as a fraction of the mean of two head sizes.
    pub min_separation: f64,
    pub max_retries: usize,
    pub regime: Option<Regime>,
}

impl SceneGenConfig {
    pub fn for_regime(regime: Regime, height: usize, width: usize) -> Self {
        let (count_range, size_median) = match regime {
            Regime::Low => ((1, 30), 14.0),
            Regime::Med => ((31, 110), 10.0),
            Regime::High => ((111, 240), 7.0),
        };
        Self {
            height,
            width,
            count_range,
            size_median,
            size_log_sigma: 0.3,
            size_clamp: (4.0, 40.0),
            clutter: 0.5,
            large_fraction: 0.0,
            large_count_range: (1, 4),
            large_size_range: (56.0, 96.0),
            min_separation: 0.6,
            max_retries: 200,
            regime: Some(regime),
        }
    }

    /// No heads at all.
    pub fn blank(height: usize, width: usize) -> Self {
        Self { count_range: (0, 0), regime: None, ..Self::for_regime(Regime::Low, height, width) }
    }

    fn check(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(invalid!("scene extent must be positive"));
        }
        if self.count_range.0 > self.count_range.1 || self.large_count_range.0 > self.large_count_range.1 {
            return Err(invalid!("count ranges must satisfy lo <= hi"));
        }
        let (lo, hi) = self.size_clamp;
        if !(lo > 0.0 && lo <= hi) || !(self.large_size_range.0 > 0.0 && self.large_size_range.0 <= self.large_size_range.1) {
            return Err(invalid!("head size ranges must be positive and ordered"));
        }
        if !(0.0..=1.0).contains(&self.large_fraction) || !(0.0..=1.0).contains(&self.clutter) {
            return Err(invalid!("large_fraction and clutter must lie in [0, 1]"));
        }
        Ok(())
    }
}

struct Head {
    x: f64,
    y: f64,
    size: f64,
}

fn place<R: Rng + ?Sized>(heads: &mut Vec<Head>, target: usize, cfg: &SceneGenConfig, mut size: impl FnMut(&mut R) -> f64, rng: &mut R) -> usize {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut placed = 0;
    'heads: for _ in 0..target {
        let s = size(rng);
        for _ in 0..cfg.max_retries {
            let (x, y) = (rng.random::<f64>() * w, rng.random::<f64>() * h);
            let clear = heads.iter().all(|o| {
                let min = cfg.min_separation * 0.5 * (s + o.size);
                (o.x - x).powi(2) + (o.y - y).powi(2) >= min * min
            });
            if clear {
                heads.push(Head { x, y, size: s });
                placed += 1;
                continue 'heads;
            }
        }
        break;
    }
    placed
}

/// Smooth random field on an `h x w` grid, built from a coarse lattice.
fn value_noise<R: Rng + ?Sized>(h: usize, w: usize, cells: usize, rng: &mut R) -> Vec<f64> {
    let (gh, gw) = (cells + 1, cells + 1);
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = (y as f64 + 0.5) / h as f64 * cells as f64;
        let y0 = (fy as usize).min(cells - 1);
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = (x as f64 + 0.5) / w as f64 * cells as f64;
            let x0 = (fx as usize).min(cells - 1);
            let tx = fx - x0 as f64;
            let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

fn render<R: Rng + ?Sized>(cfg: &SceneGenConfig, heads: &[Head], rng: &mut R) -> Tensor {
    let (h, w) = (cfg.height, cfg.width);
    let mut img = vec![0.0; 3 * h * w];
    let base: [f64; 3] = [0.35 + 0.3 * rng.random::<f64>(), 0.35 + 0.3 * rng.random::<f64>(), 0.35 + 0.3 * rng.random::<f64>()];
    let noise = value_noise(h, w, 6, rng);
    for c in 0..3 {
        for i in 0..h * w {
            img[c * h * w + i] = base[c] + 0.25 * (noise[i] - 0.5) + 0.04 * (rng.random::<f64>() - 0.5);
        }
    }

    let n_clutter = (cfg.clutter * 24.0).round() as usize;
    for _ in 0..n_clutter {
        let (cx, cy) = (rng.random::<f64>() * w as f64, rng.random::<f64>() * h as f64);
        let (rx, ry) = (4.0 + 30.0 * rng.random::<f64>(), 2.0 + 8.0 * rng.random::<f64>());
        let color = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let (x0, x1) = ((cx - rx).max(0.0) as usize, ((cx + rx).ceil() as usize).min(w));
        let (y0, y1) = ((cy - ry).max(0.0) as usize, ((cy + ry).ceil() as usize).min(h));
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                if dx.abs() <= 1.0 && dy.abs() <= 1.0 {
                    for c in 0..3 {
                        let p = &mut img[(c * h + y) * w + x];
                        *p = 0.5 * *p + 0.5 * color[c];
                    }
                }
            }
        }
    }

    for head in heads {
        let r = head.size / 2.0;
        let hair = 0.08 + 0.2 * rng.random::<f64>();
        let skin = [0.55 + 0.35 * rng.random::<f64>(), 0.4 + 0.3 * rng.random::<f64>(), 0.3 + 0.25 * rng.random::<f64>()];
        let (x0, x1) = ((head.x - r).max(0.0) as usize, ((head.x + r).ceil() as usize).min(w));
        let (y0, y1) = ((head.y - r).max(0.0) as usize, ((head.y + r).ceil() as usize).min(h));
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - head.x, y as f64 + 0.5 - head.y);
                let d = (dx * dx + dy * dy).sqrt() / r;
                if d > 1.0 {
                    continue;
                }
                let face = dy > -0.2 * r && d < 0.8;
                for c in 0..3 {
                    let v = if d > 0.85 {
                        0.5 * hair
                    } else if face {
                        skin[c] * (1.0 - 0.35 * d * d)
                    } else {
                        hair * (1.2 - 0.4 * d)
                    };
                    img[(c * h + y) * w + x] = v;
                }
            }
        }
    }

    // Quantise to 8 bits so that PNG round trips are lossless.
    for v in &mut img {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    Tensor::new(&[3, h, w], img).expect("render produces a [3, H, W] buffer")
}

pub fn generate_scene<R: Rng + ?Sized>(cfg: &SceneGenConfig, rng: &mut R) -> Result<CrowdScene> {
    cfg.check()?;
    let mut heads = Vec::new();

    let large = cfg.large_fraction > 0.0 && rng.random::<f64>() < cfg.large_fraction;
    if large {
        let (lo, hi) = cfg.large_size_range;
        let k = rng.random_range(cfg.large_count_range.0..=cfg.large_count_range.1);
        let got = place(&mut heads, k, cfg, |r: &mut R| lo + (hi - lo) * r.random::<f64>(), rng);
        if got < k {
            warn!("placed {got} of {k} large heads; separation unsatisfiable");
        }
    }

    let k = rng.random_range(cfg.count_range.0..=cfg.count_range.1);
    let dist = LogNormal::new(cfg.size_median.ln(), cfg.size_log_sigma).map_err(|e| invalid!("size distribution: {e}"))?;
    let (lo, hi) = cfg.size_clamp;
    let got = place(&mut heads, k, cfg, |r: &mut R| dist.sample(r).clamp(lo, hi), rng);
    if got < k {
        warn!("placed {got} of {k} heads; separation unsatisfiable");
    }

    let image = render(cfg, &heads, rng);
    let large = heads.iter().any(|h| h.size > 50.0);
    Ok(CrowdScene {
        image,
        points: heads.iter().map(|h| [h.x, h.y]).collect(),
        sizes: Some(heads.iter().map(|h| h.size).collect()),
        split: None,
        regime: cfg.regime,
        large,
    })
}

/// Layout of the fixed synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub large_fraction: f64,
    pub blank_fraction: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self { seed: 0, height: 256, width: 256, n_train: 2000, n_val: 200, n_test: 200, large_fraction: 0.15, blank_fraction: 0.03 }
    }
}

const SPLIT_STRIDE: u64 = 1 << 32;

/// Scene `i` of a split uses its own stream seeded from `seed + offset + i`,
/// so splits can be generated independently and in any order.
pub fn generate_benchmark(cfg: &BenchmarkConfig, split: Split) -> Result<Vec<CrowdScene>> {
    let (n, offset) = match split {
        Split::Train => (cfg.n_train, 0),
        Split::Val => (cfg.n_val, SPLIT_STRIDE),
        Split::Test => (cfg.n_test, 2 * SPLIT_STRIDE),
    };
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(offset).wrapping_add(i as u64));
            let regime = Regime::ALL[i % 3];
            let mut gen = if rng.random::<f64>() < cfg.blank_fraction {
                SceneGenConfig::blank(cfg.height, cfg.width)
            } else {
                SceneGenConfig { large_fraction: cfg.large_fraction, ..SceneGenConfig::for_regime(regime, cfg.height, cfg.width) }
            };
            gen.regime = Some(regime);
            let mut scene = generate_scene(&gen, &mut rng)?;
            scene.split = Some(split);
            Ok(scene)
        })
        .collect()
}
