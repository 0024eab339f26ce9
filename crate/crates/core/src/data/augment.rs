use limm_tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::CrowdScene;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop: usize,
    pub scale_range: (f64, f64),
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { crop: 256, scale_range: (0.75, 1.25), flip_prob: 0.5 }
    }
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &Tensor, h2: usize, w2: usize) -> Result<Tensor> {
    let &[c, h, w] = img.shape() else {
        return Err(invalid!("resize expects [C, H, W], got {:?}", img.shape()));
    };
    if h2 == 0 || w2 == 0 {
        return Err(invalid!("resize target must be non-empty"));
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(h, h2), taps(w, w2));
    let src = img.data();
    let mut out = Vec::with_capacity(c * h2 * w2);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(Tensor::new(&[c, h2, w2], out)?)
}

/// Symmetric reflection of pixel index `i` into `[0, n)`.
fn reflect(i: usize, n: usize) -> usize {
    let m = i % (2 * n);
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Mirror images of coordinate `v` on `[0, n)` under symmetric padding that
/// lie in `[0, extent)`.
fn mirror_images(v: f64, n: usize, extent: usize) -> Vec<f64> {
    let period = 2.0 * n as f64;
    let mut out = Vec::new();
    let mut base = 0.0;
    while base < extent as f64 {
        for p in [base + v, base + period - v] {
            if p < extent as f64 {
                out.push(p);
            }
        }
        base += period;
    }
    out
}

/// Largest float strictly below `n`.
fn below(n: usize) -> f64 {
    (n as f64).next_down()
}

/// Random rescale, reflective pad up to the crop, random crop and random
/// horizontal flip, applied jointly to image, points and sizes.
pub fn augment<R: Rng + ?Sized>(scene: &CrowdScene, cfg: &AugmentConfig, rng: &mut R) -> Result<CrowdScene> {
    let (lo, hi) = cfg.scale_range;
    if !(lo > 0.0 && lo <= hi) || cfg.crop == 0 || !(0.0..=1.0).contains(&cfg.flip_prob) {
        return Err(invalid!("invalid augmentation config {cfg:?}"));
    }
    let (h, w) = scene.dims();
    let s = if lo == hi { lo } else { rng.random_range(lo..hi) };
    let (hs, ws) = (((h as f64 * s).round() as usize).max(1), ((w as f64 * s).round() as usize).max(1));
    let (ry, rx) = (hs as f64 / h as f64, ws as f64 / w as f64);
    let image = if (hs, ws) == (h, w) { scene.image.clone() } else { resize_bilinear(&scene.image, hs, ws)? };
    let mut points: Vec<[f64; 2]> = scene.points.iter().map(|&[x, y]| [(x * rx).min(below(ws)), (y * ry).min(below(hs))]).collect();
    let mut sizes: Option<Vec<f64>> = scene.sizes.as_ref().map(|v| v.iter().map(|z| z * s).collect());

    let (hp, wp) = (hs.max(cfg.crop), ws.max(cfg.crop));
    let image = if (hp, wp) == (hs, ws) {
        image
    } else {
        let src = image.data();
        let padded = Tensor::from_fn(&[3, hp, wp], |i| {
            let (c, y, x) = (i / (hp * wp), (i / wp) % hp, i % wp);
            src[(c * hs + reflect(y, hs)) * ws + reflect(x, ws)]
        });
        let mut mirrored = Vec::new();
        let mut mirrored_sizes = Vec::new();
        for (i, &[x, y]) in points.iter().enumerate() {
            for my in mirror_images(y, hs, hp) {
                for mx in mirror_images(x, ws, wp) {
                    mirrored.push([mx, my]);
                    if let Some(sz) = &sizes {
                        mirrored_sizes.push(sz[i]);
                    }
                }
            }
        }
        points = mirrored;
        if sizes.is_some() {
            sizes = Some(mirrored_sizes);
        }
        padded
    };

    let (ch, cw) = (cfg.crop, cfg.crop);
    let y0 = rng.random_range(0..=hp - ch);
    let x0 = rng.random_range(0..=wp - cw);
    let src = image.data();
    let mut cropped = Tensor::from_fn(&[3, ch, cw], |i| {
        let (c, y, x) = (i / (ch * cw), (i / cw) % ch, i % cw);
        src[(c * hp + y0 + y) * wp + x0 + x]
    });
    let keep: Vec<usize> = (0..points.len())
        .filter(|&i| {
            let [x, y] = points[i];
            x >= x0 as f64 && x < (x0 + cw) as f64 && y >= y0 as f64 && y < (y0 + ch) as f64
        })
        .collect();
    let mut points: Vec<[f64; 2]> = keep.iter().map(|&i| [points[i][0] - x0 as f64, points[i][1] - y0 as f64]).collect();
    let sizes: Option<Vec<f64>> = sizes.map(|sz| keep.iter().map(|&i| sz[i]).collect());

    if rng.random::<f64>() < cfg.flip_prob {
        let data = cropped.data_mut();
        for row in data.chunks_exact_mut(cw) {
            row.reverse();
        }
        for p in &mut points {
            p[0] = (cw as f64 - p[0]).min(below(cw));
        }
    }

    let large = match &sizes {
        Some(sz) => sz.iter().any(|&z| z > 50.0),
        None => scene.large,
    };
    Ok(CrowdScene { image: cropped, points, sizes, split: scene.split, regime: scene.regime, large })
}
