use limm_tensor::Tensor;

use super::geometry::mean_knn_distance;
use super::CrowdScene;
use crate::error::{invalid, Result};

const FALLBACK_SIGMA: f64 = 4.0;
const MIN_SIGMA: f64 = 0.25;

/// Kernel width per head: `beta` times the mean distance to the `k` nearest
/// neighbours, or a fixed width when a scene has fewer than two heads.
pub fn adaptive_sigmas(points: &[[f64; 2]], beta: f64, k: usize) -> Vec<f64> {
    if points.len() < 2 {
        return vec![FALLBACK_SIGMA; points.len()];
    }
    mean_knn_distance(points, k).into_iter().map(|d| (beta * d).max(MIN_SIGMA)).collect()
}

/// Geometry-adaptive ground-truth density `[1, H, W]`.
///
/// Each head contributes a Gaussian with `sigma = beta * mean distance to its
/// k nearest neighbours`, cut at `4 sigma` and the image border, and
/// renormalised so that it carries mass exactly one.
pub fn gt_density(scene: &CrowdScene, beta: f64, k: usize) -> Result<Tensor> {
    if !(beta > 0.0) || k == 0 {
        return Err(invalid!("gt_density needs beta > 0 and k >= 1"));
    }
    let (h, w) = scene.dims();
    let mut out = Tensor::zeros(&[1, h, w]);
    let sigmas = adaptive_sigmas(&scene.points, beta, k);
    let mut kernel = Vec::new();
    for (&[px, py], &sigma) in scene.points.iter().zip(&sigmas) {
        let reach = 4.0 * sigma;
        let x0 = (px - reach).floor().max(0.0) as usize;
        let x1 = ((px + reach).ceil() as usize).min(w);
        let y0 = (py - reach).floor().max(0.0) as usize;
        let y1 = ((py + reach).ceil() as usize).min(h);
        kernel.clear();
        let mut total = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - px, y as f64 + 0.5 - py);
                let v = if dx.abs() <= reach && dy.abs() <= reach { (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp() } else { 0.0 };
                total += v;
                kernel.push(v);
            }
        }
        let data = out.data_mut();
        let mut it = kernel.iter();
        for y in y0..y1 {
            for x in x0..x1 {
                data[y * w + x] += it.next().unwrap() / total;
            }
        }
    }
    Ok(out)
}

/// Block sums over `stride x stride` cells; partial blocks at the bottom and
/// right edges are summed as they are, so no mass is lost.
pub fn downsample_density(d: &Tensor, stride: usize) -> Result<Tensor> {
    let &[c, h, w] = d.shape() else {
        return Err(invalid!("density must be [C, H, W], got {:?}", d.shape()));
    };
    if stride == 0 {
        return Err(invalid!("stride must be positive"));
    }
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut out = Tensor::zeros(&[c, ho, wo]);
    let src = d.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                dst[(ch * ho + y / stride) * wo + x / stride] += src[(ch * h + y) * w + x];
            }
        }
    }
    Ok(out)
}
