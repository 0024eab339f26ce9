use log::warn;
use serde::Serialize;

use super::CrowdScene;
use crate::error::{invalid, Result};

/// Default size for a lone annotation with no neighbours.
pub const LONE_HEAD_SIZE: f64 = 50.0;

/// Mean distance from each point to its three nearest neighbours (fewer when
/// the set is small).
pub fn head_size_3nn(points: &[[f64; 2]]) -> Vec<f64> {
    if points.len() == 1 {
        warn!("single annotation; using default head size {LONE_HEAD_SIZE}");
        return vec![LONE_HEAD_SIZE];
    }
    mean_knn_distance(points, 3)
}

pub(crate) fn mean_knn_distance(points: &[[f64; 2]], k: usize) -> Vec<f64> {
    let mut dists = Vec::with_capacity(points.len());
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            dists.clear();
            dists.extend(
                points
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()),
            );
            let m = k.min(dists.len());
            if m == 0 {
                return 0.0;
            }
            dists.select_nth_unstable_by(m - 1, f64::total_cmp);
            let mut nearest = dists[..m].to_vec();
            nearest.sort_by(f64::total_cmp);
            nearest.iter().sum::<f64>() / m as f64
        })
        .collect()
}

/// Size of an individual from its bounding box.
pub fn size_from_bbox(h: f64, w: f64) -> f64 {
    (h * w).sqrt()
}

/// Annotated sizes when present, otherwise the 3-NN estimate.
pub fn resolved_sizes(scene: &CrowdScene) -> Vec<f64> {
    match &scene.sizes {
        Some(s) => s.clone(),
        None if scene.points.is_empty() => Vec::new(),
        None => head_size_3nn(&scene.points),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeHistogram {
    pub bin_width: f64,
    /// Bin `i` covers `[i * bin_width, (i + 1) * bin_width)`; the last bin
    /// also absorbs everything above.
    pub counts: Vec<usize>,
    pub total: usize,
    pub mean: Option<f64>,
    pub fraction_below_50: Option<f64>,
}

impl SizeHistogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", i as f64 * self.bin_width, (i + 1) as f64 * self.bin_width, c));
        }
        s
    }
}

pub fn size_histogram(scenes: &[CrowdScene], bin_width: f64, n_bins: usize) -> Result<SizeHistogram> {
    if !(bin_width > 0.0) || n_bins == 0 {
        return Err(invalid!("histogram needs a positive bin width and at least one bin"));
    }
    let mut counts = vec![0; n_bins];
    let (mut total, mut sum, mut below) = (0usize, 0.0, 0usize);
    for scene in scenes {
        for s in resolved_sizes(scene) {
            counts[((s / bin_width) as usize).min(n_bins - 1)] += 1;
            total += 1;
            sum += s;
            below += usize::from(s < 50.0);
        }
    }
    let (mean, fraction_below_50) = if total == 0 { (None, None) } else { (Some(sum / total as f64), Some(below as f64 / total as f64)) };
    Ok(SizeHistogram { bin_width, counts, total, mean, fraction_below_50 })
}
