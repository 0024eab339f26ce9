use super::split_axis;

/// Normalises along `axis` and applies the per-channel affine map.
/// Returns the output together with the per-position `(mean, rstd)` cache.
pub fn layer_norm(
    x: &[f64],
    shape: &[usize],
    axis: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (outer, c, inner) = split_axis(shape, axis);
    let mut mean = vec![0.0; outer * inner];
    let mut rstd = vec![0.0; outer * inner];
    let mut y = vec![0.0; x.len()];
    let inv_c = 1.0 / c as f64;
    for o in 0..outer {
        let base = o * c * inner;
        let m = &mut mean[o * inner..(o + 1) * inner];
        for ch in 0..c {
            let row = &x[base + ch * inner..base + (ch + 1) * inner];
            m.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        m.iter_mut().for_each(|a| *a *= inv_c);
        let r = &mut rstd[o * inner..(o + 1) * inner];
        for ch in 0..c {
            let row = &x[base + ch * inner..base + (ch + 1) * inner];
            for ((a, v), mu) in r.iter_mut().zip(row).zip(m.iter()) {
                let d = v - mu;
                *a += d * d;
            }
        }
        r.iter_mut().for_each(|a| *a = 1.0 / (*a * inv_c + eps).sqrt());
        for ch in 0..c {
            let (g, b) = (gamma[ch], beta[ch]);
            let row = &x[base + ch * inner..base + (ch + 1) * inner];
            let out = &mut y[base + ch * inner..base + (ch + 1) * inner];
            for i in 0..inner {
                out[i] = (row[i] - m[i]) * r[i] * g + b;
            }
        }
    }
    (y, mean, rstd)
}

/// Returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    x: &[f64],
    shape: &[usize],
    axis: usize,
    gamma: &[f64],
    mean: &[f64],
    rstd: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (outer, c, inner) = split_axis(shape, axis);
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let inv_c = 1.0 / c as f64;
    let mut sum_g = vec![0.0; inner];
    let mut sum_gx = vec![0.0; inner];
    for o in 0..outer {
        let base = o * c * inner;
        let m = &mean[o * inner..(o + 1) * inner];
        let r = &rstd[o * inner..(o + 1) * inner];
        sum_g.iter_mut().for_each(|v| *v = 0.0);
        sum_gx.iter_mut().for_each(|v| *v = 0.0);
        for ch in 0..c {
            let row = &x[base + ch * inner..base + (ch + 1) * inner];
            let grow = &dy[base + ch * inner..base + (ch + 1) * inner];
            let g = gamma[ch];
            let (mut dg, mut db) = (0.0, 0.0);
            for i in 0..inner {
                let xhat = (row[i] - m[i]) * r[i];
                dg += grow[i] * xhat;
                db += grow[i];
                let gh = grow[i] * g;
                sum_g[i] += gh;
                sum_gx[i] += gh * xhat;
            }
            dgamma[ch] += dg;
            dbeta[ch] += db;
        }
        for ch in 0..c {
            let row = &x[base + ch * inner..base + (ch + 1) * inner];
            let grow = &dy[base + ch * inner..base + (ch + 1) * inner];
            let out = &mut dx[base + ch * inner..base + (ch + 1) * inner];
            let g = gamma[ch];
            for i in 0..inner {
                let xhat = (row[i] - m[i]) * r[i];
                out[i] = r[i] * (grow[i] * g - inv_c * sum_g[i] - xhat * inv_c * sum_gx[i]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, c, inner) = split_axis(shape, axis);
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |ch: usize| o * c * inner + ch * inner + i;
            let max = (0..c).map(|ch| x[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for ch in 0..c {
                let e = (x[at(ch)] - max).exp();
                y[at(ch)] = e;
                total += e;
            }
            for ch in 0..c {
                y[at(ch)] /= total;
            }
        }
    }
    y
}

pub fn softmax_backward(y: &[f64], shape: &[usize], axis: usize, dy: &[f64]) -> Vec<f64> {
    let (outer, c, inner) = split_axis(shape, axis);
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |ch: usize| o * c * inner + ch * inner + i;
            let dot: f64 = (0..c).map(|ch| y[at(ch)] * dy[at(ch)]).sum();
            for ch in 0..c {
                dx[at(ch)] = y[at(ch)] * (dy[at(ch)] - dot);
            }
        }
    }
    dx
}

/// Divides each last-axis row by `max(norm, eps)`; returns output and the
/// per-row divisor.
pub fn l2_normalize(x: &[f64], c: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / c;
    let mut y = vec![0.0; x.len()];
    let mut div = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let d = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
        div[r] = d;
        y[r * c..(r + 1) * c].iter_mut().zip(row).for_each(|(o, v)| *o = v / d);
    }
    (y, div)
}

pub fn l2_normalize_backward(x: &[f64], y: &[f64], div: &[f64], c: usize, eps: f64, dy: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for (r, &d) in div.iter().enumerate() {
        let span = r * c..(r + 1) * c;
        let yr = &y[span.clone()];
        let gr = &dy[span.clone()];
        let out = &mut dx[span.clone()];
        let norm = x[span].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > eps {
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for i in 0..c {
                out[i] = (gr[i] - yr[i] * dot) / d;
            }
        } else {
            for i in 0..c {
                out[i] = gr[i] / d;
            }
        }
    }
    dx
}
