//! Bilinear 2x upsampling (half-pixel centres) and window pooling on NCHW maps.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Mean,
    Sum,
    GlobalMean,
}

/// Interpolation taps `(i0, i1, weight_of_i1)` for each of the `2n` outputs.
fn taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample2x(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ty, tx) = (taps(h), taps(w));
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * ho * wo];
    let mut rows = vec![0.0; h * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (ox, &(i0, i1, l)) in tx.iter().enumerate() {
                rows[y * wo + ox] = (1.0 - l) * src[y * w + i0] + l * src[y * w + i1];
            }
        }
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(i0, i1, l)) in ty.iter().enumerate() {
            for ox in 0..wo {
                dst[oy * wo + ox] = (1.0 - l) * rows[i0 * wo + ox] + l * rows[i1 * wo + ox];
            }
        }
    }
    out
}

pub fn upsample2x_backward(dy: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ty, tx) = (taps(h), taps(w));
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![0.0; planes * h * w];
    let mut rows = vec![0.0; h * wo];
    for p in 0..planes {
        rows.iter_mut().for_each(|v| *v = 0.0);
        let g = &dy[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(i0, i1, l)) in ty.iter().enumerate() {
            for ox in 0..wo {
                rows[i0 * wo + ox] += (1.0 - l) * g[oy * wo + ox];
                rows[i1 * wo + ox] += l * g[oy * wo + ox];
            }
        }
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (ox, &(i0, i1, l)) in tx.iter().enumerate() {
                dst[y * w + i0] += (1.0 - l) * rows[y * wo + ox];
                dst[y * w + i1] += l * rows[y * wo + ox];
            }
        }
    }
    dx
}

/// Output spatial size of a pooling pass.
pub fn pool_out(kind: PoolKind, h: usize, w: usize, k: usize, s: usize) -> (usize, usize) {
    match kind {
        PoolKind::GlobalMean => (1, 1),
        _ => ((h - k) / s + 1, (w - k) / s + 1),
    }
}

pub fn pool2d(x: &[f64], planes: usize, h: usize, w: usize, kind: PoolKind, k: usize, s: usize) -> Vec<f64> {
    if kind == PoolKind::GlobalMean {
        let inv = 1.0 / (h * w) as f64;
        return x.chunks_exact(h * w).map(|p| p.iter().sum::<f64>() * inv).collect();
    }
    let (ho, wo) = pool_out(kind, h, w, k, s);
    let scale = if kind == PoolKind::Mean { 1.0 / (k * k) as f64 } else { 1.0 };
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ky in 0..k {
                    let row = &src[(oy * s + ky) * w + ox * s..(oy * s + ky) * w + ox * s + k];
                    acc += row.iter().sum::<f64>();
                }
                out[(p * ho + oy) * wo + ox] = acc * scale;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn pool2d_backward(dy: &[f64], planes: usize, h: usize, w: usize, kind: PoolKind, k: usize, s: usize) -> Vec<f64> {
    let mut dx = vec![0.0; planes * h * w];
    if kind == PoolKind::GlobalMean {
        let inv = 1.0 / (h * w) as f64;
        for (p, g) in dy.iter().enumerate() {
            dx[p * h * w..(p + 1) * h * w].iter_mut().for_each(|v| *v = g * inv);
        }
        return dx;
    }
    let (ho, wo) = pool_out(kind, h, w, k, s);
    let scale = if kind == PoolKind::Mean { 1.0 / (k * k) as f64 } else { 1.0 };
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dy[(p * ho + oy) * wo + ox] * scale;
                for ky in 0..k {
                    let row = &mut dst[(oy * s + ky) * w + ox * s..(oy * s + ky) * w + ox * s + k];
                    row.iter_mut().for_each(|v| *v += g);
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_pixel_row() {
        let out = upsample2x(&[0.0, 1.0], 1, 1, 2);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn single_pixel_and_constant() {
        assert_eq!(upsample2x(&[3.5], 1, 1, 1), vec![3.5; 4]);
        assert!(upsample2x(&[7.0; 12], 1, 3, 4).iter().all(|&v| v == 7.0));
    }

    #[test]
    fn sum_pool_conserves_mass() {
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let y = pool2d(&x, 1, 8, 8, PoolKind::Sum, 4, 4);
        assert_eq!(y.len(), 4);
        let (a, b): (f64, f64) = (x.iter().sum(), y.iter().sum());
        assert!((a - b).abs() < 1e-12);
    }
}
