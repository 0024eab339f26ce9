//! Global sub-sampled attention, counting heads and the point-supervised
//! losses.

use limm_tensor::{ConvParams, Graph, PoolKind, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::LN_EPS;
use crate::error::{invalid, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GsaConfig {
    pub heads: usize,
    pub d_model: usize,
}

#[derive(Debug, Clone)]
struct LinearParams {
    w: ParamId,
    b: ParamId,
}

impl LinearParams {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, din: usize, dout: usize) -> Self {
        Self { w: store.add(&format!("{name}.w"), init.fan_in(&[dout, din], din)), b: store.add(&format!("{name}.b"), Tensor::zeros(&[dout])) }
    }

    fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.linear(x, p.get(self.w), Some(p.get(self.b)))?)
    }
}

/// Attention in which every window contributes one pooled key and value and
/// every position of every window queries all of them.
#[derive(Debug, Clone)]
pub struct Gsa {
    pub cfg: GsaConfig,
    q: LinearParams,
    k: LinearParams,
    v: LinearParams,
    o: LinearParams,
}

pub struct GsaOutput {
    /// `[nWin, C, a, a]`, same layout as the input.
    pub out: Var,
    /// `[heads, nWin * a * a, nWin]`.
    pub attention: Var,
}

impl Gsa {
    pub fn new(store: &mut ParamStore, init: &mut Init, prefix: &str, cfg: GsaConfig) -> Result<Self> {
        if cfg.heads == 0 || cfg.d_model % cfg.heads != 0 {
            return Err(invalid!("model width {} is not divisible by {} heads", cfg.d_model, cfg.heads));
        }
        let d = cfg.d_model;
        Ok(Self {
            cfg,
            q: LinearParams::new(store, init, &format!("{prefix}.q"), d, d),
            k: LinearParams::new(store, init, &format!("{prefix}.k"), d, d),
            v: LinearParams::new(store, init, &format!("{prefix}.v"), d, d),
            o: LinearParams::new(store, init, &format!("{prefix}.o"), d, d),
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, windows: Var) -> Result<GsaOutput> {
        let &[n, c, a, b] = g.shape(windows) else {
            return Err(invalid!("gsa expects a window stack, got {:?}", g.shape(windows)));
        };
        if c != self.cfg.d_model || a != b || n == 0 {
            return Err(invalid!("gsa expects [nWin >= 1, {}, a, a], got [{n}, {c}, {a}, {b}]", self.cfg.d_model));
        }
        let (h, dh, pos) = (self.cfg.heads, c / self.cfg.heads, n * a * a);

        let pooled = g.pool2d(windows, PoolKind::GlobalMean, 0, 0)?;
        let pooled = g.reshape(pooled, &[n, c])?;
        let k = self.k.apply(g, p, pooled)?;
        let v = self.v.apply(g, p, pooled)?;

        let tokens = g.permute(windows, &[0, 2, 3, 1])?;
        let tokens = g.reshape(tokens, &[pos, c])?;
        let q = self.q.apply(g, p, tokens)?;

        let q = g.reshape(q, &[pos, h, dh])?;
        let q = g.permute(q, &[1, 0, 2])?;
        let k = g.reshape(k, &[n, h, dh])?;
        let kt = g.permute(k, &[1, 2, 0])?;
        let v = g.reshape(v, &[n, h, dh])?;
        let v = g.permute(v, &[1, 0, 2])?;

        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attention = g.softmax(scores, 2)?;
        let mixed = g.matmul(attention, v)?;
        let mixed = g.permute(mixed, &[1, 0, 2])?;
        let mixed = g.reshape(mixed, &[pos, c])?;
        let out = self.o.apply(g, p, mixed)?;
        let out = g.reshape(out, &[n, a, a, c])?;
        let out = g.permute(out, &[0, 3, 1, 2])?;
        Ok(GsaOutput { out, attention })
    }
}

#[derive(Debug, Clone)]
struct UpBlock {
    t_w: ParamId,
    t_b: ParamId,
    c_w: ParamId,
    c_b: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
}

impl UpBlock {
    fn new(store: &mut ParamStore, init: &mut Init, prefix: &str, cin: usize, cout: usize) -> Self {
        Self {
            t_w: store.add(&format!("{prefix}.tconv.w"), init.fan_in(&[cin, cout, 2, 2], cin)),
            t_b: store.add(&format!("{prefix}.tconv.b"), Tensor::zeros(&[cout])),
            c_w: store.add(&format!("{prefix}.conv.w"), init.fan_in(&[cout, cin, 1, 1], cin)),
            c_b: store.add(&format!("{prefix}.conv.b"), Tensor::zeros(&[cout])),
            ln_g: store.add(&format!("{prefix}.ln.g"), Tensor::ones(&[cout])),
            ln_b: store.add(&format!("{prefix}.ln.b"), Tensor::zeros(&[cout])),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let a = g.conv_transpose2d(x, p.get(self.t_w), Some(p.get(self.t_b)), 2, 0)?;
        let up = g.bilinear_upsample2x(x)?;
        let b = g.conv2d(up, p.get(self.c_w), Some(p.get(self.c_b)), ConvParams::default())?;
        let y = g.add(a, b)?;
        let y = g.layer_norm(y, p.get(self.ln_g), p.get(self.ln_b), 1, LN_EPS)?;
        Ok(g.gelu(y)?)
    }
}

/// Two 2x upsampling blocks (transposed conv plus bilinear-then-1x1 branch),
/// halving channels each time, then a 1x1 conv to one channel.
#[derive(Debug, Clone)]
pub struct CountingHead {
    pub cin: usize,
    blocks: [UpBlock; 2],
    out_w: ParamId,
    out_b: ParamId,
}

impl CountingHead {
    pub fn new(store: &mut ParamStore, init: &mut Init, prefix: &str, cin: usize) -> Result<Self> {
        if cin < 4 || cin % 4 != 0 {
            return Err(invalid!("counting head input width {cin} must be a multiple of 4"));
        }
        Ok(Self {
            cin,
            blocks: [UpBlock::new(store, init, &format!("{prefix}.up0"), cin, cin / 2), UpBlock::new(store, init, &format!("{prefix}.up1"), cin / 2, cin / 4)],
            out_w: store.add(&format!("{prefix}.out.w"), init.fan_in(&[1, cin / 4, 1, 1], cin / 4)),
            out_b: store.add(&format!("{prefix}.out.b"), Tensor::zeros(&[1])),
        })
    }

    /// Density before the nonnegativity clamp, `[n, 1, 4h, 4w]`.
    pub fn forward_raw(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        if g.shape(x).len() != 4 || g.shape(x)[1] != self.cin {
            return Err(invalid!("counting head expects [n, {}, h, w], got {:?}", self.cin, g.shape(x)));
        }
        let y = self.blocks[0].forward(g, p, x)?;
        let y = self.blocks[1].forward(g, p, y)?;
        Ok(g.conv2d(y, p.get(self.out_w), Some(p.get(self.out_b)), ConvParams::default())?)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = self.forward_raw(g, p, x)?;
        Ok(g.relu(y)?)
    }
}

/// Annotations whose head size exceeds `threshold` pixels.
pub fn filter_large_heads(points: &[[f64; 2]], sizes: &[f64], threshold: f64) -> Result<Vec<[f64; 2]>> {
    if points.len() != sizes.len() {
        return Err(invalid!("{} sizes for {} points", sizes.len(), points.len()));
    }
    Ok(points.iter().zip(sizes).filter(|(_, &s)| s > threshold).map(|(p, _)| *p).collect())
}

pub const LARGE_HEAD_PX: f64 = 50.0;

/// Posterior `p(n | m)` of each annotation `n` given density cell `m` of an
/// `h x w` map, `[n, h * w]`. Cell centres sit at `(j + 0.5, i + 0.5)`.
pub fn bayesian_posterior(points: &[[f64; 2]], h: usize, w: usize, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(invalid!("sigma must be positive, got {sigma}"));
    }
    let n = points.len();
    let m = h * w;
    let mut post = vec![0.0; n * m];
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut logits = vec![0.0; n];
    for cell in 0..m {
        let (cx, cy) = ((cell % w) as f64 + 0.5, (cell / w) as f64 + 0.5);
        let mut max = f64::NEG_INFINITY;
        for (k, &[x, y]) in points.iter().enumerate() {
            logits[k] = -((x - cx).powi(2) + (y - cy).powi(2)) * inv;
            max = max.max(logits[k]);
        }
        let mut z = 0.0;
        for l in &mut logits {
            *l = (*l - max).exp();
            z += *l;
        }
        for k in 0..n {
            post[k * m + cell] = logits[k] / z;
        }
    }
    Ok(Tensor::new(&[n, m], post)?)
}

/// `sum_n |1 - E[c_n]|` with `E[c_n] = sum_m p(n | m) D(m)`; with no
/// annotations the loss is the total predicted mass. `points` are in
/// density-map pixel coordinates.
pub fn bayesian_loss(g: &mut Graph, density: Var, points: &[[f64; 2]], sigma: f64) -> Result<Var> {
    let s = g.shape(density).to_vec();
    if s.len() < 2 || s[..s.len() - 2].iter().product::<usize>() != 1 {
        return Err(invalid!("bayesian_loss expects a single density map, got {s:?}"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if !(sigma > 0.0) {
        return Err(invalid!("sigma must be positive, got {sigma}"));
    }
    if points.is_empty() {
        return Ok(g.sum(density)?);
    }
    let n = points.len();
    let post = bayesian_posterior(points, h, w, sigma)?.reshape(&[1, n, h * w])?;
    let post = g.constant(post);
    let d = g.reshape(density, &[1, h * w, 1])?;
    let expected = g.matmul(post, d)?;
    let diff = g.add_scalar(expected, -1.0)?;
    let diff = g.abs(diff)?;
    Ok(g.sum(diff)?)
}

/// `L_FB + lambda1 * L_GB + lambda2 * L_C`, skipping absent terms.
pub fn total_loss(g: &mut Graph, fb: Var, gb: Option<Var>, contrastive: Option<Var>, lambda1: f64, lambda2: f64) -> Result<Var> {
    let mut total = fb;
    if let Some(gb) = gb {
        let t = g.scale(gb, lambda1)?;
        total = g.add(total, t)?;
    }
    if let Some(c) = contrastive {
        let t = g.scale(c, lambda2)?;
        total = g.add(total, t)?;
    }
    Ok(total)
}
