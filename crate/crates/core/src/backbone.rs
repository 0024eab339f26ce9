//! Four-stage ConvNeXt-style encoder run over window stacks.

use limm_tensor::{ConvParams, Graph, Tensor, Var};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::windowing::{grid_dims, pad_var, partition_var, FeatureStack, WindowLayout};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub depths: [usize; 4],
    pub dims: [usize; 4],
    /// Input window side in pixels.
    pub ws: usize,
    pub window_partition: bool,
    /// One shifted pass in the second block of the first stage.
    pub shift: bool,
    pub dw_kernel: usize,
    pub layer_scale_init: f64,
}

impl BackboneConfig {
    /// Desk-scale default.
    pub fn tiny_limm() -> Self {
        Self { depths: [2, 2, 4, 2], dims: [32, 64, 128, 256], ws: 64, window_partition: true, shift: true, dw_kernel: 7, layer_scale_init: 1e-6 }
    }

    /// Smallest preset, for tests and quick runs.
    pub fn tiny() -> Self {
        Self { depths: [1, 1, 2, 1], dims: [16, 32, 64, 128], shift: false, ..Self::tiny_limm() }
    }

    pub fn convnext_t() -> Self {
        Self { depths: [3, 3, 9, 3], dims: [96, 192, 384, 768], ws: 128, ..Self::tiny_limm() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny-limm" => Ok(Self::tiny_limm()),
            "tiny" => Ok(Self::tiny()),
            "convnext-t" => Ok(Self::convnext_t()),
            other => Err(invalid!("unknown backbone preset {other:?} (expected tiny-limm, tiny or convnext-t)")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ws == 0 || self.ws % 32 != 0 {
            return Err(invalid!("window size {} must be a positive multiple of 32", self.ws));
        }
        if self.dims[0] == 0 || self.dims.windows(2).any(|d| d[1] <= d[0]) {
            return Err(invalid!("stage widths {:?} must be positive and strictly increasing", self.dims));
        }
        if self.depths.iter().any(|&d| d == 0) {
            return Err(invalid!("every stage needs at least one block"));
        }
        if self.dw_kernel % 2 == 0 {
            return Err(invalid!("depthwise kernel must be odd"));
        }
        Ok(())
    }

    /// Whether the shifted pass actually runs.
    pub fn shift_active(&self) -> bool {
        self.shift && self.window_partition && self.depths[0] >= 2
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub pw1_w: ParamId,
    pub pw1_b: ParamId,
    pub pw2_w: ParamId,
    pub pw2_b: ParamId,
    pub scale: ParamId,
    pub kernel: usize,
}

impl BlockParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, prefix: &str, c: usize, kernel: usize, layer_scale: f64) -> Self {
        Self {
            dw_w: store.add(&format!("{prefix}.dw.w"), init.trunc_normal(&[c, 1, kernel, kernel], 0.02)),
            dw_b: store.add(&format!("{prefix}.dw.b"), Tensor::zeros(&[c])),
            ln_g: store.add(&format!("{prefix}.ln.g"), Tensor::ones(&[c])),
            ln_b: store.add(&format!("{prefix}.ln.b"), Tensor::zeros(&[c])),
            pw1_w: store.add(&format!("{prefix}.pw1.w"), init.trunc_normal(&[4 * c, c, 1, 1], 0.02)),
            pw1_b: store.add(&format!("{prefix}.pw1.b"), Tensor::zeros(&[4 * c])),
            pw2_w: store.add(&format!("{prefix}.pw2.w"), init.trunc_normal(&[c, 4 * c, 1, 1], 0.02)),
            pw2_b: store.add(&format!("{prefix}.pw2.b"), Tensor::zeros(&[c])),
            scale: store.add(&format!("{prefix}.scale"), Tensor::full(&[c], layer_scale)),
            kernel,
        }
    }
}

/// Depthwise conv, layer norm, pointwise expansion to 4C, GELU, pointwise
/// projection back to C, per-channel scale and residual add.
pub fn convnext_block(g: &mut Graph, p: &Bound, b: &BlockParams, x: Var) -> Result<Var> {
    let c = g.shape(p.get(b.dw_b))[0];
    match *g.shape(x) {
        [_, xc, h, w] if xc == c && h >= 1 && w >= 1 => {}
        ref s => return Err(invalid!("block expects [n, {c}, h, w], got {s:?}")),
    }
    let pad = b.kernel / 2;
    let y = g.conv2d(x, p.get(b.dw_w), Some(p.get(b.dw_b)), ConvParams::new(1, pad).groups(c))?;
    let y = g.layer_norm(y, p.get(b.ln_g), p.get(b.ln_b), 1, LN_EPS)?;
    let y = g.conv2d(y, p.get(b.pw1_w), Some(p.get(b.pw1_b)), ConvParams::default())?;
    let y = g.gelu(y)?;
    let y = g.conv2d(y, p.get(b.pw2_w), Some(p.get(b.pw2_b)), ConvParams::default())?;
    let y = g.channel_scale(y, p.get(b.scale))?;
    Ok(g.add(x, y)?)
}

#[derive(Debug, Clone)]
struct Downsample {
    ln_g: ParamId,
    ln_b: ParamId,
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Stage {
    down: Option<Downsample>,
    blocks: Vec<BlockParams>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    stem_w: ParamId,
    stem_b: ParamId,
    stem_ln_g: ParamId,
    stem_ln_b: ParamId,
    stages: Vec<Stage>,
}

/// Stage-3 and stage-4 features of one image.
#[derive(Debug, Clone, Copy)]
pub struct BackboneTaps {
    pub stage3: FeatureStack,
    pub stage4: FeatureStack,
    /// Window grid at input resolution (3 channels).
    pub input: WindowLayout,
    /// Unpadded input extent `(H, W)`.
    pub image_dims: (usize, usize),
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, store: &mut ParamStore, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        if cfg.shift && cfg.depths[0] < 2 {
            warn!("shifted pass needs two first-stage blocks; disabled for depths {:?}", cfg.depths);
        }
        let d = cfg.dims;
        let stem_w = store.add("backbone.stem.w", init.fan_in(&[d[0], 3, 4, 4], 3 * 16));
        let stem_b = store.add("backbone.stem.b", Tensor::zeros(&[d[0]]));
        let stem_ln_g = store.add("backbone.stem.ln.g", Tensor::ones(&[d[0]]));
        let stem_ln_b = store.add("backbone.stem.ln.b", Tensor::zeros(&[d[0]]));
        let mut stages = Vec::new();
        for s in 0..4 {
            let down = (s > 0).then(|| Downsample {
                ln_g: store.add(&format!("backbone.down{s}.ln.g"), Tensor::ones(&[d[s - 1]])),
                ln_b: store.add(&format!("backbone.down{s}.ln.b"), Tensor::zeros(&[d[s - 1]])),
                w: store.add(&format!("backbone.down{s}.w"), init.fan_in(&[d[s], d[s - 1], 2, 2], d[s - 1] * 4)),
                b: store.add(&format!("backbone.down{s}.b"), Tensor::zeros(&[d[s]])),
            });
            let blocks = (0..cfg.depths[s])
                .map(|i| BlockParams::new(store, init, &format!("backbone.s{s}.b{i}"), d[s], cfg.dw_kernel, cfg.layer_scale_init))
                .collect();
            stages.push(Stage { down, blocks });
        }
        Ok(Self { cfg, stem_w, stem_b, stem_ln_g, stem_ln_b, stages })
    }

    /// Window grid covering an `h x w` image.
    pub fn input_layout(&self, h: usize, w: usize) -> WindowLayout {
        let (rows, cols) = grid_dims(h, w, self.cfg.ws);
        WindowLayout { channels: 3, rows, cols, side: self.cfg.ws }
    }

    /// `image` is `[3, H, W]` or `[1, 3, H, W]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<BackboneTaps> {
        let (h, w) = match *g.shape(image) {
            [3, h, w] | [1, 3, h, w] => (h, w),
            ref s => return Err(invalid!("backbone expects a [3, H, W] image, got {s:?}")),
        };
        let ws = self.cfg.ws;
        if h < ws || w < ws {
            return Err(invalid!("image {h}x{w} is smaller than one {ws}x{ws} window"));
        }
        let layout = self.input_layout(h, w);
        let windowed = self.cfg.window_partition;
        let mut x = if windowed {
            partition_var(g, image, &layout)?
        } else {
            pad_var(g, image, layout.height(), layout.width())?
        };

        x = g.conv2d(x, p.get(self.stem_w), Some(p.get(self.stem_b)), ConvParams::new(4, 0))?;
        x = g.layer_norm(x, p.get(self.stem_ln_g), p.get(self.stem_ln_b), 1, LN_EPS)?;

        let mut taps = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some(d) = &stage.down {
                x = g.layer_norm(x, p.get(d.ln_g), p.get(d.ln_b), 1, LN_EPS)?;
                x = g.conv2d(x, p.get(d.w), Some(p.get(d.b)), ConvParams::new(2, 0))?;
            }
            for (i, block) in stage.blocks.iter().enumerate() {
                if s == 0 && i == 1 && self.cfg.shift_active() {
                    let fl = layout.downscaled(self.cfg.dims[0], 4)?;
                    let half = (fl.side / 2) as i64;
                    let (fwd, inv) = fl.shift_index(-half, -half);
                    let shape = fl.stack_shape();
                    x = g.gather(x, fwd, &shape)?;
                    x = convnext_block(g, p, block, x)?;
                    x = g.gather(x, inv, &shape)?;
                } else {
                    x = convnext_block(g, p, block, x)?;
                }
            }
            if s >= 2 {
                let fl = layout.downscaled(self.cfg.dims[s], 1 << (s + 2))?;
                taps.push(FeatureStack { var: x, layout: fl, windowed });
            }
        }
        Ok(BackboneTaps { stage3: taps[0], stage4: taps[1], input: layout, image_dims: (h, w) })
    }
}
