//! Receptive-field instruments: analytic TRF over layer specs, empirical ERF
//! by backpropagation to the input, and the image-masking sweep.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use limm_tensor::{Graph, Tensor, Var};
use log::warn;
use rand::Rng;

use crate::backbone::BackboneConfig;
use crate::data::CrowdScene;
use crate::error::{invalid, LimmError, Result};
use crate::model::{LimmModel, DENSITY_STRIDE};
use crate::params::BindMode;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerEntry {
    Conv { kernel: usize, stride: usize, dilation: usize },
    Pool { kernel: usize, stride: usize },
    Upsample { factor: usize },
    GlobalAttention,
    /// Caps the receptive field at this many input pixels from here on.
    Window { size: usize },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerSpec {
    pub entries: Vec<LayerEntry>,
}

impl LayerSpec {
    /// One entry per line: `conv k=7 s=1 d=1`, `pool k=2 s=2`, `upsample`
    /// (or `upsample f=2`), `attn global`, `window 128`. A trailing `xN`
    /// repeats the entry; `#` starts a comment.
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| LimmError::Parse { source_name: source_name.to_string(), line: i + 1, msg };
            let mut tokens: Vec<&str> = line.split_whitespace().collect();
            let mut repeat = 1;
            if let Some(last) = tokens.last().and_then(|t| t.strip_prefix('x')) {
                repeat = last.parse::<usize>().map_err(|_| err(format!("bad repeat count {last:?}")))?;
                if repeat == 0 {
                    return Err(err("repeat count must be positive".into()));
                }
                tokens.pop();
            }
            let entry = parse_entry(&tokens).map_err(err)?;
            entries.extend(std::iter::repeat_n(entry, repeat));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => LimmError::NotFound(path.display().to_string()),
            _ => e.into(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn concat(&self, other: &LayerSpec) -> LayerSpec {
        LayerSpec { entries: self.entries.iter().chain(&other.entries).copied().collect() }
    }

    /// Layer chain from the input to the stage-`last_stage` output of a
    /// backbone (0-based stage index). Only spatial layers are listed.
    pub fn for_backbone(cfg: &BackboneConfig, last_stage: usize) -> Self {
        let k = cfg.dw_kernel;
        let mut entries = Vec::new();
        if cfg.window_partition {
            entries.push(LayerEntry::Window { size: window_extent(cfg) });
        }
        entries.push(LayerEntry::Conv { kernel: 4, stride: 4, dilation: 1 });
        for s in 0..=last_stage.min(3) {
            if s > 0 {
                entries.push(LayerEntry::Conv { kernel: 2, stride: 2, dilation: 1 });
            }
            for _ in 0..cfg.depths[s] {
                entries.push(LayerEntry::Conv { kernel: k, stride: 1, dilation: 1 });
            }
        }
        Self { entries }
    }
}

/// Input extent one window's outputs can see. With the shifted pass, each
/// side gains the reach of the shifted block (at most half a window) plus
/// that of the block before it, both measured in stride-4 cells and confined
/// to the neighbouring window.
fn window_extent(cfg: &BackboneConfig) -> usize {
    if !cfg.shift_active() {
        return cfg.ws;
    }
    let (cells, r) = (cfg.ws / 4, (cfg.dw_kernel - 1) / 2);
    cfg.ws + 2 * 4 * (r.min(cells / 2) + r).min(cells)
}

impl FromStr for LayerSpec {
    type Err = LimmError;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s, "<spec>")
    }
}

fn parse_entry(tokens: &[&str]) -> std::result::Result<LayerEntry, String> {
    let (kind, args) = tokens.split_first().ok_or("empty entry")?;
    let mut kernel = None;
    let mut stride = None;
    let mut dilation = None;
    let mut factor = None;
    let mut bare = Vec::new();
    for a in args {
        match a.split_once('=') {
            Some((key, v)) => {
                let v: usize = v.parse().map_err(|_| format!("bad value in {a:?}"))?;
                if v == 0 {
                    return Err(format!("{key} must be positive"));
                }
                let slot = match key {
                    "k" => &mut kernel,
                    "s" => &mut stride,
                    "d" => &mut dilation,
                    "f" => &mut factor,
                    _ => return Err(format!("unknown key {key:?}")),
                };
                if slot.replace(v).is_some() {
                    return Err(format!("duplicate key {key:?}"));
                }
            }
            None => bare.push(*a),
        }
    }
    let no_bare = |bare: &[&str]| if bare.is_empty() { Ok(()) } else { Err(format!("unexpected token {:?}", bare[0])) };
    match *kind {
        "conv" => {
            no_bare(&bare)?;
            Ok(LayerEntry::Conv { kernel: kernel.ok_or("conv needs k=")?, stride: stride.unwrap_or(1), dilation: dilation.unwrap_or(1) })
        }
        "pool" => {
            no_bare(&bare)?;
            let kernel = kernel.ok_or("pool needs k=")?;
            Ok(LayerEntry::Pool { kernel, stride: stride.unwrap_or(kernel) })
        }
        "upsample" => {
            no_bare(&bare)?;
            Ok(LayerEntry::Upsample { factor: factor.unwrap_or(2) })
        }
        "attn" => match bare.as_slice() {
            ["global"] => Ok(LayerEntry::GlobalAttention),
            _ => Err("expected `attn global`".into()),
        },
        "window" => match bare.as_slice() {
            [n] => {
                let size: usize = n.parse().map_err(|_| format!("bad window size {n:?}"))?;
                if size == 0 {
                    return Err("window size must be positive".into());
                }
                Ok(LayerEntry::Window { size })
            }
            _ => Err("expected `window <size>`".into()),
        },
        other => Err(format!("unknown layer kind {other:?}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trf {
    Pixels(f64),
    Global,
}

impl fmt::Display for Trf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Trf::Pixels(r) if r.fract() == 0.0 => write!(f, "{r}"),
            Trf::Pixels(r) => write!(f, "{r:.3}"),
            Trf::Global => f.write_str("global"),
        }
    }
}

/// Running receptive-field size `r` and input-pixel jump `j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrfState {
    pub r: f64,
    pub j: f64,
    pub cap: Option<f64>,
    pub global: bool,
}

impl Default for TrfState {
    fn default() -> Self {
        Self { r: 1.0, j: 1.0, cap: None, global: false }
    }
}

impl TrfState {
    pub fn step(mut self, e: &LayerEntry) -> Self {
        match *e {
            LayerEntry::Conv { kernel, stride, dilation } => {
                self.r += ((kernel - 1) * dilation) as f64 * self.j;
                self.j *= stride as f64;
            }
            LayerEntry::Pool { kernel, stride } => {
                self.r += (kernel - 1) as f64 * self.j;
                self.j *= stride as f64;
            }
            LayerEntry::Upsample { factor } => self.j /= factor as f64,
            LayerEntry::GlobalAttention => self.global = true,
            LayerEntry::Window { size } => self.cap = Some(self.cap.map_or(size as f64, |c| c.min(size as f64))),
        }
        if let Some(c) = self.cap {
            self.r = self.r.min(c);
        }
        self
    }

    pub fn result(&self) -> Trf {
        if self.global {
            Trf::Global
        } else {
            Trf::Pixels(self.r)
        }
    }
}

/// Theoretical receptive field of the last entry's output, in input pixels.
pub fn trf_analytic(spec: &LayerSpec) -> Trf {
    spec.entries.iter().fold(TrfState::default(), |s, e| s.step(e)).result()
}

/// A network mapping a `[3, H, W]` image to a `[1, C, h, w]` feature map.
pub trait FeatureModel {
    fn features(&self, g: &mut Graph, image: Var) -> Result<Var>;
    /// Input pixels per feature cell.
    fn stride(&self) -> usize;
}

impl FeatureModel for LimmModel {
    fn features(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let p = self.bind(g, BindMode::Frozen);
        let taps = self.backbone.forward(g, &p, image)?;
        taps.stage4.to_map(g)
    }

    fn stride(&self) -> usize {
        32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErfResult {
    /// `[H, W]` channel-summed absolute input gradient.
    pub grad_map: Tensor,
    /// Feature-grid cell probed.
    pub center: (usize, usize),
    /// Input pixel whose gradient sets the threshold.
    pub center_pixel: (usize, usize),
    /// Square root of the number of ERF pixels.
    pub erf_size: f64,
    pub threshold: f64,
    pub degenerate: bool,
}

impl ErfResult {
    fn cutoff(&self) -> f64 {
        let w = self.grad_map.shape()[1];
        self.threshold * self.grad_map.data()[self.center_pixel.0 * w + self.center_pixel.1]
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        let w = self.grad_map.shape()[1];
        !self.degenerate && self.grad_map.data()[y * w + x] > self.cutoff()
    }

    /// Inclusive bounding box `(y0, x0, y1, x1)` of the ERF pixels.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let (h, w) = (self.grad_map.shape()[0], self.grad_map.shape()[1]);
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..h {
            for x in 0..w {
                if self.contains(y, x) {
                    b = Some(match b {
                        None => (y, x, y, x),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                    });
                }
            }
        }
        b
    }

    /// Largest side of the ERF bounding box.
    pub fn extent(&self) -> usize {
        self.bbox().map_or(0, |(y0, x0, y1, x1)| (y1 - y0 + 1).max(x1 - x0 + 1))
    }
}

/// Gradient of the strongest channel at feature cell `center` with respect
/// to every input pixel.
pub fn erf_map<M: FeatureModel + ?Sized>(model: &M, image: &Tensor, center: (usize, usize), threshold: f64) -> Result<ErfResult> {
    let &[3, h, w] = image.shape() else {
        return Err(invalid!("erf_map expects a [3, H, W] image, got {:?}", image.shape()));
    };
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(invalid!("ERF threshold must lie in (0, 1), got {threshold}"));
    }
    let mut g = Graph::new();
    let x = g.leaf(image.clone(), true);
    let f = model.features(&mut g, x)?;
    let &[1, c, fh, fw] = g.shape(f) else {
        return Err(invalid!("feature model returned {:?}", g.shape(f)));
    };
    let (cy, cx) = center;
    if cy >= fh || cx >= fw {
        return Err(invalid!("center {center:?} outside the {fh}x{fw} feature grid"));
    }
    let fv = g.value(f).data();
    let best = (0..c).max_by(|&a, &b| fv[(a * fh + cy) * fw + cx].total_cmp(&fv[(b * fh + cy) * fw + cx])).unwrap_or(0);
    let y = g.gather(f, vec![(best * fh + cy) * fw + cx].into(), &[1])?;
    let y = g.sum(y)?;
    let grads = g.backward(y)?;
    let gx = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(&[3, h, w]));
    let grad_map = Tensor::from_fn(&[h, w], |i| (0..3).map(|ch| gx.data()[ch * h * w + i].abs()).sum());

    let s = model.stride();
    let center_pixel = ((cy * s + s / 2).min(h - 1), (cx * s + s / 2).min(w - 1));
    let mut res = ErfResult { grad_map, center, center_pixel, erf_size: 0.0, threshold, degenerate: false };
    if res.cutoff() <= 0.0 {
        warn!("zero gradient at center pixel {center_pixel:?}; ERF is degenerate");
        res.degenerate = true;
        return Ok(res);
    }
    let cut = res.cutoff();
    let count = res.grad_map.data().iter().filter(|&&v| v > cut).count();
    res.erf_size = (count as f64).sqrt();
    Ok(res)
}

/// Mean ERF size over `samples_per_image` random feature cells per scene.
pub fn erf_protocol<M: FeatureModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    scenes: &[CrowdScene],
    samples_per_image: usize,
    threshold: f64,
    rng: &mut R,
) -> Result<f64> {
    if scenes.is_empty() || samples_per_image == 0 {
        return Err(invalid!("ERF protocol needs scenes and at least one sample per image"));
    }
    let mut total = 0.0;
    for scene in scenes {
        let (h, w) = scene.dims();
        let s = model.stride();
        let (fh, fw) = (h / s, w / s);
        if fh == 0 || fw == 0 {
            return Err(invalid!("scene {h}x{w} is smaller than one feature cell"));
        }
        for _ in 0..samples_per_image {
            let center = (rng.random_range(0..fh), rng.random_range(0..fw));
            total += erf_map(model, &scene.image, center, threshold)?.erf_size;
        }
    }
    Ok(total / (scenes.len() * samples_per_image) as f64)
}

/// Anything producing a `[h, w]` density map from a `[3, H, W]` image at
/// stride 8.
pub trait DensityModel {
    fn predict_density(&self, image: &Tensor) -> Result<Tensor>;
}

impl DensityModel for LimmModel {
    fn predict_density(&self, image: &Tensor) -> Result<Tensor> {
        LimmModel::predict_density(self, image)
    }
}

/// Pixel rectangle `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Region {
    /// Chebyshev distance from pixel `(y, x)` to the region.
    pub fn distance(&self, y: usize, x: usize) -> usize {
        let dy = if y < self.y0 { self.y0 - y } else { (y + 1).saturating_sub(self.y1) };
        let dx = if x < self.x0 { self.x0 - x } else { (x + 1).saturating_sub(self.x1) };
        dy.max(dx)
    }
}

/// Zeroes every pixel farther than `margin` from `region`.
pub fn mask_outside(image: &Tensor, region: Region, margin: usize) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let p = i % (h * w);
        if region.distance(p / w, p % w) > margin {
            *v = 0.0;
        }
    }
    out
}

/// Sum of density cells lying entirely inside `region`.
pub fn region_count(density: &Tensor, region: Region) -> f64 {
    let (dh, dw) = (density.shape()[0], density.shape()[1]);
    let s = DENSITY_STRIDE;
    let (cy0, cx0) = (region.y0.div_ceil(s), region.x0.div_ceil(s));
    let (cy1, cx1) = ((region.y1 / s).min(dh), (region.x1 / s).min(dw));
    let mut total = 0.0;
    for y in cy0..cy1 {
        for x in cx0..cx1 {
            total += density.data()[y * dw + x];
        }
    }
    total
}

/// `(margin, predicted count inside region)` for every margin.
pub fn mask_sweep<M: DensityModel + ?Sized>(model: &M, scene: &CrowdScene, region: Region, margins: &[usize]) -> Result<Vec<(usize, f64)>> {
    let (h, w) = scene.dims();
    if region.y0 >= region.y1 || region.x0 >= region.x1 || region.y1 > h || region.x1 > w {
        return Err(invalid!("region {region:?} is empty or outside the {h}x{w} image"));
    }
    margins
        .iter()
        .map(|&m| {
            let masked = mask_outside(&scene.image, region, m);
            Ok((m, region_count(&model.predict_density(&masked)?, region)))
        })
        .collect()
}
