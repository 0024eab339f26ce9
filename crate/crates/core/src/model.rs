//! The assembled counting model and its checkpoint format.

use std::fs;
use std::path::Path;

use limm_tensor::{load_tensor, save_tensor, DType, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneTaps};
use crate::contrastive::ProjectionPair;
use crate::error::{invalid, LimmError, Result};
use crate::heads::{CountingHead, Gsa, GsaConfig};
use crate::params::{BindMode, Bound, Init, ParamStore};
use crate::windowing::{FeatureStack, WindowLayout};

/// Input pixels per density-map cell.
pub const DENSITY_STRIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub gsa: bool,
    pub gsa_heads: usize,
    pub contrastive: bool,
    pub proj_dim: usize,
    pub ema_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { backbone: BackboneConfig::tiny_limm(), gsa: true, gsa_heads: 8, contrastive: true, proj_dim: 64, ema_momentum: 0.99 }
    }
}

#[derive(Debug, Clone)]
pub struct LimmModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub gsa: Option<Gsa>,
    /// Local head on stage-4 features (concatenated with the GSA output).
    pub head1: CountingHead,
    /// Global head on the GSA output alone.
    pub head2: Option<CountingHead>,
    pub proj: Option<ProjectionPair>,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    pub taps: BackboneTaps,
    /// `[1, 1, ceil(H/8), ceil(W/8)]`.
    pub density: Var,
    pub global: Option<Var>,
    /// GSA weights `[heads, positions, nWin]`.
    pub attention: Option<Var>,
}

impl LimmModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.backbone.validate()?;
        if cfg.proj_dim == 0 {
            return Err(invalid!("projection width must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init(&mut rng);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(cfg.backbone.clone(), &mut store, &mut init)?;
        let c4 = cfg.backbone.dims[3];
        let gsa = if cfg.gsa { Some(Gsa::new(&mut store, &mut init, "gsa", GsaConfig { heads: cfg.gsa_heads, d_model: c4 })?) } else { None };
        let head1 = CountingHead::new(&mut store, &mut init, "head1", if cfg.gsa { 2 * c4 } else { c4 })?;
        let head2 = if cfg.gsa { Some(CountingHead::new(&mut store, &mut init, "head2", c4)?) } else { None };
        let proj = if cfg.contrastive {
            Some(ProjectionPair::new(&mut store, &mut init, "proj", cfg.backbone.dims[2], cfg.proj_dim, cfg.ema_momentum)?)
        } else {
            None
        };
        Ok(Self { cfg, store, backbone, gsa, head1, head2, proj })
    }

    pub fn bind(&self, g: &mut Graph, mode: BindMode) -> Bound {
        self.store.bind(g, mode)
    }

    /// Density maps for one `[3, H, W]` image. The global branch runs only
    /// when `with_global` is set and GSA is enabled.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var, with_global: bool) -> Result<ModelOutput> {
        let taps = self.backbone.forward(g, p, image)?;
        let s4 = taps.stage4;
        let (h1_in, gsa_out, attention) = match &self.gsa {
            Some(gsa) => {
                let windows = s4.to_windows(g)?;
                let out = gsa.forward(g, p, windows)?;
                let stacked = FeatureStack { var: out.out, layout: s4.layout, windowed: true };
                let gsa_feat = if s4.windowed { stacked } else { s4.with_var(stacked.to_map(g)?, s4.layout.channels) };
                let cat = g.concat(&[s4.var, gsa_feat.var], 1)?;
                (s4.with_var(cat, 2 * s4.layout.channels), Some(gsa_feat), Some(out.attention))
            }
            None => (s4, None, None),
        };
        let density = self.head_map(g, p, &self.head1, h1_in, taps.image_dims)?;
        let global = match (&self.head2, gsa_out) {
            (Some(head), Some(feat)) if with_global => Some(self.head_map(g, p, head, feat, taps.image_dims)?),
            _ => None,
        };
        Ok(ModelOutput { taps, density, global, attention })
    }

    fn head_map(&self, g: &mut Graph, p: &Bound, head: &CountingHead, x: FeatureStack, (h, w): (usize, usize)) -> Result<Var> {
        let tiles = head.forward(g, p, x.var)?;
        let out = FeatureStack { var: tiles, layout: WindowLayout { channels: 1, side: x.layout.side * 4, ..x.layout }, windowed: x.windowed };
        let map = out.to_map(g)?;
        let (hd, wd) = (h.div_ceil(DENSITY_STRIDE), w.div_ceil(DENSITY_STRIDE));
        let map = g.narrow(map, 2, 0, hd)?;
        Ok(g.narrow(map, 3, 0, wd)?)
    }

    /// Query and key embeddings `[S, C2]` of the chosen grid windows. Keys
    /// carry no gradient.
    pub fn project(&self, g: &mut Graph, p: &Bound, taps: &BackboneTaps, picks: &[usize]) -> Result<(Var, Var)> {
        let proj = self.proj.as_ref().ok_or_else(|| LimmError::InvalidState("model has no contrastive branch".into()))?;
        let sel = taps.stage3.select(g, picks)?;
        let vq = proj.q.forward(g, p, sel)?;
        let frozen = g.detach(sel);
        let vk = proj.k.forward(g, p, frozen)?;
        let vk = g.detach(vk);
        Ok((vq, vk))
    }

    /// Head-1 density `[ceil(H/8), ceil(W/8)]`.
    pub fn predict_density(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, BindMode::Frozen);
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, &p, x, false)?;
        let d = g.value(out.density).clone();
        let (h, w) = (d.shape()[2], d.shape()[3]);
        Ok(d.reshape(&[h, w])?)
    }

    pub fn predict_count(&self, image: &Tensor) -> Result<f64> {
        Ok(self.predict_density(image)?.sum())
    }

    /// Writes `manifest.json` plus one tensor blob per parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.store.len());
        for (id, param) in self.store.iter() {
            let file = format!("{:04}.tnsr", id.index());
            save_tensor(dir.join(&file), &param.value, DType::F64)?;
            entries.push(ManifestEntry { name: param.name.clone(), shape: param.value.shape().to_vec(), dtype: DType::F64.name().into(), file });
        }
        let manifest = Manifest { model: self.cfg.clone(), params: entries };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => LimmError::NotFound(format!("no checkpoint manifest at {}", path.display())),
            _ => e.into(),
        })?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut model = Self::new(manifest.model, 0)?;
        if manifest.params.len() != model.store.len() {
            return Err(invalid!("checkpoint holds {} parameters, model expects {}", manifest.params.len(), model.store.len()));
        }
        for e in &manifest.params {
            let (t, _) = load_tensor(dir.join(&e.file))?;
            if t.shape() != e.shape.as_slice() {
                return Err(invalid!("parameter {} blob shape {:?} disagrees with manifest {:?}", e.name, t.shape(), e.shape));
            }
            model.store.set(&e.name, t)?;
        }
        Ok(model)
    }
}

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    model: ModelConfig,
    params: Vec<ManifestEntry>,
}
