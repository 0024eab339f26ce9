use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use limm_core::analysis::{erf_map, erf_protocol, mask_sweep as sweep, trf_analytic, LayerSpec, Region};
use limm_core::backbone::BackboneConfig;
use limm_core::contrastive::{compute_thresholds, DensityLevelThresholds};
use limm_core::data::{generate_benchmark, save_dataset, size_histogram, write_heatmap_png, Split};
use limm_core::model::LimmModel;
use limm_core::train::{embedding_rows, evaluate, train as run_training, TrainConfig};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::resolve;
use crate::{CheckpointArgs, ConfigArgs};

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => bail!("unknown split {other:?} (expected train, val or test)"),
    }
}

fn load_model(cfg: &TrainConfig, ckpt: &CheckpointArgs) -> Result<LimmModel> {
    let dir = ckpt.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("best"));
    LimmModel::load(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

pub fn gen_data(args: &ConfigArgs, out: &Path, data_seed: Option<u64>) -> Result<()> {
    let mut cfg = resolve(args)?;
    if let Some(s) = data_seed.or(args.seed) {
        cfg.data.synthetic.seed = s;
    }
    for split in [Split::Train, Split::Val, Split::Test] {
        let scenes = generate_benchmark(&cfg.data.synthetic, split)?;
        let dir = out.join(split.name());
        save_dataset(&dir, &scenes)?;
        let heads: usize = scenes.iter().map(|s| s.count()).sum();
        println!("{}: {} scenes, {heads} heads -> {}", split.name(), scenes.len(), dir.display());
    }
    Ok(())
}

pub fn thresholds(args: &ConfigArgs, out: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(args)?;
    let Some(path) = out.or_else(|| cfg.contrastive.thresholds.clone()) else {
        bail!("no output path: pass --out or set contrastive.thresholds");
    };
    let scenes = cfg.load_split(Split::Train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let th = compute_thresholds(&scenes, cfg.model.ws, cfg.contrastive.levels, cfg.contrastive.threshold_samples, &mut rng)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    th.save(&path)?;
    println!("quantiles {:?}", th.quantiles);
    println!("thresholds {:?} ({} levels, reachable {:?})", th.thresholds, th.n_levels, th.reachable);
    Ok(())
}

pub fn train(args: &ConfigArgs, out_dir: Option<PathBuf>, epochs: Option<usize>, thresholds: Option<PathBuf>) -> Result<()> {
    let mut cfg = resolve(args)?;
    if let Some(d) = out_dir {
        cfg.out_dir = d;
    }
    if let Some(e) = epochs {
        cfg.optim.epochs = e;
    }
    if thresholds.is_some() {
        cfg.contrastive.thresholds = thresholds;
    }
    cfg.validate()?;
    let th = cfg.load_thresholds()?;
    let train_set = cfg.load_split(Split::Train)?;
    let val = cfg.load_split(Split::Val)?;
    info!("training on {} scenes, validating on {}", train_set.len(), val.len());
    let out = run_training(&cfg, &train_set, &val, th, Some(&cfg.out_dir))?;
    println!("best val MAE {:.4} at epoch {}; checkpoints in {}", out.best_val_mae, out.best_epoch, cfg.out_dir.display());
    Ok(())
}

pub fn eval(args: &ConfigArgs, ckpt: &CheckpointArgs, split: &str, pairs: Option<PathBuf>, json: bool, untrained: bool) -> Result<()> {
    let cfg = resolve(args)?;
    let model = if untrained { LimmModel::new(cfg.model_config()?, cfg.seed)? } else { load_model(&cfg, ckpt)? };
    let scenes = cfg.load_split(parse_split(split)?)?;
    let report = evaluate(&model, &scenes)?;
    if let Some(path) = pairs {
        let mut csv = String::from("gt,pred\n");
        for (t, p) in &report.pairs {
            let _ = writeln!(csv, "{t},{p}");
        }
        fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    if json {
        println!("{}", serde_json::to_string(&report)?);
        return Ok(());
    }
    println!("scenes {}  MAE {:.4}  RMSE {:.4}", report.n, report.mae, report.rmse);
    for (name, r) in &report.per_regime {
        println!("  {name:<5} n={:<4} MAE {:.4}", r.n, r.mae);
    }
    if let Some(l) = report.large_mae {
        println!("  large-head scenes MAE {l:.4}");
    }
    Ok(())
}

pub fn erf(args: &ConfigArgs, ckpt: &CheckpointArgs, split: &str, n_scenes: usize, samples: usize, threshold: f64, heatmap: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(args)?;
    let model = load_model(&cfg, ckpt)?;
    let mut scenes = cfg.load_split(parse_split(split)?)?;
    scenes.truncate(n_scenes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mean = erf_protocol(&model, &scenes, samples, threshold, &mut rng)?;
    let trf = trf_analytic(&LayerSpec::for_backbone(&model.cfg.backbone, 3));
    println!("mean ERF {mean:.3} px over {} probes; TRF {trf}", scenes.len() * samples);
    if let (Some(path), Some(scene)) = (heatmap, scenes.first()) {
        let (h, w) = scene.dims();
        let center = (rng.random_range(0..h / 32), rng.random_range(0..w / 32));
        let res = erf_map(&model, &scene.image, center, threshold)?;
        write_heatmap_png(&path, &res.grad_map)?;
        println!("gradient map of cell {center:?} (extent {} px) -> {}", res.extent(), path.display());
    }
    Ok(())
}

pub fn trf(spec: Option<PathBuf>, backbone: Option<String>, ws: Option<usize>, no_window: bool, no_shift: bool) -> Result<()> {
    let spec = match (spec, backbone) {
        (Some(path), _) => LayerSpec::load(&path)?,
        (None, Some(name)) => {
            let mut cfg = BackboneConfig::preset(&name)?;
            cfg.ws = ws.unwrap_or(cfg.ws);
            cfg.window_partition = !no_window;
            cfg.shift &= !no_shift;
            cfg.validate()?;
            LayerSpec::for_backbone(&cfg, 3)
        }
        (None, None) => bail!("pass --spec <file> or --backbone <preset>"),
    };
    println!("{}", trf_analytic(&spec));
    Ok(())
}

fn parse_region(s: &str) -> Result<Region> {
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse()).collect::<std::result::Result<_, _>>().with_context(|| format!("region {s:?}"))?;
    let &[y0, x0, y1, x1] = v.as_slice() else {
        bail!("region {s:?} needs four values y0,x0,y1,x1");
    };
    Ok(Region { y0, x0, y1, x1 })
}

pub fn mask_sweep(args: &ConfigArgs, ckpt: &CheckpointArgs, split: &str, index: usize, region: Option<String>, margins: &[usize]) -> Result<()> {
    let cfg = resolve(args)?;
    let model = load_model(&cfg, ckpt)?;
    let scenes = cfg.load_split(parse_split(split)?)?;
    let Some(scene) = scenes.get(index) else {
        bail!("scene {index} out of range ({} scenes)", scenes.len());
    };
    let region = match region {
        Some(r) => parse_region(&r)?,
        None => {
            let (h, w) = scene.dims();
            let ws = model.cfg.backbone.ws;
            let (y0, x0) = ((h / 2) / ws * ws, (w / 2) / ws * ws);
            Region { y0, x0, y1: (y0 + ws).min(h), x1: (x0 + ws).min(w) }
        }
    };
    let inside = scene.points.iter().filter(|&&[x, y]| region.distance(y as usize, x as usize) == 0).count();
    println!("# region {},{},{},{}; {inside} annotated heads inside", region.y0, region.x0, region.y1, region.x1);
    println!("margin,count");
    for (m, c) in sweep(&model, scene, region, margins)? {
        println!("{m},{c}");
    }
    Ok(())
}

pub fn size_hist(args: &ConfigArgs, split: &str, bin_width: f64, bins: usize) -> Result<()> {
    let cfg = resolve(args)?;
    let scenes = cfg.load_split(parse_split(split)?)?;
    let hist = size_histogram(&scenes, bin_width, bins)?;
    print!("{}", hist.to_csv());
    if let (Some(mean), Some(frac)) = (hist.mean, hist.fraction_below_50) {
        eprintln!("{} heads, mean size {mean:.2} px, {:.1}% below 50 px", hist.total, 100.0 * frac);
    }
    Ok(())
}

pub fn export_embeddings(args: &ConfigArgs, ckpt: &CheckpointArgs, split: &str, samples: usize, out: &Path) -> Result<()> {
    let cfg = resolve(args)?;
    let model = load_model(&cfg, ckpt)?;
    if !model.cfg.contrastive {
        bail!("checkpoint has no projection heads (trained without the contrastive loss)");
    }
    let th: DensityLevelThresholds = cfg.load_thresholds()?.context("contrastive.enabled is false in the config")?;
    let scenes = cfg.load_split(parse_split(split)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let csv = embedding_rows(&model, &scenes, &th, samples, &mut rng)?;
    fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?;
    println!("{} embeddings -> {}", csv.lines().count() - 1, out.display());
    Ok(())
}
