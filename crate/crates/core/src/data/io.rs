use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use limm_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{CrowdScene, Regime};
use crate::error::{invalid, LimmError, Result};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    image: String,
    points: Vec<[f64; 2]>,
    sizes: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    regime: Option<Regime>,
    #[serde(default)]
    large: bool,
}

fn image_err(path: &Path, msg: impl ToString) -> LimmError {
    LimmError::Image { path: path.display().to_string(), msg: msg.to_string() }
}

/// Writes a `[3, H, W]` image in `[0, 1]` as 8-bit RGB.
pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let &[3, h, w] = image.shape() else {
        return Err(invalid!("write_png expects [3, H, W], got {:?}", image.shape()));
    };
    let mut bytes = Vec::with_capacity(3 * h * w);
    let d = image.data();
    for i in 0..h * w {
        for c in 0..3 {
            bytes.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let out = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(out, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))?;
    Ok(())
}

/// Reads any 8-bit PNG as a `[3, H, W]` image in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => LimmError::NotFound(path.display().to_string()),
        _ => e.into(),
    })?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| image_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| image_err(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(image_err(path, format!("unsupported colour type {other:?}"))),
    };
    let bytes = &buf[..info.buffer_size()];
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        let src = if channels < 3 { 0 } else { c };
        bytes[p * channels + src] as f64 / 255.0
    }))
}

/// 16-bit greyscale heatmap of a `[.., H, W]` map, scaled so its maximum is white.
pub fn write_heatmap_png(path: &Path, map: &Tensor) -> Result<()> {
    let s = map.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().product::<usize>() != 1 {
        return Err(invalid!("heatmap expects a single [H, W] plane, got {s:?}"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let max = map.data().iter().fold(0.0f64, |m, v| m.max(*v));
    let mut bytes = Vec::with_capacity(2 * h * w);
    for &v in map.data() {
        let q = if max > 0.0 { (v.max(0.0) / max * 65535.0).round() as u16 } else { 0 };
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    let out = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(out, w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))?;
    Ok(())
}

/// Writes `dir/annotations.jsonl` plus one PNG per scene.
pub fn save_dataset(dir: &Path, scenes: &[CrowdScene]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut ann = BufWriter::new(File::create(dir.join(ANNOTATIONS_FILE))?);
    for (i, scene) in scenes.iter().enumerate() {
        scene.validate()?;
        let name = format!("{i:05}.png");
        write_png(&dir.join(&name), &scene.image)?;
        let rec = Record {
            image: name,
            points: scene.points.clone(),
            sizes: scene.sizes.clone(),
            regime: scene.regime,
            large: scene.large,
        };
        serde_json::to_writer(&mut ann, &rec)?;
        ann.write_all(b"\n")?;
    }
    ann.flush()?;
    Ok(())
}

/// Loads every record of `dir/annotations.jsonl`; image paths are relative to `dir`.
pub fn load_dataset(dir: &Path) -> Result<Vec<CrowdScene>> {
    let path = dir.join(ANNOTATIONS_FILE);
    let file = File::open(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => LimmError::NotFound(path.display().to_string()),
        _ => e.into(),
    })?;
    let mut scenes = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| LimmError::Parse { source_name: path.display().to_string(), line: i + 1, msg };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let image = read_png(&dir.join(&rec.image))?;
        let mut scene = CrowdScene::new(image, rec.points, rec.sizes).map_err(|e| parse_err(e.to_string()))?;
        scene.regime = rec.regime;
        scene.large = rec.large;
        scenes.push(scene);
    }
    Ok(scenes)
}
