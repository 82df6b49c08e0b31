//! On-disk formats.
//!
//! Checkpoints (base and adapters) use the `MIVA1` container:
//!
//! ```text
//! "MIVA1" | u32 LE header length | UTF-8 JSON header | arrays
//! ```
//!
//! The JSON header carries `kind`, the model config, kind-specific metadata
//! and an `arrays` list of `{name, shape}` in storage order. Arrays follow
//! back to back as row-major little-endian `f32`.
//!
//! Videos use `MIVV`:
//!
//! ```text
//! "MIVV" | u32 LE F, H, W, C | F*C*H*W f32 LE (frame, channel, row, col)
//!        | u32 LE metadata length | UTF-8 JSON metadata
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::adapter::{Miva, MivaMeta};
use crate::error::{MivaError, Result};
use crate::model::{BaseModel, ModelConfig};
use crate::tensor::Mat;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MIVA1";
pub const VIDEO_MAGIC: &[u8; 4] = b"MIVV";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Header {
    Base {
        model: ModelConfig,
        pattern_names: Vec<String>,
        hash: String,
        config: BTreeMap<String, String>,
        arrays: Vec<ArrayEntry>,
    },
    Adapter {
        model: ModelConfig,
        meta: MivaMeta,
        arrays: Vec<ArrayEntry>,
    },
}

impl Header {
    fn arrays(&self) -> &[ArrayEntry] {
        match self {
            Header::Base { arrays, .. } | Header::Adapter { arrays, .. } => arrays,
        }
    }
}

fn entries(named: &[(String, &Mat)]) -> Vec<ArrayEntry> {
    named
        .iter()
        .map(|(n, m)| ArrayEntry {
            name: n.clone(),
            shape: [m.nrows(), m.ncols()],
        })
        .collect()
}

fn encode_checkpoint(header: &Header, named: &[(String, &Mat)]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let total: usize = named.iter().map(|(_, m)| m.len() * 4).sum();
    let mut out = Vec::with_capacity(9 + json.len() + total);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in named {
        for v in m.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(MivaError::Format(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(n * 4, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

fn decode_checkpoint(bytes: &[u8]) -> Result<(Header, HashMap<String, Mat>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(5, "magic")? != CHECKPOINT_MAGIC {
        return Err(MivaError::Format("not a MIVA1 checkpoint".into()));
    }
    let len = r.u32("header length")?;
    let header: Header = serde_json::from_slice(r.take(len, "header")?)?;
    let mut named = HashMap::new();
    for e in header.arrays() {
        let data = r.f32s(e.shape[0] * e.shape[1], &e.name)?;
        let m = Array2::from_shape_vec((e.shape[0], e.shape[1]), data)
            .map_err(|err| MivaError::Format(format!("array `{}`: {err}", e.name)))?;
        if named.insert(e.name.clone(), m).is_some() {
            return Err(MivaError::Format(format!("duplicate array `{}`", e.name)));
        }
    }
    if r.pos != bytes.len() {
        return Err(MivaError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((header, named))
}

pub fn base_to_bytes(base: &BaseModel, config: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let named = base.named_params();
    let header = Header::Base {
        model: base.config.clone(),
        pattern_names: base.pattern_names.clone(),
        hash: base.hash(),
        config: config.clone(),
        arrays: entries(&named),
    };
    encode_checkpoint(&header, &named)
}

/// Base model plus the config map it was saved with.
pub fn base_from_bytes(bytes: &[u8]) -> Result<(BaseModel, BTreeMap<String, String>)> {
    match decode_checkpoint(bytes)? {
        (
            Header::Base {
                model,
                pattern_names,
                hash,
                config,
                ..
            },
            named,
        ) => {
            let base = BaseModel::from_named(model, pattern_names, named)?;
            if base.hash() != hash {
                return Err(MivaError::Format("base checkpoint hash mismatch".into()));
            }
            Ok((base, config))
        }
        _ => Err(MivaError::Format(
            "checkpoint holds an adapter, not a base model".into(),
        )),
    }
}

pub fn adapter_to_bytes(miva: &Miva, model: &ModelConfig) -> Result<Vec<u8>> {
    let named = miva.named_params();
    let header = Header::Adapter {
        model: model.clone(),
        meta: miva.meta.clone(),
        arrays: entries(&named),
    };
    encode_checkpoint(&header, &named)
}

/// Adapter plus the model config it was built for.
pub fn adapter_from_bytes(bytes: &[u8]) -> Result<(Miva, ModelConfig)> {
    match decode_checkpoint(bytes)? {
        (Header::Adapter { model, meta, .. }, mut named) => {
            // Structure comes from a throwaway base of the recorded config.
            let skeleton = BaseModel::new(model.clone(), Vec::new(), 0)?;
            let mut miva = Miva::new(&skeleton, &meta.pattern, meta.masked, 0)?;
            for (name, slot) in miva.named_params_mut() {
                let value = named
                    .remove(&name)
                    .ok_or_else(|| MivaError::Format(format!("missing adapter array `{name}`")))?;
                if value.dim() != slot.dim() {
                    return Err(MivaError::Incompatible(format!(
                        "adapter array `{name}`: expected {:?}, found {:?}",
                        slot.dim(),
                        value.dim()
                    )));
                }
                *slot = value;
            }
            if let Some(extra) = named.keys().next() {
                return Err(MivaError::Format(format!("unexpected adapter array `{extra}`")));
            }
            miva.meta = meta;
            Ok((miva, model))
        }
        _ => Err(MivaError::Format(
            "checkpoint holds a base model, not an adapter".into(),
        )),
    }
}

pub fn save_base(path: &Path, base: &BaseModel, config: &BTreeMap<String, String>) -> Result<()> {
    fs::write(path, base_to_bytes(base, config)?)?;
    Ok(())
}

pub fn load_base(path: &Path) -> Result<(BaseModel, BTreeMap<String, String>)> {
    base_from_bytes(&fs::read(path)?)
}

pub fn save_adapter(path: &Path, miva: &Miva, model: &ModelConfig) -> Result<()> {
    fs::write(path, adapter_to_bytes(miva, model)?)?;
    Ok(())
}

pub fn load_adapter(path: &Path) -> Result<(Miva, ModelConfig)> {
    adapter_from_bytes(&fs::read(path)?)
}

/// `F x C x H x W` video with JSON metadata.
pub fn video_to_bytes(video: &Array4<f64>, metadata: &serde_json::Value) -> Result<Vec<u8>> {
    let (f, c, h, w) = video.dim();
    let json = serde_json::to_vec(metadata)?;
    let mut out = Vec::with_capacity(20 + video.len() * 4 + 4 + json.len());
    out.extend_from_slice(VIDEO_MAGIC);
    for v in [f, h, w, c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in video.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

pub fn video_from_bytes(bytes: &[u8]) -> Result<(Array4<f64>, serde_json::Value)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != VIDEO_MAGIC {
        return Err(MivaError::Format("not a MIVV video".into()));
    }
    let (f, h, w, c) = (r.u32("F")?, r.u32("H")?, r.u32("W")?, r.u32("C")?);
    let data = r.f32s(f * c * h * w, "frames")?;
    let video = Array4::from_shape_vec((f, c, h, w), data).map_err(|e| MivaError::Format(e.to_string()))?;
    let meta = if r.pos == bytes.len() {
        serde_json::Value::Null
    } else {
        let len = r.u32("metadata length")?;
        serde_json::from_slice(r.take(len, "metadata")?)?
    };
    if r.pos != bytes.len() {
        return Err(MivaError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((video, meta))
}

pub fn save_video(path: &Path, video: &Array4<f64>, metadata: &serde_json::Value) -> Result<()> {
    fs::write(path, video_to_bytes(video, metadata)?)?;
    Ok(())
}

pub fn load_video(path: &Path) -> Result<(Array4<f64>, serde_json::Value)> {
    video_from_bytes(&fs::read(path)?)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a `3 x H x W` (RGB) or `1 x H x W` (gray) image, values in `[0, 1]`.
pub fn write_png(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (c, h, w) = image.dim();
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => {
            return Err(MivaError::InvalidArgument(format!(
                "PNG export needs 1 or 3 channels, got {c}"
            )))
        }
    };
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| MivaError::Format(e.to_string()))?;
    let mut data = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data.push(to_u8(image[[ch, y, x]]));
            }
        }
    }
    writer
        .write_image_data(&data)
        .map_err(|e| MivaError::Format(e.to_string()))?;
    writer.finish().map_err(|e| MivaError::Format(e.to_string()))?;
    Ok(())
}

/// Read an 8-bit PNG as `C x H x W` in `[0, 1]`; alpha is dropped and gray
/// images stay single-channel.
pub fn read_png(path: &Path) -> Result<Array3<f64>> {
    let decoder = png::Decoder::new(std::io::BufReader::new(fs::File::open(path)?));
    let mut reader = decoder.read_info().map_err(|e| MivaError::Format(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| MivaError::Format("PNG too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| MivaError::Format(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(MivaError::Format("only 8-bit PNGs are supported".into()));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let (stride, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(MivaError::Format(format!("unsupported PNG color type {other:?}"))),
    };
    let line = info.line_size;
    Ok(Array3::from_shape_fn((keep, h, w), |(c, y, x)| {
        buf[y * line + x * stride + c] as f64 / 255.0
    }))
}

/// Write frames as `{stem}_{k:03}.png` into `dir`.
pub fn write_png_sequence(dir: &Path, stem: &str, frames: &Array4<f64>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (k, f) in frames.outer_iter().enumerate() {
        write_png(&dir.join(format!("{stem}_{k:03}.png")), &f.to_owned())?;
    }
    Ok(())
}

/// Read `{stem}_000.png, {stem}_001.png, ...` until the first gap.
pub fn read_png_sequence(dir: &Path, stem: &str) -> Result<Array4<f64>> {
    let mut frames = Vec::new();
    loop {
        let p = dir.join(format!("{stem}_{:03}.png", frames.len()));
        if !p.exists() {
            break;
        }
        frames.push(read_png(&p)?);
    }
    if frames.is_empty() {
        return Err(MivaError::Format(format!("no `{stem}_000.png` in {}", dir.display())));
    }
    crate::vae::stack(&frames)
}

/// `iteration,loss` lines with a header.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "iteration,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{i},{l}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Ranks;
    use crate::tensor::randn4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            frames: 3,
            image_size: 8,
            patch_size: 4,
            channels: 4,
            token_dim: 8,
            ffn_hidden: 16,
            time_dim: 8,
            time_hidden: 8,
            prompt_len: 2,
            blocks: 1,
            ranks: Ranks { cfa: 2, ca: 2, tsa: 2 },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn base_round_trip() {
        let mut base = BaseModel::new(tiny(), vec!["bounce".into()], 5).unwrap();
        base.round_to_f32();
        let mut cfg = BTreeMap::new();
        cfg.insert("seed".to_string(), "5".to_string());
        let bytes = base_to_bytes(&base, &cfg).unwrap();
        assert_eq!(&bytes[..5], b"MIVA1");
        let (back, c) = base_from_bytes(&bytes).unwrap();
        assert_eq!(back, base);
        assert_eq!(c, cfg);
        assert!(adapter_from_bytes(&bytes).is_err());
    }

    #[test]
    fn adapter_round_trip_and_corruption() {
        let base = BaseModel::new(tiny(), vec![], 1).unwrap();
        let mut m = Miva::new(&base, "translate_right", true, 3).unwrap();
        m.blocks[0].video.phi.w_phi[[0, 1]] = 0.25;
        m.meta.loss_curve = vec![0.5, 0.25];
        m.round_to_f32();
        let bytes = adapter_to_bytes(&m, &base.config).unwrap();
        let (back, model) = adapter_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(model, base.config);
        assert!(back.check_compatible(&base).is_ok());

        assert!(adapter_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(adapter_from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(adapter_from_bytes(&bad).is_err());
    }

    #[test]
    fn video_round_trip_layout() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut v = randn4(&mut r, (2, 3, 4, 5));
        crate::tensor::round_f32(&mut v);
        let meta = serde_json::json!({"seed": 2});
        let bytes = video_to_bytes(&v, &meta).unwrap();
        assert_eq!(&bytes[..4], b"MIVV");
        let dims: Vec<u32> = (0..4)
            .map(|i| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()))
            .collect();
        assert_eq!(dims, vec![2, 4, 5, 3]);
        let first = f32::from_le_bytes(bytes[20..24].try_into().unwrap());
        assert_eq!(first as f64, v[[0, 0, 0, 0]]);
        let (back, m) = video_from_bytes(&bytes).unwrap();
        assert_eq!(back, v);
        assert_eq!(m, meta);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array3::from_shape_fn((3, 4, 6), |(c, y, x)| ((c * 24 + y * 6 + x) as f64) / 255.0);
        let p = dir.path().join("a.png");
        write_png(&p, &img).unwrap();
        let back = read_png(&p).unwrap();
        assert!(crate::tensor::max_abs_diff(&back, &img) < 1e-12);

        let seq = Array4::from_shape_fn((3, 1, 2, 2), |(f, ..)| f as f64 / 2.0);
        write_png_sequence(dir.path(), "mask", &seq).unwrap();
        let back = read_png_sequence(dir.path(), "mask").unwrap();
        assert!(crate::tensor::max_abs_diff(&back, &seq) < 1.0 / 255.0);
        assert!(read_png_sequence(dir.path(), "none").is_err());
    }
}
