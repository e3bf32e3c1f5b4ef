//! Corpus persistence: one PNG per frame plus a JSONL sidecar.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusPair, Nuisance, SceneSpec};
use crate::attributes::{AttributeKind, AttributeSet};
use crate::error::{Error, Result};
use crate::grammar::{format_report, parse_report};
use crate::nn::Tensor;
use crate::scalar::Scalar;

pub const SIDECAR: &str = "corpus.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub path: String,
    pub report: String,
    pub morphology: String,
    pub color: String,
    pub pathology: String,
    pub location: String,
    pub seed: u64,
    pub nuisance: Nuisance,
}

/// Write a `[H, W, 3]` frame in `[-1, 1]` as an 8-bit RGB PNG.
pub fn write_png<S: Scalar>(path: &Path, image: &Tensor<S>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Shape(format!("png export expects [H, W, 3], got {s:?}")));
    }
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (((v.f64() + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), s[1] as u32, s[0] as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    w.write_image_data(&bytes).map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn read_png<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let dec = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = dec.read_info().map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!("{}: expected 8-bit RGB", path.display())));
    }
    let data = buf[..info.buffer_size()].iter().map(|&b| S::c(f64::from(b) / 255.0 * 2.0 - 1.0)).collect();
    Ok(Tensor::new(&[info.height as usize, info.width as usize, 3], data))
}

pub fn save_corpus<S: Scalar>(dir: &Path, pairs: &[CorpusPair<S>]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let mut side = BufWriter::new(File::create(dir.join(SIDECAR))?);
    for (i, p) in pairs.iter().enumerate() {
        let rel = format!("images/{i:06}.png");
        write_png(&dir.join(&rel), &p.image)?;
        let a = &p.attributes;
        let rec = CorpusRecord {
            path: rel,
            report: p.report.clone(),
            morphology: a.morphology.to_string(),
            color: a.color.to_string(),
            pathology: a.pathology.to_string(),
            location: a.location.to_string(),
            seed: p.spec.seed,
            nuisance: p.spec.nuisance,
        };
        serde_json::to_writer(&mut side, &rec).map_err(|e| Error::Format(e.to_string()))?;
        side.write_all(b"\n")?;
    }
    side.flush()?;
    Ok(())
}

/// Load a saved corpus. Images come back quantized to 8 bits; each record's
/// report must parse to its attribute fields.
pub fn load_corpus<S: Scalar>(dir: &Path) -> Result<Vec<CorpusPair<S>>> {
    let side = BufReader::new(File::open(dir.join(SIDECAR))?);
    let mut out = Vec::new();
    for (n, line) in side.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("{SIDECAR}:{}: {e}", n + 1)))?;
        let attributes: AttributeSet = parse_report(&rec.report)?;
        let fields = [&rec.morphology, &rec.color, &rec.pathology, &rec.location];
        let mismatch = fields.iter().zip(AttributeKind::ALL).any(|(f, kind)| f.as_str() != attributes.token(kind));
        if mismatch || format_report(&attributes) != rec.report
        {
            return Err(Error::Format(format!("{SIDECAR}:{}: report disagrees with attribute fields", n + 1)));
        }
        out.push(CorpusPair {
            image: read_png(&dir.join(&rec.path))?,
            report: rec.report,
            attributes,
            spec: SceneSpec { attributes, nuisance: rec.nuisance, seed: rec.seed },
        });
    }
    Ok(out)
}
