//! Binary PGM (P5) export of images, response maps and masks.

use std::path::{Path, PathBuf};

use crate::data::{Dataset, Sample};
use crate::error::{PsdError, Result};
use crate::masking::{progressive_chain, upsample_mask, MaskedImage, ResponseMap};
use crate::model::ModelBundle;

/// 8-bit grayscale P5 bytes for a `w × h` image given row-major levels.
pub fn encode_p5(w: usize, h: usize, levels: &[u8]) -> Vec<u8> {
    assert_eq!(levels.len(), w * h);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(levels);
    out
}

/// Parses a P5 file written by [`encode_p5`]; returns (w, h, levels).
pub fn decode_p5(buf: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(PsdError::format(pos as u64, "truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&buf[start..pos]).unwrap_or("").to_string());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(PsdError::format(0, "not an 8-bit P5 image"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| PsdError::format(0, format!("bad dimension `{s}`")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let data = buf.get(pos..pos + w * h).ok_or_else(|| PsdError::format(pos as u64, "truncated pixel data"))?;
    Ok((w, h, data.to_vec()))
}

fn to_level(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Channel-mean grayscale of an image in [0, 1].
pub fn image_levels(x: &MaskedImage) -> Vec<u8> {
    let n = x.h * x.w;
    (0..n)
        .map(|p| to_level((0..x.channels).map(|c| x.pixels[c * n + p]).sum::<f64>() / x.channels as f64))
        .collect()
}

/// Min-max normalised response map, block-upsampled to `h × w`. A constant map
/// renders as mid-gray.
pub fn crm_levels(map: &ResponseMap, h: usize, w: usize) -> Vec<u8> {
    let v = map.values();
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (bh, bw) = (h / map.height(), w / map.width());
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let c = v[(y / bh) * map.width() + x / bw];
            out[y * w + x] = if hi > lo { to_level((c - lo) / (hi - lo)) } else { 128 };
        }
    }
    out
}

pub fn export_name(split: &str, sample_id: usize, stage: usize, kind: &str) -> String {
    format!("{split}_{sample_id}_stage{stage}_{kind}.pgm")
}

/// Writes image/crm/mask triplets for the first `count` samples, one per
/// progressive stage. Returns the written paths.
pub fn export_crm(
    bundle: &ModelBundle,
    ds: &Dataset,
    samples: &[&Sample],
    stages: usize,
    eta: f64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let size = ds.image_size();
    let mut written = Vec::new();
    for s in samples {
        let chain = progressive_chain(bundle, &ds.image(s), s.label, stages, eta)?;
        for (i, st) in chain.iter().enumerate() {
            let mask = upsample_mask(&st.grid, size, size)?;
            let mask_levels: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
            let parts = [
                ("image", image_levels(&st.input)),
                ("crm", crm_levels(&st.crm, size, size)),
                ("mask", mask_levels),
            ];
            for (kind, levels) in parts {
                let path = out_dir.join(export_name(s.split.as_str(), s.id, i + 1, kind));
                std::fs::write(&path, encode_p5(size, size, &levels))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
