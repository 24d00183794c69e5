//! Synthetic datasets with planted discriminative patches, packed dataset
//! files, and random block masking.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PsdError, Result};
use crate::masking::{apply_mask, MaskedImage, PixelMask};

pub const CHANNELS: usize = 3;
/// Signature textures owned by each class.
pub const BANK_SIZE: usize = 8;
pub const MAGIC: &[u8; 4] = b"PSDD";
pub const FORMAT_VERSION: u32 = 1;
const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub regions_per_image: usize,
    pub patch_size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise_std: f64,
    /// Half-width of the per-texel variation around a class's base colour.
    pub texture_amplitude: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            image_size: 32,
            regions_per_image: 6,
            patch_size: 6,
            train_per_class: 200,
            test_per_class: 50,
            noise_std: 0.3,
            texture_amplitude: 0.45,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Multi-region default with a single planted patch per image.
    pub fn single_region() -> Self {
        Self {
            regions_per_image: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(PsdError::config("num_classes", "need at least two classes"));
        }
        if self.image_size == 0 {
            return Err(PsdError::config("image_size", "must be positive"));
        }
        if self.patch_size == 0 || self.patch_size > self.image_size {
            return Err(PsdError::config("patch_size", "must lie in [1, image_size]"));
        }
        if self.regions_per_image == 0 {
            return Err(PsdError::config("regions_per_image", "need at least one region"));
        }
        if self.regions_per_image * self.patch_size * self.patch_size >= self.image_size * self.image_size {
            return Err(PsdError::config(
                "regions_per_image",
                "planted patches must cover less than the whole image",
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(PsdError::config("noise_std", "must be finite and non-negative"));
        }
        if !(0.0..=0.5).contains(&self.texture_amplitude) {
            return Err(PsdError::config("texture_amplitude", "must lie in [0, 0.5]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Planted patch rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn overlaps(&self, other: &Region) -> bool {
        self.top < other.top + other.height
            && other.top < self.top + self.height
            && self.left < other.left + other.width
            && other.left < self.left + self.width
    }

    /// Centre pixel (rounded towards the bottom-right for even sizes).
    pub fn center(&self) -> (usize, usize) {
        (self.top + self.height / 2, self.left + self.width / 2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub label: usize,
    pub split: Split,
    pub regions: Vec<Region>,
    /// `3×h×w`, values in `[0, 1]`.
    pub pixels: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub samples: Vec<Sample>,
    pub format_version: u32,
}

impl Dataset {
    pub fn image_size(&self) -> usize {
        self.spec.image_size
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn image(&self, s: &Sample) -> MaskedImage {
        let n = self.spec.image_size;
        MaskedImage::original(CHANNELS, n, n, s.pixels.clone()).expect("dataset image sized by spec")
    }

    /// Per-channel mean over the training images.
    pub fn channel_means(&self) -> Vec<f64> {
        let plane = self.spec.image_size * self.spec.image_size;
        let mut sums = vec![0.0; CHANNELS];
        let mut n = 0usize;
        for s in self.samples.iter().filter(|s| s.split == Split::Train) {
            for (c, sum) in sums.iter_mut().enumerate() {
                *sum += s.pixels[c * plane..(c + 1) * plane].iter().sum::<f64>();
            }
            n += plane;
        }
        sums.iter().map(|s| if n > 0 { s / n as f64 } else { 0.0 }).collect()
    }
}

/// SplitMix64 finaliser, used to derive independent per-item seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = (seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fixed RGB textures, `BANK_SIZE` per class, each `3×p×p`.
fn class_banks(spec: &SyntheticSpec) -> Vec<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, u64::MAX));
    let p = spec.patch_size;
    (0..spec.num_classes)
        .map(|_| {
            let base: [f64; CHANNELS] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
            (0..BANK_SIZE)
                .map(|_| {
                    let mut tex = Vec::with_capacity(CHANNELS * p * p);
                    for &b in &base {
                        for _ in 0..p * p {
                            let v = b + spec.texture_amplitude * rng.random_range(-1.0..1.0);
                            tex.push(v.clamp(0.0, 1.0));
                        }
                    }
                    tex
                })
                .collect()
        })
        .collect()
}

fn render_sample(
    spec: &SyntheticSpec,
    banks: &[Vec<Vec<f64>>],
    id: usize,
    label: usize,
    split: Split,
) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, id as u64));
    let (n, p) = (spec.image_size, spec.patch_size);
    let plane = n * n;
    let mut pixels = if spec.noise_std > 0.0 {
        let noise = Normal::new(0.5, spec.noise_std).expect("validated std");
        (0..CHANNELS * plane).map(|_| noise.sample(&mut rng).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.5; CHANNELS * plane]
    };

    let mut regions: Vec<Region> = Vec::with_capacity(spec.regions_per_image);
    for _ in 0..spec.regions_per_image {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let r = Region {
                top: rng.random_range(0..=n - p),
                left: rng.random_range(0..=n - p),
                height: p,
                width: p,
            };
            if regions.iter().all(|o| !o.overlaps(&r)) {
                placed = Some(r);
                break;
            }
        }
        let r = placed.ok_or_else(|| {
            PsdError::Generation(format!(
                "could not place {} non-overlapping {p}×{p} patches in a {n}×{n} image after {PLACEMENT_ATTEMPTS} attempts",
                spec.regions_per_image
            ))
        })?;
        let tex = &banks[label][rng.random_range(0..BANK_SIZE)];
        for c in 0..CHANNELS {
            for dy in 0..p {
                for dx in 0..p {
                    pixels[c * plane + (r.top + dy) * n + r.left + dx] = tex[(c * p + dy) * p + dx];
                }
            }
        }
        regions.push(r);
    }
    Ok(Sample {
        id,
        label,
        split,
        regions,
        pixels,
    })
}

/// Generates the dataset described by `spec`; a pure function of the spec.
/// Train samples come first, then test, each ordered class-major.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let banks = class_banks(spec);
    let mut samples = Vec::new();
    for (split, per_class) in [(Split::Train, spec.train_per_class), (Split::Test, spec.test_per_class)] {
        for label in 0..spec.num_classes {
            for _ in 0..per_class {
                let id = samples.len();
                samples.push(render_sample(spec, &banks, id, label, split)?);
            }
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        samples,
        format_version: FORMAT_VERSION,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    spec: SyntheticSpec,
    samples: Vec<SampleRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: usize,
    label: usize,
    split: Split,
    regions: Vec<Region>,
}

/// Packed layout: `"PSDD"`, `u32` version, `u64` manifest length, JSON
/// manifest, then every sample's `f64` pixels (little-endian) in manifest
/// order.
pub fn encode_packed(ds: &Dataset) -> Result<Vec<u8>> {
    let manifest = Manifest {
        format_version: ds.format_version,
        spec: ds.spec.clone(),
        samples: ds
            .samples
            .iter()
            .map(|s| SampleRecord {
                id: s.id,
                label: s.label,
                split: s.split,
                regions: s.regions.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let per = CHANNELS * ds.spec.image_size * ds.spec.image_size;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * per * ds.samples.len());
    out.extend(MAGIC);
    out.extend(FORMAT_VERSION.to_le_bytes());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(&json);
    for s in &ds.samples {
        if s.pixels.len() != per {
            return Err(PsdError::shape(format!("sample {} has {} pixels, expected {per}", s.id, s.pixels.len())));
        }
        for v in &s.pixels {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_packed(buf: &[u8]) -> Result<Dataset> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(PsdError::format(0, "bad magic, expected \"PSDD\""));
    }
    if buf.len() < 8 {
        return Err(PsdError::format(4, "truncated before version"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(PsdError::format(4, format!("unsupported dataset version {version}")));
    }
    if buf.len() < 16 {
        return Err(PsdError::format(8, "truncated before manifest length"));
    }
    let len = u64::from_le_bytes(buf[8..16].try_into().unwrap());
    let end = 16u64
        .checked_add(len)
        .filter(|&e| e <= buf.len() as u64)
        .ok_or_else(|| PsdError::format(16, format!("manifest of {len} bytes runs past end of file")))?
        as usize;
    let manifest: Manifest =
        serde_json::from_slice(&buf[16..end]).map_err(|e| PsdError::format(16, format!("bad manifest: {e}")))?;
    manifest
        .spec
        .validate()
        .map_err(|e| PsdError::format(16, format!("manifest spec: {e}")))?;
    let per = CHANNELS * manifest.spec.image_size * manifest.spec.image_size;
    let mut offset = end;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for rec in manifest.samples {
        let bytes = per * 8;
        if buf.len() - offset < bytes {
            return Err(PsdError::format(
                offset as u64,
                format!("pixel payload of sample {} truncated", rec.id),
            ));
        }
        let pixels = buf[offset..offset + bytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += bytes;
        samples.push(Sample {
            id: rec.id,
            label: rec.label,
            split: rec.split,
            regions: rec.regions,
            pixels,
        });
    }
    if offset != buf.len() {
        return Err(PsdError::format(offset as u64, "trailing bytes after pixel payload"));
    }
    Ok(Dataset {
        spec: manifest.spec,
        samples,
        format_version: manifest.format_version,
    })
}

pub fn save_packed(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_packed(ds)?)?;
    Ok(())
}

pub fn load_packed(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_packed(&std::fs::read(path)?)
}

/// Zeroes `block×block` squares on the block grid, visiting cells in a seeded
/// random order, until at least `pct` of the pixels are zero-masked.
pub fn random_mask_augment(x: &MaskedImage, pct: f64, block: usize, seed: u64) -> MaskedImage {
    let pct = pct.clamp(0.0, 1.0);
    let block = block.max(1);
    let (gh, gw) = (x.h.div_ceil(block), x.w.div_ceil(block));
    let mut cells: Vec<usize> = (0..gh * gw).collect();
    cells.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let target = pct * (x.h * x.w) as f64;
    let mut mask = PixelMask::empty(x.h, x.w);
    let mut zeroed = 0usize;
    for cell in cells {
        if zeroed as f64 >= target {
            break;
        }
        let (cy, cx) = (cell / gw, cell % gw);
        for y in cy * block..((cy + 1) * block).min(x.h) {
            for xx in cx * block..((cx + 1) * block).min(x.w) {
                mask.data[y * x.w + xx] = true;
                zeroed += 1;
            }
        }
    }
    let mut out = apply_mask(x, &mask).expect("mask built at image size");
    out.stage = x.stage;
    out
}

/// Test split with every image randomly block-masked at `pct`; deterministic
/// per `(sample id, seed)`.
pub fn build_masked_testset(ds: &Dataset, pct: f64, block: usize, seed: u64) -> Result<Dataset> {
    let test = ds.split(Split::Test);
    if test.is_empty() {
        return Err(PsdError::Contract("dataset has no test split".into()));
    }
    let samples = test
        .into_iter()
        .map(|s| {
            let masked = random_mask_augment(&ds.image(s), pct, block, mix_seed(seed, s.id as u64));
            Sample {
                pixels: masked.pixels,
                ..s.clone()
            }
        })
        .collect();
    Ok(Dataset {
        spec: ds.spec.clone(),
        samples,
        format_version: ds.format_version,
    })
}
