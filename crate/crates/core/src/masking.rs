//! Locating discriminative cells in a class response map and erasing them
//! from the image, stage after stage.

use serde::{Deserialize, Serialize};

use crate::error::{PsdError, Result};
use crate::model::{compute_crm, ModelBundle};
use crate::tensor::Tensor;

/// Per-class spatial response at feature resolution, row-major `H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMap {
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl ResponseMap {
    pub fn new(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || values.len() != h * w {
            return Err(PsdError::shape(format!(
                "response map {h}×{w} cannot hold {} values",
                values.len()
            )));
        }
        Ok(Self { h, w, values })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Binary location grid; `1` marks a discriminative cell to be removed.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskGrid {
    pub h: usize,
    pub w: usize,
    pub cells: Vec<u8>,
    pub eta: f64,
    pub source_class: Option<usize>,
}

impl MaskGrid {
    pub fn ones(&self) -> usize {
        self.cells.iter().filter(|&&c| c == 1).count()
    }
}

/// Number of cells selected for a top-`eta` fraction of `n` cells.
pub fn selection_count(eta: f64, n: usize) -> usize {
    // Tolerate representation error such as 0.1·30 = 3.0000000000000004.
    let raw = eta * n as f64;
    let k = (raw - raw.abs() * 1e-12).ceil() as usize;
    k.clamp(1, n)
}

/// Selects the `ceil(eta·H·W)` highest-response cells. Ties go to the lower
/// row-major index.
pub fn locate(map: &ResponseMap, eta: f64) -> Result<MaskGrid> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(PsdError::config("eta", format!("must lie in (0, 1], got {eta}")));
    }
    let n = map.values.len();
    let k = selection_count(eta, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| map.values[b].total_cmp(&map.values[a]).then(a.cmp(&b)));
    let mut cells = vec![0u8; n];
    for &i in &order[..k] {
        cells[i] = 1;
    }
    Ok(MaskGrid {
        h: map.h,
        w: map.w,
        cells,
        eta,
        source_class: None,
    })
}

/// Pixel-level boolean mask, row-major `h×w`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl PixelMask {
    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Nearest-neighbour block replication of a feature-resolution grid.
pub fn upsample_mask(grid: &MaskGrid, img_h: usize, img_w: usize) -> Result<PixelMask> {
    if grid.h == 0 || grid.w == 0 || img_h % grid.h != 0 || img_w % grid.w != 0 {
        return Err(PsdError::shape(format!(
            "image {img_h}×{img_w} is not a whole multiple of grid {}×{}",
            grid.h, grid.w
        )));
    }
    let (bh, bw) = (img_h / grid.h, img_w / grid.w);
    let data = (0..img_h * img_w)
        .map(|p| {
            let (y, x) = (p / img_w, p % img_w);
            grid.cells[(y / bh) * grid.w + x / bw] == 1
        })
        .collect();
    Ok(PixelMask {
        h: img_h,
        w: img_w,
        data,
    })
}

/// A `C×h×w` image together with the set of pixels erased by masking so far.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedImage {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f64>,
    /// Stage index along the progressive chain; 0 is the original image.
    pub stage: usize,
    pub zeroed: PixelMask,
}

impl MaskedImage {
    pub fn original(channels: usize, h: usize, w: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != channels * h * w {
            return Err(PsdError::shape(format!(
                "{channels}×{h}×{w} image cannot hold {} values",
                pixels.len()
            )));
        }
        Ok(Self {
            channels,
            h,
            w,
            pixels,
            stage: 0,
            zeroed: PixelMask::empty(h, w),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.channels, self.h, self.w], self.pixels.clone()).expect("consistent image")
    }
}

/// `x̄ = (1 − mask) ⊙ x` over every channel.
pub fn apply_mask(x: &MaskedImage, mask: &PixelMask) -> Result<MaskedImage> {
    apply_mask_filled(x, mask, &vec![0.0; x.channels])
}

/// Like [`apply_mask`] but writes `fill[c]` into channel `c` instead of zero.
pub fn apply_mask_filled(x: &MaskedImage, mask: &PixelMask, fill: &[f64]) -> Result<MaskedImage> {
    if mask.h != x.h || mask.w != x.w {
        return Err(PsdError::shape(format!(
            "mask {}×{} does not match image {}×{}",
            mask.h, mask.w, x.h, x.w
        )));
    }
    if fill.len() != x.channels {
        return Err(PsdError::shape("fill value needs one entry per channel"));
    }
    let plane = x.h * x.w;
    let mut out = x.clone();
    for (p, &m) in mask.data.iter().enumerate() {
        if m {
            for c in 0..x.channels {
                out.pixels[c * plane + p] = fill[c];
            }
            out.zeroed.data[p] = true;
        }
    }
    out.stage = x.stage + 1;
    Ok(out)
}

/// How masked pixels are filled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFill {
    #[default]
    Zero,
    /// Per-channel mean of the training images.
    Mean,
}

/// One step of the chain: CRM of class `label` from the tapped features of
/// `prev`, top-`eta` cells, block upsampling, erase.
pub fn next_stage(
    prev: &MaskedImage,
    s_tap: &[f64],
    feat_h: usize,
    feat_w: usize,
    theta: &Tensor,
    label: usize,
    eta: f64,
    fill: &[f64],
) -> Result<(MaskedImage, ResponseMap, MaskGrid)> {
    let crm = compute_crm(s_tap, feat_h, feat_w, theta, label)?;
    let mut grid = locate(&crm, eta)?;
    grid.source_class = Some(label);
    let mask = upsample_mask(&grid, prev.h, prev.w)?;
    let next = apply_mask_filled(prev, &mask, fill)?;
    Ok((next, crm, grid))
}

/// One stage of [`progressive_chain`]: the image fed in, its response map,
/// the selected cells and the resulting masked image.
#[derive(Clone, Debug)]
pub struct ChainStage {
    pub input: MaskedImage,
    pub s_tap: Tensor,
    pub crm: ResponseMap,
    pub grid: MaskGrid,
    pub output: MaskedImage,
}

/// Builds `x̄_1 … x̄_m` for a single image. Stage `i` masks `x̄_{i−1}` using
/// the CRM computed from `x̄_{i−1}` itself (`x̄_0 = x`).
pub fn progressive_chain(
    bundle: &ModelBundle,
    x: &MaskedImage,
    label: usize,
    m: usize,
    eta: f64,
) -> Result<Vec<ChainStage>> {
    if m == 0 {
        return Err(PsdError::config("m", "need at least one self-distillation"));
    }
    let fill = vec![0.0; x.channels];
    let mut stages = Vec::with_capacity(m);
    let mut current = x.clone();
    for _ in 0..m {
        let fwd = bundle.forward_all(&current.to_tensor())?;
        let sh = fwd.s_tap.shape().to_vec();
        let (next, crm, grid) = next_stage(
            &current,
            fwd.s_tap.data(),
            sh[2],
            sh[3],
            &bundle.crm.theta,
            label,
            eta,
            &fill,
        )?;
        stages.push(ChainStage {
            input: current,
            s_tap: fwd.s_tap,
            crm,
            grid,
            output: next.clone(),
        });
        current = next;
    }
    Ok(stages)
}
