//! Browser demo. Three operations are exposed to the page: the distillation
//! ramp-up curve, a synthetic-sample viewer, and progressive CRM masking on a
//! small model trained in the tab.

use psd_core::data::{gen_synthetic, Dataset, Split, SyntheticSpec};
use psd_core::distill::{ramp_up, train_step, Batch, Objective, PsdObjective, Schedule};
use psd_core::masking::{progressive_chain, upsample_mask, MaskedImage};
use psd_core::optim::Sgd;
use psd_core::pgm::crm_levels;
use psd_core::trainer::evaluate;
use psd_core::{ModelBundle, ModelConfig, PsdError};
use wasm_bindgen::prelude::*;

const DEMO_TRAIN_PER_CLASS: usize = 30;
const DEMO_TEST_PER_CLASS: usize = 10;

fn msg(e: PsdError) -> String {
    e.to_string()
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

/// ω_d for epochs `0..epochs`.
#[wasm_bindgen]
pub fn ramp_curve(alpha: f64, beta: usize, epochs: usize) -> Vec<f64> {
    (0..epochs).map(|e| ramp_up(e, alpha, beta)).collect()
}

fn rgba_from_image(x: &MaskedImage) -> Vec<u8> {
    let n = x.h * x.w;
    let mut out = Vec::with_capacity(4 * n);
    for p in 0..n {
        for c in 0..3 {
            out.push((x.pixels[c * n + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

fn rgba_from_gray(levels: &[u8]) -> Vec<u8> {
    levels.iter().flat_map(|&l| [l, l, l, 255]).collect()
}

/// One generated image as RGBA bytes plus its planted regions as
/// `[top, left, height, width]` quadruples.
#[wasm_bindgen]
pub struct SampleView {
    rgba: Vec<u8>,
    regions: Vec<u32>,
    label: usize,
    size: usize,
}

#[wasm_bindgen]
impl SampleView {
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
    pub fn regions(&self) -> Vec<u32> {
        self.regions.clone()
    }
    pub fn label(&self) -> usize {
        self.label
    }
    pub fn size(&self) -> usize {
        self.size
    }
}

/// Renders the image of `class` from a one-image-per-class dataset.
#[wasm_bindgen]
pub fn sample_view(seed: u64, regions: usize, noise_std: f64, class: usize) -> Result<SampleView, JsError> {
    build_sample_view(seed, regions, noise_std, class).map_err(js)
}

pub fn build_sample_view(seed: u64, regions: usize, noise_std: f64, class: usize) -> Result<SampleView, String> {
    let spec = SyntheticSpec {
        regions_per_image: regions,
        noise_std,
        train_per_class: 1,
        test_per_class: 0,
        seed,
        ..SyntheticSpec::default()
    };
    let ds = gen_synthetic(&spec).map_err(msg)?;
    let s = ds
        .samples
        .iter()
        .find(|s| s.label == class)
        .ok_or_else(|| format!("class {class} out of range"))?;
    Ok(SampleView {
        rgba: rgba_from_image(&ds.image(s)),
        regions: s
            .regions
            .iter()
            .flat_map(|r| [r.top, r.left, r.height, r.width].map(|v| v as u32))
            .collect(),
        label: s.label,
        size: ds.image_size(),
    })
}

/// A small model trained epoch by epoch in the page.
#[wasm_bindgen]
pub struct Demo {
    ds: Dataset,
    bundle: ModelBundle,
    opt: Sgd,
    objective: Objective,
    epoch: usize,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<Demo, JsError> {
        Demo::create(seed).map_err(js)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One pass over the training split; returns
    /// `[mean L_g, train top1, test top1]`.
    pub fn train_epoch(&mut self) -> Result<Vec<f64>, JsError> {
        self.run_epoch().map_err(js)
    }

    pub fn test_count(&self) -> usize {
        self.ds.split(Split::Test).len()
    }

    /// Progressive masking of test image `index`: for each stage the RGBA
    /// frames of the stage input, its CRM and the selected mask, concatenated.
    pub fn chain_frames(&self, index: usize, m: usize, eta: f64) -> Result<Vec<u8>, JsError> {
        self.frames(index, m, eta).map_err(js)
    }
}

impl Demo {
    pub fn create(seed: u64) -> Result<Demo, String> {
        let spec = SyntheticSpec {
            train_per_class: DEMO_TRAIN_PER_CLASS,
            test_per_class: DEMO_TEST_PER_CLASS,
            seed,
            ..SyntheticSpec::default()
        };
        let ds = gen_synthetic(&spec).map_err(msg)?;
        let bundle = ModelBundle::init(&ModelConfig::default(), seed).map_err(msg)?;
        Ok(Demo {
            ds,
            bundle,
            opt: Sgd::new(0.02, 0.9, 1e-4),
            objective: Objective::Psd(PsdObjective::new(2, 0.05, Schedule::default())),
            epoch: 0,
        })
    }

    pub fn run_epoch(&mut self) -> Result<Vec<f64>, String> {
        let train: Vec<_> = self.ds.split(Split::Train);
        // fixed interleaving so every batch mixes classes
        let n = train.len();
        let order: Vec<usize> = (0..n).map(|i| (i * 37 + self.epoch * 11) % n).collect();
        let (mut l_g, mut correct) = (0.0, 0);
        for chunk in order.chunks(32) {
            let batch = Batch::new(
                chunk.iter().map(|&i| self.ds.image(train[i])).collect(),
                chunk.iter().map(|&i| train[i].label).collect(),
            )
            .map_err(msg)?;
            let out = train_step(&mut self.bundle, &batch, &mut self.opt, &self.objective, self.epoch).map_err(msg)?;
            l_g += out.losses.l_g * chunk.len() as f64;
            correct += out.correct;
        }
        self.epoch += 1;
        let test = self.ds.split(Split::Test);
        let acc = evaluate(&self.bundle, &test, self.ds.image_size()).map_err(msg)?;
        Ok(vec![l_g / n as f64, correct as f64 / n as f64, acc.top1])
    }

    pub fn frames(&self, index: usize, m: usize, eta: f64) -> Result<Vec<u8>, String> {
        let test = self.ds.split(Split::Test);
        let s = test.get(index).ok_or_else(|| format!("test index {index} out of range"))?;
        let size = self.ds.image_size();
        let chain = progressive_chain(&self.bundle, &self.ds.image(s), s.label, m, eta).map_err(msg)?;
        let mut out = Vec::new();
        for st in &chain {
            out.extend(rgba_from_image(&st.input));
            out.extend(rgba_from_gray(&crm_levels(&st.crm, size, size)));
            let mask = upsample_mask(&st.grid, size, size).map_err(msg)?;
            out.extend(mask.data.iter().flat_map(|&b| if b { [255, 64, 64, 255] } else { [0, 0, 0, 255] }));
        }
        Ok(out)
    }
}
