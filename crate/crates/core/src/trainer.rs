//! Training and evaluation orchestration: baseline and self-distillation runs,
//! ablation variants, accuracy, region recall and masked-robustness curves.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, build_masked_testset, mix_seed, random_mask_augment, Dataset, Sample, Split};
use crate::distill::{self, Batch, Objective, PsdObjective, Schedule};
use crate::error::{PsdError, Result};
use crate::masking::{locate, upsample_mask, MaskFill, ResponseMap};
use crate::model::{compute_crm, ModelBundle, ModelConfig};
use crate::optim::Sgd;
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Psd,
    PsdSbs,
    PsdHeadshared,
    BaselineDa,
}

impl Mode {
    pub fn is_psd(&self) -> bool {
        matches!(self, Mode::Psd | Mode::PsdSbs | Mode::PsdHeadshared)
    }
}

/// Per-epoch learning-rate multiplier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` at epoch 0 towards 0 at the last epoch.
    #[default]
    Cosine,
    /// Divide by 10 after every third of training.
    Step,
}

impl LrSchedule {
    pub fn factor(&self, epoch: usize, epochs: usize) -> f64 {
        let frac = epoch as f64 / epochs.max(1) as f64;
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
            LrSchedule::Step => 0.1f64.powi((3.0 * frac).floor() as i32),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub m: usize,
    pub eta: f64,
    pub alpha: f64,
    pub beta: usize,
    pub omega_l: f64,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub tap_index: usize,
    pub widths: Vec<usize>,
    pub mask_fill: MaskFill,
    /// Fraction of pixels masked per image in `baseline_da` mode.
    pub da_pct: f64,
    /// Block size of random masks (augmentation and masked test sets).
    pub mask_block: usize,
    pub region_q: f64,
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Psd,
            m: 2,
            eta: 0.05,
            alpha: 1.0,
            beta: 5,
            omega_l: 1.0,
            lr: 0.02,
            lr_schedule: LrSchedule::Cosine,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            tap_index: 3,
            widths: vec![16, 32, 64, 64],
            mask_fill: MaskFill::Zero,
            da_pct: 0.05,
            mask_block: 8,
            region_q: 0.25,
            dataset: PathBuf::from("data/dataset.psdd"),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn check(ok: bool, key: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(PsdError::config(key, msg))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.eta > 0.0 && self.eta <= 1.0, "eta", "must lie in (0, 1]")?;
        check(!self.mode.is_psd() || self.m >= 1, "m", "self-distillation modes need m ≥ 1")?;
        check(self.alpha >= 0.0 && self.alpha.is_finite(), "alpha", "must be finite and ≥ 0")?;
        check(self.omega_l >= 0.0 && self.omega_l.is_finite(), "omega_l", "must be finite and ≥ 0")?;
        check(self.lr >= 0.0 && self.lr.is_finite(), "lr", "must be finite and ≥ 0")?;
        check((0.0..1.0).contains(&self.momentum), "momentum", "must lie in [0, 1)")?;
        check(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            "weight_decay",
            "must be finite and ≥ 0",
        )?;
        check(self.batch_size >= 1, "batch_size", "must be at least 1")?;
        check((0.0..=1.0).contains(&self.da_pct), "da_pct", "must lie in [0, 1]")?;
        check(self.mask_block >= 1, "mask_block", "must be at least 1")?;
        check(self.region_q > 0.0 && self.region_q <= 1.0, "region_q", "must lie in (0, 1]")?;
        check(!self.widths.is_empty() && !self.widths.contains(&0), "widths", "need positive widths")?;
        check(
            self.tap_index >= 1 && self.tap_index <= self.widths.len(),
            "tap_index",
            "must index one of the embedding blocks (1-based)",
        )?;
        Ok(())
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            widths: self.widths.clone(),
            num_classes,
            tap_index: self.tap_index,
            share_heads: self.mode == Mode::PsdHeadshared,
        }
    }

    pub fn objective(&self, ds: &Dataset) -> Objective {
        match self.mode {
            Mode::Baseline | Mode::BaselineDa => Objective::CrossEntropy { omega_l: self.omega_l },
            Mode::Psd | Mode::PsdSbs | Mode::PsdHeadshared => {
                let mut obj = PsdObjective::new(
                    self.m,
                    self.eta,
                    Schedule {
                        alpha: self.alpha,
                        beta: self.beta,
                        omega_l: self.omega_l,
                    },
                );
                if self.mask_fill == MaskFill::Mean {
                    obj.fill = ds.channel_means();
                }
                if self.mode == Mode::PsdSbs {
                    obj.step_by_step = Some(self.epochs);
                }
                Objective::Psd(obj)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub l_g: f64,
    pub l_l: f64,
    pub l_d: f64,
    pub omega_d: f64,
    pub train_top1: f64,
    pub test_top1: f64,
    pub test_top5: Option<f64>,
    pub wall_time: f64,
}

impl EpochRow {
    /// Row contents without the wall-clock column.
    pub fn deterministic_part(&self) -> (usize, [u64; 6], Option<u64>) {
        (
            self.epoch,
            [self.l_g, self.l_l, self.l_d, self.omega_d, self.train_top1, self.test_top1].map(f64::to_bits),
            self.test_top5.map(f64::to_bits),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub pct: f64,
    pub top1: f64,
    pub top5: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub rows: Vec<EpochRow>,
    pub final_top1: f64,
    pub final_top5: Option<f64>,
    pub region_recall: f64,
    pub masked_curve: Vec<CurveRow>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Accuracy {
    pub top1: f64,
    /// Present only when there are at least five classes.
    pub top5: Option<f64>,
}

/// Optional hooks into the training loop.
pub trait TrainObserver {
    fn epoch_done(&mut self, _row: &EpochRow) {}
    fn step_done(&mut self, _epoch: usize, _batch: usize, _outcome: &distill::StepOutcome) {}
}

impl TrainObserver for () {}

/// Loads the configured dataset and trains on it.
pub fn train(config: &TrainConfig) -> Result<(ModelBundle, RunMetrics)> {
    config.validate()?;
    let ds = data::load_packed(&config.dataset)?;
    train_on(config, &ds)
}

pub fn train_on(config: &TrainConfig, ds: &Dataset) -> Result<(ModelBundle, RunMetrics)> {
    train_observed(config, ds, &mut ())
}

pub fn train_observed(
    config: &TrainConfig,
    ds: &Dataset,
    observer: &mut dyn TrainObserver,
) -> Result<(ModelBundle, RunMetrics)> {
    config.validate()?;
    let train_set = ds.split(Split::Train);
    let test_set = ds.split(Split::Test);
    if train_set.is_empty() && config.epochs > 0 {
        return Err(PsdError::Contract("dataset has no training samples".into()));
    }
    let mut bundle = ModelBundle::init(&config.model_config(ds.spec.num_classes), config.seed)?;
    let objective = config.objective(ds);
    let mut opt = Sgd::new(config.lr, config.momentum, config.weight_decay);
    let mut metrics = RunMetrics::default();
    let started = Clock::start();

    for epoch in 0..config.epochs {
        opt.lr = config.lr * config.lr_schedule.factor(epoch, config.epochs);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64)));

        let (mut l_g, mut l_l, mut l_d, mut omega_d) = (0.0, 0.0, 0.0, 0.0);
        let (mut correct, mut seen) = (0usize, 0usize);
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let images = chunk
                .iter()
                .map(|&i| {
                    let s = train_set[i];
                    let im = ds.image(s);
                    if config.mode == Mode::BaselineDa {
                        let seed = mix_seed(mix_seed(config.seed, epoch as u64), s.id as u64);
                        random_mask_augment(&im, config.da_pct, config.mask_block, seed)
                    } else {
                        im
                    }
                })
                .collect();
            let labels = chunk.iter().map(|&i| train_set[i].label).collect();
            let batch = Batch::new(images, labels)?;
            let out = distill::train_step(&mut bundle, &batch, &mut opt, &objective, epoch).map_err(|e| match e {
                PsdError::Numeric { message, .. } => PsdError::Numeric {
                    epoch,
                    batch: bi,
                    message,
                },
                other => other,
            })?;
            let n = batch.len() as f64;
            l_g += out.losses.l_g * n;
            l_l += mean(&out.losses.l_l) * n;
            l_d += mean(&out.losses.l_d) * n;
            omega_d = out.losses.omega_d;
            correct += out.correct;
            seen += batch.len();
            observer.step_done(epoch, bi, &out);
        }
        let acc = evaluate(&bundle, &test_set, ds.image_size())?;
        let seen_f = seen.max(1) as f64;
        let row = EpochRow {
            epoch,
            l_g: l_g / seen_f,
            l_l: l_l / seen_f,
            l_d: l_d / seen_f,
            omega_d,
            train_top1: correct as f64 / seen_f,
            test_top1: acc.top1,
            test_top5: acc.top5,
            wall_time: started.elapsed(),
        };
        observer.epoch_done(&row);
        metrics.rows.push(row);
    }

    if !test_set.is_empty() {
        let acc = evaluate(&bundle, &test_set, ds.image_size())?;
        metrics.final_top1 = acc.top1;
        metrics.final_top5 = acc.top5;
        metrics.region_recall = region_recall(&bundle, &test_set, ds.image_size(), config.region_q)?;
    }
    Ok((bundle, metrics))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Wall-clock seconds since start; zero where no clock is available.
struct Clock(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Clock {
    fn start() -> Self {
        Clock(
            #[cfg(not(target_arch = "wasm32"))]
            std::time::Instant::now(),
        )
    }

    fn elapsed(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.0.elapsed().as_secs_f64()
        }
        #[cfg(target_arch = "wasm32")]
        {
            0.0
        }
    }
}

fn sample_tensor(samples: &[&Sample], image_size: usize) -> Tensor {
    let mut data = Vec::with_capacity(samples.len() * data::CHANNELS * image_size * image_size);
    for s in samples {
        data.extend_from_slice(&s.pixels);
    }
    Tensor::new(&[samples.len(), data::CHANNELS, image_size, image_size], data).expect("uniform samples")
}

/// Fraction of rows whose label ranks within the top `k` logits. Ranking
/// breaks ties towards the lower class index.
pub fn top_k_hits(logits: &[f64], labels: &[usize], k: usize) -> Result<usize> {
    let c = logits.len() / labels.len().max(1);
    if k > c {
        return Err(PsdError::config("top_k", format!("top-{k} needs at least {k} classes, have {c}")));
    }
    Ok(logits
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| {
            let rank = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > row[y] || (v == row[y] && j < y))
                .count();
            rank < k
        })
        .count())
}

/// Teacher-only top-1/top-5 accuracy.
pub fn evaluate(bundle: &ModelBundle, samples: &[&Sample], image_size: usize) -> Result<Accuracy> {
    if samples.is_empty() {
        return Err(PsdError::Contract("cannot evaluate on an empty split".into()));
    }
    let net = bundle.inference();
    let c = bundle.num_classes();
    let (mut h1, mut h5) = (0, 0);
    for chunk in samples.chunks(EVAL_BATCH) {
        let logits = net.logits(&sample_tensor(chunk, image_size))?;
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        h1 += top_k_hits(logits.data(), &labels, 1)?;
        if c >= 5 {
            h5 += top_k_hits(logits.data(), &labels, 5)?;
        }
    }
    let n = samples.len() as f64;
    Ok(Accuracy {
        top1: h1 as f64 / n,
        top5: (c >= 5).then(|| h5 as f64 / n),
    })
}

/// Top-5 accuracy; a config error when the model has fewer than 5 classes.
pub fn evaluate_top5(bundle: &ModelBundle, samples: &[&Sample], image_size: usize) -> Result<f64> {
    if bundle.num_classes() < 5 {
        return Err(PsdError::config(
            "top5",
            format!("top-5 needs at least 5 classes, model has {}", bundle.num_classes()),
        ));
    }
    Ok(evaluate(bundle, samples, image_size)?.top5.expect("C ≥ 5"))
}

/// True-class response maps of `samples` under `bundle`.
pub fn response_maps(bundle: &ModelBundle, samples: &[&Sample], image_size: usize) -> Result<Vec<ResponseMap>> {
    let mut maps = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let fwd = bundle.forward_all(&sample_tensor(chunk, image_size))?;
        let sh = fwd.s_tap.shape();
        let per = sh[1] * sh[2] * sh[3];
        for (b, s) in chunk.iter().enumerate() {
            let taps = &fwd.s_tap.data()[b * per..(b + 1) * per];
            maps.push(compute_crm(taps, sh[2], sh[3], &bundle.crm.theta, s.label)?);
        }
    }
    Ok(maps)
}

/// Mean over all planted regions of whether the region's centre pixel falls in
/// the upsampled top-`q` cell set of the matching map.
pub fn recall_from_maps(samples: &[&Sample], maps: &[ResponseMap], image_size: usize, q: f64) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(PsdError::config("region_q", "must lie in (0, 1]"));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (s, map) in samples.iter().zip(maps) {
        if s.regions.is_empty() {
            return Err(PsdError::Contract(format!("sample {} has no region metadata", s.id)));
        }
        let mask = upsample_mask(&locate(map, q)?, image_size, image_size)?;
        for r in &s.regions {
            let (y, x) = r.center();
            total += 1;
            if mask.data[y * image_size + x] {
                hit += 1;
            }
        }
    }
    if total == 0 {
        return Err(PsdError::Contract("no planted regions to score".into()));
    }
    Ok(hit as f64 / total as f64)
}

pub fn region_recall(bundle: &ModelBundle, samples: &[&Sample], image_size: usize, q: f64) -> Result<f64> {
    let maps = response_maps(bundle, samples, image_size)?;
    recall_from_maps(samples, &maps, image_size, q)
}

/// Accuracy on the randomly block-masked test set for every `pct`.
pub fn masked_curve(bundle: &ModelBundle, ds: &Dataset, pct_grid: &[f64], block: usize, seed: u64) -> Result<Vec<CurveRow>> {
    pct_grid
        .iter()
        .map(|&pct| {
            if !(0.0..=1.0).contains(&pct) {
                return Err(PsdError::config("pct", format!("{pct} outside [0, 1]")));
            }
            let masked = build_masked_testset(ds, pct, block, seed)?;
            let refs: Vec<&Sample> = masked.samples.iter().collect();
            let acc = evaluate(bundle, &refs, ds.image_size())?;
            Ok(CurveRow {
                pct,
                top1: acc.top1,
                top5: acc.top5,
            })
        })
        .collect()
}

pub const FIGURE_PCT_GRID: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub seed: u64,
    pub top1: f64,
    pub top5: Option<f64>,
    pub region_recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub config: String,
    pub top1_mean: f64,
    pub top1_std: f64,
    pub top5_mean: Option<f64>,
    pub top5_std: Option<f64>,
    pub recall_mean: f64,
    pub recall_std: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
}

/// The eight ablation cells: baseline, m ∈ {1,2,3}, step-by-step,
/// head-shared, and random-mask augmentation at 5% and 10%.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let with = |name: &str, f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        (name.to_string(), c)
    };
    vec![
        with("baseline", &|c| c.mode = Mode::Baseline),
        with("psd_m1", &|c| {
            c.mode = Mode::Psd;
            c.m = 1
        }),
        with("psd_m2", &|c| {
            c.mode = Mode::Psd;
            c.m = 2
        }),
        with("psd_m3", &|c| {
            c.mode = Mode::Psd;
            c.m = 3
        }),
        with("psd_sbs", &|c| c.mode = Mode::PsdSbs),
        with("psd_headshared", &|c| c.mode = Mode::PsdHeadshared),
        with("baseline_da_5", &|c| {
            c.mode = Mode::BaselineDa;
            c.da_pct = 0.05
        }),
        with("baseline_da_10", &|c| {
            c.mode = Mode::BaselineDa;
            c.da_pct = 0.10
        }),
    ]
}

pub const ABLATION_HEADER: &str = "config,seed,top1,top5,region_recall";

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = mean(v);
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Runs every ablation cell for every seed. When `csv` is given, each run's
/// row is appended as soon as it finishes and the mean/std rows at the end.
pub fn ablation_suite(base: &TrainConfig, ds: &Dataset, seeds: &[u64], csv: Option<&Path>) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(PsdError::config("seeds", "need at least one seed"));
    }
    let mut file = match csv {
        Some(p) => {
            let mut f = std::fs::File::create(p)?;
            writeln!(f, "{ABLATION_HEADER}")?;
            Some(f)
        }
        None => None,
    };
    let mut report = AblationReport::default();
    let cells = ablation_configs(base);
    for (name, cfg) in &cells {
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let (_, m) = train_on(&cfg, ds)?;
            let row = AblationRow {
                config: name.clone(),
                seed,
                top1: m.final_top1,
                top5: m.final_top5,
                region_recall: m.region_recall,
            };
            if let Some(f) = file.as_mut() {
                writeln!(f, "{},{},{},{},{}", row.config, row.seed, row.top1, opt_cell(row.top5), row.region_recall)?;
                f.flush()?;
            }
            report.rows.push(row);
        }
    }
    for (name, _) in &cells {
        let rows: Vec<&AblationRow> = report.rows.iter().filter(|r| &r.config == name).collect();
        let (t1m, t1s) = mean_std(&rows.iter().map(|r| r.top1).collect::<Vec<_>>());
        let t5: Option<Vec<f64>> = rows.iter().map(|r| r.top5).collect();
        let t5 = t5.map(|v| mean_std(&v));
        let (rm, rs) = mean_std(&rows.iter().map(|r| r.region_recall).collect::<Vec<_>>());
        let s = AblationSummary {
            config: name.clone(),
            top1_mean: t1m,
            top1_std: t1s,
            top5_mean: t5.map(|x| x.0),
            top5_std: t5.map(|x| x.1),
            recall_mean: rm,
            recall_std: rs,
        };
        if let Some(f) = file.as_mut() {
            writeln!(f, "{},mean,{},{},{}", s.config, s.top1_mean, opt_cell(s.top5_mean), s.recall_mean)?;
            writeln!(f, "{},std,{},{},{}", s.config, s.top1_std, opt_cell(s.top5_std), s.recall_std)?;
        }
        report.summary.push(s);
    }
    Ok(report)
}

pub const METRICS_HEADER: &str = "epoch,l_g,l_l,l_d,omega_d,train_top1,test_top1,test_top5,wall_time";

pub fn metrics_csv(metrics: &RunMetrics) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in &metrics.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{:.3}",
            r.epoch,
            r.l_g,
            r.l_l,
            r.l_d,
            r.omega_d,
            r.train_top1,
            r.test_top1,
            opt_cell(r.test_top5),
            r.wall_time
        );
    }
    s
}

pub const CURVE_HEADER: &str = "pct,top1,top5";

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.pct, r.top1, opt_cell(r.top5));
    }
    s
}

#[derive(Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub metrics: RunMetrics,
    pub code_version: String,
}

/// Writes `metrics.csv`, `run.json` and `model.psdm` under the output dir.
pub fn write_run(dir: &Path, config: &TrainConfig, bundle: &ModelBundle, metrics: &RunMetrics) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(metrics))?;
    let record = RunRecord {
        config: config.clone(),
        metrics: metrics.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    crate::checkpoint::save(bundle, dir.join("model.psdm"))?;
    Ok(())
}
