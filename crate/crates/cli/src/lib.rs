//! `psd` command line: dataset generation, training, evaluation, masked
//! robustness curves, ablation sweeps and CRM export.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use psd_core::data::{self, Split, SyntheticSpec};
use psd_core::trainer::{self, EpochRow, TrainConfig, TrainObserver, FIGURE_PCT_GRID};
use psd_core::{checkpoint, pgm, PsdError, Result};
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "psd", version, about = "Progressive self-distillation on synthetic multi-region images")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic dataset and write it in packed form.
    GenData {
        /// JSON file with generator settings; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (PSD_OUT takes precedence).
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long, default_value = "dataset.psdd")]
        name: String,
        /// key=value overrides applied after the config file.
        overrides: Vec<String>,
    },
    /// Train a model; writes metrics.csv, masked_curve.csv, run.json and model.psdm.
    Train {
        /// JSON training config or a previous run.json.
        #[arg(long)]
        config: Option<PathBuf>,
        overrides: Vec<String>,
    },
    /// Report top-1/top-5 accuracy and region recall of a checkpoint.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, default_value_t = 0.25)]
        q: f64,
    },
    /// Accuracy on randomly block-masked test images for a grid of percentages.
    MaskedCurve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = FIGURE_PCT_GRID)]
        pcts: Vec<f64>,
        #[arg(long, default_value_t = 8)]
        block: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the eight ablation configurations for every seed; writes ablation.csv.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        overrides: Vec<String>,
    },
    /// Write image / CRM / mask PGM triplets for the first samples of a split.
    ExportCrm {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        stages: usize,
        #[arg(long, default_value_t = 0.05)]
        eta: f64,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, default_value = "crm")]
        out: PathBuf,
    },
}

/// Settings types accepted by [`parse_config`].
pub trait Validate {
    fn validate(&self) -> Result<()>;
}

impl Validate for TrainConfig {
    fn validate(&self) -> Result<()> {
        TrainConfig::validate(self)
    }
}

impl Validate for SyntheticSpec {
    fn validate(&self) -> Result<()> {
        SyntheticSpec::validate(self)
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Pinpoints the key responsible for a deserialization failure by decoding
/// each key on its own (every field has a default).
fn offending_key<T: DeserializeOwned>(obj: &Map<String, Value>, err: &serde_json::Error) -> String {
    let msg = err.to_string();
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        return rest.split('`').next().unwrap_or("").to_string();
    }
    obj.iter()
        .find(|(k, v)| {
            let single = Value::Object(Map::from_iter([((*k).clone(), (*v).clone())]));
            serde_json::from_value::<T>(single).is_err()
        })
        .map(|(k, _)| k.clone())
        .unwrap_or_else(|| "<config>".into())
}

/// Reads a JSON object (a bare config or a `run.json` record), applies
/// `key=value` overrides and validates the result.
pub fn parse_config<T: DeserializeOwned + Validate>(path: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut obj = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| PsdError::config("--config", format!("cannot read {}: {e}", p.display())))?;
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(mut m)) => match (m.remove("config"), m.contains_key("code_version")) {
                    (Some(Value::Object(inner)), true) => inner,
                    (Some(other), _) => {
                        m.insert("config".into(), other);
                        m
                    }
                    (None, _) => m,
                },
                Ok(_) => return Err(PsdError::config("--config", "config file must hold a JSON object")),
                Err(e) => return Err(PsdError::config("--config", format!("{}: {e}", p.display()))),
            }
        }
        None => Map::new(),
    };
    for ov in overrides {
        let (k, v) = ov
            .split_once('=')
            .ok_or_else(|| PsdError::config(ov.as_str(), "overrides must look like key=value"))?;
        obj.insert(k.trim().to_string(), parse_value(v.trim()));
    }
    let cfg: T = serde_json::from_value(Value::Object(obj.clone()))
        .map_err(|e| PsdError::config(offending_key::<T>(&obj, &e), e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn exit_code(e: &PsdError) -> i32 {
    match e {
        PsdError::Config { .. } | PsdError::Generation(_) => EXIT_CONFIG,
        PsdError::Numeric { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn hint(e: &PsdError) -> &'static str {
    match e {
        PsdError::Config { .. } => "check the key against `psd <command> --help` and the documented ranges",
        PsdError::Generation(_) => "lower regions_per_image or patch_size, or enlarge image_size",
        PsdError::Numeric { .. } => "lower lr or check the dataset for non-finite pixels",
        PsdError::Format { .. } => "regenerate the file with `psd gen-data` or `psd train`",
        PsdError::Io(_) => "check that the path exists and is readable/writable",
        PsdError::Shape(_) => "the checkpoint and dataset disagree on image or class layout",
        _ => "inspect the inputs named above",
    }
}

fn out_dir(configured: &Path) -> PathBuf {
    std::env::var_os("PSD_OUT").map(PathBuf::from).unwrap_or_else(|| configured.to_path_buf())
}

struct Progress;

impl TrainObserver for Progress {
    fn epoch_done(&mut self, r: &EpochRow) {
        eprintln!(
            "epoch {:>3}  l_g {:.4}  l_l {:.4}  l_d {:.4}  omega_d {:.3}  train {:.3}  test {:.3}",
            r.epoch, r.l_g, r.l_l, r.l_d, r.omega_d, r.train_top1, r.test_top1
        );
    }
}

fn execute(cmd: Cmd, stdout: &mut dyn Write) -> Result<()> {
    match cmd {
        Cmd::GenData {
            config,
            out,
            name,
            overrides,
        } => {
            let spec: SyntheticSpec = parse_config(config.as_deref(), &overrides)?;
            let ds = data::gen_synthetic(&spec)?;
            let dir = out_dir(&out);
            std::fs::create_dir_all(&dir)?;
            let path = dir.join(name);
            data::save_packed(&ds, &path)?;
            writeln!(stdout, "wrote {} samples to {}", ds.samples.len(), path.display())?;
        }
        Cmd::Train { config, overrides } => {
            let mut cfg: TrainConfig = parse_config(config.as_deref(), &overrides)?;
            cfg.output_dir = out_dir(&cfg.output_dir);
            let ds = data::load_packed(&cfg.dataset)?;
            let (bundle, mut metrics) = trainer::train_observed(&cfg, &ds, &mut Progress)?;
            if !ds.split(Split::Test).is_empty() {
                metrics.masked_curve = trainer::masked_curve(&bundle, &ds, &FIGURE_PCT_GRID, cfg.mask_block, cfg.seed)?;
            }
            trainer::write_run(&cfg.output_dir, &cfg, &bundle, &metrics)?;
            std::fs::write(cfg.output_dir.join("masked_curve.csv"), trainer::curve_csv(&metrics.masked_curve))?;
            writeln!(
                stdout,
                "test top1 {:.4}  region recall {:.4}  -> {}",
                metrics.final_top1,
                metrics.region_recall,
                cfg.output_dir.display()
            )?;
        }
        Cmd::Eval { model, data, split, q } => {
            let bundle = checkpoint::load(&model)?;
            let ds = data::load_packed(&data)?;
            let samples = ds.split(split.into());
            let acc = trainer::evaluate(&bundle, &samples, ds.image_size())?;
            let recall = trainer::region_recall(&bundle, &samples, ds.image_size(), q)?;
            let report = serde_json::json!({
                "split": Split::from(split).as_str(),
                "samples": samples.len(),
                "top1": acc.top1,
                "top5": acc.top5,
                "region_recall": recall,
                "q": q,
            });
            writeln!(stdout, "{}", serde_json::to_string_pretty(&report)?)?;
        }
        Cmd::MaskedCurve {
            model,
            data,
            pcts,
            block,
            seed,
            out,
        } => {
            if block == 0 {
                return Err(PsdError::config("--block", "must be at least 1"));
            }
            let bundle = checkpoint::load(&model)?;
            let ds = data::load_packed(&data)?;
            let rows = trainer::masked_curve(&bundle, &ds, &pcts, block, seed)?;
            let csv = trainer::curve_csv(&rows);
            let dir = out_dir(&out);
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("masked_curve.csv"), &csv)?;
            write!(stdout, "{csv}")?;
        }
        Cmd::Ablate {
            config,
            seeds,
            overrides,
        } => {
            let mut cfg: TrainConfig = parse_config(config.as_deref(), &overrides)?;
            cfg.output_dir = out_dir(&cfg.output_dir);
            std::fs::create_dir_all(&cfg.output_dir)?;
            let ds = data::load_packed(&cfg.dataset)?;
            let path = cfg.output_dir.join("ablation.csv");
            let report = trainer::ablation_suite(&cfg, &ds, &seeds, Some(&path))?;
            for s in &report.summary {
                writeln!(
                    stdout,
                    "{:<16} top1 {:.4} ± {:.4}  recall {:.4} ± {:.4}",
                    s.config, s.top1_mean, s.top1_std, s.recall_mean, s.recall_std
                )?;
            }
            writeln!(stdout, "-> {}", path.display())?;
        }
        Cmd::ExportCrm {
            model,
            data,
            count,
            stages,
            eta,
            split,
            out,
        } => {
            if stages == 0 {
                return Err(PsdError::config("--stages", "must be at least 1"));
            }
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(PsdError::config("--eta", "must lie in (0, 1]"));
            }
            let bundle = checkpoint::load(&model)?;
            let ds = data::load_packed(&data)?;
            let samples: Vec<_> = ds.split(split.into()).into_iter().take(count).collect();
            if samples.len() < count {
                return Err(PsdError::Contract(format!(
                    "asked for {count} samples, split has {}",
                    samples.len()
                )));
            }
            let dir = out_dir(&out);
            let written = pgm::export_crm(&bundle, &ds, &samples, stages, eta, &dir)?;
            writeln!(stdout, "wrote {} files to {}", written.len(), dir.display())?;
        }
    }
    Ok(())
}

/// Entry point shared by the binary and tests. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.cmd, &mut std::io::stdout()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.origin());
            eprintln!("hint: {}", hint(&e));
            exit_code(&e)
        }
    }
}
