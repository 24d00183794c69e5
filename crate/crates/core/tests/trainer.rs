mod common;

use psd_core::data::{Sample, Split};
use psd_core::masking::ResponseMap;
use psd_core::trainer::{
    ablation_suite, evaluate, evaluate_top5, masked_curve, metrics_csv, recall_from_maps, region_recall, top_k_hits,
    train_on, write_run, Mode, RunRecord, TrainConfig, ABLATION_HEADER, FIGURE_PCT_GRID, METRICS_HEADER,
};
use psd_core::{ModelBundle, ModelConfig, PsdError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quick(mode: Mode, epochs: usize) -> TrainConfig {
    TrainConfig {
        mode,
        epochs,
        batch_size: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn evaluation_reads_only_embedding_and_teacher() {
    let ds = common::small_dataset(1, 5, 2);
    let test = ds.split(Split::Test);
    let mut bundle = ModelBundle::init(&ModelConfig::default(), 4).unwrap();
    let clean = evaluate(&bundle, &test, 32).unwrap();
    let student = bundle.student.as_mut().unwrap();
    for t in [&mut student.weight, &mut student.bias, &mut bundle.crm.theta] {
        t.data_mut().iter_mut().for_each(|v| *v = f64::NAN);
    }
    assert_eq!(evaluate(&bundle, &test, 32).unwrap(), clean);
    bundle.teacher.bias.data_mut()[0] = f64::NAN;
    assert_ne!(evaluate(&bundle, &test, 32).unwrap(), clean);
}

#[test]
fn accuracy_examples() {
    let ds = common::small_dataset(1, 10, 3);
    let test = ds.split(Split::Test);
    let mut bundle = ModelBundle::init(&ModelConfig::default(), 1).unwrap();
    bundle.teacher.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let acc = evaluate(&bundle, &test, 32).unwrap();
    assert!((acc.top1 - 0.1).abs() < 1e-12);
    assert!((acc.top5.unwrap() - 0.5).abs() < 0.05);

    let labels = [3usize, 7, 0];
    let mut logits = vec![0.0; 30];
    for (i, &y) in labels.iter().enumerate() {
        logits[i * 10 + y] = 50.0;
    }
    assert_eq!(top_k_hits(&logits, &labels, 1).unwrap(), 3);
    assert_eq!(top_k_hits(&logits, &labels, 5).unwrap(), 3);

    let few = ModelBundle::init(&ModelConfig { num_classes: 3, ..ModelConfig::default() }, 0).unwrap();
    let spec = psd_core::data::SyntheticSpec { num_classes: 3, ..common::small_spec(1, 2, 0) };
    let ds3 = psd_core::data::gen_synthetic(&spec).unwrap();
    let t3 = ds3.split(Split::Test);
    assert!(evaluate(&few, &t3, 32).unwrap().top5.is_none());
    assert!(matches!(evaluate_top5(&few, &t3, 32), Err(PsdError::Config { .. })));
}

#[test]
fn recall_properties() {
    let ds = common::small_dataset(1, 30, 9);
    let test = ds.split(Split::Test);
    let bundle = ModelBundle::init(&ModelConfig::default(), 2).unwrap();
    assert_eq!(region_recall(&bundle, &test, 32, 1.0).unwrap(), 1.0);
    let qs = [0.0625, 0.125, 0.25, 0.5, 0.75, 1.0];
    let r: Vec<f64> = qs.iter().map(|&q| region_recall(&bundle, &test, 32, q).unwrap()).collect();
    assert!(r.windows(2).all(|w| w[0] <= w[1]), "{r:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let maps: Vec<ResponseMap> = test
        .iter()
        .map(|_| ResponseMap::new(4, 4, (0..16).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
        .collect();
    let regions: usize = test.iter().map(|s| s.regions.len()).sum();
    assert!(regions >= 1000);
    let uniform = recall_from_maps(&test, &maps, 32, 0.25).unwrap();
    assert!((uniform - 0.25).abs() < 0.05, "{uniform}");

    let mut bare: Sample = test[0].clone();
    bare.regions.clear();
    assert!(matches!(region_recall(&bundle, &[&bare], 32, 0.25), Err(PsdError::Contract(_))));
    assert!(matches!(region_recall(&bundle, &test, 32, 0.0), Err(PsdError::Config { .. })));
}

#[test]
fn untrained_model_is_at_chance() {
    let ds = common::small_dataset(2, 20, 1);
    let (_, m) = train_on(&quick(Mode::Psd, 0), &ds).unwrap();
    assert!(m.rows.is_empty());
    assert!((m.final_top1 - 0.1).abs() <= 0.05, "{}", m.final_top1);
}

#[test]
fn nan_loss_aborts_with_location() {
    let mut ds = common::small_dataset(4, 1, 1);
    ds.samples[5].pixels[100] = f64::NAN;
    let cfg = quick(Mode::Psd, 3);
    match train_on(&cfg, &ds) {
        Err(PsdError::Numeric { epoch, batch, .. }) => assert!(epoch == 0 && batch < 3, "{epoch} {batch}"),
        other => panic!("expected numeric failure, got {:?}", other.map(|r| r.1.rows.len())),
    }
}

#[test]
fn runs_are_deterministic_and_well_formed() {
    let ds = common::small_dataset(6, 3, 7);
    for mode in [Mode::Baseline, Mode::Psd, Mode::PsdSbs, Mode::PsdHeadshared, Mode::BaselineDa] {
        let cfg = quick(mode, 2);
        let (ba, a) = train_on(&cfg, &ds).unwrap();
        let (bb, b) = train_on(&cfg, &ds).unwrap();
        assert_eq!(ba, bb, "{mode:?}");
        let strip = |m: &psd_core::trainer::RunMetrics| m.rows.iter().map(|r| r.deterministic_part()).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert!(a.rows.windows(2).all(|w| w[0].epoch < w[1].epoch));
        for r in &a.rows {
            for v in [r.train_top1, r.test_top1, r.test_top5.unwrap()] {
                assert!((0.0..=1.0).contains(&v));
            }
            assert!(r.test_top1 <= r.test_top5.unwrap());
        }
    }
}

#[test]
fn degenerate_psd_matches_baseline() {
    let ds = common::small_dataset(6, 3, 11);
    let base = quick(Mode::Baseline, 3);
    let psd = TrainConfig { mode: Mode::Psd, alpha: 0.0, omega_l: 0.0, ..base.clone() };
    let base = TrainConfig { omega_l: 0.0, ..base };
    let (mb, a) = train_on(&base, &ds).unwrap();
    let (mp, b) = train_on(&psd, &ds).unwrap();
    assert_eq!(mb, mp);
    let key = |m: &psd_core::trainer::RunMetrics| {
        m.rows.iter().map(|r| (r.epoch, r.l_g.to_bits(), r.omega_d.to_bits(), r.train_top1.to_bits(), r.test_top1.to_bits(), r.test_top5.map(f64::to_bits))).collect::<Vec<_>>()
    };
    assert_eq!(key(&a), key(&b));
}

#[test]
fn masked_curve_rows() {
    let ds = common::small_dataset(4, 4, 2);
    let (bundle, _) = train_on(&quick(Mode::Baseline, 1), &ds).unwrap();
    let rows = masked_curve(&bundle, &ds, &FIGURE_PCT_GRID, 8, 0).unwrap();
    assert_eq!(rows.len(), 5);
    let clean = evaluate(&bundle, &ds.split(Split::Test), 32).unwrap();
    assert_eq!(rows[0].top1, clean.top1);
    assert_eq!(rows[0].top5, clean.top5);
    assert!(masked_curve(&bundle, &ds, &[1.5], 8, 0).is_err());
}

#[test]
fn ablation_csv_schema() {
    let ds = common::small_dataset(3, 2, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ablation.csv");
    let report = ablation_suite(&quick(Mode::Psd, 1), &ds, &[0], Some(&path)).unwrap();
    assert_eq!(report.rows.len(), 8);
    assert_eq!(report.summary.len(), 8);
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], ABLATION_HEADER);
    assert_eq!(lines.len(), 1 + 8 + 16);
    assert!(lines.iter().any(|l| l.starts_with("baseline_da_10,0,")));
    assert!(ablation_suite(&quick(Mode::Psd, 1), &ds, &[], None).is_err());
}

#[test]
fn run_outputs() {
    let ds = common::small_dataset(3, 2, 4);
    let cfg = TrainConfig { alpha: 2.0, ..quick(Mode::Psd, 2) };
    let (bundle, m) = train_on(&cfg, &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &cfg, &bundle, &m).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, metrics_csv(&m));
    assert_eq!(csv.lines().next().unwrap(), METRICS_HEADER);
    assert_eq!(csv.lines().count(), 3);
    let rec: RunRecord = serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(rec.config, cfg);
    assert_eq!(rec.config.alpha, 2.0);
    let loaded = psd_core::checkpoint::load(dir.path().join("model.psdm")).unwrap();
    assert_eq!(psd_core::checkpoint::encode(&loaded), psd_core::checkpoint::encode(&bundle));
}

#[test]
fn config_rejects_unknown_keys() {
    assert!(serde_json::from_str::<TrainConfig>(r#"{"etaa": 0.1}"#).is_err());
    let c: TrainConfig = serde_json::from_str("{}").unwrap();
    assert_eq!(c, TrainConfig::default());
    assert_eq!((c.eta, c.omega_l, c.beta, c.m, c.momentum, c.weight_decay, c.alpha), (0.05, 1.0, 5, 2, 0.9, 1e-4, 1.0));
}
