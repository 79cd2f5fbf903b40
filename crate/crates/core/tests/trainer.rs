mod common;

use candle_core::{DType, Device, Tensor};
use respsed::detector::Detector;
use respsed::events::CollarConfig;
use respsed::graphify::collate;
use respsed::objective::LossWeights;
use respsed::trainer::{load_detector, Checkpoint, RunDir, StaticSource, TrainConfig, Trainer};
use respsed::Error;

fn trainer(seed: u64) -> Trainer {
    let det = Detector::new(&common::small_cfg(), seed, DType::F32, &Device::Cpu).unwrap();
    let cfg = TrainConfig { batch_size: 2, epochs: 2, seed, ..TrainConfig::default() };
    Trainer::new(det, cfg, 100).unwrap()
}

fn snapshot(t: &Trainer) -> Vec<(String, Vec<f32>)> {
    t.det
        .store
        .params()
        .into_iter()
        .map(|(n, v)| (n, v.as_tensor().flatten_all().unwrap().to_vec1().unwrap()))
        .collect()
}

fn flat(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

#[test]
fn zero_weight_losses_leave_parameters_unchanged() {
    let mut t = trainer(1);
    t.det.cfg.loss = LossWeights {
        node_conf: 0.0,
        node_cls: 0.0,
        interval_conf: 0.0,
        interval_cls: 0.0,
        interval_loc: 0.0,
    };
    let graphs = common::random_graphs(&t.det.cfg, &[40, 52], 3);
    let before = snapshot(&t);
    t.train_step(&collate(&graphs).unwrap()).unwrap();
    assert_eq!(before, snapshot(&t));
}

#[test]
fn one_step_changes_both_groups() {
    let mut t = trainer(1);
    let graphs = common::random_graphs(&t.det.cfg, &[40, 52], 4);
    let before = snapshot(&t);
    t.train_step(&collate(&graphs).unwrap()).unwrap();
    let after = snapshot(&t);
    let changed = |prefix: &str| {
        before
            .iter()
            .zip(&after)
            .any(|(a, b)| a.0.starts_with(prefix) && a.1 != b.1)
    };
    assert!(changed("trunk.") && changed("node_head.") && changed("refiner."));
    assert_eq!(t.step, 1);
}

#[test]
fn equal_seeds_give_identical_loss_curves() {
    let graphs = common::random_graphs(&common::small_cfg(), &[40, 52, 45], 5);
    let run = || {
        let mut t = trainer(7);
        let mut totals = Vec::new();
        for _ in 0..2 {
            totals.extend(t.train_epoch(&graphs).unwrap().into_iter().map(|r| r.total.to_bits()));
        }
        totals
    };
    let a = run();
    assert_eq!(a.len(), 4);
    assert_eq!(a, run());
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(2);
    let graphs = common::random_graphs(&t.det.cfg, &[40, 52], 6);
    let batch = collate(&graphs).unwrap();
    t.train_step(&batch).unwrap();
    t.train_step(&batch).unwrap();
    let stem = dir.path().join("ck");
    t.checkpoint().save(&stem).unwrap();

    let (det, meta) = load_detector(&stem, DType::F32, &Device::Cpu).unwrap();
    assert_eq!(meta.step, 2);
    let a = t.det.forward(&batch, false).unwrap();
    let b = det.forward(&batch, false).unwrap();
    assert_eq!(flat(&a.nodes.node_logits), flat(&b.nodes.node_logits));
    assert_eq!(flat(&a.intervals.start), flat(&b.intervals.start));
    assert_eq!(flat(&a.intervals.end), flat(&b.intervals.end));
    assert_eq!(flat(&a.intervals.conf_logit), flat(&b.intervals.conf_logit));
    assert_eq!(flat(&a.intervals.cls_logits), flat(&b.intervals.cls_logits));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let graphs = common::random_graphs(&common::small_cfg(), &[40, 52], 8);
    let batch = collate(&graphs).unwrap();
    let mut a = trainer(3);
    a.train_step(&batch).unwrap();
    let stem = dir.path().join("mid");
    a.checkpoint().save(&stem).unwrap();
    a.train_step(&batch).unwrap();

    let mut b = trainer(99);
    Checkpoint::restore(&mut b, &stem).unwrap();
    assert_eq!(b.step, 1);
    b.train_step(&batch).unwrap();
    assert_eq!(snapshot(&a), snapshot(&b));
}

#[test]
fn restore_rejects_a_different_model() {
    let dir = tempfile::tempdir().unwrap();
    let t = trainer(0);
    let stem = dir.path().join("ck");
    t.checkpoint().save(&stem).unwrap();
    let mut cfg = common::small_cfg();
    cfg.model.d_node = 12;
    let det = Detector::new(&cfg, 0, DType::F32, &Device::Cpu).unwrap();
    let mut other = Trainer::new(det, TrainConfig::default(), 10).unwrap();
    assert!(matches!(Checkpoint::restore(&mut other, &stem), Err(Error::Config(_))));

    // same hash check bypassed: shapes are still verified
    let bigger = Detector::new(&cfg, 0, DType::F32, &Device::Cpu).unwrap();
    let state = t.det.store.state();
    assert!(matches!(bigger.store.load_state(&state), Err(Error::Shape(_))));
}

#[test]
fn non_finite_loss_reports_batch_ids() {
    let mut t = trainer(0);
    let graphs = common::random_graphs(&t.det.cfg, &[40, 52], 9);
    let (_, var) = t.det.store.params().into_iter().find(|(n, _)| n.starts_with("node_head")).unwrap();
    var.set(&(var.as_tensor() * f64::NAN).unwrap()).unwrap();
    match t.train_step(&collate(&graphs).unwrap()) {
        Err(Error::NonFiniteLoss { step, clips }) => {
            assert_eq!(step, 0);
            assert_eq!(clips, vec!["clip0", "clip1"]);
        }
        other => panic!("expected NonFiniteLoss, got {:?}", other.map(|r| r.total)),
    }
}

#[test]
fn fit_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(4);
    let graphs = common::random_graphs(&t.det.cfg, &[40, 52, 45], 10);
    let run = RunDir::create(dir.path(), &t.cfg).unwrap();
    let mut source = StaticSource(graphs.clone());
    let hist = t.fit(&mut source, Some(&graphs), &CollarConfig::default(), Some(&run)).unwrap();
    assert_eq!(hist.len(), 4);
    let csv = std::fs::read_to_string(run.losses_path()).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(dir.path().join("config.toml").exists());
    assert!(dir.path().join("eval/epoch_0001.json").exists());
    assert!(run.checkpoint_path("last").with_extension("safetensors").exists());
    assert!(run.checkpoint_path("best").with_extension("json").exists());
}
