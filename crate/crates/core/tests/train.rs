use bvap::checkpoint::{load_checkpoint, save_checkpoint};
use bvap::data::{synth_dataset, SampleRecord};
use bvap::model::{Model, ModelConfig};
use bvap::params::InitScheme;
use bvap::train::{batch_gradients, mean_loss, rmsprop_step, train, StopReason, TrainConfig};
use bvap::{Error, ParamStore, Tensor};

fn tiny_model(seed: u64) -> Model {
    let mut cfg = ModelConfig::scaled(64, 0.125);
    cfg.backbone.init = InitScheme::FanIn;
    Model::new(cfg, seed).unwrap()
}

fn records(n: usize, seed: u64) -> Vec<SampleRecord> {
    synth_dataset(n, 64, seed).unwrap().into_iter().map(|s| s.record).collect()
}

fn single(v: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("p", Tensor::scalar(v)).unwrap();
    s
}

fn set_grad(s: &mut ParamStore, g: f64) {
    s.zero_grads();
    s.accumulate_grads(&[vec![g]], 1.0);
}

#[test]
fn zero_gradient_leaves_parameters() {
    let mut s = single(0.75);
    set_grad(&mut s, 0.0);
    rmsprop_step(&mut s, &TrainConfig::default()).unwrap();
    assert_eq!(s.get("p").unwrap().data(), &[0.75]);
    assert!(s.get("p").unwrap().grad.is_none());
}

#[test]
fn missing_gradient_names_the_parameter() {
    let mut s = single(1.0);
    match rmsprop_step(&mut s, &TrainConfig::default()) {
        Err(Error::MissingGradient(name)) => assert_eq!(name, "p"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn constant_gradient_reaches_the_momentum_fixed_point() {
    let cfg = TrainConfig::default();
    for g in [0.3, -2.0] {
        let mut s = single(0.0);
        let mut last = 0.0;
        for _ in 0..400 {
            let before = s.get("p").unwrap().data()[0];
            set_grad(&mut s, g);
            rmsprop_step(&mut s, &cfg).unwrap();
            last = s.get("p").unwrap().data()[0] - before;
        }
        // s → g², so every update tends to −lr·sign(g)/(1−μ).
        let want = -cfg.learning_rate * g.signum() / (1.0 - cfg.momentum);
        assert!((last - want).abs() < 1e-9 * cfg.learning_rate.max(1.0), "{last} vs {want}");
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert_eq!(TrainConfig::desk().batch_size, 4);
    for bad in [
        TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
        TrainConfig { momentum: 1.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn training_is_deterministic() {
    let data = records(4, 1);
    let cfg = TrainConfig { batch_size: 2, max_steps: Some(3), ..TrainConfig::desk() };
    let run = || {
        let mut m = tiny_model(2);
        let h = train(&mut m, &data, &[], &cfg, None).unwrap();
        (m.params, h.steps.iter().map(|s| s.train_loss).collect::<Vec<_>>())
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    assert_eq!(a, b);
}

#[test]
fn zero_learning_rate_keeps_parameters_bit_exact() {
    let data = records(4, 3);
    let mut m = tiny_model(4);
    let before = m.params.clone();
    let cfg = TrainConfig { learning_rate: 0.0, batch_size: 2, max_steps: Some(3), ..TrainConfig::desk() };
    train(&mut m, &data, &[], &cfg, None).unwrap();
    for ((n, a), (_, b)) in before.iter().zip(m.params.iter()) {
        assert_eq!(a.data(), b.data(), "{n}");
    }
}

#[test]
fn without_validation_runs_every_epoch() {
    let data = records(2, 5);
    let mut m = tiny_model(6);
    let cfg = TrainConfig { batch_size: 2, max_epochs: 3, ..TrainConfig::desk() };
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("last.ckpt");
    let h = train(&mut m, &data, &[], &cfg, Some(&ckpt)).unwrap();
    assert_eq!(h.stop, StopReason::MaxEpochs);
    assert_eq!(h.steps.len(), 3);
    assert_eq!(h.steps.last().unwrap().epoch, 2);
    assert!(h.steps.iter().all(|s| s.val_loss.is_none() && s.train_loss.is_finite()));
    assert_eq!(load_checkpoint(&ckpt).unwrap(), m.params);
    let csv = h.to_csv();
    assert!(csv.starts_with("step,train_loss,val_loss\n"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn empty_training_set_is_rejected() {
    let mut m = tiny_model(7);
    assert!(train(&mut m, &[], &[], &TrainConfig::desk(), None).is_err());
}

#[test]
fn best_checkpoint_reproduces_validation_loss() {
    let data = records(4, 8);
    let val = records(2, 9);
    let mut m = tiny_model(10);
    let cfg = TrainConfig { batch_size: 2, max_epochs: 2, ..TrainConfig::desk() };
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("best.ckpt");
    let h = train(&mut m, &data, &val, &cfg, Some(&ckpt)).unwrap();
    let best = h.best_val_loss.unwrap();
    let reloaded = Model { config: m.config.clone(), params: load_checkpoint(&ckpt).unwrap() };
    assert_eq!(mean_loss(&reloaded, &val, cfg.weight_decay).unwrap(), best);
    assert_eq!(mean_loss(&m, &val, cfg.weight_decay).unwrap(), best);
}

#[test]
fn resume_after_reload_is_bit_exact() {
    let data = records(2, 11);
    let mut m = tiny_model(12);
    let cfg = TrainConfig::desk();
    let batch: Vec<&SampleRecord> = data.iter().collect();
    let (_, grads) = batch_gradients(&m, &batch, cfg.weight_decay).unwrap();
    m.params.zero_grads();
    m.params.accumulate_grads(&grads, 1.0);
    rmsprop_step(&mut m.params, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&m.params, &path).unwrap();
    let mut resumed = load_checkpoint(&path).unwrap();
    assert!(std::fs::metadata(&path).unwrap().len() <= 10 * 1024 * 1024);

    for store in [&mut m.params, &mut resumed] {
        store.zero_grads();
        store.accumulate_grads(&grads, 1.0);
        rmsprop_step(store, &cfg).unwrap();
    }
    assert_eq!(m.params, resumed);
}
