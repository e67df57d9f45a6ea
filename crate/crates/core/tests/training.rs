use hiertab::data::{build_timelines, gen_toy_corpus, ToySpec};
use hiertab::model::{Model, ModelConfig};
use hiertab::tensor::{Gradients, ParamStore, Tape, Tensor};
use hiertab::training::{adagrad_step, clip_global_norm, nll_loss, train, TrainConfig, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scalar_store(x: f64) -> (ParamStore, Gradients) {
    let mut store = ParamStore::new();
    store.add("x", Tensor::vector(vec![x])).unwrap();
    let grads = Gradients::zeros_like(&store);
    (store, grads)
}

#[test]
fn adagrad_first_step_and_zero_gradient() {
    let (mut store, mut grads) = scalar_store(0.0);
    let id = store.id("x").unwrap();
    grads.get_mut(id)[0] = 1.0;
    adagrad_step(&mut store, &grads, 0.15);
    assert!((store.get(id).tensor.data()[0] + 0.15 / (1.0 + 1e-8)).abs() < 1e-15);

    let before = store.get(id).clone();
    let zero = Gradients::zeros_like(&store);
    adagrad_step(&mut store, &zero, 0.15);
    assert_eq!(store.get(id).tensor, before.tensor);
}

#[test]
fn adagrad_three_step_trajectory() {
    // g = 2, -1, 0.5 from θ = 1, lr = 0.1:
    // acc = 4     θ = 1 - 0.1·2/2           = 0.9
    // acc = 5     θ = 0.9 + 0.1·1/√5        = 0.944721359549995...
    // acc = 5.25  θ = θ - 0.1·0.5/√5.25     = 0.922899...
    let (mut store, mut grads) = scalar_store(1.0);
    let id = store.id("x").unwrap();
    let mut acc_prev = 0.0;
    for g in [2.0, -1.0, 0.5] {
        grads.get_mut(id)[0] = g;
        adagrad_step(&mut store, &grads, 0.1);
        let acc = store.get(id).accumulator[0];
        assert!(acc >= acc_prev);
        acc_prev = acc;
    }
    let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8) + 0.1 / (5f64.sqrt() + 1e-8) - 0.05 / (5.25f64.sqrt() + 1e-8);
    assert!((store.get(id).tensor.data()[0] - expected).abs() < 1e-12);
    assert!((expected - 0.922_899_570_921_6).abs() < 1e-9);
    assert_eq!(acc_prev, 5.25);
}

#[test]
fn clipping_caps_the_global_norm() {
    let (store, mut grads) = scalar_store(0.0);
    grads.get_mut(store.id("x").unwrap())[0] = 30.0;
    assert_eq!(clip_global_norm(&mut grads, 5.0), 30.0);
    assert!((grads.global_norm() - 5.0).abs() < 1e-12);
}

fn tiny_model() -> (hiertab::data::Dataset, Model) {
    let ds = gen_toy_corpus(2, 3, 2);
    let config = ModelConfig {
        hidden: 6,
        window: 3,
        init_scale: 0.2,
    };
    let model = Model::new(config, ds.vocab.clone(), 2).unwrap();
    (ds, model)
}

#[test]
fn empty_batch_is_rejected() {
    let (_, model) = tiny_model();
    let mut tape = Tape::new(&model.store);
    assert!(nll_loss(&mut tape, &model, &[], 0.0, None).is_err());
}

#[test]
fn uniform_generation_costs_ln_v_per_token() {
    let (ds, mut model) = tiny_model();
    let tl = build_timelines(&ds);
    for name in ["dec.out.w", "dec.out.b", "dec.copy.w"] {
        let id = model.store.id(name).unwrap();
        model.store.get_mut(id).tensor.data_mut().fill(0.0);
    }
    let id = model.store.id("dec.copy.b").unwrap();
    model.store.get_mut(id).tensor.data_mut()[0] = -60.0;
    let mut ex = model.prepare(&ds.train[0], &tl);
    // Words that are never table values, so only generation can produce them.
    ex.targets = ["scored", "points", ".", "the"].iter().map(|t| model.vocab.id(t)).collect();
    let mut tape = Tape::new(&model.store);
    let loss = nll_loss(&mut tape, &model, &[ex], 0.0, None).unwrap();
    let v = model.vocab.len() as f64;
    assert!((tape.scalar_value(loss) - 4.0 * v.ln()).abs() < 1e-12);
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        hidden: 6,
        batch_size: 2,
        bptt_block: Some(20),
        eval_bleu_every: 1,
        max_len: 20,
        ..TrainConfig::default()
    }
}

#[test]
fn learning_rate_decays_geometrically() {
    let ds = ToySpec::new(3, 3, 2).with_splits(1, 0).generate();
    let out = train(&ds, &quick_config(), |_| {}).unwrap();
    for e in &out.log {
        assert!((e.lr - 0.15 * 0.97f64.powi(e.epoch as i32 - 1)).abs() < 1e-15);
        assert!(e.dev_loss.is_some() && e.dev_bleu.is_some());
    }
    assert!((out.last.lr - 0.15 * 0.97f64.powi(3)).abs() < 1e-15);
    assert_eq!(out.last.epoch, 3);
    assert!(out.best.is_some());
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let ds = gen_toy_corpus(4, 3, 2);
    let a = train(&ds, &quick_config(), |_| {}).unwrap();
    let b = train(&ds, &quick_config(), |_| {}).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.last.to_json(), b.last.to_json());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    a.last.save(&path).unwrap();
    let loaded = TrainState::load(&path).unwrap();
    assert_eq!(loaded.model.store, a.last.model.store);
    assert_eq!(loaded.to_json(), a.last.to_json());

    std::fs::write(&path, "{\"format\": \"hiertab-checkpoint\"").unwrap();
    assert!(TrainState::load(&path).is_err());
}

#[test]
fn early_epochs_do_not_increase_training_loss() {
    let ds = gen_toy_corpus(7, 10, 4);
    let config = TrainConfig {
        epochs: 3,
        hidden: 16,
        dropout: 0.0,
        eval_bleu_every: 0,
        ..TrainConfig::default()
    };
    let out = train(&ds, &config, |_| {}).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|e| e.train_loss).collect();
    println!("{losses:?}");
    assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
}

#[test]
fn invalid_configs_are_rejected() {
    let ds = gen_toy_corpus(1, 2, 1);
    for cfg in [
        TrainConfig { dropout: 1.0, ..quick_config() },
        TrainConfig { batch_size: 0, ..quick_config() },
        TrainConfig { bptt_block: Some(0), ..quick_config() },
    ] {
        assert!(train(&ds, &cfg, |_| {}).is_err());
    }
    let empty = hiertab::data::Dataset::default();
    assert!(train(&empty, &quick_config(), |_| {}).is_err());
}

#[test]
fn dropout_masks_depend_on_the_rng() {
    let (ds, model) = tiny_model();
    let tl = build_timelines(&ds);
    let ex = model.prepare(&ds.train[0], &tl);
    let run = |seed| {
        let mut tape = Tape::with_dropout_rng(&model.store, ChaCha8Rng::seed_from_u64(seed));
        let loss = nll_loss(&mut tape, &model, std::slice::from_ref(&ex), 0.3, None).unwrap();
        tape.scalar_value(loss)
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}
