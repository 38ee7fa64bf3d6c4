use super::*;
use crate::latent_teacher::{generate_dataset, IdentityBand, SyntheticSpec};
use crate::linalg::norm;

fn cache(classes: usize, per_class: usize, band: IdentityBand, seed: u64) -> LatentCache {
    let spec = SyntheticSpec {
        num_classes: classes,
        identity_band: band,
        seed,
        ..SyntheticSpec::default()
    };
    generate_dataset(&spec, per_class).unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        dim: 8,
        bank_size: 6,
        batch_size: 5,
        epochs: 3,
        ..TrainConfig::default()
    }
}

fn filled_state(data: &LatentCache, cfg: &TrainConfig) -> (TrainState, Vec<SampleFeatures>) {
    let mut state = TrainState::init(data, cfg).unwrap();
    let feats = state.cache_features(data).unwrap();
    if state.bank.is_some() {
        state.absorb(&feats).unwrap();
    }
    (state, feats)
}

#[test]
fn encoder_output_is_unit_and_deterministic() {
    let data = cache(2, 3, IdentityBand::Low, 1);
    let enc = ToyVisualEncoder::new(9, (4, 16, 16), 16);
    let z = &data.records[0].latent;
    let v = enc.encode(z).unwrap();
    assert!((norm(&v) - 1.0).abs() < 1e-6);
    assert_eq!(v, enc.encode(z).unwrap());
    assert_eq!(v, enc.encode(&z.scaled(2.0)).unwrap());
    assert_eq!(enc, ToyVisualEncoder::new(9, (4, 16, 16), 16));
}

#[test]
fn encoder_rejects_wrong_shape() {
    let enc = ToyVisualEncoder::new(0, (4, 8, 8), 4);
    let z = LatentTensor::new("x", 4, 16, 16, vec![1.0; 1024]).unwrap();
    assert!(matches!(enc.encode(&z), Err(Error::Parameter(_))));
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let data = cache(4, 4, IdentityBand::Low, 2);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..small_cfg()
    };
    let (mut state, feats) = filled_state(&data, &cfg);
    let before = state.model.clone();
    state.train_step(&feats[..5]).unwrap();
    assert_eq!(state.model, before);
}

#[test]
fn bank_only_flags_reduce_to_cls() {
    let data = cache(4, 4, IdentityBand::Low, 3);
    let cfg = TrainConfig {
        use_sem: false,
        use_gf: false,
        use_gcf: false,
        ..small_cfg()
    };
    let (mut state, feats) = filled_state(&data, &cfg);
    let loss = state.train_step(&feats[..5]).unwrap();
    assert_eq!((loss.sem, loss.granule_f, loss.granule_cf), (None, None, None));
    assert_eq!(loss.total, loss.cls);
}

#[test]
fn training_lowers_the_smoothed_loss() {
    let data = cache(4, 16, IdentityBand::Low, 4);
    let cfg = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    let state = fit(&data, &cfg).unwrap();
    let totals: Vec<f64> = state.history.iter().map(|r| r.loss.total).collect();
    assert!(totals.len() >= 200, "only {} steps", totals.len());
    let window = 20;
    let head = totals[..window].iter().sum::<f64>() / window as f64;
    let tail = totals[totals.len() - window..].iter().sum::<f64>() / window as f64;
    assert!(tail < head, "head {head} tail {tail}");
}

#[test]
fn zero_epochs_returns_initial_state() {
    let data = cache(2, 4, IdentityBand::Low, 5);
    let cfg = TrainConfig {
        epochs: 0,
        ..small_cfg()
    };
    let state = fit(&data, &cfg).unwrap();
    assert!(state.history.is_empty() && state.epoch_history.is_empty());
    assert_eq!(state.model, TrainState::init(&data, &cfg).unwrap().model);
}

#[test]
fn fit_is_reproducible() {
    let data = cache(4, 6, IdentityBand::High, 6);
    let a = fit(&data, &small_cfg()).unwrap();
    let b = fit(&data, &small_cfg()).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(flatten_params(&a.model), flatten_params(&b.model));
    assert_eq!(a.bank, b.bank);
}

#[test]
fn counterfactual_flag_changes_film() {
    let data = cache(4, 8, IdentityBand::High, 7);
    let on = fit(&data, &small_cfg()).unwrap();
    let off = fit(
        &data,
        &TrainConfig {
            use_gcf: false,
            ..small_cfg()
        },
    )
    .unwrap();
    assert_ne!(on.model.film, off.model.film);
}

#[test]
fn disabled_term_matches_zero_weight() {
    let data = cache(4, 3, IdentityBand::High, 8);
    let cfg = small_cfg();
    let (mut state, feats) = filled_state(&data, &cfg);
    state.model.randomize(&mut stream_rng(1, 9), 0.5);
    let pi = Permutation::random(5, &mut stream_rng(2, 9));
    let batch = &feats[..5];
    for (flag, zeroed) in [
        (
            TrainConfig { use_sem: false, ..cfg.clone() },
            TrainConfig { weights: LossWeights { sem: 0.0, ..cfg.weights }, ..cfg.clone() },
        ),
        (
            TrainConfig { use_gf: false, ..cfg.clone() },
            TrainConfig { weights: LossWeights { granule_f: 0.0, ..cfg.weights }, ..cfg.clone() },
        ),
        (
            TrainConfig { use_gcf: false, ..cfg.clone() },
            TrainConfig { weights: LossWeights { granule_cf: 0.0, ..cfg.weights }, ..cfg.clone() },
        ),
    ] {
        let run = |c: &TrainConfig| {
            evaluate_objective(&state.model, state.bank.as_ref(), c, batch, &pi, None, GradRequest::Total)
                .unwrap()
        };
        let a = run(&flag);
        let b = run(&zeroed);
        assert_eq!(a.breakdown.total, b.breakdown.total);
        assert_eq!(flatten_params(&a.grad.unwrap()), flatten_params(&b.grad.unwrap()));
    }
}

#[test]
fn optimizer_step_leaves_bank_and_encoder_alone() {
    let data = cache(4, 3, IdentityBand::Low, 10);
    let (mut state, feats) = filled_state(&data, &small_cfg());
    let encoder = state.encoder.clone();
    let mut expected = state.bank.clone().unwrap();
    let batch = &feats[..5];
    for t in state.low_embeddings(batch).unwrap() {
        expected.absorb(&t).unwrap();
    }
    state.train_step(batch).unwrap();
    assert_eq!(state.bank.as_ref().unwrap().dump(), expected.dump());
    assert_eq!(state.encoder, encoder);
}

#[test]
fn unfilled_bank_blocks_training() {
    let data = cache(2, 2, IdentityBand::Low, 11);
    let mut state = TrainState::init(&data, &small_cfg()).unwrap();
    let feats = state.cache_features(&data).unwrap();
    assert!(matches!(state.train_step(&feats), Err(Error::State(_))));
}

#[test]
fn divergence_names_the_term() {
    let data = cache(2, 3, IdentityBand::Low, 12);
    let cfg = TrainConfig {
        use_bank: false,
        ..small_cfg()
    };
    let (mut state, feats) = filled_state(&data, &cfg);
    state.model.text.data[0] = f64::INFINITY;
    match state.train_step(&feats[..3]) {
        Err(Error::Divergence { term }) => assert_eq!(term, "cls"),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn identity_permutation_matches_factual() {
    let data = cache(4, 3, IdentityBand::High, 13);
    let (mut state, feats) = filled_state(&data, &small_cfg());
    state.model.randomize(&mut stream_rng(3, 9), 0.5);
    let pi = Permutation::identity(5);
    let out = evaluate_objective(
        &state.model,
        state.bank.as_ref(),
        &state.config,
        &feats[..5],
        &pi,
        None,
        GradRequest::None,
    )
    .unwrap();
    assert_eq!(out.breakdown.granule_f, out.breakdown.granule_cf);
}

#[test]
fn checkpoint_round_trip() {
    let data = cache(4, 4, IdentityBand::Low, 14);
    let state = fit(&data, &small_cfg()).unwrap();
    let ckpt = Checkpoint::from_state(&state);
    let text = ckpt.to_text();
    assert!(text.starts_with("# resolved-config\n"));
    let back = Checkpoint::parse(&text).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.encoder(), state.encoder);
    let broken = text.replace("tensor film.mlp.fc2.bias", "tensor film.mlp.fc2.gain");
    assert!(matches!(Checkpoint::parse(&broken), Err(Error::Format(_))));
}

#[test]
fn gradient_check_small_config() {
    let data = cache(4, 3, IdentityBand::High, 15);
    let (mut state, _) = filled_state(&data, &small_cfg());
    state.model.randomize(&mut stream_rng(4, 9), 0.5);
    let batch: Vec<_> = data.records.iter().step_by(2).take(5).cloned().collect();
    let report = gradient_check(&state, &batch, 1e-5).unwrap();
    assert!(report.max_rel_error() < 1e-4, "{}", report.format());
    assert_eq!(report.sem_aggregator_analytic_max_abs, 0.0);
    assert_eq!(report.sem_aggregator_numeric_max_abs, 0.0);
    let bank = &report.excluded[0];
    assert!(bank.numeric_max_abs > 0.0 && bank.analytic_max_abs == 0.0);
}

#[test]
fn config_pairs_round_trip() {
    let cfg = TrainConfig {
        use_gcf: false,
        learning_rate: 3e-4,
        anchor: SharedAnchorPolicy::ImageEmbedding,
        ..TrainConfig::default()
    };
    let mut back = TrainConfig::default();
    for (k, v) in cfg.pairs() {
        assert!(back.set(k, &v).unwrap());
    }
    assert_eq!(back, cfg);
    assert!(!back.set("nope", "1").unwrap());
    assert!(matches!(back.set("epochs", "x"), Err(Error::Config(_))));
}
