use super::*;
use crate::corpus::{build_dataset, WorldConfig};
use crate::diffmath::Tensor;

fn small_world(rho: f64) -> WorldConfig {
    WorldConfig {
        vocab: 40,
        concepts: 8,
        support: 5,
        frames: 4,
        frame_dim: 8,
        captions_per_video: 2,
        train_videos: 32,
        val_videos: 8,
        test_videos: 8,
        rho,
        ..WorldConfig::default()
    }
}

fn small_config() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        epochs: 2,
        word_dim: 8,
        common_dim: 8,
        ffn_dim: 16,
        max_positions: 16,
        ..TrainConfig::default()
    }
}

fn small_data(rho: f64) -> Dataset {
    build_dataset(&small_world(rho)).unwrap().1
}

fn single_param(values: Vec<f64>) -> ParamSet {
    let mut set = ParamSet::new();
    let n = values.len();
    set.insert("w", Tensor::vector(values).unwrap()).unwrap();
    assert_eq!(set.get(ParamId(0)).numel(), n);
    set
}

#[test]
fn adam_first_steps() {
    let mut p = single_param(vec![1.0, -2.0]);
    let mut st = AdamState::new(&p);
    adam_step(&mut p, &[Some(vec![0.0, 0.0])], &mut st, 1e-4).unwrap();
    assert_eq!(p.get(ParamId(0)).data(), &[1.0, -2.0]);

    // bias correction makes the first step lr·g/(|g| + ε)
    let mut p = single_param(vec![1.0, -2.0]);
    let mut st = AdamState::new(&p);
    adam_step(&mut p, &[Some(vec![1.0, -0.25])], &mut st, 1e-4).unwrap();
    let d = p.get(ParamId(0)).data();
    assert!((d[0] - (1.0 - 1e-4 / (1.0 + 1e-8))).abs() < 1e-15);
    assert!((d[1] - (-2.0 + 1e-4 * 0.25 / (0.25 + 1e-8))).abs() < 1e-15);

    // a constant gradient keeps m̂ = g and v̂ = g², so every step has the same size
    for _ in 0..4 {
        let before = p.get(ParamId(0)).data()[0];
        adam_step(&mut p, &[Some(vec![1.0, -0.25])], &mut st, 1e-4).unwrap();
        let step = before - p.get(ParamId(0)).data()[0];
        assert!((step - 1e-4 / (1.0 + 1e-8)).abs() < 1e-15, "{step}");
    }
    assert_eq!(st.steps, vec![5]);

    // no gradient: neither the value nor the step count moves
    adam_step(&mut p, &[None], &mut st, 1e-4).unwrap();
    assert_eq!(st.steps, vec![5]);
    assert!(adam_step(&mut p, &[Some(vec![1.0])], &mut st, 1e-4).is_err());
}

#[test]
fn adam_oracle_against_recurrence() {
    let grads = [0.3, -1.2, 0.05, 0.7];
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 1e-3);
    let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
    let mut p = single_param(vec![0.5]);
    let mut st = AdamState::new(&p);
    for (t, &g) in grads.iter().enumerate() {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32 + 1));
        let vh = v / (1.0 - b2.powi(t as i32 + 1));
        x -= lr * mh / (vh.sqrt() + eps);
        adam_step(&mut p, &[Some(vec![g])], &mut st, lr).unwrap();
        assert!((p.get(ParamId(0)).data()[0] - x).abs() < 1e-14);
    }
}

#[test]
fn loss_descends_on_a_clean_corpus() {
    let mut world = small_world(0.0);
    world.train_videos = 32;
    let data = build_dataset(&world).unwrap().1;
    assert_eq!(data.train.instances.len(), 64);
    let config = TrainConfig { batch_size: 16, ..small_config() };
    let mut state = TrainState::fresh(&config, &data).unwrap();
    let batches = make_batches(&data.train, config.batch_size, 0, 1).unwrap();
    let mut tape = Tape::new();
    let eval = |state: &TrainState| -> f64 {
        let mut tape = Tape::new();
        let mut sum = 0.0;
        for ids in &batches {
            let p = state.model.bind_frozen(&mut tape);
            let plan = ForwardPlan::for_weights(&config.weights, false);
            let b = batch_embeddings(&state.model, &mut tape, &p, &data.train, ids, plan).unwrap();
            let l = total_loss(&mut tape, &b, &config.weights, &state.model.model.disc, &p, AdversarialRouting::Reversal)
                .unwrap();
            sum += tape.value(l.total).item();
            tape.reset();
        }
        sum
    };
    let before = eval(&state);
    for step in 0..50 {
        let ids = &batches[step % batches.len()];
        train_step(&mut state, &config, &data.train, ids, &mut tape).unwrap();
    }
    let after = eval(&state);
    assert!(after < 0.8 * before, "{before} -> {after}");
}

#[test]
fn training_is_deterministic() {
    let data = small_data(0.3);
    let config = small_config();
    let a = train(&data, &config).unwrap();
    let b = train(&data, &config).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.state.model.params.tensors(), b.state.model.params.tensors());
    assert_eq!(a.log.len(), 2);
    assert!(a.log.iter().all(|l| l.loss_total.is_finite() && l.val_sumr.is_finite()));
}

#[test]
fn basic_objective_logs_only_the_triplet() {
    let data = small_data(0.3);
    let config = TrainConfig { epochs: 1, ..small_config() }.basic();
    let out = train(&data, &config).unwrap();
    let l = &out.log[0];
    assert_eq!((l.loss_sim, l.loss_feat, l.loss_cyc, l.loss_adv), (0.0, 0.0, 0.0, 0.0));
    assert!((l.loss_total - l.loss_tri).abs() < 1e-12);
}

fn one_step(config: &TrainConfig, data: &Dataset) -> (ModelParams, ModelParams) {
    let mut state = TrainState::fresh(config, data).unwrap();
    let before = state.model.clone();
    let ids: Vec<usize> = make_batches(&data.train, config.batch_size, 0, 1).unwrap().remove(0);
    train_step(&mut state, config, &data.train, &ids, &mut Tape::new()).unwrap();
    (before, state.model)
}

#[test]
fn teacher_detach_and_frozen_embeddings() {
    let data = small_data(0.3);
    let (before, after) = one_step(&small_config(), &data);
    for id in before.cross_attention_ids() {
        assert_ne!(before.params.get(id), after.params.get(id), "{}", before.params.name(id));
    }

    let detached = TrainConfig { detach_teacher: true, ..small_config() };
    let (before, after) = one_step(&detached, &data);
    for id in before.cross_attention_ids() {
        assert_eq!(before.params.get(id), after.params.get(id));
    }

    let frozen = TrainConfig { freeze_embeddings: true, ..small_config() };
    let (before, after) = one_step(&frozen, &data);
    for id in before.embedding_ids() {
        assert_eq!(before.params.get(id).data(), after.params.get(id).data());
    }
    let head = before.params.ids().find(|&i| before.params.name(i).starts_with("text.head")).unwrap();
    assert_ne!(before.params.get(head), after.params.get(head));
}

#[test]
fn alternating_mode_updates_the_discriminator() {
    let data = small_data(0.3);
    let config = TrainConfig { adv_mode: AdvMode::Alternating, ..small_config() };
    let (before, after) = one_step(&config, &data);
    for id in before.discriminator_ids() {
        assert_ne!(before.params.get(id), after.params.get(id));
    }
    let out = train(&data, &TrainConfig { epochs: 1, ..config }).unwrap();
    assert!(out.log[0].loss_total.is_finite());
}

#[test]
fn checkpoint_round_trip_and_faults() {
    let data = small_data(0.3);
    let config = TrainConfig { epochs: 1, ..small_config() };
    let out = train(&data, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last.ckpt");
    save_checkpoint(&Checkpoint::last(&out.state, &config), &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config, config);
    assert_eq!(back.model.params.tensors(), out.state.model.params.tensors());
    assert_eq!(back.adam.as_ref(), Some(&out.state.adam));
    let opts = config.eval_options();
    assert_eq!(
        evaluate(&back.model, &data.test, &opts).unwrap(),
        evaluate(&out.state.model, &data.test, &opts).unwrap()
    );

    // before any epoch the best SumR is −∞
    let fresh = TrainState::fresh(&config, &data).unwrap();
    save_checkpoint(&Checkpoint::last(&fresh, &config), &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap().best_val_sumr, f64::NEG_INFINITY);

    let text = std::fs::read_to_string(&path).unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, text.replacen(CHECKPOINT_HEADER, "NRCCR-CKPT v0", 1)).unwrap();
    assert!(matches!(load_checkpoint(&bad), Err(Error::Version(_))));

    let lines: Vec<&str> = text.lines().collect();
    std::fs::write(&bad, lines[..lines.len() / 2].join("\n")).unwrap();
    assert!(matches!(load_checkpoint(&bad), Err(Error::Invalid(_))));

    let mut cut = lines[..lines.len() / 2].join("\n");
    cut.truncate(cut.len() - 5);
    std::fs::write(&bad, cut).unwrap();
    assert!(matches!(load_checkpoint(&bad), Err(Error::Parse { .. }) | Err(Error::Invalid(_))));
    assert!(matches!(load_checkpoint(&dir.path().join("none.ckpt")), Err(Error::MissingFile(_))));
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let data = small_data(0.3);
    let config = TrainConfig { epochs: 3, ..small_config() };
    let full = train(&data, &config).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last.ckpt");
    let first = train(&data, &TrainConfig { epochs: 1, ..config.clone() }).unwrap();
    save_checkpoint(&Checkpoint::last(&first.state, &config), &path).unwrap();
    let mut state = load_checkpoint(&path).unwrap().into_state().unwrap();
    let rest = train_from(&mut state, &config, &data, |_, _| Ok(())).unwrap();

    assert_eq!(rest.len(), 2);
    assert_eq!(&full.log[1..], &rest[..]);
    assert_eq!(full.state.model.params.tensors(), state.model.params.tensors());
    assert_eq!(full.state.best_params.tensors(), state.best_params.tensors());
}

#[test]
fn config_keys_round_trip() {
    let mut c = small_config();
    c.adv_mode = AdvMode::Alternating;
    c.v2t_fusion = V2tFusion::TargetOnly;
    c.weights.lambda_adv = 0.125;
    let mut d = TrainConfig::default();
    for (k, v) in c.pairs() {
        assert!(d.set(k, &v).unwrap(), "{k}");
    }
    assert_eq!(c, d);
    assert!(!d.set("vocab", "3").unwrap());
    assert!(matches!(d.set("adv_mode", "both"), Err(Error::Config { .. })));
    assert!(TrainConfig { batch_size: 1, ..TrainConfig::default() }.validate().is_err());
}

#[test]
fn gradient_audit_passes() {
    for seed in 0..2 {
        let a = audit_gradients(seed).unwrap();
        assert!(a.passed(), "seed {seed}: encoder {:e}, disc {:e}", a.encoder.worst(), a.discriminator.worst());
        assert!(a.checked > 1000);
        assert_eq!(a.unresolved, 0);
    }
}

#[test]
fn warmup_epochs_train_the_basic_objective() {
    let data = small_data(0.3);
    let config = TrainConfig { epochs: 3, warmup_epochs: 2, ..small_config() };
    let out = train(&data, &config).unwrap();
    let basic = train(&data, &TrainConfig { epochs: 2, ..small_config() }.basic()).unwrap();
    assert_eq!(&out.log[..2], &basic.log[..]);
    assert!(out.log[2].loss_feat > 0.0 && out.log[2].loss_cyc > 0.0);
    // model selection starts with the configured objective
    assert_eq!(out.state.best_epoch, 3);
    assert_eq!(out.state.best_val_sumr, out.log[2].val_sumr);
}
