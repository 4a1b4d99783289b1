use nrccr_core::corpus::{build_dataset, load_corpus, save_corpus};
use nrccr_core::retrieval::{evaluate, rank_items, recall_at_k};
use nrccr_core::trainer::{load_checkpoint, save_checkpoint, train, Checkpoint};
use nrccr_core::{Dataset, TrainConfig, WorldConfig};
use proptest::prelude::*;

fn tiny_world(seed: u64) -> WorldConfig {
    WorldConfig {
        vocab: 40,
        concepts: 8,
        support: 5,
        frames: 4,
        frame_dim: 8,
        captions_per_video: 2,
        train_videos: 24,
        val_videos: 8,
        test_videos: 8,
        seed,
        ..WorldConfig::default()
    }
}

fn tiny_config() -> TrainConfig {
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

fn data(seed: u64) -> Dataset {
    build_dataset(&tiny_world(seed)).unwrap().1
}

#[test]
fn corpus_survives_a_disk_round_trip() {
    let d = data(3);
    let dir = tempfile::tempdir().unwrap();
    save_corpus(&d, dir.path()).unwrap();
    let back = load_corpus(dir.path()).unwrap();
    assert_eq!(back.train, d.train);
    assert_eq!(back.test, d.test);
    assert_eq!(back.manifest, d.manifest);
}

#[test]
fn checkpointed_model_evaluates_identically() {
    let d = data(1);
    let config = tiny_config();
    let out = train(&d, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    save_checkpoint(&Checkpoint::best(&out.state, &config), &path).unwrap();
    let ckpt = load_checkpoint(&path).unwrap();
    let opts = config.eval_options();
    let a = evaluate(&out.best_model(), &d.test, &opts).unwrap();
    let b = evaluate(&ckpt.model, &d.test, &opts).unwrap();
    assert_eq!(a.to_json(), b.to_json());
}

#[test]
fn training_is_a_function_of_its_inputs() {
    let d = data(2);
    let config = tiny_config();
    let a = train(&d, &config).unwrap();
    let b = train(&d, &config).unwrap();
    let lines = |o: &nrccr_core::trainer::TrainOutcome| o.log.iter().map(|l| l.to_json_line()).collect::<Vec<_>>();
    assert_eq!(lines(&a), lines(&b));
}

proptest! {
    #[test]
    fn ranking_is_a_permutation(scores in prop::collection::vec(-1.0f64..1.0, 1..40)) {
        let mut r = rank_items(&scores);
        for w in r.windows(2) {
            prop_assert!(scores[w[0]] >= scores[w[1]]);
        }
        r.sort_unstable();
        prop_assert_eq!(r, (0..scores.len()).collect::<Vec<_>>());
    }

    #[test]
    fn recall_grows_with_k(scores in prop::collection::vec(-1.0f64..1.0, 2..30), rel in 0usize..30) {
        let rel = rel % scores.len();
        let rankings = vec![rank_items(&scores)];
        let relevance = vec![vec![rel]];
        let mut prev = 0.0;
        for k in 1..=scores.len() {
            let r = recall_at_k(&rankings, &relevance, k).unwrap();
            prop_assert!(r >= prev);
            prev = r;
        }
        prop_assert_eq!(prev, 100.0);
    }
}
