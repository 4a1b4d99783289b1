use std::collections::HashSet;

use proptest::prelude::*;
use rand::Rng;

use super::*;

fn small_config(seed: u64) -> WorldConfig {
    WorldConfig {
        train_videos: 20,
        val_videos: 6,
        test_videos: 6,
        seed,
        ..WorldConfig::default()
    }
}

fn source(ids: Vec<usize>) -> TokenSequence {
    TokenSequence::new(Language::Source, ids).unwrap()
}

fn random_sentences(rng: &mut ChaCha8Rng, count: usize, len: usize, vocab: usize) -> Vec<TokenSequence> {
    (0..count)
        .map(|_| source((0..len).map(|_| rng.random_range(0..vocab)).collect()))
        .collect()
}

#[test]
fn world_is_a_function_of_the_seed() {
    let a = World::generate(&small_config(3)).unwrap();
    let b = World::generate(&small_config(3)).unwrap();
    assert_eq!(a.channel, b.channel);
    assert_eq!(a.supports, b.supports);
    assert_eq!(a.generator, b.generator);
    for s in &a.supports {
        assert_eq!(s.len(), 10);
        assert_eq!(s.iter().collect::<HashSet<_>>().len(), 10);
    }
    let maps: HashSet<Vec<usize>> = (0..10)
        .map(|seed| World::generate(&small_config(seed)).unwrap().channel.forward)
        .collect();
    assert_eq!(maps.len(), 10);
}

#[test]
fn invalid_configs_rejected() {
    for cfg in [
        WorldConfig { rho: 1.5, ..WorldConfig::default() },
        WorldConfig { rho: -0.1, ..WorldConfig::default() },
        WorldConfig { concepts: 0, ..WorldConfig::default() },
        WorldConfig { min_len: 5, max_len: 4, ..WorldConfig::default() },
        WorldConfig { support: 300, ..WorldConfig::default() },
        WorldConfig { translation_passes: 2, ..WorldConfig::default() },
    ] {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
    let err = WorldConfig { rho: 1.5, ..WorldConfig::default() }.validate().unwrap_err();
    assert!(err.to_string().contains("rho"));
}

#[test]
fn instances_follow_their_concept() {
    let cfg = WorldConfig { visual_noise: 0.0, ..small_config(1) };
    let world = World::generate(&cfg).unwrap();
    let mut rng = stream(9, 9);
    let v = world.synthesize_frames("x", 4, &mut rng);
    let first = v.frames.row(0).to_vec();
    for r in 1..v.frames.rows() {
        assert_eq!(v.frames.row(r), first.as_slice());
    }
    for _ in 0..50 {
        let s = world.synthesize_caption(7, &mut rng);
        assert!((4..=12).contains(&s.len()));
        assert!(s.ids.iter().all(|t| world.supports[7].contains(t)));
    }
}

#[test]
fn frame_mean_converges() {
    let cfg = WorldConfig { frames: 1000, ..small_config(2) };
    let world = World::generate(&cfg).unwrap();
    let mut rng = stream(5, 5);
    let v = world.synthesize_frames("x", 11, &mut rng);
    let expect = world.concept_mean(11);
    let bound = 3.0 * cfg.visual_noise / (1000f64).sqrt();
    // independent recomputation of G·w_k from the generator columns
    let support = &world.supports[11];
    for (c, &e) in expect.iter().enumerate() {
        let direct: f64 = support.iter().map(|&t| world.generator.data()[c * cfg.vocab + t]).sum::<f64>() / 10.0;
        assert!((direct - e).abs() < 1e-12);
        let mean: f64 = (0..1000).map(|r| v.frames.get(r, c)).sum::<f64>() / 1000.0;
        assert!((mean - e).abs() < bound, "coordinate {c}");
    }
}

#[test]
fn channel_endpoints() {
    let world = World::generate(&small_config(4)).unwrap();
    let ch = &world.channel;
    let mut rng = stream(1, 1);
    let s = source(vec![5, 0, 199, 42, 42]);
    let t = ch.translate(&s, 0.0, &mut rng);
    assert_eq!(t.language, Language::Target);
    assert_eq!(t.ids, s.ids.iter().map(|&x| ch.forward[x]).collect::<Vec<_>>());

    for _ in 0..200 {
        let (t, stats, trace) = ch.translate_traced(&s, 1.0, &mut rng);
        assert_eq!(stats.substituted, 5);
        for (tok, origin) in t.ids.iter().zip(trace) {
            if let Some((i, _)) = origin {
                assert_ne!(*tok, ch.forward[s.ids[i]]);
            }
        }
        assert!(!t.ids.is_empty());
    }
}

#[test]
fn corruption_rate_concentrates() {
    let world = World::generate(&small_config(5)).unwrap();
    let mut rng = stream(2, 2);
    let sentences = random_sentences(&mut rng, 1000, 10, 200);
    let mut stats = ChannelStats::default();
    for s in &sentences {
        stats.absorb(world.channel.translate_with_stats(s, 0.3, &mut rng).1);
    }
    assert_eq!(stats.tokens, 10_000);
    let frac = stats.substituted as f64 / stats.tokens as f64;
    assert!((frac - 0.3).abs() < 0.02, "{frac}");
    let del = stats.deleted as f64 / stats.tokens as f64;
    assert!((del - 0.075).abs() < 0.015, "{del}");
}

#[test]
fn back_translation_statistics() {
    let world = World::generate(&small_config(6)).unwrap();
    let ch = &world.channel;
    let mut rng = stream(3, 3);
    let sentences = random_sentences(&mut rng, 1000, 10, 200);
    for s in sentences.iter().take(20) {
        assert_eq!(&ch.back_translate(s, 0.0, &mut rng).unwrap(), s);
    }
    let (mut survived, mut clean) = (0usize, 0usize);
    for s in &sentences {
        let (b, _, trace) = ch.chain_traced(s, 2, 0.3, &mut rng);
        assert_eq!(b.language, Language::Source);
        for (tok, origin) in b.ids.iter().zip(&trace) {
            if let Some((i, ok)) = origin {
                survived += 1;
                if *ok {
                    clean += 1;
                    assert_eq!(*tok, s.ids[*i]);
                }
            }
        }
    }
    let frac = clean as f64 / survived as f64;
    assert!((frac - 0.49).abs() < 0.03, "{frac}");

    let t = TokenSequence::new(Language::Target, vec![1]).unwrap();
    assert!(ch.back_translate(&t, 0.1, &mut rng).is_err());
}

#[test]
fn compound_translation() {
    let world = World::generate(&small_config(7)).unwrap();
    let ch = &world.channel;
    let s = source(vec![3, 1, 4, 1, 5, 9, 2, 6]);
    let mut r1 = stream(4, 4);
    let mut r2 = stream(4, 4);
    let once = ch.compound_translate(&s, 2, 0.4, &mut r1).unwrap();
    let t = ch.translate(&s, 0.4, &mut r2);
    assert_eq!(once, ch.translate(&t, 0.4, &mut r2));
    assert_eq!(ch.compound_translate(&s, 6, 0.0, &mut r1).unwrap(), s);
    assert!(ch.compound_translate(&s, 3, 0.1, &mut r1).is_err());
    assert!(ch.compound_translate(&s, 0, 0.1, &mut r1).is_err());

    let mut rng = stream(5, 5);
    let sentences = random_sentences(&mut rng, 1000, 8, 200);
    let corruption = |passes: usize, rng: &mut ChaCha8Rng| {
        let mut clean = 0usize;
        let mut total = 0usize;
        for s in &sentences {
            let (_, _, trace) = ch.chain_traced(s, passes, 0.2, rng);
            clean += trace.iter().filter(|o| matches!(o, Some((_, true)))).count();
            total += s.len();
        }
        1.0 - clean as f64 / total as f64
    };
    let c: Vec<f64> = [2, 4, 6].iter().map(|&p| corruption(p, &mut rng)).collect();
    assert!(c[0] <= c[1] && c[1] <= c[2], "{c:?}");
}

#[test]
fn dataset_construction() {
    let cfg = small_config(8);
    let (world, data) = build_dataset(&cfg).unwrap();
    assert_eq!(data.train.videos.len(), 20);
    assert_eq!(data.val.videos.len(), 6);
    assert_eq!(data.test.videos.len(), 6);
    assert_eq!(data.train.instances.len(), 60);
    let train_ids: HashSet<&str> = data.train.videos.iter().map(Video::id).collect();
    assert!(data.test.videos.iter().all(|v| !train_ids.contains(v.id())));
    for inst in &data.train.instances {
        assert_eq!(inst.source.language, Language::Source);
        assert_eq!(inst.target.language, Language::Target);
        assert_eq!(inst.back.as_ref().unwrap().language, Language::Source);
    }
    for inst in &data.test.instances {
        let concept = data.test.videos[inst.video].concept.unwrap();
        let images: HashSet<usize> = world.supports[concept].iter().map(|&t| world.channel.forward[t]).collect();
        assert!(inst.target.ids.iter().all(|t| images.contains(t)));
        assert_eq!(inst.translated_query(Role::Test), &inst.source);
    }
    let mut counts = vec![0; cfg.concepts];
    for v in &data.train.videos {
        counts[v.concept.unwrap()] += 1;
    }
    assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);

    let clean = build_dataset(&WorldConfig { rho: 0.0, ..cfg.clone() }).unwrap().1;
    for inst in &clean.train.instances {
        assert_eq!(inst.back.as_ref().unwrap(), &inst.source);
        assert_eq!(inst.target.ids, inst.source.ids.iter().map(|&t| world.channel.forward[t]).collect::<Vec<_>>());
    }
}

#[test]
fn within_concept_overlap_exceeds_cross_concept() {
    let (_, data) = build_dataset(&small_config(9)).unwrap();
    let bag = |s: &TokenSequence| s.ids.iter().copied().collect::<HashSet<_>>();
    let overlap = |a: &HashSet<usize>, b: &HashSet<usize>| a.intersection(b).count() as f64 / a.union(b).count() as f64;
    let split = &data.train;
    let (mut within, mut nw, mut cross, mut nc) = (0.0, 0, 0.0, 0);
    for (i, a) in split.instances.iter().enumerate() {
        for b in &split.instances[i + 1..] {
            let o = overlap(&bag(&a.source), &bag(&b.source));
            if split.videos[a.video].concept == split.videos[b.video].concept {
                within += o;
                nw += 1;
            } else {
                cross += o;
                nc += 1;
            }
        }
    }
    assert!(within / nw as f64 > cross / nc as f64);
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = build_dataset(&small_config(10)).unwrap();
    save_corpus(&data, dir.path()).unwrap();
    let back = load_corpus(dir.path()).unwrap();
    assert_eq!(back, data);

    let again = tempfile::tempdir().unwrap();
    save_corpus(&build_dataset(&small_config(10)).unwrap().1, again.path()).unwrap();
    for f in ["manifest.json", "features.tsv", "captions.tsv", "vocab_src.tsv", "vocab_tgt.tsv"] {
        let a = fs_read(dir.path().join(f));
        assert_eq!(a, fs_read(again.path().join(f)), "{f}");
    }
    let text = String::from_utf8(fs_read(dir.path().join("features.tsv"))).unwrap();
    let first = text.lines().next().unwrap();
    assert!(first.split('\t').nth(2).unwrap().split(' ').all(|x| x.contains('e')));
}

fn fs_read(p: std::path::PathBuf) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn load_reports_faults() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = build_dataset(&small_config(11)).unwrap();
    save_corpus(&data, dir.path()).unwrap();
    let fpath = dir.path().join("features.tsv");
    let text = std::fs::read_to_string(&fpath).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let cut = lines[2].rfind(' ').unwrap();
    lines[2].truncate(cut);
    std::fs::write(&fpath, lines.join("\n") + "\n").unwrap();
    match load_corpus(dir.path()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_corpus(empty.path()), Err(Error::MissingFile(_))));

    save_corpus(&data, dir.path()).unwrap();
    let cpath = dir.path().join("captions.tsv");
    let text = std::fs::read_to_string(&cpath).unwrap();
    std::fs::write(&cpath, text.replacen("\tsrc\t", "\txx\t", 1)).unwrap();
    match load_corpus(dir.path()) {
        Err(Error::Parse { line, message, .. }) => {
            assert_eq!(line, 1);
            assert!(message.contains("xx"));
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn batches_respect_the_video_constraint() {
    let (_, data) = build_dataset(&small_config(12)).unwrap();
    let split = &data.train;
    let n = split.instances.len();
    for b in [2, 5, 8, 32] {
        for epoch in 0..4 {
            let batches = make_batches(split, b, 7, epoch).unwrap();
            assert_eq!(batches, make_batches(split, b, 7, epoch).unwrap());
            let mut covered = HashSet::new();
            for batch in &batches {
                assert!(batch.len() >= 2 && batch.len() <= b);
                let videos: HashSet<usize> = batch.iter().map(|&i| split.video_of(i)).collect();
                assert_eq!(videos.len(), batch.len());
                for &i in batch {
                    assert!(covered.insert(i));
                }
            }
            assert!(covered.len() as f64 >= (1.0 - b as f64 / n as f64) * n as f64);
        }
    }
    assert_ne!(make_batches(split, 8, 7, 0).unwrap(), make_batches(split, 8, 7, 1).unwrap());
    assert!(make_batches(split, 1, 7, 0).is_err());
}

proptest! {
    #[test]
    fn channel_is_deterministic(seed in any::<u64>(), rho in 0.0..1.0f64, len in 1usize..20) {
        let world = World::generate(&small_config(0)).unwrap();
        let mut r = stream(seed, 0);
        let s = source((0..len).map(|_| r.random_range(0..200)).collect());
        let a = world.channel.translate(&s, rho, &mut stream(seed, 1));
        let b = world.channel.translate(&s, rho, &mut stream(seed, 1));
        prop_assert_eq!(&a, &b);
        prop_assert!(!a.ids.is_empty());
        prop_assert!(a.ids.iter().all(|&t| t < 200));
    }
}
