use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffmath::{check_gradients, DEFAULT_STEP, DEFAULT_TOLERANCE};

fn small_dims() -> ModelDims {
    ModelDims {
        frame_dim: 8,
        word_dim: 8,
        common_dim: 6,
        heads: 2,
        ffn_dim: 12,
        src_vocab: 10,
        tgt_vocab: 10,
        max_positions: 8,
        max_frames: 8,
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn embed_tokens_contract() {
    let mp = ModelParams::init(small_dims(), 1).unwrap();
    let text = &mp.model.text;
    let seq = TokenSequence::new(Language::Target, vec![3, 1, 4]).unwrap();
    let mut tape = Tape::new();
    let p = mp.bind_frozen(&mut tape);
    let a = text.embed_tokens(&mut tape, &p, &seq).unwrap();
    let b = text.embed_tokens(&mut tape, &p, &seq).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
    assert_eq!(tape.value(a).shape(), &[3, 8]);

    let one = TokenSequence::new(Language::Source, vec![9]).unwrap();
    let m = text.embed_tokens(&mut tape, &p, &one).unwrap();
    assert_eq!(tape.value(m).shape(), &[1, 8]);

    let bad = TokenSequence::new(Language::Source, vec![10]).unwrap();
    assert!(text.embed_tokens(&mut tape, &p, &bad).is_err());
    assert!(TokenSequence::new(Language::Source, vec![]).is_err());
}

#[test]
fn encode_text_shape_determinism_and_gradient() {
    let mp = ModelParams::init(small_dims(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = random_matrix(&mut rng, 5, 8);
    let mut tape = Tape::new();
    let p = mp.bind_frozen(&mut tape);
    let mv = tape.constant(m.clone());
    let c1 = mp.model.text.encode_text(&mut tape, &p, mv).unwrap();
    let c2 = mp.model.text.encode_text(&mut tape, &p, mv).unwrap();
    assert_eq!(tape.value(c1).numel(), 6);
    assert_eq!(tape.value(c1), tape.value(c2));

    let wrong = tape.constant(random_matrix(&mut rng, 2, 7));
    assert!(mp.model.text.encode_text(&mut tape, &p, wrong).is_err());

    let report = check_gradients(
        |t, v| {
            let p = mp.bind_frozen(t);
            let c = mp.model.text.encode_text(t, &p, v[0])?;
            t.sum(c)
        },
        &[m],
        DEFAULT_STEP,
        DEFAULT_TOLERANCE,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn encode_video_shape_and_gradient() {
    let mp = ModelParams::init(small_dims(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let p = mp.bind_frozen(&mut tape);
    let single = tape.constant(random_matrix(&mut rng, 1, 8));
    let v = mp.model.visual.encode_video(&mut tape, &p, single).unwrap();
    assert_eq!(tape.value(v).numel(), 6);
    let wrong = tape.constant(random_matrix(&mut rng, 3, 5));
    assert!(mp.model.visual.encode_video(&mut tape, &p, wrong).is_err());

    let u = random_matrix(&mut rng, 4, 8);
    let report = check_gradients(
        |t, v| {
            let p = mp.bind_frozen(t);
            let e = mp.model.visual.encode_video(t, &p, v[0])?;
            t.sum(e)
        },
        &[u],
        DEFAULT_STEP,
        DEFAULT_TOLERANCE,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn cross_attention_single_key_is_exact() {
    let mp = ModelParams::init(small_dims(), 6).unwrap();
    let text = &mp.model.text;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ms = random_matrix(&mut rng, 4, 8);
    let mt = random_matrix(&mut rng, 1, 8);
    let w = text.cross_attention_weights(&mp.params, &ms, &mt).unwrap();
    assert!(w.data().iter().all(|&x| x == 1.0));

    let mut tape = Tape::new();
    let p = mp.bind_frozen(&mut tape);
    let src = TokenBatch {
        reps: tape.constant(ms.clone()),
        segments: vec![Segment::new(0, 4)],
    };
    let tgt = TokenBatch {
        reps: tape.constant(mt.clone()),
        segments: vec![Segment::new(0, 1)],
    };
    let hc = text.cross_attend(&mut tape, &p, &src, &tgt).unwrap();
    assert_eq!(tape.value(hc).shape(), &[4, 8]);
    // every query row sees only W_V · token, so h^C rows all equal Norm(FFN(W_V token))
    let projected = tape.matmul(tgt.reps, p.var(text.cross_value)).unwrap();
    let expect = text.block.ffn_then_norm(&mut tape, &p, projected).unwrap();
    for r in 0..4 {
        assert_eq!(tape.value(hc).row(r), tape.value(expect).row(0));
    }
}

#[test]
fn cross_attention_duplicate_keys_and_normalization() {
    let mp = ModelParams::init(small_dims(), 8).unwrap();
    let text = &mp.model.text;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ms = random_matrix(&mut rng, 3, 8);
    let mt = random_matrix(&mut rng, 1, 8);
    let doubled = Tensor::from_rows(&[mt.row(0).to_vec(), mt.row(0).to_vec(), mt.row(0).to_vec()]).unwrap();

    let mut tape = Tape::new();
    let p = mp.bind_frozen(&mut tape);
    let src = TokenBatch {
        reps: tape.constant(ms.clone()),
        segments: vec![Segment::new(0, 3)],
    };
    let one = TokenBatch {
        reps: tape.constant(mt),
        segments: vec![Segment::new(0, 1)],
    };
    let three = TokenBatch {
        reps: tape.constant(doubled),
        segments: vec![Segment::new(0, 3)],
    };
    let a = text.cross_attend(&mut tape, &p, &src, &one).unwrap();
    let b = text.cross_attend(&mut tape, &p, &src, &three).unwrap();
    for (x, y) in tape.value(a).data().iter().zip(tape.value(b).data()) {
        assert!((x - y).abs() < 1e-12);
    }

    for trial in 0..20 {
        let n = 1 + trial % 5;
        let m = 1 + (trial * 3) % 7;
        let w = text
            .cross_attention_weights(&mp.params, &random_matrix(&mut rng, n, 8), &random_matrix(&mut rng, m, 8))
            .unwrap();
        for r in 0..n {
            let total: f64 = w.row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn teacher_shares_projection_head() {
    let mut mp = ModelParams::init(small_dims(), 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let hc = random_matrix(&mut rng, 1, 8);
    let run = |mp: &ModelParams| {
        let mut tape = Tape::new();
        let p = mp.bind_frozen(&mut tape);
        let h = tape.constant(hc.clone());
        let teacher = mp
            .model
            .text
            .pool_project_teacher(&mut tape, &p, h, &[Segment::new(0, 1)])
            .unwrap();
        let pooled = tape.mean_pool_rows(h).unwrap();
        let row = tape.stack_rows(&[pooled]).unwrap();
        let direct = mp.model.text.head.forward(&mut tape, &p, row).unwrap();
        assert_eq!(tape.value(teacher).data(), tape.value(direct).data());
        assert_eq!(tape.value(teacher).numel(), 6);
        let m = tape.constant(hc.clone());
        let student = mp.model.text.encode_text(&mut tape, &p, m).unwrap();
        (tape.value(teacher).data().to_vec(), tape.value(student).data().to_vec())
    };
    let (t0, s0) = run(&mp);
    let bias = mp.model.text.head.second.bias;
    mp.params.get_mut(bias).data_mut()[0] += 0.5;
    let (t1, s1) = run(&mp);
    assert_ne!(t0[0], t1[0]);
    assert_ne!(s0[0], s1[0]);
}

#[test]
fn branches_are_one_function() {
    let mp = ModelParams::init(small_dims(), 12).unwrap();
    let text = &mp.model.text;
    let tgt = TokenSequence::new(Language::Target, vec![1, 2, 3, 4]).unwrap();
    let src = TokenSequence::new(Language::Source, vec![5, 6]).unwrap();
    let mut tape = Tape::new();
    let p = mp.bind_frozen(&mut tape);
    let alone = text.embed_batch(&mut tape, &p, &[&tgt]).unwrap();
    let alone = text.encode(&mut tape, &p, &alone).unwrap();
    let mixed = text.embed_batch(&mut tape, &p, &[&src, &tgt, &src]).unwrap();
    let mixed = text.encode(&mut tape, &p, &mixed).unwrap();
    assert_eq!(tape.value(alone).row(0), tape.value(mixed).row(1));
    assert!(tape.value(mixed).is_finite());
}

#[test]
fn initialization_is_seeded_and_bounded() {
    let dims = ModelDims::default();
    let a = ModelParams::init(dims, 42).unwrap();
    let b = ModelParams::init(dims, 42).unwrap();
    let c = ModelParams::init(dims, 43).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);

    // Closed-form count: per transformer block of width w with ffn f:
    // 4w² (q,k,v,out) + w (attn bias) + 4w (two norms) + 2wf + f + w (ffn).
    let (du, dw, d, f) = (32usize, 32usize, 32usize, 64usize);
    let dh = 2 * d;
    let block = |w: usize| 4 * w * w + w + 4 * w + 2 * w * f + f + w;
    let head = |w: usize| w * dh + dh + dh * d + d;
    let expected = block(du) + head(du)            // visual
        + 400 * dw + 32 * dw                       // token + position tables
        + block(dw) + head(dw) + 3 * dw * dw       // text + cross-attention
        + dw * 16 + 16 + 16 + 1; // discriminator
    assert_eq!(a.params.scalar_count(), expected);
    assert_eq!(dims.parameter_count(), expected);

    for (name, t) in a.params.iter() {
        if name.ends_with(".gain") {
            assert!(t.data().iter().all(|&x| x == 1.0));
            continue;
        }
        let fan_in = if t.shape().len() == 2 { t.shape()[0] } else { 1 };
        let bound = if name.starts_with("text.tokens") || name.starts_with("text.positions") {
            0.1 / (dw as f64).sqrt()
        } else {
            1.0 / (fan_in as f64).sqrt()
        };
        assert!(t.data().iter().all(|x| x.abs() <= bound), "{name}");
    }
}

#[test]
fn invalid_dims_rejected() {
    let mut dims = small_dims();
    dims.heads = 3;
    assert!(ModelParams::init(dims, 0).is_err());
    dims.heads = 0;
    assert!(ModelParams::init(dims, 0).is_err());
}

#[test]
fn frame_positions_alternate_sin_and_cos() {
    let t = sinusoidal_positions(3, 4);
    let a = POSITION_AMPLITUDE;
    assert_eq!(t.row(0), &[0.0, a, 0.0, a]);
    let r = t.row(2);
    assert!((r[0] - a * 2f64.sin()).abs() < 1e-15);
    assert!((r[1] - a * 2f64.cos()).abs() < 1e-15);
    assert!((r[2] - a * (2.0 / 100.0f64).sin()).abs() < 1e-15);
    assert!(t.data().iter().all(|x| x.abs() <= a));
}
