use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::relattn::AttnParams;

fn small(n_layers: usize, l: usize, m: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        n_layers,
        d_model: 16,
        n_heads: 2,
        d_head: 8,
        d_ff: 24,
        segment_len: l,
        mem_len_train: m,
        mem_len_eval: m,
        ..ModelConfig::default()
    }
}

/// Random weights everywhere, including the zero-initialized biases, so
/// every parameter class matters.
fn random_model(cfg: ModelConfig, seed: u64) -> Model {
    let mut model = Model::new(cfg).unwrap();
    randomize(&mut model.params, 0.3, seed);
    for layer in &mut model.params.layers {
        for x in layer.ln1_gain.data_mut().iter_mut().chain(layer.ln2_gain.data_mut()) {
            *x += 1.0;
        }
    }
    model
}

fn tokens(rng: &mut ChaCha8Rng, n: usize, v: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..v)).collect()
}

#[test]
fn init_is_deterministic() {
    let cfg = small(2, 4, 4);
    assert_eq!(ModelParams::init(&cfg, 5).unwrap(), ModelParams::init(&cfg, 5).unwrap());
    assert_ne!(ModelParams::init(&cfg, 5).unwrap(), ModelParams::init(&cfg, 6).unwrap());
}

#[test]
fn init_distribution() {
    let cfg = ModelConfig::default();
    let p = init_model(&cfg, 1).unwrap();
    for layer in &p.layers {
        let AttnParams::Relative(a) = &layer.attn else {
            panic!("relative expected")
        };
        assert!(a.u.data().iter().all(|&x| x == 0.0));
        assert!(a.v.data().iter().all(|&x| x == 0.0));
        assert!(layer.ln1_gain.data().iter().all(|&x| x == 1.0));
        assert!(layer.ln2_bias.data().iter().all(|&x| x == 0.0));
        assert!(a.w_q.data().iter().all(|x| x.abs() <= 2.0 * INIT_STD));
        assert_ne!(a.w_k_e, a.w_k_r);
    }
    let e = p.embedding.data();
    let mean = e.iter().sum::<f64>() / e.len() as f64;
    let var = e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / e.len() as f64;
    // a normal truncated at 2σ has std ≈ 0.88σ
    assert!(mean.abs() < 2e-3, "{mean}");
    assert!((var.sqrt() - 0.88 * INIT_STD).abs() < 2e-3, "{}", var.sqrt());
}

#[test]
fn param_count_formula_matches_enumeration() {
    let cfg = ModelConfig {
        vocab_size: 16,
        n_layers: 2,
        d_model: 32,
        n_heads: 2,
        d_head: 16,
        d_ff: 64,
        ..ModelConfig::default()
    };
    let p = init_model(&cfg, 0).unwrap();
    assert_eq!(cfg.param_count(), 19536);
    assert_eq!(p.count(), cfg.param_count());
    for (enc, tie) in [(Encoding::Absolute, true), (Encoding::Relative, false), (Encoding::Absolute, false)] {
        let c = ModelConfig {
            encoding: enc,
            tie_embeddings: tie,
            ..cfg.clone()
        };
        assert_eq!(init_model(&c, 0).unwrap().count(), c.param_count());
    }
}

#[test]
fn invalid_dims_are_config_errors() {
    let cfg = ModelConfig {
        n_heads: 3,
        ..ModelConfig::default()
    };
    assert!(matches!(init_model(&cfg, 0), Err(Error::Config(_))));
}

#[test]
fn out_of_vocab_token() {
    let model = Model::new(small(1, 4, 0)).unwrap();
    let err = model.forward_segment(&[1, 11], &model.empty_memory(), Mode::Eval).unwrap_err();
    assert!(matches!(err, Error::Vocab { token: 11, vocab: 11 }));
}

#[test]
fn empty_memory_is_standalone() {
    let model = random_model(small(2, 6, 6), 1);
    let toks = [3, 1, 4, 1, 5, 9];
    let with_empty = model.forward_segment(&toks, &model.empty_memory(), Mode::Eval).unwrap();
    let no_rec = Model::from_params(
        ModelConfig {
            recurrence: false,
            ..model.config.clone()
        },
        model.params.clone(),
    )
    .unwrap();
    let plain = no_rec.forward_segment(&toks, &no_rec.empty_memory(), Mode::Eval).unwrap();
    assert_eq!(with_empty.logits, plain.logits);
    assert_eq!(with_empty.logits.shape(), &[6, 11]);
    assert!(plain.memory.is_empty());
}

/// Runs `[s_{τ-1}, s_τ, s_{τ+1}]` with carried memory and returns the logits
/// of `s_{τ+1}` together with a fresh forward over `[s_τ ∘ s_{τ+1}]`
/// restricted to its last `L` rows.
fn rollout_vs_concat(n_layers: usize, seed: u64) -> (Tensor, Tensor) {
    let l = 5;
    let model = random_model(small(n_layers, l, l), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let toks = tokens(&mut rng, 3 * l, 11);
    let mut mem = model.empty_memory();
    let mut last = None;
    for s in toks.chunks(l) {
        let out = model.forward_segment(s, &mem, Mode::Eval).unwrap();
        mem = out.memory;
        last = Some(out.logits);
    }
    let long = Model::from_params(
        ModelConfig {
            segment_len: 2 * l,
            ..model.config.clone()
        },
        model.params.clone(),
    )
    .unwrap();
    let full = long.forward_segment(&toks[l..], &long.empty_memory(), Mode::Eval).unwrap();
    (last.unwrap(), full.logits.slice_rows(l, l).unwrap())
}

#[test]
fn single_layer_memory_matches_full_context() {
    for seed in 0..3 {
        let (xl, full) = rollout_vs_concat(1, seed);
        assert!(xl.max_abs_diff(&full) < 1e-10);
    }
}

#[test]
fn two_layers_shift_one_layer_per_segment() {
    for seed in 0..3 {
        let (xl, full) = rollout_vs_concat(2, seed);
        assert!(xl.max_abs_diff(&full) > 1e-6);
    }
}

#[test]
fn memory_length_tracks_positions_seen() {
    let model = random_model(small(2, 4, 7), 5);
    let mut mem = model.empty_memory();
    let mut seen = 0;
    for len in [4, 4, 1, 3, 4] {
        let toks = vec![2; len];
        mem = model.forward_segment(&toks, &mem, Mode::Eval).unwrap().memory;
        seen += len;
        assert_eq!(mem.len(), seen.min(7));
        assert_eq!(mem.n_layers(), 2);
    }
}

#[test]
fn memory_caches_layer_inputs() {
    let model = random_model(small(2, 4, 4), 6);
    let toks = [1, 2, 3, 4];
    let out = model.forward_segment(&toks, &model.empty_memory(), Mode::Eval).unwrap();
    // layer 0 memory is the scaled embedding of the segment
    let scale = (16f64).sqrt();
    for (i, &t) in toks.iter().enumerate() {
        for (a, b) in out.memory.layer(0).row(i).iter().zip(model.params.embedding.row(t)) {
            assert_eq!(*a, b * scale);
        }
    }
}

#[test]
fn segment_loss_modes() {
    let v = 11;
    let logits = Tensor::zeros(&[4, v]);
    let out = LMOutput {
        logits,
        memory: MemoryState::empty(0, 2),
        nll: None,
    };
    let loss = segment_loss(&out, &[0, 1, 2, 3], LossMode::Full).unwrap();
    assert!((loss.data()[0] - (v as f64).ln()).abs() < 1e-12);

    let mut logits = Tensor::zeros(&[5, 3]);
    for i in 0..5 {
        logits.set(i, 0, i as f64);
    }
    let out = LMOutput {
        logits,
        memory: MemoryState::empty(0, 2),
        nll: None,
    };
    let nll = token_nll(&out.logits, &[0; 5]).unwrap();
    let half = segment_loss(&out, &[0; 5], LossMode::Half).unwrap().data()[0];
    assert!((half - (nll[3] + nll[4]) / 2.0).abs() < 1e-15);
}

#[test]
fn effective_context_boundary() {
    // reach of the last query is N·M + L − 1 positions back
    let (n, l, m) = (2, 4, 4);
    let model = random_model(small(n, l, m), 7);
    let segs = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let base = tokens(&mut rng, segs * l, 11);
    let run = |toks: &[usize]| {
        let mut mem = model.empty_memory();
        let mut last = None;
        for s in toks.chunks(l) {
            let out = model.forward_segment(s, &mem, Mode::Eval).unwrap();
            mem = out.memory;
            last = Some(out.logits);
        }
        let logits = last.unwrap();
        logits.row(l - 1).to_vec()
    };
    let reference = run(&base);
    let last = segs * l - 1;
    let reach = n * m + l - 1;
    let perturbed_at = |dist: usize| {
        let mut t = base.clone();
        t[last - dist] = (t[last - dist] + 1) % 11;
        run(&t)
    };
    assert_ne!(perturbed_at(reach), reference);
    assert_eq!(perturbed_at(reach + 1), reference);
    assert_eq!(perturbed_at(reach + 3), reference);

    let no_rec = Model::from_params(
        ModelConfig {
            recurrence: false,
            ..model.config.clone()
        },
        model.params.clone(),
    )
    .unwrap();
    let run_plain = |toks: &[usize]| {
        no_rec
            .forward_segment(&toks[toks.len() - l..], &no_rec.empty_memory(), Mode::Eval)
            .unwrap()
            .logits
            .row(l - 1)
            .to_vec()
    };
    let plain_ref = run_plain(&base);
    for dist in l..segs * l {
        let mut t = base.clone();
        t[last - dist] = (t[last - dist] + 1) % 11;
        assert_eq!(run_plain(&t), plain_ref);
    }
    let mut t = base.clone();
    t[last - (l - 1)] = (t[last - (l - 1)] + 1) % 11;
    assert_ne!(run_plain(&t), plain_ref);
}

#[test]
fn stop_gradient_through_three_segments() {
    let l = 4;
    let model = random_model(small(2, l, l), 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let toks = tokens(&mut rng, 3 * l + 1, 11);

    // one tape for the whole rollout; memory stays attached to history
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, true).unwrap();
    let f1 = model.forward_on_tape(&mut tape, &vars, &toks[..l], &[], None).unwrap();
    let f2 = model.forward_on_tape(&mut tape, &vars, &toks[l..2 * l], &f1.hidden, None).unwrap();
    let f3 = model.forward_on_tape(&mut tape, &vars, &toks[2 * l..3 * l], &f2.hidden, None).unwrap();
    let loss = tape
        .cross_entropy(f3.logits, &toks[2 * l + 1..3 * l + 1], &[true; 4])
        .unwrap();
    tape.backward(loss).unwrap();
    for h in f1.hidden.iter().chain(&f2.hidden) {
        assert!(tape.requires_grad(*h));
        assert!(tape.grad(*h).is_none(), "gradient leaked into memory");
    }
    assert!(tape.grad(f1.logits).is_none());
    let rollout: Vec<Vec<f64>> = vars.named().iter().map(|(_, v)| tape.grad(**v).unwrap().to_vec()).collect();

    // same segment with memory handed in as detached constants
    let mem = model.forward_segment(&toks[..l], &model.empty_memory(), Mode::Train).unwrap().memory;
    let mem = model.forward_segment(&toks[l..2 * l], &mem, Mode::Train).unwrap().memory;
    let mut tape2 = Tape::new();
    let vars2 = model.params.bind(&mut tape2, true).unwrap();
    let mems: Vec<Var> = mem.layers().iter().map(|t| tape2.constant(t.clone()).unwrap()).collect();
    let f = model.forward_on_tape(&mut tape2, &vars2, &toks[2 * l..3 * l], &mems, None).unwrap();
    let loss2 = tape2
        .cross_entropy(f.logits, &toks[2 * l + 1..3 * l + 1], &[true; 4])
        .unwrap();
    tape2.backward(loss2).unwrap();
    let detached: Vec<Vec<f64>> = vars2.named().iter().map(|(_, v)| tape2.grad(**v).unwrap().to_vec()).collect();
    assert_eq!(rollout, detached);
}

#[test]
fn absolute_model_runs_and_reuses_positions() {
    let cfg = ModelConfig {
        encoding: Encoding::Absolute,
        ..small(1, 4, 4)
    };
    let model = random_model(cfg, 11);
    let toks = [1, 2, 3, 4];
    let a = model.forward_segment(&toks, &model.empty_memory(), Mode::Eval).unwrap();
    // the cached inputs of two identical segments are identical, positions
    // included
    let b = model.forward_segment(&toks, &a.memory, Mode::Eval).unwrap();
    assert_eq!(a.memory.layer(0), b.memory.layer(0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn causality_end_to_end(seed in any::<u64>(), pos in 0usize..6, mem_len in 0usize..5) {
        let model = random_model(small(2, 6, mem_len), seed % 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prev = tokens(&mut rng, 6, 11);
        let toks = tokens(&mut rng, 6, 11);
        let mem = model.forward_segment(&prev, &model.empty_memory(), Mode::Eval).unwrap().memory;
        let base = model.forward_segment(&toks, &mem, Mode::Eval).unwrap().logits;
        let mut changed = toks.clone();
        changed[pos] = (changed[pos] + 1 + rng.random_range(0..10)) % 11;
        let other = model.forward_segment(&changed, &mem, Mode::Eval).unwrap().logits;
        for i in 0..pos {
            prop_assert_eq!(base.row(i), other.row(i));
        }
    }
}
