use mrwkv_core::model::{Model, ModelConfig, ModelError, Need, State};
use mrwkv_core::rng::seeded;
use rand::Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        head_size: 8,
        d_ffn: 32,
        vocab_size: 30,
    }
}

fn random_ids(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = seeded(seed);
    (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

fn random_state(cfg: &ModelConfig, seed: u64, scale: f64) -> State<f64> {
    let mut rng = seeded(seed);
    let mut s = State::zeros(cfg);
    s.data.iter_mut().for_each(|v| *v = scale * rng.gen_range(-1.0..1.0));
    s
}

/// Relative error with a small floor so entries whose true gradient is
/// numerically zero do not divide by rounding noise.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

#[test]
fn gradients_match_central_differences() {
    let cfg = tiny();
    for seed in 0..3u64 {
        let model = Model::<f64>::random(cfg, seed, 0.8).unwrap();
        let state = random_state(&cfg, seed + 100, 0.3);
        let ids = random_ids(37, cfg.vocab_size, seed + 200);
        let mut rng = seeded(seed + 300);
        let mut mask: Vec<bool> = (0..ids.len()).map(|_| rng.gen_bool(0.6)).collect();
        mask[0] = false;
        mask[5] = true;
        let g = model.loss_and_grads(&ids, &mask, Some(&state), Need::ALL).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        let mut m = model.clone();
        for i in 0..m.params.len() {
            let orig = m.params[i];
            m.params[i] = orig + h;
            let lp = m.sequence_loss(&ids, &mask, Some(&state)).unwrap();
            m.params[i] = orig - h;
            let lm = m.sequence_loss(&ids, &mask, Some(&state)).unwrap();
            m.params[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let e = rel_err(g.params[i], fd);
            assert!(e < 1e-3, "seed {seed} param {i}: analytic {} numeric {fd}", g.params[i]);
            worst = worst.max(e);
        }
        let mut s = state.clone();
        for i in 0..s.data.len() {
            let orig = s.data[i];
            s.data[i] = orig + h;
            let lp = model.sequence_loss(&ids, &mask, Some(&s)).unwrap();
            s.data[i] = orig - h;
            let lm = model.sequence_loss(&ids, &mask, Some(&s)).unwrap();
            s.data[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(rel_err(g.state[i], fd) < 1e-3, "seed {seed} state {i}: analytic {} numeric {fd}", g.state[i]);
        }
        assert!(worst < 1e-3);
    }
}

#[test]
fn state_only_gradients_agree_with_full() {
    let cfg = tiny();
    let model = Model::<f64>::random(cfg, 9, 0.8).unwrap();
    let state = random_state(&cfg, 10, 0.3);
    let ids = random_ids(20, cfg.vocab_size, 11);
    let mask: Vec<bool> = (0..20).map(|t| t > 3).collect();
    let full = model.loss_and_grads(&ids, &mask, Some(&state), Need::ALL).unwrap();
    let only = model.loss_and_grads(&ids, &mask, Some(&state), Need::STATE).unwrap();
    assert!(only.params.is_empty());
    assert_eq!(full.state, only.state);
    assert_eq!(full.loss, only.loss);
    assert_eq!(full.targets, 16);
}

#[test]
fn sequential_matches_teacher_forced_in_f32() {
    for seed in 0..3u64 {
        let cfg = tiny();
        let model = Model::<f64>::random(cfg, seed, 0.8).unwrap().cast::<f32>();
        let state0 = random_state(&cfg, seed, 0.3).cast::<f32>();
        let ids = random_ids(50, cfg.vocab_size, seed);
        let (seq, seq_state) = model.forward_sequence(&ids, Some(&state0)).unwrap();
        let mut st = state0.clone();
        let mut worst = 0.0f32;
        for (t, &id) in ids.iter().enumerate() {
            let logits = model.forward_step(id, &mut st).unwrap();
            for (a, b) in logits.iter().zip(&seq[t]) {
                worst = worst.max((a - b).abs());
            }
        }
        for (a, b) in st.data.iter().zip(&seq_state.data) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst < 1e-5, "seed {seed}: {worst}");
    }
}

#[test]
fn reference_init_runs_and_prefix_is_stable() {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 64,
        head_size: 16,
        d_ffn: 128,
        vocab_size: 40,
    };
    let model = Model::<f32>::init(cfg, 5).unwrap();
    let ids = random_ids(30, cfg.vocab_size, 1);
    let (full, _) = model.forward_sequence(&ids, None).unwrap();
    let (prefix, _) = model.forward_sequence(&ids[..12], None).unwrap();
    assert_eq!(&full[..12], &prefix[..]);
    assert!(full.iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn future_tokens_do_not_change_past_logits() {
    let cfg = tiny();
    let model = Model::<f64>::random(cfg, 3, 0.8).unwrap();
    let mut ids = random_ids(25, cfg.vocab_size, 4);
    let (a, _) = model.forward_sequence(&ids, None).unwrap();
    ids[20] = (ids[20] + 1) % cfg.vocab_size as u32;
    let (b, _) = model.forward_sequence(&ids, None).unwrap();
    assert_eq!(&a[..20], &b[..20]);
    assert_ne!(a[20], b[20]);
}

#[test]
fn initial_state_changes_output() {
    let cfg = tiny();
    let model = Model::<f64>::random(cfg, 3, 0.8).unwrap();
    let ids = random_ids(5, cfg.vocab_size, 4);
    let (a, _) = model.forward_sequence(&ids, None).unwrap();
    let s = random_state(&cfg, 1, 0.5);
    let (b, _) = model.forward_sequence(&ids, Some(&s)).unwrap();
    assert_ne!(a[4], b[4]);
}

#[test]
fn zero_head_gives_uniform_loss() {
    let cfg = tiny();
    let mut model = Model::<f64>::random(cfg, 3, 0.8).unwrap();
    let head = model.layout().head;
    let len = cfg.d_model * cfg.vocab_size;
    model.params[head..head + len].iter_mut().for_each(|v| *v = 0.0);
    let ids = random_ids(10, cfg.vocab_size, 4);
    let mask: Vec<bool> = (0..10).map(|t| t > 0).collect();
    let loss = model.sequence_loss(&ids, &mask, None).unwrap();
    assert!((loss - (cfg.vocab_size as f64).ln()).abs() < 1e-12);
}

#[test]
fn empty_and_invalid_inputs() {
    let cfg = tiny();
    let model = Model::<f64>::random(cfg, 3, 0.8).unwrap();
    let s = random_state(&cfg, 1, 0.5);
    let (logits, out) = model.forward_sequence(&[], Some(&s)).unwrap();
    assert!(logits.is_empty());
    assert_eq!(out, s);
    assert_eq!(model.loss_and_grads(&[], &[], None, Need::ALL).unwrap_err(), ModelError::EmptyMask);
    assert_eq!(model.loss_and_grads(&[1, 2], &[false, false], None, Need::ALL).unwrap_err(), ModelError::EmptyMask);
    assert!(matches!(model.loss_and_grads(&[1, 2], &[true, true], None, Need::ALL), Err(ModelError::Shape(_))));
    assert!(matches!(model.forward_sequence(&[30], None), Err(ModelError::Token { id: 30, .. })));
    let mut st = State::zeros(&cfg);
    assert!(model.forward_step(99, &mut st).is_err());
}

#[test]
fn state_footprint_is_constant() {
    let cfg = tiny();
    let model = Model::<f32>::random(cfg, 3, 0.8).unwrap();
    let mut st = State::zeros(&cfg);
    let before = st.footprint_bytes();
    model.absorb(&random_ids(500, cfg.vocab_size, 1), &mut st).unwrap();
    assert_eq!(st.footprint_bytes(), before);
    assert!(st.data.iter().all(|v| v.is_finite()));
}

#[test]
fn identical_inputs_are_deterministic() {
    let cfg = tiny();
    let a = Model::<f64>::init(cfg, 7).unwrap();
    let b = Model::<f64>::init(cfg, 7).unwrap();
    assert_eq!(a.params, b.params);
    let ids = random_ids(10, cfg.vocab_size, 4);
    assert_eq!(a.forward_sequence(&ids, None).unwrap().0, b.forward_sequence(&ids, None).unwrap().0);
}

#[test]
fn sequential_matches_teacher_forced_in_f64() {
    let cfg = tiny();
    let model = Model::<f64>::random(cfg, 5, 0.8).unwrap();
    let ids = random_ids(40, cfg.vocab_size, 6);
    let (seq, _) = model.forward_sequence(&ids, None).unwrap();
    let mut st = State::zeros(&cfg);
    for (t, &id) in ids.iter().enumerate() {
        let logits = model.forward_step(id, &mut st).unwrap();
        for (a, b) in logits.iter().zip(&seq[t]) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn state_threads_across_calls() {
    let cfg = tiny();
    let model = Model::<f64>::random(cfg, 8, 0.8).unwrap();
    let ids = random_ids(40, cfg.vocab_size, 9);
    let (whole, end) = model.forward_sequence(&ids, None).unwrap();
    let (first, mid) = model.forward_sequence(&ids[..17], None).unwrap();
    let (second, end2) = model.forward_sequence(&ids[17..], Some(&mid)).unwrap();
    let joined: Vec<Vec<f64>> = first.into_iter().chain(second).collect();
    for (a, b) in whole.iter().flatten().zip(joined.iter().flatten()) {
        assert!((a - b).abs() < 1e-10);
    }
    for (a, b) in end.data.iter().zip(&end2.data) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn loss_gradient_ignores_later_tokens() {
    let cfg = tiny();
    let model = Model::<f64>::random(cfg, 8, 0.8).unwrap();
    // Tokens after position 6 are unique to the tail, so their embedding rows
    // only receive gradient through positions after the single target.
    let mut ids: Vec<u32> = (0..7).collect();
    ids.extend(20..28);
    let mut mask = vec![false; ids.len()];
    mask[6] = true;
    let g = model.loss_and_grads(&ids, &mask, None, Need::ALL).unwrap();
    let emb = model.layout().emb;
    for &id in &ids[6..] {
        let row = &g.params[emb + id as usize * cfg.d_model..emb + (id as usize + 1) * cfg.d_model];
        assert!(row.iter().all(|&v| v == 0.0), "token {id}");
    }
    let row0 = &g.params[emb..emb + cfg.d_model];
    assert!(row0.iter().any(|&v| v != 0.0));
}
