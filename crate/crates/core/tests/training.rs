use mrwkv_core::model::{Model, ModelConfig};
use mrwkv_core::rng::seeded;
use mrwkv_core::synth::MarkovChain;
use mrwkv_core::training::{evaluate_tokens, pretrain, windows, Example, FixedSource, TrainConfig};

/// Stationary pair distribution by Gaussian elimination on `π P = π`,
/// `Σ π = 1`.
fn stationary_by_solve(m: &MarkovChain) -> Vec<f64> {
    let k = m.k;
    let n = k * k;
    // rows: (Pᵀ - I) π = 0, with the last equation replaced by Σ π = 1
    let mut a = vec![vec![0.0; n + 1]; n];
    for x in 0..k {
        for y in 0..k {
            for (z, &p) in m.row(x, y).iter().enumerate() {
                a[y * k + z][x * k + y] += p;
            }
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] -= 1.0;
    }
    a[n - 1] = vec![1.0; n + 1];
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=n {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    (0..n).map(|i| a[i][n] / a[i][i]).collect()
}

fn entropy_oracle(m: &MarkovChain) -> f64 {
    let pi = stationary_by_solve(m);
    let mut h = 0.0;
    for x in 0..m.k {
        for y in 0..m.k {
            for &p in m.row(x, y) {
                if p > 0.0 {
                    h -= pi[x * m.k + y] * p * p.ln();
                }
            }
        }
    }
    h
}

#[test]
fn entropy_rate_matches_linear_solve() {
    for seed in 0..3 {
        let m = MarkovChain::random(6, 1.5, seed);
        assert!((m.entropy_rate() - entropy_oracle(&m)).abs() < 1e-10);
    }
}

#[test]
#[ignore = "slow: converges a 2-layer model on a Markov corpus"]
fn pretraining_reaches_source_entropy() {
    let chain = MarkovChain::random(8, 2.0, 7);
    let h = entropy_oracle(&chain);
    let mut rng = seeded(1);
    let train: Vec<Example> = (0..240).flat_map(|_| windows(&chain.sample(257, &mut rng), 128)).collect();
    let held: Vec<Example> = (0..16)
        .map(|_| {
            let ids = chain.sample(512, &mut rng);
            let mask = (0..ids.len()).map(|t| t >= 2).collect();
            Example { ids, mask }
        })
        .collect();
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 64,
        head_size: 32,
        d_ffn: 224,
        vocab_size: 8,
    };
    let mut model = Model::<f64>::init(cfg, 3).unwrap();
    let before = evaluate_tokens(&model, None, &held).unwrap();
    let tc = TrainConfig {
        lr: 3e-3,
        epochs: 10,
        batch_size: 8,
        seq_len: 128,
        weight_decay: 0.0,
        ..TrainConfig::pretrain()
    };
    let start = std::time::Instant::now();
    let mut src = FixedSource { examples: train, seed: 2 };
    pretrain(&mut model, &mut src, &tc, &mut |l| {
        if l.step % 20 == 0 {
            eprintln!("step {} loss {:.4} t {:.1}", l.step, l.loss, l.wall_time)
        }
    })
    .unwrap();
    let after = evaluate_tokens(&model, None, &held).unwrap();
    eprintln!("entropy {h:.4} before {before:.4} after {after:.4} in {:?}", start.elapsed());
    assert!(after - h < 0.1);
}
