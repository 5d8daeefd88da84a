use mrwkv_core::midi::{read_midi, write_midi, Score};
use mrwkv_core::synth::random_score;
use mrwkv_core::tokenizer::{decode_score, encode_base, quantize_score, train_bpe, BaseVocab, TokenConfig, Vocabulary};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn base() -> BaseVocab {
    BaseVocab::new(TokenConfig::default())
}

/// Recounts every pair from scratch at each step.
fn reference_bpe(corpus: &[Vec<u32>], mergeable: impl Fn(u32) -> bool, base_len: u32, merges_wanted: usize) -> Vec<(u32, u32)> {
    let mut seqs = corpus.to_vec();
    let mut ok: Vec<bool> = (0..base_len).map(&mergeable).collect();
    let mut merges = Vec::new();
    while merges.len() < merges_wanted {
        let mut best: Option<((u32, u32), usize)> = None;
        let mut pairs: Vec<(u32, u32)> = Vec::new();
        for s in &seqs {
            for w in s.windows(2) {
                if ok[w[0] as usize] && ok[w[1] as usize] {
                    pairs.push((w[0], w[1]));
                }
            }
        }
        pairs.sort();
        let mut i = 0;
        while i < pairs.len() {
            let mut j = i;
            while j < pairs.len() && pairs[j] == pairs[i] {
                j += 1;
            }
            let c = j - i;
            if best.map_or(true, |(_, bc)| c > bc) {
                best = Some((pairs[i], c));
            }
            i = j;
        }
        let Some((pair, c)) = best else { break };
        if c < 2 {
            break;
        }
        let m = base_len + merges.len() as u32;
        merges.push(pair);
        ok.push(true);
        for s in &mut seqs {
            let mut out = Vec::with_capacity(s.len());
            let mut k = 0;
            while k < s.len() {
                if k + 1 < s.len() && (s[k], s[k + 1]) == pair {
                    out.push(m);
                    k += 2;
                } else {
                    out.push(s[k]);
                    k += 1;
                }
            }
            *s = out;
        }
    }
    merges
}

fn toy_corpus(seed: u64, alphabet: &[u32]) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..20)
        .map(|_| {
            let n = rng.gen_range(0..60);
            (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
        })
        .collect()
}

/// A few mergeable ids plus some structural ones.
fn alphabet(v: &Vocabulary) -> Vec<u32> {
    let merge: Vec<u32> = (0..v.len() as u32).filter(|&i| v.is_mergeable(i)).take(5).collect();
    let fixed: Vec<u32> = (0..v.len() as u32).filter(|&i| !v.is_mergeable(i)).take(2).collect();
    merge.into_iter().chain(fixed).collect()
}

#[test]
fn bpe_matches_reference_trainer() {
    let v = Vocabulary::new(base());
    let alpha = alphabet(&v);
    for seed in 0..8 {
        let corpus = toy_corpus(seed, &alpha);
        let (trained, report) = train_bpe(&corpus, base(), v.len() + 50).unwrap();
        let want = reference_bpe(&corpus, |i| v.is_mergeable(i), v.len() as u32, 50);
        assert_eq!(trained.merges(), &want[..], "seed {seed}");
        assert_eq!(report.exhausted, want.len() < 50);
    }
}

fn trained_vocab() -> Vocabulary {
    let v = Vocabulary::new(base());
    let corpus = toy_corpus(99, &alphabet(&v));
    train_bpe(&corpus, base(), v.len() + 40).unwrap().0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn bpe_round_trip_and_shortens(picks in proptest::collection::vec(0usize..7, 0..200)) {
        let v = trained_vocab();
        let alpha = alphabet(&v);
        let ids: Vec<u32> = picks.iter().map(|&i| alpha[i]).collect();
        let merged = v.apply(&ids).unwrap();
        prop_assert!(merged.len() <= ids.len());
        prop_assert_eq!(v.invert(&merged).unwrap(), ids);
    }

    #[test]
    fn bpe_is_idempotent(picks in proptest::collection::vec(0usize..7, 0..100)) {
        let v = trained_vocab();
        let alpha = alphabet(&v);
        let ids: Vec<u32> = picks.iter().map(|&i| alpha[i]).collect();
        let once = v.apply(&ids).unwrap();
        prop_assert_eq!(v.apply(&once).unwrap(), once);
    }
}

fn same_content(a: &Score, b: &Score) {
    assert_eq!(a.ticks_per_quarter, b.ticks_per_quarter);
    assert_eq!(a.tempo_map, b.tempo_map);
    assert_eq!(a.timesig_map, b.timesig_map);
    assert_eq!(a.tracks.len(), b.tracks.len());
    for (x, y) in a.tracks.iter().zip(&b.tracks) {
        assert_eq!(x.program, y.program);
        assert_eq!(x.notes, y.notes);
    }
}

#[test]
fn midi_round_trip_on_random_scores() {
    for seed in 0..50 {
        let s = random_score(seed);
        let back = read_midi(&write_midi(&s).unwrap()).unwrap();
        same_content(&s, &back);
    }
}

#[test]
fn quantization_is_idempotent_and_reencodes_exactly() {
    let b = base();
    for seed in 0..30 {
        let q = quantize_score(&random_score(seed), &b).unwrap();
        same_content(&q, &quantize_score(&q, &b).unwrap());
        let (tracks, _) = encode_base(&q, &b).unwrap();
        let back = decode_score(&tracks, &b, q.ticks_per_quarter).unwrap();
        let (again, _) = encode_base(&back, &b).unwrap();
        assert_eq!(tracks, again, "seed {seed}");
    }
}
