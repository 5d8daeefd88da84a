use mrwkv_core::metrics::{content_preservation, evaluate_pair, f1_notes, groove_pattern, groove_similarity, pche_difference, GrooveGrid, MetricConfig};
use mrwkv_core::midi::Note;
use mrwkv_core::tokenizer::TokenConfig;
use proptest::prelude::*;

const TPQ: u16 = 480;

fn bars(n: u32) -> Vec<(u32, u32)> {
    (0..n).map(|b| (b * 1920, (b + 1) * 1920)).collect()
}

fn notes(max_tick: u32) -> impl Strategy<Value = Vec<Note>> {
    proptest::collection::vec((21u8..109, 0..max_tick, 1u32..1920), 0..24)
        .prop_map(|v| v.into_iter().map(|(p, on, d)| Note::new(p, 80, on, d)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn self_comparison_is_perfect(a in notes(3840)) {
        let b = bars(2);
        let m = evaluate_pair(&a, &a, &b, TPQ, &TokenConfig::default(), &MetricConfig::default()).unwrap();
        prop_assert_eq!(m.cp, 1.0);
        prop_assert_eq!(m.gs, 1.0);
        prop_assert!(m.pche.map_or(true, |v| v == 0.0));
        prop_assert_eq!(m.f1, 1.0);
    }

    #[test]
    fn metrics_are_bounded_and_symmetric(a in notes(3840), c in notes(3840)) {
        let b = bars(2);
        let cfg = TokenConfig::default();
        let cp = content_preservation(&a, &c, &b, 16).unwrap().value;
        prop_assert!((0.0..=1.0 + 1e-12).contains(&cp));
        prop_assert!((cp - content_preservation(&c, &a, &b, 16).unwrap().value).abs() < 1e-12);
        for grid in [GrooveGrid::Tokenizer, GrooveGrid::Sixteen] {
            let ga = groove_pattern(&a, b[0], TPQ, grid, &cfg);
            let gc = groove_pattern(&c, b[0], TPQ, grid, &cfg);
            let gs = groove_similarity(&ga, &gc).unwrap();
            prop_assert!((0.0..=1.0).contains(&gs));
            prop_assert_eq!(gs, groove_similarity(&gc, &ga).unwrap());
        }
        if let Some(p) = pche_difference(&a, &c) {
            prop_assert!((0.0..=12f64.log2() + 1e-12).contains(&p));
        }
        let f = f1_notes(&a, &c, &b, TPQ, &cfg, false).value;
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(f, f1_notes(&c, &a, &b, TPQ, &cfg, false).value);
    }
}
