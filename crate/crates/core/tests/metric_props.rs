mod common;

use carecontext_core::embedding::MockEmbedder;
use carecontext_core::evaluation::metrics::{
    answer_correctness, answer_similarity, blend_correctness, factual_f1, ClaimCounts, DEFAULT_CORRECTNESS_WEIGHT,
};
use carecontext_core::llm::MockChat;
use carecontext_core::prompts::PromptSet;
use common::oracles::correctness_oracle;
use proptest::prelude::*;

fn words() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop::sample::select(vec!["epipen", "thigh", "keflex", "swelling", "lips", "pollen", "tablet", "inject", "doctor", "daily"]),
        1..12,
    )
    .prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn similarity_is_symmetric_and_reflexive(a in words(), b in words()) {
        let e = MockEmbedder::new(0, 256).unwrap();
        let ab = answer_similarity(&a, &b, &e).unwrap();
        let ba = answer_similarity(&b, &a, &e).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-9);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((answer_similarity(&a, &a, &e).unwrap() - 1.0).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn correctness_is_bounded_and_matches_definition(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50, sim in 0.0f64..=1.0) {
        let c = blend_correctness(factual_f1(ClaimCounts { tp, fp, fn_ }), sim, DEFAULT_CORRECTNESS_WEIGHT);
        prop_assert!((0.0..=1.0).contains(&c));
        prop_assert!((c - correctness_oracle(tp, fp, fn_, sim, DEFAULT_CORRECTNESS_WEIGHT)).abs() <= 1e-12);
    }

    #[test]
    fn more_supported_claims_never_lower_f1(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
        let more = factual_f1(ClaimCounts { tp: tp + 1, fp, fn_ });
        let fewer = factual_f1(ClaimCounts { tp, fp, fn_ });
        prop_assert!(more >= fewer);
    }
}

#[test]
fn worked_correctness_case() {
    let c = blend_correctness(factual_f1(ClaimCounts { tp: 2, fp: 1, fn_: 1 }), 0.8, DEFAULT_CORRECTNESS_WEIGHT);
    assert!((c - 0.70).abs() <= 1e-9);
}

#[test]
fn identical_answers_score_perfectly_with_mock_judge() {
    let text = "Press the orange tip against the outer thigh. Hold it for three seconds.";
    let r = answer_correctness(
        text,
        text,
        &MockChat::new("judge"),
        &MockEmbedder::new(0, 256).unwrap(),
        &PromptSet::default(),
        DEFAULT_CORRECTNESS_WEIGHT,
    )
    .unwrap();
    assert_eq!(r.counts.fp + r.counts.fn_, 0);
    assert!((r.score - 1.0).abs() <= 1e-9);
}
