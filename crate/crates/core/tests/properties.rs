mod common;

use std::sync::OnceLock;

use aeval_core::claims::{
    expand_pairs, parse_claims, render_claims, reverse_augment, MultipleDependentPolicy,
    ReversalUnit,
};
use aeval_core::metric::{
    aggregate, evaluate_sequence, keystroke_charge, read_traces, write_traces, EvalOptions,
    FirstTokenMode,
};
use aeval_core::predict::{fit_ngram, NgramModel, Predictor, PredictorSession, ScriptedPredictor};
use aeval_core::token::{train_tokenizer, TokenId, Vocab, DEP_TAG};
use common::ClaimGen;
use proptest::prelude::*;

struct Fixture {
    vocab: Vocab,
    model: NgramModel,
    sequences: Vec<Vec<TokenId>>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let mut gen = ClaimGen::new(7);
        let texts: Vec<String> = (0..30)
            .flat_map(|_| {
                render_claims(&gen.claim_set(6))
                    .lines()
                    .map(str::to_owned)
                    .collect::<Vec<_>>()
            })
            .collect();
        let vocab = train_tokenizer(texts.iter().map(String::as_str), 500).unwrap();
        let sequences: Vec<Vec<TokenId>> = texts.iter().map(|t| vocab.encode(t).unwrap()).collect();
        let model = fit_ngram(&sequences, 3, 0.4, vocab.len()).unwrap();
        Fixture {
            vocab,
            model,
            sequences,
        }
    })
}

fn text_strategy() -> impl Strategy<Value = String> {
    let piece = prop_oneof![
        4 => "[a-z ,.;:0-9]{0,12}",
        2 => "\\PC{0,6}",
        1 => Just(DEP_TAG.to_owned()),
        1 => Just("<|start_of_claim|>".to_owned()),
        1 => Just("<|".to_owned()),
    ];
    prop::collection::vec(piece, 0..8).prop_map(|v| v.concat())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn encode_decode_round_trip(text in text_strategy()) {
        let v = &fixture().vocab;
        let tokens = v.encode(&text).unwrap();
        prop_assert_eq!(v.decode_all(&tokens).unwrap(), text.clone());
        let b = Vocab::byte_level();
        prop_assert_eq!(b.decode_all(&b.encode(&text).unwrap()).unwrap(), text);
    }

    #[test]
    fn tags_stay_atomic(prefix in "[a-z ]{0,10}", suffix in "[a-z ]{0,10}") {
        let v = &fixture().vocab;
        let tokens = v.encode(&format!("{prefix}{DEP_TAG}{suffix}")).unwrap();
        prop_assert_eq!(tokens.iter().filter(|&&t| t == v.tags().dep).count(), 1);
    }

    #[test]
    fn charge_is_monotone_in_rank(len in 1usize..40, r in 1u32..2000, better in 0u32..2000, cutoff in 1u32..20) {
        let r2 = r.saturating_sub(better).max(1);
        prop_assert!(keystroke_charge(r2, len, cutoff) <= keystroke_charge(r, len, cutoff));
        prop_assert!(keystroke_charge(r, len, cutoff) <= len as u64);
        prop_assert!(keystroke_charge(r, len, cutoff) >= 1);
    }

    #[test]
    fn ae_stays_in_unit_interval(ranks in prop::collection::vec(1u32..600, 1..30), free in any::<bool>()) {
        let f = fixture();
        let seq = &f.sequences[ranks.len() % f.sequences.len()];
        let n = seq.len().min(ranks.len() + 1);
        let ranks: Vec<u32> = ranks.iter().map(|&r| r.min(f.vocab.len() as u32)).collect();
        let p = ScriptedPredictor::new(ranks, f.vocab.len()).unwrap();
        let opts = EvalOptions {
            first_token: if free { FirstTokenMode::Free } else { FirstTokenMode::Manual },
            ..Default::default()
        };
        let t = evaluate_sequence(&p, &seq[..n], &f.vocab, "s", &opts).unwrap();
        t.check().unwrap();
        let b = aggregate(&[t]);
        prop_assert!(b.total_with <= b.total_without);
        prop_assert!((0.0..=1.0).contains(&b.ae_ratio));
        prop_assert_eq!(b.keys_top10 + b.keys_out + b.keys_first, b.total_with);
    }

    #[test]
    fn session_matches_direct_queries(idx in 0usize..1000, k in 1usize..12) {
        let f = fixture();
        let seq = &f.sequences[idx % f.sequences.len()];
        let mut session = PredictorSession::with_prompt(&f.model, &seq[..1]);
        for i in 1..seq.len() {
            let via_session = session.rank_and_topk(seq[i], k).unwrap();
            let direct = f.model.rank_and_topk(&seq[..i], seq[i], k).unwrap();
            prop_assert_eq!(via_session, direct);
            session.append(seq[i]);
        }
    }

    #[test]
    fn claim_sets_round_trip(seed in any::<u64>(), size in 1usize..15) {
        let claims = ClaimGen::new(seed).claim_set(size);
        prop_assert_eq!(parse_claims(&render_claims(&claims)).unwrap(), claims);
    }

    #[test]
    fn expansion_laws(seed in any::<u64>(), size in 1usize..15) {
        let claims = ClaimGen::new(seed).claim_set(size);
        let e = expand_pairs("p", &claims, MultipleDependentPolicy::Skip).unwrap();
        let single = claims.iter().filter(|c| c.depends_on.len() <= 1).count();
        let multiple = claims.iter().filter(|c| c.multiple_dependent).count();
        prop_assert_eq!(e.records.len(), single);
        prop_assert_eq!(e.skipped.len(), multiple);
        for r in &e.records {
            let want = usize::from(r.provenance.claims.len() == 2);
            prop_assert_eq!(r.text.matches(DEP_TAG).count(), want);
        }
        let strict = expand_pairs("p", &claims, MultipleDependentPolicy::Strict);
        prop_assert_eq!(strict.is_err(), multiple > 0);
    }

    #[test]
    fn reversal_is_involutive(seed in any::<u64>(), size in 1usize..10, char_unit in any::<bool>()) {
        let f = fixture();
        let unit = if char_unit { ReversalUnit::Char } else { ReversalUnit::Token };
        let claims = ClaimGen::new(seed).claim_set(size);
        let records = expand_pairs("p", &claims, MultipleDependentPolicy::Skip).unwrap().records;
        let once = reverse_augment(&records, &f.vocab, unit).unwrap();
        prop_assert_eq!(once.len(), 2 * records.len());
        let reversed = &once[records.len()..];
        prop_assert!(reversed.iter().all(|r| r.reversed));
        let twice = reverse_augment(reversed, &f.vocab, unit).unwrap();
        let back: Vec<_> = twice[reversed.len()..].iter().map(|r| (&r.text, &r.provenance)).collect();
        let orig: Vec<_> = records.iter().map(|r| (&r.text, &r.provenance)).collect();
        prop_assert_eq!(back, orig);
    }
}

#[test]
fn distributions_sum_to_one() {
    let f = fixture();
    let mut contexts = 0;
    'outer: for seq in &f.sequences {
        for end in 1..=seq.len() {
            let ctx = &seq[..end];
            let dist = f.model.full_distribution(ctx);
            let total: f64 = dist.iter().sum();
            assert!(
                (total - 1.0).abs() < 1e-9,
                "sum {total} for context {ctx:?}"
            );
            let ranked = f.model.next_distribution(ctx, f.vocab.len()).unwrap();
            assert_eq!(ranked.len(), f.vocab.len());
            assert!(ranked.windows(2).all(|w| w[0].prob >= w[1].prob));
            contexts += 1;
            if contexts == 1000 {
                break 'outer;
            }
        }
    }
    assert_eq!(contexts, 1000);
}

#[test]
fn traces_survive_serialization() {
    let f = fixture();
    let opts = EvalOptions {
        capture_topk: Some(5),
        ..Default::default()
    };
    let traces: Vec<_> = f.sequences[..10]
        .iter()
        .enumerate()
        .map(|(i, s)| evaluate_sequence(&f.model, s, &f.vocab, &format!("s{i}"), &opts).unwrap())
        .collect();
    let mut buf = Vec::new();
    write_traces(&mut buf, &traces).unwrap();
    let back = read_traces(buf.as_slice()).unwrap();
    assert_eq!(back, traces);
    assert_eq!(aggregate(&back), aggregate(&traces));
}

#[test]
fn model_json_round_trip_preserves_ranks() {
    let f = fixture();
    let back = NgramModel::from_json(&f.model.to_json()).unwrap();
    for seq in f.sequences.iter().take(20) {
        for i in 1..seq.len() {
            assert_eq!(
                f.model.rank_and_topk(&seq[..i], seq[i], 3).unwrap(),
                back.rank_and_topk(&seq[..i], seq[i], 3).unwrap()
            );
        }
    }
}
