use lwtta_core::data::{gen_synthetic, split_episodes, SyntheticTask, Tokenizer, ALPHABET};
use proptest::prelude::*;

fn small() -> Tokenizer {
    Tokenizer::fit_small_vocab([ALPHABET])
}

#[test]
fn small_vocab_is_compact() {
    assert!(small().vocab_size() <= 64);
}

#[test]
fn kv_answers_always_in_prompt() {
    for e in gen_synthetic(SyntheticTask::KvRecall, 500, 1, 3, &small()).unwrap() {
        assert!(e.raw_prompt.contains(&e.raw_answer), "{}", e.id);
    }
}

#[test]
fn pattern_answers_rarely_in_prompt() {
    let eps = gen_synthetic(SyntheticTask::PatternComplete, 1000, 2, 2, &small()).unwrap();
    let hits = eps.iter().filter(|e| e.raw_prompt.contains(&e.raw_answer)).count();
    assert!(hits * 20 < eps.len(), "{hits} of {}", eps.len());
}

#[test]
fn split_is_stable_under_reordering() {
    let eps = gen_synthetic(SyntheticTask::CopyTransform, 300, 3, 1, &small()).unwrap();
    let (_, held) = split_episodes(eps.clone(), 9);
    let mut rev = eps;
    rev.reverse();
    let (_, mut held_rev) = split_episodes(rev, 9);
    held_rev.reverse();
    assert_eq!(held, held_rev);
    assert!(!held.is_empty());
}

proptest! {
    #[test]
    fn byte_round_trip(s in "\\PC{0,40}") {
        let t = Tokenizer::Byte;
        prop_assert_eq!(t.decode(&t.encode(&s)).unwrap(), s);
    }

    #[test]
    fn small_vocab_round_trip(s in "[a-z0-9 :AKPQTVW]{0,40}") {
        let t = small();
        let ids = t.encode(&s);
        prop_assert!(ids.iter().all(|&i| i < t.vocab_size() && i != lwtta_core::data::UNK_TOKEN));
        prop_assert_eq!(t.decode(&ids).unwrap(), s);
    }

    #[test]
    fn generation_is_a_function_of_seed_and_index(seed in 0u64..500, n in 1usize..20) {
        let tok = small();
        for task in [SyntheticTask::KvRecall, SyntheticTask::CopyTransform, SyntheticTask::PatternComplete] {
            let a = gen_synthetic(task, n, seed, 1, &tok).unwrap();
            let b = gen_synthetic(task, n + 3, seed, 1, &tok).unwrap();
            prop_assert_eq!(&a[..], &b[..n]);
            for e in &a {
                prop_assert_eq!(&e.prompt_tokens, &tok.encode(&e.raw_prompt));
                prop_assert_eq!(&e.answer_tokens, &tok.encode(&e.raw_answer));
                prop_assert!(!e.answer_tokens.is_empty());
            }
        }
    }
}
