mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use setexp::corpus::{Entity, Query, Vocabulary};
use setexp::decoder::{
    decode, exhaustive_decode, DecodeOptions, ScorerError, SeededScorer, Step, TokenScorer, DEFAULT_ORACLE_CAP,
};
use setexp::PrefixTrie;

use common::{query_with_seeds, random_vocab};

fn options(width: usize, num_candidates: usize) -> DecodeOptions {
    DecodeOptions {
        width,
        num_candidates,
        include_seeds: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decoded_candidates_are_vocabulary_entities(seed in any::<u64>(), width in 1usize..8, want in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = random_vocab(&mut rng, 60);
        let trie = PrefixTrie::build(&vocab).unwrap();
        let query = query_with_seeds(&vocab, 3);
        let set = decode::<f64, _>(&query, &trie, &SeededScorer::new(seed), options(width, want)).unwrap();
        let admissible = vocab.len() - 3;
        prop_assert_eq!(set.len(), want.min(admissible));
        let mut ids: Vec<_> = set.ids().collect();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), set.len());
        for c in &set.entities {
            prop_assert!(vocab.contains(&c.id));
            prop_assert!(!query.seeds.contains(&c.id));
        }
    }

    #[test]
    fn full_width_matches_exhaustive(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = random_vocab(&mut rng, 80);
        let trie = PrefixTrie::build(&vocab).unwrap();
        let query = query_with_seeds(&vocab, 3);
        let scorer = SeededScorer::new(seed ^ 7);
        let beam = decode::<f64, _>(&query, &trie, &scorer, options(vocab.len(), 20)).unwrap();
        let exact = exhaustive_decode::<f64, _>(&query, &trie, &scorer, DEFAULT_ORACLE_CAP, false).unwrap();
        let top: Vec<_> = exact.entities.iter().take(20).cloned().collect();
        prop_assert_eq!(beam.entities, top);
    }

    /// The best candidate found with the full width is never worse than the
    /// best found with any narrower beam.
    #[test]
    fn full_width_dominates_narrow_beams(seed in any::<u64>(), width in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = random_vocab(&mut rng, 60);
        let trie = PrefixTrie::build(&vocab).unwrap();
        let query = query_with_seeds(&vocab, 3);
        let scorer = SeededScorer::new(seed);
        let narrow = decode::<f64, _>(&query, &trie, &scorer, options(width, 1)).unwrap();
        let full = decode::<f64, _>(&query, &trie, &scorer, options(vocab.len(), 1)).unwrap();
        prop_assert!(full.entities[0].score >= narrow.entities[0].score);
    }
}

/// Fixed log-probabilities per (prefix, step).
struct TableScorer;

impl TokenScorer<f64> for TableScorer {
    fn score(&self, _: &Query, prefix: &[&str], allowed: &[Step<'_>]) -> Result<Vec<f64>, ScorerError> {
        Ok(allowed
            .iter()
            .map(|step| match (prefix, step) {
                ([], Step::Token("a")) => -0.1,
                ([], Step::Token("b")) => -0.2,
                (["a"], Step::Token("a1")) => -1.0,
                (["b"], Step::Token(_)) => -0.85,
                ([_, "a1"], Step::End) => 0.0,
                (_, Step::End) => -5.0,
                _ => -10.0,
            })
            .collect())
    }
}

/// Widening the beam can lower the best score found: the wider beam keeps
/// two `b` continuations and drops the `a` branch that completes well.
#[test]
fn widening_the_beam_is_not_monotone() {
    let entities = [
        ("x", "a a1"),
        ("y", "b b1"),
        ("z", "b b2"),
        ("s1", "s1"),
        ("s2", "s2"),
        ("s3", "s3"),
    ];
    let vocab =
        Vocabulary::from_entities(entities.iter().map(|(id, s)| Entity::new(*id, *s).unwrap()).collect()).unwrap();
    let trie = PrefixTrie::build(&vocab).unwrap();
    let query = Query {
        query_id: "q".into(),
        seeds: vec!["s1".into(), "s2".into(), "s3".into()],
        class_name: None,
        ground_truth: None,
    };
    let best = |width| {
        let opts = options(width, 1);
        decode::<f64, _>(&query, &trie, &TableScorer, opts).unwrap().entities[0].clone()
    };
    let one = best(1);
    let two = best(2);
    assert_eq!(one.id.as_str(), "x");
    assert!((one.score - -1.1).abs() < 1e-12);
    assert!(two.score < one.score, "width 2 found {two:?}");
}
