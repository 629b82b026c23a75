//! Synthetic treebanks and taxonomies for desk-scale runs.

use std::fmt::Write as _;
use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::treebank::{random_parents, AnnotatedSentence, Taxonomy, Token};

const VOCAB: usize = 40;
const TAGS: [(&str, char); 4] = [("NOUN", 'n'), ("VERB", 'v'), ("ADJ", 'a'), ("ADP", 'p')];
const TAG_WEIGHTS: [u32; 4] = [40, 25, 20, 15];

/// `count` sentences with uniformly random dependency trees and lengths
/// drawn uniformly from `lengths`. Ids are `{prefix}-{k}`.
pub fn synthetic_treebank(
    count: usize,
    lengths: RangeInclusive<usize>,
    seed: u64,
    prefix: &str,
) -> Result<Vec<AnnotatedSentence>> {
    if lengths.is_empty() || *lengths.start() == 0 {
        return Err(Error::InvalidArgument("sentence lengths must be a non-empty range of positive values".into()));
    }
    let total: u32 = TAG_WEIGHTS.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let n = rng.random_range(lengths.clone());
            let parents = random_parents(n, &mut rng);
            let tokens = parents
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut pick = rng.random_range(0..total);
                    let mut tag = 0;
                    while pick >= TAG_WEIGHTS[tag] {
                        pick -= TAG_WEIGHTS[tag];
                        tag += 1;
                    }
                    let (upos, letter) = TAGS[tag];
                    let lemma = format!("{}{}", letter, rng.random_range(0..VOCAB));
                    Token {
                        index: i + 1,
                        form: lemma.clone(),
                        lemma,
                        upos: upos.to_string(),
                        head: p.map_or(0, |p| p + 1),
                    }
                })
                .collect();
            AnnotatedSentence::new(format!("{}-{}", prefix, k), tokens)
        })
        .collect()
}

/// Random recursive hypernymy trees over the synthetic noun and verb
/// vocabularies, in the line format read by `load_taxonomy`.
pub fn synthetic_taxonomy_text(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from("# synthetic hypernymy forest\n");
    for (upos, letter) in &TAGS[..2] {
        for k in 1..VOCAB {
            let parent = rng.random_range(0..k);
            let _ = writeln!(out, "E\t{}{}\t{}{}", letter, k, letter, parent);
        }
        for k in 0..VOCAB {
            let _ = writeln!(out, "L\t{}{}\t{}\t{}{}", letter, k, upos, letter, k);
        }
    }
    out
}

pub fn synthetic_taxonomy(seed: u64) -> Result<Taxonomy> {
    crate::treebank::load_taxonomy(synthetic_taxonomy_text(seed).as_bytes())
}
