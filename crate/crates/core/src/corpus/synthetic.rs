//! Seeded synthetic corpora for the bundled micro benchmark.
//!
//! The domain corpus mixes record styles of very different inherent
//! difficulty (repetitive chants, templated notes, numeric ledgers, random
//! letter strings), so raw likelihood is a poor membership signal on its own.
//! The irrelevant corpus uses a disjoint style and mostly disjoint alphabet.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NOUNS: &[&str] = &[
    "river", "garden", "lantern", "harbor", "meadow", "tower", "bridge", "market", "forest",
    "window", "kettle", "ladder", "island", "orchard", "village", "signal", "engine", "letter",
    "candle", "mirror", "valley", "compass", "blanket", "doctor", "farmer", "sailor", "teacher",
    "painter", "baker", "miner", "pilot", "weaver",
];
const VERBS: &[&str] = &[
    "carries", "watches", "repairs", "follows", "paints", "finds", "keeps", "opens", "measures",
    "gathers", "crosses", "answers", "builds", "counts", "sells", "visits", "cleans", "guards",
];
const ADJS: &[&str] = &[
    "quiet", "golden", "narrow", "ancient", "bright", "hollow", "gentle", "crooked", "silver",
    "distant", "patient", "broken", "heavy", "pale", "restless", "humble",
];
const PLACES: &[&str] = &[
    "the north gate",
    "the old mill",
    "the east road",
    "the salt flats",
    "the square",
    "the chapel",
    "the docks",
    "the upper field",
];
const ITEMS: &[&str] = &[
    "flour", "rope", "nails", "cloth", "lamp oil", "salt", "wax", "tea", "iron", "wool",
];
const CHANT_WORDS: &[&str] = &[
    "sun", "rain", "stone", "wind", "fire", "moon", "salt", "bread", "snow", "bell", "sea", "oak",
];

/// Variants of the domain generator: `Primary` is the member distribution,
/// `Sibling` shares its styles with shifted mixture weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainVariant {
    Primary,
    Sibling,
}

fn note(rng: &mut ChaCha8Rng, len: usize) -> String {
    let mut s = String::new();
    while s.len() < len {
        let subject = NOUNS.choose(rng).unwrap();
        let adj = ADJS.choose(rng).unwrap();
        let verb = VERBS.choose(rng).unwrap();
        let object = NOUNS.choose(rng).unwrap();
        let place = PLACES.choose(rng).unwrap();
        s.push_str(&format!(
            "the {adj} {subject} {verb} the {object} near {place}. "
        ));
    }
    s
}

fn ledger(rng: &mut ChaCha8Rng, len: usize) -> String {
    let mut s = String::new();
    while s.len() < len {
        let item = ITEMS.choose(rng).unwrap();
        s.push_str(&format!(
            "item {:04} {item} qty {} price {}.{:02}; ",
            rng.random_range(0..10_000),
            rng.random_range(1..100),
            rng.random_range(1..500),
            rng.random_range(0..100)
        ));
    }
    s
}

fn chant(rng: &mut ChaCha8Rng, len: usize) -> String {
    let words: Vec<&str> = (0..rng.random_range(2..5))
        .map(|_| *CHANT_WORDS.choose(rng).unwrap())
        .collect();
    let phrase = words.join(" and ");
    let mut s = String::new();
    while s.len() < len {
        s.push_str(&phrase);
        s.push_str(", ");
    }
    s
}

fn letters(rng: &mut ChaCha8Rng, len: usize) -> String {
    let mut s = String::new();
    while s.len() < len {
        let n = rng.random_range(2..8);
        for _ in 0..n {
            s.push(rng.random_range(b'a'..=b'z') as char);
        }
        s.push(' ');
    }
    s
}

/// `n` lines of roughly `line_len` bytes each.
pub fn domain_corpus(n: usize, line_len: usize, seed: u64, variant: DomainVariant) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: [u32; 4] = match variant {
        DomainVariant::Primary => [2, 4, 3, 1],
        DomainVariant::Sibling => [1, 3, 4, 2],
    };
    let total: u32 = weights.iter().sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.random_range(0..total);
            let mut style = 0;
            while pick >= weights[style] {
                pick -= weights[style];
                style += 1;
            }
            match style {
                0 => chant(&mut rng, line_len),
                1 => note(&mut rng, line_len),
                2 => ledger(&mut rng, line_len),
                _ => letters(&mut rng, line_len),
            }
        })
        .collect()
}

const SYLLABLES: &[&str] = &[
    "KA", "LO", "VUN", "TESH", "MIR", "ZO", "QAN", "DRE", "PUL", "XI", "GOR", "BEH", "NUK", "YAS",
];

/// Upper-case pseudo-language, unrelated to the domain corpus.
pub fn irrelevant_corpus(n: usize, line_len: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut s = String::new();
            while s.len() < line_len {
                for _ in 0..rng.random_range(1..4) {
                    s.push_str(SYLLABLES.choose(&mut rng).unwrap());
                }
                s.push(if rng.random_bool(0.15) { '!' } else { '-' });
            }
            s
        })
        .collect()
}
