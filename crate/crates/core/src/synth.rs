//! Synthetic EN→DE pairs with controlled label counts, for fixtures and demos.
//!
//! Every pair is a short templated sentence and its German rendering. ERR pairs carry
//! one planted critical error (wrong number, wrong name, flipped negation, safety
//! inversion or an inserted insult) tagged with its category.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Dataset, ErrorCategory, Label, LabelScheme, Pair, Split};

const NAMES: [&str; 8] = [
    "Anna",
    "Berlin",
    "Siemens",
    "Maria",
    "Hamburg",
    "Peter",
    "Lufthansa",
    "Vienna",
];
const NAMES_DE: [&str; 8] = [
    "Anna",
    "Berlin",
    "Siemens",
    "Maria",
    "Hamburg",
    "Peter",
    "Lufthansa",
    "Wien",
];
const ITEMS: [(&str, &str); 6] = [
    ("tickets", "Tickets"),
    ("boxes", "Kisten"),
    ("letters", "Briefe"),
    ("books", "Bücher"),
    ("chairs", "Stühle"),
    ("bottles", "Flaschen"),
];

/// Shape of a generated split.
#[derive(Clone, Debug)]
pub struct Spec {
    pub name: String,
    pub split: Split,
    pub n_not: usize,
    pub n_err: usize,
    pub seed: u64,
    /// Added to every sentence number so separately generated splits stay disjoint.
    pub offset: usize,
    pub id_prefix: String,
}

impl Spec {
    pub fn new(name: &str, split: Split, n_not: usize, n_err: usize) -> Spec {
        let offset = match split {
            Split::Train => 0,
            Split::Dev => 1_000_000,
        };
        Spec {
            name: name.to_string(),
            split,
            n_not,
            n_err,
            seed: 0,
            offset,
            id_prefix: format!("{name}-"),
        }
    }

    pub fn seed(mut self, seed: u64) -> Spec {
        self.seed = seed;
        self
    }
}

fn clean_pair(n: usize, rng: &mut ChaCha8Rng) -> (String, String, usize, usize, usize) {
    let who = rng.random_range(0..NAMES.len());
    let item = rng.random_range(0..ITEMS.len());
    let count = rng.random_range(2..500);
    let src = format!(
        "{} did not return {count} {} (order {n}).",
        NAMES[who], ITEMS[item].0
    );
    let tgt = format!(
        "{} gab {count} {} nicht zurück (Auftrag {n}).",
        NAMES_DE[who], ITEMS[item].1
    );
    (src, tgt, who, item, count)
}

fn corrupt(n: usize, rng: &mut ChaCha8Rng) -> (String, String, ErrorCategory) {
    let (src, _, who, item, count) = clean_pair(n, rng);
    let category = ErrorCategory::ALL[rng.random_range(0..ErrorCategory::ALL.len())];
    let (name, things) = (NAMES_DE[who], ITEMS[item].1);
    let tgt = match category {
        ErrorCategory::Num => format!(
            "{name} gab {} {things} nicht zurück (Auftrag {n}).",
            count * 10 + 1
        ),
        ErrorCategory::Nam => {
            let other = NAMES_DE[(who + 1 + rng.random_range(0..NAMES.len() - 1)) % NAMES.len()];
            format!("{other} gab {count} {things} nicht zurück (Auftrag {n}).")
        }
        ErrorCategory::Sen => format!("{name} gab {count} {things} zurück (Auftrag {n})."),
        ErrorCategory::Saf => {
            format!("{name} soll {count} {things} ohne Schutz öffnen (Auftrag {n}).")
        }
        ErrorCategory::Tox => {
            format!("Der Idiot {name} gab {count} {things} nicht zurück (Auftrag {n}).")
        }
    };
    (src, tgt, category)
}

/// Generates `n_not + n_err` pairs in a seeded random label order.
pub fn generate(spec: &Spec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<Label> = std::iter::repeat_n(Label::Not, spec.n_not)
        .chain(std::iter::repeat_n(Label::Err, spec.n_err))
        .collect();
    labels.shuffle(&mut rng);
    let pairs = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let n = spec.offset + i;
            let id = format!("{}{i:06}", spec.id_prefix);
            match label {
                Label::Not => {
                    let (s, t, ..) = clean_pair(n, &mut rng);
                    Pair::new(id, &s, &t, Some(Label::Not))
                }
                Label::Err => {
                    let (s, t, c) = corrupt(n, &mut rng);
                    Pair::new(id, &s, &t, Some(Label::Err)).with_category(c)
                }
            }
        })
        .collect();
    Dataset {
        name: spec.name.clone(),
        split: spec.split,
        pairs,
        label_scheme: LabelScheme::Native,
    }
}

/// Same pairs with categories dropped, for fixtures mimicking sources that lack them.
pub fn without_categories(mut ds: Dataset) -> Dataset {
    for p in &mut ds.pairs {
        p.category = None;
    }
    ds
}
