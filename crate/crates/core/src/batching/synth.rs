use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Document;

pub const ARITHMETIC: &str = "arithmetic";
pub const PROSE: &str = "prose";

const SUBJECTS: &[&str] = &[
    "the cat",
    "a farmer",
    "my sister",
    "the old king",
    "our teacher",
    "the river",
    "a small bird",
    "the baker",
    "his friend",
    "the village",
    "a tired horse",
    "the children",
];
const VERBS: &[&str] = &[
    "walks to",
    "looks at",
    "sings about",
    "dreams of",
    "runs past",
    "waits for",
    "remembers",
    "carries",
    "finds",
    "paints",
    "follows",
    "visits",
];
const OBJECTS: &[&str] = &[
    "the green hill",
    "a quiet garden",
    "the market",
    "an open window",
    "the morning light",
    "a wooden boat",
    "the forest",
    "her grandmother",
    "the bright moon",
    "a warm house",
    "the long road",
    "the sea",
];
const ENDINGS: &[&str] = &[
    ".",
    " today.",
    " again.",
    " in the rain.",
    " before dinner.",
    " with joy.",
];

fn arithmetic_clause(rng: &mut impl Rng) -> String {
    let a: u32 = rng.random_range(0..100);
    let b: u32 = rng.random_range(1..100);
    match rng.random_range(0..3) {
        0 => format!("{a} + {b} = {}.", a + b),
        1 => format!("{} - {b} = {a}. ", a + b),
        _ => {
            let (a, b) = (a % 13, b % 13);
            format!("{a} * {b} = {}.", a * b)
        }
    }
}

fn prose_clause(rng: &mut impl Rng) -> String {
    let pick = |rng: &mut dyn rand::RngCore, xs: &[&'static str]| xs[rng.random_range(0..xs.len())];
    let s = pick(rng, SUBJECTS);
    let v = pick(rng, VERBS);
    let o = pick(rng, OBJECTS);
    let e = pick(rng, ENDINGS);
    let mut out = format!("{s} {v} {o}{e}");
    out[..1].make_ascii_uppercase();
    out
}

/// Two-domain byte corpus: arithmetic drills and template prose, each
/// document 100 to 250 bytes. Ids are `0..n`; domains are drawn uniformly.
pub fn two_domain_corpus(n: usize, seed: u64) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let arithmetic = rng.random_bool(0.5);
            let target = rng.random_range(100..=250);
            let mut text = String::new();
            loop {
                let clause = if arithmetic {
                    arithmetic_clause(&mut rng)
                } else {
                    prose_clause(&mut rng)
                };
                let sep = usize::from(!text.is_empty());
                if text.len() + sep + clause.len() > target.max(100) && text.len() >= 100 {
                    break;
                }
                if sep == 1 {
                    text.push(' ');
                }
                text.push_str(&clause);
                if text.len() >= target {
                    break;
                }
            }
            text.truncate(250);
            Document {
                id: i.to_string(),
                text,
                domain: Some(if arithmetic { ARITHMETIC } else { PROSE }.to_string()),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_domains() {
        let docs = two_domain_corpus(400, 3);
        for d in &docs {
            assert!(
                (100..=250).contains(&d.text.len()),
                "{} bytes: {:?}",
                d.text.len(),
                d.text
            );
        }
        let arith = docs.iter().filter(|d| d.domain.as_deref() == Some(ARITHMETIC)).count();
        assert!((150..250).contains(&arith));
        assert_eq!(two_domain_corpus(400, 3), docs);
    }
}
