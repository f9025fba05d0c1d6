//! Sentence conditioning text: verb emphasis and a feature-hashing embedder.

use crate::math;
use crate::prelude::*;
use crate::rng::fnv1a64;

pub const EMBED_DIM: usize = 384;

const BUILTIN_VERBS: &str = include_str!("../data/verbs.txt");

/// Verb lexicon with suffix rules for inflected forms.
#[derive(Clone, Debug, Default)]
pub struct Lexicon {
    verbs: BTreeSet<String>,
    exclude: BTreeSet<String>,
}

impl Lexicon {
    /// One word per line; `#` starts a comment line, `!word` excludes a form.
    pub fn parse(text: &str) -> Self {
        let mut lex = Self::default();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            match line.strip_prefix('!') {
                Some(w) => lex.exclude.insert(w.to_lowercase()),
                None => lex.verbs.insert(line.to_lowercase()),
            };
        }
        lex
    }

    pub fn builtin() -> Self {
        Self::parse(BUILTIN_VERBS)
    }

    pub fn len(&self) -> usize {
        self.verbs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.verbs.is_empty()
    }

    /// Whether a lowercase word is a verb form.
    pub fn is_verb(&self, w: &str) -> bool {
        if w.is_empty() || self.exclude.contains(w) {
            return false;
        }
        if self.verbs.contains(w) {
            return true;
        }
        self.candidate_stems(w)
            .iter()
            .any(|s| self.verbs.contains(s))
    }

    fn candidate_stems(&self, w: &str) -> Vec<String> {
        let mut out = Vec::new();
        let undouble = |s: &str| -> Option<String> {
            let b = s.as_bytes();
            (b.len() >= 3 && b[b.len() - 1] == b[b.len() - 2]).then(|| s[..s.len() - 1].to_string())
        };
        if let Some(stem) = w.strip_suffix("ing").filter(|s| s.len() >= 2) {
            out.push(stem.to_string());
            out.push(format!("{stem}e"));
            out.extend(undouble(stem));
        }
        if let Some(stem) = w.strip_suffix("ied").filter(|s| !s.is_empty()) {
            out.push(format!("{stem}y"));
        }
        if let Some(stem) = w.strip_suffix("ed").filter(|s| s.len() >= 2) {
            out.push(stem.to_string());
            out.push(format!("{stem}e"));
            out.extend(undouble(stem));
        }
        if let Some(stem) = w.strip_suffix("ies").filter(|s| !s.is_empty()) {
            out.push(format!("{stem}y"));
        }
        if let Some(stem) = w.strip_suffix("es").filter(|s| s.len() >= 2) {
            out.push(stem.to_string());
        }
        if let Some(stem) = w
            .strip_suffix('s')
            .filter(|s| s.len() >= 2 && !s.ends_with('s'))
        {
            out.push(stem.to_string());
        }
        out
    }

    /// `"v1 v2 | sentence"` listing detected verbs (lowercase, first
    /// occurrence order, no repeats); the sentence unchanged if none.
    pub fn emphasize(&self, sentence: &str) -> String {
        let mut found: Vec<String> = Vec::new();
        for w in words(sentence) {
            if self.is_verb(&w) && !found.contains(&w) {
                found.push(w);
            }
        }
        if found.is_empty() {
            sentence.to_string()
        } else {
            format!("{} | {}", found.join(" "), sentence)
        }
    }
}

fn words(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split(|c: char| !c.is_alphabetic())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

/// [`Lexicon::emphasize`] with the built-in lexicon.
pub fn emphasize_verbs(sentence: &str) -> String {
    Lexicon::builtin().emphasize(sentence)
}

/// Signed feature hashing of lowercase unigrams and bigrams into
/// [`EMBED_DIM`] buckets, L2-normalized. Empty text maps to zeros.
pub fn embed_hashing(text: &str) -> Vec<f64> {
    let tokens: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect();
    let mut v = vec![0.0; EMBED_DIM];
    let mut add = |key: &str| {
        let h = fnv1a64(key.as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % EMBED_DIM as u64) as usize] += sign;
    };
    for t in &tokens {
        add(t);
    }
    for pair in tokens.windows(2) {
        add(&format!("{} {}", pair[0], pair[1]));
    }
    let norm = math::sqrt(v.iter().map(|x| x * x).sum());
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = math::sqrt(a.iter().map(|x| x * x).sum());
    let nb = math::sqrt(b.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emphasizes_example_sentence() {
        assert_eq!(
            emphasize_verbs("passengers sit on benches to read"),
            "sit read | passengers sit on benches to read"
        );
        assert_eq!(emphasize_verbs(""), "");
        assert_eq!(
            emphasize_verbs("the old stone building"),
            "the old stone building"
        );
    }

    #[test]
    fn inflections() {
        let lex = Lexicon::builtin();
        assert!(lex.len() > 950);
        for w in [
            "sitting", "chatting", "queuing", "queueing", "carried", "waits", "watches", "used",
            "stopped", "tries",
        ] {
            assert!(lex.is_verb(w), "{w}");
        }
        for w in [
            "passengers",
            "benches",
            "building",
            "station",
            "tickets",
            "parking",
            "the",
            "is",
        ] {
            assert!(!lex.is_verb(w), "{w}");
        }
    }

    #[test]
    fn vocabulary_actions_are_verbs() {
        let lex = Lexicon::builtin();
        for w in [
            "stand", "sit", "wait", "wander", "queue", "interact", "talk", "meet", "enter", "exit",
            "leave", "wave", "read", "look", "carry",
        ] {
            assert!(lex.is_verb(w), "{w}");
        }
    }

    #[test]
    fn hashing_embedding_contract() {
        assert!(embed_hashing("").iter().all(|x| *x == 0.0));
        let a = embed_hashing("Students queue at the coffee shop");
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(a, embed_hashing("Students queue at the coffee shop"));
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-12);
        let c = cosine(
            &embed_hashing("students queue"),
            &embed_hashing("trains depart"),
        );
        assert!(c < 0.9, "{c}");
    }

    #[test]
    fn paraphrases_are_closer_than_unrelated_sentences() {
        use crate::scenario::paraphrase::paraphrase_offline;
        let seeds = [
            "Outside the station, passengers sit on benches to read a newspaper",
            "Students queue at the campus coffee shop before class",
            "Friends meet near the main entrance and talk for a while",
            "Visitors wander around the courtyard and look at the statues",
            "Commuters carry luggage to the platform and wait for the train",
        ];
        let embedded: Vec<Vec<Vec<f64>>> = seeds
            .iter()
            .map(|s| {
                paraphrase_offline(s, 20, 0)
                    .iter()
                    .map(|p| embed_hashing(&emphasize_verbs(p)))
                    .collect()
            })
            .collect();
        let (mut within, mut nw, mut across, mut na) = (0.0, 0, 0.0, 0);
        for (i, gi) in embedded.iter().enumerate() {
            for (j, gj) in embedded.iter().enumerate() {
                for (a, x) in gi.iter().enumerate() {
                    for (b, y) in gj.iter().enumerate() {
                        if i == j && a < b {
                            within += cosine(x, y);
                            nw += 1;
                        } else if i < j {
                            across += cosine(x, y);
                            na += 1;
                        }
                    }
                }
            }
        }
        let (w, a) = (within / nw as f64, across / na as f64);
        assert!(w - a >= 0.05, "within {w} across {a}");
    }
}
