//! Offline paraphrasing: synonym swaps, moving a leading place phrase to
//! the end, and framing templates. Output is deterministic for a given
//! sentence and seed.

use crate::prelude::*;
use crate::rng::{mix, SimRng};

const SYNONYMS: &[(&str, &[&str])] = &[
    (
        "people",
        &["visitors", "folks", "individuals", "pedestrians"],
    ),
    ("students", &["pupils", "learners", "undergraduates"]),
    ("passengers", &["travellers", "commuters", "riders"]),
    ("sit", &["take a seat", "rest", "settle down"]),
    ("read", &["browse", "look through", "study"]),
    ("talk", &["chat", "converse", "speak"]),
    ("walk", &["stroll", "wander", "move"]),
    ("wait", &["linger", "hang around", "stay"]),
    ("queue", &["line up", "wait in line", "form a queue"]),
    ("meet", &["gather", "get together", "come together"]),
    ("look", &["glance", "gaze", "peer"]),
    ("outside", &["in front of", "just outside", "near"]),
    ("near", &["close to", "next to", "by"]),
    ("at", &["by", "around", "near"]),
    ("on", &["upon", "across"]),
    ("benches", &["seats", "park benches"]),
    ("coffee shop", &["cafe", "coffee bar", "espresso stand"]),
    ("station", &["train station", "railway station", "terminal"]),
    ("campus", &["university grounds", "college campus"]),
    ("and", &["while also", "as well as"]),
    ("newspaper", &["paper", "daily paper"]),
    ("phone", &["mobile", "cell phone"]),
    ("friends", &["companions", "mates"]),
    ("some", &["a few", "several"]),
    ("many", &["lots of", "numerous", "plenty of"]),
];

const FRAMES: &[(&str, &str)] = &[
    ("", ""),
    ("In this scene, ", ""),
    ("Here, ", ""),
    ("", " during the day"),
    ("Typically, ", ""),
    ("On a normal day, ", ""),
    ("", " as time goes by"),
    ("It is common that ", ""),
    ("We see that ", ""),
    ("", " throughout the afternoon"),
];

const LEADING_PREPS: &[&str] = &[
    "outside", "inside", "near", "at", "in", "on", "by", "around", "within",
];

/// Up to `count` distinct rewordings of `sentence`, none equal to it.
pub fn paraphrase_offline(sentence: &str, count: usize, seed: u64) -> Vec<String> {
    let base = strip_period(sentence.trim());
    let mut rng = SimRng::seed(mix(seed, base));
    let original = normalize(base);
    let mut seen = BTreeSet::new();
    seen.insert(original.clone());
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count && attempts < count * 200 {
        attempts += 1;
        let mut text = base.to_string();
        if rng.uniform() < 0.5 {
            text = move_leading_phrase(&text);
        }
        text = substitute(&text, &mut rng);
        let (pre, post) = FRAMES[rng.below(FRAMES.len())];
        let text = finish(&format!(
            "{pre}{}{post}",
            lower_first_if(&text, !pre.is_empty())
        ));
        if seen.insert(normalize(&text)) {
            out.push(text);
        }
    }
    let mut k = 1;
    while out.len() < count {
        let text = finish(&format!("{base} (variant {k})"));
        k += 1;
        if seen.insert(normalize(&text)) {
            out.push(text);
        }
    }
    out
}

fn substitute(text: &str, rng: &mut SimRng) -> String {
    let mut words: Vec<String> = text.split_whitespace().map(|w| w.to_string()).collect();
    let mut i = 0;
    let mut out = Vec::with_capacity(words.len());
    while i < words.len() {
        let mut replaced = false;
        for &(key, alts) in SYNONYMS {
            let parts: Vec<&str> = key.split(' ').collect();
            if i + parts.len() > words.len() {
                continue;
            }
            let matches = parts
                .iter()
                .enumerate()
                .all(|(j, p)| bare(&words[i + j]).eq_ignore_ascii_case(p));
            if matches && rng.uniform() < 0.5 {
                let last = &words[i + parts.len() - 1];
                let trail: String = last
                    .chars()
                    .rev()
                    .take_while(|c| !c.is_alphanumeric())
                    .collect();
                let trail: String = trail.chars().rev().collect();
                let mut alt = alts[rng.below(alts.len())].to_string();
                if words[i].chars().next().is_some_and(|c| c.is_uppercase()) {
                    alt = capitalize(&alt);
                }
                out.push(format!("{alt}{trail}"));
                i += parts.len();
                replaced = true;
                break;
            }
        }
        if !replaced {
            out.push(core::mem::take(&mut words[i]));
            i += 1;
        }
    }
    out.join(" ")
}

/// "Outside the station, passengers sit" → "Passengers sit outside the station".
fn move_leading_phrase(text: &str) -> String {
    let Some(comma) = text.find(',') else {
        return text.to_string();
    };
    let head = &text[..comma];
    let first = head
        .split_whitespace()
        .next()
        .map(|w| w.to_lowercase())
        .unwrap_or_default();
    if !LEADING_PREPS.contains(&first.as_str()) {
        return text.to_string();
    }
    let tail = text[comma + 1..].trim();
    if tail.is_empty() {
        return text.to_string();
    }
    format!("{} {}", capitalize(tail), lower_first_if(head, true))
}

fn bare(w: &str) -> &str {
    w.trim_matches(|c: char| !c.is_alphanumeric())
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn lower_first_if(s: &str, yes: bool) -> String {
    if !yes {
        return s.to_string();
    }
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

fn strip_period(s: &str) -> &str {
    s.trim_end_matches(['.', '!', '?'])
}

fn finish(s: &str) -> String {
    format!("{}.", capitalize(strip_period(s.trim())))
}

fn normalize(s: &str) -> String {
    s.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || *c == ' ')
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: &str =
        "Outside the station, passengers sit on benches to read a newspaper and talk on the phone.";

    #[test]
    fn twenty_distinct_paraphrases() {
        let p = paraphrase_offline(S, 20, 0);
        assert_eq!(p.len(), 20);
        let set: BTreeSet<_> = p.iter().map(|s| normalize(s)).collect();
        assert_eq!(set.len(), 20);
        assert!(!set.contains(&normalize(strip_period(S))));
    }

    #[test]
    fn deterministic() {
        assert_eq!(paraphrase_offline(S, 5, 9), paraphrase_offline(S, 5, 9));
    }

    #[test]
    fn moves_place_phrase() {
        assert_eq!(
            move_leading_phrase("Outside the station, passengers sit"),
            "Passengers sit outside the station"
        );
        assert_eq!(
            move_leading_phrase("People sit, then leave"),
            "People sit, then leave"
        );
    }

    #[test]
    fn short_sentence_still_fills() {
        let p = paraphrase_offline("Go", 20, 1);
        assert_eq!(p.len(), 20);
    }
}
