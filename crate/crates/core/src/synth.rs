//! Deterministic English-like text for desk-scale runs.
//!
//! Sentences are drawn from a handful of clause templates filled from word
//! classes with Zipf-distributed frequencies, so the text has spelling,
//! short-range syntax and a skewed unigram distribution for a byte-level
//! model to learn. Output depends only on the seed and the length.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

const NOUNS: &[&str] = &[
    "river", "city", "garden", "teacher", "machine", "village", "letter", "winter", "market",
    "doctor", "window", "forest", "engine", "student", "harbor", "island", "kitchen", "mountain",
    "painter", "signal", "bridge", "soldier", "library", "farmer", "question", "answer", "story",
    "morning", "evening", "station", "child", "house", "road", "field", "storm", "ship", "king",
    "song", "stone", "light", "friend", "voice", "paper", "table", "country", "system", "number",
    "family", "water", "government",
];
const VERBS: &[&str] = &[
    "found", "carried", "watched", "opened", "followed", "built", "crossed", "remembered",
    "answered", "painted", "closed", "studied", "visited", "described", "heard", "lost", "kept",
    "moved", "changed", "reached", "left", "saw", "made", "gave", "took", "told", "wrote", "read",
];
const INTRANSITIVE: &[&str] = &[
    "waited", "smiled", "returned", "slept", "arrived", "stopped", "laughed", "worked", "fell",
    "grew", "disappeared", "continued", "rested", "agreed",
];
const ADJECTIVES: &[&str] = &[
    "old", "quiet", "small", "bright", "heavy", "green", "distant", "famous", "narrow", "cold",
    "early", "strange", "empty", "golden", "careful", "broken", "young", "long", "dark", "open",
];
const ADVERBS: &[&str] = &[
    "slowly", "again", "quickly", "never", "often", "suddenly", "carefully", "soon", "already",
    "finally",
];
const PREPOSITIONS: &[&str] = &["near", "under", "behind", "across", "beyond", "inside", "along", "above"];
const DETERMINERS: &[&str] = &["the", "a", "every", "that", "this", "one", "her", "his", "their"];
const CONNECTIVES: &[&str] = &["and", "but", "because", "while", "so", "after", "before", "when"];
const NAMES: &[&str] = &["Anna", "Tomas", "Mira", "Jonas", "Elena", "Pavel", "Ruth", "Oskar"];

struct Writer {
    rng: ChaCha8Rng,
}

impl Writer {
    fn pick(&mut self, words: &'static [&'static str]) -> &'static str {
        let zipf = Zipf::new(words.len() as f64, 1.1).expect("valid Zipf parameters");
        words[zipf.sample(&mut self.rng) as usize - 1]
    }

    fn noun_phrase(&mut self, out: &mut String) {
        if self.rng.random_bool(0.12) {
            out.push_str(self.pick(NAMES));
            return;
        }
        out.push_str(self.pick(DETERMINERS));
        out.push(' ');
        if self.rng.random_bool(0.4) {
            out.push_str(self.pick(ADJECTIVES));
            out.push(' ');
        }
        out.push_str(self.pick(NOUNS));
        if self.rng.random_bool(0.15) {
            out.push_str(" of the ");
            out.push_str(self.pick(NOUNS));
        }
    }

    fn clause(&mut self, out: &mut String) {
        self.noun_phrase(out);
        out.push(' ');
        if self.rng.random_bool(0.2) {
            out.push_str(self.pick(ADVERBS));
            out.push(' ');
        }
        if self.rng.random_bool(0.35) {
            out.push_str(self.pick(INTRANSITIVE));
        } else {
            out.push_str(self.pick(VERBS));
            out.push(' ');
            self.noun_phrase(out);
        }
        if self.rng.random_bool(0.3) {
            out.push(' ');
            out.push_str(self.pick(PREPOSITIONS));
            out.push(' ');
            self.noun_phrase(out);
        }
    }

    fn sentence(&mut self, out: &mut String) {
        let start = out.len();
        self.clause(out);
        if self.rng.random_bool(0.3) {
            out.push_str(if self.rng.random_bool(0.5) { ", " } else { " " });
            out.push_str(self.pick(CONNECTIVES));
            out.push(' ');
            self.clause(out);
        }
        // capitalise the first letter; every word is ASCII
        if let Some(first) = out[start..].chars().next() {
            let upper = first.to_ascii_uppercase();
            out.replace_range(start..start + 1, upper.encode_utf8(&mut [0; 4]));
        }
        out.push(if self.rng.random_bool(0.08) { '?' } else { '.' });
    }
}

/// At least `min_bytes` of ASCII text made of whole paragraphs.
pub fn generate(seed: u64, min_bytes: usize) -> String {
    let mut w = Writer {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut out = String::with_capacity(min_bytes + 1024);
    while out.len() < min_bytes {
        let sentences = w.rng.random_range(3..8);
        for i in 0..sentences {
            if i > 0 {
                out.push(' ');
            }
            w.sentence(&mut out);
        }
        out.push('\n');
    }
    out
}
