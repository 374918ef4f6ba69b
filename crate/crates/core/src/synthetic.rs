//! Seeded synthetic Persian corpus and matching mock lexicon, for offline
//! runs and tests.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{EmotionLabel, Sample};
use crate::gateway::MockLexicon;

/// Cue words per class, in label order.
pub const CUES: [[&str; 6]; 6] = [
    ["غم", "اشک", "تنهایی", "دلتنگی", "گریه", "افسرده"],
    ["شادی", "خنده", "خوشحال", "جشن", "لبخند", "اشتیاق"],
    ["خشم", "عصبانی", "فریاد", "دعوا", "لعنت", "کلافه"],
    ["تعجب", "شگفت", "باورنکردنی", "ناگهان", "عجیب", "حیرت"],
    ["نفرت", "متنفر", "انزجار", "چندش", "بیزار", "کینه"],
    ["ترس", "وحشت", "نگران", "اضطراب", "کابوس", "هراس"],
];

pub const FILLERS: [&str; 20] = [
    "امروز", "خیابان", "کتاب", "خانه", "دوست", "شهر", "ساعت", "پنجره", "باران", "ماشین", "مدرسه", "کار", "صبح",
    "شب", "غذا", "تلفن", "راه", "درس", "بازار", "پارک",
];

/// Lexicon over [`CUES`] with seeded weights in [0.5, 2.5).
pub fn lexicon(seed: u64) -> MockLexicon {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut lex = MockLexicon::default();
    for (label, words) in EmotionLabel::ALL.iter().zip(CUES) {
        for w in words {
            lex.insert(w, *label, rng.random_range(0.5..2.5));
        }
    }
    lex
}

/// `per_class` samples of each label. Each text mixes one to four cues of its
/// own class, sometimes cues of another class, and filler words. Up to six
/// cues can appear, so a top-5 explanation does not always cover them all.
pub fn corpus(per_class: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_class * EmotionLabel::ALL.len());
    let mut n = 0;
    for label in EmotionLabel::ALL {
        for _ in 0..per_class {
            let mut words: Vec<&str> = Vec::new();
            let own = rng.random_range(1..=4);
            words.extend(CUES[label.index()].choose_multiple(&mut rng, own));
            if rng.random_bool(0.4) {
                let other = (label.index() + rng.random_range(1..6)) % 6;
                let m = rng.random_range(1..=2);
                words.extend(CUES[other].choose_multiple(&mut rng, m));
            }
            let fillers = rng.random_range(4..=7);
            words.extend(FILLERS.choose_multiple(&mut rng, fillers));
            words.shuffle(&mut rng);
            let text = words.join(" ");
            out.push(Sample::new(format!("s{n:04}"), &text, label).expect("synthetic text is non-empty"));
            n += 1;
        }
    }
    out
}

/// Writes samples as `{"id","text","label"}` JSONL.
pub fn write_jsonl(samples: &[Sample], path: &Path) -> std::io::Result<()> {
    let body: String = samples
        .iter()
        .map(|s| serde_json::json!({"id": s.id, "text": s.text, "label": s.gold.code()}).to_string() + "\n")
        .collect();
    std::fs::write(path, body)
}

pub fn write_lexicon(lexicon: &MockLexicon, path: &Path) -> std::io::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(lexicon).expect("lexicon serializes") + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_seeded_and_balanced() {
        let a = corpus(10, 3);
        assert_eq!(a, corpus(10, 3));
        assert_ne!(a, corpus(10, 4));
        for label in EmotionLabel::ALL {
            assert_eq!(a.iter().filter(|s| s.gold == label).count(), 10);
        }
        assert!(a.iter().all(|s| crate::perturb::word_tokens(&s.text).len() >= 5));
    }
}
