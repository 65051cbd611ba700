use std::collections::BTreeMap;

use crate::config::derive_seed;
use crate::domain::{au, AupsVector, AUPS_DIM, AU_DIM};
use crate::error::{Error, Result};
use crate::text::tokenize;

/// Number of canonical mouth patterns.
pub const NUM_PATTERNS: usize = 8;

/// Keyframe as (AU index, value) overrides on a zero vector plus pose.
struct Key {
    aus: &'static [(usize, f64)],
    pose: [f64; 3],
}

const fn key(aus: &'static [(usize, f64)], pose: [f64; 3]) -> Key {
    Key { aus, pose }
}

/// Three keyframes per pattern.
const PATTERNS: [[Key; 3]; NUM_PATTERNS] = [
    // bilabial closure then release
    [
        key(&[(au::JAW_DROP, 0.05), (au::LIPS_PART, 0.1)], [0.0, 0.0, 0.0]),
        key(&[(au::LIP_TIGHTEN, 0.3)], [0.02, 0.0, 0.0]),
        key(&[(au::JAW_DROP, 0.3), (au::LIPS_PART, 0.4)], [0.0, 0.02, 0.0]),
    ],
    // wide open vowel
    [
        key(&[(au::JAW_DROP, 0.2), (au::LIPS_PART, 0.3)], [0.0, 0.0, 0.0]),
        key(&[(au::JAW_DROP, 0.8), (au::LIPS_PART, 0.9), (au::BROW_INNER, 0.3)], [-0.06, 0.0, 0.0]),
        key(&[(au::JAW_DROP, 0.5), (au::LIPS_PART, 0.6)], [-0.03, 0.0, 0.0]),
    ],
    // rounded
    [
        key(&[(au::JAW_DROP, 0.3), (au::LIP_TIGHTEN, 0.6), (au::LIPS_PART, 0.4)], [0.0, -0.05, 0.0]),
        key(&[(au::JAW_DROP, 0.5), (au::LIP_TIGHTEN, 0.8), (au::LIPS_PART, 0.6)], [0.0, -0.08, 0.0]),
        key(&[(au::JAW_DROP, 0.3), (au::LIP_TIGHTEN, 0.5), (au::LIPS_PART, 0.4)], [0.0, -0.04, 0.0]),
    ],
    // spread
    [
        key(&[(au::JAW_DROP, 0.2), (au::LIP_STRETCH, 0.6), (au::LIP_CORNER, 0.5)], [0.0, 0.05, 0.0]),
        key(&[(au::JAW_DROP, 0.35), (au::LIP_STRETCH, 0.8), (au::LIP_CORNER, 0.7)], [0.0, 0.07, 0.03]),
        key(&[(au::JAW_DROP, 0.2), (au::LIP_STRETCH, 0.5), (au::LIP_CORNER, 0.4)], [0.0, 0.04, 0.0]),
    ],
    // smile with raised brows
    [
        key(&[(au::LIP_CORNER, 0.6), (au::JAW_DROP, 0.1), (au::BROW_OUTER, 0.2)], [0.0, 0.0, 0.05]),
        key(&[(au::LIP_CORNER, 0.9), (au::JAW_DROP, 0.2), (au::BROW_OUTER, 0.5), (au::BROW_INNER, 0.3)], [0.0, 0.0, 0.08]),
        key(&[(au::LIP_CORNER, 0.7), (au::JAW_DROP, 0.1), (au::BROW_OUTER, 0.3)], [0.0, 0.0, 0.06]),
    ],
    // labiodental
    [
        key(&[(au::JAW_DROP, 0.1), (au::UPPER_LIP_RAISE, 0.6), (au::LIPS_PART, 0.2)], [0.03, 0.0, 0.0]),
        key(&[(au::JAW_DROP, 0.15), (au::UPPER_LIP_RAISE, 0.7), (au::LIPS_PART, 0.3), (au::BROW_LOWER, 0.4)], [0.04, 0.0, -0.03]),
        key(&[(au::JAW_DROP, 0.2), (au::UPPER_LIP_RAISE, 0.4), (au::LIPS_PART, 0.3)], [0.03, 0.0, 0.0]),
    ],
    // frowning rounded
    [
        key(&[(au::JAW_DROP, 0.4), (au::LIP_TIGHTEN, 0.4), (au::CORNER_DEPRESS, 0.5)], [0.0, 0.0, -0.05]),
        key(&[(au::JAW_DROP, 0.6), (au::LIP_TIGHTEN, 0.4), (au::CORNER_DEPRESS, 0.7), (au::BROW_LOWER, 0.6)], [0.0, -0.03, -0.07]),
        key(&[(au::JAW_DROP, 0.2), (au::LIP_TIGHTEN, 0.3), (au::CORNER_DEPRESS, 0.4)], [0.0, 0.0, -0.04]),
    ],
    // near-neutral with a blink and wide eyes
    [
        key(&[(au::JAW_DROP, 0.1), (au::LID_RAISE, 0.5), (au::BROW_INNER, 0.5)], [0.05, 0.0, 0.0]),
        key(&[(au::JAW_DROP, 0.1), (au::BLINK, 1.0), (au::BROW_INNER, 0.5)], [0.05, 0.0, 0.0]),
        key(&[(au::JAW_DROP, 0.1), (au::LID_RAISE, 0.3), (au::BROW_INNER, 0.4)], [0.04, 0.0, 0.0]),
    ],
];

fn key_vector(k: &Key) -> AupsVector {
    let mut a = [0.0; AU_DIM];
    for &(i, v) in k.aus {
        a[i] = v;
    }
    AupsVector::new(a, k.pose, true).expect("canonical keyframes are in range")
}

/// Canonical keyframes of pattern `p`.
pub fn pattern_keyframes(p: usize) -> Vec<AupsVector> {
    PATTERNS[p % NUM_PATTERNS].iter().map(key_vector).collect()
}

/// Word → keyframes. Words without an explicit entry map by seeded hash to
/// one of the canonical patterns.
#[derive(Debug, Clone, PartialEq)]
pub struct VisemeTable {
    seed: u64,
    frames_per_word: usize,
    explicit: BTreeMap<String, Vec<AupsVector>>,
}

impl VisemeTable {
    pub fn new(seed: u64, frames_per_word: usize) -> Result<Self> {
        if frames_per_word == 0 {
            return Err(Error::Config("frames_per_word must be at least 1".into()));
        }
        Ok(Self {
            seed,
            frames_per_word,
            explicit: BTreeMap::new(),
        })
    }

    pub fn frames_per_word(&self) -> usize {
        self.frames_per_word
    }

    /// Override the keyframes of one word.
    pub fn insert(&mut self, word: &str, keys: Vec<AupsVector>) -> Result<()> {
        if keys.is_empty() {
            return Err(Error::EmptyInput(format!("no keyframes for {word:?}")));
        }
        if keys.iter().any(|k| !k.is_normalized()) {
            return Err(Error::Contract("keyframes must be normalized".into()));
        }
        self.explicit.insert(word.to_lowercase(), keys);
        Ok(())
    }

    pub fn pattern_of(&self, word: &str) -> usize {
        (derive_seed(self.seed, &word.to_lowercase()) % NUM_PATTERNS as u64) as usize
    }

    pub fn keyframes(&self, word: &str) -> Vec<AupsVector> {
        match self.explicit.get(&word.to_lowercase()) {
            Some(k) => k.clone(),
            None => pattern_keyframes(self.pattern_of(word)),
        }
    }
}

/// Piecewise-linear resampling of `keys` to `frames` evenly spaced points.
pub fn interpolate(keys: &[AupsVector], frames: usize) -> Vec<AupsVector> {
    let k = keys.len();
    (0..frames)
        .map(|i| {
            if k == 1 || frames == 1 {
                return keys[0];
            }
            let num = i * (k - 1);
            let den = frames - 1;
            let (lo, rem) = (num / den, num % den);
            if rem == 0 {
                return keys[lo];
            }
            let t = rem as f64 / den as f64;
            let (a, b) = (keys[lo].to_array(), keys[lo + 1].to_array());
            let mut v = [0.0; AUPS_DIM];
            for j in 0..AUPS_DIM {
                v[j] = (1.0 - t) * a[j] + t * b[j];
            }
            AupsVector::from_slice(&v, true).expect("convex combination stays in range")
        })
        .collect()
}

/// Normalized per-frame trajectory of one word.
pub fn word_to_aups(word: &str, table: &VisemeTable) -> Result<Vec<AupsVector>> {
    if word.trim().is_empty() {
        return Err(Error::EmptyInput("empty word".into()));
    }
    Ok(interpolate(&table.keyframes(word), table.frames_per_word))
}

/// Concatenated word trajectories of a sentence.
pub fn sentence_to_aups(text: &str, table: &VisemeTable) -> Result<Vec<AupsVector>> {
    let mut out = Vec::new();
    for tok in tokenize(text)? {
        out.extend(word_to_aups(tok.as_str(), table)?);
    }
    Ok(out)
}
