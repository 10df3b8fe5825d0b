use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Maps text to token ids for a text encoder.
pub trait Tokenizer {
    /// Start-of-text marker.
    fn sot(&self) -> u32;
    /// End-of-text marker; its output position pools the sequence.
    fn eot(&self) -> u32;
    fn vocab_size(&self) -> usize;
    /// Token ids of `text`, without start/end markers.
    fn tokenize(&self, text: &str) -> Result<Vec<u32>>;
}

/// Turns a schema keypoint name such as `left_front_paw` into prompt text.
pub fn keypoint_text(name: &str) -> String {
    name.split(['_', '-']).filter(|w| !w.is_empty()).collect::<Vec<_>>().join(" ")
}

const ANATOMY_WORDS: &[&str] = &[
    "animal", "ankle", "back", "base", "body", "center", "chest", "chin", "ear", "elbow", "eye", "foot", "front",
    "head", "hind", "hip", "hoof", "horn", "jaw", "knee", "left", "leg", "lower", "mouth", "neck", "nose", "of",
    "paw", "right", "root", "shoulder", "snout", "tail", "the", "throat", "tip", "upper", "withers", "wrist",
];

/// Whole-word vocabulary. Ids 0, 1 and 2 are padding, start and end.
#[derive(Clone, Debug, PartialEq)]
pub struct WordVocab {
    words: BTreeMap<String, u32>,
}

impl WordVocab {
    pub const PAD: u32 = 0;
    pub const SOT: u32 = 1;
    pub const EOT: u32 = 2;

    pub fn from_words<'w>(words: impl IntoIterator<Item = &'w str>) -> Self {
        let mut map = BTreeMap::new();
        for w in words {
            let next = map.len() as u32 + 3;
            map.entry(w.to_lowercase()).or_insert(next);
        }
        WordVocab { words: map }
    }

    /// Covers the keypoint names of the builtin schemas.
    pub fn anatomy() -> Self {
        Self::from_words(ANATOMY_WORDS.iter().copied())
    }
}

impl Tokenizer for WordVocab {
    fn sot(&self) -> u32 {
        Self::SOT
    }

    fn eot(&self) -> u32 {
        Self::EOT
    }

    fn vocab_size(&self) -> usize {
        self.words.len() + 3
    }

    fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let ids = text
            .split(|c: char| c.is_whitespace() || c == '_' || c == '-')
            .filter(|w| !w.is_empty())
            .map(|w| {
                self.words.get(&w.to_lowercase()).copied().ok_or_else(|| Error::Untokenizable {
                    name: text.to_string(),
                    reason: alloc::format!("word {w:?} is not in the vocabulary"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(Error::Untokenizable {
                name: text.to_string(),
                reason: "no words".into(),
            });
        }
        Ok(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::KeypointSchema;

    #[test]
    fn builtin_schemas_tokenize() {
        let v = WordVocab::anatomy();
        for schema in [KeypointSchema::ap10k(), KeypointSchema::animal_pose()] {
            for name in &schema.keypoint_names {
                assert!(v.tokenize(&keypoint_text(name)).is_ok(), "{name}");
            }
        }
        assert_eq!(v.tokenize("left front paw").unwrap().len(), 3);
        assert_eq!(v.tokenize("Left_Eye").unwrap(), v.tokenize("left eye").unwrap());
    }

    #[test]
    fn unknown_words_are_rejected() {
        let v = WordVocab::anatomy();
        assert!(matches!(v.tokenize("left antenna"), Err(Error::Untokenizable { .. })));
        assert!(v.tokenize("  ").is_err());
    }

    #[test]
    fn ids_avoid_special_tokens() {
        let v = WordVocab::from_words(["a", "b", "a"]);
        assert_eq!(v.vocab_size(), 5);
        assert_eq!(v.tokenize("a b").unwrap(), [3, 4]);
    }
}
