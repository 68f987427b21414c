//! Pronunciation lexicon: `word PH1 PH2 ...` lines, `#` comments.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::{Error, Result};

use super::Vocabulary;

#[derive(Clone, Debug, Default)]
pub struct Lexicon {
    entries: HashMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn from_entries<'a, I>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, Vec<&'a str>)>,
    {
        let vocab = Vocabulary::phoneme();
        let mut map = HashMap::new();
        for (word, phones) in entries {
            for p in &phones {
                if vocab.id_of(p).is_none() {
                    return Err(Error::Format(format!(
                        "phoneme '{p}' for word '{word}' not in inventory"
                    )));
                }
            }
            map.entry(word.to_lowercase())
                .or_insert_with(|| phones.iter().map(|s| s.to_string()).collect());
        }
        Ok(Lexicon { entries: map })
    }

    pub fn pronounce(&self, word: &str) -> Option<&[String]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Parse a lexicon file. Duplicate words keep their first pronunciation;
/// a phoneme outside the inventory fails with the offending line number.
pub fn load_lexicon(path: &Path) -> Result<Lexicon> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vocab = Vocabulary::phoneme();
    let mut entries: HashMap<String, Vec<String>> = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let word = parts.next().expect("non-empty line").to_lowercase();
        let phones: Vec<String> = parts.map(|s| s.to_string()).collect();
        if phones.is_empty() {
            return Err(Error::Format(format!(
                "{}:{}: word '{word}' has no phonemes",
                path.display(),
                lineno + 1
            )));
        }
        for p in &phones {
            if vocab.id_of(p).is_none() {
                return Err(Error::Format(format!(
                    "{}:{}: phoneme '{p}' not in inventory",
                    path.display(),
                    lineno + 1
                )));
            }
        }
        entries.entry(word).or_insert(phones);
    }
    Ok(Lexicon { entries })
}
