//! Character and phoneme tokenizers, blank-aware for CTC.
//!
//! The character vocabulary is the reserved blank plus a..z, space, and
//! apostrophe (29 symbols). The phoneme vocabulary is blank, a word-boundary
//! marker, and the 39-symbol ARPAbet-style inventory (41 symbols).

mod lexicon;

pub use lexicon::{load_lexicon, Lexicon};

use std::fmt;
use std::sync::Arc;

use crate::{Error, Result};

/// Reserved blank symbol; always id 0.
pub const BLANK: &str = "∅";
/// Word-boundary marker in the phoneme vocabulary.
pub const WORD_BOUNDARY: &str = "|";

/// The 39 ARPAbet-style phonemes, in vocabulary order.
pub const PHONEME_INVENTORY: [&str; 39] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH",
    "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH",
    "UW", "V", "W", "Y", "Z", "ZH",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VocabKind {
    Character,
    Phoneme,
}

impl fmt::Display for VocabKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VocabKind::Character => write!(f, "character"),
            VocabKind::Phoneme => write!(f, "phoneme"),
        }
    }
}

/// Ordered symbol table with the blank fixed at id 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    kind: VocabKind,
    symbols: Vec<String>,
}

impl Vocabulary {
    /// Blank, a..z, space, apostrophe; V = 29.
    pub fn character() -> Arc<Self> {
        let mut symbols = vec![BLANK.to_string()];
        symbols.extend(('a'..='z').map(|c| c.to_string()));
        symbols.push(" ".to_string());
        symbols.push("'".to_string());
        Arc::new(Vocabulary {
            kind: VocabKind::Character,
            symbols,
        })
    }

    /// Blank, word boundary, 39 phonemes; V = 41.
    pub fn phoneme() -> Arc<Self> {
        let mut symbols = vec![BLANK.to_string(), WORD_BOUNDARY.to_string()];
        symbols.extend(PHONEME_INVENTORY.iter().map(|s| s.to_string()));
        Arc::new(Vocabulary {
            kind: VocabKind::Phoneme,
            symbols,
        })
    }

    pub fn of_kind(kind: VocabKind) -> Arc<Self> {
        match kind {
            VocabKind::Character => Self::character(),
            VocabKind::Phoneme => Self::phoneme(),
        }
    }

    /// Synthetic vocabulary of exactly `width` symbols: the blank plus
    /// numbered placeholders. For diagnostics and oracle tests over tiny
    /// lattices; not a text tokenizer.
    pub fn synthetic(width: usize) -> Arc<Self> {
        assert!(width >= 2, "need blank plus at least one symbol");
        let mut symbols = vec![BLANK.to_string()];
        symbols.extend((1..width).map(|i| format!("s{i}")));
        Arc::new(Vocabulary {
            kind: VocabKind::Character,
            symbols,
        })
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub const fn blank_id(&self) -> usize {
        0
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn id_of(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    /// Symbols as a JSON array in id order.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.symbols).expect("vec of strings always serializes")
    }
}

/// Token ids plus the vocabulary they index into.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub vocab: Arc<Vocabulary>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vocab: Arc<Vocabulary>) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab.len()) {
            return Err(Error::Token(format!(
                "id {bad} out of range for {} vocabulary of size {}",
                vocab.kind(),
                vocab.len()
            )));
        }
        Ok(TokenSequence { ids, vocab })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains_blank(&self) -> bool {
        self.ids.iter().any(|&id| id == self.vocab.blank_id())
    }

    /// Render as text: characters concatenate, phonemes join with spaces and
    /// the boundary token becomes a space.
    pub fn to_text(&self) -> String {
        match self.vocab.kind() {
            VocabKind::Character => self
                .ids
                .iter()
                .filter_map(|&id| self.vocab.symbol(id))
                .collect(),
            VocabKind::Phoneme => {
                let mut words: Vec<Vec<&str>> = vec![Vec::new()];
                for &id in &self.ids {
                    match self.vocab.symbol(id) {
                        Some(WORD_BOUNDARY) => words.push(Vec::new()),
                        Some(sym) => words.last_mut().expect("non-empty").push(sym),
                        None => {}
                    }
                }
                words
                    .iter()
                    .map(|w| w.join("-"))
                    .collect::<Vec<_>>()
                    .join(" ")
            }
        }
    }
}

/// Lowercase, keep only a-z/space/apostrophe, collapse whitespace runs, trim.
pub fn normalize(text: &str) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for ch in text.chars() {
        for low in ch.to_lowercase() {
            match low {
                'a'..='z' | '\'' => {
                    if pending_space && !out.is_empty() {
                        out.push(' ');
                    }
                    pending_space = false;
                    out.push(low);
                }
                c if c.is_whitespace() => pending_space = true,
                _ => {}
            }
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyText);
    }
    Ok(out)
}

/// One id per character of normalized text.
pub fn encode_chars(text: &str) -> Result<TokenSequence> {
    let vocab = Vocabulary::character();
    if text.is_empty() {
        return Err(Error::EmptyText);
    }
    let ids = text
        .chars()
        .map(|c| {
            let s = c.to_string();
            vocab.id_of(&s).ok_or_else(|| {
                Error::Token(format!("character {c:?} not in vocabulary; normalize first"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TokenSequence::new(ids, vocab)
}

/// Inverse of [`encode_chars`]; rejects blank ids (collapse first).
pub fn decode_chars(ids: &[usize]) -> Result<String> {
    let vocab = Vocabulary::character();
    let mut out = String::with_capacity(ids.len());
    for &id in ids {
        if id == vocab.blank_id() {
            return Err(Error::Token("blank id in decode input; collapse first".into()));
        }
        let sym = vocab
            .symbol(id)
            .ok_or_else(|| Error::Token(format!("id {id} out of range")))?;
        out.push_str(sym);
    }
    Ok(out)
}

/// Phoneme encoding result; OOV words fell back to letter-name pronunciations.
#[derive(Clone, Debug)]
pub struct PhonemeEncoding {
    pub tokens: TokenSequence,
    pub oov_words: Vec<String>,
}

impl PhonemeEncoding {
    pub fn is_flagged(&self) -> bool {
        !self.oov_words.is_empty()
    }
}

/// Per-word lexicon lookup, words joined by the boundary token. Out-of-lexicon
/// words are spelled out with letter-name pronunciations and flagged.
pub fn encode_phonemes(text: &str, lexicon: &Lexicon) -> Result<PhonemeEncoding> {
    if text.is_empty() {
        return Err(Error::EmptyText);
    }
    let vocab = Vocabulary::phoneme();
    let boundary = vocab
        .id_of(WORD_BOUNDARY)
        .expect("boundary in phoneme vocabulary");
    let mut ids = Vec::new();
    let mut oov_words = Vec::new();
    for (i, word) in text.split(' ').filter(|w| !w.is_empty()).enumerate() {
        if i > 0 {
            ids.push(boundary);
        }
        match lexicon.pronounce(word) {
            Some(phones) => {
                for ph in phones {
                    ids.push(vocab.id_of(ph).expect("lexicon is vocabulary-checked"));
                }
            }
            None => {
                oov_words.push(word.to_string());
                for ch in word.chars() {
                    for ph in letter_name_phonemes(ch) {
                        ids.push(vocab.id_of(ph).expect("fallback table is in inventory"));
                    }
                }
            }
        }
    }
    if ids.is_empty() {
        return Err(Error::EmptyText);
    }
    let tokens = TokenSequence::new(ids, vocab)?;
    Ok(PhonemeEncoding { tokens, oov_words })
}

/// Letter-name pronunciations for the OOV fallback ("b" reads as "bee").
fn letter_name_phonemes(letter: char) -> &'static [&'static str] {
    match letter {
        'a' => &["EY"],
        'b' => &["B", "IY"],
        'c' => &["S", "IY"],
        'd' => &["D", "IY"],
        'e' => &["IY"],
        'f' => &["EH", "F"],
        'g' => &["JH", "IY"],
        'h' => &["EY", "CH"],
        'i' => &["AY"],
        'j' => &["JH", "EY"],
        'k' => &["K", "EY"],
        'l' => &["EH", "L"],
        'm' => &["EH", "M"],
        'n' => &["EH", "N"],
        'o' => &["OW"],
        'p' => &["P", "IY"],
        'q' => &["K", "Y", "UW"],
        'r' => &["AA", "R"],
        's' => &["EH", "S"],
        't' => &["T", "IY"],
        'u' => &["Y", "UW"],
        'v' => &["V", "IY"],
        'w' => &["D", "AH", "B", "AH", "L", "Y", "UW"],
        'x' => &["EH", "K", "S"],
        'y' => &["W", "AY"],
        'z' => &["Z", "IY"],
        _ => &[],
    }
}
