//! Vocabulary, byte-level tokenizer training, encoding and decoding.
//!
//! Token ids `0..256` are always the single bytes, so every input text is
//! encodable. Structural tags such as `<|dep|>` are atomic entries that are
//! matched before any ordinary token and never split.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEP_TAG: &str = "<|dep|>";
pub const START_OF_CLAIM_TAG: &str = "<|start_of_claim|>";
pub const END_OF_CLAIM_TAG: &str = "<|end_of_claim|>";

/// Tags every vocabulary must carry.
pub const REQUIRED_TAGS: [&str; 3] = [DEP_TAG, START_OF_CLAIM_TAG, END_OF_CLAIM_TAG];

#[derive(Debug, Error)]
pub enum TokenError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("target vocabulary size {requested} is below the minimum {minimum} (byte alphabet + special tags)")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("unknown token id {0}")]
    UnknownToken(u32),
    #[error("no vocabulary entry covers the input at byte offset {offset}")]
    OutOfAlphabet { offset: usize },
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("vocabulary i/o: {0}")]
    Io(#[from] io::Error),
    #[error("vocabulary json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Index into a [`Vocab`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

/// How the manual-typing cost of a token is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeystrokeUnit {
    /// Unicode scalar values of the decoded text.
    #[default]
    Char,
    /// UTF-8 bytes.
    Byte,
}

impl FromStr for KeystrokeUnit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "char" => Ok(Self::Char),
            "byte" => Ok(Self::Byte),
            other => Err(format!(
                "unknown keystroke unit `{other}` (expected char or byte)"
            )),
        }
    }
}

impl fmt::Display for KeystrokeUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Char => "char",
            Self::Byte => "byte",
        })
    }
}

/// Ids of the three structural tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TagIds {
    pub dep: TokenId,
    pub start_of_claim: TokenId,
    pub end_of_claim: TokenId,
}

/// Immutable bidirectional token table.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<Vec<u8>>,
    special: Vec<bool>,
    lookup: HashMap<Vec<u8>, TokenId>,
    /// Special tag byte strings, longest first.
    special_order: Vec<(Vec<u8>, TokenId)>,
    max_token_len: usize,
    tags: TagIds,
}

/// On-disk form: `tokens` gives surface texts in id order and `special`
/// flags structural entries. Tokens that are not valid UTF-8 on their own
/// (partial multi-byte sequences) carry their exact bytes in `raw_bytes`,
/// keyed by decimal index.
#[derive(Debug, Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    special: Vec<u32>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    raw_bytes: BTreeMap<String, Vec<u8>>,
}

impl Vocab {
    /// Builds a vocabulary from raw entries. Every required tag must be
    /// present and flagged special.
    pub fn from_entries(tokens: Vec<Vec<u8>>, special_ids: &[u32]) -> Result<Self, TokenError> {
        let mut special = vec![false; tokens.len()];
        for &id in special_ids {
            let slot = special.get_mut(id as usize).ok_or_else(|| {
                TokenError::InvalidVocab(format!("special index {id} out of range"))
            })?;
            *slot = true;
        }

        let mut lookup = HashMap::with_capacity(tokens.len());
        let mut special_order = Vec::new();
        let mut max_token_len = 0;
        for (i, bytes) in tokens.iter().enumerate() {
            let id = TokenId(i as u32);
            if bytes.is_empty() {
                return Err(TokenError::InvalidVocab(format!(
                    "token {i} has empty surface text"
                )));
            }
            if lookup.insert(bytes.clone(), id).is_some() {
                return Err(TokenError::InvalidVocab(format!(
                    "duplicate surface text {:?} at index {i}",
                    String::from_utf8_lossy(bytes)
                )));
            }
            if special[i] {
                special_order.push((bytes.clone(), id));
            } else {
                max_token_len = max_token_len.max(bytes.len());
            }
        }
        special_order.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));

        let tag = |name: &str| -> Result<TokenId, TokenError> {
            match lookup.get(name.as_bytes()) {
                Some(&id) if special[id.index()] => Ok(id),
                Some(_) => Err(TokenError::InvalidVocab(format!(
                    "{name} is present but not flagged special"
                ))),
                None => Err(TokenError::InvalidVocab(format!(
                    "missing required special tag {name}"
                ))),
            }
        };
        let tags = TagIds {
            dep: tag(DEP_TAG)?,
            start_of_claim: tag(START_OF_CLAIM_TAG)?,
            end_of_claim: tag(END_OF_CLAIM_TAG)?,
        };

        Ok(Self {
            tokens,
            special,
            lookup,
            special_order,
            max_token_len,
            tags,
        })
    }

    /// The 256 single bytes followed by the required tags.
    pub fn byte_level() -> Self {
        let (tokens, special) = base_entries();
        Self::from_entries(tokens, &special).expect("byte-level vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tags(&self) -> TagIds {
        self.tags
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id.index() < self.tokens.len()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.special.get(id.index()).copied().unwrap_or(false)
    }

    /// Id of an exact surface string, special or not.
    pub fn token_id(&self, text: &str) -> Option<TokenId> {
        self.lookup.get(text.as_bytes()).copied()
    }

    pub fn token_bytes(&self, id: TokenId) -> Result<&[u8], TokenError> {
        self.tokens
            .get(id.index())
            .map(Vec::as_slice)
            .ok_or(TokenError::UnknownToken(id.0))
    }

    /// Surface text of one token. Partial UTF-8 sequences decode lossily.
    pub fn decode(&self, id: TokenId) -> Result<Cow<'_, str>, TokenError> {
        self.token_bytes(id).map(String::from_utf8_lossy)
    }

    /// Concatenated surface text of a token sequence.
    pub fn decode_all(&self, ids: &[TokenId]) -> Result<String, TokenError> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.token_bytes(id)?);
        }
        Ok(match String::from_utf8(out) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Manual-typing cost of a token: the length of its decoded text.
    pub fn text_len(&self, id: TokenId, unit: KeystrokeUnit) -> Result<usize, TokenError> {
        let bytes = self.token_bytes(id)?;
        Ok(match unit {
            KeystrokeUnit::Byte => bytes.len(),
            KeystrokeUnit::Char => String::from_utf8_lossy(bytes).chars().count(),
        })
    }

    /// Splits `text` into special tags and greedy longest-prefix matches over
    /// the ordinary entries.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, TokenError> {
        let bytes = text.as_bytes();
        let mut out = Vec::with_capacity(bytes.len() / 3 + 1);
        let mut pos = 0;
        while pos < bytes.len() {
            if let Some((tag, id)) = self.special_at(bytes, pos) {
                out.push(id);
                pos += tag;
                continue;
            }
            let end = self.next_special(bytes, pos).unwrap_or(bytes.len());
            self.encode_plain(bytes, pos, end, &mut out)?;
            pos = end;
        }
        Ok(out)
    }

    fn special_at(&self, bytes: &[u8], pos: usize) -> Option<(usize, TokenId)> {
        self.special_order
            .iter()
            .find(|(tag, _)| bytes[pos..].starts_with(tag))
            .map(|(tag, id)| (tag.len(), *id))
    }

    fn next_special(&self, bytes: &[u8], from: usize) -> Option<usize> {
        (from..bytes.len()).find(|&p| self.special_at(bytes, p).is_some())
    }

    fn encode_plain(
        &self,
        bytes: &[u8],
        mut pos: usize,
        end: usize,
        out: &mut Vec<TokenId>,
    ) -> Result<(), TokenError> {
        while pos < end {
            let longest = self.max_token_len.min(end - pos);
            let hit = (1..=longest).rev().find_map(|len| {
                self.lookup
                    .get(&bytes[pos..pos + len])
                    .filter(|id| !self.special[id.index()])
                    .map(|&id| (len, id))
            });
            let (len, id) = hit.ok_or(TokenError::OutOfAlphabet { offset: pos })?;
            out.push(id);
            pos += len;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenError> {
        let raw = std::fs::read_to_string(path)?;
        Self::from_json(&raw)
    }

    pub fn from_json(raw: &str) -> Result<Self, TokenError> {
        let file: VocabFile = serde_json::from_str(raw)?;
        let mut tokens: Vec<Vec<u8>> = file.tokens.into_iter().map(String::into_bytes).collect();
        for (key, bytes) in file.raw_bytes {
            let idx: usize = key.parse().map_err(|_| {
                TokenError::InvalidVocab(format!("raw_bytes key `{key}` is not an index"))
            })?;
            let slot = tokens.get_mut(idx).ok_or_else(|| {
                TokenError::InvalidVocab(format!("raw_bytes index {idx} out of range"))
            })?;
            *slot = bytes;
        }
        Self::from_entries(tokens, &file.special)
    }

    pub fn to_json(&self) -> String {
        let mut raw_bytes = BTreeMap::new();
        let tokens = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, bytes)| match std::str::from_utf8(bytes) {
                Ok(s) => s.to_owned(),
                Err(_) => {
                    raw_bytes.insert(i.to_string(), bytes.clone());
                    String::from_utf8_lossy(bytes).into_owned()
                }
            })
            .collect();
        let special = (0..self.tokens.len())
            .filter(|&i| self.special[i])
            .map(|i| i as u32)
            .collect();
        let file = VocabFile {
            tokens,
            special,
            raw_bytes,
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

fn base_entries() -> (Vec<Vec<u8>>, Vec<u32>) {
    let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut special = Vec::new();
    for tag in REQUIRED_TAGS {
        special.push(tokens.len() as u32);
        tokens.push(tag.as_bytes().to_vec());
    }
    (tokens, special)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Letter,
    Digit,
    Space,
    Other,
}

fn class_of(c: char) -> CharClass {
    if c.is_alphabetic() {
        CharClass::Letter
    } else if c.is_numeric() {
        CharClass::Digit
    } else if c.is_whitespace() {
        CharClass::Space
    } else {
        CharClass::Other
    }
}

/// Pre-tokenization for training: runs of one character class, with a single
/// leading space glued to the following word (" method").
pub(crate) fn pretokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut chunks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        let (c, next) = (chars[i].1, chars.get(i + 1).map(|x| x.1));
        let mut j = i + 1;
        let class = match (c, next) {
            (' ', Some(n)) if class_of(n) != CharClass::Space => {
                j = i + 2;
                class_of(n)
            }
            _ => class_of(c),
        };
        while j < chars.len() && class_of(chars[j].1) == class {
            // leave a trailing space to prefix the next word
            if class == CharClass::Space
                && chars[j].1 == ' '
                && chars
                    .get(j + 1)
                    .is_some_and(|x| class_of(x.1) != CharClass::Space)
            {
                break;
            }
            j += 1;
        }
        let end = chars.get(j).map_or(text.len(), |x| x.0);
        chunks.push(&text[start..end]);
        i = j;
    }
    chunks
}

/// Trains a byte-level BPE vocabulary.
///
/// Multi-byte characters seen in the corpus become whole-character entries
/// first (most frequent first), then pair merges are chosen greedily by
/// weighted pair frequency, ties going to the smallest `(left, right)` id
/// pair. Special tags in the corpus are removed before counting.
pub fn train_tokenizer<I, S>(corpus: I, target_vocab_size: usize) -> Result<Vocab, TokenError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let (mut tokens, special) = base_entries();
    let minimum = tokens.len();
    if target_vocab_size < minimum {
        return Err(TokenError::VocabTooSmall {
            requested: target_vocab_size,
            minimum,
        });
    }

    let mut chunk_freq: BTreeMap<String, u64> = BTreeMap::new();
    let mut any_text = false;
    for text in corpus {
        let text = text.as_ref();
        if text.is_empty() {
            continue;
        }
        any_text = true;
        for segment in split_out_tags(text) {
            for chunk in pretokenize(segment) {
                *chunk_freq.entry(chunk.to_owned()).or_default() += 1;
            }
        }
    }
    if !any_text {
        return Err(TokenError::EmptyCorpus);
    }

    let mut index: HashMap<Vec<u8>, u32> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();

    let mut char_freq: BTreeMap<char, u64> = BTreeMap::new();
    for (chunk, &n) in &chunk_freq {
        for c in chunk.chars().filter(|c| c.len_utf8() > 1) {
            *char_freq.entry(c).or_default() += n;
        }
    }
    let mut chars: Vec<(char, u64)> = char_freq.into_iter().collect();
    chars.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    for (c, _) in chars {
        if tokens.len() >= target_vocab_size {
            break;
        }
        let bytes = c.to_string().into_bytes();
        index.insert(bytes.clone(), tokens.len() as u32);
        tokens.push(bytes);
    }

    let mut words: Vec<(Vec<u32>, u64)> = chunk_freq
        .iter()
        .map(|(chunk, &n)| {
            let mut symbols = Vec::with_capacity(chunk.len());
            let mut buf = [0u8; 4];
            for c in chunk.chars() {
                let enc = c.encode_utf8(&mut buf).as_bytes();
                match index.get(enc) {
                    Some(&id) if enc.len() > 1 => symbols.push(id),
                    _ => symbols.extend(enc.iter().map(|&b| b as u32)),
                }
            }
            (symbols, n)
        })
        .collect();

    while tokens.len() < target_vocab_size {
        let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
        for (symbols, n) in &words {
            for w in symbols.windows(2) {
                *pairs.entry((w[0], w[1])).or_default() += n;
            }
        }
        let Some((&(left, right), _)) = pairs
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
        else {
            break;
        };
        let mut merged = tokens[left as usize].clone();
        merged.extend_from_slice(&tokens[right as usize]);
        let new_id = match index.get(&merged) {
            Some(&id) => id,
            None => {
                let id = tokens.len() as u32;
                index.insert(merged.clone(), id);
                tokens.push(merged);
                id
            }
        };
        for (symbols, _) in &mut words {
            apply_merge(symbols, left, right, new_id);
        }
    }

    Vocab::from_entries(tokens, &special)
}

fn apply_merge(symbols: &mut Vec<u32>, left: u32, right: u32, new_id: u32) {
    if symbols.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(new_id);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    *symbols = out;
}

fn split_out_tags(text: &str) -> Vec<&str> {
    let mut parts = vec![text];
    for tag in REQUIRED_TAGS {
        parts = parts.into_iter().flat_map(|p| p.split(tag)).collect();
    }
    parts.retain(|p| !p.is_empty());
    parts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abab_learns_ab() {
        let vocab = train_tokenizer(["abab"], 256 + 3 + 1).unwrap();
        assert_eq!(vocab.len(), 260);
        let ab = vocab.token_id("ab").expect("merged unit present");
        assert_eq!(vocab.encode("abab").unwrap(), vec![ab, ab]);
    }

    #[test]
    fn single_char_corpus_has_no_merges() {
        let vocab = train_tokenizer(["x"], 10_000).unwrap();
        assert_eq!(vocab.len(), 256 + 3);
    }

    #[test]
    fn training_errors() {
        assert!(matches!(
            train_tokenizer(Vec::<String>::new(), 500),
            Err(TokenError::EmptyCorpus)
        ));
        assert!(matches!(
            train_tokenizer([""], 500),
            Err(TokenError::EmptyCorpus)
        ));
        assert!(matches!(
            train_tokenizer(["abc"], 258),
            Err(TokenError::VocabTooSmall { minimum: 259, .. })
        ));
    }

    #[test]
    fn tags_are_atomic() {
        let vocab = train_tokenizer(["claim 1<|dep|>claim 2 <|dep|>"], 300).unwrap();
        let ids = vocab.encode("<|dep|>").unwrap();
        assert_eq!(ids, vec![vocab.tags().dep]);
        assert!(vocab.is_special(ids[0]));
        assert_eq!(vocab.decode(ids[0]).unwrap(), "<|dep|>");
        let mixed = vocab.encode("x<|dep|>y").unwrap();
        assert_eq!(mixed.len(), 3);
        assert_eq!(mixed[1], vocab.tags().dep);
    }

    #[test]
    fn empty_text_encodes_to_nothing() {
        assert!(Vocab::byte_level().encode("").unwrap().is_empty());
    }

    #[test]
    fn leading_space_is_counted() {
        let vocab = train_tokenizer(["1. A method method method"], 2000).unwrap();
        let id = vocab.token_id(" method").expect(" method learned");
        assert_eq!(vocab.decode(id).unwrap(), " method");
        assert_eq!(vocab.text_len(id, KeystrokeUnit::Char).unwrap(), 7);
        let ids = vocab.encode("1. A method").unwrap();
        assert_eq!(vocab.decode_all(&ids).unwrap(), "1. A method");
    }

    #[test]
    fn unknown_id_is_an_error() {
        let vocab = Vocab::byte_level();
        assert!(matches!(
            vocab.decode(TokenId(9999)),
            Err(TokenError::UnknownToken(9999))
        ));
    }

    #[test]
    fn out_of_alphabet_with_external_vocab() {
        let mut tokens: Vec<Vec<u8>> = vec![b"a".to_vec(), b"b".to_vec()];
        tokens.extend(REQUIRED_TAGS.iter().map(|t| t.as_bytes().to_vec()));
        let vocab = Vocab::from_entries(tokens, &[2, 3, 4]).unwrap();
        assert!(matches!(
            vocab.encode("abz"),
            Err(TokenError::OutOfAlphabet { offset: 2 })
        ));
    }

    #[test]
    fn external_vocab_must_carry_tags() {
        let err = Vocab::from_json(r#"{"tokens":["a","b"],"special":[]}"#).unwrap_err();
        assert!(matches!(err, TokenError::InvalidVocab(_)));
        let err = Vocab::from_json(r#"{"tokens":["a","","<|dep|>"],"special":[2]}"#).unwrap_err();
        assert!(matches!(err, TokenError::InvalidVocab(_)));
    }

    #[test]
    fn json_round_trip_keeps_byte_tokens() {
        let vocab = train_tokenizer(["héllo wörld héllo"], 300).unwrap();
        let back = Vocab::from_json(&vocab.to_json()).unwrap();
        assert_eq!(back.len(), vocab.len());
        for i in 0..vocab.len() as u32 {
            assert_eq!(
                back.token_bytes(TokenId(i)).unwrap(),
                vocab.token_bytes(TokenId(i)).unwrap()
            );
            assert_eq!(back.is_special(TokenId(i)), vocab.is_special(TokenId(i)));
        }
        // multi-byte characters seen in training are whole tokens
        assert!(vocab.token_id("é").is_some());
    }

    #[test]
    fn char_and_byte_units() {
        let vocab = train_tokenizer(["héllo"], 300).unwrap();
        let e = vocab.token_id("é").unwrap();
        assert_eq!(vocab.text_len(e, KeystrokeUnit::Char).unwrap(), 1);
        assert_eq!(vocab.text_len(e, KeystrokeUnit::Byte).unwrap(), 2);
    }

    #[test]
    fn pretokenize_shapes() {
        assert_eq!(pretokenize("1. A method"), vec!["1", ".", " A", " method"]);
        assert_eq!(pretokenize("a  b"), vec!["a", " ", " b"]);
        assert_eq!(pretokenize("x,\ny"), vec!["x", ",", "\n", "y"]);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["the device of claim 1", "the method of claim 2, wherein"];
        let a = train_tokenizer(corpus, 320).unwrap();
        let b = train_tokenizer(corpus, 320).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }
}
