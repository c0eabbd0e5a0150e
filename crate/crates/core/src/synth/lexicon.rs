use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::scene::WorldConfig;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const FUNCTION_WORDS: [&str; 6] = ["the", "a", "that", "there", "is", "and"];
const OBJECT_NAMES: [&str; 8] = ["ball", "cup", "dog", "cat", "box", "tree", "lamp", "chair"];
const ATTRIBUTE_NAMES: [&str; 6] = ["red", "blue", "green", "small", "large", "striped"];
const RELATION_NAMES: [&str; 7] = ["left-of", "right-of", "above", "below", "holds", "watches", "touches"];

/// Word category of a token id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordKind {
    Special,
    Function,
    Object(usize),
    Attribute(usize),
    Relation(usize),
}

/// Token table of the synthetic grammar. Layout: specials, function words,
/// object classes, attribute classes, relation classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    object_classes: usize,
    attribute_classes: usize,
    relation_classes: usize,
    index: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    object_classes: usize,
    attribute_classes: usize,
    relation_classes: usize,
    specials: BTreeMap<String, usize>,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;
    fn try_from(r: VocabRepr) -> Result<Self> {
        let expected = SPECIALS.len() + FUNCTION_WORDS.len() + r.object_classes + r.attribute_classes + r.relation_classes;
        if r.tokens.len() != expected {
            return Err(Error::InvalidArgument(format!("vocabulary lists {} tokens, layout needs {expected}", r.tokens.len())));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if r.tokens[i] != *s {
                return Err(Error::InvalidArgument(format!("token {i} must be {s}")));
            }
        }
        Ok(Self::from_tokens(r.tokens, r.object_classes, r.attribute_classes, r.relation_classes))
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        let specials = ["pad", "bos", "eos", "unk"].iter().zip([PAD, BOS, EOS, UNK]).map(|(k, i)| (k.to_string(), i)).collect();
        VocabRepr {
            tokens: v.tokens,
            object_classes: v.object_classes,
            attribute_classes: v.attribute_classes,
            relation_classes: v.relation_classes,
            specials,
        }
    }
}

fn name(list: &[&str], prefix: &str, i: usize) -> String {
    list.get(i).map_or_else(|| format!("{prefix}{i}"), |s| s.to_string())
}

impl Vocab {
    pub fn for_world(cfg: &WorldConfig) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().chain(FUNCTION_WORDS.iter()).map(|s| s.to_string()).collect();
        tokens.extend((0..cfg.object_classes).map(|i| name(&OBJECT_NAMES, "object", i)));
        tokens.extend((0..cfg.attribute_classes).map(|i| name(&ATTRIBUTE_NAMES, "attribute", i)));
        tokens.extend((0..cfg.relation_classes).map(|i| name(&RELATION_NAMES, "relation", i)));
        Self::from_tokens(tokens, cfg.object_classes, cfg.attribute_classes, cfg.relation_classes)
    }

    fn from_tokens(tokens: Vec<String>, object_classes: usize, attribute_classes: usize, relation_classes: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, object_classes, attribute_classes, relation_classes, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Word ids, with unknown words mapped to `<unk>`.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id(w.as_ref()).unwrap_or(UNK)).collect()
    }

    pub fn word(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", |s| s.as_str())
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.word(i)).collect()
    }

    pub fn sentence(&self, ids: &[usize]) -> String {
        self.decode(ids).join(" ")
    }

    fn function(&self, k: usize) -> usize {
        SPECIALS.len() + k
    }

    pub fn the(&self) -> usize {
        self.function(0)
    }
    pub fn a(&self) -> usize {
        self.function(1)
    }
    pub fn that(&self) -> usize {
        self.function(2)
    }
    pub fn there(&self) -> usize {
        self.function(3)
    }
    pub fn is(&self) -> usize {
        self.function(4)
    }
    pub fn and(&self) -> usize {
        self.function(5)
    }

    fn object_base(&self) -> usize {
        SPECIALS.len() + FUNCTION_WORDS.len()
    }

    pub fn object_word(&self, class: usize) -> usize {
        self.object_base() + class
    }

    pub fn attribute_word(&self, attr: usize) -> usize {
        self.object_base() + self.object_classes + attr
    }

    pub fn relation_word(&self, rel: usize) -> usize {
        self.object_base() + self.object_classes + self.attribute_classes + rel
    }

    pub fn kind(&self, id: usize) -> WordKind {
        let o = self.object_base();
        let a = o + self.object_classes;
        let r = a + self.attribute_classes;
        match id {
            _ if id < SPECIALS.len() => WordKind::Special,
            _ if id < o => WordKind::Function,
            _ if id < a => WordKind::Object(id - o),
            _ if id < r => WordKind::Attribute(id - a),
            _ if id < r + self.relation_classes => WordKind::Relation(id - r),
            _ => WordKind::Special,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_lookup() {
        let v = Vocab::for_world(&WorldConfig::default());
        assert_eq!(v.len(), 4 + 6 + 8 + 6 + 7);
        assert_eq!(v.word(BOS), "<bos>");
        assert_eq!(v.id("ball"), Some(v.object_word(0)));
        assert_eq!(v.kind(v.id("striped").unwrap()), WordKind::Attribute(5));
        assert_eq!(v.kind(v.id("touches").unwrap()), WordKind::Relation(6));
        assert_eq!(v.kind(v.that()), WordKind::Function);
        assert_eq!(v.kind(999), WordKind::Special);
        assert_eq!(v.encode(&["the", "zebra"]), alloc::vec![v.the(), UNK]);
    }

    #[test]
    fn larger_worlds_get_generated_names() {
        let cfg = WorldConfig { object_classes: 10, ..Default::default() };
        let v = Vocab::for_world(&cfg);
        assert_eq!(v.word(v.object_word(9)), "object9");
    }

    #[test]
    fn json_round_trip() {
        let v = Vocab::for_world(&WorldConfig::default());
        let s = serde_json::to_string(&v).unwrap();
        assert!(s.contains(r#""specials":{"bos":1,"eos":2,"pad":0,"unk":3}"#), "{s}");
        let back: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        let broken = s.replace("<bos>", "<start>");
        assert!(serde_json::from_str::<Vocab>(&broken).is_err());
    }
}
