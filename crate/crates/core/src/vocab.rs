//! Token vocabulary: a base word/character inventory, the fixed segment and
//! control tokens, and one atomic token per catalog item.
//!
//! Ids are laid out as three contiguous ranges: base tokens first, then the
//! 11 special tokens in [`SPECIAL_TOKENS`] order, then item tokens in catalog
//! order.
//!
//! The base tokenizer splits on whitespace. A word found in the inventory is
//! one token; any other word falls back to characters, the first one bare and
//! the rest as `##c` continuation pieces, with `[unk]` for characters outside
//! the inventory. Decoding joins tokens with single spaces and glues
//! continuation pieces, so `decode(encode(s))` equals `s` with whitespace runs
//! collapsed and trimmed, as long as every character is in the inventory.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, Item};
use crate::error::{Error, Result};

pub const USER: &str = "[user]";
pub const SYSTEM: &str = "[system]";
pub const GOAL: &str = "[goal]";
pub const TOPIC: &str = "[topic]";
pub const ITEM: &str = "[item]";
pub const PROFILE: &str = "[profile]";
pub const SEP: &str = "</k>";
pub const SOS: &str = "[sos]";
pub const EOS: &str = "[eos]";
pub const PAD: &str = "[pad]";
pub const UNK: &str = "[unk]";

pub const SPECIAL_TOKENS: [&str; 11] = [USER, SYSTEM, GOAL, TOPIC, ITEM, PROFILE, SEP, SOS, EOS, PAD, UNK];

const CONTINUATION: &str = "##";

pub type TokenId = u32;

pub fn item_token(id: &str) -> String {
    format!("_{id}_")
}

/// Ordered base inventory: whole words plus character pieces.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseTokenizer {
    pub tokens: Vec<String>,
}

impl BaseTokenizer {
    /// Collects words occurring at least `min_word_count` times and every
    /// character (bare and continuation form). Order: words by descending
    /// count then lexicographic, then characters lexicographic.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, min_word_count: usize) -> Self {
        let mut words: BTreeMap<&str, usize> = BTreeMap::new();
        let mut chars: BTreeMap<char, ()> = BTreeMap::new();
        for t in texts {
            for w in t.split_whitespace() {
                *words.entry(w).or_insert(0) += 1;
                chars.extend(w.chars().map(|c| (c, ())));
            }
        }
        let mut ranked: Vec<(&str, usize)> = words
            .into_iter()
            .filter(|(_, n)| *n >= min_word_count.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens: Vec<String> = ranked.into_iter().map(|(w, _)| w.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for c in chars.keys() {
            for tok in [c.to_string(), format!("{CONTINUATION}{c}")] {
                if seen.insert(tok.clone()) {
                    tokens.push(tok);
                }
            }
        }
        BaseTokenizer { tokens }
    }

    /// Inventory over every text field of a corpus (utterances, labels,
    /// item names, profiles, knowledge triples).
    pub fn from_corpus(c: &Corpus, min_word_count: usize) -> Self {
        let mut texts: Vec<&str> = Vec::new();
        for d in &c.dialogues {
            texts.extend(d.profile.0.iter().map(String::as_str));
            for tr in &d.kb {
                texts.extend([tr.head(), tr.relation(), tr.tail()]);
            }
            for t in &d.turns {
                texts.push(&t.text);
                texts.extend(t.goals.iter().map(String::as_str));
                texts.extend(t.topics.iter().map(String::as_str));
            }
        }
        texts.extend(c.goal_set.iter().map(String::as_str));
        texts.extend(c.topic_set.iter().map(String::as_str));
        texts.extend(c.item_catalog.iter().map(|i| i.name.as_str()));
        for z in crate::serialize::NATURAL_PROMPTS {
            texts.push(z);
        }
        Self::from_texts(texts, min_word_count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenRole {
    Base,
    Special,
    Item,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    roles: Vec<TokenRole>,
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    n_base: usize,
    n_items: usize,
    item_ids: Vec<String>,
    item_index: HashMap<String, usize>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.n_base == other.n_base && self.n_items == other.n_items
    }
}

/// Builds the full vocabulary from a base inventory and an item catalog.
pub fn build_vocabulary(base: &BaseTokenizer, catalog: &[Item]) -> Result<Vocabulary> {
    let mut tokens = Vec::with_capacity(base.tokens.len() + SPECIAL_TOKENS.len() + catalog.len());
    let mut index = HashMap::new();
    for t in &base.tokens {
        if SPECIAL_TOKENS.contains(&t.as_str()) {
            return Err(Error::Vocabulary(format!("base token `{t}` collides with a special token")));
        }
        if index.insert(t.clone(), tokens.len() as TokenId).is_some() {
            return Err(Error::Vocabulary(format!("duplicate base token `{t}`")));
        }
        tokens.push(t.clone());
    }
    let n_base = tokens.len();
    for s in SPECIAL_TOKENS {
        index.insert(s.to_string(), tokens.len() as TokenId);
        tokens.push(s.to_string());
    }
    let mut item_ids = Vec::with_capacity(catalog.len());
    let mut item_index = HashMap::new();
    for it in catalog {
        if item_index.insert(it.id.clone(), item_ids.len()).is_some() {
            return Err(Error::Vocabulary(format!("duplicate item id `{}`", it.id)));
        }
        let tok = item_token(&it.id);
        if index.insert(tok.clone(), tokens.len() as TokenId).is_some() {
            return Err(Error::Vocabulary(format!("item token `{tok}` collides with an existing token")));
        }
        item_ids.push(it.id.clone());
        tokens.push(tok);
    }
    Ok(Vocabulary {
        tokens,
        index,
        n_base,
        n_items: catalog.len(),
        item_ids,
        item_index,
    })
}

enum Piece<'a> {
    Atomic(TokenId),
    Word(&'a str),
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn base_len(&self) -> usize {
        self.n_base
    }

    pub fn item_count(&self) -> usize {
        self.n_items
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn role(&self, id: TokenId) -> TokenRole {
        let i = id as usize;
        if i < self.n_base {
            TokenRole::Base
        } else if i < self.n_base + SPECIAL_TOKENS.len() {
            TokenRole::Special
        } else {
            TokenRole::Item
        }
    }

    fn special(&self, s: &str) -> TokenId {
        self.index[s]
    }

    pub fn sos(&self) -> TokenId {
        self.special(SOS)
    }

    pub fn eos(&self) -> TokenId {
        self.special(EOS)
    }

    pub fn pad(&self) -> TokenId {
        self.special(PAD)
    }

    pub fn unk(&self) -> TokenId {
        self.special(UNK)
    }

    /// Id range of the item tokens.
    pub fn item_range(&self) -> std::ops::Range<usize> {
        let start = self.n_base + SPECIAL_TOKENS.len();
        start..start + self.n_items
    }

    pub fn item_token_id(&self, item_id: &str) -> Option<TokenId> {
        self.item_index
            .get(item_id)
            .map(|&k| (self.item_range().start + k) as TokenId)
    }

    /// Catalog id for an item token id.
    pub fn item_id_of(&self, id: TokenId) -> Option<&str> {
        let r = self.item_range();
        r.contains(&(id as usize))
            .then(|| self.item_ids[id as usize - r.start].as_str())
    }

    fn split_atomic<'a>(&self, chunk: &'a str, out: &mut Vec<Piece<'a>>) {
        let bytes = chunk.as_bytes();
        let mut word_start = 0;
        let mut i = 0;
        while i < bytes.len() {
            let mut hit: Option<(usize, TokenId)> = None;
            if bytes[i] == b'[' || bytes[i] == b'<' {
                for s in SPECIAL_TOKENS {
                    if chunk[i..].starts_with(s) {
                        hit = Some((s.len(), self.index[s]));
                        break;
                    }
                }
            } else if bytes[i] == b'_' {
                if let Some(j) = chunk[i + 1..].find('_') {
                    let cand = &chunk[i..i + 1 + j + 1];
                    if let Some(k) = self.item_index.get(&cand[1..cand.len() - 1]) {
                        hit = Some((cand.len(), (self.item_range().start + k) as TokenId));
                    }
                }
            }
            match hit {
                Some((len, id)) => {
                    if word_start < i {
                        out.push(Piece::Word(&chunk[word_start..i]));
                    }
                    out.push(Piece::Atomic(id));
                    i += len;
                    word_start = i;
                }
                None => i += 1,
            }
        }
        if word_start < bytes.len() {
            out.push(Piece::Word(&chunk[word_start..]));
        }
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut pieces = Vec::new();
        for chunk in text.split_whitespace() {
            self.split_atomic(chunk, &mut pieces);
        }
        let unk = self.unk();
        let mut ids = Vec::with_capacity(pieces.len());
        for p in pieces {
            match p {
                Piece::Atomic(id) => ids.push(id),
                Piece::Word(w) => match self.index.get(w).filter(|&&id| (id as usize) < self.n_base) {
                    Some(&id) => ids.push(id),
                    None => {
                        for (ci, c) in w.chars().enumerate() {
                            let tok = if ci == 0 {
                                c.to_string()
                            } else {
                                format!("{CONTINUATION}{c}")
                            };
                            ids.push(self.index.get(&tok).copied().unwrap_or(unk));
                        }
                    }
                },
            }
        }
        ids
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id);
            if self.role(id) == TokenRole::Base && tok.len() > CONTINUATION.len() && tok.starts_with(CONTINUATION) {
                out.push_str(&tok[CONTINUATION.len()..]);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        out
    }

    fn file(&self) -> VocabFile {
        VocabFile {
            tokens: self.tokens.clone(),
            roles: (0..self.tokens.len()).map(|i| self.role(i as TokenId)).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.file())?)
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        let f: VocabFile = serde_json::from_str(raw)?;
        if f.tokens.len() != f.roles.len() {
            return Err(Error::Vocabulary("token and role lists differ in length".into()));
        }
        let base = BaseTokenizer {
            tokens: f
                .tokens
                .iter()
                .zip(&f.roles)
                .filter(|(_, r)| **r == TokenRole::Base)
                .map(|(t, _)| t.clone())
                .collect(),
        };
        let items: Vec<Item> = f
            .tokens
            .iter()
            .zip(&f.roles)
            .filter(|(_, r)| **r == TokenRole::Item)
            .map(|(t, _)| {
                let id = t.trim_start_matches('_').trim_end_matches('_');
                Item::new(id, id)
            })
            .collect();
        let v = build_vocabulary(&base, &items)?;
        if v.tokens != f.tokens {
            return Err(Error::Vocabulary("token order does not follow the base/special/item layout".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&raw)
    }

    /// SHA-256 of the serialized token list and roles.
    pub fn digest(&self) -> String {
        let json = self.to_json().expect("vocabulary serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
