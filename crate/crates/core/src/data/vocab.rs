use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::TableSet;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Dense token ↔ id bijection. Ids 0..4 are reserved for padding, unknown,
/// start and end; the rest are sorted lexicographically.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Reserved tokens followed by the sorted, de-duplicated `tokens`.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = tokens
            .into_iter()
            .map(Into::into)
            .filter(|t| !RESERVED.contains(&t.as_str()))
            .collect();
        let all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(set).collect();
        Self::from(all)
    }

    /// Summary tokens plus every entity, type and value in the tables.
    pub fn from_training(games: &[TableSet]) -> Self {
        let mut tokens: Vec<&str> = Vec::new();
        for g in games {
            tokens.extend(g.summary.iter().map(String::as_str));
            for r in g.records() {
                tokens.extend([r.entity.as_str(), r.rtype.as_str(), r.value.as_str()]);
            }
        }
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Never true: reserved tokens are always present.
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or the unknown id.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Appends filler tokens until the vocabulary has `size` entries.
    pub fn pad_to(&mut self, size: usize) {
        let mut k = 0;
        while self.tokens.len() < size {
            let filler = format!("<extra_{k}>");
            k += 1;
            if self.index.contains_key(&filler) {
                continue;
            }
            self.index.insert(filler.clone(), self.tokens.len());
            self.tokens.push(filler);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::from_tokens(["b", "a", "b", "</s>"]);
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert_eq!(v.token(UNK), Some("<unk>"));
        assert_eq!(v.token(BOS), Some("<s>"));
        assert_eq!(v.token(EOS), Some("</s>"));
        assert_eq!(v.get("a"), Some(4));
        assert_eq!(v.get("b"), Some(5));
    }

    #[test]
    fn unseen_tokens_map_to_unknown() {
        let v = Vocabulary::from_tokens(["x"]);
        assert_eq!(v.id("never-seen"), UNK);
    }

    #[test]
    fn ids_are_dense_bijection() {
        let v = Vocabulary::from_tokens(["q", "r", "s"]);
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.get(t), Some(i));
        }
    }

    #[test]
    fn pad_to_reaches_requested_size() {
        let mut v = Vocabulary::from_tokens(["q"]);
        v.pad_to(40);
        assert_eq!(v.len(), 40);
        assert_eq!(v.get("<extra_0>"), Some(5));
    }
}
