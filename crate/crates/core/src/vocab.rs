use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SEP: usize = 2;
const SPECIALS: [&str; 3] = ["[PAD]", "[UNK]", "[SEP]"];

/// Token ↔ id table. Ids 0..3 are `[PAD]`, `[UNK]`, `[SEP]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.add(s);
        }
        v
    }

    /// Vocabulary with anonymised entity slots `@ent0 .. @ent{n-1}` directly
    /// after the specials.
    pub fn with_entity_slots(n: usize) -> Self {
        let mut v = Self::new();
        for i in 0..n {
            v.add(&format!("@ent{i}"));
        }
        v
    }

    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
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
}

impl Serialize for Vocab {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        if tokens.len() < SPECIALS.len() || tokens[..3] != SPECIALS {
            return Err(serde::de::Error::custom("vocabulary must start with [PAD], [UNK], [SEP]"));
        }
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in &tokens {
            if v.get(t).is_some() {
                return Err(serde::de::Error::custom(format!("duplicate token {t}")));
            }
            v.add(t);
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_and_slots() {
        let mut v = Vocab::with_entity_slots(3);
        assert_eq!(v.id("[SEP]"), SEP);
        assert_eq!(v.id("@ent2"), 5);
        assert_eq!(v.id("nope"), UNK);
        let a = v.add("alloy");
        assert_eq!(v.add("alloy"), a);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<Vocab>(r#"["a","b"]"#).is_err());
    }
}
