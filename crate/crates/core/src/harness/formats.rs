//! On-disk formats: question and corpus JSONL, vocabulary building and
//! per-epoch re-anonymization.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::quoted_field;
use crate::error::{Error, Result};
use crate::reader::Question;
use crate::vocab::Vocab;

pub const ENTITY_PREFIX: &str = "@ent";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub relation: String,
    pub entity: String,
}

/// One line of a question file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionRecord {
    pub id: String,
    pub query: QueryRecord,
    pub paragraphs: Vec<Vec<String>>,
    pub candidates: Vec<String>,
    pub answer: String,
    /// Entity id → `[paragraph, position]` pairs.
    pub mentions: BTreeMap<String, Vec<(usize, usize)>>,
}

/// One line of a corpus file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SentenceRecord {
    pub tokens: Vec<String>,
}

impl QuestionRecord {
    /// Relation words (split on `&` and `_`) followed by the query entity.
    pub fn query_words(&self) -> Vec<&str> {
        self.query
            .relation
            .split(['&', '_'])
            .filter(|w| !w.is_empty())
            .chain(std::iter::once(self.query.entity.as_str()))
            .collect()
    }

    pub fn to_question(&self, vocab: &Vocab) -> Result<Question> {
        let q = Question {
            id: self.id.clone(),
            query_relation: self.query.relation.clone(),
            query_entity: self.query.entity.clone(),
            query_tokens: self.query_words().iter().map(|w| vocab.id(w)).collect(),
            paragraphs: self
                .paragraphs
                .iter()
                .map(|p| p.iter().map(|w| vocab.id(w)).collect())
                .collect(),
            candidates: self.candidates.clone(),
            answer: self.answer.clone(),
            mentions: self.mentions.clone(),
        };
        q.validate()?;
        Ok(q)
    }

    /// Every entity id the question refers to.
    pub fn entities(&self) -> BTreeSet<&str> {
        std::iter::once(self.query.entity.as_str())
            .chain(self.candidates.iter().map(String::as_str))
            .chain(self.mentions.keys().map(String::as_str))
            .collect()
    }

    /// Renames every `@entK` through a fresh random injection into
    /// `0..slots` and shuffles the candidate order.
    pub fn reanonymize<R: Rng + ?Sized>(&self, slots: usize, rng: &mut R) -> Result<Self> {
        let ents: Vec<&str> = self
            .entities()
            .into_iter()
            .filter(|e| e.starts_with(ENTITY_PREFIX))
            .collect();
        if ents.len() > slots {
            return Err(Error::Config(format!(
                "question {} uses {} anonymized entities but only {slots} slots exist",
                self.id,
                ents.len()
            )));
        }
        let mut ids: Vec<usize> = (0..slots).collect();
        ids.shuffle(rng);
        let map: BTreeMap<&str, String> = ents
            .iter()
            .zip(ids)
            .map(|(e, i)| (*e, format!("{ENTITY_PREFIX}{i}")))
            .collect();
        let rename = |w: &str| map.get(w).cloned().unwrap_or_else(|| w.to_string());
        let mut candidates: Vec<String> = self.candidates.iter().map(|c| rename(c)).collect();
        candidates.shuffle(rng);
        Ok(Self {
            id: self.id.clone(),
            query: QueryRecord {
                relation: self.query.relation.clone(),
                entity: rename(&self.query.entity),
            },
            paragraphs: self
                .paragraphs
                .iter()
                .map(|p| p.iter().map(|w| rename(w)).collect())
                .collect(),
            candidates,
            answer: rename(&self.answer),
            mentions: self.mentions.iter().map(|(e, v)| (rename(e), v.clone())).collect(),
        })
    }
}

/// Vocabulary with `slots` entity rows followed by every other token in
/// first-seen order.
pub fn build_vocab<'a>(records: impl IntoIterator<Item = &'a QuestionRecord>, slots: usize) -> Vocab {
    let mut v = Vocab::with_entity_slots(slots);
    for r in records {
        for w in r.query_words() {
            v.add(w);
        }
        for p in &r.paragraphs {
            for w in p {
                v.add(w);
            }
        }
    }
    v
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                let message = e.to_string();
                Error::Parse {
                    file: origin.to_path_buf(),
                    line: i + 1,
                    field: quoted_field(&message),
                    message,
                }
            })
        })
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, path)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Writes `contents`, creating parent directories.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    write_file(path, &(text + "\n"))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        let message = e.to_string();
        Error::Parse {
            file: path.to_path_buf(),
            line: e.line(),
            field: quoted_field(&message),
            message,
        }
    })
}
