//! Distant supervision: lexicon matching, pairwise sentence sets and chart
//! labels inherited by every sentence of a pair.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Process,
    Structure,
    Property,
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "process" | "processing" => Ok(Category::Process),
            "structure" => Ok(Category::Structure),
            "property" => Ok(Category::Property),
            other => Err(format!("unknown category `{other}`")),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Process => "process",
            Category::Structure => "structure",
            Category::Property => "property",
        })
    }
}

/// Lowercases and joins whitespace-separated words with `_`.
pub fn canonicalize(name: &str) -> String {
    name.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join("_")
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EntityLexicon {
    entries: BTreeMap<String, Category>,
    max_words: usize,
}

fn parse_error(origin: &Path, line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        file: origin.to_path_buf(),
        line,
        field: Some(field.to_string()),
        message: message.into(),
    }
}

/// Data lines of a TSV file: `(1-based line number, fields)`, skipping
/// blank lines and `#` comments.
fn tsv_rows(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| (i + 1, l.split('\t').collect()))
}

impl EntityLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, category: Category) -> Result<()> {
        let key = canonicalize(name);
        if key.is_empty() {
            return Err(Error::contract("empty entity name"));
        }
        if self.entries.contains_key(&key) {
            return Err(Error::contract(format!("duplicate entity {key}")));
        }
        self.max_words = self.max_words.max(key.split('_').count());
        self.entries.insert(key, category);
        Ok(())
    }

    pub fn category(&self, name: &str) -> Option<Category> {
        self.entries.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Category)> {
        self.entries.iter().map(|(k, &c)| (k.as_str(), c))
    }

    /// `name<TAB>category` lines.
    pub fn parse_tsv(text: &str, origin: &Path) -> Result<Self> {
        let mut lex = Self::new();
        for (line, fields) in tsv_rows(text) {
            if fields.len() != 2 {
                return Err(parse_error(origin, line, "category", format!("expected 2 columns, found {}", fields.len())));
            }
            let cat = fields[1].parse().map_err(|e: String| parse_error(origin, line, "category", e))?;
            lex.insert(fields[0], cat)
                .map_err(|e| parse_error(origin, line, "name", e.to_string()))?;
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, path)
    }

    pub fn to_tsv(&self) -> String {
        self.entries.iter().map(|(k, c)| format!("{k}\t{c}\n")).collect()
    }

    /// Orders two entities Process < Structure < Property, then by name.
    pub fn pair(&self, a: &str, b: &str) -> Result<PairKey> {
        let ca = self
            .category(a)
            .ok_or_else(|| Error::contract(format!("unknown entity {a}")))?;
        let cb = self
            .category(b)
            .ok_or_else(|| Error::contract(format!("unknown entity {b}")))?;
        Ok(if (ca, a) <= (cb, b) {
            PairKey(a.to_string(), b.to_string())
        } else {
            PairKey(b.to_string(), a.to_string())
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairKey(pub String, pub String);

impl fmt::Display for PairKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}", self.0, self.1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mention {
    pub entity: String,
    pub start: usize,
    pub end: usize,
}

/// Max-span matching. Spans strictly inside a longer match are dropped;
/// remaining overlaps keep the longer span, then the leftmost.
pub fn match_mentions(tokens: &[String], lexicon: &EntityLexicon) -> Vec<Mention> {
    let toks: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
    let mut found = Vec::new();
    for start in 0..toks.len() {
        for len in 1..=lexicon.max_words.min(toks.len() - start) {
            let name = toks[start..start + len].join("_");
            if lexicon.entries.contains_key(&name) {
                found.push(Mention {
                    entity: name,
                    start,
                    end: start + len,
                });
            }
        }
    }
    found.sort_by_key(|m| (std::cmp::Reverse(m.end - m.start), m.start));
    let mut taken = vec![false; toks.len()];
    let mut out = Vec::new();
    for m in found {
        if taken[m.start..m.end].iter().any(|&t| t) {
            continue;
        }
        taken[m.start..m.end].iter_mut().for_each(|t| *t = true);
        out.push(m);
    }
    out.sort_by_key(|m| m.start);
    out
}

/// A sentence of a pair's set with the first mention position of each
/// entity (`p1` for `pair.0`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SentenceRef {
    pub sentence: usize,
    pub p1: usize,
    pub p2: usize,
}

/// Every sentence mentioning both entities of a pair, keyed by the pair.
pub fn build_sentence_sets(
    corpus: &[Vec<String>],
    lexicon: &EntityLexicon,
) -> Result<BTreeMap<PairKey, Vec<SentenceRef>>> {
    let mut sets: BTreeMap<PairKey, Vec<SentenceRef>> = BTreeMap::new();
    for (s, tokens) in corpus.iter().enumerate() {
        let mut first: BTreeMap<String, usize> = BTreeMap::new();
        for m in match_mentions(tokens, lexicon) {
            first.entry(m.entity).or_insert(m.start);
        }
        let ents: Vec<(&String, &usize)> = first.iter().collect();
        for i in 0..ents.len() {
            for j in i + 1..ents.len() {
                let key = lexicon.pair(ents[i].0, ents[j].0)?;
                let (p1, p2) = if &key.0 == ents[i].0 {
                    (*ents[i].1, *ents[j].1)
                } else {
                    (*ents[j].1, *ents[i].1)
                };
                sets.entry(key).or_default().push(SentenceRef { sentence: s, p1, p2 });
            }
        }
    }
    Ok(sets)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChartEdge {
    pub pair: PairKey,
    pub label: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingChart {
    pub name: String,
    pub edges: Vec<ChartEdge>,
}

impl TrainingChart {
    /// `e_i<TAB>e_j<TAB>true|false` lines. Only Process–Structure and
    /// Structure–Property edges are accepted.
    pub fn parse_tsv(name: &str, text: &str, origin: &Path, lexicon: &EntityLexicon) -> Result<Self> {
        let mut edges = Vec::new();
        for (line, fields) in tsv_rows(text) {
            if fields.len() != 3 {
                return Err(parse_error(origin, line, "label", format!("expected 3 columns, found {}", fields.len())));
            }
            let a = canonicalize(fields[0]);
            let b = canonicalize(fields[1]);
            let ca = lexicon
                .category(&a)
                .ok_or_else(|| parse_error(origin, line, "e_i", format!("unknown entity {a}")))?;
            let cb = lexicon
                .category(&b)
                .ok_or_else(|| parse_error(origin, line, "e_j", format!("unknown entity {b}")))?;
            let kinds = if ca <= cb { (ca, cb) } else { (cb, ca) };
            if !matches!(
                kinds,
                (Category::Process, Category::Structure) | (Category::Structure, Category::Property)
            ) {
                return Err(parse_error(
                    origin,
                    line,
                    "e_j",
                    format!("{ca}-{cb} edges are not allowed in a chart"),
                ));
            }
            let label = match fields[2].trim().to_ascii_lowercase().as_str() {
                "true" => true,
                "false" => false,
                other => return Err(parse_error(origin, line, "label", format!("`{other}` is not true/false"))),
            };
            edges.push(ChartEdge {
                pair: lexicon.pair(&a, &b)?,
                label,
            });
        }
        Ok(Self {
            name: name.to_string(),
            edges,
        })
    }

    pub fn load(path: &Path, lexicon: &EntityLexicon) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::parse_tsv(&name, &text, path, lexicon)
    }

    pub fn to_tsv(&self) -> String {
        self.edges
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", e.pair.0, e.pair.1, e.label))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub pair: PairKey,
    /// Index of the chart the label comes from; `None` for inference-only pairs.
    pub chart: Option<usize>,
    pub label: Option<bool>,
    pub sentences: Vec<SentenceRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakLabels {
    pub pairs: Vec<LabeledPair>,
    /// Chart pairs without any sentence; they cannot be scored.
    pub missing: Vec<(PairKey, usize)>,
}

impl WeakLabels {
    pub fn labeled_sentences(&self) -> usize {
        self.pairs
            .iter()
            .filter(|p| p.label.is_some())
            .map(|p| p.sentences.len())
            .sum()
    }
}

/// Gives every sentence of a charted pair that pair's label.
pub fn weak_label(sets: &BTreeMap<PairKey, Vec<SentenceRef>>, charts: &[TrainingChart]) -> Result<WeakLabels> {
    let mut labels: HashMap<&PairKey, (usize, bool)> = HashMap::new();
    for (c, chart) in charts.iter().enumerate() {
        for e in &chart.edges {
            match labels.get(&e.pair) {
                Some(&(c0, l0)) if l0 != e.label => {
                    return Err(Error::contract(format!(
                        "pair {} is labelled {l0} in chart {} and {} in chart {}",
                        e.pair, charts[c0].name, e.label, chart.name
                    )))
                }
                Some(&(c0, _)) if c0 != c => {
                    return Err(Error::contract(format!(
                        "pair {} appears in charts {} and {}",
                        e.pair, charts[c0].name, chart.name
                    )))
                }
                Some(_) => {}
                None => {
                    labels.insert(&e.pair, (c, e.label));
                }
            }
        }
    }
    let pairs = sets
        .iter()
        .map(|(pair, refs)| {
            let found = labels.get(pair);
            LabeledPair {
                pair: pair.clone(),
                chart: found.map(|x| x.0),
                label: found.map(|x| x.1),
                sentences: refs.clone(),
            }
        })
        .collect();
    let mut missing: Vec<(PairKey, usize)> = labels
        .iter()
        .filter(|(p, _)| !sets.contains_key(**p))
        .map(|(p, (c, _))| ((*p).clone(), *c))
        .collect();
    missing.sort();
    Ok(WeakLabels { pairs, missing })
}
