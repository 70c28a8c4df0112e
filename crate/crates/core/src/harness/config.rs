//! `RunConfig`: one TOML file with every seed, size, path and flag, plus
//! `key.path=value` overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chart::StructureScope;
use crate::error::{Error, Result};
use crate::reader::ReaderConfig;
use crate::relation::CnnConfig;
use crate::tensor::Reduction;
use crate::trainer::TrainMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Every artifact is written below this directory.
    pub out_dir: PathBuf,
    pub wikihop: WikihopConfig,
    pub reader: ReaderConfig,
    pub reader_train: ReaderTrainConfig,
    pub memprofile: MemprofileConfig,
    pub gradcheck: GradcheckConfig,
    pub re_corpus: ReCorpusConfig,
    pub cnn: CnnConfig,
    pub re_train: ReTrainConfig,
    pub chart: ChartConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            wikihop: WikihopConfig::default(),
            reader: ReaderConfig::default(),
            reader_train: ReaderTrainConfig::default(),
            memprofile: MemprofileConfig::default(),
            gradcheck: GradcheckConfig::default(),
            re_corpus: ReCorpusConfig::default(),
            cnn: CnnConfig::default(),
            re_train: ReTrainConfig::default(),
            chart: ChartConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WikihopConfig {
    pub count: usize,
    pub hops: usize,
    pub dev_fraction: f64,
    pub anonymize: bool,
    /// Size of the named-entity pool.
    pub entities: usize,
    /// Number of KB relations. The first half can be asked about, so a
    /// question needs at least `2 * hops`.
    pub relations: usize,
    pub distractor_paragraphs: usize,
    /// Filler sentences mixed into every paragraph. They slow training down
    /// a lot at desk scale.
    pub filler_sentences: usize,
    /// Chance that a distractor paragraph gives some distractor its missing
    /// fact about a different subject.
    pub hard_distractor_rate: f64,
}

impl Default for WikihopConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            hops: 2,
            dev_fraction: 0.2,
            anonymize: true,
            entities: 200,
            relations: 8,
            distractor_paragraphs: 1,
            filler_sentences: 0,
            hard_distractor_rate: 0.1,
        }
    }
}

/// Which reader variant to train or evaluate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReaderVariant {
    /// Two-pass training over all paragraphs.
    #[default]
    Full,
    /// Paragraphs scored separately, max over paragraphs.
    Independent,
    /// Only paragraphs mentioning the answer.
    Oracle,
    /// Every paragraph on one retained tape.
    Naive,
}

impl ReaderVariant {
    pub fn name(self) -> &'static str {
        match self {
            ReaderVariant::Full => "full",
            ReaderVariant::Independent => "independent",
            ReaderVariant::Oracle => "oracle",
            ReaderVariant::Naive => "naive",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReaderTrainConfig {
    pub variant: ReaderVariant,
    pub mode: TrainMode,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Fresh `@entK` assignment and candidate order every epoch.
    pub rerandomize: bool,
    /// Number of `@entK` slots in the vocabulary.
    pub entity_slots: usize,
}

impl Default for ReaderTrainConfig {
    fn default() -> Self {
        Self {
            variant: ReaderVariant::Full,
            mode: TrainMode::Faithful,
            epochs: 5,
            lr: 1e-3,
            warmup_fraction: 0.05,
            weight_decay: 0.0,
            rerandomize: true,
            entity_slots: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemprofileConfig {
    pub paragraphs: Vec<usize>,
    pub paragraph_len: usize,
    pub candidates: usize,
}

impl Default for MemprofileConfig {
    fn default() -> Self {
        Self {
            paragraphs: vec![1, 2, 4, 8],
            paragraph_len: 100,
            candidates: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub tolerance: f64,
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReCorpusConfig {
    pub processes: usize,
    pub structures: usize,
    pub properties: usize,
    /// Mean sentence count per entity pair.
    pub sentences_per_pair: usize,
    /// Probability that a positive pair's sentence carries a trigger.
    pub signal_rate: f64,
    pub positive_rate: f64,
    /// Fraction of pairs placed in some chart; the rest stay unlabeled.
    pub charted_fraction: f64,
    pub train_charts: usize,
    pub test_charts: usize,
}

impl Default for ReCorpusConfig {
    fn default() -> Self {
        Self {
            processes: 8,
            structures: 10,
            properties: 6,
            sentences_per_pair: 50,
            signal_rate: 1.0,
            positive_rate: 0.4,
            charted_fraction: 0.9,
            train_charts: 4,
            test_charts: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub reduction: Reduction,
    /// Optional `word v1 v2 ...` text file of pre-trained vectors.
    pub word_vectors: Option<PathBuf>,
}

impl Default for ReTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 16,
            reduction: Reduction::Mean,
            word_vectors: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChartConfig {
    /// Target properties; empty means every property in the graph.
    pub properties: Vec<String>,
    pub n: usize,
    pub m: usize,
    pub scope: StructureScope,
}

impl Default for ChartConfig {
    fn default() -> Self {
        Self {
            properties: Vec::new(),
            n: 4,
            m: 6,
            scope: StructureScope::Selected,
        }
    }
}

/// Field named by a serde message (`unknown field `x``, `missing field `x``).
pub(crate) fn quoted_field(message: &str) -> Option<String> {
    let start = message.find("field `")? + "field `".len();
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn header(line: &str) -> Option<String> {
    line.trim()
        .strip_prefix('[')
        .map(|h| h.trim_end_matches(']').trim().to_string())
}

/// Dotted key named on the line holding `offset`, given the `field` a serde
/// message reported: `[table]` lines name the table, `key = ...` lines are
/// qualified by the enclosing table.
fn key_at(text: &str, offset: usize, field: Option<String>) -> Option<String> {
    let offset = offset.min(text.len());
    let start = text[..offset].rfind('\n').map_or(0, |i| i + 1);
    let line = text[start..].split('\n').next().unwrap_or("");
    if let Some(h) = header(line) {
        return Some(h);
    }
    let key = field.or_else(|| line.split_once('=').map(|(k, _)| k.trim().to_string()))?;
    let section = text[..start].lines().rev().find_map(header);
    Some(match section {
        Some(sec) => format!("{sec}.{key}"),
        None => key,
    })
}

/// Line defining `dotted` (e.g. `reader_train.epochs`), if any.
fn locate(text: &str, dotted: &str) -> Option<usize> {
    let (section, key) = match dotted.rsplit_once('.') {
        Some((s, k)) => (s, k),
        None => ("", dotted),
    };
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[') {
            current = h.trim_end_matches(']').trim().to_string();
        } else if let Some((k, _)) = line.split_once('=') {
            if current == section && k.trim() == key {
                return Some(i + 1);
            }
        }
    }
    None
}

fn toml_error(file: &Path, text: &str, e: toml::de::Error) -> Error {
    let message = e.message().to_string();
    let (line, field) = match e.span() {
        Some(span) => (line_of(text, span.start), key_at(text, span.start, quoted_field(&message))),
        None => (0, quoted_field(&message)),
    };
    Error::Parse {
        file: file.to_path_buf(),
        line,
        field,
        message,
    }
}

fn set_path(table: &mut toml::Table, path: &[&str], value: toml::Value) -> std::result::Result<(), String> {
    let (last, parents) = path.split_last().ok_or("empty key")?;
    let mut t = table;
    for p in parents {
        let entry = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry.as_table_mut().ok_or_else(|| format!("`{p}` is not a table"))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// `value` as TOML when it parses, otherwise as a bare string.
fn override_value(value: &str) -> toml::Value {
    format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

impl RunConfig {
    /// Parses `text` (read from `file`) and applies `key.path=value` overrides.
    pub fn parse(text: &str, file: &Path, overrides: &[String]) -> Result<Self> {
        let base: RunConfig = toml::from_str(text).map_err(|e| toml_error(file, text, e))?;
        if let Err((field, message)) = base.check() {
            return Err(Error::Parse {
                file: file.to_path_buf(),
                line: locate(text, &field).unwrap_or(0),
                field: Some(field),
                message,
            });
        }
        if overrides.is_empty() {
            return Ok(base);
        }
        let mut table: toml::Table = text.parse().map_err(|e| toml_error(file, text, e))?;
        for (i, o) in overrides.iter().enumerate() {
            let flag_error = |field: &str, message: String| Error::Parse {
                file: PathBuf::from("--set"),
                line: i + 1,
                field: Some(field.to_string()),
                message,
            };
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| flag_error(o, format!("override `{o}` is not key=value")))?;
            let key = key.trim();
            let path: Vec<&str> = key.split('.').collect();
            set_path(&mut table, &path, override_value(value.trim())).map_err(|m| flag_error(key, m))?;
            // Resolve after each override so an error names the flag that caused it.
            let probe: std::result::Result<RunConfig, _> = toml::Value::Table(table.clone()).try_into();
            if let Err(e) = probe {
                let m = e.message().to_string();
                return Err(flag_error(key, m));
            }
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.check().map_err(|(field, message)| {
            // Blame the last override touching the field, else the file.
            let by_flag = overrides.iter().rposition(|o| {
                let key = o.split_once('=').map_or(o.as_str(), |(k, _)| k).trim();
                field == key || field.starts_with(&format!("{key}."))
            });
            match by_flag {
                Some(i) => Error::Parse {
                    file: PathBuf::from("--set"),
                    line: i + 1,
                    field: Some(field),
                    message,
                },
                None => Error::Parse {
                    file: file.to_path_buf(),
                    line: locate(text, &field).unwrap_or(0),
                    field: Some(field),
                    message,
                },
            }
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Range checks, reported as `(dotted field, message)`.
    fn check(&self) -> std::result::Result<(), (String, String)> {
        let fail = |f: &str, m: String| Err((f.to_string(), m));
        if let Err(e) = self.reader.encoder.validate() {
            return fail(&format!("reader.{}", config_field(&e, "encoder")), e.to_string());
        }
        if self.reader.head_dim == 0 {
            return fail("reader.head_dim", "must be positive".into());
        }
        if let Err(e) = self.cnn.validate() {
            return fail(&config_field(&e, "cnn"), e.to_string());
        }
        let w = &self.wikihop;
        if w.hops == 0 {
            return fail("wikihop.hops", "hops must be at least 1".into());
        }
        if w.relations < 2 * w.hops {
            return fail(
                "wikihop.relations",
                format!("{} relations cannot support {}-hop questions", w.relations, w.hops),
            );
        }
        if w.entities < w.hops + 4 {
            return fail("wikihop.entities", format!("{} entities are too few for {} hops", w.entities, w.hops));
        }
        if !(0.0..1.0).contains(&w.dev_fraction) {
            return fail("wikihop.dev_fraction", format!("{} outside [0, 1)", w.dev_fraction));
        }
        if !(0.0..=1.0).contains(&w.hard_distractor_rate) {
            return fail(
                "wikihop.hard_distractor_rate",
                format!("{} outside [0, 1]", w.hard_distractor_rate),
            );
        }
        let t = &self.reader_train;
        if !(t.lr > 0.0) {
            return fail("reader_train.lr", format!("{} is not positive", t.lr));
        }
        if !(0.0..=1.0).contains(&t.warmup_fraction) {
            return fail("reader_train.warmup_fraction", format!("{} outside [0, 1]", t.warmup_fraction));
        }
        if !(t.weight_decay >= 0.0) {
            return fail("reader_train.weight_decay", format!("{} is negative", t.weight_decay));
        }
        if self.memprofile.paragraphs.is_empty() || self.memprofile.paragraphs.contains(&0) {
            return fail("memprofile.paragraphs", "need positive paragraph counts".into());
        }
        if self.memprofile.candidates == 0 || self.memprofile.paragraph_len == 0 {
            return fail("memprofile.candidates", "candidates and paragraph_len must be positive".into());
        }
        let r = &self.re_corpus;
        for (name, v) in [
            ("signal_rate", r.signal_rate),
            ("positive_rate", r.positive_rate),
            ("charted_fraction", r.charted_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(&format!("re_corpus.{name}"), format!("{v} outside [0, 1]"));
            }
        }
        if r.processes == 0 || r.structures == 0 || r.properties == 0 {
            return fail("re_corpus.processes", "every category needs at least one entity".into());
        }
        if r.test_charts == 0 || r.train_charts == 0 {
            return fail("re_corpus.test_charts", "need at least one training and one test chart".into());
        }
        if self.re_train.batch_size == 0 {
            return fail("re_train.batch_size", "must be positive".into());
        }
        if self.chart.n == 0 || self.chart.m == 0 {
            return fail("chart.n", "n and m must be positive".into());
        }
        if !(self.gradcheck.tolerance > 0.0) || !(self.gradcheck.step > 0.0) {
            return fail("gradcheck.tolerance", "tolerance and step must be positive".into());
        }
        Ok(())
    }
}

/// `section.name` from a validation message of the form `section.name ...`.
fn config_field(e: &Error, section: &str) -> String {
    let text = e.to_string();
    let prefix = format!("{section}.");
    text.find(&prefix)
        .map(|i| {
            text[i..]
                .split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '.'))
                .next()
                .unwrap_or(section)
                .to_string()
        })
        .unwrap_or_else(|| section.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, overrides: &[&str]) -> Result<RunConfig> {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        RunConfig::parse(text, Path::new("run.toml"), &o)
    }

    fn field_and_line(e: Error) -> (Option<String>, usize) {
        match e {
            Error::Parse { field, line, .. } => (field, line),
            other => panic!("expected a parse error, got {other}"),
        }
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(parse("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.chart.properties = vec!["toughness".into()];
        cfg.re_train.word_vectors = Some("vec.txt".into());
        assert_eq!(parse(&cfg.to_toml(), &[]).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_names_line_and_field() {
        let text = "seed = 1\n\n[reader_train]\nepochs = 3\nepoch = 4\n";
        let (field, line) = field_and_line(parse(text, &[]).unwrap_err());
        assert_eq!(field.as_deref(), Some("reader_train.epoch"));
        assert_eq!(line, 5);
        let (field, line) = field_and_line(parse("seed = 1\n[bogus]\nx = 1\n", &[]).unwrap_err());
        assert_eq!((field.as_deref(), line), (Some("bogus"), 2));
    }

    #[test]
    fn wrong_type_names_line_and_field() {
        let text = "[wikihop]\ncount = 10\nhops = \"two\"\n";
        let (field, line) = field_and_line(parse(text, &[]).unwrap_err());
        assert_eq!(line, 3);
        assert_eq!(field.as_deref(), Some("wikihop.hops"));
    }

    #[test]
    fn range_errors_point_at_the_key() {
        let text = "[wikihop]\ncount = 10\nhops = 0\n";
        let (field, line) = field_and_line(parse(text, &[]).unwrap_err());
        assert_eq!((field.as_deref(), line), (Some("wikihop.hops"), 3));
        let text = "[reader.encoder]\nmodel_dim = 10\nnum_heads = 4\n";
        let (field, _) = field_and_line(parse(text, &[]).unwrap_err());
        assert_eq!(field.as_deref(), Some("reader.encoder.model_dim"));
    }

    #[test]
    fn overrides_apply_and_are_checked() {
        let cfg = parse("seed = 1\n", &["seed=5", "chart.properties=[\"toughness\"]", "out_dir=elsewhere"]).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.chart.properties, vec!["toughness".to_string()]);
        assert_eq!(cfg.out_dir, PathBuf::from("elsewhere"));
        let (field, line) = field_and_line(parse("", &["seed=1", "wikihop.hopz=2"]).unwrap_err());
        assert_eq!((field.as_deref(), line), (Some("wikihop.hopz"), 2));
        let (field, line) = field_and_line(parse("", &["seed=2", "wikihop.hops=0"]).unwrap_err());
        assert_eq!((field.as_deref(), line), (Some("wikihop.hops"), 2));
        assert!(parse("", &["nonsense"]).is_err());
    }
}
