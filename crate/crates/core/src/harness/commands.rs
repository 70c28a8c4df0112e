//! Every CLI command as a library function of a resolved [`RunConfig`].
//! Artifacts go to fixed paths below `out_dir` (see [`Layout`]).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ReaderVariant, RunConfig};
use super::formats::{
    build_vocab, read_json, read_jsonl, to_jsonl, write_file, write_json, QuestionRecord, SentenceRecord,
};
use super::re_corpus::gen_re_corpus;
use super::wikihop::{gen_wikihop, random_question, SyntheticKb};
use crate::chart::{build_chart, Chart, PsppGraph};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, average_precision, pr_csv, pr_curve, precision_at_recall, PrPoint};
use crate::reader::{oracle_filter, Question, Reader, ReaderConfig};
use crate::relation::cnn::load_word_vectors;
use crate::relation::{
    build_sentence_sets, canonicalize, pair_probability, train_re as fit_cnn, weak_label, CnnConfig, EntityLexicon,
    PairEvidence, PairKey, ReTrainOptions, RelationCnn, SentenceInstance, TrainingChart, WeakLabels,
};
use crate::tensor::gradcheck::{self, GradCheckReport};
use crate::tensor::{Checkpoint, DropoutKey, Graph, Optimizer, ParamStore, Retention, WarmupSchedule};
use crate::trainer::{naive_gradients, naive_train_question, train_question, two_pass_gradients, MemoryReport};
use crate::vocab::Vocab;

/// Artifact locations below `out_dir`.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            root: cfg.out_dir.clone(),
        }
    }

    fn at(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn wikihop_train(&self) -> PathBuf {
        self.at("wikihop/train.jsonl")
    }
    pub fn wikihop_dev(&self) -> PathBuf {
        self.at("wikihop/dev.jsonl")
    }
    pub fn reader_model(&self, v: ReaderVariant) -> PathBuf {
        self.at(&format!("reader/{}.json", v.name()))
    }
    pub fn reader_log(&self, v: ReaderVariant) -> PathBuf {
        self.at(&format!("reader/{}_train.csv", v.name()))
    }
    pub fn reader_eval(&self, v: ReaderVariant) -> PathBuf {
        self.at(&format!("reader/{}_eval.json", v.name()))
    }
    pub fn memprofile_csv(&self) -> PathBuf {
        self.at("memprofile/memprofile.csv")
    }
    pub fn memprofile_json(&self) -> PathBuf {
        self.at("memprofile/reports.json")
    }
    pub fn corpus(&self) -> PathBuf {
        self.at("re/corpus.jsonl")
    }
    pub fn lexicon(&self) -> PathBuf {
        self.at("re/lexicon.tsv")
    }
    pub fn train_chart_dir(&self) -> PathBuf {
        self.at("re/charts/train")
    }
    pub fn test_chart_dir(&self) -> PathBuf {
        self.at("re/charts/test")
    }
    pub fn labels(&self) -> PathBuf {
        self.at("re/labels.json")
    }
    pub fn cnn_model(&self) -> PathBuf {
        self.at("re/cnn.json")
    }
    pub fn cnn_log(&self) -> PathBuf {
        self.at("re/train_re.csv")
    }
    pub fn pr_csv(&self) -> PathBuf {
        self.at("re/pr.csv")
    }
    pub fn re_eval(&self) -> PathBuf {
        self.at("re/eval.json")
    }
    pub fn graph(&self) -> PathBuf {
        self.at("re/graph.json")
    }
    pub fn chart_json(&self) -> PathBuf {
        self.at("chart/chart.json")
    }
    pub fn chart_dot(&self) -> PathBuf {
        self.at("chart/chart.dot")
    }
    pub fn resolved_config(&self) -> PathBuf {
        self.at("config.resolved.toml")
    }
}

/// Logs the resolved configuration and saves it next to the artifacts.
pub fn record_config(cfg: &RunConfig) -> Result<()> {
    let text = cfg.to_toml();
    info!("resolved config:\n{text}");
    write_file(&Layout::new(cfg).resolved_config(), &text)
}

// ---------------------------------------------------------------- reader

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenWikihopSummary {
    pub train: usize,
    pub dev: usize,
}

pub fn cmd_gen_wikihop(cfg: &RunConfig) -> Result<GenWikihopSummary> {
    let w = &cfg.wikihop;
    let kb = SyntheticKb::new(w.entities, w.relations);
    let questions = gen_wikihop(&kb, w, w.count, cfg.seed)?;
    let dev = ((w.count as f64) * w.dev_fraction).round() as usize;
    let (train, dev_q) = questions.split_at(w.count - dev);
    let lay = Layout::new(cfg);
    write_file(&lay.wikihop_train(), &to_jsonl(train))?;
    write_file(&lay.wikihop_dev(), &to_jsonl(dev_q))?;
    info!("wrote {} training and {} dev questions", train.len(), dev_q.len());
    Ok(GenWikihopSummary {
        train: train.len(),
        dev: dev_q.len(),
    })
}

/// Trained reader with everything needed to score new questions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReaderArtifact {
    pub variant: ReaderVariant,
    pub config: ReaderConfig,
    pub vocab: Vocab,
    pub checkpoint: Checkpoint,
}

impl ReaderArtifact {
    pub fn model(&self) -> Result<(Reader, ParamStore)> {
        let mut store = ParamStore::new();
        let reader = Reader::init(&self.config, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
        store.load_checkpoint(&self.checkpoint)?;
        Ok((reader, store))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReaderSummary {
    pub variant: ReaderVariant,
    pub epoch_losses: Vec<f64>,
    pub updates: u64,
}

fn updates_per_question(cfg: &RunConfig, q: &QuestionRecord) -> u64 {
    use crate::trainer::TrainMode;
    match (cfg.reader_train.variant, cfg.reader_train.mode) {
        (ReaderVariant::Full, TrainMode::Faithful) => q.paragraphs.len() as u64,
        (ReaderVariant::Oracle, TrainMode::Faithful) => {
            let keep = (0..q.paragraphs.len())
                .filter(|&k| q.mentions.get(&q.answer).is_some_and(|v| v.iter().any(|&(p, _)| p == k)))
                .count();
            keep.max(1) as u64
        }
        _ => 1,
    }
}

/// Trains one reader variant on `records`.
pub fn train_reader_on(cfg: &RunConfig, records: &[QuestionRecord]) -> Result<(ReaderArtifact, TrainReaderSummary)> {
    let t = &cfg.reader_train;
    if records.is_empty() {
        return Err(Error::contract("no training questions"));
    }
    let vocab = build_vocab(records, t.entity_slots);
    let mut rcfg = cfg.reader.clone();
    rcfg.encoder.vocab_size = vocab.len();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let reader = Reader::init(&rcfg, &mut store, &mut rng)?;

    let per_epoch: u64 = records.iter().map(|q| updates_per_question(cfg, q)).sum();
    let total = (per_epoch * t.epochs as u64).max(1);
    let mut opt = Optimizer::adam(t.lr)?
        .with_weight_decay(t.weight_decay)?
        .with_schedule(WarmupSchedule::new(t.lr, t.warmup_fraction, total)?);
    let dropout = rcfg.encoder.dropout_p > 0.0;

    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut epoch_losses = Vec::with_capacity(t.epochs);
    let mut step = 0u64;
    for epoch in 0..t.epochs {
        let mut erng = ChaCha8Rng::seed_from_u64(cfg.seed);
        erng.set_stream(1 + epoch as u64);
        order.shuffle(&mut erng);
        let mut loss_sum = 0.0;
        for &i in &order {
            let rec = match t.rerandomize {
                true => records[i].reanonymize(t.entity_slots, &mut erng)?,
                false => records[i].clone(),
            };
            let q = rec.to_question(&vocab)?;
            let key = dropout.then_some(DropoutKey { seed: cfg.seed, step });
            step += 1;
            loss_sum += match t.variant {
                ReaderVariant::Full => mean(&train_question(&reader, &mut store, &q, &mut opt, t.mode, key)?.losses),
                ReaderVariant::Oracle => {
                    let q = oracle_filter(&q)?;
                    mean(&train_question(&reader, &mut store, &q, &mut opt, t.mode, key)?.losses)
                }
                ReaderVariant::Naive => naive_train_question(&reader, &mut store, &q, &mut opt, key)?.loss,
                ReaderVariant::Independent => {
                    let mut g = Graph::new(Retention::Retain);
                    if let Some(k) = key {
                        g = g.with_dropout(k);
                    }
                    let loss = reader.independent_loss(&mut g, &store, &q)?;
                    g.backward(&loss)?;
                    opt.step(&mut store, &g.param_grads())?;
                    loss.item()
                }
            };
        }
        let l = loss_sum / records.len() as f64;
        if !l.is_finite() {
            return Err(Error::Numeric(format!("non-finite mean loss in epoch {epoch}")));
        }
        info!("{} epoch {epoch}: mean loss {l:.6}", t.variant.name());
        epoch_losses.push(l);
    }
    let artifact = ReaderArtifact {
        variant: t.variant,
        config: rcfg,
        vocab,
        checkpoint: store.to_checkpoint(),
    };
    let summary = TrainReaderSummary {
        variant: t.variant,
        epoch_losses,
        updates: opt.steps_taken(),
    };
    Ok((artifact, summary))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

pub fn cmd_train_reader(cfg: &RunConfig) -> Result<TrainReaderSummary> {
    let lay = Layout::new(cfg);
    let records: Vec<QuestionRecord> = read_jsonl(&lay.wikihop_train())?;
    let (artifact, summary) = train_reader_on(cfg, &records)?;
    let v = cfg.reader_train.variant;
    write_file(&lay.reader_model(v), &serde_json::to_string(&artifact).expect("artifact serializes"))?;
    let mut log = String::from("epoch,loss\n");
    for (e, l) in summary.epoch_losses.iter().enumerate() {
        let _ = writeln!(log, "{e},{l}");
    }
    write_file(&lay.reader_log(v), &log)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReaderSummary {
    pub variant: ReaderVariant,
    pub questions: usize,
    pub accuracy: f64,
}

/// Dev accuracy of a trained variant, each with its own prediction rule.
pub fn evaluate_reader(artifact: &ReaderArtifact, records: &[QuestionRecord]) -> Result<EvalReaderSummary> {
    let (reader, store) = artifact.model()?;
    let mut pred = Vec::with_capacity(records.len());
    let mut gold = Vec::with_capacity(records.len());
    for r in records {
        let q: Question = r.to_question(&artifact.vocab)?;
        let p = match artifact.variant {
            ReaderVariant::Full | ReaderVariant::Naive => reader.predict(&store, &q)?,
            ReaderVariant::Independent => reader.independent_predict(&store, &q)?,
            ReaderVariant::Oracle => reader.predict(&store, &oracle_filter(&q)?)?,
        };
        pred.push(p);
        gold.push(q.answer_index());
    }
    Ok(EvalReaderSummary {
        variant: artifact.variant,
        questions: records.len(),
        accuracy: accuracy(&pred, &gold)?,
    })
}

pub fn cmd_eval_reader(cfg: &RunConfig) -> Result<EvalReaderSummary> {
    let lay = Layout::new(cfg);
    let v = cfg.reader_train.variant;
    let artifact: ReaderArtifact = read_json(&lay.reader_model(v))?;
    let records: Vec<QuestionRecord> = read_jsonl(&lay.wikihop_dev())?;
    let s = evaluate_reader(&artifact, &records)?;
    info!("{} dev accuracy {:.4} on {} questions", v.name(), s.accuracy, s.questions);
    write_json(&lay.reader_eval(v), &s)?;
    Ok(s)
}

// ------------------------------------------------------------ memory / FD

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemprofileRow {
    pub paragraphs: usize,
    pub two_pass_peak: usize,
    pub naive_peak: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Memprofile {
    pub rows: Vec<MemprofileRow>,
    pub reports: Vec<MemoryReport>,
}

impl Memprofile {
    /// `peak(max K) / peak(min K)` for the two-pass and naive columns.
    pub fn ratios(&self) -> (f64, f64) {
        let first = self.rows.iter().min_by_key(|r| r.paragraphs).expect("rows");
        let last = self.rows.iter().max_by_key(|r| r.paragraphs).expect("rows");
        (
            last.two_pass_peak as f64 / first.two_pass_peak as f64,
            last.naive_peak as f64 / first.naive_peak as f64,
        )
    }

    pub fn table(&self) -> String {
        let mut out = String::from("paragraphs,two_pass_peak,naive_peak\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.paragraphs, r.two_pass_peak, r.naive_peak);
        }
        out
    }
}

/// Peak retained scalars of one two-pass and one naive step per paragraph count.
pub fn memprofile(reader_cfg: &ReaderConfig, counts: &[usize], len: usize, candidates: usize, seed: u64) -> Result<Memprofile> {
    let mut cfg = reader_cfg.clone();
    cfg.encoder.dropout_p = 0.0;
    if cfg.encoder.max_positions < len + 4 {
        return Err(Error::Config(format!(
            "memprofile.paragraph_len {len} does not fit reader.encoder.max_positions {}",
            cfg.encoder.max_positions
        )));
    }
    let mut store = ParamStore::new();
    let reader = Reader::init(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &k in counts {
        let q = random_question(seed, k, len, candidates, cfg.encoder.vocab_size);
        let (_, report) = two_pass_gradients(&reader, &store, &q, None)?;
        let naive = naive_gradients(&reader, &store, &q, None)?;
        rows.push(MemprofileRow {
            paragraphs: k,
            two_pass_peak: report.peak_retained_scalars,
            naive_peak: naive.retained_scalars,
        });
        reports.push(report);
    }
    Ok(Memprofile { rows, reports })
}

pub fn cmd_memprofile(cfg: &RunConfig) -> Result<Memprofile> {
    let m = &cfg.memprofile;
    let p = memprofile(&cfg.reader, &m.paragraphs, m.paragraph_len, m.candidates, cfg.seed)?;
    let lay = Layout::new(cfg);
    write_file(&lay.memprofile_csv(), &p.table())?;
    write_json(&lay.memprofile_json(), &p.reports)?;
    Ok(p)
}

/// Tiny reader used by the finite-difference suite.
pub fn reader_gradcheck(seed: u64, step: f64) -> Result<GradCheckReport> {
    let cfg = ReaderConfig {
        encoder: EncoderConfig {
            num_layers: 2,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 12,
            max_positions: 32,
            vocab_size: 20,
            dropout_p: 0.0,
        },
        head_dim: 6,
    };
    let mut store = ParamStore::new();
    let reader = Reader::init(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
    jitter(&mut store, seed);
    let q = random_question(seed, 3, 6, 3, 20);
    let mut rep = gradcheck::check_params("reader", &store, &reader.param_ids(), 4, seed, step, |g, st| {
        reader.naive_loss(g, st, &q)
    })?;
    rep.name = "reader (tiny)".into();
    Ok(rep)
}

/// Tiny relation CNN used by the finite-difference suite.
pub fn cnn_gradcheck(seed: u64, step: f64) -> Result<GradCheckReport> {
    let cfg = CnnConfig {
        max_len: 9,
        d_max: 4,
        depth: 2,
        window: 2,
        word_dim: 4,
        pos_dim: 2,
        channels: 4,
        dropout_p: 0.0,
        l2: 0.0,
        lr: 0.01,
    };
    let mut store = ParamStore::new();
    let model = RelationCnn::init(cfg, 12, &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
    jitter(&mut store, seed);
    let s = SentenceInstance::new(("a".into(), "b".into()), &[3, 4, 5, 6, 7, 8, 9], 1, 5, Some(true), 9)?;
    let mut rep = gradcheck::check_params("cnn", &store, &model.param_ids(), 4, seed, step, |g, st| {
        model.loss(g, st, &s, true)
    })?;
    rep.name = "relation cnn (tiny)".into();
    Ok(rep)
}

/// Moves parameters off zero-initialized biases, where a dead ReLU unit
/// would sit exactly on its kink.
fn jitter(store: &mut ParamStore, seed: u64) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub tolerance: f64,
    pub reports: Vec<(String, f64)>,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(|(_, e)| *e < self.tolerance)
    }
}

/// Every op plus both tiny models; the caller decides what a failure means.
pub fn gradcheck_suite(seed: u64, step: f64, tolerance: f64) -> Result<GradcheckSummary> {
    let mut reports: Vec<GradCheckReport> = gradcheck::op_suite(seed)?;
    reports.push(reader_gradcheck(seed, step)?);
    reports.push(cnn_gradcheck(seed, step)?);
    Ok(GradcheckSummary {
        tolerance,
        reports: reports.into_iter().map(|r| (r.name, r.max_rel_err)).collect(),
    })
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradcheckSummary> {
    let s = gradcheck_suite(cfg.seed, cfg.gradcheck.step, cfg.gradcheck.tolerance)?;
    if !s.passed() {
        let bad: Vec<String> = s
            .reports
            .iter()
            .filter(|(_, e)| *e >= s.tolerance)
            .map(|(n, e)| format!("{n} ({e:.3e})"))
            .collect();
        return Err(Error::Numeric(format!(
            "finite-difference check above {}: {}",
            s.tolerance,
            bad.join(", ")
        )));
    }
    Ok(s)
}

// --------------------------------------------------------------- relation

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenReSummary {
    pub sentences: usize,
    pub entities: usize,
    pub train_charts: usize,
    pub test_charts: usize,
}

pub fn cmd_gen_re_corpus(cfg: &RunConfig) -> Result<GenReSummary> {
    let c = gen_re_corpus(&cfg.re_corpus, cfg.seed)?;
    let lay = Layout::new(cfg);
    let records: Vec<SentenceRecord> = c
        .sentences
        .iter()
        .map(|t| SentenceRecord { tokens: t.clone() })
        .collect();
    write_file(&lay.corpus(), &to_jsonl(&records))?;
    write_file(&lay.lexicon(), &c.lexicon.to_tsv())?;
    for (dir, charts) in [(lay.train_chart_dir(), &c.train_charts), (lay.test_chart_dir(), &c.test_charts)] {
        // Stale charts from an earlier run would silently join this one.
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for ch in charts {
            write_file(&dir.join(format!("{}.tsv", ch.name)), &ch.to_tsv())?;
        }
    }
    Ok(GenReSummary {
        sentences: c.sentences.len(),
        entities: c.lexicon.len(),
        train_charts: c.train_charts.len(),
        test_charts: c.test_charts.len(),
    })
}

fn read_corpus(path: &Path) -> Result<Vec<Vec<String>>> {
    let recs: Vec<SentenceRecord> = read_jsonl(path)?;
    Ok(recs.into_iter().map(|r| r.tokens).collect())
}

/// Every `*.tsv` chart in `dir`, by file name.
pub fn read_charts(dir: &Path, lexicon: &EntityLexicon) -> Result<Vec<TrainingChart>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tsv"))
        .collect();
    files.sort();
    files.iter().map(|f| TrainingChart::load(f, lexicon)).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeakLabelSummary {
    pub pairs: usize,
    pub labeled_pairs: usize,
    pub labeled_sentences: usize,
    pub missing_pairs: Vec<String>,
}

pub fn cmd_weak_label(cfg: &RunConfig) -> Result<WeakLabelSummary> {
    let lay = Layout::new(cfg);
    let lexicon = EntityLexicon::load(&lay.lexicon())?;
    let corpus = read_corpus(&lay.corpus())?;
    let charts = read_charts(&lay.train_chart_dir(), &lexicon)?;
    let sets = build_sentence_sets(&corpus, &lexicon)?;
    let labels = weak_label(&sets, &charts)?;
    for (p, c) in &labels.missing {
        warn!("chart {} pair {p} has no sentences and is excluded", charts[*c].name);
    }
    write_json(&lay.labels(), &labels)?;
    Ok(WeakLabelSummary {
        pairs: labels.pairs.len(),
        labeled_pairs: labels.pairs.iter().filter(|p| p.label.is_some()).count(),
        labeled_sentences: labels.labeled_sentences(),
        missing_pairs: labels.missing.iter().map(|(p, _)| p.to_string()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnArtifact {
    pub config: CnnConfig,
    pub vocab: Vocab,
    pub checkpoint: Checkpoint,
}

impl CnnArtifact {
    pub fn model(&self) -> Result<(RelationCnn, ParamStore)> {
        let mut store = ParamStore::new();
        let m = RelationCnn::init(self.config.clone(), self.vocab.len(), &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
        store.load_checkpoint(&self.checkpoint)?;
        Ok((m, store))
    }
}

fn corpus_vocab(corpus: &[Vec<String>]) -> Vocab {
    let mut v = Vocab::new();
    for s in corpus {
        for w in s {
            v.add(&w.to_lowercase());
        }
    }
    v
}

/// Sentence instances of one pair; spans too long for `L` are skipped.
fn pair_instances(
    corpus: &[Vec<String>],
    vocab: &Vocab,
    pair: &PairKey,
    refs: &[crate::relation::SentenceRef],
    label: Option<bool>,
    max_len: usize,
) -> Result<Vec<(usize, SentenceInstance)>> {
    let mut out = Vec::with_capacity(refs.len());
    for r in refs {
        let ids: Vec<usize> = corpus[r.sentence].iter().map(|w| vocab.id(&w.to_lowercase())).collect();
        match SentenceInstance::new((pair.0.clone(), pair.1.clone()), &ids, r.p1, r.p2, label, max_len) {
            Ok(i) => out.push((r.sentence, i)),
            Err(Error::Truncation { len, max }) => {
                warn!("sentence {} of {pair}: mention span {len} exceeds {max}, skipped", r.sentence)
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReSummary {
    pub instances: usize,
    pub epoch_losses: Vec<f64>,
}

pub fn train_cnn_on(cfg: &RunConfig, corpus: &[Vec<String>], labels: &WeakLabels) -> Result<(CnnArtifact, TrainReSummary)> {
    let vocab = corpus_vocab(corpus);
    let mut instances = Vec::new();
    for p in labels.pairs.iter().filter(|p| p.label.is_some()) {
        instances.extend(
            pair_instances(corpus, &vocab, &p.pair, &p.sentences, p.label, cfg.cnn.max_len)?
                .into_iter()
                .map(|(_, i)| i),
        );
    }
    if instances.is_empty() {
        return Err(Error::contract("no labeled sentences to train on"));
    }
    let mut store = ParamStore::new();
    let model = RelationCnn::init(cfg.cnn.clone(), vocab.len(), &mut store, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    if let Some(path) = &cfg.re_train.word_vectors {
        let vectors = load_word_vectors(path, &vocab, cfg.cnn.word_dim)?;
        let n = model.set_word_vectors(&mut store, &vectors)?;
        info!("initialised {n} word vectors from {}", path.display());
    }
    let opts = ReTrainOptions {
        epochs: cfg.re_train.epochs,
        batch_size: cfg.re_train.batch_size,
        seed: cfg.seed,
        reduction: cfg.re_train.reduction,
    };
    let epoch_losses = fit_cnn(&model, &mut store, &instances, &opts)?;
    for (e, l) in epoch_losses.iter().enumerate() {
        info!("relation cnn epoch {e}: mean loss {l:.6}");
    }
    Ok((
        CnnArtifact {
            config: cfg.cnn.clone(),
            vocab,
            checkpoint: store.to_checkpoint(),
        },
        TrainReSummary {
            instances: instances.len(),
            epoch_losses,
        },
    ))
}

pub fn cmd_train_re(cfg: &RunConfig) -> Result<TrainReSummary> {
    let lay = Layout::new(cfg);
    let corpus = read_corpus(&lay.corpus())?;
    let labels: WeakLabels = read_json(&lay.labels())?;
    let (artifact, summary) = train_cnn_on(cfg, &corpus, &labels)?;
    write_file(&lay.cnn_model(), &serde_json::to_string(&artifact).expect("artifact serializes"))?;
    let mut log = String::from("epoch,loss\n");
    for (e, l) in summary.epoch_losses.iter().enumerate() {
        let _ = writeln!(log, "{e},{l}");
    }
    write_file(&lay.cnn_log(), &log)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReSummary {
    pub test_pairs: usize,
    pub positives: usize,
    pub excluded_pairs: Vec<String>,
    pub average_precision: f64,
    pub positive_rate: f64,
    pub precision_at_recall_0_9: Option<f64>,
}

/// Scores every pair with sentences, then the PR curve over test-chart pairs.
pub fn evaluate_re(
    artifact: &CnnArtifact,
    corpus: &[Vec<String>],
    lexicon: &EntityLexicon,
    test_charts: &[TrainingChart],
) -> Result<(PsppGraph, Vec<PrPoint>, EvalReSummary)> {
    let (model, store) = artifact.model()?;
    let sets = build_sentence_sets(corpus, lexicon)?;
    let mut graph = PsppGraph::from_lexicon(lexicon);
    let mut prob: BTreeMap<&PairKey, f64> = BTreeMap::new();
    for (pair, refs) in &sets {
        let inst = pair_instances(corpus, &artifact.vocab, pair, refs, None, artifact.config.max_len)?;
        let probs = inst
            .iter()
            .map(|(_, i)| model.probability(&store, i))
            .collect::<Result<Vec<f64>>>()?;
        if let PairEvidence::Scored {
            probability,
            representative,
        } = pair_probability(&probs)
        {
            let sentence = corpus[inst[representative].0].join(" ");
            graph.set_score(&pair.0, &pair.1, probability, Some(sentence))?;
            prob.insert(pair, probability);
        }
    }
    let mut scored = Vec::new();
    let mut positives = BTreeSet::new();
    let mut excluded = Vec::new();
    for e in test_charts.iter().flat_map(|c| &c.edges) {
        match prob.get(&e.pair) {
            Some(&p) => {
                scored.push((e.pair.to_string(), p));
                if e.label {
                    positives.insert(e.pair.to_string());
                }
            }
            None => excluded.push(e.pair.to_string()),
        }
    }
    for p in &excluded {
        warn!("test pair {p} has no sentences and is excluded");
    }
    let curve = pr_curve(&scored, &positives)?;
    let summary = EvalReSummary {
        test_pairs: scored.len(),
        positives: positives.len(),
        excluded_pairs: excluded,
        average_precision: average_precision(&curve),
        positive_rate: positives.len() as f64 / scored.len() as f64,
        precision_at_recall_0_9: precision_at_recall(&curve, 0.9),
    };
    Ok((graph, curve, summary))
}

pub fn cmd_eval_re(cfg: &RunConfig) -> Result<EvalReSummary> {
    let lay = Layout::new(cfg);
    let artifact: CnnArtifact = read_json(&lay.cnn_model())?;
    let lexicon = EntityLexicon::load(&lay.lexicon())?;
    let corpus = read_corpus(&lay.corpus())?;
    let charts = read_charts(&lay.test_chart_dir(), &lexicon)?;
    let (graph, curve, summary) = evaluate_re(&artifact, &corpus, &lexicon, &charts)?;
    write_file(&lay.pr_csv(), &pr_csv(&curve))?;
    write_json(&lay.graph(), &graph)?;
    write_json(&lay.re_eval(), &summary)?;
    info!(
        "average precision {:.4} (positive rate {:.4}) over {} test pairs",
        summary.average_precision, summary.positive_rate, summary.test_pairs
    );
    Ok(summary)
}

pub fn cmd_build_chart(cfg: &RunConfig) -> Result<Chart> {
    let lay = Layout::new(cfg);
    let graph: PsppGraph = read_json(&lay.graph())?;
    let c = &cfg.chart;
    let props: Vec<String> = if c.properties.is_empty() {
        graph
            .of_category(crate::relation::Category::Property)
            .into_iter()
            .map(String::from)
            .collect()
    } else {
        c.properties.iter().map(|p| canonicalize(p)).collect()
    };
    let chart = build_chart(&graph, &props, c.n, c.m, c.scope)?;
    if chart.shortfall {
        warn!(
            "requested {} processes and {} structures, found {} and {}",
            c.n,
            c.m,
            chart.processes.len(),
            chart.structures.len()
        );
    }
    write_file(&lay.chart_json(), &(chart.to_json()? + "\n"))?;
    write_file(&lay.chart_dot(), &chart.to_dot())?;
    Ok(chart)
}

/// gen-re-corpus → weak-label → train-re → eval-re → build-chart, optionally
/// preceded by the reader chain.
pub fn cmd_pipeline(cfg: &RunConfig, with_reader: bool) -> Result<Chart> {
    if with_reader {
        cmd_gen_wikihop(cfg)?;
        cmd_train_reader(cfg)?;
        cmd_eval_reader(cfg)?;
    }
    cmd_gen_re_corpus(cfg)?;
    cmd_weak_label(cfg)?;
    cmd_train_re(cfg)?;
    cmd_eval_re(cfg)?;
    cmd_build_chart(cfg)
}
