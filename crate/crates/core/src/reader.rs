//! Explicit-reference reader: candidates are scored from the summed
//! contextual embeddings at their mention positions across all paragraphs.
//!
//! For paragraph `k` the encoder output `H^k` is reduced to a
//! `[(C+1) × d]` matrix of mention sums (row 0 the query entity, row `i+1`
//! candidate `i`). Summing these over `k`, concatenating the query row with
//! each candidate row and applying `θᵀ relu(W x + b)` gives the scores.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Retention, Tensor, Var};

/// One multiple-choice cloze question over several paragraphs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub query_relation: String,
    pub query_entity: String,
    /// Encoder input for the question side.
    pub query_tokens: Vec<usize>,
    pub paragraphs: Vec<Vec<usize>>,
    pub candidates: Vec<String>,
    pub answer: String,
    /// Entity id → `(paragraph, paragraph-local position)` pairs.
    pub mentions: BTreeMap<String, Vec<(usize, usize)>>,
}

impl Question {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::contract(format!("question {}: no candidates", self.id)));
        }
        if !self.candidates.contains(&self.answer) {
            return Err(Error::contract(format!(
                "question {}: answer {} is not a candidate",
                self.id, self.answer
            )));
        }
        for (i, c) in self.candidates.iter().enumerate() {
            if self.candidates[..i].contains(c) {
                return Err(Error::contract(format!("question {}: duplicate candidate {c}", self.id)));
            }
        }
        for (entity, spots) in &self.mentions {
            for &(k, t) in spots {
                let len = self.paragraphs.get(k).map(Vec::len).ok_or(Error::Index {
                    what: "paragraphs",
                    index: k,
                    len: self.paragraphs.len(),
                })?;
                if t >= len {
                    return Err(Error::contract(format!(
                        "question {}: mention of {entity} at position {t} of paragraph {k} (length {len})",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Positions of `entity` in paragraph `k`, in file order.
    pub fn positions(&self, k: usize, entity: &str) -> Vec<usize> {
        self.mentions
            .get(entity)
            .map(|v| v.iter().filter(|&&(p, _)| p == k).map(|&(_, t)| t).collect())
            .unwrap_or_default()
    }

    pub fn candidate_index(&self, entity: &str) -> Option<usize> {
        self.candidates.iter().position(|c| c == entity)
    }

    pub fn answer_index(&self) -> usize {
        self.candidate_index(&self.answer).expect("validated question")
    }
}

/// Keeps only the paragraphs that mention the answer, renumbering mentions.
pub fn oracle_filter(q: &Question) -> Result<Question> {
    let keep: Vec<usize> = (0..q.paragraphs.len())
        .filter(|&k| !q.positions(k, &q.answer).is_empty())
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyPassage(format!(
            "question {}: answer {} is mentioned in no paragraph",
            q.id, q.answer
        )));
    }
    let remap: BTreeMap<usize, usize> = keep.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let mentions = q
        .mentions
        .iter()
        .map(|(e, spots)| {
            let kept = spots
                .iter()
                .filter_map(|&(k, t)| remap.get(&k).map(|&nk| (nk, t)))
                .collect::<Vec<_>>();
            (e.clone(), kept)
        })
        .filter(|(_, spots)| !spots.is_empty())
        .collect();
    Ok(Question {
        paragraphs: keep.iter().map(|&k| q.paragraphs[k].clone()).collect(),
        mentions,
        ..q.clone()
    })
}

/// Sum of the rows of `h` at `positions`; duplicates count twice and the
/// empty set gives a zero vector.
pub fn mention_sum(g: &mut Graph, h: &Var, positions: &[usize]) -> Result<Var> {
    g.sum_rows(h, positions)
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::contract("argmax over an empty candidate list"));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReaderConfig {
    pub encoder: EncoderConfig,
    pub head_dim: usize,
}

impl Default for ReaderConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head_dim: 64,
        }
    }
}

/// `θᵀ relu(W x + b)` on `x = [query sum ⧺ candidate sum]`.
#[derive(Clone, Debug)]
pub struct ReaderHead {
    pub w: ParamId,
    pub b: ParamId,
    pub theta: ParamId,
}

#[derive(Clone, Debug)]
pub struct Reader {
    encoder: Encoder,
    head: ReaderHead,
}

impl Reader {
    pub fn init<R: Rng + ?Sized>(cfg: &ReaderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if cfg.head_dim == 0 {
            return Err(Error::Config("reader.head_dim must be positive".into()));
        }
        let encoder = Encoder::init(cfg.encoder.clone(), "encoder", store, rng)?;
        let d = cfg.encoder.model_dim;
        let dh = cfg.head_dim;
        let head = ReaderHead {
            w: store.add("head.w", Tensor::randn(&[2 * d, dh], 1.0 / ((2 * d) as f64).sqrt(), rng)),
            b: store.add("head.b", Tensor::zeros(&[dh])),
            theta: store.add("head.theta", Tensor::randn(&[dh, 1], 1.0 / (dh as f64).sqrt(), rng)),
        };
        Ok(Self { encoder, head })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn head(&self) -> &ReaderHead {
        &self.head
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        vec![self.head.w, self.head.b, self.head.theta]
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        self.encoder.param_ids()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder_ids();
        ids.extend(self.head_ids());
        ids
    }

    /// Encoder rows of the query entity's and each candidate's mentions
    /// in paragraph `k`.
    fn mention_rows(&self, q: &Question, k: usize) -> Result<Vec<Vec<usize>>> {
        let offset = Encoder::paragraph_offset(q.query_tokens.len());
        let len = q.paragraphs[k].len();
        std::iter::once(&q.query_entity)
            .chain(&q.candidates)
            .map(|entity| {
                q.positions(k, entity)
                    .into_iter()
                    .map(|t| {
                        if t < len {
                            Ok(offset + t)
                        } else {
                            Err(Error::Index {
                                what: "paragraph",
                                index: t,
                                len,
                            })
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Mention sums of paragraph `k`: row 0 for the query entity, row `i+1`
    /// for candidate `i`. Runs under dropout stream `k`.
    pub fn paragraph_sums(&self, g: &mut Graph, store: &ParamStore, q: &Question, k: usize) -> Result<Var> {
        if k >= q.paragraphs.len() {
            return Err(Error::contract(format!(
                "paragraph {k} out of range for question {} with {} paragraphs",
                q.id,
                q.paragraphs.len()
            )));
        }
        g.begin_stream(k as u64);
        let h = self.encoder.encode(g, store, &q.query_tokens, &q.paragraphs[k])?;
        let rows = self.mention_rows(q, k)?;
        g.group_sum(&h, &rows)
    }

    /// Adds per-paragraph sums in paragraph order.
    pub fn accumulate(g: &mut Graph, parts: &[Var]) -> Result<Var> {
        let (first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::EmptyPassage("no paragraphs to accumulate".into()))?;
        let mut acc = first.clone();
        for p in rest {
            acc = g.add(&acc, p)?;
        }
        Ok(acc)
    }

    /// Candidate scores `[C × 1]` from accumulated sums `[(C+1) × d]`.
    pub fn scores_from_sums(&self, g: &mut Graph, store: &ParamStore, sums: &Var) -> Result<Var> {
        let rows = sums.shape()[0];
        if rows < 2 {
            return Err(Error::contract("no candidates to score"));
        }
        let c = rows - 1;
        let query = g.embedding(sums, &vec![0; c])?;
        let cands: Vec<usize> = (1..rows).collect();
        let cand = g.embedding(sums, &cands)?;
        let x = g.concat(&[&query, &cand], 1)?;
        let w = g.param(store, self.head.w);
        let b = g.param(store, self.head.b);
        let theta = g.param(store, self.head.theta);
        let z = g.matmul(&x, &w)?;
        let z = g.add(&z, &b)?;
        let z = g.relu(&z);
        g.matmul(&z, &theta)
    }

    /// `-log softmax(scores)[answer]`.
    pub fn nll(g: &mut Graph, scores: &Var, answer: usize) -> Result<Var> {
        let lp = g.log_softmax(scores, 0)?;
        let picked = g.pick(&lp, answer)?;
        Ok(g.scale(&picked, -1.0))
    }

    fn all_sums(&self, g: &mut Graph, store: &ParamStore, q: &Question) -> Result<Vec<Var>> {
        if q.paragraphs.is_empty() {
            return Err(Error::EmptyPassage(format!("question {} has no paragraphs", q.id)));
        }
        (0..q.paragraphs.len())
            .map(|k| self.paragraph_sums(g, store, q, k))
            .collect()
    }

    /// Scores of every candidate with all paragraphs under `store`.
    pub fn scores(&self, g: &mut Graph, store: &ParamStore, q: &Question) -> Result<Var> {
        let parts = self.all_sums(g, store, q)?;
        let sums = Self::accumulate(g, &parts)?;
        self.scores_from_sums(g, store, &sums)
    }

    /// Evaluation-mode scores as plain numbers.
    pub fn score_all(&self, store: &ParamStore, q: &Question) -> Result<Vec<f64>> {
        let mut g = Graph::new(Retention::Discard);
        Ok(self.scores(&mut g, store, q)?.value().data().to_vec())
    }

    pub fn score_candidate(&self, store: &ParamStore, q: &Question, candidate: &str) -> Result<f64> {
        let i = q
            .candidate_index(candidate)
            .ok_or_else(|| Error::contract(format!("{candidate} is not a candidate of question {}", q.id)))?;
        Ok(self.score_all(store, q)?[i])
    }

    pub fn predict(&self, store: &ParamStore, q: &Question) -> Result<usize> {
        if q.candidates.is_empty() {
            return Err(Error::contract(format!("question {} has no candidates", q.id)));
        }
        argmax(&self.score_all(store, q)?)
    }

    /// Loss with every paragraph on one tape.
    pub fn naive_loss(&self, g: &mut Graph, store: &ParamStore, q: &Question) -> Result<Var> {
        let scores = self.scores(g, store, q)?;
        Self::nll(g, &scores, q.answer_index())
    }

    /// Loss where paragraph `k` is encoded under `store` on `g` and every
    /// other paragraph contributes constant sums computed under `frozen`.
    pub fn loss_full(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frozen: &ParamStore,
        q: &Question,
        k: usize,
    ) -> Result<Var> {
        if k >= q.paragraphs.len() {
            return Err(Error::contract(format!("paragraph {k} out of range for question {}", q.id)));
        }
        let mut side = match g.is_training() {
            true => Graph::new(Retention::Discard).with_dropout(g.dropout_key().expect("training graph")),
            false => Graph::new(Retention::Discard),
        };
        let mut pins = Vec::with_capacity(q.paragraphs.len());
        for j in 0..q.paragraphs.len() {
            if j == k {
                pins.push(None);
            } else {
                pins.push(Some(self.paragraph_sums(&mut side, frozen, q, j)?.value().clone()));
            }
        }
        self.loss_with_pins(g, store, q, k, &pins)
    }

    /// Loss for paragraph `k` given precomputed sums for the other
    /// paragraphs (`pins[k]` is ignored).
    pub fn loss_with_pins(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: &Question,
        k: usize,
        pins: &[Option<Tensor>],
    ) -> Result<Var> {
        let fresh = self.paragraph_sums(g, store, q, k)?;
        let mut parts = Vec::with_capacity(pins.len());
        for (j, pin) in pins.iter().enumerate() {
            if j == k {
                parts.push(fresh.clone());
            } else {
                let t = pin
                    .as_ref()
                    .ok_or_else(|| Error::contract(format!("missing pinned sums for paragraph {j}")))?;
                parts.push(g.constant(t.clone()));
            }
        }
        let sums = Self::accumulate(g, &parts)?;
        let scores = self.scores_from_sums(g, store, &sums)?;
        Self::nll(g, &scores, q.answer_index())
    }

    /// Per-paragraph scores `[C × 1]` using paragraph `k` alone.
    pub fn paragraph_scores(&self, g: &mut Graph, store: &ParamStore, q: &Question, k: usize) -> Result<Var> {
        let sums = self.paragraph_sums(g, store, q, k)?;
        self.scores_from_sums(g, store, &sums)
    }

    /// Sum over paragraphs of the per-paragraph cross-entropy.
    pub fn independent_loss(&self, g: &mut Graph, store: &ParamStore, q: &Question) -> Result<Var> {
        if q.paragraphs.is_empty() {
            return Err(Error::EmptyPassage(format!("question {} has no paragraphs", q.id)));
        }
        let answer = q.answer_index();
        let mut losses = Vec::with_capacity(q.paragraphs.len());
        for k in 0..q.paragraphs.len() {
            let s = self.paragraph_scores(g, store, q, k)?;
            losses.push(Self::nll(g, &s, answer)?);
        }
        Self::accumulate(g, &losses)
    }

    /// `argmax_i max_k` of the per-paragraph scores.
    pub fn independent_predict(&self, store: &ParamStore, q: &Question) -> Result<usize> {
        if q.paragraphs.is_empty() {
            return Err(Error::EmptyPassage(format!("question {} has no paragraphs", q.id)));
        }
        let mut best = vec![f64::NEG_INFINITY; q.candidates.len()];
        for k in 0..q.paragraphs.len() {
            let mut g = Graph::new(Retention::Discard);
            let s = self.paragraph_scores(&mut g, store, q, k)?;
            for (b, &v) in best.iter_mut().zip(s.value().data()) {
                *b = b.max(v);
            }
        }
        argmax(&best)
    }
}
