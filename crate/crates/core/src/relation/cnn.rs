//! Residual CNN sentence scorer for a binary relation between two mentions.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DropoutKey, Graph, Optimizer, ParamId, ParamStore, Reduction, Retention, Tensor, Var};
use crate::vocab::{Vocab, PAD, UNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnConfig {
    /// Padded sentence length `L`.
    pub max_len: usize,
    /// Relative distances are clamped to `±d_max`.
    pub d_max: usize,
    /// Number of residual blocks; the last block's output is `c̃^K`.
    pub depth: usize,
    /// Convolution window `h`.
    pub window: usize,
    pub word_dim: usize,
    pub pos_dim: usize,
    pub channels: usize,
    pub dropout_p: f64,
    pub l2: f64,
    pub lr: f64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            max_len: 100,
            d_max: 30,
            depth: 4,
            window: 2,
            word_dim: 50,
            pos_dim: 5,
            channels: 50,
            dropout_p: 0.2,
            l2: 1e-4,
            lr: 5e-5,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("max_len", self.max_len),
            ("d_max", self.d_max),
            ("window", self.window),
            ("word_dim", self.word_dim),
            ("pos_dim", self.pos_dim),
            ("channels", self.channels),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("cnn.{name} must be positive")));
            }
        }
        if self.max_len < self.window {
            return Err(Error::Config(format!(
                "cnn.max_len {} is shorter than the window {}",
                self.max_len, self.window
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("cnn.dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        if !(self.l2 >= 0.0) || !(self.lr > 0.0) {
            return Err(Error::Config(format!("cnn.l2 {} / cnn.lr {} out of range", self.l2, self.lr)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.word_dim + 2 * self.pos_dim
    }
}

/// One sentence with two marked mentions, padded to `L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceInstance {
    pub pair: (String, String),
    pub tokens: Vec<usize>,
    pub p1: usize,
    pub p2: usize,
    pub label: Option<bool>,
}

impl SentenceInstance {
    /// Pads to `max_len`, or cuts a `max_len` window centred on the midpoint
    /// of the two mentions when the sentence is longer.
    pub fn new(
        pair: (String, String),
        tokens: &[usize],
        p1: usize,
        p2: usize,
        label: Option<bool>,
        max_len: usize,
    ) -> Result<Self> {
        if p1 == p2 {
            return Err(Error::contract(format!("pair {pair:?}: both mentions at position {p1}")));
        }
        if p1 >= tokens.len() || p2 >= tokens.len() {
            return Err(Error::Index {
                what: "sentence",
                index: p1.max(p2),
                len: tokens.len(),
            });
        }
        let (mut toks, mut a, mut b) = (tokens.to_vec(), p1, p2);
        if toks.len() > max_len {
            if p1.abs_diff(p2) >= max_len {
                return Err(Error::Truncation {
                    len: p1.abs_diff(p2) + 1,
                    max: max_len,
                });
            }
            let mid = (p1 + p2) / 2;
            let start = mid.saturating_sub(max_len / 2).min(toks.len() - max_len);
            toks = toks[start..start + max_len].to_vec();
            a -= start;
            b -= start;
        }
        toks.resize(max_len, PAD);
        Ok(Self {
            pair,
            tokens: toks,
            p1: a,
            p2: b,
            label,
        })
    }
}

/// Row of the position table for a token at `i` and an entity at `k`.
pub fn distance_row(k: usize, i: usize, d_max: usize) -> usize {
    let d = (k as i64 - i as i64).clamp(-(d_max as i64), d_max as i64);
    (d + d_max as i64) as usize
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    inner: Conv,
    outer: Conv,
}

#[derive(Clone, Debug)]
pub struct RelationCnn {
    cfg: CnnConfig,
    vocab_size: usize,
    word: ParamId,
    pos1: ParamId,
    pos2: ParamId,
    first: Conv,
    blocks: Vec<Block>,
    fc1: Conv,
    fc2: Conv,
    v: ParamId,
}

/// Sentence-level probabilities reduced to one pair score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairEvidence {
    NoEvidence,
    Scored { probability: f64, representative: usize },
}

impl PairEvidence {
    pub fn probability(&self) -> Option<f64> {
        match self {
            PairEvidence::NoEvidence => None,
            PairEvidence::Scored { probability, .. } => Some(*probability),
        }
    }
}

/// Maximum sentence probability and the first sentence attaining it.
pub fn pair_probability(sentence_probs: &[f64]) -> PairEvidence {
    let mut best: Option<(usize, f64)> = None;
    for (i, &p) in sentence_probs.iter().enumerate() {
        if best.is_none_or(|(_, b)| p > b) {
            best = Some((i, p));
        }
    }
    match best {
        None => PairEvidence::NoEvidence,
        Some((i, p)) => PairEvidence::Scored {
            probability: p,
            representative: i,
        },
    }
}

fn he<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[rows, cols], (2.0 / rows as f64).sqrt(), rng)
}

impl RelationCnn {
    pub fn init<R: Rng + ?Sized>(cfg: CnnConfig, vocab_size: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if vocab_size <= UNK {
            return Err(Error::Config("cnn vocabulary has no room for [UNK]".into()));
        }
        let (h, dc) = (cfg.window, cfg.channels);
        let rows = 2 * cfg.d_max + 1;
        let word = store.add("cnn.word", Tensor::randn(&[vocab_size, cfg.word_dim], 1.0, rng));
        let pos1 = store.add("cnn.pos1", Tensor::randn(&[rows, cfg.pos_dim], 1.0, rng));
        let pos2 = store.add("cnn.pos2", Tensor::randn(&[rows, cfg.pos_dim], 1.0, rng));
        let mut conv = |name: &str, fan_in: usize, out: usize, rng: &mut R| Conv {
            w: store.add(format!("cnn.{name}.w"), he(fan_in, out, rng)),
            b: store.add(format!("cnn.{name}.b"), Tensor::zeros(&[out])),
        };
        let first = conv("conv0", h * cfg.input_dim(), dc, rng);
        let blocks = (1..=cfg.depth)
            .map(|k| Block {
                inner: conv(&format!("block{k}.inner"), h * dc, dc, rng),
                outer: conv(&format!("block{k}.outer"), h * dc, dc, rng),
            })
            .collect();
        let fc1 = conv("fc1", dc, dc, rng);
        let fc2 = conv("fc2", dc, dc, rng);
        let v = store.add("cnn.v", Tensor::randn(&[dc, 1], 1.0 / (dc as f64).sqrt(), rng));
        Ok(Self {
            cfg,
            vocab_size,
            word,
            pos1,
            pos2,
            first,
            blocks,
            fc1,
            fc2,
            v,
        })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.cfg
    }

    pub fn word_embedding(&self) -> ParamId {
        self.word
    }

    pub fn score_vector(&self) -> ParamId {
        self.v
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.word, self.pos1, self.pos2, self.first.w, self.first.b];
        for b in &self.blocks {
            ids.extend([b.inner.w, b.inner.b, b.outer.w, b.outer.b]);
        }
        ids.extend([self.fc1.w, self.fc1.b, self.fc2.w, self.fc2.b, self.v]);
        ids
    }

    /// `[L × (d_w + 2 d_p)]` rows `[W(t_i); P1(k1 − i); P2(k2 − i)]`.
    pub fn token_embed(&self, g: &mut Graph, store: &ParamStore, inst: &SentenceInstance) -> Result<Var> {
        let l = inst.tokens.len();
        let d = self.cfg.d_max;
        let ids: Vec<usize> = inst
            .tokens
            .iter()
            .map(|&t| if t < self.vocab_size { t } else { UNK })
            .collect();
        let r1: Vec<usize> = (0..l).map(|i| distance_row(inst.p1, i, d)).collect();
        let r2: Vec<usize> = (0..l).map(|i| distance_row(inst.p2, i, d)).collect();
        let (w, p1, p2) = (g.param(store, self.word), g.param(store, self.pos1), g.param(store, self.pos2));
        let xw = g.embedding(&w, &ids)?;
        let x1 = g.embedding(&p1, &r1)?;
        let x2 = g.embedding(&p2, &r2)?;
        g.concat(&[&xw, &x1, &x2], 1)
    }

    fn conv(&self, g: &mut Graph, store: &ParamStore, c: &Conv, x: &Var, same: bool) -> Result<Var> {
        let h = self.cfg.window;
        let (front, back) = if same { ((h - 1) / 2, h - 1 - (h - 1) / 2) } else { (0, 0) };
        let win = g.unfold(x, h, front, back)?;
        let w = g.param(store, c.w);
        let b = g.param(store, c.b);
        let y = g.matmul(&win, &w)?;
        let y = g.add(&y, &b)?;
        Ok(g.relu(&y))
    }

    /// `c_i = relu(w · x_{i:i+h} + b)`; output `[(L − h + 1) × d_c]`.
    pub fn first_conv(&self, g: &mut Graph, store: &ParamStore, x: &Var) -> Result<Var> {
        if x.shape()[0] < self.cfg.window {
            return Err(Error::Config(format!(
                "sentence length {} shorter than window {}",
                x.shape()[0],
                self.cfg.window
            )));
        }
        self.conv(g, store, &self.first, x, false)
    }

    /// Block `k` (1-based) from `c̃^{k−1}` and `c̃^{k−2}` (absent means zero).
    pub fn residual_block(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        k: usize,
        prev: &Var,
        prev2: Option<&Var>,
    ) -> Result<Var> {
        let block = self
            .blocks
            .get(k.wrapping_sub(1))
            .ok_or_else(|| Error::contract(format!("residual block {k} of {}", self.blocks.len())))?;
        let input = match prev2 {
            Some(p) => g.add(prev, p)?,
            None => prev.clone(),
        };
        let hat = self.conv(g, store, &block.inner, &input, true)?;
        self.conv(g, store, &block.outer, &hat, true)
    }

    /// Output `c̃^K` of the whole convolution stack.
    pub fn features(&self, g: &mut Graph, store: &ParamStore, inst: &SentenceInstance) -> Result<Var> {
        let x = self.token_embed(g, store, inst)?;
        let c = self.first_conv(g, store, &x)?;
        let (mut prev2, mut prev): (Option<Var>, Var) = (None, c);
        for k in 1..=self.blocks.len() {
            let next = self.residual_block(g, store, k, &prev, prev2.as_ref())?;
            prev2 = Some(prev);
            prev = next;
        }
        Ok(prev)
    }

    /// Max pooling, two FC + ReLU layers and the score vector: a `[1 × 1]` logit.
    pub fn head(&self, g: &mut Graph, store: &ParamStore, feats: &Var) -> Result<Var> {
        let z = g.max_axis(feats, 0)?;
        let z = g.dropout(&z, self.cfg.dropout_p)?;
        let z = g.reshape(&z, &[1, self.cfg.channels])?;
        let fc = |c: &Conv, x: &Var, g: &mut Graph| -> Result<Var> {
            let w = g.param(store, c.w);
            let b = g.param(store, c.b);
            let y = g.matmul(x, &w)?;
            let y = g.add(&y, &b)?;
            Ok(g.relu(&y))
        };
        let z1 = fc(&self.fc1, &z, g)?;
        let z2 = fc(&self.fc2, &z1, g)?;
        let v = g.param(store, self.v);
        g.matmul(&z2, &v)
    }

    pub fn logit(&self, g: &mut Graph, store: &ParamStore, inst: &SentenceInstance) -> Result<Var> {
        let f = self.features(g, store, inst)?;
        self.head(g, store, &f)
    }

    /// `-log P(r = label | s)`.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, inst: &SentenceInstance, label: bool) -> Result<Var> {
        let s = self.logit(g, store, inst)?;
        let s = if label { s } else { g.scale(&s, -1.0) };
        let lp = g.log_sigmoid(&s);
        let lp = g.sum(&lp);
        Ok(g.scale(&lp, -1.0))
    }

    /// Evaluation-mode `P(r = True | s)`.
    pub fn probability(&self, store: &ParamStore, inst: &SentenceInstance) -> Result<f64> {
        let mut g = Graph::new(Retention::Discard);
        let s = self.logit(&mut g, store, inst)?;
        Ok(g.sigmoid(&s).item())
    }

    pub fn score_pair(&self, store: &ParamStore, sentences: &[SentenceInstance]) -> Result<PairEvidence> {
        let probs = sentences
            .iter()
            .map(|s| self.probability(store, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(pair_probability(&probs))
    }

    /// Copies vectors of known tokens into the word table.
    pub fn set_word_vectors(&self, store: &mut ParamStore, vectors: &HashMap<usize, Vec<f64>>) -> Result<usize> {
        let dim = self.cfg.word_dim;
        let table = store.get_mut(self.word);
        let mut n = 0;
        for (&id, v) in vectors {
            if id >= self.vocab_size || v.len() != dim {
                continue;
            }
            table.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(v);
            n += 1;
        }
        Ok(n)
    }
}

/// Reads `token v1 … v_dim` lines, keeping tokens present in `vocab`.
pub fn load_word_vectors(path: &Path, vocab: &Vocab, dim: usize) -> Result<HashMap<usize, Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_word_vectors(&text, path, vocab, dim)
}

pub fn parse_word_vectors(text: &str, origin: &Path, vocab: &Vocab, dim: usize) -> Result<HashMap<usize, Vec<f64>>> {
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let parse_err = |msg: String| Error::Parse {
            file: origin.to_path_buf(),
            line: n + 1,
            field: Some(token.to_string()),
            message: msg,
        };
        let values = parts
            .map(|p| p.parse::<f64>().map_err(|_| parse_err(format!("`{p}` is not a number"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != dim {
            return Err(parse_err(format!("expected {dim} values, found {}", values.len())));
        }
        if let Some(id) = vocab.get(token) {
            out.insert(id, values);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub reduction: Reduction,
}

impl Default for ReTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 16,
            seed: 0,
            reduction: Reduction::Mean,
        }
    }
}

/// Minimises the per-sentence negative log-likelihood with Adam and L2.
/// Returns the mean loss of each epoch.
pub fn train_re(
    model: &RelationCnn,
    store: &mut ParamStore,
    instances: &[SentenceInstance],
    opts: &ReTrainOptions,
) -> Result<Vec<f64>> {
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let labels = instances
        .iter()
        .map(|i| {
            i.label
                .ok_or_else(|| Error::contract(format!("unlabeled training sentence for pair {:?}", i.pair)))
        })
        .collect::<Result<Vec<bool>>>()?;
    let cfg = model.config();
    let mut opt = Optimizer::adam(cfg.lr)?.with_weight_decay(cfg.l2)?;
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let key = DropoutKey {
                seed: opts.seed,
                step: opt.steps_taken(),
            };
            let mut g = Graph::new(Retention::Retain).with_dropout(key);
            let mut losses = Vec::with_capacity(batch.len());
            for (slot, &i) in batch.iter().enumerate() {
                g.begin_stream(slot as u64);
                losses.push(model.loss(&mut g, store, &instances[i], labels[i])?);
            }
            let mut loss = losses[0].clone();
            for l in &losses[1..] {
                loss = g.add(&loss, l)?;
            }
            let batch_loss = loss.item();
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss in epoch {epoch}")));
            }
            total += batch_loss;
            if opts.reduction == Reduction::Mean {
                loss = g.scale(&loss, 1.0 / batch.len() as f64);
            }
            g.backward(&loss)?;
            opt.step(store, &g.param_grads())?;
        }
        epoch_losses.push(total / instances.len().max(1) as f64);
    }
    Ok(epoch_losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;

    fn tiny() -> CnnConfig {
        CnnConfig {
            max_len: 8,
            d_max: 3,
            depth: 1,
            window: 2,
            word_dim: 4,
            pos_dim: 2,
            channels: 4,
            dropout_p: 0.0,
            l2: 0.0,
            lr: 0.01,
        }
    }

    fn model(cfg: CnnConfig, vocab: usize, seed: u64) -> (RelationCnn, ParamStore) {
        let mut store = ParamStore::new();
        let m = RelationCnn::init(cfg, vocab, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (m, store)
    }

    fn inst(tokens: &[usize], p1: usize, p2: usize, len: usize, label: bool) -> SentenceInstance {
        SentenceInstance::new(("a".into(), "b".into()), tokens, p1, p2, Some(label), len).unwrap()
    }

    #[test]
    fn distance_rows_clamp() {
        assert_eq!(distance_row(5, 3, 30) as i64 - 30, 2);
        assert_eq!(distance_row(35, 0, 30), distance_row(30, 0, 30));
        assert_eq!(distance_row(130, 0, 30), distance_row(30, 0, 30));
        assert_eq!(distance_row(4, 4, 30), 30);
        assert_eq!(distance_row(0, 40, 30), 0);
    }

    #[test]
    fn padding_and_centred_truncation() {
        let s = inst(&[5, 6, 7], 0, 2, 6, true);
        assert_eq!(s.tokens, vec![5, 6, 7, PAD, PAD, PAD]);
        let long: Vec<usize> = (10..30).collect();
        let s = inst(&long, 12, 15, 6, true);
        assert_eq!(s.tokens.len(), 6);
        assert_eq!(s.tokens[s.p1], 22);
        assert_eq!(s.tokens[s.p2], 25);
        let err = SentenceInstance::new(("a".into(), "b".into()), &long, 0, 19, None, 6);
        assert!(matches!(err, Err(Error::Truncation { .. })));
        assert!(SentenceInstance::new(("a".into(), "b".into()), &long, 3, 3, None, 6).is_err());
    }

    #[test]
    fn embedding_rows_and_unknown_tokens() {
        let (m, store) = model(tiny(), 10, 1);
        let s = inst(&[3, 99, 4], 0, 2, 8, true);
        let mut g = Graph::new(Retention::Retain);
        let x = m.token_embed(&mut g, &store, &s).unwrap();
        assert_eq!(x.shape(), &[8, 8]);
        let w = store.get(m.word_embedding());
        assert_eq!(&x.value().row(1)[..4], w.row(UNK));
        // i == k1 uses the zero-distance row of P1.
        let p1 = store.get(m.pos1);
        assert_eq!(&x.value().row(0)[4..6], p1.row(3));
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let (m, mut store) = model(tiny(), 10, 2);
        for id in [m.first.w, m.first.b] {
            let z = Tensor::zeros(store.get(id).shape());
            store.set(id, z).unwrap();
        }
        let s = inst(&[3, 4, 5], 0, 2, 8, true);
        let mut g = Graph::new(Retention::Retain);
        let x = m.token_embed(&mut g, &store, &s).unwrap();
        let c = m.first_conv(&mut g, &store, &x).unwrap();
        assert_eq!(c.shape(), &[7, 4]);
        assert!(c.value().data().iter().all(|&v| v == 0.0));
        // Zero inputs and zero biases propagate through a block.
        for id in [m.blocks[0].inner.b, m.blocks[0].outer.b] {
            let z = Tensor::zeros(store.get(id).shape());
            store.set(id, z).unwrap();
        }
        let out = m.residual_block(&mut g, &store, 1, &c, None).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn window_one_is_per_token_affine() {
        let cfg = CnnConfig { window: 1, ..tiny() };
        let (m, store) = model(cfg, 10, 3);
        let s = inst(&[3, 4, 5], 0, 2, 8, true);
        let mut g = Graph::new(Retention::Retain);
        let x = m.token_embed(&mut g, &store, &s).unwrap();
        let c = m.first_conv(&mut g, &store, &x).unwrap();
        let (w, b) = (store.get(m.first.w), store.get(m.first.b));
        for i in 0..8 {
            for j in 0..4 {
                let pre: f64 = (0..8).map(|u| x.value().at(i, u) * w.at(u, j)).sum::<f64>() + b.data()[j];
                assert!((c.value().at(i, j) - pre.max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_without_skip_is_two_convs() {
        let (m, store) = model(tiny(), 10, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new(Retention::Retain);
        let c = g.constant(Tensor::randn(&[7, 4], 1.0, &mut rng));
        let zero = g.constant(Tensor::zeros(&[7, 4]));
        let a = m.residual_block(&mut g, &store, 1, &c, None).unwrap();
        let b = m.residual_block(&mut g, &store, 1, &c, Some(&zero)).unwrap();
        assert_eq!(a.value(), b.value());
        let hat = m.conv(&mut g, &store, &m.blocks[0].inner, &c, true).unwrap();
        let manual = m.conv(&mut g, &store, &m.blocks[0].outer, &hat, true).unwrap();
        assert_eq!(a.value(), manual.value());
    }

    #[test]
    fn full_size_stack_shape() {
        let cfg = CnnConfig::default();
        let (m, store) = model(cfg, 50, 5);
        let toks: Vec<usize> = (0..60).map(|i| 3 + i % 40).collect();
        let s = inst(&toks, 4, 30, 100, true);
        let mut g = Graph::new(Retention::Discard);
        let f = m.features(&mut g, &store, &s).unwrap();
        assert_eq!(f.shape(), &[99, 50]);
    }

    #[test]
    fn zero_score_vector_gives_one_half() {
        let (m, mut store) = model(tiny(), 10, 6);
        store.set(m.v, Tensor::zeros(&[4, 1])).unwrap();
        let s = inst(&[3, 4, 5, 6], 0, 3, 8, true);
        assert_eq!(m.probability(&store, &s).unwrap(), 0.5);
    }

    #[test]
    fn max_pool_of_single_row() {
        let mut g = Graph::new(Retention::Retain);
        let x = g.constant(Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap());
        let z = g.max_axis(&x, 0).unwrap();
        assert_eq!(z.value().data(), x.value().data());
    }

    #[test]
    fn probabilities_are_open_unit_interval() {
        let (m, store) = model(tiny(), 10, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let toks: Vec<usize> = (0..8).map(|_| rng.random_range(0..12)).collect();
            let p1 = rng.random_range(0..8);
            let p2 = (p1 + rng.random_range(1..8)) % 8;
            let p = m.probability(&store, &inst(&toks, p1, p2, 8, true)).unwrap();
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn swapping_mentions_changes_score() {
        let (m, store) = model(tiny(), 10, 8);
        let a = inst(&[3, 4, 5, 6, 7], 0, 3, 8, true);
        let b = inst(&[3, 4, 5, 6, 7], 3, 0, 8, true);
        assert_ne!(m.probability(&store, &a).unwrap(), m.probability(&store, &b).unwrap());
    }

    #[test]
    fn pair_probability_rules() {
        assert_eq!(pair_probability(&[]), PairEvidence::NoEvidence);
        assert_eq!(
            pair_probability(&[0.3]),
            PairEvidence::Scored {
                probability: 0.3,
                representative: 0
            }
        );
        assert_eq!(
            pair_probability(&[0.2, 0.9, 0.4]),
            PairEvidence::Scored {
                probability: 0.9,
                representative: 1
            }
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let mut ps: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
            let before = pair_probability(&ps).probability().unwrap();
            ps.push(rng.random());
            assert!(pair_probability(&ps).probability().unwrap() >= before);
            ps.shuffle(&mut rng);
            let after = pair_probability(&ps).probability().unwrap();
            assert_eq!(after, ps.iter().cloned().fold(f64::MIN, f64::max));
        }
    }

    #[test]
    fn end_to_end_gradient_check() {
        let (m, mut store) = model(tiny(), 10, 9);
        // Zero biases behind a dead ReLU sit exactly on the kink.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for id in m.param_ids() {
            for v in store.get_mut(id).data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let s = inst(&[3, 4, 5, 6, 7, 8], 1, 4, 8, false);
        let rep = gradcheck::check_params("cnn", &store, &m.param_ids(), 6, 1, 1e-5, |g, st| {
            m.loss(g, st, &s, false)
        })
        .unwrap();
        assert!(rep.passed(gradcheck::DEFAULT_TOLERANCE), "{}", rep.max_rel_err);
    }

    #[test]
    fn confident_consistent_prediction_has_small_loss() {
        let (m, mut store) = model(tiny(), 10, 10);
        let s = inst(&[3, 4, 5, 6], 0, 3, 8, true);
        let sign = m.probability(&store, &s).unwrap() - 0.5;
        let v = store.get(m.v).clone();
        let scale = if sign >= 0.0 { 1e4 } else { -1e4 };
        store.set(m.v, v.map(|x| x * scale)).unwrap();
        let mut g = Graph::new(Retention::Retain);
        assert!(m.loss(&mut g, &store, &s, true).unwrap().item() < 1e-6);
    }

    #[test]
    fn word_vector_file() {
        let mut vocab = Vocab::new();
        let alloy = vocab.add("alloy");
        let text = "alloy 1 2 3 4\nunseen 0 0 0 0\n";
        let vecs = parse_word_vectors(text, Path::new("emb.txt"), &vocab, 4).unwrap();
        assert_eq!(vecs.len(), 1);
        let (m, mut store) = model(tiny(), vocab.len(), 11);
        assert_eq!(m.set_word_vectors(&mut store, &vecs).unwrap(), 1);
        assert_eq!(store.get(m.word_embedding()).row(alloy), &[1.0, 2.0, 3.0, 4.0]);
        let err = parse_word_vectors("alloy 1 2\n", Path::new("emb.txt"), &vocab, 4).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn learns_a_trigger_word() {
        // Relation iff token 9 ("causes") sits between the mentions.
        let cfg = CnnConfig {
            max_len: 10,
            dropout_p: 0.2,
            lr: 0.01,
            ..tiny()
        };
        let (m, mut store) = model(cfg, 12, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let make = |rng: &mut ChaCha8Rng| {
            let label = rng.random_bool(0.5);
            let mut toks: Vec<usize> = (0..10).map(|_| rng.random_range(3..9)).collect();
            let p1 = rng.random_range(0..3);
            let p2 = rng.random_range(6..10);
            toks[p1] = 10;
            toks[p2] = 11;
            if label {
                toks[rng.random_range(p1 + 1..p2)] = 9;
            }
            inst(&toks, p1, p2, 10, label)
        };
        let train: Vec<_> = (0..400).map(|_| make(&mut rng)).collect();
        let test: Vec<_> = (0..200).map(|_| make(&mut rng)).collect();
        let opts = ReTrainOptions {
            epochs: 8,
            batch_size: 8,
            seed: 1,
            reduction: Reduction::Mean,
        };
        let losses = train_re(&m, &mut store, &train, &opts).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        let correct = test
            .iter()
            .filter(|s| (m.probability(&store, s).unwrap() > 0.5) == s.label.unwrap())
            .count();
        assert!(correct as f64 / test.len() as f64 >= 0.99, "{correct}/200");
    }
}
