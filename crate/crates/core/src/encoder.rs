//! Post-layer-norm Transformer encoder.
//!
//! Input layout is `question tokens, [SEP], paragraph tokens`; a paragraph
//! position `t` therefore sits at row `|q| + 1 + t` of the output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::vocab::SEP;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout_p: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            max_positions: 128,
            vocab_size: 256,
            dropout_p: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_positions", self.max_positions),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be positive")));
            }
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "encoder.model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("encoder.dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Clone, Debug)]
struct Layer {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

impl Layer {
    fn ids(&self) -> [ParamId; 15] {
        [
            self.wq, self.bq, self.wk, self.wv, self.bv, self.wo, self.bo, self.ln1_g, self.ln1_b,
            self.w1, self.b1, self.w2, self.b2, self.ln2_g, self.ln2_b,
        ]
    }
}

/// Encoder parameters (held in a [`ParamStore`]) plus their configuration.
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<Layer>,
}

/// Scaled dot-product attention, `softmax(Q Kᵀ / √d_k) V`.
pub fn attention(g: &mut Graph, q: &Var, k: &Var, v: &Var) -> Result<Var> {
    let dk = *q
        .shape()
        .last()
        .ok_or_else(|| Error::Config("attention on a scalar query".into()))?;
    if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
        return Err(Error::shape("attention", "Q, K and V must be matrices"));
    }
    if k.shape()[1] != dk || k.shape()[0] != v.shape()[0] {
        return Err(Error::shape(
            "attention",
            format!("Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, &kt)?;
    let logits = g.scale(&logits, 1.0 / (dk as f64).sqrt());
    let weights = g.softmax(&logits, 1)?;
    g.matmul(&weights, v)
}

fn linear_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

impl Encoder {
    /// Registers freshly initialised parameters under `prefix` in `store`.
    pub fn init<R: Rng + ?Sized>(cfg: EncoderConfig, prefix: &str, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let f = cfg.ffn_dim;
        let tok_emb = store.add(format!("{prefix}.tok_emb"), Tensor::randn(&[cfg.vocab_size, d], 1.0, rng));
        let pos_emb = store.add(format!("{prefix}.pos_emb"), Tensor::randn(&[cfg.max_positions, d], 0.5, rng));
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let p = format!("{prefix}.layer{l}");
            let mut add = |name: &str, t: Tensor| store.add(format!("{p}.{name}"), t);
            layers.push(Layer {
                wq: add("attn.wq", linear_init(d, d, rng)),
                bq: add("attn.bq", Tensor::zeros(&[d])),
                wk: add("attn.wk", linear_init(d, d, rng)),
                wv: add("attn.wv", linear_init(d, d, rng)),
                bv: add("attn.bv", Tensor::zeros(&[d])),
                wo: add("attn.wo", linear_init(d, d, rng)),
                bo: add("attn.bo", Tensor::zeros(&[d])),
                ln1_g: add("ln1.gamma", Tensor::filled(&[d], 1.0)),
                ln1_b: add("ln1.beta", Tensor::zeros(&[d])),
                w1: add("ffn.w1", linear_init(d, f, rng)),
                b1: add("ffn.b1", Tensor::zeros(&[f])),
                w2: add("ffn.w2", linear_init(f, d, rng)),
                b2: add("ffn.b2", Tensor::zeros(&[d])),
                ln2_g: add("ln2.gamma", Tensor::filled(&[d], 1.0)),
                ln2_b: add("ln2.beta", Tensor::zeros(&[d])),
            });
        }
        Ok(Self {
            cfg,
            tok_emb,
            pos_emb,
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn token_embedding(&self) -> ParamId {
        self.tok_emb
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            ids.extend(l.ids());
        }
        ids
    }

    /// Row of paragraph position `t` in the encoder output.
    pub fn paragraph_offset(question_len: usize) -> usize {
        question_len + 1
    }

    pub fn input_ids(&self, question: &[usize], paragraph: &[usize]) -> Result<Vec<usize>> {
        let len = question.len() + 1 + paragraph.len();
        if len > self.cfg.max_positions {
            return Err(Error::Truncation {
                len,
                max: self.cfg.max_positions,
            });
        }
        let mut ids = Vec::with_capacity(len);
        ids.extend_from_slice(question);
        ids.push(SEP);
        ids.extend_from_slice(paragraph);
        Ok(ids)
    }

    /// Contextual embeddings `[|q| + 1 + |para|, d]` for one question/paragraph pair.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, question: &[usize], paragraph: &[usize]) -> Result<Var> {
        let ids = self.input_ids(question, paragraph)?;
        self.encode_ids(g, store, &ids)
    }

    pub fn encode_ids(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        if ids.len() > self.cfg.max_positions {
            return Err(Error::Truncation {
                len: ids.len(),
                max: self.cfg.max_positions,
            });
        }
        let p = self.cfg.dropout_p;
        let tok = g.param(store, self.tok_emb);
        let pos = g.param(store, self.pos_emb);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let te = g.embedding(&tok, ids)?;
        let pe = g.embedding(&pos, &positions)?;
        let mut x = g.add(&te, &pe)?;
        x = g.dropout(&x, p)?;
        for layer in &self.layers {
            x = self.layer_forward(g, store, layer, &x)?;
        }
        Ok(x)
    }

    fn affine(g: &mut Graph, store: &ParamStore, x: &Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = g.param(store, w);
        let b = g.param(store, b);
        let y = g.matmul(x, &w)?;
        g.add(&y, &b)
    }

    fn layer_forward(&self, g: &mut Graph, store: &ParamStore, l: &Layer, x: &Var) -> Result<Var> {
        let p = self.cfg.dropout_p;
        let dh = self.cfg.head_dim();
        let q = Self::affine(g, store, x, l.wq, l.bq)?;
        // No key bias: it shifts each logit row by a constant.
        let wk = g.param(store, l.wk);
        let k = g.matmul(x, &wk)?;
        let v = Self::affine(g, store, x, l.wv, l.bv)?;
        let mut heads = Vec::with_capacity(self.cfg.num_heads);
        for h in 0..self.cfg.num_heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.cfg.num_heads == 1 {
                (q.clone(), k.clone(), v.clone())
            } else {
                (g.slice_cols(&q, s, e)?, g.slice_cols(&k, s, e)?, g.slice_cols(&v, s, e)?)
            };
            heads.push(attention(g, &qh, &kh, &vh)?);
        }
        let merged = if heads.len() == 1 {
            heads.pop().expect("one head")
        } else {
            let refs: Vec<&Var> = heads.iter().collect();
            g.concat(&refs, 1)?
        };
        let attn = Self::affine(g, store, &merged, l.wo, l.bo)?;
        let attn = g.dropout(&attn, p)?;
        let res = g.add(x, &attn)?;
        let (g1, b1) = (g.param(store, l.ln1_g), g.param(store, l.ln1_b));
        let x = g.layer_norm(&res, &g1, &b1, LN_EPS)?;

        let hdn = Self::affine(g, store, &x, l.w1, l.b1)?;
        let hdn = g.relu(&hdn);
        let ff = Self::affine(g, store, &hdn, l.w2, l.b2)?;
        let ff = g.dropout(&ff, p)?;
        let res = g.add(&x, &ff)?;
        let (g2, b2) = (g.param(store, l.ln2_g), g.param(store, l.ln2_b));
        g.layer_norm(&res, &g2, &b2, LN_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradcheck, Retention};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(vocab: usize) -> (Encoder, ParamStore) {
        let cfg = EncoderConfig {
            num_layers: 2,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 12,
            max_positions: 16,
            vocab_size: vocab,
            dropout_p: 0.0,
        };
        let mut store = ParamStore::new();
        let enc = Encoder::init(cfg, "enc", &mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (enc, store)
    }

    fn encode(enc: &Encoder, store: &ParamStore, q: &[usize], p: &[usize]) -> Tensor {
        let mut g = Graph::new(Retention::Discard);
        enc.encode(&mut g, store, q, p).unwrap().value().clone()
    }

    #[test]
    fn attention_single_key_returns_value() {
        let mut g = Graph::new(Retention::Retain);
        let q = g.constant(Tensor::matrix(1, 2, vec![0.3, -1.0]).unwrap());
        let k = g.constant(Tensor::matrix(1, 2, vec![2.0, 0.5]).unwrap());
        let v = g.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        assert_eq!(attention(&mut g, &q, &k, &v).unwrap().value().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn attention_uniform_when_orthogonal() {
        let mut g = Graph::new(Retention::Retain);
        let q = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let k = g.constant(Tensor::matrix(3, 2, vec![0.0, 1.0, 0.0, -2.0, 0.0, 5.0]).unwrap());
        let v = g.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 6.0]).unwrap());
        let out = attention(&mut g, &q, &k, &v).unwrap();
        for &o in out.value().data() {
            assert!((o - 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new(Retention::Retain);
        let q = g.constant(Tensor::randn(&[3, 2], 1.0, &mut rng));
        let k = g.constant(Tensor::randn(&[3, 2], 1.0, &mut rng));
        let v = g.constant(Tensor::randn(&[3, 2], 1.0, &mut rng));
        let kt = g.transpose(&k).unwrap();
        let logits = g.matmul(&q, &kt).unwrap();
        let logits = g.scale(&logits, 1.0 / 2f64.sqrt());
        let w = g.softmax(&logits, 1).unwrap();
        for i in 0..3 {
            let s: f64 = w.value().row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let out = attention(&mut g, &q, &k, &v).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = (0..3).map(|i| v.value().at(i, j)).collect();
            let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
            for i in 0..3 {
                let o = out.value().at(i, j);
                assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn config_rejects_bad_heads() {
        let cfg = EncoderConfig {
            model_dim: 10,
            num_heads: 4,
            ..EncoderConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn output_shape_and_overflow() {
        let (enc, store) = tiny(20);
        let h = encode(&enc, &store, &[5, 6], &[7, 8, 9]);
        assert_eq!(h.shape(), &[2 + 1 + 3, 8]);
        let mut g = Graph::new(Retention::Discard);
        let long = vec![4; 14];
        assert!(matches!(
            enc.encode(&mut g, &store, &[5, 6], &long),
            Err(Error::Truncation { len: 17, max: 16 })
        ));
    }

    #[test]
    fn paragraphs_change_paragraph_span() {
        let (enc, store) = tiny(20);
        let a = encode(&enc, &store, &[5, 6], &[7, 8, 9]);
        let b = encode(&enc, &store, &[5, 6], &[7, 10, 9]);
        for r in 3..6 {
            assert_ne!(a.row(r), b.row(r));
        }
        assert_eq!(a, encode(&enc, &store, &[5, 6], &[7, 8, 9]));
    }

    #[test]
    fn relabeling_vocabulary_is_invisible() {
        let (enc, store) = tiny(20);
        // Permutation of ids 3..20 (specials fixed).
        let perm: Vec<usize> = (0..20).map(|i| if i < 3 { i } else { 3 + (i - 3 + 7) % 17 }).collect();
        let mut relabeled = store.clone();
        let table = store.get(enc.token_embedding());
        let mut new = table.clone();
        for old in 0..20 {
            new.data_mut()[perm[old] * 8..perm[old] * 8 + 8].copy_from_slice(table.row(old));
        }
        relabeled.set(enc.token_embedding(), new).unwrap();
        let q = [4, 11];
        let p = [7, 19, 3, 12];
        let map = |xs: &[usize]| xs.iter().map(|&i| perm[i]).collect::<Vec<_>>();
        assert_eq!(encode(&enc, &store, &q, &p), encode(&enc, &relabeled, &map(&q), &map(&p)));
    }

    #[test]
    fn gradient_through_encoder_matches_finite_differences() {
        let (enc, store) = tiny(12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let rep = gradcheck::check_params("encoder", &store, &enc.param_ids(), 6, 9, 1e-5, |g, s| {
            let h = enc.encode(g, s, &[4, 5], &[6, 7, 8])?;
            let w = g.constant(head.clone());
            let y = g.mul(&h, &w)?;
            Ok(g.sum(&y))
        })
        .unwrap();
        assert!(rep.passed(1e-4), "max rel err {}", rep.max_rel_err);
    }
}
