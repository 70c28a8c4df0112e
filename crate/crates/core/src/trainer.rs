//! Two-forward-pass training.
//!
//! Pass 1 encodes every paragraph on a discard-mode tape and pins only the
//! per-paragraph mention sums. Pass 2 re-encodes one paragraph at a time on
//! a retain-mode tape, adds the pinned sums of the others as constants and
//! backpropagates. Retained memory is one paragraph's activations plus the
//! pins, whatever the paragraph count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reader::{Question, Reader};
use crate::tensor::{DropoutKey, Gradients, Graph, Optimizer, ParamStore, Retention, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Update after every paragraph.
    #[default]
    Faithful,
    /// Sum encoder gradients over paragraphs, take head gradients from the
    /// first paragraph, update once per question.
    Accumulate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub paragraph_count: usize,
    pub candidate_count: usize,
    pub peak_retained_scalars: usize,
    pub pass1_retained_scalars: usize,
    pub pass2_retained_scalars: Vec<usize>,
    pub losses: Vec<f64>,
}

/// Mention sums pinned by pass 1, one `[(C+1) × d]` matrix per paragraph.
#[derive(Clone, Debug)]
pub struct Pins {
    pub sums: Vec<Tensor>,
    pub retained_scalars: usize,
}

fn graph(retention: Retention, key: Option<DropoutKey>) -> Graph {
    let g = Graph::new(retention);
    match key {
        Some(k) => g.with_dropout(k),
        None => g,
    }
}

/// First pass under the snapshot parameters `frozen`.
pub fn pass1(reader: &Reader, frozen: &ParamStore, q: &Question, key: Option<DropoutKey>) -> Result<Pins> {
    if q.paragraphs.is_empty() {
        return Err(Error::EmptyPassage(format!("question {} has no paragraphs", q.id)));
    }
    let mut g = graph(Retention::Discard, key);
    let mut sums = Vec::with_capacity(q.paragraphs.len());
    for k in 0..q.paragraphs.len() {
        let s = reader.paragraph_sums(&mut g, frozen, q, k)?;
        g.pin(&s);
        sums.push(s.value().clone());
    }
    Ok(Pins {
        sums,
        retained_scalars: g.retained_scalars(),
    })
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub loss: f64,
    pub retained_scalars: usize,
    pub grads: Gradients,
}

/// Recomputes paragraph `k` with gradients and backpropagates the passage loss.
pub fn pass2_step(
    reader: &Reader,
    store: &ParamStore,
    q: &Question,
    k: usize,
    pins: &Pins,
    key: Option<DropoutKey>,
) -> Result<StepOutcome> {
    if k >= q.paragraphs.len() || pins.sums.len() != q.paragraphs.len() {
        return Err(Error::contract(format!(
            "pass 2 step {k} for question {} with {} paragraphs and {} pins",
            q.id,
            q.paragraphs.len(),
            pins.sums.len()
        )));
    }
    let mut g = graph(Retention::Retain, key);
    let others: Vec<Option<Tensor>> = pins.sums.iter().map(|t| Some(t.clone())).collect();
    let loss = reader.loss_with_pins(&mut g, store, q, k, &others)?;
    let retained = g.retained_scalars();
    g.backward(&loss)?;
    Ok(StepOutcome {
        loss: loss.item(),
        retained_scalars: retained,
        grads: g.param_grads(),
    })
}

fn report(q: &Question, pins: &Pins, steps: &[(f64, usize)]) -> MemoryReport {
    let pass2: Vec<usize> = steps.iter().map(|s| s.1).collect();
    MemoryReport {
        paragraph_count: q.paragraphs.len(),
        candidate_count: q.candidates.len(),
        peak_retained_scalars: pass2.iter().copied().fold(pins.retained_scalars, usize::max),
        pass1_retained_scalars: pins.retained_scalars,
        pass2_retained_scalars: pass2,
        losses: steps.iter().map(|s| s.0).collect(),
    }
}

/// Accumulate-mode gradient of one question without applying it.
pub fn two_pass_gradients(
    reader: &Reader,
    store: &ParamStore,
    q: &Question,
    key: Option<DropoutKey>,
) -> Result<(Gradients, MemoryReport)> {
    let pins = pass1(reader, store, q, key)?;
    let head = reader.head_ids();
    let mut total = Gradients::new();
    let mut steps = Vec::with_capacity(q.paragraphs.len());
    for k in 0..q.paragraphs.len() {
        let mut out = pass2_step(reader, store, q, k, &pins, key)?;
        if k > 0 {
            out.grads.retain(|id| !head.contains(&id));
        }
        total.merge(&out.grads);
        steps.push((out.loss, out.retained_scalars));
    }
    Ok((total, report(q, &pins, &steps)))
}

/// Pass 1 then pass 2 for every paragraph, updating `store`.
pub fn train_question(
    reader: &Reader,
    store: &mut ParamStore,
    q: &Question,
    opt: &mut Optimizer,
    mode: TrainMode,
    key: Option<DropoutKey>,
) -> Result<MemoryReport> {
    match mode {
        TrainMode::Accumulate => {
            let (grads, report) = two_pass_gradients(reader, store, q, key)?;
            opt.step(store, &grads)?;
            Ok(report)
        }
        TrainMode::Faithful => {
            // Pins stay those of the parameters at the start of the question.
            let pins = pass1(reader, store, q, key)?;
            let mut steps = Vec::with_capacity(q.paragraphs.len());
            for k in 0..q.paragraphs.len() {
                let out = pass2_step(reader, store, q, k, &pins, key)?;
                opt.step(store, &out.grads)?;
                steps.push((out.loss, out.retained_scalars));
            }
            Ok(report(q, &pins, &steps))
        }
    }
}

#[derive(Clone, Debug)]
pub struct NaiveOutcome {
    pub loss: f64,
    pub retained_scalars: usize,
    pub grads: Gradients,
}

/// Full-retention gradient: every paragraph on one tape.
pub fn naive_gradients(
    reader: &Reader,
    store: &ParamStore,
    q: &Question,
    key: Option<DropoutKey>,
) -> Result<NaiveOutcome> {
    let mut g = graph(Retention::Retain, key);
    let loss = reader.naive_loss(&mut g, store, q)?;
    let retained = g.retained_scalars();
    g.backward(&loss)?;
    Ok(NaiveOutcome {
        loss: loss.item(),
        retained_scalars: retained,
        grads: g.param_grads(),
    })
}

pub fn naive_train_question(
    reader: &Reader,
    store: &mut ParamStore,
    q: &Question,
    opt: &mut Optimizer,
    key: Option<DropoutKey>,
) -> Result<NaiveOutcome> {
    let out = naive_gradients(reader, store, q, key)?;
    opt.step(store, &out.grads)?;
    Ok(out)
}

/// Largest per-parameter relative error `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`.
/// A parameter present on one side only is compared against zeros.
pub fn gradient_rel_err(a: &Gradients, b: &Gradients) -> f64 {
    let mut worst = 0.0f64;
    let ids: std::collections::BTreeSet<_> = a.iter().map(|(id, _)| id).chain(b.iter().map(|(id, _)| id)).collect();
    for id in ids {
        let (ta, tb) = (a.get(id), b.get(id));
        let n = ta.or(tb).map(Tensor::numel).unwrap_or(0);
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for i in 0..n {
            let x = ta.map_or(0.0, |t| t.data()[i]);
            let y = tb.map_or(0.0, |t| t.data()[i]);
            diff = diff.max((x - y).abs());
            scale = scale.max(x.abs()).max(y.abs());
        }
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}
