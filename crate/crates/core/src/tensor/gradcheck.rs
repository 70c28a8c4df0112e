//! Central finite-difference gradient checks.
//!
//! Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`
//! with `floor = 1e-6`, so exact-zero gradients are compared absolutely.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Retention, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

fn scalar_of(g: &mut Graph, build: &impl Fn(&mut Graph, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> Result<f64> {
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    Ok(build(g, &vars)?.item())
}

/// Checks `d build(inputs) / d inputs` against central differences.
pub fn check_inputs<F>(name: &str, inputs: &[Tensor], step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(Retention::Retain);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(&out)?;

    let mut worst = 0.0f64;
    let mut coords = 0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g.grad(&vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= step;
            let fp = scalar_of(&mut Graph::new(Retention::Discard), &build, &plus)?;
            let fm = scalar_of(&mut Graph::new(Retention::Discard), &build, &minus)?;
            let numeric = (fp - fm) / (2.0 * step);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
            coords += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        coords_checked: coords,
    })
}

/// Checks parameter gradients of a model loss. At most `per_param`
/// coordinates of each parameter are probed (chosen with a seeded RNG).
pub fn check_params<F>(
    name: &str,
    store: &ParamStore,
    ids: &[ParamId],
    per_param: usize,
    seed: u64,
    step: f64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    use rand::seq::index::sample;

    let mut g = Graph::new(Retention::Retain);
    let out = loss(&mut g, store)?;
    g.backward(&out)?;
    let grads = g.param_grads();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut coords = 0;
    for &id in ids {
        let n = store.get(id).numel();
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let picks = sample(&mut rng, n, per_param.min(n));
        for i in picks.iter() {
            let eval = |delta: f64| -> Result<f64> {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[i] += delta;
                let mut g = Graph::new(Retention::Discard);
                Ok(loss(&mut g, &s)?.item())
            };
            let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
            coords += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        coords_checked: coords,
    })
}

/// Runs the finite-difference check on every differentiable tape op.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);
    // Weights for turning non-scalar outputs into a scalar loss.
    let w34 = r(&[3, 4]);
    let w32 = r(&[3, 2]);
    let w42 = r(&[4, 2]);
    let w5 = r(&[5]);
    let w23 = r(&[2, 3]);
    let w47 = r(&[4, 7]);
    let w4 = r(&[4]);
    let w3 = r(&[3]);
    let w54 = r(&[5, 4]);
    let w36 = r(&[3, 6]);

    let weighted = move |g: &mut Graph, y: &Var, w: &Tensor| -> Result<Var> {
        let w = g.constant(w.clone());
        let p = g.mul(y, &w)?;
        Ok(g.sum(&p))
    };

    let mut out = Vec::new();
    let h = DEFAULT_STEP;
    out.push(check_inputs("matmul", &[r(&[3, 4]), r(&[4, 2])], h, |g, v| {
        let y = g.matmul(&v[0], &v[1])?;
        weighted(g, &y, &w32)
    })?);
    out.push(check_inputs("transpose", &[r(&[4, 3])], h, |g, v| {
        let y = g.transpose(&v[0])?;
        weighted(g, &y, &w34)
    })?);
    out.push(check_inputs("add(broadcast)", &[r(&[3, 4]), r(&[4])], h, |g, v| {
        let y = g.add(&v[0], &v[1])?;
        weighted(g, &y, &w34)
    })?);
    out.push(check_inputs("mul", &[r(&[3, 4]), r(&[3, 4])], h, |g, v| {
        let y = g.mul(&v[0], &v[1])?;
        weighted(g, &y, &w34)
    })?);
    out.push(check_inputs("scale", &[r(&[3, 4])], h, |g, v| {
        let y = g.scale(&v[0], -1.7);
        weighted(g, &y, &w34)
    })?);
    out.push(check_inputs("relu", &[r(&[3, 4])], h, |g, v| {
        let y = g.relu(&v[0]);
        weighted(g, &y, &w34)
    })?);
    out.push(check_inputs("sigmoid", &[r(&[3, 4])], h, |g, v| {
        let y = g.sigmoid(&v[0]);
        weighted(g, &y, &w34)
    })?);
    out.push(check_inputs("log_sigmoid", &[r(&[3, 4])], h, |g, v| {
        let y = g.log_sigmoid(&v[0]);
        weighted(g, &y, &w34)
    })?);
    let positive = r(&[3, 4]).map(|x| x.abs() + 0.5);
    out.push(check_inputs("log", &[positive], h, |g, v| {
        let y = g.log(&v[0])?;
        weighted(g, &y, &w34)
    })?);
    out.push(check_inputs("softmax", &[r(&[5])], h, |g, v| {
        let y = g.softmax(&v[0], 0)?;
        weighted(g, &y, &w5)
    })?);
    out.push(check_inputs("softmax(axis0)", &[r(&[3, 4])], h, |g, v| {
        let y = g.softmax(&v[0], 0)?;
        weighted(g, &y, &w34)
    })?);
    out.push(check_inputs("log_softmax", &[r(&[3, 4])], h, |g, v| {
        let y = g.log_softmax(&v[0], 1)?;
        weighted(g, &y, &w34)
    })?);
    out.push(check_inputs("concat", &[r(&[2, 1]), r(&[2, 2])], h, |g, v| {
        let y = g.concat(&[&v[0], &v[1]], 1)?;
        weighted(g, &y, &w23)
    })?);
    out.push(check_inputs("sum_axis", &[r(&[3, 4])], h, |g, v| {
        let y = g.sum_axis(&v[0], 0)?;
        weighted(g, &y, &w4)
    })?);
    out.push(check_inputs("max_axis", &[r(&[3, 4])], h, |g, v| {
        let y = g.max_axis(&v[0], 1)?;
        weighted(g, &y, &w3)
    })?);
    out.push(check_inputs("embedding", &[r(&[6, 4])], h, |g, v| {
        let y = g.embedding(&v[0], &[5, 0, 2, 0, 1])?;
        weighted(g, &y, &w54)
    })?);
    out.push(check_inputs("sum_rows", &[r(&[5, 4])], h, |g, v| {
        let y = g.sum_rows(&v[0], &[1, 3, 1])?;
        weighted(g, &y, &w4)
    })?);
    out.push(check_inputs("group_sum", &[r(&[5, 4])], h, |g, v| {
        let y = g.group_sum(&v[0], &[vec![1, 3, 1], vec![], vec![4, 0]])?;
        weighted(g, &y, &w34)
    })?);
    out.push(check_inputs("reshape", &[r(&[4, 3])], h, |g, v| {
        let y = g.reshape(&v[0], &[3, 4])?;
        weighted(g, &y, &w34)
    })?);
    out.push(check_inputs("slice_cols", &[r(&[4, 5])], h, |g, v| {
        let y = g.slice_cols(&v[0], 1, 3)?;
        weighted(g, &y, &w42)
    })?);
    out.push(check_inputs("layer_norm", &[r(&[3, 4]), r(&[4]), r(&[4])], h, |g, v| {
        let y = g.layer_norm(&v[0], &v[1], &v[2], 1e-5)?;
        weighted(g, &y, &w34)
    })?);
    out.push(check_inputs("unfold", &[r(&[3, 2])], h, |g, v| {
        let y = g.unfold(&v[0], 3, 1, 1)?;
        weighted(g, &y, &w36)
    })?);
    out.push(check_inputs("pick", &[r(&[4, 7])], h, |g, v| {
        let y = g.mul(&v[0], &v[0])?;
        let w = g.constant(w47.clone());
        let y = g.mul(&y, &w)?;
        g.pick(&y, 9)
    })?);
    out.push(check_dropout(seed, r(&[3, 4]), &w34)?);
    Ok(out)
}

/// Dropout in training mode: the mask is fixed by the key, so the op is
/// linear and differentiable everywhere.
fn check_dropout(seed: u64, x: Tensor, w: &Tensor) -> Result<GradCheckReport> {
    use super::DropoutKey;
    let key = DropoutKey { seed, step: 7 };
    let f = |x: &Tensor, leaf: bool| -> Result<(f64, Option<Tensor>)> {
        let mut g = Graph::new(Retention::Retain).with_dropout(key);
        let v = if leaf { g.leaf(x.clone()) } else { g.constant(x.clone()) };
        let y = g.dropout(&v, 0.3)?;
        let wc = g.constant(w.clone());
        let p = g.mul(&y, &wc)?;
        let s = g.sum(&p);
        if leaf {
            g.backward(&s)?;
        }
        Ok((s.item(), g.grad(&v).cloned()))
    };
    let (_, grad) = f(&x, true)?;
    let grad = grad.unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut p = x.clone();
        p.data_mut()[i] += DEFAULT_STEP;
        let mut m = x.clone();
        m.data_mut()[i] -= DEFAULT_STEP;
        let numeric = (f(&p, false)?.0 - f(&m, false)?.0) / (2.0 * DEFAULT_STEP);
        worst = worst.max(rel_err(grad.data()[i], numeric));
    }
    Ok(GradCheckReport {
        name: "dropout".into(),
        max_rel_err: worst,
        coords_checked: x.numel(),
    })
}
