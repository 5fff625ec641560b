//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|)` over whole vectors; vectors that are both
/// below `1e-10` in norm count as agreeing.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-10 {
        return norm(&diff);
    }
    norm(&diff) / scale
}

/// Compares the gradient of the scalar `f(inputs)` with central differences
/// over every input coordinate and returns the relative error.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.leaf(&x.clone().with_grad()))
        .collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let g = grads
            .get(*v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; v.numel()]);
        analytic.extend(g);
        for i in 0..inputs[k].numel() {
            numeric.push(central(&mut work, k, i, &eval)?);
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

fn central<F>(work: &mut [Tensor], k: usize, i: usize, eval: &F) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let orig = work[k].data()[i];
    work[k].data_mut()[i] = orig + STEP;
    let up = eval(work)?;
    work[k].data_mut()[i] = orig - STEP;
    let down = eval(work)?;
    work[k].data_mut()[i] = orig;
    Ok((up - down) / (2.0 * STEP))
}

/// Like [`check_inputs`] but over the parameters of `store`, probing at most
/// `per_param` randomly chosen coordinates of each parameter array.
pub fn check_params<F, R>(store: &ParamStore, per_param: usize, rng: &mut R, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
    R: Rng,
{
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let loss = f(&tape, &bound)?;
    let grads = tape.backward(loss)?;
    let mut work = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let b = s.bind(&tape);
        Ok(f(&tape, &b)?.item())
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let ids: Vec<_> = (0..store.len()).map(crate::params::ParamId).collect();
    for id in ids {
        let n = store.get(id).numel();
        let g = grads
            .get(bound[id])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        for i in sample(rng, n, per_param.min(n)) {
            analytic.push(g[i]);
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + STEP;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - STEP;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}
