use rand::seq::index::sample;

use super::graph::{Graph, Var};
use super::init;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(f64, Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::dim("grad_check needs a scalar function"));
    }
    let value = v.item();
    if !value.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok((value, g, vars, out))
}

fn check_coords<F>(f: &F, params: &[Tensor], coords: &[(usize, usize)]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (_, g, vars, out) = evaluate(f, params)?;
    let grads = g.backward(out)?;
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for &(p, e) in coords {
        let analytic = grads.get(vars[p]).map_or(0.0, |t| t.data()[e]);
        let orig = work[p].data()[e];
        work[p].data_mut()[e] = orig + FD_STEP;
        let plus = evaluate(f, &work)?.0;
        work[p].data_mut()[e] = orig - FD_STEP;
        let minus = evaluate(f, &work)?.0;
        work[p].data_mut()[e] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(worst)
}

/// Compares reverse-mode gradients of `f` against central finite differences
/// over every coordinate of every parameter and returns the worst relative
/// error.
pub fn grad_check<F>(f: F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |e| (p, e)))
        .collect();
    check_coords(&f, params, &coords)
}

/// Like [`grad_check`] but over at most `max_coords` coordinates drawn
/// without replacement under `seed`; for models too large to sweep fully.
pub fn grad_check_sampled<F>(f: F, params: &[Tensor], max_coords: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let all: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |e| (p, e)))
        .collect();
    if all.len() <= max_coords {
        return check_coords(&f, params, &all);
    }
    let mut rng = init::rng(seed);
    let mut picked: Vec<usize> = sample(&mut rng, all.len(), max_coords).into_vec();
    picked.sort_unstable();
    let coords: Vec<_> = picked.into_iter().map(|i| all[i]).collect();
    check_coords(&f, params, &coords)
}
