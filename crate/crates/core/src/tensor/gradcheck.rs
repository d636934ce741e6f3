//! Central-difference verification of tape gradients.

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator guard in the relative error.
const REL_GUARD: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + REL_GUARD)
}

fn check_step(step: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::Invalid(format!("finite-difference step {step} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] for functions of several tensors.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check_step(step)?;
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.get(v)).collect::<Vec<_>>()
    };
    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (i, x) in xs.iter().enumerate() {
        for j in 0..x.len() {
            let orig = x.data()[j];
            probe[i].data_mut()[j] = orig + step;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Per-coordinate outcome of [`grad_check_params`].
#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Checks selected coordinates of a parameter store. `loss` evaluates the
/// objective for the current store contents and returns the value together
/// with the analytic gradient of every parameter (indexed by [`ParamId`]).
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    coords: &[(ParamId, usize)],
    step: f64,
    loss: F,
) -> Result<Vec<CoordCheck>>
where
    F: Fn(&ParamStore, bool) -> Result<(f64, Option<Vec<Tensor>>)>,
{
    check_step(step)?;
    let (_, grads) = loss(store, true)?;
    let grads = grads.ok_or_else(|| Error::Invalid("loss returned no gradients".into()))?;
    let mut out = Vec::with_capacity(coords.len());
    for &(pid, idx) in coords {
        let orig = store.value(pid).data()[idx];
        store.value_mut(pid).data_mut()[idx] = orig + step;
        let (up, _) = loss(store, false)?;
        store.value_mut(pid).data_mut()[idx] = orig - step;
        let (down, _) = loss(store, false)?;
        store.value_mut(pid).data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * step);
        let analytic = grads[pid.index()].data()[idx];
        out.push(CoordCheck {
            param: store.name(pid).to_string(),
            index: idx,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    Ok(out)
}
