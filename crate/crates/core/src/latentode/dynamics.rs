//! Speed and acceleration of the latent state.

use std::fmt::Write;

use super::field::VectorField;
use super::odernn::Trajectory;
use crate::error::Result;
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

/// Below this speed the acceleration is reported as zero.
pub const VELOCITY_FLOOR: f64 = 1e-10;

/// `v = ‖f‖₂` and `a = fᵀ J f / ‖f‖₂`, with the Jacobian `J = ∂f/∂z` built
/// row by row from tape backward passes.
pub fn velocity_acceleration(store: &ParamStore, field: &VectorField, z: &[f64], t: f64) -> Result<(f64, f64)> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let zv = tape.leaf(Tensor::vector(z.to_vec()));
    let f = field.taped(&tape, &bound, zv, t)?;
    let fval = f.value();
    let v = fval.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if v <= VELOCITY_FLOOR {
        return Ok((v, 0.0));
    }
    let mut ftjf = 0.0;
    for i in 0..fval.len() {
        let row = tape.backward(f.slice(0, i, i + 1)?)?.get(zv);
        let jf_i: f64 = row.data().iter().zip(fval.data()).map(|(j, f)| j * f).sum();
        ftjf += fval.data()[i] * jf_i;
    }
    Ok((v, ftjf / v))
}

/// Differentiable version of [`velocity_acceleration`].
pub fn velocity_acceleration_taped<'t>(
    tape: &'t Tape,
    bound: &Bound<'t>,
    field: &VectorField,
    z: Var<'t>,
    t: f64,
) -> Result<(Var<'t>, Var<'t>)> {
    let (f, jf) = field.taped_jvp_self(tape, bound, z, t)?;
    let v = f.norm_l2();
    if v.item() <= VELOCITY_FLOOR {
        return Ok((v, tape.scalar(0.0)));
    }
    let a = f.mul(jf)?.sum().div(v)?;
    Ok((v, a))
}

/// `t,z_norm,v,a` rows at every post-update state, for plotting.
pub fn trajectory_csv(store: &ParamStore, field: &VectorField, traj: &Trajectory) -> Result<String> {
    let mut out = String::from("t,z_norm,v,a\n");
    for (t, z) in traj.times.iter().zip(&traj.post) {
        let (v, a) = velocity_acceleration(store, field, z, *t)?;
        let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        writeln!(out, "{t},{norm},{v},{a}").expect("writing to a String cannot fail");
    }
    Ok(out)
}
