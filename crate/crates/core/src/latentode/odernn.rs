use std::rc::Rc;

use super::field::VectorField;
use super::gru::Gru;
use super::solver::{dopri5, SolverOptions, StepRecord, A, B5, C};
use crate::error::{Error, Result};
use crate::tensor::{Bound, CustomBackward, ParamId, ParamStore, SeededRng, Tape, Tensor, Var};

/// How gradients flow through the continuous segments.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradMode {
    /// Backward adjoint solve per segment.
    #[default]
    Adjoint,
    /// Differentiate through the accepted solver steps.
    Direct,
}

/// States around every observation plus the accepted steps that led to it.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
    /// `segments[i]` holds the steps integrating from `times[i-1]` to
    /// `times[i]`; `segments[0]` is empty.
    pub segments: Vec<Vec<StepRecord>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.post.last().expect("trajectory has at least one observation")
    }
}

/// Gradients returned by [`OdeRnn::adjoint_backward`].
#[derive(Clone, Debug)]
pub struct OdeGradients {
    pub z_init: Vec<f64>,
    pub xs: Vec<Vec<f64>>,
    /// Ordered as [`VectorField::trainable`].
    pub field: [Tensor; 4],
    /// Ordered as [`Gru::params`].
    pub gru: [Tensor; 9],
}

/// Latent ODE between observations, GRU update at each one.
#[derive(Clone, Debug)]
pub struct OdeRnn {
    pub field: VectorField,
    pub gru: Gru,
    pub opts: SolverOptions,
}

fn check_inputs(times: &[f64], n_xs: usize) -> Result<()> {
    if times.is_empty() {
        return Err(Error::Invalid("observation sequence is empty".into()));
    }
    if times.len() != n_xs {
        return Err(Error::Invalid(format!("{} times but {} observations", times.len(), n_xs)));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Invalid("observation times must be strictly increasing".into()));
    }
    Ok(())
}

/// Result of one reverse-time adjoint solve.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointSegment {
    pub z_start: Vec<f64>,
    pub a_start: Vec<f64>,
    pub param_grad: Vec<f64>,
}

/// Solves the adjoint system of `dz/dt = field(t, z)` backwards from `t1` to
/// `t0`. `vjp(t, z, a)` returns `(aᵀ ∂f/∂z, aᵀ ∂f/∂θ)` with `n_params`
/// parameter entries. The augmented state `[z, a, a_θ]` is integrated in the
/// reversed time `s = -t` so that the forward solver can be reused.
#[allow(clippy::too_many_arguments)]
pub fn adjoint_segment<F, J>(
    field: F,
    vjp: J,
    z_end: &[f64],
    a_end: &[f64],
    n_params: usize,
    t0: f64,
    t1: f64,
    opts: &SolverOptions,
) -> Result<AdjointSegment>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
    J: Fn(f64, &[f64], &[f64]) -> (Vec<f64>, Vec<f64>),
{
    let d = z_end.len();
    let mut y = z_end.to_vec();
    y.extend_from_slice(a_end);
    y.resize(2 * d + n_params, 0.0);
    let aug = |s: f64, y: &[f64]| -> Result<Vec<f64>> {
        let t = -s;
        let (z, adj) = (&y[..d], &y[d..2 * d]);
        let (gz, gp) = vjp(t, z, adj);
        let mut out = Vec::with_capacity(y.len());
        out.extend(field(t, z).into_iter().map(|v| -v));
        out.extend(gz);
        out.extend(gp);
        Ok(out)
    };
    let sol = dopri5(aug, &y, -t1, -t0, opts)?;
    Ok(AdjointSegment {
        z_start: sol.z[..d].to_vec(),
        a_start: sol.z[d..2 * d].to_vec(),
        param_grad: sol.z[2 * d..].to_vec(),
    })
}

impl OdeRnn {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        dim: usize,
        hidden: usize,
        time_dim: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let field = VectorField::new(store, &format!("{prefix}.field"), dim, hidden, time_dim, rng);
        let gru = Gru::new(store, &format!("{prefix}.gru"), input_dim, dim, rng);
        Self {
            field,
            gru,
            opts: SolverOptions::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.field.dim
    }

    fn integrate(&self, store: &ParamStore, z: &[f64], t0: f64, t1: f64) -> Result<(Vec<f64>, Vec<StepRecord>)> {
        let sol = dopri5(|t, z| Ok(self.field.eval(store, z, t)), z, t0, t1, &self.opts)?;
        Ok((sol.z, sol.steps))
    }

    pub fn encode(&self, store: &ParamStore, times: &[f64], xs: &[Vec<f64>], z_init: &[f64]) -> Result<Trajectory> {
        check_inputs(times, xs.len())?;
        let mut traj = Trajectory {
            times: times.to_vec(),
            pre: Vec::with_capacity(times.len()),
            post: Vec::with_capacity(times.len()),
            segments: Vec::with_capacity(times.len()),
        };
        let mut z = z_init.to_vec();
        for (i, x) in xs.iter().enumerate() {
            let steps = if i == 0 {
                Vec::new()
            } else {
                let (zn, steps) = self.integrate(store, &z, times[i - 1], times[i])?;
                z = zn;
                steps
            };
            traj.pre.push(z.clone());
            z = self.gru.forward(store, x, &z);
            traj.post.push(z.clone());
            traj.segments.push(steps);
        }
        Ok(traj)
    }

    /// Propagates `grad_final = ∂L/∂z(t_N⁺)` back to the initial state, the
    /// observations and all weights. Each continuous segment is handled by a
    /// reverse-time solve of the augmented state `[z, a, a_θ]`.
    pub fn adjoint_backward(
        &self,
        store: &ParamStore,
        traj: &Trajectory,
        xs: &[Vec<f64>],
        grad_final: &[f64],
    ) -> Result<OdeGradients> {
        let vf = &self.field;
        let mut field_grads: [Tensor; 4] = vf.trainable().map(|p| Tensor::zeros(store.value(p).shape()));
        let mut gru_grads: [Tensor; 9] = self.gru.params().map(|p| Tensor::zeros(store.value(p).shape()));
        let mut x_grads = vec![Vec::new(); xs.len()];
        let mut a = grad_final.to_vec();
        let sizes: Vec<usize> = field_grads.iter().map(Tensor::len).collect();
        for i in (0..xs.len()).rev() {
            let (gx, gz, gw) = self.gru.local_vjp(store, &xs[i], &traj.pre[i], &a)?;
            x_grads[i] = gx;
            a = gz;
            for (acc, g) in gru_grads.iter_mut().zip(&gw) {
                acc.add_assign(g);
            }
            if i == 0 {
                break;
            }
            let seg = adjoint_segment(
                |t, z| vf.eval(store, z, t),
                |t, z, adj| {
                    let v = vf.vjp(store, z, t, adj);
                    (v.z, [v.w1, v.b1, v.w2, v.b2].concat())
                },
                &traj.pre[i],
                &a,
                sizes.iter().sum(),
                traj.times[i - 1],
                traj.times[i],
                &self.opts,
            )?;
            a = seg.a_start;
            let mut off = 0;
            for (acc, n) in field_grads.iter_mut().zip(&sizes) {
                for (g, v) in acc.data_mut().iter_mut().zip(&seg.param_grad[off..off + n]) {
                    *g += v;
                }
                off += n;
            }
        }
        Ok(OdeGradients {
            z_init: a,
            xs: x_grads,
            field: field_grads,
            gru: gru_grads,
        })
    }

    /// Copies the weights this encoder reads into a standalone store.
    fn snapshot(&self, store: &ParamStore) -> (ParamStore, OdeRnn) {
        let mut mini = ParamStore::new();
        let mut copy = |id: ParamId| {
            let v = store.value(id).clone();
            mini.add(store.name(id), v, store.is_trainable(id))
        };
        let f = &self.field;
        let field = VectorField {
            w1: copy(f.w1),
            b1: copy(f.b1),
            w2: copy(f.w2),
            b2: copy(f.b2),
            freqs: copy(f.freqs),
            ..f.clone()
        };
        let g = &self.gru;
        let gru = Gru {
            w_xr: copy(g.w_xr),
            w_hr: copy(g.w_hr),
            b_r: copy(g.b_r),
            w_xu: copy(g.w_xu),
            w_hu: copy(g.w_hu),
            b_u: copy(g.b_u),
            w_xz: copy(g.w_xz),
            w_hz: copy(g.w_hz),
            b_z: copy(g.b_z),
            ..g.clone()
        };
        (
            mini,
            OdeRnn {
                field,
                gru,
                opts: self.opts,
            },
        )
    }

    /// Encodes the rows of `x` (`[N, input_dim]`) observed at `times`, starting
    /// from the zero state, and records the final state `z(t_N⁺)` on the tape.
    pub fn encode_taped<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        store: &ParamStore,
        times: &[f64],
        x: Var<'t>,
        mode: GradMode,
    ) -> Result<(Var<'t>, Trajectory)> {
        let xv = x.value();
        let shape = xv.shape().to_vec();
        if shape.len() != 2 || shape[1] != self.gru.input_dim {
            return Err(Error::shape("ode_rnn", format!("observations must be [N, {}], got {shape:?}", self.gru.input_dim)));
        }
        let xs: Vec<Vec<f64>> = (0..shape[0]).map(|i| xv.row(i).to_vec()).collect();
        let z0 = vec![0.0; self.dim()];
        let traj = self.encode(store, times, &xs, &z0)?;
        let out = match mode {
            GradMode::Adjoint => {
                let (mini, enc) = self.snapshot(store);
                let mut inputs = vec![x];
                inputs.extend(self.field.trainable().map(|p| bound.get(p)));
                inputs.extend(self.gru.params().map(|p| bound.get(p)));
                let op = AdjointOp {
                    store: mini,
                    enc,
                    traj: traj.clone(),
                    xs,
                };
                tape.custom(&inputs, Tensor::vector(traj.final_state().to_vec()), Rc::new(op))
            }
            GradMode::Direct => self.replay(tape, bound, &traj, x, &z0)?,
        };
        Ok((out, traj))
    }

    /// Re-executes the recorded solver steps and GRU updates on the tape.
    fn replay<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, traj: &Trajectory, x: Var<'t>, z0: &[f64]) -> Result<Var<'t>> {
        let mut z = tape.constant(Tensor::vector(z0.to_vec()));
        for (i, steps) in traj.segments.iter().enumerate() {
            for step in steps {
                let mut k: Vec<Var<'t>> = Vec::with_capacity(6);
                k.push(self.field.taped(tape, bound, z, step.t)?);
                for s in 1..6 {
                    let ys = combine(z, step.h, A[s], &k)?;
                    k.push(self.field.taped(tape, bound, ys, step.t + C[s] * step.h)?);
                }
                z = combine(z, step.h, &B5, &k)?;
            }
            z = self.gru.taped(bound, x.row(i)?, z)?;
        }
        Ok(z)
    }
}

fn combine<'t>(z: Var<'t>, h: f64, coeffs: &[f64], k: &[Var<'t>]) -> Result<Var<'t>> {
    let mut out = z;
    for (c, ki) in coeffs.iter().zip(k) {
        if *c != 0.0 {
            out = out.add(ki.scale(h * c))?;
        }
    }
    Ok(out)
}

struct AdjointOp {
    store: ParamStore,
    enc: OdeRnn,
    traj: Trajectory,
    xs: Vec<Vec<f64>>,
}

impl CustomBackward for AdjointOp {
    fn backward(&self, grad_output: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = self.enc.adjoint_backward(&self.store, &self.traj, &self.xs, grad_output.data())?;
        let n = self.xs.len();
        let width = self.enc.gru.input_dim;
        let gx = Tensor::new(vec![n, width], g.xs.concat())?;
        let mut out = vec![Some(gx)];
        out.extend(g.field.into_iter().map(Some));
        out.extend(g.gru.into_iter().map(Some));
        Ok(out)
    }
}
