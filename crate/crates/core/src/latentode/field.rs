use std::f64::consts::PI;

use crate::error::Result;
use crate::tensor::{mm, mm_at, mm_bt, silu, silu_grad, Bound, Dist, ParamId, ParamStore, SeededRng, Tape, Tensor, Var};

/// `[cos(2π B t), sin(2π B t)]`.
pub fn time_encoding(t: f64, freqs: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * freqs.len());
    out.extend(freqs.iter().map(|b| (2.0 * PI * b * t).cos()));
    out.extend(freqs.iter().map(|b| (2.0 * PI * b * t).sin()));
    out
}

/// Samples a frequency vector from N(0, 1) and registers it as frozen.
pub fn frozen_frequencies(store: &mut ParamStore, name: &str, n: usize, rng: &mut SeededRng) -> ParamId {
    let b = rng.sample(Dist::Normal, &[n]);
    store.frozen(name, b)
}

/// Latent vector field `SiLU([z ‖ γ(t)] W₁ + b₁) W₂ + b₂`. Weight matrices are
/// stored input-major (`[in, out]`).
#[derive(Clone, Debug)]
pub struct VectorField {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub freqs: ParamId,
    pub dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
}

/// Gradient of `aᵀ f` with respect to `z` and the trainable weights.
#[derive(Clone, Debug)]
pub struct FieldVjp {
    pub z: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl VectorField {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, time_dim: usize, rng: &mut SeededRng) -> Self {
        assert!(time_dim % 2 == 0, "time encoding width must be even");
        let w1 = store.glorot(&format!("{prefix}.W1"), dim + time_dim, hidden, rng);
        let b1 = store.zeros(&format!("{prefix}.b1"), &[hidden]);
        let w2 = store.glorot(&format!("{prefix}.W2"), hidden, dim, rng);
        let b2 = store.zeros(&format!("{prefix}.b2"), &[dim]);
        let freqs = frozen_frequencies(store, &format!("{prefix}.B"), time_dim / 2, rng);
        Self {
            w1,
            b1,
            w2,
            b2,
            freqs,
            dim,
            hidden,
            time_dim,
        }
    }

    /// Trainable parameters in the order used by [`FieldVjp`].
    pub fn trainable(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn n_trainable(&self) -> usize {
        let i = self.dim + self.time_dim;
        i * self.hidden + self.hidden + self.hidden * self.dim + self.dim
    }

    fn input(&self, store: &ParamStore, z: &[f64], t: f64) -> Vec<f64> {
        let mut inp = z.to_vec();
        inp.extend(time_encoding(t, store.value(self.freqs).data()));
        inp
    }

    fn pre_activation(&self, store: &ParamStore, inp: &[f64]) -> Vec<f64> {
        let mut pre = mm(inp, store.value(self.w1).data(), 1, self.dim + self.time_dim, self.hidden);
        for (p, b) in pre.iter_mut().zip(store.value(self.b1).data()) {
            *p += b;
        }
        pre
    }

    pub fn eval(&self, store: &ParamStore, z: &[f64], t: f64) -> Vec<f64> {
        let inp = self.input(store, z, t);
        let act: Vec<f64> = self.pre_activation(store, &inp).into_iter().map(silu).collect();
        let mut out = mm(&act, store.value(self.w2).data(), 1, self.hidden, self.dim);
        for (o, b) in out.iter_mut().zip(store.value(self.b2).data()) {
            *o += b;
        }
        out
    }

    /// Vector-Jacobian product of the field at `(z, t)` with cotangent `a`.
    pub fn vjp(&self, store: &ParamStore, z: &[f64], t: f64, a: &[f64]) -> FieldVjp {
        let inp = self.input(store, z, t);
        let pre = self.pre_activation(store, &inp);
        let act: Vec<f64> = pre.iter().map(|&p| silu(p)).collect();
        let g_act = mm_bt(a, store.value(self.w2).data(), 1, self.dim, self.hidden);
        let g_pre: Vec<f64> = g_act.iter().zip(&pre).map(|(g, &p)| g * silu_grad(p)).collect();
        let g_inp = mm_bt(&g_pre, store.value(self.w1).data(), 1, self.hidden, self.dim + self.time_dim);
        FieldVjp {
            z: g_inp[..self.dim].to_vec(),
            w1: mm_at(&inp, &g_pre, 1, self.dim + self.time_dim, self.hidden),
            b1: g_pre,
            w2: mm_at(&act, a, 1, self.hidden, self.dim),
            b2: a.to_vec(),
        }
    }

    /// The field recorded on `tape`; `z` has shape `[dim]`.
    pub fn taped<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, z: Var<'t>, t: f64) -> Result<Var<'t>> {
        let gamma = tape.constant(Tensor::vector(time_encoding(t, bound.get(self.freqs).value().data())));
        let inp = tape.concat(&[z, gamma], 0)?;
        let pre = inp.matmul(bound.get(self.w1))?.add(bound.get(self.b1))?;
        pre.silu().matmul(bound.get(self.w2))?.add(bound.get(self.b2))
    }

    /// Directional derivative `J_f · f` with `J_f = ∂f/∂z`, recorded on the
    /// tape so that it can itself be differentiated.
    pub fn taped_jvp_self<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, z: Var<'t>, t: f64) -> Result<(Var<'t>, Var<'t>)> {
        let gamma = tape.constant(Tensor::vector(time_encoding(t, bound.get(self.freqs).value().data())));
        let inp = tape.concat(&[z, gamma], 0)?;
        let pre = inp.matmul(bound.get(self.w1))?.add(bound.get(self.b1))?;
        let f = pre.silu().matmul(bound.get(self.w2))?.add(bound.get(self.b2))?;
        let w1_z = bound.get(self.w1).slice(0, 0, self.dim)?;
        // SiLU'(x) = σ(x)(1 + x(1 - σ(x)))
        let s = pre.sigmoid();
        let one_minus_s = s.neg().offset(1.0);
        let dsilu = s.mul(pre.mul(one_minus_s)?.offset(1.0))?;
        let jf = f.matmul(w1_z)?.mul(dsilu)?.matmul(bound.get(self.w2))?;
        Ok((f, jf))
    }
}
