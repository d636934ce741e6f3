use crate::error::Result;
use crate::tensor::{mm, sigmoid, Bound, ParamId, ParamStore, SeededRng, Tape, Tensor, Var};

/// Gated recurrent update applied at each observation.
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_xr: ParamId,
    pub w_hr: ParamId,
    pub b_r: ParamId,
    pub w_xu: ParamId,
    pub w_hu: ParamId,
    pub b_u: ParamId,
    pub w_xz: ParamId,
    pub w_hz: ParamId,
    pub b_z: ParamId,
    pub input_dim: usize,
    pub dim: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, prefix: &str, input_dim: usize, dim: usize, rng: &mut SeededRng) -> Self {
        let mut gate = |g: &str| {
            (
                store.glorot(&format!("{prefix}.W_x{g}"), input_dim, dim, rng),
                store.glorot(&format!("{prefix}.W_h{g}"), dim, dim, rng),
                store.zeros(&format!("{prefix}.b_{g}"), &[dim]),
            )
        };
        let (w_xr, w_hr, b_r) = gate("r");
        let (w_xu, w_hu, b_u) = gate("u");
        let (w_xz, w_hz, b_z) = gate("z");
        Self {
            w_xr,
            w_hr,
            b_r,
            w_xu,
            w_hu,
            b_u,
            w_xz,
            w_hz,
            b_z,
            input_dim,
            dim,
        }
    }

    pub fn params(&self) -> [ParamId; 9] {
        [
            self.w_xr, self.w_hr, self.b_r, self.w_xu, self.w_hu, self.b_u, self.w_xz, self.w_hz, self.b_z,
        ]
    }

    fn affine(&self, store: &ParamStore, x: &[f64], h: &[f64], wx: ParamId, wh: ParamId, b: ParamId) -> Vec<f64> {
        let a = mm(x, store.value(wx).data(), 1, self.input_dim, self.dim);
        let c = mm(h, store.value(wh).data(), 1, self.dim, self.dim);
        let bias = store.value(b).data();
        (0..self.dim).map(|i| a[i] + c[i] + bias[i]).collect()
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64], z: &[f64]) -> Vec<f64> {
        let r: Vec<f64> = self.affine(store, x, z, self.w_xr, self.w_hr, self.b_r).into_iter().map(sigmoid).collect();
        let u: Vec<f64> = self.affine(store, x, z, self.w_xu, self.w_hu, self.b_u).into_iter().map(sigmoid).collect();
        let rz: Vec<f64> = r.iter().zip(z).map(|(a, b)| a * b).collect();
        let cand: Vec<f64> = self.affine(store, x, &rz, self.w_xz, self.w_hz, self.b_z).into_iter().map(f64::tanh).collect();
        (0..self.dim).map(|i| (1.0 - u[i]) * z[i] + u[i] * cand[i]).collect()
    }

    /// Taped update with weights taken from `vars` (ordered as [`Gru::params`]).
    pub fn taped_with<'t>(&self, vars: &[Var<'t>; 9], x: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
        let [w_xr, w_hr, b_r, w_xu, w_hu, b_u, w_xz, w_hz, b_z] = *vars;
        let r = x.matmul(w_xr)?.add(z.matmul(w_hr)?)?.add(b_r)?.sigmoid();
        let u = x.matmul(w_xu)?.add(z.matmul(w_hu)?)?.add(b_u)?.sigmoid();
        let cand = x.matmul(w_xz)?.add(r.mul(z)?.matmul(w_hz)?)?.add(b_z)?.tanh();
        let keep = u.neg().offset(1.0).mul(z)?;
        keep.add(u.mul(cand)?)
    }

    pub fn taped<'t>(&self, bound: &Bound<'t>, x: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
        let vars = self.params().map(|p| bound.get(p));
        self.taped_with(&vars, x, z)
    }

    /// Gradients of `aᵀ GRU(x, z)` with respect to `x`, `z` and the nine
    /// weights, computed on a private tape.
    pub fn local_vjp(&self, store: &ParamStore, x: &[f64], z: &[f64], a: &[f64]) -> Result<(Vec<f64>, Vec<f64>, [Tensor; 9])> {
        let tape = Tape::new();
        let vars = self.params().map(|p| tape.leaf(store.value(p).clone()));
        let xv = tape.leaf(Tensor::vector(x.to_vec()));
        let zv = tape.leaf(Tensor::vector(z.to_vec()));
        let out = self.taped_with(&vars, xv, zv)?;
        let loss = out.mul(tape.constant(Tensor::vector(a.to_vec())))?.sum();
        let g = tape.backward(loss)?;
        Ok((g.get(xv).into_data(), g.get(zv).into_data(), vars.map(|v| g.get(v))))
    }
}
