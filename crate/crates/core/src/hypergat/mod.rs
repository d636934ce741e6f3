//! Learned soft hyperedges over services and attention-based message passing
//! on the resulting hypergraph.

mod graph;

pub use graph::{
    estimate_onsets, generate_candidates, CandidateHyperedge, CandidateSource, ServiceGraph, COOCCUR_BUCKET,
    COOCCUR_THRESHOLD, ONSET_Z,
};

use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamId, ParamStore, SeededRng, Tape, Tensor, Var, LEAKY_SLOPE};

/// Guard added to hyperedge degrees before dividing.
pub const DEGREE_EPS: f64 = 1e-8;
pub const TAU_START: f64 = 1.0;
pub const TAU_END: f64 = 0.1;

/// Temperature schedule `1.0 · 0.1^(step / total)`.
pub fn anneal_tau(step: usize, total: usize) -> f64 {
    if total == 0 {
        return TAU_START;
    }
    let frac = step.min(total) as f64 / total as f64;
    TAU_START * (TAU_END / TAU_START).powf(frac)
}

/// Soft membership of one vertex in a hyperedge with logit `logit`:
/// `exp((ℓ+g₁)/τ) / (exp((ℓ+g₁)/τ) + exp((−ℓ+g₂)/τ)) = σ((2ℓ + g₁ − g₂)/τ)`.
pub fn soft_membership(logit: f64, g1: f64, g2: f64, tau: f64) -> f64 {
    crate::tensor::sigmoid((2.0 * logit + g1 - g2) / tau)
}

/// Mean binary entropy (nats) of a set of probabilities.
pub fn mean_binary_entropy(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let h = |p: f64| {
        let term = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.ln() };
        term(p) + term(1.0 - p)
    };
    values.iter().map(|&p| h(p)).sum::<f64>() / values.len() as f64
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub w_v: ParamId,
    pub w_e: ParamId,
    pub w_q: ParamId,
    /// Attention vector over `[W_q h_v ‖ m_e]`, length `2d`.
    pub a: ParamId,
}

/// Hyperedge scorer and stacked attention layers.
#[derive(Clone, Debug)]
pub struct HyperGat {
    pub phi_w: ParamId,
    pub phi_b: ParamId,
    pub w_score: ParamId,
    pub layers: Vec<LayerParams>,
    pub dim: usize,
}

/// Results of a forward pass.
pub struct HyperGatOutput<'t> {
    pub h: Var<'t>,
    /// `[V, K]` soft incidence.
    pub incidence: Var<'t>,
    /// `[K]` hyperedge logits.
    pub logits: Var<'t>,
    /// Per layer `[V, K]` hyperedge-to-vertex attention.
    pub attention: Vec<Var<'t>>,
}

/// `[V, K]` 0/1 membership matrix.
pub fn membership(cands: &[CandidateHyperedge], n_vertices: usize) -> Tensor {
    let k = cands.len();
    let mut m = Tensor::zeros(&[n_vertices, k]);
    for (e, c) in cands.iter().enumerate() {
        for &v in &c.members {
            m.data_mut()[v * k + e] = 1.0;
        }
    }
    m
}

impl HyperGat {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, n_layers: usize, rng: &mut SeededRng) -> Self {
        let phi_w = store.glorot(&format!("{prefix}.phi.W"), dim, dim, rng);
        let phi_b = store.zeros(&format!("{prefix}.phi.b"), &[dim]);
        let w_score = store.glorot_shaped(&format!("{prefix}.w_e"), &[dim], dim, 1, rng);
        let layers = (0..n_layers)
            .map(|l| LayerParams {
                w_v: store.glorot(&format!("{prefix}.layer{l}.W_v"), dim, dim, rng),
                w_e: store.glorot(&format!("{prefix}.layer{l}.W_e"), dim, dim, rng),
                w_q: store.glorot(&format!("{prefix}.layer{l}.W_q"), dim, dim, rng),
                a: store.glorot_shaped(&format!("{prefix}.layer{l}.a"), &[2 * dim], 2 * dim, 1, rng),
            })
            .collect();
        Self {
            phi_w,
            phi_b,
            w_score,
            layers,
            dim,
        }
    }

    /// `ℓ_k = w_eᵀ · SiLU(mean(h over S_k) W_φ + b_φ)`.
    pub fn logits<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, h: Var<'t>, cands: &[CandidateHyperedge]) -> Result<Var<'t>> {
        let n = h.shape()[0];
        let k = cands.len();
        let mut avg = Tensor::zeros(&[k, n]);
        for (e, c) in cands.iter().enumerate() {
            for &v in &c.members {
                avg.data_mut()[e * n + v] = 1.0 / c.members.len() as f64;
            }
        }
        let pooled = tape.constant(avg).matmul(h)?;
        pooled
            .matmul(bound.get(self.phi_w))?
            .add(bound.get(self.phi_b))?
            .silu()
            .matmul(bound.get(self.w_score))
    }

    /// Soft incidence `[V, K]`. Gumbel noise is drawn per candidate from
    /// `noise`; `None` gives the deterministic relaxation.
    pub fn soft_incidence<'t>(
        &self,
        tape: &'t Tape,
        logits: Var<'t>,
        cands: &[CandidateHyperedge],
        n_vertices: usize,
        tau: f64,
        noise: Option<&mut SeededRng>,
    ) -> Result<Var<'t>> {
        if !(tau > 0.0) {
            return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
        }
        let k = cands.len();
        let gap = match noise {
            Some(rng) => (0..k).map(|_| rng.gumbel() - rng.gumbel()).collect(),
            None => vec![0.0; k],
        };
        let z = logits
            .scale(2.0)
            .add(tape.constant(Tensor::vector(gap)))?
            .scale(1.0 / tau)
            .sigmoid();
        tape.constant(membership(cands, n_vertices)).mul(z)
    }

    /// One attention layer; returns the updated features and `α_{e→v}` as a
    /// `[V, K]` matrix.
    pub fn layer<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        l: usize,
        h: Var<'t>,
        incidence: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let p = &self.layers[l];
        let d = self.dim;
        let inc = incidence.value();
        let (n, k) = (inc.shape()[0], inc.shape()[1]);
        let degree = incidence.sum_axis(0)?.offset(DEGREE_EPS);
        let share = incidence.div(degree)?;
        let messages = share.transpose()?.matmul(h.matmul(bound.get(p.w_v))?)?;
        let a = bound.get(p.a);
        let a_q = a.slice(0, 0, d)?;
        let a_m = a.slice(0, d, 2 * d)?;
        let q_score = h.matmul(bound.get(p.w_q))?.matmul(a_q)?.reshape(&[n, 1])?;
        let m_score = messages.matmul(a_m)?;
        let scores = q_score
            .matmul(tape.constant(Tensor::full(&[1, k], 1.0)))?
            .add(m_score)?
            .leaky_relu(LEAKY_SLOPE);
        let mask: Vec<bool> = inc.data().iter().map(|&x| x > 0.0).collect();
        let alpha = scores.masked_softmax(&mask)?;
        let update = alpha.matmul(messages.matmul(bound.get(p.w_e))?)?.silu();
        Ok((h.add(update)?, alpha))
    }

    /// Scores candidates, relaxes them into a soft incidence and runs every
    /// layer with residual connections.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        h0: Var<'t>,
        cands: &[CandidateHyperedge],
        tau: f64,
        noise: Option<&mut SeededRng>,
    ) -> Result<HyperGatOutput<'t>> {
        let n = h0.shape()[0];
        if cands.is_empty() {
            return Ok(HyperGatOutput {
                h: h0,
                incidence: tape.constant(Tensor::zeros(&[n, 0])),
                logits: tape.constant(Tensor::zeros(&[0])),
                attention: Vec::new(),
            });
        }
        let logits = self.logits(tape, bound, h0, cands)?;
        let incidence = self.soft_incidence(tape, logits, cands, n, tau, noise)?;
        self.propagate(tape, bound, h0, incidence, logits)
    }

    /// Runs the layers on a given incidence.
    pub fn propagate<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        h0: Var<'t>,
        incidence: Var<'t>,
        logits: Var<'t>,
    ) -> Result<HyperGatOutput<'t>> {
        let mut h = h0;
        let mut attention = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let (next, alpha) = self.layer(tape, bound, l, h, incidence)?;
            h = next;
            attention.push(alpha);
        }
        Ok(HyperGatOutput {
            h,
            incidence,
            logits,
            attention,
        })
    }
}

/// Vertex-to-vertex attention mass through shared hyperedges:
/// `α_{u→v} = Σ_e H̃[u,e] · α_{e→v} / D̃_e[e,e]`, as a `[V, V]` matrix.
pub fn pairwise_attention<'t>(incidence: Var<'t>, alpha: Var<'t>) -> Result<Var<'t>> {
    let degree = incidence.sum_axis(0)?.offset(DEGREE_EPS);
    incidence.div(degree)?.matmul(alpha.transpose()?)
}

/// `Σ_e Σ_{u,v ∈ e} H̃[u,e] H̃[v,e] α_{u→v} max(0, t̄_u − t̄_v)`.
pub fn temporal_causal_loss<'t>(tape: &'t Tape, incidence: Var<'t>, pairwise: Var<'t>, onsets: &[f64]) -> Result<Var<'t>> {
    let n = onsets.len();
    let mut lag = Tensor::zeros(&[n, n]);
    for u in 0..n {
        for v in 0..n {
            lag.data_mut()[u * n + v] = (onsets[u] - onsets[v]).max(0.0);
        }
    }
    let co = incidence.matmul(incidence.transpose()?)?;
    Ok(co.mul(pairwise)?.mul(tape.constant(lag))?.sum())
}

/// Mean absolute soft incidence.
pub fn sparsity_loss<'t>(tape: &'t Tape, incidence: Var<'t>) -> Var<'t> {
    if incidence.value().is_empty() {
        return tape.scalar(0.0);
    }
    incidence.abs().mean()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_params, Dist};

    #[test]
    fn tau_schedule() {
        assert_eq!(anneal_tau(0, 100), 1.0);
        assert!((anneal_tau(100, 100) - 0.1).abs() < 1e-15);
        assert!((anneal_tau(50, 100) - 0.1f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn membership_values() {
        assert_eq!(soft_membership(0.0, 0.0, 0.0, 0.37), 0.5);
        let v = soft_membership(0.5, 0.0, 0.0, 0.1);
        assert!((v - 0.999_954_6).abs() < 1e-7);
        // literal ratio of exponentials
        let (l, g1, g2, tau) = (0.3, 0.8, -0.2, 0.7);
        let e1 = ((l + g1) / tau as f64).exp();
        let e2 = ((-l + g2) / tau as f64).exp();
        assert!((soft_membership(l, g1, g2, tau) - e1 / (e1 + e2)).abs() < 1e-15);
        assert!((soft_membership(60.0, 0.0, 0.0, 1.0) - 1.0).abs() < 1e-15);
    }

    fn net(seed: u64, d: usize) -> (ParamStore, HyperGat, SeededRng) {
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let net = HyperGat::new(&mut store, "hg", d, 3, &mut rng);
        (store, net, rng)
    }

    fn cand(m: &[usize]) -> CandidateHyperedge {
        CandidateHyperedge {
            members: m.to_vec(),
            source: CandidateSource::CallMotif,
        }
    }

    #[test]
    fn zero_incidence_is_pure_residual() {
        let (store, net, mut rng) = net(1, 4);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let h = tape.constant(rng.sample(Dist::Normal, &[3, 4]));
        let inc = tape.constant(Tensor::zeros(&[3, 2]));
        let out = net.propagate(&tape, &bound, h, inc, tape.scalar(0.0)).unwrap();
        assert_eq!(*out.h.value(), *h.value());
    }

    #[test]
    fn single_hyperedge_gets_full_attention() {
        let (store, net, mut rng) = net(2, 4);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let h = tape.constant(rng.sample(Dist::Normal, &[3, 4]));
        let out = net.forward(&tape, &bound, h, &[cand(&[0, 2])], 0.5, None).unwrap();
        let alpha = out.attention[0].value();
        assert_eq!(alpha.data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn attention_rows_normalize() {
        let (store, net, mut rng) = net(3, 5);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let h = tape.constant(rng.sample(Dist::Normal, &[4, 5]));
        let cands = [cand(&[0, 1]), cand(&[1, 2, 3]), cand(&[0, 1, 3])];
        let out = net.forward(&tape, &bound, h, &cands, 0.3, Some(&mut rng)).unwrap();
        for alpha in &out.attention {
            for v in 0..4 {
                let s: f64 = alpha.value().row(v).iter().sum();
                assert!((s - 1.0).abs() < 1e-10);
            }
        }
        let inc = out.incidence.value();
        assert_eq!(inc.at(2, 0), 0.0);
        assert!(inc.data().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn temporal_loss_hand_case() {
        let tape = Tape::new();
        let inc = tape.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let pair = tape.constant(Tensor::matrix(2, 2, vec![0.0, 0.5, 0.5, 0.0]).unwrap());
        let loss = temporal_causal_loss(&tape, inc, pair, &[5.0, 3.0]).unwrap();
        assert!((loss.item() - 1.0).abs() < 1e-15);
        let flat = temporal_causal_loss(&tape, inc, pair, &[4.0, 4.0]).unwrap();
        assert_eq!(flat.item(), 0.0);
    }

    #[test]
    fn sparsity_cases() {
        let tape = Tape::new();
        let m = |d: Vec<f64>| tape.constant(Tensor::matrix(2, 2, d).unwrap());
        assert_eq!(sparsity_loss(&tape, m(vec![0.0; 4])).item(), 0.0);
        assert_eq!(sparsity_loss(&tape, m(vec![1.0; 4])).item(), 1.0);
        assert_eq!(sparsity_loss(&tape, m(vec![1.0, 0.0, 0.5, 0.5])).item(), 0.5);
    }

    #[test]
    fn entropy_shrinks_as_tau_drops() {
        let logits = [0.3, -0.8, 1.5, 0.05];
        let mut last = f64::INFINITY;
        for step in 0..=10 {
            let tau = anneal_tau(step, 10);
            let vals: Vec<f64> = logits.iter().map(|&l| soft_membership(l, 0.0, 0.0, tau)).collect();
            let h = mean_binary_entropy(&vals);
            assert!(h <= last + 1e-15);
            last = h;
        }
    }

    /// Plain loops over the definitions, independent of the tape.
    fn dense_layer(store: &ParamStore, p: &LayerParams, h: &Tensor, inc: &Tensor) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let (n, k, d) = (inc.shape()[0], inc.shape()[1], h.shape()[1]);
        let lin = |x: &[f64], w: &Tensor| -> Vec<f64> { (0..d).map(|j| (0..d).map(|i| x[i] * w.at(i, j)).sum()).collect() };
        let (wv, we, wq, a) = (store.value(p.w_v), store.value(p.w_e), store.value(p.w_q), store.value(p.a));
        let hv: Vec<Vec<f64>> = (0..n).map(|v| lin(h.row(v), wv)).collect();
        let mut m = vec![vec![0.0; d]; k];
        for e in 0..k {
            let deg: f64 = (0..n).map(|v| inc.at(v, e)).sum::<f64>() + DEGREE_EPS;
            for v in 0..n {
                for j in 0..d {
                    m[e][j] += inc.at(v, e) * hv[v][j] / deg;
                }
            }
        }
        let mut alpha = vec![vec![0.0; k]; n];
        let mut out = vec![vec![0.0; d]; n];
        for v in 0..n {
            let q = lin(h.row(v), wq);
            let raw: Vec<f64> = (0..k)
                .map(|e| {
                    let s: f64 = (0..d).map(|j| a.data()[j] * q[j] + a.data()[d + j] * m[e][j]).sum();
                    if s > 0.0 { s } else { LEAKY_SLOPE * s }
                })
                .collect();
            let allowed: Vec<usize> = (0..k).filter(|&e| inc.at(v, e) > 0.0).collect();
            let mx = allowed.iter().map(|&e| raw[e]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = allowed.iter().map(|&e| (raw[e] - mx).exp()).sum();
            for &e in &allowed {
                alpha[v][e] = (raw[e] - mx).exp() / z;
            }
            let mut agg = vec![0.0; d];
            for e in 0..k {
                let me = lin(&m[e], we);
                for j in 0..d {
                    agg[j] += alpha[v][e] * me[j];
                }
            }
            for j in 0..d {
                out[v][j] = h.at(v, j) + agg[j] / (1.0 + (-agg[j]).exp());
            }
        }
        (out, alpha)
    }

    #[test]
    fn layer_matches_dense_loops() {
        let (store, net, mut rng) = net(4, 3);
        let h = rng.sample(Dist::Normal, &[4, 3]);
        let inc = Tensor::matrix(4, 3, vec![0.9, 0.0, 0.2, 0.4, 0.7, 0.0, 0.0, 0.3, 0.6, 0.0, 0.0, 0.0]).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let (out, alpha) = net.layer(&tape, &bound, 1, tape.constant(h.clone()), tape.constant(inc.clone())).unwrap();
        let (want, want_alpha) = dense_layer(&store, &net.layers[1], &h, &inc);
        for v in 0..4 {
            for j in 0..3 {
                assert!((out.value().at(v, j) - want[v][j]).abs() < 1e-12);
                assert!((alpha.value().at(v, j) - want_alpha[v][j]).abs() < 1e-12);
            }
        }
        // vertex 3 sits in no hyperedge and keeps its features
        assert_eq!(out.value().row(3), h.row(3));
    }

    #[test]
    fn pairwise_matches_sum_over_edges() {
        let inc = Tensor::matrix(3, 2, vec![0.5, 0.0, 1.0, 0.8, 0.0, 0.4]).unwrap();
        let alpha = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.3, 0.7, 0.0, 1.0]).unwrap();
        let tape = Tape::new();
        let pw = pairwise_attention(tape.constant(inc.clone()), tape.constant(alpha.clone())).unwrap();
        for u in 0..3 {
            for v in 0..3 {
                let want: f64 = (0..2)
                    .map(|e| {
                        let deg = (0..3).map(|w| inc.at(w, e)).sum::<f64>() + DEGREE_EPS;
                        inc.at(u, e) * alpha.at(v, e) / deg
                    })
                    .sum();
                assert!((pw.value().at(u, v) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn permuting_vertices_permutes_output() {
        let (store, net, mut rng) = net(5, 4);
        let h = rng.sample(Dist::Normal, &[4, 4]);
        let cands = [cand(&[0, 1]), cand(&[1, 2, 3])];
        let perm = [2, 0, 3, 1]; // new vertex i is old perm[i]
        let inv = |old: usize| perm.iter().position(|&p| p == old).unwrap();
        let pcands: Vec<CandidateHyperedge> = cands
            .iter()
            .map(|c| {
                let mut m: Vec<usize> = c.members.iter().map(|&v| inv(v)).collect();
                m.sort_unstable();
                cand(&m)
            })
            .collect();
        let ph = Tensor::from_rows(&perm.iter().map(|&p| h.row(p).to_vec()).collect::<Vec<_>>()).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let a = net.forward(&tape, &bound, tape.constant(h), &cands, 0.5, None).unwrap();
        let b = net.forward(&tape, &bound, tape.constant(ph), &pcands, 0.5, None).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..4 {
                assert!((b.h.value().at(i, j) - a.h.value().at(p, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut store, net, mut rng) = net(6, 3);
        let h = rng.sample(Dist::Normal, &[4, 3]);
        let cands = vec![cand(&[0, 1]), cand(&[1, 2, 3]), cand(&[0, 2])];
        let onsets = [0.1, 0.4, 0.2, 0.9];
        let loss = |store: &ParamStore, want: bool| -> Result<(f64, Option<Vec<Tensor>>)> {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let out = net.forward(&tape, &bound, tape.constant(h.clone()), &cands, 0.6, None)?;
            let pw = pairwise_attention(out.incidence, *out.attention.last().unwrap())?;
            let l = out
                .h
                .square()
                .sum()
                .add(temporal_causal_loss(&tape, out.incidence, pw, &onsets)?)?
                .add(sparsity_loss(&tape, out.incidence))?;
            let grads = if want { Some(bound.gradients(&tape.backward(l)?)) } else { None };
            Ok((l.item(), grads))
        };
        let mut coords = Vec::new();
        for p in [net.phi_w, net.phi_b, net.w_score, net.layers[0].w_v, net.layers[1].a, net.layers[2].w_e, net.layers[2].w_q] {
            let n = store.value(p).len();
            coords.extend((0..n).step_by(2).map(|i| (p, i)));
        }
        for c in grad_check_params(&mut store, &coords, 1e-6, loss).unwrap() {
            assert!(c.rel_error < 1e-5 || (c.analytic - c.numeric).abs() < 1e-8, "{c:?}");
        }
    }
}
