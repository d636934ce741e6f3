//! Cross-modal transformer: per-modality self-attention, asymmetric
//! cross-attention mixed by context-dependent routing, then attention pooling
//! into one incident vector.

use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamId, ParamStore, SeededRng, Tape, Tensor, Var, LAYER_NORM_EPS};

pub const MODALITIES: [&str; 5] = ["log", "trace", "metric", "entity", "event"];
pub const N_MODALITIES: usize = 5;
/// Width of the incident context statistics fed to routing.
pub const CONTEXT_FEATURES: usize = 4;

/// `Concat(head_1..head_h) W^O` with
/// `head_i = softmax(Q W^Q_i (K W^K_i)ᵀ / √d_k) V W^V_i`. The per-head
/// projections are column blocks of `[d, d]` matrices.
#[derive(Clone, Debug)]
pub struct MultiHead {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHead {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut SeededRng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "model width must split evenly across heads");
        Self {
            w_q: store.glorot(&format!("{prefix}.W_Q"), dim, dim, rng),
            w_k: store.glorot(&format!("{prefix}.W_K"), dim, dim, rng),
            w_v: store.glorot(&format!("{prefix}.W_V"), dim, dim, rng),
            w_o: store.glorot(&format!("{prefix}.W_O"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Output `[n_q, d]` and per-head attention `[n_q, n_k]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
    ) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let dk = self.head_dim();
        let qp = q.matmul(bound.get(self.w_q))?;
        let kp = k.matmul(bound.get(self.w_k))?;
        let vp = v.matmul(bound.get(self.w_v))?;
        let mut heads = Vec::with_capacity(self.heads);
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (s, e) = (h * dk, (h + 1) * dk);
            let scores = qp.slice(1, s, e)?.matmul(kp.slice(1, s, e)?.transpose()?)?;
            let a = scores.scale(1.0 / (dk as f64).sqrt()).softmax()?;
            heads.push(a.matmul(vp.slice(1, s, e)?)?);
            attn.push(a);
        }
        let cat = tape.concat(&heads, 1)?;
        Ok((cat.matmul(bound.get(self.w_o))?, attn))
    }
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub self_attn: Vec<MultiHead>,
    pub cross: MultiHead,
    /// `[3d]` routing score vector over `[z̄_m ‖ z̄_m' ‖ a]`.
    pub w_route: ParamId,
    /// `[CONTEXT_FEATURES, d]` projection of the incident statistics.
    pub w_ctx: ParamId,
    pub w_pool: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub dim: usize,
    pub out_dim: usize,
    /// Extra scalars appended after the pooled modality vectors.
    pub extra: usize,
}

/// Everything computed by [`FusionParams::forward`].
pub struct FusionOutput<'t> {
    pub z_final: Var<'t>,
    /// `[5, 5]` routing weights; the diagonal is zero.
    pub routing: Var<'t>,
    /// Per-modality pooling weights `[n_m]`.
    pub pooling: Vec<Var<'t>>,
    pub pooled: Vec<Var<'t>>,
}

/// `LayerNorm(Z + MultiHead(Z, Z, Z))`.
pub fn self_attn_block<'t>(tape: &'t Tape, bound: &Bound<'t>, mh: &MultiHead, z: Var<'t>) -> Result<Var<'t>> {
    let (att, _) = mh.forward(tape, bound, z, z, z)?;
    z.add(att)?.layer_norm(LAYER_NORM_EPS)
}

/// `C^(m←m') = MultiHead(Ẑ_m, Ẑ_m', Ẑ_m')`.
pub fn cross_attention<'t>(tape: &'t Tape, bound: &Bound<'t>, mh: &MultiHead, target: Var<'t>, source: Var<'t>) -> Result<Var<'t>> {
    Ok(mh.forward(tape, bound, target, source, source)?.0)
}

/// `β_{m,·} = softmax over m' ≠ m of wᵀ[z̄_m ‖ z̄_m' ‖ a]`, as a `[M, M]`
/// matrix with zero diagonal. `means` is `[M, d]`, `ctx` is `[d]`.
pub fn routing_weights<'t>(tape: &'t Tape, means: Var<'t>, ctx: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let shape = means.shape();
    let (m, d) = (shape[0], shape[1]);
    if w.shape() != [3 * d] {
        return Err(Error::Invalid(format!("routing vector has shape {:?}, expected [{}]", w.shape(), 3 * d)));
    }
    let own = means.matmul(w.slice(0, 0, d)?)?.reshape(&[m, 1])?;
    let other = means.matmul(w.slice(0, d, 2 * d)?)?;
    let context = ctx.matmul(w.slice(0, 2 * d, 3 * d)?)?;
    let scores = own
        .add(context)?
        .matmul(tape.constant(Tensor::full(&[1, m], 1.0)))?
        .add(other)?;
    let mask: Vec<bool> = (0..m * m).map(|i| i / m != i % m).collect();
    scores.masked_softmax(&mask)
}

/// `Ẑ_m + Σ_{m'≠m} β_{m,m'} C^(m←m')`; `cross[m][m']` is ignored when `m == m'`.
pub fn fuse<'t>(hat: &[Var<'t>], cross: &[Vec<Option<Var<'t>>>], beta: Var<'t>) -> Result<Vec<Var<'t>>> {
    let m = hat.len();
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let mut acc = hat[i];
        for j in 0..m {
            if i == j {
                continue;
            }
            let c = cross[i][j].ok_or_else(|| Error::Invalid(format!("missing cross-attention {i}<-{j}")))?;
            let b = beta.slice(0, i, i + 1)?.slice(1, j, j + 1)?.reshape(&[])?;
            acc = acc.add(c.mul(b)?)?;
        }
        out.push(acc);
    }
    Ok(out)
}

/// `softmax(Z w_p)ᵀ Z`; returns the pooled `[d]` vector and the weights.
pub fn attention_pool<'t>(z: Var<'t>, w_p: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let weights = z.matmul(w_p)?.softmax()?;
    Ok((weights.matmul(z)?, weights))
}

impl FusionParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, out_dim: usize, extra: usize, rng: &mut SeededRng) -> Self {
        let self_attn = MODALITIES
            .iter()
            .map(|m| MultiHead::new(store, &format!("{prefix}.self.{m}"), dim, heads, rng))
            .collect();
        let cross = MultiHead::new(store, &format!("{prefix}.cross"), dim, heads, rng);
        let in_dim = N_MODALITIES * dim + extra;
        Self {
            self_attn,
            cross,
            w_route: store.glorot_shaped(&format!("{prefix}.route.w"), &[3 * dim], 3 * dim, 1, rng),
            w_ctx: store.glorot(&format!("{prefix}.route.W_ctx"), CONTEXT_FEATURES, dim, rng),
            w_pool: store.glorot_shaped(&format!("{prefix}.pool.w"), &[dim], dim, 1, rng),
            mlp_w1: store.glorot(&format!("{prefix}.mlp.W1"), in_dim, out_dim, rng),
            mlp_b1: store.zeros(&format!("{prefix}.mlp.b1"), &[out_dim]),
            mlp_w2: store.glorot(&format!("{prefix}.mlp.W2"), out_dim, out_dim, rng),
            mlp_b2: store.zeros(&format!("{prefix}.mlp.b2"), &[out_dim]),
            dim,
            out_dim,
            extra,
        }
    }

    /// Pools every modality and maps `[z_log ‖ … ‖ z_event ‖ extra]` through a
    /// two-layer SiLU MLP.
    pub fn aggregate<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        fused: &[Var<'t>],
        extra: Var<'t>,
    ) -> Result<(Var<'t>, Vec<Var<'t>>, Vec<Var<'t>>)> {
        let mut pooled = Vec::with_capacity(fused.len());
        let mut weights = Vec::with_capacity(fused.len());
        for z in fused {
            let (p, w) = attention_pool(*z, bound.get(self.w_pool))?;
            pooled.push(p);
            weights.push(w);
        }
        let mut parts = pooled.clone();
        parts.push(extra);
        let x = tape.concat(&parts, 0)?;
        let z = x
            .matmul(bound.get(self.mlp_w1))?
            .add(bound.get(self.mlp_b1))?
            .silu()
            .matmul(bound.get(self.mlp_w2))?
            .add(bound.get(self.mlp_b2))?;
        Ok((z, pooled, weights))
    }

    /// `tokens[m]` is `[n_m, d]` with `n_m >= 1`; `context` holds the raw
    /// incident statistics; `extra` the scalars appended before the MLP.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        tokens: &[Var<'t>],
        context: &[f64],
        extra: Var<'t>,
    ) -> Result<FusionOutput<'t>> {
        if tokens.len() != N_MODALITIES {
            return Err(Error::Invalid(format!("expected {N_MODALITIES} modalities, got {}", tokens.len())));
        }
        if context.len() != CONTEXT_FEATURES {
            return Err(Error::Invalid(format!("expected {CONTEXT_FEATURES} context features, got {}", context.len())));
        }
        let hat: Vec<Var> = tokens
            .iter()
            .zip(&self.self_attn)
            .map(|(z, mh)| self_attn_block(tape, bound, mh, *z))
            .collect::<Result<_>>()?;
        let mut cross = vec![vec![None; N_MODALITIES]; N_MODALITIES];
        for i in 0..N_MODALITIES {
            for j in 0..N_MODALITIES {
                if i != j {
                    cross[i][j] = Some(cross_attention(tape, bound, &self.cross, hat[i], hat[j])?);
                }
            }
        }
        let means: Vec<Var> = hat.iter().map(|z| z.sum_axis(0).map(|s| s.scale(1.0 / z.shape()[0] as f64))).collect::<Result<_>>()?;
        let means = tape.stack(&means)?;
        let ctx = tape.constant(Tensor::vector(context.to_vec())).matmul(bound.get(self.w_ctx))?;
        let routing = routing_weights(tape, means, ctx, bound.get(self.w_route))?;
        let fused = fuse(&hat, &cross, routing)?;
        let (z_final, pooled, pooling) = self.aggregate(tape, bound, &fused, extra)?;
        Ok(FusionOutput {
            z_final,
            routing,
            pooling,
            pooled,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_params, Dist};

    fn dense_mh(store: &ParamStore, mh: &MultiHead, q: &Tensor, kv: &Tensor) -> Vec<Vec<f64>> {
        let d = mh.dim;
        let dk = mh.head_dim();
        let proj = |x: &[f64], w: &Tensor, cols: std::ops::Range<usize>| -> Vec<f64> {
            cols.map(|j| (0..d).map(|i| x[i] * w.at(i, j)).sum()).collect()
        };
        let (wq, wk, wv, wo) = (store.value(mh.w_q), store.value(mh.w_k), store.value(mh.w_v), store.value(mh.w_o));
        let mut out = Vec::new();
        for a in 0..q.rows() {
            let mut cat = Vec::with_capacity(d);
            for h in 0..mh.heads {
                let cols = h * dk..(h + 1) * dk;
                let qa = proj(q.row(a), wq, cols.clone());
                let scores: Vec<f64> = (0..kv.rows())
                    .map(|b| {
                        let kb = proj(kv.row(b), wk, cols.clone());
                        qa.iter().zip(&kb).map(|(x, y)| x * y).sum::<f64>() / (dk as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                let mut head = vec![0.0; dk];
                for b in 0..kv.rows() {
                    let vb = proj(kv.row(b), wv, cols.clone());
                    let w = (scores[b] - mx).exp() / z;
                    for k in 0..dk {
                        head[k] += w * vb[k];
                    }
                }
                cat.extend(head);
            }
            out.push(proj(&cat, wo, 0..d));
        }
        out
    }

    fn layer_norm_rows(rows: &mut [Vec<f64>]) {
        for r in rows {
            let mu = r.iter().sum::<f64>() / r.len() as f64;
            let var = r.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / r.len() as f64;
            r.iter_mut().for_each(|x| *x = (*x - mu) / (var + LAYER_NORM_EPS).sqrt());
        }
    }

    #[test]
    fn self_attention_matches_literal() {
        for seed in 0..5 {
            let mut rng = SeededRng::new(seed);
            let mut store = ParamStore::new();
            let mh = MultiHead::new(&mut store, "mh", 8, 4, &mut rng);
            let z = rng.sample(Dist::Normal, &[2, 8]);
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let got = self_attn_block(&tape, &bound, &mh, tape.constant(z.clone())).unwrap();
            let mut want = dense_mh(&store, &mh, &z, &z);
            for (r, row) in want.iter_mut().enumerate() {
                row.iter_mut().zip(z.row(r)).for_each(|(a, b)| *a += b);
            }
            layer_norm_rows(&mut want);
            for r in 0..2 {
                for c in 0..8 {
                    assert!((got.value().at(r, c) - want[r][c]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn cross_attention_matches_literal_and_is_asymmetric() {
        let mut rng = SeededRng::new(7);
        let mut store = ParamStore::new();
        let mh = MultiHead::new(&mut store, "mh", 8, 4, &mut rng);
        let a = rng.sample(Dist::Normal, &[3, 8]);
        let b = rng.sample(Dist::Normal, &[3, 8]);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let ab = cross_attention(&tape, &bound, &mh, tape.constant(a.clone()), tape.constant(b.clone())).unwrap();
        let ba = cross_attention(&tape, &bound, &mh, tape.constant(b.clone()), tape.constant(a.clone())).unwrap();
        let want = dense_mh(&store, &mh, &a, &b);
        for r in 0..3 {
            for c in 0..8 {
                assert!((ab.value().at(r, c) - want[r][c]).abs() < 1e-10);
            }
        }
        let diff = ab.value().max_abs_diff(&ba.value());
        let scale = ab.value().data().iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(diff / scale > 1e-3);
    }

    #[test]
    fn single_source_token_takes_all_attention() {
        let mut rng = SeededRng::new(8);
        let mut store = ParamStore::new();
        let mh = MultiHead::new(&mut store, "mh", 8, 2, &mut rng);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let q = tape.constant(rng.sample(Dist::Normal, &[4, 8]));
        let kv = tape.constant(rng.sample(Dist::Normal, &[1, 8]));
        let (out, attn) = mh.forward(&tape, &bound, q, kv, kv).unwrap();
        assert_eq!(out.shape(), vec![4, 8]);
        for a in attn {
            assert!(a.value().data().iter().all(|&w| w == 1.0));
        }
    }

    #[test]
    fn routing_cases() {
        let tape = Tape::new();
        let means = tape.constant(Tensor::zeros(&[5, 2]));
        let ctx = tape.constant(Tensor::vector(vec![0.3, -0.2]));
        let beta = routing_weights(&tape, means, ctx, tape.constant(Tensor::zeros(&[6]))).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 0.0 } else { 0.25 };
                assert_eq!(beta.value().at(i, j), want);
            }
        }
        // w picks the second coordinate of z̄_m', which is 1 for modality 1 only
        let mut m = Tensor::zeros(&[5, 2]);
        m.data_mut()[3] = 1.0;
        let w = Tensor::vector(vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let beta = routing_weights(&tape, tape.constant(m), ctx, tape.constant(w)).unwrap();
        let row = beta.value().row(0).to_vec();
        assert!((row[1] - 0.4754).abs() < 1e-4 && (row[2] - 0.1749).abs() < 1e-4);
        assert!((row[1] - 1f64.exp() / (1f64.exp() + 3.0)).abs() < 1e-15);
        for i in 0..5 {
            assert!((beta.value().row(i).iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn fuse_is_residual_and_linear() {
        let mut rng = SeededRng::new(10);
        let tape = Tape::new();
        let hat: Vec<Var> = (0..3).map(|_| tape.constant(rng.sample(Dist::Normal, &[2, 4]))).collect();
        let cs: Vec<Vec<Tensor>> = (0..3).map(|_| (0..3).map(|_| rng.sample(Dist::Normal, &[2, 4])).collect()).collect();
        let wrap = |k: f64| -> Vec<Vec<Option<Var>>> {
            cs.iter().map(|r| r.iter().map(|c| Some(tape.constant(c.map(|x| k * x)))).collect()).collect()
        };
        let zero = tape.constant(Tensor::zeros(&[3, 3]));
        let f = fuse(&hat, &wrap(1.0), zero).unwrap();
        for i in 0..3 {
            assert_eq!(*f[i].value(), *hat[i].value());
        }
        let mut b = Tensor::zeros(&[3, 3]);
        b.data_mut()[1] = 1.0;
        let f = fuse(&hat, &wrap(1.0), tape.constant(b.clone())).unwrap();
        let want = hat[0].value().data().iter().zip(cs[0][1].data()).map(|(a, c)| a + c).collect::<Vec<_>>();
        assert_eq!(f[0].value().data(), want.as_slice());
        let beta = tape.constant(Tensor::matrix(3, 3, vec![0.0, 0.3, 0.7, 0.5, 0.0, 0.5, 0.9, 0.1, 0.0]).unwrap());
        let one = fuse(&hat, &wrap(1.0), beta).unwrap();
        let two = fuse(&hat, &wrap(2.0), beta).unwrap();
        for i in 0..3 {
            for (k, h) in hat[i].value().data().iter().enumerate() {
                let d1 = one[i].value().data()[k] - h;
                let d2 = two[i].value().data()[k] - h;
                assert!((d2 - 2.0 * d1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_single_token_and_permutation() {
        let mut rng = SeededRng::new(11);
        let tape = Tape::new();
        let w = tape.constant(rng.sample(Dist::Normal, &[4]));
        let one = tape.constant(rng.sample(Dist::Normal, &[1, 4]));
        let (p, wts) = attention_pool(one, w).unwrap();
        assert_eq!(wts.value().data(), &[1.0]);
        assert_eq!(p.value().data(), one.value().data());
        let z = rng.sample(Dist::Normal, &[5, 4]);
        let zr = Tensor::from_rows(&[4, 2, 0, 3, 1].iter().map(|&r| z.row(r).to_vec()).collect::<Vec<_>>()).unwrap();
        let (a, wa) = attention_pool(tape.constant(z), w).unwrap();
        let (b, _) = attention_pool(tape.constant(zr), w).unwrap();
        assert!(a.value().max_abs_diff(&b.value()) < 1e-12);
        assert!((wa.value().data().iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    fn fusion_setup(seed: u64) -> (ParamStore, FusionParams, Vec<Tensor>, Vec<f64>) {
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let f = FusionParams::new(&mut store, "fu", 4, 2, 3, 2, &mut rng);
        let toks = [3, 1, 2, 2, 1].iter().map(|&n| rng.sample(Dist::Normal, &[n, 4])).collect();
        (store, f, toks, vec![0.4, -1.0, 2.0, 0.1])
    }

    #[test]
    fn forward_shapes_and_mlp_width() {
        let (store, f, toks, ctx) = fusion_setup(12);
        assert_eq!(store.value(f.mlp_w1).shape(), &[5 * 4 + 2, 3]);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let vars: Vec<Var> = toks.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f.forward(&tape, &bound, &vars, &ctx, tape.constant(Tensor::vector(vec![0.5, -0.1]))).unwrap();
        assert_eq!(out.z_final.shape(), vec![3]);
        for i in 0..5 {
            assert_eq!(out.routing.value().at(i, i), 0.0);
            assert!((out.pooling[i].value().data().iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn fusion_gradients_match_finite_differences() {
        let (mut store, f, toks, ctx) = fusion_setup(13);
        let loss = |store: &ParamStore, want: bool| -> Result<(f64, Option<Vec<Tensor>>)> {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let vars: Vec<Var> = toks.iter().map(|t| tape.constant(t.clone())).collect();
            let out = f.forward(&tape, &bound, &vars, &ctx, tape.constant(Tensor::vector(vec![0.5, -0.1])))?;
            let l = out.z_final.square().sum();
            let g = if want { Some(bound.gradients(&tape.backward(l)?)) } else { None };
            Ok((l.item(), g))
        };
        let ids: Vec<_> = store.ids().collect();
        let mut coords = Vec::new();
        for p in ids {
            let n = store.value(p).len();
            coords.extend((0..n).step_by(5).map(|i| (p, i)));
        }
        let mut worst: f64 = 0.0;
        for c in grad_check_params(&mut store, &coords, 1e-6, loss).unwrap() {
            if (c.analytic - c.numeric).abs() > 1e-9 {
                worst = worst.max(c.rel_error);
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }
}
