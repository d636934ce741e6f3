//! Graph attention over the span forest of one incident.

use std::collections::HashMap;

use crate::datapipe::{Span, SpanStatus};
use crate::error::Result;
use crate::tensor::{Bound, ParamId, ParamStore, SeededRng, Tape, Tensor, Var, LEAKY_SLOPE};

/// Duration z-score (per service, on log durations), then an ok/error one-hot.
pub const SPAN_SCALAR_FEATURES: usize = 3;

#[derive(Clone, Debug)]
pub struct GatLayer {
    pub w: ParamId,
    /// `[2 * out]` over `[W h_i ‖ W h_j]`.
    pub a: ParamId,
}

/// `h_i' = σ(Σ_{j ∈ N(i)} α_ij W h_j)` with `N(i)` = self, parent, children
/// and `α_i· = softmax_j LeakyReLU(aᵀ[W h_i ‖ W h_j])`.
#[derive(Clone, Debug)]
pub struct TraceGat {
    pub layers: Vec<GatLayer>,
    pub dim: usize,
}

/// Per-span `[N, N]` neighbourhood mask, row-major.
pub fn span_neighbourhood(spans: &[Span]) -> Vec<bool> {
    let n = spans.len();
    let index: HashMap<usize, usize> = spans.iter().enumerate().map(|(i, s)| (s.span_id, i)).collect();
    let mut mask = vec![false; n * n];
    for (i, s) in spans.iter().enumerate() {
        mask[i * n + i] = true;
        if let Some(&p) = s.parent.and_then(|p| index.get(&p)) {
            mask[i * n + p] = true;
            mask[p * n + i] = true;
        }
    }
    mask
}

/// `[N, 3]` scalar span features.
pub fn span_scalars(spans: &[Span]) -> Tensor {
    let mut by_service: HashMap<usize, Vec<f64>> = HashMap::new();
    for s in spans {
        by_service.entry(s.service).or_default().push(s.duration_ms.max(1e-3).ln());
    }
    let stats: HashMap<usize, (f64, f64)> = by_service
        .into_iter()
        .map(|(k, v)| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
            (k, (mean, var.sqrt()))
        })
        .collect();
    let mut t = Tensor::zeros(&[spans.len(), SPAN_SCALAR_FEATURES]);
    for (i, s) in spans.iter().enumerate() {
        let (mean, sd) = stats[&s.service];
        let z = if sd > 1e-9 { (s.duration_ms.max(1e-3).ln() - mean) / sd } else { 0.0 };
        let row = &mut t.data_mut()[i * SPAN_SCALAR_FEATURES..(i + 1) * SPAN_SCALAR_FEATURES];
        row[0] = z;
        row[if s.status == SpanStatus::Ok { 1 } else { 2 }] = 1.0;
    }
    t
}

impl TraceGat {
    pub fn new(store: &mut ParamStore, prefix: &str, input_dim: usize, dim: usize, n_layers: usize, rng: &mut SeededRng) -> Self {
        let layers = (0..n_layers)
            .map(|l| {
                let fan_in = if l == 0 { input_dim } else { dim };
                GatLayer {
                    w: store.glorot(&format!("{prefix}.layer{l}.W"), fan_in, dim, rng),
                    a: store.glorot_shaped(&format!("{prefix}.layer{l}.a"), &[2 * dim], 2 * dim, 1, rng),
                }
            })
            .collect();
        Self { layers, dim }
    }

    /// One layer; returns the new features and the `[N, N]` attention.
    pub fn layer<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        l: usize,
        h: Var<'t>,
        mask: &[bool],
    ) -> Result<(Var<'t>, Var<'t>)> {
        let p = &self.layers[l];
        let n = h.shape()[0];
        let d = self.dim;
        let wh = h.matmul(bound.get(p.w))?;
        let a = bound.get(p.a);
        let own = wh.matmul(a.slice(0, 0, d)?)?.reshape(&[n, 1])?;
        let other = wh.matmul(a.slice(0, d, 2 * d)?)?;
        let scores = own
            .matmul(tape.constant(Tensor::full(&[1, n], 1.0)))?
            .add(other)?
            .leaky_relu(LEAKY_SLOPE);
        let alpha = scores.masked_softmax(mask)?;
        Ok((alpha.matmul(wh)?.sigmoid(), alpha))
    }

    pub fn forward<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, features: Var<'t>, mask: &[bool]) -> Result<Var<'t>> {
        let mut h = features;
        for l in 0..self.layers.len() {
            h = self.layer(tape, bound, l, h, mask)?.0;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{sigmoid, Dist};

    fn span(id: usize, parent: Option<usize>, service: usize, ms: f64) -> Span {
        Span {
            span_id: id,
            parent,
            service,
            start: 0.0,
            duration_ms: ms,
            status: SpanStatus::Ok,
        }
    }

    #[test]
    fn single_span_attends_to_itself() {
        let mut rng = SeededRng::new(1);
        let mut store = ParamStore::new();
        let gat = TraceGat::new(&mut store, "g", 3, 4, 1, &mut rng);
        let x = Tensor::matrix(1, 3, vec![0.2, -0.5, 1.0]).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let (h, alpha) = gat.layer(&tape, &bound, 0, tape.constant(x.clone()), &[true]).unwrap();
        assert_eq!(alpha.value().data(), &[1.0]);
        let w = store.value(gat.layers[0].w);
        for j in 0..4 {
            let lin: f64 = (0..3).map(|i| x.data()[i] * w.at(i, j)).sum();
            assert!((h.value().data()[j] - sigmoid(lin)).abs() < 1e-15);
        }
    }

    #[test]
    fn chain_matches_literal_sum() {
        let spans = [span(10, None, 0, 5.0), span(11, Some(10), 1, 3.0), span(12, Some(11), 2, 1.0)];
        let mask = span_neighbourhood(&spans);
        assert_eq!(mask, vec![true, true, false, true, true, true, false, true, true]);
        let mut rng = SeededRng::new(2);
        let mut store = ParamStore::new();
        let gat = TraceGat::new(&mut store, "g", 2, 3, 2, &mut rng);
        let x = rng.sample(Dist::Normal, &[3, 2]);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let got = gat.forward(&tape, &bound, tape.constant(x.clone()), &mask).unwrap();
        let mut h: Vec<Vec<f64>> = (0..3).map(|i| x.row(i).to_vec()).collect();
        for layer in &gat.layers {
            let w = store.value(layer.w);
            let a = store.value(layer.a).data().to_vec();
            let wh: Vec<Vec<f64>> = h
                .iter()
                .map(|hi| (0..3).map(|j| hi.iter().enumerate().map(|(i, v)| v * w.at(i, j)).sum()).collect())
                .collect();
            let mut next = vec![vec![0.0; 3]; 3];
            for i in 0..3 {
                let nb: Vec<usize> = (0..3).filter(|&j| mask[i * 3 + j]).collect();
                let e: Vec<f64> = nb
                    .iter()
                    .map(|&j| {
                        let s: f64 = (0..3).map(|k| a[k] * wh[i][k] + a[3 + k] * wh[j][k]).sum();
                        if s > 0.0 { s } else { 0.2 * s }
                    })
                    .collect();
                let z: f64 = e.iter().map(|x| x.exp()).sum();
                for k in 0..3 {
                    let agg: f64 = nb.iter().zip(&e).map(|(&j, ej)| ej.exp() / z * wh[j][k]).sum();
                    next[i][k] = sigmoid(agg);
                }
            }
            h = next;
        }
        for i in 0..3 {
            for k in 0..3 {
                assert!((got.value().at(i, k) - h[i][k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let spans = [span(0, None, 0, 5.0), span(1, Some(0), 1, 3.0), span(2, Some(0), 1, 9.0), span(3, None, 2, 1.0)];
        let mask = span_neighbourhood(&spans);
        let mut rng = SeededRng::new(3);
        let mut store = ParamStore::new();
        let gat = TraceGat::new(&mut store, "g", 3, 4, 2, &mut rng);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let x = tape.constant(span_scalars(&spans));
        let (_, alpha) = gat.layer(&tape, &bound, 0, x, &mask).unwrap();
        for i in 0..4 {
            assert!((alpha.value().row(i).iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        assert_eq!(alpha.value().at(3, 3), 1.0);
    }

    #[test]
    fn scalar_features() {
        let mut spans = vec![span(0, None, 0, 1.0), span(1, None, 0, 100.0), span(2, None, 1, 7.0)];
        spans[1].status = SpanStatus::Error;
        let f = span_scalars(&spans);
        assert!((f.at(0, 0) + 1.0).abs() < 1e-12 && (f.at(1, 0) - 1.0).abs() < 1e-12);
        assert_eq!(f.row(1)[1..], [0.0, 1.0]);
        assert_eq!(f.row(2), &[0.0, 1.0, 0.0]);
    }
}
