//! Dilated causal convolutions over imputed metric grids.

use crate::datapipe::{impute, mad_normalize, mad_stats, IncidentRecord, MetricSeries, Window};
use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamId, ParamStore, SeededRng, Tape, Tensor, Var};

/// Fraction of the window, from its start, used as the normalization baseline.
pub const BASELINE_FRACTION: f64 = 1.0 / 3.0;

/// Robust z-scores of every series, with statistics from the first third of
/// the window (or the whole series when that baseline is too thin). Series
/// that cannot be normalized at all are dropped.
pub fn normalize_metrics(inc: &IncidentRecord) -> Vec<MetricSeries> {
    let w = &inc.window;
    let baseline = w.start..w.start + BASELINE_FRACTION * w.duration();
    inc.metrics
        .iter()
        .filter_map(|series| {
            let samples = match mad_normalize(&series.samples, baseline.clone()) {
                Ok((s, _)) => s,
                Err(_) => {
                    let vals: Vec<f64> = series.samples.iter().filter_map(|s| s.1).collect();
                    let st = mad_stats(&vals).ok()?;
                    series.samples.iter().map(|&(t, v)| (t, v.map(|x| st.normalize(x)))).collect()
                }
            };
            Some(MetricSeries {
                service: series.service,
                metric: series.metric,
                samples,
            })
        })
        .collect()
}

/// Normalized series imputed onto a regular grid: `[S * T, C]` with the rows
/// of service `s` at `s*T..(s+1)*T`. Values pass through `asinh` so that
/// large excursions stay in a range the encoders handle well.
pub fn metric_grid(normalized: &[MetricSeries], window: &Window, n_services: usize, n_channels: usize, step: f64) -> Result<Tensor> {
    let t_len = grid_len(window, step)?;
    let mut grid = Tensor::zeros(&[n_services * t_len, n_channels]);
    for series in normalized {
        if series.service >= n_services || series.metric >= n_channels {
            continue;
        }
        let Ok(values) = impute(&series.samples, window.start, step, t_len) else {
            continue;
        };
        for (k, v) in values.into_iter().enumerate() {
            grid.data_mut()[(series.service * t_len + k) * n_channels + series.metric] = v.asinh();
        }
    }
    Ok(grid)
}

pub fn grid_len(window: &Window, step: f64) -> Result<usize> {
    let t_len = if step > 0.0 { (window.duration() / step).round() as usize } else { 0 };
    if t_len == 0 {
        return Err(Error::Invalid("metric grid needs at least one step".into()));
    }
    Ok(t_len)
}

#[derive(Clone, Debug)]
pub struct DccLayer {
    /// Tap applied to `x[t − dilation]`.
    pub w_past: ParamId,
    /// Tap applied to `x[t]`.
    pub w_now: ParamId,
    pub b: ParamId,
    pub dilation: usize,
}

/// Kernel-size-2 causal convolutions with dilations `1, 2, 4, …` and a ReLU
/// after every layer.
#[derive(Clone, Debug)]
pub struct Dcc {
    pub layers: Vec<DccLayer>,
    pub dim: usize,
}

impl Dcc {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, dim: usize, n_layers: usize, rng: &mut SeededRng) -> Self {
        let layers = (0..n_layers)
            .map(|l| {
                let fan_in = if l == 0 { channels } else { dim };
                DccLayer {
                    w_past: store.glorot_shaped(&format!("{prefix}.layer{l}.W_past"), &[fan_in, dim], 2 * fan_in, dim, rng),
                    w_now: store.glorot_shaped(&format!("{prefix}.layer{l}.W_now"), &[fan_in, dim], 2 * fan_in, dim, rng),
                    b: store.zeros(&format!("{prefix}.layer{l}.b"), &[dim]),
                    dilation: 1 << l,
                }
            })
            .collect();
        Self { layers, dim }
    }

    /// `x: [B * T, C]` holding `B` independent sequences of length `t_len`;
    /// returns `[B * T, dim]`.
    pub fn forward<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, x: Var<'t>, t_len: usize) -> Result<Var<'t>> {
        if t_len == 0 {
            return Err(Error::Invalid("causal convolution needs T >= 1".into()));
        }
        let rows = x.shape()[0];
        if rows % t_len != 0 {
            return Err(Error::Invalid(format!("{rows} rows do not split into sequences of {t_len}")));
        }
        let mut y = x;
        for layer in &self.layers {
            let width = y.shape()[1];
            // padded row at index `rows` stands in for t − d < 0
            let padded = tape.concat(&[y, tape.constant(Tensor::zeros(&[1, width]))], 0)?;
            let idx: Vec<usize> = (0..rows)
                .map(|r| if r % t_len >= layer.dilation { r - layer.dilation } else { rows })
                .collect();
            let past = padded.index_rows(&idx)?;
            y = past
                .matmul(bound.get(layer.w_past))?
                .add(y.matmul(bound.get(layer.w_now))?)?
                .add(bound.get(layer.b))?
                .relu();
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dist;
    use proptest::prelude::*;

    fn run(store: &ParamStore, dcc: &Dcc, x: &Tensor, t_len: usize) -> Tensor {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        (*dcc.forward(&tape, &bound, tape.constant(x.clone()), t_len).unwrap().value()).clone()
    }

    #[test]
    fn single_layer_hand_check() {
        let mut rng = SeededRng::new(1);
        let mut store = ParamStore::new();
        let dcc = Dcc::new(&mut store, "c", 1, 1, 1, &mut rng);
        *store.value_mut(dcc.layers[0].w_past) = Tensor::matrix(1, 1, vec![0.7]).unwrap();
        *store.value_mut(dcc.layers[0].w_now) = Tensor::matrix(1, 1, vec![-0.2]).unwrap();
        let x = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        let y = run(&store, &dcc, &x, 2);
        assert!((y.data()[1] - (0.7f64 * 3.0 - 0.2 * 4.0).max(0.0)).abs() < 1e-15);
        assert_eq!(y.data()[0], 0.0);
    }

    #[test]
    fn zero_in_zero_out() {
        let mut rng = SeededRng::new(2);
        let mut store = ParamStore::new();
        let dcc = Dcc::new(&mut store, "c", 3, 5, 4, &mut rng);
        let y = run(&store, &dcc, &Tensor::zeros(&[20, 3]), 10);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dilations_double() {
        let mut rng = SeededRng::new(3);
        let mut store = ParamStore::new();
        let dcc = Dcc::new(&mut store, "c", 3, 5, 4, &mut rng);
        assert_eq!(dcc.layers.iter().map(|l| l.dilation).collect::<Vec<_>>(), vec![1, 2, 4, 8]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn future_perturbation_leaves_past_untouched(seed in 0u64..10_000, layers in 1usize..5, t_len in 1usize..20, at in 0usize..20, delta in -3.0f64..3.0) {
            let at = at % t_len;
            let mut rng = SeededRng::new(seed);
            let mut store = ParamStore::new();
            let dcc = Dcc::new(&mut store, "c", 2, 4, layers, &mut rng);
            for l in &dcc.layers {
                *store.value_mut(l.b) = rng.sample(Dist::Normal, &[4]);
            }
            let x = rng.sample(Dist::Normal, &[2 * t_len, 2]);
            let mut x2 = x.clone();
            x2.data_mut()[at * 2] += delta;
            let (a, b) = (run(&store, &dcc, &x, t_len), run(&store, &dcc, &x2, t_len));
            for r in 0..2 * t_len {
                let before = r < t_len && r < at;
                let other_seq = r >= t_len;
                if before || other_seq {
                    prop_assert_eq!(a.row(r), b.row(r));
                }
            }
        }
    }
}
