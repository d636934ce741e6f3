use std::ops::Range;

use super::Sample;
use crate::error::{Error, Result};

/// Consistency constant making the MAD an estimator of the standard
/// deviation under normality.
pub const MAD_SCALE: f64 = 1.4826;
pub const MAD_EPS: f64 = 1e-8;
/// Gaps up to this length (seconds) are interpolated linearly.
const SHORT_GAP: f64 = 300.0;
/// Decay rate per minute for values carried across long gaps.
const DECAY_PER_MINUTE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MadStats {
    pub median: f64,
    pub mad: f64,
}

impl MadStats {
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.median) / (MAD_SCALE * self.mad + MAD_EPS)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn mad_stats(values: &[f64]) -> Result<MadStats> {
    if values.len() < 3 {
        return Err(Error::Invalid(format!(
            "MAD baseline needs at least 3 samples, got {}",
            values.len()
        )));
    }
    let mut v = values.to_vec();
    let med = median(&mut v);
    let mut dev: Vec<f64> = values.iter().map(|x| (x - med).abs()).collect();
    Ok(MadStats {
        median: med,
        mad: median(&mut dev),
    })
}

/// Robust z-scores `(x - median) / (1.4826 * MAD + eps)`, with statistics
/// taken from the observed samples whose timestamp falls in `baseline`.
pub fn mad_normalize(samples: &[Sample], baseline: Range<f64>) -> Result<(Vec<Sample>, MadStats)> {
    let base: Vec<f64> = samples
        .iter()
        .filter(|(t, _)| baseline.contains(t))
        .filter_map(|&(_, v)| v)
        .collect();
    let stats = mad_stats(&base)?;
    let out = samples
        .iter()
        .map(|&(t, v)| (t, v.map(|x| stats.normalize(x))))
        .collect();
    Ok((out, stats))
}

/// Resamples onto the grid `start + k * step` for `k < n_points`.
///
/// A grid point takes the nearest observed sample within `step / 2`. Otherwise
/// a gap of at most five minutes between the flanking samples is bridged
/// linearly; longer gaps, and points after the last sample, decay the last
/// value by `exp(-0.1 * minutes)`. Points before the first sample take the
/// first value.
pub fn impute(samples: &[Sample], start: f64, step: f64, n_points: usize) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::Invalid(format!("grid step must be positive, got {step}")));
    }
    let obs: Vec<(f64, f64)> = samples.iter().filter_map(|&(t, v)| v.map(|x| (t, x))).collect();
    if obs.is_empty() {
        return Err(Error::Invalid("cannot impute a series with no observed values".into()));
    }
    let mut out = Vec::with_capacity(n_points);
    for k in 0..n_points {
        let g = start + k as f64 * step;
        // first observation strictly after g
        let next = obs.partition_point(|&(t, _)| t <= g);
        let prev = next.checked_sub(1);
        let nearest = [prev, (next < obs.len()).then_some(next)]
            .into_iter()
            .flatten()
            .map(|i| (i, (obs[i].0 - g).abs()))
            .filter(|&(_, d)| d <= step / 2.0)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        let value = if let Some((i, _)) = nearest {
            obs[i].1
        } else {
            match prev {
                None => obs[0].1,
                Some(p) => {
                    let (tp, vp) = obs[p];
                    match obs.get(next) {
                        Some(&(tn, vn)) if tn - tp <= SHORT_GAP => vp + (vn - vp) * (g - tp) / (tn - tp),
                        _ => vp * (-DECAY_PER_MINUTE * (g - tp) / 60.0).exp(),
                    }
                }
            }
        };
        out.push(value);
    }
    Ok(out)
}
