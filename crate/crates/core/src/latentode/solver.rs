//! Dormand–Prince 5(4) with PI step-size control.

use crate::error::{Error, Result};

pub(crate) const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];

pub(crate) const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];

/// Fifth-order weights (identical to the last stage row).
pub(crate) const B5: [f64; 6] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0];

/// Fifth minus fourth order weights over all seven stages.
const E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;
const PI_BETA: f64 = 0.04;
const PI_ALPHA: f64 = 0.2 - 0.75 * PI_BETA;
const UNDERFLOW: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-8,
            max_steps: 100_000,
        }
    }
}

/// One accepted step: start time and size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub h: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub z: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub rejected: usize,
    pub evals: usize,
}

fn axpy_stages(y: &[f64], h: f64, coeffs: &[f64], k: &[Vec<f64>]) -> Vec<f64> {
    let mut out = y.to_vec();
    for (c, ki) in coeffs.iter().zip(k) {
        if *c == 0.0 {
            continue;
        }
        let hc = h * c;
        for (o, kv) in out.iter_mut().zip(ki) {
            *o += hc * kv;
        }
    }
    out
}

fn rms(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    (v.map(|x| x * x).sum::<f64>() / n.max(1) as f64).sqrt()
}

/// Hairer's starting-step heuristic.
fn initial_step<F>(f: &mut F, t0: f64, z0: &[f64], f0: &[f64], span: f64, opts: &SolverOptions) -> Result<f64>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let n = z0.len();
    let scale: Vec<f64> = z0.iter().map(|z| opts.atol + opts.rtol * z.abs()).collect();
    let d0 = rms(z0.iter().zip(&scale).map(|(z, s)| z / s), n);
    let d1 = rms(f0.iter().zip(&scale).map(|(d, s)| d / s), n);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let z1: Vec<f64> = z0.iter().zip(f0).map(|(z, d)| z + h0 * d).collect();
    let f1 = f(t0 + h0, &z1)?;
    let d2 = rms(f1.iter().zip(f0).zip(&scale).map(|((a, b), s)| (a - b) / s), n) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    Ok((100.0 * h0).min(h1).min(span))
}

/// Integrates `dz/dt = f(t, z)` from `t0` to `t1 >= t0`.
pub fn dopri5<F>(mut f: F, z0: &[f64], t0: f64, t1: f64, opts: &SolverOptions) -> Result<Solution>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    if !(t1 >= t0) {
        return Err(Error::Invalid(format!("integration needs t1 >= t0, got {t0} -> {t1}")));
    }
    if !(opts.rtol > 0.0 && opts.atol > 0.0) {
        return Err(Error::Invalid("solver tolerances must be positive".into()));
    }
    let mut sol = Solution {
        z: z0.to_vec(),
        steps: Vec::new(),
        rejected: 0,
        evals: 0,
    };
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(sol);
    }
    let n = z0.len();
    let mut t = t0;
    let mut k1 = f(t, &sol.z)?;
    let mut h = initial_step(&mut f, t0, &sol.z, &k1, span, opts)?;
    sol.evals += 2;
    let mut prev_err: f64 = 1e-4;
    loop {
        if sol.steps.len() + sol.rejected >= opts.max_steps {
            return Err(Error::MaxSteps(opts.max_steps));
        }
        let last = t + h >= t1 || (t1 - (t + h)) < UNDERFLOW * span;
        if last {
            h = t1 - t;
        }
        if h < UNDERFLOW * span {
            return Err(Error::Stiffness { t, h });
        }
        let z = &sol.z;
        let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
        k.push(k1.clone());
        for s in 1..7 {
            let ys = axpy_stages(z, h, A[s], &k);
            k.push(f(t + C[s] * h, &ys)?);
        }
        sol.evals += 6;
        let z_new = axpy_stages(z, h, &B5, &k);
        let err = rms(
            (0..n).map(|i| {
                let e: f64 = E.iter().zip(&k).map(|(c, kk)| c * kk[i]).sum::<f64>() * h;
                e / (opts.atol + opts.rtol * z[i].abs().max(z_new[i].abs()))
            }),
            n,
        );
        if err.is_finite() && err <= 1.0 {
            sol.steps.push(StepRecord { t, h });
            t = if last { t1 } else { t + h };
            sol.z = z_new;
            k1 = k.swap_remove(6);
            if last {
                return Ok(sol);
            }
            let factor = if err == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * err.powf(-PI_ALPHA) * prev_err.powf(PI_BETA)).clamp(MIN_FACTOR, MAX_FACTOR)
            };
            prev_err = err.max(1e-4);
            h *= factor;
        } else {
            sol.rejected += 1;
            let factor = if err.is_finite() {
                (SAFETY * err.powf(-PI_ALPHA)).clamp(MIN_FACTOR, 1.0)
            } else {
                MIN_FACTOR
            };
            h *= factor;
        }
    }
}
