//! Variational bottleneck head, candidate scorer, loss terms, AdamW and the
//! learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::datapipe::Candidate;
use crate::encoders::EmbeddingTable;
use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamId, ParamStore, SeededRng, Tape, Tensor, Var};

/// Floor added to the softplus scale.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Initial pre-softplus bias of σ, so sampling starts with σ ≈ 0.05.
pub const SIGMA_BIAS_INIT: f64 = -3.0;
/// Predicted probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;
pub const WARMUP_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Bottleneck KL weight.
    pub alpha_ib: f64,
    pub alpha_temp: f64,
    pub alpha_causal: f64,
    pub alpha_sparse: f64,
    pub lambda_grad: f64,
    pub label_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_ib: 1e-3,
            alpha_temp: 0.1,
            alpha_causal: 0.1,
            alpha_sparse: 1e-2,
            lambda_grad: 1e-2,
            label_smoothing: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha_ib,
            self.alpha_temp,
            self.alpha_causal,
            self.alpha_sparse,
            self.lambda_grad,
            self.label_smoothing,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.label_smoothing >= 1.0 {
            return Err(Error::Config("label smoothing must be below 1".into()));
        }
        Ok(())
    }
}

/// Loss terms of one incident or batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub kl: f64,
    pub temp: f64,
    pub causal: f64,
    pub sparse: f64,
}

impl LossComponents {
    pub fn add_scaled(&mut self, other: &LossComponents, k: f64) {
        self.cls += k * other.cls;
        self.kl += k * other.kl;
        self.temp += k * other.temp;
        self.causal += k * other.causal;
        self.sparse += k * other.sparse;
    }
}

/// `cls + α₁·kl + α₂·temp + α₃·causal + α₄·sparse`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    c.cls + w.alpha_ib * c.kl + w.alpha_temp * c.temp + w.alpha_causal * c.causal + w.alpha_sparse * c.sparse
}

/// `½ Σ (μ² + σ² − log σ² − 1)`.
pub fn kl_divergence(mu: &[f64], sigma: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(sigma)
        .map(|(m, s)| m * m + s * s - (s * s).ln() - 1.0)
        .sum::<f64>()
}

#[derive(Clone, Debug)]
pub struct VibHead {
    pub w_mu: ParamId,
    pub b_mu: ParamId,
    pub w_sigma: ParamId,
    pub b_sigma: ParamId,
    pub dim: usize,
}

impl VibHead {
    pub fn new(store: &mut ParamStore, prefix: &str, input_dim: usize, dim: usize, rng: &mut SeededRng) -> Self {
        Self {
            w_mu: store.glorot(&format!("{prefix}.W_mu"), input_dim, dim, rng),
            b_mu: store.zeros(&format!("{prefix}.b_mu"), &[dim]),
            w_sigma: store.glorot(&format!("{prefix}.W_sigma"), input_dim, dim, rng),
            b_sigma: store.add(&format!("{prefix}.b_sigma"), Tensor::full(&[dim], SIGMA_BIAS_INIT), true),
            dim,
        }
    }

    /// `(μ, σ)` with `σ = softplus(·) + 1e-6`.
    pub fn moments<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let mu = x.matmul(bound.get(self.w_mu))?.add(bound.get(self.b_mu))?;
        let sigma = x
            .matmul(bound.get(self.w_sigma))?
            .add(bound.get(self.b_sigma))?
            .softplus()
            .offset(SIGMA_FLOOR);
        Ok((mu, sigma))
    }

    /// Reparameterized sample `μ + σ ⊙ ε` when `noise` is given, otherwise
    /// `μ`; the KL term is returned either way.
    pub fn sample<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        x: Var<'t>,
        noise: Option<&mut SeededRng>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (mu, sigma) = self.moments(bound, x)?;
        let var = sigma.square();
        let kl = mu.square().add(var)?.sub(var.log()?)?.offset(-1.0).sum().scale(0.5);
        let z = match noise {
            Some(rng) => {
                let eps = Tensor::vector((0..self.dim).map(|_| rng.normal()).collect());
                mu.add(sigma.mul(tape.constant(eps))?)?
            }
            None => mu,
        };
        Ok((z, kl))
    }
}

/// `s_k = zᵀU Vᵀe_k + w_zᵀz + w_cᵀe_k + b` with
/// `e_k = E_svc[service_k] + E_fault[fault_k]`.
#[derive(Clone, Debug)]
pub struct Scorer {
    pub service: EmbeddingTable,
    pub fault: EmbeddingTable,
    pub u: ParamId,
    pub v: ParamId,
    pub w_z: ParamId,
    pub w_c: ParamId,
    pub b: ParamId,
    pub rank: usize,
}

impl Scorer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        n_services: usize,
        n_faults: usize,
        z_dim: usize,
        emb_dim: usize,
        rank: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let prior_odds = ((n_services * n_faults) as f64 - 1.0).max(1.0);
        Self {
            service: EmbeddingTable::new(store, &format!("{prefix}.E_svc"), n_services, emb_dim, rng),
            fault: EmbeddingTable::new(store, &format!("{prefix}.E_fault"), n_faults, emb_dim, rng),
            u: store.glorot(&format!("{prefix}.U"), z_dim, rank, rng),
            v: store.glorot(&format!("{prefix}.V"), emb_dim, rank, rng),
            w_z: store.glorot_shaped(&format!("{prefix}.w_z"), &[z_dim], z_dim, 1, rng),
            w_c: store.glorot_shaped(&format!("{prefix}.w_c"), &[emb_dim], emb_dim, 1, rng),
            // start every candidate at the one-positive-in-K base rate
            b: store.add(&format!("{prefix}.b"), Tensor::scalar(-prior_odds.ln()), true),
            rank,
        }
    }

    pub fn embed<'t>(&self, bound: &Bound<'t>, cands: &[Candidate]) -> Result<Var<'t>> {
        let svc: Vec<usize> = cands.iter().map(|c| c.service).collect();
        let flt: Vec<usize> = cands.iter().map(|c| c.fault).collect();
        self.service.lookup(bound, &svc)?.add(self.fault.lookup(bound, &flt)?)
    }

    /// `[K]` logits.
    pub fn score<'t>(&self, bound: &Bound<'t>, z: Var<'t>, cands: &[Candidate]) -> Result<Var<'t>> {
        if cands.is_empty() {
            return Err(Error::Invalid("scoring needs at least one candidate".into()));
        }
        let e = self.embed(bound, cands)?;
        let zu = z.matmul(bound.get(self.u))?;
        let bil = e.matmul(bound.get(self.v))?.matmul(zu)?;
        let lin = e.matmul(bound.get(self.w_c))?;
        let common = z.matmul(bound.get(self.w_z))?.add(bound.get(self.b))?;
        bil.add(lin)?.add(common)
    }
}

/// `(1 − ε) y + ε / K`.
pub fn smooth_targets(labels: &[f64], eps: f64) -> Vec<f64> {
    let k = labels.len() as f64;
    labels.iter().map(|y| (1.0 - eps) * y + eps / k).collect()
}

/// Mean binary cross-entropy between `σ(logits)`, clamped away from 0 and 1,
/// and the smoothed targets.
pub fn classification_loss<'t>(tape: &'t Tape, logits: Var<'t>, labels: &[f64], eps: f64) -> Result<Var<'t>> {
    let k = labels.len();
    if logits.shape() != [k] {
        return Err(Error::Invalid(format!("{k} labels for logits of shape {:?}", logits.shape())));
    }
    let targets = smooth_targets(labels, eps);
    let lo = tape.constant(Tensor::full(&[k], PROB_CLAMP));
    let hi = tape.constant(Tensor::full(&[k], -(1.0 - PROB_CLAMP)));
    let p = logits.sigmoid().maximum(lo)?.neg().maximum(hi)?.neg();
    let y = tape.constant(Tensor::vector(targets.clone()));
    let not_y = tape.constant(Tensor::vector(targets.iter().map(|t| 1.0 - t).collect()));
    let pos = y.mul(p.log()?)?;
    let neg = not_y.mul(p.neg().offset(1.0).log()?)?;
    Ok(pos.add(neg)?.mean().neg())
}

/// Population variance of the per-environment losses plus `λ` times the mean
/// squared gradient norm.
pub fn causal_penalty(env_losses: &[f64], grad_sq_norms: &[f64], lambda_grad: f64) -> Result<f64> {
    if env_losses.len() < 2 {
        return Err(Error::Invalid("the invariance penalty needs at least two environments".into()));
    }
    if grad_sq_norms.len() != env_losses.len() {
        return Err(Error::Invalid("one gradient norm per environment is required".into()));
    }
    let n = env_losses.len() as f64;
    // pairwise form: exactly zero when every environment has the same loss
    let mut var = 0.0;
    for a in env_losses {
        for b in env_losses {
            var += (a - b) * (a - b);
        }
    }
    var /= 2.0 * n * n;
    Ok(var + lambda_grad * grad_sq_norms.iter().sum::<f64>() / n)
}

/// `∂Var/∂L_e = 2 (L_e − mean) / E`.
pub fn variance_weights(env_losses: &[f64]) -> Vec<f64> {
    let n = env_losses.len() as f64;
    let mean = env_losses.iter().sum::<f64>() / n;
    env_losses.iter().map(|l| 2.0 * (l - mean) / n).collect()
}

/// Splits incidents into two environments at the median window start; `None`
/// when either side would be empty.
pub fn time_environments(starts: &[f64]) -> Option<Vec<usize>> {
    if starts.len() < 2 {
        return None;
    }
    let mut sorted = starts.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let labels: Vec<usize> = starts.iter().map(|&s| usize::from(s > median)).collect();
    let late = labels.iter().filter(|&&l| l == 1).count();
    (late > 0 && late < n).then_some(labels)
}

/// Linear warmup over the first 10% of steps, cosine decay afterwards.
pub fn lr_schedule(step: usize, total: usize) -> f64 {
    if total == 0 {
        return 1.0;
    }
    let step = step.min(total) as f64;
    let total = total as f64;
    let warmup = WARMUP_FRACTION * total;
    if step < warmup {
        return step / warmup;
    }
    let span = total - warmup;
    if span <= 0.0 {
        return 1.0;
    }
    0.5 * (1.0 + (PI * (step - warmup) / span).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW with decoupled weight decay. Frozen parameters are never touched.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update at learning rate `lr`; `grads` is indexed like the store.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Invalid(format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let g = grads[i].data();
            let theta = store.value_mut(id).data_mut();
            if g.len() != theta.len() {
                return Err(Error::Invalid(format!("gradient {i} has {} entries for {}", g.len(), theta.len())));
            }
            for (k, w) in theta.iter_mut().enumerate() {
                *w -= lr * c.weight_decay * *w;
                self.m[i][k] = c.beta1 * self.m[i][k] + (1.0 - c.beta1) * g[k];
                self.v[i][k] = c.beta2 * self.v[i][k] + (1.0 - c.beta2) * g[k] * g[k];
                let mh = self.m[i][k] / bc1;
                let vh = self.v[i][k] / bc2;
                *w -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dist;
    use proptest::prelude::*;

    #[test]
    fn kl_cases() {
        assert_eq!(kl_divergence(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
        assert!((kl_divergence(&[1.0], &[1.0]) - 0.5).abs() < 1e-15);
        let s = 1f64.exp().sqrt();
        assert!((kl_divergence(&[0.0], &[s]) - 0.5 * (1f64.exp() - 2.0)).abs() < 1e-12);
        assert!((kl_divergence(&[0.0], &[s]) - 0.3591).abs() < 1e-4);
    }

    #[test]
    fn taped_kl_matches_plain() {
        let mut rng = SeededRng::new(1);
        let mut store = ParamStore::new();
        let head = VibHead::new(&mut store, "vib", 4, 3, &mut rng);
        let x = rng.sample(Dist::Normal, &[4]);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let (mu, sigma) = head.moments(&bound, tape.constant(x.clone())).unwrap();
        assert!(sigma.value().data().iter().all(|&s| s > 0.0));
        let (z, kl) = head.sample(&tape, &bound, tape.constant(x), None).unwrap();
        assert_eq!(*z.value(), *mu.value());
        assert!((kl.item() - kl_divergence(mu.value().data(), sigma.value().data())).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_seeded() {
        let mut rng = SeededRng::new(2);
        let mut store = ParamStore::new();
        let head = VibHead::new(&mut store, "vib", 4, 3, &mut rng);
        let x = rng.sample(Dist::Normal, &[4]);
        let draw = |seed| {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let mut r = SeededRng::new(seed);
            let (z, _) = head.sample(&tape, &bound, tape.constant(x.clone()), Some(&mut r)).unwrap();
            z.value().data().to_vec()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }

    fn cands() -> Vec<Candidate> {
        vec![
            Candidate { service: 0, fault: 1 },
            Candidate { service: 2, fault: 0 },
            Candidate { service: 1, fault: 4 },
        ]
    }

    #[test]
    fn zero_scorer_gives_half() {
        let mut rng = SeededRng::new(3);
        let mut store = ParamStore::new();
        let sc = Scorer::new(&mut store, "sc", 3, 5, 4, 6, 8, &mut rng);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = Tensor::zeros(&shape);
        }
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let s = sc.score(&bound, tape.constant(Tensor::vector(vec![1.0; 4])), &cands()).unwrap();
        assert!(s.sigmoid().value().data().iter().all(|&p| p == 0.5));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn factorized_equals_dense_bilinear(seed in 0u64..1_000_000) {
            let mut rng = SeededRng::new(seed);
            let mut store = ParamStore::new();
            let sc = Scorer::new(&mut store, "sc", 3, 5, 4, 6, 8, &mut rng);
            *store.value_mut(sc.b) = Tensor::scalar(rng.normal());
            let z = rng.sample(Dist::Normal, &[4]);
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let s = sc.score(&bound, tape.constant(z.clone()), &cands()).unwrap();
            let (u, v) = (store.value(sc.u), store.value(sc.v));
            let e_svc = store.value(sc.service.id);
            let e_f = store.value(sc.fault.id);
            for (k, c) in cands().iter().enumerate() {
                let e: Vec<f64> = (0..6).map(|j| e_svc.at(c.service, j) + e_f.at(c.fault, j)).collect();
                let mut want = store.value(sc.b).item();
                for a in 0..4 {
                    for b in 0..6 {
                        let w_ab: f64 = (0..8).map(|r| u.at(a, r) * v.at(b, r)).sum();
                        want += z.data()[a] * w_ab * e[b];
                    }
                    want += store.value(sc.w_z).data()[a] * z.data()[a];
                }
                want += (0..6).map(|b| store.value(sc.w_c).data()[b] * e[b]).sum::<f64>();
                prop_assert!((s.value().data()[k] - want).abs() < 1e-10);
            }
        }

        #[test]
        fn kl_is_non_negative(mu in -5.0f64..5.0, sigma in 1e-3f64..10.0) {
            let kl = kl_divergence(&[mu], &[sigma]);
            prop_assert!(kl >= 0.0);
            if mu.abs() > 1e-3 || (sigma - 1.0).abs() > 1e-3 {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn penalty_ignores_environment_order(ls in prop::collection::vec(0.0f64..5.0, 2..6), lam in 0.0f64..1.0) {
            let g: Vec<f64> = ls.iter().map(|l| l * 0.5).collect();
            let a = causal_penalty(&ls, &g, lam).unwrap();
            prop_assert!(a >= 0.0);
            let mut lr = ls.clone();
            let mut gr = g.clone();
            lr.reverse();
            gr.reverse();
            prop_assert!((a - causal_penalty(&lr, &gr, lam).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn bias_shift_moves_every_score() {
        let mut rng = SeededRng::new(4);
        let mut store = ParamStore::new();
        let sc = Scorer::new(&mut store, "sc", 3, 5, 4, 6, 8, &mut rng);
        let z = Tensor::vector(vec![0.3, -0.1, 0.8, 0.2]);
        let run = |store: &ParamStore| {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            sc.score(&bound, tape.constant(z.clone()), &cands()).unwrap().value().data().to_vec()
        };
        let a = run(&store);
        let shifted = store.value(sc.b).item() + 0.25;
        *store.value_mut(sc.b) = Tensor::scalar(shifted);
        let b = run(&store);
        for (x, y) in a.iter().zip(&b) {
            assert!((y - x - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_cases() {
        let tape = Tape::new();
        let l = classification_loss(&tape, tape.constant(Tensor::vector(vec![0.0, 0.0])), &[1.0, 0.0], 0.0).unwrap();
        assert!((l.item() - 2f64.ln()).abs() < 1e-15);
        let l = classification_loss(&tape, tape.constant(Tensor::vector(vec![50.0, -50.0])), &[1.0, 0.0], 0.0).unwrap();
        assert!(l.item() <= 1e-6);
        let t = smooth_targets(&[1.0, 0.0], 0.1);
        assert!((t[0] - 0.95).abs() < 1e-15 && (t[1] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn penalty_cases() {
        assert_eq!(causal_penalty(&[0.7, 0.7, 0.7], &[0.0; 3], 0.0).unwrap(), 0.0);
        assert_eq!(causal_penalty(&[1.0, 3.0], &[0.0; 2], 0.0).unwrap(), 1.0);
        assert_eq!(causal_penalty(&[1.0, 3.0], &[0.0; 2], 0.5).unwrap(), 1.0);
        assert!(causal_penalty(&[1.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn environments_split_at_median() {
        assert_eq!(time_environments(&[30.0, 10.0, 20.0, 40.0]), Some(vec![1, 0, 0, 1]));
        assert_eq!(time_environments(&[5.0, 5.0]), None);
        assert_eq!(time_environments(&[1.0]), None);
    }

    #[test]
    fn total_loss_cases() {
        let c = LossComponents { cls: 1.0, kl: 0.1, temp: 0.2, causal: 0.3, sparse: 0.4 };
        let ones = LossWeights {
            alpha_ib: 1.0,
            alpha_temp: 1.0,
            alpha_causal: 1.0,
            alpha_sparse: 1.0,
            ..Default::default()
        };
        assert!((total_loss(&c, &ones) - 2.0).abs() < 1e-15);
        let zero = LossWeights {
            alpha_ib: 0.0,
            alpha_temp: 0.0,
            alpha_causal: 0.0,
            alpha_sparse: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(&c, &zero), 1.0);
        let twice = LossWeights { alpha_temp: 2.0, ..ones };
        assert!((total_loss(&c, &twice) - total_loss(&c, &ones) - c.temp).abs() < 1e-15);
    }

    #[test]
    fn schedule_points() {
        assert_eq!(lr_schedule(0, 100), 0.0);
        assert!((lr_schedule(10, 100) - 1.0).abs() < 1e-15);
        assert!(lr_schedule(100, 100).abs() < 1e-12);
        assert!((lr_schedule(55, 100) - 0.5).abs() < 1e-12);
    }

    fn scalar_store(theta: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::vector(vec![theta]), true);
        (store, id)
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_identity() {
        let (mut store, id) = scalar_store(0.7);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &store);
        opt.step(&mut store, &[Tensor::zeros(&[1])], 3e-4).unwrap();
        assert_eq!(store.value(id).data(), &[0.7]);
    }

    #[test]
    fn adamw_quadratic_descends() {
        let (mut store, id) = scalar_store(1.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &store);
        let mut prev = 1.0;
        for _ in 0..200 {
            let g = Tensor::vector(vec![store.value(id).data()[0]]);
            opt.step(&mut store, &[g], 3e-4).unwrap();
            let now = store.value(id).data()[0].abs();
            assert!(now < prev);
            prev = now;
        }
        assert!(prev < 0.95);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let (mut store, id) = scalar_store(2.0);
        let frozen = store.frozen("b", Tensor::vector(vec![1.0]));
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.5, ..Default::default() }, &store);
        for _ in 0..3 {
            opt.step(&mut store, &[Tensor::zeros(&[1]), Tensor::zeros(&[1])], 0.1).unwrap();
        }
        assert!((store.value(id).data()[0] - 2.0 * 0.95f64.powi(3)).abs() < 1e-15);
        assert_eq!(store.value(frozen).data(), &[1.0]);
    }
}
