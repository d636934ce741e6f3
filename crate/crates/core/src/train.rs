//! Training loop, evaluation and checkpoint I/O.

use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datapipe::{Dataset, IncidentRecord};
use crate::error::{Error, Result};
use crate::hypergat::{anneal_tau, TAU_END};
use crate::metrics::{evaluate, EvalReport, IncidentScores};
use crate::model::{set_normalizer, ContextNormalizer, IncidentFeatures, Model, Vocab};
use crate::objective::{
    causal_penalty, lr_schedule, time_environments, total_loss, variance_weights, AdamW, AdamWConfig, LossComponents,
};
use crate::tensor::{mix_seed, ParamStore, SeededRng, Tape, Tensor};

/// Loss statistics of one epoch, averaged over its batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub components: LossComponents,
    pub template: f64,
    pub total: f64,
    /// Temperature at the epoch's first step and after its last one.
    pub tau_start: f64,
    pub tau_end: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean binary entropy of the noise-free incidence over the training
    /// incidents, at the epoch's final temperature.
    pub incidence_entropy: f64,
}

pub struct Trained {
    pub model: Model,
    pub store: ParamStore,
    pub history: Vec<EpochStats>,
}

/// Noise stream for one incident at one optimizer step; replaying it gives
/// the same Gumbel and bottleneck draws.
fn noise_rng(seed: u64, step: usize, incident: usize) -> SeededRng {
    SeededRng::new(mix_seed(seed ^ 0x6e6f697365)).fork(mix_seed(step as u64) ^ incident as u64)
}

fn dot(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum::<f64>())
        .sum()
}

fn axpy(acc: &mut [Tensor], k: f64, x: &[Tensor]) {
    for (a, b) in acc.iter_mut().zip(x) {
        for (p, q) in a.data_mut().iter_mut().zip(b.data()) {
            *p += k * q;
        }
    }
}

/// Mean data objective over `batch` with its gradient.
struct EnvResult {
    loss: f64,
    grads: Vec<Tensor>,
    parts: LossComponents,
    template: f64,
}

fn env_objective(
    model: &Model,
    store: &ParamStore,
    cfg: &RunConfig,
    batch: &[&IncidentFeatures],
    step: usize,
    tau: f64,
) -> Result<EnvResult> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let mut total = tape.scalar(0.0);
    let mut parts = LossComponents::default();
    let mut template = 0.0;
    let k = 1.0 / batch.len() as f64;
    for f in batch {
        let mut noise = noise_rng(cfg.seed, step, f.id);
        let l = model.incident_loss(&tape, &bound, store, f, tau, Some(&mut noise), &cfg.loss, cfg.template_weight)?;
        total = total.add(l.objective.scale(k))?;
        parts.add_scaled(&l.parts, k);
        template += k * l.template;
    }
    let grads = bound.gradients(&tape.backward(total)?);
    Ok(EnvResult {
        loss: total.item(),
        grads,
        parts,
        template,
    })
}

/// `H g` of one environment objective by a forward difference along `g`.
fn hessian_vector(
    model: &Model,
    store: &ParamStore,
    cfg: &RunConfig,
    batch: &[&IncidentFeatures],
    step: usize,
    tau: f64,
    env: &EnvResult,
) -> Result<Vec<Tensor>> {
    let norm = dot(&env.grads, &env.grads).sqrt();
    if norm == 0.0 {
        return Ok(env.grads.iter().map(|g| Tensor::zeros(g.shape())).collect());
    }
    let eps = cfg.hvp_step / norm;
    let mut shifted = store.clone();
    let ids: Vec<_> = shifted.ids().collect();
    for id in ids {
        if shifted.is_trainable(id) {
            let g = env.grads[id.index()].data().to_vec();
            for (w, d) in shifted.value_mut(id).data_mut().iter_mut().zip(g) {
                *w += eps * d;
            }
        }
    }
    let moved = env_objective(model, &shifted, cfg, batch, step, tau)?;
    let mut hv: Vec<Tensor> = moved.grads;
    axpy(&mut hv, -1.0, &env.grads);
    for t in &mut hv {
        for v in t.data_mut() {
            *v /= eps;
        }
    }
    Ok(hv)
}

/// Gradient of the full objective for one batch, along with the batch's
/// loss components.
fn batch_gradient(
    model: &Model,
    store: &ParamStore,
    cfg: &RunConfig,
    batch: &[&IncidentFeatures],
    step: usize,
    tau: f64,
) -> Result<(Vec<Tensor>, LossComponents, f64)> {
    let starts: Vec<f64> = batch.iter().map(|f| f.window_start).collect();
    let Some(labels) = time_environments(&starts) else {
        let env = env_objective(model, store, cfg, batch, step, tau)?;
        return Ok((env.grads, env.parts, env.template));
    };
    let n_env = 1 + labels.iter().copied().max().unwrap_or(0);
    let groups: Vec<Vec<&IncidentFeatures>> = (0..n_env)
        .map(|e| batch.iter().zip(&labels).filter(|(_, &l)| l == e).map(|(f, _)| *f).collect())
        .collect();
    let envs: Vec<EnvResult> = groups
        .iter()
        .map(|g| env_objective(model, store, cfg, g, step, tau))
        .collect::<Result<_>>()?;
    let losses: Vec<f64> = envs.iter().map(|e| e.loss).collect();
    let sq: Vec<f64> = envs.iter().map(|e| dot(&e.grads, &e.grads)).collect();
    let w = &cfg.loss;
    let vw = variance_weights(&losses);
    let mut grads: Vec<Tensor> = envs[0].grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
    let mut parts = LossComponents::default();
    let mut template = 0.0;
    let b = batch.len() as f64;
    for (e, env) in envs.iter().enumerate() {
        let share = groups[e].len() as f64 / b;
        axpy(&mut grads, share + w.alpha_causal * vw[e], &env.grads);
        parts.add_scaled(&env.parts, share);
        template += share * env.template;
        let coeff = w.alpha_causal * w.lambda_grad * 2.0 / n_env as f64;
        if coeff != 0.0 {
            let hv = hessian_vector(model, store, cfg, &groups[e], step, tau, env)?;
            axpy(&mut grads, coeff, &hv);
        }
    }
    parts.causal = causal_penalty(&losses, &sq, w.lambda_grad)?;
    Ok((grads, parts, template))
}

/// Freshly initialized model sized for the vocabularies of `dataset`.
pub fn prepare(cfg: &RunConfig, dataset: &Dataset) -> Result<(Model, ParamStore)> {
    let (model, store) = Model::new(cfg.model.clone(), Vocab::from_manifest(&dataset.manifest), cfg.seed)?;
    Ok((model, store))
}

pub fn featurize_all(model: &Model, incidents: &[&IncidentRecord]) -> Result<Vec<IncidentFeatures>> {
    incidents.iter().map(|i| model.featurize(i)).collect()
}

/// Trains on the incidents of `cfg.train_splits`.
pub fn train(cfg: &RunConfig, dataset: &Dataset) -> Result<Trained> {
    cfg.validate()?;
    let incidents = dataset.select(&cfg.train_splits);
    if incidents.is_empty() {
        return Err(Error::Config("the training splits contain no incidents".into()));
    }
    let (model, mut store) = prepare(cfg, dataset)?;
    let feats = featurize_all(&model, &incidents)?;
    set_normalizer(&mut store, &ContextNormalizer::fit(&feats));

    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        &store,
    );
    let n_batches = feats.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * n_batches;
    let shuffler = SeededRng::new(mix_seed(cfg.seed ^ 0x73687566));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..feats.len()).collect();
        shuffler.fork(epoch as u64).shuffle(&mut order);
        if epoch == 0 {
            let first: Vec<Vec<f64>> = order[..cfg.batch_size.min(order.len())]
                .iter()
                .flat_map(|&i| {
                    let h = &feats[i].log_hash;
                    (0..h.rows()).map(move |r| h.row(r).to_vec())
                })
                .collect();
            if !first.is_empty() {
                model.prototypes.init_farthest(&mut store, &first);
            }
        }
        let mut comps = LossComponents::default();
        let mut template = 0.0;
        let tau_start = anneal_tau(step, total_steps);
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let tau = anneal_tau(step, total_steps);
            lr = cfg.lr * lr_schedule(step, total_steps);
            let batch: Vec<&IncidentFeatures> = chunk.iter().map(|&i| &feats[i]).collect();
            let (grads, parts, tmpl) = batch_gradient(&model, &store, cfg, &batch, step, tau)?;
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::domain("train", format!("non-finite gradient at step {step}")));
            }
            opt.step(&mut store, &grads, lr)?;
            model.prototypes.renormalize(&mut store);
            comps.add_scaled(&parts, 1.0 / n_batches as f64);
            template += tmpl / n_batches as f64;
            step += 1;
        }
        let end_tau = anneal_tau(step, total_steps);
        let entropy = feats
            .iter()
            .map(|f| model.incidence_entropy(&store, f, end_tau))
            .sum::<Result<f64>>()?
            / feats.len() as f64;
        let stats = EpochStats {
            epoch: epoch + 1,
            components: comps,
            template,
            total: total_loss(&comps, &cfg.loss) + cfg.template_weight * template,
            tau_start,
            tau_end: end_tau,
            lr,
            incidence_entropy: entropy,
        };
        info!(
            "epoch {:>3} total {:.5} cls {:.5} kl {:.4} temp {:.5} causal {:.3e} sparse {:.4} template {:.4} tau {:.4} entropy {:.4}",
            stats.epoch,
            stats.total,
            comps.cls,
            comps.kl,
            comps.temp,
            comps.causal,
            comps.sparse,
            template,
            end_tau,
            entropy
        );
        history.push(stats);
    }
    Ok(Trained { model, store, history })
}

/// Noise-free scores for every incident at the final temperature.
pub fn score_incidents(model: &Model, store: &ParamStore, feats: &[IncidentFeatures]) -> Result<Vec<IncidentScores>> {
    feats
        .iter()
        .map(|f| {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let fwd = model.forward(&tape, &bound, store, f, TAU_END, None)?;
            let scores = fwd.logits.value().data().to_vec();
            Ok(IncidentScores {
                probs: scores.iter().map(|&s| 1.0 / (1.0 + (-s).exp())).collect(),
                scores,
                keys: f.candidates.iter().map(|c| (c.service, c.fault)).collect(),
                truth: f.truth,
                fault_type: f.fault_name.clone(),
            })
        })
        .collect()
}

pub fn evaluate_incidents(model: &Model, store: &ParamStore, incidents: &[&IncidentRecord]) -> Result<EvalReport> {
    if incidents.is_empty() {
        return Err(Error::Invalid("no incidents to evaluate".into()));
    }
    let feats = featurize_all(model, incidents)?;
    evaluate(&score_incidents(model, store, &feats)?)
}

/// Rebuilds a model for `dataset` and loads checkpoint parameters into it.
/// Any disagreement between the two is a configuration error.
pub fn load_checkpoint(path: &Path, cfg: &RunConfig, dataset: &Dataset) -> Result<(Model, ParamStore)> {
    let records = ParamStore::read_records(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read checkpoint {}: {io}", path.display())),
        Error::Parse { msg, .. } => Error::Config(format!("malformed checkpoint: {msg}")),
        other => other,
    })?;
    let (model, mut store) = prepare(cfg, dataset)?;
    store
        .load_records(&records)
        .map_err(|e| Error::Config(format!("checkpoint does not fit this dataset and model config: {e}")))?;
    Ok((model, store))
}
