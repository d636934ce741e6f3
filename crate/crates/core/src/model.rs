//! The full incident model: encoders, learned hypergraph, latent ODE, fusion,
//! bottleneck and candidate scorer, wired into one differentiable forward
//! pass per incident.

use serde::{Deserialize, Serialize};

use crate::datapipe::{Candidate, Entity, Event, IncidentRecord, Manifest};
use crate::encoders::{
    grid_len, log_embed, metric_grid, normalize_metrics, span_neighbourhood, span_scalars, Dcc, EmbeddingTable,
    EntityEncoder, EventEncoder, TemplatePrototypes, TraceGat, SPAN_SCALAR_FEATURES,
};
use crate::error::{Error, Result};
use crate::fusion::{FusionParams, CONTEXT_FEATURES, N_MODALITIES};
use crate::hypergat::{
    estimate_onsets, generate_candidates, mean_binary_entropy, pairwise_attention, sparsity_loss, temporal_causal_loss,
    CandidateHyperedge, HyperGat, ServiceGraph,
};
use crate::latentode::{velocity_acceleration_taped, GradMode, OdeRnn, SolverOptions, Trajectory};
use crate::objective::{classification_loss, LossComponents, LossWeights, Scorer, VibHead};
use crate::tensor::{Bound, ParamId, ParamStore, SeededRng, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_final: usize,
    /// Bottleneck width.
    pub d_z: usize,
    pub candidate_dim: usize,
    pub bilinear_rank: usize,
    pub hash_dim: usize,
    pub hash_seed: u64,
    pub n_templates: usize,
    pub hyper_layers: usize,
    pub max_hyperedge_size: usize,
    pub max_hyperedges: usize,
    pub trace_layers: usize,
    pub dcc_layers: usize,
    /// Metric grid spacing in seconds.
    pub metric_step: f64,
    pub ode_dim: usize,
    pub ode_hidden: usize,
    pub ode_time_dim: usize,
    /// Width in seconds of the buckets that become latent ODE observations.
    pub ode_bucket: f64,
    pub ode_rtol: f64,
    pub ode_atol: f64,
    pub grad_mode: GradMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            d_final: 64,
            d_z: 32,
            candidate_dim: 64,
            bilinear_rank: 64,
            hash_dim: 64,
            hash_seed: 0x5eed,
            n_templates: 16,
            hyper_layers: 3,
            max_hyperedge_size: 4,
            max_hyperedges: 32,
            trace_layers: 2,
            dcc_layers: 4,
            metric_step: 30.0,
            ode_dim: 16,
            ode_hidden: 32,
            ode_time_dim: 8,
            ode_bucket: 30.0,
            ode_rtol: 1e-6,
            ode_atol: 1e-8,
            grad_mode: GradMode::Adjoint,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.d_model % 2 != 0 || self.ode_time_dim % 2 != 0 {
            return bad("d_model and ode_time_dim must be even");
        }
        if [self.d_final, self.d_z, self.candidate_dim, self.bilinear_rank, self.hash_dim, self.n_templates, self.ode_dim]
            .contains(&0)
        {
            return bad("model widths must be positive");
        }
        if self.max_hyperedge_size < 2 {
            return bad("max_hyperedge_size must be at least 2");
        }
        if !(self.metric_step > 0.0 && self.ode_bucket > 0.0) {
            return bad("metric_step and ode_bucket must be positive");
        }
        if !(self.ode_rtol > 0.0 && self.ode_atol > 0.0) {
            return bad("solver tolerances must be positive");
        }
        Ok(())
    }
}

/// Vocabulary sizes fixed when the dataset is built.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocab {
    pub services: usize,
    pub pods: usize,
    pub nodes: usize,
    pub regions: usize,
    pub event_types: usize,
    pub faults: usize,
    pub metrics: usize,
    pub fault_names: Vec<String>,
}

impl Vocab {
    pub fn from_manifest(m: &Manifest) -> Self {
        Self {
            services: m.services.len(),
            pods: m.pods.len(),
            nodes: m.nodes.len(),
            regions: m.regions.len(),
            event_types: m.event_types.len(),
            faults: m.fault_types.len(),
            metrics: m.metric_names.len(),
            fault_names: m.fault_types.clone(),
        }
    }

    /// Errors when a dataset was built with different vocabularies.
    pub fn check(&self, m: &Manifest) -> Result<()> {
        let other = Self::from_manifest(m);
        if *self != other {
            return Err(Error::Config(format!(
                "dataset vocabulary {other:?} does not match the checkpoint's {self:?}"
            )));
        }
        Ok(())
    }
}

/// Dataset-level scaling of the raw incident context statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextNormalizer {
    pub mean: [f64; CONTEXT_FEATURES],
    pub scale: [f64; CONTEXT_FEATURES],
}

impl Default for ContextNormalizer {
    fn default() -> Self {
        Self {
            mean: [0.0; CONTEXT_FEATURES],
            scale: [1.0; CONTEXT_FEATURES],
        }
    }
}

impl ContextNormalizer {
    /// Z-scores the log volume and mean span duration; the metric peak and
    /// event rate are used as they are.
    pub fn fit(features: &[IncidentFeatures]) -> Self {
        let mut out = Self::default();
        if features.is_empty() {
            return out;
        }
        let n = features.len() as f64;
        for k in 0..2 {
            let mean = features.iter().map(|f| f.context[k]).sum::<f64>() / n;
            let var = features.iter().map(|f| (f.context[k] - mean).powi(2)).sum::<f64>() / n;
            out.mean[k] = mean;
            out.scale[k] = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };
        }
        out
    }

    pub fn apply(&self, raw: &[f64; CONTEXT_FEATURES]) -> Vec<f64> {
        (0..CONTEXT_FEATURES).map(|k| (raw[k] - self.mean[k]) / self.scale[k]).collect()
    }
}

/// Parameter-free preprocessing of one incident, computed once and reused
/// across epochs.
#[derive(Clone, Debug)]
pub struct IncidentFeatures {
    pub id: usize,
    pub window_start: f64,
    pub duration: f64,
    /// `[S * T, C]` normalized, imputed metrics.
    pub metric_grid: Tensor,
    pub t_len: usize,
    /// `[S, C + 1]`: peak `|z|` per channel and the onset fraction.
    pub service_stats: Tensor,
    /// Onset of each service as a fraction of the window.
    pub onsets: Vec<f64>,
    pub hyperedges: Vec<CandidateHyperedge>,
    pub log_hash: Tensor,
    pub log_services: Vec<usize>,
    pub log_buckets: Vec<usize>,
    pub span_scalars: Tensor,
    pub span_services: Vec<usize>,
    pub span_mask: Vec<bool>,
    pub span_buckets: Vec<usize>,
    pub entities: Vec<Entity>,
    pub events: Vec<Event>,
    pub event_times: Vec<f64>,
    pub event_buckets: Vec<usize>,
    pub n_buckets: usize,
    /// Log count, mean log span duration, peak metric `|z|` (asinh scale),
    /// events per window minute.
    pub context: [f64; CONTEXT_FEATURES],
    pub candidates: Vec<Candidate>,
    pub truth: usize,
    pub fault_name: String,
}

impl IncidentFeatures {
    pub fn labels(&self) -> Vec<f64> {
        (0..self.candidates.len()).map(|k| if k == self.truth { 1.0 } else { 0.0 }).collect()
    }

    /// Observation times of the latent ODE (bucket ends, window-relative).
    pub fn ode_times(&self) -> Vec<f64> {
        (1..=self.n_buckets).map(|b| b as f64 / self.n_buckets as f64).collect()
    }
}

/// Named parameter groups of the model.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub service: EmbeddingTable,
    pub prototypes: TemplatePrototypes,
    pub w_log: ParamId,
    pub b_log: ParamId,
    pub trace: TraceGat,
    pub dcc: Dcc,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub hypergat: HyperGat,
    pub entity: EntityEncoder,
    pub event: EventEncoder,
    /// `[5, d]` stand-ins for empty modalities.
    pub null_tokens: ParamId,
    pub ode: OdeRnn,
    pub fusion: FusionParams,
    pub vib: VibHead,
    pub scorer: Scorer,
}

/// Everything produced by one forward pass that later stages use.
pub struct Forward<'t> {
    pub logits: Var<'t>,
    pub kl: Var<'t>,
    pub temp: Var<'t>,
    pub sparse: Var<'t>,
    pub template: Var<'t>,
    pub incidence: Var<'t>,
    pub hyper_logits: Var<'t>,
    pub hyper_attention: Vec<Var<'t>>,
    pub routing: Var<'t>,
    pub pooling: Vec<Var<'t>>,
    pub velocity: f64,
    pub acceleration: f64,
    pub trajectory: Trajectory,
}

fn bucket_of(t: f64, start: f64, width: f64, n: usize) -> usize {
    (((t - start) / width).floor().max(0.0) as usize).min(n - 1)
}

/// `[n_buckets, n]` averaging matrix; empty buckets give zero rows.
fn bucket_means(buckets: &[usize], n_buckets: usize) -> Tensor {
    let n = buckets.len();
    let mut counts = vec![0usize; n_buckets];
    for &b in buckets {
        counts[b] += 1;
    }
    let mut m = Tensor::zeros(&[n_buckets, n]);
    for (i, &b) in buckets.iter().enumerate() {
        m.data_mut()[b * n + i] = 1.0 / counts[b] as f64;
    }
    m
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        if vocab.services == 0 || vocab.faults == 0 || vocab.metrics == 0 {
            return Err(Error::Config("vocabulary must have services, faults and metrics".into()));
        }
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let c = vocab.metrics;
        let service = EmbeddingTable::new(&mut store, "service", vocab.services, d, &mut rng);
        let prototypes = TemplatePrototypes::new(&mut store, "log.prototypes", config.n_templates, config.hash_dim, &mut rng);
        let w_log = store.glorot("log.W", config.hash_dim + config.n_templates, d, &mut rng);
        let b_log = store.zeros("log.b", &[d]);
        let trace = TraceGat::new(&mut store, "trace", SPAN_SCALAR_FEATURES + d, d, config.trace_layers, &mut rng);
        let dcc = Dcc::new(&mut store, "metric", c, d, config.dcc_layers, &mut rng);
        let w_in = store.glorot("hyper.W_in", d + c + 1, d, &mut rng);
        let b_in = store.zeros("hyper.b_in", &[d]);
        let hypergat = HyperGat::new(&mut store, "hyper", d, config.hyper_layers, &mut rng);
        let entity = EntityEncoder::new(
            &mut store,
            "entity",
            [vocab.services, vocab.pods, vocab.nodes, vocab.regions],
            d,
            &mut rng,
        );
        let event = EventEncoder::new(&mut store, "event", vocab.event_types, d, &mut rng);
        let null_tokens = store.add(
            "null_tokens",
            Tensor::new(vec![N_MODALITIES, d], (0..N_MODALITIES * d).map(|_| 0.1 * rng.normal()).collect())?,
            true,
        );
        let mut ode = OdeRnn::new(
            &mut store,
            "ode",
            N_MODALITIES * d,
            config.ode_dim,
            config.ode_hidden,
            config.ode_time_dim,
            &mut rng,
        );
        ode.opts = SolverOptions {
            rtol: config.ode_rtol,
            atol: config.ode_atol,
            ..Default::default()
        };
        let fusion = FusionParams::new(&mut store, "fusion", d, config.heads, config.d_final, 2, &mut rng);
        let vib = VibHead::new(&mut store, "vib", config.d_final, config.d_z, &mut rng);
        let scorer = Scorer::new(
            &mut store,
            "scorer",
            vocab.services,
            vocab.faults,
            config.d_z,
            config.candidate_dim,
            config.bilinear_rank,
            &mut rng,
        );
        set_normalizer(&mut store, &ContextNormalizer::default());
        let model = Self {
            config,
            vocab,
            service,
            prototypes,
            w_log,
            b_log,
            trace,
            dcc,
            w_in,
            b_in,
            hypergat,
            entity,
            event,
            null_tokens,
            ode,
            fusion,
            vib,
            scorer,
        };
        Ok((model, store))
    }

    pub fn featurize(&self, inc: &IncidentRecord) -> Result<IncidentFeatures> {
        let cfg = &self.config;
        let s_n = self.vocab.services;
        let c_n = self.vocab.metrics;
        let w = &inc.window;
        let duration = w.duration();
        if !(duration > 0.0) {
            return Err(Error::Invalid(format!("incident {} has an empty window", inc.id)));
        }
        let normalized = normalize_metrics(inc);
        let grid = metric_grid(&normalized, w, s_n, c_n, cfg.metric_step)?;
        let t_len = grid_len(w, cfg.metric_step)?;

        let mut per_service: Vec<Vec<&[crate::datapipe::Sample]>> = vec![Vec::new(); s_n];
        for series in &normalized {
            if series.service < s_n {
                per_service[series.service].push(&series.samples);
            }
        }
        let onsets: Vec<f64> = estimate_onsets(&per_service, w.start, w.end)
            .into_iter()
            .map(|o| o / duration)
            .collect();
        let mut stats = Tensor::zeros(&[s_n, c_n + 1]);
        let mut peak: f64 = 0.0;
        for s in 0..s_n {
            for t in 0..t_len {
                for c in 0..c_n {
                    let v = grid.data()[(s * t_len + t) * c_n + c].abs();
                    let slot = &mut stats.data_mut()[s * (c_n + 1) + c];
                    *slot = slot.max(v);
                    peak = peak.max(v);
                }
            }
            stats.data_mut()[s * (c_n + 1) + c_n] = onsets[s];
        }

        let graph = ServiceGraph::from_incident(inc, s_n);
        let hyperedges = generate_candidates(&graph, cfg.max_hyperedge_size, cfg.max_hyperedges);

        let n_buckets = ((duration / cfg.ode_bucket).ceil() as usize).max(1);
        let bucket = |t: f64| bucket_of(t, w.start, cfg.ode_bucket, n_buckets);

        let log_rows: Vec<Vec<f64>> = inc.logs.iter().map(|l| log_embed(&l.tokens, cfg.hash_dim, cfg.hash_seed)).collect();
        let log_hash = if log_rows.is_empty() {
            Tensor::zeros(&[0, cfg.hash_dim])
        } else {
            Tensor::from_rows(&log_rows)?
        };

        let durations: Vec<f64> = inc.spans.iter().map(|s| s.duration_ms.max(1e-3).ln()).collect();
        let mean_dur = if durations.is_empty() {
            0.0
        } else {
            durations.iter().sum::<f64>() / durations.len() as f64
        };

        let context = [
            inc.logs.len() as f64,
            mean_dur,
            peak,
            inc.events.len() as f64 / (duration / 60.0),
        ];
        Ok(IncidentFeatures {
            id: inc.id,
            window_start: w.start,
            duration,
            metric_grid: grid,
            t_len,
            service_stats: stats,
            onsets,
            hyperedges,
            log_hash,
            log_services: inc.logs.iter().map(|l| l.service).collect(),
            log_buckets: inc.logs.iter().map(|l| bucket(l.timestamp)).collect(),
            span_scalars: if inc.spans.is_empty() {
                Tensor::zeros(&[0, SPAN_SCALAR_FEATURES])
            } else {
                span_scalars(&inc.spans)
            },
            span_services: inc.spans.iter().map(|s| s.service).collect(),
            span_mask: span_neighbourhood(&inc.spans),
            span_buckets: inc.spans.iter().map(|s| bucket(s.start)).collect(),
            entities: inc.entities.clone(),
            events: inc.events.clone(),
            event_times: inc.events.iter().map(|e| (e.timestamp - w.start) / duration).collect(),
            event_buckets: inc.events.iter().map(|e| bucket(e.timestamp)).collect(),
            n_buckets,
            context,
            candidates: inc.candidates.clone(),
            truth: inc.truth,
            fault_name: self
                .vocab
                .fault_names
                .get(inc.truth_candidate().fault)
                .cloned()
                .unwrap_or_else(|| format!("fault-{}", inc.truth_candidate().fault)),
        })
    }

    fn null<'t>(&self, bound: &Bound<'t>, m: usize) -> Result<Var<'t>> {
        bound.get(self.null_tokens).slice(0, m, m + 1)
    }

    /// Per-service input to the hypergraph: `[last metric state ‖ stats] W + b`,
    /// along with the full metric encoding `[S * T, d]`.
    fn service_features<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, f: &IncidentFeatures) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let s_n = self.vocab.services;
        let enc = self.dcc.forward(tape, bound, tape.constant(f.metric_grid.clone()), f.t_len)?;
        let last: Vec<usize> = (0..s_n).map(|s| s * f.t_len + f.t_len - 1).collect();
        let last = enc.index_rows(&last)?;
        let h0 = tape
            .concat(&[last, tape.constant(f.service_stats.clone())], 1)?
            .matmul(bound.get(self.w_in))?
            .add(bound.get(self.b_in))?;
        Ok((enc, last, h0))
    }

    /// Eval-mode soft incidence (no Gumbel noise) at temperature `tau`.
    pub fn eval_incidence(&self, store: &ParamStore, f: &IncidentFeatures, tau: f64) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let (_, _, h0) = self.service_features(&tape, &bound, f)?;
        if f.hyperedges.is_empty() {
            return Ok(Tensor::zeros(&[self.vocab.services, 0]));
        }
        let logits = self.hypergat.logits(&tape, &bound, h0, &f.hyperedges)?;
        let inc = self
            .hypergat
            .soft_incidence(&tape, logits, &f.hyperedges, self.vocab.services, tau, None)?;
        let v = inc.value();
        Ok((*v).clone())
    }

    /// Mean binary entropy of the member entries of the eval-mode incidence.
    pub fn incidence_entropy(&self, store: &ParamStore, f: &IncidentFeatures, tau: f64) -> Result<f64> {
        let inc = self.eval_incidence(store, f, tau)?;
        let k = inc.shape()[1];
        let mut vals = Vec::new();
        for (e, c) in f.hyperedges.iter().enumerate() {
            for &v in &c.members {
                vals.push(inc.data()[v * k + e]);
            }
        }
        Ok(mean_binary_entropy(&vals))
    }

    /// One incident. `noise` switches on Gumbel perturbations and bottleneck
    /// sampling; `None` is the deterministic evaluation mode.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        store: &ParamStore,
        f: &IncidentFeatures,
        tau: f64,
        mut noise: Option<&mut SeededRng>,
    ) -> Result<Forward<'t>> {
        let s_n = self.vocab.services;
        let all_services: Vec<usize> = (0..s_n).collect();
        let svc_all = self.service.lookup(bound, &all_services)?;

        // metrics and the hypergraph over services
        let (metric_enc, metric_last, h0) = self.service_features(tape, bound, f)?;
        let metric_tokens = metric_last.add(svc_all)?;
        let hg = self
            .hypergat
            .forward(tape, bound, h0, &f.hyperedges, tau, noise.as_deref_mut())?;
        let (temp, sparse) = match hg.attention.last() {
            Some(&alpha) => {
                let pw = pairwise_attention(hg.incidence, alpha)?;
                (
                    temporal_causal_loss(tape, hg.incidence, pw, &f.onsets)?,
                    sparsity_loss(tape, hg.incidence),
                )
            }
            None => (tape.scalar(0.0), tape.scalar(0.0)),
        };

        // entities carry the hypergraph state of their service
        let entity_tokens = if f.entities.is_empty() {
            self.null(bound, 3)?
        } else {
            let rows: Vec<usize> = f.entities.iter().map(|e| e.service.min(s_n - 1)).collect();
            self.entity.encode(bound, &f.entities)?.add(hg.h.index_rows(&rows)?)?
        };

        let (log_tokens, template) = if f.log_services.is_empty() {
            (self.null(bound, 0)?, tape.scalar(0.0))
        } else {
            let (probs, loss) = self
                .prototypes
                .assign_taped(tape, bound.get(self.prototypes.id), &f.log_hash)?;
            let x = tape.concat(&[tape.constant(f.log_hash.clone()), probs], 1)?;
            let tokens = x
                .matmul(bound.get(self.w_log))?
                .add(bound.get(self.b_log))?
                .add(self.service.lookup(bound, &f.log_services)?)?;
            (tokens, loss)
        };

        let trace_tokens = if f.span_services.is_empty() {
            self.null(bound, 1)?
        } else {
            let x = tape.concat(
                &[tape.constant(f.span_scalars.clone()), self.service.lookup(bound, &f.span_services)?],
                1,
            )?;
            self.trace.forward(tape, bound, x, &f.span_mask)?
        };

        let event_tokens = if f.events.is_empty() {
            self.null(bound, 4)?
        } else {
            self.event.encode(tape, bound, &f.events, &f.event_times)?
        };

        // latent ODE over bucketed modality summaries
        let nb = f.n_buckets;
        let mean_of = |tokens: Var<'t>, buckets: &[usize]| -> Result<Var<'t>> {
            if buckets.is_empty() {
                return Ok(tape.constant(Tensor::zeros(&[nb, self.config.d_model])));
            }
            tape.constant(bucket_means(buckets, nb)).matmul(tokens)
        };
        let grid_buckets: Vec<usize> = (0..s_n * f.t_len)
            .map(|r| bucket_of((r % f.t_len) as f64 * self.config.metric_step, 0.0, self.config.ode_bucket, nb))
            .collect();
        let entity_summary = if f.entities.is_empty() {
            mean_of(entity_tokens, &[])?
        } else {
            let n = f.entities.len();
            tape.constant(Tensor::full(&[nb, n], 1.0 / n as f64)).matmul(entity_tokens)?
        };
        let x = tape.concat(
            &[
                mean_of(log_tokens, if f.log_services.is_empty() { &[] } else { &f.log_buckets })?,
                mean_of(trace_tokens, if f.span_services.is_empty() { &[] } else { &f.span_buckets })?,
                mean_of(metric_enc, &grid_buckets)?,
                entity_summary,
                mean_of(event_tokens, if f.events.is_empty() { &[] } else { &f.event_buckets })?,
            ],
            1,
        )?;
        let times = f.ode_times();
        let (z_end, trajectory) = self
            .ode
            .encode_taped(tape, bound, store, &times, x, self.config.grad_mode)?;
        let (v, a) = velocity_acceleration_taped(tape, bound, &self.ode.field, z_end, *times.last().expect("at least one bucket"))?;
        let extra = tape.concat(&[v.reshape(&[1])?, a.reshape(&[1])?], 0)?;

        let tokens = [log_tokens, trace_tokens, metric_tokens, entity_tokens, event_tokens];
        let context = normalizer_apply(store, f);
        let fused = self.fusion.forward(tape, bound, &tokens, &context, extra)?;
        let (z, kl) = self.vib.sample(tape, bound, fused.z_final, noise.as_deref_mut())?;
        let logits = self.scorer.score(bound, z, &f.candidates)?;
        Ok(Forward {
            logits,
            kl,
            temp,
            sparse,
            template,
            incidence: hg.incidence,
            hyper_logits: hg.logits,
            hyper_attention: hg.attention,
            routing: fused.routing,
            pooling: fused.pooling,
            velocity: v.item(),
            acceleration: a.item(),
            trajectory,
        })
    }

    /// Per-incident data objective
    /// `cls + α₁·kl + α₂·temp + α₄·sparse + template_weight·template`; the
    /// invariance term needs several incidents and is added by the trainer.
    #[allow(clippy::too_many_arguments)]
    pub fn incident_loss<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        store: &ParamStore,
        f: &IncidentFeatures,
        tau: f64,
        noise: Option<&mut SeededRng>,
        weights: &LossWeights,
        template_weight: f64,
    ) -> Result<IncidentLoss<'t>> {
        let fwd = self.forward(tape, bound, store, f, tau, noise)?;
        let cls = classification_loss(tape, fwd.logits, &f.labels(), weights.label_smoothing)?;
        let objective = cls
            .add(fwd.kl.scale(weights.alpha_ib))?
            .add(fwd.temp.scale(weights.alpha_temp))?
            .add(fwd.sparse.scale(weights.alpha_sparse))?
            .add(fwd.template.scale(template_weight))?;
        let parts = LossComponents {
            cls: cls.item(),
            kl: fwd.kl.item(),
            temp: fwd.temp.item(),
            causal: 0.0,
            sparse: fwd.sparse.item(),
        };
        Ok(IncidentLoss {
            objective,
            parts,
            template: fwd.template.item(),
        })
    }
}

pub struct IncidentLoss<'t> {
    pub objective: Var<'t>,
    pub parts: LossComponents,
    pub template: f64,
}

/// Context statistics are scaled by the normalizer stored next to the
/// parameters (see [`CONTEXT_NORMALIZER`]).
fn normalizer_apply(store: &ParamStore, f: &IncidentFeatures) -> Vec<f64> {
    let norm = store
        .id(CONTEXT_NORMALIZER)
        .map(|id| {
            let t = store.value(id).data();
            let mut n = ContextNormalizer::default();
            n.mean.copy_from_slice(&t[..CONTEXT_FEATURES]);
            n.scale.copy_from_slice(&t[CONTEXT_FEATURES..]);
            n
        })
        .unwrap_or_default();
    norm.apply(&f.context)
}

/// Name of the frozen parameter holding `[mean ‖ scale]` of the context
/// statistics, so that it travels with every checkpoint.
pub const CONTEXT_NORMALIZER: &str = "context.normalizer";

/// Stores `norm` in the frozen normalizer slot, creating it when missing.
pub fn set_normalizer(store: &mut ParamStore, norm: &ContextNormalizer) {
    let mut data = norm.mean.to_vec();
    data.extend(norm.scale);
    let t = Tensor::vector(data);
    match store.id(CONTEXT_NORMALIZER) {
        Some(id) => *store.value_mut(id) = t,
        None => {
            store.frozen(CONTEXT_NORMALIZER, t);
        }
    }
}
