//! Seeded generator of multimodal microservice incidents.
//!
//! A random layered call DAG is drawn once per dataset. Each incident injects
//! one fault at a root service and lets it spread along call edges to callees,
//! with a per-hop delay and a decaying magnitude. All observations are drawn
//! so that the root's symptoms always start no later than its dependents'.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::{
    Candidate, Dataset, Entity, Event, IncidentRecord, LogRecord, Manifest, MetricSeries, Sample,
    Span, SpanStatus, Splits, Window,
};
use crate::error::{Error, Result};
use crate::tensor::SeededRng;

pub const FAULT_TYPES: [&str; 5] = ["cpu-stress", "memory-leak", "network-delay", "pod-kill", "io-latency"];
pub const METRIC_NAMES: [&str; 5] = ["cpu", "memory", "latency", "error_rate", "io_wait"];
/// Event types; type `k` is the usual trigger of fault `k`.
const EVENT_TYPES: [&str; 5] = ["load-test", "deploy", "network-policy", "node-drain", "disk-alert"];
const REGIONS: [&str; 2] = ["region-a", "region-b"];
const SERVICE_NAMES: [&str; 12] = [
    "frontend", "gateway", "cart", "checkout", "catalog", "payment", "shipping", "currency", "auth",
    "inventory", "email", "recommend",
];

const METRIC_LATENCY: usize = 2;
const METRIC_ERRORS: usize = 3;
const PODS_PER_SERVICE: usize = 2;
const MAX_HOPS: usize = 2;
const HOP_DECAY: f64 = 0.6;
/// Seconds between shared "dependency failed" log ticks after the onset.
const DEPENDENCY_TICK: f64 = 25.0;

const FAULT_LOGS: [[&[&str]; 2]; 5] = [
    [
        &["cpu", "throttling", "detected", "load", "<num>"],
        &["worker", "pool", "saturated", "queue", "depth", "<num>"],
    ],
    [
        &["heap", "usage", "growing", "<num>", "mb"],
        &["gc", "pause", "exceeded", "<num>", "ms"],
    ],
    [
        &["connection", "timeout", "to", "peer", "<ip>"],
        &["retrying", "request", "after", "slow", "response"],
    ],
    [
        &["container", "killed", "exit", "code", "<num>"],
        &["pod", "restarting", "back-off", "<num>", "s"],
    ],
    [
        &["disk", "write", "slow", "fsync", "<num>", "ms"],
        &["io", "wait", "high", "on", "volume", "<id>"],
    ],
];
const DEPENDENCY_LOG: &[&str] = &["dependency", "call", "failed", "status", "<num>"];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_services: usize,
    pub n_incidents: usize,
    pub window_seconds: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl SynthConfig {
    pub fn new(seed: u64, n_services: usize, n_incidents: usize) -> Self {
        Self {
            seed,
            n_services,
            n_incidents,
            window_seconds: 600.0,
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn round4(x: f64) -> f64 {
    (x * 10000.0).round() / 10000.0
}

fn tokens(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

struct Topology {
    names: Vec<String>,
    callees: Vec<Vec<usize>>,
    edges: Vec<(usize, usize)>,
    node_of: Vec<usize>,
    n_nodes: usize,
    /// Baseline level and noise half-width per (service, metric).
    level: Vec<[f64; 5]>,
    noise: Vec<[f64; 5]>,
    /// Intrinsic span time in ms.
    self_ms: Vec<f64>,
}

fn build_topology(n: usize, rng: &mut SeededRng) -> Topology {
    let n_layers = (((n as f64).sqrt().round() as usize) + 1).clamp(2, n);
    let layer_of: Vec<usize> = (0..n)
        .map(|i| if i == 0 { 0 } else { 1 + (i - 1) * (n_layers - 1) / (n - 1) })
        .collect();
    let mut edges = BTreeSet::new();
    for v in 1..n {
        let prev: Vec<usize> = (0..n).filter(|&u| layer_of[u] + 1 == layer_of[v]).collect();
        let first = prev[rng.below(prev.len())];
        edges.insert((first, v));
        if prev.len() > 1 && rng.bernoulli(0.3) {
            let second = prev[rng.below(prev.len())];
            edges.insert((second, v));
        }
    }
    let edges: Vec<(usize, usize)> = edges.into_iter().collect();
    let mut callees = vec![Vec::new(); n];
    for &(u, v) in &edges {
        callees[u].push(v);
    }
    let n_nodes = (n / 2).max(2);
    let names = (0..n)
        .map(|i| match SERVICE_NAMES.get(i) {
            Some(s) => s.to_string(),
            None => format!("svc-{i}"),
        })
        .collect();
    let node_of = (0..n).map(|_| rng.below(n_nodes)).collect();
    let mut level = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n);
    for _ in 0..n {
        let mut l = [0.0; 5];
        let mut s = [0.0; 5];
        for c in 0..5 {
            l[c] = rng.uniform_range(10.0, 100.0);
            s[c] = l[c] * rng.uniform_range(0.01, 0.03);
        }
        level.push(l);
        noise.push(s);
    }
    let self_ms = (0..n).map(|_| rng.uniform_range(5.0, 30.0)).collect();
    Topology {
        names,
        callees,
        edges,
        node_of,
        n_nodes,
        level,
        noise,
        self_ms,
    }
}

/// Per affected service: (onset in seconds, magnitude in noise units).
fn propagate(topo: &Topology, root: usize, onset: f64, magnitude: f64, rng: &mut SeededRng) -> BTreeMap<usize, (f64, f64)> {
    let mut affected = BTreeMap::new();
    affected.insert(root, (onset, magnitude));
    let mut queue = VecDeque::from([(root, 0usize)]);
    while let Some((u, hops)) = queue.pop_front() {
        if hops == MAX_HOPS {
            continue;
        }
        let (t_u, m_u) = affected[&u];
        for &v in &topo.callees[u] {
            if affected.contains_key(&v) {
                continue;
            }
            let delay = rng.uniform_range(10.0, 60.0);
            affected.insert(v, (t_u + delay, m_u * HOP_DECAY));
            queue.push_back((v, hops + 1));
        }
    }
    affected
}

struct Fault {
    root: usize,
    fault: usize,
    affected: BTreeMap<usize, (f64, f64)>,
}

impl Fault {
    /// Magnitude (noise units) active at `service` at time `t`, if any.
    fn active(&self, service: usize, t: f64) -> Option<f64> {
        self.affected
            .get(&service)
            .and_then(|&(onset, m)| (t >= onset).then_some(m))
    }
}

fn gen_metrics(topo: &Topology, f: &Fault, w: &Window, rng: &mut SeededRng) -> Vec<MetricSeries> {
    // One scrape clock shared by every series: 10 s ticks thinned to 70 %,
    // with occasional scrapes that lost all values.
    let mut ticks: Vec<(f64, bool)> = Vec::new();
    let mut t = w.start + rng.uniform_range(0.0, 10.0);
    while t <= w.end {
        if rng.bernoulli(0.7) {
            ticks.push((round3(t), rng.bernoulli(0.04)));
        }
        t += 10.0;
    }
    let n = topo.names.len();
    let mut out = Vec::with_capacity(n * METRIC_NAMES.len());
    for s in 0..n {
        for c in 0..METRIC_NAMES.len() {
            let samples: Vec<Sample> = ticks
                .iter()
                .map(|&(t, lost)| {
                    let eps = rng.uniform_range(-1.0, 1.0);
                    if lost {
                        return (t, None);
                    }
                    let mut shift = 0.0;
                    if let Some(m) = f.active(s, t) {
                        if s == f.root {
                            if c == f.fault {
                                shift = m;
                            } else if c == METRIC_LATENCY {
                                shift = 0.8 * m;
                            }
                        } else if c == METRIC_LATENCY || c == METRIC_ERRORS {
                            shift = m;
                        }
                    }
                    let v = topo.level[s][c] + topo.noise[s][c] * (eps + shift);
                    (t, Some(round4(v)))
                })
                .collect();
            out.push(MetricSeries {
                service: s,
                metric: c,
                samples,
            });
        }
    }
    out
}

fn gen_logs(topo: &Topology, f: &Fault, w: &Window, rng: &mut SeededRng) -> Vec<LogRecord> {
    let mut logs = Vec::new();
    for s in 0..topo.names.len() {
        let name = topo.names[s].as_str();
        let background: [&[&str]; 3] = [
            &[name, "handled", "request", "in", "<num>", "ms"],
            &[name, "cache", "refresh", "completed"],
            &[name, "health", "check", "ok"],
        ];
        let mut t = w.start + rng.exponential(1.0 / 150.0);
        while t < w.end {
            let tpl = background[rng.below(background.len())];
            logs.push(LogRecord {
                timestamp: round3(t),
                service: s,
                tokens: tokens(tpl),
            });
            t += rng.exponential(1.0 / 150.0);
        }
    }
    let (root_onset, _) = f.affected[&f.root];
    let mut t = root_onset + rng.uniform_range(0.0, 5.0);
    while t < w.end {
        let tpl = FAULT_LOGS[f.fault][rng.below(2)];
        logs.push(LogRecord {
            timestamp: round3(t),
            service: f.root,
            tokens: tokens(tpl),
        });
        t += rng.exponential(1.0 / 25.0);
    }
    let mut tick = root_onset;
    while tick < w.end {
        for (&s, &(onset, _)) in &f.affected {
            if tick >= onset {
                let ts = (tick + rng.uniform_range(0.0, 3.0)).min(w.end);
                logs.push(LogRecord {
                    timestamp: round3(ts),
                    service: s,
                    tokens: tokens(DEPENDENCY_LOG),
                });
            }
        }
        tick += DEPENDENCY_TICK;
    }
    logs.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp).then(a.service.cmp(&b.service)));
    logs
}

fn gen_spans(topo: &Topology, f: &Fault, w: &Window, rng: &mut SeededRng) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut start = w.start + rng.uniform_range(0.0, 20.0);
    while start < w.end - 5.0 {
        emit_span(topo, f, 0, None, round3(start), rng, &mut spans);
        start += rng.uniform_range(35.0, 55.0);
    }
    spans
}

/// Emits the span for `service` and its sampled downstream calls; returns the
/// span's duration in ms.
fn emit_span(
    topo: &Topology,
    f: &Fault,
    service: usize,
    parent: Option<usize>,
    start: f64,
    rng: &mut SeededRng,
    spans: &mut Vec<Span>,
) -> f64 {
    let id = spans.len();
    spans.push(Span {
        span_id: id,
        parent,
        service,
        start,
        duration_ms: 0.0,
        status: SpanStatus::Ok,
    });
    let mut own = topo.self_ms[service] * rng.uniform_range(0.9, 1.1);
    let mut p_err = 0.01;
    if let Some(m) = f.active(service, start) {
        own *= 1.0 + m / 4.0;
        p_err = if service == f.root && f.fault == 3 { 0.9 } else { (m / 32.0).min(0.8) };
    }
    let mut child_ms = 0.0;
    for &callee in &topo.callees[service] {
        if rng.bernoulli(0.6) {
            let child_start = round3(start + 0.001);
            child_ms += emit_span(topo, f, callee, Some(id), child_start, rng, spans);
        }
    }
    let total = own + child_ms;
    spans[id].duration_ms = round4(total);
    if rng.bernoulli(p_err) {
        spans[id].status = SpanStatus::Error;
    }
    total
}

fn gen_events(f: &Fault, w: &Window, rng: &mut SeededRng) -> Vec<Event> {
    let (onset, _) = f.affected[&f.root];
    let trigger_type = if rng.bernoulli(0.6) { f.fault } else { rng.below(EVENT_TYPES.len()) };
    let mut events = vec![Event {
        event_type: trigger_type,
        timestamp: round3((onset - rng.uniform_range(0.0, 60.0)).max(w.start)),
    }];
    if rng.bernoulli(0.3) {
        events.push(Event {
            event_type: rng.below(EVENT_TYPES.len()),
            timestamp: round3(rng.uniform_range(w.start, w.end)),
        });
    }
    events.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    events
}

fn gen_incident(topo: &Topology, id: usize, fault: usize, w: Window, rng: &mut SeededRng) -> IncidentRecord {
    let n = topo.names.len();
    let root = rng.below(n);
    let onset = w.start + rng.uniform_range(0.4, 0.5) * w.duration();
    let magnitude = rng.uniform_range(14.0, 18.0);
    let affected = propagate(topo, root, onset, magnitude, rng);
    let f = Fault { root, fault, affected };

    let metrics = gen_metrics(topo, &f, &w, rng);
    let logs = gen_logs(topo, &f, &w, rng);
    let spans = gen_spans(topo, &f, &w, rng);
    let events = gen_events(&f, &w, rng);
    let entities = (0..n)
        .map(|s| {
            let node = topo.node_of[s];
            Entity {
                service: s,
                pod: s * PODS_PER_SERVICE + rng.below(PODS_PER_SERVICE),
                node,
                region: node % REGIONS.len(),
            }
        })
        .collect();

    let mut cands: BTreeSet<Candidate> = BTreeSet::new();
    for &s in f.affected.keys() {
        for k in 0..FAULT_TYPES.len() {
            cands.insert(Candidate { service: s, fault: k });
        }
    }
    let outside: Vec<usize> = (0..n).filter(|s| !f.affected.contains_key(s)).collect();
    if !outside.is_empty() {
        for _ in 0..2 {
            cands.insert(Candidate {
                service: outside[rng.below(outside.len())],
                fault: rng.below(FAULT_TYPES.len()),
            });
        }
    }
    let candidates: Vec<Candidate> = cands.into_iter().collect();
    let truth = candidates
        .iter()
        .position(|c| *c == Candidate { service: root, fault })
        .expect("root candidate inserted above");
    IncidentRecord {
        id,
        window: w,
        logs,
        spans,
        metrics,
        entities,
        events,
        candidates,
        truth,
    }
}

/// Generates a dataset. Identical configurations yield identical datasets.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.n_services < 3 {
        return Err(Error::Invalid(format!(
            "need at least 3 services, got {}",
            cfg.n_services
        )));
    }
    if !(cfg.window_seconds > 0.0) {
        return Err(Error::Invalid("window length must be positive".into()));
    }
    let base = SeededRng::new(cfg.seed);
    let topo = build_topology(cfg.n_services, &mut base.fork(0));

    let mut faults: Vec<usize> = (0..cfg.n_incidents).map(|j| j % FAULT_TYPES.len()).collect();
    base.fork(1).shuffle(&mut faults);

    let incidents: Vec<IncidentRecord> = (0..cfg.n_incidents)
        .map(|j| {
            let start = j as f64 * 3600.0;
            let w = Window {
                start,
                end: start + cfg.window_seconds,
            };
            gen_incident(&topo, j, faults[j], w, &mut base.fork(1000 + j as u64))
        })
        .collect();

    let mut order: Vec<usize> = (0..cfg.n_incidents).collect();
    base.fork(2).shuffle(&mut order);
    let n_val = (cfg.val_fraction * cfg.n_incidents as f64).round() as usize;
    let n_test = (cfg.test_fraction * cfg.n_incidents as f64).round() as usize;
    let n_train = cfg.n_incidents.saturating_sub(n_val + n_test);
    let mut splits = Splits {
        train: order[..n_train].to_vec(),
        val: order[n_train..(n_train + n_val).min(order.len())].to_vec(),
        test: order[(n_train + n_val).min(order.len())..].to_vec(),
    };
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();

    let n = cfg.n_services;
    let manifest = Manifest {
        seed: cfg.seed,
        services: topo.names.clone(),
        call_edges: topo.edges.clone(),
        fault_types: FAULT_TYPES.iter().map(|s| s.to_string()).collect(),
        metric_names: METRIC_NAMES.iter().map(|s| s.to_string()).collect(),
        pods: (0..n * PODS_PER_SERVICE)
            .map(|p| format!("{}-pod-{}", topo.names[p / PODS_PER_SERVICE], p % PODS_PER_SERVICE))
            .collect(),
        nodes: (0..topo.n_nodes).map(|k| format!("node-{k}")).collect(),
        regions: REGIONS.iter().map(|s| s.to_string()).collect(),
        event_types: EVENT_TYPES.iter().map(|s| s.to_string()).collect(),
        window_seconds: cfg.window_seconds,
        n_incidents: cfg.n_incidents,
        splits,
    };
    Ok(Dataset { manifest, incidents })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let a = synth_generate(&SynthConfig::new(7, 6, 5)).unwrap();
        let b = synth_generate(&SynthConfig::new(7, 6, 5)).unwrap();
        assert_eq!(a.to_ndjson().unwrap(), b.to_ndjson().unwrap());
        let c = synth_generate(&SynthConfig::new(8, 6, 5)).unwrap();
        assert_ne!(a.to_ndjson().unwrap(), c.to_ndjson().unwrap());
    }

    #[test]
    fn too_few_services_rejected() {
        assert!(synth_generate(&SynthConfig::new(1, 2, 1)).is_err());
    }

    #[test]
    fn topology_is_a_rooted_dag() {
        let ds = synth_generate(&SynthConfig::new(4, 10, 1)).unwrap();
        let m = &ds.manifest;
        assert!(m.call_edges.iter().all(|&(u, v)| u < v));
        for v in 1..m.services.len() {
            assert!(m.call_edges.iter().any(|&(_, c)| c == v), "service {v} has no caller");
        }
    }

    #[test]
    fn truth_present_and_labels_balanced() {
        let ds = synth_generate(&SynthConfig::new(11, 8, 100)).unwrap();
        let mut counts = [0usize; 5];
        for inc in &ds.incidents {
            let c = inc.truth_candidate();
            counts[c.fault] += 1;
            assert!(inc.candidates.contains(&c));
        }
        assert!(counts.iter().all(|&k| (14..=26).contains(&k)), "{counts:?}");
    }

    #[test]
    fn splits_cover_all_incidents() {
        let ds = synth_generate(&SynthConfig::new(5, 8, 200)).unwrap();
        let s = &ds.manifest.splits;
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (160, 20, 20));
    }
}
