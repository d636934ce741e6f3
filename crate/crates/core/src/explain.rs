//! Per-incident explanation: learned hyperedges, attention, routing and
//! pooling weights, ranked candidates, and a DOT drawing of the hypergraph.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datapipe::Manifest;
use crate::error::Result;
use crate::fusion::MODALITIES;
use crate::hypergat::TAU_END;
use crate::model::{IncidentFeatures, Model};
use crate::tensor::{ParamStore, Tape};

/// Membership above this value is drawn in the DOT graph.
pub const DRAW_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperedgeExplanation {
    pub members: Vec<usize>,
    pub soft_values: Vec<f64>,
    pub logit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionEntry {
    pub layer: usize,
    pub vertex: usize,
    pub hyperedge: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub service: String,
    pub fault: String,
    pub score: f64,
    pub probability: f64,
    pub is_truth: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub incident_id: usize,
    pub hyperedges: Vec<HyperedgeExplanation>,
    pub attention: Vec<AttentionEntry>,
    /// Estimated onset per service, seconds after the window start.
    pub onsets: BTreeMap<String, f64>,
    /// Modality routing weights, `routing[i][j]` from modality `i` to `j`.
    pub routing: Vec<Vec<f64>>,
    pub pooling: BTreeMap<String, Vec<f64>>,
    pub modalities: Vec<String>,
    pub velocity: f64,
    pub acceleration: f64,
    pub ranking: Vec<RankedCandidate>,
}

fn rows(values: &[f64], cols: usize) -> Vec<Vec<f64>> {
    values.chunks(cols).map(<[f64]>::to_vec).collect()
}

fn name(list: &[String], i: usize, kind: &str) -> String {
    list.get(i).cloned().unwrap_or_else(|| format!("{kind}-{i}"))
}

/// Evaluation-mode explanation of one incident.
pub fn explain(model: &Model, store: &ParamStore, manifest: &Manifest, f: &IncidentFeatures) -> Result<Explanation> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let fwd = model.forward(&tape, &bound, store, f, TAU_END, None)?;
    let inc = fwd.incidence.value();
    let k = f.hyperedges.len();
    let logits = fwd.hyper_logits.value();
    let hyperedges = f
        .hyperedges
        .iter()
        .enumerate()
        .map(|(e, c)| HyperedgeExplanation {
            members: c.members.clone(),
            soft_values: c.members.iter().map(|&v| inc.data()[v * k + e]).collect(),
            logit: logits.data()[e],
        })
        .collect();
    let mut attention = Vec::new();
    for (layer, alpha) in fwd.hyper_attention.iter().enumerate() {
        let a = alpha.value();
        for v in 0..a.rows() {
            for e in 0..k {
                let x = a.data()[v * k + e];
                if x > 0.0 {
                    attention.push(AttentionEntry {
                        layer,
                        vertex: v,
                        hyperedge: e,
                        alpha: x,
                    });
                }
            }
        }
    }
    let onsets = f
        .onsets
        .iter()
        .enumerate()
        .map(|(s, o)| (name(&manifest.services, s, "service"), o * f.duration))
        .collect();
    let routing = rows(fwd.routing.value().data(), MODALITIES.len());
    let pooling = MODALITIES
        .iter()
        .zip(&fwd.pooling)
        .map(|(m, p)| (m.to_string(), p.value().data().to_vec()))
        .collect();
    let scores = fwd.logits.value();
    let mut ranking: Vec<(usize, f64)> = scores.data().iter().copied().enumerate().collect();
    ranking.sort_by(|a, b| {
        b.1.total_cmp(&a.1).then_with(|| {
            let (ca, cb) = (f.candidates[a.0], f.candidates[b.0]);
            (ca.service, ca.fault).cmp(&(cb.service, cb.fault))
        })
    });
    let ranking = ranking
        .into_iter()
        .map(|(i, s)| RankedCandidate {
            service: name(&manifest.services, f.candidates[i].service, "service"),
            fault: name(&manifest.fault_types, f.candidates[i].fault, "fault"),
            score: s,
            probability: 1.0 / (1.0 + (-s).exp()),
            is_truth: i == f.truth,
        })
        .collect();
    Ok(Explanation {
        incident_id: f.id,
        hyperedges,
        attention,
        onsets,
        routing,
        pooling,
        modalities: MODALITIES.iter().map(|m| m.to_string()).collect(),
        velocity: fwd.velocity,
        acceleration: fwd.acceleration,
        ranking,
    })
}

/// Bipartite DOT graph: service vertices (ellipses) linked to hyperedge
/// nodes (boxes) wherever the soft membership exceeds [`DRAW_THRESHOLD`].
pub fn to_dot(ex: &Explanation, services: &[String]) -> String {
    let mut out = String::from("graph hypergraph {\n  node [shape=ellipse];\n");
    let mut used = std::collections::BTreeSet::new();
    let mut edges = String::new();
    for (e, h) in ex.hyperedges.iter().enumerate() {
        let kept: Vec<(usize, f64)> = h
            .members
            .iter()
            .zip(&h.soft_values)
            .filter(|(_, &s)| s > DRAW_THRESHOLD)
            .map(|(&v, &s)| (v, s))
            .collect();
        if kept.is_empty() {
            continue;
        }
        let _ = writeln!(out, "  e{e} [shape=box, label=\"h{e}\"];");
        for (v, s) in kept {
            used.insert(v);
            let _ = writeln!(edges, "  v{v} -- e{e} [label=\"{s:.3}\"];");
        }
    }
    for v in used {
        let label = name(services, v, "service").replace('"', "'");
        let _ = writeln!(out, "  v{v} [label=\"{label}\"];");
    }
    out.push_str(&edges);
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Explanation {
        Explanation {
            incident_id: 0,
            hyperedges: vec![
                HyperedgeExplanation {
                    members: vec![0, 1],
                    soft_values: vec![0.9, 0.2],
                    logit: 1.0,
                },
                HyperedgeExplanation {
                    members: vec![1, 2],
                    soft_values: vec![0.1, 0.3],
                    logit: -1.0,
                },
            ],
            attention: vec![],
            onsets: BTreeMap::new(),
            routing: vec![],
            pooling: BTreeMap::new(),
            modalities: vec![],
            velocity: 0.0,
            acceleration: 0.0,
            ranking: vec![],
        }
    }

    #[test]
    fn dot_keeps_only_confident_memberships() {
        let dot = to_dot(&toy(), &["a".into(), "b".into(), "c".into()]);
        assert!(dot.contains("v0 -- e0"));
        assert!(!dot.contains("v1 -- e0"));
        assert!(!dot.contains("e1"));
        assert!(dot.starts_with("graph hypergraph {") && dot.trim_end().ends_with('}'));
    }
}
