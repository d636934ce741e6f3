//! Service graphs observed in an incident and the candidate hyperedges drawn
//! from them.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::datapipe::{IncidentRecord, Sample};

/// Services sharing at least this many templates within one bucket count
/// (summed over buckets) are linked.
pub const COOCCUR_THRESHOLD: usize = 5;
pub const COOCCUR_BUCKET: f64 = 30.0;
/// Robust z-score above which a metric sample counts as anomalous.
pub const ONSET_Z: f64 = 3.0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ServiceGraph {
    pub n_services: usize,
    /// `(caller, callee) -> number of spans`.
    pub call_edges: BTreeMap<(usize, usize), f64>,
    /// `(a, b)` with `a < b` -> shared template count.
    pub cooccur_edges: BTreeMap<(usize, usize), f64>,
}

impl ServiceGraph {
    pub fn new(n_services: usize) -> Self {
        Self {
            n_services,
            ..Default::default()
        }
    }

    pub fn add_call(&mut self, caller: usize, callee: usize, weight: f64) {
        if caller != callee {
            *self.call_edges.entry((caller, callee)).or_default() += weight;
        }
    }

    pub fn add_cooccur(&mut self, a: usize, b: usize, weight: f64) {
        if a != b {
            *self.cooccur_edges.entry((a.min(b), a.max(b))).or_default() += weight;
        }
    }

    /// Call edges from span parent links and co-occurrence edges from log
    /// templates emitted by several services in the same 30 s bucket.
    pub fn from_incident(inc: &IncidentRecord, n_services: usize) -> Self {
        let mut g = Self::new(n_services);
        let service_of: HashMap<usize, usize> = inc.spans.iter().map(|s| (s.span_id, s.service)).collect();
        for span in &inc.spans {
            if let Some(parent) = span.parent.and_then(|p| service_of.get(&p)) {
                g.add_call(*parent, span.service, 1.0);
            }
        }
        let mut buckets: BTreeMap<(i64, String), BTreeSet<usize>> = BTreeMap::new();
        for log in &inc.logs {
            let b = ((log.timestamp - inc.window.start) / COOCCUR_BUCKET).floor() as i64;
            buckets.entry((b, log.tokens.join(" "))).or_default().insert(log.service);
        }
        let mut shared: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for services in buckets.values() {
            let s: Vec<usize> = services.iter().copied().collect();
            for i in 0..s.len() {
                for j in i + 1..s.len() {
                    *shared.entry((s[i], s[j])).or_default() += 1;
                }
            }
        }
        for ((a, b), n) in shared {
            if n >= COOCCUR_THRESHOLD {
                g.add_cooccur(a, b, n as f64);
            }
        }
        g
    }

    fn neighbours(&self, v: usize) -> BTreeSet<usize> {
        self.call_edges
            .keys()
            .filter_map(|&(a, b)| {
                if a == v {
                    Some(b)
                } else if b == v {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    /// Sum of call and co-occurrence weights over all member pairs.
    pub fn weight(&self, members: &[usize]) -> f64 {
        let mut w = 0.0;
        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                w += self.call_edges.get(&(a, b)).copied().unwrap_or(0.0);
                w += self.call_edges.get(&(b, a)).copied().unwrap_or(0.0);
                w += self.cooccur_edges.get(&(a.min(b), a.max(b))).copied().unwrap_or(0.0);
            }
        }
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateSource {
    CallMotif,
    CooccurClique,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateHyperedge {
    /// Sorted, distinct vertex ids.
    pub members: Vec<usize>,
    pub source: CandidateSource,
}

fn subsets(items: &[usize], k: usize, start: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if current.len() == k {
        out.push(current.clone());
        return;
    }
    for i in start..items.len() {
        current.push(items[i]);
        subsets(items, k, i + 1, current, out);
        current.pop();
    }
}

/// Candidate hyperedges: every call edge, each vertex joined with 2 or more
/// of its call neighbours (up to `max_size` members in total) and every
/// co-occurrence triangle. Duplicates are merged, then the list is ordered by
/// descending total edge weight (ties by member list) and cut to `max_count`.
pub fn generate_candidates(graph: &ServiceGraph, max_size: usize, max_count: usize) -> Vec<CandidateHyperedge> {
    assert!(max_size >= 2, "hyperedges need at least two members");
    let mut seen: BTreeMap<Vec<usize>, CandidateSource> = BTreeMap::new();
    let mut add = |mut m: Vec<usize>, src: CandidateSource| {
        m.sort_unstable();
        seen.entry(m).or_insert(src);
    };
    for &(a, b) in graph.call_edges.keys() {
        add(vec![a, b], CandidateSource::CallMotif);
    }
    for v in 0..graph.n_services {
        let nb: Vec<usize> = graph.neighbours(v).into_iter().collect();
        for k in 2..max_size {
            let mut out = Vec::new();
            subsets(&nb, k, 0, &mut Vec::new(), &mut out);
            for mut s in out {
                s.push(v);
                add(s, CandidateSource::CallMotif);
            }
        }
    }
    if max_size >= 3 {
        let pairs: BTreeSet<(usize, usize)> = graph.cooccur_edges.keys().copied().collect();
        for &(a, b) in &pairs {
            for c in b + 1..graph.n_services {
                if pairs.contains(&(a, c)) && pairs.contains(&(b, c)) {
                    add(vec![a, b, c], CandidateSource::CooccurClique);
                }
            }
        }
    }
    let mut cands: Vec<(f64, CandidateHyperedge)> = seen
        .into_iter()
        .map(|(members, source)| (graph.weight(&members), CandidateHyperedge { members, source }))
        .collect();
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.members.cmp(&b.1.members)));
    cands.truncate(max_count);
    cands.into_iter().map(|(_, c)| c).collect()
}

/// Mean time (seconds after `window_start`) of the first three samples at
/// which any of a service's normalized metrics exceeds `|z| > 3`; services
/// without an exceedance get `window_end`.
pub fn estimate_onsets(series: &[Vec<&[Sample]>], window_start: f64, window_end: f64) -> Vec<f64> {
    series
        .iter()
        .map(|metrics| {
            let mut times: Vec<f64> = metrics
                .iter()
                .flat_map(|s| s.iter())
                .filter(|(_, v)| v.is_some_and(|x| x.abs() > ONSET_Z))
                .map(|(t, _)| *t)
                .collect();
            times.sort_by(f64::total_cmp);
            times.dedup();
            let first = &times[..times.len().min(3)];
            if first.is_empty() {
                window_end - window_start
            } else {
                first.iter().sum::<f64>() / first.len() as f64 - window_start
            }
        })
        .collect()
}
