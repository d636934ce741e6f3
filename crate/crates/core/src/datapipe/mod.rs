//! Incident records, dataset files, preprocessing and the synthetic generator.
//!
//! A dataset file is newline-delimited JSON: the first line is the
//! [`Manifest`], every following line one [`IncidentRecord`]. Unknown fields
//! are rejected.

mod preprocess;
mod synth;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use preprocess::{impute, mad_normalize, mad_stats, MadStats, MAD_EPS, MAD_SCALE};
pub use synth::{synth_generate, SynthConfig, FAULT_TYPES, METRIC_NAMES};

/// Metric sample: timestamp in seconds and an optional value (`None` = missing).
pub type Sample = (f64, Option<f64>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub start: f64,
    pub end: f64,
}

impl Window {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t <= self.end
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub timestamp: f64,
    pub service: usize,
    /// Pre-split tokens with numbers and identifiers masked to placeholders.
    pub tokens: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanStatus {
    Ok,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Span {
    pub span_id: usize,
    pub parent: Option<usize>,
    pub service: usize,
    pub start: f64,
    pub duration_ms: f64,
    pub status: SpanStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSeries {
    pub service: usize,
    /// Index into [`Manifest::metric_names`].
    pub metric: usize,
    pub samples: Vec<Sample>,
}

/// Categorical attributes of one service instance. Ids index the manifest
/// vocabularies; out-of-range ids are treated as unknown by the encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entity {
    pub service: usize,
    pub pod: usize,
    pub node: usize,
    pub region: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    pub event_type: usize,
    pub timestamp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub service: usize,
    pub fault: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncidentRecord {
    pub id: usize,
    pub window: Window,
    pub logs: Vec<LogRecord>,
    pub spans: Vec<Span>,
    pub metrics: Vec<MetricSeries>,
    pub entities: Vec<Entity>,
    pub events: Vec<Event>,
    pub candidates: Vec<Candidate>,
    /// Index of the true root cause in `candidates`.
    pub truth: usize,
}

impl IncidentRecord {
    pub fn truth_candidate(&self) -> Candidate {
        self.candidates[self.truth]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub services: Vec<String>,
    /// Static call topology, caller first.
    pub call_edges: Vec<(usize, usize)>,
    pub fault_types: Vec<String>,
    pub metric_names: Vec<String>,
    pub pods: Vec<String>,
    pub nodes: Vec<String>,
    pub regions: Vec<String>,
    pub event_types: Vec<String>,
    pub window_seconds: f64,
    pub n_incidents: usize,
    pub splits: Splits,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub incidents: Vec<IncidentRecord>,
}

impl Dataset {
    /// Incidents whose id is listed under any of `splits`, in file order.
    pub fn select(&self, splits: &[Split]) -> Vec<&IncidentRecord> {
        let keep: std::collections::HashSet<usize> = splits
            .iter()
            .flat_map(|&s| self.manifest.splits.ids(s).iter().copied())
            .collect();
        self.incidents.iter().filter(|i| keep.contains(&i.id)).collect()
    }

    pub fn find(&self, id: usize) -> Option<&IncidentRecord> {
        self.incidents.iter().find(|i| i.id == id)
    }

    pub fn to_ndjson(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.manifest)?;
        out.push('\n');
        for inc in &self.incidents {
            out.push_str(&serde_json::to_string(inc)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path)?;
        file.write_all(self.to_ndjson()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_ndjson(&text)
    }

    pub fn from_ndjson(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty dataset file".into(),
        })?;
        let manifest: Manifest = serde_json::from_str(first).map_err(|e| Error::Parse {
            line: 1,
            msg: format!("manifest: {e}"),
        })?;
        let mut incidents = Vec::new();
        for (i, line) in lines {
            let inc: IncidentRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            validate_incident(&manifest, &inc).map_err(|msg| Error::Parse { line: i + 1, msg })?;
            incidents.push(inc);
        }
        if incidents.len() != manifest.n_incidents {
            return Err(Error::Parse {
                line: incidents.len() + 2,
                msg: format!(
                    "manifest announces {} incidents, file has {}",
                    manifest.n_incidents,
                    incidents.len()
                ),
            });
        }
        validate_splits(&manifest, &incidents).map_err(|msg| Error::Parse { line: 1, msg })?;
        Ok(Dataset { manifest, incidents })
    }
}

fn validate_incident(m: &Manifest, inc: &IncidentRecord) -> std::result::Result<(), String> {
    let n_svc = m.services.len();
    let w = &inc.window;
    if !(w.end > w.start) {
        return Err(format!("incident {}: empty window", inc.id));
    }
    let check_t = |t: f64, what: &str| {
        if w.contains(t) {
            Ok(())
        } else {
            Err(format!("incident {}: {what} timestamp {t} outside window", inc.id))
        }
    };
    let check_svc = |s: usize| {
        if s < n_svc {
            Ok(())
        } else {
            Err(format!("incident {}: unknown service id {s}", inc.id))
        }
    };
    for log in &inc.logs {
        check_t(log.timestamp, "log")?;
        check_svc(log.service)?;
        if log.tokens.is_empty() {
            return Err(format!("incident {}: log with no tokens", inc.id));
        }
    }
    let span_ids: std::collections::HashSet<usize> = inc.spans.iter().map(|s| s.span_id).collect();
    if span_ids.len() != inc.spans.len() {
        return Err(format!("incident {}: duplicate span ids", inc.id));
    }
    for span in &inc.spans {
        check_t(span.start, "span")?;
        check_svc(span.service)?;
        if let Some(p) = span.parent {
            if !span_ids.contains(&p) || p == span.span_id {
                return Err(format!("incident {}: span {} has invalid parent", inc.id, span.span_id));
            }
        }
    }
    for series in &inc.metrics {
        check_svc(series.service)?;
        if series.metric >= m.metric_names.len() {
            return Err(format!("incident {}: unknown metric id {}", inc.id, series.metric));
        }
        for pair in series.samples.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(format!("incident {}: metric timestamps not increasing", inc.id));
            }
        }
        for s in &series.samples {
            check_t(s.0, "metric")?;
        }
    }
    for ev in &inc.events {
        check_t(ev.timestamp, "event")?;
    }
    for c in &inc.candidates {
        check_svc(c.service)?;
        if c.fault >= m.fault_types.len() {
            return Err(format!("incident {}: unknown fault id {}", inc.id, c.fault));
        }
    }
    if inc.truth >= inc.candidates.len() {
        return Err(format!("incident {}: truth index out of range", inc.id));
    }
    Ok(())
}

fn validate_splits(m: &Manifest, incidents: &[IncidentRecord]) -> std::result::Result<(), String> {
    let mut all: Vec<usize> = m
        .splits
        .train
        .iter()
        .chain(&m.splits.val)
        .chain(&m.splits.test)
        .copied()
        .collect();
    all.sort_unstable();
    let mut ids: Vec<usize> = incidents.iter().map(|i| i.id).collect();
    ids.sort_unstable();
    if all != ids {
        return Err("splits are not a disjoint cover of the incident ids".into());
    }
    Ok(())
}
