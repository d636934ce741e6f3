//! Categorical embeddings for entities and events.

use crate::datapipe::{Entity, Event};
use crate::error::Result;
use crate::latentode::{frozen_frequencies, time_encoding};
use crate::tensor::{Bound, ParamId, ParamStore, SeededRng, Tape, Tensor, Var};

/// Lookup table with one extra row, at index `vocab`, for unknown ids.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub id: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut SeededRng) -> Self {
        let data = (0..(vocab + 1) * dim).map(|_| 0.1 * rng.normal()).collect();
        let id = store.add(name, Tensor::new(vec![vocab + 1, dim], data).expect("shape matches data"), true);
        Self { id, vocab, dim }
    }

    pub fn unk(&self) -> usize {
        self.vocab
    }

    /// Maps out-of-vocabulary ids to the unknown row.
    pub fn clamp(&self, id: usize) -> usize {
        if id < self.vocab {
            id
        } else {
            self.vocab
        }
    }

    pub fn lookup<'t>(&self, bound: &Bound<'t>, ids: &[usize]) -> Result<Var<'t>> {
        let rows: Vec<usize> = ids.iter().map(|&i| self.clamp(i)).collect();
        bound.get(self.id).index_rows(&rows)
    }
}

/// Entity token = sum of its service, pod, node and region embeddings.
#[derive(Clone, Debug)]
pub struct EntityEncoder {
    pub service: EmbeddingTable,
    pub pod: EmbeddingTable,
    pub node: EmbeddingTable,
    pub region: EmbeddingTable,
}

impl EntityEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        vocab: [usize; 4],
        dim: usize,
        rng: &mut SeededRng,
    ) -> Self {
        Self {
            service: EmbeddingTable::new(store, &format!("{prefix}.service"), vocab[0], dim, rng),
            pod: EmbeddingTable::new(store, &format!("{prefix}.pod"), vocab[1], dim, rng),
            node: EmbeddingTable::new(store, &format!("{prefix}.node"), vocab[2], dim, rng),
            region: EmbeddingTable::new(store, &format!("{prefix}.region"), vocab[3], dim, rng),
        }
    }

    /// `[N, dim]`, one row per entity.
    pub fn encode<'t>(&self, bound: &Bound<'t>, entities: &[Entity]) -> Result<Var<'t>> {
        let col = |f: fn(&Entity) -> usize| entities.iter().map(f).collect::<Vec<_>>();
        self.service
            .lookup(bound, &col(|e| e.service))?
            .add(self.pod.lookup(bound, &col(|e| e.pod))?)?
            .add(self.node.lookup(bound, &col(|e| e.node))?)?
            .add(self.region.lookup(bound, &col(|e| e.region))?)
    }
}

/// Event token = type embedding + `[cos 2πBt, sin 2πBt]` at the event time
/// expressed as a fraction of the window.
#[derive(Clone, Debug)]
pub struct EventEncoder {
    pub kind: EmbeddingTable,
    pub freqs: ParamId,
}

impl EventEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, vocab: usize, dim: usize, rng: &mut SeededRng) -> Self {
        assert!(dim % 2 == 0, "event token width must be even");
        Self {
            kind: EmbeddingTable::new(store, &format!("{prefix}.type"), vocab, dim, rng),
            freqs: frozen_frequencies(store, &format!("{prefix}.B"), dim / 2, rng),
        }
    }

    pub fn encode<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, events: &[Event], times: &[f64]) -> Result<Var<'t>> {
        let freqs = bound.get(self.freqs).value();
        let rows: Vec<Vec<f64>> = times.iter().map(|&t| time_encoding(t, freqs.data())).collect();
        let types: Vec<usize> = events.iter().map(|e| e.event_type).collect();
        let enc = Tensor::from_rows(&rows)?;
        self.kind.lookup(bound, &types)?.add(tape.constant(enc))
    }
}
