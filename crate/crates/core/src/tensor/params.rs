use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Gradients, SeededRng, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One entry of the checkpoint document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named model weights. Frozen entries are saved with the rest but are bound
/// as constants and never updated by the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "parameter {name} registered twice"
        );
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.trainable.push(trainable);
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    /// Weight matrix `[fan_in, fan_out]`, uniform in ±sqrt(6 / (fan_in + fan_out)).
    pub fn glorot(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> ParamId {
        self.glorot_shaped(name, &[fan_in, fan_out], fan_in, fan_out, rng)
    }

    pub fn glorot_shaped(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut SeededRng,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_range(-limit, limit)).collect();
        self.add(name, Tensor::from_parts(shape.to_vec(), data), true)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape), true)
    }

    pub fn frozen(&mut self, name: &str, value: Tensor) -> ParamId {
        self.add(name, value, false)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.ids()
            .filter(|&id| self.is_trainable(id))
            .map(|id| self.value(id).len())
            .sum()
    }

    /// Records every parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars = self
            .values
            .iter()
            .zip(&self.trainable)
            .map(|(v, &t)| if t { tape.leaf(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        Bound { vars }
    }

    pub fn to_records(&self) -> BTreeMap<String, TensorRecord> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| {
                (
                    n.clone(),
                    TensorRecord {
                        shape: v.shape().to_vec(),
                        data: v.data().to_vec(),
                    },
                )
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_records())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn read_records(path: &Path) -> Result<BTreeMap<String, TensorRecord>> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: format!("{}: {e}", path.display()),
        })
    }

    /// Overwrites every value from `records`. Names and shapes must match the
    /// store exactly.
    pub fn load_records(&mut self, records: &BTreeMap<String, TensorRecord>) -> Result<()> {
        if let Some(extra) = records.keys().find(|k| !self.index.contains_key(*k)) {
            return Err(Error::Config(format!("checkpoint has unknown parameter {extra}")));
        }
        for (i, name) in self.names.iter().enumerate() {
            let rec = records
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter {name}")))?;
            if rec.shape != self.values[i].shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?} in checkpoint, model expects {:?}",
                    rec.shape,
                    self.values[i].shape()
                )));
            }
            self.values[i] = Tensor::new(rec.shape.clone(), rec.data.clone())?;
        }
        Ok(())
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradient for every parameter, in store order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get(v)).collect()
    }
}
