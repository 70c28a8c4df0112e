use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Arc<Tensor>,
}

/// Ordered, named collection of trainable tensors.
///
/// Cloning is cheap: values are shared until one side is updated.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            value: Arc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = self.get(id);
        if cur.shape() != value.shape() {
            return Err(Error::shape(
                "param set",
                format!("{} has shape {:?}, got {:?}", self.name(id), cur.shape(), value.shape()),
            ));
        }
        self.params[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalars across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: Checkpoint::FORMAT.to_string(),
            version: Checkpoint::VERSION,
            params: self
                .params
                .iter()
                .map(|p| CheckpointRecord {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Overwrites every parameter from `ckpt`; names, order and shapes must agree.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.params.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model has {}",
                ckpt.params.len(),
                self.params.len()
            )));
        }
        for (i, rec) in ckpt.params.iter().enumerate() {
            if rec.name != self.params[i].name {
                return Err(Error::Config(format!(
                    "checkpoint parameter {i} is {}, expected {}",
                    rec.name, self.params[i].name
                )));
            }
            let t = Tensor::new(rec.shape.clone(), rec.values.clone())?;
            self.set(ParamId(i), t)?;
        }
        Ok(())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut store = ParamStore::new();
        for rec in &ckpt.params {
            store.add(rec.name.clone(), Tensor::new(rec.shape.clone(), rec.values.clone())?);
        }
        Ok(store)
    }
}

/// Serialized parameter set: ordered `(name, shape, values)` records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub params: Vec<CheckpointRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub const FORMAT: &'static str = "xref-checkpoint";
    pub const VERSION: u32 = 1;

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Parse {
            file: origin.to_path_buf(),
            line: e.line(),
            field: None,
            message: e.to_string(),
        })?;
        if ckpt.format != Self::FORMAT || ckpt.version != Self::VERSION {
            return Err(Error::Parse {
                file: origin.to_path_buf(),
                line: 1,
                field: Some("format".into()),
                message: format!("unsupported checkpoint {} v{}", ckpt.format, ckpt.version),
            });
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.map.insert(id, grad);
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor) {
        match self.map.get_mut(&id) {
            Some(g) => g.add_assign(grad),
            None => {
                self.map.insert(id, grad.clone());
            }
        }
    }

    /// Adds every gradient of `other` into `self`.
    pub fn merge(&mut self, other: &Gradients) {
        for (&id, g) in &other.map {
            self.accumulate(id, g);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.map.values_mut() {
            g.scale_in_place(c);
        }
    }

    /// Keeps only the listed parameters.
    pub fn retain(&mut self, keep: impl Fn(ParamId) -> bool) {
        self.map.retain(|&id, _| keep(id));
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.map.iter().map(|(&id, g)| (id, g))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::vector(vec![1.0, 2.5]));
        store.add("b", Tensor::matrix(1, 2, vec![-0.125, 3.0]).unwrap());
        let ck = store.to_checkpoint();
        let text = ck.to_json();
        let back = Checkpoint::from_json(&text, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        let mut other = ParamStore::from_checkpoint(&back).unwrap();
        other.load_checkpoint(&ck).unwrap();
        assert_eq!(other.get(ParamId(1)), store.get(ParamId(1)));

        let mut wrong = ParamStore::new();
        wrong.add("a", Tensor::vector(vec![0.0, 0.0]));
        assert!(wrong.load_checkpoint(&ck).is_err());
    }

    #[test]
    fn clone_shares_until_write() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0]));
        let snap = store.clone();
        store.get_mut(id).data_mut()[0] = 5.0;
        assert_eq!(snap.get(id).item(), 1.0);
        assert_eq!(store.get(id).item(), 5.0);
    }
}
