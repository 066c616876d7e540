//! Named parameter storage shared by every module of the model.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LoadError {
    #[error("checkpoint is missing parameter `{0}`")]
    MissingKey(String),
    #[error("parameter `{name}` has shape {found:?} in checkpoint but {expected:?} in model")]
    ShapeMismatch { name: String, expected: (usize, usize), found: (usize, usize) },
    #[error("checkpoint contains unknown parameter `{0}`")]
    UnexpectedKey(String),
}

/// Outcome of a non-strict load.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub missing: Vec<String>,
    pub unexpected: Vec<String>,
}

/// Parameters keyed by dot-separated path, e.g. `image.blocks.0.attn.q.weight`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name; parameter names are fixed by model structure.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn add_normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces parameter values from `(name, tensor)` pairs.
    ///
    /// Shape mismatches are always rejected. With `strict`, any missing or
    /// unknown name is an error; otherwise missing parameters keep their
    /// current values and unknown names are reported and skipped. Nothing is
    /// modified unless the whole set validates.
    pub fn load<I>(&mut self, entries: I, strict: bool) -> Result<LoadReport, LoadError>
    where
        I: IntoIterator<Item = (String, Tensor)>,
    {
        let mut staged: Vec<(ParamId, Tensor)> = Vec::new();
        let mut report = LoadReport::default();
        for (name, value) in entries {
            match self.id(&name) {
                Some(id) => {
                    let expected = self.values[id.0].shape();
                    if value.shape() != expected {
                        return Err(LoadError::ShapeMismatch { name, expected, found: value.shape() });
                    }
                    report.loaded.push(name);
                    staged.push((id, value));
                }
                None if strict => return Err(LoadError::UnexpectedKey(name)),
                None => report.unexpected.push(name),
            }
        }
        for name in &self.names {
            if !report.loaded.iter().any(|n| n == name) {
                if strict {
                    return Err(LoadError::MissingKey(name.to_string()));
                }
                report.missing.push(name.clone());
            }
        }
        for (id, value) in staged {
            self.values[id.0] = value;
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::zeros(2, 3));
        s.add("b.bias", Tensor::zeros(1, 3));
        s
    }

    #[test]
    fn strict_load_rejects_missing_and_unknown() {
        let mut s = store();
        let err = s.load(vec![("a.weight".into(), Tensor::filled(2, 3, 1.0))], true).unwrap_err();
        assert_eq!(err, LoadError::MissingKey("b.bias".into()));
        assert_eq!(s.get(s.id("a.weight").unwrap()).sum(), 0.0, "failed load must not modify");

        let err = s.load(vec![("zzz".into(), Tensor::zeros(1, 1))], true).unwrap_err();
        assert_eq!(err, LoadError::UnexpectedKey("zzz".into()));
    }

    #[test]
    fn shape_mismatch_names_parameter() {
        let mut s = store();
        let err = s.load(vec![("b.bias".into(), Tensor::zeros(1, 4))], false).unwrap_err();
        assert!(alloc::format!("{err}").contains("b.bias"));
    }

    #[test]
    fn partial_load_keeps_missing_values() {
        let mut s = store();
        let report = s.load(vec![("a.weight".into(), Tensor::filled(2, 3, 1.0))], false).unwrap();
        assert_eq!(report.missing, vec![String::from("b.bias")]);
        assert_eq!(s.get(s.id("a.weight").unwrap()).sum(), 6.0);
    }
}
