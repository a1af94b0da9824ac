use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Named tensors in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensors(vec![name.to_string()]))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Copies every tensor whose name starts with `prefix` from `other`.
    pub fn merge_prefix(&mut self, other: &ParamSet<T>, prefix: &str) {
        for (k, v) in other.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// Errors naming every tensor from `required` that is absent.
    pub fn require(&self, required: &[String]) -> Result<()> {
        let missing: Vec<String> =
            required.iter().filter(|n| !self.contains(n)).cloned().collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingTensors(missing))
        }
    }
}

impl<T: Real> FromIterator<(String, Tensor<T>)> for ParamSet<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self { tensors: iter.into_iter().collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f32,
    pub dropout_keep_probability: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { learning_rate: 0.02, dropout_keep_probability: 0.5 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.dropout_keep_probability > 0.0 && self.dropout_keep_probability <= 1.0) {
            return Err(Error::Argument(format!(
                "dropout keep probability must be in (0, 1], got {}",
                self.dropout_keep_probability
            )));
        }
        Ok(())
    }
}

/// Plain SGD: `θ ← θ − lr·scale·∇θ` for every gradient whose name passes `trainable`.
pub fn sgd_step(
    params: &mut ParamSet<f32>,
    grads: &[(String, Tensor<f32>)],
    learning_rate: f32,
    scale: f32,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    for (name, g) in grads {
        if !trainable(name) {
            continue;
        }
        g.check_finite()?;
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensors(vec![name.clone()]))?;
        p.axpy(-learning_rate * scale, g)?;
        p.check_finite()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new([2], vec![1.0, -1.0]).unwrap());
        p.insert("frozen", Tensor::scalar(3.0));
        let grads = vec![
            ("w".to_string(), Tensor::new([2], vec![0.5, -0.5]).unwrap()),
            ("frozen".to_string(), Tensor::scalar(1.0)),
        ];
        sgd_step(&mut p, &grads, 0.1, 1.0, |n| n != "frozen").unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.95, -0.95]);
        assert_eq!(p.get("frozen").unwrap().data(), &[3.0]);
    }

    #[test]
    fn config_validation() {
        assert!(SgdConfig::default().validate().is_ok());
        assert!(SgdConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(SgdConfig { dropout_keep_probability: 0.0, ..Default::default() }
            .validate()
            .is_err());
    }

    #[test]
    fn require_names_missing() {
        let p: ParamSet<f32> = ParamSet::new();
        match p.require(&["a".into(), "b".into()]) {
            Err(Error::MissingTensors(m)) => assert_eq!(m, vec!["a", "b"]),
            other => panic!("unexpected {other:?}"),
        }
    }
}
