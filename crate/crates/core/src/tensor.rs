//! Parameter tensors and the name-keyed collection exchanged between clients
//! and the server.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} holds {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Full parameter set of one model. Iteration is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensorMap {
    tensors: BTreeMap<String, Tensor>,
}

impl NamedTensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
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

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Same names and per-name shapes.
    pub fn same_structure(&self, other: &NamedTensorMap) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape == tb.shape)
    }

    pub fn check_structure(&self, other: &NamedTensorMap) -> Result<()> {
        if self.same_structure(other) {
            Ok(())
        } else {
            Err(Error::InvalidShape(
                "parameter maps differ in names or shapes".into(),
            ))
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape.clone())))
                .collect(),
        }
    }

    /// Every value in name order, flattened.
    pub fn flat_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.values().flat_map(|t| t.data.iter().copied())
    }

    /// 64-bit FNV-1a over names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::checksum::Fnv64::new();
        for (name, t) in &self.tensors {
            h.write(name.as_bytes());
            for d in &t.shape {
                h.write(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn max_abs_diff(&self, other: &NamedTensorMap) -> f64 {
        assert!(self.same_structure(other));
        self.flat_values()
            .zip(other.flat_values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl FromIterator<(String, Tensor)> for NamedTensorMap {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_is_lexicographic() {
        let mut m = NamedTensorMap::new();
        m.insert("fc2.weight", Tensor::zeros(vec![1]));
        m.insert("conv1.bias", Tensor::zeros(vec![1]));
        m.insert("fc1.bias", Tensor::zeros(vec![1]));
        let names: Vec<_> = m.names().cloned().collect();
        assert_eq!(names, ["conv1.bias", "fc1.bias", "fc2.weight"]);
    }

    #[test]
    fn structure_and_fingerprint() {
        let mut a = NamedTensorMap::new();
        a.insert("w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mut b = a.clone();
        assert!(a.same_structure(&b));
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.get_mut("w").unwrap().data_mut()[0] = -1.0;
        assert_ne!(a.fingerprint(), b.fingerprint());
        b.insert("w", Tensor::zeros(vec![4]));
        assert!(!a.same_structure(&b));
        assert!(Tensor::new(vec![3], vec![0.0; 2]).is_err());
    }
}
