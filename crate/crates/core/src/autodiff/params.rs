use std::collections::BTreeMap;

use super::graph::GradientMap;
use super::tensor::Tensor;

/// Named collection of tensors, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet(BTreeMap<String, Tensor>);

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.0.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn n_scalars(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    /// Bitwise equality of every tensor (NaN-safe, sign-of-zero aware).
    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|((ka, a), (kb, b))| ka == kb && a.bitwise_eq(b))
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet(iter.into_iter().collect())
    }
}

impl GradientMap {
    /// `self + factor * other`, over the union of both domains.
    pub fn axpy(&self, factor: f64, other: &GradientMap) -> GradientMap {
        let mut out: BTreeMap<String, Tensor> = self.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        for (name, t) in other.iter() {
            let entry = out.entry(name.to_string()).or_insert_with(|| Tensor::zeros(t.shape()));
            entry
                .data_mut()
                .iter_mut()
                .zip(t.data())
                .for_each(|(a, b)| *a += factor * b);
        }
        GradientMap::from_map(out)
    }
}
