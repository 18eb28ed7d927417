use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A named learnable tensor with its gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// All parameters of a model, addressed by unique slash-separated names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<ParamTensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Config(format!("invalid parameter name `{name}`")));
        }
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(ParamTensor {
            name,
            value,
            grad: None,
        });
        Ok(ParamId(id))
    }

    /// Inserts an `N(0, std²)` initialised tensor.
    pub fn insert_normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> Result<ParamId> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn insert_full(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.insert(name, Tensor::full(shape, value))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.params[id.0]
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(self.id(name)?).value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.params.iter_mut()
    }

    /// Parameters in sorted-name order.
    pub fn sorted(&self) -> impl Iterator<Item = &ParamTensor> {
        self.index.values().map(move |&i| &self.params[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Resets every gradient slot to zeros.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }

    pub fn clear_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    pub fn merge_prefixed(&mut self, other: &ParamStore, prefix: &str) -> Result<()> {
        for p in other.sorted().filter(|p| p.name.starts_with(prefix)) {
            match self.index.get(&p.name) {
                Some(&i) => self.params[i].value = p.value.clone(),
                None => {
                    self.insert(p.name.clone(), p.value.clone())?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.insert_zeros("a/w", &[2, 2]).unwrap();
        assert!(matches!(s.insert_zeros("a/w", &[1]), Err(Error::DuplicateParam(_))));
        assert!(matches!(s.id("nope"), Err(Error::UnknownParam(_))));
    }

    #[test]
    fn sorted_order_is_by_name() {
        let mut s = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        s.insert_normal("z", &[2], 0.02, &mut rng).unwrap();
        s.insert_zeros("a", &[1]).unwrap();
        s.insert_zeros("m/x", &[1]).unwrap();
        let names: Vec<_> = s.sorted().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["a", "m/x", "z"]);
    }
}
