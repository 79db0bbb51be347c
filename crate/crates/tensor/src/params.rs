use std::collections::BTreeMap;

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

/// Named trainable tensors, iterated in sorted name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, t);
        Ok(())
    }

    /// Fan-in scaled uniform init, `U(-1/√fan_in, 1/√fan_in)`.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)));
        self.insert(name, t)
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn init_ones(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::ones(shape))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params.get_mut(name).ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Scalar count over names starting with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Registers every parameter as a gradient-tracked leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Bound {
        Bound { vars: self.params.iter().map(|(k, v)| (k.clone(), g.leaf(v.clone(), requires_grad))).collect() }
    }
}

/// Parameter name → graph variable for one pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Bound { vars: iter.into_iter().collect() }
    }
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Collects gradients after a backward pass; untouched parameters get zeros.
    pub fn grads<T: Scalar>(&self, g: &Graph<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let grad = g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v)));
                (k.clone(), grad)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_seed_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut p = ParamStore::<f32>::new();
            p.init_uniform("a.weight", &[4, 3], 3, &mut rng).unwrap();
            p.init_zeros("a.bias", &[4]).unwrap();
            p
        };
        assert_eq!(build(), build());
        let p = build();
        let bound = 1.0 / 3f32.sqrt();
        assert!(p.get("a.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["a.bias", "a.weight"]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamStore::<f32>::new();
        p.init_ones("g", &[2]).unwrap();
        assert!(p.init_ones("g", &[2]).is_err());
    }
}
