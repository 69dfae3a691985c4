use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))` over the first two extents.
    Xavier,
    Zeros,
    Ones,
}

/// Named trainable tensors, iterated in lexicographic name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Initializes `specs` deterministically: specs are sorted by name and
    /// drawn in that order from one generator seeded with `seed`.
    pub fn initialize(specs: &[(String, Vec<usize>, Init)], seed: u64) -> Result<Self> {
        let mut sorted: Vec<&(String, Vec<usize>, Init)> = specs.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape, init) in sorted {
            let tensor = match init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::ones(shape),
                Init::Xavier => {
                    let (fan_in, fan_out) = match shape.as_slice() {
                        [n] => (*n, *n),
                        [a, b, ..] => (*a, *b),
                        [] => (1, 1),
                    };
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
                    Tensor::new(shape.clone(), data)?
                }
            };
            store.insert(name.clone(), tensor)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: String, tensor: Tensor) -> Result<()> {
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
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

    /// Total number of scalar entries.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initialization_is_seeded_and_order_independent() {
        let a = vec![
            ("b".to_string(), vec![3, 4], Init::Xavier),
            ("a".to_string(), vec![2], Init::Zeros),
            ("c".to_string(), vec![4, 4], Init::Xavier),
        ];
        let mut b = a.clone();
        b.reverse();
        let s1 = ParamStore::initialize(&a, 7).unwrap();
        let s2 = ParamStore::initialize(&b, 7).unwrap();
        assert_eq!(s1, s2);
        let s3 = ParamStore::initialize(&a, 8).unwrap();
        assert_ne!(s1, s3);
        let limit = (6.0f64 / 7.0).sqrt();
        assert!(s1.get("b").unwrap().data().iter().all(|x| x.abs() < limit));
        assert_eq!(s1.names().cloned().collect::<Vec<_>>(), vec!["a", "b", "c"]);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.insert("w".into(), Tensor::zeros(&[1])).unwrap();
        assert!(s.insert("w".into(), Tensor::zeros(&[1])).is_err());
    }
}
