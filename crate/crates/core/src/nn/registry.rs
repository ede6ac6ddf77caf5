use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How a parameter is filled when a registry is built from a seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with the given std, resampled outside ±2 std.
    TruncNormal { std: f64 },
    /// Truncated normal with std `sqrt(2 / fan_in)`, fan-in taken from the
    /// trailing extents of the shape.
    He,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.into(),
            init,
        }
    }
}

/// Name → tensor map holding every learned weight of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamRegistry {
    params: BTreeMap<String, Tensor>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fills every spec from a ChaCha8 stream seeded with `seed`, visiting the
    /// specs in name order. The result is a pure function of `(specs, seed)`.
    pub fn initialize(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut sorted: Vec<&ParamSpec> = specs.iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reg = Self::new();
        for spec in sorted {
            let tensor = match spec.init {
                Init::Zeros => Tensor::zeros(spec.shape.clone()),
                Init::Ones => Tensor::full(spec.shape.clone(), 1.0),
                Init::TruncNormal { std } => truncated_normal(&mut rng, &spec.shape, std),
                Init::He => {
                    let fan_in: usize = spec.shape.iter().skip(1).product::<usize>().max(1);
                    truncated_normal(&mut rng, &spec.shape, (2.0 / fan_in as f64).sqrt())
                }
            };
            reg.insert(spec.name.clone(), tensor)?;
        }
        Ok(reg)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, tensor);
        Ok(())
    }

    /// Replaces an existing parameter, keeping its shape.
    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        slot.expect_same_shape(&tensor)?;
        *slot = tensor;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters in ascending name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Same names, shapes and bit patterns (so `NaN` payloads compare equal
    /// and `-0.0` differs from `0.0`).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((na, a), (nb, b))| na == nb && a.bitwise_eq(b))
    }

    /// Total number of scalar weights.
    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Checks that this registry holds exactly `specs`, by name and shape.
    pub fn check_compatible(&self, specs: &[ParamSpec]) -> Result<()> {
        let expected: BTreeMap<&str, &[usize]> = specs
            .iter()
            .map(|s| (s.name.as_str(), s.shape.as_slice()))
            .collect();
        let missing: Vec<String> = expected
            .keys()
            .filter(|n| !self.params.contains_key(**n))
            .map(|n| n.to_string())
            .collect();
        let unexpected: Vec<String> = self
            .params
            .keys()
            .filter(|n| !expected.contains_key(n.as_str()))
            .cloned()
            .collect();
        let mismatched: Vec<String> = self
            .params
            .iter()
            .filter_map(|(n, t)| match expected.get(n.as_str()) {
                Some(shape) if *shape != t.shape() => {
                    Some(format!("{n} {:?} (expected {shape:?})", t.shape()))
                }
                _ => None,
            })
            .collect();
        if missing.is_empty() && unexpected.is_empty() && mismatched.is_empty() {
            Ok(())
        } else {
            Err(Error::Compatibility {
                missing,
                unexpected,
                mismatched,
            })
        }
    }

    /// `x·Wᵀ + b` using the weights registered under `name`.
    pub fn linear(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        super::Linear::<f32>::load(self, name)?.forward(x)
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break (z * std) as f32;
        }
    })
}
