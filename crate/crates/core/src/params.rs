//! Named, shape-tagged parameter storage with seeded initialization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// How a parameter is filled by [`ParameterStore::initialize`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal samples outside ±2σ are redrawn.
    TruncatedNormal { std: f64 },
    Normal { std: f64 },
    Zeros,
    Ones,
}

/// Declaration of one array owned by a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, shape: impl Into<Vec<usize>>) -> Self {
        Self {
            name: name.into(),
            shape: shape.into(),
            init: Init::TruncatedNormal { std: 0.02 },
            trainable: true,
        }
    }

    /// `[kh, kw, cin, cout]` kernel with fan-in scaled truncated normal, std `√(2 / (kh·kw·cin))`.
    pub fn conv(name: impl Into<String>, shape: [usize; 4]) -> Self {
        let fan_in = (shape[0] * shape[1] * shape[2]).max(1) as f64;
        Self::weight(name, shape).with_init(Init::TruncatedNormal {
            std: (2.0 / fan_in).sqrt(),
        })
    }

    pub fn bias(name: impl Into<String>, len: usize) -> Self {
        Self {
            name: name.into(),
            shape: vec![len],
            init: Init::Zeros,
            trainable: true,
        }
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn buffer(mut self) -> Self {
        self.trainable = false;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Every array of a model, keyed by hierarchical dotted name.
///
/// Iteration order is the lexicographic name order, which is also the order
/// used for serialization and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T: Real = f32> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Real> Default for ParameterStore<T> {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }
}

/// FNV-1a, used to give each parameter an independent random stream.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fills every spec from its own stream derived from `(seed, name)`.
    pub fn initialize(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut store = Self::new();
        for spec in specs {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&spec.name));
            let tensor = match spec.init {
                Init::Zeros => Tensor::zeros(spec.shape.clone()),
                Init::Ones => Tensor::full(spec.shape.clone(), T::one()),
                Init::Normal { std } => Tensor::from_fn(spec.shape.clone(), |_| {
                    let z: f64 = rng.sample(StandardNormal);
                    T::lit(z * std)
                }),
                Init::TruncatedNormal { std } => Tensor::from_fn(spec.shape.clone(), |_| loop {
                    let z: f64 = rng.sample(StandardNormal);
                    if z.abs() <= 2.0 {
                        break T::lit(z * std);
                    }
                }),
            };
            store.insert(&spec.name, tensor, spec.trainable)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.entries
            .insert(name.to_string(), Param { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Replaces the value of an existing entry, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let slot = self.tensor_mut(name)?;
        if slot.shape() != tensor.shape() {
            return Err(Error::shape(
                "parameter set",
                format!("`{name}` is {:?}, got {:?}", slot.shape(), tensor.shape()),
            ));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Records every entry as a graph leaf; trainable entries require gradients.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), g.leaf(p.tensor.clone(), p.trainable)))
                .collect(),
        }
    }

    /// Folds observed batch statistics into `<prefix>.running_mean/var`.
    pub fn update_running_stats(
        &mut self,
        prefix: &str,
        stats: &BatchStats<T>,
        momentum: T,
    ) -> Result<()> {
        for (suffix, observed) in [("running_mean", &stats.mean), ("running_var", &stats.var_unbiased)] {
            let t = self.tensor_mut(&format!("{prefix}.{suffix}"))?;
            for (r, &o) in t.data_mut().iter_mut().zip(observed) {
                *r = (T::one() - momentum) * *r + momentum * o;
            }
        }
        Ok(())
    }
}

/// Graph handles for a bound [`ParameterStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec::weight("a.w", vec![3, 3, 4, 8]),
            ParamSpec::bias("a.b", 8),
            ParamSpec::weight("q", vec![6, 4]).with_init(Init::Normal { std: 0.02 }),
            ParamSpec::bias("bn.running_var", 4).with_init(Init::Ones).buffer(),
        ]
    }

    #[test]
    fn same_seed_same_store() {
        let a = ParameterStore::<f32>::initialize(&specs(), 7).unwrap();
        let b = ParameterStore::<f32>::initialize(&specs(), 7).unwrap();
        assert_eq!(a, b);
        let c = ParameterStore::<f32>::initialize(&specs(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn truncated_normal_respects_bounds() {
        let s = ParameterStore::<f64>::initialize(&specs(), 1).unwrap();
        let w = s.tensor("a.w").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.04));
        let mean = w.mean();
        assert!(mean.abs() < 0.01);
        assert!(s.tensor("a.b").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(!s.get("bn.running_var").unwrap().trainable);
    }

    #[test]
    fn conv_kernels_scale_with_fan_in() {
        let spec = ParamSpec::conv("k", [1, 1, 8, 512]);
        assert_eq!(spec.init, Init::TruncatedNormal { std: 0.5 });
        let s = ParameterStore::<f64>::initialize(&[spec], 3).unwrap();
        let w = s.tensor("k").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 1.0));
        // ±2σ truncation leaves a std of about 0.88σ.
        let var = w.data().iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var.sqrt() / 0.5 - 0.880).abs() < 0.03, "{}", var.sqrt());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("x", Tensor::zeros(vec![1]), true).unwrap();
        assert!(s.insert("x", Tensor::zeros(vec![1]), true).is_err());
    }

    #[test]
    fn set_checks_shape() {
        let mut s = ParameterStore::<f32>::initialize(&specs(), 1).unwrap();
        assert!(s.set("a.b", Tensor::zeros(vec![7])).is_err());
        assert!(s.set("a.b", Tensor::zeros(vec![8])).is_ok());
        assert!(matches!(s.set("nope", Tensor::zeros(vec![1])), Err(Error::MissingParam(_))));
    }

    #[test]
    fn running_stat_update_uses_momentum() {
        let mut s = ParameterStore::<f64>::new();
        s.insert("bn.running_mean", Tensor::zeros(vec![2]), false).unwrap();
        s.insert("bn.running_var", Tensor::full(vec![2], 1.0), false).unwrap();
        let stats = BatchStats {
            mean: vec![1.0, -1.0],
            var_unbiased: vec![3.0, 1.0],
        };
        s.update_running_stats("bn", &stats, 0.1).unwrap();
        assert_eq!(s.tensor("bn.running_mean").unwrap().data(), &[0.1, -0.1]);
        let v = s.tensor("bn.running_var").unwrap().data();
        assert!((v[0] - 1.2).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
    }
}
