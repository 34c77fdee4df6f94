//! Named parameter storage and initialisation.
//!
//! Parameters live in a sorted name → tensor map with dotted group prefixes
//! (`alignment.`, `hallucination.`, `blend.`, `merge.`). Sorted iteration
//! keeps initialisation, optimisation and serialisation order-stable, which
//! the bitwise-determinism guarantees depend on.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::conv::ConvSpec;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Default, Clone)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        let prev = self.map.insert(name.to_string(), t);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    /// Replace an existing parameter's value (shape-checked).
    pub fn update(&mut self, name: &str, t: Tensor) {
        let slot = self
            .map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        assert_eq!(slot.shape(), t.shape(), "parameter {name} shape changed");
        *slot = t;
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    /// Insert every parameter as a graph leaf, in name order.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.map {
            vars.insert(name.clone(), g.leaf(t.clone()));
        }
        BoundParams { vars }
    }

    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        ParamStore { map }
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.map
    }
}

/// Graph handles for one bound parameter set.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Seeded parameter initialiser (He-normal weights, zero biases).
pub struct Initializer {
    rng: ChaCha20Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Standard normal sample via Box–Muller.
    fn normal(&mut self) -> f64 {
        let u1: f64 = 1.0 - self.rng.gen::<f64>(); // (0, 1]
        let u2: f64 = self.rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// He-normal tensor with `std = sqrt(2 / fan_in)`.
    pub fn he_normal(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| std * self.normal()).collect();
        Tensor::from_vec(shape, data)
    }

    /// Insert `{prefix}.w` (He-normal) and `{prefix}.b` (zeros) for a
    /// convolution of the given geometry.
    pub fn conv(&mut self, store: &mut ParamStore, prefix: &str, spec: &ConvSpec) {
        let fan_in = spec.in_ch * spec.ksize * spec.ksize;
        store.insert(&format!("{prefix}.w"), self.he_normal(&spec.weight_shape(), fan_in));
        store.insert(&format!("{prefix}.b"), Tensor::zeros(&[spec.out_ch]));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_roundtrip_and_bind() {
        let mut s = ParamStore::new();
        s.insert("b.w", Tensor::filled(&[2], 1.0));
        s.insert("a.w", Tensor::filled(&[3], 2.0));
        assert_eq!(s.len(), 2);
        assert_eq!(s.scalar_count(), 5);
        // Sorted iteration order.
        let names: Vec<&String> = s.names().collect();
        assert_eq!(names, ["a.w", "b.w"]);
        let mut g = Graph::new();
        let bound = s.bind(&mut g);
        assert_eq!(g.value(bound.var("a.w")).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::zeros(&[1]));
        s.insert("x", Tensor::zeros(&[1]));
    }

    #[test]
    fn initializer_is_seed_deterministic_with_sane_scale() {
        let spec = ConvSpec::same3(8, 16);
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        Initializer::new(42).conv(&mut s1, "c", &spec);
        Initializer::new(42).conv(&mut s2, "c", &spec);
        assert_eq!(s1.get("c.w").data(), s2.get("c.w").data());
        assert!(s1.get("c.b").iter().all(|&v| v == 0.0));
        // Empirical std close to He target sqrt(2/72) ≈ 0.1667.
        let w = s1.get("c.w");
        let n = w.len() as f64;
        let mean: f64 = w.iter().sum::<f64>() / n;
        let var: f64 = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let target = (2.0 / 72.0f64).sqrt();
        assert!((var.sqrt() - target).abs() < 0.15 * target, "std {} vs {target}", var.sqrt());
    }
}
