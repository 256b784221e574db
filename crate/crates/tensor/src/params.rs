use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::graph::{Binding, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_SET_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
    grad: Option<Tensor<T>>,
    velocity: Option<Vec<T>>,
}

impl<T: Real> Param<T> {
    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }
}

/// Ordered, named collection of learnable tensors with optimizer state.
///
/// Once frozen, no parameter in the set can become trainable again and
/// binding it into a graph yields a constant leaf.
#[derive(Debug)]
pub struct ParamSet<T: Real = f32> {
    id: u64,
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
    frozen: bool,
}

impl<T: Real> Clone for ParamSet<T> {
    fn clone(&self) -> Self {
        ParamSet {
            id: next_id(),
            params: self.params.clone(),
            index: self.index.clone(),
            frozen: self.frozen,
        }
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            id: next_id(),
            params: Vec::new(),
            index: HashMap::new(),
            frozen: false,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            trainable: !self.frozen,
            grad: None,
            velocity: None,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.param(name).map(|p| &p.value)
    }

    pub fn param(&self, name: &str) -> Result<&Param<T>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    /// Replaces a value in place; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.frozen {
            return Err(TensorError::Frozen(name.to_string()));
        }
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        let p = &mut self.params[i];
        if p.value.shape() != value.shape() {
            return Err(TensorError::shape(
                "ParamSet::set",
                format!("{:?}", p.value.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        p.value = value;
        p.velocity = None;
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        if self.frozen && trainable {
            return Err(TensorError::Frozen(name.to_string()));
        }
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        self.params[i].trainable = trainable;
        Ok(())
    }

    /// Marks every parameter non-trainable and drops optimizer state.
    /// There is no inverse.
    pub fn freeze(&mut self) {
        self.frozen = true;
        for p in &mut self.params {
            p.trainable = false;
            p.grad = None;
            p.velocity = None;
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Records `name` as a leaf of `graph`; trainable parameters receive
    /// gradients, others become constants.
    pub fn bind(&self, graph: &mut Graph<T>, name: &str) -> Result<Var> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        let p = &self.params[i];
        if !p.trainable {
            return Ok(graph.constant(p.value.clone()));
        }
        let var = graph.variable(p.value.clone());
        graph.bindings.push(Binding {
            set_id: self.id,
            index: i,
            var,
        });
        Ok(var)
    }

    /// Accumulates the gradients `graph` computed for parameters bound from
    /// this set.
    pub fn absorb_grads(&mut self, graph: &Graph<T>) {
        for b in graph.bindings.iter().filter(|b| b.set_id == self.id) {
            let Some(g) = graph.grad(b.var) else { continue };
            let p = &mut self.params[b.index];
            if !p.trainable {
                continue;
            }
            match &mut p.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, &v)| *a = *a + v),
                None => p.grad = Some(g.clone()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// FNV-1a over names, shapes and value bits, in insertion order.
    pub fn checksum(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for p in &self.params {
            feed(p.name.as_bytes());
            for &d in p.value.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                feed(&v.to_f64().unwrap_or(f64::NAN).to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Momentum SGD: `v <- momentum * v + grad; p <- p - lr * v`. Frozen
/// parameters are skipped, and gradients are cleared afterwards.
pub fn sgd_step<T: Real>(params: &mut ParamSet<T>, lr: T, momentum: T) -> Result<()> {
    if !(lr > T::zero()) {
        return Err(TensorError::invalid("sgd_step", "learning rate must be positive"));
    }
    if momentum < T::zero() || momentum >= T::one() {
        return Err(TensorError::invalid("sgd_step", "momentum must lie in [0, 1)"));
    }
    if let Some(p) = params.params.iter().find(|p| p.trainable && p.grad.is_none()) {
        return Err(TensorError::MissingGradient(p.name.clone()));
    }
    for p in params.params.iter_mut().filter(|p| p.trainable) {
        let grad = p.grad.take().expect("checked above");
        let velocity = p.velocity.get_or_insert_with(|| vec![T::zero(); grad.numel()]);
        for ((w, v), &g) in p.value.data_mut().iter_mut().zip(velocity.iter_mut()).zip(grad.data()) {
            *v = momentum * *v + g;
            *w = *w - lr * *v;
        }
    }
    params.zero_grads();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p0: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.insert("p", Tensor::scalar(p0)).unwrap();
        ps
    }

    fn unit_grad_step(ps: &mut ParamSet<f64>, lr: f64, momentum: f64) {
        let mut g = Graph::new();
        let p = ps.bind(&mut g, "p").unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        ps.absorb_grads(&g);
        sgd_step(ps, lr, momentum).unwrap();
    }

    #[test]
    fn plain_step() {
        let mut ps = single(1.0);
        unit_grad_step(&mut ps, 0.1, 0.0);
        assert!((ps.get("p").unwrap().item().unwrap() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        // v1 = 1, v2 = 0.9 + 1 = 1.9; p = -0.1 - 0.19
        let mut ps = single(0.0);
        unit_grad_step(&mut ps, 0.1, 0.9);
        unit_grad_step(&mut ps, 0.1, 0.9);
        assert!((ps.get("p").unwrap().item().unwrap() + 0.29).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameters_are_untouched_and_gradless() {
        let mut ps = single(3.0);
        ps.freeze();
        let before = ps.checksum();
        let mut g = Graph::new();
        let p = ps.bind(&mut g, "p").unwrap();
        assert!(!g.requires_grad(p));
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        ps.absorb_grads(&g);
        assert!(ps.param("p").unwrap().grad().is_none());
        sgd_step(&mut ps, 0.1, 0.9).unwrap();
        assert_eq!(ps.checksum(), before);
        assert!(matches!(ps.set_trainable("p", true), Err(TensorError::Frozen(_))));
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut ps = single(1.0);
        assert!(matches!(sgd_step(&mut ps, 0.1, 0.0), Err(TensorError::MissingGradient(_))));
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        let mut ps = single(1.0);
        assert!(sgd_step(&mut ps, 0.0, 0.0).is_err());
        assert!(sgd_step(&mut ps, 0.1, 1.0).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = single(1.0);
        assert!(matches!(
            ps.insert("p", Tensor::scalar(0.0)),
            Err(TensorError::DuplicateParameter(_))
        ));
    }
}
