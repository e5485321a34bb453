//! Flat parameter storage with a named layout.
//!
//! All trainable tensors live in one `Vec<f64>` (theta). Modules register
//! their tensors on a [`LayoutBuilder`] at model construction and keep
//! [`ParamRef`] handles; each forward pass binds the current theta onto a
//! graph as leaves. Flat storage keeps the optimizer, checkpointing, and
//! finite-difference probing trivial.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Gradients, Graph, Tensor, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef(usize);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// U(-bound, bound)
    Uniform(f64),
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Default)]
pub struct LayoutBuilder {
    specs: Vec<ParamSpec>,
    cursor: usize,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensor(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamRef {
        let name = name.into();
        debug_assert!(
            !self.specs.iter().any(|s| s.name == name),
            "duplicate parameter name {name}"
        );
        let numel: usize = shape.iter().product();
        let spec = ParamSpec { name, shape: shape.to_vec(), offset: self.cursor, init };
        self.cursor += numel;
        self.specs.push(spec);
        ParamRef(self.specs.len() - 1)
    }

    pub fn finish(self) -> ParamLayout {
        let by_name = self
            .specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        ParamLayout { specs: self.specs, total: self.cursor, by_name }
    }
}

pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    total: usize,
    by_name: HashMap<String, usize>,
}

impl ParamLayout {
    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn by_name(&self, name: &str) -> Option<ParamRef> {
        self.by_name.get(name).copied().map(ParamRef)
    }

    pub fn spec(&self, r: ParamRef) -> &ParamSpec {
        &self.specs[r.0]
    }

    /// Deterministic initialization in registration order.
    pub fn init_theta(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; self.total];
        for spec in &self.specs {
            let slot = &mut theta[spec.offset..spec.offset + spec.numel()];
            match spec.init {
                Init::Uniform(b) => slot.iter_mut().for_each(|v| *v = rng.gen_range(-b..b)),
                Init::Zeros => {}
                Init::Ones => slot.iter_mut().for_each(|v| *v = 1.0),
                Init::Const(c) => slot.iter_mut().for_each(|v| *v = c),
            }
        }
        theta
    }

    pub fn slice<'a>(&self, theta: &'a [f64], r: ParamRef) -> &'a [f64] {
        let s = &self.specs[r.0];
        &theta[s.offset..s.offset + s.numel()]
    }

    pub fn tensor_of(&self, theta: &[f64], r: ParamRef) -> Tensor {
        let s = &self.specs[r.0];
        Tensor::from_parts(s.shape.clone(), self.slice(theta, r).to_vec())
    }
}

/// One forward pass worth of parameter values bound onto a graph.
pub struct Binder {
    vals: Vec<Value>,
    trainable: Vec<bool>,
}

impl Binder {
    /// Binds every parameter. Parameters whose name matches `frozen` are
    /// bound as constants and receive no gradient.
    pub fn bind(
        g: &Graph,
        layout: &ParamLayout,
        theta: &[f64],
        frozen: impl Fn(&str) -> bool,
    ) -> Self {
        let mut vals = Vec::with_capacity(layout.specs.len());
        let mut trainable = Vec::with_capacity(layout.specs.len());
        for (i, spec) in layout.specs.iter().enumerate() {
            let t = layout.tensor_of(theta, ParamRef(i));
            if frozen(&spec.name) {
                vals.push(g.constant(t));
                trainable.push(false);
            } else {
                vals.push(g.leaf(t));
                trainable.push(true);
            }
        }
        Self { vals, trainable }
    }

    /// Wraps explicit values (e.g. slices of a probe tensor) as a binder;
    /// gradient checks that differentiate through the whole parameter set
    /// use this to rebind every tensor as a view of one leaf.
    pub fn from_values(vals: Vec<Value>) -> Self {
        let trainable = vec![true; vals.len()];
        Self { vals, trainable }
    }

    pub fn get(&self, r: ParamRef) -> &Value {
        &self.vals[r.0]
    }

    /// Accumulates this pass's gradients into a flat buffer aligned with
    /// theta. Missing gradients (frozen or unused parameters) contribute
    /// nothing.
    pub fn accumulate_grads(&self, layout: &ParamLayout, grads: &Gradients, out: &mut [f64]) {
        for (i, spec) in layout.specs.iter().enumerate() {
            if !self.trainable[i] {
                continue;
            }
            if let Some(gt) = grads.of(&self.vals[i]) {
                let dst = &mut out[spec.offset..spec.offset + spec.numel()];
                for (d, s) in dst.iter_mut().zip(gt.data()) {
                    *d += s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_offsets_and_init_are_deterministic() {
        let mut lb = LayoutBuilder::new();
        let a = lb.tensor("a", &[2, 3], Init::Uniform(0.5));
        let b = lb.tensor("b", &[4], Init::Ones);
        let layout = lb.finish();
        assert_eq!(layout.total_len(), 10);
        assert_eq!(layout.spec(a).offset, 0);
        assert_eq!(layout.spec(b).offset, 6);
        let t1 = layout.init_theta(9);
        let t2 = layout.init_theta(9);
        assert_eq!(t1, t2);
        assert!(layout.slice(&t1, b).iter().all(|&v| v == 1.0));
        assert!(layout.slice(&t1, a).iter().all(|&v| v.abs() < 0.5));
        assert_ne!(t1, layout.init_theta(10));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut lb = LayoutBuilder::new();
        let a = lb.tensor("live", &[2], Init::Ones);
        let b = lb.tensor("frozen.w", &[2], Init::Ones);
        let layout = lb.finish();
        let theta = layout.init_theta(0);

        let g = Graph::new();
        let binder = Binder::bind(&g, &layout, &theta, |n| n.starts_with("frozen."));
        let prod = g.mul(binder.get(a), binder.get(b)).unwrap();
        let root = g.sum_all(&prod).unwrap();
        let grads = g.backward(&root).unwrap();
        let mut flat = vec![0.0; layout.total_len()];
        binder.accumulate_grads(&layout, &grads, &mut flat);
        assert_eq!(&flat[0..2], &[1.0, 1.0]);
        assert_eq!(&flat[2..4], &[0.0, 0.0]);
    }
}
