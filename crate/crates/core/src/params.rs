use rand::Rng as _;

use crate::error::{EdmaeError, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    /// Adds a conv or linear weight plus bias, both drawn uniformly from
    /// ±sqrt(1/fan_in). `shape` is the weight shape with fan-out first.
    pub fn push_layer(&mut self, name: &str, shape: &[usize], rng: &mut Rng) {
        let fan_in: usize = shape[1..].iter().product();
        let bound = (1.0 / fan_in.max(1) as f64).sqrt() as f32;
        let w = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        let b = Tensor::from_fn(&[shape[0]], |_| rng.gen_range(-bound..=bound));
        self.push(format!("{name}.w"), w);
        self.push(format!("{name}.b"), b);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Records every tensor on `g` as a leaf, trainable or constant.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, trainable: bool) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| {
                let t = t.cast::<T>();
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect()
    }

    /// Gradients of bound parameters, zero-filled where none reached them.
    pub fn collect_grads<T: Scalar>(&self, g: &Graph<T>, vars: &[Var]) -> Vec<Vec<f32>> {
        vars.iter()
            .zip(&self.tensors)
            .map(|(v, t)| match g.grad(*v) {
                Some(gr) => gr.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect(),
                None => vec![0.0; t.numel()],
            })
            .collect()
    }

    /// Copies tensors with the given name prefix, stripping it.
    pub fn from_prefixed<'a>(
        entries: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
        prefix: &str,
    ) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in entries {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.push(rest, t.clone());
            }
        }
        out
    }

    /// Replaces values with `other`'s, requiring an identical layout.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if !self.same_layout(other) {
            return Err(EdmaeError::Config(
                "checkpoint parameters do not match the model layout".into(),
            ));
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }
}
