//! Flat named parameter storage shared by the backbone and the refiner.
//!
//! Layers hold [`ParamId`] handles into one [`ParamSet`]; gradients live in a
//! parallel [`Grads`] buffer with identical shapes. Names are hierarchical
//! (`backbone.blocks.0.self_attn.wq`) so checkpoints and integrity checks can
//! address tensors individually.

use crate::error::{CoreError, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// Normal with the given standard deviation.
    Normal(f64),
}

#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut Stream) -> ParamId {
        debug_assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Normal(std) => Tensor::randn(shape, std, rng),
        };
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar count, optionally restricted to a name prefix.
    pub fn count_parameters(&self, prefix: Option<&str>) -> usize {
        self.iter()
            .filter(|(n, _)| prefix.map_or(true, |p| n.starts_with(p)))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Replace a tensor's contents; shapes must match.
    pub fn load(&mut self, name: &str, data: Tensor) -> Result<()> {
        let id = self
            .id_by_name(name)
            .ok_or_else(|| CoreError::invalid(format!("unknown parameter `{name}`")))?;
        if self.tensors[id.0].shape() != data.shape() {
            return Err(CoreError::invalid(format!(
                "parameter `{name}` shape {:?} vs loaded {:?}",
                self.tensors[id.0].shape(),
                data.shape()
            )));
        }
        self.tensors[id.0] = data;
        Ok(())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffer aligned with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Grads {
    tensors: Vec<Tensor>,
}

impl Grads {
    pub fn zeros_like(ps: &ParamSet) -> Self {
        Grads { tensors: ps.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().for_each(|t| t.scale(s));
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_are_addressable_by_name() {
        let mut rng = Stream::new(1, 0);
        let mut ps = ParamSet::new();
        let a = ps.add("net.w", &[2, 3], Init::Normal(0.1), &mut rng);
        let b = ps.add("net.b", &[3], Init::Zeros, &mut rng);
        assert_eq!(ps.id_by_name("net.w"), Some(a));
        assert_eq!(ps.get(b).data(), &[0.0, 0.0, 0.0]);
        assert_eq!(ps.count_parameters(None), 9);
        assert_eq!(ps.count_parameters(Some("net.w")), 6);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut rng = Stream::new(2, 0);
        let mut ps = ParamSet::new();
        ps.add("w", &[2, 2], Init::Zeros, &mut rng);
        assert!(ps.load("w", Tensor::zeros(&[2, 3])).is_err());
        assert!(ps.load("nope", Tensor::zeros(&[2, 2])).is_err());
        assert!(ps.load("w", Tensor::filled(&[2, 2], 1.0)).is_ok());
    }
}
