//! Named trainable parameters with persistent gradient accumulators.
//!
//! A [`ParamSet`] owns every trainable tensor of a model. Graphs reference
//! entries by [`ParamId`]; `Graph::backward` accumulates into `grad`, which
//! persists until [`ParamSet::zero_grads`] — repeated backward calls add up.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, CloeError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> ParamEntry<T> {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn add(&mut self, name: &str, init: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(CloeError::Config(format!("duplicate parameter name: {name}")));
        }
        let id = ParamId(self.entries.len());
        let (shape, data) = init.into_parts();
        let grad = vec![T::ZERO; data.len()];
        self.entries.push(ParamEntry { name: name.to_string(), shape, data, grad });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Uniform(-a, a) init with a = 1/sqrt(fan_in), sampled in f64 so that
    /// f32 and f64 models built from the same seed agree to f32 precision.
    pub fn add_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let a = 1.0 / (fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data: Vec<T> = (0..numel).map(|_| T::from_f64(rng.gen_range(-a..a))).collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_numel(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(T::ZERO);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[T]) {
        let e = &mut self.entries[id.0];
        debug_assert_eq!(e.grad.len(), g.len());
        for (a, &b) in e.grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.data.iter().all(|v| v.is_finite()))
    }

    /// Copy of this set in another precision (used to verify f32 models in f64).
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for e in &self.entries {
            let t = Tensor::<U>::new(
                &e.shape,
                e.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            )
            .expect("shape preserved");
            out.add(&e.name, t).expect("names preserved");
        }
        out
    }

    /// Replace data of the entry named `name`; shape must match.
    pub fn set_data(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let id = self
            .lookup(name)
            .ok_or_else(|| CloeError::Config(format!("unknown parameter: {name}")))?;
        let e = self.get_mut(id);
        if e.shape != t.shape() {
            return Err(shape_err(format!(
                "parameter {name}: checkpoint shape {:?} != model shape {:?}",
                t.shape(),
                e.shape
            )));
        }
        e.data = t.into_data();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn grads_accumulate_until_reset() {
        let mut p = ParamSet::<f64>::new();
        let id = p.add("w", Tensor::zeros(&[3])).unwrap();
        p.accumulate_grad(id, &[1.0, 2.0, 3.0]);
        p.accumulate_grad(id, &[1.0, 2.0, 3.0]);
        assert_eq!(p.get(id).grad, vec![2.0, 4.0, 6.0]);
        p.zero_grads();
        assert_eq!(p.get(id).grad, vec![0.0; 3]);
    }

    #[test]
    fn uniform_init_is_seed_deterministic_and_bounded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let mut p1 = ParamSet::<f32>::new();
        let mut p2 = ParamSet::<f32>::new();
        p1.add_uniform("w", &[4, 4], 16, &mut r1).unwrap();
        p2.add_uniform("w", &[4, 4], 16, &mut r2).unwrap();
        let a = &p1.get(ParamId(0)).data;
        let b = &p2.get(ParamId(0)).data;
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() < 0.25));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::<f32>::new();
        p.add_zeros("w", &[2]).unwrap();
        assert!(p.add_zeros("w", &[2]).is_err());
    }

    #[test]
    fn cast_preserves_names_and_values() {
        let mut p = ParamSet::<f32>::new();
        p.add("w", Tensor::new(&[2], vec![0.5, -0.25]).unwrap()).unwrap();
        let q: ParamSet<f64> = p.cast();
        assert_eq!(q.get(ParamId(0)).data, vec![0.5, -0.25]);
        assert_eq!(q.get(ParamId(0)).name, "w");
    }
}
