//! Named flat parameter tensors, shared by the optimizer and checkpoints.

use crate::error::{Error, Result};
use crate::Real;

#[derive(Clone, Debug)]
pub struct NamedTensor<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

/// A model whose parameters are a fixed, ordered list of flat tensors.
///
/// Gradient and momentum buffers use the same type as the model, so the
/// i-th tensor of each lines up.
pub trait ParamSet<T: Real> {
    fn tensors(&self) -> Vec<NamedTensor<'_, T>>;
    fn tensors_mut(&mut self) -> Vec<&mut [T]>;

    /// Same layout with every value zero.
    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += scale * other`; both must share a layout.
    fn axpy(&mut self, scale: T, other: &Self) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &v) in dst.iter_mut().zip(src.data) {
                *d += scale * v;
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Overwrites parameters from `(name, values)` pairs; every tensor must
    /// be present with a matching length.
    fn load_named(&mut self, source: &[(String, Vec<T>)]) -> Result<()> {
        let names: Vec<(String, usize)> = self
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.data.len()))
            .collect();
        for ((name, len), dst) in names.into_iter().zip(self.tensors_mut()) {
            let (_, vals) = source
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Parse(format!("missing tensor {name}")))?;
            if vals.len() != len {
                return Err(Error::Shape(format!("tensor {name}: expected {len} values, got {}", vals.len())));
            }
            dst.copy_from_slice(vals);
        }
        Ok(())
    }
}
