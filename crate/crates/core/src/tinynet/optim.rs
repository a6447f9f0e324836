use std::collections::BTreeMap;

use crate::real::Real;

use super::Param;

/// SGD with Nesterov momentum in the common deep-learning formulation:
/// `v <- mu * v + g`, `p <- p - lr * (g + mu * v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdNesterov<T> {
    pub lr: f64,
    pub momentum: f64,
    /// Velocity buffers keyed by parameter name.
    pub buffers: BTreeMap<String, Vec<T>>,
}

impl<T: Real> SgdNesterov<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, buffers: BTreeMap::new() }
    }

    pub fn step<'a, I>(&mut self, params: I)
    where
        I: IntoIterator<Item = &'a mut Param<T>>,
        T: 'a,
    {
        let (lr, mu) = (T::of(self.lr), T::of(self.momentum));
        for p in params {
            let v = self.buffers.entry(p.name.clone()).or_insert_with(|| vec![T::zero(); p.value.len()]);
            assert_eq!(v.len(), p.value.len(), "momentum buffer shape for {}", p.name);
            for ((w, &g), vb) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vb = mu * *vb + g;
                *w -= lr * (g + mu * *vb);
            }
        }
    }
}
