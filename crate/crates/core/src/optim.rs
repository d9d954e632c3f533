//! Adagrad with a decayed accumulator:
//!
//! ```text
//! acc   <- decay * acc + g^2
//! theta <- theta - lr * g / (sqrt(acc) + eps)
//! ```
//!
//! `decay = 1` is plain Adagrad.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdagradDecay {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub accumulator_init: f64,
    state: IndexMap<String, Tensor>,
}

impl AdagradDecay {
    pub fn new(learning_rate: f64, decay: f64, epsilon: f64, accumulator_init: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {learning_rate}")));
        }
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!("decay must be in [0, 1], got {decay}")));
        }
        if !(epsilon >= 0.0 && accumulator_init >= 0.0) {
            return Err(Error::Config("epsilon and accumulator_init must be >= 0".into()));
        }
        Ok(Self {
            learning_rate,
            decay,
            epsilon,
            accumulator_init,
            state: IndexMap::new(),
        })
    }

    pub fn accumulator(&self, name: &str) -> Option<&Tensor> {
        self.state.get(name)
    }

    /// Applies one update to every parameter that has a gradient. All
    /// gradients are checked before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            if let Some(bad) = g.values().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}`[{bad}]")));
            }
            let p = params
                .get(name)
                .map_err(|_| Error::Usage(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "optimizer step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        for (name, g) in grads.iter() {
            let init = self.accumulator_init;
            let acc = self
                .state
                .entry(name.to_string())
                .or_insert_with(|| Tensor::from_fn(g.rows(), g.cols(), |_, _| init));
            let p = params.get_mut(name).expect("checked above");
            let (lr, decay, eps) = (self.learning_rate, self.decay, self.epsilon);
            for ((theta, a), &gi) in p
                .values_mut()
                .iter_mut()
                .zip(acc.values_mut().iter_mut())
                .zip(g.values())
            {
                *a = decay * *a + gi * gi;
                *theta -= lr * gi / (a.sqrt() + eps);
            }
        }
        Ok(())
    }
}
