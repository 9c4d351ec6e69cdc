use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Float, Gradients, ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            lr: 2e-4,
            decay: 0.99,
            epsilon: 0.01,
            momentum: 0.0,
        }
    }
}

/// Per-parameter moving average of squared gradients (and momentum buffers
/// when momentum is non-zero).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Float = f32> {
    pub(crate) mean_square: BTreeMap<String, Tensor<T>>,
    pub(crate) momentum: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = |p: &ParamSet<T>| {
            p.iter()
                .map(|(k, v)| (k.to_string(), Tensor::zeros(v.shape())))
                .collect::<BTreeMap<_, _>>()
        };
        OptimizerState {
            mean_square: zeros(params),
            momentum: zeros(params),
        }
    }

    pub fn mean_square(&self, name: &str) -> Result<&Tensor<T>> {
        self.mean_square
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, &Tensor<T>)> {
        self.mean_square
            .iter()
            .zip(self.momentum.values())
            .map(|((k, ms), mom)| (k.as_str(), ms, mom))
    }

    pub fn restore(&mut self, name: &str, mean_square: Tensor<T>, momentum: Tensor<T>) -> Result<()> {
        let ms = self
            .mean_square
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if ms.shape() != mean_square.shape() || ms.shape() != momentum.shape() {
            return Err(Error::shape("optimizer_restore", name.to_string()));
        }
        *ms = mean_square;
        *self.momentum.get_mut(name).expect("same keys") = momentum;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateOutcome {
    Applied,
    /// Gradients contained NaN or infinity; nothing was changed.
    SkippedNonFinite,
}

/// RMSProp with epsilon inside the square root:
/// `ms <- decay*ms + (1-decay)*g^2; p <- p - lr*g/sqrt(ms + eps)`.
#[derive(Clone, Debug)]
pub struct RmsProp {
    pub config: RmsPropConfig,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig) -> Self {
        RmsProp { config }
    }

    pub fn update<T: Float>(
        &self,
        params: &mut ParamSet<T>,
        grads: &Gradients<T>,
        state: &mut OptimizerState<T>,
    ) -> Result<UpdateOutcome> {
        for (name, g) in grads.iter() {
            if params.get(name)?.shape() != g.shape() {
                return Err(Error::shape(
                    "rmsprop_update",
                    format!("`{name}`: param {:?}, grad {:?}", params.get(name)?.shape(), g.shape()),
                ));
            }
        }
        if !grads.is_finite() {
            return Ok(UpdateOutcome::SkippedNonFinite);
        }
        let decay = T::of(self.config.decay);
        let keep = T::one() - decay;
        let lr = T::of(self.config.lr);
        let eps = T::of(self.config.epsilon);
        let mu = T::of(self.config.momentum);
        for (name, g) in grads.iter() {
            let ms = state
                .mean_square
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            let mom = state.momentum.get_mut(name).expect("same keys");
            let p = params.get_mut(name)?;
            for (((pv, &gv), msv), mv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(ms.data_mut().iter_mut())
                .zip(mom.data_mut().iter_mut())
            {
                *msv = decay * *msv + keep * gv * gv;
                let step = lr * gv / (*msv + eps).sqrt();
                *mv = mu * *mv + step;
                *pv -= *mv;
            }
        }
        params.bump_version();
        Ok(UpdateOutcome::Applied)
    }
}

/// Per-element clip of every gradient component into `[-bound, bound]`.
pub fn clip_gradients<T: Float>(grads: &mut Gradients<T>, bound: T) -> Result<()> {
    if !(bound > T::zero()) {
        return Err(Error::invalid(format!("clip bound {bound} must be positive")));
    }
    for (_, g) in grads.iter_mut() {
        for v in g.data_mut() {
            *v = v.max(-bound).min(bound);
        }
    }
    Ok(())
}
