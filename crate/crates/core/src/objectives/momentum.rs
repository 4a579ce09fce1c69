use crate::encoders::ParamStore;
use crate::error::{Error, Result};

/// Online parameters plus their exponential moving average. Only the online
/// side is ever handed to a trainable graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair {
    pub online: ParamStore,
    pub momentum: ParamStore,
    pub m_ema: f64,
}

impl ModelPair {
    /// Starts the momentum copy equal to the online parameters.
    pub fn new(online: ParamStore, m_ema: f64) -> Self {
        Self {
            momentum: online.clone(),
            online,
            m_ema,
        }
    }

    /// `θ_m ← m θ_m + (1 − m) θ_o`, elementwise.
    pub fn momentum_update(&mut self) -> Result<()> {
        momentum_update(&mut self.momentum, &self.online, self.m_ema)
    }
}

pub fn momentum_update(momentum: &mut ParamStore, online: &ParamStore, m_ema: f64) -> Result<()> {
    if !momentum.same_layout(online) {
        return Err(Error::Contract("momentum and online parameter layouts differ".into()));
    }
    for (tm, to) in momentum.tensors_mut().iter_mut().zip(online.tensors()) {
        for (a, &b) in tm.data_mut().iter_mut().zip(to.data()) {
            *a = m_ema * *a + (1.0 - m_ema) * b;
        }
    }
    Ok(())
}
