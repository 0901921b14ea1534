//! Adam and SGD with momentum; weight decay is added to the gradient.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use super::config::{OptimizerConfig, OptimizerKind};
use crate::error::Result;

const ADAM_EPS: f64 = 1e-8;

pub struct Optimizer {
    cfg: OptimizerConfig,
    params: Vec<(String, Var)>,
    /// First moment (Adam) or momentum buffer (SGD).
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
    steps: usize,
    lr: f64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, params: Vec<(String, Var)>) -> Self {
        let n = params.len();
        Self {
            lr: cfg.learning_rate,
            cfg,
            params,
            first: vec![None; n],
            second: vec![None; n],
            steps: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Applies one update from the gradients of a scalar loss. Parameters
    /// without a gradient are left alone.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let c = self.cfg;
        for (i, (_, var)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let p = var.as_tensor().detach();
            let g = if c.weight_decay > 0.0 {
                (g + (&p * c.weight_decay)?)?
            } else {
                g.clone()
            };
            let update = match c.optimizer {
                OptimizerKind::Adam => {
                    let m = match &self.first[i] {
                        Some(m) => ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?,
                        None => (&g * (1.0 - c.beta1))?,
                    };
                    let v = match &self.second[i] {
                        Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                        None => (g.sqr()? * (1.0 - c.beta2))?,
                    };
                    let m_hat = (&m / (1.0 - c.beta1.powi(t)))?;
                    let v_hat = (&v / (1.0 - c.beta2.powi(t)))?;
                    let u = (m_hat / (v_hat.sqrt()? + ADAM_EPS)?)?;
                    self.first[i] = Some(m);
                    self.second[i] = Some(v);
                    u
                }
                OptimizerKind::Sgd => {
                    if c.momentum > 0.0 {
                        let buf = match &self.first[i] {
                            Some(b) => ((b * c.momentum)? + &g)?,
                            None => g,
                        };
                        self.first[i] = Some(buf.clone());
                        buf
                    } else {
                        g
                    }
                }
            };
            var.set(&(p - (update * self.lr)?)?)?;
        }
        Ok(())
    }
}
