use crate::error::{invalid, Result, TensorError};
use crate::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// L2 penalty folded into the gradient.
    Adam,
    /// Decoupled weight decay.
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            weight_decay,
            ..Self::adam(lr)
        }
    }
}

/// Adam / AdamW over a fixed, named parameter list.
pub struct Optimizer<T: Scalar> {
    pub config: OptimizerConfig,
    params: Vec<(String, Tensor<T>)>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, params: Vec<(String, Tensor<T>)>) -> Self {
        let m = params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect();
        let v = params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect();
        Self {
            config,
            params,
            m,
            v,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|(_, p)| p.zero_grad());
    }

    /// Applies one update. Every parameter must carry a gradient.
    pub fn step(&mut self) -> Result<()> {
        let grads = self
            .params
            .iter()
            .map(|(name, p)| p.grad().ok_or_else(|| TensorError::MissingGrad(name.clone())))
            .collect::<Result<Vec<_>>>()?;
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = T::from_f64_lossy(c.lr);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let eps = T::from_f64_lossy(c.eps);
        let wd = T::from_f64_lossy(c.weight_decay);
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let one = T::one();
        for (i, ((_, p), g)) in self.params.iter().zip(grads).enumerate() {
            let mut data = p.data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let mut gj = g[j];
                if c.kind == OptimizerKind::Adam && c.weight_decay != 0.0 {
                    gj += wd * data[j];
                }
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                if c.kind == OptimizerKind::AdamW {
                    let decay = lr * wd * data[j];
                    data[j] -= decay;
                }
                data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment buffers and step counter as named flat vectors, for checkpoints.
    pub fn state(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let mut out = Vec::with_capacity(2 * self.params.len() + 1);
        for (i, (name, p)) in self.params.iter().enumerate() {
            out.push((format!("opt/m/{name}"), p.shape().to_vec(), self.m[i].clone()));
            out.push((format!("opt/v/{name}"), p.shape().to_vec(), self.v[i].clone()));
        }
        // step split into two 16-bit halves so it survives an f32 payload
        let lo = T::from_u64(self.step & 0xffff).unwrap();
        let hi = T::from_u64(self.step >> 16).unwrap();
        out.push(("opt/step".to_string(), vec![2], vec![lo, hi]));
        out
    }

    pub fn load_state(&mut self, lookup: impl Fn(&str) -> Option<Vec<T>>) -> Result<()> {
        for (i, (name, p)) in self.params.iter().enumerate() {
            for (kind, buf) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("opt/{kind}/{name}");
                let vals = lookup(&key).ok_or_else(|| TensorError::Checkpoint(format!("missing {key}")))?;
                if vals.len() != p.numel() {
                    return invalid("load_state", format!("{key} has {} values", vals.len()));
                }
                *buf = vals;
            }
        }
        let step = lookup("opt/step").ok_or_else(|| TensorError::Checkpoint("missing opt/step".into()))?;
        if step.len() != 2 {
            return invalid("load_state", "opt/step must hold two values");
        }
        let lo = step[0].to_u64().unwrap_or(0);
        let hi = step[1].to_u64().unwrap_or(0);
        self.step = (hi << 16) | lo;
        Ok(())
    }
}
