//! Parameterized layers and the attention / timestep-embedding primitives.

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::{Scalar, Tensor};

/// Anything that owns named trainable tensors.
pub trait Module<T: Scalar> {
    /// Appends `(prefix + name, tensor)` for every parameter, in a stable order.
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>);

    fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.collect_params(prefix, &mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.named_params("").iter().map(|(_, t)| t.numel()).sum()
    }

    fn set_trainable(&self, on: bool) {
        for (_, p) in self.named_params("") {
            p.set_requires_grad(on);
            if !on {
                p.zero_grad();
            }
        }
    }
}

fn kaiming_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng).into_param()
}

#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: kaiming_uniform(&[fan_out, fan_in], fan_in, rng),
            bias: kaiming_uniform(&[fan_out], fan_in, rng),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_out, fan_in]).into_param(),
            bias: Tensor::zeros(&[fan_out]).into_param(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(&self.weight, Some(&self.bias))
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}weight"), self.weight.clone()));
        out.push((format!("{prefix}bias"), self.bias.clone()));
    }
}

#[derive(Debug, Clone)]
pub struct Conv3d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv3d<T> {
    /// Cubic kernel of side `k`; padding defaults to `k / 2`.
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = cin * k * k * k;
        Self {
            weight: kaiming_uniform(&[cout, cin, k, k, k], fan_in, rng),
            bias: kaiming_uniform(&[cout], fan_in, rng),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv3d(&self.weight, Some(&self.bias), self.stride, self.pad)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl<T: Scalar> Module<T> for Conv3d<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}weight"), self.weight.clone()));
        out.push((format!("{prefix}bias"), self.bias.clone()));
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm<T: Scalar> {
    pub groups: usize,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return invalid("GroupNorm", format!("{groups} groups for {channels} channels"));
        }
        Ok(Self {
            groups,
            gamma: Tensor::ones(&[channels]).into_param(),
            beta: Tensor::zeros(&[channels]).into_param(),
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.group_norm(self.groups, &self.gamma, &self.beta, self.eps)
    }
}

impl<T: Scalar> Module<T> for GroupNorm<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}gamma"), self.gamma.clone()));
        out.push((format!("{prefix}beta"), self.beta.clone()));
    }
}

/// Scaled dot-product attention `softmax(Q K^T / sqrt(d_k)) V`.
///
/// Accepts `(n_q, d_k), (n_kv, d_k), (n_kv, d_v)` or the same with a leading
/// batch axis.
pub fn attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let rank = q.ndim();
    if !(rank == 2 || rank == 3) || k.ndim() != rank || v.ndim() != rank {
        return shape_err(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        );
    }
    let dk = q.shape()[rank - 1];
    if k.shape()[rank - 1] != dk {
        return shape_err(
            "attention",
            format!("d_k mismatch: q {:?}, k {:?}", q.shape(), k.shape()),
        );
    }
    if k.shape()[rank - 2] != v.shape()[rank - 2] {
        return shape_err(
            "attention",
            format!("n_kv mismatch: k {:?}, v {:?}", k.shape(), v.shape()),
        );
    }
    let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
    let logits = q.matmul(&k.transpose_last()?)?.scale(scale);
    logits.softmax()?.matmul(v)
}

/// Sinusoidal embedding of a timestep: `dim / 2` sines followed by `dim / 2`
/// cosines over frequencies `10000^(-i / (dim/2))`.
pub fn time_embedding<T: Scalar>(t: usize, dim: usize) -> Result<Vec<T>> {
    if dim == 0 || dim % 2 != 0 {
        return invalid("time_embedding", format!("dimension {dim} must be even and positive"));
    }
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = T::from_f64_lossy(arg.sin());
        out[half + i] = T::from_f64_lossy(arg.cos());
    }
    Ok(out)
}

/// Stacks embeddings for a batch of timesteps into `[N, dim]`.
pub fn time_embedding_batch<T: Scalar>(ts: &[usize], dim: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(time_embedding::<T>(t, dim)?);
    }
    Tensor::from_vec(data, &[ts.len(), dim])
}
