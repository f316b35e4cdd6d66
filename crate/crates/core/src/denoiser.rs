//! ε-prediction 3-D UNet over latent codes and the joint bridge training
//! step for the denoiser and the partial-shape encoder.

use bridgekit_tensor::{
    attention, no_grad, time_embedding_batch, Conv3d, GroupNorm, Linear, Module, Optimizer, Scalar, Tensor,
};
use rand::Rng;

use crate::bridge::{gaussian_like, inject_stochasticity, BridgeSchedule, EpsModel};
use crate::error::{invalid, Error, Result};
use crate::grid::VoxelGrid;
use crate::views::ViewFeatures;
use crate::vqvae::{features_to_tokens, grids_to_input, groups_for, Encoder, VqVae};

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Width multiplier per level; the level count is its length.
    pub multipliers: Vec<usize>,
    pub time_dim: usize,
    pub attention: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            base_width: 32,
            multipliers: vec![1, 2],
            time_dim: 64,
            attention: true,
        }
    }
}

impl DenoiserConfig {
    pub fn levels(&self) -> usize {
        self.multipliers.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.multipliers.iter().map(|m| m * self.base_width).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.multipliers.is_empty() || self.multipliers.contains(&0)
        {
            return invalid("denoiser widths and levels must be positive");
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return invalid(format!("time dim {} must be even and positive", self.time_dim));
        }
        Ok(())
    }

    /// Smallest latent edge the level count supports.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }
}

/// Pre-activation residual block with an additive timestep bias after the
/// first normalization.
pub struct ResBlock<T: Scalar> {
    pub norm1: GroupNorm<T>,
    pub time: Linear<T>,
    pub conv1: Conv3d<T>,
    pub norm2: GroupNorm<T>,
    pub conv2: Conv3d<T>,
    pub skip: Option<Conv3d<T>>,
}

impl<T: Scalar> ResBlock<T> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, temb: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(groups_for(cin), cin)?,
            time: Linear::new(temb, cin, rng),
            conv1: Conv3d::new(cin, cout, 3, 1, rng),
            norm2: GroupNorm::new(groups_for(cout), cout)?,
            conv2: Conv3d::new(cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv3d::new(cin, cout, 1, 1, rng)),
        })
    }

    pub fn forward(&self, x: &Tensor<T>, temb: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.norm1.forward(x)?.add_channel_bias(&self.time.forward(temb)?)?;
        let h = self.conv1.forward(&h.silu())?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu())?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok(skip.add(&h)?)
    }
}

impl<T: Scalar> Module<T> for ResBlock<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.norm1.collect_params(&format!("{prefix}norm1/"), out);
        self.time.collect_params(&format!("{prefix}time/"), out);
        self.conv1.collect_params(&format!("{prefix}conv1/"), out);
        self.norm2.collect_params(&format!("{prefix}norm2/"), out);
        self.conv2.collect_params(&format!("{prefix}conv2/"), out);
        if let Some(s) = &self.skip {
            s.collect_params(&format!("{prefix}skip/"), out);
        }
    }
}

/// Single-head self-attention over spatial positions, residual.
pub struct AttentionBlock<T: Scalar> {
    pub norm: GroupNorm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
}

impl<T: Scalar> AttentionBlock<T> {
    pub fn new<R: Rng + ?Sized>(ch: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(groups_for(ch), ch)?,
            q: Linear::new(ch, ch, rng),
            k: Linear::new(ch, ch, rng),
            v: Linear::new(ch, ch, rng),
            out: Linear::new(ch, ch, rng),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape().to_vec();
        let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let tokens = self
            .norm
            .forward(x)?
            .permute(&[0, 2, 3, 4, 1])?
            .reshape(&[n, d * h * w, c])?;
        let a = attention(
            &self.q.forward(&tokens)?,
            &self.k.forward(&tokens)?,
            &self.v.forward(&tokens)?,
        )?;
        let y = self
            .out
            .forward(&a)?
            .reshape(&[n, d, h, w, c])?
            .permute(&[0, 4, 1, 2, 3])?;
        Ok(x.add(&y)?)
    }
}

impl<T: Scalar> Module<T> for AttentionBlock<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.norm.collect_params(&format!("{prefix}norm/"), out);
        self.q.collect_params(&format!("{prefix}q/"), out);
        self.k.collect_params(&format!("{prefix}k/"), out);
        self.v.collect_params(&format!("{prefix}v/"), out);
        self.out.collect_params(&format!("{prefix}out/"), out);
    }
}

/// UNet: per level a ResBlock (then a stride-2 conv between levels), a
/// middle ResBlock–Attention–ResBlock, and a mirrored decoder whose
/// ResBlocks take the matching encoder output concatenated on channels.
pub struct Denoiser<T: Scalar> {
    pub config: DenoiserConfig,
    pub time1: Linear<T>,
    pub time2: Linear<T>,
    pub conv_in: Conv3d<T>,
    pub down_blocks: Vec<ResBlock<T>>,
    pub downsamples: Vec<Conv3d<T>>,
    pub mid1: ResBlock<T>,
    pub mid_attn: Option<AttentionBlock<T>>,
    pub mid2: ResBlock<T>,
    pub up_blocks: Vec<ResBlock<T>>,
    pub upsamples: Vec<Conv3d<T>>,
    pub norm_out: GroupNorm<T>,
    pub conv_out: Conv3d<T>,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        let levels = widths.len();
        let temb = 2 * config.time_dim;
        let time1 = Linear::new(config.time_dim, temb, rng);
        let time2 = Linear::new(temb, temb, rng);
        let conv_in = Conv3d::new(config.in_channels, widths[0], 3, 1, rng);
        let mut down_blocks = Vec::with_capacity(levels);
        let mut downsamples = Vec::with_capacity(levels - 1);
        let mut prev = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            down_blocks.push(ResBlock::new(prev, w, temb, rng)?);
            if i + 1 < levels {
                downsamples.push(Conv3d::new(w, w, 3, 2, rng));
            }
            prev = w;
        }
        let top = widths[levels - 1];
        let mid1 = ResBlock::new(top, top, temb, rng)?;
        let mid_attn = config.attention.then(|| AttentionBlock::new(top, rng)).transpose()?;
        let mid2 = ResBlock::new(top, top, temb, rng)?;
        let mut up_blocks = Vec::with_capacity(levels);
        let mut upsamples = Vec::with_capacity(levels - 1);
        let mut cur = top;
        for i in (0..levels).rev() {
            up_blocks.push(ResBlock::new(cur + widths[i], widths[i], temb, rng)?);
            cur = widths[i];
            if i > 0 {
                upsamples.push(Conv3d::new(cur, cur, 3, 1, rng));
            }
        }
        Ok(Self {
            norm_out: GroupNorm::new(groups_for(widths[0]), widths[0])?,
            conv_out: Conv3d::new(widths[0], config.in_channels, 3, 1, rng),
            config,
            time1,
            time2,
            conv_in,
            down_blocks,
            downsamples,
            mid1,
            mid_attn,
            mid2,
            up_blocks,
            upsamples,
        })
    }

    /// ε̂ for a batch `[N, C, d, d, d]` with one timestep per sample.
    pub fn forward(&self, z_t: &Tensor<T>, ts: &[usize]) -> Result<Tensor<T>> {
        let s = z_t.shape();
        if s.len() != 5 || s[1] != self.config.in_channels {
            return Err(Error::DimMismatch(format!(
                "denoiser expects [N, {}, d, d, d], got {s:?}",
                self.config.in_channels
            )));
        }
        let div = self.config.spatial_divisor();
        if s[2..].iter().any(|&v| v == 0 || v % div != 0) {
            return Err(Error::DimMismatch(format!(
                "latent spatial dims {:?} not divisible by {div}",
                &s[2..]
            )));
        }
        if ts.len() != s[0] {
            return Err(Error::DimMismatch(format!("{} timesteps for batch {}", ts.len(), s[0])));
        }
        let emb = time_embedding_batch::<T>(ts, self.config.time_dim)?;
        let temb = self.time2.forward(&self.time1.forward(&emb)?.silu())?;
        let mut h = self.conv_in.forward(z_t)?;
        let mut skips = Vec::with_capacity(self.down_blocks.len());
        for (i, block) in self.down_blocks.iter().enumerate() {
            h = block.forward(&h, &temb)?;
            skips.push(h.clone());
            if let Some(down) = self.downsamples.get(i) {
                h = down.forward(&h)?;
            }
        }
        h = self.mid1.forward(&h, &temb)?;
        if let Some(attn) = &self.mid_attn {
            h = attn.forward(&h)?;
        }
        h = self.mid2.forward(&h, &temb)?;
        for (j, block) in self.up_blocks.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = block.forward(&Tensor::concat(&[&h, &skip], 1)?, &temb)?;
            if let Some(up) = self.upsamples.get(j) {
                h = up.forward(&h.upsample_nearest2x()?)?;
            }
        }
        Ok(self.conv_out.forward(&self.norm_out.forward(&h)?.silu())?)
    }
}

impl<T: Scalar> Module<T> for Denoiser<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.time1.collect_params(&format!("{prefix}time1/"), out);
        self.time2.collect_params(&format!("{prefix}time2/"), out);
        self.conv_in.collect_params(&format!("{prefix}conv_in/"), out);
        for (i, b) in self.down_blocks.iter().enumerate() {
            b.collect_params(&format!("{prefix}down{i}/"), out);
        }
        for (i, c) in self.downsamples.iter().enumerate() {
            c.collect_params(&format!("{prefix}downsample{i}/"), out);
        }
        self.mid1.collect_params(&format!("{prefix}mid1/"), out);
        if let Some(a) = &self.mid_attn {
            a.collect_params(&format!("{prefix}mid_attn/"), out);
        }
        self.mid2.collect_params(&format!("{prefix}mid2/"), out);
        for (i, b) in self.up_blocks.iter().enumerate() {
            b.collect_params(&format!("{prefix}up{i}/"), out);
        }
        for (i, c) in self.upsamples.iter().enumerate() {
            c.collect_params(&format!("{prefix}upsample{i}/"), out);
        }
        self.norm_out.collect_params(&format!("{prefix}norm_out/"), out);
        self.conv_out.collect_params(&format!("{prefix}conv_out/"), out);
    }
}

impl<T: Scalar> EpsModel<T> for Denoiser<T> {
    fn predict_eps(&self, z_t: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let n = z_t.shape().first().copied().unwrap_or(0);
        self.forward(z_t, &vec![t; n])
    }
}

/// Inputs for a bridge step: normalized complete and partial grids plus
/// optional depth tokens for the fused complete-shape encoder.
pub struct BridgeBatch<T: Scalar> {
    pub complete: Tensor<T>,
    pub partial: Tensor<T>,
    pub feats: Option<Tensor<T>>,
}

impl<T: Scalar> BridgeBatch<T> {
    pub fn new(
        completes: &[&VoxelGrid],
        partials: &[&VoxelGrid],
        feats: Option<&[&ViewFeatures]>,
        grid_dim: usize,
    ) -> Result<Self> {
        if completes.len() != partials.len() {
            return Err(Error::DimMismatch("complete and partial batches differ in size".into()));
        }
        Ok(Self {
            complete: grids_to_input(completes)?,
            partial: grids_to_input(partials)?,
            feats: feats.map(|f| features_to_tokens(f, grid_dim)).transpose()?,
        })
    }

    pub fn len(&self) -> usize {
        self.complete.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sampled training quantities, kept for inspection and tests.
pub struct BridgeSample<T: Scalar> {
    pub z0: Tensor<T>,
    pub z1: Tensor<T>,
    pub ts: Vec<usize>,
    pub z_t: Tensor<T>,
    pub target: Tensor<T>,
}

/// Draws `t ~ U{1..T−1}` per sample and builds `z_t` and the ε target,
/// with gradients reaching `e_p` through the far endpoint.
pub fn bridge_sample<T: Scalar, R: Rng + ?Sized>(
    vq: &VqVae<T>,
    e_p: &Encoder<T>,
    batch: &BridgeBatch<T>,
    sched: &BridgeSchedule,
    noise_scale: f64,
    rng: &mut R,
) -> Result<BridgeSample<T>> {
    let z0 = no_grad(|| vq.encode_complete(&batch.complete, batch.feats.as_ref()))?;
    let z1 = inject_stochasticity(&e_p.forward(&batch.partial)?, noise_scale, rng)?;
    let n = batch.len();
    let t_max = sched.t_max();
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..t_max)).collect();
    let (mut w0, mut w1, mut sd, mut inv_sigma) = (vec![], vec![], vec![], vec![]);
    for &t in &ts {
        let c = sched.posterior(t)?;
        w0.push(T::from_f64_lossy(c.w0));
        w1.push(T::from_f64_lossy(c.w1));
        sd.push(T::from_f64_lossy(c.var.sqrt()));
        inv_sigma.push(T::from_f64_lossy(1.0 / sched.sigma(t)));
    }
    let noise = gaussian_like(&z0, rng);
    let z_t = z0
        .mul_per_sample(&w0)?
        .add(&z1.mul_per_sample(&w1)?)?
        .add(&noise.mul_per_sample(&sd)?)?;
    let target = z_t.sub(&z0)?.mul_per_sample(&inv_sigma)?;
    Ok(BridgeSample {
        z0,
        z1,
        ts,
        z_t,
        target,
    })
}

/// Mean squared ε error of `den` on a sampled batch (graph retained).
pub fn eps_loss<T: Scalar>(den: &Denoiser<T>, s: &BridgeSample<T>) -> Result<Tensor<T>> {
    Ok(den.forward(&s.z_t, &s.ts)?.mse(&s.target)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeLosses {
    pub eps: f64,
}

/// One joint step of the denoiser and `e_p`; the VQ-VAE stays frozen.
/// `opt` must hold exactly the denoiser and `e_p` parameters.
pub fn train_bridge_step<T: Scalar, R: Rng + ?Sized>(
    vq: &VqVae<T>,
    e_p: &Encoder<T>,
    den: &Denoiser<T>,
    sched: &BridgeSchedule,
    opt: &mut Optimizer<T>,
    batch: &BridgeBatch<T>,
    noise_scale: f64,
    rng: &mut R,
) -> Result<BridgeLosses> {
    vq.set_trainable(false);
    opt.zero_grad();
    let sample = bridge_sample(vq, e_p, batch, sched, noise_scale, rng)?;
    let loss = eps_loss(den, &sample)?;
    let eps = loss.item().as_f64();
    if !eps.is_finite() {
        return invalid("non-finite bridge loss");
    }
    loss.backward()?;
    opt.step()?;
    Ok(BridgeLosses { eps })
}
