//! Vector-quantized autoencoder over truncated distance fields, with the
//! cross-attention depth fusion used in its second training stage.

use bridgekit_tensor::{attention, no_grad, Conv3d, GroupNorm, Linear, Module, Optimizer, Scalar, Tensor};
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::grid::{DistanceKind, VoxelGrid};
use crate::state::StateDict;
use crate::views::ViewFeatures;

/// Largest of 8, 4, 2, 1 that divides `ch` with at least two channels per group.
pub(crate) fn groups_for(ch: usize) -> usize {
    [8, 4, 2].into_iter().find(|g| ch % g == 0 && ch / g >= 2).unwrap_or(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqVaeConfig {
    /// Grid edge length D.
    pub grid_dim: usize,
    /// Latent edge length d.
    pub latent_dim: usize,
    /// Latent channels C.
    pub channels: usize,
    /// Codebook entries K.
    pub codebook_size: usize,
    pub beta_c: f64,
    pub fusion: bool,
    pub enc_width: usize,
    pub dec_width: usize,
    pub feature_channels: usize,
    /// Depth tokens per shape (patches of the averaged feature map).
    pub feature_tokens: usize,
    pub attn_dim: usize,
    pub truncation: f32,
    /// Steps an entry may go unused before it is re-seeded.
    pub dead_code_window: u64,
}

impl Default for VqVaeConfig {
    fn default() -> Self {
        Self {
            grid_dim: 16,
            latent_dim: 4,
            channels: 2,
            codebook_size: 64,
            beta_c: 0.25,
            fusion: true,
            enc_width: 16,
            dec_width: 8,
            feature_channels: crate::views::PATCH_CHANNELS,
            feature_tokens: 16,
            attn_dim: 16,
            truncation: crate::grid::DEFAULT_TRUNCATION,
            dead_code_window: 2000,
        }
    }
}

impl VqVaeConfig {
    /// Number of ×2 resolution changes between grid and latent.
    pub fn levels(&self) -> Result<usize> {
        let (big, small) = (self.grid_dim, self.latent_dim);
        if small == 0 || small >= big || big % small != 0 || !(big / small).is_power_of_two() {
            return invalid(format!(
                "grid dim {big} must be a power-of-two multiple of latent dim {small}"
            ));
        }
        Ok((big / small).trailing_zeros() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.levels()?;
        if self.codebook_size < 2 {
            return invalid("codebook needs at least 2 entries");
        }
        if self.channels == 0 || self.enc_width == 0 || self.dec_width == 0 || self.attn_dim == 0 {
            return invalid("widths must be positive");
        }
        if self.fusion && (self.feature_channels == 0 || self.feature_tokens == 0) {
            return invalid("fusion needs feature channels and tokens");
        }
        if !(self.beta_c >= 0.0) || !(self.truncation > 0.0) {
            return invalid("beta_c must be non-negative and truncation positive");
        }
        Ok(())
    }

    pub fn latent_shape(&self, n: usize) -> [usize; 5] {
        let d = self.latent_dim;
        [n, self.channels, d, d, d]
    }
}

/// Stacks grids into `[N, 1, D, H, W]`, dividing by the truncation so
/// inputs lie in `[-1, 1]`.
pub fn grids_to_input<T: Scalar>(grids: &[&VoxelGrid]) -> Result<Tensor<T>> {
    grids_to_tensor(grids, true)
}

/// Stacks grids into `[N, 1, D, H, W]` in voxel units.
pub fn grids_to_target<T: Scalar>(grids: &[&VoxelGrid]) -> Result<Tensor<T>> {
    grids_to_tensor(grids, false)
}

fn grids_to_tensor<T: Scalar>(grids: &[&VoxelGrid], normalize: bool) -> Result<Tensor<T>> {
    let first = grids.first().ok_or_else(|| Error::Empty("no grids".into()))?;
    let dims = first.dims();
    let mut data = Vec::with_capacity(grids.len() * first.len());
    for g in grids {
        if g.dims() != dims {
            return Err(Error::DimMismatch(format!("{:?} vs {:?}", g.dims(), dims)));
        }
        let s = if normalize { 1.0 / g.truncation() as f64 } else { 1.0 };
        data.extend(g.values().iter().map(|&v| T::from_f64_lossy(v as f64 * s)));
    }
    Ok(Tensor::from_vec(data, &[grids.len(), 1, dims[2], dims[1], dims[0]])?)
}

/// Converts one decoded sample `[1, D, H, W]` slice back to a UDF grid.
pub fn tensor_to_udf<T: Scalar>(t: &Tensor<T>, sample: usize, truncation: f32) -> Result<VoxelGrid> {
    let s = t.shape();
    if s.len() != 5 || s[1] != 1 || sample >= s[0] {
        return Err(Error::DimMismatch(format!("cannot take sample {sample} of {s:?}")));
    }
    let n = s[2] * s[3] * s[4];
    let values = t.data()[sample * n..(sample + 1) * n]
        .iter()
        .map(|v| v.as_f32())
        .collect();
    VoxelGrid::from_clamped([s[4], s[3], s[2]], truncation, DistanceKind::Udf, values)
}

/// Depth-feature tokens `[N, h*w, C_f]`. Depth statistics are rescaled by
/// the grid extent so every channel is O(1).
pub fn features_to_tokens<T: Scalar>(fs: &[&ViewFeatures], grid_dim: usize) -> Result<Tensor<T>> {
    let first = fs.first().ok_or_else(|| Error::Empty("no feature maps".into()))?;
    let (c, n) = (first.channels, first.tokens());
    let inv = 1.0 / grid_dim as f64;
    let scales: Vec<f64> = (0..c)
        .map(|ch| match ch {
            0 => inv,
            1 => inv * inv,
            _ => 1.0,
        })
        .collect();
    let mut data = Vec::with_capacity(fs.len() * n * c);
    for f in fs {
        if (f.channels, f.tokens()) != (c, n) {
            return Err(Error::DimMismatch("feature maps differ in shape".into()));
        }
        for (i, v) in f.to_tokens().into_iter().enumerate() {
            data.push(T::from_f64_lossy(v as f64 * scales[i % c]));
        }
    }
    Ok(Tensor::from_vec(data, &[fs.len(), n, c])?)
}

/// Strided conv encoder: `1 × D³ → C × d³`.
pub struct Encoder<T: Scalar> {
    pub conv_in: Conv3d<T>,
    pub downs: Vec<(GroupNorm<T>, Conv3d<T>)>,
    pub norm_out: GroupNorm<T>,
    pub conv_out: Conv3d<T>,
    grid_dim: usize,
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &VqVaeConfig, rng: &mut R) -> Result<Self> {
        let levels = cfg.levels()?;
        let mut width = cfg.enc_width;
        let conv_in = Conv3d::new(1, width, 3, 1, rng);
        let mut downs = Vec::with_capacity(levels);
        for _ in 0..levels {
            let next = width * 2;
            downs.push((
                GroupNorm::new(groups_for(width), width)?,
                Conv3d::new(width, next, 3, 2, rng),
            ));
            width = next;
        }
        Ok(Self {
            conv_in,
            downs,
            norm_out: GroupNorm::new(groups_for(width), width)?,
            conv_out: Conv3d::new(width, cfg.channels, 1, 1, rng),
            grid_dim: cfg.grid_dim,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 5 || s[1] != 1 || s[2..].iter().any(|&v| v != self.grid_dim) {
            return Err(Error::DimMismatch(format!(
                "encoder expects [N, 1, {0}, {0}, {0}], got {s:?}",
                self.grid_dim
            )));
        }
        let mut h = self.conv_in.forward(x)?;
        for (norm, conv) in &self.downs {
            h = conv.forward(&norm.forward(&h)?.silu())?;
        }
        Ok(self.conv_out.forward(&self.norm_out.forward(&h)?.silu())?)
    }
}

impl<T: Scalar> Module<T> for Encoder<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.conv_in.collect_params(&format!("{prefix}conv_in/"), out);
        for (i, (norm, conv)) in self.downs.iter().enumerate() {
            norm.collect_params(&format!("{prefix}down{i}/norm/"), out);
            conv.collect_params(&format!("{prefix}down{i}/conv/"), out);
        }
        self.norm_out.collect_params(&format!("{prefix}norm_out/"), out);
        self.conv_out.collect_params(&format!("{prefix}conv_out/"), out);
    }
}

/// Nearest-upsampling conv decoder: `C × d³ → 1 × D³`, squashed into
/// `[0, truncation]`.
pub struct Decoder<T: Scalar> {
    pub conv_in: Conv3d<T>,
    pub ups: Vec<(GroupNorm<T>, Conv3d<T>)>,
    pub norm_out: GroupNorm<T>,
    pub conv_out: Conv3d<T>,
    truncation: T,
    channels: usize,
}

impl<T: Scalar> Decoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &VqVaeConfig, rng: &mut R) -> Result<Self> {
        let levels = cfg.levels()?;
        let mut width = cfg.dec_width << levels;
        let conv_in = Conv3d::new(cfg.channels, width, 3, 1, rng);
        let mut ups = Vec::with_capacity(levels);
        for _ in 0..levels {
            let next = width / 2;
            ups.push((
                GroupNorm::new(groups_for(width), width)?,
                Conv3d::new(width, next, 3, 1, rng),
            ));
            width = next;
        }
        Ok(Self {
            conv_in,
            ups,
            norm_out: GroupNorm::new(groups_for(width), width)?,
            conv_out: Conv3d::new(width, 1, 3, 1, rng),
            truncation: T::from_f64_lossy(cfg.truncation as f64),
            channels: cfg.channels,
        })
    }

    pub fn forward(&self, zq: &Tensor<T>) -> Result<Tensor<T>> {
        if zq.ndim() != 5 || zq.shape()[1] != self.channels {
            return Err(Error::DimMismatch(format!(
                "decoder expects {} latent channels, got {:?}",
                self.channels,
                zq.shape()
            )));
        }
        let mut h = self.conv_in.forward(zq)?;
        for (norm, conv) in &self.ups {
            h = conv.forward(&norm.forward(&h)?.silu().upsample_nearest2x()?)?;
        }
        let logits = self.conv_out.forward(&self.norm_out.forward(&h)?.silu())?;
        Ok(logits.sigmoid().scale(self.truncation))
    }
}

impl<T: Scalar> Module<T> for Decoder<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.conv_in.collect_params(&format!("{prefix}conv_in/"), out);
        for (i, (norm, conv)) in self.ups.iter().enumerate() {
            norm.collect_params(&format!("{prefix}up{i}/norm/"), out);
            conv.collect_params(&format!("{prefix}up{i}/conv/"), out);
        }
        self.norm_out.collect_params(&format!("{prefix}norm_out/"), out);
        self.conv_out.collect_params(&format!("{prefix}conv_out/"), out);
    }
}

/// Cross-attention from latent tokens (queries) to depth-feature tokens
/// (keys and values), added residually. The output projection starts at
/// zero so a fresh fusion layer is the identity.
pub struct DepthFusion<T: Scalar> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    /// Learned bias per depth-token position, `[tokens, C_f]`.
    pub pos: Tensor<T>,
}

impl<T: Scalar> DepthFusion<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &VqVaeConfig, rng: &mut R) -> Self {
        Self {
            q: Linear::new(cfg.channels, cfg.attn_dim, rng),
            k: Linear::new(cfg.feature_channels, cfg.attn_dim, rng),
            v: Linear::new(cfg.feature_channels, cfg.attn_dim, rng),
            out: Linear::zeros(cfg.attn_dim, cfg.channels),
            pos: Tensor::zeros(&[cfg.feature_tokens, cfg.feature_channels]).into_param(),
        }
    }

    /// `z`: `[N, C, d, d, d]`; `feats`: `[N, tokens, C_f]`.
    pub fn forward(&self, z: &Tensor<T>, feats: &Tensor<T>) -> Result<Tensor<T>> {
        let zs = z.shape().to_vec();
        let n = zs[0];
        if feats.ndim() != 3 || feats.shape()[0] != n || feats.shape()[1..] != *self.pos.shape() {
            return Err(Error::DimMismatch(format!(
                "depth tokens {:?} for batch {n} and bias {:?}",
                feats.shape(),
                self.pos.shape()
            )));
        }
        let spatial = zs[2] * zs[3] * zs[4];
        let tokens = z.permute(&[0, 2, 3, 4, 1])?.reshape(&[n, spatial, zs[1]])?;
        let pos = self.pos.reshape(&[1, self.pos.shape()[0], self.pos.shape()[1]])?;
        let pos = Tensor::concat(&vec![&pos; n], 0)?;
        let f = feats.add(&pos)?;
        let a = attention(&self.q.forward(&tokens)?, &self.k.forward(&f)?, &self.v.forward(&f)?)?;
        let delta = self
            .out
            .forward(&a)?
            .reshape(&[n, zs[2], zs[3], zs[4], zs[1]])?
            .permute(&[0, 4, 1, 2, 3])?;
        Ok(z.add(&delta)?)
    }
}

impl<T: Scalar> Module<T> for DepthFusion<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.q.collect_params(&format!("{prefix}q/"), out);
        self.k.collect_params(&format!("{prefix}k/"), out);
        self.v.collect_params(&format!("{prefix}v/"), out);
        self.out.collect_params(&format!("{prefix}out/"), out);
        out.push((format!("{prefix}pos"), self.pos.clone()));
    }
}

/// `K × C` learnable entries with usage bookkeeping.
pub struct Codebook<T: Scalar> {
    pub entries: Tensor<T>,
    pub usage: Vec<u64>,
    /// Training step at which each entry was last selected (or re-seeded).
    pub last_used: Vec<u64>,
    /// Whether entries have been seeded from encoder outputs.
    pub seeded: bool,
}

impl<T: Scalar> Codebook<T> {
    pub fn new<R: Rng + ?Sized>(k: usize, c: usize, rng: &mut R) -> Self {
        let bound = 1.0 / k as f64;
        Self {
            entries: Tensor::uniform(&[k, c], -bound, bound, rng).into_param(),
            usage: vec![0; k],
            last_used: vec![0; k],
            seeded: false,
        }
    }

    pub fn from_entries(entries: Tensor<T>) -> Result<Self> {
        if entries.ndim() != 2 || entries.shape()[0] == 0 {
            return Err(Error::Empty("codebook has no entries".into()));
        }
        let k = entries.shape()[0];
        Ok(Self {
            entries: entries.into_param(),
            usage: vec![0; k],
            last_used: vec![0; k],
            seeded: true,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    /// Index of the nearest entry (squared L2) for each row of `tokens`;
    /// ties go to the lowest index.
    pub fn nearest(&self, tokens: &[T]) -> Vec<usize> {
        let c = self.dim();
        let cb = self.entries.data();
        tokens
            .chunks(c)
            .map(|tok| {
                let mut best = (0, T::infinity());
                for (i, e) in cb.chunks(c).enumerate() {
                    let d: T = tok.iter().zip(e).map(|(&a, &b)| (a - b) * (a - b)).sum();
                    if d < best.1 {
                        best = (i, d);
                    }
                }
                best.0
            })
            .collect()
    }

    /// Overwrites entry `i` with `value`.
    pub fn reseed(&mut self, i: usize, value: &[T], step: u64) {
        let c = self.dim();
        self.entries.data_mut()[i * c..(i + 1) * c].copy_from_slice(value);
        self.usage[i] = 0;
        self.last_used[i] = step;
    }

    /// Records selections at `step`, then re-seeds every entry idle for at
    /// least `window` steps from a random row of `tokens`. Returns the
    /// re-seeded entry ids.
    pub fn update_usage<R: Rng + ?Sized>(
        &mut self,
        indices: &[usize],
        tokens: &[T],
        step: u64,
        window: u64,
        rng: &mut R,
    ) -> Vec<usize> {
        for &i in indices {
            self.usage[i] += 1;
            self.last_used[i] = step;
        }
        let c = self.dim();
        let rows = tokens.len() / c;
        let mut reseeded = Vec::new();
        if window == 0 || rows == 0 {
            return reseeded;
        }
        for i in 0..self.len() {
            if step.saturating_sub(self.last_used[i]) >= window {
                let r = rng.random_range(0..rows);
                self.reseed(i, &tokens[r * c..(r + 1) * c], step);
                reseeded.push(i);
            }
        }
        reseeded
    }

    /// Seeds every entry from distinct random rows of `tokens` (with
    /// replacement once rows run out).
    pub fn seed_from<R: Rng + ?Sized>(&mut self, tokens: &[T], step: u64, rng: &mut R) {
        let c = self.dim();
        let rows = tokens.len() / c;
        if rows == 0 {
            return;
        }
        let mut order: Vec<usize> = (0..rows).collect();
        for i in 0..self.len() {
            let r = if i < rows {
                let j = rng.random_range(i..rows);
                order.swap(i, j);
                order[i]
            } else {
                rng.random_range(0..rows)
            };
            self.reseed(i, &tokens[r * c..(r + 1) * c], step);
        }
        self.seeded = true;
    }

    pub fn save_state(&self, prefix: &str, out: &mut StateDict) {
        out.put_u64s(format!("{prefix}usage"), &self.usage);
        out.put_u64s(format!("{prefix}last_used"), &self.last_used);
        out.put_u64s(format!("{prefix}seeded"), &[self.seeded as u64]);
    }

    pub fn load_state(&mut self, prefix: &str, s: &StateDict) -> Result<()> {
        let usage = s.u64s(&format!("{prefix}usage"))?;
        let last = s.u64s(&format!("{prefix}last_used"))?;
        if usage.len() != self.len() || last.len() != self.len() {
            return Err(Error::DimMismatch("codebook counters do not match K".into()));
        }
        self.usage = usage;
        self.last_used = last;
        self.seeded = s.u64s(&format!("{prefix}seeded"))?.first() == Some(&1);
        Ok(())
    }
}

impl<T: Scalar> Module<T> for Codebook<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}entries"), self.entries.clone()));
    }
}

/// Quantizer output. `quantized` carries exact codebook rows forward and
/// passes gradients straight through to the encoder output.
pub struct VqResult<T: Scalar> {
    pub quantized: Tensor<T>,
    pub indices: Vec<usize>,
    /// `‖zq − sg(z)‖²`, reaches the codebook.
    pub codebook_loss: Tensor<T>,
    /// `β_c ‖sg(zq) − z‖²`, reaches the encoder.
    pub commitment_loss: Tensor<T>,
}

/// Flattens `[N, C, d, d, d]` into `[N·d³, C]` tokens.
pub fn latent_tokens<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let s = z.shape();
    if s.len() != 5 {
        return Err(Error::DimMismatch(format!("latent must be 5-D, got {s:?}")));
    }
    Ok(z.permute(&[0, 2, 3, 4, 1])?
        .reshape(&[s[0] * s[2] * s[3] * s[4], s[1]])?)
}

fn tokens_to_latent<T: Scalar>(tokens: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    Ok(tokens
        .reshape(&[shape[0], shape[2], shape[3], shape[4], shape[1]])?
        .permute(&[0, 4, 1, 2, 3])?)
}

pub fn quantize<T: Scalar>(z: &Tensor<T>, cb: &Codebook<T>, beta_c: f64) -> Result<VqResult<T>> {
    if cb.is_empty() {
        return Err(Error::Empty("codebook has no entries".into()));
    }
    if z.ndim() != 5 || z.shape()[1] != cb.dim() {
        return Err(Error::DimMismatch(format!(
            "latent {:?} against a codebook of width {}",
            z.shape(),
            cb.dim()
        )));
    }
    let tokens = latent_tokens(z)?;
    let indices = cb.nearest(&tokens.data());
    let zq = cb.entries.gather_rows(&indices)?;
    let codebook_loss = zq.mse(&tokens.detach())?;
    let commitment_loss = zq.detach().mse(&tokens)?.scale(T::from_f64_lossy(beta_c));
    let st = tokens.straight_through(&zq.detach())?;
    Ok(VqResult {
        quantized: tokens_to_latent(&st, z.shape())?,
        indices,
        codebook_loss,
        commitment_loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn from_number(n: u32) -> Result<Stage> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            other => invalid(format!("stage must be 1 or 2, got {other}")),
        }
    }

    pub fn number(self) -> u32 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Complete-shape encoder, depth fusion, codebook and decoder.
pub struct VqVae<T: Scalar> {
    pub config: VqVaeConfig,
    pub encoder: Encoder<T>,
    pub fusion: Option<DepthFusion<T>>,
    pub codebook: Codebook<T>,
    pub decoder: Decoder<T>,
    fusion_active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqLosses {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub total: f64,
}

/// One training or evaluation batch. `complete` is the normalized encoder
/// input, `target` the TUDF in voxel units.
pub struct VqBatch<T: Scalar> {
    pub complete: Tensor<T>,
    pub target: Tensor<T>,
    pub feats: Option<Tensor<T>>,
}

impl<T: Scalar> VqBatch<T> {
    pub fn new(completes: &[&VoxelGrid], feats: Option<&[&ViewFeatures]>, grid_dim: usize) -> Result<Self> {
        Ok(Self {
            complete: grids_to_input(completes)?,
            target: grids_to_target(completes)?,
            feats: feats.map(|f| features_to_tokens(f, grid_dim)).transpose()?,
        })
    }
}

impl<T: Scalar> VqVae<T> {
    pub fn new<R: Rng + ?Sized>(config: VqVaeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(&config, rng)?;
        let fusion = config.fusion.then(|| DepthFusion::new(&config, rng));
        let codebook = Codebook::new(config.codebook_size, config.channels, rng);
        let decoder = Decoder::new(&config, rng)?;
        Ok(Self {
            config,
            encoder,
            fusion,
            codebook,
            decoder,
            fusion_active: false,
        })
    }

    /// Switches depth fusion on (second training stage onward).
    pub fn activate_fusion(&mut self) -> Result<()> {
        if self.fusion.is_none() {
            return invalid("fusion is disabled in the configuration");
        }
        self.fusion_active = true;
        Ok(())
    }

    pub fn fusion_active(&self) -> bool {
        self.fusion_active
    }

    /// `E_c(X)`, fused with depth tokens when fusion is active.
    pub fn encode_complete(&self, x: &Tensor<T>, feats: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let z = self.encoder.forward(x)?;
        match (self.fusion_active, &self.fusion) {
            (true, Some(f)) => {
                let feats =
                    feats.ok_or_else(|| Error::InvalidArgument("fusion is active but no depth features".into()))?;
                f.forward(&z, feats)
            }
            _ => Ok(z),
        }
    }

    pub fn quantize(&self, z: &Tensor<T>) -> Result<VqResult<T>> {
        quantize(z, &self.codebook, self.config.beta_c)
    }

    pub fn decode(&self, zq: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.config.latent_dim;
        if zq.ndim() != 5 || zq.shape()[2..] != [d, d, d] {
            return Err(Error::DimMismatch(format!(
                "latent {:?}, expected spatial {d}³",
                zq.shape()
            )));
        }
        self.decoder.forward(zq)
    }

    /// Quantizes a continuous latent and decodes it, without gradients.
    pub fn decode_latent(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        no_grad(|| {
            let q = self.quantize(z)?;
            self.decode(&q.quantized)
        })
    }

    /// Parameters trained in `stage`: fusion joins in stage two.
    pub fn stage_params(&self, stage: Stage) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.encoder.collect_params("e_c/", &mut out);
        if let (Stage::Two, Some(f)) = (stage, &self.fusion) {
            f.collect_params("fuse/", &mut out);
        }
        self.codebook.collect_params("cb/", &mut out);
        self.decoder.collect_params("dec/", &mut out);
        out
    }

    /// Forward pass and loss terms for a batch.
    pub fn losses(&self, batch: &VqBatch<T>) -> Result<(Tensor<T>, VqResult<T>, Tensor<T>)> {
        let z = self.encode_complete(&batch.complete, batch.feats.as_ref())?;
        let q = self.quantize(&z)?;
        let recon = self.decode(&q.quantized)?;
        let rec_loss = recon.mse(&batch.target)?;
        Ok((rec_loss, q, recon))
    }

    /// Mean absolute reconstruction error in voxels, without gradients.
    pub fn reconstruction_l1(&self, batch: &VqBatch<T>) -> Result<f64> {
        no_grad(|| {
            let (_, _, recon) = self.losses(batch)?;
            let (r, t) = (recon.data(), batch.target.data());
            let sum: f64 = r
                .iter()
                .zip(t.iter())
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .sum();
            Ok(sum / r.len() as f64)
        })
    }

    pub fn save_state(&self, out: &mut StateDict) {
        let mut params = Vec::new();
        self.encoder.collect_params("e_c/", &mut params);
        if let Some(f) = &self.fusion {
            f.collect_params("fuse/", &mut params);
        }
        self.codebook.collect_params("cb/", &mut params);
        self.decoder.collect_params("dec/", &mut params);
        out.put_params(&params);
        self.codebook.save_state("cb/", out);
        out.put_u64s("meta/fusion_active", &[self.fusion_active as u64]);
    }

    /// Restores weights and counters. Fusion weights are optional so a
    /// first-stage checkpoint can seed the second stage.
    pub fn load_state(&mut self, s: &StateDict) -> Result<()> {
        let mut params = Vec::new();
        self.encoder.collect_params("e_c/", &mut params);
        self.codebook.collect_params("cb/", &mut params);
        self.decoder.collect_params("dec/", &mut params);
        s.load_params(&params)?;
        if let Some(f) = &self.fusion {
            let fp = f.named_params("fuse/");
            if s.contains(&fp[0].0) {
                s.load_params(&fp)?;
            }
        }
        self.codebook.load_state("cb/", s)?;
        self.fusion_active = s.u64s("meta/fusion_active")?.first() == Some(&1);
        if self.fusion_active && self.fusion.is_none() {
            return invalid("checkpoint has active fusion but the configuration disables it");
        }
        Ok(())
    }
}

impl<T: Scalar> Module<T> for VqVae<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.encoder.collect_params(&format!("{prefix}e_c/"), out);
        if let Some(f) = &self.fusion {
            f.collect_params(&format!("{prefix}fuse/"), out);
        }
        self.codebook.collect_params(&format!("{prefix}cb/"), out);
        self.decoder.collect_params(&format!("{prefix}dec/"), out);
    }
}

/// One optimizer step on reconstruction + codebook + commitment loss.
///
/// The codebook is seeded from encoder outputs on its first step and idle
/// entries are re-seeded afterwards. `step` is the 1-based global step.
pub fn vq_training_step<T: Scalar, R: Rng + ?Sized>(
    model: &mut VqVae<T>,
    opt: &mut Optimizer<T>,
    batch: &VqBatch<T>,
    stage: Stage,
    step: u64,
    rng: &mut R,
) -> Result<VqLosses> {
    match stage {
        Stage::One if model.fusion_active => return invalid("first stage runs without fusion"),
        Stage::Two if !model.fusion_active => return invalid("second stage needs fusion activated"),
        Stage::Two if batch.feats.is_none() => return invalid("second stage needs rendered views"),
        _ => {}
    }
    if !model.codebook.seeded {
        let z = no_grad(|| model.encode_complete(&batch.complete, batch.feats.as_ref()))?;
        let tokens = latent_tokens(&z)?.to_vec();
        model.codebook.seed_from(&tokens, step, rng);
    }
    opt.zero_grad();
    let z = model.encode_complete(&batch.complete, batch.feats.as_ref())?;
    let q = model.quantize(&z)?;
    let rec = model.decode(&q.quantized)?.mse(&batch.target)?;
    let total = rec.add(&q.codebook_loss)?.add(&q.commitment_loss)?;
    let losses = VqLosses {
        reconstruction: rec.item().as_f64(),
        codebook: q.codebook_loss.item().as_f64(),
        commitment: q.commitment_loss.item().as_f64(),
        total: total.item().as_f64(),
    };
    if !losses.total.is_finite() {
        return invalid(format!("non-finite loss at step {step}"));
    }
    total.backward()?;
    opt.step()?;
    let tokens = latent_tokens(&z.detach())?.to_vec();
    let window = model.config.dead_code_window;
    model.codebook.update_usage(&q.indices, &tokens, step, window, rng);
    Ok(losses)
}
