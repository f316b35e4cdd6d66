//! Trained networks bundled for completion.

use bridgekit_tensor::{no_grad, Module, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bridge::{inject_stochasticity, sample_completion, BridgeSchedule};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::grid::{ShapePair, VoxelGrid};
use crate::metrics::Completer;
use crate::state::StateDict;
use crate::vqvae::{grids_to_input, tensor_to_udf, Encoder, VqVae};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceConfig {
    pub steps: usize,
    pub noise_scale: f64,
    pub deterministic: bool,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            steps: 3,
            noise_scale: 1.0,
            deterministic: true,
            seed: 0,
        }
    }
}

/// Frozen VQ-VAE, partial-shape encoder, denoiser and schedule.
pub struct CompletionModel<T: Scalar> {
    pub vq: VqVae<T>,
    pub e_p: Encoder<T>,
    pub denoiser: Denoiser<T>,
    pub schedule: BridgeSchedule,
    pub inference: InferenceConfig,
}

impl<T: Scalar> CompletionModel<T> {
    /// `E_p` of a partial scan, `[1, C, d, d, d]`.
    pub fn encode_partial(&self, partial: &VoxelGrid) -> Result<Tensor<T>> {
        no_grad(|| self.e_p.forward(&grids_to_input(&[partial])?))
    }

    /// Bridge sample from a partial latent to `ẑ_0`.
    pub fn complete_latent<R: Rng + ?Sized>(&self, partial: &VoxelGrid, rng: &mut R) -> Result<Tensor<T>> {
        no_grad(|| {
            let z1 = inject_stochasticity(&self.encode_partial(partial)?, self.inference.noise_scale, rng)?;
            sample_completion(
                &self.denoiser,
                &z1,
                self.inference.steps,
                &self.schedule,
                rng,
                self.inference.deterministic,
            )
        })
    }

    /// Completed UDF for one partial scan; `seed` fixes every random draw.
    pub fn complete_grid(&self, partial: &VoxelGrid, seed: u64) -> Result<VoxelGrid> {
        if partial.dims() != [self.vq.config.grid_dim; 3] {
            return Err(Error::DimMismatch(format!(
                "model expects {0}³ grids, got {1:?}",
                self.vq.config.grid_dim,
                partial.dims()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z0 = self.complete_latent(partial, &mut rng)?;
        let decoded = self.vq.decode_latent(&z0)?;
        tensor_to_udf(&decoded, 0, self.vq.config.truncation)
    }

    pub fn save_state(&self, out: &mut StateDict) {
        self.vq.save_state(out);
        out.put_params(&self.e_p.named_params("e_p/"));
        out.put_params(&self.denoiser.named_params("den/"));
    }

    pub fn load_state(&mut self, s: &StateDict) -> Result<()> {
        self.vq.load_state(s)?;
        s.load_params(&self.e_p.named_params("e_p/"))?;
        s.load_params(&self.denoiser.named_params("den/"))
    }
}

impl<T: Scalar> Completer for CompletionModel<T> {
    fn complete(&self, pair: &ShapePair, index: usize) -> Result<VoxelGrid> {
        self.complete_grid(&pair.partial, self.inference.seed.wrapping_add(index as u64))
    }
}
