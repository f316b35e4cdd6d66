//! Run configuration: one JSON document with a block per module, dot-path
//! overrides and a content fingerprint.

use std::path::Path;

use bridgekit::bridge::BridgeSchedule;
use bridgekit::denoiser::DenoiserConfig;
use bridgekit::grid::CorpusOptions;
use bridgekit::metrics::MetricsConfig;
use bridgekit::views::{View, PATCH_CHANNELS};
use bridgekit::vqvae::VqVaeConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "BRIDGEKIT_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub pairs: usize,
    pub truncation: f32,
    pub cameras_per_scan: usize,
    pub keep_fraction_bound: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        let c = CorpusOptions::default();
        Self {
            pairs: 32,
            truncation: c.truncation,
            cameras_per_scan: c.cameras_per_scan,
            keep_fraction_bound: c.keep_fraction_bound,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewsSection {
    pub views: Vec<String>,
    /// Patch edge of the depth descriptor, in pixels.
    pub patch: usize,
}

impl Default for ViewsSection {
    fn default() -> Self {
        Self {
            views: vec!["front".into(), "top".into(), "left".into()],
            patch: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub enabled: bool,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self { enabled: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqSection {
    #[serde(rename = "D")]
    pub grid_dim: usize,
    #[serde(rename = "d")]
    pub latent_dim: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    #[serde(rename = "K")]
    pub codebook_size: usize,
    pub beta_c: f64,
    pub fusion: FusionSection,
    pub enc_width: usize,
    pub dec_width: usize,
    pub attn_dim: usize,
    pub dead_code_window: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
}

impl Default for VqSection {
    fn default() -> Self {
        let v = VqVaeConfig::default();
        Self {
            grid_dim: v.grid_dim,
            latent_dim: v.latent_dim,
            channels: v.channels,
            codebook_size: v.codebook_size,
            beta_c: v.beta_c,
            fusion: FusionSection { enabled: v.fusion },
            enc_width: v.enc_width,
            dec_width: v.dec_width,
            attn_dim: v.attn_dim,
            dead_code_window: v.dead_code_window,
            lr: 2e-3,
            batch_size: 8,
            stage1_steps: 1500,
            stage2_steps: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeSection {
    #[serde(rename = "T")]
    pub t_max: usize,
    /// Peak increment; `null` picks the value giving `σ_T² = 1`.
    pub beta_max: Option<f64>,
    pub noise_scale: f64,
    pub infer_steps: usize,
    pub deterministic: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
}

impl Default for BridgeSection {
    fn default() -> Self {
        Self {
            t_max: 50,
            beta_max: None,
            noise_scale: 1.0,
            infer_steps: 3,
            deterministic: true,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 8,
            steps: 1500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSection {
    pub base_width: usize,
    pub multipliers: Vec<usize>,
    pub time_dim: usize,
    pub attention: bool,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        Self {
            base_width: d.base_width,
            multipliers: d.multipliers,
            time_dim: d.time_dim,
            attention: d.attention,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub tau_mc: f32,
    pub tau_occ: f32,
    pub f1_fraction: f64,
    pub surface_points: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        let m = MetricsConfig::default();
        Self {
            tau_mc: m.tau_mc,
            tau_occ: m.tau_occ,
            f1_fraction: m.f1_fraction,
            surface_points: m.surface_points,
        }
    }
}

/// Bookkeeping that does not change any artifact; left out of the
/// fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub checkpoint_every: u64,
    /// Progress line cadence on stderr; 0 silences it.
    pub print_every: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            checkpoint_every: 100,
            print_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridSection,
    pub views: ViewsSection,
    pub vqvae: VqSection,
    pub bridge: BridgeSection,
    pub denoiser: DenoiserSection,
    pub metrics: MetricsSection,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            grid: GridSection::default(),
            views: ViewsSection::default(),
            vqvae: VqSection::default(),
            bridge: BridgeSection::default(),
            denoiser: DenoiserSection::default(),
            metrics: MetricsSection::default(),
            run: RunSection::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> CliResult<()> {
    if ok {
        Ok(())
    } else {
        Err(config_err(msg()))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| config_err(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Sets `key` (dot path, e.g. `bridge.steps`) to `raw`, parsed as JSON
    /// when possible and as a string otherwise. The key must already exist.
    pub fn set(&mut self, key: &str, raw: &str) -> CliResult<()> {
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        let mut node = &mut root;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| config_err(format!("unknown config key {key}")))?;
        }
        *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        *self = serde_json::from_value(root).map_err(|e| config_err(format!("{key}={raw}: {e}")))?;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, sets: &[S]) -> CliResult<()> {
        for s in sets {
            let s = s.as_ref();
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| config_err(format!("override {s:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Replaces the seed from `BRIDGEKIT_SEED` when it is set.
    pub fn apply_env(&mut self) -> CliResult<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| config_err(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical (sorted-key, compact) JSON of everything
    /// except the `run` block, as lowercase hex.
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("run");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn views(&self) -> CliResult<Vec<View>> {
        let views = self
            .views
            .views
            .iter()
            .map(|s| View::parse(s).map_err(|e| config_err(format!("views.views: {e}"))))
            .collect::<CliResult<Vec<_>>>()?;
        Ok(views)
    }

    pub fn vq_config(&self) -> VqVaeConfig {
        let v = &self.vqvae;
        let per_side = v.grid_dim / self.views.patch.max(1);
        VqVaeConfig {
            grid_dim: v.grid_dim,
            latent_dim: v.latent_dim,
            channels: v.channels,
            codebook_size: v.codebook_size,
            beta_c: v.beta_c,
            fusion: v.fusion.enabled,
            enc_width: v.enc_width,
            dec_width: v.dec_width,
            feature_channels: PATCH_CHANNELS,
            feature_tokens: per_side * per_side,
            attn_dim: v.attn_dim,
            truncation: self.grid.truncation,
            dead_code_window: v.dead_code_window,
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        let d = &self.denoiser;
        DenoiserConfig {
            in_channels: self.vqvae.channels,
            base_width: d.base_width,
            multipliers: d.multipliers.clone(),
            time_dim: d.time_dim,
            attention: d.attention,
        }
    }

    pub fn schedule(&self) -> CliResult<BridgeSchedule> {
        let b = &self.bridge;
        let s = match b.beta_max {
            Some(bm) => BridgeSchedule::new(b.t_max, bm),
            None => BridgeSchedule::with_terminal_variance(b.t_max, 1.0),
        };
        s.map_err(|e| config_err(format!("bridge: {e}")))
    }

    pub fn corpus_options(&self) -> CorpusOptions {
        CorpusOptions {
            dims: [self.vqvae.grid_dim; 3],
            truncation: self.grid.truncation,
            cameras_per_scan: self.grid.cameras_per_scan,
            keep_fraction_bound: self.grid.keep_fraction_bound,
        }
    }

    pub fn metrics_config(&self) -> MetricsConfig {
        let m = &self.metrics;
        MetricsConfig {
            tau_mc: m.tau_mc,
            tau_occ: m.tau_occ,
            f1_fraction: m.f1_fraction,
            surface_points: m.surface_points,
            seed: self.seed,
        }
    }

    /// Checks every block and their cross-constraints before any stage runs.
    pub fn validate(&self) -> CliResult<()> {
        let g = &self.grid;
        check(g.pairs >= 1, || "grid.pairs must be at least 1".into())?;
        check(g.truncation > 0.0 && g.truncation.is_finite(), || {
            format!("grid.truncation must be positive, got {}", g.truncation)
        })?;
        check((1..=6).contains(&g.cameras_per_scan), || {
            format!("grid.cameras_per_scan must be in 1..=6, got {}", g.cameras_per_scan)
        })?;
        check((0.0..=1.0).contains(&g.keep_fraction_bound), || {
            "grid.keep_fraction_bound must lie in [0, 1]".into()
        })?;

        let views = self.views()?;
        check(!views.is_empty(), || "views.views must not be empty".into())?;
        for (i, v) in views.iter().enumerate() {
            check(!views[..i].contains(v), || format!("views.views lists {v:?} twice"))?;
        }
        let p = self.views.patch;
        let dim = self.vqvae.grid_dim;
        check(p >= 1 && dim % p == 0, || {
            format!("views.patch {p} must divide vqvae.D {dim}")
        })?;

        let v = &self.vqvae;
        self.vq_config()
            .validate()
            .map_err(|e| config_err(format!("vqvae: {e}")))?;
        check(v.lr > 0.0 && v.lr.is_finite(), || "vqvae.lr must be positive".into())?;
        check(v.batch_size >= 1, || "vqvae.batch_size must be at least 1".into())?;
        check(v.stage1_steps >= 1, || "vqvae.stage1_steps must be at least 1".into())?;
        check(!v.fusion.enabled || v.stage2_steps >= 1, || {
            "vqvae.stage2_steps must be at least 1 when fusion is enabled".into()
        })?;

        let dc = self.denoiser_config();
        dc.validate().map_err(|e| config_err(format!("denoiser: {e}")))?;
        check(v.latent_dim % dc.spatial_divisor() == 0, || {
            format!(
                "vqvae.d {} must be divisible by 2^(levels-1) = {}",
                v.latent_dim,
                dc.spatial_divisor()
            )
        })?;

        let b = &self.bridge;
        self.schedule()?;
        check((1..=b.t_max).contains(&b.infer_steps), || {
            format!(
                "bridge.infer_steps must be in 1..=T ({}), got {}",
                b.t_max, b.infer_steps
            )
        })?;
        check(b.noise_scale >= 0.0 && b.noise_scale.is_finite(), || {
            "bridge.noise_scale must be non-negative".into()
        })?;
        check(b.lr > 0.0 && b.lr.is_finite(), || "bridge.lr must be positive".into())?;
        check(b.weight_decay >= 0.0, || {
            "bridge.weight_decay must be non-negative".into()
        })?;
        check(b.batch_size >= 1, || "bridge.batch_size must be at least 1".into())?;
        check(b.steps >= 1, || "bridge.steps must be at least 1".into())?;

        let m = &self.metrics;
        check(m.tau_mc.is_finite(), || "metrics.tau_mc must be finite".into())?;
        check(m.tau_occ > 0.0, || "metrics.tau_occ must be positive".into())?;
        check(m.f1_fraction > 0.0, || "metrics.f1_fraction must be positive".into())?;
        check(m.surface_points >= 1, || {
            "metrics.surface_points must be at least 1".into()
        })?;

        check(self.run.checkpoint_every >= 1, || {
            "run.checkpoint_every must be at least 1".into()
        })?;
        Ok(())
    }
}
