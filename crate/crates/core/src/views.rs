//! Orthographic depth rendering from voxel grids, patch descriptors that
//! stand in for a frozen 2-D feature backbone, and view averaging.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{DistanceKind, VoxelGrid};

/// Iso level used when rendering unsigned fields, in voxels.
pub const UDF_ISO: f32 = 1.0;
pub const VFEA_MAGIC: &[u8; 4] = b"VFEA";
pub const VFEA_VERSION: u32 = 1;
/// Channels produced by [`PatchDescriptor`].
pub const PATCH_CHANNELS: usize = 5;

/// Canonical viewpoints. Pixel `(u, v)` is stored at `v * width + u`.
///
/// | view  | ray direction | u | v |
/// |-------|---------------|---|---|
/// | Front | +z from z = 0 | x | y |
/// | Top   | -y from the top face | x | z |
/// | Left  | +x from x = 0 | z | y |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Front,
    Top,
    Left,
}

impl View {
    pub const CANONICAL: [View; 3] = [View::Front, View::Top, View::Left];

    pub fn parse(s: &str) -> Result<View> {
        match s.trim().to_ascii_lowercase().as_str() {
            "front" => Ok(View::Front),
            "top" => Ok(View::Top),
            "left" => Ok(View::Left),
            other => invalid(format!("unknown view {other:?}")),
        }
    }

    /// Parses a comma-separated list such as `front,top,left`.
    pub fn parse_list(s: &str) -> Result<Vec<View>> {
        let views: Vec<View> = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(View::parse)
            .collect::<Result<_>>()?;
        if views.is_empty() {
            return invalid("empty view list");
        }
        Ok(views)
    }

    /// `(width, height, extent along the ray)` for a grid of `dims`.
    fn geometry(self, dims: [usize; 3]) -> (usize, usize, usize) {
        let [nx, ny, nz] = dims;
        match self {
            View::Front => (nx, ny, nz),
            View::Top => (nx, nz, ny),
            View::Left => (nz, ny, nx),
        }
    }

    /// Grid coordinates of sample `s` along the ray through pixel `(u, v)`.
    fn sample(self, dims: [usize; 3], u: usize, v: usize, s: usize) -> (usize, usize, usize) {
        match self {
            View::Front => (u, v, s),
            View::Top => (u, dims[1] - 1 - s, v),
            View::Left => (s, v, u),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub view: View,
    pub width: usize,
    pub height: usize,
    /// Distance from the first voxel centre on the ray; `f32::INFINITY` marks a miss.
    pub depths: Vec<f32>,
    /// Largest possible hit depth (`extent - 1`).
    pub max_depth: f32,
}

impl DepthMap {
    pub fn at(&self, u: usize, v: usize) -> f32 {
        self.depths[v * self.width + u]
    }

    pub fn is_hit(&self, u: usize, v: usize) -> bool {
        self.at(u, v).is_finite()
    }

    pub fn hit_count(&self) -> usize {
        self.depths.iter().filter(|d| d.is_finite()).count()
    }

    /// Misses replaced by the full axis extent.
    pub fn filled(&self) -> Vec<f32> {
        self.depths
            .iter()
            .map(|&d| if d.is_finite() { d } else { self.max_depth })
            .collect()
    }

    /// Transposed copy, swapping the roles of `u` and `v`.
    pub fn transposed(&self) -> DepthMap {
        let mut depths = vec![0.0; self.depths.len()];
        for v in 0..self.height {
            for u in 0..self.width {
                depths[u * self.height + v] = self.at(u, v);
            }
        }
        DepthMap {
            view: self.view,
            width: self.height,
            height: self.width,
            depths,
            max_depth: self.max_depth,
        }
    }
}

/// Default iso level: zero for signed fields, [`UDF_ISO`] for unsigned ones.
pub fn default_iso(kind: DistanceKind) -> f32 {
    match kind {
        DistanceKind::Sdf => 0.0,
        DistanceKind::Udf => UDF_ISO,
    }
}

pub fn render_depth(g: &VoxelGrid, view: View) -> DepthMap {
    render_depth_at(g, view, default_iso(g.kind()))
}

/// First crossing of `iso` along each orthographic ray, linearly
/// interpolated between the last sample above and the first at or below.
pub fn render_depth_at(g: &VoxelGrid, view: View, iso: f32) -> DepthMap {
    let dims = g.dims();
    let (width, height, extent) = view.geometry(dims);
    let mut depths = vec![f32::INFINITY; width * height];
    for v in 0..height {
        for u in 0..width {
            let mut prev = f32::INFINITY;
            for s in 0..extent {
                let (x, y, z) = view.sample(dims, u, v, s);
                let val = g.get(x, y, z);
                if val <= iso {
                    depths[v * width + u] = if s == 0 {
                        0.0
                    } else {
                        (s - 1) as f32 + (prev - iso) / (prev - val)
                    };
                    break;
                }
                prev = val;
            }
        }
    }
    DepthMap {
        view,
        width,
        height,
        depths,
        max_depth: extent.saturating_sub(1) as f32,
    }
}

/// Dense `channels × h × w` feature map, channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewFeatures {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub values: Vec<f32>,
}

impl ViewFeatures {
    pub fn new(channels: usize, h: usize, w: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != channels * h * w {
            return Err(Error::DimMismatch(format!(
                "{} values for {channels}x{h}x{w} features",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("feature maps must be finite");
        }
        Ok(Self { channels, h, w, values })
    }

    pub fn at(&self, c: usize, py: usize, px: usize) -> f32 {
        self.values[(c * self.h + py) * self.w + px]
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    /// Token-major layout `[h * w, channels]` for attention.
    pub fn to_tokens(&self) -> Vec<f32> {
        let n = self.tokens();
        let mut out = vec![0.0; n * self.channels];
        for c in 0..self.channels {
            for t in 0..n {
                out[t * self.channels + c] = self.values[c * n + t];
            }
        }
        out
    }
}

/// Frozen per-view feature extractor.
pub trait ViewFeatureExtractor {
    fn extract(&self, depth: &DepthMap) -> Result<ViewFeatures>;
}

/// Per-patch depth statistics: mean, variance, mean horizontal and vertical
/// forward differences, hit fraction. Misses count as the full extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchDescriptor {
    pub patch: usize,
}

impl Default for PatchDescriptor {
    fn default() -> Self {
        Self { patch: 4 }
    }
}

impl ViewFeatureExtractor for PatchDescriptor {
    fn extract(&self, d: &DepthMap) -> Result<ViewFeatures> {
        extract_features(d, self.patch)
    }
}

pub fn extract_features(d: &DepthMap, patch: usize) -> Result<ViewFeatures> {
    if patch == 0 || d.width % patch != 0 || d.height % patch != 0 {
        return invalid(format!("patch {patch} does not divide a {}x{} map", d.width, d.height));
    }
    let filled = d.filled();
    let (h, w) = (d.height / patch, d.width / patch);
    let plane = h * w;
    let mut out = vec![0.0f32; PATCH_CHANNELS * plane];
    let px_count = (patch * patch) as f64;
    let diff_count = (patch * (patch - 1)).max(1) as f64;
    for py in 0..h {
        for px in 0..w {
            let at = |u: usize, v: usize| filled[(py * patch + v) * d.width + px * patch + u] as f64;
            let mut sum = 0.0;
            let mut hits = 0usize;
            let (mut gx, mut gy) = (0.0, 0.0);
            for v in 0..patch {
                for u in 0..patch {
                    sum += at(u, v);
                    if d.depths[(py * patch + v) * d.width + px * patch + u].is_finite() {
                        hits += 1;
                    }
                    if u + 1 < patch {
                        gx += at(u + 1, v) - at(u, v);
                    }
                    if v + 1 < patch {
                        gy += at(u, v + 1) - at(u, v);
                    }
                }
            }
            let mean = sum / px_count;
            let mut var = 0.0;
            for v in 0..patch {
                for u in 0..patch {
                    var += (at(u, v) - mean).powi(2);
                }
            }
            let t = py * w + px;
            out[t] = mean as f32;
            out[plane + t] = (var / px_count) as f32;
            out[2 * plane + t] = (gx / diff_count) as f32;
            out[3 * plane + t] = (gy / diff_count) as f32;
            out[4 * plane + t] = (hits as f64 / px_count) as f32;
        }
    }
    ViewFeatures::new(PATCH_CHANNELS, h, w, out)
}

/// Features read from `VFEA` files, looked up by view.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedFeatures {
    pub maps: Vec<(View, ViewFeatures)>,
}

impl ViewFeatureExtractor for PrecomputedFeatures {
    fn extract(&self, depth: &DepthMap) -> Result<ViewFeatures> {
        self.maps
            .iter()
            .find(|(v, _)| *v == depth.view)
            .map(|(_, f)| f.clone())
            .ok_or_else(|| Error::InvalidArgument(format!("no precomputed features for {:?}", depth.view)))
    }
}

/// Element-wise mean over views. Each element is averaged over its sorted
/// values, so the result does not depend on the order of `fs`.
pub fn aggregate_views(fs: &[ViewFeatures]) -> Result<ViewFeatures> {
    let first = fs.first().ok_or_else(|| Error::Empty("no views to aggregate".into()))?;
    for f in fs {
        if (f.channels, f.h, f.w) != (first.channels, first.h, first.w) {
            return Err(Error::DimMismatch(format!(
                "view features {}x{}x{} vs {}x{}x{}",
                f.channels, f.h, f.w, first.channels, first.h, first.w
            )));
        }
    }
    let n = fs.len() as f64;
    let mut buf = Vec::with_capacity(fs.len());
    let values = (0..first.values.len())
        .map(|i| {
            buf.clear();
            buf.extend(fs.iter().map(|f| f.values[i]));
            buf.sort_by(f32::total_cmp);
            (buf.iter().map(|&v| v as f64).sum::<f64>() / n) as f32
        })
        .collect();
    ViewFeatures::new(first.channels, first.h, first.w, values)
}

/// Renders `views` of `g` and averages their features.
pub fn view_features(g: &VoxelGrid, views: &[View], extractor: &dyn ViewFeatureExtractor) -> Result<ViewFeatures> {
    let fs = views
        .iter()
        .map(|&v| extractor.extract(&render_depth(g, v)))
        .collect::<Result<Vec<_>>>()?;
    aggregate_views(&fs)
}

pub fn save_features(f: &ViewFeatures, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + 4 * f.values.len());
    buf.extend_from_slice(VFEA_MAGIC);
    buf.extend_from_slice(&VFEA_VERSION.to_le_bytes());
    for d in [f.channels, f.h, f.w] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &f.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<ViewFeatures> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[0..4] != VFEA_MAGIC {
        return Err(Error::Format("not a VFEA file".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    if u32_at(4) != VFEA_VERSION as usize {
        return Err(Error::Format(format!("unsupported VFEA version {}", u32_at(4))));
    }
    let (c, h, w) = (u32_at(8), u32_at(12), u32_at(16));
    if c.checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(4))
        != Some(bytes.len() - 20)
    {
        return Err(Error::Format(format!("payload does not match {c}x{h}x{w}")));
    }
    let values = bytes[20..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    ViewFeatures::new(c, h, w, values).map_err(|e| Error::Format(e.to_string()))
}
