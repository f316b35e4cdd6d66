//! Truncated distance-field voxel grids, procedural shapes, partial-scan
//! simulation and the `VGRD` file format.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::views::DepthMap;

pub const DEFAULT_TRUNCATION: f32 = 3.0;
pub const VGRD_MAGIC: &[u8; 4] = b"VGRD";
pub const VGRD_VERSION: u32 = 1;
const VGRD_HEADER_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Sdf,
    Udf,
}

impl DistanceKind {
    fn to_byte(self) -> u8 {
        match self {
            DistanceKind::Sdf => 0,
            DistanceKind::Udf => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(DistanceKind::Sdf),
            1 => Ok(DistanceKind::Udf),
            other => Err(Error::Format(format!("unknown grid kind byte {other:#04x}"))),
        }
    }
}

/// Dense distance field. Voxel `(x, y, z)` sits at integer coordinates and is
/// stored at `(z * ny + y) * nx + x`, matching `[D=z, H=y, W=x]` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    voxel_size: f32,
    truncation: f32,
    kind: DistanceKind,
    values: Vec<f32>,
}

impl VoxelGrid {
    pub fn new(
        dims: [usize; 3],
        voxel_size: f32,
        truncation: f32,
        kind: DistanceKind,
        values: Vec<f32>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return invalid(format!("grid dims must be positive, got {dims:?}"));
        }
        if !(truncation > 0.0 && truncation.is_finite()) || !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return invalid(format!(
                "truncation {truncation} and voxel size {voxel_size} must be positive"
            ));
        }
        let n = dims[0] * dims[1] * dims[2];
        if values.len() != n {
            return Err(Error::DimMismatch(format!("{} values for dims {dims:?}", values.len())));
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || v.abs() > truncation || (kind == DistanceKind::Udf && v < 0.0) {
                return invalid(format!(
                    "value {v} at {i} violates a {kind:?} grid truncated at {truncation}"
                ));
            }
        }
        Ok(Self {
            dims,
            voxel_size,
            truncation,
            kind,
            values,
        })
    }

    /// Builds a grid from raw values, clamping into the valid range first.
    pub fn from_clamped(dims: [usize; 3], truncation: f32, kind: DistanceKind, mut values: Vec<f32>) -> Result<Self> {
        let lo = match kind {
            DistanceKind::Sdf => -truncation,
            DistanceKind::Udf => 0.0,
        };
        for v in &mut values {
            *v = if v.is_nan() {
                truncation
            } else {
                v.clamp(lo, truncation)
            };
        }
        Self::new(dims, 1.0, truncation, kind, values)
    }

    /// Every voxel at `+truncation`: nothing observed, no surface.
    pub fn empty(dims: [usize; 3], truncation: f32, kind: DistanceKind) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, 1.0, truncation, kind, vec![truncation; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn voxel_size(&self) -> f32 {
        self.voxel_size
    }

    pub fn truncation(&self) -> f32 {
        self.truncation
    }

    pub fn kind(&self) -> DistanceKind {
        self.kind
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.index(x, y, z)]
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
    },
    /// Axis-aligned cylinder; `axis` is 0, 1 or 2.
    Cylinder {
        center: [f64; 3],
        radius: f64,
        half_height: f64,
        axis: usize,
    },
}

impl Primitive {
    /// Signed distance in voxel units, negative inside.
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        match self {
            Primitive::Sphere { center, radius } => norm(sub(p, *center)) - radius,
            Primitive::Box { center, half_extents } => {
                let q: [f64; 3] = std::array::from_fn(|i| (p[i] - center[i]).abs() - half_extents[i]);
                let outside = norm(q.map(|v| v.max(0.0)));
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                outside + inside
            }
            Primitive::Cylinder {
                center,
                radius,
                half_height,
                axis,
            } => {
                let d = sub(p, *center);
                let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
                let radial = (d[a] * d[a] + d[b] * d[b]).sqrt() - radius;
                let along = d[*axis].abs() - half_height;
                let outside = (radial.max(0.0).powi(2) + along.max(0.0).powi(2)).sqrt();
                outside + radial.max(along).min(0.0)
            }
        }
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let ext = match self {
            Primitive::Sphere { radius, .. } => [*radius; 3],
            Primitive::Box { half_extents, .. } => *half_extents,
            Primitive::Cylinder {
                radius,
                half_height,
                axis,
                ..
            } => {
                let mut e = [*radius; 3];
                e[*axis] = *half_height;
                e
            }
        };
        let c = self.center();
        (
            std::array::from_fn(|i| c[i] - ext[i]),
            std::array::from_fn(|i| c[i] + ext[i]),
        )
    }

    pub fn center(&self) -> [f64; 3] {
        match self {
            Primitive::Sphere { center, .. } | Primitive::Box { center, .. } | Primitive::Cylinder { center, .. } => {
                *center
            }
        }
    }

    fn check(&self) -> Result<()> {
        let ok = match self {
            Primitive::Sphere { radius, .. } => *radius > 0.0,
            Primitive::Box { half_extents, .. } => half_extents.iter().all(|&h| h > 0.0),
            Primitive::Cylinder {
                radius,
                half_height,
                axis,
                ..
            } => *radius > 0.0 && *half_height > 0.0 && *axis < 3,
        };
        let finite = self.center().iter().all(|v| v.is_finite());
        if ok && finite {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!("degenerate primitive {self:?}")))
        }
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// A union of up to a few primitives, plus the seed its parameters were
/// drawn from (0 for hand-built specs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub primitives: Vec<Primitive>,
    pub seed: u64,
}

impl ShapeSpec {
    pub fn single(p: Primitive) -> Self {
        Self {
            primitives: vec![p],
            seed: 0,
        }
    }

    /// Union distance: minimum over primitives.
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        self.primitives
            .iter()
            .map(|prim| prim.distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Every primitive's bounding box must keep one voxel of margin from
    /// the grid border, i.e. lie within `[1, n - 2]` on each axis.
    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::InvalidSpec("no primitives".into()));
        }
        for p in &self.primitives {
            p.check()?;
            let (lo, hi) = p.bounds();
            for a in 0..3 {
                let max = dims[a] as f64 - 2.0;
                if lo[a] < 1.0 || hi[a] > max {
                    return Err(Error::InvalidSpec(format!(
                        "{p:?} leaves the interior [1, {max}] on axis {a}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Draws 1 to 3 primitives that fit the grid interior.
    pub fn random(seed: u64, dims: [usize; 3]) -> Result<Self> {
        let s = *dims.iter().min().unwrap() as f64;
        if s < 8.0 {
            return invalid(format!(
                "procedural shapes need at least 8 voxels per axis, got {dims:?}"
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = rng.random_range(1..=3);
        let mut primitives = Vec::with_capacity(count);
        for _ in 0..count {
            let kind = rng.random_range(0..3);
            let ext: [f64; 3];
            let mut prim = match kind {
                0 => {
                    let r = rng.random_range(0.15 * s..0.28 * s);
                    ext = [r; 3];
                    Primitive::Sphere {
                        center: [0.0; 3],
                        radius: r,
                    }
                }
                1 => {
                    let h: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1 * s..0.28 * s));
                    ext = h;
                    Primitive::Box {
                        center: [0.0; 3],
                        half_extents: h,
                    }
                }
                _ => {
                    let r = rng.random_range(0.1 * s..0.22 * s);
                    let hh = rng.random_range(0.12 * s..0.3 * s);
                    let axis = rng.random_range(0..3);
                    let mut e = [r; 3];
                    e[axis] = hh;
                    ext = e;
                    Primitive::Cylinder {
                        center: [0.0; 3],
                        radius: r,
                        half_height: hh,
                        axis,
                    }
                }
            };
            let c: [f64; 3] = std::array::from_fn(|a| {
                let lo = 1.0 + ext[a];
                let hi = dims[a] as f64 - 2.0 - ext[a];
                // bias toward the middle so unions tend to overlap
                let mid = 0.5 * (lo + hi);
                let half = 0.5 * (hi - lo) * 0.7;
                rng.random_range(mid - half..=mid + half)
            });
            match &mut prim {
                Primitive::Sphere { center, .. }
                | Primitive::Box { center, .. }
                | Primitive::Cylinder { center, .. } => *center = c,
            }
            primitives.push(prim);
        }
        let spec = ShapeSpec { primitives, seed };
        spec.validate(dims)?;
        Ok(spec)
    }
}

/// Samples the analytic signed distance at every voxel centre, clamped to
/// `±truncation`.
pub fn sdf_from_spec(spec: &ShapeSpec, dims: [usize; 3], truncation: f32) -> Result<VoxelGrid> {
    spec.validate(dims)?;
    let [nx, ny, nz] = dims;
    let t = truncation as f64;
    let mut values = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let d = spec.distance([x as f64, y as f64, z as f64]);
                values.push(d.clamp(-t, t) as f32);
            }
        }
    }
    VoxelGrid::new(dims, 1.0, truncation, DistanceKind::Sdf, values)
}

/// Absolute value of a signed field. Idempotent on UDF input.
pub fn to_tudf(g: &VoxelGrid) -> VoxelGrid {
    VoxelGrid {
        values: g.values.iter().map(|v| v.abs()).collect(),
        kind: DistanceKind::Udf,
        ..g.clone()
    }
}

/// Scan direction of an axis-aligned camera: the axis rays travel along and
/// whether they travel toward increasing coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AxisDir {
    PosX,
    NegX,
    PosY,
    NegY,
    PosZ,
    NegZ,
}

impl AxisDir {
    pub const ALL: [AxisDir; 6] = [
        AxisDir::PosX,
        AxisDir::NegX,
        AxisDir::PosY,
        AxisDir::NegY,
        AxisDir::PosZ,
        AxisDir::NegZ,
    ];

    pub fn axis(self) -> usize {
        match self {
            AxisDir::PosX | AxisDir::NegX => 0,
            AxisDir::PosY | AxisDir::NegY => 1,
            AxisDir::PosZ | AxisDir::NegZ => 2,
        }
    }

    pub fn positive(self) -> bool {
        matches!(self, AxisDir::PosX | AxisDir::PosY | AxisDir::PosZ)
    }
}

/// Grid indices along every ray cast in direction `dir`, one vector per ray,
/// ordered from the entry face.
pub(crate) fn rays(dims: [usize; 3], dir: AxisDir) -> Vec<Vec<usize>> {
    let a = dir.axis();
    let (b, c) = ((a + 1) % 3, (a + 2) % 3);
    let idx = |p: [usize; 3]| (p[2] * dims[1] + p[1]) * dims[0] + p[0];
    let mut out = Vec::with_capacity(dims[b] * dims[c]);
    for j in 0..dims[c] {
        for i in 0..dims[b] {
            let ray = (0..dims[a])
                .map(|s| {
                    let s = if dir.positive() { s } else { dims[a] - 1 - s };
                    let mut p = [0; 3];
                    p[a] = s;
                    p[b] = i;
                    p[c] = j;
                    idx(p)
                })
                .collect();
            out.push(ray);
        }
    }
    out
}

/// Voxels with a 6-neighbour on the other side of the zero level
/// (`≤ 0` versus `> 0`).
pub fn surface_voxels(g: &VoxelGrid) -> Vec<usize> {
    let [nx, ny, nz] = g.dims;
    let inside = |v: f32| v <= 0.0;
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let s = inside(g.get(x, y, z));
                let mut hit = false;
                let mut check = |xx: usize, yy: usize, zz: usize| hit |= inside(g.get(xx, yy, zz)) != s;
                if x > 0 {
                    check(x - 1, y, z);
                }
                if x + 1 < nx {
                    check(x + 1, y, z);
                }
                if y > 0 {
                    check(x, y - 1, z);
                }
                if y + 1 < ny {
                    check(x, y + 1, z);
                }
                if z > 0 {
                    check(x, y, z - 1);
                }
                if z + 1 < nz {
                    check(x, y, z + 1);
                }
                if hit {
                    out.push(g.index(x, y, z));
                }
            }
        }
    }
    out
}

/// Observation mask of an axis-camera depth scan: along each ray, voxels up
/// to and including the first one at or below zero are seen. A ray that
/// never reaches the surface sees free space all the way through.
pub fn scan_mask(sdf: &VoxelGrid, cameras: &[AxisDir]) -> Vec<bool> {
    let mut seen = vec![false; sdf.len()];
    for &cam in cameras {
        for ray in rays(sdf.dims, cam) {
            for i in ray {
                seen[i] = true;
                if sdf.values[i] <= 0.0 {
                    break;
                }
            }
        }
    }
    seen
}

/// Simulates an axis-aligned depth scan of a complete TSDF. Unobserved
/// voxels become `+truncation`; observed ones keep their values. Fails when
/// the input has no surface or when fewer than `keep_fraction_bound` of the
/// surface voxels are observed.
pub fn simulate_partial_scan(sdf: &VoxelGrid, cameras: &[AxisDir], keep_fraction_bound: f64) -> Result<VoxelGrid> {
    if cameras.is_empty() {
        return invalid("partial scan needs at least one camera");
    }
    if sdf.kind != DistanceKind::Sdf {
        return invalid("partial scan expects a signed field");
    }
    let surface = surface_voxels(sdf);
    if surface.is_empty() {
        return Err(Error::Empty("grid has no surface crossing".into()));
    }
    let seen = scan_mask(sdf, cameras);
    let kept = surface.iter().filter(|&&i| seen[i]).count() as f64 / surface.len() as f64;
    if kept < keep_fraction_bound {
        return Err(Error::InsufficientCoverage {
            kept,
            bound: keep_fraction_bound,
        });
    }
    let values = sdf
        .values
        .iter()
        .zip(&seen)
        .map(|(&v, &s)| if s { v } else { sdf.truncation })
        .collect();
    Ok(VoxelGrid { values, ..sdf.clone() })
}

/// Complete/partial pair used for training and evaluation.
#[derive(Debug, Clone)]
pub struct ShapePair {
    pub id: String,
    pub partial: VoxelGrid,
    pub complete: VoxelGrid,
    pub views: Option<Vec<DepthMap>>,
}

impl ShapePair {
    pub fn new(id: impl Into<String>, partial: VoxelGrid, complete: VoxelGrid) -> Result<Self> {
        if partial.dims != complete.dims {
            return Err(Error::DimMismatch(format!(
                "partial {:?} vs complete {:?}",
                partial.dims, complete.dims
            )));
        }
        if partial.kind != DistanceKind::Sdf || complete.kind != DistanceKind::Udf {
            return invalid("pairs hold a signed partial and an unsigned complete grid");
        }
        Ok(Self {
            id: id.into(),
            partial,
            complete,
            views: None,
        })
    }
}

pub fn write_grid<W: Write>(mut w: W, g: &VoxelGrid) -> Result<()> {
    let mut buf = Vec::with_capacity(VGRD_HEADER_LEN + 4 * g.len());
    buf.extend_from_slice(VGRD_MAGIC);
    buf.extend_from_slice(&VGRD_VERSION.to_le_bytes());
    buf.push(g.kind.to_byte());
    buf.extend_from_slice(&[0u8; 3]);
    for d in g.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&g.voxel_size.to_le_bytes());
    buf.extend_from_slice(&g.truncation.to_le_bytes());
    for v in &g.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_grid<R: Read>(mut r: R) -> Result<VoxelGrid> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < VGRD_HEADER_LEN {
        return Err(Error::Format(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != VGRD_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VGRD_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let kind = DistanceKind::from_byte(bytes[8])?;
    let dims = [u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize];
    let (voxel_size, truncation) = (f32_at(24), f32_at(28));
    let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let payload = bytes.len() - VGRD_HEADER_LEN;
    if n.and_then(|n| n.checked_mul(4)) != Some(payload) {
        return Err(Error::Format(format!(
            "payload of {payload} bytes does not match dims {dims:?}"
        )));
    }
    let values: Vec<f32> = bytes[VGRD_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Format("NaN in payload".into()));
    }
    VoxelGrid::new(dims, voxel_size, truncation, kind, values).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_grid(g: &VoxelGrid, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_grid(&mut buf, g)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_grid(path: &Path) -> Result<VoxelGrid> {
    read_grid(fs::File::open(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub partial_path: String,
    pub complete_path: String,
    pub spec: ShapeSpec,
    pub seed: u64,
}

impl ManifestEntry {
    /// Loads the pair, resolving relative paths against `base`.
    pub fn load(&self, base: &Path) -> Result<ShapePair> {
        let partial = load_grid(&base.join(&self.partial_path))?;
        let complete = load_grid(&base.join(&self.complete_path))?;
        ShapePair::new(self.id.clone(), partial, complete)
    }
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads every pair listed in a manifest.
pub fn load_corpus(manifest: &Path) -> Result<Vec<ShapePair>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    load_manifest(manifest)?.iter().map(|e| e.load(base)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusOptions {
    pub dims: [usize; 3],
    pub truncation: f32,
    /// Cameras used per partial scan, drawn without replacement.
    pub cameras_per_scan: usize,
    pub keep_fraction_bound: f64,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            dims: [16; 3],
            truncation: DEFAULT_TRUNCATION,
            cameras_per_scan: 1,
            keep_fraction_bound: 0.2,
        }
    }
}

/// Per-shape seed derived from the corpus seed (splitmix64 step).
pub fn shape_seed(corpus_seed: u64, index: u64) -> u64 {
    let mut z = corpus_seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn make_corpus(seed: u64, n: usize, dims: [usize; 3], truncation: f32, out_dir: &Path) -> Result<PathBuf> {
    let opts = CorpusOptions {
        dims,
        truncation,
        ..CorpusOptions::default()
    };
    make_corpus_with(seed, n, &opts, out_dir)
}

/// Writes `n` procedural pairs as `<id>_partial.vgrd` / `<id>_complete.vgrd`
/// plus `manifest.json`, and returns the manifest path.
pub fn make_corpus_with(seed: u64, n: usize, opts: &CorpusOptions, out_dir: &Path) -> Result<PathBuf> {
    if n == 0 {
        return invalid("corpus size must be at least 1");
    }
    if opts.cameras_per_scan == 0 || opts.cameras_per_scan > 6 {
        return invalid(format!(
            "cameras per scan must be in 1..=6, got {}",
            opts.cameras_per_scan
        ));
    }
    fs::create_dir_all(out_dir)?;
    let mut manifest = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("shape_{i:04}");
        let s = shape_seed(seed, i as u64);
        let (spec, partial) = draw_pair(s, opts)?;
        let complete = to_tudf(&sdf_from_spec(&spec, opts.dims, opts.truncation)?);
        let partial_path = format!("{id}_partial.vgrd");
        let complete_path = format!("{id}_complete.vgrd");
        save_grid(&partial, &out_dir.join(&partial_path))?;
        save_grid(&complete, &out_dir.join(&complete_path))?;
        manifest.push(ManifestEntry {
            id,
            partial_path,
            complete_path,
            spec,
            seed: s,
        });
    }
    let path = out_dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Redraws shapes and camera sets until a scan clears the coverage bound.
fn draw_pair(seed: u64, opts: &CorpusOptions) -> Result<(ShapeSpec, VoxelGrid)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1_ab1e);
    for attempt in 0..64u64 {
        let spec_seed = if attempt == 0 { seed } else { shape_seed(seed, attempt) };
        let spec = ShapeSpec::random(spec_seed, opts.dims)?;
        let sdf = sdf_from_spec(&spec, opts.dims, opts.truncation)?;
        let mut dirs = AxisDir::ALL.to_vec();
        for k in 0..opts.cameras_per_scan {
            let j = rng.random_range(k..dirs.len());
            dirs.swap(k, j);
        }
        match simulate_partial_scan(&sdf, &dirs[..opts.cameras_per_scan], opts.keep_fraction_bound) {
            Ok(partial) => return Ok((spec, partial)),
            Err(Error::InsufficientCoverage { .. }) | Err(Error::Empty(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::InvalidArgument(format!(
        "no shape for seed {seed} met keep fraction {}",
        opts.keep_fraction_bound
    )))
}
