//! Voxel ℓ1 error, Chamfer distance, IoU and F1 over surface samples, and
//! corpus-level evaluation reports.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{marching_cubes, sample_surface, DEFAULT_SURFACE_POINTS, MC_ISO};
use crate::grid::{to_tudf, ShapePair, VoxelGrid};

/// Occupancy threshold for IoU, in voxels.
pub const OCC_ISO: f32 = 1.0;
/// F1 distance threshold as a fraction of the reference bounding-box diagonal.
pub const F1_FRACTION: f64 = 0.01;
pub const CD_CONVENTION: &str = "0.5 * (mean_p min_q |p-q| + mean_q min_p |q-p|), Euclidean, voxel units";

fn check_dims(a: &VoxelGrid, b: &VoxelGrid) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean absolute difference over all voxels.
pub fn l1_error(pred: &VoxelGrid, gt: &VoxelGrid) -> Result<f64> {
    check_dims(pred, gt)?;
    let sum: f64 = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Occupancy IoU with `value ≤ tau_occ` as occupied; an empty union scores 1.
pub fn iou(pred: &VoxelGrid, gt: &VoxelGrid, tau_occ: f32) -> Result<f64> {
    check_dims(pred, gt)?;
    if !(tau_occ > 0.0) {
        return invalid(format!("occupancy threshold must be positive, got {tau_occ}"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.values().iter().zip(gt.values()) {
        let (oa, ob) = (a <= tau_occ, b <= tau_occ);
        inter += (oa && ob) as usize;
        union += (oa || ob) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Uniform-grid spatial hash for exact nearest-neighbour distances.
///
/// Cells are searched in growing Chebyshev rings around the query's cell;
/// once the best distance found is at most `ring · cell`, no unvisited cell
/// can hold a closer point. Distances are computed exactly as brute force
/// would, so results agree bit for bit.
pub struct PointIndex<'a> {
    points: &'a [[f64; 3]],
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<u32>,
}

impl<'a> PointIndex<'a> {
    pub fn new(points: &'a [[f64; 3]]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point set".into()));
        }
        if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return invalid("points must be finite");
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let extent: [f64; 3] = std::array::from_fn(|k| hi[k] - lo[k]);
        let diag = (extent[0].powi(2) + extent[1].powi(2) + extent[2].powi(2)).sqrt();
        let target_cells = (points.len() as f64 / 2.0).max(1.0);
        let mut cell = (diag / target_cells.cbrt()).max(1e-9);
        let dims = loop {
            let d: [usize; 3] = std::array::from_fn(|k| (extent[k] / cell).floor() as usize + 1);
            if d.iter().product::<usize>() <= 4 * points.len() + 64 {
                break d;
            }
            cell *= 2.0;
        };
        let cell_of = |p: &[f64; 3]| -> usize {
            let c: [usize; 3] = std::array::from_fn(|k| (((p[k] - lo[k]) / cell) as usize).min(dims[k] - 1));
            (c[2] * dims[1] + c[1]) * dims[0] + c[0]
        };
        let ncells = dims.iter().product::<usize>();
        let mut counts = vec![0usize; ncells + 1];
        for p in points {
            counts[cell_of(p) + 1] += 1;
        }
        for i in 0..ncells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0u32; points.len()];
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(p);
            order[fill[c]] = i as u32;
            fill[c] += 1;
        }
        Ok(Self {
            points,
            origin: lo,
            cell,
            dims,
            starts: counts,
            order,
        })
    }

    /// Distance from `q` to its nearest indexed point.
    pub fn nearest_distance(&self, q: &[f64; 3]) -> f64 {
        let c: [isize; 3] = std::array::from_fn(|k| {
            let v = ((q[k] - self.origin[k]) / self.cell).floor();
            v.clamp(0.0, (self.dims[k] - 1) as f64) as isize
        });
        let max_ring = *self.dims.iter().max().unwrap() as isize;
        let mut best = f64::INFINITY;
        for r in 0..=max_ring {
            let lo: [isize; 3] = std::array::from_fn(|k| (c[k] - r).max(0));
            let hi: [isize; 3] = std::array::from_fn(|k| (c[k] + r).min(self.dims[k] as isize - 1));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let on_shell = (x - c[0]).abs() == r || (y - c[1]).abs() == r || (z - c[2]).abs() == r;
                        if !on_shell {
                            continue;
                        }
                        let cell = ((z as usize) * self.dims[1] + y as usize) * self.dims[0] + x as usize;
                        for &i in &self.order[self.starts[cell]..self.starts[cell + 1]] {
                            best = best.min(dist(q, &self.points[i as usize]));
                        }
                    }
                }
            }
            // shrunk slightly so cell-assignment rounding cannot cut the search short
            if best <= r as f64 * self.cell * (1.0 - 1e-9) {
                break;
            }
        }
        best
    }
}

/// Nearest distance from every point of `from` to the set `to`.
pub fn nearest_distances(from: &[[f64; 3]], to: &[[f64; 3]]) -> Result<Vec<f64>> {
    if from.is_empty() {
        return Err(Error::Empty("point set".into()));
    }
    let index = PointIndex::new(to)?;
    Ok(from.iter().map(|p| index.nearest_distance(p)).collect())
}

/// Symmetric Chamfer distance: half the sum of the two mean nearest
/// Euclidean distances.
pub fn chamfer_l1(p: &[[f64; 3]], q: &[[f64; 3]]) -> Result<f64> {
    let a = nearest_distances(p, q)?;
    let b = nearest_distances(q, p)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(0.5 * (mean(&a) + mean(&b)))
}

pub fn bbox_diagonal(points: &[[f64; 3]]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2) + (hi[2] - lo[2]).powi(2)).sqrt()
}

/// F1 of predicted points `p` against reference points `q`; a point
/// matches when its nearest neighbour is within `τ = frac · diag(q)`.
pub fn f1_at(p: &[[f64; 3]], q: &[[f64; 3]], threshold_frac: f64) -> Result<f64> {
    if !(threshold_frac > 0.0) {
        return invalid(format!("threshold fraction must be positive, got {threshold_frac}"));
    }
    let tau = threshold_frac * bbox_diagonal(q);
    let pq = nearest_distances(p, q)?;
    let qp = nearest_distances(q, p)?;
    let precision = pq.iter().filter(|&&d| d <= tau).count() as f64 / pq.len() as f64;
    let recall = qp.iter().filter(|&&d| d <= tau).count() as f64 / qp.len() as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub tau_mc: f32,
    pub tau_occ: f32,
    pub f1_fraction: f64,
    pub surface_points: usize,
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            tau_mc: MC_ISO,
            tau_occ: OCC_ISO,
            f1_fraction: F1_FRACTION,
            surface_points: DEFAULT_SURFACE_POINTS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub l1: f64,
    pub cd: f64,
    pub iou: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeScores {
    pub id: String,
    pub l1: f64,
    pub cd: f64,
    pub iou: f64,
    pub f1: f64,
}

/// Every metric for one prediction. Surface points come from meshing both
/// grids at `tau_mc`; if either mesh is empty, CD is the grid diagonal and
/// F1 is 0 unless both are empty (then CD 0, F1 1).
pub fn score_pair(pred: &VoxelGrid, gt: &VoxelGrid, cfg: &MetricsConfig, seed: u64) -> Result<Scores> {
    let l1 = l1_error(pred, gt)?;
    let iou = iou(pred, gt, cfg.tau_occ)?;
    let mp = marching_cubes(pred, cfg.tau_mc)?;
    let mg = marching_cubes(gt, cfg.tau_mc)?;
    let (cd, f1) = match (mp.is_empty(), mg.is_empty()) {
        (true, true) => (0.0, 1.0),
        (false, false) => {
            // same stream for both, so identical meshes give identical points
            let p = sample_surface(&mp, cfg.surface_points, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let q = sample_surface(&mg, cfg.surface_points, &mut ChaCha8Rng::seed_from_u64(seed))?;
            (chamfer_l1(&p, &q)?, f1_at(&p, &q, cfg.f1_fraction)?)
        }
        _ => {
            let d = pred.dims().map(|v| v as f64);
            ((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt(), 0.0)
        }
    };
    Ok(Scores { l1, cd, iou, f1 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub tau_mc: f32,
    pub tau_occ: f32,
    pub f1_fraction: f64,
    pub surface_points: usize,
    pub seed: u64,
    pub cd_convention: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fingerprint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub method: String,
    pub shapes: Vec<ShapeScores>,
    pub means: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ReportConfig,
    pub shapes: Vec<ShapeScores>,
    pub means: Scores,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub baseline: Option<Baseline>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Maps a pair to a predicted UDF grid.
pub trait Completer {
    fn complete(&self, pair: &ShapePair, index: usize) -> Result<VoxelGrid>;
}

impl<F> Completer for F
where
    F: Fn(&ShapePair, usize) -> Result<VoxelGrid>,
{
    fn complete(&self, pair: &ShapePair, index: usize) -> Result<VoxelGrid> {
        self(pair, index)
    }
}

/// Baseline that answers with the partial scan itself, as a UDF.
pub fn copy_partial(pair: &ShapePair, _index: usize) -> Result<VoxelGrid> {
    Ok(to_tudf(&pair.partial))
}

fn mean_scores(shapes: &[ShapeScores]) -> Scores {
    let n = shapes.len().max(1) as f64;
    Scores {
        l1: shapes.iter().map(|s| s.l1).sum::<f64>() / n,
        cd: shapes.iter().map(|s| s.cd).sum::<f64>() / n,
        iou: shapes.iter().map(|s| s.iou).sum::<f64>() / n,
        f1: shapes.iter().map(|s| s.f1).sum::<f64>() / n,
    }
}

fn score_all(pairs: &[ShapePair], model: &dyn Completer, cfg: &MetricsConfig) -> Result<Vec<ShapeScores>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let pred = model.complete(pair, i)?;
            let s = score_pair(&pred, &pair.complete, cfg, cfg.seed.wrapping_add(i as u64))?;
            Ok(ShapeScores {
                id: pair.id.clone(),
                l1: s.l1,
                cd: s.cd,
                iou: s.iou,
                f1: s.f1,
            })
        })
        .collect()
}

/// Scores `model` on every pair, plus the copy-partial baseline when
/// `with_baseline` is set.
pub fn evaluate_corpus(
    pairs: &[ShapePair],
    model: &dyn Completer,
    cfg: &MetricsConfig,
    with_baseline: bool,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("no pairs to evaluate".into()));
    }
    let shapes = score_all(pairs, model, cfg)?;
    let baseline = if with_baseline {
        let b = score_all(pairs, &copy_partial, cfg)?;
        Some(Baseline {
            method: "copy-partial".into(),
            means: mean_scores(&b),
            shapes: b,
        })
    } else {
        None
    };
    Ok(EvalReport {
        config: ReportConfig {
            tau_mc: cfg.tau_mc,
            tau_occ: cfg.tau_occ,
            f1_fraction: cfg.f1_fraction,
            surface_points: cfg.surface_points,
            seed: cfg.seed,
            cd_convention: CD_CONVENTION.into(),
            fingerprint: None,
        },
        means: mean_scores(&shapes),
        shapes,
        baseline,
    })
}
