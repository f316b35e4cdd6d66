//! Marching-cubes iso-surface extraction, area-uniform surface sampling and
//! OBJ export.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::grid::VoxelGrid;
use crate::mc_table::TRI_TABLE;

/// Iso level for meshing unsigned fields, in voxels.
pub const MC_ISO: f32 = 1.0;
/// Surface points per shape for point-set metrics.
pub const DEFAULT_SURFACE_POINTS: usize = 10_000;

/// Edge interpolation parameters are kept in `[T_MARGIN, 1 - T_MARGIN]`.
const T_MARGIN: f64 = 1e-5;

/// Cube corner offsets `(x, y, z)`.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Corner pairs joined by each cube edge.
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    /// Positions in voxel coordinates.
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
    pub areas: Vec<f64>,
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn triangle_area(p: [f64; 3], q: [f64; 3], r: [f64; 3]) -> f64 {
    let u = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
    let v = [r[0] - p[0], r[1] - p[1], r[2] - p[2]];
    let c = cross(u, v);
    0.5 * (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    /// Appends a triangle unless it is degenerate.
    pub fn push_triangle(&mut self, tri: [u32; 3]) -> bool {
        if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
            return false;
        }
        let [a, b, c] = tri.map(|i| self.vertices[i as usize]);
        let area = triangle_area(a, b, c);
        if !(area > 0.0) {
            return false;
        }
        self.triangles.push(tri);
        self.areas.push(area);
        true
    }

    /// Wavefront OBJ text: `v` lines then 1-based `f` lines.
    pub fn to_obj(&self) -> String {
        let mut s = String::with_capacity(32 * (self.vertices.len() + self.triangles.len()));
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_obj())?;
        Ok(())
    }
}

/// Extracts the level set `{value = iso}`. Corners below `iso` count as
/// inside. Vertices are shared between cells through their grid edge, so
/// a closed level set gives a closed mesh.
pub fn marching_cubes(g: &VoxelGrid, iso: f32) -> Result<TriMesh> {
    let [nx, ny, nz] = g.dims();
    if nx < 2 || ny < 2 || nz < 2 {
        return invalid(format!(
            "marching cubes needs at least 2 voxels per axis, got {:?}",
            g.dims()
        ));
    }
    if !iso.is_finite() {
        return invalid("iso level must be finite");
    }
    let vals = g.values();
    let mut mesh = TriMesh::default();
    let mut edge_vertex: HashMap<usize, u32> = HashMap::new();
    for z in 0..nz - 1 {
        for y in 0..ny - 1 {
            for x in 0..nx - 1 {
                let corner_idx: [usize; 8] = CORNERS.map(|[dx, dy, dz]| g.index(x + dx, y + dy, z + dz));
                let mut case = 0usize;
                for (bit, &ci) in corner_idx.iter().enumerate() {
                    if vals[ci] < iso {
                        case |= 1 << bit;
                    }
                }
                let row = &TRI_TABLE[case];
                if row[0] < 0 {
                    continue;
                }
                let mut local = [u32::MAX; 12];
                for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
                    let mut ids = [0u32; 3];
                    for (k, &e) in tri.iter().enumerate() {
                        let e = e as usize;
                        if local[e] == u32::MAX {
                            let [ca, cb] = EDGES[e];
                            let (mut a, mut b) = (corner_idx[ca], corner_idx[cb]);
                            if a > b {
                                std::mem::swap(&mut a, &mut b);
                            }
                            let axis = match b - a {
                                1 => 0,
                                d if d == nx => 1,
                                _ => 2,
                            };
                            let key = a * 3 + axis;
                            local[e] = *edge_vertex.entry(key).or_insert_with(|| {
                                let (va, vb) = (vals[a] as f64, vals[b] as f64);
                                // a corner exactly at iso counts as outside; keeping t off
                                // both ends stops vertices on different edges coinciding
                                let t = ((iso as f64 - va) / (vb - va)).clamp(T_MARGIN, 1.0 - T_MARGIN);
                                let pa = g.coords(a).map(|c| c as f64);
                                let mut p = pa;
                                p[axis] += t;
                                mesh.vertices.push(p);
                                (mesh.vertices.len() - 1) as u32
                            });
                        }
                        ids[k] = local[e];
                    }
                    mesh.push_triangle(ids);
                }
            }
        }
    }
    Ok(mesh)
}

/// `n` points drawn area-uniformly: a triangle with probability
/// proportional to its area, then a uniform barycentric point.
pub fn sample_surface<R: Rng + ?Sized>(m: &TriMesh, n: usize, rng: &mut R) -> Result<Vec<[f64; 3]>> {
    if m.is_empty() {
        return Err(Error::Empty("cannot sample an empty mesh".into()));
    }
    if n == 0 {
        return invalid("sample count must be at least 1");
    }
    let mut cdf = Vec::with_capacity(m.areas.len());
    let mut acc = 0.0;
    for a in &m.areas {
        acc += a;
        cdf.push(acc);
    }
    let total = acc;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.random::<f64>() * total;
        let ti = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let [a, b, c] = m.triangles[ti].map(|i| m.vertices[i as usize]);
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
        out.push(std::array::from_fn(|k| wa * a[k] + wb * b[k] + wc * c[k]));
    }
    Ok(out)
}
