use bridgekit::grid::*;
use bridgekit::Error;
use proptest::prelude::*;

const C: [f64; 3] = [7.5, 7.5, 7.5];

fn sphere_sdf(r: f64) -> VoxelGrid {
    let spec = ShapeSpec::single(Primitive::Sphere { center: C, radius: r });
    sdf_from_spec(&spec, [16; 3], 3.0).unwrap()
}

#[test]
fn sphere_center_clamps_to_truncation() {
    let spec = ShapeSpec::single(Primitive::Sphere {
        center: [8.0, 8.0, 8.0],
        radius: 4.0,
    });
    let g = sdf_from_spec(&spec, [16; 3], 3.0).unwrap();
    assert_eq!(g.get(8, 8, 8), -3.0);
    assert_eq!(g.get(12, 8, 8), 0.0);
    assert_eq!(g.get(8, 4, 8), 0.0);
}

/// Distance from a point to a box, by brute force over a dense sampling of
/// the box surface.
fn brute_box_distance(p: [f64; 3], c: [f64; 3], h: [f64; 3]) -> f64 {
    let n = 200;
    let mut best = f64::INFINITY;
    for face in 0..6 {
        let axis = face / 2;
        let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        for i in 0..=n {
            for j in 0..=n {
                let mut q = [0.0; 3];
                q[axis] = c[axis] + sign * h[axis];
                q[a] = c[a] - h[a] + 2.0 * h[a] * i as f64 / n as f64;
                q[b] = c[b] - h[b] + 2.0 * h[b] * j as f64 / n as f64;
                let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
                best = best.min(d);
            }
        }
    }
    let inside = (0..3).all(|k| (p[k] - c[k]).abs() < h[k]);
    if inside {
        -best
    } else {
        best
    }
}

#[test]
fn box_distance_matches_brute_force() {
    let (c, h) = ([8.0, 8.0, 8.0], [2.0, 2.0, 2.0]);
    let g = sdf_from_spec(
        &ShapeSpec::single(Primitive::Box {
            center: c,
            half_extents: h,
        }),
        [16; 3],
        3.0,
    )
    .unwrap();
    // corner at (10,10,10); probe the diagonal and face neighbours around it
    for p in [
        [11, 11, 11],
        [11, 10, 10],
        [10, 10, 11],
        [9, 9, 9],
        [12, 11, 10],
        [10, 9, 11],
    ] {
        let want = brute_box_distance(p.map(|v| v as f64), c, h).clamp(-3.0, 3.0);
        let got = g.get(p[0], p[1], p[2]) as f64;
        // surface sampling spacing is 0.02, so the oracle overestimates by at most ~0.015
        assert!((got - want).abs() < 0.02, "{p:?}: {got} vs {want}");
    }
}

#[test]
fn margin_violation_is_rejected() {
    let spec = ShapeSpec::single(Primitive::Sphere {
        center: [3.0, 8.0, 8.0],
        radius: 2.5,
    });
    assert!(matches!(sdf_from_spec(&spec, [16; 3], 3.0), Err(Error::InvalidSpec(_))));
}

#[test]
fn tudf_is_abs_and_idempotent() {
    let g = sphere_sdf(4.0);
    let u = to_tudf(&g);
    assert_eq!(u.kind(), DistanceKind::Udf);
    for (a, b) in g.values().iter().zip(u.values()) {
        assert_eq!(a.abs(), *b);
        assert_eq!(*a == 0.0, *b == 0.0);
    }
    assert_eq!(to_tudf(&u), u);
}

#[test]
fn full_visibility_keeps_convex_sphere() {
    let g = sphere_sdf(4.3);
    let p = simulate_partial_scan(&g, &AxisDir::ALL, 1.0).unwrap();
    for i in surface_voxels(&g) {
        assert_eq!(p.values()[i], g.values()[i]);
    }
}

/// Independent 1-D scan along +z: everything behind the first voxel at or
/// below zero is unobserved.
fn front_scan_oracle(g: &VoxelGrid) -> Vec<f32> {
    let [nx, ny, nz] = g.dims();
    let mut out = g.values().to_vec();
    for y in 0..ny {
        for x in 0..nx {
            let hit = (0..nz).find(|&z| g.get(x, y, z) <= 0.0);
            if let Some(h) = hit {
                for z in h + 1..nz {
                    out[g.index(x, y, z)] = g.truncation();
                }
            }
        }
    }
    out
}

#[test]
fn single_camera_matches_ray_oracle() {
    let g = sphere_sdf(4.3);
    let p = simulate_partial_scan(&g, &[AxisDir::PosZ], 0.0).unwrap();
    assert_eq!(p.values(), front_scan_oracle(&g).as_slice());
    for i in surface_voxels(&g) {
        if g.values()[i] <= 0.0 && g.coords(i)[2] as f64 > C[2] + 1.0 {
            assert_eq!(p.values()[i], 3.0, "back surface voxel {:?} observed", g.coords(i));
        }
    }
}

#[test]
fn scan_errors() {
    let g = sphere_sdf(4.0);
    assert!(simulate_partial_scan(&g, &[], 0.0).is_err());
    let empty = VoxelGrid::empty([8; 3], 3.0, DistanceKind::Sdf).unwrap();
    assert!(matches!(
        simulate_partial_scan(&empty, &[AxisDir::PosX], 0.0),
        Err(Error::Empty(_))
    ));
    assert!(matches!(
        simulate_partial_scan(&g, &[AxisDir::PosX], 0.9),
        Err(Error::InsufficientCoverage { .. })
    ));
}

#[test]
fn grid_io_errors() {
    let g = sphere_sdf(4.0);
    let mut bytes = Vec::new();
    write_grid(&mut bytes, &g).unwrap();
    assert!(read_grid(&bytes[..bytes.len() - 4]).is_err());
    let mut bad_kind = bytes.clone();
    bad_kind[8] = 2;
    assert!(read_grid(bad_kind.as_slice()).is_err());
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(read_grid(bad_magic.as_slice()).is_err());
    let mut nan = bytes.clone();
    let n = nan.len();
    nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(read_grid(nan.as_slice()).is_err());
}

#[test]
fn corpus_is_deterministic_and_reloads() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = make_corpus(7, 2, [16; 3], 3.0, a.path()).unwrap();
    let mb = make_corpus(7, 2, [16; 3], 3.0, b.path()).unwrap();
    assert_eq!(std::fs::read(&ma).unwrap(), std::fs::read(&mb).unwrap());
    for e in load_manifest(&ma).unwrap() {
        for f in [&e.partial_path, &e.complete_path] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap()
            );
        }
    }
    let pairs = load_corpus(&ma).unwrap();
    assert_eq!(pairs.len(), 2);
    for p in &pairs {
        assert_eq!(p.partial.kind(), DistanceKind::Sdf);
        assert_eq!(p.complete.kind(), DistanceKind::Udf);
        assert!(p.complete.values().iter().all(|&v| (0.0..=3.0).contains(&v)));
    }
    assert!(make_corpus(7, 0, [16; 3], 3.0, a.path()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn eikonal_on_random_shapes(seed in any::<u64>()) {
        let spec = ShapeSpec::random(seed, [16; 3]).unwrap();
        let g = sdf_from_spec(&spec, [16; 3], 3.0).unwrap();
        let t = g.truncation();
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..15 {
                    for (a, b) in [((x, y, z), (x + 1, y, z)), ((y, x, z), (y, x + 1, z)), ((y, z, x), (y, z, x + 1))] {
                        let (va, vb) = (g.get(a.0, a.1, a.2), g.get(b.0, b.1, b.2));
                        if va.abs() < t && vb.abs() < t {
                            prop_assert!((va - vb).abs() as f64 <= 1.0 + 1e-6);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn grid_roundtrip_is_bitwise(seed in any::<u64>(), udf in any::<bool>()) {
        let spec = ShapeSpec::random(seed, [16; 3]).unwrap();
        let mut g = sdf_from_spec(&spec, [16; 3], 3.0).unwrap();
        if udf {
            g = to_tudf(&g);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.vgrd");
        save_grid(&g, &path).unwrap();
        let back = load_grid(&path).unwrap();
        prop_assert_eq!(back.dims(), g.dims());
        prop_assert_eq!(back.kind(), g.kind());
        let bits = |v: &VoxelGrid| v.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&g));
    }

    #[test]
    fn scan_copies_observed_values(seed in any::<u64>(), cam in 0usize..6) {
        let spec = ShapeSpec::random(seed, [16; 3]).unwrap();
        let g = sdf_from_spec(&spec, [16; 3], 3.0).unwrap();
        let p = simulate_partial_scan(&g, &[AxisDir::ALL[cam]], 0.0).unwrap();
        for (a, b) in g.values().iter().zip(p.values()) {
            prop_assert!(a == b || *b == g.truncation());
        }
        // unobserved space is encoded as outside, so the inside set only shrinks
        for (a, b) in g.values().iter().zip(p.values()) {
            prop_assert!(*b > 0.0 || *a <= 0.0);
        }
    }
}
