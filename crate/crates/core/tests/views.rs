use bridgekit::grid::*;
use bridgekit::views::*;
use proptest::prelude::*;

fn sphere(center: [f64; 3], r: f64) -> VoxelGrid {
    sdf_from_spec(
        &ShapeSpec::single(Primitive::Sphere { center, radius: r }),
        [16; 3],
        3.0,
    )
    .unwrap()
}

#[test]
fn sphere_depth_matches_ray_intersection() {
    let g = sphere([8.0, 8.0, 8.0], 4.0);
    let d = render_depth(&g, View::Front);
    assert!((d.at(8, 8) - 4.0).abs() <= 0.5, "centre depth {}", d.at(8, 8));
    for v in 0..16 {
        for u in 0..16 {
            let rho2 = (u as f64 - 8.0).powi(2) + (v as f64 - 8.0).powi(2);
            if rho2 < 9.0 {
                let want = 8.0 - (16.0 - rho2).sqrt();
                assert!((d.at(u, v) as f64 - want).abs() <= 0.5, "({u},{v})");
            } else if rho2 > 16.0 {
                assert!(!d.is_hit(u, v));
            }
        }
    }
}

#[test]
fn top_view_looks_down_from_high_y() {
    let g = sphere([8.0, 8.0, 8.0], 4.0);
    let d = render_depth(&g, View::Top);
    // first sample is y = 15, surface at y = 12
    assert!((d.at(8, 8) - 3.0).abs() < 1e-5);
}

#[test]
fn empty_grid_misses_everywhere() {
    let g = VoxelGrid::empty([16; 3], 3.0, DistanceKind::Udf).unwrap();
    for v in View::CANONICAL {
        assert_eq!(render_depth(&g, v).hit_count(), 0);
    }
}

#[test]
fn symmetric_sphere_front_equals_left() {
    let g = sphere([7.5, 7.5, 7.5], 4.3);
    let (f, l) = (render_depth(&g, View::Front), render_depth(&g, View::Left));
    let t = f.transposed();
    for i in 0..f.depths.len() {
        let (a, b, c) = (f.depths[i], l.depths[i], t.depths[i]);
        assert!(a == b || (a - b).abs() < 1e-5);
        assert!(a == c || (a - c).abs() < 1e-5);
    }
}

#[test]
fn mean_channel_matches_patch_average() {
    let g = sphere([7.0, 8.0, 9.0], 5.0);
    let d = render_depth(&to_tudf(&g), View::Front);
    let f = extract_features(&d, 4).unwrap();
    assert_eq!((f.channels, f.h, f.w), (PATCH_CHANNELS, 4, 4));
    for py in 0..4 {
        for px in 0..4 {
            let mut s = 0.0f64;
            let mut hits = 0;
            for v in py * 4..py * 4 + 4 {
                for u in px * 4..px * 4 + 4 {
                    let x = d.at(u, v);
                    if x.is_finite() {
                        hits += 1;
                        s += x as f64;
                    } else {
                        s += 15.0;
                    }
                }
            }
            assert!((f.at(0, py, px) as f64 - s / 16.0).abs() < 1e-5);
            assert!((f.at(4, py, px) as f64 - hits as f64 / 16.0).abs() < 1e-7);
        }
    }
}

#[test]
fn features_are_deterministic_and_patch_checked() {
    let g = to_tudf(&sphere([8.0, 8.0, 8.0], 4.0));
    let d = render_depth(&g, View::Left);
    assert_eq!(extract_features(&d, 4).unwrap(), extract_features(&d, 4).unwrap());
    assert!(extract_features(&d, 3).is_err());
}

#[test]
fn miss_sentinel_does_not_leak() {
    let g = to_tudf(&sphere([8.0, 8.0, 8.0], 4.0));
    let d = render_depth(&g, View::Front);
    let mut nan = d.clone();
    for x in nan.depths.iter_mut().filter(|x| x.is_infinite()) {
        *x = f32::NAN;
    }
    let (a, b) = (extract_features(&d, 4).unwrap(), extract_features(&nan, 4).unwrap());
    assert_eq!(a, b);
    assert!(a.values.iter().all(|v| v.is_finite()));
}

#[test]
fn aggregate_matches_explicit_sum() {
    let g = to_tudf(&sphere([6.0, 8.5, 9.0], 4.0));
    let fs: Vec<ViewFeatures> = View::CANONICAL
        .iter()
        .map(|&v| extract_features(&render_depth(&g, v), 4).unwrap())
        .collect();
    let avg = aggregate_views(&fs).unwrap();
    for i in 0..avg.values.len() {
        let s = fs[0].values[i] as f64 + fs[1].values[i] as f64 + fs[2].values[i] as f64;
        assert!((avg.values[i] as f64 - s / 3.0).abs() < 1e-6);
    }
    let same = aggregate_views(&[fs[0].clone(), fs[0].clone(), fs[0].clone()]).unwrap();
    assert_eq!(same, fs[0]);
    let pair = aggregate_views(&fs[..2]).unwrap();
    for i in 0..pair.values.len() {
        let want = (fs[0].values[i] as f64 + fs[1].values[i] as f64) / 2.0;
        assert!((pair.values[i] as f64 - want).abs() < 1e-6);
    }
    assert_eq!(
        view_features(&g, &View::CANONICAL, &PatchDescriptor::default()).unwrap(),
        avg
    );
}

#[test]
fn features_file_roundtrip() {
    let g = to_tudf(&sphere([8.0, 8.0, 8.0], 4.0));
    let f = view_features(&g, &View::CANONICAL, &PatchDescriptor::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.vfea");
    save_features(&f, &path).unwrap();
    assert_eq!(load_features(&path).unwrap(), f);
    let pre = PrecomputedFeatures {
        maps: vec![(View::Front, f.clone())],
    };
    assert_eq!(pre.extract(&render_depth(&g, View::Front)).unwrap(), f);
    assert!(pre.extract(&render_depth(&g, View::Top)).is_err());
}

fn features_strategy() -> impl Strategy<Value = Vec<ViewFeatures>> {
    (1usize..6).prop_flat_map(|n| {
        prop::collection::vec(prop::collection::vec(-1e3f32..1e3, 2 * 3 * 2), n)
            .prop_map(|vs| vs.into_iter().map(|v| ViewFeatures::new(2, 3, 2, v).unwrap()).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregate_is_permutation_invariant(fs in features_strategy(), rot in 0usize..6) {
        let mut perm = fs.clone();
        perm.rotate_left(rot % fs.len());
        perm.reverse();
        prop_assert_eq!(aggregate_views(&fs).unwrap(), aggregate_views(&perm).unwrap());
    }

    #[test]
    fn signed_and_unsigned_render_alike(seed in any::<u64>(), view in 0usize..3) {
        let spec = ShapeSpec::random(seed, [16; 3]).unwrap();
        let sdf = sdf_from_spec(&spec, [16; 3], 3.0).unwrap();
        let v = View::CANONICAL[view];
        prop_assert_eq!(render_depth_at(&sdf, v, UDF_ISO), render_depth(&to_tudf(&sdf), v));
    }
}
