use bridgekit::grid::*;
use bridgekit::metrics::*;
use bridgekit::Error;
use proptest::prelude::*;

fn brute_nearest(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn brute_chamfer(p: &[[f64; 3]], q: &[[f64; 3]]) -> f64 {
    let a = brute_nearest(p, q);
    let b = brute_nearest(q, p);
    0.5 * (a.iter().sum::<f64>() / a.len() as f64 + b.iter().sum::<f64>() / b.len() as f64)
}

fn brute_f1(p: &[[f64; 3]], q: &[[f64; 3]], frac: f64) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for x in q {
        for k in 0..3 {
            lo[k] = lo[k].min(x[k]);
            hi[k] = hi[k].max(x[k]);
        }
    }
    let diag = ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2) + (hi[2] - lo[2]).powi(2)).sqrt();
    let tau = frac * diag;
    let prec = brute_nearest(p, q).iter().filter(|&&d| d <= tau).count() as f64 / p.len() as f64;
    let rec = brute_nearest(q, p).iter().filter(|&&d| d <= tau).count() as f64 / q.len() as f64;
    if prec + rec == 0.0 {
        0.0
    } else {
        2.0 * prec * rec / (prec + rec)
    }
}

fn udf(dims: [usize; 3], values: Vec<f32>) -> VoxelGrid {
    VoxelGrid::new(dims, 1.0, 3.0, DistanceKind::Udf, values).unwrap()
}

fn point() -> impl Strategy<Value = [f64; 3]> {
    // a coarse lattice part produces exact ties and duplicates
    prop_oneof![
        prop::array::uniform3(-20.0f64..20.0),
        prop::array::uniform3(-3i32..3).prop_map(|a| a.map(|v| v as f64)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nearest_matches_brute_force(
        p in prop::collection::vec(point(), 1..200),
        q in prop::collection::vec(point(), 1..200),
    ) {
        prop_assert_eq!(nearest_distances(&p, &q).unwrap(), brute_nearest(&p, &q));
        prop_assert_eq!(PointIndex::new(&q).unwrap().nearest_distance(&p[0]), brute_nearest(&p[..1], &q)[0]);
    }

    #[test]
    fn chamfer_and_f1_match_brute_force(
        p in prop::collection::vec(point(), 1..200),
        q in prop::collection::vec(point(), 1..200),
        frac in 0.001f64..0.5,
    ) {
        prop_assert_eq!(chamfer_l1(&p, &q).unwrap(), brute_chamfer(&p, &q));
        prop_assert_eq!(chamfer_l1(&p, &q).unwrap(), chamfer_l1(&q, &p).unwrap());
        prop_assert_eq!(f1_at(&p, &q, frac).unwrap(), brute_f1(&p, &q, frac));
        prop_assert_eq!(chamfer_l1(&p, &p).unwrap(), 0.0);
        prop_assert_eq!(f1_at(&p, &p, frac).unwrap(), 1.0);
    }

    #[test]
    fn iou_and_l1_match_brute_force(
        dims in prop::array::uniform3(1usize..=16),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let n = dims.iter().product();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || (0..n).map(|_| (rng.random_range(0..7) as f32) * 0.5).collect::<Vec<f32>>();
        let (va, vb) = (draw(), draw());
        let (a, b) = (udf(dims, va.clone()), udf(dims, vb.clone()));
        let occ = |v: f32| v <= 1.0;
        let inter = va.iter().zip(&vb).filter(|(x, y)| occ(**x) && occ(**y)).count();
        let union = va.iter().zip(&vb).filter(|(x, y)| occ(**x) || occ(**y)).count();
        let want = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        prop_assert_eq!(iou(&a, &b, 1.0).unwrap(), want);
        prop_assert_eq!(iou(&a, &a, 1.0).unwrap(), 1.0);
        let l1 = va.iter().zip(&vb).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / n as f64;
        prop_assert_eq!(l1_error(&a, &b).unwrap(), l1);
        prop_assert_eq!(l1_error(&a, &a).unwrap(), 0.0);
    }
}

#[test]
fn chamfer_hand_case() {
    let p = [[0.0, 0.0, 0.0]];
    let q = [[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
    // p -> q: 1; q -> p: (1 + 3) / 2 = 2
    assert_eq!(chamfer_l1(&p, &q).unwrap(), 1.5);
    let q = [[0.6, 0.0, 0.8]];
    assert!((chamfer_l1(&p, &q).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn f1_threshold_is_inclusive() {
    // reference diagonal 10, so tau = 1 at frac 0.1
    let q = [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
    let p = [[1.0, 0.0, 0.0], [9.0, 0.0, 0.0]];
    assert_eq!(f1_at(&p, &q, 0.1).unwrap(), 1.0);
    let p = [[1.5, 0.0, 0.0], [8.5, 0.0, 0.0]];
    assert_eq!(f1_at(&p, &q, 0.1).unwrap(), 0.0);
    assert!(f1_at(&p, &q, 0.0).is_err());
}

#[test]
fn empty_point_sets_rejected() {
    let p = [[0.0, 0.0, 0.0]];
    assert!(matches!(nearest_distances(&[], &p), Err(Error::Empty(_))));
    assert!(nearest_distances(&p, &[]).is_err());
    assert!(chamfer_l1(&p, &[]).is_err());
}

#[test]
fn iou_slabs() {
    // a occupies x < 2, b occupies 1 <= x < 3, along a 4-voxel row
    let a = udf([4, 1, 1], vec![0.0, 0.0, 3.0, 3.0]);
    let b = udf([4, 1, 1], vec![3.0, 0.0, 0.0, 3.0]);
    assert_eq!(iou(&a, &b, 1.0).unwrap(), 1.0 / 3.0);
    let empty = udf([4, 1, 1], vec![3.0; 4]);
    assert_eq!(iou(&empty, &empty, 1.0).unwrap(), 1.0);
    assert!(iou(&a, &b, 0.0).is_err());
    assert!(matches!(
        iou(&a, &udf([2, 2, 1], vec![0.0; 4]), 1.0),
        Err(Error::DimMismatch(_))
    ));
}

fn corpus(n: usize) -> Vec<ShapePair> {
    (0..n)
        .map(|i| {
            let spec = ShapeSpec::random(100 + i as u64, [16; 3]).unwrap();
            let sdf = sdf_from_spec(&spec, [16; 3], 3.0).unwrap();
            let partial = simulate_partial_scan(&sdf, &[AxisDir::ALL[i % 6]], 0.0).unwrap();
            ShapePair::new(format!("s{i}"), partial, to_tudf(&sdf)).unwrap()
        })
        .collect()
}

fn small_cfg() -> MetricsConfig {
    MetricsConfig {
        surface_points: 2_000,
        ..Default::default()
    }
}

#[test]
fn oracle_completion_scores_perfectly() {
    let pairs = corpus(3);
    let oracle = |p: &ShapePair, _: usize| Ok(p.complete.clone());
    let r = evaluate_corpus(&pairs, &oracle, &small_cfg(), true).unwrap();
    assert_eq!(
        r.means,
        Scores {
            l1: 0.0,
            cd: 0.0,
            iou: 1.0,
            f1: 1.0
        }
    );
    assert_eq!(r.shapes.len(), 3);
    let b = r.baseline.unwrap();
    assert_eq!(b.method, "copy-partial");
    assert!(b.means.l1 > 0.0 && b.means.iou < 1.0);
}

#[test]
fn report_is_byte_identical_across_runs() {
    let pairs = corpus(3);
    let run = || {
        evaluate_corpus(&pairs, &copy_partial, &small_cfg(), true)
            .unwrap()
            .to_json()
            .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.ends_with("}\n"));
    let back: EvalReport = serde_json::from_str(&a).unwrap();
    assert_eq!(back.to_json().unwrap(), a);
    assert_eq!(back.config.cd_convention, CD_CONVENTION);
}

#[test]
fn empty_mesh_conventions() {
    let cfg = small_cfg();
    let empty = VoxelGrid::empty([16; 3], 3.0, DistanceKind::Udf).unwrap();
    let full = corpus(1).remove(0).complete;
    let both = score_pair(&empty, &empty, &cfg, 0).unwrap();
    assert_eq!((both.cd, both.f1, both.iou, both.l1), (0.0, 1.0, 1.0, 0.0));
    let one = score_pair(&empty, &full, &cfg, 0).unwrap();
    assert_eq!(one.cd, (3.0f64 * 256.0).sqrt());
    assert_eq!(one.f1, 0.0);
    assert_eq!(score_pair(&full, &empty, &cfg, 0).unwrap().f1, 0.0);
}

#[test]
fn evaluate_rejects_empty_corpus() {
    assert!(matches!(
        evaluate_corpus(&[], &copy_partial, &small_cfg(), false),
        Err(Error::Empty(_))
    ));
}
