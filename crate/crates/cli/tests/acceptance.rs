//! Acceptance criteria, one line per criterion.
//!
//! `cargo test -p bridgekit-cli --test acceptance -- 1 5` runs a subset.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use bridgekit::bridge::*;
use bridgekit::denoiser::*;
use bridgekit::geometry::*;
use bridgekit::grid::*;
use bridgekit::metrics::*;
use bridgekit::views::*;
use bridgekit::vqvae::*;
use bridgekit_cli::pipeline::{self, Context, InferenceOverrides, TrainOptions};
use bridgekit_cli::{RunConfig, RunDir, StageId};
use bridgekit_tensor::gradcheck::check_gradients;
use bridgekit_tensor::{attention, Module, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const MC_DRAWS: usize = 100_000;
const Z_SE: f64 = 3.0;
const BRIDGE_BUDGET: Duration = Duration::from_secs(10);
const ROUNDTRIP_TOL: f64 = 1e-5;
const OP_GRAD_TOL: f64 = 1e-4;
const E2E_GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const SURFACE_TOL: f64 = 0.5;
const DESK_BUDGET: Duration = Duration::from_secs(30 * 60);
const COMPLETION_VS_COPY: f64 = 0.5;
const EPS_REDUCTION: f64 = 0.1;
const REPRO_STEPS: u64 = 100;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn within_budget(start: Instant, budget: Duration, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    ensure!(
        took < budget,
        "{what} took {:.1}s, budget {}s",
        took.as_secs_f64(),
        budget.as_secs()
    );
    Ok(())
}

/// Sample mean and variance checked against `(mu, var)` within `Z_SE` standard errors.
fn check_moments(xs: &[f64], mu: f64, var: f64, what: &str) -> Result<(), String> {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    ensure!((m - mu).abs() < Z_SE * (var / n).sqrt(), "{what}: mean {m} vs {mu}");
    ensure!(
        (v - var).abs() < Z_SE * var * (2.0 / (n - 1.0)).sqrt(),
        "{what}: var {v} vs {var}"
    );
    Ok(())
}

fn bridge_math() -> Outcome {
    let start = Instant::now();
    let s = BridgeSchedule::with_terminal_variance(50, 1.0).map_err(e)?;
    for t in 0..=50 {
        let c = s.posterior(t).map_err(e)?;
        ensure!(
            (c.w0 + c.w1 - 1.0).abs() < 1e-12,
            "t={t}: weights sum to {}",
            c.w0 + c.w1
        );
        ensure!(
            c.w0 >= 0.0 && c.w1 >= 0.0 && c.var >= 0.0,
            "t={t}: negative coefficient"
        );
    }
    ensure!(s.posterior(0).map_err(e)?.var == 0.0, "variance at t=0 is not zero");
    ensure!(s.posterior(50).map_err(e)?.var == 0.0, "variance at t=T is not zero");

    let z0 = Tensor::from_vec(vec![0.3, -1.0], &[2]).map_err(e)?;
    let z1 = Tensor::from_vec(vec![1.2, 0.5], &[2]).map_err(e)?;
    let mut r = rng(1);
    ensure!(
        sample_zt(&z0, &z1, 0, &s, &mut r).map_err(e)?.to_vec() == z0.to_vec(),
        "z_0 not pinned"
    );
    ensure!(
        sample_zt(&z0, &z1, 50, &s, &mut r).map_err(e)?.to_vec() == z1.to_vec(),
        "z_T not pinned"
    );
    for t in [1, 13, 25, 37, 49] {
        let c = s.posterior(t).map_err(e)?;
        let mut draws = [Vec::with_capacity(MC_DRAWS), Vec::with_capacity(MC_DRAWS)];
        for _ in 0..MC_DRAWS {
            let d = sample_zt(&z0, &z1, t, &s, &mut r).map_err(e)?.to_vec();
            draws[0].push(d[0]);
            draws[1].push(d[1]);
        }
        for (k, xs) in draws.iter().enumerate() {
            let mu = c.w0 * z0.to_vec()[k] + c.w1 * z1.to_vec()[k];
            check_moments(xs, mu, c.var, &format!("t={t} k={k}"))?;
        }
    }
    within_budget(start, BRIDGE_BUDGET, "bridge checks")?;
    Ok(format!("5 timesteps x {MC_DRAWS} draws within {Z_SE} SE"))
}

fn oracle_roundtrip() -> Outcome {
    let s = BridgeSchedule::with_terminal_variance(50, 1.0).map_err(e)?;
    let mut r = rng(2);
    let z0 = Tensor::<f64>::randn(&[2, 2, 4, 4, 4], &mut r);
    let z1 = Tensor::<f64>::randn(&[2, 2, 4, 4, 4], &mut r);
    let sched = s.clone();
    let target = z0.clone();
    let oracle = move |z_t: &Tensor<f64>, t: usize| eps_target(z_t, &target, t, &sched);
    let mut worst = 0.0f64;
    for n in 1..=50 {
        for det in [true, false] {
            let out = sample_completion(&oracle, &z1, n, &s, &mut r, det).map_err(e)?;
            let err = out
                .to_vec()
                .iter()
                .zip(z0.to_vec())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            ensure!(err < ROUNDTRIP_TOL, "n={n} det={det}: max error {err}");
            worst = worst.max(err);
        }
    }
    Ok(format!("n_steps 1..=50, max error {worst:.1e}"))
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut rng(seed))
}

/// Random projection so every output element reaches the checked scalar.
fn probe(y: &Tensor<f64>, seed: u64) -> bridgekit_tensor::Result<Tensor<f64>> {
    y.mul(&randn(y.shape(), seed ^ 0x9e37)).map(|t| t.sum())
}

type Op = Box<dyn Fn(&[Tensor<f64>]) -> bridgekit_tensor::Result<Tensor<f64>>>;

fn op_cases() -> Vec<(&'static str, Op, Vec<Tensor<f64>>)> {
    let ab = || vec![randn(&[3, 4], 1), randn(&[3, 4], 2)];
    vec![
        ("add", Box::new(|x| probe(&x[0].add(&x[1])?, 3)), ab()),
        ("mul", Box::new(|x| probe(&x[0].mul(&x[1])?, 3)), ab()),
        ("silu", Box::new(|x| probe(&x[0].silu(), 4)), ab()),
        ("sigmoid", Box::new(|x| probe(&x[0].sigmoid(), 5)), ab()),
        ("mse", Box::new(|x| x[0].mse(&x[1])), ab()),
        (
            "matmul",
            Box::new(|x| probe(&x[0].matmul(&x[1])?, 7)),
            vec![randn(&[2, 3, 4], 12), randn(&[2, 4, 3], 13)],
        ),
        (
            "linear",
            Box::new(|x| probe(&x[0].linear(&x[1], Some(&x[2]))?, 9)),
            vec![randn(&[2, 3, 4], 14), randn(&[5, 4], 15), randn(&[5], 16)],
        ),
        (
            "permute",
            Box::new(|x| probe(&x[0].permute(&[2, 0, 1])?, 10)),
            vec![randn(&[2, 3, 4], 17)],
        ),
        (
            "concat",
            Box::new(|x| probe(&Tensor::concat(&[&x[0], &x[1]], 1)?.square(), 12)),
            vec![randn(&[2, 1, 3], 19), randn(&[2, 2, 3], 20)],
        ),
        (
            "softmax",
            Box::new(|x| probe(&x[0].softmax()?, 13)),
            vec![randn(&[3, 5], 21)],
        ),
        (
            "gather_rows",
            Box::new(|x| probe(&x[0].gather_rows(&[2, 0, 2, 1])?, 14)),
            vec![randn(&[3, 2], 22)],
        ),
        (
            "conv3d",
            Box::new(|x| probe(&x[0].conv3d(&x[1], Some(&x[2]), 1, 1)?, 17)),
            vec![
                randn(&[2, 2, 4, 4, 4], 26),
                randn(&[3, 2, 3, 3, 3], 27),
                randn(&[3], 28),
            ],
        ),
        (
            "conv3d/2",
            Box::new(|x| probe(&x[0].conv3d(&x[1], None, 2, 1)?, 18)),
            vec![randn(&[1, 2, 5, 4, 6], 29), randn(&[2, 2, 3, 3, 3], 30)],
        ),
        (
            "upsample",
            Box::new(|x| probe(&x[0].upsample_nearest2x()?, 19)),
            vec![randn(&[1, 2, 2, 3, 2], 31)],
        ),
        (
            "group_norm",
            Box::new(|x| probe(&x[0].group_norm(2, &x[1], &x[2], 1e-5)?, 20)),
            vec![randn(&[2, 4, 2, 2, 2], 32), randn(&[4], 33), randn(&[4], 34)],
        ),
        (
            "attention",
            Box::new(|x| probe(&attention(&x[0], &x[1], &x[2])?, 21)),
            vec![randn(&[3, 4], 35), randn(&[5, 4], 36), randn(&[5, 2], 37)],
        ),
    ]
}

fn tiny_pairs() -> Result<Vec<(VoxelGrid, VoxelGrid, ViewFeatures)>, String> {
    (0..2)
        .map(|i| {
            let spec = ShapeSpec::single(Primitive::Sphere {
                center: [3.5 + i as f64 * 0.3, 3.5, 3.7],
                radius: 2.2,
            });
            let sdf = sdf_from_spec(&spec, [8; 3], 3.0).map_err(e)?;
            let partial = simulate_partial_scan(&sdf, &[AxisDir::PosZ], 0.0).map_err(e)?;
            let complete = to_tudf(&sdf);
            let f = view_features(&complete, &View::CANONICAL, &PatchDescriptor::default()).map_err(e)?;
            Ok((partial, complete, f))
        })
        .collect()
}

fn end_to_end_gradient() -> Result<f64, String> {
    let cfg = VqVaeConfig {
        grid_dim: 8,
        latent_dim: 4,
        enc_width: 4,
        dec_width: 4,
        feature_tokens: 4,
        attn_dim: 4,
        codebook_size: 8,
        ..VqVaeConfig::default()
    };
    let mut vq = VqVae::<f64>::new(cfg.clone(), &mut rng(8)).map_err(e)?;
    vq.activate_fusion().map_err(e)?;
    vq.set_trainable(false);
    let e_p = Encoder::<f64>::new(&cfg, &mut rng(9)).map_err(e)?;
    let den_cfg = DenoiserConfig {
        in_channels: 2,
        base_width: 4,
        multipliers: vec![1, 2],
        time_dim: 8,
        attention: true,
    };
    let den = Denoiser::<f64>::new(den_cfg, &mut rng(10)).map_err(e)?;
    let sched = BridgeSchedule::with_terminal_variance(50, 1.0).map_err(e)?;
    let data = tiny_pairs()?;
    let c: Vec<&VoxelGrid> = data.iter().map(|d| &d.1).collect();
    let p: Vec<&VoxelGrid> = data.iter().map(|d| &d.0).collect();
    let f: Vec<&ViewFeatures> = data.iter().map(|d| &d.2).collect();
    let batch = BridgeBatch::<f64>::new(&c, &p, Some(&f), 8).map_err(e)?;

    let params: Vec<(String, Tensor<f64>)> = den
        .named_params("den/")
        .into_iter()
        .chain(e_p.named_params("e_p/"))
        .collect();
    let pick = |name: &str| params.iter().find(|(n, _)| n == name).map(|p| p.1.clone());
    let probes: Vec<Tensor<f64>> = [
        "den/conv_in/weight",
        "den/mid_attn/q/weight",
        "den/time1/weight",
        "e_p/conv_out/bias",
    ]
    .iter()
    .map(|n| pick(n).ok_or(format!("no parameter {n}")))
    .collect::<Result<_, _>>()?;
    let wrap = |err: bridgekit::Error| TensorError::Invalid {
        op: "bridge loss",
        detail: err.to_string(),
    };
    let loss = |_: &[Tensor<f64>]| {
        let s = bridge_sample(&vq, &e_p, &batch, &sched, 1.0, &mut rng(11)).map_err(wrap)?;
        eps_loss(&den, &s).map_err(wrap)
    };
    Ok(check_gradients(loss, &probes, 1e-5).map_err(e)?.max_rel_err)
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let cases = op_cases();
    for (name, f, inputs) in &cases {
        let r = check_gradients(f, inputs, 1e-3).map_err(e)?;
        ensure!(r.max_rel_err < OP_GRAD_TOL, "{name}: relative error {}", r.max_rel_err);
        worst = worst.max(r.max_rel_err);
    }
    let e2e = end_to_end_gradient()?;
    ensure!(e2e < E2E_GRAD_TOL, "end-to-end relative error {e2e}");
    within_budget(start, GRAD_BUDGET, "gradient checks")?;
    Ok(format!(
        "{} ops max rel {worst:.1e}, end-to-end rel {e2e:.1e}",
        cases.len()
    ))
}

fn vq_checks() -> Outcome {
    let mut r = rng(4);
    for trial in 0..50 {
        let entries: Vec<f64> = (0..64 * 3).map(|_| r.random_range(-3.0..3.0)).collect();
        let tokens: Vec<f64> = (0..8 * 3).map(|_| r.random_range(-4.0..4.0)).collect();
        let cb = Codebook::<f64>::from_entries(Tensor::from_vec(entries.clone(), &[64, 3]).map_err(e)?).map_err(e)?;
        let got = cb.nearest(&tokens);
        for (t, tok) in tokens.chunks(3).enumerate() {
            let d: Vec<f64> = entries
                .chunks(3)
                .map(|c| (0..3).map(|k| (tok[k] - c[k]).powi(2)).sum())
                .collect();
            let best = d.iter().cloned().fold(f64::INFINITY, f64::min);
            ensure!(
                got[t] == d.iter().position(|&x| x == best).unwrap(),
                "trial {trial}: argmin disagrees"
            );
        }
        let z = Tensor::from_vec(tokens, &[1, 3, 2, 2, 2]).map_err(e)?;
        let a = quantize(&z, &cb, 0.25).map_err(e)?;
        let b = quantize(&a.quantized, &cb, 0.25).map_err(e)?;
        ensure!(
            a.indices == b.indices && a.quantized.to_vec() == b.quantized.to_vec(),
            "trial {trial}: not idempotent"
        );
    }

    let cb = Codebook::<f64>::from_entries(Tensor::randn(&[64, 2], &mut r)).map_err(e)?;
    let idx = [3usize, 17, 63, 0, 5, 5, 40, 22];
    let rows = cb.entries.gather_rows(&idx).map_err(e)?.detach();
    let z = rows
        .reshape(&[1, 2, 2, 2, 2])
        .map_err(e)?
        .permute(&[0, 4, 1, 2, 3])
        .map_err(e)?;
    let q = quantize(&z, &cb, 0.25).map_err(e)?;
    ensure!(q.indices == idx, "coincident tokens mapped to {:?}", q.indices);
    ensure!(
        q.codebook_loss.item() == 0.0 && q.commitment_loss.item() == 0.0,
        "coincident tokens have nonzero loss"
    );

    // L(y) = 1.5 y0² - 0.7 y1² + y0 y1 at the quantized point; the gradient passes straight through
    let cb = Codebook::<f64>::from_entries(Tensor::from_vec(vec![0.0, 1.0], &[2, 1]).map_err(e)?).map_err(e)?;
    let z = Tensor::from_vec(vec![0.3, 0.8], &[1, 1, 1, 1, 2])
        .map_err(e)?
        .into_param();
    let q = quantize(&z, &cb, 0.25).map_err(e)?;
    let y = q.quantized.reshape(&[2]).map_err(e)?;
    let pick = |k: usize| -> Result<Tensor<f64>, String> {
        let mut m = vec![0.0; 2];
        m[k] = 1.0;
        Ok(y.mul(&Tensor::from_vec(m, &[2]).map_err(e)?).map_err(e)?.sum())
    };
    let (y0, y1) = (pick(0)?, pick(1)?);
    let loss = y0
        .square()
        .scale(1.5)
        .add(&y1.square().scale(-0.7))
        .map_err(e)?
        .add(&y0.mul(&y1).map_err(e)?)
        .map_err(e)?;
    loss.backward().map_err(e)?;
    let g = z.grad().ok_or("no gradient reached the encoder output")?;
    let yq = q.quantized.to_vec();
    let want = [3.0 * yq[0] + yq[1], -1.4 * yq[1] + yq[0]];
    ensure!(yq == [0.0, 1.0], "toy quantized to {yq:?}");
    ensure!(
        (g[0] - want[0]).abs() < 1e-12 && (g[1] - want[1]).abs() < 1e-12,
        "gradient {g:?} vs {want:?}"
    );
    Ok("K=64 argmin over 50 trials, idempotent, zero losses, straight-through toy".into())
}

fn open_edges(m: &TriMesh) -> usize {
    let mut edges: HashMap<(u32, u32), usize> = HashMap::new();
    for t in &m.triangles {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            *edges.entry((a.min(b), a.max(b))).or_default() += 1;
        }
    }
    edges.values().filter(|&&c| c != 2).count()
}

fn geometry_checks() -> Outcome {
    let spec = ShapeSpec::single(Primitive::Sphere {
        center: [16.0; 3],
        radius: 5.0,
    });
    let g = sdf_from_spec(&spec, [32; 3], 3.0).map_err(e)?;
    let m = marching_cubes(&g, 0.0).map_err(e)?;
    ensure!(!m.is_empty(), "sphere mesh is empty");
    let worst = m
        .vertices
        .iter()
        .map(|v| ((v[0] - 16.0).powi(2) + (v[1] - 16.0).powi(2) + (v[2] - 16.0).powi(2)).sqrt() - 5.0)
        .fold(0.0f64, |a, d| a.max(d.abs()));
    ensure!(worst < SURFACE_TOL, "vertex {worst} off the sphere");
    let open = open_edges(&m);
    ensure!(open == 0, "{open} open or non-manifold edges");

    let mut two = TriMesh {
        vertices: vec![
            [0.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 5.0],
            [1.0, 0.0, 5.0],
            [0.0, 1.0, 5.0],
        ],
        ..Default::default()
    };
    two.push_triangle([0, 1, 2]);
    two.push_triangle([3, 4, 5]);
    let pts = sample_surface(&two, MC_DRAWS, &mut rng(5)).map_err(e)?;
    let n = MC_DRAWS as f64;
    let big = pts.iter().filter(|p| p[2] == 0.0).count() as f64;
    let sd = (n * 0.75 * 0.25).sqrt();
    ensure!(
        (big - 0.75 * n).abs() < Z_SE * sd,
        "{big} of {n} draws on the 3/4-area triangle"
    );
    Ok(format!(
        "{} vertices, max off-surface {worst:.3}, watertight, area split {:.4}",
        m.vertices.len(),
        big / n
    ))
}

fn brute_nearest(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn brute_f1(p: &[[f64; 3]], q: &[[f64; 3]], frac: f64) -> f64 {
    let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
    for x in q {
        for k in 0..3 {
            lo[k] = lo[k].min(x[k]);
            hi[k] = hi[k].max(x[k]);
        }
    }
    let tau = frac * ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2) + (hi[2] - lo[2]).powi(2)).sqrt();
    let prec = brute_nearest(p, q).iter().filter(|&&d| d <= tau).count() as f64 / p.len() as f64;
    let rec = brute_nearest(q, p).iter().filter(|&&d| d <= tau).count() as f64 / q.len() as f64;
    if prec + rec == 0.0 {
        0.0
    } else {
        2.0 * prec * rec / (prec + rec)
    }
}

fn random_points(r: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let n = r.random_range(1..=200);
    (0..n)
        .map(|_| {
            if r.random_bool(0.5) {
                [0; 3].map(|_| r.random_range(-20.0..20.0))
            } else {
                // lattice points give exact ties
                [0; 3].map(|_| r.random_range(-3i32..3) as f64)
            }
        })
        .collect()
}

fn metrics_checks() -> Outcome {
    let mut r = rng(6);
    for trial in 0..40 {
        let (p, q) = (random_points(&mut r), random_points(&mut r));
        let frac = r.random_range(0.001..0.5);
        let (a, b) = (brute_nearest(&p, &q), brute_nearest(&q, &p));
        let cd = 0.5 * (a.iter().sum::<f64>() / a.len() as f64 + b.iter().sum::<f64>() / b.len() as f64);
        ensure!(
            nearest_distances(&p, &q).map_err(e)? == a,
            "trial {trial}: nearest distances differ"
        );
        ensure!(chamfer_l1(&p, &q).map_err(e)? == cd, "trial {trial}: chamfer differs");
        ensure!(
            f1_at(&p, &q, frac).map_err(e)? == brute_f1(&p, &q, frac),
            "trial {trial}: F1 differs"
        );
        ensure!(
            chamfer_l1(&p, &p).map_err(e)? == 0.0 && f1_at(&p, &p, frac).map_err(e)? == 1.0,
            "trial {trial}: identity"
        );
    }
    for trial in 0..40 {
        let dims = [0; 3].map(|_| r.random_range(1..=16usize));
        let n: usize = dims.iter().product();
        let mut draw = || (0..n).map(|_| r.random_range(0..7) as f32 * 0.5).collect::<Vec<f32>>();
        let (va, vb) = (draw(), draw());
        let grid = |v: &[f32]| VoxelGrid::new(dims, 1.0, 3.0, DistanceKind::Udf, v.to_vec()).map_err(e);
        let (a, b) = (grid(&va)?, grid(&vb)?);
        let occ = |v: f32| v <= 1.0;
        let inter = va.iter().zip(&vb).filter(|(x, y)| occ(**x) && occ(**y)).count();
        let union = va.iter().zip(&vb).filter(|(x, y)| occ(**x) || occ(**y)).count();
        let want = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        ensure!(iou(&a, &b, 1.0).map_err(e)? == want, "trial {trial}: IoU differs");
        let l1 = va
            .iter()
            .zip(&vb)
            .map(|(x, y)| (*x as f64 - *y as f64).abs())
            .sum::<f64>()
            / n as f64;
        ensure!(l1_error(&a, &b).map_err(e)? == l1, "trial {trial}: L1 differs");
        ensure!(
            iou(&a, &a, 1.0).map_err(e)? == 1.0 && l1_error(&a, &a).map_err(e)? == 0.0,
            "trial {trial}: identity"
        );
    }

    let pairs: Vec<ShapePair> = (0..3)
        .map(|i| {
            let spec = ShapeSpec::random(100 + i as u64, [16; 3]).map_err(e)?;
            let sdf = sdf_from_spec(&spec, [16; 3], 3.0).map_err(e)?;
            let partial = simulate_partial_scan(&sdf, &[AxisDir::ALL[i % 6]], 0.0).map_err(e)?;
            ShapePair::new(format!("s{i}"), partial, to_tudf(&sdf)).map_err(e)
        })
        .collect::<Result<_, _>>()?;
    let cfg = MetricsConfig {
        surface_points: 2_000,
        ..Default::default()
    };
    let oracle = |p: &ShapePair, _: usize| Ok(p.complete.clone());
    let report = evaluate_corpus(&pairs, &oracle, &cfg, false).map_err(e)?;
    let perfect = Scores {
        l1: 0.0,
        cd: 0.0,
        iou: 1.0,
        f1: 1.0,
    };
    ensure!(report.means == perfect, "oracle completion scored {:?}", report.means);
    Ok("40 point-set and 40 grid trials exact, oracle completion perfect".into())
}

fn summary(run: &RunDir, stage: StageId, key: &str) -> Result<f64, String> {
    run.read_summary(stage).map_err(e)?[key]
        .as_f64()
        .ok_or(format!("{} summary lacks {key}", stage.name()))
}

fn train_all(ctx: &Context) -> Result<(), String> {
    pipeline::gen(ctx).map_err(e)?;
    pipeline::train_vqvae(ctx, Stage::One, TrainOptions::default()).map_err(e)?;
    pipeline::train_vqvae(ctx, Stage::Two, TrainOptions::default()).map_err(e)?;
    pipeline::train_bridge(ctx, TrainOptions::default()).map_err(e)?;
    Ok(())
}

fn desk_scale() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(e)?;
    let ctx = Context::open(dir.path(), RunConfig::default(), false).map_err(e)?;
    train_all(&ctx)?;
    let report = pipeline::eval(&ctx, InferenceOverrides::default(), None).map_err(e)?;
    within_budget(start, DESK_BUDGET, "desk-scale run")?;

    let s1 = summary(&ctx.run, StageId::VqStage1, "reconstruction_l1")?;
    let s2 = summary(&ctx.run, StageId::VqStage2, "reconstruction_l1")?;
    let (eps0, eps1) = (
        summary(&ctx.run, StageId::Bridge, "initial_eps")?,
        summary(&ctx.run, StageId::Bridge, "final_eps")?,
    );
    let m = report.means;
    let b = report.baseline.as_ref().ok_or("report has no baseline")?.means;
    let detail = format!(
        "l1 s1 {s1:.4} s2 {s2:.4}; completion l1 {:.4} vs copy {:.4}, iou {:.3} vs {:.3}; eps {eps0:.4} -> {eps1:.4}; {:.0}s",
        m.l1,
        b.l1,
        m.iou,
        b.iou,
        start.elapsed().as_secs_f64()
    );
    ensure!(s2 <= s1, "(a) stage 2 l1 above stage 1: {detail}");
    ensure!(
        m.l1 < COMPLETION_VS_COPY * b.l1,
        "(b) completion l1 not below half of copy-partial: {detail}"
    );
    ensure!(m.iou > b.iou, "(b) completion IoU not above copy-partial: {detail}");
    ensure!(
        eps1 < EPS_REDUCTION * eps0,
        "(c) eps loss not reduced tenfold: {detail}"
    );
    Ok(detail)
}

fn repro_config() -> Result<RunConfig, String> {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(
        &[
            "grid.pairs=8",
            "vqvae.stage1_steps=100",
            "vqvae.stage2_steps=10",
            "bridge.steps=10",
            "denoiser.base_width=8",
            "denoiser.time_dim=16",
            "metrics.surface_points=1000",
            "run.print_every=0",
        ]
        .map(String::from),
    )
    .map_err(e)?;
    Ok(cfg)
}

fn run_once(root: &Path) -> Result<(), String> {
    let ctx = Context::open(root, repro_config()?, false).map_err(e)?;
    train_all(&ctx)?;
    pipeline::eval(&ctx, InferenceOverrides::default(), None).map_err(e)?;
    Ok(())
}

fn reproducibility() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(e)?, tempfile::tempdir().map_err(e)?);
    run_once(a.path())?;
    run_once(b.path())?;
    let (ra, rb) = (RunDir::new(a.path()), RunDir::new(b.path()));
    let read = |p: std::path::PathBuf| fs::read(&p).map_err(|err| format!("{}: {err}", p.display()));
    for stage in [StageId::VqStage1, StageId::VqStage2, StageId::Bridge] {
        let (x, y) = (read(ra.checkpoint_path(stage))?, read(rb.checkpoint_path(stage))?);
        ensure!(x == y, "{} checkpoints differ", stage.name());
    }
    let (x, y) = (read(ra.report_path())?, read(rb.report_path())?);
    ensure!(x == y, "reports differ");
    let step = serde_json::from_slice::<Value>(&read(ra.summary_path(StageId::VqStage1))?).map_err(e)?["step"].as_u64();
    ensure!(step == Some(REPRO_STEPS), "stage 1 ended at {step:?}");
    Ok(format!(
        "checkpoints after {REPRO_STEPS} steps and EvalReport byte-identical"
    ))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "bridge math", bridge_math),
        (2, "oracle round-trip", oracle_roundtrip),
        (3, "gradients", gradients),
        (4, "vector quantization", vq_checks),
        (5, "geometry", geometry_checks),
        (6, "metrics", metrics_checks),
        (7, "desk-scale end-to-end", desk_scale),
        (8, "reproducibility", reproducibility),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} PASS {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} FAIL {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
