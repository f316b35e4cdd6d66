//! Brownian-bridge posterior between a complete-shape latent (`t = 0`) and
//! a partial-shape latent (`t = T`), its ε-parameterized training target,
//! and the few-step reverse sampler.

use bridgekit_tensor::{Scalar, Tensor};
use rand::Rng;

use crate::error::{invalid, Error, Result};

/// Ratio of the smallest to the largest per-step increment.
pub const BETA_MIN_RATIO: f64 = 0.1;

/// Per-step increments `β_1..β_T` with cumulative variances
/// `σ_t² = Σ_{s≤t} β_s` and `σ_{b,t}² = Σ_{s>t} β_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSchedule {
    betas: Vec<f64>,
    sigma2: Vec<f64>,
    sigma2_b: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoeffs {
    /// Weight on the `t = 0` endpoint.
    pub w0: f64,
    /// Weight on the far endpoint.
    pub w1: f64,
    pub var: f64,
}

impl BridgeSchedule {
    /// Symmetric triangular schedule peaking at `beta_max`, with
    /// `β_min = BETA_MIN_RATIO · beta_max`.
    pub fn new(t_max: usize, beta_max: f64) -> Result<Self> {
        Self::symmetric_linear(t_max, beta_max * BETA_MIN_RATIO, beta_max)
    }

    /// `β_t` rises linearly from `beta_min` at `t = 1` to `beta_max` at the
    /// midpoint, then mirrors: `β_t = β_{T+1−t}`.
    pub fn symmetric_linear(t_max: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_max < 2 {
            return invalid(format!("schedule needs T >= 2, got {t_max}"));
        }
        if !(beta_min > 0.0 && beta_max >= beta_min && beta_max.is_finite()) {
            return invalid(format!("need 0 < beta_min <= beta_max, got {beta_min}, {beta_max}"));
        }
        let half = t_max.div_ceil(2);
        let rise = |t: usize| {
            if half == 1 {
                beta_max
            } else {
                beta_min + (beta_max - beta_min) * (t - 1) as f64 / (half - 1) as f64
            }
        };
        let betas = (1..=t_max)
            .map(|t| if t <= half { rise(t) } else { rise(t_max + 1 - t) })
            .collect();
        Self::from_betas(betas)
    }

    /// Schedule whose terminal variance `σ_T²` equals `target`.
    pub fn with_terminal_variance(t_max: usize, target: f64) -> Result<Self> {
        let unit = Self::new(t_max, 1.0)?;
        Self::new(t_max, target / unit.sigma2(t_max))
    }

    /// Builds from explicit increments, which must be positive and symmetric.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        let t_max = betas.len();
        if t_max < 2 {
            return invalid("schedule needs at least two steps");
        }
        if betas.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
            return invalid("increments must be positive and finite");
        }
        for t in 0..t_max {
            let (a, b) = (betas[t], betas[t_max - 1 - t]);
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()) {
                return invalid(format!("increments not symmetric at step {}", t + 1));
            }
        }
        let mut sigma2 = vec![0.0; t_max + 1];
        for t in 1..=t_max {
            sigma2[t] = sigma2[t - 1] + betas[t - 1];
        }
        let mut sigma2_b = vec![0.0; t_max + 1];
        for t in (0..t_max).rev() {
            sigma2_b[t] = sigma2_b[t + 1] + betas[t];
        }
        Ok(Self {
            betas,
            sigma2,
            sigma2_b,
        })
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t]
    }

    pub fn sigma2_b(&self, t: usize) -> f64 {
        self.sigma2_b[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma2[t].sqrt()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_max() {
            return invalid(format!("timestep {t} outside 0..={}", self.t_max()));
        }
        Ok(())
    }

    /// Mean weights and variance of `z_t | z_0, z_T`.
    pub fn posterior(&self, t: usize) -> Result<PosteriorCoeffs> {
        self.check_t(t)?;
        let (a, b) = (self.sigma2[t], self.sigma2_b[t]);
        let total = a + b;
        if total <= 0.0 {
            return invalid("bridge has zero total variance");
        }
        Ok(PosteriorCoeffs {
            w0: b / total,
            w1: a / total,
            var: a * b / total,
        })
    }

    /// Weights and variance of `z_{t_to}` given `ẑ_0` and `z_{t_from}`: the
    /// same bridge restricted to `[0, t_from]`.
    pub fn reverse_coeffs(&self, t_from: usize, t_to: usize) -> Result<PosteriorCoeffs> {
        self.check_t(t_from)?;
        if t_to >= t_from {
            return invalid(format!("reverse step must go down in time, got {t_from} -> {t_to}"));
        }
        let a = self.sigma2[t_to];
        let b = self.sigma2[t_from] - a;
        let total = a + b;
        Ok(PosteriorCoeffs {
            w0: b / total,
            w1: a / total,
            var: a * b / total,
        })
    }

    /// `n + 1` timesteps from `T` down to 0, spaced uniformly in `σ_t²`.
    /// Each interior step takes the timestep nearest its target variance,
    /// kept strictly decreasing, so `n = T` visits every timestep.
    pub fn variance_spaced_steps(&self, n: usize) -> Result<Vec<usize>> {
        let t_max = self.t_max();
        if n == 0 || n > t_max {
            return invalid(format!("step count {n} outside 1..={t_max}"));
        }
        let total = self.sigma2[t_max];
        let mut steps = vec![t_max];
        for i in 1..n {
            let target = total * (n - i) as f64 / n as f64;
            let nearest = (0..=t_max)
                .min_by(|&x, &y| {
                    (self.sigma2[x] - target)
                        .abs()
                        .total_cmp(&(self.sigma2[y] - target).abs())
                })
                .unwrap();
            let prev = *steps.last().unwrap();
            steps.push(nearest.clamp(n - i, prev - 1));
        }
        steps.push(0);
        Ok(steps)
    }
}

fn check_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::DimMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn affine<T: Scalar>(a: &Tensor<T>, wa: f64, b: &Tensor<T>, wb: f64) -> Result<Tensor<T>> {
    Ok(a.scale(T::from_f64_lossy(wa)).add(&b.scale(T::from_f64_lossy(wb)))?)
}

pub fn gaussian_like<T: Scalar, R: Rng + ?Sized>(x: &Tensor<T>, rng: &mut R) -> Tensor<T> {
    Tensor::randn(x.shape(), rng)
}

/// `(μ_t, Σ_t)` of the bridge posterior; `Σ_t` applies isotropically.
pub fn posterior_params<T: Scalar>(
    z0: &Tensor<T>,
    z1: &Tensor<T>,
    t: usize,
    sched: &BridgeSchedule,
) -> Result<(Tensor<T>, f64)> {
    check_same(z0, z1, "posterior endpoints")?;
    let c = sched.posterior(t)?;
    if t == 0 {
        return Ok((z0.clone(), 0.0));
    }
    if t == sched.t_max() {
        return Ok((z1.clone(), 0.0));
    }
    Ok((affine(z0, c.w0, z1, c.w1)?, c.var))
}

/// `z_t = μ_t + √Σ_t · ε`.
pub fn sample_zt<T: Scalar, R: Rng + ?Sized>(
    z0: &Tensor<T>,
    z1: &Tensor<T>,
    t: usize,
    sched: &BridgeSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let (mu, var) = posterior_params(z0, z1, t, sched)?;
    if var == 0.0 {
        return Ok(mu);
    }
    let eps = gaussian_like(&mu, rng);
    Ok(mu.add(&eps.scale(T::from_f64_lossy(var.sqrt())))?)
}

fn sigma_for<T: Scalar>(t: usize, sched: &BridgeSchedule) -> Result<T> {
    sched.check_t(t)?;
    if t == 0 {
        return invalid("σ_0 = 0: no ε target at t = 0");
    }
    Ok(T::from_f64_lossy(sched.sigma(t)))
}

/// `(z_t − z_0) / σ_t`.
pub fn eps_target<T: Scalar>(z_t: &Tensor<T>, z0: &Tensor<T>, t: usize, sched: &BridgeSchedule) -> Result<Tensor<T>> {
    check_same(z_t, z0, "eps target")?;
    let s = sigma_for::<T>(t, sched)?;
    Ok(z_t.sub(z0)?.scale(T::one() / s))
}

/// `ẑ_0 = z_t − σ_t · ε̂`.
pub fn predict_z0<T: Scalar>(
    z_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    sched: &BridgeSchedule,
) -> Result<Tensor<T>> {
    check_same(z_t, eps_hat, "predict z0")?;
    let s = sigma_for::<T>(t, sched)?;
    Ok(z_t.sub(&eps_hat.scale(s))?)
}

/// `z_T + scale · ε`.
pub fn inject_stochasticity<T: Scalar, R: Rng + ?Sized>(z1: &Tensor<T>, scale: f64, rng: &mut R) -> Result<Tensor<T>> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return invalid(format!("noise scale must be non-negative, got {scale}"));
    }
    if scale == 0.0 {
        return Ok(z1.clone());
    }
    let eps = gaussian_like(z1, rng);
    Ok(z1.add(&eps.scale(T::from_f64_lossy(scale)))?)
}

/// Draws `z_{t_to}` from the bridge pinned at `ẑ_0` (time 0) and `z_t`
/// (time `t_from`). `t_to = 0` returns `ẑ_0`. With `deterministic` the
/// posterior mean is returned.
pub fn reverse_step<T: Scalar, R: Rng + ?Sized>(
    z_t: &Tensor<T>,
    z0_hat: &Tensor<T>,
    t_from: usize,
    t_to: usize,
    sched: &BridgeSchedule,
    rng: &mut R,
    deterministic: bool,
) -> Result<Tensor<T>> {
    check_same(z_t, z0_hat, "reverse step")?;
    let c = sched.reverse_coeffs(t_from, t_to)?;
    if t_to == 0 {
        return Ok(z0_hat.clone());
    }
    let mean = affine(z0_hat, c.w0, z_t, c.w1)?;
    if deterministic || c.var == 0.0 {
        return Ok(mean);
    }
    let eps = gaussian_like(&mean, rng);
    Ok(mean.add(&eps.scale(T::from_f64_lossy(c.var.sqrt())))?)
}

/// Anything that predicts ε from `(z_t, t)`.
pub trait EpsModel<T: Scalar> {
    fn predict_eps(&self, z_t: &Tensor<T>, t: usize) -> Result<Tensor<T>>;
}

impl<T: Scalar, F> EpsModel<T> for F
where
    F: Fn(&Tensor<T>, usize) -> Result<Tensor<T>>,
{
    fn predict_eps(&self, z_t: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self(z_t, t)
    }
}

/// Reverse sampler from `z_T` over `n_steps` variance-spaced timesteps;
/// returns the final `ẑ_0`.
pub fn sample_completion<T: Scalar, R: Rng + ?Sized>(
    model: &dyn EpsModel<T>,
    z1: &Tensor<T>,
    n_steps: usize,
    sched: &BridgeSchedule,
    rng: &mut R,
    deterministic: bool,
) -> Result<Tensor<T>> {
    let steps = sched.variance_spaced_steps(n_steps)?;
    let mut z = z1.clone();
    for pair in steps.windows(2) {
        let (from, to) = (pair[0], pair[1]);
        let eps = model.predict_eps(&z, from)?;
        let z0_hat = predict_z0(&z, &eps, from, sched)?;
        z = reverse_step(&z, &z0_hat, from, to, sched, rng, deterministic)?;
    }
    Ok(z)
}
