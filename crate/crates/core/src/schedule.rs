//! Cosine noise schedule, forward noising and the ancestral sampler for
//! clean-target (x̂₀) predicting models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::ConditionBundle;
use crate::error::{Error, Result};
use crate::grid::Grid;

const ALPHA_MIN: f64 = 0.001;
const ALPHA_MAX: f64 = 0.9999;

/// Variance of the noise added at each reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaRule {
    /// σ² = (1 − ᾱ_prev)/(1 − ᾱ_t) · (1 − α)
    #[default]
    Posterior,
    /// σ² = 1 − α
    Beta,
}

/// Mean used for each reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorForm {
    /// `(x_t − (1−α)/√(1−ᾱ_t) · x̂₀) / √α`, see [`posterior_mean`].
    Printed,
    /// Gaussian q(x_prev | x_t, x̂₀) mean, see [`q_posterior_mean`].
    #[default]
    QPosterior,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    #[serde(rename = "T")]
    pub t_max: usize,
    pub cosine_s: f64,
    #[serde(default)]
    pub sigma_rule: SigmaRule,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            t_max: 1000,
            cosine_s: 0.008,
            sigma_rule: SigmaRule::Posterior,
        }
    }
}

/// `ᾱ_t` for `t = 0..=T` and per-step `α_t` for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    t_max: usize,
    offset_s: f64,
    alpha_bar: Vec<f64>,
    alpha: Vec<f64>,
}

/// `f(t) = cos²(((t/T + s)/(1 + s)) · π/2)`.
pub fn cosine_f(t: f64, t_max: f64, s: f64) -> f64 {
    (((t / t_max + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2)
        .cos()
        .powi(2)
}

/// Builds the cosine schedule: per-step `α_t = f(t)/f(t−1)` clipped to
/// `[0.001, 0.9999]`, and `ᾱ_t` their running product, so `ᾱ_0 = 1` and
/// `ᾱ_T` stays strictly positive.
pub fn make_cosine_schedule(t_max: usize, s: f64) -> Result<DiffusionSchedule> {
    if t_max < 1 {
        return Err(Error::Config("diffusion T must be at least 1".into()));
    }
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Config(format!("cosine offset s must be > 0, got {s}")));
    }
    let tm = t_max as f64;
    let mut alpha = Vec::with_capacity(t_max);
    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    alpha_bar.push(1.0);
    for t in 1..=t_max {
        let ratio = cosine_f(t as f64, tm, s) / cosine_f(t as f64 - 1.0, tm, s);
        let a = ratio.clamp(ALPHA_MIN, ALPHA_MAX);
        alpha.push(a);
        alpha_bar.push(alpha_bar[t - 1] * a);
    }
    Ok(DiffusionSchedule {
        t_max,
        offset_s: s,
        alpha_bar,
        alpha,
    })
}

impl DiffusionSchedule {
    pub fn from_config(cfg: &DiffusionConfig) -> Result<Self> {
        make_cosine_schedule(cfg.t_max, cfg.cosine_s)
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn offset_s(&self) -> f64 {
        self.offset_s
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `α_t` for `1 ≤ t ≤ T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(Error::InvalidValue(format!("timestep {t} outside 1..={}", self.t_max)));
        }
        Ok(())
    }

    /// `steps` uniformly strided timesteps in ascending order, ending at `T`.
    pub fn strided_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.t_max {
            return Err(Error::Config(format!(
                "sampling steps must be in 1..={}, got {steps}",
                self.t_max
            )));
        }
        let mut ts: Vec<usize> = (1..=steps)
            .map(|i| ((i as f64 * self.t_max as f64 / steps as f64).round() as usize).max(1))
            .collect();
        ts.dedup();
        Ok(ts)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSample {
    pub x_t: Grid,
    pub t: usize,
    pub eps: Grid,
}

/// `x_t = √ᾱ_t · x0 + √(1−ᾱ_t) · eps`.
pub fn q_sample(x0: &Grid, t: usize, eps: &Grid, sched: &DiffusionSchedule) -> Result<NoisedSample> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x_t = x0.zip_with(eps, |x, e| (a * x as f64 + b * e as f64) as f32)?;
    Ok(NoisedSample {
        x_t,
        t,
        eps: eps.clone(),
    })
}

/// Elementwise `(x_t − (1−α)/√(1−ᾱ) · x̂₀) / √α` for explicit coefficients.
/// The `x̂₀` term vanishes when `α = 1`.
pub fn posterior_mean_with(x_t: &Grid, x0_hat: &Grid, alpha: f64, alpha_bar: f64) -> Result<Grid> {
    let coef = if alpha >= 1.0 {
        0.0
    } else {
        (1.0 - alpha) / (1.0 - alpha_bar).sqrt()
    };
    let inv = 1.0 / alpha.sqrt();
    x_t.zip_with(x0_hat, |x, h| ((x as f64 - coef * h as f64) * inv) as f32)
}

/// Reverse-step mean exactly as the x̂₀-parameterised update is printed:
/// `μ = (1/√α_t) · (x_t − ((1−α_t)/√(1−ᾱ_t)) · x̂₀)`.
pub fn posterior_mean(x_t: &Grid, x0_hat: &Grid, t: usize, sched: &DiffusionSchedule) -> Result<Grid> {
    sched.check_t(t)?;
    posterior_mean_with(x_t, x0_hat, sched.alpha(t), sched.alpha_bar(t))
}

/// Mean of q(x_s | x_t, x̂₀) for a jump from `ᾱ_t` to `ᾱ_s` (s < t).
pub fn q_posterior_mean_with(x_t: &Grid, x0_hat: &Grid, alpha_bar_t: f64, alpha_bar_s: f64) -> Result<Grid> {
    let alpha = alpha_bar_t / alpha_bar_s;
    let denom = 1.0 - alpha_bar_t;
    let c0 = alpha_bar_s.sqrt() * (1.0 - alpha) / denom;
    let ct = alpha.sqrt() * (1.0 - alpha_bar_s) / denom;
    x_t.zip_with(x0_hat, |x, h| (ct * x as f64 + c0 * h as f64) as f32)
}

pub fn q_posterior_mean(x_t: &Grid, x0_hat: &Grid, t: usize, sched: &DiffusionSchedule) -> Result<Grid> {
    sched.check_t(t)?;
    q_posterior_mean_with(x_t, x0_hat, sched.alpha_bar(t), sched.alpha_bar(t - 1))
}

/// A clean-target predictor evaluated on a batch sharing one timestep.
pub trait X0Predictor {
    fn predict_batch(&self, x_t: &[Grid], conds: &[ConditionBundle], t: usize) -> Result<Vec<Grid>>;
}

impl<F> X0Predictor for F
where
    F: Fn(&Grid, &ConditionBundle, usize) -> Result<Grid>,
{
    fn predict_batch(&self, x_t: &[Grid], conds: &[ConditionBundle], t: usize) -> Result<Vec<Grid>> {
        x_t.iter().zip(conds).map(|(x, c)| self(x, c, t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub sigma_rule: SigmaRule,
    pub posterior_form: PosteriorForm,
    /// Valid range of the clean target; x̂₀ is clamped into it every step.
    pub clamp: (f32, f32),
}

impl SamplerConfig {
    pub fn new(steps: usize, clamp: (f32, f32)) -> Self {
        Self {
            steps,
            sigma_rule: SigmaRule::Posterior,
            posterior_form: PosteriorForm::default(),
            clamp,
        }
    }
}

fn gaussian_grid(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Grid {
    Grid::from_fn(h, w, |_, _| StandardNormal.sample(rng))
}

/// Ancestral sampling for a batch; item `i` draws all of its noise from
/// its own generator seeded with `seeds[i]`. Returns the final x̂₀ per item.
pub fn sample_batch(
    model: &dyn X0Predictor,
    conds: &[ConditionBundle],
    sched: &DiffusionSchedule,
    seeds: &[u64],
    cfg: &SamplerConfig,
) -> Result<Vec<Grid>> {
    if conds.len() != seeds.len() {
        return Err(Error::Shape(format!(
            "{} conditions but {} seeds",
            conds.len(),
            seeds.len()
        )));
    }
    if conds.is_empty() {
        return Ok(Vec::new());
    }
    let ts = sched.strided_timesteps(cfg.steps)?;
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut xs: Vec<Grid> = conds
        .iter()
        .zip(&mut rngs)
        .map(|(c, rng)| gaussian_grid(rng, c.pre.height(), c.pre.width()))
        .collect();
    let mut x0_hat = Vec::new();
    for (i, &t) in ts.iter().enumerate().rev() {
        let s = if i == 0 { 0 } else { ts[i - 1] };
        x0_hat = model
            .predict_batch(&xs, conds, t)
            .map_err(|e| Error::Sampling {
                timestep: t,
                source: Box::new(e),
            })?
            .into_iter()
            .map(|g| g.clamp(cfg.clamp.0, cfg.clamp.1))
            .collect();
        if s == 0 {
            break;
        }
        let (ab_t, ab_s) = (sched.alpha_bar(t), sched.alpha_bar(s));
        let alpha = ab_t / ab_s;
        let var = match cfg.sigma_rule {
            SigmaRule::Posterior => (1.0 - ab_s) / (1.0 - ab_t) * (1.0 - alpha),
            SigmaRule::Beta => 1.0 - alpha,
        };
        let sigma = var.max(0.0).sqrt();
        for ((x, h), rng) in xs.iter_mut().zip(&x0_hat).zip(&mut rngs) {
            let mean = match cfg.posterior_form {
                PosteriorForm::Printed => posterior_mean_with(x, h, alpha, ab_t)?,
                PosteriorForm::QPosterior => q_posterior_mean_with(x, h, ab_t, ab_s)?,
            };
            let z = gaussian_grid(rng, x.height(), x.width());
            *x = mean.zip_with(&z, |m, n| (m as f64 + sigma * n as f64) as f32)?;
        }
    }
    Ok(x0_hat)
}

/// Single-item convenience wrapper around [`sample_batch`].
pub fn sample(
    model: &dyn X0Predictor,
    condition: &ConditionBundle,
    sched: &DiffusionSchedule,
    seed: u64,
    cfg: &SamplerConfig,
) -> Result<Grid> {
    Ok(
        sample_batch(model, std::slice::from_ref(condition), sched, &[seed], cfg)?
            .pop()
            .expect("one item in, one out"),
    )
}
