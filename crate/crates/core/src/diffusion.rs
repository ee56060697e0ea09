//! Noise schedules, forward noising, the noise-prediction loss, the DDIM
//! sampler step, classifier-free guidance and latent inpainting.
//!
//! Schedules follow the `alpha_bar_0 = 1` convention, so step 0 is the clean
//! sample and `q_sample(z0, 0, eps) == z0` exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::error::{arg_err, dim_err, Error, Result};
use crate::masking::{round_half_up, PixelMask};
use crate::seeding;
use crate::tensor::Tensor;
use crate::toynets::Denoiser;

/// Default sampler length for desk-scale runs.
pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    /// Index 0 is the clean step.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return arg_err("a schedule needs at least one step");
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return arg_err(format!("every beta must lie in (0, 1), got {b}"));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0f64;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Number of noising steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return arg_err(format!("step {t} outside 0..={}", self.steps()));
        }
        Ok(())
    }

    /// `t,beta,alpha,alpha_bar` rows; the `t = 0` row has empty beta/alpha.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,beta,alpha,alpha_bar\n");
        writeln!(s, "0,,,{:.17e}", self.alpha_bars[0]).unwrap();
        for t in 1..=self.steps() {
            writeln!(s, "{t},{:.17e},{:.17e},{:.17e}", self.beta(t), self.alpha(t), self.alpha_bar(t)).unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Betas interpolated linearly from `beta_start` to `beta_end`, both inclusive.
pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return arg_err("schedule needs T >= 1");
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return arg_err(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// The 1e-4..0.02 linear schedule compressed to [`DEFAULT_STEPS`] steps.
pub fn default_schedule() -> NoiseSchedule {
    linear_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
}

/// `z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, "q_sample", |z, e| (a * z as f64 + b * e as f64) as f32)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.ensure_same_dims(b, "mse")?;
    let ss: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(ss / a.len() as f64)
}

/// Mean squared error between `eps` and the denoiser's prediction at `z_t`.
pub fn diffusion_loss(
    denoiser: &dyn Denoiser,
    z0: &Tensor,
    t: usize,
    eps: &Tensor,
    cond: &ConditionEmbedding,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let zt = q_sample(z0, t, eps, sched)?;
    let pred = denoiser.predict(&zt, t, cond)?;
    mse(eps, &pred)
}

fn check_transition(t: usize, t_prev: usize, sched: &NoiseSchedule) -> Result<()> {
    if !(t_prev < t && t <= sched.steps()) {
        return arg_err(format!("need 0 <= t_prev < t <= {}, got t={t}, t_prev={t_prev}", sched.steps()));
    }
    Ok(())
}

/// Deterministic DDIM transition from `t` to `t_prev`.
pub fn ddim_step(z_t: &Tensor, eps_hat: &Tensor, t: usize, t_prev: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    check_transition(t, t_prev, sched)?;
    let (ab, ap) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pb) = (ap.sqrt(), (1.0 - ap).sqrt());
    z_t.zip_map(eps_hat, "ddim_step", |z, e| {
        let e = e as f64;
        let x0 = (z as f64 - sb * e) / sa;
        (pa * x0 + pb * e) as f32
    })
}

/// DDIM transition with stochasticity `eta`; `eta = 0` reproduces [`ddim_step`].
pub fn ddim_step_eta(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    eta: f64,
    noise: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    check_transition(t, t_prev, sched)?;
    if eta.is_nan() || eta < 0.0 {
        return arg_err(format!("eta must be >= 0, got {eta}"));
    }
    z_t.ensure_same_dims(noise, "ddim_step_eta")?;
    z_t.ensure_same_dims(eps_hat, "ddim_step_eta")?;
    let (ab, ap) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let sigma = eta * ((1.0 - ap) / (1.0 - ab)).sqrt() * (1.0 - ab / ap).sqrt();
    let dir = (1.0 - ap - sigma * sigma).max(0.0).sqrt();
    let (sa, sb, pa) = (ab.sqrt(), (1.0 - ab).sqrt(), ap.sqrt());
    let data = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(noise.data())
        .map(|((&z, &e), &n)| {
            let e = e as f64;
            let x0 = (z as f64 - sb * e) / sa;
            (pa * x0 + dir * e + sigma * n as f64) as f32
        })
        .collect();
    Tensor::new(z_t.dims().to_vec(), data)
}

/// `eps_uncond + s (eps_cond - eps_uncond)`.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    eps_cond.zip_map(eps_uncond, "cfg_combine", |c, u| (u as f64 + scale * (c as f64 - u as f64)) as f32)
}

/// Image-embedding condition vector fed to the denoisers.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    values: Vec<f32>,
}

impl ConditionEmbedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return dim_err("condition embedding needs at least one value");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("condition embedding must be finite".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len.max(1)] }
    }

    pub fn ones(len: usize) -> Self {
        Self { values: vec![1.0; len.max(1)] }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn zeroed(&self) -> Self {
        Self::zeros(self.values.len())
    }
}

/// Replaces the embedding by zeros with probability `p` (decided by `seed`).
pub fn embedding_dropout(emb: &ConditionEmbedding, p: f64, seed: u64) -> Result<ConditionEmbedding> {
    if !(0.0..=1.0).contains(&p) {
        return arg_err(format!("dropout probability must be in [0, 1], got {p}"));
    }
    let u: f64 = seeding::rng(seed).random();
    Ok(if u < p { emb.zeroed() } else { emb.clone() })
}

/// Replaces kept pixels of `z_t_gen` by `q_sample(z_known, t, eps)`.
pub fn inpaint_composite(
    z_t_gen: &Tensor,
    z_known: &Tensor,
    keep_mask: &PixelMask,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    z_t_gen.ensure_same_dims(z_known, "inpaint_composite")?;
    let (h, w, _) = z_t_gen.hwc()?;
    if (keep_mask.height(), keep_mask.width()) != (h, w) {
        return dim_err(format!("latent {h}x{w} vs mask {}x{}", keep_mask.height(), keep_mask.width()));
    }
    let known = q_sample(z_known, t, eps, sched)?;
    let mut out = z_t_gen.clone();
    for r in 0..h {
        for c in 0..w {
            if keep_mask.is_kept(r, c) {
                out.pixel_mut(r, c).copy_from_slice(known.pixel(r, c));
            }
        }
    }
    Ok(out)
}

/// Start step of a partial-noising pass: `round_half_up(strength * T)` clamped to `[1, T]`.
pub fn strength_to_start_step(strength: f64, steps: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&strength) {
        return arg_err(format!("strength must be in [0, 1], got {strength}"));
    }
    Ok(round_half_up(strength * steps as f64).clamp(1, steps.max(1)))
}

/// Standard normal tensor with the given dims.
pub fn gaussian(dims: &[usize], seed: u64) -> Result<Tensor> {
    let mut rng = seeding::rng(seed);
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal)).collect();
    Tensor::new(dims.to_vec(), data)
}
