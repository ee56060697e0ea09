//! Single-pass dual-condition sampling and the progressive multi-pass loop.
//!
//! A pass noises the style latent to `t_start = strength * T`, then walks a
//! DDIM ladder back to 0 with classifier-free guidance between a conditioned
//! and an unconditioned predictor. With a keep mask the known region is
//! re-imposed after every step. Progressive inference chains passes, each one
//! starting from the previous output.

use std::fmt::Write as _;
use std::path::Path;

use crate::diffusion::{
    cfg_combine, ddim_step, gaussian, inpaint_composite, q_sample, strength_to_start_step, ConditionEmbedding,
    NoiseSchedule,
};
use crate::error::{arg_err, dim_err, Result};
use crate::masking::{round_half_up, PixelMask};
use crate::matching::FeaturePyramid;
use crate::seeding;
use crate::tensor::Tensor;
use crate::toynets::Denoiser;

pub const DEFAULT_ITERATIONS: usize = 3;
pub const DEFAULT_STRENGTH: f64 = 0.3;
pub const DEFAULT_GUIDANCE: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct InferenceConfig {
    pub iterations: usize,
    pub strengths: Vec<f64>,
    pub sampler_steps: usize,
    pub guidance_scale: f64,
    pub keep_mask: Option<PixelMask>,
    pub embedding: ConditionEmbedding,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            strengths: vec![DEFAULT_STRENGTH; DEFAULT_ITERATIONS],
            sampler_steps: crate::diffusion::DEFAULT_STEPS,
            guidance_scale: DEFAULT_GUIDANCE,
            keep_mask: None,
            embedding: ConditionEmbedding::ones(1),
            seed: 0,
        }
    }
}

impl InferenceConfig {
    /// `iterations` passes at the same strength.
    pub fn uniform(iterations: usize, strength: f64) -> Self {
        Self { iterations, strengths: vec![strength; iterations], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return arg_err("iterations must be >= 1");
        }
        if self.strengths.len() != self.iterations {
            return arg_err(format!("{} strengths given for {} iterations", self.strengths.len(), self.iterations));
        }
        for &s in &self.strengths {
            check_strength(s)?;
        }
        if self.sampler_steps == 0 {
            return arg_err("sampler_steps must be >= 1");
        }
        if !self.guidance_scale.is_finite() {
            return arg_err("guidance scale must be finite");
        }
        Ok(())
    }
}

fn check_strength(s: f64) -> Result<()> {
    if !(s > 0.0 && s <= 1.0) {
        return arg_err(format!("strength must be in (0, 1], got {s}"));
    }
    Ok(())
}

/// One branch of guidance.
#[derive(Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a dyn Denoiser),
    /// Predicts exactly the noise injected at the start of the pass, i.e. the
    /// predictor that reconstructs the pass input.
    Reconstruct,
}

impl Predictor<'_> {
    fn predict(&self, z: &Tensor, t: usize, cond: &ConditionEmbedding, injected: &Tensor) -> Result<Tensor> {
        match self {
            Predictor::Model(d) => d.predict(z, t, cond),
            Predictor::Reconstruct => Ok(injected.clone()),
        }
    }
}

#[derive(Clone, Copy)]
pub struct Denoisers<'a> {
    pub cond: Predictor<'a>,
    pub uncond: Predictor<'a>,
}

impl<'a> Denoisers<'a> {
    /// Guidance between `cond` and the input-reconstructing predictor.
    pub fn towards(cond: &'a dyn Denoiser) -> Self {
        Self { cond: Predictor::Model(cond), uncond: Predictor::Reconstruct }
    }

    /// The same model on both branches.
    pub fn shared(model: &'a dyn Denoiser) -> Self {
        Self { cond: Predictor::Model(model), uncond: Predictor::Model(model) }
    }
}

/// Noise injected by a pass run with `seed`.
pub fn injected_noise(dims: &[usize], seed: u64) -> Result<Tensor> {
    gaussian(dims, seed)
}

fn composite_noise(dims: &[usize], seed: u64, step: usize) -> Result<Tensor> {
    gaussian(dims, seeding::derive(seed, step as u64 + 1))
}

/// Uniformly spaced integer steps from `t_start` down to 0 with `min(steps, t_start)` transitions.
pub fn ladder(t_start: usize, steps: usize) -> Vec<usize> {
    let n = steps.min(t_start).max(1);
    (0..=n).map(|i| round_half_up(t_start as f64 * (n - i) as f64 / n as f64)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub t: usize,
    pub distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub strength: f64,
    pub start_step: usize,
    pub steps: Vec<StepRecord>,
    pub latent: Tensor,
}

impl IterationRecord {
    pub fn end_distance(&self) -> Option<f64> {
        self.steps.last().and_then(|s| s.distance)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InferenceTrace {
    pub iterations: Vec<IterationRecord>,
}

impl InferenceTrace {
    pub fn end_distances(&self) -> Vec<Option<f64>> {
        self.iterations.iter().map(IterationRecord::end_distance).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,step,t,distance_to_target\n");
        for (k, it) in self.iterations.iter().enumerate() {
            for s in &it.steps {
                let d = s.distance.map(|d| format!("{d:.9e}")).unwrap_or_default();
                let _ = writeln!(out, "{k},{},{},{d}", s.step, s.t);
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn run_pass(
    style: &Tensor,
    den: Denoisers<'_>,
    strength: f64,
    cfg: &InferenceConfig,
    seed: u64,
    sched: &NoiseSchedule,
    target: Option<&Tensor>,
) -> Result<IterationRecord> {
    check_strength(strength)?;
    if cfg.sampler_steps == 0 {
        return arg_err("sampler_steps must be >= 1");
    }
    if let Some(t) = target {
        style.ensure_same_dims(t, "inference target")?;
    }
    if let Some(m) = &cfg.keep_mask {
        let (h, w, _) = style.hwc()?;
        if (m.height(), m.width()) != (h, w) {
            return dim_err(format!("style {h}x{w} vs keep mask {}x{}", m.height(), m.width()));
        }
    }
    let t_start = strength_to_start_step(strength, sched.steps())?;
    let eps = injected_noise(style.dims(), seed)?;
    let null = cfg.embedding.zeroed();
    let mut z = q_sample(style, t_start, &eps, sched)?;
    let ts = ladder(t_start, cfg.sampler_steps);
    let mut steps = Vec::with_capacity(ts.len() - 1);
    for (i, pair) in ts.windows(2).enumerate() {
        let (t, t_prev) = (pair[0], pair[1]);
        let e_cond = den.cond.predict(&z, t, &cfg.embedding, &eps)?;
        let e_uncond = den.uncond.predict(&z, t, &null, &eps)?;
        let eps_hat = cfg_combine(&e_cond, &e_uncond, cfg.guidance_scale)?;
        z = ddim_step(&z, &eps_hat, t, t_prev, sched)?;
        if let Some(m) = &cfg.keep_mask {
            z = inpaint_composite(&z, style, m, t_prev, &composite_noise(style.dims(), seed, i)?, sched)?;
        }
        let distance = target.map(|tg| z.rms_distance(tg)).transpose()?;
        steps.push(StepRecord { step: i, t: t_prev, distance });
    }
    Ok(IterationRecord { strength, start_step: t_start, steps, latent: z })
}

/// One partial-noising pass from `style`, seeded by `cfg.seed`.
pub fn single_pass(
    style: &Tensor,
    den: Denoisers<'_>,
    strength: f64,
    cfg: &InferenceConfig,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    Ok(run_pass(style, den, strength, cfg, cfg.seed, sched, None)?.latent)
}

/// Chains `cfg.iterations` passes. Pass `k` is seeded from `(cfg.seed, k)`;
/// pass 0 uses `cfg.seed` itself. Distances in the trace are measured to `target` when given.
pub fn progressive_inference(
    style: &Tensor,
    den: Denoisers<'_>,
    cfg: &InferenceConfig,
    sched: &NoiseSchedule,
    target: Option<&Tensor>,
) -> Result<(Tensor, InferenceTrace)> {
    cfg.validate()?;
    let mut z = style.clone();
    let mut trace = InferenceTrace::default();
    for (k, &s) in cfg.strengths.iter().enumerate() {
        let rec = run_pass(&z, den, s, cfg, seeding::derive(cfg.seed, k as u64), sched, target)?;
        z = rec.latent.clone();
        trace.iterations.push(rec);
    }
    Ok((z, trace))
}

/// Concatenated per-level channel means of a feature pyramid.
pub fn embedding_from_features(feats: &FeaturePyramid) -> Result<ConditionEmbedding> {
    let mut values = Vec::new();
    for g in feats.levels() {
        let (h, w, c) = (g.height(), g.width(), g.channels());
        let mut acc = vec![0f64; c];
        for px in g.tensor().data().chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v as f64;
            }
        }
        values.extend(acc.iter().map(|a| (a / (h * w) as f64) as f32));
    }
    ConditionEmbedding::new(values)
}

/// Replaces any non-null condition by a fixed feature-derived embedding
/// before delegating; a null (all-zero) condition passes through unchanged.
pub struct FeatureConditioned<D> {
    inner: D,
    embedding: ConditionEmbedding,
}

impl<D: Denoiser> FeatureConditioned<D> {
    pub fn new(inner: D, feats: &FeaturePyramid) -> Result<Self> {
        Ok(Self { inner, embedding: embedding_from_features(feats)? })
    }

    pub fn embedding(&self) -> &ConditionEmbedding {
        &self.embedding
    }
}

impl<D: Denoiser> Denoiser for FeatureConditioned<D> {
    fn predict(&self, z_t: &Tensor, t: usize, cond: &ConditionEmbedding) -> Result<Tensor> {
        if cond.is_zero() {
            self.inner.predict(z_t, t, cond)
        } else {
            self.inner.predict(z_t, t, &self.embedding)
        }
    }
}
