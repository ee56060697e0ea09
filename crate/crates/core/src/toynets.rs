//! Denoiser contract and the toy noise predictors that stand in for a
//! pre-trained UNet.
//!
//! * [`OracleDenoiser`] returns a stored noise tensor.
//! * [`TargetPullDenoiser`] predicts the noise that would make a fixed
//!   target the clean estimate at every step.
//! * [`AffineDenoiser`] is `a * z_t + b`, trained with closed-form gradients
//!   of the noise-prediction MSE.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::diffusion::{q_sample, ConditionEmbedding, NoiseSchedule};
use crate::error::{arg_err, dim_err, Error, Result};
use crate::seeding;
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// Noise predictor `eps_theta(z_t, t, cond)`. Output dims equal `z_t` dims.
pub trait Denoiser: Send + Sync {
    fn predict(&self, z_t: &Tensor, t: usize, cond: &ConditionEmbedding) -> Result<Tensor>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict(&self, z_t: &Tensor, t: usize, cond: &ConditionEmbedding) -> Result<Tensor> {
        (**self).predict(z_t, t, cond)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn predict(&self, z_t: &Tensor, t: usize, cond: &ConditionEmbedding) -> Result<Tensor> {
        (**self).predict(z_t, t, cond)
    }
}

#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    eps: Tensor,
}

impl OracleDenoiser {
    pub fn new(eps: Tensor) -> Self {
        Self { eps }
    }
}

impl Denoiser for OracleDenoiser {
    fn predict(&self, z_t: &Tensor, _t: usize, _cond: &ConditionEmbedding) -> Result<Tensor> {
        z_t.ensure_same_dims(&self.eps, "oracle denoiser")?;
        Ok(self.eps.clone())
    }
}

/// `eps_hat = (z_t - sqrt(alpha_bar_t) target) / sqrt(1 - alpha_bar_t)`.
#[derive(Debug, Clone)]
pub struct TargetPullDenoiser {
    target: Tensor,
    sched: NoiseSchedule,
}

impl TargetPullDenoiser {
    pub fn new(target: Tensor, sched: NoiseSchedule) -> Self {
        Self { target, sched }
    }

    pub fn target(&self) -> &Tensor {
        &self.target
    }
}

impl Denoiser for TargetPullDenoiser {
    fn predict(&self, z_t: &Tensor, t: usize, _cond: &ConditionEmbedding) -> Result<Tensor> {
        if t == 0 {
            return Err(Error::Contract("target-pull denoiser is undefined at t = 0".into()));
        }
        self.sched.check_step(t)?;
        let ab = self.sched.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        z_t.zip_map(&self.target, "target-pull denoiser", |z, x| ((z as f64 - a * x as f64) / b) as f32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineDenoiser {
    pub a: Tensor,
    pub b: Tensor,
}

impl AffineDenoiser {
    pub fn new(a: Tensor, b: Tensor) -> Result<Self> {
        a.ensure_same_dims(&b, "affine denoiser parameters")?;
        Ok(Self { a, b })
    }

    /// Identity gain, zero bias.
    pub fn identity(dims: Vec<usize>) -> Result<Self> {
        Ok(Self { a: Tensor::filled(dims.clone(), 1.0)?, b: Tensor::zeros(dims)? })
    }

    pub fn forward(&self, z_t: &Tensor) -> Result<Tensor> {
        z_t.ensure_same_dims(&self.a, "affine denoiser")?;
        let data = z_t
            .data()
            .iter()
            .zip(self.a.data())
            .zip(self.b.data())
            .map(|((&z, &a), &b)| a * z + b)
            .collect();
        Tensor::new(z_t.dims().to_vec(), data)
    }
}

impl Denoiser for AffineDenoiser {
    fn predict(&self, z_t: &Tensor, _t: usize, _cond: &ConditionEmbedding) -> Result<Tensor> {
        self.forward(z_t)
    }
}

pub fn affine_forward(d: &AffineDenoiser, z_t: &Tensor, _t: usize, _cond: &ConditionEmbedding) -> Result<Tensor> {
    d.forward(z_t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

/// MSE of the affine prediction and its gradients
/// `dL/da = 2 (eps_hat - eps) z_t / N`, `dL/db = 2 (eps_hat - eps) / N`.
pub fn affine_loss_grad(
    d: &AffineDenoiser,
    z0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<LossGrad> {
    z0.ensure_same_dims(&d.a, "affine_loss_grad")?;
    let zt = q_sample(z0, t, eps, sched)?;
    let n = zt.len() as f64;
    let mut loss = 0.0;
    let mut grad_a = Vec::with_capacity(zt.len());
    let mut grad_b = Vec::with_capacity(zt.len());
    for (((&z, &e), &a), &b) in zt.data().iter().zip(eps.data()).zip(d.a.data()).zip(d.b.data()) {
        let r = a as f64 * z as f64 + b as f64 - e as f64;
        loss += r * r;
        grad_a.push(2.0 * r * z as f64 / n);
        grad_b.push(2.0 * r / n);
    }
    Ok(LossGrad { loss: loss / n, grad_a, grad_b })
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub z0: Tensor,
    pub t: usize,
    pub eps: Tensor,
    pub cond: ConditionEmbedding,
}

/// Mean loss of `d` over a dataset.
pub fn dataset_loss(d: &AffineDenoiser, data: &[TrainSample], sched: &NoiseSchedule) -> Result<f64> {
    if data.is_empty() {
        return arg_err("empty dataset");
    }
    let mut total = 0.0;
    for s in data {
        total += affine_loss_grad(d, &s.z0, s.t, &s.eps, sched)?.loss;
    }
    Ok(total / data.len() as f64)
}

/// Plain gradient descent, one uniformly drawn sample per step.
pub fn sgd_train(
    d: &AffineDenoiser,
    data: &[TrainSample],
    lr: f64,
    steps: usize,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<AffineDenoiser> {
    if data.is_empty() {
        return arg_err("empty dataset");
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return arg_err(format!("learning rate must be finite and >= 0, got {lr}"));
    }
    let mut rng = seeding::rng(seed);
    let mut a: Vec<f64> = d.a.data().iter().map(|&v| v as f64).collect();
    let mut b: Vec<f64> = d.b.data().iter().map(|&v| v as f64).collect();
    let dims = d.a.dims().to_vec();
    for _ in 0..steps {
        let s = &data[rng.random_range(0..data.len())];
        let cur = AffineDenoiser {
            a: Tensor::new(dims.clone(), a.iter().map(|&v| v as f32).collect())?,
            b: Tensor::new(dims.clone(), b.iter().map(|&v| v as f32).collect())?,
        };
        let g = affine_loss_grad(&cur, &s.z0, s.t, &s.eps, sched)?;
        for (p, ga) in a.iter_mut().zip(&g.grad_a) {
            *p -= lr * ga;
        }
        for (p, gb) in b.iter_mut().zip(&g.grad_b) {
            *p -= lr * gb;
        }
    }
    AffineDenoiser::new(
        Tensor::new(dims.clone(), a.into_iter().map(|v| v as f32).collect())?,
        Tensor::new(dims, b.into_iter().map(|v| v as f32).collect())?,
    )
}

/// Random dataset of `count` samples around a fixed clean latent.
pub fn toy_dataset(z0: &Tensor, count: usize, sched: &NoiseSchedule, seed: u64) -> Result<Vec<TrainSample>> {
    let mut rng = seeding::rng(seed);
    (0..count)
        .map(|i| {
            let t = rng.random_range(1..=sched.steps());
            let eps = crate::diffusion::gaussian(z0.dims(), seeding::derive(seed, i as u64 + 1))?;
            Ok(TrainSample { z0: z0.clone(), t, eps, cond: ConditionEmbedding::zeros(1) })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineCheckpoint {
    pub denoiser: AffineDenoiser,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
}

pub const CHECKPOINT_A: &str = "affine_a.icmt";
pub const CHECKPOINT_B: &str = "affine_b.icmt";
pub const CHECKPOINT_HEADER: &str = "affine.txt";

fn shape_string(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

impl AffineCheckpoint {
    pub fn header(&self) -> String {
        let mut s = String::new();
        writeln!(s, "shape = {}", shape_string(self.denoiser.a.dims())).unwrap();
        writeln!(s, "lr = {}", self.lr).unwrap();
        writeln!(s, "steps = {}", self.steps).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        s
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_tensor(dir.join(CHECKPOINT_A), &self.denoiser.a)?;
        write_tensor(dir.join(CHECKPOINT_B), &self.denoiser.b)?;
        fs::write(dir.join(CHECKPOINT_HEADER), self.header())?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join(CHECKPOINT_HEADER))?;
        let kv: BTreeMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Format(format!("checkpoint header lacks {k}")));
        let bad = |k: &str| Error::Format(format!("checkpoint header has a bad {k}"));
        let a = read_tensor(dir.join(CHECKPOINT_A))?;
        let b = read_tensor(dir.join(CHECKPOINT_B))?;
        if get("shape")? != shape_string(a.dims()) {
            return dim_err(format!("checkpoint shape {} disagrees with parameters {:?}", get("shape")?, a.dims()));
        }
        Ok(Self {
            denoiser: AffineDenoiser::new(a, b)?,
            lr: get("lr")?.parse().map_err(|_| bad("lr"))?,
            steps: get("steps")?.parse().map_err(|_| bad("steps"))?,
            seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
        })
    }
}
