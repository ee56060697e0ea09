//! Pixel masks and the dual condition.
//!
//! The condition image is the masked lighting view placed left of the
//! reference view, `c_f = mask(z, ratio) ++ z'`, and the training target is
//! the unmasked pair `z_0 = z ++ z'`. Ratios here are always *keep* ratios:
//! keeping 20% of the pixels means masking 80%.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Open01};

use crate::error::{arg_err, dim_err, Result};
use crate::seeding;
use crate::tensor::{concat_width, write_netpbm, write_tensor, Tensor};

/// Fill value for dropped pixels.
pub const DEFAULT_FILL: f32 = 0.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    keep: Vec<bool>,
    keep_count: usize,
}

impl PixelMask {
    pub fn from_keep(height: usize, width: usize, keep: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return dim_err("mask extents must be >= 1");
        }
        if keep.len() != height * width {
            return dim_err(format!("mask {height}x{width} needs {} cells, got {}", height * width, keep.len()));
        }
        let keep_count = keep.iter().filter(|&&k| k).count();
        Ok(Self { height, width, keep, keep_count })
    }

    pub fn full(height: usize, width: usize) -> Result<Self> {
        Self::from_keep(height, width, vec![true; height * width])
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::from_keep(height, width, vec![false; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn keep_count(&self) -> usize {
        self.keep_count
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_kept(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.width + c]
    }

    pub fn keep_fraction(&self) -> f64 {
        self.keep_count as f64 / (self.height * self.width) as f64
    }

    /// `[H, W, 1]` tensor with 1.0 for kept and 0.0 for dropped cells.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.height, self.width, 1], data).expect("mask dims are valid")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.dims() {
            &[h, w] | &[h, w, 1] => (h, w),
            d => return dim_err(format!("mask tensor must be [H, W] or [H, W, 1], got {d:?}")),
        };
        Self::from_keep(h, w, t.data().iter().map(|&v| v > 0.5).collect())
    }

    /// Writes `<prefix>.pgm` (255 kept, 0 dropped) and `<prefix>.icmt`.
    pub fn export(&self, prefix: impl AsRef<Path>) -> Result<()> {
        let prefix = prefix.as_ref();
        let t = self.to_tensor();
        write_netpbm(prefix.with_extension("pgm"), &t)?;
        write_tensor(prefix.with_extension("icmt"), &t)
    }
}

/// `floor(x + 0.5)`, the rounding used for all ratio-to-count conversions.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

fn check_ratio(name: &str, r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return arg_err(format!("{name} must be in [0, 1], got {r}"));
    }
    Ok(())
}

/// Keeps exactly `round_half_up(keep_ratio * h * w)` cells, drawn uniformly
/// without replacement by a partial Fisher-Yates shuffle.
///
/// The shuffle prefix does not depend on the count, so masks drawn with the
/// same seed are nested: a larger ratio keeps a superset of the cells.
pub fn sample_mask(h: usize, w: usize, keep_ratio: f64, seed: u64) -> Result<PixelMask> {
    check_ratio("keep_ratio", keep_ratio)?;
    let n = h * w;
    let k = round_half_up(keep_ratio * n as f64).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seeding::rng(seed);
    let mut keep = vec![false; n];
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
        keep[idx[i]] = true;
    }
    PixelMask::from_keep(h, w, keep)
}

pub fn checkerboard_mask(h: usize, w: usize, phase: u8) -> Result<PixelMask> {
    if phase > 1 {
        return arg_err(format!("checkerboard phase must be 0 or 1, got {phase}"));
    }
    let keep = (0..h * w).map(|i| ((i / w + i % w) % 2) as u8 == phase).collect();
    PixelMask::from_keep(h, w, keep)
}

pub fn apply_mask(img: &Tensor, mask: &PixelMask, fill: f32) -> Result<Tensor> {
    let (h, w, _) = img.hwc()?;
    if (h, w) != (mask.height, mask.width) {
        return dim_err(format!("image {h}x{w} vs mask {}x{}", mask.height, mask.width));
    }
    let mut out = img.clone();
    for r in 0..h {
        for c in 0..w {
            if !mask.is_kept(r, c) {
                out.pixel_mut(r, c).fill(fill);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConditionInput {
    /// `[H, 2W, C]`: masked lighting view on the left, reference on the right.
    pub cond: Tensor,
    pub mask: PixelMask,
    pub ratio_used: f64,
}

/// Draws a keep ratio uniformly from the open interval `(0, n_max)`, masks
/// `z` with it and concatenates the reference on the right. `n_max = 0`
/// yields a fully masked left half.
pub fn build_condition(z: &Tensor, z_ref: &Tensor, n_max: f64, seed: u64) -> Result<ConditionInput> {
    check_ratio("n_max", n_max)?;
    z.ensure_same_dims(z_ref, "build_condition")?;
    let (h, w, _) = z.hwc()?;
    let mut rng = seeding::rng(seed);
    let ratio_used = if n_max > 0.0 {
        let u: f64 = Open01.sample(&mut rng);
        u * n_max
    } else {
        0.0
    };
    let mask = sample_mask(h, w, ratio_used, rng.random())?;
    let cond = concat_width(&apply_mask(z, &mask, DEFAULT_FILL)?, z_ref)?;
    Ok(ConditionInput { cond, mask, ratio_used })
}

pub fn build_target(z: &Tensor, z_ref: &Tensor) -> Result<Tensor> {
    z.ensure_same_dims(z_ref, "build_target")?;
    concat_width(z, z_ref)
}
