//! Flow warping and annealed residual aggregation.
//!
//! Profile features are pulled into the target layout by the matching flow,
//! then added to the lighting features with per-level weights
//! `W_l = (1 - l/L) * alpha + beta`. Level 0 is the finest level and gets the
//! largest weight.

use crate::error::{arg_err, dim_err, Result};
use crate::matching::{FeatureGrid, FeaturePyramid, FlowField};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealConfig {
    pub levels: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self { levels: 4, alpha: 1.0, beta: 0.0 }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return arg_err("anneal levels must be >= 1");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return arg_err(format!("alpha and beta must be finite and >= 0, got {} and {}", self.alpha, self.beta));
        }
        Ok(())
    }
}

pub fn anneal_weights(cfg: &AnnealConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = cfg.levels as f64;
    Ok((0..cfg.levels).map(|l| (1.0 - l as f64 / n) * cfg.alpha + cfg.beta).collect())
}

/// `out(u) = feat(clamp(u + F(u)))`. Pixels the flow marks invalid keep their own feature.
pub fn warp_nearest(feat: &FeatureGrid, flow: &FlowField) -> Result<FeatureGrid> {
    let (h, w, _) = feat.tensor().hwc()?;
    if (flow.height(), flow.width()) != (h, w) {
        return dim_err(format!("features {h}x{w} vs flow {}x{}", flow.height(), flow.width()));
    }
    let src = feat.tensor();
    let mut out = Tensor::zeros_like(src);
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = if flow.is_valid(r, c) {
                let (tr, tc) = flow.target(r, c);
                (tr.clamp(0, h as i64 - 1) as usize, tc.clamp(0, w as i64 - 1) as usize)
            } else {
                (r, c)
            };
            out.pixel_mut(r, c).copy_from_slice(src.pixel(sr, sc));
        }
    }
    FeatureGrid::new(feat.level, out)
}

pub fn warp_pyramid(feats: &FeaturePyramid, flows: &[FlowField]) -> Result<FeaturePyramid> {
    if flows.len() != feats.len() {
        return dim_err(format!("{} flows for {} pyramid levels", flows.len(), feats.len()));
    }
    let levels = feats.levels().iter().zip(flows).map(|(f, fl)| warp_nearest(f, fl)).collect::<Result<_>>()?;
    FeaturePyramid::new(levels)
}

/// `out_l = lighting_l + W_l * warped_l`, element-wise per level.
pub fn aggregate_residual(lighting: &FeaturePyramid, warped: &FeaturePyramid, weights: &[f64]) -> Result<FeaturePyramid> {
    if lighting.len() != warped.len() || weights.len() != lighting.len() {
        return dim_err(format!(
            "aggregation needs aligned levels: lighting {}, warped {}, weights {}",
            lighting.len(),
            warped.len(),
            weights.len()
        ));
    }
    let mut out = Vec::with_capacity(lighting.len());
    for ((lg, wg), &wt) in lighting.levels().iter().zip(warped.levels()).zip(weights) {
        let t = lg
            .tensor()
            .zip_map(wg.tensor(), "aggregate_residual", |l, x| (l as f64 + wt * x as f64) as f32)?;
        out.push(FeatureGrid::new(lg.level, t)?);
    }
    FeaturePyramid::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::{argmax_flow, cost_volume};
    use crate::seeding;
    use proptest::prelude::*;
    use rand::Rng;

    fn grid(h: usize, w: usize, c: usize, seed: u64) -> FeatureGrid {
        let mut rng = seeding::rng(seed);
        FeatureGrid::new(0, Tensor::from_fn_hwc(h, w, c, |_, _, _| rng.random_range(-1.0f32..1.0)).unwrap()).unwrap()
    }

    fn single(v: f32) -> FeaturePyramid {
        FeaturePyramid::new(vec![FeatureGrid::new(0, Tensor::new(vec![1, 1, 1], vec![v]).unwrap()).unwrap()]).unwrap()
    }

    #[test]
    fn weights_fixture() {
        let w = anneal_weights(&AnnealConfig { levels: 4, alpha: 1.0, beta: 0.0 }).unwrap();
        assert_eq!(w, vec![1.0, 0.75, 0.5, 0.25]);
        let w = anneal_weights(&AnnealConfig { levels: 3, alpha: 0.0, beta: 0.4 }).unwrap();
        assert_eq!(w, vec![0.4; 3]);
        let w = anneal_weights(&AnnealConfig { levels: 7, alpha: 2.5, beta: 0.3 }).unwrap();
        assert_eq!(w[0], 2.5 + 0.3);
        assert!(anneal_weights(&AnnealConfig { levels: 0, alpha: 1.0, beta: 0.0 }).is_err());
        assert!(anneal_weights(&AnnealConfig { levels: 2, alpha: -1.0, beta: 0.0 }).is_err());
    }

    #[test]
    fn warp_cases() {
        let g = grid(3, 4, 2, 1);
        assert_eq!(warp_nearest(&g, &FlowField::zero(3, 4)).unwrap(), g);

        let row = FeatureGrid::new(0, Tensor::new(vec![1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let out = warp_nearest(&row, &FlowField::constant(1, 4, 1, 0)).unwrap();
        assert_eq!(out.tensor().data(), &[2.0, 3.0, 4.0, 4.0]);

        assert!(warp_nearest(&g, &FlowField::zero(4, 3)).is_err());
    }

    #[test]
    fn warp_by_self_flow_is_identity() {
        let g = grid(5, 5, 6, 2);
        let flow = argmax_flow(&cost_volume(&g, &g).unwrap());
        assert_eq!(warp_nearest(&g, &flow).unwrap(), g);
    }

    #[test]
    fn warp_clamps_every_offset() {
        let g = FeatureGrid::new(0, Tensor::from_fn_hwc(3, 3, 1, |r, c, _| (r * 3 + c) as f32).unwrap()).unwrap();
        for dy in -5..=5 {
            for dx in -5..=5 {
                let out = warp_nearest(&g, &FlowField::constant(3, 3, dx, dy)).unwrap();
                for r in 0..3 {
                    for c in 0..3 {
                        let er = (r as i32 + dy).clamp(0, 2) as usize;
                        let ec = (c as i32 + dx).clamp(0, 2) as usize;
                        assert_eq!(out.descriptor(r, c)[0], (er * 3 + ec) as f32);
                    }
                }
            }
        }
    }

    #[test]
    fn aggregate_cases() {
        let out = aggregate_residual(&single(2.0), &single(3.0), &[0.5]).unwrap();
        assert_eq!(out.level(0).tensor().data(), &[3.5]);
        assert_eq!(aggregate_residual(&single(2.0), &single(3.0), &[0.0]).unwrap(), single(2.0));
        assert_eq!(aggregate_residual(&single(2.0), &single(0.0), &[0.9]).unwrap(), single(2.0));
        assert!(aggregate_residual(&single(2.0), &single(3.0), &[0.5, 0.5]).is_err());
    }

    proptest! {
        #[test]
        fn weights_decrease(levels in 2usize..64, alpha in 0.01f64..10.0, beta in 0.0f64..10.0) {
            let w = anneal_weights(&AnnealConfig { levels, alpha, beta }).unwrap();
            prop_assert!(w.windows(2).all(|p| p[1] < p[0]));
        }

        #[test]
        fn residual_is_linear(seed in any::<u64>(), k in -4i32..4, wt in 0.0f64..2.0) {
            // power-of-two gains commute exactly with the weighted add on a zero base
            let s = 2f32.powi(k);
            let zero = FeaturePyramid::new(vec![FeatureGrid::new(0, Tensor::zeros(vec![3, 3, 2]).unwrap()).unwrap()]).unwrap();
            let x = FeaturePyramid::new(vec![grid(3, 3, 2, seed)]).unwrap();
            let sx = FeaturePyramid::new(vec![FeatureGrid::new(0, x.level(0).tensor().map(|v| v * s)).unwrap()]).unwrap();
            let a = aggregate_residual(&zero, &x, &[wt]).unwrap();
            let b = aggregate_residual(&zero, &sx, &[wt]).unwrap();
            for (p, q) in a.level(0).tensor().data().iter().zip(b.level(0).tensor().data()) {
                prop_assert_eq!(p * s, *q);
            }
            // general base: residual part scales within rounding
            let base = FeaturePyramid::new(vec![grid(3, 3, 2, !seed)]).unwrap();
            let a = aggregate_residual(&base, &x, &[wt]).unwrap();
            let b = aggregate_residual(&base, &sx, &[wt]).unwrap();
            for ((p, q), l) in a.level(0).tensor().data().iter().zip(b.level(0).tensor().data()).zip(base.level(0).tensor().data()) {
                prop_assert!(((p - l) * s - (q - l)).abs() < 1e-5 * (1.0 + s.abs() * 4.0));
            }
        }
    }
}
