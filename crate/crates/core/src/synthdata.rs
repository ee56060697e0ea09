//! Procedural view pairs with exact correspondence.
//!
//! A value-noise textured ellipsoid is rendered orthographically under two
//! yaw angles. World x/y span `[-1, 1]` over the shorter image side, with y
//! pointing down the image; the camera sits on +z looking towards -z, so the
//! visible surface is the one with the larger z. Because the surface is
//! convex, a point is visible exactly when it faces the camera.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{arg_err, Result};
use crate::matching::FlowField;
use crate::seeding;
use crate::tensor::{write_netpbm, write_tensor, Tensor};

type V3 = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub radii: V3,
    pub texture_seed: u64,
    pub light_dir: V3,
    pub ambient: f64,
    pub image_size: (usize, usize),
    pub yaw_a: f64,
    pub yaw_b: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            radii: [0.75, 0.85, 0.7],
            texture_seed: 0,
            light_dir: normalize([0.3, -0.4, 1.0]),
            ambient: 0.3,
            image_size: (64, 64),
            yaw_a: 0.0,
            yaw_b: 0.0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if !self.radii.iter().all(|&r| r > 0.0 && r.is_finite()) {
            return arg_err(format!("radii must be positive, got {:?}", self.radii));
        }
        if (dot(self.light_dir, self.light_dir).sqrt() - 1.0).abs() > 1e-6 {
            return arg_err("light direction must be a unit vector");
        }
        if !(0.0..=1.0).contains(&self.ambient) {
            return arg_err(format!("ambient must be in [0, 1], got {}", self.ambient));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return arg_err("image size must be nonzero");
        }
        if !self.yaw_a.is_finite() || !self.yaw_b.is_finite() {
            return arg_err("yaw angles must be finite");
        }
        Ok(())
    }
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(v: V3) -> V3 {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Rotation about the vertical axis.
fn yaw_rotate(v: V3, yaw: f64) -> V3 {
    let (s, c) = yaw.sin_cos();
    [c * v[0] + s * v[2], v[1], -s * v[0] + c * v[2]]
}

struct Camera {
    h: usize,
    w: usize,
    half: f64,
}

impl Camera {
    fn new((h, w): (usize, usize)) -> Self {
        Self { h, w, half: h.min(w) as f64 / 2.0 }
    }

    fn world(&self, r: usize, c: usize) -> (f64, f64) {
        ((c as f64 + 0.5 - self.w as f64 / 2.0) / self.half, (r as f64 + 0.5 - self.h as f64 / 2.0) / self.half)
    }

    /// Nearest pixel of a world point, if on screen.
    fn pixel(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        // pixel centres sit at half-integers, so rounding the continuous index is a floor
        let c = (x * self.half + self.w as f64 / 2.0).floor();
        let r = (y * self.half + self.h as f64 / 2.0).floor();
        (r >= 0.0 && c >= 0.0 && (r as usize) < self.h && (c as usize) < self.w).then_some((r as usize, c as usize))
    }
}

/// Front surface point hit by the ray through world `(x, y)`, in object coordinates.
fn intersect(radii: V3, yaw: f64, x: f64, y: f64) -> Option<V3> {
    let o = yaw_rotate([x, y, 0.0], -yaw);
    let d = yaw_rotate([0.0, 0.0, 1.0], -yaw);
    let (mut a, mut b, mut c) = (0.0, 0.0, -1.0);
    for i in 0..3 {
        let r2 = radii[i] * radii[i];
        a += d[i] * d[i] / r2;
        b += 2.0 * o[i] * d[i] / r2;
        c += o[i] * o[i] / r2;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let z = (-b + disc.sqrt()) / (2.0 * a);
    Some([o[0] + z * d[0], o[1] + z * d[1], o[2] + z * d[2]])
}

fn world_normal(radii: V3, yaw: f64, p: V3) -> V3 {
    let g = [p[0] / (radii[0] * radii[0]), p[1] / (radii[1] * radii[1]), p[2] / (radii[2] * radii[2])];
    yaw_rotate(normalize(g), yaw)
}

fn hash(seed: u64, ix: i64, iy: i64, iz: i64) -> f64 {
    let mut x = seed
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (iz as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    (x >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, p: V3) -> f64 {
    let fl = p.map(f64::floor);
    let f = [p[0] - fl[0], p[1] - fl[1], p[2] - fl[2]].map(|t| t * t * (3.0 - 2.0 * t));
    let i = fl.map(|v| v as i64);
    let mut acc = 0.0;
    for corner in 0..8 {
        let bit = |k: usize| (corner >> k) & 1;
        let wgt: f64 = (0..3).map(|k| if bit(k) == 1 { f[k] } else { 1.0 - f[k] }).product();
        acc += wgt * hash(seed, i[0] + bit(0) as i64, i[1] + bit(1) as i64, i[2] + bit(2) as i64);
    }
    acc
}

const OCTAVE_FREQS: [f64; 3] = [3.0, 6.0, 12.0];
const OCTAVE_GAINS: [f64; 3] = [1.0, 0.5, 0.25];

/// Three-octave value noise per channel at a unit-sphere surface coordinate, in `[0.2, 1.0]`.
fn albedo(seed: u64, u: V3) -> [f64; 3] {
    let norm: f64 = OCTAVE_GAINS.iter().sum();
    std::array::from_fn(|ch| {
        let mut v = 0.0;
        for (o, (&f, &g)) in OCTAVE_FREQS.iter().zip(&OCTAVE_GAINS).enumerate() {
            let s = seeding::derive(seed, (ch * 3 + o + 1) as u64);
            v += g * value_noise(s, [u[0] * f, u[1] * f, u[2] * f]);
        }
        0.2 + 0.8 * v / norm
    })
}

/// Albedo `[H,W,3]`, shading `[H,W,1]` and foreground `[H,W,1]` of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct Layers {
    pub albedo: Tensor,
    pub shading: Tensor,
    pub foreground: Tensor,
}

pub fn render_layers(scene: &SceneParams, yaw: f64) -> Result<Layers> {
    scene.validate()?;
    let cam = Camera::new(scene.image_size);
    let (h, w) = scene.image_size;
    let mut alb = Tensor::zeros(vec![h, w, 3])?;
    let mut shade = Tensor::zeros(vec![h, w, 1])?;
    let mut fg = Tensor::zeros(vec![h, w, 1])?;
    for r in 0..h {
        for c in 0..w {
            let (x, y) = cam.world(r, c);
            let Some(p) = intersect(scene.radii, yaw, x, y) else { continue };
            let n = world_normal(scene.radii, yaw, p);
            let u = [p[0] / scene.radii[0], p[1] / scene.radii[1], p[2] / scene.radii[2]];
            let a = albedo(scene.texture_seed, u);
            for (dst, v) in alb.pixel_mut(r, c).iter_mut().zip(a) {
                *dst = v as f32;
            }
            shade.pixel_mut(r, c)[0] = (scene.ambient + (1.0 - scene.ambient) * dot(n, scene.light_dir).max(0.0)) as f32;
            fg.pixel_mut(r, c)[0] = 1.0;
        }
    }
    Ok(Layers { albedo: alb, shading: shade, foreground: fg })
}

/// `albedo * shading`, black background.
pub fn render_view(scene: &SceneParams, yaw: f64) -> Result<Tensor> {
    let l = render_layers(scene, yaw)?;
    let (h, w, _) = l.albedo.hwc()?;
    Tensor::from_fn_hwc(h, w, 3, |r, c, ch| l.albedo.at3(r, c, ch) * l.shading.at3(r, c, 0))
}

/// Ground-truth flow from the view at `yaw_a` to the view at `yaw_b`.
///
/// A pixel is valid when it is foreground in A, its surface point faces the
/// camera in B, and it reprojects onto a foreground pixel of B.
pub fn gt_flow(scene: &SceneParams, yaw_a: f64, yaw_b: f64) -> Result<FlowField> {
    scene.validate()?;
    let cam = Camera::new(scene.image_size);
    let (h, w) = scene.image_size;
    let mut offsets = vec![[0i32; 2]; h * w];
    let mut valid = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let (x, y) = cam.world(r, c);
            let Some(p) = intersect(scene.radii, yaw_a, x, y) else { continue };
            if world_normal(scene.radii, yaw_b, p)[2] <= 0.0 {
                continue;
            }
            let q = yaw_rotate(p, yaw_b);
            let Some((rb, cb)) = cam.pixel(q[0], q[1]) else { continue };
            let (xb, yb) = cam.world(rb, cb);
            if intersect(scene.radii, yaw_b, xb, yb).is_none() {
                continue;
            }
            offsets[r * w + c] = [cb as i32 - c as i32, rb as i32 - r as i32];
            valid[r * w + c] = true;
        }
    }
    FlowField::new(h, w, offsets, Some(valid))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub img_a: Tensor,
    pub img_b: Tensor,
    /// a -> b, valid only where mutually visible.
    pub gt_flow: FlowField,
}

impl ViewPair {
    pub fn render(scene: &SceneParams) -> Result<Self> {
        Ok(Self {
            img_a: render_view(scene, scene.yaw_a)?,
            img_b: render_view(scene, scene.yaw_b)?,
            gt_flow: gt_flow(scene, scene.yaw_a, scene.yaw_b)?,
        })
    }

    pub fn visibility(&self) -> Vec<bool> {
        let n = self.gt_flow.height() * self.gt_flow.width();
        self.gt_flow.validity().map_or_else(|| vec![true; n], <[bool]>::to_vec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairConfig {
    pub image_size: (usize, usize),
    /// Largest |yaw_b - yaw_a|, degrees.
    pub max_yaw_delta_deg: f64,
    /// Largest |yaw_a|, degrees.
    pub max_yaw_deg: f64,
    pub ambient: f64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self { image_size: (64, 64), max_yaw_delta_deg: 10.0, max_yaw_deg: 30.0, ambient: 0.3 }
    }
}

/// Scene of pair `index` in a dataset seeded by `seed`.
pub fn pair_scene(seed: u64, index: usize, cfg: &PairConfig) -> Result<SceneParams> {
    if !(cfg.max_yaw_delta_deg >= 0.0 && cfg.max_yaw_deg >= 0.0) {
        return arg_err("yaw ranges must be >= 0");
    }
    let mut rng = seeding::rng(seeding::derive(seed, index as u64 + 1));
    let radii = [rng.random_range(0.65..0.85), rng.random_range(0.75..0.9), rng.random_range(0.6..0.8)];
    let yaw_a = rng.random_range(-1.0..=1.0) * cfg.max_yaw_deg.to_radians();
    let delta = rng.random_range(-1.0..=1.0) * cfg.max_yaw_delta_deg.to_radians();
    let light = normalize([rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), 1.0]);
    let scene = SceneParams {
        radii,
        texture_seed: rng.random(),
        light_dir: light,
        ambient: cfg.ambient,
        image_size: cfg.image_size,
        yaw_a,
        yaw_b: yaw_a + delta,
    };
    scene.validate()?;
    Ok(scene)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub pair_id: usize,
    pub yaw_a: f64,
    pub yaw_b: f64,
    pub img_a: String,
    pub img_b: String,
    pub flow: String,
    pub vis: String,
}

pub const MANIFEST: &str = "manifest.csv";

pub fn manifest_csv(rows: &[ManifestRow]) -> String {
    let mut out = String::from("pair_id,yaw_a,yaw_b,img_a,img_b,flow,vis\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.9},{:.9},{},{},{},{}", r.pair_id, r.yaw_a, r.yaw_b, r.img_a, r.img_b, r.flow, r.vis);
    }
    out
}

/// Renders `count` pairs into `out_dir` and writes the manifest; returns the manifest path.
pub fn gen_pairs(count: usize, seed: u64, out_dir: impl AsRef<Path>, cfg: &PairConfig) -> Result<(PathBuf, Vec<ManifestRow>)> {
    if count == 0 {
        return arg_err("count must be >= 1");
    }
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let scenes = (0..count).map(|i| pair_scene(seed, i, cfg)).collect::<Result<Vec<_>>>()?;
    let pairs = scenes.par_iter().map(ViewPair::render).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(count);
    for (i, (scene, pair)) in scenes.iter().zip(&pairs).enumerate() {
        let row = ManifestRow {
            pair_id: i,
            yaw_a: scene.yaw_a,
            yaw_b: scene.yaw_b,
            img_a: format!("pair_{i:04}_a.ppm"),
            img_b: format!("pair_{i:04}_b.ppm"),
            flow: format!("pair_{i:04}_flow.icmt"),
            vis: format!("pair_{i:04}_vis.icmt"),
        };
        write_netpbm(dir.join(&row.img_a), &pair.img_a)?;
        write_netpbm(dir.join(&row.img_b), &pair.img_b)?;
        write_tensor(dir.join(&row.flow), &pair.gt_flow.to_tensor())?;
        write_tensor(dir.join(&row.vis), &pair.gt_flow.validity_tensor())?;
        rows.push(row);
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, manifest_csv(&rows))?;
    Ok((path, rows))
}
