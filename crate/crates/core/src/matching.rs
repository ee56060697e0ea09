//! Dense in-context matching.
//!
//! A cost volume holds the cosine similarity between every source descriptor
//! `D_src(u)` and every target descriptor `D_tgt(v)`. The matching flow picks,
//! per source pixel, the target with the highest score; its offset
//! `F(u) = v* - u` maximizes the data term `sum_u C(u, u + F(u))`.
//!
//! Descriptors with zero norm score 0 against everything. Ties resolve to
//! the smallest row-major target index, so parallel and sequential runs
//! agree bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{arg_err, dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub level: usize,
    features: Tensor,
}

impl FeatureGrid {
    pub fn new(level: usize, features: Tensor) -> Result<Self> {
        features.hwc()?;
        if features.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("feature grid contains non-finite values".into()));
        }
        Ok(Self { level, features })
    }

    pub fn height(&self) -> usize {
        self.features.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.features.dims()[1]
    }

    pub fn channels(&self) -> usize {
        self.features.dims()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.features
    }

    pub fn into_tensor(self) -> Tensor {
        self.features
    }

    pub fn descriptor(&self, r: usize, c: usize) -> &[f32] {
        self.features.pixel(r, c)
    }
}

/// Multi-level features, level 0 finest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<FeatureGrid>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureGrid>) -> Result<Self> {
        if levels.is_empty() {
            return arg_err("a feature pyramid needs at least one level");
        }
        for pair in levels.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if b.height() > a.height() || b.width() > a.width() {
                return dim_err(format!(
                    "pyramid levels must coarsen: {}x{} followed by {}x{}",
                    a.height(),
                    a.width(),
                    b.height(),
                    b.width()
                ));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[FeatureGrid] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level(&self, l: usize) -> &FeatureGrid {
        &self.levels[l]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostVolumeOptions {
    /// Search radius; `None` compares against the whole target grid.
    pub window: Option<usize>,
    /// Split source rows across the current rayon pool.
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    height: usize,
    width: usize,
    window: Option<usize>,
    data: Vec<f32>,
}

impl CostVolume {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn window(&self) -> Option<usize> {
        self.window
    }

    /// Candidates stored per source pixel.
    pub fn per_source(&self) -> usize {
        match self.window {
            None => self.height * self.width,
            Some(w) => (2 * w + 1) * (2 * w + 1),
        }
    }

    /// `[H, W, H, W]` for a full volume, `[H, W, (2w+1)^2]` when windowed.
    pub fn storage_dims(&self) -> Vec<usize> {
        match self.window {
            None => vec![self.height, self.width, self.height, self.width],
            Some(_) => vec![self.height, self.width, self.per_source()],
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Score between source `(sr, sc)` and target `(tr, tc)`; `None` when the
    /// target lies outside the grid or outside the search window.
    pub fn get(&self, sr: usize, sc: usize, tr: i64, tc: i64) -> Option<f32> {
        if tr < 0 || tc < 0 || tr >= self.height as i64 || tc >= self.width as i64 {
            return None;
        }
        let base = (sr * self.width + sc) * self.per_source();
        match self.window {
            None => Some(self.data[base + tr as usize * self.width + tc as usize]),
            Some(w) => {
                let dy = tr - sr as i64;
                let dx = tc - sc as i64;
                let w = w as i64;
                if dy.abs() > w || dx.abs() > w {
                    return None;
                }
                let side = 2 * w + 1;
                Some(self.data[base + ((dy + w) * side + dx + w) as usize])
            }
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.storage_dims(), self.data.clone()).expect("cost volume storage is consistent")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.dims() {
            [h, w, h2, w2] if h == h2 && w == w2 => {
                Ok(Self { height: h, width: w, window: None, data: t.data().to_vec() })
            }
            [h, w, k] => {
                let side = (k as f64).sqrt().round() as usize;
                if side * side != k || side.is_multiple_of(2) {
                    return dim_err(format!("windowed cost volume needs an odd square last extent, got {k}"));
                }
                Ok(Self { height: h, width: w, window: Some(side / 2), data: t.data().to_vec() })
            }
            ref d => dim_err(format!("not a cost volume layout: {d:?}")),
        }
    }

    /// The identity volume on an `h x w` grid: 1 on the diagonal, 0 elsewhere.
    pub fn identity(h: usize, w: usize) -> Self {
        let n = h * w;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { height: h, width: w, window: None, data }
    }

    /// Full volume built from raw `[H*W][H*W]` scores.
    pub fn from_full(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * h * w {
            return dim_err(format!("{h}x{w} volume needs {} scores, got {}", h * w * h * w, data.len()));
        }
        Ok(Self { height: h, width: w, window: None, data })
    }
}

/// Unit-normalised descriptors in `f64`; zero-norm descriptors stay zero.
fn normalised(g: &FeatureGrid) -> Vec<f64> {
    let c = g.channels();
    let mut out = Vec::with_capacity(g.tensor().len());
    for d in g.tensor().data().chunks_exact(c) {
        let norm = d.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.extend(d.iter().map(|&x| x as f64 / norm));
        } else {
            out.extend(std::iter::repeat_n(0.0, c));
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn score(a: &[f64], b: &[f64]) -> f32 {
    (dot(a, b) as f32).clamp(-1.0, 1.0)
}

pub fn cost_volume(src: &FeatureGrid, tgt: &FeatureGrid) -> Result<CostVolume> {
    cost_volume_with(src, tgt, CostVolumeOptions::default())
}

pub fn cost_volume_with(src: &FeatureGrid, tgt: &FeatureGrid, opts: CostVolumeOptions) -> Result<CostVolume> {
    let (h, w, c) = src.tensor().hwc()?;
    if tgt.tensor().dims() != src.tensor().dims() {
        return dim_err(format!(
            "cost volume needs equal grids: {:?} vs {:?}",
            src.tensor().dims(),
            tgt.tensor().dims()
        ));
    }
    let a = normalised(src);
    let b = normalised(tgt);
    let mut vol = CostVolume { height: h, width: w, window: opts.window, data: Vec::new() };
    let per = vol.per_source();
    let row_len = w * per;
    let mut data = vec![0.0f32; h * row_len];

    let fill_row = |r: usize, out: &mut [f32]| {
        for col in 0..w {
            let da = &a[(r * w + col) * c..(r * w + col + 1) * c];
            let cell = &mut out[col * per..(col + 1) * per];
            match opts.window {
                None => {
                    for (v, s) in cell.iter_mut().enumerate() {
                        *s = score(da, &b[v * c..(v + 1) * c]);
                    }
                }
                Some(win) => {
                    let win = win as i64;
                    let side = 2 * win + 1;
                    for dy in -win..=win {
                        let tr = r as i64 + dy;
                        if tr < 0 || tr >= h as i64 {
                            continue;
                        }
                        for dx in -win..=win {
                            let tc = col as i64 + dx;
                            if tc < 0 || tc >= w as i64 {
                                continue;
                            }
                            let v = tr as usize * w + tc as usize;
                            cell[((dy + win) * side + dx + win) as usize] = score(da, &b[v * c..(v + 1) * c]);
                        }
                    }
                }
            }
        }
    };

    if opts.parallel {
        data.par_chunks_mut(row_len).enumerate().for_each(|(r, out)| fill_row(r, out));
    } else {
        data.chunks_mut(row_len).enumerate().for_each(|(r, out)| fill_row(r, out));
    }
    vol.data = data;
    Ok(vol)
}

/// Integer offsets `(dx, dy)` per source pixel, with optional validity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowField {
    height: usize,
    width: usize,
    offsets: Vec<[i32; 2]>,
    valid: Option<Vec<bool>>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, offsets: Vec<[i32; 2]>, valid: Option<Vec<bool>>) -> Result<Self> {
        if offsets.len() != height * width {
            return dim_err(format!("flow {height}x{width} needs {} offsets, got {}", height * width, offsets.len()));
        }
        if let Some(v) = &valid {
            if v.len() != offsets.len() {
                return dim_err("validity mask length differs from flow length");
            }
        }
        Ok(Self { height, width, offsets, valid })
    }

    pub fn zero(height: usize, width: usize) -> Self {
        Self { height, width, offsets: vec![[0, 0]; height * width], valid: None }
    }

    pub fn constant(height: usize, width: usize, dx: i32, dy: i32) -> Self {
        Self { height, width, offsets: vec![[dx, dy]; height * width], valid: None }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn offsets(&self) -> &[[i32; 2]] {
        &self.offsets
    }

    pub fn offset(&self, r: usize, c: usize) -> [i32; 2] {
        self.offsets[r * self.width + c]
    }

    pub fn validity(&self) -> Option<&[bool]> {
        self.valid.as_deref()
    }

    pub fn is_valid(&self, r: usize, c: usize) -> bool {
        self.valid.as_ref().is_none_or(|v| v[r * self.width + c])
    }

    pub fn with_validity(mut self, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != self.offsets.len() {
            return dim_err("validity mask length differs from flow length");
        }
        self.valid = Some(valid);
        Ok(self)
    }

    /// `u + F(u)` as `(row, col)`.
    pub fn target(&self, r: usize, c: usize) -> (i64, i64) {
        let [dx, dy] = self.offset(r, c);
        (r as i64 + dy as i64, c as i64 + dx as i64)
    }

    /// `[H, W, 2]` tensor, channel 0 = dx (columns), channel 1 = dy (rows).
    pub fn to_tensor(&self) -> Tensor {
        let data = self.offsets.iter().flat_map(|&[dx, dy]| [dx as f32, dy as f32]).collect();
        Tensor::new(vec![self.height, self.width, 2], data).expect("flow dims are valid")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w, c) = t.hwc()?;
        if c != 2 {
            return dim_err(format!("flow tensor needs 2 channels, got {c}"));
        }
        let mut offsets = Vec::with_capacity(h * w);
        for p in t.data().chunks_exact(2) {
            if p.iter().any(|v| v.fract() != 0.0 || !v.is_finite()) {
                return Err(Error::Format("flow offsets must be integers".into()));
            }
            offsets.push([p[0] as i32, p[1] as i32]);
        }
        Self::new(h, w, offsets, None)
    }

    /// Validity as an `[H, W]` tensor of 1.0 / 0.0.
    pub fn validity_tensor(&self) -> Tensor {
        let data = (0..self.offsets.len())
            .map(|i| if self.valid.as_ref().is_none_or(|v| v[i]) { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![self.height, self.width], data).expect("flow dims are valid")
    }

    pub fn fraction_zero(&self) -> f64 {
        let n = self.offsets.iter().filter(|o| **o == [0, 0]).count();
        n as f64 / self.offsets.len() as f64
    }
}

pub fn validity_from_tensor(t: &Tensor) -> Vec<bool> {
    t.data().iter().map(|&v| v > 0.5).collect()
}

pub fn argmax_flow(cost: &CostVolume) -> FlowField {
    let (h, w) = (cost.height, cost.width);
    let per = cost.per_source();
    let mut offsets = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let cell = &cost.data[(r * w + c) * per..(r * w + c + 1) * per];
            let (tr, tc) = match cost.window {
                None => {
                    let mut best = 0usize;
                    for (v, &s) in cell.iter().enumerate() {
                        if s > cell[best] {
                            best = v;
                        }
                    }
                    ((best / w) as i64, (best % w) as i64)
                }
                Some(win) => {
                    let win = win as i64;
                    let side = 2 * win + 1;
                    let mut best: Option<(f32, i64, i64)> = None;
                    // row-major over (dy, dx) is row-major over the target grid
                    for dy in -win..=win {
                        let tr = r as i64 + dy;
                        if tr < 0 || tr >= h as i64 {
                            continue;
                        }
                        for dx in -win..=win {
                            let tc = c as i64 + dx;
                            if tc < 0 || tc >= w as i64 {
                                continue;
                            }
                            let s = cell[((dy + win) * side + dx + win) as usize];
                            if best.is_none_or(|(b, _, _)| s > b) {
                                best = Some((s, tr, tc));
                            }
                        }
                    }
                    let (_, tr, tc) = best.expect("window contains the source pixel");
                    (tr, tc)
                }
            };
            offsets.push([(tc - c as i64) as i32, (tr - r as i64) as i32]);
        }
    }
    FlowField { height: h, width: w, offsets, valid: None }
}

/// Data term `sum_u C(u, u + F(u))` over valid source pixels.
pub fn map_data_score(cost: &CostVolume, flow: &FlowField) -> Result<f64> {
    if (flow.height, flow.width) != (cost.height, cost.width) {
        return dim_err(format!(
            "flow {}x{} vs cost volume {}x{}",
            flow.height, flow.width, cost.height, cost.width
        ));
    }
    let mut total = 0.0f64;
    for r in 0..flow.height {
        for c in 0..flow.width {
            if !flow.is_valid(r, c) {
                continue;
            }
            let (tr, tc) = flow.target(r, c);
            let s = cost.get(r, c, tr, tc).ok_or_else(|| {
                Error::Contract(format!("flow at ({r}, {c}) points to ({tr}, {tc}), outside the cost volume"))
            })?;
            total += s as f64;
        }
    }
    Ok(total)
}

/// `row,col,dx,dy,score` lines for every source pixel.
pub fn flow_csv(flow: &FlowField, cost: &CostVolume) -> Result<String> {
    let mut s = String::from("row,col,dx,dy,score\n");
    for r in 0..flow.height {
        for c in 0..flow.width {
            let [dx, dy] = flow.offset(r, c);
            let (tr, tc) = flow.target(r, c);
            let score = cost
                .get(r, c, tr, tc)
                .ok_or_else(|| Error::Contract(format!("flow at ({r}, {c}) leaves the cost volume")))?;
            writeln!(s, "{r},{c},{dx},{dy},{score:.6}").expect("writing to a String");
        }
    }
    Ok(s)
}

pub fn write_flow_csv(path: impl AsRef<Path>, flow: &FlowField, cost: &CostVolume) -> Result<()> {
    fs::write(path, flow_csv(flow, cost)?)?;
    Ok(())
}

/// 2x2 average pooling with floor on odd extents.
pub fn avg_pool2(img: &Tensor) -> Result<Tensor> {
    let (h, w, c) = img.hwc()?;
    if h < 2 || w < 2 {
        return dim_err(format!("cannot pool a {h}x{w} image"));
    }
    Tensor::from_fn_hwc(h / 2, w / 2, c, |r, col, ch| {
        let s = img.at3(2 * r, 2 * col, ch) as f64
            + img.at3(2 * r, 2 * col + 1, ch) as f64
            + img.at3(2 * r + 1, 2 * col, ch) as f64
            + img.at3(2 * r + 1, 2 * col + 1, ch) as f64;
        (s / 4.0) as f32
    })
}

/// Mean-centred `patch x patch x C` neighbourhoods (edge-clamped) of one image.
pub fn patch_grid(img: &Tensor, patch: usize, level: usize) -> Result<FeatureGrid> {
    let (h, w, c) = img.hwc()?;
    if patch.is_multiple_of(2) {
        return arg_err(format!("patch size must be odd, got {patch}"));
    }
    let half = (patch / 2) as i64;
    let dim = patch * patch * c;
    let mut data = Vec::with_capacity(h * w * dim);
    let mut buf = vec![0.0f64; dim];
    for r in 0..h as i64 {
        for col in 0..w as i64 {
            let mut k = 0;
            for dy in -half..=half {
                let rr = (r + dy).clamp(0, h as i64 - 1) as usize;
                for dx in -half..=half {
                    let cc = (col + dx).clamp(0, w as i64 - 1) as usize;
                    for &v in img.pixel(rr, cc) {
                        buf[k] = v as f64;
                        k += 1;
                    }
                }
            }
            let mean = buf.iter().sum::<f64>() / dim as f64;
            data.extend(buf.iter().map(|&v| (v - mean) as f32));
        }
    }
    FeatureGrid::new(level, Tensor::new(vec![h, w, dim], data)?)
}

/// Patch-descriptor pyramid: level 0 from the input, each further level from
/// a 2x2 average pool of the previous one.
pub fn patch_descriptors(img: &Tensor, levels: usize, patch: usize) -> Result<FeaturePyramid> {
    let (h, w, _) = img.hwc()?;
    if levels == 0 {
        return arg_err("levels must be >= 1");
    }
    if patch.is_multiple_of(2) {
        return arg_err(format!("patch size must be odd, got {patch}"));
    }
    let min = 1usize
        .checked_shl((levels - 1) as u32)
        .ok_or_else(|| Error::InvalidArgument(format!("too many levels: {levels}")))?;
    if h < min || w < min {
        return dim_err(format!("{levels} levels need an image of at least {min}x{min}, got {h}x{w}"));
    }
    let mut grids = Vec::with_capacity(levels);
    let mut current = img.clone();
    for l in 0..levels {
        if l > 0 {
            current = avg_pool2(&current)?;
        }
        grids.push(patch_grid(&current, patch, l)?);
    }
    FeaturePyramid::new(grids)
}

/// Per-pixel endpoint errors of `est` against `gt` on the pixels `gt` marks valid.
pub fn endpoint_errors(est: &FlowField, gt: &FlowField) -> Result<Vec<f64>> {
    if (est.height, est.width) != (gt.height, gt.width) {
        return dim_err("flow fields differ in size");
    }
    Ok(est
        .offsets
        .iter()
        .zip(&gt.offsets)
        .enumerate()
        .filter(|(i, _)| gt.valid.as_ref().is_none_or(|v| v[*i]))
        .map(|(_, (a, b))| {
            let dx = (a[0] - b[0]) as f64;
            let dy = (a[1] - b[1]) as f64;
            (dx * dx + dy * dy).sqrt()
        })
        .collect())
}
