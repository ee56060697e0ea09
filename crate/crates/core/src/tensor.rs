//! Dense row-major `f32` tensors, width-wise image concatenation and the
//! on-disk formats shared by every other module.
//!
//! Images are channel-last `[H, W, C]` tensors. The binary tensor format is
//! little-endian:
//!
//! ```text
//! "ICMT" | version u32 = 1 | dtype u32 = 0 (f32) | ndim u32 | ndim x u64 extents | f32 payload
//! ```
//!
//! Images can also be exchanged as binary NetPBM (`P5` for one channel, `P6`
//! for three) with maxval 255.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{dim_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"ICMT";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;
pub const MAX_DIMS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > MAX_DIMS {
        return dim_err(format!("tensor must have 1..={MAX_DIMS} dims, got {}", dims.len()));
    }
    if dims.contains(&0) {
        return dim_err(format!("all extents must be >= 1, got {dims:?}"));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Dimension(format!("extent product overflows: {dims:?}")))
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n = check_dims(&dims)?;
        if n != data.len() {
            return dim_err(format!(
                "dims {dims:?} need {n} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: Vec<usize>, value: f32) -> Result<Self> {
        let n = check_dims(&dims)?;
        Ok(Self { dims, data: vec![value; n] })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        Self::filled(dims, 0.0)
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self { dims: other.dims.clone(), data: vec![0.0; other.data.len()] }
    }

    pub fn from_fn_hwc(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut t = Self::zeros(vec![h, w, c])?;
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    t.data[(r * w + col) * c + ch] = f(r, col, ch);
                }
            }
        }
        Ok(t)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_dims(&self, other: &Tensor) -> bool {
        self.dims == other.dims
    }

    pub fn ensure_same_dims(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            dim_err(format!("{what}: dims {:?} vs {:?}", self.dims, other.dims))
        }
    }

    /// `(H, W, C)` of a rank-3 tensor.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.dims.as_slice() {
            &[h, w, c] => Ok((h, w, c)),
            d => dim_err(format!("expected an [H, W, C] tensor, got dims {d:?}")),
        }
    }

    pub fn at3(&self, r: usize, c: usize, ch: usize) -> f32 {
        let w = self.dims[1];
        let cc = self.dims[2];
        self.data[(r * w + c) * cc + ch]
    }

    /// Channel slice of pixel `(r, c)` in an `[H, W, C]` tensor.
    pub fn pixel(&self, r: usize, c: usize) -> &[f32] {
        let w = self.dims[1];
        let cc = self.dims[2];
        let start = (r * w + c) * cc;
        &self.data[start..start + cc]
    }

    pub fn pixel_mut(&mut self, r: usize, c: usize) -> &mut [f32] {
        let w = self.dims[1];
        let cc = self.dims[2];
        let start = (r * w + c) * cc;
        &mut self.data[start..start + cc]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, what: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.ensure_same_dims(other, what)?;
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Root-mean-square difference between two same-shaped tensors.
    pub fn rms_distance(&self, other: &Tensor) -> Result<f64> {
        self.ensure_same_dims(other, "rms distance")?;
        let ss: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        Ok((ss / self.data.len() as f64).sqrt())
    }

    /// Bytes of the binary tensor format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected \"ICMT\"")));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dtype = cur.u32()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype code {dtype}")));
        }
        let ndim = cur.u32()? as usize;
        if ndim == 0 || ndim > MAX_DIMS {
            return Err(Error::Format(format!("ndim {ndim} outside 1..={MAX_DIMS}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = cur.u64()?;
            dims.push(usize::try_from(d).map_err(|_| Error::Format(format!("extent {d} too large")))?);
        }
        let n = check_dims(&dims).map_err(|e| Error::Format(e.to_string()))?;
        let payload = &bytes[cur.pos..];
        if payload.len() != n * 4 {
            return Err(Error::Format(format!(
                "dims {dims:?} declare {} payload bytes, found {}",
                n * 4,
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated header".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&t.to_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    Tensor::from_bytes(&fs::read(path)?)
}

/// Places `b` to the right of `a`: `[H, Wa, C] ++ [H, Wb, C] -> [H, Wa + Wb, C]`.
pub fn concat_width(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ha, wa, ca) = a.hwc()?;
    let (hb, wb, cb) = b.hwc()?;
    if ha != hb || ca != cb {
        return dim_err(format!("concat_width: [{ha},{wa},{ca}] vs [{hb},{wb},{cb}]"));
    }
    let w = wa + wb;
    let mut data = Vec::with_capacity(ha * w * ca);
    for r in 0..ha {
        data.extend_from_slice(&a.data[r * wa * ca..(r + 1) * wa * ca]);
        data.extend_from_slice(&b.data[r * wb * cb..(r + 1) * wb * cb]);
    }
    Tensor::new(vec![ha, w, ca], data)
}

/// Splits an image into columns `[0, w)` and `[w, W)`.
pub fn split_width(x: &Tensor, w: usize) -> Result<(Tensor, Tensor)> {
    let (h, total, c) = x.hwc()?;
    if w == 0 || w >= total {
        return dim_err(format!("split_width: split column {w} must lie in (0, {total})"));
    }
    let wr = total - w;
    let mut left = Vec::with_capacity(h * w * c);
    let mut right = Vec::with_capacity(h * wr * c);
    for r in 0..h {
        let row = &x.data[r * total * c..(r + 1) * total * c];
        left.extend_from_slice(&row[..w * c]);
        right.extend_from_slice(&row[w * c..]);
    }
    Ok((Tensor::new(vec![h, w, c], left)?, Tensor::new(vec![h, wr, c], right)?))
}

/// `[0, 1] -> [0, 255]` with round-half-up; out-of-range values saturate.
pub fn quantize_u8(v: f32) -> u8 {
    let x = (v as f64 * 255.0 + 0.5).floor();
    if x.is_nan() {
        0
    } else {
        x.clamp(0.0, 255.0) as u8
    }
}

pub fn netpbm_bytes(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = img.hwc()?;
    let tag = match c {
        1 => "P5",
        3 => "P6",
        _ => return dim_err(format!("NetPBM export needs 1 or 3 channels, got {c}")),
    };
    let mut out = format!("{tag}\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data.iter().map(|&v| quantize_u8(v)));
    Ok(out)
}

pub fn write_netpbm(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    fs::write(path, netpbm_bytes(img)?)?;
    Ok(())
}

pub fn parse_netpbm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated NetPBM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let c = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format(format!("unsupported NetPBM magic {other:?}"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse().map_err(|_| Error::Format(format!("bad NetPBM {what}: {t:?}")))
    };
    let w = num("width")?;
    let h = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("only maxval 255 is supported, got {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let n = h * w * c;
    if bytes.len() < start + n {
        return Err(Error::Format("truncated NetPBM raster".into()));
    }
    let data = bytes[start..start + n].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![h, w, c], data).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_netpbm(path: impl AsRef<Path>) -> Result<Tensor> {
    parse_netpbm(&fs::read(path)?)
}

/// Loads an image from NetPBM (`.ppm`/`.pgm`/`.pnm`) or tensor files, chosen by extension.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm" | "pgm" | "pnm") => read_netpbm(path),
        _ => read_tensor(path),
    }
}
