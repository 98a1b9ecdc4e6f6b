//! Deterministic local backends.

use image::{Rgb, RgbImage};

use super::{Backend, EnhanceKind, EnhanceRequest, GatewayError};
use crate::raster::{decode_normal, encode_normal};

/// Returns the primary image unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl Backend for Identity {
    fn name(&self) -> &str {
        "identity"
    }

    fn call(&self, request: &EnhanceRequest) -> Result<RgbImage, GatewayError> {
        request
            .primary()
            .cloned()
            .ok_or_else(|| GatewayError::InvalidRequest("no primary image".into()))
    }
}

/// Paints every pixel with one color.
#[derive(Clone, Copy, Debug)]
pub struct ConstantFill(pub [u8; 3]);

impl Backend for ConstantFill {
    fn name(&self) -> &str {
        "constant"
    }

    fn call(&self, request: &EnhanceRequest) -> Result<RgbImage, GatewayError> {
        let p = request
            .primary()
            .ok_or_else(|| GatewayError::InvalidRequest("no primary image".into()))?;
        Ok(RgbImage::from_pixel(p.width(), p.height(), Rgb(self.0)))
    }
}

/// Unsharp masking of an encoded normal map followed by renormalization.
#[derive(Clone, Copy, Debug)]
pub struct UnsharpNormals {
    pub amount: f32,
}

impl Default for UnsharpNormals {
    fn default() -> Self {
        UnsharpNormals { amount: 0.6 }
    }
}

/// Decodes, sharpens and re-encodes; background pixels (all zero bytes)
/// are left alone and excluded from the blur.
pub fn sharpen_normals(img: &RgbImage, amount: f32) -> RgbImage {
    let (w, h) = img.dimensions();
    let fg = |x: u32, y: u32| img.get_pixel(x, y).0 != [0, 0, 0];
    RgbImage::from_fn(w, h, |x, y| {
        let px = *img.get_pixel(x, y);
        if !fg(x, y) {
            return px;
        }
        let n = decode_normal(px.0);
        let mut blur = [0.0f32; 3];
        let mut wsum = 0.0f32;
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                let (nx, ny) = (x as i32 + dx, y as i32 + dy);
                if nx < 0 || ny < 0 || nx >= w as i32 || ny >= h as i32 || !fg(nx as u32, ny as u32)
                {
                    continue;
                }
                let k =
                    [1.0f32, 2.0, 1.0][(dx + 1) as usize] * [1.0f32, 2.0, 1.0][(dy + 1) as usize];
                let m = decode_normal(img.get_pixel(nx as u32, ny as u32).0);
                for c in 0..3 {
                    blur[c] += k * m[c];
                }
                wsum += k;
            }
        }
        let mut s = [0.0f32; 3];
        for c in 0..3 {
            s[c] = n[c] + amount * (n[c] - blur[c] / wsum);
        }
        let len = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
        if len < 1e-6 {
            return px;
        }
        Rgb(encode_normal(s.map(|v| v / len)))
    })
}

impl Backend for UnsharpNormals {
    fn name(&self) -> &str {
        "unsharp"
    }

    fn call(&self, request: &EnhanceRequest) -> Result<RgbImage, GatewayError> {
        match request.kind {
            EnhanceKind::NormalEnhance => Ok(sharpen_normals(
                request.primary().expect("validated"),
                self.amount,
            )),
            EnhanceKind::TextureInpaint => Err(GatewayError::InvalidRequest(
                "unsharp stand-in only handles normal_enhance".into(),
            )),
        }
    }
}

/// Push-pull pyramid fill of the masked region from the unmasked pixels.
#[derive(Clone, Copy, Debug, Default)]
pub struct PushPullFill;

struct Level {
    w: usize,
    h: usize,
    color: Vec<[f64; 3]>,
    weight: Vec<f64>,
}

const TENT: [f64; 4] = [0.125, 0.375, 0.375, 0.125];

fn push(fine: &Level) -> Level {
    let (w, h) = (fine.w.div_ceil(2), fine.h.div_ceil(2));
    let mut color = vec![[0.0; 3]; w * h];
    let mut weight = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            let mut wsum = 0.0;
            for (j, ky) in TENT.iter().enumerate() {
                let fy = 2 * y as isize - 1 + j as isize;
                if fy < 0 || fy >= fine.h as isize {
                    continue;
                }
                for (i, kx) in TENT.iter().enumerate() {
                    let fx = 2 * x as isize - 1 + i as isize;
                    if fx < 0 || fx >= fine.w as isize {
                        continue;
                    }
                    let f = fy as usize * fine.w + fx as usize;
                    let k = kx * ky * fine.weight[f];
                    for c in 0..3 {
                        acc[c] += k * fine.color[f][c];
                    }
                    wsum += k;
                }
            }
            let i = y * w + x;
            if wsum > 0.0 {
                color[i] = acc.map(|v| v / wsum);
                weight[i] = (4.0 * wsum).min(1.0);
            }
        }
    }
    Level {
        w,
        h,
        color,
        weight,
    }
}

fn sample_bilinear(level: &Level, fx: f64, fy: f64) -> [f64; 3] {
    let x = fx.clamp(0.0, (level.w - 1) as f64);
    let y = fy.clamp(0.0, (level.h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(level.w - 1), (y0 + 1).min(level.h - 1));
    let (tx, ty) = (x - x0 as f64, y - y0 as f64);
    let at = |x: usize, y: usize| level.color[y * level.w + x];
    let mut out = [0.0; 3];
    for c in 0..3 {
        let top = at(x0, y0)[c] * (1.0 - tx) + at(x1, y0)[c] * tx;
        let bot = at(x0, y1)[c] * (1.0 - tx) + at(x1, y1)[c] * tx;
        out[c] = top * (1.0 - ty) + bot * ty;
    }
    out
}

fn pull(fine: &mut Level, coarse: &Level) {
    for y in 0..fine.h {
        for x in 0..fine.w {
            let i = y * fine.w + x;
            let w = fine.weight[i];
            if w >= 1.0 {
                continue;
            }
            let up = sample_bilinear(coarse, (x as f64 - 0.5) / 2.0, (y as f64 - 0.5) / 2.0);
            for c in 0..3 {
                fine.color[i][c] = w * fine.color[i][c] + (1.0 - w) * up[c];
            }
            fine.weight[i] = 1.0;
        }
    }
}

/// Fills pixels where `known` is false from the others. Returns `None` when
/// nothing is known.
pub fn push_pull(img: &RgbImage, known: impl Fn(u32, u32) -> bool) -> Option<RgbImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut base = Level {
        w,
        h,
        color: img.pixels().map(|p| p.0.map(|v| v as f64)).collect(),
        weight: (0..w * h)
            .map(|i| {
                if known((i % w) as u32, (i / w) as u32) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect(),
    };
    if base.weight.iter().all(|v| *v == 0.0) {
        return None;
    }
    let mut pyramid = Vec::new();
    let mut cur = push(&base);
    while cur.w > 1 || cur.h > 1 {
        let next = push(&cur);
        pyramid.push(cur);
        cur = next;
    }
    pyramid.push(cur);
    for k in (0..pyramid.len() - 1).rev() {
        let (lo, hi) = pyramid.split_at_mut(k + 1);
        pull(&mut lo[k], &hi[0]);
    }
    pull(&mut base, &pyramid[0]);
    Some(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let c = base.color[y as usize * w + x as usize];
        Rgb(c.map(|v| v.round().clamp(0.0, 255.0) as u8))
    }))
}

impl Backend for PushPullFill {
    fn name(&self) -> &str {
        "push_pull"
    }

    fn call(&self, request: &EnhanceRequest) -> Result<RgbImage, GatewayError> {
        let primary = request.primary().expect("validated");
        match (request.kind, &request.images.mask) {
            (EnhanceKind::TextureInpaint, Some(mask)) => {
                Ok(push_pull(primary, |x, y| mask.get_pixel(x, y).0[0] <= 127)
                    .unwrap_or_else(|| primary.clone()))
            }
            _ => Ok(primary.clone()),
        }
    }
}

/// Unsharp normals for enhancement, push-pull for inpainting.
#[derive(Clone, Copy, Debug, Default)]
pub struct OfflineBackend {
    pub unsharp: UnsharpNormals,
}

impl Backend for OfflineBackend {
    fn name(&self) -> &str {
        "offline"
    }

    fn call(&self, request: &EnhanceRequest) -> Result<RgbImage, GatewayError> {
        match request.kind {
            EnhanceKind::NormalEnhance => self.unsharp.call(request),
            EnhanceKind::TextureInpaint => PushPullFill.call(request),
        }
    }
}
