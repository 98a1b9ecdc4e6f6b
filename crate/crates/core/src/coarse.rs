//! Coarse-shape losses: scale-invariant depth and perceptual normal loss
//! over a pluggable feature extractor, plus a staged two-term optimizer.

use crate::error::{Error, Result};
use crate::opt::AdamState;
use crate::raster::{Raster, ScalarMap};

/// Channel-major feature tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidInput("feature map needs c, h, w >= 1".into()));
        }
        if values.len() != channels * height * width {
            return Err(Error::mismatch(
                (channels * height * width).to_string(),
                values.len().to_string(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "feature map has non-finite values".into(),
            ));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.spatial()..(c + 1) * self.spatial()]
    }

    fn same_shape(&self, o: &FeatureMap) -> bool {
        (self.channels, self.height, self.width) == (o.channels, o.height, o.width)
    }
}

/// Square row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Gram {
    pub size: usize,
    pub values: Vec<f64>,
}

impl Gram {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }
}

/// `F F^T / (c h w)` with `F` the `c x hw` flattening.
pub fn gram_matrix(f: &FeatureMap) -> Gram {
    let c = f.channels;
    let norm = (c * f.spatial()) as f64;
    let mut values = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            let dot: f64 = f
                .channel(i)
                .iter()
                .zip(f.channel(j))
                .map(|(a, b)| a * b)
                .sum();
            values[i * c + j] = dot / norm;
            values[j * c + i] = dot / norm;
        }
    }
    Gram { size: c, values }
}

pub type NormalImage = Raster<[f32; 3]>;

/// Produces one feature map per requested layer.
pub trait FeatureExtractor {
    fn layer_count(&self) -> usize;
    fn extract(&self, image: &NormalImage, layers: &[usize]) -> Result<Vec<FeatureMap>>;
}

/// Gaussian-derivative filter bank. Layer `l` blurs each input channel with
/// sigma `2^l`, subsamples by `2^l`, and emits the blurred value and its x
/// and y derivatives: 9 channels per layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct FilterBank;

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn convolve_axis(src: &[f64], w: usize, h: usize, kernel: &[f64], horizontal: bool) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let o = k as isize - r;
                let (sx, sy) = if horizontal {
                    ((x as isize + o).clamp(0, w as isize - 1) as usize, y)
                } else {
                    (x, (y as isize + o).clamp(0, h as isize - 1) as usize)
                };
                acc += kv * src[sy * w + sx];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

impl FeatureExtractor for FilterBank {
    fn layer_count(&self) -> usize {
        3
    }

    fn extract(&self, image: &NormalImage, layers: &[usize]) -> Result<Vec<FeatureMap>> {
        let (w, h) = image.size();
        layers
            .iter()
            .map(|&l| {
                if l >= self.layer_count() {
                    return Err(Error::InvalidInput(format!("filter bank has no layer {l}")));
                }
                let step = 1usize << l;
                let kernel = gaussian_kernel(step as f64);
                let (ow, oh) = (w.div_ceil(step), h.div_ceil(step));
                let mut values = Vec::with_capacity(9 * ow * oh);
                let mut derivs = Vec::with_capacity(6 * ow * oh);
                for c in 0..3 {
                    let plane: Vec<f64> = image.data.iter().map(|p| p[c] as f64).collect();
                    let blurred = convolve_axis(
                        &convolve_axis(&plane, w, h, &kernel, true),
                        w,
                        h,
                        &kernel,
                        false,
                    );
                    let at = |x: usize, y: usize| blurred[y.min(h - 1) * w + x.min(w - 1)];
                    let mut dx = Vec::with_capacity(ow * oh);
                    let mut dy = Vec::with_capacity(ow * oh);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let (x, y) = (ox * step, oy * step);
                            values.push(at(x, y));
                            dx.push(0.5 * (at(x + 1, y) - at(x.saturating_sub(1), y)));
                            dy.push(0.5 * (at(x, y + 1) - at(x, y.saturating_sub(1))));
                        }
                    }
                    derivs.extend(dx);
                    derivs.extend(dy);
                }
                values.extend(derivs);
                FeatureMap::new(9, oh, ow, values)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerceptualLoss {
    pub content: f64,
    pub style: f64,
    pub total: f64,
}

/// Content term: summed squared feature differences. Style term: twice
/// the summed squared Frobenius norms of Gram differences. With
/// `normalize`, each layer's content term is divided by `c h w`.
pub fn perceptual_normal_loss(
    rendered: &NormalImage,
    target: &NormalImage,
    extractor: &dyn FeatureExtractor,
    layers: &[usize],
    normalize: bool,
) -> Result<PerceptualLoss> {
    if !rendered.same_size(target) {
        return Err(Error::mismatch(
            format!("{}x{}", rendered.width, rendered.height),
            format!("{}x{}", target.width, target.height),
        ));
    }
    let fa = extractor.extract(rendered, layers)?;
    let fb = extractor.extract(target, layers)?;
    perceptual_from_features(&fa, &fb, normalize)
}

/// The loss over already extracted per-layer features.
pub fn perceptual_from_features(
    a: &[FeatureMap],
    b: &[FeatureMap],
    normalize: bool,
) -> Result<PerceptualLoss> {
    if a.len() != b.len() {
        return Err(Error::mismatch(a.len().to_string(), b.len().to_string()));
    }
    let mut content = 0.0;
    let mut style = 0.0;
    for (fa, fb) in a.iter().zip(b) {
        if !fa.same_shape(fb) {
            return Err(Error::mismatch(
                format!("{}x{}x{}", fa.channels, fa.height, fa.width),
                format!("{}x{}x{}", fb.channels, fb.height, fb.width),
            ));
        }
        let sq: f64 = fa
            .values
            .iter()
            .zip(&fb.values)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        content += if normalize {
            sq / fa.values.len() as f64
        } else {
            sq
        };
        let (ga, gb) = (gram_matrix(fa), gram_matrix(fb));
        style += ga
            .values
            .iter()
            .zip(&gb.values)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
    }
    let style = 2.0 * style;
    Ok(PerceptualLoss {
        content,
        style,
        total: content + style,
    })
}

/// `mean(d^2) - 0.5 mean(d)^2` with `d = log pred - log target` over pixels
/// where `valid > 0.5`.
pub fn scale_invariant_depth_loss(
    pred: &ScalarMap,
    target: &ScalarMap,
    valid: &ScalarMap,
) -> Result<f64> {
    if !pred.same_size(target) || !pred.same_size(valid) {
        return Err(Error::mismatch(
            format!("{}x{}", pred.width, pred.height),
            format!("{:?} / {:?}", target.size(), valid.size()),
        ));
    }
    let mut n = 0usize;
    let (mut s1, mut s2) = (0.0f64, 0.0f64);
    for i in 0..pred.data.len() {
        if valid.data[i] <= 0.5 {
            continue;
        }
        let (p, t) = (pred.data[i] as f64, target.data[i] as f64);
        if !(p > 0.0 && t > 0.0) {
            return Err(Error::InvalidInput(format!(
                "non-positive depth at pixel {i}"
            )));
        }
        let d = p.ln() - t.ln();
        s1 += d;
        s2 += d * d;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidInput("no valid depth pixels".into()));
    }
    let mean = s1 / n as f64;
    Ok(s2 / n as f64 - 0.5 * mean * mean)
}

/// One phase of the staged depth/normal schedule.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Stage {
    pub iterations: usize,
    pub lambda_d: f64,
    pub lambda_n: f64,
    pub lr: f64,
}

/// Depth-heavy then normal-only, 100 Adam iterations each.
pub fn default_stages() -> Vec<Stage> {
    vec![
        Stage {
            iterations: 100,
            lambda_d: 1.0,
            lambda_n: 0.5,
            lr: 1e-3,
        },
        Stage {
            iterations: 100,
            lambda_d: 0.0,
            lambda_n: 1.0,
            lr: 1e-4,
        },
    ]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageRecord {
    pub stage: usize,
    pub iteration: usize,
    pub depth: f64,
    pub normal: f64,
}

/// Objective term returning its value and gradient at the parameters.
pub type Term<'a> = dyn Fn(&[f32]) -> Result<(f64, Vec<f64>)> + 'a;

/// Minimizes `lambda_d * depth + lambda_n * normal` stage by stage with a
/// fresh Adam state per stage.
pub fn run_stages(
    params: &mut [f32],
    stages: &[Stage],
    depth: &Term,
    normal: &Term,
) -> Result<Vec<StageRecord>> {
    let mut log = Vec::new();
    for (s, stage) in stages.iter().enumerate() {
        let mut adam = AdamState::new(params.len(), stage.lr);
        for it in 0..stage.iterations {
            let (dv, dg) = depth(params)?;
            let (nv, ng) = normal(params)?;
            log.push(StageRecord {
                stage: s,
                iteration: it,
                depth: dv,
                normal: nv,
            });
            let total = stage.lambda_d * dv + stage.lambda_n * nv;
            if !total.is_finite() {
                return Err(Error::Divergence {
                    iteration: it,
                    value: total,
                });
            }
            let grad: Vec<f64> = dg
                .iter()
                .zip(&ng)
                .map(|(a, b)| stage.lambda_d * a + stage.lambda_n * b)
                .collect();
            adam.step(params, &grad)?;
        }
    }
    Ok(log)
}
