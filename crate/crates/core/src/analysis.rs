//! Feature and image measurements: spatial cosine similarity, half-diagonal
//! Fourier profiles, attention maps, PSNR and SSIM.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use semlink_tensor::{Graph, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, StageKind, SymbolBlock, NUM_STAGES};
use crate::error::{Error, Result};

/// Feature vectors with norm below this are left out of the similarity.
pub const ZERO_NORM: f64 = 1e-12;
/// Floor inside the log-amplitude.
pub const LOG_EPS: f64 = 1e-12;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerId {
    Stage(usize),
    Symbols,
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerId::Stage(s) => write!(f, "{s}"),
            LayerId::Symbols => f.write_str("symbols"),
        }
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "symbols" {
            return Ok(LayerId::Symbols);
        }
        match s.parse::<usize>() {
            Ok(i) if i < NUM_STAGES => Ok(LayerId::Stage(i)),
            _ => Err(Error::Analysis(format!("unknown layer {s:?}"))),
        }
    }
}

impl Serialize for LayerId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// An `[H, W, C]` activation.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub layer: LayerId,
    pub values: Tensor<f64>,
}

impl FeatureMap {
    pub fn new<T: Scalar>(layer: LayerId, values: &Tensor<T>) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::Analysis(format!(
                "feature map must be [H, W, C], got {:?}",
                values.shape()
            )));
        }
        let values = values.cast::<f64>();
        if values.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Analysis("feature map has non-finite values".into()));
        }
        Ok(Self { layer, values })
    }

    /// Each complex symbol as a 2-vector on an `[S, 1]` grid.
    pub fn from_symbols(s: &SymbolBlock) -> Result<Self> {
        Self::new(LayerId::Symbols, &Tensor::<f64>::from_f64([s.len(), 1, 2], &s.iq)?)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2])
    }

    fn vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.values.data().chunks(self.dims().2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub s: f64,
    pub layer: LayerId,
    pub n_positions: usize,
    /// Zero vectors left out of the average.
    pub excluded: usize,
}

/// Mean cosine similarity over all ordered pairs of distinct positions.
///
/// With unit vectors `u_a`, the pair sum is `|sum u|^2 - n`, so no Gram
/// matrix is formed.
pub fn avg_cosine_similarity(f: &FeatureMap) -> Result<SimilarityReport> {
    let (h, w, c) = f.dims();
    let mut total = vec![0.0; c];
    let mut n = 0usize;
    for v in f.vectors() {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < ZERO_NORM {
            continue;
        }
        n += 1;
        total.iter_mut().zip(v).for_each(|(t, x)| *t += x / norm);
    }
    if n == 0 {
        return Err(Error::ZeroEnergy("feature map"));
    }
    if n < 2 {
        return Err(Error::Analysis("need at least two non-zero positions".into()));
    }
    let sq: f64 = total.iter().map(|t| t * t).sum();
    let nf = n as f64;
    Ok(SimilarityReport {
        s: ((sq - nf) / (nf * (nf - 1.0))).clamp(-1.0, 1.0),
        layer: f.layer,
        n_positions: n,
        excluded: h * w - n,
    })
}

fn twiddle(a: usize, b: usize, n: usize) -> Complex64 {
    let phase = -2.0 * std::f64::consts::PI * ((a * b) % n) as f64 / n as f64;
    Complex64::from_polar(1.0, phase)
}

/// Direct 2-D DFT of a row-major `h x w` real array:
/// `F[k, l] = sum_{n, m} x[n, m] exp(-j 2 pi (n k / h + m l / w))`,
/// as a column transform after a row transform.
pub fn dft2(x: &[f64], h: usize, w: usize) -> Result<Vec<Complex64>> {
    if x.len() != h * w {
        return Err(Error::Dimension {
            context: "dft2",
            expected: h * w,
            actual: x.len(),
        });
    }
    let mut rows = vec![Complex64::new(0.0, 0.0); h * w];
    for n in 0..h {
        for l in 0..w {
            rows[n * w + l] = (0..w).map(|m| x[n * w + m] * twiddle(m, l, w)).sum();
        }
    }
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for k in 0..h {
        for l in 0..w {
            out[k * w + l] = (0..h).map(|n| rows[n * w + l] * twiddle(n, k, h)).sum();
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumProfile {
    pub layer: LayerId,
    /// `log|F[k, k]| - log|F[0, 0]|` for `k = 0..=H/2`.
    pub y: Vec<f64>,
}

/// Half-diagonal log-amplitude profile of the channel-averaged feature map,
/// relative to DC.
pub fn fourier_profile(f: &FeatureMap) -> Result<SpectrumProfile> {
    let (h, w, c) = f.dims();
    if h != w {
        return Err(Error::Analysis(format!(
            "fourier profile needs a square grid, got {h}x{w}"
        )));
    }
    let mean: Vec<f64> = f.vectors().map(|v| v.iter().sum::<f64>() / c as f64).collect();
    let spec = dft2(&mean, h, w)?;
    let amp = |k: usize| (spec[k * w + k].norm() + LOG_EPS).ln();
    let dc = amp(0);
    Ok(SpectrumProfile {
        layer: f.layer,
        y: (0..=h / 2).map(|k| amp(k) - dc).collect(),
    })
}

/// Elementwise mean of per-image profiles.
pub fn mean_profile(profiles: &[SpectrumProfile]) -> Result<SpectrumProfile> {
    let first = profiles
        .first()
        .ok_or_else(|| Error::Analysis("no profiles to average".into()))?;
    if profiles
        .iter()
        .any(|p| p.y.len() != first.y.len() || p.layer != first.layer)
    {
        return Err(Error::Analysis("profiles differ in layer or length".into()));
    }
    let n = profiles.len() as f64;
    let y = (0..first.y.len())
        .map(|k| profiles.iter().map(|p| p.y[k]).sum::<f64>() / n)
        .collect();
    Ok(SpectrumProfile { layer: first.layer, y })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub layer: LayerId,
    pub query: (usize, usize),
    pub h: usize,
    pub w: usize,
    /// Row-major `h x w` weights, summing to one.
    pub grid: Vec<f64>,
}

/// Attention row of `query` in the last block of ViT stage `layer`, averaged
/// over heads and over `images`. Images pass a noiseless channel.
pub fn extract_attention_map<T: Scalar>(
    codec: &Codec<T>,
    layer: usize,
    query: (usize, usize),
    images: &[Tensor<T>],
) -> Result<AttentionMap> {
    if layer >= NUM_STAGES || codec.cfg.arch.stages[layer] != StageKind::Vit {
        return Err(Error::Analysis(format!("layer {layer} is not a transformer stage")));
    }
    if images.is_empty() {
        return Err(Error::Analysis("no images".into()));
    }
    let (h, w) = codec.cfg.stage_grid(layer);
    if query.0 >= h || query.1 >= w {
        return Err(Error::Analysis(format!("query {query:?} outside the {h}x{w} grid")));
    }
    let n = h * w;
    let row = query.0 * w + query.1;
    let mut grid = vec![0.0; n];
    for img in images {
        let mut g = Graph::new();
        let b = codec.params.bind_frozen(&mut g);
        let x = g.constant(img.clone());
        let t = codec.forward(&mut g, &b, x, |_, s| Ok(s))?;
        let heads = t.attn[layer].as_ref().expect("transformer stage records attention");
        for &a in heads {
            let v = g.value(a).data();
            grid.iter_mut()
                .zip(&v[row * n..(row + 1) * n])
                .for_each(|(o, p)| *o += p.as_f64());
        }
    }
    let heads = codec.cfg.vit.num_heads as f64;
    let total = heads * images.len() as f64;
    grid.iter_mut().for_each(|v| *v /= total);
    Ok(AttentionMap {
        layer: LayerId::Stage(layer),
        query,
        h,
        w,
        grid,
    })
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Analysis(format!(
            "shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(Error::Analysis("empty image".into()));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`; `+inf` when identical.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

fn grayscale<T: Scalar>(x: &Tensor<T>) -> (usize, usize, Vec<f64>) {
    let s = x.shape();
    let (h, w) = (s[0], s[1]);
    let c = if s.len() == 3 { s[2] } else { 1 };
    let gray = x
        .data()
        .chunks(c)
        .map(|p| p.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64)
        .collect();
    (h, w, gray)
}

/// Normalised 11x11 Gaussian window, row-major.
pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut out = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            out.push(a * b / (s * s));
        }
    }
    out
}

/// Mean SSIM over all valid window positions of the channel-mean images.
/// Inputs are `[H, W]` or `[H, W, C]` in `[0, 1]`.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    if !(2..=3).contains(&a.shape().len()) {
        return Err(Error::Analysis(format!(
            "ssim needs [H, W] or [H, W, C], got {:?}",
            a.shape()
        )));
    }
    let (h, w, x) = grayscale(a);
    let (_, _, y) = grayscale(b);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Analysis(format!(
            "{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - SSIM_WINDOW {
        for c in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let k = win[i * SSIM_WINDOW + j];
                    let p = (r + i) * w + c + j;
                    mx += k * x[p];
                    my += k * y[p];
                    sxx += k * x[p] * x[p];
                    syy += k * y[p] * y[p];
                    sxy += k * x[p] * y[p];
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Stage outputs (and the transmitted symbols) for one image through a
/// noiseless channel.
pub fn feature_maps<T: Scalar>(codec: &Codec<T>, image: &Tensor<T>, layers: &[LayerId]) -> Result<Vec<FeatureMap>> {
    let mut g = Graph::new();
    let b = codec.params.bind_frozen(&mut g);
    let x = g.constant(image.clone());
    let t = codec.forward(&mut g, &b, x, |_, s| Ok(s))?;
    layers
        .iter()
        .map(|&l| match l {
            LayerId::Stage(s) if s < NUM_STAGES => FeatureMap::new(l, g.value(t.layers[s])),
            LayerId::Stage(s) => Err(Error::Analysis(format!("no stage {s}"))),
            LayerId::Symbols => {
                let block = SymbolBlock::from_tensor(g.value(t.symbols), codec.cfg.image)?;
                FeatureMap::from_symbols(&block)
            }
        })
        .collect()
}

/// Mean similarity per layer over a probe set.
pub fn probe_similarity<T: Scalar>(
    codec: &Codec<T>,
    images: &[Tensor<T>],
    layers: &[LayerId],
) -> Result<Vec<SimilarityReport>> {
    if images.is_empty() {
        return Err(Error::Analysis("empty probe set".into()));
    }
    let mut sums = vec![0.0; layers.len()];
    let mut last = Vec::new();
    for img in images {
        last = feature_maps(codec, img, layers)?
            .iter()
            .map(avg_cosine_similarity)
            .collect::<Result<Vec<_>>>()?;
        sums.iter_mut().zip(&last).for_each(|(s, r)| *s += r.s);
    }
    Ok(last
        .into_iter()
        .zip(sums)
        .map(|(r, s)| SimilarityReport {
            s: s / images.len() as f64,
            ..r
        })
        .collect())
}

/// Mean Fourier profile per layer over a probe set.
pub fn probe_profiles<T: Scalar>(
    codec: &Codec<T>,
    images: &[Tensor<T>],
    layers: &[LayerId],
) -> Result<Vec<SpectrumProfile>> {
    let mut per_layer: Vec<Vec<SpectrumProfile>> = vec![Vec::new(); layers.len()];
    for img in images {
        for (acc, f) in per_layer.iter_mut().zip(feature_maps(codec, img, layers)?) {
            acc.push(fourier_profile(&f)?);
        }
    }
    per_layer.iter().map(|p| mean_profile(p)).collect()
}
