//! Held-out evaluation through a channel.

use rayon::prelude::*;
use semlink::analysis::{psnr, ssim, SSIM_WINDOW};
use semlink::{ChannelConfig, Codec};
use semlink_tensor::rng::streams;
use semlink_tensor::{RngStream, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::report::float;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub index: usize,
    #[serde(with = "float")]
    pub psnr: f64,
    #[serde(with = "float::opt", default)]
    pub ssim: Option<f64>,
    pub deep_fade: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub channel: ChannelConfig,
    pub n_images: usize,
    #[serde(with = "float")]
    pub mean_psnr: f64,
    /// Absent when some image decoded losslessly (infinite PSNR).
    #[serde(with = "float::opt", default)]
    pub std_psnr: Option<f64>,
    /// Absent when images are smaller than the SSIM window.
    #[serde(with = "float::opt", default)]
    pub mean_ssim: Option<f64>,
    #[serde(with = "float::opt", default)]
    pub std_ssim: Option<f64>,
    pub deep_fades: usize,
    pub per_image: Vec<ImageMetrics>,
}

fn mean_std(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.iter().any(|x| x.is_infinite()) {
        return (mean, None);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, Some(var.sqrt()))
}

pub fn ssim_applicable(image: &Tensor<f64>) -> bool {
    image.shape()[0] >= SSIM_WINDOW && image.shape()[1] >= SSIM_WINDOW
}

/// Encode, pass through `channel`, decode and score each image. Image `i`
/// draws its channel realisation from child `i` of the `EVAL` stream, so the
/// result does not depend on evaluation order.
pub fn evaluate<T: Scalar>(
    codec: &Codec<T>,
    images: &[Tensor<f64>],
    channel: &ChannelConfig,
    seed: u64,
) -> Result<EvalReport> {
    channel.validate()?;
    let base = RngStream::new(seed, streams::EVAL);
    let per_image = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let x: Tensor<T> = img.cast();
            let s = codec.encode(&x)?;
            let out = channel.apply(&s, &mut base.child(i as u64).rng())?;
            let y = codec.decode(&out.symbols)?.to_f64();
            Ok(ImageMetrics {
                index: i,
                psnr: psnr(img, &y)?,
                ssim: if ssim_applicable(img) {
                    Some(ssim(img, &y)?)
                } else {
                    None
                },
                deep_fade: out.deep_fade,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let psnrs: Vec<f64> = per_image.iter().map(|m| m.psnr).collect();
    let (mean_psnr, std_psnr) = if psnrs.is_empty() {
        (f64::NAN, None)
    } else {
        mean_std(&psnrs)
    };
    let ssims: Option<Vec<f64>> = per_image.iter().map(|m| m.ssim).collect();
    let (mean_ssim, std_ssim) = match ssims {
        Some(v) if !v.is_empty() => {
            let (m, s) = mean_std(&v);
            (Some(m), s)
        }
        _ => (None, None),
    };
    Ok(EvalReport {
        channel: *channel,
        n_images: images.len(),
        mean_psnr,
        std_psnr,
        mean_ssim,
        std_ssim,
        deep_fades: per_image.iter().filter(|m| m.deep_fade).count(),
        per_image,
    })
}
