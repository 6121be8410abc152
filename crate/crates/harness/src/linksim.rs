//! Full link: encode, frame, transport, recover, decode, score.

use num_complex::Complex64;
use semlink::analysis::{psnr, ssim};
use semlink::codec::SymbolBlock;
use semlink::frame::{assemble_frame, recover_symbols};
use semlink::{Codec, PilotConfig, Pilots};
use semlink_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::emulator::Transport;
use crate::error::{Error, Result};
use crate::evaluate::ssim_applicable;
use crate::report::float;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub pilots: PilotConfig,
    /// Transmit amplitude relative to unit symbol power.
    pub amplitude: f64,
    /// Zero symbols sent before and after each frame.
    pub guard: usize,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            pilots: PilotConfig::default(),
            amplitude: 1.0,
            guard: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkImage {
    pub index: usize,
    #[serde(with = "float::opt", default)]
    pub psnr: Option<f64>,
    #[serde(with = "float::opt", default)]
    pub ssim: Option<f64>,
    /// Recovered payload against the transmitted payload.
    #[serde(with = "float::opt", default)]
    pub payload_snr_db: Option<f64>,
    pub offset: Option<usize>,
    pub k_i: Option<f64>,
    pub k_q: Option<f64>,
    /// Detection or transport failure.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub config: LinkConfig,
    pub n_images: usize,
    pub n_failed: usize,
    /// Over successfully recovered images.
    #[serde(with = "float")]
    pub mean_psnr: f64,
    /// Pooled over all recovered payloads: total signal power over total
    /// error power.
    #[serde(with = "float")]
    pub payload_snr_db: f64,
    pub images: Vec<LinkImage>,
}

struct Sample {
    psnr: f64,
    ssim: Option<f64>,
    signal: f64,
    error: f64,
    offset: usize,
    k_i: f64,
    k_q: f64,
}

fn one_image<T: Scalar>(
    codec: &Codec<T>,
    pilots: &Pilots,
    cfg: &LinkConfig,
    transport: &Transport,
    seq: u32,
    image: &Tensor<f64>,
) -> Result<Sample> {
    let tx = codec.encode(&image.cast())?;
    let frame = assemble_frame(&tx, pilots).symbols();
    let zeros = std::iter::repeat(Complex64::default()).take(cfg.guard);
    let burst: Vec<Complex64> = zeros
        .clone()
        .chain(frame.iter().map(|v| v * cfg.amplitude))
        .chain(zeros)
        .collect();
    let rx = transport.transmit(seq, &burst)?;
    let rec = recover_symbols(&rx, pilots, tx.len())?;
    let payload = SymbolBlock {
        source_dims: tx.source_dims,
        ..rec.payload
    };
    let signal: f64 = tx.iq.iter().map(|v| v * v).sum();
    let error: f64 = tx.iq.iter().zip(&payload.iq).map(|(a, b)| (a - b) * (a - b)).sum();
    let out = codec.decode(&payload)?.to_f64();
    Ok(Sample {
        psnr: psnr(image, &out)?,
        ssim: if ssim_applicable(image) {
            Some(ssim(image, &out)?)
        } else {
            None
        },
        signal,
        error,
        offset: rec.detection.offset,
        k_i: rec.k_i,
        k_q: rec.k_q,
    })
}

/// Runs every image through the link with sequence numbers `0..n`. Frame
/// detection and transport failures are recorded per image; other errors
/// abort.
pub fn linksim<T: Scalar>(
    codec: &Codec<T>,
    images: &[Tensor<f64>],
    transport: &Transport,
    cfg: &LinkConfig,
) -> Result<LinkReport> {
    if !(cfg.amplitude > 0.0 && cfg.amplitude.is_finite()) {
        return Err(Error::Config(format!("amplitude {} must be positive", cfg.amplitude)));
    }
    let pilots = Pilots::new(cfg.pilots)?;
    let mut rows = Vec::with_capacity(images.len());
    let (mut sig, mut err, mut psnr_sum, mut ok) = (0.0, 0.0, 0.0, 0usize);
    for (i, img) in images.iter().enumerate() {
        let row = match one_image(codec, &pilots, cfg, transport, i as u32, img) {
            Ok(r) => {
                sig += r.signal;
                err += r.error;
                psnr_sum += r.psnr;
                ok += 1;
                LinkImage {
                    index: i,
                    psnr: Some(r.psnr),
                    ssim: r.ssim,
                    payload_snr_db: Some(10.0 * (r.signal / r.error).log10()),
                    offset: Some(r.offset),
                    k_i: Some(r.k_i),
                    k_q: Some(r.k_q),
                    error: None,
                }
            }
            Err(e @ (Error::Protocol(_) | Error::Core(semlink::Error::NoFrame { .. }))) => LinkImage {
                index: i,
                psnr: None,
                ssim: None,
                payload_snr_db: None,
                offset: None,
                k_i: None,
                k_q: None,
                error: Some(e.to_string()),
            },
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    Ok(LinkReport {
        config: *cfg,
        n_images: images.len(),
        n_failed: images.len() - ok,
        mean_psnr: if ok == 0 { f64::NAN } else { psnr_sum / ok as f64 },
        payload_snr_db: 10.0 * (sig / err).log10(),
        images: rows,
    })
}
