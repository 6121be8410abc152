//! Pilot framing, frame detection and receive-side calibration.
//!
//! Frame layout, in symbols:
//!
//! ```text
//! [ head pilot | I-calib burst | Q-calib burst | payload | tail pilot ]
//! ```
//!
//! The head and tail pilots are distinct QPSK sequences; the calibration
//! bursts are BPSK on I only and on Q only, which makes the transmit I/Q
//! imbalance constants identifiable.

use num_complex::Complex64;
use semlink_tensor::rng::streams;
use semlink_tensor::RngStream;
use serde::{Deserialize, Serialize};

use crate::codec::SymbolBlock;
use crate::error::{Error, Result};

pub const DEFAULT_PILOT_LEN: usize = 64;
pub const DEFAULT_CALIB_LEN: usize = 32;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `correct_iq` fails when `|1 - k_i k_q|` is at or below this.
pub const SINGULAR_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PilotConfig {
    pub length: usize,
    pub calib_length: usize,
    pub seed: u64,
    pub threshold: f64,
}

impl Default for PilotConfig {
    fn default() -> Self {
        Self {
            length: DEFAULT_PILOT_LEN,
            calib_length: DEFAULT_CALIB_LEN,
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Known sequences derived from a [`PilotConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct Pilots {
    pub cfg: PilotConfig,
    pub head: Vec<Complex64>,
    pub tail: Vec<Complex64>,
    /// Real BPSK amplitudes sent on I (resp. Q) only.
    pub calib_i: Vec<f64>,
    pub calib_q: Vec<f64>,
}

fn qpsk(stream: RngStream, n: usize) -> Vec<Complex64> {
    let mut r = stream.rng();
    let a = std::f64::consts::FRAC_1_SQRT_2;
    (0..n)
        .map(|_| {
            let bits = r.below(4);
            Complex64::new(if bits & 1 == 0 { a } else { -a }, if bits & 2 == 0 { a } else { -a })
        })
        .collect()
}

fn bpsk(stream: RngStream, n: usize) -> Vec<f64> {
    let mut r = stream.rng();
    (0..n).map(|_| if r.below(2) == 0 { 1.0 } else { -1.0 }).collect()
}

/// Largest off-peak magnitude of the aperiodic autocorrelation.
pub fn max_sidelobe(seq: &[Complex64]) -> f64 {
    (1..seq.len())
        .map(|lag| {
            seq[lag..]
                .iter()
                .zip(seq)
                .map(|(a, b)| a * b.conj())
                .sum::<Complex64>()
                .norm()
        })
        .fold(0.0, f64::max)
}

impl Pilots {
    pub fn new(cfg: PilotConfig) -> Result<Self> {
        if cfg.length < 2 {
            return Err(Error::Config(format!("pilot length {} too short", cfg.length)));
        }
        if !(cfg.threshold > 0.0 && cfg.threshold < 1.0) {
            return Err(Error::Config(format!(
                "detection threshold {} outside (0, 1)",
                cfg.threshold
            )));
        }
        let base = RngStream::new(cfg.seed, streams::PILOT);
        let pilots = Self {
            cfg,
            head: qpsk(base.child(0), cfg.length),
            tail: qpsk(base.child(1), cfg.length),
            calib_i: bpsk(base.child(2), cfg.calib_length),
            calib_q: bpsk(base.child(3), cfg.calib_length),
        };
        for seq in [&pilots.head, &pilots.tail] {
            let side = max_sidelobe(seq);
            if side >= cfg.length as f64 {
                return Err(Error::Config(format!(
                    "pilot sidelobe {side} does not stay below the peak"
                )));
            }
        }
        Ok(pilots)
    }

    pub fn overhead(&self) -> usize {
        2 * self.cfg.length + 2 * self.cfg.calib_length
    }

    pub fn frame_len(&self, payload_len: usize) -> usize {
        self.overhead() + payload_len
    }

    fn payload_start(&self) -> usize {
        self.cfg.length + 2 * self.cfg.calib_length
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub head_pilot: Vec<Complex64>,
    pub calib_i: Vec<Complex64>,
    pub calib_q: Vec<Complex64>,
    pub payload: SymbolBlock,
    pub tail_pilot: Vec<Complex64>,
}

impl Frame {
    pub fn len(&self) -> usize {
        self.head_pilot.len() + self.calib_i.len() + self.calib_q.len() + self.payload.len() + self.tail_pilot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The frame as transmitted, in order.
    pub fn symbols(&self) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(&self.head_pilot);
        out.extend(&self.calib_i);
        out.extend(&self.calib_q);
        out.extend(self.payload.to_complex());
        out.extend(&self.tail_pilot);
        out
    }

    pub fn to_block(&self) -> SymbolBlock {
        SymbolBlock::from_complex(&self.symbols(), self.payload.source_dims)
    }
}

pub fn assemble_frame(payload: &SymbolBlock, p: &Pilots) -> Frame {
    Frame {
        head_pilot: p.head.clone(),
        calib_i: p.calib_i.iter().map(|&a| Complex64::new(a, 0.0)).collect(),
        calib_q: p.calib_q.iter().map(|&a| Complex64::new(0.0, a)).collect(),
        payload: payload.clone(),
        tail_pilot: p.tail.clone(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionResult {
    pub offset: usize,
    pub peak_metric: f64,
    /// Least-squares gain over both pilots at the detected offset.
    pub gain_estimate: Complex64,
}

/// Energy-normalised cross-correlation of the buffer against the head and
/// tail pilots taken together as one template:
/// `|sum conj(p) r| / sqrt(sum |p|^2 * sum |r|^2)`, in `[0, 1]`.
pub fn detect_frame(buffer: &[Complex64], p: &Pilots, payload_len: usize) -> Result<DetectionResult> {
    let frame_len = p.frame_len(payload_len);
    if buffer.len() < frame_len {
        return Err(Error::Dimension {
            context: "detect_frame buffer",
            expected: frame_len,
            actual: buffer.len(),
        });
    }
    let tail_at = p.payload_start() + payload_len;
    let l = p.cfg.length;
    let pilot_energy: f64 = p.head.iter().chain(&p.tail).map(|v| v.norm_sqr()).sum();
    let mut best = DetectionResult {
        offset: 0,
        peak_metric: 0.0,
        gain_estimate: Complex64::new(0.0, 0.0),
    };
    for d in 0..=buffer.len() - frame_len {
        let head = &buffer[d..d + l];
        let tail = &buffer[d + tail_at..d + tail_at + l];
        let corr: Complex64 = p
            .head
            .iter()
            .zip(head)
            .chain(p.tail.iter().zip(tail))
            .map(|(k, r)| k.conj() * r)
            .sum();
        let rx_energy: f64 = head.iter().chain(tail).map(|v| v.norm_sqr()).sum();
        if rx_energy <= f64::MIN_POSITIVE {
            continue;
        }
        let metric = corr.norm() / (pilot_energy * rx_energy).sqrt();
        if metric > best.peak_metric {
            best = DetectionResult {
                offset: d,
                peak_metric: metric,
                gain_estimate: corr / pilot_energy,
            };
        }
    }
    if best.peak_metric < p.cfg.threshold {
        return Err(Error::NoFrame {
            peak: best.peak_metric,
            threshold: p.cfg.threshold,
        });
    }
    Ok(best)
}

/// `<known, rx> / <known, known>`.
pub fn estimate_gain(rx: &[Complex64], known: &[Complex64]) -> Result<Complex64> {
    if rx.len() != known.len() {
        return Err(Error::Dimension {
            context: "estimate_gain",
            expected: known.len(),
            actual: rx.len(),
        });
    }
    let energy: f64 = known.iter().map(|v| v.norm_sqr()).sum();
    if energy == 0.0 {
        return Err(Error::ZeroEnergy("pilot"));
    }
    Ok(known.iter().zip(rx).map(|(k, r)| k.conj() * r).sum::<Complex64>() / energy)
}

/// Projects the leaked component of each calibration burst onto the sent
/// amplitudes: `k_i = <rx_q, x_i> / <x_i, x_i>` over the pure-I burst and
/// `k_q = <rx_i, x_q> / <x_q, x_q>` over the pure-Q burst.
pub fn estimate_iq_constants(
    rx_calib_i: &[Complex64],
    rx_calib_q: &[Complex64],
    known_i: &[f64],
    known_q: &[f64],
) -> Result<(f64, f64)> {
    if rx_calib_i.len() != known_i.len() || rx_calib_q.len() != known_q.len() {
        return Err(Error::Dimension {
            context: "estimate_iq_constants",
            expected: known_i.len() + known_q.len(),
            actual: rx_calib_i.len() + rx_calib_q.len(),
        });
    }
    let ei: f64 = known_i.iter().map(|v| v * v).sum();
    let eq: f64 = known_q.iter().map(|v| v * v).sum();
    if ei == 0.0 || eq == 0.0 {
        return Err(Error::ZeroEnergy("calibration burst"));
    }
    let k_i = rx_calib_i.iter().zip(known_i).map(|(r, x)| r.im * x).sum::<f64>() / ei;
    let k_q = rx_calib_q.iter().zip(known_q).map(|(r, x)| r.re * x).sum::<f64>() / eq;
    Ok((k_i, k_q))
}

fn uncouple(v: &mut [f64], k_i: f64, k_q: f64) -> Result<()> {
    let det = 1.0 - k_i * k_q;
    if det.abs() <= SINGULAR_EPS {
        return Err(Error::Singular(det));
    }
    for p in v.chunks_mut(2) {
        let (i, q) = (p[0], p[1]);
        p[0] = (i - k_q * q) / det;
        p[1] = (q - k_i * i) / det;
    }
    Ok(())
}

/// Inverse of [`crate::channel::apply_iq_imbalance`].
pub fn correct_iq(s: &SymbolBlock, k_i: f64, k_q: f64) -> Result<SymbolBlock> {
    let mut out = s.clone();
    uncouple(&mut out.iq, k_i, k_q)?;
    Ok(out)
}

/// Real 2x2 map `[[a, b], [c, d]]` taking sent `(i, q)` to received `(i, q)`,
/// fitted by least squares on the calibration bursts. Column 0 is the
/// response to the pure-I burst and column 1 to the pure-Q burst, so `c` and
/// `b` are the `k_i` and `k_q` of [`estimate_iq_constants`].
pub fn estimate_iq_matrix(
    rx_calib_i: &[Complex64],
    rx_calib_q: &[Complex64],
    known_i: &[f64],
    known_q: &[f64],
) -> Result<[[f64; 2]; 2]> {
    let (k_i, k_q) = estimate_iq_constants(rx_calib_i, rx_calib_q, known_i, known_q)?;
    let ei: f64 = known_i.iter().map(|v| v * v).sum();
    let eq: f64 = known_q.iter().map(|v| v * v).sum();
    let a = rx_calib_i.iter().zip(known_i).map(|(r, x)| r.re * x).sum::<f64>() / ei;
    let d = rx_calib_q.iter().zip(known_q).map(|(r, x)| r.im * x).sum::<f64>() / eq;
    Ok([[a, k_q], [k_i, d]])
}

fn invert_map(v: &mut [f64], m: [[f64; 2]; 2]) -> Result<()> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() <= SINGULAR_EPS {
        return Err(Error::Singular(det));
    }
    for p in v.chunks_mut(2) {
        let (i, q) = (p[0], p[1]);
        p[0] = (m[1][1] * i - m[0][1] * q) / det;
        p[1] = (m[0][0] * q - m[1][0] * i) / det;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recovered {
    pub payload: SymbolBlock,
    pub detection: DetectionResult,
    /// Pilot gain used for compensation.
    pub gain: Complex64,
    /// Residual I/Q map after gain compensation.
    pub iq_map: [[f64; 2]; 2],
    pub k_i: f64,
    pub k_q: f64,
}

/// Detect, compensate gain, estimate and undo I/Q imbalance, then cut out the
/// payload.
///
/// An imbalance with `k_i = -k_q` is a small rotation and cannot be told apart
/// from the phase of the channel gain, so the pilot gain absorbs part of it.
/// The receiver therefore inverts the full residual 2x2 map measured on the
/// calibration bursts rather than only the two off-diagonal constants.
pub fn recover_symbols(buffer: &[Complex64], p: &Pilots, payload_len: usize) -> Result<Recovered> {
    let detection = detect_frame(buffer, p, payload_len)?;
    let frame = &buffer[detection.offset..detection.offset + p.frame_len(payload_len)];
    let l = p.cfg.length;
    let c = p.cfg.calib_length;
    let start = p.payload_start();
    let gain = detection.gain_estimate;
    if gain.norm() == 0.0 {
        return Err(Error::ZeroEnergy("gain estimate"));
    }
    let inv = gain.inv();
    let calib: Vec<Complex64> = frame[l..start].iter().map(|v| v * inv).collect();
    let iq_map = estimate_iq_matrix(&calib[..c], &calib[c..], &p.calib_i, &p.calib_q)?;
    let mut iq: Vec<f64> = frame[start..start + payload_len]
        .iter()
        .flat_map(|v| {
            let z = v * inv;
            [z.re, z.im]
        })
        .collect();
    invert_map(&mut iq, iq_map)?;
    Ok(Recovered {
        payload: SymbolBlock::new(iq, (0, 0))?,
        detection,
        gain,
        iq_map,
        k_i: iq_map[1][0],
        k_q: iq_map[0][1],
    })
}

/// Little-endian `f32` I/Q pairs, no header.
pub fn to_le_bytes(symbols: &[Complex64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(symbols.len() * 8);
    for s in symbols {
        out.extend_from_slice(&(s.re as f32).to_le_bytes());
        out.extend_from_slice(&(s.im as f32).to_le_bytes());
    }
    out
}

pub fn from_le_bytes(bytes: &[u8]) -> Result<Vec<Complex64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Config(format!(
            "{} bytes is not a whole number of I/Q pairs",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            Complex64::new(re as f64, im as f64)
        })
        .collect())
}
