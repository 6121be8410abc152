//! Channel and transmit-side hardware impairments on [`SymbolBlock`]s.
//!
//! SNR is referenced to unit mean symbol power. A complex noise sample with
//! total variance `sigma^2 = 10^(-snr/10)` puts `sigma^2 / 2` on each of I and
//! Q. An SNR of `+inf` means a noiseless link.

use num_complex::Complex64;
use semlink_tensor::{Graph, Sampler, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::codec::SymbolBlock;
use crate::error::{Error, Result};

/// Per-component RMS of a unit-power complex signal.
pub const UNIT_COMPONENT_RMS: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// `|h|` below this counts as a deep fade.
pub const DEEP_FADE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Awgn,
    RayleighSlow,
    /// Clip, DAC quantisation and I/Q imbalance, then AWGN.
    Impaired,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Equalization {
    #[default]
    None,
    Perfect,
    /// Left to the frame receiver; the channel itself passes `y` raw.
    Pilot,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImpairmentConfig {
    /// Clip level as a multiple of the unit-power component RMS.
    pub clip_threshold: f64,
    pub dac_bits: u32,
    pub k_i: f64,
    pub k_q: f64,
}

impl Default for ImpairmentConfig {
    fn default() -> Self {
        Self {
            clip_threshold: 3.0,
            dac_bits: 12,
            k_i: 0.0,
            k_q: 0.0,
        }
    }
}

impl ImpairmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(4..=16).contains(&self.dac_bits) {
            return Err(Error::Config(format!("dac_bits {} outside [4, 16]", self.dac_bits)));
        }
        if !(self.clip_threshold > 0.0) {
            return Err(Error::Config(format!(
                "clip_threshold {} must be positive",
                self.clip_threshold
            )));
        }
        if !self.k_i.is_finite() || !self.k_q.is_finite() {
            return Err(Error::Config("I/Q constants must be finite".into()));
        }
        Ok(())
    }

    /// Absolute clip level per component, also the DAC full scale.
    pub fn full_scale(&self) -> f64 {
        self.clip_threshold * UNIT_COMPONENT_RMS
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    /// Written as the string `"inf"` when noiseless, since JSON has no
    /// infinity.
    #[serde(with = "snr_serde")]
    pub snr_db: f64,
    #[serde(default)]
    pub equalization: Equalization,
    /// Only used by [`ChannelKind::Impaired`].
    #[serde(default)]
    pub impairments: ImpairmentConfig,
}

mod snr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            f64::INFINITY => s.serialize_str("inf"),
            v if v.is_finite() => s.serialize_f64(v),
            _ => Err(serde::ser::Error::custom(format!("snr_db {v} is not representable"))),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad snr_db {t:?}"))),
        }
    }
}

impl ChannelConfig {
    pub fn awgn(snr_db: f64) -> Self {
        Self {
            kind: ChannelKind::Awgn,
            snr_db,
            equalization: Equalization::None,
            impairments: ImpairmentConfig::default(),
        }
    }

    pub fn rayleigh(snr_db: f64, equalization: Equalization) -> Self {
        Self {
            kind: ChannelKind::RayleighSlow,
            snr_db,
            equalization,
            impairments: ImpairmentConfig::default(),
        }
    }

    pub fn impaired(snr_db: f64, impairments: ImpairmentConfig) -> Self {
        Self {
            kind: ChannelKind::Impaired,
            snr_db,
            equalization: Equalization::None,
            impairments,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::Config(format!("snr_db {} is not usable", self.snr_db)));
        }
        if self.kind == ChannelKind::Impaired {
            self.impairments.validate()?;
        }
        Ok(())
    }

    /// Runs one block (one image) through the channel.
    pub fn apply(&self, s: &SymbolBlock, rng: &mut Sampler) -> Result<ChannelOutput> {
        self.validate()?;
        match self.kind {
            ChannelKind::Awgn => Ok(ChannelOutput::plain(awgn(s, self.snr_db, rng))),
            ChannelKind::RayleighSlow => {
                let h = sample_rayleigh_gain(rng);
                Ok(rayleigh_with_gain(s, h, self.snr_db, self.equalization, rng).into())
            }
            ChannelKind::Impaired => {
                let tx = impair(s, &self.impairments)?;
                let mut out = ChannelOutput::plain(awgn(&tx.symbols, self.snr_db, rng));
                out.clip_fraction = tx.clip_fraction;
                Ok(out)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelOutput {
    pub symbols: SymbolBlock,
    pub h: Option<Complex64>,
    pub deep_fade: bool,
    pub clip_fraction: f64,
}

impl ChannelOutput {
    fn plain(symbols: SymbolBlock) -> Self {
        Self {
            symbols,
            h: None,
            deep_fade: false,
            clip_fraction: 0.0,
        }
    }
}

/// Per-component noise standard deviation, `sqrt(sigma^2 / 2)`.
pub fn noise_std(snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        (10f64.powf(-snr_db / 10.0) / 2.0).sqrt()
    }
}

/// Real noise samples for `n` components (interleaved I/Q).
pub fn noise_samples(n: usize, snr_db: f64, rng: &mut Sampler) -> Vec<f64> {
    let std = noise_std(snr_db);
    if std == 0.0 {
        return vec![0.0; n];
    }
    (0..n).map(|_| std * rng.normal()).collect()
}

pub fn awgn(s: &SymbolBlock, snr_db: f64, rng: &mut Sampler) -> SymbolBlock {
    let mut out = s.clone();
    if snr_db != f64::INFINITY {
        let std = noise_std(snr_db);
        out.iq.iter_mut().for_each(|v| *v += std * rng.normal());
    }
    out
}

/// `h ~ CN(0, 1)`.
pub fn sample_rayleigh_gain(rng: &mut Sampler) -> Complex64 {
    let c = UNIT_COMPONENT_RMS;
    Complex64::new(c * rng.normal(), c * rng.normal())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayleighOutput {
    pub symbols: SymbolBlock,
    pub h: Complex64,
    /// `|h| < DEEP_FADE`; the draw is kept, not resampled.
    pub deep_fade: bool,
}

impl From<RayleighOutput> for ChannelOutput {
    fn from(r: RayleighOutput) -> Self {
        Self {
            symbols: r.symbols,
            h: Some(r.h),
            deep_fade: r.deep_fade,
            clip_fraction: 0.0,
        }
    }
}

/// Slow fading: one `h` for the whole block.
pub fn rayleigh(s: &SymbolBlock, snr_db: f64, eq: Equalization, rng: &mut Sampler) -> RayleighOutput {
    let h = sample_rayleigh_gain(rng);
    rayleigh_with_gain(s, h, snr_db, eq, rng)
}

/// [`rayleigh`] with a caller-chosen gain.
pub fn rayleigh_with_gain(
    s: &SymbolBlock,
    h: Complex64,
    snr_db: f64,
    eq: Equalization,
    rng: &mut Sampler,
) -> RayleighOutput {
    let faded = SymbolBlock {
        iq: s
            .to_complex()
            .iter()
            .flat_map(|&x| {
                let y = h * x;
                [y.re, y.im]
            })
            .collect(),
        ..s.clone()
    };
    let mut y = awgn(&faded, snr_db, rng);
    let deep_fade = h.norm() < DEEP_FADE;
    if eq == Equalization::Perfect && !deep_fade {
        let inv = h.inv();
        y.iq = y
            .to_complex()
            .iter()
            .flat_map(|&v| {
                let z = v * inv;
                [z.re, z.im]
            })
            .collect();
    }
    RayleighOutput {
        symbols: y,
        h,
        deep_fade,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipOutput {
    pub symbols: SymbolBlock,
    /// Fraction of I and Q components that hit the limit.
    pub clip_fraction: f64,
}

/// Clamps I and Q independently to `+-threshold * UNIT_COMPONENT_RMS`.
pub fn clip_symbols(s: &SymbolBlock, threshold: f64) -> Result<ClipOutput> {
    if !(threshold > 0.0) {
        return Err(Error::Config(format!("clip threshold {threshold} must be positive")));
    }
    let limit = threshold * UNIT_COMPONENT_RMS;
    let mut clipped = 0usize;
    let iq =
        s.iq.iter()
            .map(|&v| {
                if v.abs() > limit {
                    clipped += 1;
                    limit.copysign(v)
                } else {
                    v
                }
            })
            .collect();
    let clip_fraction = if s.iq.is_empty() {
        0.0
    } else {
        clipped as f64 / s.iq.len() as f64
    };
    Ok(ClipOutput {
        symbols: SymbolBlock { iq, ..s.clone() },
        clip_fraction,
    })
}

/// Uniform mid-rise quantiser with `2^bits` levels over `[-full_scale, full_scale]`.
/// Out-of-range inputs saturate at the outermost level.
pub fn quantize_value(v: f64, bits: u32, full_scale: f64) -> f64 {
    let levels = 1i64 << bits;
    let step = 2.0 * full_scale / levels as f64;
    let idx = ((v / step).floor() as i64).clamp(-levels / 2, levels / 2 - 1);
    (idx as f64 + 0.5) * step
}

pub fn quantize_dac(s: &SymbolBlock, bits: u32, full_scale: f64) -> Result<SymbolBlock> {
    if !(1..=24).contains(&bits) {
        return Err(Error::Config(format!("quantizer bits {bits} outside [1, 24]")));
    }
    if !(full_scale > 0.0) {
        return Err(Error::Config(format!("full scale {full_scale} must be positive")));
    }
    Ok(SymbolBlock {
        iq: s.iq.iter().map(|&v| quantize_value(v, bits, full_scale)).collect(),
        ..s.clone()
    })
}

/// `i' = i + k_q q`, `q' = k_i i + q`.
pub fn apply_iq_imbalance(s: &SymbolBlock, k_i: f64, k_q: f64) -> SymbolBlock {
    let mut out = s.clone();
    for p in out.iq.chunks_mut(2) {
        let (i, q) = (p[0], p[1]);
        p[0] = i + k_q * q;
        p[1] = k_i * i + q;
    }
    out
}

/// Transmit-side chain: clip, quantise at the clip level, then I/Q imbalance.
pub fn impair(s: &SymbolBlock, cfg: &ImpairmentConfig) -> Result<ClipOutput> {
    cfg.validate()?;
    let clipped = clip_symbols(s, cfg.clip_threshold)?;
    let q = quantize_dac(&clipped.symbols, cfg.dac_bits, cfg.full_scale())?;
    Ok(ClipOutput {
        symbols: apply_iq_imbalance(&q, cfg.k_i, cfg.k_q),
        clip_fraction: clipped.clip_fraction,
    })
}

/// `10 log10(sum |clean|^2 / sum |noisy - clean|^2)`; `+inf` when they agree.
pub fn empirical_snr(clean: &SymbolBlock, noisy: &SymbolBlock) -> Result<f64> {
    if clean.iq.len() != noisy.iq.len() {
        return Err(Error::Dimension {
            context: "empirical_snr",
            expected: clean.iq.len(),
            actual: noisy.iq.len(),
        });
    }
    let signal: f64 = clean.iq.iter().map(|v| v * v).sum();
    let error: f64 = clean.iq.iter().zip(&noisy.iq).map(|(a, b)| (b - a) * (b - a)).sum();
    if error == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / error).log10())
}

/// Channel as a graph layer for training. Noise, `h` and the impairment
/// residual enter as constants, so gradients reach `s` as the identity
/// (AWGN, impaired) or as multiplication by `h` (Rayleigh).
pub fn graph_channel<T: Scalar>(g: &mut Graph<T>, s: Var, cfg: &ChannelConfig, rng: &mut Sampler) -> Result<Var> {
    cfg.validate()?;
    let shape = g.shape(s).to_vec();
    let n = g.value(s).len();
    let mut y = s;
    match cfg.kind {
        ChannelKind::Awgn => {}
        ChannelKind::RayleighSlow => {
            let h = sample_rayleigh_gain(rng);
            y = g.complex_scale(y, T::of(h.re), T::of(h.im))?;
        }
        ChannelKind::Impaired => {
            let tx = SymbolBlock::from_tensor(g.value(s), (0, 0))?;
            let out = impair(&tx, &cfg.impairments)?.symbols;
            let residual: Vec<f64> = out.iq.iter().zip(&tx.iq).map(|(a, b)| a - b).collect();
            let r = g.constant(Tensor::from_f64(shape.clone(), &residual)?);
            y = g.add(y, r)?;
        }
    }
    if cfg.snr_db != f64::INFINITY {
        let noise = g.constant(Tensor::from_f64(shape, &noise_samples(n, cfg.snr_db, rng))?);
        y = g.add(y, noise)?;
    }
    Ok(y)
}
