//! Encoder/decoder assembly from a six-letter architecture string, the
//! symbol projection, and analytic cost and rate accounting.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use num_rational::Ratio;
use semlink_tensor::rng::streams;
use semlink_tensor::{Bindings, Graph, ParamStore, RngStream, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, ConvStage, ConvStageConfig, Cost, Dense, Resample, ViTStageConfig, VitBlock};

pub const NUM_STAGES: usize = 6;

/// Stages `0..ENCODER_STAGES` belong to the encoder.
pub const ENCODER_STAGES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageKind {
    #[serde(rename = "C")]
    Conv,
    #[serde(rename = "V")]
    Vit,
}

impl StageKind {
    pub fn letter(self) -> char {
        match self {
            StageKind::Conv => 'C',
            StageKind::Vit => 'V',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchSpec {
    pub stages: [StageKind; NUM_STAGES],
    pub use_gdn: bool,
}

impl ArchSpec {
    /// Parses `"CCVVCC"` or `"C-C-V-V-C-C"` (case-insensitive).
    pub fn parse(s: &str, use_gdn: bool) -> Result<Self> {
        let letters: Vec<char> = s.chars().filter(|c| !matches!(c, '-' | ' ' | '_')).collect();
        if letters.len() != NUM_STAGES {
            return Err(Error::Config(format!(
                "architecture {s:?} must have {NUM_STAGES} stages, found {}",
                letters.len()
            )));
        }
        let mut stages = [StageKind::Conv; NUM_STAGES];
        for (slot, c) in stages.iter_mut().zip(letters) {
            *slot = match c.to_ascii_uppercase() {
                'C' => StageKind::Conv,
                'V' => StageKind::Vit,
                other => return Err(Error::Config(format!("unknown stage letter {other:?} in {s:?}"))),
            };
        }
        Ok(Self { stages, use_gdn })
    }

    pub fn semvit() -> Self {
        Self::parse("CCVVCC", false).expect("valid literal")
    }

    pub fn deepjscc() -> Self {
        Self::parse("CCCCCC", true).expect("valid literal")
    }

    /// Compact form, e.g. `CCVVCC`.
    pub fn code(&self) -> String {
        self.stages.iter().map(|s| s.letter()).collect()
    }

    /// The ten encoder/decoder placements compared in the architecture study,
    /// each with its GDN setting.
    pub fn study_grid() -> Vec<ArchSpec> {
        [
            ("CCCCCC", true),
            ("CCVCCC", true),
            ("CCVCCC", false),
            ("CVVCCC", true),
            ("CCCVCC", true),
            ("CCCVCC", false),
            ("CCCVVC", true),
            ("CVVVVC", true),
            ("CCVVCC", true),
            ("CCVVCC", false),
        ]
        .into_iter()
        .map(|(s, gdn)| ArchSpec::parse(s, gdn).expect("valid literal"))
        .collect()
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.stages.iter().map(|s| s.letter().to_string()).collect();
        write!(f, "{}", parts.join("-"))
    }
}

impl FromStr for ArchSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s, false)
    }
}

/// `S / (H * W * 3)`.
pub fn bandwidth_ratio(symbols: usize, h: usize, w: usize) -> Ratio<usize> {
    Ratio::new(symbols, h * w * 3)
}

/// Parses `"1/6"` or an integer.
pub fn parse_ratio(s: &str) -> Result<Ratio<usize>> {
    let bad = || Error::Config(format!("bad bandwidth ratio {s:?}"));
    let (n, d) = match s.trim().split_once('/') {
        Some((n, d)) => (
            n.trim().parse().map_err(|_| bad())?,
            d.trim().parse().map_err(|_| bad())?,
        ),
        None => (s.trim().parse().map_err(|_| bad())?, 1),
    };
    if n == 0 || d == 0 {
        return Err(bad());
    }
    Ok(Ratio::new(n, d))
}

/// Full hyperparameter set for building a [`Codec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub arch: ArchSpec,
    /// Channel width of every hidden stage.
    pub width: usize,
    pub kernels: [usize; NUM_STAGES],
    /// Layers (convolutions or ViT blocks) per stage.
    pub depths: [usize; NUM_STAGES],
    pub vit: ViTStageConfig,
    pub image: (usize, usize),
    pub ratio: Ratio<usize>,
}

impl CodecConfig {
    /// Full-size configuration for 32x32 colour images.
    pub fn paper(arch: ArchSpec, ratio: Ratio<usize>) -> Self {
        Self {
            arch,
            width: 256,
            kernels: [9, 5, 9, 5, 9, 5],
            depths: [2, 1, 1, 1, 1, 1],
            vit: ViTStageConfig::new(8, 32, 4),
            image: (32, 32),
            ratio,
        }
    }

    /// Small configuration for 8x8 images that trains in seconds on one core.
    pub fn toy(arch: ArchSpec, ratio: Ratio<usize>) -> Self {
        Self {
            arch,
            width: 32,
            kernels: [3; NUM_STAGES],
            depths: [1; NUM_STAGES],
            vit: ViTStageConfig::new(2, 16, 2),
            image: (8, 8),
            ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image;
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!(
                "image dims {h}x{w} must be positive multiples of 4"
            )));
        }
        if self.vit.embed_dim != self.width {
            return Err(Error::Config(format!(
                "ViT embed dim {} must equal stage width {}",
                self.vit.embed_dim, self.width
            )));
        }
        self.vit.validate()?;
        if self.depths.contains(&0) {
            return Err(Error::Config("every stage needs depth at least 1".into()));
        }
        for &k in &self.kernels {
            if k % 2 == 0 {
                return Err(Error::Config(format!("kernel size {k} must be odd")));
            }
        }
        self.symbol_channels().map(|_| ())
    }

    /// Number of complex symbols `S` per image.
    pub fn symbol_count(&self) -> Result<usize> {
        let values = self.ratio * (self.image.0 * self.image.1 * 3);
        if !values.is_integer() || values.to_integer() == 0 {
            return Err(Error::Config(format!(
                "ratio {} gives a non-integral symbol count for {}x{} images",
                self.ratio, self.image.0, self.image.1
            )));
        }
        Ok(values.to_integer())
    }

    pub fn latent_grid(&self) -> (usize, usize) {
        (self.image.0 / 4, self.image.1 / 4)
    }

    /// Channels of the projection output, `2 S / (h * w)` on the latent grid.
    pub fn symbol_channels(&self) -> Result<usize> {
        let s = self.symbol_count()?;
        let (h, w) = self.latent_grid();
        if (2 * s) % (h * w) != 0 {
            return Err(Error::Config(format!(
                "{s} symbols do not fill a {h}x{w} grid with an integral channel count"
            )));
        }
        Ok(2 * s / (h * w))
    }

    /// Spatial dims at the output of `stage`.
    pub fn stage_grid(&self, stage: usize) -> (usize, usize) {
        let (h, w) = self.image;
        match stage {
            0 | 4 => (h / 2, w / 2),
            1..=3 => (h / 4, w / 4),
            _ => (h, w),
        }
    }

    fn stage_input(&self, stage: usize) -> ((usize, usize), usize) {
        match stage {
            0 => (self.image, 3),
            3 => (self.latent_grid(), self.width),
            s => (self.stage_grid(s - 1), self.width),
        }
    }

    fn stage_resample(stage: usize) -> Resample {
        match stage {
            0 | 1 => Resample::Down2,
            4 | 5 => Resample::Up2,
            _ => Resample::None,
        }
    }

    /// Layer configs of a convolutional stage.
    pub fn conv_layers(&self, stage: usize) -> Vec<ConvStageConfig> {
        let (_, cin) = self.stage_input(stage);
        let depth = self.depths[stage];
        (0..depth)
            .map(|j| {
                let last = stage == NUM_STAGES - 1 && j == depth - 1;
                ConvStageConfig {
                    kernel_size: self.kernels[stage],
                    in_channels: if j == 0 { cin } else { self.width },
                    out_channels: if last { 3 } else { self.width },
                    resample: if j == 0 {
                        Self::stage_resample(stage)
                    } else {
                        Resample::None
                    },
                    use_gdn: self.arch.use_gdn && !last,
                    inverse_gdn: stage >= ENCODER_STAGES,
                    activation: if last { Activation::Sigmoid } else { Activation::Relu },
                }
            })
            .collect()
    }

    /// Strided 3x3 convolution that brings a ViT stage down to its grid.
    fn vit_down_adapter(&self, stage: usize) -> ConvStageConfig {
        let (_, cin) = self.stage_input(stage);
        ConvStageConfig {
            kernel_size: 3,
            in_channels: cin,
            out_channels: self.width,
            resample: Resample::Down2,
            use_gdn: false,
            inverse_gdn: false,
            activation: Activation::None,
        }
    }
}

/// A ViT stage's entry: either a strided conv or nearest upsampling plus a
/// token-wise dense map.
#[derive(Clone, Debug)]
enum Adapter {
    Down(ConvStage),
    Up(Dense),
}

#[derive(Clone, Debug)]
enum Stage {
    Conv(Vec<ConvStage>),
    Vit {
        adapter: Option<Adapter>,
        blocks: Vec<VitBlock>,
        head: Option<Dense>,
    },
}

/// Per-stage cost line of a [`CostReport`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub param_count: u64,
    pub flop_count: u64,
    pub stages: Vec<StageCost>,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.flop_count as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.param_count as f64 / 1e6
    }
}

/// Analytic parameter and FLOP count of one forward pass (encoder plus
/// decoder) without building the network. Activations, softmax, layer norm
/// and residual additions are not counted.
pub fn count_cost(cfg: &CodecConfig) -> Result<CostReport> {
    cfg.validate()?;
    let mut stages = Vec::new();
    let mut push = |name: String, c: Cost| {
        stages.push(StageCost {
            name,
            params: c.params,
            flops: c.flops,
        })
    };
    let c_sym = cfg.symbol_channels()?;
    let (lh, lw) = cfg.latent_grid();
    for s in 0..NUM_STAGES {
        let (grid_in, _) = cfg.stage_input(s);
        let grid = cfg.stage_grid(s);
        let mut c = Cost::default();
        match cfg.arch.stages[s] {
            StageKind::Conv => {
                let mut g = grid_in;
                for layer in cfg.conv_layers(s) {
                    c += layer.cost(g);
                    g = layer.output_dims(g);
                }
            }
            StageKind::Vit => {
                match CodecConfig::stage_resample(s) {
                    Resample::Down2 => c += cfg.vit_down_adapter(s).cost(grid_in),
                    Resample::Up2 => c += Dense::cost(cfg.width, cfg.width, true, grid.0 * grid.1),
                    Resample::None => {}
                }
                for _ in 0..cfg.depths[s] {
                    c += VitBlock::cost(&cfg.vit, grid);
                }
                if s == NUM_STAGES - 1 {
                    c += Dense::cost(cfg.width, 3, true, grid.0 * grid.1);
                }
            }
        }
        push(format!("layer{s}"), c);
        if s == ENCODER_STAGES - 1 {
            push("projection".into(), Dense::cost(cfg.width, c_sym, true, lh * lw));
            push("deprojection".into(), Dense::cost(c_sym, cfg.width, true, lh * lw));
        }
    }
    Ok(CostReport {
        param_count: stages.iter().map(|s| s.params).sum(),
        flop_count: stages.iter().map(|s| s.flops).sum(),
        stages,
    })
}

/// Complex baseband symbols, interleaved `[I0, Q0, I1, Q1, ...]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolBlock {
    pub iq: Vec<f64>,
    pub source_dims: (usize, usize),
    /// Set when normalization met an all-zero input.
    #[serde(default)]
    pub zero_power: bool,
}

impl SymbolBlock {
    pub fn new(iq: Vec<f64>, source_dims: (usize, usize)) -> Result<Self> {
        if iq.len() % 2 != 0 {
            return Err(Error::Config(format!("odd I/Q length {}", iq.len())));
        }
        Ok(Self {
            iq,
            source_dims,
            zero_power: false,
        })
    }

    pub fn from_complex(symbols: &[Complex64], source_dims: (usize, usize)) -> Self {
        Self {
            iq: symbols.iter().flat_map(|c| [c.re, c.im]).collect(),
            source_dims,
            zero_power: false,
        }
    }

    /// Number of complex symbols.
    pub fn len(&self) -> usize {
        self.iq.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.iq.is_empty()
    }

    pub fn get(&self, i: usize) -> Complex64 {
        Complex64::new(self.iq[2 * i], self.iq[2 * i + 1])
    }

    pub fn to_complex(&self) -> Vec<Complex64> {
        self.iq.chunks(2).map(|p| Complex64::new(p[0], p[1])).collect()
    }

    pub fn mean_power(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.iq.iter().map(|v| v * v).sum::<f64>() / self.len() as f64
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64([self.len(), 2], &self.iq).expect("even length")
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, source_dims: (usize, usize)) -> Result<Self> {
        Self::new(t.data().iter().map(|v| v.as_f64()).collect(), source_dims)
    }

    /// Rescales to unit mean power: `s * sqrt(S / sum |s|^2)`. An all-zero
    /// input stays zero and sets `zero_power`.
    pub fn power_normalize(mut self) -> Self {
        let energy: f64 = self.iq.iter().map(|v| v * v).sum();
        if energy > 0.0 {
            let c = (self.len() as f64 / energy).sqrt();
            self.iq.iter_mut().for_each(|v| *v *= c);
            self.zero_power = false;
        } else {
            self.zero_power = true;
        }
        self
    }
}

/// Graph values produced by one end-to-end pass.
pub struct Trace {
    /// Output of each stage, `[H, W, C]`; the last one is the image.
    pub layers: Vec<Var>,
    /// Attention probabilities of the last block of each ViT stage.
    pub attn: Vec<Option<Vec<Var>>>,
    /// Power-normalized transmitted symbols, `[S, 2]`.
    pub symbols: Var,
    /// Symbols after the channel closure.
    pub received: Var,
    pub image: Var,
}

/// Encoder half of a [`Trace`].
pub struct EncoderTrace {
    pub layers: Vec<Var>,
    pub attn: Vec<Option<Vec<Var>>>,
    pub symbols: Var,
}

pub struct DecoderTrace {
    pub layers: Vec<Var>,
    pub attn: Vec<Option<Vec<Var>>>,
    pub image: Var,
}

/// Assembled encoder and decoder with their parameters.
#[derive(Clone, Debug)]
pub struct Codec<T: Scalar> {
    pub cfg: CodecConfig,
    pub params: ParamStore<T>,
    stages: Vec<Stage>,
    projection: Dense,
    deprojection: Dense,
}

impl<T: Scalar> Codec<T> {
    /// Builds and initializes a codec from the `INIT` stream of `seed`.
    pub fn build(cfg: CodecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStream::new(seed, streams::INIT).rng();
        let mut params = ParamStore::new();
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut projection = None;
        let mut deprojection = None;
        let c_sym = cfg.symbol_channels()?;
        for s in 0..NUM_STAGES {
            let name = format!("layer{s}");
            if s == ENCODER_STAGES {
                deprojection = Some(Dense::new(
                    &mut params,
                    "deprojection",
                    c_sym,
                    cfg.width,
                    true,
                    &mut rng,
                ));
            }
            let stage = match cfg.arch.stages[s] {
                StageKind::Conv => Stage::Conv(
                    cfg.conv_layers(s)
                        .into_iter()
                        .enumerate()
                        .map(|(j, lc)| ConvStage::new(&mut params, &format!("{name}.conv{j}"), lc, &mut rng))
                        .collect::<Result<_>>()?,
                ),
                StageKind::Vit => {
                    let adapter = match CodecConfig::stage_resample(s) {
                        Resample::Down2 => Some(Adapter::Down(ConvStage::new(
                            &mut params,
                            &format!("{name}.down"),
                            cfg.vit_down_adapter(s),
                            &mut rng,
                        )?)),
                        Resample::Up2 => Some(Adapter::Up(Dense::new(
                            &mut params,
                            &format!("{name}.up"),
                            cfg.width,
                            cfg.width,
                            true,
                            &mut rng,
                        ))),
                        Resample::None => None,
                    };
                    let grid = cfg.stage_grid(s);
                    let blocks = (0..cfg.depths[s])
                        .map(|j| {
                            VitBlock::new(
                                &mut params,
                                &format!("{name}.block{j}"),
                                cfg.vit.clone(),
                                grid,
                                &mut rng,
                            )
                        })
                        .collect::<Result<_>>()?;
                    let head = (s == NUM_STAGES - 1)
                        .then(|| Dense::new(&mut params, &format!("{name}.head"), cfg.width, 3, true, &mut rng));
                    Stage::Vit { adapter, blocks, head }
                }
            };
            stages.push(stage);
            if s == ENCODER_STAGES - 1 {
                projection = Some(Dense::new(&mut params, "projection", cfg.width, c_sym, true, &mut rng));
            }
        }
        Ok(Self {
            cfg,
            params,
            stages,
            projection: projection.expect("encoder has stages"),
            deprojection: deprojection.expect("decoder has stages"),
        })
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Codec<U> {
        Codec {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            stages: self.stages.clone(),
            projection: self.projection.clone(),
            deprojection: self.deprojection.clone(),
        }
    }

    pub fn symbol_count(&self) -> usize {
        self.cfg.symbol_count().expect("validated at build")
    }

    pub fn cost(&self) -> CostReport {
        count_cost(&self.cfg).expect("validated at build")
    }

    fn run_stage(&self, g: &mut Graph<T>, b: &Bindings, s: usize, x: Var) -> Result<(Var, Option<Vec<Var>>)> {
        match &self.stages[s] {
            Stage::Conv(layers) => {
                let mut x = x;
                for l in layers {
                    x = l.forward(g, b, x)?;
                }
                Ok((x, None))
            }
            Stage::Vit { adapter, blocks, head } => {
                let mut x = match adapter {
                    Some(Adapter::Down(conv)) => conv.forward(g, b, x)?,
                    Some(Adapter::Up(dense)) => {
                        let u = g.upsample2(x)?;
                        dense.forward(g, b, u)?
                    }
                    None => x,
                };
                let mut attn = Vec::new();
                for blk in blocks {
                    let o = blk.forward(g, b, x)?;
                    x = o.out;
                    attn = o.attn;
                }
                if let Some(head) = head {
                    let y = head.forward(g, b, x)?;
                    x = g.sigmoid(y);
                }
                Ok((x, Some(attn)))
            }
        }
    }

    /// Encoder on an `[H, W, 3]` image variable.
    pub fn encode_graph(&self, g: &mut Graph<T>, b: &Bindings, image: Var) -> Result<EncoderTrace> {
        let want = [self.cfg.image.0, self.cfg.image.1, 3];
        if g.shape(image) != want {
            return Err(Error::Dimension {
                context: "encoder input",
                expected: want.iter().product(),
                actual: g.shape(image).iter().product(),
            });
        }
        let mut x = image;
        let mut layers = Vec::with_capacity(ENCODER_STAGES);
        let mut attn = Vec::with_capacity(ENCODER_STAGES);
        for s in 0..ENCODER_STAGES {
            let (y, a) = self.run_stage(g, b, s, x)?;
            layers.push(y);
            attn.push(a);
            x = y;
        }
        let feat = self.projection.forward(g, b, x)?;
        let raw = g.reshape(feat, [self.symbol_count(), 2])?;
        let symbols = g.power_normalize(raw)?;
        Ok(EncoderTrace { layers, attn, symbols })
    }

    /// Decoder on `[S, 2]` received symbols.
    pub fn decode_graph(&self, g: &mut Graph<T>, b: &Bindings, received: Var) -> Result<DecoderTrace> {
        let s = self.symbol_count();
        let got = g.value(received).len();
        if got != 2 * s {
            return Err(Error::Dimension {
                context: "decoder symbols",
                expected: 2 * s,
                actual: got,
            });
        }
        let (lh, lw) = self.cfg.latent_grid();
        let c_sym = self.cfg.symbol_channels()?;
        let grid = g.reshape(received, [lh, lw, c_sym])?;
        let mut x = self.deprojection.forward(g, b, grid)?;
        let mut layers = Vec::new();
        let mut attn = Vec::new();
        for st in ENCODER_STAGES..NUM_STAGES {
            let (y, a) = self.run_stage(g, b, st, x)?;
            layers.push(y);
            attn.push(a);
            x = y;
        }
        Ok(DecoderTrace { layers, attn, image: x })
    }

    /// Encoder, `channel`, decoder on one graph.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        b: &Bindings,
        image: Var,
        channel: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
    ) -> Result<Trace> {
        let enc = self.encode_graph(g, b, image)?;
        let received = channel(g, enc.symbols)?;
        let dec = self.decode_graph(g, b, received)?;
        let mut layers = enc.layers;
        layers.extend(dec.layers);
        let mut attn = enc.attn;
        attn.extend(dec.attn);
        Ok(Trace {
            layers,
            attn,
            symbols: enc.symbols,
            received,
            image: dec.image,
        })
    }

    /// Inference-only encode of an `[H, W, 3]` image in `[0, 1]`.
    pub fn encode(&self, image: &Tensor<T>) -> Result<SymbolBlock> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let x = g.constant(image.clone());
        let enc = self.encode_graph(&mut g, &b, x)?;
        let mut block = SymbolBlock::from_tensor(g.value(enc.symbols), self.cfg.image)?;
        block.zero_power = block.iq.iter().all(|&v| v == 0.0);
        Ok(block)
    }

    /// Inference-only decode to an `[H, W, 3]` image in `[0, 1]`.
    pub fn decode(&self, symbols: &SymbolBlock) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let y = g.constant(symbols.to_tensor());
        let dec = self.decode_graph(&mut g, &b, y)?;
        Ok(g.value(dec.image).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_round_trips() {
        for a in ArchSpec::study_grid() {
            assert_eq!(ArchSpec::parse(&a.to_string(), a.use_gdn).unwrap(), a);
            assert_eq!(ArchSpec::parse(&a.code(), a.use_gdn).unwrap(), a);
        }
        assert!(ArchSpec::parse("CCVVC", false).is_err());
        assert!(ArchSpec::parse("CCXVCC", false).is_err());
        assert_eq!(ArchSpec::semvit().to_string(), "C-C-V-V-C-C");
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!(parse_ratio("1/6").unwrap(), Ratio::new(1, 6));
        assert_eq!(parse_ratio(" 2 / 12 ").unwrap(), Ratio::new(1, 6));
        assert!(parse_ratio("0/3").is_err());
        assert!(parse_ratio("x").is_err());
    }

    #[test]
    fn power_normalize_examples() {
        let s = SymbolBlock::new(vec![1.0, 0.0, 1.0, 0.0], (1, 1))
            .unwrap()
            .power_normalize();
        assert_eq!(s.iq, vec![1.0, 0.0, 1.0, 0.0]);
        let s = SymbolBlock::new(vec![2.0, 0.0], (1, 1)).unwrap().power_normalize();
        assert_eq!(s.iq, vec![1.0, 0.0]);
        let z = SymbolBlock::new(vec![0.0; 4], (1, 1)).unwrap().power_normalize();
        assert!(z.zero_power && z.iq.iter().all(|&v| v == 0.0));
    }
}
