//! Differentiable building blocks: convolution stages, GDN, dense layers,
//! relative-position multi-head self-attention and the ViT block.
//!
//! Blocks own [`ParamId`]s into a shared [`ParamStore`] and are evaluated on a
//! caller-supplied [`Graph`] with matching [`Bindings`].

use std::ops::{Add, AddAssign};

use semlink_tensor::{Bindings, Graph, ParamId, ParamStore, Sampler, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Std of the truncated-normal init used for dense, projection and ViT weights.
pub const DENSE_INIT_STD: f64 = 0.02;

const LN_EPS: f64 = 1e-5;

pub fn truncated_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut Sampler) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.truncated_normal(std))).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// He-style uniform init, bound `sqrt(6 / fan_in)`.
pub fn fan_in_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Sampler) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.uniform_range(-bound, bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Parameter and FLOP tally of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

impl Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            params: self.params + o.params,
            flops: self.flops + o.flops,
        }
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resample {
    None,
    Down2,
    Up2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

fn activate<T: Scalar>(g: &mut Graph<T>, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => g.relu(x),
        Activation::Sigmoid => g.sigmoid(x),
        Activation::None => x,
    }
}

/// Fully connected layer over the last axis of any-rank input.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Dense {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut Sampler,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            truncated_normal(&[d_in, d_out], DENSE_INIT_STD, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([d_out])));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bindings, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let last = *shape.last().unwrap_or(&0);
        if last != self.d_in {
            return Err(Error::Dimension {
                context: "dense input",
                expected: self.d_in,
                actual: last,
            });
        }
        let rows = shape.iter().product::<usize>() / self.d_in;
        let flat = g.reshape(x, [rows, self.d_in])?;
        let mut y = g.matmul(flat, b[self.weight])?;
        if let Some(bias) = self.bias {
            y = g.add_bias(y, b[bias])?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = self.d_out;
        Ok(g.reshape(y, out_shape)?)
    }

    /// Cost when applied at `positions` tokens.
    pub fn cost(d_in: usize, d_out: usize, bias: bool, positions: usize) -> Cost {
        Cost {
            params: (d_in * d_out + if bias { d_out } else { 0 }) as u64,
            flops: (2 * positions * d_in * d_out) as u64,
        }
    }
}

/// GDN (or IGDN when `inverse`) with a full `gamma` matrix.
#[derive(Clone, Debug)]
pub struct GdnLayer {
    pub beta: ParamId,
    pub gamma: ParamId,
    pub inverse: bool,
}

impl GdnLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, inverse: bool) -> Self {
        let beta = store.add(format!("{name}.beta"), Tensor::ones([channels]));
        let gamma = store.add(
            format!("{name}.gamma"),
            Tensor::<T>::eye(channels).map(|v| v * T::of(0.1)),
        );
        Self { beta, gamma, inverse }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bindings, x: Var) -> Result<Var> {
        Ok(g.gdn(x, b[self.beta], b[self.gamma], self.inverse)?)
    }

    pub fn cost(channels: usize, positions: usize) -> Cost {
        Cost {
            params: (channels * channels + channels) as u64,
            flops: (2 * positions * channels * channels) as u64,
        }
    }
}

/// One convolution layer with optional resampling, GDN and activation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStageConfig {
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub resample: Resample,
    pub use_gdn: bool,
    /// IGDN instead of GDN (decoder side).
    pub inverse_gdn: bool,
    pub activation: Activation,
}

impl ConvStageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("conv channels must be at least 1".into()));
        }
        Ok(())
    }

    pub fn output_dims(&self, (h, w): (usize, usize)) -> (usize, usize) {
        match self.resample {
            Resample::None => (h, w),
            Resample::Down2 => (h.div_ceil(2), w.div_ceil(2)),
            Resample::Up2 => (2 * h, 2 * w),
        }
    }

    pub fn cost(&self, input: (usize, usize)) -> Cost {
        let (ho, wo) = self.output_dims(input);
        let k2 = self.kernel_size * self.kernel_size;
        let mut c = Cost {
            params: (k2 * self.in_channels * self.out_channels + self.out_channels) as u64,
            flops: (2 * ho * wo * k2 * self.in_channels * self.out_channels) as u64,
        };
        if self.use_gdn {
            c += GdnLayer::cost(self.out_channels, ho * wo);
        }
        c
    }
}

#[derive(Clone, Debug)]
pub struct ConvStage {
    pub cfg: ConvStageConfig,
    pub kernel: ParamId,
    pub bias: ParamId,
    pub gdn: Option<GdnLayer>,
}

impl ConvStage {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: ConvStageConfig,
        rng: &mut Sampler,
    ) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel_size;
        let fan_in = k * k * cfg.in_channels;
        let kernel = store.add(
            format!("{name}.kernel"),
            fan_in_uniform(&[k, k, cfg.in_channels, cfg.out_channels], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cfg.out_channels]));
        let gdn = cfg
            .use_gdn
            .then(|| GdnLayer::new(store, &format!("{name}.gdn"), cfg.out_channels, cfg.inverse_gdn));
        Ok(Self { cfg, kernel, bias, gdn })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bindings, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[2] != self.cfg.in_channels {
            return Err(Error::Dimension {
                context: "conv stage channels",
                expected: self.cfg.in_channels,
                actual: shape.last().copied().unwrap_or(0),
            });
        }
        let (x, stride) = match self.cfg.resample {
            Resample::Up2 => (g.upsample2(x)?, 1),
            Resample::Down2 => (x, 2),
            Resample::None => (x, 1),
        };
        let y = g.conv2d(x, b[self.kernel], stride)?;
        let mut y = g.add_bias(y, b[self.bias])?;
        if let Some(gdn) = &self.gdn {
            y = gdn.forward(g, b, y)?;
        }
        Ok(activate(g, y, self.cfg.activation))
    }
}

/// How attention logits are scaled before the softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnScale {
    /// Divide by `sqrt(D_in)`.
    #[default]
    EmbedDim,
    /// Divide by `sqrt(D_h)`.
    HeadDim,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTStageConfig {
    pub num_heads: usize,
    pub dims_per_head: usize,
    pub mlp_expansion: usize,
    pub embed_dim: usize,
    #[serde(default)]
    pub attn_scale: AttnScale,
}

impl ViTStageConfig {
    pub fn new(num_heads: usize, dims_per_head: usize, mlp_expansion: usize) -> Self {
        Self {
            num_heads,
            dims_per_head,
            mlp_expansion,
            embed_dim: num_heads * dims_per_head,
            attn_scale: AttnScale::EmbedDim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads * self.dims_per_head != self.embed_dim {
            return Err(Error::Config(format!(
                "heads x dims per head = {} x {} does not equal embed dim {}",
                self.num_heads, self.dims_per_head, self.embed_dim
            )));
        }
        if self.num_heads == 0 || self.mlp_expansion == 0 {
            return Err(Error::Config("heads and mlp expansion must be at least 1".into()));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        let d = match self.attn_scale {
            AttnScale::EmbedDim => self.embed_dim,
            AttnScale::HeadDim => self.dims_per_head,
        };
        1.0 / (d as f64).sqrt()
    }
}

/// Flat indices into a `(2H-1) x (2W-1)` table for every (query, key) pair of
/// an `H x W` grid, row-major over `[N, N]`.
pub fn rel_pos_index(h: usize, w: usize) -> Vec<usize> {
    let n = h * w;
    let tw = 2 * w - 1;
    let mut idx = Vec::with_capacity(n * n);
    for q in 0..n {
        let (r1, c1) = (q / w, q % w);
        for k in 0..n {
            let (r2, c2) = (k / w, k % w);
            idx.push((r1 + h - 1 - r2) * tw + (c1 + w - 1 - c2));
        }
    }
    idx
}

/// Expands a `(2H-1) x (2W-1)` table into the `N x N` bias `P`.
pub fn rel_pos_lookup<T: Scalar>(table: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let expected = (2 * h - 1) * (2 * w - 1);
    if table.len() != expected {
        return Err(Error::Dimension {
            context: "relative position table",
            expected,
            actual: table.len(),
        });
    }
    let n = h * w;
    let data = rel_pos_index(h, w).into_iter().map(|i| table.data()[i]).collect();
    Ok(Tensor::new([n, n], data)?)
}

/// Learnable per-head relative-position bias for an `H x W` grid.
#[derive(Clone, Debug)]
pub struct RelPosTable {
    pub table: ParamId,
    pub heads: usize,
    pub h: usize,
    pub w: usize,
}

impl RelPosTable {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, heads: usize, h: usize, w: usize) -> Self {
        let cells = (2 * h - 1) * (2 * w - 1);
        let table = store.add(format!("{name}.rel_pos"), Tensor::zeros([heads, cells]));
        Self { table, heads, h, w }
    }

    pub fn cells(&self) -> usize {
        (2 * self.h - 1) * (2 * self.w - 1)
    }

    /// `P` for `head`, shaped `[N, N]`.
    pub fn lookup<T: Scalar>(&self, g: &mut Graph<T>, b: &Bindings, head: usize) -> Result<Var> {
        let n = self.h * self.w;
        let off = head * self.cells();
        let idx = rel_pos_index(self.h, self.w).into_iter().map(|i| i + off).collect();
        Ok(g.gather(b[self.table], idx, [n, n])?)
    }
}

pub struct MhsaOutput {
    pub out: Var,
    /// Softmaxed attention per head, each `[N, N]`.
    pub attn: Vec<Var>,
}

/// Multi-head self-attention with an additive relative-position bias.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub cfg: ViTStageConfig,
    pub w_qry: ParamId,
    pub w_key: ParamId,
    pub w_val: ParamId,
    pub w_out: Dense,
    pub pos: RelPosTable,
}

impl Mhsa {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: ViTStageConfig,
        grid: (usize, usize),
        rng: &mut Sampler,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut mat = |store: &mut ParamStore<T>, n: &str| {
            store.add(format!("{name}.{n}"), truncated_normal(&[d, d], DENSE_INIT_STD, rng))
        };
        let w_qry = mat(store, "w_qry");
        let w_key = mat(store, "w_key");
        let w_val = mat(store, "w_val");
        let w_out = Dense::new(store, &format!("{name}.w_out"), d, d, true, rng);
        let pos = RelPosTable::new(store, name, cfg.num_heads, grid.0, grid.1);
        Ok(Self {
            cfg,
            w_qry,
            w_key,
            w_val,
            w_out,
            pos,
        })
    }

    /// `x` is `[N, D]` with `N = H * W` of the table's grid.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bindings, x: Var) -> Result<MhsaOutput> {
        let shape = g.shape(x).to_vec();
        let n = self.pos.h * self.pos.w;
        if shape.len() != 2 || shape[0] != n || shape[1] != self.cfg.embed_dim {
            return Err(Error::Dimension {
                context: "mhsa tokens",
                expected: n * self.cfg.embed_dim,
                actual: shape.iter().product(),
            });
        }
        let q = g.matmul(x, b[self.w_qry])?;
        let k = g.matmul(x, b[self.w_key])?;
        let v = g.matmul(x, b[self.w_val])?;
        let dh = self.cfg.dims_per_head;
        let scale = T::of(self.cfg.scale());
        let mut heads = Vec::with_capacity(self.cfg.num_heads);
        let mut attn = Vec::with_capacity(self.cfg.num_heads);
        for h in 0..self.cfg.num_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let logits = g.matmul(qh, kt)?;
            let p = self.pos.lookup(g, b, h)?;
            let logits = g.add(logits, p)?;
            let logits = g.scale(logits, scale);
            let a = g.softmax(logits);
            heads.push(g.matmul(a, vh)?);
            attn.push(a);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let out = self.w_out.forward(g, b, cat)?;
        Ok(MhsaOutput { out, attn })
    }

    pub fn cost(cfg: &ViTStageConfig, grid: (usize, usize)) -> Cost {
        let (n, d) = (grid.0 * grid.1, cfg.embed_dim);
        let cells = (2 * grid.0 - 1) * (2 * grid.1 - 1);
        let qkv = Cost {
            params: (3 * d * d) as u64,
            flops: (2 * n * d * 3 * d) as u64,
        };
        // scores plus weighted sum, summed over heads
        let mix = Cost {
            params: (cfg.num_heads * cells) as u64,
            flops: (4 * n * n * d) as u64,
        };
        qkv + mix + Dense::cost(d, d, true, n)
    }
}

pub struct VitBlockOutput {
    pub out: Var,
    pub attn: Vec<Var>,
}

/// Pre-norm transformer block: `x + MHSA(LN(x))`, then `+ MLP(LN(.))`.
#[derive(Clone, Debug)]
pub struct VitBlock {
    pub ln1: (ParamId, ParamId),
    pub mhsa: Mhsa,
    pub ln2: (ParamId, ParamId),
    pub mlp_in: Dense,
    pub mlp_out: Dense,
    pub grid: (usize, usize),
}

impl VitBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: ViTStageConfig,
        grid: (usize, usize),
        rng: &mut Sampler,
    ) -> Result<Self> {
        let d = cfg.embed_dim;
        let hidden = d * cfg.mlp_expansion;
        let ln = |store: &mut ParamStore<T>, n: &str| {
            (
                store.add(format!("{name}.{n}.gain"), Tensor::ones([d])),
                store.add(format!("{name}.{n}.bias"), Tensor::zeros([d])),
            )
        };
        let ln1 = ln(store, "ln1");
        let ln2 = ln(store, "ln2");
        let mhsa = Mhsa::new(store, &format!("{name}.mhsa"), cfg, grid, rng)?;
        let mlp_in = Dense::new(store, &format!("{name}.mlp_in"), d, hidden, true, rng);
        let mlp_out = Dense::new(store, &format!("{name}.mlp_out"), hidden, d, true, rng);
        Ok(Self {
            ln1,
            mhsa,
            ln2,
            mlp_in,
            mlp_out,
            grid,
        })
    }

    /// `x` is `[H, W, C]`; output has the same shape.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bindings, x: Var) -> Result<VitBlockOutput> {
        let shape = g.shape(x).to_vec();
        let d = self.mhsa.cfg.embed_dim;
        if shape != [self.grid.0, self.grid.1, d] {
            return Err(Error::Dimension {
                context: "vit block input",
                expected: self.grid.0 * self.grid.1 * d,
                actual: shape.iter().product(),
            });
        }
        let eps = T::of(LN_EPS);
        let tokens = g.reshape(x, [self.grid.0 * self.grid.1, d])?;
        let h = g.layer_norm(tokens, b[self.ln1.0], b[self.ln1.1], eps)?;
        let MhsaOutput { out, attn } = self.mhsa.forward(g, b, h)?;
        let tokens = g.add(tokens, out)?;
        let h = g.layer_norm(tokens, b[self.ln2.0], b[self.ln2.1], eps)?;
        let h = self.mlp_in.forward(g, b, h)?;
        let h = g.gelu(h);
        let h = self.mlp_out.forward(g, b, h)?;
        let tokens = g.add(tokens, h)?;
        Ok(VitBlockOutput {
            out: g.reshape(tokens, shape)?,
            attn,
        })
    }

    pub fn cost(cfg: &ViTStageConfig, grid: (usize, usize)) -> Cost {
        let n = grid.0 * grid.1;
        let d = cfg.embed_dim;
        let hidden = d * cfg.mlp_expansion;
        let ln = Cost {
            params: (4 * d) as u64,
            flops: 0,
        };
        ln + Mhsa::cost(cfg, grid) + Dense::cost(d, hidden, true, n) + Dense::cost(hidden, d, true, n)
    }
}
