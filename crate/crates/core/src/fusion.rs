//! Residual modules and the per-level dual-branch encoding step.
//!
//! Three residual variants are supported:
//!
//! * [`FusionVariant::PlainResidual`]: `relu(E(x) + skip(x))`, the classic
//!   residual unit on the main (post-contrast) branch only.
//! * [`FusionVariant::DirectAdd`]: `relu(E(x_main) + E(x_aux))`, where the
//!   auxiliary (pre-contrast) features take the place of the identity skip.
//! * [`FusionVariant::WeightedAdd`]: as `DirectAdd`, but the auxiliary
//!   features first pass through a learned 1×1×1 channel mix.
//!
//! `E` is an [`EncodingBlock`]; one block is shared by both branches at a
//! given level, so the two streams are encoded with identical weights.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::tensor::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    PlainResidual,
    DirectAdd,
    WeightedAdd,
}

impl FusionVariant {
    pub fn uses_aux(self) -> bool {
        !matches!(self, FusionVariant::PlainResidual)
    }

    pub fn short_name(self) -> &'static str {
        match self {
            FusionVariant::PlainResidual => "plain",
            FusionVariant::DirectAdd => "direct",
            FusionVariant::WeightedAdd => "weighted",
        }
    }
}

impl std::str::FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" | "plain_residual" => Ok(FusionVariant::PlainResidual),
            "direct" | "direct_add" => Ok(FusionVariant::DirectAdd),
            "weighted" | "weighted_add" => Ok(FusionVariant::WeightedAdd),
            other => Err(Error::Config(format!("unknown fusion variant `{other}`"))),
        }
    }
}

/// He-normal initialization (`std = sqrt(2 / fan_in)`).
pub(crate) fn he_normal<T: Real, R: Rng>(rng: &mut R, shape: Vec<usize>) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    Tensor::from_fn(shape, |_| T::from_f64(normal.sample(rng)))
}

/// Two 3×3×3 convolutions with instance norm:
/// `E(x) = norm2(conv2(relu(norm1(conv1(x)))))`.
///
/// The block-final activation is left to the caller so fusion can happen
/// before it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodingBlock {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl EncodingBlock {
    pub fn new(prefix: impl Into<String>, in_channels: usize, out_channels: usize) -> Self {
        Self {
            prefix: prefix.into(),
            in_channels,
            out_channels,
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn param_names(&self) -> Vec<String> {
        [
            "conv1.weight",
            "conv1.bias",
            "norm1.gamma",
            "norm1.beta",
            "conv2.weight",
            "conv2.bias",
            "norm2.gamma",
            "norm2.beta",
        ]
        .iter()
        .map(|l| self.name(l))
        .collect()
    }

    /// Scalar parameter count of a block with the given channel counts.
    pub fn scalar_count(in_channels: usize, out_channels: usize) -> usize {
        let (i, o) = (in_channels, out_channels);
        (27 * i * o + o) + 2 * o + (27 * o * o + o) + 2 * o
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let (i, o) = (self.in_channels, self.out_channels);
        store.insert(
            self.name("conv1.weight"),
            he_normal(rng, vec![o, i, 3, 3, 3]),
            true,
        )?;
        store.insert(self.name("conv1.bias"), Tensor::zeros(vec![o]), true)?;
        store.insert(
            self.name("norm1.gamma"),
            Tensor::full(vec![o], T::one()),
            true,
        )?;
        store.insert(self.name("norm1.beta"), Tensor::zeros(vec![o]), true)?;
        store.insert(
            self.name("conv2.weight"),
            he_normal(rng, vec![o, o, 3, 3, 3]),
            true,
        )?;
        store.insert(self.name("conv2.bias"), Tensor::zeros(vec![o]), true)?;
        store.insert(
            self.name("norm2.gamma"),
            Tensor::full(vec![o], T::one()),
            true,
        )?;
        store.insert(self.name("norm2.beta"), Tensor::zeros(vec![o]), true)?;
        Ok(())
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let c_in = g.value(x).shape().get(1).copied().unwrap_or(0);
        if c_in != self.in_channels {
            return Err(Error::shape(
                "encoding_block",
                "channels",
                self.in_channels,
                c_in,
            ));
        }
        let w1 = g.param(store, &self.name("conv1.weight"))?;
        let b1 = g.param(store, &self.name("conv1.bias"))?;
        let g1 = g.param(store, &self.name("norm1.gamma"))?;
        let be1 = g.param(store, &self.name("norm1.beta"))?;
        let w2 = g.param(store, &self.name("conv2.weight"))?;
        let b2 = g.param(store, &self.name("conv2.bias"))?;
        let g2 = g.param(store, &self.name("norm2.gamma"))?;
        let be2 = g.param(store, &self.name("norm2.beta"))?;

        let h = g.conv3d(x, w1, Some(b1), 1, 1)?;
        let h = g.instance_norm(h, g1, be1, NORM_EPS)?;
        let h = g.relu(h);
        let h = g.conv3d(h, w2, Some(b2), 1, 1)?;
        g.instance_norm(h, g2, be2, NORM_EPS)
    }
}

/// 1×1×1 convolution with bias, used for channel-changing skips.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Projection {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Projection {
    pub fn new(prefix: impl Into<String>, in_channels: usize, out_channels: usize) -> Self {
        Self {
            prefix: prefix.into(),
            in_channels,
            out_channels,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn scalar_count(&self) -> usize {
        self.in_channels * self.out_channels + self.out_channels
    }

    pub fn init<T: Real, R: Rng>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut R,
        trainable: bool,
    ) -> Result<()> {
        let shape = vec![self.out_channels, self.in_channels, 1, 1, 1];
        store.insert(self.weight_name(), he_normal(rng, shape), trainable)?;
        store.insert(
            self.bias_name(),
            Tensor::zeros(vec![self.out_channels]),
            trainable,
        )?;
        Ok(())
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight_name())?;
        let b = g.param(store, &self.bias_name())?;
        g.conv1x1x1(x, w, b)
    }
}

/// The learned 1×1×1 channel mix applied to auxiliary features before they
/// are added to the main branch. Always square: `C -> C`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionWeightBlock {
    pub prefix: String,
    pub channels: usize,
}

/// How a [`FusionWeightBlock`] starts out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionInit {
    /// `W = I, b = 0`: identical to direct addition at step zero.
    #[default]
    Identity,
    /// `W = 0, b = 0`: auxiliary branch silenced at step zero.
    Zero,
}

impl FusionWeightBlock {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        Self {
            prefix: prefix.into(),
            channels,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn scalar_count(channels: usize) -> usize {
        channels * channels + channels
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, init: FusionInit) -> Result<()> {
        let c = self.channels;
        let w = match init {
            FusionInit::Identity => Tensor::from_fn(vec![c, c, 1, 1, 1], |i| {
                if i / c == i % c {
                    T::one()
                } else {
                    T::zero()
                }
            }),
            FusionInit::Zero => Tensor::zeros(vec![c, c, 1, 1, 1]),
        };
        store.insert(self.weight_name(), w, true)?;
        store.insert(self.bias_name(), Tensor::zeros(vec![c]), true)?;
        Ok(())
    }
}

/// `relu(E(x) + skip(x))`; `skip` is the identity, or `proj` when the block
/// changes the channel count.
pub fn residual_plain<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    block: &EncodingBlock,
    proj: Option<&Projection>,
) -> Result<Var> {
    let needs_proj = block.in_channels != block.out_channels;
    if needs_proj != proj.is_some() {
        return Err(Error::arg(
            "residual_plain",
            format!(
                "projection must be present iff channels change ({} -> {})",
                block.in_channels, block.out_channels
            ),
        ));
    }
    let e = block.forward(g, store, x)?;
    let skip = match proj {
        Some(p) => p.forward(g, store, x)?,
        None => x,
    };
    let h = g.add(e, skip)?;
    Ok(g.relu(h))
}

/// `e_main + x_aux`, with no activation at the junction.
pub fn fuse_direct<T: Real>(g: &mut Graph<T>, e_main: Var, x_aux: Var) -> Result<Var> {
    g.add(e_main, x_aux)
}

/// `e_main + conv1x1x1(x_aux; W, b)`.
pub fn fuse_weighted<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    e_main: Var,
    x_aux: Var,
    fw: &FusionWeightBlock,
) -> Result<Var> {
    let c = g.value(x_aux).shape().get(1).copied().unwrap_or(0);
    if c != fw.channels {
        return Err(Error::shape("fuse_weighted", "channels", fw.channels, c));
    }
    let w = g.param(store, &fw.weight_name())?;
    let b = g.param(store, &fw.bias_name())?;
    let mixed = g.conv1x1x1(x_aux, w, b)?;
    g.add(e_main, mixed)
}

/// Output of one encoder level.
#[derive(Clone, Copy, Debug)]
pub struct LevelOutput {
    /// Fused main-branch features (post activation).
    pub main: Var,
    /// Auxiliary-branch features `E(aux_in)`; absent for `PlainResidual`.
    pub aux: Option<Var>,
    /// Tensor handed to the decoder at this resolution.
    pub skip: Var,
}

/// Applies the shared block to both branches and fuses them per `variant`.
#[allow(clippy::too_many_arguments)]
pub fn encode_level<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    main_in: Var,
    aux_in: Var,
    block: &EncodingBlock,
    proj: Option<&Projection>,
    fw: Option<&FusionWeightBlock>,
    variant: FusionVariant,
) -> Result<LevelOutput> {
    if g.value(main_in).shape() != g.value(aux_in).shape() {
        let (a, b) = (g.value(main_in).len(), g.value(aux_in).len());
        return Err(Error::shape("encode_level", "aux_in", a, b));
    }
    let (main, aux) = match variant {
        FusionVariant::PlainResidual => (residual_plain(g, store, main_in, block, proj)?, None),
        FusionVariant::DirectAdd => {
            let e_main = block.forward(g, store, main_in)?;
            let aux = block.forward(g, store, aux_in)?;
            let h = fuse_direct(g, e_main, aux)?;
            (g.relu(h), Some(aux))
        }
        FusionVariant::WeightedAdd => {
            let fw = fw.ok_or_else(|| {
                Error::arg("encode_level", "WeightedAdd requires a fusion weight block")
            })?;
            let e_main = block.forward(g, store, main_in)?;
            let aux = block.forward(g, store, aux_in)?;
            let h = fuse_weighted(g, store, e_main, aux, fw)?;
            (g.relu(h), Some(aux))
        }
    };
    Ok(LevelOutput {
        main,
        aux,
        skip: main,
    })
}
