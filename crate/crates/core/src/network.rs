//! Dual-branch encoder-decoder.
//!
//! The main branch carries the post-contrast volume and the auxiliary branch
//! the pre-contrast volume. At each of the `levels` encoder resolutions the
//! shared [`EncodingBlock`] encodes both branches and the configured
//! [`FusionVariant`] merges them; the deepest level doubles as the
//! bottleneck. The decoder only sees the fused main-branch features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    encode_level, he_normal, EncodingBlock, FusionInit, FusionVariant, FusionWeightBlock,
    Projection,
};
use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub variant: FusionVariant,
    pub in_channels_per_branch: usize,
    pub num_classes: usize,
    /// Send the fused main-branch tensor (instead of `E(aux)`) down the
    /// auxiliary branch.
    pub aux_descends_fused: bool,
    pub fusion_init: FusionInit,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 8,
            variant: FusionVariant::WeightedAdd,
            in_channels_per_branch: 1,
            num_classes: 2,
            aux_descends_fused: false,
            fusion_init: FusionInit::Identity,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!(
                "levels must be >= 2, got {}",
                self.levels
            )));
        }
        if self.base_channels == 0 || self.in_channels_per_branch == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "base_channels, in_channels_per_branch and num_classes must be positive".into(),
            ));
        }
        if self
            .base_channels
            .checked_shl(self.levels as u32 - 1)
            .is_none_or(|c| c >> (self.levels - 1) != self.base_channels)
        {
            return Err(Error::Config("channel schedule overflows".into()));
        }
        Ok(())
    }

    /// Channels at encoder level `l`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Required divisor of every spatial input dim.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLevel {
    pub block: EncodingBlock,
    /// Channel-changing skip for `PlainResidual`, present whenever the level
    /// changes the channel count. Exists in every variant so the backbone is
    /// identical; frozen where unused.
    pub proj: Option<Projection>,
    pub fuse: Option<FusionWeightBlock>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLevel {
    pub level: usize,
    pub up_prefix: String,
    pub up_in: usize,
    pub up_out: usize,
    pub block: EncodingBlock,
}

impl DecoderLevel {
    fn up_weight(&self) -> String {
        format!("{}.weight", self.up_prefix)
    }
    fn up_bias(&self) -> String {
        format!("{}.bias", self.up_prefix)
    }
}

/// The assembled model: layer layout plus named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DualBranchSegNet<T: Real = f32> {
    config: ModelConfig,
    pub params: ParamStore<T>,
    encoders: Vec<EncoderLevel>,
    decoders: Vec<DecoderLevel>,
    head: Projection,
}

impl<T: Real> DualBranchSegNet<T> {
    /// Builds and initializes a model deterministically from `config.seed`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let levels = config.levels;

        let mut encoders = Vec::with_capacity(levels);
        for l in 0..levels {
            let c_in = if l == 0 {
                config.in_channels_per_branch
            } else {
                config.channels(l - 1)
            };
            let c = config.channels(l);
            let block = EncodingBlock::new(format!("enc.{l}.block"), c_in, c);
            block.init(&mut params, &mut rng)?;
            let proj = (c_in != c).then(|| Projection::new(format!("enc.{l}.proj"), c_in, c));
            if let Some(p) = &proj {
                p.init(
                    &mut params,
                    &mut rng,
                    config.variant == FusionVariant::PlainResidual,
                )?;
            }
            let fuse = (config.variant == FusionVariant::WeightedAdd)
                .then(|| FusionWeightBlock::new(format!("enc.{l}.fuse"), c));
            if let Some(fw) = &fuse {
                fw.init(&mut params, config.fusion_init)?;
            }
            encoders.push(EncoderLevel { block, proj, fuse });
        }

        let mut decoders = Vec::with_capacity(levels - 1);
        for l in (0..levels - 1).rev() {
            let (c_low, c) = (config.channels(l + 1), config.channels(l));
            let dec = DecoderLevel {
                level: l,
                up_prefix: format!("dec.{l}.up"),
                up_in: c_low,
                up_out: c,
                block: EncodingBlock::new(format!("dec.{l}.block"), 2 * c, c),
            };
            params.insert(
                dec.up_weight(),
                he_normal(&mut rng, vec![c, c_low, 3, 3, 3]),
                true,
            )?;
            params.insert(dec.up_bias(), Tensor::zeros(vec![c]), true)?;
            dec.block.init(&mut params, &mut rng)?;
            decoders.push(dec);
        }

        let head = Projection::new("head", config.channels(0), config.num_classes);
        head.init(&mut params, &mut rng, true)?;

        Ok(Self {
            config,
            params,
            encoders,
            decoders,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoders(&self) -> &[EncoderLevel] {
        &self.encoders
    }

    pub fn decoders(&self) -> &[DecoderLevel] {
        &self.decoders
    }

    pub fn head(&self) -> &Projection {
        &self.head
    }

    /// Exact number of scalar parameters.
    pub fn param_count(&self, trainable_only: bool) -> usize {
        self.params.scalar_count(trainable_only)
    }

    fn check_inputs(&self, pre: &[usize], post: &[usize]) -> Result<()> {
        const OP: &str = "forward";
        if pre.len() != 5 || post.len() != 5 {
            return Err(Error::RankMismatch {
                op: OP,
                expected: 5,
                got: if pre.len() != 5 {
                    pre.len()
                } else {
                    post.len()
                },
            });
        }
        if post[1] != self.config.in_channels_per_branch {
            return Err(Error::shape(
                OP,
                "channels",
                self.config.in_channels_per_branch,
                post[1],
            ));
        }
        for (axis, name) in ["batch", "channels", "depth", "height", "width"]
            .iter()
            .enumerate()
        {
            if pre[axis] != post[axis] {
                return Err(Error::shape(
                    OP,
                    format!("pre {name}"),
                    post[axis],
                    pre[axis],
                ));
            }
        }
        let div = self.config.spatial_divisor();
        for (axis, name) in ["depth", "height", "width"].iter().enumerate() {
            let size = post[2 + axis];
            if !size.is_multiple_of(div) {
                return Err(Error::shape(
                    OP,
                    format!("{name} (must divide by {div})"),
                    size.next_multiple_of(div),
                    size,
                ));
            }
        }
        let deepest: usize = post[2..].iter().map(|s| s / div).product();
        if deepest < 2 {
            return Err(Error::arg(
                OP,
                format!("input leaves a single voxel at the deepest level (divisor {div})"),
            ));
        }
        Ok(())
    }

    /// Records the forward pass into `g` and returns the logits node.
    /// `store` supplies the parameter values (normally `self.params`).
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pre: Var,
        post: Var,
    ) -> Result<Var> {
        self.check_inputs(g.value(pre).shape(), g.value(post).shape())?;
        let variant = self.config.variant;
        let mut main = post;
        let mut aux = pre;
        let mut skips = Vec::with_capacity(self.encoders.len());
        for (l, enc) in self.encoders.iter().enumerate() {
            if l > 0 {
                main = g.down2(main)?;
                if variant.uses_aux() {
                    aux = g.down2(aux)?;
                }
            }
            let aux_in = if variant.uses_aux() { aux } else { main };
            let out = encode_level(
                g,
                store,
                main,
                aux_in,
                &enc.block,
                enc.proj.as_ref(),
                enc.fuse.as_ref(),
                variant,
            )?;
            main = out.main;
            if let Some(a) = out.aux {
                aux = if self.config.aux_descends_fused {
                    out.main
                } else {
                    a
                };
            }
            skips.push(out.skip);
        }

        let mut x = skips.pop().expect("at least two levels");
        for dec in &self.decoders {
            let up = g.up2(x)?;
            let w = g.param(store, &dec.up_weight())?;
            let b = g.param(store, &dec.up_bias())?;
            let up = g.conv3d(up, w, Some(b), 1, 1)?;
            let skip = skips[dec.level];
            let cat = g.concat_channels(up, skip)?;
            let h = dec.block.forward(g, store, cat)?;
            x = g.relu(h);
        }
        self.head.forward(g, store, x)
    }

    /// Logits `[N, K, D, H, W]` for a pre/post pair.
    pub fn forward(&self, pre: &Tensor<T>, post: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let pre_v = g.input(pre.clone())?;
        let post_v = g.input(post.clone())?;
        let logits = self.forward_graph(&mut g, &self.params, pre_v, post_v)?;
        Ok(g.value(logits).clone())
    }

    /// Same architecture and parameter values in another element type.
    pub fn cast<U: Real>(&self) -> DualBranchSegNet<U> {
        DualBranchSegNet {
            config: self.config.clone(),
            params: self.params.cast(),
            encoders: self.encoders.clone(),
            decoders: self.decoders.clone(),
            head: self.head.clone(),
        }
    }
}

/// Per-voxel argmax over classes (ties go to the lower class index).
pub fn argmax_classes<T: Real>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let [n, k, ..] = logits.dims5("argmax")?;
    let vol: usize = logits.shape()[2..].iter().product();
    let x = logits.data();
    let mut out = Vec::with_capacity(n * vol);
    for i in 0..n {
        for v in 0..vol {
            let mut best = 0;
            let mut best_v = x[i * k * vol + v];
            for c in 1..k {
                let val = x[(i * k + c) * vol + v];
                if val > best_v {
                    best_v = val;
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}
