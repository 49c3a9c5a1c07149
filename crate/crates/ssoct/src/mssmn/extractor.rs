//! Feature extractors operating at the reduced (acquisition) scale.
//!
//! The default extractor is RCAN-style: residual groups of residual
//! channel attention blocks under a long skip. A plain-residual variant
//! (same skeleton, no channel attention) serves as the non-attention
//! baseline. Spatial size is preserved throughout.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    Rcan,
    PlainResidual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    /// Feature channels.
    pub f_c: usize,
    /// Residual groups.
    pub n_groups: usize,
    /// Blocks per group.
    pub n_blocks_per_group: usize,
    /// Channel attention bottleneck ratio.
    pub attention_reduction: usize,
    /// Convolution kernel size (odd).
    pub k: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            kind: ExtractorKind::Rcan,
            f_c: 16,
            n_groups: 2,
            n_blocks_per_group: 2,
            attention_reduction: 4,
            k: 3,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.f_c == 0 || self.n_groups == 0 || self.n_blocks_per_group == 0 {
            return Err(Error::InvalidConfig("extractor sizes must be >= 1".into()));
        }
        if self.k % 2 == 0 || self.k == 0 {
            return Err(Error::InvalidConfig(format!("kernel size must be odd, got {}", self.k)));
        }
        if self.attention_reduction == 0 || self.f_c % self.attention_reduction != 0 {
            return Err(Error::InvalidConfig(format!(
                "f_c ({}) must be divisible by attention_reduction ({})",
                self.f_c, self.attention_reduction
            )));
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        (self.k - 1) / 2
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DenseIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockIdx {
    conv1: ConvIdx,
    conv2: ConvIdx,
    attention: Option<(DenseIdx, DenseIdx)>,
}

#[derive(Debug, Clone)]
pub(crate) struct GroupIdx {
    blocks: Vec<BlockIdx>,
    tail: ConvIdx,
}

#[derive(Debug, Clone)]
pub(crate) struct ExtractorIdx {
    shallow: ConvIdx,
    groups: Vec<GroupIdx>,
    trunk: ConvIdx,
}

pub(crate) fn register_conv(
    params: &mut ParamSet,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> ConvIdx {
    let w = params.register_uniform(
        format!("{}.w", name),
        vec![c_out, c_in, k, k],
        c_in * k * k,
        rng,
    );
    let b = params.register_zeros(format!("{}.b", name), vec![c_out]);
    ConvIdx { w, b }
}

pub(crate) fn register_dense(
    params: &mut ParamSet,
    name: &str,
    m: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> DenseIdx {
    let w = params.register_uniform(format!("{}.w", name), vec![m, n], n, rng);
    let b = params.register_zeros(format!("{}.b", name), vec![m]);
    DenseIdx { w, b }
}

impl ExtractorIdx {
    pub fn register(cfg: &ExtractorConfig, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Self {
        let shallow = register_conv(params, "extractor.shallow", cfg.f_c, 1, cfg.k, rng);
        let mut groups = Vec::with_capacity(cfg.n_groups);
        for g in 0..cfg.n_groups {
            let mut blocks = Vec::with_capacity(cfg.n_blocks_per_group);
            for b in 0..cfg.n_blocks_per_group {
                let base = format!("extractor.g{}.b{}", g, b);
                let conv1 = register_conv(params, &format!("{}.conv1", base), cfg.f_c, cfg.f_c, cfg.k, rng);
                let conv2 = register_conv(params, &format!("{}.conv2", base), cfg.f_c, cfg.f_c, cfg.k, rng);
                let attention = match cfg.kind {
                    ExtractorKind::Rcan => {
                        let hidden = cfg.f_c / cfg.attention_reduction;
                        let down = register_dense(params, &format!("{}.ca_down", base), hidden, cfg.f_c, rng);
                        let up = register_dense(params, &format!("{}.ca_up", base), cfg.f_c, hidden, rng);
                        Some((down, up))
                    }
                    ExtractorKind::PlainResidual => None,
                };
                blocks.push(BlockIdx { conv1, conv2, attention });
            }
            let tail = register_conv(params, &format!("extractor.g{}.tail", g), cfg.f_c, cfg.f_c, cfg.k, rng);
            groups.push(GroupIdx { blocks, tail });
        }
        let trunk = register_conv(params, "extractor.trunk", cfg.f_c, cfg.f_c, cfg.k, rng);
        ExtractorIdx { shallow, groups, trunk }
    }

    /// Builds the extractor graph for a `B x 1 x H x W` input, producing a
    /// `B x f_c x H x W` feature map.
    pub fn forward(
        &self,
        cfg: &ExtractorConfig,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
    ) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::shape(
                "extract_features",
                format!("expected B x 1 x H x W input, got {:?}", shape),
            ));
        }
        if shape[2] < cfg.k || shape[3] < cfg.k {
            return Err(Error::shape(
                "extract_features",
                format!("image {}x{} smaller than kernel {}", shape[2], shape[3], cfg.k),
            ));
        }
        let pad = cfg.padding();
        let conv = |tape: &mut Tape, idx: ConvIdx, input: Var| -> Result<Var> {
            let w = tape.param(params, idx.w);
            let b = tape.param(params, idx.b);
            tape.conv2d(input, w, b, pad)
        };

        let shallow = conv(tape, self.shallow, x)?;
        let mut t = shallow;
        for group in &self.groups {
            let group_in = t;
            for block in &group.blocks {
                let block_in = t;
                let mut y = conv(tape, block.conv1, t)?;
                y = tape.relu(y);
                y = conv(tape, block.conv2, y)?;
                if let Some((down, up)) = &block.attention {
                    let pooled = tape.global_avg_pool(y)?;
                    let dw = tape.param(params, down.w);
                    let db = tape.param(params, down.b);
                    let mut s = tape.dense(pooled, dw, db)?;
                    s = tape.relu(s);
                    let uw = tape.param(params, up.w);
                    let ub = tape.param(params, up.b);
                    s = tape.dense(s, uw, ub)?;
                    s = tape.sigmoid(s);
                    y = tape.mul(y, s)?;
                }
                t = tape.add(block_in, y)?;
            }
            let tail = conv(tape, group.tail, t)?;
            t = tape.add(tail, group_in)?;
        }
        let trunk = conv(tape, self.trunk, t)?;
        tape.add(trunk, shallow)
    }
}
