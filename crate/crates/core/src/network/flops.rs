//! Closed-form multiply-add counts for one forward pass.
//!
//! Attention terms for `N` positions, `C` channels, `C'` query/key channels,
//! `C_n` classes and window `k`:
//!
//! | block              | MACs          |
//! |--------------------|---------------|
//! | Q/K/V projections  | `N·C·(2C'+C)` |
//! | affinity `Q·K`     | `N²·C'`       |
//! | aggregation `A''V` | `N²·C`        |
//! | coarse head        | `N·C·C_n`     |
//! | Gram `PᵀP`         | `N²·C_n`      |
//! | local similarity   | `N·k²·C'`     |
//! | local smoothing    | `N²·k²`       |
//!
//! The "attention core" is affinity plus aggregation, `N²·(C'+C)`. Softmax,
//! sigmoid, normalisation and element-wise products are not counted.

use super::NetConfig;
use crate::error::{Error, Result};
use crate::tensor::ConvSpec;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockCost {
    pub name: &'static str,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub blocks: Vec<BlockCost>,
    /// Positions `N` seen by the attention operator.
    pub positions: u64,
    /// Number of `N×N` maps materialised by the attention operator.
    pub attention_maps: u64,
    /// `attention_maps · N² · element_bytes`, plus the `N²·k²` window buffer
    /// when local retention is enabled.
    pub attention_bytes: u64,
}

impl FlopReport {
    pub fn block(&self, name: &str) -> u64 {
        self.blocks.iter().find(|b| b.name == name).map_or(0, |b| b.macs)
    }

    pub fn total_macs(&self) -> u64 {
        self.blocks.iter().map(|b| b.macs).sum()
    }

    pub fn attention_core_macs(&self) -> u64 {
        self.block("attention.affinity") + self.block("attention.aggregation")
    }

    pub fn global_rectify_macs(&self) -> u64 {
        self.block("gr.coarse") + self.block("gr.gram")
    }

    pub fn local_retention_macs(&self) -> u64 {
        self.block("lr.similarity") + self.block("lr.smoothing")
    }

    /// Everything the denoised non-local operator adds on top of the
    /// backbone and head.
    pub fn module_macs(&self) -> u64 {
        self.block("attention.projections")
            + self.attention_core_macs()
            + self.global_rectify_macs()
            + self.local_retention_macs()
    }
}

fn conv_macs(spec: &ConvSpec, h: usize, w: usize) -> Result<(u64, usize, usize)> {
    let (oh, ow) = spec.output_hw(h, w)?;
    let per_pixel = spec.out_channels * spec.in_channels * spec.kernel.0 * spec.kernel.1;
    Ok(((oh * ow * per_pixel) as u64, oh, ow))
}

/// Counts for an `h×w` input; `element_bytes` sizes the attention maps.
pub fn count_flops(cfg: &NetConfig, input: (usize, usize), element_bytes: usize) -> Result<FlopReport> {
    cfg.validate()?;
    let (h, w) = input;
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::config(format!("input {h}×{w} must be a positive multiple of 16")));
    }
    let sw = cfg.stem_widths;
    let mut blocks = Vec::new();

    let mut stem = 0;
    let (mut ch, mut cw, mut prev) = (h, w, cfg.image_channels);
    let mut res2 = (0, 0);
    for (i, &width) in sw.iter().enumerate() {
        let spec = if i < 3 {
            ConvSpec::same(prev, width, 3).with_stride(2)
        } else {
            ConvSpec::same(prev, width, 3).with_dilation(2)
        };
        let (m, oh, ow) = conv_macs(&spec, ch, cw)?;
        stem += m;
        (ch, cw, prev) = (oh, ow, width);
        if i == 1 {
            res2 = (oh, ow);
        }
    }
    blocks.push(BlockCost { name: "stem", macs: stem });
    let (xh, xw) = (ch, cw);

    let c = cfg.channels;
    let (reduce, _, _) = conv_macs(&ConvSpec::pointwise(sw[3], c), xh, xw)?;
    let (conv1, fh, fw) = conv_macs(&ConvSpec::same(c, c, 3).with_stride(2), xh, xw)?;
    let (conv2, _, _) = conv_macs(&ConvSpec::same(c, c, 3), fh, fw)?;
    let (skip, _, _) = conv_macs(&ConvSpec::pointwise(c, c).with_stride(2), xh, xw)?;
    blocks.push(BlockCost { name: "reduction", macs: reduce + conv1 + conv2 + skip });

    let n = (fh * fw) as u64;
    let (c64, cr, cn, k2) = (c as u64, cfg.reduced_channels as u64, cfg.num_classes as u64, (cfg.window * cfg.window) as u64);
    blocks.push(BlockCost { name: "attention.projections", macs: n * c64 * (2 * cr + c64) });
    blocks.push(BlockCost { name: "attention.affinity", macs: n * n * cr });
    blocks.push(BlockCost { name: "attention.aggregation", macs: n * n * c64 });
    if cfg.global_rectify {
        blocks.push(BlockCost { name: "gr.coarse", macs: n * c64 * cn });
        blocks.push(BlockCost { name: "gr.gram", macs: n * n * cn });
    }
    if cfg.local_retention {
        blocks.push(BlockCost { name: "lr.similarity", macs: n * k2 * cr });
        blocks.push(BlockCost { name: "lr.smoothing", macs: n * n * k2 });
    }

    let context = (sw[3] * c) as u64;
    let (head_conv, _, _) = conv_macs(&ConvSpec::same(sw[3] + 2 * c, cfg.head_channels, 3), xh, xw)?;
    let (cls, _, _) = conv_macs(&ConvSpec::pointwise(cfg.head_channels, cfg.num_classes), xh, xw)?;
    blocks.push(BlockCost { name: "head", macs: context + head_conv + cls });

    let (aux2, _, _) = conv_macs(&ConvSpec::pointwise(sw[1], cfg.num_classes), res2.0, res2.1)?;
    let (aux3, _, _) = conv_macs(&ConvSpec::pointwise(sw[2], cfg.num_classes), xh, xw)?;
    blocks.push(BlockCost { name: "aux", macs: aux2 + aux3 });

    // QK logits and A always; Gram, P_class and A' with GR; A'' with LR.
    let maps = 2 + if cfg.global_rectify { 3 } else { 0 } + u64::from(cfg.local_retention);
    let eb = element_bytes as u64;
    let window_buffer = if cfg.local_retention { n * n * k2 * eb } else { 0 };
    Ok(FlopReport { blocks, positions: n, attention_maps: maps, attention_bytes: maps * n * n * eb + window_buffer })
}
