//! TinyViT-shaped image encoder: a convolutional stem and first stage,
//! transformer stages separated by patch merging, and a SAM-style neck.

use segfuse_autograd::{Graph, NodeId, ParamStore};

use super::layers::{from_tokens, to_tokens, Attention, Builder, Conv, Mlp, Norm};
use super::ModelConfig;

const EXPAND_RATIO: usize = 4;
const MLP_RATIO: usize = 4;
const HEAD_DIM: usize = 32;

/// Heads used by a transformer stage of width `dim`.
pub fn stage_heads(dim: usize) -> usize {
    (dim / HEAD_DIM).max(1)
}

#[derive(Clone)]
struct MbConv {
    expand: Conv,
    dw: Conv,
    project: Conv,
}

impl MbConv {
    fn build(b: &mut Builder, dim: usize) -> Self {
        let hidden = dim * EXPAND_RATIO;
        Self {
            expand: b.conv("conv1", dim, hidden, 1, 1, 1, true),
            dw: b.conv("conv2", hidden, hidden, 3, 1, hidden, true),
            project: b.conv("conv3", hidden, dim, 1, 1, 1, true),
        }
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: NodeId) -> NodeId {
        let h = self.expand.forward(g, s, x);
        let h = g.gelu(h);
        let h = self.dw.forward(g, s, h);
        let h = g.gelu(h);
        let h = self.project.forward(g, s, h);
        let y = g.add(x, h);
        g.gelu(y)
    }
}

#[derive(Clone)]
struct PatchMerging {
    conv1: Conv,
    conv2: Conv,
    conv3: Conv,
}

impl PatchMerging {
    fn build(b: &mut Builder, input: usize, output: usize, stride: usize) -> Self {
        Self {
            conv1: b.conv("conv1", input, output, 1, 1, 1, true),
            conv2: b.conv("conv2", output, output, 3, stride, output, true),
            conv3: b.conv("conv3", output, output, 1, 1, 1, true),
        }
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: NodeId) -> NodeId {
        let h = self.conv1.forward(g, s, x);
        let h = g.gelu(h);
        let h = self.conv2.forward(g, s, h);
        let h = g.gelu(h);
        self.conv3.forward(g, s, h)
    }
}

#[derive(Clone)]
struct VitBlock {
    norm1: Norm,
    attn: Attention,
    local: Conv,
    norm2: Norm,
    mlp: Mlp,
}

impl VitBlock {
    fn build(b: &mut Builder, dim: usize) -> Self {
        Self {
            norm1: b.norm("norm1", dim),
            attn: b.attention("attn", dim, dim, stage_heads(dim)),
            local: b.conv("local_conv", dim, dim, 3, 1, dim, true),
            norm2: b.norm("norm2", dim),
            mlp: b.mlp("mlp", &[dim, dim * MLP_RATIO, dim]),
        }
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: NodeId) -> NodeId {
        let sh = g.shape(x).to_vec();
        let (h, w) = (sh[1], sh[2]);
        let t = to_tokens(g, x);
        let n = self.norm1.tokens(g, s, t);
        let a = self.attn.forward(g, s, n, n, n);
        let t = g.add(t, a);
        let m = from_tokens(g, t, h, w);
        let l = self.local.forward(g, s, m);
        let m = g.add(m, l);
        let t = to_tokens(g, m);
        let n = self.norm2.tokens(g, s, t);
        let f = self.mlp.forward(g, s, n);
        let t = g.add(t, f);
        from_tokens(g, t, h, w)
    }
}

#[derive(Clone)]
struct Stage {
    merge: Option<PatchMerging>,
    conv_blocks: Vec<MbConv>,
    vit_blocks: Vec<VitBlock>,
}

/// Encoder output for one single-channel image.
pub struct EncoderOutput {
    /// Neck output, `C×H'×W'`.
    pub main: NodeId,
    /// First-stage output at stride 4, fed to the decoder's upscaling path.
    pub skip: NodeId,
}

#[derive(Clone)]
pub(crate) struct ImageEncoder {
    stem1: Conv,
    stem2: Conv,
    stages: Vec<Stage>,
    neck_conv1: Conv,
    neck_norm1: Norm,
    neck_conv2: Conv,
    neck_norm2: Norm,
}

/// Encoder input channels: the single modality channel is replicated.
pub const STEM_CHANNELS: usize = 3;

impl ImageEncoder {
    pub fn build(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let dims = &cfg.encoder_dims;
        let last = cfg.feature_stage_index();
        b.scoped("encoder", |b| {
            let stem1 = b.conv("stem.conv1", STEM_CHANNELS, dims[0] / 2, 3, 2, 1, true);
            let stem2 = b.conv("stem.conv2", dims[0] / 2, dims[0], 3, 2, 1, true);
            let stages = (0..=last)
                .map(|i| {
                    b.scoped(format!("stages.{i}"), |b| {
                        if i == 0 {
                            let conv_blocks = (0..cfg.encoder_depths[0])
                                .map(|j| b.scoped(format!("blocks.{j}"), |b| MbConv::build(b, dims[0])))
                                .collect();
                            Stage {
                                merge: None,
                                conv_blocks,
                                vit_blocks: Vec::new(),
                            }
                        } else {
                            let stride = cfg.merge_stride(i);
                            let merge = b.scoped("downsample", |b| PatchMerging::build(b, dims[i - 1], dims[i], stride));
                            let vit_blocks = (0..cfg.encoder_depths[i])
                                .map(|j| b.scoped(format!("blocks.{j}"), |b| VitBlock::build(b, dims[i])))
                                .collect();
                            Stage {
                                merge: Some(merge),
                                conv_blocks: Vec::new(),
                                vit_blocks,
                            }
                        }
                    })
                })
                .collect();
            let c = cfg.prompt_embed_dim;
            Self {
                stem1,
                stem2,
                stages,
                neck_conv1: b.conv("neck.conv1", dims[last], c, 1, 1, 1, false),
                neck_norm1: b.norm("neck.norm1", c),
                neck_conv2: b.conv("neck.conv2", c, c, 3, 1, 1, false),
                neck_norm2: b.norm("neck.norm2", c),
            }
        })
    }

    /// `x` is a `3×H×W` normalized image.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: NodeId) -> EncoderOutput {
        let h = self.stem1.forward(g, s, x);
        let h = g.gelu(h);
        let mut h = self.stem2.forward(g, s, h);
        let mut skip = h;
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(m) = &stage.merge {
                h = m.forward(g, s, h);
            }
            for blk in &stage.conv_blocks {
                h = blk.forward(g, s, h);
            }
            for blk in &stage.vit_blocks {
                h = blk.forward(g, s, h);
            }
            if i == 0 {
                skip = h;
            }
        }
        let n = self.neck_conv1.forward(g, s, h);
        let n = self.neck_norm1.channels(g, s, n);
        let n = self.neck_conv2.forward(g, s, n);
        let main = self.neck_norm2.channels(g, s, n);
        EncoderOutput { main, skip }
    }
}
