//! Box prompt encoder and two-way-transformer mask decoder.

use std::f64::consts::PI;

use segfuse_autograd::{Graph, Init, NodeId, ParamId, ParamStore, Tensor};

use super::layers::{from_tokens, to_tokens, Attention, Builder, Conv, ConvT2, Mlp, Norm};
use super::ModelConfig;
use crate::labels::SubRegion;

/// Random Fourier features of normalized `(x, y)` coordinates.
#[derive(Clone)]
pub(crate) struct PositionalEncoding {
    gaussian: ParamId,
}

impl PositionalEncoding {
    pub fn build(b: &mut Builder, dim: usize) -> Self {
        let half = dim / 2;
        let g = b.param("pe_gaussian", &[2, half], Init::Normal(1.0));
        b.store.set_trainable(g, false);
        Self { gaussian: g }
    }

    /// Encodes points given in `[0, 1]²` as `(x, y)`; returns `N×dim`.
    pub fn encode(&self, store: &ParamStore, points: &[(f64, f64)]) -> Tensor {
        let gm = store.get(self.gaussian);
        let half = gm.shape()[1];
        let gd = gm.data();
        let mut out = Vec::with_capacity(points.len() * half * 2);
        for &(x, y) in points {
            let (x, y) = (2.0 * x - 1.0, 2.0 * y - 1.0);
            let proj: Vec<f64> = (0..half).map(|j| 2.0 * PI * (x * gd[j] + y * gd[half + j])).collect();
            out.extend(proj.iter().map(|p| p.sin()));
            out.extend(proj.iter().map(|p| p.cos()));
        }
        Tensor::new(&[points.len(), half * 2], out)
    }

    /// Encoding of every cell center of an `h×w` grid, row-major, `HW×dim`.
    pub fn grid(&self, store: &ParamStore, h: usize, w: usize) -> Tensor {
        let pts: Vec<(f64, f64)> = (0..h)
            .flat_map(|i| (0..w).map(move |j| ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64)))
            .collect();
        self.encode(store, &pts)
    }
}

#[derive(Clone)]
pub(crate) struct PromptEncoder {
    pub pe: PositionalEncoding,
    corner_embed: ParamId,
    no_prompt: ParamId,
    pub no_mask: ParamId,
}

impl PromptEncoder {
    pub fn build(b: &mut Builder, dim: usize) -> Self {
        b.scoped("prompt_encoder", |b| Self {
            pe: PositionalEncoding::build(b, dim),
            corner_embed: b.param("corner_embed", &[2, dim], Init::Normal(1.0)),
            no_prompt: b.param("no_prompt_embed", &[1, dim], Init::Normal(1.0)),
            no_mask: b.param("no_mask_embed", &[dim], Init::Normal(1.0)),
        })
    }

    /// Two corner tokens for a box whose corners are already normalized.
    pub fn box_tokens(&self, g: &mut Graph, s: &ParamStore, corners: [(f64, f64); 2]) -> NodeId {
        let pe = g.leaf(self.pe.encode(s, &corners));
        let offs = g.param(s, self.corner_embed);
        g.add(pe, offs)
    }

    pub fn no_prompt_token(&self, g: &mut Graph, s: &ParamStore) -> NodeId {
        g.param(s, self.no_prompt)
    }
}

#[derive(Clone)]
struct TwoWayLayer {
    self_attn: Attention,
    norm1: Norm,
    cross_token_to_image: Attention,
    norm2: Norm,
    mlp: Mlp,
    norm3: Norm,
    cross_image_to_token: Attention,
    norm4: Norm,
    skip_first_pe: bool,
}

impl TwoWayLayer {
    fn build(b: &mut Builder, dim: usize, heads: usize, skip_first_pe: bool) -> Self {
        Self {
            self_attn: b.attention("self_attn", dim, dim, heads),
            norm1: b.norm("norm1", dim),
            cross_token_to_image: b.attention("cross_attn_token_to_image", dim, dim / 2, heads),
            norm2: b.norm("norm2", dim),
            mlp: b.mlp("mlp", &[dim, dim * 8, dim]),
            norm3: b.norm("norm3", dim),
            cross_image_to_token: b.attention("cross_attn_image_to_token", dim, dim / 2, heads),
            norm4: b.norm("norm4", dim),
            skip_first_pe,
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        queries: NodeId,
        keys: NodeId,
        query_pe: NodeId,
        key_pe: NodeId,
    ) -> (NodeId, NodeId) {
        let queries = if self.skip_first_pe {
            self.self_attn.forward(g, s, queries, queries, queries)
        } else {
            let q = g.add(queries, query_pe);
            let a = self.self_attn.forward(g, s, q, q, queries);
            g.add(queries, a)
        };
        let queries = self.norm1.tokens(g, s, queries);

        let q = g.add(queries, query_pe);
        let k = g.add(keys, key_pe);
        let a = self.cross_token_to_image.forward(g, s, q, k, keys);
        let queries = g.add(queries, a);
        let queries = self.norm2.tokens(g, s, queries);

        let m = self.mlp.forward(g, s, queries);
        let queries = g.add(queries, m);
        let queries = self.norm3.tokens(g, s, queries);

        let q = g.add(queries, query_pe);
        let k = g.add(keys, key_pe);
        let a = self.cross_image_to_token.forward(g, s, k, q, queries);
        let keys = g.add(keys, a);
        let keys = self.norm4.tokens(g, s, keys);
        (queries, keys)
    }
}

#[derive(Clone)]
pub(crate) struct MaskDecoder {
    mask_tokens: ParamId,
    layers: Vec<TwoWayLayer>,
    final_attn: Attention,
    norm_final: Norm,
    up1: ConvT2,
    up_norm: Norm,
    up2: ConvT2,
    skip_proj: Conv,
    hypernets: Vec<Mlp>,
}

impl MaskDecoder {
    pub fn build(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let c = cfg.prompt_embed_dim;
        let heads = cfg.decoder_heads;
        b.scoped("mask_decoder", |b| Self {
            mask_tokens: b.param("mask_tokens", &[SubRegion::ALL.len(), c], Init::Normal(1.0)),
            layers: (0..cfg.decoder_layers)
                .map(|i| b.scoped(format!("layers.{i}"), |b| TwoWayLayer::build(b, c, heads, i == 0)))
                .collect(),
            final_attn: b.attention("final_attn_token_to_image", c, c / 2, heads),
            norm_final: b.norm("norm_final", c),
            up1: b.conv_t2("upscale.0", c, c / 4),
            up_norm: b.norm("upscale.1", c / 4),
            up2: b.conv_t2("upscale.3", c / 4, c / 8),
            skip_proj: b.conv("skip_proj", cfg.encoder_dims[0], c / 8, 1, 1, 1, true),
            hypernets: SubRegion::ALL
                .iter()
                .map(|r| b.mlp(&format!("hypernet.{}", r.index()), &[c, c, c, c / 8]))
                .collect(),
        })
    }

    /// Logits at the full `out_h×out_w` resolution for sub-region `region`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        prompt: &PromptEncoder,
        image: NodeId,
        skip: NodeId,
        sparse: NodeId,
        region: SubRegion,
        out_hw: (usize, usize),
    ) -> NodeId {
        let sh = g.shape(image).to_vec();
        let (h, w) = (sh[1], sh[2]);
        let dense = g.param(s, prompt.no_mask);
        let src = g.add_channel(image, dense);
        let keys = to_tokens(g, src);
        let key_pe = g.leaf(prompt.pe.grid(s, h, w));

        let mt = g.param(s, self.mask_tokens);
        let tokens = g.concat_rows(&[mt, sparse]);
        let (mut queries, mut keys) = (tokens, keys);
        for layer in &self.layers {
            (queries, keys) = layer.forward(g, s, queries, keys, tokens, key_pe);
        }
        let q = g.add(queries, tokens);
        let k = g.add(keys, key_pe);
        let a = self.final_attn.forward(g, s, q, k, keys);
        let queries = g.add(queries, a);
        let queries = self.norm_final.tokens(g, s, queries);

        let map = from_tokens(g, keys, h, w);
        let up = self.up1.forward(g, s, map);
        let up = self.up_norm.channels(g, s, up);
        let up = g.gelu(up);
        let up = self.up2.forward(g, s, up);
        let (uh, uw) = (4 * h, 4 * w);
        let mut sk = self.skip_proj.forward(g, s, skip);
        if g.shape(sk)[1..] != [uh, uw] {
            sk = g.bilinear(sk, uh, uw);
        }
        let up = g.add(up, sk);
        let up = g.gelu(up);

        let token = g.narrow_rows(queries, region.index(), 1);
        let hyper = self.hypernets[region.index()].forward(g, s, token);
        let ch = g.shape(up)[0];
        let flat = g.reshape(up, &[ch, uh * uw]);
        let low = g.matmul(hyper, flat);
        let low = g.reshape(low, &[1, uh, uw]);
        let full = g.bilinear(low, out_hw.0, out_hw.1);
        g.reshape(full, &[out_hw.0, out_hw.1])
    }
}
