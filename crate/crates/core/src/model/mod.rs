//! Promptable segmenter: shared per-modality image encoder, box prompt
//! encoder and mask decoder.

mod decoder;
mod encoder;
mod layers;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use segfuse_autograd::{Graph, NodeId, ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::labels::SubRegion;
use crate::prompting::SpatialPrompt;

use decoder::{MaskDecoder, PromptEncoder};
pub use encoder::{stage_heads, EncoderOutput, STEM_CHANNELS};
use encoder::ImageEncoder;
use layers::Builder;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder_dims: Vec<usize>,
    pub encoder_depths: Vec<usize>,
    pub prompt_embed_dim: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    /// `(H, W)` of encoder input slices.
    pub input_size: (usize, usize),
    pub in_channels: usize,
    pub desk_scale: bool,
    /// Encoder stage whose output feeds fusion and decoding; `None` means the last.
    #[serde(default)]
    pub feature_stage: Option<usize>,
}

impl ModelConfig {
    pub fn full_scale() -> Self {
        Self {
            encoder_dims: vec![64, 128, 160, 320],
            encoder_depths: vec![2, 2, 6, 2],
            prompt_embed_dim: 256,
            decoder_layers: 2,
            decoder_heads: 8,
            input_size: (256, 256),
            in_channels: 4,
            desk_scale: false,
            feature_stage: None,
        }
    }

    pub fn desk() -> Self {
        Self {
            encoder_dims: vec![8, 16, 16, 32],
            encoder_depths: vec![1, 1, 2, 1],
            prompt_embed_dim: 32,
            decoder_layers: 2,
            decoder_heads: 2,
            input_size: (64, 64),
            in_channels: 4,
            desk_scale: true,
            feature_stage: None,
        }
    }

    pub fn with_input_size(mut self, h: usize, w: usize) -> Self {
        self.input_size = (h, w);
        self
    }

    pub fn with_in_channels(mut self, m: usize) -> Self {
        self.in_channels = m;
        self
    }

    pub fn feature_stage_index(&self) -> usize {
        self.feature_stage.unwrap_or(self.encoder_dims.len().saturating_sub(1))
    }

    /// Stride of the patch-merging step in front of stage `i` (`i >= 1`).
    /// The last stage keeps the resolution, as in SAM-style TinyViT.
    pub fn merge_stride(&self, i: usize) -> usize {
        if i + 1 == self.encoder_dims.len() && i > 1 {
            1
        } else {
            2
        }
    }

    /// Total downsampling factor at the output of stage `i`.
    pub fn stage_stride(&self, i: usize) -> usize {
        (1..=i).fold(4, |s, j| s * self.merge_stride(j))
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let n = self.encoder_dims.len();
        if n == 0 {
            bad.push("encoder_dims must not be empty".to_string());
        }
        if n != self.encoder_depths.len() {
            bad.push(format!(
                "len(encoder_dims) = {n} must equal len(encoder_depths) = {}",
                self.encoder_depths.len()
            ));
        }
        if self.encoder_depths.contains(&0) {
            bad.push("every encoder depth must be at least 1".into());
        }
        if let Some(&d0) = self.encoder_dims.first() {
            if d0 < 2 || d0 % 2 != 0 {
                bad.push(format!("encoder_dims[0] = {d0} must be even and at least 2"));
            }
        }
        for (i, &d) in self.encoder_dims.iter().enumerate().skip(1) {
            if d == 0 || d % stage_heads(d) != 0 {
                bad.push(format!("encoder_dims[{i}] = {d} must be a positive multiple of its head count"));
            }
        }
        let c = self.prompt_embed_dim;
        if self.decoder_heads == 0 {
            bad.push("decoder_heads must be at least 1".into());
        } else {
            if c % self.decoder_heads != 0 {
                bad.push(format!(
                    "prompt_embed_dim = {c} must be divisible by decoder_heads = {}",
                    self.decoder_heads
                ));
            }
            if (c / 2) % self.decoder_heads != 0 {
                bad.push(format!(
                    "prompt_embed_dim / 2 = {} must be divisible by decoder_heads = {}",
                    c / 2,
                    self.decoder_heads
                ));
            }
        }
        if c == 0 || c % 8 != 0 {
            bad.push(format!("prompt_embed_dim = {c} must be a positive multiple of 8"));
        }
        if self.decoder_layers == 0 {
            bad.push("decoder_layers must be at least 1".into());
        }
        if !matches!(self.in_channels, 1 | 4) {
            bad.push(format!("in_channels = {} must be 1 or 4", self.in_channels));
        }
        if let Some(fs) = self.feature_stage {
            if fs >= n {
                bad.push(format!("feature_stage = {fs} must be below the stage count {n}"));
            }
        }
        if n > 0 && self.feature_stage_index() < n {
            let stride = self.stage_stride(self.feature_stage_index());
            let (h, w) = self.input_size;
            if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
                bad.push(format!("input_size {h}x{w} must be a positive multiple of the feature stride {stride}"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Per-modality encoder outputs for one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapSet {
    /// `f_m`, each `C×H'×W'`, in modality order.
    pub per_modality: Vec<Tensor>,
    /// First-stage maps, each `D0×H/4×W/4`, in modality order.
    pub skip: Vec<Tensor>,
    /// Encoder stage that produced `per_modality`.
    pub stage: usize,
}

impl FeatureMapSet {
    pub fn modality_count(&self) -> usize {
        self.per_modality.len()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.per_modality.first() else {
            return Err(Error::input("feature set is empty"));
        };
        if self.skip.len() != self.per_modality.len() {
            return Err(Error::input("skip and main feature counts differ"));
        }
        let ok = self.per_modality.iter().all(|f| f.shape() == first.shape())
            && self.skip.iter().all(|f| f.shape() == self.skip[0].shape());
        if !ok {
            return Err(Error::input("feature maps must share one shape"));
        }
        Ok(())
    }
}

/// A single fused feature map `f̂` together with its fused skip features.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatures {
    pub main: Tensor,
    pub skip: Tensor,
}

/// Sparse prompt tokens, `K×d`: two corner tokens for a box.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    tokens: Tensor,
}

impl PromptEmbedding {
    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// All token values, row-major.
    pub fn vector(&self) -> &[f64] {
        self.tokens.data()
    }
}

#[derive(Clone)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    encoder: ImageEncoder,
    prompt: PromptEncoder,
    decoder: MaskDecoder,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.num_parameters())
            .finish()
    }
}

/// Maps `[0, 255]` intensities to `[-1, 1]`.
pub fn normalize_pixel(v: f64) -> f64 {
    v / 127.5 - 1.0
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let encoder = ImageEncoder::build(&mut b, &config);
        let prompt = PromptEncoder::build(&mut b, config.prompt_embed_dim);
        let decoder = MaskDecoder::build(&mut b, &config);
        Ok(Self {
            config,
            store,
            encoder,
            prompt,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.store
            .iter()
            .filter(|(id, _, _)| self.store.is_trainable(*id))
            .map(|(_, _, t)| t.len())
            .sum()
    }

    pub fn stage_widths(&self) -> &[usize] {
        &self.config.encoder_dims
    }

    /// `(C, H', W')` of the fused feature maps.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let s = self.config.stage_stride(self.config.feature_stage_index());
        let (h, w) = self.config.input_size;
        (self.config.prompt_embed_dim, h / s, w / s)
    }

    /// `(D0, H/4, W/4)` of the skip maps.
    pub fn skip_shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.config.input_size;
        (self.config.encoder_dims[0], h / 4, w / 4)
    }

    /// Overwrites parameter values by name. Every stored tensor must be
    /// present with a matching shape.
    pub fn load_parameters(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<()> {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = self.store.name(id).to_string();
            let t = lookup(&name).ok_or_else(|| Error::format(format!("model/{name}"), "missing parameter"))?;
            if t.shape() != self.store.get(id).shape() {
                return Err(Error::format(
                    format!("model/{name}"),
                    format!("shape {:?} does not match {:?}", t.shape(), self.store.get(id).shape()),
                ));
            }
            *self.store.get_mut(id) = t;
        }
        Ok(())
    }

    fn check_slice(&self, slice: &Tensor) -> Result<()> {
        let (h, w) = self.config.input_size;
        let expect = [self.config.in_channels, h, w];
        if slice.shape() != expect {
            return Err(Error::input(format!(
                "slice shape {:?} does not match model input {:?}",
                slice.shape(),
                expect
            )));
        }
        if !slice.is_finite() {
            return Err(Error::input("slice contains non-finite values"));
        }
        Ok(())
    }

    /// Records the shared encoder once per modality of an `M×H×W` slice.
    pub fn encode_graph(&self, g: &mut Graph, slice: &Tensor) -> Result<Vec<EncoderOutput>> {
        self.check_slice(slice)?;
        let plane = slice.shape()[1] * slice.shape()[2];
        Ok(slice
            .data()
            .chunks(plane)
            .map(|ch| {
                let norm: Vec<f64> = ch.iter().map(|&v| normalize_pixel(v)).collect();
                let mut data = Vec::with_capacity(plane * STEM_CHANNELS);
                for _ in 0..STEM_CHANNELS {
                    data.extend_from_slice(&norm);
                }
                let x = g.leaf(Tensor::new(&[STEM_CHANNELS, slice.shape()[1], slice.shape()[2]], data));
                self.encoder.forward(g, &self.store, x)
            })
            .collect())
    }

    fn corners(&self, prompt: &SpatialPrompt) -> Result<[(f64, f64); 2]> {
        let (h, w) = self.config.input_size;
        let b = prompt
            .bbox
            .ok_or_else(|| Error::input("an empty prompt has no box to encode"))?;
        if b.row_min > b.row_max || b.col_min > b.col_max || b.row_max >= h || b.col_max >= w {
            return Err(Error::input(format!("box {b:?} lies outside the {h}x{w} image")));
        }
        let (h, w) = (h as f64, w as f64);
        Ok([
            ((b.col_min as f64 + 0.5) / w, (b.row_min as f64 + 0.5) / h),
            ((b.col_max as f64 + 0.5) / w, (b.row_max as f64 + 0.5) / h),
        ])
    }

    /// Sparse tokens for a box prompt, or the learned no-prompt token.
    pub fn prompt_graph(&self, g: &mut Graph, prompt: Option<&SpatialPrompt>) -> Result<NodeId> {
        match prompt {
            Some(p) => {
                let c = self.corners(p)?;
                Ok(self.prompt.box_tokens(g, &self.store, c))
            }
            None => Ok(self.prompt.no_prompt_token(g, &self.store)),
        }
    }

    /// Logits `H×W` for `region` from fused maps already on the graph.
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        image: NodeId,
        skip: NodeId,
        sparse: NodeId,
        region: SubRegion,
    ) -> Result<NodeId> {
        let (c, fh, fw) = self.feature_shape();
        let (d0, sh, sw) = self.skip_shape();
        if g.shape(image) != [c, fh, fw] {
            return Err(Error::input(format!(
                "feature shape {:?} does not match decoder input [{c}, {fh}, {fw}]",
                g.shape(image)
            )));
        }
        if g.shape(skip) != [d0, sh, sw] {
            return Err(Error::input(format!(
                "skip shape {:?} does not match [{d0}, {sh}, {sw}]",
                g.shape(skip)
            )));
        }
        let ss = g.shape(sparse);
        if ss.len() != 2 || ss[1] != c {
            return Err(Error::input(format!("prompt tokens {ss:?} must be K x {c}")));
        }
        Ok(self.decoder.forward(
            g,
            &self.store,
            &self.prompt,
            image,
            skip,
            sparse,
            region,
            self.config.input_size,
        ))
    }

    /// Encodes an `H×W×M` slice.
    pub fn encode_per_modality(&self, slice: &Array3<f64>) -> Result<FeatureMapSet> {
        let (h, w, m) = slice.dim();
        let chw = slice.view().permuted_axes([2, 0, 1]);
        let t = Tensor::new(&[m, h, w], chw.iter().copied().collect());
        self.encode_chw(&t)
    }

    /// Encodes an `M×H×W` slice tensor.
    pub fn encode_chw(&self, slice: &Tensor) -> Result<FeatureMapSet> {
        let mut g = Graph::new();
        let outs = self.encode_graph(&mut g, slice)?;
        Ok(FeatureMapSet {
            per_modality: outs.iter().map(|o| g.value(o.main).clone()).collect(),
            skip: outs.iter().map(|o| g.value(o.skip).clone()).collect(),
            stage: self.config.feature_stage_index(),
        })
    }

    pub fn encode_prompt(&self, prompt: &SpatialPrompt) -> Result<PromptEmbedding> {
        let mut g = Graph::new();
        let n = self.prompt_graph(&mut g, Some(prompt))?;
        Ok(PromptEmbedding {
            tokens: g.value(n).clone(),
        })
    }

    /// The learned token standing in for an absent prompt.
    pub fn no_prompt_embedding(&self) -> PromptEmbedding {
        let mut g = Graph::new();
        let n = self.prompt_graph(&mut g, None).expect("no-prompt token always encodes");
        PromptEmbedding {
            tokens: g.value(n).clone(),
        }
    }

    /// Per-pixel logits at input resolution; `prompt = None` runs the
    /// unprompted pass.
    pub fn decode_mask(
        &self,
        features: &FusedFeatures,
        prompt: Option<&PromptEmbedding>,
        region: SubRegion,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let image = g.leaf(features.main.clone());
        let skip = g.leaf(features.skip.clone());
        let sparse = match prompt {
            Some(p) => g.leaf(p.tokens.clone()),
            None => self.prompt.no_prompt_token(&mut g, &self.store),
        };
        let out = self.decode_graph(&mut g, image, skip, sparse, region)?;
        Ok(g.value(out).clone())
    }
}
