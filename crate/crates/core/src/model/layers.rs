//! Parameter-holding building blocks. Each layer stores `ParamId`s into the
//! owning model's store and records its forward pass on a [`Graph`].

use rand_chacha::ChaCha8Rng;
use segfuse_autograd::{Graph, Init, NodeId, ParamId, ParamStore};

const LN_EPS: f64 = 1e-6;

pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: Vec::new(),
        }
    }

    pub fn scoped<T>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.into());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let full = self.full(name);
        self.store.add(full, shape, init, self.rng)
    }

    pub fn conv(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Conv {
        self.scoped(name, |b| {
            let fan_in = in_ch / groups * k * k;
            let w = b.param("weight", &[out_ch, in_ch / groups, k, k], Init::FanIn(fan_in));
            let bias = bias.then(|| b.param("bias", &[out_ch], Init::FanIn(fan_in)));
            Conv {
                w,
                b: bias,
                stride,
                pad: k / 2,
                groups,
            }
        })
    }

    pub fn conv_t2(&mut self, name: &str, in_ch: usize, out_ch: usize) -> ConvT2 {
        self.scoped(name, |b| {
            let fan_in = out_ch * 4;
            ConvT2 {
                w: b.param("weight", &[in_ch, out_ch, 2, 2], Init::FanIn(fan_in)),
                b: b.param("bias", &[out_ch], Init::FanIn(fan_in)),
            }
        })
    }

    pub fn linear(&mut self, name: &str, input: usize, output: usize) -> Linear {
        self.scoped(name, |b| Linear {
            w: b.param("weight", &[output, input], Init::FanIn(input)),
            b: b.param("bias", &[output], Init::FanIn(input)),
        })
    }

    pub fn norm(&mut self, name: &str, dim: usize) -> Norm {
        self.scoped(name, |b| Norm {
            gamma: b.param("weight", &[dim], Init::Ones),
            beta: b.param("bias", &[dim], Init::Zeros),
        })
    }

    pub fn mlp(&mut self, name: &str, dims: &[usize]) -> Mlp {
        self.scoped(name, |b| Mlp {
            layers: dims
                .windows(2)
                .enumerate()
                .map(|(i, w)| b.linear(&format!("layers.{i}"), w[0], w[1]))
                .collect(),
        })
    }

    pub fn attention(&mut self, name: &str, dim: usize, internal: usize, heads: usize) -> Attention {
        self.scoped(name, |b| Attention {
            q: b.linear("q_proj", dim, internal),
            k: b.linear("k_proj", dim, internal),
            v: b.linear("v_proj", dim, internal),
            out: b.linear("out_proj", internal, dim),
            heads,
        })
    }
}

#[derive(Clone)]
pub(crate) struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Conv {
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(s, self.w);
        let b = self.b.map(|b| g.param(s, b));
        g.conv2d(x, w, b, self.stride, self.pad, self.groups)
    }
}

#[derive(Clone)]
pub(crate) struct ConvT2 {
    w: ParamId,
    b: ParamId,
}

impl ConvT2 {
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        g.conv_transpose2(x, w, b)
    }
}

#[derive(Clone)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone)]
pub(crate) struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    /// Normalizes the last axis of a token matrix.
    pub fn tokens(&self, g: &mut Graph, s: &ParamStore, x: NodeId) -> NodeId {
        let gm = g.param(s, self.gamma);
        let bt = g.param(s, self.beta);
        g.layer_norm(x, gm, bt, LN_EPS)
    }

    /// Normalizes across channels of a `C×H×W` map.
    pub fn channels(&self, g: &mut Graph, s: &ParamStore, x: NodeId) -> NodeId {
        let gm = g.param(s, self.gamma);
        let bt = g.param(s, self.beta);
        g.layer_norm_channels(x, gm, bt, LN_EPS)
    }
}

/// Linear layers with GELU between them (none after the last).
#[derive(Clone)]
pub(crate) struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, mut x: NodeId) -> NodeId {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, s, x);
            if i < last {
                x = g.gelu(x);
            }
        }
        x
    }
}

#[derive(Clone)]
pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    /// Multi-head scaled dot-product attention over token matrices.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, q: NodeId, k: NodeId, v: NodeId) -> NodeId {
        let q = self.q.forward(g, s, q);
        let k = self.k.forward(g, s, k);
        let v = self.v.forward(g, s, v);
        let internal = g.shape(q)[1];
        let hd = internal / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.narrow_cols(q, h * hd, hd),
                    g.narrow_cols(k, h * hd, hd),
                    g.narrow_cols(v, h * hd, hd),
                )
            };
            let scores = g.matmul_bt(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh));
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.out.forward(g, s, merged)
    }
}

/// `C×H×W` map to `HW×C` tokens.
pub(crate) fn to_tokens(g: &mut Graph, x: NodeId) -> NodeId {
    let sh = g.shape(x).to_vec();
    let flat = g.reshape(x, &[sh[0], sh[1] * sh[2]]);
    g.transpose(flat)
}

/// `HW×C` tokens back to a `C×H×W` map.
pub(crate) fn from_tokens(g: &mut Graph, x: NodeId, h: usize, w: usize) -> NodeId {
    let t = g.transpose(x);
    let c = g.shape(t)[0];
    g.reshape(t, &[c, h, w])
}
