//! Transformer building blocks shared by the three encoders.

use super::params::{init_tensor, Graph, Init, ParamId, ParamStore};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
    pub std: f64,
}

impl Builder<'_> {
    pub fn normal(&mut self, name: String, shape: &[usize]) -> ParamId {
        let t = init_tensor(shape, Init::Normal(self.std), self.rng);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        let t = init_tensor(shape, Init::Zeros, self.rng);
        self.store.add(name, t)
    }

    pub fn ones(&mut self, name: String, shape: &[usize]) -> ParamId {
        let t = init_tensor(shape, Init::Ones, self.rng);
        self.store.add(name, t)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub(crate) fn build(b: &mut Builder, prefix: &str, d: usize) -> Self {
        Self {
            gamma: b.ones(format!("{prefix}.gamma"), &[d]),
            beta: b.zeros(format!("{prefix}.beta"), &[d]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.tape.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub(crate) fn build(b: &mut Builder, prefix: &str, input: usize, output: usize) -> Self {
        Self {
            weight: b.normal(format!("{prefix}.weight"), &[input, output]),
            bias: b.zeros(format!("{prefix}.bias"), &[output]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, bias) = (g.param(self.weight), g.param(self.bias));
        let y = g.tape.matmul(x, w)?;
        g.tape.add_bias(y, bias)
    }
}

/// Multi-head attention projections.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl AttentionParams {
    pub(crate) fn build(b: &mut Builder, prefix: &str, d: usize) -> Self {
        Self {
            query: Linear::build(b, &format!("{prefix}.query"), d, d),
            key: Linear::build(b, &format!("{prefix}.key"), d, d),
            value: Linear::build(b, &format!("{prefix}.value"), d, d),
            output: Linear::build(b, &format!("{prefix}.output"), d, d),
        }
    }

    /// `softmax(Q Kᵀ / √d_head) V` per head, with queries from `x_q` and
    /// keys/values from `x_kv`. Returns the output and the post-softmax
    /// attention matrix `[L_q, L_kv]` of every head.
    pub fn forward(
        &self,
        g: &mut Graph,
        x_q: Var,
        x_kv: Var,
        key_mask: Option<&Tensor>,
        heads: usize,
    ) -> Result<(Var, Vec<Tensor>)> {
        let q = self.query.forward(g, x_q)?;
        let k = self.key.forward(g, x_kv)?;
        let v = self.value.forward(g, x_kv)?;
        let (out, probs) = multi_head(g, q, k, v, key_mask, heads)?;
        Ok((self.output.forward(g, out)?, probs))
    }
}

/// Splits projected `q`, `k`, `v` into heads, attends, and re-joins.
pub fn multi_head(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&Tensor>,
    heads: usize,
) -> Result<(Var, Vec<Tensor>)> {
    let d = g.value(q).cols();
    let dh = d / heads;
    let mask = key_mask.map(|m| g.tape.constant(m.clone()));
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.tape.slice_cols(q, h * dh, dh)?,
                g.tape.slice_cols(k, h * dh, dh)?,
                g.tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let (o, p) = scaled_dot_attention(g, qh, kh, vh, mask)?;
        probs.push(g.value(p).clone());
        outs.push(o);
    }
    let out = if heads == 1 { outs[0] } else { g.tape.concat_cols(&outs)? };
    Ok((out, probs))
}

/// `σ(Q Kᵀ / √d) V` for a single head; `mask` is added to the logits
/// (`-inf` removes a key). Returns the output and the attention node.
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Var>,
) -> Result<(Var, Var)> {
    let dh = g.value(q).cols() as f64;
    let mut scores = g.tape.matmul_nt(q, k)?;
    if let Some(m) = mask {
        scores = g.tape.add(scores, m)?;
    }
    // dividing logits by √d is a softmax temperature of √d
    let p = g.tape.softmax(scores, dh.sqrt(), 1)?;
    let out = g.tape.matmul(p, v)?;
    Ok((out, p))
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub(crate) fn build(b: &mut Builder, prefix: &str, d: usize, mult: usize) -> Self {
        Self {
            up: Linear::build(b, &format!("{prefix}.up"), d, d * mult),
            down: Linear::build(b, &format!("{prefix}.down"), d * mult, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.tape.gelu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm_attn: LayerNormParams,
    pub attn: AttentionParams,
    pub norm_ffn: LayerNormParams,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub(crate) fn build(b: &mut Builder, prefix: &str, d: usize, mult: usize) -> Self {
        Self {
            norm_attn: LayerNormParams::build(b, &format!("{prefix}.norm_attn"), d),
            attn: AttentionParams::build(b, &format!("{prefix}.attn"), d),
            norm_ffn: LayerNormParams::build(b, &format!("{prefix}.norm_ffn"), d),
            ffn: FeedForward::build(b, &format!("{prefix}.ffn"), d, mult),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        key_mask: Option<&Tensor>,
        heads: usize,
    ) -> Result<(Var, Vec<Tensor>)> {
        let h = self.norm_attn.forward(g, x)?;
        let (a, probs) = self.attn.forward(g, h, h, key_mask, heads)?;
        let x = g.tape.add(x, a)?;
        let h = self.norm_ffn.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        Ok((g.tape.add(x, f)?, probs))
    }
}

/// Pre-norm block: self-attention over text, cross-attention text → image, FFN.
#[derive(Debug, Clone)]
pub struct CrossLayer {
    pub norm_self: LayerNormParams,
    pub self_attn: AttentionParams,
    pub norm_cross: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub norm_ffn: LayerNormParams,
    pub ffn: FeedForward,
}

impl CrossLayer {
    pub(crate) fn build(b: &mut Builder, prefix: &str, d: usize, mult: usize) -> Self {
        Self {
            norm_self: LayerNormParams::build(b, &format!("{prefix}.norm_self"), d),
            self_attn: AttentionParams::build(b, &format!("{prefix}.self_attn"), d),
            norm_cross: LayerNormParams::build(b, &format!("{prefix}.norm_cross"), d),
            cross_attn: AttentionParams::build(b, &format!("{prefix}.cross_attn"), d),
            norm_ffn: LayerNormParams::build(b, &format!("{prefix}.norm_ffn"), d),
            ffn: FeedForward::build(b, &format!("{prefix}.ffn"), d, mult),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        text: Var,
        image: Var,
        text_mask: Option<&Tensor>,
        heads: usize,
    ) -> Result<(Var, Vec<Tensor>)> {
        let h = self.norm_self.forward(g, text)?;
        let (a, _) = self.self_attn.forward(g, h, h, text_mask, heads)?;
        let x = g.tape.add(text, a)?;
        let h = self.norm_cross.forward(g, x)?;
        let (c, cross_probs) = self.cross_attn.forward(g, h, image, None, heads)?;
        let x = g.tape.add(x, c)?;
        let h = self.norm_ffn.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        Ok((g.tape.add(x, f)?, cross_probs))
    }
}
