use super::config::EncoderConfig;
use super::layers::{Builder, CrossLayer, EncoderLayer, LayerNormParams, Linear};
use super::params::{Graph, ParamId, ParamStore};
use crate::corpus::special;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tensor, Var};

/// Contextual text tokens `(t_cls, t_1, ..., t_N)`; row 0 is the class token.
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    pub tokens: Var,
    /// `true` marks a padded position.
    pub pad_mask: Vec<bool>,
}

/// Contextual image tokens `(v_cls, v_1, ..., v_M)`; row 0 is the class token.
#[derive(Debug, Clone, Copy)]
pub struct ImageEmbedding {
    pub tokens: Var,
}

/// Last hidden state of the cross-modal encoder, one row per text position.
#[derive(Debug, Clone)]
pub struct CrossHidden {
    pub hidden: Var,
    pub pad_mask: Vec<bool>,
}

/// Class-token attention rows recorded while encoding text:
/// `layers[k][h][j]` is the post-softmax weight the class query of head `h`
/// in layer `k` puts on position `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl AttentionTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn seq_len(&self) -> usize {
        self.layers
            .first()
            .and_then(|l| l.first())
            .map_or(0, Vec::len)
    }

    /// Average of one layer's rows over heads.
    pub fn head_mean(&self, layer: usize) -> Vec<f64> {
        let heads = &self.layers[layer];
        let mut out = vec![0.0; self.seq_len()];
        for row in heads {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let n = heads.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

/// Text → image attention of every cross layer: `layers[l][h]` is `[L_text, M + 1]`.
#[derive(Debug, Clone)]
pub struct CrossAttentionMaps {
    pub layers: Vec<Vec<Tensor>>,
}

impl CrossAttentionMaps {
    pub fn head_mean(&self, layer: usize) -> Tensor {
        let heads = &self.layers[layer];
        let mut acc = heads[0].clone();
        for h in &heads[1..] {
            for (a, &b) in acc.data_mut().iter_mut().zip(h.data()) {
                *a += b;
            }
        }
        let n = heads.len() as f64;
        acc.data_mut().iter_mut().for_each(|v| *v /= n);
        acc
    }

    pub fn last_head_mean(&self) -> Tensor {
        self.head_mean(self.layers.len() - 1)
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNormParams,
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub patch_proj: Linear,
    pub cls: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNormParams,
}

#[derive(Debug, Clone)]
pub struct CrossEncoder {
    pub layers: Vec<CrossLayer>,
    pub norm: LayerNormParams,
}

#[derive(Debug, Clone)]
pub struct Heads {
    pub text_proj: Linear,
    pub image_proj: Linear,
    pub itm: Linear,
    pub mlm_bias: ParamId,
    /// Present only when the MLM head is not tied to the token embedding.
    pub mlm_proj: Option<ParamId>,
}

/// Parameter layout of the three encoders and their heads. Values live in a
/// separate [`ParamStore`], so the online and momentum models share one layout.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: EncoderConfig,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub cross: CrossEncoder,
    pub heads: Heads,
}

impl Model {
    pub fn init(config: &EncoderConfig, rng: &mut Rng) -> Result<(Model, ParamStore)> {
        config.validate()?;
        if config.vocab_size <= special::COUNT {
            return Err(Error::Config {
                path: "encoder.vocab_size".into(),
                message: format!("vocabulary of {} has no words", config.vocab_size),
            });
        }
        let d = config.hidden_dim;
        let mult = config.ffn_mult;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng,
            std: config.init_std,
        };

        let text = TextEncoder {
            token_embedding: b.normal("text.token_embedding".into(), &[config.vocab_size, d]),
            position_embedding: b.normal("text.position_embedding".into(), &[config.max_text_len, d]),
            layers: (0..config.text_layers)
                .map(|i| EncoderLayer::build(&mut b, &format!("text.layers.{i}"), d, mult))
                .collect(),
            norm: LayerNormParams::build(&mut b, "text.norm", d),
        };
        let m = config.num_patches();
        let image = ImageEncoder {
            patch_proj: Linear::build(&mut b, "image.patch_proj", config.patch_dim, d),
            cls: b.normal("image.cls".into(), &[1, d]),
            position_embedding: b.normal("image.position_embedding".into(), &[m + 1, d]),
            layers: (0..config.image_layers)
                .map(|i| EncoderLayer::build(&mut b, &format!("image.layers.{i}"), d, mult))
                .collect(),
            norm: LayerNormParams::build(&mut b, "image.norm", d),
        };
        let cross = CrossEncoder {
            layers: (0..config.cross_layers)
                .map(|i| CrossLayer::build(&mut b, &format!("cross.layers.{i}"), d, mult))
                .collect(),
            norm: LayerNormParams::build(&mut b, "cross.norm", d),
        };
        let heads = Heads {
            text_proj: Linear::build(&mut b, "heads.text_proj", d, config.embed_dim),
            image_proj: Linear::build(&mut b, "heads.image_proj", d, config.embed_dim),
            itm: Linear::build(&mut b, "heads.itm", d, 2),
            mlm_bias: b.zeros("heads.mlm_bias".into(), &[config.vocab_size]),
            mlm_proj: (!config.tie_mlm_weights)
                .then(|| b.normal("heads.mlm_proj".into(), &[d, config.vocab_size])),
        };
        let model = Model {
            config: config.clone(),
            text,
            image,
            cross,
            heads,
        };
        Ok((model, store))
    }

    /// Encodes `[CLS] w_1 .. w_n [SEP] [PAD]*` and records the class-attention trace.
    pub fn encode_text(
        &self,
        g: &mut Graph,
        token_ids: &[usize],
        pad_mask: Option<&[bool]>,
    ) -> Result<(TextEmbedding, AttentionTrace)> {
        let len = token_ids.len();
        if len > self.config.max_text_len {
            return Err(Error::Length {
                len,
                max: self.config.max_text_len,
            });
        }
        if token_ids.first() != Some(&special::CLS) {
            return Err(Error::Contract("text must start with the class token".into()));
        }
        if let Some(&bad) = token_ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Vocabulary(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let pads = match pad_mask {
            Some(m) if m.len() != len => {
                return Err(Error::shape("encode_text pad mask", &[len], &[m.len()]))
            }
            Some(m) if m[0] => return Err(Error::Contract("class token cannot be padding".into())),
            Some(m) => m.to_vec(),
            None => vec![false; len],
        };
        let mask = key_padding_mask(len, &pads);

        let tok = g.param(self.text.token_embedding);
        let pos = g.param(self.text.position_embedding);
        let e = g.tape.embedding(tok, token_ids)?;
        let positions: Vec<usize> = (0..len).collect();
        let p = g.tape.gather_rows(pos, &positions)?;
        let mut x = g.tape.add(e, p)?;

        let heads = self.config.num_heads;
        let mut trace = Vec::with_capacity(self.text.layers.len());
        for layer in &self.text.layers {
            let (y, probs) = layer.forward(g, x, mask.as_ref(), heads)?;
            trace.push(probs.iter().map(|p| p.row(0).to_vec()).collect());
            x = y;
        }
        let tokens = self.text.norm.forward(g, x)?;
        Ok((
            TextEmbedding {
                tokens,
                pad_mask: pads,
            },
            AttentionTrace { layers: trace },
        ))
    }

    /// Linear patch projection, before the class token and positions are added.
    pub fn embed_patches(&self, g: &mut Graph, patches: &Tensor) -> Result<Var> {
        let m = self.config.num_patches();
        let want = [m, self.config.patch_dim];
        if patches.shape() != want {
            return Err(Error::shape("encode_image", patches.shape(), &want));
        }
        let x = g.tape.constant(patches.clone());
        self.image.patch_proj.forward(g, x)
    }

    pub fn encode_image(&self, g: &mut Graph, patches: &Tensor) -> Result<ImageEmbedding> {
        let proj = self.embed_patches(g, patches)?;
        let cls = g.param(self.image.cls);
        let pos = g.param(self.image.position_embedding);
        let x = g.tape.concat_rows(&[cls, proj])?;
        let mut x = g.tape.add(x, pos)?;
        for layer in &self.image.layers {
            x = layer.forward(g, x, None, self.config.num_heads)?.0;
        }
        Ok(ImageEmbedding {
            tokens: self.image.norm.forward(g, x)?,
        })
    }

    /// Runs the cross-modal encoder with text as query and image as key/value.
    pub fn cross_encode(
        &self,
        g: &mut Graph,
        text: &TextEmbedding,
        image: &ImageEmbedding,
    ) -> Result<(CrossHidden, CrossAttentionMaps)> {
        let td = g.value(text.tokens).cols();
        let id = g.value(image.tokens).cols();
        if td != id || td != self.config.hidden_dim {
            return Err(Error::shape(
                "cross_encode",
                g.value(text.tokens).shape(),
                g.value(image.tokens).shape(),
            ));
        }
        let len = g.value(text.tokens).rows();
        let mask = key_padding_mask(len, &text.pad_mask);
        let mut x = text.tokens;
        let mut maps = Vec::with_capacity(self.cross.layers.len());
        for layer in &self.cross.layers {
            let (y, probs) = layer.forward(g, x, image.tokens, mask.as_ref(), self.config.num_heads)?;
            maps.push(probs);
            x = y;
        }
        let hidden = self.cross.norm.forward(g, x)?;
        Ok((
            CrossHidden {
                hidden,
                pad_mask: text.pad_mask.clone(),
            },
            CrossAttentionMaps { layers: maps },
        ))
    }

    /// Vocabulary logits `[positions.len(), V]` at masked positions.
    pub fn mlm_head(&self, g: &mut Graph, hidden: &CrossHidden, positions: &[usize]) -> Result<Var> {
        if positions.contains(&0) {
            return Err(Error::Contract("the class token is never an MLM target".into()));
        }
        let len = g.value(hidden.hidden).rows();
        if let Some(&bad) = positions.iter().find(|&&p| p >= len || hidden.pad_mask[p]) {
            return Err(Error::Contract(format!("position {bad} is not a text token")));
        }
        let h = g.tape.gather_rows(hidden.hidden, positions)?;
        let logits = match self.heads.mlm_proj {
            Some(w) => {
                let w = g.param(w);
                g.tape.matmul(h, w)?
            }
            None => {
                let emb = g.param(self.text.token_embedding);
                g.tape.matmul_nt(h, emb)?
            }
        };
        let bias = g.param(self.heads.mlm_bias);
        g.tape.add_bias(logits, bias)
    }

    /// Match / mismatch logits `[1, 2]` from `f_cls` (index 1 = matched).
    pub fn itm_logits(&self, g: &mut Graph, hidden: &CrossHidden) -> Result<Var> {
        let cls = g.tape.gather_rows(hidden.hidden, &[0])?;
        self.heads.itm.forward(g, cls)
    }

    /// Unit-norm contrastive feature `[1, embed_dim]` of the text class token.
    pub fn text_feature(&self, g: &mut Graph, text: &TextEmbedding) -> Result<Var> {
        let cls = g.tape.gather_rows(text.tokens, &[0])?;
        let z = self.heads.text_proj.forward(g, cls)?;
        Ok(g.tape.l2_normalize_rows(z))
    }

    pub fn image_feature(&self, g: &mut Graph, image: &ImageEmbedding) -> Result<Var> {
        let cls = g.tape.gather_rows(image.tokens, &[0])?;
        let z = self.heads.image_proj.forward(g, cls)?;
        Ok(g.tape.l2_normalize_rows(z))
    }
}

/// Additive `[len, len]` mask with `-inf` in padded key columns, or `None`
/// when nothing is padded.
fn key_padding_mask(len: usize, pads: &[bool]) -> Option<Tensor> {
    if !pads.iter().any(|&p| p) {
        return None;
    }
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for (j, &p) in pads.iter().enumerate() {
            if p {
                data[i * len + j] = f64::NEG_INFINITY;
            }
        }
    }
    Some(Tensor::matrix(len, len, data).expect("square mask"))
}
