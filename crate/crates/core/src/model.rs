//! Model assembly: patch encoder, projection, decoder LM, logit head.
//!
//! The pipeline over a query image `x` and text tokens is: patch features
//! from the encoder, a linear projection into the LM width, concatenation
//! with the text embeddings, the causal decoder stack, and a linear logit
//! head over the vocabulary. Low-rank adapters sit on the query/value
//! projections of every attention layer in both the encoder and the LM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::image::Image;
use crate::nn::{self, AdapterSpec, AttentionSpec, ParamLeaves};
use crate::params::ParamSet;
use crate::rng::{stream, truncated_normal};
use crate::tensor::Tensor;
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Only the projection and logit head train.
    Frozen,
    /// Adapters plus projection and logit head train; base weights stay
    /// fixed.
    Adapters,
    /// Everything trains.
    Full,
    /// Pretraining stage: only the projection trains.
    ProjectionOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square input resolution (H = W).
    pub image_size: usize,
    pub patch: usize,
    /// Encoder token width C.
    pub encoder_width: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    /// LM token width D.
    pub width: usize,
    pub lm_depth: usize,
    pub lm_heads: usize,
    /// Maximum total sequence length (image + text tokens).
    pub context: usize,
    pub adapter_rank: usize,
    pub adapter_scale: f64,
    pub finetune_mode: FinetuneMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch: 8,
            encoder_width: 64,
            encoder_depth: 2,
            encoder_heads: 4,
            width: 128,
            lm_depth: 4,
            lm_heads: 4,
            context: 512,
            adapter_rank: 8,
            adapter_scale: 1.0,
            finetune_mode: FinetuneMode::Adapters,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.encoder_heads == 0 || self.encoder_width % self.encoder_heads != 0 {
            return Err(Error::Config(format!(
                "encoder width {} not divisible by {} heads",
                self.encoder_width, self.encoder_heads
            )));
        }
        if self.lm_heads == 0 || self.width % self.lm_heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.lm_heads
            )));
        }
        let min_dim = self.encoder_width.min(self.width);
        if self.adapter_rank == 0 || self.adapter_rank > min_dim {
            return Err(Error::Config(format!(
                "adapter rank {} outside 1..={min_dim}",
                self.adapter_rank
            )));
        }
        Ok(())
    }

    /// Number of image tokens for this configuration.
    pub fn num_image_tokens(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }

    fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }
}

/// A complete model: configuration, vocabulary size, and parameters.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub params: ParamSet,
}

fn is_adapter(name: &str) -> bool {
    name.contains("_adapter.")
}

impl ModelBundle {
    /// Initialize parameters: truncated normal (sigma 0.02) for weights,
    /// zeros for biases and adapter `up` matrices (so adapters start as the
    /// identity), ones for layer-norm gains.
    pub fn init(config: &ModelConfig, vocab: &Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[0x6d6f64656c]);
        let mut params = ParamSet::new();
        let mut dense = |params: &mut ParamSet, name: &str, shape: &[usize]| -> Result<()> {
            let mut t = Tensor::zeros(shape);
            for v in t.data_mut() {
                *v = truncated_normal(&mut rng, 0.02);
            }
            params.insert(name, t)
        };
        let zeros =
            |params: &mut ParamSet, name: &str, shape: &[usize]| params.insert(name, Tensor::zeros(shape));
        let ones = |params: &mut ParamSet, name: &str, n: usize| {
            params.insert(name, Tensor::from_vec(&[n], vec![1.0; n]).expect("shape"))
        };

        let c = config.encoder_width;
        let d = config.width;
        let r = config.adapter_rank;
        let m = vocab.size();

        dense(&mut params, "enc.patch.w", &[config.patch_dim(), c])?;
        zeros(&mut params, "enc.patch.b", &[c])?;
        dense(&mut params, "enc.pos", &[config.num_image_tokens(), c])?;
        for i in 0..config.encoder_depth {
            let p = format!("enc.block{i}");
            ones(&mut params, &format!("{p}.ln1.g"), c)?;
            zeros(&mut params, &format!("{p}.ln1.b"), &[c])?;
            for w in ["wq", "wk", "wv", "wo"] {
                dense(&mut params, &format!("{p}.attn.{w}"), &[c, c])?;
            }
            dense(&mut params, &format!("{p}.attn.q_adapter.down"), &[c, r])?;
            zeros(&mut params, &format!("{p}.attn.q_adapter.up"), &[r, c])?;
            dense(&mut params, &format!("{p}.attn.v_adapter.down"), &[c, r])?;
            zeros(&mut params, &format!("{p}.attn.v_adapter.up"), &[r, c])?;
            ones(&mut params, &format!("{p}.ln2.g"), c)?;
            zeros(&mut params, &format!("{p}.ln2.b"), &[c])?;
            dense(&mut params, &format!("{p}.mlp.fc1"), &[c, 4 * c])?;
            zeros(&mut params, &format!("{p}.mlp.b1"), &[4 * c])?;
            dense(&mut params, &format!("{p}.mlp.fc2"), &[4 * c, c])?;
            zeros(&mut params, &format!("{p}.mlp.b2"), &[c])?;
        }
        ones(&mut params, "enc.ln_f.g", c)?;
        zeros(&mut params, "enc.ln_f.b", &[c])?;

        dense(&mut params, "proj.w", &[c, d])?;

        dense(&mut params, "lm.tok", &[m, d])?;
        dense(&mut params, "lm.pos", &[config.context, d])?;
        for i in 0..config.lm_depth {
            let p = format!("lm.block{i}");
            ones(&mut params, &format!("{p}.ln1.g"), d)?;
            zeros(&mut params, &format!("{p}.ln1.b"), &[d])?;
            for w in ["wq", "wk", "wv", "wo"] {
                dense(&mut params, &format!("{p}.attn.{w}"), &[d, d])?;
            }
            dense(&mut params, &format!("{p}.attn.q_adapter.down"), &[d, r])?;
            zeros(&mut params, &format!("{p}.attn.q_adapter.up"), &[r, d])?;
            dense(&mut params, &format!("{p}.attn.v_adapter.down"), &[d, r])?;
            zeros(&mut params, &format!("{p}.attn.v_adapter.up"), &[r, d])?;
            ones(&mut params, &format!("{p}.ln2.g"), d)?;
            zeros(&mut params, &format!("{p}.ln2.b"), &[d])?;
            dense(&mut params, &format!("{p}.mlp.fc1"), &[d, 4 * d])?;
            zeros(&mut params, &format!("{p}.mlp.b1"), &[4 * d])?;
            dense(&mut params, &format!("{p}.mlp.fc2"), &[4 * d, d])?;
            zeros(&mut params, &format!("{p}.mlp.b2"), &[d])?;
        }
        ones(&mut params, "lm.ln_f.g", d)?;
        zeros(&mut params, "lm.ln_f.b", &[d])?;
        dense(&mut params, "head.w", &[d, m])?;

        let mut bundle = ModelBundle {
            config: config.clone(),
            vocab_size: m,
            params,
        };
        bundle.set_finetune_mode(config.finetune_mode);
        Ok(bundle)
    }

    /// Set which parameters train under the given mode.
    pub fn set_finetune_mode(&mut self, mode: FinetuneMode) {
        self.config.finetune_mode = mode;
        self.params.set_trainable_where(|name| match mode {
            FinetuneMode::Full => true,
            FinetuneMode::Frozen => name == "proj.w" || name == "head.w",
            FinetuneMode::Adapters => {
                is_adapter(name) || name == "proj.w" || name == "head.w"
            }
            FinetuneMode::ProjectionOnly => name == "proj.w",
        });
    }

    fn adapter_spec(&self) -> AdapterSpec {
        AdapterSpec {
            rank: self.config.adapter_rank,
            scale: self.config.adapter_scale,
        }
    }

    /// Flatten the image into per-patch rows: (N_v, patch*patch*3).
    pub fn patchify(&self, image: &Image) -> Result<Tensor> {
        let s = self.config.image_size;
        if image.height != s || image.width != s {
            return Err(Error::Shape(format!(
                "image {}x{} does not match configured {s}x{s}",
                image.height, image.width
            )));
        }
        if image.pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Domain("image values outside [0, 1]".into()));
        }
        let p = self.config.patch;
        let side = s / p;
        let mut out = Tensor::zeros(&[side * side, self.config.patch_dim()]);
        for py in 0..side {
            for px in 0..side {
                let row = out.row_mut(py * side + px);
                let mut i = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        let rgb = image.get(py * p + dy, px * p + dx);
                        row[i] = rgb[0];
                        row[i + 1] = rgb[1];
                        row[i + 2] = rgb[2];
                        i += 3;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Encoder stack on the tape: returns patch features (N_v, C).
    pub fn build_encoder(
        &self,
        g: &mut Graph,
        pl: &mut ParamLeaves,
        image: &Image,
    ) -> Result<NodeId> {
        let patches = self.patchify(image)?;
        let x = g.leaf(patches);
        let x = nn::linear(g, pl, x, "enc.patch.w", Some("enc.patch.b"))?;
        let pos = pl.leaf(g, "enc.pos")?;
        let mut x = g.add(x, pos)?;
        let spec = AttentionSpec {
            heads: self.config.encoder_heads,
            causal: false,
            adapter: Some(self.adapter_spec()),
        };
        for i in 0..self.config.encoder_depth {
            x = nn::block(g, pl, x, &format!("enc.block{i}"), spec)?;
        }
        nn::layernorm(g, pl, x, "enc.ln_f")
    }

    /// Full forward on the tape: returns logits (N_v + N_t, M).
    pub fn build_forward(
        &self,
        g: &mut Graph,
        pl: &mut ParamLeaves,
        image: &Image,
        text: &[TokenId],
    ) -> Result<NodeId> {
        let n_v = self.config.num_image_tokens();
        let n = n_v + text.len();
        if n > self.config.context {
            return Err(Error::ContextOverflow {
                length: n,
                limit: self.config.context,
            });
        }
        let v_tilde = self.build_encoder(g, pl, image)?;
        let proj = pl.leaf(g, "proj.w")?;
        let v = g.matmul(v_tilde, proj)?;
        let tok = pl.leaf(g, "lm.tok")?;
        let t = g.embedding(tok, text)?;
        let x = g.concat_rows(v, t)?;
        let pos_table = pl.leaf(g, "lm.pos")?;
        let pos = g.slice_rows(pos_table, 0, n)?;
        let mut x = g.add(x, pos)?;
        let spec = AttentionSpec {
            heads: self.config.lm_heads,
            causal: true,
            adapter: Some(self.adapter_spec()),
        };
        for i in 0..self.config.lm_depth {
            x = nn::block(g, pl, x, &format!("lm.block{i}"), spec)?;
        }
        let z = nn::layernorm(g, pl, x, "lm.ln_f")?;
        let head = pl.leaf(g, "head.w")?;
        g.matmul(z, head)
    }

    /// Image tokens after projection: (N_v, D). Convenience wrapper that
    /// evaluates the encoder on a throwaway tape.
    pub fn encode_image(&self, image: &Image) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut pl = ParamLeaves::new(&self.params);
        let v_tilde = self.build_encoder(&mut g, &mut pl, image)?;
        let proj = pl.leaf(&mut g, "proj.w")?;
        let v = g.matmul(v_tilde, proj)?;
        Ok(g.value(v).clone())
    }

    /// Logits for the concatenated image + text sequence.
    pub fn forward(&self, image: &Image, text: &[TokenId]) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut pl = ParamLeaves::new(&self.params);
        let logits = self.build_forward(&mut g, &mut pl, image, text)?;
        Ok(g.value(logits).clone())
    }

    /// Trainable parameter count under adapters mode:
    /// sum of r*(d_in + d_out) over adapted projections plus projection and
    /// head sizes.
    pub fn adapter_mode_trainable(&self) -> usize {
        let c = self.config.encoder_width;
        let d = self.config.width;
        let r = self.config.adapter_rank;
        let enc = self.config.encoder_depth * 2 * (r * (c + c));
        let lm = self.config.lm_depth * 2 * (r * (d + d));
        enc + lm + c * d + d * self.vocab_size
    }
}
