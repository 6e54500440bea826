//! Incremental inference with a per-sequence KV cache.
//!
//! Generation needs one forward row per new token, so this module
//! reimplements the model forward in plain tensor math with per-layer
//! key/value caches. The unit tests pin it row-for-row against the tape
//! forward.

use crate::error::{Error, Result};
use crate::graph::gelu_scalar;
use crate::image::Image;
use crate::model::ModelBundle;
use crate::nn::LN_EPS;
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::vocab::TokenId;

fn param<'a>(params: &'a ParamSet, name: &str) -> &'a Tensor {
    &params.get(name).expect("model parameter exists").value
}

/// y = x * W for a single row.
fn row_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (din, dout) = (w.rows(), w.cols());
    debug_assert_eq!(x.len(), din);
    let mut y = vec![0.0; dout];
    for (p, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let wrow = w.row(p);
        for (o, &wv) in y.iter_mut().zip(wrow) {
            *o += xv * wv;
        }
    }
    y
}

fn layernorm_row(x: &[f64], gamma: &Tensor, beta: &Tensor) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(gamma.data().iter().zip(beta.data()))
        .map(|(&v, (&g, &b))| (v - mean) * inv * g + b)
        .collect()
}

/// Projection with an optional low-rank adapter delta.
fn row_proj(params: &ParamSet, x: &[f64], weight: &str, adapter: Option<(&str, f64)>) -> Vec<f64> {
    let mut y = row_mat(x, param(params, weight));
    if let Some((prefix, scale)) = adapter {
        let lo = row_mat(x, param(params, &format!("{prefix}.down")));
        let delta = row_mat(&lo, param(params, &format!("{prefix}.up")));
        for (o, d) in y.iter_mut().zip(delta) {
            *o += scale * d;
        }
    }
    y
}

#[derive(Clone)]
struct LayerCache {
    /// Flattened rows, stride = width.
    k: Vec<f64>,
    v: Vec<f64>,
}

/// One stack of pre-norm blocks processed position by position.
#[derive(Clone)]
struct CachedStack {
    prefix: &'static str,
    depth: usize,
    heads: usize,
    width: usize,
    caches: Vec<LayerCache>,
}

impl CachedStack {
    fn new(prefix: &'static str, depth: usize, heads: usize, width: usize) -> Self {
        CachedStack {
            prefix,
            depth,
            heads,
            width,
            caches: (0..depth)
                .map(|_| LayerCache {
                    k: Vec::new(),
                    v: Vec::new(),
                })
                .collect(),
        }
    }

    fn len(&self) -> usize {
        self.caches.first().map_or(0, |c| c.k.len() / self.width)
    }

    /// Process one position through all blocks. When `commit` is set the
    /// key/value rows are appended to the caches; otherwise the position is
    /// evaluated transiently (used to probe candidate tokens).
    fn advance(
        &mut self,
        params: &ParamSet,
        adapter_scale: f64,
        mut x: Vec<f64>,
        commit: bool,
    ) -> Vec<f64> {
        let d = self.width;
        let dh = d / self.heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for layer in 0..self.depth {
            let p = format!("{}.block{layer}", self.prefix);
            let normed = layernorm_row(
                &x,
                param(params, &format!("{p}.ln1.g")),
                param(params, &format!("{p}.ln1.b")),
            );
            let q = row_proj(
                params,
                &normed,
                &format!("{p}.attn.wq"),
                Some((&format!("{p}.attn.q_adapter"), adapter_scale)),
            );
            let k = row_mat(&normed, param(params, &format!("{p}.attn.wk")));
            let v = row_proj(
                params,
                &normed,
                &format!("{p}.attn.wv"),
                Some((&format!("{p}.attn.v_adapter"), adapter_scale)),
            );

            let cache = &mut self.caches[layer];
            let prev = cache.k.len() / d;
            let mut ctx = vec![0.0; d];
            for h in 0..self.heads {
                let hs = h * dh;
                // Scores over cached positions plus the current one.
                let mut scores = Vec::with_capacity(prev + 1);
                for j in 0..prev {
                    let krow = &cache.k[j * d + hs..j * d + hs + dh];
                    let dot: f64 = q[hs..hs + dh].iter().zip(krow).map(|(a, b)| a * b).sum();
                    scores.push(dot * inv_sqrt);
                }
                let self_dot: f64 = q[hs..hs + dh]
                    .iter()
                    .zip(&k[hs..hs + dh])
                    .map(|(a, b)| a * b)
                    .sum();
                scores.push(self_dot * inv_sqrt);

                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    total += *s;
                }
                for (j, s) in scores.iter().enumerate() {
                    let w = s / total;
                    let vrow: &[f64] = if j < prev {
                        &cache.v[j * d + hs..j * d + hs + dh]
                    } else {
                        &v[hs..hs + dh]
                    };
                    for (c, &vv) in ctx[hs..hs + dh].iter_mut().zip(vrow) {
                        *c += w * vv;
                    }
                }
            }
            if commit {
                cache.k.extend_from_slice(&k);
                cache.v.extend_from_slice(&v);
            }
            let att = row_mat(&ctx, param(params, &format!("{p}.attn.wo")));
            for (xv, a) in x.iter_mut().zip(att) {
                *xv += a;
            }

            let normed = layernorm_row(
                &x,
                param(params, &format!("{p}.ln2.g")),
                param(params, &format!("{p}.ln2.b")),
            );
            let mut h1 = row_mat(&normed, param(params, &format!("{p}.mlp.fc1")));
            for (hv, b) in h1.iter_mut().zip(param(params, &format!("{p}.mlp.b1")).data()) {
                *hv = gelu_scalar(*hv + b);
            }
            let mut h2 = row_mat(&h1, param(params, &format!("{p}.mlp.fc2")));
            for (hv, b) in h2.iter_mut().zip(param(params, &format!("{p}.mlp.b2")).data()) {
                *hv += b;
            }
            for (xv, m) in x.iter_mut().zip(h2) {
                *xv += m;
            }
        }
        x
    }
}

/// Incremental decoding state over a frozen model.
#[derive(Clone)]
pub struct InferSession<'m> {
    model: &'m ModelBundle,
    stack: CachedStack,
    /// Final hidden state (post final layer norm) per committed position.
    hidden_history: Vec<Vec<f64>>,
    last_logits: Option<Vec<f64>>,
    /// Truncation or fallback events observed on this sequence.
    pub flags: Vec<String>,
}

/// Plain-math encoder: patch features through the full-attention stack, then
/// the projection into LM width. Returns (N_v, D).
pub fn encode_image_plain(model: &ModelBundle, image: &Image) -> Result<Tensor> {
    let params = &model.params;
    let cfg = &model.config;
    let patches = model.patchify(image)?;
    let n = patches.rows();
    let c = cfg.encoder_width;
    let w_patch = param(params, "enc.patch.w");
    let b_patch = param(params, "enc.patch.b");
    let pos = param(params, "enc.pos");
    let mut x = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let mut row = row_mat(patches.row(i), w_patch);
        for ((r, &b), &p) in row.iter_mut().zip(b_patch.data()).zip(pos.row(i)) {
            *r += b + p;
        }
        x.row_mut(i).copy_from_slice(&row);
    }

    let heads = cfg.encoder_heads;
    let dh = c / heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    for layer in 0..cfg.encoder_depth {
        let p = format!("enc.block{layer}");
        let g1 = param(params, &format!("{p}.ln1.g"));
        let b1 = param(params, &format!("{p}.ln1.b"));
        let mut q = Tensor::zeros(&[n, c]);
        let mut k = Tensor::zeros(&[n, c]);
        let mut v = Tensor::zeros(&[n, c]);
        for i in 0..n {
            let normed = layernorm_row(x.row(i), g1, b1);
            q.row_mut(i).copy_from_slice(&row_proj(
                params,
                &normed,
                &format!("{p}.attn.wq"),
                Some((&format!("{p}.attn.q_adapter"), cfg.adapter_scale)),
            ));
            k.row_mut(i)
                .copy_from_slice(&row_mat(&normed, param(params, &format!("{p}.attn.wk"))));
            v.row_mut(i).copy_from_slice(&row_proj(
                params,
                &normed,
                &format!("{p}.attn.wv"),
                Some((&format!("{p}.attn.v_adapter"), cfg.adapter_scale)),
            ));
        }
        for i in 0..n {
            let mut ctx = vec![0.0; c];
            for h in 0..heads {
                let hs = h * dh;
                let mut scores: Vec<f64> = (0..n)
                    .map(|j| {
                        let dot: f64 = q.row(i)[hs..hs + dh]
                            .iter()
                            .zip(&k.row(j)[hs..hs + dh])
                            .map(|(a, b)| a * b)
                            .sum();
                        dot * inv_sqrt
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    total += *s;
                }
                for (j, s) in scores.iter().enumerate() {
                    let w = s / total;
                    for (cv, &vv) in ctx[hs..hs + dh].iter_mut().zip(&v.row(j)[hs..hs + dh]) {
                        *cv += w * vv;
                    }
                }
            }
            let att = row_mat(&ctx, param(params, &format!("{p}.attn.wo")));
            for (xv, a) in x.row_mut(i).iter_mut().zip(att) {
                *xv += a;
            }
        }
        let g2 = param(params, &format!("{p}.ln2.g"));
        let b2 = param(params, &format!("{p}.ln2.b"));
        for i in 0..n {
            let normed = layernorm_row(x.row(i), g2, b2);
            let mut h1 = row_mat(&normed, param(params, &format!("{p}.mlp.fc1")));
            for (hv, &b) in h1.iter_mut().zip(param(params, &format!("{p}.mlp.b1")).data()) {
                *hv = gelu_scalar(*hv + b);
            }
            let mut h2 = row_mat(&h1, param(params, &format!("{p}.mlp.fc2")));
            for (hv, &b) in h2.iter_mut().zip(param(params, &format!("{p}.mlp.b2")).data()) {
                *hv += b;
            }
            for (xv, m) in x.row_mut(i).iter_mut().zip(h2) {
                *xv += m;
            }
        }
    }
    let gf = param(params, "enc.ln_f.g");
    let bf = param(params, "enc.ln_f.b");
    let w_proj = param(params, "proj.w");
    let mut out = Tensor::zeros(&[n, model.config.width]);
    for i in 0..n {
        let normed = layernorm_row(x.row(i), gf, bf);
        out.row_mut(i).copy_from_slice(&row_mat(&normed, w_proj));
    }
    Ok(out)
}

impl<'m> InferSession<'m> {
    /// Encode the image and prefill its token positions.
    pub fn new(model: &'m ModelBundle, image: &Image) -> Result<Self> {
        let cfg = &model.config;
        let mut session = InferSession {
            model,
            stack: CachedStack::new("lm", cfg.lm_depth, cfg.lm_heads, cfg.width),
            hidden_history: Vec::new(),
            last_logits: None,
            flags: Vec::new(),
        };
        let v = encode_image_plain(model, image)?;
        let pos_table = param(&model.params, "lm.pos");
        for i in 0..v.rows() {
            // Positions run uniformly over the concatenated image + text
            // sequence, so image rows take positions 0..N_v.
            let row: Vec<f64> = v
                .row(i)
                .iter()
                .zip(pos_table.row(i))
                .map(|(a, b)| a + b)
                .collect();
            session.advance_embedded(row, true)?;
        }
        Ok(session)
    }

    /// Total positions consumed (image + text).
    pub fn len(&self) -> usize {
        self.stack.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn remaining_context(&self) -> usize {
        self.model.config.context - self.len()
    }

    fn embed(&self, token: TokenId, position: usize) -> Result<Vec<f64>> {
        if position >= self.model.config.context {
            return Err(Error::ContextOverflow {
                length: position + 1,
                limit: self.model.config.context,
            });
        }
        let tok_table = param(&self.model.params, "lm.tok");
        if token >= tok_table.rows() {
            return Err(Error::Config(format!("token id {token} out of vocabulary")));
        }
        let pos_table = param(&self.model.params, "lm.pos");
        Ok(tok_table
            .row(token)
            .iter()
            .zip(pos_table.row(position))
            .map(|(a, b)| a + b)
            .collect())
    }

    fn advance_embedded(&mut self, mut x: Vec<f64>, commit: bool) -> Result<(Vec<f64>, Vec<f64>)> {
        let position = self.len();
        if position >= self.model.config.context {
            return Err(Error::ContextOverflow {
                length: position + 1,
                limit: self.model.config.context,
            });
        }
        let params = &self.model.params;
        let out = self
            .stack
            .advance(params, self.model.config.adapter_scale, std::mem::take(&mut x), commit);
        let z = layernorm_row(
            &out,
            param(params, "lm.ln_f.g"),
            param(params, "lm.ln_f.b"),
        );
        let logits = row_mat(&z, param(params, "head.w"));
        if commit {
            self.hidden_history.push(z.clone());
            self.last_logits = Some(logits.clone());
        }
        Ok((logits, z))
    }

    /// Append text tokens; returns logits at the final position.
    pub fn prefill(&mut self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        let mut last = None;
        for &t in tokens {
            last = Some(self.step(t)?);
        }
        last.or_else(|| self.last_logits.clone()).ok_or_else(|| {
            Error::Config("prefill on an empty session with no tokens".into())
        })
    }

    /// Commit one token and return the logits row for the next position.
    pub fn step(&mut self, token: TokenId) -> Result<Vec<f64>> {
        let x = self.embed(token, self.len())?;
        let (logits, _) = self.advance_embedded(x, true)?;
        Ok(logits)
    }

    /// Hidden state the model would produce after `token`, without
    /// committing it. Used by contrastive candidate scoring.
    pub fn peek_hidden(&mut self, token: TokenId) -> Result<Vec<f64>> {
        let x = self.embed(token, self.len())?;
        let (_, z) = self.advance_embedded(x, false)?;
        Ok(z)
    }

    /// Final-layer hidden states of all committed positions.
    pub fn hidden_history(&self) -> &[Vec<f64>] {
        &self.hidden_history
    }

    pub fn last_logits(&self) -> Option<&[f64]> {
        self.last_logits.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FinetuneMode, ModelConfig};
    use crate::rng::stream;
    use crate::vocab::Vocabulary;
    use rand::Rng;

    fn tiny_model(seed: u64) -> ModelBundle {
        let cfg = ModelConfig {
            image_size: 16,
            patch: 8,
            encoder_width: 16,
            encoder_depth: 1,
            encoder_heads: 2,
            width: 24,
            lm_depth: 2,
            lm_heads: 2,
            context: 48,
            adapter_rank: 2,
            adapter_scale: 0.5,
            finetune_mode: FinetuneMode::Adapters,
        };
        let mut model = ModelBundle::init(&cfg, &Vocabulary::default_charset(), seed).unwrap();
        // Non-zero adapter `up` so the adapter path is exercised.
        let mut rng = stream(seed, &[77]);
        for p in model.params.iter_mut() {
            if p.name.contains("_adapter.up") {
                for v in p.value.data_mut() {
                    *v = rng.gen_range(-0.05..0.05);
                }
            }
        }
        model
    }

    fn test_image(size: usize, seed: u64) -> Image {
        let mut rng = stream(seed, &[5]);
        let mut img = Image::new(size, size);
        for v in img.pixels.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn encoder_plain_matches_tape() {
        let model = tiny_model(21);
        let img = test_image(16, 1);
        let plain = encode_image_plain(&model, &img).unwrap();
        let tape = model.encode_image(&img).unwrap();
        assert_eq!(plain.shape(), tape.shape());
        for (a, b) in plain.data().iter().zip(tape.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn cached_session_matches_tape_forward_rowwise() {
        let model = tiny_model(22);
        let img = test_image(16, 2);
        let text = vec![1usize, 30, 31, 8, 9, 70, 5, 2];
        let full = model.forward(&img, &text).unwrap();

        let mut session = InferSession::new(&model, &img).unwrap();
        let n_v = model.config.num_image_tokens();
        for (j, &t) in text.iter().enumerate() {
            let logits = session.step(t).unwrap();
            let want = full.row(n_v + j);
            for (a, b) in logits.iter().zip(want) {
                assert!((a - b).abs() < 1e-10, "pos {j}: {a} vs {b}");
            }
        }
        assert_eq!(session.len(), n_v + text.len());
    }

    #[test]
    fn peek_matches_step_without_committing() {
        let model = tiny_model(23);
        let img = test_image(16, 3);
        let mut session = InferSession::new(&model, &img).unwrap();
        session.prefill(&[1, 20, 21]).unwrap();
        let len_before = session.len();
        let peeked = session.peek_hidden(30).unwrap();
        assert_eq!(session.len(), len_before);

        let mut session2 = InferSession::new(&model, &img).unwrap();
        session2.prefill(&[1, 20, 21]).unwrap();
        session2.step(30).unwrap();
        let committed = session2.hidden_history().last().unwrap();
        for (a, b) in peeked.iter().zip(committed) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn context_overflow_is_reported() {
        let model = tiny_model(24);
        let img = test_image(16, 4);
        let mut session = InferSession::new(&model, &img).unwrap();
        // context 48, image takes 4, so 44 text tokens fit.
        for i in 0..44 {
            session.step(10 + (i % 5)).unwrap();
        }
        assert!(matches!(
            session.step(10),
            Err(Error::ContextOverflow { .. })
        ));
    }
}
