//! Transformer building blocks composed from tape ops.
//!
//! Layers reference parameters by name; `ParamLeaves` binds each named
//! parameter to a graph leaf on first use so gradients can be read back per
//! name after `backward`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{GradMap, ParamSet};

pub const LN_EPS: f64 = 1e-5;

/// Low-rank adapter settings for attention query/value projections.
#[derive(Debug, Clone, Copy)]
pub struct AdapterSpec {
    pub rank: usize,
    pub scale: f64,
}

/// Multi-head attention settings.
#[derive(Debug, Clone, Copy)]
pub struct AttentionSpec {
    pub heads: usize,
    pub causal: bool,
    pub adapter: Option<AdapterSpec>,
}

/// Binds parameters to graph leaves, one leaf per parameter per graph.
pub struct ParamLeaves<'a> {
    set: &'a ParamSet,
    bound: HashMap<String, NodeId>,
}

impl<'a> ParamLeaves<'a> {
    pub fn new(set: &'a ParamSet) -> Self {
        ParamLeaves {
            set,
            bound: HashMap::new(),
        }
    }

    pub fn leaf(&mut self, g: &mut Graph, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let p = self
            .set
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))?;
        let id = g.leaf(p.value.clone());
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Gradients of all bound trainable parameters, keyed by name.
    pub fn trainable_grads(&self, g: &Graph) -> GradMap {
        let mut out = GradMap::new();
        for (name, &id) in &self.bound {
            let param = self.set.get(name).expect("bound name exists");
            if !param.trainable {
                continue;
            }
            if let Some(grad) = g.grad(id) {
                out.insert(name.clone(), grad.clone());
            }
        }
        out
    }
}

/// x * W (+ bias). `weight` is stored (d_in, d_out).
pub fn linear(
    g: &mut Graph,
    pl: &mut ParamLeaves,
    x: NodeId,
    weight: &str,
    bias: Option<&str>,
) -> Result<NodeId> {
    let w = pl.leaf(g, weight)?;
    let y = g.matmul(x, w)?;
    match bias {
        Some(b) => {
            let bl = pl.leaf(g, b)?;
            g.add_row_bias(y, bl)
        }
        None => Ok(y),
    }
}

fn projected(
    g: &mut Graph,
    pl: &mut ParamLeaves,
    x: NodeId,
    weight: &str,
    adapter: Option<(&str, AdapterSpec)>,
) -> Result<NodeId> {
    let base = linear(g, pl, x, weight, None)?;
    let Some((prefix, spec)) = adapter else {
        return Ok(base);
    };
    let down = pl.leaf(g, &format!("{prefix}.down"))?;
    let up = pl.leaf(g, &format!("{prefix}.up"))?;
    let lo = g.matmul(x, down)?;
    let delta = g.matmul(lo, up)?;
    let scaled = g.scale(delta, spec.scale);
    g.add(base, scaled)
}

/// Multi-head self-attention over `x` (n, d). Parameter names are
/// `{prefix}.wq/.wk/.wv/.wo`, with optional adapters at
/// `{prefix}.q_adapter.*` and `{prefix}.v_adapter.*`.
pub fn attention(
    g: &mut Graph,
    pl: &mut ParamLeaves,
    x: NodeId,
    prefix: &str,
    spec: AttentionSpec,
) -> Result<NodeId> {
    let d = g.value(x).cols();
    if spec.heads == 0 || d % spec.heads != 0 {
        return Err(Error::Config(format!(
            "attention width {d} not divisible by {} heads",
            spec.heads
        )));
    }
    let dh = d / spec.heads;
    let adapter_q = spec
        .adapter
        .map(|a| (format!("{prefix}.q_adapter"), a));
    let adapter_v = spec
        .adapter
        .map(|a| (format!("{prefix}.v_adapter"), a));
    let q = projected(
        g,
        pl,
        x,
        &format!("{prefix}.wq"),
        adapter_q.as_ref().map(|(n, a)| (n.as_str(), *a)),
    )?;
    let k = linear(g, pl, x, &format!("{prefix}.wk"), None)?;
    let v = projected(
        g,
        pl,
        x,
        &format!("{prefix}.wv"),
        adapter_v.as_ref().map(|(n, a)| (n.as_str(), *a)),
    )?;

    let mut heads = Vec::with_capacity(spec.heads);
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    for h in 0..spec.heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scaled = g.scale(scores, inv_sqrt);
        let probs = g.softmax_rows(scaled, spec.causal);
        heads.push(g.matmul(probs, vh)?);
    }
    let ctx = g.concat_cols(&heads)?;
    linear(g, pl, ctx, &format!("{prefix}.wo"), None)
}

/// Two-layer GELU MLP: `{prefix}.fc1/.b1/.fc2/.b2`.
pub fn mlp(g: &mut Graph, pl: &mut ParamLeaves, x: NodeId, prefix: &str) -> Result<NodeId> {
    let h = linear(g, pl, x, &format!("{prefix}.fc1"), Some(&format!("{prefix}.b1")))?;
    let a = g.gelu(h);
    linear(g, pl, a, &format!("{prefix}.fc2"), Some(&format!("{prefix}.b2")))
}

/// Layer normalization with parameters `{prefix}.g` and `{prefix}.b`.
pub fn layernorm(g: &mut Graph, pl: &mut ParamLeaves, x: NodeId, prefix: &str) -> Result<NodeId> {
    let gamma = pl.leaf(g, &format!("{prefix}.g"))?;
    let beta = pl.leaf(g, &format!("{prefix}.b"))?;
    g.layernorm(x, gamma, beta, LN_EPS)
}

/// Pre-norm transformer block: x + attn(ln1(x)), then x + mlp(ln2(x)).
pub fn block(
    g: &mut Graph,
    pl: &mut ParamLeaves,
    x: NodeId,
    prefix: &str,
    spec: AttentionSpec,
) -> Result<NodeId> {
    let normed = layernorm(g, pl, x, &format!("{prefix}.ln1"))?;
    let att = attention(g, pl, normed, &format!("{prefix}.attn"), spec)?;
    let x = g.add(x, att)?;
    let normed = layernorm(g, pl, x, &format!("{prefix}.ln2"))?;
    let ff = mlp(g, pl, normed, &format!("{prefix}.mlp"))?;
    g.add(x, ff)
}
