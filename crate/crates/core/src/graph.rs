//! Reverse-mode autodiff over a recorded op graph.
//!
//! Each forward pass owns a `Graph`: parameters and inputs enter as leaves,
//! ops append nodes, and `backward` walks the tape in reverse accumulating
//! gradients. Graphs are cheap to build and drop, so concurrent forward
//! passes over a shared immutable parameter set each record their own tape.

use crate::error::{Error, Result};
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// y = a * b
    Matmul { a: NodeId, b: NodeId },
    /// y = a * b^T
    MatmulNt { a: NodeId, b: NodeId },
    /// y = a + b (same shape)
    Add { a: NodeId, b: NodeId },
    /// y[i, :] = x[i, :] + bias
    AddRowBias { x: NodeId, bias: NodeId },
    /// y = factor * x
    Scale { x: NodeId, factor: f64 },
    Gelu { x: NodeId },
    /// Per-row normalization with learned gain/shift.
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    /// Row-wise softmax; `causal` restricts row i to columns <= i.
    SoftmaxRows { x: NodeId, causal: bool },
    /// y[i, :] = table[ids[i], :]
    Embedding { table: NodeId, ids: Vec<usize> },
    ConcatRows { a: NodeId, b: NodeId },
    SliceRows { x: NodeId, start: usize, len: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    /// Masked mean of per-position negative log-likelihoods.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

/// GELU (tanh approximation) and its derivative.
pub fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax into `out`; when `causal`, row i covers columns 0..=i.
fn softmax_rows_into(x: &Tensor, causal: bool, out: &mut Tensor) {
    let (n, m) = (x.rows(), x.cols());
    for i in 0..n {
        let limit = if causal { (i + 1).min(m) } else { m };
        let xi = x.row(i);
        let oi = out.row_mut(i);
        let mut mx = f64::NEG_INFINITY;
        for &v in &xi[..limit] {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = 0.0;
        for j in 0..limit {
            let e = (xi[j] - mx).exp();
            oi[j] = e;
            sum += e;
        }
        for o in oi[..limit].iter_mut() {
            *o /= sum;
        }
        for o in oi[limit..].iter_mut() {
            *o = 0.0;
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Matrix product; `a` is (n, k), `b` is (k, m).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = Tensor::zeros(&[va.rows(), vb.cols()]);
        matmul_acc(&mut out, va, vb);
        Ok(self.push(out, Op::Matmul { a, b }))
    }

    /// Product with transposed right operand; `a` is (n, k), `b` is (m, k).
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.cols() {
            return Err(Error::Shape(format!(
                "matmul_nt: {:?} x {:?}^T",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = Tensor::zeros(&[va.rows(), vb.rows()]);
        matmul_nt_acc(&mut out, va, vb);
        Ok(self.push(out, Op::MatmulNt { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = va.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(vb.data()) {
            *o += v;
        }
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.shape() != [vx.cols()] {
            return Err(Error::Shape(format!(
                "add_row_bias: {:?} + bias {:?}",
                vx.shape(),
                vb.shape()
            )));
        }
        let mut out = vx.clone();
        let cols = vx.cols();
        for i in 0..vx.rows() {
            let row = &mut out.data_mut()[i * cols..(i + 1) * cols];
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRowBias { x, bias }))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o *= factor;
        }
        self.push(out, Op::Scale { x, factor })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = gelu_scalar(*o);
        }
        self.push(out, Op::Gelu { x })
    }

    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = vx.cols();
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(Error::Shape(format!(
                "layernorm: x {:?}, gamma {:?}, beta {:?}",
                vx.shape(),
                vg.shape(),
                vb.shape()
            )));
        }
        let mut out = Tensor::zeros(&[vx.rows(), d]);
        for i in 0..vx.rows() {
            let xi = vx.row(i);
            let mean = xi.iter().sum::<f64>() / d as f64;
            let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let oi = out.row_mut(i);
            for j in 0..d {
                oi[j] = (xi[j] - mean) * inv * vg.data()[j] + vb.data()[j];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn softmax_rows(&mut self, x: NodeId, causal: bool) -> NodeId {
        let vx = self.value(x);
        let mut out = Tensor::zeros(&[vx.rows(), vx.cols()]);
        softmax_rows_into(vx, causal, &mut out);
        self.push(out, Op::SoftmaxRows { x, causal })
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        let (rows, d) = (vt.rows(), vt.cols());
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::Config(format!(
                "embedding id {} out of range for table with {} rows",
                bad, rows
            )));
        }
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(vt.row(id));
        }
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::Shape(format!(
                "concat_rows: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut data = Vec::with_capacity(va.len() + vb.len());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let out = Tensor::from_vec(&[va.rows() + vb.rows(), va.cols()], data)?;
        Ok(self.push(out, Op::ConcatRows { a, b }))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if start + len > vx.rows() {
            return Err(Error::Shape(format!(
                "slice_rows: [{start}, {}) out of {:?}",
                start + len,
                vx.shape()
            )));
        }
        let c = vx.cols();
        let data = vx.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::from_vec(&[len, c], data)?;
        Ok(self.push(out, Op::SliceRows { x, start, len }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if start + len > vx.cols() {
            return Err(Error::Shape(format!(
                "slice_cols: [{start}, {}) out of {:?}",
                start + len,
                vx.shape()
            )));
        }
        let mut out = Tensor::zeros(&[vx.rows(), len]);
        for i in 0..vx.rows() {
            out.row_mut(i).copy_from_slice(&vx.row(i)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols { x, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols: no parts".into()));
        }
        let n = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != n {
                return Err(Error::Shape(format!(
                    "concat_cols: row mismatch {:?} vs {} rows",
                    v.shape(),
                    n
                )));
            }
            total += v.cols();
        }
        let mut out = Tensor::zeros(&[n, total]);
        let mut off = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            let c = v.cols();
            for i in 0..n {
                let src = v.row(i);
                out.data_mut()[i * total + off..i * total + off + c].copy_from_slice(src);
            }
            off += c;
        }
        Ok(self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Masked mean cross-entropy over rows of `logits`.
    ///
    /// loss = sum_i w_i * (-log softmax(logits_i)[t_i]) / sum_i w_i, so
    /// positions with weight 0 contribute exactly zero.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<NodeId> {
        let vl = self.value(logits);
        let (n, m) = (vl.rows(), vl.cols());
        if targets.len() != n || weights.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {:?}, {} targets, {} weights",
                vl.shape(),
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= m) {
            return Err(Error::Config(format!(
                "cross_entropy target {} out of vocabulary {}",
                bad, m
            )));
        }
        if weights.iter().any(|&w| w != 0.0 && w != 1.0) {
            return Err(Error::Config(
                "cross_entropy mask entries must be 0 or 1".into(),
            ));
        }
        let wsum: f64 = weights.iter().sum();
        if wsum == 0.0 {
            return Err(Error::EmptySupervision);
        }
        let mut total = 0.0;
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let row = vl.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            total += weights[i] * (lse - row[targets[i]]);
        }
        let out = Tensor::scalar(total / wsum);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    fn accumulate(&mut self, id: NodeId, contrib: Tensor) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (gv, cv) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *gv += cv;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    /// Run reverse-mode accumulation from a scalar node.
    ///
    /// After the walk, gradients of leaf nodes are available through
    /// [`Graph::grad`]; intermediate gradients are consumed as they
    /// propagate.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let seed_shape = self.value(loss).shape().to_vec();
        let mut seed = Tensor::zeros(&seed_shape);
        seed.data_mut()[0] = 1.0;
        self.nodes[loss.0].grad = Some(seed);
        for idx in (0..self.nodes.len()).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(dy) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let mut da = Tensor::zeros(self.value(a).shape());
                    matmul_nt_acc(&mut da, &dy, self.value(b));
                    let mut db = Tensor::zeros(self.value(b).shape());
                    matmul_tn_acc(&mut db, self.value(a), &dy);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::MatmulNt { a, b } => {
                    let mut da = Tensor::zeros(self.value(a).shape());
                    matmul_acc(&mut da, &dy, self.value(b));
                    let mut db = Tensor::zeros(self.value(b).shape());
                    matmul_tn_acc(&mut db, &dy, self.value(a));
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, dy.clone());
                    self.accumulate(b, dy);
                }
                Op::AddRowBias { x, bias } => {
                    let cols = dy.cols();
                    let mut db = Tensor::zeros(&[cols]);
                    for i in 0..dy.rows() {
                        for (g, &v) in db.data_mut().iter_mut().zip(dy.row(i)) {
                            *g += v;
                        }
                    }
                    self.accumulate(x, dy);
                    self.accumulate(bias, db);
                }
                Op::Scale { x, factor } => {
                    let mut dx = dy;
                    for v in dx.data_mut() {
                        *v *= factor;
                    }
                    self.accumulate(x, dx);
                }
                Op::Gelu { x } => {
                    let mut dx = dy;
                    for (g, &xv) in dx.data_mut().iter_mut().zip(self.value(x).data()) {
                        *g *= gelu_grad_scalar(xv);
                    }
                    self.accumulate(x, dx);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let vx = self.value(x).clone();
                    let vg = self.value(gamma).clone();
                    let d = vx.cols();
                    let df = d as f64;
                    let mut dx = Tensor::zeros(vx.shape());
                    let mut dgamma = Tensor::zeros(&[d]);
                    let mut dbeta = Tensor::zeros(&[d]);
                    for i in 0..vx.rows() {
                        let xi = vx.row(i);
                        let mean = xi.iter().sum::<f64>() / df;
                        let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
                        let inv = 1.0 / (var + eps).sqrt();
                        let dyi = dy.row(i);
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (xi[j] - mean) * inv;
                            let dxhat = dyi[j] * vg.data()[j];
                            dgamma.data_mut()[j] += dyi[j] * xhat;
                            dbeta.data_mut()[j] += dyi[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let dxi = dx.row_mut(i);
                        for j in 0..d {
                            let xhat = (xi[j] - mean) * inv;
                            let dxhat = dyi[j] * vg.data()[j];
                            dxi[j] =
                                inv * (dxhat - sum_dxhat / df - xhat * sum_dxhat_xhat / df);
                        }
                    }
                    self.accumulate(x, dx);
                    self.accumulate(gamma, dgamma);
                    self.accumulate(beta, dbeta);
                }
                Op::SoftmaxRows { x, causal } => {
                    let y = &self.nodes[idx].value;
                    let (n, m) = (y.rows(), y.cols());
                    let mut dx = Tensor::zeros(&[n, m]);
                    for i in 0..n {
                        let limit = if causal { (i + 1).min(m) } else { m };
                        let yi = y.row(i);
                        let dyi = dy.row(i);
                        let dot: f64 = (0..limit).map(|j| dyi[j] * yi[j]).sum();
                        let dxi = dx.row_mut(i);
                        for j in 0..limit {
                            dxi[j] = yi[j] * (dyi[j] - dot);
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::Embedding { table, ids } => {
                    let mut dt = Tensor::zeros(self.value(table).shape());
                    let d = dt.cols();
                    for (i, &id) in ids.iter().enumerate() {
                        let src = dy.row(i);
                        let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                        for (g, &v) in dst.iter_mut().zip(src) {
                            *g += v;
                        }
                    }
                    self.accumulate(table, dt);
                }
                Op::ConcatRows { a, b } => {
                    let na = self.value(a).rows();
                    let c = dy.cols();
                    let da = Tensor::from_vec(&[na, c], dy.data()[..na * c].to_vec())?;
                    let db = Tensor::from_vec(
                        &[dy.rows() - na, c],
                        dy.data()[na * c..].to_vec(),
                    )?;
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::SliceRows { x, start, len } => {
                    let mut dx = Tensor::zeros(self.value(x).shape());
                    let c = dx.cols();
                    dx.data_mut()[start * c..(start + len) * c].copy_from_slice(dy.data());
                    self.accumulate(x, dx);
                }
                Op::SliceCols { x, start, len } => {
                    let mut dx = Tensor::zeros(self.value(x).shape());
                    for i in 0..dy.rows() {
                        dx.row_mut(i)[start..start + len].copy_from_slice(dy.row(i));
                    }
                    self.accumulate(x, dx);
                }
                Op::ConcatCols { parts } => {
                    let mut off = 0;
                    for &p in &parts {
                        let c = self.value(p).cols();
                        let mut dp = Tensor::zeros(self.value(p).shape());
                        for i in 0..dy.rows() {
                            dp.row_mut(i).copy_from_slice(&dy.row(i)[off..off + c]);
                        }
                        self.accumulate(p, dp);
                        off += c;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                } => {
                    let upstream = dy.item();
                    let vl = self.value(logits).clone();
                    let (n, m) = (vl.rows(), vl.cols());
                    let wsum: f64 = weights.iter().sum();
                    let mut dl = Tensor::zeros(&[n, m]);
                    for i in 0..n {
                        if weights[i] == 0.0 {
                            continue;
                        }
                        let row = vl.row(i);
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
                        let scale = upstream * weights[i] / wsum;
                        let drow = dl.row_mut(i);
                        for j in 0..m {
                            drow[j] = scale * (row[j] - mx).exp() / sum;
                        }
                        drow[targets[i]] -= scale;
                    }
                    self.accumulate(logits, dl);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_error, rel_error};
    use crate::rng::stream;
    use rand::Rng;

    const FD_H: f64 = 1e-5;
    const FD_TOL: f64 = 1e-4;

    fn rand_vec(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn linear_identity_case() {
        let mut g = Graph::new();
        let eye = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let a = g.leaf(eye.clone());
        let b = g.leaf(eye.clone());
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y), &eye);
    }

    #[test]
    fn linear_row_sums() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2, 3], vec![1.0; 6]).unwrap());
        let w = g.leaf(Tensor::from_vec(&[3, 1], vec![1.0; 3]).unwrap());
        let y = g.matmul(x, w).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 3.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[4, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = stream(101, &[0]);
        for case in 0..20 {
            let (n, k, m) = (4, 5, 3);
            let xa = rand_vec(&mut rng, n * k);
            let xb = rand_vec(&mut rng, k * m);

            // Reduce the product to a scalar with all-ones contractions so
            // every output element contributes to the loss.
            let mut g = Graph::new();
            let a = g.leaf(Tensor::from_vec(&[n, k], xa.clone()).unwrap());
            let b = g.leaf(Tensor::from_vec(&[k, m], xb.clone()).unwrap());
            let c = g.leaf(Tensor::from_vec(&[m, 1], vec![1.0; m]).unwrap());
            let y = g.matmul(a, b).unwrap();
            let yc = g.matmul(y, c).unwrap();
            let ones = g.leaf(Tensor::from_vec(&[1, n], vec![1.0; n]).unwrap());
            let loss = g.matmul(ones, yc).unwrap();
            g.backward(loss).unwrap();
            let ga = g.grad(a).unwrap().data().to_vec();
            let gb = g.grad(b).unwrap().data().to_vec();

            let xa2 = xa.clone();
            let xb2 = xb.clone();
            let mut fa = move |p: &[f64]| {
                let mut gg = Graph::new();
                let a = gg.leaf(Tensor::from_vec(&[n, k], p.to_vec()).unwrap());
                let b = gg.leaf(Tensor::from_vec(&[k, m], xb2.clone()).unwrap());
                let y = gg.matmul(a, b).unwrap();
                gg.value(y).data().iter().sum()
            };
            let err_a = max_rel_error(&mut fa, &xa, &ga, FD_H);
            assert!(err_a < FD_TOL, "case {case}: dA err {err_a}");

            let mut fb = move |p: &[f64]| {
                let mut gg = Graph::new();
                let a = gg.leaf(Tensor::from_vec(&[n, k], xa2.clone()).unwrap());
                let b = gg.leaf(Tensor::from_vec(&[k, m], p.to_vec()).unwrap());
                let y = gg.matmul(a, b).unwrap();
                gg.value(y).data().iter().sum()
            };
            let err_b = max_rel_error(&mut fb, &xb, &gb, FD_H);
            assert!(err_b < FD_TOL, "case {case}: dB err {err_b}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = stream(7, &[1]);
        let x = Tensor::from_vec(&[6, 6], rand_vec(&mut rng, 36)).unwrap();
        let mut g = Graph::new();
        let xl = g.leaf(x);
        let y = g.softmax_rows(xl, false);
        for i in 0..6 {
            let s: f64 = g.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row {i} sums to {s}");
        }
        // Causal rows over the allowed prefix also sum to one.
        let mut g2 = Graph::new();
        let mut rng = stream(7, &[2]);
        let xl = g2.leaf(Tensor::from_vec(&[5, 5], rand_vec(&mut rng, 25)).unwrap());
        let y = g2.softmax_rows(xl, true);
        for i in 0..5 {
            let row = g2.value(y).row(i);
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            for (j, &v) in row.iter().enumerate() {
                if j > i {
                    assert_eq!(v, 0.0, "future position leaked at ({i}, {j})");
                }
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_vocab() {
        let m = 10;
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[1, m]));
        let loss = g.cross_entropy(logits, &[3], &[1.0]).unwrap();
        let expect = (m as f64).ln();
        assert!((g.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_masked_positions_do_not_matter() {
        let mut rng = stream(13, &[0]);
        let data = rand_vec(&mut rng, 4 * 7);
        let loss_with = |target_at_masked: usize| {
            let mut g = Graph::new();
            let logits = g.leaf(Tensor::from_vec(&[4, 7], data.clone()).unwrap());
            let targets = [1, target_at_masked, 2, 3];
            let weights = [1.0, 0.0, 1.0, 1.0];
            let loss = g.cross_entropy(logits, &targets, &weights).unwrap();
            g.value(loss).item()
        };
        assert_eq!(loss_with(0), loss_with(6));
    }

    #[test]
    fn cross_entropy_all_zero_mask_is_error() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[2, 4]));
        let err = g.cross_entropy(logits, &[0, 1], &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::EmptySupervision));
    }

    #[test]
    fn cross_entropy_matches_direct_summation_oracle() {
        let mut rng = stream(17, &[0]);
        let (n, m) = (5, 9);
        let data = rand_vec(&mut rng, n * m);
        let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..m)).collect();
        let weights = vec![1.0, 0.0, 1.0, 1.0, 0.0];

        let mut g = Graph::new();
        let logits = g.leaf(Tensor::from_vec(&[n, m], data.clone()).unwrap());
        let loss = g.cross_entropy(logits, &targets, &weights).unwrap();

        // Naive summation oracle.
        let mut total = 0.0;
        let mut wsum = 0.0;
        for i in 0..n {
            let row = &data[i * m..(i + 1) * m];
            let exp_sum: f64 = row.iter().map(|v| v.exp()).sum();
            let p = row[targets[i]].exp() / exp_sum;
            total += weights[i] * -p.ln();
            wsum += weights[i];
        }
        let oracle = total / wsum;
        assert!((g.value(loss).item() - oracle).abs() < 1e-8);
    }

    #[test]
    fn cross_entropy_of_one_hot_correct_distribution_is_zero() {
        // Logits that put overwhelming mass on the target.
        let mut g = Graph::new();
        let mut data = vec![-1e3; 6];
        data[2] = 1e3;
        let logits = g.leaf(Tensor::from_vec(&[1, 6], data).unwrap());
        let loss = g.cross_entropy(logits, &[2], &[1.0]).unwrap();
        assert!(g.value(loss).item().abs() < 1e-9);
    }

    /// Finite-difference checks for each remaining differentiable op.
    #[test]
    fn elementwise_and_norm_ops_match_finite_differences() {
        let mut rng = stream(23, &[0]);
        for case in 0..20 {
            let n = 3;
            let d = 4;
            let x0 = rand_vec(&mut rng, n * d);
            let gamma0 = rand_vec(&mut rng, d);
            let beta0 = rand_vec(&mut rng, d);

            // Composite: layernorm -> gelu -> scale -> softmax -> CE picks up
            // every op's backward in one chain.
            let build = |xv: &[f64], gv: &[f64], bv: &[f64]| {
                let mut g = Graph::new();
                let x = g.leaf(Tensor::from_vec(&[n, d], xv.to_vec()).unwrap());
                let gamma = g.leaf(Tensor::from_vec(&[d], gv.to_vec()).unwrap());
                let beta = g.leaf(Tensor::from_vec(&[d], bv.to_vec()).unwrap());
                let ln = g.layernorm(x, gamma, beta, 1e-5).unwrap();
                let act = g.gelu(ln);
                let sc = g.scale(act, 1.7);
                let loss = g.cross_entropy(sc, &[0, 2, 1], &[1.0, 1.0, 0.0]).unwrap();
                (g, x, gamma, beta, loss)
            };

            let (mut g, x, gamma, beta, loss) = build(&x0, &gamma0, &beta0);
            g.backward(loss).unwrap();
            let gx = g.grad(x).unwrap().data().to_vec();
            let gg = g.grad(gamma).unwrap().data().to_vec();
            let gb = g.grad(beta).unwrap().data().to_vec();

            let (g0, b0c) = (gamma0.clone(), beta0.clone());
            let mut fx = |p: &[f64]| {
                let (g, _, _, _, loss) = build(p, &g0, &b0c);
                g.value(loss).item()
            };
            let err = max_rel_error(&mut fx, &x0, &gx, FD_H);
            assert!(err < FD_TOL, "case {case} x err {err}");

            let (x0c, b0c) = (x0.clone(), beta0.clone());
            let mut fg = |p: &[f64]| {
                let (g, _, _, _, loss) = build(&x0c, p, &b0c);
                g.value(loss).item()
            };
            let err = max_rel_error(&mut fg, &gamma0, &gg, FD_H);
            assert!(err < FD_TOL, "case {case} gamma err {err}");

            let (x0c, g0c) = (x0.clone(), gamma0.clone());
            let mut fb = |p: &[f64]| {
                let (g, _, _, _, loss) = build(&x0c, &g0c, p);
                g.value(loss).item()
            };
            let err = max_rel_error(&mut fb, &beta0, &gb, FD_H);
            assert!(err < FD_TOL, "case {case} beta err {err}");
        }
    }

    #[test]
    fn embedding_and_structural_ops_match_finite_differences() {
        let mut rng = stream(29, &[0]);
        for case in 0..20 {
            let (v, d) = (6, 4);
            let table0 = rand_vec(&mut rng, v * d);
            let ids = vec![2usize, 0, 5, 2];

            let build = |tv: &[f64]| {
                let mut g = Graph::new();
                let table = g.leaf(Tensor::from_vec(&[v, d], tv.to_vec()).unwrap());
                let emb = g.embedding(table, &ids).unwrap();
                // Structural ops: split then re-join rows and columns.
                let top = g.slice_rows(emb, 0, 2).unwrap();
                let bottom = g.slice_rows(emb, 2, 2).unwrap();
                let joined = g.concat_rows(top, bottom).unwrap();
                let left = g.slice_cols(joined, 0, 2).unwrap();
                let right = g.slice_cols(joined, 2, 2).unwrap();
                let rejoined = g.concat_cols(&[left, right]).unwrap();
                let sm = g.softmax_rows(rejoined, true);
                let loss = g
                    .cross_entropy(sm, &[0, 1, 2, 3], &[1.0, 1.0, 1.0, 1.0])
                    .unwrap();
                (g, table, loss)
            };

            let (mut g, table, loss) = build(&table0);
            g.backward(loss).unwrap();
            let gt = g.grad(table).unwrap().data().to_vec();

            let mut f = |p: &[f64]| {
                let (g, _, loss) = build(p);
                g.value(loss).item()
            };
            let err = max_rel_error(&mut f, &table0, &gt, FD_H);
            assert!(err < FD_TOL, "case {case} table err {err}");
        }
    }

    #[test]
    fn add_row_bias_gradients_match_finite_differences() {
        let mut rng = stream(31, &[0]);
        let (n, d) = (4, 3);
        let x0 = rand_vec(&mut rng, n * d);
        let b0 = rand_vec(&mut rng, d);

        let build = |xv: &[f64], bv: &[f64]| {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::from_vec(&[n, d], xv.to_vec()).unwrap());
            let b = g.leaf(Tensor::from_vec(&[d], bv.to_vec()).unwrap());
            let y = g.add_row_bias(x, b).unwrap();
            let act = g.gelu(y);
            let loss = g.cross_entropy(act, &[0, 1, 2, 0], &[1.0; 4]).unwrap();
            (g, x, b, loss)
        };
        let (mut g, x, b, loss) = build(&x0, &b0);
        g.backward(loss).unwrap();
        let gx = g.grad(x).unwrap().data().to_vec();
        let gb = g.grad(b).unwrap().data().to_vec();

        let b0c = b0.clone();
        let mut fx = |p: &[f64]| {
            let (g, _, _, loss) = build(p, &b0c);
            g.value(loss).item()
        };
        assert!(max_rel_error(&mut fx, &x0, &gx, FD_H) < FD_TOL);
        let x0c = x0.clone();
        let mut fb = |p: &[f64]| {
            let (g, _, _, loss) = build(&x0c, p);
            g.value(loss).item()
        };
        assert!(max_rel_error(&mut fb, &b0, &gb, FD_H) < FD_TOL);
    }

    #[test]
    fn rel_error_guard_handles_zero_gradients() {
        assert_eq!(rel_error(0.0, 1e-9), 0.0);
    }
}
