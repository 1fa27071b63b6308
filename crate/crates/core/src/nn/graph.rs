//! Reverse-mode autodiff over a recorded op tape.
//!
//! A `Graph` is rebuilt per forward pass; parameters live in a [`ParamStore`]
//! and are spliced in as leaves so their gradients can be harvested after
//! `backward`.

use crate::error::{Error, Result};
use crate::nn::optim::{ParamId, ParamStore};
use crate::nn::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

type BackOp = Box<dyn Fn(&[Tensor], &mut Vec<Vec<f64>>)>;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Tensor>,
    back_ops: Vec<Option<BackOp>>,
    param_nodes: Vec<(ParamId, NodeId)>,
    grads: Vec<Vec<f64>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.grads[id.0]
    }

    fn push(&mut self, t: Tensor, op: Option<BackOp>) -> NodeId {
        debug_assert!(t.is_finite(), "non-finite tensor on tape");
        self.nodes.push(t);
        self.back_ops.push(op);
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, None)
    }

    /// Splice a stored parameter into the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let node = self.leaf(store.get(id).clone());
        self.param_nodes.push((id, node));
        node
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(ta.shape, tb.shape, "add: shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        let out_idx = self.nodes.len();
        self.push(
            Tensor { shape, data },
            Some(Box::new(move |_v, g| {
                let go = g[out_idx].clone();
                for (d, s) in g[a.0].iter_mut().zip(&go) {
                    *d += s;
                }
                for (d, s) in g[b.0].iter_mut().zip(&go) {
                    *d += s;
                }
            })),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(ta.shape, tb.shape, "sub: shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let shape = ta.shape.clone();
        let out_idx = self.nodes.len();
        self.push(
            Tensor { shape, data },
            Some(Box::new(move |_v, g| {
                let go = g[out_idx].clone();
                for (d, s) in g[a.0].iter_mut().zip(&go) {
                    *d += s;
                }
                for (d, s) in g[b.0].iter_mut().zip(&go) {
                    *d -= s;
                }
            })),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(ta.shape, tb.shape, "mul: shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        let out_idx = self.nodes.len();
        self.push(
            Tensor { shape, data },
            Some(Box::new(move |v, g| {
                let go = g[out_idx].clone();
                for i in 0..go.len() {
                    g[a.0][i] += go[i] * v[b.0].data[i];
                    g[b.0][i] += go[i] * v[a.0].data[i];
                }
            })),
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let ta = &self.nodes[a.0];
        let data = ta.data.iter().map(|x| x * c).collect();
        let shape = ta.shape.clone();
        let out_idx = self.nodes.len();
        self.push(
            Tensor { shape, data },
            Some(Box::new(move |_v, g| {
                let go = g[out_idx].clone();
                for (d, s) in g[a.0].iter_mut().zip(&go) {
                    *d += c * s;
                }
            })),
        )
    }

    /// Add a constant tensor (no gradient flows into it).
    pub fn add_const(&mut self, a: NodeId, t: &Tensor) -> NodeId {
        let ta = &self.nodes[a.0];
        assert_eq!(ta.shape, t.shape, "add_const: shape mismatch");
        let data = ta.data.iter().zip(&t.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        let out_idx = self.nodes.len();
        self.push(
            Tensor { shape, data },
            Some(Box::new(move |_v, g| {
                let go = g[out_idx].clone();
                for (d, s) in g[a.0].iter_mut().zip(&go) {
                    *d += s;
                }
            })),
        )
    }

    /// x[n,m] + row-broadcast b[m]
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (tx, tb) = (&self.nodes[x.0], &self.nodes[b.0]);
        let (n, m) = (tx.rows(), tx.cols());
        assert_eq!(tb.len(), m, "add_bias: width mismatch");
        let mut data = tx.data.clone();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += tb.data[j];
            }
        }
        let shape = tx.shape.clone();
        let out_idx = self.nodes.len();
        self.push(
            Tensor { shape, data },
            Some(Box::new(move |_v, g| {
                let go = g[out_idx].clone();
                for (d, s) in g[x.0].iter_mut().zip(&go) {
                    *d += s;
                }
                for i in 0..n {
                    for j in 0..m {
                        g[b.0][j] += go[i * m + j];
                    }
                }
            })),
        )
    }

    /// x[n,m] * row-broadcast w[m]
    pub fn mul_row(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (tx, tw) = (&self.nodes[x.0], &self.nodes[w.0]);
        let (n, m) = (tx.rows(), tx.cols());
        assert_eq!(tw.len(), m, "mul_row: width mismatch");
        let mut data = tx.data.clone();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] *= tw.data[j];
            }
        }
        let shape = tx.shape.clone();
        let out_idx = self.nodes.len();
        self.push(
            Tensor { shape, data },
            Some(Box::new(move |v, g| {
                let go = g[out_idx].clone();
                for i in 0..n {
                    for j in 0..m {
                        g[x.0][i * m + j] += go[i * m + j] * v[w.0].data[j];
                        g[w.0][j] += go[i * m + j] * v[x.0].data[i * m + j];
                    }
                }
            })),
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let (n, k) = (ta.rows(), ta.cols());
        let (kb, m) = (tb.rows(), tb.cols());
        assert_eq!(k, kb, "matmul: inner dimension mismatch");
        let mut data = vec![0.0; n * m];
        matmul_acc(&ta.data, &tb.data, &mut data, n, k, m);
        let out_idx = self.nodes.len();
        self.push(
            Tensor { shape: vec![n, m], data },
            Some(Box::new(move |v, g| {
                let go = g[out_idx].clone();
                // dA += dC @ B^T ; dB += A^T @ dC
                matmul_nt_acc(&go, &v[b.0].data, &mut g[a.0], n, m, k);
                matmul_tn_acc(&v[a.0].data, &go, &mut g[b.0], k, n, m);
            })),
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0];
        let (n, m) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = ta.data[i * m + j];
            }
        }
        let out_idx = self.nodes.len();
        self.push(
            Tensor { shape: vec![m, n], data },
            Some(Box::new(move |_v, g| {
                let go = g[out_idx].clone();
                for i in 0..n {
                    for j in 0..m {
                        g[a.0][i * m + j] += go[j * n + i];
                    }
                }
            })),
        )
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0];
        let data = ta.data.iter().map(|&x| x.max(0.0)).collect();
        let shape = ta.shape.clone();
        let out_idx = self.nodes.len();
        self.push(
            Tensor { shape, data },
            Some(Box::new(move |v, g| {
                let go = g[out_idx].clone();
                for i in 0..go.len() {
                    if v[a.0].data[i] > 0.0 {
                        g[a.0][i] += go[i];
                    }
                }
            })),
        )
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0];
        let (n, m) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = &ta.data[i * m..(i + 1) * m];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..m {
                let e = (row[j] - max).exp();
                data[i * m + j] = e;
                sum += e;
            }
            for j in 0..m {
                data[i * m + j] /= sum;
            }
        }
        let shape = ta.shape.clone();
        let out_idx = self.nodes.len();
        self.push(
            Tensor { shape, data },
            Some(Box::new(move |v, g| {
                let go = g[out_idx].clone();
                let p = &v[out_idx].data;
                for i in 0..n {
                    let mut dot = 0.0;
                    for j in 0..m {
                        dot += go[i * m + j] * p[i * m + j];
                    }
                    for j in 0..m {
                        g[a.0][i * m + j] += p[i * m + j] * (go[i * m + j] - dot);
                    }
                }
            })),
        )
    }

    /// Row-wise layer normalization (no affine; compose with mul_row/add_bias).
    pub fn layernorm(&mut self, x: NodeId) -> NodeId {
        const EPS: f64 = 1e-5;
        let tx = &self.nodes[x.0];
        let (n, m) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; n * m];
        let mut inv_sigma = vec![0.0; n];
        for i in 0..n {
            let row = &tx.data[i * m..(i + 1) * m];
            let mu = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|&v| (v - mu).powi(2)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_sigma[i] = is;
            for j in 0..m {
                data[i * m + j] = (row[j] - mu) * is;
            }
        }
        let out_idx = self.nodes.len();
        self.push(
            Tensor { shape: tx.shape.clone(), data },
            Some(Box::new(move |v, g| {
                let go = g[out_idx].clone();
                let y = &v[out_idx].data;
                for i in 0..n {
                    let grow = &go[i * m..(i + 1) * m];
                    let yrow = &y[i * m..(i + 1) * m];
                    let mean_g = grow.iter().sum::<f64>() / m as f64;
                    let mean_gy =
                        grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                    for j in 0..m {
                        g[x.0][i * m + j] +=
                            inv_sigma[i] * (grow[j] - mean_g - yrow[j] * mean_gy);
                    }
                }
            })),
        )
    }

    /// Select rows of `table` by index (embedding lookup); backward scatter-adds.
    pub fn gather_rows(&mut self, table: NodeId, indices: Vec<usize>) -> NodeId {
        let tt = &self.nodes[table.0];
        let m = tt.cols();
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in &indices {
            data.extend_from_slice(&tt.data[i * m..(i + 1) * m]);
        }
        let n = indices.len();
        let out_idx = self.nodes.len();
        self.push(
            Tensor { shape: vec![n, m], data },
            Some(Box::new(move |_v, g| {
                let go = g[out_idx].clone();
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..m {
                        g[table.0][i * m + j] += go[r * m + j];
                    }
                }
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let m = self.nodes[parts[0].0].cols();
        let mut data = Vec::new();
        let mut row_counts = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = &self.nodes[p.0];
            assert_eq!(t.cols(), m, "concat_rows: width mismatch");
            row_counts.push(t.rows());
            data.extend_from_slice(&t.data);
        }
        let n: usize = row_counts.iter().sum();
        let parts: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let out_idx = self.nodes.len();
        self.push(
            Tensor { shape: vec![n, m], data },
            Some(Box::new(move |_v, g| {
                let go = g[out_idx].clone();
                let mut offset = 0;
                for (pi, &p) in parts.iter().enumerate() {
                    let rows = row_counts[pi];
                    for i in 0..rows * m {
                        g[p][i] += go[offset + i];
                    }
                    offset += rows * m;
                }
            })),
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let ta = &self.nodes[a.0];
        let (n, m) = (ta.rows(), ta.cols());
        assert!(start + len <= m, "slice_cols: out of range");
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&ta.data[i * m + start..i * m + start + len]);
        }
        let out_idx = self.nodes.len();
        self.push(
            Tensor { shape: vec![n, len], data },
            Some(Box::new(move |_v, g| {
                let go = g[out_idx].clone();
                for i in 0..n {
                    for j in 0..len {
                        g[a.0][i * m + start + j] += go[i * len + j];
                    }
                }
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0].0].rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].cols()).collect();
        let m: usize = widths.iter().sum();
        let mut data = vec![0.0; n * m];
        let mut offset = 0;
        for (pi, &p) in parts.iter().enumerate() {
            let t = &self.nodes[p.0];
            assert_eq!(t.rows(), n, "concat_cols: height mismatch");
            let w = widths[pi];
            for i in 0..n {
                data[i * m + offset..i * m + offset + w]
                    .copy_from_slice(&t.data[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let parts: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let out_idx = self.nodes.len();
        self.push(
            Tensor { shape: vec![n, m], data },
            Some(Box::new(move |_v, g| {
                let go = g[out_idx].clone();
                let mut offset = 0;
                for (pi, &p) in parts.iter().enumerate() {
                    let w = widths[pi];
                    for i in 0..n {
                        for j in 0..w {
                            g[p][i * w + j] += go[i * m + offset + j];
                        }
                    }
                    offset += w;
                }
            })),
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0];
        let n = ta.len() as f64;
        let mean = ta.data.iter().sum::<f64>() / n;
        let out_idx = self.nodes.len();
        self.push(
            Tensor::scalar(mean),
            Some(Box::new(move |_v, g| {
                let go = g[out_idx][0];
                for d in g[a.0].iter_mut() {
                    *d += go / n;
                }
            })),
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0];
        let sum = ta.data.iter().sum::<f64>();
        let out_idx = self.nodes.len();
        self.push(
            Tensor::scalar(sum),
            Some(Box::new(move |_v, g| {
                let go = g[out_idx][0];
                for d in g[a.0].iter_mut() {
                    *d += go;
                }
            })),
        )
    }

    /// Mean expectile loss over residual elements: `|tau - 1(u<0)| * u^2`.
    /// The subgradient at u = 0 is 0.
    pub fn expectile(&mut self, u: NodeId, tau: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&tau) || tau <= 0.0 {
            return Err(Error::InvalidArgument(format!("expectile tau {tau} outside (0,1)")));
        }
        let tu = &self.nodes[u.0];
        let n = tu.len() as f64;
        let loss = tu
            .data
            .iter()
            .map(|&x| {
                let w = if x < 0.0 { 1.0 - tau } else { tau };
                w * x * x
            })
            .sum::<f64>()
            / n;
        let out_idx = self.nodes.len();
        Ok(self.push(
            Tensor::scalar(loss),
            Some(Box::new(move |v, g| {
                let go = g[out_idx][0];
                for (i, &x) in v[u.0].data.iter().enumerate() {
                    let w = if x < 0.0 { 1.0 - tau } else { tau };
                    g[u.0][i] += go * 2.0 * w * x / n;
                }
            })),
        ))
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lt = &self.nodes[loss.0];
        if lt.len() != 1 {
            return Err(Error::ShapeMismatch("backward: loss must be scalar".into()));
        }
        if !lt.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        self.grads = self.nodes.iter().map(|t| vec![0.0; t.len()]).collect();
        self.grads[loss.0][0] = 1.0;
        for idx in (0..=loss.0).rev() {
            if let Some(op) = self.back_ops[idx].take() {
                op(&self.nodes, &mut self.grads);
                self.back_ops[idx] = Some(op);
            }
        }
        Ok(())
    }

    /// Gradients of every parameter spliced into this graph, keyed by ParamId.
    /// Duplicate uses of the same parameter are summed.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let mut acc: Vec<(ParamId, Vec<f64>)> = Vec::new();
        for &(pid, node) in &self.param_nodes {
            if let Some(entry) = acc.iter_mut().find(|(p, _)| *p == pid) {
                for (d, s) in entry.1.iter_mut().zip(&self.grads[node.0]) {
                    *d += s;
                }
            } else {
                acc.push((pid, self.grads[node.0].clone()));
            }
        }
        acc
    }
}
