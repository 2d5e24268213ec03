use std::collections::BTreeMap;

use super::tensor::{Params, Tensor};
use super::NumericsError;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Linear { x: NodeId, w: NodeId, b: NodeId },
    MatMul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Tanh { x: NodeId },
    SoftmaxRows { x: NodeId },
    StackRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    SliceRow { x: NodeId, row: usize },
    ColMax { x: NodeId, argmax: Vec<usize> },
    ColMean { x: NodeId },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode tape. Forward methods append nodes and eagerly compute
/// values; `backward` runs one reverse sweep from a scalar loss.
///
/// Node ids are append-ordered, so every parent id is smaller than its
/// consumer's id and a single reverse pass visits each node once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: BTreeMap<String, NodeId>,
}

/// Result of a backward sweep: per-node adjoints plus the gradients of all
/// named parameters registered on the graph (zero for unreached ones).
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Result<&Tensor, NumericsError> {
        self.params
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

fn matmul_raw(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op) -> Result<NodeId, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite(op));
        }
        self.nodes.push(Node { value, op: node_op });
        Ok(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<&Tensor, NumericsError> {
        self.nodes
            .get(id)
            .map(|n| &n.value)
            .ok_or(NumericsError::InvalidNode(id))
    }

    /// Input node holding fixed data; no gradient is reported for it.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId, NumericsError> {
        self.push("leaf", value, Op::Leaf)
    }

    /// Named parameter node. Repeated registration of the same name returns
    /// the original node, so gradients from all uses accumulate.
    pub fn param(&mut self, params: &Params, name: &str) -> Result<NodeId, NumericsError> {
        if let Some(&id) = self.param_nodes.get(name) {
            return Ok(id);
        }
        let value = params.get(name)?.clone();
        let id = self.push("param", value, Op::Param)?;
        self.param_nodes.insert(name.to_string(), id);
        Ok(id)
    }

    /// x[.., in] -> x.W + b with W[in, out], b[out]. Leading dims of x are
    /// flattened into a batch; the bias row is added to every batch row.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let xv = self.check(x)?;
        let wv = self.check(w)?;
        let bv = self.check(b)?;
        if wv.rank() != 2 || bv.rank() != 1 || xv.rank() < 1 {
            return Err(NumericsError::ShapeMismatch {
                op: "linear",
                expected: "x rank>=1, W rank 2, b rank 1".into(),
                got: format!("{:?}, {:?}, {:?}", xv.shape(), wv.shape(), bv.shape()),
            });
        }
        let d_in = wv.shape()[0];
        let d_out = wv.shape()[1];
        if *xv.shape().last().unwrap() != d_in || bv.len() != d_out {
            return Err(NumericsError::ShapeMismatch {
                op: "linear",
                expected: format!("x[.., {d_in}], b[{d_out}]"),
                got: format!("x{:?}, b{:?}", xv.shape(), bv.shape()),
            });
        }
        let m = xv.len() / d_in;
        let mut out = matmul_raw(xv.data(), m, d_in, wv.data(), d_out);
        for i in 0..m {
            for j in 0..d_out {
                out[i * d_out + j] += bv.data()[j];
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let value = Tensor::new(shape, out)?;
        self.push("linear", value, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let av = self.check(a)?;
        let bv = self.check(b)?;
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                expected: "[m,k] x [k,n]".into(),
                got: format!("{:?} x {:?}", av.shape(), bv.shape()),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = matmul_raw(av.data(), m, k, bv.data(), n);
        let value = Tensor::matrix(m, n, out)?;
        self.push("matmul", value, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let xv = self.check(x)?;
        if xv.rank() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "transpose",
                expected: "rank 2".into(),
                got: format!("{:?}", xv.shape()),
            });
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv.at2(i, j);
            }
        }
        let value = Tensor::matrix(n, m, out)?;
        self.push("transpose", value, Op::Transpose { x })
    }

    fn elementwise(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        node_op: Op,
    ) -> Result<NodeId, NumericsError> {
        let av = self.check(a)?;
        let bv = self.check(b)?;
        if av.shape() != bv.shape() {
            return Err(NumericsError::ShapeMismatch {
                op,
                expected: format!("{:?}", av.shape()),
                got: format!("{:?}", bv.shape()),
            });
        }
        let out: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push(op, value, node_op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, NumericsError> {
        let xv = self.check(x)?;
        let out: Vec<f64> = xv.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("scale", value, Op::Scale { x, c })
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let xv = self.check(x)?;
        let out: Vec<f64> = xv.data().iter().map(|&v| v.tanh()).collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("tanh", value, Op::Tanh { x })
    }

    /// Row-wise softmax of a rank-2 tensor, with max subtraction so any
    /// finite input is safe. Non-finite input is rejected up front.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let xv = self.check(x)?;
        if xv.rank() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "softmax_rows",
                expected: "rank 2".into(),
                got: format!("{:?}", xv.shape()),
            });
        }
        if !xv.is_finite() {
            return Err(NumericsError::NonFinite("softmax_rows input"));
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv.data()[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        self.push("softmax_rows", value, Op::SoftmaxRows { x })
    }

    /// Stack row vectors (rank 1 of length k, or rank 2 shaped [1, k]) into
    /// an [n, k] matrix.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                op: "stack_rows",
                expected: "at least one row".into(),
                got: "empty".into(),
            });
        }
        let k = self.check(parts[0])?.len();
        let mut out = Vec::with_capacity(parts.len() * k);
        for &p in parts {
            let pv = self.check(p)?;
            let is_row = pv.rank() == 1 || (pv.rank() == 2 && pv.shape()[0] == 1);
            if !is_row || pv.len() != k {
                return Err(NumericsError::ShapeMismatch {
                    op: "stack_rows",
                    expected: format!("row of length {k}"),
                    got: format!("{:?}", pv.shape()),
                });
            }
            out.extend_from_slice(pv.data());
        }
        let value = Tensor::matrix(parts.len(), k, out)?;
        self.push(
            "stack_rows",
            value,
            Op::StackRows {
                parts: parts.to_vec(),
            },
        )
    }

    /// Concatenate rank-2 tensors with equal row counts along the column
    /// axis; rank-1 inputs count as single rows.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                op: "concat_cols",
                expected: "at least one part".into(),
                got: "empty".into(),
            });
        }
        let m = self.check(parts[0])?.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.check(p)?;
            if pv.rows() != m {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    expected: format!("{m} rows"),
                    got: format!("{:?}", pv.shape()),
                });
            }
            widths.push(pv.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        for i in 0..m {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = &self.nodes[p].value;
                out[i * total + off..i * total + off + w]
                    .copy_from_slice(&pv.data()[i * w..(i + 1) * w]);
                off += w;
            }
        }
        let value = Tensor::matrix(m, total, out)?;
        self.push(
            "concat_cols",
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        )
    }

    /// Extract one row of a rank-2 tensor as a [1, cols] matrix.
    pub fn slice_row(&mut self, x: NodeId, row: usize) -> Result<NodeId, NumericsError> {
        let xv = self.check(x)?;
        if xv.rank() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "slice_row",
                expected: "rank 2".into(),
                got: format!("{:?}", xv.shape()),
            });
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        if row >= m {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_row",
                index: row,
                extent: m,
            });
        }
        let value = Tensor::row(xv.data()[row * n..(row + 1) * n].to_vec());
        self.push("slice_row", value, Op::SliceRow { x, row })
    }

    /// Column-wise max of a rank-2 tensor, shape [1, cols]. Ties route the
    /// gradient to the first maximal row.
    pub fn col_max(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let xv = self.check(x)?;
        if xv.rank() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "col_max",
                expected: "rank 2".into(),
                got: format!("{:?}", xv.shape()),
            });
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![f64::NEG_INFINITY; n];
        let mut argmax = vec![0usize; n];
        for i in 0..m {
            for j in 0..n {
                let v = xv.at2(i, j);
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let value = Tensor::row(out);
        self.push("col_max", value, Op::ColMax { x, argmax })
    }

    /// Column-wise mean of a rank-2 tensor, shape [1, cols].
    pub fn col_mean(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let xv = self.check(x)?;
        if xv.rank() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "col_mean",
                expected: "rank 2".into(),
                got: format!("{:?}", xv.shape()),
            });
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += xv.at2(i, j);
            }
        }
        for v in &mut out {
            *v /= m as f64;
        }
        let value = Tensor::row(out);
        self.push("col_mean", value, Op::ColMean { x })
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let xv = self.check(x)?;
        let value = Tensor::scalar(xv.data().iter().sum());
        self.push("sum_all", value, Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let xv = self.check(x)?;
        let value = Tensor::scalar(xv.data().iter().sum::<f64>() / xv.len() as f64);
        self.push("mean_all", value, Op::MeanAll { x })
    }

    /// Reverse sweep from a scalar loss node. Returns adjoints for every
    /// reached node and gradients for all registered parameters (zeros for
    /// parameters the loss does not depend on).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NumericsError> {
        let lv = self.check(loss)?;
        if lv.len() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[loss] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);

        for id in (0..=loss).rev() {
            let Some(dy) = adj[id].clone() else { continue };
            match self.nodes[id].op.clone() {
                Op::Leaf | Op::Param => {}
                Op::Linear { x, w, b } => {
                    let xv = &self.nodes[x].value;
                    let wv = &self.nodes[w].value;
                    let (d_in, d_out) = (wv.shape()[0], wv.shape()[1]);
                    let m = xv.len() / d_in;
                    // dx = dy . W^T
                    let mut wt = vec![0.0; d_in * d_out];
                    for i in 0..d_in {
                        for j in 0..d_out {
                            wt[j * d_in + i] = wv.data()[i * d_out + j];
                        }
                    }
                    let dx = matmul_raw(dy.data(), m, d_out, &wt, d_in);
                    // dW = x^T . dy
                    let mut xt = vec![0.0; m * d_in];
                    for i in 0..m {
                        for j in 0..d_in {
                            xt[j * m + i] = xv.data()[i * d_in + j];
                        }
                    }
                    let dw = matmul_raw(&xt, d_in, m, dy.data(), d_out);
                    // db = column sums of dy
                    let mut db = vec![0.0; d_out];
                    for i in 0..m {
                        for j in 0..d_out {
                            db[j] += dy.data()[i * d_out + j];
                        }
                    }
                    self.accumulate(&mut adj, x, &dx)?;
                    self.accumulate(&mut adj, w, &dw)?;
                    self.accumulate(&mut adj, b, &db)?;
                }
                Op::MatMul { a, b } => {
                    let av = &self.nodes[a].value;
                    let bv = &self.nodes[b].value;
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    let mut bt = vec![0.0; k * n];
                    for i in 0..k {
                        for j in 0..n {
                            bt[j * k + i] = bv.data()[i * n + j];
                        }
                    }
                    let da = matmul_raw(dy.data(), m, n, &bt, k);
                    let mut at = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..k {
                            at[j * m + i] = av.data()[i * k + j];
                        }
                    }
                    let db = matmul_raw(&at, k, m, dy.data(), n);
                    self.accumulate(&mut adj, a, &da)?;
                    self.accumulate(&mut adj, b, &db)?;
                }
                Op::Transpose { x } => {
                    let (n, m) = (dy.shape()[0], dy.shape()[1]);
                    let mut dx = vec![0.0; m * n];
                    for i in 0..n {
                        for j in 0..m {
                            dx[j * n + i] = dy.at2(i, j);
                        }
                    }
                    self.accumulate(&mut adj, x, &dx)?;
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut adj, a, dy.data())?;
                    self.accumulate(&mut adj, b, dy.data())?;
                }
                Op::Sub { a, b } => {
                    self.accumulate(&mut adj, a, dy.data())?;
                    let neg: Vec<f64> = dy.data().iter().map(|v| -v).collect();
                    self.accumulate(&mut adj, b, &neg)?;
                }
                Op::Mul { a, b } => {
                    let av = self.nodes[a].value.data();
                    let bv = self.nodes[b].value.data();
                    let da: Vec<f64> = dy.data().iter().zip(bv).map(|(&d, &v)| d * v).collect();
                    let db: Vec<f64> = dy.data().iter().zip(av).map(|(&d, &v)| d * v).collect();
                    self.accumulate(&mut adj, a, &da)?;
                    self.accumulate(&mut adj, b, &db)?;
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = dy.data().iter().map(|&d| d * c).collect();
                    self.accumulate(&mut adj, x, &dx)?;
                }
                Op::Tanh { x } => {
                    let yv = self.nodes[id].value.data();
                    let dx: Vec<f64> = dy
                        .data()
                        .iter()
                        .zip(yv)
                        .map(|(&d, &y)| d * (1.0 - y * y))
                        .collect();
                    self.accumulate(&mut adj, x, &dx)?;
                }
                Op::SoftmaxRows { x } => {
                    let yv = &self.nodes[id].value;
                    let (m, n) = (yv.shape()[0], yv.shape()[1]);
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let y = &yv.data()[i * n..(i + 1) * n];
                        let d = &dy.data()[i * n..(i + 1) * n];
                        let dot: f64 = y.iter().zip(d).map(|(&yj, &dj)| yj * dj).sum();
                        for j in 0..n {
                            dx[i * n + j] = y[j] * (d[j] - dot);
                        }
                    }
                    self.accumulate(&mut adj, x, &dx)?;
                }
                Op::StackRows { parts } => {
                    let k = dy.shape()[1];
                    for (i, &p) in parts.iter().enumerate() {
                        self.accumulate(&mut adj, p, &dy.data()[i * k..(i + 1) * k])?;
                    }
                }
                Op::ConcatCols { parts } => {
                    let m = dy.shape()[0];
                    let total = dy.shape()[1];
                    let mut off = 0;
                    for &p in &parts {
                        let w = self.nodes[p].value.cols();
                        let mut dp = vec![0.0; m * w];
                        for i in 0..m {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&dy.data()[i * total + off..i * total + off + w]);
                        }
                        self.accumulate(&mut adj, p, &dp)?;
                        off += w;
                    }
                }
                Op::SliceRow { x, row } => {
                    let xv = &self.nodes[x].value;
                    let (m, n) = (xv.shape()[0], xv.shape()[1]);
                    let mut dx = vec![0.0; m * n];
                    dx[row * n..(row + 1) * n].copy_from_slice(dy.data());
                    self.accumulate(&mut adj, x, &dx)?;
                }
                Op::ColMax { x, argmax } => {
                    let xv = &self.nodes[x].value;
                    let (m, n) = (xv.shape()[0], xv.shape()[1]);
                    let mut dx = vec![0.0; m * n];
                    for j in 0..n {
                        dx[argmax[j] * n + j] = dy.data()[j];
                    }
                    self.accumulate(&mut adj, x, &dx)?;
                }
                Op::ColMean { x } => {
                    let xv = &self.nodes[x].value;
                    let (m, n) = (xv.shape()[0], xv.shape()[1]);
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = dy.data()[j] / m as f64;
                        }
                    }
                    self.accumulate(&mut adj, x, &dx)?;
                }
                Op::SumAll { x } => {
                    let xv = &self.nodes[x].value;
                    let dx = vec![dy.data()[0]; xv.len()];
                    self.accumulate(&mut adj, x, &dx)?;
                }
                Op::MeanAll { x } => {
                    let xv = &self.nodes[x].value;
                    let dx = vec![dy.data()[0] / xv.len() as f64; xv.len()];
                    self.accumulate(&mut adj, x, &dx)?;
                }
            }
        }

        let mut params = BTreeMap::new();
        for (name, &id) in &self.param_nodes {
            let g = match &adj[id] {
                Some(t) => t.clone(),
                None => Tensor::zeros(self.nodes[id].value.shape()),
            };
            params.insert(name.clone(), g);
        }
        Ok(Gradients {
            by_node: adj,
            params,
        })
    }

    fn accumulate(
        &self,
        adj: &mut [Option<Tensor>],
        id: NodeId,
        delta: &[f64],
    ) -> Result<(), NumericsError> {
        let shape = self.nodes[id].value.shape().to_vec();
        match &mut adj[id] {
            Some(t) => {
                for (dst, &d) in t.data_mut().iter_mut().zip(delta) {
                    *dst += d;
                }
                Ok(())
            }
            slot => {
                *slot = Some(Tensor::new(shape, delta.to_vec())?);
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, MlpSpec};
    use crate::rngstream::stream_rng;
    use rand::Rng;

    fn filled(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn linear_matches_hand_case() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.0, 2.0])).unwrap();
        let w = g
            .leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let b = g.leaf(Tensor::vector(vec![10.0, 20.0])).unwrap();
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[17.0, 30.0]);
    }

    #[test]
    fn linear_matches_reference_loops() {
        let mut rng = stream_rng(7, "test/linear");
        let x = filled(&mut rng, &[3, 4]);
        let w = filled(&mut rng, &[4, 2]);
        let b = filled(&mut rng, &[2]);

        let mut expect = vec![0.0; 3 * 2];
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += x.at2(i, k) * w.at2(k, j);
                }
                expect[i * 2 + j] = acc + b.data()[j];
            }
        }

        let mut g = Graph::new();
        let xn = g.leaf(x).unwrap();
        let wn = g.leaf(w).unwrap();
        let bn = g.leaf(b).unwrap();
        let y = g.linear(xn, wn, bn).unwrap();
        for (got, want) in g.value(y).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_flattens_leading_dims() {
        let mut rng = stream_rng(7, "test/linear3d");
        let x = filled(&mut rng, &[2, 3, 4]);
        let w = filled(&mut rng, &[4, 5]);
        let b = filled(&mut rng, &[5]);
        let mut g = Graph::new();
        let xn = g.leaf(x).unwrap();
        let wn = g.leaf(w).unwrap();
        let bn = g.leaf(b).unwrap();
        let y = g.linear(xn, wn, bn).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3, 5]);
    }

    #[test]
    fn softmax_matches_logistic_constant() {
        // softmax([1, 3]) = [1/(1+e^2), e^2/(1+e^2)], checked against the
        // scalar logistic value computed by hand.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.0, 3.0])).unwrap();
        let s = g.softmax_rows(x).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 0.119_202_922_022_117_55).abs() < 1e-15);
        assert!((v[1] - 0.880_797_077_977_882_4).abs() < 1e-15);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_large_logits_but_rejects_nonfinite() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1000.0, 1001.0])).unwrap();
        let s = g.softmax_rows(x).unwrap();
        assert!(g.value(s).is_finite());

        let mut g2 = Graph::new();
        let bad = g2.leaf(Tensor::row(vec![0.0, 1.0])).unwrap();
        // NaN cannot enter through leaf (leaf also validates), so corrupt
        // via a 0 * inf style overflow instead: scale by inf is rejected
        // at the scale node already.
        assert!(matches!(
            g2.scale(bad, f64::INFINITY),
            Err(NumericsError::NonFinite(_))
        ));
    }

    #[test]
    fn mlp_matches_manual_composition() {
        let mut params = Params::new();
        let spec = MlpSpec::new("net", vec![2, 3, 1]);
        let mut rng = stream_rng(11, "test/mlp");
        spec.init(&mut params, &mut rng);

        let x = [0.3, -0.7];
        let w0 = params.get("net.0.w").unwrap();
        let b0 = params.get("net.0.b").unwrap();
        let w1 = params.get("net.1.w").unwrap();
        let b1 = params.get("net.1.b").unwrap();
        let mut h = [0.0; 3];
        for j in 0..3 {
            let mut acc = b0.data()[j];
            for k in 0..2 {
                acc += x[k] * w0.at2(k, j);
            }
            h[j] = acc.tanh();
        }
        let mut out = b1.data()[0];
        for k in 0..3 {
            out += h[k] * w1.at2(k, 0);
        }

        let mut g = Graph::new();
        let xn = g.leaf(Tensor::row(x.to_vec())).unwrap();
        let y = spec.forward(&mut g, &params, xn).unwrap();
        assert!((g.value(y).data()[0] - out).abs() < 1e-12);
    }

    #[test]
    fn mlp_init_respects_fan_in_bound() {
        let mut params = Params::new();
        let spec = MlpSpec::new("net", vec![16, 8, 4]);
        let mut rng = stream_rng(3, "test/init");
        spec.init(&mut params, &mut rng);
        let w0 = params.get("net.0.w").unwrap();
        let bound = 1.0 / 16f64.sqrt();
        assert!(w0.data().iter().all(|v| v.abs() <= bound));
        assert!(params.get("net.0.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_op_passes_finite_difference_check() {
        let mut rng = stream_rng(13, "test/fd");
        let mut params = Params::new();
        params.insert("w1", filled(&mut rng, &[3, 4]));
        params.insert("b1", filled(&mut rng, &[4]));
        params.insert("row", filled(&mut rng, &[1, 4]));
        params.insert("w2", filled(&mut rng, &[8, 2]));
        params.insert("b2", filled(&mut rng, &[2]));
        params.insert("q", filled(&mut rng, &[1, 2]));
        let x = filled(&mut rng, &[2, 3]);

        let worst = finite_diff_check(&params, 1e-5, |p, g| {
            let xn = g.leaf(x.clone())?;
            let w1 = g.param(p, "w1")?;
            let b1 = g.param(p, "b1")?;
            let h = g.linear(xn, w1, b1)?;
            let h = g.tanh(h)?;
            let r0 = g.slice_row(h, 0)?;
            let r1 = g.slice_row(h, 1)?;
            let row = g.param(p, "row")?;
            let stacked = g.stack_rows(&[r0, r1, row])?;
            let soft = g.softmax_rows(stacked)?;
            let cm = g.col_mean(soft)?;
            let mx = g.col_max(h)?;
            let cc = g.concat_cols(&[cm, mx])?;
            let w2 = g.param(p, "w2")?;
            let b2 = g.param(p, "b2")?;
            let z = g.linear(cc, w2, b2)?;
            let zt = g.transpose(z)?;
            let quad = g.matmul(z, zt)?;
            let q = g.param(p, "q")?;
            let d = g.sub(z, q)?;
            let d2 = g.mul(d, d)?;
            let a = g.mean_all(quad)?;
            let b = g.sum_all(d2)?;
            let b = g.scale(b, 0.5)?;
            g.add(a, b)
        })
        .unwrap();
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn col_max_routes_gradient_to_first_maximum() {
        let mut g = Graph::new();
        let mut p = Params::new();
        p.insert(
            "x",
            Tensor::matrix(3, 2, vec![2.0, 0.0, 2.0, 1.0, 1.0, 1.0]).unwrap(),
        );
        let x = g.param(&p, "x").unwrap();
        let m = g.col_max(x).unwrap();
        let loss = g.sum_all(m).unwrap();
        let grads = g.backward(loss).unwrap();
        // Column 0 ties between rows 0 and 1: the first row wins. Column 1
        // ties between rows 1 and 2: row 1 wins.
        assert_eq!(
            grads.param("x").unwrap().data(),
            &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn shared_param_gradients_accumulate() {
        let mut g = Graph::new();
        let mut p = Params::new();
        p.insert("w", Tensor::row(vec![2.0]));
        let a = g.param(&p, "w").unwrap();
        let b = g.param(&p, "w").unwrap();
        assert_eq!(a, b);
        let prod = g.mul(a, b).unwrap();
        let loss = g.sum_all(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        // d(w^2)/dw = 2w
        assert_eq!(grads.param("w").unwrap().data(), &[4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.0, 2.0])).unwrap();
        assert!(matches!(
            g.backward(x),
            Err(NumericsError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn invalid_node_rejected() {
        let g = Graph::new();
        assert!(matches!(g.backward(3), Err(NumericsError::InvalidNode(3))));
    }

    #[test]
    fn shape_mismatch_reports_both_sides() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        let b = g.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "message was {msg}");
    }

    #[test]
    fn unreached_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let mut p = Params::new();
        p.insert("used", Tensor::row(vec![1.5]));
        p.insert("unused", Tensor::row(vec![3.0]));
        let u = g.param(&p, "used").unwrap();
        let _nu = g.param(&p, "unused").unwrap();
        let loss = g.sum_all(u).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param("used").unwrap().data(), &[1.0]);
        assert_eq!(grads.param("unused").unwrap().data(), &[0.0]);
    }

    #[test]
    fn values_are_always_finite_or_construction_fails() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1e308])).unwrap();
        let doubled = g.add(x, x);
        assert!(matches!(doubled, Err(NumericsError::NonFinite(_))));
    }
}
