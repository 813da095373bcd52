use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds understood by [`Graph::apply`].
///
/// Shape rules: `MatMul` takes `[m,k] x [k,n]` or `[m,k] x [k]`; elementwise
/// kinds need equal shapes; `Concat`, `Slice`, `Softmax`, `LogSoftmax` and
/// `Pick` work on vectors; `Row` selects one row of a matrix; `Sum` and `Mean`
/// reduce to a scalar; `Max` is the elementwise maximum of two tensors (ties
/// resolve to the first input).
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Tanh,
    Sigmoid,
    Concat,
    Slice { start: usize, len: usize },
    Softmax,
    LogSoftmax,
    Log,
    Sum,
    Mean,
    Square,
    Sqrt,
    Max,
    Row(usize),
    Pick(usize),
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Concat => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Log => "log",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
            OpKind::Max => "max",
            OpKind::Row(_) => "row",
            OpKind::Pick(_) => "pick",
        }
    }
}

#[derive(Debug)]
struct Node {
    kind: OpKind,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Recorded computation. Nodes are appended in evaluation order, so the node
/// list is always topologically sorted.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradient store produced by [`Graph::backward`]; populated for every
/// ancestor of the loss node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, node: NodeId) -> Option<Tensor> {
        self.grads.get_mut(node.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, ts: &[&Tensor]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        shapes: ts.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Log-softmax with max subtraction.
pub(crate) fn log_softmax_vec(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = x.iter().map(|v| (v - m).exp()).sum();
    let lse = m + s.ln();
    x.iter().map(|v| v - lse).collect()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> &OpKind {
        &self.nodes[id.0].kind
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    /// Inserts a leaf (parameter or constant). Rejects non-finite values.
    pub fn leaf(&mut self, t: Tensor) -> Result<NodeId> {
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        Ok(self.push(OpKind::Leaf, Vec::new(), t))
    }

    fn push(&mut self, kind: OpKind, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { kind, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Evaluates `kind` on `inputs` and records the result.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let op = kind.name();
        let arity = match kind {
            OpKind::Leaf => {
                return Err(TensorError::Invalid("use Graph::leaf for leaves".into()));
            }
            OpKind::Concat => inputs.len().max(1),
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Max => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(TensorError::Invalid(format!(
                "{op} expects {arity} inputs, got {}",
                inputs.len()
            )));
        }
        if inputs.iter().any(|i| i.0 >= self.nodes.len()) {
            return Err(TensorError::Invalid(format!("{op}: unknown node")));
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
        let out = Self::eval(&kind, &vals)?;
        if !out.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        Ok(self.push(kind, inputs.to_vec(), out))
    }

    fn eval(kind: &OpKind, v: &[&Tensor]) -> Result<Tensor> {
        let op = kind.name();
        let elementwise2 = |f: &dyn Fn(f64, f64) -> f64| -> Result<Tensor> {
            if v[0].shape() != v[1].shape() {
                return Err(mismatch(op, v));
            }
            let d = v[0].data().iter().zip(v[1].data()).map(|(&a, &b)| f(a, b)).collect();
            Tensor::new(v[0].shape().to_vec(), d)
        };
        let map1 = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
            Tensor::new(v[0].shape().to_vec(), v[0].data().iter().map(|&x| f(x)).collect())
        };
        let vector_only = |t: &Tensor| -> Result<()> {
            if t.shape().len() != 1 {
                return Err(mismatch(op, &[t]));
            }
            Ok(())
        };
        match kind {
            OpKind::Leaf => unreachable!(),
            OpKind::MatMul => {
                let (a, b) = (v[0], v[1]);
                if a.shape().len() != 2 || b.shape().len() > 2 || a.shape()[1] != b.shape()[0] {
                    return Err(mismatch(op, v));
                }
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = if b.shape().len() == 2 { b.shape()[1] } else { 1 };
                let (ad, bd) = (a.data(), b.data());
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let arow = &ad[i * k..(i + 1) * k];
                    let orow = &mut out[i * n..(i + 1) * n];
                    if n == 1 {
                        orow[0] = arow.iter().zip(bd).map(|(x, y)| x * y).sum();
                    } else {
                        for (p, &aip) in arow.iter().enumerate() {
                            let brow = &bd[p * n..(p + 1) * n];
                            for (o, &bv) in orow.iter_mut().zip(brow) {
                                *o += aip * bv;
                            }
                        }
                    }
                }
                let shape = if b.shape().len() == 2 { vec![m, n] } else { vec![m] };
                Tensor::new(shape, out)
            }
            OpKind::Add => elementwise2(&|a, b| a + b),
            OpKind::Sub => elementwise2(&|a, b| a - b),
            OpKind::Mul => elementwise2(&|a, b| a * b),
            OpKind::Max => elementwise2(&|a, b| if a >= b { a } else { b }),
            OpKind::Scale(c) => map1(&|x| c * x),
            OpKind::Tanh => map1(&f64::tanh),
            OpKind::Sigmoid => map1(&|x| 1.0 / (1.0 + (-x).exp())),
            OpKind::Square => map1(&|x| x * x),
            OpKind::Sqrt => {
                if v[0].data().iter().any(|&x| x < 0.0) {
                    return Err(TensorError::Domain {
                        op,
                        msg: "negative input".into(),
                    });
                }
                map1(&f64::sqrt)
            }
            OpKind::Log => {
                if v[0].data().iter().any(|&x| x <= 0.0) {
                    return Err(TensorError::Domain {
                        op,
                        msg: "non-positive input".into(),
                    });
                }
                map1(&f64::ln)
            }
            OpKind::Concat => {
                for t in v {
                    vector_only(t)?;
                }
                let d: Vec<f64> = v.iter().flat_map(|t| t.data().iter().cloned()).collect();
                Tensor::new(vec![d.len()], d)
            }
            OpKind::Slice { start, len } => {
                vector_only(v[0])?;
                if *len == 0 || start + len > v[0].len() {
                    return Err(mismatch(op, v));
                }
                Ok(Tensor::vector(v[0].data()[*start..start + len].to_vec()))
            }
            OpKind::Softmax => {
                vector_only(v[0])?;
                Ok(Tensor::vector(softmax_vec(v[0].data())))
            }
            OpKind::LogSoftmax => {
                vector_only(v[0])?;
                Ok(Tensor::vector(log_softmax_vec(v[0].data())))
            }
            OpKind::Sum => Ok(Tensor::scalar(v[0].data().iter().sum())),
            OpKind::Mean => Ok(Tensor::scalar(v[0].data().iter().sum::<f64>() / v[0].len() as f64)),
            OpKind::Row(r) => {
                if v[0].shape().len() != 2 || *r >= v[0].rows() {
                    return Err(TensorError::Domain {
                        op,
                        msg: format!("row {r} of shape {:?}", v[0].shape()),
                    });
                }
                Ok(Tensor::vector(v[0].row(*r).to_vec()))
            }
            OpKind::Pick(i) => {
                vector_only(v[0])?;
                if *i >= v[0].len() {
                    return Err(TensorError::Domain {
                        op,
                        msg: format!("index {i} of length {}", v[0].len()),
                    });
                }
                Ok(Tensor::scalar(v[0].data()[*i]))
            }
        }
    }

    /// Reverse sweep from a scalar loss. The graph can be differentiated once.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::Consumed);
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            // Row/Pick scatter straight into the accumulator instead of
            // materializing a dense one-hot contribution.
            if let OpKind::Row(_) | OpKind::Pick(_) = node.kind {
                let src = node.inputs[0].0;
                let n = self.nodes[src].value.len();
                let acc = grads[src].get_or_insert_with(|| vec![0.0; n]);
                match node.kind {
                    OpKind::Row(r) => {
                        let c = g.len();
                        acc[r * c..(r + 1) * c].iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                    OpKind::Pick(i) => acc[i] += g[0],
                    _ => unreachable!(),
                }
                grads[idx] = Some(g);
                continue;
            }
            let contributions = self.local_grads(node, &g);
            grads[idx] = Some(g);
            for (input, contrib) in node.inputs.iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.map(|d| Tensor {
                    shape: n.value.shape().to_vec(),
                    data: std::sync::Arc::new(d),
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of one node w.r.t. each of its inputs.
    fn local_grads(&self, node: &Node, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let val = |i: usize| self.nodes[node.inputs[i].0].value.data();
        let y = node.value.data();
        match &node.kind {
            OpKind::Leaf => Vec::new(),
            OpKind::MatMul => {
                let a = &self.nodes[node.inputs[0].0].value;
                let b = &self.nodes[node.inputs[1].0].value;
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = if b.shape().len() == 2 { b.shape()[1] } else { 1 };
                let (ad, bd) = (a.data(), b.data());
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let arow = &ad[i * k..(i + 1) * k];
                    let darow = &mut da[i * k..(i + 1) * k];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        let dbrow = &mut db[p * n..(p + 1) * n];
                        let mut s = 0.0;
                        for j in 0..n {
                            s += grow[j] * brow[j];
                            dbrow[j] += arow[p] * grow[j];
                        }
                        darow[p] += s;
                    }
                }
                vec![Some(da), Some(db)]
            }
            OpKind::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            OpKind::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|x| -x).collect())],
            OpKind::Mul => {
                let (a, b) = (val(0), val(1));
                vec![
                    Some(g.iter().zip(b).map(|(g, b)| g * b).collect()),
                    Some(g.iter().zip(a).map(|(g, a)| g * a).collect()),
                ]
            }
            OpKind::Max => {
                let (a, b) = (val(0), val(1));
                let mut da = vec![0.0; g.len()];
                let mut db = vec![0.0; g.len()];
                for i in 0..g.len() {
                    if a[i] >= b[i] {
                        da[i] = g[i];
                    } else {
                        db[i] = g[i];
                    }
                }
                vec![Some(da), Some(db)]
            }
            OpKind::Scale(c) => vec![Some(g.iter().map(|x| c * x).collect())],
            OpKind::Tanh => vec![Some(g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect())],
            OpKind::Sigmoid => vec![Some(g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect())],
            OpKind::Square => vec![Some(g.iter().zip(val(0)).map(|(g, x)| 2.0 * x * g).collect())],
            // Subgradient 0 at the origin.
            OpKind::Sqrt => vec![Some(
                g.iter()
                    .zip(y)
                    .map(|(g, y)| if *y > 0.0 { g / (2.0 * y) } else { 0.0 })
                    .collect(),
            )],
            OpKind::Log => vec![Some(g.iter().zip(val(0)).map(|(g, x)| g / x).collect())],
            OpKind::Concat => {
                let mut off = 0;
                node.inputs
                    .iter()
                    .map(|i| {
                        let n = self.nodes[i.0].value.len();
                        let part = g[off..off + n].to_vec();
                        off += n;
                        Some(part)
                    })
                    .collect()
            }
            OpKind::Slice { start, len } => {
                let mut d = vec![0.0; val(0).len()];
                d[*start..start + len].copy_from_slice(g);
                vec![Some(d)]
            }
            OpKind::Softmax => {
                let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                vec![Some(g.iter().zip(y).map(|(g, y)| y * (g - dot)).collect())]
            }
            OpKind::LogSoftmax => {
                let total: f64 = g.iter().sum();
                vec![Some(g.iter().zip(y).map(|(g, y)| g - y.exp() * total).collect())]
            }
            OpKind::Sum => vec![Some(vec![g[0]; val(0).len()])],
            OpKind::Mean => {
                let n = val(0).len();
                vec![Some(vec![g[0] / n as f64; n])]
            }
            OpKind::Row(r) => {
                let src = &self.nodes[node.inputs[0].0].value;
                let c = src.cols();
                let mut d = vec![0.0; src.len()];
                d[r * c..(r + 1) * c].copy_from_slice(g);
                vec![Some(d)]
            }
            OpKind::Pick(i) => {
                let mut d = vec![0.0; val(0).len()];
                d[*i] = g[0];
                vec![Some(d)]
            }
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn max(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Max, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(OpKind::Scale(c), &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sigmoid, &[a])
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Square, &[a])
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sqrt, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Log, &[a])
    }
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(OpKind::Concat, parts)
    }
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.apply(OpKind::Slice { start, len }, &[a])
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Softmax, &[a])
    }
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::LogSoftmax, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mean, &[a])
    }
    pub fn row(&mut self, a: NodeId, r: usize) -> Result<NodeId> {
        self.apply(OpKind::Row(r), &[a])
    }
    pub fn pick(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        self.apply(OpKind::Pick(i), &[a])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    /// Central finite differences of a scalar function built on a fresh graph.
    fn check_grad(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone()).unwrap()).collect();
        let loss = build(&mut g, &ids);
        let grads = g.backward(loss).unwrap();
        let eval = |xs: &[Tensor]| {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = xs.iter().map(|t| g.leaf(t.clone()).unwrap()).collect();
            let l = build(&mut g, &ids);
            g.value(l).data()[0]
        };
        let h = 1e-5;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get(ids[k]).unwrap();
            assert_eq!(analytic.shape(), t.shape());
            for i in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-4, "input {k}[{i}]: analytic {a} fd {fd}");
            }
        }
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.leaf(Tensor::identity(2)).unwrap();
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let an = g.leaf(a.clone()).unwrap();
        let p = g.matmul(i, an).unwrap();
        assert_eq!(g.value(p), &a);
    }

    #[test]
    fn tanh_of_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0; 3])).unwrap();
        let y = g.tanh(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![3.5; 4])).unwrap();
        let y = g.softmax(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_stable_for_large_logits() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1000.0, 999.0, -1000.0])).unwrap();
        let y = g.softmax(x).unwrap();
        let s: f64 = g.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(grads.get(l).unwrap().data(), &[1.0]);
    }

    #[test]
    fn unrelated_leaf_has_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0])).unwrap();
        let p = g.leaf(Tensor::vector(vec![5.0])).unwrap();
        let l = g.sum(x).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(p).is_none());
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert_eq!(g.backward(x).unwrap_err(), TensorError::NonScalarLoss(vec![2]));
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.backward(l).unwrap_err(), TensorError::Consumed);
    }

    #[test]
    fn shape_and_domain_errors() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        match g.add(a, b) {
            Err(TensorError::ShapeMismatch { op, shapes }) => {
                assert_eq!(op, "add");
                assert_eq!(shapes, vec![vec![2], vec![3]]);
            }
            other => panic!("{other:?}"),
        }
        let z = g.leaf(Tensor::vector(vec![0.0])).unwrap();
        assert!(matches!(g.log(z), Err(TensorError::Domain { .. })));
        assert!(matches!(
            g.leaf(Tensor::vector(vec![f64::NAN])),
            Err(TensorError::NonFinite { .. })
        ));
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn apply_does_not_mutate_inputs() {
        let mut rng = Rng::new(1);
        let a = rand_tensor(&[3, 2], &mut rng);
        let x = rand_tensor(&[2], &mut rng);
        let (a0, x0) = (a.clone().into_vec(), x.clone().into_vec());
        let mut g = Graph::new();
        let an = g.leaf(a.clone()).unwrap();
        let xn = g.leaf(x.clone()).unwrap();
        let y = g.matmul(an, xn).unwrap();
        let t = g.tanh(y).unwrap();
        let l = g.sum(t).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.value(an).data(), &a0[..]);
        assert_eq!(g.value(xn).data(), &x0[..]);
        assert_eq!(a.data(), &a0[..]);
    }

    #[test]
    fn gradcheck_every_op_kind() {
        let mut rng = Rng::new(99);
        let m = rand_tensor(&[3, 4], &mut rng);
        let m2 = rand_tensor(&[4, 2], &mut rng);
        let v = rand_tensor(&[4], &mut rng);
        let w = rand_tensor(&[4], &mut rng);
        let pos = Tensor::vector(v.data().iter().map(|x| x.abs() + 0.5).collect());
        let weights = rand_tensor(&[4], &mut rng);
        // Weighted sum keeps reductions from producing trivially constant gradients.
        let wsum = |g: &mut Graph, x: NodeId, wt: &Tensor| -> NodeId {
            let n = g.value(x).len();
            let w = g
                .leaf(Tensor::vector(wt.data().iter().cycle().take(n).cloned().collect()))
                .unwrap();
            let p = g.mul(x, w).unwrap();
            g.sum(p).unwrap()
        };
        let wt = weights.clone();
        check_grad(&[m.clone(), v.clone()], &|g, i| {
            let y = g.matmul(i[0], i[1]).unwrap();
            wsum(g, y, &wt)
        });
        let wt = weights.clone();
        check_grad(&[m.clone(), m2.clone()], &|g, i| {
            let y = g.matmul(i[0], i[1]).unwrap();
            let s = g.square(y).unwrap();
            g.sum(s).unwrap()
        });
        for kind in [OpKind::Add, OpKind::Sub, OpKind::Mul, OpKind::Max] {
            let wt = wt.clone();
            check_grad(&[v.clone(), w.clone()], &move |g, i| {
                let y = g.apply(kind.clone(), &[i[0], i[1]]).unwrap();
                wsum(g, y, &wt)
            });
        }
        for kind in [
            OpKind::Scale(-1.7),
            OpKind::Tanh,
            OpKind::Sigmoid,
            OpKind::Square,
            OpKind::Softmax,
            OpKind::LogSoftmax,
            OpKind::Slice { start: 1, len: 2 },
            OpKind::Pick(2),
            OpKind::Sum,
            OpKind::Mean,
        ] {
            let wt = wt.clone();
            check_grad(std::slice::from_ref(&v), &move |g, i| {
                let y = g.apply(kind.clone(), &[i[0]]).unwrap();
                wsum(g, y, &wt)
            });
        }
        for kind in [OpKind::Log, OpKind::Sqrt] {
            let wt = wt.clone();
            check_grad(std::slice::from_ref(&pos), &move |g, i| {
                let y = g.apply(kind.clone(), &[i[0]]).unwrap();
                wsum(g, y, &wt)
            });
        }
        let wt2 = wt.clone();
        check_grad(&[v.clone(), w.clone()], &move |g, i| {
            let y = g.concat(&[i[0], i[1]]).unwrap();
            wsum(g, y, &wt2)
        });
        check_grad(std::slice::from_ref(&m), &move |g, i| {
            let y = g.row(i[0], 1).unwrap();
            wsum(g, y, &wt)
        });
    }

    #[test]
    fn gradcheck_three_layer_tanh_net() {
        let mut rng = Rng::new(5);
        let x = rand_tensor(&[3], &mut rng);
        let w1 = rand_tensor(&[4, 3], &mut rng);
        let w2 = rand_tensor(&[4, 4], &mut rng);
        let w3 = rand_tensor(&[2, 4], &mut rng);
        check_grad(&[x, w1, w2, w3], &|g, i| {
            let h1 = g.matmul(i[1], i[0]).unwrap();
            let h1 = g.tanh(h1).unwrap();
            let h2 = g.matmul(i[2], h1).unwrap();
            let h2 = g.tanh(h2).unwrap();
            let o = g.matmul(i[3], h2).unwrap();
            let o = g.tanh(o).unwrap();
            let ls = g.log_softmax(o).unwrap();
            g.pick(ls, 1).unwrap()
        });
    }

    #[test]
    fn nodes_are_topologically_ordered() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = g.tanh(a).unwrap();
        let c = g.mul(a, b).unwrap();
        let d = g.sum(c).unwrap();
        for id in [b, c, d] {
            assert!(g.inputs(id).iter().all(|i| i.index() < id.index()));
        }
    }

    proptest::proptest! {
        #[test]
        // Logit spread is bounded so every probability stays representable strictly inside (0, 1).
        fn softmax_is_a_distribution(xs in proptest::collection::vec(-15.0f64..15.0, 2..20)) {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::vector(xs)).unwrap();
            let y = g.softmax(x).unwrap();
            let d = g.value(y).data();
            let s: f64 = d.iter().sum();
            proptest::prop_assert!((s - 1.0).abs() < 1e-9);
            proptest::prop_assert!(d.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }
}
