//! Reverse-mode automatic differentiation over tensors.
//!
//! A [`Graph`] is a define-by-run tape: every operation appends a node
//! holding its forward value, and [`Graph::backward`] walks the tape in
//! reverse, accumulating gradients into every node that contributed to
//! the loss — network parameters and task-instance coefficients alike.
//!
//! Shapes are validated when an op is recorded, and every forward value
//! is checked finite, so a NaN or Inf surfaces at the op that produced
//! it rather than as a silently poisoned update.

use super::tensor::{matmul, per_instance_ce, softmax_rows, Tensor};
use super::NnError;

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// `[r x k] * [k x c]`
    MatMul(NodeId, NodeId),
    /// `[b x c] + [1 x c]` broadcast over rows
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    /// Elementwise product of same-shape tensors
    MulElem(NodeId, NodeId),
    /// Row-wise softmax
    Softmax(NodeId),
    /// Per-instance `-ln p[i][labels[i]]`
    NegLogGather(NodeId, Vec<usize>),
    /// Elementwise `x + c`; the constant needs no gradient
    AddScalar(NodeId),
    /// Elementwise `x^2`
    Square(NodeId),
    /// Sum of all entries, producing a scalar
    Sum(NodeId),
    /// `c * x`
    Scale(NodeId, f64),
    /// Elementwise sum of same-shape tensors
    Add(NodeId, NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode tape. Build the loss with the op methods, call
/// [`Graph::backward`] on the scalar loss node, then read gradients of
/// any leaf with [`Graph::grad`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId, NnError> {
        value.check_finite("graph op output")?;
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn check(&self, id: NodeId) -> Result<(), NnError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(NnError::DetachedNode)
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target with respect to `id`.
    /// Nodes the loss does not depend on get an all-zero gradient.
    pub fn grad(&self, id: NodeId) -> Result<Tensor, NnError> {
        self.check(id)?;
        Ok(match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[id.0].value.shape().to_vec()),
        })
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId, NnError> {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.check(a)?;
        self.check(b)?;
        let v = matmul(self.value(a), self.value(b))?;
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, NnError> {
        self.check(x)?;
        self.check(bias)?;
        let xv = self.value(x);
        let bv = self.value(bias);
        if xv.shape().len() != 2 || bv.shape() != [1, xv.cols()] {
            return Err(NnError::ShapeMismatch {
                context: "add_row",
                expected: vec![1, xv.cols()],
                actual: bv.shape().to_vec(),
            });
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = xv.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += bv.data()[j];
            }
        }
        let v = Tensor::matrix(r, c, data)?;
        self.push(v, Op::AddRow(x, bias))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        self.check(x)?;
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let v = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push(v, Op::Relu(x))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NnError::ShapeMismatch {
                context: "mul_elem",
                expected: av.shape().to_vec(),
                actual: bv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let v = Tensor::new(av.shape().to_vec(), data)?;
        self.push(v, Op::MulElem(a, b))
    }

    pub fn softmax(&mut self, logits: NodeId) -> Result<NodeId, NnError> {
        self.check(logits)?;
        let v = softmax_rows(self.value(logits))?;
        self.push(v, Op::Softmax(logits))
    }

    pub fn neg_log_gather(&mut self, probs: NodeId, labels: &[usize]) -> Result<NodeId, NnError> {
        self.check(probs)?;
        let v = per_instance_ce(self.value(probs), labels)?;
        self.push(v, Op::NegLogGather(probs, labels.to_vec()))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId, NnError> {
        self.check(x)?;
        let data = self.value(x).data().iter().map(|v| v + c).collect();
        let v = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push(v, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        self.check(x)?;
        let data = self.value(x).data().iter().map(|v| v * v).collect();
        let v = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push(v, Op::Square(x))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        self.check(x)?;
        let v = Tensor::scalar(self.value(x).data().iter().sum())?;
        self.push(v, Op::Sum(x))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, NnError> {
        self.check(x)?;
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let v = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push(v, Op::Scale(x, c))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NnError::ShapeMismatch {
                context: "add",
                expected: av.shape().to_vec(),
                actual: bv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let v = Tensor::new(av.shape().to_vec(), data)?;
        self.push(v, Op::Add(a, b))
    }

    /// Accumulate gradients of `loss` (a scalar node) into every node on
    /// the tape that contributed to it.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NnError> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(NnError::NotScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        self.value(loss).check_finite("loss")?;
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::scalar(1.0)?);

        for idx in (0..=loss.0).rev() {
            let out_grad = match self.grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            // Re-stash so callers can read interior gradients afterwards.
            self.grads[idx] = Some(out_grad.clone());
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    // dA = dY * B^T ; dB = A^T * dY
                    let (r, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                    let c = self.nodes[b.0].value.cols();
                    let dy = out_grad.data();
                    let bvals = self.nodes[b.0].value.data().to_vec();
                    let avals = self.nodes[a.0].value.data().to_vec();
                    let mut da = vec![0.0; r * k];
                    let mut db = vec![0.0; k * c];
                    for i in 0..r {
                        for j in 0..c {
                            let g = dy[i * c + j];
                            if g == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                da[i * k + kk] += g * bvals[kk * c + j];
                                db[kk * c + j] += avals[i * k + kk] * g;
                            }
                        }
                    }
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::AddRow(x, bias) => {
                    let (x, bias) = (*x, *bias);
                    let c = self.nodes[x.0].value.cols();
                    let r = self.nodes[x.0].value.rows();
                    let dy = out_grad.data().to_vec();
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += dy[i * c + j];
                        }
                    }
                    self.accumulate(x, &dy);
                    self.accumulate(bias, &db);
                }
                Op::Relu(x) => {
                    let x = *x;
                    let dx: Vec<f64> = self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .zip(out_grad.data())
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::MulElem(a, b) => {
                    let (a, b) = (*a, *b);
                    let da: Vec<f64> = self.nodes[b.0]
                        .value
                        .data()
                        .iter()
                        .zip(out_grad.data())
                        .map(|(&v, &g)| v * g)
                        .collect();
                    let db: Vec<f64> = self.nodes[a.0]
                        .value
                        .data()
                        .iter()
                        .zip(out_grad.data())
                        .map(|(&v, &g)| v * g)
                        .collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Softmax(x) => {
                    let x = *x;
                    let p = &self.nodes[idx].value;
                    let (r, c) = (p.rows(), p.cols());
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let prow = p.row(i);
                        let grow = &out_grad.data()[i * c..(i + 1) * c];
                        let dot: f64 = prow.iter().zip(grow).map(|(&pv, &gv)| pv * gv).sum();
                        for j in 0..c {
                            dx[i * c + j] = prow[j] * (grow[j] - dot);
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::NegLogGather(probs, labels) => {
                    let probs = *probs;
                    let labels = labels.clone();
                    let p = &self.nodes[probs.0].value;
                    let c = p.cols();
                    let mut dp = vec![0.0; p.len()];
                    for (i, &label) in labels.iter().enumerate() {
                        dp[i * c + label] = -out_grad.data()[i] / p.at(i, label);
                    }
                    self.accumulate(probs, &dp);
                }
                Op::AddScalar(x) => {
                    let x = *x;
                    let dx = out_grad.data().to_vec();
                    self.accumulate(x, &dx);
                }
                Op::Square(x) => {
                    let x = *x;
                    let dx: Vec<f64> = self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .zip(out_grad.data())
                        .map(|(&v, &g)| 2.0 * v * g)
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Sum(x) => {
                    let x = *x;
                    let g = out_grad.item();
                    let dx = vec![g; self.nodes[x.0].value.len()];
                    self.accumulate(x, &dx);
                }
                Op::Scale(x, c) => {
                    let (x, c) = (*x, *c);
                    let dx: Vec<f64> = out_grad.data().iter().map(|&g| c * g).collect();
                    self.accumulate(x, &dx);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    let d = out_grad.data().to_vec();
                    self.accumulate(a, &d);
                    self.accumulate(b, &d);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f64]) {
        let grad = self.grads[id.0].get_or_insert_with(|| {
            Tensor::zeros(self.nodes[id.0].value.shape().to_vec())
        });
        for (g, d) in grad.data_mut().iter_mut().zip(delta) {
            *g += d;
        }
    }
}
