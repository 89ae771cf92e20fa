use super::{NnError, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    LogSumExpRows(Var),
    LogSoftmaxRows(Var),
    Max(Var, Var),
    Min(Var, Var),
    Concat(Var, Var),
    Gather(Var, Vec<usize>),
    Clamp(Var, f64, f64),
    SliceCols(Var, usize, usize),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Tape of one forward pass. Nodes are appended in creation order, which is a
/// topological order, so the backward sweep visits each node once in reverse.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by node; `None` for nodes the output does not depend on.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor { shape: like.shape.clone(), data: vec![0.0; like.len()] })
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Input or parameter leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `x + bias` with a `1 x m` bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert_eq!(bv.len(), xv.cols(), "bias width");
        let m = xv.cols();
        let data = xv.data.iter().enumerate().map(|(i, &a)| a + bv.data[i % m]).collect();
        let t = Tensor { shape: xv.shape.clone(), data };
        self.push(t, Op::AddRow(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    /// Row sums as an `n x 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::column((0..t.rows()).map(|r| t.row(r).iter().sum()).collect());
        self.push(v, Op::SumCols(a))
    }

    /// Row-wise log-sum-exp as an `n x 1` column.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let v = super::logsumexp_axis(self.value(a), 1);
        self.push(v, Op::LogSumExpRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let l = super::logsumexp(t.row(r));
            data.extend(t.row(r).iter().map(|x| x - l));
        }
        let v = Tensor::matrix(t.rows(), c, data);
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), f64::max);
        self.push(v, Op::Max(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), f64::min);
        self.push(v, Op::Min(a, b))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).hcat(self.value(b));
        self.push(v, Op::Concat(a, b))
    }

    /// Picks column `idx[r]` of each row `r`, giving an `n x 1` column.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let t = self.value(a);
        assert_eq!(idx.len(), t.rows(), "gather index count");
        let v = Tensor::column(idx.iter().enumerate().map(|(r, &c)| t.at(r, c)).collect());
        self.push(v, Op::Gather(a, idx))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let v = Tensor::matrix(t.rows(), end - start, data);
        self.push(v, Op::SliceCols(a, start, end))
    }

    /// Row-major reshape to `[rows, cols]`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.len(), rows * cols, "reshape size");
        let v = Tensor::matrix(rows, cols, t.data.clone());
        self.push(v, Op::Reshape(a))
    }

    /// Reverse sweep from `out`. `out_grad` defaults to ones (so a scalar loss
    /// gets d/d(loss) = 1).
    pub fn backward(&self, out: Var, out_grad: Option<Tensor>) -> Result<Gradients, NnError> {
        if out.0 >= self.nodes.len() {
            return Err(NnError::NoTape);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        let seed = match out_grad {
            Some(g) => {
                if g.shape != self.nodes[out.0].value.shape {
                    return Err(NnError::ShapeMismatch("output gradient shape".into()));
                }
                g
            }
            None => self.nodes[out.0].value.map(|_| 1.0),
        };
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            let val = |v: Var| &self.nodes[v.0].value;
            let acc = |v: Var, t: Tensor, grads: &mut Vec<Option<Tensor>>| match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc(*a, g.matmul(&val(*b).transpose()), &mut grads);
                    acc(*b, val(*a).transpose().matmul(&g), &mut grads);
                }
                Op::AddRow(x, b) => {
                    let m = g.cols();
                    let mut gb = vec![0.0; m];
                    for (k, v) in g.data.iter().enumerate() {
                        gb[k % m] += v;
                    }
                    let bshape = val(*b).shape.clone();
                    acc(*b, Tensor { shape: bshape, data: gb }, &mut grads);
                    acc(*x, g, &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|x| -x), &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip(val(*b), |x, y| x * y), &mut grads);
                    acc(*b, g.zip(val(*a), |x, y| x * y), &mut grads);
                }
                Op::Scale(a, c) => acc(*a, g.map(|x| x * c), &mut grads),
                Op::AddScalar(a) | Op::Reshape(a) => {
                    let shape = val(*a).shape.clone();
                    acc(*a, Tensor { shape, data: g.data }, &mut grads)
                }
                Op::Tanh(a) => acc(*a, g.zip(y, |x, t| x * (1.0 - t * t)), &mut grads),
                Op::Relu(a) => acc(*a, g.zip(val(*a), |x, z| if z > 0.0 { x } else { 0.0 }), &mut grads),
                Op::Exp(a) => acc(*a, g.zip(y, |x, e| x * e), &mut grads),
                Op::Log(a) => acc(*a, g.zip(val(*a), |x, z| x / z), &mut grads),
                Op::Softplus(a) => acc(*a, g.zip(val(*a), |x, z| x * sigmoid(z)), &mut grads),
                Op::Square(a) => acc(*a, g.zip(val(*a), |x, z| 2.0 * x * z), &mut grads),
                Op::Sum(a) => {
                    let gv = g.item();
                    acc(*a, val(*a).map(|_| gv), &mut grads)
                }
                Op::Mean(a) => {
                    let n = val(*a).len() as f64;
                    let gv = g.item() / n;
                    acc(*a, val(*a).map(|_| gv), &mut grads)
                }
                Op::SumCols(a) => {
                    let t = val(*a);
                    let c = t.cols();
                    let data = (0..t.len()).map(|k| g.data[k / c]).collect();
                    acc(*a, Tensor { shape: t.shape.clone(), data }, &mut grads)
                }
                Op::LogSumExpRows(a) => {
                    let t = val(*a);
                    let c = t.cols();
                    let data = (0..t.len()).map(|k| g.data[k / c] * (t.data[k] - y.data[k / c]).exp()).collect();
                    acc(*a, Tensor { shape: t.shape.clone(), data }, &mut grads)
                }
                Op::LogSoftmaxRows(a) => {
                    let c = y.cols();
                    let mut data = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let gsum: f64 = g.row(r).iter().sum();
                        for j in 0..c {
                            let k = r * c + j;
                            data[k] = g.data[k] - y.data[k].exp() * gsum;
                        }
                    }
                    acc(*a, Tensor { shape: y.shape.clone(), data }, &mut grads)
                }
                Op::Max(a, b) | Op::Min(a, b) => {
                    let is_max = matches!(node.op, Op::Max(..));
                    let (av, bv) = (val(*a), val(*b));
                    let pick_a: Vec<bool> =
                        av.data.iter().zip(&bv.data).map(|(x, z)| if is_max { x >= z } else { x <= z }).collect();
                    let ga = Tensor { shape: g.shape.clone(), data: g.data.iter().zip(&pick_a).map(|(x, &p)| if p { *x } else { 0.0 }).collect() };
                    let gb = Tensor { shape: g.shape.clone(), data: g.data.iter().zip(&pick_a).map(|(x, &p)| if p { 0.0 } else { *x }).collect() };
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Concat(a, b) => {
                    let ca = val(*a).cols();
                    let c = g.cols();
                    let mut ga = Vec::with_capacity(g.rows() * ca);
                    let mut gb = Vec::with_capacity(g.rows() * (c - ca));
                    for r in 0..g.rows() {
                        ga.extend_from_slice(&g.row(r)[..ca]);
                        gb.extend_from_slice(&g.row(r)[ca..]);
                    }
                    let (sa, sb) = (val(*a).shape.clone(), val(*b).shape.clone());
                    acc(*a, Tensor { shape: sa, data: ga }, &mut grads);
                    acc(*b, Tensor { shape: sb, data: gb }, &mut grads);
                }
                Op::Gather(a, idx) => {
                    let t = val(*a);
                    let c = t.cols();
                    let mut data = vec![0.0; t.len()];
                    for (r, &j) in idx.iter().enumerate() {
                        data[r * c + j] += g.data[r];
                    }
                    acc(*a, Tensor { shape: t.shape.clone(), data }, &mut grads)
                }
                Op::Clamp(a, lo, hi) => {
                    acc(*a, g.zip(val(*a), |x, z| if z >= *lo && z <= *hi { x } else { 0.0 }), &mut grads)
                }
                Op::SliceCols(a, start, end) => {
                    let t = val(*a);
                    let c = t.cols();
                    let w = end - start;
                    let mut data = vec![0.0; t.len()];
                    for r in 0..t.rows() {
                        data[r * c + start..r * c + end].copy_from_slice(&g.data[r * w..(r + 1) * w]);
                    }
                    acc(*a, Tensor { shape: t.shape.clone(), data }, &mut grads)
                }
            }
        }
        Ok(Gradients { grads })
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
