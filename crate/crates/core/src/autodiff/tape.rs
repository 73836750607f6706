use super::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use super::tensor::numel;
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRowBias(usize, usize),
    AddChannelBias(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sum {
        x: usize,
        axis: Option<usize>,
    },
    Mean {
        x: usize,
        axis: Option<usize>,
    },
    GlobalAvgPool(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeometry,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSoftmax {
        x: usize,
        axis: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` requires grad and
    /// is reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Stores the gradient of `v` in the tensor's grad slot (zeros if `v`
    /// did not influence the loss).
    pub fn write_to(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        let g = match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tensor.len()],
        };
        tensor.set_grad(g)
    }
}

/// Dynamic computation tape. Operations are appended in execution order, so
/// operands always precede their results; [`Tape::backward`] walks the
/// record in reverse exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// `(outer, axis_len, inner)` strides for reducing along `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn grad_any(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a tensor as a leaf. Its `requires_grad` flag decides whether
    /// backward produces a gradient for it.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values, false)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone(), false).expect("tape nodes are well formed")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: self.shape(a).to_vec(),
                found: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn check_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        if self.shape(v).len() != rank {
            return Err(TensorError::Rank {
                op,
                expected: rank,
                found: self.shape(v).to_vec(),
            });
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, v: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(v).len() {
            return Err(TensorError::Axis {
                op,
                axis,
                shape: self.shape(v).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_rank("matmul", a, 2)?;
        self.check_rank("matmul", b, 2)?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (k2, n) = (self.shape(b)[0], self.shape(b)[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                expected: vec![k, n],
                found: vec![k2, n],
            });
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a.0, b.0), rg))
    }

    /// Swaps the two axes of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check_rank("transpose", x, 2)?;
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        let out = transpose_raw(self.value(x), r, c);
        let rg = self.grad_any(&[x]);
        Ok(self.push(vec![c, r], out, Op::Transpose(x.0), rg))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.grad_any(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// `x[n, k] + bias[k]`, the bias repeated over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check_rank("add_row_bias", x, 2)?;
        let k = self.shape(x)[1];
        if self.shape(bias) != [k] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                expected: vec![k],
                found: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).to_vec();
        let out: Vec<f64> = self
            .value(x)
            .chunks(k)
            .flat_map(|row| row.iter().zip(&b).map(|(r, b)| r + b))
            .collect();
        let rg = self.grad_any(&[x, bias]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::AddRowBias(x.0, bias.0), rg))
    }

    /// `x[n, c, h, w] + bias[c]`, the bias repeated over batch and space.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check_rank("add_channel_bias", x, 4)?;
        let shape = self.shape(x).to_vec();
        let (c, hw) = (shape[1], shape[2] * shape[3]);
        if self.shape(bias) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                expected: vec![c],
                found: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[(i / hw) % c])
            .collect();
        let rg = self.grad_any(&[x, bias]);
        Ok(self.push(shape, out, Op::AddChannelBias(x.0, bias.0), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let rg = self.grad_any(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale(x.0, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.grad_any(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Relu(x.0), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.exp()).collect();
        let rg = self.grad_any(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Exp(x.0), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.value(x).iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(TensorError::Domain {
                op: "log",
                value: bad,
            });
        }
        let out = self.value(x).iter().map(|v| v.ln()).collect();
        let rg = self.grad_any(&[x]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Log(x.0), rg))
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let rg = self.grad_any(&[x]);
        let op = if mean {
            Op::Mean { x: x.0, axis }
        } else {
            Op::Sum { x: x.0, axis }
        };
        match axis {
            None => {
                let vals = self.value(x);
                let mut s: f64 = vals.iter().sum();
                if mean {
                    s /= vals.len() as f64;
                }
                Ok(self.push(Vec::new(), vec![s], op, rg))
            }
            Some(axis) => {
                self.check_axis(if mean { "mean" } else { "sum" }, x, axis)?;
                let shape = self.shape(x).to_vec();
                let (outer, len, inner) = split_axis(&shape, axis);
                let vals = self.value(x);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += vals[base + i];
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|v| *v /= len as f64);
                }
                let mut new_shape = shape;
                new_shape.remove(axis);
                Ok(self.push(new_shape, out, op, rg))
            }
        }
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        self.reduce(x, None, false)
            .expect("full reduction cannot fail")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        self.reduce(x, None, true)
            .expect("full reduction cannot fail")
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Some(axis), false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Some(axis), true)
    }

    /// Spatial mean: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check_rank("global_avg_pool", x, 4)?;
        let shape = self.shape(x).to_vec();
        let hw = shape[2] * shape[3];
        let out = self
            .value(x)
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.grad_any(&[x]);
        Ok(self.push(vec![shape[0], shape[1]], out, Op::GlobalAvgPool(x.0), rg))
    }

    /// Zero-padded cross-correlation (no kernel flip).
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check_rank("conv2d", input, 4)?;
        self.check_rank("conv2d", kernel, 4)?;
        let geom = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, pad)?;
        let out = conv2d_forward(self.value(input), self.value(kernel), &geom);
        let rg = self.grad_any(&[input, kernel]);
        Ok(self.push(
            geom.output_shape(),
            out,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                geom,
            },
            rg,
        ))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let out = softmax_raw(self.value(x), &shape, axis, false);
        let rg = self.grad_any(&[x]);
        Ok(self.push(shape, out, Op::Softmax { x: x.0, axis }, rg))
    }

    /// `z - logsumexp(z)` along `axis`; finite even where softmax underflows.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let out = softmax_raw(self.value(x), &shape, axis, true);
        let rg = self.grad_any(&[x]);
        Ok(self.push(shape, out, Op::LogSoftmax { x: x.0, axis }, rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check_rank("cross_entropy", logits, 2)?;
        let (n, c) = (self.shape(logits)[0], self.shape(logits)[1]);
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                expected: vec![n],
                found: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Label {
                label: bad,
                classes: c,
            });
        }
        let shape = self.shape(logits).to_vec();
        let log_p = softmax_raw(self.value(logits), &shape, 1, true);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &l)| log_p[i * c + l])
            .sum::<f64>()
            / n as f64;
        let probs = log_p.iter().map(|v| v.exp()).collect();
        let rg = self.grad_any(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. A tape supports a single backward
    /// pass; later calls fail with [`TensorError::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.node(loss).value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        // Only nodes flagged as requiring grad carry meaningful gradients.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let wants = |i: usize| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                if wants(a) {
                    // dA = G · Bᵀ
                    let bv = &self.nodes[b].value;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gij * bv[p * n + j];
                            }
                        }
                    }
                    add_into(&mut grads[a], &da);
                }
                if wants(b) {
                    // dB = Aᵀ · G
                    let av = &self.nodes[a].value;
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let row = &mut db[p * n..(p + 1) * n];
                            row.iter_mut()
                                .zip(&g[i * n..(i + 1) * n])
                                .for_each(|(d, gv)| *d += aip * gv);
                        }
                    }
                    add_into(&mut grads[b], &db);
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                add_into(&mut grads[x], &transpose_raw(g, c, r));
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    add_into(&mut grads[a], g);
                }
                if wants(b) {
                    add_into(&mut grads[b], g);
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    add_into(&mut grads[a], g);
                }
                if wants(b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_into(&mut grads[b], &neg);
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b].value)
                        .map(|(g, y)| g * y)
                        .collect();
                    add_into(&mut grads[a], &d);
                }
                if wants(b) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a].value)
                        .map(|(g, x)| g * x)
                        .collect();
                    add_into(&mut grads[b], &d);
                }
            }
            &Op::AddRowBias(x, bias) => {
                if wants(x) {
                    add_into(&mut grads[x], g);
                }
                if wants(bias) {
                    let k = self.nodes[bias].value.len();
                    let mut db = vec![0.0; k];
                    for row in g.chunks(k) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    add_into(&mut grads[bias], &db);
                }
            }
            &Op::AddChannelBias(x, bias) => {
                if wants(x) {
                    add_into(&mut grads[x], g);
                }
                if wants(bias) {
                    let shape = &self.nodes[x].shape;
                    let (c, hw) = (shape[1], shape[2] * shape[3]);
                    let mut db = vec![0.0; c];
                    for (i, plane) in g.chunks(hw).enumerate() {
                        db[i % c] += plane.iter().sum::<f64>();
                    }
                    add_into(&mut grads[bias], &db);
                }
            }
            &Op::Scale(x, s) => {
                let d: Vec<f64> = g.iter().map(|v| v * s).collect();
                add_into(&mut grads[x], &d);
            }
            &Op::Relu(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x].value)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                add_into(&mut grads[x], &d);
            }
            &Op::Exp(x) => {
                let d: Vec<f64> = g.iter().zip(&node.value).map(|(g, y)| g * y).collect();
                add_into(&mut grads[x], &d);
            }
            &Op::Log(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x].value)
                    .map(|(g, v)| g / v)
                    .collect();
                add_into(&mut grads[x], &d);
            }
            &Op::Sum { x, axis } | &Op::Mean { x, axis } => {
                let mean = matches!(node.op, Op::Mean { .. });
                let src = &self.nodes[x];
                let d = match axis {
                    None => {
                        let scale = if mean {
                            1.0 / src.value.len() as f64
                        } else {
                            1.0
                        };
                        vec![g[0] * scale; src.value.len()]
                    }
                    Some(axis) => {
                        let (outer, len, inner) = split_axis(&src.shape, axis);
                        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
                        let mut d = vec![0.0; src.value.len()];
                        for o in 0..outer {
                            for a in 0..len {
                                let base = (o * len + a) * inner;
                                for i in 0..inner {
                                    d[base + i] = g[o * inner + i] * scale;
                                }
                            }
                        }
                        d
                    }
                };
                add_into(&mut grads[x], &d);
            }
            &Op::GlobalAvgPool(x) => {
                let shape = &self.nodes[x].shape;
                let hw = shape[2] * shape[3];
                let mut d = vec![0.0; self.nodes[x].value.len()];
                for (plane, gv) in d.chunks_mut(hw).zip(g) {
                    plane.fill(gv / hw as f64);
                }
                add_into(&mut grads[x], &d);
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                let (din, dk) = conv2d_backward(
                    &self.nodes[*input].value,
                    &self.nodes[*kernel].value,
                    g,
                    geom,
                    wants(*input),
                    wants(*kernel),
                );
                if let Some(din) = din {
                    add_into(&mut grads[*input], &din);
                }
                if let Some(dk) = dk {
                    add_into(&mut grads[*kernel], &dk);
                }
            }
            &Op::Softmax { x, axis } => {
                // dx = y ⊙ (g − Σ_axis g⊙y)
                let y = &node.value;
                let (outer, len, inner) = split_axis(&node.shape, axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                        for a in 0..len {
                            d[at(a)] = y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                add_into(&mut grads[x], &d);
            }
            &Op::LogSoftmax { x, axis } => {
                // dx = g − softmax ⊙ Σ_axis g
                let y = &node.value;
                let (outer, len, inner) = split_axis(&node.shape, axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let total: f64 = (0..len).map(|a| g[at(a)]).sum();
                        for a in 0..len {
                            d[at(a)] = g[at(a)] - y[at(a)].exp() * total;
                        }
                    }
                }
                add_into(&mut grads[x], &d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.nodes[*logits].shape[1];
                let scale = g[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= scale;
                }
                add_into(&mut grads[*logits], &d);
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            row.iter_mut()
                .zip(&b[p * n..(p + 1) * n])
                .for_each(|(o, bv)| *o += aip * bv);
        }
    }
    out
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

pub(crate) fn softmax_raw(x: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let max = (0..len).map(|a| x[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..len).map(|a| (x[at(a)] - max).exp()).sum();
            let log_denom = denom.ln();
            for a in 0..len {
                let shifted = x[at(a)] - max;
                out[at(a)] = if log {
                    shifted - log_denom
                } else {
                    shifted.exp() / denom
                };
            }
        }
    }
    out
}
