use super::kernel::{gemm, MatRef};
use super::{numel, permute_data, Result, Tensor, TensorError, MAX_RANK};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Exp,
    Log,
    Scale(f32),
    Clamp(f32, f32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

enum Value<'t> {
    Owned(Tensor),
    Borrowed(&'t Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

/// How one contraction operand is presented to the matrix kernel.
enum Layout {
    /// Buffer already has the kernel's row-major layout.
    Direct,
    /// Buffer holds the transpose of the kernel's view.
    Transposed,
    /// Permuted copy in the kernel's row-major layout.
    Packed(Vec<f32>),
}

struct ContractPlan {
    m: usize,
    k: usize,
    n: usize,
    x_perm: Vec<usize>,
    y_perm: Vec<usize>,
    x_layout: Layout,
    y_layout: Layout,
    has_pairs: bool,
    x_has_free: bool,
    y_has_free: bool,
}

impl ContractPlan {
    fn a_view<'a>(&'a self, x: &'a [f32]) -> MatRef<'a> {
        match &self.x_layout {
            Layout::Direct => MatRef::row_major(x, self.k),
            Layout::Transposed => MatRef::transposed(x, self.m),
            Layout::Packed(buf) => MatRef::row_major(buf, self.k),
        }
    }

    fn b_view<'a>(&'a self, y: &'a [f32]) -> MatRef<'a> {
        match &self.y_layout {
            Layout::Direct => MatRef::row_major(y, self.n),
            Layout::Transposed => MatRef::transposed(y, self.k),
            Layout::Packed(buf) => MatRef::row_major(buf, self.n),
        }
    }
}

enum Op {
    Leaf,
    Contract(Box<ContractPlan>),
    Add { scalar: bool },
    Sub { scalar: bool },
    Mul { scalar: bool },
    Relu,
    Exp,
    Log,
    Scale(f32),
    Clamp(f32, f32),
    Reduce {
        kind: ReduceKind,
        axis: Option<usize>,
        argmax: Vec<usize>,
    },
    Reshape,
    Patches { k: usize },
    AvgPool2,
    Concat { axis: usize },
}

struct Node<'t> {
    op: Op,
    inputs: Vec<Var>,
    value: Value<'t>,
    needs_grad: bool,
}

/// Append-only tape. Node inputs always precede the node.
pub struct Graph<'t> {
    nodes: Vec<Node<'t>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn is_identity(perm: &[usize]) -> bool {
    perm.iter().enumerate().all(|(i, &p)| i == p)
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(TensorError::AxisOutOfRange { axis, rank })
    } else {
        Ok(())
    }
}

impl<'t> Graph<'t> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value: Value::Owned(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an owned tensor; it is differentiated if it requires grad.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: Value::Owned(t),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a borrowed tensor (typically a model parameter) without copying.
    pub fn leaf_ref(&mut self, t: &'t Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: Value::Borrowed(t),
            needs_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: Value::Owned(t),
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Sums products over the paired axes. The result carries the free axes
    /// of `x` followed by the free axes of `y`, each in original order.
    pub fn contract(&mut self, x: Var, y: Var, axes: &[(usize, usize)]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ys = self.shape(y).to_vec();
        let mut x_paired = vec![false; xs.len()];
        let mut y_paired = vec![false; ys.len()];
        for &(xa, ya) in axes {
            check_axis(xa, xs.len())?;
            check_axis(ya, ys.len())?;
            if x_paired[xa] || y_paired[ya] {
                return Err(TensorError::Invalid(format!(
                    "axis pair ({xa}, {ya}) reuses an axis"
                )));
            }
            if xs[xa] != ys[ya] {
                return Err(TensorError::AxisPairMismatch {
                    x_axis: xa,
                    y_axis: ya,
                    x_extent: xs[xa],
                    y_extent: ys[ya],
                });
            }
            x_paired[xa] = true;
            y_paired[ya] = true;
        }
        let x_free: Vec<usize> = (0..xs.len()).filter(|&a| !x_paired[a]).collect();
        let y_free: Vec<usize> = (0..ys.len()).filter(|&a| !y_paired[a]).collect();
        let out_rank = x_free.len() + y_free.len();
        if out_rank > MAX_RANK {
            return Err(TensorError::RankOverflow(out_rank));
        }
        let out_shape: Vec<usize> = x_free
            .iter()
            .map(|&a| xs[a])
            .chain(y_free.iter().map(|&a| ys[a]))
            .collect();

        let m: usize = x_free.iter().map(|&a| xs[a]).product();
        let n: usize = y_free.iter().map(|&a| ys[a]).product();
        let k: usize = axes.iter().map(|&(xa, _)| xs[xa]).product();

        let x_perm: Vec<usize> = x_free.iter().copied().chain(axes.iter().map(|p| p.0)).collect();
        let y_perm: Vec<usize> = axes.iter().map(|p| p.1).chain(y_free.iter().copied()).collect();
        let x_swapped: Vec<usize> = axes.iter().map(|p| p.0).chain(x_free.iter().copied()).collect();
        let y_swapped: Vec<usize> = y_free.iter().copied().chain(axes.iter().map(|p| p.1)).collect();

        let xd = self.value(x).data();
        let yd = self.value(y).data();
        let x_layout = if is_identity(&x_perm) {
            Layout::Direct
        } else if is_identity(&x_swapped) {
            Layout::Transposed
        } else {
            Layout::Packed(permute_data(xd, &xs, &x_perm))
        };
        let y_layout = if is_identity(&y_perm) {
            Layout::Direct
        } else if is_identity(&y_swapped) {
            Layout::Transposed
        } else {
            Layout::Packed(permute_data(yd, &ys, &y_perm))
        };
        let plan = ContractPlan {
            m,
            k,
            n,
            x_perm,
            y_perm,
            x_layout,
            y_layout,
            has_pairs: !axes.is_empty(),
            x_has_free: !x_free.is_empty(),
            y_has_free: !y_free.is_empty(),
        };
        let mut out = vec![0.0f32; m * n];
        gemm(m, k, n, plan.a_view(xd), plan.b_view(yd), &mut out, plan.has_pairs);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(Op::Contract(Box::new(plan)), vec![x, y], value))
    }

    pub fn elementwise(&mut self, kind: Elementwise, operands: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        };
        if operands.len() != arity {
            return Err(TensorError::Invalid(format!(
                "{kind:?} takes {arity} operand(s), got {}",
                operands.len()
            )));
        }
        let x = operands[0];
        match kind {
            Elementwise::Add => self.add(x, operands[1]),
            Elementwise::Sub => self.sub(x, operands[1]),
            Elementwise::Mul => self.mul(x, operands[1]),
            Elementwise::Relu => Ok(self.relu(x)),
            Elementwise::Exp => Ok(self.exp(x)),
            Elementwise::Log => self.log(x),
            Elementwise::Scale(c) => Ok(self.scale(x, c)),
            Elementwise::Clamp(lo, hi) => self.clamp(x, lo, hi),
        }
    }

    fn binary_mode(&self, x: Var, y: Var) -> Result<bool> {
        let (xs, ys) = (self.shape(x), self.shape(y));
        if xs == ys {
            Ok(false)
        } else if ys.is_empty() {
            Ok(true)
        } else {
            Err(TensorError::ShapeMismatch(format!(
                "elementwise operands {xs:?} and {ys:?}"
            )))
        }
    }

    fn binary(&mut self, x: Var, y: Var, f: impl Fn(f32, f32) -> f32) -> Result<(bool, Tensor)> {
        let scalar = self.binary_mode(x, y)?;
        let xv = self.value(x);
        let yv = self.value(y);
        let data: Vec<f32> = if scalar {
            let s = yv.item();
            xv.data().iter().map(|&a| f(a, s)).collect()
        } else {
            xv.data().iter().zip(yv.data()).map(|(&a, &b)| f(a, b)).collect()
        };
        Ok((scalar, Tensor::new(xv.shape(), data)?))
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        let (scalar, v) = self.binary(x, y, |a, b| a + b)?;
        Ok(self.push(Op::Add { scalar }, vec![x, y], v))
    }

    pub fn sub(&mut self, x: Var, y: Var) -> Result<Var> {
        let (scalar, v) = self.binary(x, y, |a, b| a - b)?;
        Ok(self.push(Op::Sub { scalar }, vec![x, y], v))
    }

    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        let (scalar, v) = self.binary(x, y, |a, b| a * b)?;
        Ok(self.push(Op::Mul { scalar }, vec![x, y], v))
    }

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(f32) -> f32) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&a| f(a)).collect();
        let value = Tensor::new(xv.shape(), data).expect("shape preserved");
        self.push(op, vec![x], value)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Op::Relu, x, |a| if a > 0.0 { a } else { 0.0 })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Op::Exp, x, f32::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some((index, &value)) = self.value(x).data().iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
            return Err(TensorError::Domain { index, value });
        }
        Ok(self.unary(Op::Log, x, f32::ln))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        self.unary(Op::Scale(c), x, |a| a * c)
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var> {
        if !(lo <= hi) {
            return Err(TensorError::Invalid(format!("clamp bounds {lo} > {hi}")));
        }
        Ok(self.unary(Op::Clamp(lo, hi), x, |a| a.clamp(lo, hi)))
    }

    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axis: Option<usize>) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() == 0 {
            return Err(TensorError::Empty);
        }
        let shape = xv.shape();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, xv.numel(), 1, Vec::new()),
            Some(a) => {
                check_axis(a, shape.len())?;
                let mut out_shape = shape.to_vec();
                out_shape.remove(a);
                (numel(&shape[..a]), shape[a], numel(&shape[a + 1..]), out_shape)
            }
        };
        let data = xv.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::new();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let s: f64 = (0..len).map(|j| data[at(j)] as f64).sum();
                        out.push(if kind == ReduceKind::Mean { s / len as f64 } else { s } as f32);
                    }
                    ReduceKind::Max => {
                        let mut best = at(0);
                        for j in 1..len {
                            if data[at(j)] > data[best] {
                                best = at(j);
                            }
                        }
                        out.push(data[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(Op::Reduce { kind, axis, argmax }, vec![x], value))
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, axis)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, axis)
    }

    pub fn max(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Max, x, axis)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let mut value = value;
        value.set_requires_grad(false);
        Ok(self.push(Op::Reshape, vec![x], value))
    }

    /// Same-padded `k x k` neighbourhoods of an NHWC tensor:
    /// `(B, H, W, C) -> (B, H, W, k*k*C)`, inner order `(dy, dx, c)`.
    pub fn patches(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || k.is_multiple_of(2) {
            return Err(TensorError::Invalid(format!(
                "patches needs an NHWC tensor and odd kernel, got {shape:?} and k={k}"
            )));
        }
        let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0f32; b * h * w * k * k * c];
        for_each_tap(b, h, w, c, k, |s, d| out[d..d + c].copy_from_slice(&src[s..s + c]));
        let value = Tensor::new(&[b, h, w, k * k * c], out)?;
        Ok(self.push(Op::Patches { k }, vec![x], value))
    }

    /// 2x2 average pooling with stride 2 over an NHWC tensor.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || !shape[1].is_multiple_of(2) || !shape[2].is_multiple_of(2) {
            return Err(TensorError::Invalid(format!(
                "avg_pool2 needs NHWC with even H and W, got {shape:?}"
            )));
        }
        let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0f32; b * ho * wo * c];
        for bi in 0..b {
            for y in 0..ho {
                for xo in 0..wo {
                    let d = ((bi * ho + y) * wo + xo) * c;
                    for ch in 0..c {
                        let s = |dy: usize, dx: usize| src[((bi * h + 2 * y + dy) * w + 2 * xo + dx) * c + ch] as f64;
                        out[d + ch] = ((s(0, 0) + s(0, 1) + s(1, 0) + s(1, 1)) * 0.25) as f32;
                    }
                }
            }
        }
        let value = Tensor::new(&[b, ho, wo, c], out)?;
        Ok(self.push(Op::AvgPool2, vec![x], value))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or(TensorError::Empty)?).to_vec();
        check_axis(axis, first.len())?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat along axis {axis}: {first:?} vs {s:?}"
                )));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(Op::Concat { axis }, xs.to_vec(), value))
    }

    /// Reverse sweep from a rank-0 `loss`. Gradients are returned for every
    /// leaf that requires them; intermediate buffers are released as soon as
    /// they have been propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if !shape.is_empty() {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        let mut pending: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        let mut leaves: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            pending[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = pending[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                leaves[id] = Some(Tensor::new(node.value.get().shape(), g)?);
                continue;
            }
            let input_grads = self.node_backward(node, &g)?;
            for (input, grad) in node.inputs.iter().zip(input_grads) {
                let Some(grad) = grad else { continue };
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut pending[input.0] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn node_backward(&self, node: &Node<'_>, g: &[f32]) -> Result<Vec<Option<Vec<f32>>>> {
        let inp = |i: usize| self.nodes[node.inputs[i].0].value.get();
        let wants = |i: usize| self.nodes[node.inputs[i].0].needs_grad;
        let out = node.value.get();
        let sum = |v: &[f32]| vec![v.iter().map(|&a| a as f64).sum::<f64>() as f32];
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Contract(plan) => {
                let (x, y) = (inp(0), inp(1));
                vec![
                    wants(0).then(|| contract_grad_x(plan, x, y, g)),
                    wants(1).then(|| contract_grad_y(plan, x, y, g)),
                ]
            }
            Op::Add { scalar } => vec![
                wants(0).then(|| g.to_vec()),
                wants(1).then(|| if *scalar { sum(g) } else { g.to_vec() }),
            ],
            Op::Sub { scalar } => {
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                vec![
                    wants(0).then(|| g.to_vec()),
                    wants(1).then(|| if *scalar { sum(&neg) } else { neg }),
                ]
            }
            Op::Mul { scalar } => {
                let (x, y) = (inp(0).data(), inp(1).data());
                let gx = wants(0).then(|| {
                    if *scalar {
                        g.iter().map(|&a| a * y[0]).collect()
                    } else {
                        g.iter().zip(y).map(|(&a, &b)| a * b).collect()
                    }
                });
                let gy = wants(1).then(|| {
                    let prod: Vec<f32> = g.iter().zip(x).map(|(&a, &b)| a * b).collect();
                    if *scalar {
                        sum(&prod)
                    } else {
                        prod
                    }
                });
                vec![gx, gy]
            }
            Op::Relu => {
                let x = inp(0).data();
                vec![Some(g.iter().zip(x).map(|(&a, &b)| if b > 0.0 { a } else { 0.0 }).collect())]
            }
            Op::Exp => vec![Some(g.iter().zip(out.data()).map(|(&a, &e)| a * e).collect())],
            Op::Log => vec![Some(g.iter().zip(inp(0).data()).map(|(&a, &b)| a / b).collect())],
            Op::Scale(c) => vec![Some(g.iter().map(|&a| a * c).collect())],
            Op::Clamp(lo, hi) => {
                let x = inp(0).data();
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(&a, &b)| if b >= *lo && b <= *hi { a } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Reduce { kind, axis, argmax } => {
                let x = inp(0);
                let mut gx = vec![0.0f32; x.numel()];
                match kind {
                    ReduceKind::Max => {
                        for (&idx, &gv) in argmax.iter().zip(g) {
                            gx[idx] += gv;
                        }
                    }
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let (outer, len, inner) = match axis {
                            None => (1, x.numel(), 1),
                            Some(a) => {
                                let s = x.shape();
                                (numel(&s[..*a]), s[*a], numel(&s[a + 1..]))
                            }
                        };
                        let f = if *kind == ReduceKind::Mean { 1.0 / len as f32 } else { 1.0 };
                        for o in 0..outer {
                            for j in 0..len {
                                for i in 0..inner {
                                    gx[o * len * inner + j * inner + i] = g[o * inner + i] * f;
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::Reshape => vec![Some(g.to_vec())],
            Op::Patches { k } => {
                let s = inp(0).shape();
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let mut gx = vec![0.0f32; b * h * w * c];
                for_each_tap(b, h, w, c, *k, |src, dst| {
                    for (a, &v) in gx[src..src + c].iter_mut().zip(&g[dst..dst + c]) {
                        *a += v;
                    }
                });
                vec![Some(gx)]
            }
            Op::AvgPool2 => {
                let s = inp(0).shape();
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                let mut gx = vec![0.0f32; b * h * w * c];
                for bi in 0..b {
                    for y in 0..h {
                        for x in 0..w {
                            let d = ((bi * h + y) * w + x) * c;
                            let s = ((bi * ho + y / 2) * wo + x / 2) * c;
                            for ch in 0..c {
                                gx[d + ch] = g[s + ch] * 0.25;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::Concat { axis } => {
                let shape = out.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                let mut grads = Vec::with_capacity(node.inputs.len());
                for i in 0..node.inputs.len() {
                    let chunk = inp(i).shape()[*axis] * inner;
                    if wants(i) {
                        let mut gi = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            gi.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        grads.push(Some(gi));
                    } else {
                        grads.push(None);
                    }
                    offset += chunk;
                }
                grads
            }
        })
    }
}

/// Calls `f(src_offset, dst_offset)` for every in-bounds tap of a same-padded
/// `k x k` window; offsets address `c` contiguous channels.
fn for_each_tap(b: usize, h: usize, w: usize, c: usize, k: usize, mut f: impl FnMut(usize, usize)) {
    let p = (k / 2) as isize;
    let kkc = k * k * c;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let base = ((bi * h + y) * w + x) * kkc;
                for dy in 0..k {
                    let sy = y as isize + dy as isize - p;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let sx = x as isize + dx as isize - p;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + sy as usize) * w + sx as usize) * c;
                        f(src, base + (dy * k + dx) * c);
                    }
                }
            }
        }
    }
}

fn swap(v: MatRef<'_>) -> MatRef<'_> {
    MatRef {
        data: v.data,
        row_stride: v.col_stride,
        col_stride: v.row_stride,
    }
}

fn contract_grad_x(plan: &ContractPlan, x: &Tensor, y: &Tensor, g: &[f32]) -> Vec<f32> {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut ga = vec![0.0f32; m * k];
    gemm(m, n, k, MatRef::row_major(g, n), swap(plan.b_view(y.data())), &mut ga, plan.y_has_free);
    match plan.x_layout {
        Layout::Direct => ga,
        Layout::Transposed => permute_data(&ga, &[m, k], &[1, 0]),
        Layout::Packed(_) => {
            let permuted: Vec<usize> = plan.x_perm.iter().map(|&a| x.shape()[a]).collect();
            permute_data(&ga, &permuted, &inverse(&plan.x_perm))
        }
    }
}

fn contract_grad_y(plan: &ContractPlan, x: &Tensor, y: &Tensor, g: &[f32]) -> Vec<f32> {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut gb = vec![0.0f32; k * n];
    gemm(k, m, n, swap(plan.a_view(x.data())), MatRef::row_major(g, n), &mut gb, plan.x_has_free);
    match plan.y_layout {
        Layout::Direct => gb,
        Layout::Transposed => permute_data(&gb, &[k, n], &[1, 0]),
        Layout::Packed(_) => {
            let permuted: Vec<usize> = plan.y_perm.iter().map(|&a| y.shape()[a]).collect();
            permute_data(&gb, &permuted, &inverse(&plan.y_perm))
        }
    }
}

/// Gradients of the leaves that required them, keyed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Adds the gradient of `v` (if any) into `t`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g.data()),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn contract_with_identity() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let i = g.leaf(t(&[2, 2], &[1., 0., 0., 1.]));
        let y = g.contract(x, i, &[(1, 0)]).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn contract_matches_loop_oracle() {
        let xv = t(&[2, 2], &[1., 2., 3., 4.]);
        let gv = t(&[2, 3, 2], &(1..=12).map(|v| v as f32).collect::<Vec<_>>());
        let mut want = [0.0f32; 12];
        for j in 0..2 {
            for c in 0..3 {
                for r in 0..2 {
                    for a in 0..2 {
                        want[(j * 3 + c) * 2 + r] += xv.at(&[a, j]) * gv.at(&[a, c, r]);
                    }
                }
            }
        }
        let mut g = Graph::new();
        let x = g.leaf(xv);
        let y = g.leaf(gv);
        let out = g.contract(x, y, &[(0, 0)]).unwrap();
        assert_eq!(g.shape(out), &[2, 3, 2]);
        assert_eq!(g.value(out).data(), &want[..]);
    }

    #[test]
    fn contract_to_rank_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1., 2., 3.]));
        let y = g.leaf(t(&[3], &[4., 5., 6.]));
        let out = g.contract(x, y, &[(0, 0)]).unwrap();
        assert!(g.shape(out).is_empty());
        assert_eq!(g.value(out).item(), 32.0);
    }

    #[test]
    fn contract_errors() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[0.; 6]));
        let y = g.leaf(t(&[2, 3], &[0.; 6]));
        match g.contract(x, y, &[(1, 0)]) {
            Err(TensorError::AxisPairMismatch { x_axis: 1, y_axis: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            g.contract(x, y, &[(2, 0)]),
            Err(TensorError::AxisOutOfRange { axis: 2, rank: 2 })
        ));
        let a = g.leaf(Tensor::ones(&[1, 1, 1, 1, 1]).unwrap());
        let b = g.leaf(Tensor::ones(&[1, 1, 1, 1]).unwrap());
        assert!(matches!(g.contract(a, b, &[]), Err(TensorError::RankOverflow(9))));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[-1., 0., 2.]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0., 0., 2.]);
        let z = g.leaf(t(&[1], &[0.]));
        let e = g.exp(z);
        assert_eq!(g.value(e).data(), &[1.]);
        let a = g.leaf(t(&[2], &[1., 2.]));
        let b = g.leaf(t(&[2], &[3., 4.]));
        let s = g.elementwise(Elementwise::Add, &[a, b]).unwrap();
        assert_eq!(g.value(s).data(), &[4., 6.]);
        let c = g.leaf(Tensor::scalar(10.0));
        let m = g.mul(a, c).unwrap();
        assert_eq!(g.value(m).data(), &[10., 20.]);
        assert!(matches!(g.log(x), Err(TensorError::Domain { index: 0, .. })));
        assert!(g.add(a, x).is_err());
    }

    #[test]
    fn reduce_examples() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1., 2., 3.]));
        let s = g.sum(x, None).unwrap();
        assert_eq!(g.value(s).item(), 6.0);
        let m = g.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let mean = g.mean(m, Some(0)).unwrap();
        assert_eq!(g.value(mean).data(), &[2., 3.]);
        assert!(g.sum(m, Some(2)).is_err());
    }

    #[test]
    fn max_routes_to_first_argmax() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[3., 1., 3.]).with_requires_grad());
        let m = g.max(x, None).unwrap();
        assert_eq!(g.value(m).item(), 3.0);
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1., 0., 0.]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0).with_requires_grad());
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().item(), 6.0);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.7).with_requires_grad());
        let e = g.exp(x);
        let l = g.log(e).unwrap();
        let d = g.backward(l).unwrap().get(x).unwrap().item();
        assert!((d - 1.0).abs() < 1e-6);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(5.0).with_requires_grad());
        let y = g.add(x, x).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 2.]).with_requires_grad());
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 2.]).with_requires_grad());
        let c = g.constant(t(&[2], &[3., 4.]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p, None).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3., 4.]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn pooling_and_patches() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 2, 2, 1], &[1., 2., 3., 4.]));
        let p = g.avg_pool2(x).unwrap();
        assert_eq!(g.value(p).data(), &[2.5]);
        let q = g.patches(x, 3).unwrap();
        assert_eq!(g.shape(q), &[1, 2, 2, 9]);
        // centre tap reproduces the input
        let v = g.value(q);
        for i in 0..4 {
            assert_eq!(v.data()[i * 9 + 4], (i + 1) as f32);
        }
        // top-left pixel sees zero padding above and left
        assert_eq!(&v.data()[..9], &[0., 0., 0., 0., 1., 2., 0., 3., 4.]);
    }

    #[test]
    fn concat_along_channels() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 1], &[1., 2.]));
        let b = g.leaf(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1., 3., 4., 2., 5., 6.]);
    }
}
