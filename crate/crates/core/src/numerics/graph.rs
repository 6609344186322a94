//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the tape; node indices are therefore a
//! topological order and backward is a single reverse sweep. Gradients are
//! only propagated into nodes that (transitively) depend on a leaf with
//! `requires_grad`, so frozen weights cost nothing in the backward pass.
//!
//! Broadcasting follows numpy rules: shapes are aligned at the trailing axis
//! and a dimension of size 1 (or a missing leading dimension) is repeated.
//! Reductions along an axis keep the row-major layout of the remaining axes.

use super::params::ParamSet;
use super::tensor::{check_finite, contiguous_strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    AddScalar { a: Var },
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    Sum { a: Var },
    SumAxis { a: Var, axis: usize },
    Sqrt { a: Var },
    Relu { a: Var },
    Gelu { a: Var },
    ClampMin { a: Var, min: f64 },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    IndexSelect { a: Var, axis: usize, indices: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Conv3x3 { x: Var, w: Var, central: bool },
    BceWithLogits { z: Var, labels: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

/// Computation tape for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(String, Var)>,
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push_node(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    /// Leaf that is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let tracked = tensor.requires_grad();
        let value = Tensor::from_parts(tensor.shape().to_vec(), tensor.into_data());
        self.push_node(value, Op::Leaf, tracked)
    }

    /// Binds a named parameter from `params` as a leaf. Trainable entries are
    /// tracked; frozen ones behave like constants.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        let tensor = params
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter `{name}`")))?;
        let tracked = tensor.requires_grad();
        let value = Tensor::from_parts(tensor.shape().to_vec(), tensor.data().to_vec());
        let var = self.push_node(value, Op::Leaf, tracked);
        self.bindings.push((name.to_string(), var));
        Ok(var)
    }

    /// Parameter names bound via [`Graph::param`], in binding order.
    pub fn bindings(&self) -> &[(String, Var)] {
        &self.bindings
    }

    /// Copies the value of `a` into a new untracked leaf.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[Var]) -> Result<Var> {
        check_finite(name, &data)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_node(Tensor::from_parts(shape, data), op, requires_grad))
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| {
            Error::shape("broadcast", format!("{name}: {sa:?} vs {sb:?}"))
        })?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let numel = out_shape.iter().product();
            let mut out = vec![0.0; numel];
            let stra = broadcast_strides(&sa, &out_shape);
            let strb = broadcast_strides(&sb, &out_shape);
            walk2(&out_shape, &stra, &strb, |o, ia, ib| out[o] = f(av[ia], bv[ib]));
            out
        };
        self.push_op(name, out_shape, data, Op::Binary { kind, a, b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push_op("scale", shape, data, Op::Scale { a, factor }, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push_op("add_scalar", shape, data, Op::AddScalar { a }, &[a])
    }

    fn unary(&mut self, name: &str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(name, shape, data, op, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::NonFinite { op: "sqrt of negative value".into() });
        }
        self.unary("sqrt", a, Op::Sqrt { a }, f64::sqrt)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu { a }, |x| x.max(0.0))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, Op::Gelu { a }, |x| 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)))
    }

    pub fn clamp_min(&mut self, a: Var, min: f64) -> Result<Var> {
        self.unary("clamp_min", a, Op::ClampMin { a, min }, |x| x.max(min))
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[.., M, K] x [K, N] -> [.., M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let rows = self.value(a).numel() / k;
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), rows, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push_op("matmul", shape, data, Op::MatMul { a, b }, &[a, b])
    }

    /// `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(batch * m * n);
        for t in 0..batch {
            data.extend(matmul_kernel(&av[t * m * k..(t + 1) * m * k], &bv[t * k * n..(t + 1) * k * n], m, k, n));
        }
        self.push_op("bmm", vec![batch, m, n], data, Op::BatchMatMul { a, b }, &[a, b])
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let data = self.value(a).data().to_vec();
        self.push_op("reshape", shape.to_vec(), data, Op::Reshape { a }, &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if axes.len() != sa.len() || axes.iter().any(|&ax| ax >= sa.len() || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for shape {sa:?}")));
        }
        let in_strides = contiguous_strides(&sa);
        let out_shape: Vec<usize> = axes.iter().map(|&ax| sa[ax]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
        let av = self.value(a).data();
        let mut data = vec![0.0; av.len()];
        walk1(&out_shape, &src_strides, |o, i| data[o] = av[i]);
        self.push_op("permute", out_shape, data, Op::Permute { a, axes: axes.to_vec() }, &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(Error::shape("transpose_last", format!("{:?}", self.shape(a))));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(a, &axes)
    }

    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || indices.iter().any(|&i| i >= sa[axis]) {
            return Err(Error::shape("index_select", format!("axis {axis}, indices {indices:?} for {sa:?}")));
        }
        let (outer, n, inner) = split_axis(&sa, axis);
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &j in indices {
                let start = (o * n + j) * inner;
                data.extend_from_slice(&av[start..start + inner]);
            }
        }
        let mut shape = sa;
        shape[axis] = indices.len();
        self.push_op("index_select", shape, data, Op::IndexSelect { a, axis, indices: indices.to_vec() }, &[a])
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let indices: Vec<usize> = (start..start + len).collect();
        self.index_select(a, axis, &indices)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let v = self.value(p).data();
                data.extend_from_slice(&v[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push_op("concat", shape, data, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push_op("sum", Vec::new(), vec![s], Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums over `axis`; with `keepdim` the axis is kept with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} for {sa:?}")));
        }
        let (outer, n, inner) = split_axis(&sa, axis);
        let av = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &av[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = sa;
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        self.push_op("sum_axis", shape, data, Op::SumAxis { a, axis }, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(a, axis, keepdim)?;
        self.scale(s, 1.0 / n.max(1) as f64)
    }

    // ---- fused layers -----------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = *shape.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(width) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push_op("softmax", shape, data, Op::Softmax { a }, &[a])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(Error::shape(
                "layer_norm",
                format!("affine {:?}/{:?} for width {width}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / width;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..width {
                let h = (row[i] - mean) * rs;
                xhat[r * width + i] = h;
                data[r * width + i] = h * gv[i] + bv[i];
            }
        }
        self.push_op("layer_norm", shape, data, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    fn conv3x3_impl(&mut self, x: Var, w: Var, central: bool) -> Result<Var> {
        let name = if central { "cdc" } else { "conv3x3" };
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != 3 || sw[3] != 3 {
            return Err(Error::shape(
                if central { "cdc" } else { "conv3x3" },
                format!("input {sx:?} with kernel {sw:?} (expected [O, C, 3, 3])"),
            ));
        }
        let (b, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let o = sw[0];
        if h == 0 || wd == 0 {
            return Err(Error::shape("conv3x3", "empty spatial extent"));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut data = vec![0.0; b * o * h * wd];
        for bi in 0..b {
            for oi in 0..o {
                let out = &mut data[(bi * o + oi) * h * wd..(bi * o + oi + 1) * h * wd];
                for ci in 0..c {
                    let plane = &xv[(bi * c + ci) * h * wd..(bi * c + ci + 1) * h * wd];
                    let k = &wv[(oi * c + ci) * 9..(oi * c + ci + 1) * 9];
                    for i in 0..h {
                        for j in 0..wd {
                            let center = if central { plane[i * wd + j] } else { 0.0 };
                            let mut acc = 0.0;
                            for (t, kv) in k.iter().enumerate() {
                                let (ni, nj) = replicate(i, j, t, h, wd);
                                acc += kv * (plane[ni * wd + nj] - center);
                            }
                            out[i * wd + j] += acc;
                        }
                    }
                }
            }
        }
        self.push_op(name, vec![b, o, h, wd], data, Op::Conv3x3 { x, w, central }, &[x, w])
    }

    /// Plain 3x3 convolution, stride 1, replicate padding. `x: [B, C, H, W]`,
    /// `w: [O, C, 3, 3]`.
    pub fn conv3x3(&mut self, x: Var, w: Var) -> Result<Var> {
        self.conv3x3_impl(x, w, false)
    }

    /// Central difference convolution: `sum_i w_i * (x_i - x_center)` over each
    /// 3x3 window, stride 1, replicate padding.
    pub fn cdc(&mut self, x: Var, w: Var) -> Result<Var> {
        self.conv3x3_impl(x, w, true)
    }

    /// Mean binary cross-entropy on logits, `softplus(z) - y*z` form.
    pub fn bce_with_logits(&mut self, z: Var, labels: &[f64]) -> Result<Var> {
        let zv = self.value(z).data();
        if zv.len() != labels.len() || zv.is_empty() {
            return Err(Error::shape("bce", format!("{} logits vs {} labels", zv.len(), labels.len())));
        }
        let total: f64 = zv
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - y * z + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / zv.len() as f64;
        self.push_op("bce", Vec::new(), vec![loss], Op::BceWithLogits { z, labels: labels.to_vec() }, &[z])
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `root`. Returns gradients for every tracked
    /// leaf reachable from the root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            check_finite("backward", &g)?;
            self.backprop_node(node, &g, &mut grads);
        }
        for g in grads.iter().flatten() {
            check_finite("backward", g)?;
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let tracked = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let (av, bv) = (val(a), val(b));
                let out_shape = node.value.shape();
                let stra = broadcast_strides(shp(a), out_shape);
                let strb = broadcast_strides(shp(b), out_shape);
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                walk2(out_shape, &stra, &strb, |o, ia, ib| {
                    let go = g[o];
                    match kind {
                        BinaryKind::Add => {
                            ga[ia] += go;
                            gb[ib] += go;
                        }
                        BinaryKind::Sub => {
                            ga[ia] += go;
                            gb[ib] -= go;
                        }
                        BinaryKind::Mul => {
                            ga[ia] += go * bv[ib];
                            gb[ib] += go * av[ia];
                        }
                        BinaryKind::Div => {
                            ga[ia] += go / bv[ib];
                            gb[ib] -= go * av[ia] / (bv[ib] * bv[ib]);
                        }
                    }
                });
                if tracked(a) {
                    accumulate(grads, a, ga);
                }
                if tracked(b) {
                    accumulate(grads, b, gb);
                }
            }
            Op::Scale { a, factor } => accumulate(grads, *a, g.iter().map(|x| x * factor).collect()),
            Op::AddScalar { a } | Op::Reshape { a } => accumulate(grads, *a, g.to_vec()),
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (k, n) = (shp(b)[0], shp(b)[1]);
                let rows = val(a).len() / k;
                if tracked(a) {
                    accumulate(grads, a, matmul_grad_lhs(g, val(b), rows, k, n));
                }
                if tracked(b) {
                    accumulate(grads, b, matmul_grad_rhs(val(a), g, rows, k, n));
                }
            }
            Op::BatchMatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (batch, m, k, n) = (shp(a)[0], shp(a)[1], shp(a)[2], shp(b)[2]);
                let (av, bv) = (val(a), val(b));
                if tracked(a) {
                    let mut ga = Vec::with_capacity(av.len());
                    for t in 0..batch {
                        ga.extend(matmul_grad_lhs(&g[t * m * n..(t + 1) * m * n], &bv[t * k * n..(t + 1) * k * n], m, k, n));
                    }
                    accumulate(grads, a, ga);
                }
                if tracked(b) {
                    let mut gb = Vec::with_capacity(bv.len());
                    for t in 0..batch {
                        gb.extend(matmul_grad_rhs(&av[t * m * k..(t + 1) * m * k], &g[t * m * n..(t + 1) * m * n], m, k, n));
                    }
                    accumulate(grads, b, gb);
                }
            }
            Op::Permute { a, axes } => {
                let in_strides = contiguous_strides(shp(*a));
                let src: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
                let mut ga = vec![0.0; g.len()];
                walk1(node.value.shape(), &src, |o, i| ga[i] += g[o]);
                accumulate(grads, *a, ga);
            }
            Op::Sum { a } => accumulate(grads, *a, vec![g[0]; val(*a).len()]),
            Op::SumAxis { a, axis } => {
                let (outer, n, inner) = split_axis(shp(*a), *axis);
                let mut ga = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        ga[(o * n + j) * inner..(o * n + j + 1) * inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Sqrt { a } => {
                let out = node.value.data();
                accumulate(grads, *a, g.iter().zip(out).map(|(go, y)| if *go == 0.0 { 0.0 } else { go * 0.5 / y }).collect());
            }
            Op::Relu { a } => {
                accumulate(grads, *a, g.iter().zip(val(*a)).map(|(go, x)| if *x > 0.0 { *go } else { 0.0 }).collect());
            }
            Op::Gelu { a } => {
                let ga = g
                    .iter()
                    .zip(val(*a))
                    .map(|(go, &x)| {
                        let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
                        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                        go * (cdf + x * pdf)
                    })
                    .collect();
                accumulate(grads, *a, ga);
            }
            Op::ClampMin { a, min } => {
                accumulate(grads, *a, g.iter().zip(val(*a)).map(|(go, x)| if x > min { *go } else { 0.0 }).collect());
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let width = *node.value.shape().last().unwrap();
                let mut ga = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(width).zip(y.chunks(width)).zip(ga.chunks_mut(width)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for i in 0..width {
                        out[i] = yr[i] * (gr[i] - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let width = *node.value.shape().last().unwrap();
                let gv = val(*gamma);
                if tracked(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let span = r * width..(r + 1) * width;
                        let gr = &g[span.clone()];
                        let hr = &xhat[span.clone()];
                        let gh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_gh = gh.iter().sum::<f64>() / width as f64;
                        let mean_ghh = gh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                        for i in 0..width {
                            gx[span.start + i] = rs * (gh[i] - mean_gh - hr[i] * mean_ghh);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if tracked(*gamma) {
                    let mut gg = vec![0.0; width];
                    for (gr, hr) in g.chunks(width).zip(xhat.chunks(width)) {
                        for i in 0..width {
                            gg[i] += gr[i] * hr[i];
                        }
                    }
                    accumulate(grads, *gamma, gg);
                }
                if tracked(*beta) {
                    let mut gb = vec![0.0; width];
                    for gr in g.chunks(width) {
                        for i in 0..width {
                            gb[i] += gr[i];
                        }
                    }
                    accumulate(grads, *beta, gb);
                }
            }
            Op::IndexSelect { a, axis, indices } => {
                let (outer, n, inner) = split_axis(shp(*a), *axis);
                let m = indices.len();
                let mut ga = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for (jj, &j) in indices.iter().enumerate() {
                        let src = &g[(o * m + jj) * inner..(o * m + jj + 1) * inner];
                        for (d, s) in ga[(o * n + j) * inner..(o * n + j + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = shp(p)[*axis];
                    if tracked(p) {
                        let mut gp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[start..start + n * inner]);
                        }
                        accumulate(grads, p, gp);
                    }
                    offset += n;
                }
            }
            Op::Conv3x3 { x, w, central } => {
                let (sx, sw) = (shp(*x), shp(*w));
                let (b, c, h, wd, o) = (sx[0], sx[1], sx[2], sx[3], sw[0]);
                let (xv, wv) = (val(*x), val(*w));
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                for bi in 0..b {
                    for oi in 0..o {
                        let go = &g[(bi * o + oi) * h * wd..(bi * o + oi + 1) * h * wd];
                        for ci in 0..c {
                            let base = (bi * c + ci) * h * wd;
                            let plane = &xv[base..base + h * wd];
                            let kbase = (oi * c + ci) * 9;
                            let k = &wv[kbase..kbase + 9];
                            let ksum: f64 = k.iter().sum();
                            for i in 0..h {
                                for j in 0..wd {
                                    let gval = go[i * wd + j];
                                    if gval == 0.0 {
                                        continue;
                                    }
                                    let center = plane[i * wd + j];
                                    for t in 0..9 {
                                        let (ni, nj) = replicate(i, j, t, h, wd);
                                        gx[base + ni * wd + nj] += gval * k[t];
                                        let diff = if *central { plane[ni * wd + nj] - center } else { plane[ni * wd + nj] };
                                        gw[kbase + t] += gval * diff;
                                    }
                                    if *central {
                                        gx[base + i * wd + j] -= gval * ksum;
                                    }
                                }
                            }
                        }
                    }
                }
                if tracked(*x) {
                    accumulate(grads, *x, gx);
                }
                if tracked(*w) {
                    accumulate(grads, *w, gw);
                }
            }
            Op::BceWithLogits { z, labels } => {
                let n = labels.len() as f64;
                let ga = val(*z)
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| g[0] * (sigmoid(z) - y) / n)
                    .collect();
                accumulate(grads, *z, ga);
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Runs backward from `root` and accumulates the gradients of every bound
/// trainable parameter into `params`. Repeated calls accumulate until
/// [`ParamSet::zero_grad`].
pub fn forward_backward(graph: &Graph, root: Var, params: &mut ParamSet) -> Result<()> {
    let grads = graph.backward(root)?;
    for (name, var) in graph.bindings() {
        if let Some(g) = grads.get(*var) {
            if let Some(t) = params.get_mut(name) {
                if t.requires_grad() {
                    t.accumulate_grad(g)?;
                }
            }
        }
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, delta: Vec<f64>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(&delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Neighbor `t` (0..9, row-major in the 3x3 window) of `(i, j)` with
/// coordinates clamped to the plane.
#[inline]
fn replicate(i: usize, j: usize, t: usize, h: usize, w: usize) -> (usize, usize) {
    let di = t / 3;
    let dj = t % 3;
    let ni = (i + di).saturating_sub(1).min(h - 1);
    let nj = (j + dj).saturating_sub(1).min(w - 1);
    (ni, nj)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let row = &mut out[r * n..(r + 1) * n];
        for (kk, &av) in a[r * k..(r + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g [m, n] x b^T [n, k]`.
fn matmul_grad_lhs(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for r in 0..m {
        let gr = &g[r * n..(r + 1) * n];
        for kk in 0..k {
            out[r * k + kk] = gr.iter().zip(&b[kk * n..(kk + 1) * n]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T [k, m] x g [m, n]`.
fn matmul_grad_rhs(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for r in 0..m {
        let gr = &g[r * n..(r + 1) * n];
        for (kk, &av) in a[r * k..(r + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, gv) in out[kk * n..(kk + 1) * n].iter_mut().zip(gr) {
                *o += av * gv;
            }
        }
    }
    out
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` when read as `out` under broadcasting (0 on repeated axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

fn walk1(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    walk2(shape, strides, strides, |o, i, _| f(o, i));
}

/// Visits every row-major position of `shape`, passing the linear output
/// index and the offsets under the two stride sets.
fn walk2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let nd = shape.len();
    let mut idx = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            ia -= sa[d] * shape[d];
            ib -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}
