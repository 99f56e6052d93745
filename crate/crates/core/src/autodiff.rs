//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! return [`Var`] handles; [`Tape::backward`] walks the recorded nodes in
//! reverse creation order, which is a valid topological order because a node
//! can only reference nodes created before it. Each node is visited at most
//! once. The tape is rebuilt per training step.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

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
    Add(Var, Var),
    /// `b`'s shape is a suffix of `a`'s; `b` repeats over the leading dims.
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulScalar(Var, Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Silu(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Bmm(Var, Var),
    BmmNT(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Outcome of [`Tape::backward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardStatus {
    Connected,
    /// The loss does not depend on any tensor that requires grad; every such
    /// tensor received a zero gradient.
    Disconnected,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    /// Drop every recorded node and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v`
    /// requires grad.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `a + b` where `b` is repeated over `a`'s leading dimensions.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim("add_broadcast", sa, sb));
        }
        let inner = self.value(b).numel();
        let bd = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, &x) in chunk.iter_mut().zip(bd) {
                *o += x;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::AddBroadcast(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddConst(a), rg)
    }

    /// `a * s` for a one-element `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::dim("mul_scalar", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| x * sv);
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, Op::MulScalar(a, s), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Log(a), rg))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(out, Op::Square(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(out, Op::Silu(a), rg)
    }

    // ---- products ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    /// Batched product `[B, m, k] · [B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            kernels::gemm_nn(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![bs, m, n], out)?, Op::Bmm(a, b), rg))
    }

    /// Batched `[B, m, k] · [B, n, k]ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::dim("bmm_nt", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            kernels::gemm_nt(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * n * k..(i + 1) * n * k],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![bs, m, n], out)?, Op::BmmNT(a, b), rg))
    }

    /// `x · wᵀ + b` over the last axis of `x`; leading axes are batch.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w);
        let n = *sx.last().unwrap();
        if sw.len() != 2 || sw[1] != n {
            return Err(Error::dim("linear", &sx, sw));
        }
        let m = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(Error::dim("linear bias", sw, self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / n;
        let mut out = vec![0.0; rows * m];
        kernels::gemm_nt(self.value(x).data(), self.value(w).data(), &mut out, rows, n, m);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(m) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = m;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, rg))
    }

    // ---- layout ------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::dim("permute", &shape, perm));
        }
        let out = permute_tensor(self.value(a), perm);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), rg))
    }

    /// Rows of a 2-D `src` selected by `indices`, giving `[indices.len(), cols]`.
    pub fn gather_rows(&mut self, src: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(src);
        if s.len() != 2 {
            return Err(Error::dim("gather_rows", s, &[indices.len()]));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {rows} rows"
            )));
        }
        let sd = self.value(src).data();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&sd[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(&[src]);
        Ok(self.push(
            Tensor::new(vec![indices.len(), cols], out)?,
            Op::GatherRows(src, indices.to_vec()),
            rg,
        ))
    }

    // ---- normalisation / reductions --------------------------------------

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = *v.shape().last().unwrap();
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Parameter-free layer normalisation over the last axis.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a);
        let n = *v.shape().last().unwrap();
        let mut out = v.clone();
        let mut rstd = Vec::with_capacity(v.numel() / n);
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            rstd.push(r);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::LayerNorm { x: a, rstd }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    // ---- backward ----------------------------------------------------

    /// Populate gradients of the scalar `loss` for every node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardStatus> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            for (i, node) in self.nodes.iter().enumerate() {
                if node.requires_grad {
                    self.grads[i] = Some(Tensor::zeros(node.value.shape()));
                }
            }
            log::warn!("backward called on a loss that depends on no trainable tensor");
            return Ok(BackwardStatus::Disconnected);
        }
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &dy);
            self.grads[i] = Some(dy);
        }
        // Nodes that require grad but do not reach the loss get zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && self.grads[i].is_none() {
                self.grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(BackwardStatus::Connected)
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, dy: &Tensor) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, dy.clone());
                self.accumulate(b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, dy.clone());
                if self.needs(b) {
                    self.accumulate(b, dy.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let g = dy.zip_map(self.value(b), "mul", |d, y| d * y).unwrap();
                    self.accumulate(a, g);
                }
                if self.needs(b) {
                    let g = dy.zip_map(self.value(a), "mul", |d, x| d * x).unwrap();
                    self.accumulate(b, g);
                }
            }
            Op::AddBroadcast(a, b) => {
                self.accumulate(a, dy.clone());
                if self.needs(b) {
                    let bshape = self.shape(b).to_vec();
                    let inner = self.value(b).numel();
                    let mut g = vec![0.0; inner];
                    for chunk in dy.data().chunks(inner) {
                        for (o, x) in g.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                    self.accumulate(b, Tensor::new(bshape, g).unwrap());
                }
            }
            Op::Scale(a, c) => self.accumulate(a, dy.map(|x| x * c)),
            Op::AddConst(a) => self.accumulate(a, dy.clone()),
            Op::MulScalar(a, s) => {
                if self.needs(a) {
                    let sv = self.value(s).item();
                    self.accumulate(a, dy.map(|x| x * sv));
                }
                if self.needs(s) {
                    let dot: f64 = dy
                        .data()
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(d, x)| d * x)
                        .sum();
                    let shape = self.shape(s).to_vec();
                    self.accumulate(s, Tensor::new(shape, vec![dot]).unwrap());
                }
            }
            Op::Exp(a) => {
                let g = dy.zip_map(&self.nodes[i].value, "exp", |d, y| d * y).unwrap();
                self.accumulate(a, g);
            }
            Op::Log(a) => {
                let g = dy.zip_map(self.value(a), "log", |d, x| d / x).unwrap();
                self.accumulate(a, g);
            }
            Op::Square(a) => {
                let g = dy.zip_map(self.value(a), "square", |d, x| 2.0 * x * d).unwrap();
                self.accumulate(a, g);
            }
            Op::Silu(a) => {
                let g = dy
                    .zip_map(self.value(a), "silu", |d, x| {
                        let s = sigmoid(x);
                        d * s * (1.0 + x * (1.0 - s))
                    })
                    .unwrap();
                self.accumulate(a, g);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    let mut g = vec![0.0; m * k];
                    kernels::gemm_nt(dy.data(), self.value(b).data(), &mut g, m, n, k);
                    self.accumulate(a, Tensor::new(vec![m, k], g).unwrap());
                }
                if self.needs(b) {
                    let mut g = vec![0.0; k * n];
                    kernels::gemm_tn(self.value(a).data(), dy.data(), &mut g, m, k, n);
                    self.accumulate(b, Tensor::new(vec![k, n], g).unwrap());
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[0];
                if self.needs(a) {
                    let mut g = vec![0.0; m * k];
                    kernels::gemm_nn(dy.data(), self.value(b).data(), &mut g, m, n, k);
                    self.accumulate(a, Tensor::new(vec![m, k], g).unwrap());
                }
                if self.needs(b) {
                    let mut g = vec![0.0; n * k];
                    kernels::gemm_tn(dy.data(), self.value(a).data(), &mut g, m, n, k);
                    self.accumulate(b, Tensor::new(vec![n, k], g).unwrap());
                }
            }
            Op::Bmm(a, b) => {
                let (bs, m, k) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
                let n = self.shape(b)[2];
                let dd = dy.data();
                if self.needs(a) {
                    let bd = self.value(b).data();
                    let mut g = vec![0.0; bs * m * k];
                    for t in 0..bs {
                        kernels::gemm_nt(
                            &dd[t * m * n..(t + 1) * m * n],
                            &bd[t * k * n..(t + 1) * k * n],
                            &mut g[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(a, Tensor::new(vec![bs, m, k], g).unwrap());
                }
                if self.needs(b) {
                    let ad = self.value(a).data();
                    let mut g = vec![0.0; bs * k * n];
                    for t in 0..bs {
                        kernels::gemm_tn(
                            &ad[t * m * k..(t + 1) * m * k],
                            &dd[t * m * n..(t + 1) * m * n],
                            &mut g[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.accumulate(b, Tensor::new(vec![bs, k, n], g).unwrap());
                }
            }
            Op::BmmNT(a, b) => {
                let (bs, m, k) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
                let n = self.shape(b)[1];
                let dd = dy.data();
                if self.needs(a) {
                    let bd = self.value(b).data();
                    let mut g = vec![0.0; bs * m * k];
                    for t in 0..bs {
                        kernels::gemm_nn(
                            &dd[t * m * n..(t + 1) * m * n],
                            &bd[t * n * k..(t + 1) * n * k],
                            &mut g[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(a, Tensor::new(vec![bs, m, k], g).unwrap());
                }
                if self.needs(b) {
                    let ad = self.value(a).data();
                    let mut g = vec![0.0; bs * n * k];
                    for t in 0..bs {
                        kernels::gemm_tn(
                            &dd[t * m * n..(t + 1) * m * n],
                            &ad[t * m * k..(t + 1) * m * k],
                            &mut g[t * n * k..(t + 1) * n * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(b, Tensor::new(vec![bs, n, k], g).unwrap());
                }
            }
            Op::Linear { x, w, b } => {
                let (m, n) = (self.shape(w)[0], self.shape(w)[1]);
                let rows = dy.numel() / m;
                if self.needs(x) {
                    let mut g = vec![0.0; rows * n];
                    kernels::gemm_nn(dy.data(), self.value(w).data(), &mut g, rows, m, n);
                    let shape = self.shape(x).to_vec();
                    self.accumulate(x, Tensor::new(shape, g).unwrap());
                }
                if self.needs(w) {
                    let mut g = vec![0.0; m * n];
                    kernels::gemm_tn(dy.data(), self.value(x).data(), &mut g, rows, m, n);
                    self.accumulate(w, Tensor::new(vec![m, n], g).unwrap());
                }
                if let Some(b) = b {
                    if self.needs(b) {
                        let mut g = vec![0.0; m];
                        for row in dy.data().chunks(m) {
                            for (o, d) in g.iter_mut().zip(row) {
                                *o += d;
                            }
                        }
                        self.accumulate(b, Tensor::new(vec![m], g).unwrap());
                    }
                }
            }
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                self.accumulate(a, dy.reshape(&shape).unwrap());
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(a, permute_tensor(dy, &inv));
            }
            Op::GatherRows(src, indices) => {
                let shape = self.shape(src).to_vec();
                let cols = shape[1];
                let mut g = Tensor::zeros(&shape);
                let gd = g.data_mut();
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..cols {
                        gd[i * cols + c] += dy.data()[r * cols + c];
                    }
                }
                self.accumulate(src, g);
            }
            Op::Softmax(a) => {
                let y = &self.nodes[i].value;
                let n = *y.shape().last().unwrap();
                let mut g = dy.clone();
                for (grow, yrow) in g.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                self.accumulate(a, g);
            }
            Op::LayerNorm { x, rstd } => {
                let y = &self.nodes[i].value;
                let n = *y.shape().last().unwrap();
                let mut g = dy.clone();
                for ((grow, yrow), r) in g
                    .data_mut()
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(&rstd)
                {
                    let mean_d = grow.iter().sum::<f64>() / n as f64;
                    let mean_dy = grow.iter().zip(yrow).map(|(d, y)| d * y).sum::<f64>() / n as f64;
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = r * (*gv - mean_d - yv * mean_dy);
                    }
                }
                self.accumulate(x, g);
            }
            Op::Sum(a) => {
                let d = dy.item();
                let shape = self.shape(a).to_vec();
                self.accumulate(a, Tensor::full(&shape, d));
            }
            Op::Mean(a) => {
                let n = self.value(a).numel() as f64;
                let d = dy.item() / n;
                let shape = self.shape(a).to_vec();
                self.accumulate(a, Tensor::full(&shape, d));
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let nd = in_shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    let last = nd - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    loop {
        for j in 0..inner_len {
            out.push(src[offset + j * inner_stride]);
        }
        // advance odometer over the outer axes
        let mut ax = last;
        loop {
            if ax == 0 {
                return Tensor::new(out_shape, out).expect("permute preserves numel");
            }
            ax -= 1;
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Max over coordinates of `|analytic − central difference| / (|central difference| + eps)`
/// for the scalar function `f` at `x`.
///
/// `f` receives a fresh tape and the leaf for `x`, and returns the scalar output.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("finite_diff_check needs eps > 0, got {eps}")));
    }
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point.clone());
        let out = f(&mut tape, v)?;
        if !tape.value(out).is_scalar() {
            return Err(Error::Contract("finite_diff_check needs a scalar function".into()));
        }
        Ok(tape.value(out).item())
    };
    let first = eval(x)?;
    let second = eval(x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {first} vs {second}"
        )));
    }

    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let out = f(&mut tape, leaf)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / (numeric.abs() + eps);
        worst = worst.max(err);
    }
    Ok(worst)
}
