//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. [`Tape::backward`] walks the nodes in reverse order and
//! accumulates adjoints; gradients of parameter leaves are then added into the
//! owning [`ParamStore`]. Fused kernels plug in through [`CustomOp`].

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use rand::Rng as _;

use super::tensor::{matmul, matmul_nt, matmul_tn, softmax_in_place};
use super::{Float, ParamId, ParamStore, Rng, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Fused operation with a hand-written backward pass.
pub trait CustomOp<T: Float> {
    fn name(&self) -> &'static str;

    /// Returns one adjoint per input; entries whose `needs_grad` flag is false
    /// may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        needs_grad: &[bool],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;

    /// Identifies which side of every non-differentiable point the forward
    /// pass landed on; see [`Tape::kink_fingerprint`].
    fn kink_fingerprint(&self) -> u64 {
        0
    }
}

enum Op<T: Float> {
    Constant,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    Relu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    PickSum {
        logp: Var,
        targets: Vec<usize>,
        scale: T,
    },
    Sum(Var),
    ConcatLanes {
        prefix: Var,
        current: Var,
        lanes: usize,
    },
    ConcatRows(Var, Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Float> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LogSoftmaxRows(_) => "log_softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::PickSum { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::ConcatLanes { .. } => "concat_lanes",
            Op::ConcatRows(..) => "concat_rows",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Variance guard of layer normalization. Small enough that a row with unit
/// variance is a fixed point to within 1e-8.
pub const LAYER_NORM_EPS: f64 = 1e-8;

/// Records one forward computation.
pub struct Tape<T: Float> {
    nodes: Vec<Node<T>>,
    param_leaves: HashMap<ParamId, Var>,
    fault: Option<String>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
            fault: None,
        }
    }

    /// Corrupts the backward pass of every op called `op_name` by a factor of
    /// 1.25. Used to show the verification suite notices broken gradients.
    pub fn inject_fault(&mut self, op_name: impl Into<String>) {
        self.fault = Some(op_name.into());
    }

    /// Distinct op names recorded so far, sorted.
    pub fn op_names(&self) -> Vec<&'static str> {
        let mut names: Vec<_> = self.nodes.iter().map(|n| n.op.name()).collect();
        names.sort_unstable();
        names.dedup();
        names
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf for a parameter. Repeated calls return the same node, so a
    /// parameter used twice (tied weights) accumulates a single gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.param_leaves.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    /// `a · bᵀ`: applies a `[out × in]` weight to rows of `a`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_nt(self.value(a), self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMulNT(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    /// Adds a bias vector to every row; the bias length must equal the last axis.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.rank() != 1 || bv.len() != xv.last_dim() {
            return Err(Error::dim("add_row_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        let c = bv.len();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % c];
        }
        let g = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddRowBias(x, bias), g))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let g = self.needs(x);
        self.push(out, Op::Scale(x, c), g)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let g = self.needs(x);
        self.push(out, Op::Relu(x), g)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        check_finite(&out, "softmax_rows")?;
        let c = out.last_dim();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let g = self.needs(x);
        Ok(self.push(out, Op::SoftmaxRows(x), g))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        check_finite(&out, "log_softmax_rows")?;
        let c = out.last_dim();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            log_softmax_in_place(row);
        }
        let g = self.needs(x);
        Ok(self.push(out, Op::LogSoftmaxRows(x), g))
    }

    /// Normalizes each row of `x` to zero mean and unit variance, then applies
    /// gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        for p in [gain, bias] {
            let pv = self.value(p);
            if pv.rank() != 1 || pv.len() != d {
                return Err(Error::dim("layer_norm", xv.shape(), pv.shape()));
            }
        }
        let rows = xv.rows();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let eps = T::of(LAYER_NORM_EPS);
        let inv_d = T::one() / T::of(d as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = Tensor::zeros(xv.shape());
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            let o = out.row_mut(r);
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                o[j] = h * gv[j] + bv[j];
            }
        }
        let g = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            g,
        ))
    }

    /// Inverted dropout: survivors are rescaled by `1/(1-rate)` so evaluation
    /// is the identity.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let g = self.needs(x);
        Ok(self.push(out, Op::Dropout { x, mask }, g))
    }

    /// Selects rows of a 2-D tensor (embedding lookup).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = xv.dims2("gather_rows")?;
        let mut out = Tensor::zeros(&[rows.len(), c]);
        for (i, &r) in rows.iter().enumerate() {
            if r >= n {
                return Err(Error::Data(format!(
                    "row index {r} out of range for {n} rows (position {i})"
                )));
            }
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        let g = self.needs(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            g,
        ))
    }

    /// Assembles a `[total × c]` tensor whose row `rows[i]` is row `i` of the
    /// corresponding part. Every output row must be written exactly once.
    pub fn scatter_rows(&mut self, total: usize, parts: Vec<(Var, Vec<usize>)>) -> Result<Var> {
        let c = match parts.first() {
            Some((v, _)) => self.value(*v).dims2("scatter_rows")?.1,
            None => {
                return Err(Error::Contract(
                    "scatter_rows needs at least one part".into(),
                ))
            }
        };
        let mut out = Tensor::zeros(&[total, c]);
        let mut seen = vec![false; total];
        for (v, rows) in &parts {
            let pv = self.value(*v);
            if pv.dims2("scatter_rows")? != (rows.len(), c) {
                return Err(Error::dim("scatter_rows", pv.shape(), &[rows.len(), c]));
            }
            for (i, &r) in rows.iter().enumerate() {
                if r >= total || seen[r] {
                    return Err(Error::Contract(format!(
                        "scatter_rows target row {r} invalid or repeated"
                    )));
                }
                seen[r] = true;
                out.row_mut(r).copy_from_slice(pv.row(i));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Contract("scatter_rows left rows unassigned".into()));
        }
        let g = parts.iter().any(|(v, _)| self.needs(*v));
        Ok(self.push(out, Op::ScatterRows { parts }, g))
    }

    /// `scale · Σᵢ −logp[i, targets[i]]`.
    pub fn pick_sum(&mut self, logp: Var, targets: &[usize], scale: T) -> Result<Var> {
        let lv = self.value(logp);
        let (r, c) = lv.dims2("cross_entropy")?;
        if r != targets.len() {
            return Err(Error::dim("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Data(format!(
                    "target {t} out of range for {c} classes (position {i})"
                )));
            }
            total -= lv.data()[i * c + t];
        }
        let g = self.needs(logp);
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::PickSum {
                logp,
                targets: targets.to_vec(),
                scale,
            },
            g,
        ))
    }

    /// Mean negative log-probability of `targets` under row-wise log-probabilities.
    pub fn cross_entropy(&mut self, logp: Var, targets: &[usize]) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::Contract("cross_entropy over zero targets".into()));
        }
        let scale = T::one() / T::of(targets.len() as f64);
        self.pick_sum(logp, targets, scale)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let g = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), g)
    }

    /// Per lane, prepends `prefix` rows to `current` rows:
    /// `[lanes·P × c] ++ [lanes·T × c] → [lanes·(P+T) × c]`.
    pub fn concat_lanes(&mut self, prefix: Var, current: Var, lanes: usize) -> Result<Var> {
        let pv = self.value(prefix);
        let cv = self.value(current);
        let (pr, pc) = pv.dims2("concat_lanes")?;
        let (cr, cc) = cv.dims2("concat_lanes")?;
        if pc != cc || lanes == 0 || pr % lanes != 0 || cr % lanes != 0 {
            return Err(Error::dim("concat_lanes", pv.shape(), cv.shape()));
        }
        let (p, t) = (pr / lanes, cr / lanes);
        let mut out = Tensor::zeros(&[lanes * (p + t), cc]);
        for l in 0..lanes {
            let dst = &mut out.data_mut()[l * (p + t) * cc..(l + 1) * (p + t) * cc];
            dst[..p * cc].copy_from_slice(&pv.data()[l * p * cc..(l + 1) * p * cc]);
            dst[p * cc..].copy_from_slice(&cv.data()[l * t * cc..(l + 1) * t * cc]);
        }
        let g = self.needs(prefix) || self.needs(current);
        Ok(self.push(
            out,
            Op::ConcatLanes {
                prefix,
                current,
                lanes,
            },
            g,
        ))
    }

    /// Stacks the rows of `b` below the rows of `a`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (ar, ac) = av.dims2("concat_rows")?;
        let (br, bc) = bv.dims2("concat_rows")?;
        if ac != bc {
            return Err(Error::dim("concat_rows", av.shape(), bv.shape()));
        }
        let mut data = Vec::with_capacity((ar + br) * ac);
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let out = Tensor::new(&[ar + br, ac], data)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::ConcatRows(a, b), g))
    }

    pub fn custom(&mut self, inputs: Vec<Var>, output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let g = inputs.iter().any(|&v| self.needs(v));
        self.push(output, Op::Custom { inputs, op }, g)
    }

    /// Hash of the activation pattern at every kink of the graph (ReLU inputs
    /// and custom-op clamps). Two evaluations with equal fingerprints lie in
    /// the same smooth piece of the function.
    pub fn kink_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.nodes[x.0].value.data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::Custom { op, .. } => op.kink_fingerprint().hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Propagates adjoints from the scalar `loss` back to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut contributions = self.node_backward(node, &g)?;
            if self.fault.as_deref() == Some(node.op.name()) {
                for (_, c) in contributions.iter_mut() {
                    c.scale_in_place(T::of(1.25));
                }
            }
            for (v, c) in contributions {
                if !self.needs(v) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&c)?,
                    slot @ None => *slot = Some(c),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, matmul_nt(g, val(*b))?));
                }
                if self.needs(*b) {
                    out.push((*b, matmul_tn(val(*a), g)?));
                }
            }
            Op::MatMulNT(a, b) => {
                // out = a·bᵀ: da = g·b, db = gᵀ·a
                if self.needs(*a) {
                    out.push((*a, matmul(g, val(*b))?));
                }
                if self.needs(*b) {
                    out.push((*b, matmul_tn(g, val(*a))?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::AddRowBias(x, b) => {
                out.push((*x, g.clone()));
                if self.needs(*b) {
                    let c = val(*b).len();
                    let mut gb = Tensor::zeros(&[c]);
                    for row in g.data().chunks(c) {
                        for (acc, &v) in gb.data_mut().iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    out.push((*b, gb));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.map(|v| v * *c))),
            Op::Relu(x) => {
                let gx = g.zip_map(
                    val(*x),
                    "relu",
                    |gv, xv| if xv > T::zero() { gv } else { T::zero() },
                )?;
                out.push((*x, gx));
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.last_dim();
                let mut gx = Tensor::zeros(y.shape());
                for ((gr, yr), or) in g
                    .data()
                    .chunks(c)
                    .zip(y.data().chunks(c))
                    .zip(gx.data_mut().chunks_mut(c))
                {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        or[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*x, gx));
            }
            Op::LogSoftmaxRows(x) => {
                let y = &node.value;
                let c = y.last_dim();
                let mut gx = Tensor::zeros(y.shape());
                for ((gr, yr), or) in g
                    .data()
                    .chunks(c)
                    .zip(y.data().chunks(c))
                    .zip(gx.data_mut().chunks_mut(c))
                {
                    let total: T = gr.iter().copied().sum();
                    for j in 0..c {
                        or[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                out.push((*x, gx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gv = val(*gain).data();
                let mut dgain = Tensor::zeros(&[d]);
                let mut dbias = Tensor::zeros(&[d]);
                let mut dx = Tensor::zeros(node.value.shape());
                let inv_d = T::one() / T::of(d as f64);
                let mut dxhat = vec![T::zero(); d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = g.row(r);
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        dgain.data_mut()[j] += gr[j] * hr[j];
                        dbias.data_mut()[j] += gr[j];
                        dxhat[j] = gr[j] * gv[j];
                        mean_dh += dxhat[j];
                        mean_dh_h += dxhat[j] * hr[j];
                    }
                    mean_dh *= inv_d;
                    mean_dh_h *= inv_d;
                    let o = dx.row_mut(r);
                    for j in 0..d {
                        o[j] = rs * (dxhat[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                out.push((*x, dx));
                out.push((*gain, dgain));
                out.push((*bias, dbias));
            }
            Op::Dropout { x, mask } => {
                let mut gx = g.clone();
                for (v, &m) in gx.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
                out.push((*x, gx));
            }
            Op::GatherRows { x, rows } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (i, &r) in rows.iter().enumerate() {
                    for (acc, &v) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                        *acc += v;
                    }
                }
                out.push((*x, gx));
            }
            Op::ScatterRows { parts } => {
                for (v, rows) in parts {
                    let mut gp = Tensor::zeros(val(*v).shape());
                    for (i, &r) in rows.iter().enumerate() {
                        gp.row_mut(i).copy_from_slice(g.row(r));
                    }
                    out.push((*v, gp));
                }
            }
            Op::PickSum {
                logp,
                targets,
                scale,
            } => {
                let lv = val(*logp);
                let c = lv.last_dim();
                let mut gl = Tensor::zeros(lv.shape());
                let s = g.data()[0] * *scale;
                for (i, &t) in targets.iter().enumerate() {
                    gl.data_mut()[i * c + t] = -s;
                }
                out.push((*logp, gl));
            }
            Op::Sum(x) => out.push((*x, Tensor::full(val(*x).shape(), g.data()[0]))),
            Op::ConcatLanes {
                prefix,
                current,
                lanes,
            } => {
                let c = g.last_dim();
                let p = val(*prefix).rows() / lanes;
                let t = val(*current).rows() / lanes;
                let mut gp = Tensor::zeros(val(*prefix).shape());
                let mut gc = Tensor::zeros(val(*current).shape());
                for l in 0..*lanes {
                    let src = &g.data()[l * (p + t) * c..(l + 1) * (p + t) * c];
                    gp.data_mut()[l * p * c..(l + 1) * p * c].copy_from_slice(&src[..p * c]);
                    gc.data_mut()[l * t * c..(l + 1) * t * c].copy_from_slice(&src[p * c..]);
                }
                out.push((*prefix, gp));
                out.push((*current, gc));
            }
            Op::ConcatRows(a, b) => {
                let split = val(*a).len();
                let ga = Tensor::new(val(*a).shape(), g.data()[..split].to_vec())?;
                let gb = Tensor::new(val(*b).shape(), g.data()[split..].to_vec())?;
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                let gs = op.backward(&ins, &needs, &node.value, g)?;
                for ((v, gi), need) in inputs.iter().zip(gs).zip(needs) {
                    if let (Some(gi), true) = (gi, need) {
                        gi.same_shape(val(*v), "custom backward")?;
                        out.push((*v, gi));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds the gradient of every parameter leaf of `tape` into `store`.
    pub fn accumulate(&self, tape: &Tape<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (&id, &v) in &tape.param_leaves {
            if let Some(g) = self.get(v) {
                store.get_mut(id).grad.add_assign(g)?;
            }
        }
        Ok(())
    }
}

fn check_finite<T: Float>(t: &Tensor<T>, op: &str) -> Result<()> {
    if t.data().iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric(format!("NaN input to {op}")));
    }
    Ok(())
}

fn log_softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
    row.iter_mut().for_each(|x| *x -= lse);
}
