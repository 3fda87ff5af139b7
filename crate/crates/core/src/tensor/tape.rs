use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom};
use super::{check_layer_norm_shapes, Tensor};
use crate::cost::OpCounter;
use crate::error::{invalid, Error, Result};
use crate::math;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Vec<f64>),
    AddConst(usize),
    Scale(usize, f64),
    Gelu(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Sum(usize),
    CrossEntropy {
        logits: usize,
        probs: Vec<f64>,
        targets: Vec<Option<usize>>,
        epsilon: f64,
        count: usize,
    },
    GatedDecay {
        z: usize,
        inv_tau: f64,
    },
    Rotate {
        x: usize,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed primitives.
///
/// Values are immutable once recorded; [`Tape::backward`] visits nodes in
/// exact reverse order of execution and never touches forward values.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    counter: OpCounter,
}

/// Gradients of a scalar with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, or zeros of length `len` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }

    /// Accumulate the gradient of `v` into `t`'s gradient slot.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) {
        if !t.requires_grad() {
            return;
        }
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; t.len()]),
        }
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

    /// Forward multiply-add counts registered by matrix products on this tape.
    pub fn counter(&self) -> &OpCounter {
        &self.counter
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].value.clone()).expect("recorded shapes are valid")
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        let c = *s.last().unwrap_or(&1);
        (self.nodes[v.0].value.len() / c, c)
    }

    /// Record a leaf; it participates in differentiation iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Record a value that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
        Error::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::mismatch("matmul", sa, sb));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, p, &mut self.counter);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, p], out, Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(invalid("transpose", "expected a matrix"));
        }
        let (r, c) = (s[0], s[1]);
        let out = kernels::transpose(self.value(a), r, c);
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a.0), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Self::mismatch("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a.0), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::mismatch("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a.0, b.0), rg))
    }

    /// `x[r×c] + bias[c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.rows_cols(x);
        if self.value(bias).len() != c {
            return Err(Self::mismatch("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x.0, bias.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::mismatch("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a.0, b.0), rg))
    }

    /// Elementwise product with a constant (masks, dropout).
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Self::mismatch("mul_const", self.shape(a), &[c.len()]));
        }
        let out = self.value(a).iter().zip(&c).map(|(x, y)| x * y).collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::MulConst(a.0, c), rg))
    }

    /// Elementwise sum with a constant (additive logit biases).
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Self::mismatch("add_const", self.shape(a), &[c.len()]));
        }
        let out = self.value(a).iter().zip(c).map(|(x, y)| x + y).collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddConst(a.0), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a.0, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| math::gelu(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a.0), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a);
        if c == 0 {
            return Err(invalid("softmax_rows", "need at least one column"));
        }
        let out = kernels::softmax_rows(self.value(a), r, c);
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::SoftmaxRows(a.0), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.rows_cols(x);
        check_layer_norm_shapes(d, &self.tensor(gain), &self.tensor(bias))?;
        let (out, xhat, inv_std) = kernels::layer_norm(self.value(x), d, self.value(gain), self.value(bias));
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            xhat,
            inv_std,
        };
        Ok(self.push(self.shape(x).to_vec(), out, op, rg))
    }

    /// `out[i] = x[idx[i]]`, reshaped to `shape`. Backward scatter-adds.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != idx.len() {
            return Err(Self::mismatch("gather", shape, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(invalid("gather", alloc::format!("index {bad} out of range {n}")));
        }
        let src = self.value(x);
        let out = idx.iter().map(|&i| src[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Gather(x.0, idx), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        if start >= end || end > c {
            return Err(invalid("slice_cols", alloc::format!("bad range {start}..{end} of {c}")));
        }
        let w = end - start;
        let idx = (0..r).flat_map(|i| (start..end).map(move |j| i * c + j)).collect();
        self.gather(x, idx, &[r, w])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        if start >= end || end > r {
            return Err(invalid("slice_rows", alloc::format!("bad range {start}..{end} of {r}")));
        }
        self.gather(x, (start * c..end * c).collect(), &[end - start, c])
    }

    /// Select rows by index (embedding lookup).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(invalid("select_rows", alloc::format!("row {bad} out of range {r}")));
        }
        let idx = rows.iter().flat_map(|&i| i * c..(i + 1) * c).collect();
        self.gather(x, idx, &[rows.len(), c])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.rows_cols(*parts.first().ok_or_else(|| invalid("concat_cols", "no inputs"))?).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if r != rows {
                return Err(Self::mismatch("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let (_, c) = self.rows_cols(p);
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.rows_cols(*parts.first().ok_or_else(|| invalid("concat_rows", "no inputs"))?).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if c != cols {
                return Err(Self::mismatch("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), rg))
    }

    /// 2-D convolution of `x: [c_in, h, w]` with `w: [c_out, c_in, k, k]`, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: (usize, usize), pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(Self::mismatch("conv2d", &sx, &sw));
        }
        let geom = ConvGeom {
            c_in: sx[0],
            c_out: sw[0],
            h: sx[1],
            w: sx[2],
            kernel: sw[2],
            stride_h: stride.0,
            stride_w: stride.1,
            pad,
        };
        if sx[1] + 2 * pad < geom.kernel || sx[2] + 2 * pad < geom.kernel {
            return Err(invalid("conv2d", "input smaller than kernel"));
        }
        let cols = geom.im2col(self.value(x));
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let kk = geom.c_in * geom.kernel * geom.kernel;
        let mut out = vec![0.0; geom.c_out * oh * ow];
        kernels::matmul_nt_acc(self.value(w), &cols, geom.c_out, kk, oh * ow, &mut out);
        let rg = self.rg(x) || self.rg(w);
        let op = Op::Conv2d {
            x: x.0,
            w: w.0,
            geom,
            cols,
        };
        Ok(self.push(vec![geom.c_out, oh, ow], out, op, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a.0), rg)
    }

    /// Label-smoothed cross entropy averaged over rows whose target is `Some`.
    ///
    /// The smoothed target puts `1 − ε + ε/V` on the true class and `ε/V`
    /// elsewhere.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], epsilon: f64) -> Result<Var> {
        let (r, v) = self.rows_cols(logits);
        if targets.len() != r {
            return Err(Self::mismatch("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(invalid("cross_entropy", "label smoothing must lie in [0, 1]"));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(invalid("cross_entropy", "every target is padding"));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::TokenOutOfRange { id: *bad, size: v });
        }
        let x = self.value(logits);
        let mut probs = vec![0.0; r * v];
        let mut logp = vec![0.0; v];
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &x[i * v..(i + 1) * v];
            kernels::log_softmax_into(row, &mut logp);
            let uniform: f64 = logp.iter().sum::<f64>() / v as f64;
            loss -= (1.0 - epsilon) * logp[t] + epsilon * uniform;
            for (p, lp) in probs[i * v..(i + 1) * v].iter_mut().zip(&logp) {
                *p = math::exp(*lp);
            }
        }
        loss /= count as f64;
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits: logits.0,
            probs,
            targets: targets.to_vec(),
            epsilon,
            count,
        };
        Ok(self.push(vec![1], vec![loss], op, rg))
    }

    /// Product-form decay `D[i][j] = ∏_{k=j+1..i} γ_k` for `j ≤ i` (else 0),
    /// with gates `γ_k = sigmoid(z_k)^(1/τ)` taken from pre-activations `z`.
    pub fn gated_decay(&mut self, z: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(invalid("gated_decay", "temperature must be positive"));
        }
        let inv_tau = 1.0 / tau;
        let zs = self.value(z);
        let n = zs.len();
        let gates: Vec<f64> = zs.iter().map(|&v| math::powf(math::sigmoid(v), inv_tau)).collect();
        let out = crate::retention::product_decay(&gates);
        let rg = self.rg(z);
        Ok(self.push(vec![n, n], out, Op::GatedDecay { z: z.0, inv_tau }, rg))
    }

    /// Rotate consecutive coordinate pairs of each row by the given angles.
    ///
    /// `angles` is `rows × (cols/2)`; an odd trailing coordinate passes through.
    pub fn rotate_pairs(&mut self, x: Var, angles: &[f64]) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        let half = c / 2;
        if angles.len() != r * half {
            return Err(Self::mismatch("rotate_pairs", self.shape(x), &[angles.len()]));
        }
        let cos: Vec<f64> = angles.iter().map(|&a| math::cos(a)).collect();
        let sin: Vec<f64> = angles.iter().map(|&a| math::sin(a)).collect();
        let mut out = self.value(x).to_vec();
        for i in 0..r {
            for j in 0..half {
                let (cs, sn) = (cos[i * half + j], sin[i * half + j]);
                let (a, b) = (out[i * c + 2 * j], out[i * c + 2 * j + 1]);
                out[i * c + 2 * j] = a * cs - b * sn;
                out[i * c + 2 * j + 1] = a * sn + b * cs;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Rotate { x: x.0, cos, sin }, rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(invalid("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        macro_rules! acc {
            ($idx:expr) => {{
                let idx: usize = $idx;
                let len = nodes[idx].value.len();
                grads[idx].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        let wants = |idx: usize| nodes[idx].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let p = nodes[*b].shape[1];
                if wants(*a) {
                    let bv = &nodes[*b].value;
                    kernels::matmul_nt_acc(g, bv, m, p, k, acc!(*a));
                }
                if wants(*b) {
                    let av = &nodes[*a].value;
                    kernels::matmul_tn_acc(av, g, m, k, p, acc!(*b));
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (r, c) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let gt = kernels::transpose(g, c, r);
                    add_into(acc!(*a), &gt);
                }
            }
            Op::Reshape(a) | Op::AddConst(a) => {
                if wants(*a) {
                    add_into(acc!(*a), g);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    add_into(acc!(*a), g);
                }
                if wants(*b) {
                    add_into(acc!(*b), g);
                }
            }
            Op::AddRow(x, bias) => {
                if wants(*x) {
                    add_into(acc!(*x), g);
                }
                if wants(*bias) {
                    let c = nodes[*bias].value.len();
                    let gb = acc!(*bias);
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = &nodes[*b].value;
                    let ga = acc!(*a);
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if wants(*b) {
                    let av = &nodes[*a].value;
                    let gb = acc!(*b);
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::MulConst(a, c) => {
                if wants(*a) {
                    let ga = acc!(*a);
                    for ((o, gi), ci) in ga.iter_mut().zip(g).zip(c) {
                        *o += gi * ci;
                    }
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    let ga = acc!(*a);
                    for (o, gi) in ga.iter_mut().zip(g) {
                        *o += gi * s;
                    }
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let av = &nodes[*a].value;
                    let ga = acc!(*a);
                    for ((o, gi), &x) in ga.iter_mut().zip(g).zip(av) {
                        *o += gi * math::gelu_grad(x);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if wants(*a) {
                    let y = &node.value;
                    let c = *node.shape.last().unwrap();
                    let ga = acc!(*a);
                    for ((grow, yrow), orow) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dotp = kernels::dot(grow, yrow);
                        for ((o, gi), yi) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yi * (gi - dotp);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = nodes[*gain].value.len();
                let gv = &nodes[*gain].value;
                if wants(*gain) {
                    let gg = acc!(*gain);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = acc!(*bias);
                    for grow in g.chunks(d) {
                        add_into(gb, grow);
                    }
                }
                if wants(*x) {
                    let gx = acc!(*x);
                    let mut dh = vec![0.0; d];
                    for (r, ((grow, hrow), orow)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = grow[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = kernels::dot(&dh, hrow) / d as f64;
                        for j in 0..d {
                            orow[j] += inv_std[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gather(x, idx) => {
                if wants(*x) {
                    let gx = acc!(*x);
                    for (gi, &j) in g.iter().zip(idx) {
                        gx[j] += gi;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = *node.shape.last().unwrap();
                let rows = node.value.len() / total;
                let mut off = 0;
                for &p in parts {
                    let c = *nodes[p].shape.last().unwrap();
                    if wants(p) {
                        let gp = acc!(p);
                        for r in 0..rows {
                            add_into(&mut gp[r * c..(r + 1) * c], &g[r * total + off..r * total + off + c]);
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p].value.len();
                    if wants(p) {
                        add_into(acc!(p), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let (oh, ow) = (geom.out_h(), geom.out_w());
                let kk = geom.c_in * geom.kernel * geom.kernel;
                let p = oh * ow;
                if wants(*w) {
                    // dW = dOut · cols
                    let gw = acc!(*w);
                    let prod = kernels::matmul(g, cols, geom.c_out, p, kk, &mut OpCounter::new());
                    add_into(gw, &prod);
                }
                if wants(*x) {
                    let mut dcols = vec![0.0; p * kk];
                    kernels::matmul_tn_acc(g, &nodes[*w].value, geom.c_out, p, kk, &mut dcols);
                    geom.col2im_acc(&dcols, acc!(*x));
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let ga = acc!(*a);
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                epsilon,
                count,
            } => {
                if wants(*logits) {
                    let v = *nodes[*logits].shape.last().unwrap();
                    let scale = g[0] / *count as f64;
                    let gl = acc!(*logits);
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for c in 0..v {
                            let q = epsilon / v as f64 + if c == t { 1.0 - epsilon } else { 0.0 };
                            gl[r * v + c] += scale * (probs[r * v + c] - q);
                        }
                    }
                }
            }
            Op::GatedDecay { z, inv_tau } => {
                if wants(*z) {
                    let n = nodes[*z].value.len();
                    let d = &node.value;
                    let mut dc = vec![0.0; n];
                    for i in 0..n {
                        for j in 0..i {
                            let t = g[i * n + j] * d[i * n + j];
                            dc[i] += t;
                            dc[j] -= t;
                        }
                    }
                    let zv = &nodes[*z].value;
                    let gz = acc!(*z);
                    let mut suffix = 0.0;
                    for k in (0..n).rev() {
                        suffix += dc[k];
                        gz[k] += suffix * inv_tau * (1.0 - math::sigmoid(zv[k]));
                    }
                }
            }
            Op::Rotate { x, cos, sin } => {
                if wants(*x) {
                    let c = *node.shape.last().unwrap();
                    let r = node.value.len() / c;
                    let half = c / 2;
                    let gx = acc!(*x);
                    for i in 0..r {
                        for j in 0..half {
                            let (cs, sn) = (cos[i * half + j], sin[i * half + j]);
                            let (ga, gb) = (g[i * c + 2 * j], g[i * c + 2 * j + 1]);
                            gx[i * c + 2 * j] += ga * cs + gb * sn;
                            gx[i * c + 2 * j + 1] += -ga * sn + gb * cs;
                        }
                        if c % 2 == 1 {
                            gx[i * c + c - 1] += g[i * c + c - 1];
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
