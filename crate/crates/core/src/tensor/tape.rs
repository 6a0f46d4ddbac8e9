use super::kernels as k;
use super::Tensor;
use crate::error::{contract_err, shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Conv1d { x: Var, kernels: Var, stride: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64> },
    Sum(Var),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    StackRows(Vec<(Var, usize)>),
    GatherRows { table: Var, ids: Vec<usize> },
    Rope { x: Var, positions: Vec<usize>, head_dim: usize, base: f64 },
    Attend(Box<AttendCache>),
}

struct AttendCache {
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    ranges: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    /// Attention weights, laid out head-major then by query offset.
    probs: Vec<f64>,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Linear record of operations; gradients are obtained by replaying it in
/// reverse. Values are kept for every node, so one tape serves one forward
/// pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Grads {
    /// Gradient of `v`; zeros when `v` did not participate in the loss.
    pub fn get(&self, v: Var) -> Vec<f64> {
        self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; self.sizes[v.0]])
    }

    pub fn get_ref(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn rc(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let rows = if shape.len() < 2 { 1 } else { shape[..shape.len() - 1].iter().product() };
    (rows, cols)
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { shape, data, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape.clone(),
            data: t.data.clone(),
            op: Op::Leaf,
            needs_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { shape: t.shape, data: t.data, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor { shape: n.shape.clone(), data: n.data.clone(), requires_grad: false, grad: None }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return shape_err(format!("expected a matrix, got shape {s:?}"));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.dims2(a)?;
        let (kb, n) = self.dims2(b)?;
        if ka != kb {
            return shape_err(format!("matmul inner extents {ka} vs {kb}"));
        }
        let out = k::matmul(self.data(a), self.data(b), m, ka, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`, the form used by every linear map (weights are `out×in`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.dims2(a)?;
        let (n, kb) = self.dims2(b)?;
        if ka != kb {
            return shape_err(format!("matmul_nt inner extents {ka} vs {kb}"));
        }
        let out = k::matmul_nt(self.data(a), self.data(b), m, ka, n);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, cols) = rc(self.shape(a));
        if self.data(bias).len() != cols {
            return shape_err(format!("bias length {} vs {cols} columns", self.data(bias).len()));
        }
        let b = self.data(bias);
        let out = self.data(a).chunks(cols).flat_map(|r| r.iter().zip(b).map(|(x, y)| x + y)).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("mul {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise product with a fixed (non-differentiable) factor, e.g. a
    /// dropout mask.
    pub fn mul_const(&mut self, a: Var, factor: Vec<f64>) -> Result<Var> {
        if factor.len() != self.data(a).len() {
            return shape_err("mul_const length mismatch");
        }
        let out = self.data(a).iter().zip(&factor).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::MulConst(a, factor), &[a]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| k::gelu(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), &[a])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, cols) = rc(self.shape(a));
        if cols == 0 {
            return shape_err("softmax over an empty axis");
        }
        if self.data(a).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let mut out = self.data(a).to_vec();
        out.chunks_mut(cols).for_each(k::softmax_in_place);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax(a), &[a]))
    }

    /// Standardizes each row over the last axis, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (_, d) = rc(self.shape(x));
        if d == 0 || eps <= 0.0 {
            return contract_err("layer_norm needs d >= 1 and eps > 0");
        }
        if self.data(gain).len() != d || self.data(bias).len() != d {
            return shape_err("layer_norm gain/bias length");
        }
        let out = k::layer_norm_rows(self.data(x), d, self.data(gain), self.data(bias), eps);
        Ok(self.push(self.shape(x).to_vec(), out, Op::LayerNorm { x, gain, bias, eps }, &[x, gain, bias]))
    }

    /// Valid (unpadded) 1-D convolution over time: `x` is `T×d_in`, `kernels`
    /// is `k×d_in×d_out`; output length is `floor((T-k)/stride)+1`.
    pub fn conv1d(&mut self, x: Var, kernels: Var, stride: usize) -> Result<Var> {
        let (t, d_in) = self.dims2(x)?;
        let ks = self.shape(kernels).to_vec();
        if ks.len() != 3 || ks[1] != d_in {
            return shape_err(format!("kernel shape {ks:?} incompatible with d_in {d_in}"));
        }
        let (kw, d_out) = (ks[0], ks[2]);
        if stride == 0 || kw == 0 {
            return contract_err("conv1d needs kernel >= 1 and stride >= 1");
        }
        if t < kw {
            return shape_err(format!("input too short: T={t} < kernel {kw}"));
        }
        let t_out = (t - kw) / stride + 1;
        let mut out = vec![0.0; t_out * d_out];
        let xd = self.data(x);
        let kd = self.data(kernels);
        for j in 0..kw {
            k::gemm_strided(
                t_out,
                d_in,
                d_out,
                &xd[j * d_in..],
                (stride * d_in) as isize,
                1,
                &kd[j * d_in * d_out..],
                d_out as isize,
                1,
                &mut out,
            );
        }
        Ok(self.push(vec![t_out, d_out], out, Op::Conv1d { x, kernels, stride }, &[x, kernels]))
    }

    /// Mean negative log-likelihood over rows whose mask is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.dims2(logits)?;
        if targets.len() != t || mask.len() != t {
            return shape_err("targets/mask length must equal logit rows");
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return contract_err("cross_entropy mean over an all-zero mask is undefined");
        }
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        let data = self.data(logits);
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            if targets[i] >= v {
                return contract_err(format!("target {} outside vocabulary {v}", targets[i]));
            }
            let row = &data[i * v..(i + 1) * v];
            let ls = k::log_softmax(row);
            loss -= ls[targets[i]];
            for (p, l) in probs[i * v..(i + 1) * v].iter_mut().zip(&ls) {
                *p = l.exp();
            }
        }
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs };
        Ok(self.push(vec![1], vec![loss / count as f64], op, &[logits]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if start + len > rows {
            return shape_err(format!("row slice {start}+{len} exceeds {rows}"));
        }
        let out = self.data(x)[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(vec![len, cols], out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(p) => self.dims2(*p)?.1,
            None => return shape_err("concat of nothing"),
        };
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = self.dims2(*p)?;
            if c != cols {
                return shape_err("concat_rows column mismatch");
            }
            rows += r;
            out.extend_from_slice(self.data(*p));
        }
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Builds a matrix whose i-th row is row `r_i` of matrix `v_i`.
    pub fn stack_rows(&mut self, picks: &[(Var, usize)]) -> Result<Var> {
        let cols = match picks.first() {
            Some((v, _)) => self.dims2(*v)?.1,
            None => return shape_err("stack of nothing"),
        };
        let mut out = Vec::with_capacity(picks.len() * cols);
        for &(v, r) in picks {
            let (rows, c) = self.dims2(v)?;
            if c != cols || r >= rows {
                return shape_err("stack_rows pick out of range");
            }
            out.extend_from_slice(&self.data(v)[r * cols..(r + 1) * cols]);
        }
        let inputs: Vec<Var> = picks.iter().map(|p| p.0).collect();
        Ok(self.push(vec![picks.len(), cols], out, Op::StackRows(picks.to_vec()), &inputs))
    }

    /// Embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(table)?;
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return shape_err(format!("id {i} outside table of {rows} rows"));
            }
            out.extend_from_slice(&self.data(table)[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(vec![ids.len(), cols], out, Op::GatherRows { table, ids: ids.to_vec() }, &[table]))
    }

    /// Rotary embedding of each `head_dim` block of every row at the given
    /// positions.
    pub fn rope(&mut self, x: Var, positions: &[usize], head_dim: usize, base: f64) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if head_dim == 0 || !head_dim.is_multiple_of(2) || cols % head_dim != 0 {
            return Err(Error::Config(format!("head_dim {head_dim} must be even and divide {cols}")));
        }
        if positions.len() != rows {
            return shape_err("one position per row required");
        }
        let mut out = self.data(x).to_vec();
        for (row, &p) in out.chunks_mut(cols).zip(positions) {
            k::rope_rotate_row(row, p, head_dim, base, 1.0);
        }
        let op = Op::Rope { x, positions: positions.to_vec(), head_dim, base };
        Ok(self.push(vec![rows, cols], out, op, &[x]))
    }

    /// Multi-head scaled dot-product attention in which query row `i` sees
    /// the contiguous key rows `ranges[i].0..ranges[i].1`.
    pub fn attend(&mut self, q: Var, kv: (Var, Var), n_heads: usize, ranges: &[(usize, usize)]) -> Result<Var> {
        let (kx, vx) = kv;
        let (tq, d) = self.dims2(q)?;
        let (tk, dk) = self.dims2(kx)?;
        let (tv, dv) = self.dims2(vx)?;
        if dk != d || dv != d || tk != tv {
            return shape_err("attend q/k/v extents");
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Config(format!("{n_heads} heads do not divide width {d}")));
        }
        if ranges.len() != tq {
            return shape_err("one key range per query row required");
        }
        let mut offsets = Vec::with_capacity(tq + 1);
        let mut total = 0;
        for &(lo, hi) in ranges {
            if lo >= hi || hi > tk {
                return contract_err(format!("query row has an empty or invalid key range {lo}..{hi}"));
            }
            offsets.push(total);
            total += hi - lo;
        }
        offsets.push(total);
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(kx), self.data(vx));
        let mut probs = vec![0.0; n_heads * total];
        let mut out = vec![0.0; tq * d];
        for h in 0..n_heads {
            let c0 = h * dh;
            for (i, &(lo, hi)) in ranges.iter().enumerate() {
                let qrow = &qd[i * d + c0..i * d + c0 + dh];
                let p = &mut probs[h * total + offsets[i]..h * total + offsets[i + 1]];
                for (j, pj) in (lo..hi).zip(p.iter_mut()) {
                    *pj = k::dot(qrow, &kd[j * d + c0..j * d + c0 + dh]) * scale;
                }
                k::softmax_in_place(p);
                let orow = &mut out[i * d + c0..i * d + c0 + dh];
                for (j, pj) in (lo..hi).zip(p.iter()) {
                    for (o, vv) in orow.iter_mut().zip(&vd[j * d + c0..j * d + c0 + dh]) {
                        *o += pj * vv;
                    }
                }
            }
        }
        let cache = AttendCache { q, k: kx, v: vx, n_heads, ranges: ranges.to_vec(), offsets, probs };
        Ok(self.push(vec![tq, d], out, Op::Attend(Box::new(cache)), &[q, kx, vx]))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.nodes[loss.0].data.len() != 1 {
            return contract_err(format!("backward needs a scalar loss, got shape {:?}", self.nodes[loss.0].shape));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Grads { grads, sizes: self.nodes.iter().map(|n| n.data.len()).collect() })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].data.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, kk) = rc(&self.nodes[a.0].shape);
                let n = node.shape[1];
                if let Some(ga) = self.acc(grads, *a) {
                    k::matmul_nt_acc(g, self.data(*b), m, n, kk, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    k::matmul_tn_acc(self.data(*a), g, m, kk, n, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, kk) = rc(&self.nodes[a.0].shape);
                let n = node.shape[1];
                if let Some(ga) = self.acc(grads, *a) {
                    k::matmul_acc(g, self.data(*b), m, n, kk, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    k::matmul_tn_acc(g, self.data(*a), m, n, kk, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, *v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                let cols = self.data(*bias).len();
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), y) in ga.iter_mut().zip(g).zip(self.data(*b)) {
                        *x += gi * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, gi), y) in gb.iter_mut().zip(g).zip(self.data(*a)) {
                        *x += gi * y;
                    }
                }
            }
            Op::MulConst(a, f) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), y) in ga.iter_mut().zip(g).zip(f) {
                        *x += gi * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, gi) in ga.iter_mut().zip(g) {
                        *x += gi * c;
                    }
                }
            }
            Op::Gelu(a) => {
                let xs = &self.nodes[a.0].data;
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), xi) in ga.iter_mut().zip(g).zip(xs) {
                        *x += gi * k::gelu_grad(*xi);
                    }
                }
            }
            Op::Softmax(a) => {
                let cols = *node.shape.last().unwrap();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gr, yr), out) in g.chunks(cols).zip(node.data.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let s = k::dot(gr, yr);
                        for j in 0..cols {
                            out[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let d = *node.shape.last().unwrap();
                let xs = self.data(*x);
                let gn = self.data(*gain);
                let rows = xs.len() / d;
                let mut gx = vec![0.0; xs.len()];
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for r in 0..rows {
                    let row = &xs[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let (mean, rstd) = k::row_stats(row, *eps);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gn).map(|(a, b)| a * b).collect();
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = k::dot(&dxhat, &xhat) / d as f64;
                    for j in 0..d {
                        gx[r * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        ggain[j] += gr[j] * xhat[j];
                        gbias[j] += gr[j];
                    }
                }
                for (v, gv) in [(x, gx), (gain, ggain), (bias, gbias)] {
                    if let Some(acc) = self.acc(grads, *v) {
                        add_into(acc, &gv);
                    }
                }
            }
            Op::Conv1d { x, kernels, stride } => {
                let (_, d_in) = rc(&self.nodes[x.0].shape);
                let ks = &self.nodes[kernels.0].shape;
                let (kw, d_out) = (ks[0], ks[2]);
                let t_out = node.shape[0];
                let xd = self.data(*x);
                let kd = self.data(*kernels);
                if let Some(gx) = self.acc(grads, *x) {
                    let mut tmp = vec![0.0; t_out * d_in];
                    for j in 0..kw {
                        // dx[t*s+j] += g[t] · K_jᵀ
                        tmp.fill(0.0);
                        k::matmul_nt_acc(g, &kd[j * d_in * d_out..(j + 1) * d_in * d_out], t_out, d_out, d_in, &mut tmp);
                        for t in 0..t_out {
                            let r = t * stride + j;
                            add_into(&mut gx[r * d_in..(r + 1) * d_in], &tmp[t * d_in..(t + 1) * d_in]);
                        }
                    }
                }
                if let Some(gk) = self.acc(grads, *kernels) {
                    for j in 0..kw {
                        // dK_j += X_jᵀ · g
                        k::gemm_strided(
                            d_in,
                            t_out,
                            d_out,
                            &xd[j * d_in..],
                            1,
                            (stride * d_in) as isize,
                            g,
                            d_out as isize,
                            1,
                            &mut gk[j * d_in * d_out..(j + 1) * d_in * d_out],
                        );
                    }
                }
            }
            Op::CrossEntropy { logits, targets, mask, probs } => {
                let (_, v) = rc(&self.nodes[logits.0].shape);
                let count = mask.iter().filter(|m| **m).count() as f64;
                let scale = g[0] / count;
                if let Some(gl) = self.acc(grads, *logits) {
                    for (i, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..v {
                            let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                            gl[i * v + j] += scale * (probs[i * v + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let cols = node.shape[1];
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(&mut gx[start * cols..start * cols + g.len()], g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].data.len();
                    if let Some(gp) = self.acc(grads, *p) {
                        add_into(gp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::StackRows(picks) => {
                let cols = node.shape[1];
                for (i, (v, r)) in picks.iter().enumerate() {
                    if let Some(gv) = self.acc(grads, *v) {
                        add_into(&mut gv[r * cols..(r + 1) * cols], &g[i * cols..(i + 1) * cols]);
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let cols = node.shape[1];
                if let Some(gt) = self.acc(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * cols..(id + 1) * cols], &g[i * cols..(i + 1) * cols]);
                    }
                }
            }
            Op::Rope { x, positions, head_dim, base } => {
                let cols = node.shape[1];
                if let Some(gx) = self.acc(grads, *x) {
                    let mut back = g.to_vec();
                    for (row, &p) in back.chunks_mut(cols).zip(positions) {
                        k::rope_rotate_row(row, p, *head_dim, *base, -1.0);
                    }
                    add_into(gx, &back);
                }
            }
            Op::Attend(c) => self.attend_backward(c, node, g, grads),
        }
    }

    fn attend_backward(&self, c: &AttendCache, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let d = node.shape[1];
        let dh = d / c.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let total = *c.offsets.last().unwrap();
        let (qd, kd, vd) = (self.data(c.q), self.data(c.k), self.data(c.v));
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut ds = Vec::new();
        for h in 0..c.n_heads {
            let c0 = h * dh;
            for (i, &(lo, hi)) in c.ranges.iter().enumerate() {
                let p = &c.probs[h * total + c.offsets[i]..h * total + c.offsets[i + 1]];
                let go = &g[i * d + c0..i * d + c0 + dh];
                ds.clear();
                for (j, pj) in (lo..hi).zip(p) {
                    ds.push(k::dot(go, &vd[j * d + c0..j * d + c0 + dh]));
                    for (a, b) in gv[j * d + c0..j * d + c0 + dh].iter_mut().zip(go) {
                        *a += pj * b;
                    }
                }
                let s = k::dot(&ds, p);
                for (dsj, pj) in ds.iter_mut().zip(p) {
                    *dsj = pj * (*dsj - s) * scale;
                }
                let qrow = &qd[i * d + c0..i * d + c0 + dh];
                for (j, dsj) in (lo..hi).zip(&ds) {
                    let krow = &kd[j * d + c0..j * d + c0 + dh];
                    for t in 0..dh {
                        gq[i * d + c0 + t] += dsj * krow[t];
                        gk[j * d + c0 + t] += dsj * qrow[t];
                    }
                }
            }
        }
        for (v, gg) in [(c.q, gq), (c.k, gk), (c.v, gv)] {
            if let Some(acc) = self.acc(grads, v) {
                add_into(acc, &gg);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
