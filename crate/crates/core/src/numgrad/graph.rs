use super::tensor::{gemm, Tensor};
use super::NumError;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local-gradient rule of a user-defined operation.
///
/// Receives the upstream gradient, the parent values and the node's own value;
/// returns one optional gradient per parent (same dims as that parent).
pub type CustomBackward = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Relu(Var),
    Tanh(Var),
    Softplus(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    ContextNorm { input: Var, inv_scale: Vec<f64>, ratio: Vec<f64> },
    Custom(Vec<Var>, CustomBackward),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run computation graph with reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so index order is a topological
/// order and the graph is acyclic by construction.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when `v` does not
    /// influence the root or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Variance floor of [`Graph::context_normalize`].
pub const CONTEXT_NORM_EPS: f64 = 1e-12;

fn same_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), NumError> {
    if a.dims() != b.dims() {
        return Err(NumError::DimMismatch { op, left: a.dims().to_vec(), right: b.dims().to_vec() });
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.dims(), data).expect("dims preserved")
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize), NumError> {
    match t.dims() {
        [r, c] => Ok((*r, *c)),
        d => Err(NumError::BadShape(format!("{op} needs a matrix, got {d:?}"))),
    }
}

fn batch_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize), NumError> {
    match t.dims() {
        [b, r, c] => Ok((*b, *r, *c)),
        d => Err(NumError::BadShape(format!("{op} needs a 3-axis tensor, got {d:?}"))),
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Batched `a[i] · op(b[i])`; `a` is `batch × m × k`.
#[allow(clippy::too_many_arguments)]
fn batched_gemm(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    out: &mut [f64],
) {
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &a[i * m * k..(i + 1) * m * k],
            trans_a,
            &b[i * k * n..(i + 1) * k * n],
            trans_b,
            &mut out[i * m * n..(i + 1) * m * n],
            false,
        );
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant during differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (va, vb) = (self.value(a), self.value(b));
        same_dims("add", va, vb)?;
        let out = zip_map(va, vb, |x, y| x + y);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (va, vb) = (self.value(a), self.value(b));
        same_dims("sub", va, vb)?;
        let out = zip_map(va, vb, |x, y| x - y);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (va, vb) = (self.value(a), self.value(b));
        same_dims("mul", va, vb)?;
        let out = zip_map(va, vb, |x, y| x * y);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let ng = self.needs(&[a]);
        self.push(out, Op::Scale(a, factor), ng)
    }

    /// Adds a `1 × c` (or length-`c`) row to every row of an `r × c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumError> {
        let (r, c) = matrix_dims("add_row", self.value(a))?;
        let vb = self.value(row);
        if vb.len() != c {
            return Err(NumError::DimMismatch {
                op: "add_row",
                left: self.dims(a).to_vec(),
                right: vb.dims().to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        let bias = vb.data().to_vec();
        for i in 0..r {
            for (x, b) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(&bias) {
                *x += b;
            }
        }
        let ng = self.needs(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(NumError::DimMismatch {
                op: "matmul",
                left: self.dims(a).to_vec(),
                right: self.dims(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), ng))
    }

    /// Batched product `a[i] · b[i]` of `B × m × k` and `B × k × n` tensors.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.batch_matmul(a, b, false)
    }

    /// Batched product `a[i] · b[i]ᵀ` of `B × m × k` and `B × n × k` tensors.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.batch_matmul(a, b, true)
    }

    fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumError> {
        let (ba, m, k) = batch_dims("bmm", self.value(a))?;
        let (bb, r1, r2) = batch_dims("bmm", self.value(b))?;
        let (kb, n) = if trans_b { (r2, r1) } else { (r1, r2) };
        if ba != bb || k != kb {
            return Err(NumError::DimMismatch {
                op: "bmm",
                left: self.dims(a).to_vec(),
                right: self.dims(b).to_vec(),
            });
        }
        let mut out = vec![0.0; ba * m * n];
        batched_gemm(ba, m, k, n, self.value(a).data(), false, self.value(b).data(), trans_b, &mut out);
        let ng = self.needs(&[a, b]);
        let value = Tensor::new(&[ba, m, n], out)?;
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b }, ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.needs(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.needs(&[a]);
        self.push(out, Op::Tanh(a), ng)
    }

    /// `ln(1 + eˣ)` evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let ng = self.needs(&[a]);
        self.push(out, Op::Softplus(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        let out = self.value(a).transposed()?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var, NumError> {
        let out = self.value(a).reshaped(dims)?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Concatenates matrices with equal row counts along the channel (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = *parts.first().ok_or_else(|| NumError::BadShape("concat of nothing".into()))?;
        let rows = matrix_dims("concat_cols", self.value(first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims("concat_cols", self.value(p))?;
            if r != rows {
                return Err(NumError::DimMismatch {
                    op: "concat_cols",
                    left: self.dims(first).to_vec(),
                    right: self.dims(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(Tensor::matrix(rows, total, out), Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, NumError> {
        let va = self.value(a);
        let rows = va.rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(NumError::BadShape(format!("gather index {bad} out of range for {rows} rows")));
        }
        let out = va.permute_rows(indices);
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec()), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(&[a]);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::scalar(va.sum() / va.len().max(1) as f64);
        let ng = self.needs(&[a]);
        self.push(out, Op::Mean(a), ng)
    }

    /// Row-wise softmax of a matrix, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumError> {
        let (r, c) = matrix_dims("softmax_rows", self.value(a))?;
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(c.max(1)).take(r) {
            softmax_in_place(row);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), ng))
    }

    /// Normalizes every channel (column) of an `N × d` matrix to zero mean and
    /// unit variance across the `N` rows: `(x − μ) / √max(σ², ε)`.
    pub fn context_normalize(&mut self, a: Var) -> Result<Var, NumError> {
        let (n, d) = matrix_dims("context_normalize", self.value(a))?;
        if n == 0 {
            return Err(NumError::BadShape("context_normalize needs at least one row".into()));
        }
        let x = self.value(a).data();
        let mut mean = vec![0.0; d];
        for row in x.chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in x.chunks(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_scale: Vec<f64> = var.iter().map(|s| 1.0 / s.max(CONTEXT_NORM_EPS).sqrt()).collect();
        // 1 where the variance term is live, 0 where the guard is active.
        let ratio: Vec<f64> = var.iter().map(|&s| if s > CONTEXT_NORM_EPS { 1.0 } else { 0.0 }).collect();
        let mut out = Vec::with_capacity(n * d);
        for row in x.chunks(d) {
            for j in 0..d {
                out.push((row[j] - mean[j]) * inv_scale[j]);
            }
        }
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::matrix(n, d, out), Op::ContextNorm { input: a, inv_scale, ratio }, ng))
    }

    /// Registers an operation whose value was computed by the caller and whose
    /// local gradient rule is supplied as a closure.
    pub fn custom(&mut self, parents: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        let ng = self.needs(parents);
        self.push(value, Op::Custom(parents.to_vec(), backward), ng)
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, NumError> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(NumError::NonScalarRoot(root_value.dims().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(root_value.dims()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), NumError> {
        let accumulate = |grads: &mut [Option<Tensor>], v: Var, contribution: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        let wants = |v: Var| self.nodes[v.0].needs_grad;

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, zip_map(g, self.value(*b), |x, y| x * y));
                }
                if wants(*b) {
                    accumulate(grads, *b, zip_map(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, f) => accumulate(grads, *a, g.map(|x| x * f)),
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                if wants(*row) {
                    let c = g.cols();
                    let mut sums = vec![0.0; c];
                    for r in g.data().chunks(c) {
                        for (s, v) in sums.iter_mut().zip(r) {
                            *s += v;
                        }
                    }
                    let dims = self.dims(*row).to_vec();
                    accumulate(grads, *row, Tensor::new(&dims, sums)?);
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.rows(), va.cols());
                let n = vb.cols();
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, vb.data(), true, &mut ga, false);
                    accumulate(grads, *a, Tensor::matrix(m, k, ga));
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), true, g.data(), false, &mut gb, false);
                    accumulate(grads, *b, Tensor::matrix(k, n, gb));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (va.dims()[0], va.dims()[1], va.dims()[2]);
                let n = g.dims()[2];
                if wants(*a) {
                    // ga = g · op(b)ᵀ
                    let mut ga = vec![0.0; batch * m * k];
                    batched_gemm(batch, m, n, k, g.data(), false, vb.data(), !trans_b, &mut ga);
                    accumulate(grads, *a, Tensor::new(va.dims(), ga)?);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; batch * k * n];
                    if *trans_b {
                        // b is n × k: gb = gᵀ · a
                        batched_gemm(batch, n, m, k, g.data(), true, va.data(), false, &mut gb);
                    } else {
                        // b is k × n: gb = aᵀ · g
                        batched_gemm(batch, k, m, n, va.data(), true, g.data(), false, &mut gb);
                    }
                    accumulate(grads, *b, Tensor::new(vb.dims(), gb)?);
                }
            }
            Op::Relu(a) => {
                accumulate(grads, *a, zip_map(g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }))
            }
            Op::Tanh(a) => accumulate(grads, *a, zip_map(g, &node.value, |gv, y| gv * (1.0 - y * y))),
            Op::Softplus(a) => accumulate(grads, *a, zip_map(g, self.value(*a), |gv, x| gv * sigmoid(x))),
            Op::Transpose(a) => accumulate(grads, *a, g.transposed()?),
            Op::Reshape(a) => accumulate(grads, *a, g.reshaped(self.dims(*a))?),
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if wants(p) {
                        let mut part = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            part.extend_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                        }
                        accumulate(grads, p, Tensor::matrix(rows, c, part));
                    }
                    offset += c;
                }
            }
            Op::GatherRows(a, indices) => {
                let va = self.value(*a);
                let c = va.cols();
                let mut ga = Tensor::zeros(va.dims());
                for (r, &src) in indices.iter().enumerate() {
                    let dst = &mut ga.data_mut()[src * c..(src + 1) * c];
                    for (d, v) in dst.iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                        *d += v;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                accumulate(grads, *a, Tensor::filled(self.dims(*a), gv));
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let gv = g.data()[0] / va.len().max(1) as f64;
                accumulate(grads, *a, Tensor::filled(va.dims(), gv));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols().max(1);
                let mut ga = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    ga.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                accumulate(grads, *a, Tensor::new(y.dims(), ga)?);
            }
            Op::ContextNorm { input, inv_scale, ratio } => {
                let y = &node.value;
                let (n, d) = (y.rows(), y.cols());
                let mut mean_g = vec![0.0; d];
                let mut mean_gy = vec![0.0; d];
                for (yr, gr) in y.data().chunks(d).zip(g.data().chunks(d)) {
                    for j in 0..d {
                        mean_g[j] += gr[j];
                        mean_gy[j] += gr[j] * yr[j];
                    }
                }
                for j in 0..d {
                    mean_g[j] /= n as f64;
                    mean_gy[j] /= n as f64;
                }
                let mut ga = Vec::with_capacity(n * d);
                for (yr, gr) in y.data().chunks(d).zip(g.data().chunks(d)) {
                    for j in 0..d {
                        ga.push(inv_scale[j] * (gr[j] - mean_g[j] - ratio[j] * yr[j] * mean_gy[j]));
                    }
                }
                accumulate(grads, *input, Tensor::matrix(n, d, ga));
            }
            Op::Custom(parents, rule) => {
                let values: Vec<&Tensor> = parents.iter().map(|p| self.value(*p)).collect();
                let local = rule(g, &values, &node.value);
                for (p, lg) in parents.iter().zip(local) {
                    if let Some(lg) = lg {
                        if lg.dims() != self.dims(*p) {
                            return Err(NumError::DimMismatch {
                                op: "custom backward",
                                left: lg.dims().to_vec(),
                                right: self.dims(*p).to_vec(),
                            });
                        }
                        accumulate(grads, *p, lg);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
