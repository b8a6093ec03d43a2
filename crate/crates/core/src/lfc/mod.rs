//! Local feature consensus: each correspondence gathers its `k` nearest
//! neighbours in feature space, re-weights the residual edge features by
//! mutual similarity, and fuses them with weights predicted from its own feature.

use thiserror::Error;

use crate::numgrad::{Graph, NumError, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LfcError {
    #[error("k = {k} needs at least {} correspondences, got {n}", k + 1)]
    KTooLarge { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroNeighbors,
    #[error("width {d} is not divisible by {heads} heads")]
    HeadMismatch { d: usize, heads: usize },
    #[error(transparent)]
    Num(#[from] NumError),
}

/// `k` nearest neighbours of every row, nearest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborGraph {
    k: usize,
    indices: Vec<usize>,
}

impl NeighborGraph {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// Row-major `N·k` indices.
    pub fn flat(&self) -> &[usize] {
        &self.indices
    }
}

/// Squared distance accumulated in four lanes; symmetric in its arguments
/// bit for bit.
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let rest: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| (x - y) * (x - y)).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            let v = x[l] - y[l];
            acc[l] += v * v;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + rest
}

/// Exact Euclidean k-nearest neighbours of the rows of `f` (self excluded);
/// equal distances go to the lower index.
pub fn knn_graph(f: &Tensor, k: usize) -> Result<NeighborGraph, LfcError> {
    let n = f.rows();
    if k == 0 {
        return Err(LfcError::ZeroNeighbors);
    }
    if k >= n {
        return Err(LfcError::KTooLarge { k, n });
    }
    let cols = f.cols();
    let data = f.data();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        let fi = &data[i * cols..(i + 1) * cols];
        for j in i + 1..n {
            let v = sq_dist(fi, &data[j * cols..(j + 1) * cols]);
            dist[i * n + j] = v;
            dist[j * n + i] = v;
        }
    }
    let mut indices = Vec::with_capacity(n * k);
    // Running top-k per row, sorted by distance; scanning j upwards and
    // inserting after equal distances keeps ties on the lower index.
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for i in 0..n {
        best.clear();
        for (j, &v) in dist[i * n..(i + 1) * n].iter().enumerate() {
            if j == i {
                continue;
            }
            if best.len() == k && v >= best[k - 1].0 {
                continue;
            }
            let pos = best.partition_point(|&(b, _)| b <= v);
            best.insert(pos, (v, j));
            best.truncate(k);
        }
        indices.extend(best.iter().map(|&(_, j)| j));
    }
    Ok(NeighborGraph { k, indices })
}

/// Learnable LFC tensors as graph nodes.
#[derive(Clone, Debug)]
pub struct LfcVars {
    /// One `2d × (d/h)` projection per head.
    pub heads: Vec<Var>,
    /// `d × d` mix of the concatenated heads.
    pub wout: Var,
    /// `k × d` fusion-weight projection.
    pub wprime: Var,
}

/// `(N·k) × 2d` matrix whose row `i·k + j` is `[f_i ‖ f_i − f_{n(i,j)}]`.
pub fn edge_features(g: &mut Graph, f: Var, graph: &NeighborGraph) -> Result<Var, LfcError> {
    let k = graph.k();
    let centers: Vec<usize> = (0..graph.len()).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let fc = g.gather_rows(f, &centers)?;
    let fnb = g.gather_rows(f, graph.flat())?;
    let diff = g.sub(fc, fnb)?;
    Ok(g.concat_cols(&[fc, diff])?)
}

/// Output of the mutual-consensus attention.
pub struct Consensus {
    /// `(N·k) × d` boosted edge features.
    pub boosted: Var,
    /// Per head, `N × k × k` row-stochastic attention.
    pub attention: Vec<Var>,
}

/// Per head: `Ẽ = E W`, `A = softmax_rows(Ẽ Ẽᵀ / √(d/h))`, output `A Ẽ`;
/// heads are concatenated and mixed by `Wout`.
pub fn consensus(g: &mut Graph, edges: Var, vars: &LfcVars, k: usize) -> Result<Consensus, LfcError> {
    let rows = g.value(edges).rows();
    let n = rows / k;
    let mut outs = Vec::with_capacity(vars.heads.len());
    let mut attention = Vec::with_capacity(vars.heads.len());
    for &w in &vars.heads {
        let proj = g.matmul(edges, w)?;
        let dh = g.value(proj).cols();
        let proj = g.reshape(proj, &[n, k, dh])?;
        let (head, a) = attention_weights(g, proj, n, k, dh)?;
        outs.push(head);
        attention.push(a);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let boosted = g.matmul(cat, vars.wout)?;
    Ok(Consensus { boosted, attention })
}

/// Self-attention within each neighbourhood of an `N × k × dh` projection;
/// returns the `(N·k) × dh` output and the `N × k × k` weights.
fn attention_weights(g: &mut Graph, proj: Var, n: usize, k: usize, dh: usize) -> Result<(Var, Var), LfcError> {
    let scores = g.bmm_nt(proj, proj)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let flat = g.reshape(scores, &[n * k, k])?;
    let a = g.softmax_rows(flat)?;
    let a = g.reshape(a, &[n, k, k])?;
    let head = g.bmm(a, proj)?;
    Ok((g.reshape(head, &[n * k, dh])?, a))
}

/// `ω_i = softmax(W′ f_i)` and `f̂_i = Σ_j ω_i^j ê_i^j`; returns `(f̂, ω)`
/// with `ω` as an `N × k` matrix.
pub fn deformable_fuse(g: &mut Graph, f: Var, boosted: Var, wprime: Var, k: usize) -> Result<(Var, Var), LfcError> {
    let (n, d) = (g.value(f).rows(), g.value(f).cols());
    let wt = g.transpose(wprime)?;
    let logits = g.matmul(f, wt)?;
    let omega = g.softmax_rows(logits)?;
    let w3 = g.reshape(omega, &[n, 1, k])?;
    let b3 = g.reshape(boosted, &[n, k, d])?;
    let fused = g.bmm(w3, b3)?;
    Ok((g.reshape(fused, &[n, d])?, omega))
}

/// kNN graph → edge features → consensus → deformable fusion. Neighbour
/// indices are constants for differentiation.
///
/// Evaluated in factored form: `[f_i ‖ f_i − f_j] W = f_i (W_a + W_b) − f_j W_b`
/// projects nodes instead of edges, and since fusion is linear the `Wout` mix
/// is applied after it. [`lfc_block_reference`] composes the stages literally.
pub fn lfc_block(g: &mut Graph, f: Var, vars: &LfcVars, k: usize) -> Result<Var, LfcError> {
    let (n, d) = check_block(g, f, vars)?;
    let graph = knn_graph(g.value(f), k)?;
    let zeros = g.constant(Tensor::zeros(&[n, d]));
    let both = g.concat_cols(&[f, f])?;
    let right = g.concat_cols(&[zeros, f])?;
    let wt = g.transpose(vars.wprime)?;
    let logits = g.matmul(f, wt)?;
    let omega = g.softmax_rows(logits)?;
    let mut outs = Vec::with_capacity(vars.heads.len());
    for &w in &vars.heads {
        let p = g.matmul(both, w)?;
        let q = g.matmul(right, w)?;
        outs.push(fused_attention(g, p, q, omega, &graph));
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok(g.matmul(cat, vars.wout)?)
}

/// One head of consensus attention followed by fusion, for node-level
/// projections `p = f (W_a + W_b)` and `q = f W_b` (both `N × dh`) and fusion
/// weights `omega` (`N × k`). With `Ẽ_i[j] = p_i − q_{n(i,j)}` and
/// `A_i = softmax_rows(Ẽ_i Ẽ_iᵀ / √dh)`, row `i` of the output is `ω_iᵀ A_i Ẽ_i`.
fn fused_attention(g: &mut Graph, p: Var, q: Var, omega: Var, graph: &NeighborGraph) -> Var {
    let k = graph.k();
    let (n, dh) = (g.value(p).rows(), g.value(p).cols());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * dh];
    let mut ws = Workspace::new(n, k, dh);
    for i in 0..n {
        ws.load(i, g.value(p), g.value(q), g.value(omega), graph.neighbors(i), scale);
        let row = &mut out[i * dh..(i + 1) * dh];
        for (&uj, ej) in ws.u(i).iter().zip(ws.e(i).chunks_exact(dh)) {
            for (o, e) in row.iter_mut().zip(ej) {
                *o += uj * e;
            }
        }
    }
    let nbrs = graph.flat().to_vec();
    g.custom(
        &[p, q, omega],
        Tensor::matrix(n, dh, out),
        Box::new(move |grad, parents, _out| {
            let wv = parents[2];
            let mut dp = vec![0.0; n * dh];
            let mut dq = vec![0.0; n * dh];
            let mut dw = vec![0.0; n * k];
            let mut eg = vec![0.0; k];
            let mut ds = vec![0.0; k * k];
            let mut de = vec![0.0; k * dh];
            for i in 0..n {
                let nb = &nbrs[i * k..(i + 1) * k];
                let (e, a, u) = (ws.e(i), ws.a(i), ws.u(i));
                let gi = grad.row(i);
                for j in 0..k {
                    eg[j] = dot(&e[j * dh..(j + 1) * dh], gi);
                }
                let w = wv.row(i);
                for r in 0..k {
                    let ar = &a[r * k..(r + 1) * k];
                    let dwr = dot(ar, &eg);
                    dw[i * k + r] = dwr;
                    for m in 0..k {
                        ds[r * k + m] = w[r] * ar[m] * (eg[m] - dwr);
                    }
                }
                for j in 0..k {
                    let dej = &mut de[j * dh..(j + 1) * dh];
                    for (x, gv) in dej.iter_mut().zip(gi) {
                        *x = u[j] * gv;
                    }
                    for m in 0..k {
                        let c = scale * (ds[j * k + m] + ds[m * k + j]);
                        for (x, em) in dej.iter_mut().zip(&e[m * dh..(m + 1) * dh]) {
                            *x += c * em;
                        }
                    }
                }
                let dpi = &mut dp[i * dh..(i + 1) * dh];
                for (j, &nbj) in nb.iter().enumerate() {
                    let dej = &de[j * dh..(j + 1) * dh];
                    for (x, v) in dpi.iter_mut().zip(dej) {
                        *x += v;
                    }
                    for (x, v) in dq[nbj * dh..(nbj + 1) * dh].iter_mut().zip(dej) {
                        *x -= v;
                    }
                }
            }
            vec![
                Some(Tensor::matrix(n, dh, dp)),
                Some(Tensor::matrix(n, dh, dq)),
                Some(Tensor::matrix(n, k, dw)),
            ]
        }),
    )
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let rest: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + rest
}

/// Per-correspondence buffers of [`fused_attention`], kept for the backward pass.
struct Workspace {
    k: usize,
    dh: usize,
    /// `k × dh` edge projections per correspondence.
    e: Vec<f64>,
    /// `k × k` attention per correspondence.
    a: Vec<f64>,
    /// `Aᵀ ω` per correspondence.
    u: Vec<f64>,
}

impl Workspace {
    fn new(n: usize, k: usize, dh: usize) -> Self {
        Self { k, dh, e: vec![0.0; n * k * dh], a: vec![0.0; n * k * k], u: vec![0.0; n * k] }
    }

    fn e(&self, i: usize) -> &[f64] {
        let s = self.k * self.dh;
        &self.e[i * s..(i + 1) * s]
    }

    fn a(&self, i: usize) -> &[f64] {
        let s = self.k * self.k;
        &self.a[i * s..(i + 1) * s]
    }

    fn u(&self, i: usize) -> &[f64] {
        &self.u[i * self.k..(i + 1) * self.k]
    }

    fn load(&mut self, i: usize, p: &Tensor, q: &Tensor, omega: &Tensor, nb: &[usize], scale: f64) {
        let (k, dh) = (self.k, self.dh);
        let e = &mut self.e[i * k * dh..(i + 1) * k * dh];
        let a = &mut self.a[i * k * k..(i + 1) * k * k];
        let pi = p.row(i);
        for (ej, &m) in e.chunks_exact_mut(dh).zip(nb) {
            for ((x, a), b) in ej.iter_mut().zip(pi).zip(q.row(m)) {
                *x = a - b;
            }
        }
        for r in 0..k {
            for c in r..k {
                let v = scale * dot(&e[r * dh..(r + 1) * dh], &e[c * dh..(c + 1) * dh]);
                a[r * k + c] = v;
                a[c * k + r] = v;
            }
        }
        for row in a.chunks_exact_mut(k) {
            crate::numgrad::softmax_in_place(row);
        }
        let w = omega.row(i);
        for (c, u) in self.u[i * k..(i + 1) * k].iter_mut().enumerate() {
            *u = (0..k).map(|r| w[r] * a[r * k + c]).sum();
        }
    }
}

/// Literal composition of the four stages.
pub fn lfc_block_reference(g: &mut Graph, f: Var, vars: &LfcVars, k: usize) -> Result<Var, LfcError> {
    check_block(g, f, vars)?;
    let graph = knn_graph(g.value(f), k)?;
    let edges = edge_features(g, f, &graph)?;
    let c = consensus(g, edges, vars, k)?;
    Ok(deformable_fuse(g, f, c.boosted, vars.wprime, k)?.0)
}

fn check_block(g: &Graph, f: Var, vars: &LfcVars) -> Result<(usize, usize), LfcError> {
    let (n, d) = (g.value(f).rows(), g.value(f).cols());
    if vars.heads.is_empty() || d % vars.heads.len() != 0 {
        return Err(LfcError::HeadMismatch { d, heads: vars.heads.len() });
    }
    Ok((n, d))
}
