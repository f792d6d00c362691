//! Minimal reverse-mode differentiation over dense matrices.
//!
//! Values are computed eagerly as nodes are pushed; [`Tape::backward`] walks
//! the nodes in reverse and accumulates parameter gradients into a caller
//! supplied buffer indexed by parameter id. The attention, scoring and loss
//! nodes are fused operations with hand-written adjoints.

use crate::tensor::{dot, softmax_in_place, Mat};

pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Const,
    Param(ParamId),
    Gather {
        table: ParamId,
        rows: Vec<u32>,
    },
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Mat>,
    },
    ParametricAttention {
        queries: Var,
        h: Var,
        len: usize,
        probs: Mat,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    MultiInterestScore {
        interests: Vec<Var>,
        items: Var,
        dots: Vec<f64>,
        weights: Vec<f64>,
    },
    SoftmaxXent {
        logits: Var,
        row_grads: Mat,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-6;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise cross entropy over in-batch candidates.
///
/// `logits` is `rows x cols`; row `i`'s positive is column `targets[i]`.
/// Masked entries are excluded from the softmax. `offsets[j]` is added to
/// every entry of column `j` and `margins[i]` is subtracted from row `i`'s
/// positive before normalization. Each row's loss is `weights[i] * f(p)` with
/// `f(p) = -(1 - p)^γ log p` (`γ = 0` is plain cross entropy), and the
/// reported loss is their sum divided by `denom`.
pub struct XentSpec<'a> {
    pub targets: &'a [usize],
    pub mask: &'a [bool],
    pub offsets: &'a [f64],
    pub margins: &'a [f64],
    pub weights: &'a [f64],
    pub focal_gamma: f64,
    pub denom: f64,
}

pub struct XentOutput {
    pub loss: f64,
    pub per_row: Vec<f64>,
    /// Softmax probabilities after offsets, margins and masking.
    pub probs: Mat,
    /// The logits after offsets and margins (masked entries are `-inf`).
    pub adjusted: Mat,
    /// d loss / d logits.
    pub grad: Mat,
}

pub fn softmax_xent(logits: &Mat, spec: &XentSpec<'_>) -> XentOutput {
    let (rows, cols) = (logits.rows, logits.cols);
    let mut adjusted = Mat::zeros(rows, cols);
    let mut probs = Mat::zeros(rows, cols);
    let mut grad = Mat::zeros(rows, cols);
    let mut per_row = vec![0.0; rows];
    let mut total = 0.0;
    for i in 0..rows {
        let t = spec.targets[i];
        let a = adjusted.row_mut(i);
        for j in 0..cols {
            a[j] = if spec.mask[i * cols + j] {
                f64::NEG_INFINITY
            } else {
                logits.get(i, j) + spec.offsets[j]
            };
        }
        a[t] -= spec.margins[i];
        let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + a.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        let p = probs.row_mut(i);
        for j in 0..cols {
            p[j] = (adjusted.get(i, j) - lse).exp();
        }
        let log_pt = adjusted.get(i, t) - lse;
        let pt = log_pt.exp();
        let w = spec.weights[i];
        let gamma = spec.focal_gamma;
        // f(p) and g = f'(p) * p, so that d loss / d z_j = w * g * (δ_jt - p_j).
        let (f, g) = if gamma == 0.0 {
            (-log_pt, -1.0)
        } else if pt >= 1.0 {
            (0.0, 0.0)
        } else {
            let q = 1.0 - pt;
            let f = -q.powf(gamma) * log_pt;
            let g = gamma * q.powf(gamma - 1.0) * pt * log_pt - q.powf(gamma);
            (f, g)
        };
        per_row[i] = w * f;
        total += w * f;
        if w != 0.0 {
            let scale = w * g / spec.denom;
            let gr = grad.row_mut(i);
            for j in 0..cols {
                let delta = if j == t { 1.0 } else { 0.0 };
                gr[j] = scale * (delta - probs.get(i, j));
            }
        }
    }
    XentOutput {
        loss: total / spec.denom,
        per_row,
        probs,
        adjusted,
        grad,
    }
}

/// Multi-interest affinity: `softmax_m(z_m · v)`-weighted mean of `z_m · v`.
/// Returns the score and fills `dots` and `weights` (length M).
pub fn multi_interest_score(
    interests: &Mat,
    item: &[f64],
    dots: &mut [f64],
    weights: &mut [f64],
) -> f64 {
    for m in 0..interests.rows {
        dots[m] = dot(interests.row(m), item);
    }
    weights.copy_from_slice(dots);
    softmax_in_place(weights);
    weights.iter().zip(dots.iter()).map(|(w, a)| w * a).sum()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Const)
    }

    pub fn param(&mut self, id: ParamId, value: &Mat) -> Var {
        self.push(value.clone(), Op::Param(id))
    }

    /// Rows of a parameter table, gathered without materializing the table.
    pub fn gather(&mut self, id: ParamId, table: &Mat, rows: &[u32]) -> Var {
        let mut out = Mat::zeros(rows.len(), table.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(table.row(r as usize));
        }
        self.push(
            out,
            Op::Gather {
                table: id,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let mut v = self.value(x).clone();
        let bias = self.value(b);
        assert_eq!(bias.len(), v.cols);
        for i in 0..v.rows {
            for (a, c) in v.row_mut(i).iter_mut().zip(&bias.data) {
                *a += c;
            }
        }
        self.push(v, Op::AddBias(x, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for a in &mut v.data {
            *a = gelu(*a);
        }
        self.push(v, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.rows, xv.cols);
        let mut xhat = Mat::zeros(n, d);
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let r = xv.row(i);
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for (o, a) in xhat.row_mut(i).iter_mut().zip(r) {
                *o = (a - mean) * is;
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = xhat.clone();
        for i in 0..n {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = *o * g.data[j] + b.data[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention where position `i` attends to
    /// positions `0..=i`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (qv.rows, qv.cols);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros(n, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut p = Mat::zeros(n, n);
            for i in 0..n {
                let qi = &qv.row(i)[off..off + dh];
                let row = &mut p.row_mut(i)[..=i];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &kv.row(j)[off..off + dh]) * scale;
                }
                softmax_in_place(row);
                let o = &mut out.row_mut(i)[off..off + dh];
                for (j, &pij) in row.iter().enumerate() {
                    for (oc, vc) in o.iter_mut().zip(&vv.row(j)[off..off + dh]) {
                        *oc += pij * vc;
                    }
                }
            }
            probs.push(p);
        }
        self.push(
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// Global-query attention pooling over the first `len` rows of `h`.
    /// `queries` is `M x d`; the result is `M x d`.
    pub fn parametric_attention(&mut self, queries: Var, h: Var, len: usize) -> Var {
        let (qv, hv) = (self.value(queries), self.value(h));
        let hp = hv.top_rows(len);
        let mut probs = qv.matmul_t(&hp);
        for m in 0..probs.rows {
            softmax_in_place(probs.row_mut(m));
        }
        let out = probs.matmul(&hp);
        self.push(
            out,
            Op::ParametricAttention {
                queries,
                h,
                len,
                probs,
            },
        )
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let mut norms = Vec::with_capacity(v.rows);
        for i in 0..v.rows {
            let r = v.row_mut(i);
            let n = dot(r, r).sqrt().max(1e-12);
            for a in r.iter_mut() {
                *a /= n;
            }
            norms.push(n);
        }
        self.push(v, Op::NormalizeRows { x, norms })
    }

    /// Score matrix `B x C` between per-example interest sets (each `M x d`)
    /// and candidate item representations (`C x d`).
    pub fn multi_interest_scores(&mut self, interests: &[Var], items: Var) -> Var {
        let iv = self.value(items);
        let b = interests.len();
        let c = iv.rows;
        let m = self.value(interests[0]).rows;
        let mut out = Mat::zeros(b, c);
        let mut dots = vec![0.0; b * c * m];
        let mut weights = vec![0.0; b * c * m];
        for (i, &z) in interests.iter().enumerate() {
            let zv = self.value(z);
            for j in 0..c {
                let base = (i * c + j) * m;
                out.data[i * c + j] = multi_interest_score(
                    zv,
                    iv.row(j),
                    &mut dots[base..base + m],
                    &mut weights[base..base + m],
                );
            }
        }
        self.push(
            out,
            Op::MultiInterestScore {
                interests: interests.to_vec(),
                items,
                dots,
                weights,
            },
        )
    }

    /// Fused softmax cross entropy; returns the `1 x 1` loss node and the
    /// forward details.
    pub fn softmax_xent(&mut self, logits: Var, spec: &XentSpec<'_>) -> (Var, XentOutput) {
        let out = softmax_xent(self.value(logits), spec);
        let node = self.push(
            Mat::from_vec(1, 1, vec![out.loss]),
            Op::SoftmaxXent {
                logits,
                row_grads: out.grad.clone(),
            },
        );
        (node, out)
    }

    /// Back-propagates from the scalar `root` and adds parameter gradients
    /// into `grads[id]`.
    pub fn backward(&self, root: Var, grads: &mut [Mat]) {
        let mut adj: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_val = &self.nodes[root.0].value;
        adj[root.0] = Some(Mat::from_vec(
            root_val.rows,
            root_val.cols,
            vec![1.0; root_val.len()],
        ));

        fn acc(adj: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut adj[v.0] {
                Some(a) => a.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => grads[*id].add_assign(&g),
                Op::Gather { table, rows } => {
                    let t = &mut grads[*table];
                    for (i, &r) in rows.iter().enumerate() {
                        for (a, b) in t.row_mut(r as usize).iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut adj, *a, g.matmul_t(bv));
                    acc(&mut adj, *b, av.t_matmul(&g));
                }
                Op::AddBias(x, b) => {
                    let mut gb = Mat::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for (a, c) in gb.data.iter_mut().zip(g.row(i)) {
                            *a += c;
                        }
                    }
                    acc(&mut adj, *b, gb);
                    acc(&mut adj, *x, g);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (a, &xi) in gx.data.iter_mut().zip(&xv.data) {
                        *a *= gelu_grad(xi);
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let (n, d) = (g.rows, g.cols);
                    let mut ggain = Mat::zeros(1, d);
                    let mut gbias = Mat::zeros(1, d);
                    let mut gx = Mat::zeros(n, d);
                    for i in 0..n {
                        let gr = g.row(i);
                        let xh = xhat.row(i);
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            ggain.data[j] += gr[j] * xh[j];
                            gbias.data[j] += gr[j];
                            dxhat[j] = gr[j] * gv.data[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dot(&dxhat, xh) / d as f64;
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            *o = inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    acc(&mut adj, *gain, ggain);
                    acc(&mut adj, *bias, gbias);
                    acc(&mut adj, *x, gx);
                }
                Op::CausalAttention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (n, d) = (qv.rows, qv.cols);
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Mat::zeros(n, d);
                    let mut gk = Mat::zeros(n, d);
                    let mut gv = Mat::zeros(n, d);
                    for (h, p) in probs.iter().enumerate() {
                        let off = h * dh;
                        for i in 0..n {
                            let go = &g.row(i)[off..off + dh];
                            let pr = &p.row(i)[..=i];
                            // dP_ij = dO_i · V_j, then softmax adjoint.
                            let dp: Vec<f64> = (0..=i)
                                .map(|j| dot(go, &vv.row(j)[off..off + dh]))
                                .collect();
                            let inner: f64 = dp.iter().zip(pr).map(|(a, b)| a * b).sum();
                            for j in 0..=i {
                                let pij = pr[j];
                                for (a, b) in gv.row_mut(j)[off..off + dh].iter_mut().zip(go) {
                                    *a += pij * b;
                                }
                                let ds = pij * (dp[j] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kv.row(j)[off..off + dh];
                                for (a, b) in gq.row_mut(i)[off..off + dh].iter_mut().zip(kj) {
                                    *a += ds * b;
                                }
                                let qi = &qv.row(i)[off..off + dh];
                                for (a, b) in gk.row_mut(j)[off..off + dh].iter_mut().zip(qi) {
                                    *a += ds * b;
                                }
                            }
                        }
                    }
                    acc(&mut adj, *q, gq);
                    acc(&mut adj, *k, gk);
                    acc(&mut adj, *v, gv);
                }
                Op::ParametricAttention {
                    queries,
                    h,
                    len,
                    probs,
                } => {
                    let (qv, hv) = (self.value(*queries), self.value(*h));
                    let hp = hv.top_rows(*len);
                    // Z = P H, P = softmax(Q Hᵀ).
                    let dp = g.matmul_t(&hp);
                    let mut ds = Mat::zeros(probs.rows, probs.cols);
                    for m in 0..probs.rows {
                        let pr = probs.row(m);
                        let dr = dp.row(m);
                        let inner = dot(pr, dr);
                        for (o, (p, d)) in ds.row_mut(m).iter_mut().zip(pr.iter().zip(dr)) {
                            *o = p * (d - inner);
                        }
                    }
                    let mut gh_p = probs.t_matmul(&g);
                    gh_p.add_assign(&ds.t_matmul(qv));
                    let mut gh = Mat::zeros(hv.rows, hv.cols);
                    gh.data[..gh_p.len()].copy_from_slice(&gh_p.data);
                    acc(&mut adj, *queries, ds.matmul(&hp));
                    acc(&mut adj, *h, gh);
                }
                Op::NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut gx = Mat::zeros(y.rows, y.cols);
                    for i in 0..y.rows {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let proj = dot(yr, gr);
                        for (o, (a, b)) in gx.row_mut(i).iter_mut().zip(gr.iter().zip(yr)) {
                            *o = (a - proj * b) / norms[i];
                        }
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::MultiInterestScore {
                    interests,
                    items,
                    dots,
                    weights,
                } => {
                    let iv = self.value(*items);
                    let c = g.cols;
                    let m = self.value(interests[0]).rows;
                    let d = iv.cols;
                    let mut gitems = Mat::zeros(c, d);
                    for (i, &z) in interests.iter().enumerate() {
                        let zv = self.value(z);
                        let mut gz = Mat::zeros(m, d);
                        for j in 0..c {
                            let gij = g.get(i, j);
                            if gij == 0.0 {
                                continue;
                            }
                            let base = (i * c + j) * m;
                            let s = node.value.get(i, j);
                            let vj = iv.row(j);
                            for r in 0..m {
                                // d s / d a_r = w_r (1 + a_r - s)
                                let coef = gij * weights[base + r] * (1.0 + dots[base + r] - s);
                                if coef == 0.0 {
                                    continue;
                                }
                                for (a, bb) in gz.row_mut(r).iter_mut().zip(vj) {
                                    *a += coef * bb;
                                }
                                for (a, bb) in gitems.row_mut(j).iter_mut().zip(zv.row(r)) {
                                    *a += coef * bb;
                                }
                            }
                        }
                        acc(&mut adj, z, gz);
                    }
                    acc(&mut adj, *items, gitems);
                }
                Op::SoftmaxXent { logits, row_grads } => {
                    let mut gl = row_grads.clone();
                    gl.scale(g.data[0]);
                    acc(&mut adj, *logits, gl);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_two_way_loss() {
        let logits = Mat::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]);
        let out = softmax_xent(
            &logits,
            &XentSpec {
                targets: &[0, 1],
                mask: &[false; 4],
                offsets: &[0.0, 0.0],
                margins: &[0.0, 0.0],
                weights: &[1.0, 1.0],
                focal_gamma: 0.0,
                denom: 2.0,
            },
        );
        let want = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((out.loss - want).abs() < 1e-12);
        assert!((out.loss - 0.1269).abs() < 5e-5);
    }

    #[test]
    fn focal_multiplier_vanishes_for_confident_rows() {
        let logits = Mat::from_rows(&[vec![0.0, f64::NEG_INFINITY]]);
        let out = softmax_xent(
            &logits,
            &XentSpec {
                targets: &[0],
                mask: &[false, true],
                offsets: &[0.0, 0.0],
                margins: &[0.0],
                weights: &[1.0],
                focal_gamma: 2.0,
                denom: 1.0,
            },
        );
        assert_eq!(out.per_row[0], 0.0);
        assert!(out.grad.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-5;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
