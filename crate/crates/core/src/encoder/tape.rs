//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Operations are
//! coarse (fused attention, layer norm) so that a whole transformer batch
//! stays at a few dozen nodes per block. Gradients are propagated only
//! through nodes that depend on a leaf created with `requires_grad`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f64>;

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
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    L2NormRows { x: Var, norms: Vec<f64> },
    L2NormCols { x: Var, norms: Vec<f64> },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    AssembleTokens { patches: Var, cls: Var, pos: Var, batch: usize },
    Attention { q: Var, k: Var, v: Var, batch: usize, heads: usize },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Attention probabilities per attention node, `batch * heads` matrices of `seq x seq`.
    attention: Vec<(Var, Vec<Mat>)>,
}

const LN_EPS: f64 = 1e-6;
const NORM_EPS: f64 = 1e-12;

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Attention probabilities recorded by an [`Tape::attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<&[Mat]> {
        self.attention
            .iter()
            .find(|(var, _)| *var == v)
            .map(|(_, p)| p.as_slice())
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
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

    pub fn leaf(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    /// `a + row` with `row` (1 x d) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// `a * row` elementwise with `row` (1 x d) broadcast.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Per-row standardisation without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let d = src.ncols() as f64;
        let mut out = src.clone();
        let mut inv_std = Vec::with_capacity(src.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row *= is;
            inv_std.push(is);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::LayerNorm { x, inv_std }, rg)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt().max(NORM_EPS);
            row /= n;
            norms.push(n);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::L2NormRows { x, norms }, rg)
    }

    pub fn l2_normalize_cols(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.ncols());
        for mut col in out.columns_mut() {
            let n = col.dot(&col).sqrt().max(NORM_EPS);
            col /= n;
            norms.push(n);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::L2NormCols { x, norms }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(&[x]);
        self.push(value, Op::SliceCols { x, start }, rg)
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let value = self.value(x).select(Axis(0), &rows);
        let rg = self.rg(&[x]);
        self.push(value, Op::GatherRows { x, rows }, rg)
    }

    /// Builds `batch` token sequences `[cls; patches_b] + pos`.
    ///
    /// `patches` is `(batch * n) x d`, `cls` is `1 x d`, `pos` is `(n + 1) x d`.
    pub fn assemble_tokens(&mut self, patches: Var, cls: Var, pos: Var, batch: usize) -> Var {
        let p = self.value(patches);
        let c = self.value(cls);
        let e = self.value(pos);
        let seq = e.nrows();
        let n = seq - 1;
        let d = e.ncols();
        assert_eq!(p.nrows(), batch * n, "patch rows vs batch");
        let mut out = Mat::zeros((batch * seq, d));
        for b in 0..batch {
            let base = b * seq;
            out.row_mut(base).assign(&(&c.row(0) + &e.row(0)));
            let mut body = out.slice_mut(s![base + 1..base + seq, ..]);
            body.assign(&p.slice(s![b * n..(b + 1) * n, ..]));
            body += &e.slice(s![1.., ..]);
        }
        let rg = self.rg(&[patches, cls, pos]);
        self.push(
            out,
            Op::AssembleTokens {
                patches,
                cls,
                pos,
                batch,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention over `batch` independent
    /// sequences stacked row-wise; heads split the columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let rows = qm.nrows();
        let d = qm.ncols();
        let seq = rows / batch;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((rows, d));
        let mut probs = Vec::with_capacity(batch * heads);
        let mut scores = Mat::zeros((seq, seq));
        for b in 0..batch {
            let r = b * seq..(b + 1) * seq;
            for h in 0..heads {
                let c = h * dh..(h + 1) * dh;
                let qb = qm.slice(s![r.clone(), c.clone()]);
                let kb = km.slice(s![r.clone(), c.clone()]);
                let vb = vm.slice(s![r.clone(), c.clone()]);
                general_mat_mul(scale, &qb, &kb.t(), 0.0, &mut scores);
                let mut p = scores.clone();
                softmax_rows_inplace(&mut p);
                let mut ob = out.slice_mut(s![r.clone(), c.clone()]);
                general_mat_mul(1.0, &p, &vb, 0.0, &mut ob);
                probs.push(p);
            }
        }
        let rg = self.rg(&[q, k, v]);
        let var = self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
            },
            rg,
        );
        self.attention.push((var, probs));
        var
    }

    /// Reverse pass seeded with `d output / d var` for each `(var, grad)`.
    /// Returns the gradient of every node that requires one (`None`
    /// elsewhere or when no path reaches it).
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(g.dim(), self.value(*v).dim(), "seed gradient shape");
            accumulate(&mut grads[v.0], g.view());
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(a) {
                    let ga = g.dot(&self.value(*b).t());
                    accumulate(&mut grads[a.0], ga.view());
                }
                if wants(b) {
                    let gb = self.value(*a).t().dot(g);
                    accumulate(&mut grads[b.0], gb.view());
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g.view());
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], g.view());
                }
            }
            Op::AddRow(a, row) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g.view());
                }
                if wants(row) {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[row.0], gr.view());
                }
            }
            Op::MulRow(a, row) => {
                if wants(a) {
                    let ga = g * self.value(*row);
                    accumulate(&mut grads[a.0], ga.view());
                }
                if wants(row) {
                    let gr = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[row.0], gr.view());
                }
            }
            Op::Scale(a, c) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], (g * *c).view());
                }
            }
            Op::Gelu(a) => {
                if wants(a) {
                    let mut ga = self.value(*a).mapv(gelu_grad);
                    ga *= g;
                    accumulate(&mut grads[a.0], ga.view());
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if wants(x) {
                    let y = &node.value;
                    let d = y.ncols() as f64;
                    let mut gx = Mat::zeros(y.dim());
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gr.sum() / d;
                        let mean_gy = gr.dot(&yr) / d;
                        let mut out = gx.row_mut(r);
                        Zip::from(&mut out).and(&gr).and(&yr).for_each(|o, &gv, &yv| {
                            *o = is * (gv - mean_g - yv * mean_gy);
                        });
                    }
                    accumulate(&mut grads[x.0], gx.view());
                }
            }
            Op::L2NormRows { x, norms } => {
                if wants(x) {
                    let y = &node.value;
                    let mut gx = Mat::zeros(y.dim());
                    for (r, n) in norms.iter().enumerate() {
                        let dot = g.row(r).dot(&y.row(r));
                        let mut out = gx.row_mut(r);
                        Zip::from(&mut out)
                            .and(&g.row(r))
                            .and(&y.row(r))
                            .for_each(|o, &gv, &yv| *o = (gv - yv * dot) / n);
                    }
                    accumulate(&mut grads[x.0], gx.view());
                }
            }
            Op::L2NormCols { x, norms } => {
                if wants(x) {
                    let y = &node.value;
                    let mut gx = Mat::zeros(y.dim());
                    for (c, n) in norms.iter().enumerate() {
                        let dot = g.column(c).dot(&y.column(c));
                        let mut out = gx.column_mut(c);
                        Zip::from(&mut out)
                            .and(&g.column(c))
                            .and(&y.column(c))
                            .for_each(|o, &gv, &yv| *o = (gv - yv * dot) / n);
                    }
                    accumulate(&mut grads[x.0], gx.view());
                }
            }
            Op::SliceCols { x, start } => {
                if wants(x) {
                    let src = self.value(*x);
                    let slot = grads[x.0].get_or_insert_with(|| Mat::zeros(src.dim()));
                    let mut view = slot.slice_mut(s![.., *start..*start + g.ncols()]);
                    view += g;
                }
            }
            Op::GatherRows { x, rows } => {
                if wants(x) {
                    let src = self.value(*x);
                    let slot = grads[x.0].get_or_insert_with(|| Mat::zeros(src.dim()));
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = slot.row_mut(r);
                        dst += &g.row(k);
                    }
                }
            }
            Op::AssembleTokens {
                patches,
                cls,
                pos,
                batch,
            } => {
                let seq = self.value(*pos).nrows();
                let n = seq - 1;
                let d = g.ncols();
                if wants(patches) {
                    let mut gp = Mat::zeros((batch * n, d));
                    for b in 0..*batch {
                        gp.slice_mut(s![b * n..(b + 1) * n, ..])
                            .assign(&g.slice(s![b * seq + 1..(b + 1) * seq, ..]));
                    }
                    accumulate(&mut grads[patches.0], gp.view());
                }
                if wants(cls) || wants(pos) {
                    let mut gpos = Mat::zeros((seq, d));
                    for b in 0..*batch {
                        gpos += &g.slice(s![b * seq..(b + 1) * seq, ..]);
                    }
                    if wants(cls) {
                        let gc = gpos.slice(s![0..1, ..]).to_owned();
                        accumulate(&mut grads[cls.0], gc.view());
                    }
                    if wants(pos) {
                        accumulate(&mut grads[pos.0], gpos.view());
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
            } => {
                let probs = self
                    .attention_probs(Var(i))
                    .expect("attention node records probabilities");
                let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qm.ncols();
                let seq = qm.nrows() / batch;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Mat::zeros(qm.dim());
                let mut gk = Mat::zeros(km.dim());
                let mut gv = Mat::zeros(vm.dim());
                let mut dp = Mat::zeros((seq, seq));
                for b in 0..*batch {
                    let r = b * seq..(b + 1) * seq;
                    for h in 0..*heads {
                        let c = h * dh..(h + 1) * dh;
                        let p = &probs[b * heads + h];
                        let go = g.slice(s![r.clone(), c.clone()]);
                        let vb = vm.slice(s![r.clone(), c.clone()]);
                        let mut gvb = gv.slice_mut(s![r.clone(), c.clone()]);
                        general_mat_mul(1.0, &p.t(), &go, 0.0, &mut gvb);
                        general_mat_mul(1.0, &go, &vb.t(), 0.0, &mut dp);
                        // softmax backward: dS = P * (dP - rowsum(dP * P))
                        for (mut dprow, prow) in dp.rows_mut().into_iter().zip(p.rows()) {
                            let inner = dprow.dot(&prow);
                            Zip::from(&mut dprow)
                                .and(&prow)
                                .for_each(|x, &pv| *x = pv * (*x - inner));
                        }
                        let qb = qm.slice(s![r.clone(), c.clone()]);
                        let kb = km.slice(s![r.clone(), c.clone()]);
                        let mut gqb = gq.slice_mut(s![r.clone(), c.clone()]);
                        general_mat_mul(scale, &dp, &kb, 0.0, &mut gqb);
                        let mut gkb = gk.slice_mut(s![r.clone(), c.clone()]);
                        general_mat_mul(scale, &dp.t(), &qb, 0.0, &mut gkb);
                    }
                }
                if wants(q) {
                    accumulate(&mut grads[q.0], gq.view());
                }
                if wants(k) {
                    accumulate(&mut grads[k.0], gk.view());
                }
                if wants(v) {
                    accumulate(&mut grads[v.0], gv.view());
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Mat>, g: ArrayView2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g.to_owned()),
    }
}

pub fn softmax_rows_inplace(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}
