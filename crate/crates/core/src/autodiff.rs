//! A small reverse-mode tape over the encoder's operations, and a central
//! finite-difference checker for the gradients it produces.
//!
//! Every op records its inputs and whatever intermediates its backward rule
//! needs (softmax probabilities, attention weights). `backward` seeds the
//! output with an upstream gradient and walks the tape in reverse.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{dot, windowed_head, WindowSpec};
use crate::error::{Error, Result};
use crate::tensor::{self, row_moments, softmax_rows, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Add(NodeId, NodeId),
    AddConst(NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    AvgPool {
        x: NodeId,
        m: usize,
    },
    MeanRows(NodeId),
    ColBlock {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        window: Option<WindowSpec>,
        divisor: f64,
        weights: Vec<Vec<f64>>,
    },
    CrossEntropy {
        logits: NodeId,
        target: usize,
        probs: Matrix,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::Usage(format!("node {} was not recorded on this tape", id.0)))
    }

    pub fn value(&self, id: NodeId) -> Result<&Matrix> {
        Ok(&self.node(id)?.value)
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a)?, self.value(b)?)?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `x * w + b` with `b` a `1 x n` node.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let bias = self.value(b)?;
        if bias.rows() != 1 {
            return Err(Error::shape("linear bias", (1, bias.cols()), bias.shape()));
        }
        let v = tensor::linear(self.value(x)?, self.value(w)?, bias.data())?;
        Ok(self.push(v, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a)?.add(self.value(b)?)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a constant that does not receive a gradient.
    pub fn add_const(&mut self, a: NodeId, c: &Matrix) -> Result<NodeId> {
        let v = self.value(a)?.add(c)?;
        Ok(self.push(v, Op::AddConst(a)))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a)?.relu();
        Ok(self.push(v, Op::Relu(a)))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = softmax_rows(self.value(a)?);
        Ok(self.push(v, Op::SoftmaxRows(a)))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let v = tensor::layer_norm(
            self.value(x)?,
            self.value(gamma)?.data(),
            self.value(beta)?.data(),
            eps,
        )?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
        ))
    }

    pub fn avg_pool(&mut self, x: NodeId, m: usize) -> Result<NodeId> {
        let v = tensor::avg_pool_groups(self.value(x)?, m)?;
        Ok(self.push(v, Op::AvgPool { x, m }))
    }

    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x)?.mean_rows();
        Ok(self.push(v, Op::MeanRows(x)))
    }

    pub fn col_block(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let v = self.value(x)?.col_block(start, width)?;
        Ok(self.push(v, Op::ColBlock { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values = parts
            .iter()
            .map(|&p| self.value(p).cloned())
            .collect::<Result<Vec<_>>>()?;
        let v = Matrix::concat_cols(&values)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// One attention head; `window = None` attends over the whole sequence.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        window: Option<WindowSpec>,
        divisor: f64,
    ) -> Result<NodeId> {
        let head = windowed_head(
            self.value(q)?,
            self.value(k)?,
            self.value(v)?,
            window,
            divisor,
        )?;
        Ok(self.push(
            head.out,
            Op::Attention {
                q,
                k,
                v,
                window,
                divisor,
                weights: head.weights,
            },
        ))
    }

    /// `-log softmax(logits)[target]` for a single-row logit vector.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let l = self.value(logits)?;
        if l.rows() != 1 || target >= l.cols() {
            return Err(Error::invalid(format!(
                "cross entropy needs 1 x C logits and target < C, got {:?} and {target}",
                l.shape()
            )));
        }
        let probs = softmax_rows(l);
        let loss = Matrix::row_vector(&[-probs.get(0, target).ln()]);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
        ))
    }

    /// Gradients of `sum(upstream ⊙ output)` with respect to every node.
    pub fn backward(&self, output: NodeId, upstream: &Matrix) -> Result<Gradients> {
        let out = self.node(output)?;
        if out.value.shape() != upstream.shape() {
            return Err(Error::shape(
                "backward seed",
                out.value.shape(),
                upstream.shape(),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(upstream.clone());

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |id: NodeId, contrib: Matrix| match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    acc(*a, tensor::matmul(&g, &bv.transpose())?);
                    acc(*b, tensor::matmul(&av.transpose(), &g)?);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                    acc(*x, tensor::matmul(&g, &wv.transpose())?);
                    acc(*w, tensor::matmul(&xv.transpose(), &g)?);
                    acc(*b, column_sums(&g));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::AddConst(a) => acc(*a, g.clone()),
                Op::Relu(a) => {
                    let input = &self.nodes[a.0].value;
                    let mut d = g.clone();
                    for (dv, xv) in d.data_mut().iter_mut().zip(input.data()) {
                        if *xv <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    acc(*a, d);
                }
                Op::SoftmaxRows(a) => {
                    let p = &node.value;
                    let mut d = Matrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let inner = dot(g.row(r), p.row(r));
                        for c in 0..p.cols() {
                            d.set(r, c, p.get(r, c) * (g.get(r, c) - inner));
                        }
                    }
                    acc(*a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    eps,
                } => {
                    let (dx, dgamma, dbeta) = layer_norm_backward(
                        &self.nodes[x.0].value,
                        self.nodes[gamma.0].value.data(),
                        *eps,
                        &g,
                    );
                    acc(*x, dx);
                    acc(*gamma, dgamma);
                    acc(*beta, dbeta);
                }
                Op::AvgPool { x, m } => {
                    let rows = self.nodes[x.0].value.rows();
                    let mut d = Matrix::zeros(rows, g.cols());
                    for r in 0..rows {
                        let group = r / m;
                        let count = ((group + 1) * m).min(rows) - group * m;
                        for (dv, gv) in d.row_mut(r).iter_mut().zip(g.row(group)) {
                            *dv = gv / count as f64;
                        }
                    }
                    acc(*x, d);
                }
                Op::MeanRows(x) => {
                    let rows = self.nodes[x.0].value.rows();
                    let mut d = Matrix::zeros(rows, g.cols());
                    for r in 0..rows {
                        for (dv, gv) in d.row_mut(r).iter_mut().zip(g.row(0)) {
                            *dv = gv / rows as f64;
                        }
                    }
                    acc(*x, d);
                }
                Op::ColBlock { x, start } => {
                    let (rows, cols) = self.nodes[x.0].value.shape();
                    let mut d = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(*x, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let width = self.nodes[p.0].value.cols();
                        acc(*p, g.col_block(offset, width)?);
                        offset += width;
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    window,
                    divisor,
                    weights,
                } => {
                    let (dq, dk, dv) = attention_backward(
                        &self.nodes[q.0].value,
                        &self.nodes[k.0].value,
                        &self.nodes[v.0].value,
                        *window,
                        *divisor,
                        weights,
                        &g,
                    );
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*v, dv);
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let mut d = probs.scale(g.get(0, 0));
                    let t = d.get(0, *target) - g.get(0, 0);
                    d.set(0, *target, t);
                    acc(*logits, d);
                }
            }
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.unwrap_or_else(|| Matrix::zeros(n.value.rows(), n.value.cols())))
            .collect();
        Ok(Gradients { grads })
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

fn layer_norm_backward(
    x: &Matrix,
    gamma: &[f64],
    eps: f64,
    g: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let (rows, cols) = x.shape();
    let n = cols as f64;
    let mut dx = Matrix::zeros(rows, cols);
    let mut dgamma = Matrix::zeros(1, cols);
    let mut dbeta = Matrix::zeros(1, cols);
    for r in 0..rows {
        let (mean, inv_std) = row_moments(x.row(r), eps);
        let xhat: Vec<f64> = x.row(r).iter().map(|v| (v - mean) * inv_std).collect();
        let dxhat: Vec<f64> = g.row(r).iter().zip(gamma).map(|(gv, ga)| gv * ga).collect();
        let sum_d: f64 = dxhat.iter().sum();
        let sum_dx: f64 = dot(&dxhat, &xhat);
        for c in 0..cols {
            dgamma.data_mut()[c] += g.get(r, c) * xhat[c];
            dbeta.data_mut()[c] += g.get(r, c);
            dx.set(
                r,
                c,
                inv_std / n * (n * dxhat[c] - sum_d - xhat[c] * sum_dx),
            );
        }
    }
    (dx, dgamma, dbeta)
}

fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    window: Option<WindowSpec>,
    divisor: f64,
    weights: &[Vec<f64>],
    g: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let len = q.rows();
    let mut dq = Matrix::zeros(q.rows(), q.cols());
    let mut dk = Matrix::zeros(k.rows(), k.cols());
    let mut dv = Matrix::zeros(v.rows(), v.cols());
    for t in 0..len {
        let (lo, hi) = match window {
            Some(w) => w.span(t, len),
            None => (0, len - 1),
        };
        let w = &weights[t];
        let gt = g.row(t);
        let dp: Vec<f64> = (lo..=hi).map(|j| dot(gt, v.row(j))).collect();
        let inner = dot(&dp, w);
        for (i, j) in (lo..=hi).enumerate() {
            for (d, gv) in dv.row_mut(j).iter_mut().zip(gt) {
                *d += w[i] * gv;
            }
            let ds = w[i] * (dp[i] - inner) / divisor;
            for (d, kv) in dq.row_mut(t).iter_mut().zip(k.row(j)) {
                *d += ds * kv;
            }
            for (d, qv) in dk.row_mut(j).iter_mut().zip(q.row(t)) {
                *d += ds * qv;
            }
        }
    }
    (dq, dk, dv)
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Result<&Matrix> {
        self.grads
            .get(id.0)
            .ok_or_else(|| Error::Usage(format!("no gradient recorded for node {}", id.0)))
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub threshold: f64,
    /// Coordinates sampled per group once the total parameter count exceeds
    /// `exhaustive_limit`.
    pub samples_per_group: usize,
    pub exhaustive_limit: usize,
    pub seed: u64,
    /// Steps of a five-point (fourth-order) central stencil tried, in order,
    /// for a coordinate that fails at `eps`. Gradients below roughly `1e-6`
    /// are lost to cancellation at `eps = 1e-5`, and a plain central
    /// difference at a larger step carries too much truncation error. A
    /// wrong gradient stays wrong at every step.
    pub fallback_eps: Vec<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            threshold: 1e-4,
            samples_per_group: 50,
            exhaustive_limit: 10_000,
            seed: 0x5eed,
            fallback_eps: vec![1e-4, 1e-3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub max_rel_err: f64,
    pub eps: f64,
    pub coords_checked: usize,
    /// Coordinates whose stencil crossed a non-differentiable point and were
    /// left out of `max_rel_err`.
    pub coords_skipped: usize,
    /// Coordinates that failed at the primary step and were re-measured at
    /// the fallback steps.
    pub coords_refined: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }

    /// Prefixes every group name, for merging reports.
    pub fn prefixed(mut self, prefix: &str) -> Self {
        for g in &mut self.groups {
            g.group = format!("{prefix}{}", g.group);
        }
        self
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "{}\t{:.3e}\t{}",
                g.group,
                g.max_rel_err,
                if g.pass { "pass" } else { "FAIL" }
            )?;
            if g.coords_refined > 0 {
                writeln!(
                    f,
                    "{}\trefined {} of {} coordinates, largest eps {:.0e}",
                    g.group, g.coords_refined, g.coords_checked, g.eps
                )?;
            }
            if g.coords_skipped > 0 {
                writeln!(
                    f,
                    "{}\tskipped {} of {} coordinates at kinks",
                    g.group, g.coords_skipped, g.coords_checked
                )?;
            }
        }
        Ok(())
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic[i]` against central differences of `loss` around
/// `params[i]`. Small problems are checked exhaustively; larger ones sample
/// coordinates per group with a fixed seed.
pub fn finite_diff_check<F>(
    mut loss: F,
    params: &[(String, Matrix)],
    analytic: &[Matrix],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Matrix]) -> Result<f64>,
{
    finite_diff_check_piecewise(|w| Ok((loss(w)?, 0)), params, analytic, opts)
}

/// As [`finite_diff_check`] for piecewise-smooth losses. `loss` also returns
/// an identifier of the smooth piece it was evaluated in (for instance a hash
/// of ReLU sign patterns). A coordinate whose two stencil points land in
/// different pieces has no valid central difference and is skipped.
pub fn finite_diff_check_piecewise<F>(
    mut loss: F,
    params: &[(String, Matrix)],
    analytic: &[Matrix],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Matrix]) -> Result<(f64, u64)>,
{
    if opts.eps <= 0.0 || !opts.eps.is_finite() {
        return Err(Error::invalid(format!(
            "finite-difference eps must be positive, got {}",
            opts.eps
        )));
    }
    if params.len() != analytic.len() {
        return Err(Error::invalid(
            "one analytic gradient per parameter group is required",
        ));
    }
    for ((name, p), a) in params.iter().zip(analytic) {
        if p.shape() != a.shape() {
            return Err(Error::invalid(format!(
                "{name}: parameter {:?} but gradient {:?}",
                p.shape(),
                a.shape()
            )));
        }
    }

    let total: usize = params.iter().map(|(_, p)| p.len()).sum();
    let exhaustive = total <= opts.exhaustive_limit;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Matrix> = params.iter().map(|(_, p)| p.clone()).collect();
    let mut eval = |work: &[Matrix]| -> Result<(f64, u64)> {
        let (v, piece) = loss(work)?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {v}")));
        }
        Ok((v, piece))
    };

    let mut groups = Vec::with_capacity(params.len());
    for (gi, (name, p)) in params.iter().enumerate() {
        let coords: Vec<usize> = if exhaustive || p.len() <= opts.samples_per_group {
            (0..p.len()).collect()
        } else {
            let mut c = sample(&mut rng, p.len(), opts.samples_per_group).into_vec();
            c.sort_unstable();
            c
        };
        let mut max_err = 0.0f64;
        let mut skipped = 0;
        let mut refined = 0;
        let mut eps_used = opts.eps;
        for &c in &coords {
            let a = analytic[gi].data()[c];
            // Central difference at step h with `points` = 1 (second order)
            // or 2 (five-point, fourth order). None when the stencil spans
            // more than one smooth piece.
            let mut central = |h: f64, points: usize| -> Result<Option<f64>> {
                let orig = p.data()[c];
                let mut f = [0.0; 4];
                let mut pieces = [0u64; 4];
                let offsets: &[f64] = if points == 1 {
                    &[1.0, -1.0]
                } else {
                    &[1.0, -1.0, 2.0, -2.0]
                };
                for (i, k) in offsets.iter().enumerate() {
                    work[gi].data_mut()[c] = orig + k * h;
                    (f[i], pieces[i]) = eval(&work)?;
                }
                work[gi].data_mut()[c] = orig;
                if pieces[..offsets.len()].iter().any(|&q| q != pieces[0]) {
                    return Ok(None);
                }
                Ok(Some(if points == 1 {
                    (f[0] - f[1]) / (2.0 * h)
                } else {
                    (8.0 * (f[0] - f[1]) - (f[2] - f[3])) / (12.0 * h)
                }))
            };
            let Some(numeric) = central(opts.eps, 1)? else {
                skipped += 1;
                continue;
            };
            let mut err = relative_error(a, numeric);
            if err > opts.threshold {
                for &h in &opts.fallback_eps {
                    let Some(n) = central(h, 2)? else { break };
                    let e = relative_error(a, n);
                    if e < err {
                        err = e;
                        eps_used = eps_used.max(h);
                    }
                    if err <= opts.threshold {
                        break;
                    }
                }
                refined += 1;
            }
            max_err = max_err.max(err);
        }
        groups.push(GroupCheck {
            group: name.clone(),
            max_rel_err: max_err,
            eps: eps_used,
            coords_checked: coords.len(),
            coords_skipped: skipped,
            coords_refined: refined,
            pass: max_err <= opts.threshold && skipped < coords.len(),
        });
    }
    Ok(GradCheckReport { groups })
}
