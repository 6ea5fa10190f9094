//! Single-head, multi-head and windowed ("speech") multi-head self-attention.
//!
//! The windowed variant restricts token `t` to keys and values in
//! `[max(0, t - half), min(T - 1, t + half)]` with `half = floor(tw / 2)`.
//! Boundary tokens get a shorter span; nothing is padded.

use crate::error::{Error, Result};
use crate::tensor::{matmul, softmax_in_place, softmax_rows, Matrix};

/// Divisor applied to query-key dot products.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScaleMode {
    /// Divide by `d_h`.
    Dh,
    /// Divide by `sqrt(d_h)`.
    #[default]
    SqrtDh,
}

impl ScaleMode {
    pub fn divisor(self, head_dim: usize) -> f64 {
        match self {
            ScaleMode::Dh => head_dim as f64,
            ScaleMode::SqrtDh => (head_dim as f64).sqrt(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScaleMode::Dh => "dh",
            ScaleMode::SqrtDh => "sqrt_dh",
        }
    }
}

impl std::str::FromStr for ScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dh" => Ok(ScaleMode::Dh),
            "sqrt_dh" => Ok(ScaleMode::SqrtDh),
            other => Err(Error::config(format!(
                "unknown scale_mode {other:?} (expected dh or sqrt_dh)"
            ))),
        }
    }
}

/// Query/key/value projections (`d_m x d_m`) and the head count.
///
/// Generic over the parameter handle so the same layout can hold plain
/// matrices or autodiff tape nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<P = Matrix> {
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub num_heads: usize,
}

impl AttentionParams {
    pub fn new(wq: Matrix, wk: Matrix, wv: Matrix, num_heads: usize) -> Result<Self> {
        let p = Self {
            wq,
            wk,
            wv,
            num_heads,
        };
        p.head_dim()?;
        Ok(p)
    }

    pub fn model_dim(&self) -> usize {
        self.wq.rows()
    }

    /// `d_m / h`; errors unless the split is exact and all projections are square
    /// of the same size.
    pub fn head_dim(&self) -> Result<usize> {
        let d = self.wq.rows();
        for w in [&self.wq, &self.wk, &self.wv] {
            if w.shape() != (d, d) {
                return Err(Error::shape("attention projection", (d, d), w.shape()));
            }
        }
        head_dim(d, self.num_heads)
    }

    /// Applies the same column permutation of heads to all three projections.
    pub fn permute_heads(&self, order: &[usize]) -> Result<Self> {
        let dh = self.head_dim()?;
        if order.len() != self.num_heads {
            return Err(Error::invalid("head permutation has wrong length"));
        }
        let permute = |w: &Matrix| -> Result<Matrix> {
            let blocks = order
                .iter()
                .map(|&h| w.col_block(h * dh, dh))
                .collect::<Result<Vec<_>>>()?;
            Matrix::concat_cols(&blocks)
        };
        Ok(Self {
            wq: permute(&self.wq)?,
            wk: permute(&self.wk)?,
            wv: permute(&self.wv)?,
            num_heads: self.num_heads,
        })
    }
}

pub fn head_dim(model_dim: usize, num_heads: usize) -> Result<usize> {
    if num_heads == 0 || !model_dim.is_multiple_of(num_heads) {
        return Err(Error::config(format!(
            "model width {model_dim} is not divisible by {num_heads} heads"
        )));
    }
    Ok(model_dim / num_heads)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    tw: usize,
    half: usize,
}

impl WindowSpec {
    pub fn new(tw: usize) -> Result<Self> {
        if tw == 0 {
            return Err(Error::invalid(
                "attention window must be at least one token",
            ));
        }
        Ok(Self { tw, half: tw / 2 })
    }

    /// A window guaranteed to cover a sequence of `t` tokens from any position.
    pub fn covering(t: usize) -> Self {
        let tw = (2 * t).max(1);
        Self { tw, half: tw / 2 }
    }

    pub fn tw(&self) -> usize {
        self.tw
    }

    pub fn half(&self) -> usize {
        self.half
    }

    /// Inclusive span `[lo, hi]` of keys visible to token `t` in a length-`len` sequence.
    #[inline]
    pub fn span(&self, t: usize, len: usize) -> (usize, usize) {
        (t.saturating_sub(self.half), (t + self.half).min(len - 1))
    }

    pub fn covers(&self, len: usize) -> bool {
        len == 0 || self.half >= len - 1
    }
}

fn check_qkv(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::shape("attention q/k", q.shape(), k.shape()));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape("attention k/v", k.shape(), v.shape()));
    }
    Ok(())
}

/// Single-head attention: `softmax(q kᵀ / s) v`.
pub fn ssa(q: &Matrix, k: &Matrix, v: &Matrix, scale: ScaleMode) -> Result<Matrix> {
    check_qkv(q, k, v)?;
    let scores = matmul(q, &k.transpose())?.scale(1.0 / scale.divisor(q.cols()));
    matmul(&softmax_rows(&scores), v)
}

/// Result of one windowed attention head, with the per-token weights kept
/// for the backward pass.
pub(crate) struct HeadOutput {
    pub out: Matrix,
    /// `weights[t]` holds the softmax weights over the span of token `t`.
    pub weights: Vec<Vec<f64>>,
}

/// Windowed single-head attention. `window = None` means full attention.
/// Sums over a span run left to right.
pub(crate) fn windowed_head(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    window: Option<WindowSpec>,
    divisor: f64,
) -> Result<HeadOutput> {
    check_qkv(q, k, v)?;
    if q.rows() != k.rows() {
        return Err(Error::shape("self-attention q/k", q.shape(), k.shape()));
    }
    let len = q.rows();
    let mut out = Matrix::zeros(len, v.cols());
    let mut weights = Vec::with_capacity(len);
    for t in 0..len {
        let (lo, hi) = match window {
            Some(w) => w.span(t, len),
            None => (0, len - 1),
        };
        let qt = q.row(t);
        let mut w: Vec<f64> = (lo..=hi).map(|j| dot(qt, k.row(j)) / divisor).collect();
        softmax_in_place(&mut w);
        let dst = out.row_mut(t);
        for (j, wj) in (lo..=hi).zip(&w) {
            for (o, vv) in dst.iter_mut().zip(v.row(j)) {
                *o += wj * vv;
            }
        }
        weights.push(w);
    }
    Ok(HeadOutput { out, weights })
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Projected {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    dh: usize,
}

fn project(x: &Matrix, params: &AttentionParams) -> Result<Projected> {
    let dh = params.head_dim()?;
    if x.cols() != params.model_dim() {
        return Err(Error::shape(
            "attention input",
            x.shape(),
            params.wq.shape(),
        ));
    }
    Ok(Projected {
        q: matmul(x, &params.wq)?,
        k: matmul(x, &params.wk)?,
        v: matmul(x, &params.wv)?,
        dh,
    })
}

fn per_head(
    x: &Matrix,
    params: &AttentionParams,
    mut head: impl FnMut(&Matrix, &Matrix, &Matrix, usize) -> Result<Matrix>,
) -> Result<Matrix> {
    let p = project(x, params)?;
    let outs = (0..params.num_heads)
        .map(|h| {
            let s = h * p.dh;
            head(
                &p.q.col_block(s, p.dh)?,
                &p.k.col_block(s, p.dh)?,
                &p.v.col_block(s, p.dh)?,
                p.dh,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Matrix::concat_cols(&outs)
}

/// Multi-head self-attention over the whole sequence. Heads are concatenated;
/// there is no output projection.
pub fn msa(x: &Matrix, params: &AttentionParams, scale: ScaleMode) -> Result<Matrix> {
    per_head(x, params, |q, k, v, _| ssa(q, k, v, scale))
}

/// Multi-head self-attention with each token restricted to its window.
pub fn speech_msa(
    x: &Matrix,
    params: &AttentionParams,
    window: WindowSpec,
    scale: ScaleMode,
) -> Result<Matrix> {
    per_head(x, params, |q, k, v, dh| {
        Ok(windowed_head(q, k, v, Some(window), scale.divisor(dh))?.out)
    })
}

/// Reference for [`speech_msa`]: full attention with out-of-band scores set
/// to `-inf` before the softmax. Quadratic in memory; meant for checking.
pub fn band_mask_oracle(
    x: &Matrix,
    params: &AttentionParams,
    window: WindowSpec,
    scale: ScaleMode,
) -> Result<Matrix> {
    per_head(x, params, |q, k, v, dh| {
        let mut scores = matmul(q, &k.transpose())?.scale(1.0 / scale.divisor(dh));
        let len = scores.rows();
        for t in 0..len {
            for j in 0..len {
                if t.abs_diff(j) > window.half() {
                    scores.set(t, j, f64::NEG_INFINITY);
                }
            }
        }
        // softmax_rows expects finite input; the max over a row is always
        // finite because the diagonal is inside the band.
        let mut probs = scores;
        for t in 0..len {
            softmax_in_place(probs.row_mut(t));
        }
        matmul(&probs, v)
    })
}

/// Attention weights of every (head, token) pair of a windowed layer.
pub fn speech_msa_weights(
    x: &Matrix,
    params: &AttentionParams,
    window: WindowSpec,
    scale: ScaleMode,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let p = project(x, params)?;
    (0..params.num_heads)
        .map(|h| {
            let s = h * p.dh;
            let head = windowed_head(
                &p.q.col_block(s, p.dh)?,
                &p.k.col_block(s, p.dh)?,
                &p.v.col_block(s, p.dh)?,
                Some(window),
                scale.divisor(p.dh),
            )?;
            Ok(head.weights)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::random_uniform(rows, cols, 1.0, rng)
    }

    fn rand_params(d: usize, h: usize, rng: &mut ChaCha8Rng) -> AttentionParams {
        AttentionParams::new(
            rand_matrix(d, d, rng),
            rand_matrix(d, d, rng),
            rand_matrix(d, d, rng),
            h,
        )
        .unwrap()
    }

    /// Explicit per-pair dot products and an explicit softmax.
    fn scalar_ssa(q: &Matrix, k: &Matrix, v: &Matrix, divisor: f64) -> Matrix {
        let n = q.rows();
        let mut out = Matrix::zeros(n, v.cols());
        for t in 0..n {
            let mut scores = vec![0.0; k.rows()];
            for (j, s) in scores.iter_mut().enumerate() {
                let mut acc = 0.0;
                for c in 0..q.cols() {
                    acc += q.get(t, c) * k.get(j, c);
                }
                *s = acc / divisor;
            }
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for c in 0..v.cols() {
                let mut acc = 0.0;
                for j in 0..k.rows() {
                    acc += exps[j] / total * v.get(j, c);
                }
                out.set(t, c, acc);
            }
        }
        out
    }

    fn scalar_msa(x: &Matrix, p: &AttentionParams, divisor: f64) -> Matrix {
        let dh = p.head_dim().unwrap();
        let q = matmul(x, &p.wq).unwrap();
        let k = matmul(x, &p.wk).unwrap();
        let v = matmul(x, &p.wv).unwrap();
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for h in 0..p.num_heads {
            let o = scalar_ssa(
                &q.col_block(h * dh, dh).unwrap(),
                &k.col_block(h * dh, dh).unwrap(),
                &v.col_block(h * dh, dh).unwrap(),
                divisor,
            );
            for t in 0..x.rows() {
                for c in 0..dh {
                    out.set(t, h * dh + c, o.get(t, c));
                }
            }
        }
        out
    }

    #[test]
    fn ssa_uniform_when_keys_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_matrix(5, 4, &mut rng);
        let key = rand_matrix(1, 4, &mut rng);
        let k = Matrix::from_rows(&vec![key.row(0).to_vec(); 5]).unwrap();
        let v = rand_matrix(5, 4, &mut rng);
        let out = ssa(&q, &k, &v, ScaleMode::SqrtDh).unwrap();
        let mean = v.mean_rows();
        for t in 0..5 {
            for c in 0..4 {
                assert!((out.get(t, c) - mean.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ssa_single_token_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k, v) = (
            rand_matrix(1, 3, &mut rng),
            rand_matrix(1, 3, &mut rng),
            rand_matrix(1, 3, &mut rng),
        );
        assert_eq!(ssa(&q, &k, &v, ScaleMode::Dh).unwrap(), v);
    }

    #[test]
    fn ssa_matches_scalar_oracle_both_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (q, k, v) = (
            rand_matrix(6, 4, &mut rng),
            rand_matrix(6, 4, &mut rng),
            rand_matrix(6, 4, &mut rng),
        );
        for mode in [ScaleMode::Dh, ScaleMode::SqrtDh] {
            let got = ssa(&q, &k, &v, mode).unwrap();
            assert!(got.max_abs_diff(&scalar_ssa(&q, &k, &v, mode.divisor(4))) < 1e-12);
        }
        assert!(ssa(&q, &k, &rand_matrix(5, 4, &mut rng), ScaleMode::Dh).is_err());
    }

    #[test]
    fn msa_single_head_is_projected_ssa() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_matrix(7, 6, &mut rng);
        let p = rand_params(6, 1, &mut rng);
        let want = ssa(
            &matmul(&x, &p.wq).unwrap(),
            &matmul(&x, &p.wk).unwrap(),
            &matmul(&x, &p.wv).unwrap(),
            ScaleMode::SqrtDh,
        )
        .unwrap();
        assert!(msa(&x, &p, ScaleMode::SqrtDh).unwrap().max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn msa_zero_scores_average_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_matrix(9, 8, &mut rng);
        let p = AttentionParams::new(
            Matrix::zeros(8, 8),
            Matrix::zeros(8, 8),
            Matrix::identity(8),
            2,
        )
        .unwrap();
        let out = msa(&x, &p, ScaleMode::SqrtDh).unwrap();
        let mean = x.mean_rows();
        for t in 0..9 {
            for c in 0..8 {
                assert!((out.get(t, c) - mean.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn msa_matches_per_head_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_matrix(8, 16, &mut rng);
        let p = rand_params(16, 4, &mut rng);
        for mode in [ScaleMode::Dh, ScaleMode::SqrtDh] {
            let got = msa(&x, &p, mode).unwrap();
            assert!(got.max_abs_diff(&scalar_msa(&x, &p, mode.divisor(4))) < 1e-12);
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 6;
        let r = AttentionParams::new(
            rand_matrix(d, d, &mut rng),
            rand_matrix(d, d, &mut rng),
            rand_matrix(d, d, &mut rng),
            4,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn window_span_clamps_at_edges() {
        let w = WindowSpec::new(5).unwrap();
        assert_eq!(w.half(), 2);
        assert_eq!(w.span(0, 10), (0, 2));
        assert_eq!(w.span(5, 10), (3, 7));
        assert_eq!(w.span(9, 10), (7, 9));
        let w = WindowSpec::new(8).unwrap();
        assert_eq!(w.span(4, 10), (0, 8));
        assert!(WindowSpec::new(0).is_err());
        assert!(WindowSpec::covering(7).covers(7));
    }

    #[test]
    fn speech_msa_full_window_matches_msa() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_matrix(11, 8, &mut rng);
        let p = rand_params(8, 2, &mut rng);
        let full = msa(&x, &p, ScaleMode::SqrtDh).unwrap();
        let w = WindowSpec::new(22).unwrap();
        assert!(
            speech_msa(&x, &p, w, ScaleMode::SqrtDh)
                .unwrap()
                .max_abs_diff(&full)
                < 1e-12
        );
        assert!(
            band_mask_oracle(&x, &p, w, ScaleMode::SqrtDh)
                .unwrap()
                .max_abs_diff(&full)
                < 1e-12
        );
    }

    #[test]
    fn speech_msa_unit_window_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_matrix(10, 8, &mut rng);
        let p = rand_params(8, 4, &mut rng);
        let w = WindowSpec::new(1).unwrap();
        let xv = matmul(&x, &p.wv).unwrap();
        assert!(
            speech_msa(&x, &p, w, ScaleMode::Dh)
                .unwrap()
                .max_abs_diff(&xv)
                < 1e-15
        );
        assert!(
            band_mask_oracle(&x, &p, w, ScaleMode::Dh)
                .unwrap()
                .max_abs_diff(&xv)
                < 1e-15
        );
    }

    #[test]
    fn speech_msa_matches_band_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_matrix(12, 8, &mut rng);
        let p = rand_params(8, 2, &mut rng);
        let w = WindowSpec::new(5).unwrap();
        let a = speech_msa(&x, &p, w, ScaleMode::SqrtDh).unwrap();
        let b = band_mask_oracle(&x, &p, w, ScaleMode::SqrtDh).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn locality_of_speech_msa() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_matrix(15, 8, &mut rng);
        let p = rand_params(8, 2, &mut rng);
        let w = WindowSpec::new(5).unwrap();
        let base = speech_msa(&x, &p, w, ScaleMode::SqrtDh).unwrap();
        for j in 0..15 {
            let mut xp = x.clone();
            for c in 0..8 {
                let v = xp.get(j, c) + rng.random_range(0.5..1.5);
                xp.set(j, c, v);
            }
            let out = speech_msa(&xp, &p, w, ScaleMode::SqrtDh).unwrap();
            for t in 0..15 {
                let changed = out.row(t) != base.row(t);
                if t.abs_diff(j) > w.half() {
                    assert!(!changed, "token {t} moved when {j} was perturbed");
                } else {
                    assert!(changed, "token {t} ignored in-window token {j}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(t in 1usize..20, tw in 1usize..10, h in prop::sample::select(vec![1usize, 2, 4]), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_matrix(t, 8, &mut rng);
            let p = rand_params(8, h, &mut rng);
            let w = WindowSpec::new(tw).unwrap();
            for head in speech_msa_weights(&x, &p, w, ScaleMode::SqrtDh).unwrap() {
                for row in head {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn head_permutation_permutes_outputs(seed in any::<u64>(), tw in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_matrix(9, 8, &mut rng);
            let p = rand_params(8, 4, &mut rng);
            let order = [2usize, 0, 3, 1];
            let w = WindowSpec::new(tw).unwrap();
            let out = speech_msa(&x, &p, w, ScaleMode::SqrtDh).unwrap();
            let permuted = speech_msa(&x, &p.permute_heads(&order).unwrap(), w, ScaleMode::SqrtDh).unwrap();
            for (slot, &h) in order.iter().enumerate() {
                let a = permuted.col_block(slot * 2, 2).unwrap();
                let b = out.col_block(h * 2, 2).unwrap();
                prop_assert!(a.max_abs_diff(&b) < 1e-12);
            }
        }
    }
}
