//! Encoder blocks, merging blocks, the four-stage hierarchical encoder and the
//! flat Transformer baseline.
//!
//! The forward pass is written once against the [`Ops`] trait and runs either
//! eagerly on matrices ([`Eager`]) or on an autodiff [`Tape`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::attention::{head_dim, msa, speech_msa, AttentionParams, ScaleMode, WindowSpec};
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::structure::{token_chain, StageSchedule, DEFAULT_HOP1_MS};
use crate::tensor::{self, sinusoidal_positions, Matrix, LAYER_NORM_EPS};

pub const DEFAULT_NUM_HEADS: usize = 8;
pub const DEFAULT_BASELINE_BLOCKS: usize = 12;
pub const DEFAULT_STAGE_BLOCKS: [usize; 4] = [2, 2, 4, 4];
pub const DEFAULT_NUM_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    SpeechFormer,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::SpeechFormer => "speechformer",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub num_heads: usize,
    /// One entry for the baseline, four (frame, phoneme, word, utterance)
    /// for the hierarchical encoder.
    pub blocks: Vec<usize>,
    /// Width multipliers of the three merging blocks. Ignored by the baseline.
    pub expand: [usize; 3],
    pub num_classes: usize,
    pub hop1_ms: f64,
    pub scale_mode: ScaleMode,
    pub ffn_ratio: f64,
}

impl ModelConfig {
    pub fn baseline(d_model: usize) -> Self {
        Self {
            variant: Variant::Baseline,
            d_model,
            num_heads: DEFAULT_NUM_HEADS,
            blocks: vec![DEFAULT_BASELINE_BLOCKS],
            expand: [1, 1, 1],
            num_classes: DEFAULT_NUM_CLASSES,
            hop1_ms: DEFAULT_HOP1_MS,
            scale_mode: ScaleMode::default(),
            ffn_ratio: 1.0,
        }
    }

    /// Small variant: blocks {2, 2, 4, 4}, no width expansion.
    pub fn speechformer_s(d_model: usize) -> Self {
        Self {
            variant: Variant::SpeechFormer,
            blocks: DEFAULT_STAGE_BLOCKS.to_vec(),
            ..Self::baseline(d_model)
        }
    }

    /// Base variant: as small, but the last merge doubles the width.
    pub fn speechformer_b(d_model: usize) -> Self {
        Self {
            expand: [1, 1, 2],
            ..Self::speechformer_s(d_model)
        }
    }

    pub fn num_stages(&self) -> usize {
        match self.variant {
            Variant::Baseline => 1,
            Variant::SpeechFormer => 4,
        }
    }

    /// Token width of each stage.
    pub fn stage_dims(&self) -> Vec<usize> {
        match self.variant {
            Variant::Baseline => vec![self.d_model],
            Variant::SpeechFormer => {
                let mut dims = vec![self.d_model];
                for r in self.expand {
                    dims.push(dims.last().unwrap() * r);
                }
                dims
            }
        }
    }

    pub fn final_dim(&self) -> usize {
        *self.stage_dims().last().unwrap()
    }

    pub fn ffn_hidden(&self, width: usize) -> usize {
        ((self.ffn_ratio * width as f64).round() as usize).max(1)
    }

    /// Checks everything that parameter and FLOP accounting depends on. Head
    /// divisibility and even widths are only needed to run the model.
    pub fn validate_dims(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::config("d_model must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if self.blocks.len() != self.num_stages() {
            return Err(Error::config(format!(
                "{} expects {} block counts, got {}",
                self.variant.as_str(),
                self.num_stages(),
                self.blocks.len()
            )));
        }
        if self.expand.contains(&0) {
            return Err(Error::config("expand factors must be at least 1"));
        }
        if !(self.ffn_ratio.is_finite() && self.ffn_ratio > 0.0) {
            return Err(Error::config(format!(
                "ffn_ratio must be positive, got {}",
                self.ffn_ratio
            )));
        }
        if !(self.hop1_ms.is_finite() && self.hop1_ms > 0.0) {
            return Err(Error::config(format!(
                "hop1_ms must be positive, got {}",
                self.hop1_ms
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_dims()?;
        for d in self.stage_dims() {
            head_dim(d, self.num_heads)?;
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::config(format!(
                "positional encoding needs an even d_model, got {}",
                self.d_model
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<P = Matrix> {
    pub weight: P,
    /// `1 x out`.
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<P = Matrix> {
    /// `1 x width`.
    pub gamma: P,
    pub beta: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<P = Matrix> {
    pub attn_norm: LayerNormParams<P>,
    pub attn: AttentionParams<P>,
    pub ffn_norm: LayerNormParams<P>,
    pub ffn_in: LinearParams<P>,
    pub ffn_out: LinearParams<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<P = Matrix> {
    pub stages: Vec<Vec<BlockWeights<P>>>,
    /// Linear layer of each merging block; empty for the baseline.
    pub merges: Vec<LinearParams<P>>,
    pub head: LinearParams<P>,
}

/// Shape and initializer of one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TensorSpec {
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

impl TensorSpec {
    fn weight(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            init: Init::Uniform { fan_in: rows },
        }
    }

    fn row(cols: usize, init: Init) -> Self {
        Self {
            rows: 1,
            cols,
            init,
        }
    }
}

/// Fallible `(name, tensor) -> Q` callback used by the weight maps.
pub type MapFn<'a, 'p, P, Q> = dyn FnMut(&str, &'p P) -> Result<Q> + 'a;

impl<P> LinearParams<P> {
    pub fn try_map<'p, Q>(
        &'p self,
        prefix: &str,
        f: &mut MapFn<'_, 'p, P, Q>,
    ) -> Result<LinearParams<Q>> {
        Ok(LinearParams {
            weight: f(&format!("{prefix}.weight"), &self.weight)?,
            bias: f(&format!("{prefix}.bias"), &self.bias)?,
        })
    }
}

impl<P> LayerNormParams<P> {
    pub fn try_map<'p, Q>(
        &'p self,
        prefix: &str,
        f: &mut MapFn<'_, 'p, P, Q>,
    ) -> Result<LayerNormParams<Q>> {
        Ok(LayerNormParams {
            gamma: f(&format!("{prefix}.gamma"), &self.gamma)?,
            beta: f(&format!("{prefix}.beta"), &self.beta)?,
        })
    }
}

impl<P> BlockWeights<P> {
    pub fn try_map<'p, Q>(
        &'p self,
        prefix: &str,
        f: &mut MapFn<'_, 'p, P, Q>,
    ) -> Result<BlockWeights<Q>> {
        Ok(BlockWeights {
            attn_norm: self.attn_norm.try_map(&format!("{prefix}.attn_norm"), f)?,
            attn: AttentionParams {
                wq: f(&format!("{prefix}.attn.wq"), &self.attn.wq)?,
                wk: f(&format!("{prefix}.attn.wk"), &self.attn.wk)?,
                wv: f(&format!("{prefix}.attn.wv"), &self.attn.wv)?,
                num_heads: self.attn.num_heads,
            },
            ffn_norm: self.ffn_norm.try_map(&format!("{prefix}.ffn_norm"), f)?,
            ffn_in: self.ffn_in.try_map(&format!("{prefix}.ffn_in"), f)?,
            ffn_out: self.ffn_out.try_map(&format!("{prefix}.ffn_out"), f)?,
        })
    }
}

impl<P> ModelWeights<P> {
    /// Maps every tensor in traversal order: for each stage its blocks, then
    /// the merging block that follows it; the head last.
    pub fn try_map<'p, Q>(
        &'p self,
        mut f: impl FnMut(&str, &'p P) -> Result<Q>,
    ) -> Result<ModelWeights<Q>> {
        let f: &mut MapFn<'_, 'p, P, Q> = &mut f;
        let mut stages = Vec::with_capacity(self.stages.len());
        let mut merges = Vec::with_capacity(self.merges.len());
        for (s, blocks) in self.stages.iter().enumerate() {
            stages.push(
                blocks
                    .iter()
                    .enumerate()
                    .map(|(b, w)| w.try_map(&format!("stage{s}.block{b}"), f))
                    .collect::<Result<Vec<_>>>()?,
            );
            if let Some(m) = self.merges.get(s) {
                merges.push(m.try_map(&format!("merge{s}"), f)?);
            }
        }
        let head = self.head.try_map("head", f)?;
        Ok(ModelWeights {
            stages,
            merges,
            head,
        })
    }

    pub fn map<'p, Q>(&'p self, mut f: impl FnMut(&str, &'p P) -> Q) -> ModelWeights<Q> {
        self.try_map(|n, p| Ok(f(n, p))).expect("infallible map")
    }

    /// `(name, tensor)` pairs in traversal order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.map(|n, p| out.push((n.to_string(), p)));
        out
    }
}

/// Parameter shapes and initializers for a configuration.
pub fn skeleton(config: &ModelConfig) -> Result<ModelWeights<TensorSpec>> {
    config.validate_dims()?;
    let dims = config.stage_dims();
    let block = |d: usize| {
        let hidden = config.ffn_hidden(d);
        BlockWeights {
            attn_norm: LayerNormParams {
                gamma: TensorSpec::row(d, Init::Ones),
                beta: TensorSpec::row(d, Init::Zeros),
            },
            attn: AttentionParams {
                wq: TensorSpec::weight(d, d),
                wk: TensorSpec::weight(d, d),
                wv: TensorSpec::weight(d, d),
                num_heads: config.num_heads,
            },
            ffn_norm: LayerNormParams {
                gamma: TensorSpec::row(d, Init::Ones),
                beta: TensorSpec::row(d, Init::Zeros),
            },
            ffn_in: LinearParams {
                weight: TensorSpec::weight(d, hidden),
                bias: TensorSpec::row(hidden, Init::Zeros),
            },
            ffn_out: LinearParams {
                weight: TensorSpec::weight(hidden, d),
                bias: TensorSpec::row(d, Init::Zeros),
            },
        }
    };
    let stages = config
        .blocks
        .iter()
        .zip(&dims)
        .map(|(&n, &d)| (0..n).map(|_| block(d)).collect())
        .collect();
    let merges = dims
        .windows(2)
        .map(|w| LinearParams {
            weight: TensorSpec::weight(w[0], w[1]),
            bias: TensorSpec::row(w[1], Init::Zeros),
        })
        .collect();
    let d_final = config.final_dim();
    let head = LinearParams {
        weight: TensorSpec::weight(d_final, config.num_classes),
        bias: TensorSpec::row(config.num_classes, Init::Zeros),
    };
    Ok(ModelWeights {
        stages,
        merges,
        head,
    })
}

/// Deterministic initialization: one ChaCha stream per seed, consumed in
/// traversal order.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(skeleton(config)?.map(|_, spec| match spec.init {
        Init::Uniform { fan_in } => {
            Matrix::random_uniform(spec.rows, spec.cols, 1.0 / (fan_in as f64).sqrt(), &mut rng)
        }
        Init::Zeros => Matrix::zeros(spec.rows, spec.cols),
        Init::Ones => Matrix::filled(spec.rows, spec.cols, 1.0),
    }))
}

impl ModelWeights {
    /// Rebuilds weights from `(name, tensor)` pairs in traversal order,
    /// checking every name and shape against the configuration.
    pub fn from_named(config: &ModelConfig, tensors: Vec<(String, Matrix)>) -> Result<Self> {
        config.validate()?;
        let sk = skeleton(config)?;
        let expected = sk.named().len();
        if tensors.len() != expected {
            return Err(Error::Format(format!(
                "expected {expected} tensors for this configuration, found {}",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        sk.try_map(|name, spec| {
            let (got, m) = it.next().expect("length checked");
            if got != name {
                return Err(Error::Format(format!(
                    "expected tensor {name}, found {got}"
                )));
            }
            if m.shape() != (spec.rows, spec.cols) {
                return Err(Error::Format(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    (spec.rows, spec.cols),
                    m.shape()
                )));
            }
            Ok(m)
        })
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.named() {
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let sk = skeleton(config)?;
        let want = sk.named();
        let have = self.named();
        if want.len() != have.len() {
            return Err(Error::config("weights do not match the configuration"));
        }
        for ((name, spec), (_, m)) in want.iter().zip(&have) {
            if m.shape() != (spec.rows, spec.cols) {
                return Err(Error::config(format!(
                    "{name}: configuration wants {:?}, weights have {:?}",
                    (spec.rows, spec.cols),
                    m.shape()
                )));
            }
        }
        Ok(())
    }
}

/// The operations the encoder is built from.
pub trait Ops {
    type Value;
    type Param;

    fn shape(&self, x: &Self::Value) -> Result<(usize, usize)>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn add_const(&mut self, a: &Self::Value, c: &Matrix) -> Result<Self::Value>;
    fn relu(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn layer_norm(
        &mut self,
        x: &Self::Value,
        p: &LayerNormParams<Self::Param>,
    ) -> Result<Self::Value>;
    fn linear(&mut self, x: &Self::Value, p: &LinearParams<Self::Param>) -> Result<Self::Value>;
    /// `window = None` is full attention.
    fn self_attention(
        &mut self,
        x: &Self::Value,
        p: &AttentionParams<Self::Param>,
        window: Option<WindowSpec>,
        scale: ScaleMode,
    ) -> Result<Self::Value>;
    fn avg_pool(&mut self, x: &Self::Value, m: usize) -> Result<Self::Value>;
    fn mean_rows(&mut self, x: &Self::Value) -> Result<Self::Value>;
    /// `-log softmax(logits)[target]` as a `1 x 1` value.
    fn cross_entropy(&mut self, logits: &Self::Value, target: usize) -> Result<Self::Value>;
}

/// Direct evaluation on matrices.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

fn check_row(p: &Matrix, width: usize, what: &'static str) -> Result<()> {
    if p.shape() != (1, width) {
        return Err(Error::shape(what, (1, width), p.shape()));
    }
    Ok(())
}

impl Ops for Eager {
    type Value = Matrix;
    type Param = Matrix;

    fn shape(&self, x: &Matrix) -> Result<(usize, usize)> {
        Ok(x.shape())
    }

    fn add(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        a.add(b)
    }

    fn add_const(&mut self, a: &Matrix, c: &Matrix) -> Result<Matrix> {
        a.add(c)
    }

    fn relu(&mut self, x: &Matrix) -> Result<Matrix> {
        Ok(x.relu())
    }

    fn layer_norm(&mut self, x: &Matrix, p: &LayerNormParams) -> Result<Matrix> {
        check_row(&p.gamma, x.cols(), "layer_norm gamma")?;
        check_row(&p.beta, x.cols(), "layer_norm beta")?;
        tensor::layer_norm(x, p.gamma.data(), p.beta.data(), LAYER_NORM_EPS)
    }

    fn linear(&mut self, x: &Matrix, p: &LinearParams) -> Result<Matrix> {
        check_row(&p.bias, p.weight.cols(), "linear bias")?;
        tensor::linear(x, &p.weight, p.bias.data())
    }

    fn self_attention(
        &mut self,
        x: &Matrix,
        p: &AttentionParams,
        window: Option<WindowSpec>,
        scale: ScaleMode,
    ) -> Result<Matrix> {
        match window {
            None => msa(x, p, scale),
            Some(w) => speech_msa(x, p, w, scale),
        }
    }

    fn avg_pool(&mut self, x: &Matrix, m: usize) -> Result<Matrix> {
        tensor::avg_pool_groups(x, m)
    }

    fn mean_rows(&mut self, x: &Matrix) -> Result<Matrix> {
        Ok(x.mean_rows())
    }

    fn cross_entropy(&mut self, logits: &Matrix, target: usize) -> Result<Matrix> {
        if logits.rows() != 1 || target >= logits.cols() {
            return Err(Error::invalid(format!(
                "cross entropy needs 1 x C logits and target < C, got {:?} and {target}",
                logits.shape()
            )));
        }
        let p = tensor::softmax_rows(logits);
        Ok(Matrix::row_vector(&[-p.get(0, target).ln()]))
    }
}

impl Ops for Tape {
    type Value = NodeId;
    type Param = NodeId;

    fn shape(&self, x: &NodeId) -> Result<(usize, usize)> {
        Ok(self.value(*x)?.shape())
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        Tape::add(self, *a, *b)
    }

    fn add_const(&mut self, a: &NodeId, c: &Matrix) -> Result<NodeId> {
        Tape::add_const(self, *a, c)
    }

    fn relu(&mut self, x: &NodeId) -> Result<NodeId> {
        Tape::relu(self, *x)
    }

    fn layer_norm(&mut self, x: &NodeId, p: &LayerNormParams<NodeId>) -> Result<NodeId> {
        Tape::layer_norm(self, *x, p.gamma, p.beta, LAYER_NORM_EPS)
    }

    fn linear(&mut self, x: &NodeId, p: &LinearParams<NodeId>) -> Result<NodeId> {
        Tape::linear(self, *x, p.weight, p.bias)
    }

    fn self_attention(
        &mut self,
        x: &NodeId,
        p: &AttentionParams<NodeId>,
        window: Option<WindowSpec>,
        scale: ScaleMode,
    ) -> Result<NodeId> {
        let d = self.value(p.wq)?.rows();
        let dh = head_dim(d, p.num_heads)?;
        let q = self.matmul(*x, p.wq)?;
        let k = self.matmul(*x, p.wk)?;
        let v = self.matmul(*x, p.wv)?;
        let heads = (0..p.num_heads)
            .map(|h| {
                let qh = self.col_block(q, h * dh, dh)?;
                let kh = self.col_block(k, h * dh, dh)?;
                let vh = self.col_block(v, h * dh, dh)?;
                self.attention(qh, kh, vh, window, scale.divisor(dh))
            })
            .collect::<Result<Vec<_>>>()?;
        self.concat_cols(&heads)
    }

    fn avg_pool(&mut self, x: &NodeId, m: usize) -> Result<NodeId> {
        Tape::avg_pool(self, *x, m)
    }

    fn mean_rows(&mut self, x: &NodeId) -> Result<NodeId> {
        Tape::mean_rows(self, *x)
    }

    fn cross_entropy(&mut self, logits: &NodeId, target: usize) -> Result<NodeId> {
        Tape::cross_entropy(self, *logits, target)
    }
}

/// Pre-norm residual block: `x + attn(LN(x))`, then `+ FFN(LN(.))` with a
/// ReLU two-layer FFN.
pub fn encoder_block<O: Ops>(
    ops: &mut O,
    x: &O::Value,
    w: &BlockWeights<O::Param>,
    window: Option<WindowSpec>,
    scale: ScaleMode,
) -> Result<O::Value> {
    let normed = ops.layer_norm(x, &w.attn_norm)?;
    let attended = ops.self_attention(&normed, &w.attn, window, scale)?;
    let x = ops.add(x, &attended)?;
    let normed = ops.layer_norm(&x, &w.ffn_norm)?;
    let hidden = ops.linear(&normed, &w.ffn_in)?;
    let hidden = ops.relu(&hidden)?;
    let out = ops.linear(&hidden, &w.ffn_out)?;
    ops.add(&x, &out)
}

/// Average pooling over `m` tokens followed by a linear layer.
pub fn merge<O: Ops>(
    ops: &mut O,
    x: &O::Value,
    m: usize,
    w: &LinearParams<O::Param>,
) -> Result<O::Value> {
    let pooled = ops.avg_pool(x, m)?;
    ops.linear(&pooled, w)
}

/// Token mean followed by the classifier, giving `1 x num_classes` logits.
pub fn head<O: Ops>(ops: &mut O, x: &O::Value, w: &LinearParams<O::Param>) -> Result<O::Value> {
    let pooled = ops.mean_rows(x)?;
    ops.linear(&pooled, w)
}

pub fn speechformer_block(
    x: &Matrix,
    weights: &BlockWeights,
    window: WindowSpec,
    config: &ModelConfig,
) -> Result<Matrix> {
    encoder_block(&mut Eager, x, weights, Some(window), config.scale_mode)
}

pub fn transformer_block(
    x: &Matrix,
    weights: &BlockWeights,
    config: &ModelConfig,
) -> Result<Matrix> {
    encoder_block(&mut Eager, x, weights, None, config.scale_mode)
}

pub fn merging_block(x: &Matrix, m: usize, w: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if w.rows() != x.cols() {
        return Err(Error::shape("merging_block", x.shape(), w.shape()));
    }
    if !w.cols().is_multiple_of(x.cols()) {
        return Err(Error::invalid(format!(
            "merging block output width {} is not a multiple of input width {}",
            w.cols(),
            x.cols()
        )));
    }
    let params = LinearParams {
        weight: w.clone(),
        bias: Matrix::row_vector(bias),
    };
    merge(&mut Eager, x, m, &params)
}

/// Output of a full forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `(tokens, width)` at the output of each stage.
    pub stage_shapes: Vec<(usize, usize)>,
    pub logits: Vec<f64>,
    /// Stage outputs, when requested.
    pub activations: Option<Vec<Matrix>>,
}

/// Generic forward pass. `x` must already carry the positional encoding.
/// Returns the logits and each stage's output.
pub fn forward_generic<O: Ops>(
    ops: &mut O,
    x: O::Value,
    weights: &ModelWeights<O::Param>,
    config: &ModelConfig,
    schedule: &StageSchedule,
) -> Result<(O::Value, Vec<O::Value>)>
where
    O::Value: Clone,
{
    let mut stage_outputs = Vec::with_capacity(config.num_stages());
    let mut x = x;
    match config.variant {
        Variant::Baseline => {
            for w in &weights.stages[0] {
                x = encoder_block(ops, &x, w, None, config.scale_mode)?;
            }
            stage_outputs.push(x.clone());
        }
        Variant::SpeechFormer => {
            for (s, blocks) in weights.stages.iter().enumerate() {
                let len = ops.shape(&x)?.0;
                let window = if s < 3 {
                    WindowSpec::new(schedule.window_tokens[s])?
                } else {
                    WindowSpec::covering(len)
                };
                for w in blocks {
                    x = encoder_block(ops, &x, w, Some(window), config.scale_mode)?;
                }
                stage_outputs.push(x.clone());
                if s < 3 {
                    x = merge(ops, &x, schedule.merge_scales[s], &weights.merges[s])?;
                }
            }
        }
    }
    let logits = head(ops, &x, &weights.head)?;
    Ok((logits, stage_outputs))
}

fn check_input(x: &Matrix, config: &ModelConfig) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::invalid("input must have at least one frame"));
    }
    if x.cols() != config.d_model {
        return Err(Error::shape(
            "forward input",
            x.shape(),
            (x.rows(), config.d_model),
        ));
    }
    Ok(())
}

/// Input plus sinusoidal positions.
pub fn with_positions(x: &Matrix) -> Result<Matrix> {
    x.add(&sinusoidal_positions(x.rows(), x.cols())?)
}

fn forward_impl(
    x: &Matrix,
    weights: &ModelWeights,
    config: &ModelConfig,
    schedule: &StageSchedule,
    keep: bool,
) -> Result<ForwardTrace> {
    config.validate()?;
    check_input(x, config)?;
    weights.check_against(config)?;
    let (logits, outputs) =
        forward_generic(&mut Eager, with_positions(x)?, weights, config, schedule)?;
    Ok(ForwardTrace {
        stage_shapes: outputs.iter().map(Matrix::shape).collect(),
        logits: logits.into_data(),
        activations: keep.then_some(outputs),
    })
}

pub fn forward(
    x: &Matrix,
    weights: &ModelWeights,
    config: &ModelConfig,
    schedule: &StageSchedule,
) -> Result<ForwardTrace> {
    forward_impl(x, weights, config, schedule, false)
}

pub fn forward_with_activations(
    x: &Matrix,
    weights: &ModelWeights,
    config: &ModelConfig,
    schedule: &StageSchedule,
) -> Result<ForwardTrace> {
    forward_impl(x, weights, config, schedule, true)
}

/// Expected `(tokens, width)` per stage for an input of `t` tokens.
pub fn expected_stage_shapes(
    config: &ModelConfig,
    t: usize,
    schedule: &StageSchedule,
) -> Vec<(usize, usize)> {
    match config.variant {
        Variant::Baseline => vec![(t, config.d_model)],
        Variant::SpeechFormer => token_chain(t, schedule)
            .into_iter()
            .zip(config.stage_dims())
            .collect(),
    }
}
