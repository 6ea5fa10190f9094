//! Self-verification suites: windowed attention against the band-mask
//! oracle, and tape gradients against central differences for every block
//! type.

use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{band_mask_oracle, speech_msa, AttentionParams, ScaleMode, WindowSpec};
use crate::autodiff::{finite_diff_check_piecewise, GradCheckOptions, GradCheckReport, Tape};
use crate::error::{Error, Result};
use crate::model::{
    encoder_block, forward_generic, head, init_model, merge, BlockWeights, Eager, LayerNormParams,
    LinearParams, ModelConfig, ModelWeights, Ops,
};
use crate::structure::StageSchedule;
use crate::tensor::{sinusoidal_positions, Matrix};

/// Maximum allowed `|speech_msa - oracle|`.
pub const ORACLE_TOLERANCE: f64 = 1e-10;
pub const ORACLE_CASES: usize = 50;
pub const ORACLE_WINDOWS: [usize; 4] = [1, 3, 5, 8];
pub const ORACLE_HEADS: [usize; 3] = [1, 2, 4];

#[derive(Clone, Debug, PartialEq)]
pub struct OracleCase {
    pub index: usize,
    pub seed: u64,
    pub tokens: usize,
    pub width: usize,
    pub heads: usize,
    pub tw: usize,
    pub max_abs_diff: f64,
}

impl OracleCase {
    pub fn passed(&self) -> bool {
        self.max_abs_diff < ORACLE_TOLERANCE
    }
}

impl fmt::Display for OracleCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "oracle\t{}\tseed={}\tT={}\td={}\th={}\ttw={}\t{:.3e}\t{}",
            self.index,
            self.seed,
            self.tokens,
            self.width,
            self.heads,
            self.tw,
            self.max_abs_diff,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// Per-case seed derived from the suite seed.
pub fn case_seed(suite_seed: u64, index: usize) -> u64 {
    suite_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index as u64)
}

/// One randomized windowed-vs-masked comparison. The shape is drawn from the
/// case seed: `T <= 32`, `d <= 16` divisible by `h`, `h` in {1, 2, 4},
/// `tw` in {1, 3, 5, 8}. Scale modes alternate with the case index.
pub fn oracle_case(index: usize, seed: u64) -> Result<OracleCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = ORACLE_HEADS[rng.random_range(0..ORACLE_HEADS.len())];
    let width = heads * rng.random_range(1..=16 / heads);
    let tokens = rng.random_range(1..=32);
    let tw = ORACLE_WINDOWS[rng.random_range(0..ORACLE_WINDOWS.len())];
    let scale = if index.is_multiple_of(2) {
        ScaleMode::SqrtDh
    } else {
        ScaleMode::Dh
    };

    let x = Matrix::random_uniform(tokens, width, 2.0, &mut rng);
    let params = AttentionParams::new(
        Matrix::random_uniform(width, width, 1.0, &mut rng),
        Matrix::random_uniform(width, width, 1.0, &mut rng),
        Matrix::random_uniform(width, width, 1.0, &mut rng),
        heads,
    )?;
    let window = WindowSpec::new(tw)?;
    let fast = speech_msa(&x, &params, window, scale)?;
    let oracle = band_mask_oracle(&x, &params, window, scale)?;
    Ok(OracleCase {
        index,
        seed,
        tokens,
        width,
        heads,
        tw,
        max_abs_diff: fast.max_abs_diff(&oracle),
    })
}

pub fn oracle_suite(suite_seed: u64, cases: usize) -> Result<Vec<OracleCase>> {
    (0..cases)
        .map(|i| oracle_case(i, case_seed(suite_seed, i)))
        .collect()
}

/// A sub-graph whose gradients are checked. `values[0]` is the input; the
/// remaining values are parameters in traversal order.
#[derive(Clone, Debug)]
pub enum Probe {
    TransformerBlock {
        block: BlockWeights,
        scale: ScaleMode,
    },
    SpeechFormerBlock {
        block: BlockWeights,
        window: WindowSpec,
        scale: ScaleMode,
    },
    Merging {
        m: usize,
        linear: LinearParams,
    },
    /// Token mean, classifier, cross-entropy.
    Head {
        linear: LinearParams,
        target: usize,
    },
    /// Full forward pass with cross-entropy. The input is taken as already
    /// position-encoded.
    Model {
        config: ModelConfig,
        schedule: StageSchedule,
        weights: ModelWeights,
        target: usize,
    },
}

fn rebuild<'a, V: Clone + 'a>(
    it: &mut impl Iterator<Item = &'a V>,
) -> impl FnMut(&str, &Matrix) -> Result<V> + '_ {
    move |name, _| {
        it.next()
            .cloned()
            .ok_or_else(|| Error::Usage(format!("missing value for {name}")))
    }
}

impl Probe {
    pub fn name(&self) -> &'static str {
        match self {
            Probe::TransformerBlock { .. } => "transformer_block",
            Probe::SpeechFormerBlock { .. } => "speechformer_block",
            Probe::Merging { .. } => "merging_block",
            Probe::Head { .. } => "head",
            Probe::Model { .. } => "model",
        }
    }

    fn named_params(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        let mut push = |n: &str, m: &Matrix| -> Result<()> {
            out.push((n.to_string(), m.clone()));
            Ok(())
        };
        let _ = match self {
            Probe::TransformerBlock { block, .. } | Probe::SpeechFormerBlock { block, .. } => {
                block.try_map("block", &mut push).map(|_| ())
            }
            Probe::Merging { linear, .. } => linear.try_map("merge", &mut push).map(|_| ()),
            Probe::Head { linear, .. } => linear.try_map("head", &mut push).map(|_| ()),
            Probe::Model { weights, .. } => weights.try_map(&mut push).map(|_| ()),
        };
        out
    }

    fn eval<O, V>(&self, ops: &mut O, values: &[V]) -> Result<V>
    where
        O: Ops<Value = V, Param = V>,
        V: Clone,
    {
        let (x, rest) = values
            .split_first()
            .ok_or_else(|| Error::Usage("probe needs an input".into()))?;
        let mut it = rest.iter();
        match self {
            Probe::TransformerBlock { block, scale } => {
                let w = block.try_map("block", &mut rebuild(&mut it))?;
                encoder_block(ops, x, &w, None, *scale)
            }
            Probe::SpeechFormerBlock {
                block,
                window,
                scale,
            } => {
                let w = block.try_map("block", &mut rebuild(&mut it))?;
                encoder_block(ops, x, &w, Some(*window), *scale)
            }
            Probe::Merging { m, linear } => {
                let w = linear.try_map("merge", &mut rebuild(&mut it))?;
                merge(ops, x, *m, &w)
            }
            Probe::Head { linear, target } => {
                let w = linear.try_map("head", &mut rebuild(&mut it))?;
                let logits = head(ops, x, &w)?;
                ops.cross_entropy(&logits, *target)
            }
            Probe::Model {
                config,
                schedule,
                weights,
                target,
            } => {
                let w = weights.try_map(rebuild(&mut it))?;
                let (logits, _) = forward_generic(ops, x.clone(), &w, config, schedule)?;
                ops.cross_entropy(&logits, *target)
            }
        }
    }

    /// Analytic tape gradients versus central differences of
    /// `sum(upstream * output)` for a fixed random upstream.
    pub fn check(
        &self,
        input: &Matrix,
        seed: u64,
        opts: &GradCheckOptions,
    ) -> Result<GradCheckReport> {
        let mut named = vec![("input".to_string(), input.clone())];
        named.extend(self.named_params());

        let mut tape = Tape::new();
        let leaves: Vec<_> = named.iter().map(|(_, m)| tape.leaf(m.clone())).collect();
        let out = self.eval(&mut tape, &leaves)?;
        let shape = tape.value(out)?.shape();
        let upstream = if shape == (1, 1) {
            Matrix::filled(1, 1, 1.0)
        } else {
            Matrix::random_uniform(shape.0, shape.1, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
        };
        let grads = tape.backward(out, &upstream)?;
        let analytic = leaves
            .iter()
            .map(|&id| grads.get(id).cloned())
            .collect::<Result<Vec<_>>>()?;

        let report = finite_diff_check_piecewise(
            |values| {
                let mut ops = SignTracking::default();
                let y = self.eval(&mut ops, values)?;
                let loss = y
                    .data()
                    .iter()
                    .zip(upstream.data())
                    .map(|(a, b)| a * b)
                    .sum();
                Ok((loss, ops.hasher.finish()))
            },
            &named,
            &analytic,
            opts,
        )?;
        Ok(report.prefixed(&format!("{}.", self.name())))
    }
}

/// Eager evaluation that also fingerprints the sign pattern of every ReLU
/// input, which identifies the smooth piece the loss was evaluated in.
#[derive(Default)]
struct SignTracking {
    hasher: DefaultHasher,
}

impl Ops for SignTracking {
    type Value = Matrix;
    type Param = Matrix;

    fn shape(&self, x: &Matrix) -> Result<(usize, usize)> {
        Ok(x.shape())
    }
    fn add(&mut self, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        Eager.add(a, b)
    }
    fn add_const(&mut self, a: &Matrix, c: &Matrix) -> Result<Matrix> {
        Eager.add_const(a, c)
    }
    fn relu(&mut self, x: &Matrix) -> Result<Matrix> {
        for v in x.data() {
            (*v > 0.0).hash(&mut self.hasher);
        }
        Eager.relu(x)
    }
    fn layer_norm(&mut self, x: &Matrix, p: &LayerNormParams) -> Result<Matrix> {
        Eager.layer_norm(x, p)
    }
    fn linear(&mut self, x: &Matrix, p: &LinearParams) -> Result<Matrix> {
        Eager.linear(x, p)
    }
    fn self_attention(
        &mut self,
        x: &Matrix,
        p: &AttentionParams,
        window: Option<WindowSpec>,
        scale: ScaleMode,
    ) -> Result<Matrix> {
        Eager.self_attention(x, p, window, scale)
    }
    fn avg_pool(&mut self, x: &Matrix, m: usize) -> Result<Matrix> {
        Eager.avg_pool(x, m)
    }
    fn mean_rows(&mut self, x: &Matrix) -> Result<Matrix> {
        Eager.mean_rows(x)
    }
    fn cross_entropy(&mut self, logits: &Matrix, target: usize) -> Result<Matrix> {
        Eager.cross_entropy(logits, target)
    }
}

/// Toy scale used by the gradient suite.
pub const GRAD_TOKENS: usize = 40;
pub const GRAD_WIDTH: usize = 16;
pub const GRAD_HEADS: usize = 4;

/// Every block type plus a whole small hierarchical model, in a fixed order.
pub fn grad_probes(seed: u64) -> Result<Vec<(Probe, Matrix)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        num_heads: GRAD_HEADS,
        ..ModelConfig::speechformer_s(GRAD_WIDTH)
    };
    let schedule = StageSchedule::default();
    let weights = perturb_inits(init_model(&config, seed)?, &mut rng);
    let input = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        Matrix::random_uniform(rows, cols, 1.0, rng)
    };

    let block = weights.stages[0][0].clone();
    let wide = ModelConfig {
        num_heads: GRAD_HEADS,
        ..ModelConfig::speechformer_b(GRAD_WIDTH)
    };
    let wide_weights = perturb_inits(init_model(&wide, seed.wrapping_add(1))?, &mut rng);

    let mut probes = vec![
        (
            Probe::TransformerBlock {
                block: block.clone(),
                scale: config.scale_mode,
            },
            input(24, GRAD_WIDTH, &mut rng),
        ),
        (
            Probe::SpeechFormerBlock {
                block: block.clone(),
                window: WindowSpec::new(schedule.window_tokens[0])?,
                scale: config.scale_mode,
            },
            input(GRAD_TOKENS, GRAD_WIDTH, &mut rng),
        ),
        (
            Probe::SpeechFormerBlock {
                block,
                window: WindowSpec::new(8)?,
                scale: crate::attention::ScaleMode::Dh,
            },
            input(GRAD_TOKENS, GRAD_WIDTH, &mut rng),
        ),
        (
            Probe::Merging {
                m: 3,
                linear: wide_weights.merges[2].clone(),
            },
            input(GRAD_TOKENS - 2, GRAD_WIDTH, &mut rng),
        ),
        (
            Probe::Head {
                linear: weights.head.clone(),
                target: 1,
            },
            input(7, GRAD_WIDTH, &mut rng),
        ),
    ];
    // With the default merge scales a 40-token input reaches the word stage
    // as 2 tokens and the utterance stage as 1, leaving little to check.
    // These scales give 40 -> 14 -> 7 -> 4 with partial pooling groups.
    let model_schedule = StageSchedule {
        window_tokens: [5, 5, 3],
        merge_scales: [3, 2, 2],
        ..schedule
    };
    let x = input(GRAD_TOKENS, GRAD_WIDTH, &mut rng)
        .add(&sinusoidal_positions(GRAD_TOKENS, GRAD_WIDTH)?)?;
    probes.push((
        Probe::Model {
            config,
            schedule: model_schedule,
            weights,
            target: 2,
        },
        x,
    ));
    Ok(probes)
}

/// Freshly initialized gains, biases and norm shifts are exactly one or zero;
/// jitter them so those gradients are exercised away from the trivial point.
fn perturb_inits(w: ModelWeights, rng: &mut ChaCha8Rng) -> ModelWeights {
    w.map(|name, m| {
        if name.ends_with("gamma") || name.ends_with("beta") || name.ends_with("bias") {
            m.add(&Matrix::random_uniform(m.rows(), m.cols(), 0.1, rng))
                .expect("same shape")
        } else {
            m.clone()
        }
    })
}

pub fn grad_suite(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    for (i, (probe, input)) in grad_probes(seed)?.iter().enumerate() {
        let r = probe.check(input, case_seed(seed, i), opts)?;
        report.groups.extend(r.groups);
    }
    Ok(report)
}
