//! Parameter and FLOP accounting.
//!
//! Convention: one multiply-accumulate counts as one FLOP. Softmax,
//! normalization, residual adds, activations, pooling and positional
//! encoding are listed as informational and left out of the totals.
//!
//! Per encoder block of width `d`, FFN width `h`, `T` tokens and an effective
//! window `w` (`T` for full attention):
//!
//! * projections: `3 T d²`
//! * attention:   `2 T w d` (scores plus weighted sum)
//! * FFN:         `2 T d h`

use std::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::model::{skeleton, BlockWeights, ModelConfig, TensorSpec, Variant};
use crate::structure::{token_chain, StageSchedule};

pub const CONVENTION: &str =
    "1 MAC = 1 FLOP; softmax, normalization, residual, activation, pooling and positional FLOPs not counted";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostEntry {
    pub stage: String,
    pub component: String,
    pub params: u64,
    pub flops: u64,
    /// Work listed for reference but excluded from the totals.
    pub uncounted_flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub label: String,
    /// Input length for FLOP reports; `None` for parameter-only reports.
    pub t_input: Option<usize>,
    pub d_input: usize,
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    /// Parameters excluding the classifier head.
    pub fn encoder_params(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.stage != "head")
            .map(|e| e.params)
            .sum()
    }

    /// Counted attention-term FLOPs (scores and weighted sums).
    pub fn attention_flops(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.component == "attention")
            .map(|e| e.flops)
            .sum()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "label\t{}", self.label);
        if let Some(t) = self.t_input {
            let _ = writeln!(s, "input\t{t}x{}", self.d_input);
        }
        for e in &self.entries {
            let _ = writeln!(
                s,
                "entry\t{}\t{}\t{}\t{}\t{}",
                e.stage, e.component, e.params, e.flops, e.uncounted_flops
            );
        }
        let _ = writeln!(s, "total_params\t{}", self.total_params());
        let _ = writeln!(s, "params\t{}", human(self.total_params() as f64, 'M'));
        if self.t_input.is_some() {
            let _ = writeln!(s, "total_flops\t{}", self.total_flops());
            let _ = writeln!(s, "flops\t{}", human(self.total_flops() as f64, 'G'));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let input = match self.t_input {
            Some(t) => format!("{t}x{}", self.d_input),
            None => "-".to_string(),
        };
        let _ = writeln!(s, "{} (input {input})", self.label);
        let _ = writeln!(
            s,
            "{:<8} {:<12} {:>14} {:>16} {:>16}",
            "stage", "component", "params", "flops", "not counted"
        );
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{:<8} {:<12} {:>14} {:>16} {:>16}",
                e.stage, e.component, e.params, e.flops, e.uncounted_flops
            );
        }
        let flops = if self.t_input.is_some() {
            human(self.total_flops() as f64, 'G')
        } else {
            "-".into()
        };
        let _ = writeln!(
            s,
            "{:<8} {:<12} {:>14} {:>16}",
            "total",
            "",
            human(self.total_params() as f64, 'M'),
            flops
        );
        let _ = writeln!(s, "convention: {CONVENTION}");
        s
    }
}

/// `15.79M`, `1.94G`: two decimals in the given unit.
pub fn human(value: f64, unit: char) -> String {
    let scale = match unit {
        'K' => 1e3,
        'M' => 1e6,
        'G' => 1e9,
        _ => 1.0,
    };
    format!("{:.2}{unit}", value / scale)
}

fn label(config: &ModelConfig) -> String {
    match config.variant {
        Variant::Baseline => format!("baseline(N={})", config.blocks[0]),
        Variant::SpeechFormer => {
            format!("speechformer(N={:?}, r={:?})", config.blocks, config.expand)
        }
    }
}

fn stage_names(config: &ModelConfig) -> Vec<&'static str> {
    match config.variant {
        Variant::Baseline => vec!["encoder"],
        Variant::SpeechFormer => vec!["F", "P", "W", "U"],
    }
}

/// Exact parameter count, matching the scalar count of initialized weights.
pub fn count_params(config: &ModelConfig) -> Result<CostReport> {
    build(config, None)
}

pub fn count_flops(
    config: &ModelConfig,
    t_input: usize,
    schedule: &StageSchedule,
) -> Result<CostReport> {
    if t_input == 0 {
        return Err(Error::invalid("input length must be at least 1"));
    }
    build(config, Some((t_input, schedule)))
}

fn build(config: &ModelConfig, input: Option<(usize, &StageSchedule)>) -> Result<CostReport> {
    config.validate_dims()?;
    let sk = skeleton(config)?;
    let dims = config.stage_dims();
    let names = stage_names(config);

    let (lengths, windows): (Vec<usize>, Vec<usize>) = match (input, config.variant) {
        (None, _) => (vec![0; dims.len()], vec![0; dims.len()]),
        (Some((t, _)), Variant::Baseline) => (vec![t], vec![t]),
        (Some((t, s)), Variant::SpeechFormer) => {
            let chain = token_chain(t, s);
            let windows = (0..4)
                .map(|k| {
                    if k < 3 {
                        s.window_tokens[k].min(chain[k])
                    } else {
                        chain[k]
                    }
                })
                .collect();
            (chain.to_vec(), windows)
        }
    };
    let t = |k: usize| lengths[k] as u64;

    let mut entries = Vec::new();
    for (k, blocks) in sk.stages.iter().enumerate() {
        let n = blocks.len() as u64;
        let d = dims[k] as u64;
        let h = config.ffn_hidden(dims[k]) as u64;
        let w = windows[k] as u64;
        let stage = names[k].to_string();
        let block_param =
            |f: &dyn Fn(&BlockWeights<TensorSpec>) -> u64| blocks.iter().map(f).sum::<u64>();
        let size = |s: &TensorSpec| (s.rows * s.cols) as u64;

        entries.push(CostEntry {
            stage: stage.clone(),
            component: "qkv".into(),
            params: block_param(&|b| size(&b.attn.wq) + size(&b.attn.wk) + size(&b.attn.wv)),
            flops: n * t(k) * d * 3 * d,
            uncounted_flops: 0,
        });
        entries.push(CostEntry {
            stage: stage.clone(),
            component: "attention".into(),
            params: 0,
            flops: n * 2 * t(k) * w * d,
            // softmax over every span
            uncounted_flops: n * t(k) * w * config.num_heads as u64,
        });
        entries.push(CostEntry {
            stage: stage.clone(),
            component: "ffn".into(),
            params: block_param(&|b| {
                size(&b.ffn_in.weight)
                    + size(&b.ffn_in.bias)
                    + size(&b.ffn_out.weight)
                    + size(&b.ffn_out.bias)
            }),
            flops: n * 2 * t(k) * d * h,
            // relu
            uncounted_flops: n * t(k) * h,
        });
        entries.push(CostEntry {
            stage: stage.clone(),
            component: "norm+resid".into(),
            params: block_param(&|b| {
                size(&b.attn_norm.gamma)
                    + size(&b.attn_norm.beta)
                    + size(&b.ffn_norm.gamma)
                    + size(&b.ffn_norm.beta)
            }),
            flops: 0,
            // two normalizations (normalize + affine) and two residual adds
            uncounted_flops: n * (2 * 2 * t(k) * d + 2 * t(k) * d),
        });
        if let Some(m) = sk.merges.get(k) {
            let out = t(k + 1);
            entries.push(CostEntry {
                stage: format!("M{}", k + 1),
                component: "merge".into(),
                params: size(&m.weight) + size(&m.bias),
                flops: out * (m.weight.rows * m.weight.cols) as u64,
                // pooling adds
                uncounted_flops: t(k) * d,
            });
        }
    }
    let last = dims.len() - 1;
    entries.push(CostEntry {
        stage: "head".into(),
        component: "classifier".into(),
        params: ((sk.head.weight.rows * sk.head.weight.cols) + sk.head.bias.cols) as u64,
        flops: if input.is_some() {
            (sk.head.weight.rows * sk.head.weight.cols) as u64
        } else {
            0
        },
        uncounted_flops: t(last) * dims[last] as u64,
    });
    if input.is_some() {
        entries.push(CostEntry {
            stage: "input".into(),
            component: "positional".into(),
            params: 0,
            flops: 0,
            uncounted_flops: t(0) * config.d_model as u64,
        });
    }

    Ok(CostReport {
        label: label(config),
        t_input: input.map(|(t, _)| t),
        d_input: config.d_model,
        entries,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatioReport {
    pub t_input: usize,
    pub flops_ratio: f64,
    pub params_ratio: f64,
}

impl fmt::Display for RatioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "flops_ratio\t{:.4}", self.flops_ratio)?;
        writeln!(f, "params_ratio\t{:.4}", self.params_ratio)
    }
}

/// `candidate / reference` for FLOPs and parameters.
pub fn compare(reference: &CostReport, candidate: &CostReport) -> Result<RatioReport> {
    match (reference.t_input, candidate.t_input) {
        (Some(a), Some(b)) if a == b => {}
        (a, b) => {
            return Err(Error::InvalidComparison(format!(
                "reports cover different inputs ({a:?} vs {b:?})"
            )))
        }
    }
    if reference.d_input != candidate.d_input {
        return Err(Error::InvalidComparison(format!(
            "reports cover different feature widths ({} vs {})",
            reference.d_input, candidate.d_input
        )));
    }
    if reference.total_flops() == 0 || reference.total_params() == 0 {
        return Err(Error::InvalidComparison("reference report is empty".into()));
    }
    Ok(RatioReport {
        t_input: reference.t_input.unwrap_or(0),
        flops_ratio: candidate.total_flops() as f64 / reference.total_flops() as f64,
        params_ratio: candidate.total_params() as f64 / reference.total_params() as f64,
    })
}

/// Mean FLOPs ratio over several feature rows.
pub fn mean_flops_ratio(rows: &[RatioReport]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::InvalidComparison("no rows to average".into()));
    }
    Ok(rows.iter().map(|r| r.flops_ratio).sum::<f64>() / rows.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use proptest::prelude::*;

    fn flops_g(cfg: &ModelConfig, t: usize) -> f64 {
        count_flops(cfg, t, &StageSchedule::default())
            .unwrap()
            .total_flops() as f64
            / 1e9
    }

    #[test]
    fn baseline_flops_closed_form() {
        // 12 * (3 T d^2 + 2 T^2 d + 2 T d^2) + d * C
        let (t, d) = (651u64, 128u64);
        let want = 12 * (3 * t * d * d + 2 * t * t * d + 2 * t * d * d) + d * 4;
        let got = count_flops(&ModelConfig::baseline(128), 651, &StageSchedule::default()).unwrap();
        assert_eq!(got.total_flops(), want);
        assert!((flops_g(&ModelConfig::baseline(128), 651) - 1.94).abs() < 0.01);
        assert!((flops_g(&ModelConfig::baseline(512), 651) - 15.45).abs() < 0.01);
    }

    #[test]
    fn speechformer_stage_sums() {
        let r = count_flops(
            &ModelConfig::speechformer_s(512),
            651,
            &StageSchedule::default(),
        )
        .unwrap();
        let stage = |s: &str| -> u64 {
            r.entries
                .iter()
                .filter(|e| e.stage == s)
                .map(|e| e.flops)
                .sum()
        };
        let block = |t: u64, w: u64| 5 * t * 512 * 512 + 2 * t * w * 512;
        assert_eq!(stage("F"), 2 * block(651, 5));
        assert_eq!(stage("P"), 2 * block(131, 8));
        assert_eq!(stage("W"), 4 * block(27, 8));
        assert_eq!(stage("U"), 4 * block(7, 7));
        assert_eq!(
            stage("M1") + stage("M2") + stage("M3"),
            (131 + 27 + 7) * 512 * 512
        );
        assert!((r.total_flops() as f64 / 1e9 - 2.28).abs() < 0.01);
    }

    #[test]
    fn param_count_matches_initialized_weights() {
        for cfg in [
            ModelConfig::baseline(64),
            ModelConfig::speechformer_s(64),
            ModelConfig::speechformer_b(64),
            ModelConfig {
                ffn_ratio: 2.0,
                ..ModelConfig::speechformer_b(32)
            },
        ] {
            let p = count_params(&cfg).unwrap();
            assert_eq!(
                p.total_params() as usize,
                init_model(&cfg, 0).unwrap().num_scalars()
            );
            assert_eq!(p.t_input, None);
            assert_eq!(p.total_flops(), 0);
        }
    }

    #[test]
    fn encoder_core_params() {
        let p = count_params(&ModelConfig::baseline(512)).unwrap();
        // 5 d^2 per block plus per-block biases and norms
        assert_eq!(p.encoder_params(), 12 * (5 * 512 * 512 + 6 * 512));
        let s = count_params(&ModelConfig::speechformer_s(512)).unwrap();
        assert_eq!(
            s.encoder_params() - p.encoder_params(),
            3 * (512 * 512 + 512)
        );
    }

    #[test]
    fn odd_width_is_countable() {
        let p = count_params(&ModelConfig::baseline(161)).unwrap();
        assert!((p.total_params() as f64 / 1e6 - 1.56).abs() / 1.56 < 0.02);
    }

    #[test]
    fn compare_examples() {
        let s = StageSchedule::default();
        let base = count_flops(&ModelConfig::baseline(512), 651, &s).unwrap();
        let same = compare(&base, &base).unwrap();
        assert_eq!(same.flops_ratio, 1.0);
        assert_eq!(same.params_ratio, 1.0);

        let sf = count_flops(&ModelConfig::speechformer_s(512), 651, &s).unwrap();
        assert!((compare(&base, &sf).unwrap().flops_ratio - 0.148).abs() < 0.002);

        let other = count_flops(&ModelConfig::speechformer_s(512), 650, &s).unwrap();
        assert!(matches!(
            compare(&base, &other),
            Err(Error::InvalidComparison(_))
        ));
        let params_only = count_params(&ModelConfig::speechformer_s(512)).unwrap();
        assert!(matches!(
            compare(&base, &params_only),
            Err(Error::InvalidComparison(_))
        ));
        assert!(mean_flops_ratio(&[]).is_err());
    }

    #[test]
    fn report_formats() {
        let r = count_flops(&ModelConfig::baseline(128), 651, &StageSchedule::default()).unwrap();
        let tsv = r.to_tsv();
        assert!(tsv.contains("flops\t1.94G\n"), "{tsv}");
        assert!(tsv.contains(&format!("total_flops\t{}\n", r.total_flops())));
        let table = r.to_table();
        assert!(table.contains("1.94G"), "{table}");
        assert!(table.contains("convention:"));
    }

    proptest! {
        #[test]
        fn windowed_never_exceeds_full(t in 1usize..3000, d in 1usize..64) {
            let s = StageSchedule::default();
            let base = ModelConfig { blocks: vec![1], ..ModelConfig::baseline(d) };
            let full = count_flops(&base, t, &s).unwrap();
            // one frame-stage block with the schedule window
            let win = s.window_tokens[0].min(t) as u64;
            let windowed_attn = 2 * t as u64 * win * d as u64;
            prop_assert!(windowed_attn <= full.attention_flops());
            prop_assert_eq!(windowed_attn == full.attention_flops(), win as usize == t);
        }

        #[test]
        fn attention_scaling(t in 100usize..2000) {
            let s = StageSchedule::default();
            let b1 = count_flops(&ModelConfig::baseline(64), t, &s).unwrap().attention_flops() as f64;
            let b2 = count_flops(&ModelConfig::baseline(64), 2 * t, &s).unwrap().attention_flops() as f64;
            prop_assert!(b2 >= 4.0 * b1 * 0.999);
            let first = |r: &CostReport| r.entries.iter().find(|e| e.stage == "F" && e.component == "attention").unwrap().flops as f64;
            let s1 = first(&count_flops(&ModelConfig::speechformer_s(64), t, &s).unwrap());
            let s2 = first(&count_flops(&ModelConfig::speechformer_s(64), 2 * t, &s).unwrap());
            prop_assert!(s2 <= 2.0 * s1 * 1.001);
        }

        #[test]
        fn totals_are_sums(t in 1usize..2000) {
            let r = count_flops(&ModelConfig::speechformer_b(64), t, &StageSchedule::default()).unwrap();
            prop_assert_eq!(r.total_flops(), r.entries.iter().map(|e| e.flops).sum::<u64>());
            prop_assert_eq!(r.total_params(), count_params(&ModelConfig::speechformer_b(64)).unwrap().total_params());
        }
    }
}
