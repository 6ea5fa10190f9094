//! Speech duration statistics and the per-stage window / merge schedule
//! derived from them.
//!
//! Durations are in milliseconds. A duration divided by the hop length of a
//! stage gives the approximate number of tokens that unit spans at that
//! stage; quotients are rounded up and clamped to at least one token so a
//! window never vanishes.

use std::fmt;

use crate::error::{Error, Result};

/// Default frame hop of the raw features.
pub const DEFAULT_HOP1_MS: f64 = 10.0;

/// Phonemes per word used to scale the word bounds from the phoneme bounds.
pub const PHONEMES_PER_WORD: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DurationStats {
    pub phoneme_min_ms: f64,
    pub phoneme_max_ms: f64,
    pub word_min_ms: f64,
    pub word_max_ms: f64,
}

impl Default for DurationStats {
    fn default() -> Self {
        Self::from_phoneme_bounds(50.0, 200.0)
    }
}

impl DurationStats {
    /// Word bounds are taken as five phonemes.
    pub fn from_phoneme_bounds(min_ms: f64, max_ms: f64) -> Self {
        Self {
            phoneme_min_ms: min_ms,
            phoneme_max_ms: max_ms,
            word_min_ms: PHONEMES_PER_WORD * min_ms,
            word_max_ms: PHONEMES_PER_WORD * max_ms,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.phoneme_min_ms,
            self.phoneme_max_ms,
            self.word_min_ms,
            self.word_max_ms,
        ];
        if all.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::invalid(format!(
                "durations must be positive: {self:?}"
            )));
        }
        if self.phoneme_min_ms > self.phoneme_max_ms || self.word_min_ms > self.word_max_ms {
            return Err(Error::invalid(format!(
                "duration bounds out of order: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSchedule {
    /// Hop of the frame, phoneme and word stages.
    pub hop_ms: [f64; 3],
    /// Attention windows (tokens) of the frame, phoneme and word stages. The
    /// utterance stage always attends over its whole input.
    pub window_tokens: [usize; 3],
    /// Pooling factors of the three merging blocks.
    pub merge_scales: [usize; 3],
}

/// `ceil(num / den)`, at least 1. Quotients within 1e-9 of an integer snap
/// to it so exact divisions are not bumped up by rounding noise.
fn round_div(num_ms: f64, den_ms: f64) -> usize {
    let q = num_ms / den_ms;
    let nearest = q.round();
    let tokens = if (q - nearest).abs() < 1e-9 {
        nearest
    } else {
        q.ceil()
    };
    (tokens as usize).max(1)
}

pub fn derive_schedule(hop1_ms: f64, stats: &DurationStats) -> Result<StageSchedule> {
    if !hop1_ms.is_finite() || hop1_ms <= 0.0 {
        return Err(Error::invalid(format!(
            "hop1 must be positive, got {hop1_ms}"
        )));
    }
    stats.validate()?;

    let tw_frame = round_div(stats.phoneme_min_ms, hop1_ms);
    let m1 = round_div(stats.phoneme_min_ms, hop1_ms);
    let hop2 = m1 as f64 * hop1_ms;

    let tw_phoneme = round_div(2.0 * stats.phoneme_max_ms, hop2);
    let m2 = round_div(stats.word_min_ms, hop2);
    let hop3 = m2 as f64 * hop2;

    let tw_word = round_div(2.0 * stats.word_max_ms, hop3);
    let m3 = round_div(stats.word_max_ms, hop3);

    Ok(StageSchedule {
        hop_ms: [hop1_ms, hop2, hop3],
        window_tokens: [tw_frame, tw_phoneme, tw_word],
        merge_scales: [m1, m2, m3],
    })
}

impl Default for StageSchedule {
    fn default() -> Self {
        derive_schedule(DEFAULT_HOP1_MS, &DurationStats::default())
            .expect("default statistics are valid")
    }
}

impl StageSchedule {
    /// `key<TAB>value` lines.
    pub fn to_tsv(&self) -> String {
        self.to_string()
    }

    /// Token counts entering each of the four stages.
    pub fn token_chain(&self, t_input: usize) -> [usize; 4] {
        token_chain(t_input, self)
    }
}

impl fmt::Display for StageSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [tw_f, tw_p, tw_w] = self.window_tokens;
        let [m1, m2, m3] = self.merge_scales;
        let [h1, h2, h3] = self.hop_ms;
        writeln!(f, "tw_f\t{tw_f}")?;
        writeln!(f, "tw_p\t{tw_p}")?;
        writeln!(f, "tw_w\t{tw_w}")?;
        writeln!(f, "m1\t{m1}")?;
        writeln!(f, "m2\t{m2}")?;
        writeln!(f, "m3\t{m3}")?;
        writeln!(f, "hop1_ms\t{h1}")?;
        writeln!(f, "hop2_ms\t{h2}")?;
        writeln!(f, "hop3_ms\t{h3}")
    }
}

/// `[t_F, t_P, t_W, t_U]`: each stage sees `ceil(previous / M)` tokens.
pub fn token_chain(t_input: usize, schedule: &StageSchedule) -> [usize; 4] {
    let mut chain = [t_input; 4];
    for k in 0..3 {
        chain[k + 1] = chain[k].div_ceil(schedule.merge_scales[k]);
    }
    chain
}
