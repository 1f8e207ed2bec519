//! Exact FLOP accounting. One multiply-add counts as 2 FLOPs.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FlopCategory {
    /// `Q·Kᵀ` score products inside attention.
    AttnScores,
    /// `softmax(..)·V` products inside attention.
    AttnValues,
    Projections,
    Conv,
    Ffn,
    Other,
}

impl FlopCategory {
    pub const ALL: [FlopCategory; 6] = [
        FlopCategory::AttnScores,
        FlopCategory::AttnValues,
        FlopCategory::Projections,
        FlopCategory::Conv,
        FlopCategory::Ffn,
        FlopCategory::Other,
    ];

    fn slot(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            FlopCategory::AttnScores => "attn_scores",
            FlopCategory::AttnValues => "attn_values",
            FlopCategory::Projections => "projections",
            FlopCategory::Conv => "conv",
            FlopCategory::Ffn => "ffn",
            FlopCategory::Other => "other",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    counts: [u64; 6],
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_macs(&mut self, cat: FlopCategory, macs: u64) {
        self.counts[cat.slot()] += 2 * macs;
    }

    pub fn get(&self, cat: FlopCategory) -> u64 {
        self.counts[cat.slot()]
    }

    /// Score plus value products: the part of attention that scales with
    /// the square of the span.
    pub fn attention_core(&self) -> u64 {
        self.get(FlopCategory::AttnScores) + self.get(FlopCategory::AttnValues)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn reset(&mut self) {
        self.counts = [0; 6];
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
    }
}

impl fmt::Display for FlopCounter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, cat) in FlopCategory::ALL.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{}={}", cat.name(), self.get(*cat))?;
        }
        Ok(())
    }
}
