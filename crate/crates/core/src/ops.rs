//! Exact arithmetic-operation tallies.
//!
//! Multiplies are tallied in bits (a multiply by a `w`-bit weight adds `w`,
//! anything else adds 32) so fractional 32-bit equivalents stay exact
//! integers until reported.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Embedding,
    Attention,
    FeedForward,
    Softmax,
    Cache,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Embedding,
        Component::Attention,
        Component::FeedForward,
        Component::Softmax,
        Component::Cache,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Embedding => "embedding",
            Component::Attention => "attention",
            Component::FeedForward => "ffn",
            Component::Softmax => "softmax",
            Component::Cache => "cache",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    /// Σ operand bit widths of multiplies, per component.
    pub mul_bits: [u64; 5],
    pub adds: [u64; 5],
}

impl OpCounts {
    #[inline]
    pub fn mul(&mut self, c: Component, n: usize) {
        self.mul_bits[c as usize] += 32 * n as u64;
    }

    #[inline]
    pub fn mul_w(&mut self, c: Component, n: usize, bits: u32) {
        self.mul_bits[c as usize] += bits as u64 * n as u64;
    }

    #[inline]
    pub fn add(&mut self, c: Component, n: usize) {
        self.adds[c as usize] += n as u64;
    }

    pub fn merge(&mut self, other: &OpCounts) {
        for i in 0..5 {
            self.mul_bits[i] += other.mul_bits[i];
            self.adds[i] += other.adds[i];
        }
    }

    /// 32-bit multiply equivalents of one component.
    pub fn muls_of(&self, c: Component) -> f64 {
        self.mul_bits[c as usize] as f64 / 32.0
    }

    pub fn adds_of(&self, c: Component) -> f64 {
        self.adds[c as usize] as f64
    }

    pub fn total_muls(&self) -> f64 {
        self.mul_bits.iter().sum::<u64>() as f64 / 32.0
    }

    pub fn total_adds(&self) -> f64 {
        self.adds.iter().sum::<u64>() as f64
    }
}
