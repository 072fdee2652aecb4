//! Non-parametric cache over recent final hidden states.
//!
//! `P_cache(x) = Σ_{i: x_i = x} exp(θ·h_iᵀh) / Σ_i exp(θ·h_iᵀh)` is mixed into
//! the model distribution as `(1−λ)·P_softmax + λ·P_cache`.

mod search;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::ops::{Component, OpCounts};

pub use search::{golden_section, local_search, SearchConfig, SearchOutcome, SearchProblem};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheConfig {
    pub enabled: bool,
    /// Capacity during training (bounded by the training window in practice).
    pub train_size: usize,
    /// Capacity for search and evaluation.
    pub search_size: usize,
    pub search: SearchConfig,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            enabled: true,
            train_size: 2000,
            search_size: 3000,
            search: SearchConfig::default(),
        }
    }
}

/// FIFO store of `(h, label)` pairs with the mixing scalars.
#[derive(Clone, Debug)]
pub struct CacheState {
    entries: VecDeque<(Vec<f32>, TokenId)>,
    capacity: usize,
    pub theta: f32,
    pub lambda: f32,
}

impl CacheState {
    pub fn new(capacity: usize, theta: f32, lambda: f32) -> Self {
        CacheState {
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
            theta,
            lambda,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f32], TokenId)> {
        self.entries.iter().map(|(h, t)| (h.as_slice(), *t))
    }

    pub fn push(&mut self, h: Vec<f32>, token: TokenId) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((h, token));
    }

    fn dots(&self, h: &[f32], ops: &mut OpCounts) -> Vec<f32> {
        let d = h.len();
        ops.mul(Component::Cache, self.len() * d);
        ops.add(Component::Cache, self.len() * d.saturating_sub(1));
        self.entries.iter().map(|(e, _)| dot(e, h)).collect()
    }

    /// Cache probability of `target`; `None` when the cache is empty.
    pub fn cache_prob(&self, h: &[f32], target: TokenId, ops: &mut OpCounts) -> Option<f32> {
        if self.is_empty() {
            return None;
        }
        let dots = self.dots(h, ops);
        let m = dots.len();
        // θ scaling, max-subtraction, exponentials, sum, masked numerator, division
        ops.mul(Component::Cache, 2 * m + 1);
        ops.add(Component::Cache, 3 * m - 2);
        Some(cache_prob_from_dots(&dots, self.entries.iter().map(|(_, t)| *t == target), self.theta))
    }

    /// Mixed probability of `target` given its softmax probability.
    pub fn mix_target(&self, p_soft: f32, h: &[f32], target: TokenId, ops: &mut OpCounts) -> f32 {
        let pc = self.cache_prob(h, target, ops);
        if pc.is_some() {
            ops.mul(Component::Cache, 2);
            ops.add(Component::Cache, 1);
        }
        mix_prob(p_soft, pc, self.lambda)
    }

    /// Mixes the cache into a full distribution in place.
    pub fn mix_distribution(&self, p: &mut [f32], h: &[f32], ops: &mut OpCounts) {
        if self.is_empty() {
            return;
        }
        let c = Component::Cache;
        let mut w = self.dots(h, ops);
        let m = w.len();
        for v in w.iter_mut() {
            *v *= self.theta;
        }
        ops.mul(c, m);
        crate::model::infer::softmax_in_place(&mut w, ops, c);
        let keep = 1.0 - self.lambda;
        for v in p.iter_mut() {
            *v *= keep;
        }
        ops.mul(c, p.len());
        for ((_, t), wi) in self.entries.iter().zip(&w) {
            p[(*t - 1) as usize] += self.lambda * wi;
        }
        ops.mul(c, m);
        ops.add(c, m);
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0f32;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Softmax mass of the matching entries, with max-subtraction.
pub fn cache_prob_from_dots(dots: &[f32], matches: impl Iterator<Item = bool>, theta: f32) -> f32 {
    let max = dots.iter().fold(f32::NEG_INFINITY, |m, &s| m.max(theta * s));
    let mut den = 0f32;
    let mut num = 0f32;
    for (&s, hit) in dots.iter().zip(matches) {
        let e = (theta * s - max).exp();
        den += e;
        if hit {
            num += e;
        }
    }
    num / den
}

/// `(1−λ)·p_soft + λ·p_cache`, or `p_soft` when the cache is empty.
pub fn mix_prob(p_soft: f32, p_cache: Option<f32>, lambda: f32) -> f32 {
    match p_cache {
        Some(pc) => (1.0 - lambda) * p_soft + lambda * pc,
        None => p_soft,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ops() -> OpCounts {
        OpCounts::default()
    }

    #[test]
    fn degenerate_and_symmetric_cases() {
        let mut c = CacheState::new(4, 1.0, 0.5);
        assert_eq!(c.cache_prob(&[1.0], 3, &mut ops()), None);
        c.push(vec![1.0], 3);
        c.push(vec![2.0], 3);
        assert_eq!(c.cache_prob(&[0.5], 3, &mut ops()), Some(1.0));
        let mut c = CacheState::new(4, 1.0, 0.5);
        c.push(vec![1.0, 0.0], 1);
        c.push(vec![0.0, 1.0], 2);
        assert_eq!(c.cache_prob(&[1.0, 1.0], 1, &mut ops()), Some(0.5));
    }

    #[test]
    fn two_entry_hand_example() {
        let mut c = CacheState::new(4, 1.0, 0.0);
        c.push(vec![std::f32::consts::LN_2], 7);
        c.push(vec![0.0], 8);
        let p = c.cache_prob(&[1.0], 7, &mut ops()).unwrap();
        assert!((p - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn mixture_examples() {
        assert_eq!(mix_prob(0.2, Some(0.6), 0.0), 0.2);
        assert_eq!(mix_prob(0.2, Some(0.6), 1.0), 0.6);
        assert!((mix_prob(0.2, Some(0.6), 0.15) - 0.26).abs() < 1e-7);
        assert_eq!(mix_prob(0.2, None, 0.9), 0.2);
    }

    #[test]
    fn fifo_eviction() {
        let mut c = CacheState::new(3, 1.0, 0.1);
        for t in 1..=4 {
            c.push(vec![t as f32], t);
        }
        assert_eq!(c.iter().map(|(_, t)| t).collect::<Vec<_>>(), vec![2, 3, 4]);
    }

    proptest! {
        #[test]
        fn eviction_keeps_last_items(n in 0usize..40, cap in 1usize..10) {
            let mut c = CacheState::new(cap, 1.0, 0.1);
            for t in 0..n {
                c.push(vec![t as f32], t as TokenId + 1);
            }
            let got: Vec<TokenId> = c.iter().map(|(_, t)| t).collect();
            let want: Vec<TokenId> = (n.saturating_sub(cap)..n).map(|t| t as TokenId + 1).collect();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn matches_dense_brute_force(
            entries in prop::collection::vec((prop::collection::vec(-2f32..2.0, 3), 1u32..6), 1..12),
            h in prop::collection::vec(-2f32..2.0, 3),
            theta in 0.01f32..3.0,
            lambda in 0f32..1.0,
        ) {
            let v = 5usize;
            let mut c = CacheState::new(32, theta, lambda);
            for (e, t) in &entries {
                c.push(e.clone(), *t);
            }
            // dense [n × V] indicator times unnormalised weights, in f64
            let w: Vec<f64> = entries.iter().map(|(e, _)| {
                (theta as f64 * e.iter().zip(&h).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>()).exp()
            }).collect();
            let z: f64 = w.iter().sum();
            let mut dense = vec![0f64; v];
            for ((_, t), wi) in entries.iter().zip(&w) {
                dense[*t as usize - 1] += wi / z;
            }
            let mut total = 0.0;
            for x in 1..=v as TokenId {
                let p = c.cache_prob(&h, x, &mut OpCounts::default()).unwrap();
                prop_assert!((p as f64 - dense[x as usize - 1]).abs() < 1e-6);
                total += p as f64;
            }
            prop_assert!((total - 1.0).abs() < 1e-6);
            let mut p_soft = vec![0.2f32; v];
            c.mix_distribution(&mut p_soft, &h, &mut OpCounts::default());
            prop_assert!((p_soft.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs() < 1e-5);
            prop_assert!(p_soft.iter().all(|&p| (0.0..=1.0 + 1e-6).contains(&p)));
        }
    }
}
