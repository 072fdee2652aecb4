//! Storage and arithmetic cost under the challenge rules, and the
//! normalized score.
//!
//! Parameter storage counts each stored `w`-bit value as `w/32`; arithmetic
//! counts mean per-token multiplies (weighted by operand width) and adds
//! (always 32-bit). The analytic counter here reproduces the engine's
//! instrumented tallies exactly.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::compression::CompressionSpec;
use crate::corpus::TokenId;
use crate::model::{Activation, ModelConfig, ModelState, ParamId, SoftmaxMode};
use crate::ops::{Component, OpCounts};
use crate::{Error, Result};

/// Storage of the reference LSTM the score normalizes by.
pub const REFERENCE_PARAMS: f64 = 159e6;
/// Per-token math operations of the reference LSTM.
pub const REFERENCE_OPS: f64 = 318e6;

pub fn micronet_score(param_storage: f64, ops: f64) -> f64 {
    param_storage / REFERENCE_PARAMS + ops / REFERENCE_OPS
}

/// How a pruned tensor's surviving positions are stored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparseFormat {
    /// One presence bit per entry; the tensor falls back to dense storage
    /// whenever that is smaller.
    #[default]
    Bitmask,
    /// One value-width index per survivor.
    PerSurvivorIndex,
}

/// Storage of one tensor in 32-bit equivalents.
pub fn tensor_storage(numel: usize, survivors: usize, bits: u32, format: SparseFormat) -> f64 {
    let w = bits as u64;
    let dense = numel as u64 * w;
    let stored_bits = if survivors >= numel {
        dense
    } else {
        match format {
            SparseFormat::Bitmask => (survivors as u64 * w + numel as u64).min(dense),
            SparseFormat::PerSurvivorIndex => survivors as u64 * 2 * w,
        }
    };
    stored_bits as f64 / 32.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStorage {
    pub name: String,
    pub numel: usize,
    pub survivors: usize,
    pub bits: u32,
    pub storage: f64,
}

/// Per-tensor storage plus one 32-bit scale per quantized tensor and per
/// quantized activation site.
pub fn count_params(state: &ModelState, comp: &CompressionSpec, format: SparseFormat) -> (f64, Vec<ParamStorage>) {
    let mut rows = Vec::with_capacity(state.params.len());
    let mut total = 0.0;
    for id in state.ids() {
        let p = state.param(id);
        let numel = p.tensor.numel();
        let survivors = comp.survivors(id, numel);
        let bits = comp.bits(id);
        let storage = tensor_storage(numel, survivors, bits, format) + comp.quant(id).map_or(0.0, |_| 1.0);
        total += storage;
        rows.push(ParamStorage {
            name: p.name.clone(),
            numel,
            survivors,
            bits,
            storage,
        });
    }
    if let Some(a) = &comp.act_quant {
        total += a.inv_scales.iter().flatten().filter(|&&s| s > 0.0).count() as f64;
    }
    (total, rows)
}

/// Multiply bits and adds of one `x·W (+ b)` evaluation.
#[derive(Clone, Copy, Debug, Default)]
struct LinCost {
    mul_bits: u64,
    adds: u64,
}

impl LinCost {
    /// `col_survivors[j]` inputs feed output `j`.
    fn from_columns(col_survivors: impl Iterator<Item = usize>, bits: u32, bias: bool) -> Self {
        let mut c = LinCost::default();
        for s in col_survivors {
            c.mul_bits += s as u64 * bits as u64;
            if s > 0 {
                c.adds += (s - 1) as u64 + bias as u64;
            }
        }
        c
    }

    /// Stored `[in × out]`, applied as `x·W`.
    fn plain(state: &ModelState, comp: &CompressionSpec, w: ParamId, bias: bool) -> Self {
        let t = state.tensor(w);
        let (rows, cols) = (t.rows(), t.cols());
        let bits = comp.bits(w);
        match comp.mask(w) {
            None => LinCost::from_columns(std::iter::repeat_n(rows, cols), bits, bias),
            Some(k) => LinCost::from_columns((0..cols).map(|j| (0..rows).filter(|&i| k[i * cols + j]).count()), bits, bias),
        }
    }

    /// Stored `[out × in]`, applied as `x·Wᵀ`.
    fn transposed(state: &ModelState, comp: &CompressionSpec, w: ParamId, bias: bool) -> Self {
        let t = state.tensor(w);
        let (rows, cols) = (t.rows(), t.cols());
        let bits = comp.bits(w);
        match comp.mask(w) {
            None => LinCost::from_columns(std::iter::repeat_n(cols, rows), bits, bias),
            Some(k) => LinCost::from_columns((0..rows).map(|j| k[j * cols..(j + 1) * cols].iter().filter(|&&b| b).count()), bits, bias),
        }
    }

    fn charge(&self, ops: &mut OpCounts, c: Component) {
        ops.mul_bits[c as usize] += self.mul_bits;
        ops.adds[c as usize] += self.adds;
    }
}

struct LayerCost {
    attn: [LinCost; 4],
    ffn: [LinCost; 2],
}

/// Analytic per-step cost of streaming inference for one compressed model.
pub struct CostModel {
    cfg: ModelConfig,
    in_proj: Vec<Option<LinCost>>,
    layers: Vec<LayerCost>,
    out_proj: Vec<Option<LinCost>>,
    out_tables: Vec<LinCost>,
    cluster: Option<LinCost>,
}

fn layer_norm(ops: &mut OpCounts, c: Component, d: usize) {
    ops.add(c, 4 * d - 1);
    ops.mul(c, 3 * d + 4);
}

fn softmax(ops: &mut OpCounts, c: Component, n: usize) {
    ops.add(c, 2 * n - 1);
    ops.mul(c, 2 * n);
}

fn normalized_entry(ops: &mut OpCounts, c: Component, n: usize) {
    ops.add(c, 2 * n - 1);
    ops.mul(c, n + 1);
}

impl CostModel {
    pub fn new(state: &ModelState, comp: &CompressionSpec) -> Result<Self> {
        if comp.masks.len() != state.params.len() {
            return Err(Error::contract("compression spec does not match the model"));
        }
        let lay = &state.layout;
        let plain = |w, bias| LinCost::plain(state, comp, w, bias);
        let tr = |w, bias| LinCost::transposed(state, comp, w, bias);
        Ok(CostModel {
            cfg: state.config.clone(),
            in_proj: lay.bins.iter().map(|b| b.proj.map(|p| plain(p, false))).collect(),
            layers: lay
                .layers
                .iter()
                .map(|l| LayerCost {
                    attn: [plain(l.wq, true), plain(l.wk, true), plain(l.wv, true), plain(l.wo, true)],
                    ffn: [plain(l.w1, true), plain(l.w2, true)],
                })
                .collect(),
            out_proj: lay.bins.iter().map(|b| b.proj.map(|p| tr(p, false))).collect(),
            out_tables: lay.bins.iter().map(|b| tr(b.table, false)).collect(),
            cluster: lay.cluster_weight.map(|w| tr(w, true)),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Cost of one step: the input token in `input_bin`, an attention window
    /// of `window` positions (itself included), `cache_len` cache entries and
    /// a target in `target_bin` (read only on the target path).
    pub fn step(&self, input_bin: usize, window: usize, cache_len: usize, target_bin: usize, mode: SoftmaxMode) -> OpCounts {
        let cfg = &self.cfg;
        let mut ops = OpCounts::default();
        if let Some(p) = &self.in_proj[input_bin] {
            p.charge(&mut ops, Component::Embedding);
        }
        let (d, m) = (cfg.d_model, window);
        let (a, f) = (Component::Attention, Component::FeedForward);
        for l in &self.layers {
            for c in &l.attn {
                c.charge(&mut ops, a);
            }
            for _ in 0..cfg.n_heads {
                ops.add(a, 2 * cfg.d_k);
                ops.mul(a, m * (2 * cfg.d_k + 1));
                ops.add(a, m * (2 * (cfg.d_k - 1) + 1));
                softmax(&mut ops, a, m);
                ops.mul(a, m * cfg.d_v);
                ops.add(a, (m - 1) * cfg.d_v);
            }
            ops.add(a, d);
            layer_norm(&mut ops, a, d);
            for c in &l.ffn {
                c.charge(&mut ops, f);
            }
            if cfg.activation == Activation::Gelu {
                ops.mul(f, 7 * cfg.d_ff);
                ops.add(f, 2 * cfg.d_ff);
            }
            ops.add(f, d);
            layer_norm(&mut ops, f, d);
        }
        let s = Component::Softmax;
        let logits = |b: usize, ops: &mut OpCounts| {
            if let Some(p) = &self.out_proj[b] {
                p.charge(ops, s);
            }
            self.out_tables[b].charge(ops, s);
        };
        logits(0, &mut ops);
        if let Some(c) = &self.cluster {
            c.charge(&mut ops, s);
        }
        let head = cfg.head_size();
        match mode {
            SoftmaxMode::Full => {
                softmax(&mut ops, s, head);
                for b in 1..cfg.bins.len() {
                    logits(b, &mut ops);
                    softmax(&mut ops, s, cfg.bins[b].len());
                    ops.mul(s, cfg.bins[b].len());
                }
            }
            SoftmaxMode::TargetPath => {
                normalized_entry(&mut ops, s, head);
                if target_bin > 0 {
                    logits(target_bin, &mut ops);
                    normalized_entry(&mut ops, s, cfg.bins[target_bin].len());
                    ops.mul(s, 1);
                }
            }
        }
        let o = cache_len;
        if o > 0 {
            let c = Component::Cache;
            ops.mul(c, o * d);
            ops.add(c, o * (d - 1));
            match mode {
                SoftmaxMode::TargetPath => {
                    ops.mul(c, 2 * o + 1);
                    ops.add(c, 3 * o - 2);
                    ops.mul(c, 2);
                    ops.add(c, 1);
                }
                SoftmaxMode::Full => {
                    ops.mul(c, o);
                    softmax(&mut ops, c, o);
                    ops.mul(c, cfg.vocab_size());
                    ops.mul(c, o);
                    ops.add(c, o);
                }
            }
        }
        ops
    }

    /// Total cost of evaluating every target of `ids` from an empty state,
    /// as the instrumented evaluation performs it.
    pub fn stream(&self, ids: &[TokenId], cache_capacity: usize, mode: SoftmaxMode) -> Result<OpCounts> {
        if ids.len() < 2 {
            return Err(Error::input("op counting needs at least two tokens"));
        }
        let bin = |id: TokenId| {
            self.cfg
                .bin_of(id)
                .ok_or_else(|| Error::input(format!("token id {id} outside the vocabulary")))
        };
        let mut total = OpCounts::default();
        for p in 0..ids.len() - 1 {
            let step = self.step(bin(ids[p])?, (p + 1).min(self.cfg.context), p.min(cache_capacity), bin(ids[p + 1])?, mode);
            total.merge(&step);
        }
        Ok(total)
    }

    /// Mean per-token cost once the attention window and the cache are
    /// full, with input and target bins drawn from `profile`.
    pub fn steady_state(&self, cache_capacity: usize, mode: SoftmaxMode, profile: &BinProfile) -> OpsSummary {
        let mut acc = OpsSummary::default();
        for (ib, &wi) in profile.input.iter().enumerate() {
            for (tb, &wt) in profile.target.iter().enumerate() {
                let w = wi * wt;
                if w > 0.0 {
                    acc.accumulate(&self.step(ib, self.cfg.context, cache_capacity, tb, mode), w);
                }
            }
        }
        acc
    }
}

/// Fractions of tokens falling in each vocabulary bin.
#[derive(Clone, Debug, PartialEq)]
pub struct BinProfile {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

impl BinProfile {
    /// Frequencies proportional to `1/rank`, ids being frequency ranks.
    pub fn zipf(cfg: &ModelConfig) -> Self {
        let harmonic = |n: u64| (1..=n).map(|k| 1.0 / k as f64).sum::<f64>();
        let total = harmonic(cfg.vocab_size() as u64);
        let f: Vec<f64> = cfg
            .bins
            .iter()
            .map(|b| (harmonic(b.last as u64) - harmonic(b.first as u64 - 1)) / total)
            .collect();
        BinProfile {
            input: f.clone(),
            target: f,
        }
    }

    pub fn from_stream(cfg: &ModelConfig, ids: &[TokenId]) -> Result<Self> {
        if ids.len() < 2 {
            return Err(Error::input("bin profile needs at least two tokens"));
        }
        let mut input = vec![0.0; cfg.bins.len()];
        let mut target = vec![0.0; cfg.bins.len()];
        let n = (ids.len() - 1) as f64;
        for w in ids.windows(2) {
            let b = |id: TokenId| cfg.bin_of(id).ok_or_else(|| Error::input(format!("token id {id} outside the vocabulary")));
            input[b(w[0])?] += 1.0 / n;
            target[b(w[1])?] += 1.0 / n;
        }
        Ok(BinProfile { input, target })
    }
}

/// Mean per-token 32-bit-equivalent multiplies and adds, by component.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OpsSummary {
    pub muls: [f64; 5],
    pub adds: [f64; 5],
}

impl OpsSummary {
    pub fn per_token(total: &OpCounts, tokens: usize) -> Self {
        let mut s = OpsSummary::default();
        s.accumulate(total, 1.0 / tokens.max(1) as f64);
        s
    }

    fn accumulate(&mut self, ops: &OpCounts, weight: f64) {
        for c in Component::ALL {
            self.muls[c as usize] += weight * ops.muls_of(c);
            self.adds[c as usize] += weight * ops.adds_of(c);
        }
    }

    pub fn total_muls(&self) -> f64 {
        self.muls.iter().sum()
    }

    pub fn total_adds(&self) -> f64 {
        self.adds.iter().sum()
    }

    pub fn total(&self) -> f64 {
        self.total_muls() + self.total_adds()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentOps {
    pub component: Component,
    pub muls: f64,
    pub adds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub param_storage: f64,
    pub mul_ops: f64,
    pub add_ops: f64,
    pub score: f64,
    pub sparse_format: SparseFormat,
    pub softmax_mode: SoftmaxMode,
    pub cache_size: usize,
    pub components: Vec<ComponentOps>,
    pub params: Vec<ParamStorage>,
}

impl ScoreReport {
    pub fn new(
        storage: (f64, Vec<ParamStorage>),
        ops: &OpsSummary,
        sparse_format: SparseFormat,
        softmax_mode: SoftmaxMode,
        cache_size: usize,
    ) -> Self {
        let (mul_ops, add_ops) = (ops.total_muls(), ops.total_adds());
        ScoreReport {
            param_storage: storage.0,
            mul_ops,
            add_ops,
            score: micronet_score(storage.0, mul_ops + add_ops),
            sparse_format,
            softmax_mode,
            cache_size,
            components: Component::ALL
                .iter()
                .map(|&c| ComponentOps {
                    component: c,
                    muls: ops.muls[c as usize],
                    adds: ops.adds[c as usize],
                })
                .collect(),
            params: storage.1,
        }
    }

    /// Tab-separated per-component breakdown.
    pub fn component_table(&self) -> String {
        let mut s = String::from("component\tmuls\tadds\n");
        for c in &self.components {
            let _ = writeln!(s, "{}\t{:.3}\t{:.3}", c.component.name(), c.muls, c.adds);
        }
        let _ = writeln!(s, "total\t{:.3}\t{:.3}", self.mul_ops, self.add_ops);
        s
    }
}

/// Storage and steady-state arithmetic of a model with a cache of `cache_size`.
pub fn score_model(
    state: &ModelState,
    comp: &CompressionSpec,
    format: SparseFormat,
    mode: SoftmaxMode,
    cache_size: usize,
    profile: &BinProfile,
) -> Result<ScoreReport> {
    let ops = CostModel::new(state, comp)?.steady_state(cache_size, mode, profile);
    Ok(ScoreReport::new(count_params(state, comp, format), &ops, format, mode, cache_size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{evaluate, CacheParams, EvalOptions};
    use crate::model::tests::{random_ids, tiny_config};
    use crate::model::Engine;
    use crate::prune::magnitude_mask;
    use crate::quant::{plan_weights, QuantConfig};
    use proptest::prelude::*;

    #[test]
    fn score_examples() {
        assert_eq!(micronet_score(159e6, 318e6), 2.0);
        assert_eq!(micronet_score(0.0, 0.0), 0.0);
        assert!((micronet_score(1.8e6, 8.8e6) - 0.0390).abs() < 5e-4);
    }

    #[test]
    fn storage_examples() {
        assert_eq!(tensor_storage(1000, 1000, 32, SparseFormat::Bitmask), 1000.0);
        assert_eq!(tensor_storage(1000, 1000, 9, SparseFormat::Bitmask), 281.25);
        assert_eq!(tensor_storage(1000, 642, 9, SparseFormat::PerSurvivorIndex), 361.125);
        assert_eq!(tensor_storage(1000, 642, 9, SparseFormat::Bitmask), (642.0 * 9.0 + 1000.0) / 32.0);
    }

    #[test]
    fn linear_layer_hand_count() {
        let c = LinCost::from_columns(std::iter::repeat_n(3, 4), 32, true);
        assert_eq!((c.mul_bits / 32, c.adds), (12, 12));
        let c = LinCost::from_columns(std::iter::repeat_n(3, 4), 8, true);
        assert_eq!((c.mul_bits as f64 / 32.0, c.adds), (3.0, 12));
    }

    #[test]
    fn cache_similarity_count() {
        let s = ModelState::new(ModelConfig::full_scale(), 0).unwrap();
        let m = CostModel::new(&s, &CompressionSpec::dense(&s)).unwrap();
        let with = m.step(0, 97, 2000, 0, SoftmaxMode::TargetPath);
        let without = m.step(0, 97, 0, 0, SoftmaxMode::TargetPath);
        assert!(with.muls_of(Component::Cache) >= 512_000.0);
        assert_eq!(without.muls_of(Component::Cache), 0.0);
    }

    fn compressed(seed: u64) -> (ModelState, CompressionSpec) {
        let mut s = ModelState::new(tiny_config(), seed).unwrap();
        let mut comp = CompressionSpec::dense(&s);
        for (i, id) in s.ids().collect::<Vec<_>>().into_iter().enumerate() {
            if s.param(id).kind.is_matrix() {
                let keep = magnitude_mask(s.tensor(id).data(), 0.1 * (i % 7) as f64);
                for (x, &k) in s.tensor_mut(id).data_mut().iter_mut().zip(&keep) {
                    if !k {
                        *x = 0.0;
                    }
                }
                comp.masks[id.0] = Some(keep);
            }
        }
        comp.weight_quant = plan_weights(&s, &QuantConfig { bits: 9, quantize_embeddings: true, ..Default::default() }).unwrap();
        (s, comp)
    }

    #[test]
    fn analytic_matches_instrumented() {
        for (seed, mode, cap) in [(1, SoftmaxMode::Full, 0), (2, SoftmaxMode::Full, 7), (3, SoftmaxMode::TargetPath, 5)] {
            let (s, comp) = compressed(seed);
            let ids = random_ids(40, 50, seed + 10);
            let engine = Engine::new(&s, &comp).unwrap();
            let cache = (cap > 0).then_some(CacheParams { capacity: cap, theta: 0.5, lambda: 0.2 });
            let out = evaluate(&engine, &ids, &EvalOptions { cache, count_ops: Some(mode), ..Default::default() }).unwrap();
            let analytic = CostModel::new(&s, &comp).unwrap().stream(&ids, cap, mode).unwrap();
            assert_eq!(out.ops.unwrap(), analytic);
        }
    }

    #[test]
    fn context_increases_cost() {
        let mut prev = 0.0;
        for c in [65, 97, 129, 257] {
            let mut cfg = tiny_config();
            cfg.context = c;
            cfg.extended_context = cfg.receptive_field();
            let s = ModelState::new(cfg.clone(), 0).unwrap();
            let ops = CostModel::new(&s, &CompressionSpec::dense(&s))
                .unwrap()
                .steady_state(0, SoftmaxMode::Full, &BinProfile::zipf(&cfg))
                .total();
            assert!(ops > prev);
            prev = ops;
        }
    }

    proptest! {
        #[test]
        fn storage_never_grows_with_sparsity_or_fewer_bits(
            numel in 1usize..5000, a in 0usize..5000, b in 0usize..5000, bits in 2u32..=32, fewer in 0u32..8,
        ) {
            let (lo, hi) = (a.min(b).min(numel), a.max(b).min(numel));
            let f = SparseFormat::Bitmask;
            prop_assert!(tensor_storage(numel, lo, bits, f) <= tensor_storage(numel, hi, bits, f));
            let low_bits = bits.saturating_sub(fewer).max(2);
            prop_assert!(tensor_storage(numel, hi, low_bits, f) <= tensor_storage(numel, hi, bits, f));
        }

        #[test]
        fn score_is_linear(p in 0f64..1e8, o in 0f64..1e8, k in 0f64..10.0) {
            let base = micronet_score(p, o);
            prop_assert!((micronet_score(k * p, k * o) - k * base).abs() <= 1e-12 * (1.0 + k * base));
            prop_assert!((micronet_score(p, 0.0) + micronet_score(0.0, o) - base).abs() <= 1e-15 * (1.0 + base));
        }
    }
}
