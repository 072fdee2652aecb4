//! Sensitivity-driven sparsity allocation and gradual magnitude pruning.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compression::CompressionSpec;
use crate::corpus::TokenId;
use crate::eval::CacheParams;
use crate::model::{ModelState, ParamId, ParamKind};
use crate::cache::CacheConfig;
use crate::train::{run, train_cache, validation_perplexity, Session, TrainConfig, TrainData, TrainOutcome};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    /// Global sparsity over the prunable parameters.
    pub target: f64,
    pub initial_sparsity: f64,
    /// Fine-tuning steps.
    pub steps: usize,
    /// Steps over which masks tighten, counted from the start of fine-tuning.
    pub ramp_steps: usize,
    pub frequency: usize,
    pub grid: Vec<f64>,
    pub prune_embeddings: bool,
    /// Validation tokens per sensitivity measurement; 0 uses the whole split.
    pub sensitivity_tokens: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            target: 0.358,
            initial_sparsity: 0.16,
            steps: 175_000,
            ramp_steps: 175_000,
            frequency: 1000,
            grid: (0..10).map(|i| i as f64 / 10.0).collect(),
            prune_embeddings: false,
            sensitivity_tokens: 0,
        }
    }
}

/// Matrices are prunable; embedding tables and projections only on request.
pub fn prunable(kind: ParamKind, cfg: &PruneConfig) -> bool {
    match kind {
        ParamKind::Weight => true,
        ParamKind::EmbeddingTable | ParamKind::EmbeddingProjection => cfg.prune_embeddings,
        _ => false,
    }
}

/// Keep-mask zeroing the `⌊s·n⌋` smallest-magnitude entries, ties to the
/// lowest flat index.
pub fn magnitude_mask(values: &[f32], s: f64) -> Vec<bool> {
    let k = ((s * values.len() as f64).floor() as usize).min(values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
    let mut keep = vec![true; values.len()];
    for &i in &order[..k] {
        keep[i] = false;
    }
    keep
}

/// Pool-adjacent-violators fit: the closest non-decreasing sequence in least squares.
pub fn isotonic(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (b, nb) = blocks[blocks.len() - 1];
            let (a, na) = blocks[blocks.len() - 2];
            if a <= b {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            blocks.push(((a * na as f64 + b * nb as f64) / (na + nb) as f64, na + nb));
        }
    }
    blocks.into_iter().flat_map(|(v, n)| std::iter::repeat_n(v, n)).collect()
}

/// Perplexity as a function of one parameter's sparsity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCurve {
    pub name: String,
    pub sparsity: Vec<f64>,
    pub perplexity: Vec<f64>,
    /// Non-decreasing fit of `perplexity`.
    pub fitted: Vec<f64>,
}

impl SensitivityCurve {
    pub fn new(name: String, sparsity: Vec<f64>, perplexity: Vec<f64>) -> Result<Self> {
        if sparsity.is_empty() || sparsity.len() != perplexity.len() {
            return Err(Error::contract("sensitivity curve needs matching non-empty samples"));
        }
        if sparsity.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("sensitivity sparsities must increase strictly"));
        }
        let fitted = isotonic(&perplexity);
        Ok(SensitivityCurve {
            name,
            sparsity,
            perplexity,
            fitted,
        })
    }

    pub fn max_sparsity(&self) -> f64 {
        *self.sparsity.last().expect("non-empty")
    }

    /// Interpolated fitted perplexity, clamped to the sampled range.
    pub fn eval(&self, rho: f64) -> f64 {
        let (s, f) = (&self.sparsity, &self.fitted);
        if rho <= s[0] {
            return f[0];
        }
        for i in 1..s.len() {
            if rho <= s[i] {
                let t = (rho - s[i - 1]) / (s[i] - s[i - 1]);
                return f[i - 1] + t * (f[i] - f[i - 1]);
            }
        }
        f[f.len() - 1]
    }

    /// Largest sparsity whose fitted perplexity does not exceed `xi`.
    pub fn inverse(&self, xi: f64) -> f64 {
        let (s, f) = (&self.sparsity, &self.fitted);
        if xi < f[0] {
            return s[0];
        }
        for i in (1..s.len()).rev() {
            if f[i] <= xi {
                return s[i];
            }
            if f[i - 1] <= xi {
                let t = (xi - f[i - 1]) / (f[i] - f[i - 1]);
                return s[i - 1] + t * (s[i] - s[i - 1]);
            }
        }
        s[0]
    }
}

/// Masks `id` at each grid sparsity and records validation perplexity.
pub fn sensitivity_analysis(
    state: &ModelState,
    comp: &CompressionSpec,
    params: &[ParamId],
    grid: &[f64],
    valid: &[TokenId],
    cache: Option<CacheParams>,
) -> Result<Vec<SensitivityCurve>> {
    let jobs: Vec<(usize, f64)> = (0..params.len()).flat_map(|p| grid.iter().map(move |&s| (p, s))).collect();
    let ppl = jobs
        .par_iter()
        .map(|&(p, s)| {
            let id = params[p];
            let mut st = state.clone();
            let keep = magnitude_mask(st.tensor(id).data(), s);
            for (x, k) in st.tensor_mut(id).data_mut().iter_mut().zip(keep) {
                if !k {
                    *x = 0.0;
                }
            }
            validation_perplexity(&st, comp, valid, cache)
        })
        .collect::<Result<Vec<_>>>()?;
    params
        .iter()
        .enumerate()
        .map(|(p, &id)| {
            let row = ppl[p * grid.len()..(p + 1) * grid.len()].to_vec();
            SensitivityCurve::new(state.param(id).name.clone(), grid.to_vec(), row)
        })
        .collect()
}

fn weighted(rhos: &[f64], sizes: &[usize]) -> f64 {
    let total: f64 = sizes.iter().map(|&n| n as f64).sum();
    rhos.iter().zip(sizes).map(|(r, &n)| r * n as f64).sum::<f64>() / total
}

/// Shared perplexity threshold `ξ*` and per-parameter sparsities
/// `ρ_φ = f_φ⁻¹(ξ*)` whose size-weighted mean is `target`.
pub fn solve_threshold(curves: &[SensitivityCurve], sizes: &[usize], target: f64) -> Result<(f64, Vec<f64>)> {
    if curves.is_empty() || curves.len() != sizes.len() {
        return Err(Error::contract("one size per sensitivity curve"));
    }
    let at = |xi: f64| -> Vec<f64> { curves.iter().map(|c| c.inverse(xi)).collect() };
    let caps: Vec<f64> = curves.iter().map(SensitivityCurve::max_sparsity).collect();
    if weighted(&caps, sizes) < target - 1e-12 {
        let binding = (0..curves.len())
            .min_by(|&a, &b| caps[a].total_cmp(&caps[b]).then(sizes[b].cmp(&sizes[a])))
            .expect("non-empty");
        return Err(Error::Range {
            msg: format!("sparsity {target} exceeds what the sensitivity curves reach"),
            param: curves[binding].name.clone(),
        });
    }
    let floor: Vec<f64> = curves.iter().map(|c| c.sparsity[0]).collect();
    if weighted(&floor, sizes) > target + 1e-12 {
        return Err(Error::Range {
            msg: format!("sparsity {target} is below the smallest sampled sparsity"),
            param: curves[0].name.clone(),
        });
    }
    let mut lo = curves.iter().map(|c| c.fitted[0]).fold(f64::INFINITY, f64::min) - 1.0;
    let mut hi = curves.iter().map(|c| c.fitted[c.fitted.len() - 1]).fold(f64::NEG_INFINITY, f64::max);
    if weighted(&at(lo), sizes) >= target {
        return Ok((lo, at(lo)));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if weighted(&at(mid), sizes) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (r_lo, r_hi) = (at(lo), at(hi));
    let (w_lo, w_hi) = (weighted(&r_lo, sizes), weighted(&r_hi, sizes));
    if (w_hi - target).abs() <= 1e-9 || w_hi <= w_lo {
        return Ok((hi, r_hi));
    }
    // a plateau makes f⁻¹ jump at ξ*; split the jump to land on target
    let a = (target - w_lo) / (w_hi - w_lo);
    Ok((hi, r_lo.iter().zip(&r_hi).map(|(l, h)| l + a * (h - l)).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub initial: f64,
    pub final_sparsity: f64,
    pub start: usize,
    pub end: usize,
    pub frequency: usize,
}

/// Cubic ramp from `initial` to `final_sparsity`, updated every `frequency`
/// steps and clamped outside `[start, end]`.
pub fn agp_sparsity(t: usize, s: &PruneSchedule) -> f64 {
    if t <= s.start || s.end <= s.start {
        return if t >= s.end { s.final_sparsity } else { s.initial };
    }
    if t >= s.end {
        return s.final_sparsity;
    }
    let f = s.frequency.max(1);
    let t = s.start + (t - s.start) / f * f;
    let x = 1.0 - (t - s.start) as f64 / (s.end - s.start) as f64;
    s.final_sparsity + (s.initial - s.final_sparsity) * x * x * x
}

/// Per-parameter sparsity targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub threshold: f64,
    pub targets: Vec<(String, f64)>,
}

pub fn plan(
    state: &ModelState,
    comp: &CompressionSpec,
    cfg: &PruneConfig,
    valid: &[TokenId],
    cache: Option<CacheParams>,
) -> Result<(PrunePlan, Vec<SensitivityCurve>)> {
    let ids: Vec<ParamId> = state.ids().filter(|&id| prunable(state.param(id).kind, cfg)).collect();
    if ids.is_empty() {
        return Err(Error::config("no prunable parameters"));
    }
    let n = if cfg.sensitivity_tokens == 0 {
        valid.len()
    } else {
        cfg.sensitivity_tokens.min(valid.len())
    };
    let curves = sensitivity_analysis(state, comp, &ids, &cfg.grid, &valid[..n], cache)?;
    let sizes: Vec<usize> = ids.iter().map(|&id| state.tensor(id).numel()).collect();
    let (threshold, rhos) = solve_threshold(&curves, &sizes, cfg.target)?;
    let targets = ids.iter().zip(rhos).map(|(&id, r)| (state.param(id).name.clone(), r)).collect();
    Ok((PrunePlan { threshold, targets }, curves))
}

/// Fraction of zeros in the masks of the prunable parameters.
pub fn global_sparsity(state: &ModelState, comp: &CompressionSpec, cfg: &PruneConfig) -> f64 {
    let (mut zeros, mut total) = (0usize, 0usize);
    for id in state.ids().filter(|&id| prunable(state.param(id).kind, cfg)) {
        let n = state.tensor(id).numel();
        total += n;
        zeros += n - comp.survivors(id, n);
    }
    zeros as f64 / total.max(1) as f64
}

/// Fine-tunes `state` while tightening magnitude masks along the AGP ramp
/// toward each parameter's target.
pub fn prune_train(
    state: ModelState,
    comp: CompressionSpec,
    plan: &PrunePlan,
    cfg: &PruneConfig,
    train: &TrainConfig,
    cache: &CacheConfig,
    data: &TrainData<'_>,
) -> Result<(TrainOutcome, CompressionSpec)> {
    let targets: Vec<(ParamId, PruneSchedule)> = plan
        .targets
        .iter()
        .map(|(name, rho)| {
            let id = state
                .id(name)
                .ok_or_else(|| Error::input(format!("prune plan names unknown parameter {name}")))?;
            if !(0.0..1.0).contains(rho) {
                return Err(Error::config(format!("sparsity {rho} for {name} outside [0, 1)")));
            }
            Ok((
                id,
                PruneSchedule {
                    initial: cfg.initial_sparsity.min(*rho),
                    final_sparsity: *rho,
                    start: 0,
                    end: cfg.ramp_steps.min(cfg.steps),
                    frequency: cfg.frequency,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let train = TrainConfig {
        steps: cfg.steps,
        ..train.clone()
    };
    let session = Session::new(state, comp, train.clone(), cache.clone())?;
    let mut current: Vec<usize> = vec![usize::MAX; targets.len()];
    let (mut outcome, session) = run(session, data, |s| {
        let t = s.step_index();
        for (k, (id, sched)) in targets.iter().enumerate() {
            let rho = agp_sparsity(t, sched);
            let zeros = (rho * s.state.tensor(*id).numel() as f64).floor() as usize;
            if zeros != current[k] {
                current[k] = zeros;
                s.comp.masks[id.0] = Some(magnitude_mask(s.state.tensor(*id).data(), rho));
            }
        }
        s.apply_masks();
        Ok(())
    })?;
    // masks reach their final sparsity even when the ramp outlasts the run
    let mut comp = session.comp;
    let mut changed = false;
    for (k, (id, sched)) in targets.iter().enumerate() {
        let st = &mut outcome.state;
        let n = st.tensor(*id).numel();
        changed |= (sched.final_sparsity * n as f64).floor() as usize != current[k];
        let keep = magnitude_mask(st.tensor(*id).data(), sched.final_sparsity);
        for (x, &k) in st.tensor_mut(*id).data_mut().iter_mut().zip(&keep) {
            if !k {
                *x = 0.0;
            }
        }
        comp.masks[id.0] = Some(keep);
    }
    if changed || outcome.aborted.is_some() {
        let n = if train.eval_tokens == 0 { data.valid.len() } else { train.eval_tokens.min(data.valid.len()) };
        outcome.val_ppl = validation_perplexity(&outcome.state, &comp, &data.valid[..n], train_cache(cache, &outcome.state))?;
    }
    Ok((outcome, comp))
}
