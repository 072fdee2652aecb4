//! Sequential stream evaluation with the streaming engine and the cache.
//!
//! Targets are consumed in order: step `p` feeds `ids[p]` and scores
//! `ids[p+1]`, after which `(h_p, ids[p+1])` enters the cache. Long streams
//! are split into chunks that each replay enough history (cache capacity
//! plus the receptive field) to reproduce the sequential run bit for bit.

use rayon::prelude::*;

use crate::cache::CacheState;
use crate::corpus::TokenId;
use crate::model::{Engine, SoftmaxMode};
use crate::ops::OpCounts;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CacheParams {
    pub capacity: usize,
    pub theta: f32,
    pub lambda: f32,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub cache: Option<CacheParams>,
    /// Keep final hidden states and pre-cache target probabilities.
    pub collect: bool,
    /// Run sequentially from an empty state and tally operations.
    pub count_ops: Option<SoftmaxMode>,
    /// Scored steps per parallel chunk; chosen automatically when `None`.
    pub chunk: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOutput {
    /// Negative log-likelihood of `ids[p+1]`, in stream order.
    pub nll: Vec<f64>,
    pub hiddens: Vec<Vec<f32>>,
    pub p_soft: Vec<f32>,
    pub ops: Option<OpCounts>,
}

impl EvalOutput {
    pub fn perplexity(&self) -> f64 {
        perplexity_of(&self.nll)
    }

    /// Mean 32-bit multiply and add equivalents per scored token.
    pub fn mean_ops(&self) -> Option<(f64, f64)> {
        let n = self.nll.len().max(1) as f64;
        self.ops.map(|o| (o.total_muls() / n, o.total_adds() / n))
    }
}

/// `exp` of the mean NLL, summed left to right.
pub fn perplexity_of(nll: &[f64]) -> f64 {
    if nll.is_empty() {
        return f64::NAN;
    }
    let mut s = 0f64;
    for &l in nll {
        s += l;
    }
    (s / nll.len() as f64).exp()
}

struct StepOut {
    h: Vec<f32>,
    p_soft: f32,
    p: f32,
}

fn score(
    engine: &Engine,
    h: Vec<f32>,
    target: TokenId,
    cache: Option<&CacheState>,
    mode: SoftmaxMode,
    ops: &mut OpCounts,
) -> Result<StepOut> {
    let (p_soft, p) = match mode {
        SoftmaxMode::TargetPath => {
            let ps = engine.target_prob(&h, target, ops)?;
            (ps, cache.map_or(ps, |c| c.mix_target(ps, &h, target, ops)))
        }
        SoftmaxMode::Full => {
            if engine.config().bin_of(target).is_none() {
                return Err(Error::input(format!("target id {target} out of range")));
            }
            let mut dist = engine.distribution(&h, ops);
            let ps = dist[(target - 1) as usize];
            if let Some(c) = cache {
                c.mix_distribution(&mut dist, &h, ops);
            }
            (ps, dist[(target - 1) as usize])
        }
    };
    Ok(StepOut { h, p_soft, p })
}

/// Scores steps `from..to`, replaying history from `warm`.
fn run_range(
    engine: &Engine,
    ids: &[TokenId],
    warm: usize,
    from: usize,
    to: usize,
    opts: &EvalOptions,
    ops: &mut OpCounts,
) -> Result<EvalOutput> {
    let mode = opts.count_ops.unwrap_or(SoftmaxMode::TargetPath);
    let mut st = engine.new_stream();
    let mut cache = opts.cache.map(|c| CacheState::new(c.capacity, c.theta, c.lambda));
    let cap = opts.cache.map_or(0, |c| c.capacity);
    let mut scratch = OpCounts::default();
    for p in warm..from {
        let h = engine.infer_next(ids[p], &mut st, &mut scratch)?;
        if let Some(c) = cache.as_mut() {
            if p + cap >= from {
                c.push(h, ids[p + 1]);
            }
        }
    }
    let mut out = EvalOutput::default();
    for p in from..to {
        let h = engine.infer_next(ids[p], &mut st, ops)?;
        let s = score(engine, h, ids[p + 1], cache.as_ref(), mode, ops)?;
        out.nll.push(-(s.p as f64).ln());
        if opts.collect {
            out.p_soft.push(s.p_soft);
        }
        if opts.collect {
            out.hiddens.push(s.h.clone());
        }
        if let Some(c) = cache.as_mut() {
            c.push(s.h, ids[p + 1]);
        }
    }
    Ok(out)
}

/// Evaluates every target of `ids` (all but the first token).
pub fn evaluate(engine: &Engine, ids: &[TokenId], opts: &EvalOptions) -> Result<EvalOutput> {
    if ids.len() < 2 {
        return Err(Error::input("evaluation needs at least two tokens"));
    }
    let steps = ids.len() - 1;
    if opts.count_ops.is_some() {
        let mut ops = OpCounts::default();
        let mut out = run_range(engine, ids, 0, 0, steps, opts, &mut ops)?;
        out.ops = Some(ops);
        return Ok(out);
    }
    let warmup = engine.config().receptive_field() + opts.cache.map_or(0, |c| c.capacity);
    let threads = rayon::current_num_threads().max(1);
    let chunk = opts
        .chunk
        .unwrap_or_else(|| steps.div_ceil(2 * threads).max(4 * warmup).max(256))
        .max(1);
    let starts: Vec<usize> = (0..steps).step_by(chunk).collect();
    let parts = starts
        .par_iter()
        .map(|&from| {
            let to = (from + chunk).min(steps);
            let mut ops = OpCounts::default();
            run_range(engine, ids, from.saturating_sub(warmup), from, to, opts, &mut ops)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = EvalOutput::default();
    for p in parts {
        out.nll.extend(p.nll);
        out.hiddens.extend(p.hiddens);
        out.p_soft.extend(p.p_soft);
    }
    Ok(out)
}
