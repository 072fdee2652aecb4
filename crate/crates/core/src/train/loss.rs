//! Per-window training objective.

use microlm_autograd::{Element, Tape, Var};

use crate::corpus::TokenId;
use crate::model::{full_logprobs, hidden, Bound, ForwardOptions, ModelState};
use crate::{Error, Result};

/// What a window's loss includes beyond plain cross-entropy.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossSpec<'a> {
    /// Capacity of the in-window cache; `None` trains without a cache.
    pub cache: Option<usize>,
    /// Weight of the soft-label term.
    pub lambda_soft: f64,
    /// Per target (aligned with `ids[1..]`): teacher `(id, prob)` pairs.
    pub teacher: Option<&'a [Vec<(TokenId, f32)>]>,
}

/// Loss of one prediction from its log-probability row (index `id − 1`):
/// `(1−λ_soft)·(−log P(target)) + λ_soft·(−Σ P_teacher(x)·log P(x))`.
pub fn total_loss(logprobs: &[f64], target: TokenId, teacher: &[(TokenId, f32)], lambda_soft: f64) -> f64 {
    let hard = -logprobs[target as usize - 1];
    let soft: f64 = -teacher.iter().map(|&(x, p)| p as f64 * logprobs[x as usize - 1]).sum::<f64>();
    (1.0 - lambda_soft) * hard + lambda_soft * soft
}

pub struct WindowLoss {
    pub loss: Var,
    /// Final hidden states `[n × d_model]`.
    pub hidden: Var,
    /// Mean hard-label NLL (cache-mixed when the cache is on).
    pub hard: f64,
    pub soft: f64,
}

/// `(1−λ_soft)·L_hard + λ_soft·L_soft` averaged over the `n = ids.len() − 1`
/// targets of one window. `L_hard` uses the cache mixture
/// `(1−λ)·P_softmax + λ·P_cache`, where position `i` sees the pairs
/// `(h_j, x_{j+1})` of the previous `cache` positions in the same window;
/// `L_soft` is taken against the pre-cache log-probabilities.
pub fn window_loss<T: Element>(
    tape: &mut Tape<T>,
    state: &ModelState,
    bound: &Bound,
    ids: &[TokenId],
    spec: &LossSpec<'_>,
    opts: &mut ForwardOptions<'_>,
) -> Result<WindowLoss> {
    if ids.len() < 2 {
        return Err(Error::input("training window needs at least two ids"));
    }
    let n = ids.len() - 1;
    let targets = &ids[1..];
    let v = state.config.vocab_size();
    if let Some(bad) = targets.iter().find(|&&t| t == 0 || t as usize > v) {
        return Err(Error::input(format!("target id {bad} outside [1, {v}]")));
    }
    let h = hidden(tape, state, bound, &ids[..n], opts)?;
    let lp = full_logprobs(tape, state, bound, h)?;
    let entries: Vec<(usize, usize)> = targets.iter().enumerate().map(|(i, &t)| (i, t as usize - 1)).collect();
    let log_soft = tape.pick(lp, &entries)?;
    let log_p = match spec.cache {
        Some(cap) if cap > 0 && n > 1 => {
            let lay = &state.layout;
            let p_soft = tape.exp(log_soft);
            let sims = tape.matmul_nt(h, h)?;
            let theta = tape.exp(bound.var(lay.cache_log_theta));
            let lambda = tape.sigmoid(bound.var(lay.cache_logit_lambda));
            let scaled = tape.mul_scalar(sims, theta)?;
            let mut allowed = vec![false; n * n];
            let mut hits = vec![T::ZERO; n * n];
            for i in 0..n {
                for j in i.saturating_sub(cap)..i {
                    allowed[i * n + j] = true;
                    if targets[j] == targets[i] {
                        hits[i * n + j] = T::ONE;
                    }
                }
            }
            let weights = tape.masked_softmax_rows(scaled, &allowed)?;
            let hits = tape.constant(vec![n, n], hits)?;
            let hit_w = tape.mul(weights, hits)?;
            let ones = tape.constant(vec![n, 1], vec![T::ONE; n])?;
            let p_cache = tape.matmul(hit_w, ones)?;
            let col: Vec<(usize, usize)> = (0..n).map(|i| (i, 0)).collect();
            let p_cache = tape.pick(p_cache, &col)?;
            let mut has = vec![T::ONE; n];
            has[0] = T::ZERO;
            let has = tape.constant(vec![n], has)?;
            let diff = tape.sub(p_cache, p_soft)?;
            let diff = tape.mul(diff, has)?;
            let diff = tape.mul_scalar(diff, lambda)?;
            let mix = tape.add(p_soft, diff)?;
            tape.log(mix)
        }
        _ => log_soft,
    };
    let inv_n = T::from_f64(1.0 / n as f64);
    let hard_sum = tape.sum(log_p);
    let hard = tape.scale(hard_sum, -inv_n);
    let hard_val = tape.scalar(hard).to_f64();
    let (loss, soft_val) = match spec.teacher {
        Some(labels) if spec.lambda_soft > 0.0 => {
            if labels.len() != n {
                return Err(Error::contract("teacher labels must align with window targets"));
            }
            let mut entries = Vec::new();
            let mut w = Vec::new();
            for (i, row) in labels.iter().enumerate() {
                for &(id, p) in row {
                    if id == 0 || id as usize > v {
                        return Err(Error::input(format!("teacher label id {id} outside [1, {v}]")));
                    }
                    entries.push((i, id as usize - 1));
                    w.push(T::from_f32(p));
                }
            }
            let soft = if entries.is_empty() {
                tape.constant(vec![1], vec![T::ZERO])?
            } else {
                let picked = tape.pick(lp, &entries)?;
                let w = tape.constant(vec![w.len()], w)?;
                let weighted = tape.mul(picked, w)?;
                let s = tape.sum(weighted);
                tape.scale(s, -inv_n)
            };
            let soft_val = tape.scalar(soft).to_f64();
            let ls = T::from_f64(spec.lambda_soft);
            let a = tape.scale(hard, T::ONE - ls);
            let b = tape.scale(soft, ls);
            (tape.add(a, b)?, soft_val)
        }
        _ => (hard, 0.0),
    };
    Ok(WindowLoss {
        loss,
        hidden: h,
        hard: hard_val,
        soft: soft_val,
    })
}
