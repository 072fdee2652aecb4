use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cache_prob_from_dots, dot, mix_prob};
use crate::corpus::TokenId;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub rounds: usize,
    pub rel_tol: f64,
    /// θ is searched over `[θ₀ / span, θ₀ · span]` in log space.
    pub theta_span: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            rounds: 3,
            rel_tol: 1e-3,
            theta_span: 20.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub theta: f64,
    pub lambda: f64,
    pub initial_perplexity: f64,
    pub perplexity: f64,
    pub evaluations: usize,
}

/// Minimizer of `f` on `[a, b]` to relative width `rel_tol`.
pub fn golden_section(mut f: impl FnMut(f64) -> Result<f64>, mut a: f64, mut b: f64, rel_tol: f64) -> Result<(f64, f64)> {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    for _ in 0..200 {
        if (b - a).abs() <= rel_tol * (a.abs() + b.abs()).max(1e-12) {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc <= fd { (c, fc) } else { (d, fd) })
}

/// Alternating line searches on λ then θ. A move is taken only when it
/// strictly lowers the objective, so the result never scores worse than
/// the starting point.
pub fn local_search(
    mut objective: impl FnMut(f64, f64) -> Result<f64>,
    theta0: f64,
    lambda0: f64,
    cfg: &SearchConfig,
) -> Result<SearchOutcome> {
    let mut evals = 0usize;
    let mut eval = |t: f64, l: f64| -> Result<f64> {
        evals += 1;
        let v = objective(t, l)?;
        if !v.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite perplexity {v} at theta={t}, lambda={l}"
            )));
        }
        Ok(v)
    };
    let (mut theta, mut lambda) = (theta0, lambda0);
    let initial = eval(theta, lambda)?;
    let mut best = initial;
    let (lo, hi) = ((theta0 / cfg.theta_span).ln(), (theta0 * cfg.theta_span).ln());
    for _ in 0..cfg.rounds {
        let start = best;
        let (l, v) = golden_section(|l| eval(theta, l), 0.0, 1.0, cfg.rel_tol)?;
        if v < best {
            lambda = l;
            best = v;
        }
        let (lt, v) = golden_section(|lt| eval(lt.exp(), lambda), lo, hi, cfg.rel_tol)?;
        if v < best {
            theta = lt.exp();
            best = v;
        }
        if start - best <= cfg.rel_tol * start {
            break;
        }
    }
    Ok(SearchOutcome {
        theta,
        lambda,
        initial_perplexity: initial,
        perplexity: best,
        evaluations: evals,
    })
}

/// Everything the cache objective needs from a frozen model on a stream:
/// per-target softmax probabilities and the similarities and label matches
/// against the cache contents at each step.
pub struct SearchProblem {
    p_soft: Vec<f32>,
    offsets: Vec<usize>,
    dots: Vec<f32>,
    hits: Vec<bool>,
}

impl SearchProblem {
    /// `hiddens[t]` predicts `targets[t]` with softmax probability `p_soft[t]`;
    /// after step `t` the pair `(hiddens[t], targets[t])` enters a cache of
    /// `capacity` entries.
    pub fn new(hiddens: &[Vec<f32>], targets: &[TokenId], p_soft: Vec<f32>, capacity: usize) -> Result<Self> {
        if hiddens.len() != targets.len() || targets.len() != p_soft.len() {
            return Err(Error::contract("search inputs differ in length"));
        }
        let n = targets.len();
        let per_step: Vec<(Vec<f32>, Vec<bool>)> = (0..n)
            .into_par_iter()
            .map(|t| {
                let from = t.saturating_sub(capacity);
                let dots = (from..t).map(|i| dot(&hiddens[i], &hiddens[t])).collect();
                let hits = (from..t).map(|i| targets[i] == targets[t]).collect();
                (dots, hits)
            })
            .collect();
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let mut dots = Vec::new();
        let mut hits = Vec::new();
        for (d, h) in per_step {
            dots.extend(d);
            hits.extend(h);
            offsets.push(dots.len());
        }
        Ok(SearchProblem {
            p_soft,
            offsets,
            dots,
            hits,
        })
    }

    pub fn len(&self) -> usize {
        self.p_soft.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_soft.is_empty()
    }

    /// Per-target negative log-likelihoods in stream order.
    pub fn nll(&self, theta: f32, lambda: f32) -> Vec<f64> {
        (0..self.len())
            .into_par_iter()
            .map(|t| {
                let (a, b) = (self.offsets[t], self.offsets[t + 1]);
                let pc = (b > a).then(|| cache_prob_from_dots(&self.dots[a..b], self.hits[a..b].iter().copied(), theta));
                -(mix_prob(self.p_soft[t], pc, lambda) as f64).ln()
            })
            .collect()
    }

    pub fn perplexity(&self, theta: f64, lambda: f64) -> f64 {
        crate::eval::perplexity_of(&self.nll(theta as f32, lambda as f32))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_section_finds_parabola_minimum() {
        let (x, _) = golden_section(|x| Ok((x - 0.3) * (x - 0.3)), 0.0, 1.0, 1e-6).unwrap();
        assert!((x - 0.3).abs() < 1e-5);
    }

    #[test]
    fn optimum_is_a_fixed_point() {
        let f = |t: f64, l: f64| Ok(1.0 + (t.ln() - 0.5f64.ln()).powi(2) + (l - 0.2).powi(2));
        let out = local_search(f, 0.5, 0.2, &SearchConfig::default()).unwrap();
        assert_eq!((out.theta, out.lambda), (0.5, 0.2));
        assert_eq!(out.perplexity, out.initial_perplexity);
    }

    #[test]
    fn search_improves_convex_surrogate() {
        let f = |t: f64, l: f64| Ok(1.0 + (t.ln() - 0.5f64.ln()).powi(2) + (l - 0.2).powi(2));
        let out = local_search(f, 0.1, 0.07, &SearchConfig::default()).unwrap();
        assert!(out.perplexity < out.initial_perplexity);
        assert!((out.lambda - 0.2).abs() < 1e-2 && (out.theta - 0.5).abs() < 2e-2);
    }

    #[test]
    fn non_finite_objective_aborts() {
        let f = |_: f64, l: f64| Ok(if l > 0.5 { f64::NAN } else { 1.0 });
        assert!(matches!(
            local_search(f, 1.0, 0.1, &SearchConfig::default()),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn problem_matches_direct_cache() {
        use crate::cache::CacheState;
        use crate::ops::OpCounts;
        let hiddens: Vec<Vec<f32>> = (0..30).map(|i| vec![(i as f32 * 0.7).sin(), (i as f32 * 0.3).cos()]).collect();
        let targets: Vec<TokenId> = (0..30).map(|i| (i * 7 % 5) as TokenId + 1).collect();
        let p_soft: Vec<f32> = (0..30).map(|i| 0.1 + 0.01 * i as f32).collect();
        let prob = SearchProblem::new(&hiddens, &targets, p_soft.clone(), 8).unwrap();
        let mut cache = CacheState::new(8, 0.7, 0.3);
        let mut direct = Vec::new();
        for t in 0..30 {
            let p = cache.mix_target(p_soft[t], &hiddens[t], targets[t], &mut OpCounts::default());
            direct.push(-(p as f64).ln());
            cache.push(hiddens[t].clone(), targets[t]);
        }
        assert_eq!(prob.nll(0.7, 0.3), direct);
    }
}
