use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::TokenId;
use crate::{Error, Result};

/// Draws `batch` windows of `extended_context + 1` consecutive ids (inputs
/// plus shifted targets) at uniformly random offsets.
pub fn sample_training_windows(
    stream: &[TokenId],
    extended_context: usize,
    batch: usize,
    seed: u64,
) -> Result<Vec<Vec<TokenId>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_windows_with(stream, extended_context, batch, &mut rng)
}

pub fn sample_windows_with<R: Rng>(
    stream: &[TokenId],
    extended_context: usize,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<Vec<TokenId>>> {
    Ok(sample_window_starts(stream.len(), extended_context, batch, rng)?
        .into_iter()
        .map(|s| stream[s..s + extended_context + 1].to_vec())
        .collect())
}

/// Start offsets of `batch` random windows over a stream of `len` ids.
pub fn sample_window_starts<R: Rng>(
    len: usize,
    extended_context: usize,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if extended_context == 0 || len <= extended_context {
        return Err(Error::input(format!(
            "stream of {len} tokens too short for windows of {}",
            extended_context + 1
        )));
    }
    let starts = len - extended_context;
    Ok((0..batch).map(|_| rng.random_range(0..starts)).collect())
}

/// One evaluation window: `inputs[k]` predicts `targets[k]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalWindow<'a> {
    pub start: usize,
    pub inputs: &'a [TokenId],
    pub targets: &'a [TokenId],
}

/// Non-overlapping windows starting at `0, C_e, 2·C_e, ...`; every target
/// position `1..len` is covered exactly once and the last window may be short.
pub fn sequential_eval_iter(
    stream: &[TokenId],
    extended_context: usize,
) -> impl Iterator<Item = EvalWindow<'_>> {
    let step = extended_context.max(1);
    let last_input = stream.len().saturating_sub(1);
    (0..last_input).step_by(step).map(move |start| {
        let end = (start + step).min(last_input);
        EvalWindow {
            start,
            inputs: &stream[start..end],
            targets: &stream[start + 1..end + 1],
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiling_starts() {
        let s: Vec<TokenId> = (1..=10).collect();
        let w: Vec<_> = sequential_eval_iter(&s, 4).collect();
        assert_eq!(w.iter().map(|w| w.start).collect::<Vec<_>>(), vec![0, 4, 8]);
        assert_eq!(w[2].inputs, &[9]);
        assert_eq!(w[2].targets, &[10]);
        let covered: usize = w.iter().map(|w| w.targets.len()).sum();
        assert_eq!(covered, s.len() - 1);
    }

    #[test]
    fn stream_equal_to_context_is_one_window() {
        let s: Vec<TokenId> = (1..=4).collect();
        assert_eq!(sequential_eval_iter(&s, 4).count(), 1);
    }

    #[test]
    fn boundary_window_is_unique() {
        let s: Vec<TokenId> = (1..=9).collect();
        for seed in 0..5 {
            let w = sample_training_windows(&s, 8, 3, seed).unwrap();
            assert!(w.iter().all(|w| w == &s));
        }
    }

    #[test]
    fn too_short_stream_is_an_error() {
        let s: Vec<TokenId> = (1..=4).collect();
        assert!(matches!(sample_training_windows(&s, 4, 1, 0), Err(Error::Input(_))));
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let s: Vec<TokenId> = (1..=500).collect();
        let a = sample_training_windows(&s, 16, 8, 42).unwrap();
        let b = sample_training_windows(&s, 16, 8, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|w| w.len() == 17 && w.windows(2).all(|p| p[1] == p[0] + 1)));
    }
}
