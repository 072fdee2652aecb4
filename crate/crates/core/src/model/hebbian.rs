use serde::{Deserialize, Serialize};

use super::state::ModelState;
use crate::corpus::TokenId;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HebbianConfig {
    pub enabled: bool,
    /// Floor of the interpolation weight.
    pub gamma_min: f64,
    /// Occurrences after which a class is no longer interpolated.
    pub limit: u32,
}

impl Default for HebbianConfig {
    fn default() -> Self {
        HebbianConfig {
            enabled: true,
            gamma_min: 0.01,
            limit: 500,
        }
    }
}

pub fn hebbian_gamma(count: u32, gamma_min: f64) -> f64 {
    (1.0 / count.max(1) as f64).max(gamma_min)
}

/// Bumps the class counter of `target`, then (while the counter is within
/// the limit) moves its output row toward `h̄` as seen by that row: `h̄`
/// itself for full-width bins, its down-projection otherwise. Returns the
/// weight used, or `None` when the row was left alone.
pub fn hebbian_update(
    state: &mut ModelState,
    target: TokenId,
    h_bar: &[f32],
    cfg: &HebbianConfig,
) -> Result<Option<f64>> {
    let b = state
        .config
        .bin_of(target)
        .ok_or_else(|| Error::input(format!("target id {target} out of range")))?;
    if h_bar.len() != state.config.d_model {
        return Err(Error::contract("hebbian update needs a d_model-wide activation"));
    }
    let c = &mut state.hebbian_counts[(target - 1) as usize];
    *c = c.saturating_add(1);
    let count = *c;
    if count > cfg.limit {
        return Ok(None);
    }
    let gamma = hebbian_gamma(count, cfg.gamma_min);
    let bp = state.layout.bins[b].clone();
    let z: Vec<f32> = match bp.proj {
        Some(p) => {
            let u = state.tensor(p);
            (0..u.rows()).map(|r| microlm_autograd::kernels::dot(u.row(r), h_bar)).collect()
        }
        None => h_bar.to_vec(),
    };
    let local = (target - state.config.bins[b].first) as usize;
    let row = state.tensor_mut(bp.table).row_mut(local);
    let g = gamma as f32;
    for (r, &zv) in row.iter_mut().zip(&z) {
        if gamma >= 1.0 {
            *r = zv;
            continue;
        }
        let lerp = *r + g * (zv - *r);
        *r = lerp.clamp(r.min(zv), r.max(zv));
    }
    Ok(Some(gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use proptest::prelude::*;

    fn set_row(state: &mut ModelState, id: TokenId, vals: &[f32]) {
        let t = state.layout.bins[0].table;
        state.tensor_mut(t).row_mut((id - 1) as usize).copy_from_slice(vals);
    }

    #[test]
    fn gamma_schedule() {
        assert_eq!(hebbian_gamma(1, 0.01), 1.0);
        assert_eq!(hebbian_gamma(4, 0.01), 0.25);
        assert_eq!(hebbian_gamma(1000, 0.01), 0.01);
    }

    #[test]
    fn first_occurrence_copies_activation() {
        let mut s = ModelState::new(tiny_config(), 0).unwrap();
        let h: Vec<f32> = (0..8).map(|i| i as f32 * 0.1).collect();
        assert_eq!(hebbian_update(&mut s, 2, &h, &HebbianConfig::default()).unwrap(), Some(1.0));
        assert_eq!(s.tensor(s.layout.bins[0].table).row(1), h.as_slice());
        assert_eq!(s.hebbian_counts[1], 1);
    }

    #[test]
    fn fourth_occurrence_quarter_step() {
        let mut s = ModelState::new(tiny_config(), 0).unwrap();
        set_row(&mut s, 3, &[0.0; 8]);
        s.hebbian_counts[2] = 3;
        hebbian_update(&mut s, 3, &[1.0; 8], &HebbianConfig::default()).unwrap();
        assert_eq!(s.tensor(s.layout.bins[0].table).row(2), &[0.25; 8]);
    }

    #[test]
    fn other_rows_and_inactive_classes_untouched() {
        let mut s = ModelState::new(tiny_config(), 0).unwrap();
        let before = s.clone();
        s.hebbian_counts[0] = 500;
        let r = hebbian_update(&mut s, 1, &[1.0; 8], &HebbianConfig::default()).unwrap();
        assert_eq!(r, None);
        assert_eq!(s.params, before.params);
        hebbian_update(&mut s, 2, &[1.0; 8], &HebbianConfig::default()).unwrap();
        let t = s.layout.bins[0].table;
        for r in (0..10).filter(|&r| r != 1) {
            assert_eq!(s.tensor(t).row(r), before.tensor(t).row(r));
        }
    }

    #[test]
    fn tail_rows_move_toward_projected_activation() {
        let mut s = ModelState::new(tiny_config(), 0).unwrap();
        let h = [0.5f32; 8];
        hebbian_update(&mut s, 11, &h, &HebbianConfig::default()).unwrap();
        let u = s.tensor(s.layout.bins[1].proj.unwrap());
        let z: Vec<f32> = (0..u.rows()).map(|r| microlm_autograd::kernels::dot(u.row(r), &h)).collect();
        assert_eq!(s.tensor(s.layout.bins[1].table).row(0), z.as_slice());
    }

    proptest! {
        #[test]
        fn update_is_convex(
            old in prop::collection::vec(-3f32..3.0, 8),
            h in prop::collection::vec(-3f32..3.0, 8),
            count in 0u32..600,
        ) {
            let mut s = ModelState::new(tiny_config(), 0).unwrap();
            set_row(&mut s, 5, &old);
            s.hebbian_counts[4] = count;
            hebbian_update(&mut s, 5, &h, &HebbianConfig::default()).unwrap();
            let new = s.tensor(s.layout.bins[0].table).row(4);
            for i in 0..8 {
                prop_assert!(new[i] >= old[i].min(h[i]) && new[i] <= old[i].max(h[i]));
            }
        }
    }
}
