//! Token-level loss diagnostics: per-target traces, recurrence gaps and
//! cumulative binned loss differences between two models.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    pub position: u64,
    pub id: TokenId,
    pub loss: f32,
}

/// One record per evaluation target: `nll[p]` scores `ids[p+1]`.
pub fn loss_trace(ids: &[TokenId], nll: &[f64]) -> Result<Vec<TraceRecord>> {
    if ids.len() != nll.len() + 1 {
        return Err(Error::input("trace needs one loss per target"));
    }
    nll.iter()
        .enumerate()
        .map(|(p, &l)| {
            if !l.is_finite() {
                return Err(Error::numerical(format!("non-finite loss at position {}", p + 1)));
            }
            Ok(TraceRecord {
                position: (p + 1) as u64,
                id: ids[p + 1],
                loss: l as f32,
            })
        })
        .collect()
}

const RECORD_BYTES: usize = 16;

pub fn write_trace(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    let mut buf = Vec::with_capacity(trace.len() * RECORD_BYTES);
    for r in trace {
        buf.extend_from_slice(&r.position.to_le_bytes());
        buf.extend_from_slice(&r.id.to_le_bytes());
        buf.extend_from_slice(&r.loss.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() % RECORD_BYTES != 0 {
        return Err(Error::input(format!("{} is not a whole number of trace records", path.display())));
    }
    Ok(buf
        .chunks_exact(RECORD_BYTES)
        .map(|c| TraceRecord {
            position: u64::from_le_bytes(c[0..8].try_into().expect("8 bytes")),
            id: u32::from_le_bytes(c[8..12].try_into().expect("4 bytes")),
            loss: f32::from_le_bytes(c[12..16].try_into().expect("4 bytes")),
        })
        .collect())
}

/// Distance to the previous occurrence of the same id; `None` for first occurrences.
pub fn token_gaps(stream: &[TokenId]) -> Vec<Option<usize>> {
    let mut last: HashMap<TokenId, usize> = HashMap::new();
    stream
        .iter()
        .enumerate()
        .map(|(p, &id)| last.insert(id, p).map(|q| p - q))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    /// By token id, ids being frequency ranks.
    Index,
    /// By distance to the previous occurrence.
    Gap,
}

impl Binning {
    /// Powers of 10 for ids, powers of 2 for gaps, up to `max`.
    pub fn default_edges(self, max: usize) -> Vec<f64> {
        let base: f64 = match self {
            Binning::Index => 10.0,
            Binning::Gap => 2.0,
        };
        let mut edges = vec![1.0];
        while *edges.last().expect("non-empty") <= max as f64 {
            let next = edges.last().expect("non-empty") * base;
            edges.push(next);
        }
        edges
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinnedDiff {
    /// Bin `i` holds values in `[edges[i], edges[i+1])`.
    pub edges: Vec<f64>,
    pub diff: Vec<f64>,
    pub size: Vec<usize>,
    pub cumulative_diff: Vec<f64>,
    pub cumulative_size: Vec<usize>,
    /// Gap binning only: first occurrences, reported apart from the curve.
    pub first_occurrence: Option<(f64, usize)>,
    /// Records whose value fell outside every bin.
    pub unbinned: (f64, usize),
}

impl BinnedDiff {
    /// Tab-separated table for plotting.
    pub fn to_table(&self) -> String {
        let mut s = String::from("lower\tupper\tsize\tdiff\tcum_size\tcum_diff\n");
        for i in 0..self.diff.len() {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.6}\t{}\t{:.6}",
                self.edges[i],
                self.edges[i + 1],
                self.size[i],
                self.diff[i],
                self.cumulative_size[i],
                self.cumulative_diff[i]
            );
        }
        if let Some((d, n)) = self.first_occurrence {
            let _ = writeln!(s, "first\tfirst\t{n}\t{d:.6}\t\t");
        }
        s
    }
}

/// Per-bin `Σ (loss_a − loss_b)` and its running sum over bins.
pub fn binned_loss_diff(a: &[TraceRecord], b: &[TraceRecord], binning: Binning, edges: &[f64]) -> Result<BinnedDiff> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.position != y.position || x.id != y.id) {
        return Err(Error::input("traces cover different streams"));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::input("bin edges must increase strictly"));
    }
    let nb = edges.len() - 1;
    let mut diff = vec![0f64; nb];
    let mut size = vec![0usize; nb];
    let mut first = (0f64, 0usize);
    let mut unbinned = (0f64, 0usize);
    let gaps = match binning {
        Binning::Gap => Some(trace_gaps(a)),
        Binning::Index => None,
    };
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let d = x.loss as f64 - y.loss as f64;
        let value = match &gaps {
            None => x.id as f64,
            Some(g) => match g[i] {
                Some(v) => v as f64,
                None => {
                    first.0 += d;
                    first.1 += 1;
                    continue;
                }
            },
        };
        let k = edges.partition_point(|&e| e <= value);
        if k == 0 || k > nb {
            unbinned.0 += d;
            unbinned.1 += 1;
        } else {
            diff[k - 1] += d;
            size[k - 1] += 1;
        }
    }
    let mut cumulative_diff = Vec::with_capacity(nb);
    let mut cumulative_size = Vec::with_capacity(nb);
    let (mut cd, mut cs) = (0.0, 0);
    for k in 0..nb {
        cd += diff[k];
        cs += size[k];
        cumulative_diff.push(cd);
        cumulative_size.push(cs);
    }
    Ok(BinnedDiff {
        edges: edges.to_vec(),
        diff,
        size,
        cumulative_diff,
        cumulative_size,
        first_occurrence: gaps.map(|_| first),
        unbinned,
    })
}

/// Gaps measured in trace positions, so a target's first appearance as a
/// target counts as a first occurrence.
fn trace_gaps(t: &[TraceRecord]) -> Vec<Option<usize>> {
    let mut last: HashMap<TokenId, u64> = HashMap::new();
    t.iter()
        .map(|r| last.insert(r.id, r.position).map(|q| (r.position - q) as usize))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(ids: &[TokenId], losses: &[f32]) -> Vec<TraceRecord> {
        ids.iter()
            .zip(losses)
            .enumerate()
            .map(|(p, (&id, &loss))| TraceRecord {
                position: p as u64 + 1,
                id,
                loss,
            })
            .collect()
    }

    #[test]
    fn gap_hand_trace() {
        // a b a c b
        assert_eq!(token_gaps(&[1, 2, 1, 3, 2]), vec![None, None, Some(2), None, Some(3)]);
        assert_eq!(token_gaps(&[4; 4]), vec![None, Some(1), Some(1), Some(1)]);
    }

    #[test]
    fn identical_traces_give_zero_curve() {
        let t = trace(&[1, 5, 30, 1, 200, 5], &[1.0, 2.0, 3.0, 0.5, 4.0, 1.5]);
        let d = binned_loss_diff(&t, &t, Binning::Index, &Binning::Index.default_edges(1000)).unwrap();
        assert!(d.diff.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn six_token_hand_sums() {
        let ids = [1, 5, 30, 1, 200, 5];
        let a = trace(&ids, &[1.0, 2.0, 3.0, 0.5, 4.0, 1.5]);
        let b = trace(&ids, &[0.5, 2.5, 1.0, 0.5, 1.0, 1.0]);
        let d = binned_loss_diff(&a, &b, Binning::Index, &[1.0, 10.0, 100.0, 1000.0]).unwrap();
        assert_eq!(d.size, vec![4, 1, 1]);
        assert_eq!(d.diff, vec![0.5 - 0.5 + 0.0 + 0.5, 2.0, 3.0]);
        assert_eq!(d.cumulative_diff, vec![0.5, 2.5, 5.5]);
        assert_eq!(d.cumulative_size, vec![4, 5, 6]);
        let g = binned_loss_diff(&a, &b, Binning::Gap, &[1.0, 2.0, 4.0, 8.0]).unwrap();
        // gaps: 1@4 → 3, 5@6 → 4; the rest are first occurrences
        assert_eq!(g.size, vec![0, 1, 1]);
        assert_eq!(g.diff, vec![0.0, 0.0, 0.5]);
        assert_eq!(g.first_occurrence, Some((0.5 - 0.5 + 2.0 + 3.0, 4)));
    }

    #[test]
    fn mismatched_streams_rejected() {
        let a = trace(&[1, 2], &[1.0, 1.0]);
        let b = trace(&[1, 3], &[1.0, 1.0]);
        assert!(matches!(binned_loss_diff(&a, &b, Binning::Index, &[1.0, 10.0]), Err(Error::Input(_))));
    }

    #[test]
    fn trace_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = trace(&[3, 1, 4], &[0.25, 1.5, f32::MIN_POSITIVE]);
        let p = dir.path().join("t.bin");
        write_trace(&p, &t).unwrap();
        assert_eq!(read_trace(&p).unwrap(), t);
    }

    proptest! {
        #[test]
        fn gaps_match_brute_force(s in prop::collection::vec(1u32..8, 0..300)) {
            let g = token_gaps(&s);
            for p in 0..s.len() {
                let brute = (0..p).rev().find(|&q| s[q] == s[p]).map(|q| p - q);
                prop_assert_eq!(g[p], brute);
                if let Some(v) = g[p] { prop_assert!(v >= 1); }
            }
        }

        #[test]
        fn bins_partition_records(
            recs in prop::collection::vec((1u32..300, -5f32..5.0, -5f32..5.0), 1..100),
            gap in any::<bool>(),
        ) {
            let ids: Vec<TokenId> = recs.iter().map(|r| r.0).collect();
            let a = trace(&ids, &recs.iter().map(|r| r.1).collect::<Vec<_>>());
            let b = trace(&ids, &recs.iter().map(|r| r.2).collect::<Vec<_>>());
            let binning = if gap { Binning::Gap } else { Binning::Index };
            let d = binned_loss_diff(&a, &b, binning, &binning.default_edges(1000)).unwrap();
            let first = d.first_occurrence.unwrap_or((0.0, 0));
            prop_assert_eq!(d.cumulative_size.last().unwrap() + first.1 + d.unbinned.1, recs.len());
            let total: f64 = a.iter().zip(&b).map(|(x, y)| x.loss as f64 - y.loss as f64).sum();
            prop_assert!((d.cumulative_diff.last().unwrap() + first.0 + d.unbinned.0 - total).abs() < 1e-9);
        }
    }
}
