//! Top-k soft labels of a teacher model over a training stream.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::model::Engine;
use crate::ops::OpCounts;
use crate::{Error, Result};

pub const TEACHER_TOP_K: usize = 30;

/// Soft labels keyed by target position: entry `p` describes the teacher's
/// prediction of `stream[p]` (position 0 has none).
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherLabels {
    k: usize,
    /// `len × k` slots; unused slots hold id 0.
    ids: Vec<TokenId>,
    probs: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct LabelsManifest {
    positions: usize,
    k: usize,
    vocab_size: usize,
}

/// The `k` most probable entries of `p` (index `id − 1`), descending,
/// ties broken by lower id.
pub fn top_k(p: &[f32], k: usize) -> Vec<(TokenId, f32)> {
    let mut idx: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
    let by_prob = |a: &usize, b: &usize| p[*b].total_cmp(&p[*a]).then(a.cmp(b));
    if idx.len() > k {
        idx.select_nth_unstable_by(k - 1, by_prob);
        idx.truncate(k);
    }
    idx.sort_by(by_prob);
    idx.into_iter().map(|i| (i as TokenId + 1, p[i])).collect()
}

impl TeacherLabels {
    pub fn from_rows(rows: &[Vec<(TokenId, f32)>], k: usize) -> Result<Self> {
        let mut ids = vec![0; rows.len() * k];
        let mut probs = vec![0.0; rows.len() * k];
        for (r, row) in rows.iter().enumerate() {
            if row.len() > k {
                return Err(Error::contract(format!("row {r} has {} labels, limit {k}", row.len())));
            }
            for (j, &(id, p)) in row.iter().enumerate() {
                ids[r * k + j] = id;
                probs[r * k + j] = p;
            }
        }
        Ok(TeacherLabels { k, ids, probs })
    }

    pub fn len(&self) -> usize {
        self.ids.len() / self.k.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Labels for the target at stream position `pos`.
    pub fn at(&self, pos: usize) -> impl Iterator<Item = (TokenId, f32)> + '_ {
        let r = pos * self.k..(pos + 1) * self.k;
        self.ids[r.clone()]
            .iter()
            .zip(&self.probs[r])
            .filter(|(&id, _)| id != 0)
            .map(|(&id, &p)| (id, p))
    }

    /// Writes `labels.json` and `labels.bin` (per position: u64 position,
    /// then `k` pairs of u32 id and f32 probability, little-endian).
    pub fn save(&self, dir: &Path, vocab_size: usize) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let m = LabelsManifest {
            positions: self.len(),
            k: self.k,
            vocab_size,
        };
        std::fs::write(dir.join("labels.json"), serde_json::to_vec_pretty(&m)?)?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join("labels.bin"))?);
        for pos in 0..self.len() {
            out.write_all(&(pos as u64).to_le_bytes())?;
            for j in 0..self.k {
                out.write_all(&self.ids[pos * self.k + j].to_le_bytes())?;
                out.write_all(&self.probs[pos * self.k + j].to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Loads labels and checks they were made for a vocabulary of `vocab_size`.
    pub fn load(dir: &Path, vocab_size: usize) -> Result<Self> {
        let m: LabelsManifest = serde_json::from_slice(&std::fs::read(dir.join("labels.json"))?)?;
        if m.vocab_size != vocab_size {
            return Err(Error::input(format!(
                "teacher labels use a vocabulary of {}, model has {vocab_size}",
                m.vocab_size
            )));
        }
        let mut raw = Vec::new();
        std::fs::File::open(dir.join("labels.bin"))?.read_to_end(&mut raw)?;
        let rec = 8 + 8 * m.k;
        if raw.len() != rec * m.positions {
            return Err(Error::input("teacher label file has the wrong size"));
        }
        let mut ids = Vec::with_capacity(m.positions * m.k);
        let mut probs = Vec::with_capacity(m.positions * m.k);
        for (pos, chunk) in raw.chunks_exact(rec).enumerate() {
            if u64::from_le_bytes(chunk[..8].try_into().expect("8 bytes")) != pos as u64 {
                return Err(Error::input(format!("teacher label record {pos} out of order")));
            }
            for pair in chunk[8..].chunks_exact(8) {
                ids.push(u32::from_le_bytes(pair[..4].try_into().expect("4 bytes")));
                probs.push(f32::from_le_bytes(pair[4..].try_into().expect("4 bytes")));
            }
        }
        Ok(TeacherLabels { k: m.k, ids, probs })
    }
}

/// Streams the teacher over `stream` (no cache) and keeps the top `k`
/// probabilities of its full predictive distribution at every position.
pub fn extract_teacher_labels(teacher: &Engine, stream: &[TokenId], k: usize) -> Result<TeacherLabels> {
    let v = teacher.config().vocab_size();
    if let Some(bad) = stream.iter().find(|&&id| id == 0 || id as usize > v) {
        return Err(Error::input(format!("stream id {bad} outside the teacher vocabulary of {v}")));
    }
    if stream.len() < 2 {
        return Err(Error::input("stream too short for teacher labels"));
    }
    let warm = teacher.config().receptive_field();
    let steps = stream.len() - 1;
    let chunk = steps.div_ceil(rayon::current_num_threads().max(1) * 2).max(4 * warm).max(256);
    let starts: Vec<usize> = (0..steps).step_by(chunk).collect();
    let parts = starts
        .par_iter()
        .map(|&from| {
            let to = (from + chunk).min(steps);
            let mut st = teacher.new_stream();
            let mut ops = OpCounts::default();
            for p in from.saturating_sub(warm)..from {
                teacher.infer_next(stream[p], &mut st, &mut ops)?;
            }
            let mut rows = Vec::with_capacity(to - from);
            for p in from..to {
                let h = teacher.infer_next(stream[p], &mut st, &mut ops)?;
                rows.push(top_k(&teacher.distribution(&h, &mut ops), k));
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = vec![Vec::new()];
    rows.extend(parts.into_iter().flatten());
    TeacherLabels::from_rows(&rows, k)
}
