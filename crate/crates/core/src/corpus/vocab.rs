use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// End-of-line marker emitted for every newline in the raw text.
pub const EOS: &str = "<eos>";
/// Reserved token for words unseen at vocabulary-build time.
pub const UNK: &str = "<unk>";

/// Token ids are 1-based; `0` never names a token.
pub type TokenId = u32;

/// Inclusive id range `[first, last]` of one frequency bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinRange {
    pub first: TokenId,
    pub last: TokenId,
}

impl BinRange {
    pub fn len(&self) -> usize {
        (self.last - self.first + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, id: TokenId) -> bool {
        (self.first..=self.last).contains(&id)
    }
}

/// Frequency-sorted vocabulary partitioned into contiguous bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    bins: Vec<BinRange>,
    index: HashMap<String, TokenId>,
    unk: Option<TokenId>,
}

/// Splits text into whitespace tokens, emitting [`EOS`] for every newline.
pub fn tokenize(text: &str) -> impl Iterator<Item = &str> {
    let mut lines = text.split('\n').peekable();
    std::iter::from_fn(move || {
        let line = lines.next()?;
        let more = lines.peek().is_some();
        Some(line.split_whitespace().chain(more.then_some(EOS)))
    })
    .flatten()
}

/// Cumulative bin boundaries for `v` tokens; empty bins are dropped.
pub fn bins_from_fractions(v: usize, fractions: &[f64]) -> Result<Vec<BinRange>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::input(format!("invalid bin fractions {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::input(format!("bin fractions sum to {total}, expected 1")));
    }
    let mut ends = Vec::new();
    let mut cum = 0.0;
    for (k, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if k + 1 == fractions.len() {
            v
        } else {
            ((v as f64) * cum).round() as usize
        };
        let prev = ends.last().copied().unwrap_or(0);
        let end = end.clamp(prev, v);
        if end > prev {
            ends.push(end);
        }
    }
    bins_from_ends(v, &ends)
}

/// Bins from their inclusive last ids; the final bin always ends at `v`.
pub fn bins_from_ends(v: usize, ends: &[usize]) -> Result<Vec<BinRange>> {
    let mut bins = Vec::new();
    let mut first = 1usize;
    for &end in ends.iter().chain(std::iter::once(&v)) {
        if end < first {
            continue;
        }
        if end > v {
            return Err(Error::input(format!("bin end {end} beyond vocabulary size {v}")));
        }
        bins.push(BinRange {
            first: first as TokenId,
            last: end as TokenId,
        });
        first = end + 1;
    }
    if bins.is_empty() {
        return Err(Error::input("vocabulary has no tokens"));
    }
    Ok(bins)
}

impl Vocabulary {
    /// Counts whitespace tokens, orders them by decreasing frequency (ties
    /// lexicographic) and splits ids into bins by `bin_fractions`.
    pub fn build(raw_text: &str, bin_fractions: &[f64], reserve_unk: bool) -> Result<Self> {
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for tok in tokenize(raw_text) {
            *freq.entry(tok).or_default() += 1;
        }
        if freq.is_empty() {
            return Err(Error::input("empty corpus"));
        }
        let mut entries: Vec<(&str, u64)> = freq.into_iter().filter(|(t, _)| *t != UNK).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens: Vec<String> = entries.iter().map(|(t, _)| t.to_string()).collect();
        let mut counts: Vec<u64> = entries.iter().map(|(_, c)| *c).collect();
        if reserve_unk {
            tokens.push(UNK.to_string());
            counts.push(0);
        }
        let bins = bins_from_fractions(tokens.len(), bin_fractions)?;
        Self::from_parts(tokens, counts, bins, reserve_unk)
    }

    pub fn from_parts(
        tokens: Vec<String>,
        counts: Vec<u64>,
        bins: Vec<BinRange>,
        has_unk: bool,
    ) -> Result<Self> {
        if tokens.len() != counts.len() || tokens.is_empty() {
            return Err(Error::input("token and count lists disagree"));
        }
        let v = tokens.len() as TokenId;
        let mut next = 1;
        for b in &bins {
            if b.first != next || b.last < b.first {
                return Err(Error::input(format!("bins {bins:?} do not partition [1, {v}]")));
            }
            next = b.last + 1;
        }
        if next != v + 1 {
            return Err(Error::input(format!("bins {bins:?} do not partition [1, {v}]")));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId + 1))
            .collect();
        let unk = if has_unk {
            Some(v)
        } else {
            None
        };
        Ok(Vocabulary {
            tokens,
            counts,
            bins,
            index,
            unk,
        })
    }

    /// Replaces the bin partition, keeping ids.
    pub fn with_bin_ends(mut self, ends: &[usize]) -> Result<Self> {
        self.bins = bins_from_ends(self.len(), ends)?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bins(&self) -> &[BinRange] {
        &self.bins
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn unk_id(&self) -> Option<TokenId> {
        self.unk
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get((id as usize).checked_sub(1)?).map(String::as_str)
    }

    /// Index of the bin holding `id`.
    pub fn bin_of(&self, id: TokenId) -> Option<usize> {
        let k = self.bins.partition_point(|b| b.last < id);
        (k < self.bins.len() && self.bins[k].contains(id)).then_some(k)
    }

    /// Maps text to ids; unknown words become the reserved id when present.
    pub fn encode(&self, raw_text: &str) -> Result<Vec<TokenId>> {
        tokenize(raw_text)
            .map(|t| {
                self.id(t)
                    .or(self.unk)
                    .ok_or_else(|| Error::input(format!("token {t:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<&str>> {
        ids.iter()
            .map(|&id| self.token(id).ok_or_else(|| Error::input(format!("id {id} out of range"))))
            .collect()
    }

    /// Writes `token<TAB>count` lines in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            let _ = writeln!(s, "{t}\t{c}");
        }
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path, bins: Vec<BinRange>, has_unk: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (t, c) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::input(format!("{}:{}: malformed vocab line", path.display(), n + 1)))?;
            tokens.push(t.to_string());
            counts.push(
                c.parse()
                    .map_err(|_| Error::input(format!("{}:{}: bad count", path.display(), n + 1)))?,
            );
        }
        Self::from_parts(tokens, counts, bins, has_unk)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PAPER_FRACTIONS: [f64; 3] = [3500.0 / 267735.0, 21500.0 / 267735.0, 242735.0 / 267735.0];

    #[test]
    fn frequency_order_with_lexicographic_ties() {
        let v = Vocabulary::build("a a b", &[1.0], false).unwrap();
        assert_eq!(v.id("a"), Some(1));
        assert_eq!(v.id("b"), Some(2));
        let v = Vocabulary::build("z y y x z", &[1.0], false).unwrap();
        assert_eq!(v.decode(&[1, 2, 3]).unwrap(), vec!["y", "z", "x"]);
    }

    #[test]
    fn single_token_corpus() {
        let v = Vocabulary::build("w w w", &PAPER_FRACTIONS, false).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v.bins().len(), 1);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(Vocabulary::build("  \t ", &[1.0], true), Err(Error::Input(_))));
    }

    #[test]
    fn fractions_must_sum_to_one() {
        assert!(Vocabulary::build("a b", &[0.5, 0.2], true).is_err());
    }

    #[test]
    fn paper_bins_at_full_scale() {
        let bins = bins_from_fractions(267_735, &PAPER_FRACTIONS).unwrap();
        assert_eq!(
            bins,
            vec![
                BinRange { first: 1, last: 3500 },
                BinRange { first: 3501, last: 25000 },
                BinRange { first: 25001, last: 267_735 },
            ]
        );
    }

    #[test]
    fn newlines_become_eos_and_unknowns_map_to_unk() {
        let v = Vocabulary::build("a b\nb\n", &[1.0], true).unwrap();
        let ids = v.encode("b c\n").unwrap();
        assert_eq!(v.decode(&ids).unwrap(), vec!["b", UNK, EOS]);
        let unk = v.unk_id().unwrap();
        assert_eq!(unk as usize, v.len());
        assert_eq!(v.bin_of(unk), Some(v.bins().len() - 1));
    }

    #[test]
    fn counts_non_increasing() {
        let v = Vocabulary::build("c c c b b a d d d d\n", &PAPER_FRACTIONS, true).unwrap();
        assert!(v.counts().windows(2).all(|w| w[0] >= w[1]));
    }
}
