use serde::{Deserialize, Serialize};

use crate::corpus::{BinRange, TokenId};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

/// One frequency bin: an inclusive id range and its embedding width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinSpec {
    pub first: TokenId,
    pub last: TokenId,
    pub dim: usize,
}

impl BinSpec {
    pub fn len(&self) -> usize {
        (self.last - self.first + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn range(&self) -> BinRange {
        BinRange {
            first: self.first,
            last: self.last,
        }
    }
}

/// Activation sites eligible for fake-quantization inside each layer.
/// Layer-norm and softmax outputs are deliberately absent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Query,
    Key,
    Value,
    Context,
    AttnOut,
    FfnHidden,
    FfnOut,
}

impl Site {
    pub const COUNT: usize = 7;
    pub const ALL: [Site; Site::COUNT] = [
        Site::Query,
        Site::Key,
        Site::Value,
        Site::Context,
        Site::AttnOut,
        Site::FfnHidden,
        Site::FfnOut,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub bins: Vec<BinSpec>,
    /// Per-layer attention window `C`.
    pub context: usize,
    /// Training window `C_e`.
    pub extended_context: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_ff: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_eps() -> f64 {
    1e-5
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    /// Full-scale reference architecture over a 267,735-token vocabulary.
    pub fn full_scale() -> Self {
        ModelConfig {
            bins: vec![
                BinSpec { first: 1, last: 3500, dim: 256 },
                BinSpec { first: 3501, last: 25_000, dim: 64 },
                BinSpec { first: 25_001, last: 267_735, dim: 4 },
            ],
            context: 97,
            extended_context: 1152,
            n_layers: 8,
            d_model: 256,
            n_heads: 8,
            d_k: 24,
            d_v: 24,
            d_ff: 768,
            dropout: 0.0,
            activation: Activation::Relu,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
        }
    }

    /// Attaches vocabulary bins to per-bin widths.
    pub fn bins_from_ranges(ranges: &[BinRange], dims: &[usize]) -> Result<Vec<BinSpec>> {
        if ranges.len() > dims.len() {
            return Err(Error::config(format!(
                "{} vocabulary bins but only {} embedding widths",
                ranges.len(),
                dims.len()
            )));
        }
        Ok(ranges
            .iter()
            .zip(dims)
            .map(|(r, &dim)| BinSpec {
                first: r.first,
                last: r.last,
                dim,
            })
            .collect())
    }

    pub fn vocab_size(&self) -> usize {
        self.bins.last().map_or(0, |b| b.last as usize)
    }

    /// Tokens that can influence one prediction: `L·(C−1)+1`.
    pub fn receptive_field(&self) -> usize {
        self.n_layers * (self.context - 1) + 1
    }

    /// Head softmax width: bin-0 tokens plus one cluster token per tail bin.
    pub fn head_size(&self) -> usize {
        self.bins[0].len() + self.bins.len() - 1
    }

    pub fn bin_of(&self, id: TokenId) -> Option<usize> {
        let k = self.bins.partition_point(|b| b.last < id);
        (k < self.bins.len() && id >= self.bins[k].first).then_some(k)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if self.bins.is_empty() {
            return bad("model needs at least one vocabulary bin".into());
        }
        let mut next = 1;
        for b in &self.bins {
            if b.first != next || b.last < b.first || b.dim == 0 {
                return bad(format!("bins {:?} do not partition the vocabulary", self.bins));
            }
            next = b.last + 1;
        }
        if self.context < 2 {
            return bad(format!("per-layer context {} < 2", self.context));
        }
        if self.extended_context < self.receptive_field() {
            return bad(format!(
                "extended context {} below receptive field {}",
                self.extended_context,
                self.receptive_field()
            ));
        }
        if self.n_layers == 0 || self.d_model < 2 || self.n_heads == 0 || self.d_k == 0 || self.d_v == 0 {
            return bad("model dimensions must be positive (d_model ≥ 2)".into());
        }
        if self.d_ff == 0 {
            return bad("d_ff must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) || !(self.init_std > 0.0) {
            return bad("layer_norm_eps and init_std must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn receptive_field_formula() {
        let c = ModelConfig::full_scale();
        assert_eq!(c.receptive_field(), 769);
        let mut small = c.clone();
        small.n_layers = 2;
        small.context = 3;
        assert_eq!(small.receptive_field(), 5);
    }

    #[test]
    fn full_scale_bins_and_lookup() {
        let c = ModelConfig::full_scale();
        c.validate().unwrap();
        assert_eq!(c.vocab_size(), 267_735);
        assert_eq!(c.bin_of(1), Some(0));
        assert_eq!(c.bins[c.bin_of(3501).unwrap()].dim, 64);
        assert_eq!(c.bin_of(267_736), None);
        assert_eq!(c.head_size(), 3502);
    }

    #[test]
    fn short_context_rejected() {
        let mut c = ModelConfig::full_scale();
        c.context = 1;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::full_scale();
        c.extended_context = 768;
        assert!(c.validate().is_err());
    }
}
