use crate::model::{ModelState, ParamId};
use crate::quant::{ActQuant, QuantParams};

/// Per-parameter pruning masks and quantization settings of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CompressionSpec {
    /// `true` marks a surviving entry; `None` means dense.
    pub masks: Vec<Option<Vec<bool>>>,
    pub weight_quant: Vec<Option<QuantParams>>,
    pub act_quant: Option<ActQuant>,
}

impl CompressionSpec {
    pub fn dense(state: &ModelState) -> Self {
        CompressionSpec {
            masks: vec![None; state.params.len()],
            weight_quant: vec![None; state.params.len()],
            act_quant: None,
        }
    }

    pub fn mask(&self, id: ParamId) -> Option<&[bool]> {
        self.masks.get(id.0).and_then(|m| m.as_deref())
    }

    pub fn quant(&self, id: ParamId) -> Option<QuantParams> {
        self.weight_quant.get(id.0).copied().flatten()
    }

    /// Storage width of a parameter's values.
    pub fn bits(&self, id: ParamId) -> u32 {
        self.quant(id).map_or(32, |q| q.bits)
    }

    pub fn survivors(&self, id: ParamId, numel: usize) -> usize {
        self.mask(id).map_or(numel, |m| m.iter().filter(|&&k| k).count())
    }

    pub fn is_quantized(&self) -> bool {
        self.weight_quant.iter().any(Option::is_some) || self.act_quant.is_some()
    }
}
