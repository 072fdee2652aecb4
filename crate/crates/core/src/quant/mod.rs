//! Symmetric linear-range fake-quantization.
//!
//! A tensor is quantized with one per-tensor inverse scale `s⁻¹` whose
//! lowest `w` significand bits are zero: `q = clamp(round(x·s⁻¹), ±qmax)`,
//! dequantized as `q / s⁻¹`. Storing the inverse keeps the dequantized grid
//! exactly reproducible from integer codes.

mod qat;

use microlm_autograd::kernels::fake_quant_value;
use serde::{Deserialize, Serialize};

use crate::model::{ModelState, ParamKind, Site};
use crate::{Error, Result};

pub use qat::{calibrate_activations, quantize_model, QuantizeOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub bits: u32,
    pub quantize_embeddings: bool,
    pub sites: Vec<Site>,
    pub calibration_batches: usize,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            bits: 9,
            quantize_embeddings: false,
            sites: Site::ALL.to_vec(),
            calibration_batches: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub inv_scale: f32,
    pub bits: u32,
}

impl QuantParams {
    pub fn scale(&self) -> f32 {
        1.0 / self.inv_scale
    }

    pub fn qmax(&self) -> i32 {
        qmax(self.bits)
    }
}

pub(crate) fn check_bits(bits: u32) -> Result<()> {
    if (2..=16).contains(&bits) {
        Ok(())
    } else {
        Err(Error::contract(format!("bit width {bits} outside [2, 16]")))
    }
}

pub fn qmax(bits: u32) -> i32 {
    (1 << (bits - 1)) - 1
}

/// Clears the lowest `w` bits of an `f32` significand.
pub fn enforce_mantissa(inverse_scale: f32, w: u32) -> Result<f32> {
    if w >= 23 {
        return Err(Error::contract(format!("cannot clear {w} of 23 significand bits")));
    }
    if !(inverse_scale.is_finite() && inverse_scale > 0.0) {
        return Err(Error::contract(format!("inverse scale {inverse_scale} not positive and finite")));
    }
    Ok(f32::from_bits(inverse_scale.to_bits() & !((1u32 << w) - 1)))
}

/// `max|x| / qmax` before the mantissa adjustment; 1 for all-zero input.
pub fn raw_scale(x: &[f32], bits: u32) -> Result<f32> {
    check_bits(bits)?;
    let m = x.iter().fold(0f32, |m, v| m.max(v.abs()));
    Ok(if m > 0.0 { m / qmax(bits) as f32 } else { 1.0 })
}

/// Scale whose inverse satisfies the mantissa constraint. Truncating the
/// inverse only widens the step, so `max|x|` never clips.
pub fn compute_scale(x: &[f32], bits: u32) -> Result<QuantParams> {
    let m = x.iter().fold(0f32, |m, v| m.max(v.abs()));
    check_bits(bits)?;
    let inv = if m > 0.0 { qmax(bits) as f32 / m } else { 1.0 };
    Ok(QuantParams {
        inv_scale: enforce_mantissa(inv, bits)?,
        bits,
    })
}

pub fn fake_quantize(x: &[f32], q: QuantParams) -> Vec<f32> {
    let qm = q.qmax() as f32;
    x.iter().map(|&v| fake_quant_value(v, q.inv_scale, qm).0).collect()
}

pub fn quantize_codes(x: &[f32], q: QuantParams) -> Vec<i32> {
    let qm = q.qmax() as f32;
    x.iter()
        .map(|&v| (v * q.inv_scale).round().clamp(-qm, qm) as i32)
        .collect()
}

pub fn dequantize(codes: &[i32], q: QuantParams) -> Vec<f32> {
    codes.iter().map(|&c| c as f32 / q.inv_scale).collect()
}

/// Whether the quantizer touches a parameter of this kind.
pub fn quantizes(kind: ParamKind, cfg: &QuantConfig) -> bool {
    match kind {
        ParamKind::Weight | ParamKind::Bias | ParamKind::PositionBias => true,
        ParamKind::EmbeddingTable | ParamKind::EmbeddingProjection => cfg.quantize_embeddings,
        ParamKind::Norm | ParamKind::CacheScalar => false,
    }
}

/// Per-parameter scales from current values.
pub fn plan_weights(state: &ModelState, cfg: &QuantConfig) -> Result<Vec<Option<QuantParams>>> {
    state
        .params
        .iter()
        .map(|p| {
            quantizes(p.kind, cfg)
                .then(|| compute_scale(p.tensor.data(), cfg.bits))
                .transpose()
        })
        .collect()
}

/// Running max-abs of every activation site, per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ActStats {
    pub max_abs: Vec<[f32; Site::COUNT]>,
}

impl ActStats {
    pub fn new(layers: usize) -> Self {
        ActStats {
            max_abs: vec![[0.0; Site::COUNT]; layers],
        }
    }

    pub fn observe(&mut self, layer: usize, site: Site, max_abs: f32) {
        let m = &mut self.max_abs[layer][site.index()];
        *m = m.max(max_abs);
    }
}

/// Activation fake-quantization: one inverse scale per (layer, site);
/// a zero entry disables the site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActQuant {
    pub bits: u32,
    pub inv_scales: Vec<[f32; Site::COUNT]>,
}

impl ActQuant {
    pub fn from_stats(stats: &ActStats, bits: u32, sites: &[Site]) -> Result<Self> {
        check_bits(bits)?;
        let inv_scales = stats
            .max_abs
            .iter()
            .map(|row| {
                let mut out = [0f32; Site::COUNT];
                for &s in sites {
                    let m = row[s.index()];
                    let inv = if m > 0.0 { qmax(bits) as f32 / m } else { 1.0 };
                    out[s.index()] = enforce_mantissa(inv, bits)?;
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Ok(ActQuant { bits, inv_scales })
    }

    pub fn enabled(&self, layer: usize, site: Site) -> bool {
        self.inv_scales[layer][site.index()] > 0.0
    }

    pub fn params(&self, layer: usize, site: Site) -> Option<QuantParams> {
        self.enabled(layer, site).then(|| QuantParams {
            inv_scale: self.inv_scales[layer][site.index()],
            bits: self.bits,
        })
    }
}
