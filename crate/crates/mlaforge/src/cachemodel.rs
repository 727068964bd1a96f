//! KV-cache memory accounting and the round-to-nearest group-affine
//! quantizer for latent caches.
//!
//! Ratios are exact rationals. A converted model stores
//! `d_kv_per_head + 2r` scalars per token, per layer, per kv group against a
//! 16-bit baseline of `2 * d_h`; quantization multiplies the payload by
//! `bits/16`. Metadata (per-group scale and zero point) is reported
//! separately and excluded from the headline ratio.

use half::f16;
use num_rational::Ratio;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensorio::ModelConfig;
use crate::Mat32;

/// Bits per stored scalar in the uncompressed baseline cache.
pub const BASELINE_BITS: u64 = 16;

/// Fraction of the baseline cache a converted model stores, unquantized:
/// `(d_kv_per_head + 2r) / (2 d_h)`.
pub fn stored_fraction(cfg: &ModelConfig) -> Ratio<i64> {
    Ratio::new((cfg.d_kv_per_head + 2 * cfg.r) as i64, (2 * cfg.d_h) as i64)
}

/// Reduction ratio `1 - stored/baseline` for the unquantized latent cache.
pub fn cache_ratio(cfg: &ModelConfig) -> Ratio<i64> {
    Ratio::from_integer(1) - stored_fraction(cfg)
}

/// Reduction ratio with the latent cache additionally quantized to `bits`,
/// payload bits only. `bits = 16` is the identity and reproduces
/// [`cache_ratio`].
pub fn compound_ratio(cfg: &ModelConfig, bits: u64, baseline_bits: u64) -> Ratio<i64> {
    let stored = stored_fraction(cfg) * Ratio::new(bits as i64, baseline_bits as i64);
    Ratio::from_integer(1) - stored
}

/// Render a ratio as a percentage with two decimals, rounding half toward
/// zero (1/32 -> 3.12%, 59/64 -> 92.19%).
pub fn format_percent(value: Ratio<i64>) -> String {
    let scaled = value * Ratio::from_integer(10_000);
    let sign = if scaled < Ratio::from_integer(0) { "-" } else { "" };
    let abs = if scaled < Ratio::from_integer(0) { -scaled } else { scaled };
    let floor = abs.floor().to_integer();
    let frac = abs - Ratio::from_integer(floor);
    let rounded = if frac > Ratio::new(1, 2) { floor + 1 } else { floor };
    format!("{sign}{}.{:02}%", rounded / 100, rounded % 100)
}

/// The paper-style "KV Mem." delta: a reduction of 11/16 renders as
/// `-68.75%`.
pub fn format_reduction(reduction: Ratio<i64>) -> String {
    format_percent(-reduction)
}

/// One row of the memory accounting table.
#[derive(Debug, Clone, Serialize)]
pub struct CacheReport {
    pub variant: String,
    pub bits: u64,
    /// Scalars stored per token per layer (all kv groups).
    pub scalars_per_token_layer: u64,
    /// Scalars the 16-bit baseline stores per token per layer.
    pub baseline_scalars: u64,
    /// Payload bits stored per token per layer.
    pub stored_bits: u64,
    /// Quantizer metadata bits per token per layer (scales and zero points),
    /// excluded from the headline ratio.
    pub metadata_bits: u64,
    /// `1 - stored_bits / baseline_bits` as an exact fraction.
    pub reduction_num: i64,
    pub reduction_den: i64,
    /// The same reduction rendered the way the tables print it.
    pub kv_mem: String,
}

impl CacheReport {
    pub fn reduction(&self) -> Ratio<i64> {
        Ratio::new(self.reduction_num, self.reduction_den)
    }
}

/// Accounting row for a converted model; `bits = 16` means no quantization.
pub fn report(cfg: &ModelConfig, bits: u64, group_size: usize) -> CacheReport {
    let scalars = (cfg.n_g * (cfg.d_kv_per_head + 2 * cfg.r)) as u64;
    let baseline = (cfg.n_g * 2 * cfg.d_h) as u64;
    let reduction = compound_ratio(cfg, bits, BASELINE_BITS);
    let (metadata_bits, variant) = if bits >= BASELINE_BITS {
        (0u64, "latent".to_string())
    } else {
        let groups = scalars.div_ceil(group_size as u64);
        // One f16 scale + one f16 zero per group.
        (groups * 32, format!("latent+int{bits}"))
    };
    CacheReport {
        variant,
        bits,
        scalars_per_token_layer: scalars,
        baseline_scalars: baseline,
        stored_bits: scalars * bits,
        metadata_bits,
        reduction_num: *reduction.numer(),
        reduction_den: *reduction.denom(),
        kv_mem: format_reduction(reduction),
    }
}

/// Accounting row for quantizing the baseline cache itself (no conversion).
pub fn baseline_quant_report(cfg: &ModelConfig, bits: u64) -> CacheReport {
    let scalars = (cfg.n_g * 2 * cfg.d_h) as u64;
    let reduction = Ratio::from_integer(1) - Ratio::new(bits as i64, BASELINE_BITS as i64);
    CacheReport {
        variant: format!("baseline+int{bits}"),
        bits,
        scalars_per_token_layer: scalars,
        baseline_scalars: scalars,
        stored_bits: scalars * bits,
        metadata_bits: 0,
        reduction_num: *reduction.numer(),
        reduction_den: *reduction.denom(),
        kv_mem: format_reduction(reduction),
    }
}

// ---------------------------------------------------------------------------
// Group-affine quantizer

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct QuantSpec {
    /// Code width; 2, 4, or 8.
    pub bits: u8,
    /// Scalars per quantization group.
    pub group_size: usize,
}

impl QuantSpec {
    pub fn new(bits: u8, group_size: usize) -> Result<QuantSpec> {
        if !matches!(bits, 2 | 4 | 8) {
            return Err(Error::Config(format!("quantizer bits must be 2, 4, or 8, got {bits}")));
        }
        if group_size == 0 {
            return Err(Error::Config("quantizer group size must be positive".into()));
        }
        Ok(QuantSpec { bits, group_size })
    }

    pub fn levels(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    fn codes_per_byte(&self) -> usize {
        8 / self.bits as usize
    }
}

/// One quantized row: packed codes plus per-group affine metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedRow {
    pub codes: Vec<u8>,
    pub scales: Vec<f16>,
    pub zeros: Vec<f16>,
}

/// A batch of rows coded under one spec.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedRows {
    pub spec: QuantSpec,
    pub width: usize,
    pub rows: Vec<QuantizedRow>,
}

impl QuantizedRows {
    pub fn new(spec: QuantSpec, width: usize) -> QuantizedRows {
        QuantizedRows { spec, width, rows: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: &[f32]) {
        debug_assert_eq!(row.len(), self.width);
        self.rows.push(quantize_row(row, &self.spec));
    }

    pub fn row(&self, i: usize) -> Vec<f32> {
        dequantize_row(&self.rows[i], self.width, &self.spec)
    }
}

fn quantize_row(row: &[f32], spec: &QuantSpec) -> QuantizedRow {
    let levels = spec.levels() as f32;
    let n_groups = row.len().div_ceil(spec.group_size);
    let mut scales = Vec::with_capacity(n_groups);
    let mut zeros = Vec::with_capacity(n_groups);
    let mut flat_codes = Vec::with_capacity(row.len());
    for group in row.chunks(spec.group_size) {
        let min = group.iter().copied().fold(f32::INFINITY, f32::min);
        let max = group.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        // Encode against the f16-rounded metadata the decoder will see.
        let scale = f16::from_f32((max - min) / levels);
        let zero = f16::from_f32(min);
        let scale_f = scale.to_f32();
        let zero_f = zero.to_f32();
        for &x in group {
            let code = if scale_f == 0.0 {
                0
            } else {
                ((x - zero_f) / scale_f).round().clamp(0.0, levels) as u8
            };
            flat_codes.push(code);
        }
        scales.push(scale);
        zeros.push(zero);
    }
    QuantizedRow { codes: pack_codes(&flat_codes, spec), scales, zeros }
}

fn dequantize_row(row: &QuantizedRow, width: usize, spec: &QuantSpec) -> Vec<f32> {
    let codes = unpack_codes(&row.codes, width, spec);
    let mut out = Vec::with_capacity(width);
    for (i, code) in codes.into_iter().enumerate() {
        let g = i / spec.group_size;
        out.push(row.zeros[g].to_f32() + code as f32 * row.scales[g].to_f32());
    }
    out
}

/// Quantize every row of a matrix independently.
pub fn quantize_rows(rows: &Mat32, spec: &QuantSpec) -> QuantizedRows {
    let mut out = QuantizedRows::new(*spec, rows.cols());
    for i in 0..rows.rows() {
        out.push(rows.row(i));
    }
    out
}

/// Decode back to a dense matrix.
pub fn dequantize_rows(coded: &QuantizedRows) -> Mat32 {
    let mut out = Mat32::zeros(coded.len(), coded.width);
    for i in 0..coded.len() {
        out.row_mut(i).copy_from_slice(&coded.row(i));
    }
    out
}

/// Quantize-dequantize round trip, the value path every quantized cache row
/// takes.
pub fn quant_roundtrip(rows: &Mat32, spec: &QuantSpec) -> Mat32 {
    dequantize_rows(&quantize_rows(rows, spec))
}

fn pack_codes(codes: &[u8], spec: &QuantSpec) -> Vec<u8> {
    let per_byte = spec.codes_per_byte();
    let mut out = vec![0u8; codes.len().div_ceil(per_byte)];
    for (i, &c) in codes.iter().enumerate() {
        let shift = (i % per_byte) * spec.bits as usize;
        out[i / per_byte] |= c << shift;
    }
    out
}

fn unpack_codes(packed: &[u8], width: usize, spec: &QuantSpec) -> Vec<u8> {
    let per_byte = spec.codes_per_byte();
    let mask = ((1u16 << spec.bits) - 1) as u8;
    (0..width)
        .map(|i| {
            let shift = (i % per_byte) * spec.bits as usize;
            (packed[i / per_byte] >> shift) & mask
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::lowrank::SvdMode;
    use crate::rope::Strategy;

    fn paper_config(d_h: usize, r: usize, d_kv: usize) -> ModelConfig {
        ModelConfig {
            d: 4096,
            n_h: 32,
            n_g: 32,
            d_h,
            n_layers: 32,
            rope_base: 1e4,
            vocab: 32000,
            strategy: Strategy::TwoNorm,
            r,
            d_kv_per_head: d_kv,
            svd_mode: SvdMode::Joint,
        }
    }

    #[test]
    fn table_one_ratios() {
        // 7B/13B geometry: d_h = 128, r = 8.
        for (d_kv, expect) in [(64, "-68.75%"), (32, "-81.25%"), (16, "-87.50%")] {
            let cfg = paper_config(128, 8, d_kv);
            assert_eq!(format_reduction(cache_ratio(&cfg)), expect);
        }
        // SmolLM geometry: d_h = 64, r = 4.
        for (d_kv, expect) in [(32, "-68.75%"), (16, "-81.25%"), (8, "-87.50%")] {
            let cfg = paper_config(64, 4, d_kv);
            assert_eq!(format_reduction(cache_ratio(&cfg)), expect);
        }
    }

    #[test]
    fn table_two_compound_ratios() {
        for (d_kv, expect) in [(64, "-92.19%"), (32, "-95.31%"), (16, "-96.87%")] {
            let cfg = paper_config(128, 8, d_kv);
            assert_eq!(format_reduction(compound_ratio(&cfg, 4, 16)), expect);
        }
        // Identity quantization equals the plain ratio.
        let cfg = paper_config(128, 8, 64);
        assert_eq!(compound_ratio(&cfg, 16, 16), cache_ratio(&cfg));
    }

    #[test]
    fn baseline_quant_rows() {
        let cfg = paper_config(128, 8, 64);
        assert_eq!(baseline_quant_report(&cfg, 4).kv_mem, "-75.00%");
        assert_eq!(baseline_quant_report(&cfg, 2).kv_mem, "-87.50%");
    }

    #[test]
    fn percent_rounds_half_toward_zero() {
        assert_eq!(format_percent(Ratio::new(59, 64)), "92.19%"); // 92.1875
        assert_eq!(format_percent(Ratio::new(61, 64)), "95.31%"); // 95.3125
        assert_eq!(format_percent(Ratio::new(31, 32)), "96.87%"); // 96.875
        assert_eq!(format_percent(Ratio::new(-31, 32)), "-96.87%");
        assert_eq!(format_percent(Ratio::new(11, 16)), "68.75%");
    }

    #[test]
    fn constant_group_roundtrips_exactly() {
        let spec = QuantSpec::new(4, 4).unwrap();
        let m = Matrix::from_vec(1, 4, vec![5.0f32; 4]).unwrap();
        let back = quant_roundtrip(&m, &spec);
        assert_eq!(back.data(), m.data());
    }

    #[test]
    fn lattice_values_roundtrip_exactly() {
        let spec = QuantSpec::new(4, 16).unwrap();
        let vals: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let m = Matrix::from_vec(1, 16, vals.clone()).unwrap();
        let back = quant_roundtrip(&m, &spec);
        assert_eq!(back.data(), vals.as_slice());
    }

    #[test]
    fn error_bounded_by_half_scale() {
        let mut state = 0xfeedu64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64 - 0.5) as f32 * 4.0
        };
        for bits in [2u8, 4] {
            let spec = QuantSpec::new(bits, 32).unwrap();
            for _ in 0..50 {
                let row: Vec<f32> = (0..96).map(|_| next()).collect();
                let m = Matrix::from_vec(1, 96, row.clone()).unwrap();
                let coded = quantize_rows(&m, &spec);
                let back = coded.row(0);
                for (g, chunk) in row.chunks(32).enumerate() {
                    let scale = coded.rows[0].scales[g].to_f32();
                    for (j, &x) in chunk.iter().enumerate() {
                        let err = (x - back[g * 32 + j]).abs();
                        assert!(
                            err <= scale / 2.0 + 1e-6,
                            "bits={bits} err {err} > scale/2 {}",
                            scale / 2.0
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn requantization_is_idempotent() {
        let mut state = 0xabcdu64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64 - 0.5) as f32
        };
        let spec = QuantSpec::new(4, 8).unwrap();
        let m = Matrix::from_vec(4, 32, (0..128).map(|_| next()).collect()).unwrap();
        let once = quantize_rows(&m, &spec);
        let twice = quantize_rows(&dequantize_rows(&once), &spec);
        assert_eq!(once, twice);
    }

    #[test]
    fn short_last_group_handled() {
        let spec = QuantSpec::new(2, 5).unwrap();
        let vals: Vec<f32> = (0..7).map(|v| v as f32 * 0.5).collect();
        let m = Matrix::from_vec(1, 7, vals.clone()).unwrap();
        let coded = quantize_rows(&m, &spec);
        assert_eq!(coded.rows[0].scales.len(), 2);
        let back = coded.row(0);
        assert_eq!(back.len(), 7);
    }
}
