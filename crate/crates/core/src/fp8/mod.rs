//! Software emulation of low-precision floating-point training pieces:
//! minifloat codecs, fine-grained (tile / block) scaled quantization with
//! optional power-of-two scales, transposed requantization for backward
//! passes, and GEMMs under emulated accumulator models.

mod gemm;
mod linear;

pub use gemm::{qgemm, qgemm_nt, AccMode, AccumulatorModel};
pub use linear::{fp8_linear, linear, LinearMode};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Group width for tile and block scaling, and the default promotion
/// interval of the emulated GEMM accumulator.
pub const GROUP: usize = 128;

/// Overflow behaviour of a minifloat format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Semantics {
    /// No infinities; the top exponent is ordinary except for the all-ones
    /// mantissa, which is NaN. Out-of-range values clamp to `max_finite`.
    SaturatingNoInf,
    /// IEEE-style: top exponent encodes infinity (mantissa 0) and NaNs;
    /// out-of-range values round to infinity.
    IeeeLike,
}

/// Bit-level description of a small floating-point format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FpFormat {
    pub exp_bits: u32,
    pub man_bits: u32,
    pub bias: i32,
    pub semantics: Semantics,
}

impl FpFormat {
    /// 1-4-3, bias 7, saturating, max finite 448.
    pub fn e4m3() -> Self {
        FpFormat {
            exp_bits: 4,
            man_bits: 3,
            bias: 7,
            semantics: Semantics::SaturatingNoInf,
        }
    }

    /// 1-5-2, bias 15, IEEE-like, max finite 57344.
    pub fn e5m2() -> Self {
        FpFormat {
            exp_bits: 5,
            man_bits: 2,
            bias: 15,
            semantics: Semantics::IeeeLike,
        }
    }

    /// 12-bit 1-5-6, bias 15, IEEE-like, with subnormals.
    pub fn e5m6() -> Self {
        FpFormat {
            exp_bits: 5,
            man_bits: 6,
            bias: 15,
            semantics: Semantics::IeeeLike,
        }
    }

    pub fn total_bits(&self) -> u32 {
        1 + self.exp_bits + self.man_bits
    }

    pub fn code_count(&self) -> usize {
        1usize << self.total_bits()
    }

    fn exp_mask(&self) -> u16 {
        ((1u32 << self.exp_bits) - 1) as u16
    }

    fn man_mask(&self) -> u16 {
        ((1u32 << self.man_bits) - 1) as u16
    }

    /// Largest finite magnitude representable in this format.
    pub fn max_finite(&self) -> f64 {
        let emax_field = self.exp_mask() as i32;
        match self.semantics {
            Semantics::SaturatingNoInf => {
                // Top exponent, mantissa all-ones-minus-one.
                let m = (self.man_mask() - 1) as f64;
                pow2(emax_field - self.bias) * (1.0 + m / pow2(self.man_bits as i32))
            }
            Semantics::IeeeLike => {
                let m = self.man_mask() as f64;
                pow2(emax_field - 1 - self.bias) * (1.0 + m / pow2(self.man_bits as i32))
            }
        }
    }

    /// Smallest positive (subnormal) step.
    fn min_step_exp(&self) -> i32 {
        1 - self.bias - self.man_bits as i32
    }

    /// Decodes a code point. Exact for every representable value.
    pub fn decode(&self, code: u16) -> f64 {
        let sign = if (code >> (self.exp_bits + self.man_bits)) & 1 == 1 {
            -1.0
        } else {
            1.0
        };
        let e = (code >> self.man_bits) & self.exp_mask();
        let m = code & self.man_mask();
        if e == 0 {
            return sign * m as f64 * pow2(self.min_step_exp());
        }
        if e == self.exp_mask() {
            match self.semantics {
                Semantics::IeeeLike => {
                    return if m == 0 {
                        sign * f64::INFINITY
                    } else {
                        f64::NAN.copysign(sign)
                    };
                }
                Semantics::SaturatingNoInf => {
                    if m == self.man_mask() {
                        return f64::NAN.copysign(sign);
                    }
                }
            }
        }
        sign * pow2(e as i32 - self.bias) * (1.0 + m as f64 / pow2(self.man_bits as i32))
    }

    /// Encodes with round-to-nearest-even. Values past `max_finite`
    /// saturate (saturating semantics) or overflow to infinity (IEEE-like).
    /// NaN maps to the reserved all-ones NaN code.
    pub fn encode(&self, x: f64) -> u16 {
        let sign_bit = if x.is_sign_negative() {
            1u16 << (self.exp_bits + self.man_bits)
        } else {
            0
        };
        if x.is_nan() {
            return sign_bit | (self.exp_mask() << self.man_bits) | self.man_mask();
        }
        let a = x.abs();
        let max = self.max_finite();
        if a.is_infinite() {
            return match self.semantics {
                Semantics::SaturatingNoInf => sign_bit | self.fields_of(max),
                Semantics::IeeeLike => sign_bit | (self.exp_mask() << self.man_bits),
            };
        }
        if a == 0.0 {
            return sign_bit;
        }
        // Round onto the format grid at the magnitude's own binade.
        let e_unb = exponent_floor(a);
        let step_exp = if e_unb < 1 - self.bias {
            self.min_step_exp()
        } else {
            e_unb - self.man_bits as i32
        };
        let step = pow2(step_exp);
        let q = (a / step).round_ties_even() * step;
        if q > max {
            return match self.semantics {
                Semantics::SaturatingNoInf => sign_bit | self.fields_of(max),
                Semantics::IeeeLike => sign_bit | (self.exp_mask() << self.man_bits),
            };
        }
        sign_bit | self.fields_of(q)
    }

    /// Field encoding of an exactly representable non-negative magnitude.
    fn fields_of(&self, q: f64) -> u16 {
        if q == 0.0 {
            return 0;
        }
        let e_unb = exponent_floor(q);
        if e_unb < 1 - self.bias {
            // Subnormal.
            let m = (q / pow2(self.min_step_exp())) as u16;
            return m;
        }
        let e_field = (e_unb + self.bias) as u16;
        let m = ((q / pow2(e_unb) - 1.0) * pow2(self.man_bits as i32)) as u16;
        (e_field << self.man_bits) | m
    }

    /// Full decode table, indexed by code.
    pub fn decode_table(&self) -> Vec<f64> {
        (0..self.code_count() as u16).map(|c| self.decode(c)).collect()
    }
}

/// `2^e` as f64, exact over the exponent range used here.
#[inline]
pub(crate) fn pow2(e: i32) -> f64 {
    f64::from_bits(((e + 1023) as u64) << 52)
}

/// Floor of log2(|x|) for positive finite x, via bit extraction.
#[inline]
pub(crate) fn exponent_floor(x: f64) -> i32 {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let e = ((bits >> 52) & 0x7FF) as i32;
    if e != 0 {
        e - 1023
    } else {
        // f64 subnormal: renormalize.
        exponent_floor(x * pow2(64)) - 64
    }
}

/// True when `x` is exactly a (normal) power of two.
pub(crate) fn is_pow2(x: f64) -> bool {
    if !(x > 0.0) || !x.is_finite() {
        return false;
    }
    let bits = x.to_bits();
    (bits & 0x000F_FFFF_FFFF_FFFF) == 0 && ((bits >> 52) & 0x7FF) != 0
}

/// Smallest power of two that is >= s.
pub(crate) fn pow2_round_up(s: f64) -> f64 {
    debug_assert!(s > 0.0 && s.is_finite());
    let mut p = pow2(exponent_floor(s));
    if p < s {
        p *= 2.0;
    }
    p
}

// ---------------------------------------------------------------------------
// Grouped quantization
// ---------------------------------------------------------------------------

/// Scale-sharing layout. Tiles are `1x128` row segments (per token per 128
/// channels); blocks are `128x128`; tensor-wise shares one scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    Tile1x128,
    Block128x128,
    TensorWise,
}

/// Quantized tensor: integer codes plus per-group scales.
#[derive(Debug, Clone)]
pub struct QuantTensor {
    codes: Vec<u16>,
    scales: Vec<f64>,
    pub grouping: Grouping,
    pub format: FpFormat,
    shape: Vec<usize>,
}

impl QuantTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[..self.shape.len() - 1].iter().product()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    fn tiles_per_row(&self) -> usize {
        self.cols().div_ceil(GROUP)
    }

    /// Scale applied to logical element `(row, col)`.
    pub fn scale_at(&self, row: usize, col: usize) -> f64 {
        match self.grouping {
            Grouping::TensorWise => self.scales[0],
            Grouping::Tile1x128 => self.scales[row * self.tiles_per_row() + col / GROUP],
            Grouping::Block128x128 => {
                let bcols = self.cols().div_ceil(GROUP);
                self.scales[(row / GROUP) * bcols + col / GROUP]
            }
        }
    }

    /// Reconstructs the represented tensor (`decode(code) * scale`).
    pub fn dequantize(&self) -> Tensor {
        let table = self.format.decode_table();
        let (rows, cols) = (self.rows(), self.cols());
        let mut data = vec![0.0; self.codes.len()];
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                data[i] = table[self.codes[i] as usize] * self.scale_at(r, c);
            }
        }
        Tensor::from_parts(data, self.shape.clone())
    }
}

/// Quantizes `x` with online (per-call) group scales: each group's scale is
/// `amax / max_finite`, optionally rounded up to a power of two. All-zero
/// groups use scale 1 and zero codes.
pub fn quantize(x: &Tensor, grouping: Grouping, format: FpFormat, pow2_scales: bool) -> QuantTensor {
    let rows = x.lead_rows();
    let cols = x.last_dim();
    let data = x.data();
    let max = format.max_finite();

    let group_of = |r: usize, c: usize| -> usize {
        match grouping {
            Grouping::TensorWise => 0,
            Grouping::Tile1x128 => r * cols.div_ceil(GROUP) + c / GROUP,
            Grouping::Block128x128 => (r / GROUP) * cols.div_ceil(GROUP) + c / GROUP,
        }
    };
    let n_groups = match grouping {
        Grouping::TensorWise => 1,
        Grouping::Tile1x128 => rows * cols.div_ceil(GROUP),
        Grouping::Block128x128 => rows.div_ceil(GROUP) * cols.div_ceil(GROUP),
    };

    let mut amax = vec![0.0f64; n_groups];
    for r in 0..rows {
        for c in 0..cols {
            let g = group_of(r, c);
            amax[g] = amax[g].max(data[r * cols + c].abs());
        }
    }
    let scales: Vec<f64> = amax
        .iter()
        .map(|&a| {
            if a == 0.0 {
                1.0
            } else {
                let s = a / max;
                if pow2_scales {
                    pow2_round_up(s)
                } else {
                    s
                }
            }
        })
        .collect();

    let mut codes = vec![0u16; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            codes[i] = format.encode(data[i] / scales[group_of(r, c)]);
        }
    }
    QuantTensor {
        codes,
        scales,
        grouping,
        format,
        shape: x.shape().to_vec(),
    }
}

/// Re-tiles a row-tiled activation along the other axis for the backward
/// pass: dequantize, transpose, and requantize the transpose in `1x128`
/// row tiles (equivalently, `128x1` column tiles of the original). The
/// input must carry power-of-two scales so the regrouping introduces at
/// most one rounding step at a power-of-two-related scale.
pub fn requantize_transpose(q: &QuantTensor) -> Result<QuantTensor> {
    if q.grouping != Grouping::Tile1x128 {
        return Err(Error::Quant(format!(
            "requantize_transpose expects tile-1x128 input, got {:?}",
            q.grouping
        )));
    }
    if let Some(s) = q.scales.iter().find(|s| !is_pow2(**s)) {
        return Err(Error::Quant(format!(
            "requantize_transpose requires power-of-two scales, found {s}"
        )));
    }
    let deq = q.dequantize();
    let (rows, cols) = (q.rows(), q.cols());
    let t = super::tensor::transpose_data(deq.data(), rows, cols);
    let tt = Tensor::from_parts(t, vec![cols, rows]);
    Ok(quantize(&tt, Grouping::Tile1x128, q.format, true))
}

// ---------------------------------------------------------------------------
// Error metrics
// ---------------------------------------------------------------------------

/// Max and mean over elements of `|a - r| / max(|r|, floor)`.
#[derive(Debug, Clone, Copy)]
pub struct RelativeError {
    pub max: f64,
    pub mean: f64,
}

pub fn relative_error(approx: &Tensor, reference: &Tensor, floor: f64) -> Result<RelativeError> {
    if approx.shape() != reference.shape() {
        return Err(Error::ShapeMismatch {
            op: "relative_error",
            expected: format!("{:?}", reference.shape()),
            got: format!("{:?}", approx.shape()),
        });
    }
    if reference.data().iter().all(|&v| v == 0.0) {
        return Err(Error::Quant("relative_error: reference is all zero".into()));
    }
    let mut max = 0.0f64;
    let mut sum = 0.0f64;
    for (&a, &r) in approx.data().iter().zip(reference.data()) {
        let e = (a - r).abs() / r.abs().max(floor);
        max = max.max(e);
        sum += e;
    }
    Ok(RelativeError {
        max,
        mean: sum / approx.numel() as f64,
    })
}

/// Relative error normalized by the largest reference magnitude — the
/// matrix-level metric used for the GEMM accumulation studies.
pub fn relative_error_vs_max(approx: &Tensor, reference: &Tensor) -> Result<RelativeError> {
    let floor = reference
        .data()
        .iter()
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    relative_error(approx, reference, floor)
}

// ---------------------------------------------------------------------------
// On-disk layout
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"QT01";

impl QuantTensor {
    /// Stable little-endian layout: magic, format descriptor, grouping,
    /// shape, 64-bit scales, 16-bit codes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(self.format.exp_bits as u8);
        out.push(self.format.man_bits as u8);
        out.extend_from_slice(&(self.format.bias as i16).to_le_bytes());
        out.push(match self.format.semantics {
            Semantics::SaturatingNoInf => 0,
            Semantics::IeeeLike => 1,
        });
        out.push(match self.grouping {
            Grouping::Tile1x128 => 0,
            Grouping::Block128x128 => 1,
            Grouping::TensorWise => 2,
        });
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.scales.len() as u64).to_le_bytes());
        for &s in &self.scales {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&(self.codes.len() as u64).to_le_bytes());
        for &c in &self.codes {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<QuantTensor> {
        let err = |m: &str| Error::Serialization(m.to_string());
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(err("truncated"));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(err("bad magic"));
        }
        let exp_bits = take(&mut pos, 1)?[0] as u32;
        let man_bits = take(&mut pos, 1)?[0] as u32;
        let bias = i16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as i32;
        let semantics = match take(&mut pos, 1)?[0] {
            0 => Semantics::SaturatingNoInf,
            1 => Semantics::IeeeLike,
            _ => return Err(err("bad semantics tag")),
        };
        let grouping = match take(&mut pos, 1)?[0] {
            0 => Grouping::Tile1x128,
            1 => Grouping::Block128x128,
            2 => Grouping::TensorWise,
            _ => return Err(err("bad grouping tag")),
        };
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n_scales = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let mut scales = Vec::with_capacity(n_scales);
        for _ in 0..n_scales {
            scales.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        let n_codes = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        if n_codes != shape.iter().product::<usize>() {
            return Err(err("code count does not match shape"));
        }
        let mut codes = Vec::with_capacity(n_codes);
        for _ in 0..n_codes {
            codes.push(u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()));
        }
        if pos != bytes.len() {
            return Err(err("trailing bytes"));
        }
        Ok(QuantTensor {
            codes,
            scales,
            grouping,
            format: FpFormat {
                exp_bits,
                man_bits,
                bias,
                semantics,
            },
            shape,
        })
    }
}
