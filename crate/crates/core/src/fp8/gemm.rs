//! GEMM over quantized operands under emulated accumulator models.
//!
//! The inner dimension is processed in chunks of `promotion_interval`
//! elements. Scales must be constant within each chunk on both sides, which
//! is what per-group scaling along the inner dimension guarantees.
//!
//! Accumulator models:
//! - `Full`: exact f64 accumulation (the reference behaviour).
//! - `LimitedFixedPoint`: one fixed-point accumulator across the whole
//!   inner dimension. Each code-product addend is aligned to the running
//!   maximum exponent and truncated to `retained_bits` bits (arithmetic
//!   right shift, i.e. floor) before the add. Requires a single scale per
//!   output element, so both operands must be tensor-wise quantized.
//! - `Promoted`: the same fixed-point accumulation inside each chunk, with
//!   the partial result promoted into an exact f64 accumulator (after
//!   dequantization by the chunk's scales) every `promotion_interval`
//!   elements.

use super::{exponent_floor, pow2, Grouping, QuantTensor, GROUP};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccMode {
    Full,
    LimitedFixedPoint,
    Promoted,
}

#[derive(Debug, Clone, Copy)]
pub struct AccumulatorModel {
    pub mode: AccMode,
    /// Bits retained of each aligned addend (default 14).
    pub retained_bits: u32,
    /// Inner-dimension interval between promotions (default 128).
    pub promotion_interval: usize,
}

impl AccumulatorModel {
    pub fn full() -> Self {
        Self {
            mode: AccMode::Full,
            retained_bits: 14,
            promotion_interval: GROUP,
        }
    }

    pub fn limited(retained_bits: u32) -> Self {
        assert!(retained_bits >= 1);
        Self {
            mode: AccMode::LimitedFixedPoint,
            retained_bits,
            promotion_interval: GROUP,
        }
    }

    pub fn promoted(retained_bits: u32, promotion_interval: usize) -> Self {
        assert!(retained_bits >= 1 && promotion_interval >= 1);
        Self {
            mode: AccMode::Promoted,
            retained_bits,
            promotion_interval,
        }
    }
}

/// Fixed-point accumulator keeping roughly `retained` bits of each addend
/// below the running maximum exponent: addends are aligned to the window
/// anchored at that exponent and floor-truncated (arithmetic right shift)
/// at quantum `2^(E - retained)` before the add. The window never shrinks.
struct LimitedAcc {
    acc: f64,
    max_exp: i32,
    seen: bool,
    retained: i32,
}

impl LimitedAcc {
    fn new(retained_bits: u32) -> Self {
        Self {
            acc: 0.0,
            max_exp: 0,
            seen: false,
            retained: retained_bits as i32,
        }
    }

    #[inline]
    fn add(&mut self, p: f64) {
        if p == 0.0 {
            return;
        }
        let mut e = exponent_floor(p.abs());
        if self.acc != 0.0 {
            e = e.max(exponent_floor(self.acc.abs()));
        }
        if !self.seen || e > self.max_exp {
            self.max_exp = e;
            self.seen = true;
        }
        let quantum = pow2(self.max_exp - self.retained);
        self.acc += (p / quantum).floor() * quantum;
    }

    fn value(&self) -> f64 {
        self.acc
    }
}

/// Validates that the scale groups of `q` along the axis used as the inner
/// dimension are constant over `[start, end)` and returns that scale.
/// `by_row=false` means the inner index walks rows (operand B).
fn chunk_scale(
    q: &QuantTensor,
    fixed: usize,
    start: usize,
    end: usize,
    inner_is_col: bool,
) -> Result<f64> {
    let (s0, s1) = if inner_is_col {
        (q.scale_at(fixed, start), q.scale_at(fixed, end - 1))
    } else {
        (q.scale_at(start, fixed), q.scale_at(end - 1, fixed))
    };
    if s0 != s1 {
        return Err(Error::MisalignedGroups(format!(
            "scale group changes inside inner chunk [{start}, {end})"
        )));
    }
    Ok(s0)
}

fn check_operand_a(a: &QuantTensor) -> Result<()> {
    match a.grouping {
        Grouping::Tile1x128 | Grouping::TensorWise => Ok(()),
        g => Err(Error::MisalignedGroups(format!(
            "operand A must be tile-1x128 or tensor-wise along the inner dimension, got {g:?}"
        ))),
    }
}

/// `A[m,K] * B[K,n]`, with A tiled along K and B block- or tensor-scaled.
pub fn qgemm(a: &QuantTensor, b: &QuantTensor, acc: &AccumulatorModel) -> Result<Tensor> {
    check_operand_a(a)?;
    match b.grouping {
        Grouping::Block128x128 | Grouping::TensorWise => {}
        g => {
            return Err(Error::MisalignedGroups(format!(
                "operand B of qgemm must be block-128x128 or tensor-wise, got {g:?}"
            )))
        }
    }
    let (m, k) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if k != kb {
        return Err(Error::ShapeMismatch {
            op: "qgemm",
            expected: format!("inner dim {k}"),
            got: format!("inner dim {kb}"),
        });
    }
    gemm_impl(a, b, acc, m, k, n, false)
}

/// `A[m,K] * B[n,K]^T`, both operands tiled along K. This is the form the
/// weight-gradient pass uses after re-tiling cached activations along the
/// token axis.
pub fn qgemm_nt(a: &QuantTensor, b: &QuantTensor, acc: &AccumulatorModel) -> Result<Tensor> {
    check_operand_a(a)?;
    check_operand_a(b)?;
    let (m, k) = (a.rows(), a.cols());
    let (n, kb) = (b.rows(), b.cols());
    if k != kb {
        return Err(Error::ShapeMismatch {
            op: "qgemm_nt",
            expected: format!("inner dim {k}"),
            got: format!("inner dim {kb}"),
        });
    }
    gemm_impl(a, b, acc, m, k, n, true)
}

fn gemm_impl(
    a: &QuantTensor,
    b: &QuantTensor,
    acc: &AccumulatorModel,
    m: usize,
    k: usize,
    n: usize,
    b_transposed: bool,
) -> Result<Tensor> {
    let nc = acc.promotion_interval;
    if nc == 0 {
        return Err(Error::MisalignedGroups("promotion interval of 0".into()));
    }
    // Chunk boundaries along K; every chunk must sit inside one scale group
    // on both sides.
    let mut chunks: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    while start < k {
        let end = (start + nc).min(k);
        chunks.push((start, end));
        start = end;
    }
    // Pre-validate chunk scales for every row/col group pattern.
    // A's scale varies by row; B's by column (or row of B^T).
    for &(cs, ce) in &chunks {
        for i in 0..m {
            chunk_scale(a, i, cs, ce, true)?;
        }
        for j in 0..n {
            if b_transposed {
                chunk_scale(b, j, cs, ce, true)?;
            } else {
                chunk_scale(b, j, cs, ce, false)?;
            }
        }
        if acc.mode == AccMode::LimitedFixedPoint {
            // A single fixed-point accumulator spans all chunks, so the
            // dequantization scale must be uniform across them.
            if a.grouping != Grouping::TensorWise || b.grouping != Grouping::TensorWise {
                return Err(Error::MisalignedGroups(
                    "limited-fixed-point accumulation requires tensor-wise scales".into(),
                ));
            }
        }
    }

    let ta = a.format.decode_table();
    let tb = b.format.decode_table();
    let ad: Vec<f64> = a.codes().iter().map(|&c| ta[c as usize]).collect();
    let bd: Vec<f64> = b.codes().iter().map(|&c| tb[c as usize]).collect();

    let mut out = vec![0.0; m * n];
    let chunks_ref = &chunks;
    let ad_ref = &ad;
    let bd_ref = &bd;
    crate::parallel::for_each_row(&mut out, n, m * n * k, |i, row| {
        for (j, r) in row.iter_mut().enumerate() {
            *r = match acc.mode {
                AccMode::Full => {
                    let mut master = 0.0;
                    for &(cs, ce) in chunks_ref {
                        let sa = a.scale_at(i, cs);
                        let sb = if b_transposed {
                            b.scale_at(j, cs)
                        } else {
                            b.scale_at(cs, j)
                        };
                        let mut sum = 0.0;
                        for p in cs..ce {
                            let bv = if b_transposed {
                                bd_ref[j * k + p]
                            } else {
                                bd_ref[p * n + j]
                            };
                            sum += ad_ref[i * k + p] * bv;
                        }
                        master += sum * (sa * sb);
                    }
                    master
                }
                AccMode::LimitedFixedPoint => {
                    let sa = a.scale_at(i, 0);
                    let sb = if b_transposed {
                        b.scale_at(j, 0)
                    } else {
                        b.scale_at(0, j)
                    };
                    let mut lim = LimitedAcc::new(acc.retained_bits);
                    for p in 0..k {
                        let bv = if b_transposed {
                            bd_ref[j * k + p]
                        } else {
                            bd_ref[p * n + j]
                        };
                        lim.add(ad_ref[i * k + p] * bv);
                    }
                    lim.value() * (sa * sb)
                }
                AccMode::Promoted => {
                    let mut master = 0.0;
                    for &(cs, ce) in chunks_ref {
                        let sa = a.scale_at(i, cs);
                        let sb = if b_transposed {
                            b.scale_at(j, cs)
                        } else {
                            b.scale_at(cs, j)
                        };
                        let mut lim = LimitedAcc::new(acc.retained_bits);
                        for p in cs..ce {
                            let bv = if b_transposed {
                                bd_ref[j * k + p]
                            } else {
                                bd_ref[p * n + j]
                            };
                            lim.add(ad_ref[i * k + p] * bv);
                        }
                        master += lim.value() * (sa * sb);
                    }
                    master
                }
            };
        }
    });
    Ok(Tensor::from_parts(out, vec![m, n]))
}
