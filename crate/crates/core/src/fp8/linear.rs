//! Tape-integrated linear layer that runs its forward and both backward
//! GEMMs through the emulated FP8 pipeline.
//!
//! Forward: activations are tiled `1x128` along the input features with
//! power-of-two scales (they are cached in quantized form for the backward
//! pass); the weight is block-quantized. Backward: the activation gradient
//! GEMM quantizes the incoming gradient online, and the weight-gradient
//! GEMM re-tiles both cached activations and gradients along the token
//! axis via `requantize_transpose`.

use super::{qgemm, qgemm_nt, quantize, requantize_transpose, AccumulatorModel, FpFormat, Grouping};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Numeric path for the projection/FFN matmuls of a model: exact f64 or
/// the emulated low-precision pipeline.
#[derive(Debug, Clone, Copy)]
pub enum LinearMode {
    Exact,
    Fp8 {
        format: FpFormat,
        acc: AccumulatorModel,
    },
}

impl LinearMode {
    /// The production recipe: E4M3 everywhere with promoted accumulation.
    pub fn fp8_default() -> Self {
        LinearMode::Fp8 {
            format: FpFormat::e4m3(),
            acc: AccumulatorModel::promoted(14, super::GROUP),
        }
    }
}

/// `x[T, d_in] * w[d_out, d_in]^T` under the chosen numeric path.
pub fn linear(x: &Tensor, w: &Tensor, mode: LinearMode) -> Result<Tensor> {
    match mode {
        LinearMode::Exact => x.matmul(&w.transpose()?),
        LinearMode::Fp8 { format, acc } => fp8_linear(x, w, format, acc),
    }
}

/// `x[T, d_in] * w[d_out, d_in]^T -> [T, d_out]` with FP8-emulated GEMMs.
///
/// Embeddings, heads, norms and router gates stay in full precision; this
/// op is meant for the projection/FFN matmuls only.
pub fn fp8_linear(
    x: &Tensor,
    w: &Tensor,
    format: FpFormat,
    acc: AccumulatorModel,
) -> Result<Tensor> {
    let (t, d_in) = match x.shape() {
        [t, d] => (*t, *d),
        s => {
            return Err(Error::ShapeMismatch {
                op: "fp8_linear",
                expected: "2-D activations".into(),
                got: format!("{s:?}"),
            })
        }
    };
    let (d_out, d_in_w) = match w.shape() {
        [o, i] => (*o, *i),
        s => {
            return Err(Error::ShapeMismatch {
                op: "fp8_linear",
                expected: "2-D weight".into(),
                got: format!("{s:?}"),
            })
        }
    };
    if d_in != d_in_w {
        return Err(Error::ShapeMismatch {
            op: "fp8_linear",
            expected: format!("weight [{d_out}, {d_in}]"),
            got: format!("{:?}", w.shape()),
        });
    }

    // Forward GEMM: X (1x128 tiles, pow2 scales) times W^T (block scales).
    let q_x = quantize(&x.detach(), Grouping::Tile1x128, format, true);
    let wt = w.detach().transpose()?;
    let q_wt = quantize(&wt, Grouping::Block128x128, format, false);
    let y = qgemm(&q_x, &q_wt, &acc)?;

    crate::tensor::record_custom2(x, w, y, move |g| {
        // g: [T, d_out]
        let gt = Tensor::from_parts(g.to_vec(), vec![t, d_out]);
        let q_g = quantize(&gt, Grouping::Tile1x128, format, true);
        // Activation gradient: dX = dY * W, inner dim d_out.
        let w2 = Tensor::from_parts(
            q_wt.dequantize().transpose().expect("2-D").data().to_vec(),
            vec![d_out, d_in],
        );
        let q_w = quantize(&w2, Grouping::Block128x128, format, false);
        let dx = qgemm(&q_g, &q_w, &acc).expect("dgrad gemm");
        // Weight gradient: dW = dY^T * X, inner dim T; both operands are
        // re-tiled along the token axis.
        let gyt = requantize_transpose(&q_g).expect("retile dY");
        let xt = requantize_transpose(&q_x).expect("retile X");
        let dw = qgemm_nt(&gyt, &xt, &acc).expect("wgrad gemm");
        (dx.data().to_vec(), dw.data().to_vec())
    })
}

