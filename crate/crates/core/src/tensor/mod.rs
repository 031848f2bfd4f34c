//! Dense row-major `f64` tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable value: shape plus shared flat storage.
//! Operations return fresh tensors; when an operand is attached to a
//! [`Tape`] the result is recorded so [`Tensor::backward`] can replay the
//! chain rule. Trainable parameters live in [`Param`] cells so that two
//! modules holding the same `Param` physically share storage and
//! gradients.

mod ops;
mod optim;
mod tape;

pub use optim::{adamw_step, AdamWConfig, AdamWState, MomentPrecision};
pub use tape::{Gradients, Param, Tape};

pub(crate) use ops::record_custom2;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

pub(crate) type NodeId = usize;

/// Dense row-major tensor of 64-bit reals, optionally attached to a tape.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    pub(crate) node: Option<(Tape, NodeId)>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || data.len() != numel {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                expected: format!("{numel} elements for shape {shape:?}"),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        assert!(!shape.is_empty() && numel > 0, "invalid shape {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
            node: None,
        }
    }

    /// 1-element tensor holding `value`.
    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    /// Normal(0, std) initialization, the default for all trainable weights.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite");
        let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        Self::new(data, shape).expect("randn shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Number of rows when the tensor is viewed as a matrix over its last
    /// dimension.
    pub fn lead_rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    /// Extracts the value of a 1-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "item",
                expected: "1 element".into(),
                got: format!("{:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    /// True when this tensor is recorded on a live tape.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, no tape attachment.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub(crate) fn with_node(&self, tape: &Tape, id: NodeId) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: Some((tape.clone(), id)),
        }
    }

    pub(crate) fn from_parts(data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub(crate) fn storage(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        let ell = if self.numel() > 8 { ", .." } else { "" };
        write!(
            f,
            "Tensor{:?} {:?}{} (tracked: {})",
            self.shape,
            preview,
            ell,
            self.requires_grad()
        )
    }
}

// ---------------------------------------------------------------------------
// Raw matrix kernels shared by the differentiable ops.
// ---------------------------------------------------------------------------

/// C[m,n] = A[m,k] * B[k,n]
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    crate::parallel::for_each_row(&mut out, n, m * n * k, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (j, r) in row.iter_mut().enumerate() {
                *r += av * br[j];
            }
        }
    });
    out
}

/// C[m,n] = A[m,k] * B[n,k]^T
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    crate::parallel::for_each_row(&mut out, n, m * n * k, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, r) in row.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += ar[p] * br[p];
            }
            *r = acc;
        }
    });
    out
}

/// C[k,n] = A[m,k]^T * B[m,n]
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    crate::parallel::for_each_row(&mut out, n, m * n * k, |p, row| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[i * n..(i + 1) * n];
            for (j, r) in row.iter_mut().enumerate() {
                *r += av * br[j];
            }
        }
    });
    out
}

pub(crate) fn transpose_data(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::new(vec![1.0, 2.0], &[2]).is_ok());
    }

    #[test]
    fn matmul_kernels_agree() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let c = mm_nn(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);

        let bt = transpose_data(&b, 3, 2); // 2x3
        let c2 = mm_nt(&a, &bt, 2, 3, 2);
        assert_eq!(c, c2);

        let at = transpose_data(&a, 2, 3); // 3x2
        let c3 = mm_tn(&at, &b, 3, 2, 2);
        assert_eq!(c, c3);
    }
}
