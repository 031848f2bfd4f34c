//! Differentiable operations on [`Tensor`].
//!
//! Each op validates shapes, computes the forward value, and, when an
//! operand is tracked, records a backward rule on the tape. Fused ops
//! (rmsnorm, rope, softmax variants) carry hand-written vector-Jacobian
//! products that the finite-difference property tests cross-check.

use std::sync::Arc;

use super::tape::Node;
use super::{mm_nn, mm_nt, mm_tn, transpose_data, Tensor};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Recording helpers
// ---------------------------------------------------------------------------

fn record1<F>(x: &Tensor, out: Tensor, back: F) -> Tensor
where
    F: Fn(&[f64]) -> Vec<f64> + 'static,
{
    match &x.node {
        Some((tape, id)) => {
            let node_id = tape.push(Node {
                parents: vec![*id],
                back: Some(Box::new(move |g, slots| slots[0] = Some(back(g)))),
                shape: out.shape().to_vec(),
            });
            out.with_node(tape, node_id)
        }
        None => out,
    }
}

fn record2<FA, FB>(a: &Tensor, b: &Tensor, out: Tensor, back_a: FA, back_b: FB) -> Result<Tensor>
where
    FA: Fn(&[f64]) -> Vec<f64> + 'static,
    FB: Fn(&[f64]) -> Vec<f64> + 'static,
{
    let tape = match (&a.node, &b.node) {
        (None, None) => return Ok(out),
        (Some((ta, _)), Some((tb, _))) if !ta.same_tape(tb) => return Err(Error::TapeMismatch),
        (Some((t, _)), _) | (None, Some((t, _))) => t.clone(),
    };
    let mut parents = Vec::new();
    let a_pos = a.node.as_ref().map(|(_, id)| {
        parents.push(*id);
        parents.len() - 1
    });
    let b_pos = b.node.as_ref().map(|(_, id)| {
        parents.push(*id);
        parents.len() - 1
    });
    let node_id = tape.push(Node {
        parents,
        back: Some(Box::new(move |g, slots| {
            if let Some(p) = a_pos {
                slots[p] = Some(back_a(g));
            }
            if let Some(p) = b_pos {
                slots[p] = Some(back_b(g));
            }
        })),
        shape: out.shape().to_vec(),
    });
    Ok(out.with_node(&tape, node_id))
}

// ---------------------------------------------------------------------------
// Elementwise binary ops with limited broadcasting
// ---------------------------------------------------------------------------

/// Supported operand layouts for elementwise binary ops: identical shapes,
/// a 1-element scalar on either side, or a `[m, 1]` column against `[m, n]`.
#[derive(Clone, Copy, PartialEq)]
enum Broadcast {
    Equal,
    ScalarLeft,
    ScalarRight,
    ColLeft,
    ColRight,
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Equal);
    }
    if b.numel() == 1 {
        return Ok(Broadcast::ScalarRight);
    }
    if a.numel() == 1 {
        return Ok(Broadcast::ScalarLeft);
    }
    let col_of = |big: &Tensor, small: &Tensor| {
        small.shape().len() == 2
            && small.shape()[1] == 1
            && big.shape().len() == 2
            && big.shape()[0] == small.shape()[0]
    };
    if col_of(a, b) {
        return Ok(Broadcast::ColRight);
    }
    if col_of(b, a) {
        return Ok(Broadcast::ColLeft);
    }
    Err(Error::ShapeMismatch {
        op,
        expected: format!("{:?}", a.shape()),
        got: format!("{:?}", b.shape()),
    })
}

/// Expands an operand index for the given broadcast role.
#[inline]
fn bval(data: &[f64], kind: Broadcast, left: bool, i: usize, cols: usize) -> f64 {
    match (kind, left) {
        (Broadcast::Equal, _) => data[i],
        (Broadcast::ScalarLeft, true) | (Broadcast::ScalarRight, false) => data[0],
        (Broadcast::ColLeft, true) | (Broadcast::ColRight, false) => data[i / cols],
        _ => data[i],
    }
}

/// Reduces a full-shape gradient back onto a broadcast operand.
fn reduce_to_operand(g: &[f64], kind: Broadcast, left: bool, cols: usize) -> Vec<f64> {
    let broadcast_side = matches!(
        (kind, left),
        (Broadcast::ScalarLeft, true)
            | (Broadcast::ScalarRight, false)
            | (Broadcast::ColLeft, true)
            | (Broadcast::ColRight, false)
    );
    if !broadcast_side {
        return g.to_vec();
    }
    match kind {
        Broadcast::ScalarLeft | Broadcast::ScalarRight => vec![g.iter().sum()],
        _ => {
            let rows = g.len() / cols;
            let mut out = vec![0.0; rows];
            for (r, chunk) in g.chunks(cols).enumerate() {
                out[r] = chunk.iter().sum();
            }
            out
        }
    }
}

macro_rules! elementwise_binary {
    ($name:ident, $op:literal, $fwd:expr, $ga:expr, $gb:expr) => {
        pub fn $name(&self, other: &Tensor) -> Result<Tensor> {
            let kind = broadcast_kind($op, self, other)?;
            let (out_shape, cols) = match kind {
                Broadcast::ScalarLeft | Broadcast::ColLeft => {
                    (other.shape().to_vec(), other.last_dim())
                }
                _ => (self.shape().to_vec(), self.last_dim()),
            };
            let n: usize = out_shape.iter().product();
            let (ad, bd) = (self.data(), other.data());
            let mut data = vec![0.0; n];
            for (i, v) in data.iter_mut().enumerate() {
                let x = bval(ad, kind, true, i, cols);
                let y = bval(bd, kind, false, i, cols);
                *v = $fwd(x, y);
            }
            let out = Tensor::from_parts(data, out_shape);

            let (sa, sb) = (self.storage(), other.storage());
            let (sa2, sb2) = (Arc::clone(&sa), Arc::clone(&sb));
            self_record2_helper(
                self,
                other,
                out,
                move |g: &[f64]| {
                    let full: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| {
                            let x = bval(&sa, kind, true, i, cols);
                            let y = bval(&sb, kind, false, i, cols);
                            gv * $ga(x, y)
                        })
                        .collect();
                    reduce_to_operand(&full, kind, true, cols)
                },
                move |g: &[f64]| {
                    let full: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| {
                            let x = bval(&sa2, kind, true, i, cols);
                            let y = bval(&sb2, kind, false, i, cols);
                            gv * $gb(x, y)
                        })
                        .collect();
                    reduce_to_operand(&full, kind, false, cols)
                },
            )
        }
    };
}

// `record2` is a free fn; give the macro a stable path.
fn self_record2_helper<FA, FB>(
    a: &Tensor,
    b: &Tensor,
    out: Tensor,
    back_a: FA,
    back_b: FB,
) -> Result<Tensor>
where
    FA: Fn(&[f64]) -> Vec<f64> + 'static,
    FB: Fn(&[f64]) -> Vec<f64> + 'static,
{
    record2(a, b, out, back_a, back_b)
}

impl Tensor {
    elementwise_binary!(add, "add", |x, y| x + y, |_x, _y| 1.0, |_x, _y| 1.0);
    elementwise_binary!(sub, "sub", |x, y| x - y, |_x, _y| 1.0, |_x, _y| -1.0);
    elementwise_binary!(mul, "mul", |x, y| x * y, |_x, y| y, |x, _y| x);
    elementwise_binary!(
        div,
        "div",
        |x, y| x / y,
        |_x, y: f64| 1.0 / y,
        |x: f64, y: f64| -x / (y * y)
    );

    /// Elementwise minimum; on ties the gradient goes to `self`.
    pub fn minimum(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "minimum",
                expected: format!("{:?}", self.shape()),
                got: format!("{:?}", other.shape()),
            });
        }
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&x, &y)| x.min(y))
            .collect();
        let out = Tensor::from_parts(data, self.shape().to_vec());
        let (sa, sb) = (self.storage(), other.storage());
        let (sa2, sb2) = (Arc::clone(&sa), Arc::clone(&sb));
        record2(
            self,
            other,
            out,
            move |g| {
                g.iter()
                    .enumerate()
                    .map(|(i, &gv)| if sa[i] <= sb[i] { gv } else { 0.0 })
                    .collect()
            },
            move |g| {
                g.iter()
                    .enumerate()
                    .map(|(i, &gv)| if sa2[i] <= sb2[i] { 0.0 } else { gv })
                    .collect()
            },
        )
    }

    // -----------------------------------------------------------------------
    // Unary ops
    // -----------------------------------------------------------------------

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// Multiply by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|&x| x * c).collect();
        let out = Tensor::from_parts(data, self.shape().to_vec());
        record1(self, out, move |g| g.iter().map(|&gv| gv * c).collect())
    }

    /// Add a constant.
    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|&x| x + c).collect();
        let out = Tensor::from_parts(data, self.shape().to_vec());
        record1(self, out, |g| g.to_vec())
    }

    /// Elementwise reciprocal.
    pub fn recip(&self) -> Tensor {
        let y: Vec<f64> = self.data().iter().map(|&x| 1.0 / x).collect();
        let out = Tensor::from_parts(y.clone(), self.shape().to_vec());
        record1(self, out, move |g| {
            g.iter()
                .zip(&y)
                .map(|(&gv, &yv)| -gv * yv * yv)
                .collect()
        })
    }

    pub fn exp(&self) -> Tensor {
        let y: Vec<f64> = self.data().iter().map(|&x| x.exp()).collect();
        let out = Tensor::from_parts(y.clone(), self.shape().to_vec());
        record1(self, out, move |g| {
            g.iter().zip(&y).map(|(&gv, &yv)| gv * yv).collect()
        })
    }

    /// `ln(max(x, floor))`: keeps degenerate probabilities finite. Gradient
    /// is `g/x` above the floor and 0 below it.
    pub fn ln_clamped(&self, floor: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| x.max(floor).ln()).collect();
        let out = Tensor::from_parts(data, self.shape().to_vec());
        let s = self.storage();
        record1(self, out, move |g| {
            g.iter()
                .zip(s.iter())
                .map(|(&gv, &x)| if x > floor { gv / x } else { 0.0 })
                .collect()
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        let y: Vec<f64> = self.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        let out = Tensor::from_parts(y.clone(), self.shape().to_vec());
        record1(self, out, move |g| {
            g.iter()
                .zip(&y)
                .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
                .collect()
        })
    }

    /// `x * sigmoid(x)`, the gate activation used by the expert FFNs.
    pub fn silu(&self) -> Tensor {
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| x * sigmoid_scalar(x))
            .collect();
        let out = Tensor::from_parts(data, self.shape().to_vec());
        let s = self.storage();
        record1(self, out, move |g| {
            g.iter()
                .zip(s.iter())
                .map(|(&gv, &x)| {
                    let sg = sigmoid_scalar(x);
                    gv * (sg + x * sg * (1.0 - sg))
                })
                .collect()
        })
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        let out = Tensor::from_parts(data, self.shape().to_vec());
        let s = self.storage();
        record1(self, out, move |g| {
            g.iter()
                .zip(s.iter())
                .map(|(&gv, &x)| if x > lo && x < hi { gv } else { 0.0 })
                .collect()
        })
    }

    // -----------------------------------------------------------------------
    // Reductions and reshapes
    // -----------------------------------------------------------------------

    pub fn sum(&self) -> Tensor {
        let out = Tensor::scalar(self.data().iter().sum());
        let n = self.numel();
        let shape = self.shape().to_vec();
        record1(self, out, move |g| {
            debug_assert_eq!(shape.iter().product::<usize>(), n);
            vec![g[0]; n]
        })
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                expected: format!("{} elements", self.numel()),
                got: format!("{shape:?}"),
            });
        }
        let out = Tensor::from_parts(self.data().to_vec(), shape.to_vec());
        Ok(record1(self, out, |g| g.to_vec()))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let [m, n] = two_dims("transpose", self)?;
        let out = Tensor::from_parts(transpose_data(self.data(), m, n), vec![n, m]);
        Ok(record1(self, out, move |g| transpose_data(g, n, m)))
    }

    // -----------------------------------------------------------------------
    // Matrix multiplication
    // -----------------------------------------------------------------------

    /// `self[m,k] * other[k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let [m, k] = two_dims("matmul", self)?;
        let [k2, n] = two_dims("matmul", other)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                expected: format!("inner dim {k}"),
                got: format!("inner dim {k2}"),
            });
        }
        let out = Tensor::from_parts(mm_nn(self.data(), other.data(), m, k, n), vec![m, n]);
        let (sa, sb) = (self.storage(), other.storage());
        record2(
            self,
            other,
            out,
            move |g| mm_nt(g, &sb, m, n, k),
            move |g| mm_tn(&sa, g, m, k, n),
        )
    }

    /// `w[m,k] * x[k] -> [m]` convenience wrapper.
    pub fn matvec(&self, x: &Tensor) -> Result<Tensor> {
        let [m, k] = two_dims("matvec", self)?;
        if x.shape() != [k] {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                expected: format!("[{k}]"),
                got: format!("{:?}", x.shape()),
            });
        }
        self.matmul(&x.reshape(&[k, 1])?)?.reshape(&[m])
    }

    // -----------------------------------------------------------------------
    // Softmax family
    // -----------------------------------------------------------------------

    /// Row-wise softmax over the last dimension.
    pub fn softmax_rows(&self) -> Tensor {
        let cols = self.last_dim();
        let mut y = vec![0.0; self.numel()];
        for (yr, xr) in y.chunks_mut(cols).zip(self.data().chunks(cols)) {
            softmax_into(xr, yr);
        }
        let out = Tensor::from_parts(y.clone(), self.shape().to_vec());
        record1(self, out, move |g| {
            let mut dx = vec![0.0; g.len()];
            for ((dxr, gr), yr) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                softmax_vjp(yr, gr, dxr);
            }
            dx
        })
    }

    /// Causal softmax on a square score matrix: row `i` normalizes over
    /// columns `0..=i` and is zero beyond the diagonal.
    pub fn causal_softmax_rows(&self) -> Result<Tensor> {
        let [t, t2] = two_dims("causal_softmax_rows", self)?;
        if t != t2 {
            return Err(Error::ShapeMismatch {
                op: "causal_softmax_rows",
                expected: "square matrix".into(),
                got: format!("{:?}", self.shape()),
            });
        }
        let mut y = vec![0.0; self.numel()];
        for i in 0..t {
            let xr = &self.data()[i * t..i * t + i + 1];
            softmax_into(xr, &mut y[i * t..i * t + i + 1]);
        }
        let out = Tensor::from_parts(y.clone(), self.shape().to_vec());
        Ok(record1(self, out, move |g| {
            let mut dx = vec![0.0; g.len()];
            for i in 0..t {
                let lo = i * t;
                let hi = lo + i + 1;
                softmax_vjp(&y[lo..hi], &g[lo..hi], &mut dx[lo..hi]);
            }
            dx
        }))
    }

    // -----------------------------------------------------------------------
    // Normalization and rotary embedding
    // -----------------------------------------------------------------------

    /// RMS normalization over the last dimension with a learnable gain:
    /// `out = x / sqrt(mean(x^2) + eps) * gain`.
    pub fn rmsnorm(&self, gain: &Tensor, eps: f64) -> Result<Tensor> {
        let n = self.last_dim();
        if gain.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "rmsnorm",
                expected: format!("gain [{n}]"),
                got: format!("{:?}", gain.shape()),
            });
        }
        let rows = self.lead_rows();
        let xd = self.data();
        let gd = gain.data();
        let mut y = vec![0.0; self.numel()];
        let mut inv_rms = vec![0.0; rows];
        for r in 0..rows {
            let xr = &xd[r * n..(r + 1) * n];
            let ms = xr.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms[r] = inv;
            for j in 0..n {
                y[r * n + j] = xr[j] * inv * gd[j];
            }
        }
        let out = Tensor::from_parts(y, self.shape().to_vec());
        let (sx, sg) = (self.storage(), gain.storage());
        let (sx2, sg2) = (Arc::clone(&sx), Arc::clone(&sg));
        let inv2 = inv_rms.clone();
        record2(
            self,
            gain,
            out,
            move |g| {
                let mut dx = vec![0.0; sx.len()];
                for r in 0..rows {
                    let xr = &sx[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let inv = inv_rms[r];
                    let dot: f64 = (0..n).map(|j| gr[j] * sg[j] * xr[j]).sum();
                    let coef = inv * inv * inv * dot / n as f64;
                    for j in 0..n {
                        dx[r * n + j] = gr[j] * sg[j] * inv - coef * xr[j];
                    }
                }
                dx
            },
            move |g| {
                let mut dg = vec![0.0; sg2.len()];
                for r in 0..rows {
                    let inv = inv2[r];
                    for j in 0..n {
                        dg[j] += g[r * n + j] * sx2[r * n + j] * inv;
                    }
                }
                dg
            },
        )
    }

    /// Rotary position embedding: every row rotated for one `position`.
    ///
    /// Pair `j` of the last dimension (entries `2j`, `2j+1`) is rotated by
    /// `position * base^(-2j/d)`. The last dimension must be even.
    pub fn rope(&self, position: usize, base: f64) -> Result<Tensor> {
        let rows = self.lead_rows();
        self.rope_with_positions(&vec![position; rows], base)
    }

    /// Rotary embedding where row `i` uses position `start + i` — the
    /// batched form for a full sequence laid out as `[T, d]`.
    pub fn rope_rows(&self, start: usize, base: f64) -> Result<Tensor> {
        let rows = self.lead_rows();
        let positions: Vec<usize> = (0..rows).map(|i| start + i).collect();
        self.rope_with_positions(&positions, base)
    }

    fn rope_with_positions(&self, positions: &[usize], base: f64) -> Result<Tensor> {
        let d = self.last_dim();
        if d % 2 != 0 {
            return Err(Error::OddDimension { op: "rope", dim: d });
        }
        let rows = self.lead_rows();
        assert_eq!(positions.len(), rows);
        let half = d / 2;
        // Per-pair inverse frequencies base^(-2j/d).
        let inv_freq: Vec<f64> = (0..half)
            .map(|j| base.powf(-2.0 * j as f64 / d as f64))
            .collect();
        let mut y = vec![0.0; self.numel()];
        rope_kernel(self.data(), &mut y, positions, &inv_freq, d, false);
        let out = Tensor::from_parts(y, self.shape().to_vec());
        let positions = positions.to_vec();
        Ok(record1(self, out, move |g| {
            let mut dx = vec![0.0; g.len()];
            rope_kernel(g, &mut dx, &positions, &inv_freq, d, true);
            dx
        }))
    }

    // -----------------------------------------------------------------------
    // Row selection / assembly
    // -----------------------------------------------------------------------

    /// Gathers rows `idx` of a `[m, n]` tensor into `[idx.len(), n]`.
    /// Backward scatter-adds, so duplicate indices accumulate.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let [m, n] = two_dims("select_rows", self)?;
        for &i in idx {
            if i >= m {
                return Err(Error::IndexOutOfRange {
                    op: "select_rows",
                    index: i,
                    limit: m,
                });
            }
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&self.data()[i * n..(i + 1) * n]);
        }
        let out = Tensor::from_parts(data, vec![idx.len(), n]);
        let idx = idx.to_vec();
        Ok(record1(self, out, move |g| {
            let mut dx = vec![0.0; m * n];
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..n {
                    dx[i * n + j] += g[r * n + j];
                }
            }
            dx
        }))
    }

    /// Scatter-adds the rows of `self[k, n]` into a zero `[rows, n]` tensor
    /// at positions `idx` (duplicates accumulate).
    pub fn scatter_add_rows(&self, idx: &[usize], rows: usize) -> Result<Tensor> {
        let [k, n] = two_dims("scatter_add_rows", self)?;
        if idx.len() != k {
            return Err(Error::ShapeMismatch {
                op: "scatter_add_rows",
                expected: format!("{k} indices"),
                got: format!("{}", idx.len()),
            });
        }
        for &i in idx {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    op: "scatter_add_rows",
                    index: i,
                    limit: rows,
                });
            }
        }
        let mut data = vec![0.0; rows * n];
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..n {
                data[i * n + j] += self.data()[r * n + j];
            }
        }
        let out = Tensor::from_parts(data, vec![rows, n]);
        let idx = idx.to_vec();
        Ok(record1(self, out, move |g| {
            let mut dx = vec![0.0; k * n];
            for (r, &i) in idx.iter().enumerate() {
                dx[r * n..(r + 1) * n].copy_from_slice(&g[i * n..(i + 1) * n]);
            }
            dx
        }))
    }

    /// Picks one column per row of a `[m, n]` tensor: `out[i] =
    /// x[i, cols[i]]`. Used to select target-token probabilities.
    pub fn gather_cols(&self, cols: &[usize]) -> Result<Tensor> {
        let [m, n] = two_dims("gather_cols", self)?;
        if cols.len() != m {
            return Err(Error::ShapeMismatch {
                op: "gather_cols",
                expected: format!("{m} column indices"),
                got: format!("{}", cols.len()),
            });
        }
        for &c in cols {
            if c >= n {
                return Err(Error::IndexOutOfRange {
                    op: "gather_cols",
                    index: c,
                    limit: n,
                });
            }
        }
        let data: Vec<f64> = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| self.data()[i * n + c])
            .collect();
        let out = Tensor::from_parts(data, vec![m]);
        let cols = cols.to_vec();
        Ok(record1(self, out, move |g| {
            let mut dx = vec![0.0; m * n];
            for (i, &c) in cols.iter().enumerate() {
                dx[i * n + c] = g[i];
            }
            dx
        }))
    }

    /// Contiguous row slice `[start, start+len)` of a `[m, n]` tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let [m, n] = two_dims("slice_rows", self)?;
        if start + len > m || len == 0 {
            return Err(Error::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                limit: m,
            });
        }
        let data = self.data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::from_parts(data, vec![len, n]);
        Ok(record1(self, out, move |g| {
            let mut dx = vec![0.0; m * n];
            dx[start * n..(start + len) * n].copy_from_slice(g);
            dx
        }))
    }

    /// Concatenates along the last dimension. Operands must have the same
    /// leading shape.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        let rows = self.lead_rows();
        if other.lead_rows() != rows || self.shape().len() != other.shape().len() {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                expected: format!("{rows} rows"),
                got: format!("{:?}", other.shape()),
            });
        }
        let (p, q) = (self.last_dim(), other.last_dim());
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = p + q;
        let mut data = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            data.extend_from_slice(&self.data()[r * p..(r + 1) * p]);
            data.extend_from_slice(&other.data()[r * q..(r + 1) * q]);
        }
        let out = Tensor::from_parts(data, shape);
        record2(
            self,
            other,
            out,
            move |g| {
                let mut dx = vec![0.0; rows * p];
                for r in 0..rows {
                    dx[r * p..(r + 1) * p].copy_from_slice(&g[r * (p + q)..r * (p + q) + p]);
                }
                dx
            },
            move |g| {
                let mut dy = vec![0.0; rows * q];
                for r in 0..rows {
                    dy[r * q..(r + 1) * q]
                        .copy_from_slice(&g[r * (p + q) + p..(r + 1) * (p + q)]);
                }
                dy
            },
        )
    }

    /// Stacks 1-D `[n]` tensors into `[m, n]`.
    pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::EmptyInput { op: "stack_rows" });
        }
        let n = rows[0].numel();
        let mut tape = None;
        for t in rows {
            if t.numel() != n {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    expected: format!("[{n}]"),
                    got: format!("{:?}", t.shape()),
                });
            }
            if let Some((tp, _)) = &t.node {
                match &tape {
                    None => tape = Some(tp.clone()),
                    Some(existing) if !existing.same_tape(tp) => {
                        return Err(Error::TapeMismatch)
                    }
                    _ => {}
                }
            }
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for t in rows {
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_parts(data, vec![rows.len(), n]);
        let Some(tape) = tape else { return Ok(out) };

        let mut parents = Vec::new();
        let mut slot_of_row = Vec::with_capacity(rows.len());
        for t in rows {
            match &t.node {
                Some((_, id)) => {
                    parents.push(*id);
                    slot_of_row.push(Some(parents.len() - 1));
                }
                None => slot_of_row.push(None),
            }
        }
        let node_id = tape.push(Node {
            parents,
            back: Some(Box::new(move |g, slots| {
                for (r, slot) in slot_of_row.iter().enumerate() {
                    if let Some(s) = slot {
                        slots[*s] = Some(g[r * n..(r + 1) * n].to_vec());
                    }
                }
            })),
            shape: out.shape().to_vec(),
        });
        Ok(out.with_node(&tape, node_id))
    }
}

/// Records a fused two-input op whose backward computes both input
/// gradients in one call — for ops whose backward runs through non-tensor
/// machinery (e.g. quantized GEMMs).
pub(crate) fn record_custom2<F>(a: &Tensor, b: &Tensor, out: Tensor, back: F) -> Result<Tensor>
where
    F: Fn(&[f64]) -> (Vec<f64>, Vec<f64>) + 'static,
{
    let tape = match (&a.node, &b.node) {
        (None, None) => return Ok(out),
        (Some((ta, _)), Some((tb, _))) if !ta.same_tape(tb) => return Err(Error::TapeMismatch),
        (Some((t, _)), _) | (None, Some((t, _))) => t.clone(),
    };
    let mut parents = Vec::new();
    let a_pos = a.node.as_ref().map(|(_, id)| {
        parents.push(*id);
        parents.len() - 1
    });
    let b_pos = b.node.as_ref().map(|(_, id)| {
        parents.push(*id);
        parents.len() - 1
    });
    let node_id = tape.push(Node {
        parents,
        back: Some(Box::new(move |g, slots| {
            let (ga, gb) = back(g);
            if let Some(p) = a_pos {
                slots[p] = Some(ga);
            }
            if let Some(p) = b_pos {
                slots[p] = Some(gb);
            }
        })),
        shape: out.shape().to_vec(),
    });
    Ok(out.with_node(&tape, node_id))
}

// ---------------------------------------------------------------------------
// Scalar helpers
// ---------------------------------------------------------------------------

#[inline]
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn softmax_vjp(y: &[f64], g: &[f64], dx: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(&yv, &gv)| yv * gv).sum();
    for ((d, &yv), &gv) in dx.iter_mut().zip(y).zip(g) {
        *d = yv * (gv - dot);
    }
}

/// Shared forward/backward rotation kernel; `inverse` rotates by `-angle`.
fn rope_kernel(
    x: &[f64],
    out: &mut [f64],
    positions: &[usize],
    inv_freq: &[f64],
    d: usize,
    inverse: bool,
) {
    for (r, &pos) in positions.iter().enumerate() {
        let base = r * d;
        for (j, &freq) in inv_freq.iter().enumerate() {
            let angle = pos as f64 * freq * if inverse { -1.0 } else { 1.0 };
            let (sin, cos) = angle.sin_cos();
            let a = x[base + 2 * j];
            let b = x[base + 2 * j + 1];
            out[base + 2 * j] = a * cos - b * sin;
            out[base + 2 * j + 1] = a * sin + b * cos;
        }
    }
}

fn two_dims(op: &'static str, t: &Tensor) -> Result<[usize; 2]> {
    match t.shape() {
        [m, n] => Ok([*m, *n]),
        s => Err(Error::ShapeMismatch {
            op,
            expected: "2-D tensor".into(),
            got: format!("{s:?}"),
        }),
    }
}
