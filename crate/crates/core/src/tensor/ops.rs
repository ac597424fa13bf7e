//! Differentiable operations on [`Var`]s.
//!
//! Each operation computes its value eagerly and records a backward rule
//! that maps the upstream gradient to one gradient per parent.

use std::rc::Rc;

use super::array::{gemm, gemm_nt, gemm_tn};
use super::{Array, TensorError, Var};

fn same_shape(op: &'static str, a: &Array, b: &Array) -> Result<(), TensorError> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

fn require_2d(op: &'static str, a: &Array) -> Result<(usize, usize), TensorError> {
    if a.ndim() == 2 {
        Ok((a.shape()[0], a.shape()[1]))
    } else {
        Err(TensorError::RankMismatch {
            op,
            expected: 2,
            shape: a.shape().to_vec(),
        })
    }
}

fn sum_rows(g: &Array, rows: usize, cols: usize) -> Array {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
    Array::from_parts(vec![cols], out)
}

impl<'t> Var<'t> {
    fn check_same_tape(&self, other: &Var<'t>) {
        debug_assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.check_same_tape(&other);
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x + y);
        Ok(self
            .tape
            .push("add", out, &[self, other], Some(|g: &Array| vec![g.clone(), g.clone()])))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.check_same_tape(&other);
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x - y);
        Ok(self.tape.push(
            "sub",
            out,
            &[self, other],
            Some(|g: &Array| vec![g.clone(), g.map(|v| -v)]),
        ))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.check_same_tape(&other);
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x * y);
        Ok(self.tape.push(
            "mul",
            out,
            &[self, other],
            Some(move |g: &Array| vec![g.zip_map(&b, |x, y| x * y), g.zip_map(&a, |x, y| x * y)]),
        ))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let out = self.value().map(|v| v * factor);
        self.tape.push(
            "scale",
            out,
            &[self],
            Some(move |g: &Array| vec![g.map(|v| v * factor)]),
        )
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v + c);
        self.tape
            .push("add_scalar", out, &[self], Some(|g: &Array| vec![g.clone()]))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.broadcast_row("add_row", row, 1.0)
    }

    /// Subtracts a length-`c` vector from every row of an `r×c` matrix.
    pub fn sub_row(self, row: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.broadcast_row("sub_row", row, -1.0)
    }

    fn broadcast_row(self, op: &'static str, row: Var<'t>, sign: f64) -> Result<Var<'t>, TensorError> {
        self.check_same_tape(&row);
        let (x, b) = (self.value(), row.value());
        let (r, c) = require_2d(op, &x)?;
        if b.len() != c {
            return Err(TensorError::ShapeMismatch {
                op,
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut out = x.data().to_vec();
        for i in 0..r {
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(b.data()) {
                *o += sign * v;
            }
        }
        let b_shape = b.shape().to_vec();
        Ok(self.tape.push(
            op,
            Array::from_parts(vec![r, c], out),
            &[self, row],
            Some(move |g: &Array| {
                let db = sum_rows(g, r, c).map(|v| sign * v);
                vec![g.clone(), Array::from_parts(b_shape.clone(), db.into_data())]
            }),
        ))
    }

    /// Matrix product `self (m×k) · other (k×n)`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.check_same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (m, k) = require_2d("matmul", &a)?;
        let (k2, n) = require_2d("matmul", &b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let out = Array::from_parts(vec![m, n], gemm(a.data(), b.data(), m, k, n));
        Ok(self.tape.push(
            "matmul",
            out,
            &[self, other],
            Some(move |g: &Array| {
                vec![
                    Array::from_parts(vec![m, k], gemm_nt(g.data(), b.data(), m, n, k)),
                    Array::from_parts(vec![k, n], gemm_tn(a.data(), g.data(), m, k, n)),
                ]
            }),
        ))
    }

    /// `self (m×k) · otherᵀ` where `other` is `n×k`.
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.check_same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (m, k) = require_2d("matmul_nt", &a)?;
        let (n, k2) = require_2d("matmul_nt", &b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let out = Array::from_parts(vec![m, n], gemm_nt(a.data(), b.data(), m, k, n));
        Ok(self.tape.push(
            "matmul_nt",
            out,
            &[self, other],
            Some(move |g: &Array| {
                vec![
                    Array::from_parts(vec![m, k], gemm(g.data(), b.data(), m, n, k)),
                    Array::from_parts(vec![n, k], gemm_tn(g.data(), a.data(), m, n, k)),
                ]
            }),
        ))
    }

    pub fn transpose(self) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        require_2d("transpose", &a)?;
        Ok(self
            .tape
            .push("transpose", a.transpose(), &[self], Some(|g: &Array| vec![g.transpose()])))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        let out = a.reshape(shape)?;
        let original = a.shape().to_vec();
        Ok(self.tape.push(
            "reshape",
            out,
            &[self],
            Some(move |g: &Array| vec![Array::from_parts(original.clone(), g.data().to_vec())]),
        ))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(self) -> Var<'t> {
        let a = self.value();
        let out = a.map(|v| v.max(0.0));
        self.tape.push(
            "relu",
            out,
            &[self],
            Some(move |g: &Array| vec![g.zip_map(&a, |gv, x| if x > 0.0 { gv } else { 0.0 })]),
        )
    }

    pub fn tanh(self) -> Var<'t> {
        let out = Rc::new(self.value().map(f64::tanh));
        let y = Rc::clone(&out);
        self.tape.push(
            "tanh",
            (*out).clone(),
            &[self],
            Some(move |g: &Array| vec![g.zip_map(&y, |gv, t| gv * (1.0 - t * t))]),
        )
    }

    /// Softmax over the last axis (the whole vector for 1-D input, each
    /// row for 2-D input). The row maximum is subtracted before
    /// exponentiation.
    pub fn softmax(self) -> Var<'t> {
        let a = self.value();
        let c = a.cols();
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let y = Rc::new(Array::from_parts(a.shape().to_vec(), out));
        let captured = Rc::clone(&y);
        self.tape.push(
            "softmax",
            (*y).clone(),
            &[self],
            Some(move |g: &Array| {
                let mut dx = vec![0.0; g.len()];
                for ((dx_row, g_row), y_row) in dx
                    .chunks_mut(c)
                    .zip(g.data().chunks(c))
                    .zip(captured.data().chunks(c))
                {
                    let dot: f64 = g_row.iter().zip(y_row).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in dx_row.iter_mut().zip(g_row).zip(y_row) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Array::from_parts(captured.shape().to_vec(), dx)]
            }),
        )
    }

    /// Inner product of two equally sized arrays.
    pub fn inner(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.check_same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.len() != b.len() {
            return Err(TensorError::ShapeMismatch {
                op: "inner",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        Ok(self.tape.push(
            "inner",
            Array::scalar(dot),
            &[self, other],
            Some(move |g: &Array| {
                let s = g.item();
                vec![b.map(|v| v * s), a.map(|v| v * s)]
            }),
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let a = self.value();
        let shape = a.shape().to_vec();
        self.tape.push(
            "sum",
            Array::scalar(a.sum()),
            &[self],
            Some(move |g: &Array| vec![Array::full(&shape, g.item())]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum of squared entries (squared Frobenius norm).
    pub fn sum_squares(self) -> Var<'t> {
        let a = self.value();
        let total = a.data().iter().map(|v| v * v).sum();
        self.tape.push(
            "sum_squares",
            Array::scalar(total),
            &[self],
            Some(move |g: &Array| {
                let s = 2.0 * g.item();
                vec![a.map(|v| v * s)]
            }),
        )
    }

    /// Mean of a 2-D array along `axis` (0 → per column, 1 → per row).
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        let (r, c) = require_2d("mean_axis", &a)?;
        match axis {
            0 => {
                let out = sum_rows(&a, r, c).map(|v| v / r as f64);
                Ok(self.tape.push(
                    "mean_axis0",
                    out,
                    &[self],
                    Some(move |g: &Array| {
                        let mut dx = Vec::with_capacity(r * c);
                        for _ in 0..r {
                            dx.extend(g.data().iter().map(|v| v / r as f64));
                        }
                        vec![Array::from_parts(vec![r, c], dx)]
                    }),
                ))
            }
            1 => {
                let out: Vec<f64> = a
                    .data()
                    .chunks(c)
                    .map(|row| row.iter().sum::<f64>() / c as f64)
                    .collect();
                Ok(self.tape.push(
                    "mean_axis1",
                    Array::from_parts(vec![r], out),
                    &[self],
                    Some(move |g: &Array| {
                        let dx = g
                            .data()
                            .iter()
                            .flat_map(|&v| std::iter::repeat_n(v / c as f64, c))
                            .collect();
                        vec![Array::from_parts(vec![r, c], dx)]
                    }),
                ))
            }
            _ => Err(TensorError::RankMismatch {
                op: "mean_axis",
                expected: 2,
                shape: vec![axis],
            }),
        }
    }

    /// Euclidean norm of all entries; the subgradient at 0 is 0.
    pub fn l2_norm(self) -> Var<'t> {
        let a = self.value();
        let n = a.norm();
        self.tape.push(
            "l2_norm",
            Array::scalar(n),
            &[self],
            Some(move |g: &Array| {
                let s = if n > 0.0 { g.item() / n } else { 0.0 };
                vec![a.map(|v| v * s)]
            }),
        )
    }

    pub fn l2_distance(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        Ok(self.sub(other)?.l2_norm())
    }

    /// Euclidean norm of every row of a 2-D array.
    pub fn row_norms(self) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        let (r, c) = require_2d("row_norms", &a)?;
        let norms: Vec<f64> = a
            .data()
            .chunks(c)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let captured = norms.clone();
        Ok(self.tape.push(
            "row_norms",
            Array::from_parts(vec![r], norms),
            &[self],
            Some(move |g: &Array| {
                let mut dx = a.data().to_vec();
                for (i, row) in dx.chunks_mut(c).enumerate() {
                    let s = if captured[i] > 0.0 {
                        g.data()[i] / captured[i]
                    } else {
                        0.0
                    };
                    row.iter_mut().for_each(|v| *v *= s);
                }
                vec![Array::from_parts(vec![r, c], dx)]
            }),
        ))
    }

    /// Row-wise Euclidean distances between two equally shaped matrices.
    pub fn row_distances(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.sub(other)?.row_norms()
    }

    /// Scales every row to unit Euclidean norm. A row with norm below
    /// `1e-12` is an error naming the row.
    pub fn normalize_rows(self) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        let (r, c) = require_2d("normalize_rows", &a)?;
        let mut norms = Vec::with_capacity(r);
        for (i, row) in a.data().chunks(c).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n >= super::MIN_NORM) {
                return Err(TensorError::ZeroNorm { row: i });
            }
            norms.push(n);
        }
        let mut out = a.data().to_vec();
        for (row, n) in out.chunks_mut(c).zip(&norms) {
            row.iter_mut().for_each(|v| *v /= n);
        }
        let y = Rc::new(Array::from_parts(vec![r, c], out));
        let captured = Rc::clone(&y);
        Ok(self.tape.push(
            "normalize_rows",
            (*y).clone(),
            &[self],
            Some(move |g: &Array| {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let yr = captured.row(i);
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                vec![Array::from_parts(vec![r, c], dx)]
            }),
        ))
    }

    /// Rows `start..start + len` of a 2-D array.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        let (r, c) = require_2d("slice_rows", &a)?;
        if len == 0 || start + len > r {
            return Err(TensorError::OutOfRange {
                op: "slice_rows",
                index: start + len,
                len: r,
            });
        }
        Ok(self.tape.push(
            "slice_rows",
            a.slice_rows(start, len),
            &[self],
            Some(move |g: &Array| {
                let mut dx = vec![0.0; r * c];
                dx[start * c..(start + len) * c].copy_from_slice(g.data());
                vec![Array::from_parts(vec![r, c], dx)]
            }),
        ))
    }

    /// Stacks 2-D arrays with equal column counts on top of each other.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        let first = parts.first().ok_or(TensorError::Empty { op: "concat_rows" })?;
        let values: Vec<Rc<Array>> = parts.iter().map(|p| p.value()).collect();
        let (_, c) = require_2d("concat_rows", &values[0])?;
        let mut rows = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for v in &values {
            let (r, c2) = require_2d("concat_rows", v)?;
            if c2 != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: values[0].shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            rows.push(r);
            data.extend_from_slice(v.data());
        }
        let total = rows.iter().sum();
        Ok(first.tape.push(
            "concat_rows",
            Array::from_parts(vec![total, c], data),
            parts,
            Some(move |g: &Array| {
                let mut offset = 0;
                rows.iter()
                    .map(|&r| {
                        let part = g.data()[offset * c..(offset + r) * c].to_vec();
                        offset += r;
                        Array::from_parts(vec![r, c], part)
                    })
                    .collect()
            }),
        ))
    }

    /// Joins 2-D arrays with equal row counts side by side.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        let first = parts.first().ok_or(TensorError::Empty { op: "concat_cols" })?;
        let values: Vec<Rc<Array>> = parts.iter().map(|p| p.value()).collect();
        let (r, _) = require_2d("concat_cols", &values[0])?;
        let mut cols = Vec::with_capacity(parts.len());
        for v in &values {
            let (r2, c) = require_2d("concat_cols", v)?;
            if r2 != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: values[0].shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            cols.push(c);
        }
        let total: usize = cols.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for v in &values {
                data.extend_from_slice(v.row(i));
            }
        }
        Ok(first.tape.push(
            "concat_cols",
            Array::from_parts(vec![r, total], data),
            parts,
            Some(move |g: &Array| {
                let mut offset = 0;
                cols.iter()
                    .map(|&c| {
                        let mut part = Vec::with_capacity(r * c);
                        for i in 0..r {
                            part.extend_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                        }
                        offset += c;
                        Array::from_parts(vec![r, c], part)
                    })
                    .collect()
            }),
        ))
    }

    /// Negative log softmax probability of `label` for a logit vector.
    pub fn cross_entropy(self, label: usize) -> Result<Var<'t>, TensorError> {
        let logits = self.value();
        let n = logits.len();
        if label >= n {
            return Err(TensorError::OutOfRange {
                op: "cross_entropy",
                index: label,
                len: n,
            });
        }
        let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.data().iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let loss = total.ln() + max - logits.data()[label];
        let shape = logits.shape().to_vec();
        Ok(self.tape.push(
            "cross_entropy",
            Array::scalar(loss),
            &[self],
            Some(move |g: &Array| {
                let s = g.item();
                let mut dx: Vec<f64> = exps.iter().map(|e| s * e / total).collect();
                dx[label] -= s;
                vec![Array::from_parts(shape.clone(), dx)]
            }),
        ))
    }

    /// Gathers every 3×3 neighbourhood (zero padded) of an `H×W×C` map into
    /// the rows of an `(H·W) × 9C` matrix, row-major over positions.
    pub fn im2col3x3(self) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        let (h, w, c) = match a.shape() {
            &[h, w, c] => (h, w, c),
            s => {
                return Err(TensorError::RankMismatch {
                    op: "im2col3x3",
                    expected: 3,
                    shape: s.to_vec(),
                })
            }
        };
        let width = 9 * c;
        let mut out = vec![0.0; h * w * width];
        // (source offset, destination offset) pairs, reused by backward.
        let mut taps = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let row = (y * w + x) * width;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        let sx = x as isize + kx as isize - 1;
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let src = (sy as usize * w + sx as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        out[dst..dst + c].copy_from_slice(&a.data()[src..src + c]);
                        taps.push((src, dst));
                    }
                }
            }
        }
        Ok(self.tape.push(
            "im2col3x3",
            Array::from_parts(vec![h * w, width], out),
            &[self],
            Some(move |g: &Array| {
                let mut dx = vec![0.0; h * w * c];
                for &(src, dst) in &taps {
                    for k in 0..c {
                        dx[src + k] += g.data()[dst + k];
                    }
                }
                vec![Array::from_parts(vec![h, w, c], dx)]
            }),
        ))
    }

    /// 2×2 average pooling with stride 2 over an `H×W×C` map; odd trailing
    /// rows/columns are dropped.
    pub fn avg_pool2x2(self) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        let (h, w, c) = match a.shape() {
            &[h, w, c] => (h, w, c),
            s => {
                return Err(TensorError::RankMismatch {
                    op: "avg_pool2x2",
                    expected: 3,
                    shape: s.to_vec(),
                })
            }
        };
        if h < 2 || w < 2 {
            return Err(TensorError::TooSmall {
                op: "avg_pool2x2",
                shape: a.shape().to_vec(),
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; ho * wo * c];
        for y in 0..ho {
            for x in 0..wo {
                let dst = (y * wo + x) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = ((2 * y + dy) * w + 2 * x + dx) * c;
                    for k in 0..c {
                        out[dst + k] += 0.25 * a.data()[src + k];
                    }
                }
            }
        }
        Ok(self.tape.push(
            "avg_pool2x2",
            Array::from_parts(vec![ho, wo, c], out),
            &[self],
            Some(move |g: &Array| {
                let mut d = vec![0.0; h * w * c];
                for y in 0..ho {
                    for x in 0..wo {
                        let src = (y * wo + x) * c;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let dst = ((2 * y + dy) * w + 2 * x + dx) * c;
                            for k in 0..c {
                                d[dst + k] += 0.25 * g.data()[src + k];
                            }
                        }
                    }
                }
                vec![Array::from_parts(vec![h, w, c], d)]
            }),
        ))
    }
}
