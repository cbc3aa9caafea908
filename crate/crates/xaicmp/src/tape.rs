//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records primitive operations during a forward pass; replaying
//! the record in reverse order accumulates gradients of a scalar output with
//! respect to every recorded variable. The primitive set is exactly what the
//! toy transformer and the gradient-based attribution methods need; there is
//! no graph optimizer and no broadcasting beyond row-bias addition.
//!
//! A tape is single-threaded. Distinct tapes are independent and may live on
//! different threads. [`Tape::backward`] takes `&self` and keeps no state, so
//! repeated calls cannot accumulate stale gradients.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// `[M,N] + [1,N]`, bias added to every row.
    AddBias(usize, usize),
    Matmul(usize, usize),
    Transpose(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    Gelu(usize),
    Reshape(usize),
    SliceRows {
        x: usize,
        r0: usize,
    },
    SliceCols {
        x: usize,
        c0: usize,
    },
    ConcatCols(Vec<usize>),
    /// `out[k] = x[idx[k]]`; covers patchify and other pure reindexings.
    Gather {
        x: usize,
        idx: Arc<Vec<usize>>,
    },
    Sum(usize),
    Ln(usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Ordered record of primitive operations for one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Usage(
                "variable does not belong to this tape".into(),
            ));
        }
        Ok(v.idx)
    }

    fn val(&self, idx: usize) -> &Tensor {
        &self.nodes[idx].value
    }

    /// Register a tensor as a tracked input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t)
    }

    /// Current value of a recorded variable.
    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let idx = self.check(v)?;
        Ok(self.val(idx))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "add shapes differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Add(ia, ib), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "mul shapes differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(ia, ib), out))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).map(|v| v * c);
        Ok(self.push(Op::Scale(ia, c), out))
    }

    /// Add a `1 x N` bias row to every row of an `M x N` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(bias)?);
        let (m, n) = self.val(ia).dims2()?;
        let (br, bc) = self.val(ib).dims2()?;
        if br != 1 || bc != n {
            return Err(Error::Shape(format!(
                "bias must be 1x{n}, got {br}x{bc}"
            )));
        }
        let mut data = self.val(ia).data().to_vec();
        let brow = self.val(ib).data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += brow[j];
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::AddBias(ia, ib), out))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = tensor::matmul(self.val(ia), self.val(ib))?;
        Ok(self.push(Op::Matmul(ia, ib), out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = tensor::transpose(self.val(ia))?;
        Ok(self.push(Op::Transpose(ia), out))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = tensor::softmax_rows(self.val(ia))?;
        Ok(self.push(Op::SoftmaxRows(ia), out))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let out = tensor::layer_norm_rows(self.val(ix), self.val(ig), self.val(ib), eps)?;
        Ok(self.push(
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                eps,
            },
            out,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).map(tensor::gelu);
        Ok(self.push(Op::Gelu(ia), out))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {:?}",
                t.shape(),
                shape
            )));
        }
        let out = Tensor::new(shape, t.data().to_vec())?;
        Ok(self.push(Op::Reshape(ia), out))
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (m, n) = self.val(ia).dims2()?;
        if r0 >= r1 || r1 > m {
            return Err(Error::Shape(format!(
                "row slice {r0}..{r1} out of bounds for {m} rows"
            )));
        }
        let data = self.val(ia).data()[r0 * n..r1 * n].to_vec();
        let out = Tensor::new(vec![r1 - r0, n], data)?;
        Ok(self.push(Op::SliceRows { x: ia, r0 }, out))
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (m, n) = self.val(ia).dims2()?;
        if c0 >= c1 || c1 > n {
            return Err(Error::Shape(format!(
                "col slice {c0}..{c1} out of bounds for {n} cols"
            )));
        }
        let w = c1 - c0;
        let mut data = vec![0.0; m * w];
        for i in 0..m {
            data[i * w..(i + 1) * w]
                .copy_from_slice(&self.val(ia).data()[i * n + c0..i * n + c1]);
        }
        let out = Tensor::new(vec![m, w], data)?;
        Ok(self.push(Op::SliceCols { x: ia, c0 }, out))
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols of zero tensors".into()));
        }
        let idxs: Vec<usize> = parts
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<_>>()?;
        let (m, _) = self.val(idxs[0]).dims2()?;
        let mut widths = Vec::with_capacity(idxs.len());
        for &i in &idxs {
            let (r, c) = self.val(i).dims2()?;
            if r != m {
                return Err(Error::Shape(format!(
                    "concat_cols row counts differ: {m} vs {r}"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (&i, &w) in idxs.iter().zip(&widths) {
            let src = self.val(i).data();
            for r in 0..m {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::new(vec![m, total], data)?;
        Ok(self.push(Op::ConcatCols(idxs), out))
    }

    /// Pure reindexing: `out[k] = x[idx[k]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, idx: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia);
        if shape.iter().product::<usize>() != idx.len() {
            return Err(Error::Shape(format!(
                "gather shape {:?} does not match {} indices",
                shape,
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.numel()) {
            return Err(Error::Shape(format!(
                "gather index {bad} out of bounds for {} elements",
                t.numel()
            )));
        }
        let data = idx.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(Op::Gather { x: ia, idx }, out))
    }

    /// Sum of all elements, as a `1x1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.val(ia).data().iter().sum();
        Ok(self.push(Op::Sum(ia), Tensor::scalar(s)))
    }

    /// Elementwise natural log; inputs must be strictly positive.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        if self.val(ia).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Usage("ln of non-positive value".into()));
        }
        let out = self.val(ia).map(f64::ln);
        Ok(self.push(Op::Ln(ia), out))
    }

    /// Reverse sweep from a scalar output. Returns the gradient of that
    /// output with respect to every variable recorded before it.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let iout = self.check(output)?;
        if self.val(iout).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar output, got shape {:?}",
                self.val(iout).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[iout] = Some(vec![1.0]);

        for i in (0..=iout).rev() {
            let Some(g) = grads[i].clone() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Add(a, b) => {
                    acc(&mut grads, *a, self.val(*a).numel(), |ga| {
                        for (x, gi) in ga.iter_mut().zip(&g) {
                            *x += gi;
                        }
                    });
                    acc(&mut grads, *b, self.val(*b).numel(), |gb| {
                        for (x, gi) in gb.iter_mut().zip(&g) {
                            *x += gi;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                    acc(&mut grads, *a, va.len(), |ga| {
                        for k in 0..ga.len() {
                            ga[k] += g[k] * vb[k];
                        }
                    });
                    acc(&mut grads, *b, vb.len(), |gb| {
                        for k in 0..gb.len() {
                            gb[k] += g[k] * va[k];
                        }
                    });
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, *a, g.len(), |ga| {
                        for k in 0..ga.len() {
                            ga[k] += g[k] * c;
                        }
                    });
                }
                Op::AddBias(a, b) => {
                    let (m, n) = self.val(*a).dims2().expect("recorded 2-D");
                    acc(&mut grads, *a, m * n, |ga| {
                        for k in 0..m * n {
                            ga[k] += g[k];
                        }
                    });
                    acc(&mut grads, *b, n, |gb| {
                        for i in 0..m {
                            for j in 0..n {
                                gb[j] += g[i * n + j];
                            }
                        }
                    });
                }
                Op::Matmul(a, b) => {
                    let (m, k) = self.val(*a).dims2().expect("recorded 2-D");
                    let (_, n) = self.val(*b).dims2().expect("recorded 2-D");
                    let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                    // dA = G  B^T, dB = A^T  G
                    acc(&mut grads, *a, m * k, |ga| {
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * vb[p * n + j];
                                }
                                ga[i * k + p] += s;
                            }
                        }
                    });
                    acc(&mut grads, *b, k * n, |gb| {
                        for p in 0..k {
                            for j in 0..n {
                                let mut s = 0.0;
                                for i in 0..m {
                                    s += va[i * k + p] * g[i * n + j];
                                }
                                gb[p * n + j] += s;
                            }
                        }
                    });
                }
                Op::Transpose(a) => {
                    let (m, n) = self.val(*a).dims2().expect("recorded 2-D");
                    acc(&mut grads, *a, m * n, |ga| {
                        for r in 0..m {
                            for c in 0..n {
                                ga[r * n + c] += g[c * m + r];
                            }
                        }
                    });
                }
                Op::SoftmaxRows(a) => {
                    let (m, n) = self.val(*a).dims2().expect("recorded 2-D");
                    let y = self.nodes[i].value.data();
                    acc(&mut grads, *a, m * n, |ga| {
                        for r in 0..m {
                            let row = r * n;
                            let dot: f64 =
                                (0..n).map(|j| g[row + j] * y[row + j]).sum();
                            for j in 0..n {
                                ga[row + j] += y[row + j] * (g[row + j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (m, n) = self.val(*x).dims2().expect("recorded 2-D");
                    let vx = self.val(*x).data();
                    let vg = self.val(*gamma).data();
                    let nf = n as f64;
                    // Recompute per-row statistics for the backward pass.
                    let mut xhat = vec![0.0; m * n];
                    let mut inv = vec![0.0; m];
                    for r in 0..m {
                        let row = &vx[r * n..(r + 1) * n];
                        let mean = row.iter().sum::<f64>() / nf;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                        inv[r] = 1.0 / (var + eps).sqrt();
                        for j in 0..n {
                            xhat[r * n + j] = (row[j] - mean) * inv[r];
                        }
                    }
                    acc(&mut grads, *x, m * n, |gx| {
                        for r in 0..m {
                            let row = r * n;
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for j in 0..n {
                                let d = g[row + j] * vg[j];
                                sum_d += d;
                                sum_dx += d * xhat[row + j];
                            }
                            for j in 0..n {
                                let d = g[row + j] * vg[j];
                                gx[row + j] += inv[r]
                                    * (d - sum_d / nf - xhat[row + j] * sum_dx / nf);
                            }
                        }
                    });
                    acc(&mut grads, *gamma, n, |gg| {
                        for r in 0..m {
                            for j in 0..n {
                                gg[j] += g[r * n + j] * xhat[r * n + j];
                            }
                        }
                    });
                    acc(&mut grads, *beta, n, |gb| {
                        for r in 0..m {
                            for j in 0..n {
                                gb[j] += g[r * n + j];
                            }
                        }
                    });
                }
                Op::Gelu(a) => {
                    let vx = self.val(*a).data();
                    acc(&mut grads, *a, vx.len(), |ga| {
                        for k in 0..ga.len() {
                            ga[k] += g[k] * tensor::gelu_grad(vx[k]);
                        }
                    });
                }
                Op::Reshape(a) => {
                    acc(&mut grads, *a, g.len(), |ga| {
                        for k in 0..ga.len() {
                            ga[k] += g[k];
                        }
                    });
                }
                Op::SliceRows { x, r0 } => {
                    let (_, n) = self.val(*x).dims2().expect("recorded 2-D");
                    let numel = self.val(*x).numel();
                    let off = r0 * n;
                    acc(&mut grads, *x, numel, |gx| {
                        for k in 0..g.len() {
                            gx[off + k] += g[k];
                        }
                    });
                }
                Op::SliceCols { x, c0 } => {
                    let (m, n) = self.val(*x).dims2().expect("recorded 2-D");
                    let w = g.len() / m;
                    acc(&mut grads, *x, m * n, |gx| {
                        for r in 0..m {
                            for j in 0..w {
                                gx[r * n + c0 + j] += g[r * w + j];
                            }
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let (m, total) = self.nodes[i].value.dims2().expect("recorded 2-D");
                    let mut off = 0;
                    for &p in parts {
                        let (_, w) = self.val(p).dims2().expect("recorded 2-D");
                        let start = off;
                        acc(&mut grads, p, m * w, |gp| {
                            for r in 0..m {
                                for j in 0..w {
                                    gp[r * w + j] += g[r * total + start + j];
                                }
                            }
                        });
                        off += w;
                    }
                }
                Op::Gather { x, idx } => {
                    let numel = self.val(*x).numel();
                    acc(&mut grads, *x, numel, |gx| {
                        for (k, &src) in idx.iter().enumerate() {
                            gx[src] += g[k];
                        }
                    });
                }
                Op::Sum(a) => {
                    let numel = self.val(*a).numel();
                    let gs = g[0];
                    acc(&mut grads, *a, numel, |ga| {
                        for v in ga.iter_mut() {
                            *v += gs;
                        }
                    });
                }
                Op::Ln(a) => {
                    let vx = self.val(*a).data();
                    acc(&mut grads, *a, vx.len(), |ga| {
                        for k in 0..ga.len() {
                            ga[k] += g[k] / vx[k];
                        }
                    });
                }
            }
        }

        let tensors = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data)
                        .expect("gradient matches value shape")
                })
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads: tensors,
        })
    }
}

fn acc(
    grads: &mut [Option<Vec<f64>>],
    target: usize,
    numel: usize,
    f: impl FnOnce(&mut Vec<f64>),
) {
    let slot = grads[target].get_or_insert_with(|| vec![0.0; numel]);
    f(slot);
}

/// Gradients from one backward sweep, indexed by the tape's variables.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` did not influence the
    /// output.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }
}
