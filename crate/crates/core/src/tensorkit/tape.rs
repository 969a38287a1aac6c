//! Reverse-mode differentiation over a flat, topologically ordered tape.
//!
//! The op set is deliberately small: enough to express the feedback
//! network, the quantizer surrogate, and the rate loss (complex algebra
//! is built from real matmuls by the callers). Values, ops and
//! gradients live in parallel arrays so backward can read values while
//! writing gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensorkit::kernels::{col2im3, im2col3, matmul_acc, matmul_t_acc, transpose};
use crate::tensorkit::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op {
    Leaf,
    Constant,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Div(ValueId, ValueId),
    Neg(ValueId),
    Scale(ValueId, f64),
    AddScalar(ValueId),
    Ln(ValueId),
    Sqrt(ValueId),
    Tanh(ValueId),
    LeakyRelu(ValueId, f64),
    MatMul(ValueId, ValueId),
    Transpose(ValueId),
    ConcatCols(Vec<ValueId>),
    ConcatRows(Vec<ValueId>),
    Slice2d {
        x: ValueId,
        rows: usize,
        cols: usize,
        r0: usize,
        c0: usize,
    },
    MatInverse(ValueId),
    SumAll(ValueId),
    Reshape(ValueId),
    Fc {
        x: ValueId,
        w: ValueId,
        b: ValueId,
    },
    Conv2d {
        x: ValueId,
        k: ValueId,
        b: ValueId,
    },
    BnTrain {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BnEval {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: ValueId,
        mask: Vec<f64>,
    },
    QuantizeSte {
        x: ValueId,
        bits: u32,
        temp: f64,
        indices: Vec<u16>,
    },
    ScatterPorts {
        x: ValueId,
        ports: Vec<Vec<(usize, usize)>>,
        n_t: usize,
        m: usize,
    },
    Plane {
        x: ValueId,
        sample: usize,
        channel: usize,
    },
}

/// Batch statistics reported by a train-mode batchnorm, for running-stat
/// updates by the owning layer.
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    soft_quantizer: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            needs: Vec::new(),
            grads: Vec::new(),
            soft_quantizer: false,
        }
    }

    /// Replaces the hard quantizer forward with its smooth staircase
    /// surrogate so finite differences can audit the backward pass.
    /// Training and inference keep the hard forward.
    pub fn set_soft_quantizer(&mut self, soft: bool) {
        self.soft_quantizer = soft;
    }

    fn push(&mut self, value: Tensor, op: Op, needs: bool) -> ValueId {
        self.values.push(value);
        self.ops.push(op);
        self.needs.push(needs);
        self.grads.push(None);
        ValueId(self.values.len() - 1)
    }

    fn needs_any(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.needs[id.0])
    }

    /// Registers a copy of `t` as a differentiable leaf (if it requires
    /// grad) or a plain input.
    pub fn leaf(&mut self, t: &Tensor) -> ValueId {
        let needs = t.requires_grad;
        let mut v = t.clone();
        v.grad = None;
        self.push(v, Op::Leaf, needs)
    }

    pub fn constant(&mut self, t: Tensor) -> ValueId {
        self.push(t, Op::Constant, false)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn quant_indices(&self, id: ValueId) -> Option<&[u16]> {
        match &self.ops[id.0] {
            Op::QuantizeSte { indices, .. } => Some(indices),
            _ => None,
        }
    }

    fn check_same_shape(&self, op: &'static str, a: ValueId, b: ValueId) -> Result<()> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::Shape {
                op,
                left: self.values[a.0].shape().to_vec(),
                right: self.values[b.0].shape().to_vec(),
            });
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_same_shape("add", a, b)?;
        let data = zip_map(self.values[a.0].data(), self.values[b.0].data(), |x, y| x + y);
        let t = Tensor::from_vec(self.values[a.0].shape(), data)?;
        Ok(self.push(t, Op::Add(a, b), self.needs_any(&[a, b])))
    }

    /// Elementwise sum of two same-shape tensors; gradient routes
    /// unchanged to both inputs.
    pub fn residual_add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.add(a, b)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_same_shape("sub", a, b)?;
        let data = zip_map(self.values[a.0].data(), self.values[b.0].data(), |x, y| x - y);
        let t = Tensor::from_vec(self.values[a.0].shape(), data)?;
        Ok(self.push(t, Op::Sub(a, b), self.needs_any(&[a, b])))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_same_shape("mul", a, b)?;
        let data = zip_map(self.values[a.0].data(), self.values[b.0].data(), |x, y| x * y);
        let t = Tensor::from_vec(self.values[a.0].shape(), data)?;
        Ok(self.push(t, Op::Mul(a, b), self.needs_any(&[a, b])))
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_same_shape("div", a, b)?;
        let data = zip_map(self.values[a.0].data(), self.values[b.0].data(), |x, y| x / y);
        let t = Tensor::from_vec(self.values[a.0].shape(), data)?;
        Ok(self.push(t, Op::Div(a, b), self.needs_any(&[a, b])))
    }

    pub fn neg(&mut self, a: ValueId) -> ValueId {
        let data = self.values[a.0].data().iter().map(|x| -x).collect();
        let t = Tensor::from_vec(self.values[a.0].shape(), data).expect("same shape");
        self.push(t, Op::Neg(a), self.needs[a.0])
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> ValueId {
        let data = self.values[a.0].data().iter().map(|x| c * x).collect();
        let t = Tensor::from_vec(self.values[a.0].shape(), data).expect("same shape");
        self.push(t, Op::Scale(a, c), self.needs[a.0])
    }

    pub fn add_scalar(&mut self, a: ValueId, c: f64) -> ValueId {
        let data = self.values[a.0].data().iter().map(|x| c + x).collect();
        let t = Tensor::from_vec(self.values[a.0].shape(), data).expect("same shape");
        self.push(t, Op::AddScalar(a), self.needs[a.0])
    }

    pub fn ln(&mut self, a: ValueId) -> ValueId {
        let data = self.values[a.0].data().iter().map(|x| x.ln()).collect();
        let t = Tensor::from_vec(self.values[a.0].shape(), data).expect("same shape");
        self.push(t, Op::Ln(a), self.needs[a.0])
    }

    pub fn sqrt(&mut self, a: ValueId) -> ValueId {
        let data = self.values[a.0].data().iter().map(|x| x.sqrt()).collect();
        let t = Tensor::from_vec(self.values[a.0].shape(), data).expect("same shape");
        self.push(t, Op::Sqrt(a), self.needs[a.0])
    }

    pub fn tanh(&mut self, a: ValueId) -> ValueId {
        let data = self.values[a.0].data().iter().map(|x| x.tanh()).collect();
        let t = Tensor::from_vec(self.values[a.0].shape(), data).expect("same shape");
        self.push(t, Op::Tanh(a), self.needs[a.0])
    }

    /// `lrelu(x) = x` for `x >= 0`, `slope * x` otherwise.
    pub fn leaky_relu(&mut self, a: ValueId, slope: f64) -> Result<ValueId> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky relu slope must be in (0,1), got {slope}"
            )));
        }
        let data = self.values[a.0]
            .data()
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        let t = Tensor::from_vec(self.values[a.0].shape(), data).expect("same shape");
        Ok(self.push(t, Op::LeakyRelu(a, slope), self.needs[a.0]))
    }

    // ---- linear algebra ----

    fn dims2(&self, id: ValueId) -> Result<(usize, usize)> {
        let s = self.values[id.0].shape();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "expected 2-d tensor",
                left: s.to_vec(),
                right: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, ka) = self.dims2(a)?;
        let (kb, n) = self.dims2(b)?;
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                left: vec![m, ka],
                right: vec![kb, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&mut out, self.values[a.0].data(), self.values[b.0].data(), m, ka, n);
        let t = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), self.needs_any(&[a, b])))
    }

    pub fn transpose2(&mut self, a: ValueId) -> Result<ValueId> {
        let (m, n) = self.dims2(a)?;
        let out = transpose(self.values[a.0].data(), m, n);
        let t = Tensor::from_vec(&[n, m], out)?;
        Ok(self.push(t, Op::Transpose(a), self.needs[a.0]))
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        let (rows, _) = self.dims2(parts[0])?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: vec![rows],
                    right: vec![r],
                });
            }
            total += c;
        }
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let (_, c) = self.dims2(p)?;
            let src = self.values[p.0].data();
            for i in 0..rows {
                out[i * total + off..i * total + off + c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let needs = self.needs_any(parts);
        let t = Tensor::from_vec(&[rows, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        let (_, cols) = self.dims2(parts[0])?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: vec![cols],
                    right: vec![c],
                });
            }
            total += r;
        }
        let mut out = Vec::with_capacity(total * cols);
        for &p in parts {
            out.extend_from_slice(self.values[p.0].data());
        }
        let needs = self.needs_any(parts);
        let t = Tensor::from_vec(&[total, cols], out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), needs))
    }

    pub fn slice2d(&mut self, x: ValueId, r0: usize, rows: usize, c0: usize, cols: usize) -> Result<ValueId> {
        let (m, n) = self.dims2(x)?;
        if r0 + rows > m || c0 + cols > n {
            return Err(Error::Shape {
                op: "slice2d",
                left: vec![m, n],
                right: vec![r0 + rows, c0 + cols],
            });
        }
        let src = self.values[x.0].data();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            out[i * cols..(i + 1) * cols]
                .copy_from_slice(&src[(r0 + i) * n + c0..(r0 + i) * n + c0 + cols]);
        }
        let t = Tensor::from_vec(&[rows, cols], out)?;
        Ok(self.push(t, Op::Slice2d { x, rows, cols, r0, c0 }, self.needs[x.0]))
    }

    /// Inverse of a square matrix by Gauss-Jordan with partial pivoting.
    pub fn mat_inverse(&mut self, a: ValueId) -> Result<ValueId> {
        let (m, n) = self.dims2(a)?;
        if m != n {
            return Err(Error::Shape {
                op: "mat_inverse",
                left: vec![m, n],
                right: vec![n, n],
            });
        }
        let inv = invert_dense(self.values[a.0].data(), n)?;
        let t = Tensor::from_vec(&[n, n], inv)?;
        Ok(self.push(t, Op::MatInverse(a), self.needs[a.0]))
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let s: f64 = self.values[a.0].data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), self.needs[a.0])
    }

    /// Same data, new shape (element counts must match).
    pub fn reshape(&mut self, a: ValueId, shape: &[usize]) -> Result<ValueId> {
        let n: usize = shape.iter().product();
        if n != self.values[a.0].numel() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.values[a.0].shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let t = Tensor::from_vec(shape, self.values[a.0].data().to_vec())?;
        Ok(self.push(t, Op::Reshape(a), self.needs[a.0]))
    }

    // ---- network layers ----

    /// Fully connected layer: `y = x W + b`.
    pub fn fc(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let (batch, f_in) = self.dims2(x)?;
        let (wi, f_out) = self.dims2(w)?;
        if f_in != wi {
            return Err(Error::Shape {
                op: "fc",
                left: vec![batch, f_in],
                right: vec![wi, f_out],
            });
        }
        if self.values[b.0].shape() != [f_out] {
            return Err(Error::Shape {
                op: "fc bias",
                left: self.values[b.0].shape().to_vec(),
                right: vec![f_out],
            });
        }
        let mut out = vec![0.0; batch * f_out];
        matmul_acc(&mut out, self.values[x.0].data(), self.values[w.0].data(), batch, f_in, f_out);
        let bias = self.values[b.0].data();
        for row in out.chunks_exact_mut(f_out) {
            for (y, bv) in row.iter_mut().zip(bias) {
                *y += bv;
            }
        }
        let t = Tensor::from_vec(&[batch, f_out], out)?;
        Ok(self.push(t, Op::Fc { x, w, b }, self.needs_any(&[x, w, b])))
    }

    /// 3x3 / stride 1 / pad 1 convolution preserving spatial size.
    pub fn conv2d(&mut self, x: ValueId, k: ValueId, b: ValueId) -> Result<ValueId> {
        let xs = self.values[x.0].shape().to_vec();
        let ks = self.values[k.0].shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape {
                op: "conv2d input",
                left: xs,
                right: vec![0, 0, 0, 0],
            });
        }
        if ks.len() != 4 || ks[2] != 3 || ks[3] != 3 {
            return Err(Error::Config(format!(
                "conv2d requires a 3x3 kernel, got {ks:?}"
            )));
        }
        let (batch, c_i, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_o, kc_i) = (ks[0], ks[1]);
        if kc_i != c_i {
            return Err(Error::Shape {
                op: "conv2d channels",
                left: xs,
                right: ks,
            });
        }
        if self.values[b.0].shape() != [c_o] {
            return Err(Error::Shape {
                op: "conv2d bias",
                left: self.values[b.0].shape().to_vec(),
                right: vec![c_o],
            });
        }
        let hw = h * w;
        let kmat = self.values[k.0].data();
        let bias = self.values[b.0].data();
        let xdata = self.values[x.0].data();
        let mut out = vec![0.0; batch * c_o * hw];
        // Each sample owns a disjoint output slice.
        out.par_chunks_mut(c_o * hw)
            .zip(xdata.par_chunks(c_i * hw))
            .for_each(|(y_s, x_s)| {
                let mut col = vec![0.0; c_i * 9 * hw];
                im2col3(x_s, c_i, h, w, &mut col);
                matmul_acc(y_s, kmat, &col, c_o, c_i * 9, hw);
                for o in 0..c_o {
                    let row = &mut y_s[o * hw..(o + 1) * hw];
                    let bv = bias[o];
                    row.iter_mut().for_each(|v| *v += bv);
                }
            });
        let t = Tensor::from_vec(&[batch, c_o, h, w], out)?;
        Ok(self.push(t, Op::Conv2d { x, k, b }, self.needs_any(&[x, k, b])))
    }

    /// Train-mode batch normalization over channel axis 1. Returns the
    /// output id plus batch statistics for running-stat updates.
    pub fn batchnorm_train(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
    ) -> Result<(ValueId, BnBatchStats)> {
        let (channels, spatial) = self.bn_dims(x, gamma, beta)?;
        let xs = self.values[x.0].shape().to_vec();
        let batch = xs[0];
        let n = batch * spatial;
        let xd = self.values[x.0].data();
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for c in 0..channels {
            let mut s = 0.0;
            for b in 0..batch {
                let base = (b * channels + c) * spatial;
                s += xd[base..base + spatial].iter().sum::<f64>();
            }
            mean[c] = s / n as f64;
            let mut v = 0.0;
            for b in 0..batch {
                let base = (b * channels + c) * spatial;
                v += xd[base..base + spatial]
                    .iter()
                    .map(|x| (x - mean[c]) * (x - mean[c]))
                    .sum::<f64>();
            }
            var[c] = v / n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let g = self.values[gamma.0].data();
        let be = self.values[beta.0].data();
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * spatial;
                let (mu, is, gc, bc) = (mean[c], inv_std[c], g[c], be[c]);
                for i in 0..spatial {
                    out[base + i] = gc * (xd[base + i] - mu) * is + bc;
                }
            }
        }
        let var_unbiased = if n > 1 {
            var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect()
        } else {
            var.clone()
        };
        let stats = BnBatchStats {
            mean: mean.clone(),
            var_unbiased,
        };
        let t = Tensor::from_vec(&xs, out)?;
        let needs = self.needs_any(&[x, gamma, beta]);
        let id = self.push(
            t,
            Op::BnTrain {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            needs,
        );
        Ok((id, stats))
    }

    /// Eval-mode batch normalization using frozen running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<ValueId> {
        let (channels, spatial) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(Error::Shape {
                op: "batchnorm running stats",
                left: vec![running_mean.len(), running_var.len()],
                right: vec![channels],
            });
        }
        let xs = self.values[x.0].shape().to_vec();
        let batch = xs[0];
        let xd = self.values[x.0].data();
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|v| 1.0 / (v + BN_EPSILON).sqrt())
            .collect();
        let g = self.values[gamma.0].data();
        let be = self.values[beta.0].data();
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * spatial;
                let (mu, is, gc, bc) = (running_mean[c], inv_std[c], g[c], be[c]);
                for i in 0..spatial {
                    out[base + i] = gc * (xd[base + i] - mu) * is + bc;
                }
            }
        }
        let t = Tensor::from_vec(&xs, out)?;
        let needs = self.needs_any(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::BnEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            needs,
        ))
    }

    fn bn_dims(&self, x: ValueId, gamma: ValueId, beta: ValueId) -> Result<(usize, usize)> {
        let xs = self.values[x.0].shape();
        if xs.len() < 2 {
            return Err(Error::Shape {
                op: "batchnorm input",
                left: xs.to_vec(),
                right: vec![],
            });
        }
        let channels = xs[1];
        let spatial: usize = xs[2..].iter().product();
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.values[id.0].shape() != [channels] {
                return Err(Error::Shape {
                    op: match name {
                        "gamma" => "batchnorm gamma",
                        _ => "batchnorm beta",
                    },
                    left: self.values[id.0].shape().to_vec(),
                    right: vec![channels],
                });
            }
        }
        Ok((channels, spatial))
    }

    /// Train-mode dropout with a mask derived from `seed`; survivors are
    /// scaled by `1/(1-p)`.
    pub fn dropout(&mut self, x: ValueId, p: f64, seed: u64) -> Result<ValueId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout p must be in [0,1), got {p}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.values[x.0].numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = zip_map(self.values[x.0].data(), &mask, |x, m| x * m);
        let t = Tensor::from_vec(self.values[x.0].shape(), data)?;
        let needs = self.needs[x.0];
        Ok(self.push(t, Op::Dropout { x, mask }, needs))
    }

    /// Hard uniform quantization onto the 2^bits midpoint levels of
    /// [-1, 1]; the backward pass uses the stacked-sigmoid staircase
    /// surrogate derivative.
    pub fn quantize_ste(&mut self, x: ValueId, bits: u32, temp: f64) -> Result<ValueId> {
        if bits < 1 {
            return Err(Error::Config(format!(
                "uniform quantizer needs at least 1 bit, got {bits}"
            )));
        }
        let levels = 1u32 << bits;
        let soft = self.soft_quantizer;
        let mut indices = Vec::with_capacity(self.values[x.0].numel());
        let data: Vec<f64> = self.values[x.0]
            .data()
            .iter()
            .map(|&v| {
                let idx = quant_index(v, levels);
                indices.push(idx as u16);
                if soft {
                    staircase_surrogate(v, bits, temp)
                } else {
                    quant_level(idx, levels)
                }
            })
            .collect();
        let t = Tensor::from_vec(self.values[x.0].shape(), data)?;
        let needs = self.needs[x.0];
        Ok(self.push(
            t,
            Op::QuantizeSte {
                x,
                bits,
                temp,
                indices,
            },
            needs,
        ))
    }

    /// Scatters per-sample coefficient vectors (re half then im half)
    /// onto their (angle, delay) ports of an all-zero (2, n_t, m) grid.
    pub fn scatter_ports(
        &mut self,
        x: ValueId,
        ports: &[Vec<(usize, usize)>],
        n_t: usize,
        m: usize,
    ) -> Result<ValueId> {
        let (batch, width) = self.dims2(x)?;
        if ports.len() != batch {
            return Err(Error::Shape {
                op: "scatter_ports batch",
                left: vec![batch],
                right: vec![ports.len()],
            });
        }
        let n_p = width / 2;
        if n_p * 2 != width {
            return Err(Error::Shape {
                op: "scatter_ports width",
                left: vec![width],
                right: vec![2 * n_p],
            });
        }
        for list in ports {
            validate_ports(list, n_p, n_t, m)?;
        }
        let xd = self.values[x.0].data();
        let mut out = vec![0.0; batch * 2 * n_t * m];
        for (s, list) in ports.iter().enumerate() {
            for (i, &(r, c)) in list.iter().enumerate() {
                out[((s * 2) * n_t + r) * m + c] = xd[s * width + i];
                out[((s * 2 + 1) * n_t + r) * m + c] = xd[s * width + n_p + i];
            }
        }
        let t = Tensor::from_vec(&[batch, 2, n_t, m], out)?;
        let needs = self.needs[x.0];
        Ok(self.push(
            t,
            Op::ScatterPorts {
                x,
                ports: ports.to_vec(),
                n_t,
                m,
            },
            needs,
        ))
    }

    /// Extracts one (h, w) plane of a (batch, channels, h, w) tensor.
    pub fn plane(&mut self, x: ValueId, sample: usize, channel: usize) -> Result<ValueId> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.len() != 4 || sample >= xs[0] || channel >= xs[1] {
            return Err(Error::Shape {
                op: "plane",
                left: xs,
                right: vec![sample, channel],
            });
        }
        let (h, w) = (xs[2], xs[3]);
        let base = (sample * xs[1] + channel) * h * w;
        let data = self.values[x.0].data()[base..base + h * w].to_vec();
        let t = Tensor::from_vec(&[h, w], data)?;
        Ok(self.push(t, Op::Plane { x, sample, channel }, self.needs[x.0]))
    }

    // ---- backward ----

    /// Accumulates d(root)/d(leaf) into every leaf gradient. `root`
    /// must be a scalar. Repeated calls keep accumulating.
    pub fn backward(&mut self, root: ValueId) -> Result<()> {
        if self.values[root.0].numel() != 1 {
            return Err(Error::Shape {
                op: "backward root must be scalar",
                left: self.values[root.0].shape().to_vec(),
                right: vec![1],
            });
        }
        if !self.values[root.0].data()[0].is_finite() {
            return Err(Error::Numerical(format!(
                "backward root is not finite: {}",
                self.values[root.0].data()[0]
            )));
        }
        if !self.needs[root.0] {
            return Ok(());
        }
        self.accum(root, &[1.0]);
        for i in (0..self.ops.len()).rev() {
            if !self.needs[i] {
                continue;
            }
            if matches!(self.ops[i], Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.dispatch_backward(i, &g);
        }
        Ok(())
    }

    fn accum(&mut self, id: ValueId, g: &[f64]) {
        if !self.needs[id.0] {
            return;
        }
        let buf = self.grads[id.0].get_or_insert_with(|| vec![0.0; self.values[id.0].numel()]);
        for (a, b) in buf.iter_mut().zip(g) {
            *a += b;
        }
    }

    fn dispatch_backward(&mut self, i: usize, g: &[f64]) {
        // Take the op out so `self` stays free for accumulation calls.
        let op = std::mem::replace(&mut self.ops[i], Op::Constant);
        match &op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accum(*a, g);
                self.accum(*b, g);
            }
            Op::Sub(a, b) => {
                self.accum(*a, g);
                if self.needs[b.0] {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accum(*b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.needs[a.0] {
                    let da = zip_map(g, self.values[b.0].data(), |g, b| g * b);
                    self.accum(*a, &da);
                }
                if self.needs[b.0] {
                    let db = zip_map(g, self.values[a.0].data(), |g, a| g * a);
                    self.accum(*b, &db);
                }
            }
            Op::Div(a, b) => {
                if self.needs[a.0] {
                    let da = zip_map(g, self.values[b.0].data(), |g, b| g / b);
                    self.accum(*a, &da);
                }
                if self.needs[b.0] {
                    let y = self.values[i].data();
                    let bd = self.values[b.0].data();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(y.iter().zip(bd))
                        .map(|(g, (y, b))| -g * y / b)
                        .collect();
                    self.accum(*b, &db);
                }
            }
            Op::Neg(a) => {
                let da: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accum(*a, &da);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|v| c * v).collect();
                self.accum(*a, &da);
            }
            Op::AddScalar(a) => self.accum(*a, g),
            Op::Ln(a) => {
                let da = zip_map(g, self.values[a.0].data(), |g, x| g / x);
                self.accum(*a, &da);
            }
            Op::Sqrt(a) => {
                let da = zip_map(g, self.values[i].data(), |g, y| 0.5 * g / y);
                self.accum(*a, &da);
            }
            Op::Tanh(a) => {
                let da = zip_map(g, self.values[i].data(), |g, y| g * (1.0 - y * y));
                self.accum(*a, &da);
            }
            Op::LeakyRelu(a, slope) => {
                let da = zip_map(g, self.values[a.0].data(), |g, x| {
                    if x >= 0.0 {
                        g
                    } else {
                        g * slope
                    }
                });
                self.accum(*a, &da);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.values[a.0].shape()[0], self.values[a.0].shape()[1]);
                let n = self.values[b.0].shape()[1];
                if self.needs[a.0] {
                    let bt = transpose(self.values[b.0].data(), k, n);
                    let mut da = vec![0.0; m * k];
                    matmul_acc(&mut da, g, &bt, m, n, k);
                    self.accum(*a, &da);
                }
                if self.needs[b.0] {
                    let mut db = vec![0.0; k * n];
                    matmul_t_acc(&mut db, self.values[a.0].data(), g, k, m, n);
                    self.accum(*b, &db);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (self.values[i].shape()[0], self.values[i].shape()[1]);
                let da = transpose(g, n, m);
                self.accum(*a, &da);
            }
            Op::ConcatCols(parts) => {
                let total = self.values[i].shape()[1];
                let rows = self.values[i].shape()[0];
                let mut off = 0;
                for &p in parts {
                    let c = self.values[p.0].shape()[1];
                    if self.needs[p.0] {
                        let mut dp = vec![0.0; rows * c];
                        for r in 0..rows {
                            dp[r * c..(r + 1) * c]
                                .copy_from_slice(&g[r * total + off..r * total + off + c]);
                        }
                        self.accum(p, &dp);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.values[p.0].numel();
                    if self.needs[p.0] {
                        self.accum(p, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Slice2d { x, rows, cols, r0, c0 } => {
                let n = self.values[x.0].shape()[1];
                let mut dx = vec![0.0; self.values[x.0].numel()];
                for i2 in 0..*rows {
                    dx[(r0 + i2) * n + c0..(r0 + i2) * n + c0 + cols]
                        .copy_from_slice(&g[i2 * cols..(i2 + 1) * cols]);
                }
                self.accum(*x, &dx);
            }
            Op::MatInverse(a) => {
                // dA = -Yᵀ G Yᵀ with Y = A⁻¹.
                let n = self.values[i].shape()[0];
                let yt = transpose(self.values[i].data(), n, n);
                let mut t1 = vec![0.0; n * n];
                matmul_acc(&mut t1, g, &yt, n, n, n);
                let mut da = vec![0.0; n * n];
                matmul_acc(&mut da, &yt, &t1, n, n, n);
                da.iter_mut().for_each(|v| *v = -*v);
                self.accum(*a, &da);
            }
            Op::SumAll(a) => {
                let da = vec![g[0]; self.values[a.0].numel()];
                self.accum(*a, &da);
            }
            Op::Reshape(a) => self.accum(*a, g),
            Op::Fc { x, w, b } => {
                let (batch, f_in) = (self.values[x.0].shape()[0], self.values[x.0].shape()[1]);
                let f_out = self.values[w.0].shape()[1];
                if self.needs[x.0] {
                    let wt = transpose(self.values[w.0].data(), f_in, f_out);
                    let mut dx = vec![0.0; batch * f_in];
                    matmul_acc(&mut dx, g, &wt, batch, f_out, f_in);
                    self.accum(*x, &dx);
                }
                if self.needs[w.0] {
                    let mut dw = vec![0.0; f_in * f_out];
                    matmul_t_acc(&mut dw, self.values[x.0].data(), g, f_in, batch, f_out);
                    self.accum(*w, &dw);
                }
                if self.needs[b.0] {
                    let mut db = vec![0.0; f_out];
                    for row in g.chunks_exact(f_out) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    self.accum(*b, &db);
                }
            }
            Op::Conv2d { x, k, b } => self.conv2d_backward(*x, *k, *b, g),
            Op::BnTrain {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => self.bn_train_backward(*x, *gamma, *beta, mean, inv_std, g),
            Op::BnEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => self.bn_eval_backward(*x, *gamma, *beta, mean, inv_std, g),
            Op::Dropout { x, mask } => {
                let dx = zip_map(g, mask, |g, m| g * m);
                self.accum(*x, &dx);
            }
            Op::QuantizeSte { x, bits, temp, .. } => {
                let da = zip_map(g, self.values[x.0].data(), |g, v| {
                    g * staircase_derivative(v, *bits, *temp)
                });
                self.accum(*x, &da);
            }
            Op::ScatterPorts { x, ports, n_t, m } => {
                let width = self.values[x.0].shape()[1];
                let n_p = width / 2;
                let mut dx = vec![0.0; self.values[x.0].numel()];
                for (s, list) in ports.iter().enumerate() {
                    for (i2, &(r, c)) in list.iter().enumerate() {
                        dx[s * width + i2] = g[((s * 2) * n_t + r) * m + c];
                        dx[s * width + n_p + i2] = g[((s * 2 + 1) * n_t + r) * m + c];
                    }
                }
                self.accum(*x, &dx);
            }
            Op::Plane { x, sample, channel } => {
                let xs = self.values[x.0].shape();
                let (ch, h, w) = (xs[1], xs[2], xs[3]);
                let mut dx = vec![0.0; self.values[x.0].numel()];
                let base = (sample * ch + channel) * h * w;
                dx[base..base + h * w].copy_from_slice(g);
                self.accum(*x, &dx);
            }
        }
        self.ops[i] = op;
    }

    fn conv2d_backward(&mut self, x: ValueId, k: ValueId, b: ValueId, g: &[f64]) {
        let needs_x = self.needs[x.0];
        let needs_k = self.needs[k.0];
        let needs_b = self.needs[b.0];
        let xs = self.values[x.0].shape().to_vec();
        let (batch, c_i, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let c_o = self.values[k.0].shape()[0];
        let hw = h * w;

        let mut db = Vec::new();
        let mut dk = Vec::new();
        let mut dx = Vec::new();
        {
            let kmat = self.values[k.0].data();
            let xd = self.values[x.0].data();

            if needs_b {
                db = vec![0.0; c_o];
                for s in 0..batch {
                    for o in 0..c_o {
                        db[o] += g[(s * c_o + o) * hw..(s * c_o + o + 1) * hw]
                            .iter()
                            .sum::<f64>();
                    }
                }
            }

            if needs_x || needs_k {
                // Fixed-size sample chunks keep the dK reduction order
                // independent of thread scheduling.
                let chunk = batch.div_ceil(4).max(1);
                let samples: Vec<usize> = (0..batch).collect();
                let results: Vec<(Vec<f64>, Vec<f64>)> = samples
                    .par_chunks(chunk)
                    .map(|samples| {
                        let mut dkt_part = vec![0.0; usize::from(needs_k) * c_i * 9 * c_o];
                        let mut dx_part =
                            vec![0.0; usize::from(needs_x) * samples.len() * c_i * hw];
                        let mut col = vec![0.0; c_i * 9 * hw];
                        for (si, &s) in samples.iter().enumerate() {
                            let g_s = &g[s * c_o * hw..(s + 1) * c_o * hw];
                            if needs_k {
                                im2col3(&xd[s * c_i * hw..(s + 1) * c_i * hw], c_i, h, w, &mut col);
                                let gt = transpose(g_s, c_o, hw);
                                matmul_acc(&mut dkt_part, &col, &gt, c_i * 9, hw, c_o);
                            }
                            if needs_x {
                                let mut dxcol = vec![0.0; c_i * 9 * hw];
                                matmul_t_acc(&mut dxcol, kmat, g_s, c_i * 9, c_o, hw);
                                col2im3(
                                    &dxcol,
                                    c_i,
                                    h,
                                    w,
                                    &mut dx_part[si * c_i * hw..(si + 1) * c_i * hw],
                                );
                            }
                        }
                        (dkt_part, dx_part)
                    })
                    .collect();

                if needs_k {
                    let mut dkt = vec![0.0; c_i * 9 * c_o];
                    for (part, _) in &results {
                        for (a, b2) in dkt.iter_mut().zip(part) {
                            *a += b2;
                        }
                    }
                    dk = transpose(&dkt, c_i * 9, c_o);
                }
                if needs_x {
                    dx = Vec::with_capacity(batch * c_i * hw);
                    for (_, part) in &results {
                        dx.extend_from_slice(part);
                    }
                }
            }
        }

        if needs_b {
            self.accum(b, &db);
        }
        if needs_k {
            self.accum(k, &dk);
        }
        if needs_x {
            self.accum(x, &dx);
        }
    }

    fn bn_train_backward(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: &[f64],
        inv_std: &[f64],
        g: &[f64],
    ) {
        let xs = self.values[x.0].shape().to_vec();
        let (batch, channels) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let n = (batch * spatial) as f64;
        let xd = self.values[x.0].data();
        let gam = self.values[gamma.0].data();

        let mut dgamma = vec![0.0; channels];
        let mut dbeta = vec![0.0; channels];
        let mut sum_dxhat = vec![0.0; channels];
        let mut sum_dxhat_xhat = vec![0.0; channels];
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * spatial;
                for i in 0..spatial {
                    let xhat = (xd[base + i] - mean[c]) * inv_std[c];
                    let gv = g[base + i];
                    dbeta[c] += gv;
                    dgamma[c] += gv * xhat;
                    let dxhat = gv * gam[c];
                    sum_dxhat[c] += dxhat;
                    sum_dxhat_xhat[c] += dxhat * xhat;
                }
            }
        }
        if self.needs[x.0] {
            let mut dx = vec![0.0; xd.len()];
            for b in 0..batch {
                for c in 0..channels {
                    let base = (b * channels + c) * spatial;
                    for i in 0..spatial {
                        let xhat = (xd[base + i] - mean[c]) * inv_std[c];
                        let dxhat = g[base + i] * gam[c];
                        dx[base + i] = inv_std[c] / n
                            * (n * dxhat - sum_dxhat[c] - xhat * sum_dxhat_xhat[c]);
                    }
                }
            }
            self.accum(x, &dx);
        }
        self.accum(gamma, &dgamma);
        self.accum(beta, &dbeta);
    }

    fn bn_eval_backward(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: &[f64],
        inv_std: &[f64],
        g: &[f64],
    ) {
        let xs = self.values[x.0].shape().to_vec();
        let (batch, channels) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let gam = self.values[gamma.0].data();
        let xd = self.values[x.0].data();
        let mut dgamma = vec![0.0; channels];
        let mut dbeta = vec![0.0; channels];
        let mut dx = vec![0.0; xd.len()];
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * spatial;
                for i in 0..spatial {
                    let gv = g[base + i];
                    let xhat = (xd[base + i] - mean[c]) * inv_std[c];
                    dbeta[c] += gv;
                    dgamma[c] += gv * xhat;
                    dx[base + i] = gv * gam[c] * inv_std[c];
                }
            }
        }
        if self.needs[x.0] {
            self.accum(x, &dx);
        }
        self.accum(gamma, &dgamma);
        self.accum(beta, &dbeta);
    }
}

fn validate_ports(list: &[(usize, usize)], n_p: usize, n_t: usize, m: usize) -> Result<()> {
    if list.len() != n_p {
        return Err(Error::Shape {
            op: "port list length",
            left: vec![list.len()],
            right: vec![n_p],
        });
    }
    let mut seen = std::collections::HashSet::new();
    for &(r, c) in list {
        if r >= n_t || c >= m {
            return Err(Error::Invariant(format!(
                "port ({r},{c}) outside {n_t}x{m} grid"
            )));
        }
        if !seen.insert((r, c)) {
            return Err(Error::Invariant(format!("duplicate port ({r},{c})")));
        }
    }
    Ok(())
}

/// Index of the nearest midpoint level for inputs in [-1, 1].
pub fn quant_index(x: f64, levels: u32) -> u32 {
    let pos = (x + 1.0) * levels as f64 / 2.0;
    (pos.floor() as i64).clamp(0, levels as i64 - 1) as u32
}

/// The midpoint level value for a given index: -1 + (2i+1)/levels.
pub fn quant_level(idx: u32, levels: u32) -> f64 {
    -1.0 + (2.0 * idx as f64 + 1.0) / levels as f64
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// The stacked-sigmoid staircase surrogate S(x) for the hard quantizer.
pub fn staircase_surrogate(x: f64, bits: u32, temp: f64) -> f64 {
    let levels = 1u32 << bits;
    let mut s = 0.0;
    for j in 1..levels {
        let edge = -1.0 + 2.0 * j as f64 / levels as f64;
        s += sigmoid(temp * (x - edge));
    }
    -1.0 + 2.0 / levels as f64 * s
}

/// d/dx of `staircase_surrogate`.
pub fn staircase_derivative(x: f64, bits: u32, temp: f64) -> f64 {
    let levels = 1u32 << bits;
    let mut s = 0.0;
    for j in 1..levels {
        let edge = -1.0 + 2.0 * j as f64 / levels as f64;
        let sg = sigmoid(temp * (x - edge));
        s += sg * (1.0 - sg);
    }
    2.0 / levels as f64 * temp * s
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Dense inverse by Gauss-Jordan with partial pivoting.
pub fn invert_dense(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let mut pivot = col;
        let mut best = m[col * n + col].abs();
        for r in col + 1..n {
            let v = m[r * n + col].abs();
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if best < 1e-300 {
            return Err(Error::Numerical("singular matrix in inverse".into()));
        }
        if pivot != col {
            for j in 0..n {
                m.swap(col * n + j, pivot * n + j);
                inv.swap(col * n + j, pivot * n + j);
            }
        }
        let d = m[col * n + col];
        for j in 0..n {
            m[col * n + j] /= d;
            inv[col * n + j] /= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                m[r * n + j] -= f * m[col * n + j];
                inv[r * n + j] -= f * inv[col * n + j];
            }
        }
    }
    Ok(inv)
}
