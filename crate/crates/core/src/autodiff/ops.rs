//! Differentiable primitives: forward kernels, their adjoints, and the
//! [`Graph`] methods that record them.

use super::graph::{Backward, Graph, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::par;

/// Stride, zero padding, and dilation of a standard convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvParams {
    pub const fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        Self { stride, pad, dilation }
    }

    /// Stride 1 with padding equal to the dilation: same-size output for 3×3 kernels.
    pub const fn same3(dilation: usize) -> Self {
        Self::new(1, dilation, dilation)
    }

    fn out_extent(&self, len: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + 2 * self.pad;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    p: ConvParams,
}

impl ConvGeom {
    fn new(input: &Tensor, weight: &Tensor, p: ConvParams) -> Result<Self> {
        if p.stride == 0 || p.dilation == 0 {
            return Err(Error::invalid("conv2d: stride and dilation must be >= 1"));
        }
        let (batch, cin, h, w) = input.dims4()?;
        let (cout, wcin, kh, kw) = weight.dims4()?;
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                expected: input.shape().to_vec(),
                got: weight.shape().to_vec(),
            });
        }
        let (Some(oh), Some(ow)) = (p.out_extent(h, kh), p.out_extent(w, kw)) else {
            return Err(Error::invalid(format!(
                "conv2d: input {:?} too small for kernel {:?} with {p:?}",
                input.shape(),
                weight.shape()
            )));
        };
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
            p,
        })
    }

    /// Input coordinate hit by output `o` through kernel tap `k`, if in bounds.
    #[inline]
    fn src(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let pos = (o * self.p.stride + k * self.p.dilation) as isize - self.p.pad as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }
}

fn check_bias(bias: Option<&Tensor>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                expected: vec![cout],
                got: b.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Direct cross-correlation with zero padding.
///
/// Each output cell accumulates `bias`, then input channels in order, then
/// kernel taps in row-major order.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, p: ConvParams) -> Result<Tensor> {
    let g = ConvGeom::new(input, weight, p)?;
    check_bias(bias, g.cout)?;
    let x = input.data();
    let wt = weight.data();
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.batch * g.cout * plane];
    par::for_each_chunk_mut(&mut out, plane, |idx, dst| {
        let (b, o) = (idx / g.cout, idx % g.cout);
        dst.fill(bias.map_or(0.0, |t| t.data()[o]));
        for c in 0..g.cin {
            let src = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = wt[((o * g.cin + c) * g.kh + ki) * g.kw + kj];
                    for oy in 0..g.oh {
                        let Some(iy) = g.src(oy, ki, g.h) else { continue };
                        let row = &src[iy * g.w..][..g.w];
                        let out_row = &mut dst[oy * g.ow..][..g.ow];
                        for (ox, acc) in out_row.iter_mut().enumerate() {
                            if let Some(ix) = g.src(ox, kj, g.w) {
                                *acc += wv * row[ix];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::from_parts(vec![g.batch, g.cout, g.oh, g.ow], out))
}

/// Gradients of [`conv2d`] with respect to input, weight, and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    upstream: &[f64],
    p: ConvParams,
    needs: [bool; 3],
) -> Result<[Option<Vec<f64>>; 3]> {
    let g = ConvGeom::new(input, weight, p)?;
    let x = input.data();
    let wt = weight.data();
    let plane = g.oh * g.ow;
    if upstream.len() != g.batch * g.cout * plane {
        return Err(Error::ShapeMismatch {
            op: "conv2d backward",
            expected: vec![g.batch, g.cout, g.oh, g.ow],
            got: vec![upstream.len()],
        });
    }
    let up_plane = |b: usize, o: usize| &upstream[(b * g.cout + o) * plane..][..plane];

    let grad_input = needs[0].then(|| {
        let mut gin = vec![0.0; x.len()];
        par::for_each_chunk_mut(&mut gin, g.h * g.w, |idx, dst| {
            let (b, c) = (idx / g.cin, idx % g.cin);
            for o in 0..g.cout {
                let up = up_plane(b, o);
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let wv = wt[((o * g.cin + c) * g.kh + ki) * g.kw + kj];
                        for oy in 0..g.oh {
                            let Some(iy) = g.src(oy, ki, g.h) else { continue };
                            for ox in 0..g.ow {
                                if let Some(ix) = g.src(ox, kj, g.w) {
                                    dst[iy * g.w + ix] += up[oy * g.ow + ox] * wv;
                                }
                            }
                        }
                    }
                }
            }
        });
        gin
    });

    let grad_weight = needs[1].then(|| {
        let per_out = g.cin * g.kh * g.kw;
        let mut gw = vec![0.0; g.cout * per_out];
        par::for_each_chunk_mut(&mut gw, per_out, |o, dst| {
            for c in 0..g.cin {
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let mut acc = 0.0;
                        for b in 0..g.batch {
                            let up = up_plane(b, o);
                            let src = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
                            for oy in 0..g.oh {
                                let Some(iy) = g.src(oy, ki, g.h) else { continue };
                                for ox in 0..g.ow {
                                    if let Some(ix) = g.src(ox, kj, g.w) {
                                        acc += up[oy * g.ow + ox] * src[iy * g.w + ix];
                                    }
                                }
                            }
                        }
                        dst[(c * g.kh + ki) * g.kw + kj] = acc;
                    }
                }
            }
        });
        gw
    });

    let grad_bias = needs[2].then(|| bias_grad(upstream, g.batch, g.cout, plane));
    Ok([grad_input, grad_weight, grad_bias])
}

/// Per-channel sum of an upstream `[B, C, plane]` buffer.
pub(crate) fn bias_grad(upstream: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    (0..channels)
        .map(|o| {
            (0..batch)
                .map(|b| upstream[(b * channels + o) * plane..][..plane].iter().sum::<f64>())
                .sum()
        })
        .collect()
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, for each
/// output cell, the flat input index of its maximum (first in row-major
/// window order on ties).
pub fn max_pool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "max_pool2 needs even spatial extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = src[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > best {
                        best = src[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_parts(vec![b, c, oh, ow], out), argmax))
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean absolute difference over all elements.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same_shape("l1_loss", pred, target)?;
    let n = pred.len().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n)
}

/// Sign with the subgradient at zero fixed to 0.
#[inline]
fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct Conv2dOp {
    p: ConvParams,
    has_bias: bool,
}

impl Backward for Conv2dOp {
    fn backward(
        &self,
        upstream: &[f64],
        inputs: &[&Tensor],
        _output: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<f64>>>> {
        let need_bias = self.has_bias && needs[2];
        let [gi, gw, gb] = conv2d_backward(inputs[0], inputs[1], upstream, self.p, [needs[0], needs[1], need_bias])?;
        let mut out = vec![gi, gw];
        if self.has_bias {
            out.push(gb);
        }
        Ok(out)
    }
}

struct ReluOp;

impl Backward for ReluOp {
    fn backward(&self, up: &[f64], inputs: &[&Tensor], _: &Tensor, _: &[bool]) -> Result<Vec<Option<Vec<f64>>>> {
        let g = up
            .iter()
            .zip(inputs[0].data())
            .map(|(&u, &x)| if x > 0.0 { u } else { 0.0 })
            .collect();
        Ok(vec![Some(g)])
    }
}

struct MaxPoolOp {
    argmax: Vec<usize>,
}

impl Backward for MaxPoolOp {
    fn backward(&self, up: &[f64], inputs: &[&Tensor], _: &Tensor, _: &[bool]) -> Result<Vec<Option<Vec<f64>>>> {
        let mut g = vec![0.0; inputs[0].len()];
        for (&idx, &u) in self.argmax.iter().zip(up) {
            g[idx] += u;
        }
        Ok(vec![Some(g)])
    }
}

struct L1Op;

impl Backward for L1Op {
    fn backward(&self, up: &[f64], inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Result<Vec<Option<Vec<f64>>>> {
        let scale = up[0] / inputs[0].len().max(1) as f64;
        let d: Vec<f64> = inputs[0]
            .data()
            .iter()
            .zip(inputs[1].data())
            .map(|(p, t)| sign0(p - t) * scale)
            .collect();
        let gt = needs[1].then(|| d.iter().map(|v| -v).collect());
        Ok(vec![Some(d), gt])
    }
}

struct SumOp;

impl Backward for SumOp {
    fn backward(&self, up: &[f64], inputs: &[&Tensor], _: &Tensor, _: &[bool]) -> Result<Vec<Option<Vec<f64>>>> {
        Ok(vec![Some(vec![up[0]; inputs[0].len()])])
    }
}

struct MulOp;

impl Backward for MulOp {
    fn backward(&self, up: &[f64], inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Result<Vec<Option<Vec<f64>>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let ga = needs[0].then(|| up.iter().zip(b).map(|(u, b)| u * b).collect());
        let gb = needs[1].then(|| up.iter().zip(a).map(|(u, a)| u * a).collect());
        Ok(vec![ga, gb])
    }
}

struct AddOp;

impl Backward for AddOp {
    fn backward(&self, up: &[f64], _: &[&Tensor], _: &Tensor, needs: &[bool]) -> Result<Vec<Option<Vec<f64>>>> {
        Ok(vec![needs[0].then(|| up.to_vec()), needs[1].then(|| up.to_vec())])
    }
}

impl Graph {
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, p: ConvParams) -> Result<Var> {
        let out = conv2d(self.value(x), self.value(weight), bias.map(|b| self.value(b)), p)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(
            out,
            inputs,
            Box::new(Conv2dOp {
                p,
                has_bias: bias.is_some(),
            }),
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = relu(self.value(x));
        self.push(out, vec![x], Box::new(ReluOp))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = max_pool2(self.value(x))?;
        Ok(self.push(out, vec![x], Box::new(MaxPoolOp { argmax })))
    }

    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let v = l1_loss(self.value(pred), self.value(target))?;
        Ok(self.push(Tensor::scalar(v), vec![pred, target], Box::new(L1Op)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        self.push(Tensor::scalar(v), vec![x], Box::new(SumOp))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("mul", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(a, b)| a * b)
            .collect();
        let out = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        Ok(self.push(out, vec![a, b], Box::new(MulOp)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("add", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(a, b)| a + b)
            .collect();
        let out = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        Ok(self.push(out, vec![a, b], Box::new(AddOp)))
    }
}
