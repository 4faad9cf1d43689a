use std::sync::Arc;

use super::sample::{corners, interpolate, Corner};
use super::DilationMap;
use crate::autodiff::{bias_grad, Backward, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::par;

const TAPS: usize = 9;
/// Unit tap offsets `(row, col)` in kernel order.
const OFFSETS: [(f64, f64); TAPS] = [
    (-1.0, -1.0),
    (-1.0, 0.0),
    (-1.0, 1.0),
    (0.0, -1.0),
    (0.0, 0.0),
    (0.0, 1.0),
    (1.0, -1.0),
    (1.0, 0.0),
    (1.0, 1.0),
];

/// Bilinear corners of every tap at every position: `[TAPS][H·W]`.
#[derive(Debug)]
struct SamplePlan {
    h: usize,
    w: usize,
    corners: Vec<[Corner; 4]>,
}

impl SamplePlan {
    fn new(dmap: &DilationMap) -> Self {
        let (h, w) = (dmap.height, dmap.width);
        let mut cs = Vec::with_capacity(TAPS * h * w);
        for (di, dj) in OFFSETS {
            for y in 0..h {
                for x in 0..w {
                    let r = dmap.rates[y * w + x];
                    cs.push(corners(x as f64 + r * dj, y as f64 + r * di, w, h));
                }
            }
        }
        Self { h, w, corners: cs }
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn tap(&self, t: usize) -> &[[Corner; 4]] {
        &self.corners[t * self.plane()..][..self.plane()]
    }
}

/// Saved state from a refined convolution forward pass.
#[derive(Debug)]
pub struct RefinedConvContext {
    plan: Arc<SamplePlan>,
    batch: usize,
    cin: usize,
    cout: usize,
    /// Sampled inputs, `[B][Cin][TAPS][H·W]`.
    cols: Vec<f64>,
}

impl RefinedConvContext {
    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.cin, self.plan.h, self.plan.w]
    }
}

fn check_shapes(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    dmap: &DilationMap,
) -> Result<(usize, usize, usize)> {
    let (b, cin, h, w) = input.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if wcin != cin || kh != 3 || kw != 3 {
        return Err(Error::ShapeMismatch {
            op: "refined_dilated_conv weight",
            expected: vec![cout, cin, 3, 3],
            got: weight.shape().to_vec(),
        });
    }
    if (dmap.height, dmap.width) != (h, w) {
        return Err(Error::ShapeMismatch {
            op: "refined_dilated_conv dilation map",
            expected: vec![h, w],
            got: vec![dmap.height, dmap.width],
        });
    }
    if let Some(bias) = bias {
        if bias.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "refined_dilated_conv bias",
                expected: vec![cout],
                got: bias.shape().to_vec(),
            });
        }
    }
    Ok((b, cin, cout))
}

/// Forward pass returning the output and the context needed for backward.
///
/// Output cells accumulate `bias`, then channels in order, then taps in
/// row-major order, matching [`crate::autodiff::conv2d`] so integer rates
/// reproduce a standard dilated convolution.
pub fn refined_dilated_conv_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    dmap: &DilationMap,
) -> Result<(Tensor, RefinedConvContext)> {
    let (batch, cin, cout) = check_shapes(input, weight, bias, dmap)?;
    let plan = Arc::new(SamplePlan::new(dmap));
    let plane = plan.plane();
    let x = input.data();

    let mut cols = vec![0.0; batch * cin * TAPS * plane];
    par::for_each_chunk_mut(&mut cols, TAPS * plane, |idx, dst| {
        let src = &x[idx * plane..][..plane];
        for t in 0..TAPS {
            for (d, c) in dst[t * plane..][..plane].iter_mut().zip(plan.tap(t)) {
                *d = interpolate(src, c);
            }
        }
    });

    let wt = weight.data();
    let mut out = vec![0.0; batch * cout * plane];
    par::for_each_chunk_mut(&mut out, plane, |idx, dst| {
        let (b, o) = (idx / cout, idx % cout);
        dst.fill(bias.map_or(0.0, |t| t.data()[o]));
        for c in 0..cin {
            let sampled = &cols[(b * cin + c) * TAPS * plane..][..TAPS * plane];
            for t in 0..TAPS {
                let wv = wt[(o * cin + c) * TAPS + t];
                for (acc, s) in dst.iter_mut().zip(&sampled[t * plane..][..plane]) {
                    *acc += wv * s;
                }
            }
        }
    });

    let h = plan.h;
    let w = plan.w;
    let ctx = RefinedConvContext {
        plan,
        batch,
        cin,
        cout,
        cols,
    };
    Ok((Tensor::from_parts(vec![batch, cout, h, w], out), ctx))
}

/// `F_out(x_k) = Σ_{i,j∈{-1,0,1}} F_in(x_k + r_k·(i, j)) · w_{i,j} + bias`.
pub fn refined_dilated_conv(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    dmap: &DilationMap,
) -> Result<Tensor> {
    refined_dilated_conv_forward(input, weight, bias, dmap).map(|(out, _)| out)
}

/// Exact adjoints with respect to input, weight, and bias. The dilation map
/// is treated as data and receives no gradient.
pub fn refined_dilated_conv_backward(
    upstream: &[f64],
    ctx: &RefinedConvContext,
    weight: &Tensor,
    needs: [bool; 3],
) -> Result<[Option<Vec<f64>>; 3]> {
    let plane = ctx.plan.plane();
    let (batch, cin, cout) = (ctx.batch, ctx.cin, ctx.cout);
    if upstream.len() != batch * cout * plane {
        return Err(Error::ShapeMismatch {
            op: "refined_dilated_conv backward",
            expected: vec![batch, cout, ctx.plan.h, ctx.plan.w],
            got: vec![upstream.len()],
        });
    }
    let wt = weight.data();
    let up_plane = |b: usize, o: usize| &upstream[(b * cout + o) * plane..][..plane];

    let grad_input = needs[0].then(|| {
        let mut gin = vec![0.0; batch * cin * plane];
        par::for_each_chunk_mut(&mut gin, plane, |idx, dst| {
            let (b, c) = (idx / cin, idx % cin);
            let mut gcol = vec![0.0; plane];
            for t in 0..TAPS {
                gcol.iter_mut().for_each(|v| *v = 0.0);
                for o in 0..cout {
                    let wv = wt[(o * cin + c) * TAPS + t];
                    for (g, u) in gcol.iter_mut().zip(up_plane(b, o)) {
                        *g += wv * u;
                    }
                }
                for (g, cs) in gcol.iter().zip(ctx.plan.tap(t)) {
                    for corner in cs {
                        dst[corner.index] += corner.weight * g;
                    }
                }
            }
        });
        gin
    });

    let grad_weight = needs[1].then(|| {
        let mut gw = vec![0.0; cout * cin * TAPS];
        par::for_each_chunk_mut(&mut gw, cin * TAPS, |o, dst| {
            for c in 0..cin {
                for t in 0..TAPS {
                    let mut acc = 0.0;
                    for b in 0..batch {
                        let sampled = &ctx.cols[((b * cin + c) * TAPS + t) * plane..][..plane];
                        acc += up_plane(b, o).iter().zip(sampled).map(|(u, s)| u * s).sum::<f64>();
                    }
                    dst[c * TAPS + t] = acc;
                }
            }
        });
        gw
    });

    let grad_bias = needs[2].then(|| bias_grad(upstream, batch, cout, plane));
    Ok([grad_input, grad_weight, grad_bias])
}

struct RefinedConvOp {
    ctx: RefinedConvContext,
    has_bias: bool,
}

impl Backward for RefinedConvOp {
    fn backward(
        &self,
        upstream: &[f64],
        inputs: &[&Tensor],
        _output: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<f64>>>> {
        let need_bias = self.has_bias && needs[2];
        let [gi, gw, gb] =
            refined_dilated_conv_backward(upstream, &self.ctx, inputs[1], [needs[0], needs[1], need_bias])?;
        let mut out = vec![gi, gw];
        if self.has_bias {
            out.push(gb);
        }
        Ok(out)
    }
}

impl Graph {
    /// Records a refined dilated convolution driven by `dmap`.
    pub fn refined_dilated_conv(&mut self, x: Var, weight: Var, bias: Option<Var>, dmap: &DilationMap) -> Result<Var> {
        let (out, ctx) =
            refined_dilated_conv_forward(self.value(x), self.value(weight), bias.map(|b| self.value(b)), dmap)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(
            out,
            inputs,
            Box::new(RefinedConvOp {
                ctx,
                has_bias: bias.is_some(),
            }),
        ))
    }
}
