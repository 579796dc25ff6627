//! 2D cross-correlation and its adjoints.
//!
//! Every output element is accumulated as `0 + sum over (c, u, v)` in
//! lexicographic order, skipping taps that fall into the zero padding, and the
//! bias is added last. Accumulation is in `f64`; `f32` outputs are rounded once.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride: (1, 1),
            padding: (0, 0),
        }
    }
}

impl ConvGeometry {
    pub fn new(stride: (usize, usize), padding: (usize, usize)) -> ConvGeometry {
        ConvGeometry { stride, padding }
    }

    /// Output spatial extents for an `h x w` input and a `kh x kw` kernel.
    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if sh == 0 || sw == 0 {
            return Err(Error::shape("stride must be positive"));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::shape("kernel extents must be positive"));
        }
        let (eh, ew) = (h + 2 * ph, w + 2 * pw);
        if eh < kh || ew < kw {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than padded input {eh}x{ew}"
            )));
        }
        Ok(((eh - kh) / sh + 1, (ew - kw) / sw + 1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `[C_out, C_in, k_h, k_w]`
    pub weight: Tensor,
    /// `[C_out]`; absent means a zero bias.
    pub bias: Option<Tensor>,
    pub geometry: ConvGeometry,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>, geometry: ConvGeometry) -> Result<ConvParams> {
        let p = ConvParams {
            weight,
            bias,
            geometry,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.dims()[2], self.weight.dims()[3])
    }

    pub fn validate(&self) -> Result<()> {
        validate_weight(&self.weight, self.bias.as_ref())
    }
}

fn validate_weight(weight: &Tensor, bias: Option<&Tensor>) -> Result<()> {
    if weight.rank() != 4 {
        return Err(Error::shape(format!(
            "conv weight must be rank 4, got {}",
            weight.shape()
        )));
    }
    let d = weight.dims();
    if d[2] == 0 || d[3] == 0 {
        return Err(Error::shape("kernel extents must be positive"));
    }
    if let Some(b) = bias {
        if b.dims() != [d[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: b.shape().clone(),
                right: Shape::from([d[0]]),
            });
        }
    }
    Ok(())
}

/// Resolved extents of one convolution call.
#[derive(Clone, Copy, Debug)]
struct Dims {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

impl Dims {
    fn resolve(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeometry) -> Result<Dims> {
        validate_weight(weight, bias)?;
        if x.rank() != 4 {
            return Err(Error::shape(format!(
                "conv2d input must be rank 4 [N, C, H, W], got {}",
                x.shape()
            )));
        }
        let [n, c_in, h, w] = [x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]];
        let [c_out, wc, kh, kw] = [
            weight.dims()[0],
            weight.dims()[1],
            weight.dims()[2],
            weight.dims()[3],
        ];
        if wc != c_in {
            return Err(Error::shape(format!(
                "input has {c_in} channels but weight {} expects {wc}",
                weight.shape()
            )));
        }
        let (ho, wo) = g.output_hw(h, w, kh, kw)?;
        Ok(Dims {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            ho,
            wo,
            sh: g.stride.0,
            sw: g.stride.1,
            ph: g.padding.0,
            pw: g.padding.1,
        })
    }

    fn out_shape(&self) -> Shape {
        Shape::from([self.n, self.c_out, self.ho, self.wo])
    }

    /// Output indices `i` whose input row `i*s - p + u` lies inside `[0, extent)`.
    fn valid(out: usize, extent: usize, s: usize, p: usize, u: usize) -> std::ops::Range<usize> {
        let lo = if p > u { (p - u).div_ceil(s) } else { 0 };
        let hi = if extent + p > u {
            ((extent - 1 + p - u) / s + 1).min(out)
        } else {
            0
        };
        lo..hi.max(lo)
    }
}

pub fn conv2d_forward(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    conv2d(x, &p.weight, p.bias.as_ref(), p.geometry)
}

/// `Y[n,o,i,j] = b[o] + sum_{c,u,v} w[o,c,u,v] * X[n, c, i*s_h - p_h + u, j*s_w - p_w + v]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeometry) -> Result<Tensor> {
    let d = Dims::resolve(x, weight, bias, g)?;
    let xs = x.data();
    let ws = weight.data();
    let plane = d.ho * d.wo;
    let mut out = vec![0.0; d.n * d.c_out * plane];
    let rows: Vec<_> = (0..d.kh).map(|u| Dims::valid(d.ho, d.h, d.sh, d.ph, u)).collect();
    let cols: Vec<_> = (0..d.kw).map(|v| Dims::valid(d.wo, d.w, d.sw, d.pw, v)).collect();
    for n in 0..d.n {
        for o in 0..d.c_out {
            let acc = &mut out[(n * d.c_out + o) * plane..][..plane];
            for c in 0..d.c_in {
                let xp = &xs[(n * d.c_in + c) * d.h * d.w..][..d.h * d.w];
                let wk = &ws[(o * d.c_in + c) * d.kh * d.kw..][..d.kh * d.kw];
                for u in 0..d.kh {
                    for v in 0..d.kw {
                        let wv = wk[u * d.kw + v];
                        let cr = cols[v].clone();
                        if cr.is_empty() {
                            continue;
                        }
                        for i in rows[u].clone() {
                            let r = i * d.sh + u - d.ph;
                            let xrow = &xp[r * d.w..][..d.w];
                            let arow = &mut acc[i * d.wo..][..d.wo];
                            if d.sw == 1 {
                                let off = v as isize - d.pw as isize;
                                for j in cr.clone() {
                                    arow[j] += wv * xrow[(j as isize + off) as usize];
                                }
                            } else {
                                for j in cr.clone() {
                                    arow[j] += wv * xrow[j * d.sw + v - d.pw];
                                }
                            }
                        }
                    }
                }
            }
            if let Some(b) = bias {
                let bv = b.data()[o];
                for a in acc.iter_mut() {
                    *a += bv;
                }
            }
        }
    }
    let dtype = match bias {
        Some(b) => x.dtype().common(weight.dtype()).common(b.dtype()),
        None => x.dtype().common(weight.dtype()),
    };
    Ok(Tensor::from_parts(dtype, d.out_shape(), out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub dx: Tensor,
    pub dweight: Tensor,
    /// Broadcast adjoint of the bias: `db[o] = sum_{n,i,j} dY[n,o,i,j]`.
    pub dbias: Tensor,
}

pub fn conv2d_backward(x: &Tensor, p: &ConvParams, dy: &Tensor) -> Result<ConvGrads> {
    conv2d_grads(x, &p.weight, p.geometry, dy)
}

/// Gradients of [`conv2d`] for upstream `dy`.
///
/// `dweight` correlates `dy` with `x`; `dx` is the transposed convolution of
/// `dy` with the weight, i.e. a correlation with the 180-degree rotated kernel
/// whose channel axes are swapped (see [`rotate_kernel`]), scattered with the
/// forward stride.
pub fn conv2d_grads(x: &Tensor, weight: &Tensor, g: ConvGeometry, dy: &Tensor) -> Result<ConvGrads> {
    let d = Dims::resolve(x, weight, None, g)?;
    if dy.shape() != &d.out_shape() {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            left: dy.shape().clone(),
            right: d.out_shape(),
        });
    }
    let xs = x.data();
    let ws = weight.data();
    let gs = dy.data();
    let plane = d.ho * d.wo;
    let in_plane = d.h * d.w;
    let ksize = d.kh * d.kw;
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; weight.numel()];
    let mut db = vec![0.0; d.c_out];
    let rows: Vec<_> = (0..d.kh).map(|u| Dims::valid(d.ho, d.h, d.sh, d.ph, u)).collect();
    let cols: Vec<_> = (0..d.kw).map(|v| Dims::valid(d.wo, d.w, d.sw, d.pw, v)).collect();
    for n in 0..d.n {
        for o in 0..d.c_out {
            let gp = &gs[(n * d.c_out + o) * plane..][..plane];
            db[o] += gp.iter().sum::<f64>();
            for c in 0..d.c_in {
                let xp = &xs[(n * d.c_in + c) * in_plane..][..in_plane];
                let dxp = &mut dx[(n * d.c_in + c) * in_plane..][..in_plane];
                let base = (o * d.c_in + c) * ksize;
                for u in 0..d.kh {
                    for v in 0..d.kw {
                        let wv = ws[base + u * d.kw + v];
                        let mut acc = 0.0;
                        for i in rows[u].clone() {
                            let r = i * d.sh + u - d.ph;
                            let grow = &gp[i * d.wo..][..d.wo];
                            let xrow = &xp[r * d.w..][..d.w];
                            let dxrow = &mut dxp[r * d.w..][..d.w];
                            for j in cols[v].clone() {
                                let col = j * d.sw + v - d.pw;
                                acc += grow[j] * xrow[col];
                                dxrow[col] += wv * grow[j];
                            }
                        }
                        dw[base + u * d.kw + v] += acc;
                    }
                }
            }
        }
    }
    let dtype = x.dtype().common(weight.dtype()).common(dy.dtype());
    Ok(ConvGrads {
        dx: Tensor::from_parts(dtype, x.shape().clone(), dx),
        dweight: Tensor::from_parts(dtype, weight.shape().clone(), dw),
        dbias: Tensor::from_parts(dtype, Shape::from([d.c_out]), db),
    })
}

/// `w_rot[c, o, u, v] = w[o, c, k_h-1-u, k_w-1-v]`: spatial 180-degree rotation
/// with the two channel axes swapped.
pub fn rotate_kernel(weight: &Tensor) -> Result<Tensor> {
    validate_weight(weight, None)?;
    let [co, ci, kh, kw] = [
        weight.dims()[0],
        weight.dims()[1],
        weight.dims()[2],
        weight.dims()[3],
    ];
    let w = weight.data();
    let mut out = vec![0.0; w.len()];
    for o in 0..co {
        for c in 0..ci {
            for u in 0..kh {
                for v in 0..kw {
                    out[((c * co + o) * kh + u) * kw + v] =
                        w[((o * ci + c) * kh + (kh - 1 - u)) * kw + (kw - 1 - v)];
                }
            }
        }
    }
    Ok(Tensor::from_parts(weight.dtype(), Shape::from([ci, co, kh, kw]), out))
}

/// Per-output-channel scaling of a weight: `out[o, ...] = w[o, ...] * coeff[o]`.
pub fn scale_out_channels(weight: &Tensor, coeff: &Tensor) -> Result<Tensor> {
    let c_out = weight.dims().first().copied().unwrap_or(0);
    if coeff.numel() != c_out {
        return Err(Error::ShapeMismatch {
            op: "scale_out_channels",
            left: weight.shape().clone(),
            right: coeff.shape().clone(),
        });
    }
    let per = if c_out == 0 { 0 } else { weight.numel() / c_out };
    let cs = coeff.data();
    let data = weight
        .data()
        .iter()
        .enumerate()
        .map(|(k, &w)| w * cs[k / per])
        .collect();
    Ok(Tensor::from_parts(
        weight.dtype().common(coeff.dtype()),
        weight.shape().clone(),
        data,
    ))
}

/// Zero tensor used when a conv has no bias.
pub fn zero_bias(weight: &Tensor) -> Tensor {
    Tensor::zeros(weight.dtype(), [weight.dims()[0]])
}
