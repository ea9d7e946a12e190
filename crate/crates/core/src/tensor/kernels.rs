//! Forward and backward kernels for the operators the detector needs.
//!
//! Every function here is pure: it reads its inputs and returns freshly
//! allocated outputs. The graph layer decides what to keep for the
//! reverse pass.

use super::element::{gemm, Mat};
use super::{Element, Result, Tensor, TensorError};

/// Square-kernel convolution settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvParams {
            stride,
            padding,
            groups,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolParams {
    pub kernel: usize,
    pub stride: usize,
}

impl Default for PoolParams {
    fn default() -> Self {
        PoolParams { kernel: 3, stride: 2 }
    }
}

/// Output length of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Output length of a ceil-mode pooling window along one axis (no padding).
/// The last window must start inside the input.
pub fn pool_out_dim(input: usize, kernel: usize, stride: usize) -> usize {
    if input <= kernel {
        return 1;
    }
    let mut out = (input - kernel).div_ceil(stride) + 1;
    if (out - 1) * stride >= input {
        out -= 1;
    }
    out
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    cg: usize,
    og: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    p: ConvParams,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cg * self.kh * self.kw
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.p.stride == 1 && self.p.padding == 0
    }

    fn depthwise(&self) -> bool {
        self.cg == 1 && self.og == 1 && self.p.groups == self.c
    }
}

fn conv_geom<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: ConvParams,
) -> Result<ConvGeom> {
    let [n, c, h, w] = input.dims4("conv2d")?;
    let [o, cg, kh, kw] = weight.dims4("conv2d weight")?;
    let mismatch = || TensorError::ShapeMismatch {
        op: "conv2d",
        lhs: input.shape().to_vec(),
        rhs: weight.shape().to_vec(),
    };
    if p.groups == 0 || c % p.groups != 0 || o % p.groups != 0 || cg != c / p.groups {
        return Err(mismatch());
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: weight.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let ho = conv_out_dim(h, kh, p.stride, p.padding).ok_or_else(mismatch)?;
    let wo = conv_out_dim(w, kw, p.stride, p.padding).ok_or_else(mismatch)?;
    Ok(ConvGeom {
        n,
        c,
        h,
        w,
        o,
        cg,
        og: o / p.groups,
        kh,
        kw,
        ho,
        wo,
        p,
    })
}

/// Range of output columns whose tap `kj` lands inside `[0, w)`.
fn valid_out_range(w: usize, wo: usize, kj: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > kj { (pad - kj).div_ceil(stride) } else { 0 };
    let hi = if w + pad > kj {
        ((w + pad - kj).div_ceil(stride)).min(wo)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (h, w, ho, wo) = (g.h, g.w, g.ho, g.wo);
    let (s, pad) = (g.p.stride, g.p.padding);
    for c in 0..g.cg {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_out_range(w, wo, kj, s, pad);
                for oy in 0..ho {
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    let iy = (oy * s + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    for ox in lo..hi {
                        drow[ox] = src[ox * s + kj - pad];
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (h, w, ho, wo) = (g.h, g.w, g.ho, g.wo);
    let (s, pad) = (g.p.stride, g.p.padding);
    for c in 0..g.cg {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_out_range(w, wo, kj, s, pad);
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for ox in lo..hi {
                        drow[ox * s + kj - pad] = drow[ox * s + kj - pad] + srow[ox];
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Element>(x: &[T], wt: &[T], bias: Option<&[T]>, g: &ConvGeom, out: &mut [T]) {
    let (h, w, ho, wo) = (g.h, g.w, g.ho, g.wo);
    let (s, pad) = (g.p.stride, g.p.padding);
    for n in 0..g.n {
        for c in 0..g.c {
            let xs = &x[(n * g.c + c) * h * w..(n * g.c + c + 1) * h * w];
            let ws = &wt[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let os = &mut out[(n * g.c + c) * ho * wo..(n * g.c + c + 1) * ho * wo];
            os.fill(bias.map_or(T::zero(), |b| b[c]));
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = ws[ki * g.kw + kj];
                    let (lo, hi) = valid_out_range(w, wo, kj, s, pad);
                    for oy in 0..ho {
                        let iy = (oy * s + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xs[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut os[oy * wo..(oy + 1) * wo];
                        for ox in lo..hi {
                            orow[ox] = orow[ox] + wv * xrow[ox * s + kj - pad];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Element>(x: &[T], wt: &[T], dout: &[T], g: &ConvGeom, mut dx: Option<&mut [T]>, dw: &mut [T]) {
    let (h, w, ho, wo) = (g.h, g.w, g.ho, g.wo);
    let (s, pad) = (g.p.stride, g.p.padding);
    for n in 0..g.n {
        for c in 0..g.c {
            let base_in = (n * g.c + c) * h * w;
            let xs = &x[base_in..base_in + h * w];
            let ds = &dout[(n * g.c + c) * ho * wo..(n * g.c + c + 1) * ho * wo];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let widx = c * g.kh * g.kw + ki * g.kw + kj;
                    let wv = wt[widx];
                    let (lo, hi) = valid_out_range(w, wo, kj, s, pad);
                    let mut acc = T::zero();
                    for oy in 0..ho {
                        let iy = (oy * s + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let drow = &ds[oy * wo..(oy + 1) * wo];
                        let xrow = &xs[iy * w..(iy + 1) * w];
                        for ox in lo..hi {
                            acc = acc + drow[ox] * xrow[ox * s + kj - pad];
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let dxrow = &mut dx[base_in + iy * w..base_in + (iy + 1) * w];
                            for ox in lo..hi {
                                let ix = ox * s + kj - pad;
                                dxrow[ix] = dxrow[ix] + wv * drow[ox];
                            }
                        }
                    }
                    dw[widx] = dw[widx] + acc;
                }
            }
        }
    }
}

/// Cross-correlation of `input` (N, C, H, W) with `weight` (O, C/groups, kh, kw).
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: ConvParams,
) -> Result<Tensor<T>> {
    let g = conv_geom(input, weight, bias, p)?;
    let mut out = vec![T::zero(); g.n * g.o * g.hw_out()];
    let x = input.data();
    let wt = weight.data();
    if g.depthwise() {
        depthwise_forward(x, wt, bias.map(|b| b.data()), &g, &mut out);
        return Tensor::new(&[g.n, g.o, g.ho, g.wo], out);
    }
    let k = g.k();
    let hw_in = g.h * g.w;
    let hw_out = g.hw_out();
    let mut col = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * hw_out]
    };
    for n in 0..g.n {
        for grp in 0..g.p.groups {
            let x_off = (n * g.c + grp * g.cg) * hw_in;
            let xg = &x[x_off..x_off + g.cg * hw_in];
            let colm = if g.pointwise() {
                xg
            } else {
                im2col(xg, &g, &mut col);
                &col[..]
            };
            let wg = &wt[grp * g.og * k..(grp + 1) * g.og * k];
            let o_off = (n * g.o + grp * g.og) * hw_out;
            let og = &mut out[o_off..o_off + g.og * hw_out];
            gemm(Mat::new(wg, g.og, k), Mat::new(colm, k, hw_out), og, false);
        }
    }
    if let Some(b) = bias {
        let b = b.data();
        for (i, chunk) in out.chunks_mut(hw_out).enumerate() {
            let bv = b[i % g.o];
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    Tensor::new(&[g.n, g.o, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`]: (input, weight, bias). The input gradient is
/// skipped when `want_input` is false.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    p: ConvParams,
    want_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = conv_geom(input, weight, None, p)?;
    if grad_out.shape() != [g.n, g.o, g.ho, g.wo] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d backward",
            lhs: vec![g.n, g.o, g.ho, g.wo],
            rhs: grad_out.shape().to_vec(),
        });
    }
    let x = input.data();
    let wt = weight.data();
    let dout = grad_out.data();
    let hw_in = g.h * g.w;
    let hw_out = g.hw_out();
    let mut dx = if want_input {
        Some(vec![T::zero(); x.len()])
    } else {
        None
    };
    let mut dw = vec![T::zero(); wt.len()];
    let mut db = vec![T::zero(); g.o];
    for (i, chunk) in dout.chunks(hw_out).enumerate() {
        db[i % g.o] = db[i % g.o] + chunk.iter().fold(T::zero(), |a, &b| a + b);
    }
    if g.depthwise() {
        depthwise_backward(x, wt, dout, &g, dx.as_deref_mut(), &mut dw);
    } else {
        let k = g.k();
        let mut col = if g.pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); k * hw_out]
        };
        let mut dcol = if g.pointwise() || !want_input {
            Vec::new()
        } else {
            vec![T::zero(); k * hw_out]
        };
        for n in 0..g.n {
            for grp in 0..g.p.groups {
                let x_off = (n * g.c + grp * g.cg) * hw_in;
                let xg = &x[x_off..x_off + g.cg * hw_in];
                let colm = if g.pointwise() {
                    xg
                } else {
                    im2col(xg, &g, &mut col);
                    &col[..]
                };
                let o_off = (n * g.o + grp * g.og) * hw_out;
                let dg = &dout[o_off..o_off + g.og * hw_out];
                let wg = &wt[grp * g.og * k..(grp + 1) * g.og * k];
                let dwg = &mut dw[grp * g.og * k..(grp + 1) * g.og * k];
                gemm(Mat::new(dg, g.og, hw_out), Mat::t(colm, k, hw_out), dwg, true);
                if let Some(dx) = dx.as_mut() {
                    let dxg = &mut dx[x_off..x_off + g.cg * hw_in];
                    if g.pointwise() {
                        gemm(Mat::t(wg, g.og, k), Mat::new(dg, g.og, hw_out), dxg, false);
                    } else {
                        gemm(Mat::t(wg, g.og, k), Mat::new(dg, g.og, hw_out), &mut dcol, false);
                        col2im(&dcol, &g, dxg);
                    }
                }
            }
        }
    }
    let dx = match dx {
        Some(v) => Some(Tensor::new(input.shape(), v)?),
        None => None,
    };
    Ok((dx, Tensor::new(weight.shape(), dw)?, Tensor::new(&[g.o], db)?))
}

pub fn relu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data).expect("same shape")
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward<T: Element>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data).expect("same shape")
}

/// Ceil-mode max pooling without padding. Returns the output and, per
/// output element, the flat in-plane index of the winning input.
pub fn maxpool2d_ceil<T: Element>(input: &Tensor<T>, p: PoolParams) -> Result<(Tensor<T>, Vec<u32>)> {
    let [n, c, h, w] = input.dims4("maxpool2d")?;
    if h == 0 || w == 0 || p.kernel == 0 || p.stride == 0 {
        return Err(TensorError::InvalidShape {
            op: "maxpool2d",
            shape: input.shape().to_vec(),
            msg: "empty plane or zero kernel/stride".into(),
        });
    }
    let ho = pool_out_dim(h, p.kernel, p.stride);
    let wo = pool_out_dim(w, p.kernel, p.stride);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in input.data().chunks(h * w) {
        for oy in 0..ho {
            let y0 = oy * p.stride;
            let y1 = (y0 + p.kernel).min(h);
            for ox in 0..wo {
                let x0 = ox * p.stride;
                let x1 = (x0 + p.kernel).min(w);
                let mut best = y0 * w + x0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        if plane[y * w + x] > plane[best] {
                            best = y * w + x;
                        }
                    }
                }
                out.push(plane[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, arg))
}

pub fn maxpool2d_backward<T: Element>(input_shape: &[usize], argmax: &[u32], grad_out: &Tensor<T>) -> Tensor<T> {
    let plane_in: usize = input_shape[2] * input_shape[3];
    let plane_out = grad_out.shape()[2] * grad_out.shape()[3];
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (i, (&g, &a)) in grad_out.data().iter().zip(argmax).enumerate() {
        let plane = i / plane_out;
        let idx = plane * plane_in + a as usize;
        d[idx] = d[idx] + g;
    }
    dx
}

/// Concatenates along the channel axis: `a`'s channels first.
pub fn channel_concat<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.dims4("channel_concat")?;
    let [nb, cb, hb, wb] = b.dims4("channel_concat")?;
    if n != nb || h != hb || w != wb {
        return Err(TensorError::ShapeMismatch {
            op: "channel_concat",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (sa, sb) = (ca * h * w, cb * h * w);
    let mut out = Vec::with_capacity(n * (sa + sb));
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * sa..(i + 1) * sa]);
        out.extend_from_slice(&b.data()[i * sb..(i + 1) * sb]);
    }
    Tensor::new(&[n, ca + cb, h, w], out)
}

/// Splits a concatenated gradient back into its two channel blocks.
pub fn channel_split<T: Element>(grad: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = grad.dims4("channel_split")?;
    if ca > c {
        return Err(TensorError::InvalidShape {
            op: "channel_split",
            shape: grad.shape().to_vec(),
            msg: format!("split point {ca} beyond channel count"),
        });
    }
    let cb = c - ca;
    let (sa, sb) = (ca * h * w, cb * h * w);
    let mut a = Vec::with_capacity(n * sa);
    let mut b = Vec::with_capacity(n * sb);
    for chunk in grad.data().chunks(sa + sb) {
        a.extend_from_slice(&chunk[..sa]);
        b.extend_from_slice(&chunk[sa..]);
    }
    Ok((Tensor::new(&[n, ca, h, w], a)?, Tensor::new(&[n, cb, h, w], b)?))
}

/// Moves the bottom half of every channel plane into new channels:
/// (N, C, H, W) becomes (N, 2C, H/2, W) with the top-half rows in
/// channels `0..C` and the bottom-half rows in channels `C..2C`.
pub fn fold_stacked<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4("fold_stacked")?;
    if h % 2 != 0 {
        return Err(TensorError::InvalidShape {
            op: "fold_stacked",
            shape: input.shape().to_vec(),
            msg: "height must be even".into(),
        });
    }
    let half = h / 2 * w;
    let x = input.data();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..n {
        let img = &x[i * c * h * w..(i + 1) * c * h * w];
        for plane in img.chunks(h * w) {
            out.extend_from_slice(&plane[..half]);
        }
        for plane in img.chunks(h * w) {
            out.extend_from_slice(&plane[half..]);
        }
    }
    Tensor::new(&[n, 2 * c, h / 2, w], out)
}

/// Inverse of [`fold_stacked`]; also its gradient.
pub fn unfold_stacked<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c2, hh, w] = input.dims4("unfold_stacked")?;
    if c2 % 2 != 0 {
        return Err(TensorError::InvalidShape {
            op: "unfold_stacked",
            shape: input.shape().to_vec(),
            msg: "channel count must be even".into(),
        });
    }
    let c = c2 / 2;
    let half = hh * w;
    let x = input.data();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..n {
        let img = &x[i * c2 * half..(i + 1) * c2 * half];
        for ch in 0..c {
            out.extend_from_slice(&img[ch * half..(ch + 1) * half]);
            out.extend_from_slice(&img[(c + ch) * half..(c + ch + 1) * half]);
        }
    }
    Tensor::new(&[n, c, 2 * hh, w], out)
}

/// Rearranges a head output (N, A*D, H, W) into per-prior rows (N, H*W*A, D),
/// cell-major then anchor-major.
pub fn to_prior_rows<T: Element>(input: &Tensor<T>, d: usize) -> Result<Tensor<T>> {
    let [n, ad, h, w] = input.dims4("to_prior_rows")?;
    if d == 0 || ad % d != 0 {
        return Err(TensorError::InvalidShape {
            op: "to_prior_rows",
            shape: input.shape().to_vec(),
            msg: format!("channel count not a multiple of {d}"),
        });
    }
    let hw = h * w;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        let src = &x[i * ad * hw..(i + 1) * ad * hw];
        let dst = &mut out[i * ad * hw..(i + 1) * ad * hw];
        for ch in 0..ad {
            for cell in 0..hw {
                dst[cell * ad + ch] = src[ch * hw + cell];
            }
        }
    }
    Tensor::new(&[n, hw * ad / d, d], out)
}

/// Gradient of [`to_prior_rows`] back into head layout.
pub fn from_prior_rows<T: Element>(grad: &Tensor<T>, head_shape: &[usize]) -> Result<Tensor<T>> {
    let [n, ad, h, w] = match head_shape {
        &[a, b, c, d] => [a, b, c, d],
        _ => {
            return Err(TensorError::InvalidShape {
                op: "from_prior_rows",
                shape: head_shape.to_vec(),
                msg: "expected 4-d head shape".into(),
            })
        }
    };
    let hw = h * w;
    let g = grad.data();
    let mut out = vec![T::zero(); g.len()];
    for i in 0..n {
        let src = &g[i * ad * hw..(i + 1) * ad * hw];
        let dst = &mut out[i * ad * hw..(i + 1) * ad * hw];
        for ch in 0..ad {
            for cell in 0..hw {
                dst[ch * hw + cell] = src[cell * ad + ch];
            }
        }
    }
    Tensor::new(head_shape, out)
}

/// Concatenates (N, P_i, D) tensors along the prior axis.
pub fn cat_rows<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or(TensorError::InvalidShape {
        op: "cat_rows",
        shape: vec![],
        msg: "no inputs".into(),
    })?;
    let (n, d) = match first.shape() {
        &[n, _, d] => (n, d),
        s => {
            return Err(TensorError::InvalidShape {
                op: "cat_rows",
                shape: s.to_vec(),
                msg: "expected (N, P, D)".into(),
            })
        }
    };
    let mut total = 0;
    for p in parts {
        match p.shape() {
            &[pn, pp, pd] if pn == n && pd == d => total += pp,
            s => {
                return Err(TensorError::ShapeMismatch {
                    op: "cat_rows",
                    lhs: first.shape().to_vec(),
                    rhs: s.to_vec(),
                })
            }
        }
    }
    let mut out = Vec::with_capacity(n * total * d);
    for i in 0..n {
        for p in parts {
            let len = p.shape()[1] * d;
            out.extend_from_slice(&p.data()[i * len..(i + 1) * len]);
        }
    }
    Tensor::new(&[n, total, d], out)
}

/// Splits a (N, ΣP_i, D) gradient into per-part pieces with `rows[i]` priors each.
pub fn split_rows<T: Element>(grad: &Tensor<T>, rows: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, total, d) = match grad.shape() {
        &[n, p, d] => (n, p, d),
        s => {
            return Err(TensorError::InvalidShape {
                op: "split_rows",
                shape: s.to_vec(),
                msg: "expected (N, P, D)".into(),
            })
        }
    };
    if rows.iter().sum::<usize>() != total {
        return Err(TensorError::InvalidShape {
            op: "split_rows",
            shape: grad.shape().to_vec(),
            msg: format!("row counts {rows:?} do not sum to {total}"),
        });
    }
    let g = grad.data();
    let mut parts: Vec<Vec<T>> = rows.iter().map(|r| Vec::with_capacity(n * r * d)).collect();
    for i in 0..n {
        let mut off = i * total * d;
        for (part, &r) in parts.iter_mut().zip(rows) {
            part.extend_from_slice(&g[off..off + r * d]);
            off += r * d;
        }
    }
    parts
        .into_iter()
        .zip(rows)
        .map(|(v, &r)| Tensor::new(&[n, r, d], v))
        .collect()
}
