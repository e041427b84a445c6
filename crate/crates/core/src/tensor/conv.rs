//! Convolution-family kernels on `N, C, H, W` tensors.
//!
//! Plain and deformable convolution share the same column layout and the same
//! GEMM call, so a deformable convolution with zero offsets and unit
//! modulation produces bit-identical output to [`conv2d`].

use serde::{Deserialize, Serialize};

use super::{flops, Backward, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Accept `(H − f + 2P)` not divisible by `S` and floor the quotient.
    /// Off by default: non-integral output extents are rejected.
    pub floor_output: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            in_channels,
            out_channels,
            floor_output: false,
        }
    }

    pub fn with_floor(mut self) -> Self {
        self.floor_output = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ConvSpec {
            kernel_h,
            kernel_w,
            stride,
            in_channels,
            out_channels,
            ..
        } = *self;
        if kernel_h == 0 || kernel_w == 0 || stride == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::InvalidConv(format!("all extents must be positive: {self:?}")));
        }
        Ok(())
    }

    fn extent(&self, input: usize, kernel: usize, axis: &str) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < kernel {
            return Err(Error::InvalidConv(format!(
                "kernel {kernel} does not fit padded {axis} extent {padded}"
            )));
        }
        let span = padded - kernel;
        if span % self.stride != 0 && !self.floor_output {
            return Err(Error::InvalidConv(format!(
                "non-integral output {axis}: ({input} - {kernel} + 2*{}) / {} + 1",
                self.padding, self.stride
            )));
        }
        Ok(span / self.stride + 1)
    }

    /// `(H_out, W_out) = ((H − f_h + 2P)/S + 1, (W − f_w + 2P)/S + 1)`.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        Ok((
            self.extent(h, self.kernel_h, "height")?,
            self.extent(w, self.kernel_w, "width")?,
        ))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn taps(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    /// Floating-point operations for one image at the given output extent.
    pub fn flops(&self, h_out: usize, w_out: usize) -> u64 {
        2 * (self.taps() * self.in_channels * self.out_channels * h_out * w_out) as u64
    }
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.spec.taps()
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn check_conv(input: &Tensor, weight: &Tensor, spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::shape("conv2d input (expected N,C,H,W)", s, &spec.weight_shape()));
    }
    if s[1] != spec.in_channels {
        return Err(Error::shape("conv2d input channels", s, &spec.weight_shape()));
    }
    if weight.shape() != spec.weight_shape() {
        return Err(Error::shape("conv2d weight", weight.shape(), &spec.weight_shape()));
    }
    let (ho, wo) = spec.output_extent(s[2], s[3])?;
    Ok(Geometry {
        n: s[0],
        c: s[1],
        h: s[2],
        w: s[3],
        ho,
        wo,
        spec: *spec,
    })
}

/// `C[m×n] = A[m×k]·B[k×n]` (+ `C` when `accumulate`), all row-major unless
/// `a_t`/`b_t` say the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], accumulate: bool) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover m·k, k·n and m·n elements with the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let ConvSpec {
        kernel_h: kh,
        kernel_w: kw,
        stride,
        padding,
        ..
    } = g.spec;
    let l = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut cols[((c * kh + i) * kw + j) * l..][..l];
                for oy in 0..g.ho {
                    let y = (oy * stride + i) as isize - padding as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if y < 0 || y >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let xx = (ox * stride + j) as isize - padding as isize;
                        *d = if xx < 0 || xx >= g.w as isize { 0.0 } else { src[xx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geometry, dx: &mut [f64]) {
    let ConvSpec {
        kernel_h: kh,
        kernel_w: kw,
        stride,
        padding,
        ..
    } = g.spec;
    let l = g.cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &cols[((c * kh + i) * kw + j) * l..][..l];
                for oy in 0..g.ho {
                    let y = (oy * stride + i) as isize - padding as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let xx = (ox * stride + j) as isize - padding as isize;
                        if xx >= 0 && xx < g.w as isize {
                            plane[y as usize * g.w + xx as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(out: &mut [f64], bias: Option<&Tensor>, l: usize) {
    if let Some(b) = bias {
        for (o, &bv) in b.data().iter().enumerate() {
            out[o * l..(o + 1) * l].iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn bias_grad(grad: &[f64], g: &Geometry) -> Vec<f64> {
    let (co, l) = (g.spec.out_channels, g.cols());
    let mut gb = vec![0.0; co];
    for n in 0..g.n {
        for (o, gbo) in gb.iter_mut().enumerate() {
            *gbo += grad[(n * co + o) * l..][..l].iter().sum::<f64>();
        }
    }
    gb
}

fn check_bias(bias: Option<&Tensor>, spec: &ConvSpec) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(Error::shape("conv bias", b.shape(), &[spec.out_channels]));
        }
    }
    Ok(())
}

struct Conv2d {
    input: Tensor,
    weight: Tensor,
    bias: Option<Tensor>,
    spec: ConvSpec,
}

impl Backward for Conv2d {
    fn inputs(&self) -> Vec<Tensor> {
        let mut v = vec![self.input.clone(), self.weight.clone()];
        v.extend(self.bias.clone());
        v
    }

    fn grads(&self, _out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let g = check_conv(&self.input, &self.weight, &self.spec).expect("validated in forward");
        let (k, l, co) = (g.rows(), g.cols(), self.spec.out_channels);
        let x = self.input.data();
        let w = self.weight.data();
        let mut gx = needs[0].then(|| vec![0.0; x.len()]);
        let mut gw = needs[1].then(|| vec![0.0; w.len()]);
        let mut cols = vec![0.0; k * l];
        let mut dcols = vec![0.0; k * l];
        let in_plane = g.c * g.h * g.w;
        for n in 0..g.n {
            let gn = &grad[n * co * l..(n + 1) * co * l];
            if let Some(gw) = gw.as_mut() {
                im2col(&x[n * in_plane..(n + 1) * in_plane], &g, &mut cols);
                // dW[co×k] += g[co×l]·colsᵀ[l×k]
                gemm(co, l, k, gn, false, &cols, true, gw, true);
            }
            if let Some(gx) = gx.as_mut() {
                // dcols[k×l] = Wᵀ[k×co]·g[co×l]
                gemm(k, co, l, w, true, gn, false, &mut dcols, false);
                col2im(&dcols, &g, &mut gx[n * in_plane..(n + 1) * in_plane]);
            }
        }
        let mut out = vec![gx, gw];
        if self.bias.is_some() {
            out.push(needs[2].then(|| bias_grad(grad, &g)));
        }
        out
    }
}

/// 2-D cross-correlation with optional per-output-channel bias.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let g = check_conv(input, weight, spec)?;
    check_bias(bias, spec)?;
    let (k, l, co) = (g.rows(), g.cols(), spec.out_channels);
    let x = input.data();
    let in_plane = g.c * g.h * g.w;
    let mut out = vec![0.0; g.n * co * l];
    let mut cols = vec![0.0; k * l];
    for n in 0..g.n {
        im2col(&x[n * in_plane..(n + 1) * in_plane], &g, &mut cols);
        let dst = &mut out[n * co * l..(n + 1) * co * l];
        gemm(co, k, l, weight.data(), false, &cols, false, dst, false);
        add_bias(dst, bias, l);
    }
    flops::add(g.n as u64 * spec.flops(g.ho, g.wo));
    Ok(Tensor::from_op(
        vec![g.n, co, g.ho, g.wo],
        out,
        Conv2d {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.cloned(),
            spec: *spec,
        },
    ))
}

// ---------------------------------------------------------------------------
// Deformable convolution (modulated)

/// Bilinear read of one channel plane with zeros outside. Returns the value
/// and its partials with respect to the sampling coordinates.
#[inline]
fn bilinear(plane: &[f64], h: usize, w: usize, py: f64, px: f64) -> (f64, f64, f64) {
    if py <= -1.0 || py >= h as f64 || px <= -1.0 || px >= w as f64 {
        return (0.0, 0.0, 0.0);
    }
    let y0 = py.floor();
    let x0 = px.floor();
    let ly = py - y0;
    let lx = px - x0;
    let hy = 1.0 - ly;
    let hx = 1.0 - lx;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            plane[y as usize * w + x as usize]
        }
    };
    let v00 = at(y0, x0);
    let v01 = at(y0, x0 + 1);
    let v10 = at(y0 + 1, x0);
    let v11 = at(y0 + 1, x0 + 1);
    let v = hy * hx * v00 + hy * lx * v01 + ly * hx * v10 + ly * lx * v11;
    let dy = hx * (v10 - v00) + lx * (v11 - v01);
    let dx = hy * (v01 - v00) + ly * (v11 - v10);
    (v, dy, dx)
}

/// Scatter `g` onto the four bilinear corners of `(py, px)`.
#[inline]
fn bilinear_scatter(plane: &mut [f64], h: usize, w: usize, py: f64, px: f64, g: f64) {
    if py <= -1.0 || py >= h as f64 || px <= -1.0 || px >= w as f64 {
        return;
    }
    let y0 = py.floor();
    let x0 = px.floor();
    let ly = py - y0;
    let lx = px - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    for (dy, wy) in [(0, 1.0 - ly), (1, ly)] {
        for (dx, wx) in [(0, 1.0 - lx), (1, lx)] {
            let (y, x) = (y0 + dy, x0 + dx);
            if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                plane[y as usize * w + x as usize] += g * wy * wx;
            }
        }
    }
}

fn deform_cols(x: &[f64], offsets: &[f64], mask: Option<&[f64]>, g: &Geometry, cols: &mut [f64]) {
    let ConvSpec {
        kernel_h: kh,
        kernel_w: kw,
        stride,
        padding,
        ..
    } = g.spec;
    let (l, taps) = (g.cols(), g.spec.taps());
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..kh {
            for j in 0..kw {
                let k = i * kw + j;
                let row = &mut cols[(c * taps + k) * l..][..l];
                let off_y = &offsets[2 * k * l..(2 * k + 1) * l];
                let off_x = &offsets[(2 * k + 1) * l..(2 * k + 2) * l];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let p = oy * g.wo + ox;
                        let py = (oy * stride + i) as f64 - padding as f64 + off_y[p];
                        let px = (ox * stride + j) as f64 - padding as f64 + off_x[p];
                        let (v, _, _) = bilinear(plane, g.h, g.w, py, px);
                        row[p] = match mask {
                            Some(m) => v * m[k * l + p],
                            None => v,
                        };
                    }
                }
            }
        }
    }
}

struct DeformConv2d {
    input: Tensor,
    offsets: Tensor,
    mask: Option<Tensor>,
    weight: Tensor,
    bias: Option<Tensor>,
    spec: ConvSpec,
}

impl Backward for DeformConv2d {
    fn inputs(&self) -> Vec<Tensor> {
        let mut v = vec![self.input.clone(), self.offsets.clone(), self.weight.clone()];
        v.extend(self.mask.clone());
        v.extend(self.bias.clone());
        v
    }

    fn grads(&self, _out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let g = check_conv(&self.input, &self.weight, &self.spec).expect("validated in forward");
        let (k, l, co, taps) = (g.rows(), g.cols(), self.spec.out_channels, self.spec.taps());
        let ConvSpec {
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            ..
        } = self.spec;
        let x = self.input.data();
        let off = self.offsets.data();
        let w = self.weight.data();
        let mask = self.mask.as_ref().map(Tensor::data);
        let need_mask = self.mask.is_some() && needs[3];
        let mut gx = needs[0].then(|| vec![0.0; x.len()]);
        let mut goff = needs[1].then(|| vec![0.0; off.len()]);
        let mut gw = needs[2].then(|| vec![0.0; w.len()]);
        let mut gmask = need_mask.then(|| vec![0.0; taps * l * g.n]);
        let in_plane = g.c * g.h * g.w;
        let mut cols = vec![0.0; k * l];
        let mut dcols = vec![0.0; k * l];
        for n in 0..g.n {
            let xn = &x[n * in_plane..(n + 1) * in_plane];
            let offn = &off[n * 2 * taps * l..(n + 1) * 2 * taps * l];
            let maskn = mask.map(|m| &m[n * taps * l..(n + 1) * taps * l]);
            let gn = &grad[n * co * l..(n + 1) * co * l];
            if let Some(gw) = gw.as_mut() {
                deform_cols(xn, offn, maskn, &g, &mut cols);
                gemm(co, l, k, gn, false, &cols, true, gw, true);
            }
            if gx.is_none() && goff.is_none() && gmask.is_none() {
                continue;
            }
            gemm(k, co, l, w, true, gn, false, &mut dcols, false);
            for c in 0..g.c {
                let plane = &xn[c * g.h * g.w..(c + 1) * g.h * g.w];
                for i in 0..kh {
                    for j in 0..kw {
                        let t = i * kw + j;
                        let row = &dcols[(c * taps + t) * l..][..l];
                        for oy in 0..g.ho {
                            for ox in 0..g.wo {
                                let p = oy * g.wo + ox;
                                let dc = row[p];
                                if dc == 0.0 {
                                    continue;
                                }
                                let py = (oy * stride + i) as f64 - padding as f64 + offn[2 * t * l + p];
                                let px = (ox * stride + j) as f64 - padding as f64 + offn[(2 * t + 1) * l + p];
                                let m = maskn.map_or(1.0, |mk| mk[t * l + p]);
                                if let Some(gx) = gx.as_mut() {
                                    let dst = &mut gx[n * in_plane + c * g.h * g.w..][..g.h * g.w];
                                    bilinear_scatter(dst, g.h, g.w, py, px, dc * m);
                                }
                                if goff.is_some() || gmask.is_some() {
                                    let (v, dvy, dvx) = bilinear(plane, g.h, g.w, py, px);
                                    if let Some(goff) = goff.as_mut() {
                                        let base = n * 2 * taps * l;
                                        goff[base + 2 * t * l + p] += dc * m * dvy;
                                        goff[base + (2 * t + 1) * l + p] += dc * m * dvx;
                                    }
                                    if let Some(gm) = gmask.as_mut() {
                                        gm[n * taps * l + t * l + p] += dc * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![gx, goff, gw];
        if self.mask.is_some() {
            out.push(gmask);
        }
        if self.bias.is_some() {
            out.push(needs[needs.len() - 1].then(|| bias_grad(grad, &g)));
        }
        out
    }
}

/// Modulated deformable convolution.
///
/// `offsets` is `N, 2·k_h·k_w, H_out, W_out` holding `(Δy, Δx)` pairs per tap
/// in row-major tap order; `mask` (optional, `N, k_h·k_w, H_out, W_out`)
/// scales each sampled value. Samples are read by bilinear interpolation with
/// zeros outside the input.
pub fn deform_conv2d(
    input: &Tensor,
    offsets: &Tensor,
    mask: Option<&Tensor>,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let g = check_conv(input, weight, spec)?;
    check_bias(bias, spec)?;
    let taps = spec.taps();
    let want_off = [g.n, 2 * taps, g.ho, g.wo];
    if offsets.shape() != want_off {
        return Err(Error::shape("deform_conv2d offsets", offsets.shape(), &want_off));
    }
    let want_mask = [g.n, taps, g.ho, g.wo];
    if let Some(m) = mask {
        if m.shape() != want_mask {
            return Err(Error::shape("deform_conv2d mask", m.shape(), &want_mask));
        }
    }
    let (k, l, co) = (g.rows(), g.cols(), spec.out_channels);
    let x = input.data();
    let in_plane = g.c * g.h * g.w;
    let mut out = vec![0.0; g.n * co * l];
    let mut cols = vec![0.0; k * l];
    for n in 0..g.n {
        let offn = &offsets.data()[n * 2 * taps * l..(n + 1) * 2 * taps * l];
        let maskn = mask.map(|m| &m.data()[n * taps * l..(n + 1) * taps * l]);
        deform_cols(&x[n * in_plane..(n + 1) * in_plane], offn, maskn, &g, &mut cols);
        let dst = &mut out[n * co * l..(n + 1) * co * l];
        gemm(co, k, l, weight.data(), false, &cols, false, dst, false);
        add_bias(dst, bias, l);
    }
    flops::add(g.n as u64 * spec.flops(g.ho, g.wo));
    Ok(Tensor::from_op(
        vec![g.n, co, g.ho, g.wo],
        out,
        DeformConv2d {
            input: input.clone(),
            offsets: offsets.clone(),
            mask: mask.cloned(),
            weight: weight.clone(),
            bias: bias.cloned(),
            spec: *spec,
        },
    ))
}

// ---------------------------------------------------------------------------
// Pooling and resampling

struct MaxPool {
    input: Tensor,
    argmax: Vec<usize>,
}

impl Backward for MaxPool {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.input.clone()]
    }
    fn grads(&self, _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut g = vec![0.0; self.input.numel()];
        for (&src, &go) in self.argmax.iter().zip(grad) {
            g[src] += go;
        }
        vec![Some(g)]
    }
}

fn nchw(input: &Tensor, name: &str) -> Result<(usize, usize, usize, usize)> {
    match *input.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::InvalidArgument(format!("{name} expects N,C,H,W, got {s:?}"))),
    }
}

/// Max pooling with implicit −∞ padding. Ties go to the first element in
/// row-major window order.
pub fn max_pool2d(input: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, c, h, w) = nchw(input, "max_pool2d")?;
    if kernel == 0 || stride == 0 || padding > kernel / 2 {
        return Err(Error::InvalidArgument(format!(
            "max_pool2d: kernel {kernel}, stride {stride}, padding {padding}"
        )));
    }
    let spec = ConvSpec::new(c, c, kernel, stride, padding);
    let (ho, wo) = spec.output_extent(h, w)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut at = usize::MAX;
                for i in 0..kernel {
                    let y = (oy * stride + i) as isize - padding as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for j in 0..kernel {
                        let xx = (ox * stride + j) as isize - padding as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let idx = base + y as usize * w + xx as usize;
                        if at == usize::MAX || x[idx] > best {
                            best = x[idx];
                            at = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(at);
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, c, ho, wo],
        out,
        MaxPool {
            input: input.clone(),
            argmax,
        },
    ))
}

struct Nearest {
    input: Tensor,
    factor: usize,
}

impl Backward for Nearest {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.input.clone()]
    }
    fn grads(&self, _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (_, _, h, w) = nchw(&self.input, "").expect("shape checked");
        let f = self.factor;
        let (ho, wo) = (h * f, w * f);
        let mut g = vec![0.0; self.input.numel()];
        for (plane, gp) in g.chunks_mut(h * w).enumerate() {
            let src = &grad[plane * ho * wo..(plane + 1) * ho * wo];
            for y in 0..ho {
                for x in 0..wo {
                    gp[(y / f) * w + x / f] += src[y * wo + x];
                }
            }
        }
        vec![Some(g)]
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = nchw(input, "upsample_nearest")?;
    if factor == 0 {
        return Err(Error::InvalidArgument("upsample factor must be positive".into()));
    }
    let (ho, wo) = (h * factor, w * factor);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let p = &x[plane * h * w..(plane + 1) * h * w];
        for y in 0..ho {
            let row = &p[(y / factor) * w..(y / factor + 1) * w];
            for xx in 0..wo {
                out.push(row[xx / factor]);
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, c, ho, wo],
        out,
        Nearest {
            input: input.clone(),
            factor,
        },
    ))
}

/// Source index pair and weight of the upper neighbour for half-pixel-centre
/// bilinear resampling.
fn bilinear_axis(out: usize, input: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

struct Bilinear {
    input: Tensor,
    ys: Vec<(usize, usize, f64)>,
    xs: Vec<(usize, usize, f64)>,
}

impl Backward for Bilinear {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.input.clone()]
    }
    fn grads(&self, _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (_, _, h, w) = nchw(&self.input, "").expect("shape checked");
        let (ho, wo) = (self.ys.len(), self.xs.len());
        let mut g = vec![0.0; self.input.numel()];
        for (plane, gp) in g.chunks_mut(h * w).enumerate() {
            let src = &grad[plane * ho * wo..(plane + 1) * ho * wo];
            for (y, &(y0, y1, ly)) in self.ys.iter().enumerate() {
                for (x, &(x0, x1, lx)) in self.xs.iter().enumerate() {
                    let go = src[y * wo + x];
                    gp[y0 * w + x0] += go * (1.0 - ly) * (1.0 - lx);
                    gp[y0 * w + x1] += go * (1.0 - ly) * lx;
                    gp[y1 * w + x0] += go * ly * (1.0 - lx);
                    gp[y1 * w + x1] += go * ly * lx;
                }
            }
        }
        vec![Some(g)]
    }
}

/// Bilinear resize with half-pixel centres (no corner alignment).
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = nchw(input, "resize_bilinear")?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument("resize_bilinear: empty extent".into()));
    }
    let ys = bilinear_axis(out_h, h);
    let xs = bilinear_axis(out_w, w);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let p = &x[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, ly) in &ys {
            for &(x0, x1, lx) in &xs {
                let top = p[y0 * w + x0] * (1.0 - lx) + p[y0 * w + x1] * lx;
                let bot = p[y1 * w + x0] * (1.0 - lx) + p[y1 * w + x1] * lx;
                out.push(top * (1.0 - ly) + bot * ly);
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, c, out_h, out_w],
        out,
        Bilinear {
            input: input.clone(),
            ys,
            xs,
        },
    ))
}
