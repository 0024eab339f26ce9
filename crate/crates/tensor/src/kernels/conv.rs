use crate::error::{invalid, Result};
use crate::gemm::{gemm, Mat};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1, groups: 1 }
    }
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding, ..Self::default() }
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Output extent of a strided, padded, dilated window sweep.
pub fn conv_out_len(n: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = n + 2 * padding;
    (padded >= span && stride > 0).then(|| (padded - span) / stride + 1)
}

/// Range of output indices `o` for which `o * stride + offset` lies in `[0, n_in)`.
#[inline]
fn valid_range(n_out: usize, n_in: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = n_in as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let hi = (hi.max(0) as usize).min(n_out);
    let lo = (lo.max(0) as usize).min(hi);
    (lo, hi)
}

#[derive(Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl Geometry {
    fn offsets(&self, ky: usize, kx: usize) -> (isize, isize) {
        (
            (ky * self.dilation) as isize - self.padding as isize,
            (kx * self.dilation) as isize - self.padding as isize,
        )
    }
}

/// Unfolds `channels` planes of `img` into `cols[(c*kh+ky)*kw+kx][oy*wo+ox]`.
fn im2col(img: &[f64], channels: usize, g: Geometry, cols: &mut [f64]) {
    let p = g.ho * g.wo;
    cols[..channels * g.kh * g.kw * p].iter_mut().for_each(|v| *v = 0.0);
    for c in 0..channels {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (oy_off, ox_off) = g.offsets(ky, kx);
                let (oy_lo, oy_hi) = valid_range(g.ho, g.h, g.stride, oy_off);
                let (ox_lo, ox_hi) = valid_range(g.wo, g.w, g.stride, ox_off);
                if oy_lo >= oy_hi || ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = (oy * g.stride) as isize + oy_off;
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox_lo..ox_hi {
                        let ix = (ox * g.stride) as isize + ox_off;
                        drow[ox] = src[ix as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back onto image planes.
fn col2im(cols: &[f64], channels: usize, g: Geometry, img: &mut [f64]) {
    let p = g.ho * g.wo;
    for c in 0..channels {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (oy_off, ox_off) = g.offsets(ky, kx);
                let (oy_lo, oy_hi) = valid_range(g.ho, g.h, g.stride, oy_off);
                let (ox_lo, ox_hi) = valid_range(g.wo, g.w, g.stride, ox_off);
                if oy_lo >= oy_hi || ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = (oy * g.stride) as isize + oy_off;
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox_lo..ox_hi {
                        let ix = (ox * g.stride) as isize + ox_off;
                        drow[ix as usize] += srow[ox];
                    }
                }
            }
        }
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match t.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => Err(invalid!("{what} must be rank 4, got {s:?}")),
    }
}

struct ConvShapes {
    n: usize,
    cin: usize,
    cout: usize,
    geo: Geometry,
}

fn conv_shapes(x: &Tensor, w: &Tensor, b: Option<&Tensor>, p: ConvParams) -> Result<ConvShapes> {
    let [n, cin, h, wd] = dims4(x, "conv2d input")?;
    let [cout, cin_g, kh, kw] = dims4(w, "conv2d weight")?;
    if p.groups == 0 || p.stride == 0 || p.dilation == 0 {
        return Err(invalid!("conv2d stride, dilation and groups must be positive"));
    }
    if cin % p.groups != 0 || cout % p.groups != 0 {
        return Err(invalid!("channels {cin}->{cout} not divisible by groups {}", p.groups));
    }
    if cin / p.groups != cin_g {
        return Err(invalid!("weight expects {cin_g} input channels per group, input has {}", cin / p.groups));
    }
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(invalid!("bias shape {:?} does not match {cout} output channels", b.shape()));
        }
    }
    let ho = conv_out_len(h, kh, p.stride, p.padding, p.dilation)
        .ok_or_else(|| invalid!("kernel {kh}x{kw} does not fit input {h}x{wd} with padding {}", p.padding))?;
    let wo = conv_out_len(wd, kw, p.stride, p.padding, p.dilation)
        .ok_or_else(|| invalid!("kernel {kh}x{kw} does not fit input {h}x{wd} with padding {}", p.padding))?;
    Ok(ConvShapes {
        n,
        cin,
        cout,
        geo: Geometry { h, w: wd, kh, kw, ho, wo, stride: p.stride, padding: p.padding, dilation: p.dilation },
    })
}

fn is_depthwise(s: &ConvShapes, p: ConvParams) -> bool {
    p.groups > 1 && p.groups == s.cin && s.cout == s.cin
}

fn is_pointwise(s: &ConvShapes, p: ConvParams) -> bool {
    s.geo.kh == 1 && s.geo.kw == 1 && p.stride == 1 && p.padding == 0
}

pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, p: ConvParams) -> Result<Tensor> {
    let s = conv_shapes(x, w, b, p)?;
    let g = s.geo;
    let (hw, pout) = (g.h * g.w, g.ho * g.wo);
    let mut out = vec![0.0; s.n * s.cout * pout];
    let xd = x.data();
    let wd = w.data();

    if is_depthwise(&s, p) {
        let kk = g.kh * g.kw;
        for n in 0..s.n {
            for c in 0..s.cin {
                let plane = &xd[(n * s.cin + c) * hw..(n * s.cin + c + 1) * hw];
                let dst = &mut out[(n * s.cout + c) * pout..(n * s.cout + c + 1) * pout];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wd[c * kk + ky * g.kw + kx];
                        let (oy_off, ox_off) = g.offsets(ky, kx);
                        let (oy_lo, oy_hi) = valid_range(g.ho, g.h, g.stride, oy_off);
                        let (ox_lo, ox_hi) = valid_range(g.wo, g.w, g.stride, ox_off);
                        if oy_lo >= oy_hi || ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = ((oy * g.stride) as isize + oy_off) as usize;
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                            if g.stride == 1 {
                                let base = (ox_lo as isize + ox_off) as usize;
                                let len = ox_hi - ox_lo;
                                for (d, s) in drow[ox_lo..ox_hi].iter_mut().zip(&src[base..base + len]) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ((ox * g.stride) as isize + ox_off) as usize;
                                    drow[ox] += wv * src[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    } else {
        let cin_g = s.cin / p.groups;
        let cout_g = s.cout / p.groups;
        let krows = cin_g * g.kh * g.kw;
        let pointwise = is_pointwise(&s, p);
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; krows * pout] };
        for n in 0..s.n {
            for grp in 0..p.groups {
                let img = &xd[(n * s.cin + grp * cin_g) * hw..(n * s.cin + (grp + 1) * cin_g) * hw];
                let colv: &[f64] = if pointwise {
                    img
                } else {
                    im2col(img, cin_g, g, &mut cols);
                    &cols
                };
                let wg = &wd[grp * cout_g * krows..(grp + 1) * cout_g * krows];
                let dst = &mut out[(n * s.cout + grp * cout_g) * pout..(n * s.cout + (grp + 1) * cout_g) * pout];
                gemm(cout_g, krows, pout, 1.0, Mat::rm(wg, krows), Mat::rm(colv, pout), 0.0, dst);
            }
        }
    }

    if let Some(b) = b {
        for n in 0..s.n {
            for (c, &bv) in b.data().iter().enumerate() {
                out[(n * s.cout + c) * pout..(n * s.cout + c + 1) * pout]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(&[s.n, s.cout, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias, each
/// computed only when requested.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    p: ConvParams,
    dy: &Tensor,
    need: [bool; 3],
) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
    let s = conv_shapes(x, w, None, p)?;
    let g = s.geo;
    let (hw, pout) = (g.h * g.w, g.ho * g.wo);
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();
    let mut dx = need[0].then(|| vec![0.0; x.numel()]);
    let mut dw = need[1].then(|| vec![0.0; w.numel()]);

    if is_depthwise(&s, p) {
        let kk = g.kh * g.kw;
        for n in 0..s.n {
            for c in 0..s.cin {
                let xoff = (n * s.cin + c) * hw;
                let plane = &xd[xoff..xoff + hw];
                let grad = &dyd[(n * s.cout + c) * pout..(n * s.cout + c + 1) * pout];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let widx = c * kk + ky * g.kw + kx;
                        let wv = wd[widx];
                        let (oy_off, ox_off) = g.offsets(ky, kx);
                        let (oy_lo, oy_hi) = valid_range(g.ho, g.h, g.stride, oy_off);
                        let (ox_lo, ox_hi) = valid_range(g.wo, g.w, g.stride, ox_off);
                        if oy_lo >= oy_hi || ox_lo >= ox_hi {
                            continue;
                        }
                        let mut wacc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = ((oy * g.stride) as isize + oy_off) as usize;
                            let grow = &grad[oy * g.wo..(oy + 1) * g.wo];
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * g.stride) as isize + ox_off) as usize;
                                let gv = grow[ox];
                                wacc += gv * plane[iy * g.w + ix];
                                if let Some(dx) = dx.as_mut() {
                                    dx[xoff + iy * g.w + ix] += wv * gv;
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[widx] += wacc;
                        }
                    }
                }
            }
        }
    } else {
        let cin_g = s.cin / p.groups;
        let cout_g = s.cout / p.groups;
        let krows = cin_g * g.kh * g.kw;
        let pointwise = is_pointwise(&s, p);
        let mut cols = vec![0.0; krows * pout];
        let mut dcols = vec![0.0; krows * pout];
        for n in 0..s.n {
            for grp in 0..p.groups {
                let xoff = (n * s.cin + grp * cin_g) * hw;
                let img = &xd[xoff..xoff + cin_g * hw];
                let grad = &dyd[(n * s.cout + grp * cout_g) * pout..(n * s.cout + (grp + 1) * cout_g) * pout];
                let wg = &wd[grp * cout_g * krows..(grp + 1) * cout_g * krows];
                if let Some(dw) = dw.as_mut() {
                    let colv: &[f64] = if pointwise {
                        img
                    } else {
                        im2col(img, cin_g, g, &mut cols);
                        &cols
                    };
                    let dwg = &mut dw[grp * cout_g * krows..(grp + 1) * cout_g * krows];
                    gemm(cout_g, pout, krows, 1.0, Mat::rm(grad, pout), Mat::rm_t(colv, pout), 1.0, dwg);
                }
                if let Some(dx) = dx.as_mut() {
                    let dimg = &mut dx[xoff..xoff + cin_g * hw];
                    if pointwise {
                        gemm(krows, cout_g, pout, 1.0, Mat::rm_t(wg, krows), Mat::rm(grad, pout), 1.0, dimg);
                    } else {
                        gemm(krows, cout_g, pout, 1.0, Mat::rm_t(wg, krows), Mat::rm(grad, pout), 0.0, &mut dcols);
                        col2im(&dcols, cin_g, g, dimg);
                    }
                }
            }
        }
    }

    let db = need[2].then(|| {
        let mut db = vec![0.0; s.cout];
        for n in 0..s.n {
            for (c, acc) in db.iter_mut().enumerate() {
                *acc += dyd[(n * s.cout + c) * pout..(n * s.cout + c + 1) * pout].iter().sum::<f64>();
            }
        }
        db
    });
    Ok((
        dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        dw.map(|d| Tensor::new(w.shape(), d)).transpose()?,
        db.map(|d| Tensor::new(&[s.cout], d)).transpose()?,
    ))
}

struct TransposeShapes {
    n: usize,
    cin: usize,
    cout: usize,
    /// Geometry of the adjoint convolution mapping output space to input space.
    geo: Geometry,
}

fn transpose_shapes(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, padding: usize) -> Result<TransposeShapes> {
    let [n, cin, h, wd] = dims4(x, "conv_transpose2d input")?;
    let [wcin, cout, kh, kw] = dims4(w, "conv_transpose2d weight")?;
    if stride == 0 {
        return Err(invalid!("conv_transpose2d stride must be positive"));
    }
    if wcin != cin {
        return Err(invalid!("conv_transpose2d weight expects {wcin} input channels, got {cin}"));
    }
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(invalid!("bias shape {:?} does not match {cout} output channels", b.shape()));
        }
    }
    let full_h = (h - 1) * stride + kh;
    let full_w = (wd - 1) * stride + kw;
    if full_h <= 2 * padding || full_w <= 2 * padding {
        return Err(invalid!("conv_transpose2d padding {padding} consumes the whole output"));
    }
    let (ho, wo) = (full_h - 2 * padding, full_w - 2 * padding);
    Ok(TransposeShapes {
        n,
        cin,
        cout,
        geo: Geometry { h: ho, w: wo, kh, kw, ho: h, wo: wd, stride, padding, dilation: 1 },
    })
}

/// Transposed convolution, weight laid out as `[Cin, Cout, kh, kw]`.
///
/// It is the exact adjoint of [`conv2d`] using the same weight viewed as a
/// `[Cout', Cin', kh, kw]` convolution from the output space back to the input.
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    let s = transpose_shapes(x, w, b, stride, padding)?;
    let g = s.geo;
    let (pin, pout) = (g.ho * g.wo, g.h * g.w);
    let krows = s.cout * g.kh * g.kw;
    let mut out = vec![0.0; s.n * s.cout * pout];
    let mut cols = vec![0.0; krows * pin];
    for n in 0..s.n {
        let img = &x.data()[n * s.cin * pin..(n + 1) * s.cin * pin];
        gemm(krows, s.cin, pin, 1.0, Mat::rm_t(w.data(), krows), Mat::rm(img, pin), 0.0, &mut cols);
        col2im(&cols, s.cout, g, &mut out[n * s.cout * pout..(n + 1) * s.cout * pout]);
        if let Some(b) = b {
            for (c, &bv) in b.data().iter().enumerate() {
                out[(n * s.cout + c) * pout..(n * s.cout + c + 1) * pout]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(&[s.n, s.cout, g.h, g.w], out)
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    padding: usize,
    dy: &Tensor,
    need: [bool; 3],
) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
    let s = transpose_shapes(x, w, None, stride, padding)?;
    let g = s.geo;
    let (pin, pout) = (g.ho * g.wo, g.h * g.w);
    let krows = s.cout * g.kh * g.kw;
    let mut dx = need[0].then(|| vec![0.0; x.numel()]);
    let mut dw = need[1].then(|| vec![0.0; w.numel()]);
    let mut db = need[2].then(|| vec![0.0; s.cout]);
    let mut dcols = vec![0.0; krows * pin];
    for n in 0..s.n {
        let grad = &dy.data()[n * s.cout * pout..(n + 1) * s.cout * pout];
        im2col(grad, s.cout, g, &mut dcols);
        if let Some(dx) = dx.as_mut() {
            let dimg = &mut dx[n * s.cin * pin..(n + 1) * s.cin * pin];
            gemm(s.cin, krows, pin, 1.0, Mat::rm(w.data(), krows), Mat::rm(&dcols, pin), 0.0, dimg);
        }
        if let Some(dw) = dw.as_mut() {
            let img = &x.data()[n * s.cin * pin..(n + 1) * s.cin * pin];
            gemm(s.cin, pin, krows, 1.0, Mat::rm(img, pin), Mat::rm_t(&dcols, pin), 1.0, dw);
        }
        if let Some(db) = db.as_mut() {
            for (c, acc) in db.iter_mut().enumerate() {
                *acc += grad[c * pout..(c + 1) * pout].iter().sum::<f64>();
            }
        }
    }
    Ok((
        dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        dw.map(|d| Tensor::new(w.shape(), d)).transpose()?,
        db.map(|d| Tensor::new(&[s.cout], d)).transpose()?,
    ))
}
