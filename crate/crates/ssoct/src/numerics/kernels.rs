//! Forward and backward kernels for the operator set.
//!
//! Every kernel is a plain function over `Tensor`s with no hidden state;
//! the tape records which kernel produced which node and replays the
//! backward counterparts in reverse order. All loops are written so the
//! innermost index runs over the contiguous (last) axis.

use crate::error::{Error, Result};

use super::tensor::Tensor;

pub(crate) fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[a, b] => Ok((a, b)),
        s => Err(Error::shape(op, format!("expected rank-2 tensor, got {:?}", s))),
    }
}

pub(crate) fn dims3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[a, b, c] => Ok((a, b, c)),
        s => Err(Error::shape(op, format!("expected rank-3 tensor, got {:?}", s))),
    }
}

pub(crate) fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        &[a, b, c, d] => Ok((a, b, c, d)),
        s => Err(Error::shape(op, format!("expected rank-4 tensor, got {:?}", s))),
    }
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation with zero padding
// ---------------------------------------------------------------------------

fn conv_out_dims(op: &'static str, h: usize, w: usize, k: usize, pad: usize) -> Result<(usize, usize)> {
    if k % 2 == 0 {
        return Err(Error::arg(op, format!("kernel size must be odd, got {}", k)));
    }
    let oh = (h + 2 * pad + 1).checked_sub(k).unwrap_or(0);
    let ow = (w + 2 * pad + 1).checked_sub(k).unwrap_or(0);
    if oh == 0 || ow == 0 {
        return Err(Error::shape(
            op,
            format!("input {}x{} too small for kernel {} with padding {}", h, w, k, pad),
        ));
    }
    Ok((oh, ow))
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: &Tensor, pad: usize) -> Result<Tensor> {
    let (bsz, cin, h, wd) = dims4("conv2d", x)?;
    let (cout, wcin, kh, kw) = dims4("conv2d", w)?;
    if kh != kw {
        return Err(Error::shape("conv2d", format!("kernel must be square, got {}x{}", kh, kw)));
    }
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, weights expect {}", cin, wcin),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?} does not match {} output channels", bias.shape(), cout),
        ));
    }
    let k = kh;
    let (oh, ow) = conv_out_dims("conv2d", h, wd, k, pad)?;

    let xd = x.data();
    let wdt = w.data();
    let bd = bias.data();
    let mut out = vec![0.0; bsz * cout * oh * ow];

    for bi in 0..bsz {
        for co in 0..cout {
            let out_plane = &mut out[(bi * cout + co) * oh * ow..][..oh * ow];
            out_plane.fill(bd[co]);
            for ci in 0..cin {
                let x_plane = &xd[(bi * cin + ci) * h * wd..][..h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wdt[((co * cin + ci) * k + ky) * k + kx];
                        accumulate_shifted(out_plane, x_plane, wv, oh, ow, h, wd, ky, kx, pad);
                    }
                }
            }
        }
    }
    Tensor::new(vec![bsz, cout, oh, ow], out)
}

/// out[oy][ox] += wv * x[oy + ky - pad][ox + kx - pad] over the valid range.
#[inline]
#[allow(clippy::too_many_arguments)]
fn accumulate_shifted(
    out: &mut [f64],
    x: &[f64],
    wv: f64,
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    pad: usize,
) {
    let ox_lo = pad.saturating_sub(kx);
    let ox_hi = (w + pad).saturating_sub(kx).min(ow);
    if ox_lo >= ox_hi {
        return;
    }
    for oy in 0..oh {
        let iy = oy + ky;
        if iy < pad || iy >= h + pad {
            continue;
        }
        let iy = iy - pad;
        let xrow = &x[iy * w..iy * w + w];
        let orow = &mut out[oy * ow..oy * ow + ow];
        let shift = kx.wrapping_sub(pad); // valid on ox_lo..ox_hi by construction
        for ox in ox_lo..ox_hi {
            orow[ox] += wv * xrow[ox.wrapping_add(shift)];
        }
    }
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    pad: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (bsz, cin, h, wd) = dims4("conv2d", x)?;
    let (cout, _, k, _) = dims4("conv2d", w)?;
    let (_, _, oh, ow) = dims4("conv2d", dy)?;

    let xd = x.data();
    let wdt = w.data();
    let dyd = dy.data();

    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; wdt.len()];
    let mut db = vec![0.0; cout];

    for bi in 0..bsz {
        for co in 0..cout {
            let dy_plane = &dyd[(bi * cout + co) * oh * ow..][..oh * ow];
            db[co] += dy_plane.iter().sum::<f64>();
            for ci in 0..cin {
                let x_plane = &xd[(bi * cin + ci) * h * wd..][..h * wd];
                let dx_plane = &mut dx[(bi * cin + ci) * h * wd..][..h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((co * cin + ci) * k + ky) * k + kx;
                        let wv = wdt[widx];
                        let mut dw_acc = 0.0;
                        let ox_lo = pad.saturating_sub(kx);
                        let ox_hi = (wd + pad).saturating_sub(kx).min(ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let shift = kx.wrapping_sub(pad);
                        for oy in 0..oh {
                            let iy = oy + ky;
                            if iy < pad || iy >= h + pad {
                                continue;
                            }
                            let iy = iy - pad;
                            let xrow = &x_plane[iy * wd..iy * wd + wd];
                            let dxrow = &mut dx_plane[iy * wd..iy * wd + wd];
                            let dyrow = &dy_plane[oy * ow..oy * ow + ow];
                            for ox in ox_lo..ox_hi {
                                let ix = ox.wrapping_add(shift);
                                dw_acc += dyrow[ox] * xrow[ix];
                                dxrow[ix] += wv * dyrow[ox];
                            }
                        }
                        dw[widx] += dw_acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![cout], db)?,
    ))
}

// ---------------------------------------------------------------------------
// depthwise conv2d: one k x k kernel per channel
// ---------------------------------------------------------------------------

pub fn depthwise_conv2d_forward(x: &Tensor, w: &Tensor, pad: usize) -> Result<Tensor> {
    let (bsz, c, h, wd) = dims4("depthwise_conv2d", x)?;
    let (wc, kh, kw) = dims3("depthwise_conv2d", w)?;
    if kh != kw {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("kernel must be square, got {}x{}", kh, kw),
        ));
    }
    if wc != c {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("input has {} channels, weights have {}", c, wc),
        ));
    }
    let k = kh;
    let (oh, ow) = conv_out_dims("depthwise_conv2d", h, wd, k, pad)?;

    let xd = x.data();
    let wdt = w.data();
    let mut out = vec![0.0; bsz * c * oh * ow];
    for bi in 0..bsz {
        for ci in 0..c {
            let out_plane = &mut out[(bi * c + ci) * oh * ow..][..oh * ow];
            let x_plane = &xd[(bi * c + ci) * h * wd..][..h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wdt[(ci * k + ky) * k + kx];
                    accumulate_shifted(out_plane, x_plane, wv, oh, ow, h, wd, ky, kx, pad);
                }
            }
        }
    }
    Tensor::new(vec![bsz, c, oh, ow], out)
}

pub fn depthwise_conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let (bsz, c, h, wd) = dims4("depthwise_conv2d", x)?;
    let (_, k, _) = dims3("depthwise_conv2d", w)?;
    let (_, _, oh, ow) = dims4("depthwise_conv2d", dy)?;

    let xd = x.data();
    let wdt = w.data();
    let dyd = dy.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; wdt.len()];

    for bi in 0..bsz {
        for ci in 0..c {
            let dy_plane = &dyd[(bi * c + ci) * oh * ow..][..oh * ow];
            let x_plane = &xd[(bi * c + ci) * h * wd..][..h * wd];
            let dx_plane = &mut dx[(bi * c + ci) * h * wd..][..h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = (ci * k + ky) * k + kx;
                    let wv = wdt[widx];
                    let mut dw_acc = 0.0;
                    let ox_lo = pad.saturating_sub(kx);
                    let ox_hi = (wd + pad).saturating_sub(kx).min(ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let shift = kx.wrapping_sub(pad);
                    for oy in 0..oh {
                        let iy = oy + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let iy = iy - pad;
                        let xrow = &x_plane[iy * wd..iy * wd + wd];
                        let dxrow = &mut dx_plane[iy * wd..iy * wd + wd];
                        let dyrow = &dy_plane[oy * ow..oy * ow + ow];
                        for ox in ox_lo..ox_hi {
                            let ix = ox.wrapping_add(shift);
                            dw_acc += dyrow[ox] * xrow[ix];
                            dxrow[ix] += wv * dyrow[ox];
                        }
                    }
                    dw[widx] += dw_acc;
                }
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), dx)?, Tensor::new(w.shape().to_vec(), dw)?))
}

// ---------------------------------------------------------------------------
// dense: affine map on the last axis of a B x n batch
// ---------------------------------------------------------------------------

pub fn dense_forward(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (bsz, n) = dims2("dense", x)?;
    let (m, wn) = dims2("dense", w)?;
    if wn != n {
        return Err(Error::shape(
            "dense",
            format!("input width {} does not match weight width {}", n, wn),
        ));
    }
    if bias.shape() != [m] {
        return Err(Error::shape(
            "dense",
            format!("bias shape {:?} does not match {} outputs", bias.shape(), m),
        ));
    }
    let xd = x.data();
    let wd = w.data();
    let bd = bias.data();
    let mut out = vec![0.0; bsz * m];
    for bi in 0..bsz {
        let xrow = &xd[bi * n..bi * n + n];
        let orow = &mut out[bi * m..bi * m + m];
        for (j, o) in orow.iter_mut().enumerate() {
            let wrow = &wd[j * n..j * n + n];
            let mut acc = bd[j];
            for i in 0..n {
                acc += xrow[i] * wrow[i];
            }
            *o = acc;
        }
    }
    Tensor::new(vec![bsz, m], out)
}

pub fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (bsz, n) = dims2("dense", x)?;
    let (m, _) = dims2("dense", w)?;
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();
    let mut dx = vec![0.0; bsz * n];
    let mut dw = vec![0.0; m * n];
    let mut db = vec![0.0; m];
    for bi in 0..bsz {
        let xrow = &xd[bi * n..bi * n + n];
        let dxrow = &mut dx[bi * n..bi * n + n];
        let dyrow = &dyd[bi * m..bi * m + m];
        for j in 0..m {
            let g = dyrow[j];
            if g == 0.0 {
                continue;
            }
            db[j] += g;
            let wrow = &wd[j * n..j * n + n];
            let dwrow = &mut dw[j * n..j * n + n];
            for i in 0..n {
                dxrow[i] += g * wrow[i];
                dwrow[i] += g * xrow[i];
            }
        }
    }
    Ok((
        Tensor::new(vec![bsz, n], dx)?,
        Tensor::new(vec![m, n], dw)?,
        Tensor::new(vec![m], db)?,
    ))
}

// ---------------------------------------------------------------------------
// activations and reductions
// ---------------------------------------------------------------------------

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Subgradient at exactly 0 is 0.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Uses the saved output `y`: d/dx sigmoid = y (1 - y).
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let data = y.data().iter().zip(dy.data()).map(|(&v, &g)| g * v * (1.0 - v)).collect();
    Tensor::new(y.shape().to_vec(), data).expect("shape preserved")
}

pub fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let (bsz, c, h, w) = dims4("global_average_pool", x)?;
    let plane = h * w;
    let xd = x.data();
    let mut out = vec![0.0; bsz * c];
    for (i, o) in out.iter_mut().enumerate() {
        *o = xd[i * plane..(i + 1) * plane].iter().sum::<f64>() / plane as f64;
    }
    Tensor::new(vec![bsz, c], out)
}

pub fn global_avg_pool_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let (bsz, c, h, w) = dims4("global_average_pool", x)?;
    let plane = h * w;
    let dyd = dy.data();
    let mut dx = vec![0.0; bsz * c * plane];
    for i in 0..bsz * c {
        let g = dyd[i] / plane as f64;
        dx[i * plane..(i + 1) * plane].iter_mut().for_each(|v| *v = g);
    }
    Tensor::new(x.shape().to_vec(), dx)
}

/// Element-wise sum over everything, producing a scalar.
pub fn sum_forward(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data().iter().sum())
}

// ---------------------------------------------------------------------------
// broadcasting helpers: a full B x C x H x W operand against a B x C one
// ---------------------------------------------------------------------------

/// Validates that `s` is the `[B, C]` companion of rank-4 `x`.
pub fn check_channel_companion(op: &'static str, x: &Tensor, s: &Tensor) -> Result<(usize, usize, usize)> {
    let (bsz, c, h, w) = dims4(op, x)?;
    let (sb, sc) = dims2(op, s)?;
    if sb != bsz || sc != c {
        return Err(Error::shape(
            op,
            format!("cannot broadcast {:?} over {:?}", s.shape(), x.shape()),
        ));
    }
    Ok((bsz * c, h, w))
}

pub fn mul_channels_forward(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (planes, h, w) = check_channel_companion("elementwise_mul", x, s)?;
    let plane = h * w;
    let xd = x.data();
    let sd = s.data();
    let mut out = vec![0.0; xd.len()];
    for p in 0..planes {
        let sv = sd[p];
        for i in 0..plane {
            out[p * plane + i] = xd[p * plane + i] * sv;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn mul_channels_backward(x: &Tensor, s: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    let (planes, h, w) = check_channel_companion("elementwise_mul", x, s)?;
    let plane = h * w;
    let xd = x.data();
    let sd = s.data();
    let dyd = dy.data();
    let mut dx = vec![0.0; xd.len()];
    let mut ds = vec![0.0; sd.len()];
    for p in 0..planes {
        let sv = sd[p];
        let mut acc = 0.0;
        for i in 0..plane {
            let g = dyd[p * plane + i];
            dx[p * plane + i] = g * sv;
            acc += g * xd[p * plane + i];
        }
        ds[p] = acc;
    }
    Ok((Tensor::new(x.shape().to_vec(), dx)?, Tensor::new(s.shape().to_vec(), ds)?))
}

pub fn add_channels_forward(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (planes, h, w) = check_channel_companion("elementwise_add", x, s)?;
    let plane = h * w;
    let xd = x.data();
    let sd = s.data();
    let mut out = vec![0.0; xd.len()];
    for p in 0..planes {
        let sv = sd[p];
        for i in 0..plane {
            out[p * plane + i] = xd[p * plane + i] + sv;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn add_channels_backward(x: &Tensor, s: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    let (planes, h, w) = check_channel_companion("elementwise_add", x, s)?;
    let plane = h * w;
    let dyd = dy.data();
    let mut ds = vec![0.0; s.len()];
    for p in 0..planes {
        ds[p] = dyd[p * plane..(p + 1) * plane].iter().sum();
    }
    Ok((Tensor::new(x.shape().to_vec(), dyd.to_vec())?, Tensor::new(s.shape().to_vec(), ds)?))
}

// ---------------------------------------------------------------------------
// L1 loss
// ---------------------------------------------------------------------------

pub fn l1_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "l1_loss",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let n = a.len() as f64;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs()).sum();
    Ok(Tensor::scalar(sum / n))
}

/// Subgradient of |t| at t = 0 is 0.
pub fn l1_backward(a: &Tensor, b: &Tensor, dy: f64) -> (Tensor, Tensor) {
    let n = a.len() as f64;
    let g = dy / n;
    let da: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x - y;
            if d > 0.0 {
                g
            } else if d < 0.0 {
                -g
            } else {
                0.0
            }
        })
        .collect();
    let db: Vec<f64> = da.iter().map(|&v| -v).collect();
    (
        Tensor::new(a.shape().to_vec(), da).expect("shape preserved"),
        Tensor::new(b.shape().to_vec(), db).expect("shape preserved"),
    )
}

// ---------------------------------------------------------------------------
// crop: keep the top-left h x w window of each plane
// ---------------------------------------------------------------------------

pub fn crop2d_forward(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (bsz, c, h, w) = dims4("crop2d", x)?;
    if out_h > h || out_w > w || out_h == 0 || out_w == 0 {
        return Err(Error::shape(
            "crop2d",
            format!("cannot crop {}x{} out of {}x{}", out_h, out_w, h, w),
        ));
    }
    let xd = x.data();
    let mut out = vec![0.0; bsz * c * out_h * out_w];
    for p in 0..bsz * c {
        for y in 0..out_h {
            let src = &xd[p * h * w + y * w..][..out_w];
            out[p * out_h * out_w + y * out_w..][..out_w].copy_from_slice(src);
        }
    }
    Tensor::new(vec![bsz, c, out_h, out_w], out)
}

pub fn crop2d_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let (bsz, c, h, w) = dims4("crop2d", x)?;
    let (_, _, oh, ow) = dims4("crop2d", dy)?;
    let dyd = dy.data();
    let mut dx = vec![0.0; x.len()];
    for p in 0..bsz * c {
        for y in 0..oh {
            let src = &dyd[p * oh * ow + y * ow..][..ow];
            dx[p * h * w + y * w..][..ow].copy_from_slice(src);
        }
    }
    Tensor::new(x.shape().to_vec(), dx)
}

// ---------------------------------------------------------------------------
// feature mapping: per-output-pixel predicted kernels over a shared bank
// ---------------------------------------------------------------------------

/// Precomputed geometry for the feature-mapping op. Output pixel `(w, h)`
/// reads the k x k neighborhood of the source feature map centered at
/// `(src_col[w], src_row[h])` and contracts it with row
/// `kcol_idx[w] * n_vrow + krow_idx[h]` of the kernel bank. Rows of the
/// bank are laid out channel-major: `[channel][ky][kx]`.
#[derive(Debug, Clone)]
pub struct MapGeometry {
    pub out_h: usize,
    pub out_w: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub channels: usize,
    pub src_row: Vec<usize>,
    pub src_col: Vec<usize>,
    pub krow_idx: Vec<usize>,
    pub kcol_idx: Vec<usize>,
    pub n_vrow: usize,
    pub n_vcol: usize,
}

impl MapGeometry {
    pub fn n_kernels(&self) -> usize {
        self.n_vrow * self.n_vcol
    }

    pub fn kernel_len(&self) -> usize {
        self.k * self.k * self.channels
    }

    fn validate(&self, op: &'static str, x: &Tensor, kbank: &Tensor) -> Result<usize> {
        let (bsz, c, h, w) = dims4(op, x)?;
        if c != self.channels || h != self.in_h || w != self.in_w {
            return Err(Error::shape(
                op,
                format!(
                    "feature map {:?} does not match geometry ({} ch, {}x{})",
                    x.shape(),
                    self.channels,
                    self.in_h,
                    self.in_w
                ),
            ));
        }
        let (nk, klen) = dims2(op, kbank)?;
        if nk != self.n_kernels() || klen != self.kernel_len() {
            return Err(Error::shape(
                op,
                format!(
                    "kernel bank {:?} does not match geometry ({} kernels of length {})",
                    kbank.shape(),
                    self.n_kernels(),
                    self.kernel_len()
                ),
            ));
        }
        Ok(bsz)
    }
}

pub fn map_features_forward(
    x: &Tensor,
    kbank: &Tensor,
    bias: &Tensor,
    geom: &MapGeometry,
) -> Result<Tensor> {
    let bsz = geom.validate("map_features", x, kbank)?;
    let b0 = bias.scalar_value()?;
    let (k, c, ih, iw) = (geom.k, geom.channels, geom.in_h, geom.in_w);
    let pad = (k - 1) / 2;
    let klen = geom.kernel_len();
    let xd = x.data();
    let kd = kbank.data();
    let mut out = vec![0.0; bsz * geom.out_h * geom.out_w];

    for bi in 0..bsz {
        let x_img = &xd[bi * c * ih * iw..][..c * ih * iw];
        for oy in 0..geom.out_h {
            let hf = geom.src_row[oy];
            let kr = geom.krow_idx[oy];
            for ox in 0..geom.out_w {
                let wf = geom.src_col[ox];
                let kvec = &kd[(geom.kcol_idx[ox] * geom.n_vrow + kr) * klen..][..klen];
                let mut acc = b0;
                for ci in 0..c {
                    let x_plane = &x_img[ci * ih * iw..][..ih * iw];
                    for dy in 0..k {
                        let iy = hf + dy;
                        if iy < pad || iy >= ih + pad {
                            continue;
                        }
                        let iy = iy - pad;
                        let krow = &kvec[(ci * k + dy) * k..][..k];
                        let xrow = &x_plane[iy * iw..iy * iw + iw];
                        for (dx, &kv) in krow.iter().enumerate() {
                            let ix = wf + dx;
                            if ix < pad || ix >= iw + pad {
                                continue;
                            }
                            acc += kv * xrow[ix - pad];
                        }
                    }
                }
                out[(bi * geom.out_h + oy) * geom.out_w + ox] = acc;
            }
        }
    }
    Tensor::new(vec![bsz, 1, geom.out_h, geom.out_w], out)
}

pub fn map_features_backward(
    x: &Tensor,
    kbank: &Tensor,
    dy: &Tensor,
    geom: &MapGeometry,
) -> Result<(Tensor, Tensor, Tensor)> {
    let bsz = geom.validate("map_features", x, kbank)?;
    let (k, c, ih, iw) = (geom.k, geom.channels, geom.in_h, geom.in_w);
    let pad = (k - 1) / 2;
    let klen = geom.kernel_len();
    let xd = x.data();
    let kd = kbank.data();
    let dyd = dy.data();

    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut dbias = 0.0;

    for bi in 0..bsz {
        let x_img = &xd[bi * c * ih * iw..][..c * ih * iw];
        let dx_img_base = bi * c * ih * iw;
        for oy in 0..geom.out_h {
            let hf = geom.src_row[oy];
            let kr = geom.krow_idx[oy];
            for ox in 0..geom.out_w {
                let g = dyd[(bi * geom.out_h + oy) * geom.out_w + ox];
                if g == 0.0 {
                    continue;
                }
                dbias += g;
                let wf = geom.src_col[ox];
                let kbase = (geom.kcol_idx[ox] * geom.n_vrow + kr) * klen;
                for ci in 0..c {
                    let x_plane = &x_img[ci * ih * iw..][..ih * iw];
                    for dyk in 0..k {
                        let iy = hf + dyk;
                        if iy < pad || iy >= ih + pad {
                            continue;
                        }
                        let iy = iy - pad;
                        for dxk in 0..k {
                            let ix = wf + dxk;
                            if ix < pad || ix >= iw + pad {
                                continue;
                            }
                            let ix = ix - pad;
                            let kidx = kbase + (ci * k + dyk) * k + dxk;
                            dk[kidx] += g * x_plane[iy * iw + ix];
                            dx[dx_img_base + (ci * ih + iy) * iw + ix] += g * kd[kidx];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(kbank.shape().to_vec(), dk)?,
        Tensor::scalar(dbias),
    ))
}
