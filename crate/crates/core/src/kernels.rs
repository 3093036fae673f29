//! Raw numeric kernels over flat row-major slices.
//!
//! These carry no shape bookkeeping of their own; the tape validates shapes
//! before dispatching here. Every reduction runs in a fixed order so results
//! are bitwise reproducible.

/// `c = op(a) * op(b) + beta * c` for row-major matrices, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].fill(0.0);
        } else {
            c[..m * n].iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
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

/// Geometry of a 2-D convolution on a single image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output columns `ox` whose input column `ox*stride + k - pad` lies in
/// `0..width`.
fn valid_cols(g: &ConvGeometry, k: usize, wo: usize) -> (usize, usize) {
    let off = k as isize - g.padding as isize;
    let s = g.stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let hi = ((g.width as isize - off + s - 1) / s).clamp(0, wo as isize) as usize;
    (lo.min(hi), hi)
}

/// Unfolds one `[C, H, W]` image into `[C*kh*kw, Ho*Wo]` patch columns.
pub fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_cols(g, kx, wo);
                let x0 = (lo * g.stride + kx) as isize - pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    if g.stride == 1 {
                        let x0 = x0 as usize;
                        out_row[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (i, v) in out_row[lo..hi].iter_mut().enumerate() {
                            *v = src[x0 as usize + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch columns back, accumulating into `dx`.
pub fn col2im(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_cols(g, kx, wo);
                let x0 = ((lo * g.stride + kx) as isize - pad) as usize;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let s = &src[oy * wo + lo..oy * wo + hi];
                    if g.stride == 1 {
                        dst[x0..x0 + s.len()]
                            .iter_mut()
                            .zip(s)
                            .for_each(|(d, v)| *d += v);
                    } else {
                        for (i, v) in s.iter().enumerate() {
                            dst[x0 + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Runs `f` on a reusable per-thread buffer of at least `len` values with
/// unspecified contents.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    let mut buf = SCRATCH.with(|s| std::mem::take(&mut *s.borrow_mut()));
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
    let out = f(&mut buf[..len]);
    SCRATCH.with(|s| *s.borrow_mut() = buf);
    out
}

/// Batched convolution forward. `x` is `[N, C, H, W]`, `w` is `[O, C, kh, kw]`.
pub fn conv2d_forward(
    x: &[f64],
    batch: usize,
    g: &ConvGeometry,
    w: &[f64],
    out_channels: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let in_len = g.channels * g.height * g.width;
    let (rows, hw) = (g.col_rows(), g.col_cols());
    let mut out = vec![0.0; batch * out_channels * hw];
    let scratch = if g.is_pointwise() { 0 } else { rows * hw };
    with_scratch(scratch, |cols| {
        for n in 0..batch {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let patches: &[f64] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, g, cols);
                cols
            };
            let on = &mut out[n * out_channels * hw..(n + 1) * out_channels * hw];
            gemm(out_channels, rows, hw, w, false, patches, false, 0.0, on);
            if let Some(b) = bias {
                for (o, plane) in on.chunks_mut(hw).enumerate() {
                    plane.iter_mut().for_each(|v| *v += b[o]);
                }
            }
        }
    });
    out
}

/// Gradients of a batched convolution. Any of the outputs may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    batch: usize,
    g: &ConvGeometry,
    w: &[f64],
    out_channels: usize,
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let in_len = g.channels * g.height * g.width;
    let (rows, hw) = (g.col_rows(), g.col_cols());
    let n_cols = if g.is_pointwise() { 0 } else { rows * hw };
    let n_dcols = if dx.is_some() && !g.is_pointwise() { rows * hw } else { 0 };
    with_scratch(n_cols + n_dcols, |buf| {
        let (cols, dcols) = buf.split_at_mut(n_cols);
        for n in 0..batch {
            let dn = &dout[n * out_channels * hw..(n + 1) * out_channels * hw];
            if let Some(db) = db.as_deref_mut() {
                for (o, plane) in dn.chunks(hw).enumerate() {
                    db[o] += plane.iter().sum::<f64>();
                }
            }
            let xn = &x[n * in_len..(n + 1) * in_len];
            if let Some(dw) = dw.as_deref_mut() {
                let patches: &[f64] = if g.is_pointwise() {
                    xn
                } else {
                    im2col(xn, g, cols);
                    cols
                };
                gemm(out_channels, hw, rows, dn, false, patches, true, 1.0, dw);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxn = &mut dx[n * in_len..(n + 1) * in_len];
                if g.is_pointwise() {
                    gemm(rows, out_channels, hw, w, true, dn, false, 1.0, dxn);
                } else {
                    gemm(rows, out_channels, hw, w, true, dn, false, 0.0, dcols);
                    col2im(dcols, g, dxn);
                }
            }
        }
    });
}

/// Source sample positions for one axis of a 2x bilinear upsample with
/// half-pixel centres and edge clamping: `(lower index, upper index, upper weight)`.
fn upsample_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear 2x upsampling of `planes` independent `[H, W]` planes.
pub fn upsample2x_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
                let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
                dst[oy * ow + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x_forward`], accumulating into `dx`.
pub fn upsample2x_backward(dout: &[f64], planes: usize, h: usize, w: usize, dx: &mut [f64]) {
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..planes {
        let src = &dout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let d = src[oy * ow + ox];
                dst[y0 * w + x0] += d * (1.0 - wy) * (1.0 - wx);
                dst[y0 * w + x1] += d * (1.0 - wy) * wx;
                dst[y1 * w + x0] += d * wy * (1.0 - wx);
                dst[y1 * w + x1] += d * wy * wx;
            }
        }
    }
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalisation forward over `[N, C, HW]`. Returns the output and the
/// per-(sample, group) `(mean, 1/std)` statistics.
pub fn group_norm_forward(
    x: &[f64],
    batch: usize,
    channels: usize,
    hw: usize,
    groups: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<(f64, f64)>) {
    let per_group = channels / groups;
    let span = per_group * hw;
    let mut out = vec![0.0; x.len()];
    let mut stats = Vec::with_capacity(batch * groups);
    for n in 0..batch {
        for gi in 0..groups {
            let start = (n * channels + gi * per_group) * hw;
            let seg = &x[start..start + span];
            let mean = seg.iter().sum::<f64>() / span as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / span as f64;
            let rstd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            stats.push((mean, rstd));
            for c in 0..per_group {
                let ch = gi * per_group + c;
                let off = start + c * hw;
                for i in off..off + hw {
                    out[i] = (x[i] - mean) * rstd * gamma[ch] + beta[ch];
                }
            }
        }
    }
    (out, stats)
}

/// Group normalisation backward; accumulates into whichever outputs are given.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward(
    x: &[f64],
    dout: &[f64],
    batch: usize,
    channels: usize,
    hw: usize,
    groups: usize,
    gamma: &[f64],
    stats: &[(f64, f64)],
    dx: Option<&mut [f64]>,
    dgamma: Option<&mut [f64]>,
    dbeta: Option<&mut [f64]>,
) {
    let per_group = channels / groups;
    let span = per_group * hw;
    let mut dgamma_acc = vec![0.0; channels];
    let mut dbeta_acc = vec![0.0; channels];
    let mut dx = dx;
    for n in 0..batch {
        for gi in 0..groups {
            let (mean, rstd) = stats[n * groups + gi];
            let start = (n * channels + gi * per_group) * hw;
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for c in 0..per_group {
                let ch = gi * per_group + c;
                let off = start + c * hw;
                for i in off..off + hw {
                    let xhat = (x[i] - mean) * rstd;
                    let dy = dout[i];
                    dgamma_acc[ch] += dy * xhat;
                    dbeta_acc[ch] += dy;
                    let dxhat = dy * gamma[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                let m = span as f64;
                for c in 0..per_group {
                    let ch = gi * per_group + c;
                    let off = start + c * hw;
                    for i in off..off + hw {
                        let xhat = (x[i] - mean) * rstd;
                        let dxhat = dout[i] * gamma[ch];
                        dx[i] += rstd / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
            }
        }
    }
    if let Some(dg) = dgamma {
        dg.iter_mut().zip(&dgamma_acc).for_each(|(a, b)| *a += b);
    }
    if let Some(db) = dbeta {
        db.iter_mut().zip(&dbeta_acc).for_each(|(a, b)| *a += b);
    }
}

/// Softmax over the middle axis of an `[outer, len, inner]` view.
pub fn softmax_forward(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut maxes = vec![f64::NEG_INFINITY; inner];
    let mut sums = vec![0.0; inner];
    for o in 0..outer {
        let base = o * len * inner;
        maxes.iter_mut().for_each(|m| *m = f64::NEG_INFINITY);
        sums.iter_mut().for_each(|s| *s = 0.0);
        for a in 0..len {
            let row = &x[base + a * inner..base + (a + 1) * inner];
            maxes.iter_mut().zip(row).for_each(|(m, v)| *m = m.max(*v));
        }
        for a in 0..len {
            let off = base + a * inner;
            for i in 0..inner {
                let e = (x[off + i] - maxes[i]).exp();
                out[off + i] = e;
                sums[i] += e;
            }
        }
        for a in 0..len {
            let off = base + a * inner;
            for i in 0..inner {
                out[off + i] /= sums[i];
            }
        }
    }
    out
}

/// Softmax backward given the forward output `y`; accumulates into `dx`.
pub fn softmax_backward(
    y: &[f64],
    dy: &[f64],
    outer: usize,
    len: usize,
    inner: usize,
    dx: &mut [f64],
) {
    let mut dots = vec![0.0; inner];
    for o in 0..outer {
        let base = o * len * inner;
        dots.iter_mut().for_each(|d| *d = 0.0);
        for a in 0..len {
            let off = base + a * inner;
            for i in 0..inner {
                dots[i] += y[off + i] * dy[off + i];
            }
        }
        for a in 0..len {
            let off = base + a * inner;
            for i in 0..inner {
                dx[off + i] += y[off + i] * (dy[off + i] - dots[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);

        // a^T stored as [3,2]
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &at, true, &b, false, 0.0, &mut c2);
        assert_eq!(c, c2);

        // b^T stored as [2,3]
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c3 = [1.0; 4];
        gemm(2, 3, 2, &a, false, &bt, true, 1.0, &mut c3);
        assert_eq!(c3, [5.0, 6.0, 11.0, 12.0]);
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let x = vec![3.0; 2 * 3 * 4];
        let y = upsample2x_forward(&x, 2, 3, 4);
        assert_eq!(y.len(), 2 * 6 * 8);
        assert!(y.iter().all(|v| (v - 3.0).abs() < 1e-15));
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        // <U x, y> == <x, U^T y>
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..48).map(|i| (i as f64 * 0.11).cos()).collect();
        let ux = upsample2x_forward(&x, 1, 3, 4);
        let mut uty = vec![0.0; 12];
        upsample2x_backward(&y, 1, 3, 4, &mut uty);
        let lhs: f64 = ux.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&uty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        let g = ConvGeometry {
            channels: 2,
            height: 5,
            width: 4,
            kernel_h: 3,
            kernel_w: 3,
            stride: 2,
            padding: 1,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).sin()).collect();
        let n = g.col_rows() * g.col_cols();
        let y: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut cols = vec![0.0; n];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; 40];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let x = [1.0, -2.0, 0.5, 3.0];
        let shifted: Vec<f64> = x.iter().map(|v| v + 100.0).collect();
        let a = softmax_forward(&x, 1, 4, 1);
        let b = softmax_forward(&shifted, 1, 4, 1);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-15);
        }
    }
}
