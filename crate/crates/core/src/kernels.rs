//! Raw forward/backward kernels over flat row-major buffers.
//!
//! Every routine here is sequential with a fixed summation order, so results
//! are bit-reproducible for identical inputs.

/// `c = a * b + beta * c` for row-major `a: m x k`, `b: k x n`, `c: m x n`,
/// with explicit strides so transposed views need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `C x H x W` sample into a `(C*k*k) x (Ho*Wo)` column matrix.
fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let plane = g.out_plane();
    let (h, w) = (g.height as isize, g.width as isize);
    for c in 0..g.in_ch {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= h {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back onto one sample, summing overlapping taps.
fn col2im_add(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let plane = g.out_plane();
    let (h, w) = (g.height as isize, g.width as isize);
    for c in 0..g.in_ch {
        let dxc = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], weight: &[f64]) -> Vec<f64> {
    let in_sz = g.in_ch * g.height * g.width;
    let out_sz = g.out_ch * g.out_plane();
    let (rows, plane) = (g.col_rows(), g.out_plane());
    let mut out = vec![0.0; g.batch * out_sz];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * plane] };
    for n in 0..g.batch {
        let xn = &x[n * in_sz..(n + 1) * in_sz];
        let b: &[f64] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        gemm(
            g.out_ch,
            rows,
            plane,
            weight,
            (rows, 1),
            b,
            (plane, 1),
            0.0,
            &mut out[n * out_sz..(n + 1) * out_sz],
        );
    }
    out
}

/// Returns `(d_input, d_weight)`; either may be skipped.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_sz = g.in_ch * g.height * g.width;
    let out_sz = g.out_ch * g.out_plane();
    let (rows, plane) = (g.col_rows(), g.out_plane());
    let mut dx = want_dx.then(|| vec![0.0; g.batch * in_sz]);
    let mut dw = want_dw.then(|| vec![0.0; g.out_ch * rows]);
    let mut cols = vec![0.0; rows * plane];
    let mut dcols = if want_dx && !g.is_pointwise() { vec![0.0; rows * plane] } else { Vec::new() };
    for n in 0..g.batch {
        let dn = &dout[n * out_sz..(n + 1) * out_sz];
        if let Some(dw) = dw.as_mut() {
            let xn = &x[n * in_sz..(n + 1) * in_sz];
            let b: &[f64] = if g.is_pointwise() {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols
            };
            // dW += dOut_n * cols^T
            gemm(g.out_ch, plane, rows, dn, (plane, 1), b, (1, plane), 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_sz..(n + 1) * in_sz];
            if g.is_pointwise() {
                gemm(rows, g.out_ch, plane, weight, (1, rows), dn, (plane, 1), 0.0, dxn);
            } else {
                gemm(rows, g.out_ch, plane, weight, (1, rows), dn, (plane, 1), 0.0, &mut dcols);
                col2im_add(g, &dcols, dxn);
            }
        }
    }
    (dx, dw)
}

pub(crate) fn avg_pool2x2_forward(n: usize, c: usize, h: usize, w: usize, x: &[f64]) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, xx) = (2 * oy, 2 * ox);
                dst[oy * ow + ox] = (src[y * w + xx]
                    + src[y * w + xx + 1]
                    + src[(y + 1) * w + xx]
                    + src[(y + 1) * w + xx + 1])
                    * 0.25;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2x2_backward(n: usize, c: usize, h: usize, w: usize, dout: &[f64]) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let src = &dout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * ow + xx / 2] * 0.25;
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance over the N and spatial axes.
pub(crate) fn channel_moments(n: usize, c: usize, s: usize, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = (n * s) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for b in 0..n {
            acc += x[(b * c + ch) * s..(b * c + ch + 1) * s].iter().sum::<f64>();
        }
        let mu = acc / m;
        let mut sq = 0.0;
        for b in 0..n {
            sq += x[(b * c + ch) * s..(b * c + ch + 1) * s]
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = sq / m;
    }
    (mean, var)
}
