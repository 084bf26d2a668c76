//! Slice-level numeric kernels behind the recorded operations.
//!
//! All spatial kernels use zero "same" padding. Convolution accumulates in
//! `(input channel, kernel row, kernel column)` order for every output pixel,
//! which is also the order a direct nested-loop evaluation uses.

/// Valid output range `[lo, hi)` along one axis for a tap at offset `off`.
#[inline]
fn valid_range(n: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off).clamp(0, n as isize) as usize;
    (lo, hi.max(lo))
}

/// `out[y][x] += a * inp[y + dy][x + dx]` over all in-bounds pixels.
#[inline]
pub(crate) fn shifted_axpy(
    out: &mut [f64],
    inp: &[f64],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    a: f64,
) {
    let (y0, y1) = valid_range(h, dy);
    let (x0, x1) = valid_range(w, dx);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let o = &mut out[y * w + x0..y * w + x1];
        let sx0 = (x0 as isize + dx) as usize;
        let i = &inp[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
        for (ov, iv) in o.iter_mut().zip(i) {
            *ov += a * iv;
        }
    }
}

/// `sum over in-bounds pixels of g[y][x] * inp[y + dy][x + dx]`.
#[inline]
pub(crate) fn shifted_dot(g: &[f64], inp: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let (y0, y1) = valid_range(h, dy);
    let (x0, x1) = valid_range(w, dx);
    if x0 >= x1 {
        return 0.0;
    }
    let mut acc = [0.0f64; 4];
    let mut tail = 0.0;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let a = &g[y * w + x0..y * w + x1];
        let sx0 = (x0 as isize + dx) as usize;
        let b = &inp[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
        let mut ca = a.chunks_exact(4);
        let mut cb = b.chunks_exact(4);
        for (pa, pb) in (&mut ca).zip(&mut cb) {
            for k in 0..4 {
                acc[k] += pa[k] * pb[k];
            }
        }
        for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
            tail += x * y;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn tap_offset(k: usize, i: usize, dilation: usize) -> isize {
    (i as isize - (k / 2) as isize) * dilation as isize
}

/// `c = a * b` (or `c += a * b` when `accumulate`), all row-major;
/// `a` is `m x k`, `b` is `k x n`. `ta`/`tb` read the stored operand transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserted lengths cover every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Patch matrix with rows ordered `(ci, ky, kx)` and one column per pixel.
fn im2col(input: &[f64], cin: usize, h: usize, w: usize, k: usize, dilation: usize) -> Vec<f64> {
    let hw = h * w;
    let mut col = vec![0.0; cin * k * k * hw];
    for ci in 0..cin {
        let inp = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let dy = tap_offset(k, ky, dilation);
                let dx = tap_offset(k, kx, dilation);
                shifted_axpy(&mut col[r * hw..(r + 1) * hw], inp, h, w, dy, dx, 1.0);
            }
        }
    }
    col
}

fn col2im(col: &[f64], cin: usize, h: usize, w: usize, k: usize, dilation: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; cin * hw];
    for ci in 0..cin {
        let o = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let dy = tap_offset(k, ky, dilation);
                let dx = tap_offset(k, kx, dilation);
                shifted_axpy(o, &col[r * hw..(r + 1) * hw], h, w, -dy, -dx, 1.0);
            }
        }
    }
    out
}

fn patches(input: &[f64], cin: usize, h: usize, w: usize, k: usize, dilation: usize) -> std::borrow::Cow<'_, [f64]> {
    if k == 1 {
        std::borrow::Cow::Borrowed(input)
    } else {
        std::borrow::Cow::Owned(im2col(input, cin, h, w, k, dilation))
    }
}

/// Dense convolution: input `cin x h x w`, kernel `cout x cin x k x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    dilation: usize,
) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; cout * hw];
    if let Some(b) = bias {
        for (co, o) in out.chunks_exact_mut(hw).enumerate() {
            o.fill(b[co]);
        }
    }
    let col = patches(input, cin, h, w, k, dilation);
    gemm(cout, cin * k * k, hw, kernel, false, &col, false, &mut out, bias.is_some());
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_input(
    grad_out: &[f64],
    kernel: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    dilation: usize,
) -> Vec<f64> {
    let hw = h * w;
    let rows = cin * k * k;
    let mut dcol = vec![0.0; rows * hw];
    gemm(rows, cout, hw, kernel, true, grad_out, false, &mut dcol, false);
    if k == 1 {
        dcol
    } else {
        col2im(&dcol, cin, h, w, k, dilation)
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_kernel(
    grad_out: &[f64],
    input: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    dilation: usize,
) -> Vec<f64> {
    let hw = h * w;
    let rows = cin * k * k;
    let col = patches(input, cin, h, w, k, dilation);
    let mut gk = vec![0.0; cout * rows];
    gemm(cout, hw, rows, grad_out, false, &col, true, &mut gk, false);
    gk
}

/// Per-channel convolution: input `c x h x w`, kernel `c x k x k`.
pub(crate) fn depthwise_forward(
    input: &[f64],
    kernel: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    dilation: usize,
) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        let o = &mut out[ch * hw..(ch + 1) * hw];
        let inp = &input[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let wv = kernel[(ch * k + ky) * k + kx];
                let dy = tap_offset(k, ky, dilation);
                let dx = tap_offset(k, kx, dilation);
                shifted_axpy(o, inp, h, w, dy, dx, wv);
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward(
    grad_out: &[f64],
    input: &[f64],
    kernel: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    dilation: usize,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let hw = h * w;
    let mut gin = need_input.then(|| vec![0.0; c * hw]);
    let mut gk = need_kernel.then(|| vec![0.0; c * k * k]);
    for ch in 0..c {
        let go = &grad_out[ch * hw..(ch + 1) * hw];
        let inp = &input[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let idx = (ch * k + ky) * k + kx;
                let dy = tap_offset(k, ky, dilation);
                let dx = tap_offset(k, kx, dilation);
                if let Some(gi) = gin.as_mut() {
                    shifted_axpy(&mut gi[ch * hw..(ch + 1) * hw], go, h, w, -dy, -dx, kernel[idx]);
                }
                if let Some(gk) = gk.as_mut() {
                    gk[idx] = shifted_dot(go, inp, h, w, dy, dx);
                }
            }
        }
    }
    (gin, gk)
}

/// Horizontal-derivative Sobel stencil (cross-correlation form).
pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
/// Vertical-derivative Sobel stencil (cross-correlation form).
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Applies a 3x3 stencil to one plane with zero padding.
pub(crate) fn stencil3(plane: &[f64], h: usize, w: usize, stencil: &[[f64; 3]; 3]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for (ky, row) in stencil.iter().enumerate() {
        for (kx, &s) in row.iter().enumerate() {
            if s != 0.0 {
                shifted_axpy(&mut out, plane, h, w, ky as isize - 1, kx as isize - 1, s);
            }
        }
    }
    out
}

/// Adjoint of [`stencil3`].
pub(crate) fn stencil3_adjoint(grad: &[f64], out: &mut [f64], h: usize, w: usize, stencil: &[[f64; 3]; 3]) {
    for (ky, row) in stencil.iter().enumerate() {
        for (kx, &s) in row.iter().enumerate() {
            if s != 0.0 {
                shifted_axpy(out, grad, h, w, 1 - ky as isize, 1 - kx as isize, s);
            }
        }
    }
}

/// Sobel components `(gx, gy)` of one plane.
pub fn sobel_components(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    (stencil3(plane, h, w, &SOBEL_X), stencil3(plane, h, w, &SOBEL_Y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axpy_and_dot_are_adjoint() {
        let (h, w) = (5, 7);
        let a: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.11).cos()).collect();
        for (dy, dx) in [(0, 0), (1, -2), (-3, 3), (2, 6), (-5, 0)] {
            let mut out = vec![0.0; h * w];
            shifted_axpy(&mut out, &b, h, w, dy, dx, 1.0);
            let lhs: f64 = a.iter().zip(&out).map(|(x, y)| x * y).sum();
            let rhs = shifted_dot(&a, &b, h, w, dy, dx);
            assert!((lhs - rhs).abs() < 1e-12, "offset ({dy},{dx})");
        }
    }

    #[test]
    fn out_of_range_offsets_are_noops() {
        let mut out = vec![0.0; 9];
        shifted_axpy(&mut out, &[1.0; 9], 3, 3, 0, 5, 1.0);
        assert!(out.iter().all(|&v| v == 0.0));
        assert_eq!(shifted_dot(&[1.0; 9], &[1.0; 9], 3, 3, -4, 0), 0.0);
    }

    #[test]
    fn backward_passes_are_adjoint_to_forward() {
        let (cin, cout, h, w) = (3, 2, 6, 5);
        for (k, d) in [(1, 1), (3, 1), (3, 2)] {
            let x: Vec<f64> = (0..cin * h * w).map(|i| (i as f64 * 0.31).sin()).collect();
            let kern: Vec<f64> = (0..cout * cin * k * k).map(|i| (i as f64 * 0.7).cos()).collect();
            let g: Vec<f64> = (0..cout * h * w).map(|i| (i as f64 * 0.13).sin()).collect();
            let y = conv2d_forward(&x, &kern, None, cin, cout, h, w, k, d);
            let gy: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
            let gx = conv2d_backward_input(&g, &kern, cin, cout, h, w, k, d);
            let xg: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
            let gk = conv2d_backward_kernel(&g, &x, cin, cout, h, w, k, d);
            let kg: f64 = kern.iter().zip(&gk).map(|(a, b)| a * b).sum();
            assert!((gy - xg).abs() < 1e-10, "input adjoint k={k} d={d}");
            assert!((gy - kg).abs() < 1e-10, "kernel adjoint k={k} d={d}");
        }
    }
}
