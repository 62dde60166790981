//! 3D convolution kernels (cubic kernels, symmetric zero padding) lowered to
//! GEMM through im2col, plus the 2×2×2 stride-2 transposed convolution.

/// `c = alpha * a · b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every index reachable with the
    // dense strides used by all callers in this module.
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
            rsc,
            csc,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_size: [usize; 3],
}

impl ConvGeom {
    pub fn out_size(&self) -> [usize; 3] {
        self.in_size
            .map(|n| (n + 2 * self.pad - self.kernel) / self.stride + 1)
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel.pow(3)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `kk`.
#[inline]
fn valid_range(kk: usize, pad: usize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    // input index = o * stride + kk - pad must lie in [0, n_in)
    let lo = if kk >= pad { 0 } else { (pad - kk).div_ceil(stride) };
    let hi = if n_in + pad <= kk {
        0
    } else {
        ((n_in + pad - kk - 1) / stride + 1).min(n_out)
    };
    (lo.min(hi), hi)
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    im2col_slab(g, x, 0, g.out_size()[0], cols);
}

/// im2col restricted to output depth slices `z0..z1`.
fn im2col_slab(g: &ConvGeom, x: &[f64], z0: usize, z1: usize, cols: &mut [f64]) {
    let [d, h, w] = g.in_size;
    let [od, oh, ow] = g.out_size();
    let n = (z1 - z0) * oh * ow;
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    for c in 0..g.in_ch {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            let (d_lo, d_hi) = valid_range(kd, p, s, d, od);
            let (d_lo, d_hi) = (d_lo.max(z0), d_hi.min(z1));
            for kh in 0..k {
                let (h_lo, h_hi) = valid_range(kh, p, s, h, oh);
                for kw in 0..k {
                    let (w_lo, w_hi) = valid_range(kw, p, s, w, ow);
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    dst.fill(0.0);
                    for z in d_lo..d_hi {
                        let iz = z * s + kd - p;
                        let zr = z - z0;
                        for y in h_lo..h_hi {
                            let iy = y * s + kh - p;
                            let src = &xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let out = &mut dst[(zr * oh + y) * ow..(zr * oh + y + 1) * ow];
                            if s == 1 {
                                let ix0 = w_lo + kw - p;
                                out[w_lo..w_hi].copy_from_slice(&src[ix0..ix0 + (w_hi - w_lo)]);
                            } else {
                                for xo in w_lo..w_hi {
                                    out[xo] = src[xo * s + kw - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let [d, h, w] = g.in_size;
    let [od, oh, ow] = g.out_size();
    let n = od * oh * ow;
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    for c in 0..g.in_ch {
        let xc = &mut dx[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            let (d_lo, d_hi) = valid_range(kd, p, s, d, od);
            for kh in 0..k {
                let (h_lo, h_hi) = valid_range(kh, p, s, h, oh);
                for kw in 0..k {
                    let (w_lo, w_hi) = valid_range(kw, p, s, w, ow);
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    let src = &cols[row * n..(row + 1) * n];
                    for z in d_lo..d_hi {
                        let iz = z * s + kd - p;
                        for y in h_lo..h_hi {
                            let iy = y * s + kh - p;
                            let dst = &mut xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let col = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            for xo in w_lo..w_hi {
                                dst[xo * s + kw - p] += col[xo];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Upper bound on im2col buffer entries in the forward pass; larger outputs
/// are processed in depth slabs.
const FORWARD_COLS_BUDGET: usize = 1 << 22;

/// Forward convolution of a batch `x: [N, Cin, D, H, W]` with weights
/// `[Cout, Cin, k, k, k]` and bias `[Cout]`.
pub fn conv3d_forward(g: &ConvGeom, batch: usize, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    forward_with_budget(g, batch, x, w, b, FORWARD_COLS_BUDGET)
}

fn forward_with_budget(g: &ConvGeom, batch: usize, x: &[f64], w: &[f64], b: &[f64], budget: usize) -> Vec<f64> {
    let in_len = g.in_ch * g.in_size.iter().product::<usize>();
    let [od, oh, ow] = g.out_size();
    let n = od * oh * ow;
    let plane = oh * ow;
    let kdim = g.col_rows();
    let slab = (budget / (kdim * plane).max(1)).clamp(1, od.max(1));
    let mut out = vec![0.0; batch * g.out_ch * n];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kdim * slab * plane] };
    for s in 0..batch {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let ys = &mut out[s * g.out_ch * n..(s + 1) * g.out_ch * n];
        for (co, row) in ys.chunks_mut(n).enumerate() {
            row.fill(b[co]);
        }
        if g.is_pointwise() {
            gemm(g.out_ch, kdim, n, w, (kdim as isize, 1), xs, (n as isize, 1), 1.0, ys, (n as isize, 1));
            continue;
        }
        for z0 in (0..od).step_by(slab) {
            let z1 = (z0 + slab).min(od);
            let cols_n = (z1 - z0) * plane;
            im2col_slab(g, xs, z0, z1, &mut cols[..kdim * cols_n]);
            // rows of the output block are strided by the full spatial size
            let block = &mut ys[z0 * plane..];
            assert!(block.len() >= (g.out_ch - 1) * n + cols_n);
            // SAFETY: the assertion above bounds every (row, col) written
            // through the (n, 1) strides.
            unsafe {
                matrixmultiply::dgemm(
                    g.out_ch,
                    kdim,
                    cols_n,
                    1.0,
                    w.as_ptr(),
                    kdim as isize,
                    1,
                    cols.as_ptr(),
                    cols_n as isize,
                    1,
                    1.0,
                    block.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
    }
    out
}

/// Gradients of [`conv3d_forward`]. `dx` is only computed when requested;
/// `dw` and `db` are accumulated into the given buffers.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward(
    g: &ConvGeom,
    batch: usize,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let in_len = g.in_ch * g.in_size.iter().product::<usize>();
    let n = g.out_size().iter().product::<usize>();
    let kdim = g.col_rows();
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kdim * n] };
    let mut dcols = vec![0.0; if g.is_pointwise() { 0 } else { kdim * n }];
    for s in 0..batch {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let dys = &dout[s * g.out_ch * n..(s + 1) * g.out_ch * n];
        for (co, row) in dys.chunks(n).enumerate() {
            db[co] += row.iter().sum::<f64>();
        }
        let cols_ref: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(g, xs, &mut cols);
            &cols
        };
        // dW[Cout, K] += dY[Cout, N] · colsᵀ[N, K]
        gemm(
            g.out_ch,
            n,
            kdim,
            dys,
            (n as isize, 1),
            cols_ref,
            (1, n as isize),
            1.0,
            dw,
            (kdim as isize, 1),
        );
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            if g.is_pointwise() {
                // dX[Cin, N] += Wᵀ[Cin, Cout] · dY[Cout, N]
                gemm(
                    g.in_ch,
                    g.out_ch,
                    n,
                    w,
                    (1, kdim as isize),
                    dys,
                    (n as isize, 1),
                    1.0,
                    dxs,
                    (n as isize, 1),
                );
            } else {
                gemm(
                    kdim,
                    g.out_ch,
                    n,
                    w,
                    (1, kdim as isize),
                    dys,
                    (n as isize, 1),
                    0.0,
                    &mut dcols,
                    (n as isize, 1),
                );
                col2im(g, &dcols, dxs);
            }
        }
    }
}

/// Transposed convolution with kernel 2 and stride 2: each input voxel
/// writes a disjoint 2×2×2 output block. Weights are `[Cin, Cout, 2, 2, 2]`.
pub fn conv_transpose_forward(
    in_ch: usize,
    out_ch: usize,
    in_size: [usize; 3],
    batch: usize,
    x: &[f64],
    w: &[f64],
    b: &[f64],
) -> Vec<f64> {
    let [d, h, wd] = in_size;
    let n = d * h * wd;
    let rows = out_ch * 8;
    let out_n = 8 * n;
    let mut out = vec![0.0; batch * out_ch * out_n];
    let mut blocks = vec![0.0; rows * n];
    for s in 0..batch {
        let xs = &x[s * in_ch * n..(s + 1) * in_ch * n];
        // blocks[Cout*8, N] = Wᵀ[Cout*8, Cin] · X[Cin, N]
        gemm(
            rows,
            in_ch,
            n,
            w,
            (1, rows as isize),
            xs,
            (n as isize, 1),
            0.0,
            &mut blocks,
            (n as isize, 1),
        );
        let ys = &mut out[s * out_ch * out_n..(s + 1) * out_ch * out_n];
        scatter_blocks(out_ch, in_size, &blocks, ys, b);
    }
    out
}

fn scatter_blocks(out_ch: usize, [d, h, w]: [usize; 3], blocks: &[f64], y: &mut [f64], b: &[f64]) {
    let n = d * h * w;
    let (oh, ow) = (2 * h, 2 * w);
    for co in 0..out_ch {
        let yc = &mut y[co * 8 * n..(co + 1) * 8 * n];
        for off in 0..8 {
            let (a, bb, c) = (off >> 2, (off >> 1) & 1, off & 1);
            let src = &blocks[(co * 8 + off) * n..(co * 8 + off + 1) * n];
            for z in 0..d {
                for yy in 0..h {
                    let base = ((2 * z + a) * oh + 2 * yy + bb) * ow + c;
                    let row = &src[(z * h + yy) * w..(z * h + yy + 1) * w];
                    for (xx, v) in row.iter().enumerate() {
                        yc[base + 2 * xx] = v + b[co];
                    }
                }
            }
        }
    }
}

fn gather_blocks(out_ch: usize, [d, h, w]: [usize; 3], dy: &[f64], blocks: &mut [f64]) {
    let n = d * h * w;
    let (oh, ow) = (2 * h, 2 * w);
    for co in 0..out_ch {
        let dyc = &dy[co * 8 * n..(co + 1) * 8 * n];
        for off in 0..8 {
            let (a, bb, c) = (off >> 2, (off >> 1) & 1, off & 1);
            let dst = &mut blocks[(co * 8 + off) * n..(co * 8 + off + 1) * n];
            for z in 0..d {
                for yy in 0..h {
                    let base = ((2 * z + a) * oh + 2 * yy + bb) * ow + c;
                    let row = &mut dst[(z * h + yy) * w..(z * h + yy + 1) * w];
                    for (xx, v) in row.iter_mut().enumerate() {
                        *v = dyc[base + 2 * xx];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_backward(
    in_ch: usize,
    out_ch: usize,
    in_size: [usize; 3],
    batch: usize,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let n: usize = in_size.iter().product();
    let rows = out_ch * 8;
    let out_n = 8 * n;
    let mut blocks = vec![0.0; rows * n];
    for s in 0..batch {
        let xs = &x[s * in_ch * n..(s + 1) * in_ch * n];
        let dys = &dout[s * out_ch * out_n..(s + 1) * out_ch * out_n];
        for (co, chunk) in dys.chunks(out_n).enumerate() {
            db[co] += chunk.iter().sum::<f64>();
        }
        gather_blocks(out_ch, in_size, dys, &mut blocks);
        // dW[Cin, Cout*8] += X[Cin, N] · blocksᵀ[N, Cout*8]
        gemm(
            in_ch,
            n,
            rows,
            xs,
            (n as isize, 1),
            &blocks,
            (1, n as isize),
            1.0,
            dw,
            (rows as isize, 1),
        );
        if let Some(dx) = dx.as_deref_mut() {
            // dX[Cin, N] += W[Cin, Cout*8] · blocks[Cout*8, N]
            gemm(
                in_ch,
                rows,
                n,
                w,
                (rows as isize, 1),
                &blocks,
                (n as isize, 1),
                1.0,
                &mut dx[s * in_ch * n..(s + 1) * in_ch * n],
                (n as isize, 1),
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution.
    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let [d, h, wd] = g.in_size;
        let [od, oh, ow] = g.out_size();
        let k = g.kernel;
        let mut out = vec![0.0; g.out_ch * od * oh * ow];
        for co in 0..g.out_ch {
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..g.in_ch {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let iz = (z * g.stride + kd) as isize - g.pad as isize;
                                        let iy = (y * g.stride + kh) as isize - g.pad as isize;
                                        let ix = (xo * g.stride + kw) as isize - g.pad as isize;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= d as isize
                                            || iy >= h as isize
                                            || ix >= wd as isize
                                        {
                                            continue;
                                        }
                                        let xi = ((ci * d + iz as usize) * h + iy as usize) * wd
                                            + ix as usize;
                                        let wi = (((co * g.in_ch + ci) * k + kd) * k + kh) * k + kw;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[((co * od + z) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed;
        (0..n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (stride, pad, kernel, size) in [(1, 1, 3, [4, 5, 3]), (2, 1, 3, [6, 4, 5]), (1, 0, 1, [3, 3, 3])] {
            let g = ConvGeom { in_ch: 2, out_ch: 3, kernel, stride, pad, in_size: size };
            let x = pseudo(2 * size.iter().product::<usize>(), 1);
            let w = pseudo(3 * 2 * kernel.pow(3), 2);
            let b = pseudo(3, 3);
            let fast = conv3d_forward(&g, 1, &x, &w, &b);
            let slow = naive_conv(&g, &x, &w, &b);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn depth_slabs_match_a_single_pass() {
        for stride in [1, 2] {
            let g = ConvGeom { in_ch: 2, out_ch: 3, kernel: 3, stride, pad: 1, in_size: [7, 4, 5] };
            let x = pseudo(2 * 2 * 140, 1);
            let w = pseudo(3 * 2 * 27, 2);
            let b = pseudo(3, 3);
            let whole = forward_with_budget(&g, 2, &x, &w, &b, usize::MAX);
            for budget in [1, 54 * 20, 54 * 41] {
                let slabs = forward_with_budget(&g, 2, &x, &w, &b, budget);
                let diff = whole.iter().zip(&slabs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(diff < 1e-12, "stride {stride}, budget {budget}: {diff}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), dy> is linear in x and w; check dx, dw via the adjoint identity.
        let g = ConvGeom { in_ch: 2, out_ch: 2, kernel: 3, stride: 2, pad: 1, in_size: [5, 4, 6] };
        let nx = 2 * 5 * 4 * 6;
        let x = pseudo(nx, 4);
        let w = pseudo(2 * 2 * 27, 5);
        let zero_b = vec![0.0; 2];
        let y = conv3d_forward(&g, 1, &x, &w, &zero_b);
        let dy = pseudo(y.len(), 6);
        let mut dx = vec![0.0; nx];
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 2];
        conv3d_backward(&g, 1, &x, &w, &dy, Some(&mut dx), &mut dw, &mut db);
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let via_x: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        let via_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
        assert!((db[0] - dy[..y.len() / 2].iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn transpose_conv_places_blocks() {
        // one input voxel, one channel: the output block is the kernel itself plus bias
        let w: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let out = conv_transpose_forward(1, 1, [1, 1, 1], 1, &[2.0], &w, &[0.5]);
        let expected: Vec<f64> = (0..8).map(|v| 2.0 * v as f64 + 0.5).collect();
        assert_eq!(out, expected);
    }

    #[test]
    fn transpose_conv_backward_is_adjoint() {
        let (cin, cout, size) = (3, 2, [2, 3, 2]);
        let n: usize = size.iter().product();
        let x = pseudo(cin * n, 7);
        let w = pseudo(cin * cout * 8, 8);
        let y = conv_transpose_forward(cin, cout, size, 1, &x, &w, &[0.0; 2]);
        let dy = pseudo(y.len(), 9);
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; cout];
        conv_transpose_backward(cin, cout, size, 1, &x, &w, &dy, Some(&mut dx), &mut dw, &mut db);
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let via_x: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        let via_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }
}
