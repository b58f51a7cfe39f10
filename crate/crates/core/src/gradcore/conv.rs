//! 3×3, stride-1, zero-padded cross-correlation kernels built on im2col + GEMM.
//!
//! Column layout: row `c*9 + ky*3 + kx`, column `y*W + x` holds
//! `input[c, y+ky-1, x+kx-1]` (zero outside the image).

/// `c = alpha * a·b + beta * c` for row-major operands with explicit strides.
#[allow(clippy::too_many_arguments)]
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
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices covering every index reachable through the
    // given shapes and strides; `c` is dense row-major m×n.
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

pub(crate) fn im2col(input: &[f64], channels: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    debug_assert_eq!(cols.len(), channels * 9 * hw);
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(c * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of column gradients back onto the input plane (adjoint of `im2col`).
pub(crate) fn col2im_add(cols: &[f64], channels: usize, h: usize, w: usize, out: &mut [f64]) {
    let hw = h * w;
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(c * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub f: usize,
    pub h: usize,
    pub w: usize,
}

pub(crate) fn forward(dims: &ConvDims, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let ConvDims { n, c, f, h, w } = *dims;
    let hw = h * w;
    let j = c * 9;
    let mut out = vec![0.0; n * f * hw];
    let mut cols = vec![0.0; j * hw];
    for s in 0..n {
        im2col(&input[s * c * hw..(s + 1) * c * hw], c, h, w, &mut cols);
        let dst = &mut out[s * f * hw..(s + 1) * f * hw];
        for (fi, row) in dst.chunks_exact_mut(hw).enumerate() {
            row.fill(bias[fi]);
        }
        gemm(
            f,
            j,
            hw,
            kernel,
            (j as isize, 1),
            &cols,
            (hw as isize, 1),
            1.0,
            dst,
        );
    }
    out
}

/// Accumulates the requested gradients. Any of the output slots may be `None`
/// when the corresponding operand does not need a gradient.
pub(crate) fn backward(
    dims: &ConvDims,
    input: &[f64],
    kernel: &[f64],
    d_out: &[f64],
    mut d_input: Option<&mut [f64]>,
    mut d_kernel: Option<&mut [f64]>,
    mut d_bias: Option<&mut [f64]>,
) {
    let ConvDims { n, c, f, h, w } = *dims;
    let hw = h * w;
    let j = c * 9;
    let mut cols = vec![0.0; j * hw];
    let mut d_cols = vec![0.0; j * hw];
    for s in 0..n {
        let g = &d_out[s * f * hw..(s + 1) * f * hw];
        if let Some(db) = d_bias.as_deref_mut() {
            for (fi, row) in g.chunks_exact(hw).enumerate() {
                db[fi] += row.iter().sum::<f64>();
            }
        }
        if let Some(dk) = d_kernel.as_deref_mut() {
            im2col(&input[s * c * hw..(s + 1) * c * hw], c, h, w, &mut cols);
            // dK[f, j] += Σ_p g[f, p] · cols[j, p]
            gemm(
                f,
                hw,
                j,
                g,
                (hw as isize, 1),
                &cols,
                (1, hw as isize),
                1.0,
                dk,
            );
        }
        if let Some(di) = d_input.as_deref_mut() {
            // dcols[j, p] = Σ_f K[f, j] · g[f, p]
            gemm(
                j,
                f,
                hw,
                kernel,
                (1, j as isize),
                g,
                (hw as isize, 1),
                0.0,
                &mut d_cols,
            );
            col2im_add(&d_cols, c, h, w, &mut di[s * c * hw..(s + 1) * c * hw]);
        }
    }
}
