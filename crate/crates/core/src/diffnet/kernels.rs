//! Direct loops for the parameterized layers. Activations are stored
//! channel-major: `[channels, height, width]`.

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

pub(crate) fn dense_forward(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, y) in out.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        *y = b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

pub(crate) fn dense_backward(
    w: &[f64],
    x: &[f64],
    gy: &[f64],
    gx: &mut [f64],
    param_grads: Option<(&mut [f64], &mut [f64])>,
) {
    let n_in = x.len();
    gx.iter_mut().for_each(|v| *v = 0.0);
    for (o, &g) in gy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &w[o * n_in..(o + 1) * n_in];
        for (acc, &wv) in gx.iter_mut().zip(row) {
            *acc += wv * g;
        }
    }
    if let Some((gw, gb)) = param_grads {
        for (o, &g) in gy.iter().enumerate() {
            gb[o] += g;
            let row = &mut gw[o * n_in..(o + 1) * n_in];
            for (acc, &xv) in row.iter_mut().zip(x) {
                *acc += g * xv;
            }
        }
    }
}

/// Positions `i` in `0..n` for which `i * stride + k - padding` lands in
/// `0..extent`. The same relation maps transposed-conv inputs to outputs and
/// strided-conv outputs to inputs.
#[inline]
fn tap_range(k: usize, g: &ConvGeom, n: usize, extent: usize) -> std::ops::Range<usize> {
    let s = g.stride;
    let lo = g.padding.saturating_sub(k).div_ceil(s);
    let hi = (extent + g.padding).saturating_sub(k).div_ceil(s).min(n);
    lo..hi.max(lo)
}

#[inline]
fn tap(i: usize, k: usize, g: &ConvGeom) -> usize {
    i * g.stride + k - g.padding
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac
        .remainder()
        .iter()
        .zip(bc.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (acc, &v) in y.iter_mut().zip(x) {
        *acc += alpha * v;
    }
}

/// Calls `f(position, tap_index, target)` for every kernel tap that
/// links spatial position `position` of the `n_hw` grid to `target` in the
/// `extent_hw` grid.
#[inline]
fn for_each_tap(
    g: &ConvGeom,
    n_hw: (usize, usize),
    extent_hw: (usize, usize),
    mut f: impl FnMut(usize, usize, usize),
) {
    let k = g.kernel;
    for ky in 0..k {
        let ys = tap_range(ky, g, n_hw.0, extent_hw.0);
        for kx in 0..k {
            let xs = tap_range(kx, g, n_hw.1, extent_hw.1);
            for y in ys.clone() {
                let ty = tap(y, ky, g);
                for x in xs.clone() {
                    f(
                        y * n_hw.1 + x,
                        ky * k + kx,
                        ty * extent_hw.1 + tap(x, kx, g),
                    );
                }
            }
        }
    }
}

/// Weight layout `[in_channels, out_channels, k, k]`. Each input position
/// produces a row of `out_channels * k * k` contributions, which are then
/// scattered onto the output grid.
pub(crate) fn tconv_forward(g: &ConvGeom, w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let (ih, iw) = g.in_hw;
    let (oh, ow) = g.out_hw;
    let positions = ih * iw;
    let kk = g.kernel * g.kernel;
    let width = g.out_channels * kk;
    let mut cols = vec![0.0; positions * width];
    for ic in 0..g.in_channels {
        let wrow = &w[ic * width..(ic + 1) * width];
        let xin = &x[ic * positions..(ic + 1) * positions];
        for (p, col) in cols.chunks_exact_mut(width).enumerate() {
            axpy(xin[p], wrow, col);
        }
    }
    for (oc, &bias) in b.iter().enumerate() {
        out[oc * oh * ow..(oc + 1) * oh * ow].fill(bias);
    }
    for_each_tap(g, g.in_hw, g.out_hw, |p, t, o| {
        let col = &cols[p * width..(p + 1) * width];
        for oc in 0..g.out_channels {
            out[oc * oh * ow + o] += col[oc * kk + t];
        }
    });
}

pub(crate) fn tconv_backward(
    g: &ConvGeom,
    w: &[f64],
    x: &[f64],
    gy: &[f64],
    gx: &mut [f64],
    param_grads: Option<(&mut [f64], &mut [f64])>,
) {
    let (ih, iw) = g.in_hw;
    let (oh, ow) = g.out_hw;
    let positions = ih * iw;
    let kk = g.kernel * g.kernel;
    let width = g.out_channels * kk;
    let mut cols = vec![0.0; positions * width];
    for_each_tap(g, g.in_hw, g.out_hw, |p, t, o| {
        let col = &mut cols[p * width..(p + 1) * width];
        for oc in 0..g.out_channels {
            col[oc * kk + t] = gy[oc * oh * ow + o];
        }
    });
    for ic in 0..g.in_channels {
        let wrow = &w[ic * width..(ic + 1) * width];
        let gxin = &mut gx[ic * positions..(ic + 1) * positions];
        for (acc, col) in gxin.iter_mut().zip(cols.chunks_exact(width)) {
            *acc = dot(wrow, col);
        }
    }
    if let Some((gw, gb)) = param_grads {
        for ic in 0..g.in_channels {
            let gwrow = &mut gw[ic * width..(ic + 1) * width];
            let xin = &x[ic * positions..(ic + 1) * positions];
            for (&xv, col) in xin.iter().zip(cols.chunks_exact(width)) {
                axpy(xv, col, gwrow);
            }
        }
        for (oc, acc) in gb.iter_mut().enumerate() {
            *acc += gy[oc * oh * ow..(oc + 1) * oh * ow].iter().sum::<f64>();
        }
    }
}

/// Gathers input patches into rows of `in_channels * k * k`, one per output
/// position.
fn conv_patches(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let (ih, iw) = g.in_hw;
    let (oh, ow) = g.out_hw;
    let kk = g.kernel * g.kernel;
    let width = g.in_channels * kk;
    let mut patches = vec![0.0; oh * ow * width];
    for_each_tap(g, g.out_hw, g.in_hw, |q, t, i| {
        let row = &mut patches[q * width..(q + 1) * width];
        for ic in 0..g.in_channels {
            row[ic * kk + t] = x[ic * ih * iw + i];
        }
    });
    patches
}

/// Weight layout `[out_channels, in_channels, k, k]`.
pub(crate) fn conv_forward(g: &ConvGeom, w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let (oh, ow) = g.out_hw;
    let width = g.in_channels * g.kernel * g.kernel;
    let patches = conv_patches(g, x);
    for oc in 0..g.out_channels {
        let wrow = &w[oc * width..(oc + 1) * width];
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        for (acc, patch) in plane.iter_mut().zip(patches.chunks_exact(width)) {
            *acc = b[oc] + dot(wrow, patch);
        }
    }
}

pub(crate) fn conv_backward(
    g: &ConvGeom,
    w: &[f64],
    x: &[f64],
    gy: &[f64],
    gx: &mut [f64],
    param_grads: Option<(&mut [f64], &mut [f64])>,
) {
    let (ih, iw) = g.in_hw;
    let (oh, ow) = g.out_hw;
    let kk = g.kernel * g.kernel;
    let width = g.in_channels * kk;
    let mut gpatches = vec![0.0; oh * ow * width];
    for oc in 0..g.out_channels {
        let wrow = &w[oc * width..(oc + 1) * width];
        let plane = &gy[oc * oh * ow..(oc + 1) * oh * ow];
        for (&gv, row) in plane.iter().zip(gpatches.chunks_exact_mut(width)) {
            axpy(gv, wrow, row);
        }
    }
    gx.iter_mut().for_each(|v| *v = 0.0);
    for_each_tap(g, g.out_hw, g.in_hw, |q, t, i| {
        let row = &gpatches[q * width..(q + 1) * width];
        for ic in 0..g.in_channels {
            gx[ic * ih * iw + i] += row[ic * kk + t];
        }
    });
    if let Some((gw, gb)) = param_grads {
        let patches = conv_patches(g, x);
        for oc in 0..g.out_channels {
            let gwrow = &mut gw[oc * width..(oc + 1) * width];
            let plane = &gy[oc * oh * ow..(oc + 1) * oh * ow];
            for (&gv, patch) in plane.iter().zip(patches.chunks_exact(width)) {
                axpy(gv, patch, gwrow);
            }
            gb[oc] += plane.iter().sum::<f64>();
        }
    }
}
