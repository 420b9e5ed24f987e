//! Raw numeric kernels shared by forward and backward rules.
//!
//! Image tensors are laid out NHWC. All kernels write into caller-provided or
//! freshly allocated buffers and never touch the tape.

/// `c = a · b (+ beta · c)` with logical shapes `a: m×k`, `b: k×n`.
///
/// `a_t`/`b_t` mean the operand is stored transposed (`k×m` / `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths are checked above against the logical shapes,
    // and the strides describe exactly those row-major layouts.
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

/// Geometry of a stride-1 square-kernel convolution over NHWC input.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_ch: usize,
    pub kernel: usize,
    pub out_ch: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_ch
    }

    pub fn out_pixels(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Unfolds NHWC input into a `(N·Ho·Wo) × (K·K·C)` patch matrix.
pub fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let plen = g.patch_len();
    let mut cols = vec![0.0; g.out_pixels() * plen];
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((n * g.out_h + oy) * g.out_w + ox) * plen;
                for ky in 0..g.kernel {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = ox as isize + kx as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = ((n * g.height + iy as usize) * g.width + ix as usize) * g.in_ch;
                        let dst = row + (ky * g.kernel + kx) * g.in_ch;
                        cols[dst..dst + g.in_ch].copy_from_slice(&x[src..src + g.in_ch]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the input.
pub fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let plen = g.patch_len();
    let mut x = vec![0.0; g.batch * g.height * g.width * g.in_ch];
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((n * g.out_h + oy) * g.out_w + ox) * plen;
                for ky in 0..g.kernel {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = ox as isize + kx as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = ((n * g.height + iy as usize) * g.width + ix as usize) * g.in_ch;
                        let src = row + (ky * g.kernel + kx) * g.in_ch;
                        for c in 0..g.in_ch {
                            x[dst + c] += cols[src + c];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2×2 stride-2 max pooling; returns pooled values and the flat argmax index
/// (into the input) for every output element.
pub fn max_pool2(x: &[f64], n: usize, h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * oh * ow * c];
    let mut arg = vec![0; out.len()];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                    let o = ((b * oh + oy) * ow + ox) * c + ch;
                    out[o] = best;
                    arg[o] = best_i;
                }
            }
        }
    }
    (out, arg)
}

/// Source row/column index for nearest-neighbour resizing `src → dst`.
pub fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
    (i * src / dst).min(src - 1)
}

/// Bilinear sampling taps for output index `i` (half-pixel centres, edge
/// clamped): `(lo, hi, weight_of_hi)`.
pub fn bilinear_taps(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src - 1);
    (lo, hi, pos - lo as f64)
}

/// Calls `f(src_index, dst_index, weight)` for every linear tap of a resize
/// from `(h, w)` to `(oh, ow)` over an NHWC batch. Both resize modes are linear
/// maps, so the same enumeration drives forward and adjoint passes.
#[allow(clippy::too_many_arguments)]
pub fn for_each_resize_tap(
    bilinear: bool,
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    mut f: impl FnMut(usize, usize, f64),
) {
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = ((b * oh + oy) * ow + ox) * c;
                if bilinear {
                    let (y0, y1, wy) = bilinear_taps(oy, h, oh);
                    let (x0, x1, wx) = bilinear_taps(ox, w, ow);
                    let taps = [
                        (y0, x0, (1.0 - wy) * (1.0 - wx)),
                        (y0, x1, (1.0 - wy) * wx),
                        (y1, x0, wy * (1.0 - wx)),
                        (y1, x1, wy * wx),
                    ];
                    for (sy, sx, wt) in taps {
                        if wt == 0.0 {
                            continue;
                        }
                        let src = ((b * h + sy) * w + sx) * c;
                        for ch in 0..c {
                            f(src + ch, dst + ch, wt);
                        }
                    }
                } else {
                    let sy = nearest_index(oy, h, oh);
                    let sx = nearest_index(ox, w, ow);
                    let src = ((b * h + sy) * w + sx) * c;
                    for ch in 0..c {
                        f(src + ch, dst + ch, 1.0);
                    }
                }
            }
        }
    }
}

/// Copies an `h×w` window at `(top, left)` of each `H×W` image into / out of a
/// larger canvas. `into_canvas = true` pads (small → big); `false` crops.
#[allow(clippy::too_many_arguments)]
pub fn window_copy(
    small: &mut [f64],
    big: &mut [f64],
    n: usize,
    big_h: usize,
    big_w: usize,
    c: usize,
    top: usize,
    left: usize,
    h: usize,
    w: usize,
    into_canvas: bool,
) {
    for b in 0..n {
        for y in 0..h {
            let s = ((b * h + y) * w) * c;
            let d = ((b * big_h + top + y) * big_w + left) * c;
            if into_canvas {
                big[d..d + w * c].copy_from_slice(&small[s..s + w * c]);
            } else {
                small[s..s + w * c].copy_from_slice(&big[d..d + w * c]);
            }
        }
    }
}
