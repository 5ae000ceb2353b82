//! Direct 3×3 cross-correlation kernels over `[N, C, H, W]` buffers.

pub const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub filters: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - KERNEL) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - KERNEL) / self.stride + 1
    }

    /// Output positions `o` in `lo..hi` whose input tap `o*stride + k - padding`
    /// lands inside `0..in_len`.
    fn valid(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        if in_len + p <= k {
            return (0, 0);
        }
        let hi = ((in_len - 1 + p - k) / s + 1).min(out_len);
        (lo.min(hi), hi)
    }
}

pub fn forward(g: &ConvGeom, input: &[f64], kernels: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, w) = (g.height, g.width);
    let mut out = vec![0.0; g.batch * g.filters * oh * ow];
    for n in 0..g.batch {
        for f in 0..g.filters {
            let out_nf = &mut out[(n * g.filters + f) * oh * ow..][..oh * ow];
            for c in 0..g.in_channels {
                let in_nc = &input[(n * g.in_channels + c) * h * w..][..h * w];
                let w_fc = &kernels[(f * g.in_channels + c) * 9..][..9];
                for ky in 0..KERNEL {
                    let (oy_lo, oy_hi) = g.valid(ky, h, oh);
                    for kx in 0..KERNEL {
                        let (ox_lo, ox_hi) = g.valid(kx, w, ow);
                        let wv = w_fc[ky * KERNEL + kx];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let row_in = &in_nc[iy * w..][..w];
                            let row_out = &mut out_nf[oy * ow..][..ow];
                            if g.stride == 1 {
                                let ix0 = ox_lo + kx - g.padding;
                                let src = &row_in[ix0..ix0 + (ox_hi - ox_lo)];
                                for (o, &x) in row_out[ox_lo..ox_hi].iter_mut().zip(src) {
                                    *o += wv * x;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    row_out[ox] += wv * row_in[ox * g.stride + kx - g.padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_kernels)` for upstream gradient `grad_out`.
#[allow(clippy::needless_range_loop)]
pub fn backward(
    g: &ConvGeom,
    input: &[f64],
    kernels: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_kernels: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, w) = (g.height, g.width);
    let mut d_in = want_input.then(|| vec![0.0; input.len()]);
    let mut d_k = want_kernels.then(|| vec![0.0; kernels.len()]);
    for n in 0..g.batch {
        for f in 0..g.filters {
            let g_nf = &grad_out[(n * g.filters + f) * oh * ow..][..oh * ow];
            for c in 0..g.in_channels {
                let in_off = (n * g.in_channels + c) * h * w;
                let in_nc = &input[in_off..][..h * w];
                let k_off = (f * g.in_channels + c) * 9;
                for ky in 0..KERNEL {
                    let (oy_lo, oy_hi) = g.valid(ky, h, oh);
                    for kx in 0..KERNEL {
                        let (ox_lo, ox_hi) = g.valid(kx, w, ow);
                        let wv = kernels[k_off + ky * KERNEL + kx];
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let g_row = &g_nf[oy * ow..][..ow];
                            for ox in ox_lo..ox_hi {
                                let ix = ox * g.stride + kx - g.padding;
                                let go = g_row[ox];
                                if let Some(d) = d_in.as_mut() {
                                    d[in_off + iy * w + ix] += wv * go;
                                }
                                acc += go * in_nc[iy * w + ix];
                            }
                        }
                        if let Some(d) = d_k.as_mut() {
                            d[k_off + ky * KERNEL + kx] += acc;
                        }
                    }
                }
            }
        }
    }
    (d_in, d_k)
}
