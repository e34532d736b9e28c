//! Raw loops behind the tape primitives. NCHW layout throughout.

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Option<Self> {
        let (n, cin, h, wd) = (x[0], x[1], x[2], x[3]);
        let (cout, k) = (w[0], w[2]);
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return None;
        }
        Some(Self {
            n,
            cin,
            h,
            w: wd,
            cout,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        })
    }

    /// Output columns `ow` whose input column `ow*stride + kx - pad` lies inside the image.
    #[inline]
    fn valid_range(&self, kx: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(s) };
        // need ow*s + kx - pad <= extent - 1
        let limit = extent + self.pad;
        let hi = if limit <= kx {
            0
        } else {
            ((limit - kx - 1) / s + 1).min(out_extent)
        };
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.cout * g.ho * g.wo];
    let s = g.stride;
    for n in 0..g.n {
        for co in 0..g.cout {
            let obase = (n * g.cout + co) * g.ho * g.wo;
            for ci in 0..g.cin {
                let xbase = (n * g.cin + ci) * g.h * g.w;
                for ky in 0..g.k {
                    let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
                    for kx in 0..g.k {
                        let wv = w[((co * g.cin + ci) * g.k + ky) * g.k + kx];
                        let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - g.pad;
                            let xrow = xbase + iy * g.w;
                            let orow = obase + oy * g.wo;
                            for ox in ox0..ox1 {
                                let ix = ox * s + kx - g.pad;
                                out[orow + ox] += wv * x[xrow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad wrt input, grad wrt weight).
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    need_x: bool,
    need_w: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut gx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
    let mut gw = if need_w { vec![0.0; w.len()] } else { Vec::new() };
    let s = g.stride;
    for n in 0..g.n {
        for co in 0..g.cout {
            let obase = (n * g.cout + co) * g.ho * g.wo;
            for ci in 0..g.cin {
                let xbase = (n * g.cin + ci) * g.h * g.w;
                for ky in 0..g.k {
                    let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
                    for kx in 0..g.k {
                        let widx = ((co * g.cin + ci) * g.k + ky) * g.k + kx;
                        let wv = w[widx];
                        let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - g.pad;
                            let xrow = xbase + iy * g.w;
                            let orow = obase + oy * g.wo;
                            for ox in ox0..ox1 {
                                let ix = ox * s + kx - g.pad;
                                let go = gout[orow + ox];
                                if need_x {
                                    gx[xrow + ix] += wv * go;
                                }
                                acc += x[xrow + ix] * go;
                            }
                        }
                        if need_w {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Per-channel mean and biased variance over (N, H, W).
pub(crate) fn channel_moments(x: &[f64], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            s += x[base..base + hw].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            v += x[base..base + hw].iter().map(|&t| (t - m) * (t - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

/// y = x · wᵀ + b with x [n, din], w [dout, din].
pub(crate) fn linear_forward(x: &[f64], w: &[f64], b: &[f64], n: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * dout];
    for i in 0..n {
        let xr = &x[i * din..(i + 1) * din];
        for o in 0..dout {
            let wr = &w[o * din..(o + 1) * din];
            out[i * dout + o] = b[o] + xr.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    out
}
