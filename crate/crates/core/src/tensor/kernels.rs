//! Raw loops behind the graph ops. Every reduction runs in a fixed order so
//! results are reproducible bit-for-bit.

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_bt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0f32;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_at(a: &[f32], b: &[f32], k: usize, m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Output columns `lo..hi` whose tap `k` lands inside `0..size`.
    fn valid(&self, k: usize, size: usize, out: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(k).div_ceil(self.stride);
        let hi = if size + self.pad > k { ((size + self.pad - k - 1) / self.stride + 1).min(out) } else { 0 };
        (lo, hi.max(lo))
    }

    #[inline]
    fn src(&self, o: usize, k: usize, size: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
    }
}

/// Cross-correlation of `x[C_in×H×W]` with `w[C_out×C_in×kh×kw]`.
pub fn conv2d(x: &[f32], w: &[f32], g: ConvGeom) -> Vec<f32> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0f32; g.c_out * oh * ow];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = w[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    let (lo, hi) = g.valid(kx, g.w, ow);
                    for oy in 0..oh {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        let xrow = &x[(ci * g.h + iy) * g.w..(ci * g.h + iy + 1) * g.w];
                        let orow = &mut out[(co * oh + oy) * ow..(co * oh + oy + 1) * ow];
                        if g.stride == 1 && lo < hi {
                            let first = lo + kx - g.pad;
                            for (o, &xv) in orow[lo..hi].iter_mut().zip(&xrow[first..first + hi - lo]) {
                                *o += wv * xv;
                            }
                        } else {
                            for ox in lo..hi {
                                orow[ox] += wv * xrow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of `conv2d` with respect to input and weights.
pub fn conv2d_backward(x: &[f32], w: &[f32], dout: &[f32], g: ConvGeom) -> (Vec<f32>, Vec<f32>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut dx = vec![0.0f32; x.len()];
    let mut dw = vec![0.0f32; w.len()];
    for co in 0..g.c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let d = dout[(co * oh + oy) * ow + ox];
                if d == 0.0 {
                    continue;
                }
                for ci in 0..g.c_in {
                    for ky in 0..g.kh {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        for kx in 0..g.kw {
                            let Some(ix) = g.src(ox, kx, g.w) else { continue };
                            let xi = (ci * g.h + iy) * g.w + ix;
                            let wi = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                            dx[xi] += w[wi] * d;
                            dw[wi] += x[xi] * d;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
