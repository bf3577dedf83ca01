//! Raw slice kernels behind the tape primitives.

/// `out[n,m] = a[n,k] * b[k,m]`
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[n,k] = g[n,m] * b[k,m]^T`
pub fn matmul_a_bt(g: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `out[k,m] = a[n,k]^T * g[n,m]`
pub fn matmul_at_b(a: &[f64], g: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if input.len() != 4 || weight.len() != 4 || stride == 0 {
            return None;
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (o, ci, k, k2) = (weight[0], weight[1], weight[2], weight[3]);
        if ci != c || k != k2 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(Self {
            n,
            c,
            h,
            w,
            o,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    /// Visits every (input offset, output offset) pair touched by kernel tap
    /// `(ki, kj)` for one image/channel plane.
    #[inline]
    fn taps(&self, ki: usize, kj: usize, mut f: impl FnMut(usize, usize)) {
        for oh in 0..self.ho {
            let ih = oh * self.stride + ki;
            if ih < self.pad || ih - self.pad >= self.h {
                continue;
            }
            let ih = ih - self.pad;
            for ow in 0..self.wo {
                let iw = ow * self.stride + kj;
                if iw < self.pad || iw - self.pad >= self.w {
                    continue;
                }
                f(ih * self.w + iw - self.pad, oh * self.wo + ow);
            }
        }
    }
}

pub fn conv2d(x: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (in_plane, out_plane) = (g.h * g.w, g.ho * g.wo);
    let mut out = vec![0.0; g.n * g.o * out_plane];
    for n in 0..g.n {
        for o in 0..g.o {
            let obase = (n * g.o + o) * out_plane;
            for c in 0..g.c {
                let ibase = (n * g.c + c) * in_plane;
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let wv = wt[((o * g.c + c) * g.k + ki) * g.k + kj];
                        g.taps(ki, kj, |io, oo| out[obase + oo] += wv * x[ibase + io]);
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_grad_input(grad: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (in_plane, out_plane) = (g.h * g.w, g.ho * g.wo);
    let mut gx = vec![0.0; g.n * g.c * in_plane];
    for n in 0..g.n {
        for o in 0..g.o {
            let obase = (n * g.o + o) * out_plane;
            for c in 0..g.c {
                let ibase = (n * g.c + c) * in_plane;
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let wv = wt[((o * g.c + c) * g.k + ki) * g.k + kj];
                        g.taps(ki, kj, |io, oo| gx[ibase + io] += wv * grad[obase + oo]);
                    }
                }
            }
        }
    }
    gx
}

pub fn conv2d_grad_weight(grad: &[f64], x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (in_plane, out_plane) = (g.h * g.w, g.ho * g.wo);
    let mut gw = vec![0.0; g.o * g.c * g.k * g.k];
    for n in 0..g.n {
        for o in 0..g.o {
            let obase = (n * g.o + o) * out_plane;
            for c in 0..g.c {
                let ibase = (n * g.c + c) * in_plane;
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let mut acc = 0.0;
                        g.taps(ki, kj, |io, oo| acc += x[ibase + io] * grad[obase + oo]);
                        gw[((o * g.c + c) * g.k + ki) * g.k + kj] += acc;
                    }
                }
            }
        }
    }
    gw
}

/// Group normalization statistics for an `(n, c, spatial)` layout. Returns
/// the normalized values and per-(sample, group) reciprocal std.
pub fn group_norm_stats(
    x: &[f64],
    n: usize,
    c: usize,
    spatial: usize,
    groups: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let per_group = (c / groups) * spatial;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n * groups];
    for s in 0..n {
        for gi in 0..groups {
            let base = s * c * spatial + gi * per_group;
            let seg = &x[base..base + per_group];
            let mean = seg.iter().sum::<f64>() / per_group as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_group as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[s * groups + gi] = r;
            for (o, &v) in xhat[base..base + per_group].iter_mut().zip(seg) {
                *o = (v - mean) * r;
            }
        }
    }
    (xhat, rstd)
}

/// Largest divisor of `channels` that does not exceed `min(32, channels)`.
pub fn default_groups(channels: usize) -> usize {
    (1..=channels.min(32))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        assert_eq!(c[0], -2.0 * 0.0 + -1.0 * 2.0 + 0.0 * 4.0);
        // d/dA of sum(C) = ones * B^T
        let ones = vec![1.0; 8];
        let ga = matmul_a_bt(&ones, &b, 2, 3, 4);
        assert_eq!(ga[0], b[0] + b[1] + b[2] + b[3]);
        let gb = matmul_at_b(&a, &ones, 2, 3, 4);
        assert_eq!(gb[0], a[0] + a[3]);
    }

    #[test]
    fn groups_divide_channels() {
        assert_eq!(default_groups(64), 32);
        assert_eq!(default_groups(16), 16);
        assert_eq!(default_groups(48), 24);
        assert_eq!(default_groups(7), 7);
        assert_eq!(default_groups(33), 11);
    }
}
