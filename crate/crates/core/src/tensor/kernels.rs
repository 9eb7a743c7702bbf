//! Plain loops over row-major slices. Summation order is fixed so results
//! are bit-identical from run to run.

/// `c[m×p] += a[m×k] · b[k×p]`
pub(crate) fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let c_row = &mut c[i * p..(i + 1) * p];
        let a_row = &a[i * k..(i + 1) * k];
        let mut kk = 0;
        // four rows of b per pass over c_row
        while kk + 4 <= k {
            let (a0, a1, a2, a3) = (a_row[kk], a_row[kk + 1], a_row[kk + 2], a_row[kk + 3]);
            let b0 = &b[kk * p..(kk + 1) * p];
            let b1 = &b[(kk + 1) * p..(kk + 2) * p];
            let b2 = &b[(kk + 2) * p..(kk + 3) * p];
            let b3 = &b[(kk + 3) * p..(kk + 4) * p];
            for j in 0..p {
                c_row[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            kk += 4;
        }
        for kk in kk..k {
            let av = a_row[kk];
            let b_row = &b[kk * p..(kk + 1) * p];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

pub(crate) fn mm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for kk in 0..k {
        let b_row = &b[kk * p..(kk + 1) * p];
        for i in 0..m {
            let av = a[kk * m + i];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * p..(i + 1) * p];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×p] += a · bᵀ` where `a` is `[m×k]` and `b` is stored `[p×k]`.
pub(crate) fn mm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            c[i * p + j] += s;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold one `C×H×W` image into columns `off..off + oh·ow` of a
/// `[C·kh·kw × ld]` column matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64], ld: usize, off: usize) {
    let ol = g.out_len();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ld + off..row * ld + off + ol];
                let (lo, hi) = valid_range(kj, g.pad, g.stride, g.w, g.ow);
                for oi in 0..g.oh {
                    let d = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h || lo >= hi {
                        d.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    d[..lo].fill(0.0);
                    d[hi..].fill(0.0);
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        d[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (o, v) in d[lo..hi].iter_mut().enumerate() {
                            *v = src[first + o * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose input column `o·stride + k − pad` lies in
/// `0..w`.
fn valid_range(k: usize, pad: usize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if w + pad > k { ((w - 1 + pad - k) / stride + 1).min(ow) } else { 0 };
    (lo.min(hi), hi)
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image buffer.
pub(crate) fn col2im_acc(cols: &[f64], g: &ConvGeom, dx: &mut [f64], ld: usize, off: usize) {
    let ol = g.out_len();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ld + off..row * ld + off + ol];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj as usize >= g.w {
                            continue;
                        }
                        dx[(ci * g.h + ii as usize) * g.w + jj as usize] += src[oi * g.ow + oj];
                    }
                }
            }
        }
    }
}
