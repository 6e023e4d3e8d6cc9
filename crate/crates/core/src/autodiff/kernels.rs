//! Raw forward/backward kernels over flat slices. Shapes are validated by
//! the graph before any of these are called.

use crate::tensor::Scalar;

/// `c[m×n] = op(a) · op(b) + beta · c`, all row-major.
///
/// `a` is `m×k` (or `k×m` when `trans_a`), `b` is `k×n` (or `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    T::gemm_strided(m, k, n, a, rsa, csa, b, rsb, csb, beta, c);
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub cin: usize,
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
        self.cin * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1×1, stride 1, unpadded conv reads the input directly as its column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` lies inside `[0, w)`.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let off = kx as isize - g.pad as isize;
    let s = g.stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let last = g.w as isize - 1 - off;
    let hi = if last < 0 { 0 } else { ((last / s) as usize + 1).min(g.ow) };
    (lo.min(hi), hi)
}

/// Unfolds one image `[cin, h, w]` into `[cin·kh·kw, oh·ow]`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ol = g.out_len();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let (lo, hi) = valid_cols(g, kx);
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ol..(row + 1) * ol];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let d = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        d.fill(T::zero());
                        continue;
                    }
                    d[..lo].fill(T::zero());
                    d[hi..].fill(T::zero());
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let ix0 = (lo * g.stride + kx) - g.pad;
                    if g.stride == 1 {
                        d[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (v, s) in d[lo..hi].iter_mut().zip(src[ix0..].iter().step_by(g.stride)) {
                            *v = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `[cin, h, w]`.
pub fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ol = g.out_len();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ol..(row + 1) * ol];
                let ix0 = (lo * g.stride + kx) - g.pad;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if g.stride == 1 {
                        for (d, v) in dst[ix0..ix0 + hi - lo].iter_mut().zip(s) {
                            *d += *v;
                        }
                    } else {
                        for (d, v) in dst[ix0..].iter_mut().step_by(g.stride).zip(s) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}

/// `y[b] = W · cols(x[b]) + bias`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    batch: usize,
    cout: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let in_len = g.cin * g.h * g.w;
    let ol = g.out_len();
    let mut y = vec![T::zero(); batch * cout * ol];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * ol]
    };
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let yb = &mut y[b * cout * ol..(b + 1) * cout * ol];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        gemm(cout, g.patch_len(), ol, weight, false, src, false, T::zero(), yb);
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut yb[co * ol..(co + 1) * ol] {
                    *v += bv;
                }
            }
        }
    }
    y
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    batch: usize,
    cout: usize,
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> ConvGrads<T> {
    let in_len = g.cin * g.h * g.w;
    let ol = g.out_len();
    let pl = g.patch_len();
    let mut dx = want_dx.then(|| vec![T::zero(); batch * in_len]);
    let mut dw = want_dw.then(|| vec![T::zero(); cout * pl]);
    let mut db = want_db.then(|| vec![T::zero(); cout]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { pl * ol }];
    let mut dcols = vec![T::zero(); if want_dx && !g.is_pointwise() { pl * ol } else { 0 }];
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let dyb = &dy[b * cout * ol..(b + 1) * cout * ol];
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            // dW += dY · colsᵀ
            gemm(cout, ol, pl, dyb, false, src, true, T::one(), dw);
        }
        if let Some(db) = db.as_mut() {
            for (co, d) in db.iter_mut().enumerate() {
                *d += dyb[co * ol..(co + 1) * ol].iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm(pl, cout, ol, weight, true, dyb, false, T::zero(), dxb);
            } else {
                // dcols = Wᵀ · dY
                gemm(pl, cout, ol, weight, true, dyb, false, T::zero(), &mut dcols);
                col2im_add(&dcols, g, dxb);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let naive = |i: usize, j: usize| (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum::<f32>();
        let mut c = vec![0.0f32; m * n];
        gemm(m, k, n, &a, false, &b, false, 0.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                assert!((c[i * n + j] - naive(i, j)).abs() < 1e-5);
            }
        }
        // transpose both operands explicitly and ask gemm to undo it
        let at: Vec<f32> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let bt: Vec<f32> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut c2 = vec![0.0f32; m * n];
        gemm(m, k, n, &at, true, &bt, true, 0.0, &mut c2);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            cin: 2,
            h: 5,
            w: 4,
            kh: 3,
            kw: 2,
            stride: 2,
            pad: 1,
            oh: 3,
            ow: 3,
        };
        let x: Vec<f32> = (0..2 * 5 * 4).map(|i| (i as f32 * 0.7).sin()).collect();
        let c: Vec<f32> = (0..g.patch_len() * g.out_len())
            .map(|i| (i as f32 * 0.3).cos())
            .collect();
        let mut cols = vec![0.0f32; c.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let mut back = vec![0.0f32; x.len()];
        col2im_add(&c, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }
}
