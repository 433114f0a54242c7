//! Dense math kernels behind the graph ops. All loops are sequential and
//! fixed-order, so every result is bit-reproducible regardless of caller
//! threading.

use crate::scalar::Scalar;

/// out[m,n] += a[m,k] @ b[k,n]
pub fn mm_ab<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + av * b_row[j];
            }
        }
    }
}

/// out[m,n] += a[m,k] @ transpose(b[n,k])
pub fn mm_abt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for p in 0..k {
                acc = acc + a_row[p] * b_row[p];
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// out[m,n] += transpose(a[k,m]) @ b[k,n]
pub fn mm_atb<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == S::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + av * b_row[j];
            }
        }
    }
}

/// Output extent of a conv/pool dim: floor((in + 2*pad - k)/stride) + 1.
pub fn conv_out_extent(input: usize, pad: usize, kernel: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfold one CHW image into a (c*k*k) x (h_out*w_out) column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<S: Scalar>(
    img: &[S],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    col: &mut [S],
) {
    debug_assert_eq!(img.len(), c * h * w);
    debug_assert_eq!(col.len(), c * kernel * kernel * h_out * w_out);
    let plane = h_out * w_out;
    for ci in 0..c {
        let img_plane = &img[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                let col_row = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..h_out {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut col_row[oy * w_out..(oy + 1) * w_out];
                    if iy < 0 || iy >= h as isize {
                        for v in dst.iter_mut() {
                            *v = S::zero();
                        }
                        continue;
                    }
                    let src_row = &img_plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..w_out {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        dst[ox] = if ix < 0 || ix >= w as isize {
                            S::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold a column-matrix gradient back onto the CHW image gradient
/// (scatter-add, the adjoint of `im2col`).
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<S: Scalar>(
    col: &[S],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    img_grad: &mut [S],
) {
    debug_assert_eq!(img_grad.len(), c * h * w);
    let plane = h_out * w_out;
    for ci in 0..c {
        let img_plane = &mut img_grad[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                let col_row = &col[row * plane..(row + 1) * plane];
                for oy in 0..h_out {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &col_row[oy * w_out..(oy + 1) * w_out];
                    let dst = &mut img_plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..w_out {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-wise softmax with max subtraction; `x` and `out` are m x n.
pub fn softmax_rows<S: Scalar>(x: &[S], m: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let out_row = &mut out[i * n..(i + 1) * n];
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut denom = S::zero();
        for (o, &v) in out_row.iter_mut().zip(row.iter()) {
            let e = (v - max).exp();
            *o = e;
            denom = denom + e;
        }
        for o in out_row.iter_mut() {
            *o = *o / denom;
        }
    }
}

/// FNV-1a 64-bit over raw bytes; used for activation signatures and
/// checkpoint integrity checksums.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

pub fn fnv1a64_extend(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_on_small_case() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut out = [0.0f64; 4];
        mm_ab(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);

        // a @ b == a @ transpose(transpose(b))
        let bt = [5.0f64, 7.0, 6.0, 8.0];
        let mut out2 = [0.0f64; 4];
        mm_abt(&a, &bt, 2, 2, 2, &mut out2);
        assert_eq!(out, out2);

        let at = [1.0f64, 3.0, 2.0, 4.0];
        let mut out3 = [0.0f64; 4];
        mm_atb(&at, &b, 2, 2, 2, &mut out3);
        assert_eq!(out, out3);
    }

    #[test]
    fn conv_extent_formula() {
        // floor((in + 2p - k)/s) + 1 across a config grid
        for input in 1..12usize {
            for pad in 0..3usize {
                for kernel in 1..5usize {
                    for stride in 1..4usize {
                        let got = conv_out_extent(input, pad, kernel, stride);
                        let padded = input + 2 * pad;
                        if padded < kernel {
                            assert_eq!(got, None);
                        } else {
                            assert_eq!(got, Some((padded - kernel) / stride + 1));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random-ish x and y
        let (c, h, w, k, s, p) = (2usize, 4usize, 5usize, 3usize, 2usize, 1usize);
        let h_out = conv_out_extent(h, p, k, s).unwrap();
        let w_out = conv_out_extent(w, p, k, s).unwrap();
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c * k * k * h_out * w_out)
            .map(|i| (i as f64 * 0.91).cos())
            .collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, c, h, w, k, s, p, h_out, w_out, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut xg = vec![0.0; x.len()];
        col2im_add(&y, c, h, w, k, s, p, h_out, w_out, &mut xg);
        let rhs: f64 = x.iter().zip(&xg).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn softmax_rows_normalizes_and_is_stable() {
        let x = [700.0f64, 699.0, -700.0, 1.0, 1.0, 1.0];
        let mut out = [0.0f64; 6];
        softmax_rows(&x, 2, 3, &mut out);
        for i in 0..2 {
            let s: f64 = out[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[3] - 1.0 / 3.0).abs() < 1e-12);
    }
}
