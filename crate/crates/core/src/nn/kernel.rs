//! Dense-layer kernels.
//!
//! Each output element is accumulated with fused multiply-adds in a fixed
//! order that does not depend on how rows or columns are blocked, so the tiled
//! paths, the tails and a one-row call all give the same bits. Hardware FMA is
//! used when the CPU has it; the portable path calls the correctly rounded
//! software `fma`, which produces identical results, only slower.

macro_rules! dispatch {
    ($name:ident ( $($arg:expr),* )) => {{
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                // SAFETY: the required features were detected at runtime.
                return unsafe { fast::$name($($arg),*) };
            }
        }
        generic::$name($($arg),*)
    }};
}

/// `z[r, o] += sum_i h[r, i] * w[i, o]`, `i` ascending.
pub fn gemm_acc(h: &[f64], rows: usize, n_in: usize, w: &[f64], n_out: usize, z: &mut [f64]) {
    debug_assert!(h.len() >= rows * n_in && w.len() >= n_in * n_out && z.len() >= rows * n_out);
    dispatch!(gemm_acc(h, rows, n_in, w, n_out, z))
}

/// `g[i, o] += sum_r h[r, i] * dz[r, o]`, `r` ascending.
pub fn gemm_tn_acc(h: &[f64], rows: usize, n_in: usize, dz: &[f64], n_out: usize, g: &mut [f64]) {
    debug_assert!(h.len() >= rows * n_in && dz.len() >= rows * n_out && g.len() >= n_in * n_out);
    dispatch!(gemm_tn_acc(h, rows, n_in, dz, n_out, g))
}

/// `dh[r, i] = sum_o dz[r, o] * w[i, o]` (overwrites `dh`), `o` ascending.
/// `wt` is scratch for the transposed weights.
pub fn gemm_nt(dz: &[f64], rows: usize, n_out: usize, w: &[f64], n_in: usize, wt: &mut Vec<f64>, dh: &mut [f64]) {
    transpose(w, n_in, n_out, wt);
    dh[..rows * n_in].fill(0.0);
    gemm_acc(dz, rows, n_out, wt, n_in, dh);
}

/// `[n][m]` row-major into `[m][n]`.
pub fn transpose(a: &[f64], n: usize, m: usize, out: &mut Vec<f64>) {
    out.clear();
    out.resize(n * m, 0.0);
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
}

/// `out[i] = 1 / (1 + exp(-z[i]))`.
pub fn sigmoid_slice(z: &[f64], out: &mut [f64]) {
    assert_eq!(z.len(), out.len());
    dispatch!(sigmoid_slice(z, out))
}

macro_rules! kernels {
    ($($attr:meta)?; $($unsafety:ident)?) => {
        $(#[$attr])?
        pub $($unsafety)? fn gemm_acc(h: &[f64], rows: usize, n_in: usize, w: &[f64], n_out: usize, z: &mut [f64]) {
            let mut r = 0;
            while r + 4 <= rows {
                acc_rows::<4>(h, r, n_in, w, n_out, z);
                r += 4;
            }
            while r < rows {
                acc_rows::<1>(h, r, n_in, w, n_out, z);
                r += 1;
            }
        }

        $(#[$attr])?
        pub $($unsafety)? fn gemm_tn_acc(h: &[f64], rows: usize, n_in: usize, dz: &[f64], n_out: usize, g: &mut [f64]) {
            let mut i = 0;
            while i + 4 <= n_in {
                tn_cols::<4>(h, rows, n_in, i, dz, n_out, g);
                i += 4;
            }
            while i < n_in {
                tn_cols::<1>(h, rows, n_in, i, dz, n_out, g);
                i += 1;
            }
        }

        $(#[$attr])?
        pub $($unsafety)? fn sigmoid_slice(z: &[f64], out: &mut [f64]) {
            for (o, &v) in out.iter_mut().zip(z) {
                *o = 1.0 / (1.0 + super::exp_poly(-v));
            }
        }

        #[inline(always)]
        fn acc_rows<const R: usize>(h: &[f64], r0: usize, n_in: usize, w: &[f64], n_out: usize, z: &mut [f64]) {
            let hs: [&[f64]; R] = std::array::from_fn(|k| &h[(r0 + k) * n_in..(r0 + k + 1) * n_in]);
            let mut o = 0;
            while o + 8 <= n_out {
                let mut acc = [[0.0f64; 8]; R];
                for k in 0..R {
                    acc[k].copy_from_slice(&z[(r0 + k) * n_out + o..(r0 + k) * n_out + o + 8]);
                }
                for i in 0..n_in {
                    let wv: &[f64; 8] = w[i * n_out + o..i * n_out + o + 8].try_into().unwrap();
                    for k in 0..R {
                        let hv = hs[k][i];
                        for j in 0..8 {
                            acc[k][j] = hv.mul_add(wv[j], acc[k][j]);
                        }
                    }
                }
                for k in 0..R {
                    z[(r0 + k) * n_out + o..(r0 + k) * n_out + o + 8].copy_from_slice(&acc[k]);
                }
                o += 8;
            }
            for k in 0..R {
                for oo in o..n_out {
                    let mut a = z[(r0 + k) * n_out + oo];
                    for i in 0..n_in {
                        a = hs[k][i].mul_add(w[i * n_out + oo], a);
                    }
                    z[(r0 + k) * n_out + oo] = a;
                }
            }
        }

        #[inline(always)]
        fn tn_cols<const C: usize>(h: &[f64], rows: usize, n_in: usize, i0: usize, dz: &[f64], n_out: usize, g: &mut [f64]) {
            let mut o = 0;
            while o + 8 <= n_out {
                let mut acc = [[0.0f64; 8]; C];
                for k in 0..C {
                    acc[k].copy_from_slice(&g[(i0 + k) * n_out + o..(i0 + k) * n_out + o + 8]);
                }
                for r in 0..rows {
                    let dv: &[f64; 8] = dz[r * n_out + o..r * n_out + o + 8].try_into().unwrap();
                    let hrow = &h[r * n_in + i0..r * n_in + i0 + C];
                    for k in 0..C {
                        let hv = hrow[k];
                        for j in 0..8 {
                            acc[k][j] = hv.mul_add(dv[j], acc[k][j]);
                        }
                    }
                }
                for k in 0..C {
                    g[(i0 + k) * n_out + o..(i0 + k) * n_out + o + 8].copy_from_slice(&acc[k]);
                }
                o += 8;
            }
            for k in 0..C {
                for oo in o..n_out {
                    let mut a = g[(i0 + k) * n_out + oo];
                    for r in 0..rows {
                        a = h[r * n_in + i0 + k].mul_add(dz[r * n_out + oo], a);
                    }
                    g[(i0 + k) * n_out + oo] = a;
                }
            }
        }

    };
}

/// `exp(x)` by range reduction `x = n ln2 + r`, `|r| <= ln2 / 2`, and a
/// degree-13 Taylor polynomial for `e^r`. Branch-free so it vectorizes; within
/// a few ulp of the libm value. The argument is clamped to `[-708, 709]`.
#[inline(always)]
pub(crate) fn exp_poly(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const SHIFTER: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    let x = x.clamp(-708.0, 709.0);
    let shifted = x * LOG2E + SHIFTER;
    let n = shifted - SHIFTER;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let mut p: f64 = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p.mul_add(r, c);
    }
    // 2^n from the low mantissa bits of `shifted`, which hold n exactly
    let n_bits = shifted.to_bits().wrapping_sub(SHIFTER.to_bits());
    let scale = f64::from_bits(n_bits.wrapping_add(1023) << 52);
    p * scale
}

mod generic {
    kernels!(;);
}

#[cfg(target_arch = "x86_64")]
mod fast {
    kernels!(target_feature(enable = "avx2,fma"); unsafe);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(n: usize, salt: u64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let v = (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt;
                (v % 1000) as f64 / 500.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn tiled_paths_match_naive_and_one_row_calls() {
        for (rows, n_in, n_out) in [(7, 5, 13), (4, 16, 8), (9, 3, 2), (1, 1, 1), (6, 10, 17)] {
            let h = pseudo(rows * n_in, 1);
            let w = pseudo(n_in * n_out, 2);
            let z0 = pseudo(rows * n_out, 3);

            let mut z = z0.clone();
            gemm_acc(&h, rows, n_in, &w, n_out, &mut z);
            for r in 0..rows {
                let mut zr = z0[r * n_out..(r + 1) * n_out].to_vec();
                gemm_acc(&h[r * n_in..], 1, n_in, &w, n_out, &mut zr);
                assert_eq!(&z[r * n_out..(r + 1) * n_out], zr.as_slice());
                for o in 0..n_out {
                    let naive: f64 = z0[r * n_out + o] + (0..n_in).map(|i| h[r * n_in + i] * w[i * n_out + o]).sum::<f64>();
                    assert!((naive - z[r * n_out + o]).abs() < 1e-12);
                }
            }

            let dz = pseudo(rows * n_out, 4);
            let mut g = vec![0.5; n_in * n_out];
            gemm_tn_acc(&h, rows, n_in, &dz, n_out, &mut g);
            let mut dh = vec![0.0; rows * n_in];
            let mut wt = Vec::new();
            gemm_nt(&dz, rows, n_out, &w, n_in, &mut wt, &mut dh);
            for i in 0..n_in {
                for o in 0..n_out {
                    let naive: f64 = 0.5 + (0..rows).map(|r| h[r * n_in + i] * dz[r * n_out + o]).sum::<f64>();
                    assert!((naive - g[i * n_out + o]).abs() < 1e-12);
                }
                for r in 0..rows {
                    let naive: f64 = (0..n_out).map(|o| dz[r * n_out + o] * w[i * n_out + o]).sum();
                    assert!((naive - dh[r * n_in + i]).abs() < 1e-12);
                }
            }
            let mut dh1 = vec![0.0; n_in];
            gemm_nt(&dz[(rows - 1) * n_out..], 1, n_out, &w, n_in, &mut wt, &mut dh1);
            assert_eq!(&dh[(rows - 1) * n_in..], dh1.as_slice());
        }
    }

    #[test]
    fn portable_path_agrees_bitwise() {
        let (rows, n_in, n_out) = (11, 19, 21);
        let h = pseudo(rows * n_in, 5);
        let w = pseudo(n_in * n_out, 6);
        let mut a = vec![0.0; rows * n_out];
        let mut b = a.clone();
        gemm_acc(&h, rows, n_in, &w, n_out, &mut a);
        generic::gemm_acc(&h, rows, n_in, &w, n_out, &mut b);
        assert_eq!(a, b);
        let z: Vec<f64> = (0..4001).map(|i| (i as f64 - 2000.0) / 40.0).collect();
        let mut a = vec![0.0; z.len()];
        let mut b = a.clone();
        sigmoid_slice(&z, &mut a);
        generic::sigmoid_slice(&z, &mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn exp_poly_tracks_libm() {
        let mut worst: f64 = 0.0;
        for i in 0..200_001 {
            let x = -700.0 + 1400.0 * i as f64 / 200_000.0;
            let (a, b) = (exp_poly(x), x.exp());
            worst = worst.max(((a - b) / b).abs());
        }
        assert!(worst < 4.0 * f64::EPSILON, "{worst:e}");
        assert_eq!(exp_poly(0.0), 1.0);
        assert_eq!(exp_poly(-1e6), exp_poly(-708.0));
        assert!(exp_poly(f64::NEG_INFINITY) > 0.0);
    }
}
