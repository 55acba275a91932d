//! Dense `f64` matrix product used by the batched decoder.
//!
//! On x86-64 CPUs with AVX-512F an 8x16 register-blocked kernel is used, with
//! the bias, rectifier and rectifier mask applied as the tile is stored.
//! Elsewhere the product is delegated to `matrixmultiply` followed by plain
//! loops. Both paths sum over `k` in a fixed order, so results are
//! reproducible on a given machine.

/// What to do with the product `a * b` when writing it into `c`.
#[derive(Clone, Copy)]
pub(crate) enum Store<'a> {
    /// `c += a * b`
    Add,
    /// `c = a * b`
    Set,
    /// `c = a * b + bias` per row, rectified when `relu`.
    Bias { bias: &'a [f64], relu: bool },
    /// `c = a * b` where the matching entry of `gate` is positive, else 0.
    Gated(&'a [f64]),
}

/// Writes `a * b` into `c` according to `store`. `a` is `m x k`, `b` is
/// `k x n` (both addressed through `(row, column)` strides) and `c` is dense
/// row-major `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    store: Store<'_>,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0);
    match store {
        Store::Bias { bias, .. } => assert_eq!(bias.len(), n),
        Store::Gated(gate) => assert!(gate.len() >= m * n),
        Store::Add | Store::Set => {}
    }
    #[cfg(target_arch = "x86_64")]
    if k > 0 && std::arch::is_x86_feature_detected!("avx512f") {
        // SAFETY: feature checked above; bounds asserted on entry and the
        // strides describe dense layouts within those bounds.
        unsafe { avx512::gemm(m, k, n, a, (rsa, csa), b, (rsb, csb), c, store) };
        return;
    }
    portable(m, k, n, a, (rsa, csa), b, (rsb, csb), c, store);
}

/// Fallback path; callers have validated the shapes.
#[allow(clippy::too_many_arguments)]
fn portable(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    store: Store<'_>,
) {
    let c = &mut c[..m * n];
    let beta = match store {
        Store::Add => 1.0,
        Store::Bias { bias, .. } => {
            for row in c.chunks_exact_mut(n) {
                row.copy_from_slice(bias);
            }
            1.0
        }
        Store::Set | Store::Gated(_) => 0.0,
    };
    // SAFETY: the strides describe dense layouts inside the asserted lengths,
    // and matrixmultiply accesses nothing outside them.
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
    match store {
        Store::Bias { relu: true, .. } => c.iter_mut().for_each(|x| *x = relu(*x)),
        Store::Gated(gate) => {
            for (x, g) in c.iter_mut().zip(gate) {
                if !(*g > 0.0) {
                    *x = 0.0;
                }
            }
        }
        _ => {}
    }
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;
    use std::cell::RefCell;

    use super::Store;

    const MR: usize = 8;
    const NR: usize = 16;
    /// Depth of one packed block; a KC x NR panel of B stays in L1.
    const KC: usize = 256;
    /// Rows of A swept against one panel before moving on, sized for L2.
    const MC: usize = 128;

    thread_local! {
        static PACK: RefCell<(Vec<f64>, Vec<f64>)> = const { RefCell::new((Vec::new(), Vec::new())) };
    }

    #[allow(clippy::too_many_arguments)]
    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        sa: (isize, isize),
        b: &[f64],
        sb: (isize, isize),
        c: &mut [f64],
        store: Store<'_>,
    ) {
        let (rsa, csa) = (sa.0 as usize, sa.1 as usize);
        let (rsb, csb) = (sb.0 as usize, sb.1 as usize);
        let panels = n.div_ceil(NR);
        PACK.with_borrow_mut(|(bp, ap)| {
            for k0 in (0..k).step_by(KC) {
                let kc = KC.min(k - k0);
                let (first, last) = (k0 == 0, k0 + kc == k);
                // B rows k0..k0+kc as zero-padded column panels: bp[(p * kc + kk) * NR + jj]
                bp.clear();
                bp.resize(panels * kc * NR, 0.0);
                for p in 0..panels {
                    let width = NR.min(n - p * NR);
                    for kk in 0..kc {
                        let src = &b[(k0 + kk) * rsb + p * NR * csb..];
                        let dst = &mut bp[(p * kc + kk) * NR..(p * kc + kk) * NR + width];
                        if csb == 1 {
                            dst.copy_from_slice(&src[..width]);
                        } else {
                            for (jj, d) in dst.iter_mut().enumerate() {
                                *d = src[jj * csb];
                            }
                        }
                    }
                }
                for m0 in (0..m).step_by(MC) {
                    let blocks = MC.min(m - m0).div_ceil(MR);
                    for p in 0..panels {
                        let j0 = p * NR;
                        let nr = NR.min(n - j0);
                        let m_lo: __mmask8 = if nr >= 8 { 0xff } else { ((1u32 << nr) - 1) as u8 };
                        let m_hi: __mmask8 = if nr >= 16 {
                            0xff
                        } else if nr > 8 {
                            ((1u32 << (nr - 8)) - 1) as u8
                        } else {
                            0
                        };
                        let hi = 8.min(nr);
                        for blk in 0..blocks {
                            let i0 = m0 + blk * MR;
                            let mr = MR.min(m - i0);
                            // SAFETY: rows i0..i0 + 8 and columns k0..k0 + kc lie inside `a`; the panel holds kc rows.
                            let acc = if mr == MR {
                                unsafe {
                                    tile(
                                        kc,
                                        a.as_ptr().add(i0 * rsa + k0 * csa),
                                        rsa,
                                        csa,
                                        bp.as_ptr().add(p * kc * NR),
                                    )
                                }
                            } else {
                                // short block: copy the remaining rows into a zero-padded 8-row strip
                                ap.clear();
                                ap.resize(kc * MR, 0.0);
                                for ii in 0..mr {
                                    for kk in 0..kc {
                                        ap[kk * MR + ii] = a[(i0 + ii) * rsa + (k0 + kk) * csa];
                                    }
                                }
                                unsafe { tile(kc, ap.as_ptr(), 1, MR, bp.as_ptr().add(p * kc * NR)) }
                            };
                            for (ii, pair) in acc.iter().enumerate().take(mr) {
                                let at = (i0 + ii) * n + j0;
                                let ptr = c[at..at + nr].as_mut_ptr();
                                // SAFETY: the masks limit every access to the nr entries
                                // starting at `at`, which lie inside `c`, `gate` and `bias[j0..]`.
                                unsafe {
                                    let (mut v0, mut v1) = (pair[0], pair[1]);
                                    let base = match store {
                                        _ if !first => Some(ptr as *const f64),
                                        Store::Add => Some(ptr as *const f64),
                                        Store::Bias { bias, .. } => Some(bias.as_ptr().add(j0)),
                                        Store::Set | Store::Gated(_) => None,
                                    };
                                    if let Some(base) = base {
                                        v0 = _mm512_add_pd(_mm512_maskz_loadu_pd(m_lo, base), v0);
                                        v1 = _mm512_add_pd(_mm512_maskz_loadu_pd(m_hi, base.add(hi)), v1);
                                    }
                                    if last {
                                        let zero = _mm512_setzero_pd();
                                        match store {
                                            Store::Bias { relu: true, .. } => {
                                                v0 =
                                                    _mm512_maskz_mov_pd(_mm512_cmp_pd_mask::<_CMP_GT_OQ>(v0, zero), v0);
                                                v1 =
                                                    _mm512_maskz_mov_pd(_mm512_cmp_pd_mask::<_CMP_GT_OQ>(v1, zero), v1);
                                            }
                                            Store::Gated(gate) => {
                                                let g = gate.as_ptr().add(at);
                                                let g0 = _mm512_maskz_loadu_pd(m_lo, g);
                                                let g1 = _mm512_maskz_loadu_pd(m_hi, g.add(hi));
                                                v0 =
                                                    _mm512_maskz_mov_pd(_mm512_cmp_pd_mask::<_CMP_GT_OQ>(g0, zero), v0);
                                                v1 =
                                                    _mm512_maskz_mov_pd(_mm512_cmp_pd_mask::<_CMP_GT_OQ>(g1, zero), v1);
                                            }
                                            _ => {}
                                        }
                                    }
                                    _mm512_mask_storeu_pd(ptr, m_lo, v0);
                                    _mm512_mask_storeu_pd(ptr.add(hi), m_hi, v1);
                                }
                            }
                        }
                    }
                }
            }
        });
    }

    /// 8x16 product of 8 strided rows of A with a packed `k x 16` panel of B.
    #[inline]
    #[target_feature(enable = "avx512f")]
    unsafe fn tile(k: usize, a: *const f64, rsa: usize, csa: usize, bp: *const f64) -> [[__m512d; 2]; MR] {
        let mut acc = [[_mm512_setzero_pd(); 2]; MR];
        // offsets and pointer bumps stay out of the loop body so checked
        // builds do not pay for index arithmetic per FMA pair
        let rows: [usize; MR] = std::array::from_fn(|ii| ii * rsa);
        let (mut col, mut panel) = (a, bp);
        for _ in 0..k {
            // SAFETY: callers guarantee 8 rows of k entries at these strides and k * NR panel values.
            unsafe {
                let b0 = _mm512_maskz_loadu_pd(0xff, panel);
                let b1 = _mm512_maskz_loadu_pd(0xff, panel.wrapping_add(8));
                for (pair, &off) in acc.iter_mut().zip(&rows) {
                    let av = _mm512_broadcastsd_pd(_mm_load_sd(col.wrapping_add(off)));
                    pair[0] = _mm512_fmadd_pd(av, b0, pair[0]);
                    pair[1] = _mm512_fmadd_pd(av, b1, pair[1]);
                }
            }
            col = col.wrapping_add(csa);
            panel = panel.wrapping_add(NR);
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], sa: (isize, isize), b: &[f64], sb: (isize, isize)) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    c[i * n + j] +=
                        a[i * sa.0 as usize + kk * sa.1 as usize] * b[kk * sb.0 as usize + j * sb.1 as usize];
                }
            }
        }
        c
    }

    fn close(got: &[f64], want: impl IntoIterator<Item = f64>, what: &str) {
        for (i, (x, y)) in got.iter().zip(want).enumerate() {
            assert!((x - y).abs() < 1e-10, "{what} [{i}]: {x} vs {y}");
        }
    }

    #[test]
    fn every_store_mode_matches_the_naive_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shapes = [
            (1, 1, 1),
            (7, 3, 5),
            (8, 16, 16),
            (9, 17, 33),
            (37, 128, 16),
            (64, 5, 130),
            (19, 300, 21),
        ];
        for &(m, k, n) in &shapes {
            let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bias: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let gate: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let init: Vec<f64> = (0..m * n).map(|i| i as f64).collect();
            for (sa, sb) in [((k as isize, 1), (n as isize, 1)), ((1, m as isize), (1, k as isize))] {
                let p = naive(m, k, n, &a, sa, &b, sb);
                let what = format!("{m}x{k}x{n}");
                let run = |store| {
                    let mut c = init.clone();
                    dgemm(m, k, n, &a, sa, &b, sb, &mut c, store);
                    let mut d = init.clone();
                    portable(m, k, n, &a, sa, &b, sb, &mut d, store);
                    close(&d, c.iter().copied(), "portable");
                    c
                };
                close(&run(Store::Set), p.iter().copied(), &what);
                close(&run(Store::Add), p.iter().zip(&init).map(|(x, y)| x + y), &what);
                let biased = |i: usize| p[i] + bias[i % n];
                close(
                    &run(Store::Bias {
                        bias: &bias,
                        relu: false,
                    }),
                    (0..m * n).map(biased),
                    &what,
                );
                close(
                    &run(Store::Bias {
                        bias: &bias,
                        relu: true,
                    }),
                    (0..m * n).map(|i| relu(biased(i))),
                    &what,
                );
                let gated = (0..m * n).map(|i| if gate[i] > 0.0 { p[i] } else { 0.0 });
                close(&run(Store::Gated(&gate)), gated, &what);
            }
        }
    }

    #[test]
    fn empty_inner_dimension() {
        let mut c = vec![5.0; 6];
        dgemm(
            2,
            0,
            3,
            &[],
            (0, 1),
            &[],
            (3, 1),
            &mut c,
            Store::Bias {
                bias: &[1.0, -2.0, 3.0],
                relu: true,
            },
        );
        assert_eq!(c, [1.0, 0.0, 3.0, 1.0, 0.0, 3.0]);
        dgemm(2, 0, 3, &[], (0, 1), &[], (3, 1), &mut c, Store::Set);
        assert_eq!(c, [0.0; 6]);
    }
}
