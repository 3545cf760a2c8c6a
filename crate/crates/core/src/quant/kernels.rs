//! Integer dot-product kernels for int8 matrix products.
//!
//! All kernels accumulate exact `i32` sums, so every implementation returns
//! identical results; the fastest one supported by the CPU is picked at
//! runtime.

use std::sync::OnceLock;

/// Available int8 kernel implementations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    Scalar,
    Avx2,
    Avx512Vnni,
}

impl Kernel {
    /// Kernels usable on this machine, slowest first.
    pub fn available() -> Vec<Kernel> {
        let mut out = vec![Kernel::Scalar];
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx2") {
                out.push(Kernel::Avx2);
            }
            if std::is_x86_feature_detected!("avx512f")
                && std::is_x86_feature_detected!("avx512bw")
                && std::is_x86_feature_detected!("avx512vnni")
            {
                out.push(Kernel::Avx512Vnni);
            }
        }
        out
    }

    /// The fastest available kernel.
    pub fn best() -> Kernel {
        static BEST: OnceLock<Kernel> = OnceLock::new();
        *BEST.get_or_init(|| *Kernel::available().last().unwrap_or(&Kernel::Scalar))
    }

    /// True when the kernel uses 8-bit SIMD instructions.
    pub fn is_simd(self) -> bool {
        self != Kernel::Scalar
    }
}

/// Computes `out[j * m + i] = Σ_k a[i,k] · bt[j,k]` for the output rows
/// `j` in `first..first + out.len() / m`.
///
/// `a` is `m × k` row-major, `bt` holds one row of `k` weights per output and
/// `bt_sums[j]` is the sum of row `j` (used by the unsigned-activation kernel).
pub fn gemm_i8_block(
    kernel: Kernel,
    a: &[i8],
    m: usize,
    k: usize,
    bt: &[i8],
    bt_sums: &[i32],
    first: usize,
    out: &mut [i32],
) {
    match kernel {
        Kernel::Scalar => scalar_block(a, m, k, bt, first, out),
        #[cfg(target_arch = "x86_64")]
        Kernel::Avx2 => unsafe { x86::avx2_block(a, m, k, bt, first, out) },
        #[cfg(target_arch = "x86_64")]
        Kernel::Avx512Vnni => unsafe { x86::vnni_block(a, m, k, bt, bt_sums, first, out) },
        #[cfg(not(target_arch = "x86_64"))]
        _ => scalar_block(a, m, k, bt, first, out),
    }
}

fn scalar_block(a: &[i8], m: usize, k: usize, bt: &[i8], first: usize, out: &mut [i32]) {
    for (jj, col) in out.chunks_exact_mut(m).enumerate() {
        let brow = &bt[(first + jj) * k..(first + jj + 1) * k];
        for (i, o) in col.iter_mut().enumerate() {
            let arow = &a[i * k..(i + 1) * k];
            *o = arow.iter().zip(brow).map(|(&x, &y)| x as i32 * y as i32).sum();
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    #[inline]
    #[target_feature(enable = "avx2")]
    unsafe fn hsum256(v: __m256i) -> i32 {
        let lo = _mm256_castsi256_si128(v);
        let hi = _mm256_extracti128_si256(v, 1);
        let s = _mm_add_epi32(lo, hi);
        let s = _mm_add_epi32(s, _mm_shuffle_epi32(s, 0b01_00_11_10));
        let s = _mm_add_epi32(s, _mm_shuffle_epi32(s, 0b10_11_00_01));
        _mm_cvtsi128_si32(s)
    }

    #[inline]
    #[target_feature(enable = "avx2")]
    unsafe fn widen16(p: *const i8) -> __m256i {
        _mm256_cvtepi8_epi16(_mm_loadu_si128(p as *const __m128i))
    }

    /// Sign-extends 16 bytes at a time to i16 and uses `pmaddwd`.
    #[target_feature(enable = "avx2")]
    pub unsafe fn avx2_block(a: &[i8], m: usize, k: usize, bt: &[i8], first: usize, out: &mut [i32]) {
        let body = k / 16 * 16;
        let cols = out.len() / m;
        let mut jj = 0;
        while jj < cols {
            let take = (cols - jj).min(4);
            let rows: [&[i8]; 4] = std::array::from_fn(|r| {
                let j = first + jj + r.min(take - 1);
                &bt[j * k..(j + 1) * k]
            });
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let mut acc = [_mm256_setzero_si256(); 4];
                let mut p = 0;
                while p < body {
                    let av = widen16(arow.as_ptr().add(p));
                    for r in 0..4 {
                        let bv = widen16(rows[r].as_ptr().add(p));
                        acc[r] = _mm256_add_epi32(acc[r], _mm256_madd_epi16(av, bv));
                    }
                    p += 16;
                }
                for r in 0..take {
                    let mut s = hsum256(acc[r]);
                    for q in body..k {
                        s += arow[q] as i32 * rows[r][q] as i32;
                    }
                    out[(jj + r) * m + i] = s;
                }
            }
            jj += take;
        }
    }

    /// Uses `vpdpbusd` (u8 × i8) on activations shifted by +128, then removes
    /// the `128 · Σ b` bias with the precomputed row sums.
    #[target_feature(enable = "avx512f,avx512bw,avx512vnni")]
    pub unsafe fn vnni_block(
        a: &[i8],
        m: usize,
        k: usize,
        bt: &[i8],
        bt_sums: &[i32],
        first: usize,
        out: &mut [i32],
    ) {
        let body = k / 64 * 64;
        let shift = _mm512_set1_epi8(-128);
        let cols = out.len() / m;
        let mut jj = 0;
        while jj < cols {
            let take = (cols - jj).min(4);
            let rows: [&[i8]; 4] = std::array::from_fn(|r| {
                let j = first + jj + r.min(take - 1);
                &bt[j * k..(j + 1) * k]
            });
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let mut acc = [_mm512_setzero_si512(); 4];
                let mut p = 0;
                while p < body {
                    let av = _mm512_xor_si512(_mm512_loadu_si512(arow.as_ptr().add(p) as *const _), shift);
                    for r in 0..4 {
                        let bv = _mm512_loadu_si512(rows[r].as_ptr().add(p) as *const _);
                        acc[r] = _mm512_dpbusd_epi32(acc[r], av, bv);
                    }
                    p += 64;
                }
                for r in 0..take {
                    let mut s = _mm512_reduce_add_epi32(acc[r]);
                    for q in body..k {
                        s += (arow[q] as i32 + 128) * rows[r][q] as i32;
                    }
                    out[(jj + r) * m + i] = s - 128 * bt_sums[first + jj + r];
                }
            }
            jj += take;
        }
    }
}
