//! Order-independent reductions over particles.
//!
//! Sums are accumulated exactly in a fixed-point superaccumulator (32-bit
//! chunks covering the whole `f64` exponent range) and rounded once at the
//! end. The result is the correctly rounded exact sum, so it depends neither
//! on the order of the terms nor on how they were split across worker
//! threads.

use rayon::prelude::*;

/// Chunk size below which reductions run sequentially.
const PAR_CHUNK: usize = 1024;

const CHUNK_BITS: u32 = 32;
const CHUNK_MASK: i64 = (1 << CHUNK_BITS) - 1;
/// Bit 0 of chunk 0 has weight `2^-1074`; the largest finite term reaches
/// chunk 65, and the top chunks absorb carries.
const N_CHUNKS: usize = 68;
/// Adds allowed between carry propagations; each add moves a chunk by
/// less than `2^32`.
const CARRY_EVERY: u32 = 1 << 30;

#[derive(Debug, Clone)]
pub struct ExactSum {
    chunks: [i64; N_CHUNKS],
    pending: u32,
    special: f64,
}

impl Default for ExactSum {
    fn default() -> Self {
        Self {
            chunks: [0; N_CHUNKS],
            pending: 0,
            special: 0.0,
        }
    }
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, value: f64) {
        let bits = value.to_bits();
        let exp = ((bits >> 52) & 0x7ff) as u32;
        if exp == 0x7ff {
            self.special += value;
            return;
        }
        let frac = bits & ((1 << 52) - 1);
        let (mant, pos) = if exp == 0 { (frac, 0) } else { (frac | (1 << 52), exp - 1) };
        if mant == 0 {
            return;
        }
        let idx = (pos / CHUNK_BITS) as usize;
        let wide = (mant as u128) << (pos % CHUNK_BITS);
        let parts = [
            (wide as i64) & CHUNK_MASK,
            ((wide >> 32) as i64) & CHUNK_MASK,
            (wide >> 64) as i64,
        ];
        if (bits >> 63) == 0 {
            for (c, p) in self.chunks[idx..idx + 3].iter_mut().zip(parts) {
                *c += p;
            }
        } else {
            for (c, p) in self.chunks[idx..idx + 3].iter_mut().zip(parts) {
                *c -= p;
            }
        }
        self.pending += 1;
        if self.pending >= CARRY_EVERY {
            self.carry();
        }
    }

    /// Bring every chunk but the last into `[0, 2^32)`.
    fn carry(&mut self) {
        carry_chunks(&mut self.chunks);
        self.pending = 0;
    }

    pub fn merge(&mut self, other: &ExactSum) {
        self.carry();
        let mut o = other.chunks;
        carry_chunks(&mut o);
        for (a, b) in self.chunks.iter_mut().zip(o) {
            *a += b;
        }
        self.pending = 2;
        self.special += other.special;
    }

    /// Correctly rounded (to nearest, ties to even) value of the sum.
    pub fn value(&self) -> f64 {
        if self.special != 0.0 || self.special.is_nan() {
            return self.special;
        }
        let mut c = self.chunks;
        carry_chunks(&mut c);
        let negative = c[N_CHUNKS - 1] < 0;
        if negative {
            c.iter_mut().for_each(|v| *v = -*v);
            carry_chunks(&mut c);
        }
        let Some(h) = c.iter().rposition(|&v| v != 0) else {
            return 0.0;
        };
        let base = h.saturating_sub(2);
        let mut v: u128 = 0;
        for j in (base..=h).rev() {
            v = (v << CHUNK_BITS) | c[j] as u128;
        }
        let sticky = c[..base].iter().any(|&x| x != 0);
        let len = 128 - v.leading_zeros() as i64;
        let lead = len - 1 + (CHUNK_BITS as i64) * base as i64;
        // Absolute position (in units of 2^-1074) of the kept LSB.
        let mut drop = (lead - 52).max(0);
        let r = drop - (CHUNK_BITS as i64) * base as i64;
        let mut q = if r > 0 {
            let q = v >> r;
            let rem = v & ((1u128 << r) - 1);
            let half = 1u128 << (r - 1);
            let up = rem > half || (rem == half && (sticky || q & 1 == 1));
            q + up as u128
        } else {
            v << (-r)
        };
        if q == 1u128 << 53 {
            q >>= 1;
            drop += 1;
        }
        let q = q as u64;
        let magnitude = if q >= 1 << 52 {
            let biased = drop + 1;
            if biased >= 0x7ff {
                f64::INFINITY
            } else {
                f64::from_bits(((biased as u64) << 52) | (q - (1 << 52)))
            }
        } else {
            f64::from_bits(q)
        };
        if negative {
            -magnitude
        } else {
            magnitude
        }
    }
}

fn carry_chunks(c: &mut [i64; N_CHUNKS]) {
    for i in 0..N_CHUNKS - 1 {
        let carry = c[i] >> CHUNK_BITS;
        c[i] &= CHUNK_MASK;
        c[i + 1] += carry;
    }
}

impl FromIterator<f64> for ExactSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = ExactSum::new();
        for v in iter {
            acc.add(v);
        }
        acc
    }
}

pub fn exact_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    values.into_iter().collect::<ExactSum>().value()
}

/// Componentwise exact sums of `n` records of width `width`;
/// `term(i, out)` writes record `i` into `out`.
pub fn exact_record_sums<F>(n: usize, width: usize, term: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let fold_range = |lo: usize, hi: usize| {
        let mut accs = vec![ExactSum::new(); width];
        let mut buf = vec![0.0; width];
        for i in lo..hi {
            term(i, &mut buf);
            for (acc, &v) in accs.iter_mut().zip(&buf) {
                acc.add(v);
            }
        }
        accs
    };
    let accs = if n <= PAR_CHUNK {
        fold_range(0, n)
    } else {
        let chunks = n.div_ceil(PAR_CHUNK);
        (0..chunks)
            .into_par_iter()
            .map(|c| fold_range(c * PAR_CHUNK, ((c + 1) * PAR_CHUNK).min(n)))
            .reduce(
                || vec![ExactSum::new(); width],
                |mut a, b| {
                    for (x, y) in a.iter_mut().zip(&b) {
                        x.merge(y);
                    }
                    a
                },
            )
    };
    accs.iter().map(ExactSum::value).collect()
}
