//! Order-independent accumulation.
//!
//! Every addend is rounded once onto a fixed grid of spacing 2^-64 and summed
//! as a 128-bit integer. Integer addition is associative, so the result is
//! identical whatever the summation order, thread count or the way images are
//! partitioned across workers.

use serde::{Deserialize, Serialize};

const SCALE: f64 = 18_446_744_073_709_551_616.0; // 2^64
const LIMIT: f64 = 8.507_059_173_023_462e37; // 2^126
const CHUNK_BITS: u32 = 43;
const CHUNK_MASK: i128 = (1 << CHUNK_BITS) - 1;

#[inline]
fn quantize(x: f64) -> i128 {
    let y = (x * SCALE).round();
    y.clamp(-LIMIT, LIMIT) as i128
}

/// Exact fixed-point accumulator for a vector of values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExactVec {
    acc: Vec<i128>,
    non_finite: bool,
}

impl ExactVec {
    pub fn zeros(len: usize) -> Self {
        Self {
            acc: vec![0; len],
            non_finite: false,
        }
    }

    pub fn len(&self) -> usize {
        self.acc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acc.is_empty()
    }

    pub fn add(&mut self, xs: &[f64]) {
        assert_eq!(xs.len(), self.acc.len(), "exact accumulator length");
        for (a, &x) in self.acc.iter_mut().zip(xs) {
            if !x.is_finite() {
                self.non_finite = true;
                continue;
            }
            *a = a.saturating_add(quantize(x));
        }
    }

    pub fn add_scaled(&mut self, scale: f64, xs: &[f64]) {
        assert_eq!(xs.len(), self.acc.len(), "exact accumulator length");
        for (a, &x) in self.acc.iter_mut().zip(xs) {
            let v = scale * x;
            if !v.is_finite() {
                self.non_finite = true;
                continue;
            }
            *a = a.saturating_add(quantize(v));
        }
    }

    pub fn add_at(&mut self, index: usize, x: f64) {
        if !x.is_finite() {
            self.non_finite = true;
            return;
        }
        self.acc[index] = self.acc[index].saturating_add(quantize(x));
    }

    pub fn merge(&mut self, other: &ExactVec) {
        assert_eq!(other.acc.len(), self.acc.len(), "exact accumulator length");
        for (a, b) in self.acc.iter_mut().zip(&other.acc) {
            *a = a.saturating_add(*b);
        }
        self.non_finite |= other.non_finite;
    }

    /// Rounds the exact sums to `f64`. Any non-finite addend poisons every entry.
    pub fn to_f64(&self) -> Vec<f64> {
        if self.non_finite {
            return vec![f64::NAN; self.acc.len()];
        }
        self.acc.iter().map(|&a| a as f64 / SCALE).collect()
    }

    /// Lossless encoding as three integer-valued `f64` per entry.
    pub fn to_triples(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.acc.len());
        for &a in &self.acc {
            let lo = a & CHUNK_MASK;
            let mid = (a >> CHUNK_BITS) & CHUNK_MASK;
            let hi = a >> (2 * CHUNK_BITS);
            out.push(if self.non_finite { f64::NAN } else { hi as f64 });
            out.push(mid as f64);
            out.push(lo as f64);
        }
        out
    }

    pub fn from_triples(data: &[f64]) -> Option<Self> {
        if data.len() % 3 != 0 {
            return None;
        }
        let mut acc = Vec::with_capacity(data.len() / 3);
        let mut non_finite = false;
        for t in data.chunks_exact(3) {
            if t[0].is_nan() {
                non_finite = true;
                acc.push(0);
                continue;
            }
            if t.iter().any(|x| x.fract() != 0.0 || !x.is_finite()) {
                return None;
            }
            let hi = t[0] as i128;
            let mid = t[1] as i128;
            let lo = t[2] as i128;
            acc.push((hi << (2 * CHUNK_BITS)) + (mid << CHUNK_BITS) + lo);
        }
        Some(Self { acc, non_finite })
    }
}

/// Exact sum of a scalar.
pub fn exact_scalar(x: f64) -> ExactVec {
    let mut e = ExactVec::zeros(1);
    e.add_at(0, x);
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn order_does_not_matter() {
        let xs = [1e10, 1.0, -1e10, 3.25e-7, 0.1, -0.3];
        let mut a = ExactVec::zeros(1);
        let mut b = ExactVec::zeros(1);
        for x in xs {
            a.add(&[x]);
        }
        for x in xs.iter().rev() {
            b.add(&[*x]);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_poisons() {
        let mut a = ExactVec::zeros(2);
        a.add(&[1.0, f64::NAN]);
        assert!(a.to_f64().iter().all(|x| x.is_nan()));
        let round = ExactVec::from_triples(&a.to_triples()).unwrap();
        assert!(round.to_f64()[0].is_nan());
    }

    proptest! {
        #[test]
        fn triples_are_lossless(xs in proptest::collection::vec(-1e12f64..1e12, 1..20)) {
            let mut a = ExactVec::zeros(xs.len());
            a.add(&xs);
            a.add_scaled(-3.0, &xs);
            let b = ExactVec::from_triples(&a.to_triples()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn partition_invariant(xs in proptest::collection::vec(-1e6f64..1e6, 2..40), split in 0usize..40) {
            let split = split.min(xs.len());
            let mut whole = ExactVec::zeros(1);
            for &x in &xs { whole.add_at(0, x); }
            let mut left = ExactVec::zeros(1);
            let mut right = ExactVec::zeros(1);
            for &x in &xs[..split] { left.add_at(0, x); }
            for &x in &xs[split..] { right.add_at(0, x); }
            right.merge(&left);
            prop_assert_eq!(whole.to_f64(), right.to_f64());
        }
    }
}
