//! Counting Bloom filter over transaction ids.
//!
//! Wire layout (little endian):
//!
//! | offset | size | field                       |
//! |--------|------|-----------------------------|
//! | 0      | 1    | `k`, number of hash indexes |
//! | 1      | 1    | `c`, bits per counter (1-8) |
//! | 2      | 2    | reserved, zero              |
//! | 4      | 4    | `L`, counter count          |
//! | 8      | 8    | salt                        |
//! | 16     | ⌈L·c/8⌉ | counters, LSB-first bit packing |
//!
//! The population is a local statistic and is not transmitted; a decoded filter
//! reports `Σ counters / k`, which is exact while no counter has saturated.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{keyed_hash128, TxId};

pub const HEADER_LEN: usize = 16;
pub const DEFAULT_K: u8 = 4;
pub const DEFAULT_COUNTER_BITS: u8 = 4;
pub const DEFAULT_COUNTERS_PER_ITEM: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CbfError {
    #[error("counter already zero; filter out of sync with its pool")]
    UnderflowAttempt,
    #[error("malformed filter: {0}")]
    MalformedFilter(&'static str),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CountingBloomFilter {
    counters: Vec<u8>,
    k: u8,
    bits: u8,
    salt: u64,
    population: u64,
}

impl PartialEq for CountingBloomFilter {
    fn eq(&self, other: &Self) -> bool {
        self.k == other.k
            && self.bits == other.bits
            && self.salt == other.salt
            && self.counters == other.counters
    }
}

impl Eq for CountingBloomFilter {}

impl CountingBloomFilter {
    /// # Panics
    /// If `len == 0`, `k == 0` or `bits` is outside `1..=8`.
    pub fn new(len: usize, k: u8, bits: u8, salt: u64) -> Self {
        assert!(len > 0 && len <= u32::MAX as usize, "filter length out of range");
        assert!(k > 0, "need at least one hash");
        assert!((1..=8).contains(&bits), "counter width must be 1..=8 bits");
        Self { counters: vec![0; len], k, bits, salt, population: 0 }
    }

    /// `8 * expected_items` 4-bit counters with 4 hashes.
    pub fn with_capacity(expected_items: usize, salt: u64) -> Self {
        Self::new(
            (expected_items.max(1)) * DEFAULT_COUNTERS_PER_ITEM,
            DEFAULT_K,
            DEFAULT_COUNTER_BITS,
            salt,
        )
    }

    pub fn len(&self) -> usize {
        self.counters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.population == 0
    }

    pub fn k(&self) -> u8 {
        self.k
    }

    pub fn counter_bits(&self) -> u8 {
        self.bits
    }

    pub fn salt(&self) -> u64 {
        self.salt
    }

    pub fn population(&self) -> u64 {
        self.population
    }

    fn max_count(&self) -> u8 {
        ((1u16 << self.bits) - 1) as u8
    }

    pub fn counters(&self) -> &[u8] {
        &self.counters
    }

    /// Standard double hashing: `h1 + i*h2 mod L`.
    fn indexes(&self, id: &TxId) -> impl Iterator<Item = usize> {
        let (h1, h2) = keyed_hash128(self.salt, id.as_bytes());
        let len = self.counters.len() as u64;
        (0..self.k as u64).map(move |i| (h1.wrapping_add(i.wrapping_mul(h2 | 1)) % len) as usize)
    }

    pub fn add(&mut self, id: &TxId) {
        let max = self.max_count();
        let idx: Vec<usize> = self.indexes(id).collect();
        for i in idx {
            let c = &mut self.counters[i];
            if *c < max {
                *c += 1;
            }
        }
        self.population += 1;
    }

    /// Decrements the addressed counters. Saturated counters are left alone.
    /// Nothing changes if any addressed counter is already zero.
    pub fn remove(&mut self, id: &TxId) -> Result<(), CbfError> {
        let max = self.max_count();
        let idx: Vec<usize> = self.indexes(id).collect();
        if idx.iter().any(|&i| self.counters[i] == 0) {
            return Err(CbfError::UnderflowAttempt);
        }
        for i in idx {
            let c = &mut self.counters[i];
            if *c < max {
                *c -= 1;
            }
        }
        self.population = self.population.saturating_sub(1);
        Ok(())
    }

    pub fn contains(&self, id: &TxId) -> bool {
        self.indexes(id).all(|i| self.counters[i] > 0)
    }

    pub fn clear(&mut self) {
        self.counters.iter_mut().for_each(|c| *c = 0);
        self.population = 0;
    }

    /// Rebuilds the filter from scratch, e.g. after an underflow.
    pub fn rebuild<'a>(&mut self, ids: impl IntoIterator<Item = &'a TxId>) {
        self.clear();
        for id in ids {
            self.add(id);
        }
    }

    pub fn saturated(&self) -> bool {
        let max = self.max_count();
        self.counters.contains(&max)
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + (self.counters.len() * self.bits as usize).div_ceil(8)
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(self.k);
        out.push(self.bits);
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&(self.counters.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.salt.to_le_bytes());
        let body_start = out.len();
        out.resize(self.encoded_len(), 0);
        let body = &mut out[body_start..];
        let bits = self.bits as usize;
        for (i, &c) in self.counters.iter().enumerate() {
            for b in 0..bits {
                let bit = i * bits + b;
                if (c >> b) & 1 == 1 {
                    body[bit / 8] |= 1 << (bit % 8);
                }
            }
        }
        out
    }

    pub fn deserialize(buf: &[u8]) -> Result<Self, CbfError> {
        if buf.len() < HEADER_LEN {
            return Err(CbfError::MalformedFilter("short header"));
        }
        let k = buf[0];
        let bits = buf[1];
        if k == 0 {
            return Err(CbfError::MalformedFilter("k is zero"));
        }
        if !(1..=8).contains(&bits) {
            return Err(CbfError::MalformedFilter("counter width"));
        }
        if buf[2] != 0 || buf[3] != 0 {
            return Err(CbfError::MalformedFilter("reserved bytes set"));
        }
        let len = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
        if len == 0 {
            return Err(CbfError::MalformedFilter("zero length"));
        }
        let salt = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes"));
        let body = &buf[HEADER_LEN..];
        if body.len() != (len * bits as usize).div_ceil(8) {
            return Err(CbfError::MalformedFilter("body length"));
        }
        let nbits = bits as usize;
        let counters: Vec<u8> = (0..len)
            .map(|i| {
                (0..nbits).fold(0u8, |acc, b| {
                    let bit = i * nbits + b;
                    acc | (((body[bit / 8] >> (bit % 8)) & 1) << b)
                })
            })
            .collect();
        let population = counters.iter().map(|&c| c as u64).sum::<u64>() / k as u64;
        Ok(Self { counters, k, bits, salt, population })
    }
}

/// Textbook false-positive rate `(1 - e^{-kN/L})^k`.
pub fn expected_fpr(k: u8, items: usize, len: usize) -> f64 {
    let k = k as f64;
    (1.0 - (-k * items as f64 / len as f64).exp()).powf(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::sha256;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn id(i: u64) -> TxId {
        TxId(sha256(&[&i.to_le_bytes()]))
    }

    fn random_id(rng: &mut ChaCha8Rng) -> TxId {
        TxId(rng.gen())
    }

    #[test]
    fn add_then_contains() {
        let mut f = CountingBloomFilter::with_capacity(100, 7);
        f.add(&id(1));
        assert!(f.contains(&id(1)));
        assert_eq!(f.population(), 1);
    }

    #[test]
    fn balanced_add_remove_returns_to_zero() {
        let mut f = CountingBloomFilter::with_capacity(100, 7);
        f.add(&id(1));
        f.remove(&id(1)).unwrap();
        assert!(!f.contains(&id(1)));
        assert!(f.counters().iter().all(|&c| c == 0));
    }

    #[test]
    fn remove_of_absent_item_underflows() {
        let mut f = CountingBloomFilter::with_capacity(100, 7);
        assert_eq!(f.remove(&id(1)), Err(CbfError::UnderflowAttempt));
        assert!(f.counters().iter().all(|&c| c == 0));
    }

    #[test]
    fn counters_saturate() {
        let mut f = CountingBloomFilter::new(4, 1, 2, 0);
        for _ in 0..10 {
            f.add(&id(9));
        }
        assert!(f.saturated());
        assert!(f.counters().iter().all(|&c| c <= 3));
        // saturated counters stay put
        f.remove(&id(9)).unwrap();
        assert!(f.contains(&id(9)));
    }

    /// Monte-Carlo probe of the false-positive rate at N = L ln2 / k.
    #[test]
    fn fpr_matches_textbook_within_factor_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (len, k) = (40_000usize, 4u8);
        let n = (len as f64 * std::f64::consts::LN_2 / k as f64) as usize;
        let mut f = CountingBloomFilter::new(len, k, 8, 99);
        for _ in 0..n {
            f.add(&random_id(&mut rng));
        }
        let probes = 100_000;
        let fp = (0..probes).filter(|_| f.contains(&random_id(&mut rng))).count();
        let measured = fp as f64 / probes as f64;
        let expected = expected_fpr(k, n, len);
        assert!(measured < 2.0 * expected && measured > expected / 2.0, "{measured} vs {expected}");
    }

    #[test]
    fn doubling_length_reduces_fpr() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let items: Vec<TxId> = (0..2000).map(|_| random_id(&mut rng)).collect();
        let probes: Vec<TxId> = (0..50_000).map(|_| random_id(&mut rng)).collect();
        let fpr = |len: usize| {
            let mut f = CountingBloomFilter::new(len, 4, 4, 3);
            items.iter().for_each(|i| f.add(i));
            probes.iter().filter(|p| f.contains(p)).count()
        };
        let (a, b, c) = (fpr(8000), fpr(16_000), fpr(32_000));
        assert!(b < a && c < b, "{a} {b} {c}");
    }

    #[test]
    fn malformed_headers_rejected() {
        let f = CountingBloomFilter::with_capacity(10, 1);
        let bytes = f.serialize();
        assert_eq!(bytes.len(), HEADER_LEN + 80 * 4 / 8);
        let mut bad = bytes.clone();
        bad[0] = 0;
        assert!(CountingBloomFilter::deserialize(&bad).is_err());
        let mut bad = bytes.clone();
        bad[1] = 9;
        assert!(CountingBloomFilter::deserialize(&bad).is_err());
        assert!(CountingBloomFilter::deserialize(&bytes[..bytes.len() - 1]).is_err());
        assert!(CountingBloomFilter::deserialize(&bytes[..3]).is_err());
    }

    proptest! {
        #[test]
        fn serialize_round_trip(len in 1usize..300, k in 1u8..6, bits in 1u8..=8, salt: u64,
                                items in proptest::collection::vec(any::<u64>(), 0..80)) {
            let mut f = CountingBloomFilter::new(len, k, bits, salt);
            for i in &items { f.add(&id(*i)); }
            let back = CountingBloomFilter::deserialize(&f.serialize()).unwrap();
            prop_assert_eq!(&back, &f);
            prop_assert_eq!(f.serialize().len(), HEADER_LEN + (len * bits as usize).div_ceil(8));
        }

        #[test]
        fn no_false_negatives_without_saturation(items in proptest::collection::hash_set(any::<u64>(), 0..200),
                                                 removed in proptest::collection::vec(any::<prop::sample::Index>(), 0..50)) {
            let items: Vec<u64> = items.into_iter().collect();
            let mut f = CountingBloomFilter::new(4096, 4, 8, 1);
            for i in &items { f.add(&id(*i)); }
            let mut live: std::collections::BTreeSet<u64> = items.iter().copied().collect();
            for r in removed {
                if items.is_empty() { break; }
                let v = items[r.index(items.len())];
                if live.remove(&v) { f.remove(&id(v)).unwrap(); }
            }
            prop_assume!(!f.saturated());
            for v in &live { prop_assert!(f.contains(&id(*v))); }
        }
    }
}
