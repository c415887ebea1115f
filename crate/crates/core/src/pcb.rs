//! Proactive compact blocks: per-receiver block encoding that swaps
//! transactions the receiver already holds for salted 6-byte short ids.
//!
//! Wire layout: block header (tx count = entry count), then
//! `salt: u64`, `id_bits: u8`, an entry bitmap of `⌈len/8⌉` bytes
//! (bit set = short id, LSB first), then the entries in block order:
//! 6 bytes per short id, the full transaction encoding otherwise.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbf::CountingBloomFilter;
use crate::chain::{Block, BlockHeader, CodecError, Reader, Transaction};
use crate::ids::{keyed_hash64, NodeId, TxId};
use crate::pool::TxPool;

pub const SHORT_ID_LEN: usize = 6;
pub const SHORT_ID_BITS: u8 = 48;
const COMPACT_FIXED_LEN: usize = 8 + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ShortId(pub u64);

impl ShortId {
    pub fn to_bytes(self) -> [u8; SHORT_ID_LEN] {
        let b = self.0.to_le_bytes();
        [b[0], b[1], b[2], b[3], b[4], b[5]]
    }

    pub fn from_bytes(b: [u8; SHORT_ID_LEN]) -> Self {
        let mut full = [0u8; 8];
        full[..SHORT_ID_LEN].copy_from_slice(&b);
        Self(u64::from_le_bytes(full))
    }
}

/// Salted 48-bit short id.
pub fn short_id(tx_id: &TxId, salt: u64) -> ShortId {
    short_id_with_bits(tx_id, salt, SHORT_ID_BITS)
}

/// Short id truncated to `bits` (at most 48).
pub fn short_id_with_bits(tx_id: &TxId, salt: u64, bits: u8) -> ShortId {
    let bits = bits.min(SHORT_ID_BITS);
    ShortId(keyed_hash64(salt, tx_id.as_bytes()) & ((1u64 << bits) - 1))
}

/// Per-block salt derived from `(step, signer)`.
pub fn block_salt(step: u64, signer: NodeId) -> u64 {
    let mut buf = [0u8; 16];
    buf[..8].copy_from_slice(&step.to_le_bytes());
    buf[8..].copy_from_slice(&(signer as u64).to_le_bytes());
    keyed_hash64(0x00c0_ffee_5a17_0001, &buf)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Entry {
    ShortId(ShortId),
    FullTx(Transaction),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompactBlock {
    pub header: BlockHeader,
    pub salt: u64,
    pub id_bits: u8,
    pub entries: Vec<Entry>,
}

impl CompactBlock {
    pub fn short_count(&self) -> usize {
        self.entries.iter().filter(|e| matches!(e, Entry::ShortId(_))).count()
    }

    /// Bytes added on top of the block header: salt, id width and the entry bitmap.
    pub fn overhead_len(&self) -> usize {
        COMPACT_FIXED_LEN + self.entries.len().div_ceil(8)
    }

    pub fn encoded_len(&self) -> usize {
        self.header.encoded_len()
            + self.overhead_len()
            + self
                .entries
                .iter()
                .map(|e| match e {
                    Entry::ShortId(_) => SHORT_ID_LEN,
                    Entry::FullTx(tx) => tx.encoded_len(),
                })
                .sum::<usize>()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.header.encode_into(self.entries.len(), &mut out);
        out.extend_from_slice(&self.salt.to_le_bytes());
        out.push(self.id_bits);
        let mut bitmap = vec![0u8; self.entries.len().div_ceil(8)];
        for (i, e) in self.entries.iter().enumerate() {
            if matches!(e, Entry::ShortId(_)) {
                bitmap[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&bitmap);
        for e in &self.entries {
            match e {
                Entry::ShortId(s) => out.extend_from_slice(&s.to_bytes()),
                Entry::FullTx(tx) => tx.encode_into(&mut out),
            }
        }
        out
    }

    pub fn decode_wire(buf: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(buf);
        let (header, count) = BlockHeader::decode(&mut r)?;
        let salt = r.u64()?;
        let id_bits = r.u8()?;
        let bitmap = r.take(count.div_ceil(8))?.to_vec();
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for i in 0..count {
            if bitmap[i / 8] >> (i % 8) & 1 == 1 {
                entries.push(Entry::ShortId(ShortId::from_bytes(r.array()?)));
            } else {
                let (tx, len) = Transaction::decode(r.rest())?;
                r.skip(len)?;
                entries.push(Entry::FullTx(tx));
            }
        }
        if !r.rest().is_empty() {
            return Err(CodecError::TrailingBytes);
        }
        Ok(Self { header, salt, id_bits, entries })
    }
}

/// Tailors `block` for one receiver: transactions its filter reports as present
/// become short ids.
pub fn encode(block: &Block, receiver_filter: &CountingBloomFilter, salt: u64) -> CompactBlock {
    encode_with_bits(block, |id| receiver_filter.contains(id), salt, SHORT_ID_BITS)
}

/// BCB baseline: every transaction becomes a short id.
pub fn baseline_bcb_encode(block: &Block, salt: u64) -> CompactBlock {
    encode_with_bits(block, |_| true, salt, SHORT_ID_BITS)
}

pub fn encode_with_bits(
    block: &Block,
    present: impl Fn(&TxId) -> bool,
    salt: u64,
    id_bits: u8,
) -> CompactBlock {
    let entries = block
        .txs
        .iter()
        .map(|tx| {
            if present(&tx.id) {
                Entry::ShortId(short_id_with_bits(&tx.id, salt, id_bits))
            } else {
                Entry::FullTx(tx.clone())
            }
        })
        .collect();
    CompactBlock { header: block.header.clone(), salt, id_bits, entries }
}

/// A compact block with some slots still unresolved.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialBlock {
    header: BlockHeader,
    slots: Vec<Option<Transaction>>,
    /// Slots left unresolved because several pooled transactions shared the short id.
    pub ambiguous: usize,
}

impl PartialBlock {
    pub fn missing(&self) -> Vec<usize> {
        self.slots.iter().enumerate().filter(|(_, s)| s.is_none()).map(|(i, _)| i).collect()
    }

    pub fn complete(mut self, fetched: Vec<(usize, Transaction)>) -> Result<Block, PcbError> {
        for (pos, tx) in fetched {
            let slot = self.slots.get_mut(pos).ok_or(PcbError::BadPosition(pos))?;
            *slot = Some(tx);
        }
        let txs = self
            .slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or(PcbError::StillMissing(i)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Block::seal(self.header, txs))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DecodeResult {
    Complete(Block),
    NeedsTxs { missing: Vec<usize>, partial: PartialBlock },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PcbError {
    #[error("position {0} outside the block")]
    BadPosition(usize),
    #[error("slot {0} still unresolved")]
    StillMissing(usize),
}

/// Resolves short ids against the receiver's pool. Unknown or ambiguous ids
/// are reported for a follow-up fetch.
pub fn decode(cblock: &CompactBlock, pool: &TxPool) -> DecodeResult {
    let needs_index = cblock.entries.iter().any(|e| matches!(e, Entry::ShortId(_)));
    let mut index: HashMap<ShortId, Option<&Transaction>> = HashMap::new();
    if needs_index {
        index.reserve(pool.len());
        for tx in pool.iter() {
            index
                .entry(short_id_with_bits(&tx.id, cblock.salt, cblock.id_bits))
                .and_modify(|slot| *slot = None)
                .or_insert(Some(tx));
        }
    }
    let mut ambiguous = 0;
    let slots: Vec<Option<Transaction>> = cblock
        .entries
        .iter()
        .map(|e| match e {
            Entry::FullTx(tx) => Some(tx.clone()),
            Entry::ShortId(s) => match index.get(s) {
                Some(Some(tx)) => Some((*tx).clone()),
                Some(None) => {
                    ambiguous += 1;
                    None
                }
                None => None,
            },
        })
        .collect();
    let partial = PartialBlock { header: cblock.header.clone(), slots, ambiguous };
    let missing = partial.missing();
    if missing.is_empty() {
        DecodeResult::Complete(partial.complete(Vec::new()).expect("no missing slots"))
    } else {
        DecodeResult::NeedsTxs { missing, partial }
    }
}

/// Sender side of the missing-transaction round.
pub fn get_missing(block: &Block, positions: &[usize]) -> Vec<(usize, Transaction)> {
    positions.iter().filter_map(|&p| block.txs.get(p).map(|tx| (p, tx.clone()))).collect()
}

pub fn missing_request_len(positions: usize) -> usize {
    32 + 4 + 4 * positions
}

pub fn missing_response_len(txs: &[(usize, Transaction)]) -> usize {
    32 + 4 + txs.iter().map(|(_, t)| 4 + t.encoded_len()).sum::<usize>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::BlockKind;
    use crate::ids::BlockHash;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block(m: usize, seed: u64) -> Block {
        let txs = (0..m as u64).map(|i| Transaction::synthetic(seed, i, 110, 1)).collect();
        Block::seal(
            BlockHeader {
                step: 7,
                parent_id: BlockHash::ZERO,
                signer: 3,
                kind: BlockKind::InTurn,
                weight: 2,
                uncle_refs: vec![],
                created_at: 21_000.0,
            },
            txs,
        )
    }

    fn pool_with(txs: &[Transaction]) -> TxPool {
        let mut p = TxPool::with_capacity(txs.len().max(1), 1);
        for t in txs {
            p.insert(t.clone());
        }
        p
    }

    #[test]
    fn short_id_is_deterministic() {
        let id = TxId([7; 32]);
        assert_eq!(short_id(&id, 5), short_id(&id, 5));
        assert!(short_id(&id, 5).0 < 1 << 48);
        assert_eq!(ShortId::from_bytes(short_id(&id, 5).to_bytes()), short_id(&id, 5));
    }

    #[test]
    fn no_collisions_among_ten_thousand_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ids: Vec<TxId> = (0..10_000).map(|_| TxId(rng.gen())).collect();
        let salt = block_salt(1, 2);
        let shorts: Vec<u64> = ids.iter().map(|i| short_id(i, salt).0).collect();
        let mut collisions = 0;
        for i in 0..shorts.len() {
            for j in i + 1..shorts.len() {
                if shorts[i] == shorts[j] {
                    collisions += 1;
                }
            }
        }
        assert_eq!(collisions, 0);
    }

    #[test]
    fn injected_collision_is_refetched() {
        let salt = 77;
        let bits = 16;
        let mut seen: HashMap<u64, Transaction> = HashMap::new();
        let mut nonce = 0;
        let (a, b) = loop {
            let tx = Transaction::synthetic(9, nonce, 110, 1);
            nonce += 1;
            let s = short_id_with_bits(&tx.id, salt, bits).0;
            if let Some(prev) = seen.insert(s, tx.clone()) {
                break (prev, tx);
            }
        };
        let mut blk = block(0, 0);
        blk = Block::seal(blk.header.clone(), vec![a.clone()]);
        let cb = encode_with_bits(&blk, |_| true, salt, bits);
        match decode(&cb, &pool_with(&[a, b])) {
            DecodeResult::NeedsTxs { missing, partial } => {
                assert_eq!(missing, vec![0]);
                assert_eq!(partial.ambiguous, 1);
                let fixed = partial.complete(get_missing(&blk, &missing)).unwrap();
                assert_eq!(fixed, blk);
            }
            other => panic!("expected ambiguity, got {other:?}"),
        }
    }

    #[test]
    fn full_filter_gives_all_short_ids() {
        let b = block(50, 1);
        let mut f = CountingBloomFilter::with_capacity(50, 2);
        b.txs.iter().for_each(|t| f.add(&t.id));
        let cb = encode(&b, &f, 9);
        assert_eq!(cb.short_count(), 50);
        assert_eq!(cb.encoded_len(), b.header.encoded_len() + cb.overhead_len() + 6 * 50);
    }

    #[test]
    fn empty_filter_gives_full_block_payload() {
        let b = block(50, 1);
        let f = CountingBloomFilter::with_capacity(50, 2);
        let cb = encode(&b, &f, 9);
        assert_eq!(cb.short_count(), 0);
        assert_eq!(cb.encoded_len() - cb.overhead_len(), b.encoded_len());
        match decode(&cb, &TxPool::with_capacity(1, 0)) {
            DecodeResult::Complete(back) => assert_eq!(back, b),
            other => panic!("{other:?}"),
        }
    }

    /// Pool similarity 0.9 on a 1000-tx block of 110-byte transactions.
    #[test]
    fn compression_at_ninety_percent_similarity() {
        let m = 1000;
        let b = block(m, 4);
        let mut f = CountingBloomFilter::with_capacity(4 * m, 5);
        let present = |i: usize| !i.is_multiple_of(10);
        b.txs.iter().enumerate().filter(|(i, _)| present(*i)).for_each(|(_, t)| f.add(&t.id));
        let cb = encode(&b, &f, 3);
        let payload = cb.encoded_len() - b.header.encoded_len() - cb.overhead_len();
        // false positives may turn a few absent txs into short ids
        assert!(payload <= 900 * 6 + 100 * 110);
        assert!(payload >= 900 * 6 + 80 * 110 + 20 * 6);
        let ratio = b.encoded_len() as f64 / cb.encoded_len() as f64;
        assert!(ratio > 5.0, "ratio {ratio}");
        assert!((110.0f64 / 6.0 - 18.33).abs() < 0.01);
    }

    #[test]
    fn evicted_tx_needs_fetch() {
        let b = block(10, 2);
        let mut pool = pool_with(&b.txs);
        let cb = encode(&b, pool.filter(), 4);
        pool.remove(&b.txs[6].id);
        match decode(&cb, &pool) {
            DecodeResult::NeedsTxs { missing, .. } => assert_eq!(missing, vec![6]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bcb_round_cost() {
        let b = block(100, 5);
        let cb = baseline_bcb_encode(&b, 8);
        assert!(matches!(decode(&cb, &pool_with(&b.txs)), DecodeResult::Complete(_)));
        let holder: Vec<Transaction> = b.txs.iter().skip(20).cloned().collect();
        match decode(&cb, &pool_with(&holder)) {
            DecodeResult::NeedsTxs { missing, .. } => {
                assert_eq!(missing.len(), 20);
                let resp = get_missing(&b, &missing);
                assert_eq!(missing_response_len(&resp), 36 + 20 * (4 + 110));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wire_round_trip() {
        let b = block(20, 6);
        let mut f = CountingBloomFilter::with_capacity(20, 2);
        b.txs.iter().step_by(3).for_each(|t| f.add(&t.id));
        let cb = encode(&b, &f, 12);
        let bytes = cb.encode();
        assert_eq!(bytes.len(), cb.encoded_len());
        assert_eq!(CompactBlock::decode_wire(&bytes).unwrap(), cb);
    }

    proptest! {
        #[test]
        fn round_trip_and_size_bounds(m in 0usize..120, keep in proptest::collection::vec(any::<bool>(), 120),
                                      extra in 0usize..40, seed: u64, salt: u64) {
            let b = block(m, seed);
            let held: Vec<Transaction> = b.txs.iter().zip(&keep).filter(|(_, k)| **k).map(|(t, _)| t.clone()).collect();
            let mut pool = pool_with(&held);
            for i in 0..extra as u64 { pool.insert(Transaction::synthetic(seed ^ 1, 10_000 + i, 110, 1)); }
            let cb = encode(&b, pool.filter(), salt);
            prop_assert!(cb.encoded_len() - cb.overhead_len() <= b.encoded_len());
            let rebuilt = match decode(&cb, &pool) {
                DecodeResult::Complete(x) => x,
                DecodeResult::NeedsTxs { missing, partial } => partial.complete(get_missing(&b, &missing)).unwrap(),
            };
            prop_assert_eq!(rebuilt.encode(), b.encode());

            // a superset filter never grows the encoding
            let mut bigger = pool.filter().clone();
            for t in b.txs.iter().take(m / 2) { bigger.add(&t.id); }
            prop_assert!(encode(&b, &bigger, salt).encoded_len() <= cb.encoded_len());
        }
    }
}
