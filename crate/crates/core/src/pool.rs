//! Pending-transaction pool kept in sync with a counting Bloom filter.

use std::collections::{BTreeMap, HashMap};

use crate::cbf::{CbfError, CountingBloomFilter};
use crate::chain::Transaction;
use crate::ids::TxId;

#[derive(Clone, Debug)]
pub struct TxPool {
    by_nonce: BTreeMap<u64, Transaction>,
    nonce_of: HashMap<TxId, u64>,
    filter: CountingBloomFilter,
    rebuilds: u64,
}

impl TxPool {
    pub fn new(filter: CountingBloomFilter) -> Self {
        Self { by_nonce: BTreeMap::new(), nonce_of: HashMap::new(), filter, rebuilds: 0 }
    }

    pub fn with_capacity(expected_items: usize, salt: u64) -> Self {
        Self::new(CountingBloomFilter::with_capacity(expected_items, salt))
    }

    pub fn len(&self) -> usize {
        self.by_nonce.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_nonce.is_empty()
    }

    pub fn contains(&self, id: &TxId) -> bool {
        self.nonce_of.contains_key(id)
    }

    pub fn get(&self, id: &TxId) -> Option<&Transaction> {
        self.nonce_of.get(id).and_then(|n| self.by_nonce.get(n))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transaction> {
        self.by_nonce.values()
    }

    pub fn filter(&self) -> &CountingBloomFilter {
        &self.filter
    }

    /// Times the filter had to be rebuilt after an underflow.
    pub fn filter_rebuilds(&self) -> u64 {
        self.rebuilds
    }

    /// Returns false if the id was already pooled.
    pub fn insert(&mut self, tx: Transaction) -> bool {
        if self.nonce_of.contains_key(&tx.id) {
            return false;
        }
        self.filter.add(&tx.id);
        self.nonce_of.insert(tx.id, tx.nonce);
        self.by_nonce.insert(tx.nonce, tx);
        true
    }

    pub fn remove(&mut self, id: &TxId) -> Option<Transaction> {
        let nonce = self.nonce_of.remove(id)?;
        let tx = self.by_nonce.remove(&nonce)?;
        if let Err(CbfError::UnderflowAttempt) = self.filter.remove(id) {
            self.rebuilds += 1;
            let ids: Vec<TxId> = self.nonce_of.keys().copied().collect();
            self.filter.rebuild(ids.iter());
        }
        Some(tx)
    }

    /// Oldest `m` transactions, in nonce order.
    pub fn select(&self, m: usize) -> Vec<Transaction> {
        self.by_nonce.values().take(m).cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_select_remove() {
        let mut p = TxPool::with_capacity(16, 3);
        for n in [5u64, 1, 3] {
            assert!(p.insert(Transaction::synthetic(0, n, 110, 1)));
        }
        assert!(!p.insert(Transaction::synthetic(0, 1, 110, 1)));
        let sel: Vec<u64> = p.select(2).iter().map(|t| t.nonce).collect();
        assert_eq!(sel, vec![1, 3]);
        let t = Transaction::synthetic(0, 3, 110, 1);
        assert!(p.filter().contains(&t.id));
        assert_eq!(p.remove(&t.id).map(|t| t.nonce), Some(3));
        assert!(!p.contains(&t.id));
        assert_eq!(p.len(), 2);
        assert_eq!(p.filter().population(), 2);
    }
}
