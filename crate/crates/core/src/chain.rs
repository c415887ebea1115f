//! Blocks, the per-node ledger and weight-based fork choice.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::{in_turn_exempt_from_recents, in_turn_signer, no_turn_set, ProtocolParams};
use crate::ids::{sha256, BlockHash, NodeId, TxId};

/// Smallest full transaction the bandwidth model accepts (a plain token transfer).
pub const MIN_TX_SIZE: u32 = 110;

/// Fixed part of an encoded transaction: id, nonce, fee, payload size.
pub const TX_FIXED_LEN: usize = 32 + 8 + 8 + 4;

/// Fixed part of an encoded header, excluding uncle references.
pub const HEADER_FIXED_LEN: usize = 8 + 32 + 4 + 1 + 1 + 8 + 2 + 4;
pub const UNCLE_REF_LEN: usize = 8 + 4;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transaction {
    pub id: TxId,
    pub payload_size: u32,
    pub nonce: u64,
    pub fee: u64,
}

impl Transaction {
    /// Builds a transaction whose id is derived from `(seed, nonce)`.
    pub fn synthetic(seed: u64, nonce: u64, payload_size: u32, fee: u64) -> Self {
        let id = TxId(sha256(&[&seed.to_le_bytes(), &nonce.to_le_bytes()]));
        Self { id, payload_size: payload_size.max(MIN_TX_SIZE), nonce, fee }
    }

    pub fn encoded_len(&self) -> usize {
        self.payload_size as usize
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.extend_from_slice(self.id.as_bytes());
        out.extend_from_slice(&self.nonce.to_le_bytes());
        out.extend_from_slice(&self.fee.to_le_bytes());
        out.extend_from_slice(&self.payload_size.to_le_bytes());
        out.resize(start + self.encoded_len(), 0);
    }

    pub fn decode(buf: &[u8]) -> Result<(Self, usize), CodecError> {
        if buf.len() < TX_FIXED_LEN {
            return Err(CodecError::Truncated);
        }
        let mut r = Reader::new(buf);
        let id = TxId(r.array()?);
        let nonce = r.u64()?;
        let fee = r.u64()?;
        let payload_size = r.u32()?;
        if payload_size < MIN_TX_SIZE {
            return Err(CodecError::BadTxSize(payload_size));
        }
        let len = payload_size as usize;
        if buf.len() < len {
            return Err(CodecError::Truncated);
        }
        Ok((Self { id, payload_size, nonce, fee }, len))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    Genesis,
    InTurn,
    NoTurn,
}

impl BlockKind {
    pub fn weight(self) -> u64 {
        match self {
            BlockKind::InTurn => 2,
            BlockKind::NoTurn => 1,
            BlockKind::Genesis => 0,
        }
    }

    fn tag(self) -> u8 {
        match self {
            BlockKind::Genesis => 0,
            BlockKind::InTurn => 1,
            BlockKind::NoTurn => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, CodecError> {
        match tag {
            0 => Ok(BlockKind::Genesis),
            1 => Ok(BlockKind::InTurn),
            2 => Ok(BlockKind::NoTurn),
            t => Err(CodecError::BadKind(t)),
        }
    }
}

/// A competing block observed by a signer and recorded in its own header.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UncleRef {
    pub step: u64,
    pub signer: NodeId,
}

/// Header fields shared by full and compact blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub step: u64,
    pub parent_id: BlockHash,
    pub signer: NodeId,
    pub kind: BlockKind,
    pub weight: u64,
    pub uncle_refs: Vec<UncleRef>,
    /// Simulated milliseconds at which the signer released the block.
    pub created_at: f64,
}

impl BlockHeader {
    pub fn encoded_len(&self) -> usize {
        HEADER_FIXED_LEN + UNCLE_REF_LEN * self.uncle_refs.len()
    }

    /// Encodes the header followed by `tx_count`.
    pub fn encode_into(&self, tx_count: usize, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(self.parent_id.as_bytes());
        out.extend_from_slice(&(self.signer as u32).to_le_bytes());
        out.push(self.kind.tag());
        out.push(self.weight as u8);
        out.extend_from_slice(&self.created_at.to_bits().to_le_bytes());
        out.extend_from_slice(&(self.uncle_refs.len() as u16).to_le_bytes());
        for u in &self.uncle_refs {
            out.extend_from_slice(&u.step.to_le_bytes());
            out.extend_from_slice(&(u.signer as u32).to_le_bytes());
        }
        out.extend_from_slice(&(tx_count as u32).to_le_bytes());
    }

    pub(crate) fn decode(r: &mut Reader<'_>) -> Result<(Self, usize), CodecError> {
        let step = r.u64()?;
        let parent_id = BlockHash(r.array()?);
        let signer = r.u32()? as NodeId;
        let kind = BlockKind::from_tag(r.u8()?)?;
        let weight = r.u8()? as u64;
        let created_at = f64::from_bits(r.u64()?);
        let uncles = r.u16()? as usize;
        let mut uncle_refs = Vec::with_capacity(uncles);
        for _ in 0..uncles {
            let step = r.u64()?;
            let signer = r.u32()? as NodeId;
            uncle_refs.push(UncleRef { step, signer });
        }
        let tx_count = r.u32()? as usize;
        Ok((Self { step, parent_id, signer, kind, weight, uncle_refs, created_at }, tx_count))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub header: BlockHeader,
    pub txs: Vec<Transaction>,
    hash: BlockHash,
}

impl Block {
    pub fn genesis() -> Self {
        Self::seal(
            BlockHeader {
                step: 0,
                parent_id: BlockHash::ZERO,
                signer: 0,
                kind: BlockKind::Genesis,
                weight: 0,
                uncle_refs: Vec::new(),
                created_at: 0.0,
            },
            Vec::new(),
        )
    }

    /// Computes the block hash over the header and the ordered tx ids.
    pub fn seal(header: BlockHeader, txs: Vec<Transaction>) -> Self {
        let hash = Self::compute_hash(&header, &txs);
        Self { header, txs, hash }
    }

    fn compute_hash(header: &BlockHeader, txs: &[Transaction]) -> BlockHash {
        let mut buf = Vec::with_capacity(header.encoded_len() + 32 * txs.len());
        header.encode_into(txs.len(), &mut buf);
        for tx in txs {
            buf.extend_from_slice(tx.id.as_bytes());
        }
        BlockHash(sha256(&[&buf]))
    }

    pub fn hash(&self) -> BlockHash {
        self.hash
    }

    pub fn step(&self) -> u64 {
        self.header.step
    }

    pub fn signer(&self) -> NodeId {
        self.header.signer
    }

    pub fn kind(&self) -> BlockKind {
        self.header.kind
    }

    pub fn parent(&self) -> BlockHash {
        self.header.parent_id
    }

    pub fn fees(&self) -> u64 {
        self.txs.iter().map(|t| t.fee).sum()
    }

    /// Length of the canonical binary encoding, the size charged to the network.
    pub fn encoded_len(&self) -> usize {
        self.header.encoded_len() + self.txs.iter().map(Transaction::encoded_len).sum::<usize>()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.header.encode_into(self.txs.len(), &mut out);
        for tx in &self.txs {
            tx.encode_into(&mut out);
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(buf);
        let (header, count) = BlockHeader::decode(&mut r)?;
        let mut txs = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let (tx, len) = Transaction::decode(r.rest())?;
            r.skip(len)?;
            txs.push(tx);
        }
        if !r.rest().is_empty() {
            return Err(CodecError::TrailingBytes);
        }
        Ok(Self::seal(header, txs))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("block serializes")
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("buffer truncated")]
    Truncated,
    #[error("unknown block kind tag {0}")]
    BadKind(u8),
    #[error("transaction payload size {0} below minimum")]
    BadTxSize(u32),
    #[error("trailing bytes after block")]
    TrailingBytes,
    #[error("unknown compact entry tag {0}")]
    BadEntryTag(u8),
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.pos.checked_add(n).ok_or(CodecError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CodecError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn skip(&mut self, n: usize) -> Result<(), CodecError> {
        self.take(n).map(|_| ())
    }

    pub(crate) fn rest(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

/// Signers of the most recent blocks on a chain, newest first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RecentSigners {
    signers: VecDeque<NodeId>,
}

impl RecentSigners {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_newest_first(signers: impl IntoIterator<Item = NodeId>) -> Self {
        Self { signers: signers.into_iter().collect() }
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.signers.contains(&node)
    }

    pub fn len(&self) -> usize {
        self.signers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signers.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.signers.iter().copied()
    }

    /// Records a new signer, keeping at most `window` entries.
    pub fn push(&mut self, signer: NodeId, window: usize) {
        self.signers.push_front(signer);
        self.signers.truncate(window);
    }
}

/// Why a block failed verification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    NotAuthorized,
    RecentSigner,
    BadParent,
    TooManyTxs,
    WrongWeight,
    BadUncle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerifyResult {
    Accept,
    Reject(RejectReason),
}

impl VerifyResult {
    pub fn is_accept(self) -> bool {
        matches!(self, VerifyResult::Accept)
    }
}

/// Checks a block against its parent and the recents window of the parent chain.
pub fn verify_block(
    block: &Block,
    parent: &Block,
    params: &ProtocolParams,
    recents: &RecentSigners,
) -> VerifyResult {
    use RejectReason::*;
    let h = &block.header;
    if h.parent_id != parent.hash() || h.step != parent.step() + 1 || h.created_at < parent.header.created_at
    {
        return VerifyResult::Reject(BadParent);
    }
    if h.signer >= params.n || h.kind == BlockKind::Genesis {
        return VerifyResult::Reject(NotAuthorized);
    }
    if h.weight != h.kind.weight() {
        return VerifyResult::Reject(WrongWeight);
    }
    let last = (parent.kind() != BlockKind::Genesis).then(|| parent.signer());
    let in_turn = in_turn_signer(h.step, params.order_mode, params.n, last);
    let exempt = h.kind == BlockKind::InTurn && in_turn_exempt_from_recents(params.order_mode);
    if recents.contains(h.signer) && !exempt {
        return VerifyResult::Reject(RecentSigner);
    }
    let authorized = match h.kind {
        BlockKind::InTurn => h.signer == in_turn,
        BlockKind::NoTurn => no_turn_set(params.n, in_turn, recents)
            .map(|set| set.contains(&h.signer))
            .unwrap_or(false),
        BlockKind::Genesis => false,
    };
    if !authorized {
        return VerifyResult::Reject(NotAuthorized);
    }
    if block.txs.len() > params.m {
        return VerifyResult::Reject(TooManyTxs);
    }
    let lo = h.step.saturating_sub(params.n as u64);
    if h.uncle_refs.iter().any(|u| u.step < lo.max(1) || u.step >= h.step) {
        return VerifyResult::Reject(BadUncle);
    }
    VerifyResult::Accept
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("parent {0:?} unknown")]
    UnknownParent(BlockHash),
    #[error("block {0:?} already known")]
    DuplicateBlock(BlockHash),
}

/// Outcome of offering a block to the ledger.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LedgerUpdate {
    /// The block extended the previous head.
    Extended { head: BlockHash },
    /// The block was stored on a side branch; the head is unchanged.
    ForkCreated { tie: bool },
    /// The head moved to a different branch.
    Reorged {
        old_head: BlockHash,
        new_head: BlockHash,
        /// Blocks no longer on the committed chain, newest first.
        abandoned: Vec<BlockHash>,
        /// Blocks newly on the committed chain, oldest first.
        adopted: Vec<BlockHash>,
        tie: bool,
    },
    Rejected(RejectReason),
}

impl LedgerUpdate {
    pub fn head_changed(&self) -> bool {
        matches!(self, LedgerUpdate::Extended { .. } | LedgerUpdate::Reorged { .. })
    }

    /// True when the new block matched the head's cumulative weight.
    pub fn deadlock_tie(&self) -> bool {
        matches!(self, LedgerUpdate::ForkCreated { tie: true } | LedgerUpdate::Reorged { tie: true, .. })
    }
}

#[derive(Clone, Debug)]
struct Entry {
    block: Arc<Block>,
    total_weight: u64,
    total_txs: u64,
}

/// All verified blocks known to one node, with the heaviest chain as head.
#[derive(Clone, Debug)]
pub struct Ledger {
    entries: HashMap<BlockHash, Entry>,
    by_step: BTreeMap<u64, Vec<BlockHash>>,
    genesis: BlockHash,
    head: BlockHash,
}

impl Ledger {
    pub fn new(genesis: Arc<Block>) -> Self {
        let hash = genesis.hash();
        let mut entries = HashMap::new();
        entries.insert(hash, Entry { block: genesis, total_weight: 0, total_txs: 0 });
        let mut by_step = BTreeMap::new();
        by_step.insert(0, vec![hash]);
        Self { entries, by_step, genesis: hash, head: hash }
    }

    pub fn genesis(&self) -> BlockHash {
        self.genesis
    }

    pub fn head(&self) -> BlockHash {
        self.head
    }

    pub fn head_block(&self) -> &Arc<Block> {
        &self.entries[&self.head].block
    }

    pub fn contains(&self, hash: &BlockHash) -> bool {
        self.entries.contains_key(hash)
    }

    pub fn get(&self, hash: &BlockHash) -> Option<&Arc<Block>> {
        self.entries.get(hash).map(|e| &e.block)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_weight(&self, hash: &BlockHash) -> Option<u64> {
        self.entries.get(hash).map(|e| e.total_weight)
    }

    /// Transactions committed on the chain ending at `hash`.
    pub fn total_txs(&self, hash: &BlockHash) -> Option<u64> {
        self.entries.get(hash).map(|e| e.total_txs)
    }

    pub fn blocks_at_step(&self, step: u64) -> impl Iterator<Item = &Arc<Block>> {
        self.by_step.get(&step).into_iter().flatten().map(|h| &self.entries[h].block)
    }

    /// Walks from `hash` back to genesis, inclusive.
    pub fn ancestry(&self, hash: BlockHash) -> impl Iterator<Item = &Arc<Block>> {
        let mut cur = self.entries.get(&hash);
        std::iter::from_fn(move || {
            let e = cur?;
            let b = &e.block;
            cur = if b.kind() == BlockKind::Genesis { None } else { self.entries.get(&b.parent()) };
            Some(b)
        })
    }

    /// Committed chain from genesis to head.
    pub fn committed(&self) -> Vec<Arc<Block>> {
        let mut v: Vec<_> = self.ancestry(self.head).cloned().collect();
        v.reverse();
        v
    }

    /// Signers of the last `window` non-genesis blocks ending at `tip`.
    pub fn recents(&self, tip: BlockHash, window: usize) -> RecentSigners {
        RecentSigners::from_newest_first(
            self.ancestry(tip)
                .take_while(|b| b.kind() != BlockKind::Genesis)
                .take(window)
                .map(|b| b.signer()),
        )
    }

    /// Known blocks for steps `[step - n, step)` that are off the chain ending at
    /// `parent` and not already referenced as uncles by that chain.
    pub fn uncle_candidates(&self, parent: BlockHash, step: u64, n: usize) -> Vec<UncleRef> {
        let lo = step.saturating_sub(n as u64).max(1);
        let chain: Vec<&Arc<Block>> =
            self.ancestry(parent).take_while(|b| b.step() >= lo.saturating_sub(n as u64)).collect();
        let on_chain: HashSet<BlockHash> = chain.iter().map(|b| b.hash()).collect();
        let mut referenced: HashSet<UncleRef> = HashSet::new();
        let mut committed_at: HashSet<UncleRef> = HashSet::new();
        for b in &chain {
            referenced.extend(b.header.uncle_refs.iter().copied());
            committed_at.insert(UncleRef { step: b.step(), signer: b.signer() });
        }
        let mut out: Vec<UncleRef> = self
            .by_step
            .range(lo..step)
            .flat_map(|(_, hs)| hs.iter())
            .filter(|h| !on_chain.contains(h))
            .map(|h| {
                let b = &self.entries[h].block;
                UncleRef { step: b.step(), signer: b.signer() }
            })
            .filter(|u| !referenced.contains(u) && !committed_at.contains(u))
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Fork-choice key: heavier wins, then the smaller hash.
    fn beats(&self, a: &BlockHash, b: &BlockHash) -> bool {
        let wa = self.entries[a].total_weight;
        let wb = self.entries[b].total_weight;
        wa > wb || (wa == wb && a < b)
    }

    pub fn append_candidate(&mut self, block: Arc<Block>) -> Result<LedgerUpdate, LedgerError> {
        let hash = block.hash();
        if self.entries.contains_key(&hash) {
            return Err(LedgerError::DuplicateBlock(hash));
        }
        let parent = self
            .entries
            .get(&block.parent())
            .ok_or(LedgerError::UnknownParent(block.parent()))?;
        let total_weight = parent.total_weight + block.header.weight;
        let total_txs = parent.total_txs + block.txs.len() as u64;
        self.by_step.entry(block.step()).or_default().push(hash);
        let parent_id = block.parent();
        self.entries.insert(hash, Entry { block, total_weight, total_txs });

        let old = self.head;
        let tie = self.entries[&old].total_weight == total_weight;
        if !self.beats(&hash, &old) {
            return Ok(LedgerUpdate::ForkCreated { tie });
        }
        self.head = hash;
        if parent_id == old {
            return Ok(LedgerUpdate::Extended { head: hash });
        }
        let (abandoned, adopted) = self.diverging_branches(old, hash);
        Ok(LedgerUpdate::Reorged { old_head: old, new_head: hash, abandoned, adopted, tie })
    }

    /// Verifies against the parent chain and appends; rejected blocks are not stored.
    pub fn submit(
        &mut self,
        block: Arc<Block>,
        params: &ProtocolParams,
    ) -> Result<LedgerUpdate, LedgerError> {
        if self.entries.contains_key(&block.hash()) {
            return Err(LedgerError::DuplicateBlock(block.hash()));
        }
        let parent = self.get(&block.parent()).ok_or(LedgerError::UnknownParent(block.parent()))?;
        let recents = self.recents(parent.hash(), params.recents_window());
        match verify_block(&block, parent, params, &recents) {
            VerifyResult::Accept => self.append_candidate(block),
            VerifyResult::Reject(r) => Ok(LedgerUpdate::Rejected(r)),
        }
    }

    fn diverging_branches(&self, old: BlockHash, new: BlockHash) -> (Vec<BlockHash>, Vec<BlockHash>) {
        let mut a = old;
        let mut b = new;
        let mut abandoned = Vec::new();
        let mut adopted = Vec::new();
        while a != b {
            let sa = self.entries[&a].block.step();
            let sb = self.entries[&b].block.step();
            if sa >= sb {
                abandoned.push(a);
                a = self.entries[&a].block.parent();
            }
            if sb >= sa {
                adopted.push(b);
                b = self.entries[&b].block.parent();
            }
        }
        adopted.reverse();
        (abandoned, adopted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::{DelayMode, OrderMode, PcbMode};

    fn params(n: usize) -> ProtocolParams {
        ProtocolParams::new(n, 3000.0, 100, OrderMode::Fixed, DelayMode::Naive, PcbMode::FullBlock)
    }

    fn child(parent: &Block, signer: NodeId, kind: BlockKind) -> Arc<Block> {
        Arc::new(Block::seal(
            BlockHeader {
                step: parent.step() + 1,
                parent_id: parent.hash(),
                signer,
                kind,
                weight: kind.weight(),
                uncle_refs: vec![],
                created_at: parent.header.created_at + 3000.0,
            },
            vec![Transaction::synthetic(signer as u64, parent.step(), 110, 1)],
        ))
    }

    #[test]
    fn single_chain_extends() {
        let g = Arc::new(Block::genesis());
        let mut l = Ledger::new(g.clone());
        let b1 = child(&g, 2, BlockKind::InTurn);
        assert_eq!(l.append_candidate(b1.clone()).unwrap(), LedgerUpdate::Extended { head: b1.hash() });
        assert_eq!(l.head(), b1.hash());
    }

    #[test]
    fn in_turn_reorgs_no_turn() {
        let g = Arc::new(Block::genesis());
        let mut l = Ledger::new(g.clone());
        let nt = child(&g, 3, BlockKind::NoTurn);
        let it = child(&g, 2, BlockKind::InTurn);
        l.append_candidate(nt.clone()).unwrap();
        let up = l.append_candidate(it.clone()).unwrap();
        assert!(matches!(up, LedgerUpdate::Reorged { ref abandoned, .. } if abandoned == &vec![nt.hash()]));
        assert_eq!(l.head(), it.hash());
    }

    #[test]
    fn equal_weight_tie_is_order_independent() {
        let g = Arc::new(Block::genesis());
        let a = child(&g, 3, BlockKind::NoTurn);
        let b = child(&g, 4, BlockKind::NoTurn);
        let expected = a.hash().min(b.hash());
        for order in [[a.clone(), b.clone()], [b.clone(), a.clone()]] {
            let mut l = Ledger::new(g.clone());
            l.append_candidate(order[0].clone()).unwrap();
            let up = l.append_candidate(order[1].clone()).unwrap();
            assert!(up.deadlock_tie());
            assert_eq!(l.head(), expected);
        }
    }

    #[test]
    fn errors_for_orphans_and_duplicates() {
        let g = Arc::new(Block::genesis());
        let b1 = child(&g, 2, BlockKind::InTurn);
        let b2 = child(&b1, 3, BlockKind::InTurn);
        let mut l = Ledger::new(g);
        assert_eq!(l.append_candidate(b2), Err(LedgerError::UnknownParent(b1.hash())));
        l.append_candidate(b1.clone()).unwrap();
        assert_eq!(l.append_candidate(b1.clone()), Err(LedgerError::DuplicateBlock(b1.hash())));
    }

    #[test]
    fn verify_accepts_scheduled_signer() {
        let p = params(5);
        let g = Block::genesis();
        // fixed order: step 1 -> (1+1) mod 5
        let b = child(&g, 2, BlockKind::InTurn);
        assert_eq!(verify_block(&b, &g, &p, &RecentSigners::new()), VerifyResult::Accept);
    }

    #[test]
    fn verify_rejects_recent_signer() {
        let p = params(5);
        let g = Arc::new(Block::genesis());
        let b1 = child(&g, 2, BlockKind::InTurn);
        let b2 = child(&b1, 3, BlockKind::InTurn);
        let mut l = Ledger::new(g);
        l.append_candidate(b1).unwrap();
        l.append_candidate(b2.clone()).unwrap();
        // node 2 signed one step ago; window is floor(5/2) = 2
        let bad = child(&b2, 2, BlockKind::NoTurn);
        let recents = l.recents(b2.hash(), p.recents_window());
        assert_eq!(verify_block(&bad, &b2, &p, &recents), VerifyResult::Reject(RejectReason::RecentSigner));
    }

    #[test]
    fn verify_rejects_no_turn_outside_eligible_set() {
        let p = params(5);
        let g = Block::genesis();
        // step 1: in-turn 2, eligible no-turn {3, 4}; node 0 is forbidden
        for (signer, ok) in [(3, true), (4, true), (0, false), (1, false)] {
            let b = child(&g, signer, BlockKind::NoTurn);
            assert_eq!(verify_block(&b, &g, &p, &RecentSigners::new()).is_accept(), ok, "signer {signer}");
        }
    }

    #[test]
    fn verify_rejects_overfull_and_bad_weight() {
        let mut p = params(5);
        p.m = 0;
        let g = Block::genesis();
        let b = child(&g, 2, BlockKind::InTurn);
        assert_eq!(verify_block(&b, &g, &p, &RecentSigners::new()), VerifyResult::Reject(RejectReason::TooManyTxs));
        let mut h = b.header.clone();
        h.weight = 1;
        let bad = Block::seal(h, vec![]);
        assert_eq!(verify_block(&bad, &g, &p, &RecentSigners::new()), VerifyResult::Reject(RejectReason::WrongWeight));
    }

    #[test]
    fn binary_round_trip_and_size() {
        let g = Block::genesis();
        let mut b = (*child(&g, 2, BlockKind::InTurn)).clone();
        b.header.uncle_refs.push(UncleRef { step: 0, signer: 1 });
        let b = Block::seal(b.header.clone(), b.txs.clone());
        let bytes = b.encode();
        assert_eq!(bytes.len(), b.encoded_len());
        assert_eq!(bytes.len(), HEADER_FIXED_LEN + UNCLE_REF_LEN + 110);
        assert_eq!(Block::decode(&bytes).unwrap(), b);
        assert!(Block::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(b.to_json().contains("\"signer\": 2"));
    }

    #[test]
    fn uncle_candidates_skip_committed_and_referenced() {
        let g = Arc::new(Block::genesis());
        let mut l = Ledger::new(g.clone());
        let it = child(&g, 2, BlockKind::InTurn);
        let nt = child(&g, 3, BlockKind::NoTurn);
        l.append_candidate(it.clone()).unwrap();
        l.append_candidate(nt).unwrap();
        assert_eq!(l.uncle_candidates(it.hash(), 2, 5), vec![UncleRef { step: 1, signer: 3 }]);
    }
}
