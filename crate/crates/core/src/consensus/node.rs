//! Per-node protocol state machine. Handlers return [`Action`]s that the
//! simulation kernel executes; nodes never touch the clock or network directly.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use rand::Rng;

use super::{
    in_turn_signer, role_of, sample_delay, BetaTable, CostModel, PcbMode, ProtocolParams,
    BETA_EWMA_ALPHA,
};
use crate::cbf::CountingBloomFilter;
use crate::chain::{Block, BlockHeader, BlockKind, Ledger, LedgerUpdate, Transaction};
use crate::ids::{BlockHash, NodeId};
use crate::pcb::{self, CompactBlock, DecodeResult, PartialBlock};
use crate::pool::TxPool;
use crate::trace::{MsgKind, TraceRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    InTurn,
    NoTurn,
    Forbidden,
}

/// Network payloads exchanged between nodes.
#[derive(Clone, Debug)]
pub enum Message {
    Block(Arc<Block>),
    /// `block` rides along so reconstructed blocks can share one allocation;
    /// it is not counted on the wire and is only used after a successful decode.
    Compact { cblock: CompactBlock, block: Arc<Block> },
    Cbf(Arc<CountingBloomFilter>),
    MissingRequest { hash: BlockHash, positions: Vec<usize> },
    MissingResponse { hash: BlockHash, txs: Vec<(usize, Transaction)> },
    BlockRequest { hash: BlockHash },
}

impl Message {
    pub fn wire_len(&self) -> usize {
        match self {
            Message::Block(b) => b.encoded_len(),
            Message::Compact { cblock, .. } => 32 + cblock.encoded_len(),
            Message::Cbf(f) => f.encoded_len(),
            Message::MissingRequest { positions, .. } => pcb::missing_request_len(positions.len()),
            Message::MissingResponse { txs, .. } => pcb::missing_response_len(txs),
            Message::BlockRequest { .. } => 32,
        }
    }

    pub fn kind(&self) -> MsgKind {
        match self {
            Message::Block(_) => MsgKind::Block,
            Message::Compact { .. } => MsgKind::Compact,
            Message::Cbf(_) => MsgKind::Cbf,
            Message::MissingRequest { .. } => MsgKind::MissingRequest,
            Message::MissingResponse { .. } => MsgKind::MissingResponse,
            Message::BlockRequest { .. } => MsgKind::BlockRequest,
        }
    }
}

#[derive(Clone, Debug)]
pub enum NodeEvent {
    Message { from: NodeId, msg: Message },
    VerifyDone { block: Arc<Block> },
    Produce { token: u64, step: u64, kind: BlockKind, take: usize, x: Option<f64> },
}

#[derive(Clone, Debug)]
pub enum Action {
    Send { to: NodeId, msg: Message },
    /// One copy per receiver, sharing the sender's uplink.
    Broadcast { copies: Vec<(NodeId, Message)> },
    Timer { at: f64, event: NodeEvent },
    /// This node now holds the reconstructed block.
    Holds { hash: BlockHash },
    /// `wire_bytes` is the mean size of the copies sent to peers.
    Produced { block: Arc<Block>, wire_bytes: usize, x: Option<f64>, r: f64, a: f64 },
    Trace(TraceRecord),
}

/// A compact block waiting on a missing-transaction response.
#[derive(Clone, Debug)]
pub struct PendingCompact {
    pub from: NodeId,
    pub partial: PartialBlock,
    pub block: Arc<Block>,
}

/// Settings shared by every node of a run.
#[derive(Clone, Debug)]
pub struct NodeConfig {
    pub params: ProtocolParams,
    pub costs: CostModel<f64>,
    /// Steps whose in-turn signer stays silent.
    pub failed_steps: BTreeSet<u64>,
    /// Expected pool size used to size the counting Bloom filter.
    pub pool_capacity: usize,
}

/// Running comparison between the beta estimate and the next observation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BetaTracking {
    pub abs_error_sum: f64,
    pub observed_sum: f64,
    pub samples: u64,
}

impl BetaTracking {
    /// Mean absolute error relative to the mean observation.
    pub fn relative_error(&self) -> Option<f64> {
        (self.samples > 0 && self.observed_sum > 0.0).then(|| self.abs_error_sum / self.observed_sum)
    }
}

pub struct NodeState {
    pub id: NodeId,
    cfg: Arc<NodeConfig>,
    pub ledger: Ledger,
    pub pool: TxPool,
    pub beta: BetaTable,
    pub beta_tracking: BetaTracking,
    peer_filters: HashMap<NodeId, Arc<CountingBloomFilter>>,
    pending: HashMap<BlockHash, PendingCompact>,
    verifying: HashSet<BlockHash>,
    orphans: HashMap<BlockHash, Vec<(NodeId, Arc<Block>)>>,
    requested: HashSet<BlockHash>,
    plan_token: u64,
    role: Role,
}

impl NodeState {
    pub fn new(id: NodeId, cfg: Arc<NodeConfig>, genesis: Arc<Block>) -> Self {
        let salt = 0x5eed_0000_0000_0000 ^ id as u64;
        let pool = TxPool::with_capacity(cfg.pool_capacity.max(1), salt);
        Self {
            id,
            cfg,
            ledger: Ledger::new(genesis),
            pool,
            beta: BetaTable::new(BETA_EWMA_ALPHA),
            beta_tracking: BetaTracking::default(),
            peer_filters: HashMap::new(),
            pending: HashMap::new(),
            verifying: HashSet::new(),
            orphans: HashMap::new(),
            requested: HashSet::new(),
            plan_token: 0,
            role: Role::Forbidden,
        }
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.cfg.params
    }

    /// Role for the step after the current head.
    pub fn role(&self) -> Role {
        self.role
    }

    /// Adds freshly gossiped transactions unless already committed locally.
    pub fn receive_txs(&mut self, txs: &[Transaction]) {
        for tx in txs {
            self.pool.insert(tx.clone());
        }
    }

    /// Plans the first step; call once at time zero.
    pub fn start<R: Rng + ?Sized>(&mut self, now: f64, rng: &mut R) -> Vec<Action> {
        let mut out = Vec::new();
        self.plan(now, rng, &mut out);
        out
    }

    pub fn handle<R: Rng + ?Sized>(&mut self, now: f64, event: NodeEvent, rng: &mut R) -> Vec<Action> {
        let mut out = Vec::new();
        match event {
            NodeEvent::Message { from, msg } => self.on_message(now, from, msg, &mut out),
            NodeEvent::VerifyDone { block } => self.on_verified(now, block, rng, &mut out),
            NodeEvent::Produce { token, step, kind, take, x } => {
                if token == self.plan_token {
                    self.produce(now, step, kind, take, x, rng, &mut out);
                }
            }
        }
        out
    }

    fn on_message(&mut self, now: f64, from: NodeId, msg: Message, out: &mut Vec<Action>) {
        match msg {
            Message::Block(block) => {
                if !self.known(&block.hash()) {
                    out.push(Action::Holds { hash: block.hash() });
                    self.on_block_received(now, from, block, out);
                }
            }
            Message::Compact { cblock, block } => {
                let hash = block.hash();
                if self.known(&hash) || self.pending.contains_key(&hash) {
                    return;
                }
                match pcb::decode(&cblock, &self.pool) {
                    DecodeResult::Complete(rebuilt) => {
                        let block = if rebuilt.hash() == hash { block } else { Arc::new(rebuilt) };
                        out.push(Action::Holds { hash: block.hash() });
                        self.on_block_received(now, from, block, out);
                    }
                    DecodeResult::NeedsTxs { missing, partial } => {
                        out.push(Action::Trace(TraceRecord::MissingRound {
                            t: now,
                            node: self.id,
                            hash,
                            missing: missing.len(),
                            ambiguous: partial.ambiguous,
                        }));
                        self.pending.insert(hash, PendingCompact { from, partial, block });
                        out.push(Action::Send {
                            to: from,
                            msg: Message::MissingRequest { hash, positions: missing },
                        });
                    }
                }
            }
            Message::Cbf(filter) => {
                self.peer_filters.insert(from, filter);
            }
            Message::MissingRequest { hash, positions } => {
                if let Some(block) = self.ledger.get(&hash) {
                    let txs = pcb::get_missing(block, &positions);
                    out.push(Action::Send { to: from, msg: Message::MissingResponse { hash, txs } });
                }
            }
            Message::MissingResponse { hash, txs } => {
                let Some(p) = self.pending.remove(&hash) else { return };
                match p.partial.complete(txs) {
                    Ok(rebuilt) => {
                        let block = if rebuilt.hash() == hash { p.block } else { Arc::new(rebuilt) };
                        out.push(Action::Holds { hash: block.hash() });
                        self.on_block_received(now, p.from, block, out);
                    }
                    Err(_) => {
                        out.push(Action::Send { to: p.from, msg: Message::BlockRequest { hash } });
                    }
                }
            }
            Message::BlockRequest { hash } => {
                if let Some(block) = self.ledger.get(&hash) {
                    out.push(Action::Send { to: from, msg: Message::Block(block.clone()) });
                }
            }
        }
    }

    fn known(&self, hash: &BlockHash) -> bool {
        self.ledger.contains(hash) || self.verifying.contains(hash)
    }

    /// Starts verification of a reconstructed block, or parks it until its parent arrives.
    pub fn on_block_received(&mut self, now: f64, from: NodeId, block: Arc<Block>, out: &mut Vec<Action>) {
        let hash = block.hash();
        if self.known(&hash) {
            return;
        }
        let parent = block.parent();
        if !self.ledger.contains(&parent) {
            let in_flight = self.verifying.contains(&parent) || self.pending.contains_key(&parent);
            let parked = self.orphans.entry(parent).or_default();
            if parked.iter().all(|(_, b)| b.hash() != hash) {
                parked.push((from, block));
            }
            if !in_flight && self.requested.insert(parent) {
                out.push(Action::Send { to: from, msg: Message::BlockRequest { hash: parent } });
            }
            return;
        }
        self.verifying.insert(hash);
        let at = now + self.cfg.costs.v(block.txs.len());
        out.push(Action::Timer { at, event: NodeEvent::VerifyDone { block } });
    }

    fn on_verified<R: Rng + ?Sized>(&mut self, now: f64, block: Arc<Block>, rng: &mut R, out: &mut Vec<Action>) {
        let hash = block.hash();
        self.verifying.remove(&hash);
        self.requested.remove(&hash);
        let signer = block.signer();
        let kind = block.kind();
        let created_at = block.header.created_at;
        let update = match self.ledger.submit(block, &self.cfg.params) {
            Ok(u) => u,
            Err(_) => return,
        };
        if let LedgerUpdate::Rejected(reason) = update {
            out.push(Action::Trace(TraceRecord::Rejected { t: now, node: self.id, hash, reason }));
        } else {
            if kind == BlockKind::InTurn && signer != self.id {
                self.update_beta(signer, now - created_at);
            }
            self.apply_update(now, &update, rng, out);
        }
        if let Some(children) = self.orphans.remove(&hash) {
            for (from, child) in children {
                self.on_block_received(now, from, child, out);
            }
        }
    }

    pub fn update_beta(&mut self, signer: NodeId, observed_ms: f64) {
        if self.beta.has_estimate(signer) {
            let t = &mut self.beta_tracking;
            t.abs_error_sum += (self.beta.estimate(signer) - observed_ms).abs();
            t.observed_sum += observed_ms;
            t.samples += 1;
        }
        self.beta.update(signer, observed_ms);
    }

    fn apply_update<R: Rng + ?Sized>(
        &mut self,
        now: f64,
        update: &LedgerUpdate,
        rng: &mut R,
        out: &mut Vec<Action>,
    ) {
        if update.deadlock_tie() {
            let step = self.ledger.head_block().step();
            out.push(Action::Trace(TraceRecord::DeadlockTie { t: now, node: self.id, step }));
        }
        match update {
            LedgerUpdate::Extended { head } => {
                let block = self.ledger.get(head).expect("head stored").clone();
                for tx in &block.txs {
                    self.pool.remove(&tx.id);
                }
            }
            LedgerUpdate::Reorged { abandoned, adopted, .. } => {
                let adopted: Vec<Arc<Block>> =
                    adopted.iter().map(|h| self.ledger.get(h).expect("adopted stored").clone()).collect();
                let now_committed: HashSet<_> = adopted.iter().flat_map(|b| b.txs.iter().map(|t| t.id)).collect();
                for h in abandoned {
                    let b = self.ledger.get(h).expect("abandoned stored").clone();
                    for tx in &b.txs {
                        if !now_committed.contains(&tx.id) {
                            self.pool.insert(tx.clone());
                        }
                    }
                }
                for tx in adopted.iter().flat_map(|b| b.txs.iter()) {
                    self.pool.remove(&tx.id);
                }
            }
            _ => return,
        }
        let head = self.ledger.head_block();
        out.push(Action::Trace(TraceRecord::Head {
            t: now,
            node: self.id,
            step: head.step(),
            hash: head.hash(),
            reorg: matches!(update, LedgerUpdate::Reorged { .. }),
        }));
        self.plan(now, rng, out);
    }

    /// Works out this node's role for the step after the head and arms the
    /// matching production timer. Any earlier plan is cancelled.
    fn plan<R: Rng + ?Sized>(&mut self, now: f64, rng: &mut R, out: &mut Vec<Action>) {
        self.plan_token += 1;
        let p = &self.cfg.params;
        let head = self.ledger.head_block().clone();
        let step = head.step() + 1;
        let last = (head.kind() != BlockKind::Genesis).then(|| head.signer());
        let in_turn = in_turn_signer(step, p.order_mode, p.n, last);
        let recents = self.ledger.recents(head.hash(), p.recents_window());
        self.role = role_of(self.id, p.n, in_turn, &recents, p.order_mode).unwrap_or(Role::Forbidden);

        if p.pcb_mode == PcbMode::Pcb && self.role != Role::InTurn && in_turn != self.id {
            out.push(Action::Send { to: in_turn, msg: Message::Cbf(Arc::new(self.pool.filter().clone())) });
        }

        let deadline = step as f64 * p.step_ms;
        let (kind, fire, x) = match self.role {
            Role::Forbidden => return,
            Role::InTurn => {
                if self.cfg.failed_steps.contains(&step) {
                    out.push(Action::Trace(TraceRecord::InTurnFailed { t: now, node: self.id, step }));
                    return;
                }
                (BlockKind::InTurn, deadline, None)
            }
            Role::NoTurn => {
                let beta = self.beta.estimate(in_turn);
                let s = sample_delay(p.delay_mode, p.w_ms, beta, rng);
                if s.beta_clamped {
                    out.push(Action::Trace(TraceRecord::BetaClamped {
                        t: now,
                        node: self.id,
                        signer: in_turn,
                        beta,
                    }));
                }
                (BlockKind::NoTurn, deadline + s.x_ms, Some(s.x_ms))
            }
        };
        let take = if fire - now >= self.cfg.costs.prepare(p.m) { p.m } else { 0 };
        let ready = now + self.cfg.costs.prepare(take);
        out.push(Action::Timer {
            at: fire.max(ready),
            event: NodeEvent::Produce { token: self.plan_token, step, kind, take, x },
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn produce<R: Rng + ?Sized>(
        &mut self,
        now: f64,
        step: u64,
        kind: BlockKind,
        take: usize,
        x: Option<f64>,
        rng: &mut R,
        out: &mut Vec<Action>,
    ) {
        let p = self.cfg.params.clone();
        let parent = self.ledger.head();
        let header = BlockHeader {
            step,
            parent_id: parent,
            signer: self.id,
            kind,
            weight: kind.weight(),
            uncle_refs: self.ledger.uncle_candidates(parent, step, p.n),
            created_at: now,
        };
        let block = Arc::new(Block::seal(header, self.pool.select(take)));
        let salt = pcb::block_salt(step, self.id);
        let copies = (0..p.n)
            .filter(|&to| to != self.id)
            .map(|to| {
                let msg = match p.pcb_mode {
                    PcbMode::FullBlock => Message::Block(block.clone()),
                    PcbMode::Bcb => Message::Compact {
                        cblock: pcb::baseline_bcb_encode(&block, salt),
                        block: block.clone(),
                    },
                    PcbMode::Pcb => {
                        let cblock = match self.peer_filters.get(&to) {
                            Some(f) => pcb::encode(&block, f, salt),
                            None => pcb::encode_with_bits(&block, |_| false, salt, pcb::SHORT_ID_BITS),
                        };
                        Message::Compact { cblock, block: block.clone() }
                    }
                };
                (to, msg)
            })
            .collect::<Vec<_>>();
        let wire_bytes = if copies.is_empty() {
            block.encoded_len()
        } else {
            copies.iter().map(|(_, m)| m.wire_len()).sum::<usize>() / copies.len()
        };
        out.push(Action::Produced {
            block: block.clone(),
            wire_bytes,
            x,
            r: self.cfg.costs.r(take),
            a: self.cfg.costs.a(take),
        });
        out.push(Action::Broadcast { copies });
        let update = self.ledger.append_candidate(block).expect("own block extends the head");
        self.apply_update(now, &update, rng, out);
    }
}
