//! Simulation kernel: drives nodes, network deliveries, the transaction
//! workload and the fault script from one event queue.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{Block, Ledger, Transaction, MIN_TX_SIZE};
use crate::consensus::{
    Action, BetaTracking, CostModel, Message, NodeConfig, NodeEvent, NodeState, ProtocolParams,
};
use crate::ids::{BlockHash, NodeId};
use crate::netsim::{DeliveryPlan, EventQueue, LinkOverrides, Network, DEFAULT_MAX_RETRIES};
use crate::trace::{MsgKind, Trace, TraceRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub overrides: LinkOverrides,
    pub uplink_sharing: bool,
    pub max_retries: u32,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self { overrides: LinkOverrides::default(), uplink_sharing: true, max_retries: DEFAULT_MAX_RETRIES }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub tx_size: u32,
    /// Probability that a node hears of a transaction when it is issued.
    pub similarity: f64,
    /// Pending transactions kept available, in multiples of `m`.
    pub backlog_blocks: f64,
    pub max_fee: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self { tx_size: MIN_TX_SIZE, similarity: 0.9, backlog_blocks: 3.0, max_fee: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub label: String,
    pub params: ProtocolParams,
    pub costs: CostModel<f64>,
    pub steps: u64,
    pub seed: u64,
    pub network: NetworkSpec,
    pub workload: WorkloadSpec,
    /// Per-step probability that the in-turn signer fails; never two steps in a row.
    pub fault_rate: f64,
    /// Leading steps excluded from statistics; defaults to `n`.
    pub warmup_steps: Option<u64>,
    /// Record every network delivery in the trace.
    pub trace_messages: bool,
}

impl SimConfig {
    pub fn new(params: ProtocolParams, steps: u64, seed: u64) -> Self {
        Self {
            label: String::new(),
            params,
            costs: CostModel::default(),
            steps,
            seed,
            network: NetworkSpec::default(),
            workload: WorkloadSpec::default(),
            fault_rate: 0.0,
            warmup_steps: None,
            trace_messages: true,
        }
    }

    pub fn warmup(&self) -> u64 {
        self.warmup_steps.unwrap_or(self.params.n as u64)
    }
}

/// Independent random streams so that changing the protocol does not
/// perturb the network table, fault script or workload.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Steps whose in-turn signer fails, drawn with no two consecutive.
pub fn fault_script<R: Rng + ?Sized>(steps: u64, rate: f64, rng: &mut R) -> BTreeSet<u64> {
    let mut out = BTreeSet::new();
    if rate <= 0.0 {
        return out;
    }
    for h in 1..=steps {
        if !out.contains(&(h - 1)) && rng.gen::<f64>() < rate {
            out.insert(h);
        }
    }
    out
}

#[derive(Debug)]
enum SimEvent {
    StepBoundary(u64),
    Deliver { from: NodeId, to: NodeId, msg: Message, attempts: u32 },
    Node { node: NodeId, event: NodeEvent },
}

struct Pending {
    created_at: f64,
    waiting: HashSet<NodeId>,
}

/// Output of one run.
pub struct SimOutcome {
    pub config: SimConfig,
    pub trace: Trace,
    /// Heaviest chain over every block produced in the run.
    pub committed: Vec<Arc<Block>>,
    pub failed_steps: BTreeSet<u64>,
    pub beta_tracking: BetaTracking,
    pub filter_rebuilds: u64,
    pub network: Network,
    /// Each node's own committed chain at the end of the run.
    pub node_chains: Vec<Vec<BlockHash>>,
}

pub struct Simulation {
    cfg: SimConfig,
    nodes: Vec<NodeState>,
    network: Network,
    queue: EventQueue<SimEvent>,
    observer: Ledger,
    trace: Trace,
    proto_rng: ChaCha8Rng,
    workload_rng: ChaCha8Rng,
    broadcasts: HashMap<BlockHash, Pending>,
    next_nonce: u64,
    failed_steps: BTreeSet<u64>,
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Self {
        Self::with_network(cfg, None)
    }

    /// Uses `network` instead of drawing a random link table.
    pub fn with_network(cfg: SimConfig, network: Option<Network>) -> Self {
        let n = cfg.params.n;
        let mut net_rng = stream(cfg.seed, 1);
        let mut network = network.unwrap_or_else(|| Network::random(n, cfg.network.overrides, &mut net_rng));
        network.uplink_sharing = cfg.network.uplink_sharing;
        network.max_retries = cfg.network.max_retries;
        let failed_steps = fault_script(cfg.steps + 2, cfg.fault_rate, &mut stream(cfg.seed, 2));
        let node_cfg = Arc::new(NodeConfig {
            params: cfg.params.clone(),
            costs: cfg.costs,
            failed_steps: failed_steps.clone(),
            pool_capacity: ((cfg.workload.backlog_blocks + 1.0) * cfg.params.m as f64).ceil() as usize,
        });
        let genesis = Arc::new(Block::genesis());
        let nodes = (0..n).map(|i| NodeState::new(i, node_cfg.clone(), genesis.clone())).collect();
        Self {
            nodes,
            network,
            queue: EventQueue::new(),
            observer: Ledger::new(genesis),
            trace: Trace::default(),
            proto_rng: stream(cfg.seed, 4),
            workload_rng: stream(cfg.seed, 3),
            broadcasts: HashMap::new(),
            next_nonce: 0,
            failed_steps,
            cfg,
        }
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn run(mut self) -> SimOutcome {
        let p = self.cfg.params.clone();
        self.trace.push(TraceRecord::RunInfo {
            n: p.n,
            step_ms: p.step_ms,
            w_ms: p.w_ms,
            m: p.m,
            steps: self.cfg.steps,
            seed: self.cfg.seed,
            warmup_steps: self.cfg.warmup(),
            label: self.cfg.label.clone(),
        });
        self.on_boundary(0.0, 0);
        for i in 0..self.nodes.len() {
            let acts = self.nodes[i].start(0.0, &mut self.proto_rng);
            self.execute(0.0, i, acts);
        }
        // two spare steps let the last counted step settle
        let t_end = (self.cfg.steps + 2) as f64 * p.step_ms;
        while let Some(t) = self.queue.peek_time() {
            if t > t_end {
                break;
            }
            let (now, ev) = self.queue.pop().expect("peeked");
            match ev {
                SimEvent::StepBoundary(h) => self.on_boundary(now, h),
                SimEvent::Deliver { from, to, msg, attempts } => {
                    if self.cfg.trace_messages {
                        self.trace.push(TraceRecord::Deliver {
                            t: now,
                            from,
                            to,
                            msg: msg.kind(),
                            bytes: msg.wire_len(),
                            attempts,
                        });
                    }
                    let acts = self.nodes[to].handle(now, NodeEvent::Message { from, msg }, &mut self.proto_rng);
                    self.execute(now, to, acts);
                }
                SimEvent::Node { node, event } => {
                    let acts = self.nodes[node].handle(now, event, &mut self.proto_rng);
                    self.execute(now, node, acts);
                }
            }
        }
        self.finish()
    }

    fn finish(mut self) -> SimOutcome {
        let committed = self.observer.committed();
        for b in committed.iter().skip(1) {
            self.trace.push(TraceRecord::Committed {
                step: b.step(),
                hash: b.hash(),
                signer: b.signer(),
                kind: b.kind(),
                tx_count: b.txs.len(),
                fees: b.fees(),
                created_at: b.header.created_at,
                uncles: b.header.uncle_refs.clone(),
            });
        }
        let mut beta_tracking = BetaTracking::default();
        let mut filter_rebuilds = 0;
        for node in &self.nodes {
            beta_tracking.abs_error_sum += node.beta_tracking.abs_error_sum;
            beta_tracking.observed_sum += node.beta_tracking.observed_sum;
            beta_tracking.samples += node.beta_tracking.samples;
            filter_rebuilds += node.pool.filter_rebuilds();
        }
        let node_chains = self.nodes.iter().map(|n| n.ledger.committed().iter().map(|b| b.hash()).collect()).collect();
        SimOutcome {
            node_chains,
            config: self.cfg,
            trace: self.trace,
            committed,
            failed_steps: self.failed_steps,
            beta_tracking,
            filter_rebuilds,
            network: self.network,
        }
    }

    /// Tops the pending backlog up to `backlog_blocks * m` and gossips the new
    /// transactions; each node hears of each one with probability `similarity`.
    fn on_boundary(&mut self, now: f64, step: u64) {
        let p = &self.cfg.params;
        let w = &self.cfg.workload;
        let target = (w.backlog_blocks * p.m as f64).round() as u64;
        let committed = self.observer.total_txs(&self.observer.head()).unwrap_or(0);
        let pending = self.next_nonce - committed;
        let count = target.saturating_sub(pending) as usize;
        let mut per_node: Vec<Vec<Transaction>> = vec![Vec::new(); self.nodes.len()];
        for _ in 0..count {
            let fee = self.workload_rng.gen_range(1..=w.max_fee.max(1));
            let tx = Transaction::synthetic(self.cfg.seed, self.next_nonce, w.tx_size, fee);
            self.next_nonce += 1;
            for bucket in per_node.iter_mut() {
                if self.workload_rng.gen::<f64>() < w.similarity {
                    bucket.push(tx.clone());
                }
            }
        }
        for (node, txs) in self.nodes.iter_mut().zip(&per_node) {
            node.receive_txs(txs);
        }
        self.trace.push(TraceRecord::StepBoundary { t: now, step, generated: count });
        self.queue.schedule((step + 1) as f64 * p.step_ms, SimEvent::StepBoundary(step + 1));
    }

    fn execute(&mut self, now: f64, node: NodeId, actions: Vec<Action>) {
        for a in actions {
            match a {
                Action::Send { to, msg } => self.send(now, node, vec![(to, msg)]),
                Action::Broadcast { copies } => self.send(now, node, copies),
                Action::Timer { at, event } => self.queue.schedule(at, SimEvent::Node { node, event }),
                Action::Holds { hash } => self.mark_held(now, hash, node),
                Action::Produced { block, wire_bytes, x, r, a } => {
                    let waiting = (0..self.nodes.len()).filter(|&i| i != node).collect();
                    self.broadcasts.insert(block.hash(), Pending { created_at: now, waiting });
                    self.trace.push(TraceRecord::BlockProduced {
                        t: now,
                        node,
                        step: block.step(),
                        hash: block.hash(),
                        parent: block.parent(),
                        kind: block.kind(),
                        tx_count: block.txs.len(),
                        fees: block.fees(),
                        bytes: block.encoded_len(),
                        wire_bytes,
                        x,
                        r,
                        a,
                        v: self.cfg.costs.v(block.txs.len()),
                        uncles: block.header.uncle_refs.len(),
                    });
                    self.observer.append_candidate(block).expect("produced blocks extend known parents");
                }
                Action::Trace(r) => self.trace.push(r),
            }
        }
    }

    fn send(&mut self, now: f64, from: NodeId, copies: Vec<(NodeId, Message)>) {
        let sizes: Vec<(NodeId, usize)> = copies.iter().map(|(to, m)| (*to, m.wire_len())).collect();
        let plans = self.network.plan_batch(from, &sizes, now, &mut self.proto_rng);
        for ((to, msg), plan) in copies.into_iter().zip(plans) {
            match plan {
                DeliveryPlan::Delivered { at, attempts } => {
                    self.queue.schedule(at, SimEvent::Deliver { from, to, msg, attempts });
                }
                DeliveryPlan::Undeliverable { .. } => {
                    let kind = msg.kind();
                    self.trace.push(TraceRecord::Undeliverable { t: now, from, to, msg: kind, bytes: msg.wire_len() });
                    if matches!(kind, MsgKind::Block | MsgKind::Compact) {
                        if let Message::Block(b) | Message::Compact { block: b, .. } = &msg {
                            self.mark_held(now, b.hash(), to);
                        }
                    }
                }
            }
        }
    }

    /// Broadcast time ends when the last reachable peer holds the block.
    fn mark_held(&mut self, now: f64, hash: BlockHash, node: NodeId) {
        let Some(p) = self.broadcasts.get_mut(&hash) else { return };
        p.waiting.remove(&node);
        if p.waiting.is_empty() {
            let b = now - p.created_at;
            self.broadcasts.remove(&hash);
            self.trace.push(TraceRecord::BroadcastComplete { t: now, hash, b });
        }
    }
}

pub fn run(cfg: SimConfig) -> SimOutcome {
    Simulation::new(cfg).run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::{DelayMode, OrderMode, PcbMode};

    fn small(pcb: PcbMode, order: OrderMode, delay: DelayMode) -> SimConfig {
        let params = ProtocolParams::new(5, 3000.0, 50, order, delay, pcb);
        SimConfig::new(params, 30, 7)
    }

    #[test]
    fn fault_script_never_consecutive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = fault_script(10_000, 0.3, &mut rng);
        assert!(f.len() > 1000);
        assert!(f.iter().all(|h| !f.contains(&(h + 1))));
    }

    #[test]
    fn runs_are_deterministic() {
        let a = run(small(PcbMode::Pcb, OrderMode::Differential, DelayMode::Accurate));
        let b = run(small(PcbMode::Pcb, OrderMode::Differential, DelayMode::Accurate));
        assert_eq!(a.trace.to_ndjson(), b.trace.to_ndjson());
        assert!(a.committed.len() > 25);
    }

    #[test]
    fn every_mode_commits_transactions() {
        for pcb in [PcbMode::FullBlock, PcbMode::Bcb, PcbMode::Pcb] {
            let out = run(small(pcb, OrderMode::Fixed, DelayMode::Naive));
            let txs: usize = out.committed.iter().map(|b| b.txs.len()).sum();
            assert!(txs >= 20 * 50, "{pcb:?} committed {txs}");
            let ids: HashSet<_> = out.committed.iter().flat_map(|b| b.txs.iter().map(|t| t.id)).collect();
            assert_eq!(ids.len(), txs, "{pcb:?} committed a transaction twice");
        }
    }

    #[test]
    fn nodes_agree_on_settled_prefix() {
        let out = run(small(PcbMode::Pcb, OrderMode::Differential, DelayMode::Accurate));
        let settled = out.committed.len() - 3;
        for chain in &out.node_chains {
            for (a, b) in chain.iter().zip(&out.committed).take(settled) {
                assert_eq!(*a, b.hash());
            }
            assert!(chain.len() >= settled);
        }
    }
}
