//! Clique / ExClique signer scheduling, no-turn delays and step cost models.

mod node;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::RecentSigners;
use crate::ids::NodeId;
use crate::scalar::Scalar;

pub use node::{Action, BetaTracking, Message, NodeConfig, NodeEvent, NodeState, PendingCompact, Role};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderMode {
    /// In-turn signer of step `h` is `(h + 1) mod n`.
    Fixed,
    /// In-turn signer follows whoever signed the previous block.
    Differential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayMode {
    /// No-turn delay drawn from `U(0, w)`.
    Naive,
    /// No-turn delay drawn from `U(beta, w)`, `beta` tracking broadcast plus verification.
    Accurate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcbMode {
    /// Every receiver gets the full block.
    FullBlock,
    /// Every transaction becomes a short id; receivers fetch what they lack.
    Bcb,
    /// Per-receiver tailoring from the receiver's counting Bloom filter.
    Pcb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    pub n: usize,
    /// Step duration `t_b` in ms.
    pub step_ms: f64,
    /// Upper bound of the no-turn delay range in ms.
    pub w_ms: f64,
    /// Block capacity in transactions.
    pub m: usize,
    pub order_mode: OrderMode,
    pub delay_mode: DelayMode,
    pub pcb_mode: PcbMode,
}

impl ProtocolParams {
    pub fn new(
        n: usize,
        step_ms: f64,
        m: usize,
        order_mode: OrderMode,
        delay_mode: DelayMode,
        pcb_mode: PcbMode,
    ) -> Self {
        Self { n, step_ms, w_ms: default_w_ms(n), m, order_mode, delay_mode, pcb_mode }
    }

    /// Number of preceding blocks whose signers may not sign again.
    pub fn recents_window(&self) -> usize {
        self.n / 2
    }

    pub fn no_turn_count(&self) -> usize {
        no_turn_count(self.n)
    }
}

/// `(floor(n/2) + 1) * 500` ms.
pub fn default_w_ms(n: usize) -> f64 {
    ((n / 2 + 1) * 500) as f64
}

/// `floor((n+1)/2) - 1`.
pub fn no_turn_count(n: usize) -> usize {
    n.div_ceil(2).saturating_sub(1)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConsensusError {
    #[error("only {eligible} nodes eligible for {needed} no-turn slots")]
    InsufficientEligible { eligible: usize, needed: usize },
}

/// Scheduled in-turn signer for `step`. `last_signer` is the signer of the
/// parent block (`None` when the parent is genesis).
pub fn in_turn_signer(step: u64, mode: OrderMode, n: usize, last_signer: Option<NodeId>) -> NodeId {
    match (mode, last_signer) {
        (OrderMode::Differential, Some(j)) => (j + 1) % n,
        _ => ((step + 1) % n as u64) as NodeId,
    }
}

/// No-turn signers for a step, taken by ascending index after the in-turn node
/// and skipping recent signers.
pub fn no_turn_set(
    n: usize,
    in_turn: NodeId,
    recents: &RecentSigners,
) -> Result<Vec<NodeId>, ConsensusError> {
    let needed = no_turn_count(n);
    let eligible: Vec<NodeId> = (1..n)
        .map(|d| (in_turn + d) % n)
        .filter(|&c| !recents.contains(c))
        .take(needed)
        .collect();
    if eligible.len() < needed {
        return Err(ConsensusError::InsufficientEligible { eligible: eligible.len(), needed });
    }
    Ok(eligible)
}

/// Under the differential order the in-turn signer is the successor of the
/// last signer and is not held back by the recents window; the window only
/// gates no-turn eligibility. Otherwise a jump past recent signers could make
/// the successor ineligible and bring back runs of no-turn blocks.
pub fn in_turn_exempt_from_recents(mode: OrderMode) -> bool {
    mode == OrderMode::Differential
}

/// Role of `node` for the step following a chain with the given recents.
pub fn role_of(
    node: NodeId,
    n: usize,
    in_turn: NodeId,
    recents: &RecentSigners,
    mode: OrderMode,
) -> Result<Role, ConsensusError> {
    if node == in_turn && (in_turn_exempt_from_recents(mode) || !recents.contains(node)) {
        return Ok(Role::InTurn);
    }
    if recents.contains(node) || node == in_turn {
        return Ok(Role::Forbidden);
    }
    if no_turn_set(n, in_turn, recents)?.contains(&node) {
        Ok(Role::NoTurn)
    } else {
        Ok(Role::Forbidden)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DelaySample {
    pub x_ms: f64,
    /// Set when `beta >= w` forced the lower bound down to `0.95 w`.
    pub beta_clamped: bool,
}

pub fn sample_delay<R: Rng + ?Sized>(mode: DelayMode, w_ms: f64, beta_ms: f64, rng: &mut R) -> DelaySample {
    if w_ms <= 0.0 {
        return DelaySample { x_ms: 0.0, beta_clamped: false };
    }
    let (lo, beta_clamped) = match mode {
        DelayMode::Naive => (0.0, false),
        DelayMode::Accurate if beta_ms >= w_ms => (0.95 * w_ms, true),
        DelayMode::Accurate => (beta_ms.max(0.0), false),
    };
    let u: f64 = rng.gen();
    DelaySample { x_ms: lo + u * (w_ms - lo), beta_clamped }
}

pub const BETA_EWMA_ALPHA: f64 = 0.2;

/// Per-signer moving estimate of broadcast plus verification time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BetaTable {
    alpha: f64,
    estimates: BTreeMap<NodeId, f64>,
}

impl BetaTable {
    pub fn new(alpha: f64) -> Self {
        Self { alpha, estimates: BTreeMap::new() }
    }

    /// 0 until the signer has been observed.
    pub fn estimate(&self, signer: NodeId) -> f64 {
        self.estimates.get(&signer).copied().unwrap_or(0.0)
    }

    pub fn has_estimate(&self, signer: NodeId) -> bool {
        self.estimates.contains_key(&signer)
    }

    pub fn update(&mut self, signer: NodeId, observed_ms: f64) {
        let observed = observed_ms.max(0.0);
        self.estimates
            .entry(signer)
            .and_modify(|b| *b = (1.0 - self.alpha) * *b + self.alpha * observed)
            .or_insert(observed);
    }
}

/// Per-task time for one step: broadcast, verification, pool reset, assembly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskTimings {
    pub b: f64,
    pub v: f64,
    pub r: f64,
    pub a: f64,
}

impl TaskTimings {
    pub fn total(&self) -> f64 {
        self.b + self.v + self.r + self.a
    }
}

/// `base + per_tx * m`, in ms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine<T> {
    pub base_ms: T,
    pub per_tx_ms: T,
}

impl<T: Scalar> Affine<T> {
    pub fn new(base_ms: T, per_tx_ms: T) -> Self {
        Self { base_ms, per_tx_ms }
    }

    pub fn at(&self, m: usize) -> T {
        self.base_ms + self.per_tx_ms * T::from_count(m)
    }
}

/// CPU-side task costs; broadcast time comes from the network model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel<T> {
    pub verify: Affine<T>,
    pub reset: Affine<T>,
    pub assemble: Affine<T>,
}

impl<T: Scalar> CostModel<T> {
    pub fn v(&self, m: usize) -> T {
        self.verify.at(m)
    }

    pub fn r(&self, m: usize) -> T {
        self.reset.at(m)
    }

    pub fn a(&self, m: usize) -> T {
        self.assemble.at(m)
    }

    /// Time from holding a verified parent to having a block of `m` ready.
    pub fn prepare(&self, m: usize) -> T {
        self.r(m) + self.a(m)
    }
}

impl<T: Scalar> Default for CostModel<T> {
    fn default() -> Self {
        Self {
            verify: Affine::new(T::lit(5.0), T::lit(0.15)),
            reset: Affine::new(T::lit(2.0), T::lit(0.05)),
            assemble: Affine::new(T::lit(3.0), T::lit(0.10)),
        }
    }
}
