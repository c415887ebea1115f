//! Fee distribution: the sliding-window fair split and the pay-the-signer
//! baseline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{Block, UncleRef};
use crate::ids::NodeId;
use crate::trace::{Trace, TraceRecord};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RewardError {
    #[error("no committed blocks in the window before step {step}")]
    EmptyWindow { step: u64 },
    #[error("committed chain is not contiguous at step {step}")]
    Gap { step: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Equal split among generators active in the trailing window.
    Window,
    /// Whole fee to the block's signer.
    Direct,
}

/// What the reward logic needs to know about a committed block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommittedBlock {
    pub step: u64,
    pub signer: NodeId,
    pub fees: u64,
    pub uncles: Vec<UncleRef>,
}

impl From<&Block> for CommittedBlock {
    fn from(b: &Block) -> Self {
        Self { step: b.step(), signer: b.signer(), fees: b.fees(), uncles: b.header.uncle_refs.clone() }
    }
}

/// Committed blocks in step order, read from `committed` trace records.
pub fn committed_from_trace(trace: &Trace) -> Vec<CommittedBlock> {
    trace
        .records
        .iter()
        .filter_map(|r| match r {
            TraceRecord::Committed { step, signer, fees, uncles, .. } => {
                Some(CommittedBlock { step: *step, signer: *signer, fees: *fees, uncles: uncles.clone() })
            }
            _ => None,
        })
        .collect()
}

/// Active generators for the block at `step`: signers and uncle signers of
/// the blocks at steps `step-n ..= step-1`, deduplicated. `chain[i]` must
/// hold step `i + 1`.
pub fn active_generators(step: u64, n: usize, chain: &[CommittedBlock]) -> BTreeSet<NodeId> {
    let lo = step.saturating_sub(n as u64).max(1);
    let mut a2 = BTreeSet::new();
    for s in lo..step {
        if let Some(b) = chain.get((s - 1) as usize) {
            a2.insert(b.signer);
            a2.extend(b.uncles.iter().map(|u| u.signer));
        }
    }
    a2
}

/// Splits `fees + carry` equally across the active generators. The
/// remainder becomes the new carry. An empty window moves all fees to carry.
pub fn distribute(
    step: u64,
    fees: u64,
    n: usize,
    chain: &[CommittedBlock],
    carry: &mut u64,
) -> Result<BTreeMap<NodeId, u64>, RewardError> {
    let a2 = active_generators(step, n, chain);
    let pot = fees + *carry;
    if a2.is_empty() {
        *carry = pot;
        return Err(RewardError::EmptyWindow { step });
    }
    let share = pot / a2.len() as u64;
    *carry = pot % a2.len() as u64;
    Ok(a2.into_iter().map(|id| (id, share)).collect())
}

pub fn direct_reward(block: &CommittedBlock) -> BTreeMap<NodeId, u64> {
    BTreeMap::from([(block.signer, block.fees)])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeReward {
    pub node_id: NodeId,
    pub blocks_signed: u64,
    pub uncles: u64,
    pub reward_units: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardSummary {
    pub mode: RewardMode,
    pub nodes: Vec<NodeReward>,
    pub total_fees: u64,
    pub carry: u64,
    pub empty_windows: u64,
}

impl RewardSummary {
    pub fn paid(&self) -> u64 {
        self.nodes.iter().map(|r| r.reward_units).sum()
    }

    /// Max over min reward among nodes that signed or had an uncle referenced.
    /// `None` when no node is active; infinite when an active node earned nothing.
    pub fn fairness_ratio(&self) -> Option<f64> {
        let active: Vec<u64> = self
            .nodes
            .iter()
            .filter(|r| r.blocks_signed + r.uncles > 0)
            .map(|r| r.reward_units)
            .collect();
        let max = *active.iter().max()?;
        let min = *active.iter().min()?;
        Some(if min == 0 { f64::INFINITY } else { max as f64 / min as f64 })
    }

    /// `node_id,blocks_signed,uncles,reward_units`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("node_id,blocks_signed,uncles,reward_units\n");
        for r in &self.nodes {
            let _ = writeln!(out, "{},{},{},{}", r.node_id, r.blocks_signed, r.uncles, r.reward_units);
        }
        out
    }
}

/// Pays every committed block from step `from_step` on under `mode`.
pub fn settle(
    chain: &[CommittedBlock],
    n: usize,
    mode: RewardMode,
    from_step: u64,
) -> Result<RewardSummary, RewardError> {
    for (i, b) in chain.iter().enumerate() {
        if b.step != i as u64 + 1 {
            return Err(RewardError::Gap { step: b.step });
        }
    }
    let mut nodes: Vec<NodeReward> = (0..n).map(|i| NodeReward { node_id: i, ..Default::default() }).collect();
    let mut seen_uncles = BTreeSet::new();
    let (mut total, mut carry, mut empty) = (0, 0, 0);
    for b in chain.iter().filter(|b| b.step >= from_step) {
        nodes[b.signer].blocks_signed += 1;
        for u in &b.uncles {
            if seen_uncles.insert(*u) {
                nodes[u.signer].uncles += 1;
            }
        }
        total += b.fees;
        let payout = match mode {
            RewardMode::Direct => direct_reward(b),
            RewardMode::Window => match distribute(b.step, b.fees, n, chain, &mut carry) {
                Ok(p) => p,
                Err(RewardError::EmptyWindow { .. }) => {
                    empty += 1;
                    BTreeMap::new()
                }
                Err(e) => return Err(e),
            },
        };
        for (id, units) in payout {
            nodes[id].reward_units += units;
        }
    }
    Ok(RewardSummary { mode, nodes, total_fees: total, carry, empty_windows: empty })
}
