//! Property checks shared by the `properties` and `acceptance` targets.

use std::collections::BTreeSet;
use std::sync::Arc;

use exclique::cbf::{expected_fpr, CountingBloomFilter};
use exclique::chain::{Block, BlockHeader, BlockKind, Ledger, Transaction, VerifyResult};
use exclique::consensus::{in_turn_signer, role_of, DelayMode, OrderMode, PcbMode, ProtocolParams, Role};
use exclique::ids::{sha256, TxId};
use exclique::pcb::{decode, encode, get_missing, DecodeResult};
use exclique::pool::TxPool;
use exclique::sim::{self, SimConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

pub fn check<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn tx_id(i: u64) -> TxId {
    TxId(sha256(&[b"probe", &i.to_le_bytes()]))
}

/// Members survive any sequence of inserts and removals of other members.
pub fn cbf_no_false_negatives() -> Result<(), String> {
    let strategy = (
        proptest::collection::btree_set(any::<u64>(), 1..400),
        proptest::collection::vec(any::<prop::sample::Index>(), 0..100),
        any::<u64>(),
    );
    check(64, strategy, |(items, removals, salt)| {
        let items: Vec<u64> = items.into_iter().collect();
        let mut f = CountingBloomFilter::with_capacity(items.len(), salt);
        items.iter().for_each(|&i| f.add(&tx_id(i)));
        let mut live: BTreeSet<u64> = items.iter().copied().collect();
        for r in removals {
            let v = items[r.index(items.len())];
            if live.remove(&v) {
                f.remove(&tx_id(v)).map_err(|e| TestCaseError::fail(e.to_string()))?;
            }
        }
        prop_assume!(!f.saturated());
        for &v in &live {
            prop_assert!(f.contains(&tx_id(v)), "member {v} reported absent");
        }
        Ok(())
    })
}

/// Measured false-positive rate tracks `(1 - e^{-kN/L})^k` and grows with load.
pub fn cbf_fpr_scaling() -> Result<(), String> {
    const PROBES: u64 = 20_000;
    check(12, (100usize..1000, any::<u64>()), |(n, salt)| {
        let mut f = CountingBloomFilter::with_capacity(n, salt);
        let fpr = |f: &CountingBloomFilter| {
            (0..PROBES).filter(|p| f.contains(&tx_id(u64::MAX - p))).count() as f64 / PROBES as f64
        };
        (0..n as u64).for_each(|i| f.add(&tx_id(i)));
        let light = fpr(&f);
        let expected_light = expected_fpr(f.k(), n, f.len());
        prop_assert!((light - expected_light).abs() < 0.01, "fpr {light} vs {expected_light}");
        (n as u64..3 * n as u64).for_each(|i| f.add(&tx_id(i)));
        let heavy = fpr(&f);
        let expected_heavy = expected_fpr(f.k(), 3 * n, f.len());
        prop_assert!((heavy - expected_heavy).abs() < 0.03, "fpr {heavy} vs {expected_heavy}");
        prop_assert!(heavy > light);
        Ok(())
    })
}

pub fn block_with(m: usize, seed: u64) -> Block {
    let txs = (0..m as u64).map(|i| Transaction::synthetic(seed, i, 110, 1 + i % 10)).collect();
    Block::seal(
        BlockHeader {
            step: 7,
            parent_id: Default::default(),
            signer: 3,
            kind: BlockKind::InTurn,
            weight: 2,
            uncle_refs: vec![],
            created_at: 21_000.0,
        },
        txs,
    )
}

/// Any block decodes back to itself against any receiver pool.
pub fn pcb_round_trip() -> Result<(), String> {
    let strategy = (
        0usize..300,
        proptest::collection::vec(any::<bool>(), 300),
        0u64..100,
        any::<u64>(),
        any::<u64>(),
    );
    check(64, strategy, |(m, keep, extra, seed, salt)| {
        let b = block_with(m, seed);
        let mut pool = TxPool::with_capacity(m + extra as usize + 1, salt ^ 5);
        b.txs.iter().zip(&keep).filter(|(_, k)| **k).for_each(|(t, _)| {
            pool.insert(t.clone());
        });
        (0..extra).for_each(|i| {
            pool.insert(Transaction::synthetic(seed ^ 1, 1_000_000 + i, 110, 1));
        });
        let cb = encode(&b, pool.filter(), salt);
        let rebuilt = match decode(&cb, &pool) {
            DecodeResult::Complete(x) => x,
            DecodeResult::NeedsTxs { missing, partial } => partial
                .complete(get_missing(&b, &missing))
                .map_err(|e| TestCaseError::fail(e.to_string()))?,
        };
        prop_assert_eq!(rebuilt.encode(), b.encode());
        prop_assert_eq!(rebuilt.hash(), b.hash());
        Ok(())
    })
}

/// Builds a random block tree. Entry `i` names its parent among `0..=i`,
/// where index 0 is genesis.
fn tree(shape: &[(prop::sample::Index, bool, u8)]) -> Vec<Arc<Block>> {
    let mut blocks = vec![Arc::new(Block::genesis())];
    for (i, (parent, in_turn, signer)) in shape.iter().enumerate() {
        let p = blocks[parent.index(blocks.len())].clone();
        let kind = if *in_turn { BlockKind::InTurn } else { BlockKind::NoTurn };
        blocks.push(Arc::new(Block::seal(
            BlockHeader {
                step: p.step() + 1,
                parent_id: p.hash(),
                signer: *signer as usize,
                kind,
                weight: kind.weight(),
                uncle_refs: vec![],
                created_at: p.header.created_at + 3000.0 + i as f64,
            },
            vec![],
        )));
    }
    blocks
}

/// The selected head does not depend on the arrival order of blocks.
pub fn fork_choice_order_independent() -> Result<(), String> {
    let strategy = (
        proptest::collection::vec((any::<prop::sample::Index>(), any::<bool>(), 0u8..7), 1..40),
        proptest::collection::vec(any::<u64>(), 3),
    );
    check(128, strategy, |(shape, keys)| {
        let blocks = tree(&shape);
        let mut heads = BTreeSet::new();
        for key in keys {
            // random order, then delay each block until its parent is present
            let mut order: Vec<usize> = (1..blocks.len()).collect();
            order.sort_by_key(|&i| sha256(&[&key.to_le_bytes(), &(i as u64).to_le_bytes()]));
            let mut ledger = Ledger::new(blocks[0].clone());
            while !order.is_empty() {
                let before = order.len();
                order.retain(|&i| {
                    if ledger.contains(&blocks[i].parent()) {
                        ledger.append_candidate(blocks[i].clone()).expect("fresh block");
                        false
                    } else {
                        true
                    }
                });
                prop_assert!(order.len() < before);
            }
            heads.insert(ledger.head());
        }
        prop_assert_eq!(heads.len(), 1);
        Ok(())
    })
}

/// Every chain built only from blocks the role rules allow passes
/// verification. Signers never repeat back to back; no-turn signers are never
/// recent; under the fixed order no signer repeats inside the window.
pub fn recents_window_safety() -> Result<(), String> {
    let strategy = (
        3usize..16,
        any::<bool>(),
        proptest::collection::vec((any::<bool>(), any::<prop::sample::Index>()), 1..80),
    );
    check(128, strategy, |(n, differential, choices)| {
        let mode = if differential { OrderMode::Differential } else { OrderMode::Fixed };
        let params = ProtocolParams::new(n, 3000.0, 10, mode, DelayMode::Naive, PcbMode::FullBlock);
        let window = params.recents_window();
        let mut ledger = Ledger::new(Arc::new(Block::genesis()));
        let mut signers = Vec::new();
        for (take_in_turn, pick) in choices {
            let parent = ledger.head_block().clone();
            let last = (parent.kind() != BlockKind::Genesis).then(|| parent.signer());
            let step = parent.step() + 1;
            let in_turn = in_turn_signer(step, mode, n, last);
            let recents = ledger.recents(parent.hash(), window);
            let roles: Vec<Role> = (0..n)
                .map(|i| role_of(i, n, in_turn, &recents, mode))
                .collect::<Result<_, _>>()
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let no_turn: Vec<usize> = (0..n).filter(|&i| roles[i] == Role::NoTurn).collect();
            let in_turn_ok = roles[in_turn] == Role::InTurn;
            let (signer, kind) = if in_turn_ok && (take_in_turn || no_turn.is_empty()) {
                (in_turn, BlockKind::InTurn)
            } else if !no_turn.is_empty() {
                (no_turn[pick.index(no_turn.len())], BlockKind::NoTurn)
            } else {
                break;
            };
            if kind == BlockKind::NoTurn {
                prop_assert!(!recents.contains(signer));
            }
            let b = Block::seal(
                BlockHeader {
                    step,
                    parent_id: parent.hash(),
                    signer,
                    kind,
                    weight: kind.weight(),
                    uncle_refs: vec![],
                    created_at: step as f64 * 3000.0,
                },
                vec![],
            );
            prop_assert_eq!(
                exclique::chain::verify_block(&b, &parent, &params, &recents),
                VerifyResult::Accept
            );
            ledger.append_candidate(Arc::new(b)).map_err(|e| TestCaseError::fail(e.to_string()))?;
            signers.push(signer);
        }
        prop_assert!(signers.windows(2).all(|w| w[0] != w[1]));
        if mode == OrderMode::Fixed {
            for w in signers.windows(window + 1) {
                let distinct: BTreeSet<_> = w.iter().collect();
                prop_assert_eq!(distinct.len(), w.len(), "repeat inside window: {:?}", w);
            }
        }
        Ok(())
    })
}

/// Two runs of the same configuration produce byte-identical traces.
pub fn deterministic_replay() -> Result<(), String> {
    let strategy = (4usize..9, 0usize..3, any::<u64>(), 0.0f64..0.3);
    check(6, strategy, |(n, mode, seed, fault_rate)| {
        let (order, delay, pcb) = [
            (OrderMode::Fixed, DelayMode::Naive, PcbMode::FullBlock),
            (OrderMode::Fixed, DelayMode::Naive, PcbMode::Bcb),
            (OrderMode::Differential, DelayMode::Accurate, PcbMode::Pcb),
        ][mode];
        let params = ProtocolParams::new(n, 3000.0, 80, order, delay, pcb);
        let mut cfg = SimConfig::new(params, 40, seed);
        cfg.fault_rate = fault_rate;
        let a = sim::run(cfg.clone()).trace.to_ndjson();
        let b = sim::run(cfg).trace.to_ndjson();
        prop_assert!(!a.is_empty());
        prop_assert!(a == b, "traces differ for seed {seed}");
        Ok(())
    })
}

#[allow(dead_code)]
pub type Suite = fn() -> Result<(), String>;

#[allow(dead_code)]
pub const PROPERTY_SUITES: &[(&str, Suite)] = &[
    ("cbf no false negatives", cbf_no_false_negatives),
    ("cbf fpr scaling", cbf_fpr_scaling),
    ("pcb round trip", pcb_round_trip),
    ("fork choice order independence", fork_choice_order_independent),
    ("recents window safety", recents_window_safety),
    ("deterministic replay", deterministic_replay),
];
