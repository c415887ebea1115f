//! Closed-form throughput and fork models, step classification of traces and
//! model-versus-measurement reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{BlockKind, UncleRef, HEADER_FIXED_LEN, MIN_TX_SIZE};
use crate::consensus::{no_turn_count, CostModel, PcbMode, TaskTimings};
use crate::ids::{BlockHash, NodeId};
use crate::netsim::DEFAULT_BANDWIDTH_BPS;
use crate::pcb::SHORT_ID_LEN;
use crate::scalar::Scalar;
use crate::trace::{MsgKind, Trace, TraceRecord};

/// Seed used for every Monte-Carlo expectation baked into reports.
pub const MC_SEED: u64 = 0x00de_1747_a5ee_d001;
pub const MC_SAMPLES: usize = 200_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticsError {
    #[error("no feasible block size: f(0) = {cost_at_zero} ms exceeds t_b = {t_b} ms")]
    NoFeasibleM { cost_at_zero: f64, t_b: f64 },
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
}

/// `m / t_b` in transactions per second (`t_b` in ms).
pub fn lambda0<T: Scalar>(m: usize, t_b_ms: T) -> T {
    T::from_count(m) * T::lit(1000.0) / t_b_ms
}

/// Expected wait for the earliest of the no-turn timers: `w / floor((n+1)/2)`.
pub fn delta1<T: Scalar>(n: usize, w_ms: T) -> T {
    w_ms / T::from_count(n.div_ceil(2))
}

/// TPS when the step is stretched by the first no-turn timer.
pub fn lambda1<T: Scalar>(m: usize, t_b_ms: T, delta1_ms: T) -> T {
    T::from_count(m) * T::lit(1000.0) / (t_b_ms + delta1_ms)
}

/// `½ m / (t_b + E[δ_h − δ_{h−1} | δ_h ≥ δ_{h−1}])` with the expectation
/// estimated by Monte Carlo under the pinned seed.
pub fn lambda3<T: Scalar>(m: usize, t_b_ms: T, n: usize, w_ms: T) -> T {
    let ce = cond_expectation_mc(no_turn_count(n), w_ms.as_f64(), MC_SAMPLES, MC_SEED).expectation;
    lambda3_with(m, t_b_ms, T::lit(ce))
}

pub fn lambda3_with<T: Scalar>(m: usize, t_b_ms: T, cond_exp_ms: T) -> T {
    T::lit(0.5) * T::from_count(m) * T::lit(1000.0) / (t_b_ms + cond_exp_ms)
}

/// Minimum of `k` draws from `U(0, w)`; `w` when `k = 0`.
fn min_uniform<R: Rng + ?Sized>(k: usize, w: f64, rng: &mut R) -> f64 {
    (0..k).map(|_| rng.gen::<f64>() * w).fold(w, f64::min)
}

/// Sample mean of the minimum of `k` uniforms on `(0, w)`.
pub fn mean_min_uniform_mc(k: usize, w: f64, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples).map(|_| min_uniform(k, w, &mut rng)).sum::<f64>() / samples.max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondExpectation {
    /// `E[δ_h − δ_{h−1} | δ_h ≥ δ_{h−1}]` in ms.
    pub expectation: f64,
    /// Fraction of pairs with `δ_h ≥ δ_{h−1}`.
    pub p_ge: f64,
}

/// Monte Carlo over pairs of consecutive minimum no-turn delays.
pub fn cond_expectation_mc(k: usize, w: f64, samples: usize, seed: u64) -> CondExpectation {
    if k == 0 || w <= 0.0 {
        return CondExpectation { expectation: 0.0, p_ge: 1.0 };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut hits) = (0.0, 0usize);
    for _ in 0..samples {
        let prev = min_uniform(k, w, &mut rng);
        let cur = min_uniform(k, w, &mut rng);
        if cur >= prev {
            sum += cur - prev;
            hits += 1;
        }
    }
    CondExpectation {
        expectation: if hits > 0 { sum / hits as f64 } else { 0.0 },
        p_ge: hits as f64 / samples.max(1) as f64,
    }
}

/// Case rates `p0..p3` of the four step cases.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseRates<T> {
    pub p0: T,
    pub p1: T,
    pub p2: T,
    pub p3: T,
}

/// `Λ = p0 Λ0 + p1 Λ1 + p2 · 0 + p3 Λ3`.
pub fn expected_tps<T: Scalar>(p: CaseRates<T>, m: usize, t_b_ms: T, delta1_ms: T, cond_exp_ms: T) -> T {
    p.p0 * lambda0(m, t_b_ms)
        + p.p1 * lambda1(m, t_b_ms, delta1_ms)
        + p.p3 * lambda3_with(m, t_b_ms, cond_exp_ms)
}

fn clamp01<T: Scalar>(x: T) -> T {
    x.max(T::zero()).min(T::one())
}

/// Chance that one no-turn timer fires before the in-turn block is verified.
pub fn fork_prob_single<T: Scalar>(b_ms: T, v_ms: T, w_ms: T) -> T {
    clamp01((b_ms + v_ms) / w_ms)
}

/// Chance that at least one of the `floor((n+1)/2) - 1` no-turn nodes forks.
pub fn fork_prob<T: Scalar>(p_s: T, n: usize) -> T {
    let k = no_turn_count(n) as i32;
    clamp01(T::one() - (T::one() - clamp01(p_s)).powi(k))
}

/// Fork probability with delays drawn from `U(beta, w)`.
pub fn fork_prob_accurate<T: Scalar>(b_ms: T, v_ms: T, beta_ms: T, w_ms: T, n: usize) -> T {
    fork_prob(clamp01((b_ms + v_ms - beta_ms) / w_ms), n)
}

/// Largest `m` with `cost(m) <= t_b`, by doubling then bisection. `cost`
/// must be nondecreasing.
pub fn find_m_star<T: Scalar>(cost: impl Fn(usize) -> T, t_b_ms: T) -> Result<usize, AnalyticsError> {
    const CAP: usize = 1 << 40;
    let c0 = cost(0);
    if c0 > t_b_ms {
        return Err(AnalyticsError::NoFeasibleM { cost_at_zero: c0.as_f64(), t_b: t_b_ms.as_f64() });
    }
    let mut lo = 0usize;
    let mut hi = 1usize;
    while cost(hi) <= t_b_ms {
        lo = hi;
        if hi >= CAP {
            return Ok(hi);
        }
        hi *= 2;
    }
    // invariant: cost(lo) <= t_b < cost(hi)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if cost(mid) <= t_b_ms {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Analytic per-step cost `b + v + r + a` for a block of `m` transactions,
/// mirroring the simulator's network and CPU models.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepCostModel<T> {
    pub n: usize,
    pub mode: PcbMode,
    pub base_delay_ms: T,
    pub bandwidth_bps: T,
    pub tx_bytes: T,
    pub header_bytes: T,
    /// Fraction of the block's transactions a receiver already holds.
    pub similarity: T,
    /// Counting Bloom filter false-positive rate.
    pub fpr: T,
    pub costs: CostModel<T>,
}

impl<T: Scalar> StepCostModel<T> {
    pub fn new(n: usize, mode: PcbMode) -> Self {
        Self {
            n,
            mode,
            base_delay_ms: T::lit(100.0),
            bandwidth_bps: T::lit(DEFAULT_BANDWIDTH_BPS),
            tx_bytes: T::lit(MIN_TX_SIZE as f64),
            header_bytes: T::lit((HEADER_FIXED_LEN + 4) as f64),
            similarity: T::lit(0.9),
            fpr: T::lit(0.007),
            costs: CostModel::default(),
        }
    }

    fn ser_ms(&self, bytes: T) -> T {
        bytes * T::lit(8000.0) / self.bandwidth_bps
    }

    /// Bytes of one copy sent to a receiver.
    pub fn copy_bytes(&self, m: usize) -> T {
        let mm = T::from_count(m);
        let compact = T::lit((32 + 9) as f64) + T::from_count(m.div_ceil(8));
        let short = T::lit(SHORT_ID_LEN as f64);
        match self.mode {
            PcbMode::FullBlock => self.header_bytes + mm * self.tx_bytes,
            PcbMode::Bcb => self.header_bytes + compact + mm * short,
            PcbMode::Pcb => {
                let shorts = self.similarity + (T::one() - self.similarity) * self.fpr;
                self.header_bytes + compact + mm * (shorts * short + (T::one() - shorts) * self.tx_bytes)
            }
        }
    }

    /// Expected extra time of the missing-transaction round.
    fn missing_round_ms(&self, m: usize) -> T {
        let mm = T::from_count(m);
        let lack = T::one() - self.similarity;
        let rtt = T::lit(2.0) * self.base_delay_ms;
        match self.mode {
            PcbMode::FullBlock => T::zero(),
            PcbMode::Bcb if m == 0 => T::zero(),
            PcbMode::Bcb => {
                let per_peer = lack * mm * (self.tx_bytes + T::lit(4.0));
                rtt + self.ser_ms(per_peer * T::from_count(self.n - 1))
            }
            PcbMode::Pcb => {
                let p_miss = lack * self.fpr;
                let p_round = T::one() - (T::one() - p_miss).powi(m.min(i32::MAX as usize) as i32);
                p_round * (rtt + self.ser_ms(p_miss * mm * self.tx_bytes))
            }
        }
    }

    pub fn broadcast_ms(&self, m: usize) -> T {
        let peers = T::from_count(self.n.saturating_sub(1));
        self.base_delay_ms + self.ser_ms(peers * self.copy_bytes(m)) + self.missing_round_ms(m)
    }

    pub fn timings(&self, m: usize) -> [T; 4] {
        [self.broadcast_ms(m), self.costs.v(m), self.costs.r(m), self.costs.a(m)]
    }

    pub fn step_cost(&self, m: usize) -> T {
        self.timings(m).into_iter().fold(T::zero(), |acc, t| acc + t)
    }

    pub fn m_star(&self, t_b_ms: T) -> Result<usize, AnalyticsError> {
        find_m_star(|m| self.step_cost(m), t_b_ms)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommittedKind {
    InTurn,
    NoTurn,
    /// In-turn block without transactions.
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepCase {
    Normal,
    Exc1,
    Exc2,
    Exc3,
}

impl StepCase {
    pub fn label(self) -> &'static str {
        match self {
            StepCase::Normal => "normal",
            StepCase::Exc1 => "exc1",
            StepCase::Exc2 => "exc2",
            StepCase::Exc3 => "exc3",
        }
    }
}

impl CommittedKind {
    pub fn label(self) -> &'static str {
        match self {
            CommittedKind::InTurn => "in_turn",
            CommittedKind::NoTurn => "no_turn",
            CommittedKind::Empty => "empty",
        }
    }
}

/// Case of a committed block given the kind of its predecessor (genesis
/// counts as in-turn).
pub fn classify(prev: CommittedKind, cur: CommittedKind) -> StepCase {
    let prev_in_turn = prev != CommittedKind::NoTurn;
    match (prev_in_turn, cur) {
        (true, CommittedKind::InTurn) => StepCase::Normal,
        (true, CommittedKind::NoTurn) => StepCase::Exc1,
        (false, CommittedKind::NoTurn) => StepCase::Exc3,
        (_, CommittedKind::InTurn | CommittedKind::Empty) => StepCase::Exc2,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub signer: NodeId,
    pub committed_kind: CommittedKind,
    pub tx_count: usize,
    pub fees: u64,
    /// No-turn delay used by the committed block.
    pub x: Option<f64>,
    /// `b`, `v` of this block as seen by peers; `r`, `a` of its producer.
    pub timings: TaskTimings,
    pub case: StepCase,
    pub fork_occurred: bool,
    pub wire_bytes: usize,
    pub uncles: Vec<UncleRef>,
}

/// Run-level rates and the model values they feed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticsReport<T> {
    pub label: String,
    pub n: usize,
    pub m: usize,
    pub step_ms: T,
    pub w_ms: T,
    pub warmup_steps: u64,
    pub classified_steps: usize,
    pub rates: CaseRates<T>,
    pub p_f: T,
    pub lambda0: T,
    pub lambda1: T,
    pub lambda2: T,
    pub lambda3: T,
    /// Expected TPS from the case rates.
    pub lambda: T,
    pub delta1_ms: T,
    pub cond_exp_ms: T,
    pub measured_tps: T,
    /// `lambda - measured_tps`.
    pub tps_model_delta: T,
    /// Fork model evaluated at the measured mean `b + v`.
    pub p_f_model: T,
    pub mean_b_ms: T,
    pub mean_v_ms: T,
    pub mean_block_bytes: T,
    pub mean_full_block_bytes: T,
    pub empty_blocks: usize,
    pub deadlock_ties: usize,
    pub missing_rounds: usize,
    pub beta_clamped: usize,
}

struct Produced {
    x: Option<f64>,
    r: f64,
    a: f64,
    v: f64,
    bytes: usize,
    wire_bytes: usize,
}

/// Classifies committed blocks after the warm-up and summarises the run.
pub fn classify_trace<T: Scalar>(
    trace: &Trace,
) -> Result<(Vec<StepRecord>, AnalyticsReport<T>), AnalyticsError> {
    let mut info = None;
    let mut produced: HashMap<BlockHash, Produced> = HashMap::new();
    let mut per_step: BTreeMap<u64, usize> = BTreeMap::new();
    let mut broadcast: HashMap<BlockHash, f64> = HashMap::new();
    let mut committed = Vec::new();
    let (mut ties, mut rounds, mut clamps) = (0, 0, 0);
    for r in &trace.records {
        match r {
            TraceRecord::RunInfo { n, step_ms, w_ms, m, steps, warmup_steps, label, .. } => {
                info = Some((*n, *step_ms, *w_ms, *m, *steps, *warmup_steps, label.clone()));
            }
            TraceRecord::BlockProduced { hash, step, x, r, a, v, bytes, wire_bytes, .. } => {
                *per_step.entry(*step).or_default() += 1;
                produced.insert(
                    *hash,
                    Produced { x: *x, r: *r, a: *a, v: *v, bytes: *bytes, wire_bytes: *wire_bytes },
                );
            }
            TraceRecord::BroadcastComplete { hash, b, .. } => {
                broadcast.insert(*hash, *b);
            }
            TraceRecord::DeadlockTie { .. } => ties += 1,
            TraceRecord::MissingRound { .. } => rounds += 1,
            TraceRecord::BetaClamped { .. } => clamps += 1,
            TraceRecord::Committed { .. } => committed.push(r),
            _ => {}
        }
    }
    let (n, step_ms, w_ms, m, steps, warmup, label) =
        info.ok_or_else(|| AnalyticsError::MalformedTrace("missing run_info record".into()))?;

    let mut records = Vec::new();
    let mut prev = CommittedKind::InTurn;
    for (expect_step, r) in (1u64..).zip(committed) {
        let TraceRecord::Committed { step, hash, signer, kind, tx_count, fees, uncles, .. } = r else {
            unreachable!()
        };
        if *step != expect_step {
            return Err(AnalyticsError::MalformedTrace(format!(
                "committed step {step} where {expect_step} was expected"
            )));
        }
        let ck = match kind {
            BlockKind::NoTurn => CommittedKind::NoTurn,
            BlockKind::InTurn if *tx_count == 0 => CommittedKind::Empty,
            BlockKind::InTurn => CommittedKind::InTurn,
            BlockKind::Genesis => {
                return Err(AnalyticsError::MalformedTrace("genesis listed as committed".into()))
            }
        };
        let case = classify(prev, ck);
        prev = ck;
        if *step <= warmup || *step > steps {
            continue;
        }
        let p = produced
            .get(hash)
            .ok_or_else(|| AnalyticsError::MalformedTrace(format!("committed block at step {step} never produced")))?;
        records.push(StepRecord {
            step: *step,
            signer: *signer,
            committed_kind: ck,
            tx_count: *tx_count,
            fees: *fees,
            x: p.x,
            timings: TaskTimings { b: broadcast.get(hash).copied().unwrap_or(f64::NAN), v: p.v, r: p.r, a: p.a },
            case,
            fork_occurred: per_step.get(step).copied().unwrap_or(0) >= 2,
            wire_bytes: p.wire_bytes,
            uncles: uncles.clone(),
        });
    }

    let total = records.len();
    let count = |c: StepCase| records.iter().filter(|r| r.case == c).count();
    let rate = |k: usize| if total == 0 { T::zero() } else { T::from_count(k) / T::from_count(total) };
    let rates = CaseRates {
        p0: rate(count(StepCase::Normal)),
        p1: rate(count(StepCase::Exc1)),
        p2: rate(count(StepCase::Exc2)),
        p3: rate(count(StepCase::Exc3)),
    };
    let p_f = rate(records.iter().filter(|r| r.fork_occurred).count());
    let t_b = T::lit(step_ms);
    let w = T::lit(w_ms);
    let d1 = delta1(n, w);
    let ce = T::lit(cond_expectation_mc(no_turn_count(n), w_ms, MC_SAMPLES, MC_SEED).expectation);
    let lambda = expected_tps(rates, m, t_b, d1, ce);
    let txs: usize = records.iter().map(|r| r.tx_count).sum();
    let measured_tps = if total == 0 {
        T::zero()
    } else {
        T::from_count(txs) * T::lit(1000.0) / (T::from_count(total) * t_b)
    };
    let mean = |vals: Vec<f64>| {
        let vals: Vec<f64> = vals.into_iter().filter(|v| v.is_finite()).collect();
        if vals.is_empty() {
            T::zero()
        } else {
            T::lit(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let with_txs: Vec<&StepRecord> = records.iter().filter(|r| r.tx_count > 0).collect();
    let mean_b = mean(with_txs.iter().map(|r| r.timings.b).collect());
    let mean_v = mean(with_txs.iter().map(|r| r.timings.v).collect());
    let hashes: HashMap<u64, &BlockHash> = trace
        .records
        .iter()
        .filter_map(|r| match r {
            TraceRecord::Committed { step, hash, .. } => Some((*step, hash)),
            _ => None,
        })
        .collect();
    let mean_full = mean(
        with_txs.iter().filter_map(|r| hashes.get(&r.step).and_then(|h| produced.get(h)).map(|p| p.bytes as f64)).collect(),
    );
    let report = AnalyticsReport {
        label,
        n,
        m,
        step_ms: t_b,
        w_ms: w,
        warmup_steps: warmup,
        classified_steps: total,
        rates,
        p_f,
        lambda0: lambda0(m, t_b),
        lambda1: lambda1(m, t_b, d1),
        lambda2: T::zero(),
        lambda3: lambda3_with(m, t_b, ce),
        lambda,
        delta1_ms: d1,
        cond_exp_ms: ce,
        measured_tps,
        tps_model_delta: lambda - measured_tps,
        p_f_model: if w_ms > 0.0 { fork_prob(fork_prob_single(mean_b, mean_v, w), n) } else { T::zero() },
        mean_b_ms: mean_b,
        mean_v_ms: mean_v,
        mean_block_bytes: mean(with_txs.iter().map(|r| r.wire_bytes as f64).collect()),
        mean_full_block_bytes: mean_full,
        empty_blocks: records.iter().filter(|r| r.tx_count == 0).count(),
        deadlock_ties: ties,
        missing_rounds: rounds,
        beta_clamped: clamps,
    };
    Ok((records, report))
}

/// Per-step CSV: `step,kind,case,tx_count,x,b,v,r,a,fork`.
pub fn steps_csv(records: &[StepRecord]) -> String {
    let mut out = String::from("step,kind,case,tx_count,x,b,v,r,a,fork\n");
    let num = |v: f64| if v.is_finite() { format!("{v:.3}") } else { String::new() };
    for r in records {
        let t = &r.timings;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.committed_kind.label(),
            r.case.label(),
            r.tx_count,
            r.x.map(num).unwrap_or_default(),
            num(t.b),
            num(t.v),
            num(t.r),
            num(t.a),
            r.fork_occurred
        );
    }
    out
}

/// Mean wire size of block messages actually delivered, from `deliver` records.
pub fn mean_delivered_block_bytes(trace: &Trace) -> Option<f64> {
    let (sum, n) = trace.records.iter().fold((0usize, 0usize), |(s, c), r| match r {
        TraceRecord::Deliver { msg: MsgKind::Block | MsgKind::Compact, bytes, .. } => (s + bytes, c + 1),
        _ => (s, c),
    });
    (n > 0).then(|| sum as f64 / n as f64)
}
