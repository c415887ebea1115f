//! Discrete-event kernel and the link model of the simulated full mesh.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ids::NodeId;

pub const DEFAULT_BANDWIDTH_BPS: f64 = 32_000_000.0;
pub const MAX_BASE_DELAY_MS: f64 = 200.0;
pub const MAX_LOSS_RATE: f64 = 0.1;
pub const DEFAULT_MAX_RETRIES: u32 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub base_delay_ms: f64,
    pub bandwidth_bps: f64,
    pub loss_rate: f64,
}

impl LinkModel {
    /// Serialization component only, in ms.
    pub fn serialization_ms(&self, bytes: usize) -> f64 {
        bytes as f64 * 8.0 / self.bandwidth_bps * 1000.0
    }

    pub fn transfer_time(&self, bytes: usize) -> f64 {
        self.base_delay_ms + self.serialization_ms(bytes)
    }
}

/// Optional fixed values replacing the per-link random draws.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkOverrides {
    pub base_delay_ms: Option<f64>,
    pub loss_rate: Option<f64>,
    pub bandwidth_bps: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DeliveryPlan {
    Delivered { at: f64, attempts: u32 },
    Undeliverable { attempts: u32 },
}

/// Symmetric link table of a fully connected network.
#[derive(Clone, Debug)]
pub struct Network {
    n: usize,
    links: Vec<LinkModel>,
    /// Copies sent in one batch share the sender's uplink.
    pub uplink_sharing: bool,
    pub max_retries: u32,
}

impl Network {
    /// Draws every link once from `U(0, 200)` ms delay and `U(0, 0.1)` loss.
    pub fn random<R: Rng + ?Sized>(n: usize, overrides: LinkOverrides, rng: &mut R) -> Self {
        let mut links = vec![
            LinkModel { base_delay_ms: 0.0, bandwidth_bps: DEFAULT_BANDWIDTH_BPS, loss_rate: 0.0 };
            n * n
        ];
        for i in 0..n {
            for j in i + 1..n {
                let base: f64 = rng.gen::<f64>() * MAX_BASE_DELAY_MS;
                let loss: f64 = rng.gen::<f64>() * MAX_LOSS_RATE;
                let l = LinkModel {
                    base_delay_ms: overrides.base_delay_ms.unwrap_or(base),
                    bandwidth_bps: overrides.bandwidth_bps.unwrap_or(DEFAULT_BANDWIDTH_BPS),
                    loss_rate: overrides.loss_rate.unwrap_or(loss),
                };
                links[i * n + j] = l;
                links[j * n + i] = l;
            }
        }
        Self { n, links, uplink_sharing: true, max_retries: DEFAULT_MAX_RETRIES }
    }

    pub fn uniform(n: usize, link: LinkModel) -> Self {
        Self { n, links: vec![link; n * n], uplink_sharing: true, max_retries: DEFAULT_MAX_RETRIES }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn link(&self, from: NodeId, to: NodeId) -> &LinkModel {
        &self.links[from * self.n + to]
    }

    pub fn set_link(&mut self, from: NodeId, to: NodeId, link: LinkModel) {
        self.links[from * self.n + to] = link;
    }

    /// Serialization time of each copy in a batch. With uplink sharing the
    /// copies are served processor-sharing style: the `j`-th smallest copy
    /// finishes after `Σ_{i<j} s_i + (k-j) s_j` bytes have left the sender.
    pub fn batch_serialization_ms(&self, from: NodeId, sends: &[(NodeId, usize)]) -> Vec<f64> {
        if !self.uplink_sharing || sends.len() <= 1 {
            return sends.iter().map(|&(to, bytes)| self.link(from, to).serialization_ms(bytes)).collect();
        }
        let k = sends.len();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by_key(|&i| (sends[i].1, i));
        let mut out = vec![0.0; k];
        let mut done = 0usize;
        for (rank, &i) in order.iter().enumerate() {
            let (to, bytes) = sends[i];
            let effective = done + (k - rank) * bytes;
            out[i] = self.link(from, to).serialization_ms(effective);
            done += bytes;
        }
        out
    }

    /// Delivery plan for each copy of a batch sent at `now`. A lost attempt is
    /// retried after `RTO = 2 * base_delay + transfer`.
    pub fn plan_batch<R: Rng + ?Sized>(
        &self,
        from: NodeId,
        sends: &[(NodeId, usize)],
        now: f64,
        rng: &mut R,
    ) -> Vec<DeliveryPlan> {
        debug_assert!(sends.iter().all(|&(to, _)| to != from));
        let ser = self.batch_serialization_ms(from, sends);
        sends
            .iter()
            .zip(ser)
            .map(|(&(to, _), ser_ms)| {
                let link = self.link(from, to);
                let rto = 2.0 * link.base_delay_ms + ser_ms;
                let mut lost = 0u32;
                loop {
                    let dropped = link.loss_rate > 0.0 && rng.gen::<f64>() < link.loss_rate;
                    if !dropped {
                        let at = now + lost as f64 * rto + link.base_delay_ms + ser_ms;
                        return DeliveryPlan::Delivered { at, attempts: lost + 1 };
                    }
                    lost += 1;
                    if lost > self.max_retries {
                        return DeliveryPlan::Undeliverable { attempts: lost };
                    }
                }
            })
            .collect()
    }

    pub fn plan<R: Rng + ?Sized>(
        &self,
        from: NodeId,
        to: NodeId,
        bytes: usize,
        now: f64,
        rng: &mut R,
    ) -> DeliveryPlan {
        self.plan_batch(from, &[(to, bytes)], now, rng)[0]
    }
}

struct Scheduled<E> {
    at: f64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.total_cmp(&self.at).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Time-ordered event queue; equal timestamps run in scheduling order.
pub struct EventQueue<E> {
    heap: BinaryHeap<Scheduled<E>>,
    now: f64,
    next_seq: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self { heap: BinaryHeap::new(), now: 0.0, next_seq: 0 }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Events in the past are clamped to the current clock.
    pub fn schedule(&mut self, at: f64, event: E) {
        let at = if at < self.now { self.now } else { at };
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Scheduled { at, seq, event });
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|s| s.at)
    }

    pub fn pop(&mut self) -> Option<(f64, E)> {
        let s = self.heap.pop()?;
        self.now = s.at;
        Some((s.at, s.event))
    }

    /// Pops events with `at <= t_end` into `handler`, which may schedule more.
    /// The clock ends at `t_end` even if the queue drains earlier.
    pub fn run_until(&mut self, t_end: f64, mut handler: impl FnMut(&mut Self, f64, E)) {
        while self.peek_time().is_some_and(|t| t <= t_end) {
            let (at, ev) = self.pop().expect("peeked");
            handler(self, at, ev);
        }
        if self.now < t_end {
            self.now = t_end;
        }
    }
}
