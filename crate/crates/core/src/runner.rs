//! Runs configured experiments and writes their artifacts.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{classify_trace, steps_csv, AnalyticsError, AnalyticsReport, StepRecord};
use crate::config::{ConfigError, ExperimentConfig};
use crate::rewards::{committed_from_trace, settle, RewardError, RewardMode, RewardSummary};
use crate::sim::{self, SimConfig, SimOutcome};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error(transparent)]
    Rewards(#[from] RewardError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Headline numbers of one run, written as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub config: SimConfig,
    /// How leading steps were excluded from the statistics.
    pub warmup_policy: String,
    pub measured_tps: f64,
    pub p_f: f64,
    pub p0: f64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub mean_block_bytes: f64,
    pub mean_full_block_bytes: f64,
    pub mean_broadcast_ms: f64,
    pub failed_steps: usize,
    pub filter_rebuilds: u64,
    /// Mean |beta - observed| over mean observed `b + v`.
    pub beta_tracking_error: Option<f64>,
    pub fairness_window: Option<f64>,
    pub fairness_direct: Option<f64>,
    pub report: AnalyticsReport<f64>,
}

pub struct RunArtifacts {
    pub outcome: SimOutcome,
    pub steps: Vec<StepRecord>,
    pub summary: RunSummary,
    pub rewards: RewardSummary,
    pub rewards_direct: RewardSummary,
    pub reward_mode: RewardMode,
}

impl RunArtifacts {
    pub fn selected_rewards(&self) -> &RewardSummary {
        match self.reward_mode {
            RewardMode::Window => &self.rewards,
            RewardMode::Direct => &self.rewards_direct,
        }
    }

    /// Writes `trace.ndjson`, `steps.csv`, `summary.json` and `rewards.csv`.
    pub fn write_to(&self, dir: &Path) -> Result<(), RunError> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(fs::File::create(dir.join("trace.ndjson"))?);
        self.outcome.trace.write_ndjson(&mut w)?;
        w.flush()?;
        fs::write(dir.join("steps.csv"), steps_csv(&self.steps))?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary)? + "\n")?;
        fs::write(dir.join("rewards.csv"), self.selected_rewards().to_csv())?;
        Ok(())
    }
}

/// Simulates, classifies and settles rewards for one configuration.
pub fn run_sim(cfg: SimConfig, reward_mode: RewardMode) -> Result<RunArtifacts, RunError> {
    let outcome = sim::run(cfg);
    let (steps, report) = classify_trace::<f64>(&outcome.trace)?;
    let chain = committed_from_trace(&outcome.trace);
    let cfg = &outcome.config;
    let from = cfg.warmup() + 1;
    let counted: Vec<_> = chain.iter().filter(|b| b.step <= cfg.steps).cloned().collect();
    let rewards = settle(&counted, cfg.params.n, RewardMode::Window, from)?;
    let rewards_direct = settle(&counted, cfg.params.n, RewardMode::Direct, from)?;
    let summary = RunSummary {
        label: cfg.label.clone(),
        config: cfg.clone(),
        warmup_policy: format!("first {} steps discarded", cfg.warmup()),
        measured_tps: report.measured_tps,
        p_f: report.p_f,
        p0: report.rates.p0,
        p1: report.rates.p1,
        p2: report.rates.p2,
        p3: report.rates.p3,
        mean_block_bytes: report.mean_block_bytes,
        mean_full_block_bytes: report.mean_full_block_bytes,
        mean_broadcast_ms: report.mean_b_ms,
        failed_steps: outcome.failed_steps.range(from..=cfg.steps).count(),
        filter_rebuilds: outcome.filter_rebuilds,
        beta_tracking_error: outcome.beta_tracking.relative_error(),
        fairness_window: rewards.fairness_ratio(),
        fairness_direct: rewards_direct.fairness_ratio(),
        report,
    };
    Ok(RunArtifacts { outcome, steps, summary, rewards, rewards_direct, reward_mode })
}

/// Runs every `m` entry of a configuration.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<RunArtifacts>, RunError> {
    cfg.sim_configs()?.into_iter().map(|s| run_sim(s, cfg.reward_mode)).collect()
}

/// Runs several configurations on worker threads, preserving input order.
pub fn run_many(cfgs: &[ExperimentConfig]) -> Result<Vec<RunArtifacts>, RunError> {
    let sims: Vec<(SimConfig, RewardMode)> = cfgs
        .iter()
        .map(|c| c.sim_configs().map(|v| v.into_iter().map(|s| (s, c.reward_mode)).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(sims.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<RunArtifacts, RunError>>>> =
        sims.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some((cfg, mode)) = sims.get(i) else { break };
                let r = run_sim(cfg.clone(), *mode);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every run finished")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub n: usize,
    pub m: usize,
    pub measured_tps: f64,
    pub expected_tps: f64,
    pub mean_block_bytes: f64,
    pub mean_broadcast_ms: f64,
    pub p_f: f64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub fairness_window: Option<f64>,
    pub fairness_direct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn from_runs(runs: &[RunArtifacts]) -> Self {
        let rows = runs
            .iter()
            .map(|r| {
                let s = &r.summary;
                ComparisonRow {
                    label: s.label.clone(),
                    n: s.config.params.n,
                    m: s.config.params.m,
                    measured_tps: s.measured_tps,
                    expected_tps: s.report.lambda,
                    mean_block_bytes: s.mean_block_bytes,
                    mean_broadcast_ms: s.mean_broadcast_ms,
                    p_f: s.p_f,
                    p1: s.p1,
                    p2: s.p2,
                    p3: s.p3,
                    fairness_window: s.fairness_window,
                    fairness_direct: s.fairness_direct,
                }
            })
            .collect();
        Self { rows }
    }

    /// Ratio of row `a` to row `b` for a metric.
    pub fn ratio(&self, a: usize, b: usize, metric: impl Fn(&ComparisonRow) -> f64) -> f64 {
        metric(&self.rows[a]) / metric(&self.rows[b])
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from(
            "label                      n      m      tps  model_tps  block_bytes  bcast_ms    p_f     p1     p2     p3  fair_win  fair_dir\n",
        );
        let f = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<24} {:>3} {:>6} {:>8.1} {:>10.1} {:>12.0} {:>9.1} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>9} {:>9}",
                r.label,
                r.n,
                r.m,
                r.measured_tps,
                r.expected_tps,
                r.mean_block_bytes,
                r.mean_broadcast_ms,
                r.p_f,
                r.p1,
                r.p2,
                r.p3,
                f(r.fairness_window),
                f(r.fairness_direct)
            );
        }
        if self.rows.len() >= 2 {
            let last = self.rows.len() - 1;
            let _ = writeln!(
                out,
                "\n{} vs {}: tps x{:.2}, block size x{:.3}, broadcast time x{:.3}",
                self.rows[last].label,
                self.rows[0].label,
                self.ratio(last, 0, |r| r.measured_tps),
                self.ratio(last, 0, |r| r.mean_block_bytes),
                self.ratio(last, 0, |r| r.mean_broadcast_ms),
            );
        }
        out
    }
}

/// Runs configurations under the same seed schedule and tabulates them.
pub fn compare(cfgs: &[ExperimentConfig]) -> Result<(Comparison, Vec<RunArtifacts>), RunError> {
    let runs = run_many(cfgs)?;
    Ok((Comparison::from_runs(&runs), runs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Algo, MSpec};

    fn small(algo: Algo) -> ExperimentConfig {
        ExperimentConfig { algo, n: 5, m: vec![MSpec::Fixed(60)], steps: 40, ..Default::default() }
    }

    #[test]
    fn identical_configs_give_identical_reports() {
        let (a, _) = compare(&[small(Algo::Exclique), small(Algo::Exclique)]).unwrap();
        assert_eq!(a.rows[0], a.rows[1]);
    }

    #[test]
    fn artifacts_are_written_and_reproducible() {
        let dir = std::env::temp_dir().join(format!("exclique-runner-{}", std::process::id()));
        let runs = run(&small(Algo::Clique)).unwrap();
        runs[0].write_to(&dir.join("a")).unwrap();
        run(&small(Algo::Clique)).unwrap()[0].write_to(&dir.join("b")).unwrap();
        for f in ["trace.ndjson", "steps.csv", "summary.json", "rewards.csv"] {
            let a = fs::read(dir.join("a").join(f)).unwrap();
            let b = fs::read(dir.join("b").join(f)).unwrap();
            assert!(!a.is_empty());
            assert_eq!(a, b, "{f} differs");
        }
        let csv = fs::read_to_string(dir.join("a/steps.csv")).unwrap();
        assert!(csv.starts_with("step,kind,case,tx_count,x,b,v,r,a,fork\n"));
        let rewards = fs::read_to_string(dir.join("a/rewards.csv")).unwrap();
        assert!(rewards.starts_with("node_id,blocks_signed,uncles,reward_units\n"));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn unstressed_clique_is_mostly_normal() {
        let runs = run(&small(Algo::Clique)).unwrap();
        assert!(runs[0].summary.p0 > 0.9, "{}", runs[0].summary.p0);
    }
}
