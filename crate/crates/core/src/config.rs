//! Experiment configuration: a `key = value` text format with a JSON
//! equivalent, algorithm presets and expansion into simulation runs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::StepCostModel;
use crate::consensus::{default_w_ms, CostModel, DelayMode, OrderMode, PcbMode, ProtocolParams};
use crate::rewards::RewardMode;
use crate::sim::{NetworkSpec, SimConfig, WorkloadSpec};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ConfigError {
    /// 1-based; 0 when the problem is not tied to a line.
    pub line: usize,
    pub message: String,
}

impl ConfigError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        Self { line, message: message.into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    Clique,
    CliqueBcb,
    Exclique,
}

impl Algo {
    pub fn preset(self) -> (OrderMode, DelayMode, PcbMode) {
        match self {
            Algo::Clique => (OrderMode::Fixed, DelayMode::Naive, PcbMode::FullBlock),
            Algo::CliqueBcb => (OrderMode::Fixed, DelayMode::Naive, PcbMode::Bcb),
            Algo::Exclique => (OrderMode::Differential, DelayMode::Accurate, PcbMode::Pcb),
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algo::Clique => "clique",
            Algo::CliqueBcb => "clique-bcb",
            Algo::Exclique => "exclique",
        })
    }
}

impl FromStr for Algo {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "clique" => Ok(Algo::Clique),
            "clique-bcb" => Ok(Algo::CliqueBcb),
            "exclique" => Ok(Algo::Exclique),
            _ => Err(format!("unknown algo `{s}` (expected clique, clique-bcb or exclique)")),
        }
    }
}

/// Block capacity: a fixed value or the analytic optimum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MSpec {
    Fixed(usize),
    Auto,
}

impl FromStr for MSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(MSpec::Auto);
        }
        s.parse().map(MSpec::Fixed).map_err(|_| format!("expected a count or `auto`, got `{s}`"))
    }
}

impl fmt::Display for MSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MSpec::Fixed(m) => write!(f, "{m}"),
            MSpec::Auto => f.write_str("auto"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub label: String,
    pub algo: Algo,
    pub n: usize,
    pub step_ms: f64,
    pub w_ms: Option<f64>,
    pub m: Vec<MSpec>,
    pub steps: u64,
    pub seed: u64,
    pub order_mode: Option<OrderMode>,
    pub delay_mode: Option<DelayMode>,
    pub pcb_mode: Option<PcbMode>,
    pub fault_rate: f64,
    pub warmup_steps: Option<u64>,
    pub network: NetworkSpec,
    pub workload: WorkloadSpec,
    pub costs: CostModel<f64>,
    pub reward_mode: RewardMode,
    pub trace_messages: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            label: String::new(),
            algo: Algo::Exclique,
            n: 21,
            step_ms: 3000.0,
            w_ms: None,
            m: vec![MSpec::Fixed(1000)],
            steps: 300,
            seed: 1,
            order_mode: None,
            delay_mode: None,
            pcb_mode: None,
            fault_rate: 0.0,
            warmup_steps: None,
            network: NetworkSpec::default(),
            workload: WorkloadSpec::default(),
            costs: CostModel::default(),
            reward_mode: RewardMode::Window,
            trace_messages: true,
        }
    }
}

/// Every recognised key, in documentation order.
pub const KEYS: &[&str] = &[
    "label",
    "algo",
    "n",
    "step_ms",
    "w_ms",
    "m",
    "steps",
    "seed",
    "order_mode",
    "delay_mode",
    "pcb_mode",
    "fault_rate",
    "warmup_steps",
    "base_delay_ms",
    "loss_rate",
    "bandwidth_bps",
    "uplink_sharing",
    "max_retries",
    "tx_size",
    "similarity",
    "backlog_blocks",
    "max_fee",
    "verify_base_ms",
    "verify_per_tx_ms",
    "reset_base_ms",
    "reset_per_tx_ms",
    "assemble_base_ms",
    "assemble_per_tx_ms",
    "reward_mode",
    "trace_messages",
];

fn parse<T: FromStr>(value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("invalid value `{value}`"))
}

fn parse_enum<T: serde::de::DeserializeOwned>(value: &str, what: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| format!("invalid {what} `{value}`"))
}

fn parse_list<T: FromStr>(value: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(|v| v.trim().parse().map_err(|e: T::Err| e.to_string()))
        .collect()
}

impl ExperimentConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "label" => self.label = v.to_string(),
            "algo" => self.algo = v.parse()?,
            "n" => self.n = parse(v)?,
            "step_ms" => self.step_ms = parse(v)?,
            "w_ms" => self.w_ms = Some(parse(v)?),
            "m" => self.m = parse_list(v)?,
            "steps" => self.steps = parse(v)?,
            "seed" => self.seed = parse(v)?,
            "order_mode" => self.order_mode = Some(parse_enum(v, "order mode")?),
            "delay_mode" => self.delay_mode = Some(parse_enum(v, "delay mode")?),
            "pcb_mode" => self.pcb_mode = Some(parse_enum(v, "block relay mode")?),
            "fault_rate" => self.fault_rate = parse(v)?,
            "warmup_steps" => self.warmup_steps = Some(parse(v)?),
            "base_delay_ms" => self.network.overrides.base_delay_ms = Some(parse(v)?),
            "loss_rate" => self.network.overrides.loss_rate = Some(parse(v)?),
            "bandwidth_bps" => self.network.overrides.bandwidth_bps = Some(parse(v)?),
            "uplink_sharing" => self.network.uplink_sharing = parse(v)?,
            "max_retries" => self.network.max_retries = parse(v)?,
            "tx_size" => self.workload.tx_size = parse(v)?,
            "similarity" => self.workload.similarity = parse(v)?,
            "backlog_blocks" => self.workload.backlog_blocks = parse(v)?,
            "max_fee" => self.workload.max_fee = parse(v)?,
            "verify_base_ms" => self.costs.verify.base_ms = parse(v)?,
            "verify_per_tx_ms" => self.costs.verify.per_tx_ms = parse(v)?,
            "reset_base_ms" => self.costs.reset.base_ms = parse(v)?,
            "reset_per_tx_ms" => self.costs.reset.per_tx_ms = parse(v)?,
            "assemble_base_ms" => self.costs.assemble.base_ms = parse(v)?,
            "assemble_per_tx_ms" => self.costs.assemble.per_tx_ms = parse(v)?,
            "reward_mode" => self.reward_mode = parse_enum(v, "reward mode")?,
            "trace_messages" => self.trace_messages = parse(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses the text format, or JSON when the first non-blank character is `{`.
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        if text.trim_start().starts_with('{') {
            return Self::parse_json(text);
        }
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::at(i + 1, format!("expected `key = value`, got `{line}`")))?;
            cfg.set(k.trim(), v).map_err(|m| ConfigError::at(i + 1, m))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn parse_json(text: &str) -> Result<Self, ConfigError> {
        let map: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(text).map_err(|e| ConfigError::at(e.line(), e.to_string()))?;
        let line_of = |key: &str| {
            let needle = format!("\"{key}\"");
            text.lines().position(|l| l.contains(&needle)).map(|p| p + 1).unwrap_or(0)
        };
        let mut cfg = Self::default();
        for (k, v) in &map {
            let value = match v {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Array(items) => items
                    .iter()
                    .map(|x| x.as_str().map(str::to_string).unwrap_or_else(|| x.to_string()))
                    .collect::<Vec<_>>()
                    .join(","),
                other => other.to_string(),
            };
            cfg.set(k, &value).map_err(|m| ConfigError::at(line_of(k), m))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::at(0, m.to_string()));
        if !(2..=1000).contains(&self.n) {
            return bad("n must be between 2 and 1000");
        }
        if self.step_ms <= 0.0 || !self.step_ms.is_finite() {
            return bad("step_ms must be positive");
        }
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if self.m.is_empty() {
            return bad("m needs at least one value");
        }
        if !(0.0..=1.0).contains(&self.fault_rate) {
            return bad("fault_rate must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.workload.similarity) {
            return bad("similarity must lie in [0, 1]");
        }
        if let Some(l) = self.network.overrides.loss_rate {
            if !(0.0..1.0).contains(&l) {
                return bad("loss_rate must lie in [0, 1)");
            }
        }
        if self.workload.tx_size < crate::chain::MIN_TX_SIZE {
            return bad("tx_size must be at least 110 bytes");
        }
        Ok(())
    }

    /// Text form accepted by [`ExperimentConfig::parse_str`].
    pub fn to_text(&self) -> String {
        let (o, d, p) = self.modes();
        let mut lines = vec![
            format!("label = {}", self.label),
            format!("algo = {}", self.algo),
            format!("n = {}", self.n),
            format!("step_ms = {}", self.step_ms),
            format!("m = {}", self.m.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(",")),
            format!("steps = {}", self.steps),
            format!("seed = {}", self.seed),
            format!("order_mode = {}", serde_name(&o)),
            format!("delay_mode = {}", serde_name(&d)),
            format!("pcb_mode = {}", serde_name(&p)),
            format!("fault_rate = {}", self.fault_rate),
        ];
        if let Some(w) = self.w_ms {
            lines.push(format!("w_ms = {w}"));
        }
        if let Some(w) = self.warmup_steps {
            lines.push(format!("warmup_steps = {w}"));
        }
        let ov = &self.network.overrides;
        for (k, v) in [("base_delay_ms", ov.base_delay_ms), ("loss_rate", ov.loss_rate), ("bandwidth_bps", ov.bandwidth_bps)] {
            if let Some(v) = v {
                lines.push(format!("{k} = {v}"));
            }
        }
        let c = &self.costs;
        lines.extend([
            format!("uplink_sharing = {}", self.network.uplink_sharing),
            format!("max_retries = {}", self.network.max_retries),
            format!("tx_size = {}", self.workload.tx_size),
            format!("similarity = {}", self.workload.similarity),
            format!("backlog_blocks = {}", self.workload.backlog_blocks),
            format!("max_fee = {}", self.workload.max_fee),
            format!("verify_base_ms = {}", c.verify.base_ms),
            format!("verify_per_tx_ms = {}", c.verify.per_tx_ms),
            format!("reset_base_ms = {}", c.reset.base_ms),
            format!("reset_per_tx_ms = {}", c.reset.per_tx_ms),
            format!("assemble_base_ms = {}", c.assemble.base_ms),
            format!("assemble_per_tx_ms = {}", c.assemble.per_tx_ms),
            format!("reward_mode = {}", serde_name(&self.reward_mode)),
            format!("trace_messages = {}", self.trace_messages),
        ]);
        lines.join("\n") + "\n"
    }

    /// Mechanism flags: the algo preset with any explicit overrides applied.
    pub fn modes(&self) -> (OrderMode, DelayMode, PcbMode) {
        let (o, d, p) = self.algo.preset();
        (self.order_mode.unwrap_or(o), self.delay_mode.unwrap_or(d), self.pcb_mode.unwrap_or(p))
    }

    /// Analytic cost model matching this configuration's network and costs.
    pub fn cost_model(&self) -> StepCostModel<f64> {
        let mut model = StepCostModel::new(self.n, self.modes().2);
        let ov = &self.network.overrides;
        if let Some(d) = ov.base_delay_ms {
            model.base_delay_ms = d;
        }
        if let Some(bw) = ov.bandwidth_bps {
            model.bandwidth_bps = bw;
        }
        model.tx_bytes = self.workload.tx_size as f64;
        model.similarity = self.workload.similarity;
        model.costs = self.costs;
        model
    }

    pub fn resolve_m(&self, m: MSpec) -> Result<usize, ConfigError> {
        match m {
            MSpec::Fixed(m) => Ok(m),
            MSpec::Auto => self.cost_model().m_star(self.step_ms).map_err(|e| ConfigError::at(0, e.to_string())),
        }
    }

    /// One simulation per `m` entry.
    pub fn sim_configs(&self) -> Result<Vec<SimConfig>, ConfigError> {
        let (order, delay, pcb) = self.modes();
        self.m
            .iter()
            .map(|&entry| {
                let m = self.resolve_m(entry)?;
                let mut params = ProtocolParams::new(self.n, self.step_ms, m, order, delay, pcb);
                params.w_ms = self.w_ms.unwrap_or_else(|| default_w_ms(self.n));
                let label = if self.label.is_empty() { format!("{}-n{}-m{}", self.algo, self.n, m) } else { self.label.clone() };
                Ok(SimConfig {
                    label,
                    params,
                    costs: self.costs,
                    steps: self.steps,
                    seed: self.seed,
                    network: self.network.clone(),
                    workload: self.workload.clone(),
                    fault_rate: self.fault_rate,
                    warmup_steps: self.warmup_steps,
                    trace_messages: self.trace_messages,
                })
            })
            .collect()
    }

    /// Expands `KEY=V1,V2,...` into one configuration per value.
    pub fn sweep(&self, expr: &str) -> Result<Vec<ExperimentConfig>, ConfigError> {
        let (key, values) = expr
            .split_once('=')
            .ok_or_else(|| ConfigError::at(0, format!("sweep must look like KEY=V1,V2, got `{expr}`")))?;
        let key = key.trim();
        if key == "m" {
            // m already takes a list; keep one config per value for separate outputs
            return values
                .split(',')
                .map(|v| {
                    let mut c = self.clone();
                    c.set("m", v).map_err(|e| ConfigError::at(0, e))?;
                    Ok(c)
                })
                .collect();
        }
        values
            .split(',')
            .map(|v| {
                let mut c = self.clone();
                c.set(key, v).map_err(|e| ConfigError::at(0, format!("sweep {key}: {e}")))?;
                c.validate()?;
                Ok(c)
            })
            .collect()
    }
}

/// Serde name of a unit enum variant.
fn serde_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_set_mechanism_flags() {
        let mut c = ExperimentConfig { algo: Algo::Clique, ..Default::default() };
        assert_eq!(c.modes(), (OrderMode::Fixed, DelayMode::Naive, PcbMode::FullBlock));
        c.algo = Algo::Exclique;
        assert_eq!(c.modes(), (OrderMode::Differential, DelayMode::Accurate, PcbMode::Pcb));
        c.algo = Algo::CliqueBcb;
        assert_eq!(c.modes().2, PcbMode::Bcb);
        c.delay_mode = Some(DelayMode::Accurate);
        assert_eq!(c.modes(), (OrderMode::Fixed, DelayMode::Accurate, PcbMode::Bcb));
    }

    #[test]
    fn text_format_parses_and_round_trips() {
        let text = "# table defaults\nalgo = clique\nn = 5\nm = 100, auto\nsteps = 40 # short\nloss_rate = 0\n";
        let c = ExperimentConfig::parse_str(text).unwrap();
        assert_eq!(c.algo, Algo::Clique);
        assert_eq!(c.m, vec![MSpec::Fixed(100), MSpec::Auto]);
        assert_eq!(c.network.overrides.loss_rate, Some(0.0));
        let back = ExperimentConfig::parse_str(&c.to_text()).unwrap();
        assert_eq!(back.m, c.m);
        assert_eq!(back.modes(), c.modes());
        assert_eq!(back.costs, c.costs);
    }

    #[test]
    fn errors_name_the_line() {
        let e = ExperimentConfig::parse_str("n = 5\nsteps = ten\n").unwrap_err();
        assert_eq!(e.line, 2);
        let e = ExperimentConfig::parse_str("n = 5\n\nbogus = 1\n").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.to_string().contains("unknown key"));
        let e = ExperimentConfig::parse_str("n = 5\njust words\n").unwrap_err();
        assert_eq!(e.line, 2);
    }

    #[test]
    fn json_is_equivalent() {
        let json = "{\n  \"algo\": \"clique-bcb\",\n  \"n\": 7,\n  \"m\": [10, \"auto\"]\n}";
        let c = ExperimentConfig::parse_str(json).unwrap();
        assert_eq!(c.algo, Algo::CliqueBcb);
        assert_eq!(c.n, 7);
        assert_eq!(c.m, vec![MSpec::Fixed(10), MSpec::Auto]);
        let e = ExperimentConfig::parse_str("{\n  \"n\": 7,\n  \"delay_mode\": \"fast\"\n}").unwrap_err();
        assert_eq!(e.line, 3);
    }

    #[test]
    fn sweep_and_expansion() {
        let c = ExperimentConfig::default();
        let runs = c.sweep("n=5,11").unwrap();
        assert_eq!(runs.iter().map(|c| c.n).collect::<Vec<_>>(), vec![5, 11]);
        assert!(c.sweep("n=1").is_err());
        let a = ExperimentConfig { m: vec![MSpec::Auto], ..Default::default() };
        let sims = a.sim_configs().unwrap();
        assert!(sims[0].params.m > 1000);
        assert_eq!(sims[0].params.w_ms, 5500.0);
    }
}
