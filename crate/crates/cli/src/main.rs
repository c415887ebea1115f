use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use exclique::config::{Algo, ExperimentConfig, KEYS};
use exclique::runner::{self, Comparison, RunArtifacts};

#[derive(Parser)]
#[command(name = "exclique", version, about = "Clique / ExClique PoA simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one configuration (or a sweep) and write its artifacts.
    Run {
        #[command(flatten)]
        common: Common,
        /// Sweep one key over values, e.g. `m=500,1000,2000`.
        #[arg(long)]
        sweep: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Run several algorithms under the same seed and tabulate them.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Algorithms to compare.
        #[arg(long, value_delimiter = ',', default_value = "clique,exclique")]
        algos: Vec<Algo>,
        #[arg(long)]
        json: bool,
    },
    /// List configuration keys.
    Keys,
}

#[derive(Args)]
struct Common {
    /// Config file (`key = value` lines or a JSON object).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    algo: Option<Algo>,
    #[arg(long)]
    nodes: Option<usize>,
    /// Transactions per block, comma list, or `auto`.
    #[arg(long)]
    m: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `KEY=VALUE` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                ExperimentConfig::parse_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(a) = self.algo {
            cfg.algo = a;
        }
        let mut set = |k: &str, v: String| cfg.set(k, &v).map_err(|e| anyhow::anyhow!("{k}: {e}"));
        if let Some(n) = self.nodes {
            set("n", n.to_string())?;
        }
        if let Some(m) = &self.m {
            set("m", m.clone())?;
        }
        if let Some(s) = self.steps {
            set("steps", s.to_string())?;
        }
        if let Some(s) = self.seed {
            set("seed", s.to_string())?;
        }
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else { bail!("--set expects KEY=VALUE, got `{kv}`") };
            set(k.trim(), v.to_string())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_all(out: &Path, runs: &[RunArtifacts]) -> Result<()> {
    if let [one] = runs {
        return Ok(one.write_to(out)?);
    }
    for (i, r) in runs.iter().enumerate() {
        r.write_to(&out.join(format!("{i:02}-{}", r.summary.label)))?;
    }
    Ok(())
}

fn report(runs: &[RunArtifacts], json: bool, out: Option<&Path>) -> Result<()> {
    let cmp = Comparison::from_runs(runs);
    if json {
        println!("{}", serde_json::to_string_pretty(&cmp)?);
    } else {
        print!("{}", cmp.to_table());
    }
    if let Some(out) = out {
        write_all(out, runs)?;
        fs::write(out.join("comparison.json"), serde_json::to_string_pretty(&cmp)? + "\n")?;
        eprintln!("artifacts written to {}", out.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Run { common, sweep, json } => {
            let cfg = common.load()?;
            let cfgs = match sweep {
                Some(s) => cfg.sweep(&s)?,
                None => vec![cfg],
            };
            let runs = runner::run_many(&cfgs)?;
            report(&runs, json, common.out.as_deref())
        }
        Cmd::Compare { common, algos, json } => {
            let base = common.load()?;
            let cfgs: Vec<_> = algos
                .into_iter()
                .map(|a| {
                    let label = if base.label.is_empty() { String::new() } else { format!("{}-{a}", base.label) };
                    ExperimentConfig { algo: a, label, ..base.clone() }
                })
                .collect();
            let (_, runs) = runner::compare(&cfgs)?;
            report(&runs, json, common.out.as_deref())
        }
        Cmd::Keys => {
            let defaults = ExperimentConfig::default().to_text();
            for k in KEYS {
                let line = defaults.lines().find(|l| l.split('=').next().map(str::trim) == Some(k));
                match line {
                    Some(l) => println!("{l}"),
                    None => println!("# {k} = (unset, derived)"),
                }
            }
            Ok(())
        }
    }
}
