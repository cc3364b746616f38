//! Flat key=value run configuration. A config file holds the same settings
//! as the CLI flags; flags given on the command line override file values.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub subcommand: String,
    pub seed: u64,
    pub dataset: String,
    pub batchsize: usize,
    pub epochs: usize,
    pub optimizer: String,
    pub lr: f64,
    pub momentum: f64,
    pub n_in: usize,
    pub n_hid: usize,
    pub n_out: usize,
    pub workers: usize,
    pub transport: String,
    pub rank: Option<usize>,
    pub endpoints: Vec<String>,
    pub snapshot: Option<String>,
    pub sizes: String,
    pub iters: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            subcommand: "train".into(),
            seed: 0,
            dataset: "synthetic".into(),
            batchsize: 32,
            epochs: 10,
            optimizer: "sgd".into(),
            lr: 0.1,
            momentum: 0.9,
            n_in: 2,
            n_hid: 16,
            n_out: 2,
            workers: 1,
            transport: "inprocess".into(),
            rank: None,
            endpoints: Vec::new(),
            snapshot: None,
            sizes: "1k,64k".into(),
            iters: 20,
        }
    }
}

impl RunConfig {
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "subcommand={}", self.subcommand);
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "dataset={}", self.dataset);
        let _ = writeln!(out, "batchsize={}", self.batchsize);
        let _ = writeln!(out, "epochs={}", self.epochs);
        let _ = writeln!(out, "optimizer={}", self.optimizer);
        let _ = writeln!(out, "lr={}", self.lr);
        let _ = writeln!(out, "momentum={}", self.momentum);
        let _ = writeln!(out, "n_in={}", self.n_in);
        let _ = writeln!(out, "n_hid={}", self.n_hid);
        let _ = writeln!(out, "n_out={}", self.n_out);
        let _ = writeln!(out, "workers={}", self.workers);
        let _ = writeln!(out, "transport={}", self.transport);
        if let Some(rank) = self.rank {
            let _ = writeln!(out, "rank={}", rank);
        }
        if !self.endpoints.is_empty() {
            let _ = writeln!(out, "endpoints={}", self.endpoints.join(","));
        }
        if let Some(snapshot) = &self.snapshot {
            let _ = writeln!(out, "snapshot={}", snapshot);
        }
        let _ = writeln!(out, "sizes={}", self.sizes);
        let _ = writeln!(out, "iters={}", self.iters);
        out
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "subcommand" => self.subcommand = value.to_string(),
            "seed" => self.seed = value.parse().context("seed")?,
            "dataset" => self.dataset = value.to_string(),
            "batchsize" => self.batchsize = value.parse().context("batchsize")?,
            "epochs" => self.epochs = value.parse().context("epochs")?,
            "optimizer" => self.optimizer = value.to_string(),
            "lr" => self.lr = value.parse().context("lr")?,
            "momentum" => self.momentum = value.parse().context("momentum")?,
            "n_in" => self.n_in = value.parse().context("n_in")?,
            "n_hid" => self.n_hid = value.parse().context("n_hid")?,
            "n_out" => self.n_out = value.parse().context("n_out")?,
            "workers" => self.workers = value.parse().context("workers")?,
            "transport" => self.transport = value.to_string(),
            "rank" => self.rank = Some(value.parse().context("rank")?),
            "endpoints" => {
                self.endpoints = value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
            }
            "snapshot" => self.snapshot = Some(value.to_string()),
            "sizes" => self.sizes = value.to_string(),
            "iters" => self.iters = value.parse().context("iters")?,
            other => bail!("unknown config key '{}'", other),
        }
        Ok(())
    }

    /// Parse a key=value file; '#' starts a comment, blank lines are
    /// skipped.
    pub fn from_kv(text: &str) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("line {}: expected key=value, got '{}'", lineno + 1, line);
            };
            config
                .apply_kv(key.trim(), value.trim())
                .with_context(|| format!("line {}", lineno + 1))?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        RunConfig::from_kv(&text)
    }
}

/// Parse "1k,64k,1m" style size lists into byte counts.
pub fn parse_sizes(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|part| {
            let part = part.trim().to_lowercase();
            if part.is_empty() {
                bail!("empty size entry");
            }
            let (digits, mult) = match part.strip_suffix(['k', 'm', 'g']) {
                Some(d) if part.ends_with('k') => (d, 1usize << 10),
                Some(d) if part.ends_with('m') => (d, 1usize << 20),
                Some(d) => (d, 1usize << 30),
                None => (part.as_str(), 1usize),
            };
            let n: usize = digits.trim().parse().with_context(|| format!("size '{}'", part))?;
            Ok(n * mult)
        })
        .collect()
}
