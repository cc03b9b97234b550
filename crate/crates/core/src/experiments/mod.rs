//! Experiment drivers: configuration, replica scheduling and reproducible
//! output files.
//!
//! Every output file carries the configuration hash, the `git describe`
//! string and the master seed. Numbers are written with the shortest
//! round-trip representation, so re-running a configuration reproduces every
//! column bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::branching::BranchError;
use crate::kernels::{CollisionKernel, KernelError};
use crate::model::{EmpiricalMeasure, ModelError, Velocity};
use crate::sampling::{SamplingError, SourceLaw};
use crate::simulator::SimError;
use crate::transport::TransportError;

pub mod consistency;
pub mod moments;
pub mod proxy;
pub mod selftest;

pub use consistency::{consistency_experiment, sup_w_on_grid, ConsistencyResult};
pub use moments::{moment_experiment, MomentTable};
pub use proxy::{boltzmann_proxy, ProxyResult};
pub use selftest::{event_conservation_violations, selftest, SelftestReport};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Branch(#[from] BranchError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub d: usize,
    /// Kernel name such as `hard-sphere-d3`; empty means hard spheres in `d`.
    pub kernel: String,
    pub ns: Vec<usize>,
    /// Reference size; defaults to the largest of `ns`.
    pub n_prime: Option<usize>,
    pub t: f64,
    pub tau: f64,
    /// `gaussian`, `two-point`, `heavy-tail:<q>`, or `heavy-tail` together
    /// with `p` (finite moments of every order below `p + 0.1`).
    pub law: String,
    pub p: Option<f64>,
    /// Moment orders for the moment experiment.
    pub q: Vec<f64>,
    pub reps: usize,
    pub seed: u64,
    pub grid_points: usize,
    /// Quantile level of `sup W` used for rate fits.
    pub quantile: f64,
    pub resamples: usize,
    pub level: f64,
    pub output_dir: Option<PathBuf>,
    /// Write every simulated path to `<output_dir>/events/*.jsonl`.
    pub save_events: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: "consistency".into(),
            d: 3,
            kernel: String::new(),
            ns: vec![128, 256, 512, 1024, 2048, 4096],
            n_prime: None,
            t: 1.0,
            tau: 0.1,
            law: "gaussian".into(),
            p: None,
            q: Vec::new(),
            reps: 20,
            seed: 0,
            grid_points: 20,
            quantile: 0.8,
            resamples: 1000,
            level: 0.95,
            output_dir: None,
            save_events: false,
        }
    }
}

pub const MIN_RESAMPLES: usize = 200;

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.d < 2 {
            return bad(format!("dimension {} < 2", self.d));
        }
        if self.ns.is_empty() || self.ns.iter().any(|&n| n < 2) {
            return bad(format!("ns must be non-empty with every N >= 2, got {:?}", self.ns));
        }
        if let Some(np) = self.n_prime {
            if np < 2 {
                return bad(format!("n_prime {np} < 2"));
            }
        }
        if !(self.t >= 0.0 && self.t.is_finite()) {
            return bad(format!("horizon {} must be finite and >= 0", self.t));
        }
        if !(self.tau >= 0.0) {
            return bad(format!("tau {} must be >= 0", self.tau));
        }
        if self.reps == 0 {
            return bad("reps must be positive".into());
        }
        if self.grid_points == 0 {
            return bad("grid_points must be positive".into());
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return bad(format!("quantile {} outside (0, 1)", self.quantile));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level {} outside (0, 1)", self.level));
        }
        if self.resamples < MIN_RESAMPLES {
            return bad(format!("resamples {} < {MIN_RESAMPLES}", self.resamples));
        }
        if let Some(dir) = &self.output_dir {
            if dir.exists() && !dir.is_dir() {
                return bad(format!("output_dir {} is not a directory", dir.display()));
            }
        }
        let k = self.kernel()?;
        if k.d != self.d {
            return bad(format!("kernel {} does not act in dimension {}", self.kernel, self.d));
        }
        self.source_law()?;
        Ok(())
    }

    pub fn kernel(&self) -> Result<CollisionKernel, ExperimentError> {
        Ok(if self.kernel.is_empty() {
            CollisionKernel::hard_sphere(self.d)?
        } else {
            CollisionKernel::from_name(&self.kernel)?
        })
    }

    pub fn source_law(&self) -> Result<SourceLaw, ExperimentError> {
        if self.law == "heavy-tail" {
            let p = self.p.ok_or_else(|| ExperimentError::Config("law heavy-tail needs p".into()))?;
            return Ok(SourceLaw::heavy_tail_for_order(self.d, p)?);
        }
        Ok(SourceLaw::parse(&self.law, self.d)?)
    }

    pub fn reference_size(&self) -> usize {
        self.n_prime.unwrap_or_else(|| self.ns.iter().copied().max().unwrap_or(0))
    }

    /// SHA-256 of the canonical JSON without the output settings.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        c.save_events = false;
        let json = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// `k` uniform points on `[a, b]`; the single point `b` when `k = 1` or
    /// `a = b`.
    pub fn grid(&self, a: f64, b: f64) -> Vec<f64> {
        uniform_grid(a, b, self.grid_points)
    }
}

pub fn uniform_grid(a: f64, b: f64, k: usize) -> Vec<f64> {
    if k <= 1 || a == b {
        return vec![b];
    }
    (0..k).map(|i| if i + 1 == k { b } else { a + (b - a) * i as f64 / (k - 1) as f64 }).collect()
}

/// `git describe --always --dirty`, or `unknown` outside a repository.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Provenance block embedded in every output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStamp {
    pub config_hash: String,
    pub git_describe: String,
    pub seed: u64,
}

impl RunStamp {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self { config_hash: cfg.hash(), git_describe: git_describe(), seed: cfg.seed }
    }
}

/// CSV rows with a `#` stamp line above the header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn write<W: Write>(&self, mut w: W, stamp: &RunStamp) -> io::Result<()> {
        writeln!(w, "# config_hash={} git={} seed={}", stamp.config_hash, stamp.git_describe, stamp.seed)?;
        writeln!(w, "{}", self.columns.join(","))?;
        for r in &self.rows {
            writeln!(w, "{}", r.join(","))?;
        }
        Ok(())
    }
}

/// Writes `result.json` (config without its output directory, stamp and
/// result) and `curves.csv` into `dir`, creating it if needed.
pub fn write_outputs<R: Serialize>(
    dir: &Path,
    cfg: &ExperimentConfig,
    stamp: &RunStamp,
    result: &R,
    curves: &Table,
) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir)?;
    let recorded = ExperimentConfig { output_dir: None, ..cfg.clone() };
    let doc = serde_json::json!({
        "config": recorded,
        "config_hash": stamp.config_hash,
        "git_describe": stamp.git_describe,
        "seed": stamp.seed,
        "result": result,
    });
    fs::write(dir.join("result.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    let mut f = io::BufWriter::new(fs::File::create(dir.join("curves.csv"))?);
    curves.write(&mut f, stamp)?;
    f.flush()?;
    Ok(())
}

pub(crate) fn measure_from_flat(v: &[f64], d: usize) -> Result<EmpiricalMeasure<f64>, ModelError> {
    EmpiricalMeasure::uniform(v.chunks_exact(d).map(|x| Velocity::from_vec(x.to_vec())).collect())
}

/// Value of an invariant check that failed; experiments collect these and the
/// CLI exits non-zero when any are present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub module: String,
    pub invariant: String,
    pub seed: u64,
    pub detail: String,
}

impl Violation {
    pub fn new(module: &str, invariant: &str, seed: u64, detail: impl Into<String>) -> Self {
        Self { module: module.into(), invariant: invariant.into(), seed, detail: detail.into() }
    }
}

/// `W` must lie in `[0, 4]`.
pub(crate) fn check_w_range(ws: impl IntoIterator<Item = f64>, module: &str, seed: u64, out: &mut Vec<Violation>) {
    for w in ws {
        if !(0.0..=4.0).contains(&w) {
            out.push(Violation::new(module, "W in [0, 4]", seed, format!("W = {w}")));
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_output_dir_and_tracks_fields() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = Some("/tmp/x".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"resamples": 10}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"d": 2, "kernel": "hard-sphere-d3"}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"law": "heavy-tail"}"#).is_err());
        let c = ExperimentConfig::from_json(r#"{"law": "heavy-tail", "p": 2.5, "ns": [8]}"#).unwrap();
        assert_eq!(c.reference_size(), 8);
    }

    #[test]
    fn grid_endpoints() {
        let g = uniform_grid(0.1, 1.0, 4);
        assert_eq!(g.len(), 4);
        assert_eq!(g[0], 0.1);
        assert_eq!(g[3], 1.0);
        assert_eq!(uniform_grid(1.0, 1.0, 20), vec![1.0]);
        assert_eq!(uniform_grid(0.0, 0.0, 20), vec![0.0]);
    }

    #[test]
    fn table_has_stamp_line() {
        let mut t = Table::new(&["N", "W"]);
        t.push(vec!["4".into(), "0.5".into()]);
        let stamp = RunStamp { config_hash: "h".into(), git_describe: "g".into(), seed: 7 };
        let mut buf = Vec::new();
        t.write(&mut buf, &stamp).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "# config_hash=h git=g seed=7\nN,W\n4,0.5\n");
    }
}
