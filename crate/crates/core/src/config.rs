//! Run configuration: one TOML file with a section per stage. Relative input
//! paths resolve against the file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::closure::{ClosureHyper, Strategy};
use crate::factory::DEFAULT_TAU_KM;
use crate::sampler::DEFAULT_SAMPLER_BINS;
use crate::validation::BenchStage;
use crate::weights::Tolerances;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("missing input {name}: {path}")]
    MissingInput { name: &'static str, path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub io_table: PathBuf,
    pub firm_bins: PathBuf,
    pub concordance: Option<PathBuf>,
    pub factories: Option<PathBuf>,
    /// Fraction of each size cell to sample.
    pub retain: f64,
}

impl Default for Inputs {
    fn default() -> Self {
        Self {
            io_table: "io_table.csv".into(),
            firm_bins: "firm_bins.csv".into(),
            concordance: None,
            factories: None,
            retain: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub target_links: Option<f64>,
    /// Links as a fraction of `N (N - 1)`.
    pub target_density: Option<f64>,
    /// Size bins per sector; 0 evaluates exactly.
    pub bins: usize,
    pub sector_tol: f64,
    pub max_iter: usize,
    pub max_inner_iter: usize,
}

impl Default for FitSection {
    fn default() -> Self {
        Self {
            target_links: None,
            target_density: None,
            bins: 16,
            sector_tol: 0.05,
            max_iter: 30,
            max_inner_iter: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub bins: usize,
    pub prune_isolates: bool,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            bins: DEFAULT_SAMPLER_BINS,
            prune_isolates: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosureSection {
    #[serde(flatten)]
    pub hyper: ClosureHyper,
    pub strategy: Strategy,
}

impl Default for ClosureSection {
    fn default() -> Self {
        Self {
            hyper: ClosureHyper::default(),
            strategy: Strategy::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsSection {
    #[serde(flatten)]
    pub tol: Tolerances,
    pub max_iter: usize,
}

impl Default for WeightsSection {
    fn default() -> Self {
        Self {
            tol: Tolerances::default(),
            max_iter: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    pub with_self: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorySection {
    pub tau_km: f64,
}

impl Default for FactorySection {
    fn default() -> Self {
        Self {
            tau_km: DEFAULT_TAU_KM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSection {
    pub replicates: usize,
    /// Subsample size as a fraction of the population.
    pub fraction: f64,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        Self {
            replicates: 20,
            fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub sizes: Vec<usize>,
    pub runs: usize,
    pub bins: usize,
    /// Also time the exact evaluator.
    pub exact: bool,
    pub stages: Vec<BenchStage>,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            sizes: vec![10_000, 30_000, 100_000],
            runs: 5,
            bins: 32,
            exact: true,
            stages: BenchStage::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Worker threads; unset means all cores. Not part of the config hash.
    pub threads: Option<usize>,
    pub inputs: Inputs,
    pub fit: FitSection,
    pub sample: SampleSection,
    pub closure: ClosureSection,
    pub weights: WeightsSection,
    pub stats: StatsSection,
    pub factory: FactorySection,
    pub bootstrap: BootstrapSection,
    pub bench: BenchSection,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Reads `path` and resolves relative input paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.into(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text).map_err(|message| ConfigError::Parse {
            path: path.into(),
            message,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.inputs.io_table);
        fix(&mut self.inputs.firm_bins);
        if let Some(p) = self.inputs.concordance.as_mut() {
            fix(p);
        }
        if let Some(p) = self.inputs.factories.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if !(self.inputs.retain > 0.0 && self.inputs.retain <= 1.0) {
            return bad("inputs.retain must lie in (0, 1]");
        }
        if self.fit.target_links.is_some() && self.fit.target_density.is_some() {
            return bad("set only one of fit.target_links and fit.target_density");
        }
        if self.sample.bins == 0 {
            return bad("sample.bins must be positive");
        }
        if !(self.factory.tau_km > 0.0) {
            return bad("factory.tau_km must be positive");
        }
        if self.threads == Some(0) {
            return bad("threads must be positive");
        }
        Ok(())
    }

    /// Link target for `n` firms, from whichever of the two fields is set.
    pub fn target_links(&self, n: usize) -> Result<f64, ConfigError> {
        match (self.fit.target_links, self.fit.target_density) {
            (Some(t), None) => Ok(t),
            (None, Some(d)) => Ok(d * n as f64 * (n as f64 - 1.0)),
            _ => Err(ConfigError::Invalid(
                "fit needs target_links or target_density".into(),
            )),
        }
    }

    /// Digest of every setting that can change an artifact, plus the bytes
    /// of each input file. Thread count and file locations are left out.
    pub fn hash(&self) -> Result<String, ConfigError> {
        let mut c = self.clone();
        c.threads = None;
        let mut h = Sha256::new();
        let mut inputs: Vec<(&'static str, Option<PathBuf>)> = vec![
            ("io_table", Some(c.inputs.io_table.clone())),
            ("firm_bins", Some(c.inputs.firm_bins.clone())),
            ("concordance", c.inputs.concordance.clone()),
            ("factories", c.inputs.factories.clone()),
        ];
        c.inputs.io_table = PathBuf::new();
        c.inputs.firm_bins = PathBuf::new();
        c.inputs.concordance = c.inputs.concordance.as_ref().map(|_| PathBuf::new());
        c.inputs.factories = c.inputs.factories.as_ref().map(|_| PathBuf::new());
        h.update(serde_json::to_vec(&c).expect("config serializes"));
        for (name, path) in inputs.drain(..) {
            if let Some(p) = path {
                let bytes = std::fs::read(&p).map_err(|_| ConfigError::MissingInput {
                    name,
                    path: p.clone(),
                })?;
                h.update(name.as_bytes());
                h.update(Sha256::digest(&bytes));
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = Config::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(Config::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn sections_parse() {
        let c = Config::from_toml(
            "seed = 7\n[fit]\ntarget_density = 1e-3\nbins = 0\n[closure]\ntheta = 0.3\nstrategy = \"heuristic\"\n[weights]\ndelta = 0.05\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.fit.bins, 0);
        assert_eq!(c.closure.hyper.theta, 0.3);
        assert_eq!(c.closure.hyper.n0, 50.0);
        assert_eq!(c.closure.strategy, Strategy::Heuristic);
        assert_eq!(c.weights.tol.delta, 0.05);
        assert_eq!(c.weights.tol.eta1, 0.1);
        assert!((c.target_links(101).unwrap() - 10.1).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_toml("[fit]\ntarget = 3").is_err());
    }

    #[test]
    fn hash_ignores_threads_and_location() {
        let dir = tempfile::tempdir().unwrap();
        for d in ["a", "b"] {
            std::fs::create_dir(dir.path().join(d)).unwrap();
            std::fs::write(dir.path().join(d).join("io_table.csv"), "A\n1\n").unwrap();
            std::fs::write(
                dir.path().join(d).join("firm_bins.csv"),
                "sector,bin_low,bin_high,count\nA,1,2,3\n",
            )
            .unwrap();
        }
        let mut a = Config::default();
        a.resolve_paths(&dir.path().join("a"));
        let mut b = Config {
            threads: Some(4),
            ..Config::default()
        };
        b.resolve_paths(&dir.path().join("b"));
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        std::fs::write(dir.path().join("b").join("io_table.csv"), "A\n2\n").unwrap();
        b.seed = 0;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
