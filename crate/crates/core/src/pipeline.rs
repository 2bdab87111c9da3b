//! Stage runner. Every stage reads its inputs from the output directory and
//! writes artifacts stamped with the config hash, so stages can be run one
//! at a time or end to end.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::closure::close;
use crate::config::{Config, ConfigError};
use crate::factory::{allocate, FactoryGraph};
use crate::graph::{NodeMeta, Provenance, SparseDigraph};
use crate::gravity::{bootstrap_fit, fit, FitConfig, GravityParams};
use crate::ingest::{self, Firm, FirmPopulation, IOTable};
use crate::netstats::{degree_ccdf, loglog_fit, summarize, DegreeKind};
use crate::sampler::{draw_backbone_binned, ensemble_stats};
use crate::validation;
use crate::weights::{
    solve_weights, stationary_check, SolveOptions, WeightProgram, WeightedNetwork,
};

/// Above this many firms the exact ensemble moments are skipped.
pub const ENSEMBLE_LIMIT: usize = 20_000;

pub const FIRMS: &str = "firms.csv";
pub const INGEST_REPORT: &str = "ingest_report.json";
pub const PARAMS: &str = "params.json";
pub const NODES: &str = "nodes.csv";
pub const EDGES: &str = "edges.csv";
pub const ENSEMBLE_REPORT: &str = "ensemble_report.json";
pub const CLOSURE_REPORT: &str = "closure_report.json";
pub const WEIGHTED_EDGES: &str = "weighted_edges.csv";
pub const WEIGHTS_REPORT: &str = "weights_report.json";
pub const STATIONARY_REPORT: &str = "stationary_report.json";
pub const STATS: &str = "stats.json";
pub const CCDF: &str = "ccdf.csv";
pub const FACTORY_EDGES: &str = "factory_edges.csv";
pub const BOOTSTRAP: &str = "bootstrap.json";
pub const MANIFEST: &str = "manifest.json";
pub const TIMINGS: &str = "timings.json";
pub const BENCH: &str = "bench.csv";
pub const AUDIT: &str = "audit.json";

/// A failed stage, printable as one line of JSON.
#[derive(Debug, Clone, Error, PartialEq, Serialize)]
#[error("{stage}: {code}: {message}")]
pub struct StageError {
    pub stage: String,
    pub code: String,
    pub message: String,
}

impl StageError {
    pub fn new(stage: &str, code: &str, message: impl Into<String>) -> Self {
        Self {
            stage: stage.into(),
            code: code.into(),
            message: message.into(),
        }
    }

    /// Wraps a library error, using its variant name as the code.
    pub fn from_err<E: Debug + std::fmt::Display>(stage: &str, e: E) -> Self {
        let dbg = format!("{e:?}");
        let code: String = dbg
            .chars()
            .take_while(|c| c.is_alphanumeric() || *c == '_')
            .collect();
        Self::new(stage, &code, e.to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("error serializes")
    }

    /// 2 for bad invocations (missing inputs, bad config), 1 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self.code.as_str() {
            "MissingInput" | "Invalid" | "Parse" | "MissingArtifact" | "HashMismatch" => 2,
            _ => 1,
        }
    }
}

fn io_err(stage: &str, path: &Path, e: impl std::fmt::Display) -> StageError {
    StageError::new(stage, "Io", format!("{}: {e}", path.display()))
}

fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Shortest representation that reads back to the same bits.
fn num(x: f64) -> String {
    format!("{x:?}")
}

/// CSV text with a `# config_hash=... seed=...` first line.
pub struct CsvArtifact {
    pub hash: String,
    pub seed: u64,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvArtifact {
    pub fn read(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let (first, rest) = text.split_once('\n').ok_or("empty file")?;
        let mut hash = None;
        let mut seed = None;
        for tok in first.trim_start_matches('#').split_whitespace() {
            if let Some(v) = tok.strip_prefix("config_hash=") {
                hash = Some(v.to_string());
            } else if let Some(v) = tok.strip_prefix("seed=") {
                seed = v.parse().ok();
            }
        }
        let (hash, seed) = match (hash, seed) {
            (Some(h), Some(s)) if first.starts_with('#') => (h, s),
            _ => return Err(format!("{}: missing config_hash line", path.display())),
        };
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(rest.as_bytes());
        let header = rdr
            .headers()
            .map_err(|e| e.to_string())?
            .iter()
            .map(String::from)
            .collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            rows.push(
                rec.map_err(|e| e.to_string())?
                    .iter()
                    .map(String::from)
                    .collect(),
            );
        }
        Ok(Self {
            hash,
            seed,
            header,
            rows,
        })
    }

    pub fn column(&self, name: &str) -> Result<usize, String> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| format!("missing column {name}"))
    }

    pub fn parse_col<T: std::str::FromStr>(&self, name: &str) -> Result<Vec<T>, String> {
        let c = self.column(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                row[c]
                    .parse()
                    .map_err(|_| format!("row {r}: bad {name} {:?}", row[c]))
            })
            .collect()
    }
}

/// Reads the `config_hash` field of a JSON artifact.
pub fn json_hash(path: &Path) -> Result<String, String> {
    let v: Value = serde_json::from_slice(&std::fs::read(path).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    v.get("config_hash")
        .and_then(Value::as_str)
        .map(String::from)
        .ok_or_else(|| "missing config_hash".into())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub seed: u64,
    /// Artifact name to sha256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

/// Firm graph as persisted: `nodes.csv` plus an edge file.
pub fn load_graph(
    dir: &Path,
    edges_file: &str,
    n_sectors: usize,
) -> Result<(SparseDigraph, Option<Vec<f64>>), String> {
    let nodes = CsvArtifact::read(&dir.join(NODES))?;
    let ids: Vec<u64> = nodes.parse_col("firm_id")?;
    let sectors: Vec<usize> = nodes.parse_col("sector")?;
    let sizes: Vec<f64> = nodes.parse_col("size")?;
    let index: BTreeMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let meta: Vec<NodeMeta> = (0..ids.len())
        .map(|i| NodeMeta {
            firm_id: ids[i],
            sector: sectors[i],
            size: sizes[i],
        })
        .collect();
    if sectors.iter().any(|&s| s >= n_sectors) {
        return Err("node sector out of range".into());
    }
    let e = CsvArtifact::read(&dir.join(edges_file))?;
    let src: Vec<u64> = e.parse_col("src")?;
    let dst: Vec<u64> = e.parse_col("dst")?;
    let prov: Vec<String> = e.parse_col("provenance")?;
    let weights: Option<Vec<f64>> = e
        .column("weight")
        .ok()
        .map(|_| e.parse_col("weight"))
        .transpose()?;
    let mut edges = Vec::with_capacity(src.len());
    let mut provenance = Vec::with_capacity(src.len());
    for r in 0..src.len() {
        let a = *index
            .get(&src[r])
            .ok_or_else(|| format!("row {r}: unknown firm {}", src[r]))?;
        let b = *index
            .get(&dst[r])
            .ok_or_else(|| format!("row {r}: unknown firm {}", dst[r]))?;
        edges.push((a, b));
        provenance.push(
            Provenance::parse(&prov[r])
                .ok_or_else(|| format!("row {r}: bad provenance {}", prov[r]))?,
        );
    }
    let g = SparseDigraph::with_provenance(meta, n_sectors, edges.clone(), provenance);
    if g.n_edges() != edges.len() || g.edges() != edges.as_slice() {
        return Err(format!("{edges_file}: edges must be sorted and unique"));
    }
    Ok((g, weights))
}

pub struct Run {
    pub cfg: Config,
    pub out: PathBuf,
    pub hash: String,
}

impl Run {
    pub fn new(cfg: Config, out: &Path) -> Result<Self, StageError> {
        cfg.validate()
            .map_err(|e| StageError::from_err("config", e))?;
        for (name, p) in [
            ("io_table", Some(&cfg.inputs.io_table)),
            ("firm_bins", Some(&cfg.inputs.firm_bins)),
        ] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(StageError::new(
                        "ingest",
                        "MissingInput",
                        format!("{name}: {}", p.display()),
                    ));
                }
            }
        }
        let hash = cfg.hash().map_err(|e| match e {
            ConfigError::MissingInput { name, path } => StageError::new(
                "ingest",
                "MissingInput",
                format!("{name}: {}", path.display()),
            ),
            other => StageError::from_err("config", other),
        })?;
        std::fs::create_dir_all(out).map_err(|e| io_err("config", out, e))?;
        Ok(Self {
            cfg,
            out: out.to_path_buf(),
            hash,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn stamp(&self) -> String {
        format!("# config_hash={} seed={}\n", self.hash, self.cfg.seed)
    }

    fn write_csv(
        &self,
        stage: &str,
        name: &str,
        header: &[&str],
        rows: impl Iterator<Item = Vec<String>>,
    ) -> Result<(), StageError> {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(header)
            .map_err(|e| io_err(stage, &self.path(name), e))?;
        for r in rows {
            w.write_record(&r)
                .map_err(|e| io_err(stage, &self.path(name), e))?;
        }
        let body = w
            .into_inner()
            .map_err(|e| io_err(stage, &self.path(name), e))?;
        let mut bytes = self.stamp().into_bytes();
        bytes.extend(body);
        std::fs::write(self.path(name), bytes).map_err(|e| io_err(stage, &self.path(name), e))
    }

    fn write_json(&self, stage: &str, name: &str, body: Value) -> Result<(), StageError> {
        let mut obj = serde_json::Map::new();
        obj.insert("config_hash".into(), json!(self.hash));
        obj.insert("seed".into(), json!(self.cfg.seed));
        if let Value::Object(m) = body {
            obj.extend(m);
        } else {
            obj.insert("value".into(), body);
        }
        let mut text = serde_json::to_string_pretty(&Value::Object(obj)).expect("json serializes");
        text.push('\n');
        std::fs::write(self.path(name), text).map_err(|e| io_err(stage, &self.path(name), e))
    }

    fn check_hash(&self, stage: &str, name: &str) -> Result<(), StageError> {
        let p = self.path(name);
        if !p.is_file() {
            return Err(StageError::new(
                stage,
                "MissingArtifact",
                format!("{} (run the earlier stage first)", p.display()),
            ));
        }
        let h = if name.ends_with(".json") {
            json_hash(&p)
        } else {
            CsvArtifact::read(&p).map(|a| a.hash)
        }
        .map_err(|e| StageError::new(stage, "BadArtifact", e))?;
        if h != self.hash {
            return Err(StageError::new(
                stage,
                "HashMismatch",
                format!("{name} was written under config {h}"),
            ));
        }
        Ok(())
    }

    fn record(&self, stage: &str, names: &[&str], seconds: f64) -> Result<(), StageError> {
        let mpath = self.path(MANIFEST);
        let mut manifest: Manifest = std::fs::read(&mpath)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default();
        let mut rec = StageRecord {
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            artifacts: BTreeMap::new(),
        };
        for n in names {
            rec.artifacts.insert(
                n.to_string(),
                sha256_file(&self.path(n)).map_err(|e| io_err(stage, &self.path(n), e))?,
            );
        }
        manifest.stages.insert(stage.into(), rec);
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&mpath, text).map_err(|e| io_err(stage, &mpath, e))?;
        // wall times live apart from the artifacts so reruns stay byte-identical
        let tpath = self.path(TIMINGS);
        let mut times: BTreeMap<String, f64> = std::fs::read(&tpath)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default();
        times.insert(stage.into(), seconds);
        std::fs::write(
            &tpath,
            serde_json::to_string_pretty(&times).expect("timings serialize"),
        )
        .map_err(|e| io_err(stage, &tpath, e))
    }

    pub fn load_io(&self, stage: &str) -> Result<IOTable, StageError> {
        let p = &self.cfg.inputs.io_table;
        if !p.is_file() {
            return Err(StageError::new(
                "ingest",
                "MissingInput",
                format!("io_table: {}", p.display()),
            ));
        }
        ingest::load_io_table(p).map_err(|e| StageError::from_err(stage, e))
    }

    fn load_firms(&self, stage: &str, io: &IOTable) -> Result<FirmPopulation, StageError> {
        self.check_hash(stage, FIRMS)?;
        let bad = |e: String| StageError::new(stage, "BadArtifact", e);
        let a = CsvArtifact::read(&self.path(FIRMS)).map_err(bad)?;
        let (ids, sectors, sizes) = (
            a.parse_col("firm_id").map_err(bad)?,
            a.parse_col("sector").map_err(bad)?,
            a.parse_col("size").map_err(bad)?,
        );
        let firms = (0..ids.len())
            .map(|i| Firm {
                id: ids[i],
                sector: sectors[i],
                size: sizes[i],
            })
            .collect();
        FirmPopulation::new(firms, io.n_sectors()).map_err(|e| StageError::from_err(stage, e))
    }

    fn load_params(&self, stage: &str) -> Result<GravityParams, StageError> {
        self.check_hash(stage, PARAMS)?;
        let v: Value = serde_json::from_slice(
            &std::fs::read(self.path(PARAMS)).map_err(|e| io_err(stage, &self.path(PARAMS), e))?,
        )
        .map_err(|e| StageError::new(stage, "BadArtifact", e.to_string()))?;
        serde_json::from_value(v["params"].clone())
            .map_err(|e| StageError::new(stage, "BadArtifact", e.to_string()))
    }

    fn graph(
        &self,
        stage: &str,
        edges: &str,
        io: &IOTable,
    ) -> Result<(SparseDigraph, Option<Vec<f64>>), StageError> {
        self.check_hash(stage, NODES)?;
        self.check_hash(stage, edges)?;
        load_graph(&self.out, edges, io.n_sectors())
            .map_err(|e| StageError::new(stage, "BadArtifact", e))
    }

    fn write_nodes(&self, stage: &str, g: &SparseDigraph) -> Result<(), StageError> {
        self.write_csv(
            stage,
            NODES,
            &["firm_id", "sector", "size"],
            g.nodes()
                .iter()
                .map(|n| vec![n.firm_id.to_string(), n.sector.to_string(), num(n.size)]),
        )
    }

    fn write_edges(&self, stage: &str, g: &SparseDigraph) -> Result<(), StageError> {
        let nodes = g.nodes();
        self.write_csv(
            stage,
            EDGES,
            &["src", "dst", "provenance"],
            g.edges().iter().zip(g.provenance()).map(|(&(a, b), p)| {
                vec![
                    nodes[a].firm_id.to_string(),
                    nodes[b].firm_id.to_string(),
                    p.as_str().to_string(),
                ]
            }),
        )
    }

    pub fn ingest(&self) -> Result<(), StageError> {
        let t = Instant::now();
        let stage = "ingest";
        let io = self.load_io(stage)?;
        let raw = ingest::load_raw_bins(&self.cfg.inputs.firm_bins)
            .map_err(|e| StageError::from_err(stage, e))?;
        let (bins, conc) = match &self.cfg.inputs.concordance {
            Some(p) => {
                if !p.is_file() {
                    return Err(StageError::new(
                        stage,
                        "MissingInput",
                        format!("concordance: {}", p.display()),
                    ));
                }
                let c =
                    ingest::load_concordance(p, &io).map_err(|e| StageError::from_err(stage, e))?;
                let (b, rep) = ingest::apply_concordance(&raw, &c, io.n_sectors())
                    .map_err(|e| StageError::from_err(stage, e))?;
                (b, Some(rep))
            }
            None => (
                ingest::resolve_bins(&raw, &io).map_err(|e| StageError::from_err(stage, e))?,
                None,
            ),
        };
        let pop = ingest::sample_firms(&bins, self.cfg.inputs.retain, self.cfg.seed)
            .map_err(|e| StageError::from_err(stage, e))?;
        self.write_csv(
            stage,
            FIRMS,
            &["firm_id", "sector", "size"],
            pop.firms()
                .iter()
                .map(|f| vec![f.id.to_string(), f.sector.to_string(), num(f.size)]),
        )?;
        self.write_json(
            stage,
            INGEST_REPORT,
            json!({
                "sectors": io.sectors(),
                "positive_flows": io.active_pairs().len(),
                "bin_total": bins.total_count(),
                "firms": pop.len(),
                "sector_sizes": pop.sector_sizes(),
                "concordance": conc,
            }),
        )?;
        self.record(stage, &[FIRMS, INGEST_REPORT], t.elapsed().as_secs_f64())
    }

    pub fn fit_config(&self, n: usize) -> Result<FitConfig, StageError> {
        let f = &self.cfg.fit;
        Ok(FitConfig {
            target_links: self
                .cfg
                .target_links(n)
                .map_err(|e| StageError::from_err("fit", e))?,
            sector_tol: f.sector_tol,
            bins: Some(f.bins),
            max_iterations: f.max_iter,
            max_inner_iterations: f.max_inner_iter,
            seed: self.cfg.seed,
            ..FitConfig::default()
        })
    }

    pub fn fit(&self) -> Result<(), StageError> {
        let t = Instant::now();
        let stage = "fit";
        let io = self.load_io(stage)?;
        let pop = self.load_firms(stage, &io)?;
        let fc = self.fit_config(pop.len())?;
        let (params, report) = fit(&pop, &io, &fc).map_err(|e| StageError::from_err(stage, e))?;
        let lambda: Vec<Value> = params
            .pairs
            .iter()
            .zip(&params.lambda)
            .map(|(&(k, l), v)| json!({"k": k, "l": l, "value": v}))
            .collect();
        self.write_json(
            stage,
            PARAMS,
            json!({
                "z": params.z,
                "alpha": params.alpha,
                "kappa": params.kappa,
                "lambda": lambda,
                "bounds": params.bounds,
                "fit_report": report,
                "params": params,
            }),
        )?;
        self.record(stage, &[PARAMS], t.elapsed().as_secs_f64())
    }

    pub fn sample(&self) -> Result<(), StageError> {
        let t = Instant::now();
        let stage = "sample";
        let io = self.load_io(stage)?;
        let pop = self.load_firms(stage, &io)?;
        let params = self.load_params(stage)?;
        let g = draw_backbone_binned(&pop, &io, &params, self.cfg.seed, self.cfg.sample.bins)
            .map_err(|e| StageError::from_err(stage, e))?;
        let drawn = g.n_edges();
        let (g, removed) = if self.cfg.sample.prune_isolates {
            g.prune_isolates()
        } else {
            (g, Vec::new())
        };
        let ens = if pop.len() <= ENSEMBLE_LIMIT {
            let s = ensemble_stats(&pop, &io, &params, 1)
                .map_err(|e| StageError::from_err(stage, e))?;
            let z = (drawn as f64 - s.mu_e) / s.sigma2_e.sqrt();
            json!({"mu_e": s.mu_e, "sigma_e": s.sigma2_e.sqrt(), "z_score": z})
        } else {
            Value::Null
        };
        self.write_nodes(stage, &g)?;
        self.write_edges(stage, &g)?;
        self.write_json(
            stage,
            ENSEMBLE_REPORT,
            json!({"edges": drawn, "isolates_removed": removed.len(), "nodes": g.n_nodes(), "ensemble": ens}),
        )?;
        self.record(
            stage,
            &[NODES, EDGES, ENSEMBLE_REPORT],
            t.elapsed().as_secs_f64(),
        )
    }

    pub fn close(&self) -> Result<(), StageError> {
        let t = Instant::now();
        let stage = "close";
        let io = self.load_io(stage)?;
        let (g, _) = self.graph(stage, EDGES, &io)?;
        if g.provenance().iter().any(|&p| p != Provenance::Sampled) {
            return Err(StageError::new(
                stage,
                "AlreadyClosed",
                "edges.csv already holds closure edges; rerun sample",
            ));
        }
        let (closed, report) = close(
            &g,
            &io,
            &self.cfg.closure.hyper,
            self.cfg.seed,
            self.cfg.closure.strategy,
        )
        .map_err(|e| StageError::from_err(stage, e))?;
        self.write_edges(stage, &closed)?;
        self.write_json(
            stage,
            CLOSURE_REPORT,
            serde_json::to_value(&report).expect("report serializes"),
        )?;
        self.record(stage, &[EDGES, CLOSURE_REPORT], t.elapsed().as_secs_f64())
    }

    pub fn weight(&self) -> Result<(), StageError> {
        let t = Instant::now();
        let stage = "weight";
        let io = self.load_io(stage)?;
        self.check_hash(stage, CLOSURE_REPORT)?;
        let (g, _) = self.graph(stage, EDGES, &io)?;
        let tol = self.cfg.weights.tol;
        let prog = WeightProgram::new(g, tol).map_err(|e| StageError::from_err(stage, e))?;
        let opts = SolveOptions {
            max_iter: self.cfg.weights.max_iter,
            ..SolveOptions::default()
        };
        let (w, report) =
            solve_weights(&prog, &opts).map_err(|e| StageError::from_err(stage, e))?;
        let check = stationary_check(&w, tol.delta).map_err(|e| StageError::from_err(stage, e))?;
        let nodes = w.graph.nodes();
        self.write_csv(
            stage,
            WEIGHTED_EDGES,
            &["src", "dst", "weight", "provenance"],
            w.graph
                .edges()
                .iter()
                .zip(&w.weights)
                .zip(w.graph.provenance())
                .map(|((&(a, b), &x), p)| {
                    vec![
                        nodes[a].firm_id.to_string(),
                        nodes[b].firm_id.to_string(),
                        num(x),
                        p.as_str().to_string(),
                    ]
                }),
        )?;
        self.write_json(
            stage,
            WEIGHTS_REPORT,
            json!({"tolerances": tol, "report": report}),
        )?;
        self.write_json(
            stage,
            STATIONARY_REPORT,
            serde_json::to_value(&check).expect("check serializes"),
        )?;
        self.record(
            stage,
            &[WEIGHTED_EDGES, WEIGHTS_REPORT, STATIONARY_REPORT],
            t.elapsed().as_secs_f64(),
        )
    }

    pub fn stats(&self) -> Result<(), StageError> {
        let t = Instant::now();
        let stage = "stats";
        let io = self.load_io(stage)?;
        let (g, _) = self.graph(stage, EDGES, &io)?;
        let with_self = self.cfg.stats.with_self;
        let summary = summarize(&g, with_self);
        let mut fits = serde_json::Map::new();
        let mut rows = Vec::new();
        for (name, kind) in [
            ("in", DegreeKind::In),
            ("out", DegreeKind::Out),
            ("total", DegreeKind::Total),
        ] {
            let cc = degree_ccdf(&g, kind, with_self);
            let dmax = cc.last().map(|c| c.0).unwrap_or(0);
            fits.insert(name.into(), json!(loglog_fit(&cc, 1, dmax)));
            rows.extend(
                cc.iter()
                    .map(|&(d, p)| vec![name.to_string(), d.to_string(), num(p)]),
            );
        }
        self.write_json(stage, STATS, json!({"summary": summary, "ccdf_fits": fits}))?;
        self.write_csv(stage, CCDF, &["kind", "degree", "ccdf"], rows.into_iter())?;
        self.record(stage, &[STATS, CCDF], t.elapsed().as_secs_f64())
    }

    pub fn weighted_network(
        &self,
        stage: &str,
        io: &IOTable,
    ) -> Result<WeightedNetwork, StageError> {
        let (g, w) = self.graph(stage, WEIGHTED_EDGES, io)?;
        let w = w.ok_or_else(|| {
            StageError::new(
                stage,
                "BadArtifact",
                "weighted_edges.csv has no weight column",
            )
        })?;
        Ok(WeightedNetwork::new(g, w))
    }

    pub fn factory(&self) -> Result<FactoryGraph, StageError> {
        let t = Instant::now();
        let stage = "factory";
        let io = self.load_io(stage)?;
        let path =
            self.cfg.inputs.factories.clone().ok_or_else(|| {
                StageError::new(stage, "MissingInput", "inputs.factories is not set")
            })?;
        if !path.is_file() {
            return Err(StageError::new(
                stage,
                "MissingInput",
                format!("factories: {}", path.display()),
            ));
        }
        let table = ingest::load_factories(&path).map_err(|e| StageError::from_err(stage, e))?;
        let w = self.weighted_network(stage, &io)?;
        let fg = allocate(&w, &table, self.cfg.factory.tau_km, self.cfg.seed)
            .map_err(|e| StageError::from_err(stage, e))?;
        let facs = &fg.layout.factories;
        self.write_csv(
            stage,
            FACTORY_EDGES,
            &[
                "src_factory",
                "dst_factory",
                "src_firm",
                "dst_firm",
                "weight",
            ],
            fg.edges.iter().map(|e| {
                vec![
                    facs[e.src].factory_id.to_string(),
                    facs[e.dst].factory_id.to_string(),
                    facs[e.src].firm_id.to_string(),
                    facs[e.dst].firm_id.to_string(),
                    num(e.weight),
                ]
            }),
        )?;
        self.record(stage, &[FACTORY_EDGES], t.elapsed().as_secs_f64())?;
        Ok(fg)
    }

    pub fn bootstrap(&self) -> Result<(), StageError> {
        let t = Instant::now();
        let stage = "bootstrap";
        let io = self.load_io(stage)?;
        let pop = self.load_firms(stage, &io)?;
        let fc = self.fit_config(pop.len())?;
        let b = &self.cfg.bootstrap;
        let take = ((pop.len() as f64) * b.fraction).round() as usize;
        let summary = bootstrap_fit(&pop, &io, &fc, b.replicates, take, self.cfg.seed)
            .map_err(|e| StageError::from_err(stage, e))?;
        self.write_json(
            stage,
            BOOTSTRAP,
            serde_json::to_value(&summary).expect("summary serializes"),
        )?;
        self.record(stage, &[BOOTSTRAP], t.elapsed().as_secs_f64())
    }

    pub fn bench(&self) -> Result<validation::BenchTable, StageError> {
        let b = &self.cfg.bench;
        let opts = validation::BenchOptions {
            sizes: b.sizes.clone(),
            runs: b.runs,
            bins: b.bins,
            exact: b.exact,
            seed: self.cfg.seed,
            stages: b.stages.clone(),
            ..validation::BenchOptions::default()
        };
        let table = validation::scaling_benchmark(&opts);
        table
            .write_csv(&self.path(BENCH))
            .map_err(|e| io_err("bench", &self.path(BENCH), e))?;
        Ok(table)
    }

    /// ingest, fit, sample, close, weight, stats, and factory when a
    /// factory table is configured.
    pub fn pipeline(&self) -> Result<(), StageError> {
        self.ingest()?;
        self.fit()?;
        self.sample()?;
        self.close()?;
        self.weight()?;
        self.stats()?;
        if self.cfg.inputs.factories.is_some() {
            self.factory()?;
        }
        Ok(())
    }
}

/// Names of all deterministic artifacts a full run can produce.
pub const ARTIFACTS: [&str; 15] = [
    FIRMS,
    INGEST_REPORT,
    PARAMS,
    NODES,
    EDGES,
    ENSEMBLE_REPORT,
    CLOSURE_REPORT,
    WEIGHTED_EDGES,
    WEIGHTS_REPORT,
    STATIONARY_REPORT,
    STATS,
    CCDF,
    FACTORY_EDGES,
    BOOTSTRAP,
    MANIFEST,
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes_come_from_variants() {
        let e = StageError::from_err("ingest", ingest::IngestError::EmptyTable);
        assert_eq!(e.code, "EmptyTable");
        assert_eq!(e.exit_code(), 1);
        let j: Value = serde_json::from_str(&e.to_json()).unwrap();
        assert_eq!(j["stage"], "ingest");
        assert_eq!(
            StageError::new("ingest", "MissingInput", "x").exit_code(),
            2
        );
    }

    #[test]
    fn csv_stamp_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        std::fs::write(&p, "# config_hash=abc seed=3\na,b\n1,2.5\n").unwrap();
        let a = CsvArtifact::read(&p).unwrap();
        assert_eq!((a.hash.as_str(), a.seed), ("abc", 3));
        assert_eq!(a.parse_col::<f64>("b").unwrap(), vec![2.5]);
        std::fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(CsvArtifact::read(&p).is_err());
    }

    #[test]
    fn numbers_round_trip_exactly() {
        for x in [0.1, 1.0 / 3.0, 1e-300, 123456.789e10, 5e-324] {
            assert_eq!(num(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }
}
