//! Scaling benchmarks and the file-only audit of a pipeline output directory.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::closure::{close, tarjan_scc, ClosureHyper, Strategy};
use crate::gravity::{objective_and_constraints, FitConfig, GravityParams};
use crate::ingest::{FirmPopulation, IOTable};
use crate::pipeline::{self, CsvArtifact, Manifest};
use crate::sampler::draw_backbone_binned;
use crate::synth::{lognormal_population, stationary_fixture, us_shaped_io};
use crate::weights::{
    audit_constraints, solve_weights, SolveOptions, Tolerances, WeightProgram, WeightedNetwork,
};
use crate::{par, SparseDigraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchStage {
    Gravity,
    Sample,
    Close,
    Weight,
}

impl BenchStage {
    pub const ALL: [BenchStage; 4] = [
        BenchStage::Gravity,
        BenchStage::Sample,
        BenchStage::Close,
        BenchStage::Weight,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchStage::Gravity => "gravity",
            BenchStage::Sample => "sample",
            BenchStage::Close => "close",
            BenchStage::Weight => "weight",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub sizes: Vec<usize>,
    /// Timed repetitions per cell; the median is reported.
    pub runs: usize,
    pub bins: usize,
    /// Also time gravity evaluation without binning.
    pub exact: bool,
    pub seed: u64,
    /// Pins the worker count; `None` keeps the caller's pool.
    pub threads: Option<usize>,
    pub stages: Vec<BenchStage>,
    /// Mean out-degree the synthetic sampler is tuned to.
    pub mean_degree: f64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            sizes: vec![10_000, 30_000, 100_000],
            runs: 5,
            bins: 32,
            exact: true,
            seed: 0,
            threads: None,
            stages: BenchStage::ALL.to_vec(),
            mean_degree: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub stage: String,
    pub n_firms: usize,
    /// 0 for exact evaluation.
    pub bins: usize,
    pub median_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSlope {
    pub stage: String,
    pub bins: usize,
    pub slope: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
    pub slopes: Vec<BenchSlope>,
}

impl BenchTable {
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()
    }

    pub fn slope(&self, stage: &str, bins: usize) -> Option<f64> {
        self.slopes
            .iter()
            .find(|s| s.stage == stage && s.bins == bins)
            .map(|s| s.slope)
    }
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn time_median(runs: usize, mut f: impl FnMut()) -> f64 {
    let mut t: Vec<f64> = (0..runs.max(1))
        .map(|_| {
            let s = Instant::now();
            f();
            s.elapsed().as_secs_f64()
        })
        .collect();
    median(&mut t)
}

/// Gravity parameters at the reference elasticities with `z` scaled so
/// that the expected out-degree is about `mean_degree`.
pub fn bench_params(
    pop: &FirmPopulation,
    io: &IOTable,
    bins: usize,
    mean_degree: f64,
) -> GravityParams {
    let n = pop.len() as f64;
    let mut p = GravityParams::uniform(io, 1.0 / n, 0.44, 0.32);
    let cfg = FitConfig {
        target_links: 0.0,
        bins: Some(bins),
        ..FitConfig::default()
    };
    for _ in 0..3 {
        let links = objective_and_constraints(&p, pop, io, &cfg)
            .expect("valid bench params")
            .moments
            .links;
        p.z *= mean_degree * n / links;
    }
    p
}

fn bench_size(opts: &BenchOptions, n: usize, rows: &mut Vec<BenchRow>) {
    let io = us_shaped_io(opts.seed);
    let pop = lognormal_population(n, io.n_sectors(), 1.2, opts.seed);
    let mut push = |stage: BenchStage, bins: usize, secs: f64| {
        rows.push(BenchRow {
            stage: stage.as_str().into(),
            n_firms: n,
            bins,
            median_seconds: secs,
        })
    };
    let needs_params = opts.stages.iter().any(|s| {
        matches!(
            s,
            BenchStage::Gravity | BenchStage::Sample | BenchStage::Close
        )
    });
    let params = needs_params.then(|| bench_params(&pop, &io, opts.bins, opts.mean_degree));
    if opts.stages.contains(&BenchStage::Gravity) {
        let p = params.as_ref().expect("params");
        let mut bin_set = vec![opts.bins];
        if opts.exact {
            bin_set.push(0);
        }
        for b in bin_set {
            let cfg = FitConfig {
                target_links: opts.mean_degree * n as f64,
                bins: Some(b),
                ..FitConfig::default()
            };
            let secs = time_median(opts.runs, || {
                std::hint::black_box(
                    objective_and_constraints(p, &pop, &io, &cfg).expect("evaluation"),
                );
            });
            push(BenchStage::Gravity, b, secs);
        }
    }
    let mut backbone: Option<SparseDigraph> = None;
    if opts.stages.contains(&BenchStage::Sample) || opts.stages.contains(&BenchStage::Close) {
        let p = params.as_ref().expect("params");
        let draw = || draw_backbone_binned(&pop, &io, p, opts.seed, opts.bins).expect("draw");
        if opts.stages.contains(&BenchStage::Sample) {
            let secs = time_median(opts.runs, || {
                std::hint::black_box(draw());
            });
            push(BenchStage::Sample, opts.bins, secs);
        }
        backbone = Some(draw().prune_isolates().0);
    }
    if opts.stages.contains(&BenchStage::Close) {
        let g = backbone.as_ref().expect("backbone");
        let hyper = ClosureHyper::default();
        let secs = time_median(opts.runs, || {
            std::hint::black_box(
                close(g, &io, &hyper, opts.seed, Strategy::Heuristic).expect("closure"),
            );
        });
        push(BenchStage::Close, opts.bins, secs);
    }
    if opts.stages.contains(&BenchStage::Weight) {
        let w0 = stationary_fixture(n, io.n_sectors(), 3, 0.05, opts.seed);
        let prog = WeightProgram::new(w0.graph, Tolerances::default()).expect("weight program");
        let solve = SolveOptions {
            diagnose: false,
            ..SolveOptions::default()
        };
        let secs = time_median(opts.runs, || {
            std::hint::black_box(solve_weights(&prog, &solve).expect("weights"));
        });
        push(BenchStage::Weight, opts.bins, secs);
    }
}

/// Median wall time per stage and size, and the log-log slope of time
/// against firm count for each (stage, bins) series.
pub fn scaling_benchmark(opts: &BenchOptions) -> BenchTable {
    let run = || {
        let mut rows = Vec::new();
        for &n in &opts.sizes {
            bench_size(opts, n, &mut rows);
        }
        rows
    };
    let rows = match opts.threads {
        Some(t) => par::with_threads(t, run),
        None => run(),
    };
    let mut series: BTreeMap<(String, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &rows {
        let e = series.entry((r.stage.clone(), r.bins)).or_default();
        e.0.push(r.n_firms as f64);
        e.1.push(r.median_seconds);
    }
    let slopes = series
        .into_iter()
        .filter(|(_, (x, _))| x.len() >= 2)
        .map(|((stage, bins), (x, y))| BenchSlope {
            stage,
            bins,
            slope: loglog_slope(&x, &y),
        })
        .collect();
    BenchTable { rows, slopes }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    /// Offending files, rows or firm ids; empty on success.
    pub locations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub passed: bool,
    pub config_hash: Option<String>,
    pub checks: Vec<AuditCheck>,
}

impl AuditReport {
    pub fn check(&self, name: &str) -> Option<&AuditCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

const LOCATION_LIMIT: usize = 20;

fn check(name: &str, mut locations: Vec<String>, detail: String) -> AuditCheck {
    let total = locations.len();
    if total > LOCATION_LIMIT {
        locations.truncate(LOCATION_LIMIT);
        locations.push(format!("... {} more", total - LOCATION_LIMIT));
    }
    AuditCheck {
        name: name.into(),
        passed: total == 0,
        detail,
        locations,
    }
}

fn skipped(name: &str, why: &str) -> AuditCheck {
    AuditCheck {
        name: name.into(),
        passed: false,
        detail: format!("not checked: {why}"),
        locations: vec![],
    }
}

fn artifact_hash(path: &Path) -> Result<String, String> {
    if path.extension().is_some_and(|e| e == "json") {
        pipeline::json_hash(path)
    } else {
        CsvArtifact::read(path).map(|a| a.hash)
    }
}

fn sector_count(dir: &Path) -> Result<usize, String> {
    let v: Value = serde_json::from_slice(
        &std::fs::read(dir.join(pipeline::INGEST_REPORT)).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    v["sectors"]
        .as_array()
        .map(Vec::len)
        .ok_or_else(|| "ingest_report.json has no sectors".into())
}

fn tolerances(dir: &Path) -> Result<Tolerances, String> {
    let v: Value = serde_json::from_slice(
        &std::fs::read(dir.join(pipeline::WEIGHTS_REPORT)).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    serde_json::from_value(v["tolerances"].clone()).map_err(|e| e.to_string())
}

fn scc_check(name: &str, g: &SparseDigraph) -> AuditCheck {
    let cond = tarjan_scc(g);
    let k = cond.n_components();
    let locs = if k == 1 {
        vec![]
    } else {
        let nodes = g.nodes();
        cond.sources
            .iter()
            .map(|&c| {
                format!(
                    "source component containing firm {}",
                    nodes[cond.components[c][0]].firm_id
                )
            })
            .collect()
    };
    let mut c = check(name, locs, format!("{k} strongly connected components"));
    c.passed = k == 1;
    c
}

/// Re-verifies the persisted outputs of a pipeline run without the config
/// or any solver state. Reads only files in `dir`.
pub fn pipeline_audit(dir: &Path) -> AuditReport {
    let mut checks = Vec::new();
    let present: Vec<&str> = pipeline::ARTIFACTS
        .iter()
        .copied()
        .filter(|a| dir.join(a).is_file())
        .collect();

    // one config hash across everything
    let mut hashes: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut unreadable = Vec::new();
    for a in present.iter().filter(|&&a| a != pipeline::MANIFEST) {
        match artifact_hash(&dir.join(a)) {
            Ok(h) => hashes.entry(h).or_default().push(a.to_string()),
            Err(e) => unreadable.push(format!("{a}: {e}")),
        }
    }
    let config_hash = hashes
        .iter()
        .max_by_key(|(_, v)| v.len())
        .map(|(h, _)| h.clone());
    let mut locs = unreadable;
    if hashes.len() > 1 {
        for (h, files) in &hashes {
            if Some(h) != config_hash.as_ref() {
                locs.extend(files.iter().map(|f| format!("{f}: config_hash {h}")));
            }
        }
    }
    if present.is_empty() {
        locs.push("no artifacts found".into());
    }
    checks.push(check(
        "config_hash",
        locs,
        format!("{} distinct config hashes", hashes.len()),
    ));

    // manifest digests match file bytes
    let manifest: Option<Manifest> = std::fs::read(dir.join(pipeline::MANIFEST))
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok());
    match &manifest {
        None => checks.push(skipped("manifest", "manifest.json missing or unreadable")),
        Some(m) => {
            let mut locs = Vec::new();
            let mut latest: BTreeMap<&str, (&str, &str)> = BTreeMap::new();
            for (stage, rec) in &m.stages {
                if Some(&rec.config_hash) != config_hash.as_ref() {
                    locs.push(format!("stage {stage}: config_hash {}", rec.config_hash));
                }
                for (name, sha) in &rec.artifacts {
                    latest.insert(name, (stage, sha));
                }
            }
            // a later stage may rewrite an artifact (close rewrites edges.csv)
            let order = [
                "ingest",
                "fit",
                "sample",
                "close",
                "weight",
                "stats",
                "factory",
                "bootstrap",
            ];
            for (stage, rec) in order
                .iter()
                .filter_map(|s| m.stages.get(*s).map(|r| (*s, r)))
            {
                for (name, sha) in &rec.artifacts {
                    latest.insert(name, (stage, sha));
                }
            }
            for (name, (stage, sha)) in latest {
                match std::fs::read(dir.join(name)) {
                    Ok(b) if hex::encode(Sha256::digest(&b)) == sha => {}
                    Ok(_) => locs.push(format!("{name}: sha256 differs from stage {stage} record")),
                    Err(_) => locs.push(format!("{name}: missing")),
                }
            }
            checks.push(check(
                "manifest",
                locs,
                format!("{} stages recorded", m.stages.len()),
            ));
        }
    }

    let ns = match sector_count(dir) {
        Ok(n) => n,
        Err(e) => {
            checks.push(skipped("graph", &e));
            return finish(config_hash, checks);
        }
    };
    let support = pipeline::load_graph(dir, pipeline::EDGES, ns);
    match &support {
        Ok((g, _)) => checks.push(scc_check("strong_connectivity", g)),
        Err(e) => checks.push(skipped("strong_connectivity", e)),
    }
    let weighted = pipeline::load_graph(dir, pipeline::WEIGHTED_EDGES, ns);
    let w = match weighted {
        Ok((g, Some(x))) => WeightedNetwork::new(g, x),
        Ok((_, None)) => {
            checks.push(skipped(
                "weights",
                "weighted_edges.csv has no weight column",
            ));
            return finish(config_hash, checks);
        }
        Err(e) => {
            checks.push(skipped("weights", &e));
            return finish(config_hash, checks);
        }
    };
    checks.push(scc_check("weighted_strong_connectivity", &w.graph));
    let nodes = w.graph.nodes();

    let locs = w
        .row_sums()
        .iter()
        .enumerate()
        .filter(|(_, s)| (*s - 1.0).abs() > 1e-9)
        .map(|(i, s)| format!("row firm_id={} sum={s:?}", nodes[i].firm_id))
        .collect();
    checks.push(check(
        "row_sums",
        locs,
        "each row sums to one within 1e-9".into(),
    ));

    let mut locs = Vec::new();
    if let Ok((g, _)) = &support {
        if g.edges() != w.graph.edges() || g.nodes() != w.graph.nodes() {
            locs.push("weighted_edges.csv support differs from edges.csv".into());
        }
    }
    let tol = tolerances(dir);
    let floor = tol.as_ref().map(|t| t.eps0).unwrap_or(0.0);
    for (&(a, b), &x) in w.graph.edges().iter().zip(&w.weights) {
        if !(x >= floor * (1.0 - 1e-9) && x <= 1.0 + 1e-12) {
            locs.push(format!(
                "edge {}->{} weight={x:?}",
                nodes[a].firm_id, nodes[b].firm_id
            ));
        }
    }
    checks.push(check(
        "support",
        locs,
        format!("weights in [{floor:e}, 1] on the closed support"),
    ));

    let (out, _) = w.graph.degrees(true);
    let csr = w.graph.out_csr();
    let locs = (0..w.n_nodes())
        .filter(|&i| !csr.neighbors(i).contains(&i))
        .map(|i| format!("firm_id={} has no self-loop", nodes[i].firm_id))
        .chain(
            (0..w.n_nodes())
                .filter(|&i| out[i] == 0)
                .map(|i| format!("firm_id={} has no out-links", nodes[i].firm_id)),
        )
        .collect();
    checks.push(check(
        "self_loops",
        locs,
        "every firm keeps a self-loop".into(),
    ));

    match &tol {
        Ok(t) => {
            let a = audit_constraints(&w, t);
            let slack = 1e-9;
            let mut locs = Vec::new();
            for (fam, v) in [
                ("firm", a.firm),
                ("sector", a.sector),
                ("self_mean", a.self_mean),
                ("self_square", a.self_square),
            ] {
                if v > slack {
                    locs.push(format!("{fam} band exceeded by {v:e}"));
                }
            }
            if locs.iter().any(|l| l.starts_with("firm")) {
                for (j, (f, node)) in w.inflow().iter().zip(nodes).enumerate() {
                    if (f - node.size).abs() / node.size - t.delta > slack {
                        locs.push(format!("firm band at column firm_id={}", nodes[j].firm_id));
                    }
                }
            }
            checks.push(check("bands", locs, format!("{a:?}")));
            let total: f64 = nodes.iter().map(|x| x.size).sum();
            let mu: Vec<f64> = nodes.iter().map(|x| x.size / total).collect();
            let r: f64 = mu
                .iter()
                .zip(w.left_mul(&mu))
                .map(|(a, b)| (a - b).abs())
                .sum();
            let locs = if r <= t.delta * (1.0 + 1e-9) {
                vec![]
            } else {
                vec![format!("residual {r:e} > {}", t.delta)]
            };
            checks.push(check(
                "stationary_residual",
                locs,
                format!("|mu W - mu|_1 = {r:e}"),
            ));
        }
        Err(e) => checks.push(skipped("bands", e)),
    }

    if dir.join(pipeline::FACTORY_EDGES).is_file() {
        checks.push(factory_check(dir, &w));
    }
    finish(config_hash, checks)
}

fn factory_check(dir: &Path, w: &WeightedNetwork) -> AuditCheck {
    let name = "factory_aggregation";
    let art = match CsvArtifact::read(&dir.join(pipeline::FACTORY_EDGES)) {
        Ok(a) => a,
        Err(e) => return skipped(name, &e),
    };
    let cols = (
        art.parse_col::<u64>("src_firm"),
        art.parse_col::<u64>("dst_firm"),
        art.parse_col::<f64>("weight"),
    );
    let (src, dst, x) = match cols {
        (Ok(a), Ok(b), Ok(c)) => (a, b, c),
        _ => return skipped(name, "factory_edges.csv is malformed"),
    };
    let mut sums: BTreeMap<(u64, u64), f64> = BTreeMap::new();
    let mut locs = Vec::new();
    for r in 0..x.len() {
        if src[r] == dst[r] {
            locs.push(format!(
                "row {r}: intra-firm factory edge in firm {}",
                src[r]
            ));
        }
        *sums.entry((src[r], dst[r])).or_default() += x[r];
    }
    let nodes = w.graph.nodes();
    for (&(a, b), &wt) in w.graph.edges().iter().zip(&w.weights) {
        if a == b {
            continue;
        }
        let key = (nodes[a].firm_id, nodes[b].firm_id);
        let got = sums.remove(&key).unwrap_or(0.0);
        if (got - wt).abs() > 1e-12 {
            locs.push(format!(
                "firm edge {}->{}: factories sum {got:?}, firm weight {wt:?}",
                key.0, key.1
            ));
        }
    }
    for (a, b) in sums.keys() {
        locs.push(format!("factory flow between unlinked firms {a}->{b}"));
    }
    check(
        name,
        locs,
        "factory weights sum to firm weights within 1e-12".into(),
    )
}

fn finish(config_hash: Option<String>, checks: Vec<AuditCheck>) -> AuditReport {
    AuditReport {
        passed: checks.iter().all(|c| c.passed),
        config_hash,
        checks,
    }
}
