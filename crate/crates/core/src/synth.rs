//! Synthetic fixtures: economies generated from known gravity parameters,
//! and a US-shaped sector table with an SBA-like size distribution.

use rand::Rng;
use rand_distr::{Distribution, LogNormal};

use crate::graph::{NodeMeta, SparseDigraph};
use crate::gravity::{Evaluator, GravityParams};
use crate::ingest::{BinRow, Firm, FirmPopulation, FirmSizeBinTable, IOTable};
use crate::rng;
use crate::weights::WeightedNetwork;

/// Firms with log-normal sizes, normalized so the largest is one. Sectors
/// are assigned round-robin so every sector has firms.
pub fn lognormal_population(n: usize, n_sectors: usize, sigma: f64, seed: u64) -> FirmPopulation {
    let mut r = rng::stream(seed, &[rng::tag("lognormal-pop")]);
    let dist = LogNormal::new(0.0, sigma).expect("sigma must be positive");
    let raw = (0..n)
        .map(|i| (i as u64, i % n_sectors, dist.sample(&mut r)))
        .collect();
    FirmPopulation::from_raw_sizes(raw, n_sectors).expect("nonempty population")
}

fn random_flows(n_sectors: usize, zero_fraction: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, &[rng::tag("flows")]);
    (0..n_sectors)
        .map(|k| {
            (0..n_sectors)
                .map(|l| {
                    // keep the diagonal so every sector buys from and sells to someone
                    if k != l && r.random::<f64>() < zero_fraction {
                        0.0
                    } else {
                        (r.random::<f64>() * 3.0 - 1.5).exp()
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EconomySpec {
    pub n_firms: usize,
    pub n_sectors: usize,
    pub alpha: f64,
    pub kappa: f64,
    /// Mean out-degree used to pick the starting `z`.
    pub mean_degree: f64,
    pub size_sigma: f64,
    pub zero_fraction: f64,
    pub seed: u64,
}

impl EconomySpec {
    pub fn new(n_firms: usize, n_sectors: usize, seed: u64) -> Self {
        Self {
            n_firms,
            n_sectors,
            alpha: 0.44,
            kappa: 0.32,
            mean_degree: 6.0,
            size_sigma: 1.5,
            zero_fraction: 0.2,
            seed,
        }
    }
}

/// A population, flow table and generating parameters under which the
/// model's sector inflows equal the sector sizes exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Economy {
    pub pop: FirmPopulation,
    pub io: IOTable,
    pub truth: GravityParams,
    /// Expected link count at the truth.
    pub target_links: f64,
}

/// Builds an [`Economy`] with `λ = 1` by rescaling flow columns and `z`
/// until every sector's expected inflow matches its size.
pub fn consistent_economy(spec: &EconomySpec) -> Economy {
    let pop = lognormal_population(spec.n_firms, spec.n_sectors, spec.size_sigma, spec.seed);
    let mut flows = random_flows(spec.n_sectors, spec.zero_fraction, spec.seed);
    let names: Vec<String> = (0..spec.n_sectors).map(|s| format!("S{s:02}")).collect();
    let n = spec.n_firms as f64;
    let s = pop.sector_sizes().to_vec();
    let s_total: f64 = s.iter().sum();

    let mut io = IOTable::new(names.clone(), flows.clone()).expect("valid flows");
    let mut truth = GravityParams::uniform(&io, 1.0, spec.alpha, spec.kappa);
    // start z near the requested density
    let want = spec.mean_degree * n;
    let (mut lo, mut hi) = (1e-8f64.ln(), 1e4f64.ln());
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        truth.z = mid.exp();
        if Evaluator::exact(&pop, &io).links(&truth).unwrap() < want {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    for _ in 0..2000 {
        let ev = Evaluator::exact(&pop, &io);
        let mo = ev.moments(&truth).unwrap();
        let total: f64 = mo.inflow.iter().sum();
        let worst = (0..spec.n_sectors)
            .map(|l| (mo.inflow[l] / s[l] - 1.0).abs())
            .fold(0.0, f64::max);
        if worst < 1e-11 {
            break;
        }
        truth.z *= s_total / total;
        for row in flows.iter_mut() {
            for (l, f) in row.iter_mut().enumerate() {
                *f *= (s[l] / s_total * total / mo.inflow[l]).powf(0.7);
            }
        }
        io = IOTable::new(names.clone(), flows.clone()).expect("valid flows");
        let z = truth.z;
        truth = GravityParams::uniform(&io, z, spec.alpha, spec.kappa);
    }
    let target_links = Evaluator::exact(&pop, &io).links(&truth).unwrap();
    Economy {
        pop,
        io,
        truth,
        target_links,
    }
}

pub const US_SECTORS: usize = 24;
pub const US_POSITIVE_FLOWS: usize = 173;

/// 24x24 flow table with exactly 173 positive cells: the diagonal plus 149
/// off-diagonal cells, heavy-tailed values.
pub fn us_shaped_io(seed: u64) -> IOTable {
    let n = US_SECTORS;
    let mut r = rng::stream(seed, &[rng::tag("us-io")]);
    let mut flows = vec![vec![0.0; n]; n];
    let off: Vec<(usize, usize)> = (0..n)
        .flat_map(|k| (0..n).map(move |l| (k, l)))
        .filter(|(k, l)| k != l)
        .collect();
    let extra = US_POSITIVE_FLOWS - n;
    let picked = rand::seq::index::sample(&mut r, off.len(), extra).into_vec();
    let mut chosen: Vec<(usize, usize)> = picked.into_iter().map(|i| off[i]).collect();
    chosen.sort_unstable();
    let ln = LogNormal::new(0.0, 1.5).unwrap();
    for k in 0..n {
        flows[k][k] = ln.sample(&mut r);
    }
    for (k, l) in chosen {
        flows[k][l] = ln.sample(&mut r);
    }
    let names = (0..n).map(|s| format!("S{s:02}")).collect();
    IOTable::new(names, flows).expect("valid table")
}

/// Receipts-style size classes in currency; the top class ends at one billion.
pub const SBA_BINS: [(f64, f64); 9] = [
    (0.0, 1e5),
    (1e5, 5e5),
    (5e5, 1e6),
    (1e6, 5e6),
    (5e6, 1e7),
    (1e7, 5e7),
    (5e7, 1e8),
    (1e8, 5e8),
    (5e8, 1e9),
];

/// Approximate share of firms per class.
pub const SBA_SHARES: [f64; 9] = [0.53, 0.24, 0.09, 0.09, 0.025, 0.022, 0.0018, 0.0009, 0.0003];

/// Bin table with roughly `n_firms` firms spread over the sectors of `io`.
pub fn sba_like_bins(io: &IOTable, n_firms: usize, seed: u64) -> FirmSizeBinTable {
    let mut r = rng::stream(seed, &[rng::tag("sba-bins")]);
    let ns = io.n_sectors();
    let weights: Vec<f64> = (0..ns).map(|_| 0.3 + r.random::<f64>()).collect();
    let wsum: f64 = weights.iter().sum();
    let mut rows = Vec::new();
    for (s, w) in weights.iter().enumerate() {
        for (b, &(lo, hi)) in SBA_BINS.iter().enumerate() {
            let expect = n_firms as f64 * w / wsum * SBA_SHARES[b];
            let base = expect.floor();
            let count = base as u64 + (r.random::<f64>() < expect - base) as u64;
            rows.push(BinRow {
                sector: s,
                bin_low: lo,
                bin_high: hi,
                count,
            });
        }
    }
    FirmSizeBinTable::new(rows, ns).expect("valid bins")
}

/// A strongly connected support with self-loops and a row-stochastic `W0`
/// on it whose stationary vector, scaled so the largest entry is one, is
/// written into the node sizes. Weighting programs on this support are
/// feasible for any positive bands, since `W0` satisfies them exactly.
pub fn stationary_fixture(
    n: usize,
    n_sectors: usize,
    extra_out: usize,
    self_weight: f64,
    seed: u64,
) -> WeightedNetwork {
    let mut r = rng::stream(seed, &[rng::tag("stationary-fixture")]);
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    for i in 0..n {
        for _ in 0..extra_out {
            let j = r.random_range(0..n);
            if j != i {
                edges.push((i, j));
            }
        }
    }
    let placeholder = (0..n)
        .map(|i| NodeMeta {
            firm_id: i as u64,
            sector: i % n_sectors,
            size: 1.0,
        })
        .collect();
    let g = SparseDigraph::new(placeholder, n_sectors, edges).add_self_loops();
    let csr = g.out_csr();
    let mut weights = vec![0.0; g.n_edges()];
    for i in 0..n {
        let nb = csr.neighbors(i);
        let raw: Vec<f64> = nb
            .iter()
            .map(|&j| if j == i { 0.0 } else { 0.2 + r.random::<f64>() })
            .collect();
        let total: f64 = raw.iter().sum();
        for (k, &j) in nb.iter().enumerate() {
            weights[csr.offsets[i] + k] = if j == i {
                self_weight
            } else {
                (1.0 - self_weight) * raw[k] / total
            };
        }
    }
    let w0 = WeightedNetwork::new(g, weights);
    let (nu, _, _) = w0.stationary(1e-15, 1_000_000);
    let top = nu.iter().copied().fold(0.0, f64::max);
    let nodes = w0
        .graph
        .nodes()
        .iter()
        .zip(&nu)
        .map(|(node, &x)| NodeMeta {
            size: x / top,
            ..*node
        })
        .collect();
    let g = SparseDigraph::with_provenance(
        nodes,
        n_sectors,
        w0.graph.edges().to_vec(),
        w0.graph.provenance().to_vec(),
    );
    WeightedNetwork::new(g, w0.weights)
}

/// Small hand-checkable population.
pub fn population(sizes: &[(usize, f64)], n_sectors: usize) -> FirmPopulation {
    let firms = sizes
        .iter()
        .enumerate()
        .map(|(i, &(s, m))| Firm {
            id: i as u64,
            sector: s,
            size: m,
        })
        .collect();
    FirmPopulation::new(firms, n_sectors).expect("valid population")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn economy_is_consistent_at_truth() {
        let eco = consistent_economy(&EconomySpec::new(200, 3, 5));
        let mo = Evaluator::exact(&eco.pop, &eco.io)
            .moments(&eco.truth)
            .unwrap();
        for (f, s) in mo.inflow.iter().zip(eco.pop.sector_sizes()) {
            assert!((f / s - 1.0).abs() < 1e-9);
        }
        assert!(eco.truth.lambda.iter().all(|&l| l == 1.0));
        assert_eq!(eco.truth.alpha, 0.44);
    }

    #[test]
    fn us_table_shape() {
        let io = us_shaped_io(1);
        assert_eq!(io.n_sectors(), 24);
        assert_eq!(io.active_pairs().len(), 173);
        let bins = sba_like_bins(&io, 100_000, 1);
        let total = bins.total_count() as f64;
        assert!((total - 1e5).abs() < 500.0);
        assert!(bins.rows().iter().all(|r| r.bin_high <= 1e9));
    }
}
