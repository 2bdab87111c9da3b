//! Bernoulli backbone draws and ensemble concentration diagnostics.

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::graph::{NodeMeta, SparseDigraph};
use crate::gravity::{BinSummary, GravityError, GravityParams};
use crate::ingest::{FirmPopulation, IOTable};
use crate::{par, rng};

/// Size bins per sector used to form near-constant-probability blocks.
pub const DEFAULT_SAMPLER_BINS: usize = 32;

/// `z λ_kl S_kl^κ` as a dense sector matrix, zero on inactive pairs.
fn prefactor_matrix(io: &IOTable, params: &GravityParams) -> Result<Vec<f64>, GravityError> {
    let n = io.n_sectors();
    let mut c = vec![0.0; n * n];
    for (k, l) in io.active_pairs() {
        let lam = params
            .lambda_of(k, l)
            .ok_or(GravityError::MissingLambda { k, l })?;
        c[k * n + l] = params.z * lam * io.s(k, l).powf(params.kappa);
    }
    Ok(c)
}

fn nodes_of(pop: &FirmPopulation) -> Vec<NodeMeta> {
    pop.firms()
        .iter()
        .map(|f| NodeMeta {
            firm_id: f.id,
            sector: f.sector,
            size: f.size,
        })
        .collect()
}

pub fn draw_backbone(
    pop: &FirmPopulation,
    io: &IOTable,
    params: &GravityParams,
    seed: u64,
) -> Result<SparseDigraph, GravityError> {
    draw_backbone_binned(pop, io, params, seed, DEFAULT_SAMPLER_BINS)
}

/// Draws each admissible edge independently with its exact probability.
///
/// Within a (sector pair, size bin pair) block, candidates are visited by
/// geometric skips at the block's largest probability and accepted with
/// `p_ij / p_max`. Node `i` is the `i`-th firm of `pop`.
pub fn draw_backbone_binned(
    pop: &FirmPopulation,
    io: &IOTable,
    params: &GravityParams,
    seed: u64,
    bins: usize,
) -> Result<SparseDigraph, GravityError> {
    let ns = io.n_sectors();
    let c = prefactor_matrix(io, params)?;
    let summary = BinSummary::new(pop, bins);
    let alpha = params.alpha;
    let a: Vec<f64> = pop.firms().iter().map(|f| f.size.powf(alpha)).collect();
    let mut units = Vec::new();
    for (k, l) in io.active_pairs() {
        for bi in 0..summary.bins[k].len() {
            for bj in 0..summary.bins[l].len() {
                units.push((k, l, bi, bj));
            }
        }
    }
    let parts: Vec<Vec<(usize, usize)>> = par::map_slice(&units, |&(k, l, bi, bj)| {
        let (ba, bb) = (summary.bins[k][bi], summary.bins[l][bj]);
        let rows = &summary.index.members[k][ba.start..ba.end];
        let cols = &summary.index.members[l][bb.start..bb.end];
        let ck = c[k * ns + l];
        let xmax = ck * ba.max.powf(alpha) * bb.max.powf(alpha);
        let pmax = xmax / (1.0 + xmax);
        if !(pmax > 0.0) {
            return Vec::new();
        }
        let geo = Geometric::new(pmax).expect("probability in (0, 1]");
        let mut r = rng::stream(
            seed,
            &[
                rng::tag("backbone"),
                k as u64,
                l as u64,
                bi as u64,
                bj as u64,
            ],
        );
        let total = (rows.len() as u64) * (cols.len() as u64);
        let mut out = Vec::new();
        let mut t: u64 = 0;
        loop {
            let skip = geo.sample(&mut r);
            t = match t.checked_add(skip) {
                Some(v) if v < total => v,
                _ => break,
            };
            let i = rows[(t / cols.len() as u64) as usize];
            let j = cols[(t % cols.len() as u64) as usize];
            t += 1;
            if i == j {
                continue;
            }
            let x = ck * a[i] * a[j];
            let p = x / (1.0 + x);
            if p >= pmax || r.random::<f64>() * pmax < p {
                out.push((i, j));
            }
        }
        out
    });
    let edges: Vec<(usize, usize)> = parts.into_iter().flatten().collect();
    Ok(SparseDigraph::new(nodes_of(pop), ns, edges))
}

/// Removes firms with no edges and recomputes sector sizes from survivors.
pub fn prune_isolates(g: &SparseDigraph) -> (SparseDigraph, usize) {
    let (h, removed) = g.prune_isolates();
    (h, removed.len())
}

/// Exact first and second moments of the Bernoulli ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub mu_e: f64,
    pub sigma2_e: f64,
    /// Expected out-degree per firm.
    pub mu_i: Vec<f64>,
    pub sigma2_i: Vec<f64>,
    /// Model out-degree PMF averaged over firms, for degrees `0..len`.
    pub degree_pmf: Vec<f64>,
}

/// Quadratic in the number of firms. The degree PMF is the exact
/// Poisson-binomial law, truncated at `thresholds` values.
pub fn ensemble_stats(
    pop: &FirmPopulation,
    io: &IOTable,
    params: &GravityParams,
    thresholds: usize,
) -> Result<EnsembleStats, GravityError> {
    let ns = io.n_sectors();
    let c = prefactor_matrix(io, params)?;
    let f = pop.firms();
    let a: Vec<f64> = f.iter().map(|x| x.size.powf(params.alpha)).collect();
    let h = thresholds.max(1);
    let rows: Vec<(f64, f64, Vec<f64>)> = par::map_range(f.len(), |i| {
        let mut mu = 0.0;
        let mut var = 0.0;
        // dp[d] = P(degree = d) for d < h; mass beyond h is dropped
        let mut dp = vec![0.0; h];
        dp[0] = 1.0;
        let base = &c[f[i].sector * ns..(f[i].sector + 1) * ns];
        for j in 0..f.len() {
            if j == i {
                continue;
            }
            let x = base[f[j].sector] * a[i] * a[j];
            if x == 0.0 {
                continue;
            }
            let p = x / (1.0 + x);
            mu += p;
            var += p * (1.0 - p);
            for d in (1..h).rev() {
                dp[d] = dp[d] * (1.0 - p) + dp[d - 1] * p;
            }
            dp[0] *= 1.0 - p;
        }
        (mu, var, dp)
    });
    let n = f.len() as f64;
    let mut pmf = vec![0.0; h];
    for (_, _, dp) in &rows {
        for (acc, v) in pmf.iter_mut().zip(dp) {
            *acc += v / n;
        }
    }
    Ok(EnsembleStats {
        mu_e: rows.iter().map(|r| r.0).sum(),
        sigma2_e: rows.iter().map(|r| r.1).sum(),
        mu_i: rows.iter().map(|r| r.0).collect(),
        sigma2_i: rows.iter().map(|r| r.1).collect(),
        degree_pmf: pmf,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawDiagnostics {
    pub edges: usize,
    pub z_score: f64,
    /// Fraction of firms outside their Bernstein band.
    pub band_violation_fraction: f64,
    pub pmf_sup_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub delta: f64,
    pub mu_e: f64,
    pub sigma_e: f64,
    pub draws: Vec<DrawDiagnostics>,
    pub mean_edges: f64,
    /// Fraction of draws with at least one firm outside its band.
    pub violating_draw_fraction: f64,
    pub z_skewness: f64,
    pub max_pmf_sup_deviation: f64,
}

/// Bernstein half-width for a sum of independent Bernoullis with variance
/// `var`, at tail probability `delta / n` per firm.
pub fn bernstein_halfwidth(var: f64, n: usize, delta: f64) -> f64 {
    let l = (2.0 * n as f64 / delta).ln();
    (2.0 * var * l).sqrt() + 2.0 / 3.0 * l
}

fn skewness(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 3 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = xs.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    if m2 <= 0.0 {
        0.0
    } else {
        m3 / m2.powf(1.5)
    }
}

/// Per-draw concentration checks against the exact ensemble moments. Draws
/// must be unpruned, with node `i` the `i`-th firm.
pub fn concentration_report(
    draws: &[SparseDigraph],
    stats: &EnsembleStats,
    delta: f64,
) -> ConcentrationReport {
    let n = stats.mu_i.len();
    let sigma_e = stats.sigma2_e.sqrt();
    let band: Vec<f64> = stats
        .sigma2_i
        .iter()
        .map(|&v| bernstein_halfwidth(v, n, delta))
        .collect();
    let diags: Vec<DrawDiagnostics> = par::map_slice(draws, |g| {
        let (_, dout) = g.degrees(false);
        let outside = (0..n)
            .filter(|&i| (dout[i] as f64 - stats.mu_i[i]).abs() >= band[i])
            .count();
        let mut pmf = vec![0.0; stats.degree_pmf.len()];
        for &d in &dout {
            if d < pmf.len() {
                pmf[d] += 1.0 / n as f64;
            }
        }
        let sup = pmf
            .iter()
            .zip(&stats.degree_pmf)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let e = g.n_edges();
        DrawDiagnostics {
            edges: e,
            z_score: if sigma_e > 0.0 {
                (e as f64 - stats.mu_e) / sigma_e
            } else {
                0.0
            },
            band_violation_fraction: outside as f64 / n.max(1) as f64,
            pmf_sup_deviation: sup,
        }
    });
    let k = diags.len().max(1) as f64;
    let z: Vec<f64> = diags.iter().map(|d| d.z_score).collect();
    ConcentrationReport {
        delta,
        mu_e: stats.mu_e,
        sigma_e,
        mean_edges: diags.iter().map(|d| d.edges as f64).sum::<f64>() / k,
        violating_draw_fraction: diags
            .iter()
            .filter(|d| d.band_violation_fraction > 0.0)
            .count() as f64
            / k,
        z_skewness: skewness(&z),
        max_pmf_sup_deviation: diags
            .iter()
            .map(|d| d.pmf_sup_deviation)
            .fold(0.0, f64::max),
        draws: diags,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn io1() -> IOTable {
        IOTable::new(vec!["a".into()], vec![vec![1.0]]).unwrap()
    }

    #[test]
    fn zero_probability_gives_empty_graph() {
        let io = IOTable::new(
            vec!["a".into(), "b".into()],
            vec![vec![0.0, 1.0], vec![0.0, 0.0]],
        )
        .unwrap();
        let pop = synth::population(&[(1, 1.0), (1, 0.5), (0, 0.3)], 2);
        let p = GravityParams::uniform(&io, 1.0, 0.5, 0.5);
        let g = draw_backbone(&pop, &io, &p, 3).unwrap();
        // only 0 -> 1 sector links allowed, and sector 0 has one firm
        assert!(g
            .edges()
            .iter()
            .all(|&(i, j)| pop.firms()[i].sector == 0 && pop.firms()[j].sector == 1));
    }

    #[test]
    fn certain_edges_always_drawn() {
        let io = io1();
        let pop = synth::population(&[(0, 1.0), (0, 1.0)], 1);
        let mut p = GravityParams::uniform(&io, 1.0, 0.5, 0.5);
        p.z = 1e300;
        let g = draw_backbone(&pop, &io, &p, 1).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 0)]);
    }

    #[test]
    fn deterministic_across_threads() {
        let eco = synth::consistent_economy(&synth::EconomySpec::new(300, 3, 2));
        let a = par::with_threads(1, || {
            draw_backbone(&eco.pop, &eco.io, &eco.truth, 9).unwrap()
        });
        let b = par::with_threads(4, || {
            draw_backbone(&eco.pop, &eco.io, &eco.truth, 9).unwrap()
        });
        assert_eq!(a, b);
        assert_ne!(a, draw_backbone(&eco.pop, &eco.io, &eco.truth, 10).unwrap());
    }

    #[test]
    fn pair_frequencies_match_probabilities() {
        let eco = synth::consistent_economy(&synth::EconomySpec {
            mean_degree: 4.0,
            ..synth::EconomySpec::new(20, 2, 4)
        });
        let p = crate::gravity::probability_matrix(&eco.pop, &eco.io, &eco.truth).unwrap();
        let n = eco.pop.len();
        let reps = 10_000;
        let mut hits = vec![0u32; n * n];
        for s in 0..reps {
            for &(i, j) in draw_backbone_binned(&eco.pop, &eco.io, &eco.truth, s, 4)
                .unwrap()
                .edges()
            {
                hits[i * n + j] += 1;
            }
        }
        let (mut cells, mut outside) = (0, 0);
        for i in 0..n {
            for j in 0..n {
                let q = p[i * n + j];
                let freq = hits[i * n + j] as f64 / reps as f64;
                let sd = (q * (1.0 - q) / reps as f64).sqrt();
                if q == 0.0 {
                    assert_eq!(hits[i * n + j], 0);
                    continue;
                }
                cells += 1;
                if (freq - q).abs() > 3.0 * sd {
                    outside += 1;
                }
                assert!(
                    (freq - q).abs() <= 4.5 * sd,
                    "pair ({i},{j}) freq {freq} p {q}"
                );
            }
        }
        // a 3-sigma excursion has probability 0.27% per cell
        assert!(
            outside as f64 <= 0.01 * cells as f64 + 1.0,
            "{outside} of {cells} cells beyond 3 sigma"
        );
    }

    #[test]
    fn degenerate_probabilities_have_no_spread() {
        let io = io1();
        let pop = synth::population(&[(0, 1.0), (0, 1.0), (0, 1.0)], 1);
        let mut p = GravityParams::uniform(&io, 1.0, 0.5, 0.5);
        p.z = 1e300;
        let stats = ensemble_stats(&pop, &io, &p, 5).unwrap();
        let draws: Vec<_> = (0..5)
            .map(|s| draw_backbone(&pop, &io, &p, s).unwrap())
            .collect();
        let rep = concentration_report(&draws, &stats, 0.05);
        assert!(rep
            .draws
            .iter()
            .all(|d| d.z_score == 0.0 && d.band_violation_fraction == 0.0));
    }

    #[test]
    fn stats_match_direct_sums() {
        let eco = synth::consistent_economy(&synth::EconomySpec::new(60, 2, 1));
        let p = crate::gravity::probability_matrix(&eco.pop, &eco.io, &eco.truth).unwrap();
        let st = ensemble_stats(&eco.pop, &eco.io, &eco.truth, 6).unwrap();
        let mu: f64 = p.iter().sum();
        assert!((st.mu_e - mu).abs() < 1e-9 * mu);
        assert!(st.sigma2_e <= st.mu_e);
        let pmf_total: f64 = st.degree_pmf.iter().sum();
        assert!(pmf_total <= 1.0 + 1e-12);
    }
}
