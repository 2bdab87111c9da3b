use super::{BinSummary, GravityError, GravityParams, SectorIndex};
use crate::ingest::{FirmPopulation, IOTable};
use crate::par;

/// Per sector-pair sums over ordered firm pairs `i != j`, `i` in the buyer
/// sector, `j` in the seller sector. `q = p(1-p)`, `v = log m_i + log m_j`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BlockSums {
    /// `Σ p`
    pub p: f64,
    /// `Σ q`
    pub d: f64,
    /// `Σ q v`
    pub da: f64,
    /// `Σ m_i p`
    pub q: f64,
    /// `Σ m_i q`
    pub e: f64,
    /// `Σ m_i q v`
    pub ea: f64,
}

impl BlockSums {
    fn add(&mut self, o: &BlockSums) {
        self.p += o.p;
        self.d += o.d;
        self.da += o.da;
        self.q += o.q;
        self.e += o.e;
        self.ea += o.ea;
    }
}

/// Expected link count and sector inflows, with gradients in the
/// coordinates `[log z, α, κ, log λ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub links: f64,
    pub inflow: Vec<f64>,
    pub d_links: Vec<f64>,
    pub d_inflow: Vec<Vec<f64>>,
    pub blocks: Vec<BlockSums>,
}

#[derive(Debug, Clone)]
enum Cells {
    Exact {
        m: Vec<Vec<f64>>,
        u: Vec<Vec<f64>>,
    },
    /// Per sector: (count, centroid, log centroid).
    Binned {
        bins: Vec<Vec<(f64, f64, f64)>>,
    },
}

/// Evaluates the model's moments either exactly (quadratic in firms) or
/// over size-bin cells.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pairs: Vec<(usize, usize)>,
    log_s: Vec<f64>,
    share: Vec<f64>,
    n_sectors: usize,
    sector_sizes: Vec<f64>,
    cells: Cells,
}

const UNIT_PAIRS: usize = 1 << 18;

impl Evaluator {
    /// `bins = None` or `Some(0)` selects exact evaluation.
    pub fn new(pop: &FirmPopulation, io: &IOTable, bins: Option<usize>) -> Self {
        match bins {
            Some(b) if b > 0 => Self::binned(&BinSummary::new(pop, b), pop, io),
            _ => Self::exact(pop, io),
        }
    }

    fn frame(pop: &FirmPopulation, io: &IOTable, cells: Cells) -> Self {
        let pairs = io.active_pairs();
        Self {
            log_s: pairs.iter().map(|&(k, l)| io.s(k, l).ln()).collect(),
            share: pairs.iter().map(|&(k, l)| io.i(k, l)).collect(),
            pairs,
            n_sectors: io.n_sectors(),
            sector_sizes: pop.sector_sizes().to_vec(),
            cells,
        }
    }

    pub fn exact(pop: &FirmPopulation, io: &IOTable) -> Self {
        let idx = SectorIndex::new(pop);
        let f = pop.firms();
        let m: Vec<Vec<f64>> = idx
            .members
            .iter()
            .map(|mem| mem.iter().map(|&i| f[i].size).collect())
            .collect();
        let u = m
            .iter()
            .map(|v| v.iter().map(|x| x.ln()).collect())
            .collect();
        Self::frame(pop, io, Cells::Exact { m, u })
    }

    pub fn binned(summary: &BinSummary, pop: &FirmPopulation, io: &IOTable) -> Self {
        let bins = summary
            .bins
            .iter()
            .map(|bs| {
                bs.iter()
                    .map(|b| (b.count as f64, b.centroid, b.centroid.ln()))
                    .collect()
            })
            .collect();
        Self::frame(pop, io, Cells::Binned { bins })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn sector_sizes(&self) -> &[f64] {
        &self.sector_sizes
    }

    pub fn n_sectors(&self) -> usize {
        self.n_sectors
    }

    pub fn is_binned(&self) -> bool {
        matches!(self.cells, Cells::Binned { .. })
    }

    /// Block prefactor `z λ S^κ` per active pair.
    fn prefactors(&self, params: &GravityParams) -> Result<Vec<f64>, GravityError> {
        self.pairs
            .iter()
            .zip(&self.log_s)
            .enumerate()
            .map(|(p, (&(k, l), &ls))| {
                let lam = if params.pairs.get(p) == Some(&(k, l)) {
                    params.lambda[p]
                } else {
                    params
                        .lambda_of(k, l)
                        .ok_or(GravityError::MissingLambda { k, l })?
                };
                Ok(params.z * lam * (params.kappa * ls).exp())
            })
            .collect()
    }

    pub fn block_sums(&self, params: &GravityParams) -> Result<Vec<BlockSums>, GravityError> {
        let pre = self.prefactors(params)?;
        let alpha = params.alpha;
        Ok(match &self.cells {
            Cells::Exact { m, u } => {
                let a: Vec<Vec<f64>> =
                    par::map_slice(u, |us| us.iter().map(|&x| (alpha * x).exp()).collect());
                let mut units = Vec::new();
                for (p, &(k, l)) in self.pairs.iter().enumerate() {
                    let rows = UNIT_PAIRS / m[l].len().max(1);
                    for (s, e) in par::chunks(m[k].len(), rows) {
                        units.push((p, s, e));
                    }
                }
                let parts = par::map_slice(&units, |&(p, s, e)| {
                    let (k, l) = self.pairs[p];
                    exact_rows(pre[p], &a[k], &u[k], &m[k], &a[l], &u[l], s..e, k == l)
                });
                let mut out = vec![BlockSums::default(); self.pairs.len()];
                for (&(p, _, _), part) in units.iter().zip(&parts) {
                    out[p].add(part);
                }
                out
            }
            Cells::Binned { bins } => {
                let pw: Vec<Vec<f64>> = bins
                    .iter()
                    .map(|bs| bs.iter().map(|b| (alpha * b.2).exp()).collect())
                    .collect();
                par::map_range(self.pairs.len(), |p| {
                    let (k, l) = self.pairs[p];
                    let mut acc = BlockSums::default();
                    for (a, &(na, ca, ua)) in bins[k].iter().enumerate() {
                        let ci = pre[p] * pw[k][a];
                        for (b, &(nb, _, ub)) in bins[l].iter().enumerate() {
                            let w = if k == l && a == b {
                                na * (na - 1.0)
                            } else {
                                na * nb
                            };
                            if w == 0.0 {
                                continue;
                            }
                            let x = ci * pw[l][b];
                            let r = 1.0 / (1.0 + x);
                            let pr = x * r;
                            let q = pr * r;
                            let v = ua + ub;
                            acc.p += w * pr;
                            acc.d += w * q;
                            acc.da += w * q * v;
                            acc.q += w * ca * pr;
                            acc.e += w * ca * q;
                            acc.ea += w * ca * q * v;
                        }
                    }
                    acc
                })
            }
        })
    }

    pub fn moments(&self, params: &GravityParams) -> Result<Moments, GravityError> {
        let blocks = self.block_sums(params)?;
        let dim = 3 + self.pairs.len();
        let mut links = 0.0;
        let mut d_links = vec![0.0; dim];
        let mut inflow = vec![0.0; self.n_sectors];
        let mut d_inflow = vec![vec![0.0; dim]; self.n_sectors];
        for (p, b) in blocks.iter().enumerate() {
            let (_, l) = self.pairs[p];
            let (ls, sh) = (self.log_s[p], self.share[p]);
            links += b.p;
            d_links[0] += b.d;
            d_links[1] += b.da;
            d_links[2] += b.d * ls;
            d_links[3 + p] = b.d;
            inflow[l] += sh * b.q;
            let g = &mut d_inflow[l];
            g[0] += sh * b.e;
            g[1] += sh * b.ea;
            g[2] += sh * b.e * ls;
            g[3 + p] = sh * b.e;
        }
        Ok(Moments {
            links,
            inflow,
            d_links,
            d_inflow,
            blocks,
        })
    }

    /// Expected link count only.
    pub fn links(&self, params: &GravityParams) -> Result<f64, GravityError> {
        Ok(self.block_sums(params)?.iter().map(|b| b.p).sum())
    }

    /// Signed relative inflow errors `(inflow_l - s_l) / s_l`; zero for
    /// sectors without firms.
    pub fn relative_errors(&self, inflow: &[f64]) -> Vec<f64> {
        inflow
            .iter()
            .zip(&self.sector_sizes)
            .map(|(&f, &s)| if s > 0.0 { (f - s) / s } else { 0.0 })
            .collect()
    }
}

#[inline]
fn row_sums(ci: f64, a: &[f64], u: &[f64]) -> (f64, f64, f64) {
    let mut sp = [0.0f64; 4];
    let mut sq = [0.0f64; 4];
    let mut su = [0.0f64; 4];
    let n4 = a.len() / 4 * 4;
    for (ac, uc) in a[..n4].chunks_exact(4).zip(u[..n4].chunks_exact(4)) {
        for t in 0..4 {
            let x = ci * ac[t];
            let r = 1.0 / (1.0 + x);
            let p = x * r;
            let q = p * r;
            sp[t] += p;
            sq[t] += q;
            su[t] += q * uc[t];
        }
    }
    for (&aj, &uj) in a[n4..].iter().zip(&u[n4..]) {
        let x = ci * aj;
        let r = 1.0 / (1.0 + x);
        let p = x * r;
        let q = p * r;
        sp[0] += p;
        sq[0] += q;
        su[0] += q * uj;
    }
    (
        (sp[0] + sp[1]) + (sp[2] + sp[3]),
        (sq[0] + sq[1]) + (sq[2] + sq[3]),
        (su[0] + su[1]) + (su[2] + su[3]),
    )
}

#[allow(clippy::too_many_arguments)]
fn exact_rows(
    c: f64,
    ak: &[f64],
    uk: &[f64],
    mk: &[f64],
    al: &[f64],
    ul: &[f64],
    rows: std::ops::Range<usize>,
    same: bool,
) -> BlockSums {
    let mut acc = BlockSums::default();
    for i in rows {
        let ci = c * ak[i];
        let (sp, sq, su) = if same {
            let (p1, q1, u1) = row_sums(ci, &al[..i], &ul[..i]);
            let (p2, q2, u2) = row_sums(ci, &al[i + 1..], &ul[i + 1..]);
            (p1 + p2, q1 + q2, u1 + u2)
        } else {
            row_sums(ci, al, ul)
        };
        let da = sq * uk[i] + su;
        acc.p += sp;
        acc.d += sq;
        acc.da += da;
        acc.q += mk[i] * sp;
        acc.e += mk[i] * sq;
        acc.ea += mk[i] * da;
    }
    acc
}

/// Raw objective `(Σp - n_d)^2`, per-sector band violations
/// `|inflow_l - s_l| / s_l` and the objective's gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub objective: f64,
    pub violations: Vec<f64>,
    pub gradient: Vec<f64>,
    pub moments: Moments,
}

pub fn objective_and_constraints(
    params: &GravityParams,
    pop: &FirmPopulation,
    io: &IOTable,
    cfg: &super::FitConfig,
) -> Result<Evaluation, GravityError> {
    let ev = Evaluator::new(pop, io, cfg.bins);
    evaluate(&ev, params, cfg.target_links)
}

pub(crate) fn evaluate(
    ev: &Evaluator,
    params: &GravityParams,
    target: f64,
) -> Result<Evaluation, GravityError> {
    let mo = ev.moments(params)?;
    let gap = mo.links - target;
    Ok(Evaluation {
        objective: gap * gap,
        violations: ev
            .relative_errors(&mo.inflow)
            .iter()
            .map(|v| v.abs())
            .collect(),
        gradient: mo.d_links.iter().map(|g| 2.0 * gap * g).collect(),
        moments: mo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gravity::{intensity, link_probability, FitConfig};
    use crate::ingest::Firm;
    use rand::{Rng, SeedableRng};

    fn fixture(n: usize, ns: usize, seed: u64) -> (FirmPopulation, IOTable, GravityParams) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut firms: Vec<Firm> = (0..n)
            .map(|i| Firm {
                id: i as u64,
                sector: i % ns,
                size: (-rng.random::<f64>() * 6.0).exp(),
            })
            .collect();
        firms[0].size = 1.0;
        let pop = FirmPopulation::new(firms, ns).unwrap();
        let rows = (0..ns)
            .map(|_| {
                (0..ns)
                    .map(|_| {
                        if rng.random::<f64>() < 0.25 {
                            0.0
                        } else {
                            rng.random::<f64>() * 10.0
                        }
                    })
                    .collect()
            })
            .collect();
        let io = IOTable::new((0..ns).map(|s| s.to_string()).collect(), rows).unwrap();
        let mut params = GravityParams::uniform(
            &io,
            rng.random_range(0.1..5.0),
            rng.random_range(0.2..0.8),
            rng.random_range(0.1..0.9),
        );
        for l in &mut params.lambda {
            *l = rng.random_range(0.2..3.0);
        }
        (pop, io, params)
    }

    /// Direct double sum over firm pairs.
    fn brute(pop: &FirmPopulation, io: &IOTable, params: &GravityParams) -> (f64, Vec<f64>) {
        let f = pop.firms();
        let mut links = 0.0;
        let mut inflow = vec![0.0; io.n_sectors()];
        for i in 0..f.len() {
            for j in 0..f.len() {
                if i == j {
                    continue;
                }
                let p = link_probability(
                    intensity(f[i].size, f[j].size, f[i].sector, f[j].sector, params, io).unwrap(),
                );
                links += p;
                inflow[f[j].sector] += f[i].size * p * io.i(f[i].sector, f[j].sector);
            }
        }
        (links, inflow)
    }

    #[test]
    fn exact_moments_match_double_sum() {
        for seed in 0..5 {
            let (pop, io, params) = fixture(40, 3, seed);
            let mo = Evaluator::exact(&pop, &io).moments(&params).unwrap();
            let (links, inflow) = brute(&pop, &io, &params);
            assert!((mo.links - links).abs() < 1e-10 * links.max(1.0));
            for (a, b) in mo.inflow.iter().zip(&inflow) {
                assert!((a - b).abs() < 1e-10 * b.max(1.0));
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..5 {
            let (pop, io, params) = fixture(12, 3, 100 + seed);
            let ev = Evaluator::exact(&pop, &io);
            let mo = ev.moments(&params).unwrap();
            let theta = params.to_theta();
            let h = 1e-6;
            for c in 0..theta.len() {
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[c] += h;
                tm[c] -= h;
                let up = ev.moments(&params.with_theta(&tp)).unwrap();
                let dn = ev.moments(&params.with_theta(&tm)).unwrap();
                let fd = (up.links - dn.links) / (2.0 * h);
                assert!(
                    (fd - mo.d_links[c]).abs() <= 1e-6 * fd.abs().max(1e-3),
                    "links coord {c}"
                );
                for l in 0..io.n_sectors() {
                    let fd = (up.inflow[l] - dn.inflow[l]) / (2.0 * h);
                    assert!(
                        (fd - mo.d_inflow[l][c]).abs() <= 1e-6 * fd.abs().max(1e-3),
                        "inflow {l} coord {c}"
                    );
                }
            }
        }
    }

    #[test]
    fn two_firms_at_half_probability() {
        let firms = vec![
            Firm {
                id: 0,
                sector: 0,
                size: 1.0,
            },
            Firm {
                id: 1,
                sector: 0,
                size: 1.0,
            },
        ];
        let pop = FirmPopulation::new(firms, 1).unwrap();
        let io = IOTable::new(vec!["a".into()], vec![vec![1.0]]).unwrap();
        let params = GravityParams::uniform(&io, 1.0, 0.5, 0.5);
        let cfg = FitConfig::new(1.0);
        let e = objective_and_constraints(&params, &pop, &io, &cfg).unwrap();
        assert_eq!(e.objective, 0.0);
    }

    #[test]
    fn singleton_bins_reproduce_exact() {
        let (pop, io, params) = fixture(30, 2, 7);
        let exact = Evaluator::exact(&pop, &io).moments(&params).unwrap();
        // enough bins that every firm sits alone
        let binned = Evaluator::new(&pop, &io, Some(1 << 20))
            .moments(&params)
            .unwrap();
        assert!((exact.links - binned.links).abs() < 1e-9 * exact.links);
    }

    #[test]
    fn thread_count_agrees() {
        let (pop, io, params) = fixture(300, 3, 9);
        let ev = Evaluator::exact(&pop, &io);
        let a = par::with_threads(1, || ev.moments(&params).unwrap());
        let b = par::with_threads(4, || ev.moments(&params).unwrap());
        assert_eq!(a, b);
    }
}
