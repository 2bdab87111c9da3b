//! Minimum-energy edge weights on a closed support, and the stationary
//! distribution check.
//!
//! The program is `min Σ w²` over row-stochastic `W` on the support with
//! `w ≥ ε₀`, firm bands `|(Wᵀm)_j - m_j| ≤ δ m_j`, sector bands
//! `|ŝ_ℓ - s_ℓ| ≤ ε s_ℓ` and self-weight caps `mean(w_ii) ≤ η₁`,
//! `mean(w_ii²) ≤ η₂`. It is solved through its concave dual: for fixed
//! multipliers every row is an independent capped-simplex problem solved
//! exactly, and the multipliers are maximized by box-constrained L-BFGS.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Csr, SparseDigraph};
use crate::optim::{minimize_box, LbfgsOptions};
use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightError {
    #[error("invalid weight program: {0}")]
    BadProgram(String),
    #[error("infeasible: {family} band violated by {violation:.3e}; inflating all bands by {inflation:.4} restores feasibility")]
    Infeasible {
        family: ConstraintFamily,
        violation: f64,
        inflation: f64,
    },
    #[error("infeasible: {family} band violated by {violation:.3e}; no inflation up to {max_inflation} restores feasibility")]
    InfeasibleBeyond {
        family: ConstraintFamily,
        violation: f64,
        max_inflation: f64,
    },
    #[error(
        "dual solver stopped after {iterations} iterations with {family} violation {violation:.3e}"
    )]
    NotConverged {
        iterations: usize,
        family: ConstraintFamily,
        violation: f64,
    },
    #[error("power iteration stalled after {iterations} iterations (step {step:.3e}); gamma estimate {gamma:.3e}")]
    PowerIterationStalled {
        iterations: usize,
        step: f64,
        gamma: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintFamily {
    RowSum,
    Floor,
    Firm,
    Sector,
    SelfMean,
    SelfSquare,
}

impl std::fmt::Display for ConstraintFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ConstraintFamily::RowSum => "row-sum",
            ConstraintFamily::Floor => "floor",
            ConstraintFamily::Firm => "firm",
            ConstraintFamily::Sector => "sector",
            ConstraintFamily::SelfMean => "self-weight mean",
            ConstraintFamily::SelfSquare => "self-weight square",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Firm band `δ`.
    pub delta: f64,
    /// Sector band `ε_w`.
    pub epsilon: f64,
    /// Cap on the mean self-weight.
    pub eta1: f64,
    /// Cap on the mean squared self-weight.
    pub eta2: f64,
    /// Edge weight floor.
    pub eps0: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            delta: 0.1,
            epsilon: 0.1,
            eta1: 0.1,
            eta2: 0.1,
            eps0: 1e-6,
        }
    }
}

impl Tolerances {
    /// All band-type tolerances multiplied by `t`; the floor is unchanged.
    pub fn inflated(&self, t: f64) -> Self {
        Self {
            delta: self.delta * t,
            epsilon: self.epsilon * t,
            eta1: self.eta1 * t,
            eta2: self.eta2 * t,
            eps0: self.eps0,
        }
    }
}

/// Support, sizes and tolerances of one weighting problem.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightProgram {
    pub support: SparseDigraph,
    pub tol: Tolerances,
}

impl WeightProgram {
    pub fn new(support: SparseDigraph, tol: Tolerances) -> Result<Self, WeightError> {
        let t = &tol;
        if !(t.delta > 0.0 && t.epsilon > 0.0 && t.eta1 > 0.0 && t.eta2 > 0.0 && t.eps0 > 0.0) {
            return Err(WeightError::BadProgram(
                "delta, epsilon, eta1, eta2 and eps0 must be positive".into(),
            ));
        }
        if support.n_nodes() == 0 {
            return Err(WeightError::BadProgram("empty support".into()));
        }
        if let Some(v) = (0..support.n_nodes()).find(|&v| !support.has_edge(v, v)) {
            return Err(WeightError::BadProgram(format!(
                "node {v} has no self-loop"
            )));
        }
        if support
            .nodes()
            .iter()
            .any(|n| !(n.size > 0.0 && n.size.is_finite()))
        {
            return Err(WeightError::BadProgram("sizes must be positive".into()));
        }
        Ok(Self { support, tol })
    }

    pub fn sizes(&self) -> Vec<f64> {
        self.support.nodes().iter().map(|n| n.size).collect()
    }
}

/// Row-stochastic weights aligned with `graph.edges()`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedNetwork {
    pub graph: SparseDigraph,
    pub weights: Vec<f64>,
}

impl WeightedNetwork {
    pub fn new(graph: SparseDigraph, weights: Vec<f64>) -> Self {
        assert_eq!(graph.n_edges(), weights.len(), "one weight per edge");
        Self { graph, weights }
    }

    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.graph
            .edges()
            .binary_search(&(i, j))
            .map(|k| self.weights[k])
            .unwrap_or(0.0)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n_nodes()];
        for (&(i, _), w) in self.graph.edges().iter().zip(&self.weights) {
            s[i] += w;
        }
        s
    }

    /// `(Wᵀm)_j` for the node sizes `m`.
    pub fn inflow(&self) -> Vec<f64> {
        let nodes = self.graph.nodes();
        let mut out = vec![0.0; self.n_nodes()];
        for (&(i, j), w) in self.graph.edges().iter().zip(&self.weights) {
            out[j] += nodes[i].size * w;
        }
        out
    }

    /// `ŝ_ℓ = Σ_i m_i Σ_{j ∈ ℓ} w_ij`.
    pub fn sector_totals(&self) -> Vec<f64> {
        let nodes = self.graph.nodes();
        let mut s = vec![0.0; self.graph.n_sectors()];
        for (j, f) in self.inflow().iter().enumerate() {
            s[nodes[j].sector] += f;
        }
        s
    }

    pub fn self_weights(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n_nodes()];
        for (&(i, j), w) in self.graph.edges().iter().zip(&self.weights) {
            if i == j {
                d[i] = *w;
            }
        }
        d
    }

    /// Left power iteration `ν ← νW` from the uniform vector.
    pub fn stationary(&self, tol: f64, max_iter: usize) -> (Vec<f64>, usize, f64) {
        let n = self.n_nodes();
        let mut nu = vec![1.0 / n as f64; n];
        let mut step = f64::INFINITY;
        for it in 1..=max_iter {
            let mut next = self.left_mul(&nu);
            let s: f64 = next.iter().sum();
            next.iter_mut().for_each(|x| *x /= s);
            step = next.iter().zip(&nu).map(|(a, b)| (a - b).abs()).sum();
            nu = next;
            if step < tol {
                return (nu, it, step);
            }
        }
        (nu, max_iter, step)
    }

    /// `xW`.
    pub fn left_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (&(i, j), w) in self.graph.edges().iter().zip(&self.weights) {
            out[j] += x[i] * w;
        }
        out
    }
}

/// Violations of each constraint family, as excess over the allowed band
/// (nonpositive when satisfied). Firm and sector entries are relative to
/// `m_j` and `s_ℓ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintAudit {
    pub row_sum: f64,
    pub floor: f64,
    pub firm: f64,
    pub sector: f64,
    pub self_mean: f64,
    pub self_square: f64,
}

impl ConstraintAudit {
    pub fn worst(&self) -> (ConstraintFamily, f64) {
        [
            (ConstraintFamily::RowSum, self.row_sum),
            (ConstraintFamily::Floor, self.floor),
            (ConstraintFamily::Firm, self.firm),
            (ConstraintFamily::Sector, self.sector),
            (ConstraintFamily::SelfMean, self.self_mean),
            (ConstraintFamily::SelfSquare, self.self_square),
        ]
        .into_iter()
        .fold((ConstraintFamily::RowSum, f64::NEG_INFINITY), |a, b| {
            if b.1 > a.1 {
                b
            } else {
                a
            }
        })
    }
}

/// Checks a weighted network against tolerances. Row sums count as
/// violations beyond `1e-9`.
pub fn audit_constraints(w: &WeightedNetwork, tol: &Tolerances) -> ConstraintAudit {
    let n = w.n_nodes() as f64;
    let nodes = w.graph.nodes();
    let row_sum = w
        .row_sums()
        .iter()
        .map(|s| (s - 1.0).abs() - 1e-9)
        .fold(f64::NEG_INFINITY, f64::max);
    let floor = w
        .weights
        .iter()
        .map(|x| tol.eps0 - x)
        .fold(f64::NEG_INFINITY, f64::max);
    let firm = w
        .inflow()
        .iter()
        .zip(nodes)
        .map(|(f, node)| (f - node.size).abs() / node.size - tol.delta)
        .fold(f64::NEG_INFINITY, f64::max);
    let s = w.graph.sector_sizes();
    let sector = w
        .sector_totals()
        .iter()
        .zip(&s)
        .filter(|(_, &s)| s > 0.0)
        .map(|(t, s)| (t - s).abs() / s - tol.epsilon)
        .fold(f64::NEG_INFINITY, f64::max);
    let d = w.self_weights();
    let self_mean = d.iter().sum::<f64>() / n - tol.eta1;
    let self_square = d.iter().map(|x| x * x).sum::<f64>() / n - tol.eta2;
    ConstraintAudit {
        row_sum,
        floor,
        firm,
        sector,
        self_mean,
        self_square,
    }
}

/// Violations of necessary conditions found before solving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeIssue {
    pub check: String,
    pub detail: String,
    pub fix: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub passed: bool,
    pub max_out_degree: usize,
    pub issues: Vec<ProbeIssue>,
}

/// Cheap necessary conditions for feasibility.
pub fn feasibility_probe(prog: &WeightProgram) -> ProbeReport {
    let t = &prog.tol;
    let g = &prog.support;
    let (_, outdeg) = g.degrees(true);
    let max_out_degree = outdeg.iter().copied().max().unwrap_or(0);
    let mut issues = Vec::new();
    if t.eps0 * max_out_degree as f64 > 1.0 {
        issues.push(ProbeIssue {
            check: "floor".into(),
            detail: format!(
                "eps0 * max out-degree = {:.4} > 1",
                t.eps0 * max_out_degree as f64
            ),
            fix: format!("set eps0 <= {:.3e}", 1.0 / max_out_degree as f64),
        });
    }
    if t.eta1 < t.eps0 {
        issues.push(ProbeIssue {
            check: "self_mean".into(),
            detail: format!("eta1 = {} is below the floor eps0 = {}", t.eta1, t.eps0),
            fix: format!("set eta1 >= {}", t.eps0),
        });
    }
    if t.eta2 < t.eps0 * t.eps0 {
        issues.push(ProbeIssue {
            check: "self_square".into(),
            detail: format!("eta2 = {} is below eps0^2 = {}", t.eta2, t.eps0 * t.eps0),
            fix: format!("set eta2 >= {}", t.eps0 * t.eps0),
        });
    }
    // firm-level reachability of the band from the in-neighbours
    let nodes = g.nodes();
    let inc = g.in_csr();
    let mut worst_low: Option<(usize, f64)> = None;
    let mut worst_high: Option<(usize, f64)> = None;
    for j in 0..g.n_nodes() {
        let (lo, hi) = inc.neighbors(j).iter().fold((0.0, 0.0), |(lo, hi), &i| {
            (lo + nodes[i].size * t.eps0, hi + nodes[i].size)
        });
        let m = nodes[j].size;
        let need_hi = (1.0 - t.delta) * m / hi;
        let need_lo = lo / ((1.0 + t.delta) * m);
        if need_hi > 1.0 && worst_low.is_none_or(|w| need_hi > w.1) {
            worst_low = Some((j, need_hi));
        }
        if need_lo > 1.0 && worst_high.is_none_or(|w| need_lo > w.1) {
            worst_high = Some((j, need_lo));
        }
    }
    if let Some((j, r)) = worst_low {
        issues.push(ProbeIssue {
            check: "firm_lower".into(),
            detail: format!(
                "node {j}: in-neighbours can supply at most {:.3e} of the required inflow",
                1.0 / r
            ),
            fix: format!(
                "delta >= {:.4} for this node",
                1.0 - 1.0 / r * (1.0 - t.delta)
            ),
        });
    }
    if let Some((j, r)) = worst_high {
        issues.push(ProbeIssue {
            check: "firm_upper".into(),
            detail: format!("node {j}: floor weights alone exceed the upper band by {r:.3e}x"),
            fix: "lower eps0".into(),
        });
    }
    ProbeReport {
        passed: issues.is_empty(),
        max_out_degree,
        issues,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    pub max_iter: usize,
    /// Projected-gradient tolerance on the scaled dual.
    pub pg_tol: f64,
    /// Bands are shrunk by this relative amount internally so that the
    /// returned weights satisfy the requested ones.
    pub tighten: f64,
    /// Starting multipliers; zeros when absent.
    pub dual_start: Option<Vec<f64>>,
    /// On failure, bisect the common band inflation that restores feasibility.
    pub diagnose: bool,
    pub max_inflation: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iter: 20_000,
            pg_tol: 1e-13,
            tighten: 1e-7,
            dual_start: None,
            diagnose: true,
            max_inflation: 64.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    pub iterations: usize,
    pub primal: f64,
    pub dual: f64,
    /// Bound on the Frobenius distance to the optimum, `sqrt(primal - dual)`.
    pub distance_bound: f64,
    pub audit: ConstraintAudit,
    pub dual_dim: usize,
}

/// Multiplier layout: firm upper, firm lower, sector upper, sector lower,
/// self mean, self square.
struct Layout {
    n: usize,
    ns: usize,
}

impl Layout {
    fn dim(&self) -> usize {
        2 * self.n + 2 * self.ns + 2
    }
}

struct Dual<'a> {
    csr: Csr,
    self_pos: Vec<usize>,
    m: Vec<f64>,
    sector: Vec<usize>,
    s: Vec<f64>,
    tol: Tolerances,
    lay: Layout,
    _g: &'a SparseDigraph,
}

/// Exact minimizer of `Σ q_k w_k² + c_k w_k` on `{Σ w = 1, lo ≤ w ≤ 1}`.
pub fn capped_simplex_qp(c: &[f64], q: &[f64], lo: f64, out: &mut [f64]) {
    let d = c.len();
    debug_assert!(d as f64 * lo <= 1.0 + 1e-12);
    if d == 1 {
        out[0] = 1.0;
        return;
    }
    // w_k(τ) = clip((τ - c_k) / 2q_k, lo, 1) is nondecreasing in τ
    let mut bp: Vec<(f64, usize, bool)> = Vec::with_capacity(2 * d);
    for k in 0..d {
        bp.push((c[k] + 2.0 * q[k] * lo, k, true));
        bp.push((c[k] + 2.0 * q[k], k, false));
    }
    bp.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    // at τ below every breakpoint all weights sit at the floor
    let mut fixed = lo * d as f64;
    let (mut slope, mut offset) = (0.0, 0.0);
    let mut tau = bp[0].0;
    let mut done = false;
    for &(t, k, enters) in &bp {
        let val = fixed + slope * t - offset;
        if val >= 1.0 {
            tau = if slope > 0.0 {
                (1.0 - fixed + offset) / slope
            } else {
                t
            };
            done = true;
            break;
        }
        let inv = 1.0 / (2.0 * q[k]);
        if enters {
            fixed -= lo;
            slope += inv;
            offset += c[k] * inv;
        } else {
            fixed += 1.0;
            slope -= inv;
            offset -= c[k] * inv;
        }
    }
    if !done {
        tau = bp[bp.len() - 1].0;
    }
    let mut sum = 0.0;
    for k in 0..d {
        out[k] = ((tau - c[k]) / (2.0 * q[k])).clamp(lo, 1.0);
        sum += out[k];
    }
    // remove rounding drift on a free coordinate, or rescale the excess
    let drift = sum - 1.0;
    if drift != 0.0 {
        if let Some(k) = (0..d)
            .filter(|&k| out[k] > lo && out[k] < 1.0)
            .max_by(|&a, &b| out[a].total_cmp(&out[b]))
        {
            out[k] = (out[k] - drift).clamp(lo, 1.0);
        }
    }
}

impl<'a> Dual<'a> {
    fn new(prog: &'a WeightProgram, tighten: f64) -> Self {
        let g = &prog.support;
        let csr = g.out_csr();
        let n = g.n_nodes();
        let self_pos = (0..n)
            .map(|i| {
                csr.offsets[i]
                    + csr
                        .neighbors(i)
                        .binary_search(&i)
                        .expect("self-loop present")
            })
            .collect();
        let t = prog.tol;
        let tol = Tolerances {
            delta: t.delta * (1.0 - tighten),
            epsilon: t.epsilon * (1.0 - tighten),
            eta1: t.eta1 * (1.0 - tighten),
            eta2: t.eta2 * (1.0 - tighten),
            eps0: t.eps0,
        };
        Dual {
            csr,
            self_pos,
            m: prog.sizes(),
            sector: g.nodes().iter().map(|x| x.sector).collect(),
            s: g.sector_sizes(),
            tol,
            lay: Layout {
                n,
                ns: g.n_sectors(),
            },
            _g: g,
        }
    }

    /// Primal weights minimizing the Lagrangian at multipliers `y`.
    fn primal(&self, y: &[f64]) -> Vec<f64> {
        let (n, ns) = (self.lay.n, self.lay.ns);
        let beta: Vec<f64> = (0..n).map(|j| (y[j] - y[n + j]) / self.m[j]).collect();
        let sig: Vec<f64> = (0..ns)
            .map(|l| {
                if self.s[l] > 0.0 {
                    (y[2 * n + l] - y[2 * n + ns + l]) / self.s[l]
                } else {
                    0.0
                }
            })
            .collect();
        let (rho1, rho2) = (y[2 * n + 2 * ns], y[2 * n + 2 * ns + 1]);
        let nf = n as f64;
        let rows: Vec<Vec<f64>> = par::map_range(n, |i| {
            let nb = self.csr.neighbors(i);
            let mut c = Vec::with_capacity(nb.len());
            let mut q = Vec::with_capacity(nb.len());
            for &j in nb {
                let mut cj = self.m[i] * (beta[j] + sig[self.sector[j]]);
                let mut qj = 1.0;
                if j == i {
                    cj += rho1 / nf;
                    qj += rho2 / nf;
                }
                c.push(cj);
                q.push(qj);
            }
            let mut w = vec![0.0; nb.len()];
            capped_simplex_qp(&c, &q, self.tol.eps0, &mut w);
            w
        });
        rows.concat()
    }

    /// Negated dual value and gradient at `y`, plus the primal minimizer.
    fn eval(&self, y: &[f64], grad: &mut [f64]) -> (f64, Vec<f64>) {
        let w = self.primal(y);
        let (n, ns) = (self.lay.n, self.lay.ns);
        let nf = n as f64;
        let t = &self.tol;
        let mut inflow = vec![0.0; n];
        let mut energy = 0.0;
        for i in 0..n {
            for (k, &j) in self.csr.neighbors(i).iter().enumerate() {
                let x = w[self.csr.offsets[i] + k];
                inflow[j] += self.m[i] * x;
                energy += x * x;
            }
        }
        let mut sect = vec![0.0; ns];
        for j in 0..n {
            sect[self.sector[j]] += inflow[j];
        }
        let (mut d1, mut d2) = (0.0, 0.0);
        for &p in &self.self_pos {
            d1 += w[p];
            d2 += w[p] * w[p];
        }
        // constraint values a·w - b, each the dual gradient
        let mut lagr = energy;
        for j in 0..n {
            let r = inflow[j] / self.m[j];
            grad[j] = r - (1.0 + t.delta);
            grad[n + j] = (1.0 - t.delta) - r;
        }
        for l in 0..ns {
            if self.s[l] > 0.0 {
                let r = sect[l] / self.s[l];
                grad[2 * n + l] = r - (1.0 + t.epsilon);
                grad[2 * n + ns + l] = (1.0 - t.epsilon) - r;
            } else {
                grad[2 * n + l] = -1.0;
                grad[2 * n + ns + l] = -1.0;
            }
        }
        grad[2 * n + 2 * ns] = d1 / nf - t.eta1;
        grad[2 * n + 2 * ns + 1] = d2 / nf - t.eta2;
        for (yk, gk) in y.iter().zip(grad.iter()) {
            lagr += yk * gk;
        }
        for gk in grad.iter_mut() {
            *gk = -*gk;
        }
        (-lagr, w)
    }
}

/// Solves the weighting program.
pub fn solve_weights(
    prog: &WeightProgram,
    opts: &SolveOptions,
) -> Result<(WeightedNetwork, WeightReport), WeightError> {
    let probe = feasibility_probe(prog);
    if let Some(issue) = probe
        .issues
        .iter()
        .find(|i| matches!(i.check.as_str(), "floor" | "self_mean" | "self_square"))
    {
        return Err(WeightError::BadProgram(format!(
            "{}: {}; {}",
            issue.check, issue.detail, issue.fix
        )));
    }
    match solve_once(prog, opts) {
        Ok(ok) => Ok(ok),
        Err((iterations, audit, certified)) => {
            let (family, violation) = audit.worst();
            if !opts.diagnose {
                return Err(if certified {
                    WeightError::InfeasibleBeyond {
                        family,
                        violation,
                        max_inflation: 1.0,
                    }
                } else {
                    WeightError::NotConverged {
                        iterations,
                        family,
                        violation,
                    }
                });
            }
            match minimal_inflation(prog, opts) {
                Some(inflation) => Err(WeightError::Infeasible {
                    family,
                    violation,
                    inflation,
                }),
                None if certified => Err(WeightError::InfeasibleBeyond {
                    family,
                    violation,
                    max_inflation: opts.max_inflation,
                }),
                None => Err(WeightError::NotConverged {
                    iterations,
                    family,
                    violation,
                }),
            }
        }
    }
}

type Failure = (usize, ConstraintAudit, bool);

struct Iterate {
    x: Vec<f64>,
    iterations: usize,
}

fn solve_once(
    prog: &WeightProgram,
    opts: &SolveOptions,
) -> Result<(WeightedNetwork, WeightReport), Failure> {
    let dual = Dual::new(prog, opts.tighten);
    let dim = dual.lay.dim();
    let y0 = match &opts.dual_start {
        Some(v) if v.len() == dim => v.clone(),
        _ => vec![0.0; dim],
    };
    let lo = vec![0.0; dim];
    let hi = vec![f64::INFINITY; dim];
    let n = prog.support.n_nodes() as f64;
    // weak duality: Σw² ≤ N for any feasible W, so a larger dual certifies infeasibility
    let cap = n + 1.0;
    let mut certified = false;
    let mut y = y0;
    let mut iterations = 0;
    // restarts every CHUNK iterations let a certified infeasibility stop early
    const CHUNK: usize = 500;
    while iterations < opts.max_iter && !certified {
        let lb = LbfgsOptions {
            memory: 20,
            max_iter: CHUNK.min(opts.max_iter - iterations),
            pg_tol: opts.pg_tol,
            f_tol: 0.0,
            stall_iters: 50,
            max_backtracks: 60,
            convex: true,
        };
        let res = minimize_box(
            |y, g| {
                let (v, _) = dual.eval(y, g);
                if -v > cap {
                    certified = true;
                }
                v
            },
            &y,
            &lo,
            &hi,
            &lb,
        );
        iterations += res.iterations;
        y = res.x;
        if res.converged || res.iterations < lb.max_iter {
            break;
        }
    }
    let res = Iterate { x: y, iterations };
    let mut g = vec![0.0; dim];
    let (v, w) = dual.eval(&res.x, &mut g);
    let net = WeightedNetwork::new(prog.support.clone(), w);
    let audit = audit_constraints(&net, &prog.tol);
    if audit.worst().1 > 0.0 {
        return Err((res.iterations, audit, certified || -v > cap));
    }
    let primal: f64 = net.weights.iter().map(|x| x * x).sum();
    let report = WeightReport {
        iterations: res.iterations,
        primal,
        dual: -v,
        distance_bound: (primal + v).abs().sqrt(),
        audit,
        dual_dim: dim,
    };
    Ok((net, report))
}

/// Smallest common band inflation `t ∈ [1, max]`, to 1% and within a
/// reduced iteration budget, under which the program solves, or `None`.
/// The returned value is always one that was solved.
pub fn minimal_inflation(prog: &WeightProgram, opts: &SolveOptions) -> Option<f64> {
    let inner = SolveOptions {
        diagnose: false,
        dual_start: None,
        max_iter: opts.max_iter.min(2000),
        ..opts.clone()
    };
    let ok = |t: f64| {
        let p = WeightProgram {
            support: prog.support.clone(),
            tol: prog.tol.inflated(t),
        };
        solve_once(&p, &inner).is_ok()
    };
    let mut hi = 2.0;
    while !ok(hi) {
        hi *= 2.0;
        if hi > opts.max_inflation {
            return None;
        }
    }
    let mut lo = hi / 2.0;
    if lo < 1.0 {
        lo = 1.0;
    }
    while hi / lo > 1.01 {
        let mid = (lo * hi).sqrt();
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryCheck {
    pub l1_residual: f64,
    pub l1_mu_nu: f64,
    pub gamma: f64,
    /// False when `|λ₂|` is within 1e-8 of one or the estimate did not settle;
    /// `gamma` is then only indicative.
    pub gamma_converged: bool,
    pub bound_delta_over_gamma: f64,
    pub delta: f64,
    pub pass: bool,
    pub nu_iterations: usize,
}

const GAMMA_BLOCK: usize = 50;

/// Largest root modulus of `λ² = aλ + b` fitted by least squares to
/// `u2 ≈ a u1 + b u0`. Captures a dominant complex pair as well as a real
/// eigenvalue.
fn two_step_modulus(u0: &[f64], u1: &[f64], u2: &[f64]) -> f64 {
    let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let (g11, g10, g00) = (d(u1, u1), d(u1, u0), d(u0, u0));
    let (r1, r0) = (d(u2, u1), d(u2, u0));
    let det = g11 * g00 - g10 * g10;
    if det <= 1e-14 * g11 * g00 {
        return (d(u1, u1) / g00).sqrt();
    }
    let a = (r1 * g00 - r0 * g10) / det;
    let b = (g11 * r0 - g10 * r1) / det;
    let disc = a * a + 4.0 * b;
    if disc >= 0.0 {
        let sq = disc.sqrt();
        ((a + sq) / 2.0).abs().max(((a - sq) / 2.0).abs())
    } else {
        (-b).sqrt()
    }
}

/// Estimates `|λ₂(W)|` by power iteration on zero-sum vectors, which the
/// stationary projection leaves invariant. Blocks of 50 iterations are run
/// until successive estimates agree to `tol`; the flag is false when they
/// never do or when `|λ₂|` is within 1e-8 of one.
pub fn second_eigenvalue_modulus(w: &WeightedNetwork, tol: f64, max_blocks: usize) -> (f64, bool) {
    let n = w.n_nodes();
    if n < 2 {
        return (0.0, true);
    }
    // deterministic zero-sum start with all frequencies present
    let mut x: Vec<f64> = (0..n)
        .map(|i| ((i as f64 + 1.0) * 0.754_877_666).fract() - 0.5)
        .collect();
    let center = |x: &mut Vec<f64>| {
        let m = x.iter().sum::<f64>() / n as f64;
        x.iter_mut().for_each(|v| *v -= m);
    };
    let normalize = |x: &mut Vec<f64>| {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            x.iter_mut().for_each(|v| *v /= norm);
        }
        norm
    };
    center(&mut x);
    normalize(&mut x);
    let mut prev = f64::NAN;
    for _ in 0..max_blocks {
        for _ in 0..GAMMA_BLOCK {
            x = w.left_mul(&x);
            center(&mut x);
            if normalize(&mut x) == 0.0 {
                return (0.0, true);
            }
        }
        let mut x1 = w.left_mul(&x);
        center(&mut x1);
        let mut x2 = w.left_mul(&x1);
        center(&mut x2);
        let r = two_step_modulus(&x, &x1, &x2);
        if (r - prev).abs() < tol {
            return (r, r < 1.0 - 1e-8);
        }
        prev = r;
    }
    (prev, false)
}

pub fn stationary_check(w: &WeightedNetwork, delta: f64) -> Result<StationaryCheck, WeightError> {
    let nodes = w.graph.nodes();
    let total: f64 = nodes.iter().map(|x| x.size).sum();
    let mu: Vec<f64> = nodes.iter().map(|x| x.size / total).collect();
    let wm = w.left_mul(&mu);
    let l1_residual: f64 = mu.iter().zip(&wm).map(|(a, b)| (a - b).abs()).sum();
    let (lam2, converged) = second_eigenvalue_modulus(w, 1e-10, 2000);
    let gamma = 1.0 - lam2;
    let max_iter = 2_000_000;
    let (nu, it, step) = w.stationary(1e-12, max_iter);
    if step >= 1e-12 {
        return Err(WeightError::PowerIterationStalled {
            iterations: it,
            step,
            gamma,
        });
    }
    let l1_mu_nu: f64 = mu.iter().zip(&nu).map(|(a, b)| (a - b).abs()).sum();
    let bound = if gamma > 0.0 {
        delta / gamma
    } else {
        f64::INFINITY
    };
    Ok(StationaryCheck {
        l1_residual,
        l1_mu_nu,
        gamma,
        gamma_converged: converged,
        bound_delta_over_gamma: bound,
        delta,
        pass: l1_residual <= delta * (1.0 + 1e-9) && l1_mu_nu <= bound * (1.0 + 1e-6),
        nu_iterations: it,
    })
}
