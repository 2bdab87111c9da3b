//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use netrecon::closure::{ClosureHyper, ClosurePlan};
use netrecon::graph::NodeMeta;
use netrecon::ingest::{Factory, FactoryTable, IOTable};
use netrecon::synth::stationary_fixture;
use netrecon::weights::Tolerances;
use netrecon::{SparseDigraph, WeightedNetwork};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense log-barrier solve of the weighting program. Inequalities are
/// `a·x <= b` plus the squared self-weight cap; equalities are row sums.
pub struct DenseOracle {
    lin_a: Vec<DVector<f64>>,
    lin_b: Vec<f64>,
    self_idx: Vec<usize>,
    n: f64,
    eta2: f64,
    eq: DMatrix<f64>,
}

impl DenseOracle {
    pub fn new(w: &WeightedNetwork, tol: &Tolerances) -> Self {
        let g = &w.graph;
        let e = g.n_edges();
        let nodes = g.nodes();
        let n = g.n_nodes();
        let mut lin_a = Vec::new();
        let mut lin_b = Vec::new();
        for k in 0..e {
            let mut a = DVector::zeros(e);
            a[k] = -1.0;
            lin_a.push(a.clone());
            lin_b.push(-tol.eps0);
            a[k] = 1.0;
            lin_a.push(a);
            lin_b.push(1.0);
        }
        for j in 0..n {
            let mut a = DVector::zeros(e);
            for (k, &(i, jj)) in g.edges().iter().enumerate() {
                if jj == j {
                    a[k] = nodes[i].size / nodes[j].size;
                }
            }
            lin_a.push(a.clone());
            lin_b.push(1.0 + tol.delta);
            lin_a.push(-a);
            lin_b.push(-(1.0 - tol.delta));
        }
        let s = g.sector_sizes();
        for (l, &sl) in s.iter().enumerate() {
            let mut a = DVector::zeros(e);
            for (k, &(i, j)) in g.edges().iter().enumerate() {
                if nodes[j].sector == l {
                    a[k] = nodes[i].size / sl;
                }
            }
            lin_a.push(a.clone());
            lin_b.push(1.0 + tol.epsilon);
            lin_a.push(-a);
            lin_b.push(-(1.0 - tol.epsilon));
        }
        let self_idx: Vec<usize> = g
            .edges()
            .iter()
            .enumerate()
            .filter(|(_, (i, j))| i == j)
            .map(|(k, _)| k)
            .collect();
        let mut a = DVector::zeros(e);
        for &k in &self_idx {
            a[k] = 1.0 / n as f64;
        }
        lin_a.push(a);
        lin_b.push(tol.eta1);
        let mut eq = DMatrix::zeros(n, e);
        for (k, &(i, _)) in g.edges().iter().enumerate() {
            eq[(i, k)] = 1.0;
        }
        DenseOracle {
            lin_a,
            lin_b,
            self_idx,
            n: n as f64,
            eta2: tol.eta2,
            eq,
        }
    }

    fn m(&self) -> usize {
        self.lin_a.len() + 1
    }

    fn slacks(&self, x: &DVector<f64>) -> Vec<f64> {
        let mut s: Vec<f64> = self
            .lin_a
            .iter()
            .zip(&self.lin_b)
            .map(|(a, b)| b - a.dot(x))
            .collect();
        s.push(self.eta2 - self.self_idx.iter().map(|&k| x[k] * x[k]).sum::<f64>() / self.n);
        s
    }

    /// Newton centering for `t Σx² - Σ log(slack)` subject to row sums.
    fn center(&self, x: &mut DVector<f64>, t: f64) {
        let e = x.len();
        let r = self.eq.nrows();
        for _ in 0..200 {
            let s = self.slacks(x);
            let mut grad = &*x * (2.0 * t);
            let mut hess = DMatrix::identity(e, e) * (2.0 * t);
            for (a, &sk) in self.lin_a.iter().zip(&s) {
                grad += a / sk;
                hess += (a * a.transpose()) / (sk * sk);
            }
            let sq = s[s.len() - 1];
            let mut gq = DVector::zeros(e);
            for &k in &self.self_idx {
                gq[k] = 2.0 * x[k] / self.n;
            }
            grad += &gq / sq;
            hess += (&gq * gq.transpose()) / (sq * sq);
            for &k in &self.self_idx {
                hess[(k, k)] += 2.0 / self.n / sq;
            }
            let mut kkt = DMatrix::zeros(e + r, e + r);
            kkt.view_mut((0, 0), (e, e)).copy_from(&hess);
            kkt.view_mut((e, 0), (r, e)).copy_from(&self.eq);
            kkt.view_mut((0, e), (e, r)).copy_from(&self.eq.transpose());
            let mut rhs = DVector::zeros(e + r);
            rhs.rows_mut(0, e).copy_from(&(-&grad));
            let sol = kkt.lu().solve(&rhs).expect("nonsingular KKT");
            let dx = sol.rows(0, e).into_owned();
            let decrement = -grad.dot(&dx);
            if decrement / 2.0 < 1e-14 * t.max(1.0) {
                break;
            }
            let phi = |x: &DVector<f64>| -> f64 {
                let s = self.slacks(x);
                if s.iter().any(|&v| v <= 0.0) {
                    return f64::INFINITY;
                }
                t * x.dot(x) - s.iter().map(|v| v.ln()).sum::<f64>()
            };
            let f0 = phi(x);
            let mut step = 1.0;
            loop {
                let xn = &*x + &dx * step;
                if phi(&xn) <= f0 - 0.25 * step * decrement || step < 1e-12 {
                    *x = xn;
                    break;
                }
                step *= 0.5;
            }
        }
    }

    /// Barrier path from a strictly feasible `start` until the duality gap
    /// bound `m / t` is below 1e-15.
    pub fn solve(&self, start: &[f64]) -> Vec<f64> {
        let mut x = DVector::from_vec(start.to_vec());
        assert!(
            self.slacks(&x).iter().all(|&s| s > 0.0),
            "start must be strictly feasible"
        );
        let mut t = 1.0;
        while (self.m() as f64) / t > 1e-15 {
            self.center(&mut x, t);
            t *= 8.0;
        }
        self.center(&mut x, t);
        x.as_slice().to_vec()
    }
}

pub fn frobenius(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// 20 firms with 1 to 5 factories each, 60 in total, scattered over a
/// continental-sized box.
pub fn factory_fixture(seed: u64) -> (WeightedNetwork, FactoryTable) {
    let w = stationary_fixture(20, 3, 3, 0.05, seed);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut id = 0;
    for firm in 0..20u64 {
        for _ in 0..1 + firm % 5 {
            let lat: f64 = r.random_range(25.0..49.0);
            let lon: f64 = r.random_range(-124.0..-67.0);
            rows.push(Factory {
                firm_id: firm,
                factory_id: id,
                lat: lat.to_radians(),
                lon: lon.to_radians(),
            });
            id += 1;
        }
    }
    assert_eq!(rows.len(), 60);
    (w, FactoryTable::new(rows).unwrap())
}

/// One factory per firm at random coordinates.
pub fn single_factory_table(n_firms: u64, seed: u64) -> FactoryTable {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let rows = (0..n_firms)
        .map(|f| {
            let lat: f64 = r.random_range(25.0..49.0);
            let lon: f64 = r.random_range(-124.0..-67.0);
            Factory {
                firm_id: f,
                factory_id: 1000 + f,
                lat: lat.to_radians(),
                lon: lon.to_radians(),
            }
        })
        .collect();
    FactoryTable::new(rows).unwrap()
}

/// A digraph with exactly `n_comp` strongly connected components: each is
/// a cycle (or a single node) of 1 to `max_size` nodes, and extra arcs only
/// run from lower to higher component index.
pub fn scc_fixture(
    n_comp: usize,
    max_size: usize,
    n_sectors: usize,
    seed: u64,
) -> (SparseDigraph, IOTable) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut comps: Vec<Vec<usize>> = Vec::new();
    let mut next = 0;
    for _ in 0..n_comp {
        let s = r.random_range(1..=max_size);
        comps.push((next..next + s).collect());
        next += s;
    }
    let n = next;
    let mut edges = Vec::new();
    for c in &comps {
        if c.len() > 1 {
            for t in 0..c.len() {
                edges.push((c[t], c[(t + 1) % c.len()]));
            }
            if c.len() > 2 && r.random::<f64>() < 0.5 {
                edges.push((c[0], c[2]));
            }
        }
    }
    let p = (2.0 / n_comp as f64).min(0.5);
    for a in 0..n_comp {
        for b in a + 1..n_comp {
            if r.random::<f64>() < p {
                let u = comps[a][r.random_range(0..comps[a].len())];
                let v = comps[b][r.random_range(0..comps[b].len())];
                edges.push((u, v));
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();
    let nodes = (0..n)
        .map(|i| NodeMeta {
            firm_id: i as u64,
            sector: r.random_range(0..n_sectors),
            size: r.random_range(0.05..1.0),
        })
        .collect();
    let flows = (0..n_sectors)
        .map(|_| (0..n_sectors).map(|_| r.random_range(1.0..10.0)).collect())
        .collect();
    let io = IOTable::new((0..n_sectors).map(|s| format!("S{s}")).collect(), flows).unwrap();
    (SparseDigraph::new(nodes, n_sectors, edges), io)
}

/// Hyperparameters whose candidate sets exceed `k`, so the closure program
/// has real choices. Under the defaults `f(n) >= g(n)` and every candidate
/// is forced.
pub fn wide_hyper() -> ClosureHyper {
    ClosureHyper {
        theta: 0.2,
        eta: 0.1,
        gamma_bar: 0.9,
        n0: 2.0,
        eta_g: 1.0,
    }
}

/// Nodes reachable from `start`, forward or along reversed arcs.
pub fn reachable(g: &SparseDigraph, start: usize, reverse: bool) -> Vec<bool> {
    let n = g.n_nodes();
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in g.edges() {
        if reverse {
            adj[b].push(a);
        } else {
            adj[a].push(b);
        }
    }
    let mut seen = vec![false; n];
    let mut stack = vec![start];
    while let Some(v) = stack.pop() {
        if std::mem::replace(&mut seen[v], true) {
            continue;
        }
        stack.extend(adj[v].iter().copied().filter(|&w| !seen[w]));
    }
    seen
}

/// Strong connectivity by two searches from node 0.
pub fn strongly_connected(g: &SparseDigraph) -> bool {
    g.n_nodes() == 0
        || (reachable(g, 0, false).iter().all(|&x| x) && reachable(g, 0, true).iter().all(|&x| x))
}

/// Sector inflow loss `Σ_ℓ (E_ℓ + Σ a)^2 / s_ℓ^2` of the backbone `g` plus
/// the `extra` arcs, recomputed from node data.
pub fn closure_loss(g: &SparseDigraph, io: &IOTable, extra: &[(usize, usize)]) -> f64 {
    let nodes = g.nodes();
    let ns = g.n_sectors();
    let mut s = vec![0.0; ns];
    for v in nodes {
        s[v.sector] += v.size;
    }
    let mut inflow = vec![0.0; ns];
    for &(i, j) in g.edges().iter().chain(extra) {
        let (k, l) = (nodes[i].sector, nodes[j].sector);
        inflow[l] += nodes[i].size * io.i(k, l);
    }
    (0..ns)
        .filter(|&l| s[l] > 0.0)
        .map(|l| ((inflow[l] - s[l]) / s[l]).powi(2))
        .sum()
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    if n < k {
        return Vec::new();
    }
    let mut out = combinations(n - 1, k);
    for mut c in combinations(n - 1, k - 1) {
        c.push(n - 1);
        out.push(c);
    }
    out
}

/// Minimum loss over every way to choose `k` candidates in each pair.
pub fn exhaustive_closure(g: &SparseDigraph, io: &IOTable, plan: &ClosurePlan) -> f64 {
    let choices: Vec<Vec<Vec<(usize, usize)>>> = plan
        .pairs
        .iter()
        .map(|p| {
            combinations(p.candidates.len(), p.k)
                .into_iter()
                .map(|c| c.into_iter().map(|t| p.candidates[t]).collect())
                .collect()
        })
        .collect();
    let mut best = f64::INFINITY;
    let mut idx = vec![0; choices.len()];
    loop {
        let extra: Vec<(usize, usize)> = idx
            .iter()
            .zip(&choices)
            .flat_map(|(&t, c)| c[t].clone())
            .collect();
        best = best.min(closure_loss(g, io, &extra));
        let mut q = 0;
        while q < idx.len() {
            idx[q] += 1;
            if idx[q] < choices[q].len() {
                break;
            }
            idx[q] = 0;
            q += 1;
        }
        if q == idx.len() {
            return best;
        }
    }
}

/// Loss of a uniformly random feasible selection from the plan.
pub fn random_closure(g: &SparseDigraph, io: &IOTable, plan: &ClosurePlan, seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let extra: Vec<(usize, usize)> = plan
        .pairs
        .iter()
        .flat_map(|p| {
            rand::seq::index::sample(&mut r, p.candidates.len(), p.k)
                .into_iter()
                .map(|t| p.candidates[t])
                .collect::<Vec<_>>()
        })
        .collect();
    closure_loss(g, io, &extra)
}
