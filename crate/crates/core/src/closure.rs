//! Irreducible closure of a backbone: strongly connected components, a
//! sink-to-source pairing of the condensation, per-pair arc budgets, and a
//! 0-1 quadratic selection that keeps sector inflows close to sector sizes.

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Provenance, SparseDigraph};
use crate::ingest::IOTable;
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClosureError {
    #[error("pair {pair} has {available} candidates but needs {needed}")]
    InsufficientCandidates {
        pair: usize,
        available: usize,
        needed: usize,
    },
    #[error("closed graph still has {0} strongly connected components")]
    NotStronglyConnected(usize),
    #[error("invalid closure hyperparameters: {0}")]
    BadHyper(String),
}

/// Strongly connected components numbered in topological order: every
/// condensation edge goes from a lower to a higher component id.
#[derive(Debug, Clone, PartialEq)]
pub struct Condensation {
    pub scc_of: Vec<usize>,
    pub components: Vec<Vec<usize>>,
    pub dag_edges: Vec<(usize, usize)>,
    pub sources: Vec<usize>,
    pub sinks: Vec<usize>,
}

impl Condensation {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Minimum number of arcs needed to strongly connect the condensation.
    pub fn r(&self) -> usize {
        if self.components.len() <= 1 {
            0
        } else {
            self.sources.len().max(self.sinks.len())
        }
    }
}

/// Iterative Tarjan SCC, linear in nodes plus edges.
pub fn tarjan_scc(g: &SparseDigraph) -> Condensation {
    const UNSEEN: usize = usize::MAX;
    let n = g.n_nodes();
    let adj = g.out_csr();
    let mut index = vec![UNSEEN; n];
    let mut low = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut stack: Vec<usize> = Vec::new();
    let mut emitted: Vec<Vec<usize>> = Vec::new();
    let mut counter = 0;
    let mut call: Vec<(usize, usize)> = Vec::new();
    for root in 0..n {
        if index[root] != UNSEEN {
            continue;
        }
        index[root] = counter;
        low[root] = counter;
        counter += 1;
        stack.push(root);
        on_stack[root] = true;
        call.push((root, 0));
        while let Some(top) = call.last_mut() {
            let v = top.0;
            let nbrs = adj.neighbors(v);
            if top.1 < nbrs.len() {
                let w = nbrs[top.1];
                top.1 += 1;
                if index[w] == UNSEEN {
                    index[w] = counter;
                    low[w] = counter;
                    counter += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                call.pop();
                if let Some(&(u, _)) = call.last() {
                    low[u] = low[u].min(low[v]);
                }
                if low[v] == index[v] {
                    let mut comp = Vec::new();
                    loop {
                        let w = stack.pop().expect("tarjan stack underflow");
                        on_stack[w] = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    comp.sort_unstable();
                    emitted.push(comp);
                }
            }
        }
    }
    // Tarjan emits components in reverse topological order
    emitted.reverse();
    let mut scc_of = vec![0; n];
    for (c, comp) in emitted.iter().enumerate() {
        for &v in comp {
            scc_of[v] = c;
        }
    }
    let mut dag_edges: Vec<(usize, usize)> = g
        .edges()
        .iter()
        .map(|&(a, b)| (scc_of[a], scc_of[b]))
        .filter(|(a, b)| a != b)
        .collect();
    dag_edges.sort_unstable();
    dag_edges.dedup();
    let c = emitted.len();
    let (mut indeg, mut outdeg) = (vec![0; c], vec![0; c]);
    for &(a, b) in &dag_edges {
        outdeg[a] += 1;
        indeg[b] += 1;
    }
    Condensation {
        sources: (0..c).filter(|&x| indeg[x] == 0).collect(),
        sinks: (0..c).filter(|&x| outdeg[x] == 0).collect(),
        scc_of,
        components: emitted,
        dag_edges,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClosureHyper {
    /// Saturation level of `f(n) = θ (1 - e^{-η n})`.
    pub theta: f64,
    pub eta: f64,
    /// Scale of `g(n) = γ̄ (n / (n₀ + n))^{η_g}`.
    pub gamma_bar: f64,
    pub n0: f64,
    pub eta_g: f64,
}

impl Default for ClosureHyper {
    fn default() -> Self {
        Self {
            theta: 0.5,
            eta: 0.05,
            gamma_bar: 0.2,
            n0: 50.0,
            eta_g: 1.0,
        }
    }
}

impl ClosureHyper {
    fn validate(&self) -> Result<(), ClosureError> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(ClosureError::BadHyper(format!(
                "theta must be in (0, 1), got {}",
                self.theta
            )));
        }
        if !(self.eta > 0.0 && self.gamma_bar > 0.0 && self.n0 >= 0.0 && self.eta_g > 0.0) {
            return Err(ClosureError::BadHyper(
                "eta, gamma_bar, eta_g must be positive and n0 nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn f(&self, n: usize) -> f64 {
        self.theta * (1.0 - (-self.eta * n as f64).exp())
    }

    pub fn g(&self, n: usize) -> f64 {
        let n = n as f64;
        self.gamma_bar * (n / (self.n0 + n)).powf(self.eta_g)
    }

    /// Arcs to add between a pair of components with `n = min` size.
    pub fn k(&self, n: usize) -> usize {
        ceil_tol(self.f(n) * n as f64).clamp(1, n.max(1))
    }

    /// Candidate-set size before capping by the number of absent pairs.
    pub fn l(&self, n: usize) -> usize {
        self.k(n).max(ceil_tol(self.g(n) * n as f64))
    }
}

/// Ceiling that ignores round-off just above an integer.
fn ceil_tol(x: f64) -> usize {
    (x - 1e-9 * x.abs().max(1.0)).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPlan {
    /// Sink component the arcs leave from.
    pub from: usize,
    /// Source component the arcs enter.
    pub to: usize,
    pub n: usize,
    pub k: usize,
    pub candidates: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosurePlan {
    pub pairs: Vec<PairPlan>,
    pub r: usize,
}

/// Eswaran-Tarjan style pairing with exactly `R` pairs. Sources are matched
/// to distinct reachable sinks and the matched pairs are chained cyclically;
/// unmatched sinks and sources are paired with each other in id order and
/// any surplus is attached round-robin to the cycle.
pub fn pairing(cond: &Condensation) -> Vec<(usize, usize)> {
    let c = cond.n_components();
    if c <= 1 {
        return Vec::new();
    }
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); c];
    for &(a, b) in &cond.dag_edges {
        succ[a].push(b);
    }
    let mut is_sink = vec![false; c];
    for &s in &cond.sinks {
        is_sink[s] = true;
    }
    // every sink a search visits ends up matched, so a failed search leaves
    // its source reaching a matched sink
    let mut visited = vec![false; c];
    let mut taken = vec![false; c];
    let mut matched: Vec<(usize, usize)> = Vec::new();
    let mut free_sources = Vec::new();
    for &t in &cond.sources {
        let mut found = None;
        let mut stack = vec![t];
        while let Some(v) = stack.pop() {
            if visited[v] {
                continue;
            }
            visited[v] = true;
            if is_sink[v] && !taken[v] {
                found = Some(v);
                break;
            }
            stack.extend(succ[v].iter().rev().filter(|&&w| !visited[w]));
        }
        match found {
            Some(u) => {
                taken[u] = true;
                matched.push((t, u));
            }
            None => free_sources.push(t),
        }
    }
    let free_sinks: Vec<usize> = cond.sinks.iter().copied().filter(|&u| !taken[u]).collect();
    let p = matched.len();
    let mut pairs: Vec<(usize, usize)> = (0..p)
        .map(|j| (matched[j].1, matched[(j + 1) % p].0))
        .collect();
    let both = free_sinks.len().min(free_sources.len());
    pairs.extend((0..both).map(|k| (free_sinks[k], free_sources[k])));
    pairs.extend(
        free_sinks[both..]
            .iter()
            .enumerate()
            .map(|(k, &u)| (u, matched[k % p].0)),
    );
    pairs.extend(
        free_sources[both..]
            .iter()
            .enumerate()
            .map(|(k, &t)| (matched[k % p].1, t)),
    );
    pairs
}

pub fn build_plan(
    cond: &Condensation,
    hyper: &ClosureHyper,
    seed: u64,
) -> Result<ClosurePlan, ClosureError> {
    hyper.validate()?;
    let pairs = pairing(cond)
        .into_iter()
        .enumerate()
        .map(|(q, (a, b))| {
            let (va, vb) = (&cond.components[a], &cond.components[b]);
            let n = va.len().min(vb.len());
            let k = hyper.k(n);
            // a sink has no outgoing arcs, so every cross pair is absent
            let raw = va.len() * vb.len();
            let l = hyper.l(n).min(raw);
            let mut r = rng::stream(seed, &[rng::tag("closure"), q as u64]);
            let mut candidates: Vec<(usize, usize)> = index::sample(&mut r, raw, l)
                .into_iter()
                .map(|x| (va[x / vb.len()], vb[x % vb.len()]))
                .collect();
            candidates.sort_unstable();
            PairPlan {
                from: a,
                to: b,
                n,
                k,
                candidates,
            }
        })
        .collect();
    Ok(ClosurePlan { pairs, r: cond.r() })
}

/// Sector inflow bookkeeping for the closure objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorInflowState {
    pub baseline: Vec<f64>,
    pub error: Vec<f64>,
    pub sector_sizes: Vec<f64>,
}

impl SectorInflowState {
    pub fn new(g: &SparseDigraph, io: &IOTable) -> Self {
        let nodes = g.nodes();
        let mut baseline = vec![0.0; g.n_sectors()];
        for &(i, j) in g.edges() {
            let (k, l) = (nodes[i].sector, nodes[j].sector);
            baseline[l] += nodes[i].size * io.i(k, l);
        }
        let sector_sizes = g.sector_sizes();
        let error = baseline
            .iter()
            .zip(&sector_sizes)
            .map(|(b, s)| b - s)
            .collect();
        Self {
            baseline,
            error,
            sector_sizes,
        }
    }

    /// `(sector, a_ij)` for candidate arc `(i, j)`.
    pub fn contribution(g: &SparseDigraph, io: &IOTable, i: usize, j: usize) -> (usize, f64) {
        let nodes = g.nodes();
        let (k, l) = (nodes[i].sector, nodes[j].sector);
        (l, nodes[i].size * io.i(k, l))
    }

    /// `Σ_ℓ v_ℓ^2 / s_ℓ^2` over sectors with firms.
    pub fn loss(&self, v: &[f64]) -> f64 {
        v.iter()
            .zip(&self.sector_sizes)
            .filter(|(_, &s)| s > 0.0)
            .map(|(x, s)| x * x / (s * s))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Exact when the total candidate count is at most [`EXACT_LIMIT`].
    Auto,
    Exact,
    Heuristic,
}

pub const EXACT_LIMIT: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosureSolution {
    pub selected: Vec<(usize, usize)>,
    pub objective: f64,
    pub exact: bool,
}

/// A candidate reduced to its sector and contribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Item {
    pub sector: usize,
    pub a: f64,
}

/// Chooses exactly `k_q` items from each group to minimize
/// `Σ_ℓ (e_ℓ + Σ a x)^2 / s_ℓ^2`. Returns chosen positions per group.
pub fn select_items(
    groups: &[(Vec<Item>, usize)],
    e: &[f64],
    s: &[f64],
    exact: bool,
) -> (Vec<Vec<usize>>, f64) {
    let w: Vec<f64> = s
        .iter()
        .map(|&x| if x > 0.0 { 1.0 / (x * x) } else { 0.0 })
        .collect();
    if exact {
        branch_and_bound(groups, e, &w)
    } else {
        greedy_swap(groups, e, &w)
    }
}

fn loss_w(v: &[f64], w: &[f64]) -> f64 {
    v.iter().zip(w).map(|(x, w)| x * x * w).sum()
}

fn branch_and_bound(groups: &[(Vec<Item>, usize)], e: &[f64], w: &[f64]) -> (Vec<Vec<usize>>, f64) {
    struct Search<'a> {
        groups: &'a [(Vec<Item>, usize)],
        w: &'a [f64],
        best: f64,
        best_pick: Vec<Vec<usize>>,
        pick: Vec<Vec<usize>>,
    }
    impl Search<'_> {
        fn bound(&self, v: &[f64]) -> f64 {
            // contributions are nonnegative, so positive errors can only grow
            v.iter()
                .zip(self.w)
                .map(|(x, w)| x.max(0.0).powi(2) * w)
                .sum()
        }
        fn go(&mut self, q: usize, t: usize, v: &mut Vec<f64>) {
            if q == self.groups.len() {
                let val = loss_w(v, self.w);
                if val < self.best {
                    self.best = val;
                    self.best_pick = self.pick.clone();
                }
                return;
            }
            let (items, k) = &self.groups[q];
            let have = self.pick[q].len();
            if have == *k {
                self.go(q + 1, 0, v);
                return;
            }
            if items.len() - t < k - have || self.bound(v) >= self.best {
                return;
            }
            let it = items[t];
            v[it.sector] += it.a;
            self.pick[q].push(t);
            self.go(q, t + 1, v);
            self.pick[q].pop();
            v[it.sector] -= it.a;
            self.go(q, t + 1, v);
        }
    }
    let mut s = Search {
        groups,
        w,
        best: f64::INFINITY,
        best_pick: Vec::new(),
        pick: vec![Vec::new(); groups.len()],
    };
    let mut v = e.to_vec();
    s.go(0, 0, &mut v);
    let best = s.best;
    (s.best_pick, best)
}

fn greedy_swap(groups: &[(Vec<Item>, usize)], e: &[f64], w: &[f64]) -> (Vec<Vec<usize>>, f64) {
    let mut v = e.to_vec();
    let mut sel: Vec<Vec<bool>> = groups
        .iter()
        .map(|(items, _)| vec![false; items.len()])
        .collect();
    let delta_add = |v: &[f64], it: &Item| (2.0 * v[it.sector] + it.a) * it.a * w[it.sector];
    for (q, (items, k)) in groups.iter().enumerate() {
        for _ in 0..*k {
            let best = (0..items.len()).filter(|&t| !sel[q][t]).min_by(|&x, &y| {
                delta_add(&v, &items[x])
                    .total_cmp(&delta_add(&v, &items[y]))
                    .then(x.cmp(&y))
            });
            if let Some(t) = best {
                sel[q][t] = true;
                v[items[t].sector] += items[t].a;
            }
        }
    }
    loop {
        let current = loss_w(&v, w);
        let mut improved = false;
        for (q, (items, _)) in groups.iter().enumerate() {
            let mut best: Option<(f64, usize, usize)> = None;
            for out in (0..items.len()).filter(|&t| sel[q][t]) {
                for inn in (0..items.len()).filter(|&t| !sel[q][t]) {
                    let (o, i) = (items[out], items[inn]);
                    let d = if o.sector == i.sector {
                        let x = v[o.sector];
                        ((x - o.a + i.a).powi(2) - x * x) * w[o.sector]
                    } else {
                        let (x1, x2) = (v[o.sector], v[i.sector]);
                        ((x1 - o.a).powi(2) - x1 * x1) * w[o.sector]
                            + ((x2 + i.a).powi(2) - x2 * x2) * w[i.sector]
                    };
                    if best.is_none_or(|b| d < b.0) {
                        best = Some((d, out, inn));
                    }
                }
            }
            if let Some((d, out, inn)) = best {
                if d < -1e-12 * current.max(1e-300) {
                    sel[q][out] = false;
                    sel[q][inn] = true;
                    v[items[out].sector] -= items[out].a;
                    v[items[inn].sector] += items[inn].a;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    let picks = sel
        .iter()
        .map(|s| (0..s.len()).filter(|&t| s[t]).collect())
        .collect();
    (picks, loss_w(&v, w))
}

pub fn solve_closure(
    plan: &ClosurePlan,
    state: &SectorInflowState,
    g: &SparseDigraph,
    io: &IOTable,
    strategy: Strategy,
) -> Result<ClosureSolution, ClosureError> {
    for (q, p) in plan.pairs.iter().enumerate() {
        if p.candidates.len() < p.k {
            return Err(ClosureError::InsufficientCandidates {
                pair: q,
                available: p.candidates.len(),
                needed: p.k,
            });
        }
    }
    let groups: Vec<(Vec<Item>, usize)> = plan
        .pairs
        .iter()
        .map(|p| {
            let items = p
                .candidates
                .iter()
                .map(|&(i, j)| {
                    let (sector, a) = SectorInflowState::contribution(g, io, i, j);
                    Item { sector, a }
                })
                .collect();
            (items, p.k)
        })
        .collect();
    let total: usize = groups.iter().map(|g| g.0.len()).sum();
    let exact = match strategy {
        Strategy::Auto => total <= EXACT_LIMIT,
        Strategy::Exact => true,
        Strategy::Heuristic => false,
    };
    let (picks, objective) = select_items(&groups, &state.error, &state.sector_sizes, exact);
    let mut selected: Vec<(usize, usize)> = plan
        .pairs
        .iter()
        .zip(&picks)
        .flat_map(|(p, pick)| pick.iter().map(move |&t| p.candidates[t]))
        .collect();
    selected.sort_unstable();
    Ok(ClosureSolution {
        selected,
        objective,
        exact,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub from: usize,
    pub to: usize,
    pub n: usize,
    pub k: usize,
    pub candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosureReport {
    pub components_before: usize,
    pub components_after: usize,
    pub sources: usize,
    pub sinks: usize,
    pub r: usize,
    pub k_total: usize,
    pub pairs: Vec<PairSummary>,
    /// Loss of the backbone alone, `Σ E_ℓ^2 / s_ℓ^2`.
    pub objective_before: f64,
    pub objective_after: f64,
    pub exact: bool,
}

/// Closes `g` into a strongly connected graph and adds self-loops.
pub fn close(
    g: &SparseDigraph,
    io: &IOTable,
    hyper: &ClosureHyper,
    seed: u64,
    strategy: Strategy,
) -> Result<(SparseDigraph, ClosureReport), ClosureError> {
    let cond = tarjan_scc(g);
    let plan = build_plan(&cond, hyper, seed)?;
    let state = SectorInflowState::new(g, io);
    let sol = solve_closure(&plan, &state, g, io, strategy)?;
    let closed = g.with_added(&sol.selected, Provenance::Closure);
    let after = tarjan_scc(&closed).n_components();
    if after > 1 {
        return Err(ClosureError::NotStronglyConnected(after));
    }
    let report = ClosureReport {
        components_before: cond.n_components(),
        components_after: after,
        sources: cond.sources.len(),
        sinks: cond.sinks.len(),
        r: cond.r(),
        k_total: sol.selected.len(),
        pairs: plan
            .pairs
            .iter()
            .map(|p| PairSummary {
                from: p.from,
                to: p.to,
                n: p.n,
                k: p.k,
                candidates: p.candidates.len(),
            })
            .collect(),
        objective_before: state.loss(&state.error),
        objective_after: sol.objective,
        exact: sol.exact,
    };
    Ok((closed.add_self_loops(), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeMeta;
    use proptest::prelude::*;

    fn graph(n: usize, edges: &[(usize, usize)]) -> SparseDigraph {
        let nodes = (0..n)
            .map(|i| NodeMeta {
                firm_id: i as u64,
                sector: i % 2,
                size: 1.0 / (1 + i) as f64,
            })
            .collect();
        SparseDigraph::new(nodes, 2, edges.to_vec())
    }

    #[test]
    fn two_cycle_is_one_component() {
        let c = tarjan_scc(&graph(2, &[(0, 1), (1, 0)]));
        assert_eq!(c.n_components(), 1);
        assert_eq!(c.r(), 0);
    }

    #[test]
    fn chain_has_one_source_and_sink() {
        let c = tarjan_scc(&graph(3, &[(0, 1), (1, 2)]));
        assert_eq!(c.n_components(), 3);
        assert_eq!(c.sources, vec![c.scc_of[0]]);
        assert_eq!(c.sinks, vec![c.scc_of[2]]);
        assert_eq!(c.r(), 1);
    }

    #[test]
    fn deep_path_does_not_overflow() {
        let n = 200_000;
        let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        assert_eq!(tarjan_scc(&graph(n, &edges)).n_components(), n);
    }

    #[test]
    fn budget_formulas() {
        let h = ClosureHyper {
            theta: 0.5,
            eta: 0.1,
            ..Default::default()
        };
        assert!((h.f(10) - 0.5 * (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert_eq!(h.k(10), 4);
        let h = ClosureHyper {
            gamma_bar: 0.2,
            n0: 50.0,
            eta_g: 1.0,
            ..Default::default()
        };
        assert!((h.g(50) - 0.1).abs() < 1e-15);
        assert_eq!(h.l(50), h.k(50).max(5));
    }

    #[test]
    fn single_component_plan_is_empty() {
        let g = graph(3, &[(0, 1), (1, 2), (2, 0)]);
        let plan = build_plan(&tarjan_scc(&g), &ClosureHyper::default(), 1).unwrap();
        assert!(plan.pairs.is_empty());
    }

    #[test]
    fn picks_smaller_contribution() {
        let groups = vec![(
            vec![Item { sector: 0, a: 0.1 }, Item { sector: 0, a: 0.4 }],
            1,
        )];
        let (pick, obj) = select_items(&groups, &[0.0], &[1.0], true);
        assert_eq!(pick, vec![vec![0]]);
        assert!((obj - 0.01).abs() < 1e-15);
        let (pick, _) = select_items(&groups, &[0.0], &[1.0], false);
        assert_eq!(pick, vec![vec![0]]);
    }

    #[test]
    fn full_candidate_set_is_forced() {
        let groups = vec![(
            vec![
                Item { sector: 0, a: 0.1 },
                Item { sector: 1, a: 0.4 },
                Item { sector: 0, a: 3.0 },
            ],
            3,
        )];
        for exact in [true, false] {
            assert_eq!(
                select_items(&groups, &[0.0, 0.0], &[1.0, 1.0], exact).0,
                vec![vec![0, 1, 2]]
            );
        }
    }

    #[test]
    fn k_is_monotone() {
        let h = ClosureHyper::default();
        for n in 1..2000 {
            assert!(h.k(n + 1) >= h.k(n));
            assert!(h.k(n) <= n && h.l(n) >= h.k(n));
        }
    }

    fn random_digraph(n: usize, p: f64, seed: u64) -> SparseDigraph {
        use rand::Rng;
        let mut r = rng::stream(seed, &[1]);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j && r.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        graph(n, &edges)
    }

    fn reach_matrix(g: &SparseDigraph) -> Vec<Vec<bool>> {
        let n = g.n_nodes();
        let mut r = vec![vec![false; n]; n];
        for (i, row) in r.iter_mut().enumerate() {
            row[i] = true;
        }
        for &(a, b) in g.edges() {
            r[a][b] = true;
        }
        for k in 0..n {
            for i in 0..n {
                if r[i][k] {
                    for j in 0..n {
                        if r[k][j] {
                            r[i][j] = true;
                        }
                    }
                }
            }
        }
        r
    }

    fn brute_force(groups: &[(Vec<Item>, usize)], e: &[f64], s: &[f64]) -> f64 {
        fn rec(groups: &[(Vec<Item>, usize)], q: usize, v: &mut [f64], s: &[f64]) -> f64 {
            if q == groups.len() {
                return v.iter().zip(s).map(|(x, s)| x * x / (s * s)).sum();
            }
            let (items, k) = &groups[q];
            let mut best = f64::INFINITY;
            for mask in 0u32..(1 << items.len()) {
                if mask.count_ones() as usize != *k {
                    continue;
                }
                let mut w = v.to_vec();
                for (t, it) in items.iter().enumerate() {
                    if mask >> t & 1 == 1 {
                        w[it.sector] += it.a;
                    }
                }
                best = best.min(rec(groups, q + 1, &mut w, s));
            }
            best
        }
        rec(groups, 0, &mut e.to_vec(), s)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn closure_strongly_connects(n in 1usize..60, p in 0.0f64..0.08, seed in 0u64..1000) {
            let g = random_digraph(n, p, seed);
            let io = IOTable::new(vec!["a".into(), "b".into()], vec![vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap();
            let cond = tarjan_scc(&g);
            let (closed, rep) = close(&g, &io, &ClosureHyper::default(), seed, super::Strategy::Auto).unwrap();
            prop_assert_eq!(rep.components_after, 1);
            prop_assert!(rep.k_total >= cond.r());
            let plan = build_plan(&cond, &ClosureHyper::default(), seed).unwrap();
            prop_assert_eq!(plan.pairs.len(), cond.r());
            let n_sum: usize = plan.pairs.iter().map(|p| p.n).sum();
            prop_assert!(rep.k_total <= n_sum);
            prop_assert_eq!(closed.edges().iter().filter(|(a, b)| a == b).count(), n);
            for p in &plan.pairs {
                for &(i, j) in &p.candidates {
                    prop_assert!(!g.has_edge(i, j));
                    prop_assert_eq!(cond.scc_of[i], p.from);
                    prop_assert_eq!(cond.scc_of[j], p.to);
                }
            }
        }

        #[test]
        fn scc_matches_transitive_closure(n in 1usize..30, p in 0.0f64..0.2, seed in 0u64..1000) {
            let g = random_digraph(n, p, seed);
            let c = tarjan_scc(&g);
            let r = reach_matrix(&g);
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(c.scc_of[i] == c.scc_of[j], r[i][j] && r[j][i]);
                    if r[i][j] {
                        prop_assert!(c.scc_of[i] <= c.scc_of[j]);
                    }
                }
            }
        }

        #[test]
        fn exact_matches_enumeration(
            raw in proptest::collection::vec((0usize..3, 0.0f64..1.0), 2..12),
            e in proptest::collection::vec(-2.0f64..1.0, 3),
            split in 1usize..11,
        ) {
            let cut = split.min(raw.len() - 1);
            let groups: Vec<(Vec<Item>, usize)> = vec![
                (raw[..cut].iter().map(|&(s, a)| Item { sector: s, a }).collect(), cut.div_ceil(2)),
                (raw[cut..].iter().map(|&(s, a)| Item { sector: s, a }).collect(), 1),
            ];
            let s = [1.0, 0.5, 2.0];
            let (_, obj) = select_items(&groups, &e, &s, true);
            let want = brute_force(&groups, &e, &s);
            prop_assert!((obj - want).abs() <= 1e-12 * want.max(1.0));
        }

        #[test]
        fn heuristic_is_swap_optimal(
            raw in proptest::collection::vec((0usize..3, 0.0f64..1.0), 4..40),
            e in proptest::collection::vec(-2.0f64..1.0, 3),
        ) {
            let half = raw.len() / 2;
            let groups: Vec<(Vec<Item>, usize)> = vec![
                (raw[..half].iter().map(|&(s, a)| Item { sector: s, a }).collect(), half / 2),
                (raw[half..].iter().map(|&(s, a)| Item { sector: s, a }).collect(), 1),
            ];
            let s = [1.0, 0.5, 2.0];
            let (picks, obj) = select_items(&groups, &e, &s, false);
            for (q, (items, k)) in groups.iter().enumerate() {
                prop_assert_eq!(picks[q].len(), *k);
                for &out in &picks[q] {
                    for inn in (0..items.len()).filter(|t| !picks[q].contains(t)) {
                        let mut v = e.clone();
                        for (qq, (it2, _)) in groups.iter().enumerate() {
                            for &t in &picks[qq] {
                                if !(qq == q && t == out) {
                                    v[it2[t].sector] += it2[t].a;
                                }
                            }
                        }
                        v[items[inn].sector] += items[inn].a;
                        let alt: f64 = v.iter().zip(&s).map(|(x, s)| x * x / (s * s)).sum();
                        prop_assert!(alt >= obj - 1e-9 * obj.max(1.0));
                    }
                }
            }
        }
    }
}
