//! Geographic expansion of a weighted firm network into factories.
//!
//! Each firm edge is one unit of capacity. Allocation for a firm only ever
//! touches that firm's own outgoing pairs, so firms are processed
//! independently, each on its own random stream.

use std::collections::HashMap;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::ingest::{Factory, FactoryTable};
use crate::weights::WeightedNetwork;
use crate::{par, rng};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const DEFAULT_TAU_KM: f64 = 500.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FactoryError {
    #[error("firm {0} has no factories")]
    MissingFirm(u64),
    #[error("firm {0} has no factory of another firm to measure prominence against")]
    IsolatedGeometry(u64),
    #[error("capacity bookkeeping broke for firm {firm}: {detail}")]
    CapacityMismatch { firm: u64, detail: String },
    #[error("decay scale must be positive, got {0}")]
    BadTau(f64),
    #[error("need at least two firms")]
    TooFewFirms,
}

/// Great-circle distance in kilometres between `(lat, lon)` points in radians.
pub fn haversine(a: (f64, f64), b: (f64, f64)) -> f64 {
    let s1 = ((a.0 - b.0) / 2.0).sin();
    let s2 = ((a.1 - b.1) / 2.0).sin();
    let h = s1 * s1 + a.0.cos() * b.0.cos() * s2 * s2;
    2.0 * EARTH_RADIUS_KM * h.clamp(0.0, 1.0).sqrt().asin()
}

pub fn kernel(d: f64, tau: f64) -> f64 {
    (-d / tau).exp()
}

fn dist(a: &Factory, b: &Factory) -> f64 {
    haversine((a.lat, a.lon), (b.lat, b.lon))
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Factories of the network's firms, grouped by node index.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoryLayout {
    pub factories: Vec<Factory>,
    /// Node index of each factory's firm.
    pub firm_of: Vec<usize>,
    /// Factory indices per node, ascending by factory id.
    pub of_firm: Vec<Vec<usize>>,
    /// Factories whose firm is not in the network.
    pub ignored: usize,
}

impl FactoryLayout {
    pub fn new(w: &WeightedNetwork, table: &FactoryTable) -> Result<Self, FactoryError> {
        let index: HashMap<u64, usize> = w
            .graph
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, n)| (n.firm_id, i))
            .collect();
        let mut factories = Vec::new();
        let mut firm_of = Vec::new();
        let mut of_firm = vec![Vec::new(); w.n_nodes()];
        let mut ignored = 0;
        // table rows are sorted by (firm, factory)
        for f in table.rows() {
            match index.get(&f.firm_id) {
                Some(&i) => {
                    of_firm[i].push(factories.len());
                    firm_of.push(i);
                    factories.push(*f);
                }
                None => ignored += 1,
            }
        }
        if let Some(i) = of_firm.iter().position(|v| v.is_empty()) {
            return Err(FactoryError::MissingFirm(w.graph.nodes()[i].firm_id));
        }
        Ok(Self {
            factories,
            firm_of,
            of_firm,
            ignored,
        })
    }

    pub fn n_factories(&self) -> usize {
        self.factories.len()
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        dist(&self.factories[a], &self.factories[b])
    }
}

/// Prominence ψ per node, aligned with `layout.of_firm`.
pub fn prominence(layout: &FactoryLayout, tau: f64) -> Result<Vec<Vec<f64>>, FactoryError> {
    if !(tau > 0.0) {
        return Err(FactoryError::BadTau(tau));
    }
    let n = layout.of_firm.len();
    if n < 2 {
        return Err(FactoryError::TooFewFirms);
    }
    // log L_i(a), kept in log space so tiny τ cannot underflow to 0/0
    let log_l = par::map_range(layout.n_factories(), |a| {
        let fa = layout.firm_of[a];
        let terms = (0..layout.n_factories())
            .filter(move |&b| layout.firm_of[b] != fa)
            .map(move |b| -layout.distance(a, b) / tau);
        log_sum_exp(terms)
    });
    let mut out = Vec::with_capacity(n);
    for facs in &layout.of_firm {
        let logs: Vec<f64> = facs.iter().map(|&a| log_l[a]).collect();
        let total = log_sum_exp(logs.iter().copied());
        if total == f64::NEG_INFINITY {
            return Err(FactoryError::IsolatedGeometry(
                layout.factories[facs[0]].firm_id,
            ));
        }
        out.push(logs.iter().map(|l| (l - total).exp()).collect());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FactoryEdge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
    /// Index of the firm edge this piece belongs to.
    pub firm_edge: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactoryGraph {
    pub layout: FactoryLayout,
    pub edges: Vec<FactoryEdge>,
    /// Firm self-loop weights, which have no factory counterpart.
    pub self_weights: Vec<f64>,
    pub tau: f64,
}

impl FactoryGraph {
    /// Factory weights summed back onto the firm edge list; self-loops
    /// come from `self_weights`.
    pub fn aggregate(&self, w: &WeightedNetwork) -> Vec<f64> {
        let mut out = vec![0.0; w.graph.n_edges()];
        for e in &self.edges {
            out[e.firm_edge] += e.weight;
        }
        for (k, &(i, j)) in w.graph.edges().iter().enumerate() {
            if i == j {
                out[k] = self.self_weights[i];
            }
        }
        out
    }

    pub fn out_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.layout.n_factories()];
        for e in &self.edges {
            d[e.src] += 1;
        }
        d
    }

    /// Weight-averaged edge length in kilometres.
    pub fn mean_distance(&self) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for e in &self.edges {
            num += e.weight * self.layout.distance(e.src, e.dst);
            den += e.weight;
        }
        num / den
    }
}

/// Draws a destination factory from the live part of row `a` of `Q`.
fn draw_destination(
    layout: &FactoryLayout,
    a: usize,
    live: &[(usize, usize)],
    tau: f64,
    r: &mut impl Rng,
) -> Option<(usize, usize)> {
    let cands: Vec<(usize, usize, f64)> = live
        .iter()
        .flat_map(|&(j, k)| {
            layout.of_firm[j]
                .iter()
                .map(move |&b| (b, k, layout.distance(a, b)))
        })
        .collect();
    let dmin = cands.iter().map(|c| c.2).fold(f64::INFINITY, f64::min);
    // shifting by the row minimum leaves the normalized row unchanged
    let wts: Vec<f64> = cands.iter().map(|c| kernel(c.2 - dmin, tau)).collect();
    let total: f64 = wts.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut u = r.random::<f64>() * total;
    for (c, wt) in cands.iter().zip(&wts) {
        if u < *wt {
            return Some((c.0, c.1));
        }
        u -= wt;
    }
    cands.last().map(|c| (c.0, c.1))
}

fn draw_index(p: &[f64], r: &mut impl Rng) -> usize {
    let mut u = r.random::<f64>();
    for (k, &x) in p.iter().enumerate() {
        if u < x {
            return k;
        }
        u -= x;
    }
    p.len() - 1
}

fn allocate_firm(
    w: &WeightedNetwork,
    layout: &FactoryLayout,
    psi: &[f64],
    i: usize,
    out_edges: &[(usize, usize)],
    tau: f64,
    seed: u64,
) -> Result<Vec<FactoryEdge>, FactoryError> {
    let firm_id = w.graph.nodes()[i].firm_id;
    let mismatch = |detail: &str| FactoryError::CapacityMismatch {
        firm: firm_id,
        detail: detail.into(),
    };
    let mut r = rng::stream(seed, &[rng::tag("factory"), i as u64]);
    // live (destination node, firm edge index) pairs, one slot each
    let mut live: Vec<(usize, usize)> = out_edges.to_vec();
    let facs = &layout.of_firm[i];
    let mut edges = Vec::new();
    if live.is_empty() {
        return Ok(edges);
    }
    if live.len() >= facs.len() {
        for &a in facs {
            let (b, k) = draw_destination(layout, a, &live, tau, &mut r)
                .ok_or_else(|| mismatch("empty row in step 1"))?;
            edges.push(FactoryEdge {
                src: a,
                dst: b,
                weight: w.weights[k],
                firm_edge: k,
            });
            live.retain(|&(_, kk)| kk != k);
        }
    } else {
        // more factories than links: every factory draws from the same rows,
        // and a link drawn several times is shared evenly
        let mut drawn = Vec::with_capacity(facs.len());
        for &a in facs {
            let (b, k) = draw_destination(layout, a, &live, tau, &mut r)
                .ok_or_else(|| mismatch("empty row in step 1"))?;
            drawn.push((a, b, k));
        }
        let mut uses: HashMap<usize, usize> = HashMap::new();
        for &(_, _, k) in &drawn {
            *uses.entry(k).or_default() += 1;
        }
        for &(a, b, k) in &drawn {
            edges.push(FactoryEdge {
                src: a,
                dst: b,
                weight: w.weights[k] / uses[&k] as f64,
                firm_edge: k,
            });
        }
        live.retain(|(_, k)| !uses.contains_key(k));
    }
    while !live.is_empty() {
        let a = facs[draw_index(psi, &mut r)];
        let (b, k) = draw_destination(layout, a, &live, tau, &mut r)
            .ok_or_else(|| mismatch("empty row in step 2"))?;
        edges.push(FactoryEdge {
            src: a,
            dst: b,
            weight: w.weights[k],
            firm_edge: k,
        });
        live.retain(|&(_, kk)| kk != k);
    }
    Ok(edges)
}

pub fn allocate(
    w: &WeightedNetwork,
    table: &FactoryTable,
    tau: f64,
    seed: u64,
) -> Result<FactoryGraph, FactoryError> {
    let layout = FactoryLayout::new(w, table)?;
    let psi = prominence(&layout, tau)?;
    let n = w.n_nodes();
    let mut out_edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (k, &(i, j)) in w.graph.edges().iter().enumerate() {
        if i != j {
            out_edges[i].push((j, k));
        }
    }
    let per_firm = par::map_range(n, |i| {
        allocate_firm(w, &layout, &psi[i], i, &out_edges[i], tau, seed)
    });
    let mut edges = Vec::new();
    for (i, res) in per_firm.into_iter().enumerate() {
        let mut e = res?;
        let assigned: std::collections::BTreeSet<usize> = e.iter().map(|x| x.firm_edge).collect();
        if assigned.len() != out_edges[i].len() {
            return Err(FactoryError::CapacityMismatch {
                firm: w.graph.nodes()[i].firm_id,
                detail: format!("{} of {} links placed", assigned.len(), out_edges[i].len()),
            });
        }
        edges.append(&mut e);
    }
    Ok(FactoryGraph {
        layout,
        edges,
        self_weights: w.self_weights(),
        tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{NodeMeta, SparseDigraph};
    use proptest::prelude::*;

    fn deg(lat: f64, lon: f64) -> (f64, f64) {
        (lat.to_radians(), lon.to_radians())
    }

    fn fac(firm: u64, id: u64, lat: f64, lon: f64) -> Factory {
        Factory {
            firm_id: firm,
            factory_id: id,
            lat: lat.to_radians(),
            lon: lon.to_radians(),
        }
    }

    fn net(n: usize, edges: &[(usize, usize, f64)]) -> WeightedNetwork {
        let nodes = (0..n)
            .map(|i| NodeMeta {
                firm_id: i as u64,
                sector: i % 2,
                size: 1.0,
            })
            .collect();
        let g = SparseDigraph::new(nodes, 2, edges.iter().map(|e| (e.0, e.1)).collect());
        let lookup: HashMap<(usize, usize), f64> =
            edges.iter().map(|e| ((e.0, e.1), e.2)).collect();
        let weights = g.edges().iter().map(|e| lookup[e]).collect();
        WeightedNetwork::new(g, weights)
    }

    #[test]
    fn haversine_reference_values() {
        assert_eq!(haversine(deg(10.0, 20.0), deg(10.0, 20.0)), 0.0);
        let anti = haversine(deg(0.0, 0.0), deg(0.0, 180.0));
        assert!((anti - std::f64::consts::PI * 6371.0).abs() < 1e-9);
        assert!((anti - 20015.09).abs() < 0.01);
        let one = haversine(deg(0.0, 0.0), deg(1.0, 0.0));
        assert!((one - 6371.0 * std::f64::consts::PI / 180.0).abs() < 1e-9);
        assert!((one - 111.19).abs() < 0.01);
    }

    #[test]
    fn kernel_values() {
        assert_eq!(kernel(0.0, 300.0), 1.0);
        assert!((kernel(300.0, 300.0) - (-1f64).exp()).abs() < 1e-15);
        assert!(kernel(1000.0, 1e12) > 1.0 - 1e-8);
    }

    #[test]
    fn prominence_matches_double_sum() {
        // three firms spread along the equator
        let w = net(3, &[(0, 1, 1.0), (1, 2, 1.0), (2, 0, 1.0)]);
        let rows = vec![
            fac(0, 0, 0.0, 0.0),
            fac(0, 1, 0.0, 3.0),
            fac(1, 2, 0.0, 1.0),
            fac(2, 3, 0.0, 5.0),
            fac(2, 4, 0.0, 9.0),
        ];
        let table = FactoryTable::new(rows.clone()).unwrap();
        let tau = 400.0;
        let layout = FactoryLayout::new(&w, &table).unwrap();
        let psi = prominence(&layout, tau).unwrap();
        for firm in 0..3u64 {
            let mine: Vec<&Factory> = rows.iter().filter(|f| f.firm_id == firm).collect();
            let l: Vec<f64> = mine
                .iter()
                .map(|a| {
                    let mut s = 0.0;
                    for b in rows.iter().filter(|b| b.firm_id != firm) {
                        s += (-haversine((a.lat, a.lon), (b.lat, b.lon)) / tau).exp();
                    }
                    s
                })
                .collect();
            let tot: f64 = l.iter().sum();
            for (p, x) in psi[firm as usize].iter().zip(&l) {
                assert!((p - x / tot).abs() < 1e-12);
            }
        }
        assert_eq!(psi[1], vec![1.0]);
    }

    #[test]
    fn symmetric_factories_share_prominence() {
        let w = net(2, &[(0, 1, 1.0), (1, 0, 1.0)]);
        let table = FactoryTable::new(vec![
            fac(0, 0, 1.0, 0.0),
            fac(0, 1, -1.0, 0.0),
            fac(1, 2, 0.0, 0.0),
        ])
        .unwrap();
        let psi = prominence(&FactoryLayout::new(&w, &table).unwrap(), 100.0).unwrap();
        assert!((psi[0][0] - 0.5).abs() < 1e-15 && (psi[0][1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tiny_tau_does_not_underflow() {
        let w = net(2, &[(0, 1, 1.0), (1, 0, 1.0)]);
        let table = FactoryTable::new(vec![
            fac(0, 0, 40.0, 0.0),
            fac(0, 1, -40.0, 0.0),
            fac(1, 2, 41.0, 0.0),
        ])
        .unwrap();
        let psi = prominence(&FactoryLayout::new(&w, &table).unwrap(), 1e-3).unwrap();
        assert!(psi[0][0] > 1.0 - 1e-12);
        let fg = allocate(&w, &table, 1e-3, 0).unwrap();
        assert_eq!(fg.edges.len(), 3);
    }

    #[test]
    fn split_link_when_factories_outnumber_links() {
        let w = net(2, &[(0, 0, 0.4), (0, 1, 0.6), (1, 0, 1.0)]);
        let table = FactoryTable::new(vec![
            fac(0, 0, 0.0, 0.0),
            fac(0, 1, 0.0, 2.0),
            fac(1, 2, 0.0, 1.0),
        ])
        .unwrap();
        let fg = allocate(&w, &table, 500.0, 3).unwrap();
        let from0: Vec<&FactoryEdge> = fg
            .edges
            .iter()
            .filter(|e| fg.layout.firm_of[e.src] == 0)
            .collect();
        assert_eq!(from0.len(), 2);
        assert!(from0.iter().all(|e| (e.weight - 0.3).abs() < 1e-15));
        assert_eq!(fg.self_weights[0], 0.4);
        assert_eq!(fg.out_degrees(), vec![1, 1, 1]);
    }

    #[test]
    fn single_factory_firms_are_isomorphic() {
        let w = net(
            4,
            &[
                (0, 1, 0.5),
                (0, 2, 0.5),
                (1, 2, 1.0),
                (2, 3, 1.0),
                (3, 0, 0.7),
                (3, 3, 0.3),
            ],
        );
        let table =
            FactoryTable::new((0..4).map(|i| fac(i, 10 + i, i as f64, 0.0)).collect()).unwrap();
        let fg = allocate(&w, &table, 200.0, 9).unwrap();
        let mut got: Vec<(usize, usize, f64)> = fg
            .edges
            .iter()
            .map(|e| (fg.layout.firm_of[e.src], fg.layout.firm_of[e.dst], e.weight))
            .collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want: Vec<(usize, usize, f64)> = w
            .graph
            .edges()
            .iter()
            .zip(&w.weights)
            .filter(|(e, _)| e.0 != e.1)
            .map(|(&(i, j), &x)| (i, j, x))
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn missing_firm_is_reported() {
        let w = net(2, &[(0, 1, 1.0), (1, 0, 1.0)]);
        let table = FactoryTable::new(vec![fac(0, 0, 0.0, 0.0), fac(7, 1, 0.0, 0.0)]).unwrap();
        assert_eq!(
            allocate(&w, &table, 100.0, 0).unwrap_err(),
            FactoryError::MissingFirm(1)
        );
    }

    proptest! {
        #[test]
        fn haversine_is_a_symmetric_distance(
            a in (-1.5f64..1.5, -3.1f64..3.1),
            b in (-1.5f64..1.5, -3.1f64..3.1),
        ) {
            let d = haversine(a, b);
            prop_assert!(d >= 0.0);
            prop_assert!((d - haversine(b, a)).abs() < 1e-9);
            prop_assert!(d <= std::f64::consts::PI * EARTH_RADIUS_KM + 1e-9);
        }

        #[test]
        fn kernel_decreases(d in 0.0f64..5000.0, step in 1e-3f64..100.0, tau in 10.0f64..2000.0) {
            let g = kernel(d, tau);
            prop_assert!(g > 0.0 && g <= 1.0);
            prop_assert!(kernel(d + step, tau) < g);
        }
    }
}
