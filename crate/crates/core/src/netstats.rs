//! Directed-network summary statistics and degree CCDFs.
//!
//! Undefined statistics (too few nodes, no edges, zero variance) are `None`.

use serde::{Deserialize, Serialize};

use crate::graph::SparseDigraph;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assortativity {
    pub in_in: Option<f64>,
    pub in_out: Option<f64>,
    pub out_in: Option<f64>,
    pub out_out: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSummary {
    pub nodes: usize,
    /// Edges counted by the statistics, self-loops excluded unless asked for.
    pub edges: usize,
    pub self_loops_included: bool,
    pub density: Option<f64>,
    pub reciprocity: Option<f64>,
    pub clustering: Option<f64>,
    pub assortativity: Assortativity,
}

fn counted_edges(g: &SparseDigraph, with_self: bool) -> Vec<(usize, usize)> {
    g.edges()
        .iter()
        .copied()
        .filter(|(a, b)| with_self || a != b)
        .collect()
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return None;
    }
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Sorted neighbour lists of the undirected simple projection without self-loops.
fn undirected(g: &SparseDigraph) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); g.n_nodes()];
    for &(a, b) in g.edges() {
        if a != b {
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    par::for_each_mut(&mut adj, |_, row| {
        row.sort_unstable();
        row.dedup();
    });
    adj
}

fn intersection_len(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut c) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                c += 1;
                i += 1;
                j += 1;
            }
        }
    }
    c
}

/// Local clustering per node on the undirected projection; degree < 2 gives 0.
pub fn local_clustering(g: &SparseDigraph) -> Vec<f64> {
    let adj = undirected(g);
    par::map_range(adj.len(), |i| {
        let d = adj[i].len();
        if d < 2 {
            return 0.0;
        }
        let twice: usize = adj[i]
            .iter()
            .map(|&j| intersection_len(&adj[i], &adj[j]))
            .sum();
        twice as f64 / (d * (d - 1)) as f64
    })
}

pub fn summarize(g: &SparseDigraph, with_self: bool) -> NetworkSummary {
    let n = g.n_nodes();
    let edges = counted_edges(g, with_self);
    let e = edges.len();
    let density = (n >= 2).then(|| {
        let denom = if with_self {
            (n * n) as f64
        } else {
            (n * (n - 1)) as f64
        };
        e as f64 / denom
    });
    let non_self: Vec<(usize, usize)> = edges.iter().copied().filter(|(a, b)| a != b).collect();
    let reciprocity = (!non_self.is_empty()).then(|| {
        let mutual = non_self
            .iter()
            .filter(|&&(a, b)| non_self.binary_search(&(b, a)).is_ok())
            .count();
        mutual as f64 / non_self.len() as f64
    });
    let clustering = (n >= 1 && !non_self.is_empty())
        .then(|| local_clustering(g).iter().sum::<f64>() / n as f64);
    let (indeg, outdeg) = g.degrees(with_self);
    let pick = |v: &[usize], idx: &dyn Fn(&(usize, usize)) -> usize| -> Vec<f64> {
        edges.iter().map(|e| v[idx(e)] as f64).collect()
    };
    let src = |e: &(usize, usize)| e.0;
    let dst = |e: &(usize, usize)| e.1;
    let (src_in, src_out) = (pick(&indeg, &src), pick(&outdeg, &src));
    let (dst_in, dst_out) = (pick(&indeg, &dst), pick(&outdeg, &dst));
    let assortativity = Assortativity {
        in_in: pearson(&src_in, &dst_in),
        in_out: pearson(&src_in, &dst_out),
        out_in: pearson(&src_out, &dst_in),
        out_out: pearson(&src_out, &dst_out),
    };
    NetworkSummary {
        nodes: n,
        edges: e,
        self_loops_included: with_self,
        density,
        reciprocity,
        clustering,
        assortativity,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegreeKind {
    In,
    Out,
    Total,
}

impl std::str::FromStr for DegreeKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "in" => Ok(DegreeKind::In),
            "out" => Ok(DegreeKind::Out),
            "total" => Ok(DegreeKind::Total),
            other => Err(format!("unknown degree kind {other:?}")),
        }
    }
}

pub fn degree_sequence(g: &SparseDigraph, which: DegreeKind, with_self: bool) -> Vec<usize> {
    let (indeg, outdeg) = g.degrees(with_self);
    match which {
        DegreeKind::In => indeg,
        DegreeKind::Out => outdeg,
        DegreeKind::Total => indeg.iter().zip(&outdeg).map(|(a, b)| a + b).collect(),
    }
}

/// `(d, P(D >= d))` at every distinct degree, ascending.
pub fn ccdf_of(degrees: &[usize]) -> Vec<(usize, f64)> {
    let mut d = degrees.to_vec();
    d.sort_unstable();
    let n = d.len() as f64;
    let mut out = Vec::new();
    let mut i = 0;
    while i < d.len() {
        out.push((d[i], (d.len() - i) as f64 / n));
        let v = d[i];
        while i < d.len() && d[i] == v {
            i += 1;
        }
    }
    out
}

pub fn degree_ccdf(g: &SparseDigraph, which: DegreeKind, with_self: bool) -> Vec<(usize, f64)> {
    ccdf_of(&degree_sequence(g, which, with_self))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
    pub d_min: usize,
    pub d_max: usize,
    /// `log10(d_max / d_min)`.
    pub decades: f64,
}

/// Least-squares line through `(ln d, ln P)` for `lo <= d <= hi`, `d > 0`.
pub fn loglog_fit(ccdf: &[(usize, f64)], lo: usize, hi: usize) -> Option<LogLogFit> {
    let pts: Vec<(usize, f64)> = ccdf
        .iter()
        .copied()
        .filter(|&(d, p)| d > 0 && d >= lo && d <= hi && p > 0.0)
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let xs: Vec<f64> = pts.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let (d_min, d_max) = (pts[0].0, pts[pts.len() - 1].0);
    Some(LogLogFit {
        slope,
        intercept: my - slope * mx,
        r_squared: sxy * sxy / (sxx * syy),
        points: pts.len(),
        d_min,
        d_max,
        decades: (d_max as f64 / d_min as f64).log10(),
    })
}
