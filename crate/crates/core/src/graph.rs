//! Directed firm graph with per-node firm metadata.

use serde::{Deserialize, Serialize};

use crate::ingest::FirmPopulation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeMeta {
    pub firm_id: u64,
    pub sector: usize,
    pub size: f64,
}

/// Where an edge came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Sampled,
    Closure,
    Selfloop,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Sampled => "sampled",
            Provenance::Closure => "closure",
            Provenance::Selfloop => "selfloop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sampled" => Some(Provenance::Sampled),
            "closure" => Some(Provenance::Closure),
            "selfloop" => Some(Provenance::Selfloop),
            _ => None,
        }
    }
}

/// Compressed adjacency: neighbours of `v` are `targets[offsets[v]..offsets[v+1]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Csr {
    pub offsets: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Csr {
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }
}

/// Edges are kept sorted and unique; node indices are positions in `nodes`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDigraph {
    nodes: Vec<NodeMeta>,
    edges: Vec<(usize, usize)>,
    provenance: Vec<Provenance>,
    n_sectors: usize,
}

impl SparseDigraph {
    pub fn new(nodes: Vec<NodeMeta>, n_sectors: usize, edges: Vec<(usize, usize)>) -> Self {
        let prov = vec![Provenance::Sampled; edges.len()];
        Self::with_provenance(nodes, n_sectors, edges, prov)
    }

    /// Sorts and deduplicates; the first provenance seen for a duplicate wins.
    pub fn with_provenance(
        nodes: Vec<NodeMeta>,
        n_sectors: usize,
        edges: Vec<(usize, usize)>,
        provenance: Vec<Provenance>,
    ) -> Self {
        let n = nodes.len();
        assert!(
            edges.iter().all(|&(a, b)| a < n && b < n),
            "edge endpoint out of range"
        );
        let mut tagged: Vec<((usize, usize), usize, Provenance)> = edges
            .into_iter()
            .zip(provenance)
            .enumerate()
            .map(|(i, (e, p))| (e, i, p))
            .collect();
        tagged.sort_unstable_by_key(|t| (t.0, t.1));
        tagged.dedup_by_key(|t| t.0);
        let (edges, provenance) = tagged.into_iter().map(|(e, _, p)| (e, p)).unzip();
        Self {
            nodes,
            edges,
            provenance,
            n_sectors,
        }
    }

    pub fn empty_from(pop: &FirmPopulation) -> Self {
        let nodes = pop
            .firms()
            .iter()
            .map(|f| NodeMeta {
                firm_id: f.id,
                sector: f.sector,
                size: f.size,
            })
            .collect();
        Self::new(nodes, pop.n_sectors(), Vec::new())
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn n_sectors(&self) -> usize {
        self.n_sectors
    }

    pub fn nodes(&self) -> &[NodeMeta] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.binary_search(&(a, b)).is_ok()
    }

    pub fn out_csr(&self) -> Csr {
        let n = self.n_nodes();
        let mut offsets = vec![0usize; n + 1];
        for &(a, _) in &self.edges {
            offsets[a + 1] += 1;
        }
        for v in 0..n {
            offsets[v + 1] += offsets[v];
        }
        // edges are sorted by source, so targets line up with offsets
        let targets = self.edges.iter().map(|&(_, b)| b).collect();
        Csr { offsets, targets }
    }

    pub fn in_csr(&self) -> Csr {
        let n = self.n_nodes();
        let mut offsets = vec![0usize; n + 1];
        for &(_, b) in &self.edges {
            offsets[b + 1] += 1;
        }
        for v in 0..n {
            offsets[v + 1] += offsets[v];
        }
        let mut fill = offsets.clone();
        let mut targets = vec![0usize; self.edges.len()];
        for &(a, b) in &self.edges {
            targets[fill[b]] = a;
            fill[b] += 1;
        }
        Csr { offsets, targets }
    }

    /// `(in, out)` degrees, self-loops counted when `with_self` is set.
    pub fn degrees(&self, with_self: bool) -> (Vec<usize>, Vec<usize>) {
        let n = self.n_nodes();
        let (mut din, mut dout) = (vec![0; n], vec![0; n]);
        for &(a, b) in &self.edges {
            if a != b || with_self {
                dout[a] += 1;
                din[b] += 1;
            }
        }
        (din, dout)
    }

    /// Per-sector sums of node sizes.
    pub fn sector_sizes(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n_sectors];
        for n in &self.nodes {
            s[n.sector] += n.size;
        }
        s
    }

    /// Adds `(i, i)` for every node; idempotent.
    pub fn add_self_loops(&self) -> Self {
        let mut edges = self.edges.clone();
        let mut prov = self.provenance.clone();
        edges.extend((0..self.n_nodes()).map(|i| (i, i)));
        prov.extend(std::iter::repeat_n(Provenance::Selfloop, self.n_nodes()));
        Self::with_provenance(self.nodes.clone(), self.n_sectors, edges, prov)
    }

    /// Adds edges tagged with `prov`.
    pub fn with_added(&self, extra: &[(usize, usize)], prov: Provenance) -> Self {
        let mut edges = self.edges.clone();
        let mut p = self.provenance.clone();
        edges.extend_from_slice(extra);
        p.extend(std::iter::repeat_n(prov, extra.len()));
        Self::with_provenance(self.nodes.clone(), self.n_sectors, edges, p)
    }

    /// Drops the edge `(a, b)` if present.
    pub fn without_edge(&self, a: usize, b: usize) -> Self {
        let mut g = self.clone();
        if let Ok(pos) = g.edges.binary_search(&(a, b)) {
            g.edges.remove(pos);
            g.provenance.remove(pos);
        }
        g
    }

    /// Removes nodes with neither in- nor out-edges and returns the removed
    /// firm ids. Surviving nodes keep their relative order.
    pub fn prune_isolates(&self) -> (Self, Vec<u64>) {
        let n = self.n_nodes();
        let mut touched = vec![false; n];
        for &(a, b) in &self.edges {
            touched[a] = true;
            touched[b] = true;
        }
        let mut remap = vec![usize::MAX; n];
        let mut nodes = Vec::new();
        let mut removed = Vec::new();
        for v in 0..n {
            if touched[v] {
                remap[v] = nodes.len();
                nodes.push(self.nodes[v]);
            } else {
                removed.push(self.nodes[v].firm_id);
            }
        }
        let edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .map(|&(a, b)| (remap[a], remap[b]))
            .collect();
        // relabeling is monotone, so the edge list stays sorted
        let g = Self {
            nodes,
            edges,
            provenance: self.provenance.clone(),
            n_sectors: self.n_sectors,
        };
        (g, removed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nodes(n: usize) -> Vec<NodeMeta> {
        (0..n)
            .map(|i| NodeMeta {
                firm_id: i as u64 * 10,
                sector: 0,
                size: 1.0,
            })
            .collect()
    }

    #[test]
    fn star_with_isolates() {
        let g = SparseDigraph::new(nodes(7), 1, vec![(0, 1), (0, 2), (0, 3)]);
        let (p, removed) = g.prune_isolates();
        assert_eq!(removed, vec![40, 50, 60]);
        assert_eq!(p.n_nodes(), 4);
        assert_eq!(p.edges(), &[(0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn no_isolates_is_identity() {
        let g = SparseDigraph::new(nodes(3), 1, vec![(0, 1), (1, 2), (2, 0)]);
        let (p, removed) = g.prune_isolates();
        assert!(removed.is_empty());
        assert_eq!(p, g);
    }

    #[test]
    fn self_loops_idempotent() {
        let g = SparseDigraph::new(nodes(3), 1, vec![]);
        let once = g.add_self_loops();
        assert_eq!(once.n_edges(), 3);
        assert_eq!(once.add_self_loops(), once);
        let h = SparseDigraph::new(nodes(4), 1, vec![(0, 1), (2, 3)]);
        assert_eq!(h.add_self_loops().n_edges(), h.n_edges() + 4);
    }

    #[test]
    fn duplicates_collapse() {
        let g = SparseDigraph::new(nodes(2), 1, vec![(1, 0), (0, 1), (1, 0)]);
        assert_eq!(g.edges(), &[(0, 1), (1, 0)]);
        let c = g.in_csr();
        assert_eq!(c.neighbors(0), &[1]);
    }
}
