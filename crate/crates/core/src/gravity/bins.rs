use crate::ingest::FirmPopulation;

/// Firms of each sector sorted by ascending size (ties by firm index).
#[derive(Debug, Clone, PartialEq)]
pub struct SectorIndex {
    pub members: Vec<Vec<usize>>,
}

impl SectorIndex {
    pub fn new(pop: &FirmPopulation) -> Self {
        let mut members = vec![Vec::new(); pop.n_sectors()];
        for (i, f) in pop.firms().iter().enumerate() {
            members[f.sector].push(i);
        }
        let firms = pop.firms();
        for m in &mut members {
            m.sort_by(|&a, &b| firms[a].size.total_cmp(&firms[b].size).then(a.cmp(&b)));
        }
        Self { members }
    }
}

/// One (sector, size bin) cell. `start..end` indexes the sector's sorted
/// member list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bin {
    pub count: usize,
    pub centroid: f64,
    pub min: f64,
    pub max: f64,
    pub start: usize,
    pub end: usize,
}

/// Firms grouped into equal-width bins of `log m` within each sector.
/// Empty bins are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct BinSummary {
    pub index: SectorIndex,
    pub bins: Vec<Vec<Bin>>,
    pub n_bins: usize,
}

impl BinSummary {
    pub fn new(pop: &FirmPopulation, n_bins: usize) -> Self {
        let index = SectorIndex::new(pop);
        Self::from_index(pop, index, n_bins)
    }

    pub fn from_index(pop: &FirmPopulation, index: SectorIndex, n_bins: usize) -> Self {
        let n_bins = n_bins.max(1);
        let firms = pop.firms();
        let bins = index
            .members
            .iter()
            .map(|mem| {
                if mem.is_empty() {
                    return Vec::new();
                }
                let lo = firms[mem[0]].size.ln();
                let hi = firms[*mem.last().unwrap()].size.ln();
                let width = (hi - lo) / n_bins as f64;
                let slot = |m: f64| -> usize {
                    if width <= 0.0 {
                        0
                    } else {
                        (((m.ln() - lo) / width) as usize).min(n_bins - 1)
                    }
                };
                let mut out: Vec<Bin> = Vec::new();
                let mut start = 0;
                while start < mem.len() {
                    let b = slot(firms[mem[start]].size);
                    let mut end = start + 1;
                    while end < mem.len() && slot(firms[mem[end]].size) == b {
                        end += 1;
                    }
                    let sum: f64 = mem[start..end].iter().map(|&i| firms[i].size).sum();
                    let count = end - start;
                    let (min, max) = (firms[mem[start]].size, firms[mem[end - 1]].size);
                    out.push(Bin {
                        count,
                        centroid: (sum / count as f64).clamp(min, max),
                        min,
                        max,
                        start,
                        end,
                    });
                    start = end;
                }
                out
            })
            .collect();
        Self {
            index,
            bins,
            n_bins,
        }
    }

    pub fn total_count(&self) -> usize {
        self.bins.iter().flatten().map(|b| b.count).sum()
    }

    /// `Σ m_i^α` over the members of a bin.
    pub fn power_sum(&self, pop: &FirmPopulation, sector: usize, bin: usize, alpha: f64) -> f64 {
        let b = self.bins[sector][bin];
        self.index.members[sector][b.start..b.end]
            .iter()
            .map(|&i| pop.firms()[i].size.powf(alpha))
            .sum()
    }
}
