//! Input tables: sector flows, firm-size bins, code concordances and factory
//! locations, plus the cell-wise firm sampler that turns a bin table into a
//! synthetic firm population.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{par, rng};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing input file {0}")]
    MissingInput(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("table is not square: row {row} has {len} entries, expected {expected}")]
    NonSquare {
        row: usize,
        len: usize,
        expected: usize,
    },
    #[error("negative flow {value} at ({row}, {col})")]
    NegativeEntry { row: usize, col: usize, value: f64 },
    #[error("non-numeric or non-finite entry {text:?} at ({row}, {col})")]
    BadNumber {
        row: usize,
        col: usize,
        text: String,
    },
    #[error("flow table has no positive entry")]
    AllZero,
    #[error("empty table")]
    EmptyTable,
    #[error("invalid bin on row {row}: {reason}")]
    InvalidBin { row: usize, reason: String },
    #[error("unknown sector {sector:?} on row {row}")]
    UnknownSector { row: usize, sector: String },
    #[error("source code {0:?} appears more than once")]
    DuplicateCode(String),
    #[error("invalid coordinate on row {row}: {reason}")]
    InvalidCoordinate { row: usize, reason: String },
    #[error("duplicate factory id {0}")]
    DuplicateFactory(u64),
    #[error("retain fraction {0} outside (0, 1]")]
    BadRetainFraction(f64),
    #[error("invalid firm record: {0}")]
    InvalidFirm(String),
}

pub type Result<T> = std::result::Result<T, IngestError>;

fn open_reader(path: &Path, has_headers: bool) -> Result<csv::Reader<std::fs::File>> {
    if !path.exists() {
        return Err(IngestError::MissingInput(path.to_path_buf()));
    }
    csv::ReaderBuilder::new()
        .has_headers(has_headers)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|source| IngestError::Csv {
            path: path.to_path_buf(),
            source,
        })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> IngestError + '_ {
    move |source| IngestError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_f64(text: &str, row: usize, col: usize) -> Result<f64> {
    match text.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(IngestError::BadNumber {
            row,
            col,
            text: text.to_string(),
        }),
    }
}

/// Sector-by-sector flow matrix, buyers in rows, with its max-normalized
/// (`S`) and row-share (`I`) forms.
#[derive(Debug, Clone, PartialEq)]
pub struct IOTable {
    sectors: Vec<String>,
    flows: Vec<f64>,
    max_norm: Vec<f64>,
    row_share: Vec<f64>,
}

impl IOTable {
    pub fn new(sectors: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = sectors.len();
        if n == 0 {
            return Err(IngestError::EmptyTable);
        }
        if rows.len() != n {
            return Err(IngestError::NonSquare {
                row: rows.len(),
                len: rows.len(),
                expected: n,
            });
        }
        let mut flows = Vec::with_capacity(n * n);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(IngestError::NonSquare {
                    row: r,
                    len: row.len(),
                    expected: n,
                });
            }
            for (c, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(IngestError::BadNumber {
                        row: r,
                        col: c,
                        text: v.to_string(),
                    });
                }
                if v < 0.0 {
                    return Err(IngestError::NegativeEntry {
                        row: r,
                        col: c,
                        value: v,
                    });
                }
                flows.push(v);
            }
        }
        let max = flows.iter().cloned().fold(0.0f64, f64::max);
        if max <= 0.0 {
            return Err(IngestError::AllZero);
        }
        let max_norm: Vec<f64> = flows
            .iter()
            .map(|&v| if v == max { 1.0 } else { v / max })
            .collect();
        let mut row_share = vec![0.0; n * n];
        for k in 0..n {
            let row = &flows[k * n..(k + 1) * n];
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                for l in 0..n {
                    row_share[k * n + l] = row[l] / total;
                }
            }
        }
        Ok(Self {
            sectors,
            flows,
            max_norm,
            row_share,
        })
    }

    pub fn n_sectors(&self) -> usize {
        self.sectors.len()
    }

    pub fn sectors(&self) -> &[String] {
        &self.sectors
    }

    pub fn sector_index(&self, name: &str) -> Option<usize> {
        self.sectors.iter().position(|s| s == name)
    }

    pub fn flow(&self, k: usize, l: usize) -> f64 {
        self.flows[k * self.n_sectors() + l]
    }

    /// Max-normalized flow `S_kl`.
    pub fn s(&self, k: usize, l: usize) -> f64 {
        self.max_norm[k * self.n_sectors() + l]
    }

    /// Row share `I_kl`: fraction of buyer sector `k`'s spending going to `l`.
    pub fn i(&self, k: usize, l: usize) -> f64 {
        self.row_share[k * self.n_sectors() + l]
    }

    /// Sector pairs with a positive flow, in row-major order.
    pub fn active_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.n_sectors();
        (0..n)
            .flat_map(|k| (0..n).map(move |l| (k, l)))
            .filter(|&(k, l)| self.s(k, l) > 0.0)
            .collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.flows
            .chunks(self.n_sectors())
            .map(|r| r.to_vec())
            .collect()
    }
}

pub fn load_io_table(path: &Path) -> Result<IOTable> {
    let mut rdr = open_reader(path, true)?;
    let sectors: Vec<String> = rdr
        .headers()
        .map_err(csv_err(path))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, t)| parse_f64(t, r, c))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    IOTable::new(sectors, rows)
}

pub fn write_io_table(path: &Path, io: &IOTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(io.sectors()).map_err(csv_err(path))?;
    for row in io.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// One row of a firm-size table before sector codes are resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawBinRow {
    pub code: String,
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub sector: usize,
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: u64,
}

/// Firm counts per (sector, size bin) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FirmSizeBinTable {
    rows: Vec<BinRow>,
    n_sectors: usize,
}

impl FirmSizeBinTable {
    /// Validates and orders rows by (sector, bin_low).
    pub fn new(mut rows: Vec<BinRow>, n_sectors: usize) -> Result<Self> {
        for (r, row) in rows.iter().enumerate() {
            if row.sector >= n_sectors {
                return Err(IngestError::UnknownSector {
                    row: r,
                    sector: row.sector.to_string(),
                });
            }
            if !row.bin_high.is_finite() {
                return Err(IngestError::InvalidBin {
                    row: r,
                    reason: "open-ended bin; the top bin needs a finite upper endpoint".into(),
                });
            }
            if !(row.bin_low >= 0.0 && row.bin_low < row.bin_high) {
                return Err(IngestError::InvalidBin {
                    row: r,
                    reason: format!(
                        "need 0 <= bin_low < bin_high, got [{}, {}]",
                        row.bin_low, row.bin_high
                    ),
                });
            }
        }
        rows.sort_by(|a, b| {
            a.sector
                .cmp(&b.sector)
                .then(a.bin_low.total_cmp(&b.bin_low))
        });
        for (r, pair) in rows.windows(2).enumerate() {
            if pair[0].sector == pair[1].sector && pair[0].bin_high > pair[1].bin_low {
                return Err(IngestError::InvalidBin {
                    row: r + 1,
                    reason: format!("bins overlap in sector {}", pair[0].sector),
                });
            }
        }
        Ok(Self { rows, n_sectors })
    }

    pub fn rows(&self) -> &[BinRow] {
        &self.rows
    }

    pub fn n_sectors(&self) -> usize {
        self.n_sectors
    }

    pub fn total_count(&self) -> u64 {
        self.rows.iter().map(|r| r.count).sum()
    }
}

pub fn load_raw_bins(path: &Path) -> Result<Vec<RawBinRow>> {
    let mut rdr = open_reader(path, true)?;
    let headers = rdr.headers().map_err(csv_err(path))?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::InvalidBin {
                row: 0,
                reason: format!("missing column {name}"),
            })
    };
    let (cs, cl, ch, cc) = (
        col("sector")?,
        col("bin_low")?,
        col("bin_high")?,
        col("count")?,
    );
    let mut out = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let get = |c: usize| rec.get(c).unwrap_or("");
        let high_text = get(ch);
        if high_text.is_empty() || high_text.eq_ignore_ascii_case("inf") {
            return Err(IngestError::InvalidBin {
                row: r,
                reason: "open-ended bin; the top bin needs a finite upper endpoint".into(),
            });
        }
        let count = get(cc)
            .parse::<u64>()
            .map_err(|_| IngestError::InvalidBin {
                row: r,
                reason: format!("count {:?} is not a nonnegative integer", get(cc)),
            })?;
        out.push(RawBinRow {
            code: get(cs).to_string(),
            bin_low: parse_f64(get(cl), r, cl)?,
            bin_high: parse_f64(high_text, r, ch)?,
            count,
        });
    }
    if out.is_empty() {
        return Err(IngestError::EmptyTable);
    }
    Ok(out)
}

/// Resolves raw codes directly against the IO table's sector ids.
pub fn resolve_bins(raw: &[RawBinRow], io: &IOTable) -> Result<FirmSizeBinTable> {
    let rows = raw
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let sector = io
                .sector_index(&row.code)
                .ok_or_else(|| IngestError::UnknownSector {
                    row: r,
                    sector: row.code.clone(),
                })?;
            Ok(BinRow {
                sector,
                bin_low: row.bin_low,
                bin_high: row.bin_high,
                count: row.count,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FirmSizeBinTable::new(rows, io.n_sectors())
}

pub fn load_firm_bins(path: &Path, io: &IOTable) -> Result<FirmSizeBinTable> {
    resolve_bins(&load_raw_bins(path)?, io)
}

/// Source-code to sector mapping; `None` targets are dropped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Concordance {
    map: BTreeMap<String, Option<usize>>,
}

impl Concordance {
    pub fn new(pairs: Vec<(String, Option<usize>)>, n_sectors: usize) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (r, (code, target)) in pairs.into_iter().enumerate() {
            if let Some(t) = target {
                if t >= n_sectors {
                    return Err(IngestError::UnknownSector {
                        row: r,
                        sector: t.to_string(),
                    });
                }
            }
            if map.insert(code.clone(), target).is_some() {
                return Err(IngestError::DuplicateCode(code));
            }
        }
        Ok(Self { map })
    }

    pub fn lookup(&self, code: &str) -> Option<usize> {
        self.map.get(code).copied().flatten()
    }

    pub fn identity(io: &IOTable) -> Self {
        Self {
            map: io
                .sectors()
                .iter()
                .enumerate()
                .map(|(i, s)| (s.clone(), Some(i)))
                .collect(),
        }
    }
}

pub fn load_concordance(path: &Path, io: &IOTable) -> Result<Concordance> {
    let mut rdr = open_reader(path, true)?;
    let mut pairs = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let code = rec.get(0).unwrap_or("").to_string();
        let target = rec.get(1).unwrap_or("");
        let target = if target.is_empty() {
            None
        } else {
            Some(
                io.sector_index(target)
                    .ok_or_else(|| IngestError::UnknownSector {
                        row: r,
                        sector: target.to_string(),
                    })?,
            )
        };
        pairs.push((code, target));
    }
    Concordance::new(pairs, io.n_sectors())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcordanceReport {
    pub kept_firms: u64,
    pub dropped_firms: u64,
    pub dropped_rows: usize,
}

impl ConcordanceReport {
    pub fn retained_fraction(&self) -> f64 {
        let total = self.kept_firms + self.dropped_firms;
        if total == 0 {
            0.0
        } else {
            self.kept_firms as f64 / total as f64
        }
    }
}

/// Maps raw firm records (one row per cell, or one per firm with count 1)
/// onto sectors, dropping anything without a clear target.
pub fn apply_concordance(
    raw: &[RawBinRow],
    conc: &Concordance,
    n_sectors: usize,
) -> Result<(FirmSizeBinTable, ConcordanceReport)> {
    let mut report = ConcordanceReport {
        kept_firms: 0,
        dropped_firms: 0,
        dropped_rows: 0,
    };
    let mut merged: BTreeMap<(usize, u64, u64), BinRow> = BTreeMap::new();
    for row in raw {
        match conc.lookup(&row.code) {
            Some(sector) => {
                report.kept_firms += row.count;
                // several source codes can land in the same target cell
                let key = (sector, row.bin_low.to_bits(), row.bin_high.to_bits());
                merged
                    .entry(key)
                    .and_modify(|b| b.count += row.count)
                    .or_insert(BinRow {
                        sector,
                        bin_low: row.bin_low,
                        bin_high: row.bin_high,
                        count: row.count,
                    });
            }
            None => {
                report.dropped_firms += row.count;
                report.dropped_rows += 1;
            }
        }
    }
    let table = FirmSizeBinTable::new(merged.into_values().collect(), n_sectors)?;
    Ok((table, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Firm {
    pub id: u64,
    pub sector: usize,
    /// Size relative to the largest firm, in (0, 1].
    pub size: f64,
}

/// Sampled firms with sector labels and normalized sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct FirmPopulation {
    firms: Vec<Firm>,
    sector_sizes: Vec<f64>,
    n_sectors: usize,
}

impl FirmPopulation {
    /// Builds a population from already-normalized firms.
    pub fn new(firms: Vec<Firm>, n_sectors: usize) -> Result<Self> {
        if firms.is_empty() {
            return Err(IngestError::EmptyTable);
        }
        let mut seen = HashSet::with_capacity(firms.len());
        for f in &firms {
            if f.sector >= n_sectors {
                return Err(IngestError::InvalidFirm(format!(
                    "firm {} has sector {}",
                    f.id, f.sector
                )));
            }
            if !(f.size > 0.0 && f.size <= 1.0) {
                return Err(IngestError::InvalidFirm(format!(
                    "firm {} has size {}",
                    f.id, f.size
                )));
            }
            if !seen.insert(f.id) {
                return Err(IngestError::InvalidFirm(format!(
                    "duplicate firm id {}",
                    f.id
                )));
            }
        }
        let sector_sizes = sector_sums(&firms, n_sectors);
        Ok(Self {
            firms,
            sector_sizes,
            n_sectors,
        })
    }

    /// Builds a population from raw (currency) sizes, dividing by the largest.
    pub fn from_raw_sizes(raw: Vec<(u64, usize, f64)>, n_sectors: usize) -> Result<Self> {
        let max = raw.iter().map(|r| r.2).fold(0.0f64, f64::max);
        if !(max > 0.0) {
            return Err(IngestError::EmptyTable);
        }
        let firms = raw
            .into_iter()
            .map(|(id, sector, s)| Firm {
                id,
                sector,
                size: if s == max { 1.0 } else { s / max },
            })
            .collect();
        Self::new(firms, n_sectors)
    }

    pub fn firms(&self) -> &[Firm] {
        &self.firms
    }

    pub fn len(&self) -> usize {
        self.firms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.firms.is_empty()
    }

    pub fn n_sectors(&self) -> usize {
        self.n_sectors
    }

    /// Empirical sector sizes `s_l`.
    pub fn sector_sizes(&self) -> &[f64] {
        &self.sector_sizes
    }

    /// Keeps the firms selected by `keep`, without renormalizing sizes.
    pub fn retain(&self, keep: impl Fn(&Firm) -> bool) -> Result<Self> {
        Self::new(
            self.firms.iter().copied().filter(|f| keep(f)).collect(),
            self.n_sectors,
        )
    }

    /// Keeps the firms at the given positions, in the given order.
    pub fn select(&self, positions: &[usize]) -> Result<Self> {
        Self::new(
            positions.iter().map(|&i| self.firms[i]).collect(),
            self.n_sectors,
        )
    }

    /// Rescales sizes so the largest is exactly one again.
    pub fn renormalized(&self) -> Result<Self> {
        Self::from_raw_sizes(
            self.firms
                .iter()
                .map(|f| (f.id, f.sector, f.size))
                .collect(),
            self.n_sectors,
        )
    }
}

pub fn sector_sums(firms: &[Firm], n_sectors: usize) -> Vec<f64> {
    let mut s = vec![0.0; n_sectors];
    for f in firms {
        s[f.sector] += f.size;
    }
    s
}

pub fn write_firms(path: &Path, pop: &FirmPopulation) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["firm_id", "sector", "size"])
        .map_err(csv_err(path))?;
    for f in pop.firms() {
        w.write_record([f.id.to_string(), f.sector.to_string(), f.size.to_string()])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_firms(path: &Path, n_sectors: usize) -> Result<FirmPopulation> {
    let mut rdr = open_reader(path, true)?;
    let mut firms = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let bad = |c: usize| IngestError::BadNumber {
            row: r,
            col: c,
            text: rec.get(c).unwrap_or("").into(),
        };
        let id = rec
            .get(0)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(0))?;
        let sector = rec
            .get(1)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(1))?;
        let size = parse_f64(rec.get(2).unwrap_or(""), r, 2)?;
        firms.push(Firm { id, sector, size });
    }
    FirmPopulation::new(firms, n_sectors)
}

/// Draws `floor(r c)` firms per cell plus one more with probability
/// `r c - floor(r c)`, sizes uniform on the bin, then normalizes sizes by
/// the largest sampled firm.
///
/// Each cell uses its own random stream keyed by `(seed, sector, bin)`.
pub fn sample_firms(bins: &FirmSizeBinTable, retain: f64, seed: u64) -> Result<FirmPopulation> {
    if !(retain > 0.0 && retain <= 1.0) {
        return Err(IngestError::BadRetainFraction(retain));
    }
    if bins.rows().is_empty() || bins.total_count() == 0 {
        return Err(IngestError::EmptyTable);
    }
    let mut bin_index = Vec::with_capacity(bins.rows().len());
    let mut per_sector: HashMap<usize, u64> = HashMap::new();
    for row in bins.rows() {
        let e = per_sector.entry(row.sector).or_insert(0);
        bin_index.push(*e);
        *e += 1;
    }
    let cells: Vec<Vec<(usize, f64)>> = par::map_range(bins.rows().len(), |c| {
        let row = bins.rows()[c];
        let mut rng = rng::stream(seed, &[rng::tag("firms"), row.sector as u64, bin_index[c]]);
        let n = cell_draw_count(row.count, retain, &mut rng);
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                (
                    row.sector,
                    row.bin_low + (row.bin_high - row.bin_low) * (1.0 - u),
                )
            })
            .collect()
    });
    let raw: Vec<(u64, usize, f64)> = cells
        .into_iter()
        .flatten()
        .enumerate()
        .map(|(id, (sector, size))| (id as u64, sector, size))
        .collect();
    FirmPopulation::from_raw_sizes(raw, bins.n_sectors())
}

/// Number of firms drawn from a cell of `count` firms at retain fraction `r`.
pub fn cell_draw_count(count: u64, retain: f64, rng: &mut impl Rng) -> u64 {
    let target = retain * count as f64;
    let base = target.floor();
    let extra = rng.random::<f64>() < target - base;
    base as u64 + extra as u64
}

/// Factory locations in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Factory {
    pub firm_id: u64,
    pub factory_id: u64,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FactoryTable {
    rows: Vec<Factory>,
}

impl FactoryTable {
    pub fn new(mut rows: Vec<Factory>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (r, f) in rows.iter().enumerate() {
            if !(f.lat.abs() <= std::f64::consts::FRAC_PI_2) {
                return Err(IngestError::InvalidCoordinate {
                    row: r,
                    reason: format!("latitude {} rad", f.lat),
                });
            }
            if !(f.lon.abs() <= std::f64::consts::PI) {
                return Err(IngestError::InvalidCoordinate {
                    row: r,
                    reason: format!("longitude {} rad", f.lon),
                });
            }
            if !seen.insert(f.factory_id) {
                return Err(IngestError::DuplicateFactory(f.factory_id));
            }
        }
        rows.sort_by_key(|f| (f.firm_id, f.factory_id));
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Factory] {
        &self.rows
    }

    /// Factories grouped per firm, ascending by factory id.
    pub fn by_firm(&self) -> BTreeMap<u64, Vec<Factory>> {
        let mut out: BTreeMap<u64, Vec<Factory>> = BTreeMap::new();
        for f in &self.rows {
            out.entry(f.firm_id).or_default().push(*f);
        }
        out
    }
}

pub fn load_factories(path: &Path) -> Result<FactoryTable> {
    let mut rdr = open_reader(path, true)?;
    let mut rows = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let bad = |c: usize| IngestError::BadNumber {
            row: r,
            col: c,
            text: rec.get(c).unwrap_or("").into(),
        };
        let firm_id = rec
            .get(0)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(0))?;
        let factory_id = rec
            .get(1)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(1))?;
        let lat_deg = parse_f64(rec.get(2).unwrap_or(""), r, 2)?;
        let lon_deg = parse_f64(rec.get(3).unwrap_or(""), r, 3)?;
        if lat_deg.abs() > 90.0 || lon_deg.abs() > 180.0 {
            return Err(IngestError::InvalidCoordinate {
                row: r,
                reason: format!("({lat_deg}, {lon_deg}) degrees"),
            });
        }
        rows.push(Factory {
            firm_id,
            factory_id,
            lat: lat_deg.to_radians(),
            lon: lon_deg.to_radians(),
        });
    }
    FactoryTable::new(rows)
}

pub fn write_factories(path: &Path, table: &FactoryTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["firm_id", "factory_id", "lat_deg", "lon_deg"])
        .map_err(csv_err(path))?;
    for f in table.rows() {
        w.write_record([
            f.firm_id.to_string(),
            f.factory_id.to_string(),
            f.lat.to_degrees().to_string(),
            f.lon.to_degrees().to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn io(rows: Vec<Vec<f64>>) -> Result<IOTable> {
        let names = (0..rows.len()).map(|i| format!("s{i}")).collect();
        IOTable::new(names, rows)
    }

    #[test]
    fn single_sector_normalizes_to_one() {
        let t = io(vec![vec![5.0]]).unwrap();
        assert_eq!(t.s(0, 0), 1.0);
        assert_eq!(t.i(0, 0), 1.0);
    }

    #[test]
    fn two_by_two_normalizations() {
        let t = io(vec![vec![4.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(
            [t.s(0, 0), t.s(0, 1), t.s(1, 0), t.s(1, 1)],
            [1.0, 0.5, 0.0, 0.25]
        );
        assert!((t.i(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((t.i(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(t.i(1, 0), 0.0);
        assert_eq!(t.i(1, 1), 1.0);
        assert_eq!(t.active_pairs(), vec![(0, 0), (0, 1), (1, 1)]);
    }

    #[test]
    fn zero_rows_stay_zero() {
        let t = io(vec![vec![0.0, 0.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(t.i(0, 0) + t.i(0, 1), 0.0);
        assert!((t.i(1, 0) + t.i(1, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn io_errors_carry_cell() {
        assert!(matches!(
            io(vec![vec![1.0, 2.0], vec![1.0]]),
            Err(IngestError::NonSquare { row: 1, .. })
        ));
        assert!(matches!(
            io(vec![vec![1.0, -2.0], vec![1.0, 1.0]]),
            Err(IngestError::NegativeEntry { row: 0, col: 1, .. })
        ));
        assert!(matches!(
            io(vec![vec![0.0, 0.0], vec![0.0, 0.0]]),
            Err(IngestError::AllZero)
        ));
    }

    #[test]
    fn open_ended_and_overlapping_bins_rejected() {
        let bad = vec![BinRow {
            sector: 0,
            bin_low: 1.0,
            bin_high: f64::INFINITY,
            count: 3,
        }];
        assert!(matches!(
            FirmSizeBinTable::new(bad, 1),
            Err(IngestError::InvalidBin { .. })
        ));
        let overlap = vec![
            BinRow {
                sector: 0,
                bin_low: 0.0,
                bin_high: 2.0,
                count: 3,
            },
            BinRow {
                sector: 0,
                bin_low: 1.0,
                bin_high: 3.0,
                count: 3,
            },
        ];
        assert!(matches!(
            FirmSizeBinTable::new(overlap, 1),
            Err(IngestError::InvalidBin { .. })
        ));
    }

    #[test]
    fn cell_count_is_floor_or_ceil() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let c = cell_draw_count(7, 0.3, &mut rng);
            assert!(c == 2 || c == 3);
        }
        assert_eq!(cell_draw_count(0, 0.3, &mut rng), 0);
        assert_eq!(cell_draw_count(9, 1.0, &mut rng), 9);
    }

    #[test]
    fn empty_cell_yields_no_firms() {
        let bins = FirmSizeBinTable::new(
            vec![
                BinRow {
                    sector: 0,
                    bin_low: 0.0,
                    bin_high: 10.0,
                    count: 0,
                },
                BinRow {
                    sector: 1,
                    bin_low: 0.0,
                    bin_high: 10.0,
                    count: 4,
                },
            ],
            2,
        )
        .unwrap();
        let pop = sample_firms(&bins, 1.0, 3).unwrap();
        assert_eq!(pop.len(), 4);
        assert!(pop.firms().iter().all(|f| f.sector == 1));
        assert_eq!(pop.sector_sizes()[0], 0.0);
    }

    #[test]
    fn sampled_population_is_normalized() {
        let bins = FirmSizeBinTable::new(
            vec![
                BinRow {
                    sector: 0,
                    bin_low: 0.0,
                    bin_high: 100.0,
                    count: 50,
                },
                BinRow {
                    sector: 0,
                    bin_low: 100.0,
                    bin_high: 1000.0,
                    count: 5,
                },
                BinRow {
                    sector: 1,
                    bin_low: 0.0,
                    bin_high: 100.0,
                    count: 30,
                },
            ],
            2,
        )
        .unwrap();
        let pop = sample_firms(&bins, 0.5, 11).unwrap();
        let max = pop.firms().iter().map(|f| f.size).fold(0.0, f64::max);
        assert_eq!(max, 1.0);
        assert!(pop.firms().iter().all(|f| f.size > 0.0 && f.size <= 1.0));
        let recomputed = sector_sums(pop.firms(), 2);
        for (a, b) in recomputed.iter().zip(pop.sector_sizes()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(sample_firms(&bins, 0.5, 11).unwrap(), pop);
    }

    #[test]
    fn bad_retain_fraction() {
        let bins = FirmSizeBinTable::new(
            vec![BinRow {
                sector: 0,
                bin_low: 0.0,
                bin_high: 1.0,
                count: 1,
            }],
            1,
        )
        .unwrap();
        assert!(sample_firms(&bins, 0.0, 1).is_err());
        assert!(sample_firms(&bins, 1.5, 1).is_err());
    }

    #[test]
    fn concordance_drops_unmapped() {
        let t = io(vec![vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let conc = Concordance::new(
            vec![
                ("A".into(), Some(0)),
                ("B".into(), Some(1)),
                ("C".into(), None),
            ],
            2,
        )
        .unwrap();
        let raw = vec![
            RawBinRow {
                code: "A".into(),
                bin_low: 0.0,
                bin_high: 1.0,
                count: 1,
            },
            RawBinRow {
                code: "B".into(),
                bin_low: 0.0,
                bin_high: 1.0,
                count: 1,
            },
            RawBinRow {
                code: "Z".into(),
                bin_low: 0.0,
                bin_high: 1.0,
                count: 1,
            },
        ];
        let (table, rep) = apply_concordance(&raw, &conc, t.n_sectors()).unwrap();
        assert_eq!(table.total_count(), 2);
        assert_eq!(rep.dropped_firms, 1);
        let (_, rep) = apply_concordance(&raw[..2], &Concordance::identity(&t), 2).unwrap();
        assert_eq!(rep.dropped_firms, 2);
        let (_, rep) = apply_concordance(&raw[..2], &conc, 2).unwrap();
        assert_eq!(rep.dropped_firms, 0);
    }

    #[test]
    fn duplicate_codes_rejected() {
        let r = Concordance::new(vec![("A".into(), Some(0)), ("A".into(), None)], 1);
        assert!(matches!(r, Err(IngestError::DuplicateCode(_))));
    }

    #[test]
    fn coordinates_validated() {
        let bad = Factory {
            firm_id: 0,
            factory_id: 0,
            lat: 2.0,
            lon: 0.0,
        };
        assert!(FactoryTable::new(vec![bad]).is_err());
    }
}
