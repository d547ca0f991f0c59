//! The finite population under study: per-cell headcounts and outcome
//! counts over a complete (group x area) cross-classification, area-level
//! covariates, and the spatial contiguity graph.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_distr::Distribution;

use crate::cells::CellGrid;
use crate::error::{Error, Result};
use crate::math::{logit, sigmoid};

/// Complete cross-classified population table.
///
/// Every (group, area) cell is present with headcount `N >= 1` and outcome
/// count `0 <= Y <= N`. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Population {
    area_ids: Vec<String>,
    group_labels: Vec<String>,
    headcount: CellGrid<u64>,
    outcome: CellGrid<u64>,
    area_totals: Vec<u64>,
    grand_total: u64,
}

impl Population {
    pub fn new(
        area_ids: Vec<String>,
        group_labels: Vec<String>,
        headcount: CellGrid<u64>,
        outcome: CellGrid<u64>,
    ) -> Result<Population> {
        let d = area_ids.len();
        let j = group_labels.len();
        if d == 0 || j == 0 {
            return Err(Error::Validation(
                "population needs at least one area and one group".into(),
            ));
        }
        if headcount.j_count() != j
            || headcount.d_count() != d
            || outcome.j_count() != j
            || outcome.d_count() != d
        {
            return Err(Error::Validation(
                "population cell grids do not match id dimensions".into(),
            ));
        }
        for (jj, dd, &n) in headcount.iter_cells() {
            let y = *outcome.get(jj, dd);
            if n == 0 {
                return Err(Error::Validation(format!(
                    "cell (group {}, area {}) has headcount 0; every cell needs N >= 1",
                    group_labels[jj], area_ids[dd]
                )));
            }
            if y > n {
                return Err(Error::Validation(format!(
                    "cell (group {}, area {}) has Y = {} > N = {}",
                    group_labels[jj], area_ids[dd], y, n
                )));
            }
        }
        let mut area_totals = vec![0u64; d];
        for (_, dd, &n) in headcount.iter_cells() {
            area_totals[dd] += n;
        }
        let grand_total = area_totals.iter().sum();
        Ok(Population {
            area_ids,
            group_labels,
            headcount,
            outcome,
            area_totals,
            grand_total,
        })
    }

    pub fn d_count(&self) -> usize {
        self.area_ids.len()
    }

    pub fn j_count(&self) -> usize {
        self.group_labels.len()
    }

    pub fn cell_count(&self) -> usize {
        self.d_count() * self.j_count()
    }

    pub fn area_ids(&self) -> &[String] {
        &self.area_ids
    }

    pub fn group_labels(&self) -> &[String] {
        &self.group_labels
    }

    #[inline]
    pub fn headcount(&self, j: usize, d: usize) -> u64 {
        *self.headcount.get(j, d)
    }

    #[inline]
    pub fn outcome(&self, j: usize, d: usize) -> u64 {
        *self.outcome.get(j, d)
    }

    /// Area total N_d = sum over groups of N_jd.
    #[inline]
    pub fn area_total(&self, d: usize) -> u64 {
        self.area_totals[d]
    }

    pub fn grand_total(&self) -> u64 {
        self.grand_total
    }

    /// True prevalence Y_jd / N_jd.
    #[inline]
    pub fn true_prevalence(&self, j: usize, d: usize) -> f64 {
        self.outcome(j, d) as f64 / self.headcount(j, d) as f64
    }

    pub fn prevalence_grid(&self) -> CellGrid<f64> {
        CellGrid::from_fn(self.j_count(), self.d_count(), |j, d| {
            self.true_prevalence(j, d)
        })
    }

    pub fn area_index(&self, id: &str) -> Option<usize> {
        self.area_ids.iter().position(|a| a == id)
    }
}

/// Load the population from a `area_id,group_id,N,Y` CSV.
///
/// The file must cover the full cross-classification: every combination of
/// the area and group ids it mentions, exactly once.
pub fn load_population(path: &Path) -> Result<Population> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    {
        let headers = reader.headers().map_err(|e| Error::Parse {
            path: path.into(),
            row: 1,
            msg: e.to_string(),
        })?;
        let expect = ["area_id", "group_id", "N", "Y"];
        let got: Vec<&str> = headers.iter().collect();
        if got != expect {
            return Err(Error::Parse {
                path: path.into(),
                row: 1,
                msg: format!(
                    "expected header area_id,group_id,N,Y, got {}",
                    got.join(",")
                ),
            });
        }
    }

    let mut area_ids: Vec<String> = Vec::new();
    let mut group_labels: Vec<String> = Vec::new();
    let mut area_index: HashMap<String, usize> = HashMap::new();
    let mut group_index: HashMap<String, usize> = HashMap::new();
    let mut rows: Vec<(usize, usize, u64, u64, usize)> = Vec::new();

    for (i, record) in reader.records().enumerate() {
        let row_no = i + 2; // 1-based, after the header
        let record = record.map_err(|e| Error::Parse {
            path: path.into(),
            row: row_no,
            msg: e.to_string(),
        })?;
        if record.len() != 4 {
            return Err(Error::Parse {
                path: path.into(),
                row: row_no,
                msg: format!("expected 4 fields, got {}", record.len()),
            });
        }
        let area = record[0].to_string();
        let group = record[1].to_string();
        let n: u64 = record[2].trim().parse().map_err(|_| Error::Parse {
            path: path.into(),
            row: row_no,
            msg: format!("N is not a non-negative integer: {:?}", &record[2]),
        })?;
        let y: u64 = record[3].trim().parse().map_err(|_| Error::Parse {
            path: path.into(),
            row: row_no,
            msg: format!("Y is not a non-negative integer: {:?}", &record[3]),
        })?;
        let d = *area_index.entry(area.clone()).or_insert_with(|| {
            area_ids.push(area);
            area_ids.len() - 1
        });
        let j = *group_index.entry(group.clone()).or_insert_with(|| {
            group_labels.push(group);
            group_labels.len() - 1
        });
        rows.push((j, d, n, y, row_no));
    }

    let (d_count, j_count) = (area_ids.len(), group_labels.len());
    if d_count == 0 || j_count == 0 {
        return Err(Error::Validation(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    let mut seen: CellGrid<Option<usize>> = CellGrid::filled(j_count, d_count, None);
    let mut headcount = CellGrid::filled(j_count, d_count, 0u64);
    let mut outcome = CellGrid::filled(j_count, d_count, 0u64);
    for (j, d, n, y, row_no) in rows {
        if let Some(first) = seen.get(j, d) {
            return Err(Error::Parse {
                path: path.into(),
                row: row_no,
                msg: format!(
                    "duplicate cell (group {}, area {}), first seen at row {}",
                    group_labels[j], area_ids[d], first
                ),
            });
        }
        *seen.get_mut(j, d) = Some(row_no);
        *headcount.get_mut(j, d) = n;
        *outcome.get_mut(j, d) = y;
    }
    for (j, d, s) in seen.iter_cells() {
        if s.is_none() {
            return Err(Error::Validation(format!(
                "{}: incomplete table, cell (group {}, area {}) is missing",
                path.display(),
                group_labels[j],
                area_ids[d]
            )));
        }
    }
    Population::new(area_ids, group_labels, headcount, outcome)
}

/// Write the population in canonical form: header then rows ordered area-major
/// (all groups of the first area, then the second, ...).
pub fn write_population(pop: &Population, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "area_id,group_id,N,Y").unwrap();
    for d in 0..pop.d_count() {
        for j in 0..pop.j_count() {
            writeln!(
                out,
                "{},{},{},{}",
                pop.area_ids[d],
                pop.group_labels[j],
                pop.headcount(j, d),
                pop.outcome(j, d)
            )
            .unwrap();
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Area-level covariates, optionally column-standardized.
#[derive(Debug, Clone)]
pub struct CovariateMatrix {
    names: Vec<String>,
    /// row-major by area: values[d * k_count + k]
    values: Vec<f64>,
    d_count: usize,
    scaled: bool,
}

impl CovariateMatrix {
    pub fn from_rows(names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<CovariateMatrix> {
        let k = names.len();
        let d = rows.len();
        if d == 0 || k == 0 {
            return Err(Error::Validation(
                "covariate matrix must be non-empty".into(),
            ));
        }
        let mut values = Vec::with_capacity(d * k);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Validation(format!(
                    "covariate row {i} has {} values, expected {k}",
                    row.len()
                )));
            }
            for &v in row {
                if !v.is_finite() {
                    return Err(Error::Validation(format!(
                        "non-finite covariate in row {i}"
                    )));
                }
                values.push(v);
            }
        }
        Ok(CovariateMatrix {
            names,
            values,
            d_count: d,
            scaled: false,
        })
    }

    pub fn k_count(&self) -> usize {
        self.names.len()
    }

    pub fn d_count(&self) -> usize {
        self.d_count
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn scaled(&self) -> bool {
        self.scaled
    }

    #[inline]
    pub fn value(&self, d: usize, k: usize) -> f64 {
        self.values[d * self.k_count() + k]
    }

    pub fn row(&self, d: usize) -> &[f64] {
        let k = self.k_count();
        &self.values[d * k..(d + 1) * k]
    }
}

/// Column-standardize covariates to sample mean 0 and sample SD 1.
///
/// Constant columns cannot be standardized and are rejected by name.
pub fn scale_covariates(raw: &CovariateMatrix) -> Result<CovariateMatrix> {
    let d = raw.d_count();
    let k_count = raw.k_count();
    if d < 2 {
        return Err(Error::Validation(
            "need at least two areas to scale covariates".into(),
        ));
    }
    let mut values = raw.values.clone();
    for k in 0..k_count {
        let mean = (0..d).map(|i| raw.value(i, k)).sum::<f64>() / d as f64;
        let ss = (0..d)
            .map(|i| (raw.value(i, k) - mean).powi(2))
            .sum::<f64>();
        let sd = (ss / (d as f64 - 1.0)).sqrt();
        if sd <= 0.0 || !sd.is_finite() {
            return Err(Error::Validation(format!(
                "covariate column {:?} is constant and cannot be scaled",
                raw.names[k]
            )));
        }
        for i in 0..d {
            values[i * k_count + k] = (raw.value(i, k) - mean) / sd;
        }
    }
    Ok(CovariateMatrix {
        names: raw.names.clone(),
        values,
        d_count: d,
        scaled: true,
    })
}

/// Load covariates from `area_id,x1,..,xK` CSV, aligned to `pop`'s area order.
pub fn load_covariates(path: &Path, pop: &Population) -> Result<CovariateMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let names: Vec<String> = {
        let headers = reader.headers().map_err(|e| Error::Parse {
            path: path.into(),
            row: 1,
            msg: e.to_string(),
        })?;
        let cols: Vec<String> = headers.iter().map(|s| s.to_string()).collect();
        if cols.first().map(String::as_str) != Some("area_id") || cols.len() < 2 {
            return Err(Error::Parse {
                path: path.into(),
                row: 1,
                msg: "expected header area_id,x1,..,xK".into(),
            });
        }
        cols[1..].to_vec()
    };
    let k = names.len();
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; pop.d_count()];
    for (i, record) in reader.records().enumerate() {
        let row_no = i + 2;
        let record = record.map_err(|e| Error::Parse {
            path: path.into(),
            row: row_no,
            msg: e.to_string(),
        })?;
        let area = &record[0];
        let d = pop.area_index(area).ok_or_else(|| Error::Parse {
            path: path.into(),
            row: row_no,
            msg: format!("unknown area_id {area:?}"),
        })?;
        if record.len() != k + 1 {
            return Err(Error::Parse {
                path: path.into(),
                row: row_no,
                msg: format!("expected {} fields, got {}", k + 1, record.len()),
            });
        }
        if rows[d].is_some() {
            return Err(Error::Parse {
                path: path.into(),
                row: row_no,
                msg: format!("duplicate covariate row for area {area:?}"),
            });
        }
        let mut vals = Vec::with_capacity(k);
        for f in record.iter().skip(1) {
            vals.push(f.trim().parse::<f64>().map_err(|_| Error::Parse {
                path: path.into(),
                row: row_no,
                msg: format!("bad covariate value {f:?}"),
            })?);
        }
        rows[d] = Some(vals);
    }
    let rows: Vec<Vec<f64>> = rows
        .into_iter()
        .enumerate()
        .map(|(d, r)| {
            r.ok_or_else(|| {
                Error::Validation(format!(
                    "{}: no covariate row for area {}",
                    path.display(),
                    pop.area_ids()[d]
                ))
            })
        })
        .collect::<Result<_>>()?;
    CovariateMatrix::from_rows(names, rows)
}

pub fn write_covariates(x: &CovariateMatrix, pop: &Population, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "area_id,{}", x.names().join(",")).unwrap();
    for d in 0..x.d_count() {
        let vals: Vec<String> = x.row(d).iter().map(|v| v.to_string()).collect();
        writeln!(out, "{},{}", pop.area_ids()[d], vals.join(",")).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Undirected contiguity graph over areas.
///
/// Stores plain neighbor lists; the `w_ii = 1` diagonal convention of the
/// precision matrix lives in precision construction, not here.
#[derive(Debug, Clone)]
pub struct AdjacencyGraph {
    neighbors: Vec<Vec<usize>>,
}

impl AdjacencyGraph {
    /// Build from undirected edges; duplicates are removed, input orientation
    /// is ignored (asymmetric input is symmetrized).
    pub fn from_edges(d_count: usize, edges: &[(usize, usize)]) -> Result<AdjacencyGraph> {
        let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); d_count];
        for &(a, b) in edges {
            if a >= d_count || b >= d_count {
                return Err(Error::Validation(format!("edge ({a}, {b}) out of range")));
            }
            if a == b {
                // self-loops are not neighbor relations
                continue;
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Ok(AdjacencyGraph { neighbors })
    }

    pub fn d_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, d: usize) -> &[usize] {
        &self.neighbors[d]
    }

    pub fn neighbor_count(&self, d: usize) -> usize {
        self.neighbors[d].len()
    }

    pub fn is_isolated(&self, d: usize) -> bool {
        self.neighbors[d].is_empty()
    }

    pub fn isolated_areas(&self) -> Vec<usize> {
        (0..self.d_count())
            .filter(|&d| self.is_isolated(d))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Connected components (isolated areas are singleton components).
    pub fn connected_components(&self) -> Vec<usize> {
        let n = self.d_count();
        let mut comp = vec![usize::MAX; n];
        let mut next = 0;
        let mut stack = Vec::new();
        for s in 0..n {
            if comp[s] != usize::MAX {
                continue;
            }
            comp[s] = next;
            stack.push(s);
            while let Some(v) = stack.pop() {
                for &w in &self.neighbors[v] {
                    if comp[w] == usize::MAX {
                        comp[w] = next;
                        stack.push(w);
                    }
                }
            }
            next += 1;
        }
        comp
    }

    pub fn component_count(&self) -> usize {
        self.connected_components()
            .iter()
            .copied()
            .max()
            .map_or(0, |m| m + 1)
    }
}

/// Load an edge list: one `area_id_a,area_id_b` pair per line, no header.
pub fn load_adjacency(path: &Path, pop: &Population) -> Result<AdjacencyGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split(',');
        let (a, b) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (a.trim(), b.trim()),
            _ => {
                return Err(Error::Parse {
                    path: path.into(),
                    row: row_no,
                    msg: "expected exactly two comma-separated area ids".into(),
                })
            }
        };
        let da = pop.area_index(a).ok_or_else(|| Error::Parse {
            path: path.into(),
            row: row_no,
            msg: format!("unknown area_id {a:?}"),
        })?;
        let db = pop.area_index(b).ok_or_else(|| Error::Parse {
            path: path.into(),
            row: row_no,
            msg: format!("unknown area_id {b:?}"),
        })?;
        edges.push((da, db));
    }
    AdjacencyGraph::from_edges(pop.d_count(), &edges)
}

pub fn write_adjacency(graph: &AdjacencyGraph, pop: &Population, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for d in 0..graph.d_count() {
        for &e in graph.neighbors(d) {
            if e > d {
                writeln!(out, "{},{}", pop.area_ids()[d], pop.area_ids()[e]).unwrap();
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Synthetic population bundle for desk-scale experiments.
pub struct SynthOptions {
    pub d_count: usize,
    pub j_count: usize,
    /// Base prevalence per group, each strictly inside (0, 1).
    pub prevalence_profile: Vec<f64>,
    /// Inclusive cell headcount range; minimum must be >= 1.
    pub headcount_range: (u64, u64),
    pub seed: u64,
}

/// Strength of the synthetic logit-linear truth components.
const SYNTH_COV_EFFECTS: [f64; 2] = [0.6, -0.4];
const SYNTH_SPATIAL_AMPLITUDE: f64 = 0.5;
const SYNTH_CELL_NOISE_SD: f64 = 0.1;

/// Generate a reproducible population over a rook-contiguity lattice.
///
/// The truth is logit-linear: group base rate + covariate effects + a smooth
/// spatial surface over the lattice + small cell-level noise; `Y_jd` is then
/// drawn binomially. Two standardized area covariates are produced, the
/// first informative for the truth, the second weakly so.
pub fn synth_population(
    opts: &SynthOptions,
) -> Result<(Population, CovariateMatrix, AdjacencyGraph)> {
    if opts.d_count == 0 || opts.j_count == 0 {
        return Err(Error::Validation("synth: need D >= 1 and J >= 1".into()));
    }
    if opts.prevalence_profile.len() != opts.j_count {
        return Err(Error::Validation(format!(
            "synth: prevalence profile has {} entries for J = {}",
            opts.prevalence_profile.len(),
            opts.j_count
        )));
    }
    if opts
        .prevalence_profile
        .iter()
        .any(|&r| r <= 0.0 || r >= 1.0)
    {
        return Err(Error::Validation(
            "synth: base rates must lie strictly in (0, 1)".into(),
        ));
    }
    if opts.headcount_range.0 < 1 || opts.headcount_range.0 > opts.headcount_range.1 {
        return Err(Error::Validation(
            "synth: headcount range needs 1 <= min <= max".into(),
        ));
    }

    let d_count = opts.d_count;
    let j_count = opts.j_count;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(opts.seed);

    // lattice: nearly square, row-major area order
    let cols = (d_count as f64).sqrt().ceil() as usize;
    let mut edges = Vec::new();
    for d in 0..d_count {
        if (d % cols) + 1 < cols && d + 1 < d_count {
            edges.push((d, d + 1));
        }
        if d + cols < d_count {
            edges.push((d, d + cols));
        }
    }
    let graph = AdjacencyGraph::from_edges(d_count, &edges)?;

    let rows_f = (d_count as f64 / cols as f64).ceil().max(1.0);
    let spatial: Vec<f64> = (0..d_count)
        .map(|d| {
            let (r, c) = ((d / cols) as f64, (d % cols) as f64);
            let u = 2.0 * std::f64::consts::PI * c / cols as f64;
            let v = 2.0 * std::f64::consts::PI * r / rows_f;
            SYNTH_SPATIAL_AMPLITUDE * 0.5 * (u.sin() + v.cos())
        })
        .collect();
    let spatial_mean = spatial.iter().sum::<f64>() / d_count as f64;

    // covariates: x1 informative, x2 weak
    let raw_rows: Vec<Vec<f64>> = (0..d_count)
        .map(|_| {
            let x1: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal);
            let x2: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal);
            vec![x1, x2]
        })
        .collect();
    let raw = CovariateMatrix::from_rows(vec!["x1".into(), "x2".into()], raw_rows)?;
    let covariates = if d_count >= 2 {
        scale_covariates(&raw)?
    } else {
        raw
    };

    let mut headcount = CellGrid::filled(j_count, d_count, 0u64);
    let mut outcome = CellGrid::filled(j_count, d_count, 0u64);
    let (n_min, n_max) = opts.headcount_range;
    for j in 0..j_count {
        let base = logit(opts.prevalence_profile[j]);
        #[allow(clippy::needless_range_loop)]
        for d in 0..d_count {
            let n = rng.random_range(n_min..=n_max);
            let covariate_part: f64 = covariates
                .row(d)
                .iter()
                .zip(SYNTH_COV_EFFECTS.iter())
                .map(|(x, b)| x * b)
                .sum();
            let noise: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal);
            let theta =
                base + covariate_part + (spatial[d] - spatial_mean) + SYNTH_CELL_NOISE_SD * noise;
            let p = sigmoid(theta);
            let y = rand_distr::Binomial::new(n, p)
                .map_err(|e| Error::Numerical(e.to_string()))?
                .sample(&mut rng);
            *headcount.get_mut(j, d) = n;
            *outcome.get_mut(j, d) = y;
        }
    }

    let area_ids = (0..d_count).map(|d| format!("A{d:04}")).collect();
    let group_labels = (0..j_count).map(|j| format!("G{j}")).collect();
    let pop = Population::new(area_ids, group_labels, headcount, outcome)?;
    Ok((pop, covariates, graph))
}
