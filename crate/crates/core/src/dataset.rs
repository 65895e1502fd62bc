//! Alphabets, discrete datasets, empirical distribution estimation and CSV ingestion.
//!
//! Every other module consumes the types defined here. Alphabets are built in
//! first-appearance order and only contain observed symbols, so every marginal
//! entry of an estimated [`DistributionSet`] is strictly positive.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on the number of cells of a stored full joint table.
pub const DEFAULT_JOINT_CAP: usize = 10_000_000;

const NORMALIZATION_TOL: f64 = 1e-9;

/// Current full-joint cap; `COMMONFEAT_JOINT_CAP` overrides the default.
pub fn joint_cap() -> usize {
    std::env::var("COMMONFEAT_JOINT_CAP")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(DEFAULT_JOINT_CAP)
}

/// Ordered set of distinct symbols taken by one variable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Alphabet {
    pub fn new<S: Into<String>>(symbols: impl IntoIterator<Item = S>) -> Result<Self> {
        let symbols: Vec<String> = symbols.into_iter().map(Into::into).collect();
        if symbols.is_empty() {
            return Err(Error::Validation("alphabet must contain at least one symbol".into()));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate symbol {s:?} in alphabet")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// Alphabet with symbols "0", "1", ..., "size-1".
    pub fn indexed(size: usize) -> Result<Self> {
        Self::new((0..size).map(|i| i.to_string()))
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbol(&self, index: usize) -> Option<&str> {
        self.symbols.get(index).map(String::as_str)
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Permute the symbol order: the new alphabet lists `self.symbols[perm[0]]` first.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.size() {
            return Err(Error::Domain("permutation length differs from alphabet size".into()));
        }
        Self::new(perm.iter().map(|&p| self.symbols[p].clone()))
    }
}

/// Builds an alphabet incrementally, in first-appearance order.
#[derive(Debug, Default)]
struct AlphabetBuilder {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl AlphabetBuilder {
    fn encode(&mut self, symbol: &str) -> usize {
        if let Some(&i) = self.index.get(symbol) {
            return i;
        }
        let i = self.symbols.len();
        self.symbols.push(symbol.to_string());
        self.index.insert(symbol.to_string(), i);
        i
    }

    fn finish(self) -> Alphabet {
        Alphabet {
            symbols: self.symbols,
            index: self.index,
        }
    }
}

/// `n` samples of `d` discrete variables, stored as alphabet indices.
#[derive(Debug, Clone)]
pub struct DiscreteDataset {
    names: Vec<String>,
    alphabets: Vec<Alphabet>,
    /// Row-major `n * d` indices.
    samples: Vec<usize>,
}

impl DiscreteDataset {
    pub fn new(names: Vec<String>, alphabets: Vec<Alphabet>, samples: Vec<Vec<usize>>) -> Result<Self> {
        let d = alphabets.len();
        if d < 2 {
            return Err(Error::Validation(format!("at least 2 variables are required, got {d}")));
        }
        if names.len() != d {
            return Err(Error::Validation("one name per variable is required".into()));
        }
        if samples.is_empty() {
            return Err(Error::EmptyInput("dataset has no samples".into()));
        }
        let mut flat = Vec::with_capacity(samples.len() * d);
        for (row, sample) in samples.iter().enumerate() {
            if sample.len() != d {
                return Err(Error::format(
                    Some(row + 1),
                    format!("expected {d} values, found {}", sample.len()),
                ));
            }
            for (i, &x) in sample.iter().enumerate() {
                if x >= alphabets[i].size() {
                    return Err(Error::Validation(format!(
                        "sample {row} variable {i}: index {x} outside alphabet of size {}",
                        alphabets[i].size()
                    )));
                }
            }
            flat.extend_from_slice(sample);
        }
        Ok(Self {
            names,
            alphabets,
            samples: flat,
        })
    }

    /// Encode string rows; alphabets are built per column in first-appearance order.
    pub fn from_string_rows<S: AsRef<str>>(names: Vec<String>, rows: &[Vec<S>]) -> Result<Self> {
        let d = names.len();
        if d < 2 {
            return Err(Error::Validation(format!("at least 2 variables are required, got {d}")));
        }
        if rows.is_empty() {
            return Err(Error::EmptyInput("no data rows".into()));
        }
        let mut builders: Vec<AlphabetBuilder> = (0..d).map(|_| AlphabetBuilder::default()).collect();
        let mut samples = Vec::with_capacity(rows.len() * d);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::format(
                    Some(r + 1),
                    format!("expected {d} fields, found {}", row.len()),
                ));
            }
            for (b, cell) in builders.iter_mut().zip(row) {
                samples.push(b.encode(cell.as_ref()));
            }
        }
        Ok(Self {
            names,
            alphabets: builders.into_iter().map(AlphabetBuilder::finish).collect(),
            samples,
        })
    }

    pub fn n(&self) -> usize {
        self.samples.len() / self.d()
    }

    pub fn d(&self) -> usize {
        self.alphabets.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn alphabets(&self) -> &[Alphabet] {
        &self.alphabets
    }

    pub fn row(&self, l: usize) -> &[usize] {
        let d = self.d();
        &self.samples[l * d..(l + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.samples.chunks_exact(self.d())
    }

    /// Symbol string of sample `l`, variable `i`.
    pub fn decode(&self, l: usize, i: usize) -> &str {
        self.alphabets[i]
            .symbol(self.row(l)[i])
            .expect("dataset invariant: indices are in range")
    }
}

/// CSV reading options.
#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub delimiter: u8,
    /// When false, variables are named `X1..Xd`.
    pub has_header: bool,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            delimiter: b',',
            has_header: true,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, options: &CsvOptions) -> Result<DiscreteDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, options)
}

pub fn read_csv<R: Read>(reader: R, options: &CsvOptions) -> Result<DiscreteDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);

    let mut records = rdr.records();
    let mut names: Option<Vec<String>> = None;
    let mut rows: Vec<Vec<String>> = Vec::new();
    // Row numbers are 1-based file lines (header included).
    let mut line = 0usize;
    if options.has_header {
        match records.next() {
            None => return Err(Error::EmptyInput("file is empty".into())),
            Some(rec) => {
                line += 1;
                let rec = rec.map_err(|e| Error::format(Some(line), e.to_string()))?;
                names = Some(rec.iter().map(|s| s.trim().to_string()).collect());
            }
        }
    }
    for rec in records {
        line += 1;
        let rec = rec.map_err(|e| Error::format(Some(line), e.to_string()))?;
        if rec.len() == 1 && rec.get(0).map(str::is_empty).unwrap_or(false) {
            continue;
        }
        let fields: Vec<String> = rec.iter().map(|s| s.trim().to_string()).collect();
        let expected = names.as_ref().map(Vec::len).or_else(|| rows.first().map(Vec::len));
        if let Some(expected) = expected {
            if fields.len() != expected {
                return Err(Error::format(
                    Some(line),
                    format!("expected {expected} fields, found {}", fields.len()),
                ));
            }
        }
        rows.push(fields);
    }
    let names = match names {
        Some(n) => n,
        None => match rows.first() {
            Some(first) => (1..=first.len()).map(|i| format!("X{i}")).collect(),
            None => return Err(Error::EmptyInput("file is empty".into())),
        },
    };
    if names.len() < 2 {
        return Err(Error::Validation(format!(
            "at least 2 variables (d >= 2) are required, got {}",
            names.len()
        )));
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("no data rows after the header".into()));
    }
    DiscreteDataset::from_string_rows(names, &rows)
}

/// Write symbols (not indices), with a header row of variable names.
pub fn write_csv<W: std::io::Write>(ds: &DiscreteDataset, writer: W, delimiter: u8) -> Result<()> {
    let io_err = |e: csv::Error| Error::format(None, e.to_string());
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(writer);
    w.write_record(ds.names()).map_err(io_err)?;
    for l in 0..ds.n() {
        w.write_record((0..ds.d()).map(|i| ds.decode(l, i))).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::format(None, e.to_string()))?;
    Ok(())
}

/// Dense probability table over a product of finite alphabets.
///
/// Cells are laid out in row-major order: the last variable varies fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTable {
    dims: Vec<usize>,
    strides: Vec<usize>,
    probs: Vec<f64>,
}

impl JointTable {
    pub fn new(dims: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        let cells = checked_cells(&dims)
            .ok_or_else(|| Error::Capacity("joint table size overflows".into()))?;
        if probs.len() != cells {
            return Err(Error::Validation(format!(
                "joint table has {} entries, expected {cells}",
                probs.len()
            )));
        }
        let strides = strides_for(&dims);
        Ok(Self { dims, strides, probs })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn index(&self, x: &[usize]) -> usize {
        x.iter().zip(&self.strides).map(|(a, s)| a * s).sum()
    }

    pub fn get(&self, x: &[usize]) -> f64 {
        self.probs[self.index(x)]
    }

    /// Decode a flat cell index into per-variable indices.
    pub fn unravel(&self, mut cell: usize, out: &mut [usize]) {
        for (o, &s) in out.iter_mut().zip(&self.strides) {
            *o = cell / s;
            cell %= s;
        }
    }

    /// Iterate `(cell values, probability)` over all cells.
    pub fn for_each_cell(&self, mut f: impl FnMut(&[usize], f64)) {
        let mut x = vec![0usize; self.dims.len()];
        for &p in &self.probs {
            f(&x, p);
            // odometer increment, last variable fastest
            for v in (0..x.len()).rev() {
                x[v] += 1;
                if x[v] < self.dims[v] {
                    break;
                }
                x[v] = 0;
            }
        }
    }

    /// Marginal table over the listed variables, in the listed order. Repeated
    /// variables are allowed and produce tables supported on the diagonal.
    pub fn marginalize(&self, vars: &[usize]) -> JointTable {
        let dims: Vec<usize> = vars.iter().map(|&v| self.dims[v]).collect();
        let strides = strides_for(&dims);
        let mut probs = vec![0.0; dims.iter().product()];
        self.for_each_cell(|x, p| {
            if p != 0.0 {
                let idx: usize = vars.iter().zip(&strides).map(|(&v, s)| x[v] * s).sum();
                probs[idx] += p;
            }
        });
        JointTable { dims, strides, probs }
    }

    pub fn sum(&self) -> f64 {
        self.probs.iter().sum()
    }
}

fn strides_for(dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; dims.len()];
    for v in (0..dims.len().saturating_sub(1)).rev() {
        strides[v] = strides[v + 1] * dims[v + 1];
    }
    strides
}

fn checked_cells(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// Marginals, pairwise joints and (optionally) the full joint of `d` variables.
#[derive(Debug, Clone)]
pub struct DistributionSet {
    names: Vec<String>,
    alphabets: Vec<Alphabet>,
    marginals: Vec<Vec<f64>>,
    /// `pairwise[i][j]` is the `|X_i| x |X_j|` table of `P_{X_i X_j}`.
    pairwise: Vec<Vec<DMatrix<f64>>>,
    full_joint: Option<JointTable>,
    n_samples: Option<usize>,
    smoothing_alpha: f64,
}

/// Options for [`estimate_distributions`].
#[derive(Debug, Clone)]
pub struct EstimateOptions {
    pub with_full_joint: bool,
    pub joint_cap: usize,
    /// Add-alpha pseudo-count on every cell of the product space. Zero by default.
    pub smoothing_alpha: f64,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            with_full_joint: false,
            joint_cap: joint_cap(),
            smoothing_alpha: 0.0,
        }
    }
}

/// Counting (maximum-likelihood) estimates of marginals and pairwise joints.
///
/// With `smoothing_alpha = a > 0` every cell of the product space receives a
/// pseudo-count `a`; marginals and pairwise tables are the exact marginals of
/// that smoothed joint, so all consistency invariants still hold.
pub fn estimate_distributions(ds: &DiscreteDataset, opts: &EstimateOptions) -> Result<DistributionSet> {
    let d = ds.d();
    let dims: Vec<usize> = ds.alphabets().iter().map(Alphabet::size).collect();
    let alpha = opts.smoothing_alpha;
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Validation(format!("smoothing alpha must be >= 0, got {alpha}")));
    }
    let full_cells = checked_cells(&dims);
    if opts.with_full_joint {
        match full_cells {
            Some(c) if c <= opts.joint_cap => {}
            _ => {
                return Err(Error::Capacity(format!(
                    "full joint over alphabets {dims:?} exceeds the cap of {} cells; omit the full joint",
                    opts.joint_cap
                )))
            }
        }
    }

    let mut marg_counts: Vec<Vec<u64>> = dims.iter().map(|&s| vec![0; s]).collect();
    let mut pair_counts: Vec<Vec<Vec<u64>>> = (0..d)
        .map(|i| (0..d).map(|j| vec![0u64; if j > i { dims[i] * dims[j] } else { 0 }]).collect())
        .collect();
    for row in ds.rows() {
        for i in 0..d {
            marg_counts[i][row[i]] += 1;
            for j in i + 1..d {
                pair_counts[i][j][row[i] * dims[j] + row[j]] += 1;
            }
        }
    }

    let n = ds.n() as f64;
    // Total pseudo-count mass; each cell of the product space carries alpha.
    let n_cells = dims.iter().map(|&s| s as f64).product::<f64>();
    let total = n + alpha * n_cells;
    let marginals: Vec<Vec<f64>> = marg_counts
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let extra = alpha * n_cells / dims[i] as f64;
            c.iter().map(|&v| (v as f64 + extra) / total).collect()
        })
        .collect();

    let mut pairwise: Vec<Vec<DMatrix<f64>>> = (0..d)
        .map(|i| (0..d).map(|j| DMatrix::zeros(dims[i], dims[j])).collect())
        .collect();
    for i in 0..d {
        pairwise[i][i] = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(marginals[i].clone()));
        for j in i + 1..d {
            let extra = alpha * n_cells / (dims[i] * dims[j]) as f64;
            let t = DMatrix::from_fn(dims[i], dims[j], |a, b| {
                (pair_counts[i][j][a * dims[j] + b] as f64 + extra) / total
            });
            pairwise[j][i] = t.transpose();
            pairwise[i][j] = t;
        }
    }

    let full_joint = if opts.with_full_joint {
        let cells = full_cells.expect("checked above");
        let mut counts = vec![0u64; cells];
        let strides = strides_for(&dims);
        for row in ds.rows() {
            let idx: usize = row.iter().zip(&strides).map(|(a, s)| a * s).sum();
            counts[idx] += 1;
        }
        let probs = counts.iter().map(|&c| (c as f64 + alpha) / total).collect();
        Some(JointTable::new(dims.clone(), probs)?)
    } else {
        None
    };

    Ok(DistributionSet {
        names: ds.names().to_vec(),
        alphabets: ds.alphabets().to_vec(),
        marginals,
        pairwise,
        full_joint,
        n_samples: Some(ds.n()),
        smoothing_alpha: alpha,
    })
}

/// Build a distribution set by exact marginalization of a full joint table.
pub fn from_joint(alphabets: Vec<Alphabet>, joint: JointTable) -> Result<DistributionSet> {
    let d = alphabets.len();
    if d < 2 {
        return Err(Error::Validation(format!("at least 2 variables are required, got {d}")));
    }
    let dims: Vec<usize> = alphabets.iter().map(Alphabet::size).collect();
    if joint.dims() != dims.as_slice() {
        return Err(Error::Validation(format!(
            "joint dims {:?} do not match alphabet sizes {dims:?}",
            joint.dims()
        )));
    }
    if let Some(bad) = joint.probs().iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
        return Err(Error::Validation(format!("joint table has invalid entry {bad}")));
    }
    let sum = joint.sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::Validation(format!("joint table sums to {sum}, expected 1")));
    }
    let names = (1..=d).map(|i| format!("X{i}")).collect();
    Ok(distribution_from_joint_unchecked(names, alphabets, joint))
}

pub(crate) fn distribution_from_joint_unchecked(
    names: Vec<String>,
    alphabets: Vec<Alphabet>,
    joint: JointTable,
) -> DistributionSet {
    let d = alphabets.len();
    let dims: Vec<usize> = alphabets.iter().map(Alphabet::size).collect();
    let mut marginals: Vec<Vec<f64>> = dims.iter().map(|&s| vec![0.0; s]).collect();
    let mut pairwise: Vec<Vec<DMatrix<f64>>> = (0..d)
        .map(|i| (0..d).map(|j| DMatrix::zeros(dims[i], dims[j])).collect())
        .collect();
    joint.for_each_cell(|x, p| {
        if p == 0.0 {
            return;
        }
        for i in 0..d {
            marginals[i][x[i]] += p;
            for j in i + 1..d {
                pairwise[i][j][(x[i], x[j])] += p;
            }
        }
    });
    for i in 0..d {
        pairwise[i][i] = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(marginals[i].clone()));
        for j in i + 1..d {
            pairwise[j][i] = pairwise[i][j].transpose();
        }
    }
    DistributionSet {
        names,
        alphabets,
        marginals,
        pairwise,
        full_joint: Some(joint),
        n_samples: None,
        smoothing_alpha: 0.0,
    }
}

impl DistributionSet {
    /// Assemble from explicit marginals and pairwise tables (no full joint).
    /// The tables are validated against every consistency invariant.
    pub fn from_parts(
        names: Vec<String>,
        alphabets: Vec<Alphabet>,
        marginals: Vec<Vec<f64>>,
        pairwise: Vec<Vec<DMatrix<f64>>>,
    ) -> Result<Self> {
        let ds = Self {
            names,
            alphabets,
            marginals,
            pairwise,
            full_joint: None,
            n_samples: None,
            smoothing_alpha: 0.0,
        };
        ds.validate(NORMALIZATION_TOL)?;
        Ok(ds)
    }

    pub fn d(&self) -> usize {
        self.alphabets.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.alphabets.iter().map(Alphabet::size).collect()
    }

    /// `m = sum_i |X_i|`.
    pub fn total_dim(&self) -> usize {
        self.alphabets.iter().map(Alphabet::size).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn alphabets(&self) -> &[Alphabet] {
        &self.alphabets
    }

    pub fn marginal(&self, i: usize) -> &[f64] {
        &self.marginals[i]
    }

    pub fn marginals(&self) -> &[Vec<f64>] {
        &self.marginals
    }

    pub fn pairwise(&self, i: usize, j: usize) -> &DMatrix<f64> {
        &self.pairwise[i][j]
    }

    pub fn full_joint(&self) -> Option<&JointTable> {
        self.full_joint.as_ref()
    }

    pub fn require_full_joint(&self) -> Result<&JointTable> {
        self.full_joint
            .as_ref()
            .ok_or_else(|| Error::Domain("this operation needs the full joint distribution".into()))
    }

    pub fn n_samples(&self) -> Option<usize> {
        self.n_samples
    }

    pub fn smoothing_alpha(&self) -> f64 {
        self.smoothing_alpha
    }

    /// Restrict to the variables `vars` (in that order).
    pub fn select(&self, vars: &[usize]) -> Result<DistributionSet> {
        if vars.len() < 2 {
            return Err(Error::Domain("a view needs at least 2 variables".into()));
        }
        if let Some(&v) = vars.iter().find(|&&v| v >= self.d()) {
            return Err(Error::Domain(format!("variable index {v} out of range")));
        }
        let pairwise = vars
            .iter()
            .map(|&i| vars.iter().map(|&j| self.pairwise[i][j].clone()).collect())
            .collect();
        Ok(DistributionSet {
            names: vars.iter().map(|&i| self.names[i].clone()).collect(),
            alphabets: vars.iter().map(|&i| self.alphabets[i].clone()).collect(),
            marginals: vars.iter().map(|&i| self.marginals[i].clone()).collect(),
            pairwise,
            full_joint: self.full_joint.as_ref().map(|j| j.marginalize(vars)),
            n_samples: self.n_samples,
            smoothing_alpha: self.smoothing_alpha,
        })
    }

    /// Relabel the symbols of each variable: `perms[i][new] = old`.
    pub fn permute_symbols(&self, perms: &[Vec<usize>]) -> Result<DistributionSet> {
        if perms.len() != self.d() {
            return Err(Error::Domain("one permutation per variable is required".into()));
        }
        let alphabets = self
            .alphabets
            .iter()
            .zip(perms)
            .map(|(a, p)| a.permuted(p))
            .collect::<Result<Vec<_>>>()?;
        let marginals = self
            .marginals
            .iter()
            .zip(perms)
            .map(|(m, p)| p.iter().map(|&o| m[o]).collect())
            .collect();
        let d = self.d();
        let pairwise = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        let t = &self.pairwise[i][j];
                        DMatrix::from_fn(t.nrows(), t.ncols(), |a, b| t[(perms[i][a], perms[j][b])])
                    })
                    .collect()
            })
            .collect();
        let full_joint = match &self.full_joint {
            None => None,
            Some(j) => {
                let mut probs = vec![0.0; j.len()];
                let mut old = vec![0usize; d];
                let mut new = vec![0usize; d];
                for (cell, p) in probs.iter_mut().enumerate() {
                    j.unravel(cell, &mut new);
                    for i in 0..d {
                        old[i] = perms[i][new[i]];
                    }
                    *p = j.get(&old);
                }
                Some(JointTable::new(j.dims().to_vec(), probs)?)
            }
        };
        Ok(DistributionSet {
            names: self.names.clone(),
            alphabets,
            marginals,
            pairwise,
            full_joint,
            n_samples: self.n_samples,
            smoothing_alpha: self.smoothing_alpha,
        })
    }

    /// Check every consistency invariant at tolerance `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let d = self.d();
        if d < 2 {
            return Err(Error::Validation("d >= 2 required".into()));
        }
        if self.marginals.len() != d || self.pairwise.len() != d {
            return Err(Error::Validation("marginal/pairwise count differs from d".into()));
        }
        for (i, m) in self.marginals.iter().enumerate() {
            if m.len() != self.alphabets[i].size() {
                return Err(Error::Validation(format!("marginal {i} has wrong length")));
            }
            if m.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(Error::Validation(format!("marginal {i} has a negative entry")));
            }
            let s: f64 = m.iter().sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::Validation(format!("marginal {i} sums to {s}")));
            }
        }
        for i in 0..d {
            if self.pairwise[i].len() != d {
                return Err(Error::Validation("pairwise array is not d x d".into()));
            }
            for j in 0..d {
                let t = &self.pairwise[i][j];
                if t.nrows() != self.marginals[i].len() || t.ncols() != self.marginals[j].len() {
                    return Err(Error::Validation(format!("pairwise ({i},{j}) has wrong shape")));
                }
                if t.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                    return Err(Error::Validation(format!("pairwise ({i},{j}) has a negative entry")));
                }
                let s = t.sum();
                if (s - 1.0).abs() > tol {
                    return Err(Error::Validation(format!("pairwise ({i},{j}) sums to {s}")));
                }
                for (a, &pa) in self.marginals[i].iter().enumerate() {
                    if (t.row(a).sum() - pa).abs() > tol {
                        return Err(Error::Validation(format!("pairwise ({i},{j}) row {a} disagrees with marginal")));
                    }
                }
                for (b, &pb) in self.marginals[j].iter().enumerate() {
                    if (t.column(b).sum() - pb).abs() > tol {
                        return Err(Error::Validation(format!("pairwise ({i},{j}) column {b} disagrees with marginal")));
                    }
                }
                if (t - self.pairwise[j][i].transpose()).amax() > tol {
                    return Err(Error::Validation(format!("pairwise ({i},{j}) is not the transpose of ({j},{i})")));
                }
                if i == j {
                    for a in 0..t.nrows() {
                        for b in 0..t.ncols() {
                            let want = if a == b { self.marginals[i][a] } else { 0.0 };
                            if (t[(a, b)] - want).abs() > tol {
                                return Err(Error::Validation(format!("pairwise ({i},{i}) is not diag(marginal)")));
                            }
                        }
                    }
                }
            }
        }
        if let Some(joint) = &self.full_joint {
            if (joint.sum() - 1.0).abs() > tol {
                return Err(Error::Validation(format!("full joint sums to {}", joint.sum())));
            }
            for i in 0..d {
                for j in i + 1..d {
                    let pij = joint.marginalize(&[i, j]);
                    let t = &self.pairwise[i][j];
                    for a in 0..t.nrows() {
                        for b in 0..t.ncols() {
                            if (pij.get(&[a, b]) - t[(a, b)]).abs() > tol {
                                return Err(Error::Validation(format!(
                                    "full joint does not reproduce pairwise ({i},{j})"
                                )));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_export(&self) -> DistributionExport {
        DistributionExport {
            alphabets: self
                .names
                .iter()
                .zip(&self.alphabets)
                .map(|(n, a)| AlphabetExport {
                    name: n.clone(),
                    symbols: a.symbols().to_vec(),
                })
                .collect(),
            marginals: self.marginals.clone(),
            pairwise: self
                .pairwise
                .iter()
                .map(|row| row.iter().map(matrix_rows).collect())
                .collect(),
            metadata: DistributionMetadata {
                n: self.n_samples,
                d: self.d(),
                smoothing_alpha: self.smoothing_alpha,
                alphabet_order: "first-appearance".into(),
            },
        }
    }

    /// Rebuild from an export (marginals and pairwise tables only; no full joint).
    pub fn from_export(e: &DistributionExport) -> Result<Self> {
        let d = e.alphabets.len();
        if e.marginals.len() != d || e.pairwise.len() != d || e.pairwise.iter().any(|r| r.len() != d) {
            return Err(Error::format(None, "distribution export has inconsistent variable counts"));
        }
        let names = e.alphabets.iter().map(|a| a.name.clone()).collect();
        let alphabets = e
            .alphabets
            .iter()
            .map(|a| Alphabet::new(a.symbols.iter().cloned()))
            .collect::<Result<Vec<_>>>()?;
        let mut pairwise = Vec::with_capacity(d);
        for (i, row) in e.pairwise.iter().enumerate() {
            let mut out = Vec::with_capacity(d);
            for (j, rows) in row.iter().enumerate() {
                let (ni, nj) = (alphabets[i].size(), alphabets[j].size());
                if rows.len() != ni || rows.iter().any(|r| r.len() != nj) {
                    return Err(Error::format(None, format!("pairwise table ({i},{j}) should be {ni}x{nj}")));
                }
                out.push(DMatrix::from_fn(ni, nj, |a, b| rows[a][b]));
            }
            pairwise.push(out);
        }
        let mut dist = Self::from_parts(names, alphabets, e.marginals.clone(), pairwise)?;
        dist.n_samples = e.metadata.n;
        dist.smoothing_alpha = e.metadata.smoothing_alpha;
        Ok(dist)
    }
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphabetExport {
    pub name: String,
    pub symbols: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistributionMetadata {
    pub n: Option<usize>,
    pub d: usize,
    pub smoothing_alpha: f64,
    pub alphabet_order: String,
}

/// JSON form of a [`DistributionSet`]; pairwise tables are row-major nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistributionExport {
    pub alphabets: Vec<AlphabetExport>,
    pub marginals: Vec<Vec<f64>>,
    pub pairwise: Vec<Vec<Vec<Vec<f64>>>>,
    pub metadata: DistributionMetadata,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds_from(rows: &[[usize; 2]]) -> DiscreteDataset {
        let a = Alphabet::indexed(2).unwrap();
        DiscreteDataset::new(
            vec!["A".into(), "B".into()],
            vec![a.clone(), a],
            rows.iter().map(|r| r.to_vec()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn alphabet_roundtrip_and_duplicates() {
        let a = Alphabet::new(["x", "y", "z"]).unwrap();
        for i in 0..a.size() {
            assert_eq!(a.index_of(a.symbol(i).unwrap()), Some(i));
        }
        assert!(Alphabet::new(["x", "x"]).is_err());
        assert!(Alphabet::new(Vec::<String>::new()).is_err());
    }

    #[test]
    fn csv_three_columns() {
        let text = "A,B,C\na,x,1\nb,x,1\na,y,0\n";
        let ds = read_csv(text.as_bytes(), &CsvOptions::default()).unwrap();
        assert_eq!(ds.d(), 3);
        assert_eq!(ds.n(), 3);
        let sizes: Vec<usize> = ds.alphabets().iter().map(Alphabet::size).collect();
        assert_eq!(sizes, vec![2, 2, 2]);
        assert_eq!(ds.alphabets()[2].symbols(), &["1".to_string(), "0".to_string()]);
        assert_eq!(ds.decode(2, 1), "y");
    }

    #[test]
    fn csv_single_column_rejected() {
        let err = read_csv("A\na\nb\n".as_bytes(), &CsvOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
        assert!(err.to_string().contains("d >= 2"));
    }

    #[test]
    fn csv_ragged_row_names_the_row() {
        let err = read_csv("A,B,C\na,x,1\nb,x\n".as_bytes(), &CsvOptions::default()).unwrap_err();
        match err {
            Error::Format { row, .. } => assert_eq!(row, Some(3)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn csv_empty_and_header_only() {
        assert!(matches!(
            read_csv("".as_bytes(), &CsvOptions::default()),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            read_csv("A,B\n".as_bytes(), &CsvOptions::default()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn csv_delimiter_and_no_header() {
        let opts = CsvOptions {
            delimiter: b';',
            has_header: false,
        };
        let ds = read_csv("a;b\nc;d\n".as_bytes(), &opts).unwrap();
        assert_eq!(ds.names(), &["X1".to_string(), "X2".to_string()]);
        assert_eq!(ds.n(), 2);
    }

    #[test]
    fn counting_estimates() {
        let ds = ds_from(&[[0, 0], [0, 0], [1, 1], [1, 0]]);
        let dist = estimate_distributions(&ds, &EstimateOptions::default()).unwrap();
        assert_eq!(dist.marginal(0), &[0.5, 0.5]);
        assert_eq!(dist.marginal(1), &[0.75, 0.25]);
        assert_eq!(dist.pairwise(0, 1)[(0, 0)], 0.5);
        dist.validate(1e-12).unwrap();
    }

    #[test]
    fn single_sample_is_point_mass() {
        let a = Alphabet::new(["only"]).unwrap();
        let ds = DiscreteDataset::new(vec!["A".into(), "B".into()], vec![a.clone(), a], vec![vec![0, 0]]).unwrap();
        let dist = estimate_distributions(&ds, &EstimateOptions { with_full_joint: true, ..Default::default() }).unwrap();
        assert_eq!(dist.marginal(0), &[1.0]);
        dist.validate(1e-12).unwrap();
    }

    #[test]
    fn full_joint_capacity() {
        let a = Alphabet::indexed(100).unwrap();
        let row: Vec<usize> = vec![0; 4];
        let ds = DiscreteDataset::new(
            (0..4).map(|i| format!("V{i}")).collect(),
            vec![a.clone(), a.clone(), a.clone(), a],
            vec![row],
        )
        .unwrap();
        let err = estimate_distributions(&ds, &EstimateOptions { with_full_joint: true, ..Default::default() })
            .unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
        assert!(err.to_string().contains("omit the full joint"));
    }

    #[test]
    fn smoothing_keeps_consistency() {
        let ds = ds_from(&[[0, 0], [0, 0], [1, 1]]);
        let dist = estimate_distributions(
            &ds,
            &EstimateOptions {
                with_full_joint: true,
                smoothing_alpha: 0.5,
                ..Default::default()
            },
        )
        .unwrap();
        dist.validate(1e-12).unwrap();
        // (2 + 0.5*2) / (3 + 0.5*4)
        assert!((dist.marginal(0)[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn from_joint_examples() {
        let bit = Alphabet::indexed(2).unwrap();
        let uni = from_joint(vec![bit.clone(), bit.clone()], JointTable::new(vec![2, 2], vec![0.25; 4]).unwrap())
            .unwrap();
        assert_eq!(uni.marginal(0), &[0.5, 0.5]);
        assert!(uni.pairwise(0, 1).iter().all(|&p| p == 0.25));

        let dsbs = from_joint(
            vec![bit.clone(), bit.clone()],
            JointTable::new(vec![2, 2], vec![0.45, 0.05, 0.05, 0.45]).unwrap(),
        )
        .unwrap();
        // 0.45 + 0.05 by hand
        assert!((dsbs.marginal(0)[0] - 0.5).abs() < 1e-15);
        assert!((dsbs.marginal(1)[1] - 0.5).abs() < 1e-15);

        let bad = from_joint(vec![bit.clone(), bit], JointTable::new(vec![2, 2], vec![0.3; 4]).unwrap());
        match bad {
            Err(Error::Validation(msg)) => assert!(msg.contains("1.2")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn product_joint_pairwise_is_outer_product() {
        let p = [0.2, 0.8];
        let q = [0.1, 0.3, 0.6];
        let probs: Vec<f64> = p.iter().flat_map(|a| q.iter().map(move |b| a * b)).collect();
        let dist = from_joint(
            vec![Alphabet::indexed(2).unwrap(), Alphabet::indexed(3).unwrap()],
            JointTable::new(vec![2, 3], probs).unwrap(),
        )
        .unwrap();
        for a in 0..2 {
            for b in 0..3 {
                assert_eq!(dist.pairwise(0, 1)[(a, b)], p[a] * q[b]);
            }
        }
    }

    #[test]
    fn marginalize_with_repeats_is_diagonal() {
        let j = JointTable::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let r = j.marginalize(&[0, 0]);
        assert_eq!(r.probs(), &[0.30000000000000004, 0.0, 0.0, 0.7]);
    }

    #[test]
    fn export_and_csv_round_trip() {
        let ds = DiscreteDataset::from_string_rows(
            vec!["a".into(), "b".into()],
            &[vec!["x", "1"], vec!["y", "1"], vec!["x", "0"], vec!["x", "1"]],
        )
        .unwrap();
        let dist = estimate_distributions(&ds, &EstimateOptions::default()).unwrap();
        let back = DistributionSet::from_export(&dist.to_export()).unwrap();
        assert_eq!(back.marginals(), dist.marginals());
        assert_eq!(back.pairwise(0, 1), dist.pairwise(0, 1));
        assert_eq!(back.n_samples(), Some(4));

        let mut buf = Vec::new();
        write_csv(&ds, &mut buf, b',').unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "a,b\nx,1\ny,1\nx,0\nx,1\n");
        let again = read_csv(buf.as_slice(), &CsvOptions::default()).unwrap();
        assert_eq!(again.rows().collect::<Vec<_>>(), ds.rows().collect::<Vec<_>>());
    }
}
