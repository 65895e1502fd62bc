//! Per-variable feature tables `f_i^(l): X_i -> R` and their inner products
//! under a [`DistributionSet`].

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{Alphabet, DistributionSet};
use crate::error::{Error, Result};

/// Tolerance on `|E[f_i^(l)]|` for the zero-mean invariant.
pub const MEAN_TOL: f64 = 1e-8;
/// Tolerance on `sum_i E[f_i f_i^T] = I_k`.
pub const ORTHONORMAL_TOL: f64 = 1e-6;

/// `k` functions per variable, stored as `|X_i| x k` lookup tables.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    names: Vec<String>,
    alphabets: Vec<Alphabet>,
    tables: Vec<DMatrix<f64>>,
    eigenvalues_hint: Option<Vec<f64>>,
}

/// Measured deviations from the [`FeatureSet`] invariants.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FeatureCheck {
    pub max_abs_mean: f64,
    pub orthonormality_error: f64,
}

impl FeatureCheck {
    pub fn passed(&self) -> bool {
        self.max_abs_mean <= MEAN_TOL && self.orthonormality_error <= ORTHONORMAL_TOL
    }
}

impl FeatureSet {
    pub fn new(
        names: Vec<String>,
        alphabets: Vec<Alphabet>,
        tables: Vec<DMatrix<f64>>,
        eigenvalues_hint: Option<Vec<f64>>,
    ) -> Result<Self> {
        if names.len() != alphabets.len() || tables.len() != alphabets.len() {
            return Err(Error::Domain("one name, alphabet and table per variable is required".into()));
        }
        let k = tables.first().map(|t| t.ncols()).unwrap_or(0);
        for (i, (t, a)) in tables.iter().zip(&alphabets).enumerate() {
            if t.nrows() != a.size() || t.ncols() != k {
                return Err(Error::Domain(format!(
                    "table {i} is {}x{}, expected {}x{k}",
                    t.nrows(),
                    t.ncols(),
                    a.size()
                )));
            }
        }
        if let Some(h) = &eigenvalues_hint {
            if h.len() != k {
                return Err(Error::Domain(format!("eigenvalue hint has {} entries, expected {k}", h.len())));
            }
        }
        Ok(Self {
            names,
            alphabets,
            tables,
            eigenvalues_hint,
        })
    }

    /// Feature tables laid out on the alphabets of `dist`.
    pub fn for_dist(dist: &DistributionSet, tables: Vec<DMatrix<f64>>) -> Result<Self> {
        Self::new(dist.names().to_vec(), dist.alphabets().to_vec(), tables, None)
    }

    pub fn zeros(dist: &DistributionSet, k: usize) -> Self {
        let tables = dist.dims().iter().map(|&s| DMatrix::zeros(s, k)).collect();
        Self::for_dist(dist, tables).expect("shapes match by construction")
    }

    pub fn k(&self) -> usize {
        self.tables.first().map(|t| t.ncols()).unwrap_or(0)
    }

    pub fn d(&self) -> usize {
        self.tables.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn alphabets(&self) -> &[Alphabet] {
        &self.alphabets
    }

    pub fn table(&self, i: usize) -> &DMatrix<f64> {
        &self.tables[i]
    }

    pub fn tables(&self) -> &[DMatrix<f64>] {
        &self.tables
    }

    pub fn into_tables(self) -> Vec<DMatrix<f64>> {
        self.tables
    }

    pub(crate) fn tables_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.tables
    }

    pub fn eigenvalues_hint(&self) -> Option<&[f64]> {
        self.eigenvalues_hint.as_deref()
    }

    pub fn with_hint(mut self, hint: Option<Vec<f64>>) -> Result<Self> {
        if let Some(h) = &hint {
            if h.len() != self.k() {
                return Err(Error::Domain("hint length differs from k".into()));
            }
        }
        self.eigenvalues_hint = hint;
        Ok(self)
    }

    /// Keep only the listed columns.
    pub fn columns(&self, cols: &[usize]) -> Result<Self> {
        if let Some(&c) = cols.iter().find(|&&c| c >= self.k()) {
            return Err(Error::Domain(format!("column {c} out of range (k = {})", self.k())));
        }
        let tables = self.tables.iter().map(|t| t.select_columns(cols)).collect();
        let hint = self
            .eigenvalues_hint
            .as_ref()
            .map(|h| cols.iter().map(|&c| h[c]).collect());
        Self::new(self.names.clone(), self.alphabets.clone(), tables, hint)
    }

    pub(crate) fn check_shape(&self, dist: &DistributionSet) -> Result<()> {
        if self.d() != dist.d() || self.tables.iter().zip(dist.dims()).any(|(t, s)| t.nrows() != s) {
            return Err(Error::Domain("feature tables do not match the distribution's alphabets".into()));
        }
        Ok(())
    }

    /// `d x k` matrix of means `E[f_i^(l)(X_i)]`.
    pub fn means(&self, dist: &DistributionSet) -> DMatrix<f64> {
        let k = self.k();
        DMatrix::from_fn(self.d(), k, |i, l| {
            dist.marginal(i)
                .iter()
                .zip(self.tables[i].column(l).iter())
                .map(|(p, f)| p * f)
                .sum()
        })
    }

    /// `sum_i E[f_i f_i^T]`, the `k x k` joint Gram matrix.
    pub fn gram(&self, dist: &DistributionSet) -> DMatrix<f64> {
        let k = self.k();
        let mut g = DMatrix::zeros(k, k);
        for (i, t) in self.tables.iter().enumerate() {
            let w = DMatrix::from_diagonal(&DVector::from_column_slice(dist.marginal(i)));
            g += t.transpose() * w * t;
        }
        g
    }

    pub fn check(&self, dist: &DistributionSet) -> FeatureCheck {
        let max_abs_mean = self.means(dist).amax();
        let k = self.k();
        let orthonormality_error = (self.gram(dist) - DMatrix::<f64>::identity(k, k)).amax();
        FeatureCheck {
            max_abs_mean,
            orthonormality_error,
        }
    }

    /// Stack `sqrt(P_i) f_i` into an `m x k` matrix (the vector form of the features).
    pub fn to_psi(&self, dist: &DistributionSet) -> DMatrix<f64> {
        let m = dist.total_dim();
        let mut psi = DMatrix::zeros(m, self.k());
        let mut off = 0;
        for (i, t) in self.tables.iter().enumerate() {
            for (a, p) in dist.marginal(i).iter().enumerate() {
                let s = p.sqrt();
                for l in 0..t.ncols() {
                    psi[(off + a, l)] = s * t[(a, l)];
                }
            }
            off += t.nrows();
        }
        psi
    }

    /// Inverse of [`FeatureSet::to_psi`]: `f_i(x) = psi_i(x) / sqrt(P_i(x))`.
    pub fn from_psi(dist: &DistributionSet, psi: &DMatrix<f64>) -> Result<Self> {
        if psi.nrows() != dist.total_dim() {
            return Err(Error::Domain("vector length differs from m".into()));
        }
        let mut off = 0;
        let mut tables = Vec::with_capacity(dist.d());
        for i in 0..dist.d() {
            let p = dist.marginal(i);
            if p.iter().any(|&x| x <= 0.0) {
                return Err(Error::Domain(format!("variable {i} has a zero-probability symbol")));
            }
            tables.push(DMatrix::from_fn(p.len(), psi.ncols(), |a, l| psi[(off + a, l)] / p[a].sqrt()));
            off += p.len();
        }
        Self::for_dist(dist, tables)
    }

    /// Evaluate `sum_i f_i^(l)(x_i)` for a sample given as alphabet indices.
    pub fn sum_at(&self, x: &[usize], l: usize) -> f64 {
        self.tables.iter().zip(x).map(|(t, &a)| t[(a, l)]).sum()
    }

    pub fn to_export(&self) -> FeatureSetExport {
        let k = self.k();
        let variables = self
            .names
            .iter()
            .zip(&self.alphabets)
            .zip(&self.tables)
            .map(|((name, alpha), t)| VariableFeatures {
                name: name.clone(),
                symbols: alpha.symbols().to_vec(),
                table: alpha
                    .symbols()
                    .iter()
                    .enumerate()
                    .map(|(a, s)| (s.clone(), (0..k).map(|l| t[(a, l)]).collect()))
                    .collect(),
            })
            .collect();
        FeatureSetExport {
            k,
            variables,
            eigenvalues_hint: self.eigenvalues_hint.clone(),
            alphabet_order: "first-appearance".into(),
        }
    }

    pub fn from_export(e: &FeatureSetExport) -> Result<Self> {
        let mut names = Vec::new();
        let mut alphabets = Vec::new();
        let mut tables = Vec::new();
        for v in &e.variables {
            let alpha = Alphabet::new(v.symbols.iter().cloned())?;
            let mut t = DMatrix::zeros(alpha.size(), e.k);
            for (a, sym) in alpha.symbols().iter().enumerate() {
                let row = v.table.get(sym).ok_or_else(|| {
                    Error::format(None, format!("variable {}: no table row for symbol {sym:?}", v.name))
                })?;
                if row.len() != e.k {
                    return Err(Error::format(
                        None,
                        format!("variable {}: row {sym:?} has {} values, expected {}", v.name, row.len(), e.k),
                    ));
                }
                for (l, &x) in row.iter().enumerate() {
                    t[(a, l)] = x;
                }
            }
            names.push(v.name.clone());
            alphabets.push(alpha);
            tables.push(t);
        }
        Self::new(names, alphabets, tables, e.eigenvalues_hint.clone())
    }

    /// Re-express the tables on the alphabets of `dist`, matching symbols by name.
    pub fn aligned_to(&self, dist: &DistributionSet) -> Result<Self> {
        if self.d() != dist.d() {
            return Err(Error::Domain(format!(
                "feature set has {} variables, distribution has {}",
                self.d(),
                dist.d()
            )));
        }
        let k = self.k();
        let mut tables = Vec::with_capacity(self.d());
        for (i, target) in dist.alphabets().iter().enumerate() {
            let mut t = DMatrix::zeros(target.size(), k);
            for (a, sym) in target.symbols().iter().enumerate() {
                let src = self.alphabets[i]
                    .index_of(sym)
                    .ok_or_else(|| Error::Domain(format!("variable {i}: symbol {sym:?} missing from features")))?;
                t.set_row(a, &self.tables[i].row(src));
            }
            tables.push(t);
        }
        Self::new(dist.names().to_vec(), dist.alphabets().to_vec(), tables, self.eigenvalues_hint.clone())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariableFeatures {
    pub name: String,
    pub symbols: Vec<String>,
    pub table: IndexMap<String, Vec<f64>>,
}

/// JSON form of a [`FeatureSet`]; per-variable tables are keyed by symbol string.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSetExport {
    pub k: usize,
    pub variables: Vec<VariableFeatures>,
    pub eigenvalues_hint: Option<Vec<f64>>,
    pub alphabet_order: String,
}
