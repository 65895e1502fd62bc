//! Multivariate alternating conditional expectations: power iteration on `B`
//! written as conditional-expectation updates of feature tables, with
//! sequential Gram-Schmidt deflation for several columns.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::dataset::DistributionSet;
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::spectral;

#[derive(Debug, Clone, Serialize)]
pub struct MaceConfig {
    pub max_iters: usize,
    /// Stop once `|obj_t - obj_{t-1}| <= rel_tol * max(|obj_t|, 1)`.
    pub rel_tol: f64,
    pub seed: u64,
    pub k: usize,
    pub reorthogonalize_every: usize,
}

impl Default for MaceConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            rel_tol: 1e-9,
            seed: 0,
            k: 1,
            reorthogonalize_every: 1,
        }
    }
}

impl MaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Validation("max_iters must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::Validation("rel_tol must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::Validation("k must be at least 1".into()));
        }
        if self.reorthogonalize_every == 0 {
            return Err(Error::Validation("reorthogonalize_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Objective curve of one column.
#[derive(Debug, Clone, Serialize)]
pub struct MaceTrace {
    pub objective: Vec<f64>,
    pub converged: bool,
    pub iters_used: usize,
    pub seed: u64,
    /// Order of the final Gram-Schmidt and normalization steps.
    pub final_step: &'static str,
}

/// `f_i <- f_i + sum_{j != i} E[f_j(X_j) | X_i]`, from the pairwise tables.
pub fn conditional_expectation_step(fs: &FeatureSet, dist: &DistributionSet) -> Result<FeatureSet> {
    fs.check_shape(dist)?;
    let d = dist.d();
    let tables: Vec<DMatrix<f64>> = (0..d)
        .map(|i| {
            let mut acc = DMatrix::zeros(fs.table(i).nrows(), fs.k());
            for j in (0..d).filter(|&j| j != i) {
                acc += dist.pairwise(i, j) * fs.table(j);
            }
            for (a, p) in dist.marginal(i).iter().enumerate() {
                acc.row_mut(a).scale_mut(1.0 / p);
            }
            acc + fs.table(i)
        })
        .collect();
    Ok(FeatureSet::for_dist(dist, tables)?.with_hint(fs.eigenvalues_hint().map(<[f64]>::to_vec))?)
}

fn column_norm_sq(fs: &FeatureSet, dist: &DistributionSet, l: usize) -> f64 {
    (0..fs.d())
        .map(|i| {
            dist.marginal(i)
                .iter()
                .zip(fs.table(i).column(l).iter())
                .map(|(p, f)| p * f * f)
                .sum::<f64>()
        })
        .sum()
}

/// Scale every column so that `sum_i E[f_i^2] = 1`.
pub fn normalize(fs: &FeatureSet, dist: &DistributionSet) -> Result<FeatureSet> {
    fs.check_shape(dist)?;
    let mut out = fs.clone();
    for l in 0..fs.k() {
        let n2 = column_norm_sq(fs, dist, l);
        if !(n2 > 0.0) || !n2.is_finite() {
            return Err(Error::DegenerateInit(format!(
                "column {l} has zero norm; re-seed the initialization"
            )));
        }
        let s = 1.0 / n2.sqrt();
        for t in out.tables_mut() {
            t.column_mut(l).scale_mut(s);
        }
    }
    Ok(out)
}

/// `E[sum_{i != j} f_i^(l) f_j^(l)]` for every column.
pub fn joint_correlation(fs: &FeatureSet, dist: &DistributionSet) -> Result<Vec<f64>> {
    fs.check_shape(dist)?;
    let d = dist.d();
    Ok((0..fs.k())
        .map(|l| {
            let mut s = 0.0;
            for i in 0..d {
                let fi = fs.table(i).column(l);
                for j in (0..d).filter(|&j| j != i) {
                    s += fi.dot(&(dist.pairwise(i, j) * fs.table(j).column(l)));
                }
            }
            s
        })
        .collect())
}

/// Working representation of one column: stacked tables, weighted by marginals.
struct Column {
    f: Vec<DVector<f64>>,
}

impl Column {
    fn inner(&self, other: &Column, dist: &DistributionSet) -> f64 {
        self.f
            .iter()
            .zip(&other.f)
            .enumerate()
            .map(|(i, (a, b))| {
                dist.marginal(i)
                    .iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(p, (x, y))| p * x * y)
                    .sum::<f64>()
            })
            .sum()
    }

    fn center(&mut self, dist: &DistributionSet) {
        for (i, f) in self.f.iter_mut().enumerate() {
            let mean: f64 = dist.marginal(i).iter().zip(f.iter()).map(|(p, x)| p * x).sum();
            f.add_scalar_mut(-mean);
        }
    }

    fn normalize(&mut self, dist: &DistributionSet) -> Result<()> {
        let n = self.inner(self, dist).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::DegenerateInit("iterate collapsed to zero; re-seed".into()));
        }
        self.f.iter_mut().for_each(|f| f.scale_mut(1.0 / n));
        Ok(())
    }

    /// Remove components along previously fitted (orthonormal) columns.
    fn project_out(&mut self, prev: &[Column], dist: &DistributionSet) {
        for q in prev {
            let c = self.inner(q, dist);
            for (f, g) in self.f.iter_mut().zip(&q.f) {
                f.axpy(-c, g, 1.0);
            }
        }
    }

    fn step(&self, dist: &DistributionSet) -> Column {
        let d = dist.d();
        let f = (0..d)
            .map(|i| {
                let mut acc = DVector::zeros(self.f[i].len());
                for j in (0..d).filter(|&j| j != i) {
                    acc += dist.pairwise(i, j) * &self.f[j];
                }
                for (a, p) in dist.marginal(i).iter().enumerate() {
                    acc[a] /= p;
                }
                acc + &self.f[i]
            })
            .collect();
        Column { f }
    }

    fn objective(&self, dist: &DistributionSet) -> f64 {
        let d = dist.d();
        let mut s = 0.0;
        for i in 0..d {
            for j in (0..d).filter(|&j| j != i) {
                s += self.f[i].dot(&(dist.pairwise(i, j) * &self.f[j]));
            }
        }
        s
    }
}

fn fit_column(dist: &DistributionSet, cfg: &MaceConfig, prev: &[Column], seed: u64) -> Result<(Column, MaceTrace)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut col = Column {
        f: dist
            .dims()
            .iter()
            .map(|&s| DVector::from_iterator(s, (0..s).map(|_| StandardNormal.sample(&mut rng))))
            .collect(),
    };
    col.center(dist);
    col.project_out(prev, dist);
    col.normalize(dist)?;

    let mut objective = Vec::with_capacity(cfg.max_iters.min(4096));
    let mut last = col.objective(dist);
    let mut converged = false;
    let mut iters = 0;
    for t in 1..=cfg.max_iters {
        col = col.step(dist);
        col.center(dist);
        if t % cfg.reorthogonalize_every == 0 {
            col.project_out(prev, dist);
        }
        col.normalize(dist)?;
        let obj = col.objective(dist);
        objective.push(obj);
        iters = t;
        if (obj - last).abs() <= cfg.rel_tol * obj.abs().max(1.0) {
            converged = true;
            break;
        }
        last = obj;
    }
    // project, then renormalize the final iterate
    col.project_out(prev, dist);
    col.normalize(dist)?;
    if let Some(o) = objective.last_mut() {
        *o = col.objective(dist);
    }
    Ok((
        col,
        MaceTrace {
            objective,
            converged,
            iters_used: iters,
            seed,
            final_step: "project-then-normalize",
        },
    ))
}

fn check_k(dist: &DistributionSet, k: usize) -> Result<()> {
    let max_k = dist.total_dim() - dist.d();
    if k == 0 || k > max_k {
        return Err(Error::Domain(format!("k = {k} must lie in 1..=m-d = {max_k}")));
    }
    Ok(())
}

fn assemble(dist: &DistributionSet, cols: &[Column], objectives: Vec<f64>) -> Result<FeatureSet> {
    let k = cols.len();
    let tables = (0..dist.d())
        .map(|i| DMatrix::from_fn(dist.dims()[i], k, |a, l| cols[l].f[i][a]))
        .collect();
    // the objective plus one is the Rayleigh quotient, i.e. the eigenvalue estimate
    FeatureSet::for_dist(dist, tables)?.with_hint(Some(objectives.iter().map(|o| o + 1.0).collect()))
}

/// Single-column MACE; `cfg.k` must be 1.
pub fn mace_fit(dist: &DistributionSet, cfg: &MaceConfig) -> Result<(FeatureSet, MaceTrace)> {
    cfg.validate()?;
    if cfg.k != 1 {
        return Err(Error::Domain(format!("mace_fit fits one column, got k = {}", cfg.k)));
    }
    let (fs, mut traces) = mace_fit_k(dist, cfg)?;
    Ok((fs, traces.remove(0)))
}

/// Sequential top-`k` MACE with Gram-Schmidt against earlier columns. Column
/// `l` is seeded with `seed + l`.
pub fn mace_fit_k(dist: &DistributionSet, cfg: &MaceConfig) -> Result<(FeatureSet, Vec<MaceTrace>)> {
    cfg.validate()?;
    check_k(dist, cfg.k)?;
    let mut cols: Vec<Column> = Vec::with_capacity(cfg.k);
    let mut traces = Vec::with_capacity(cfg.k);
    let mut objectives = Vec::with_capacity(cfg.k);
    for l in 0..cfg.k {
        let (col, trace) = fit_column(dist, cfg, &cols, cfg.seed.wrapping_add(l as u64))?;
        objectives.push(col.objective(dist));
        cols.push(col);
        traces.push(trace);
    }
    Ok((assemble(dist, &cols, objectives)?, traces))
}

/// HGR maximal correlation of a two-variable distribution: the second singular
/// value of the normalized cross block.
pub fn hgr_maximal_correlation(dist: &DistributionSet) -> Result<f64> {
    if dist.d() != 2 {
        return Err(Error::Domain(format!("HGR maximal correlation needs d = 2, got {}", dist.d())));
    }
    let b = spectral::build_b(dist)?;
    let mut sv: Vec<f64> = b.block(0, 1).svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv.get(1).copied().unwrap_or(0.0))
}

/// `(lambda^(1) - 1) / (d - 1)`: zero exactly when the variables are pairwise independent.
pub fn generalized_maximal_correlation(dist: &DistributionSet) -> Result<f64> {
    let d = dist.d();
    if dist.total_dim() == d {
        return Ok(0.0);
    }
    let lambda1 = if dist.total_dim() <= spectral::dense_cap() {
        let spec = spectral::eigendecompose(&spectral::build_b(dist)?)?;
        spec.eigenvalues()[1]
    } else {
        let (_, trace) = mace_fit(dist, &MaceConfig::default())?;
        1.0 + trace.objective.last().copied().unwrap_or(0.0)
    };
    Ok((lambda1 - 1.0) / (d - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bits::{bits_joint, BitsInstance};
    use crate::instances::{dsbs, product};
    use crate::spectral::{build_b, eigendecompose, features_from_spectrum};
    use approx::assert_relative_eq;

    #[test]
    fn eigen_feature_is_fixed_point() {
        let dist = dsbs(0.1).unwrap();
        let spec = eigendecompose(&build_b(&dist).unwrap()).unwrap();
        let fs = features_from_spectrum(&spec, &dist, 1).unwrap();
        let next = conditional_expectation_step(&fs, &dist).unwrap();
        for i in 0..2 {
            for a in 0..2 {
                assert_relative_eq!(next.table(i)[(a, 0)], 1.8 * fs.table(i)[(a, 0)], epsilon = 1e-12);
            }
        }
        let zero = FeatureSet::zeros(&dist, 2);
        let z = conditional_expectation_step(&zero, &dist).unwrap();
        assert!(z.tables().iter().all(|t| t.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn two_variable_step_is_ace() {
        let dist = dsbs(0.3).unwrap();
        let f1 = DMatrix::from_column_slice(2, 1, &[1.0, -2.0]);
        let f2 = DMatrix::from_column_slice(2, 1, &[0.5, 3.0]);
        let fs = FeatureSet::for_dist(&dist, vec![f1.clone(), f2.clone()]).unwrap();
        let out = conditional_expectation_step(&fs, &dist).unwrap();
        // E[f2 | X1 = 0] = 0.7 * 0.5 + 0.3 * 3
        assert_relative_eq!(out.table(0)[(0, 0)], 1.0 + 0.7 * 0.5 + 0.3 * 3.0, epsilon = 1e-14);
        assert_relative_eq!(out.table(1)[(1, 0)], 3.0 + 0.3 * 1.0 + 0.7 * -2.0, epsilon = 1e-14);
    }

    #[test]
    fn normalize_cases() {
        let dist = dsbs(0.1).unwrap();
        let t = DMatrix::from_column_slice(2, 1, &[2.0, -2.0]);
        let fs = FeatureSet::for_dist(&dist, vec![t.clone(), t]).unwrap();
        // sum_i E[f_i^2] = 8, so the scale is 1/sqrt(8)
        let n = normalize(&fs, &dist).unwrap();
        assert_relative_eq!(n.table(0)[(0, 0)], 2.0 / 8f64.sqrt(), epsilon = 1e-15);
        let again = normalize(&n, &dist).unwrap();
        assert!((again.table(1) - n.table(1)).amax() < 1e-12);
        assert!(matches!(
            normalize(&FeatureSet::zeros(&dist, 1), &dist),
            Err(Error::DegenerateInit(_))
        ));
    }

    #[test]
    fn dsbs_objective() {
        let dist = dsbs(0.1).unwrap();
        let (fs, trace) = mace_fit(&dist, &MaceConfig::default()).unwrap();
        assert!(trace.converged);
        assert_relative_eq!(*trace.objective.last().unwrap(), 0.8, epsilon = 1e-9);
        assert_relative_eq!(joint_correlation(&fs, &dist).unwrap()[0], 0.8, epsilon = 1e-9);
        assert!(fs.check(&dist).passed());
    }

    #[test]
    fn triangle_columns() {
        let dist = bits_joint(&BitsInstance::triangle()).unwrap();
        let cfg = MaceConfig {
            k: 6,
            max_iters: 2000,
            rel_tol: 1e-12,
            ..Default::default()
        };
        let (fs, _) = mace_fit_k(&dist, &cfg).unwrap();
        let obj = joint_correlation(&fs, &dist).unwrap();
        for (o, w) in obj.iter().zip([1.0, 1.0, 1.0, 0.0, 0.0, 0.0]) {
            assert!((o - w).abs() < 1e-6, "{obj:?}");
        }
        assert!(fs.check(&dist).passed());
        let err = mace_fit_k(&dist, &MaceConfig { k: 10, ..Default::default() }).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn product_has_zero_objective() {
        let dist = product(&[vec![0.3, 0.7], vec![0.2, 0.3, 0.5]]).unwrap();
        let (_, trace) = mace_fit(&dist, &MaceConfig::default()).unwrap();
        assert!(trace.objective.last().unwrap().abs() < 1e-6);
    }

    #[test]
    fn correlation_measures() {
        for p in [0.05, 0.1, 0.25] {
            let dist = dsbs(p).unwrap();
            let h = hgr_maximal_correlation(&dist).unwrap();
            assert_relative_eq!(h, 1.0 - 2.0 * p, epsilon = 1e-12);
            assert!((generalized_maximal_correlation(&dist).unwrap() - h).abs() < 1e-12);
        }
        let tri = bits_joint(&BitsInstance::triangle()).unwrap();
        assert_relative_eq!(generalized_maximal_correlation(&tri).unwrap(), 0.5, epsilon = 1e-12);
        let copy = bits_joint(&BitsInstance::new(1, vec![vec![1], vec![1]]).unwrap()).unwrap();
        assert_relative_eq!(hgr_maximal_correlation(&copy).unwrap(), 1.0, epsilon = 1e-12);
    }
}
