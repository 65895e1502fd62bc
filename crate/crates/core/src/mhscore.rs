//! Pairwise and multivariate H-scores, the Frobenius identity linking them to
//! low-rank approximation of `B~`, and a gradient-ascent trainer over tabular
//! features.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::dataset::DistributionSet;
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::linalg;
use crate::spectral;

#[derive(Debug, Clone, Serialize)]
pub struct HTrainConfig {
    pub k: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for HTrainConfig {
    fn default() -> Self {
        Self {
            k: 1,
            steps: 5000,
            learning_rate: 0.05,
            seed: 0,
            init_scale: 0.1,
        }
    }
}

impl HTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Validation("steps must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation("learning_rate must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::Validation("k must be at least 1".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Validation("init_scale must be positive".into()));
        }
        Ok(())
    }
}

fn check_tables(tables: &[DMatrix<f64>], dist: &DistributionSet) -> Result<usize> {
    if tables.len() != dist.d() {
        return Err(Error::Domain(format!("{} tables for {} variables", tables.len(), dist.d())));
    }
    let k = tables.first().map(|t| t.ncols()).unwrap_or(0);
    for (i, t) in tables.iter().enumerate() {
        if t.nrows() != dist.dims()[i] || t.ncols() != k {
            return Err(Error::Domain(format!(
                "table {i} is {}x{}, expected {}x{k}",
                t.nrows(),
                t.ncols(),
                dist.dims()[i]
            )));
        }
    }
    Ok(k)
}

fn mean(t: &DMatrix<f64>, p: &[f64]) -> DVector<f64> {
    t.transpose() * DVector::from_column_slice(p)
}

fn second_moment(t: &DMatrix<f64>, p: &[f64]) -> DMatrix<f64> {
    let w = DMatrix::from_diagonal(&DVector::from_column_slice(p));
    t.transpose() * w * t
}

/// `E[f_i^T f_j] - E[f_i]^T E[f_j] - tr(E[f_i f_i^T] E[f_j f_j^T]) / 2`, with the
/// cross term taken from the pairwise table (diagonal when `i = j`).
pub fn h_score_pair(fi: &DMatrix<f64>, fj: &DMatrix<f64>, i: usize, j: usize, dist: &DistributionSet) -> Result<f64> {
    if i >= dist.d() || j >= dist.d() {
        return Err(Error::Domain("variable index out of range".into()));
    }
    if fi.nrows() != dist.dims()[i] || fj.nrows() != dist.dims()[j] || fi.ncols() != fj.ncols() {
        return Err(Error::Domain("table shapes do not match the alphabets".into()));
    }
    let (pi, pj) = (dist.marginal(i), dist.marginal(j));
    let cross = (fi.transpose() * dist.pairwise(i, j) * fj).trace();
    let mm = mean(fi, pi).dot(&mean(fj, pj));
    let tr = (second_moment(fi, pi) * second_moment(fj, pj)).trace();
    Ok(cross - mm - 0.5 * tr)
}

fn mh_score_tables(tables: &[DMatrix<f64>], dist: &DistributionSet) -> Result<f64> {
    let k = check_tables(tables, dist)?;
    let d = dist.d();
    let mut cross = 0.0;
    for i in 0..d {
        for j in 0..d {
            cross += (tables[i].transpose() * dist.pairwise(i, j) * &tables[j]).trace();
        }
    }
    let mut mu = DVector::zeros(k);
    let mut t = DMatrix::zeros(k, k);
    for (i, f) in tables.iter().enumerate() {
        mu += mean(f, dist.marginal(i));
        t += second_moment(f, dist.marginal(i));
    }
    Ok(cross - mu.norm_squared() - 0.5 * (&t * &t).trace())
}

/// `sum_i sum_j H(f_i, f_j)`, both orders and `i = j` included.
pub fn mh_score(fs: &FeatureSet, dist: &DistributionSet) -> Result<f64> {
    mh_score_tables(fs.tables(), dist)
}

/// Gradient of [`mh_score`] with respect to every table entry.
pub fn mh_gradient(tables: &[DMatrix<f64>], dist: &DistributionSet) -> Result<Vec<DMatrix<f64>>> {
    let k = check_tables(tables, dist)?;
    let d = dist.d();
    let mut mu = DVector::zeros(k);
    let mut t = DMatrix::zeros(k, k);
    for (i, f) in tables.iter().enumerate() {
        mu += mean(f, dist.marginal(i));
        t += second_moment(f, dist.marginal(i));
    }
    Ok((0..d)
        .map(|i| {
            let p = DVector::from_column_slice(dist.marginal(i));
            let mut g = DMatrix::zeros(dist.dims()[i], k);
            for j in 0..d {
                g += dist.pairwise(i, j) * &tables[j] * 2.0;
            }
            g -= &p * mu.transpose() * 2.0;
            let df = DMatrix::from_diagonal(&p) * &tables[i];
            g -= df * &t * 2.0;
            g
        })
        .collect())
}

/// Both sides of the Frobenius identity for the given tables.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MhIdentity {
    /// `||B~ - Psi Psi^T||_F^2`
    pub lhs: f64,
    /// `||B~||_F^2 - 2 H`
    pub rhs: f64,
    pub residual: f64,
}

/// Evaluate `||B~ - Psi Psi^T||^2` and `||B~||^2 - 2H` with `Psi_i = diag(sqrt(P_i)) F_i`.
pub fn mh_identity(fs: &FeatureSet, dist: &DistributionSet) -> Result<MhIdentity> {
    let b = spectral::build_b(dist)?;
    let bt = spectral::build_b_tilde(&b, dist)?;
    let psi = fs.to_psi(dist);
    let lhs = (bt.matrix() - &psi * psi.transpose()).norm_squared();
    let rhs = bt.matrix().norm_squared() - 2.0 * mh_score(fs, dist)?;
    Ok(MhIdentity {
        lhs,
        rhs,
        residual: (lhs - rhs).abs(),
    })
}

/// Residual `| ||B~ - Psi Psi^T||^2 - (||B~||^2 - 2H) |`.
pub fn check_mh_identity(fs: &FeatureSet, dist: &DistributionSet) -> Result<f64> {
    Ok(mh_identity(fs, dist)?.residual)
}

/// Largest attainable MH-score with `k` columns: half the sum of the top `k`
/// squared eigenvalues of `B~`.
pub fn mh_maximum(dist: &DistributionSet, k: usize) -> Result<f64> {
    let b = spectral::build_b(dist)?;
    let spec = spectral::eigendecompose(&spectral::build_b_tilde(&b, dist)?)?;
    Ok(0.5
        * spec
            .eigenvalues()
            .iter()
            .take(k)
            .map(|l| l.max(0.0).powi(2))
            .sum::<f64>())
}

/// Result of [`mh_train`].
#[derive(Debug, Clone)]
pub struct MhFit {
    /// Raw trained tables (not centered or normalized).
    pub tables: FeatureSet,
    /// Accepted MH-score after each step, starting with the initial value.
    pub curve: Vec<f64>,
    /// Step size after any halvings.
    pub final_learning_rate: f64,
}

/// Gradient ascent on the MH-score over all table entries. Steps are taken in
/// the `Psi` metric (the gradient for `F_i` is divided rowwise by `P_i`), and the
/// step size is halved whenever a step would lower the score.
pub fn mh_train(dist: &DistributionSet, cfg: &HTrainConfig) -> Result<MhFit> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.init_scale).map_err(|e| Error::Validation(e.to_string()))?;
    let mut tables: Vec<DMatrix<f64>> = dist
        .dims()
        .iter()
        .map(|&s| DMatrix::from_fn(s, cfg.k, |_, _| normal.sample(&mut rng)))
        .collect();
    let mut lr = cfg.learning_rate;
    let mut score = mh_score_tables(&tables, dist)?;
    let mut curve = Vec::with_capacity(cfg.steps + 1);
    curve.push(score);
    for _ in 0..cfg.steps {
        let grad = mh_gradient(&tables, dist)?;
        if grad.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(divergence(lr));
        }
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<DMatrix<f64>> = tables
                .iter()
                .zip(&grad)
                .enumerate()
                .map(|(i, (f, g))| {
                    let mut step = g.clone();
                    for (a, p) in dist.marginal(i).iter().enumerate() {
                        step.row_mut(a).scale_mut(lr / p);
                    }
                    f + step
                })
                .collect();
            let s = mh_score_tables(&trial, dist)?;
            if !s.is_finite() {
                return Err(divergence(lr));
            }
            if s >= score - 1e-14 * score.abs().max(1.0) {
                tables = trial;
                score = s.max(score);
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        curve.push(score);
        if !accepted {
            // no ascent direction left at machine precision
            break;
        }
    }
    Ok(MhFit {
        tables: FeatureSet::for_dist(dist, tables)?,
        curve,
        final_learning_rate: lr,
    })
}

fn divergence(lr: f64) -> Error {
    Error::Divergence(format!(
        "MH-score became non-finite at learning_rate {lr}; retry with a smaller learning_rate"
    ))
}

/// Center, whiten by the inverse square root of `sum_i E[f_i f_i^T]` (dropping
/// directions with vanishing variance), then rotate so that columns
/// diagonalize the quadratic form of `B` and are sorted by it, descending. The
/// eigenvalue hint holds those Rayleigh quotients.
pub fn whiten(fs: &FeatureSet, dist: &DistributionSet) -> Result<FeatureSet> {
    fs.check_shape(dist)?;
    let mut tables: Vec<DMatrix<f64>> = fs.tables().to_vec();
    for (i, t) in tables.iter_mut().enumerate() {
        let mu = mean(t, dist.marginal(i));
        for mut row in t.row_iter_mut() {
            row -= mu.transpose();
        }
    }
    let centered = FeatureSet::for_dist(dist, tables)?;
    let g = centered.gram(dist);
    let (vals, vecs) = linalg::sym_eigen_desc(&g);
    let top = vals.iter().copied().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..vals.len()).filter(|&c| vals[c] > 1e-10 * top.max(1e-300)).collect();
    if keep.is_empty() {
        return Err(Error::DegenerateInit("all trained columns vanish after centering".into()));
    }
    let w = DMatrix::from_fn(g.nrows(), keep.len(), |r, c| vecs[(r, keep[c])] / vals[keep[c]].sqrt());
    let psi = centered.to_psi(dist) * w;
    let b = spectral::build_b(dist)?;
    let q = psi.transpose() * b.matrix() * &psi;
    let (rq, rot) = linalg::sym_eigen_desc(&q);
    let psi = psi * rot;
    FeatureSet::from_psi(dist, &psi)?.with_hint(Some(rq.iter().copied().collect()))
}
