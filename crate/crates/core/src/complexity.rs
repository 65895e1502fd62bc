//! Sample-complexity exponent of learning the top-k eigenspace of `B~` from
//! empirical data, plus a Monte Carlo harness around the exceedance event.
//!
//! Pair-indexed vectors use the column-major convention: the entry for
//! `(x_i, x_j)` of an `|X_i| x |X_j|` table sits at `x_j * |X_i| + x_i`. The
//! stacked vector `zeta` holds block `(i, j)` at block position `j * d + i`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{distribution_from_joint_unchecked, DistributionSet, JointTable};
use crate::error::{Error, Result};
use crate::linalg;
use crate::spectral::{self, Spectrum, Variant};

/// Eigengap below which the exponent is undefined.
pub const GAP_TOL: f64 = 1e-9;
/// `alpha_k` at or below this reports an infinite exponent.
pub const ALPHA_FLOOR: f64 = 1e-12;

fn require_positive_marginals(dist: &DistributionSet) -> Result<()> {
    for i in 0..dist.d() {
        if let Some(a) = dist.marginal(i).iter().position(|&p| p <= 0.0) {
            return Err(Error::Domain(format!("variable {i} symbol {a} has zero probability")));
        }
    }
    Ok(())
}

fn check_var(dist: &DistributionSet, vars: &[usize]) -> Result<()> {
    match vars.iter().find(|&&v| v >= dist.d()) {
        Some(v) => Err(Error::Domain(format!("variable index {v} out of range 0..{}", dist.d()))),
        None => Ok(()),
    }
}

/// Pair table `P_{X_i X_j}`, with `P_{X_i X_i} = diag(P_i)`.
fn pair_table(dist: &DistributionSet, i: usize, j: usize) -> DMatrix<f64> {
    if i == j {
        DMatrix::from_diagonal(&DVector::from_column_slice(dist.marginal(i)))
    } else {
        dist.pairwise(i, j).clone()
    }
}

/// Block offsets of `zeta`: entry `[j * d + i]` is the start of block `(i, j)`.
pub fn zeta_offsets(dims: &[usize]) -> Vec<usize> {
    let d = dims.len();
    let mut offsets = vec![0; d * d];
    let mut acc = 0;
    for j in 0..d {
        for i in 0..d {
            offsets[j * d + i] = acc;
            acc += dims[i] * dims[j];
        }
    }
    offsets
}

/// The linear map from `xi_{X_i X_j}` to `vec(Xi_ij)`, the first-order
/// perturbation of the `(i, j)` block of `B~`.
pub fn build_l(dist: &DistributionSet, i: usize, j: usize) -> Result<DMatrix<f64>> {
    check_var(dist, &[i, j])?;
    require_positive_marginals(dist)?;
    let (ni, nj) = (dist.dims()[i], dist.dims()[j]);
    let pi = dist.marginal(i);
    let pj = dist.marginal(j);
    let pij = pair_table(dist, i, j);
    let n = ni * nj;
    let mut l = DMatrix::zeros(n, n);
    for xj in 0..nj {
        for xi in 0..ni {
            let row = xj * ni + xi;
            let prod = pi[xi] * pj[xj];
            let mix = pij[(xi, xj)] + prod;
            for hj in 0..nj {
                for hi in 0..ni {
                    let di = (xi == hi) as u8 as f64;
                    let dj = (xj == hj) as u8 as f64;
                    if di == 0.0 && dj == 0.0 {
                        continue;
                    }
                    let bracket = di * dj - 0.5 * (di / pi[xi] + dj / pj[xj]) * mix;
                    l[(row, hj * ni + hi)] = (pij[(hi, hj)] / prod).sqrt() * bracket;
                }
            }
        }
    }
    Ok(l)
}

/// The map from `xi_{X^d}` (indexed like the full joint table) to `xi_{X_i X_j}`.
pub fn build_c(dist: &DistributionSet, i: usize, j: usize) -> Result<DMatrix<f64>> {
    check_var(dist, &[i, j])?;
    let joint = dist.require_full_joint()?;
    let (ni, nj) = (dist.dims()[i], dist.dims()[j]);
    let pij = joint.marginalize(&[i, j]);
    let mut c = DMatrix::zeros(ni * nj, joint.len());
    let mut cell = 0;
    joint.for_each_cell(|x, p| {
        let q = pij.get(&[x[i], x[j]]);
        if q > 0.0 && (i != j || x[i] == x[j]) {
            c[(x[j] * ni + x[i], cell)] = p.sqrt() / q.sqrt();
        }
        cell += 1;
    });
    Ok(c)
}

/// `B_{ij;st}`: quadruple joint normalized by the two pair joints, zero where
/// either pair probability vanishes.
pub fn build_quadruple(dist: &DistributionSet, i: usize, j: usize, s: usize, t: usize) -> Result<DMatrix<f64>> {
    check_var(dist, &[i, j, s, t])?;
    let joint = dist.require_full_joint()?;
    let dims = dist.dims();
    let quad = joint.marginalize(&[i, j, s, t]);
    let pij = joint.marginalize(&[i, j]);
    let pst = joint.marginalize(&[s, t]);
    let mut out = DMatrix::zeros(dims[i] * dims[j], dims[s] * dims[t]);
    for xj in 0..dims[j] {
        for xi in 0..dims[i] {
            let a = pij.get(&[xi, xj]);
            if a <= 0.0 {
                continue;
            }
            for xt in 0..dims[t] {
                for xs in 0..dims[s] {
                    let b = pst.get(&[xs, xt]);
                    if b <= 0.0 {
                        continue;
                    }
                    out[(xj * dims[i] + xi, xt * dims[s] + xs)] = quad.get(&[xi, xj, xs, xt]) / (a.sqrt() * b.sqrt());
                }
            }
        }
    }
    Ok(out)
}

fn require_pair_capacity(dist: &DistributionSet) -> Result<()> {
    let m = dist.total_dim();
    let cap = spectral::dense_cap();
    if m * m > cap {
        return Err(Error::Capacity(format!(
            "m^2 = {} exceeds the dense cap of {cap}; the exponent needs m^2 x m^2 matrices",
            m * m
        )));
    }
    Ok(())
}

/// The `m^2 x m^2` matrix with blocks `L_ij B_{ij;st} L_st^T`.
pub fn build_j(dist: &DistributionSet) -> Result<DMatrix<f64>> {
    require_pair_capacity(dist)?;
    let dims = dist.dims();
    let d = dims.len();
    let offsets = zeta_offsets(&dims);
    let m = dist.total_dim();
    let ls: Vec<DMatrix<f64>> = (0..d * d)
        .map(|p| build_l(dist, p % d, p / d))
        .collect::<Result<_>>()?;
    let mut j = DMatrix::zeros(m * m, m * m);
    for p in 0..d * d {
        let (a, b) = (p % d, p / d);
        for q in 0..d * d {
            let (s, t) = (q % d, q / d);
            let block = &ls[p] * build_quadruple(dist, a, b, s, t)? * ls[q].transpose();
            j.view_mut((offsets[p], offsets[q]), (block.nrows(), block.ncols()))
                .copy_from(&block);
        }
    }
    Ok(j)
}

/// Stacked `L_ij C_ij`, mapping `xi_{X^d}` to `zeta`; `J = J0 J0^T`.
pub fn build_j0(dist: &DistributionSet) -> Result<DMatrix<f64>> {
    require_pair_capacity(dist)?;
    let dims = dist.dims();
    let d = dims.len();
    let offsets = zeta_offsets(&dims);
    let m = dist.total_dim();
    let cells = dist.require_full_joint()?.len();
    let mut j0 = DMatrix::zeros(m * m, cells);
    for p in 0..d * d {
        let block = build_l(dist, p % d, p / d)? * build_c(dist, p % d, p / d)?;
        j0.view_mut((offsets[p], 0), (block.nrows(), cells)).copy_from(&block);
    }
    Ok(j0)
}

/// Partitioned Kronecker stacking of `a` (outer) and `b` (inner): block
/// `(s, t)` of the result is `a_t (x) b_s`, laid out like `zeta`, so that
/// `zeta . tracy_singh(u, w) = w^T Xi u`.
pub fn tracy_singh(a: &DVector<f64>, b: &DVector<f64>, dims: &[usize]) -> DVector<f64> {
    let d = dims.len();
    let part = spectral_offsets(dims);
    let offsets = zeta_offsets(dims);
    let m = part[d];
    let mut out = DVector::zeros(m * m);
    for t in 0..d {
        for s in 0..d {
            let base = offsets[t * d + s];
            for xt in 0..dims[t] {
                for xs in 0..dims[s] {
                    out[base + xt * dims[s] + xs] = a[part[t] + xt] * b[part[s] + xs];
                }
            }
        }
    }
    out
}

/// Reassemble an `m x m` block matrix from its `zeta` stacking.
pub fn zeta_to_matrix(zeta: &DVector<f64>, dims: &[usize]) -> DMatrix<f64> {
    let d = dims.len();
    let part = spectral_offsets(dims);
    let offsets = zeta_offsets(dims);
    let m = part[d];
    let mut out = DMatrix::zeros(m, m);
    for j in 0..d {
        for i in 0..d {
            for xj in 0..dims[j] {
                for xi in 0..dims[i] {
                    out[(part[i] + xi, part[j] + xj)] = zeta[offsets[j * d + i] + xj * dims[i] + xi];
                }
            }
        }
    }
    out
}

fn spectral_offsets(dims: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(dims.len() + 1);
    let mut acc = 0;
    v.push(0);
    for &n in dims {
        acc += n;
        v.push(acc);
    }
    v
}

fn check_gap(vals: &DVector<f64>, k: usize) -> Result<()> {
    let m = vals.len();
    if k == 0 || k >= m {
        return Err(Error::Domain(format!("k = {k} must lie in 1..{m}")));
    }
    if vals[k - 1] <= vals[k] + GAP_TOL {
        return Err(Error::Degeneracy(format!(
            "no eigengap at k = {k}: lambda_k = {:.12}, lambda_(k+1) = {:.12}",
            vals[k - 1],
            vals[k]
        )));
    }
    Ok(())
}

fn require_b_tilde(spec: &Spectrum) -> Result<()> {
    if spec.variant() != Variant::BTilde {
        return Err(Error::Domain("expected the spectrum of B~".into()));
    }
    Ok(())
}

/// `G_k = sum_{i<=k<j} (psi_j o psi_i)(psi_j o psi_i)^T / (lambda_i - lambda_j)`
/// over the full eigendecomposition of `B~`.
pub fn build_gk(spec: &Spectrum, k: usize) -> Result<DMatrix<f64>> {
    require_b_tilde(spec)?;
    let vals = spec.eigenvalues();
    check_gap(vals, k)?;
    let m = spec.m();
    if m * m > spectral::dense_cap() {
        return Err(Error::Capacity(format!("m^2 = {} exceeds the dense cap", m * m)));
    }
    let mut g = DMatrix::zeros(m * m, m * m);
    for i in 0..k {
        let ui = spec.eigenvector(i);
        for j in k..m {
            let v = tracy_singh(&spec.eigenvector(j), &ui, spec.dims());
            g.ger(1.0 / (vals[i] - vals[j]), &v, &v, 1.0);
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Serialize)]
pub struct ExponentResult {
    pub k: usize,
    pub alpha_k: f64,
    /// `||J0^T G_k J0||`, which equals `alpha_k` in exact arithmetic.
    pub alpha_k_check: f64,
    /// `1 / (2 alpha_k)`; infinite when `alpha_k` vanishes.
    pub exponent: f64,
    pub gap_ok: bool,
    pub eigenvalues: Vec<f64>,
}

pub fn b_tilde_spectrum(dist: &DistributionSet) -> Result<Spectrum> {
    let b = spectral::build_b(dist)?;
    spectral::eigendecompose(&spectral::build_b_tilde(&b, dist)?)
}

pub fn error_exponent(dist: &DistributionSet, k: usize) -> Result<ExponentResult> {
    dist.require_full_joint()?;
    let spec = b_tilde_spectrum(dist)?;
    let g = build_gk(&spec, k)?;
    let j0 = build_j0(dist)?;
    let j = build_j(dist)?;
    let gh = linalg::psd_sqrt(&g);
    let alpha = linalg::sym_spectral_norm(&(&gh * &j * &gh));
    let alpha_check = linalg::sym_spectral_norm(&(j0.transpose() * &g * &j0));
    let exponent = if alpha <= ALPHA_FLOOR {
        f64::INFINITY
    } else {
        1.0 / (2.0 * alpha)
    };
    Ok(ExponentResult {
        k,
        alpha_k: alpha,
        alpha_k_check: alpha_check,
        exponent,
        gap_ok: true,
        eigenvalues: spec.eigenvalues().iter().take(k + 1).copied().collect(),
    })
}

/// `tr(U_k^T A U_k) - tr(U^T A U)` for an orthonormal `m x k` frame `u`, computed
/// from the eigenpairs of `A` without subtracting two large traces.
pub fn trace_loss(vals: &DVector<f64>, vecs: &DMatrix<f64>, k: usize, u: &DMatrix<f64>) -> f64 {
    let mut loss = 0.0;
    for i in 0..vals.len() {
        let ui = vecs.column(i);
        let coords = u.transpose() * ui;
        if i < k {
            let resid = ui - u * &coords;
            loss += vals[i] * resid.norm_squared();
        } else {
            loss -= vals[i] * coords.norm_squared();
        }
    }
    loss
}

/// Second-order coefficient `sum_{i<=k<j} (u_i^T X u_j)^2 / (lambda_i - lambda_j)`.
pub fn second_order_loss(vals: &DVector<f64>, vecs: &DMatrix<f64>, k: usize, xi: &DMatrix<f64>) -> Result<f64> {
    check_gap(vals, k)?;
    let w = vecs.transpose() * xi * vecs;
    let mut s = 0.0;
    for i in 0..k {
        for j in k..vals.len() {
            s += w[(i, j)].powi(2) / (vals[i] - vals[j]);
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpansionRow {
    pub epsilon: f64,
    pub scaled_loss: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpansionReport {
    pub k: usize,
    pub predicted: f64,
    pub rows: Vec<ExpansionRow>,
    pub passed: bool,
}

pub const DEFAULT_EPSILONS: [f64; 3] = [1e-2, 1e-3, 1e-4];

/// Compare the measured trace loss of `A + eps X` against its second-order
/// prediction; passes when the smallest `eps` is within `rel_tol`.
pub fn check_expansion(a: &DMatrix<f64>, xi: &DMatrix<f64>, k: usize, epsilons: &[f64], rel_tol: f64) -> Result<ExpansionReport> {
    if epsilons.is_empty() {
        return Err(Error::Validation("no epsilon values".into()));
    }
    let (vals, vecs) = linalg::sym_eigen_desc(a);
    let predicted = second_order_loss(&vals, &vecs, k, xi)?;
    let rows: Vec<ExpansionRow> = epsilons
        .iter()
        .map(|&eps| {
            let (_, pv) = linalg::sym_eigen_desc(&(a + xi * eps));
            let u = pv.columns(0, k).into_owned();
            let scaled = trace_loss(&vals, &vecs, k, &u) / (eps * eps);
            ExpansionRow {
                epsilon: eps,
                scaled_loss: scaled,
                relative_error: (scaled - predicted).abs() / predicted.abs().max(f64::MIN_POSITIVE),
            }
        })
        .collect();
    let last = rows
        .iter()
        .min_by(|a, b| a.epsilon.total_cmp(&b.epsilon))
        .expect("non-empty");
    let passed = last.relative_error <= rel_tol;
    Ok(ExpansionReport { k, predicted, rows, passed })
}

/// `B~` of a possibly incomplete empirical distribution: unseen symbols get
/// zero rows and columns instead of making the matrix undefined.
pub fn empirical_b_tilde(dist: &DistributionSet) -> DMatrix<f64> {
    let dims = dist.dims();
    let off = spectral_offsets(&dims);
    let m = off[dims.len()];
    let sq: Vec<Vec<f64>> = dist.marginals().iter().map(|p| p.iter().map(|x| x.sqrt()).collect()).collect();
    let mut b = DMatrix::zeros(m, m);
    for i in 0..dims.len() {
        for j in 0..dims.len() {
            let pij = pair_table(dist, i, j);
            for a in 0..dims[i] {
                for c in 0..dims[j] {
                    let den = sq[i][a] * sq[j][c];
                    if den > 0.0 {
                        b[(off[i] + a, off[j] + c)] = pij[(a, c)] / den - den;
                    }
                }
            }
        }
    }
    b
}

#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloConfig {
    pub k: usize,
    pub n_grid: Vec<usize>,
    pub trials: usize,
    pub eps: f64,
    pub seed: u64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            k: 1,
            n_grid: vec![25, 50, 100, 200, 400],
            trials: 400,
            eps: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloPoint {
    pub n: usize,
    pub trials: usize,
    pub failures: usize,
    pub frequency: f64,
    /// `-(1/n) log frequency`; absent when no failure was observed.
    pub rate: Option<f64>,
    /// No failures seen: the frequency is only an upper-bound estimate.
    pub one_sided: bool,
    pub mean_loss: f64,
    pub min_loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloReport {
    pub config: MonteCarloConfig,
    pub points: Vec<MonteCarloPoint>,
    /// Least-squares slope of `-log frequency` against `n` over points with failures.
    pub slope: Option<f64>,
    pub non_increasing_pairs: usize,
    pub adjacent_pairs: usize,
}

impl MonteCarloReport {
    /// Frequencies are non-increasing for a majority of adjacent grid points.
    pub fn trend_ok(&self) -> bool {
        2 * self.non_increasing_pairs > self.adjacent_pairs
    }

    pub fn min_loss(&self) -> f64 {
        self.points.iter().map(|p| p.min_loss).fold(f64::INFINITY, f64::min)
    }
}

fn sample_counts(rng: &mut ChaCha8Rng, probs: &[f64], n: usize) -> Vec<f64> {
    // sequential conditional binomials give an exact multinomial draw
    let mut counts = vec![0.0; probs.len()];
    let mut left = n as u64;
    let mut mass = 1.0;
    for (c, &p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        if c + 1 == probs.len() || p >= mass {
            counts[c] = left as f64;
            break;
        }
        let q = (p / mass).clamp(0.0, 1.0);
        let draw = Binomial::new(left, q).expect("valid binomial").sample(rng);
        counts[c] = draw as f64;
        left -= draw;
        mass -= p;
    }
    counts
}

/// Draw `trials` empirical datasets of size `n` for each `n` in the grid, fit the
/// top-k eigenvectors of each empirical `B~`, and count how often the trace
/// loss against the true `B~` exceeds `eps^2`.
pub fn monte_carlo_check(dist: &DistributionSet, cfg: &MonteCarloConfig) -> Result<MonteCarloReport> {
    let joint = dist.require_full_joint()?;
    if cfg.trials == 0 || cfg.n_grid.is_empty() || cfg.n_grid.contains(&0) {
        return Err(Error::Validation("trials and every n must be positive".into()));
    }
    if !(cfg.eps > 0.0) {
        return Err(Error::Validation(format!("eps must be positive, got {}", cfg.eps)));
    }
    let spec = b_tilde_spectrum(dist)?;
    check_gap(spec.eigenvalues(), cfg.k)?;
    let (vals, vecs) = (spec.eigenvalues().clone(), spec.eigenvectors().clone());
    let threshold = cfg.eps * cfg.eps;
    let dims = joint.dims().to_vec();
    let probs = joint.probs();
    let mut points = Vec::with_capacity(cfg.n_grid.len());
    for (g, &n) in cfg.n_grid.iter().enumerate() {
        let losses: Vec<f64> = (0..cfg.trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream((g * cfg.trials + t) as u64);
                let counts = sample_counts(&mut rng, probs, n);
                let phat: Vec<f64> = counts.iter().map(|c| c / n as f64).collect();
                let table = JointTable::new(dims.clone(), phat).expect("dims match");
                let emp = distribution_from_joint_unchecked(dist.names().to_vec(), dist.alphabets().to_vec(), table);
                let (_, ev) = linalg::sym_eigen_desc(&empirical_b_tilde(&emp));
                trace_loss(&vals, &vecs, cfg.k, &ev.columns(0, cfg.k).into_owned())
            })
            .collect();
        let failures = losses.iter().filter(|&&l| l > threshold).count();
        let frequency = failures as f64 / cfg.trials as f64;
        points.push(MonteCarloPoint {
            n,
            trials: cfg.trials,
            failures,
            frequency,
            rate: (failures > 0).then(|| -frequency.ln() / n as f64),
            one_sided: failures == 0,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            min_loss: losses.iter().copied().fold(f64::INFINITY, f64::min),
        });
    }
    let fit: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.failures > 0)
        .map(|p| (p.n as f64, -p.frequency.ln()))
        .collect();
    let slope = (fit.len() >= 2).then(|| {
        let k = fit.len() as f64;
        let mx = fit.iter().map(|p| p.0).sum::<f64>() / k;
        let my = fit.iter().map(|p| p.1).sum::<f64>() / k;
        let sxy: f64 = fit.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = fit.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    });
    let adjacent_pairs = points.len().saturating_sub(1);
    let non_increasing_pairs = points.windows(2).filter(|w| w[1].frequency <= w[0].frequency).count();
    Ok(MonteCarloReport {
        config: cfg.clone(),
        points,
        slope,
        non_increasing_pairs,
        adjacent_pairs,
    })
}
