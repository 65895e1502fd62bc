//! Total correlation, its reduction by an attribute, the exponential
//! attribute embeddings built from the top eigen-features, and numerical
//! checks of the small-rate optimal values.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::dataset::{Alphabet, DistributionSet, JointTable};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::spectral::{self, Spectrum, Variant};

/// Eigenvalues must exceed `1 + EIGEN_ONE_TOL` to count towards `k*`.
pub const EIGEN_ONE_TOL: f64 = 1e-9;

/// Mutual information (nats) between two disjoint groups of variables of `table`.
pub fn mutual_information(table: &JointTable, a: &[usize], b: &[usize]) -> f64 {
    let vars: Vec<usize> = a.iter().chain(b).copied().collect();
    let ab = table.marginalize(&vars);
    let pa = table.marginalize(a);
    let pb = table.marginalize(b);
    let na = a.len();
    let mut s = 0.0;
    let mut xa = vec![0usize; na];
    let mut xb = vec![0usize; b.len()];
    ab.for_each_cell(|x, p| {
        if p > 0.0 {
            xa.copy_from_slice(&x[..na]);
            xb.copy_from_slice(&x[na..]);
            s += p * (p / (pa.get(&xa) * pb.get(&xb))).ln();
        }
    });
    s
}

/// `D(P || prod_i P_i)` in nats for a joint table.
pub fn total_correlation_table(table: &JointTable) -> f64 {
    let n = table.dims().len();
    let margs: Vec<JointTable> = (0..n).map(|i| table.marginalize(&[i])).collect();
    let mut s = 0.0;
    table.for_each_cell(|x, p| {
        if p > 0.0 {
            let q: f64 = x.iter().enumerate().map(|(i, &a)| margs[i].probs()[a]).product();
            s += p * (p / q).ln();
        }
    });
    s
}

/// Total correlation of the full joint of `dist`, in nats.
pub fn total_correlation(dist: &DistributionSet) -> Result<f64> {
    Ok(total_correlation_table(dist.require_full_joint()?))
}

/// A joint distribution of attributes `U_1..U_k` and the observed `X_1..X_d`.
/// The table stores the `U` variables first.
#[derive(Debug, Clone)]
pub struct JointWithAttribute {
    pub u_alphabets: Vec<Alphabet>,
    pub p_u: Vec<Vec<f64>>,
    pub x_dims: Vec<usize>,
    pub joint: JointTable,
    pub delta: f64,
    pub h: Vec<Vec<f64>>,
    pub q: DMatrix<f64>,
    /// Number of attributes actually coupled to `X`.
    pub k0: usize,
}

impl JointWithAttribute {
    pub fn k(&self) -> usize {
        self.u_alphabets.len()
    }

    fn u_vars(&self) -> Vec<usize> {
        (0..self.k()).collect()
    }

    fn x_vars(&self) -> Vec<usize> {
        (self.k()..self.k() + self.x_dims.len()).collect()
    }

    /// Marginal table of `X^d`.
    pub fn x_marginal(&self) -> JointTable {
        self.joint.marginalize(&self.x_vars())
    }

    /// `I(U^k; X^d)`.
    pub fn info_all(&self) -> f64 {
        mutual_information(&self.joint, &self.u_vars(), &self.x_vars())
    }

    /// `I(U_l; X^d)`.
    pub fn info_single(&self, l: usize) -> f64 {
        mutual_information(&self.joint, &[l], &self.x_vars())
    }
}

/// `L = sum_i I(U^k; X_i) - I(U^k; X^d)`, the drop in total correlation from
/// conditioning on the attributes.
pub fn correlation_reduction(jwa: &JointWithAttribute) -> f64 {
    let u = jwa.u_vars();
    let x = jwa.x_vars();
    let per: f64 = x.iter().map(|&i| mutual_information(&jwa.joint, &u, &[i])).sum();
    per - mutual_information(&jwa.joint, &u, &x)
}

/// The same quantity from its definition: `C(X) - sum_u P(u) C(X | U = u)`.
pub fn correlation_reduction_divergence(jwa: &JointWithAttribute) -> f64 {
    let u_dims: Vec<usize> = jwa.u_alphabets.iter().map(Alphabet::size).collect();
    let n_u: usize = u_dims.iter().product();
    let n_x: usize = jwa.x_dims.iter().product();
    let c_x = total_correlation_table(&jwa.x_marginal());
    let probs = jwa.joint.probs();
    let mut cond = 0.0;
    for uc in 0..n_u {
        // U variables come first in row-major order, so each u owns a contiguous block
        let block = &probs[uc * n_x..(uc + 1) * n_x];
        let pu: f64 = block.iter().sum();
        if pu <= 0.0 {
            continue;
        }
        let t = JointTable::new(jwa.x_dims.clone(), block.iter().map(|p| p / pu).collect())
            .expect("dims match by construction");
        cond += pu * total_correlation_table(&t);
    }
    c_x - cond
}

fn default_h() -> Vec<f64> {
    vec![1.0, -1.0]
}

fn check_h(h: &[f64], p: &[f64], l: usize) -> Result<()> {
    if h.len() != p.len() {
        return Err(Error::Domain(format!("h_{l} has {} values for {} symbols", h.len(), p.len())));
    }
    let mean: f64 = h.iter().zip(p).map(|(a, b)| a * b).sum();
    let var: f64 = h.iter().zip(p).map(|(a, b)| a * a * b).sum::<f64>() - mean * mean;
    if mean.abs() > 1e-8 || (var - 1.0).abs() > 1e-8 {
        return Err(Error::Domain(format!(
            "h_{l} must have zero mean and unit variance (mean {mean:.3e}, variance {var:.6})"
        )));
    }
    Ok(())
}

/// `k* = #{l >= 1 : lambda^(l) > 1}`.
pub fn k_star(spec: &Spectrum) -> usize {
    spec.informative_eigenvalues()
        .iter()
        .take_while(|&&l| l > 1.0 + EIGEN_ONE_TOL)
        .count()
}

/// Options for the embedding builders.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingOptions {
    /// Per-attribute `h_l` over a uniform binary alphabet; default `(+1, -1)`.
    pub h: Option<Vec<Vec<f64>>>,
    /// `k0 x k0` orthogonal mixing matrix; default identity.
    pub q: Option<DMatrix<f64>>,
}

/// Single-attribute embedding:
/// `P(u, x) = P_U(u) P_X(x) exp(sqrt(2 delta) h(u) sum_i f_i^(1)(x_i) / sqrt(lambda^(1))) / Z`.
pub fn build_embedding(dist: &DistributionSet, spec: &Spectrum, delta: f64, h: Option<Vec<f64>>) -> Result<JointWithAttribute> {
    let opts = EmbeddingOptions {
        h: h.map(|v| vec![v]),
        q: None,
    };
    build_embedding_inner(dist, spec, delta, 1, &opts, true)
}

/// `k`-attribute embedding with mutually independent uniform binary `U_l`.
/// Only the first `k0 = min(k, k*)` attributes enter the exponent.
pub fn build_embedding_k(
    dist: &DistributionSet,
    spec: &Spectrum,
    delta: f64,
    k: usize,
    opts: &EmbeddingOptions,
) -> Result<JointWithAttribute> {
    build_embedding_inner(dist, spec, delta, k, opts, false)
}

fn build_embedding_inner(
    dist: &DistributionSet,
    spec: &Spectrum,
    delta: f64,
    k: usize,
    opts: &EmbeddingOptions,
    single: bool,
) -> Result<JointWithAttribute> {
    if spec.variant() != Variant::B {
        return Err(Error::Domain("embeddings need the spectrum of the uncentered B".into()));
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::Domain(format!("delta must be a finite non-negative number, got {delta}")));
    }
    if k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    let px = dist.require_full_joint()?;
    let lam = spec.informative_eigenvalues();
    // the single-attribute family always uses the top eigen-feature
    let k0 = if single { 1.min(lam.len()) } else { k.min(k_star(spec)) };
    let u_alphabets: Vec<Alphabet> = (0..k).map(|_| Alphabet::new(["0", "1"])).collect::<Result<_>>()?;
    let p_u = vec![vec![0.5, 0.5]; k];
    let h = opts.h.clone().unwrap_or_else(|| vec![default_h(); k]);
    if h.len() != k {
        return Err(Error::Domain(format!("{} h functions for {k} attributes", h.len())));
    }
    for (l, hl) in h.iter().enumerate() {
        check_h(hl, &p_u[l], l + 1)?;
    }
    let q = opts.q.clone().unwrap_or_else(|| DMatrix::identity(k0, k0));
    if q.nrows() != k0 || q.ncols() != k0 {
        return Err(Error::Domain(format!("Q must be {k0}x{k0}")));
    }
    if k0 > 0 && (q.transpose() * &q - DMatrix::<f64>::identity(k0, k0)).amax() > 1e-9 {
        return Err(Error::Domain("Q must be orthogonal".into()));
    }

    // g_j(x) = sum_i f_i^(j)(x_i) / sqrt(lambda^(j)) on every cell of the X joint
    let n_x = px.len();
    let fs: Option<FeatureSet> = if k0 > 0 {
        Some(spectral::features_from_spectrum(spec, dist, k0)?)
    } else {
        None
    };
    let mut g = DMatrix::zeros(n_x, k0);
    if let Some(fs) = &fs {
        let mut x = vec![0usize; dist.d()];
        for c in 0..n_x {
            px.unravel(c, &mut x);
            for j in 0..k0 {
                g[(c, j)] = fs.sum_at(&x, j) / lam[j].sqrt();
            }
        }
    }
    let mixed = &g * &q; // column l: sum_j q_{jl} g_j

    let n_u = 1usize << k;
    let hval = |uc: usize, l: usize| h[l][(uc >> (k - 1 - l)) & 1];
    let mut score = DMatrix::zeros(n_u, n_x);
    for uc in 0..n_u {
        for c in 0..n_x {
            score[(uc, c)] = (0..k0).map(|l| hval(uc, l) * mixed[(c, l)]).sum::<f64>();
        }
    }
    let worst = score.iter().fold(0.0f64, |m, &s| m.max(-s));
    let coef = (2.0 * delta).sqrt();
    if coef * worst > 1.0 {
        return Err(Error::DeltaTooLarge {
            delta,
            max_delta: 1.0 / (2.0 * worst * worst),
        });
    }
    let pu_cell = 0.5f64.powi(k as i32);
    let mut probs = Vec::with_capacity(n_u * n_x);
    for uc in 0..n_u {
        for c in 0..n_x {
            probs.push(pu_cell * px.probs()[c] * (coef * score[(uc, c)]).exp());
        }
    }
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    let mut dims = vec![2usize; k];
    dims.extend_from_slice(&dist.dims());
    Ok(JointWithAttribute {
        u_alphabets,
        p_u,
        x_dims: dist.dims(),
        joint: JointTable::new(dims, probs)?,
        delta,
        h,
        q,
        k0,
    })
}

/// One row of a theorem check.
#[derive(Debug, Clone, Serialize)]
pub struct TheoremRow {
    pub delta: f64,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "L/delta")]
    pub l_over_delta: f64,
    pub target: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoremReport {
    pub k: usize,
    pub k0: usize,
    pub target: f64,
    pub rows: Vec<TheoremRow>,
    pub monotone: bool,
    pub final_relative_gap: f64,
    pub passed: bool,
}

/// Default rate grid, descending.
pub const DEFAULT_DELTAS: [f64; 3] = [1e-2, 1e-3, 1e-4];

/// Absolute rounding floor assumed for the computed correlation reduction.
pub const L_NOISE: f64 = 1e-13;

/// Build the embedding at each `delta`, compare `L / delta` with the optimal
/// value `lambda^(1) - 1` (k = 1) or `sum_{l <= k0} lambda^(l) - k0`. Passes
/// when the gap never grows along the grid and the last gap is within 5% of
/// `max(|target|, 1)`.
pub fn verify_theorem(dist: &DistributionSet, k: usize, deltas: &[f64]) -> Result<TheoremReport> {
    if deltas.is_empty() {
        return Err(Error::Domain("delta grid is empty".into()));
    }
    if deltas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Domain("delta grid must be strictly descending".into()));
    }
    let b = spectral::build_b(dist)?;
    let spec = spectral::eigendecompose(&b)?;
    let lam = spec.informative_eigenvalues();
    let (k0, target) = if k == 1 {
        let l1 = lam.first().copied().unwrap_or(1.0);
        (1, l1 - 1.0)
    } else {
        let k0 = k.min(k_star(&spec));
        (k0, lam.iter().take(k0).sum::<f64>() - k0 as f64)
    };
    let mut rows = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let jwa = if k == 1 {
            build_embedding(dist, &spec, delta, None)?
        } else {
            build_embedding_k(dist, &spec, delta, k, &EmbeddingOptions::default())?
        };
        let l = correlation_reduction(&jwa);
        rows.push(TheoremRow {
            delta,
            l,
            l_over_delta: l / delta,
            target,
            gap: (l / delta - target).abs(),
        });
    }
    let scale = target.abs().max(1.0);
    // L itself carries ~1e-15 of rounding, which L/delta amplifies
    let noise = |r: &TheoremRow| L_NOISE / r.delta;
    let monotone = rows
        .windows(2)
        .all(|w| w[1].gap <= w[0].gap + 1e-12 * scale + noise(&w[1]));
    let final_relative_gap = rows
        .last()
        .map(|r| (r.gap - noise(r)).max(0.0) / scale)
        .unwrap_or(f64::NAN);
    Ok(TheoremReport {
        k,
        k0,
        target,
        passed: monotone && final_relative_gap <= 0.05,
        rows,
        monotone,
        final_relative_gap,
    })
}
