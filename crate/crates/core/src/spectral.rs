//! The normalized pairwise matrix `B`, its centered version `B~`, the dense
//! eigendecomposition oracle, the structural property checker, and conversion
//! from eigenvectors to feature tables.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dataset::DistributionSet;
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::linalg;

/// Default cap on `m` for the dense eigensolver.
pub const DEFAULT_DENSE_CAP: usize = 4000;

/// Eigenvalues below this are treated as numerical zeros.
pub const ZERO_EIGEN_TOL: f64 = 1e-9;

/// Current dense-solver cap; `COMMONFEAT_DENSE_CAP` overrides the default.
pub fn dense_cap() -> usize {
    std::env::var("COMMONFEAT_DENSE_CAP")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(DEFAULT_DENSE_CAP)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Variant {
    B,
    BTilde,
}

/// Densified `m x m` block matrix with blocks indexed by variable pairs.
#[derive(Debug, Clone)]
pub struct BMatrix {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    variant: Variant,
    matrix: DMatrix<f64>,
    sqrt_marginals: DVector<f64>,
}

impl BMatrix {
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn d(&self) -> usize {
        self.dims.len()
    }

    pub fn m(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Row offset of variable `i`'s block.
    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        self.matrix
            .view((self.offsets[i], self.offsets[j]), (self.dims[i], self.dims[j]))
            .into_owned()
    }
}

fn offsets_for(dims: &[usize]) -> Vec<usize> {
    dims.iter()
        .scan(0, |acc, &s| {
            let o = *acc;
            *acc += s;
            Some(o)
        })
        .collect()
}

/// Stacked `sqrt(P_i)` vectors: `v` with `psi0 = v / sqrt(d)`.
pub fn sqrt_marginal_vector(dist: &DistributionSet) -> DVector<f64> {
    DVector::from_iterator(
        dist.total_dim(),
        dist.marginals().iter().flat_map(|m| m.iter().map(|p| p.sqrt())),
    )
}

/// The trivial top eigenvector `(1/sqrt(d)) [v_1; ...; v_d]`.
pub fn psi0(dist: &DistributionSet) -> DVector<f64> {
    sqrt_marginal_vector(dist) / (dist.d() as f64).sqrt()
}

/// Orthonormal basis (`m x (d-1)`) of `{[a_1 v_1; ...; a_d v_d] : sum a_i = 0}`.
pub fn null_family_basis(dist: &DistributionSet) -> DMatrix<f64> {
    let d = dist.d();
    let m = dist.total_dim();
    let offsets = offsets_for(&dist.dims());
    let mut w = DMatrix::zeros(m, d.saturating_sub(1));
    for c in 0..d.saturating_sub(1) {
        for (sign, i) in [(1.0, c), (-1.0, c + 1)] {
            for (a, p) in dist.marginal(i).iter().enumerate() {
                w[(offsets[i] + a, c)] = sign * p.sqrt();
            }
        }
    }
    linalg::orthonormal_basis(&w, 1e-12)
}

pub fn build_b(dist: &DistributionSet) -> Result<BMatrix> {
    let dims = dist.dims();
    let d = dims.len();
    for i in 0..d {
        if let Some(a) = dist.marginal(i).iter().position(|&p| p <= 0.0) {
            return Err(Error::Domain(format!(
                "variable {i} symbol {a} has zero probability; B is undefined"
            )));
        }
    }
    let offsets = offsets_for(&dims);
    let m = dist.total_dim();
    let mut matrix = DMatrix::zeros(m, m);
    for i in 0..d {
        let si: Vec<f64> = dist.marginal(i).iter().map(|p| p.sqrt()).collect();
        for j in 0..d {
            if i == j {
                for a in 0..dims[i] {
                    matrix[(offsets[i] + a, offsets[i] + a)] = 1.0;
                }
                continue;
            }
            let sj: Vec<f64> = dist.marginal(j).iter().map(|p| p.sqrt()).collect();
            let pij = dist.pairwise(i, j);
            for a in 0..dims[i] {
                for b in 0..dims[j] {
                    matrix[(offsets[i] + a, offsets[j] + b)] = pij[(a, b)] / (si[a] * sj[b]);
                }
            }
        }
    }
    Ok(BMatrix {
        dims,
        offsets,
        variant: Variant::B,
        matrix,
        sqrt_marginals: sqrt_marginal_vector(dist),
    })
}

/// `B~ = B - d psi0 psi0^T`, i.e. blockwise `B_ij - v_i v_j^T`.
pub fn build_b_tilde(b: &BMatrix, dist: &DistributionSet) -> Result<BMatrix> {
    if b.variant != Variant::B {
        return Err(Error::Domain("build_b_tilde expects the uncentered B".into()));
    }
    if b.dims != dist.dims() {
        return Err(Error::Domain("B and distribution have different alphabets".into()));
    }
    let v = sqrt_marginal_vector(dist);
    Ok(BMatrix {
        dims: b.dims.clone(),
        offsets: b.offsets.clone(),
        variant: Variant::BTilde,
        matrix: &b.matrix - &v * v.transpose(),
        sqrt_marginals: v,
    })
}

/// Eigenvalues (descending) and orthonormal eigenvectors (as columns).
#[derive(Debug, Clone)]
pub struct Spectrum {
    variant: Variant,
    dims: Vec<usize>,
    offsets: Vec<usize>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl Spectrum {
    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn m(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn d(&self) -> usize {
        self.dims.len()
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn eigenvector(&self, l: usize) -> DVector<f64> {
        self.eigenvectors.column(l).into_owned()
    }

    /// Sub-vector `psi_i^(l)`.
    pub fn part(&self, l: usize, i: usize) -> DVector<f64> {
        self.eigenvectors
            .view((self.offsets[i], l), (self.dims[i], 1))
            .into_owned()
            .column(0)
            .into_owned()
    }

    /// Index of the first informative eigenvector: 1 for `B` (skipping `psi0`), 0 for `B~`.
    pub fn first_informative(&self) -> usize {
        match self.variant {
            Variant::B => 1,
            Variant::BTilde => 0,
        }
    }

    /// The informative eigenvalues `lambda^(1), ..., lambda^(m-d)`.
    pub fn informative_eigenvalues(&self) -> Vec<f64> {
        let s = self.first_informative();
        let n = self.m() - self.d();
        self.eigenvalues.iter().skip(s).take(n).copied().collect()
    }

    pub fn orthonormality_error(&self) -> f64 {
        let m = self.m();
        (self.eigenvectors.transpose() * &self.eigenvectors - DMatrix::<f64>::identity(m, m)).amax()
    }

    /// `||B - Psi Lambda Psi^T||_F / ||B||_F`.
    pub fn reconstruction_error(&self, b: &BMatrix) -> f64 {
        let recon = &self.eigenvectors * DMatrix::from_diagonal(&self.eigenvalues) * self.eigenvectors.transpose();
        let nb = b.matrix.norm();
        (recon - &b.matrix).norm() / nb.max(f64::MIN_POSITIVE)
    }
}

/// Indices `start..end` of the eigenvalue cluster around `target`.
fn cluster(values: &DVector<f64>, target: f64, tol: f64) -> Option<(usize, usize)> {
    let idx: Vec<usize> = (0..values.len()).filter(|&i| (values[i] - target).abs() <= tol).collect();
    match (idx.first(), idx.last()) {
        (Some(&s), Some(&e)) => Some((s, e + 1)),
        _ => None,
    }
}

pub fn eigendecompose(b: &BMatrix) -> Result<Spectrum> {
    eigendecompose_with_cap(b, dense_cap())
}

/// Dense eigendecomposition. For variant `B`, eigenvectors inside numerically
/// degenerate clusters are rotated so that `psi0` leads the cluster at `d` and the
/// `sum a_i = 0` family closes the zero cluster; this only picks a basis within
/// each eigenspace.
pub fn eigendecompose_with_cap(b: &BMatrix, cap: usize) -> Result<Spectrum> {
    if b.m() > cap {
        return Err(Error::Capacity(format!(
            "m = {} exceeds the dense eigensolver cap of {cap}; use the MACE route instead",
            b.m()
        )));
    }
    let (eigenvalues, mut eigenvectors) = linalg::sym_eigen_desc(&b.matrix);
    if b.variant == Variant::B {
        let d = b.d() as f64;
        let m = b.m();
        let v = &b.sqrt_marginals;
        if let Some((s, e)) = cluster(&eigenvalues, d, 1e-8 * d) {
            let p0 = DMatrix::from_column_slice(m, 1, (v / d.sqrt()).as_slice());
            let basis = eigenvectors.columns(s, e - s).into_owned();
            let rotated = linalg::rotate_into(&basis, &p0, false);
            eigenvectors.columns_mut(s, e - s).copy_from(&rotated);
        }
        let zero_start = (0..m).find(|&i| eigenvalues[i] <= ZERO_EIGEN_TOL);
        if let Some(s) = zero_start {
            if m - s >= b.d() - 1 && b.d() > 1 {
                let fam = null_family_from_v(v, &b.dims, &b.offsets);
                let basis = eigenvectors.columns(s, m - s).into_owned();
                let rotated = linalg::rotate_into(&basis, &fam, true);
                eigenvectors.columns_mut(s, m - s).copy_from(&rotated);
            }
        }
    }
    Ok(Spectrum {
        variant: b.variant,
        dims: b.dims.clone(),
        offsets: b.offsets.clone(),
        eigenvalues,
        eigenvectors,
    })
}

fn null_family_from_v(v: &DVector<f64>, dims: &[usize], offsets: &[usize]) -> DMatrix<f64> {
    let d = dims.len();
    let mut w = DMatrix::zeros(v.len(), d - 1);
    for c in 0..d - 1 {
        for (sign, i) in [(1.0, c), (-1.0, c + 1)] {
            for a in 0..dims[i] {
                w[(offsets[i] + a, c)] = sign * v[offsets[i] + a];
            }
        }
    }
    linalg::orthonormal_basis(&w, 1e-12)
}

/// One structural property check with its measured value.
#[derive(Debug, Clone, Serialize)]
pub struct PropertyCheck {
    pub item: u8,
    pub name: &'static str,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Lemma1Report {
    pub checks: Vec<PropertyCheck>,
    /// More than `d - 1` eigenvalues sit at numerical zero; the trailing block was
    /// identified by membership in the `sum a_i = 0` family.
    pub ambiguous_null_space: bool,
}

impl Lemma1Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Check the five structural properties of `B`'s spectrum: PSD, the trivial
/// top eigenpair, `lambda^(1) >= 1`, the `d - 1` trailing null vectors, and
/// orthogonality of informative sub-vectors to `v_i`.
pub fn check_lemma1(b: &BMatrix, spec: &Spectrum, dist: &DistributionSet) -> Lemma1Report {
    let d = dist.d();
    let m = spec.m();
    let vals = spec.eigenvalues();
    let vecs = spec.eigenvectors();
    let mut checks = Vec::with_capacity(5);

    let lmin = vals.iter().copied().fold(f64::INFINITY, f64::min);
    checks.push(PropertyCheck {
        item: 1,
        name: "positive semidefinite",
        passed: lmin >= -1e-9,
        measured: lmin,
        tolerance: -1e-9,
        note: None,
    });

    let p0 = psi0(dist);
    let top = spec.eigenvector(0);
    let vec_err = (&top - &p0).norm().min((&top + &p0).norm());
    let eig_res = (b.matrix() * &p0 - &p0 * d as f64).norm();
    let r2 = (vals[0] - d as f64).abs().max(vec_err).max(eig_res);
    checks.push(PropertyCheck {
        item: 2,
        name: "top eigenpair is (d, psi0)",
        passed: r2 <= 1e-8,
        measured: r2,
        tolerance: 1e-8,
        note: None,
    });

    let (passed3, measured3, note3) = if m > d {
        (vals[1] >= 1.0 - 1e-9, vals[1], None)
    } else {
        (true, f64::NAN, Some("m = d: no informative eigenvalues".to_string()))
    };
    checks.push(PropertyCheck {
        item: 3,
        name: "second eigenvalue at least 1",
        passed: passed3,
        measured: measured3,
        tolerance: 1.0 - 1e-9,
        note: note3,
    });

    let mut ambiguous = false;
    if d >= 2 {
        let trail = vecs.columns(m - (d - 1), d - 1).into_owned();
        let max_trail = (m - (d - 1)..m).map(|l| vals[l]).fold(f64::NEG_INFINITY, f64::max);
        let fam = null_family_basis(dist);
        let pf = &fam * fam.transpose();
        let resid = &trail - &pf * &trail;
        let sin = resid.clone().svd(false, false).singular_values.max().min(1.0);
        let angle = sin.asin();
        let null_resid = (b.matrix() * &trail).amax();
        let measured = angle.max(null_resid);
        let mut note = None;
        if m > d && vals[m - d] <= ZERO_EIGEN_TOL {
            ambiguous = true;
            note = Some(format!(
                "eigenvalue {:.3e} at index {} is also at numerical zero; the trailing block was taken as the sum-zero family inside the zero eigenspace",
                vals[m - d],
                m - d
            ));
        }
        checks.push(PropertyCheck {
            item: 4,
            name: "trailing d-1 null vectors span the sum-zero family",
            passed: max_trail <= ZERO_EIGEN_TOL && measured <= 1e-6,
            measured: measured.max(max_trail.max(0.0)),
            tolerance: 1e-6,
            note,
        });
    }

    let mut worst5 = 0.0f64;
    for l in 1..=(m - d) {
        for i in 0..d {
            let vi = DVector::from_iterator(dist.dims()[i], dist.marginal(i).iter().map(|p| p.sqrt()));
            worst5 = worst5.max(spec.part(l, i).dot(&vi).abs());
        }
    }
    checks.push(PropertyCheck {
        item: 5,
        name: "informative sub-vectors orthogonal to sqrt marginals",
        passed: worst5 <= 1e-7,
        measured: worst5,
        tolerance: 1e-7,
        note: None,
    });

    Lemma1Report {
        checks,
        ambiguous_null_space: ambiguous,
    }
}

/// Feature tables `f_i^(l) = psi_i^(l) / sqrt(P_i)` for the top `k` informative
/// eigenvectors; the eigenvalue hint holds the corresponding `lambda^(l)`.
pub fn features_from_spectrum(spec: &Spectrum, dist: &DistributionSet, k: usize) -> Result<FeatureSet> {
    let max_k = spec.m() - spec.d();
    if k == 0 || k > max_k {
        return Err(Error::Domain(format!("k = {k} must lie in 1..=m-d = {max_k}")));
    }
    if spec.dims() != dist.dims().as_slice() {
        return Err(Error::Domain("spectrum and distribution have different alphabets".into()));
    }
    let s = spec.first_informative();
    let psi = spec.eigenvectors().columns(s, k).into_owned();
    let hint = (s..s + k).map(|l| spec.eigenvalues()[l]).collect();
    FeatureSet::from_psi(dist, &psi)?.with_hint(Some(hint))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{from_joint, Alphabet, JointTable};
    use approx::assert_relative_eq;

    fn dsbs(p: f64) -> DistributionSet {
        let bit = Alphabet::indexed(2).unwrap();
        from_joint(
            vec![bit.clone(), bit],
            JointTable::new(vec![2, 2], vec![(1.0 - p) / 2.0, p / 2.0, p / 2.0, (1.0 - p) / 2.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn independent_bits_block_is_half() {
        let bit = Alphabet::indexed(2).unwrap();
        let dist = from_joint(vec![bit.clone(), bit], JointTable::new(vec![2, 2], vec![0.25; 4]).unwrap()).unwrap();
        let b = build_b(&dist).unwrap();
        assert!(b.block(0, 1).iter().all(|&x| (x - 0.5).abs() < 1e-15));
        let bt = build_b_tilde(&b, &dist).unwrap();
        let spec = eigendecompose(&bt).unwrap();
        assert_relative_eq!(spec.eigenvalues()[0], 1.0, epsilon = 1e-12);
        assert!((bt.matrix() * psi0(&dist)).norm() < 1e-12);
    }

    #[test]
    fn dsbs_spectrum_and_features() {
        // hand eigen-decomposition: B12 = [[0.9,0.1],[0.1,0.9]] / 0.5 has singular values 1 and 0.8
        let dist = dsbs(0.1);
        let b = build_b(&dist).unwrap();
        let spec = eigendecompose(&b).unwrap();
        let want = [2.0, 1.8, 0.2, 0.0];
        for (l, w) in want.iter().enumerate() {
            assert_relative_eq!(spec.eigenvalues()[l], *w, epsilon = 1e-12);
        }
        let fs = features_from_spectrum(&spec, &dist, 1).unwrap();
        let h = 0.5f64.sqrt();
        for i in 0..2 {
            for a in 0..2 {
                assert_relative_eq!(fs.table(i)[(a, 0)].abs(), h, epsilon = 1e-12);
            }
        }
        assert!(fs.check(&dist).passed());
        assert!(spec.reconstruction_error(&b) < 1e-12);
        assert!(spec.orthonormality_error() < 1e-12);
    }

    #[test]
    fn copy_instance_puts_psi0_first() {
        // X2 = X1: lambda = d = 2 is doubly degenerate
        let bit = Alphabet::indexed(2).unwrap();
        let dist = from_joint(vec![bit.clone(), bit], JointTable::new(vec![2, 2], vec![0.3, 0.0, 0.0, 0.7]).unwrap())
            .unwrap();
        let b = build_b(&dist).unwrap();
        let spec = eigendecompose(&b).unwrap();
        let report = check_lemma1(&b, &spec, &dist);
        assert!(report.passed(), "{report:?}");
        let fs = features_from_spectrum(&spec, &dist, 1).unwrap();
        assert!(fs.check(&dist).passed());
    }

    #[test]
    fn k_out_of_range() {
        let dist = dsbs(0.2);
        let spec = eigendecompose(&build_b(&dist).unwrap()).unwrap();
        let err = features_from_spectrum(&spec, &dist, 3).unwrap_err();
        assert!(err.to_string().contains("m-d = 2"));
    }

    #[test]
    fn dense_cap_is_enforced() {
        let dist = dsbs(0.2);
        let b = build_b(&dist).unwrap();
        assert!(matches!(eigendecompose_with_cap(&b, 3), Err(Error::Capacity(_))));
    }
}
