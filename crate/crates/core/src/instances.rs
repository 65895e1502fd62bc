//! Small exact distributions used as oracles and test fixtures.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::dataset::{from_joint, Alphabet, DistributionSet, JointTable};
use crate::error::{Error, Result};
use crate::spectral;

/// Doubly symmetric binary source: `X1` uniform, `X2 = X1` flipped with probability `p`.
pub fn dsbs(p: f64) -> Result<DistributionSet> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("crossover probability {p} outside [0, 1]")));
    }
    let bit = Alphabet::indexed(2)?;
    let q = (1.0 - p) / 2.0;
    let h = p / 2.0;
    from_joint(vec![bit.clone(), bit], JointTable::new(vec![2, 2], vec![q, h, h, q])?)
}

/// Product of the given marginals.
pub fn product(marginals: &[Vec<f64>]) -> Result<DistributionSet> {
    let dims: Vec<usize> = marginals.iter().map(Vec::len).collect();
    let alphabets = dims.iter().map(|&s| Alphabet::indexed(s)).collect::<Result<Vec<_>>>()?;
    let mut probs = vec![1.0];
    for m in marginals {
        probs = probs.iter().flat_map(|p| m.iter().map(move |q| p * q)).collect();
    }
    from_joint(alphabets, JointTable::new(dims, probs)?)
}

fn dirichlet<R: Rng + ?Sized>(rng: &mut R, n: usize, alpha: f64) -> Vec<f64> {
    let g = Gamma::new(alpha, 1.0).expect("alpha > 0");
    loop {
        let x: Vec<f64> = (0..n).map(|_| g.sample(rng)).collect();
        let s: f64 = x.iter().sum();
        if s > 0.0 && x.iter().all(|&v| v > 0.0) {
            return x.into_iter().map(|v| v / s).collect();
        }
    }
}

/// Full joint drawn from a symmetric Dirichlet over all cells of the product space.
pub fn dirichlet_joint<R: Rng + ?Sized>(rng: &mut R, dims: &[usize], alpha: f64) -> Result<DistributionSet> {
    let cells: usize = dims.iter().product();
    let probs = dirichlet(rng, cells, alpha);
    let alphabets = dims.iter().map(|&s| Alphabet::indexed(s)).collect::<Result<Vec<_>>>()?;
    from_joint(alphabets, JointTable::new(dims.to_vec(), probs)?)
}

/// Joint of conditionally independent `X_i` given a hidden `U` with `latent`
/// states. Each `P(X_i | U = u)` is Dirichlet(`alpha`); small `alpha` gives
/// strong dependence.
pub fn latent_joint<R: Rng + ?Sized>(rng: &mut R, dims: &[usize], latent: usize, alpha: f64) -> Result<DistributionSet> {
    let pu = dirichlet(rng, latent, 2.0);
    let cond: Vec<Vec<Vec<f64>>> = dims
        .iter()
        .map(|&s| (0..latent).map(|_| dirichlet(rng, s, alpha)).collect())
        .collect();
    let cells: usize = dims.iter().product();
    let table = JointTable::new(dims.to_vec(), vec![0.0; cells])?;
    let mut probs = vec![0.0; cells];
    let mut x = vec![0usize; dims.len()];
    for (c, p) in probs.iter_mut().enumerate() {
        table.unravel(c, &mut x);
        *p = (0..latent)
            .map(|u| pu[u] * x.iter().enumerate().map(|(i, &a)| cond[i][u][a]).product::<f64>())
            .sum();
    }
    let s: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= s);
    let alphabets = dims.iter().map(|&s| Alphabet::indexed(s)).collect::<Result<Vec<_>>>()?;
    from_joint(alphabets, JointTable::new(dims.to_vec(), probs)?)
}

/// A random latent-variable instance whose top `k + 1` informative eigenvalues
/// are separated by at least `gap` from each other's neighbours and from 1.
/// Draws are rejected until the condition holds (at most `max_tries`).
pub fn separated_instance<R: Rng + ?Sized>(
    rng: &mut R,
    k: usize,
    gap: f64,
    max_tries: usize,
) -> Result<DistributionSet> {
    for _ in 0..max_tries {
        let d = rng.random_range(2..=4usize);
        let dims: Vec<usize> = (0..d).map(|_| rng.random_range(2..=5usize)).collect();
        let m: usize = dims.iter().sum();
        if m < d + k + 1 {
            continue;
        }
        let latent = rng.random_range(2..=4usize);
        let dist = latent_joint(rng, &dims, latent, 0.6)?;
        let b = spectral::build_b(&dist)?;
        let spec = spectral::eigendecompose(&b)?;
        let lam = spec.informative_eigenvalues();
        let separated = (0..k).all(|l| lam[l] - lam[l + 1] >= gap) && lam[k - 1] - 1.0 >= gap;
        if separated {
            return Ok(dist);
        }
    }
    Err(Error::Domain(format!("no separated instance found in {max_tries} draws")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generators_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        dsbs(0.1).unwrap().validate(1e-12).unwrap();
        product(&[vec![0.2, 0.8], vec![0.5, 0.25, 0.25]]).unwrap().validate(1e-12).unwrap();
        dirichlet_joint(&mut rng, &[2, 3, 4], 1.0).unwrap().validate(1e-12).unwrap();
        latent_joint(&mut rng, &[3, 3], 2, 0.5).unwrap().validate(1e-12).unwrap();
    }

    #[test]
    fn separated_instance_meets_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dist = separated_instance(&mut rng, 3, 0.05, 10_000).unwrap();
        let spec = spectral::eigendecompose(&spectral::build_b(&dist).unwrap()).unwrap();
        let lam = spec.informative_eigenvalues();
        assert!(lam[2] - lam[3] >= 0.05);
    }
}
