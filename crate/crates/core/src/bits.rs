//! Common-bits instances: each variable observes a subset of independent
//! uniform ±1 bits. Eigenvalues and eigen-features of `B` are known in closed
//! form, which makes these instances exact oracles for the numeric routes.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{distribution_from_joint_unchecked, Alphabet, DistributionSet, JointTable};
use crate::error::{Error, Result};
use crate::features::FeatureSet;

/// Largest supported number of bits (the joint has `2^r` patterns).
pub const MAX_BITS: usize = 20;

/// `r` bits and `d` index sets over `1..=r`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitsInstance {
    pub r: usize,
    pub index_sets: Vec<Vec<usize>>,
}

/// One analytic eigenpair, labelled by the bit subset `J`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mode {
    /// 1-based bit indices, ascending.
    pub subset: Vec<usize>,
    /// `w(J)`: how many index sets contain `J`.
    pub weight: usize,
}

impl BitsInstance {
    pub fn new(r: usize, index_sets: Vec<Vec<usize>>) -> Result<Self> {
        if r == 0 {
            return Err(Error::Domain("r must be at least 1".into()));
        }
        if r > MAX_BITS {
            return Err(Error::Capacity(format!("r = {r} exceeds the limit of {MAX_BITS} bits")));
        }
        if index_sets.len() < 2 {
            return Err(Error::Validation(format!(
                "at least 2 variables are required, got {}",
                index_sets.len()
            )));
        }
        let mut sets = Vec::with_capacity(index_sets.len());
        for (i, s) in index_sets.into_iter().enumerate() {
            let mut s = s;
            s.sort_unstable();
            s.dedup();
            if s.is_empty() {
                return Err(Error::Domain(format!("index set {} is empty", i + 1)));
            }
            if let Some(&bad) = s.iter().find(|&&j| j == 0 || j > r) {
                return Err(Error::Domain(format!("bit index {bad} outside 1..={r}")));
            }
            sets.push(s);
        }
        Ok(Self { r, index_sets: sets })
    }

    /// Parse `"1,2;2,3;1,3"` (sets separated by `;`, indices by `,`).
    pub fn parse(r: usize, sets: &str) -> Result<Self> {
        let parsed = sets
            .split(';')
            .map(|s| {
                s.split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::format(None, format!("bad bit index {t:?}")))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(r, parsed)
    }

    /// The triangle instance: three bits, `X1 = (b1,b2)`, `X2 = (b2,b3)`, `X3 = (b1,b3)`.
    pub fn triangle() -> Self {
        Self::new(3, vec![vec![1, 2], vec![2, 3], vec![1, 3]]).expect("valid")
    }

    pub fn d(&self) -> usize {
        self.index_sets.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.index_sets.iter().map(|s| 1usize << s.len()).collect()
    }

    pub fn m(&self) -> usize {
        self.dims().iter().sum()
    }

    fn mask(&self, i: usize) -> u32 {
        self.index_sets[i].iter().fold(0, |m, &j| m | 1 << (j - 1))
    }

    /// Symbols of `X_i`: one `+`/`-` per included bit, in ascending bit order.
    /// The first included bit is the most significant in the symbol index, and
    /// `+` sorts before `-`.
    pub fn alphabet(&self, i: usize) -> Alphabet {
        let len = self.index_sets[i].len();
        let symbols = (0..1usize << len).map(|idx| {
            (0..len)
                .map(|t| if idx >> (len - 1 - t) & 1 == 0 { '+' } else { '-' })
                .collect::<String>()
        });
        Alphabet::new(symbols).expect("distinct by construction")
    }

    /// Symbol index of `X_i` for the bit pattern `p` (bit `j` of the pattern
    /// set means `b_{j+1} = -1`).
    pub fn symbol_index(&self, i: usize, pattern: u32) -> usize {
        let set = &self.index_sets[i];
        let len = set.len();
        set.iter()
            .enumerate()
            .fold(0, |acc, (t, &j)| acc | (((pattern >> (j - 1)) & 1) as usize) << (len - 1 - t))
    }

    /// `b_j` (`j` 1-based) for pattern `p`.
    pub fn bit(pattern: u32, j: usize) -> f64 {
        if pattern >> (j - 1) & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// `prod_{j in J} b_j` as a function over all `2^r` patterns.
    pub fn parity(&self, subset: &[usize]) -> Vec<f64> {
        (0..1u32 << self.r)
            .map(|p| subset.iter().map(|&j| Self::bit(p, j)).product())
            .collect()
    }

    /// `sum_i f_i^(l)(X_i)` as a function over all `2^r` patterns.
    pub fn sum_function(&self, fs: &FeatureSet, l: usize) -> Vec<f64> {
        (0..1u32 << self.r)
            .map(|p| (0..self.d()).map(|i| fs.table(i)[(self.symbol_index(i, p), l)]).sum())
            .collect()
    }

    /// Every subset `J` (including the empty one), ordered by weight descending,
    /// then size ascending, then lexicographically.
    pub fn modes(&self) -> Vec<Mode> {
        let masks: Vec<u32> = (0..self.d()).map(|i| self.mask(i)).collect();
        let mut modes: Vec<Mode> = (0..1u32 << self.r)
            .map(|j| Mode {
                subset: (1..=self.r).filter(|&b| j >> (b - 1) & 1 == 1).collect(),
                weight: masks.iter().filter(|&&mi| j & !mi == 0).count(),
            })
            .collect();
        modes.sort_by(|a, b| {
            b.weight
                .cmp(&a.weight)
                .then(a.subset.len().cmp(&b.subset.len()))
                .then(a.subset.cmp(&b.subset))
        });
        modes
    }
}

/// Exact joint: uniform over the `2^r` bit patterns, each `X_i` a projection.
/// Every probability is a dyadic rational, so all tables are exact.
pub fn bits_joint(inst: &BitsInstance) -> Result<DistributionSet> {
    if inst.r > MAX_BITS {
        return Err(Error::Capacity(format!("r = {} exceeds the limit of {MAX_BITS} bits", inst.r)));
    }
    let dims = inst.dims();
    let cells = dims
        .iter()
        .try_fold(1usize, |a, &s| a.checked_mul(s))
        .filter(|&c| c <= crate::dataset::joint_cap())
        .ok_or_else(|| {
            Error::Capacity(format!(
                "joint over alphabets {dims:?} exceeds the cap of {} cells",
                crate::dataset::joint_cap()
            ))
        })?;
    let mut probs = vec![0.0; cells];
    let table = JointTable::new(dims.clone(), vec![0.0; cells])?;
    let w = (0.5f64).powi(inst.r as i32);
    let mut x = vec![0usize; inst.d()];
    for p in 0..1u32 << inst.r {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = inst.symbol_index(i, p);
        }
        probs[table.index(&x)] += w;
    }
    let alphabets = (0..inst.d()).map(|i| inst.alphabet(i)).collect();
    let names = (1..=inst.d()).map(|i| format!("X{i}")).collect();
    Ok(distribution_from_joint_unchecked(names, alphabets, JointTable::new(dims, probs)?))
}

/// Analytic spectrum of `B`: the nonzero weights `w(J)` padded with zeros to `m`,
/// sorted descending.
pub fn bits_spectrum(inst: &BitsInstance) -> Vec<f64> {
    let mut vals: Vec<f64> = inst
        .modes()
        .iter()
        .filter(|md| md.weight > 0)
        .map(|md| md.weight as f64)
        .collect();
    vals.resize(inst.m(), 0.0);
    vals
}

fn feature_table(inst: &BitsInstance, mode: &Mode, i: usize) -> Vec<f64> {
    let set = &inst.index_sets[i];
    let size = 1usize << set.len();
    if !mode.subset.iter().all(|j| set.contains(j)) {
        return vec![0.0; size];
    }
    let scale = 1.0 / (mode.weight as f64).sqrt();
    (0..size)
        .map(|idx| {
            let len = set.len();
            let prod: f64 = mode
                .subset
                .iter()
                .map(|j| {
                    let t = set.iter().position(|s| s == j).expect("subset of set");
                    if idx >> (len - 1 - t) & 1 == 0 {
                        1.0
                    } else {
                        -1.0
                    }
                })
                .product();
            scale * prod
        })
        .collect()
}

/// Analytic feature column `l` (1-based over the informative modes):
/// `f_i(x_i) = prod_{j in J} b_j / sqrt(w(J))` when `J` is inside `I_i`, else 0.
pub fn bits_features(inst: &BitsInstance, l: usize) -> Result<FeatureSet> {
    bits_features_k(inst, &[l])
}

/// Analytic feature columns for the listed mode indices (1-based).
pub fn bits_features_k(inst: &BitsInstance, ls: &[usize]) -> Result<FeatureSet> {
    let modes = inst.modes();
    for &l in ls {
        if l == 0 {
            return Err(Error::Domain("mode 0 is the constant mode, not a feature".into()));
        }
        if l >= modes.len() || modes[l].weight == 0 {
            return Err(Error::Domain(format!("mode {l} has weight 0")));
        }
    }
    let tables = (0..inst.d())
        .map(|i| {
            let size = 1usize << inst.index_sets[i].len();
            let cols: Vec<Vec<f64>> = ls.iter().map(|&l| feature_table(inst, &modes[l], i)).collect();
            DMatrix::from_fn(size, ls.len(), |a, c| cols[c][a])
        })
        .collect();
    let names = (1..=inst.d()).map(|i| format!("X{i}")).collect();
    let alphabets = (0..inst.d()).map(|i| inst.alphabet(i)).collect();
    let hint = ls.iter().map(|&l| modes[l].weight as f64).collect();
    FeatureSet::new(names, alphabets, tables, Some(hint))
}
