//! Python bindings. Reports are returned as plain dicts.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

use commonfeat::bits::{bits_features_k, bits_joint, bits_spectrum, BitsInstance};
use commonfeat::mace::{self, MaceConfig};
use commonfeat::mhscore::{self, HTrainConfig};
use commonfeat::{
    build_b, check_lemma1, complexity, eigendecompose, estimate_distributions, features_from_spectrum, instances,
    json, load_csv, theory, CsvOptions, DistributionSet, EstimateOptions, FeatureSet,
};

create_exception!(commonfeat_py, CommonfeatError, PyException);

fn err(e: commonfeat::Error) -> PyErr {
    CommonfeatError::new_err(format!("{}: {e}", e.kind()))
}

fn to_py(py: Python<'_>, value: &impl Serialize) -> PyResult<Py<PyAny>> {
    let text = json::to_string(value).map_err(|e| CommonfeatError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Marginal and pairwise distributions of d discrete variables.
#[pyclass(name = "Distributions", module = "commonfeat_py")]
struct PyDistributions {
    inner: DistributionSet,
    bits: Option<BitsInstance>,
}

#[pymethods]
impl PyDistributions {
    #[staticmethod]
    #[pyo3(signature = (path, smoothing = 0.0, full_joint = false, delimiter = ',', header = true))]
    fn from_csv(path: &str, smoothing: f64, full_joint: bool, delimiter: char, header: bool) -> PyResult<Self> {
        let opts = CsvOptions {
            delimiter: delimiter as u8,
            has_header: header,
        };
        let ds = load_csv(path, &opts).map_err(err)?;
        let est = EstimateOptions {
            with_full_joint: full_joint,
            smoothing_alpha: smoothing,
            ..Default::default()
        };
        Ok(Self {
            inner: estimate_distributions(&ds, &est).map_err(err)?,
            bits: None,
        })
    }

    /// Uniform bits instance; `sets` uses 1-based bit indices, e.g. [[1, 2], [2, 3]].
    #[staticmethod]
    fn bits(r: usize, sets: Vec<Vec<usize>>) -> PyResult<Self> {
        let inst = BitsInstance::new(r, sets).map_err(err)?;
        Ok(Self {
            inner: bits_joint(&inst).map_err(err)?,
            bits: Some(inst),
        })
    }

    #[staticmethod]
    fn dsbs(p: f64) -> PyResult<Self> {
        Ok(Self {
            inner: instances::dsbs(p).map_err(err)?,
            bits: None,
        })
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.dims()
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.inner.names().to_vec()
    }

    fn marginal(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.d() {
            return Err(pyo3::exceptions::PyIndexError::new_err(i));
        }
        Ok(self.inner.marginal(i).to_vec())
    }

    /// Eigenvalues of B, descending.
    fn spectrum(&self) -> PyResult<Vec<f64>> {
        let spec = eigendecompose(&build_b(&self.inner).map_err(err)?).map_err(err)?;
        Ok(spec.eigenvalues().as_slice().to_vec())
    }

    /// Closed-form spectrum, only for bits instances.
    fn analytic_spectrum(&self) -> Option<Vec<f64>> {
        self.bits.as_ref().map(bits_spectrum)
    }

    /// Analytic features for the given mode indices of a bits instance.
    fn bits_features(&self, modes: Vec<usize>) -> PyResult<PyFeatures> {
        let inst = self
            .bits
            .as_ref()
            .ok_or_else(|| CommonfeatError::new_err("domain: not a bits instance"))?;
        Ok(PyFeatures {
            inner: bits_features_k(inst, &modes).map_err(err)?,
        })
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.to_export())
    }

    fn __repr__(&self) -> String {
        format!("Distributions(d={}, dims={:?})", self.inner.d(), self.inner.dims())
    }
}

/// Per-variable feature tables, one k-column matrix per variable.
#[pyclass(name = "Features", module = "commonfeat_py")]
struct PyFeatures {
    inner: FeatureSet,
}

#[pymethods]
impl PyFeatures {
    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    /// `tables[i][x][l]` is feature l of variable i at symbol x.
    #[getter]
    fn tables(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner
            .tables()
            .iter()
            .map(|t| (0..t.nrows()).map(|r| t.row(r).iter().copied().collect()).collect())
            .collect()
    }

    #[getter]
    fn eigenvalues_hint(&self) -> Option<Vec<f64>> {
        self.inner.eigenvalues_hint().map(<[f64]>::to_vec)
    }

    fn check(&self, py: Python<'_>, dist: &PyDistributions) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.check(&dist.inner))
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.to_export())
    }

    fn __repr__(&self) -> String {
        format!("Features(d={}, k={})", self.inner.d(), self.inner.k())
    }
}

/// Fit the top-k features with "eig", "mace" or "mh".
#[pyfunction]
#[pyo3(signature = (dist, k, method = "eig", seed = 0, max_iters = 500, steps = 5000))]
fn fit(dist: &PyDistributions, k: usize, method: &str, seed: u64, max_iters: usize, steps: usize) -> PyResult<PyFeatures> {
    let d = &dist.inner;
    let fs = match method {
        "eig" => {
            let spec = eigendecompose(&build_b(d).map_err(err)?).map_err(err)?;
            features_from_spectrum(&spec, d, k).map_err(err)?
        }
        "mace" => {
            let cfg = MaceConfig {
                k,
                seed,
                max_iters,
                ..Default::default()
            };
            mace::mace_fit_k(d, &cfg).map_err(err)?.0
        }
        "mh" => {
            let cfg = HTrainConfig {
                k,
                seed,
                steps,
                ..Default::default()
            };
            let fit = mhscore::mh_train(d, &cfg).map_err(err)?;
            mhscore::whiten(&fit.tables, d).map_err(err)?
        }
        other => {
            return Err(pyo3::exceptions::PyValueError::new_err(format!(
                "unknown method {other:?}; expected eig, mace or mh"
            )))
        }
    };
    Ok(PyFeatures { inner: fs })
}

#[pyfunction]
fn joint_correlation(features: &PyFeatures, dist: &PyDistributions) -> PyResult<Vec<f64>> {
    mace::joint_correlation(&features.inner, &dist.inner).map_err(err)
}

#[pyfunction]
fn mh_score(features: &PyFeatures, dist: &PyDistributions) -> PyResult<f64> {
    mhscore::mh_score(&features.inner, &dist.inner).map_err(err)
}

#[pyfunction]
fn check_lemma(py: Python<'_>, dist: &PyDistributions) -> PyResult<Py<PyAny>> {
    let b = build_b(&dist.inner).map_err(err)?;
    let spec = eigendecompose(&b).map_err(err)?;
    #[derive(Serialize)]
    struct Out<'a> {
        passed: bool,
        #[serde(flatten)]
        report: &'a commonfeat::Lemma1Report,
    }
    let report = check_lemma1(&b, &spec, &dist.inner);
    to_py(py, &Out { passed: report.passed(), report: &report })
}

/// Embedding check of the correlation reduction; needs the full joint.
#[pyfunction]
#[pyo3(signature = (dist, k = 1))]
fn verify_theorem(py: Python<'_>, dist: &PyDistributions, k: usize) -> PyResult<Py<PyAny>> {
    let rep = theory::verify_theorem(&dist.inner, k, &theory::DEFAULT_DELTAS).map_err(err)?;
    to_py(py, &rep)
}

#[pyfunction]
#[pyo3(signature = (dist, k = 1))]
fn error_exponent(py: Python<'_>, dist: &PyDistributions, k: usize) -> PyResult<Py<PyAny>> {
    to_py(py, &complexity::error_exponent(&dist.inner, k).map_err(err)?)
}

#[pymodule]
fn commonfeat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CommonfeatError", m.py().get_type::<CommonfeatError>())?;
    m.add_class::<PyDistributions>()?;
    m.add_class::<PyFeatures>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(joint_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(mh_score, m)?)?;
    m.add_function(wrap_pyfunction!(check_lemma, m)?)?;
    m.add_function(wrap_pyfunction!(verify_theorem, m)?)?;
    m.add_function(wrap_pyfunction!(error_exponent, m)?)?;
    Ok(())
}
