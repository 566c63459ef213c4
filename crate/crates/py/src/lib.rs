//! Python module `elastoreg`: point clouds, synthetic scenarios, single-pair
//! registration, checkpoint inference and the evaluation metrics.
//!
//! Clouds cross the boundary as lists of `[x, y, z]`; metrics come back as
//! plain dicts. Training releases the interpreter lock.

use elastoreg_core::engine::{self, EngineError, PairExtras};
use elastoreg_core::geometry::{self, PointFilter};
use elastoreg_core::io;
use elastoreg_core::synthdata::{self, ScenarioError};
use elastoreg_core::{
    elasticity, Compartment, PointSet, RegModel, Region, Scenario, TrainConfig, Vec3,
};
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

create_exception!(
    elastoreg,
    NumericalError,
    PyRuntimeError,
    "Training produced a non-finite loss."
);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn engine_err(e: EngineError) -> PyErr {
    match e {
        EngineError::NonFinite { .. } => NumericalError::new_err(e.to_string()),
        other => value_err(other),
    }
}

fn scenario_err(e: ScenarioError) -> PyErr {
    value_err(e)
}

/// Labelled 3-D point cloud (mm).
#[pyclass(name = "PointCloud", module = "elastoreg", frozen)]
pub struct PyPointCloud {
    inner: PointSet,
}

fn parse_labels<T: Copy>(
    given: Option<Vec<String>>,
    n: usize,
    default: T,
    parse: impl Fn(&str) -> Option<T>,
    what: &str,
) -> PyResult<Vec<T>> {
    match given {
        None => Ok(vec![default; n]),
        Some(labels) => labels
            .iter()
            .map(|l| parse(l).ok_or_else(|| value_err(format!("unknown {what} label `{l}`"))))
            .collect(),
    }
}

#[pymethods]
impl PyPointCloud {
    /// Region labels default to `"internal"`, compartments to `"rigid"`.
    #[new]
    #[pyo3(signature = (points, region=None, compartment=None, subject_id=""))]
    fn new(
        points: Vec<[f64; 3]>,
        region: Option<Vec<String>>,
        compartment: Option<Vec<String>>,
        subject_id: &str,
    ) -> PyResult<Self> {
        let n = points.len();
        let region = parse_labels(
            region,
            n,
            Region::Internal,
            |s| match s {
                "surface" => Some(Region::Surface),
                "internal" => Some(Region::Internal),
                _ => None,
            },
            "region",
        )?;
        let compartment = parse_labels(
            compartment,
            n,
            Compartment::Rigid,
            |s| match s {
                "rigid" => Some(Compartment::Rigid),
                "soft" => Some(Compartment::Soft),
                _ => None,
            },
            "compartment",
        )?;
        let inner = PointSet::new(points, region, compartment, subject_id).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read_csv(path: &str) -> PyResult<Self> {
        let inner = io::read_point_set(std::path::Path::new(path)).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        io::write_point_set(std::path::Path::new(path), &self.inner).map_err(value_err)
    }

    #[getter]
    fn points(&self) -> Vec<[f64; 3]> {
        self.inner.points.clone()
    }

    #[getter]
    fn region(&self) -> Vec<&'static str> {
        self.inner.region.iter().map(|r| r.as_str()).collect()
    }

    #[getter]
    fn compartment(&self) -> Vec<&'static str> {
        self.inner.compartment.iter().map(|c| c.as_str()).collect()
    }

    #[getter]
    fn subject_id(&self) -> String {
        self.inner.subject_id.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "PointCloud(subject_id={:?}, n={})",
            self.inner.subject_id,
            self.inner.len()
        )
    }
}

fn to_python<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_python(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, to_python(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn load_scenario(scenario: &str) -> PyResult<Scenario> {
    match Scenario::preset(scenario) {
        Some(s) => Ok(s),
        None => serde_json::from_str(scenario).map_err(|e| {
            value_err(format!(
                "`{scenario}` is neither a preset name nor scenario JSON: {e}"
            ))
        }),
    }
}

/// Synthetic pair from a preset name (`"S1"` to `"S5"`) or scenario JSON.
/// Returns `(source, target, truth_displacements)`.
#[pyfunction]
#[pyo3(signature = (scenario, seed=None))]
fn generate(
    scenario: &str,
    seed: Option<u64>,
) -> PyResult<(PyPointCloud, PyPointCloud, Vec<[f64; 3]>)> {
    let mut s = load_scenario(scenario)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let (source, target, truth) = synthdata::generate(&s).map_err(scenario_err)?;
    Ok((
        PyPointCloud { inner: source },
        PyPointCloud { inner: target },
        truth.displacement_field,
    ))
}

fn load_config(config: Option<&str>) -> PyResult<TrainConfig> {
    let cfg = match config {
        Some(text) => TrainConfig::from_json(text).map_err(engine_err)?,
        None => TrainConfig::default(),
    };
    cfg.validate().map_err(engine_err)?;
    Ok(cfg)
}

type PairOutput<'py> = (PyPointCloud, Vec<Vec3>, Bound<'py, PyAny>);

fn pair_output<'py>(
    py: Python<'py>,
    result: engine::RegistrationResult,
) -> PyResult<PairOutput<'py>> {
    let metrics = serde_json::to_value(&result.metrics).map_err(value_err)?;
    Ok((
        PyPointCloud {
            inner: result.warped_points,
        },
        result.displacement_field,
        to_python(py, &metrics)?,
    ))
}

/// Trains a freshly seeded model on one pair. `config` is training-config
/// JSON; `truth` enables rmse. Returns `(warped, displacements, metrics)`.
#[pyfunction]
#[pyo3(signature = (source, target, config=None, truth=None))]
fn register<'py>(
    py: Python<'py>,
    source: &PyPointCloud,
    target: &PyPointCloud,
    config: Option<&str>,
    truth: Option<Vec<[f64; 3]>>,
) -> PyResult<PairOutput<'py>> {
    let cfg = load_config(config)?;
    if cfg.supervised.is_some() {
        return Err(value_err(
            "pass ground truth through `truth`; `supervised` is file based",
        ));
    }
    let (s, t) = (&source.inner, &target.inner);
    let result = py
        .detach(|| {
            let extras = PairExtras {
                landmarks: &[],
                truth: truth.as_deref(),
                supervise: false,
            };
            engine::train_single_pair(s, t, &cfg, &extras)
        })
        .map_err(engine_err)?;
    pair_output(py, result)
}

/// Forward-only registration with a checkpoint file.
#[pyfunction]
#[pyo3(signature = (checkpoint, source, target, config=None, truth=None))]
fn infer<'py>(
    py: Python<'py>,
    checkpoint: &str,
    source: &PyPointCloud,
    target: &PyPointCloud,
    config: Option<&str>,
    truth: Option<Vec<[f64; 3]>>,
) -> PyResult<PairOutput<'py>> {
    let model = RegModel::load(std::path::Path::new(checkpoint)).map_err(value_err)?;
    let cfg = load_config(config)?;
    let extras = PairExtras {
        landmarks: &[],
        truth: truth.as_deref(),
        supervise: false,
    };
    let result = engine::register(
        &model,
        &source.inner,
        &target.inner,
        &cfg.loss_config(),
        &extras,
    )
    .map_err(engine_err)?;
    pair_output(py, result)
}

/// `(lambda, mu)` in the units of `young`.
#[pyfunction]
fn lame_from_e_nu(young: f64, nu: f64) -> PyResult<(f64, f64)> {
    elasticity::lame_from_e_nu(young, nu).map_err(value_err)
}

/// Half the sum of the two mean nearest-neighbour distances (mm).
#[pyfunction]
fn chamfer_distance(warped: Vec<[f64; 3]>, target: Vec<[f64; 3]>) -> PyResult<f64> {
    geometry::chamfer_distance_metric(&warped, &target).map_err(value_err)
}

/// Mean residual after removing the best rigid fit; optionally restricted
/// to one compartment of the internal points.
#[pyfunction]
#[pyo3(signature = (source, warped, compartment=None))]
fn deformation_magnitude(
    source: &PyPointCloud,
    warped: Vec<[f64; 3]>,
    compartment: Option<&str>,
) -> PyResult<f64> {
    let filter = match compartment {
        None => PointFilter::ALL,
        Some("rigid") => PointFilter::internal(Compartment::Rigid),
        Some("soft") => PointFilter::internal(Compartment::Soft),
        Some(other) => return Err(value_err(format!("unknown compartment `{other}`"))),
    };
    geometry::deformation_magnitude(&source.inner, &warped, filter).map_err(value_err)
}

#[pyfunction]
fn rmse(predicted: Vec<[f64; 3]>, ground_truth: Vec<[f64; 3]>) -> PyResult<f64> {
    geometry::rmse(&predicted, &ground_truth).map_err(value_err)
}

#[pymodule]
fn elastoreg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointCloud>()?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(register, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add_function(wrap_pyfunction!(lame_from_e_nu, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer_distance, m)?)?;
    m.add_function(wrap_pyfunction!(deformation_magnitude, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    Ok(())
}
