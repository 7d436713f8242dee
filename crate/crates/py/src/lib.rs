//! Python module `odedm_py`: a handle around the dual memory for training
//! loops written in Python. Arrays cross the boundary as copies.

use odedm::clustering::DacConfig;
use odedm::memory::{MemoryConfig, SelectionMode};
use odedm::ot::MetricKind;
use odedm::MemoryManager;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: odedm::Error) -> PyErr {
    match e {
        odedm::Error::InvalidArgument { .. }
        | odedm::Error::DimensionMismatch { .. }
        | odedm::Error::Manifest { .. }
        | odedm::Error::Json(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Owns one dual memory. Not safe to share between threads; every call
/// after `close()` raises.
#[pyclass(module = "odedm_py", unsendable)]
pub struct ManagerHandle {
    inner: MemoryManager,
}

#[pymethods]
impl ManagerHandle {
    /// Rows of `features` with matching `labels`; `ids` default to a counter.
    #[pyo3(signature = (features, labels, ids=None))]
    fn observe_batch(&mut self, features: Vec<Vec<f64>>, labels: Vec<u32>, ids: Option<Vec<u64>>) -> PyResult<()> {
        self.inner.observe_batch(&features, &labels, ids.as_deref()).map_err(to_py)
    }

    /// Task-boundary update with all samples of the finished task. Returns
    /// the number of prototypes added.
    #[pyo3(signature = (features, labels, ids=None))]
    fn end_task(&mut self, features: Vec<Vec<f64>>, labels: Vec<u32>, ids: Option<Vec<u64>>) -> PyResult<usize> {
        self.inner.end_task(&features, &labels, ids.as_deref()).map_err(to_py)
    }

    /// `(features, labels)` drawn uniformly with replacement.
    fn replay(&mut self, size: usize) -> PyResult<(Vec<Vec<f64>>, Vec<u32>)> {
        let r = self.inner.replay(size).map_err(to_py)?;
        Ok((r.features, r.labels))
    }

    /// Memory contents as JSON text.
    fn snapshot(&self) -> PyResult<String> {
        self.inner.snapshot().map_err(to_py)
    }

    fn close(&mut self) -> PyResult<()> {
        self.inner.close().map_err(to_py)
    }

    #[getter]
    fn closed(&self) -> bool {
        self.inner.is_closed()
    }
}

/// New handle. `dac` is `(clusters, min_merge, depth)` or `None`.
#[pyfunction]
#[pyo3(signature = (lambda_max, rho, n_tasks, metric="sinkhorn", mode="nearest", dac=None, seed=0, sub_capacity=None))]
#[allow(clippy::too_many_arguments)]
fn create_manager(
    lambda_max: usize,
    rho: f64,
    n_tasks: usize,
    metric: &str,
    mode: &str,
    dac: Option<(usize, usize, usize)>,
    seed: u64,
    sub_capacity: Option<usize>,
) -> PyResult<ManagerHandle> {
    let mut cfg = MemoryConfig::new(lambda_max, rho, n_tasks);
    cfg.metric = metric.parse::<MetricKind>().map_err(to_py)?;
    cfg.selection = mode.parse::<SelectionMode>().map_err(to_py)?;
    cfg.dac = dac.map(|(clusters, min_merge, depth)| DacConfig {
        clusters,
        min_merge,
        depth,
    });
    cfg.sub_buffer_capacity = sub_capacity;
    cfg.seed = seed;
    Ok(ManagerHandle {
        inner: MemoryManager::new(cfg).map_err(to_py)?,
    })
}

#[pymodule]
fn odedm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<ManagerHandle>()?;
    m.add_function(wrap_pyfunction!(create_manager, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
