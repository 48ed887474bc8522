//! Python bindings. Structured results cross the boundary as plain
//! dicts and lists built from the serde representation of the core types.

use std::collections::BTreeMap;

use chaomob::dynsys::{integrate, IntegratorConfig, State, SystemDef};
use chaomob::metrics::{coverage_rate, lle_benettin, LleConfig};
use chaomob::mobility::{
    generate_scenario_traces, generate_uav_trace, random_walk_trace, AgentTrace, CacocModel, Rect,
    ScenarioGeometry, ScenarioModel, UavConfig,
};
use chaomob::returnmap::{
    build_partial_return_map, detect_tearing, extract_periodic_orbits, roles_of, transition_matrix,
    PartialReturnMap, DEFAULT_ORBIT_TOL, DEFAULT_SEGMENT_BUDGET,
};
use chaomob::section::{
    build_rho_series, calibrate_all, lorenz_components, rossler_component, SectionComponent,
};
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn err(e: chaomob::Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj
        .py()
        .import("json")?
        .call_method1("dumps", (obj,))?
        .extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn state(v: &[f64]) -> PyResult<State> {
    State::new(v).map_err(err)
}

fn icfg(dt: f64, steps: usize, transient_steps: usize) -> IntegratorConfig {
    IntegratorConfig {
        dt,
        steps,
        transient_steps,
    }
}

/// A named ODE system with its parameters.
#[pyclass(name = "System", frozen, module = "chaomob")]
struct PySystem {
    inner: SystemDef,
}

#[pymethods]
impl PySystem {
    #[new]
    fn new(name: &str, params: BTreeMap<String, f64>) -> PyResult<Self> {
        Ok(PySystem {
            inner: SystemDef::from_named(name, &params).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (a = 0.1775, b = 0.215, c = 5.995))]
    fn rossler(a: f64, b: f64, c: f64) -> PyResult<Self> {
        Ok(PySystem {
            inner: SystemDef::rossler(a, b, c).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (sigma = 10.0, r = 70.0, beta = 8.0 / 3.0))]
    fn lorenz(sigma: f64, r: f64, beta: f64) -> PyResult<Self> {
        Ok(PySystem {
            inner: SystemDef::lorenz(sigma, r, beta).map_err(err)?,
        })
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.inner.name()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn params(&self) -> BTreeMap<String, f64> {
        self.inner.named_params()
    }

    fn with_param(&self, name: &str, value: f64) -> PyResult<Self> {
        Ok(PySystem {
            inner: self.inner.with_param(name, value).map_err(err)?,
        })
    }

    fn derivative(&self, s: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self
            .inner
            .derivative(&state(&s)?)
            .map_err(err)?
            .as_slice()
            .to_vec())
    }

    /// States sampled every `dt` after discarding `transient_steps`.
    #[pyo3(signature = (s0, steps, dt = 0.01, transient_steps = 0))]
    fn integrate(
        &self,
        py: Python<'_>,
        s0: Vec<f64>,
        steps: usize,
        dt: f64,
        transient_steps: usize,
    ) -> PyResult<Vec<Vec<f64>>> {
        let s0 = state(&s0)?;
        let traj = py
            .detach(|| integrate(&self.inner, s0, &icfg(dt, steps, transient_steps)))
            .map_err(err)?;
        Ok(traj.samples.iter().map(|s| s.as_slice().to_vec()).collect())
    }

    #[pyo3(signature = (s0, dt = 0.01, transient = 100.0, span = 5000.0, renorm_interval = 1.0, d0 = 1e-8))]
    #[allow(clippy::too_many_arguments)]
    fn lyapunov<'py>(
        &self,
        py: Python<'py>,
        s0: Vec<f64>,
        dt: f64,
        transient: f64,
        span: f64,
        renorm_interval: f64,
        d0: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let s0 = state(&s0)?;
        let cfg = LleConfig {
            dt,
            transient,
            span,
            renorm_interval,
            d0,
        };
        let est = py.detach(|| lle_benettin(&self.inner, s0, &cfg)).map_err(err)?;
        to_py(py, &est)
    }

    fn __repr__(&self) -> String {
        format!("System({})", self.inner)
    }
}

/// A multi-component Poincaré section.
#[pyclass(name = "Section", frozen, module = "chaomob")]
struct PySection {
    components: Vec<SectionComponent>,
}

#[pymethods]
impl PySection {
    /// Components given as dicts with the fields id, index, coord, level,
    /// direction (1 or -1), role, norm_coord and optionally norm_range, reversed.
    #[new]
    fn new(components: &Bound<'_, PyAny>) -> PyResult<Self> {
        Ok(PySection {
            components: from_py(components)?,
        })
    }

    #[staticmethod]
    fn rossler() -> Self {
        PySection {
            components: vec![rossler_component()],
        }
    }

    #[staticmethod]
    fn lorenz() -> Self {
        PySection {
            components: lorenz_components(),
        }
    }

    #[getter]
    fn components<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.components)
    }

    fn is_calibrated(&self) -> bool {
        self.components.iter().all(|c| c.norm_range.is_some())
    }

    /// Copy with normalization ranges taken from a trajectory of `system`.
    #[pyo3(signature = (system, s0, steps, dt = 0.01, transient_steps = 10_000))]
    fn calibrated(
        &self,
        py: Python<'_>,
        system: &PySystem,
        s0: Vec<f64>,
        steps: usize,
        dt: f64,
        transient_steps: usize,
    ) -> PyResult<Self> {
        let s0 = state(&s0)?;
        let components = py
            .detach(|| {
                let traj = integrate(&system.inner, s0, &icfg(dt, steps, transient_steps))?;
                calibrate_all(&traj, &self.components, Some(&system.inner))
            })
            .map_err(err)?;
        Ok(PySection { components })
    }

    /// ρ of a raw section coordinate on component `id`.
    fn normalize(&self, id: &str, value: f64) -> PyResult<f64> {
        let c = self
            .components
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| PyValueError::new_err(format!("no component `{id}`")))?;
        Ok(c.normalize(value).map_err(err)?.rho)
    }

    /// Time-ordered crossings as a list of (component, time, rho).
    #[pyo3(signature = (system, s0, steps, dt = 0.01, transient_steps = 10_000))]
    fn rho_series(
        &self,
        py: Python<'_>,
        system: &PySystem,
        s0: Vec<f64>,
        steps: usize,
        dt: f64,
        transient_steps: usize,
    ) -> PyResult<Vec<(String, f64, f64)>> {
        let s0 = state(&s0)?;
        let series = py
            .detach(|| {
                let traj = integrate(&system.inner, s0, &icfg(dt, steps, transient_steps))?;
                build_rho_series(&traj, &self.components, Some(&system.inner))
            })
            .map_err(err)?;
        Ok(series
            .crossings
            .into_iter()
            .map(|c| (c.component, c.time, c.rho))
            .collect())
    }

    /// Partial return map of a trajectory of `system` on this section.
    #[pyo3(signature = (system, s0, steps, dt = 0.01, transient_steps = 10_000, segment_budget = DEFAULT_SEGMENT_BUDGET))]
    #[allow(clippy::too_many_arguments)]
    fn return_map(
        &self,
        py: Python<'_>,
        system: &PySystem,
        s0: Vec<f64>,
        steps: usize,
        dt: f64,
        transient_steps: usize,
        segment_budget: usize,
    ) -> PyResult<PyReturnMap> {
        let s0 = state(&s0)?;
        let inner = py
            .detach(|| {
                let traj = integrate(&system.inner, s0, &icfg(dt, steps, transient_steps))?;
                let series = build_rho_series(&traj, &self.components, Some(&system.inner))?;
                build_partial_return_map(&[series], &roles_of(&self.components), segment_budget)
            })
            .map_err(err)?;
        Ok(PyReturnMap { inner })
    }

    fn __len__(&self) -> usize {
        self.components.len()
    }
}

#[pyclass(name = "ReturnMap", frozen, module = "chaomob")]
struct PyReturnMap {
    inner: PartialReturnMap,
}

#[pymethods]
impl PyReturnMap {
    /// (rho_n, rho_next, from, to) for every pair.
    #[getter]
    fn pairs(&self) -> Vec<(f64, f64, String, String)> {
        self.inner
            .pairs
            .iter()
            .map(|p| (p.rho_n, p.rho_next, p.from.clone(), p.to.clone()))
            .collect()
    }

    #[getter]
    fn segments(&self) -> usize {
        self.inner.segments
    }

    #[getter]
    fn truncated_segments(&self) -> usize {
        self.inner.truncated_segments
    }

    /// Component pairs that occur at least once.
    fn support(&self) -> Vec<(String, String)> {
        transition_matrix(&self.inner).support().into_iter().collect()
    }

    #[pyo3(signature = (period, tol = DEFAULT_ORBIT_TOL))]
    fn periodic_orbits<'py>(&self, py: Python<'py>, period: usize, tol: f64) -> PyResult<Bound<'py, PyAny>> {
        to_py(
            py,
            &extract_periodic_orbits(&self.inner, period, tol).map_err(err)?,
        )
    }

    fn tearing<'py>(&self, py: Python<'py>, from: &str) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &detect_tearing(&self.inner, from).map_err(err)?)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Single-component symbolic UAV model with an L/A/R partition.
#[pyclass(name = "UavModel", frozen, module = "chaomob")]
struct PyUavModel {
    inner: CacocModel,
    kinematics: UavConfig,
}

#[pymethods]
impl PyUavModel {
    #[new]
    #[pyo3(signature = (system, s0, steps = 1_000_000, dt = 0.01, transient_steps = 10_000, breakpoints = None, kinematics = None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        py: Python<'_>,
        system: &PySystem,
        s0: Vec<f64>,
        steps: usize,
        dt: f64,
        transient_steps: usize,
        breakpoints: Option<Vec<f64>>,
        kinematics: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<Self> {
        let kinematics: UavConfig = kinematics.map(from_py).transpose()?.unwrap_or_default();
        kinematics.validate().map_err(err)?;
        let s0 = state(&s0)?;
        let inner = py
            .detach(|| {
                CacocModel::calibrate(
                    &system.inner,
                    &rossler_component(),
                    s0,
                    &icfg(dt, steps, transient_steps),
                    breakpoints.as_deref(),
                )
            })
            .map_err(err)?;
        Ok(PyUavModel { inner, kinematics })
    }

    #[getter]
    fn breakpoints(&self) -> Vec<f64> {
        self.inner.partition.breakpoints.clone()
    }

    #[getter]
    fn period1<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.period1)
    }

    #[getter]
    fn period2<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.period2)
    }

    fn symbol(&self, rho: f64) -> PyResult<char> {
        self.inner.partition.symbol(rho).map_err(err)
    }

    /// Trace dict with an extra `word` entry holding the symbol sequence.
    #[pyo3(signature = (seed, agent_id = 0, duration = 1000.0, max_steps = None))]
    fn trace<'py>(
        &self,
        py: Python<'py>,
        seed: u64,
        agent_id: usize,
        duration: f64,
        max_steps: Option<usize>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let s0 = self.inner.seeded_state(seed, agent_id);
        let t = py
            .detach(|| generate_uav_trace(&self.inner, &self.kinematics, s0, duration, max_steps, agent_id))
            .map_err(err)?;
        to_py(py, &t)
    }
}

/// Three-component visitor scenario (entry, room 1, room 2, exit).
#[pyclass(name = "ScenarioModel", frozen, module = "chaomob")]
struct PyScenarioModel {
    inner: ScenarioModel,
    geometry: ScenarioGeometry,
}

#[pymethods]
impl PyScenarioModel {
    #[new]
    #[pyo3(signature = (system, s0, steps = 100_000, dt = 0.01, transient_steps = 10_000, geometry = None))]
    fn new(
        py: Python<'_>,
        system: &PySystem,
        s0: Vec<f64>,
        steps: usize,
        dt: f64,
        transient_steps: usize,
        geometry: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<Self> {
        let geometry: ScenarioGeometry = geometry.map(from_py).transpose()?.unwrap_or_default();
        geometry.validate().map_err(err)?;
        let s0 = state(&s0)?;
        let inner = py
            .detach(|| {
                ScenarioModel::calibrate(
                    &system.inner,
                    &lorenz_components(),
                    s0,
                    &icfg(dt, steps, transient_steps),
                )
            })
            .map_err(err)?;
        Ok(PyScenarioModel { inner, geometry })
    }

    /// Dict with `traces`, `series`, `time_scale` and `truncated`.
    fn traces<'py>(&self, py: Python<'py>, n_agents: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let run = py
            .detach(|| generate_scenario_traces(n_agents, &self.inner, &self.geometry, seed))
            .map_err(err)?;
        to_py(py, &run)
    }
}

#[pyfunction]
#[pyo3(signature = (seed, duration, agent_id = 0, kinematics = None))]
fn random_walk<'py>(
    py: Python<'py>,
    seed: u64,
    duration: f64,
    agent_id: usize,
    kinematics: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: UavConfig = kinematics.map(from_py).transpose()?.unwrap_or_default();
    to_py(
        py,
        &random_walk_trace(&cfg, seed, duration, agent_id).map_err(err)?,
    )
}

/// Covered fraction of a `width` x `height` grid by a list of trace dicts.
#[pyfunction]
#[pyo3(signature = (traces, width = 100.0, height = 100.0, cell_size = 1.0, sensing_radius = 1.0, periodic = true))]
fn coverage(
    traces: &Bound<'_, PyAny>,
    width: f64,
    height: f64,
    cell_size: f64,
    sensing_radius: f64,
    periodic: bool,
) -> PyResult<f64> {
    let traces: Vec<AgentTrace> = from_py(traces)?;
    let extent = Rect {
        x0: 0.0,
        y0: 0.0,
        x1: width,
        y1: height,
    };
    coverage_rate(&traces, extent, cell_size, sensing_radius, periodic).map_err(err)
}

#[pymodule(name = "chaomob")]
fn chaomob_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PySystem>()?;
    m.add_class::<PySection>()?;
    m.add_class::<PyReturnMap>()?;
    m.add_class::<PyUavModel>()?;
    m.add_class::<PyScenarioModel>()?;
    m.add_function(wrap_pyfunction!(random_walk, m)?)?;
    m.add_function(wrap_pyfunction!(coverage, m)?)?;
    Ok(())
}
