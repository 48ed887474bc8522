//! Chaotic ODE systems and a fixed-step classical Runge-Kutta integrator.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest phase-space dimension among the built-in systems.
pub const MAX_DIM: usize = 3;

/// Any coordinate beyond this magnitude is treated as divergence.
pub const DIVERGENCE_BOUND: f64 = 1e6;

/// Upper bound on the step size accepted for the built-in systems.
pub const MAX_STABLE_DT: f64 = 0.1;

pub const DEFAULT_DT: f64 = 0.01;

/// A point in phase space. Small and `Copy`, so the integrator never allocates.
#[derive(Clone, Copy, PartialEq)]
pub struct State {
    dim: usize,
    coords: [f64; MAX_DIM],
}

impl State {
    pub fn new(coords: &[f64]) -> Result<Self> {
        if coords.is_empty() || coords.len() > MAX_DIM {
            return Err(Error::DimensionMismatch {
                expected: MAX_DIM,
                got: coords.len(),
            });
        }
        let mut c = [0.0; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        Ok(State {
            dim: coords.len(),
            coords: c,
        })
    }

    pub fn xyz(x: f64, y: f64, z: f64) -> Self {
        State {
            dim: 3,
            coords: [x, y, z],
        }
    }

    fn zeros(dim: usize) -> Self {
        State {
            dim,
            coords: [0.0; MAX_DIM],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coords[..self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.as_slice().iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self + h * other`
    pub fn axpy(&self, h: f64, other: &State) -> State {
        let mut out = *self;
        for i in 0..self.dim {
            out.coords[i] += h * other.coords[i];
        }
        out
    }

    pub fn sub(&self, other: &State) -> State {
        self.axpy(-1.0, other)
    }

    pub fn lerp(&self, other: &State, a: f64) -> State {
        let mut out = *self;
        for i in 0..self.dim {
            out.coords[i] = self.coords[i] + a * (other.coords[i] - self.coords[i]);
        }
        out
    }
}

impl std::ops::Index<usize> for State {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.as_slice()[i]
    }
}

impl std::ops::IndexMut<usize> for State {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.coords[..self.dim][i]
    }
}

impl fmt::Debug for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.as_slice()).finish()
    }
}

impl Serialize for State {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.as_slice().serialize(s)
    }
}

impl<'de> Deserialize<'de> for State {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        State::new(&v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Rossler,
    Lorenz,
    /// ẋ = −x, used to verify the integrator against a closed form.
    LinearDecay,
}

impl SystemKind {
    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "rossler" | "rössler" => Ok(SystemKind::Rossler),
            "lorenz" => Ok(SystemKind::Lorenz),
            "linear_decay" => Ok(SystemKind::LinearDecay),
            _ => Err(Error::UnknownSystem(name.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::Rossler => "rossler",
            SystemKind::Lorenz => "lorenz",
            SystemKind::LinearDecay => "linear_decay",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            SystemKind::Rossler | SystemKind::Lorenz => 3,
            SystemKind::LinearDecay => 1,
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            SystemKind::Rossler => &["a", "b", "c"],
            SystemKind::Lorenz => &["sigma", "R", "beta"],
            SystemKind::LinearDecay => &[],
        }
    }
}

/// A named ODE system with its parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemDef {
    kind: SystemKind,
    params: Vec<f64>,
}

impl SystemDef {
    pub fn new(kind: SystemKind, params: Vec<f64>) -> Result<Self> {
        let names = kind.param_names();
        if params.len() != names.len() {
            return Err(Error::InvalidParameter(format!(
                "{} expects {} parameters ({}), got {}",
                kind.name(),
                names.len(),
                names.join(", "),
                params.len()
            )));
        }
        if let Some((i, v)) = params.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "parameter {} = {v} is not finite",
                names[i]
            )));
        }
        Ok(SystemDef { kind, params })
    }

    pub fn rossler(a: f64, b: f64, c: f64) -> Result<Self> {
        Self::new(SystemKind::Rossler, vec![a, b, c])
    }

    pub fn lorenz(sigma: f64, r: f64, beta: f64) -> Result<Self> {
        Self::new(SystemKind::Lorenz, vec![sigma, r, beta])
    }

    pub fn linear_decay() -> Self {
        SystemDef {
            kind: SystemKind::LinearDecay,
            params: Vec::new(),
        }
    }

    /// Builds a system from its name and a `name -> value` parameter table.
    /// Every slot must be present and no extra names are accepted.
    pub fn from_named(name: &str, params: &BTreeMap<String, f64>) -> Result<Self> {
        let kind = SystemKind::from_name(name)?;
        let names = kind.param_names();
        if let Some(extra) = params.keys().find(|k| !names.contains(&k.as_str())) {
            return Err(Error::UnknownParameter {
                system: kind.name().into(),
                name: extra.clone(),
            });
        }
        let values = names
            .iter()
            .map(|n| {
                params.get(*n).copied().ok_or_else(|| {
                    Error::InvalidParameter(format!("{} is missing parameter `{n}`", kind.name()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(kind, values)
    }

    pub fn kind(&self) -> SystemKind {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn named_params(&self) -> BTreeMap<String, f64> {
        self.kind
            .param_names()
            .iter()
            .zip(&self.params)
            .map(|(n, v)| (n.to_string(), *v))
            .collect()
    }

    pub fn param(&self, name: &str) -> Result<f64> {
        let i = self.param_index(name)?;
        Ok(self.params[i])
    }

    pub fn with_param(&self, name: &str, value: f64) -> Result<Self> {
        let i = self.param_index(name)?;
        let mut params = self.params.clone();
        params[i] = value;
        Self::new(self.kind, params)
    }

    fn param_index(&self, name: &str) -> Result<usize> {
        self.kind
            .param_names()
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::UnknownParameter {
                system: self.name().into(),
                name: name.into(),
            })
    }

    /// Right-hand side of the ODE.
    pub fn derivative(&self, s: &State) -> Result<State> {
        if s.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: s.dim(),
            });
        }
        Ok(self.rhs(s))
    }

    #[inline]
    fn rhs(&self, s: &State) -> State {
        let p = &self.params;
        let c = &s.coords;
        match self.kind {
            SystemKind::Rossler => {
                let (a, b, cc) = (p[0], p[1], p[2]);
                State::xyz(-c[1] - c[2], c[0] + a * c[1], b + c[2] * (c[0] - cc))
            }
            SystemKind::Lorenz => {
                let (sigma, r, beta) = (p[0], p[1], p[2]);
                State::xyz(
                    sigma * (c[1] - c[0]),
                    r * c[0] - c[1] - c[0] * c[2],
                    -beta * c[2] + c[0] * c[1],
                )
            }
            SystemKind::LinearDecay => {
                let mut out = State::zeros(1);
                out.coords[0] = -c[0];
                out
            }
        }
    }

    /// Closed-form equilibria. `complex_roots_dropped` is set when a conjugate
    /// pair of equilibria exists only in the complex domain.
    pub fn fixed_points(&self) -> FixedPoints {
        let p = &self.params;
        match self.kind {
            SystemKind::Lorenz => {
                let (r, beta) = (p[1], p[2]);
                let mut points = vec![State::xyz(0.0, 0.0, 0.0)];
                let q = beta * (r - 1.0);
                if q > 0.0 {
                    let w = q.sqrt();
                    points.push(State::xyz(w, w, r - 1.0));
                    points.push(State::xyz(-w, -w, r - 1.0));
                }
                FixedPoints {
                    points,
                    complex_roots_dropped: q < 0.0,
                }
            }
            SystemKind::Rossler => {
                // a z^2 - c z + b = 0 with x = a z, y = -z
                let (a, b, c) = (p[0], p[1], p[2]);
                let disc = c * c - 4.0 * a * b;
                if disc < 0.0 {
                    return FixedPoints {
                        points: Vec::new(),
                        complex_roots_dropped: true,
                    };
                }
                let sq = disc.sqrt();
                let mut roots = Vec::with_capacity(2);
                if a == 0.0 {
                    if c != 0.0 {
                        roots.push(b / c);
                    }
                } else {
                    // stable pairing of the two roots
                    let big = (c + c.signum() * sq) / (2.0 * a);
                    let small = if big != 0.0 { b / (a * big) } else { 0.0 };
                    roots.push(small);
                    if disc > 0.0 {
                        roots.push(big);
                    }
                    roots.sort_by(|u, v| u.abs().total_cmp(&v.abs()));
                }
                let points = roots.into_iter().map(|z| State::xyz(a * z, -z, z)).collect();
                FixedPoints {
                    points,
                    complex_roots_dropped: false,
                }
            }
            SystemKind::LinearDecay => FixedPoints {
                points: vec![State::zeros(1)],
                complex_roots_dropped: false,
            },
        }
    }
}

impl fmt::Display for SystemDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.name())?;
        for (i, (n, v)) in self.kind.param_names().iter().zip(&self.params).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{n}={v}")?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoints {
    pub points: Vec<State>,
    pub complex_roots_dropped: bool,
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Precondition(format!("step size must be > 0, got {dt}")));
    }
    Ok(())
}

/// One classical four-stage Runge-Kutta step.
pub fn rk4_step(system: &SystemDef, s: &State, dt: f64) -> Result<State> {
    check_dt(dt)?;
    if s.dim() != system.dim() {
        return Err(Error::DimensionMismatch {
            expected: system.dim(),
            got: s.dim(),
        });
    }
    rk4_unchecked(system, s, dt)
}

#[inline]
pub(crate) fn rk4_unchecked(system: &SystemDef, s: &State, dt: f64) -> Result<State> {
    let stage = |k: State, name: &'static str| {
        if k.is_finite() {
            Ok(k)
        } else {
            Err(Error::NonFiniteStage { stage: name })
        }
    };
    let k1 = stage(system.rhs(s), "k1")?;
    let k2 = stage(system.rhs(&s.axpy(0.5 * dt, &k1)), "k2")?;
    let k3 = stage(system.rhs(&s.axpy(0.5 * dt, &k2)), "k3")?;
    let k4 = stage(system.rhs(&s.axpy(dt, &k3)), "k4")?;
    let mut out = *s;
    for i in 0..s.dim {
        out.coords[i] += dt / 6.0 * (k1.coords[i] + 2.0 * k2.coords[i] + 2.0 * k3.coords[i] + k4.coords[i]);
    }
    stage(out, "update")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub dt: f64,
    /// Number of recorded samples.
    pub steps: usize,
    /// Steps integrated and discarded before the first recorded sample.
    #[serde(default)]
    pub transient_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            dt: DEFAULT_DT,
            steps: 100_000,
            transient_steps: 10_000,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self, system: &SystemDef) -> Result<()> {
        check_dt(self.dt)?;
        if system.kind() != SystemKind::LinearDecay && self.dt > MAX_STABLE_DT {
            return Err(Error::Precondition(format!(
                "dt = {} exceeds the stability guard {MAX_STABLE_DT} for {}",
                self.dt,
                system.name()
            )));
        }
        if self.steps == 0 {
            return Err(Error::Precondition("steps must be > 0".into()));
        }
        Ok(())
    }
}

/// Uniformly sampled solution: `samples[k]` is the state at `t0 + k * dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    pub samples: Vec<State>,
}

impl Trajectory {
    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let dim = self.samples.first().map_or(MAX_DIM, State::dim);
        write!(w, "t")?;
        for i in 0..dim {
            write!(w, ",x{i}")?;
        }
        writeln!(w)?;
        for (k, s) in self.samples.iter().enumerate() {
            write!(w, "{:.16e}", self.time(k))?;
            for v in s.as_slice() {
                write!(w, ",{v:.16e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Reads the CSV written by [`Trajectory::write_csv`]. Times are rebuilt
    /// from the first row and `dt`; rows deviating from that grid are rejected.
    pub fn read_csv<R: BufRead>(r: R, dt: f64) -> Result<Self> {
        check_dt(dt)?;
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty trajectory file".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.first() != Some(&"t") || cols.len() < 2 {
            return Err(Error::Parse(format!("bad trajectory header `{header}`")));
        }
        let dim = cols.len() - 1;
        let mut t0 = None;
        let mut samples = Vec::new();
        for (row, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("row {}: {e}", row + 2)))?;
            if vals.len() != dim + 1 {
                return Err(Error::Parse(format!(
                    "row {}: expected {} columns",
                    row + 2,
                    dim + 1
                )));
            }
            let t0v = *t0.get_or_insert(vals[0]);
            let expect = t0v + samples.len() as f64 * dt;
            if (vals[0] - expect).abs() > 1e-6 * dt.max(expect.abs() * 1e-9) + 1e-9 {
                return Err(Error::Parse(format!(
                    "row {}: time {} is off the uniform grid (expected {expect})",
                    row + 2,
                    vals[0]
                )));
            }
            samples.push(State::new(&vals[1..])?);
        }
        Ok(Trajectory {
            t0: t0.unwrap_or(0.0),
            dt,
            samples,
        })
    }
}

/// Stepwise integrator state, used by consumers that stream over a long
/// solution without storing it.
#[derive(Debug, Clone)]
pub struct Flow<'a> {
    system: &'a SystemDef,
    state: State,
    dt: f64,
    step: usize,
    t0: f64,
}

impl<'a> Flow<'a> {
    pub fn new(system: &'a SystemDef, s0: State, dt: f64) -> Result<Self> {
        check_dt(dt)?;
        if s0.dim() != system.dim() {
            return Err(Error::DimensionMismatch {
                expected: system.dim(),
                got: s0.dim(),
            });
        }
        if !s0.is_finite() {
            return Err(Error::Precondition("initial state is not finite".into()));
        }
        Ok(Flow {
            system,
            state: s0,
            dt,
            step: 0,
            t0: 0.0,
        })
    }

    pub fn starting_at(mut self, t0: f64) -> Self {
        self.t0 = t0;
        self
    }

    pub fn state(&self) -> State {
        self.state
    }

    pub fn time(&self) -> f64 {
        self.t0 + self.step as f64 * self.dt
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn system(&self) -> &'a SystemDef {
        self.system
    }

    pub fn advance(&mut self) -> Result<State> {
        let next = rk4_unchecked(self.system, &self.state, self.dt)?;
        self.step += 1;
        if next.as_slice().iter().any(|v| v.abs() > DIVERGENCE_BOUND) {
            return Err(Error::Divergence {
                step: self.step,
                bound: DIVERGENCE_BOUND,
            });
        }
        self.state = next;
        Ok(next)
    }

    pub fn advance_by(&mut self, n: usize) -> Result<State> {
        for _ in 0..n {
            self.advance()?;
        }
        Ok(self.state)
    }
}

/// Integrates `cfg.transient_steps` steps silently, then records `cfg.steps`
/// samples starting with the post-transient state.
pub fn integrate(system: &SystemDef, s0: State, cfg: &IntegratorConfig) -> Result<Trajectory> {
    cfg.validate(system)?;
    let mut flow = Flow::new(system, s0, cfg.dt)?;
    flow.advance_by(cfg.transient_steps)?;
    let t0 = flow.time();
    let mut samples = Vec::with_capacity(cfg.steps);
    samples.push(flow.state());
    for _ in 1..cfg.steps {
        samples.push(flow.advance()?);
    }
    Ok(Trajectory {
        t0,
        dt: cfg.dt,
        samples,
    })
}
