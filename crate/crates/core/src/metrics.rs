//! Coverage, largest Lyapunov exponent and bifurcation scans.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynsys::{Flow, State, SystemDef, MAX_STABLE_DT};
use crate::error::{Error, Result};
use crate::mobility::{AgentTrace, Rect};
use crate::section::{CrossingScanner, RawCrossing, SectionComponent};

pub const MIN_RENORMALIZATIONS: usize = 100;

/// Square-cell grid over a rectangle. A cell counts as covered once its
/// centre lies within the sensing radius of some point of a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageGrid {
    pub extent: Rect,
    pub cell_size: f64,
    /// Minimal-image distances on a torus.
    pub periodic: bool,
    pub nx: usize,
    pub ny: usize,
    pub covered: Vec<bool>,
}

impl CoverageGrid {
    pub fn new(extent: Rect, cell_size: f64, periodic: bool) -> Result<Self> {
        if !(cell_size > 0.0) || !(extent.width() > 0.0) || !(extent.height() > 0.0) {
            return Err(Error::Precondition(
                "coverage grid needs cell_size > 0 and a non-empty extent".into(),
            ));
        }
        let nx = (extent.width() / cell_size).ceil() as usize;
        let ny = (extent.height() / cell_size).ceil() as usize;
        Ok(CoverageGrid {
            extent,
            cell_size,
            periodic,
            nx,
            ny,
            covered: vec![false; nx * ny],
        })
    }

    fn center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.extent.x0 + (i as f64 + 0.5) * self.cell_size,
            self.extent.y0 + (j as f64 + 0.5) * self.cell_size,
        )
    }

    fn delta(&self, d: f64, period: f64) -> f64 {
        if self.periodic {
            d - period * (d / period).round()
        } else {
            d
        }
    }

    pub fn mark_point(&mut self, x: f64, y: f64, radius: f64) {
        let (w, h) = (self.extent.width(), self.extent.height());
        let reach = (radius / self.cell_size).ceil() as i64 + 1;
        let ci = ((x - self.extent.x0) / self.cell_size).floor() as i64;
        let cj = ((y - self.extent.y0) / self.cell_size).floor() as i64;
        for dj in -reach..=reach {
            for di in -reach..=reach {
                let (mut i, mut j) = (ci + di, cj + dj);
                if self.periodic {
                    i = i.rem_euclid(self.nx as i64);
                    j = j.rem_euclid(self.ny as i64);
                } else if i < 0 || j < 0 || i >= self.nx as i64 || j >= self.ny as i64 {
                    continue;
                }
                let (i, j) = (i as usize, j as usize);
                let (cx, cy) = self.center(i, j);
                let dx = self.delta(cx - x, w);
                let dy = self.delta(cy - y, h);
                if dx.hypot(dy) <= radius {
                    self.covered[j * self.nx + i] = true;
                }
            }
        }
    }

    /// Marks the polyline, sampled at spacing at most half a cell.
    pub fn mark_trace(&mut self, trace: &AgentTrace, radius: f64) {
        let (w, h) = (self.extent.width(), self.extent.height());
        let Some(first) = trace.waypoints.first() else {
            return;
        };
        self.mark_point(first.x, first.y, radius);
        for leg in trace.waypoints.windows(2) {
            let (a, b) = (leg[0], leg[1]);
            let dx = self.delta(b.x - a.x, w);
            let dy = self.delta(b.y - a.y, h);
            let n = (dx.hypot(dy) / (0.5 * self.cell_size)).ceil().max(1.0) as usize;
            for k in 1..=n {
                let f = k as f64 / n as f64;
                self.mark_point(a.x + f * dx, a.y + f * dy, radius);
            }
        }
    }

    pub fn covered_cells(&self) -> usize {
        self.covered.iter().filter(|c| **c).count()
    }

    pub fn rate(&self) -> f64 {
        self.covered_cells() as f64 / self.covered.len() as f64
    }

    /// `i,j,covered` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "i,j,covered")?;
        for j in 0..self.ny {
            for i in 0..self.nx {
                writeln!(w, "{i},{j},{}", self.covered[j * self.nx + i] as u8)?;
            }
        }
        Ok(())
    }
}

/// Fraction of grid cells covered by the union of `traces`.
pub fn coverage_rate(
    traces: &[AgentTrace],
    extent: Rect,
    cell_size: f64,
    sensing_radius: f64,
    periodic: bool,
) -> Result<f64> {
    if !(sensing_radius >= 0.0) {
        return Err(Error::Precondition("sensing_radius must be >= 0".into()));
    }
    let mut grid = CoverageGrid::new(extent, cell_size, periodic)?;
    for tr in traces {
        grid.mark_trace(tr, sensing_radius);
    }
    Ok(grid.rate())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LleConfig {
    pub dt: f64,
    pub transient: f64,
    pub span: f64,
    pub renorm_interval: f64,
    pub d0: f64,
}

impl Default for LleConfig {
    fn default() -> Self {
        LleConfig {
            dt: 0.01,
            transient: 100.0,
            span: 5000.0,
            renorm_interval: 1.0,
            d0: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LleEstimate {
    pub lambda1: f64,
    pub transient_discarded: f64,
    pub renorm_interval: f64,
    pub trajectory_span: f64,
    pub renormalizations: usize,
}

/// Benettin two-trajectory estimate of the largest Lyapunov exponent.
pub fn lle_benettin(system: &SystemDef, s0: State, cfg: &LleConfig) -> Result<LleEstimate> {
    if !(cfg.dt > 0.0 && cfg.dt <= MAX_STABLE_DT) {
        return Err(Error::InvalidParameter(format!(
            "dt must lie in (0, {MAX_STABLE_DT}], got {}",
            cfg.dt
        )));
    }
    if !(cfg.d0 > 0.0) || !(cfg.renorm_interval > 0.0) || !(cfg.transient >= 0.0) {
        return Err(Error::Precondition(
            "d0 and renorm_interval must be > 0, transient >= 0".into(),
        ));
    }
    let per = (cfg.renorm_interval / cfg.dt).round().max(1.0) as usize;
    let tau = per as f64 * cfg.dt;
    let n = (cfg.span / tau).floor() as usize;
    if n < MIN_RENORMALIZATIONS {
        return Err(Error::Precondition(format!(
            "span {} gives {n} renormalizations, at least {MIN_RENORMALIZATIONS} are needed",
            cfg.span
        )));
    }
    let mut base = Flow::new(system, s0, cfg.dt)?;
    base.advance_by((cfg.transient / cfg.dt).round() as usize)?;
    let start = base.state();
    let dim = start.dim();
    let unit = 1.0 / (dim as f64).sqrt();
    let mut p = start;
    for i in 0..dim {
        p[i] += cfg.d0 * unit;
    }
    let mut pert = Flow::new(system, p, cfg.dt)?;
    let mut sum = 0.0;
    for _ in 0..n {
        let s = base.advance_by(per)?;
        let q = pert.advance_by(per)?;
        let diff = q.sub(&s);
        let d = diff.norm();
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Calibration(
                "perturbation collapsed to zero or became non-finite".into(),
            ));
        }
        sum += (d / cfg.d0).ln();
        pert = Flow::new(system, s.axpy(cfg.d0 / d, &diff), cfg.dt)?;
    }
    Ok(LleEstimate {
        lambda1: sum / (n as f64 * tau),
        transient_discarded: cfg.transient,
        renorm_interval: tau,
        trajectory_span: n as f64 * tau,
        renormalizations: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BifurcationConfig {
    pub dt: f64,
    pub transient_steps: usize,
    /// Crossings kept per parameter value.
    pub n_last: usize,
    /// Hard cap on integration steps after the transient.
    pub max_steps: usize,
}

impl Default for BifurcationConfig {
    fn default() -> Self {
        BifurcationConfig {
            dt: 0.01,
            transient_steps: 50_000,
            n_last: 200,
            max_steps: 500_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BifurcationColumn {
    pub value: f64,
    /// Raw section coordinate of the last crossings, in time order.
    pub points: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BifurcationDiagram {
    pub system: String,
    pub parameter: String,
    pub component: String,
    pub columns: Vec<BifurcationColumn>,
}

impl BifurcationDiagram {
    /// `param,value` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{},value", self.parameter)?;
        for c in &self.columns {
            for p in &c.points {
                writeln!(w, "{:.10e},{:.10e}", c.value, p)?;
            }
        }
        Ok(())
    }
}

/// Number of groups of sorted values separated by gaps larger than `tol`.
pub fn distinct_clusters(values: &[f64], tol: f64) -> usize {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return 0;
    }
    1 + v.windows(2).filter(|w| w[1] - w[0] > tol).count()
}

/// Sweeps `param` over `values`, one independent run per value in parallel.
/// Every run starts from `s0`; columns keep the input order.
pub fn bifurcation_scan(
    system: &SystemDef,
    param: &str,
    values: &[f64],
    component: &SectionComponent,
    s0: State,
    cfg: &BifurcationConfig,
) -> Result<BifurcationDiagram> {
    component.validate(system.dim())?;
    system.param(param)?;
    let columns = values
        .par_iter()
        .map(|&v| {
            let sys = system.with_param(param, v)?;
            let mut flow = Flow::new(&sys, s0, cfg.dt)?;
            flow.advance_by(cfg.transient_steps)?;
            let comps = std::slice::from_ref(component);
            let mut scanner = CrossingScanner::new(comps, cfg.dt, Some(&sys));
            let mut raw: Vec<RawCrossing> = Vec::new();
            let mut points: Vec<f64> = Vec::new();
            let guard = crate::section::TANGENCY_GUARD_STEPS * cfg.dt;
            let mut last = f64::NEG_INFINITY;
            scanner.push(flow.time(), flow.state(), &mut raw);
            for _ in 0..cfg.max_steps {
                let s = flow.advance()?;
                scanner.push(flow.time(), s, &mut raw);
                for c in raw.drain(..) {
                    if c.time - last >= guard {
                        last = c.time;
                        points.push(c.state[component.norm_coord]);
                    }
                }
                if points.len() >= cfg.n_last {
                    break;
                }
            }
            if points.len() < cfg.n_last {
                log::warn!(
                    "{param}={v}: only {} of {} crossings within max_steps",
                    points.len(),
                    cfg.n_last
                );
            }
            Ok(BifurcationColumn { value: v, points })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BifurcationDiagram {
        system: system.name().to_string(),
        parameter: param.to_string(),
        component: component.id.clone(),
        columns,
    })
}
