//! Multi-component Poincaré sections and the concatenated variable ρ.
//!
//! A section is a list of axis-aligned planes (components). Component `i`
//! (1-based) owns the ρ slot `[i-1, i]`: a crossing of that plane is mapped
//! into the slot by normalizing one coordinate of the crossing state against
//! a calibrated range.

use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynsys::{rk4_unchecked, State, SystemDef, Trajectory};
use crate::error::{Error, Result};

/// Crossings of the same plane closer than this many steps are treated as a
/// tangency and the later one is dropped.
pub const TANGENCY_GUARD_STEPS: f64 = 10.0;

/// Minimum number of crossings needed to calibrate a component.
pub const MIN_CALIBRATION_CROSSINGS: usize = 10;

/// Fractional widening applied to each side of the observed range.
pub const CALIBRATION_MARGIN: f64 = 0.01;

/// Values further than this fraction of the range outside it are flagged.
pub const OUT_OF_CALIBRATION_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Direction {
    Rising,
    Falling,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Rising => 1.0,
            Direction::Falling => -1.0,
        }
    }
}

impl TryFrom<i8> for Direction {
    type Error = String;
    fn try_from(v: i8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Direction::Rising),
            -1 => Ok(Direction::Falling),
            _ => Err(format!("direction must be +1 or -1, got {v}")),
        }
    }
}

impl From<Direction> for i8 {
    fn from(d: Direction) -> i8 {
        match d {
            Direction::Rising => 1,
            Direction::Falling => -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Initial,
    Transitional,
    Final,
    Cyclic,
}

/// One plane `state[coord] = level` of a Poincaré section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectionComponent {
    pub id: String,
    /// 1-based slot index: ρ values of this component live in `[index-1, index]`.
    pub index: usize,
    pub coord: usize,
    pub level: f64,
    pub direction: Direction,
    #[serde(default = "default_role")]
    pub role: Role,
    pub norm_coord: usize,
    /// `(lo, hi)` normalization bounds; `None` until calibrated.
    #[serde(default)]
    pub norm_range: Option<(f64, f64)>,
    /// When set, `lo` maps to the top of the slot instead of the bottom.
    #[serde(default)]
    pub reversed: bool,
}

fn default_role() -> Role {
    Role::Cyclic
}

impl SectionComponent {
    pub fn new(
        id: impl Into<String>,
        index: usize,
        coord: usize,
        level: f64,
        direction: Direction,
        role: Role,
        norm_coord: usize,
    ) -> Self {
        SectionComponent {
            id: id.into(),
            index,
            coord,
            level,
            direction,
            role,
            norm_coord,
            norm_range: None,
            reversed: false,
        }
    }

    pub fn reversed(mut self, reversed: bool) -> Self {
        self.reversed = reversed;
        self
    }

    pub fn with_range(mut self, lo: f64, hi: f64) -> Self {
        self.norm_range = Some((lo, hi));
        self
    }

    pub fn slot(&self) -> (f64, f64) {
        ((self.index - 1) as f64, self.index as f64)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.index == 0 {
            return Err(Error::Precondition(format!(
                "component {}: index must be >= 1",
                self.id
            )));
        }
        if self.coord >= dim || self.norm_coord >= dim {
            return Err(Error::Precondition(format!(
                "component {}: coordinate out of range for dimension {dim}",
                self.id
            )));
        }
        if !self.level.is_finite() {
            return Err(Error::Precondition(format!(
                "component {}: level is not finite",
                self.id
            )));
        }
        if let Some((lo, hi)) = self.norm_range {
            if !(lo.is_finite() && hi.is_finite()) || lo == hi {
                return Err(Error::Precondition(format!(
                    "component {}: normalization bounds must be finite and distinct",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Maps a raw coordinate value into this component's ρ slot.
    pub fn normalize(&self, v: f64) -> Result<Normalized> {
        let (lo, hi) = self
            .norm_range
            .ok_or_else(|| Error::Calibration(format!("component {} has no normalization range", self.id)))?;
        if lo == hi {
            return Err(Error::Precondition(format!(
                "component {}: norm_lo == norm_hi",
                self.id
            )));
        }
        let raw = (v - lo) / (hi - lo);
        let out_of_calibration =
            !(-OUT_OF_CALIBRATION_FRACTION..=1.0 + OUT_OF_CALIBRATION_FRACTION).contains(&raw);
        let mut u = raw.clamp(0.0, 1.0);
        if self.reversed {
            u = 1.0 - u;
        }
        Ok(Normalized {
            rho: (self.index - 1) as f64 + u,
            out_of_calibration,
        })
    }

    /// Chooses the orientation so that the end of the range nearest to
    /// `inner` (typically the fixed point the component winds around) maps
    /// to the bottom of the slot.
    pub fn orient_toward(&mut self, inner: &State) -> Result<()> {
        let (lo, hi) = self.norm_range.ok_or_else(|| {
            Error::Calibration(format!(
                "component {} must be calibrated before orienting",
                self.id
            ))
        })?;
        let v = inner[self.norm_coord];
        self.reversed = (hi - v).abs() < (lo - v).abs();
        Ok(())
    }

    fn same_plane(&self, other: &SectionComponent) -> bool {
        self.coord == other.coord && self.level == other.level && self.direction == other.direction
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalized {
    pub rho: f64,
    pub out_of_calibration: bool,
}

/// A plane crossing before ρ has been assigned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawCrossing {
    /// Position of the component in the list it was detected with.
    pub component: usize,
    pub time: f64,
    pub state: State,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub component: String,
    pub index: usize,
    pub time: f64,
    pub state: State,
    pub rho: f64,
}

/// Time-ordered crossings of a multi-component section, optionally owned by
/// one agent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RhoSeries {
    #[serde(default)]
    pub agent_id: Option<usize>,
    pub crossings: Vec<Crossing>,
    /// Crossings removed by the tangency guard.
    #[serde(default)]
    pub dropped: usize,
    /// Crossings whose value fell outside the calibrated range.
    #[serde(default)]
    pub out_of_calibration: usize,
}

impl RhoSeries {
    pub fn len(&self) -> usize {
        self.crossings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crossings.is_empty()
    }

    pub fn rhos(&self) -> Vec<f64> {
        self.crossings.iter().map(|c| c.rho).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "n,component,t,rho")?;
        for (n, c) in self.crossings.iter().enumerate() {
            writeln!(w, "{n},{},{:.16e},{:.16e}", c.component, c.time, c.rho)?;
        }
        Ok(())
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

/// Streaming crossing detector: feed it consecutive samples of a uniformly
/// stepped solution and it collects crossings of every component.
pub struct CrossingScanner<'a> {
    comps: &'a [SectionComponent],
    refine: Option<&'a SystemDef>,
    dt: f64,
    prev: Option<(f64, State)>,
}

impl<'a> CrossingScanner<'a> {
    /// With `refine`, each linearly interpolated crossing is corrected by
    /// secant iterations on a partial RK4 step from the left sample.
    pub fn new(comps: &'a [SectionComponent], dt: f64, refine: Option<&'a SystemDef>) -> Self {
        CrossingScanner {
            comps,
            refine,
            dt,
            prev: None,
        }
    }

    pub fn reset(&mut self) {
        self.prev = None;
    }

    /// Pushes the sample at time `t`; any crossings found between the
    /// previous sample and this one are appended to `out`, ordered by time.
    pub fn push(&mut self, t: f64, s: State, out: &mut Vec<RawCrossing>) {
        let start = out.len();
        if let Some((tp, sp)) = self.prev {
            for (ci, comp) in self.comps.iter().enumerate() {
                if let Some((time, state)) = crossing_between(comp, tp, &sp, t, &s, self.refine) {
                    out.push(RawCrossing {
                        component: ci,
                        time,
                        state,
                    });
                }
            }
            if out.len() - start > 1 {
                out[start..].sort_by(|a, b| a.time.total_cmp(&b.time));
            }
        }
        self.prev = Some((t, s));
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
}

fn crossing_between(
    comp: &SectionComponent,
    t0: f64,
    s0: &State,
    t1: f64,
    s1: &State,
    refine: Option<&SystemDef>,
) -> Option<(f64, State)> {
    let g0 = s0[comp.coord] - comp.level;
    let g1 = s1[comp.coord] - comp.level;
    let hit = match comp.direction {
        Direction::Rising => g0 < 0.0 && g1 >= 0.0,
        Direction::Falling => g0 > 0.0 && g1 <= 0.0,
    };
    if !hit {
        return None;
    }
    let h = t1 - t0;
    let a = g0 / (g0 - g1);
    let (tau, mut state) = match refine {
        Some(sys) => secant_refine(sys, comp, s0, h, a * h, g0, g1),
        None => (a * h, s0.lerp(s1, a)),
    };
    state[comp.coord] = comp.level;
    Some((t0 + tau, state))
}

/// Illinois-modified regula falsi on `tau -> rk4(s0, tau)[coord] - level`,
/// started from the linear estimate and kept inside the bracket `[0, h]`.
fn secant_refine(
    sys: &SystemDef,
    comp: &SectionComponent,
    s0: &State,
    h: f64,
    tau0: f64,
    g_lo0: f64,
    g_hi0: f64,
) -> (f64, State) {
    let eval = |tau: f64| -> Option<(f64, State)> {
        if tau <= 0.0 {
            return Some((g_lo0, *s0));
        }
        let s = rk4_unchecked(sys, s0, tau).ok()?;
        Some((s[comp.coord] - comp.level, s))
    };
    let Some((mut g, mut state)) = eval(tau0) else {
        return (tau0, *s0);
    };
    let tol = 1e-13 * comp.level.abs().max(1.0);
    let (mut lo, mut g_lo, mut hi, mut g_hi) = (0.0, g_lo0, h, g_hi0);
    let mut tau = tau0;
    let mut side = 0i8;
    for _ in 0..40 {
        if g.abs() <= tol {
            break;
        }
        if (g < 0.0) == (g_lo < 0.0) {
            lo = tau;
            g_lo = g;
            if side == -1 {
                g_hi *= 0.5;
            }
            side = -1;
        } else {
            hi = tau;
            g_hi = g;
            if side == 1 {
                g_lo *= 0.5;
            }
            side = 1;
        }
        let next = lo + (hi - lo) * g_lo / (g_lo - g_hi);
        if !(next > lo && next < hi) || next == tau {
            break;
        }
        tau = next;
        match eval(tau) {
            Some((gn, sn)) => {
                g = gn;
                state = sn;
            }
            None => break,
        }
    }
    (tau, state)
}

/// Raw crossings of one component over a stored trajectory, linear
/// interpolation only unless `refine` is given.
pub fn detect_raw_crossings(
    traj: &Trajectory,
    comp: &SectionComponent,
    refine: Option<&SystemDef>,
) -> Vec<RawCrossing> {
    let comps = std::slice::from_ref(comp);
    let mut scanner = CrossingScanner::new(comps, traj.dt, refine);
    let mut out = Vec::new();
    for (k, s) in traj.samples.iter().enumerate() {
        scanner.push(traj.time(k), *s, &mut out);
    }
    out
}

/// Crossings of `comp` with ρ assigned. The component must be calibrated.
pub fn detect_crossings(
    traj: &Trajectory,
    comp: &SectionComponent,
    refine: Option<&SystemDef>,
) -> Result<Vec<Crossing>> {
    detect_raw_crossings(traj, comp, refine)
        .into_iter()
        .map(|r| {
            let n = comp.normalize(r.state[comp.norm_coord])?;
            Ok(Crossing {
                component: comp.id.clone(),
                index: comp.index,
                time: r.time,
                state: r.state,
                rho: n.rho,
            })
        })
        .collect()
}

/// Sets the normalization range to the observed min/max of `norm_coord`,
/// widened by 1% of the range on each side.
pub fn calibrate_component(raw: &[State], comp: &SectionComponent) -> Result<SectionComponent> {
    if raw.len() < MIN_CALIBRATION_CROSSINGS {
        return Err(Error::Calibration(format!(
            "component {} has {} crossings, need at least {MIN_CALIBRATION_CROSSINGS}",
            comp.id,
            raw.len()
        )));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in raw {
        let v = s[comp.norm_coord];
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    if !(span > 0.0) {
        return Err(Error::Calibration(format!(
            "component {}: all crossings share the same value {lo}",
            comp.id
        )));
    }
    let mut out = comp.clone();
    out.norm_range = Some((lo - CALIBRATION_MARGIN * span, hi + CALIBRATION_MARGIN * span));
    Ok(out)
}

pub fn check_components(comps: &[SectionComponent], dim: usize) -> Result<()> {
    for (i, c) in comps.iter().enumerate() {
        c.validate(dim)?;
        for other in &comps[..i] {
            if c.same_plane(other) {
                return Err(Error::Precondition(format!(
                    "components {} and {} share the same plane and direction",
                    other.id, c.id
                )));
            }
            if c.id == other.id {
                return Err(Error::Precondition(format!("duplicate component id {}", c.id)));
            }
        }
    }
    Ok(())
}

/// Assigns ρ to raw crossings and applies the per-component tangency guard.
/// `raw` must already be sorted by time.
pub fn assemble_series(
    raw: &[RawCrossing],
    comps: &[SectionComponent],
    dt: f64,
    agent_id: Option<usize>,
) -> Result<RhoSeries> {
    let guard = TANGENCY_GUARD_STEPS * dt;
    let mut last_time: Vec<Option<f64>> = vec![None; comps.len()];
    let mut series = RhoSeries {
        agent_id,
        ..Default::default()
    };
    let mut prev_time = f64::NEG_INFINITY;
    for r in raw {
        let comp = &comps[r.component];
        let too_close = last_time[r.component].is_some_and(|t| r.time - t < guard);
        if too_close || r.time <= prev_time {
            series.dropped += 1;
            continue;
        }
        let n = comp.normalize(r.state[comp.norm_coord])?;
        if n.out_of_calibration {
            series.out_of_calibration += 1;
        }
        last_time[r.component] = Some(r.time);
        prev_time = r.time;
        series.crossings.push(Crossing {
            component: comp.id.clone(),
            index: comp.index,
            time: r.time,
            state: r.state,
            rho: n.rho,
        });
    }
    if series.dropped > 0 {
        warn!("tangency guard dropped {} crossing(s)", series.dropped);
    }
    if series.out_of_calibration > 0 {
        warn!(
            "{} crossing(s) fell outside the calibrated range and were clamped",
            series.out_of_calibration
        );
    }
    Ok(series)
}

/// Crossings of all components merged in time order, each carrying ρ in its
/// own slot. Components are scanned in parallel and merged deterministically.
pub fn build_rho_series(
    traj: &Trajectory,
    comps: &[SectionComponent],
    refine: Option<&SystemDef>,
) -> Result<RhoSeries> {
    if traj.is_empty() {
        return Ok(RhoSeries::default());
    }
    check_components(comps, traj.samples[0].dim())?;
    let per_comp: Vec<Vec<RawCrossing>> = comps
        .par_iter()
        .enumerate()
        .map(|(ci, c)| {
            let mut v = detect_raw_crossings(traj, c, refine);
            for r in &mut v {
                r.component = ci;
            }
            v
        })
        .collect();
    let mut raw: Vec<RawCrossing> = per_comp.into_iter().flatten().collect();
    raw.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.component.cmp(&b.component)));
    assemble_series(&raw, comps, traj.dt, None)
}

/// Calibrates every component from the crossings observed in `traj`.
pub fn calibrate_all(
    traj: &Trajectory,
    comps: &[SectionComponent],
    refine: Option<&SystemDef>,
) -> Result<Vec<SectionComponent>> {
    comps
        .iter()
        .map(|c| {
            let states: Vec<State> = detect_raw_crossings(traj, c, refine)
                .into_iter()
                .map(|r| r.state)
                .collect();
            calibrate_component(&states, c)
        })
        .collect()
}

/// The single-plane section `x = 0, dx/dt > 0` of the Rössler system,
/// normalizing `y` from the inside of the attractor outward.
pub fn rossler_component() -> SectionComponent {
    SectionComponent::new("P", 1, 0, 0.0, Direction::Rising, Role::Cyclic, 1).reversed(true)
}

/// The three Lorenz components `A: x=0 rising`, `B: x=10 falling` and
/// `C: x=0 falling` with roles initial / transitional / final.
pub fn lorenz_components() -> Vec<SectionComponent> {
    vec![
        SectionComponent::new("A", 1, 0, 0.0, Direction::Rising, Role::Initial, 1),
        SectionComponent::new("B", 2, 0, 10.0, Direction::Falling, Role::Transitional, 1).reversed(true),
        SectionComponent::new("C", 3, 0, 0.0, Direction::Falling, Role::Final, 1).reversed(true),
    ]
}
