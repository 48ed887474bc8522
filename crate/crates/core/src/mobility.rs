//! Mobility traces driven by return-map dynamics.
//!
//! Three generators share the [`AgentTrace`] output type:
//! - UAV paths steered one turn per section crossing by the L/A/R symbol of
//!   the crossing (chaotic Rössler dynamics);
//! - exhibition-scenario visitors whose door crossings are the crossings of
//!   the three-component Lorenz partial map;
//! - a seeded random walk used as the coverage baseline.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynsys::{integrate, Flow, IntegratorConfig, State, SystemDef};
use crate::error::{Error, Result};
use crate::returnmap::{
    build_first_return_map, default_lar_partition, extract_periodic_orbits, ComponentRole, PeriodicOrbit,
    SymbolPartition, DEFAULT_ORBIT_TOL,
};
use crate::section::{
    assemble_series, build_rho_series, calibrate_all, check_components, Crossing, CrossingScanner,
    RawCrossing, RhoSeries, Role, SectionComponent,
};

/// Scenario flow time is rescaled so that the median entry-to-exit duration
/// lasts this many seconds.
pub const DEFAULT_MEDIAN_VISIT_SECONDS: f64 = 600.0;
pub const DEFAULT_NOISE_RADIUS: f64 = 0.5;

/// Per-agent RNG stream derived from `(seed, agent_id)`.
pub fn agent_rng(seed: u64, agent_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(agent_id as u64);
    rng
}

/// `reference` plus a point drawn uniformly from the ball of `radius`.
pub fn perturbed_state<R: Rng>(reference: &State, radius: f64, rng: &mut R) -> State {
    let dim = reference.dim();
    loop {
        let mut offset = State::new(&vec![0.0; dim]).expect("dim in range");
        for i in 0..dim {
            offset[i] = radius * (2.0 * rng.random::<f64>() - 1.0);
        }
        if offset.norm() <= radius {
            return reference.axpy(1.0, &offset);
        }
    }
}

fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arena {
    pub width: f64,
    pub height: f64,
    /// Torus topology when set, otherwise positions are clamped to the walls.
    pub wrap: bool,
}

impl Arena {
    fn confine(&self, x: f64, y: f64) -> (f64, f64) {
        if self.wrap {
            (x.rem_euclid(self.width), y.rem_euclid(self.height))
        } else {
            (x.clamp(0.0, self.width), y.clamp(0.0, self.height))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UavConfig {
    pub speed: f64,
    /// Radians, in (0, π).
    pub turn_angle: f64,
    pub step_time: f64,
    pub start: Pose,
    pub arena: Arena,
}

impl Default for UavConfig {
    fn default() -> Self {
        UavConfig {
            speed: 1.0,
            turn_angle: PI / 6.0,
            step_time: 1.0,
            start: Pose {
                x: 50.0,
                y: 50.0,
                heading: 0.0,
            },
            arena: Arena {
                width: 100.0,
                height: 100.0,
                wrap: true,
            },
        }
    }
}

impl UavConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.speed > 0.0) || !(self.step_time > 0.0) {
            return Err(Error::Precondition("speed and step_time must be > 0".into()));
        }
        if !(self.turn_angle > 0.0 && self.turn_angle < PI) {
            return Err(Error::Precondition("turn_angle must lie in (0, pi)".into()));
        }
        if !(self.arena.width > 0.0 && self.arena.height > 0.0) {
            return Err(Error::Precondition("arena must have positive extent".into()));
        }
        Ok(())
    }

    pub fn step_length(&self) -> f64 {
        self.speed * self.step_time
    }
}

/// Turn by the symbol (L: +turn, A: none, R: -turn), then advance one step.
pub fn uav_step(pose: &Pose, symbol: char, cfg: &UavConfig) -> Result<Pose> {
    let turn = match symbol {
        'L' => cfg.turn_angle,
        'A' => 0.0,
        'R' => -cfg.turn_angle,
        other => return Err(Error::UnknownSymbol(other)),
    };
    Ok(advance(pose, wrap_angle(pose.heading + turn), cfg))
}

fn advance(pose: &Pose, heading: f64, cfg: &UavConfig) -> Pose {
    let d = cfg.step_length();
    let (x, y) = cfg
        .arena
        .confine(pose.x + d * heading.cos(), pose.y + d * heading.sin());
    Pose { x, y, heading }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Entry,
    StayRoom1,
    ToRoom2,
    Exit,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Entry => "entry",
            EventKind::StayRoom1 => "stay_room1",
            EventKind::ToRoom2 => "to_room2",
            EventKind::Exit => "exit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t: f64,
    pub kind: EventKind,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrace {
    pub agent_id: usize,
    pub waypoints: Vec<Waypoint>,
    #[serde(default)]
    pub events: Vec<TraceEvent>,
    #[serde(default)]
    pub truncated: bool,
    /// Nominal travel speed, used by the ns-2 export.
    pub speed: f64,
}

impl AgentTrace {
    fn event_at(&self, t: f64) -> Option<EventKind> {
        self.events.iter().find(|e| e.t == t).map(|e| e.kind)
    }

    /// Total length of the polyline, skipping jumps longer than `max_leg`
    /// (wrap-around teleports).
    pub fn path_length(&self, max_leg: f64) -> f64 {
        self.waypoints
            .windows(2)
            .map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y))
            .filter(|d| *d <= max_leg)
            .sum()
    }

    /// True if the events read entry, stay_room1*, to_room2, exit.
    pub fn follows_scenario_grammar(&self) -> bool {
        let kinds: Vec<EventKind> = self.events.iter().map(|e| e.kind).collect();
        match kinds.as_slice() {
            [EventKind::Entry, middle @ .., EventKind::ToRoom2, EventKind::Exit] => {
                middle.iter().all(|k| *k == EventKind::StayRoom1)
            }
            _ => false,
        }
    }
}

pub fn write_traces_csv<W: Write>(traces: &[AgentTrace], mut w: W) -> Result<()> {
    writeln!(w, "agent,t,x,y,event")?;
    for tr in traces {
        for p in &tr.waypoints {
            let ev = tr.event_at(p.t).map_or("", EventKind::as_str);
            writeln!(w, "{},{:.6},{:.6},{:.6},{ev}", tr.agent_id, p.t, p.x, p.y)?;
        }
    }
    Ok(())
}

pub fn write_traces_json<W: Write>(traces: &[AgentTrace], w: W) -> Result<()> {
    serde_json::to_writer_pretty(w, traces)?;
    Ok(())
}

/// ns-2 movement script. Each leg is issued at the start waypoint's time;
/// the speed is the trace's nominal speed, raised when needed so the node
/// still reaches the next waypoint on time. Legs longer than `max_leg`
/// (wrap-around) are emitted as position resets.
pub fn write_ns2<W: Write>(traces: &[AgentTrace], max_leg: f64, mut w: W) -> Result<()> {
    for tr in traces {
        let id = tr.agent_id;
        let Some(first) = tr.waypoints.first() else {
            continue;
        };
        writeln!(w, "$node_({id}) set X_ {:.6}", first.x)?;
        writeln!(w, "$node_({id}) set Y_ {:.6}", first.y)?;
        for leg in tr.waypoints.windows(2) {
            let (a, b) = (leg[0], leg[1]);
            let dist = (b.x - a.x).hypot(b.y - a.y);
            if dist > max_leg {
                writeln!(w, "$ns_ at {:.6} \"$node_({id}) set X_ {:.6}\"", b.t, b.x)?;
                writeln!(w, "$ns_ at {:.6} \"$node_({id}) set Y_ {:.6}\"", b.t, b.y)?;
                continue;
            }
            let required = dist / (b.t - a.t);
            let speed = tr.speed.max(required);
            writeln!(
                w,
                "$ns_ at {:.6} \"$node_({id}) setdest {:.6} {:.6} {:.6}\"",
                a.t, b.x, b.y, speed
            )?;
        }
    }
    Ok(())
}

/// Rössler dynamics cut by one section component, with the L/A/R partition
/// that turns each crossing into a steering symbol.
#[derive(Debug, Clone)]
pub struct CacocModel {
    pub system: SystemDef,
    pub dt: f64,
    pub component: SectionComponent,
    pub partition: SymbolPartition,
    /// On-attractor state used as the centre for seeded initial conditions.
    pub reference: State,
    pub period1: Option<PeriodicOrbit>,
    pub period2: Option<PeriodicOrbit>,
}

impl CacocModel {
    /// Integrates a calibration run, calibrates the component, extracts the
    /// period-1 and period-2 orbits and places the default L/A/R partition
    /// from them (unless `breakpoints` overrides it).
    pub fn calibrate(
        system: &SystemDef,
        component: &SectionComponent,
        s0: State,
        cfg: &IntegratorConfig,
        breakpoints: Option<&[f64]>,
    ) -> Result<Self> {
        let traj = integrate(system, s0, cfg)?;
        let comps = calibrate_all(&traj, std::slice::from_ref(component), Some(system))?;
        let series = build_rho_series(&traj, &comps, Some(system))?;
        let map = build_first_return_map(&series)?;
        let component = comps.into_iter().next().expect("one component");
        let p1 = extract_periodic_orbits(&map, 1, DEFAULT_ORBIT_TOL)?
            .into_iter()
            .next();
        let p2 = extract_periodic_orbits(&map, 2, DEFAULT_ORBIT_TOL)?
            .into_iter()
            .next();
        let partition = match (breakpoints, &p1, &p2) {
            (Some(b), _, _) => {
                crate::returnmap::partition_symbols(&component.id, component.slot(), b, &['L', 'A', 'R'])?
            }
            (None, Some(o1), Some(o2)) => default_lar_partition(
                &component.id,
                component.slot(),
                o1.rho_cycle[0],
                [o2.rho_cycle[0], o2.rho_cycle[1]],
            )?,
            _ => {
                return Err(Error::Calibration(
                    "period-1 and period-2 orbits are needed to place the default partition".into(),
                ))
            }
        };
        let p1 = p1.map(|o| o.with_word(&partition)).transpose()?;
        let p2 = p2.map(|o| o.with_word(&partition)).transpose()?;
        Ok(CacocModel {
            system: system.clone(),
            dt: cfg.dt,
            component,
            partition,
            reference: traj.samples[0],
            period1: p1,
            period2: p2,
        })
    }

    pub fn seeded_state(&self, seed: u64, agent_id: usize) -> State {
        perturbed_state(
            &self.reference,
            DEFAULT_NOISE_RADIUS,
            &mut agent_rng(seed, agent_id),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UavTrace {
    pub trace: AgentTrace,
    pub word: String,
}

/// Integrates the model from `s0` for `duration` flow time (or until
/// `max_steps` crossings) and applies one [`uav_step`] per crossing.
pub fn generate_uav_trace(
    model: &CacocModel,
    cfg: &UavConfig,
    s0: State,
    duration: f64,
    max_steps: Option<usize>,
    agent_id: usize,
) -> Result<UavTrace> {
    cfg.validate()?;
    let comps = std::slice::from_ref(&model.component);
    let mut flow = Flow::new(&model.system, s0, model.dt)?;
    let mut scanner = CrossingScanner::new(comps, model.dt, Some(&model.system));
    let mut raw: Vec<RawCrossing> = Vec::new();
    let limit = max_steps.unwrap_or(usize::MAX);
    let mut pose = cfg.start;
    let mut waypoints = vec![Waypoint {
        t: 0.0,
        x: pose.x,
        y: pose.y,
    }];
    let mut word = String::new();
    let mut last_kept = f64::NEG_INFINITY;
    let guard = crate::section::TANGENCY_GUARD_STEPS * model.dt;
    scanner.push(flow.time(), flow.state(), &mut raw);
    while flow.time() < duration && word.len() < limit {
        let s = flow.advance()?;
        scanner.push(flow.time(), s, &mut raw);
        for c in raw.drain(..) {
            if c.time - last_kept < guard || word.len() >= limit {
                continue;
            }
            last_kept = c.time;
            let rho = model
                .component
                .normalize(c.state[model.component.norm_coord])?
                .rho;
            let sym = model.partition.symbol(rho)?;
            pose = uav_step(&pose, sym, cfg)?;
            word.push(sym);
            waypoints.push(Waypoint {
                t: word.len() as f64 * cfg.step_time,
                x: pose.x,
                y: pose.y,
            });
        }
    }
    Ok(UavTrace {
        trace: AgentTrace {
            agent_id,
            waypoints,
            events: Vec::new(),
            truncated: false,
            speed: cfg.speed,
        },
        word,
    })
}

/// Heading redrawn uniformly in (-π, π] every step.
pub fn random_walk_trace(cfg: &UavConfig, seed: u64, duration: f64, agent_id: usize) -> Result<AgentTrace> {
    cfg.validate()?;
    let steps = (duration / cfg.step_time).floor() as usize;
    let mut rng = agent_rng(seed, agent_id);
    let mut pose = cfg.start;
    let mut waypoints = Vec::with_capacity(steps + 1);
    waypoints.push(Waypoint {
        t: 0.0,
        x: pose.x,
        y: pose.y,
    });
    for k in 1..=steps {
        let heading = PI - 2.0 * PI * rng.random::<f64>();
        pose = advance(&pose, heading, cfg);
        waypoints.push(Waypoint {
            t: k as f64 * cfg.step_time,
            x: pose.x,
            y: pose.y,
        });
    }
    Ok(AgentTrace {
        agent_id,
        waypoints,
        events: Vec::new(),
        truncated: false,
        speed: cfg.speed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: [f64; 2],
    pub b: [f64; 2],
}

impl Segment {
    pub fn at(&self, u: f64) -> [f64; 2] {
        [
            self.a[0] + u * (self.b[0] - self.a[0]),
            self.a[1] + u * (self.b[1] - self.a[1]),
        ]
    }

    pub fn length(&self) -> f64 {
        (self.b[0] - self.a[0]).hypot(self.b[1] - self.a[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1)]
    }

    fn on_boundary(&self, p: [f64; 2]) -> bool {
        let eps = 1e-9 * (1.0 + self.width().abs() + self.height().abs());
        let inside_x = p[0] >= self.x0 - eps && p[0] <= self.x1 + eps;
        let inside_y = p[1] >= self.y0 - eps && p[1] <= self.y1 + eps;
        let on_vertical = (p[0] - self.x0).abs() <= eps || (p[0] - self.x1).abs() <= eps;
        let on_horizontal = (p[1] - self.y0).abs() <= eps || (p[1] - self.y1).abs() <= eps;
        (on_vertical && inside_y) || (on_horizontal && inside_x)
    }

    /// Both endpoints on the same wall.
    fn contains_on_wall(&self, s: &Segment) -> bool {
        let eps = 1e-9 * (1.0 + self.width().abs() + self.height().abs());
        let same_wall = [self.x0, self.x1]
            .iter()
            .any(|&x| (s.a[0] - x).abs() <= eps && (s.b[0] - x).abs() <= eps)
            || [self.y0, self.y1]
                .iter()
                .any(|&y| (s.a[1] - y).abs() <= eps && (s.b[1] - y).abs() <= eps);
        same_wall && self.on_boundary(s.a) && self.on_boundary(s.b)
    }
}

/// Two-room exhibition floor plan, in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioGeometry {
    pub entry_segment: Segment,
    pub transition_segment: Segment,
    pub exit_segment: Segment,
    pub room1: Rect,
    pub room2: Rect,
    pub walk_speed: f64,
    /// Seconds of scenario time per unit of flow time; derived from the
    /// median visit duration when absent.
    #[serde(default)]
    pub time_scale: Option<f64>,
}

impl Default for ScenarioGeometry {
    /// Two 20 m x 15 m rooms side by side with 2 m doorways.
    fn default() -> Self {
        ScenarioGeometry {
            entry_segment: Segment {
                a: [0.0, 6.5],
                b: [0.0, 8.5],
            },
            transition_segment: Segment {
                a: [20.0, 6.5],
                b: [20.0, 8.5],
            },
            exit_segment: Segment {
                a: [40.0, 6.5],
                b: [40.0, 8.5],
            },
            room1: Rect {
                x0: 0.0,
                y0: 0.0,
                x1: 20.0,
                y1: 15.0,
            },
            room2: Rect {
                x0: 20.0,
                y0: 0.0,
                x1: 40.0,
                y1: 15.0,
            },
            walk_speed: 1.2,
            time_scale: None,
        }
    }
}

impl ScenarioGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.walk_speed > 0.0) {
            return Err(Error::Precondition("walk_speed must be > 0".into()));
        }
        if let Some(ts) = self.time_scale {
            if !(ts > 0.0) {
                return Err(Error::Precondition("time_scale must be > 0".into()));
            }
        }
        if !self.room1.contains_on_wall(&self.entry_segment) {
            return Err(Error::Precondition(
                "entry segment must lie on a wall of room 1".into(),
            ));
        }
        if !(self.room1.contains_on_wall(&self.transition_segment)
            && self.room2.contains_on_wall(&self.transition_segment))
        {
            return Err(Error::Precondition(
                "transition segment must lie on the wall shared by both rooms".into(),
            ));
        }
        if !self.room2.contains_on_wall(&self.exit_segment) {
            return Err(Error::Precondition(
                "exit segment must lie on a wall of room 2".into(),
            ));
        }
        Ok(())
    }

    /// Loitering point inside room 1 for a crossing with slot fraction `u`.
    fn detour(&self, u: f64) -> [f64; 2] {
        let c = self.room1.center();
        let r = 0.25 * self.room1.width().min(self.room1.height());
        let a = 2.0 * PI * u;
        [c[0] + r * a.cos(), c[1] + r * a.sin()]
    }
}

/// Lorenz dynamics with the three scenario components (entry, transition,
/// exit) calibrated on a reference run.
#[derive(Debug, Clone)]
pub struct ScenarioModel {
    pub system: SystemDef,
    pub dt: f64,
    pub components: Vec<SectionComponent>,
    pub reference: State,
    pub noise_radius: f64,
    /// Flow time integrated after the perturbation, before waiting for entry.
    pub decorrelation_time: f64,
    /// Integration steps allowed between entry and exit.
    pub step_budget: usize,
}

impl ScenarioModel {
    /// Wraps already calibrated components.
    pub fn new(
        system: &SystemDef,
        dt: f64,
        components: Vec<SectionComponent>,
        reference: State,
    ) -> Result<Self> {
        check_components(&components, system.dim())?;
        crate::returnmap::check_role_order(&crate::returnmap::roles_of(&components))?;
        if let Some(c) = components.iter().find(|c| c.norm_range.is_none()) {
            return Err(Error::Calibration(format!(
                "component {} is not calibrated",
                c.id
            )));
        }
        Ok(ScenarioModel {
            system: system.clone(),
            dt,
            components,
            reference,
            noise_radius: DEFAULT_NOISE_RADIUS,
            decorrelation_time: 20.0,
            step_budget: 100_000,
        })
    }

    pub fn calibrate(
        system: &SystemDef,
        components: &[SectionComponent],
        s0: State,
        cfg: &IntegratorConfig,
    ) -> Result<Self> {
        check_components(components, system.dim())?;
        crate::returnmap::check_role_order(&crate::returnmap::roles_of(components))?;
        let traj = integrate(system, s0, cfg)?;
        let components = calibrate_all(&traj, components, Some(system))?;
        Self::new(system, cfg.dt, components, traj.samples[0])
    }

    fn roles(&self) -> Vec<ComponentRole> {
        crate::returnmap::roles_of(&self.components)
    }

    /// Crossings of one agent from its entry to its exit (or the budget).
    pub fn simulate_agent(&self, seed: u64, agent_id: usize) -> Result<(RhoSeries, bool)> {
        let mut rng = agent_rng(seed, agent_id);
        let s0 = perturbed_state(&self.reference, self.noise_radius, &mut rng);
        let mut flow = Flow::new(&self.system, s0, self.dt)?;
        flow.advance_by((self.decorrelation_time / self.dt).round() as usize)?;
        let mut scanner = CrossingScanner::new(&self.components, self.dt, Some(&self.system));
        let mut raw: Vec<RawCrossing> = Vec::new();
        let mut kept: Vec<RawCrossing> = Vec::new();
        let mut entered_at: Option<usize> = None;
        let mut done = false;
        scanner.push(flow.time(), flow.state(), &mut raw);
        while !done {
            if let Some(k0) = entered_at {
                if flow.steps_taken() - k0 > self.step_budget {
                    break;
                }
            } else if flow.steps_taken() > 100 * self.step_budget {
                return Err(Error::Precondition(format!(
                    "agent {agent_id} never crossed an initial component"
                )));
            }
            let s = flow.advance()?;
            scanner.push(flow.time(), s, &mut raw);
            raw.sort_by(|a, b| a.time.total_cmp(&b.time));
            for c in raw.drain(..) {
                let role = self.components[c.component].role;
                match (entered_at, role) {
                    (None, Role::Initial) => {
                        entered_at = Some(flow.steps_taken());
                        kept.push(c);
                    }
                    (None, _) => {}
                    (Some(_), Role::Final) => {
                        kept.push(c);
                        done = true;
                        break;
                    }
                    (Some(_), _) => kept.push(c),
                }
            }
        }
        let series = assemble_series(&kept, &self.components, self.dt, Some(agent_id))?;
        Ok((series, !done))
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Maps one agent's crossings onto the floor plan. Entry/transition/exit
/// crossings become points on the corresponding doorway at the slot
/// fraction of ρ; a transition followed by another transition is a stay in
/// room 1 and gets an extra loitering waypoint half-way to the next one.
pub fn trace_from_series(
    series: &RhoSeries,
    roles: &[ComponentRole],
    geometry: &ScenarioGeometry,
    time_scale: f64,
    truncated: bool,
) -> Result<AgentTrace> {
    let role_of = |c: &Crossing| -> Result<Role> {
        roles
            .iter()
            .find(|r| r.id == c.component)
            .map(|r| r.role)
            .ok_or_else(|| Error::Precondition(format!("component {} has no role", c.component)))
    };
    let cs = &series.crossings;
    let t_start = cs.first().map_or(0.0, |c| c.time);
    let mut waypoints = Vec::with_capacity(cs.len() * 2);
    let mut events = Vec::with_capacity(cs.len());
    for (i, c) in cs.iter().enumerate() {
        let t = (c.time - t_start) * time_scale;
        let u = c.rho - (c.index as f64 - 1.0);
        let next_role = cs.get(i + 1).map(role_of).transpose()?;
        let (segment, kind) = match role_of(c)? {
            Role::Initial => (&geometry.entry_segment, EventKind::Entry),
            Role::Final => (&geometry.exit_segment, EventKind::Exit),
            Role::Transitional | Role::Cyclic => (
                &geometry.transition_segment,
                if next_role == Some(Role::Final) {
                    EventKind::ToRoom2
                } else {
                    EventKind::StayRoom1
                },
            ),
        };
        let p = segment.at(u);
        waypoints.push(Waypoint { t, x: p[0], y: p[1] });
        events.push(TraceEvent { t, kind, rho: c.rho });
        if kind == EventKind::StayRoom1 {
            if let Some(next) = cs.get(i + 1) {
                let tn = (next.time - t_start) * time_scale;
                let d = geometry.detour(u);
                waypoints.push(Waypoint {
                    t: 0.5 * (t + tn),
                    x: d[0],
                    y: d[1],
                });
            }
        }
    }
    Ok(AgentTrace {
        agent_id: series.agent_id.unwrap_or(0),
        waypoints,
        events,
        truncated,
        speed: geometry.walk_speed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRun {
    pub traces: Vec<AgentTrace>,
    pub series: Vec<RhoSeries>,
    pub time_scale: f64,
    pub truncated: usize,
}

/// Generates `n_agents` independent visitor traces. Agents are simulated in
/// parallel with RNG streams derived from `(seed, agent_id)`; the result is
/// ordered by agent id.
pub fn generate_scenario_traces(
    n_agents: usize,
    model: &ScenarioModel,
    geometry: &ScenarioGeometry,
    seed: u64,
) -> Result<ScenarioRun> {
    if n_agents == 0 {
        return Err(Error::Precondition("n_agents must be >= 1".into()));
    }
    geometry.validate()?;
    let sims: Vec<(RhoSeries, bool)> = (0..n_agents)
        .into_par_iter()
        .map(|id| model.simulate_agent(seed, id))
        .collect::<Result<_>>()?;
    let time_scale = match geometry.time_scale {
        Some(ts) => ts,
        None => {
            let durations: Vec<f64> = sims
                .iter()
                .filter(|(s, trunc)| !trunc && s.len() >= 2)
                .map(|(s, _)| s.crossings.last().unwrap().time - s.crossings[0].time)
                .collect();
            let m = median(durations).ok_or_else(|| {
                Error::Calibration("no agent completed a visit; cannot derive time_scale".into())
            })?;
            DEFAULT_MEDIAN_VISIT_SECONDS / m
        }
    };
    let roles = model.roles();
    let traces = sims
        .iter()
        .map(|(s, trunc)| trace_from_series(s, &roles, geometry, time_scale, *trunc))
        .collect::<Result<Vec<_>>>()?;
    let truncated = sims.iter().filter(|(_, t)| *t).count();
    if truncated > 0 {
        log::warn!("{truncated} agent(s) exhausted the step budget before exiting");
    }
    Ok(ScenarioRun {
        traces,
        series: sims.into_iter().map(|(s, _)| s).collect(),
        time_scale,
        truncated,
    })
}

/// Rebuilds per-agent ρ series from trace events, treating each doorway as
/// a section component. The crossing state carries the agent position.
pub fn series_from_traces(traces: &[AgentTrace], roles: &[ComponentRole]) -> Result<Vec<RhoSeries>> {
    let pick = |role: Role| -> Result<&ComponentRole> {
        roles
            .iter()
            .find(|r| r.role == role)
            .ok_or_else(|| Error::Precondition(format!("no component with role {role:?}")))
    };
    let entry = pick(Role::Initial)?;
    let transition = pick(Role::Transitional)?;
    let exit = pick(Role::Final)?;
    Ok(traces
        .iter()
        .map(|tr| {
            let crossings = tr
                .events
                .iter()
                .map(|e| {
                    let comp = match e.kind {
                        EventKind::Entry => entry,
                        EventKind::StayRoom1 | EventKind::ToRoom2 => transition,
                        EventKind::Exit => exit,
                    };
                    let pos = tr
                        .waypoints
                        .iter()
                        .find(|w| w.t == e.t)
                        .map_or([0.0, 0.0], |w| [w.x, w.y]);
                    Crossing {
                        component: comp.id.clone(),
                        index: comp.index,
                        time: e.t,
                        state: State::new(&pos).expect("2-d"),
                        rho: e.rho,
                    }
                })
                .collect();
            RhoSeries {
                agent_id: Some(tr.agent_id),
                crossings,
                ..Default::default()
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose0() -> Pose {
        Pose {
            x: 10.0,
            y: 10.0,
            heading: 0.0,
        }
    }

    #[test]
    fn ahead_keeps_heading() {
        let cfg = UavConfig::default();
        let p = uav_step(&pose0(), 'A', &cfg).unwrap();
        assert_eq!(p.heading, 0.0);
        assert!((p.x - 11.0).abs() < 1e-12 && (p.y - 10.0).abs() < 1e-12);
    }

    #[test]
    fn right_turns_clockwise() {
        let cfg = UavConfig::default();
        let p = uav_step(&pose0(), 'R', &cfg).unwrap();
        assert!((p.heading + PI / 6.0).abs() < 1e-12);
        let l = uav_step(&pose0(), 'L', &cfg).unwrap();
        assert!((l.heading - PI / 6.0).abs() < 1e-12);
        assert!(matches!(
            uav_step(&pose0(), 'X', &cfg),
            Err(Error::UnknownSymbol('X'))
        ));
    }

    fn walk(word: &str) -> Vec<Pose> {
        let cfg = UavConfig::default();
        let mut p = pose0();
        let mut out = vec![p];
        for c in word.chars() {
            p = uav_step(&p, c, &cfg).unwrap();
            out.push(p);
        }
        out
    }

    #[test]
    fn period_one_word_is_a_straight_line() {
        let pts = walk("AAAA");
        for w in pts.windows(3) {
            let cross = (w[1].x - w[0].x) * (w[2].y - w[0].y) - (w[1].y - w[0].y) * (w[2].x - w[0].x);
            assert!(cross.abs() < 1e-12);
        }
    }

    #[test]
    fn period_two_word_turns_steadily() {
        // ARAR...: net rotation of -turn_angle every two steps
        let pts = walk(&"AR".repeat(12));
        assert!(wrap_angle(pts[12].heading - PI).abs() < 1e-9);
        // all points turn the same way: the polygon is convex, clockwise
        for w in pts.windows(3) {
            let cross = (w[1].x - w[0].x) * (w[2].y - w[1].y) - (w[1].y - w[0].y) * (w[2].x - w[1].x);
            assert!(cross <= 1e-12);
        }
        // after a full 24-step loop the UAV is back where it started
        let full = walk(&"AR".repeat(24));
        assert!((full[24].x - pts[0].x).abs() < 1e-9 && (full[24].y - pts[0].y).abs() < 1e-9);
    }

    #[test]
    fn arena_wraps_or_clamps() {
        let mut cfg = UavConfig::default();
        let edge = Pose {
            x: 99.5,
            y: 50.0,
            heading: 0.0,
        };
        let p = uav_step(&edge, 'A', &cfg).unwrap();
        assert!((p.x - 0.5).abs() < 1e-9);
        cfg.arena.wrap = false;
        let p = uav_step(&edge, 'A', &cfg).unwrap();
        assert_eq!(p.x, 100.0);
    }

    #[test]
    fn random_walk_kinematics() {
        let mut cfg = UavConfig::default();
        cfg.arena.wrap = false;
        cfg.arena.width = 1e6;
        cfg.arena.height = 1e6;
        cfg.start = Pose {
            x: 5e5,
            y: 5e5,
            heading: 0.0,
        };
        let tr = random_walk_trace(&cfg, 3, 500.0, 0).unwrap();
        assert_eq!(tr.waypoints.len(), 501);
        for w in tr.waypoints.windows(2) {
            let d = (w[1].x - w[0].x).hypot(w[1].y - w[0].y);
            assert!((d - 1.0).abs() < 1e-9);
        }
        assert_eq!(tr, random_walk_trace(&cfg, 3, 500.0, 0).unwrap());
        assert_ne!(tr, random_walk_trace(&cfg, 4, 500.0, 0).unwrap());
    }

    #[test]
    fn random_walk_spreads_diffusively() {
        // E|X_n|^2 = n l^2 for unit steps with uniform headings
        let mut cfg = UavConfig::default();
        cfg.arena.wrap = false;
        cfg.arena.width = 1e6;
        cfg.arena.height = 1e6;
        cfg.start = Pose {
            x: 5e5,
            y: 5e5,
            heading: 0.0,
        };
        let n = 400.0;
        let seeds = 1000;
        let mean: f64 = (0..seeds)
            .map(|s| {
                let tr = random_walk_trace(&cfg, s, n, 0).unwrap();
                let last = tr.waypoints.last().unwrap();
                (last.x - 5e5).hypot(last.y - 5e5)
            })
            .sum::<f64>()
            / seeds as f64;
        // mean of a 2-d Rayleigh distance: sqrt(pi n / 4)
        let expected = (PI * n / 4.0).sqrt();
        assert!(
            (mean / expected - 1.0).abs() < 0.2,
            "mean {mean} expected {expected}"
        );
        assert!((mean / n.sqrt() - 1.0).abs() < 0.2);
    }

    fn abc_roles() -> Vec<ComponentRole> {
        vec![
            ComponentRole {
                id: "A".into(),
                index: 1,
                role: Role::Initial,
            },
            ComponentRole {
                id: "B".into(),
                index: 2,
                role: Role::Transitional,
            },
            ComponentRole {
                id: "C".into(),
                index: 3,
                role: Role::Final,
            },
        ]
    }

    fn example_series() -> RhoSeries {
        let mk = |id: &str, index, rho, time| Crossing {
            component: String::from(id),
            index,
            time,
            state: State::xyz(0.0, 0.0, 0.0),
            rho,
        };
        RhoSeries {
            agent_id: Some(7),
            crossings: vec![
                mk("A", 1, 0.4, 10.0),
                mk("B", 2, 1.7, 10.5),
                mk("B", 2, 1.2, 11.5),
                mk("C", 3, 2.6, 11.7),
            ],
            ..Default::default()
        }
    }

    #[test]
    fn example_series_maps_to_doorways() {
        let g = ScenarioGeometry::default();
        let tr = trace_from_series(&example_series(), &abc_roles(), &g, 2.0, false).unwrap();
        let kinds: Vec<EventKind> = tr.events.iter().map(|e| e.kind).collect();
        assert_eq!(
            kinds,
            vec![
                EventKind::Entry,
                EventKind::StayRoom1,
                EventKind::ToRoom2,
                EventKind::Exit
            ]
        );
        assert!(tr.follows_scenario_grammar());
        // four doorway waypoints plus one loitering point
        assert_eq!(tr.waypoints.len(), 5);
        let close = |w: &Waypoint, p: [f64; 2]| (w.x - p[0]).abs() < 1e-9 && (w.y - p[1]).abs() < 1e-9;
        assert!(close(&tr.waypoints[0], g.entry_segment.at(0.4)));
        assert!(close(&tr.waypoints[1], g.transition_segment.at(0.7)));
        assert!(close(&tr.waypoints[3], g.transition_segment.at(0.2)));
        assert!(close(&tr.waypoints[4], g.exit_segment.at(0.6)));
        let times: Vec<f64> = tr.waypoints.iter().map(|w| w.t).collect();
        assert!(times.windows(2).all(|w| w[0] < w[1]));
        assert!((times[4] - 3.4).abs() < 1e-9);
        assert_eq!(tr.agent_id, 7);
    }

    #[test]
    fn events_rebuild_the_series() {
        let g = ScenarioGeometry::default();
        let tr = trace_from_series(&example_series(), &abc_roles(), &g, 1.0, false).unwrap();
        let back = series_from_traces(&[tr], &abc_roles()).unwrap();
        let ids: Vec<&str> = back[0].crossings.iter().map(|c| c.component.as_str()).collect();
        assert_eq!(ids, vec!["A", "B", "B", "C"]);
        assert_eq!(back[0].rhos(), vec![0.4, 1.7, 1.2, 2.6]);
    }

    #[test]
    fn grammar_rejects_bad_sequences() {
        let mk = |kinds: &[EventKind]| AgentTrace {
            agent_id: 0,
            waypoints: vec![],
            events: kinds
                .iter()
                .enumerate()
                .map(|(i, k)| TraceEvent {
                    t: i as f64,
                    kind: *k,
                    rho: 0.0,
                })
                .collect(),
            truncated: false,
            speed: 1.0,
        };
        use EventKind::*;
        assert!(mk(&[Entry, ToRoom2, Exit]).follows_scenario_grammar());
        assert!(mk(&[Entry, StayRoom1, StayRoom1, ToRoom2, Exit]).follows_scenario_grammar());
        assert!(!mk(&[Entry, Exit]).follows_scenario_grammar());
        assert!(!mk(&[Entry, StayRoom1, Exit]).follows_scenario_grammar());
        assert!(!mk(&[StayRoom1, ToRoom2, Exit]).follows_scenario_grammar());
    }

    #[test]
    fn default_geometry_is_consistent() {
        let g = ScenarioGeometry::default();
        g.validate().unwrap();
        assert_eq!(g.entry_segment.length(), 2.0);
        let mut bad = g;
        bad.transition_segment = Segment {
            a: [10.0, 6.5],
            b: [10.0, 8.5],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ns2_format() {
        let tr = AgentTrace {
            agent_id: 3,
            waypoints: vec![
                Waypoint {
                    t: 0.0,
                    x: 1.0,
                    y: 2.0,
                },
                Waypoint {
                    t: 10.0,
                    x: 4.0,
                    y: 6.0,
                },
            ],
            events: vec![],
            truncated: false,
            speed: 1.2,
        };
        let mut buf = Vec::new();
        write_ns2(&[tr], 100.0, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "$node_(3) set X_ 1.000000\n$node_(3) set Y_ 2.000000\n\
             $ns_ at 0.000000 \"$node_(3) setdest 4.000000 6.000000 1.200000\"\n"
        );
    }

    #[test]
    fn perturbation_stays_in_ball() {
        let r = State::xyz(1.0, 2.0, 3.0);
        let mut rng = agent_rng(1, 2);
        for _ in 0..1000 {
            assert!(perturbed_state(&r, 0.5, &mut rng).sub(&r).norm() <= 0.5);
        }
    }

    #[test]
    fn zero_agents_rejected() {
        let sys = SystemDef::lorenz(10.0, 70.0, 8.0 / 3.0).unwrap();
        let model = ScenarioModel {
            system: sys,
            dt: 0.01,
            components: crate::section::lorenz_components(),
            reference: State::xyz(1.0, 1.0, 1.0),
            noise_radius: 0.5,
            decorrelation_time: 1.0,
            step_budget: 10,
        };
        assert!(generate_scenario_traces(0, &model, &ScenarioGeometry::default(), 1).is_err());
    }
}
