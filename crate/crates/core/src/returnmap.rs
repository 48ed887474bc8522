//! First-return maps on ρ, partial maps with entry/exit components, symbolic
//! dynamics, periodic-orbit extraction and the folding/tearing diagnostics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::section::{Crossing, RhoSeries, Role, SectionComponent};

pub const DEFAULT_ORBIT_TOL: f64 = 0.01;
pub const DEFAULT_EPS_IMAGE: f64 = 0.01;
pub const DEFAULT_DELTA_PRE: f64 = 0.1;
pub const DEFAULT_SEGMENT_BUDGET: usize = 1000;
pub const MAX_ORBIT_PERIOD: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnPair {
    /// Position of the abscissa crossing in its series.
    pub n: usize,
    pub rho_n: f64,
    pub rho_next: f64,
    pub from: String,
    pub to: String,
    #[serde(default)]
    pub agent: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentRole {
    pub id: String,
    pub index: usize,
    pub role: Role,
}

impl From<&SectionComponent> for ComponentRole {
    fn from(c: &SectionComponent) -> Self {
        ComponentRole {
            id: c.id.clone(),
            index: c.index,
            role: c.role,
        }
    }
}

pub fn roles_of(comps: &[SectionComponent]) -> Vec<ComponentRole> {
    comps.iter().map(ComponentRole::from).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartialReturnMap {
    pub pairs: Vec<ReturnPair>,
    pub roles: Vec<ComponentRole>,
    /// Segments that ran from an initial to a final component.
    #[serde(default)]
    pub segments: usize,
    /// Segments cut short (budget exhausted, interrupted, or end of data).
    #[serde(default)]
    pub truncated_segments: usize,
}

impl PartialReturnMap {
    pub fn role(&self, id: &str) -> Option<Role> {
        self.roles.iter().find(|r| r.id == id).map(|r| r.role)
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn between<'a>(&'a self, from: &'a str, to: &'a str) -> impl Iterator<Item = &'a ReturnPair> {
        self.pairs.iter().filter(move |p| p.from == from && p.to == to)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "rho_n,rho_next,from,to,agent")?;
        for p in &self.pairs {
            let agent = p.agent.map(|a| a.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{:.16e},{:.16e},{},{},{agent}",
                p.rho_n, p.rho_next, p.from, p.to
            )?;
        }
        Ok(())
    }

    /// Two whitespace-separated columns, one line per pair of the given
    /// component pair.
    pub fn write_gnuplot<W: Write>(&self, mut w: W, from: &str, to: &str) -> Result<()> {
        writeln!(w, "# rho_n rho_n+1 ({from} -> {to})")?;
        for p in self.between(from, to) {
            writeln!(w, "{:.16e} {:.16e}", p.rho_n, p.rho_next)?;
        }
        Ok(())
    }

    /// Component pairs with at least one point, in index order.
    pub fn component_pairs(&self) -> Vec<(String, String)> {
        let order = |id: &str| {
            self.roles
                .iter()
                .find(|r| r.id == id)
                .map_or(usize::MAX, |r| r.index)
        };
        let set: BTreeSet<(usize, usize, String, String)> = self
            .pairs
            .iter()
            .map(|p| (order(&p.from), order(&p.to), p.from.clone(), p.to.clone()))
            .collect();
        set.into_iter().map(|(_, _, f, t)| (f, t)).collect()
    }
}

fn roles_from_series<'a>(series: impl Iterator<Item = &'a RhoSeries>) -> Vec<ComponentRole> {
    let mut seen: BTreeMap<usize, String> = BTreeMap::new();
    for s in series {
        for c in &s.crossings {
            seen.entry(c.index).or_insert_with(|| c.component.clone());
        }
    }
    seen.into_iter()
        .map(|(index, id)| ComponentRole {
            id,
            index,
            role: Role::Cyclic,
        })
        .collect()
}

fn pair(a: &Crossing, b: &Crossing, n: usize, agent: Option<usize>) -> ReturnPair {
    ReturnPair {
        n,
        rho_n: a.rho,
        rho_next: b.rho,
        from: a.component.clone(),
        to: b.component.clone(),
        agent,
    }
}

/// Ordinary first-return map: every consecutive pair of crossings.
pub fn build_first_return_map(series: &RhoSeries) -> Result<PartialReturnMap> {
    if series.len() < 2 {
        return Err(Error::Precondition(format!(
            "a first-return map needs at least 2 crossings, got {}",
            series.len()
        )));
    }
    let pairs = series
        .crossings
        .windows(2)
        .enumerate()
        .map(|(n, w)| pair(&w[0], &w[1], n, series.agent_id))
        .collect();
    Ok(PartialReturnMap {
        pairs,
        roles: roles_from_series(std::iter::once(series)),
        segments: 1,
        truncated_segments: 0,
    })
}

/// Checks that roles can form a partial map: at least one initial and one
/// final component, ordered initial < transitional < final along ρ.
pub fn check_role_order(roles: &[ComponentRole]) -> Result<()> {
    let has = |r: Role| roles.iter().any(|c| c.role == r);
    if !has(Role::Initial) {
        return Err(Error::RoleViolation(
            "\"a partial map needs at least one initial component\"".into(),
        ));
    }
    if !has(Role::Final) {
        return Err(Error::RoleViolation(
            "\"a partial map needs at least one final component\"".into(),
        ));
    }
    for f in roles.iter().filter(|r| r.role == Role::Final) {
        if let Some(later) = roles.iter().find(|r| r.role != Role::Final && r.index > f.index) {
            return Err(Error::RoleViolation(format!(
                "\"a final component must not precede initial or transitional components\" \
                 ({} has index {} but {} has index {})",
                f.id, f.index, later.id, later.index
            )));
        }
    }
    for i in roles.iter().filter(|r| r.role == Role::Initial) {
        if let Some(earlier) = roles
            .iter()
            .find(|r| r.role != Role::Initial && r.index < i.index)
        {
            return Err(Error::RoleViolation(format!(
                "\"initial components must precede transitional and final components\" \
                 ({} has index {} but {} has index {})",
                i.id, i.index, earlier.id, earlier.index
            )));
        }
    }
    Ok(())
}

/// Verifies the two absences every partial map must show.
pub fn check_role_invariants(map: &PartialReturnMap) -> Result<()> {
    for p in &map.pairs {
        if map.role(&p.to) == Some(Role::Initial) {
            return Err(Error::RoleViolation(format!(
                "\"an initial component cannot be reached\" (pair n={} {} -> {})",
                p.n, p.from, p.to
            )));
        }
        if map.role(&p.from) == Some(Role::Final) {
            return Err(Error::RoleViolation(format!(
                "\"a final component has no successor\" (pair n={} {} -> {})",
                p.n, p.from, p.to
            )));
        }
    }
    Ok(())
}

/// Partial first-return map. Each series is cut into segments that start at
/// an initial-component crossing and end at the next final-component
/// crossing; pairs never straddle segments or series.
pub fn build_partial_return_map(
    series: &[RhoSeries],
    roles: &[ComponentRole],
    segment_budget: usize,
) -> Result<PartialReturnMap> {
    check_role_order(roles)?;
    let lookup: BTreeMap<&str, Role> = roles.iter().map(|r| (r.id.as_str(), r.role)).collect();
    let mut map = PartialReturnMap {
        roles: roles.to_vec(),
        ..Default::default()
    };
    for s in series {
        // (position in series, crossing) of the open segment
        let mut open: Vec<(usize, &Crossing)> = Vec::new();
        let flush = |seg: &mut Vec<(usize, &Crossing)>, pairs: &mut Vec<ReturnPair>| {
            for w in seg.windows(2) {
                pairs.push(pair(w[0].1, w[1].1, w[0].0, s.agent_id));
            }
            seg.clear();
        };
        for (n, c) in s.crossings.iter().enumerate() {
            let role = *lookup
                .get(c.component.as_str())
                .ok_or_else(|| Error::Precondition(format!("component {} has no role", c.component)))?;
            match role {
                Role::Initial => {
                    if !open.is_empty() {
                        map.truncated_segments += 1;
                        flush(&mut open, &mut map.pairs);
                    }
                    open.push((n, c));
                }
                Role::Final => {
                    if !open.is_empty() {
                        open.push((n, c));
                        flush(&mut open, &mut map.pairs);
                        map.segments += 1;
                    }
                }
                Role::Transitional | Role::Cyclic => {
                    if !open.is_empty() {
                        open.push((n, c));
                        if open.len() > segment_budget {
                            map.truncated_segments += 1;
                            flush(&mut open, &mut map.pairs);
                        }
                    }
                }
            }
        }
        if !open.is_empty() {
            map.truncated_segments += 1;
            flush(&mut open, &mut map.pairs);
        }
    }
    if map.truncated_segments > 0 {
        warn!(
            "{} segment(s) did not reach a final component",
            map.truncated_segments
        );
    }
    Ok(map)
}

/// Pair counts per `(from, to)`, rows and columns in component-index order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub ids: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl TransitionMatrix {
    pub fn get(&self, from: &str, to: &str) -> usize {
        let i = self.ids.iter().position(|x| x == from);
        let j = self.ids.iter().position(|x| x == to);
        match (i, j) {
            (Some(i), Some(j)) => self.counts[i][j],
            _ => 0,
        }
    }

    /// The set of `(from, to)` entries with a nonzero count.
    pub fn support(&self) -> BTreeSet<(String, String)> {
        let mut out = BTreeSet::new();
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c > 0 {
                    out.insert((self.ids[i].clone(), self.ids[j].clone()));
                }
            }
        }
        out
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }
}

pub fn transition_matrix(map: &PartialReturnMap) -> TransitionMatrix {
    let mut roles = map.roles.clone();
    roles.sort_by_key(|r| r.index);
    let ids: Vec<String> = roles.into_iter().map(|r| r.id).collect();
    let mut counts = vec![vec![0; ids.len()]; ids.len()];
    for p in &map.pairs {
        let i = ids.iter().position(|x| *x == p.from);
        let j = ids.iter().position(|x| *x == p.to);
        if let (Some(i), Some(j)) = (i, j) {
            counts[i][j] += 1;
        }
    }
    TransitionMatrix { ids, counts }
}

/// Bins of one component slot labelled by symbols, e.g. L | A | R.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolPartition {
    pub component: String,
    pub slot: (f64, f64),
    pub breakpoints: Vec<f64>,
    pub symbols: Vec<char>,
}

impl SymbolPartition {
    /// Symbol of the bin containing `rho`; bins are closed on the left.
    pub fn symbol(&self, rho: f64) -> Result<char> {
        let (lo, hi) = self.slot;
        if !(rho >= lo && rho <= hi) {
            return Err(Error::Precondition(format!(
                "rho {rho} outside slot [{lo}, {hi}] of component {}",
                self.component
            )));
        }
        let bin = self.breakpoints.partition_point(|&b| b <= rho);
        Ok(self.symbols[bin])
    }

    pub fn word(&self, rhos: &[f64]) -> Result<String> {
        rhos.iter().map(|&r| self.symbol(r)).collect()
    }
}

pub fn partition_symbols(
    component: &str,
    slot: (f64, f64),
    breakpoints: &[f64],
    symbols: &[char],
) -> Result<SymbolPartition> {
    if symbols.len() != breakpoints.len() + 1 {
        return Err(Error::Precondition(format!(
            "{} breakpoints need {} symbols, got {}",
            breakpoints.len(),
            breakpoints.len() + 1,
            symbols.len()
        )));
    }
    if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Precondition(
            "breakpoints must be strictly ascending".into(),
        ));
    }
    if breakpoints.iter().any(|&b| b <= slot.0 || b >= slot.1) {
        return Err(Error::Precondition(format!(
            "breakpoints must lie strictly inside the slot [{}, {}]",
            slot.0, slot.1
        )));
    }
    let distinct: BTreeSet<char> = symbols.iter().copied().collect();
    if distinct.len() != symbols.len() {
        return Err(Error::Precondition("symbols must be distinct".into()));
    }
    Ok(SymbolPartition {
        component: component.to_string(),
        slot,
        breakpoints: breakpoints.to_vec(),
        symbols: symbols.to_vec(),
    })
}

/// L/A/R partition placed from the period-1 point and the period-2 cycle:
/// the A bin holds the period-1 point and the lower period-2 point, the R
/// bin holds the upper period-2 point, L is what remains on the left.
pub fn default_lar_partition(
    component: &str,
    slot: (f64, f64),
    period1: f64,
    period2: [f64; 2],
) -> Result<SymbolPartition> {
    let (lo, hi) = if period2[0] <= period2[1] {
        (period2[0], period2[1])
    } else {
        (period2[1], period2[0])
    };
    if hi <= period1 {
        return Err(Error::Precondition(format!(
            "period-2 partner {hi} does not lie right of the period-1 point {period1}"
        )));
    }
    let b1 = 0.5 * (slot.0 + lo.min(period1));
    let b2 = 0.5 * (lo.max(period1) + hi);
    partition_symbols(component, slot, &[b1, b2], &['L', 'A', 'R'])
}

/// Word of the series under per-component partitions.
pub fn symbolize(series: &RhoSeries, partitions: &[SymbolPartition]) -> Result<String> {
    series
        .crossings
        .iter()
        .map(|c| {
            partitions
                .iter()
                .find(|p| p.component == c.component)
                .ok_or_else(|| {
                    Error::Precondition(format!("no symbol partition for component {}", c.component))
                })?
                .symbol(c.rho)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicOrbit {
    pub period: usize,
    pub rho_cycle: Vec<f64>,
    /// Empty until a partition is applied.
    pub symbol_word: String,
    pub residual: f64,
    /// Number of recurrences merged into this orbit.
    pub support: usize,
}

impl PeriodicOrbit {
    pub fn with_word(mut self, partition: &SymbolPartition) -> Result<Self> {
        self.symbol_word = partition.word(&self.rho_cycle)?;
        Ok(self)
    }
}

/// Maximal runs of chained pairs (each pair's image is the next abscissa).
fn chains(map: &PartialReturnMap) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    let mut prev: Option<&ReturnPair> = None;
    for p in &map.pairs {
        let continues = prev
            .is_some_and(|q| q.agent == p.agent && q.n + 1 == p.n && q.rho_next == p.rho_n && q.to == p.from);
        if continues {
            out.last_mut().unwrap().push(p.rho_next);
        } else {
            out.push(vec![p.rho_n, p.rho_next]);
        }
        prev = Some(p);
    }
    out
}

fn divisors(k: usize) -> impl Iterator<Item = usize> {
    (1..k).filter(move |d| k.is_multiple_of(*d))
}

/// Distance between two cycles up to rotation.
fn cycle_distance(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len();
    (0..k)
        .map(|r| (0..k).map(|j| (a[j] - b[(j + r) % k]).abs()).fold(0.0, f64::max))
        .fold(f64::INFINITY, f64::min)
}

fn canonical_rotation(cycle: &[f64]) -> Vec<f64> {
    let start = cycle
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i);
    cycle[start..].iter().chain(&cycle[..start]).copied().collect()
}

/// Recurrence search for period-`k` orbits of the empirical map.
///
/// A candidate is any index with `|ρ(n+k) - ρ(n)| < tol` whose point does
/// not already recur at a proper divisor of `k`. Candidates within `tol` of
/// each other (up to cyclic rotation) are merged; each orbit keeps the
/// member with the smallest residual, rotated to start at its lowest ρ.
pub fn extract_periodic_orbits(map: &PartialReturnMap, k: usize, tol: f64) -> Result<Vec<PeriodicOrbit>> {
    if !(1..=MAX_ORBIT_PERIOD).contains(&k) {
        return Err(Error::Precondition(format!(
            "period must be in [1, {MAX_ORBIT_PERIOD}], got {k}"
        )));
    }
    if map.len() < 50 * k {
        return Err(Error::Precondition(format!(
            "period {k} needs at least {} pairs, map has {}",
            50 * k,
            map.len()
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::Precondition("tolerance must be > 0".into()));
    }
    let mut candidates: Vec<(f64, Vec<f64>)> = Vec::new();
    for chain in chains(map) {
        for n in 0..chain.len().saturating_sub(k) {
            let residual = (chain[n + k] - chain[n]).abs();
            if residual >= tol {
                continue;
            }
            if divisors(k).any(|d| (chain[n + d] - chain[n]).abs() < tol) {
                continue;
            }
            candidates.push((residual, chain[n..n + k].to_vec()));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.partial_cmp(&b.1).unwrap()));

    let mut orbits: Vec<PeriodicOrbit> = Vec::new();
    for (residual, cycle) in candidates {
        match orbits
            .iter_mut()
            .find(|o| cycle_distance(&o.rho_cycle, &cycle) < tol)
        {
            Some(o) => o.support += 1,
            None => orbits.push(PeriodicOrbit {
                period: k,
                rho_cycle: canonical_rotation(&cycle),
                symbol_word: String::new(),
                residual,
                support: 1,
            }),
        }
    }
    orbits.sort_by(|a, b| {
        b.support
            .cmp(&a.support)
            .then_with(|| a.rho_cycle.partial_cmp(&b.rho_cycle).unwrap())
    });
    Ok(orbits)
}

/// Nearest-neighbour lookup into the empirical map.
pub struct EmpiricalMap {
    points: Vec<(f64, f64)>,
}

impl EmpiricalMap {
    pub fn new(map: &PartialReturnMap) -> Self {
        let mut points: Vec<(f64, f64)> = map.pairs.iter().map(|p| (p.rho_n, p.rho_next)).collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        EmpiricalMap { points }
    }

    /// Image of the pair whose abscissa is nearest to `x`, if within `tol`.
    pub fn image(&self, x: f64, tol: f64) -> Option<f64> {
        let i = self.points.partition_point(|p| p.0 < x);
        let mut best: Option<(f64, f64)> = None;
        for j in [i.wrapping_sub(1), i] {
            if let Some(&(a, img)) = self.points.get(j) {
                let d = (a - x).abs();
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, img));
                }
            }
        }
        best.filter(|(d, _)| *d <= tol).map(|(_, img)| img)
    }

    /// Pushes `x` through the map `steps` times.
    pub fn iterate(&self, x: f64, steps: usize, tol: f64) -> Option<f64> {
        (0..steps).try_fold(x, |acc, _| self.image(acc, tol))
    }
}

/// `|f^k(ρ0) - ρ0|` under the nearest-neighbour map, or `None` when the
/// orbit leaves the sampled region.
pub fn orbit_return_error(map: &PartialReturnMap, orbit: &PeriodicOrbit, tol: f64) -> Option<f64> {
    let emp = EmpiricalMap::new(map);
    let x0 = orbit.rho_cycle[0];
    emp.iterate(x0, orbit.period, tol).map(|x| (x - x0).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldWitness {
    pub rho_beta: f64,
    pub rho_gamma: f64,
    pub image: f64,
}

/// Pairs of points of the `(from, to)` sub-map whose images are closer than
/// `eps_image` while their preimages are further apart than `delta_pre`:
/// two distinct preimages sharing one image.
pub fn detect_folding(
    map: &PartialReturnMap,
    from: &str,
    to: &str,
    eps_image: f64,
    delta_pre: f64,
) -> Result<Vec<FoldWitness>> {
    let mut pts: Vec<(f64, f64)> = map.between(from, to).map(|p| (p.rho_next, p.rho_n)).collect();
    if pts.is_empty() {
        return Err(Error::Precondition(format!("map has no {from} -> {to} pairs")));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut out = Vec::new();
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            if pts[j].0 - pts[i].0 >= eps_image {
                break;
            }
            if (pts[j].1 - pts[i].1).abs() > delta_pre {
                let (beta, gamma) = if pts[i].1 < pts[j].1 {
                    (pts[i].1, pts[j].1)
                } else {
                    (pts[j].1, pts[i].1)
                };
                out.push(FoldWitness {
                    rho_beta: beta,
                    rho_gamma: gamma,
                    image: 0.5 * (pts[i].0 + pts[j].0),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangePoint {
    pub rho_star: f64,
    pub left_target: String,
    pub right_target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Tearing {
    NoTearing { target: String },
    Split { change_points: Vec<ChangePoint> },
}

impl Tearing {
    pub fn targets(&self) -> BTreeSet<String> {
        match self {
            Tearing::NoTearing { target } => std::iter::once(target.clone()).collect(),
            Tearing::Split { change_points } => change_points
                .iter()
                .flat_map(|c| [c.left_target.clone(), c.right_target.clone()])
                .collect(),
        }
    }
}

/// Scans the pairs leaving `from` in abscissa order and reports every place
/// where the target component changes.
pub fn detect_tearing(map: &PartialReturnMap, from: &str) -> Result<Tearing> {
    let mut pts: Vec<(f64, &str)> = map
        .pairs
        .iter()
        .filter(|p| p.from == from)
        .map(|p| (p.rho_n, p.to.as_str()))
        .collect();
    if pts.is_empty() {
        return Err(Error::Precondition(format!("map has no pairs leaving {from}")));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
    let change_points: Vec<ChangePoint> = pts
        .windows(2)
        .filter(|w| w[0].1 != w[1].1)
        .map(|w| ChangePoint {
            rho_star: 0.5 * (w[0].0 + w[1].0),
            left_target: w[0].1.to_string(),
            right_target: w[1].1.to_string(),
        })
        .collect();
    if change_points.is_empty() {
        Ok(Tearing::NoTearing {
            target: pts[0].1.to_string(),
        })
    } else {
        Ok(Tearing::Split { change_points })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unimodality {
    /// Index (in abscissa order) of the smoothed maximum.
    pub peak: usize,
    pub rho_peak: f64,
    /// Fraction of smoothed points stepping against the expected direction.
    pub violation_fraction: f64,
    pub points: usize,
}

/// Sorts the map by abscissa, smooths the images with a centred moving
/// average of `window` points and measures how far the smoothed curve is
/// from "increasing, then decreasing".
pub fn unimodality(map: &PartialReturnMap, window: usize) -> Result<Unimodality> {
    if map.len() < window.max(3) || window == 0 {
        return Err(Error::Precondition(format!(
            "need at least {} pairs for a {window}-point smoothing",
            window.max(3)
        )));
    }
    let mut pts: Vec<(f64, f64)> = map.pairs.iter().map(|p| (p.rho_n, p.rho_next)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let smooth: Vec<f64> = pts
        .windows(window)
        .map(|w| w.iter().map(|p| p.1).sum::<f64>() / window as f64)
        .collect();
    let peak = smooth
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let violations = smooth
        .windows(2)
        .enumerate()
        .filter(|(i, w)| if *i < peak { w[1] < w[0] } else { w[1] > w[0] })
        .count();
    Ok(Unimodality {
        peak,
        rho_peak: pts[peak + window / 2].0,
        violation_fraction: violations as f64 / smooth.len().saturating_sub(1).max(1) as f64,
        points: smooth.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::State;

    fn crossing(id: &str, index: usize, rho: f64, t: f64) -> Crossing {
        Crossing {
            component: id.into(),
            index,
            time: t,
            state: State::xyz(0.0, 0.0, 0.0),
            rho,
        }
    }

    fn single(rhos: &[f64]) -> RhoSeries {
        RhoSeries {
            crossings: rhos
                .iter()
                .enumerate()
                .map(|(i, &r)| crossing("P", 1, r, i as f64))
                .collect(),
            ..Default::default()
        }
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

    fn abc_series(agent: Option<usize>, items: &[(&str, f64)]) -> RhoSeries {
        RhoSeries {
            agent_id: agent,
            crossings: items
                .iter()
                .enumerate()
                .map(|(i, (id, r))| {
                    let index = match *id {
                        "A" => 1,
                        "B" => 2,
                        _ => 3,
                    };
                    crossing(id, index, *r, i as f64)
                })
                .collect(),
            ..Default::default()
        }
    }

    /// Pairs given directly, as if read from a measured map.
    fn synthetic(points: &[(f64, f64)], from: &str, to: &str) -> PartialReturnMap {
        PartialReturnMap {
            pairs: points
                .iter()
                .enumerate()
                .map(|(n, &(a, b))| ReturnPair {
                    n: 2 * n,
                    rho_n: a,
                    rho_next: b,
                    from: from.into(),
                    to: to.into(),
                    agent: None,
                })
                .collect(),
            roles: abc_roles(),
            ..Default::default()
        }
    }

    #[test]
    fn consecutive_pairing() {
        let m = build_first_return_map(&single(&[0.2, 0.7, 0.4])).unwrap();
        let pts: Vec<(f64, f64)> = m.pairs.iter().map(|p| (p.rho_n, p.rho_next)).collect();
        assert_eq!(pts, vec![(0.2, 0.7), (0.7, 0.4)]);
        assert!(build_first_return_map(&single(&[0.3])).is_err());
    }

    #[test]
    fn partial_map_example() {
        let s = abc_series(None, &[("A", 0.4), ("B", 1.7), ("B", 1.2), ("C", 2.6)]);
        let m = build_partial_return_map(&[s], &abc_roles(), 100).unwrap();
        let pts: Vec<(f64, f64)> = m.pairs.iter().map(|p| (p.rho_n, p.rho_next)).collect();
        assert_eq!(pts, vec![(0.4, 1.7), (1.7, 1.2), (1.2, 2.6)]);
        assert!(m.pairs.iter().all(|p| p.rho_n != 2.6));
        assert_eq!(m.segments, 1);
        check_role_invariants(&m).unwrap();

        let tm = transition_matrix(&m);
        assert_eq!(tm.get("A", "B"), 1);
        assert_eq!(tm.get("B", "B"), 1);
        assert_eq!(tm.get("B", "C"), 1);
        assert_eq!(tm.total(), 3);
        assert_eq!(tm.counts[2], vec![0, 0, 0]);
    }

    #[test]
    fn crossings_outside_segments_are_ignored() {
        // C -> A and stray B before any entry never form pairs
        let s = abc_series(
            None,
            &[
                ("B", 1.5),
                ("C", 2.1),
                ("A", 0.3),
                ("B", 1.4),
                ("C", 2.2),
                ("A", 0.6),
                ("B", 1.9),
            ],
        );
        let m = build_partial_return_map(&[s], &abc_roles(), 100).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.segments, 1);
        assert_eq!(m.truncated_segments, 1);
        check_role_invariants(&m).unwrap();
    }

    #[test]
    fn agents_never_mix() {
        let a = abc_series(Some(0), &[("A", 0.1), ("B", 1.1), ("C", 2.1)]);
        let b = abc_series(Some(1), &[("A", 0.9), ("B", 1.9), ("B", 1.3), ("C", 2.9)]);
        let m = build_partial_return_map(&[a, b], &abc_roles(), 100).unwrap();
        assert_eq!(m.len(), 5);
        assert!(m.pairs[..2].iter().all(|p| p.agent == Some(0)));
        assert!(m.pairs[2..].iter().all(|p| p.agent == Some(1)));
        assert_eq!(m.segments, 2);
    }

    #[test]
    fn segment_budget_truncates() {
        let s = abc_series(
            None,
            &[("A", 0.1), ("B", 1.1), ("B", 1.2), ("B", 1.3), ("C", 2.0)],
        );
        let m = build_partial_return_map(&[s], &abc_roles(), 3).unwrap();
        assert_eq!(m.truncated_segments, 1);
        assert_eq!(m.segments, 0);
    }

    #[test]
    fn role_order_rules() {
        let mut roles = abc_roles();
        roles[2].index = 1;
        roles[0].index = 3;
        let err = check_role_order(&roles).unwrap_err().to_string();
        assert!(err.contains("final component must not precede"), "{err}");

        let no_final: Vec<_> = abc_roles().into_iter().take(2).collect();
        assert!(check_role_order(&no_final).is_err());
    }

    #[test]
    fn role_invariant_violation_is_reported() {
        let bad = synthetic(&[(1.5, 0.5)], "B", "A");
        assert!(check_role_invariants(&bad).is_err());
        let bad = synthetic(&[(2.5, 1.5)], "C", "B");
        assert!(check_role_invariants(&bad).is_err());
    }

    #[test]
    fn empty_transition_matrix() {
        let m = PartialReturnMap {
            roles: abc_roles(),
            ..Default::default()
        };
        let tm = transition_matrix(&m);
        assert_eq!(tm.total(), 0);
        assert!(tm.support().is_empty());
    }

    #[test]
    fn lar_binning() {
        let p = partition_symbols("P", (0.0, 1.0), &[0.33, 0.66], &['L', 'A', 'R']).unwrap();
        assert_eq!(p.symbol(0.1).unwrap(), 'L');
        assert_eq!(p.symbol(0.5).unwrap(), 'A');
        assert_eq!(p.symbol(0.9).unwrap(), 'R');
        assert_eq!(p.symbol(0.0).unwrap(), 'L');
        assert_eq!(p.symbol(1.0).unwrap(), 'R');
        assert!(p.symbol(1.2).is_err());
        assert_eq!(symbolize(&single(&[0.1, 0.5, 0.9, 0.5]), &[p]).unwrap(), "LARA");
    }

    #[test]
    fn partition_validation() {
        assert!(partition_symbols("P", (0.0, 1.0), &[0.66, 0.33], &['L', 'A', 'R']).is_err());
        assert!(partition_symbols("P", (0.0, 1.0), &[0.0, 0.5], &['L', 'A', 'R']).is_err());
        assert!(partition_symbols("P", (0.0, 1.0), &[0.3, 0.5], &['L', 'A', 'L']).is_err());
        assert!(partition_symbols("P", (0.0, 1.0), &[0.3], &['L', 'A', 'R']).is_err());
    }

    #[test]
    fn default_partition_from_orbits() {
        let p = default_lar_partition("P", (0.0, 1.0), 0.705, [0.88, 0.28]).unwrap();
        assert_eq!(p.symbol(0.705).unwrap(), 'A');
        assert_eq!(p.word(&[0.28, 0.88]).unwrap(), "AR");
        assert_eq!(p.symbol(0.05).unwrap(), 'L');
        assert!(default_lar_partition("P", (0.0, 1.0), 0.7, [0.1, 0.65]).is_err());
    }

    #[test]
    fn identity_map_recurs_everywhere() {
        let pts: Vec<(f64, f64)> = (0..100).map(|i| (i as f64 / 100.0, i as f64 / 100.0)).collect();
        let m = synthetic(&pts, "A", "A");
        let orbits = extract_periodic_orbits(&m, 1, 1e-6).unwrap();
        // points are 0.01 apart, far above tol: every point is its own centre
        assert_eq!(orbits.len(), 100);
        assert!(orbits.iter().all(|o| o.residual == 0.0));
    }

    #[test]
    fn orbit_preconditions() {
        let m = synthetic(&[(0.1, 0.2); 60], "A", "A");
        assert!(extract_periodic_orbits(&m, 0, 0.01).is_err());
        assert!(extract_periodic_orbits(&m, 7, 0.01).is_err());
        assert!(extract_periodic_orbits(&m, 2, 0.01).is_err());
    }

    /// Logistic-type map with a known period-2 cycle.
    fn logistic_series(r: f64, x0: f64, n: usize) -> RhoSeries {
        let mut x = x0;
        for _ in 0..500 {
            x = r * x * (1.0 - x);
        }
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(x);
            x = r * x * (1.0 - x);
        }
        single(&v)
    }

    #[test]
    fn period_two_of_a_pure_period_one_signal_is_empty() {
        // r = 2.8: every point converges to the fixed point 1 - 1/r
        let m = build_first_return_map(&logistic_series(2.8, 0.3, 400)).unwrap();
        let p1 = extract_periodic_orbits(&m, 1, 0.01).unwrap();
        assert_eq!(p1.len(), 1);
        assert!((p1[0].rho_cycle[0] - (1.0 - 1.0 / 2.8)).abs() < 0.01);
        // the oracle: feed the k=1 cycle itself through the k=2 checker
        let cycle_signal = single(&vec![p1[0].rho_cycle[0]; 200]);
        let m1 = build_first_return_map(&cycle_signal).unwrap();
        assert!(extract_periodic_orbits(&m1, 2, 0.01).unwrap().is_empty());
        assert!(extract_periodic_orbits(&m, 2, 0.01).unwrap().is_empty());
    }

    #[test]
    fn period_two_cycle_found_once() {
        // r = 3.2: stable 2-cycle (r+1 ± sqrt((r-3)(r+1))) / 2r
        let r: f64 = 3.2;
        let s = ((r - 3.0) * (r + 1.0)).sqrt();
        let lo = (r + 1.0 - s) / (2.0 * r);
        let hi = (r + 1.0 + s) / (2.0 * r);
        let m = build_first_return_map(&logistic_series(r, 0.3, 400)).unwrap();
        let orbits = extract_periodic_orbits(&m, 2, 0.01).unwrap();
        assert_eq!(orbits.len(), 1);
        let o = &orbits[0];
        assert!((o.rho_cycle[0] - lo).abs() < 0.01 && (o.rho_cycle[1] - hi).abs() < 0.01);
        assert!(o.residual <= 0.01);
        let err = orbit_return_error(&m, o, 0.01).unwrap();
        assert!(err <= 0.03);
    }

    #[test]
    fn tent_map_folds() {
        let pts: Vec<(f64, f64)> = (0..=1000)
            .map(|i| {
                let x = i as f64 / 1000.0;
                (x, 1.0 - 2.0 * (x - 0.5).abs())
            })
            .collect();
        let m = synthetic(&pts, "A", "B");
        let w = detect_folding(&m, "A", "B", 1e-3, 0.2).unwrap();
        assert!(!w.is_empty());
        assert!(w
            .iter()
            .any(|w| (w.rho_beta - 0.3).abs() < 1e-9 && (w.rho_gamma - 0.7).abs() < 1e-9));
        for x in &w {
            assert!(x.rho_gamma - x.rho_beta > 0.2);
        }
    }

    #[test]
    fn monotone_map_does_not_fold() {
        let pts: Vec<(f64, f64)> = (0..=1000)
            .map(|i| (i as f64 / 1000.0, i as f64 / 2000.0))
            .collect();
        let m = synthetic(&pts, "A", "B");
        assert!(detect_folding(&m, "A", "B", 1e-3, 0.2).unwrap().is_empty());
        assert!(detect_folding(&m, "B", "C", 1e-3, 0.2).is_err());
    }

    #[test]
    fn constructed_tear() {
        let mut m = synthetic(&[(1.1, 1.8), (1.2, 1.9)], "B", "B");
        m.pairs
            .extend(synthetic(&[(1.4, 2.2), (1.5, 2.4)], "B", "C").pairs);
        match detect_tearing(&m, "B").unwrap() {
            Tearing::Split { change_points } => {
                assert_eq!(change_points.len(), 1);
                assert!((change_points[0].rho_star - 1.3).abs() < 1e-12);
                assert_eq!(change_points[0].left_target, "B");
                assert_eq!(change_points[0].right_target, "C");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn interleaved_targets_report_every_change() {
        let mut m = synthetic(&[(1.1, 1.8), (1.5, 1.9)], "B", "B");
        m.pairs
            .extend(synthetic(&[(1.3, 2.2), (1.7, 2.4)], "B", "C").pairs);
        match detect_tearing(&m, "B").unwrap() {
            Tearing::Split { change_points } => assert_eq!(change_points.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_target_no_tearing() {
        let m = synthetic(&[(1.1, 1.8), (1.2, 1.9)], "B", "B");
        assert_eq!(
            detect_tearing(&m, "B").unwrap(),
            Tearing::NoTearing { target: "B".into() }
        );
    }

    #[test]
    fn unimodal_tent_passes() {
        let pts: Vec<(f64, f64)> = (0..500)
            .map(|i| {
                let x = i as f64 / 500.0;
                (x, 1.0 - 2.0 * (x - 0.5).abs())
            })
            .collect();
        let u = unimodality(&synthetic(&pts, "A", "A"), 25).unwrap();
        assert!(u.violation_fraction < 0.01);
        assert!((u.rho_peak - 0.5).abs() < 0.02);
    }
}
