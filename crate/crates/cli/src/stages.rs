use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chaomob::dynsys::{integrate, Flow, State, Trajectory};
use chaomob::metrics::{bifurcation_scan, coverage_rate, lle_benettin, LleConfig, LleEstimate};
use chaomob::mobility::{
    generate_scenario_traces, generate_uav_trace, random_walk_trace, series_from_traces, write_ns2,
    write_traces_csv, write_traces_json, AgentTrace, CacocModel, Rect, ScenarioModel,
};
use chaomob::returnmap::{
    build_first_return_map, build_partial_return_map, check_role_invariants, default_lar_partition,
    detect_folding, detect_tearing, extract_periodic_orbits, orbit_return_error, partition_symbols, roles_of,
    transition_matrix, unimodality, FoldWitness, PartialReturnMap, PeriodicOrbit, SymbolPartition, Tearing,
    TransitionMatrix, Unimodality,
};
use chaomob::section::{
    build_rho_series, calibrate_component, detect_raw_crossings, RhoSeries, SectionComponent,
};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::Resolved;
use crate::manifest::{sha256_hex, RunManifest};
use crate::{CliError, SCHEMA_VERSION, TOOL_NAME, TOOL_VERSION};

pub const TRAJECTORY: &str = "trajectory.csv";
pub const COMPONENTS: &str = "components.json";
pub const RHO_SERIES: &str = "rho_series.json";
pub const MAP: &str = "map.json";
pub const PARTITION: &str = "partition.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Integrate,
    Section,
    Map,
    Orbits,
    Traces,
    Coverage,
    Lle,
    Bifurcation,
    /// integrate, section, map (and orbits for cyclic sections) in one process.
    Pipeline,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Integrate,
        Stage::Section,
        Stage::Map,
        Stage::Orbits,
        Stage::Traces,
        Stage::Coverage,
        Stage::Lle,
        Stage::Bifurcation,
        Stage::Pipeline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Integrate => "integrate",
            Stage::Section => "section",
            Stage::Map => "map",
            Stage::Orbits => "orbits",
            Stage::Traces => "traces",
            Stage::Coverage => "coverage",
            Stage::Lle => "lle",
            Stage::Bifurcation => "bifurcation",
            Stage::Pipeline => "pipeline",
        }
    }

    pub fn from_name(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }
}

#[derive(Debug, Clone)]
pub struct Workspace {
    /// Where upstream artifacts are read from.
    pub input: PathBuf,
    pub output: PathBuf,
}

impl Workspace {
    pub fn single(dir: impl Into<PathBuf>) -> Self {
        let dir = dir.into();
        Workspace {
            input: dir.clone(),
            output: dir,
        }
    }
}

struct Ctx<'a> {
    r: &'a Resolved,
    ws: &'a Workspace,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl<'a> Ctx<'a> {
    fn read(&mut self, name: &str, producer: &'static str) -> Result<Vec<u8>, CliError> {
        let path = self.ws.input.join(name);
        if !path.is_file() {
            return Err(CliError::MissingArtifact { path, producer });
        }
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        self.inputs.insert(name.to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn read_json<T: DeserializeOwned>(&mut self, name: &str, producer: &'static str) -> Result<T, CliError> {
        let bytes = self.read(name, producer)?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::BadArtifact {
            path: self.ws.input.join(name),
            message: e.to_string(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.ws.output.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn write_with(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> chaomob::Result<()>,
    ) -> Result<(), CliError> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut buf = serde_json::to_vec_pretty(value).map_err(chaomob::Error::from)?;
        buf.push(b'\n');
        self.write(name, &buf)
    }
}

/// Runs one stage and writes its manifest next to the outputs.
pub fn run_stage(stage: Stage, r: &Resolved, ws: &Workspace) -> Result<RunManifest, CliError> {
    fs::create_dir_all(&ws.output).map_err(io_err(&ws.output))?;
    let mut ctx = Ctx {
        r,
        ws,
        inputs: BTreeMap::new(),
        outputs: BTreeMap::new(),
    };
    match stage {
        Stage::Integrate => {
            integrate_stage(&mut ctx)?;
        }
        Stage::Section => {
            let traj = load_trajectory(&mut ctx)?;
            section_stage(&mut ctx, &traj)?;
        }
        Stage::Map => {
            let comps: Vec<SectionComponent> = ctx.read_json(COMPONENTS, "section")?;
            let series: RhoSeries = ctx.read_json(RHO_SERIES, "section")?;
            map_stage(&mut ctx, &series, &comps)?;
        }
        Stage::Orbits => {
            let comps: Vec<SectionComponent> = ctx.read_json(COMPONENTS, "section")?;
            let map: PartialReturnMap = ctx.read_json(MAP, "map")?;
            orbits_stage(&mut ctx, &map, &comps)?;
        }
        Stage::Traces => traces_stage(&mut ctx)?,
        Stage::Coverage => coverage_stage(&mut ctx)?,
        Stage::Lle => lle_stage(&mut ctx)?,
        Stage::Bifurcation => bifurcation_stage(&mut ctx)?,
        Stage::Pipeline => {
            let traj = integrate_stage(&mut ctx)?;
            let (comps, series) = section_stage(&mut ctx, &traj)?;
            let map = map_stage(&mut ctx, &series, &comps)?;
            if r.is_cyclic() && !r.config.map.periods.is_empty() {
                orbits_stage(&mut ctx, &map, &comps)?;
            }
        }
    }
    let config = r.to_toml()?;
    ctx.write(&format!("{}.config.toml", stage.name()), config.as_bytes())?;
    let manifest = RunManifest {
        tool: TOOL_NAME.to_string(),
        tool_version: TOOL_VERSION.to_string(),
        schema_version: SCHEMA_VERSION,
        stage: stage.name().to_string(),
        seed: r.config.seed,
        config_sha256: sha256_hex(config.as_bytes()),
        config,
        inputs: ctx.inputs,
        outputs: ctx.outputs,
    };
    let path = ws.output.join(RunManifest::file_name(stage.name()));
    let mut buf = serde_json::to_vec_pretty(&manifest).map_err(chaomob::Error::from)?;
    buf.push(b'\n');
    fs::write(&path, buf).map_err(io_err(&path))?;
    Ok(manifest)
}

fn load_trajectory(ctx: &mut Ctx) -> Result<Trajectory, CliError> {
    let bytes = ctx.read(TRAJECTORY, "integrate")?;
    Ok(Trajectory::read_csv(
        bytes.as_slice(),
        ctx.r.config.integrator.dt,
    )?)
}

/// State after the configured transient, the reference for seeded agents.
pub fn reference_state(r: &Resolved) -> Result<State, CliError> {
    let mut flow = Flow::new(&r.system, r.initial_state, r.config.integrator.dt)?;
    Ok(flow.advance_by(r.config.integrator.transient_steps)?)
}

fn integrate_stage(ctx: &mut Ctx) -> Result<Trajectory, CliError> {
    let r = ctx.r;
    let traj = integrate(&r.system, r.initial_state, &r.config.integrator)?;
    ctx.write_with(TRAJECTORY, |w| traj.write_csv(w))?;
    Ok(traj)
}

/// Calibrates components that carry no range, then extracts the ρ series.
pub fn section_from(r: &Resolved, traj: &Trajectory) -> Result<(Vec<SectionComponent>, RhoSeries), CliError> {
    if r.components.is_empty() {
        return Err(CliError::Config("no section components configured".into()));
    }
    let refine = r.config.section.refine.then_some(&r.system);
    let comps = r
        .components
        .iter()
        .map(|c| {
            if c.norm_range.is_some() {
                return Ok(c.clone());
            }
            let states: Vec<State> = detect_raw_crossings(traj, c, refine)
                .into_iter()
                .map(|x| x.state)
                .collect();
            calibrate_component(&states, c)
        })
        .collect::<chaomob::Result<Vec<_>>>()?;
    let series = build_rho_series(traj, &comps, refine)?;
    Ok((comps, series))
}

fn section_stage(ctx: &mut Ctx, traj: &Trajectory) -> Result<(Vec<SectionComponent>, RhoSeries), CliError> {
    let (comps, series) = section_from(ctx.r, traj)?;
    ctx.write_json(COMPONENTS, &comps)?;
    ctx.write_json(RHO_SERIES, &series)?;
    ctx.write_with("rho_series.csv", |w| series.write_csv(w))?;
    Ok((comps, series))
}

/// First-return map for cyclic sections, partial map otherwise.
pub fn map_from(
    r: &Resolved,
    series: &RhoSeries,
    comps: &[SectionComponent],
) -> Result<PartialReturnMap, CliError> {
    let roles = roles_of(comps);
    let map = if r.is_cyclic() {
        build_first_return_map(series)?
    } else {
        build_partial_return_map(std::slice::from_ref(series), &roles, r.config.map.segment_budget)?
    };
    check_role_invariants(&map)?;
    Ok(map)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldingReport {
    pub from: String,
    pub to: String,
    pub witnesses: usize,
    pub examples: Vec<FoldWitness>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TearingReport {
    pub from: String,
    pub tearing: Tearing,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapSummary {
    pub pairs: usize,
    pub segments: usize,
    pub truncated_segments: usize,
    pub transitions: TransitionMatrix,
    pub support: Vec<(String, String)>,
    pub unimodality: Option<Unimodality>,
    pub folding: Vec<FoldingReport>,
    pub tearing: Vec<TearingReport>,
}

pub fn summarize_map(r: &Resolved, map: &PartialReturnMap) -> Result<MapSummary, CliError> {
    let mc = &r.config.map;
    let transitions = transition_matrix(map);
    let support: Vec<(String, String)> = transitions.support().into_iter().collect();
    let unimodality = if r.is_cyclic() && map.len() >= mc.unimodality_window.max(3) {
        Some(unimodality(map, mc.unimodality_window)?)
    } else {
        None
    };
    let mut folding = Vec::new();
    for (from, to) in &support {
        let w = detect_folding(map, from, to, mc.eps_image, mc.delta_pre)?;
        folding.push(FoldingReport {
            from: from.clone(),
            to: to.clone(),
            witnesses: w.len(),
            examples: w.into_iter().take(10).collect(),
        });
    }
    let mut sources: Vec<&String> = support.iter().map(|(f, _)| f).collect();
    sources.dedup();
    let tearing = sources
        .into_iter()
        .map(|from| {
            Ok(TearingReport {
                from: from.clone(),
                tearing: detect_tearing(map, from)?,
            })
        })
        .collect::<chaomob::Result<Vec<_>>>()?;
    Ok(MapSummary {
        pairs: map.len(),
        segments: map.segments,
        truncated_segments: map.truncated_segments,
        transitions,
        support,
        unimodality,
        folding,
        tearing,
    })
}

fn map_stage(
    ctx: &mut Ctx,
    series: &RhoSeries,
    comps: &[SectionComponent],
) -> Result<PartialReturnMap, CliError> {
    let map = map_from(ctx.r, series, comps)?;
    ctx.write_with("map.csv", |w| map.write_csv(w))?;
    ctx.write_json(MAP, &map)?;
    for (from, to) in map.component_pairs() {
        ctx.write_with(&format!("map_{from}_{to}.dat"), |w| {
            map.write_gnuplot(w, &from, &to)
        })?;
    }
    let summary = summarize_map(ctx.r, &map)?;
    ctx.write_json("map_summary.json", &summary)?;
    Ok(map)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrbitReport {
    pub period: usize,
    pub word: String,
    pub cycle: Vec<f64>,
    pub residual: f64,
    pub support: usize,
    /// Distance after pushing the cycle through the empirical map.
    pub return_error: Option<f64>,
}

pub fn orbits_from(
    r: &Resolved,
    map: &PartialReturnMap,
    comps: &[SectionComponent],
) -> Result<(Vec<OrbitReport>, Option<SymbolPartition>), CliError> {
    if !r.is_cyclic() || comps.len() != 1 {
        return Err(chaomob::Error::Precondition(
            "periodic orbits need a single-component cyclic section".into(),
        )
        .into());
    }
    let mc = &r.config.map;
    let comp = &comps[0];
    let found: Vec<(usize, Vec<PeriodicOrbit>)> = mc
        .periods
        .par_iter()
        .map(|&k| Ok((k, extract_periodic_orbits(map, k, mc.orbit_tol)?)))
        .collect::<chaomob::Result<_>>()?;
    let first = |k: usize| found.iter().find(|(p, _)| *p == k).and_then(|(_, o)| o.first());
    let partition = match (&mc.breakpoints, first(1), first(2)) {
        (Some(b), _, _) => Some(partition_symbols(&comp.id, comp.slot(), b, &mc.symbols)?),
        (None, Some(p1), Some(p2)) => Some(default_lar_partition(
            &comp.id,
            comp.slot(),
            p1.rho_cycle[0],
            [p2.rho_cycle[0], p2.rho_cycle[1]],
        )?),
        _ => {
            log::warn!("no period-1 and period-2 orbits; partition not placed");
            None
        }
    };
    let mut reports = Vec::new();
    for (_, orbits) in found {
        for o in orbits {
            let word = match &partition {
                Some(p) => p.word(&o.rho_cycle)?,
                None => String::new(),
            };
            reports.push(OrbitReport {
                period: o.period,
                word,
                return_error: orbit_return_error(map, &o, mc.orbit_tol),
                cycle: o.rho_cycle,
                residual: o.residual,
                support: o.support,
            });
        }
    }
    Ok((reports, partition))
}

fn orbits_stage(ctx: &mut Ctx, map: &PartialReturnMap, comps: &[SectionComponent]) -> Result<(), CliError> {
    let (reports, partition) = orbits_from(ctx.r, map, comps)?;
    ctx.write_json("orbits.json", &reports)?;
    if let Some(p) = partition {
        ctx.write_json(PARTITION, &p)?;
    }
    Ok(())
}

fn uav_model(ctx: &mut Ctx) -> Result<CacocModel, CliError> {
    let comps: Vec<SectionComponent> = ctx.read_json(COMPONENTS, "section")?;
    let partition: SymbolPartition = ctx.read_json(PARTITION, "orbits")?;
    let component = comps
        .into_iter()
        .find(|c| c.id == partition.component)
        .ok_or_else(|| {
            CliError::Config(format!(
                "partition refers to unknown component {}",
                partition.component
            ))
        })?;
    Ok(CacocModel {
        system: ctx.r.system.clone(),
        dt: ctx.r.config.integrator.dt,
        component,
        partition,
        reference: reference_state(ctx.r)?,
        period1: None,
        period2: None,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub agents: usize,
    pub truncated: usize,
    pub time_scale: f64,
    pub grammar_violations: usize,
    /// Transition support of the partial map rebuilt from the trace events.
    pub trace_support: Vec<(String, String)>,
}

fn traces_stage(ctx: &mut Ctx) -> Result<(), CliError> {
    let r = ctx.r;
    let cfg = &r.config;
    if let Some(sc) = &cfg.scenario {
        let comps: Vec<SectionComponent> = ctx.read_json(COMPONENTS, "section")?;
        let mut model = ScenarioModel::new(&r.system, cfg.integrator.dt, comps, reference_state(r)?)?;
        model.noise_radius = sc.noise_radius;
        model.decorrelation_time = sc.decorrelation_time;
        model.step_budget = sc.step_budget;
        let run = generate_scenario_traces(sc.agents, &model, &sc.geometry, cfg.seed)?;
        let roles = roles_of(&model.components);
        let rebuilt = series_from_traces(&run.traces, &roles)?;
        let trace_map = build_partial_return_map(&rebuilt, &roles, cfg.map.segment_budget)?;
        let summary = ScenarioSummary {
            agents: run.traces.len(),
            truncated: run.truncated,
            time_scale: run.time_scale,
            grammar_violations: run
                .traces
                .iter()
                .filter(|t| !t.truncated && !t.follows_scenario_grammar())
                .count(),
            trace_support: transition_matrix(&trace_map).support().into_iter().collect(),
        };
        write_traces(ctx, &run.traces, f64::INFINITY)?;
        ctx.write_json("agent_series.json", &run.series)?;
        ctx.write_json("scenario_summary.json", &summary)?;
        return Ok(());
    }
    if let Some(u) = &cfg.uav {
        let model = uav_model(ctx)?;
        let out = (0..u.agents)
            .into_par_iter()
            .map(|a| {
                let s0 = model.seeded_state(cfg.seed, a);
                generate_uav_trace(&model, &u.kinematics, s0, f64::INFINITY, Some(u.steps), a)
            })
            .collect::<chaomob::Result<Vec<_>>>()?;
        let words: BTreeMap<usize, &str> = out.iter().map(|t| (t.trace.agent_id, t.word.as_str())).collect();
        ctx.write_json("uav_words.json", &words)?;
        let traces: Vec<AgentTrace> = out.into_iter().map(|t| t.trace).collect();
        write_traces(ctx, &traces, 1.5 * u.kinematics.step_length())?;
        return Ok(());
    }
    Err(CliError::Config(
        "`traces` needs a [scenario] or [uav] table".into(),
    ))
}

fn write_traces(ctx: &mut Ctx, traces: &[AgentTrace], max_leg: f64) -> Result<(), CliError> {
    ctx.write_with("traces.csv", |w| write_traces_csv(traces, w))?;
    ctx.write_with("traces.json", |w| write_traces_json(traces, w))?;
    ctx.write_with("traces.ns2", |w| write_ns2(traces, max_leg, w))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl Sample {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Sample {
            mean,
            std: var.sqrt(),
            values,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub tool_version: String,
    pub config: crate::config::CoverageSection,
    pub chaotic: Sample,
    pub random_walk: Sample,
    pub chaotic_at_least_random: bool,
}

/// Chaotic UAV and random-walk coverage over the same seeds and step count.
pub fn coverage_of(r: &Resolved, model: &CacocModel) -> Result<CoverageSummary, CliError> {
    let cfg = &r.config;
    let cov = cfg.coverage.clone().unwrap_or_default();
    let kin = cfg.uav.as_ref().map(|u| u.kinematics).unwrap_or_default();
    let arena = Rect {
        x0: 0.0,
        y0: 0.0,
        x1: kin.arena.width,
        y1: kin.arena.height,
    };
    let radius = cov.sensing_radius.unwrap_or(cov.cell_size);
    let pairs = (0..cov.seeds)
        .into_par_iter()
        .map(|i| {
            let s0 = model.seeded_state(cfg.seed, i);
            let uav = generate_uav_trace(model, &kin, s0, f64::INFINITY, Some(cov.steps), i)?;
            if uav.word.len() < cov.steps {
                return Err(chaomob::Error::Precondition(format!(
                    "UAV seed {i} produced {} of {} steps",
                    uav.word.len(),
                    cov.steps
                )));
            }
            let rw = random_walk_trace(&kin, cfg.seed, cov.steps as f64 * kin.step_time, i)?;
            let c = coverage_rate(
                std::slice::from_ref(&uav.trace),
                arena,
                cov.cell_size,
                radius,
                kin.arena.wrap,
            )?;
            let w = coverage_rate(
                std::slice::from_ref(&rw),
                arena,
                cov.cell_size,
                radius,
                kin.arena.wrap,
            )?;
            Ok((c, w))
        })
        .collect::<chaomob::Result<Vec<_>>>()?;
    let chaotic = Sample::new(pairs.iter().map(|p| p.0).collect());
    let random_walk = Sample::new(pairs.iter().map(|p| p.1).collect());
    Ok(CoverageSummary {
        tool_version: TOOL_VERSION.to_string(),
        config: cov,
        chaotic_at_least_random: chaotic.mean >= random_walk.mean,
        chaotic,
        random_walk,
    })
}

fn coverage_stage(ctx: &mut Ctx) -> Result<(), CliError> {
    let model = uav_model(ctx)?;
    let summary = coverage_of(ctx.r, &model)?;
    let mut csv = String::from("seed,model,coverage\n");
    for (i, (c, w)) in summary
        .chaotic
        .values
        .iter()
        .zip(&summary.random_walk.values)
        .enumerate()
    {
        csv.push_str(&format!("{i},chaotic,{c:.6}\n{i},random_walk,{w:.6}\n"));
    }
    ctx.write("coverage.csv", csv.as_bytes())?;
    ctx.write_json("coverage.json", &summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LleSummary {
    pub tool_version: String,
    pub system: String,
    pub params: BTreeMap<String, f64>,
    pub config: LleConfig,
    pub estimate: LleEstimate,
}

fn lle_stage(ctx: &mut Ctx) -> Result<(), CliError> {
    let r = ctx.r;
    let cfg = r.config.lle.unwrap_or_default();
    let estimate = lle_benettin(&r.system, r.initial_state, &cfg)?;
    let summary = LleSummary {
        tool_version: TOOL_VERSION.to_string(),
        system: r.system.name().to_string(),
        params: r.system.named_params(),
        config: cfg,
        estimate,
    };
    ctx.write_json("lle.json", &summary)
}

fn bifurcation_stage(ctx: &mut Ctx) -> Result<(), CliError> {
    let r = ctx.r;
    let b = r
        .config
        .bifurcation
        .as_ref()
        .ok_or_else(|| CliError::Config("`bifurcation` needs a [bifurcation] table".into()))?;
    let comp = match &b.component {
        Some(id) => r.components.iter().find(|c| &c.id == id),
        None => r.components.first(),
    }
    .ok_or_else(|| CliError::Config("bifurcation component not found in [section]".into()))?;
    let diagram = bifurcation_scan(&r.system, &b.param, &b.values, comp, r.initial_state, &b.run)?;
    ctx.write_with("bifurcation.csv", |w| diagram.write_csv(w))?;
    ctx.write_json("bifurcation.json", &diagram)
}

/// Re-runs the stage recorded in a manifest, reading inputs from the
/// manifest's directory and writing to `out`. Fails unless every output is
/// byte-identical to the recorded digest.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<RunManifest, CliError> {
    let recorded = RunManifest::load(manifest_path)?;
    let stage = Stage::from_name(&recorded.stage)
        .ok_or_else(|| CliError::Config(format!("unknown stage `{}` in manifest", recorded.stage)))?;
    let resolved = crate::ExperimentConfig::from_toml(&recorded.config)?.resolve()?;
    let input = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    for (name, digest) in &recorded.inputs {
        let path = input.join(name);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if &sha256_hex(&bytes) != digest {
            return Err(CliError::ReplayMismatch(format!(
                "input {name} changed since the recorded run"
            )));
        }
    }
    let fresh = run_stage(
        stage,
        &resolved,
        &Workspace {
            input,
            output: out.to_path_buf(),
        },
    )?;
    let differing: Vec<&str> = recorded
        .outputs
        .iter()
        .filter(|(name, digest)| fresh.outputs.get(*name) != Some(*digest))
        .map(|(name, _)| name.as_str())
        .chain(
            fresh
                .outputs
                .keys()
                .filter(|k| !recorded.outputs.contains_key(*k))
                .map(String::as_str),
        )
        .collect();
    if !differing.is_empty() {
        return Err(CliError::ReplayMismatch(differing.join(", ")));
    }
    Ok(fresh)
}
