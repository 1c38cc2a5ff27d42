//! The pipeline subcommands. Demand is always synthesized on the reference
//! network and reused verbatim for the target; each stage writes its
//! artifacts plus a manifest so reruns skip completed work.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use tgnet::assign::{self, AssignmentResult};
use tgnet::demand::{self, ODMatrix, ZoneGrid};
use tgnet::net::{self, ClassParams, RoadClass, RoadNetwork};
use tgnet::raster::{self, GridSpec, TGDistribution};
use tgnet::report::{
    self, AssignmentSummary, ComparisonReport, NetworkStats, RunMetadata, TgwSummary,
};
use tgnet::uot;

use crate::config::RunConfig;
use crate::manifest::{digest_bytes, record_timing, Manifest};
use crate::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Reference,
    Target,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Reference => "ref",
            Role::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Result<Role, PipelineError> {
        match s {
            "ref" => Ok(Role::Reference),
            "target" => Ok(Role::Target),
            other => Err(PipelineError::Config(format!(
                "role must be `ref` or `target`, got {other:?}"
            ))),
        }
    }
}

/// Networks and class table loaded once per invocation, parameters applied.
pub struct LoadedInputs {
    pub class_table: Vec<ClassParams>,
    pub reference: RoadNetwork,
    pub target: RoadNetwork,
}

impl LoadedInputs {
    pub fn network(&self, role: Role) -> &RoadNetwork {
        match role {
            Role::Reference => &self.reference,
            Role::Target => &self.target,
        }
    }
}

fn read_text(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

pub fn load_class_table(cfg: &RunConfig) -> Result<Vec<ClassParams>, PipelineError> {
    match &cfg.class_table {
        Some(path) => Ok(net::parse_class_table(&read_text(path)?)?),
        None => Ok(net::default_class_table()),
    }
}

fn load_network(path: &Path, table: &[ClassParams]) -> Result<RoadNetwork, PipelineError> {
    let net = net::parse_network(&read_text(path)?)?;
    Ok(net.assign_class_params(table)?)
}

pub fn load_inputs(cfg: &RunConfig) -> Result<LoadedInputs, PipelineError> {
    cfg.validate_shallow()?;
    let class_table = load_class_table(cfg)?;
    let reference = load_network(&cfg.reference_network, &class_table)?;
    let target = load_network(&cfg.target_network, &class_table)?;
    if !reference.frame().approx_eq(&target.frame(), 1e-9) {
        return Err(PipelineError::Data(format!(
            "study frames differ: {:?} vs {:?}",
            reference.frame(),
            target.frame()
        )));
    }
    Ok(LoadedInputs {
        class_table,
        reference,
        target,
    })
}

/// Zones over the shared frame with base volumes and external boosts from
/// the config.
pub fn build_zone_grid(cfg: &RunConfig, inputs: &LoadedInputs) -> Result<ZoneGrid, PipelineError> {
    let zones = demand::build_zones(inputs.reference.frame(), cfg.demand.zone_size_km)?;
    let zones = demand::with_base_volumes(
        zones,
        cfg.demand.base_generation_vph,
        cfg.demand.base_attraction_vph,
    );
    let external: Vec<(usize, usize, usize)> = cfg
        .demand
        .external_zones
        .iter()
        .map(|z| (z.row, z.col, z.major_roads))
        .collect();
    Ok(demand::boost_external_zones(
        &zones,
        &external,
        cfg.demand.boost_per_road_vph,
    )?)
}

fn od_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("od.csv")
}

fn assignment_csv_path(cfg: &RunConfig, role: Role) -> PathBuf {
    cfg.output_dir.join(format!("assignment_{}.csv", role.as_str()))
}

fn assign_summary_path(cfg: &RunConfig, role: Role) -> PathBuf {
    cfg.output_dir.join(format!("assign_{}.json", role.as_str()))
}

fn tg_csv_path(cfg: &RunConfig, role: Role) -> PathBuf {
    cfg.output_dir.join(format!("tg_{}.csv", role.as_str()))
}

/// Digest of the numerically relevant configuration, independent of file
/// locations, embedded in reports.
pub fn params_digest(cfg: &RunConfig) -> String {
    #[derive(Serialize)]
    struct View<'a> {
        demand: &'a crate::config::DemandSection,
        bpr: &'a crate::config::BprSection,
        frank_wolfe: &'a crate::config::FwSection,
        grid: &'a crate::config::GridSection,
        uot: &'a crate::config::UotSection,
        seed: u64,
    }
    let view = View {
        demand: &cfg.demand,
        bpr: &cfg.bpr,
        frank_wolfe: &cfg.frank_wolfe,
        grid: &cfg.grid,
        uot: &cfg.uot,
        seed: cfg.seed,
    };
    digest_bytes(serde_json::to_string(&view).expect("view serializes").as_bytes())
}

fn ensure_output_dir(cfg: &RunConfig) -> Result<(), PipelineError> {
    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| PipelineError::io(&cfg.output_dir, e))
}

/// Step 1: OD demand from the reference network. Writes `od.csv` and
/// `demand.json`.
pub fn stage_demand(cfg: &RunConfig, inputs: &LoadedInputs) -> Result<(), PipelineError> {
    ensure_output_dir(cfg)?;
    let out_csv = od_path(cfg);
    let out_json = cfg.output_dir.join("demand.json");
    let mut manifest = Manifest::new("demand", &cfg.demand)
        .input_file(&cfg.reference_network)?
        .output(&out_csv)
        .output(&out_json);
    if let Some(table) = &cfg.class_table {
        manifest = manifest.input_file(table)?;
    }
    if manifest.is_current(&cfg.output_dir) {
        return Ok(());
    }
    let start = Instant::now();

    let zones = build_zone_grid(cfg, inputs)?;
    let centroids = demand::select_centroid_nodes(&inputs.reference, &zones)?;
    // Zones sharing a nearest node act as one zone for trip generation.
    let zones = demand::consolidate_zones_by_centroid(&zones, &centroids);
    let costs = demand::zone_travel_costs(&inputs.reference, &centroids)?;
    let od = demand::gravity_od(&zones, &costs, &cfg.demand.gravity)?;

    write_text(&out_csv, &od.to_csv(&zones))?;
    #[derive(Serialize)]
    struct DemandSummary {
        zones: usize,
        od_pairs: usize,
        total_demand_vph: f64,
    }
    write_text(
        &out_json,
        &serde_json::to_string_pretty(&DemandSummary {
            zones: zones.len(),
            od_pairs: od.len(),
            total_demand_vph: od.total_demand(),
        })
        .expect("summary serializes"),
    )?;
    manifest.write(&cfg.output_dir)?;
    record_timing(&cfg.output_dir, "demand", start.elapsed().as_millis());
    Ok(())
}

fn read_od(cfg: &RunConfig, zones: &ZoneGrid) -> Result<ODMatrix, PipelineError> {
    let path = od_path(cfg);
    if !path.exists() {
        return Err(PipelineError::Data(format!(
            "missing OD table {}; run `tgnet demand` first",
            path.display()
        )));
    }
    Ok(ODMatrix::from_csv(&read_text(&path)?, zones)?)
}

/// Step 2: user-equilibrium assignment for one role. Persists the flows
/// and a summary even when unconverged, then reports exit-code-4
/// non-convergence.
pub fn stage_assign(cfg: &RunConfig, inputs: &LoadedInputs, role: Role) -> Result<(), PipelineError> {
    ensure_output_dir(cfg)?;
    let net_path = match role {
        Role::Reference => &cfg.reference_network,
        Role::Target => &cfg.target_network,
    };
    let out_csv = assignment_csv_path(cfg, role);
    let out_json = assign_summary_path(cfg, role);
    if !od_path(cfg).exists() {
        return Err(PipelineError::Data(format!(
            "missing OD table {}; run `tgnet demand` first",
            od_path(cfg).display()
        )));
    }
    #[derive(Serialize)]
    struct Params<'a> {
        bpr: &'a crate::config::BprSection,
        frank_wolfe: &'a crate::config::FwSection,
        demand: &'a crate::config::DemandSection,
    }
    let manifest = Manifest::new(
        &format!("assign_{}", role.as_str()),
        &Params {
            bpr: &cfg.bpr,
            frank_wolfe: &cfg.frank_wolfe,
            demand: &cfg.demand,
        },
    )
    .input_file(net_path)?
    .input_file(&od_path(cfg))?
    .output(&out_csv)
    .output(&out_json);
    if manifest.is_current(&cfg.output_dir) {
        return propagate_stored_convergence(&out_json, role);
    }
    let start = Instant::now();

    let network = inputs.network(role);
    let zones = build_zone_grid(cfg, inputs)?;
    let od = read_od(cfg, &zones)?;
    let centroids = demand::select_centroid_nodes(network, &zones)?;
    let result = assign::frank_wolfe(
        network,
        &od,
        &centroids,
        &cfg.bpr.params()?,
        &cfg.frank_wolfe.config(),
    )?;

    write_text(&out_csv, &result.to_csv(network))?;
    write_text(&out_json, &result.summary_json())?;
    manifest.write(&cfg.output_dir)?;
    record_timing(
        &cfg.output_dir,
        &format!("assign_{}", role.as_str()),
        start.elapsed().as_millis(),
    );
    if !result.converged {
        return Err(PipelineError::NonConvergence(format!(
            "{} assignment: relative gap {} after {} iterations (partial result persisted)",
            role.as_str(),
            result.relative_gap,
            result.iterations
        )));
    }
    Ok(())
}

fn propagate_stored_convergence(summary_path: &Path, role: Role) -> Result<(), PipelineError> {
    let text = read_text(summary_path)?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| PipelineError::Data(e.to_string()))?;
    if v["converged"].as_bool() == Some(false) {
        return Err(PipelineError::NonConvergence(format!(
            "{} assignment did not converge (cached result)",
            role.as_str()
        )));
    }
    Ok(())
}

/// Step 3: rasterize one role's assigned flows into its TG distribution.
pub fn stage_rasterize(
    cfg: &RunConfig,
    inputs: &LoadedInputs,
    role: Role,
) -> Result<(), PipelineError> {
    ensure_output_dir(cfg)?;
    let out_csv = tg_csv_path(cfg, role);
    let out_svg = cfg.output_dir.join(format!("tg_{}.svg", role.as_str()));
    let assignment_csv = assignment_csv_path(cfg, role);
    if !assignment_csv.exists() {
        return Err(PipelineError::Data(format!(
            "missing assignment {}; run `tgnet assign --role {}` first",
            assignment_csv.display(),
            role.as_str()
        )));
    }
    let net_path = match role {
        Role::Reference => &cfg.reference_network,
        Role::Target => &cfg.target_network,
    };
    let manifest = Manifest::new(&format!("rasterize_{}", role.as_str()), &cfg.grid)
        .input_file(net_path)?
        .input_file(&assignment_csv)?
        .output(&out_csv)
        .output(&out_svg);
    if manifest.is_current(&cfg.output_dir) {
        return Ok(());
    }
    let start = Instant::now();

    let network = inputs.network(role);
    let flows = AssignmentResult::flows_from_csv(&read_text(&assignment_csv)?, network)?;
    let grid = GridSpec::new(network.frame(), cfg.grid.cell_size_km)?;
    let tg = raster::build_tg_from_flows(network, &flows, &grid)?;
    write_text(&out_csv, &tg.to_csv())?;
    write_text(&out_svg, &tg.to_svg())?;
    manifest.write(&cfg.output_dir)?;
    record_timing(
        &cfg.output_dir,
        &format!("rasterize_{}", role.as_str()),
        start.elapsed().as_millis(),
    );
    Ok(())
}

/// Steps 4-5: the transport solve and the comparison report. Runs any
/// missing upstream stage first (demand, both assignments, both rasters).
pub fn stage_compare(cfg: &RunConfig, inputs: &LoadedInputs) -> Result<(), PipelineError> {
    stage_demand(cfg, inputs)?;
    stage_assign(cfg, inputs, Role::Reference)?;
    stage_assign(cfg, inputs, Role::Target)?;
    stage_rasterize(cfg, inputs, Role::Reference)?;
    stage_rasterize(cfg, inputs, Role::Target)?;

    let out_report = cfg.output_dir.join("report.json");
    let out_plan = cfg.output_dir.join("plan.csv");
    let out_geojson = cfg.output_dir.join("otm.geojson");
    let out_svg = cfg.output_dir.join("overlay.svg");
    let manifest = Manifest::new("compare", &cfg.uot)
        .input_file(&tg_csv_path(cfg, Role::Reference))?
        .input_file(&tg_csv_path(cfg, Role::Target))?
        .output(&out_report)
        .output(&out_plan)
        .output(&out_geojson)
        .output(&out_svg);
    if manifest.is_current(&cfg.output_dir) {
        return Ok(());
    }
    let start = Instant::now();

    let grid = GridSpec::new(inputs.reference.frame(), cfg.grid.cell_size_km)?;
    let tg_ref = TGDistribution::from_csv(&read_text(&tg_csv_path(cfg, Role::Reference))?, grid)?;
    let tg_target =
        TGDistribution::from_csv(&read_text(&tg_csv_path(cfg, Role::Target))?, grid)?;
    let uot_cfg = cfg.uot.config(cfg.grid.cell_size_km)?;
    let result = uot::tgw_distance(&tg_ref, &tg_target, &uot_cfg)?;

    let (min_mass, min_distance) = report::default_thresholds(&result);
    let lines = report::otm_lines(&result, min_mass, min_distance);
    let hotspots = report::hotspots(&lines, &grid, 20);

    let assignment_reference = read_assignment_summary(cfg, Role::Reference)?;
    let assignment_target = read_assignment_summary(cfg, Role::Target)?;
    let comparison = ComparisonReport {
        metadata: RunMetadata {
            label: "compare".to_string(),
            seed: cfg.seed,
            cell_size_km: cfg.grid.cell_size_km,
            config_digest: params_digest(cfg),
        },
        reference: NetworkStats::of(
            cfg.reference_network.display().to_string(),
            &inputs.reference,
        ),
        target: NetworkStats::of(cfg.target_network.display().to_string(), &inputs.target),
        length_reduction_rate: net::length_reduction_rate(&inputs.reference, &inputs.target)?,
        tgw: TgwSummary::of(&result),
        assignment_reference,
        assignment_target,
        hotspots,
    };

    write_text(&out_report, &report::write_report(&comparison))?;
    write_text(&out_plan, &result.plan_csv())?;
    write_text(&out_geojson, &report::write_geojson(&lines))?;
    write_text(
        &out_svg,
        &report::write_svg(&inputs.reference, &inputs.target, &lines, &tg_ref, &tg_target),
    )?;
    manifest.write(&cfg.output_dir)?;
    record_timing(&cfg.output_dir, "compare", start.elapsed().as_millis());
    if !result.converged {
        return Err(PipelineError::NonConvergence(format!(
            "transport solve: {} iterations (artifacts persisted)",
            result.iterations
        )));
    }
    Ok(())
}

fn read_assignment_summary(cfg: &RunConfig, role: Role) -> Result<AssignmentSummary, PipelineError> {
    let text = read_text(&assign_summary_path(cfg, role))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Data(e.to_string()))
}

/// Validation diagnostics for a config: file and schema checks plus a
/// structural summary of both networks.
pub fn cmd_validate(cfg: &RunConfig) -> Result<String, PipelineError> {
    let inputs = load_inputs(cfg)?;
    let zones = build_zone_grid(cfg, &inputs)?;
    GridSpec::new(inputs.reference.frame(), cfg.grid.cell_size_km)?;
    let mut out = String::new();
    for (label, network) in [("reference", &inputs.reference), ("target", &inputs.target)] {
        out.push_str(&format!(
            "{label}: {} nodes, {} links, {:.3} km total\n",
            network.num_nodes(),
            network.num_links(),
            network.total_length_km()
        ));
        for class in RoadClass::ALL {
            let n = network.links().iter().filter(|l| l.class == class).count();
            if n > 0 {
                out.push_str(&format!("  {class}: {n} links\n"));
            }
        }
    }
    let frame = inputs.reference.frame();
    out.push_str(&format!(
        "frame: {} km x {} km at ({}, {}); {} zones of {} km; grid {} x {} at {} km\n",
        frame.width,
        frame.height,
        frame.x0,
        frame.y0,
        zones.len(),
        cfg.demand.zone_size_km,
        (frame.width / cfg.grid.cell_size_km).round() as usize,
        (frame.height / cfg.grid.cell_size_km).round() as usize,
        cfg.grid.cell_size_km
    ));
    out.push_str("ok\n");
    Ok(out)
}

/// Network derivation for the case-study series.
#[derive(Debug, Clone, Copy)]
pub enum ExtractSpec {
    ByClass(RoadClass),
    Random { k: f64, seed: u64 },
}

/// Derives an extracted network from the reference and writes it as an
/// interchange document.
pub fn cmd_extract(
    cfg: &RunConfig,
    spec: ExtractSpec,
    out: &Path,
) -> Result<(), PipelineError> {
    let source = net::parse_network(&read_text(&cfg.reference_network)?)?;
    let derived = match spec {
        ExtractSpec::ByClass(class) => source.extract_by_class(class),
        ExtractSpec::Random { k, seed } => source.reduce_links_random(k, seed),
    };
    write_text(out, &net::serialize_network(&derived))
}

/// Parameters for the synthetic lattice generator.
#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub rows: usize,
    pub cols: usize,
    pub spacing_km: f64,
    pub arterial_every: usize,
}

pub fn cmd_synth(spec: &SynthSpec, out: &Path) -> Result<(), PipelineError> {
    if spec.rows < 2 || spec.cols < 2 || !(spec.spacing_km > 0.0) {
        return Err(PipelineError::Config(format!("{spec:?}")));
    }
    let city = net::synth_grid_city(spec.rows, spec.cols, spec.spacing_km, spec.arterial_every);
    write_text(out, &net::serialize_network(&city))
}
