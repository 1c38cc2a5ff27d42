//! The extraction experiment: derive a series of comparison targets from
//! the reference network (class-based and random link reduction), run the
//! full pipeline against each, and tabulate length reduction vs. transport
//! distance.

use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;

use tgnet::assign;
use tgnet::demand::{self, ODMatrix, ZoneGrid};
use tgnet::net::{self, RoadClass, RoadNetwork};
use tgnet::raster::{self, GridSpec, TGDistribution};
use tgnet::uot;

use crate::config::RunConfig;
use crate::manifest::{record_timing, Manifest};
use crate::stages::{build_zone_grid, load_inputs, LoadedInputs};
use crate::PipelineError;

/// Which comparison targets to derive from the reference network.
#[derive(Debug, Clone, Serialize)]
pub struct SeriesSpec {
    pub class_levels: Vec<RoadClass>,
    pub random_ks: Vec<f64>,
    pub random_seeds: Vec<u64>,
}

impl SeriesSpec {
    /// Road-type-based extractions from finest to coarsest retained class.
    pub fn class_series() -> Self {
        SeriesSpec {
            class_levels: vec![
                RoadClass::Tertiary,
                RoadClass::Secondary,
                RoadClass::Primary,
                RoadClass::Trunk,
            ],
            random_ks: Vec::new(),
            random_seeds: Vec::new(),
        }
    }

    /// Random link reductions over the standard k grid.
    pub fn random_series(seeds: Vec<u64>) -> Self {
        SeriesSpec {
            class_levels: Vec::new(),
            random_ks: vec![0.2, 0.4, 0.6, 0.8],
            random_seeds: seeds,
        }
    }

    pub fn both(seeds: Vec<u64>) -> Self {
        let mut s = SeriesSpec::class_series();
        s.random_ks = vec![0.2, 0.4, 0.6, 0.8];
        s.random_seeds = seeds;
        s
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentRow {
    pub case_id: String,
    pub length_reduction: f64,
    pub tgw_veh_km2: f64,
    pub assignment_converged: bool,
    pub transport_converged: bool,
    pub lost_demand_vph: f64,
}

/// Reference-side artifacts computed once and reused for every case.
pub struct ReferenceSide {
    pub zones: ZoneGrid,
    pub od: ODMatrix,
    pub grid: GridSpec,
    pub tg: TGDistribution,
    pub assignment_converged: bool,
}

pub fn prepare_reference(
    cfg: &RunConfig,
    inputs: &LoadedInputs,
) -> Result<ReferenceSide, PipelineError> {
    let zones = build_zone_grid(cfg, inputs)?;
    let centroids = demand::select_centroid_nodes(&inputs.reference, &zones)?;
    let zones = demand::consolidate_zones_by_centroid(&zones, &centroids);
    let costs = demand::zone_travel_costs(&inputs.reference, &centroids)?;
    let od = demand::gravity_od(&zones, &costs, &cfg.demand.gravity)?;
    let result = assign::frank_wolfe(
        &inputs.reference,
        &od,
        &centroids,
        &cfg.bpr.params()?,
        &cfg.frank_wolfe.config(),
    )?;
    let grid = GridSpec::new(inputs.reference.frame(), cfg.grid.cell_size_km)?;
    let tg = raster::build_tg(&inputs.reference, &result, &grid)?;
    Ok(ReferenceSide {
        zones,
        od,
        grid,
        tg,
        assignment_converged: result.converged,
    })
}

/// Runs one comparison target against the prepared reference side and
/// returns its table row.
pub fn run_case(
    cfg: &RunConfig,
    inputs: &LoadedInputs,
    reference: &ReferenceSide,
    case_id: &str,
    target: &RoadNetwork,
) -> Result<ExperimentRow, PipelineError> {
    let length_reduction = net::length_reduction_rate(&inputs.reference, target)?;
    if target.is_empty() {
        // Nothing to assign: the whole reference distribution is destroyed.
        let uot_cfg = cfg.uot.config(cfg.grid.cell_size_km)?;
        let empty = TGDistribution::empty(reference.grid);
        let result = uot::tgw_distance(&reference.tg, &empty, &uot_cfg)?;
        return Ok(ExperimentRow {
            case_id: case_id.to_string(),
            length_reduction,
            tgw_veh_km2: result.tgw,
            assignment_converged: true,
            transport_converged: result.converged,
            lost_demand_vph: reference.od.total_demand(),
        });
    }
    let target = target.assign_class_params(&inputs.class_table)?;
    let centroids = demand::select_centroid_nodes(&target, &reference.zones)?;
    let result = assign::frank_wolfe(
        &target,
        &reference.od,
        &centroids,
        &cfg.bpr.params()?,
        &cfg.frank_wolfe.config(),
    )?;
    let tg = raster::build_tg(&target, &result, &reference.grid)?;
    let uot_cfg = cfg.uot.config(cfg.grid.cell_size_km)?;
    let transport = uot::tgw_distance(&reference.tg, &tg, &uot_cfg)?;
    Ok(ExperimentRow {
        case_id: case_id.to_string(),
        length_reduction,
        tgw_veh_km2: transport.tgw,
        assignment_converged: result.converged,
        transport_converged: transport.converged,
        lost_demand_vph: result.lost_demand_vph,
    })
}

pub fn rows_to_csv(rows: &[ExperimentRow]) -> String {
    let mut out = String::from("case_id,length_reduction,tgw_veh_km2\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            row.case_id, row.length_reduction, row.tgw_veh_km2
        ));
    }
    out
}

fn csv_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("experiment.csv")
}

/// Runs the full series against the reference network, writing
/// `experiment.csv` (case id, length reduction, tgw) and a detail JSON.
/// Solver non-convergence is recorded per case rather than aborting the
/// table.
pub fn cmd_experiment(
    cfg: &RunConfig,
    series: &SeriesSpec,
) -> Result<Vec<ExperimentRow>, PipelineError> {
    let inputs = load_inputs(cfg)?;
    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| PipelineError::io(&cfg.output_dir, e))?;

    #[derive(Serialize)]
    struct Params<'a> {
        series: &'a SeriesSpec,
        demand: &'a crate::config::DemandSection,
        bpr: &'a crate::config::BprSection,
        frank_wolfe: &'a crate::config::FwSection,
        grid: &'a crate::config::GridSection,
        uot: &'a crate::config::UotSection,
        seed: u64,
    }
    let out_csv = csv_path(cfg);
    let out_json = cfg.output_dir.join("experiment_detail.json");
    let mut manifest = Manifest::new(
        "experiment",
        &Params {
            series,
            demand: &cfg.demand,
            bpr: &cfg.bpr,
            frank_wolfe: &cfg.frank_wolfe,
            grid: &cfg.grid,
            uot: &cfg.uot,
            seed: cfg.seed,
        },
    )
    .input_file(&cfg.reference_network)?
    .output(&out_csv)
    .output(&out_json);
    if let Some(table) = &cfg.class_table {
        manifest = manifest.input_file(table)?;
    }
    if manifest.is_current(&cfg.output_dir) {
        // Rebuild rows from the detail JSON rather than re-solving.
        let text = std::fs::read_to_string(&out_json)
            .map_err(|e| PipelineError::io(&out_json, e))?;
        let rows: Vec<ExperimentRow> = serde_json::from_str::<Vec<serde_json::Value>>(&text)
            .map_err(|e| PipelineError::Data(e.to_string()))?
            .into_iter()
            .map(|v| ExperimentRow {
                case_id: v["case_id"].as_str().unwrap_or_default().to_string(),
                length_reduction: v["length_reduction"].as_f64().unwrap_or(f64::NAN),
                tgw_veh_km2: v["tgw_veh_km2"].as_f64().unwrap_or(f64::NAN),
                assignment_converged: v["assignment_converged"].as_bool().unwrap_or(false),
                transport_converged: v["transport_converged"].as_bool().unwrap_or(false),
                lost_demand_vph: v["lost_demand_vph"].as_f64().unwrap_or(f64::NAN),
            })
            .collect();
        return Ok(rows);
    }

    let start = Instant::now();
    let reference = prepare_reference(cfg, &inputs)?;
    let mut rows = Vec::new();
    for &level in &series.class_levels {
        let target = inputs.reference.extract_by_class(level);
        rows.push(run_case(
            cfg,
            &inputs,
            &reference,
            &format!("class-{level}"),
            &target,
        )?);
    }
    for &k in &series.random_ks {
        for &seed_offset in &series.random_seeds {
            let seed = cfg.seed.wrapping_add(seed_offset);
            let target = inputs.reference.reduce_links_random(k, seed);
            rows.push(run_case(
                cfg,
                &inputs,
                &reference,
                &format!("rand-k{k}-s{seed_offset}"),
                &target,
            )?);
        }
    }

    std::fs::write(&out_csv, rows_to_csv(&rows)).map_err(|e| PipelineError::io(&out_csv, e))?;
    std::fs::write(
        &out_json,
        serde_json::to_string_pretty(&rows).expect("rows serialize"),
    )
    .map_err(|e| PipelineError::io(&out_json, e))?;
    manifest.write(&cfg.output_dir)?;
    record_timing(&cfg.output_dir, "experiment", start.elapsed().as_millis());
    Ok(rows)
}
