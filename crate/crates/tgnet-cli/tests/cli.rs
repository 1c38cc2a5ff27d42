//! End-to-end checks of the `tgnet` binary: exit codes, subcommand
//! behavior, and the experiment table.

use std::path::{Path, PathBuf};
use std::process::Command;

use tgnet::net::{self, RoadClass};
use tgnet_cli::config::{DemandSection, FwSection, GridSection, RunConfig, UotSection};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tgnet"))
}

fn write_city(dir: &Path) -> PathBuf {
    let city = net::synth_grid_city(6, 6, 1.0, 2);
    let path = dir.join("city.json");
    std::fs::write(&path, net::serialize_network(&city)).unwrap();
    path
}

fn small_config(dir: &Path, reference: PathBuf, target: PathBuf) -> RunConfig {
    let mut cfg = RunConfig {
        reference_network: reference,
        target_network: target,
        class_table: None,
        demand: DemandSection::default(),
        bpr: Default::default(),
        frank_wolfe: FwSection {
            max_iterations: 150,
            gap_tolerance: 3e-3,
            line_search_tolerance: 1e-6,
        },
        grid: GridSection { cell_size_km: 0.14 },
        uot: UotSection {
            lambda: 0.5,
            epsilon_anneal_cells: vec![0.5, 0.2, 0.05],
            max_iterations: 3000,
            convergence_tol: 1e-4,
            cost_cache_budget: 16_000_000,
        },
        output_dir: dir.join("out"),
        seed: 0,
    };
    cfg.demand.zone_size_km = 0.5;
    cfg.demand.base_generation_vph = 400.0;
    cfg.demand.base_attraction_vph = 400.0;
    cfg.demand.gravity.k = 0.002;
    cfg
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

#[test]
fn compare_identical_networks_reports_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    let city = write_city(dir.path());
    let cfg = small_config(dir.path(), city.clone(), city);
    let cfg_path = write_config(dir.path(), "cfg.json", &cfg);

    let status = bin().args(["compare", "--config"]).arg(&cfg_path).status().unwrap();
    assert!(status.success());

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cfg.output_dir.join("report.json")).unwrap())
            .unwrap();
    let tgw = report["tgw"]["tgw_veh_km2"].as_f64().unwrap();
    let total_scale = report["reference"]["total_length_km"].as_f64().unwrap();
    assert!(tgw.abs() < 1e-6 * total_scale.max(1.0), "tgw = {tgw}");
    assert_eq!(report["length_reduction_rate"].as_f64().unwrap(), 0.0);
    // Hotspots of an identity comparison are empty.
    assert_eq!(report["hotspots"].as_array().unwrap().len(), 0);
}

#[test]
fn unconverged_assignment_exits_4_with_partial_results() {
    let dir = tempfile::tempdir().unwrap();
    let city = write_city(dir.path());
    let mut cfg = small_config(dir.path(), city.clone(), city);
    // Heavy demand on one iteration cannot reach the gap tolerance.
    cfg.demand.gravity.k = 0.05;
    cfg.frank_wolfe.max_iterations = 1;
    cfg.frank_wolfe.gap_tolerance = 1e-4;
    let cfg_path = write_config(dir.path(), "cfg.json", &cfg);

    let status = bin()
        .args(["demand", "--config"])
        .arg(&cfg_path)
        .status()
        .unwrap();
    assert!(status.success());
    let status = bin()
        .args(["assign", "--config"])
        .arg(&cfg_path)
        .args(["--role", "ref"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(4));
    // Partial result persisted.
    assert!(cfg.output_dir.join("assignment_ref.csv").exists());
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(cfg.output_dir.join("assign_ref.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["converged"].as_bool(), Some(false));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, "{\"reference_network\": \"missing.json\"}").unwrap();
    let status = bin().args(["validate", "--config"]).arg(&cfg_path).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn missing_upstream_artifacts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let city = write_city(dir.path());
    let cfg = small_config(dir.path(), city.clone(), city);
    let cfg_path = write_config(dir.path(), "cfg.json", &cfg);
    // Assign without demand.
    let status = bin()
        .args(["assign", "--config"])
        .arg(&cfg_path)
        .args(["--role", "ref"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn synth_extract_validate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let city_path = dir.path().join("city.json");
    let status = bin()
        .args(["synth", "--rows", "5", "--cols", "5", "--spacing-km", "1.0"])
        .args(["--arterial-every", "2", "--out"])
        .arg(&city_path)
        .status()
        .unwrap();
    assert!(status.success());

    let mut cfg = small_config(dir.path(), city_path.clone(), city_path.clone());
    // The 5x5 city spans a 6 km frame; pick a dividing cell size.
    cfg.grid.cell_size_km = 0.2;
    let cfg_path = write_config(dir.path(), "cfg.json", &cfg);
    let out = bin().args(["validate", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("25 nodes"), "diagnostics: {text}");

    let trunk_path = dir.path().join("trunk.json");
    let status = bin()
        .args(["extract", "--config"])
        .arg(&cfg_path)
        .args(["--class", "trunk", "--out"])
        .arg(&trunk_path)
        .status()
        .unwrap();
    assert!(status.success());
    let trunk = net::parse_network(&std::fs::read_to_string(&trunk_path).unwrap()).unwrap();
    assert!(trunk.links().iter().all(|l| l.class == RoadClass::Trunk));

    // Random reduction is reproducible for a fixed seed.
    let ra = dir.path().join("ra.json");
    let rb = dir.path().join("rb.json");
    for out in [&ra, &rb] {
        let status = bin()
            .args(["extract", "--config"])
            .arg(&cfg_path)
            .args(["--k", "0.4", "--seed", "9", "--out"])
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(std::fs::read(&ra).unwrap(), std::fs::read(&rb).unwrap());
}

/// Builds a 6x6 city whose minor streets cycle through primary, secondary,
/// tertiary, and residential, so class extraction levels differ.
fn write_multiclass_city(dir: &Path) -> PathBuf {
    let city = net::synth_grid_city(6, 6, 1.0, 2);
    let mut doc: serde_json::Value =
        serde_json::from_str(&net::serialize_network(&city)).unwrap();
    let classes = ["primary", "secondary", "tertiary", "residential"];
    let mut i = 0;
    for link in doc["links"].as_array_mut().unwrap() {
        if link["class"] == "residential" {
            link["class"] = serde_json::Value::String(classes[i % classes.len()].to_string());
            i += 1;
        }
    }
    let path = dir.join("multiclass.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    path
}

#[test]
fn experiment_class_series_is_monotone_in_reduction() {
    let dir = tempfile::tempdir().unwrap();
    let city = write_multiclass_city(dir.path());
    let cfg = small_config(dir.path(), city.clone(), city);
    let cfg_path = write_config(dir.path(), "cfg.json", &cfg);

    let status = bin()
        .args(["experiment", "--config"])
        .arg(&cfg_path)
        .args(["--series", "class"])
        .status()
        .unwrap();
    assert!(status.success());

    let csv = std::fs::read_to_string(cfg.output_dir.join("experiment.csv")).unwrap();
    let rows: Vec<(f64, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 4, "class series has four rows");
    for w in rows.windows(2) {
        let ((r0, t0), (r1, t1)) = (w[0], w[1]);
        assert!(r1 >= r0 - 1e-12, "reduction must not decrease");
        // tgw nondecreasing with reduction, within solver tolerance.
        assert!(
            t1 >= t0 * (1.0 - 0.05),
            "tgw fell from {t0} to {t1} as reduction grew"
        );
    }
}

#[test]
fn compare_transport_is_symmetric_on_swapped_distributions() {
    // Demand is always synthesized on the reference network, so swapping
    // the roles changes the demand basis too. The symmetry that must hold
    // is in the transport solve: swapping the two rasterized
    // distributions from one run yields the same distance within solver
    // tolerance.
    let dir = tempfile::tempdir().unwrap();
    let city = write_city(dir.path());
    let trunk = net::parse_network(&std::fs::read_to_string(&city).unwrap())
        .unwrap()
        .extract_by_class(RoadClass::Trunk);
    let trunk_path = dir.path().join("trunk.json");
    std::fs::write(&trunk_path, net::serialize_network(&trunk)).unwrap();

    let cfg = small_config(dir.path(), city, trunk_path);
    let cfg_path = write_config(dir.path(), "cfg.json", &cfg);
    let status = bin().args(["compare", "--config"]).arg(&cfg_path).status().unwrap();
    assert!(status.success());

    let frame = tgnet::net::StudyFrame::new(0.0, 0.0, 7.0, 7.0).unwrap();
    let grid = tgnet::raster::GridSpec::new(frame, cfg.grid.cell_size_km).unwrap();
    let read_tg = |name: &str| {
        tgnet::raster::TGDistribution::from_csv(
            &std::fs::read_to_string(cfg.output_dir.join(name)).unwrap(),
            grid,
        )
        .unwrap()
    };
    let da = read_tg("tg_ref.csv");
    let db = read_tg("tg_target.csv");
    let uot_cfg = cfg.uot.config(cfg.grid.cell_size_km).unwrap();
    let fwd = tgnet::uot::tgw_distance(&da, &db, &uot_cfg).unwrap();
    let rev = tgnet::uot::tgw_distance(&db, &da, &uot_cfg).unwrap();
    assert!(
        (fwd.tgw - rev.tgw).abs() <= 1e-3 * fwd.tgw.max(1e-9),
        "tgw {} vs swapped {}",
        fwd.tgw,
        rev.tgw
    );
}

#[test]
fn parse_errors_carry_line_context() {
    let dir = tempfile::tempdir().unwrap();
    let bad = r#"{
  "frame": {"x0": 0, "y0": 0, "width": 2, "height": 2, "units": "km"},
  "nodes": [{"id": "a", "x": 0.0, "y": 0.0}],
  "links": [{"id": "az", "from": "a", "to": "Z", "class": "trunk",
             "geometry": [[0.0, 0.0], [1.0, 0.0]]}]
}"#;
    let bad_path = dir.path().join("bad.json");
    std::fs::write(&bad_path, bad).unwrap();
    let cfg = small_config(dir.path(), bad_path.clone(), bad_path);
    let cfg_path = write_config(dir.path(), "cfg.json", &cfg);
    let out = bin().args(["validate", "--config"]).arg(&cfg_path).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 4"), "stderr: {stderr}");
    assert!(stderr.contains("\"Z\""), "stderr: {stderr}");
}

#[test]
fn compare_is_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let city = write_city(dir.path());
    let cfg = small_config(dir.path(), city.clone(), city);
    let cfg_path = write_config(dir.path(), "cfg.json", &cfg);
    for _ in 0..2 {
        let status = bin().args(["compare", "--config"]).arg(&cfg_path).status().unwrap();
        assert!(status.success());
    }
    // Second run skipped all stages: each stage logged exactly one timing.
    let timings = std::fs::read_to_string(cfg.output_dir.join("timings.txt")).unwrap();
    let compare_lines = timings.lines().filter(|l| l.starts_with("compare,")).count();
    assert_eq!(compare_lines, 1, "timings:\n{timings}");
}
