//! Geographic interpretation of a transport plan: line representation of
//! transported mass, hotspot aggregation, and GeoJSON/SVG/JSON emitters.

use serde::{Deserialize, Serialize};

use crate::net::{Point, RoadNetwork};
use crate::raster::{locate_cell, GridSpec, TGDistribution};
use crate::uot::{ground_cost, UOTResult};

/// One transport arrow: mass moved from a location in the first network's
/// distribution to a location in the second's.
#[derive(Debug, Clone, Copy)]
pub struct OtmLine {
    pub start: Point,
    pub end: Point,
    pub mass: f64,
    pub distance: f64,
    pub cost_contribution: f64,
}

/// Converts plan entries into geographic lines, dropping entries below
/// `min_mass` or shorter than `min_distance`. Self-couplings have zero
/// distance, so any positive `min_distance` excludes them.
pub fn otm_lines(result: &UOTResult, min_mass: f64, min_distance: f64) -> Vec<OtmLine> {
    result
        .plan
        .entries
        .iter()
        .filter_map(|e| {
            let start = result.support_a.positions[e.a as usize];
            let end = result.support_b.positions[e.b as usize];
            let distance = ground_cost(start, end);
            if e.mass >= min_mass && distance >= min_distance {
                Some(OtmLine {
                    start,
                    end,
                    mass: e.mass,
                    distance,
                    cost_contribution: e.mass * distance,
                })
            } else {
                None
            }
        })
        .collect()
}

/// Default display thresholds: `1e-4 ×` total source mass and two cells of
/// distance, suppressing the entropic smear around the diagonal.
pub fn default_thresholds(result: &UOTResult) -> (f64, f64) {
    (
        1e-4 * result.support_a.total_mass(),
        2.0 * result.support_a.grid.cell_size_km,
    )
}

/// A source cell aggregating outgoing transport, ranked by total moved
/// cost (mass × mean distance).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HotspotSummary {
    pub p: u32,
    pub q: u32,
    pub outgoing_mass: f64,
    pub mean_distance_km: f64,
    pub moved_cost: f64,
    pub rank: usize,
}

/// Aggregates outgoing cost per source cell and returns the `top_k` cells,
/// ties broken by row-major cell index.
pub fn hotspots(lines: &[OtmLine], grid: &GridSpec, top_k: usize) -> Vec<HotspotSummary> {
    use std::collections::BTreeMap;
    let mut agg: BTreeMap<(u32, u32), (f64, f64)> = BTreeMap::new();
    for line in lines {
        if let Ok((p, q)) = locate_cell(line.start.x, line.start.y, grid) {
            let e = agg.entry((q, p)).or_insert((0.0, 0.0));
            e.0 += line.mass;
            e.1 += line.cost_contribution;
        }
    }
    let mut rows: Vec<((u32, u32), (f64, f64))> = agg.into_iter().collect();
    // Descending by moved cost; the BTreeMap key (q, p) is the row-major
    // tie-break and sort_by is stable.
    rows.sort_by(|a, b| b.1 .1.partial_cmp(&a.1 .1).unwrap());
    rows.truncate(top_k);
    rows.into_iter()
        .enumerate()
        .map(|(idx, ((q, p), (mass, cost)))| HotspotSummary {
            p,
            q,
            outgoing_mass: mass,
            mean_distance_km: if mass > 0.0 { cost / mass } else { 0.0 },
            moved_cost: cost,
            rank: idx + 1,
        })
        .collect()
}

/// GeoJSON FeatureCollection of LineString features with `mass`,
/// `distance`, and `cost` properties. Coordinates are frame kilometers.
pub fn write_geojson(lines: &[OtmLine]) -> String {
    #[derive(Serialize)]
    struct Geometry {
        #[serde(rename = "type")]
        kind: &'static str,
        coordinates: [[f64; 2]; 2],
    }
    #[derive(Serialize)]
    struct Properties {
        mass: f64,
        distance: f64,
        cost: f64,
    }
    #[derive(Serialize)]
    struct Feature {
        #[serde(rename = "type")]
        kind: &'static str,
        geometry: Geometry,
        properties: Properties,
    }
    #[derive(Serialize)]
    struct Collection {
        #[serde(rename = "type")]
        kind: &'static str,
        features: Vec<Feature>,
    }
    let features = lines
        .iter()
        .map(|l| Feature {
            kind: "Feature",
            geometry: Geometry {
                kind: "LineString",
                coordinates: [[l.start.x, l.start.y], [l.end.x, l.end.y]],
            },
            properties: Properties {
                mass: l.mass,
                distance: l.distance,
                cost: l.cost_contribution,
            },
        })
        .collect();
    serde_json::to_string_pretty(&Collection {
        kind: "FeatureCollection",
        features,
    })
    .expect("geojson serializes")
}

/// Parses the GeoJSON produced by [`write_geojson`] back into lines.
pub fn read_geojson(text: &str) -> Result<Vec<OtmLine>, serde_json::Error> {
    let doc: serde_json::Value = serde_json::from_str(text)?;
    let mut out = Vec::new();
    if let Some(features) = doc.get("features").and_then(|f| f.as_array()) {
        for feat in features {
            let coords = &feat["geometry"]["coordinates"];
            let props = &feat["properties"];
            let start = Point::new(
                coords[0][0].as_f64().unwrap_or(f64::NAN),
                coords[0][1].as_f64().unwrap_or(f64::NAN),
            );
            let end = Point::new(
                coords[1][0].as_f64().unwrap_or(f64::NAN),
                coords[1][1].as_f64().unwrap_or(f64::NAN),
            );
            out.push(OtmLine {
                start,
                end,
                mass: props["mass"].as_f64().unwrap_or(f64::NAN),
                distance: props["distance"].as_f64().unwrap_or(f64::NAN),
                cost_contribution: props["cost"].as_f64().unwrap_or(f64::NAN),
            });
        }
    }
    Ok(out)
}

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

/// Overlay figure: both networks in gray, the two TG heatmaps in blue/red,
/// transport lines in black with opacity proportional to mass. Pure SVG
/// text with pinned float formatting.
pub fn write_svg(
    net_a: &RoadNetwork,
    net_b: &RoadNetwork,
    lines: &[OtmLine],
    da: &TGDistribution,
    db: &TGDistribution,
) -> String {
    let frame = net_a.frame();
    let width_px = 1000.0;
    let scale = width_px / frame.width;
    let height_px = frame.height * scale;
    let tx = |x: f64| (x - frame.x0) * scale;
    let ty = |y: f64| height_px - (y - frame.y0) * scale;

    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {} {}\">\n",
        fmt(width_px),
        fmt(height_px)
    );
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n");

    for (d, color) in [(da, "#1f77b4"), (db, "#d62728")] {
        let max_mass = d.cells().map(|(_, m)| m).fold(0.0, f64::max);
        if max_mass <= 0.0 {
            continue;
        }
        let cell_px = d.grid.cell_size_km * scale;
        for ((p, q), m) in d.cells() {
            let x = p as f64 * cell_px;
            let y = height_px - (q as f64 + 1.0) * cell_px;
            out.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{color}\" fill-opacity=\"{:.6}\"/>\n",
                fmt(x),
                fmt(y),
                fmt(cell_px),
                fmt(cell_px),
                0.5 * m / max_mass
            ));
        }
    }

    for (net, color) in [(net_a, "#888888"), (net_b, "#bbbbbb")] {
        for link in net.links() {
            let points: Vec<String> = link
                .geometry
                .vertices()
                .iter()
                .map(|p| format!("{},{}", fmt(tx(p.x)), fmt(ty(p.y))))
                .collect();
            out.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"0.8\"/>\n",
                points.join(" ")
            ));
        }
    }

    let max_line_mass = lines.iter().map(|l| l.mass).fold(0.0, f64::max);
    for l in lines {
        let opacity = if max_line_mass > 0.0 {
            (l.mass / max_line_mass).max(0.05)
        } else {
            0.0
        };
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#000000\" stroke-width=\"1.5\" stroke-opacity=\"{:.6}\"/>\n",
            fmt(tx(l.start.x)),
            fmt(ty(l.start.y)),
            fmt(tx(l.end.x)),
            fmt(ty(l.end.y)),
            opacity
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Basic size statistics of one network, for the comparison report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkStats {
    pub label: String,
    pub nodes: usize,
    pub links: usize,
    pub total_length_km: f64,
}

impl NetworkStats {
    pub fn of(label: impl Into<String>, net: &RoadNetwork) -> Self {
        NetworkStats {
            label: label.into(),
            nodes: net.num_nodes(),
            links: net.num_links(),
            total_length_km: net.total_length_km(),
        }
    }
}

/// Per-network assignment diagnostics embedded in the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssignmentSummary {
    pub objective: f64,
    pub relative_gap: f64,
    pub iterations: usize,
    pub lost_demand_vph: f64,
    pub converged: bool,
}

impl AssignmentSummary {
    pub fn of(result: &crate::assign::AssignmentResult) -> Self {
        AssignmentSummary {
            objective: result.objective,
            relative_gap: result.relative_gap,
            iterations: result.iterations,
            lost_demand_vph: result.lost_demand_vph,
            converged: result.converged,
        }
    }
}

/// Transport outcome embedded in the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TgwSummary {
    pub tgw_veh_km2: f64,
    pub transport_cost: f64,
    pub kl_penalty: f64,
    pub created_mass: f64,
    pub destroyed_mass: f64,
    pub converged: bool,
    pub iterations: usize,
    pub epsilon_final: f64,
    pub lambda: f64,
}

impl TgwSummary {
    pub fn of(result: &UOTResult) -> Self {
        TgwSummary {
            tgw_veh_km2: result.tgw,
            transport_cost: result.transport_cost,
            kl_penalty: result.kl_penalty,
            created_mass: result.created_mass,
            destroyed_mass: result.destroyed_mass,
            converged: result.converged,
            iterations: result.iterations,
            epsilon_final: result.epsilon_final,
            lambda: result.lambda,
        }
    }
}

/// Free-form run identification (seed, parameter digest, labels).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunMetadata {
    pub label: String,
    pub seed: u64,
    pub cell_size_km: f64,
    pub config_digest: String,
}

/// The full comparison report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub metadata: RunMetadata,
    pub reference: NetworkStats,
    pub target: NetworkStats,
    pub length_reduction_rate: f64,
    pub tgw: TgwSummary,
    pub assignment_reference: AssignmentSummary,
    pub assignment_target: AssignmentSummary,
    pub hotspots: Vec<HotspotSummary>,
}

/// Serializes the comparison report as pretty JSON.
pub fn write_report(report: &ComparisonReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}
