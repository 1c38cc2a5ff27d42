//! Demand synthesis: square zones over the study frame, centroid node
//! selection, free-flow inter-zone travel costs, and the gravity model with
//! external-road boosting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assign::{self, Adjacency};
use crate::net::{Point, RoadClass, RoadNetwork, StudyFrame};

#[derive(Debug, Error)]
pub enum DemandError {
    #[error("zone size {zone_size} km does not divide frame {width} x {height} km")]
    NonDividingZoneSize {
        zone_size: f64,
        width: f64,
        height: f64,
    },
    #[error("cannot select centroids on an empty node set")]
    EmptyNetwork,
    #[error("zone ({row}, {col}) does not exist")]
    UnknownZone { row: usize, col: usize },
    #[error("invalid gravity parameters: {0}")]
    InvalidGravity(String),
    #[error("zones {r} and {s} share a centroid (zero travel cost with negative gamma)")]
    CoincidentCentroids { r: usize, s: usize },
    #[error("network is missing class parameters; run assign_class_params first")]
    MissingParams,
    #[error("bad OD record: {0}")]
    BadOdRecord(String),
}

/// A demand zone. Effective generation/attraction add the external boost to
/// the base volumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Zone {
    pub row: usize,
    pub col: usize,
    pub centroid: Point,
    pub generation_vph: f64,
    pub attraction_vph: f64,
    pub external_boost_vph: f64,
}

impl Zone {
    pub fn effective_generation(&self) -> f64 {
        self.generation_vph + self.external_boost_vph
    }

    pub fn effective_attraction(&self) -> f64 {
        self.attraction_vph + self.external_boost_vph
    }
}

/// Square zones tiling the frame exactly, row-major from the frame origin.
#[derive(Debug, Clone)]
pub struct ZoneGrid {
    pub frame: StudyFrame,
    pub zone_size_km: f64,
    pub rows: usize,
    pub cols: usize,
    zones: Vec<Zone>,
}

impl ZoneGrid {
    pub fn zones(&self) -> &[Zone] {
        &self.zones
    }

    pub fn zones_mut(&mut self) -> &mut [Zone] {
        &mut self.zones
    }

    pub fn len(&self) -> usize {
        self.zones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zones.is_empty()
    }

    pub fn index_of(&self, row: usize, col: usize) -> Option<usize> {
        (row < self.rows && col < self.cols).then_some(row * self.cols + col)
    }

    pub fn zone(&self, idx: usize) -> &Zone {
        &self.zones[idx]
    }

    /// Zone containing a point, by the same half-open convention as grid
    /// cells.
    pub fn zone_of_point(&self, p: Point) -> Option<usize> {
        let col = ((p.x - self.frame.x0) / self.zone_size_km).floor();
        let row = ((p.y - self.frame.y0) / self.zone_size_km).floor();
        if col < 0.0 || row < 0.0 {
            return None;
        }
        self.index_of(row as usize, col as usize)
    }
}

fn exact_divisions(extent: f64, step: f64) -> Option<usize> {
    let n = (extent / step).round();
    if n >= 1.0 && (n * step - extent).abs() <= 1e-9 {
        Some(n as usize)
    } else {
        None
    }
}

/// Tiles the frame with `zone_size × zone_size` zones, centroids at cell
/// centers, zero base volumes.
pub fn build_zones(frame: StudyFrame, zone_size_km: f64) -> Result<ZoneGrid, DemandError> {
    let bad = || DemandError::NonDividingZoneSize {
        zone_size: zone_size_km,
        width: frame.width,
        height: frame.height,
    };
    if !(zone_size_km > 0.0) {
        return Err(bad());
    }
    let cols = exact_divisions(frame.width, zone_size_km).ok_or_else(bad)?;
    let rows = exact_divisions(frame.height, zone_size_km).ok_or_else(bad)?;
    let mut zones = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            zones.push(Zone {
                row,
                col,
                centroid: Point::new(
                    frame.x0 + (col as f64 + 0.5) * zone_size_km,
                    frame.y0 + (row as f64 + 0.5) * zone_size_km,
                ),
                generation_vph: 0.0,
                attraction_vph: 0.0,
                external_boost_vph: 0.0,
            });
        }
    }
    Ok(ZoneGrid {
        frame,
        zone_size_km,
        rows,
        cols,
        zones,
    })
}

/// Sets the same base generation/attraction on every zone.
pub fn with_base_volumes(mut zones: ZoneGrid, generation_vph: f64, attraction_vph: f64) -> ZoneGrid {
    for z in &mut zones.zones {
        z.generation_vph = generation_vph;
        z.attraction_vph = attraction_vph;
    }
    zones
}

/// For each zone, the node nearest its centroid (Euclidean); ties broken by
/// lexicographically smallest node id.
pub fn select_centroid_nodes(
    net: &RoadNetwork,
    zones: &ZoneGrid,
) -> Result<Vec<usize>, DemandError> {
    if net.num_nodes() == 0 {
        return Err(DemandError::EmptyNetwork);
    }
    Ok(zones
        .zones()
        .iter()
        .map(|zone| {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (idx, node) in net.nodes().iter().enumerate() {
                let d = node.point().distance(zone.centroid);
                if d < best_d
                    || (d == best_d && net.node_id(idx) < net.node_id(best))
                {
                    best = idx;
                    best_d = d;
                }
            }
            best
        })
        .collect())
}

/// Adds `boost_per_road · major_road_count` to the external boost of each
/// listed zone (entries are `(row, col, major_road_count)`).
pub fn boost_external_zones(
    zones: &ZoneGrid,
    external: &[(usize, usize, usize)],
    boost_per_road_vph: f64,
) -> Result<ZoneGrid, DemandError> {
    let mut out = zones.clone();
    for &(row, col, count) in external {
        let idx = out
            .index_of(row, col)
            .ok_or(DemandError::UnknownZone { row, col })?;
        out.zones[idx].external_boost_vph += boost_per_road_vph * count as f64;
    }
    Ok(out)
}

/// Counts boundary-touching links of the given classes per zone — a helper
/// for declaring external zones when no manual list is available. A link
/// counts for the zone containing its on-boundary endpoint.
pub fn detect_external_zones(
    net: &RoadNetwork,
    zones: &ZoneGrid,
    classes: &[RoadClass],
    boundary_tol_km: f64,
) -> Vec<(usize, usize, usize)> {
    let frame = net.frame();
    let on_boundary = |p: Point| {
        (p.x - frame.x0).abs() <= boundary_tol_km
            || (frame.x0 + frame.width - p.x).abs() <= boundary_tol_km
            || (p.y - frame.y0).abs() <= boundary_tol_km
            || (frame.y0 + frame.height - p.y).abs() <= boundary_tol_km
    };
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for link in net.links() {
        if !classes.contains(&link.class) {
            continue;
        }
        for p in [link.geometry.first(), link.geometry.last()] {
            if on_boundary(p) {
                if let Some(idx) = zones.zone_of_point(Point::new(
                    p.x.clamp(frame.x0, frame.x0 + frame.width * (1.0 - 1e-12)),
                    p.y.clamp(frame.y0, frame.y0 + frame.height * (1.0 - 1e-12)),
                )) {
                    let z = zones.zone(idx);
                    *counts.entry((z.row, z.col)).or_insert(0) += 1;
                }
            }
        }
    }
    counts
        .into_iter()
        .map(|((row, col), n)| (row, col, n))
        .collect()
}

/// Folds zones that share a centroid node into one effective zone: the
/// group's volumes are summed onto its lowest-index member, the rest drop
/// to zero. Distinct effective zones then always have positive inter-zone
/// travel cost, which keeps the gravity model out of its coincident
/// -centroid singularity on sparse networks.
pub fn consolidate_zones_by_centroid(zones: &ZoneGrid, centroids: &[usize]) -> ZoneGrid {
    let mut rep_of_node: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out = zones.clone();
    for (idx, &node) in centroids.iter().enumerate() {
        let rep = *rep_of_node.entry(node).or_insert(idx);
        if rep != idx {
            let z = out.zones[idx];
            out.zones[rep].generation_vph += z.generation_vph;
            out.zones[rep].attraction_vph += z.attraction_vph;
            out.zones[rep].external_boost_vph += z.external_boost_vph;
            out.zones[idx].generation_vph = 0.0;
            out.zones[idx].attraction_vph = 0.0;
            out.zones[idx].external_boost_vph = 0.0;
        }
    }
    out
}

/// Free-flow shortest travel times between zone centroids, hours. `c[r][s]`
/// is the time from `centroids[r]` to `centroids[s]`; unreachable pairs are
/// `+∞`, the diagonal is 0.
pub fn zone_travel_costs(
    net: &RoadNetwork,
    centroids: &[usize],
) -> Result<Vec<Vec<f64>>, DemandError> {
    if !net.has_params() {
        return Err(DemandError::MissingParams);
    }
    let adjacency = Adjacency::build(net);
    let t0: Vec<f64> = net
        .links()
        .iter()
        .map(|l| l.params.unwrap().free_flow_time_h)
        .collect();

    // One tree per distinct centroid node, reused across zones.
    let mut unique: Vec<usize> = centroids.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let trees: BTreeMap<usize, Vec<f64>> = unique
        .iter()
        .map(|&origin| {
            let tree = assign::shortest_path_tree_adj(&adjacency, net, &t0, origin)
                .expect("free-flow times are positive");
            (origin, tree.dist)
        })
        .collect();

    let n = centroids.len();
    let mut costs = vec![vec![0.0; n]; n];
    for r in 0..n {
        let dist = &trees[&centroids[r]];
        for s in 0..n {
            costs[r][s] = if r == s { 0.0 } else { dist[centroids[s]] };
        }
    }
    Ok(costs)
}

/// Gravity model parameters: `q_rs = k · G_r^alpha · A_s^beta · c_rs^gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GravityParams {
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl GravityParams {
    pub fn validate(&self) -> Result<(), DemandError> {
        if !(self.k > 0.0) || !self.alpha.is_finite() || !self.beta.is_finite()
            || !self.gamma.is_finite()
        {
            return Err(DemandError::InvalidGravity(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Sparse zone-to-zone demand, veh/h. Keys are zone indices into the grid
/// that produced it; the diagonal is excluded and zero entries are omitted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ODMatrix {
    entries: BTreeMap<(usize, usize), f64>,
}

impl ODMatrix {
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries.iter().map(|(&(r, s), &q)| (r, s, q))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, r: usize, s: usize) -> f64 {
        self.entries.get(&(r, s)).copied().unwrap_or(0.0)
    }

    pub fn total_demand(&self) -> f64 {
        self.entries.values().sum()
    }

    pub fn from_entries(it: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let mut entries = BTreeMap::new();
        for (r, s, q) in it {
            if r != s && q > 0.0 {
                *entries.entry((r, s)).or_insert(0.0) += q;
            }
        }
        ODMatrix { entries }
    }

    /// CSV export: `origin_row,origin_col,dest_row,dest_col,demand_vph`.
    pub fn to_csv(&self, zones: &ZoneGrid) -> String {
        let mut out = String::from("origin_row,origin_col,dest_row,dest_col,demand_vph\n");
        for (r, s, q) in self.entries() {
            let zr = zones.zone(r);
            let zs = zones.zone(s);
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                zr.row, zr.col, zs.row, zs.col, q
            ));
        }
        out
    }

    pub fn from_csv(text: &str, zones: &ZoneGrid) -> Result<Self, DemandError> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(DemandError::BadOdRecord(format!(
                    "line {}: expected 5 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let parse_idx = |f: &str| {
                f.trim()
                    .parse::<usize>()
                    .map_err(|e| DemandError::BadOdRecord(format!("line {}: {e}", lineno + 1)))
            };
            let (or, oc, dr, dc) = (
                parse_idx(fields[0])?,
                parse_idx(fields[1])?,
                parse_idx(fields[2])?,
                parse_idx(fields[3])?,
            );
            let q: f64 = fields[4]
                .trim()
                .parse()
                .map_err(|e| DemandError::BadOdRecord(format!("line {}: {e}", lineno + 1)))?;
            let r = zones
                .index_of(or, oc)
                .ok_or(DemandError::UnknownZone { row: or, col: oc })?;
            let s = zones
                .index_of(dr, dc)
                .ok_or(DemandError::UnknownZone { row: dr, col: dc })?;
            if r != s && q > 0.0 {
                entries.insert((r, s), q);
            }
        }
        Ok(ODMatrix { entries })
    }
}

/// Evaluates the gravity model over all ordered zone pairs. Unreachable
/// pairs (infinite cost) get zero demand; the diagonal is excluded; a zero
/// cost between distinct zones with negative `gamma` is an error (coincident
/// centroids).
pub fn gravity_od(
    zones: &ZoneGrid,
    costs: &[Vec<f64>],
    params: &GravityParams,
) -> Result<ODMatrix, DemandError> {
    params.validate()?;
    let n = zones.len();
    let mut entries = BTreeMap::new();
    for r in 0..n {
        let g = zones.zone(r).effective_generation();
        if g <= 0.0 {
            continue;
        }
        for s in 0..n {
            if r == s {
                continue;
            }
            let a = zones.zone(s).effective_attraction();
            if a <= 0.0 {
                continue;
            }
            let c = costs[r][s];
            if c.is_infinite() {
                continue;
            }
            if c <= 0.0 && params.gamma < 0.0 {
                return Err(DemandError::CoincidentCentroids { r, s });
            }
            let q = params.k * g.powf(params.alpha) * a.powf(params.beta) * c.powf(params.gamma);
            if q > 0.0 {
                entries.insert((r, s), q);
            }
        }
    }
    Ok(ODMatrix { entries })
}
