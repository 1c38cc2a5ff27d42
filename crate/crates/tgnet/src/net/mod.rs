//! Road-network data model: directed links with polyline geometry over a
//! planar study frame, class-based traffic parameters, and the extraction
//! operators used to derive comparison targets from a reference network.

mod interchange;
mod synth;

pub use interchange::{
    default_class_table, lonlat_to_local_km, parse_class_table, parse_geojson_network,
    parse_network, serialize_class_table, serialize_network,
};
pub use synth::synth_grid_city;

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Geometry endpoints are snapped to node coordinates within this distance.
pub const ENDPOINT_SNAP_TOL_KM: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("frame units must be \"km\", got {0:?}")]
    BadUnits(String),
    #[error("invalid study frame: {0}")]
    BadFrame(String),
    #[error("duplicate id {id:?} ({context})")]
    DuplicateId { id: String, context: String },
    #[error("link {link:?} references missing node {node:?}")]
    DanglingNode { link: String, node: String },
    #[error("link {link:?} has degenerate geometry: {reason}")]
    BadGeometry { link: String, reason: String },
    #[error("link {link:?} {end} endpoint is {dist_km:.3e} km from node {node:?} (snap tolerance {ENDPOINT_SNAP_TOL_KM} km)")]
    EndpointMismatch {
        link: String,
        end: &'static str,
        node: String,
        dist_km: f64,
    },
    #[error("node {node:?} has non-finite coordinates")]
    NonFiniteCoordinate { node: String },
    #[error("road class {0:?} missing from parameter table")]
    ClassMissing(RoadClass),
    #[error("invalid class parameters for {class:?}: {reason}")]
    BadClassParams { class: RoadClass, reason: String },
    #[error("reference network has zero total link length")]
    ZeroLengthReference,
    #[error("line {line}: {source}")]
    Located {
        line: usize,
        #[source]
        source: Box<NetError>,
    },
}

impl NetError {
    /// The offending id carried by this error, when there is one.
    pub(crate) fn subject_id(&self) -> Option<&str> {
        match self {
            NetError::DuplicateId { id, .. } => Some(id),
            NetError::DanglingNode { link, .. }
            | NetError::BadGeometry { link, .. }
            | NetError::EndpointMismatch { link, .. } => Some(link),
            NetError::NonFiniteCoordinate { node } => Some(node),
            _ => None,
        }
    }
}

/// A planar point in local-frame kilometers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Rectangular study area: `x ∈ [x0, x0+width)`, `y ∈ [y0, y0+height)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyFrame {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
}

impl StudyFrame {
    pub fn new(x0: f64, y0: f64, width: f64, height: f64) -> Result<Self, NetError> {
        if !(width > 0.0 && height > 0.0 && x0.is_finite() && y0.is_finite()) {
            return Err(NetError::BadFrame(format!(
                "x0={x0}, y0={y0}, width={width}, height={height}"
            )));
        }
        Ok(StudyFrame {
            x0,
            y0,
            width,
            height,
        })
    }

    /// Closed containment; used by the boundary clip, which keeps geometry
    /// that ends exactly on the frame edge.
    pub fn contains_closed(&self, p: Point) -> bool {
        p.x >= self.x0
            && p.x <= self.x0 + self.width
            && p.y >= self.y0
            && p.y <= self.y0 + self.height
    }

    pub fn diameter(&self) -> f64 {
        (self.width * self.width + self.height * self.height).sqrt()
    }

    pub fn approx_eq(&self, other: &StudyFrame, tol: f64) -> bool {
        (self.x0 - other.x0).abs() <= tol
            && (self.y0 - other.y0).abs() <= tol
            && (self.width - other.width).abs() <= tol
            && (self.height - other.height).abs() <= tol
    }
}

/// Road class hierarchy, highest first. `rank` 0 is the highest class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoadClass {
    Motorway,
    Trunk,
    Primary,
    Secondary,
    Tertiary,
    Residential,
}

impl RoadClass {
    pub const ALL: [RoadClass; 6] = [
        RoadClass::Motorway,
        RoadClass::Trunk,
        RoadClass::Primary,
        RoadClass::Secondary,
        RoadClass::Tertiary,
        RoadClass::Residential,
    ];

    pub fn rank(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            RoadClass::Motorway => "motorway",
            RoadClass::Trunk => "trunk",
            RoadClass::Primary => "primary",
            RoadClass::Secondary => "secondary",
            RoadClass::Tertiary => "tertiary",
            RoadClass::Residential => "residential",
        }
    }

    pub fn parse(name: &str) -> Option<RoadClass> {
        RoadClass::ALL.iter().copied().find(|c| c.name() == name)
    }
}

impl fmt::Display for RoadClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-class speed limit and capacity used to derive link parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassParams {
    pub class: RoadClass,
    pub limit_speed_kph: f64,
    pub capacity_vph: f64,
}

impl ClassParams {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.limit_speed_kph > 0.0 && self.capacity_vph > 0.0) {
            return Err(NetError::BadClassParams {
                class: self.class,
                reason: format!(
                    "limit_speed_kph={}, capacity_vph={}",
                    self.limit_speed_kph, self.capacity_vph
                ),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub x: f64,
    pub y: f64,
}

impl Node {
    pub fn point(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

/// Ordered polyline geometry; consecutive vertices are distinct.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    vertices: Vec<Point>,
}

impl Polyline {
    pub fn new(vertices: Vec<Point>) -> Result<Self, String> {
        if vertices.len() < 2 {
            return Err(format!("{} vertices, need at least 2", vertices.len()));
        }
        for w in vertices.windows(2) {
            if w[0].distance(w[1]) <= 0.0 {
                return Err("repeated consecutive vertex".to_string());
            }
        }
        Ok(Polyline { vertices })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn arclength(&self) -> f64 {
        self.vertices
            .windows(2)
            .map(|w| w[0].distance(w[1]))
            .sum()
    }

    pub fn first(&self) -> Point {
        self.vertices[0]
    }

    pub fn last(&self) -> Point {
        *self.vertices.last().unwrap()
    }

    pub fn segments(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        self.vertices.windows(2).map(|w| (w[0], w[1]))
    }
}

/// Capacity and free-flow time, assigned from a class table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkParams {
    pub capacity_vph: f64,
    pub free_flow_time_h: f64,
}

/// A directed link. `from`/`to` are indices into the owning network's node
/// vector; `length_km` always equals the geometry arclength.
#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub id: String,
    pub from: usize,
    pub to: usize,
    pub class: RoadClass,
    pub geometry: Polyline,
    pub length_km: f64,
    pub params: Option<LinkParams>,
}

/// Input form of a link, with endpoints referenced by node id.
#[derive(Debug, Clone)]
pub struct LinkInput {
    pub id: String,
    pub from: String,
    pub to: String,
    pub class: RoadClass,
    pub geometry: Vec<Point>,
    pub params: Option<LinkParams>,
}

/// An immutable directed road network over a study frame.
///
/// Construction validates referential integrity, geometry, and endpoint
/// snapping; afterwards the network is read-only and safe to share across
/// threads.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    frame: StudyFrame,
    node_ids: Vec<String>,
    nodes: Vec<Node>,
    links: Vec<Link>,
    node_index: HashMap<String, usize>,
}

impl RoadNetwork {
    pub fn new(
        frame: StudyFrame,
        nodes: Vec<(String, Node)>,
        links: Vec<LinkInput>,
    ) -> Result<Self, NetError> {
        let mut node_index = HashMap::with_capacity(nodes.len());
        let mut node_ids = Vec::with_capacity(nodes.len());
        let mut node_vec = Vec::with_capacity(nodes.len());
        for (id, node) in nodes {
            if !(node.x.is_finite() && node.y.is_finite()) {
                return Err(NetError::NonFiniteCoordinate { node: id });
            }
            if node_index.insert(id.clone(), node_vec.len()).is_some() {
                return Err(NetError::DuplicateId {
                    id,
                    context: "nodes".to_string(),
                });
            }
            node_ids.push(id);
            node_vec.push(node);
        }

        let mut link_ids = HashMap::with_capacity(links.len());
        let mut link_vec = Vec::with_capacity(links.len());
        for (pos, input) in links.into_iter().enumerate() {
            if link_ids.insert(input.id.clone(), pos).is_some() {
                return Err(NetError::DuplicateId {
                    id: input.id,
                    context: format!("links[{pos}]"),
                });
            }
            let from = *node_index
                .get(&input.from)
                .ok_or_else(|| NetError::DanglingNode {
                    link: input.id.clone(),
                    node: input.from.clone(),
                })?;
            let to = *node_index
                .get(&input.to)
                .ok_or_else(|| NetError::DanglingNode {
                    link: input.id.clone(),
                    node: input.to.clone(),
                })?;

            let mut geometry = input.geometry;
            if geometry.len() < 2 {
                return Err(NetError::BadGeometry {
                    link: input.id,
                    reason: format!("{} vertices, need at least 2", geometry.len()),
                });
            }
            // Snap endpoints onto the referenced nodes or reject.
            for (end, node_id, idx, node) in [
                ("first", &input.from, 0usize, node_vec[from]),
                ("last", &input.to, geometry.len() - 1, node_vec[to]),
            ] {
                let d = geometry[idx].distance(node.point());
                if d > ENDPOINT_SNAP_TOL_KM {
                    return Err(NetError::EndpointMismatch {
                        link: input.id,
                        end,
                        node: node_id.clone(),
                        dist_km: d,
                    });
                }
                geometry[idx] = node.point();
            }
            let polyline = Polyline::new(geometry).map_err(|reason| NetError::BadGeometry {
                link: input.id.clone(),
                reason,
            })?;
            let length_km = polyline.arclength();
            if length_km <= 0.0 {
                return Err(NetError::BadGeometry {
                    link: input.id,
                    reason: "zero total length".to_string(),
                });
            }
            link_vec.push(Link {
                id: input.id,
                from,
                to,
                class: input.class,
                geometry: polyline,
                length_km,
                params: input.params,
            });
        }

        Ok(RoadNetwork {
            frame,
            node_ids,
            nodes: node_vec,
            links: link_vec,
            node_index,
        })
    }

    pub fn frame(&self) -> StudyFrame {
        self.frame
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_id(&self, idx: usize) -> &str {
        &self.node_ids[idx]
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.node_index.get(id).copied()
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, idx: usize) -> &Link {
        &self.links[idx]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn total_length_km(&self) -> f64 {
        self.links.iter().map(|l| l.length_km).sum()
    }

    /// True when every link carries capacity/free-flow parameters.
    pub fn has_params(&self) -> bool {
        self.links.iter().all(|l| l.params.is_some())
    }

    /// Returns a copy with capacity and free-flow time set from `table`.
    ///
    /// `free_flow_time = length / limit_speed`; errors if any present class
    /// is missing from the table.
    pub fn assign_class_params(&self, table: &[ClassParams]) -> Result<RoadNetwork, NetError> {
        for row in table {
            row.validate()?;
        }
        let lookup: HashMap<RoadClass, &ClassParams> =
            table.iter().map(|p| (p.class, p)).collect();
        let mut out = self.clone();
        for link in &mut out.links {
            let row = lookup
                .get(&link.class)
                .ok_or(NetError::ClassMissing(link.class))?;
            link.params = Some(LinkParams {
                capacity_vph: row.capacity_vph,
                free_flow_time_h: link.length_km / row.limit_speed_kph,
            });
        }
        Ok(out)
    }

    /// Subnetwork keeping links whose class rank is at most
    /// `lowest_retained`'s; nodes with no incident retained link are dropped.
    pub fn extract_by_class(&self, lowest_retained: RoadClass) -> RoadNetwork {
        let keep: Vec<bool> = self
            .links
            .iter()
            .map(|l| l.class.rank() <= lowest_retained.rank())
            .collect();
        self.subnetwork(&keep)
    }

    /// Removes `round(k · |links|)` links chosen uniformly without
    /// replacement, regardless of class. Sampling runs over links sorted by
    /// id with a ChaCha8 generator seeded from `seed`, so the same
    /// `(network, k, seed)` always removes the same set. Orphaned nodes are
    /// dropped; surviving links are untouched.
    pub fn reduce_links_random(&self, k: f64, seed: u64) -> RoadNetwork {
        let n = self.links.len();
        let remove_count = ((k.clamp(0.0, 1.0)) * n as f64).round() as usize;
        let remove_count = remove_count.min(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| self.links[a].id.cmp(&self.links[b].id));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let mut keep = vec![true; n];
        for &idx in order.iter().take(remove_count) {
            keep[idx] = false;
        }
        self.subnetwork(&keep)
    }

    /// Removes links whose geometry exits the study frame; vertices exactly
    /// on the boundary are kept. Models the boundary-induced artifacts that
    /// appear when an extraction drops links whose endpoints fall outside
    /// the area.
    pub fn clip_to_frame(&self) -> RoadNetwork {
        let keep: Vec<bool> = self
            .links
            .iter()
            .map(|l| {
                l.geometry
                    .vertices()
                    .iter()
                    .all(|&p| self.frame.contains_closed(p))
            })
            .collect();
        self.subnetwork(&keep)
    }

    fn subnetwork(&self, keep_links: &[bool]) -> RoadNetwork {
        let mut node_used = vec![false; self.nodes.len()];
        for (link, &keep) in self.links.iter().zip(keep_links) {
            if keep {
                node_used[link.from] = true;
                node_used[link.to] = true;
            }
        }
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut node_ids = Vec::new();
        let mut nodes = Vec::new();
        for (idx, &used) in node_used.iter().enumerate() {
            if used {
                remap[idx] = nodes.len();
                node_ids.push(self.node_ids[idx].clone());
                nodes.push(self.nodes[idx]);
            }
        }
        let links: Vec<Link> = self
            .links
            .iter()
            .zip(keep_links)
            .filter(|(_, &keep)| keep)
            .map(|(l, _)| Link {
                from: remap[l.from],
                to: remap[l.to],
                ..l.clone()
            })
            .collect();
        let node_index = node_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        RoadNetwork {
            frame: self.frame,
            node_ids,
            nodes,
            links,
            node_index,
        }
    }
}

/// `1 − total_length(target) / total_length(reference)`; negative when the
/// target is longer than the reference.
pub fn length_reduction_rate(
    reference: &RoadNetwork,
    target: &RoadNetwork,
) -> Result<f64, NetError> {
    let ref_len = reference.total_length_km();
    if ref_len <= 0.0 {
        return Err(NetError::ZeroLengthReference);
    }
    Ok(1.0 - target.total_length_km() / ref_len)
}
