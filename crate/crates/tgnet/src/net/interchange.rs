//! Network interchange formats: the JSON document schema, a GeoJSON
//! LineString import, and the class-parameter table.

use serde::{Deserialize, Serialize};

use super::{
    ClassParams, LinkInput, LinkParams, NetError, Node, Point, RoadClass, RoadNetwork, StudyFrame,
};

const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Serialize, Deserialize)]
struct FrameDoc {
    x0: f64,
    y0: f64,
    width: f64,
    height: f64,
    units: String,
}

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    id: String,
    x: f64,
    y: f64,
}

#[derive(Serialize, Deserialize)]
struct LinkDoc {
    id: String,
    from: String,
    to: String,
    class: RoadClass,
    geometry: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    capacity_vph: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    free_flow_time_h: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct NetworkDoc {
    frame: FrameDoc,
    nodes: Vec<NodeDoc>,
    links: Vec<LinkDoc>,
}

/// Attaches the source line of the offending id to a validation error.
fn locate_error(text: &str, err: NetError) -> NetError {
    let Some(id) = err.subject_id() else {
        return err;
    };
    let needle = format!("\"{id}\"");
    let Some(pos) = text.find(&needle) else {
        return err;
    };
    let line = text[..pos].bytes().filter(|&b| b == b'\n').count() + 1;
    NetError::Located {
        line,
        source: Box::new(err),
    }
}

/// Parses a UTF-8 JSON interchange document into a validated network.
/// Schema errors carry the parser's line/column; validation errors carry
/// the line of the offending id.
pub fn parse_network(text: &str) -> Result<RoadNetwork, NetError> {
    let doc: NetworkDoc =
        serde_json::from_str(text).map_err(|e| NetError::Schema(e.to_string()))?;
    if doc.frame.units != "km" {
        return Err(NetError::BadUnits(doc.frame.units));
    }
    let frame = StudyFrame::new(doc.frame.x0, doc.frame.y0, doc.frame.width, doc.frame.height)?;
    let nodes = doc
        .nodes
        .into_iter()
        .map(|n| (n.id, Node { x: n.x, y: n.y }))
        .collect();
    let links = doc
        .links
        .into_iter()
        .map(|l| {
            let params = match (l.capacity_vph, l.free_flow_time_h) {
                (Some(capacity_vph), Some(free_flow_time_h)) => Some(LinkParams {
                    capacity_vph,
                    free_flow_time_h,
                }),
                _ => None,
            };
            LinkInput {
                id: l.id,
                from: l.from,
                to: l.to,
                class: l.class,
                geometry: l.geometry.iter().map(|&[x, y]| Point::new(x, y)).collect(),
                params,
            }
        })
        .collect();
    RoadNetwork::new(frame, nodes, links).map_err(|e| locate_error(text, e))
}

/// Serializes a network back to the interchange schema. Assigned per-link
/// parameters are carried as optional fields so `parse ∘ serialize` is the
/// identity for parameterized networks too.
pub fn serialize_network(net: &RoadNetwork) -> String {
    let doc = NetworkDoc {
        frame: FrameDoc {
            x0: net.frame().x0,
            y0: net.frame().y0,
            width: net.frame().width,
            height: net.frame().height,
            units: "km".to_string(),
        },
        nodes: net
            .node_ids()
            .iter()
            .zip(net.nodes())
            .map(|(id, n)| NodeDoc {
                id: id.clone(),
                x: n.x,
                y: n.y,
            })
            .collect(),
        links: net
            .links()
            .iter()
            .map(|l| LinkDoc {
                id: l.id.clone(),
                from: net.node_id(l.from).to_string(),
                to: net.node_id(l.to).to_string(),
                class: l.class,
                geometry: l.geometry.vertices().iter().map(|p| [p.x, p.y]).collect(),
                capacity_vph: l.params.map(|p| p.capacity_vph),
                free_flow_time_h: l.params.map(|p| p.free_flow_time_h),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("network document serializes")
}

/// Parses a class-parameter table: JSON list of
/// `{class, limit_speed_kph, capacity_vph}`.
pub fn parse_class_table(text: &str) -> Result<Vec<ClassParams>, NetError> {
    let table: Vec<ClassParams> =
        serde_json::from_str(text).map_err(|e| NetError::Schema(e.to_string()))?;
    for row in &table {
        row.validate()?;
    }
    Ok(table)
}

pub fn serialize_class_table(table: &[ClassParams]) -> String {
    serde_json::to_string_pretty(table).expect("class table serializes")
}

/// Default per-class limit speeds and capacities (kph, veh/h), one row per
/// class from motorway down to residential.
pub fn default_class_table() -> Vec<ClassParams> {
    let rows = [
        (RoadClass::Motorway, 100.0, 10000.0),
        (RoadClass::Trunk, 60.0, 7500.0),
        (RoadClass::Primary, 60.0, 2500.0),
        (RoadClass::Secondary, 60.0, 1500.0),
        (RoadClass::Tertiary, 40.0, 500.0),
        (RoadClass::Residential, 40.0, 250.0),
    ];
    rows.iter()
        .map(|&(class, limit_speed_kph, capacity_vph)| ClassParams {
            class,
            limit_speed_kph,
            capacity_vph,
        })
        .collect()
}

/// Equirectangular projection of lon/lat (degrees) to local planar km about
/// a reference point. Adequate for study areas a few tens of km across.
pub fn lonlat_to_local_km(lon: f64, lat: f64, origin_lon: f64, origin_lat: f64) -> (f64, f64) {
    let x = EARTH_RADIUS_KM * (lon - origin_lon).to_radians() * origin_lat.to_radians().cos();
    let y = EARTH_RADIUS_KM * (lat - origin_lat).to_radians();
    (x, y)
}

/// Imports a GeoJSON FeatureCollection of LineString features carrying
/// `id`, `from`, `to`, `class` properties. Coordinates are lon/lat per RFC
/// 7946 and are projected equirectangularly about the collection's bounding
/// box center; the frame is the projected bounding box padded and rounded
/// up to whole kilometers.
pub fn parse_geojson_network(text: &str) -> Result<RoadNetwork, NetError> {
    let doc: serde_json::Value =
        serde_json::from_str(text).map_err(|e| NetError::Schema(e.to_string()))?;
    let features = doc
        .get("features")
        .and_then(|f| f.as_array())
        .ok_or_else(|| NetError::Schema("missing features array".to_string()))?;

    struct RawFeature {
        id: String,
        from: String,
        to: String,
        class: RoadClass,
        coords: Vec<(f64, f64)>,
    }

    let mut raw = Vec::with_capacity(features.len());
    let (mut lon_min, mut lon_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut lat_min, mut lat_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, feat) in features.iter().enumerate() {
        let ctx = || format!("features[{i}]");
        let geometry = feat
            .get("geometry")
            .ok_or_else(|| NetError::Schema(format!("{}: missing geometry", ctx())))?;
        let gtype = geometry.get("type").and_then(|t| t.as_str()).unwrap_or("");
        if gtype != "LineString" {
            return Err(NetError::Schema(format!(
                "{}: geometry type {gtype:?}, expected LineString",
                ctx()
            )));
        }
        let props = feat
            .get("properties")
            .ok_or_else(|| NetError::Schema(format!("{}: missing properties", ctx())))?;
        let get_str = |key: &str| -> Result<String, NetError> {
            props
                .get(key)
                .and_then(|v| v.as_str())
                .map(|s| s.to_string())
                .ok_or_else(|| NetError::Schema(format!("{}: missing property {key:?}", ctx())))
        };
        let class_name = get_str("class")?;
        let class = RoadClass::parse(&class_name)
            .ok_or_else(|| NetError::Schema(format!("{}: unknown class {class_name:?}", ctx())))?;
        let coords_val = geometry
            .get("coordinates")
            .and_then(|c| c.as_array())
            .ok_or_else(|| NetError::Schema(format!("{}: missing coordinates", ctx())))?;
        let mut coords = Vec::with_capacity(coords_val.len());
        for c in coords_val {
            let pair = c
                .as_array()
                .filter(|a| a.len() >= 2)
                .and_then(|a| Some((a[0].as_f64()?, a[1].as_f64()?)))
                .ok_or_else(|| NetError::Schema(format!("{}: bad coordinate", ctx())))?;
            lon_min = lon_min.min(pair.0);
            lon_max = lon_max.max(pair.0);
            lat_min = lat_min.min(pair.1);
            lat_max = lat_max.max(pair.1);
            coords.push(pair);
        }
        raw.push(RawFeature {
            id: get_str("id")?,
            from: get_str("from")?,
            to: get_str("to")?,
            class,
            coords,
        });
    }
    if raw.is_empty() {
        return Err(NetError::Schema("empty FeatureCollection".to_string()));
    }

    let origin_lon = 0.5 * (lon_min + lon_max);
    let origin_lat = 0.5 * (lat_min + lat_max);
    let project = |lon: f64, lat: f64| -> Point {
        let (x, y) = lonlat_to_local_km(lon, lat, origin_lon, origin_lat);
        Point::new(x, y)
    };

    let (x_min, y_min) = {
        let p = project(lon_min, lat_min);
        (p.x, p.y)
    };
    let (x_max, y_max) = {
        let p = project(lon_max, lat_max);
        (p.x, p.y)
    };
    // Whole-km frame with at least half a km of margin so boundary geometry
    // stays strictly inside and common cell/zone sizes divide the extents.
    let width = ((x_max - x_min) + 1.0).ceil().max(1.0);
    let height = ((y_max - y_min) + 1.0).ceil().max(1.0);
    let x0 = x_min - 0.5 * (width - (x_max - x_min));
    let y0 = y_min - 0.5 * (height - (y_max - y_min));
    let frame = StudyFrame::new(x0, y0, width, height)?;

    // Node coordinates come from the first/last vertex of the first feature
    // mentioning each node id.
    let mut nodes: Vec<(String, Node)> = Vec::new();
    let mut have: std::collections::HashSet<String> = std::collections::HashSet::new();
    let mut links = Vec::with_capacity(raw.len());
    for f in &raw {
        let geometry: Vec<Point> = f.coords.iter().map(|&(lo, la)| project(lo, la)).collect();
        if geometry.len() < 2 {
            return Err(NetError::BadGeometry {
                link: f.id.clone(),
                reason: "LineString with fewer than 2 coordinates".to_string(),
            });
        }
        for (node_id, point) in [(&f.from, geometry[0]), (&f.to, *geometry.last().unwrap())] {
            if have.insert(node_id.clone()) {
                nodes.push((
                    node_id.clone(),
                    Node {
                        x: point.x,
                        y: point.y,
                    },
                ));
            }
        }
        links.push(LinkInput {
            id: f.id.clone(),
            from: f.from.clone(),
            to: f.to.clone(),
            class: f.class,
            geometry,
            params: None,
        });
    }
    RoadNetwork::new(frame, nodes, links)
}
