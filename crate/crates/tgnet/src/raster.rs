//! Grid discretization of assigned flows: square cells over the study
//! frame, supercover traversal of link segments, and the sparse
//! traffic-weighted mass field each network is reduced to.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use thiserror::Error;

use crate::assign::AssignmentResult;
use crate::net::{Link, Point, RoadNetwork, StudyFrame};

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("cell size {cell_size} km does not divide frame {width} x {height} km")]
    NonDividingCellSize {
        cell_size: f64,
        width: f64,
        height: f64,
    },
    #[error("point ({x}, {y}) lies outside the frame")]
    OutsideFrame { x: f64, y: f64 },
    #[error("link {link:?} geometry leaves the frame at ({x}, {y})")]
    GeometryOutsideFrame { link: String, x: f64, y: f64 },
    #[error("missing flow entry: {got} flows for {want} links")]
    MissingFlow { got: usize, want: usize },
    #[error("cell ({p}, {q}) outside grid {cols} x {rows}")]
    CellOutOfRange { p: u32, q: u32, cols: usize, rows: usize },
    #[error("nonpositive mass {mass} at cell ({p}, {q})")]
    NonPositiveMass { p: u32, q: u32, mass: f64 },
}

/// Square-cell discretization of a frame: `cols = width / cell_size`,
/// `rows = height / cell_size`, both exact within 1e-9.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub frame: StudyFrame,
    pub cell_size_km: f64,
    pub cols: usize,
    pub rows: usize,
}

impl GridSpec {
    pub fn new(frame: StudyFrame, cell_size_km: f64) -> Result<Self, RasterError> {
        let bad = || RasterError::NonDividingCellSize {
            cell_size: cell_size_km,
            width: frame.width,
            height: frame.height,
        };
        if !(cell_size_km > 0.0) {
            return Err(bad());
        }
        let check = |extent: f64| -> Result<usize, RasterError> {
            let n = (extent / cell_size_km).round();
            if n >= 1.0 && (n * cell_size_km - extent).abs() <= 1e-9 {
                Ok(n as usize)
            } else {
                Err(bad())
            }
        };
        Ok(GridSpec {
            frame,
            cell_size_km,
            cols: check(frame.width)?,
            rows: check(frame.height)?,
        })
    }

    /// Center of cell `(p, q)` in frame kilometers.
    pub fn cell_center(&self, p: u32, q: u32) -> Point {
        Point::new(
            self.frame.x0 + (p as f64 + 0.5) * self.cell_size_km,
            self.frame.y0 + (q as f64 + 0.5) * self.cell_size_km,
        )
    }
}

/// Cell containing `(x, y)` under the half-open convention
/// `p = floor((x - x0)/C)`: points on an interior boundary belong to the
/// higher-index cell; points at or past the far frame edge are outside.
pub fn locate_cell(x: f64, y: f64, grid: &GridSpec) -> Result<(u32, u32), RasterError> {
    let f = grid.frame;
    if !(x >= f.x0 && x < f.x0 + f.width && y >= f.y0 && y < f.y0 + f.height) {
        return Err(RasterError::OutsideFrame { x, y });
    }
    Ok(locate_unchecked(x, y, grid))
}

fn locate_unchecked(x: f64, y: f64, grid: &GridSpec) -> (u32, u32) {
    let p = ((x - grid.frame.x0) / grid.cell_size_km).floor() as i64;
    let q = ((y - grid.frame.y0) / grid.cell_size_km).floor() as i64;
    // Guard against round-up at the far edge.
    let p = p.clamp(0, grid.cols as i64 - 1) as u32;
    let q = q.clamp(0, grid.rows as i64 - 1) as u32;
    (p, q)
}

/// Lenient variant used for geometry: accepts points exactly on the far
/// frame edge (closed frame), mapping them into the last cell. Clipped
/// networks legitimately keep links that end on the boundary.
fn locate_closed(x: f64, y: f64, grid: &GridSpec) -> Result<(u32, u32), RasterError> {
    let f = grid.frame;
    if !(x >= f.x0 && x <= f.x0 + f.width && y >= f.y0 && y <= f.y0 + f.height) {
        return Err(RasterError::OutsideFrame { x, y });
    }
    Ok(locate_unchecked(x, y, grid))
}

/// Every cell whose closed square the segment `a`–`b` intersects, in
/// traversal order from `a` to `b`, without duplicates. A crossing exactly
/// through a lattice corner emits both side cells (x-neighbor first) before
/// the diagonal one.
pub fn supercover_cells(
    a: Point,
    b: Point,
    grid: &GridSpec,
) -> Result<Vec<(u32, u32)>, RasterError> {
    let (sp, sq) = locate_closed(a.x, a.y, grid)?;
    let (ep, eq) = locate_closed(b.x, b.y, grid)?;
    let c = grid.cell_size_km;
    let u0 = (a.x - grid.frame.x0) / c;
    let v0 = (a.y - grid.frame.y0) / c;
    let u1 = (b.x - grid.frame.x0) / c;
    let v1 = (b.y - grid.frame.y0) / c;

    let (mut cx, mut cy) = (sp as i64, sq as i64);
    let (ex, ey) = (ep as i64, eq as i64);
    let dx = u1 - u0;
    let dy = v1 - v0;
    let step_x: i64 = if dx > 0.0 { 1 } else { -1 };
    let step_y: i64 = if dy > 0.0 { 1 } else { -1 };

    let in_range =
        |x: i64, y: i64| x >= 0 && (x as usize) < grid.cols && y >= 0 && (y as usize) < grid.rows;
    let mut cells = vec![(cx as u32, cy as u32)];

    let guard = 2 * ((ex - cx).abs() + (ey - cy).abs()) + 8;
    let mut steps = 0;
    while (cx, cy) != (ex, ey) {
        steps += 1;
        assert!(steps <= guard, "supercover traversal failed to terminate");
        // Pick the next boundary crossing: vertical, horizontal, or both
        // (an exact corner). Comparison of the crossing parameters
        // t_x = (bx-u0)/dx and t_y = (by-v0)/dy without the division.
        let (step_to_x, corner) = if dx == 0.0 {
            (false, false)
        } else if dy == 0.0 {
            (true, false)
        } else {
            let bx = (if step_x > 0 { cx + 1 } else { cx }) as f64;
            let by = (if step_y > 0 { cy + 1 } else { cy }) as f64;
            let lhs = (bx - u0) * dy;
            let rhs = (by - v0) * dx;
            if lhs == rhs {
                (false, true)
            } else {
                ((lhs < rhs) == (dx * dy > 0.0), false)
            }
        };
        if corner {
            // Exact corner crossing: both side cells, then the diagonal.
            // Skip cells that fall outside the grid (possible only when the
            // segment ends exactly on the far frame edge).
            if in_range(cx + step_x, cy) {
                cells.push(((cx + step_x) as u32, cy as u32));
            }
            if in_range(cx, cy + step_y) {
                cells.push((cx as u32, (cy + step_y) as u32));
            }
            if !in_range(cx + step_x, cy + step_y) {
                break;
            }
            cx += step_x;
            cy += step_y;
        } else if step_to_x {
            if !in_range(cx + step_x, cy) {
                break;
            }
            cx += step_x;
        } else {
            if !in_range(cx, cy + step_y) {
                break;
            }
            cy += step_y;
        }
        cells.push((cx as u32, cy as u32));
    }
    Ok(cells)
}

/// Rasterizes one link: the union of supercover cells over all geometry
/// segments, each receiving mass `flow · cell_size` (veh·km). Zero flow
/// contributes nothing.
pub fn rasterize_link(
    link: &Link,
    flow_vph: f64,
    grid: &GridSpec,
) -> Result<Vec<((u32, u32), f64)>, RasterError> {
    for &v in link.geometry.vertices() {
        if locate_closed(v.x, v.y, grid).is_err() {
            return Err(RasterError::GeometryOutsideFrame {
                link: link.id.clone(),
                x: v.x,
                y: v.y,
            });
        }
    }
    if flow_vph == 0.0 {
        return Ok(Vec::new());
    }
    let mut cells = BTreeSet::new();
    for (a, b) in link.geometry.segments() {
        cells.extend(supercover_cells(a, b, grid)?);
    }
    let mass = flow_vph * grid.cell_size_km;
    Ok(cells.into_iter().map(|cell| (cell, mass)).collect())
}

/// Sparse nonnegative mass field on a grid: the discrete traffic-weighted
/// geographic distribution of one network under one assignment.
#[derive(Debug, Clone)]
pub struct TGDistribution {
    pub grid: GridSpec,
    mass: BTreeMap<(u32, u32), f64>,
    provenance: Option<BTreeMap<(u32, u32), Vec<String>>>,
}

impl TGDistribution {
    pub fn empty(grid: GridSpec) -> Self {
        TGDistribution {
            grid,
            mass: BTreeMap::new(),
            provenance: None,
        }
    }

    /// Builds a distribution from explicit cells; validates bounds and
    /// positivity. Duplicate cells accumulate.
    pub fn from_cells(
        grid: GridSpec,
        cells: impl IntoIterator<Item = ((u32, u32), f64)>,
    ) -> Result<Self, RasterError> {
        let mut mass = BTreeMap::new();
        for ((p, q), m) in cells {
            if p as usize >= grid.cols || q as usize >= grid.rows {
                return Err(RasterError::CellOutOfRange {
                    p,
                    q,
                    cols: grid.cols,
                    rows: grid.rows,
                });
            }
            if !(m > 0.0) {
                return Err(RasterError::NonPositiveMass { p, q, mass: m });
            }
            *mass.entry((p, q)).or_insert(0.0) += m;
        }
        Ok(TGDistribution {
            grid,
            mass,
            provenance: None,
        })
    }

    /// Nonzero cells in (p, q) key order.
    pub fn cells(&self) -> impl Iterator<Item = ((u32, u32), f64)> + '_ {
        self.mass.iter().map(|(&c, &m)| (c, m))
    }

    pub fn get(&self, p: u32, q: u32) -> f64 {
        self.mass.get(&(p, q)).copied().unwrap_or(0.0)
    }

    pub fn num_cells(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.values().sum()
    }

    pub fn provenance(&self) -> Option<&BTreeMap<(u32, u32), Vec<String>>> {
        self.provenance.as_ref()
    }

    /// CSV export `p,q,mass_veh_km` in row-major (q, then p) order.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<((u32, u32), f64)> = self.cells().collect();
        rows.sort_by_key(|&((p, q), _)| (q, p));
        let mut out = String::from("p,q,mass_veh_km\n");
        for ((p, q), m) in rows {
            out.push_str(&format!("{p},{q},{m}\n"));
        }
        out
    }

    pub fn from_csv(text: &str, grid: GridSpec) -> Result<Self, RasterError> {
        let mut cells = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let parse_err = |_| RasterError::NonPositiveMass {
                p: 0,
                q: 0,
                mass: f64::NAN,
            };
            if fields.len() != 3 {
                return Err(parse_err(()));
            }
            let p: u32 = fields[0].trim().parse().map_err(|_| parse_err(()))?;
            let q: u32 = fields[1].trim().parse().map_err(|_| parse_err(()))?;
            let m: f64 = fields[2].trim().parse().map_err(|_| parse_err(()))?;
            cells.push(((p, q), m));
        }
        Self::from_cells(grid, cells)
    }

    /// Grayscale heatmap: one rect per nonzero cell, opacity proportional
    /// to mass over the maximum cell mass. Coordinates use a fixed 4-decimal
    /// format so output is byte-stable.
    pub fn to_svg(&self) -> String {
        let width_px = 1000.0;
        let scale = width_px / self.grid.frame.width;
        let height_px = self.grid.frame.height * scale;
        let max_mass = self.mass.values().cloned().fold(0.0, f64::max);
        let cell_px = self.grid.cell_size_km * scale;
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width_px:.4} {height_px:.4}\">\n"
        );
        for (&(p, q), &m) in &self.mass {
            let x = p as f64 * cell_px;
            // SVG y grows downward; flip so north is up.
            let y = height_px - (q as f64 + 1.0) * cell_px;
            let opacity = if max_mass > 0.0 { m / max_mass } else { 0.0 };
            out.push_str(&format!(
                "<rect x=\"{x:.4}\" y=\"{y:.4}\" width=\"{cell_px:.4}\" height=\"{cell_px:.4}\" fill=\"#000000\" fill-opacity=\"{opacity:.6}\"/>\n"
            ));
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Rasterizes a whole network under the given per-link flows.
pub fn build_tg_from_flows(
    net: &RoadNetwork,
    flows: &[f64],
    grid: &GridSpec,
) -> Result<TGDistribution, RasterError> {
    build_tg_impl(net, flows, grid, false)
}

/// As [`build_tg_from_flows`], recording which links contributed to each
/// cell.
pub fn build_tg_traced(
    net: &RoadNetwork,
    flows: &[f64],
    grid: &GridSpec,
) -> Result<TGDistribution, RasterError> {
    build_tg_impl(net, flows, grid, true)
}

/// Rasterizes an assignment result.
pub fn build_tg(
    net: &RoadNetwork,
    result: &AssignmentResult,
    grid: &GridSpec,
) -> Result<TGDistribution, RasterError> {
    build_tg_from_flows(net, &result.flows, grid)
}

fn build_tg_impl(
    net: &RoadNetwork,
    flows: &[f64],
    grid: &GridSpec,
    traced: bool,
) -> Result<TGDistribution, RasterError> {
    if flows.len() != net.num_links() {
        return Err(RasterError::MissingFlow {
            got: flows.len(),
            want: net.num_links(),
        });
    }
    let per_link: Vec<Result<Vec<((u32, u32), f64)>, RasterError>> = net
        .links()
        .par_iter()
        .zip(flows.par_iter())
        .map(|(link, &q)| rasterize_link(link, q, grid))
        .collect();

    let mut mass = BTreeMap::new();
    let mut provenance: BTreeMap<(u32, u32), Vec<String>> = BTreeMap::new();
    // Merge in link order: deterministic sums for any worker count.
    for (idx, contrib) in per_link.into_iter().enumerate() {
        for (cell, m) in contrib? {
            *mass.entry(cell).or_insert(0.0) += m;
            if traced {
                provenance
                    .entry(cell)
                    .or_default()
                    .push(net.link(idx).id.clone());
            }
        }
    }
    Ok(TGDistribution {
        grid: *grid,
        mass,
        provenance: traced.then_some(provenance),
    })
}
