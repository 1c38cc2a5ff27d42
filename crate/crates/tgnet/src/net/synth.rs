//! Synthetic lattice cities: a desk-scale stand-in for real regional
//! networks, with trunk arterials every `arterial_every`-th row/column and
//! residential streets elsewhere.

use super::{LinkInput, Node, Point, RoadClass, RoadNetwork, StudyFrame};

/// Builds a `rows × cols` bidirectional lattice (each undirected street is a
/// pair of directed links). Node `(r, c)` sits at
/// `((c+1)·spacing, (r+1)·spacing)`, leaving a one-spacing margin inside the
/// frame `[0, (cols+1)·spacing] × [0, (rows+1)·spacing]`.
///
/// Row `r` (and column `c`) is a trunk arterial when `r % arterial_every ==
/// 0` (0-based); everything else is residential. `arterial_every = 0` means
/// no arterials. Ids are deterministic: nodes `n{r}.{c}`, links
/// `h{r}.{c}.e|w` (horizontal) and `v{r}.{c}.n|s` (vertical).
///
/// # Panics
/// If `rows < 2`, `cols < 2`, or `spacing_km <= 0`.
pub fn synth_grid_city(
    rows: usize,
    cols: usize,
    spacing_km: f64,
    arterial_every: usize,
) -> RoadNetwork {
    assert!(rows >= 2 && cols >= 2, "lattice needs at least 2x2 nodes");
    assert!(spacing_km > 0.0, "spacing must be positive");

    let frame = StudyFrame::new(
        0.0,
        0.0,
        (cols + 1) as f64 * spacing_km,
        (rows + 1) as f64 * spacing_km,
    )
    .unwrap();

    let coord = |r: usize, c: usize| Point::new((c + 1) as f64 * spacing_km, (r + 1) as f64 * spacing_km);
    let node_id = |r: usize, c: usize| format!("n{r}.{c}");
    let arterial = |idx: usize| arterial_every > 0 && idx % arterial_every == 0;

    let mut nodes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let p = coord(r, c);
            nodes.push((node_id(r, c), Node { x: p.x, y: p.y }));
        }
    }

    let mut links = Vec::with_capacity(2 * (rows * (cols - 1) + cols * (rows - 1)));
    let mut push_pair = |id_base: String, a: (usize, usize), b: (usize, usize), class, sfx: (&str, &str)| {
        let (pa, pb) = (coord(a.0, a.1), coord(b.0, b.1));
        links.push(LinkInput {
            id: format!("{id_base}.{}", sfx.0),
            from: node_id(a.0, a.1),
            to: node_id(b.0, b.1),
            class,
            geometry: vec![pa, pb],
            params: None,
        });
        links.push(LinkInput {
            id: format!("{id_base}.{}", sfx.1),
            from: node_id(b.0, b.1),
            to: node_id(a.0, a.1),
            class,
            geometry: vec![pb, pa],
            params: None,
        });
    };

    for r in 0..rows {
        let class = if arterial(r) {
            RoadClass::Trunk
        } else {
            RoadClass::Residential
        };
        for c in 0..cols - 1 {
            push_pair(format!("h{r}.{c}"), (r, c), (r, c + 1), class, ("e", "w"));
        }
    }
    for c in 0..cols {
        let class = if arterial(c) {
            RoadClass::Trunk
        } else {
            RoadClass::Residential
        };
        for r in 0..rows - 1 {
            push_pair(format!("v{r}.{c}"), (r, c), (r + 1, c), class, ("n", "s"));
        }
    }

    RoadNetwork::new(frame, nodes, links).expect("lattice construction is valid")
}
