//! Static user-equilibrium traffic assignment: BPR link costs, the Beckmann
//! potential, all-or-nothing loading on shortest-path trees, and the
//! Frank-Wolfe descent loop with exact bisection line search.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::demand::ODMatrix;
use crate::net::RoadNetwork;

#[derive(Debug, Error)]
pub enum AssignError {
    #[error("negative flow {0}")]
    NegativeFlow(f64),
    #[error("link {0:?} has no capacity/free-flow parameters")]
    MissingParams(String),
    #[error("nonpositive travel time {time} on link index {link}")]
    NonPositiveTime { link: usize, time: f64 },
    #[error("invalid BPR parameters: alpha={alpha}, beta={beta}")]
    BadBpr { alpha: f64, beta: f64 },
    #[error("invalid Frank-Wolfe config: {0}")]
    BadConfig(String),
    #[error("network has no links")]
    EmptyNetwork,
    #[error("flow vector length {got} does not match link count {want}")]
    FlowLengthMismatch { got: usize, want: usize },
}

/// BPR volume-delay parameters: `t = t0 (1 + alpha (q/C)^beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BPRParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BPRParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, AssignError> {
        if !(alpha >= 0.0 && beta >= 1.0) {
            return Err(AssignError::BadBpr { alpha, beta });
        }
        Ok(BPRParams { alpha, beta })
    }
}

/// Stopping rules for Frank-Wolfe. `line_search_tolerance` bounds the width
/// of the bisection interval on the step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FWConfig {
    pub max_iterations: usize,
    pub gap_tolerance: f64,
    pub line_search_tolerance: f64,
}

impl Default for FWConfig {
    fn default() -> Self {
        FWConfig {
            max_iterations: 500,
            gap_tolerance: 1e-4,
            line_search_tolerance: 1e-6,
        }
    }
}

impl FWConfig {
    pub fn validate(&self) -> Result<(), AssignError> {
        let ok = self.max_iterations >= 1
            && self.gap_tolerance > 0.0
            && self.gap_tolerance < 1.0
            && self.line_search_tolerance > 0.0
            && self.line_search_tolerance < 1.0;
        if ok {
            Ok(())
        } else {
            Err(AssignError::BadConfig(format!("{self:?}")))
        }
    }
}

/// Congested travel time for one link.
pub fn bpr_time(t0: f64, q: f64, cap: f64, p: &BPRParams) -> Result<f64, AssignError> {
    if q < 0.0 {
        return Err(AssignError::NegativeFlow(q));
    }
    Ok(bpr_time_unchecked(t0, q, cap, p))
}

#[inline]
fn bpr_time_unchecked(t0: f64, q: f64, cap: f64, p: &BPRParams) -> f64 {
    t0 * (1.0 + p.alpha * (q / cap).powf(p.beta))
}

fn link_t0_cap(net: &RoadNetwork) -> Result<(Vec<f64>, Vec<f64>), AssignError> {
    let mut t0 = Vec::with_capacity(net.num_links());
    let mut cap = Vec::with_capacity(net.num_links());
    for link in net.links() {
        let p = link
            .params
            .ok_or_else(|| AssignError::MissingParams(link.id.clone()))?;
        t0.push(p.free_flow_time_h);
        cap.push(p.capacity_vph);
    }
    Ok((t0, cap))
}

/// Beckmann objective: `Z = Σ ∫₀^q t(x) dx`, in closed form for BPR costs:
/// `Σ t0 (q + alpha q (q/C)^beta / (beta+1))`.
pub fn beckmann_objective(net: &RoadNetwork, flows: &[f64], p: &BPRParams) -> Result<f64, AssignError> {
    if flows.len() != net.num_links() {
        return Err(AssignError::FlowLengthMismatch {
            got: flows.len(),
            want: net.num_links(),
        });
    }
    let (t0, cap) = link_t0_cap(net)?;
    let mut z = 0.0;
    for i in 0..flows.len() {
        let q = flows[i];
        if q < 0.0 {
            return Err(AssignError::NegativeFlow(q));
        }
        z += t0[i] * (q + p.alpha * q * (q / cap[i]).powf(p.beta) / (p.beta + 1.0));
    }
    Ok(z)
}

/// Directional derivative `dZ/dθ` of the Beckmann objective along `dir` at
/// `flows + θ·dir`: `Σ t(q_i + θ d_i) · d_i`. This is the scalar the line
/// search bisects; exposed so it can be checked against finite differences.
pub fn beckmann_directional_derivative(
    net: &RoadNetwork,
    flows: &[f64],
    dir: &[f64],
    theta: f64,
    p: &BPRParams,
) -> Result<f64, AssignError> {
    if flows.len() != net.num_links() || dir.len() != net.num_links() {
        return Err(AssignError::FlowLengthMismatch {
            got: flows.len().min(dir.len()),
            want: net.num_links(),
        });
    }
    let (t0, cap) = link_t0_cap(net)?;
    let mut g = 0.0;
    for i in 0..flows.len() {
        let q = (flows[i] + theta * dir[i]).max(0.0);
        g += bpr_time_unchecked(t0[i], q, cap[i], p) * dir[i];
    }
    Ok(g)
}

/// Forward-star adjacency over a network's nodes.
#[derive(Debug, Clone)]
pub struct Adjacency {
    out: Vec<Vec<(u32, u32)>>, // (link index, head node)
}

impl Adjacency {
    pub fn build(net: &RoadNetwork) -> Self {
        let mut out = vec![Vec::new(); net.num_nodes()];
        for (idx, link) in net.links().iter().enumerate() {
            out[link.from].push((idx as u32, link.to as u32));
        }
        Adjacency { out }
    }
}

/// One-to-all shortest paths by travel time. `pred[v]` is the incoming link
/// on the shortest path to `v`; unreachable nodes have infinite distance.
#[derive(Debug, Clone)]
pub struct SpTree {
    pub origin: usize,
    pub dist: Vec<f64>,
    pub pred: Vec<Option<u32>>,
}

#[derive(PartialEq)]
struct HeapItem {
    dist: f64,
    node: u32,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on distance; ties on node index for determinism.
        other
            .dist
            .partial_cmp(&self.dist)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra from `origin` under the given link times. Equal-distance
/// predecessors are resolved to the lexicographically smallest link id, so
/// trees are canonical regardless of relaxation order.
pub fn shortest_path_tree(
    net: &RoadNetwork,
    times: &[f64],
    origin: usize,
) -> Result<SpTree, AssignError> {
    let adjacency = Adjacency::build(net);
    shortest_path_tree_adj(&adjacency, net, times, origin)
}

/// As [`shortest_path_tree`] but reusing a prebuilt adjacency.
pub fn shortest_path_tree_adj(
    adjacency: &Adjacency,
    net: &RoadNetwork,
    times: &[f64],
    origin: usize,
) -> Result<SpTree, AssignError> {
    for (link, &t) in times.iter().enumerate() {
        if !(t > 0.0) {
            return Err(AssignError::NonPositiveTime { link, time: t });
        }
    }
    let n = adjacency.out.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred: Vec<Option<u32>> = vec![None; n];
    let mut heap = BinaryHeap::new();
    dist[origin] = 0.0;
    heap.push(HeapItem {
        dist: 0.0,
        node: origin as u32,
    });
    while let Some(HeapItem { dist: d, node }) = heap.pop() {
        let u = node as usize;
        if d > dist[u] {
            continue;
        }
        for &(link, head) in &adjacency.out[u] {
            let v = head as usize;
            let nd = d + times[link as usize];
            if nd < dist[v] {
                dist[v] = nd;
                pred[v] = Some(link);
                heap.push(HeapItem { dist: nd, node: head });
            } else if nd == dist[v] {
                if let Some(cur) = pred[v] {
                    if net.link(link as usize).id < net.link(cur as usize).id {
                        pred[v] = Some(link);
                    }
                }
            }
        }
    }
    Ok(SpTree { origin, dist, pred })
}

/// Demand grouped by origin node, summed over zones sharing a centroid.
fn group_od(od: &ODMatrix, centroids: &[usize]) -> Vec<(usize, Vec<(usize, f64)>)> {
    use std::collections::BTreeMap;
    let mut by_origin: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
    for (r, s, q) in od.entries() {
        let (o, d) = (centroids[r], centroids[s]);
        if o == d {
            // Zones collapsing onto one centroid node produce intra-node
            // demand that cannot load onto any link; skip it.
            continue;
        }
        *by_origin.entry(o).or_default().entry(d).or_insert(0.0) += q;
    }
    by_origin
        .into_iter()
        .map(|(o, dests)| (o, dests.into_iter().collect()))
        .collect()
}

fn aon_load(
    adjacency: &Adjacency,
    net: &RoadNetwork,
    times: &[f64],
    groups: &[(usize, Vec<(usize, f64)>)],
) -> Result<(Vec<f64>, f64, Vec<SpTree>), AssignError> {
    let results: Vec<Result<(Vec<(u32, f64)>, f64, SpTree), AssignError>> = groups
        .par_iter()
        .map(|(origin, dests)| {
            let tree = shortest_path_tree_adj(adjacency, net, times, *origin)?;
            let mut loads: Vec<(u32, f64)> = Vec::new();
            let mut lost = 0.0;
            for &(dest, demand) in dests {
                if !tree.dist[dest].is_finite() {
                    lost += demand;
                    continue;
                }
                let mut v = dest;
                while v != *origin {
                    let link = tree.pred[v].expect("finite distance implies predecessor") as usize;
                    loads.push((link as u32, demand));
                    v = net.link(link).from;
                }
            }
            Ok((loads, lost, tree))
        })
        .collect();

    let mut flows = vec![0.0; net.num_links()];
    let mut lost_total = 0.0;
    let mut trees = Vec::with_capacity(groups.len());
    // Merge in origin order so sums are identical for any worker count.
    for r in results {
        let (loads, lost, tree) = r?;
        for (link, q) in loads {
            flows[link as usize] += q;
        }
        lost_total += lost;
        trees.push(tree);
    }
    Ok((flows, lost_total, trees))
}

/// Loads every OD demand onto its current shortest path. Returns link flows
/// and the total demand between disconnected centroids (which loads
/// nothing).
pub fn all_or_nothing(
    net: &RoadNetwork,
    times: &[f64],
    od: &ODMatrix,
    centroids: &[usize],
) -> Result<(Vec<f64>, f64), AssignError> {
    let adjacency = Adjacency::build(net);
    let groups = group_od(od, centroids);
    let (flows, lost, _) = aon_load(&adjacency, net, times, &groups)?;
    Ok((flows, lost))
}

/// Equilibrium link flows and times plus convergence diagnostics.
///
/// `objective_trace[i]` is the Beckmann objective after iteration `i`'s
/// step (index 0 is the initial all-or-nothing solution). `recent_trees`
/// keeps the shortest-path trees of the last few all-or-nothing loads for
/// route-level checks.
#[derive(Debug, Clone)]
pub struct AssignmentResult {
    pub flows: Vec<f64>,
    pub times: Vec<f64>,
    pub objective: f64,
    pub relative_gap: f64,
    pub iterations: usize,
    pub converged: bool,
    pub lost_demand_vph: f64,
    pub objective_trace: Vec<f64>,
    pub recent_trees: Vec<Vec<SpTree>>,
}

const RETAINED_TREE_SETS: usize = 3;

fn compute_times(t0: &[f64], cap: &[f64], flows: &[f64], p: &BPRParams) -> Vec<f64> {
    flows
        .iter()
        .enumerate()
        .map(|(i, &q)| bpr_time_unchecked(t0[i], q, cap[i], p))
        .collect()
}

fn gap_terms(times: &[f64], flows: &[f64], aux: &[f64]) -> (f64, f64) {
    let mut current = 0.0;
    let mut best = 0.0;
    for i in 0..times.len() {
        current += times[i] * flows[i];
        best += times[i] * aux[i];
    }
    (current, best)
}

/// Solves user equilibrium by Frank-Wolfe: all-or-nothing auxiliary flows,
/// exact bisection line search on the monotone derivative, stop on relative
/// gap or iteration cap. Non-convergence is reported in the result, not an
/// error.
pub fn frank_wolfe(
    net: &RoadNetwork,
    od: &ODMatrix,
    centroids: &[usize],
    p: &BPRParams,
    cfg: &FWConfig,
) -> Result<AssignmentResult, AssignError> {
    cfg.validate()?;
    if net.num_links() == 0 {
        return Err(AssignError::EmptyNetwork);
    }
    let (t0, cap) = link_t0_cap(net)?;
    let adjacency = Adjacency::build(net);
    let groups = group_od(od, centroids);

    // Initialization: all-or-nothing on free-flow times.
    let (mut flows, lost_demand_vph, init_trees) = aon_load(&adjacency, net, &t0, &groups)?;
    let mut recent_trees = vec![init_trees];
    let mut objective_trace = vec![beckmann_objective(net, &flows, p)?];

    let mut iterations = 0;
    let mut converged = false;
    let relative_gap = loop {
        iterations += 1;
        let times = compute_times(&t0, &cap, &flows, p);
        let (aux, _, trees) = aon_load(&adjacency, net, &times, &groups)?;
        recent_trees.push(trees);
        if recent_trees.len() > RETAINED_TREE_SETS {
            recent_trees.remove(0);
        }
        let (current, best) = gap_terms(&times, &flows, &aux);
        let gap = if best > 0.0 {
            ((current - best) / best).max(0.0)
        } else {
            0.0
        };
        if gap <= cfg.gap_tolerance {
            converged = true;
            break gap;
        }
        if iterations >= cfg.max_iterations {
            break gap;
        }

        // Line search: minimize Z(q + θ(y − q)) on [0, 1] by bisection on
        // the monotone derivative g(θ) = Σ t(q + θd)·d.
        let dir: Vec<f64> = aux.iter().zip(&flows).map(|(y, q)| y - q).collect();
        let g_at = |theta: f64| -> f64 {
            let mut g = 0.0;
            for i in 0..flows.len() {
                let q = (flows[i] + theta * dir[i]).max(0.0);
                g += bpr_time_unchecked(t0[i], q, cap[i], p) * dir[i];
            }
            g
        };
        let theta = if g_at(1.0) <= 0.0 {
            1.0
        } else {
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            while hi - lo > cfg.line_search_tolerance {
                let mid = 0.5 * (lo + hi);
                if g_at(mid) <= 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        for i in 0..flows.len() {
            flows[i] = (flows[i] + theta * dir[i]).max(0.0);
        }
        objective_trace.push(beckmann_objective(net, &flows, p)?);
    };

    let times = compute_times(&t0, &cap, &flows, p);
    let objective = beckmann_objective(net, &flows, p)?;
    Ok(AssignmentResult {
        flows,
        times,
        objective,
        relative_gap,
        iterations,
        converged,
        lost_demand_vph,
        objective_trace,
        recent_trees,
    })
}

/// Frank-Wolfe convergence measure at the given state:
/// `(Σ t·q − Σ t·y) / Σ t·y` with `y` the all-or-nothing load at `times`.
/// Defined as 0 when there is no demand.
pub fn relative_gap(
    net: &RoadNetwork,
    flows: &[f64],
    times: &[f64],
    od: &ODMatrix,
    centroids: &[usize],
) -> Result<f64, AssignError> {
    let (aux, _) = all_or_nothing(net, times, od, centroids)?;
    let (current, best) = gap_terms(times, flows, &aux);
    Ok(if best > 0.0 {
        ((current - best) / best).max(0.0)
    } else {
        0.0
    })
}

/// Maximum relative excess of used-route times over the shortest time at
/// equilibrium, sampling up to `sample_paths` routes reconstructed from the
/// all-or-nothing trees retained during the final iterations.
pub fn wardrop_violation(
    net: &RoadNetwork,
    result: &AssignmentResult,
    od: &ODMatrix,
    centroids: &[usize],
    sample_paths: usize,
) -> Result<f64, AssignError> {
    let adjacency = Adjacency::build(net);
    let groups = group_od(od, centroids);
    use std::collections::BTreeMap;
    let mut final_trees: BTreeMap<usize, SpTree> = BTreeMap::new();
    for (origin, _) in &groups {
        final_trees.insert(
            *origin,
            shortest_path_tree_adj(&adjacency, net, &result.times, *origin)?,
        );
    }

    let mut max_violation = 0.0f64;
    let mut sampled = 0usize;
    'outer: for snapshot in &result.recent_trees {
        let by_origin: BTreeMap<usize, &SpTree> =
            snapshot.iter().map(|t| (t.origin, t)).collect();
        for (origin, dests) in &groups {
            let Some(tree) = by_origin.get(origin) else {
                continue;
            };
            for &(dest, _) in dests {
                if sampled >= sample_paths {
                    break 'outer;
                }
                if !tree.dist[dest].is_finite() {
                    continue;
                }
                let mut used_time = 0.0;
                let mut v = dest;
                while v != *origin {
                    let link = tree.pred[v].expect("reachable node has predecessor") as usize;
                    used_time += result.times[link];
                    v = net.link(link).from;
                }
                let shortest = final_trees[origin].dist[dest];
                if shortest.is_finite() && shortest > 0.0 {
                    max_violation = max_violation.max((used_time - shortest) / shortest);
                    sampled += 1;
                }
            }
        }
    }
    Ok(max_violation)
}

impl AssignmentResult {
    /// CSV export: `link_id,flow_vph,time_h`, one row per link in network
    /// order.
    pub fn to_csv(&self, net: &RoadNetwork) -> String {
        let mut out = String::from("link_id,flow_vph,time_h\n");
        for (idx, link) in net.links().iter().enumerate() {
            out.push_str(&format!(
                "{},{},{}\n",
                link.id, self.flows[idx], self.times[idx]
            ));
        }
        out
    }

    /// JSON summary of the solve.
    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary {
            objective: f64,
            relative_gap: f64,
            iterations: usize,
            lost_demand_vph: f64,
            converged: bool,
        }
        serde_json::to_string_pretty(&Summary {
            objective: self.objective,
            relative_gap: self.relative_gap,
            iterations: self.iterations,
            lost_demand_vph: self.lost_demand_vph,
            converged: self.converged,
        })
        .expect("summary serializes")
    }

    /// Reads flows back from the CSV produced by [`Self::to_csv`], in
    /// network link order.
    pub fn flows_from_csv(text: &str, net: &RoadNetwork) -> Result<Vec<f64>, AssignError> {
        let mut by_id = std::collections::HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(AssignError::BadConfig(format!(
                    "assignment csv line {}: expected 3 fields",
                    lineno + 1
                )));
            }
            let q: f64 = fields[1].trim().parse().map_err(|e| {
                AssignError::BadConfig(format!("assignment csv line {}: {e}", lineno + 1))
            })?;
            by_id.insert(fields[0].to_string(), q);
        }
        net.links()
            .iter()
            .map(|l| {
                by_id
                    .get(&l.id)
                    .copied()
                    .ok_or_else(|| AssignError::MissingParams(l.id.clone()))
            })
            .collect()
    }
}
