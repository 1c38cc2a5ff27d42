//! Unbalanced optimal transport between two traffic-weighted mass fields:
//! Euclidean ground cost, generalized-KL marginal penalties weighted by
//! `lambda`, an entropically regularized scaling solver with epsilon
//! annealing, and a small exact solver used as an independent oracle.

mod exact;
mod sinkhorn;

pub use exact::{exact_duality_gap, exact_uot_small, EXACT_SIZE_LIMIT};
pub use sinkhorn::sinkhorn_unbalanced;

use serde::Serialize;
use thiserror::Error;

use crate::net::Point;
use crate::raster::{GridSpec, TGDistribution};

#[derive(Debug, Error)]
pub enum UotError {
    #[error("invalid transport config: {0}")]
    BadConfig(String),
    #[error("support measure is empty")]
    EmptyMeasure,
    #[error("incompatible grids: frames differ")]
    GridMismatch,
    #[error("instance too large for the exact solver: {pairs} pairs > {EXACT_SIZE_LIMIT}")]
    TooLargeForExact { pairs: usize },
}

/// A discrete measure lifted from a TG distribution: one atom per nonzero
/// cell, positioned at the cell center, carrying the cell mass (veh·km).
#[derive(Debug, Clone)]
pub struct SupportMeasure {
    pub positions: Vec<Point>,
    pub masses: Vec<f64>,
    pub grid: GridSpec,
}

impl SupportMeasure {
    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }
}

/// Lifts a TG distribution to its support measure. Cells iterate in key
/// order, so atom indexing is deterministic.
pub fn to_support(d: &TGDistribution) -> SupportMeasure {
    let mut positions = Vec::with_capacity(d.num_cells());
    let mut masses = Vec::with_capacity(d.num_cells());
    for ((p, q), m) in d.cells() {
        positions.push(d.grid.cell_center(p, q));
        masses.push(m);
    }
    SupportMeasure {
        positions,
        masses,
        grid: d.grid,
    }
}

/// Euclidean ground cost in km.
pub fn ground_cost(a: Point, b: Point) -> f64 {
    a.distance(b)
}

/// Generalized KL divergence `Σ mu ln(mu/nu) - mu + nu` with the limit
/// conventions: a zero `mu_i` contributes `nu_i`; a positive `mu_i` against
/// a zero `nu_i` makes the divergence `+∞`.
pub fn generalized_kl(mu: &[f64], nu: &[f64]) -> f64 {
    debug_assert_eq!(mu.len(), nu.len());
    let mut acc = 0.0;
    for (&m, &n) in mu.iter().zip(nu) {
        if m <= 0.0 {
            acc += n;
        } else if n <= 0.0 {
            return f64::INFINITY;
        } else {
            acc += m * (m / n).ln() - m + n;
        }
    }
    acc
}

/// Solver configuration. `epsilon` is the final entropic scale in km;
/// `epsilon_anneal` lists larger scales visited first. `max_iterations`
/// bounds each annealing stage. `cost_cache_budget` caps the number of
/// ground-cost entries materialized; larger instances compute costs on the
/// fly.
#[derive(Debug, Clone, Serialize)]
pub struct UOTConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub epsilon_anneal: Vec<f64>,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub cost_cache_budget: usize,
}

impl UOTConfig {
    /// Defaults scaled to a grid cell size: anneal `{0.5, 0.1} × C` down to
    /// a final `0.02 × C`.
    pub fn for_cell_size(cell_size_km: f64) -> Self {
        UOTConfig {
            lambda: 0.05,
            epsilon: 0.02 * cell_size_km,
            epsilon_anneal: vec![0.5 * cell_size_km, 0.1 * cell_size_km],
            max_iterations: 5000,
            convergence_tol: 1e-6,
            cost_cache_budget: 16_000_000,
        }
    }

    pub fn validate(&self) -> Result<(), UotError> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(UotError::BadConfig(format!("lambda = {}", self.lambda)));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(UotError::BadConfig(format!("epsilon = {}", self.epsilon)));
        }
        if !(self.convergence_tol > 0.0) || self.max_iterations == 0 {
            return Err(UotError::BadConfig(format!(
                "max_iterations = {}, convergence_tol = {}",
                self.max_iterations, self.convergence_tol
            )));
        }
        let mut prev = f64::INFINITY;
        for &e in &self.epsilon_anneal {
            if !(e > 0.0) || e >= prev {
                return Err(UotError::BadConfig(
                    "epsilon_anneal must be positive and strictly descending".into(),
                ));
            }
            prev = e;
        }
        if prev <= self.epsilon && prev.is_finite() {
            return Err(UotError::BadConfig(
                "epsilon_anneal must stay above the final epsilon".into(),
            ));
        }
        Ok(())
    }

    /// The full descending schedule ending at the final epsilon.
    pub(crate) fn stages(&self) -> Vec<f64> {
        let mut stages = self.epsilon_anneal.clone();
        stages.push(self.epsilon);
        stages
    }
}

/// One coupling entry: `mass` transported from atom `a` in the first
/// measure to atom `b` in the second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanEntry {
    pub a: u32,
    pub b: u32,
    pub mass: f64,
}

/// Sparse transport plan. The stored marginals are exactly the row/column
/// sums of `entries`.
#[derive(Debug, Clone, Default)]
pub struct TransportPlan {
    pub entries: Vec<PlanEntry>,
    pub marginal_a: Vec<f64>,
    pub marginal_b: Vec<f64>,
}

impl TransportPlan {
    pub(crate) fn from_entries(entries: Vec<PlanEntry>, n_a: usize, n_b: usize) -> Self {
        let mut marginal_a = vec![0.0; n_a];
        let mut marginal_b = vec![0.0; n_b];
        for e in &entries {
            marginal_a[e.a as usize] += e.mass;
            marginal_b[e.b as usize] += e.mass;
        }
        TransportPlan {
            entries,
            marginal_a,
            marginal_b,
        }
    }

    pub fn transported_mass(&self) -> f64 {
        self.entries.iter().map(|e| e.mass).sum()
    }
}

/// Outcome of an unbalanced transport solve. `tgw` is the penalized primal
/// objective at the returned plan, excluding the entropic term:
/// `transport_cost + kl_penalty`, in veh·km².
#[derive(Debug, Clone)]
pub struct UOTResult {
    pub tgw: f64,
    pub transport_cost: f64,
    pub kl_penalty: f64,
    pub plan: TransportPlan,
    pub created_mass: f64,
    pub destroyed_mass: f64,
    pub converged: bool,
    pub iterations: usize,
    pub epsilon_final: f64,
    pub lambda: f64,
    pub support_a: SupportMeasure,
    pub support_b: SupportMeasure,
}

impl UOTResult {
    /// JSON summary matching the exported result schema.
    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary {
            tgw_veh_km2: f64,
            transport_cost: f64,
            kl_penalty: f64,
            created_mass: f64,
            destroyed_mass: f64,
            converged: bool,
            iterations: usize,
            epsilon_final: f64,
            lambda: f64,
        }
        serde_json::to_string_pretty(&Summary {
            tgw_veh_km2: self.tgw,
            transport_cost: self.transport_cost,
            kl_penalty: self.kl_penalty,
            created_mass: self.created_mass,
            destroyed_mass: self.destroyed_mass,
            converged: self.converged,
            iterations: self.iterations,
            epsilon_final: self.epsilon_final,
            lambda: self.lambda,
        })
        .expect("summary serializes")
    }

    /// Plan CSV: `ax_km,ay_km,bx_km,by_km,mass_veh_km,distance_km`.
    pub fn plan_csv(&self) -> String {
        let mut out = String::from("ax_km,ay_km,bx_km,by_km,mass_veh_km,distance_km\n");
        for e in &self.plan.entries {
            let pa = self.support_a.positions[e.a as usize];
            let pb = self.support_b.positions[e.b as usize];
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                pa.x,
                pa.y,
                pb.x,
                pb.y,
                e.mass,
                ground_cost(pa, pb)
            ));
        }
        out
    }
}

fn empty_result(
    support_a: SupportMeasure,
    support_b: SupportMeasure,
    cfg: &UOTConfig,
) -> UOTResult {
    let total_a = support_a.total_mass();
    let total_b = support_b.total_mass();
    // With no coupling, the objective is the pure penalty for the surviving
    // side: lambda times its total mass (GKL limit convention).
    let kl_penalty = cfg.lambda * (total_a + total_b);
    UOTResult {
        tgw: kl_penalty,
        transport_cost: 0.0,
        kl_penalty,
        plan: TransportPlan::from_entries(Vec::new(), support_a.len(), support_b.len()),
        created_mass: total_b,
        destroyed_mass: total_a,
        converged: true,
        iterations: 0,
        epsilon_final: cfg.epsilon,
        lambda: cfg.lambda,
        support_a,
        support_b,
    }
}

/// The traffic-weighted geographic Wasserstein distance between two TG
/// distributions: lifts both to support measures and solves the unbalanced
/// transport problem. Grids must share a frame; cell sizes may differ.
/// An empty side degenerates to pure creation/destruction at `lambda` per
/// unit mass.
pub fn tgw_distance(
    da: &TGDistribution,
    db: &TGDistribution,
    cfg: &UOTConfig,
) -> Result<UOTResult, UotError> {
    cfg.validate()?;
    if !da.grid.frame.approx_eq(&db.grid.frame, 1e-9) {
        return Err(UotError::GridMismatch);
    }
    let support_a = to_support(da);
    let support_b = to_support(db);
    if support_a.is_empty() || support_b.is_empty() {
        return Ok(empty_result(support_a, support_b, cfg));
    }
    sinkhorn_unbalanced(&support_a, &support_b, cfg)
}
