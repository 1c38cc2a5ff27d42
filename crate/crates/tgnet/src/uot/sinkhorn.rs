//! Log-domain scaling solver for the entropically regularized unbalanced
//! transport problem
//!
//! ```text
//! min_{J ≥ 0}  Σ c_ij J_ij + λ [GKL(J1 || a) + GKL(Jᵀ1 || b)] + ε GKL(J || R)
//! ```
//!
//! with the mass-geometric reference `R_ij = √(a_i b_j) e^{-c_ij/ε}`. The
//! reference makes the regularization scale-free in the masses: for two
//! identical measures the entropic optimum is exactly the diagonal
//! coupling, so self-distances vanish instead of carrying an
//! `ε·ln(mass)`-sized bias. Dual updates use the marginal-relaxation
//! exponent `λ/(λ+ε)` and run entirely in log space; epsilon is annealed
//! down a descending schedule with potentials carried across stages.

use rayon::prelude::*;

use super::{
    generalized_kl, ground_cost, PlanEntry, SupportMeasure, TransportPlan, UOTConfig, UOTResult,
    UotError,
};

/// Terms this far below a row's max contribute < 1e-20 relative and are
/// skipped inside log-sum-exp accumulation.
const LSE_CUTOFF: f64 = 46.0;

/// exp() of anything below this is a hard zero in f64.
const EXP_UNDERFLOW: f64 = -740.0;

struct Kernel<'m> {
    a: &'m SupportMeasure,
    b: &'m SupportMeasure,
    /// Row-major `n_a × n_b` ground costs, cached when within budget.
    cache: Option<Vec<f64>>,
}

impl<'m> Kernel<'m> {
    fn new(a: &'m SupportMeasure, b: &'m SupportMeasure, budget: usize) -> Self {
        let pairs = a.len().checked_mul(b.len()).unwrap_or(usize::MAX);
        let cache = (pairs <= budget).then(|| {
            let mut c = Vec::with_capacity(pairs);
            for &pa in &a.positions {
                for &pb in &b.positions {
                    c.push(ground_cost(pa, pb));
                }
            }
            c
        });
        Kernel { a, b, cache }
    }

    #[inline]
    fn cost(&self, i: usize, j: usize) -> f64 {
        match &self.cache {
            Some(c) => c[i * self.b.len() + j],
            None => ground_cost(self.a.positions[i], self.b.positions[j]),
        }
    }

    /// `LSE_j (w[j] - cost(i,j)/ε)` over the second measure, two-pass with
    /// truncation: exact max, then exp-sum of terms within [`LSE_CUTOFF`].
    fn lse_row(&self, i: usize, w: &[f64], inv_eps: f64) -> f64 {
        let mut max = f64::NEG_INFINITY;
        for j in 0..w.len() {
            let t = w[j] - self.cost(i, j) * inv_eps;
            if t > max {
                max = t;
            }
        }
        if !max.is_finite() {
            return max;
        }
        let floor = max - LSE_CUTOFF;
        let mut sum = 0.0;
        for j in 0..w.len() {
            let t = w[j] - self.cost(i, j) * inv_eps;
            if t >= floor {
                sum += (t - max).exp();
            }
        }
        max + sum.ln()
    }

    /// Column counterpart of [`Self::lse_row`].
    fn lse_col(&self, j: usize, w: &[f64], inv_eps: f64) -> f64 {
        let mut max = f64::NEG_INFINITY;
        for (i, &wi) in w.iter().enumerate() {
            let t = wi - self.cost(i, j) * inv_eps;
            if t > max {
                max = t;
            }
        }
        if !max.is_finite() {
            return max;
        }
        let floor = max - LSE_CUTOFF;
        let mut sum = 0.0;
        for (i, &wi) in w.iter().enumerate() {
            let t = wi - self.cost(i, j) * inv_eps;
            if t >= floor {
                sum += (t - max).exp();
            }
        }
        max + sum.ln()
    }
}

/// Solves the unbalanced problem between two nonempty measures and returns
/// the plan, its penalized primal value (excluding the entropic term), and
/// the mass bookkeeping. Non-convergence within the iteration caps is
/// flagged on the result, with the best iterate returned.
pub fn sinkhorn_unbalanced(
    a: &SupportMeasure,
    b: &SupportMeasure,
    cfg: &UOTConfig,
) -> Result<UOTResult, UotError> {
    cfg.validate()?;
    if a.is_empty() || b.is_empty() {
        return Err(UotError::EmptyMeasure);
    }
    let (n_a, n_b) = (a.len(), b.len());
    let kernel = Kernel::new(a, b, cfg.cost_cache_budget);
    let half_log_a: Vec<f64> = a.masses.iter().map(|m| 0.5 * m.ln()).collect();
    let half_log_b: Vec<f64> = b.masses.iter().map(|m| 0.5 * m.ln()).collect();

    let mut log_u = vec![0.0; n_a];
    let mut log_v = vec![0.0; n_b];
    let mut iterations = 0usize;
    let mut converged = false;
    let mut prev_eps: Option<f64> = None;

    for eps in cfg.stages() {
        // Potentials f = ε·log u persist across stages; rescale the logs.
        if let Some(pe) = prev_eps {
            let ratio = pe / eps;
            log_u.iter_mut().for_each(|x| *x *= ratio);
            log_v.iter_mut().for_each(|x| *x *= ratio);
        }
        prev_eps = Some(eps);

        let inv_eps = 1.0 / eps;
        let fi = cfg.lambda / (cfg.lambda + eps);
        // The dual map contracts at rate ~fi; scale the stop threshold so
        // the fixed-point error, not the last step size, is ~convergence_tol.
        let threshold = (cfg.convergence_tol * (1.0 - fi)).max(1e-14);

        converged = false;
        for _ in 0..cfg.max_iterations {
            iterations += 1;
            let w_b: Vec<f64> = (0..n_b).map(|j| half_log_b[j] + log_v[j]).collect();
            let log_u_new: Vec<f64> = (0..n_a)
                .into_par_iter()
                .map(|i| fi * (half_log_a[i] - kernel.lse_row(i, &w_b, inv_eps)))
                .collect();
            let w_a: Vec<f64> = (0..n_a).map(|i| half_log_a[i] + log_u_new[i]).collect();
            let log_v_new: Vec<f64> = (0..n_b)
                .into_par_iter()
                .map(|j| fi * (half_log_b[j] - kernel.lse_col(j, &w_a, inv_eps)))
                .collect();

            let mut err = 0.0f64;
            for (new, old) in log_u_new.iter().zip(&log_u) {
                err = err.max((new - old).abs());
            }
            for (new, old) in log_v_new.iter().zip(&log_v) {
                err = err.max((new - old).abs());
            }
            log_u = log_u_new;
            log_v = log_v_new;
            if err <= threshold {
                converged = true;
                break;
            }
        }
    }

    let eps = cfg.epsilon;
    let inv_eps = 1.0 / eps;
    let prune_mass = 1e-12 * a.total_mass().max(b.total_mass());
    let log_prune = prune_mass.ln();

    // Extraction: log J_ij = log u_i + log v_j + ½ln a_i + ½ln b_j − c/ε.
    // Marginals and transport cost accumulate over every representable
    // entry; only entries above the prune threshold are stored.
    struct RowOut {
        entries: Vec<PlanEntry>,
        mu: f64,
        cost: f64,
        nu: Vec<f64>,
    }
    let rows: Vec<RowOut> = (0..n_a)
        .into_par_iter()
        .map(|i| {
            let base = log_u[i] + half_log_a[i];
            let mut out = RowOut {
                entries: Vec::new(),
                mu: 0.0,
                cost: 0.0,
                nu: vec![0.0; n_b],
            };
            for j in 0..n_b {
                let c = kernel.cost(i, j);
                let log_j = base + log_v[j] + half_log_b[j] - c * inv_eps;
                if log_j <= EXP_UNDERFLOW {
                    continue;
                }
                let mass = log_j.exp();
                out.mu += mass;
                out.nu[j] += mass;
                out.cost += mass * c;
                if log_j >= log_prune {
                    out.entries.push(PlanEntry {
                        a: i as u32,
                        b: j as u32,
                        mass,
                    });
                }
            }
            out
        })
        .collect();

    let mut entries = Vec::new();
    let mut mu = vec![0.0; n_a];
    let mut nu = vec![0.0; n_b];
    let mut transport_cost = 0.0;
    for (i, row) in rows.into_iter().enumerate() {
        entries.extend(row.entries);
        mu[i] = row.mu;
        transport_cost += row.cost;
        for (j, v) in row.nu.into_iter().enumerate() {
            nu[j] += v;
        }
    }

    let kl_penalty = cfg.lambda * (generalized_kl(&mu, &a.masses) + generalized_kl(&nu, &b.masses));
    let transported_to_b: f64 = nu.iter().sum();
    let transported_from_a: f64 = mu.iter().sum();
    Ok(UOTResult {
        tgw: transport_cost + kl_penalty,
        transport_cost,
        kl_penalty,
        plan: TransportPlan::from_entries(entries, n_a, n_b),
        created_mass: (b.total_mass() - transported_to_b).max(0.0),
        destroyed_mass: (a.total_mass() - transported_from_a).max(0.0),
        converged,
        iterations,
        epsilon_final: eps,
        lambda: cfg.lambda,
        support_a: a.clone(),
        support_b: b.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Point, StudyFrame};
    use crate::raster::{GridSpec, TGDistribution};
    use crate::uot::{exact_uot_small, tgw_distance, to_support};

    fn grid(c: f64) -> GridSpec {
        GridSpec::new(StudyFrame::new(0.0, 0.0, 1.0, 1.0).unwrap(), c).unwrap()
    }

    fn measure(atoms: &[((f64, f64), f64)]) -> SupportMeasure {
        SupportMeasure {
            positions: atoms.iter().map(|&((x, y), _)| Point::new(x, y)).collect(),
            masses: atoms.iter().map(|&(_, m)| m).collect(),
            grid: grid(0.05),
        }
    }

    fn cfg(lambda: f64, eps: f64) -> UOTConfig {
        UOTConfig {
            lambda,
            epsilon: eps,
            epsilon_anneal: vec![eps * 25.0, eps * 5.0],
            max_iterations: 50_000,
            convergence_tol: 1e-7,
            cost_cache_budget: 16_000_000,
        }
    }

    #[test]
    fn identical_measures_have_near_zero_distance() {
        let m = measure(&[
            ((0.1, 0.1), 4.0),
            ((0.3, 0.7), 125.0),
            ((0.8, 0.2), 0.02),
            ((0.55, 0.55), 17.0),
        ]);
        let r = sinkhorn_unbalanced(&m, &m, &cfg(0.05, 1e-3)).unwrap();
        assert!(r.converged);
        let budget = 1e-9 * m.total_mass();
        assert!(r.tgw.abs() <= budget, "tgw = {}", r.tgw);
        // Plan is essentially diagonal.
        for e in &r.plan.entries {
            if e.a == e.b {
                assert!((e.mass - m.masses[e.a as usize]).abs() <= 1e-6 * m.masses[e.a as usize]);
            } else {
                assert!(e.mass <= 1e-9 * m.total_mass());
            }
        }
    }

    /// Independent 1-D oracle for two single atoms at distance `d`: the
    /// only degree of freedom is the transported mass `t`.
    fn two_atom_oracle(ma: f64, mb: f64, d: f64, lambda: f64) -> f64 {
        let mut best = f64::INFINITY;
        let hi = ma.max(mb) * 2.0;
        for i in 0..=200_000 {
            let t = hi * i as f64 / 200_000.0;
            let obj = t * d
                + lambda * (generalized_kl(&[t], &[ma]) + generalized_kl(&[t], &[mb]));
            if obj < best {
                best = obj;
            }
        }
        best
    }

    #[test]
    fn two_atom_full_transport_when_lambda_dominates() {
        // d = 0.3 km, lambda = 10: moving is far cheaper than
        // destroy+create, so tgw -> m·d as eps -> 0.
        let a = measure(&[((0.2, 0.5), 3.0)]);
        let b = measure(&[((0.5, 0.5), 3.0)]);
        let d = 0.3;
        let lambda = 10.0;
        let r = sinkhorn_unbalanced(&a, &b, &cfg(lambda, 5e-4)).unwrap();
        let oracle = two_atom_oracle(3.0, 3.0, d, lambda);
        assert!((r.tgw - oracle).abs() <= 0.02 * oracle, "tgw {} vs {}", r.tgw, oracle);
        assert!((r.tgw - 3.0 * d).abs() <= 0.03 * (3.0 * d));
    }

    #[test]
    fn two_atom_destruction_when_lambda_small() {
        // Far apart with small lambda: destroying and recreating wins, so
        // the objective approaches lambda·(ma + mb) at vanishing coupling.
        let a = measure(&[((0.05, 0.05), 2.0)]);
        let b = measure(&[((0.95, 0.95), 5.0)]);
        let lambda = 0.05;
        let d = Point::new(0.05, 0.05).distance(Point::new(0.95, 0.95));
        let r = sinkhorn_unbalanced(&a, &b, &cfg(lambda, 5e-4)).unwrap();
        let oracle = two_atom_oracle(2.0, 5.0, d, lambda);
        let floor = lambda * (2.0 + 5.0) * 1e-3;
        assert!(
            (r.tgw - oracle).abs() <= 0.02 * oracle.max(floor),
            "tgw {} vs {}",
            r.tgw,
            oracle
        );
    }

    #[test]
    fn agrees_with_exact_solver_on_small_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for trial in 0..4 {
            let n = rng.gen_range(3..8);
            let m = rng.gen_range(3..8);
            let atoms_a: Vec<((f64, f64), f64)> = (0..n)
                .map(|_| {
                    (
                        (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)),
                        rng.gen_range(0.5..3.0),
                    )
                })
                .collect();
            let atoms_b: Vec<((f64, f64), f64)> = (0..m)
                .map(|_| {
                    (
                        (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)),
                        rng.gen_range(0.5..3.0),
                    )
                })
                .collect();
            let a = measure(&atoms_a);
            let b = measure(&atoms_b);
            let lambda = [0.3, 1.0, 3.0][trial % 3];
            let s = sinkhorn_unbalanced(&a, &b, &cfg(lambda, 4e-4)).unwrap();
            let e = exact_uot_small(&a, &b, lambda).unwrap();
            let floor = lambda * a.total_mass().max(b.total_mass()) * 1e-3;
            let denom = e.tgw.max(floor);
            assert!(
                (s.tgw - e.tgw).abs() <= 0.02 * denom,
                "trial {trial}: sinkhorn {} vs exact {}",
                s.tgw,
                e.tgw
            );
        }
    }

    #[test]
    fn symmetry_within_tolerance() {
        let a = measure(&[((0.1, 0.2), 2.0), ((0.6, 0.7), 5.0), ((0.9, 0.1), 1.0)]);
        let b = measure(&[((0.15, 0.25), 3.0), ((0.5, 0.6), 4.0)]);
        let c = cfg(0.5, 1e-3);
        let ab = sinkhorn_unbalanced(&a, &b, &c).unwrap();
        let ba = sinkhorn_unbalanced(&b, &a, &c).unwrap();
        assert!(
            (ab.tgw - ba.tgw).abs() <= 1e-4 * ab.tgw.max(1e-12),
            "{} vs {}",
            ab.tgw,
            ba.tgw
        );
    }

    #[test]
    fn plan_feasibility_recomputed() {
        let a = measure(&[((0.1, 0.2), 2.0), ((0.6, 0.7), 5.0)]);
        let b = measure(&[((0.2, 0.3), 3.0), ((0.7, 0.8), 4.0)]);
        let r = sinkhorn_unbalanced(&a, &b, &cfg(1.0, 1e-3)).unwrap();
        let mut row = vec![0.0; a.len()];
        let mut col = vec![0.0; b.len()];
        for e in &r.plan.entries {
            assert!(e.mass >= 0.0);
            row[e.a as usize] += e.mass;
            col[e.b as usize] += e.mass;
        }
        assert_eq!(row, r.plan.marginal_a);
        assert_eq!(col, r.plan.marginal_b);
        assert!((r.tgw - (r.transport_cost + r.kl_penalty)).abs() <= 1e-12 * r.tgw.max(1.0));
    }

    #[test]
    fn tgw_nondecreasing_in_lambda() {
        let a = measure(&[((0.1, 0.1), 2.0), ((0.8, 0.3), 6.0)]);
        let b = measure(&[((0.4, 0.9), 4.0)]);
        let mut prev = -1.0;
        for lambda in [0.05, 0.2, 0.8, 3.0, 12.0] {
            let r = sinkhorn_unbalanced(&a, &b, &cfg(lambda, 1e-3)).unwrap();
            assert!(
                r.tgw >= prev - 1e-6 * r.tgw.abs().max(1.0),
                "lambda {lambda}: {} < {prev}",
                r.tgw
            );
            prev = r.tgw;
        }
    }

    #[test]
    fn translation_by_one_cell() {
        // A row of cells and its perpendicular one-cell translate: with a
        // dominant lambda the plan shifts every atom by one cell pitch.
        let g = grid(0.05);
        let cells: Vec<((u32, u32), f64)> = (0..6).map(|i| ((2 + i, 4), 3.0 + i as f64)).collect();
        let da = TGDistribution::from_cells(g, cells.clone()).unwrap();
        let shifted: Vec<((u32, u32), f64)> =
            cells.iter().map(|&((p, q), m)| ((p, q + 1), m)).collect();
        let db = TGDistribution::from_cells(g, shifted).unwrap();
        let mut c = cfg(10.0, 1e-3);
        c.max_iterations = 200_000;
        let r = tgw_distance(&da, &db, &c).unwrap();
        let expect = da.total_mass() * 0.05;
        assert!(
            (r.tgw - expect).abs() <= 0.03 * expect,
            "tgw {} vs {expect}",
            r.tgw
        );
        // Cross-check against the exact oracle on the same instance.
        let e = exact_uot_small(&to_support(&da), &to_support(&db), 10.0).unwrap();
        assert!((r.tgw - e.tgw).abs() <= 0.02 * e.tgw);
    }
}
