//! Structured sparse recovery.
//!
//! Two solver routes share one result type: a family-constrained orthogonal
//! matching pursuit, and an accelerated proximal solver for the mixed
//! l1 + group-l2 objective with an optional temporal quadratic tether. The
//! incremental path refits the previous support first and only searches for
//! the changed atoms, which is what makes small per-step budgets viable.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dictionary::{
    project_support_restricted, FeasibleFamily, StructuredDictionary, SupportSet,
};
use crate::error::{Error, Result};
use crate::linalg::{columns, gram_spectral_norm, lstsq_min_norm};
use crate::sensing::{MeasurementOperator, Sketch};

/// Residual norm below which OMP declares the sketch explained.
const OMP_RESIDUAL_STOP: f64 = 1e-10;

/// Solver parameters shared by the recovery routes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub lambda1: f64,
    pub lambda_group: f64,
    pub gamma_temporal: f64,
    pub tau: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub family: FeasibleFamily,
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda_group < 0.0 || self.gamma_temporal < 0.0 || self.tau < 0.0
        {
            return Err(Error::invalid("penalty weights must be nonnegative"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be positive"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("tolerance must be positive"));
        }
        Ok(())
    }

    /// Plain top-k config with thresholding, the common experiment setup.
    pub fn top_k(k: usize, tau: f64) -> Self {
        RecoveryConfig {
            lambda1: 0.0,
            lambda_group: 0.0,
            gamma_temporal: 0.0,
            tau,
            max_iterations: 300,
            tolerance: 1e-8,
            family: FeasibleFamily::unconstrained(k),
        }
    }
}

/// Outcome of one recovery call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResult {
    pub alpha_hat: Vec<f64>,
    pub support: SupportSet,
    pub residual_norm: f64,
    pub iterations: usize,
    pub measurements_used: usize,
    pub objective_trace: Vec<f64>,
    /// Set when any least-squares refit hit a rank-deficient system and was
    /// resolved by the minimum-norm solution.
    pub rank_deficient: bool,
}

impl RecoveryResult {
    pub fn coefficient_error(&self, truth: &[f64]) -> f64 {
        self.alpha_hat
            .iter()
            .zip(truth)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Effective sensing matrix `M = A Ψ`.
pub fn effective_matrix(a: &MeasurementOperator, psi: &StructuredDictionary) -> Result<DMatrix<f64>> {
    if a.d() != psi.d() {
        return Err(Error::invalid(format!(
            "operator senses D = {} but dictionary has D = {}",
            a.d(),
            psi.d()
        )));
    }
    Ok(&a.entries * &psi.entries)
}

// ---------------------------------------------------------------------------
// Orthogonal matching pursuit
// ---------------------------------------------------------------------------

/// Family-constrained orthogonal matching pursuit.
///
/// Greedily adds the atom (or, for group families, the whole group) with
/// the largest residual correlation among additions that stay extendable
/// within the family, refitting by least squares after every acceptance.
/// Stops at `k_max` atoms, at residual norm 1e-10, or when no admissible
/// atom has nonzero correlation.
pub fn omp_structured(
    z: &Sketch,
    m: &DMatrix<f64>,
    k_max: usize,
    family: &FeasibleFamily,
) -> Result<RecoveryResult> {
    omp_structured_excluding(z, m, k_max, family, &[])
}

/// OMP with an explicit exclusion list, used by the incremental path to
/// keep inherited atoms out of the addition search.
fn omp_structured_excluding(
    z: &Sketch,
    m: &DMatrix<f64>,
    k_max: usize,
    family: &FeasibleFamily,
    excluded: &[usize],
) -> Result<RecoveryResult> {
    let g = m.ncols();
    if z.len() != m.nrows() {
        return Err(Error::invalid(format!(
            "sketch length {} does not match matrix rows {}",
            z.len(),
            m.nrows()
        )));
    }
    if k_max == 0 || k_max > g {
        return Err(Error::invalid("omp requires 1 <= k_max <= G"));
    }
    family.validate(g)?;
    let excluded = mask_of(excluded, g);
    for j in 0..g {
        if !excluded[j] && m.column(j).norm() == 0.0 {
            return Err(Error::degenerate(format!("matrix column {j} is zero")));
        }
    }

    let zv = z.as_vector();
    let mut selected: Vec<usize> = Vec::new();
    let mut residual = zv.clone();
    let mut trace = vec![residual.norm()];
    let mut coef = DVector::zeros(0);
    let mut rank_deficient = false;

    while selected.len() < k_max && residual.norm() > OMP_RESIDUAL_STOP {
        let corr = m.transpose() * &residual;
        let addition = next_addition(&corr, &selected, k_max, family, g, &excluded);
        let Some(new_atoms) = addition else { break };
        if new_atoms.is_empty() {
            break;
        }
        selected.extend(new_atoms);
        selected.sort_unstable();
        let sub = columns(m, &selected);
        let (c, deficient) = lstsq_min_norm(&sub, &zv)?;
        rank_deficient |= deficient;
        residual = &zv - sub * &c;
        coef = c;
        trace.push(residual.norm());
    }

    let mut alpha = vec![0.0; g];
    for (slot, &id) in selected.iter().enumerate() {
        alpha[id] = coef[slot];
    }
    let support = project_support_restricted(&alpha, family, Some(&mask_of(&selected, g)))?;
    Ok(RecoveryResult {
        residual_norm: residual.norm(),
        iterations: selected.len(),
        measurements_used: z.len(),
        objective_trace: trace,
        support,
        alpha_hat: alpha,
        rank_deficient,
    })
}

fn mask_of(ids: &[usize], g: usize) -> Vec<bool> {
    let mut mask = vec![false; g];
    for &id in ids {
        mask[id] = true;
    }
    mask
}

/// Choose the next greedy addition: a single atom, or a whole group for
/// group families. Returns `None` when nothing admissible remains or the
/// best correlation is exactly zero.
fn next_addition(
    corr: &DVector<f64>,
    selected: &[usize],
    k_max: usize,
    family: &FeasibleFamily,
    g: usize,
    excluded: &[bool],
) -> Option<Vec<usize>> {
    let taken = mask_of(selected, g);
    match family {
        FeasibleFamily::GroupK { k_groups, groups } => {
            let active_groups = groups
                .iter()
                .filter(|grp| grp.iter().any(|&id| taken[id]))
                .count();
            if active_groups >= *k_groups {
                return None;
            }
            let mut best: Option<(f64, usize)> = None;
            for (gi, grp) in groups.iter().enumerate() {
                if grp.iter().any(|&id| taken[id] || excluded[id]) {
                    continue;
                }
                if selected.len() + grp.len() > k_max {
                    continue;
                }
                let norm = grp.iter().map(|&id| corr[id] * corr[id]).sum::<f64>().sqrt();
                if best.map_or(true, |(bn, _)| norm > bn) {
                    best = Some((norm, gi));
                }
            }
            let (norm, gi) = best?;
            if norm == 0.0 {
                return None;
            }
            Some(groups[gi].clone())
        }
        _ => {
            let mut best: Option<(f64, usize)> = None;
            for id in 0..g {
                if taken[id] || excluded[id] {
                    continue;
                }
                let mut candidate: Vec<usize> = selected.to_vec();
                candidate.push(id);
                if !family.admits(&SupportSet::new(candidate), g) {
                    continue;
                }
                let mag = corr[id].abs();
                if best.map_or(true, |(bm, _)| mag > bm) {
                    best = Some((mag, id));
                }
            }
            let (mag, id) = best?;
            if mag == 0.0 {
                return None;
            }
            Some(vec![id])
        }
    }
}

// ---------------------------------------------------------------------------
// Accelerated proximal solver
// ---------------------------------------------------------------------------

/// Mixed objective value: `½‖z − Mα‖² + λ₁‖α‖₁ + λ_G Σ‖α_grp‖₂ +
/// γ‖α − α_prev‖²` (the temporal term only when `previous` is given).
pub fn group_lasso_objective(
    z: &DVector<f64>,
    m: &DMatrix<f64>,
    alpha: &DVector<f64>,
    config: &RecoveryConfig,
    groups: &[Vec<usize>],
    previous: Option<&DVector<f64>>,
) -> f64 {
    let resid = z - m * alpha;
    let mut obj = 0.5 * resid.norm_squared();
    obj += config.lambda1 * alpha.iter().map(|v| v.abs()).sum::<f64>();
    if config.lambda_group > 0.0 {
        for grp in groups {
            let norm = grp.iter().map(|&id| alpha[id] * alpha[id]).sum::<f64>().sqrt();
            obj += config.lambda_group * norm;
        }
    }
    if let Some(prev) = previous {
        obj += config.gamma_temporal * (alpha - prev).norm_squared();
    }
    obj
}

/// Canonical structured-sparsity norm used in objective accounting:
/// `‖α‖₁ + Σ_grp ‖α_grp‖₂` with unit weights.
pub fn structured_norm(alpha: &[f64], groups: &[Vec<usize>]) -> f64 {
    let l1: f64 = alpha.iter().map(|v| v.abs()).sum();
    let group: f64 = groups
        .iter()
        .map(|grp| grp.iter().map(|&id| alpha[id] * alpha[id]).sum::<f64>().sqrt())
        .sum();
    l1 + group
}

/// Accelerated proximal gradient for the mixed sparse-group objective.
///
/// Monotone variant: each accelerated candidate is kept only if it does not
/// increase the objective, so the recorded trace is nonincreasing by
/// construction. The proximal step composes the elementwise soft threshold
/// (λ₁/L) followed by the group soft threshold (λ_G/L); the step size is
/// 1/L with L the largest eigenvalue of MᵀM plus 2γ when the temporal
/// tether is active.
pub fn prox_group_lasso(
    z: &Sketch,
    m: &DMatrix<f64>,
    config: &RecoveryConfig,
    groups: &[Vec<usize>],
    warm_start: Option<&[f64]>,
    previous_alpha: Option<&[f64]>,
) -> Result<RecoveryResult> {
    config.validate()?;
    let g = m.ncols();
    if z.len() != m.nrows() {
        return Err(Error::invalid(format!(
            "sketch length {} does not match matrix rows {}",
            z.len(),
            m.nrows()
        )));
    }
    if let Some(w) = warm_start {
        if w.len() != g {
            return Err(Error::invalid("warm start length mismatch"));
        }
    }
    if let Some(p) = previous_alpha {
        if p.len() != g {
            return Err(Error::invalid("previous_alpha length mismatch"));
        }
    }
    family_groups_check(groups, g)?;

    let zv = z.as_vector();
    let prev = previous_alpha.map(DVector::from_column_slice);
    let gamma = if prev.is_some() { config.gamma_temporal } else { 0.0 };
    let lip = gram_spectral_norm(m, 100, 1e-10) + 2.0 * gamma;
    if lip <= 0.0 {
        // Zero operator and no tether: any coefficient only adds penalty.
        let alpha = vec![0.0; g];
        let support = threshold_support(&alpha, config)?;
        return Ok(RecoveryResult {
            residual_norm: zv.norm(),
            iterations: 0,
            measurements_used: z.len(),
            objective_trace: vec![group_lasso_objective(
                &zv,
                m,
                &DVector::zeros(g),
                config,
                groups,
                prev.as_ref(),
            )],
            support,
            alpha_hat: alpha,
            rank_deficient: false,
        })
    }
    let step = 1.0 / lip;

    let objective = |a: &DVector<f64>| group_lasso_objective(&zv, m, a, config, groups, prev.as_ref());
    let gradient = |a: &DVector<f64>| -> DVector<f64> {
        let mut grad = m.transpose() * (m * a - &zv);
        if let Some(p) = &prev {
            grad += 2.0 * gamma * (a - p);
        }
        grad
    };

    let mut x = warm_start
        .map(DVector::from_column_slice)
        .unwrap_or_else(|| DVector::zeros(g));
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut fx = objective(&x);
    let mut trace = vec![fx];
    let mut iterations = 0;

    for iter in 0..config.max_iterations {
        iterations = iter + 1;
        let candidate = prox_step(&(&y - step * gradient(&y)), step, config, groups);
        if candidate.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure {
                iteration: iter,
                message: "proximal iterate is not finite".into(),
            });
        }
        let fc = objective(&candidate);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        // Monotone acceptance: x stays the best iterate seen.
        let (x_next, f_next) = if fc <= fx { (candidate.clone(), fc) } else { (x.clone(), fx) };
        y = &x_next + (t / t_next) * (&candidate - &x_next) + ((t - 1.0) / t_next) * (&x_next - &x);
        let rel_change = (fx - f_next).abs() / fx.abs().max(1e-30);
        x = x_next;
        fx = f_next;
        t = t_next;
        trace.push(fx);
        if rel_change < config.tolerance {
            break;
        }
    }

    let alpha: Vec<f64> = x.iter().copied().collect();
    let support = threshold_support(&alpha, config)?;
    Ok(RecoveryResult {
        residual_norm: (&zv - m * &x).norm(),
        iterations,
        measurements_used: z.len(),
        objective_trace: trace,
        support,
        alpha_hat: alpha,
        rank_deficient: false,
    })
}

fn family_groups_check(groups: &[Vec<usize>], g: usize) -> Result<()> {
    for grp in groups {
        if grp.iter().any(|&id| id >= g) {
            return Err(Error::invalid("group index out of range"));
        }
    }
    Ok(())
}

/// Composed proximal map: elementwise soft threshold, then per-group
/// soft threshold.
fn prox_step(v: &DVector<f64>, step: f64, config: &RecoveryConfig, groups: &[Vec<usize>]) -> DVector<f64> {
    let mut out = v.clone();
    if config.lambda1 > 0.0 {
        let thr = config.lambda1 * step;
        for val in out.iter_mut() {
            *val = val.signum() * (val.abs() - thr).max(0.0);
        }
    }
    if config.lambda_group > 0.0 {
        let thr = config.lambda_group * step;
        for grp in groups {
            let norm = grp.iter().map(|&id| out[id] * out[id]).sum::<f64>().sqrt();
            let scale = if norm > thr { (norm - thr) / norm } else { 0.0 };
            for &id in grp {
                out[id] *= scale;
            }
        }
    }
    out
}

/// Keep entries with `|α| > τ`, then project the survivors into the family.
pub fn threshold_support(alpha: &[f64], config: &RecoveryConfig) -> Result<SupportSet> {
    let survivors: Vec<bool> = alpha.iter().map(|v| v.abs() > config.tau).collect();
    if survivors.iter().all(|s| !s) {
        return Ok(SupportSet::empty());
    }
    project_support_restricted(alpha, &config.family, Some(&survivors))
}

/// Decode by exhaustive least squares over an explicit support pool,
/// picking the support with the smallest refit residual (ties by pool
/// order). This is the family-restricted search used when a prompt narrows
/// the candidate supports to a finite bank, and the oracle decoder on
/// small instances.
pub fn min_residual_decode(
    z: &Sketch,
    m: &DMatrix<f64>,
    pool: &[SupportSet],
) -> Result<RecoveryResult> {
    if pool.is_empty() {
        return Err(Error::invalid("support pool is empty"));
    }
    if z.len() != m.nrows() {
        return Err(Error::invalid("sketch length does not match matrix rows"));
    }
    let zv = z.as_vector();
    let mut best: Option<(f64, usize, DVector<f64>, bool)> = None;
    for (idx, support) in pool.iter().enumerate() {
        let ids: Vec<usize> = support.members().to_vec();
        let sub = columns(m, &ids);
        let (c, deficient) = lstsq_min_norm(&sub, &zv)?;
        let resid = (&zv - sub * &c).norm();
        if best.as_ref().map_or(true, |(br, _, _, _)| resid < *br) {
            best = Some((resid, idx, c, deficient));
        }
    }
    let (resid, idx, coef, deficient) = best.expect("non-empty pool");
    let mut alpha = vec![0.0; m.ncols()];
    for (slot, &id) in pool[idx].members().iter().enumerate() {
        alpha[id] = coef[slot];
    }
    Ok(RecoveryResult {
        support: pool[idx].clone(),
        residual_norm: resid,
        iterations: pool.len(),
        measurements_used: z.len(),
        objective_trace: vec![resid],
        alpha_hat: alpha,
        rank_deficient: deficient,
    })
}

// ---------------------------------------------------------------------------
// Incremental recovery
// ---------------------------------------------------------------------------

/// Warm-started incremental recovery.
///
/// Stage one refits the previous support and returns early when the refit
/// already explains the sketch to `tolerance·‖z‖`. Stage two runs OMP on
/// the refit residual to add at most `delta_max` atoms, drops up to
/// `delta_max` refit coefficients that fall to `τ` or below, and enforces
/// family admissibility. Total support change is capped at `2·delta_max`.
pub fn recover_incremental(
    z: &Sketch,
    m: &DMatrix<f64>,
    previous: &RecoveryResult,
    delta_max: usize,
    config: &RecoveryConfig,
) -> Result<RecoveryResult> {
    config.validate()?;
    let g = m.ncols();
    if z.len() != m.nrows() {
        return Err(Error::invalid("sketch length does not match matrix rows"));
    }
    let zv = z.as_vector();
    let prev_ids: Vec<usize> = previous.support.members().to_vec();

    // Stage 1: refit on the inherited support.
    let (refit, mut rank_deficient) = if prev_ids.is_empty() {
        (DVector::zeros(0), false)
    } else {
        lstsq_min_norm(&columns(m, &prev_ids), &zv)?
    };
    let residual = if prev_ids.is_empty() {
        zv.clone()
    } else {
        &zv - columns(m, &prev_ids) * &refit
    };
    if residual.norm() <= config.tolerance * zv.norm() || delta_max == 0 {
        let mut alpha = vec![0.0; g];
        for (slot, &id) in prev_ids.iter().enumerate() {
            alpha[id] = refit[slot];
        }
        return Ok(RecoveryResult {
            residual_norm: residual.norm(),
            iterations: 0,
            measurements_used: z.len(),
            objective_trace: vec![residual.norm()],
            support: previous.support.clone(),
            alpha_hat: alpha,
            rank_deficient,
        });
    }

    // Stage 2: search for additions on the residual, previous atoms excluded.
    let residual_sketch = Sketch { values: residual.iter().copied().collect(), noise_sigma: z.noise_sigma };
    let additions = omp_structured_excluding(
        &residual_sketch,
        m,
        delta_max,
        &FeasibleFamily::unconstrained(delta_max),
        &prev_ids,
    )?;
    rank_deficient |= additions.rank_deficient;

    let mut union: Vec<usize> = prev_ids.clone();
    union.extend(additions.support.iter());
    union.sort_unstable();
    union.dedup();

    let sub = columns(m, &union);
    let (coef, deficient) = lstsq_min_norm(&sub, &zv)?;
    rank_deficient |= deficient;

    // Drop small refit coefficients, at most delta_max of them, smallest
    // magnitudes first.
    let mut drop_candidates: Vec<(f64, usize)> = union
        .iter()
        .enumerate()
        .filter(|(slot, _)| coef[*slot].abs() <= config.tau)
        .map(|(slot, &id)| (coef[slot].abs(), id))
        .collect();
    drop_candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let dropped: Vec<usize> = drop_candidates.iter().take(delta_max).map(|&(_, id)| id).collect();

    let mut kept: Vec<usize> = union.iter().copied().filter(|id| !dropped.contains(id)).collect();

    // Family admissibility: trim smallest coefficients until admissible.
    let coef_of = |id: usize| {
        let slot = union.binary_search(&id).expect("member of union");
        coef[slot].abs()
    };
    while !config.family.admits(&SupportSet::new(kept.clone()), g) && !kept.is_empty() {
        let (_, worst) = kept
            .iter()
            .map(|&id| (coef_of(id), id))
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)))
            .expect("non-empty");
        kept.retain(|&id| id != worst);
    }

    // Change budget: never move more than 2·delta_max atoms in one step.
    let prev_set = SupportSet::new(prev_ids.clone());
    let mut kept_set = SupportSet::new(kept.clone());
    if kept_set.symmetric_difference_size(&prev_set) > 2 * delta_max {
        let mut added: Vec<usize> =
            kept.iter().copied().filter(|id| !prev_set.contains(*id)).collect();
        added.sort_by(|&a, &b| coef_of(a).partial_cmp(&coef_of(b)).unwrap().then(a.cmp(&b)));
        while kept_set.symmetric_difference_size(&prev_set) > 2 * delta_max && !added.is_empty() {
            let discard = added.remove(0);
            kept.retain(|&id| id != discard);
            kept_set = SupportSet::new(kept.clone());
        }
    }

    kept.sort_unstable();
    let final_sub = columns(m, &kept);
    let (final_coef, deficient) = lstsq_min_norm(&final_sub, &zv)?;
    rank_deficient |= deficient;
    let final_residual = &zv - final_sub * &final_coef;

    let mut alpha = vec![0.0; g];
    for (slot, &id) in kept.iter().enumerate() {
        alpha[id] = final_coef[slot];
    }
    Ok(RecoveryResult {
        residual_norm: final_residual.norm(),
        iterations: additions.iterations,
        measurements_used: z.len(),
        objective_trace: vec![residual.norm(), final_residual.norm()],
        support: SupportSet::new(kept),
        alpha_hat: alpha,
        rank_deficient,
    })
}

// ---------------------------------------------------------------------------
// Error curve
// ---------------------------------------------------------------------------

/// Isotonic (nonincreasing) recovery-error curve over measurement budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub budgets: Vec<f64>,
    pub values: Vec<f64>,
}

impl ErrorCurve {
    /// Piecewise-linear interpolation with constant extrapolation.
    pub fn eval(&self, m: f64) -> f64 {
        let n = self.budgets.len();
        if m <= self.budgets[0] {
            return self.values[0];
        }
        if m >= self.budgets[n - 1] {
            return self.values[n - 1];
        }
        let hi = self.budgets.partition_point(|&b| b < m).min(n - 1);
        let lo = hi - 1;
        let w = (m - self.budgets[lo]) / (self.budgets[hi] - self.budgets[lo]);
        self.values[lo] + w * (self.values[hi] - self.values[lo])
    }

    /// Centered finite-difference slope at `m_base` on the fitted curve,
    /// one-sided at the boundary. Nonpositive by construction.
    pub fn slope_at(&self, m_base: f64) -> f64 {
        let n = self.budgets.len();
        let hi_idx = self.budgets.partition_point(|&b| b < m_base);
        let (lo, hi) = if hi_idx == 0 {
            (0, 1)
        } else if hi_idx >= n {
            (n - 2, n - 1)
        } else if (self.budgets[hi_idx] - m_base).abs() < 1e-12 && hi_idx + 1 < n && hi_idx > 0 {
            (hi_idx - 1, hi_idx + 1)
        } else if (self.budgets[hi_idx - 1] - m_base).abs() < 1e-12 && hi_idx - 1 > 0 {
            (hi_idx - 2, hi_idx)
        } else {
            (hi_idx - 1, hi_idx)
        };
        let slope = (self.values[hi] - self.values[lo]) / (self.budgets[hi] - self.budgets[lo]);
        slope.min(0.0)
    }
}

/// Fit the monotone error curve from (budget, error) trials.
///
/// Errors are averaged per distinct budget and regressed to the best
/// nonincreasing fit by pool-adjacent-violators.
pub fn fit_error_curve(trials: &[(usize, f64)]) -> Result<ErrorCurve> {
    use std::collections::BTreeMap;
    let mut grouped: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for &(m, e) in trials {
        let entry = grouped.entry(m).or_insert((0.0, 0));
        entry.0 += e;
        entry.1 += 1;
    }
    if grouped.len() < 3 {
        return Err(Error::invalid("fit_error_curve needs at least 3 distinct budgets"));
    }
    let budgets: Vec<f64> = grouped.keys().map(|&m| m as f64).collect();
    let means: Vec<f64> = grouped.values().map(|&(s, c)| s / c as f64).collect();
    let weights: Vec<f64> = grouped.values().map(|&(_, c)| c as f64).collect();
    Ok(ErrorCurve { values: pava_nonincreasing(&means, &weights), budgets })
}

/// Weighted pool-adjacent-violators for a nonincreasing fit.
fn pava_nonincreasing(y: &[f64], w: &[f64]) -> Vec<f64> {
    // Standard PAVA computes a nondecreasing fit; run it on negated values.
    let mut blocks: Vec<(f64, f64, usize)> = Vec::new(); // (mean, weight, count)
    for (v, &wi) in y.iter().map(|v| -v).zip(w) {
        blocks.push((v, wi, 1));
        while blocks.len() > 1 {
            let last = blocks[blocks.len() - 1];
            let prev = blocks[blocks.len() - 2];
            if prev.0 <= last.0 {
                break;
            }
            blocks.pop();
            blocks.pop();
            let weight = prev.1 + last.1;
            let mean = (prev.0 * prev.1 + last.0 * last.1) / weight;
            blocks.push((mean, weight, prev.2 + last.2));
        }
    }
    let mut out = Vec::with_capacity(y.len());
    for (mean, _, count) in blocks {
        for _ in 0..count {
            out.push(-mean);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{build_synthetic_dictionary, DictionaryEnsemble};
    use crate::seed::rng_from;
    use crate::sensing::{draw_operator, measure, Ensemble};
    use itertools::Itertools;
    use rand::seq::index::sample as index_sample;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn sketch(values: Vec<f64>) -> Sketch {
        Sketch { values, noise_sigma: 0.0 }
    }

    fn plant(g: usize, support: &[usize], rng: &mut impl Rng) -> Vec<f64> {
        let mut alpha = vec![0.0; g];
        for &id in support {
            let mag = 1.0 + rng.gen::<f64>();
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            alpha[id] = sign * mag;
        }
        alpha
    }

    #[test]
    fn effective_matrix_examples() {
        let dict = build_synthetic_dictionary(6, 6, 2, DictionaryEnsemble::IdentityPadded, 0).unwrap();
        let a = MeasurementOperator {
            entries: 2.0 * DMatrix::<f64>::identity(6, 6),
            ensemble: Ensemble::Gaussian,
            seed: 0,
        };
        let m = effective_matrix(&a, &dict).unwrap();
        assert_eq!(m, 2.0 * DMatrix::<f64>::identity(6, 6));

        let dict2 = build_synthetic_dictionary(8, 10, 2, DictionaryEnsemble::GaussianNormalized, 1).unwrap();
        let a2 = draw_operator(Ensemble::Gaussian, 5, 8, 2).unwrap();
        let m2 = effective_matrix(&a2, &dict2).unwrap();
        for gidx in 0..10 {
            let direct = &a2.entries * dict2.entries.column(gidx);
            assert!((m2.column(gidx) - direct).norm() < 1e-12);
        }
        // Dimension mismatch rejected.
        let a3 = draw_operator(Ensemble::Gaussian, 5, 9, 2).unwrap();
        assert!(effective_matrix(&a3, &dict2).is_err());
    }

    #[test]
    fn omp_identity_single_atom() {
        let m = DMatrix::<f64>::identity(4, 4);
        let z = sketch(vec![0.0, 5.0, 0.0, 0.0]);
        let r = omp_structured(&z, &m, 1, &FeasibleFamily::unconstrained(1)).unwrap();
        assert_eq!(r.support.members(), &[1]);
        assert!((r.alpha_hat[1] - 5.0).abs() < 1e-12);
        assert!(r.residual_norm < 1e-12);
    }

    #[test]
    fn omp_matches_exhaustive_least_squares_oracle() {
        let g = 12;
        let k = 2;
        let mut rng = rng_from(&[7]);
        let a = draw_operator(Ensemble::Gaussian, 8, g, 7).unwrap();
        let support = {
            let mut ids = index_sample(&mut rng, g, k).into_vec();
            ids.sort_unstable();
            ids
        };
        let alpha = plant(g, &support, &mut rng);
        let z_vec = &a.entries * DVector::from_column_slice(&alpha);
        let z = sketch(z_vec.iter().copied().collect());

        let r = omp_structured(&z, &a.entries, k, &FeasibleFamily::unconstrained(k)).unwrap();

        // Oracle: best support among all C(12, 2) least-squares fits.
        let mut best_ids = vec![];
        let mut best_resid = f64::INFINITY;
        for ids in (0..g).combinations(k) {
            let sub = columns(&a.entries, &ids);
            let (c, _) = lstsq_min_norm(&sub, &z_vec).unwrap();
            let resid = (&z_vec - sub * c).norm();
            if resid < best_resid {
                best_resid = resid;
                best_ids = ids;
            }
        }
        assert_eq!(r.support.members(), best_ids.as_slice());
    }

    #[test]
    fn omp_exact_recovery_under_coherence_condition() {
        use crate::sensing::{coherence_sparsity_bound, mutual_coherence};
        let mut failures = 0;
        for trial in 0..40u64 {
            let mut rng = rng_from(&[100, trial]);
            let g = 24 + (trial as usize % 3) * 8;
            let m_rows = 2 * g;
            let a = draw_operator(Ensemble::Gaussian, m_rows, g, 1000 + trial).unwrap();
            let mu = mutual_coherence(&a.entries).unwrap();
            let k_max = coherence_sparsity_bound(mu).unwrap();
            if k_max == 0 {
                continue;
            }
            let k = k_max.min(4);
            let mut ids = index_sample(&mut rng, g, k).into_vec();
            ids.sort_unstable();
            let alpha = plant(g, &ids, &mut rng);
            let z_vec = &a.entries * DVector::from_column_slice(&alpha);
            let z = sketch(z_vec.iter().copied().collect());
            let r = omp_structured(&z, &a.entries, k, &FeasibleFamily::unconstrained(k)).unwrap();
            if r.support.members() != ids.as_slice() {
                failures += 1;
            }
        }
        assert_eq!(failures, 0, "coherence-guaranteed instances must all recover");
    }

    #[test]
    fn omp_residual_strictly_decreases() {
        let mut rng = rng_from(&[55]);
        let a = draw_operator(Ensemble::Gaussian, 30, 40, 5).unwrap();
        let ids = vec![3, 11, 25, 33];
        let alpha = plant(40, &ids, &mut rng);
        let z_vec = &a.entries * DVector::from_column_slice(&alpha);
        let z = Sketch { values: z_vec.iter().copied().collect(), noise_sigma: 0.0 };
        let r = omp_structured(&z, &a.entries, 6, &FeasibleFamily::unconstrained(6)).unwrap();
        for w in r.objective_trace.windows(2) {
            assert!(w[1] < w[0], "residual trace must strictly decrease: {:?}", r.objective_trace);
        }
    }

    #[test]
    fn omp_group_family_selects_whole_groups() {
        let mut rng = rng_from(&[91]);
        let dict = build_synthetic_dictionary(24, 12, 3, DictionaryEnsemble::GaussianNormalized, 4).unwrap();
        let a = draw_operator(Ensemble::Gaussian, 20, 24, 6).unwrap();
        let m = effective_matrix(&a, &dict).unwrap();
        // Truth lives on group 2 = {6, 7, 8}.
        let alpha = plant(12, &[6, 7, 8], &mut rng);
        let z_vec = &m * DVector::from_column_slice(&alpha);
        let z = sketch(z_vec.iter().copied().collect());
        let family = dict.group_family(1);
        let r = omp_structured(&z, &m, 3, &family).unwrap();
        assert_eq!(r.support.members(), &[6, 7, 8]);
        assert!(family.admits(&r.support, 12));
    }

    #[test]
    fn prox_full_shrinkage_returns_zero() {
        let a = draw_operator(Ensemble::Gaussian, 10, 8, 3).unwrap();
        let mut rng = rng_from(&[2]);
        let u: Vec<f64> = (0..10).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let z = sketch(u);
        let zv = z.as_vector();
        let linf = (a.entries.transpose() * &zv).amax();
        let config = RecoveryConfig {
            lambda1: linf * 1.01,
            ..RecoveryConfig::top_k(8, 0.0)
        };
        let r = prox_group_lasso(&z, &a.entries, &config, &[], None, None).unwrap();
        assert!(r.alpha_hat.iter().all(|&v| v == 0.0), "{:?}", r.alpha_hat);
    }

    #[test]
    fn prox_scalar_soft_threshold_closed_form() {
        let m = DMatrix::from_row_slice(1, 1, &[1.0]);
        let z = sketch(vec![3.0]);
        let config = RecoveryConfig { lambda1: 1.0, max_iterations: 2000, ..RecoveryConfig::top_k(1, 0.0) };
        let r = prox_group_lasso(&z, &m, &config, &[], None, None).unwrap();
        assert!((r.alpha_hat[0] - 2.0).abs() < 1e-6, "got {}", r.alpha_hat[0]);
    }

    #[test]
    fn prox_huge_temporal_penalty_pins_previous() {
        let a = draw_operator(Ensemble::Gaussian, 12, 6, 9).unwrap();
        let prev = vec![0.5, -1.0, 0.0, 2.0, 0.0, 0.25];
        let z = measure(&a, &[1.0; 6], 0.0, 0).unwrap();
        // The sketch here is of a different vector; the tether dominates.
        let mz = &a.entries; // alias for clarity
        let config = RecoveryConfig {
            gamma_temporal: 1e6,
            max_iterations: 4000,
            tolerance: 1e-14,
            ..RecoveryConfig::top_k(6, 0.0)
        };
        let r = prox_group_lasso(&z, mz, &config, &[], None, Some(&prev)).unwrap();
        for (got, want) in r.alpha_hat.iter().zip(&prev) {
            assert!((got - want).abs() <= 1e-3 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn prox_trace_nonincreasing_and_beats_truth_objective() {
        let mut rng = rng_from(&[11]);
        let g = 80;
        let a = draw_operator(Ensemble::Gaussian, 40, g, 11).unwrap();
        let mut ids = index_sample(&mut rng, g, 5).into_vec();
        ids.sort_unstable();
        let alpha_true = plant(g, &ids, &mut rng);
        let mut z = measure(&a, &alpha_true, 0.0, 0).unwrap();
        let mut noise_rng = rng_from(&[12]);
        for v in z.values.iter_mut() {
            *v += 0.01 * noise_rng.sample::<f64, _>(StandardNormal);
        }
        let groups: Vec<Vec<usize>> = (0..g / 4).map(|b| (4 * b..4 * b + 4).collect()).collect();
        let config = RecoveryConfig {
            lambda1: 0.01,
            lambda_group: 0.01,
            tau: 0.2,
            max_iterations: 500,
            tolerance: 1e-12,
            gamma_temporal: 0.0,
            family: FeasibleFamily::unconstrained(8),
        };
        let r = prox_group_lasso(&z, &a.entries, &config, &groups, None, None).unwrap();
        for w in r.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "objective increased: {w:?}");
        }
        let zv = z.as_vector();
        let obj_truth = group_lasso_objective(
            &zv,
            &a.entries,
            &DVector::from_column_slice(&alpha_true),
            &config,
            &groups,
            None,
        );
        let last = *r.objective_trace.last().unwrap();
        assert!(last <= obj_truth, "final {last} should not exceed truth objective {obj_truth}");
    }

    #[test]
    fn threshold_examples() {
        let config = RecoveryConfig { tau: 0.1, ..RecoveryConfig::top_k(3, 0.1) };
        let s = threshold_support(&[0.05, 2.0, -1.0, 0.01], &config).unwrap();
        assert_eq!(s.members(), &[1, 2]);

        // tau = 0 on a dense vector reduces to plain projection.
        let config0 = RecoveryConfig::top_k(2, 0.0);
        let alpha = [0.3, -0.5, 0.2, 0.9];
        let s0 = threshold_support(&alpha, &config0).unwrap();
        let p0 = crate::dictionary::project_support(&alpha, &config0.family).unwrap();
        assert_eq!(s0, p0);

        // Everything below tau: empty support.
        let cfg = RecoveryConfig { tau: 1.0, ..RecoveryConfig::top_k(3, 1.0) };
        assert!(threshold_support(&[0.5, -0.99, 0.2], &cfg).unwrap().is_empty());
    }

    #[test]
    fn incremental_keeps_unchanged_support() {
        let mut rng = rng_from(&[31]);
        let g = 32;
        let a = draw_operator(Ensemble::Gaussian, 24, g, 31).unwrap();
        let ids = vec![2, 9, 17, 30];
        let alpha = plant(g, &ids, &mut rng);
        let z = measure(&a, &alpha, 0.0, 0).unwrap();
        let config = RecoveryConfig::top_k(4, 0.5);
        let first = RecoveryResult {
            alpha_hat: alpha.clone(),
            support: SupportSet::new(ids.clone()),
            residual_norm: 0.0,
            iterations: 0,
            measurements_used: 24,
            objective_trace: vec![],
            rank_deficient: false,
        };
        let second = recover_incremental(&z, &a.entries, &first, 2, &config).unwrap();
        assert_eq!(second.support, first.support);
        assert_eq!(second.iterations, 0, "stage-1 early exit expected");
    }

    #[test]
    fn incremental_tracks_single_swap() {
        let g = 64;
        let k = 6;
        let mut success = 0;
        let trials = 50;
        for trial in 0..trials {
            let mut rng = rng_from(&[77, trial]);
            let a = draw_operator(Ensemble::Gaussian, 20, g, 500 + trial).unwrap();
            let mut ids = index_sample(&mut rng, g, k).into_vec();
            ids.sort_unstable();
            let alpha_prev = plant(g, &ids, &mut rng);
            // Swap one atom for a fresh one.
            let mut new_ids = ids.clone();
            let slot = rng.gen_range(0..k);
            let replacement = loop {
                let cand = rng.gen_range(0..g);
                if !new_ids.contains(&cand) {
                    break cand;
                }
            };
            new_ids[slot] = replacement;
            new_ids.sort_unstable();
            let mut alpha_new = alpha_prev.clone();
            alpha_new[ids[slot]] = 0.0;
            alpha_new[replacement] = 1.5;
            let z = measure(&a, &alpha_new, 0.0, 0).unwrap();
            let config = RecoveryConfig::top_k(k, 0.5);
            let previous = RecoveryResult {
                alpha_hat: alpha_prev.clone(),
                support: SupportSet::new(ids.clone()),
                residual_norm: 0.0,
                iterations: 0,
                measurements_used: 20,
                objective_trace: vec![],
                rank_deficient: false,
            };
            let r = recover_incremental(&z, &a.entries, &previous, 1, &config).unwrap();
            if r.support.members() == new_ids.as_slice() {
                success += 1;
            }
            assert!(
                r.support.symmetric_difference_size(&previous.support) <= 2,
                "change budget violated"
            );
        }
        assert!(success as f64 >= 0.95 * trials as f64, "only {success}/{trials} swaps tracked");
    }

    #[test]
    fn incremental_delta_zero_freezes_support() {
        let mut rng = rng_from(&[41]);
        let g = 16;
        let a = draw_operator(Ensemble::Gaussian, 12, g, 41).unwrap();
        let alpha = plant(g, &[1, 5], &mut rng);
        let z = measure(&a, &alpha, 0.0, 0).unwrap();
        let config = RecoveryConfig::top_k(2, 0.5);
        let previous = RecoveryResult {
            alpha_hat: vec![0.0; g],
            support: SupportSet::new(vec![0, 3]),
            residual_norm: 0.0,
            iterations: 0,
            measurements_used: 12,
            objective_trace: vec![],
            rank_deficient: false,
        };
        let r = recover_incremental(&z, &a.entries, &previous, 0, &config).unwrap();
        assert_eq!(r.support, previous.support);
    }

    #[test]
    fn error_curve_interpolates_and_differentiates() {
        // Nonincreasing input: fitted curve interpolates the means.
        let trials: Vec<(usize, f64)> = vec![(10, 0.1), (20, 0.05), (40, 0.025), (80, 0.0125)];
        let curve = fit_error_curve(&trials).unwrap();
        assert_eq!(curve.values, vec![0.1, 0.05, 0.025, 0.0125]);

        // Constant errors: slope 0.
        let flat = fit_error_curve(&[(10, 0.5), (20, 0.5), (40, 0.5)]).unwrap();
        assert_eq!(flat.slope_at(20.0), 0.0);

        // e(m) = 1/m sampled at {10, 20, 40, 80}: centered slope at 20 is
        // (1/40 - 1/10) / 30 = -1/400 exactly on this grid.
        let inv: Vec<(usize, f64)> = [10, 20, 40, 80].iter().map(|&m| (m, 1.0 / m as f64)).collect();
        let c = fit_error_curve(&inv).unwrap();
        let slope = c.slope_at(20.0);
        let analytic = -1.0 / 400.0;
        assert!(
            (slope - analytic).abs() <= 0.3 * analytic.abs(),
            "slope {slope} vs analytic {analytic}"
        );
        assert!(slope <= 0.0);
        assert!(fit_error_curve(&[(10, 1.0), (20, 0.5)]).is_err());
    }

    #[test]
    fn error_curve_pools_violations() {
        let trials = vec![(10, 0.2), (20, 0.5), (40, 0.1)];
        let curve = fit_error_curve(&trials).unwrap();
        // First two pooled to their mean, monotone nonincreasing overall.
        assert!((curve.values[0] - 0.35).abs() < 1e-12);
        assert!((curve.values[1] - 0.35).abs() < 1e-12);
        for w in curve.values.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn noise_stability_error_grows_at_most_linearly() {
        let g = 48;
        let k = 4;
        let etas = [0.01, 0.02, 0.04, 0.08];
        let mut mean_err = [0.0f64; 4];
        let seeds = 30;
        for trial in 0..seeds {
            let mut rng = rng_from(&[900, trial]);
            let a = draw_operator(Ensemble::Gaussian, 32, g, 900 + trial).unwrap();
            let mut ids = index_sample(&mut rng, g, k).into_vec();
            ids.sort_unstable();
            let alpha = plant(g, &ids, &mut rng);
            let clean = &a.entries * DVector::from_column_slice(&alpha);
            let mut dir: DVector<f64> =
                DVector::from_fn(32, |_, _| rng.sample::<f64, _>(StandardNormal));
            dir /= dir.norm();
            for (ei, &eta) in etas.iter().enumerate() {
                let noisy = &clean + eta * clean.norm() * &dir;
                let z = Sketch { values: noisy.iter().copied().collect(), noise_sigma: 0.0 };
                let r = omp_structured(&z, &a.entries, k, &FeasibleFamily::unconstrained(k)).unwrap();
                mean_err[ei] += r.coefficient_error(&alpha) / seeds as f64;
            }
        }
        for pair in mean_err.windows(2) {
            let ratio = pair[1] / pair[0];
            assert!(ratio <= 2.5, "error ratio {ratio} exceeds linear-growth budget");
        }
    }

    #[test]
    fn support_recovered_when_margin_dominates_error() {
        // Corollary consequence: with coefficient error B and threshold tau
        // in (B, alpha_min - B), thresholding recovers the exact support.
        let g = 40;
        let k = 3;
        for trial in 0..20u64 {
            let mut rng = rng_from(&[333, trial]);
            let a = draw_operator(Ensemble::Gaussian, 30, g, 333 + trial).unwrap();
            let mut ids = index_sample(&mut rng, g, k).into_vec();
            ids.sort_unstable();
            let alpha = plant(g, &ids, &mut rng); // magnitudes >= 1
            let clean = &a.entries * DVector::from_column_slice(&alpha);
            let mut dir: DVector<f64> =
                DVector::from_fn(30, |_, _| rng.sample::<f64, _>(StandardNormal));
            dir /= dir.norm();
            let noisy = &clean + 0.02 * clean.norm() * &dir;
            let z = Sketch { values: noisy.iter().copied().collect(), noise_sigma: 0.0 };
            let r = omp_structured(&z, &a.entries, k, &FeasibleFamily::unconstrained(k)).unwrap();
            let err_inf = r
                .alpha_hat
                .iter()
                .zip(&alpha)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            if err_inf < 0.5 {
                let config = RecoveryConfig { tau: 0.5, ..RecoveryConfig::top_k(k, 0.5) };
                let s = threshold_support(&r.alpha_hat, &config).unwrap();
                assert_eq!(s.members(), ids.as_slice());
            }
        }
    }
}
