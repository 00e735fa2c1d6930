//! Synthetic ground-truth processes and the closed sense → recover →
//! execute → entropy loop.
//!
//! The latent feature at each step is exactly the dictionary image of the
//! planted coefficients (plus an optional bounded mismatch), the entropy
//! channel is linear-Lipschitz in the recovery error, and every random draw
//! is derived from explicit seeds so traces replay bit-identically.

use serde::{Deserialize, Serialize};

use rand::seq::index::sample as index_sample;
use rand::Rng;

use crate::controller::{adapt_budget, sensing_cost, ControllerConfig};
use crate::dictionary::{
    support_drift, support_prf, FeasibleFamily, StructuredDictionary, SupportSet,
};
use crate::error::{Error, Result};
use crate::recovery::{
    effective_matrix, prox_group_lasso, recover_incremental, RecoveryConfig, RecoveryResult,
};
use crate::seed::{derive_seed, rng_from};
use crate::sensing::{bank_step_seed, draw_operator, measure, Ensemble};

// ---------------------------------------------------------------------------
// Process types
// ---------------------------------------------------------------------------

/// A prompt family: the support pool the truth is drawn from, plus the
/// family's measurement-bank seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptFamily {
    pub family_id: u64,
    pub admissible: FeasibleFamily,
    /// Categorical weights over a motif pool; uniform when absent. Ignored
    /// for parametric families.
    pub pool_weights: Option<Vec<f64>>,
    pub measurement_bank_seed: u64,
}

impl PromptFamily {
    pub fn uniform(family_id: u64, admissible: FeasibleFamily, bank_seed: u64) -> Self {
        PromptFamily { family_id, admissible, pool_weights: None, measurement_bank_seed: bank_seed }
    }

    pub fn validate(&self, g: usize) -> Result<()> {
        self.admissible.validate(g)?;
        if let (Some(w), FeasibleFamily::MotifLibrary { motifs }) =
            (&self.pool_weights, &self.admissible)
        {
            if w.len() != motifs.len() {
                return Err(Error::invalid("pool weights must match motif count"));
            }
            if w.iter().any(|&x| x < 0.0) {
                return Err(Error::invalid("pool weights must be nonnegative"));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("pool weights must sum to 1"));
            }
        }
        Ok(())
    }
}

/// Synthetic ground-truth support process with temporal drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthProcess {
    pub g: usize,
    pub d: usize,
    pub k: usize,
    pub alpha_min: f64,
    /// Probability each support atom is swapped out per step.
    pub drift_rate: f64,
    /// When set, exactly this many atoms swap per step instead of the
    /// stochastic rule. Used by drift-controlled experiments.
    #[serde(default)]
    pub exact_swaps: Option<usize>,
    pub noise_sigma: f64,
    /// Off-support energy added to the latent feature (Assumption-1 style
    /// dictionary mismatch); zero by default.
    #[serde(default)]
    pub mismatch_amplitude: f64,
    pub family: PromptFamily,
    pub horizon: usize,
    pub seed: u64,
}

impl GroundTruthProcess {
    pub fn validate(&self) -> Result<()> {
        if self.g == 0 || self.d == 0 || self.horizon == 0 {
            return Err(Error::invalid("process dimensions must be positive"));
        }
        if self.k == 0 || self.k > self.g {
            return Err(Error::invalid("process requires 1 <= k <= G"));
        }
        if !(self.alpha_min > 0.0) {
            return Err(Error::invalid("alpha_min must be positive"));
        }
        if !(0.0..=1.0).contains(&self.drift_rate) {
            return Err(Error::invalid("drift_rate must lie in [0, 1]"));
        }
        if self.noise_sigma < 0.0 || self.mismatch_amplitude < 0.0 {
            return Err(Error::invalid("noise levels must be nonnegative"));
        }
        self.family.validate(self.g)
    }
}

/// Linear-Lipschitz synthetic entropy channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyChannel {
    pub h_base: f64,
    pub l_h: f64,
    /// ln of the synthetic vocabulary size; outputs clip to [0, h_cap].
    pub h_cap: f64,
    pub noise_amplitude: f64,
}

impl EntropyChannel {
    pub fn validate(&self) -> Result<()> {
        if self.h_base < 0.0 || self.l_h < 0.0 || self.noise_amplitude < 0.0 {
            return Err(Error::invalid("entropy channel parameters must be nonnegative"));
        }
        if !(self.h_cap > 0.0) {
            return Err(Error::invalid("h_cap must be positive"));
        }
        Ok(())
    }
}

/// Synthetic predictive entropy after a step with recovery error `e`:
/// `clip(H_base + L_H e + noise, 0, H_cap)` with noise uniform in
/// ±noise_amplitude seeded by (seed, t).
pub fn synth_entropy(e: f64, channel: &EntropyChannel, seed: u64, t: usize) -> f64 {
    let noise = if channel.noise_amplitude > 0.0 {
        let mut rng = rng_from(&[0x656e74, seed, t as u64]);
        channel.noise_amplitude * (2.0 * rng.gen::<f64>() - 1.0)
    } else {
        0.0
    };
    (channel.h_base + channel.l_h * e + noise).clamp(0.0, channel.h_cap)
}

// ---------------------------------------------------------------------------
// Ground-truth generation
// ---------------------------------------------------------------------------

/// Per-step planted truth: support and full-length coefficient vector.
pub type GroundTruth = Vec<(SupportSet, Vec<f64>)>;

/// Sample the initial support and evolve it with per-atom swaps.
///
/// Swapped-in atoms draw fresh coefficients (magnitude uniform in
/// [alpha_min, 2 alpha_min], random sign); persistent atoms carry their
/// coefficients over. Deterministic in the process seed.
pub fn generate_ground_truth(process: &GroundTruthProcess) -> Result<GroundTruth> {
    process.validate()?;
    let g = process.g;
    let k = process.k;
    let mut rng = rng_from(&[0x7472757468, process.seed]);

    let mut support = initial_support(process, &mut rng)?;
    let mut coeffs = vec![0.0; g];
    for id in support.iter() {
        coeffs[id] = draw_coefficient(process.alpha_min, &mut rng);
    }
    let mut out: GroundTruth = Vec::with_capacity(process.horizon);
    out.push((support.clone(), coeffs.clone()));

    for _t in 1..process.horizon {
        let members: Vec<usize> = support.iter().collect();
        let swap_out: Vec<usize> = match process.exact_swaps {
            Some(d) => {
                let d = d.min(k);
                if d == 0 {
                    Vec::new()
                } else {
                    let mut picks = index_sample(&mut rng, members.len(), d).into_vec();
                    picks.sort_unstable();
                    picks.iter().map(|&i| members[i]).collect()
                }
            }
            None => members
                .iter()
                .copied()
                .filter(|_| rng.gen::<f64>() < process.drift_rate)
                .collect(),
        };
        if !swap_out.is_empty() {
            let (new_support, swapped_in) =
                swap_atoms(&support, &swap_out, process, &mut rng)?;
            for &id in &swap_out {
                if !new_support.contains(id) {
                    coeffs[id] = 0.0;
                }
            }
            for &id in &swapped_in {
                coeffs[id] = draw_coefficient(process.alpha_min, &mut rng);
            }
            support = new_support;
        }
        out.push((support.clone(), coeffs.clone()));
    }
    Ok(out)
}

fn draw_coefficient(alpha_min: f64, rng: &mut impl Rng) -> f64 {
    let mag = alpha_min * (1.0 + rng.gen::<f64>());
    if rng.gen::<bool>() {
        mag
    } else {
        -mag
    }
}

fn initial_support(process: &GroundTruthProcess, rng: &mut impl Rng) -> Result<SupportSet> {
    let g = process.g;
    let k = process.k;
    match &process.family.admissible {
        FeasibleFamily::MotifLibrary { motifs } => {
            let idx = match &process.family.pool_weights {
                Some(w) => {
                    let total: f64 = w.iter().sum();
                    let mut target = rng.gen::<f64>() * total;
                    let mut chosen = motifs.len() - 1;
                    for (i, &wi) in w.iter().enumerate() {
                        if target < wi {
                            chosen = i;
                            break;
                        }
                        target -= wi;
                    }
                    chosen
                }
                None => rng.gen_range(0..motifs.len()),
            };
            Ok(motifs[idx].clone())
        }
        FeasibleFamily::GroupK { k_groups, groups } => {
            let take = (*k_groups).min(groups.len());
            let mut picks = index_sample(rng, groups.len(), take).into_vec();
            picks.sort_unstable();
            Ok(picks.iter().flat_map(|&gi| groups[gi].iter().copied()).collect())
        }
        FeasibleFamily::NOfM { n, m } => {
            let mut ids = Vec::new();
            for b in 0..g / m {
                let picks = index_sample(rng, *m, *n).into_vec();
                ids.extend(picks.into_iter().map(|p| b * m + p));
            }
            Ok(SupportSet::new(ids))
        }
        FeasibleFamily::UnconstrainedK { .. } => {
            let mut ids = index_sample(rng, g, k).into_vec();
            ids.sort_unstable();
            Ok(SupportSet::new(ids))
        }
    }
}

/// Swap the listed atoms for fresh admissible replacements, keeping |S|
/// and family membership. Returns the new support and the swapped-in ids.
fn swap_atoms(
    support: &SupportSet,
    swap_out: &[usize],
    process: &GroundTruthProcess,
    rng: &mut impl Rng,
) -> Result<(SupportSet, Vec<usize>)> {
    let g = process.g;
    match &process.family.admissible {
        FeasibleFamily::MotifLibrary { motifs } => {
            if motifs.len() < 2 {
                return Err(Error::capacity("motif pool too small to swap"));
            }
            // A per-atom swap is not motif-closed; drift moves to another
            // motif, keeping coefficients on the intersection.
            let idx = rng.gen_range(0..motifs.len());
            let next = motifs[idx].clone();
            let swapped_in: Vec<usize> = next.iter().filter(|id| !support.contains(*id)).collect();
            Ok((next, swapped_in))
        }
        FeasibleFamily::NOfM { m, .. } => {
            let mut members: Vec<usize> = support.iter().collect();
            let mut swapped_in = Vec::new();
            for &out_id in swap_out {
                let block = out_id / m;
                let free: Vec<usize> = (block * m..(block + 1) * m)
                    .filter(|id| !members.contains(id))
                    .collect();
                if free.is_empty() {
                    return Err(Error::capacity("N:M block has no free slot to swap into"));
                }
                let new_id = free[rng.gen_range(0..free.len())];
                members.retain(|&id| id != out_id);
                members.push(new_id);
                swapped_in.push(new_id);
            }
            Ok((SupportSet::new(members), swapped_in))
        }
        FeasibleFamily::GroupK { groups, .. } => {
            // Swaps operate at group granularity: the group containing each
            // swapped atom is replaced by an unused group.
            let mut active: Vec<usize> = groups
                .iter()
                .enumerate()
                .filter(|(_, grp)| grp.iter().any(|id| support.contains(*id)))
                .map(|(gi, _)| gi)
                .collect();
            let mut swapped_in = Vec::new();
            let mut dropped_groups: Vec<usize> = swap_out
                .iter()
                .filter_map(|&id| groups.iter().position(|grp| grp.contains(&id)))
                .collect();
            dropped_groups.sort_unstable();
            dropped_groups.dedup();
            for gi in dropped_groups {
                let free: Vec<usize> =
                    (0..groups.len()).filter(|x| !active.contains(x)).collect();
                if free.is_empty() {
                    return Err(Error::capacity("no free group to swap into"));
                }
                let new_gi = free[rng.gen_range(0..free.len())];
                active.retain(|&x| x != gi);
                active.push(new_gi);
                swapped_in.extend(groups[new_gi].iter().copied());
            }
            Ok((
                active.iter().flat_map(|&gi| groups[gi].iter().copied()).collect(),
                swapped_in,
            ))
        }
        FeasibleFamily::UnconstrainedK { .. } => {
            let mut members: Vec<usize> = support.iter().collect();
            let mut swapped_in = Vec::new();
            for &out_id in swap_out {
                let free: Vec<usize> = (0..g).filter(|id| !members.contains(id)).collect();
                if free.is_empty() {
                    return Err(Error::capacity("universe exhausted, cannot swap"));
                }
                let new_id = free[rng.gen_range(0..free.len())];
                members.retain(|&id| id != out_id);
                members.push(new_id);
                swapped_in.push(new_id);
            }
            Ok((SupportSet::new(members), swapped_in))
        }
    }
}

// ---------------------------------------------------------------------------
// Closed loop
// ---------------------------------------------------------------------------

/// Per-step record of the closed loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub true_support: SupportSet,
    pub estimated_support: SupportSet,
    pub m: usize,
    pub entropy: f64,
    pub error: f64,
    pub drift: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub sensing_cost: f64,
    pub cumulative_measurements: usize,
    pub fallback: bool,
}

/// Full simulation trace.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub steps: Vec<TraceStep>,
}

impl SimulationTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// CSV with the stable header; floats use shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "step,m,H,e,drift,precision,recall,f1,sensing_cost,fallback_flag\n",
        );
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                s.step,
                s.m,
                s.entropy,
                s.error,
                s.drift,
                s.precision,
                s.recall,
                s.f1,
                s.sensing_cost,
                u8::from(s.fallback)
            ));
        }
        out
    }
}

/// Aggregates of a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub mean_f1: f64,
    pub mean_drift: f64,
    pub total_measurements: usize,
    pub mean_m: f64,
    pub mean_error: f64,
    pub sensing_cost_total: f64,
    pub net_cost: f64,
    pub fallback_steps: usize,
}

/// Arithmetic means and totals over a trace. The execution surrogate, when
/// supplied, is added to the sensing total to form the net cost.
pub fn trace_metrics(trace: &SimulationTrace, execution_cost: Option<f64>) -> Result<TraceSummary> {
    if trace.is_empty() {
        return Err(Error::invalid("trace is empty"));
    }
    let n = trace.len() as f64;
    let mean_f1 = trace.steps.iter().map(|s| s.f1).sum::<f64>() / n;
    let mean_error = trace.steps.iter().map(|s| s.error).sum::<f64>() / n;
    let mean_m = trace.steps.iter().map(|s| s.m as f64).sum::<f64>() / n;
    let mean_drift = if trace.len() > 1 {
        trace.steps[1..].iter().map(|s| s.drift).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let sensing_cost_total: f64 = trace.steps.iter().map(|s| s.sensing_cost).sum();
    let total_measurements = trace.steps.iter().map(|s| s.m).sum();
    let fallback_steps = trace.steps.iter().filter(|s| s.fallback).count();
    Ok(TraceSummary {
        mean_f1,
        mean_drift,
        total_measurements,
        mean_m,
        mean_error,
        sensing_cost_total,
        net_cost: sensing_cost_total + execution_cost.unwrap_or(0.0),
        fallback_steps,
    })
}

/// Loop wiring that is not part of the process/controller/channel configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub ensemble: Ensemble,
    pub incremental: bool,
    /// Atom-change budget per incremental step.
    pub delta_max: usize,
    /// Seed for measurement noise, mismatch directions, and entropy jitter.
    pub seed: u64,
}

impl LoopConfig {
    pub fn open_loop(ensemble: Ensemble, seed: u64) -> Self {
        LoopConfig { ensemble, incremental: false, delta_max: 2, seed }
    }
}

/// Run the closed sensing loop.
///
/// Step t draws a fresh operator of `adapt_budget(H_{t-1})` rows from the
/// family's bank stream, measures `u_t = Ψ α*_t`, recovers the support
/// (incremental path after step one when enabled), and feeds the recovery
/// error through the entropy channel into the next budget. Solver failures
/// fall back to the previous estimate and flag the step.
pub fn run_closed_loop(
    dictionary: &StructuredDictionary,
    process: &GroundTruthProcess,
    controller: &ControllerConfig,
    channel: &EntropyChannel,
    recovery_config: &RecoveryConfig,
    loop_config: &LoopConfig,
) -> Result<SimulationTrace> {
    controller.validate()?;
    channel.validate()?;
    recovery_config.validate()?;
    if dictionary.g() != process.g || dictionary.d() != process.d {
        return Err(Error::invalid("dictionary dimensions do not match the process"));
    }
    let truth = generate_ground_truth(process)?;

    let mut entropy_prev = channel.h_base;
    let mut previous: Option<RecoveryResult> = None;
    let mut steps = Vec::with_capacity(process.horizon);
    let mut cumulative = 0usize;

    for (t_idx, (true_support, alpha_true)) in truth.iter().enumerate() {
        let step = t_idx + 1;
        let m_t = adapt_budget(entropy_prev, controller);
        let operator = draw_operator(
            loop_config.ensemble,
            m_t,
            process.d,
            bank_step_seed(process.family.measurement_bank_seed, step),
        )?;

        let mut u: Vec<f64> = (&dictionary.entries
            * nalgebra::DVector::from_column_slice(alpha_true))
        .iter()
        .copied()
        .collect();
        if process.mismatch_amplitude > 0.0 {
            let mut rng = rng_from(&[0x6d69736d, loop_config.seed, step as u64]);
            let mut dir: Vec<f64> = (0..process.d).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (ui, di) in u.iter_mut().zip(&mut dir) {
                    *ui += process.mismatch_amplitude * *di / norm;
                }
            }
        }
        let z = measure(
            &operator,
            &u,
            process.noise_sigma,
            derive_seed(&[0x7a6e, loop_config.seed, step as u64]),
        )?;
        let m_eff = effective_matrix(&operator, dictionary)?;

        let recovered: Result<RecoveryResult> = match (&previous, loop_config.incremental) {
            (Some(prev), true) => {
                recover_incremental(&z, &m_eff, prev, loop_config.delta_max, recovery_config)
            }
            _ => prox_group_lasso(
                &z,
                &m_eff,
                recovery_config,
                &dictionary.groups,
                previous.as_ref().map(|p| p.alpha_hat.as_slice()),
                previous.as_ref().map(|p| p.alpha_hat.as_slice()),
            ),
        };

        let (result, fallback) = match recovered {
            Ok(r) => (r, false),
            Err(_) => {
                // Keep executing with the previous support; an empty result
                // stands in on a first-step failure.
                let stale = previous.clone().unwrap_or(RecoveryResult {
                    alpha_hat: vec![0.0; process.g],
                    support: SupportSet::empty(),
                    residual_norm: z.as_vector().norm(),
                    iterations: 0,
                    measurements_used: m_t,
                    objective_trace: vec![],
                    rank_deficient: false,
                });
                (stale, true)
            }
        };

        let error = result.coefficient_error(alpha_true);
        let (precision, recall, f1) = support_prf(&result.support, true_support);
        let drift = match steps.last() {
            Some(prev_step) => {
                let prev_step: &TraceStep = prev_step;
                support_drift(&result.support, &prev_step.estimated_support)
            }
            None => 0.0,
        };
        let entropy = synth_entropy(error, channel, loop_config.seed, step);
        cumulative += m_t;
        steps.push(TraceStep {
            step,
            true_support: true_support.clone(),
            estimated_support: result.support.clone(),
            m: m_t,
            entropy,
            error,
            drift,
            precision,
            recall,
            f1,
            sensing_cost: sensing_cost(m_t, controller),
            cumulative_measurements: cumulative,
            fallback,
        });
        entropy_prev = entropy;
        previous = Some(result);
    }
    Ok(SimulationTrace { steps })
}
