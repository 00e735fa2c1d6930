//! Random measurement ensembles, the measurement equation, and the
//! coherence / isometry / sample-complexity diagnostics that predict when
//! recovery is possible.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{columns, extreme_gram_eigenvalues, MatrixJson};
use crate::seed::{derive_seed, rng_from};

/// Guard applied before floors/ceilings so values within the crate-wide
/// 1e-9 tolerance of an integer resolve to that integer.
pub(crate) const INT_GUARD: f64 = 1e-9;

/// Measurement matrix ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ensemble {
    Gaussian,
    Rademacher,
    SubsampledOrthogonal,
}

impl Ensemble {
    fn tag(self) -> u64 {
        match self {
            Ensemble::Gaussian => 1,
            Ensemble::Rademacher => 2,
            Ensemble::SubsampledOrthogonal => 3,
        }
    }
}

/// The m×D sensing matrix with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementOperator {
    pub entries: DMatrix<f64>,
    pub ensemble: Ensemble,
    pub seed: u64,
}

impl MeasurementOperator {
    pub fn m(&self) -> usize {
        self.entries.nrows()
    }

    pub fn d(&self) -> usize {
        self.entries.ncols()
    }
}

/// A sketch `z = A u + ε` together with the noise level used to draw ε.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sketch {
    pub values: Vec<f64>,
    pub noise_sigma: f64,
}

impl Sketch {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }
}

/// Draw a seeded measurement operator.
///
/// Gaussian entries have variance 1/m, Rademacher entries are ±1/√m, and
/// the subsampled-orthogonal ensemble takes m distinct rows (in ascending
/// order) of a seeded random orthogonal matrix scaled by √(D/m).
pub fn draw_operator(ensemble: Ensemble, m: usize, d: usize, seed: u64) -> Result<MeasurementOperator> {
    if m == 0 || d == 0 {
        return Err(Error::invalid("operator requires m >= 1 and D >= 1"));
    }
    let mut rng = rng_from(&[ensemble.tag(), m as u64, d as u64, seed]);
    let entries = match ensemble {
        Ensemble::Gaussian => {
            let scale = 1.0 / (m as f64).sqrt();
            DMatrix::from_fn(m, d, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
        }
        Ensemble::Rademacher => {
            let scale = 1.0 / (m as f64).sqrt();
            DMatrix::from_fn(m, d, |_, _| if rng.gen::<bool>() { scale } else { -scale })
        }
        Ensemble::SubsampledOrthogonal => {
            if m > d {
                return Err(Error::invalid(format!(
                    "subsampled_orthogonal requires m <= D (got m = {m}, D = {d})"
                )));
            }
            let q = random_orthogonal(d, &mut rng);
            let mut rows: Vec<usize> = index_sample(&mut rng, d, m).into_vec();
            rows.sort_unstable();
            let scale = (d as f64 / m as f64).sqrt();
            DMatrix::from_fn(m, d, |i, j| scale * q[(rows[i], j)])
        }
    };
    Ok(MeasurementOperator { entries, ensemble, seed })
}

/// Haar-ish random orthogonal matrix: QR of a Gaussian draw with the sign
/// convention that makes R's diagonal nonnegative.
fn random_orthogonal(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = a.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Apply the measurement equation `z = A u + ε` with i.i.d. normal noise.
pub fn measure(a: &MeasurementOperator, u: &[f64], noise_sigma: f64, seed: u64) -> Result<Sketch> {
    if u.len() != a.d() {
        return Err(Error::invalid(format!(
            "measure: input has length {}, operator expects {}",
            u.len(),
            a.d()
        )));
    }
    if noise_sigma < 0.0 {
        return Err(Error::invalid("noise_sigma must be nonnegative"));
    }
    let mut z = &a.entries * DVector::from_column_slice(u);
    if noise_sigma > 0.0 {
        let mut rng = rng_from(&[0x6e6f_6973, seed]);
        for v in z.iter_mut() {
            *v += noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(Sketch { values: z.iter().copied().collect(), noise_sigma })
}

/// Mutual coherence: the largest absolute inner product between distinct
/// normalized columns.
pub fn mutual_coherence(m: &DMatrix<f64>) -> Result<f64> {
    if m.ncols() < 2 {
        return Err(Error::invalid("mutual coherence needs at least 2 columns"));
    }
    let mut normalized = m.clone();
    for (j, mut col) in normalized.column_iter_mut().enumerate() {
        let norm = col.norm();
        if norm == 0.0 {
            return Err(Error::degenerate(format!("column {j} is zero")));
        }
        col /= norm;
    }
    let gram = normalized.transpose() * &normalized;
    let mut mu = 0.0f64;
    for i in 0..gram.nrows() {
        for j in (i + 1)..gram.ncols() {
            mu = mu.max(gram[(i, j)].abs());
        }
    }
    Ok(mu)
}

/// Largest sparsity guaranteed uniquely identifiable at coherence `mu`:
/// the largest integer k with k < (1 + 1/μ)/2. May be 0.
pub fn coherence_sparsity_bound(mu: f64) -> Result<usize> {
    if !(mu > 0.0) {
        return Err(Error::invalid("coherence must be positive"));
    }
    let bound = 0.5 * (1.0 + 1.0 / mu);
    // Strict inequality; the guard keeps k honest when 1/μ lands a hair
    // above an integer in floating point.
    let k = (bound - INT_GUARD).floor();
    Ok(if k < 0.0 { 0 } else { k as usize })
}

/// Measurement budget sufficient for stable structured recovery:
/// `⌈C δ⁻² (k ln(eG/k) + ln|family| + ln(1/ρ))⌉`, natural logs throughout.
pub fn sample_complexity(
    k: usize,
    g: usize,
    family_size: usize,
    rho: f64,
    c: f64,
    delta: f64,
) -> Result<usize> {
    if k == 0 || g == 0 || k > g {
        return Err(Error::invalid("sample_complexity requires 1 <= k <= G"));
    }
    if family_size == 0 {
        return Err(Error::invalid("family_size must be >= 1"));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::invalid("rho must lie in (0, 1)"));
    }
    if !(c > 0.0) || !(delta > 0.0) {
        return Err(Error::invalid("C and delta must be positive"));
    }
    let kf = k as f64;
    let raw = c / (delta * delta)
        * (kf * (std::f64::consts::E * g as f64 / kf).ln()
            + (family_size as f64).ln()
            + (1.0 / rho).ln());
    if !raw.is_finite() {
        return Err(Error::invalid("sample_complexity overflowed"));
    }
    Ok((raw - INT_GUARD).ceil().max(0.0) as usize)
}

/// Empirical restricted-isometry constant over supports of size `k`.
///
/// For each support S the extreme singular values of the column submatrix
/// give `max(1 − σ_min², σ_max² − 1)`; the estimate is the maximum over
/// sampled supports, or over every support in exhaustive mode (allowed for
/// C(G, k) up to 10⁶).
pub fn empirical_rip(
    m: &DMatrix<f64>,
    k: usize,
    n_trials: usize,
    seed: u64,
    exhaustive: bool,
) -> Result<f64> {
    let g = m.ncols();
    if k == 0 || k > g {
        return Err(Error::invalid("empirical_rip requires 1 <= k <= columns"));
    }
    let mut delta_hat = 0.0f64;
    let mut eval = |ids: &[usize]| {
        let (lo, hi) = extreme_gram_eigenvalues(&columns(m, ids));
        delta_hat = delta_hat.max((1.0 - lo).max(hi - 1.0));
    };
    if exhaustive {
        let count = n_subsets(g, k);
        if count > 1_000_000 {
            return Err(Error::capacity(format!(
                "exhaustive RIP over C({g}, {k}) = {count} supports exceeds 10^6"
            )));
        }
        for ids in (0..g).combinations(k) {
            eval(&ids);
        }
    } else {
        for trial in 0..n_trials {
            let mut rng = rng_from(&[0x7269_70, seed, trial as u64]);
            let mut ids = index_sample(&mut rng, g, k).into_vec();
            ids.sort_unstable();
            eval(&ids);
        }
    }
    Ok(delta_hat)
}

/// C(n, k), saturating well above the exhaustive-mode cap.
fn n_subsets(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
        if acc > 10_000_000 {
            return acc;
        }
    }
    acc
}

/// Operator serialization matching the dictionary matrix convention.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OperatorJson {
    pub schema: u32,
    pub ensemble: Ensemble,
    pub seed: u64,
    pub m: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub entries: Vec<f64>,
}

impl OperatorJson {
    pub fn from_operator(op: &MeasurementOperator) -> Self {
        let mj = MatrixJson::from_matrix(&op.entries);
        OperatorJson {
            schema: 1,
            ensemble: op.ensemble,
            seed: op.seed,
            m: mj.rows,
            d: mj.cols,
            entries: mj.entries,
        }
    }

    pub fn to_operator(&self) -> Result<MeasurementOperator> {
        let mj = MatrixJson { rows: self.m, cols: self.d, entries: self.entries.clone() };
        Ok(MeasurementOperator {
            entries: mj.to_matrix()?,
            ensemble: self.ensemble,
            seed: self.seed,
        })
    }
}

/// Derived per-step seed for a measurement bank: the stream of operators a
/// prompt family draws from, indexed by decoding step.
pub fn bank_step_seed(bank_seed: u64, step: usize) -> u64 {
    derive_seed(&[0x62616e6b, bank_seed, step as u64])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_deterministic() {
        let a = draw_operator(Ensemble::Gaussian, 20, 30, 4).unwrap();
        let b = draw_operator(Ensemble::Gaussian, 20, 30, 4).unwrap();
        assert_eq!(a.entries, b.entries);
        let c = draw_operator(Ensemble::Gaussian, 20, 30, 5).unwrap();
        assert_ne!(a.entries, c.entries);
    }

    #[test]
    fn full_subsampled_orthogonal_is_orthogonal() {
        let a = draw_operator(Ensemble::SubsampledOrthogonal, 16, 16, 3).unwrap();
        let gram = &a.entries * a.entries.transpose();
        let eye = DMatrix::<f64>::identity(16, 16);
        assert!((gram - eye).norm() < 1e-9);
    }

    #[test]
    fn subsampled_rejects_m_above_d() {
        assert!(draw_operator(Ensemble::SubsampledOrthogonal, 9, 8, 0).is_err());
    }

    #[test]
    fn gaussian_entry_variance_matches_ensemble() {
        let a = draw_operator(Ensemble::Gaussian, 200, 50, 1).unwrap();
        let n = (a.m() * a.d()) as f64;
        let mean: f64 = a.entries.iter().sum::<f64>() / n;
        let var: f64 = a.entries.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let target = 1.0 / 200.0;
        assert!(var > 0.8 * target && var < 1.2 * target, "variance {var} vs {target}");
    }

    #[test]
    fn rademacher_entries_have_fixed_magnitude() {
        let a = draw_operator(Ensemble::Rademacher, 10, 10, 2).unwrap();
        let mag = 1.0 / (10.0f64).sqrt();
        assert!(a.entries.iter().all(|v| (v.abs() - mag).abs() < 1e-15));
    }

    #[test]
    fn measure_identity_passthrough() {
        // Hand-built identity operator: m = D, canonical row order.
        let a = MeasurementOperator {
            entries: DMatrix::identity(4, 4),
            ensemble: Ensemble::SubsampledOrthogonal,
            seed: 0,
        };
        let z = measure(&a, &[1.0, -2.0, 3.0, 0.5], 0.0, 0).unwrap();
        assert_eq!(z.values, vec![1.0, -2.0, 3.0, 0.5]);
    }

    #[test]
    fn measure_is_linear_when_noiseless() {
        let a = draw_operator(Ensemble::Gaussian, 12, 6, 8).unwrap();
        let u1 = [1.0, 0.5, -0.25, 2.0, 0.0, -1.0];
        let u2 = [0.3, -0.7, 1.5, 0.0, 2.0, 0.1];
        let sum: Vec<f64> = u1.iter().zip(&u2).map(|(x, y)| x + y).collect();
        let z1 = measure(&a, &u1, 0.0, 0).unwrap();
        let z2 = measure(&a, &u2, 0.0, 0).unwrap();
        let zs = measure(&a, &sum, 0.0, 0).unwrap();
        for i in 0..12 {
            assert!((zs.values[i] - z1.values[i] - z2.values[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn measure_noise_std_matches_sigma() {
        let a = MeasurementOperator {
            entries: DMatrix::zeros(1000, 2),
            ensemble: Ensemble::Gaussian,
            seed: 0,
        };
        let z = measure(&a, &[0.0, 0.0], 0.1, 7).unwrap();
        let n = z.values.len() as f64;
        let var = z.values.iter().map(|v| v * v).sum::<f64>() / n;
        let std = var.sqrt();
        assert!((0.09..=0.11).contains(&std), "noise std {std}");
    }

    #[test]
    fn coherence_examples() {
        let eye = DMatrix::<f64>::identity(3, 3);
        assert!(mutual_coherence(&eye).unwrap().abs() < 1e-15);

        let dup = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert!((mutual_coherence(&dup).unwrap() - 1.0).abs() < 1e-12);

        let s = 1.0 / 2.0f64.sqrt();
        let pair = DMatrix::from_row_slice(2, 2, &[1.0, s, 0.0, s]);
        assert!((mutual_coherence(&pair).unwrap() - s).abs() < 1e-12);

        let zero = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(mutual_coherence(&zero).is_err());
    }

    #[test]
    fn sparsity_bound_examples() {
        assert_eq!(coherence_sparsity_bound(0.1).unwrap(), 5);
        assert_eq!(coherence_sparsity_bound(1.0 / 3.0).unwrap(), 1);
        assert_eq!(coherence_sparsity_bound(1.0).unwrap(), 0);
        assert!(coherence_sparsity_bound(0.0).is_err());
    }

    #[test]
    fn sample_complexity_examples() {
        assert_eq!(sample_complexity(4, 256, 16, 0.01, 1.0, 1.0).unwrap(), 29);
        // k = 1, G = 1: only the k ln(e) = 1 term with family 1 and rho -> 1.
        assert_eq!(sample_complexity(1, 1, 1, 1.0 - 1e-12, 1.0, 1.0).unwrap(), 1);
        // Doubling C doubles the pre-ceiling value.
        let single = 1.0 * (4.0 * (std::f64::consts::E * 64.0).ln() + 16f64.ln() + 100f64.ln());
        let m2 = sample_complexity(4, 256, 16, 0.01, 2.0, 1.0).unwrap();
        assert_eq!(m2, (2.0 * single - 1e-9).ceil() as usize);
    }

    #[test]
    fn rip_is_zero_for_orthonormal() {
        let q = DMatrix::<f64>::identity(6, 6);
        assert!(empirical_rip(&q, 3, 10, 0, true).unwrap() < 1e-9);
    }

    #[test]
    fn sampled_rip_bounded_by_exhaustive() {
        let a = draw_operator(Ensemble::Gaussian, 20, 10, 13).unwrap();
        let sampled = empirical_rip(&a.entries, 3, 30, 5, false).unwrap();
        let exhaustive = empirical_rip(&a.entries, 3, 0, 0, true).unwrap();
        assert!(sampled <= exhaustive + 1e-12);
    }

    #[test]
    fn exhaustive_rip_nondecreasing_in_k() {
        let a = draw_operator(Ensemble::Gaussian, 24, 10, 17).unwrap();
        let mut prev = 0.0;
        for k in 1..=4 {
            let d = empirical_rip(&a.entries, k, 0, 0, true).unwrap();
            assert!(d >= prev - 1e-12, "rip decreased at k={k}");
            prev = d;
        }
    }

    #[test]
    fn exhaustive_rip_respects_capacity() {
        let a = draw_operator(Ensemble::Gaussian, 4, 60, 3).unwrap();
        assert!(matches!(empirical_rip(&a.entries, 10, 0, 0, true), Err(Error::Capacity(_))));
    }

    #[test]
    fn operator_json_round_trip() {
        let a = draw_operator(Ensemble::Rademacher, 5, 7, 11).unwrap();
        let json = serde_json::to_string(&OperatorJson::from_operator(&a)).unwrap();
        let back: OperatorJson = serde_json::from_str(&json).unwrap();
        let b = back.to_operator().unwrap();
        assert_eq!(a, b);
    }
}
