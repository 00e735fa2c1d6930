//! Structured units, the dictionary, hardware-feasible support families,
//! and support-set algebra.
//!
//! A support is the set of structured unit indices scheduled for execution.
//! Feasible families restrict supports to shapes that compile to efficient
//! kernels: plain top-k, whole groups, N-of-M blocks, or an explicit motif
//! library. Projection always breaks ties by lowest index so results are
//! bit-reproducible.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from;

// ---------------------------------------------------------------------------
// Units and supports
// ---------------------------------------------------------------------------

/// Kind of structured computational unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Block,
    Head,
    ChannelGroup,
    FfnSlice,
    Tile,
}

impl UnitKind {
    pub const ALL: [UnitKind; 5] = [
        UnitKind::Block,
        UnitKind::Head,
        UnitKind::ChannelGroup,
        UnitKind::FfnSlice,
        UnitKind::Tile,
    ];
}

/// One executable unit with its relative execution cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredUnit {
    pub id: usize,
    pub kind: UnitKind,
    /// Normalized FLOP share; unit weights over a dictionary sum to 1.
    pub weight: f64,
}

/// Sorted, duplicate-free set of unit ids.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SupportSet {
    members: Vec<usize>,
}

impl SupportSet {
    pub fn new(mut members: Vec<usize>) -> Self {
        members.sort_unstable();
        members.dedup();
        SupportSet { members }
    }

    pub fn empty() -> Self {
        SupportSet { members: Vec::new() }
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.members.binary_search(&id).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().copied()
    }

    pub fn intersection_size(&self, other: &SupportSet) -> usize {
        self.members.iter().filter(|m| other.contains(**m)).count()
    }

    pub fn union_size(&self, other: &SupportSet) -> usize {
        self.len() + other.len() - self.intersection_size(other)
    }

    pub fn symmetric_difference_size(&self, other: &SupportSet) -> usize {
        self.union_size(other) - self.intersection_size(other)
    }

    pub fn union(&self, other: &SupportSet) -> SupportSet {
        let mut m = self.members.clone();
        m.extend(other.iter());
        SupportSet::new(m)
    }

    /// Indicator vector of length `g`.
    pub fn to_mask(&self, g: usize) -> Vec<bool> {
        let mut mask = vec![false; g];
        for &id in &self.members {
            if id < g {
                mask[id] = true;
            }
        }
        mask
    }
}

impl FromIterator<usize> for SupportSet {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        SupportSet::new(iter.into_iter().collect())
    }
}

/// Jaccard-distance drift between consecutive supports:
/// `|S △ P| / |S ∪ P|`, zero when both sets are empty.
pub fn support_drift(current: &SupportSet, previous: &SupportSet) -> f64 {
    let union = current.union_size(previous);
    if union == 0 {
        return 0.0;
    }
    current.symmetric_difference_size(previous) as f64 / union as f64
}

/// Set precision/recall/F1 of an estimated support against the truth.
///
/// Conventions: an empty estimate has precision 1 (nothing asserted is
/// wrong); an empty truth has recall 1; both empty gives (1, 1, 1); F1 is 0
/// when precision + recall is 0.
pub fn support_prf(estimated: &SupportSet, truth: &SupportSet) -> (f64, f64, f64) {
    let hit = estimated.intersection_size(truth) as f64;
    let precision = if estimated.is_empty() { 1.0 } else { hit / estimated.len() as f64 };
    let recall = if truth.is_empty() { 1.0 } else { hit / truth.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

// ---------------------------------------------------------------------------
// Feasible families
// ---------------------------------------------------------------------------

/// Hardware-admissible support family.
///
/// `GroupK` carries its partition so projection is self-contained; the
/// partition normally comes from the owning dictionary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum FeasibleFamily {
    UnconstrainedK { k: usize },
    GroupK { k_groups: usize, groups: Vec<Vec<usize>> },
    NOfM { n: usize, m: usize },
    MotifLibrary { motifs: Vec<SupportSet> },
}

impl FeasibleFamily {
    pub fn unconstrained(k: usize) -> Self {
        FeasibleFamily::UnconstrainedK { k }
    }

    /// Check the family's own invariants against a universe of size `g`.
    pub fn validate(&self, g: usize) -> Result<()> {
        match self {
            FeasibleFamily::UnconstrainedK { k } => {
                if *k == 0 {
                    return Err(Error::invalid("unconstrained_k requires k >= 1"));
                }
            }
            FeasibleFamily::GroupK { k_groups, groups } => {
                if *k_groups == 0 {
                    return Err(Error::invalid("group_k requires k_groups >= 1"));
                }
                let mut seen = vec![false; g];
                for grp in groups {
                    for &id in grp {
                        if id >= g || seen[id] {
                            return Err(Error::invalid(
                                "group_k groups must partition [0, G) exactly",
                            ));
                        }
                        seen[id] = true;
                    }
                }
                if seen.iter().any(|s| !s) {
                    return Err(Error::invalid("group_k groups must cover [0, G)"));
                }
            }
            FeasibleFamily::NOfM { n, m } => {
                if *n == 0 || n > m {
                    return Err(Error::invalid("n_of_m requires 0 < N <= M"));
                }
                if *m == 0 || g % m != 0 {
                    return Err(Error::invalid("n_of_m requires M to divide G"));
                }
            }
            FeasibleFamily::MotifLibrary { motifs } => {
                if motifs.is_empty() {
                    return Err(Error::invalid("motif library must be non-empty"));
                }
                for motif in motifs {
                    if motif.iter().any(|id| id >= g) {
                        return Err(Error::invalid("motif members must lie in [0, G)"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Family membership. Subsets of an admissible shape remain admissible:
    /// a kernel compiled for a motif or group set can execute any subset of
    /// it, so thresholded supports stay feasible.
    pub fn admits(&self, support: &SupportSet, g: usize) -> bool {
        match self {
            FeasibleFamily::UnconstrainedK { k } => support.len() <= *k,
            FeasibleFamily::GroupK { k_groups, groups } => {
                let touched = groups
                    .iter()
                    .filter(|grp| grp.iter().any(|id| support.contains(*id)))
                    .count();
                touched <= *k_groups
            }
            FeasibleFamily::NOfM { n, m } => {
                if g % m != 0 {
                    return false;
                }
                (0..g / m).all(|b| {
                    let count = (b * m..(b + 1) * m).filter(|id| support.contains(*id)).count();
                    count <= *n
                })
            }
            FeasibleFamily::MotifLibrary { motifs } => motifs
                .iter()
                .any(|motif| support.iter().all(|id| motif.contains(id))),
        }
    }

    /// Largest admissible support size.
    pub fn max_support_size(&self, g: usize) -> usize {
        match self {
            FeasibleFamily::UnconstrainedK { k } => (*k).min(g),
            FeasibleFamily::GroupK { k_groups, groups } => {
                let mut sizes: Vec<usize> = groups.iter().map(|grp| grp.len()).collect();
                sizes.sort_unstable_by(|a, b| b.cmp(a));
                sizes.iter().take(*k_groups).sum()
            }
            FeasibleFamily::NOfM { n, m } => (g / m) * n,
            FeasibleFamily::MotifLibrary { motifs } => {
                motifs.iter().map(|s| s.len()).max().unwrap_or(0)
            }
        }
    }

    /// All maximal supports of the family, for exhaustive decoding on small
    /// instances. Errors when the enumeration would exceed `cap` supports.
    pub fn enumerate_supports(&self, g: usize, cap: usize) -> Result<Vec<SupportSet>> {
        use itertools::Itertools;
        self.validate(g)?;
        if self.cardinality(g) > cap {
            return Err(Error::capacity(format!(
                "family has {} supports, enumeration cap is {cap}",
                self.cardinality(g)
            )));
        }
        let out = match self {
            FeasibleFamily::UnconstrainedK { k } => (0..g)
                .combinations((*k).min(g))
                .map(SupportSet::new)
                .collect(),
            FeasibleFamily::GroupK { k_groups, groups } => (0..groups.len())
                .combinations((*k_groups).min(groups.len()))
                .map(|gis| gis.iter().flat_map(|&gi| groups[gi].iter().copied()).collect())
                .collect(),
            FeasibleFamily::NOfM { n, m } => {
                let mut acc: Vec<Vec<usize>> = vec![Vec::new()];
                for b in 0..g / m {
                    let block: Vec<Vec<usize>> =
                        (b * m..(b + 1) * m).combinations(*n).collect();
                    let mut next = Vec::with_capacity(acc.len() * block.len());
                    for prefix in &acc {
                        for choice in &block {
                            let mut v = prefix.clone();
                            v.extend(choice.iter().copied());
                            next.push(v);
                        }
                    }
                    acc = next;
                }
                acc.into_iter().map(SupportSet::new).collect()
            }
            FeasibleFamily::MotifLibrary { motifs } => motifs.clone(),
        };
        Ok(out)
    }

    /// Number of distinct maximal supports in the family, saturating at
    /// `usize::MAX`. Used as the |C(p)| term of budget calculations.
    pub fn cardinality(&self, g: usize) -> usize {
        fn binom(n: usize, k: usize) -> usize {
            if k > n {
                return 0;
            }
            let mut acc: u128 = 1;
            for i in 0..k.min(n - k) {
                acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
                if acc > usize::MAX as u128 {
                    return usize::MAX;
                }
            }
            acc as usize
        }
        match self {
            FeasibleFamily::UnconstrainedK { k } => binom(g, (*k).min(g)),
            FeasibleFamily::GroupK { k_groups, groups } => binom(groups.len(), *k_groups),
            FeasibleFamily::NOfM { n, m } => {
                let per_block = binom(*m, *n) as u128;
                let blocks = (g / m) as u32;
                let total = per_block.checked_pow(blocks).unwrap_or(u128::MAX);
                if total > usize::MAX as u128 {
                    usize::MAX
                } else {
                    total as usize
                }
            }
            FeasibleFamily::MotifLibrary { motifs } => motifs.len(),
        }
    }
}

// ---------------------------------------------------------------------------
// Dictionary
// ---------------------------------------------------------------------------

/// Synthetic dictionary ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DictionaryEnsemble {
    IdentityPadded,
    GaussianNormalized,
}

/// The D×G dictionary with unit metadata and a group partition.
///
/// Columns are unit-normalized so coherence and isometry diagnostics are
/// well-posed.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredDictionary {
    pub entries: DMatrix<f64>,
    pub units: Vec<StructuredUnit>,
    pub groups: Vec<Vec<usize>>,
}

impl StructuredDictionary {
    pub fn d(&self) -> usize {
        self.entries.nrows()
    }

    pub fn g(&self) -> usize {
        self.entries.ncols()
    }

    /// Group-k family over this dictionary's partition.
    pub fn group_family(&self, k_groups: usize) -> FeasibleFamily {
        FeasibleFamily::GroupK { k_groups, groups: self.groups.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, g) = (self.d(), self.g());
        if d == 0 || g == 0 {
            return Err(Error::invalid("dictionary must have D >= 1 and G >= 1"));
        }
        if self.units.len() != g {
            return Err(Error::invalid("dictionary must carry one unit per column"));
        }
        for (i, u) in self.units.iter().enumerate() {
            if u.id != i {
                return Err(Error::invalid("unit ids must be contiguous from 0"));
            }
            if u.weight < 0.0 {
                return Err(Error::invalid("unit weights must be nonnegative"));
            }
        }
        let weight_sum: f64 = self.units.iter().map(|u| u.weight).sum();
        if (weight_sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("unit weights must sum to 1"));
        }
        for j in 0..g {
            let norm = self.entries.column(j).norm();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("column {j} has norm {norm}, expected 1")));
            }
        }
        let mut seen = vec![false; g];
        for grp in &self.groups {
            for &id in grp {
                if id >= g || seen[id] {
                    return Err(Error::invalid("groups must partition [0, G) exactly"));
                }
                seen[id] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("groups must cover [0, G)"));
        }
        Ok(())
    }
}

/// Build a synthetic dictionary.
///
/// `identity_padded` places the G×G identity in the top rows (requires
/// D >= G); `gaussian_normalized` draws i.i.d. standard normal entries and
/// normalizes each column. Groups are consecutive runs of `group_size`
/// indices; unit weights are uniform `1/G`. Deterministic in `seed`.
pub fn build_synthetic_dictionary(
    d: usize,
    g: usize,
    group_size: usize,
    ensemble: DictionaryEnsemble,
    seed: u64,
) -> Result<StructuredDictionary> {
    if d == 0 || g == 0 {
        return Err(Error::invalid("D and G must be positive"));
    }
    if group_size == 0 || g % group_size != 0 {
        return Err(Error::invalid(format!(
            "group_size {group_size} must divide G = {g}"
        )));
    }
    let entries = match ensemble {
        DictionaryEnsemble::IdentityPadded => {
            if d < g {
                return Err(Error::invalid(format!(
                    "identity_padded requires D >= G (got D = {d}, G = {g})"
                )));
            }
            let mut m = DMatrix::zeros(d, g);
            for j in 0..g {
                m[(j, j)] = 1.0;
            }
            m
        }
        DictionaryEnsemble::GaussianNormalized => {
            let mut rng = rng_from(&[seed, d as u64, g as u64]);
            let mut m = DMatrix::from_fn(d, g, |_, _| rng.sample::<f64, _>(StandardNormal));
            for mut col in m.column_iter_mut() {
                let norm = col.norm();
                if norm > 0.0 {
                    col /= norm;
                }
            }
            m
        }
    };
    let groups: Vec<Vec<usize>> = (0..g / group_size)
        .map(|b| (b * group_size..(b + 1) * group_size).collect())
        .collect();
    let units = (0..g)
        .map(|id| StructuredUnit {
            id,
            kind: UnitKind::ALL[(id / group_size) % UnitKind::ALL.len()],
            weight: 1.0 / g as f64,
        })
        .collect();
    let dict = StructuredDictionary { entries, units, groups };
    dict.validate()?;
    Ok(dict)
}

// ---------------------------------------------------------------------------
// Projection
// ---------------------------------------------------------------------------

/// Project a coefficient vector's support into a feasible family.
///
/// Per class: top-k magnitudes; the k_groups groups with largest group
/// norms (all members included); the N largest magnitudes per M-block; or
/// the motif with the largest captured energy. Ties break by lowest index.
pub fn project_support(alpha: &[f64], family: &FeasibleFamily) -> Result<SupportSet> {
    project_support_restricted(alpha, family, None)
}

/// Family projection restricted to an eligible subset of indices.
///
/// With `eligible = None` the selection fills the family's cardinality
/// quotas exactly (zero entries included if needed); with a restriction the
/// result is additionally intersected with the eligible set, which is how
/// thresholded supports stay within both the threshold and the family.
pub(crate) fn project_support_restricted(
    alpha: &[f64],
    family: &FeasibleFamily,
    eligible: Option<&[bool]>,
) -> Result<SupportSet> {
    let g = alpha.len();
    family.validate(g)?;
    if let Some(mask) = eligible {
        if mask.len() != g {
            return Err(Error::invalid("eligibility mask length mismatch"));
        }
    }
    let ok = |id: usize| eligible.map_or(true, |m| m[id]);
    let magnitude = |id: usize| if ok(id) { alpha[id].abs() } else { 0.0 };

    let support = match family {
        FeasibleFamily::UnconstrainedK { k } => {
            let ids: Vec<usize> = (0..g).filter(|&id| ok(id)).collect();
            top_k_by(&ids, *k, magnitude)
        }
        FeasibleFamily::GroupK { k_groups, groups } => {
            let norms: Vec<f64> = groups
                .iter()
                .map(|grp| grp.iter().map(|&id| magnitude(id).powi(2)).sum::<f64>().sqrt())
                .collect();
            let group_ids: Vec<usize> = (0..groups.len())
                .filter(|&gi| eligible.is_none() || norms[gi] > 0.0)
                .collect();
            let chosen = top_k_by(&group_ids, *k_groups, |gi| norms[gi]);
            chosen
                .into_iter()
                .flat_map(|gi| groups[gi].iter().copied())
                .filter(|&id| ok(id))
                .collect()
        }
        FeasibleFamily::NOfM { n, m } => {
            let mut members = Vec::new();
            for b in 0..g / m {
                let ids: Vec<usize> = (b * m..(b + 1) * m).filter(|&id| ok(id)).collect();
                members.extend(top_k_by(&ids, *n, magnitude));
            }
            members
        }
        FeasibleFamily::MotifLibrary { motifs } => {
            let mut best = 0usize;
            let mut best_energy = f64::NEG_INFINITY;
            for (i, motif) in motifs.iter().enumerate() {
                let energy: f64 = motif.iter().map(|id| magnitude(id).powi(2)).sum();
                if energy > best_energy {
                    best_energy = energy;
                    best = i;
                }
            }
            motifs[best].iter().filter(|&id| ok(id)).collect()
        }
    };
    Ok(SupportSet::new(support))
}

/// Indices of the `k` largest scores, ties broken by lowest index.
fn top_k_by(ids: &[usize], k: usize, score: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut ranked: Vec<usize> = ids.to_vec();
    ranked.sort_by(|&a, &b| {
        score(b)
            .partial_cmp(&score(a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    ranked.truncate(k);
    ranked
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

/// On-disk form of a dictionary. Entries are row-major; serde_json emits
/// shortest round-trip decimals, so the f64 payload survives bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DictionaryJson {
    pub schema: u32,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "G")]
    pub g: usize,
    pub groups: Vec<Vec<usize>>,
    pub entries: Vec<f64>,
    pub units: Vec<StructuredUnit>,
}

impl DictionaryJson {
    pub fn from_dictionary(dict: &StructuredDictionary) -> Self {
        let mut entries = Vec::with_capacity(dict.d() * dict.g());
        for i in 0..dict.d() {
            for j in 0..dict.g() {
                entries.push(dict.entries[(i, j)]);
            }
        }
        DictionaryJson {
            schema: 1,
            d: dict.d(),
            g: dict.g(),
            groups: dict.groups.clone(),
            entries,
            units: dict.units.clone(),
        }
    }

    pub fn to_dictionary(&self) -> Result<StructuredDictionary> {
        if self.entries.len() != self.d * self.g {
            return Err(Error::invalid(format!(
                "dictionary payload has {} entries, expected {}x{}",
                self.entries.len(),
                self.d,
                self.g
            )));
        }
        let dict = StructuredDictionary {
            entries: DMatrix::from_row_slice(self.d, self.g, &self.entries),
            units: self.units.clone(),
            groups: self.groups.clone(),
        };
        dict.validate()?;
        Ok(dict)
    }
}
