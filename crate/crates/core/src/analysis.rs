//! Dimension selection from scaling vectors and the analyses built on it.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledCorpus;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_objective, CorrelationResult};
use crate::objective::ObjectiveId;
use crate::probe::ProbeParams;

pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const DROP_FRACTIONS: [f64; 3] = [0.25, 0.33, 0.50];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimSelection {
    pub objective: ObjectiveId,
    pub epsilon: f64,
    pub dim: usize,
    /// Sorted indices `i` with `|d̄[i]| > ε`.
    pub selected: Vec<usize>,
}

impl DimSelection {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

pub fn select_dimensions(objective: ObjectiveId, d: &[f64], epsilon: f64) -> Result<DimSelection> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    Ok(DimSelection {
        objective,
        epsilon,
        dim: d.len(),
        selected: (0..d.len()).filter(|&i| d[i].abs() > epsilon).collect(),
    })
}

/// Selection for every objective of an orthogonal probe.
pub fn select_all(params: &ProbeParams, epsilon: f64) -> Result<Vec<DimSelection>> {
    match params {
        ProbeParams::Orthogonal(p) => p
            .scalers
            .iter()
            .map(|(&o, d)| select_dimensions(o, d, epsilon))
            .collect(),
        ProbeParams::Linear(_) => Err(Error::InvalidArgument(
            "dimension selection needs an orthogonal probe".into(),
        )),
    }
}

/// Whether the selection is the same for every ε in `epsilons`.
pub fn selection_is_stable(objective: ObjectiveId, d: &[f64], epsilons: &[f64]) -> Result<bool> {
    let sets = epsilons
        .iter()
        .map(|&e| select_dimensions(objective, d, e).map(|s| s.selected))
        .collect::<Result<Vec<_>>>()?;
    Ok(sets.windows(2).all(|w| w[0] == w[1]))
}

/// Copy of `params` with the scaling vector of `objective` zeroed outside
/// `mask`.
pub fn mask_params(params: &ProbeParams, objective: ObjectiveId, mask: &[usize]) -> Result<ProbeParams> {
    let ProbeParams::Orthogonal(p) = params else {
        return Err(Error::InvalidArgument("masking needs an orthogonal probe".into()));
    };
    let dim = p.dim();
    if let Some(&bad) = mask.iter().find(|&&i| i >= dim) {
        return Err(Error::InvalidArgument(format!("mask index {} out of range for dim {}", bad, dim)));
    }
    let keep: BTreeSet<usize> = mask.iter().copied().collect();
    let mut masked = p.clone();
    let d = masked
        .scalers
        .get_mut(&objective)
        .ok_or_else(|| Error::InvalidArgument(format!("objective {} is not configured", objective)))?;
    for (i, x) in d.iter_mut().enumerate() {
        if !keep.contains(&i) {
            *x = 0.0;
        }
    }
    Ok(ProbeParams::Orthogonal(masked))
}

/// Correlation with only the `mask` dimensions of `objective` active.
/// `None` for an empty mask.
pub fn masked_evaluate(
    params: &ProbeParams,
    objective: ObjectiveId,
    mask: &[usize],
    corpus: &LabeledCorpus,
) -> Result<Option<CorrelationResult>> {
    if mask.is_empty() {
        return Ok(None);
    }
    Ok(Some(evaluate_objective(&mask_params(params, objective, mask)?, objective, corpus)?))
}

/// Splits `selected` into `round(1/fraction)` seeded subsets whose sizes
/// differ by at most one. The subset count is capped at `|selected|`.
pub fn drop_partition(selected: &[usize], fraction: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("drop fraction {} outside (0, 1)", fraction)));
    }
    if selected.is_empty() {
        return Err(Error::InvalidArgument("cannot drop from an empty selection".into()));
    }
    let k = ((1.0 / fraction).round() as usize).clamp(1, selected.len());
    let mut order = selected.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = vec![Vec::new(); k];
    for (n, i) in order.into_iter().enumerate() {
        parts[n % k].push(i);
    }
    for p in &mut parts {
        p.sort();
    }
    Ok(parts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropResult {
    pub fraction: f64,
    pub subsets: Vec<Vec<usize>>,
    /// Correlation with each subset removed.
    pub correlations: Vec<Option<f64>>,
    /// Mean over subsets with a defined correlation.
    pub mean: Option<f64>,
}

/// Evaluates with each partition subset removed from the selection in
/// turn and averages the results.
pub fn dimension_drop_cv(
    params: &ProbeParams,
    selection: &DimSelection,
    fraction: f64,
    seed: u64,
    corpus: &LabeledCorpus,
) -> Result<DropResult> {
    let subsets = drop_partition(&selection.selected, fraction, seed)?;
    let correlations = subsets
        .iter()
        .map(|drop| {
            let keep: Vec<usize> = selection.selected.iter().copied().filter(|i| !drop.contains(i)).collect();
            Ok(masked_evaluate(params, selection.objective, &keep, corpus)?.and_then(|r| r.mean))
        })
        .collect::<Result<Vec<_>>>()?;
    let defined: Vec<f64> = correlations.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(DropResult {
        fraction,
        subsets,
        correlations,
        mean,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapTable {
    pub objectives: Vec<ObjectiveId>,
    /// `counts[a][b] = |selected_a ∩ selected_b|`.
    pub counts: Vec<Vec<usize>>,
}

pub fn overlap_table(selections: &[DimSelection]) -> Result<OverlapTable> {
    if let Some(first) = selections.first() {
        if selections.iter().any(|s| s.dim != first.dim) {
            return Err(Error::InvalidArgument("selections come from probes of different dims".into()));
        }
    }
    let sets: Vec<BTreeSet<usize>> = selections.iter().map(|s| s.selected.iter().copied().collect()).collect();
    Ok(OverlapTable {
        objectives: selections.iter().map(|s| s.objective).collect(),
        counts: sets
            .iter()
            .map(|a| sets.iter().map(|b| a.intersection(b).count()).collect())
            .collect(),
    })
}

impl OverlapTable {
    pub fn count(&self, a: ObjectiveId, b: ObjectiveId) -> Option<usize> {
        let i = self.objectives.iter().position(|&o| o == a)?;
        let j = self.objectives.iter().position(|&o| o == b)?;
        Some(self.counts[i][j])
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("objective");
        for o in &self.objectives {
            let _ = write!(out, "\t{}", o);
        }
        out.push('\n');
        for (o, row) in self.objectives.iter().zip(&self.counts) {
            let _ = write!(out, "{}", o);
            for c in row {
                let _ = write!(out, "\t{}", c);
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub objectives: Vec<ObjectiveId>,
    pub bin_size: usize,
    /// Coordinates sorted by descending weighted magnitude.
    pub order: Vec<usize>,
    /// `counts[k][b]`: selected dims of objective `k` in bin `b`.
    pub counts: Vec<Vec<usize>>,
}

/// Orders coordinates by descending `Σ_k 10^(K−1−k)·|d̄_k[i]|` (ties by
/// index) and counts each objective's selected coordinates per bin.
pub fn histogram_export(
    scalers: &[(ObjectiveId, &[f64])],
    epsilon: f64,
    bin_size: usize,
) -> Result<Histogram> {
    if scalers.is_empty() || bin_size == 0 {
        return Err(Error::InvalidArgument("histogram needs objectives and a positive bin size".into()));
    }
    let dim = scalers[0].1.len();
    if scalers.iter().any(|(_, d)| d.len() != dim) {
        return Err(Error::InvalidArgument("scaling vectors differ in length".into()));
    }
    let k = scalers.len();
    let weight = |i: usize| -> f64 {
        scalers
            .iter()
            .enumerate()
            .map(|(n, (_, d))| 10f64.powi((k - 1 - n) as i32) * d[i].abs())
            .sum()
    };
    let weights: Vec<f64> = (0..dim).map(weight).collect();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let bins = dim.div_ceil(bin_size);
    let counts = scalers
        .iter()
        .map(|(_, d)| {
            let mut c = vec![0; bins];
            for (pos, &i) in order.iter().enumerate() {
                if d[i].abs() > epsilon {
                    c[pos / bin_size] += 1;
                }
            }
            c
        })
        .collect();
    Ok(Histogram {
        objectives: scalers.iter().map(|(o, _)| *o).collect(),
        bin_size,
        order,
        counts,
    })
}

impl Histogram {
    /// Rows `bin, objective, count`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("bin\tobjective\tcount\n");
        for (o, counts) in self.objectives.iter().zip(&self.counts) {
            for (b, c) in counts.iter().enumerate() {
                let _ = writeln!(out, "{}\t{}\t{}", b, o, c);
            }
        }
        out
    }
}

/// One objective's row of the dimension-selection table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimsRow {
    pub objective: ObjectiveId,
    pub n_selected: usize,
    pub correlation_full: Option<f64>,
    pub correlation_masked: Option<f64>,
    pub drop25: Option<f64>,
    pub drop33: Option<f64>,
    pub drop50: Option<f64>,
}

/// Full, masked and dimension-drop correlations for `objective`.
pub fn dims_row(
    params: &ProbeParams,
    objective: ObjectiveId,
    epsilon: f64,
    seed: u64,
    corpus: &LabeledCorpus,
) -> Result<DimsRow> {
    let ProbeParams::Orthogonal(p) = params else {
        return Err(Error::InvalidArgument("dimension analysis needs an orthogonal probe".into()));
    };
    let selection = select_dimensions(objective, p.scaler(objective)?, epsilon)?;
    let full = evaluate_objective(params, objective, corpus)?.mean;
    let masked = masked_evaluate(params, objective, &selection.selected, corpus)?.and_then(|r| r.mean);
    let drop = |f: f64| -> Result<Option<f64>> {
        if selection.is_empty() {
            return Ok(None);
        }
        Ok(dimension_drop_cv(params, &selection, f, seed, corpus)?.mean)
    };
    Ok(DimsRow {
        objective,
        n_selected: selection.len(),
        correlation_full: full,
        correlation_masked: masked,
        drop25: drop(DROP_FRACTIONS[0])?,
        drop33: drop(DROP_FRACTIONS[1])?,
        drop50: drop(DROP_FRACTIONS[2])?,
    })
}

pub fn dims_tsv(rows: &[DimsRow]) -> String {
    let f = |x: Option<f64>| x.map_or_else(|| "NA".to_string(), |v| format!("{:.6}", v));
    let mut out =
        String::from("objective\tn_selected\tcorrelation_full\tcorrelation_masked\tdrop25\tdrop33\tdrop50\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.objective,
            r.n_selected,
            f(r.correlation_full),
            f(r.correlation_masked),
            f(r.drop25),
            f(r.drop33),
            f(r.drop50)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{Structure, Target};
    use proptest::prelude::*;

    const O: ObjectiveId = ObjectiveId::new(Structure::Dep, Target::Depth);

    #[test]
    fn selection_examples() {
        assert_eq!(select_dimensions(O, &[1e-6, 0.5, 1e-5], 1e-4).unwrap().selected, vec![1]);
        assert_eq!(select_dimensions(O, &[0.1, -0.2, 0.3], 1e-4).unwrap().selected, vec![0, 1, 2]);
        assert!(select_dimensions(O, &[0.1], 0.0).is_err());
        assert!(selection_is_stable(O, &[0.0, 0.5, 1e-40], &[1e-30, 1e-10, 1e-4]).unwrap());
        assert!(!selection_is_stable(O, &[0.0, 0.5, 1e-6], &[1e-30, 1e-4]).unwrap());
    }

    #[test]
    fn partition_examples() {
        let parts = drop_partition(&[3, 5, 8, 9], 0.25, 7).unwrap();
        assert_eq!(parts.len(), 4);
        assert!(parts.iter().all(|p| p.len() == 1));
        assert_eq!(drop_partition(&[1, 2, 3, 4, 5], 0.5, 0).unwrap().len(), 2);
        assert_eq!(drop_partition(&[1, 2, 3, 4, 5, 6], 0.33, 0).unwrap().len(), 3);
        assert!(drop_partition(&[1], 1.0, 0).is_err());
        assert!(drop_partition(&[], 0.5, 0).is_err());
    }

    #[test]
    fn overlap_examples() {
        let a = ObjectiveId::new(Structure::Pos, Target::Depth);
        let sel = |o, s: Vec<usize>| DimSelection { objective: o, epsilon: 1e-4, dim: 10, selected: s };
        let t = overlap_table(&[sel(O, vec![1, 2, 3]), sel(a, vec![1, 2, 3])]).unwrap();
        assert_eq!(t.counts, vec![vec![3, 3], vec![3, 3]]);
        let t = overlap_table(&[sel(O, vec![1, 2]), sel(a, vec![5, 6, 7])]).unwrap();
        assert_eq!(t.counts, vec![vec![2, 0], vec![0, 3]]);
        assert_eq!(t.count(a, O), Some(0));
        let mut other = sel(a, vec![1]);
        other.dim = 11;
        assert!(overlap_table(&[sel(O, vec![1]), other]).is_err());
        assert!(t.to_tsv().starts_with("objective\tDEP-DEPTH\tPOS-DEPTH\n"));
    }

    #[test]
    fn histogram_examples() {
        let d: Vec<f64> = (0..40).map(|i| if i < 25 { 1.0 + i as f64 } else { 0.0 }).collect();
        let h = histogram_export(&[(O, &d)], 1e-4, 10).unwrap();
        assert_eq!(h.counts, vec![vec![10, 10, 5, 0]]);

        // K = 3 weights 100, 10, 1.
        let a = [0.0, 0.3, 0.02, 0.0];
        let b = [0.5, 0.0, 0.0, 0.0];
        let c = [0.0, 0.0, 0.9, 0.7];
        let p = ObjectiveId::new(Structure::Pos, Target::Depth);
        let r = ObjectiveId::new(Structure::Rand, Target::Depth);
        let h = histogram_export(&[(O, &a), (p, &b), (r, &c)], 1e-4, 2).unwrap();
        // weights: [5.0, 30.0, 2.9, 0.7]
        assert_eq!(h.order, vec![1, 0, 2, 3]);
        assert_eq!(h.counts, vec![vec![1, 1], vec![1, 0], vec![0, 2]]);

        let reversed = histogram_export(&[(r, &c), (p, &b), (O, &a)], 1e-4, 2).unwrap();
        let totals = |h: &Histogram| -> Vec<usize> { h.counts.iter().map(|c| c.iter().sum()).collect() };
        let mut t1 = totals(&h);
        let mut t2 = totals(&reversed);
        t1.sort();
        t2.sort();
        assert_eq!(t1, t2);
        assert!(h.to_tsv().contains("1\tRAND-DEPTH\t2"));
    }

    proptest! {
        #[test]
        fn selection_is_monotone(
            d in proptest::collection::vec(-1.0f64..1.0, 1..40),
            e1 in 1e-6f64..0.5,
            e2 in 1e-6f64..0.5,
        ) {
            let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
            let small = select_dimensions(O, &d, lo).unwrap().selected;
            let large = select_dimensions(O, &d, hi).unwrap().selected;
            prop_assert!(large.iter().all(|i| small.contains(i)));
        }

        #[test]
        fn partition_is_disjoint_and_exhaustive(
            n in 1usize..60,
            f in prop::sample::select(vec![0.25, 0.33, 0.5]),
            seed in any::<u64>(),
        ) {
            let selected: Vec<usize> = (0..n).map(|i| 3 * i + 1).collect();
            let parts = drop_partition(&selected, f, seed).unwrap();
            let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
            all.sort();
            prop_assert_eq!(&all, &selected);
            let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }

        #[test]
        fn overlap_is_symmetric_and_bounded(
            sets in proptest::collection::vec(proptest::collection::btree_set(0usize..20, 0..20), 1..6),
        ) {
            let sels: Vec<DimSelection> = sets
                .iter()
                .enumerate()
                .map(|(k, s)| DimSelection {
                    objective: ObjectiveId::all()[k],
                    epsilon: 1e-4,
                    dim: 20,
                    selected: s.iter().copied().collect(),
                })
                .collect();
            let t = overlap_table(&sels).unwrap();
            for a in 0..sels.len() {
                prop_assert_eq!(t.counts[a][a], sels[a].len());
                for b in 0..sels.len() {
                    prop_assert_eq!(t.counts[a][b], t.counts[b][a]);
                    prop_assert!(t.counts[a][b] <= t.counts[a][a].min(t.counts[b][b]));
                }
            }
        }
    }
}
