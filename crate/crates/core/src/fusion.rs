//! Decision-level fusion of prediction tables: weighted probability
//! averaging, plurality voting and grid search over averaging weights.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifiers::{rows_for, PredictionTable, ProbabilityDistribution};
use crate::error::{Error, Result};

/// Allowed deviation of a weight vector's sum from 1.
pub const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum FusionMethod {
    WeightedAverage { weights: Vec<f64> },
    Vote,
}

impl FusionMethod {
    pub fn name(&self) -> &'static str {
        match self {
            FusionMethod::WeightedAverage { .. } => "weighted_average",
            FusionMethod::Vote => "vote",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    #[serde(flatten)]
    pub method: FusionMethod,
    pub member_names: Vec<String>,
}

impl FusionSpec {
    pub fn weighted(member_names: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        let spec = Self {
            method: FusionMethod::WeightedAverage { weights },
            member_names,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Equal weights over all members.
    pub fn equal_weights(member_names: Vec<String>) -> Result<Self> {
        let n = member_names.len();
        Self::weighted(member_names, vec![1.0 / n as f64; n])
    }

    pub fn vote(member_names: Vec<String>) -> Result<Self> {
        let spec = Self {
            method: FusionMethod::Vote,
            member_names,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.member_names.len() < 2 {
            return Err(Error::Fusion("fusion needs at least two members".into()));
        }
        let distinct: BTreeSet<&String> = self.member_names.iter().collect();
        if distinct.len() != self.member_names.len() {
            return Err(Error::Fusion(format!(
                "member names are not distinct: {}",
                self.member_names.join(", ")
            )));
        }
        if let FusionMethod::WeightedAverage { weights } = &self.method {
            validate_weights(weights, self.member_names.len())?;
        }
        Ok(())
    }

    /// `method(name1+name2+...)`.
    pub fn derived_name(&self) -> String {
        format!("{}({})", self.method.name(), self.member_names.join("+"))
    }
}

pub fn validate_weights(weights: &[f64], members: usize) -> Result<()> {
    if weights.len() != members {
        return Err(Error::Fusion(format!(
            "{} weights for {members} members",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Fusion(format!("weights must be non-negative: {weights:?}")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
        return Err(Error::Fusion(format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

fn check_members<D: Borrow<ProbabilityDistribution>>(dists: &[D]) -> Result<usize> {
    if dists.len() < 2 {
        return Err(Error::Fusion("fusion needs at least two distributions".into()));
    }
    let n = dists[0].borrow().len();
    for d in dists {
        let found = d.borrow().len();
        if found != n {
            return Err(Error::Dimension { expected: n, found });
        }
    }
    Ok(n)
}

/// Convex combination `sum_i w_i p_i`, clamped into [0, 1] against
/// rounding.
pub fn weighted_average<D: Borrow<ProbabilityDistribution>>(
    dists: &[D],
    weights: &[f64],
) -> Result<ProbabilityDistribution> {
    let n = check_members(dists)?;
    validate_weights(weights, dists.len())?;
    Ok(combine(dists, weights, n))
}

fn combine<D: Borrow<ProbabilityDistribution>>(dists: &[D], weights: &[f64], n: usize) -> ProbabilityDistribution {
    let mut out = vec![0.0; n];
    for (d, &w) in dists.iter().zip(weights) {
        for (o, p) in out.iter_mut().zip(d.borrow().probs()) {
            *o += w * p;
        }
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    ProbabilityDistribution::from_trusted(out)
}

/// Each member votes for its argmax. Most votes wins; ties go to the label
/// with the highest mean probability, then to the lowest index.
pub fn plurality_vote<D: Borrow<ProbabilityDistribution>>(dists: &[D]) -> Result<usize> {
    let n = check_members(dists)?;
    let mut votes = vec![0usize; n];
    let mut mean = vec![0.0; n];
    for d in dists {
        let d = d.borrow();
        votes[d.argmax()] += 1;
        for (m, p) in mean.iter_mut().zip(d.probs()) {
            *m += p / dists.len() as f64;
        }
    }
    let mut best = 0;
    for k in 1..n {
        let better = votes[k] > votes[best] || (votes[k] == votes[best] && mean[k] > mean[best]);
        if better {
            best = k;
        }
    }
    Ok(best)
}

fn check_tables<T: Borrow<PredictionTable>>(tables: &[T]) -> Result<()> {
    if tables.len() < 2 {
        return Err(Error::Fusion("fusion needs at least two tables".into()));
    }
    let first = tables[0].borrow();
    for t in &tables[1..] {
        let t = t.borrow();
        if t.label_set != first.label_set {
            return Err(Error::Fusion(format!(
                "label sets differ between {:?} and {:?}",
                first.model_name, t.model_name
            )));
        }
    }
    let union: BTreeSet<&String> = tables.iter().flat_map(|t| t.borrow().rows.keys()).collect();
    let asymmetric: Vec<String> = union
        .into_iter()
        .filter(|id| !tables.iter().all(|t| t.borrow().rows.contains_key(*id)))
        .cloned()
        .collect();
    if !asymmetric.is_empty() {
        return Err(Error::IdMismatch { ids: asymmetric });
    }
    Ok(())
}

/// Applies `spec` row by row. Tables must share label sets and id sets;
/// vote results are one-hot rows.
pub fn fuse_tables<T: Borrow<PredictionTable>>(tables: &[T], spec: &FusionSpec) -> Result<PredictionTable> {
    spec.validate()?;
    if spec.member_names.len() != tables.len() {
        return Err(Error::Fusion(format!(
            "{} member names for {} tables",
            spec.member_names.len(),
            tables.len()
        )));
    }
    check_tables(tables)?;
    let first = tables[0].borrow();
    let n = first.label_set.len();
    let mut out = PredictionTable::new(spec.derived_name(), first.label_set.clone());
    for id in first.rows.keys() {
        let rows = rows_for(tables, id);
        let fused = match &spec.method {
            FusionMethod::WeightedAverage { weights } => combine(&rows, weights, n),
            FusionMethod::Vote => ProbabilityDistribution::one_hot(n, plurality_vote(&rows)?),
        };
        out.rows.insert(id.clone(), fused);
    }
    Ok(out)
}

/// Every weight vector on the simplex grid with `divisions` steps, ordered
/// descending lexicographically (largest first weight first).
pub fn simplex_grid(members: usize, divisions: usize) -> Vec<Vec<f64>> {
    fn fill(remaining: usize, slots: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if slots == 1 {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for c in (0..=remaining).rev() {
            prefix.push(c);
            fill(remaining - c, slots - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut counts = Vec::new();
    if members > 0 {
        fill(divisions, members, &mut Vec::with_capacity(members), &mut counts);
    }
    counts
        .into_iter()
        .map(|c| c.into_iter().map(|k| k as f64 / divisions as f64).collect())
        .collect()
}

/// Grid divisions for a step: `ceil(1 / step)`, so the grid is never
/// coarser than requested.
pub fn grid_divisions(step: f64) -> Result<usize> {
    if !(step > 0.0 && step <= 0.5) {
        return Err(Error::Fusion(format!("grid step must lie in (0, 0.5], got {step}")));
    }
    Ok((1.0 / step - 1e-9).ceil() as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSearch {
    pub weights: Vec<f64>,
    pub accuracy: f64,
    pub candidates: usize,
}

/// Exhaustive search over the weight grid for the weighted average that
/// maximises accuracy against `gold`. Ties keep the earliest candidate in
/// [`simplex_grid`] order.
pub fn search_weights<T: Borrow<PredictionTable> + Sync>(
    tables: &[T],
    gold: &BTreeMap<String, usize>,
    step: f64,
) -> Result<WeightSearch> {
    let divisions = grid_divisions(step)?;
    check_tables(tables)?;
    let first = tables[0].borrow();
    if first.rows.is_empty() {
        return Err(Error::Fusion("cannot search weights over empty tables".into()));
    }
    let ids: Vec<&String> = first.rows.keys().collect();
    let targets: Vec<usize> = ids
        .iter()
        .map(|id| {
            gold.get(*id)
                .copied()
                .ok_or_else(|| Error::Fusion(format!("no gold label for {id:?}")))
        })
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<&ProbabilityDistribution>> = ids.iter().map(|id| rows_for(tables, id)).collect();
    let n = first.label_set.len();

    let grid = simplex_grid(tables.len(), divisions);
    let scores: Vec<usize> = grid
        .par_iter()
        .map(|weights| {
            rows.iter()
                .zip(&targets)
                .filter(|(r, &y)| combine(r, weights, n).argmax() == y)
                .count()
        })
        .collect();
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(WeightSearch {
        weights: grid[best].clone(),
        accuracy: scores[best] as f64 / ids.len() as f64,
        candidates: grid.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabelSet;

    fn pd(v: &[f64]) -> ProbabilityDistribution {
        ProbabilityDistribution::new(v.to_vec()).unwrap()
    }

    fn table(name: &str, rows: &[(&str, &[f64])]) -> PredictionTable {
        let n = rows[0].1.len();
        let labels = LabelSet::new((0..n).map(|i| format!("l{i}"))).unwrap();
        let mut t = PredictionTable::new(name, labels);
        for (id, p) in rows {
            t.insert(*id, pd(p)).unwrap();
        }
        t
    }

    #[test]
    fn average_hand_example() {
        let out = weighted_average(&[pd(&[0.6, 0.4]), pd(&[0.2, 0.8])], &[0.5, 0.5]).unwrap();
        assert!((out.probs()[0] - 0.4).abs() < 1e-15);
        assert!((out.probs()[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn average_corner_weight_is_identity() {
        let a = pd(&[0.1, 0.2, 0.7]);
        let out = weighted_average(&[a.clone(), pd(&[0.5, 0.5, 0.0])], &[1.0, 0.0]).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn average_of_copies_is_fixed_point() {
        let a = pd(&[0.25, 0.35, 0.4]);
        let out = weighted_average(&[&a, &a, &a], &[0.2, 0.3, 0.5]).unwrap();
        for (x, y) in out.probs().iter().zip(a.probs()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn average_rejects_bad_weights_and_shapes() {
        let a = pd(&[0.5, 0.5]);
        assert!(weighted_average(&[&a, &a], &[0.6, 0.6]).is_err());
        assert!(weighted_average(&[&a, &a], &[1.5, -0.5]).is_err());
        assert!(weighted_average(&[&a, &a], &[1.0]).is_err());
        assert!(weighted_average(&[&a], &[1.0]).is_err());
        let b = pd(&[1.0, 0.0, 0.0]);
        assert!(weighted_average(&[&a, &b], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn vote_majority() {
        // labels: 0 = joy, 1 = anger
        let joy = pd(&[0.9, 0.1]);
        let anger = pd(&[0.2, 0.8]);
        assert_eq!(plurality_vote(&[&joy, &joy, &anger]).unwrap(), 0);
    }

    #[test]
    fn vote_tie_broken_by_mean() {
        // one vote each for joy (0) and anger (1); mean joy 0.45, anger 0.50
        let joy_voter = pd(&[0.5, 0.4, 0.1]);
        let anger_voter = pd(&[0.4, 0.6, 0.0]);
        assert_eq!(plurality_vote(&[&joy_voter, &anger_voter]).unwrap(), 1);
    }

    #[test]
    fn vote_full_tie_goes_to_lowest_index() {
        let a = pd(&[0.0, 0.5, 0.0, 0.5]);
        let b = pd(&[0.0, 0.0, 0.5, 0.5]);
        // argmax(a) = 1, argmax(b) = 2; means: l1 .25, l2 .25, l3 .5 (no votes)
        assert_eq!(plurality_vote(&[&a, &b]).unwrap(), 1);
        let c = pd(&[0.5, 0.5]);
        assert_eq!(plurality_vote(&[&c, &c]).unwrap(), 0);
    }

    #[test]
    fn fuse_two_single_rows() {
        let a = table("a", &[("u1", &[1.0, 0.0])]);
        let b = table("b", &[("u1", &[0.0, 1.0])]);
        let spec = FusionSpec::equal_weights(vec!["a".into(), "b".into()]).unwrap();
        let fused = fuse_tables(&[a, b], &spec).unwrap();
        assert_eq!(fused.rows["u1"].probs(), &[0.5, 0.5]);
        assert_eq!(fused.model_name, "weighted_average(a+b)");
    }

    #[test]
    fn fuse_id_mismatch_names_the_id() {
        let a = table("a", &[("u1", &[1.0, 0.0]), ("u2", &[1.0, 0.0])]);
        let b = table("b", &[("u1", &[0.0, 1.0])]);
        let spec = FusionSpec::equal_weights(vec!["a".into(), "b".into()]).unwrap();
        match fuse_tables(&[a, b], &spec) {
            Err(Error::IdMismatch { ids }) => assert_eq!(ids, ["u2"]),
            other => panic!("expected id mismatch, got {other:?}"),
        }
    }

    #[test]
    fn fuse_vote_is_one_hot() {
        let a = table("a", &[("u1", &[0.7, 0.3]), ("u2", &[0.1, 0.9])]);
        let b = table("b", &[("u1", &[0.6, 0.4]), ("u2", &[0.4, 0.6])]);
        let c = table("c", &[("u1", &[0.2, 0.8]), ("u2", &[0.3, 0.7])]);
        let spec = FusionSpec::vote(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let fused = fuse_tables(&[a, b, c], &spec).unwrap();
        assert_eq!(fused.rows["u1"].probs(), &[1.0, 0.0]);
        assert_eq!(fused.rows["u2"].probs(), &[0.0, 1.0]);
    }

    #[test]
    fn spec_validation() {
        assert!(FusionSpec::equal_weights(vec!["a".into()]).is_err());
        assert!(FusionSpec::equal_weights(vec!["a".into(), "a".into()]).is_err());
        assert!(FusionSpec::weighted(vec!["a".into(), "b".into()], vec![0.7, 0.2]).is_err());
        let json = serde_json::to_value(FusionSpec::vote(vec!["a".into(), "b".into()]).unwrap()).unwrap();
        assert_eq!(json["method"], "vote");
        let spec: FusionSpec = serde_json::from_str(
            r#"{"method":"weighted_average","weights":[0.25,0.75],"member_names":["x","y"]}"#,
        )
        .unwrap();
        assert_eq!(spec.method, FusionMethod::WeightedAverage { weights: vec![0.25, 0.75] });
    }

    #[test]
    fn grid_size_and_order() {
        let g = simplex_grid(2, 20);
        assert_eq!(g.len(), 21);
        assert_eq!(g[0], vec![1.0, 0.0]);
        assert_eq!(g[20], vec![0.0, 1.0]);
        assert_eq!(simplex_grid(3, 4).len(), 15);
        assert_eq!(grid_divisions(0.05).unwrap(), 20);
        assert_eq!(grid_divisions(0.5).unwrap(), 2);
        assert_eq!(grid_divisions(0.3).unwrap(), 4);
        assert!(grid_divisions(0.0).is_err());
        assert!(grid_divisions(0.6).is_err());
    }

    #[test]
    fn search_dominant_member() {
        let gold = BTreeMap::from([("u1".to_string(), 0), ("u2".to_string(), 1)]);
        let a = table("a", &[("u1", &[0.9, 0.1]), ("u2", &[0.2, 0.8])]);
        let b = table("b", &[("u1", &[0.1, 0.9]), ("u2", &[0.8, 0.2])]);
        let found = search_weights(&[a, b], &gold, 0.05).unwrap();
        assert_eq!(found.weights, vec![1.0, 0.0]);
        assert_eq!(found.accuracy, 1.0);
    }

    #[test]
    fn search_identical_tables_tiebreak() {
        let gold = BTreeMap::from([("u1".to_string(), 0)]);
        let a = table("a", &[("u1", &[0.3, 0.7])]);
        let found = search_weights(&[a.clone(), a], &gold, 0.1).unwrap();
        assert_eq!(found.weights, vec![1.0, 0.0]);
        assert_eq!(found.accuracy, 0.0);
    }
}
