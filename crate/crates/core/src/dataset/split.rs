//! Case-stratified train/val/test assignment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::DatasetError;
use crate::imaging::{Her2Score, Manifest, Split, Status};

/// Whole-case split assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub assignment: BTreeMap<String, Split>,
    pub seed: u64,
}

impl SplitPlan {
    pub fn to_text(&self) -> String {
        let mut s = format!("#seed={}\n", self.seed);
        for (case, split) in &self.assignment {
            let _ = writeln!(s, "{case}\t{split}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<SplitPlan, DatasetError> {
        let mut seed = 0;
        let mut assignment = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let bad = |reason: String| DatasetError::Parse { line: i + 1, reason };
            if let Some(rest) = line.strip_prefix("#seed=") {
                seed = rest.trim().parse().map_err(|e| bad(format!("seed: {e}")))?;
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (case, split) = line.split_once('\t').ok_or_else(|| bad("expected case_id<TAB>split".into()))?;
            let split: Split = split.trim().parse().map_err(bad)?;
            if split == Split::Unassigned {
                return Err(bad("plan entries must name train, val or test".into()));
            }
            if assignment.insert(case.to_string(), split).is_some() {
                return Err(bad(format!("case '{case}' listed twice")));
            }
        }
        Ok(SplitPlan { assignment, seed })
    }
}

/// Split fractions in train, val, test order. A zero fraction disables that split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions(pub [f64; 3]);

impl SplitFractions {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let f = self.0;
        if f.iter().any(|v| !v.is_finite() || *v < 0.0) || f.iter().all(|&v| v == 0.0) {
            return Err(DatasetError::InvalidArgument(format!("invalid split fractions {f:?}")));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DatasetError::InvalidArgument(format!("split fractions {f:?} do not sum to 1")));
        }
        Ok(())
    }

    fn active(&self) -> Vec<(Split, f64)> {
        Split::ASSIGNED.into_iter().zip(self.0).filter(|(_, f)| *f > 0.0).collect()
    }
}

struct CaseInfo {
    score: Her2Score,
    tiles: usize,
}

/// Assigns whole cases so every active split holds at least one case of every HER2 score
/// present, then fills remaining cases greedily toward the tile-count fractions.
/// Only kept tiles count.
pub fn stratified_split(manifest: &Manifest, fractions: SplitFractions, seed: u64) -> Result<SplitPlan, DatasetError> {
    fractions.validate()?;
    let mut cases: BTreeMap<&str, CaseInfo> = BTreeMap::new();
    for r in manifest.records().iter().filter(|r| r.status == Status::Kept) {
        let info = cases.entry(&r.case_id).or_insert(CaseInfo { score: r.her2_score, tiles: 0 });
        if info.score != r.her2_score {
            return Err(DatasetError::InconsistentCaseScore(r.case_id.clone()));
        }
        info.tiles += 1;
    }
    if cases.is_empty() {
        return Err(DatasetError::InvalidArgument("manifest has no kept tiles to split".into()));
    }

    let active = fractions.active();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_score: BTreeMap<Her2Score, Vec<&str>> = BTreeMap::new();
    for (id, info) in &cases {
        by_score.entry(info.score).or_default().push(id);
    }

    let mut assignment: BTreeMap<String, Split> = BTreeMap::new();
    let mut loads: BTreeMap<Split, usize> = BTreeMap::new();
    let mut remaining: Vec<&str> = Vec::new();
    // seed splits ordered by decreasing fraction; each takes one case per score
    let mut seeding = active.clone();
    seeding.sort_by(|a, b| b.1.total_cmp(&a.1));
    for (score, ids) in by_score.iter_mut() {
        if ids.len() < active.len() {
            return Err(DatasetError::InfeasibleSplit { score: *score, cases: ids.len(), splits: active.len() });
        }
        ids.shuffle(&mut rng);
        let (seeds, rest) = ids.split_at(active.len());
        let mut seeds = seeds.to_vec();
        seeds.sort_by_key(|id| std::cmp::Reverse(cases[id].tiles));
        for (id, (split, _)) in seeds.into_iter().zip(&seeding) {
            assignment.insert(id.to_string(), *split);
            *loads.entry(*split).or_default() += cases[id].tiles;
        }
        remaining.extend_from_slice(rest);
    }

    // shuffle for tie-breaking, then largest cases first (stable sort keeps shuffle order)
    remaining.shuffle(&mut rng);
    remaining.sort_by_key(|id| std::cmp::Reverse(cases[id].tiles));
    let total: usize = cases.values().map(|c| c.tiles).sum();
    for id in remaining {
        let deficit = |s: &Split, f: f64| f * total as f64 - *loads.get(s).unwrap_or(&0) as f64;
        let (split, _) = active
            .iter()
            .copied()
            .reduce(|best, cand| if deficit(&cand.0, cand.1) > deficit(&best.0, best.1) { cand } else { best })
            .expect("at least one active split");
        assignment.insert(id.to_string(), split);
        *loads.entry(split).or_default() += cases[id].tiles;
    }
    Ok(SplitPlan { assignment, seed })
}

/// Writes a plan into the manifest: kept tiles take their case's split, others are unassigned.
pub fn apply_split(manifest: &Manifest, plan: &SplitPlan) -> Result<Manifest, DatasetError> {
    let mut records = manifest.records().to_vec();
    for r in &mut records {
        r.split = if r.status == Status::Kept {
            *plan.assignment.get(&r.case_id).ok_or_else(|| DatasetError::UnknownCase(r.case_id.clone()))?
        } else {
            Split::Unassigned
        };
    }
    Ok(manifest.with_records(records)?)
}

/// Scores covered by each split under a plan.
pub fn split_coverage(manifest: &Manifest, plan: &SplitPlan) -> BTreeMap<Split, BTreeSet<Her2Score>> {
    let mut cov: BTreeMap<Split, BTreeSet<Her2Score>> = BTreeMap::new();
    for r in manifest.records().iter().filter(|r| r.status == Status::Kept) {
        if let Some(s) = plan.assignment.get(&r.case_id) {
            cov.entry(*s).or_default().insert(r.her2_score);
        }
    }
    cov
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::TileRecord;

    fn toy_manifest(cases: &[(&str, Her2Score, usize)]) -> Manifest {
        let mut records = Vec::new();
        for (case, score, n) in cases {
            for i in 0..*n {
                let mut r = TileRecord::pending(format!("{case}_{i}"), *case, *score, "s.png", "t.png");
                r.status = Status::Kept;
                records.push(r);
            }
        }
        Manifest::new("toy", 0.5, records).unwrap()
    }

    fn twelve_cases() -> Manifest {
        let mut spec = Vec::new();
        let names: Vec<String> = (0..12).map(|i| format!("case{i:02}")).collect();
        for (i, name) in names.iter().enumerate() {
            spec.push((name.as_str(), Her2Score::ALL[i % 4], 5 + i));
        }
        toy_manifest(&spec)
    }

    #[test]
    fn twelve_cases_give_one_case_per_score_per_split() {
        let m = twelve_cases();
        let plan = stratified_split(&m, SplitFractions([0.5, 0.25, 0.25]), 7).unwrap();

        // exhaustive oracle: every feasible assignment of 12 cases to 3 splits
        let cases: Vec<(String, Her2Score)> = (0..12).map(|i| (format!("case{i:02}"), Her2Score::ALL[i % 4])).collect();
        let mut feasible = 0usize;
        let mut plan_is_feasible = false;
        for code in 0..3usize.pow(12) {
            let mut c = code;
            let mut cov = [[false; 4]; 3];
            let mut assign = Vec::with_capacity(12);
            for (_, score) in &cases {
                cov[c % 3][score.class_index()] = true;
                assign.push(Split::ASSIGNED[c % 3]);
                c /= 3;
            }
            if cov.iter().all(|s| s.iter().all(|&b| b)) {
                feasible += 1;
                // every feasible assignment uses exactly one case per score per split
                let mut counts = [[0; 4]; 3];
                for ((_, score), split) in cases.iter().zip(&assign) {
                    counts[*split as usize][score.class_index()] += 1;
                }
                assert!(counts.iter().all(|s| s.iter().all(|&n| n == 1)));
                if cases.iter().zip(&assign).all(|((id, _), s)| plan.assignment[id] == *s) {
                    plan_is_feasible = true;
                }
            }
        }
        assert_eq!(feasible, 6usize.pow(4));
        assert!(plan_is_feasible);
    }

    #[test]
    fn single_case_is_infeasible() {
        let m = toy_manifest(&[("only", Her2Score::Two, 10)]);
        assert!(matches!(
            stratified_split(&m, SplitFractions([0.6, 0.2, 0.2]), 1),
            Err(DatasetError::InfeasibleSplit { cases: 1, splits: 3, .. })
        ));
    }

    #[test]
    fn deterministic_given_seed() {
        let m = twelve_cases();
        let f = SplitFractions([0.5, 0.25, 0.25]);
        assert_eq!(stratified_split(&m, f, 42).unwrap(), stratified_split(&m, f, 42).unwrap());
    }

    #[test]
    fn greedy_fill_tracks_fractions() {
        let names: Vec<String> = (0..40).map(|i| format!("c{i}")).collect();
        let spec: Vec<(&str, Her2Score, usize)> =
            names.iter().enumerate().map(|(i, n)| (n.as_str(), Her2Score::ALL[i % 4], 10 + (i * 37) % 50)).collect();
        let m = toy_manifest(&spec);
        let plan = stratified_split(&m, SplitFractions([0.6, 0.2, 0.2]), 3).unwrap();
        let applied = apply_split(&m, &plan).unwrap();
        let total = applied.len() as f64;
        let train = applied.count_split(Split::Train) as f64 / total;
        assert!((train - 0.6).abs() < 0.05, "train fraction {train}");
        for (_, scores) in split_coverage(&m, &plan) {
            assert_eq!(scores.len(), 4);
        }
    }

    #[test]
    fn zero_fraction_disables_split() {
        let names: Vec<String> = (0..8).map(|i| format!("c{i}")).collect();
        let spec: Vec<(&str, Her2Score, usize)> =
            names.iter().enumerate().map(|(i, n)| (n.as_str(), Her2Score::ALL[i % 4], 3)).collect();
        let m = toy_manifest(&spec);
        let plan = stratified_split(&m, SplitFractions([0.8, 0.2, 0.0]), 0).unwrap();
        assert!(plan.assignment.values().all(|s| *s != Split::Test));
    }

    #[test]
    fn plan_text_round_trip() {
        let plan = stratified_split(&twelve_cases(), SplitFractions([0.5, 0.25, 0.25]), 9).unwrap();
        assert_eq!(SplitPlan::from_text(&plan.to_text()).unwrap(), plan);
    }

    #[test]
    fn invalid_fractions_rejected() {
        let m = twelve_cases();
        assert!(stratified_split(&m, SplitFractions([0.5, 0.5, 0.5]), 0).is_err());
        assert!(stratified_split(&m, SplitFractions([1.5, -0.5, 0.0]), 0).is_err());
    }
}
