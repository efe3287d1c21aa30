//! Leak-free dataset partitioning.
//!
//! Sequences from one lab are clustered by Levenshtein distance
//! (single-linkage: any pair within the threshold joins a group), and splits
//! assign whole groups to one side only, so near-duplicate plasmids never
//! straddle train and validation.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::PlasmidRecord;
use crate::error::{Error, Result};
use crate::rng::substream;

/// Unit-cost edit distance (insert / delete / substitute) with a rolling
/// row over the shorter string.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let (long, short) = if a.len() >= b.len() {
        (a.as_bytes(), b.as_bytes())
    } else {
        (b.as_bytes(), a.as_bytes())
    };
    if short.is_empty() {
        return long.len();
    }
    let m = short.len();
    let mut row: Vec<usize> = (0..=m).collect();
    for (i, &ca) in long.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, &cb) in short.iter().enumerate() {
            let cost = usize::from(ca != cb);
            let next = (row[j + 1] + 1).min(row[j] + 1).min(diag + cost);
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[m]
}

/// Banded edit distance: `Some(d)` when `d <= cutoff`, `None` as soon as the
/// distance must exceed the cutoff. Only cells within `cutoff` of the
/// diagonal are visited, so long dissimilar pairs exit early.
pub fn levenshtein_within(a: &str, b: &str, cutoff: usize) -> Option<usize> {
    let (a, b) = (a.as_bytes(), b.as_bytes());
    let (n, m) = (a.len(), b.len());
    if n.abs_diff(m) > cutoff {
        return None;
    }
    // Cells outside the band hold `inf`; band boundaries are re-set each row
    // because the two row buffers are reused.
    let inf = cutoff + 1;
    let mut prev: Vec<usize> = (0..=m).map(|j| if j <= cutoff { j } else { inf }).collect();
    let mut cur = vec![inf; m + 1];
    for i in 1..=n {
        let lo = i.saturating_sub(cutoff);
        let hi = (i + cutoff).min(m);
        let mut row_min = inf;
        if lo == 0 {
            cur[0] = i;
            row_min = i;
        } else {
            cur[lo - 1] = inf;
        }
        for j in lo.max(1)..=hi {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            let v = (prev[j] + 1)
                .min(cur[j - 1] + 1)
                .min(prev[j - 1] + cost)
                .min(inf);
            cur[j] = v;
            row_min = row_min.min(v);
        }
        if hi < m {
            cur[hi + 1] = inf;
        }
        if row_min > cutoff {
            return None;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    if prev[m] <= cutoff {
        Some(prev[m])
    } else {
        None
    }
}

/// Grouping threshold: two same-lab sequences join a group when their edit
/// distance is at or below it.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum GroupThreshold {
    Absolute(usize),
    /// Fraction of the shorter sequence's length.
    FractionOfShorter(f64),
}

impl GroupThreshold {
    fn cutoff(&self, len_a: usize, len_b: usize) -> usize {
        match *self {
            GroupThreshold::Absolute(t) => t,
            GroupThreshold::FractionOfShorter(f) => (f * len_a.min(len_b) as f64).floor() as usize,
        }
    }
}

impl Default for GroupThreshold {
    fn default() -> Self {
        GroupThreshold::FractionOfShorter(0.10)
    }
}

/// Near-duplicate sequences from one lab.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceGroup {
    pub lab_id: String,
    /// Member sequence ids in input order.
    pub member_ids: Vec<String>,
    /// First member in input order.
    pub representative_id: String,
}

impl SequenceGroup {
    pub fn len(&self) -> usize {
        self.member_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let root = self.find(self.parent[x]);
            self.parent[x] = root;
        }
        self.parent[x]
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Attach the larger root under the smaller for deterministic
            // input-order representatives.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Single-linkage clustering of each lab's sequences by edit distance.
/// Pair distances run in parallel; the merge is sequential in input order,
/// so the result is deterministic.
pub fn group_lab_sequences(
    records: &[PlasmidRecord],
    threshold: GroupThreshold,
) -> Vec<SequenceGroup> {
    // Labs in first-appearance order, members in input order.
    let mut lab_order: Vec<&str> = Vec::new();
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let entry = members.entry(r.lab_id.as_str()).or_default();
        if entry.is_empty() {
            lab_order.push(r.lab_id.as_str());
        }
        entry.push(i);
    }

    let mut groups = Vec::new();
    for lab in lab_order {
        let idxs = &members[lab];
        let pairs: Vec<(usize, usize)> = (0..idxs.len())
            .flat_map(|i| ((i + 1)..idxs.len()).map(move |j| (i, j)))
            .collect();
        let joined: Vec<(usize, usize)> = pairs
            .par_iter()
            .filter(|&&(i, j)| {
                let (sa, sb) = (&records[idxs[i]].sequence, &records[idxs[j]].sequence);
                let cutoff = threshold.cutoff(sa.len(), sb.len());
                levenshtein_within(sa, sb, cutoff).is_some()
            })
            .copied()
            .collect();
        let mut uf = UnionFind::new(idxs.len());
        for (i, j) in joined {
            uf.union(i, j);
        }
        let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..idxs.len() {
            by_root.entry(uf.find(i)).or_default().push(i);
        }
        for (_, group_members) in by_root {
            let member_ids: Vec<String> = group_members
                .iter()
                .map(|&i| records[idxs[i]].sequence_id.clone())
                .collect();
            groups.push(SequenceGroup {
                lab_id: lab.to_string(),
                representative_id: member_ids[0].clone(),
                member_ids,
            });
        }
    }
    groups
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Assignment {
    Train,
    Validation,
    Test,
}

impl std::fmt::Display for Assignment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Assignment::Train => "train",
            Assignment::Validation => "validation",
            Assignment::Test => "test",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Assignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Assignment::Train),
            "validation" => Ok(Assignment::Validation),
            "test" => Ok(Assignment::Test),
            other => Err(Error::InvalidInput(format!("bad assignment {other:?}"))),
        }
    }
}

/// Total, disjoint assignment of sequence ids; optionally one fold of a
/// cross-validation plan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    assignments: BTreeMap<String, Assignment>,
    pub fold_index: Option<usize>,
}

impl SplitPlan {
    pub fn new() -> Self {
        Self {
            assignments: BTreeMap::new(),
            fold_index: None,
        }
    }

    pub fn set(&mut self, sequence_id: &str, assignment: Assignment) {
        self.assignments.insert(sequence_id.to_string(), assignment);
    }

    pub fn assignment(&self, sequence_id: &str) -> Option<Assignment> {
        self.assignments.get(sequence_id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Assignment)> {
        self.assignments.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn count(&self, a: Assignment) -> usize {
        self.assignments.values().filter(|&&v| v == a).count()
    }
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self::new()
    }
}

pub struct SplitOutcome {
    pub plan: SplitPlan,
    pub warnings: Vec<String>,
}

/// Assigns whole groups to validation (in seeded-shuffle order) until the
/// validation share of records first reaches `val_fraction`; the rest train.
/// If that would leave training empty, everything trains instead and a
/// warning is recorded.
pub fn split_grouped(groups: &[SequenceGroup], val_fraction: f64, seed: u64) -> SplitOutcome {
    let total: usize = groups.iter().map(SequenceGroup::len).sum();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut substream(seed, "split-shuffle"));

    let mut warnings = Vec::new();
    let mut val_groups: Vec<usize> = Vec::new();
    let mut val_records = 0usize;
    for &gi in &order {
        if total > 0 && (val_records as f64 / total as f64) >= val_fraction {
            break;
        }
        val_groups.push(gi);
        val_records += groups[gi].len();
    }
    if !groups.is_empty() && val_groups.len() == groups.len() {
        warnings.push(format!(
            "validation would take all {} groups; assigning everything to train instead",
            groups.len()
        ));
        val_groups.clear();
    }

    let val_set: std::collections::BTreeSet<usize> = val_groups.iter().copied().collect();
    let mut plan = SplitPlan::new();
    for (gi, group) in groups.iter().enumerate() {
        let side = if val_set.contains(&gi) {
            Assignment::Validation
        } else {
            Assignment::Train
        };
        for id in &group.member_ids {
            plan.set(id, side);
        }
    }

    // A lab with a single group necessarily lands on one side only.
    let mut group_count: BTreeMap<&str, usize> = BTreeMap::new();
    for g in groups {
        *group_count.entry(g.lab_id.as_str()).or_insert(0) += 1;
    }
    for (lab, count) in group_count {
        if count == 1 {
            warnings.push(format!(
                "lab {lab:?} has a single group; all its records land on one side"
            ));
        }
    }

    SplitOutcome { plan, warnings }
}

/// Deals groups round-robin into `k` buckets after a seeded shuffle; fold
/// `i` validates on bucket `i` and trains on the rest.
pub fn make_cv_folds(groups: &[SequenceGroup], k: usize, seed: u64) -> Result<Vec<SplitPlan>> {
    if k < 2 {
        return Err(Error::Config(format!("cross-validation needs k >= 2, got {k}")));
    }
    if groups.len() < k {
        return Err(Error::InvalidInput(format!(
            "cannot build {k} folds from {} groups",
            groups.len()
        )));
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut substream(seed, "cv-shuffle"));

    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (pos, &gi) in order.iter().enumerate() {
        buckets[pos % k].push(gi);
    }

    let mut folds = Vec::with_capacity(k);
    for (fold, bucket) in buckets.iter().enumerate() {
        let val_set: std::collections::BTreeSet<usize> = bucket.iter().copied().collect();
        let mut plan = SplitPlan::new();
        plan.fold_index = Some(fold);
        for (gi, group) in groups.iter().enumerate() {
            let side = if val_set.contains(&gi) {
                Assignment::Validation
            } else {
                Assignment::Train
            };
            for id in &group.member_ids {
                plan.set(id, side);
            }
        }
        folds.push(plan);
    }
    Ok(folds)
}

/// On-disk split table: `sequence_id,assignment,fold`.
///
/// Without folds, `assignment` is the record's side and `fold` is empty.
/// With folds, every non-test row carries the index of the fold in which its
/// group is held out for validation (its training folds are all the others),
/// and `assignment` reads `train`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitFile {
    pub rows: BTreeMap<String, (Assignment, Option<usize>)>,
}

impl SplitFile {
    pub fn from_plan(plan: &SplitPlan) -> Self {
        let rows = plan
            .iter()
            .map(|(id, a)| (id.to_string(), (a, None)))
            .collect();
        Self { rows }
    }

    pub fn from_folds(folds: &[SplitPlan]) -> Self {
        let mut rows = BTreeMap::new();
        for fold in folds {
            let fi = fold.fold_index;
            for (id, a) in fold.iter() {
                if a == Assignment::Validation {
                    rows.insert(id.to_string(), (Assignment::Train, fi));
                }
            }
        }
        Self { rows }
    }

    pub fn add_test_ids<I: IntoIterator<Item = String>>(&mut self, ids: I) {
        for id in ids {
            self.rows.insert(id, (Assignment::Test, None));
        }
    }

    /// Single-split view: rows keep their stored assignment.
    pub fn plan(&self) -> SplitPlan {
        let mut plan = SplitPlan::new();
        for (id, &(a, _)) in &self.rows {
            plan.set(id, a);
        }
        plan
    }

    /// Cross-validation view: rows whose fold equals `fold` validate,
    /// other folded rows train, test rows stay test.
    pub fn plan_for_fold(&self, fold: usize) -> Result<SplitPlan> {
        let max_fold = self.rows.values().filter_map(|&(_, f)| f).max();
        match max_fold {
            None => {
                return Err(Error::InvalidInput(
                    "split file carries no folds; retrain without --fold or re-split with --folds"
                        .into(),
                ))
            }
            Some(mf) if fold > mf => {
                return Err(Error::InvalidInput(format!(
                    "fold {fold} out of range; split file has folds 0..={mf}"
                )))
            }
            _ => {}
        }
        let mut plan = SplitPlan::new();
        plan.fold_index = Some(fold);
        for (id, &(a, f)) in &self.rows {
            let side = match (a, f) {
                (Assignment::Test, _) => Assignment::Test,
                (_, Some(fi)) if fi == fold => Assignment::Validation,
                _ => Assignment::Train,
            };
            plan.set(id, side);
        }
        Ok(plan)
    }

    pub fn has_folds(&self) -> bool {
        self.rows.values().any(|&(_, f)| f.is_some())
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Dataset(e.to_string()))?;
        w.write_record(["sequence_id", "assignment", "fold"])
            .map_err(|e| Error::Dataset(e.to_string()))?;
        for (id, (a, fold)) in &self.rows {
            let fold_s = fold.map(|f| f.to_string()).unwrap_or_default();
            w.write_record([id.as_str(), &a.to_string(), &fold_s])
                .map_err(|e| Error::Dataset(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &std::path::Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        let headers: Vec<&str> = reader
            .headers()
            .map_err(|e| Error::Dataset(e.to_string()))?
            .iter()
            .collect();
        if headers != ["sequence_id", "assignment", "fold"] {
            return Err(Error::Dataset(format!(
                "{}: expected header sequence_id,assignment,fold",
                path.display()
            )));
        }
        let mut rows = BTreeMap::new();
        for row in reader.records() {
            let row = row.map_err(|e| Error::Dataset(e.to_string()))?;
            let id = row.get(0).unwrap_or("").to_string();
            let assignment: Assignment = row.get(1).unwrap_or("").parse()?;
            let fold = match row.get(2).unwrap_or("") {
                "" => None,
                s => Some(s.parse::<usize>().map_err(|_| {
                    Error::Dataset(format!("bad fold value {s:?} for {id:?}"))
                })?),
            };
            if rows.insert(id.clone(), (assignment, fold)).is_some() {
                return Err(Error::Dataset(format!("duplicate sequence_id {id:?}")));
            }
        }
        Ok(Self { rows })
    }
}

#[cfg(test)]
mod tests;
