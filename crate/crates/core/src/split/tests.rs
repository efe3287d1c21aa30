use super::*;
use crate::data::PlasmidRecord;
use crate::rng::substream;
use rand::Rng;

/// Full-matrix dynamic-programming oracle, kept deliberately naive and
/// independent of the rolling-row implementation.
fn lev_oracle(a: &str, b: &str) -> usize {
    let (a, b) = (a.as_bytes(), b.as_bytes());
    let (n, m) = (a.len(), b.len());
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        dp[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            dp[i][j] = (dp[i - 1][j] + 1)
                .min(dp[i][j - 1] + 1)
                .min(dp[i - 1][j - 1] + cost);
        }
    }
    dp[n][m]
}

fn random_dna(rng: &mut impl Rng, len: usize) -> String {
    const BASES: [char; 5] = ['A', 'C', 'G', 'T', 'N'];
    (0..len).map(|_| BASES[rng.random_range(0..5)]).collect()
}

fn record(id: &str, lab: &str, seq: &str) -> PlasmidRecord {
    PlasmidRecord {
        sequence_id: id.into(),
        lab_id: lab.into(),
        sequence: seq.into(),
        metadata: [0; crate::data::METADATA_DIM],
        held_out_test: false,
    }
}

#[test]
fn levenshtein_base_cases() {
    assert_eq!(levenshtein("", "AACG"), 4);
    assert_eq!(levenshtein("AACG", ""), 4);
    assert_eq!(levenshtein("GATTACA", "GATTACA"), 0);
    assert_eq!(levenshtein("GATTACA", "GCATGCU"), 4);
    assert_eq!(lev_oracle("GATTACA", "GCATGCU"), 4);
}

#[test]
fn levenshtein_matches_full_matrix_oracle() {
    for i in 0..1000u64 {
        let mut rng = substream(i, "lev-oracle");
        let la = rng.random_range(0..=200);
        let lb = rng.random_range(0..=200);
        let a = random_dna(&mut rng, la);
        let b = random_dna(&mut rng, lb);
        assert_eq!(levenshtein(&a, &b), lev_oracle(&a, &b), "a={a} b={b}");
    }
}

#[test]
fn levenshtein_metric_axioms() {
    for i in 0..1000u64 {
        let mut rng = substream(i, "lev-metric");
        let (la, lb, lc) = (
            rng.random_range(0..=60),
            rng.random_range(0..=60),
            rng.random_range(0..=60),
        );
        let a = random_dna(&mut rng, la);
        let b = random_dna(&mut rng, lb);
        let c = random_dna(&mut rng, lc);
        let (ab, ba) = (levenshtein(&a, &b), levenshtein(&b, &a));
        assert_eq!(ab, ba, "symmetry");
        assert_eq!(ab == 0, a == b, "identity of indiscernibles");
        let (bc, ac) = (levenshtein(&b, &c), levenshtein(&a, &c));
        assert!(ac <= ab + bc, "triangle inequality: {ac} > {ab} + {bc}");
    }
}

#[test]
fn banded_levenshtein_agrees_with_oracle() {
    for i in 0..1000u64 {
        let mut rng = substream(i, "lev-band");
        let la = rng.random_range(0..=120);
        let lb = rng.random_range(0..=120);
        let a = random_dna(&mut rng, la);
        let b = random_dna(&mut rng, lb);
        let cutoff = rng.random_range(0..40);
        let truth = lev_oracle(&a, &b);
        match levenshtein_within(&a, &b, cutoff) {
            Some(d) => {
                assert_eq!(d, truth);
                assert!(d <= cutoff);
            }
            None => assert!(truth > cutoff, "cut off {truth} <= {cutoff}"),
        }
    }
}

#[test]
fn identical_sequences_share_a_group() {
    let records = vec![record("a", "lab1", "ACGTACGT"), record("b", "lab1", "ACGTACGT")];
    let groups = group_lab_sequences(&records, GroupThreshold::Absolute(0));
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0].member_ids, vec!["a", "b"]);
    assert_eq!(groups[0].representative_id, "a");
}

#[test]
fn distant_sequences_split_into_groups() {
    // Distance between the two is 8, above the threshold of 2.
    let records = vec![record("a", "lab1", "AAAAAAAA"), record("b", "lab1", "CCCCCCCC")];
    let groups = group_lab_sequences(&records, GroupThreshold::Absolute(2));
    assert_eq!(groups.len(), 2);
}

#[test]
fn labs_never_share_groups() {
    let mut rng = substream(21, "grouping-labs");
    let records: Vec<PlasmidRecord> = (0..30)
        .map(|i| {
            record(
                &format!("s{i}"),
                &format!("lab{}", i % 3),
                &random_dna(&mut rng, 40),
            )
        })
        .collect();
    let groups = group_lab_sequences(&records, GroupThreshold::FractionOfShorter(0.9));
    for g in &groups {
        for id in &g.member_ids {
            let rec = records.iter().find(|r| &r.sequence_id == id).unwrap();
            assert_eq!(rec.lab_id, g.lab_id);
        }
    }
    let total: usize = groups.iter().map(SequenceGroup::len).sum();
    assert_eq!(total, records.len());
}

#[test]
fn transitive_linkage_merges_chains() {
    // a~b and b~c within threshold, a~c outside: single linkage joins all.
    let records = vec![
        record("a", "lab1", "AAAAAAAA"),
        record("b", "lab1", "AAAAAATT"),
        record("c", "lab1", "AAAATTTT"),
    ];
    let groups = group_lab_sequences(&records, GroupThreshold::Absolute(2));
    assert_eq!(groups.len(), 1);
}

#[test]
fn single_group_goes_to_train_with_warning() {
    let groups = vec![SequenceGroup {
        lab_id: "lab1".into(),
        member_ids: vec!["a".into(), "b".into()],
        representative_id: "a".into(),
    }];
    let out = split_grouped(&groups, 0.15, 7);
    assert_eq!(out.plan.count(Assignment::Train), 2);
    assert_eq!(out.plan.count(Assignment::Validation), 0);
    assert!(!out.warnings.is_empty());
}

#[test]
fn ten_singletons_fraction_point2_yields_two_validation_groups() {
    let groups: Vec<SequenceGroup> = (0..10)
        .map(|i| SequenceGroup {
            lab_id: "lab1".into(),
            member_ids: vec![format!("s{i}")],
            representative_id: format!("s{i}"),
        })
        .collect();
    let out = split_grouped(&groups, 0.2, 3);
    assert_eq!(out.plan.count(Assignment::Validation), 2);
    assert_eq!(out.plan.count(Assignment::Train), 8);
}

#[test]
fn no_group_spans_both_sides() {
    for seed in 0..20u64 {
        let mut rng = substream(seed, "split-span");
        let groups: Vec<SequenceGroup> = (0..rng.random_range(1..15))
            .map(|g| {
                let members: Vec<String> = (0..rng.random_range(1..6))
                    .map(|i| format!("g{g}m{i}"))
                    .collect();
                SequenceGroup {
                    lab_id: format!("lab{}", g % 3),
                    representative_id: members[0].clone(),
                    member_ids: members,
                }
            })
            .collect();
        let out = split_grouped(&groups, 0.3, seed);
        for g in &groups {
            let sides: std::collections::BTreeSet<_> = g
                .member_ids
                .iter()
                .map(|id| out.plan.assignment(id).unwrap())
                .collect();
            assert_eq!(sides.len(), 1, "group spans sides: {:?}", g.member_ids);
        }
    }
}

#[test]
fn cv_folds_partition_groups() {
    let groups: Vec<SequenceGroup> = (0..10)
        .map(|i| SequenceGroup {
            lab_id: "lab1".into(),
            member_ids: vec![format!("s{i}")],
            representative_id: format!("s{i}"),
        })
        .collect();
    let folds = make_cv_folds(&groups, 5, 11).unwrap();
    assert_eq!(folds.len(), 5);
    let mut val_counts = std::collections::BTreeMap::new();
    for fold in &folds {
        let val_ids: Vec<_> = fold
            .iter()
            .filter(|(_, a)| *a == Assignment::Validation)
            .map(|(id, _)| id.to_string())
            .collect();
        assert_eq!(val_ids.len(), 2, "each fold validates on 2 groups");
        for id in val_ids {
            *val_counts.entry(id).or_insert(0) += 1;
        }
        assert_eq!(fold.len(), 10, "each fold covers every sequence");
    }
    assert_eq!(val_counts.len(), 10, "union of validation buckets is everything");
    assert!(val_counts.values().all(|&c| c == 1), "each group in exactly one bucket");
}

#[test]
fn cv_rejects_fewer_groups_than_k() {
    let groups: Vec<SequenceGroup> = (0..3)
        .map(|i| SequenceGroup {
            lab_id: "lab1".into(),
            member_ids: vec![format!("s{i}")],
            representative_id: format!("s{i}"),
        })
        .collect();
    assert!(make_cv_folds(&groups, 5, 1).is_err());
}

#[test]
fn split_file_round_trips_and_builds_fold_plans() {
    let groups: Vec<SequenceGroup> = (0..6)
        .map(|i| SequenceGroup {
            lab_id: "lab1".into(),
            member_ids: vec![format!("s{i}")],
            representative_id: format!("s{i}"),
        })
        .collect();
    let folds = make_cv_folds(&groups, 3, 5).unwrap();
    let mut file = SplitFile::from_folds(&folds);
    file.add_test_ids(["t1".to_string()]);

    let tmp = tempfile::NamedTempFile::new().unwrap();
    file.write_csv(tmp.path()).unwrap();
    let reread = SplitFile::read_csv(tmp.path()).unwrap();
    assert_eq!(file, reread);

    let plan1 = reread.plan_for_fold(1).unwrap();
    assert_eq!(plan1.assignment("t1"), Some(Assignment::Test));
    assert_eq!(plan1.count(Assignment::Validation), 2);
    assert_eq!(plan1.count(Assignment::Train), 4);
    for fold in &folds {
        let expect_val: Vec<_> = fold
            .iter()
            .filter(|(_, a)| *a == Assignment::Validation)
            .map(|(id, _)| id.to_string())
            .collect();
        let plan = reread.plan_for_fold(fold.fold_index.unwrap()).unwrap();
        for id in expect_val {
            assert_eq!(plan.assignment(&id), Some(Assignment::Validation));
        }
    }
    assert!(reread.plan_for_fold(99).is_err());
}

#[test]
fn same_seed_reproduces_split() {
    let groups: Vec<SequenceGroup> = (0..9)
        .map(|i| SequenceGroup {
            lab_id: format!("lab{}", i % 2),
            member_ids: vec![format!("s{i}")],
            representative_id: format!("s{i}"),
        })
        .collect();
    let a = split_grouped(&groups, 0.25, 42);
    let b = split_grouped(&groups, 0.25, 42);
    assert_eq!(a.plan, b.plan);
    let c = split_grouped(&groups, 0.25, 43);
    assert!(a.plan != c.plan || a.plan.count(Assignment::Validation) == c.plan.count(Assignment::Validation));
}
