//! Records, subject-level splits, class priors and synthetic data.

pub mod io;
mod record;
mod stage;
pub mod synth;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;

pub use io::{load_records, read_labels, read_manifest, read_signal, write_labels, write_records, ManifestEntry};
pub use record::{EpochTiming, Record};
pub use stage::{SleepStage, NUM_STAGES};
pub use synth::{synth_generate, StageSignal, SynthConfig, DEFAULT_TRANSITION, SKEWED_TRANSITION};

use crate::error::{param_err, Error, Result};
use crate::numeric::{streams, SeedTree};

/// Train / validation / test fractions used throughout.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.6, 0.2, 0.2];

/// Records partitioned by subject.
#[derive(Clone, Debug, Default)]
pub struct Split {
    pub train: Vec<Record>,
    pub validation: Vec<Record>,
    pub test: Vec<Record>,
}

/// Partitions records by `subject_id` so that no subject spans two
/// splits. Validation and test receive `round(fraction × subjects)`
/// subjects each; the remainder goes to training.
pub fn split_by_subject(records: Vec<Record>, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return param_err(format!("split fractions {fractions:?} outside [0, 1]"));
    }
    let mut subjects: Vec<String> = records
        .iter()
        .map(|r| r.subject_id().to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let count = subjects.len();
    if count < 3 {
        return param_err(format!("need at least 3 subjects to split, found {count}"));
    }
    let n_val = (fractions[1] * count as f64).round() as usize;
    let n_test = (fractions[2] * count as f64).round() as usize;
    if n_val == 0 || n_test == 0 || n_val + n_test >= count {
        return param_err(format!(
            "fractions {fractions:?} leave an empty split for {count} subjects"
        ));
    }
    subjects.shuffle(&mut SeedTree::new(seed).child(streams::SPLIT).rng());
    let n_train = count - n_val - n_test;
    let val: BTreeSet<&str> = subjects[n_train..n_train + n_val].iter().map(String::as_str).collect();
    let test: BTreeSet<&str> = subjects[n_train + n_val..].iter().map(String::as_str).collect();

    let mut split = Split::default();
    for r in records {
        if val.contains(r.subject_id()) {
            split.validation.push(r);
        } else if test.contains(r.subject_id()) {
            split.test.push(r);
        } else {
            split.train.push(r);
        }
    }
    Ok(split)
}

/// Label counts per stage.
pub fn class_counts<'a>(labels: impl IntoIterator<Item = &'a SleepStage>) -> [usize; NUM_STAGES] {
    let mut counts = [0; NUM_STAGES];
    for s in labels {
        counts[s.index()] += 1;
    }
    counts
}

/// Inverse-frequency class weights `α_k = n_μ / n_k` with `n_μ = n / |K|`.
pub fn class_prior<'a>(labels: impl IntoIterator<Item = &'a SleepStage>) -> Result<[f64; NUM_STAGES]> {
    let counts = class_counts(labels);
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::DegenerateDistribution {
            class: SleepStage::ALL[k].token().to_string(),
        });
    }
    let n: usize = counts.iter().sum();
    let mean = n as f64 / NUM_STAGES as f64;
    Ok(counts.map(|c| mean / c as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use SleepStage::*;

    fn subjects(n: usize) -> Vec<Record> {
        (0..n)
            .map(|i| Record::new(format!("s{i:03}"), EpochTiming::TINY, vec![0.0; 4], vec![Wake]).unwrap())
            .collect()
    }

    fn ids(rs: &[Record]) -> BTreeSet<String> {
        rs.iter().map(|r| r.subject_id().to_string()).collect()
    }

    #[test]
    fn split_sizes() {
        let s = split_by_subject(subjects(10), DEFAULT_FRACTIONS, 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (6, 2, 2));
        let s = split_by_subject(subjects(400), DEFAULT_FRACTIONS, 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (240, 80, 80));
        let s = split_by_subject(subjects(3), DEFAULT_FRACTIONS, 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (1, 1, 1));
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_reproducible() {
        let a = split_by_subject(subjects(23), DEFAULT_FRACTIONS, 5).unwrap();
        let b = split_by_subject(subjects(23), DEFAULT_FRACTIONS, 5).unwrap();
        assert_eq!(ids(&a.test), ids(&b.test));
        assert_eq!(ids(&a.validation), ids(&b.validation));
        let (tr, va, te) = (ids(&a.train), ids(&a.validation), ids(&a.test));
        assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        assert_eq!(tr.len() + va.len() + te.len(), 23);
        let c = split_by_subject(subjects(23), DEFAULT_FRACTIONS, 6).unwrap();
        assert_ne!(ids(&a.test), ids(&c.test));
    }

    #[test]
    fn records_of_one_subject_stay_together() {
        let mut rs = subjects(5);
        rs.extend(subjects(5));
        let s = split_by_subject(rs, DEFAULT_FRACTIONS, 2).unwrap();
        assert_eq!(s.train.len() + s.validation.len() + s.test.len(), 10);
        assert!(ids(&s.train).is_disjoint(&ids(&s.test)));
        assert_eq!(s.test.len(), 2);
    }

    #[test]
    fn too_few_subjects() {
        assert!(matches!(
            split_by_subject(subjects(2), DEFAULT_FRACTIONS, 0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn prior_arithmetic() {
        let balanced: Vec<_> = SleepStage::ALL.iter().flat_map(|&s| vec![s; 50]).collect();
        assert_eq!(class_prior(&balanced).unwrap(), [1.0; 4]);

        let mut skew = vec![Wake; 100];
        skew.extend(vec![Rem; 50]);
        skew.extend(vec![Light; 25]);
        skew.extend(vec![Deep; 25]);
        assert_eq!(class_prior(&skew).unwrap(), [0.5, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn rare_classes_get_large_weights() {
        // REM and Deep each below 10% of labels
        let mut labels = vec![Wake; 400];
        labels.extend(vec![Light; 440]);
        labels.extend(vec![Rem; 90]);
        labels.extend(vec![Deep; 70]);
        let a = class_prior(&labels).unwrap();
        assert!(a[Rem.index()] > 2.5 && a[Deep.index()] > 2.5);
    }

    #[test]
    fn missing_class_is_degenerate() {
        let labels = vec![Wake, Light, Rem];
        assert!(matches!(
            class_prior(&labels),
            Err(Error::DegenerateDistribution { class }) if class == "D"
        ));
    }

    proptest::proptest! {
        #[test]
        fn weighted_counts_sum_to_total(raw in proptest::collection::vec(0usize..4, 4..300)) {
            let mut labels: Vec<SleepStage> = raw.iter().map(|&i| SleepStage::from_index(i).unwrap()).collect();
            labels.extend(SleepStage::ALL);
            let alpha = class_prior(&labels).unwrap();
            let counts = class_counts(&labels);
            let n = labels.len() as f64;
            for k in 0..NUM_STAGES {
                proptest::prop_assert!((counts[k] as f64 * alpha[k] - n / 4.0).abs() < 1e-9 * n);
            }
        }
    }
}
