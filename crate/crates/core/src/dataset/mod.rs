//! Cohort selection, survival labels, subject-level splits and samples.

mod synth;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Resection, SubjectRecord, Volume};

pub use synth::{synth_generate, synth_generate_with, PhantomConfig, SynthCohort};

/// Name of the seeded generator behind every shuffle and synthetic draw.
pub const RNG_ALGORITHM: &str = "ChaCha8";

/// Survival below this many days is short-term.
pub const SHORT_THRESHOLD_DAYS: u32 = 260;
/// Survival at or above this many days is long-term.
pub const LONG_THRESHOLD_DAYS: u32 = 470;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("subject `{0}` has no survival information and cannot be labelled")]
    NotLabelable(String),
    #[error("subject `{subject}` is missing sequences: {missing:?}")]
    MissingSequences {
        subject: String,
        missing: Vec<Sequence>,
    },
    #[error("invalid split: {0}")]
    Config(String),
    #[error("split manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SurvivalClass {
    Long = 0,
    Medium = 1,
    Short = 2,
}

impl SurvivalClass {
    pub const ALL: [SurvivalClass; 3] = [Self::Long, Self::Medium, Self::Short];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Long => "long-term",
            Self::Medium => "medium-term",
            Self::Short => "short-term",
        }
    }
}

impl fmt::Display for SurvivalClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Half-open buckets: `[0, 260)` short, `[260, 470)` medium, `[470, ∞)` long.
pub fn derive_label(survival_days: u32) -> SurvivalClass {
    if survival_days < SHORT_THRESHOLD_DAYS {
        SurvivalClass::Short
    } else if survival_days < LONG_THRESHOLD_DAYS {
        SurvivalClass::Medium
    } else {
        SurvivalClass::Long
    }
}

pub fn label_record(record: &SubjectRecord) -> Result<SurvivalClass> {
    record
        .survival_days
        .map(derive_label)
        .ok_or_else(|| DatasetError::NotLabelable(record.subject_id.clone()))
}

/// Keeps gross-total-resection subjects with known survival, in input order.
pub fn filter_cohort(records: &[SubjectRecord]) -> Vec<SubjectRecord> {
    records
        .iter()
        .filter(|r| r.resection == Resection::Gtr && r.survival_days.is_some())
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sequence {
    T1,
    T1ce,
    T2,
    Flair,
}

impl Sequence {
    pub const ALL: [Sequence; 4] = [Self::T1, Self::T1ce, Self::T2, Self::Flair];

    /// Lower-case token used in `<subject_id>_<sequence>.rvol` file names.
    pub fn token(self) -> &'static str {
        match self {
            Self::T1 => "t1",
            Self::T1ce => "t1ce",
            Self::T2 => "t2",
            Self::Flair => "flair",
        }
    }
}

impl fmt::Display for Sequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::T1 => "T1",
            Self::T1ce => "T1CE",
            Self::T2 => "T2",
            Self::Flair => "FLAIR",
        })
    }
}

impl FromStr for Sequence {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|q| q.token().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown sequence `{s}`"))
    }
}

/// One MRI sequence of one subject, with the subject's age and label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    pub sequence: Sequence,
    pub volume: Volume,
    pub age: f32,
    pub label: SurvivalClass,
}

/// Emits one sample per sequence for each record.
///
/// Every record must be labelable and `lookup` must supply all four sequences.
pub fn build_samples<F>(records: &[SubjectRecord], mut lookup: F) -> Result<Vec<Sample>>
where
    F: FnMut(&str, Sequence) -> Option<Volume>,
{
    let mut samples = Vec::with_capacity(records.len() * Sequence::ALL.len());
    for record in records {
        let label = label_record(record)?;
        let mut found = Vec::with_capacity(4);
        let mut missing = Vec::new();
        for seq in Sequence::ALL {
            match lookup(&record.subject_id, seq) {
                Some(v) => found.push((seq, v)),
                None => missing.push(seq),
            }
        }
        if !missing.is_empty() {
            return Err(DatasetError::MissingSequences {
                subject: record.subject_id.clone(),
                missing,
            });
        }
        samples.extend(found.into_iter().map(|(sequence, volume)| Sample {
            subject_id: record.subject_id.clone(),
            sequence,
            volume,
            age: record.age,
            label,
        }));
    }
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn train_subjects(&self) -> Vec<String> {
        unique_subjects(&self.train)
    }

    pub fn test_subjects(&self) -> Vec<String> {
        unique_subjects(&self.test)
    }
}

/// Subject ids in order of first appearance.
pub fn unique_subjects(samples: &[Sample]) -> Vec<String> {
    let mut seen = HashSet::new();
    samples
        .iter()
        .filter(|s| seen.insert(s.subject_id.as_str()))
        .map(|s| s.subject_id.clone())
        .collect()
}

/// In-place Fisher–Yates shuffle drawing `next_u64() % (i + 1)` for each `i` from the top.
pub fn shuffle<T, R: RngCore + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        items.swap(i, j);
    }
}

/// Number of subjects given to the first partition: `floor(fraction·n)`, kept in `1..n`.
pub fn partition_count(n_subjects: usize, fraction: f64) -> usize {
    ((fraction * n_subjects as f64).floor() as usize).clamp(1, n_subjects.saturating_sub(1).max(1))
}

/// Seeded subject-level split; every sequence follows its subject.
pub fn split_by_subject(
    samples: &[Sample],
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    use rand::SeedableRng;

    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::Config(format!(
            "train_fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let mut subjects = unique_subjects(samples);
    if subjects.len() < 2 {
        return Err(DatasetError::Config(format!(
            "need at least 2 subjects to split, got {}",
            subjects.len()
        )));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    shuffle(&mut subjects, &mut rng);
    let n_train = partition_count(subjects.len(), train_fraction);
    let train_set: HashSet<&str> = subjects[..n_train].iter().map(String::as_str).collect();
    let (train, test): (Vec<Sample>, Vec<Sample>) = samples
        .iter()
        .cloned()
        .partition(|s| train_set.contains(s.subject_id.as_str()));
    Ok(DatasetSplit { train, test, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Test => "test",
        })
    }
}

impl FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown partition `{other}`")),
        }
    }
}

/// Split manifest text: one `subject_id,partition` line per subject.
pub fn render_split_manifest(split: &DatasetSplit) -> String {
    let mut out = String::new();
    for (subjects, part) in [
        (split.train_subjects(), Partition::Train),
        (split.test_subjects(), Partition::Test),
    ] {
        for s in subjects {
            out.push_str(&format!("{s},{part}\n"));
        }
    }
    out
}

pub fn parse_split_manifest(text: &str) -> Result<HashMap<String, Partition>> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| DatasetError::Manifest {
            line: i + 1,
            reason,
        };
        let (subject, part) = line
            .split_once(',')
            .ok_or_else(|| err("expected `subject_id,partition`".into()))?;
        let part: Partition = part.parse().map_err(err)?;
        if out.insert(subject.trim().to_string(), part).is_some() {
            return Err(err(format!("subject `{subject}` listed twice")));
        }
    }
    Ok(out)
}

pub fn read_split_manifest(
    path: impl AsRef<Path>,
) -> std::io::Result<Result<HashMap<String, Partition>>> {
    Ok(parse_split_manifest(&fs::read_to_string(path)?))
}

/// Class counts per subject (each subject counted once).
pub fn subject_class_counts(samples: &[Sample]) -> [usize; 3] {
    let mut seen = BTreeSet::new();
    let mut counts = [0; 3];
    for s in samples {
        if seen.insert(s.subject_id.as_str()) {
            counts[s.label.code()] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;
    use proptest::prelude::*;

    fn record(id: &str, days: Option<u32>, resection: Resection) -> SubjectRecord {
        SubjectRecord {
            subject_id: id.into(),
            age: 55.0,
            survival_days: days,
            resection,
        }
    }

    fn tiny_volume() -> Volume {
        Volume::from_u8(Dims::new(1, 1, 1), vec![0]).unwrap()
    }

    fn samples_for(n: usize) -> Vec<Sample> {
        let records: Vec<_> = (0..n)
            .map(|i| record(&format!("s{i}"), Some(100 * i as u32), Resection::Gtr))
            .collect();
        build_samples(&records, |_, _| Some(tiny_volume())).unwrap()
    }

    #[test]
    fn label_examples() {
        assert_eq!(derive_label(100), SurvivalClass::Short);
        assert_eq!(derive_label(300), SurvivalClass::Medium);
        assert_eq!(derive_label(600), SurvivalClass::Long);
        assert_eq!(derive_label(260), SurvivalClass::Medium);
        assert_eq!(derive_label(259), SurvivalClass::Short);
        assert_eq!(derive_label(470), SurvivalClass::Long);
        assert_eq!(derive_label(469), SurvivalClass::Medium);
        assert_eq!(SurvivalClass::Short.code(), 2);
        assert!(label_record(&record("x", None, Resection::Gtr)).is_err());
    }

    #[test]
    fn cohort_filter_examples() {
        let recs = vec![
            record("a", Some(400), Resection::Gtr),
            record("b", Some(400), Resection::Str),
            record("c", None, Resection::Gtr),
            record("d", Some(10), Resection::Na),
            record("e", Some(900), Resection::Gtr),
        ];
        let kept: Vec<_> = filter_cohort(&recs)
            .into_iter()
            .map(|r| r.subject_id)
            .collect();
        assert_eq!(kept, vec!["a", "e"]);
    }

    #[test]
    fn one_subject_fans_out_to_four_samples() {
        let mut r = record("s", Some(300), Resection::Gtr);
        r.age = 61.5;
        let samples = build_samples(&[r], |_, _| Some(tiny_volume())).unwrap();
        assert_eq!(samples.len(), 4);
        assert!(samples
            .iter()
            .all(|s| s.age == 61.5 && s.label == SurvivalClass::Medium));
        let seqs: Vec<_> = samples.iter().map(|s| s.sequence).collect();
        assert_eq!(seqs, Sequence::ALL.to_vec());
    }

    #[test]
    fn missing_sequence_is_named() {
        let r = record("s", Some(300), Resection::Gtr);
        let err =
            build_samples(&[r], |_, seq| (seq != Sequence::Flair).then(tiny_volume)).unwrap_err();
        assert_eq!(
            err,
            DatasetError::MissingSequences {
                subject: "s".into(),
                missing: vec![Sequence::Flair]
            }
        );
        assert!(err.to_string().contains("Flair"));
    }

    #[test]
    fn split_counts_for_full_cohort_size() {
        let samples = samples_for(118);
        let split = split_by_subject(&samples, 0.8, 7).unwrap();
        assert_eq!(split.train.len(), 376);
        assert_eq!(split.test.len(), 96);
        assert_eq!(split.train_subjects().len(), 94);
        assert_eq!(split.test_subjects().len(), 24);
    }

    #[test]
    fn split_is_deterministic_and_validated() {
        let samples = samples_for(10);
        assert_eq!(
            split_by_subject(&samples, 0.8, 3).unwrap(),
            split_by_subject(&samples, 0.8, 3).unwrap()
        );
        assert!(split_by_subject(&samples, 0.0, 3).is_err());
        assert!(split_by_subject(&samples, 1.0, 3).is_err());
        assert!(split_by_subject(&samples_for(1), 0.5, 3).is_err());
    }

    #[test]
    fn split_manifest_roundtrip() {
        let split = split_by_subject(&samples_for(5), 0.8, 1).unwrap();
        let text = render_split_manifest(&split);
        let parsed = parse_split_manifest(&text).unwrap();
        assert_eq!(parsed.len(), 5);
        assert_eq!(
            parsed.values().filter(|p| **p == Partition::Test).count(),
            1
        );
        assert!(parse_split_manifest("a,train\na,test\n").is_err());
        assert!(parse_split_manifest("a;train\n").is_err());
    }

    #[test]
    fn shuffle_is_a_permutation() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut v: Vec<usize> = (0..50).collect();
        shuffle(&mut v, &mut rng);
        let mut sorted = v.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }

    proptest! {
        #[test]
        fn label_code_is_non_increasing_in_days(a in 0u32..2000, b in 0u32..2000) {
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(derive_label(hi).code() <= derive_label(lo).code());
        }

        #[test]
        fn split_partitions_subjects(n in 2usize..30, seed in any::<u64>(), frac in 0.05f64..0.95) {
            let samples = samples_for(n);
            let split = split_by_subject(&samples, frac, seed).unwrap();
            let train: HashSet<_> = split.train_subjects().into_iter().collect();
            let test: HashSet<_> = split.test_subjects().into_iter().collect();
            prop_assert!(train.is_disjoint(&test));
            prop_assert_eq!(train.len() + test.len(), n);
            prop_assert_eq!(split.train.len() + split.test.len(), samples.len());
            prop_assert_eq!(split.train.len() % 4, 0);
            let mut all: Vec<_> = split.train.iter().chain(&split.test).map(|s| (s.subject_id.clone(), s.sequence)).collect();
            let mut want: Vec<_> = samples.iter().map(|s| (s.subject_id.clone(), s.sequence)).collect();
            all.sort();
            want.sort();
            prop_assert_eq!(all, want);
        }

        #[test]
        fn build_samples_quadruples(n in 0usize..20) {
            prop_assert_eq!(samples_for(n).len(), 4 * n);
        }
    }
}
