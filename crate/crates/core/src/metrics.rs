//! Agreement and sleep-efficiency metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dataset::{SleepStage, NUM_STAGES};
use crate::error::{param_err, Error, Result};

/// Square confusion matrix, rows = truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    k: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return param_err("confusion matrix must be square");
        }
        Ok(Self {
            k,
            counts: rows.concat(),
        })
    }

    /// Tallies label index pairs.
    pub fn from_indices(k: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return param_err(format!(
                "truth has {} labels, prediction {}",
                truth.len(),
                predicted.len()
            ));
        }
        let mut c = Self::new(k);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= k || p >= k {
                return param_err(format!("label index out of range for {k} classes"));
            }
            c.counts[t * k + p] += 1;
        }
        Ok(c)
    }

    pub fn from_stages(truth: &[SleepStage], predicted: &[SleepStage]) -> Result<Self> {
        let idx = |s: &[SleepStage]| s.iter().map(|x| x.index()).collect::<Vec<_>>();
        Self::from_indices(NUM_STAGES, &idx(truth), &idx(predicted))
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if other.k != self.k {
            return param_err("cannot merge confusion matrices of different sizes");
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    fn row_sum(&self, i: usize) -> u64 {
        (0..self.k).map(|j| self.get(i, j)).sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, j)).sum()
    }

    pub fn accuracy(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::EmptySequence),
            n => Ok(self.trace() as f64 / n as f64),
        }
    }

    /// Cohen's κ = (p_o − p_e)/(1 − p_e) with `p_e = Σ_k row_k col_k / n²`,
    /// evaluated as `(n·trace − Σ row·col) / (n² − Σ row·col)` in integers.
    /// When chance agreement is total, κ is 1 for perfect agreement and 0
    /// otherwise.
    pub fn kappa(&self) -> Result<f64> {
        let n = self.total() as u128;
        if n == 0 {
            return Err(Error::EmptySequence);
        }
        let chance: u128 = (0..self.k)
            .map(|i| self.row_sum(i) as u128 * self.col_sum(i) as u128)
            .sum();
        let observed = n * self.trace() as u128;
        let denom = n * n - chance;
        if denom == 0 {
            return Ok(if observed == n * n { 1.0 } else { 0.0 });
        }
        Ok((observed as f64 - chance as f64) / denom as f64)
    }

    /// Recall of each true class (`None` when the class never occurs).
    pub fn recall(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|i| match self.row_sum(i) {
                0 => None,
                r => Some(self.get(i, i) as f64 / r as f64),
            })
            .collect()
    }

    /// CSV with stage tokens as headers; rows = truth.
    pub fn to_csv(&self) -> String {
        let names: Vec<String> = (0..self.k)
            .map(|i| SleepStage::from_index(i).map_or(i.to_string(), |s| s.token().to_string()))
            .collect();
        let mut out = format!("truth\\predicted,{}\n", names.join(","));
        for (i, name) in names.iter().enumerate() {
            let row: Vec<String> = (0..self.k).map(|j| self.get(i, j).to_string()).collect();
            let _ = writeln!(out, "{name},{}", row.join(","));
        }
        out
    }
}

pub fn accuracy(truth: &[SleepStage], predicted: &[SleepStage]) -> Result<f64> {
    Confusion::from_stages(truth, predicted)?.accuracy()
}

pub fn kappa(truth: &[SleepStage], predicted: &[SleepStage]) -> Result<f64> {
    Confusion::from_stages(truth, predicted)?.kappa()
}

/// Fraction of epochs that are not Wake.
pub fn sleep_efficiency(labels: &[SleepStage]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptySequence);
    }
    let asleep = labels.iter().filter(|&&s| s != SleepStage::Wake).count();
    Ok(asleep as f64 / labels.len() as f64)
}

/// Mean relative sleep-efficiency error over subjects.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeMae {
    /// `None` when every subject was excluded.
    pub value: Option<f64>,
    pub used: usize,
    /// Subjects with true SE = 0, for which the relative error is undefined.
    pub excluded: usize,
}

/// Mean of `|ŜE − SE| / SE` over `(true, predicted)` pairs, skipping
/// subjects whose true SE is zero.
pub fn se_mae(pairs: &[(f64, f64)]) -> SeMae {
    let (mut sum, mut used, mut excluded) = (0.0, 0, 0);
    for &(truth, pred) in pairs {
        if truth == 0.0 {
            excluded += 1;
        } else {
            sum += (pred - truth).abs() / truth;
            used += 1;
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} subject(s) with zero true sleep efficiency excluded from SE MAE");
    }
    SeMae {
        value: (used > 0).then(|| sum / used as f64),
        used,
        excluded,
    }
}

/// Per-subject sleep efficiencies.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectSe {
    pub subject_id: String,
    pub true_se: f64,
    pub predicted_se: f64,
}

/// Evaluation of predictions over a set of subjects.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub confusion: Confusion,
    pub accuracy: f64,
    pub kappa: f64,
    pub per_subject: Vec<SubjectSe>,
    pub se_mae: SeMae,
}

impl EvalReport {
    /// Builds the report from `(subject, truth, prediction)` triples.
    pub fn from_predictions<'a, I>(items: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a [SleepStage], &'a [SleepStage])>,
    {
        let mut confusion = Confusion::new(NUM_STAGES);
        let mut per_subject = Vec::new();
        for (id, truth, pred) in items {
            confusion.merge(&Confusion::from_stages(truth, pred)?)?;
            per_subject.push(SubjectSe {
                subject_id: id.to_string(),
                true_se: sleep_efficiency(truth)?,
                predicted_se: sleep_efficiency(pred)?,
            });
        }
        if per_subject.is_empty() {
            return Err(Error::EmptySequence);
        }
        let pairs: Vec<(f64, f64)> = per_subject.iter().map(|s| (s.true_se, s.predicted_se)).collect();
        Ok(Self {
            accuracy: confusion.accuracy()?,
            kappa: confusion.kappa()?,
            confusion,
            se_mae: se_mae(&pairs),
            per_subject,
        })
    }

    /// `key=value` lines: accuracy, kappa, se_mae, n_subjects.
    pub fn summary(&self) -> String {
        let mae = self.se_mae.value.map_or("nan".to_string(), |v| v.to_string());
        format!(
            "accuracy={}\nkappa={}\nse_mae={mae}\nn_subjects={}\n",
            self.accuracy,
            self.kappa,
            self.per_subject.len()
        )
    }

    pub fn subjects_csv(&self) -> String {
        let mut out = String::from("subject_id,true_se,predicted_se\n");
        for s in &self.per_subject {
            let _ = writeln!(out, "{},{},{}", s.subject_id, s.true_se, s.predicted_se);
        }
        out
    }

    /// Writes `confusion.csv`, `summary.txt` and `subjects.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("confusion.csv"), self.confusion.to_csv())?;
        fs::write(dir.join("summary.txt"), self.summary())?;
        fs::write(dir.join("subjects.csv"), self.subjects_csv())?;
        Ok(())
    }
}
