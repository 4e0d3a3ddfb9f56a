use super::stage::SleepStage;
use crate::error::{Error, Result};

/// Sampling rate and epoch length; their product is the number of signal
/// samples carrying one label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochTiming {
    pub sample_rate_hz: usize,
    pub epoch_seconds: usize,
}

impl EpochTiming {
    /// 32 Hz flow signal, 30-second epochs (960 samples per label).
    pub const PAPER: Self = Self {
        sample_rate_hz: 32,
        epoch_seconds: 30,
    };
    /// 4 Hz, 4-second epochs (16 samples per label).
    pub const DESK: Self = Self {
        sample_rate_hz: 4,
        epoch_seconds: 4,
    };
    /// 2 Hz, 2-second epochs (4 samples per label), for gradient checks.
    pub const TINY: Self = Self {
        sample_rate_hz: 2,
        epoch_seconds: 2,
    };

    pub fn samples_per_epoch(self) -> usize {
        self.sample_rate_hz * self.epoch_seconds
    }
}

impl Default for EpochTiming {
    fn default() -> Self {
        Self::PAPER
    }
}

/// One subject's flow signal with one stage label per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    subject_id: String,
    timing: EpochTiming,
    signal: Vec<f64>,
    labels: Vec<SleepStage>,
}

impl Record {
    /// Validates `signal.len() == labels.len() * samples_per_epoch` and `labels` non-empty.
    pub fn new(
        subject_id: impl Into<String>,
        timing: EpochTiming,
        signal: Vec<f64>,
        labels: Vec<SleepStage>,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        if timing.samples_per_epoch() == 0 {
            return Err(Error::Parameter("sample rate and epoch length must be positive".into()));
        }
        if labels.is_empty() {
            return Err(Error::EmptySequence);
        }
        let expected = labels.len() * timing.samples_per_epoch();
        if signal.len() != expected {
            return Err(Error::Alignment {
                subject: subject_id,
                expected,
                actual: signal.len(),
            });
        }
        Ok(Self {
            subject_id,
            timing,
            signal,
            labels,
        })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn timing(&self) -> EpochTiming {
        self.timing
    }

    pub fn signal(&self) -> &[f64] {
        &self.signal
    }

    pub fn labels(&self) -> &[SleepStage] {
        &self.labels
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|s| s.index()).collect()
    }

    /// Number of labelled epochs `m`.
    pub fn num_epochs(&self) -> usize {
        self.labels.len()
    }

    /// Number of samples `n`.
    pub fn num_samples(&self) -> usize {
        self.signal.len()
    }

    /// Samples owned by epoch `t`.
    pub fn epoch_signal(&self, t: usize) -> &[f64] {
        let spe = self.timing.samples_per_epoch();
        &self.signal[t * spe..(t + 1) * spe]
    }

    /// Copy with the signal replaced; the length must stay aligned.
    pub fn with_signal(&self, signal: Vec<f64>) -> Result<Self> {
        Self::new(self.subject_id.clone(), self.timing, signal, self.labels.clone())
    }
}
