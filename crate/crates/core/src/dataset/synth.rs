//! Synthetic flow-like signals with Markov sleep-stage dynamics.
//!
//! Labels follow a 4×4 row-stochastic chain started from Wake. Each epoch
//! draws a frequency and amplitude around its stage's nominal values and
//! emits a sinusoid (phase-continuous across epochs) plus Gaussian noise.
//!
//! The default transition matrix is a synthetic stand-in: Wake→Deep and
//! Deep→REM are forbidden (probability exactly zero), everything else is
//! a plausible sticky chain.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::record::{EpochTiming, Record};
use super::stage::{SleepStage, NUM_STAGES};
use crate::error::{param_err, Error, Result};
use crate::numeric::{streams, SeedTree};

/// Per-stage oscillation model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSignal {
    pub freq_hz: f64,
    /// Relative standard deviation of the per-epoch frequency.
    pub freq_jitter: f64,
    pub amplitude: f64,
    /// Relative standard deviation of the per-epoch amplitude.
    pub amplitude_jitter: f64,
    pub noise_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_subjects: usize,
    pub epochs_per_subject: usize,
    pub timing: EpochTiming,
    /// `transition[i][j]` = P(next = j | current = i), stage order W, R, L, D.
    pub transition: [[f64; NUM_STAGES]; NUM_STAGES],
    pub stages: [StageSignal; NUM_STAGES],
    pub seed: u64,
}

pub const DEFAULT_TRANSITION: [[f64; NUM_STAGES]; NUM_STAGES] = [
    [0.90, 0.02, 0.08, 0.00],
    [0.04, 0.90, 0.05, 0.01],
    [0.03, 0.03, 0.88, 0.06],
    [0.02, 0.00, 0.08, 0.90],
];

/// REM and Deep each hold about 7% of the long-run labels.
pub const SKEWED_TRANSITION: [[f64; NUM_STAGES]; NUM_STAGES] = [
    [0.90, 0.02, 0.08, 0.00],
    [0.12, 0.80, 0.07, 0.01],
    [0.03, 0.015, 0.925, 0.03],
    [0.05, 0.00, 0.20, 0.75],
];

const DESK_STAGES: [StageSignal; NUM_STAGES] = [
    StageSignal {
        freq_hz: 0.45,
        freq_jitter: 0.15,
        amplitude: 1.4,
        amplitude_jitter: 0.35,
        noise_std: 2.25,
    },
    StageSignal {
        freq_hz: 0.35,
        freq_jitter: 0.12,
        amplitude: 0.9,
        amplitude_jitter: 0.3,
        noise_std: 1.75,
    },
    StageSignal {
        freq_hz: 0.28,
        freq_jitter: 0.08,
        amplitude: 1.0,
        amplitude_jitter: 0.15,
        noise_std: 1.0,
    },
    StageSignal {
        freq_hz: 0.22,
        freq_jitter: 0.05,
        amplitude: 1.1,
        amplitude_jitter: 0.08,
        noise_std: 0.6,
    },
];

impl SynthConfig {
    /// 40 subjects × 120 epochs at 4 Hz with 4-second epochs.
    pub fn desk() -> Self {
        Self {
            num_subjects: 40,
            epochs_per_subject: 120,
            timing: EpochTiming::DESK,
            transition: DEFAULT_TRANSITION,
            stages: DESK_STAGES,
            seed: 7,
        }
    }

    /// [`SynthConfig::desk`] with REM and Deep made rare.
    pub fn skewed() -> Self {
        Self {
            transition: SKEWED_TRANSITION,
            ..Self::desk()
        }
    }

    /// 32 Hz with 30-second epochs, 900 epochs (7.5 h) per subject.
    pub fn paper() -> Self {
        Self {
            epochs_per_subject: 900,
            timing: EpochTiming::PAPER,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_subjects == 0 || self.epochs_per_subject == 0 {
            return param_err("num_subjects and epochs_per_subject must be positive");
        }
        if self.timing.samples_per_epoch() == 0 {
            return param_err("sample rate and epoch length must be positive");
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return param_err(format!("transition row {i} has an entry outside [0, 1]"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return param_err(format!("transition row {i} sums to {sum}, not 1"));
            }
        }
        for s in &self.stages {
            let vals = [s.freq_hz, s.freq_jitter, s.amplitude, s.amplitude_jitter, s.noise_std];
            if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return param_err("stage signal parameters must be finite and non-negative");
            }
        }
        Ok(())
    }

    /// Parses `key=value` lines; keys absent from the text keep the values
    /// already in `self`.
    pub fn apply_text(mut self, text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let (key, value) = l
                .split_once('=')
                .ok_or_else(|| err(n, format!("expected key=value, got `{l}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| -> Result<f64> {
                v.parse::<f64>()
                    .map_err(|_| err(n, format!("invalid number `{v}` for `{key}`")))
            };
            let int = |v: &str| -> Result<u64> {
                v.parse::<u64>()
                    .map_err(|_| err(n, format!("invalid integer `{v}` for `{key}`")))
            };
            match key {
                "num_subjects" => self.num_subjects = int(value)? as usize,
                "epochs_per_subject" => self.epochs_per_subject = int(value)? as usize,
                "sample_rate_hz" => self.timing.sample_rate_hz = int(value)? as usize,
                "epoch_seconds" => self.timing.epoch_seconds = int(value)? as usize,
                "seed" => self.seed = int(value)?,
                _ => {
                    if let Some(tok) = key.strip_prefix("transition.") {
                        let from = SleepStage::from_token(tok)
                            .ok_or_else(|| err(n, format!("unknown stage `{tok}`")))?;
                        let row: Vec<f64> = value.split(',').map(|v| num(v.trim())).collect::<Result<_>>()?;
                        if row.len() != NUM_STAGES {
                            return Err(err(n, format!("transition row needs {NUM_STAGES} values")));
                        }
                        self.transition[from.index()].copy_from_slice(&row);
                    } else if let Some(rest) = key.strip_prefix("stage.") {
                        let (tok, field) = rest
                            .split_once('.')
                            .ok_or_else(|| err(n, format!("unknown key `{key}`")))?;
                        let stage = SleepStage::from_token(tok)
                            .ok_or_else(|| err(n, format!("unknown stage `{tok}`")))?;
                        let s = &mut self.stages[stage.index()];
                        let v = num(value)?;
                        match field {
                            "freq_hz" => s.freq_hz = v,
                            "freq_jitter" => s.freq_jitter = v,
                            "amplitude" => s.amplitude = v,
                            "amplitude_jitter" => s.amplitude_jitter = v,
                            "noise_std" => s.noise_std = v,
                            _ => return Err(err(n, format!("unknown key `{key}`"))),
                        }
                    } else {
                        return Err(err(n, format!("unknown key `{key}`")));
                    }
                }
            }
        }
        Ok(self)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "num_subjects={}\nepochs_per_subject={}\nsample_rate_hz={}\nepoch_seconds={}\nseed={}\n",
            self.num_subjects,
            self.epochs_per_subject,
            self.timing.sample_rate_hz,
            self.timing.epoch_seconds,
            self.seed
        );
        for s in SleepStage::ALL {
            let row: Vec<String> = self.transition[s.index()].iter().map(|p| p.to_string()).collect();
            out.push_str(&format!("transition.{}={}\n", s.token(), row.join(",")));
        }
        for s in SleepStage::ALL {
            let p = &self.stages[s.index()];
            let t = s.token();
            out.push_str(&format!(
                "stage.{t}.freq_hz={}\nstage.{t}.freq_jitter={}\nstage.{t}.amplitude={}\nstage.{t}.amplitude_jitter={}\nstage.{t}.noise_std={}\n",
                p.freq_hz, p.freq_jitter, p.amplitude, p.amplitude_jitter, p.noise_std
            ));
        }
        out
    }

    /// Long-run share of each stage under the transition matrix.
    pub fn stationary(&self) -> [f64; NUM_STAGES] {
        let mut pi = [0.25; NUM_STAGES];
        for _ in 0..10_000 {
            let mut next = [0.0; NUM_STAGES];
            for i in 0..NUM_STAGES {
                for j in 0..NUM_STAGES {
                    next[j] += pi[i] * self.transition[i][j];
                }
            }
            pi = next;
        }
        pi
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn next_stage(row: &[f64; NUM_STAGES], rng: &mut impl Rng) -> SleepStage {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return SleepStage::ALL[j];
        }
    }
    // rounding left u ≥ acc; fall back to the last reachable stage
    let j = row.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    SleepStage::ALL[j]
}

/// Generates `num_subjects` records deterministically from `config.seed`.
pub fn synth_generate(config: &SynthConfig) -> Result<Vec<Record>> {
    config.validate()?;
    let root = SeedTree::new(config.seed).child(streams::SYNTH);
    let spe = config.timing.samples_per_epoch();
    let rate = config.timing.sample_rate_hz as f64;
    let width = config.num_subjects.saturating_sub(1).to_string().len().max(3);

    (0..config.num_subjects)
        .map(|s| {
            let mut rng = root.child(s as u64).rng();
            let mut labels = Vec::with_capacity(config.epochs_per_subject);
            let mut stage = SleepStage::Wake;
            labels.push(stage);
            for _ in 1..config.epochs_per_subject {
                stage = next_stage(&config.transition[stage.index()], &mut rng);
                labels.push(stage);
            }

            let mut signal = Vec::with_capacity(spe * labels.len());
            let mut phase = rng.random::<f64>() * TAU;
            for st in &labels {
                let p = &config.stages[st.index()];
                let z1: f64 = StandardNormal.sample(&mut rng);
                let z2: f64 = StandardNormal.sample(&mut rng);
                let freq = (p.freq_hz * (1.0 + p.freq_jitter * z1)).max(0.0);
                let amp = (p.amplitude * (1.0 + p.amplitude_jitter * z2)).max(0.0);
                for _ in 0..spe {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    signal.push(amp * phase.sin() + p.noise_std * noise);
                    phase = (phase + TAU * freq / rate) % TAU;
                }
            }
            Record::new(format!("s{s:0width$}"), config.timing, signal, labels)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_chain_stays_awake() {
        let mut cfg = SynthConfig::desk();
        cfg.num_subjects = 3;
        cfg.epochs_per_subject = 50;
        let mut eye = [[0.0; 4]; 4];
        for (i, row) in eye.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        cfg.transition = eye;
        for r in synth_generate(&cfg).unwrap() {
            assert!(r.labels().iter().all(|&s| s == SleepStage::Wake));
        }
    }

    #[test]
    fn forbidden_bigrams_never_appear() {
        let recs = synth_generate(&SynthConfig::desk()).unwrap();
        for r in &recs {
            for w in r.labels().windows(2) {
                assert!(DEFAULT_TRANSITION[w[0].index()][w[1].index()] > 0.0, "{w:?}");
            }
        }
    }

    #[test]
    fn empirical_bigrams_match_matrix() {
        let mut cfg = SynthConfig::desk();
        cfg.epochs_per_subject = 400;
        cfg.num_subjects = 40;
        let recs = synth_generate(&cfg).unwrap();
        let mut counts = [[0usize; 4]; 4];
        for r in &recs {
            for w in r.labels().windows(2) {
                counts[w[0].index()][w[1].index()] += 1;
            }
        }
        for i in 0..4 {
            let total: usize = counts[i].iter().sum();
            assert!(total > 0);
            for j in 0..4 {
                let freq = counts[i][j] as f64 / total as f64;
                assert!((freq - cfg.transition[i][j]).abs() < 0.05, "{i}->{j}: {freq}");
            }
        }
    }

    #[test]
    fn skewed_preset_makes_rem_and_deep_rare() {
        let pi = SynthConfig::skewed().stationary();
        assert!(pi[SleepStage::Rem.index()] < 0.1 && pi[SleepStage::Deep.index()] < 0.1, "{pi:?}");
        let recs = synth_generate(&SynthConfig::skewed()).unwrap();
        let counts = crate::dataset::class_counts(recs.iter().flat_map(|r| r.labels()));
        let n: usize = counts.iter().sum();
        assert!(counts[1] * 10 < n && counts[3] * 10 < n, "{counts:?}");
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_generate(&SynthConfig::desk()).unwrap();
        let b = synth_generate(&SynthConfig::desk()).unwrap();
        assert_eq!(a, b);
        let mut cfg = SynthConfig::desk();
        cfg.seed = 8;
        assert_ne!(synth_generate(&cfg).unwrap()[0], a[0]);
    }

    #[test]
    fn non_stochastic_matrix_rejected() {
        let mut cfg = SynthConfig::desk();
        cfg.transition[2][2] = 0.5;
        assert!(matches!(synth_generate(&cfg), Err(Error::Parameter(_))));
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = SynthConfig::desk();
        let parsed = SynthConfig::paper()
            .apply_text(&cfg.to_text(), Path::new("cfg"))
            .unwrap();
        assert_eq!(parsed, cfg);
        let bad = SynthConfig::desk().apply_text("seed=1\nbogus=2\n", Path::new("cfg"));
        assert!(matches!(bad, Err(Error::Parse { line: 2, .. })));
    }
}
