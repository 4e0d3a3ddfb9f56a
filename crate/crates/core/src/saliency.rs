//! Input-gradient saliency of one epoch's class score.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::{Record, SleepStage, NUM_STAGES};
use crate::error::{dim_err, param_err, Result};
use crate::model::{class_scores, encode, predict_indices, ModelConfig};
use crate::numeric::{Params, SeedTree, Tape};

/// Height in pixels of the exported grayscale strip.
pub const STRIP_HEIGHT: usize = 16;

/// Which class score to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaliencyTarget {
    /// The decoded label at that epoch.
    Predicted,
    Class(SleepStage),
}

/// Raw gradient of the target class score `S[t, k]` (node score or logit)
/// with respect to every input sample.
pub fn input_gradient(
    params: &Params,
    config: &ModelConfig,
    signal: &[f64],
    epoch: usize,
    class: usize,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut rng = SeedTree::new(0).rng();
    let (x, h) = encode(&mut tape, &bound, config, signal, false, &mut rng)?;
    let scores = class_scores(&mut tape, &bound, config, h)?;
    let (m, k) = tape.value(scores).dims2()?;
    if epoch >= m {
        return param_err(format!("epoch {epoch} out of range for {m} epochs"));
    }
    if class >= k {
        return param_err(format!("class {class} out of range"));
    }
    let picked = tape.gather(scores, vec![epoch * k + class])?;
    let score = tape.sum(picked);
    Ok(tape.backward(score)?.wrt(x).into_data())
}

/// Per-sample weights in `[0, 1]` for the samples of `epoch`: absolute
/// input gradient divided by its maximum over the epoch (an all-zero
/// gradient stays all zero).
pub fn saliency_map(
    params: &Params,
    config: &ModelConfig,
    record: &Record,
    epoch: usize,
    target: SaliencyTarget,
) -> Result<Vec<f64>> {
    signal_saliency(params, config, record.signal(), epoch, target)
}

/// [`saliency_map`] on an unlabeled signal.
pub fn signal_saliency(
    params: &Params,
    config: &ModelConfig,
    signal: &[f64],
    epoch: usize,
    target: SaliencyTarget,
) -> Result<Vec<f64>> {
    let spe = config.timing.samples_per_epoch();
    let m = signal.len() / spe;
    if epoch >= m {
        return param_err(format!("epoch {epoch} out of range for {m} epochs"));
    }
    let class = match target {
        SaliencyTarget::Class(s) => s.index(),
        SaliencyTarget::Predicted => predict_indices(params, config, signal)?[epoch],
    };
    debug_assert!(class < NUM_STAGES);
    let grad = input_gradient(params, config, signal, epoch, class)?;
    Ok(normalize(&grad[epoch * spe..(epoch + 1) * spe]))
}

fn normalize(slice: &[f64]) -> Vec<f64> {
    let max = slice.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return vec![0.0; slice.len()];
    }
    slice.iter().map(|v| v.abs() / max).collect()
}

/// Grayscale value of a weight: 255 for 0 (light), 0 for 1 (dark).
pub fn pixel(weight: f64) -> u8 {
    (255.0 * (1.0 - weight.clamp(0.0, 1.0))).round() as u8
}

/// Binary PGM (P5) strip, one column per weight and [`STRIP_HEIGHT`] rows.
pub fn pgm_bytes(weights: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{} {STRIP_HEIGHT}\n255\n", weights.len()).into_bytes();
    let row: Vec<u8> = weights.iter().map(|&w| pixel(w)).collect();
    for _ in 0..STRIP_HEIGHT {
        out.extend_from_slice(&row);
    }
    out
}

/// Writes `<path>.csv` (`signal,weight` rows) and `<path>.pgm`; returns both paths.
pub fn export_saliency(weights: &[f64], signal: &[f64], path: &Path) -> Result<(PathBuf, PathBuf)> {
    if weights.len() != signal.len() {
        return dim_err(format!("{} weights for {} samples", weights.len(), signal.len()));
    }
    let csv_path = path.with_extension("csv");
    let pgm_path = path.with_extension("pgm");
    let mut csv = String::from("signal,weight\n");
    for (s, w) in signal.iter().zip(weights) {
        let _ = writeln!(csv, "{s},{w}");
    }
    fs::write(&csv_path, csv)?;
    fs::write(&pgm_path, pgm_bytes(weights))?;
    Ok((csv_path, pgm_path))
}
