//! The full network: CNN → GRU → softmax head or CRF.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::cnn::{cnn_forward, cnn_init, CnnConfig};
use crate::crf::{self, CrfOrder, CrfPotentials};
use crate::dataset::{EpochTiming, SleepStage, NUM_STAGES};
use crate::error::{dim_err, Error, Result};
use crate::gru::{gru_forward, gru_init, GruConfig, DEFAULT_HIDDEN};
use crate::heads::{argmax_rows, head_init, head_logits, softmax_nll_tape};
use crate::numeric::{streams, Bound, Params, SeedTree, Tape, Tensor, Var};

/// Output layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Softmax,
    Crf,
    /// CRF with additional second-order transitions.
    Crf2,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Softmax => "softmax",
            ModelKind::Crf => "crf",
            ModelKind::Crf2 => "crf2",
        }
    }

    pub fn crf_order(self) -> Option<CrfOrder> {
        match self {
            ModelKind::Softmax => None,
            ModelKind::Crf => Some(CrfOrder::First),
            ModelKind::Crf2 => Some(CrfOrder::Second),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(ModelKind::Softmax),
            "crf" => Ok(ModelKind::Crf),
            "crf2" => Ok(ModelKind::Crf2),
            _ => Err(Error::Config(format!("unknown model kind `{s}`"))),
        }
    }
}

/// Named size presets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Profile {
    /// 4 Hz, 4 s epochs, 32 channels, hidden 64.
    #[default]
    Desk,
    /// 32 Hz, 30 s epochs, 256 channels, hidden 250.
    Paper,
    /// 2 Hz, 2 s epochs, 4 channels, hidden 5; for gradient checks.
    Tiny,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
            Profile::Tiny => "tiny",
        }
    }

    pub fn timing(self) -> EpochTiming {
        match self {
            Profile::Desk => EpochTiming::DESK,
            Profile::Paper => EpochTiming::PAPER,
            Profile::Tiny => EpochTiming::TINY,
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            "tiny" => Ok(Profile::Tiny),
            _ => Err(Error::Config(format!("unknown profile `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub timing: EpochTiming,
    pub cnn: CnnConfig,
    pub gru: GruConfig,
}

impl ModelConfig {
    pub fn for_profile(profile: Profile, kind: ModelKind) -> Self {
        let (cnn, hidden) = match profile {
            Profile::Desk => (CnnConfig::desk(32), DEFAULT_HIDDEN),
            Profile::Paper => (CnnConfig::paper(), 250),
            Profile::Tiny => (CnnConfig::tiny(), 5),
        };
        let gru = GruConfig::new(cnn.output_channels(), hidden);
        Self {
            kind,
            timing: profile.timing(),
            cnn,
            gru,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cnn.validate(self.timing.samples_per_epoch())?;
        if self.gru.input_dim != self.cnn.output_channels() {
            return Err(Error::Config(format!(
                "GRU input {} does not match CNN output {}",
                self.gru.input_dim,
                self.cnn.output_channels()
            )));
        }
        if self.gru.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Fresh parameters; each block draws from its own seed stream.
pub fn model_init(config: &ModelConfig, seed: u64) -> Result<Params> {
    config.validate()?;
    let root = SeedTree::new(seed).child(streams::INIT);
    let mut params = cnn_init(&config.cnn, root.child(0));
    let extend = |params: &mut Params, other: Params| {
        for (k, v) in other.iter() {
            params.insert(k, v.clone());
        }
    };
    extend(&mut params, gru_init(&config.gru, root.child(1)));
    let head = match config.kind.crf_order() {
        None => head_init(config.gru.hidden_dim, root.child(2)),
        Some(order) => crf::crf_init(config.gru.hidden_dim, order, root.child(2)),
    };
    extend(&mut params, head);
    Ok(params)
}

/// Signal leaf and hidden states `[hidden × m]`.
pub fn encode(
    tape: &mut Tape,
    params: &Bound,
    config: &ModelConfig,
    signal: &[f64],
    training: bool,
    rng: &mut impl Rng,
) -> Result<(Var, Var)> {
    let spe = config.timing.samples_per_epoch();
    if signal.is_empty() {
        return Err(Error::EmptySequence);
    }
    if !signal.len().is_multiple_of(spe) {
        return dim_err(format!("{} samples is not a multiple of {spe}", signal.len()));
    }
    let x = tape.leaf(Tensor::new([1, signal.len()], signal.to_vec())?);
    let z = cnn_forward(tape, params, &config.cnn, x, training, rng)?;
    let h = gru_forward(tape, params, &config.gru, z)?;
    Ok((x, h))
}

/// Per-epoch class scores `[m × |K|]`: logits for the softmax head, node
/// scores for CRF kinds.
pub fn class_scores(tape: &mut Tape, params: &Bound, config: &ModelConfig, h: Var) -> Result<Var> {
    match config.kind {
        ModelKind::Softmax => head_logits(tape, params, h),
        _ => Ok(crf::crf_vars(tape, params, h, false)?.scores),
    }
}

/// Sequence loss on hidden states: NLL, or the class-weighted marginal loss
/// when `alpha` is given.
pub fn sequence_loss(
    tape: &mut Tape,
    params: &Bound,
    config: &ModelConfig,
    h: Var,
    labels: &[usize],
    alpha: Option<&[f64; NUM_STAGES]>,
) -> Result<Var> {
    match config.kind.crf_order() {
        None => {
            let logits = head_logits(tape, params, h)?;
            softmax_nll_tape(tape, logits, labels, alpha)
        }
        Some(order) => {
            let v = crf::crf_vars(tape, params, h, order == CrfOrder::Second)?;
            match alpha {
                None => crf::crf_nll_tape(tape, &v, labels),
                Some(a) => crf::cost_sensitive_tape(tape, &v, labels, a),
            }
        }
    }
}

/// CRF potentials from the current parameters and node scores.
pub fn crf_potentials(params: &Params, scores: Tensor) -> Result<CrfPotentials> {
    let trans2 = params.contains("crf.trans2").then(|| params.get("crf.trans2").cloned()).transpose()?;
    CrfPotentials::new(
        scores,
        params.get("crf.trans")?.clone(),
        params.get("crf.edge_bias")?.item(),
        trans2,
    )
}

/// Decoded label indices for one signal (dropout off): Viterbi for CRF
/// kinds, per-epoch argmax for softmax.
pub fn predict_indices(params: &Params, config: &ModelConfig, signal: &[f64]) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut rng = SeedTree::new(0).rng();
    let (_, h) = encode(&mut tape, &bound, config, signal, false, &mut rng)?;
    let scores = class_scores(&mut tape, &bound, config, h)?;
    let scores = tape.value(scores).clone();
    match config.kind {
        ModelKind::Softmax => argmax_rows(&scores),
        _ => Ok(crf::viterbi(&crf_potentials(params, scores)?).0),
    }
}

pub fn predict(params: &Params, config: &ModelConfig, signal: &[f64]) -> Result<Vec<SleepStage>> {
    Ok(predict_indices(params, config, signal)?
        .into_iter()
        .map(|i| SleepStage::ALL[i])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signal(n: usize) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * 0.45).sin() * (1.0 + (i / 16) as f64 * 0.1)).collect()
    }

    #[test]
    fn profiles_are_consistent() {
        for p in [Profile::Desk, Profile::Paper, Profile::Tiny] {
            for k in [ModelKind::Softmax, ModelKind::Crf, ModelKind::Crf2] {
                ModelConfig::for_profile(p, k).validate().unwrap();
            }
        }
    }

    #[test]
    fn kind_and_profile_names_round_trip() {
        for k in [ModelKind::Softmax, ModelKind::Crf, ModelKind::Crf2] {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        assert_eq!("paper".parse::<Profile>().unwrap(), Profile::Paper);
        assert!("huge".parse::<Profile>().is_err());
    }

    #[test]
    fn parameter_blocks_per_kind() {
        let names = |k| {
            let cfg = ModelConfig::for_profile(Profile::Tiny, k);
            model_init(&cfg, 1).unwrap().iter().map(|(n, _)| n.to_string()).collect::<Vec<_>>()
        };
        assert!(names(ModelKind::Softmax).iter().any(|n| n == "head.w_o"));
        assert!(!names(ModelKind::Crf).iter().any(|n| n == "crf.trans2"));
        assert!(names(ModelKind::Crf2).iter().any(|n| n == "crf.trans2"));
    }

    #[test]
    fn predictions_have_one_label_per_epoch() {
        for k in [ModelKind::Softmax, ModelKind::Crf, ModelKind::Crf2] {
            let cfg = ModelConfig::for_profile(Profile::Desk, k);
            let p = model_init(&cfg, 3).unwrap();
            assert_eq!(predict(&p, &cfg, &signal(16 * 11)).unwrap().len(), 11);
            assert!(predict(&p, &cfg, &signal(17)).is_err());
        }
    }

    #[test]
    fn tiny_end_to_end_gradients() {
        let alpha = [0.5, 1.0, 2.0, 2.0];
        for kind in [ModelKind::Softmax, ModelKind::Crf, ModelKind::Crf2] {
            let cfg = ModelConfig::for_profile(Profile::Tiny, kind);
            let p = model_init(&cfg, 5).unwrap();
            let x = signal(12);
            let y = [0, 3, 1];
            let loss = |tape: &mut Tape, b: &Bound| {
                let (_, h) = encode(tape, b, &cfg, &x, false, &mut SeedTree::new(0).rng())?;
                let a = (kind == ModelKind::Softmax).then_some(&alpha);
                sequence_loss(tape, b, &cfg, h, &y, a)
            };
            // the edge bias adds the same amount to every sequence, so it
            // cancels from the likelihood and its gradient is exactly zero
            let r = crate::numeric::grad_check_filtered(
                loss,
                &p,
                1e-5,
                usize::MAX,
                &mut SeedTree::new(0).rng(),
                |name| name != "crf.edge_bias",
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "{kind}: {r:?}");
            if kind != ModelKind::Softmax {
                let mut tape = Tape::new();
                let b = p.bind(&mut tape);
                let l = loss(&mut tape, &b).unwrap();
                let g = tape.backward(l).unwrap().wrt(b.get("crf.edge_bias").unwrap()).item();
                assert!(g.abs() < 1e-12, "{g}");
            }
        }
    }
}
