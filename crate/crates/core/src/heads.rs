//! Independent per-epoch softmax output layer and its (optionally
//! class-weighted) negative log-likelihood.

use rand::Rng;

use crate::dataset::NUM_STAGES;
use crate::error::{dim_err, param_err, Result};
use crate::numeric::kernels::log_sum_exp;
use crate::numeric::{Bound, Params, SeedTree, Tape, Tensor, Var};

/// `head.w_o` ~ U(±1/√hidden), zero `head.b_o`.
pub fn head_init(hidden_dim: usize, seeds: SeedTree) -> Params {
    let mut rng = seeds.rng();
    let bound = 1.0 / (hidden_dim as f64).sqrt();
    let w = (0..NUM_STAGES * hidden_dim).map(|_| rng.random_range(-bound..bound)).collect();
    let mut p = Params::new();
    p.insert("head.w_o", Tensor::new([NUM_STAGES, hidden_dim], w).expect("shape"));
    p.insert("head.b_o", Tensor::zeros([NUM_STAGES]));
    p
}

/// Logits `[m × |K|]` from hidden states `[hidden × m]` on the tape.
pub fn head_logits(tape: &mut Tape, params: &Bound, h: Var) -> Result<Var> {
    let kt = tape.affine(params.get("head.w_o")?, h, params.get("head.b_o")?)?;
    tape.transpose(kt)
}

/// Row-wise stable softmax of a `[m × |K|]` logit matrix.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (m, k) = logits.dims2()?;
    let mut out = Vec::with_capacity(m * k);
    for t in 0..m {
        let row = logits.row(t);
        let z = log_sum_exp(row);
        out.extend(row.iter().map(|v| (v - z).exp()));
    }
    Tensor::new([m, k], out)
}

/// Class probabilities `P[t,k]` for hidden states `[hidden × m]`.
pub fn softmax_predict(h: &Tensor, params: &Params) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let hv = tape.leaf(h.clone());
    let logits = head_logits(&mut tape, &bound, hv)?;
    softmax_rows(tape.value(logits))
}

fn check_labels(m: usize, k: usize, y: &[usize]) -> Result<()> {
    if y.len() != m {
        return dim_err(format!("{} labels for {m} positions", y.len()));
    }
    if let Some(bad) = y.iter().find(|&&l| l >= k) {
        return param_err(format!("label index {bad} out of range for {k} classes"));
    }
    Ok(())
}

/// `−Σ_t α_{y_t} ln P[t, y_t]`; `alpha = None` means all ones.
pub fn softmax_nll(p: &Tensor, y: &[usize], alpha: Option<&[f64; NUM_STAGES]>) -> Result<f64> {
    let (m, k) = p.dims2()?;
    check_labels(m, k, y)?;
    Ok(-y
        .iter()
        .enumerate()
        .map(|(t, &l)| alpha.map_or(1.0, |a| a[l]) * p.at2(t, l).ln())
        .sum::<f64>())
}

/// Tape version of [`softmax_nll`] taking logits directly.
pub fn softmax_nll_tape(
    tape: &mut Tape,
    logits: Var,
    y: &[usize],
    alpha: Option<&[f64; NUM_STAGES]>,
) -> Result<Var> {
    let (m, k) = tape.value(logits).dims2()?;
    check_labels(m, k, y)?;
    let lse = tape.logsumexp_axis(logits, 1)?;
    let picked = tape.gather(logits, y.iter().enumerate().map(|(t, &l)| t * k + l).collect())?;
    let logp = tape.sub(picked, lse)?;
    let weights = Tensor::vector(y.iter().map(|&l| -alpha.map_or(1.0, |a| a[l])).collect());
    tape.dot_const(logp, weights)
}

/// Per-row argmax, first index on ties.
pub fn argmax_rows(scores: &Tensor) -> Result<Vec<usize>> {
    let (m, _) = scores.dims2()?;
    Ok((0..m)
        .map(|t| {
            scores
                .row(t)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect())
}
