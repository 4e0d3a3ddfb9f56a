//! Exhaustive-enumeration oracles for small chains.
//!
//! Every label sequence is scored with [`sequence_score`]; sequences are
//! visited with the last position as the most significant digit, so the
//! first maximum found is the one preferring the lowest labels from the end
//! backwards, the same tie rule as [`viterbi`](super::viterbi).

use super::{sequence_score, CrfPotentials};
use crate::error::{param_err, Result};
use crate::numeric::kernels::log_sum_exp;
use crate::numeric::Tensor;

/// Largest number of sequences the oracles will enumerate.
pub const MAX_SEQUENCES: usize = 1_000_000;

fn all_scores(p: &CrfPotentials) -> Result<Vec<(Vec<usize>, f64)>> {
    let (m, k) = (p.len(), p.num_labels());
    let total = (0..m).try_fold(1usize, |acc, _| acc.checked_mul(k).filter(|&v| v <= MAX_SEQUENCES));
    let Some(total) = total else {
        return param_err(format!("{k}^{m} sequences exceed the brute-force limit of {MAX_SEQUENCES}"));
    };
    let mut y = vec![0; m];
    let mut out = Vec::with_capacity(total);
    for code in 0..total {
        let mut c = code;
        for slot in y.iter_mut() {
            *slot = c % k;
            c /= k;
        }
        out.push((y.clone(), sequence_score(p, &y)?));
    }
    Ok(out)
}

pub fn brute_force_log_partition(p: &CrfPotentials) -> Result<f64> {
    let scores: Vec<f64> = all_scores(p)?.into_iter().map(|(_, s)| s).collect();
    Ok(log_sum_exp(&scores))
}

pub fn brute_force_marginals(p: &CrfPotentials) -> Result<Tensor> {
    let all = all_scores(p)?;
    let log_z = log_sum_exp(&all.iter().map(|(_, s)| *s).collect::<Vec<_>>());
    let (m, k) = (p.len(), p.num_labels());
    let mut out = Tensor::zeros([m, k]);
    for (y, s) in &all {
        let w = (s - log_z).exp();
        for (t, &l) in y.iter().enumerate() {
            out.data_mut()[t * k + l] += w;
        }
    }
    Ok(out)
}

/// Probability of one sequence by enumeration.
pub fn brute_force_probability(p: &CrfPotentials, y: &[usize]) -> Result<f64> {
    let log_z = brute_force_log_partition(p)?;
    Ok((sequence_score(p, y)? - log_z).exp())
}

pub fn brute_force_best(p: &CrfPotentials) -> Result<(Vec<usize>, f64)> {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for (y, s) in all_scores(p)? {
        if best.as_ref().is_none_or(|(_, b)| s > *b) {
            best = Some((y, s));
        }
    }
    Ok(best.expect("at least one sequence"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf::CrfOrder;

    #[test]
    fn zero_potentials() {
        let z = CrfPotentials::zeros(2, CrfOrder::First);
        assert!((brute_force_log_partition(&z).unwrap() - 2.0 * 4f64.ln()).abs() < 1e-12);
        let m = brute_force_marginals(&CrfPotentials::zeros(3, CrfOrder::Second)).unwrap();
        assert!(m.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
        assert_eq!(brute_force_best(&z).unwrap(), (vec![0, 0], 0.0));
    }

    #[test]
    fn guard_on_long_chains() {
        assert!(brute_force_log_partition(&CrfPotentials::zeros(9, CrfOrder::First)).is_ok());
        assert!(matches!(
            brute_force_log_partition(&CrfPotentials::zeros(10, CrfOrder::First)),
            Err(crate::Error::Parameter(_))
        ));
    }

    #[test]
    fn tie_prefers_low_labels_from_the_end() {
        let mut p = CrfPotentials::zeros(2, CrfOrder::First);
        // (1, 0), (0, 1) and (1, 1) all score 1
        p.scores = Tensor::new([2, 4], vec![0.0, 1.0, -5.0, -5.0, 0.0, 1.0, -5.0, -5.0]).unwrap();
        p.trans = Tensor::full([4, 4], 0.0);
        p.trans.data_mut()[4 + 1] = -1.0;
        p.trans.data_mut()[0] = -1.0;
        let (y, s) = brute_force_best(&p).unwrap();
        assert_eq!(s, 1.0);
        assert_eq!(y, vec![1, 0]);
        assert_eq!(crate::crf::viterbi(&p), (y, s));
    }
}
