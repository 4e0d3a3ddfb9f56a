//! Linear-chain conditional random field output layer.
//!
//! Everything lives in the log domain. Node scores `S[t,k] = w_{n,k}·h_t +
//! b_{n,k}` come from the hidden states; the edge score of `y_{t−1} = i →
//! y_t = j` is `T1[i,j] + b_e`, and the second-order variant adds
//! `T2[y_{t−2}, y_t]`. A label sequence scores
//!
//! ```text
//! s(y) = Σ_t S[t, y_t] + Σ_{t≥1} (T1[y_{t−1}, y_t] + b_e) + Σ_{t≥2} T2[y_{t−2}, y_t]
//! ```
//!
//! and has probability `exp(s(y) − log Z)`.

pub mod brute;
mod chain;
mod tape_ops;

use rand::Rng;

pub use chain::{log_partition, marginals, pairwise_marginals, viterbi};
pub use tape_ops::{cost_sensitive_tape, crf_nll_tape, crf_vars, log_partition_tape, CrfVars};

use crate::dataset::NUM_STAGES;
use crate::error::{dim_err, param_err, Result};
use crate::numeric::{Params, SeedTree, Tensor};

/// Chain order of the CRF.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrfOrder {
    First,
    Second,
}

/// Log-domain potentials of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfPotentials {
    /// `[m × |K|]` node scores.
    pub scores: Tensor,
    /// `[|K| × |K|]` first-order transitions, row = previous label.
    pub trans: Tensor,
    pub edge_bias: f64,
    /// `[|K| × |K|]` second-order transitions, row = label two steps back.
    pub trans2: Option<Tensor>,
}

impl CrfPotentials {
    pub fn new(scores: Tensor, trans: Tensor, edge_bias: f64, trans2: Option<Tensor>) -> Result<Self> {
        let (m, k) = scores.dims2()?;
        if m == 0 {
            return Err(crate::Error::EmptySequence);
        }
        let square = |t: &Tensor| t.shape() == [k, k];
        if !square(&trans) || trans2.as_ref().is_some_and(|t| !square(t)) {
            return dim_err(format!("transition matrices must be {k}×{k}"));
        }
        Ok(Self {
            scores,
            trans,
            edge_bias,
            trans2,
        })
    }

    /// All-zero potentials over the four sleep stages.
    pub fn zeros(m: usize, order: CrfOrder) -> Self {
        let k = NUM_STAGES;
        Self {
            scores: Tensor::zeros([m, k]),
            trans: Tensor::zeros([k, k]),
            edge_bias: 0.0,
            trans2: (order == CrfOrder::Second).then(|| Tensor::zeros([k, k])),
        }
    }

    pub fn len(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_labels(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn order(&self) -> CrfOrder {
        if self.trans2.is_some() {
            CrfOrder::Second
        } else {
            CrfOrder::First
        }
    }

    fn check_labels(&self, y: &[usize]) -> Result<()> {
        if y.len() != self.len() {
            return dim_err(format!("{} labels for {} positions", y.len(), self.len()));
        }
        if let Some(bad) = y.iter().find(|&&l| l >= self.num_labels()) {
            return param_err(format!("label index {bad} out of range"));
        }
        Ok(())
    }

    /// Edge score `(T1[i,j] + b_e)`.
    pub(crate) fn edge(&self, i: usize, j: usize) -> f64 {
        self.trans.at2(i, j) + self.edge_bias
    }

    /// Full transition score into `k` from `(h, j)`, `h` two steps back.
    pub(crate) fn edge2(&self, h: usize, j: usize, k: usize) -> f64 {
        let e = self.edge(j, k);
        match &self.trans2 {
            Some(t2) => e + t2.at2(h, k),
            None => e,
        }
    }
}

/// Unnormalized log-score `s(y)`.
pub fn sequence_score(p: &CrfPotentials, y: &[usize]) -> Result<f64> {
    p.check_labels(y)?;
    let mut score = p.scores.at2(0, y[0]);
    for t in 1..y.len() {
        let edge = if t >= 2 && p.trans2.is_some() {
            p.edge2(y[t - 2], y[t - 1], y[t])
        } else {
            p.edge(y[t - 1], y[t])
        };
        score = (score + edge) + p.scores.at2(t, y[t]);
    }
    Ok(score)
}

/// `log Z − s(y)`, the negative log-likelihood of `y`.
pub fn crf_nll(p: &CrfPotentials, y: &[usize]) -> Result<f64> {
    let s = sequence_score(p, y)?;
    Ok(log_partition(p) - s)
}

/// `−Σ_t α_{y_t} ln M[t, y_t]` with node marginals `M`.
pub fn cost_sensitive_loss(p: &CrfPotentials, y: &[usize], alpha: &[f64; NUM_STAGES]) -> Result<f64> {
    p.check_labels(y)?;
    let m = marginals(p);
    Ok(-y.iter().enumerate().map(|(t, &l)| alpha[l] * m.at2(t, l).ln()).sum::<f64>())
}

/// `crf.w_n` ~ U(±1/√hidden); zero node bias, transitions and edge bias.
pub fn crf_init(hidden_dim: usize, order: CrfOrder, seeds: SeedTree) -> Params {
    let mut rng = seeds.rng();
    let bound = 1.0 / (hidden_dim as f64).sqrt();
    let k = NUM_STAGES;
    let w = (0..k * hidden_dim).map(|_| rng.random_range(-bound..bound)).collect();
    let mut p = Params::new();
    p.insert("crf.w_n", Tensor::new([k, hidden_dim], w).expect("shape"));
    p.insert("crf.b_n", Tensor::zeros([k]));
    p.insert("crf.trans", Tensor::zeros([k, k]));
    p.insert("crf.edge_bias", Tensor::vector(vec![0.0]));
    if order == CrfOrder::Second {
        p.insert("crf.trans2", Tensor::zeros([k, k]));
    }
    p
}

/// Node scores `[m × |K|]` for hidden states `[hidden × m]`.
pub fn node_scores(h: &Tensor, params: &Params) -> Result<Tensor> {
    let w = params.get("crf.w_n")?;
    let b = params.get("crf.b_n")?;
    let (k, d) = w.dims2()?;
    let (d2, m) = h.dims2()?;
    if d != d2 || b.len() != k {
        return dim_err(format!("node projection {:?} vs hidden states {:?}", w.shape(), h.shape()));
    }
    let mut s = Tensor::zeros([m, k]);
    for t in 0..m {
        for c in 0..k {
            let dot: f64 = (0..d).map(|i| w.at2(c, i) * h.at2(i, t)).sum();
            s.data_mut()[t * k + c] = dot + b.data()[c];
        }
    }
    Ok(s)
}

/// Potentials for hidden states `h` under CRF parameters.
pub fn potentials(h: &Tensor, params: &Params) -> Result<CrfPotentials> {
    let trans2 = params.contains("crf.trans2").then(|| params.get("crf.trans2").cloned()).transpose()?;
    CrfPotentials::new(
        node_scores(h, params)?,
        params.get("crf.trans")?.clone(),
        params.get("crf.edge_bias")?.item(),
        trans2,
    )
}

/// Whether a parameter belongs to the CRF block.
pub fn is_crf_param(name: &str) -> bool {
    name.starts_with("crf.")
}

/// Transition-type CRF parameters (everything except the node projection).
pub fn is_transition_param(name: &str) -> bool {
    matches!(name, "crf.trans" | "crf.trans2" | "crf.edge_bias")
}

/// Soft-threshold `sign(x)·max(|x| − threshold, 0)` on every CRF
/// coordinate; other blocks are untouched.
pub fn l1_prox(params: &mut Params, threshold: f64) -> Result<()> {
    l1_prox_by(params, |_| threshold)
}

/// [`l1_prox`] with a per-parameter threshold.
pub fn l1_prox_by(params: &mut Params, threshold: impl Fn(&str) -> f64) -> Result<()> {
    for (name, t) in params.iter_mut() {
        if !is_crf_param(name) {
            continue;
        }
        let th = threshold(name);
        if !(th >= 0.0) {
            return param_err(format!("threshold {th} must be non-negative"));
        }
        if th > 0.0 {
            t.data_mut().iter_mut().for_each(|x| *x = soft_threshold(*x, th));
        }
    }
    Ok(())
}

pub fn soft_threshold(x: f64, threshold: f64) -> f64 {
    let mag = x.abs() - threshold;
    if mag > 0.0 {
        mag.copysign(x)
    } else {
        0.0
    }
}

/// Row-wise softmax of the first-order transition matrix, for inspection.
pub fn transition_probabilities(trans: &Tensor) -> Result<Tensor> {
    crate::heads::softmax_rows(trans)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_node_projection() {
        let mut p = crf_init(3, CrfOrder::First, SeedTree::new(0));
        p.insert("crf.w_n", Tensor::zeros([4, 3]));
        let h = Tensor::new([3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert!(node_scores(&h, &p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn node_scores_by_hand() {
        let mut p = crf_init(1, CrfOrder::First, SeedTree::new(0));
        p.insert("crf.w_n", Tensor::new([4, 1], vec![1.0, -1.0, 0.0, 0.5]).unwrap());
        let s = node_scores(&Tensor::new([1, 1], vec![2.0]).unwrap(), &p).unwrap();
        assert_eq!(s.data(), &[2.0, -2.0, 0.0, 1.0]);
    }

    #[test]
    fn node_scores_linear_in_h() {
        let mut p = crf_init(2, CrfOrder::First, SeedTree::new(3));
        p.insert("crf.b_n", Tensor::zeros([4]));
        let h1 = Tensor::new([2, 1], vec![0.3, -0.8]).unwrap();
        let h2 = Tensor::new([2, 1], vec![1.1, 0.4]).unwrap();
        let sum = Tensor::new([2, 1], vec![1.4, -0.4]).unwrap();
        let (a, b, c) = (
            node_scores(&h1, &p).unwrap(),
            node_scores(&h2, &p).unwrap(),
            node_scores(&sum, &p).unwrap(),
        );
        for k in 0..4 {
            assert!((a.data()[k] + b.data()[k] - c.data()[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn sequence_score_cases() {
        let z = CrfPotentials::zeros(5, CrfOrder::Second);
        assert_eq!(sequence_score(&z, &[0, 3, 2, 1, 1]).unwrap(), 0.0);

        let mut p = CrfPotentials::zeros(2, CrfOrder::First);
        p.scores = Tensor::new([2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
        p.trans.data_mut()[1] = 3.0;
        assert_eq!(sequence_score(&p, &[0, 1]).unwrap(), 6.0);

        let mut one = CrfPotentials::zeros(1, CrfOrder::First);
        one.scores = Tensor::new([1, 4], vec![0.5, 1.5, 2.5, 3.5]).unwrap();
        one.edge_bias = 100.0;
        assert_eq!(sequence_score(&one, &[2]).unwrap(), 2.5);
    }

    #[test]
    fn sequence_score_rejects_bad_labels() {
        let p = CrfPotentials::zeros(2, CrfOrder::First);
        assert!(matches!(sequence_score(&p, &[0, 4]), Err(crate::Error::Parameter(_))));
        assert!(sequence_score(&p, &[0]).is_err());
    }

    #[test]
    fn second_order_terms_counted() {
        let mut p = CrfPotentials::zeros(3, CrfOrder::Second);
        p.edge_bias = 0.25;
        p.trans2.as_mut().unwrap().data_mut()[2 * 4 + 1] = 1.0;
        assert_eq!(sequence_score(&p, &[2, 0, 1]).unwrap(), 1.5);
        assert_eq!(sequence_score(&p, &[1, 0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn prox_examples() {
        assert_eq!(soft_threshold(0.003, 0.005), 0.0);
        assert_eq!(soft_threshold(-1.0, 0.25), -0.75);
        assert_eq!(soft_threshold(0.7, 0.0), 0.7);

        let mut p = crf_init(4, CrfOrder::Second, SeedTree::new(2));
        p.insert("gru.u_z", Tensor::full([2, 2], 0.001));
        p.insert("crf.trans", Tensor::full([4, 4], 0.3));
        let before = p.clone();
        l1_prox(&mut p, 0.0).unwrap();
        assert_eq!(p, before);
        l1_prox(&mut p, 0.1).unwrap();
        assert_eq!(p.get("gru.u_z").unwrap(), before.get("gru.u_z").unwrap());
        assert!(p.get("crf.trans").unwrap().data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert!(l1_prox(&mut p, -1.0).is_err());
    }

    #[test]
    fn inspection_rows_are_distributions() {
        let t = Tensor::new([4, 4], (0..16).map(|i| i as f64 * 0.3 - 2.0).collect()).unwrap();
        let p = transition_probabilities(&t).unwrap();
        for r in 0..4 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
