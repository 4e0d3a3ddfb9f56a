//! Exact inference by dynamic programming over a homogeneous chain.
//!
//! A first-order CRF is a chain over the labels themselves. A
//! second-order CRF of length `m ≥ 2` becomes a first-order chain of
//! length `m − 1` over pair states `(y_p, y_{p+1})`, indexed
//! `y_{p+1}·|K| + y_p` so that the lowest state index prefers the lowest
//! current label.

use super::{CrfOrder, CrfPotentials};
use crate::numeric::kernels::log_sum_exp;
use crate::numeric::Tensor;

pub(crate) struct Chain {
    pub k: usize,
    pub n: usize,
    pub pairs: bool,
    pub init: Vec<f64>,
    /// Emission vectors for chain positions `1..`.
    pub emits: Vec<Vec<f64>>,
    /// `[n × n]`, row = previous state.
    pub trans: Vec<f64>,
}

impl Chain {
    pub fn new(p: &CrfPotentials) -> Self {
        let (m, k) = (p.len(), p.num_labels());
        let s = &p.scores;
        if p.order() == CrfOrder::First || m == 1 {
            let mut trans = vec![0.0; k * k];
            for i in 0..k {
                for j in 0..k {
                    trans[i * k + j] = p.edge(i, j);
                }
            }
            return Self {
                k,
                n: k,
                pairs: false,
                init: s.row(0).to_vec(),
                emits: (1..m).map(|t| s.row(t).to_vec()).collect(),
                trans,
            };
        }
        let n = k * k;
        let mut init = vec![0.0; n];
        for st in 0..n {
            let (prev, cur) = (st % k, st / k);
            init[st] = (s.at2(0, prev) + p.edge(prev, cur)) + s.at2(1, cur);
        }
        let mut trans = vec![f64::NEG_INFINITY; n * n];
        for a in 0..n {
            let (h, j) = (a % k, a / k);
            for c in 0..k {
                trans[a * n + c * k + j] = p.edge2(h, j, c);
            }
        }
        let emits = (2..m)
            .map(|t| (0..n).map(|st| s.at2(t, st / k)).collect())
            .collect();
        Self {
            k,
            n,
            pairs: true,
            init,
            emits,
            trans,
        }
    }

    pub fn len(&self) -> usize {
        self.emits.len() + 1
    }

    /// Log forward messages, one vector per chain position.
    pub fn forward(&self) -> Vec<Vec<f64>> {
        let mut alpha = Vec::with_capacity(self.len());
        alpha.push(self.init.clone());
        let mut buf = vec![0.0; self.n];
        for emit in &self.emits {
            let prev = alpha.last().expect("non-empty");
            let next = (0..self.n)
                .map(|b| {
                    for (a, v) in buf.iter_mut().enumerate() {
                        *v = prev[a] + self.trans[a * self.n + b];
                    }
                    log_sum_exp(&buf) + emit[b]
                })
                .collect();
            alpha.push(next);
        }
        alpha
    }

    /// Log backward messages (`β` of the last position is zero).
    pub fn backward(&self) -> Vec<Vec<f64>> {
        let len = self.len();
        let mut beta = vec![vec![0.0; self.n]; len];
        let mut buf = vec![0.0; self.n];
        for p in (0..len - 1).rev() {
            let emit = &self.emits[p];
            for a in 0..self.n {
                for (b, v) in buf.iter_mut().enumerate() {
                    *v = self.trans[a * self.n + b] + (emit[b] + beta[p + 1][b]);
                }
                beta[p][a] = log_sum_exp(&buf);
            }
        }
        beta
    }

    /// Chain state posteriors `exp(α + β − log Z)`.
    fn state_marginals(&self) -> (Vec<Vec<f64>>, f64) {
        let alpha = self.forward();
        let beta = self.backward();
        let log_z = log_sum_exp(alpha.last().expect("non-empty"));
        let post = alpha
            .iter()
            .zip(&beta)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x + y - log_z).exp()).collect())
            .collect();
        (post, log_z)
    }

    /// Labels encoded by a sequence of chain states.
    pub fn labels(&self, states: &[usize]) -> Vec<usize> {
        if !self.pairs {
            return states.to_vec();
        }
        let mut y = vec![states[0] % self.k];
        y.extend(states.iter().map(|s| s / self.k));
        y
    }
}

/// `log Z`, the log-sum over all label sequences of `exp(s(y))`.
pub fn log_partition(p: &CrfPotentials) -> f64 {
    let chain = Chain::new(p);
    log_sum_exp(chain.forward().last().expect("non-empty"))
}

/// Node marginals `M[t,k] = P(y_t = k)` as `[m × |K|]`.
pub fn marginals(p: &CrfPotentials) -> Tensor {
    let chain = Chain::new(p);
    let (post, _) = chain.state_marginals();
    let (m, k) = (p.len(), p.num_labels());
    let mut out = Tensor::zeros([m, k]);
    let d = out.data_mut();
    if !chain.pairs {
        for (t, row) in post.iter().enumerate() {
            d[t * k..(t + 1) * k].copy_from_slice(row);
        }
        return out;
    }
    for (pos, row) in post.iter().enumerate() {
        for (st, &v) in row.iter().enumerate() {
            if pos == 0 {
                d[st % k] += v;
            }
            d[(pos + 1) * k + st / k] += v;
        }
    }
    out
}

/// Edge marginals `P(y_{t−1} = i, y_t = j)` for `t = 1..m`, each `[|K| × |K|]`.
pub fn pairwise_marginals(p: &CrfPotentials) -> Vec<Tensor> {
    let chain = Chain::new(p);
    let k = chain.k;
    if chain.pairs {
        let (post, _) = chain.state_marginals();
        return post
            .iter()
            .map(|row| {
                let mut t = Tensor::zeros([k, k]);
                for (st, &v) in row.iter().enumerate() {
                    t.data_mut()[(st % k) * k + st / k] = v;
                }
                t
            })
            .collect();
    }
    let alpha = chain.forward();
    let beta = chain.backward();
    let log_z = log_sum_exp(alpha.last().expect("non-empty"));
    (1..chain.len())
        .map(|t| {
            let emit = &chain.emits[t - 1];
            let mut out = Tensor::zeros([k, k]);
            for i in 0..k {
                for j in 0..k {
                    out.data_mut()[i * k + j] =
                        (alpha[t - 1][i] + chain.trans[i * k + j] + emit[j] + beta[t][j] - log_z).exp();
                }
            }
            out
        })
        .collect()
}

/// Highest-scoring label sequence and its score. Ties go to the lowest
/// label index, comparing from the last position backwards.
pub fn viterbi(p: &CrfPotentials) -> (Vec<usize>, f64) {
    let chain = Chain::new(p);
    let n = chain.n;
    let mut delta = chain.init.clone();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(chain.emits.len());
    for emit in &chain.emits {
        let mut next = vec![f64::NEG_INFINITY; n];
        let mut ptr = vec![0; n];
        for b in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for a in 0..n {
                let v = delta[a] + chain.trans[a * n + b];
                if v > best {
                    best = v;
                    arg = a;
                }
            }
            next[b] = best + emit[b];
            ptr[b] = arg;
        }
        delta = next;
        back.push(ptr);
    }
    let (mut state, score) = delta
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bs, bv), (s, &v)| if v > bv { (s, v) } else { (bs, bv) });
    let mut states = vec![state; chain.len()];
    for (pos, ptr) in back.iter().enumerate().rev() {
        state = ptr[state];
        states[pos] = state;
    }
    (chain.labels(&states), score)
}
