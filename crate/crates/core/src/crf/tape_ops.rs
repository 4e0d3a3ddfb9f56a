//! CRF losses recorded on the tape: the forward recursion for `log Z`,
//! the sequence score, and node log-marginals through a full
//! forward-backward pass so that marginal-based losses differentiate
//! end to end.

use crate::error::{dim_err, param_err, Result};
use crate::numeric::{Bound, Tape, Tensor, Var};

/// Tape handles for one sequence's potentials.
#[derive(Clone, Copy, Debug)]
pub struct CrfVars {
    /// `[m × |K|]`.
    pub scores: Var,
    pub trans: Var,
    /// Single-element edge bias.
    pub edge_bias: Var,
    pub trans2: Option<Var>,
}

/// Node scores from hidden states `[hidden × m]` plus the bound transition parameters.
pub fn crf_vars(tape: &mut Tape, params: &Bound, h: Var, second_order: bool) -> Result<CrfVars> {
    let kt = tape.affine(params.get("crf.w_n")?, h, params.get("crf.b_n")?)?;
    let scores = tape.transpose(kt)?;
    Ok(CrfVars {
        scores,
        trans: params.get("crf.trans")?,
        edge_bias: params.get("crf.edge_bias")?,
        trans2: if second_order { Some(params.get("crf.trans2")?) } else { None },
    })
}

struct TapeChain {
    k: usize,
    pairs: bool,
    init: Var,
    emits: Vec<Var>,
    trans: Var,
    n: usize,
}

impl TapeChain {
    fn build(tape: &mut Tape, v: &CrfVars) -> Result<Self> {
        let (m, k) = tape.value(v.scores).dims2()?;
        if m == 0 {
            return Err(crate::Error::EmptySequence);
        }
        if tape.shape(v.trans) != [k, k] || v.trans2.is_some_and(|t| tape.shape(t) != [k, k]) {
            return dim_err(format!("transition matrices must be {k}×{k}"));
        }
        let edge = tape.add_scalar(v.trans, v.edge_bias)?;
        let Some(t2) = v.trans2.filter(|_| m >= 2) else {
            let init = tape.row(v.scores, 0)?;
            let emits = (1..m).map(|t| tape.row(v.scores, t)).collect::<Result<_>>()?;
            return Ok(Self {
                k,
                pairs: false,
                init,
                emits,
                trans: edge,
                n: k,
            });
        };
        let n = k * k;
        let s0 = tape.gather(v.scores, (0..n).map(|s| s % k).collect())?;
        let e01 = tape.gather(edge, (0..n).map(|s| (s % k) * k + s / k).collect())?;
        let s1 = tape.gather(v.scores, (0..n).map(|s| k + s / k).collect())?;
        let head = tape.add(s0, e01)?;
        let init = tape.add(head, s1)?;

        let mut edge_idx = vec![0; n * n];
        let mut t2_idx = vec![0; n * n];
        let mut mask = vec![f64::NEG_INFINITY; n * n];
        for a in 0..n {
            let (h, j) = (a % k, a / k);
            for c in 0..k {
                let idx = a * n + c * k + j;
                edge_idx[idx] = j * k + c;
                t2_idx[idx] = h * k + c;
                mask[idx] = 0.0;
            }
        }
        let ge = tape.gather(edge, edge_idx)?;
        let g2 = tape.gather(t2, t2_idx)?;
        let sum = tape.add(ge, g2)?;
        let mask = tape.leaf(Tensor::vector(mask));
        let flat = tape.add(sum, mask)?;
        let trans = tape.reshape(flat, &[n, n])?;
        let emits = (2..m)
            .map(|t| tape.gather(v.scores, (0..n).map(|s| t * k + s / k).collect()))
            .collect::<Result<_>>()?;
        Ok(Self {
            k,
            pairs: true,
            init,
            emits,
            trans,
            n,
        })
    }

    fn forward(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        let mut alpha = vec![self.init];
        for &emit in &self.emits {
            let prev = *alpha.last().expect("non-empty");
            let step = tape.log_matmul(prev, self.trans)?;
            alpha.push(tape.add(step, emit)?);
        }
        Ok(alpha)
    }

    fn backward(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        let len = self.emits.len() + 1;
        let mut beta = vec![tape.leaf(Tensor::zeros([self.n])); len];
        for p in (0..len - 1).rev() {
            let ahead = tape.add(self.emits[p], beta[p + 1])?;
            beta[p] = tape.log_matmul(self.trans, ahead)?;
        }
        Ok(beta)
    }

    /// Chain positions and states whose posterior mass is `P(y_t = label)`.
    fn states_for(&self, t: usize, label: usize) -> (usize, Vec<usize>) {
        if !self.pairs {
            return (t, vec![label]);
        }
        if t == 0 {
            (0, (0..self.k).map(|j| j * self.k + label).collect())
        } else {
            (t - 1, (0..self.k).map(|i| label * self.k + i).collect())
        }
    }
}

/// `log Z` via the forward recursion.
pub fn log_partition_tape(tape: &mut Tape, v: &CrfVars) -> Result<Var> {
    let chain = TapeChain::build(tape, v)?;
    let alpha = chain.forward(tape)?;
    Ok(tape.logsumexp(*alpha.last().expect("non-empty")))
}

fn check_labels(tape: &Tape, v: &CrfVars, y: &[usize]) -> Result<(usize, usize)> {
    let (m, k) = tape.value(v.scores).dims2()?;
    if y.len() != m {
        return dim_err(format!("{} labels for {m} positions", y.len()));
    }
    if let Some(bad) = y.iter().find(|&&l| l >= k) {
        return param_err(format!("label index {bad} out of range"));
    }
    Ok((m, k))
}

fn sequence_score_tape(tape: &mut Tape, v: &CrfVars, y: &[usize]) -> Result<Var> {
    let (m, k) = check_labels(tape, v, y)?;
    let nodes = tape.gather(v.scores, y.iter().enumerate().map(|(t, &l)| t * k + l).collect())?;
    let mut score = tape.sum(nodes);
    if m >= 2 {
        let edge = tape.add_scalar(v.trans, v.edge_bias)?;
        let e = tape.gather(edge, y.windows(2).map(|w| w[0] * k + w[1]).collect())?;
        let es = tape.sum(e);
        score = tape.add(score, es)?;
    }
    if let (Some(t2), true) = (v.trans2, m >= 3) {
        let e = tape.gather(t2, y.windows(3).map(|w| w[0] * k + w[2]).collect())?;
        let es = tape.sum(e);
        score = tape.add(score, es)?;
    }
    Ok(score)
}

/// `log Z − s(y)`.
pub fn crf_nll_tape(tape: &mut Tape, v: &CrfVars, y: &[usize]) -> Result<Var> {
    let score = sequence_score_tape(tape, v, y)?;
    let log_z = log_partition_tape(tape, v)?;
    tape.sub(log_z, score)
}

/// `−Σ_t α_{y_t} ln M[t, y_t]` with marginals from forward-backward.
pub fn cost_sensitive_tape(tape: &mut Tape, v: &CrfVars, y: &[usize], alpha: &[f64]) -> Result<Var> {
    let (m, k) = check_labels(tape, v, y)?;
    if alpha.len() != k || alpha.iter().any(|&a| !(a > 0.0)) {
        return param_err(format!("class weights must be {k} positive values"));
    }
    let chain = TapeChain::build(tape, v)?;
    let fwd = chain.forward(tape)?;
    let bwd = chain.backward(tape)?;
    let log_z = tape.logsumexp(*fwd.last().expect("non-empty"));
    let mut picked = Vec::with_capacity(m);
    for (t, &l) in y.iter().enumerate() {
        let (pos, states) = chain.states_for(t, l);
        let joint = tape.add(fwd[pos], bwd[pos])?;
        let sel = tape.gather(joint, states)?;
        picked.push(tape.logsumexp(sel));
    }
    let stacked = tape.stack_rows(&picked)?;
    let weighted = tape.dot_const(stacked, Tensor::new([m, 1], y.iter().map(|&l| -alpha[l]).collect())?)?;
    let total_alpha: f64 = y.iter().map(|&l| alpha[l]).sum();
    let norm = tape.scale_shift(log_z, total_alpha, 0.0);
    tape.add(weighted, norm)
}
