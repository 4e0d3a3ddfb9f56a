//! Unidirectional gated recurrent unit over the CNN feature columns.
//!
//! ```text
//! u_t = σ(W_z z_t + U_z h_{t−1} + b_z)
//! r_t = σ(W_r z_t + U_r h_{t−1} + b_r)
//! h̃_t = g(W_h z_t + r_t ⊙ U_h h_{t−1} + b_h)
//! h_t = u_t ⊙ h_{t−1} + (1 − u_t) ⊙ h̃_t
//! ```
//!
//! with `h_0 = 0` and `g(x) = 2σ(x) − 1` by default ([`Candidate::ScaledSigmoid`]),
//! or `tanh` on request.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::numeric::{Bound, Params, SeedTree, Tape, Tensor, Var};

/// Candidate-state activation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Candidate {
    /// `2σ(x) − 1`, equal to `tanh(x / 2)`.
    #[default]
    ScaledSigmoid,
    Tanh,
}

impl Candidate {
    pub fn name(self) -> &'static str {
        match self {
            Candidate::ScaledSigmoid => "scaled-sigmoid",
            Candidate::Tanh => "tanh",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "scaled-sigmoid" => Some(Candidate::ScaledSigmoid),
            "tanh" => Some(Candidate::Tanh),
            _ => None,
        }
    }
}

pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub candidate: Candidate,
}

impl GruConfig {
    pub fn new(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            candidate: Candidate::default(),
        }
    }
}

const GATES: [&str; 3] = ["z", "r", "h"];

/// Weights and recurrent matrices ~ U(±1/√hidden), zero biases.
pub fn gru_init(config: &GruConfig, seeds: SeedTree) -> Params {
    let mut rng = seeds.rng();
    let bound = 1.0 / (config.hidden_dim as f64).sqrt();
    let (h, d) = (config.hidden_dim, config.input_dim);
    let mut uniform = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
    let mut params = Params::new();
    for g in GATES {
        params.insert(format!("gru.w_{g}"), Tensor::new([h, d], uniform(h * d)).expect("shape"));
        params.insert(format!("gru.u_{g}"), Tensor::new([h, h], uniform(h * h)).expect("shape"));
        params.insert(format!("gru.b_{g}"), Tensor::zeros([h]));
    }
    params
}

fn activate(tape: &mut Tape, x: Var, candidate: Candidate) -> Var {
    match candidate {
        Candidate::ScaledSigmoid => {
            let s = tape.sigmoid(x);
            tape.scale_shift(s, 2.0, -1.0)
        }
        Candidate::Tanh => tape.tanh(x),
    }
}

/// Runs the recurrence over the columns of `z` (`[input_dim × m]`) and
/// returns `H` as `[hidden_dim × m]`.
pub fn gru_forward(tape: &mut Tape, params: &Bound, config: &GruConfig, z: Var) -> Result<Var> {
    let (d, m) = tape.value(z).dims2()?;
    if m == 0 {
        return Err(Error::EmptySequence);
    }
    if d != config.input_dim {
        return dim_err(format!("GRU expects {} features, got {d}", config.input_dim));
    }
    let p = |name: &str| params.get(&format!("gru.{name}"));
    let ax_z = tape.affine(p("w_z")?, z, p("b_z")?)?;
    let ax_r = tape.affine(p("w_r")?, z, p("b_r")?)?;
    let ax_h = tape.affine(p("w_h")?, z, p("b_h")?)?;
    let (u_z, u_r, u_h) = (p("u_z")?, p("u_r")?, p("u_h")?);

    let mut h = tape.leaf(Tensor::zeros([config.hidden_dim]));
    let mut states = Vec::with_capacity(m);
    for t in 0..m {
        let xz = tape.column(ax_z, t)?;
        let rz = tape.matmul(u_z, h)?;
        let pre_u = tape.add(xz, rz)?;
        let u = tape.sigmoid(pre_u);

        let xr = tape.column(ax_r, t)?;
        let rr = tape.matmul(u_r, h)?;
        let pre_r = tape.add(xr, rr)?;
        let r = tape.sigmoid(pre_r);

        let xh = tape.column(ax_h, t)?;
        let rh = tape.matmul(u_h, h)?;
        let gated = tape.mul(r, rh)?;
        let pre_c = tape.add(xh, gated)?;
        let cand = activate(tape, pre_c, config.candidate);

        let delta = tape.sub(h, cand)?;
        let keep = tape.mul(u, delta)?;
        h = tape.add(cand, keep)?;
        states.push(h);
    }
    tape.stack_cols(&states)
}

/// Convenience wrapper evaluating [`gru_forward`] on plain tensors.
pub fn gru_eval(params: &Params, config: &GruConfig, z: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let zv = tape.leaf(z.clone());
    let h = gru_forward(&mut tape, &bound, config, zv)?;
    Ok(tape.value(h).clone())
}
