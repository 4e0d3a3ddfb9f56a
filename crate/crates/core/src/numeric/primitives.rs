//! Finite-difference checks of every differentiable tape operation.
//!
//! Each case binds random inputs, applies one operation and contracts the
//! result with fixed random weights, so that every output entry receives a
//! distinct adjoint.

use rand::Rng;

use super::gradcheck::{grad_check, GradCheckReport};
use super::kernels::Padding;
use super::params::{Bound, Params};
use super::rng::SeedTree;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

type OpFn = fn(&mut Tape, &Bound) -> Result<Var>;

struct Case {
    name: &'static str,
    /// Input names and shapes.
    inputs: &'static [(&'static str, &'static [usize])],
    /// Inputs drawn from `[0.5, 2)` instead of `±[0.1, 2)`.
    positive: bool,
    op: OpFn,
}

fn v(b: &Bound, name: &str) -> Result<Var> {
    b.get(name)
}

const CASES: &[Case] = &[
    Case { name: "add", inputs: &[("a", &[3, 4]), ("b", &[3, 4])], positive: false, op: |t, b| t.add(v(b, "a")?, v(b, "b")?) },
    Case { name: "sub", inputs: &[("a", &[3, 4]), ("b", &[3, 4])], positive: false, op: |t, b| t.sub(v(b, "a")?, v(b, "b")?) },
    Case { name: "mul", inputs: &[("a", &[3, 4]), ("b", &[3, 4])], positive: false, op: |t, b| t.mul(v(b, "a")?, v(b, "b")?) },
    Case { name: "scale_shift", inputs: &[("x", &[5])], positive: false, op: |t, b| Ok(t.scale_shift(v(b, "x")?, -1.5, 0.25)) },
    Case { name: "neg", inputs: &[("x", &[5])], positive: false, op: |t, b| Ok(t.neg(v(b, "x")?)) },
    Case {
        name: "mul_const",
        inputs: &[("x", &[2, 3])],
        positive: false,
        op: |t, b| t.mul_const(v(b, "x")?, Tensor::new([2, 3], vec![0.5, -1.0, 2.0, 3.0, -0.25, 1.5])?),
    },
    Case { name: "add_scalar", inputs: &[("x", &[2, 3]), ("s", &[1])], positive: false, op: |t, b| t.add_scalar(v(b, "x")?, v(b, "s")?) },
    Case { name: "add_row_vec", inputs: &[("x", &[3, 4]), ("v", &[4])], positive: false, op: |t, b| t.add_row_vec(v(b, "x")?, v(b, "v")?) },
    Case { name: "add_col_vec", inputs: &[("x", &[3, 4]), ("v", &[3])], positive: false, op: |t, b| t.add_col_vec(v(b, "x")?, v(b, "v")?) },
    Case { name: "matmul", inputs: &[("a", &[3, 4]), ("b", &[4, 2])], positive: false, op: |t, b| t.matmul(v(b, "a")?, v(b, "b")?) },
    Case { name: "matmul_vec", inputs: &[("a", &[3, 4]), ("b", &[4])], positive: false, op: |t, b| t.matmul(v(b, "a")?, v(b, "b")?) },
    Case {
        name: "affine",
        inputs: &[("w", &[3, 4]), ("x", &[4, 5]), ("b", &[3])],
        positive: false,
        op: |t, b| t.affine(v(b, "w")?, v(b, "x")?, v(b, "b")?),
    },
    Case { name: "transpose", inputs: &[("x", &[3, 4])], positive: false, op: |t, b| t.transpose(v(b, "x")?) },
    Case { name: "reshape", inputs: &[("x", &[3, 4])], positive: false, op: |t, b| t.reshape(v(b, "x")?, &[2, 6]) },
    Case { name: "sigmoid", inputs: &[("x", &[6])], positive: false, op: |t, b| Ok(t.sigmoid(v(b, "x")?)) },
    Case { name: "tanh", inputs: &[("x", &[6])], positive: false, op: |t, b| Ok(t.tanh(v(b, "x")?)) },
    Case { name: "relu", inputs: &[("x", &[8])], positive: false, op: |t, b| Ok(t.relu(v(b, "x")?)) },
    Case { name: "exp", inputs: &[("x", &[6])], positive: false, op: |t, b| Ok(t.exp(v(b, "x")?)) },
    Case { name: "ln", inputs: &[("x", &[6])], positive: true, op: |t, b| Ok(t.ln(v(b, "x")?)) },
    Case {
        name: "dropout",
        inputs: &[("x", &[4, 5])],
        positive: false,
        op: |t, b| t.dropout(v(b, "x")?, 0.3, true, &mut SeedTree::new(11).rng()),
    },
    Case {
        name: "conv1d_same",
        inputs: &[("x", &[2, 9]), ("k", &[3, 2, 4]), ("b", &[3])],
        positive: false,
        op: |t, b| t.conv1d(v(b, "x")?, v(b, "k")?, v(b, "b")?, 2, Padding::SameByStride),
    },
    Case {
        name: "conv1d_valid",
        inputs: &[("x", &[2, 9]), ("k", &[3, 2, 3]), ("b", &[3])],
        positive: false,
        op: |t, b| t.conv1d(v(b, "x")?, v(b, "k")?, v(b, "b")?, 2, Padding::Valid),
    },
    Case { name: "maxpool1d", inputs: &[("x", &[2, 12])], positive: false, op: |t, b| t.maxpool1d(v(b, "x")?, 3) },
    Case { name: "avgpool1d", inputs: &[("x", &[2, 12])], positive: false, op: |t, b| t.avgpool1d(v(b, "x")?, 4) },
    Case { name: "row", inputs: &[("x", &[3, 4])], positive: false, op: |t, b| t.row(v(b, "x")?, 1) },
    Case { name: "column", inputs: &[("x", &[3, 4])], positive: false, op: |t, b| t.column(v(b, "x")?, 2) },
    Case {
        name: "stack_rows",
        inputs: &[("a", &[4]), ("b", &[4])],
        positive: false,
        op: |t, b| t.stack_rows(&[v(b, "a")?, v(b, "b")?, v(b, "a")?]),
    },
    Case {
        name: "stack_cols",
        inputs: &[("a", &[3]), ("b", &[3])],
        positive: false,
        op: |t, b| t.stack_cols(&[v(b, "b")?, v(b, "a")?]),
    },
    Case { name: "gather", inputs: &[("x", &[3, 4])], positive: false, op: |t, b| t.gather(v(b, "x")?, vec![0, 5, 5, 11]) },
    Case { name: "sum", inputs: &[("x", &[3, 4])], positive: false, op: |t, b| Ok(t.sum(v(b, "x")?)) },
    Case {
        name: "dot_const",
        inputs: &[("x", &[4])],
        positive: false,
        op: |t, b| t.dot_const(v(b, "x")?, Tensor::vector(vec![1.0, -2.0, 0.5, 3.0])),
    },
    Case { name: "logsumexp", inputs: &[("x", &[3, 4])], positive: false, op: |t, b| Ok(t.logsumexp(v(b, "x")?)) },
    Case { name: "logsumexp_rows", inputs: &[("x", &[3, 4])], positive: false, op: |t, b| t.logsumexp_axis(v(b, "x")?, 0) },
    Case { name: "logsumexp_cols", inputs: &[("x", &[3, 4])], positive: false, op: |t, b| t.logsumexp_axis(v(b, "x")?, 1) },
    Case { name: "log_matmul", inputs: &[("a", &[3, 4]), ("b", &[4, 2])], positive: false, op: |t, b| t.log_matmul(v(b, "a")?, v(b, "b")?) },
    Case { name: "log_matmul_vec", inputs: &[("a", &[4]), ("b", &[4, 4])], positive: false, op: |t, b| t.log_matmul(v(b, "a")?, v(b, "b")?) },
];

/// Names of the checked operations, in check order.
pub fn primitive_names() -> Vec<&'static str> {
    CASES.iter().map(|c| c.name).collect()
}

/// Central-difference check of every primitive at step `eps`; returns one
/// report per operation.
pub fn primitive_checks(seed: u64, eps: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let root = SeedTree::new(seed);
    CASES
        .iter()
        .enumerate()
        .map(|(ci, case)| {
            let mut rng = root.child(ci as u64).rng();
            let mut params = Params::new();
            for (name, shape) in case.inputs {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| {
                        if case.positive {
                            rng.random_range(0.5..2.0)
                        } else {
                            // keep clear of 0 so ReLU never straddles its kink
                            let x: f64 = rng.random_range(0.1..2.0);
                            if rng.random_bool(0.5) {
                                x
                            } else {
                                -x
                            }
                        }
                    })
                    .collect();
                params.insert(*name, Tensor::new(shape.to_vec(), data)?);
            }
            let weights_seed = root.child(1000 + ci as u64);
            let op = case.op;
            let loss = move |tape: &mut Tape, b: &Bound| {
                let y = op(tape, b)?;
                let shape = tape.shape(y).to_vec();
                let n: usize = shape.iter().product();
                let mut wr = weights_seed.rng();
                let w = Tensor::new(shape, (0..n).map(|_| wr.random_range(-1.0..1.0)).collect())?;
                tape.dot_const(y, w)
            };
            let report = grad_check(loss, &params, eps, usize::MAX, &mut rng)?;
            Ok((case.name, report))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_matches_finite_differences() {
        let reports = primitive_checks(3, 1e-5).unwrap();
        assert_eq!(reports.len(), primitive_names().len());
        for (name, r) in reports {
            assert!(r.checked > 0, "{name}");
            assert!(r.max_rel_error < 1e-6, "{name}: {r:?}");
        }
    }
}
