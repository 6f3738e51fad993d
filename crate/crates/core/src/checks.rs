//! Finite-difference gradient checks over every differentiable tape op and
//! over the full training objective of a small model.

use rand::Rng;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::losses::{cross_entropy, l_cr_t, total_loss};
use crate::model::{CausalModel, ModelConfig};
use crate::nn::{BackboneConfig, ParamSet};
use crate::rng;
use crate::tensor::gradcheck::grad_check_many;
use crate::tensor::{Tape, Tensor, Var};

/// Central-difference step.
pub const GRAD_STEP: f64 = 1e-5;

type OpFn = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// A named op applied to freshly drawn inputs of fixed shapes.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: &'static [&'static [usize]],
    /// Inputs are drawn as distinct values, so max selections are stable
    /// under the probe step.
    pub distinct: bool,
    pub f: OpFn,
}

const LABELS: [usize; 3] = [2, 0, 3];

pub const OP_CASES: &[OpCase] = &[
    OpCase { name: "add", inputs: &[&[3, 4], &[3, 4]], distinct: false, f: |t, v| t.add(v[0], v[1]) },
    OpCase { name: "mul", inputs: &[&[3, 4], &[3, 4]], distinct: false, f: |t, v| t.mul(v[0], v[1]) },
    OpCase { name: "relu", inputs: &[&[3, 4]], distinct: false, f: |t, v| Ok(t.relu(v[0])) },
    OpCase { name: "sigmoid", inputs: &[&[3, 4]], distinct: false, f: |t, v| Ok(t.sigmoid(v[0])) },
    OpCase { name: "scale", inputs: &[&[3, 4]], distinct: false, f: |t, v| Ok(t.scale(v[0], -1.7)) },
    OpCase { name: "add_scalar", inputs: &[&[3, 4]], distinct: false, f: |t, v| Ok(t.add_scalar(v[0], 0.3)) },
    OpCase { name: "matmul", inputs: &[&[3, 4], &[4, 5]], distinct: false, f: |t, v| t.matmul(v[0], v[1]) },
    OpCase { name: "add_bias", inputs: &[&[2, 3, 4], &[4]], distinct: false, f: |t, v| t.add_bias(v[0], v[1]) },
    OpCase {
        name: "conv2d",
        inputs: &[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]],
        distinct: false,
        f: |t, v| t.conv2d(v[0], v[1], v[2], 1, 1),
    },
    OpCase {
        name: "conv2d_strided",
        inputs: &[&[1, 2, 6, 6], &[2, 2, 3, 3], &[2]],
        distinct: false,
        f: |t, v| t.conv2d(v[0], v[1], v[2], 2, 0),
    },
    OpCase { name: "maxpool2d", inputs: &[&[2, 2, 4, 4]], distinct: true, f: |t, v| t.maxpool2d(v[0], 2, 2) },
    OpCase { name: "log_softmax", inputs: &[&[3, 5]], distinct: false, f: |t, v| t.log_softmax(v[0]) },
    OpCase { name: "sum", inputs: &[&[3, 4]], distinct: false, f: |t, v| Ok(t.sum(v[0])) },
    OpCase { name: "sum_axis", inputs: &[&[2, 3, 4]], distinct: false, f: |t, v| t.sum_axis(v[0], 1) },
    OpCase { name: "mean_axis", inputs: &[&[2, 3, 4]], distinct: false, f: |t, v| t.mean_axis(v[0], 2) },
    OpCase { name: "reshape", inputs: &[&[2, 6]], distinct: false, f: |t, v| t.reshape(v[0], &[3, 4]) },
    OpCase { name: "transpose_last2", inputs: &[&[2, 3, 4]], distinct: false, f: |t, v| t.transpose_last2(v[0]) },
    OpCase { name: "select", inputs: &[&[2, 3, 4]], distinct: false, f: |t, v| t.select(v[0], 1, 2) },
    OpCase { name: "pick_mean", inputs: &[&[3, 4]], distinct: false, f: |t, v| t.pick_mean(v[0], &LABELS) },
    OpCase {
        name: "cross_entropy",
        inputs: &[&[3, 4]],
        distinct: false,
        f: |t, v| cross_entropy(t, v[0], &LABELS),
    },
    OpCase { name: "l_cr_t", inputs: &[&[3, 4]], distinct: false, f: |t, v| l_cr_t(t, v[0], &LABELS, 16) },
];

/// Uniform draws in `±[0.05, 1]`, keeping clear of the relu kink.
fn draw(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Shuffled grid values spaced 0.01 apart.
fn draw_distinct(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| -1.0 + 0.01 * i as f64).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).expect("sized from shape")
}

/// Contracts `out` with fixed random weights so every output coordinate
/// reaches the scalar with a non-trivial coefficient.
fn contract(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = rng::stream(seed, "gradcheck_weights", &[]);
    let w = tape.constant(Tensor::from_fn(&shape, |_| rng.random_range(0.5..1.5)));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Worst relative error of `case` at inputs drawn from `seed`.
pub fn op_gradient_error(case: &OpCase, seed: u64) -> Result<f64> {
    let mut rng = rng::stream(seed, case.name, &[]);
    let inputs: Vec<Tensor<f64>> = case
        .inputs
        .iter()
        .map(|s| if case.distinct { draw_distinct(s, &mut rng) } else { draw(s, &mut rng) })
        .collect();
    grad_check_many(
        |tape, vars| {
            let out = (case.f)(tape, vars)?;
            contract(tape, out, seed)
        },
        &inputs,
        GRAD_STEP,
    )
}

/// The 2-class, 8×8 model with a two-block backbone: `n = 4`, `n_c = 8`.
pub fn micro_model() -> Result<CausalModel> {
    CausalModel::new(ModelConfig::new(BackboneConfig::vgg(1, 8, &[4, 8]), 2))
}

/// Result of [`micro_model_gradient_error`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MicroCheck {
    pub worst: f64,
    /// Draws discarded because a probe crossed a relu/pooling branch.
    pub rejected: usize,
}

/// Redraws allowed before giving up on finding a smooth point.
pub const MAX_DRAWS: usize = 50;

/// Worst relative error over every parameter gradient of the combined
/// objective of [`micro_model`], at a random batch with random biases.
/// Points where a probe changes branch are redrawn from the same seed.
pub fn micro_model_gradient_error(seed: u64, lambda: f64) -> Result<MicroCheck> {
    micro_model_gradient_error_with_step(seed, lambda, GRAD_STEP)
}

/// [`micro_model_gradient_error`] with an explicit difference step.
pub fn micro_model_gradient_error_with_step(seed: u64, lambda: f64, step: f64) -> Result<MicroCheck> {
    let model = micro_model()?;
    for draw in 0..MAX_DRAWS {
        let mut params: ParamSet<f64> = model.init_params(rng::derive_seed(seed, "micro_init", &[draw as u64]))?;
        let mut rng = rng::stream(seed, "micro_batch", &[draw as u64]);
        // Zero biases put dead-input pre-activations exactly on the relu kink.
        let bias_names: Vec<String> = params.names().filter(|n| n.ends_with("bias")).map(str::to_owned).collect();
        for name in bias_names {
            let b = params.get_mut(&name).expect("listed above");
            b.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
        let batch = 3;
        let images = Tensor::from_fn(&[batch, 1, 8, 8], |_| rng.random_range(0.0..1.0));
        let labels: Vec<usize> = (0..batch).map(|i| i % 2).collect();
        let names: Vec<String> = params.names().map(str::to_owned).collect();
        let values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
        let res = grad_check_many(
            |tape, vars| {
                let pv = names.iter().cloned().zip(vars.iter().copied()).collect();
                let x = tape.constant(images.clone());
                let out = model.forward(tape, &pv, x)?;
                Ok(total_loss(tape, &out, &labels, lambda)?.total)
            },
            &values,
            step,
        );
        match res {
            Ok(worst) => return Ok(MicroCheck { worst, rejected: draw }),
            Err(Error::NonSmooth { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::InvalidArgument(format!("no smooth point found in {MAX_DRAWS} draws")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_one_seed() {
        for case in OP_CASES {
            let e = op_gradient_error(case, 1).unwrap();
            assert!(e < 1e-4, "{}: {e}", case.name);
        }
    }

    #[test]
    fn micro_model_geometry() {
        let m = micro_model().unwrap();
        assert_eq!((m.n(), m.n_c()), (4, 8));
    }
}
