//! Training objectives.
//!
//! * `cross_entropy`: batch-mean negative log-likelihood of the pooled path.
//! * `l_cr_t`: the regularizer term for one stratification, with the uniform
//!   prior `1/n` kept inside the log. It equals cross-entropy plus `ln n` and
//!   has the same gradient.
//! * `total_loss`: `l_ce + λ · Σ_t l_cr_t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelOutput;
use crate::tensor::{Real, Tape, Var};

/// Loss values from one evaluation of [`total_loss`], in double precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_cr_terms: Vec<f64>,
    pub l_total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn l_cr_sum(&self) -> f64 {
        self.l_cr_terms.iter().sum()
    }
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

fn logits_2d<T: Real>(tape: &Tape<T>, logits: Var, labels: &[usize]) -> Result<usize> {
    let s = tape.shape(logits);
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("loss logits", s, &[labels.len()]));
    }
    check_labels(labels, s[1])?;
    Ok(s[1])
}

/// `-(1/B) Σ_b log softmax(z_b)[y_b]`.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    logits_2d(tape, logits, labels)?;
    let lp = tape.log_softmax(logits)?;
    let picked = tape.pick_mean(lp, labels)?;
    Ok(tape.scale(picked, -T::one()))
}

/// `-(1/B) Σ_b [log softmax(z_b)[y_b] + log(1/n)]` for one stratification's
/// `[B, K]` logits.
pub fn l_cr_t<T: Real>(tape: &mut Tape<T>, strat_logits_t: Var, labels: &[usize], n: usize) -> Result<Var> {
    if n == 0 {
        return Err(Error::InvalidArgument("stratification count must be >= 1".into()));
    }
    logits_2d(tape, strat_logits_t, labels)?;
    let lp = tape.log_softmax(strat_logits_t)?;
    let picked = tape.pick_mean(lp, labels)?;
    let prior = T::from_f64_lossy((1.0 / n as f64).ln());
    let with_prior = tape.add_scalar(picked, prior);
    Ok(tape.scale(with_prior, -T::one()))
}

/// Tape handle of the combined objective plus its value breakdown.
pub struct TotalLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// `l_ce + λ Σ_t l_cr_t`. A model without the activation branch contributes
/// only `l_ce` and requires `λ = 0`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &ModelOutput,
    labels: &[usize],
    lambda: f64,
) -> Result<TotalLoss> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let ce = cross_entropy(tape, out.baseline_logits, labels)?;
    let l_ce = tape.value(ce).data()[0].as_f64();

    let Some(strat) = out.strat_logits else {
        if lambda != 0.0 {
            return Err(Error::InvalidConfig(
                "lambda > 0 requires the activation branch".into(),
            ));
        }
        return Ok(TotalLoss {
            total: ce,
            breakdown: LossBreakdown {
                l_ce,
                l_cr_terms: Vec::new(),
                l_total: l_ce,
                lambda,
            },
        });
    };

    let n = tape.shape(strat)[1];
    let mut terms = Vec::with_capacity(n);
    let mut sum: Option<Var> = None;
    for t in 0..n {
        let zt = tape.select(strat, 1, t)?;
        let term = l_cr_t(tape, zt, labels, n)?;
        terms.push(tape.value(term).data()[0].as_f64());
        sum = Some(match sum {
            None => term,
            Some(s) => tape.add(s, term)?,
        });
    }
    let sum = sum.expect("n >= 1");
    let weighted = tape.scale(sum, T::from_f64_lossy(lambda));
    let total = tape.add(ce, weighted)?;
    let l_total = l_ce + lambda * terms.iter().sum::<f64>();
    Ok(TotalLoss {
        total,
        breakdown: LossBreakdown {
            l_ce,
            l_cr_terms: terms,
            l_total,
            lambda,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[3, 10]));
        let ce = cross_entropy(&mut tape, z, &[0, 4, 9]).unwrap();
        assert!((tape.value(ce).data()[0] - 10f64.ln()).abs() < 1e-12);
        let cr = l_cr_t(&mut tape, z, &[0, 4, 9], 16).unwrap();
        let expect = 10f64.ln() + 16f64.ln();
        assert!((tape.value(cr).data()[0] - expect).abs() < 1e-12);
        assert!((expect - 5.075174).abs() < 1e-6);
    }

    #[test]
    fn saturated_logits() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::new(vec![1, 3], vec![0.0, 1000.0, 0.0]).unwrap());
        let ce = cross_entropy(&mut tape, z, &[1]).unwrap();
        assert!(tape.value(ce).data()[0].abs() < 1e-12);
    }

    #[test]
    fn single_stratum_equals_cross_entropy() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.71).sin()));
        let ce = cross_entropy(&mut tape, z, &[0, 1, 2, 1]).unwrap();
        let cr = l_cr_t(&mut tape, z, &[0, 1, 2, 1], 1).unwrap();
        assert_eq!(tape.value(ce), tape.value(cr));
    }

    #[test]
    fn bad_labels_rejected() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(cross_entropy(&mut tape, z, &[0, 3]).is_err());
        assert!(cross_entropy(&mut tape, z, &[0]).is_err());
        assert!(l_cr_t(&mut tape, z, &[0, 1], 0).is_err());
    }
}
