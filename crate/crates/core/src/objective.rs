//! Cross-entropy plus sparsity and diversity penalties on the activation matrix.

use serde::{Deserialize, Serialize};

use crate::diffnum::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1e-4,
            lambda2: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda1.is_finite() && self.lambda2.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative, got λ1 = {}, λ2 = {}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

/// Graph nodes of the three loss terms and their weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub cls: Var,
    pub spr: Var,
    pub div: Var,
}

pub fn cls_term<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy_with_logits(logits, labels)
}

/// Mean row L1 norm of `A: [B, K]`.
pub fn sparsity_term<T: Scalar>(tape: &mut Tape<T>, a: Var) -> Result<Var> {
    check_matrix(tape, a, 1)?;
    let rows = tape.l1_norm(a, 1)?;
    tape.mean(rows, 0)
}

/// Mean absolute off-diagonal cosine similarity between the columns of `A`.
pub fn diversity_term<T: Scalar>(tape: &mut Tape<T>, a: Var) -> Result<Var> {
    let k = check_matrix(tape, a, 2)?;
    let an = tape.l2_normalize(a, 0)?;
    let at = tape.transpose_last2(an)?;
    let c = tape.matmul(at, an)?;
    let c = tape.abs(c);
    let mask = Tensor::from_fn(&[k, k], |i| if i / k == i % k { T::zero() } else { T::one() });
    let mask = tape.constant(mask);
    let off = tape.mul(c, mask)?;
    let s = tape.sum_all(off);
    Ok(tape.scale(s, T::one() / T::lit((k * (k - 1)) as f64)))
}

pub fn total_terms<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    a: Var,
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    let cls = cls_term(tape, logits, labels)?;
    let spr = sparsity_term(tape, a)?;
    let div = diversity_term(tape, a)?;
    let s = tape.scale(spr, T::lit(weights.lambda1));
    let d = tape.scale(div, T::lit(weights.lambda2));
    let total = tape.add(cls, s)?;
    let total = tape.add(total, d)?;
    Ok(LossTerms { total, cls, spr, div })
}

fn check_matrix<T: Scalar>(tape: &Tape<T>, a: Var, min_cols: usize) -> Result<usize> {
    let s = tape.shape(a);
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::Shape(format!("activation matrix must be [B, K] with B ≥ 1, got {s:?}")));
    }
    if s[1] < min_cols {
        return Err(Error::InvalidArgument(format!(
            "needs at least {min_cols} shapelet columns, got {}",
            s[1]
        )));
    }
    Ok(s[1])
}

fn evaluate<T: Scalar>(f: impl FnOnce(&mut Tape<T>) -> Result<Var>) -> Result<T> {
    let mut tape = Tape::new();
    let v = f(&mut tape)?;
    Ok(tape.value(v).item())
}

/// Batch-mean cross-entropy.
pub fn cls_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    evaluate(|t| {
        let l = t.constant(logits.clone());
        cls_term(t, l, labels)
    })
}

pub fn sparsity_loss<T: Scalar>(a: &Tensor<T>) -> Result<T> {
    evaluate(|t| {
        let a = t.constant(a.clone());
        sparsity_term(t, a)
    })
}

pub fn diversity_loss<T: Scalar>(a: &Tensor<T>) -> Result<T> {
    evaluate(|t| {
        let a = t.constant(a.clone());
        diversity_term(t, a)
    })
}

pub fn total_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize], a: &Tensor<T>, weights: &LossWeights) -> Result<T> {
    evaluate(|t| {
        let l = t.constant(logits.clone());
        let a = t.constant(a.clone());
        total_terms(t, l, labels, a, weights).map(|terms| terms.total)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cls_loss(&m(1, 2, &[0.0, 0.0]), &[0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((cls_loss(&m(2, 5, &[1.0; 10]), &[3, 1]).unwrap() - 5f64.ln()).abs() < 1e-15);
        assert!(cls_loss(&m(1, 3, &[500.0, 0.0, 0.0]), &[0]).unwrap() < 1e-200);
        assert!(cls_loss(&m(1, 3, &[0.0; 3]), &[3]).is_err());
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(sparsity_loss(&m(3, 4, &[0.0; 12])).unwrap(), 0.0);
        assert_eq!(sparsity_loss(&m(2, 2, &[-1.0, -2.0, -3.0, 0.0])).unwrap(), 3.0);
    }

    #[test]
    fn diversity_examples() {
        assert_eq!(diversity_loss(&m(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap(), 0.0);
        assert!((diversity_loss(&m(3, 2, &[-1.0, -1.0, -2.0, -2.0, -0.5, -0.5])).unwrap() - 1.0).abs() < 1e-15);
        // columns (1, 2), (−2, −4), (3, 6)
        let a = m(2, 3, &[1.0, -2.0, 3.0, 2.0, -4.0, 6.0]);
        assert!((diversity_loss(&a).unwrap() - 1.0).abs() < 1e-15);
        // a dead column contributes nothing
        let dead = m(2, 2, &[0.0, -1.0, 0.0, -2.0]);
        assert_eq!(diversity_loss(&dead).unwrap(), 0.0);
        assert!(diversity_loss(&m(3, 1, &[1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn total_is_weighted_sum() {
        let logits = m(2, 3, &[0.1, -0.4, 2.0, 1.0, 0.5, -1.0]);
        let a = m(2, 3, &[-0.5, -1.5, -0.2, -0.9, -0.1, -2.0]);
        let zero = LossWeights { lambda1: 0.0, lambda2: 0.0 };
        assert_eq!(total_loss(&logits, &[2, 0], &a, &zero).unwrap(), cls_loss(&logits, &[2, 0]).unwrap());
        let w = LossWeights { lambda1: 0.3, lambda2: 2.0 };
        let parts = cls_loss(&logits, &[2, 0]).unwrap() + 0.3 * sparsity_loss(&a).unwrap() + 2.0 * diversity_loss(&a).unwrap();
        assert!((total_loss(&logits, &[2, 0], &a, &w).unwrap() - parts).abs() < 1e-15);
        assert_eq!(LossWeights::default(), LossWeights { lambda1: 1e-4, lambda2: 1e-4 });
        assert!(LossWeights { lambda1: -1.0, lambda2: 0.0 }.validate().is_err());
    }
}
