//! Central-difference gradient oracle.

use super::{Array, Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Per-tensor comparison of analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `||analytic - numeric|| / (||numeric|| + 1e-8)` for each tensor.
    pub tensor_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.tensor_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// Tensor `i` is registered on the tape as parameter id `i`, so code that
/// looks parameters up by id (through [`Tape::param`]) sees the perturbed
/// values. Returns the largest per-tensor relative error.
pub fn finite_diff_check<F>(params: &[Array], f: F) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    Ok(finite_diff_report(params, f, DEFAULT_STEP)?.max_error())
}

pub fn finite_diff_report<F>(params: &[Array], f: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Array], grad: bool| -> Result<(f64, Option<Vec<Array>>)> {
        let tape = if grad { Tape::new() } else { Tape::inference() };
        let vars: Vec<Var> = values
            .iter()
            .enumerate()
            .map(|(i, v)| tape.param(i, v, grad))
            .collect();
        let loss = f(&tape, &vars)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Oracle(format!("objective is not finite ({value})")));
        }
        if !grad {
            return Ok((value, None));
        }
        let grads = tape.backward(loss)?;
        let analytic = vars
            .iter()
            .zip(values)
            .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Array::zeros(p.shape())))
            .collect();
        Ok((value, Some(analytic)))
    };

    let (_, analytic) = eval(params, true)?;
    let analytic = analytic.expect("gradient requested");
    let mut work = params.to_vec();
    let mut tensor_errors = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut numeric = Array::zeros(params[t].shape());
        for e in 0..params[t].len() {
            let orig = params[t].data()[e];
            work[t].data_mut()[e] = orig + step;
            let (plus, _) = eval(&work, false)?;
            work[t].data_mut()[e] = orig - step;
            let (minus, _) = eval(&work, false)?;
            work[t].data_mut()[e] = orig;
            numeric.data_mut()[e] = (plus - minus) / (2.0 * step);
        }
        let diff = analytic[t].zip_map(&numeric, |a, n| a - n).norm();
        tensor_errors.push(diff / (numeric.norm() + 1e-8));
    }
    Ok(GradCheckReport { tensor_errors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{normal_array, SeedStream};
    use std::rc::Rc;

    #[test]
    fn quadratic_form() {
        let a = Array::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let x = Array::from_vec(vec![2, 1], vec![0.3, -0.7]).unwrap();
        let err = finite_diff_check(&[x], |t, v| {
            let am = t.constant(a.clone());
            let ax = t.matmul(am, v[0])?;
            let prod = t.mul(ax, v[0])?;
            Ok(t.sum(prod))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn softmax_cross_entropy() {
        let mut rng = SeedStream::new(3).rng("sce");
        let logits = normal_array(&mut rng, &[3, 5], 1.0);
        let target = Array::from_vec(
            vec![3, 5],
            vec![
                1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.2, 0.2, 0.2, 0.2, 0.2,
            ],
        )
        .unwrap();
        let err = finite_diff_check(&[logits], |t, v| {
            let p = t.softmax(v[0])?;
            let lp = t.log_floor(p, 1e-300);
            let tv = t.constant(target.clone());
            let prod = t.mul(lp, tv)?;
            let s = t.sum(prod);
            Ok(t.scale(s, -1.0))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn remaining_mass_through_sigmoid() {
        let mut rng = SeedStream::new(4).rng("rma");
        let logits = normal_array(&mut rng, &[4, 1], 1.0);
        let err = finite_diff_check(&[logits], |t, v| {
            // p_n = s_n r_n, r_{n+1} = r_n (1 - s_n), objective sum_n n * p_n
            let s = t.sigmoid(v[0]);
            let mut total: Option<Var> = None;
            let mut r = t.constant(Array::scalar(1.0));
            for n in 0..4 {
                let sn = t.gather_rows(s, Rc::new(vec![n]))?;
                let sn = t.reshape(sn, &[1])?;
                let p = t.mul(sn, r)?;
                let w = t.scale(p, (n + 1) as f64);
                total = Some(match total {
                    Some(acc) => t.add(acc, w)?,
                    None => w,
                });
                let keep = t.affine(sn, -1.0, 1.0);
                r = t.mul(r, keep)?;
            }
            Ok(total.unwrap())
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn non_finite_objective_is_an_oracle_error() {
        let x = Array::scalar(-1.0);
        let r = finite_diff_check(&[x], |t, v| {
            let l = t.value(v[0]).map(f64::ln);
            let c = t.constant(l);
            Ok(t.sum(c))
        });
        assert!(matches!(r, Err(Error::Oracle(_))));
    }
}
