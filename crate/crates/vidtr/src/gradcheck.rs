//! Central finite-difference gradient checking.
//!
//! The builder closure reconstructs the scalar loss from scratch on every
//! call, so the same graph is evaluated once analytically and twice per
//! perturbed entry. Checks always run in double precision regardless of
//! what the model trains in.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Precision, Tensor};

/// Relative error denominators are floored here so near-zero gradients
/// compare against finite-difference noise (~1e-8 for f64 at step 1e-4)
/// instead of against each other.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Entries compared across all inputs.
    pub checked: usize,
    pub max_rel_err: f64,
    /// Name and flat entry index of the worst comparison.
    pub worst: (String, usize),
}

/// Checks d(loss)/d(input) for every entry of every named input against a
/// central difference with the given step. `build` must be deterministic.
pub fn grad_check<F>(build: F, inputs: &[(String, Tensor)], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_sampled(build, inputs, step, usize::MAX)
}

/// Like `grad_check`, but compares at most `cap` entries per input,
/// spread evenly through each tensor (first entry always included). Large
/// models are too slow to difference entry-by-entry; the sample still
/// touches every tensor.
pub fn grad_check_sampled<F>(
    build: F,
    inputs: &[(String, Tensor)],
    step: f64,
    cap: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor], want_grads: bool| -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new(Precision::Double);
        let vars: Vec<Var> = values
            .iter()
            .map(|t| tape.leaf(t.clone(), want_grads))
            .collect();
        let loss = build(&mut tape, &vars)?;
        if tape.value(loss).len() != 1 {
            return Err(Error::Invalid {
                op: "grad_check",
                msg: "loss must be scalar".into(),
            });
        }
        let l = tape.value(loss).data()[0];
        let grads = if want_grads {
            tape.backward(loss)?;
            vars.iter().map(|&v| tape.grad(v)).collect()
        } else {
            vec![None; vars.len()]
        };
        Ok((l, grads))
    };

    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (_, analytic) = run(&values, true)?;

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: (String::new(), 0),
    };
    for pi in 0..inputs.len() {
        let analytic = match &analytic[pi] {
            Some(g) => g.clone(),
            None => Tensor::zeros(inputs[pi].1.shape()),
        };
        let n = values[pi].len();
        let picked: Vec<usize> = if n <= cap {
            (0..n).collect()
        } else {
            (0..cap).map(|j| j * n / cap).collect()
        };
        for e in picked {
            let orig = values[pi].data()[e];
            values[pi].data_mut()[e] = orig + step;
            let (f_plus, _) = run(&values, false)?;
            values[pi].data_mut()[e] = orig - step;
            let (f_minus, _) = run(&values, false)?;
            values[pi].data_mut()[e] = orig;
            let fd = (f_plus - f_minus) / (2.0 * step);
            let ad = analytic.data()[e];
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(REL_ERR_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (inputs[pi].0.clone(), e);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        // f(x) = sum(x * x) has gradient 2x.
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let report = grad_check(
            |tape, vars| {
                let sq = tape.mul_elem(vars[0], vars[0])?;
                Ok(tape.sum(sq))
            },
            &[("x".into(), x)],
            1e-4,
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn matmul_loss_checks_in_double() {
        let a = Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.5, 2.0, 0.1, -0.7]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![1.1, 0.2, -0.4, 0.9, 0.6, -1.5]).unwrap();
        let report = grad_check(
            |tape, vars| {
                let c = tape.matmul(vars[0], vars[1])?;
                let sq = tape.mul_elem(c, c)?;
                Ok(tape.sum(sq))
            },
            &[("a".into(), a), ("b".into(), b)],
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        // sum(softmax(x)) is constant 1 per row, so the gradient vanishes;
        // the floored denominator keeps fd noise from blowing up the ratio.
        let x = Tensor::new(vec![2, 4], vec![0.5, -0.2, 1.4, 0.0, -1.0, 0.3, 0.9, 2.0]).unwrap();
        let report = grad_check(
            |tape, vars| {
                let y = tape.softmax_rows(vars[0])?;
                Ok(tape.sum(y))
            },
            &[("x".into(), x)],
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn layer_norm_params_check() {
        let x = Tensor::new(vec![2, 3], vec![0.2, -0.8, 1.5, 0.0, 0.4, -0.3]).unwrap();
        let gamma = Tensor::new(vec![3], vec![1.2, 0.8, 1.0]).unwrap();
        let beta = Tensor::new(vec![3], vec![0.1, -0.2, 0.0]).unwrap();
        let report = grad_check(
            |tape, vars| {
                let y = tape.layer_norm(vars[0], vars[1], vars[2], 1e-5)?;
                let sq = tape.mul_elem(y, y)?;
                Ok(tape.sum(sq))
            },
            &[("x".into(), x), ("gamma".into(), gamma), ("beta".into(), beta)],
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn gelu_chain_checks() {
        // The x = 0 entry has a true gradient of exactly zero, leaving
        // ~4e-9 of fd truncation noise over the floored denominator.
        let x = Tensor::new(vec![5], vec![-2.0, -0.5, 0.0, 0.7, 1.9]).unwrap();
        let report = grad_check(
            |tape, vars| {
                let y = tape.gelu(vars[0]);
                let sq = tape.mul_elem(y, y)?;
                Ok(tape.sum(sq))
            },
            &[("x".into(), x)],
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "rel err {}", report.max_rel_err);
    }
}
