//! Finite-difference verification of reverse-mode gradients.

use indexmap::IndexMap;

use crate::error::Result;

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Per-parameter comparison of reverse-mode and central finite-difference
/// gradients. Reports, never aborts: a failing tensor simply shows up with a
/// large relative error.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// (parameter name, max relative error over its elements)
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub step: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Per-element error normalized against the larger of the element pair and
/// the tensor's dominant gradient magnitude. Central differences carry
/// cancellation noise of about machine-ε·|f|/step in absolute terms
/// (~1e-10 at step 1e-5), so gradients at or below that resolution compare
/// against the 1e-5 floor rather than against quantization noise.
fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(scale).max(1e-5);
    (a - b).abs() / denom
}

/// Check the gradients of a scalar function of named parameters.
///
/// `build` must construct the forward graph on the given tape, registering
/// every parameter it uses via [`Tape::param`], and return the scalar loss
/// var. It is called once for the reverse-mode pass and then 2·numel times
/// for central differences, so keep the instance small.
pub fn grad_check<F>(
    params: &IndexMap<String, Tensor>,
    build: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &IndexMap<String, Tensor>) -> Result<Var>,
{
    // Reverse-mode gradients.
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    tape.backward(loss)?;
    let analytic: IndexMap<String, Vec<f64>> = params
        .keys()
        .map(|name| {
            let g = tape
                .param_grad(name)
                .unwrap_or_else(|| vec![0.0; params[name].numel()]);
            (name.clone(), g)
        })
        .collect();

    let eval = |p: &IndexMap<String, Tensor>| -> Result<f64> {
        let mut t = Tape::new();
        let l = build(&mut t, p)?;
        Ok(t.scalar_value(l))
    };

    let mut work = params.clone();
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel = 0.0f64;
    for name in params.keys() {
        let numel = params[name].numel();
        let mut fd_grad = vec![0.0; numel];
        for (i, slot) in fd_grad.iter_mut().enumerate() {
            let orig = work[name].data()[i];
            work[name].data_mut()[i] = orig + step;
            let f_plus = eval(&work)?;
            work[name].data_mut()[i] = orig - step;
            let f_minus = eval(&work)?;
            work[name].data_mut()[i] = orig;
            *slot = (f_plus - f_minus) / (2.0 * step);
        }
        let scale = analytic[name]
            .iter()
            .chain(fd_grad.iter())
            .fold(0.0f64, |m, &g| m.max(g.abs()));
        let worst = analytic[name]
            .iter()
            .zip(fd_grad.iter())
            .fold(0.0f64, |m, (&a, &f)| m.max(rel_err(a, f, scale)));
        max_rel = max_rel.max(worst);
        per_param.push((name.clone(), worst));
    }

    Ok(GradCheckReport { per_param, max_rel_err: max_rel, step, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_grad_is_exact() {
        // f(x) = sum(x²), analytic gradient 2x.
        let mut params = IndexMap::new();
        params.insert(
            "x".to_string(),
            Tensor::from_vec(vec![1.5, -2.0, 0.25, 3.0]).with_grad(),
        );
        let report = grad_check(
            &params,
            |tape, p| {
                let x = tape.param("x", &p["x"]);
                let sq = tape.mul(x, x)?;
                Ok(tape.sum_all(sq))
            },
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);

        // And the analytic value really is 2x.
        let mut tape = Tape::new();
        let x = tape.param("x", &params["x"]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.param_grad("x").unwrap(), vec![3.0, -4.0, 0.5, 6.0]);
    }

    #[test]
    fn report_never_aborts_on_bad_gradient() {
        // A function whose "parameter" is unused still yields a report.
        let mut params = IndexMap::new();
        params.insert("unused".to_string(), Tensor::from_vec(vec![1.0]).with_grad());
        let report = grad_check(
            &params,
            |tape, p| {
                let _ = tape.param("unused", &p["unused"]);
                let c = tape.leaf(vec![1], vec![7.0]);
                Ok(tape.sum_all(c))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed());
        assert_eq!(report.per_param.len(), 1);
    }
}
