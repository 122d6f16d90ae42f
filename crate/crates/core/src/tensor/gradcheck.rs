//! Central finite-difference gradient checking.

use super::graph::{Graph, OpKind, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct InputCheck {
    pub input: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub inputs: Vec<InputCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl CheckReport {
    /// `(input, element)` with the largest relative error.
    pub fn worst(&self) -> Option<(usize, usize)> {
        self.inputs
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .map(|c| (c.input, c.worst_index))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many evenly spaced elements per input.
    pub max_elements: Option<usize>,
    pub fault: Option<OpKind>,
}

impl GradCheck {
    pub fn new(eps: f64, tol: f64) -> Self {
        Self {
            eps,
            tol,
            max_elements: None,
            fault: None,
        }
    }

    pub fn max_elements(mut self, n: usize) -> Self {
        self.max_elements = Some(n);
        self
    }

    pub fn fault(mut self, kind: Option<OpKind>) -> Self {
        self.fault = kind;
        self
    }

    fn eval<F>(&self, f: &F, inputs: &[Tensor]) -> Result<f64>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(Error::NonScalarOutput(v.shape().to_vec()));
        }
        let y = v.item();
        if !y.is_finite() {
            return Err(Error::NonFinite {
                op: "grad_check objective".into(),
                index: 0,
            });
        }
        Ok(y)
    }

    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<CheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        if let Some(kind) = self.fault {
            g.inject_fault(kind);
        }
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| g.leaf(t.clone().with_requires_grad(true)))
            .collect();
        let out = f(&mut g, &vars)?;
        g.backward(out)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| {
                g.grad(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();

        let mut work: Vec<Tensor> = inputs.to_vec();
        let mut checks = Vec::with_capacity(inputs.len());
        for (i, input) in inputs.iter().enumerate() {
            let n = input.numel();
            let picks: Vec<usize> = match self.max_elements {
                Some(m) if m < n => (0..m).map(|k| k * n / m).collect(),
                _ => (0..n).collect(),
            };
            let mut check = InputCheck {
                input: i,
                checked: picks.len(),
                max_rel_error: 0.0,
                worst_index: 0,
                analytic: 0.0,
                numeric: 0.0,
            };
            for &e in &picks {
                let orig = input.data()[e];
                work[i].data_mut()[e] = orig + self.eps;
                let plus = self.eval(&f, &work)?;
                work[i].data_mut()[e] = orig - self.eps;
                let minus = self.eval(&f, &work)?;
                work[i].data_mut()[e] = orig;
                let numeric = (plus - minus) / (2.0 * self.eps);
                let a = analytic[i][e];
                let err = relative_error(a, numeric);
                if e == picks[0] || err > check.max_rel_error {
                    check.max_rel_error = err;
                    check.worst_index = e;
                    check.analytic = a;
                    check.numeric = numeric;
                }
            }
            checks.push(check);
        }
        let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
        Ok(CheckReport {
            inputs: checks,
            max_rel_error,
            tol: self.tol,
            passed: max_rel_error < self.tol,
        })
    }
}

/// Compares autodiff gradients of scalar `f` against central differences
/// `(f(x + eps) - f(x - eps)) / (2 eps)` for every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    GradCheck::new(eps, tol).run(f, inputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(g: &mut Graph, v: &[Var]) -> Result<Var> {
        let ax = g.matmul(v[0], v[1])?;
        let sq = g.mul(ax, ax)?;
        g.sum(sq)
    }

    #[test]
    fn quadratic_form_passes() {
        let a = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.3).sin());
        let x = Tensor::from_fn(&[4, 2], |i| (i as f64 * 0.9).cos());
        let r = grad_check(quadratic, &[a, x], 1e-5, 1e-7).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.inputs[0].checked, 12);
    }

    #[test]
    fn corrupted_rule_is_caught_with_index() {
        let a = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.3).sin());
        let x = Tensor::from_fn(&[4, 2], |i| (i as f64 * 0.9).cos());
        let r = GradCheck::new(1e-5, 1e-4)
            .fault(Some(OpKind::Matmul))
            .run(quadratic, &[a, x])
            .unwrap();
        assert!(!r.passed);
        assert!(r.worst().is_some());
        assert!(r.max_rel_error > 1e-2);
    }

    #[test]
    fn non_finite_objective_errors() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let r = grad_check(|g, v| g.log(v[0]), &[x], 1e-5, 1e-4);
        assert!(r.is_err());
    }
}
