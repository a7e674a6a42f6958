//! Central-difference gradient oracle.

use crate::error::{MsmfError, Result};

use super::graph::{gradient, Graph, Var};
use super::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(build: &F, params: &[Tensor]) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    Ok((g, vars, loss))
}

/// Compares reverse-mode gradients of `build` against central differences
/// `(f(p+eps) - f(p-eps)) / (2 eps)` for every coordinate of every parameter.
///
/// `build` receives the parameters bound as graph leaves and must return a
/// scalar; it is called once for the analytic pass and twice per coordinate.
pub fn check_gradients<F>(build: F, params: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (g, vars, loss) = evaluate(&build, params)?;
    let analytic = gradient(&g, loss, &vars)?;
    drop(g);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        passed: true,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    let mut flat_index = 0usize;
    for (pi, param) in params.iter().enumerate() {
        for ci in 0..param.len() {
            let base = param.data()[ci];
            work[pi].data_mut()[ci] = base + eps;
            let plus = scalar_loss(&build, &work)?;
            work[pi].data_mut()[ci] = base - eps;
            let minus = scalar_loss(&build, &work)?;
            work[pi].data_mut()[ci] = base;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(MsmfError::Numeric(format!(
                    "non-finite loss when perturbing coordinate {flat_index} (parameter {pi}, entry {ci})"
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[ci];
            let err = relative_error(a, numeric);
            if err > report.max_relative_error || report.coordinates == 0 {
                report.max_relative_error = err;
                report.worst = (pi, ci);
                report.analytic = a;
                report.numeric = numeric;
            }
            report.coordinates += 1;
            flat_index += 1;
        }
    }
    report.passed = report.max_relative_error < tol;
    Ok(report)
}

fn scalar_loss<F>(build: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (g, _, loss) = evaluate(build, params)?;
    Ok(g.scalar_value(loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let params = vec![Tensor::row(vec![0.7, -1.3, 2.1])];
        let report = check_gradients(
            |g, p| {
                let sq = g.square(p[0]);
                Ok(g.sum(sq))
            },
            &params,
            DEFAULT_EPS,
            1e-9,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_relative_error < 1e-9);
    }

    #[test]
    fn non_finite_perturbation_reports_coordinate() {
        let params = vec![Tensor::row(vec![1.0, 1e-7])];
        let err = check_gradients(
            |g, p| {
                let l = g.log(p[0]);
                Ok(g.sum(l))
            },
            &params,
            DEFAULT_EPS,
            1e-6,
        );
        // log of the second entry goes negative on the minus side.
        let msg = err.unwrap_err().to_string();
        assert!(msg.contains("coordinate 1"), "{msg}");
    }
}
