use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst disagreement.
    pub worst: (usize, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub probes: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = ((usize, usize), f64, f64)>) -> Self {
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: (0, 0),
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            probes: 0,
        };
        for (coord, a, n) in pairs {
            report.probes += 1;
            let e = relative_error(a, n);
            if e > report.max_rel_error || report.probes == 1 {
                report.max_rel_error = e;
                report.worst = coord;
                report.worst_analytic = a;
                report.worst_numeric = n;
            }
        }
        report
    }
}

/// Central differences `(f(x+eps) − f(x−eps)) / 2eps` at the given
/// `(input, coordinate)` probes.
pub fn central_difference(
    mut f: impl FnMut(&[Tensor]) -> Result<f64>,
    inputs: &[Tensor],
    eps: f64,
    probes: &[(usize, usize)],
) -> Result<Vec<f64>> {
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check", "eps must be positive"));
    }
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(probes.len());
    for &(i, j) in probes {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + eps;
        let plus = f(&work)?;
        work[i].data_mut()[j] = orig - eps;
        let minus = f(&work)?;
        work[i].data_mut()[j] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                location: format!("grad_check probe of input {} coordinate {}", i, j),
            });
        }
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

fn evaluate(f: &impl Fn(&mut Graph, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::shape("grad_check", "closure must return a scalar"));
    }
    Ok(v.data()[0])
}

/// Compares the tape's analytic gradient of the scalar closure `f` against
/// central differences at every coordinate of every input.
pub fn grad_check(
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    eps: f64,
) -> Result<GradCheckReport> {
    let probes: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    grad_check_at(f, inputs, eps, &probes)
}

/// [`grad_check`] restricted to selected `(input, coordinate)` probes.
pub fn grad_check_at(
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    eps: f64,
    probes: &[(usize, usize)],
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_finite() {
        return Err(Error::NonFinite {
            location: "grad_check forward value".into(),
        });
    }
    g.backward(out)?;
    let analytic: Vec<f64> = probes
        .iter()
        .map(|&(i, j)| g.grad(vars[i]).map_or(0.0, |gr| gr[j]))
        .collect();
    if let Some(p) = analytic.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            location: format!("analytic gradient of input {} coordinate {}", probes[p].0, probes[p].1),
        });
    }
    let numeric = central_difference(|xs| evaluate(&f, xs), inputs, eps, probes)?;
    Ok(GradCheckReport::from_pairs(
        probes
            .iter()
            .zip(analytic.into_iter().zip(numeric))
            .map(|(&p, (a, n))| (p, a, n)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::scalar(0.7);
        let r = grad_check(|g, v| Ok(g.scale(v[0], 3.0)), &[x], 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
        assert!((r.worst_analytic - 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::vector(vec![1.0, -2.0]);
        let r = grad_check(
            |g, v| g.weighted_sum(v[0], vec![0.0, 0.0]),
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.worst_analytic, 0.0);
        assert_eq!(r.worst_numeric, 0.0);
    }

    #[test]
    fn non_finite_probe_is_reported_with_coordinate() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = central_difference(
            |xs| Ok(if xs[0].data()[1] > 2.0 { f64::INFINITY } else { 0.0 }),
            &[x],
            1e-5,
            &[(0, 0), (0, 1)],
        )
        .unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
    }

    #[test]
    fn rejects_non_positive_eps() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|g, v| Ok(g.scale(v[0], 1.0)), &[x], 0.0).is_err());
    }
}
