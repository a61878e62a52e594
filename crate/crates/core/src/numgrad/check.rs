use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// Checks every coordinate of `params` against `(L(p+h) - L(p-h)) / 2h`.
///
/// `loss` records a scalar loss on a fresh graph given the parameter leaves.
/// `tamper` optionally rewrites the analytic gradient before comparison; it
/// exists to confirm that the checker catches faults.
pub fn grad_check<F>(loss: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with(loss, params, h, tol, |_, _| {})
}

pub fn grad_check_with<F, T>(loss: F, params: &[Tensor], h: f64, tol: f64, tamper: T) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    T: Fn(usize, &mut Tensor),
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = loss(&mut g, &vars)?;
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .enumerate()
        .map(|(i, (&v, p))| {
            let mut t = grads.get_or_zeros(v, p.shape());
            tamper(i, &mut t);
            t
        })
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let root = loss(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        tol,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for k in 0..p.len() {
            let orig = p.data()[k];
            work[pi].data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, k));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::Reduce;

    fn quadratic(g: &mut Graph, p: &[Var]) -> Result<Var> {
        let c = g.constant(Tensor::new(vec![3], vec![0.5, -1.0, 2.0])?);
        let d = g.sub(p[0], c)?;
        let sq = g.square(d);
        let s = g.sum(sq, Reduce::All)?;
        Ok(g.scale(s, 0.7))
    }

    #[test]
    fn quadratic_is_exact() {
        let p = Tensor::new(vec![3], vec![1.3, 0.2, -0.4]).unwrap();
        let r = grad_check(quadratic, &[p], 1e-5, 1e-8).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.coordinates, 3);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let p = Tensor::new(vec![3], vec![1.3, 0.2, -0.4]).unwrap();
        let r = grad_check_with(quadratic, &[p], 1e-5, 1e-4, |_, t| t.data_mut()[1] += 0.1).unwrap();
        assert!(!r.passed());
        assert_eq!(r.worst, Some((0, 1)));
    }
}
