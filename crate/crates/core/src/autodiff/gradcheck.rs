use super::{AutodiffError, Graph, Tensor, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic - numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates (tensor index, flat offset) whose perturbation crossed a
    /// non-differentiable branch and were therefore skipped.
    pub skipped: Vec<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Checks the gradient of a scalar function of one tensor at `x`.
///
/// Coordinates where `x ± eps` land on different sides of a kink (detected
/// through the graph's branch signature) are skipped.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, AutodiffError>,
{
    grad_check_multi(|g, vs| f(g, vs[0]), std::slice::from_ref(x), eps, None)
}

/// Gradient check over several input tensors. `coords` restricts the
/// numeric side to the listed `(tensor, offset)` pairs; `None` checks all.
pub fn grad_check_multi<F>(
    f: F,
    xs: &[Tensor],
    eps: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = xs.iter().enumerate().flat_map(|(i, x)| (0..x.numel()).map(move |j| (i, j))).collect();
            &all
        }
    };

    let eval = |perturbed: &[Tensor]| -> Result<(f64, u64), AutodiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|x| g.constant(x.clone())).collect();
        let root = f(&mut g, &vars)?;
        let value = g.value(root).item().ok_or(AutodiffError::NotScalarRoot {
            shape: g.shape(root).to_vec(),
        })?;
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: "grad_check" });
        }
        Ok((value, g.branch_signature()))
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped: Vec::new() };
    let mut work = xs.to_vec();
    for &(ti, off) in coords {
        let orig = work[ti].data()[off];
        work[ti].data_mut()[off] = orig + eps;
        let (fp, sp) = eval(&work)?;
        work[ti].data_mut()[off] = orig - eps;
        let (fm, sm) = eval(&work)?;
        work[ti].data_mut()[off] = orig;
        if sp != sm {
            report.skipped.push((ti, off));
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[ti].data()[off];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}
