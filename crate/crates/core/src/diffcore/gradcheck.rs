use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference gradient check settings.
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Added to `|numeric|` in the relative-error denominator.
    pub eps: f64,
    /// Check only the first `n` entries of each parameter when set.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            eps: 1e-6,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, entry by entry.
///
/// `f` receives a fresh graph and one leaf per parameter and must return a
/// scalar node.
pub fn grad_check<F>(f: F, params: &[(String, Tensor<f64>)], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    for (name, t) in params {
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("parameter `{name}`")));
        }
    }
    let eval = |values: &[(String, Tensor<f64>)]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|(_, t)| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    if !g.value(loss).is_finite() {
        return Err(Error::NonFinite("function value".into()));
    }
    let grads = g.backward(loss)?;

    let mut work: Vec<(String, Tensor<f64>)> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, params[p].1.len());
        let n = opts.max_entries.map_or(analytic.len(), |m| m.min(analytic.len()));
        let mut check = ParamCheck {
            name: params[p].0.clone(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            checked: n,
        };
        for i in 0..n {
            let orig = work[p].1.data()[i];
            work[p].1.data_mut()[i] = orig + opts.step;
            let plus = eval(&work)?;
            work[p].1.data_mut()[i] = orig - opts.step;
            let minus = eval(&work)?;
            work[p].1.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            if !numeric.is_finite() || !analytic[i].is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`[{i}]", params[p].0)));
            }
            let abs = (analytic[i] - numeric).abs();
            check.max_abs_error = check.max_abs_error.max(abs);
            check.max_rel_error = check.max_rel_error.max(abs / (numeric.abs() + opts.eps));
        }
        report.push(check);
    }
    Ok(GradCheckReport { params: report })
}
