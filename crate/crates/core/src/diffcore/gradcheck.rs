//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::DiffError;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max |g_analytic − g_fd| / max(1e-8, |g_analytic| + |g_fd|)
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    /// (analytic, finite-difference) at the worst entry.
    pub worst_values: (f64, f64),
    pub entries_checked: usize,
}

/// Relative error used throughout the checker.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval<E, F>(loss_fn: &F, params: &ParamStore) -> Result<f64, E>
where
    E: From<DiffError>,
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let l = loss_fn(&mut g, params)?;
    Ok(g.scalar(l))
}

/// Checks every entry of every parameter in `params`.
pub fn grad_check<E, F>(loss_fn: F, params: &ParamStore, epsilon: f64) -> Result<GradCheckReport, E>
where
    E: From<DiffError>,
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, E>,
{
    grad_check_subset(loss_fn, params, epsilon, |_, n| (0..n).collect())
}

/// Checks a strided subset of at most `max_per_param` entries per parameter.
pub fn grad_check_sampled<E, F>(
    loss_fn: F,
    params: &ParamStore,
    epsilon: f64,
    max_per_param: usize,
) -> Result<GradCheckReport, E>
where
    E: From<DiffError>,
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, E>,
{
    grad_check_subset(loss_fn, params, epsilon, |name, n| {
        if n <= max_per_param {
            return (0..n).collect();
        }
        // deterministic stride with a name-dependent offset
        let offset = name
            .bytes()
            .fold(0usize, |a, b| a.wrapping_mul(31).wrapping_add(b as usize))
            % n;
        (0..max_per_param)
            .map(|i| (offset + i * n / max_per_param) % n)
            .collect()
    })
}

fn grad_check_subset<E, F>(
    loss_fn: F,
    params: &ParamStore,
    epsilon: f64,
    select: impl Fn(&str, usize) -> Vec<usize>,
) -> Result<GradCheckReport, E>
where
    E: From<DiffError>,
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, E>,
{
    if !(epsilon > 0.0) {
        return Err(DiffError::InvalidConfig("epsilon must be positive".into()).into());
    }
    let mut g = Graph::new();
    let l = loss_fn(&mut g, params)?;
    let base = g.scalar(l);
    let analytic = g.backward(l)?;

    let again = eval(&loss_fn, params)?;
    if again.to_bits() != base.to_bits() {
        return Err(DiffError::NonDeterministic {
            first: base,
            second: again,
        }
        .into());
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_values: (0.0, 0.0),
        entries_checked: 0,
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in &names {
        let n = params.require(name)?.len();
        let zero;
        let ga = match analytic.get(name) {
            Some(t) => t,
            None => {
                zero = super::Tensor::zeros(params.require(name)?.shape());
                &zero
            }
        };
        for idx in select(name, n) {
            let orig = params.require(name)?.data()[idx];
            probe.get_mut(name).expect("cloned store").data_mut()[idx] = orig + epsilon;
            let up = eval(&loss_fn, &probe)?;
            probe.get_mut(name).expect("cloned store").data_mut()[idx] = orig - epsilon;
            let down = eval(&loss_fn, &probe)?;
            probe.get_mut(name).expect("cloned store").data_mut()[idx] = orig;
            let fd = (up - down) / (2.0 * epsilon);
            let err = relative_error(ga.data()[idx], fd);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst_param = name.clone();
                    report.worst_index = idx;
                    report.worst_values = (ga.data()[idx], fd);
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use std::cell::Cell;

    #[test]
    fn quadratic_is_exact() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let r = grad_check(
            |g: &mut Graph, ps: &ParamStore| -> Result<Var, DiffError> {
                let w = ps.var(g, "w")?;
                let d = g.dot(w, w)?;
                g.scale(d, 0.5)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.entries_checked, 2);
    }

    #[test]
    fn non_deterministic_loss_is_rejected() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(vec![1.0])).unwrap();
        let calls = Cell::new(0u32);
        let r = grad_check(
            |g: &mut Graph, ps: &ParamStore| -> Result<Var, DiffError> {
                calls.set(calls.get() + 1);
                let w = ps.var(g, "w")?;
                g.scale(w, calls.get() as f64)
            },
            &p,
            1e-5,
        );
        assert!(matches!(r, Err(DiffError::NonDeterministic { .. })));
    }
}
