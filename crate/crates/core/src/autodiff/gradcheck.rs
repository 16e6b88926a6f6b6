//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, NodeId};
use super::params::ParamSet;
use crate::error::{Error, Result};

/// A gradient check passes when the worst relative error stays below this.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter holding the worst entry, `None` when nothing was checked.
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub n_checked: usize,
    pub passed: bool,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the gradient produced by `backward` against central differences
/// for every scalar entry of every parameter in `params`.
///
/// `loss_fn` must register the parameters it uses (by name, from the set it
/// receives) and return the scalar loss node.
pub fn grad_check<F>(params: &ParamSet, epsilon: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<NodeId>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::invalid("epsilon", format!("{epsilon} not in (0, 1e-2]")));
    }
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, p)?;
        Ok(g.value(loss)?.item())
    };

    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Nondeterministic { first, second });
    }

    let mut graph = Graph::new();
    let loss = loss_fn(&mut graph, params)?;
    let grads = graph.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        n_checked: 0,
        passed: true,
    };
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        let analytic = grads.get(name);
        for i in 0..tensor.numel() {
            let orig = tensor.data()[i];
            probe.get_mut(name).expect("same keys").data_mut()[i] = orig + epsilon;
            let plus = eval(&probe)?;
            probe.get_mut(name).expect("same keys").data_mut()[i] = orig - epsilon;
            let minus = eval(&probe)?;
            probe.get_mut(name).expect("same keys").data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let ad = analytic.map_or(0.0, |t| t.data()[i]);
            let err = relative_error(ad, numeric);
            report.n_checked += 1;
            if err > report.max_rel_error || report.worst_param.is_none() {
                report.max_rel_error = err;
                report.worst_param = Some(name.to_string());
                report.worst_index = i;
            }
        }
    }
    report.passed = report.max_rel_error < GRAD_CHECK_TOLERANCE;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{OpKind, Tensor};

    fn quadratic(g: &mut Graph, p: &ParamSet) -> Result<NodeId> {
        // sum_i (i+1) * w_i^2
        let w = g.param("w", p.get("w").unwrap().clone());
        let c = g.constant(Tensor::vector((1..=5).map(f64::from).collect()));
        let sq = g.mul(w, w)?;
        let weighted = g.mul(sq, c)?;
        g.sum_all(weighted)
    }

    #[test]
    fn quadratic_matches_analytic_gradient() {
        let mut p = ParamSet::new();
        let w = vec![0.3, -1.2, 2.0, 0.0, 0.7];
        p.insert("w", Tensor::vector(w.clone()));

        let mut g = Graph::new();
        let loss = quadratic(&mut g, &p).unwrap();
        let grads = g.backward(loss).unwrap();
        for (i, wi) in w.iter().enumerate() {
            let analytic = 2.0 * (i as f64 + 1.0) * wi;
            assert!((grads.get("w").unwrap().data()[i] - analytic).abs() < 1e-12);
        }

        let report = grad_check(&p, 1e-5, quadratic).unwrap();
        assert_eq!(report.n_checked, 5);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert!(report.passed);
    }

    #[test]
    fn corrupted_rule_is_located() {
        let mut p = ParamSet::new();
        p.insert("through_tanh", Tensor::vector(vec![0.4, -0.3]));
        p.insert("through_sigmoid", Tensor::vector(vec![0.1, 0.9]));
        let loss_fn = |fault: bool| {
            move |g: &mut Graph, p: &ParamSet| -> Result<NodeId> {
                if fault {
                    g.inject_backward_fault(OpKind::Tanh);
                }
                let a = g.param("through_tanh", p.get("through_tanh").unwrap().clone());
                let b = g.param("through_sigmoid", p.get("through_sigmoid").unwrap().clone());
                let ta = g.tanh(a)?;
                let sb = g.sigmoid(b)?;
                let prod = g.mul(ta, sb)?;
                g.sum_all(prod)
            }
        };
        assert!(grad_check(&p, 1e-5, loss_fn(false)).unwrap().passed);
        let report = grad_check(&p, 1e-5, loss_fn(true)).unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst_param.as_deref(), Some("through_tanh"));
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        use std::cell::Cell;
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![1.0]));
        let calls = Cell::new(0.0);
        let err = grad_check(&p, 1e-5, |g, p| {
            calls.set(calls.get() + 1.0);
            let w = g.param("w", p.get("w").unwrap().clone());
            g.scale(w, calls.get())
        })
        .unwrap_err();
        assert!(matches!(err, Error::Nondeterministic { .. }));
    }

    #[test]
    fn epsilon_range_is_enforced() {
        let p = ParamSet::new();
        assert!(grad_check(&p, 0.0, quadratic).is_err());
        assert!(grad_check(&p, 0.1, quadratic).is_err());
    }
}
