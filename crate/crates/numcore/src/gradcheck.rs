//! Central-difference gradient verification.

use crate::error::{NumError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_ad − g_fd| / max(1, |g_ad|, |g_fd|)` over all checked values.
    pub max_rel_error: f64,
    /// Parameter holding the worst element.
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares `backward` against central differences for every value of every
/// parameter in `store`. `build` must produce a scalar and be deterministic.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(NumError::Invalid(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let analytic = {
        let mut g = Graph::with_params(store);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let loss = build(&mut g)?;
        let v = g.scalar_value(loss);
        if !v.is_finite() {
            return Err(NumError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        for k in 0..n {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).data_mut()[k] = orig;
            let fd = (plus? - minus?) / (2.0 * eps);
            let ad = analytic.param(id).map_or(0.0, |g| g.data()[k]);
            let rel = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = store.name(id).to_string();
                report.worst_index = k;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_form_is_exact_to_rounding() {
        let mut store = ParamStore::new();
        let x = store.insert("x", Tensor::new(vec![3, 1], vec![0.3, -1.2, 2.0]).unwrap()).unwrap();
        let a = Tensor::from_rows(&[
            vec![2.0, 0.5, 0.0],
            vec![0.5, 1.0, -0.3],
            vec![0.0, -0.3, 3.0],
        ])
        .unwrap();
        let report = grad_check(&mut store, 1e-5, |g| {
            let xv = g.param(x);
            let av = g.constant(a.clone())?;
            let ax = g.matmul(av, xv)?;
            let q = g.matmul_t(xv, ax, true, false)?;
            g.sum(q)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn eps_range_enforced() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(1.0)).unwrap();
        let err = grad_check(&mut store, 1e-2, |g| g.param_named("x"));
        assert!(matches!(err, Err(NumError::Invalid(_))));
    }
}
