//! Central-difference gradient checking used by the test suites.

use std::collections::BTreeMap;

use super::ParamStore;

/// Numeric gradient of `f` w.r.t. every parameter in `store`, by central
/// differences with step `eps` applied one element at a time.
pub fn numeric_grad(
    store: &ParamStore,
    eps: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> BTreeMap<String, Vec<f64>> {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut out = BTreeMap::new();
    for name in names {
        let base = store.values(&name).unwrap().to_vec();
        let mut grad = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut plus = store.clone();
            let mut bumped = base.clone();
            bumped[i] += eps;
            plus.set_values(&name, bumped).unwrap();
            let mut minus = store.clone();
            let mut dipped = base.clone();
            dipped[i] -= eps;
            minus.set_values(&name, dipped).unwrap();
            grad[i] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        out.insert(name, grad);
    }
    out
}

/// Assert analytic and numeric gradients agree within `rtol`/`atol`
/// elementwise. Panics with the offending parameter and index on failure.
pub fn check_grads(
    analytic: &BTreeMap<String, Vec<f64>>,
    numeric: &BTreeMap<String, Vec<f64>>,
    rtol: f64,
    atol: f64,
) {
    assert_eq!(
        analytic.keys().collect::<Vec<_>>(),
        numeric.keys().collect::<Vec<_>>(),
        "gradient key sets differ"
    );
    for (name, a) in analytic {
        let n = &numeric[name];
        assert_eq!(a.len(), n.len(), "{}: gradient lengths differ", name);
        for i in 0..a.len() {
            let tol = atol + rtol * n[i].abs().max(a[i].abs());
            assert!(
                (a[i] - n[i]).abs() <= tol,
                "{}[{}]: analytic {} vs numeric {} (tol {})",
                name,
                i,
                a[i],
                n[i],
                tol
            );
        }
    }
}
