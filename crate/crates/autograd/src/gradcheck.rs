//! Finite-difference verification of analytic gradients.

use ndarray::ArrayD;

use crate::params::ParamStore;

/// Scale-invariant error between a finite-difference estimate and an
/// analytic value, floored so near-zero pairs don't blow up.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central-difference gradients of `forward` for every element of every
/// parameter in `store`. O(2 * element_count) forward passes; intended
/// for deliberately tiny models. The store is restored on return.
pub fn central_diff_gradients(
    store: &mut ParamStore,
    h: f64,
    mut forward: impl FnMut(&ParamStore) -> f64,
) -> Vec<ArrayD<f64>> {
    let ids: Vec<_> = store.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let shape = store.value(id).raw_dim();
        let len = store.value(id).len();
        let mut g = ArrayD::<f64>::zeros(shape);
        for flat in 0..len {
            let orig = store.value(id).as_slice().expect("contiguous")[flat];
            store.value_mut(id).as_slice_mut().expect("contiguous")[flat] = orig + h;
            let fp = forward(store);
            store.value_mut(id).as_slice_mut().expect("contiguous")[flat] = orig - h;
            let fm = forward(store);
            store.value_mut(id).as_slice_mut().expect("contiguous")[flat] = orig;
            g.as_slice_mut().expect("contiguous")[flat] = (fp - fm) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Outcome of [`audit_params`]: how many elements were checked, how
/// many fell within tolerance, and the worst offender.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub checked: usize,
    pub within: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl FdReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.within as f64 / self.checked as f64
        }
    }
}

/// Compares `analytic` gradients (aligned with `store` ids, `None`
/// meaning zero) against central differences of `forward`, element by
/// element. Pairs whose absolute difference is below `abs_floor` count
/// as matching regardless of relative error; this keeps genuinely zero
/// gradients from failing on finite-difference noise.
pub fn audit_params(
    store: &mut ParamStore,
    analytic: &[Option<ArrayD<f64>>],
    h: f64,
    rel_tol: f64,
    abs_floor: f64,
    mut forward: impl FnMut(&ParamStore) -> f64,
) -> FdReport {
    assert_eq!(analytic.len(), store.len(), "gradient/store length mismatch");
    let mut report = FdReport {
        checked: 0,
        within: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let len = store.value(id).len();
        for flat in 0..len {
            let orig = store.value(id).as_slice().expect("contiguous")[flat];
            store.value_mut(id).as_slice_mut().expect("contiguous")[flat] = orig + h;
            let fp = forward(store);
            store.value_mut(id).as_slice_mut().expect("contiguous")[flat] = orig - h;
            let fm = forward(store);
            store.value_mut(id).as_slice_mut().expect("contiguous")[flat] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[id.0]
                .as_ref()
                .map(|g| g.as_slice().expect("contiguous")[flat])
                .unwrap_or(0.0);
            report.checked += 1;
            let rel = relative_error(fd, an);
            let ok = (fd - an).abs() <= abs_floor || rel <= rel_tol;
            if ok {
                report.within += 1;
            }
            if rel > report.max_rel && (fd - an).abs() > abs_floor {
                report.max_rel = rel;
                report.worst = format!("{}[{}] fd={fd:.6e} analytic={an:.6e}", store.name(id), flat);
            }
        }
    }
    report
}
