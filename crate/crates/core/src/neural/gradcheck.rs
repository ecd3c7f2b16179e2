use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Largest relative error between backprop and central differences over
/// every parameter entry. See [`grad_check_report`].
pub fn grad_check<F>(loss_fn: F, store: &mut ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    grad_check_report(loss_fn, store).map(|r| r.max_relative_error)
}

/// `loss_fn` must be deterministic given the parameters. The relative error
/// of one entry is `|bp - fd| / max(1e-8, |bp| + |fd|)`. Central differences
/// are taken term by term over the additive structure of the loss.
pub fn grad_check_report<F>(loss_fn: F, store: &mut ParamStore) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        let v = g.scalar(loss);
        if v.is_finite() {
            Ok(g.additive_terms(loss))
        } else {
            Err(Error::NonFinite(format!(
                "loss {v} during finite differences"
            )))
        }
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for pi in 0..store.len() {
        let id = ParamId(pi);
        let n = store.value(id).len();
        for k in 0..n {
            let orig = flat(store, id)[k];
            flat_mut(store, id)[k] = orig + FD_STEP;
            let plus = eval(store);
            flat_mut(store, id)[k] = orig - FD_STEP;
            let minus = eval(store);
            flat_mut(store, id)[k] = orig;
            let (plus, minus) = (plus?, minus?);
            if plus.len() != minus.len() {
                return Err(Error::Shape(
                    "loss graph changed shape under perturbation".into(),
                ));
            }
            let diff: f64 = plus.iter().zip(&minus).map(|(p, m)| p - m).sum();
            let fd = diff / (2.0 * FD_STEP);
            let bp = grads
                .get(id)
                .map_or(0.0, |g| g.as_slice().expect("standard layout")[k]);
            let err = (bp - fd).abs() / (bp.abs() + fd.abs()).max(1e-8);
            report.checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_param = store.get(id).name.clone();
                report.worst_index = k;
            }
        }
    }
    Ok(report)
}

fn flat(store: &ParamStore, id: ParamId) -> &[f64] {
    store.value(id).as_slice().expect("standard layout")
}

fn flat_mut(store: &mut ParamStore, id: ParamId) -> &mut [f64] {
    store
        .get_mut(id)
        .value
        .as_slice_mut()
        .expect("standard layout")
}
