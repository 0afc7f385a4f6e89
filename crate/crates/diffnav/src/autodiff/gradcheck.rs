//! Central finite-difference verification of tape gradients.

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::Result;

/// Max over coordinates of |analytic - central| / (|central| + 1e-12),
/// where central is the two-sided difference quotient at `point`.
pub fn finite_difference_check<F>(mut loss: F, point: &[f64], analytic: &[f64], step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len());
    let mut p = point.to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let fp = loss(&p);
        p[i] = orig - step;
        let fm = loss(&p);
        p[i] = orig;
        let central = (fp - fm) / (2.0 * step);
        let rel = (analytic[i] - central).abs() / (central.abs() + 1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    max_rel
}

/// Build a scalar loss twice: once for analytic gradients, then repeatedly
/// under coordinate perturbations. `build` must construct the same graph for
/// the same parameter values (it receives the parameter leaves in order).
pub fn check_tape_gradients<F>(build: F, params: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss_id = build(&mut tape, &ids)?;
    let grads = tape.backward(loss_id)?;

    let mut analytic = Vec::new();
    for &id in &ids {
        analytic.extend(grads.get(id).expect("param gradient").data().iter().copied());
    }
    let mut point = Vec::new();
    for p in params {
        point.extend_from_slice(p.data());
    }
    let shapes: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();

    let eval = |vals: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let mut offset = 0;
        let mut ids = Vec::with_capacity(shapes.len());
        for shape in &shapes {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape.clone(), vals[offset..offset + n].to_vec())
                .expect("shape preserved");
            offset += n;
            ids.push(tape.param(t));
        }
        let loss_id = build(&mut tape, &ids).expect("graph rebuild");
        tape.value(loss_id).item()
    };

    Ok(finite_difference_check(eval, &point, &analytic, step))
}
