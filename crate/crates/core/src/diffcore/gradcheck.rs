//! Central finite-difference gradient checking.

use crate::error::Result;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Largest elementwise relative error found by [`check_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Denominator floor for the relative error, so entries whose true
/// gradient is (near) zero are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares reverse-mode gradients of a scalar function of `inputs` with
/// central differences of step `h`. `build` must construct the loss from
/// one leaf per input, in order.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t)).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss)[0])
    };

    let marked: Vec<Tensor<f64>> = inputs.iter().cloned().map(Tensor::with_grad).collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = marked.iter().map(|t| g.leaf(t)).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward_grads(loss)?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe = marked.clone();
    for (k, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.wrt(*v) {
            Some(a) => a.to_vec(),
            None => vec![0.0; marked[k].numel()],
        };
        for i in 0..marked[k].numel() {
            let orig = marked[k].data()[i];
            probe[k].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i], numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: worst,
        checked,
    })
}
