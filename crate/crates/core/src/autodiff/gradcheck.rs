//! Central finite differences, used as the independent oracle for every
//! analytic gradient in the crate.

use crate::error::{Error, Result};
use crate::tensor::{relative_error, Tensor};

use super::{Graph, NodeId};

/// Central-difference gradient of a scalar function:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite difference step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("finite difference at coordinate {i}")));
        }
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Central-difference gradient of a recorded scalar node w.r.t. one leaf,
/// computed by replaying the tape with the perturbed leaf.
pub fn finite_diff_wrt(graph: &Graph, loss: NodeId, leaf: NodeId, h: f64) -> Result<Tensor> {
    let x = graph.value(leaf).clone();
    finite_diff_grad(
        |probe| {
            let values = graph.replay_with(&[(leaf, probe.clone())])?;
            values[loss.index()].item()
        },
        &x,
        h,
    )
}

/// Outcome of comparing analytic gradients against finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub instances: usize,
    /// Instances redrawn because the numeric gradient was unreliable.
    pub resampled: usize,
}

impl GradCheck {
    pub fn new(name: impl Into<String>) -> Self {
        GradCheck {
            name: name.into(),
            max_rel_error: 0.0,
            instances: 0,
            resampled: 0,
        }
    }

    /// Records one analytic-vs-numeric comparison.
    pub fn record(&mut self, analytic: &Tensor, numeric: &Tensor) {
        let err = relative_error(analytic, numeric, 1e-8);
        self.max_rel_error = self.max_rel_error.max(err);
    }

    pub fn finish_instance(&mut self) {
        self.instances += 1;
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|x| Ok(x.data()[0] * x.data()[0]), &Tensor::scalar(3.0), 1e-4).unwrap();
        assert!((g.item().unwrap() - 6.0).abs() < 1e-7);
    }

    #[test]
    fn exp_at_zero() {
        let g = finite_diff_grad(|x| Ok(x.data()[0].exp()), &Tensor::scalar(0.0), 1e-4).unwrap();
        assert!((g.item().unwrap() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        assert!(finite_diff_grad(|_| Ok(0.0), &Tensor::scalar(0.0), 0.0).is_err());
        let err = finite_diff_grad(|x| Ok(x.data()[0].ln()), &Tensor::scalar(0.0), 1e-4);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }
}
