//! Scalar-loop reference for the batch loss. Shares no code with the graph
//! implementation beyond the input types.

use crate::error::{Error, Result};

use super::{ContrastiveConfig, ViewBatch};

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    dot / (na.sqrt() * nb.sqrt())
}

pub fn loss_oracle_scalar(batch: &ViewBatch, cfg: &ContrastiveConfig) -> Result<f64> {
    cfg.validate()?;
    let n = batch.len();
    if n < 2 {
        return Err(Error::invalid("oracle needs N >= 2"));
    }
    let views = [batch.z1(), batch.z2()];
    let mut total = 0.0;
    for i in 0..n {
        let pos = (cos(views[0].row(i), views[1].row(i)) / cfg.tau).exp();
        let mut d = 0.0;
        for anchor in views {
            let mut acc = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                for other in views {
                    acc += (cos(anchor.row(i), other.row(j)) / cfg.tau).exp();
                }
            }
            let s = acc / (2 * n - 2) as f64;
            let term = (s - cfg.tau_plus * pos) / (1.0 - cfg.tau_plus);
            d += if term > (-1.0 / cfg.tau).exp() {
                term
            } else {
                (-1.0 / cfg.tau).exp()
            };
        }
        total += -2.0 * (pos / (pos + (1.0 + d).powf(cfg.lambda))).ln();
    }
    Ok(total / (2 * n) as f64)
}
