//! The per-anchor loss as a function of the smoothing exponent alone.
//!
//! With `P = exp(s_pos / tau)` and `B = 1 + sum_j exp(s_neg_j / tau)`:
//!
//! ```text
//! L(l)   = log(P + B^l) - log(P)
//! L'(l)  = B^l ln B / (P + B^l)
//! L''(l) = P B^l (ln B)^2 / (P + B^l)^2
//! ```
//!
//! Since `B > 1` for any scene, both derivatives are strictly positive: the
//! loss grows and is convex in the exponent, so raising it strictly
//! increases the weight of the negatives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaScene {
    pub sim_pos: f64,
    /// The `2N - 2` anchor-to-negative similarities.
    pub sim_negs: Vec<f64>,
    pub tau: f64,
    pub lambda: f64,
}

impl LambdaScene {
    pub fn new(sim_pos: f64, sim_negs: Vec<f64>, tau: f64, lambda: f64) -> Result<Self> {
        let s = LambdaScene {
            sim_pos,
            sim_negs,
            tau,
            lambda,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64| (-1.0..=1.0).contains(&v);
        if !in_range(self.sim_pos) || !self.sim_negs.iter().copied().all(in_range) {
            return Err(Error::invalid("similarities must lie in [-1, 1]"));
        }
        if self.sim_negs.len() < 2 || self.sim_negs.len() % 2 != 0 {
            return Err(Error::invalid(format!(
                "need an even number (>= 2) of negatives, got {}",
                self.sim_negs.len()
            )));
        }
        if !(self.tau > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::invalid("need tau > 0 and lambda >= 0"));
        }
        Ok(())
    }

    /// Batch size implied by the number of negatives.
    pub fn batch_size(&self) -> usize {
        self.sim_negs.len() / 2 + 1
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        LambdaScene {
            lambda,
            ..self.clone()
        }
    }

    /// `P = exp(sim_pos / tau)`.
    pub fn positive(&self) -> f64 {
        (self.sim_pos / self.tau).exp()
    }

    /// `B = 1 + sum_j exp(sim_neg_j / tau)`.
    pub fn negatives(&self) -> f64 {
        1.0 + self
            .sim_negs
            .iter()
            .map(|s| (s / self.tau).exp())
            .sum::<f64>()
    }
}

pub fn lambda_loss(s: &LambdaScene) -> f64 {
    let (p, b) = (s.positive(), s.negatives());
    // log(P + B^l) - log(P), without the cancellation.
    (b.powf(s.lambda) / p).ln_1p()
}

pub fn lambda_grad(s: &LambdaScene) -> f64 {
    let (p, b) = (s.positive(), s.negatives());
    let bl = b.powf(s.lambda);
    bl * b.ln() / (p + bl)
}

pub fn lambda_hess(s: &LambdaScene) -> f64 {
    let (p, b) = (s.positive(), s.negatives());
    let bl = b.powf(s.lambda);
    p * bl * b.ln().powi(2) / (p + bl).powi(2)
}

/// `L''` when every negative is orthogonal to the anchor, i.e. `B = 2N - 1`.
pub fn limit_orthogonal_negatives(n: usize, sim_pos: f64, tau: f64, lambda: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::invalid(format!("need N >= 2, got {n}")));
    }
    let p = (sim_pos / tau).exp();
    let b = (2 * n - 1) as f64;
    let bl = b.powf(lambda);
    Ok(p * bl * b.ln().powi(2) / (p + bl).powi(2))
}

/// Whether a second central difference with step `h` can resolve `L''` to
/// relative accuracy `tol`: the rounding error of the difference,
/// about `4 eps |L| / h^2`, must stay below a tenth of `tol * L''`.
pub fn second_difference_resolvable(s: &LambdaScene, h: f64, tol: f64) -> bool {
    let rounding = 4.0 * f64::EPSILON * lambda_loss(s).abs().max(1.0) / (h * h);
    rounding < 0.1 * tol * lambda_hess(s)
}

/// One row of a sweep over the exponent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub loss: f64,
    pub grad: f64,
    pub hess: f64,
}

pub fn sweep(scene: &LambdaScene, lambdas: &[f64]) -> Result<Vec<SweepRow>> {
    scene.validate()?;
    Ok(lambdas
        .iter()
        .map(|&lambda| {
            let s = scene.with_lambda(lambda);
            SweepRow {
                lambda,
                loss: lambda_loss(&s),
                grad: lambda_grad(&s),
                hess: lambda_hess(&s),
            }
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda,loss,dloss,d2loss\n");
    for r in rows {
        out.push_str(&format!("{},{:.12e},{:.12e},{:.12e}\n", r.lambda, r.loss, r.grad, r.hess));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const E2: f64 = 7.38905609893065;

    fn scene(lambda: f64) -> LambdaScene {
        LambdaScene::new(1.0, vec![0.0, 0.0], 0.5, lambda).unwrap()
    }

    #[test]
    fn validation() {
        assert!(LambdaScene::new(1.0, vec![0.0], 0.5, 1.0).is_err());
        assert!(LambdaScene::new(1.5, vec![0.0, 0.0], 0.5, 1.0).is_err());
        assert!(LambdaScene::new(1.0, vec![0.0, 0.0], 0.0, 1.0).is_err());
        assert_eq!(scene(1.0).batch_size(), 2);
    }

    #[test]
    fn loss_hand_values() {
        let l = lambda_loss(&scene(1.0));
        assert!((l - ((E2 + 3.0) / E2).ln()).abs() < 1e-12);
        assert!((l - 0.34075).abs() < 1e-5);
        let l0 = lambda_loss(&scene(0.0));
        assert!((l0 - ((E2 + 1.0) / E2).ln()).abs() < 1e-12);
    }

    #[test]
    fn grad_hand_value() {
        let g = lambda_grad(&scene(1.0));
        assert!((g - 3.0 * 3f64.ln() / (E2 + 3.0)).abs() < 1e-12);
        assert!((g - 0.31724).abs() < 1e-5);
    }

    #[test]
    fn hess_hand_value_and_limit() {
        let h = lambda_hess(&scene(1.0));
        assert!((h - 0.24790).abs() < 1e-4);
        let lim = limit_orthogonal_negatives(2, 1.0, 0.5, 1.0).unwrap();
        assert_eq!(lim, h);
        let lim0 = limit_orthogonal_negatives(2, 1.0, 0.5, 0.0).unwrap();
        assert!((lim0 - E2 * 3f64.ln().powi(2) / (E2 + 1.0).powi(2)).abs() < 1e-12);
        assert!((lim0 - 0.12671).abs() < 1e-3);
        assert!(limit_orthogonal_negatives(1, 1.0, 0.5, 1.0).is_err());
    }

    #[test]
    fn limits() {
        // B -> 1+: gradient vanishes.
        let near_one = LambdaScene::new(1.0, vec![-1.0, -1.0], 0.01, 1.0).unwrap();
        assert!(lambda_grad(&near_one) < 1e-40);
        // P -> inf: curvature vanishes.
        let big_p = LambdaScene::new(1.0, vec![0.0, 0.0], 0.01, 1.0).unwrap();
        assert!(lambda_hess(&big_p) < 1e-30);
    }

    #[test]
    fn sweep_csv_format() {
        let rows = sweep(&scene(0.0), &[0.0, 1.0]).unwrap();
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with("lambda,loss,dloss,d2loss\n0,"));
        assert_eq!(csv.lines().count(), 3);
    }

    fn arb_scene() -> impl Strategy<Value = LambdaScene> {
        (
            -1.0f64..=1.0,
            prop::collection::vec(-1.0f64..=1.0, 1..6),
            0.25f64..1.0,
            0.0f64..5.0,
        )
            .prop_map(|(p, half, tau, lambda)| {
                let mut negs = half.clone();
                negs.extend(half.iter().map(|v| v * 0.5));
                LambdaScene::new(p, negs, tau, lambda).unwrap()
            })
    }

    proptest! {
        #[test]
        fn derivatives_positive(s in arb_scene()) {
            prop_assert!(lambda_grad(&s) > 0.0);
            prop_assert!(lambda_hess(&s) > 0.0);
            prop_assert!(lambda_loss(&s) > (1.0 + 1.0 / s.positive()).ln());
        }

        #[test]
        fn closed_forms_match_central_differences(s in arb_scene()) {
            let f = |l: f64| lambda_loss(&s.with_lambda(l));
            let lam = s.lambda.max(0.01);
            prop_assume!(second_difference_resolvable(&s.with_lambda(lam), 1e-3, 1e-4));
            let h = 1e-5;
            let fd = (f(lam + h) - f(lam - h)) / (2.0 * h);
            let g = lambda_grad(&s.with_lambda(lam));
            prop_assert!((fd - g).abs() / g.abs() < 1e-6);
            let h2 = 1e-3;
            let fd2 = (f(lam + h2) - 2.0 * f(lam) + f(lam - h2)) / (h2 * h2);
            let hs = lambda_hess(&s.with_lambda(lam));
            prop_assert!((fd2 - hs).abs() / hs.abs() < 1e-4);
        }

        #[test]
        fn positive_negatives_exceed_orthogonal_count(
            negs in prop::collection::vec(1e-3f64..=1.0, 1..8).prop_map(|mut v| { let c = v.clone(); v.extend(c); v }),
            tau in 0.1f64..2.0,
        ) {
            let s = LambdaScene::new(1.0, negs, tau, 1.0).unwrap();
            prop_assert!(s.negatives() > (2 * s.batch_size() - 1) as f64);
        }
    }
}
