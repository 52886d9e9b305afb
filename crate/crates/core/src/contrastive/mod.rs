//! Modified debiased contrastive loss.
//!
//! For a batch of `N` samples with two views each, every anchor `z_i^(k)` is
//! contrasted against the `2N - 2` representations of the other samples.
//! The per-view negative mean `S_i^(k)` is debiased with the positive-class
//! prior `tau_plus`, clamped from below at `exp(-1/tau)`, summed over both
//! views into `D_i`, and enters the per-sample loss as `(1 + D_i)^lambda`:
//!
//! ```text
//! L_i = -2 log( e^{s_i/tau} / (e^{s_i/tau} + (1 + D_i)^lambda) )
//! L   = (1 / 2N) sum_i L_i
//! ```
//!
//! where `s_i` is the cosine similarity of the positive pair. The loss is
//! built on [`Graph`] so gradients flow back into both view matrices;
//! [`oracle`] holds an independent scalar-loop implementation.

pub mod oracle;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    /// Temperature.
    pub tau: f64,
    /// Prior probability that a negative shares the anchor's class.
    pub tau_plus: f64,
    /// Smoothing exponent on `1 + D_i`.
    pub lambda: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.5,
            tau_plus: 0.1,
            lambda: 2.0,
        }
    }
}

impl ContrastiveConfig {
    pub fn new(tau: f64, tau_plus: f64, lambda: f64) -> Result<Self> {
        let cfg = ContrastiveConfig {
            tau,
            tau_plus,
            lambda,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.tau_plus) {
            return Err(Error::invalid(format!(
                "tau_plus must lie in [0, 1), got {}",
                self.tau_plus
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Lower clamp applied to each per-view debiased term.
    pub fn clamp_floor(&self) -> f64 {
        (-1.0 / self.tau).exp()
    }
}

/// Which augmented view an anchor comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    First,
    Second,
}

/// Paired view representations: row `i` of `z1` and `z2` is sample `i`'s
/// positive pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch {
    z1: Tensor,
    z2: Tensor,
}

impl ViewBatch {
    pub fn new(z1: Tensor, z2: Tensor) -> Result<Self> {
        if z1.rank() != 2 || z1.shape() != z2.shape() {
            return Err(Error::shape("view_batch", z1.shape(), z2.shape()));
        }
        if z1.shape()[0] < 2 {
            return Err(Error::invalid(format!(
                "a view batch needs N >= 2 samples, got {}",
                z1.shape()[0]
            )));
        }
        for (name, z) in [("z1", &z1), ("z2", &z2)] {
            if let Some(i) = z.rows().position(|r| r.iter().all(|&v| v == 0.0)) {
                return Err(Error::invalid(format!("{name} row {i} has zero norm")));
            }
        }
        Ok(ViewBatch { z1, z2 })
    }

    pub fn from_rows<R: AsRef<[f64]>>(z1: &[R], z2: &[R]) -> Result<Self> {
        ViewBatch::new(Tensor::from_rows(z1)?, Tensor::from_rows(z2)?)
    }

    pub fn len(&self) -> usize {
        self.z1.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.z1.shape()[1]
    }

    pub fn z1(&self) -> &Tensor {
        &self.z1
    }

    pub fn z2(&self) -> &Tensor {
        &self.z2
    }

    pub fn view(&self, k: View) -> &Tensor {
        match k {
            View::First => &self.z1,
            View::Second => &self.z2,
        }
    }

    /// The same batch with samples reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        ViewBatch::new(self.z1.select_first(perm)?, self.z2.select_first(perm)?)
    }
}

/// Cosine similarity `a.b / (|a| |b|)`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_sim", &[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::domain("cosine_sim", "zero-norm input"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Graph nodes of every intermediate quantity of the loss.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveNodes {
    /// `S_i^(1)` and `S_i^(2)`, each of shape `[N]`.
    pub neg_mean: [NodeId; 2],
    /// Per-view debiased terms before clamping, each `[N]`.
    pub unclamped: [NodeId; 2],
    /// `D_i`, shape `[N]`.
    pub distance: NodeId,
    /// Positive-pair cosine similarity, shape `[N]`.
    pub pos_sim: NodeId,
    /// Per-sample loss `L_i`, shape `[N]`.
    pub sample_loss: NodeId,
    /// Batch loss, scalar.
    pub loss: NodeId,
}

fn row_normalize(g: &mut Graph, z: NodeId) -> Result<NodeId> {
    let n = g.shape(z)[0];
    let sq = g.mul(z, z)?;
    let ss = g.sum_axis(sq, 1)?;
    let norm = g.powf(ss, 0.5)?;
    let norm = g.reshape(norm, &[n, 1])?;
    g.div(z, norm)
}

/// Records the batch loss for view matrices `z1`, `z2` (`[N, d]` each).
pub fn contrastive_graph(
    g: &mut Graph,
    z1: NodeId,
    z2: NodeId,
    cfg: &ContrastiveConfig,
) -> Result<ContrastiveNodes> {
    cfg.validate()?;
    let shape = g.shape(z1).to_vec();
    if shape.len() != 2 || g.shape(z2) != shape.as_slice() {
        return Err(Error::shape("contrastive_loss", &shape, g.shape(z2)));
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::invalid(format!(
            "contrastive loss needs N >= 2 samples, got {n}"
        )));
    }
    let inv_tau = 1.0 / cfg.tau;

    let u1 = row_normalize(g, z1)?;
    let u2 = row_normalize(g, z2)?;
    let u1t = g.transpose(u1)?;
    let u2t = g.transpose(u2)?;

    let mut off_diag = Tensor::ones(&[n, n]);
    for i in 0..n {
        off_diag.data_mut()[i * n + i] = 0.0;
    }
    let off_diag = g.constant(off_diag);

    // exp(sim / tau) summed over the other samples of one view.
    let neg_sum = |g: &mut Graph, a: NodeId, bt: NodeId| -> Result<NodeId> {
        let sim = g.matmul(a, bt)?;
        let scaled = g.scale(sim, inv_tau)?;
        let e = g.exp(scaled)?;
        let masked = g.mul(e, off_diag)?;
        g.sum_axis(masked, 1)
    };
    let denom = 1.0 / (2 * n - 2) as f64;
    let s11 = neg_sum(g, u1, u1t)?;
    let s12 = neg_sum(g, u1, u2t)?;
    let s1 = g.add(s11, s12)?;
    let s1 = g.scale(s1, denom)?;
    let s22 = neg_sum(g, u2, u2t)?;
    let s21 = neg_sum(g, u2, u1t)?;
    let s2 = g.add(s22, s21)?;
    let s2 = g.scale(s2, denom)?;

    let prod = g.mul(u1, u2)?;
    let pos_sim = g.sum_axis(prod, 1)?;
    let pos_scaled = g.scale(pos_sim, inv_tau)?;
    let pos = g.exp(pos_scaled)?;

    let prior_pos = g.scale(pos, cfg.tau_plus)?;
    let debias = 1.0 / (1.0 - cfg.tau_plus);
    let floor = cfg.clamp_floor();
    let mut unclamped = [s1; 2];
    let mut clamped = [s1; 2];
    for (k, s) in [s1, s2].into_iter().enumerate() {
        let diff = g.sub(s, prior_pos)?;
        unclamped[k] = g.scale(diff, debias)?;
        clamped[k] = g.max_scalar(unclamped[k], floor)?;
    }
    let distance = g.add(clamped[0], clamped[1])?;

    let one_plus = g.add_scalar(distance, 1.0)?;
    let smoothed = g.powf(one_plus, cfg.lambda)?;
    let denom_node = g.add(pos, smoothed)?;
    let ratio = g.div(pos, denom_node)?;
    let log_ratio = g.log(ratio)?;
    let sample_loss = g.scale(log_ratio, -2.0)?;
    let total = g.sum(sample_loss)?;
    let loss = g.scale(total, 1.0 / (2 * n) as f64)?;

    Ok(ContrastiveNodes {
        neg_mean: [s1, s2],
        unclamped,
        distance,
        pos_sim,
        sample_loss,
        loss,
    })
}

/// Forward values of every quantity of the loss for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveValues {
    pub neg_mean: [Vec<f64>; 2],
    pub unclamped: [Vec<f64>; 2],
    pub distance: Vec<f64>,
    pub pos_sim: Vec<f64>,
    pub sample_loss: Vec<f64>,
    pub loss: f64,
}

impl ContrastiveValues {
    /// Smallest distance of any per-view term from the clamp kink.
    pub fn kink_margin(&self, cfg: &ContrastiveConfig) -> f64 {
        let floor = cfg.clamp_floor();
        self.unclamped
            .iter()
            .flatten()
            .map(|v| (v - floor).abs())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Evaluates the loss and all intermediates.
pub fn evaluate(batch: &ViewBatch, cfg: &ContrastiveConfig) -> Result<ContrastiveValues> {
    let mut g = Graph::new();
    let z1 = g.constant(batch.z1.clone());
    let z2 = g.constant(batch.z2.clone());
    let nodes = contrastive_graph(&mut g, z1, z2, cfg)?;
    let vec_of = |id: NodeId| g.value(id).data().to_vec();
    Ok(ContrastiveValues {
        neg_mean: [vec_of(nodes.neg_mean[0]), vec_of(nodes.neg_mean[1])],
        unclamped: [vec_of(nodes.unclamped[0]), vec_of(nodes.unclamped[1])],
        distance: vec_of(nodes.distance),
        pos_sim: vec_of(nodes.pos_sim),
        sample_loss: vec_of(nodes.sample_loss),
        loss: g.value(nodes.loss).item()?,
    })
}

fn check_index(batch: &ViewBatch, i: usize) -> Result<()> {
    if i >= batch.len() {
        return Err(Error::invalid(format!(
            "sample index {i} out of range for batch of {}",
            batch.len()
        )));
    }
    Ok(())
}

/// `S_i^(k)`: mean of `exp(sim / tau)` between anchor `z_i^(k)` and the
/// `2N - 2` views of the other samples.
pub fn neg_mean(batch: &ViewBatch, i: usize, k: View, cfg: &ContrastiveConfig) -> Result<f64> {
    check_index(batch, i)?;
    let v = evaluate(batch, cfg)?;
    Ok(match k {
        View::First => v.neg_mean[0][i],
        View::Second => v.neg_mean[1][i],
    })
}

/// `D_i`: the clamped, prior-corrected negative term summed over both views.
pub fn debiased_distance(batch: &ViewBatch, i: usize, cfg: &ContrastiveConfig) -> Result<f64> {
    check_index(batch, i)?;
    Ok(evaluate(batch, cfg)?.distance[i])
}

pub fn sample_loss(batch: &ViewBatch, i: usize, cfg: &ContrastiveConfig) -> Result<f64> {
    check_index(batch, i)?;
    Ok(evaluate(batch, cfg)?.sample_loss[i])
}

pub fn batch_loss(batch: &ViewBatch, cfg: &ContrastiveConfig) -> Result<f64> {
    Ok(evaluate(batch, cfg)?.loss)
}

/// Batch loss together with its gradients w.r.t. `z1` and `z2`.
pub fn batch_loss_with_grad(
    batch: &ViewBatch,
    cfg: &ContrastiveConfig,
) -> Result<(f64, Tensor, Tensor)> {
    let mut g = Graph::new();
    let z1 = g.param(batch.z1.clone());
    let z2 = g.param(batch.z2.clone());
    let nodes = contrastive_graph(&mut g, z1, z2, cfg)?;
    let grads = g.backward(nodes.loss)?;
    Ok((g.value(nodes.loss).item()?, grads.get(z1), grads.get(z2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_grad;
    use crate::tensor::relative_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const E2: f64 = 7.38905609893065;

    fn cfg(lambda: f64) -> ContrastiveConfig {
        ContrastiveConfig::new(0.5, 0.1, lambda).unwrap()
    }

    /// N = 2 batch where each sample's views coincide and samples are orthogonal.
    fn orthogonal_batch() -> ViewBatch {
        ViewBatch::from_rows(&[[1.0, 0.0], [0.0, 1.0]], &[[1.0, 0.0], [0.0, 1.0]]).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> ViewBatch {
        let mut m = || {
            let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::new(vec![n, d], data).unwrap()
        };
        let (a, b) = (m(), m());
        ViewBatch::new(a, b).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ContrastiveConfig::new(0.0, 0.1, 2.0).is_err());
        assert!(ContrastiveConfig::new(0.5, 1.0, 2.0).is_err());
        assert!(ContrastiveConfig::new(0.5, 0.1, -1.0).is_err());
        let d = ContrastiveConfig::default();
        assert_eq!((d.tau, d.tau_plus, d.lambda), (0.5, 0.1, 2.0));
    }

    #[test]
    fn batch_rejects_degenerate_input() {
        assert!(ViewBatch::from_rows(&[[1.0, 0.0]], &[[1.0, 0.0]]).is_err());
        assert!(ViewBatch::from_rows(&[[1.0, 0.0], [0.0, 0.0]], &[[1.0, 0.0], [0.0, 1.0]]).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.70711).abs() < 1e-5);
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn neg_mean_orthogonal_is_one() {
        let s = neg_mean(&orthogonal_batch(), 0, View::First, &cfg(2.0)).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn neg_mean_mixed_similarities() {
        // Anchor (1,0); other sample's views at sims 1 and 0.
        let b = ViewBatch::from_rows(&[[1.0, 0.0], [1.0, 0.0]], &[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let s = neg_mean(&b, 0, View::First, &cfg(2.0)).unwrap();
        assert!((s - (E2 + 1.0) / 2.0).abs() < 1e-5);
        assert!((s - 4.19453).abs() < 1e-5);
    }

    #[test]
    fn neg_mean_constant_similarities() {
        let b = ViewBatch::from_rows(&[[1.0, 0.0], [2.0, 0.0]], &[[1.0, 0.0], [3.0, 0.0]]).unwrap();
        let s = neg_mean(&b, 0, View::Second, &cfg(2.0)).unwrap();
        assert!((s - E2).abs() < 1e-9);
    }

    #[test]
    fn distance_unclamped_branch() {
        let d = debiased_distance(&orthogonal_batch(), 0, &cfg(2.0)).unwrap();
        let per_view = (1.0 - 0.1 * E2) / 0.9;
        assert!((d - 2.0 * per_view).abs() < 1e-12);
        // Hand value 0.58021 (each view 0.29010).
        assert!((d - 0.58021).abs() < 1e-5);
    }

    #[test]
    fn distance_clamp_branch() {
        let b = ViewBatch::from_rows(&[[1.0, 0.0], [-1.0, 0.0]], &[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let v = evaluate(&b, &cfg(2.0)).unwrap();
        assert!((v.neg_mean[0][0] - (-2.0f64).exp()).abs() < 1e-12);
        assert!(v.unclamped[0][0] < 0.0);
        assert!((v.distance[0] - 0.27067).abs() < 1e-5);
    }

    #[test]
    fn sample_loss_hand_values() {
        let l = sample_loss(&orthogonal_batch(), 0, &cfg(2.0)).unwrap();
        let d = 2.0 * (1.0 - 0.1 * E2) / 0.9;
        let expect = -2.0 * (E2 / (E2 + (1.0 + d) * (1.0 + d))).ln();
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 0.58226).abs() < 1e-4);
        let l0 = sample_loss(&orthogonal_batch(), 0, &cfg(0.0)).unwrap();
        assert!((l0 - 0.25386).abs() < 1e-5);
    }

    #[test]
    fn sample_loss_vanishes_at_small_temperature() {
        let b = ViewBatch::from_rows(&[[1.0, 0.0], [0.0, 1.0]], &[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let hot = sample_loss(&b, 0, &ContrastiveConfig::new(0.5, 0.1, 2.0).unwrap()).unwrap();
        let cold = sample_loss(&b, 0, &ContrastiveConfig::new(0.02, 0.1, 2.0).unwrap()).unwrap();
        assert!(cold < 1e-9 && cold < hot);
    }

    #[test]
    fn batch_loss_is_half_mean_sample_loss() {
        let v = evaluate(&orthogonal_batch(), &cfg(2.0)).unwrap();
        assert!((v.sample_loss[0] - v.sample_loss[1]).abs() < 1e-15);
        assert!((v.loss - v.sample_loss[0] / 2.0).abs() < 1e-15);
        assert!((v.loss - 0.29118).abs() < 1e-4);
    }

    #[test]
    fn batch_loss_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = random_batch(&mut rng, 5, 3);
        let p = b.permuted(&[3, 0, 4, 1, 2]).unwrap();
        let (a, c) = (batch_loss(&b, &cfg(2.0)).unwrap(), batch_loss(&p, &cfg(2.0)).unwrap());
        assert!((a - c).abs() < 1e-12);
    }

    #[test]
    fn clamp_floor_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let c = cfg(2.0);
            let v = evaluate(&random_batch(&mut rng, 4, 3), &c).unwrap();
            for d in &v.distance {
                assert!(*d >= 2.0 * c.clamp_floor());
            }
        }
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let b = random_batch(&mut rng, 3, 4);
            let c = cfg(rng.random_range(0.0..5.0));
            let a = batch_loss(&b, &c).unwrap();
            let o = oracle::loss_oracle_scalar(&b, &c).unwrap();
            assert!((a - o).abs() < 1e-10);
        }
    }

    #[test]
    fn strictly_increasing_and_convex_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let grid = [0.0, 0.5, 1.0, 2.0, 3.0, 5.0];
        for _ in 0..20 {
            let b = random_batch(&mut rng, 4, 6);
            let l: Vec<f64> = grid.iter().map(|&lam| batch_loss(&b, &cfg(lam)).unwrap()).collect();
            for w in l.windows(2) {
                assert!(w[1] > w[0]);
            }
            for lam in [0.5, 1.0, 2.0, 3.0] {
                let h = 0.25;
                let f = |x: f64| batch_loss(&b, &cfg(x)).unwrap();
                assert!(f(lam + h) - 2.0 * f(lam) + f(lam - h) > 0.0);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = cfg(2.0);
        let mut checked = 0;
        while checked < 20 {
            let n = rng.random_range(2..6);
            let b = random_batch(&mut rng, n, 8);
            if evaluate(&b, &c).unwrap().kink_margin(&c) < 1e-3 {
                continue;
            }
            let (_, g1, g2) = batch_loss_with_grad(&b, &c).unwrap();
            let f1 = finite_diff_grad(|z| batch_loss(&ViewBatch::new(z.clone(), b.z2().clone())?, &c), b.z1(), 1e-4).unwrap();
            let f2 = finite_diff_grad(|z| batch_loss(&ViewBatch::new(b.z1().clone(), z.clone())?, &c), b.z2(), 1e-4).unwrap();
            assert!(relative_error(&g1, &f1, 1e-8) < 1e-5);
            assert!(relative_error(&g2, &f2, 1e-8) < 1e-5);
            checked += 1;
        }
    }
}
