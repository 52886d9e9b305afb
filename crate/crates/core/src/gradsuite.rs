//! Seeded gradient-check suites comparing reverse-mode gradients with
//! central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_grad, finite_diff_wrt, GradCheck, Graph};
use crate::clustering::{clustering_loss_with_grad, kl_loss, soft_assign, target_distribution, ClusterState};
use crate::contrastive::{batch_loss, batch_loss_with_grad, evaluate, ContrastiveConfig, ViewBatch};
use crate::encoder::{BnStats, Encoder, EncoderConfig, MixerConfig, MlpConfig, Mode};
use crate::error::Result;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-5;
/// Instances whose clamp arguments lie this close to the kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

/// Whether central differences at `STEP` resolve the gradient: the
/// truncation error, estimated from the difference at `STEP / 2`, must stay
/// below a tenth of `TOLERANCE`. Uses only the numeric side, so it cannot
/// hide an analytic error.
fn resolvable(fd: &Tensor, fd_half: &Tensor) -> bool {
    let truncation = 4.0 / 3.0 * fd.max_abs_diff(fd_half) * (fd.len() as f64).sqrt();
    truncation < 0.1 * TOLERANCE * fd.norm().max(1e-8)
}

fn matrix(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Tensor {
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-scale..scale)).collect()).expect("sized")
}

/// Gradients of the contrastive batch loss w.r.t. both view matrices,
/// `N` in `[2, 8]`, `d` in `[2, 16]`.
pub fn contrastive_suite(instances: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check = GradCheck::new("contrastive loss w.r.t. z1, z2");
    let cfg = ContrastiveConfig::default();
    while check.instances < instances {
        let n = rng.random_range(2..=8);
        let d = rng.random_range(2..=16);
        let batch = ViewBatch::new(matrix(&mut rng, n, d, 1.0), matrix(&mut rng, n, d, 1.0))?;
        if evaluate(&batch, &cfg)?.kink_margin(&cfg) < KINK_MARGIN {
            check.resampled += 1;
            continue;
        }
        let (_, g1, g2) = batch_loss_with_grad(&batch, &cfg)?;
        let f1 = finite_diff_grad(|z| batch_loss(&ViewBatch::new(z.clone(), batch.z2().clone())?, &cfg), batch.z1(), STEP)?;
        let f2 = finite_diff_grad(|z| batch_loss(&ViewBatch::new(batch.z1().clone(), z.clone())?, &cfg), batch.z2(), STEP)?;
        check.record(&g1, &f1);
        check.record(&g2, &f2);
        check.finish_instance();
    }
    Ok(check)
}

/// Gradients of the clustering KL (target held fixed) w.r.t. embeddings and
/// centroids, `N` in `[2, 8]`, `d` in `[2, 16]`, `K` in `[2, 4]`.
pub fn clustering_suite(instances: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check = GradCheck::new("clustering loss w.r.t. embeddings, centroids");
    while check.instances < instances {
        let n = rng.random_range(2..=8);
        let d = rng.random_range(2..=16);
        let k = rng.random_range(2..=4);
        let z = matrix(&mut rng, n, d, 1.0);
        let state = ClusterState::new(matrix(&mut rng, k, d, 1.0), 1.0)?;
        let (_, gz, gmu) = clustering_loss_with_grad(&z, &state)?;
        let p = target_distribution(&soft_assign(&z, &state)?)?;
        let fz = finite_diff_grad(|x| kl_loss(&p, &soft_assign(x, &state)?), &z, STEP)?;
        let fmu = finite_diff_grad(
            |m| kl_loss(&p, &soft_assign(&z, &ClusterState::new(m.clone(), 1.0)?)?),
            state.centroids(),
            STEP,
        )?;
        check.record(&gz, &fz);
        check.record(&gmu, &fmu);
        check.finish_instance();
    }
    Ok(check)
}

/// Gradients of a random linear readout of embedding and projection w.r.t.
/// every encoder and head parameter. Even instances use an MLP on
/// `d`-dimensional inputs, odd ones a one-block mixer on small images.
pub fn encoder_suite(instances: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check = GradCheck::new("encoder and head parameters");
    let mut draws = 0usize;
    while check.instances < instances {
        let i = draws;
        draws += 1;
        let n = rng.random_range(2..=8);
        let (cfg, x, mode) = if i % 2 == 0 {
            let d = rng.random_range(2..=16);
            let hidden = rng.random_range(2..=8);
            let cfg = EncoderConfig::Mlp(MlpConfig {
                input_dim: d,
                hidden: vec![hidden, rng.random_range(2..=6)],
                head_hidden: rng.random_range(2..=8),
                embed_dim: rng.random_range(2..=6),
            });
            (cfg, matrix(&mut rng, n, d, 1.0), Mode::Eval)
        } else {
            let c_in = rng.random_range(1..=2);
            let cfg = EncoderConfig::Mixer(MixerConfig {
                in_channels: c_in,
                channels: rng.random_range(1..=2),
                depth: 1,
                head_hidden: 3,
                embed_dim: 2,
                ..Default::default()
            });
            let x = Tensor::new(vec![n, c_in, 4, 4], (0..n * c_in * 16).map(|_| rng.random_range(-1.0..1.0)).collect())?;
            (cfg, x, Mode::Train { mask_seed: rng.random() })
        };
        let enc = Encoder::new(cfg, rng.random())?;
        let mut g = Graph::new();
        let p = enc.register(&mut g, true);
        let xn = g.constant(x);
        let z = enc.encode_graph(&mut g, &p, xn, mode, &mut BnStats::default())?;
        let r = enc.project_graph(&mut g, &p, z)?;
        let mut readout = |g: &mut Graph, node| -> Result<_> {
            let w = matrix(&mut rng, g.shape(node)[0], g.shape(node)[1], 1.0);
            let w = g.constant(w);
            let m = g.mul(node, w)?;
            g.sum(m)
        };
        let a = readout(&mut g, z.0)?;
        let b = readout(&mut g, r.0)?;
        let loss = g.add(a, b)?;
        let mut numeric = Vec::new();
        for &id in p.0.values() {
            let fd = finite_diff_wrt(&g, loss, id, STEP)?;
            if !resolvable(&fd, &finite_diff_wrt(&g, loss, id, STEP / 2.0)?) {
                break;
            }
            numeric.push((id, fd));
        }
        if numeric.len() < p.0.len() {
            check.resampled += 1;
            continue;
        }
        let grads = g.backward(loss)?;
        for (id, fd) in &numeric {
            check.record(&grads.get(*id), fd);
        }
        check.finish_instance();
    }
    Ok(check)
}

/// All three suites with `instances` instances each.
pub fn run_all(instances: usize, seed: u64) -> Result<Vec<GradCheck>> {
    Ok(vec![
        contrastive_suite(instances, seed)?,
        clustering_suite(instances, seed.wrapping_add(1))?,
        encoder_suite(instances, seed.wrapping_add(2))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        for check in run_all(6, 17).unwrap() {
            assert_eq!(check.instances, 6);
            assert!(check.passed(TOLERANCE), "{check:?}");
        }
    }
}
