use super::*;
use crate::clustering::kl_loss;
use crate::contrastive::{batch_loss, ViewBatch};
use crate::data::{gen_blobs, line_means};
use crate::encoder::{MixerConfig, MlpConfig};

fn blobs(seed: u64) -> Dataset {
    gen_blobs(&line_means(2, 2, 6.0).unwrap(), 0.5, &[20, 12], seed).unwrap()
}

fn mlp() -> EncoderConfig {
    EncoderConfig::Mlp(MlpConfig {
        input_dim: 2,
        hidden: vec![16, 8],
        head_hidden: 16,
        embed_dim: 4,
    })
}

fn ready_model(ds: &Dataset, seed: u64) -> Model {
    let mut m = Model::new(Encoder::new(mlp(), seed).unwrap(), AdamConfig::default());
    m.init_clusters(ds, 2, seed).unwrap();
    m
}

#[test]
fn mtl_examples() {
    assert_eq!(mtl_loss(0.3, 0.7, 0.0).unwrap(), 0.3);
    assert_eq!(mtl_loss(0.3, 0.0, 5.0).unwrap(), 0.3);
    assert!((mtl_loss(0.29118, 0.69315, 5.0).unwrap() - 3.75693).abs() < 1e-12);
    assert!(mtl_loss(f64::NAN, 0.0, 1.0).is_err());
}

#[test]
fn defaults() {
    let c = TrainConfig::default();
    assert_eq!(c.gamma, 5.0);
    assert_eq!(c.batch_size, 32);
    assert_eq!(c.target_refresh, TargetRefresh::PerStep);
    assert!(!c.cluster_on_view1);
    assert!(TrainConfig { batch_size: 1, ..c.clone() }.validate().is_err());
    assert!(TrainConfig { gamma: -1.0, ..c }.validate().is_err());
}

#[test]
fn derive_seed_separates_inputs() {
    let a = derive_seed(&[1, 2]);
    assert_eq!(a, derive_seed(&[1, 2]));
    assert_ne!(a, derive_seed(&[2, 1]));
    assert_ne!(a, derive_seed(&[1, 3]));
    assert_ne!(derive_seed(&[0]), derive_seed(&[0, 0]));
}

#[test]
fn uninitialized_centroids_rejected() {
    let ds = blobs(0);
    let mut m = Model::new(Encoder::new(mlp(), 0).unwrap(), AdamConfig::default());
    let err = m.train_step(&ds, &[0, 1, 2], &TrainConfig::default(), 0, None).unwrap_err();
    assert!(err.to_string().contains("centroids"));
}

#[test]
fn zero_gamma_gives_zero_centroid_gradient() {
    let ds = blobs(1);
    let mut m = ready_model(&ds, 1);
    let cfg = TrainConfig { gamma: 0.0, ..Default::default() };
    let before = m.clusters.clone().unwrap();
    let (_, grads) = m.train_step(&ds, &[0, 5, 20, 25], &cfg, 3, None).unwrap();
    assert!(grads[CENTROIDS].data().iter().all(|&g| g == 0.0));
    assert_eq!(m.clusters.unwrap(), before);
}

#[test]
fn dry_run_matches_independent_composition() {
    let ds = blobs(2);
    let m = ready_model(&ds, 2);
    let idx = [1, 4, 7, 21, 30];
    let cfg = TrainConfig::default();
    let got = m.dry_run(&ds, &idx, &cfg, 11).unwrap();

    let (v1, v2) = make_views(&ds, &idx, &cfg, 11).unwrap();
    let enc = &m.encoder;
    let r1 = enc.project(&enc.embed(&v1).unwrap()).unwrap();
    let r2 = enc.project(&enc.embed(&v2).unwrap()).unwrap();
    let cont = batch_loss(&ViewBatch::new(r1, r2).unwrap(), &cfg.contrastive).unwrap();
    let q = soft_assign(&enc.embed(&ds.batch(&idx).unwrap()).unwrap(), m.clusters.as_ref().unwrap()).unwrap();
    let kl = kl_loss(&target_distribution(&q).unwrap(), &q).unwrap() / idx.len() as f64;
    let want = mtl_loss(cont, kl, cfg.gamma).unwrap();
    assert!((got.total - want).abs() < 1e-10);
    assert!((got.contrastive - cont).abs() < 1e-10);
    assert!((got.clustering - kl).abs() < 1e-10);
    assert!((got.total - (got.contrastive + cfg.gamma * got.clustering)).abs() < 1e-12);
}

#[test]
fn contrastive_term_non_decreasing_in_lambda() {
    let ds = blobs(3);
    let m = ready_model(&ds, 3);
    let mut prev = f64::NEG_INFINITY;
    for lambda in [0.0, 0.5, 1.0, 2.0, 3.0, 5.0] {
        let mut cfg = TrainConfig::default();
        cfg.contrastive.lambda = lambda;
        let l = m.dry_run(&ds, &[0, 2, 22, 23], &cfg, 5).unwrap().contrastive;
        assert!(l >= prev);
        prev = l;
    }
}

#[test]
fn fixed_batch_descends() {
    let ds = blobs(4);
    let mut m = ready_model(&ds, 4);
    let idx: Vec<usize> = (0..ds.len()).step_by(2).collect();
    let cfg = TrainConfig {
        optimizer: AdamConfig { lr: 1e-2, ..Default::default() },
        ..Default::default()
    };
    let mut losses = Vec::new();
    for s in 0..20 {
        losses.push(m.train_step(&ds, &idx, &cfg, s, None).unwrap().0.total);
    }
    assert!(losses[19] < losses[0], "{losses:?}");
}

#[test]
fn zero_epochs_returns_initialization() {
    let dir = std::env::temp_dir().join(format!("debclust-fit0-{}", std::process::id()));
    let ds = blobs(5);
    let cfg = TrainConfig { epochs: 0, ..Default::default() };
    let out = fit(&ds, mlp(), &cfg, Some(FitArtifacts { dir: &dir, config_hash: 42 })).unwrap();
    assert_eq!(std::fs::read_to_string(dir.join(LOSS_FILE)).unwrap(), format!("{LOSS_CSV_HEADER}\n"));
    let mut init = Model::new(Encoder::new(mlp(), derive_seed(&[0, 1])).unwrap(), cfg.optimizer);
    init.init_clusters(&ds, 2, derive_seed(&[0, 2])).unwrap();
    assert_eq!(out.model, init);
    let (loaded, hash) = Model::load(&dir.join(CHECKPOINT_FILE), mlp(), cfg.optimizer).unwrap();
    assert_eq!(hash, 42);
    assert_eq!(loaded.encoder, init.encoder);
    assert_eq!(loaded.clusters, init.clusters);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn fit_is_deterministic_and_checkpoints_round_trip() {
    let ds = blobs(6);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        checkpoint_every: 2,
        ..Default::default()
    };
    let mut bytes = Vec::new();
    for run in 0..2 {
        let dir = std::env::temp_dir().join(format!("debclust-det{run}-{}", std::process::id()));
        let out = fit(&ds, mlp(), &cfg, Some(FitArtifacts { dir: &dir, config_hash: 7 })).unwrap();
        assert_eq!(out.history.len(), 3);
        assert!(dir.join("checkpoint_epoch0002.bin").exists());
        let (loaded, _) = Model::load(&dir.join(CHECKPOINT_FILE), mlp(), cfg.optimizer).unwrap();
        assert_eq!(loaded, out.model);
        bytes.push((
            std::fs::read(dir.join(CHECKPOINT_FILE)).unwrap(),
            std::fs::read(dir.join(LOSS_FILE)).unwrap(),
        ));
        std::fs::remove_dir_all(&dir).unwrap();
    }
    assert_eq!(bytes[0], bytes[1]);
    let csv = String::from_utf8(bytes[0].1.clone()).unwrap();
    assert_eq!(csv.lines().count(), 4);
    for line in csv.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!((f[3] - (f[1] + cfg.gamma * f[2])).abs() < 1e-12);
    }
}

#[test]
fn per_epoch_refresh_and_view1_clustering_run() {
    let ds = blobs(7);
    for (refresh, view1) in [(TargetRefresh::PerEpoch, false), (TargetRefresh::PerStep, true)] {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            target_refresh: refresh,
            cluster_on_view1: view1,
            ..Default::default()
        };
        let out = fit(&ds, mlp(), &cfg, None).unwrap();
        assert!(out.history.iter().all(|r| r.total.is_finite()));
    }
}

#[test]
fn image_training_step_runs() {
    let imgs = Tensor::new(
        vec![4, 3, 8, 8],
        (0..4 * 192).map(|i| ((i * 37) % 101) as f64 / 101.0).collect(),
    )
    .unwrap();
    let ds = Dataset::new(imgs, vec![0, 1, 0, 1], 2).unwrap();
    let cfg = EncoderConfig::Mixer(MixerConfig {
        channels: 4,
        depth: 1,
        head_hidden: 8,
        embed_dim: 4,
        ..Default::default()
    });
    let mut m = Model::new(Encoder::new(cfg, 0).unwrap(), AdamConfig::default());
    m.init_clusters(&ds, 2, 0).unwrap();
    let before = m.encoder.buffers.clone();
    let (l, _) = m.train_step(&ds, &[0, 1, 2, 3], &TrainConfig::default(), 1, None).unwrap();
    assert!(l.total.is_finite());
    assert_ne!(m.encoder.buffers, before);
}
