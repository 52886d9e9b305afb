//! Optimizer, multi-task objective and the joint training loop.
//!
//! Each step draws two augmented views per sample for the contrastive
//! branch and feeds the un-augmented samples through the clustering branch:
//!
//! ```text
//! L = L_contrastive(h(f(t1(x))), h(f(t2(x)))) + gamma * KL(P || Q(f(x))) / N
//! ```
//!
//! with `P` recomputed from `Q` and held constant. Gradients reach the
//! encoder, the head and the centroids; one Adam step updates all of them.

pub mod adam;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint;
use crate::clustering::{kl_graph, kmeans_init, soft_assign, soft_assign_graph, target_distribution, ClusterState, SoftAssignment, TargetDistribution};
use crate::contrastive::{contrastive_graph, ContrastiveConfig};
use crate::data::{augment_image, augment_vector, AugmentConfig, Dataset, VectorAugment};
use crate::encoder::{BnStats, Encoder, EncoderConfig, Mode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use adam::{Adam, AdamConfig, ParamSet};

pub const CENTROIDS: &str = "cluster.centroids";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetRefresh {
    /// Targets from the current batch's assignments at every step.
    PerStep,
    /// Targets from whole-dataset assignments computed at each epoch start.
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the clustering loss.
    pub gamma: f64,
    pub contrastive: ContrastiveConfig,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Set programmatically; experiment configs supply one master seed.
    #[serde(skip)]
    pub seed: u64,
    pub target_refresh: TargetRefresh,
    /// Number of clusters; 0 means one per class.
    pub clusters: usize,
    /// Cluster the first view's embeddings instead of the raw samples.
    pub cluster_on_view1: bool,
    /// Write an intermediate checkpoint every this many epochs (0: only at
    /// the end).
    pub checkpoint_every: usize,
    /// Fill the wall_seconds column with elapsed time instead of 0.
    pub record_wall_time: bool,
    pub image_augment: AugmentConfig,
    pub vector_augment: VectorAugment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 5.0,
            contrastive: ContrastiveConfig::default(),
            optimizer: AdamConfig::default(),
            batch_size: 32,
            epochs: 30,
            seed: 0,
            target_refresh: TargetRefresh::PerStep,
            clusters: 0,
            cluster_on_view1: false,
            checkpoint_every: 0,
            record_wall_time: false,
            image_augment: AugmentConfig::default(),
            vector_augment: VectorAugment::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if !(0.0..=1.0).contains(&self.vector_augment.drop_p) || !(self.vector_augment.noise_sigma >= 0.0) {
            return Err(Error::invalid("vector augmentation needs noise_sigma >= 0 and drop_p in [0, 1]"));
        }
        self.contrastive.validate()?;
        self.optimizer.validate()?;
        self.image_augment.validate()
    }
}

/// `L_contrastive + gamma * L_clustering`.
pub fn mtl_loss(contrastive: f64, clustering: f64, gamma: f64) -> Result<f64> {
    if !contrastive.is_finite() || !clustering.is_finite() || !gamma.is_finite() {
        return Err(Error::NonFinite("multi-task loss inputs".into()));
    }
    Ok(contrastive + gamma * clustering)
}

/// SplitMix64-style mixing of several integers into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub contrastive: f64,
    /// Per-sample mean of `KL(P || Q)` over the batch.
    pub clustering: f64,
    pub total: f64,
}

/// The two augmented views of the samples at `indices`. View `k` of sample
/// `i` is seeded by `(step_seed, i, k)` so results do not depend on batch
/// composition or order of generation.
pub fn make_views(ds: &Dataset, indices: &[usize], cfg: &TrainConfig, step_seed: u64) -> Result<(Tensor, Tensor)> {
    let mut views: [Vec<Tensor>; 2] = [Vec::with_capacity(indices.len()), Vec::with_capacity(indices.len())];
    for &i in indices {
        for (k, out) in views.iter_mut().enumerate() {
            let seed = derive_seed(&[step_seed, i as u64, k as u64]);
            let v = if ds.is_image() {
                ds.standardize(augment_image(&ds.pixels(i)?, &cfg.image_augment, seed)?)
            } else {
                let va = cfg.vector_augment;
                augment_vector(&ds.sample(i)?, va.noise_sigma, va.drop_p, seed)?
            };
            out.push(v);
        }
    }
    let stack = |v: &[Tensor]| Tensor::stack(&v.iter().collect::<Vec<_>>());
    Ok((stack(&views[0])?, stack(&views[1])?))
}

/// Encoder, centroids and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub clusters: Option<ClusterState>,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
}

impl Model {
    pub fn new(encoder: Encoder, optimizer: AdamConfig) -> Self {
        let mut adam = Adam::new(optimizer);
        adam.exclude_from_decay(CENTROIDS);
        Model {
            encoder,
            clusters: None,
            adam,
            epoch: 0,
        }
    }

    /// Eval-mode embeddings of the whole dataset, in chunks.
    pub fn embed_dataset(&self, ds: &Dataset) -> Result<Tensor> {
        let idx: Vec<usize> = (0..ds.len()).collect();
        let mut parts = Vec::new();
        for chunk in idx.chunks(256) {
            parts.push(self.encoder.embed(&ds.batch(chunk)?)?);
        }
        let d = self.encoder.config().embedding_dim();
        let mut data = Vec::with_capacity(ds.len() * d);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        Tensor::new(vec![ds.len(), d], data)
    }

    /// K-means initialization of the centroids on eval-mode embeddings.
    pub fn init_clusters(&mut self, ds: &Dataset, k: usize, seed: u64) -> Result<()> {
        let emb = self.embed_dataset(ds)?;
        self.clusters = Some(kmeans_init(&emb, k, seed)?);
        Ok(())
    }

    fn cluster_state(&self) -> Result<&ClusterState> {
        self.clusters
            .as_ref()
            .ok_or_else(|| Error::invalid("centroids are not initialized"))
    }

    /// Forward (and, if `update`, backward plus one optimizer step) on the
    /// samples at `indices`. `targets` supplies precomputed target rows for
    /// per-epoch refresh.
    fn step(
        &mut self,
        ds: &Dataset,
        indices: &[usize],
        cfg: &TrainConfig,
        step_seed: u64,
        targets: Option<&TargetDistribution>,
        update: bool,
    ) -> Result<(StepLosses, ParamSet)> {
        if indices.len() < 2 {
            return Err(Error::invalid(format!("a step needs >= 2 samples, got {}", indices.len())));
        }
        let state = self.cluster_state()?.clone();
        let (v1, v2) = make_views(ds, indices, cfg, step_seed)?;
        let raw = ds.batch(indices)?;

        let mut g = Graph::new();
        let p = self.encoder.register(&mut g, update);
        let mu = g.leaf(state.centroids().clone(), update);
        let mut stats = BnStats::default();
        let mask = |branch: u64| Mode::Train {
            mask_seed: derive_seed(&[step_seed, 100 + branch]),
        };

        let x1 = g.constant(v1);
        let x2 = g.constant(v2);
        let z1 = self.encoder.encode_graph(&mut g, &p, x1, mask(1), &mut stats)?;
        let z2 = self.encoder.encode_graph(&mut g, &p, x2, mask(2), &mut stats)?;
        let r1 = self.encoder.project_graph(&mut g, &p, z1)?;
        let r2 = self.encoder.project_graph(&mut g, &p, z2)?;
        let cont = contrastive_graph(&mut g, r1.0, r2.0, &cfg.contrastive)?.loss;

        let z0 = if cfg.cluster_on_view1 {
            z1
        } else {
            let x0 = g.constant(raw);
            self.encoder.encode_graph(&mut g, &p, x0, mask(0), &mut stats)?
        };
        let q = soft_assign_graph(&mut g, z0.0, mu, state.alpha())?;
        let target = match targets {
            Some(all) => TargetDistribution(all.0.select_first(indices)?),
            None => target_distribution(&SoftAssignment(g.value(q).clone()))?,
        };
        let kl = kl_graph(&mut g, &target, q)?;
        let clust = g.scale(kl, 1.0 / indices.len() as f64)?;
        let weighted = g.scale(clust, cfg.gamma)?;
        let total = g.add(cont, weighted)?;

        let losses = StepLosses {
            contrastive: g.value(cont).item()?,
            clustering: g.value(clust).item()?,
            total: g.value(total).item()?,
        };
        if !losses.total.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let mut grads = ParamSet::new();
        if update {
            let gm = g.backward(total)?;
            for (name, &id) in &p.0 {
                grads.insert(name.clone(), gm.get(id));
            }
            grads.insert(CENTROIDS.to_string(), gm.get(mu));

            let mut params = std::mem::take(&mut self.encoder.params);
            params.insert(CENTROIDS.to_string(), state.centroids().clone());
            let stepped = self.adam.step(&mut params, &grads);
            let centroids = params.remove(CENTROIDS).expect("inserted above");
            self.encoder.params = params;
            stepped?;
            self.clusters
                .as_mut()
                .expect("checked above")
                .set_centroids(centroids)?;
            self.encoder.apply_bn_stats(&stats)?;
        }
        Ok((losses, grads))
    }

    /// One optimization step; returns the pre-update losses and the
    /// gradients that were applied.
    pub fn train_step(
        &mut self,
        ds: &Dataset,
        indices: &[usize],
        cfg: &TrainConfig,
        step_seed: u64,
        targets: Option<&TargetDistribution>,
    ) -> Result<(StepLosses, ParamSet)> {
        self.step(ds, indices, cfg, step_seed, targets, true)
    }

    /// Loss breakdown of a step with frozen parameters.
    pub fn dry_run(&self, ds: &Dataset, indices: &[usize], cfg: &TrainConfig, step_seed: u64) -> Result<StepLosses> {
        let mut frozen = self.clone();
        Ok(frozen.step(ds, indices, cfg, step_seed, None, false)?.0)
    }

    /// All tensors needed to resume: parameters, batchnorm buffers,
    /// centroids, optimizer moments and counters.
    pub fn checkpoint_tensors(&self, config_hash: u64) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        for (k, v) in &self.encoder.params {
            out.push((format!("param.{k}"), v.clone()));
        }
        for (k, v) in &self.encoder.buffers {
            out.push((format!("buffer.{k}"), v.clone()));
        }
        if let Some(c) = &self.clusters {
            out.push((CENTROIDS.to_string(), c.centroids().clone()));
        }
        for (k, v) in &self.adam.state.m {
            out.push((format!("adam.m.{k}"), v.clone()));
        }
        for (k, v) in &self.adam.state.v {
            out.push((format!("adam.v.{k}"), v.clone()));
        }
        out.push(("adam.t".into(), Tensor::scalar(self.adam.state.t as f64)));
        out.push(("epoch".into(), Tensor::scalar(self.epoch as f64)));
        let hash_bytes = config_hash.to_le_bytes().iter().map(|&b| b as f64).collect();
        out.push(("config_hash".into(), Tensor::vector(hash_bytes)));
        out
    }

    pub fn save(&self, path: &Path, config_hash: u64) -> Result<()> {
        let items = self.checkpoint_tensors(config_hash);
        checkpoint::write_tensors(path, items.iter().map(|(k, t)| (k.as_str(), t)))
    }

    /// Restores a model from checkpoint tensors; returns it with the stored
    /// config hash.
    pub fn from_checkpoint(
        config: EncoderConfig,
        optimizer: AdamConfig,
        items: Vec<(String, Tensor)>,
    ) -> Result<(Model, u64)> {
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        let mut centroids = None;
        let (mut t, mut epoch, mut hash) = (None, None, None);
        for (name, tensor) in items {
            if let Some(k) = name.strip_prefix("param.") {
                params.insert(k.to_string(), tensor);
            } else if let Some(k) = name.strip_prefix("buffer.") {
                buffers.insert(k.to_string(), tensor);
            } else if let Some(k) = name.strip_prefix("adam.m.") {
                m.insert(k.to_string(), tensor);
            } else if let Some(k) = name.strip_prefix("adam.v.") {
                v.insert(k.to_string(), tensor);
            } else if name == CENTROIDS {
                centroids = Some(tensor);
            } else if name == "adam.t" {
                t = Some(tensor.item()? as u64);
            } else if name == "epoch" {
                epoch = Some(tensor.item()? as usize);
            } else if name == "config_hash" {
                if tensor.len() != 8 {
                    return Err(Error::invalid("config_hash must hold 8 bytes"));
                }
                let bytes: Vec<u8> = tensor.data().iter().map(|&b| b as u8).collect();
                hash = Some(u64::from_le_bytes(bytes.try_into().expect("8 bytes")));
            } else {
                return Err(Error::invalid(format!("unexpected checkpoint entry `{name}`")));
            }
        }
        let missing = |what: &str| Error::invalid(format!("checkpoint lacks `{what}`"));
        let encoder = Encoder::from_parts(config, params, buffers)?;
        let mut model = Model::new(encoder, optimizer);
        model.clusters = centroids.map(|c| ClusterState::new(c, 1.0)).transpose()?;
        model.adam.state.m = m;
        model.adam.state.v = v;
        model.adam.state.t = t.ok_or_else(|| missing("adam.t"))?;
        model.epoch = epoch.ok_or_else(|| missing("epoch"))?;
        Ok((model, hash.ok_or_else(|| missing("config_hash"))?))
    }

    pub fn load(path: &Path, config: EncoderConfig, optimizer: AdamConfig) -> Result<(Model, u64)> {
        Model::from_checkpoint(config, optimizer, checkpoint::read_tensors(path)?)
    }
}

/// Mean loss components over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub contrastive: f64,
    pub clustering: f64,
    pub total: f64,
    pub wall_seconds: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,contrastive_loss,clustering_loss,total_loss,wall_seconds";

pub fn loss_csv(rows: &[EpochRow]) -> String {
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.contrastive, r.clustering, r.total, r.wall_seconds
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: Model,
    pub history: Vec<EpochRow>,
}

/// Where `fit` writes its artifacts.
#[derive(Debug, Clone, Copy)]
pub struct FitArtifacts<'a> {
    pub dir: &'a Path,
    pub config_hash: u64,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "losses.csv";

/// Builds the encoder, initializes centroids by k-means on the initial
/// embeddings and runs `cfg.epochs` epochs of seeded shuffled steps. With
/// artifacts, writes the final checkpoint and loss CSV (and intermediate
/// checkpoints every `checkpoint_every` epochs).
pub fn fit(
    ds: &Dataset,
    encoder: EncoderConfig,
    cfg: &TrainConfig,
    artifacts: Option<FitArtifacts<'_>>,
) -> Result<FitOutput> {
    cfg.validate()?;
    if ds.len() < 2 {
        return Err(Error::invalid(format!("training needs >= 2 samples, got {}", ds.len())));
    }
    let started = Instant::now();
    if let Some(a) = artifacts {
        std::fs::create_dir_all(a.dir)?;
    }
    let enc = Encoder::new(encoder, derive_seed(&[cfg.seed, 1]))?;
    let mut model = Model::new(enc, cfg.optimizer);
    let k = if cfg.clusters == 0 { ds.class_count() } else { cfg.clusters };
    model.init_clusters(ds, k, derive_seed(&[cfg.seed, 2]))?;

    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 3]));
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let targets = match cfg.target_refresh {
            TargetRefresh::PerStep => None,
            TargetRefresh::PerEpoch => {
                let emb = model.embed_dataset(ds)?;
                Some(target_distribution(&soft_assign(&emb, model.cluster_state()?)?)?)
            }
        };
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        let mut steps = 0;
        for (s, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let seed = derive_seed(&[cfg.seed, 4, epoch as u64, s as u64]);
            let (l, _) = model.train_step(ds, chunk, cfg, seed, targets.as_ref())?;
            sums[0] += l.contrastive;
            sums[1] += l.clustering;
            sums[2] += l.total;
            steps += 1;
        }
        model.epoch = epoch;
        let n = steps.max(1) as f64;
        history.push(EpochRow {
            epoch,
            contrastive: sums[0] / n,
            clustering: sums[1] / n,
            total: sums[2] / n,
            wall_seconds: if cfg.record_wall_time { started.elapsed().as_secs_f64() } else { 0.0 },
        });
        if let Some(a) = artifacts {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch < cfg.epochs {
                model.save(&a.dir.join(format!("checkpoint_epoch{epoch:04}.bin")), a.config_hash)?;
            }
        }
    }
    if let Some(a) = artifacts {
        model.save(&a.dir.join(CHECKPOINT_FILE), a.config_hash)?;
        std::fs::write(a.dir.join(LOSS_FILE), loss_csv(&history))?;
    }
    Ok(FitOutput { model, history })
}

#[cfg(test)]
mod tests;
