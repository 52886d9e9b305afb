//! Deep-embedded-clustering objective.
//!
//! Embeddings are softly assigned to `K` centroids with a Student-t kernel,
//! the assignments are sharpened into a target distribution normalized by
//! cluster frequency, and the KL divergence of the target from the soft
//! assignments is the clustering loss. Centroids start from k-means.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    centroids: Tensor,
    alpha: f64,
}

impl ClusterState {
    pub fn new(centroids: Tensor, alpha: f64) -> Result<Self> {
        if centroids.rank() != 2 || centroids.shape()[0] < 2 {
            return Err(Error::invalid(format!(
                "need a K x d centroid matrix with K >= 2, got {:?}",
                centroids.shape()
            )));
        }
        if !(alpha > 0.0) {
            return Err(Error::invalid(format!("alpha must be > 0, got {alpha}")));
        }
        Ok(ClusterState { centroids, alpha })
    }

    pub fn centroids(&self) -> &Tensor {
        &self.centroids
    }

    pub fn set_centroids(&mut self, centroids: Tensor) -> Result<()> {
        if centroids.shape() != self.centroids.shape() {
            return Err(Error::shape("set_centroids", self.centroids.shape(), centroids.shape()));
        }
        self.centroids = centroids;
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn k(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centroids.shape()[1]
    }
}

/// Row-stochastic `N x K` soft assignments `q_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment(pub Tensor);

/// Row-stochastic `N x K` sharpened targets `p_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution(pub Tensor);

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Result of a full k-means run.
#[derive(Debug, Clone)]
pub struct KMeans {
    pub centroids: Tensor,
    pub labels: Vec<usize>,
    pub iterations: usize,
}

const MAX_ITER: usize = 300;
const SHIFT_TOL: f64 = 1e-6;

/// Lloyd's algorithm with k-means++ seeding. Deterministic for a given seed.
/// Final centroids are sorted lexicographically by coordinates and labels
/// follow that order.
pub fn kmeans(points: &Tensor, k: usize, seed: u64) -> Result<KMeans> {
    if points.rank() != 2 {
        return Err(Error::invalid(format!("k-means needs an N x d matrix, got {:?}", points.shape())));
    }
    let (n, d) = (points.shape()[0], points.shape()[1]);
    if k == 0 || n < k {
        return Err(Error::invalid(format!("k-means needs N >= K >= 1, got N={n}, K={k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // Guard against rounding landing on an already chosen point.
            if d2[pick] == 0.0 {
                pick = (0..n).rev().find(|&i| d2[i] > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // Remaining points all coincide with chosen centroids.
            (0..n).find(|i| !chosen.contains(i)).expect("n >= k")
        };
        chosen.push(next);
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    let mut centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| points.row(i).to_vec()).collect();

    let mut labels = vec![0usize; n];
    let mut iterations = 0;
    for _ in 0..MAX_ITER {
        iterations += 1;
        for (i, label) in labels.iter_mut().enumerate() {
            *label = nearest(points.row(i), &centroids).0;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        let mut updated: Vec<Vec<f64>> = Vec::with_capacity(k);
        for c in 0..k {
            if counts[c] > 0 {
                updated.push(sums[c].iter().map(|s| s / counts[c] as f64).collect());
            } else {
                updated.push(centroids[c].clone());
            }
        }
        // Empty clusters are re-seeded at the point farthest from its centroid.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(points.row(a), &updated[labels[a]]);
                        let db = sq_dist(points.row(b), &updated[labels[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("n >= 1");
                updated[c] = points.row(far).to_vec();
                labels[far] = c;
            }
        }
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        if shift < SHIFT_TOL {
            break;
        }
    }
    for (i, label) in labels.iter_mut().enumerate() {
        *label = nearest(points.row(i), &centroids).0;
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        centroids[a]
            .iter()
            .zip(&centroids[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut rank = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    let sorted: Vec<Vec<f64>> = order.iter().map(|&c| centroids[c].clone()).collect();
    Ok(KMeans {
        centroids: Tensor::from_rows(&sorted)?,
        labels: labels.into_iter().map(|l| rank[l]).collect(),
        iterations,
    })
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let dist = sq_dist(p, mu);
        if dist < best.1 {
            best = (c, dist);
        }
    }
    best
}

/// Centroid initialization from k-means on the embeddings, with `alpha = 1`.
pub fn kmeans_init(embeddings: &Tensor, k: usize, seed: u64) -> Result<ClusterState> {
    let km = kmeans(embeddings, k, seed)?;
    ClusterState::new(km.centroids, 1.0)
}

/// Records the Student-t soft assignments of `z: [N, d]` to `mu: [K, d]`.
pub fn soft_assign_graph(g: &mut Graph, z: NodeId, mu: NodeId, alpha: f64) -> Result<NodeId> {
    let (zs, ms) = (g.shape(z).to_vec(), g.shape(mu).to_vec());
    if zs.len() != 2 || ms.len() != 2 || zs[1] != ms[1] {
        return Err(Error::shape("soft_assign", &zs, &ms));
    }
    let (n, k, d) = (zs[0], ms[0], zs[1]);
    let z3 = g.reshape(z, &[n, 1, d])?;
    let m3 = g.reshape(mu, &[1, k, d])?;
    let diff = g.sub(z3, m3)?;
    let sq = g.mul(diff, diff)?;
    let dist = g.sum_axis(sq, 2)?;
    let scaled = g.scale(dist, 1.0 / alpha)?;
    let base = g.add_scalar(scaled, 1.0)?;
    let kernel = g.powf(base, -(alpha + 1.0) / 2.0)?;
    let rowsum = g.sum_axis(kernel, 1)?;
    let rowsum = g.reshape(rowsum, &[n, 1])?;
    g.div(kernel, rowsum)
}

pub fn soft_assign(embeddings: &Tensor, state: &ClusterState) -> Result<SoftAssignment> {
    let mut g = Graph::new();
    let z = g.constant(embeddings.clone());
    let mu = g.constant(state.centroids.clone());
    let q = soft_assign_graph(&mut g, z, mu, state.alpha)?;
    Ok(SoftAssignment(g.value(q).clone()))
}

/// `p_ij = (q_ij^2 / u_j) / sum_l (q_il^2 / u_l)` with `u_j = sum_i q_ij`.
pub fn target_distribution(q: &SoftAssignment) -> Result<TargetDistribution> {
    let q = &q.0;
    if q.rank() != 2 {
        return Err(Error::invalid(format!("soft assignments must be N x K, got {:?}", q.shape())));
    }
    let (n, k) = (q.shape()[0], q.shape()[1]);
    let mut freq = vec![0.0; k];
    for row in q.rows() {
        for (f, v) in freq.iter_mut().zip(row) {
            *f += v;
        }
    }
    if let Some(j) = freq.iter().position(|&u| u <= 0.0) {
        return Err(Error::domain(
            "target_distribution",
            format!("cluster {j} has zero frequency"),
        ));
    }
    let mut p = Vec::with_capacity(n * k);
    for row in q.rows() {
        let w: Vec<f64> = row.iter().zip(&freq).map(|(q, u)| q * q / u).collect();
        let s: f64 = w.iter().sum();
        p.extend(w.iter().map(|x| x / s));
    }
    Ok(TargetDistribution(Tensor::new(vec![n, k], p)?))
}

/// `sum_ij p_ij log p_ij`, with `0 log 0 = 0`.
fn neg_entropy(p: &Tensor) -> f64 {
    p.data().iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum()
}

/// `KL(P || Q) = sum_ij p_ij log(p_ij / q_ij)`. For row-stochastic inputs
/// this is nonnegative; a negative sum is rounding and is returned as 0.
pub fn kl_loss(p: &TargetDistribution, q: &SoftAssignment) -> Result<f64> {
    let (p, q) = (&p.0, &q.0);
    if p.shape() != q.shape() {
        return Err(Error::shape("kl_loss", p.shape(), q.shape()));
    }
    let mut total = 0.0;
    for (i, (&pv, &qv)) in p.data().iter().zip(q.data()).enumerate() {
        if pv == 0.0 {
            continue;
        }
        if qv <= 0.0 {
            return Err(Error::domain("kl_loss", format!("q is zero where p > 0 at entry {i}")));
        }
        total += pv * (pv / qv).ln();
    }
    Ok(total.max(0.0))
}

/// Records `KL(P || Q)` with `P` as a constant.
pub fn kl_graph(g: &mut Graph, p: &TargetDistribution, q: NodeId) -> Result<NodeId> {
    if g.shape(q) != p.0.shape() {
        return Err(Error::shape("kl_loss", p.0.shape(), g.shape(q)));
    }
    let pn = g.constant(p.0.clone());
    let logq = g.log(q)?;
    let cross = g.mul(pn, logq)?;
    let cross = g.sum(cross)?;
    let neg = g.neg(cross)?;
    g.add_scalar(neg, neg_entropy(&p.0))
}

/// Clustering loss with the target recomputed from the current assignments
/// and held fixed; returns the loss and its gradients w.r.t. the embeddings
/// and the centroids.
pub fn clustering_loss_with_grad(
    embeddings: &Tensor,
    state: &ClusterState,
) -> Result<(f64, Tensor, Tensor)> {
    let mut g = Graph::new();
    let z = g.param(embeddings.clone());
    let mu = g.param(state.centroids.clone());
    let q = soft_assign_graph(&mut g, z, mu, state.alpha)?;
    let p = target_distribution(&SoftAssignment(g.value(q).clone()))?;
    let loss = kl_graph(&mut g, &p, q)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item()?, grads.get(z), grads.get(mu)))
}
