//! Datasets: long-tailed Gaussian blobs, CIFAR-10 binary batches, and the
//! view augmentations used to form positive pairs.

pub mod augment;
pub mod cifar;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment_image, augment_vector, AugmentConfig, VectorAugment};
pub use cifar::{parse_cifar10, serialize_cifar10, CifarRaw};

/// Per-channel standardization `x' = (x - mean) / std` applied to stored
/// image samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelNorm {
    fn apply(&self, img: &mut Tensor, inverse: bool) {
        let c = self.mean.len();
        let plane = img.len() / c;
        for (ch, chunk) in img.data_mut().chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            for v in chunk {
                *v = if inverse { *v * s + m } else { (*v - m) / s };
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, ...sample_shape]`.
    samples: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    norm: Option<ChannelNorm>,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if samples.rank() < 2 || samples.shape()[0] != labels.len() {
            return Err(Error::invalid(format!(
                "samples {:?} do not match {} labels",
                samples.shape(),
                labels.len()
            )));
        }
        if class_count < 1 {
            return Err(Error::invalid("class_count must be >= 1"));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::invalid(format!("label {l} out of range for {class_count} classes")));
        }
        if !samples.all_finite() {
            return Err(Error::NonFinite("dataset samples".into()));
        }
        Ok(Dataset {
            samples,
            labels,
            class_count,
            norm: None,
        })
    }

    /// Attaches the standardization that was applied to image samples.
    pub fn with_norm(mut self, norm: ChannelNorm) -> Result<Self> {
        if !self.is_image() || norm.mean.len() != self.samples.shape()[1] || norm.std.len() != norm.mean.len() {
            return Err(Error::invalid("channel norm does not match the image channels"));
        }
        self.norm = Some(norm);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn norm(&self) -> Option<&ChannelNorm> {
        self.norm.as_ref()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    /// Samples of shape `[C, H, W]`.
    pub fn is_image(&self) -> bool {
        self.samples.rank() == 4
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn sample(&self, i: usize) -> Result<Tensor> {
        self.samples.index_first(i)
    }

    /// Stacked samples at `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        self.samples.select_first(indices)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            samples: self.batch(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            norm: self.norm.clone(),
        })
    }

    /// Image sample in un-standardized pixel space.
    pub fn pixels(&self, i: usize) -> Result<Tensor> {
        let mut img = self.sample(i)?;
        if let Some(n) = &self.norm {
            n.apply(&mut img, true);
        }
        Ok(img)
    }

    /// Re-applies the dataset's standardization to a pixel-space image.
    pub fn standardize(&self, mut img: Tensor) -> Tensor {
        if let Some(n) = &self.norm {
            n.apply(&mut img, false);
        }
        img
    }

    /// The same images standardized with `norm` instead of the current
    /// statistics.
    pub fn renormalized(&self, norm: &ChannelNorm) -> Result<Dataset> {
        let mut data = Vec::with_capacity(self.samples.len());
        for i in 0..self.len() {
            let mut img = self.pixels(i)?;
            norm.apply(&mut img, false);
            data.extend_from_slice(img.data());
        }
        let samples = Tensor::new(self.samples.shape().to_vec(), data)?;
        Dataset::new(samples, self.labels.clone(), self.class_count)?.with_norm(norm.clone())
    }

    /// Writes the samples (and standardization) as a tensor container at
    /// `stem.bin` and the labels as `stem.labels.csv`.
    pub fn export(&self, stem: &Path) -> Result<()> {
        let classes = Tensor::scalar(self.class_count as f64);
        let mut items: Vec<(&str, Tensor)> = vec![("class_count", classes), ("samples", self.samples.clone())];
        if let Some(n) = &self.norm {
            items.push(("norm.mean", Tensor::vector(n.mean.clone())));
            items.push(("norm.std", Tensor::vector(n.std.clone())));
        }
        checkpoint::write_tensors(&with_ext(stem, "bin"), items.iter().map(|(k, t)| (*k, t)))?;
        let mut csv = String::from("index,label\n");
        for (i, l) in self.labels.iter().enumerate() {
            csv.push_str(&format!("{i},{l}\n"));
        }
        std::fs::write(with_ext(stem, "labels.csv"), csv)?;
        Ok(())
    }

    pub fn import(stem: &Path) -> Result<Dataset> {
        let items = checkpoint::read_tensors(&with_ext(stem, "bin"))?;
        let get = |name: &str| items.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone());
        let missing = |name: &str| Error::invalid(format!("dataset container lacks `{name}`"));
        let samples = get("samples").ok_or_else(|| missing("samples"))?;
        let classes = get("class_count").ok_or_else(|| missing("class_count"))?.item()? as usize;
        let csv = std::fs::read_to_string(with_ext(stem, "labels.csv"))?;
        let mut labels = Vec::new();
        for (line_no, line) in csv.lines().enumerate().skip(1) {
            let (idx, label) = line.split_once(',').ok_or_else(|| Error::invalid(format!("labels line {}: expected `index,label`", line_no + 1)))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::invalid(format!("labels line {}: {e}", line_no + 1)))
            };
            if parse(idx)? != labels.len() {
                return Err(Error::invalid(format!("labels line {}: indices out of order", line_no + 1)));
            }
            labels.push(parse(label)?);
        }
        let ds = Dataset::new(samples, labels, classes)?;
        match (get("norm.mean"), get("norm.std")) {
            (Some(m), Some(s)) => ds.with_norm(ChannelNorm {
                mean: m.into_data(),
                std: s.into_data(),
            }),
            _ => Ok(ds),
        }
    }
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongTailSpec {
    pub class_count: usize,
    pub max_per_class: usize,
    /// Head-to-tail count ratio.
    pub imbalance_ratio: f64,
}

impl LongTailSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 || self.max_per_class < 1 || !(self.imbalance_ratio >= 1.0) {
            return Err(Error::invalid(format!(
                "long-tail spec needs C >= 2, n_max >= 1, r >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Exponential profile `n_c = round(n_max * r^(-c / (C - 1)))`, rounding
/// half away from zero, never below 1.
pub fn long_tail_counts(spec: &LongTailSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let last = (spec.class_count - 1) as f64;
    Ok((0..spec.class_count)
        .map(|c| {
            let n = spec.max_per_class as f64 * spec.imbalance_ratio.powf(-(c as f64) / last);
            (n.round() as usize).max(1)
        })
        .collect())
}

/// Isotropic Gaussian blobs: `counts[c]` samples around row `c` of `means`,
/// ordered by class.
pub fn gen_blobs(means: &Tensor, sigma: f64, counts: &[usize], seed: u64) -> Result<Dataset> {
    if means.rank() != 2 || means.shape()[0] != counts.len() {
        return Err(Error::invalid(format!(
            "need one mean row per class: means {:?}, {} counts",
            means.shape(),
            counts.len()
        )));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(format!("sigma {sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = means.shape()[1];
    let total: usize = counts.iter().sum();
    let mut data = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    for (c, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            data.extend(means.row(c).iter().map(|m| m + normal.sample(&mut rng)));
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![total, d], data)?, labels, counts.len())
}

/// Class means on the first axis spaced `spacing` apart and centred at zero:
/// `(c - (C - 1) / 2) * spacing` in coordinate 0, zeros elsewhere.
pub fn line_means(classes: usize, dim: usize, spacing: f64) -> Result<Tensor> {
    if classes == 0 || dim == 0 {
        return Err(Error::invalid("need classes >= 1 and dim >= 1"));
    }
    let mut t = Tensor::zeros(&[classes, dim]);
    for c in 0..classes {
        t.data_mut()[c * dim] = (c as f64 - (classes - 1) as f64 / 2.0) * spacing;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn long_tail_examples() {
        let spec = LongTailSpec {
            class_count: 10,
            max_per_class: 5000,
            imbalance_ratio: 100.0,
        };
        let counts = long_tail_counts(&spec).unwrap();
        assert_eq!(counts[0], 5000);
        assert_eq!(counts[9], 50);
        assert_eq!(counts[5], 387);
        let flat = LongTailSpec {
            imbalance_ratio: 1.0,
            ..spec
        };
        assert!(long_tail_counts(&flat).unwrap().iter().all(|&c| c == 5000));
        let tiny = LongTailSpec {
            class_count: 3,
            max_per_class: 1,
            imbalance_ratio: 1000.0,
        };
        assert_eq!(long_tail_counts(&tiny).unwrap(), vec![1, 1, 1]);
        assert!(long_tail_counts(&LongTailSpec { class_count: 1, ..spec }).is_err());
    }

    #[test]
    fn tail_rounding_can_exceed_two_percent() {
        // n_max / r = 10.49 rounds to a tail of 10.
        let spec = LongTailSpec {
            class_count: 2,
            max_per_class: 1049,
            imbalance_ratio: 100.0,
        };
        let counts = long_tail_counts(&spec).unwrap();
        assert_eq!(counts, vec![1049, 10]);
        assert!((104.9f64 / 100.0 - 1.0) > 0.02);
    }

    #[test]
    fn blobs_sigma_zero_and_determinism() {
        let means = Tensor::from_rows(&[[3.0, 0.0], [-3.0, 0.0]]).unwrap();
        let ds = gen_blobs(&means, 0.0, &[4, 2], 1).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.sample(i).unwrap().data(), means.row(ds.labels()[i]));
        }
        assert_eq!(ds.class_counts(), vec![4, 2]);
        let a = gen_blobs(&means, 0.5, &[10, 10], 7).unwrap();
        let b = gen_blobs(&means, 0.5, &[10, 10], 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn blobs_linearly_separable() {
        let means = Tensor::from_rows(&[[3.0, 0.0], [-3.0, 0.0]]).unwrap();
        let ds = gen_blobs(&means, 0.5, &[100, 100], 3).unwrap();
        // Separator: the perpendicular bisector x = 0.
        let correct = (0..ds.len())
            .filter(|&i| (ds.samples().row(i)[0] > 0.0) == (ds.labels()[i] == 0))
            .count();
        assert!(correct as f64 / 200.0 >= 0.99);
    }

    #[test]
    fn export_import_round_trip() {
        let dir = std::env::temp_dir().join(format!("debclust-ds-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let means = line_means(3, 2, 4.0).unwrap();
        let ds = gen_blobs(&means, 0.3, &[5, 3, 2], 2).unwrap();
        ds.export(&dir.join("blobs")).unwrap();
        assert_eq!(Dataset::import(&dir.join("blobs")).unwrap(), ds);

        let img = Dataset::new(Tensor::zeros(&[2, 1, 4, 4]), vec![0, 1], 2)
            .unwrap()
            .with_norm(ChannelNorm {
                mean: vec![0.25],
                std: vec![0.5],
            })
            .unwrap();
        img.export(&dir.join("img")).unwrap();
        assert_eq!(Dataset::import(&dir.join("img")).unwrap(), img);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(Tensor::zeros(&[2, 3]), vec![0], 2).is_err());
        assert!(Dataset::new(Tensor::zeros(&[2, 3]), vec![0, 2], 2).is_err());
    }

    proptest! {
        #[test]
        fn long_tail_profile(c in 2usize..12, n_max in 1usize..6000, r in 1.0f64..200.0) {
            let spec = LongTailSpec { class_count: c, max_per_class: n_max, imbalance_ratio: r };
            let counts = long_tail_counts(&spec).unwrap();
            prop_assert_eq!(counts.len(), c);
            for w in counts.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            prop_assert!(counts.iter().all(|&n| n >= 1));
            // The tail count carries a rounding error of at most half a
            // sample, so the ratio is off by at most 0.5 / tail relative.
            let tail = n_max as f64 / r;
            if tail >= 10.0 {
                let ratio = counts[0] as f64 / counts[c - 1] as f64;
                let rel = (ratio / r - 1.0).abs();
                prop_assert!(rel <= 0.5 / (tail - 0.5) + 1e-12);
                if tail >= 25.5 {
                    prop_assert!(rel <= 0.02);
                }
            }
        }
    }
}
