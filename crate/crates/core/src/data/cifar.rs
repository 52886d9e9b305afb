//! CIFAR-10 binary batch format: records of one label byte followed by
//! 3072 pixel bytes (32x32 red plane, then green, then blue, row-major).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{ChannelNorm, Dataset};

pub const SIDE: usize = 32;
pub const PIXELS: usize = 3 * SIDE * SIDE;
pub const RECORD: usize = 1 + PIXELS;
/// Added to each channel variance before taking the square root.
pub const STD_EPS: f64 = 1e-8;

/// Undecoded records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarRaw {
    pub labels: Vec<u8>,
    /// `labels.len() * 3072` pixel bytes.
    pub pixels: Vec<u8>,
}

impl CifarRaw {
    pub fn parse(bytes: &[u8]) -> Result<CifarRaw> {
        let full = bytes.len() / RECORD * RECORD;
        if full != bytes.len() {
            return Err(Error::Format {
                offset: full,
                msg: format!("truncated record: {} of {RECORD} bytes", bytes.len() - full),
            });
        }
        let mut labels = Vec::with_capacity(full / RECORD);
        let mut pixels = Vec::with_capacity(full / RECORD * PIXELS);
        for (r, rec) in bytes.chunks_exact(RECORD).enumerate() {
            if rec[0] > 9 {
                return Err(Error::Format {
                    offset: r * RECORD,
                    msg: format!("label byte {} exceeds 9", rec[0]),
                });
            }
            labels.push(rec[0]);
            pixels.extend_from_slice(&rec[1..]);
        }
        Ok(CifarRaw { labels, pixels })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.labels.len() * RECORD);
        for (l, px) in self.labels.iter().zip(self.pixels.chunks_exact(PIXELS)) {
            out.push(*l);
            out.extend_from_slice(px);
        }
        out
    }

    /// Pixels scaled to `[0, 1]` and standardized per channel with the
    /// records' own statistics.
    pub fn to_dataset(&self) -> Result<Dataset> {
        let n = self.labels.len();
        let plane = SIDE * SIDE;
        let mut mean = [0.0; 3];
        let mut sq = [0.0; 3];
        for img in self.pixels.chunks_exact(PIXELS) {
            for (c, ch) in img.chunks_exact(plane).enumerate() {
                for &p in ch {
                    let v = p as f64 / 255.0;
                    mean[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (n * plane).max(1) as f64;
        let mut std = [0.0; 3];
        for c in 0..3 {
            mean[c] /= count;
            let var = (sq[c] / count - mean[c] * mean[c]).max(0.0);
            std[c] = (var + STD_EPS).sqrt();
        }
        let mut data = Vec::with_capacity(n * PIXELS);
        for img in self.pixels.chunks_exact(PIXELS) {
            for (c, ch) in img.chunks_exact(plane).enumerate() {
                data.extend(ch.iter().map(|&p| (p as f64 / 255.0 - mean[c]) / std[c]));
            }
        }
        let samples = Tensor::new(vec![n, 3, SIDE, SIDE], data)?;
        Dataset::new(samples, self.labels.iter().map(|&l| l as usize).collect(), 10)?.with_norm(ChannelNorm {
            mean: mean.to_vec(),
            std: std.to_vec(),
        })
    }

    /// Inverse of [`CifarRaw::to_dataset`]: undoes the standardization and
    /// rounds back to bytes.
    pub fn from_dataset(ds: &Dataset) -> Result<CifarRaw> {
        if ds.sample_shape() != [3, SIDE, SIDE] || ds.class_count() > 10 {
            return Err(Error::invalid(format!(
                "not a CIFAR-10 shaped dataset: samples {:?}, {} classes",
                ds.sample_shape(),
                ds.class_count()
            )));
        }
        let mut pixels = Vec::with_capacity(ds.len() * PIXELS);
        for i in 0..ds.len() {
            let img = ds.pixels(i)?;
            pixels.extend(img.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        }
        Ok(CifarRaw {
            labels: ds.labels().iter().map(|&l| l as u8).collect(),
            pixels,
        })
    }
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    CifarRaw::parse(bytes)?.to_dataset()
}

pub fn serialize_cifar10(ds: &Dataset) -> Result<Vec<u8>> {
    Ok(CifarRaw::from_dataset(ds)?.to_bytes())
}
