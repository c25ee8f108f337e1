//! Static-intensity datasets and the synthetic Gaussian-blob generator.
//!
//! Binary layout (little-endian): header `count: u64, width: u64, classes: u64`,
//! then `count` records of `width` x `f32` intensities followed by a `u32` label.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    width: usize,
    classes: usize,
    /// Row-major `[count x width]`, every value in `[0, 1]`.
    intensities: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(width: usize, classes: usize, intensities: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if width == 0 || classes == 0 {
            return Err(Error::InvalidDimensions("dataset width and classes must be >= 1".into()));
        }
        if intensities.len() != labels.len() * width {
            return Err(Error::InvalidDimensions(format!(
                "{} intensities for {} samples of width {width}",
                intensities.len(),
                labels.len()
            )));
        }
        if let Some(bad) = intensities.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!("intensity {bad} outside [0, 1]")));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidParameter(format!("label {bad} >= class count {classes}")));
        }
        Ok(Self { width, classes, intensities, labels })
    }

    /// `count` samples split evenly across `classes` Gaussian blobs. Class centres are
    /// drawn uniformly from `[0.15, 0.85]^width`; samples add `N(0, spread)` noise per
    /// coordinate and are clamped to `[0, 1]`.
    pub fn blobs(count: usize, width: usize, classes: usize, spread: f32, seed: u64) -> Result<Self> {
        if !spread.is_finite() || spread < 0.0 {
            return Err(Error::InvalidParameter(format!("blob spread must be >= 0, got {spread}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centre = Uniform::new_inclusive(0.15f32, 0.85);
        let centres: Vec<f32> = (0..classes * width).map(|_| centre.sample(&mut rng)).collect();
        let noise = Normal::new(0.0f32, spread).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let mut intensities = Vec::with_capacity(count * width);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let label = i % classes;
            labels.push(label);
            for n in 0..width {
                let v = centres[label * width + n] + noise.sample(&mut rng);
                intensities.push(v.clamp(0.0, 1.0));
            }
        }
        Self::new(width, classes, intensities, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.intensities[i * self.width..(i + 1) * self.width]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Splits off the last `round(len * test_fraction)` samples as a test set.
    pub fn split(&self, test_fraction: f32) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::InvalidParameter(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let n_test = (self.len() as f32 * test_fraction).round() as usize;
        let cut = self.len() - n_test;
        let part = |lo: usize, hi: usize| Dataset {
            width: self.width,
            classes: self.classes,
            intensities: self.intensities[lo * self.width..hi * self.width].to_vec(),
            labels: self.labels[lo..hi].to_vec(),
        };
        Ok((part(0, cut), part(cut, self.len())))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for v in [self.len(), self.width, self.classes] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for i in 0..self.len() {
            for v in self.sample(i) {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&(self.labels[i] as u32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0usize; 3];
        for h in header.iter_mut() {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            *h = usize::try_from(u64::from_le_bytes(buf))
                .map_err(|_| Error::Format("header value exceeds usize".into()))?;
        }
        let [count, width, classes] = header;
        let record = width
            .checked_mul(4)
            .and_then(|b| b.checked_add(4))
            .ok_or_else(|| Error::Format("record size overflow".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if Some(bytes.len()) != count.checked_mul(record) {
            return Err(Error::Format(format!(
                "payload has {} bytes, header implies {count} records of {record}",
                bytes.len()
            )));
        }
        let mut intensities = Vec::with_capacity(count * width);
        let mut labels = Vec::with_capacity(count);
        for rec in bytes.chunks_exact(record) {
            let (vals, label) = rec.split_at(width * 4);
            intensities.extend(vals.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
            labels.push(u32::from_le_bytes([label[0], label[1], label[2], label[3]]) as usize);
        }
        Self::new(width, classes, intensities, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_balanced_and_in_range() {
        let d = Dataset::blobs(100, 8, 2, 0.1, 1).unwrap();
        assert_eq!(d.len(), 100);
        assert_eq!(d.labels().iter().filter(|&&l| l == 0).count(), 50);
        for i in 0..d.len() {
            assert!(d.sample(i).iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(d, Dataset::blobs(100, 8, 2, 0.1, 1).unwrap());
    }

    #[test]
    fn binary_round_trip() {
        let d = Dataset::blobs(7, 3, 3, 0.2, 5).unwrap();
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 24 + 7 * (3 * 4 + 4));
        assert_eq!(&buf[0..8], &7u64.to_le_bytes());
        assert_eq!(Dataset::read_from(&buf[..]).unwrap(), d);
        assert!(Dataset::read_from(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn split_keeps_order() {
        let d = Dataset::blobs(10, 2, 2, 0.1, 0).unwrap();
        let (train, test) = d.split(0.2).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        assert_eq!(test.sample(1), d.sample(9));
        assert!(d.split(1.0).is_err());
    }

    #[test]
    fn validation() {
        assert!(Dataset::new(2, 2, vec![0.0, 1.5], vec![0]).is_err());
        assert!(Dataset::new(2, 2, vec![0.0, 0.5], vec![2]).is_err());
        assert!(Dataset::new(2, 2, vec![0.0], vec![0]).is_err());
    }
}
