//! Time-major activation storage.
//!
//! Every temporal quantity in the engine (inputs, spikes, membrane potentials and
//! their gradients) lives in a [`TimeMajorTensor`]: a dense `[T x B x N]` block of
//! `f32` where all values of time step `t` are contiguous and precede those of
//! `t + 1`. A layer's full time axis is therefore one linear sweep of memory.
//!
//! Slicing only happens on time boundaries, so a slice is itself a contiguous
//! block and `concat_time` of adjacent slices is a plain append.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{shape_err, Error, Result};

/// Dense `[t_len x batch x width]` block of `f32`, time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeMajorTensor {
    t_len: usize,
    batch: usize,
    width: usize,
    data: Vec<f32>,
}

fn checked_len(t_len: usize, batch: usize, width: usize) -> Result<usize> {
    if t_len == 0 || batch == 0 || width == 0 {
        return Err(Error::InvalidDimensions(format!(
            "all dimensions must be >= 1, got {t_len} x {batch} x {width}"
        )));
    }
    t_len
        .checked_mul(batch)
        .and_then(|n| n.checked_mul(width))
        // Keep byte offsets addressable too.
        .filter(|n| n.checked_mul(std::mem::size_of::<f32>()).is_some())
        .ok_or(Error::DimensionOverflow { t_len, batch, width })
}

impl TimeMajorTensor {
    pub fn zeros(t_len: usize, batch: usize, width: usize) -> Result<Self> {
        let len = checked_len(t_len, batch, width)?;
        Ok(Self { t_len, batch, width, data: vec![0.0; len] })
    }

    /// Wraps an existing flat buffer laid out as `t * batch * width + b * width + n`.
    pub fn from_vec(t_len: usize, batch: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let len = checked_len(t_len, batch, width)?;
        if data.len() != len {
            return Err(shape_err(format!("{len} elements"), format!("{} elements", data.len())));
        }
        Ok(Self { t_len, batch, width, data })
    }

    pub fn from_fn(
        t_len: usize,
        batch: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let len = checked_len(t_len, batch, width)?;
        let mut data = Vec::with_capacity(len);
        for t in 0..t_len {
            for b in 0..batch {
                for n in 0..width {
                    data.push(f(t, b, n));
                }
            }
        }
        Ok(Self { t_len, batch, width, data })
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of values in one time step (`batch * width`).
    pub fn step_len(&self) -> usize {
        self.batch * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Flat offset of element `(t, b, n)`.
    #[inline]
    pub fn index(&self, t: usize, b: usize, n: usize) -> usize {
        debug_assert!(t < self.t_len && b < self.batch && n < self.width);
        t * self.batch * self.width + b * self.width + n
    }

    #[inline]
    pub fn get(&self, t: usize, b: usize, n: usize) -> f32 {
        self.data[self.index(t, b, n)]
    }

    /// All `batch * width` values of time step `t`.
    pub fn step(&self, t: usize) -> &[f32] {
        let s = self.step_len();
        &self.data[t * s..(t + 1) * s]
    }

    pub(crate) fn step_mut(&mut self, t: usize) -> &mut [f32] {
        let s = self.step_len();
        &mut self.data[t * s..(t + 1) * s]
    }

    /// Copy of time steps `[t_lo, t_hi)`.
    pub fn time_slice(&self, t_lo: usize, t_hi: usize) -> Result<Self> {
        if t_lo >= t_hi || t_hi > self.t_len {
            return Err(Error::TimeRange { t_lo, t_hi, t_len: self.t_len });
        }
        let s = self.step_len();
        Ok(Self {
            t_len: t_hi - t_lo,
            batch: self.batch,
            width: self.width,
            data: self.data[t_lo * s..t_hi * s].to_vec(),
        })
    }

    /// Joins tensors along the time axis, preserving order.
    pub fn concat_time<'a, I>(parts: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a TimeMajorTensor>,
    {
        let mut iter = parts.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::InvalidDimensions("concat_time of zero parts".into()))?;
        let mut out = first.clone();
        for part in iter {
            out.append_time(part)?;
        }
        Ok(out)
    }

    pub(crate) fn append_time(&mut self, part: &TimeMajorTensor) -> Result<()> {
        if part.batch != self.batch || part.width != self.width {
            return Err(shape_err(
                format!("batch {} width {}", self.batch, self.width),
                format!("batch {} width {}", part.batch, part.width),
            ));
        }
        checked_len(self.t_len + part.t_len, self.batch, self.width)?;
        self.data.extend_from_slice(&part.data);
        self.t_len += part.t_len;
        Ok(())
    }

    /// Order-sensitive 64-bit digest of the raw bit patterns (FNV-1a).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for byte in v.to_bits().to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Writes the binary dump: three little-endian `u64` (t_len, batch, width)
    /// followed by the raw little-endian `f32` payload.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for dim in [self.t_len, self.batch, self.width] {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            *d = usize::try_from(u64::from_le_bytes(buf))
                .map_err(|_| Error::Format("dimension exceeds usize".into()))?;
        }
        let [t_len, batch, width] = dims;
        let len = checked_len(t_len, batch, width)?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != len * 4 {
            return Err(Error::Format(format!(
                "payload has {} bytes, header implies {}",
                bytes.len(),
                len * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { t_len, batch, width, data })
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
