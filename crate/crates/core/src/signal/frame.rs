use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frame length every model input is standardized to.
pub const STANDARD_FRAME_LENGTH: usize = 256;

/// One capture as a 2×T real matrix (row 0 = I, row 1 = Q) with its labels.
///
/// Samples are stored row-major as `f32`, which is also the payload encoding,
/// so persistence is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct IqFrame {
    samples: Vec<f32>,
    pub device: usize,
    pub domain: usize,
}

impl IqFrame {
    /// Builds a frame from separate I and Q rows.
    pub fn new(i: &[f32], q: &[f32], device: usize, domain: usize) -> Result<Self> {
        if i.len() != q.len() {
            return Err(Error::Shape(format!(
                "I row has {} samples, Q row has {}",
                i.len(),
                q.len()
            )));
        }
        let mut samples = Vec::with_capacity(2 * i.len());
        samples.extend_from_slice(i);
        samples.extend_from_slice(q);
        Self::from_rows(samples, device, domain)
    }

    /// Builds a frame from a row-major `[I..., Q...]` buffer of even length.
    pub fn from_rows(samples: Vec<f32>, device: usize, domain: usize) -> Result<Self> {
        if !samples.len().is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "row-major I/Q buffer must have even length, got {}",
                samples.len()
            )));
        }
        if let Some(pos) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "sample {} of frame (device {device}, domain {domain})",
                pos
            )));
        }
        Ok(IqFrame {
            samples,
            device,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn i(&self) -> &[f32] {
        &self.samples[..self.len()]
    }

    pub fn q(&self) -> &[f32] {
        &self.samples[self.len()..]
    }

    /// Row 0 is I, row 1 is Q.
    pub fn row(&self, r: usize) -> &[f32] {
        match r {
            0 => self.i(),
            1 => self.q(),
            _ => panic!("I/Q frame has two rows, asked for row {r}"),
        }
    }

    /// Row-major `[I..., Q...]` view.
    pub fn as_rows(&self) -> &[f32] {
        &self.samples
    }

    pub(crate) fn rows_mut(&mut self) -> &mut [f32] {
        &mut self.samples
    }

    /// Root-mean-square over all 2·T entries.
    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let energy: f64 = self.samples.iter().map(|&v| (v as f64) * (v as f64)).sum();
        (energy / self.samples.len() as f64).sqrt()
    }
}

/// Per-frame amplitude normalization.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    #[default]
    UnitPower,
    None,
}

/// Scales a frame so its RMS over both rows is 1 (or returns it unchanged).
pub fn normalize_frame(frame: &IqFrame, mode: Normalization) -> Result<IqFrame> {
    match mode {
        Normalization::None => Ok(frame.clone()),
        Normalization::UnitPower => {
            let rms = frame.rms();
            if rms == 0.0 {
                return Err(Error::InvalidArgument(
                    "unit-power normalization of a zero-energy frame".into(),
                ));
            }
            let samples = frame
                .samples
                .iter()
                .map(|&v| (v as f64 / rms) as f32)
                .collect();
            IqFrame::from_rows(samples, frame.device, frame.domain)
        }
    }
}

/// Block-mean decimation to `target_len` samples per row.
///
/// Each output sample is the mean of `⌊T / target_len⌋` consecutive inputs;
/// any tail beyond `target_len` whole blocks is dropped.
pub fn downsample(frame: &IqFrame, target_len: usize) -> Result<IqFrame> {
    let len = frame.len();
    if target_len == 0 {
        return Err(Error::InvalidArgument("downsample target length is 0".into()));
    }
    if len < target_len {
        return Err(Error::InvalidArgument(format!(
            "cannot downsample {len} samples to {target_len}"
        )));
    }
    if len == target_len {
        return Ok(frame.clone());
    }
    let block = len / target_len;
    let mut out = Vec::with_capacity(2 * target_len);
    for r in 0..2 {
        let row = frame.row(r);
        for b in 0..target_len {
            let sum: f64 = row[b * block..(b + 1) * block]
                .iter()
                .map(|&v| v as f64)
                .sum();
            out.push((sum / block as f64) as f32);
        }
    }
    IqFrame::from_rows(out, frame.device, frame.domain)
}
