use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// One labeled multichannel epoch, channel-major `f32` samples in µV.
#[derive(Debug, Clone, PartialEq)]
pub struct EegTrial {
    n_channels: usize,
    n_samples: usize,
    data: Vec<f32>,
    pub sample_rate: f64,
    pub label: usize,
    pub subject: u32,
    pub block: u32,
    /// Sample index of the first cue (t = 0).
    pub cue_onset: usize,
}

/// Identity of a trial inside a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrialKey {
    pub subject: u32,
    pub block: u32,
    pub index: u32,
}

impl EegTrial {
    pub fn new(
        n_channels: usize,
        n_samples: usize,
        data: Vec<f32>,
        sample_rate: f64,
        label: usize,
    ) -> Result<Self> {
        if n_channels == 0 || n_samples == 0 || data.len() != n_channels * n_samples {
            return Err(shape_err!(
                "trial {n_channels}x{n_samples} with {} samples",
                data.len()
            ));
        }
        Ok(EegTrial {
            n_channels,
            n_samples,
            data,
            sample_rate,
            label,
            subject: 0,
            block: 0,
            cue_onset: 0,
        })
    }

    pub fn zeros(n_channels: usize, n_samples: usize, sample_rate: f64) -> Self {
        EegTrial {
            n_channels,
            n_samples,
            data: vec![0.0; n_channels * n_samples],
            sample_rate,
            label: 0,
            subject: 0,
            block: 0,
            cue_onset: 0,
        }
    }

    pub fn with_meta(mut self, subject: u32, block: u32, cue_onset: usize) -> Self {
        self.subject = subject;
        self.block = block;
        self.cue_onset = cue_onset;
        self
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples as f64 / self.sample_rate
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.n_samples..(c + 1) * self.n_samples]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        &mut self.data[c * self.n_samples..(c + 1) * self.n_samples]
    }

    /// Copy of samples `[start, start + len)` on every channel; metadata kept,
    /// `cue_onset` shifted.
    pub fn crop(&self, start: usize, len: usize) -> Result<EegTrial> {
        if len == 0 || start + len > self.n_samples {
            return Err(shape_err!(
                "crop [{start}, {}) outside {} samples",
                start + len,
                self.n_samples
            ));
        }
        let mut data = Vec::with_capacity(self.n_channels * len);
        for c in 0..self.n_channels {
            data.extend_from_slice(&self.channel(c)[start..start + len]);
        }
        let mut out = self.with_data(self.n_channels, len, data);
        out.cue_onset = self.cue_onset.saturating_sub(start);
        Ok(out)
    }

    /// Same trial restricted to the given channel rows.
    pub fn select_channels(&self, rows: &[usize]) -> Result<EegTrial> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n_channels) {
            return Err(shape_err!("channel {bad} out of {}", self.n_channels));
        }
        let mut data = Vec::with_capacity(rows.len() * self.n_samples);
        for &r in rows {
            data.extend_from_slice(self.channel(r));
        }
        Ok(self.with_data(rows.len(), self.n_samples, data))
    }

    /// New samples with this trial's metadata.
    pub fn with_data(&self, n_channels: usize, n_samples: usize, data: Vec<f32>) -> EegTrial {
        assert_eq!(data.len(), n_channels * n_samples);
        EegTrial {
            n_channels,
            n_samples,
            data,
            sample_rate: self.sample_rate,
            label: self.label,
            subject: self.subject,
            block: self.block,
            cue_onset: self.cue_onset,
        }
    }
}
