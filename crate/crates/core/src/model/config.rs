use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::montage::RegionPartition;

/// Architecture hyperparameters. Parameter shapes depend on nothing else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FastConfig {
    /// Channel count of each region, in region order.
    pub region_channels: Vec<usize>,
    /// Width of one region token.
    pub token_width: usize,
    /// Filters of the first (time-only) convolution.
    pub temporal_filters: usize,
    /// Convolution blocks in the tokenizer, counting the spatial-temporal one.
    pub tokenizer_depth: usize,
    /// Transformer layers over the region tokens of a segment.
    pub spatial_depth: usize,
    /// Transformer layers over the segment sequence.
    pub temporal_depth: usize,
    pub spatial_heads: usize,
    pub temporal_heads: usize,
    pub ffn_multiplier: usize,
    /// Taps of the first temporal convolution.
    pub first_kernel: usize,
    /// Taps of the later temporal convolutions.
    pub conv_kernel: usize,
    pub pool_window: usize,
    pub max_segments: usize,
    pub n_classes: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    /// Segment window and stride in samples.
    pub window_samples: usize,
    pub stride_samples: usize,
}

impl Default for FastConfig {
    fn default() -> Self {
        FastConfig {
            region_channels: vec![6, 9, 4, 4, 6, 7, 16, 10],
            token_width: 32,
            temporal_filters: 16,
            tokenizer_depth: 4,
            spatial_depth: 2,
            temporal_depth: 4,
            spatial_heads: 4,
            temporal_heads: 8,
            ffn_multiplier: 2,
            first_kernel: 15,
            conv_kernel: 7,
            pool_window: 2,
            max_segments: 24,
            n_classes: 5,
            head_hidden: 128,
            dropout: 0.1,
            window_samples: 200,
            stride_samples: 100,
        }
    }
}

impl FastConfig {
    /// Smallest configuration used by gradient checks: two regions of three
    /// channels, 16-sample windows.
    pub fn tiny() -> Self {
        FastConfig {
            region_channels: vec![3, 3],
            token_width: 4,
            temporal_filters: 2,
            tokenizer_depth: 2,
            spatial_depth: 1,
            temporal_depth: 1,
            spatial_heads: 2,
            temporal_heads: 2,
            ffn_multiplier: 2,
            first_kernel: 3,
            conv_kernel: 3,
            pool_window: 2,
            max_segments: 4,
            n_classes: 5,
            head_hidden: 6,
            dropout: 0.0,
            window_samples: 16,
            stride_samples: 8,
        }
    }

    /// Reduced widths for single-core runs on synthetic data.
    pub fn desk() -> Self {
        FastConfig {
            region_channels: vec![2; 8],
            token_width: 8,
            temporal_filters: 4,
            tokenizer_depth: 3,
            spatial_depth: 1,
            temporal_depth: 2,
            spatial_heads: 2,
            temporal_heads: 4,
            head_hidden: 32,
            window_samples: 200,
            stride_samples: 200,
            ..Default::default()
        }
    }

    /// Copy with region sizes taken from a partition.
    pub fn with_partition(mut self, partition: &RegionPartition) -> Self {
        self.region_channels = partition.region_sizes();
        self
    }

    pub fn m(&self) -> usize {
        self.region_channels.len()
    }

    /// Width of the concatenated per-segment token.
    pub fn grid_width(&self) -> usize {
        self.m() * self.token_width
    }

    /// Time extent left after the tokenizer convolutions and pools for an
    /// input of `t` samples, or `None` if a stage runs out of samples.
    pub fn tokenizer_output_len(&self, t: usize) -> Option<usize> {
        let mut t = t.checked_sub(self.first_kernel - 1)?;
        t /= self.pool_window;
        for _ in 1..self.tokenizer_depth {
            t = t.checked_sub(self.conv_kernel - 1)?;
            t /= self.pool_window;
        }
        (t >= 1).then_some(t)
    }

    /// Shortest window the tokenizer accepts.
    pub fn min_window(&self) -> usize {
        (1..=1 << 16)
            .find(|&t| self.tokenizer_output_len(t).is_some())
            .unwrap_or(usize::MAX)
    }

    /// Number of segments cut from `t` samples.
    pub fn segments_for(&self, t: usize) -> Result<usize> {
        if t < self.window_samples {
            return Err(Error::Shape(format!(
                "input of {t} samples is shorter than the {}-sample window",
                self.window_samples
            )));
        }
        let s = (t - self.window_samples) / self.stride_samples + 1;
        if s > self.max_segments {
            return Err(Error::Shape(format!(
                "{s} segments exceed the configured maximum of {}",
                self.max_segments
            )));
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.region_channels.is_empty() || self.region_channels.contains(&0) {
            return bad(format!("region channel counts {:?}", self.region_channels));
        }
        let positive = [
            ("token_width", self.token_width),
            ("temporal_filters", self.temporal_filters),
            ("spatial_heads", self.spatial_heads),
            ("temporal_heads", self.temporal_heads),
            ("ffn_multiplier", self.ffn_multiplier),
            ("first_kernel", self.first_kernel),
            ("conv_kernel", self.conv_kernel),
            ("pool_window", self.pool_window),
            ("max_segments", self.max_segments),
            ("head_hidden", self.head_hidden),
            ("window_samples", self.window_samples),
            ("stride_samples", self.stride_samples),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if self.tokenizer_depth < 2 {
            return bad(format!(
                "tokenizer_depth {} < 2 (one spatial-temporal block plus at least one temporal block)",
                self.tokenizer_depth
            ));
        }
        if self.token_width % self.spatial_heads != 0 {
            return bad(format!(
                "token_width {} not divisible by {} spatial heads",
                self.token_width, self.spatial_heads
            ));
        }
        if self.grid_width() % self.temporal_heads != 0 {
            return bad(format!(
                "grid width {} not divisible by {} temporal heads",
                self.grid_width(),
                self.temporal_heads
            ));
        }
        if self.n_classes < 2 {
            return bad(format!("n_classes {}", self.n_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.tokenizer_output_len(self.window_samples).is_none() {
            return bad(format!(
                "{}-sample window is shorter than the tokenizer's receptive field ({} samples)",
                self.window_samples,
                self.min_window()
            ));
        }
        Ok(())
    }
}
