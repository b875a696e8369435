//! The FAST network: per-region convolutional tokenizer, encoder across
//! regions, encoder across segments with a class token, and an MLP head.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, PREAMBLE,
    VERSION,
};
pub use config::FastConfig;
pub use forward::{
    fast_forward, head, spatial_projection, st_tokens, temporal_forward, token_grid,
    update_running_stats, Bound, Mode, Variant,
};
pub use params::{check_store, init_params, ParamEntry, ParamKind, ParamStore};

use crate::error::{Error, Result};
use crate::montage::RegionPartition;
use crate::numerics::{Graph, Tensor};
use crate::trial::EegTrial;

/// Trials evaluated per graph in inference.
pub const EVAL_BATCH: usize = 32;

/// Configuration, parameters and the channel rows of each region.
#[derive(Debug, Clone)]
pub struct FastModel {
    pub config: FastConfig,
    pub params: ParamStore<f32>,
    pub regions: Vec<Vec<usize>>,
    /// Channels expected in every input trial.
    pub n_channels: usize,
}

impl FastModel {
    pub fn new(config: FastConfig, partition: &RegionPartition, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Self::from_parts(config, params, partition)
    }

    pub fn from_parts(
        config: FastConfig,
        params: ParamStore<f32>,
        partition: &RegionPartition,
    ) -> Result<Self> {
        config.validate()?;
        check_store(&config, &params)?;
        if partition.region_sizes() != config.region_channels {
            return Err(Error::Config(format!(
                "partition {} has region sizes {:?}, model expects {:?}",
                partition.config,
                partition.region_sizes(),
                config.region_channels
            )));
        }
        Ok(FastModel {
            config,
            params,
            regions: partition.members().to_vec(),
            n_channels: partition.n_channels(),
        })
    }

    /// Logits `[B, n_classes]` in evaluation mode.
    pub fn logits(&self, trials: &[&EegTrial], variant: Variant) -> Result<Tensor<f32>> {
        let mut data = Vec::new();
        for chunk in trials.chunks(EVAL_BATCH) {
            let x = stack_trials(chunk, self.n_channels)?;
            let mut g = Graph::new();
            let p = Bound::new(&mut g, &self.params)?;
            let x = g.constant(x)?;
            let y = fast_forward(&mut g, &p, &self.config, &self.regions, x, variant, &mut Mode::Eval)?;
            data.extend_from_slice(g.value(y).data());
        }
        Tensor::new(vec![trials.len(), self.config.n_classes], data)
    }

    /// Region tokens `[N, M, F]` for segments `[N, C, W]`, evaluation mode.
    pub fn tokens(&self, segments: Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.params)?;
        let x = g.constant(segments)?;
        let y = st_tokens(&mut g, &p, &self.config, &self.regions, x, &mut Mode::Eval)?;
        Ok(g.value(y).clone())
    }
}

/// `[B, C, T]` tensor from equally shaped trials.
pub fn stack_trials(trials: &[&EegTrial], n_channels: usize) -> Result<Tensor<f32>> {
    let first = trials
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let t = first.n_samples();
    let mut data = Vec::with_capacity(trials.len() * n_channels * t);
    for tr in trials {
        if tr.n_channels() != n_channels || tr.n_samples() != t {
            return Err(Error::Shape(format!(
                "trial {}x{} in a batch of {n_channels}x{t}",
                tr.n_channels(),
                tr.n_samples()
            )));
        }
        data.extend_from_slice(tr.data());
    }
    Tensor::new(vec![trials.len(), n_channels, t], data)
}

#[cfg(test)]
mod tests;
