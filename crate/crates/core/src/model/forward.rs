use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    feed_forward, layer_norm_residual, multi_head_attention, AttentionWeights, BatchStats,
    FeedForwardWeights, Graph, NormWeights, Real, Tensor, Var,
};

use super::config::FastConfig;
use super::params::{ParamKind, ParamStore};

/// Model tensors placed on a graph. Buffers stay in the store.
pub struct Bound<'s, T: Real> {
    store: &'s ParamStore<T>,
    vars: HashMap<&'s str, Var>,
}

impl<'s, T: Real> Bound<'s, T> {
    /// One leaf per trainable tensor.
    pub fn new(g: &mut Graph<T>, store: &'s ParamStore<T>) -> Result<Self> {
        let mut vars = HashMap::new();
        for e in store.trainable() {
            vars.insert(e.name.as_str(), g.param(e.value.clone())?);
        }
        Ok(Bound { store, vars })
    }

    /// Trainable tensors as constants, for gradients with respect to the
    /// input only.
    pub fn frozen(g: &mut Graph<T>, store: &'s ParamStore<T>) -> Result<Self> {
        let mut vars = HashMap::new();
        for e in store.trainable() {
            vars.insert(e.name.as_str(), g.constant(e.value.clone())?);
        }
        Ok(Bound { store, vars })
    }

    /// Trainable tensors cut from one flat vector (see
    /// [`ParamStore::flatten_trainable`]), so a single leaf drives the model.
    pub fn from_flat(g: &mut Graph<T>, store: &'s ParamStore<T>, flat: Var) -> Result<Self> {
        let mut vars = HashMap::new();
        let mut offset = 0;
        for e in store.trainable() {
            let n = e.value.len();
            let piece = g.narrow(flat, 0, offset, n)?;
            vars.insert(e.name.as_str(), g.reshape(piece, e.value.shape())?);
            offset += n;
        }
        Ok(Bound { store, vars })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("no trainable parameter named {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.store.get(name)
    }

    /// Leaf of every trainable tensor, in store order.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.store
            .trainable()
            .map(|e| self.vars[e.name.as_str()])
            .collect()
    }

    fn attention(&self, pre: &str) -> Result<AttentionWeights> {
        Ok(AttentionWeights {
            wq: self.var(&format!("{pre}.attn.wq"))?,
            wk: self.var(&format!("{pre}.attn.wk"))?,
            wv: self.var(&format!("{pre}.attn.wv"))?,
            wo: self.var(&format!("{pre}.attn.wo"))?,
        })
    }

    fn ffn(&self, pre: &str) -> Result<FeedForwardWeights> {
        Ok(FeedForwardWeights {
            w1: self.var(&format!("{pre}.ffn.w1"))?,
            b1: self.var(&format!("{pre}.ffn.b1"))?,
            w2: self.var(&format!("{pre}.ffn.w2"))?,
            b2: self.var(&format!("{pre}.ffn.b2"))?,
        })
    }

    fn norm(&self, pre: &str) -> Result<NormWeights> {
        Ok(NormWeights {
            gamma: self.var(&format!("{pre}.gamma"))?,
            beta: self.var(&format!("{pre}.beta"))?,
        })
    }
}

/// Training or evaluation behaviour of one forward pass.
pub enum Mode {
    /// Running batch-norm statistics, no dropout.
    Eval,
    /// Batch statistics and dropout; the statistics of every batch-norm layer
    /// are collected for the running-average update.
    Train {
        rng: ChaCha8Rng,
        dropout: f64,
        batch_stats: Vec<(String, BatchStats)>,
    },
}

impl Mode {
    pub fn train(seed: u64, dropout: f64) -> Self {
        Mode::Train {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dropout,
            batch_stats: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }

    /// Batch statistics gathered during a training pass.
    pub fn take_batch_stats(&mut self) -> Vec<(String, BatchStats)> {
        match self {
            Mode::Eval => Vec::new(),
            Mode::Train { batch_stats, .. } => std::mem::take(batch_stats),
        }
    }
}

fn batch_norm<T: Real>(
    g: &mut Graph<T>,
    p: &Bound<'_, T>,
    pre: &str,
    x: Var,
    mode: &mut Mode,
) -> Result<Var> {
    let gamma = p.var(&format!("{pre}.gamma"))?;
    let beta = p.var(&format!("{pre}.beta"))?;
    match mode {
        Mode::Eval => {
            let mean = p.buffer(&format!("{pre}.running_mean"))?.data();
            let var = p.buffer(&format!("{pre}.running_var"))?.data();
            g.batch_norm_eval(x, gamma, beta, mean, var)
        }
        Mode::Train { batch_stats, .. } => {
            let (y, stats) = g.batch_norm_train(x, gamma, beta)?;
            batch_stats.push((pre.to_string(), stats));
            Ok(y)
        }
    }
}

fn dropout<T: Real>(g: &mut Graph<T>, x: Var, mode: &mut Mode) -> Result<Var> {
    let Mode::Train { rng, dropout, .. } = mode else {
        return Ok(x);
    };
    if *dropout <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - *dropout;
    let shape = g.shape(x).to_vec();
    let mask = Tensor::from_fn(&shape, |_| {
        if rng.gen::<f64>() < keep {
            T::lit(1.0 / keep)
        } else {
            T::zero()
        }
    });
    g.mul_const(x, mask)
}

/// One encoder layer: `d = MHA(x)`, `LN(d + FFN(d))`, on `[B, L, D]`.
fn encoder_layer<T: Real>(
    g: &mut Graph<T>,
    p: &Bound<'_, T>,
    pre: &str,
    x: Var,
    heads: usize,
    mode: &mut Mode,
) -> Result<Var> {
    let attn = p.attention(pre)?;
    let delta = multi_head_attention(g, x, x, x, &attn, heads)?;
    let delta = dropout(g, delta, mode)?;
    let ff = feed_forward(g, delta, &p.ffn(pre)?)?;
    let ff = dropout(g, ff, mode)?;
    layer_norm_residual(g, delta, ff, &p.norm(&format!("{pre}.ln"))?)
}

/// Region tokens for a batch of segments.
///
/// `segments: [N, C, W]` with channel rows in layout order; `regions` lists the
/// rows of each region. Returns `[N, M, F]`.
pub fn st_tokens<T: Real>(
    g: &mut Graph<T>,
    p: &Bound<'_, T>,
    cfg: &FastConfig,
    regions: &[Vec<usize>],
    segments: Var,
    mode: &mut Mode,
) -> Result<Var> {
    check_regions(cfg, regions)?;
    let shape = g.shape(segments).to_vec();
    let [n, _, w] = shape[..] else {
        return Err(Error::Shape(format!("segments must be [N, C, W], got {shape:?}")));
    };
    if cfg.tokenizer_output_len(w).is_none() {
        return Err(Error::Shape(format!(
            "{w}-sample segment is shorter than the tokenizer's receptive field ({})",
            cfg.min_window()
        )));
    }
    let mut tokens = Vec::with_capacity(regions.len());
    for (j, rows) in regions.iter().enumerate() {
        let pre = format!("tokenizer.{j}");
        let x = g.index_select(segments, 1, rows)?;
        let x = g.reshape(x, &[n, 1, rows.len(), w])?;
        let x = g.conv_temporal(
            x,
            p.var(&format!("{pre}.conv_t.w"))?,
            Some(p.var(&format!("{pre}.conv_t.b"))?),
        )?;
        let mut x = g.conv_spatial(
            x,
            p.var(&format!("{pre}.conv_s.w"))?,
            Some(p.var(&format!("{pre}.conv_s.b"))?),
        )?;
        for l in 1..=cfg.tokenizer_depth {
            if l > 1 {
                x = g.conv_temporal(
                    x,
                    p.var(&format!("{pre}.conv{l}.w"))?,
                    Some(p.var(&format!("{pre}.conv{l}.b"))?),
                )?;
            }
            x = batch_norm(g, p, &format!("{pre}.bn{l}"), x, mode)?;
            x = g.gelu(x)?;
            x = g.max_pool_time(x, cfg.pool_window)?;
        }
        let x = g.global_max_pool_time(x)?;
        tokens.push(g.reshape(x, &[n, 1, cfg.token_width])?);
    }
    g.concat(&tokens, 1)
}

/// Encoder layers across the region tokens of each segment: `[N, M, F]` in
/// and out.
pub fn spatial_projection<T: Real>(
    g: &mut Graph<T>,
    p: &Bound<'_, T>,
    cfg: &FastConfig,
    tokens: Var,
    mode: &mut Mode,
) -> Result<Var> {
    let mut x = tokens;
    for l in 0..cfg.spatial_depth {
        x = encoder_layer(g, p, &format!("spatial.{l}"), x, cfg.spatial_heads, mode)?;
    }
    Ok(x)
}

/// Adds temporal encodings, appends the class token, runs the temporal
/// encoder and the head. `grid: [B, S, M*F]` gives `[B, n_classes]`.
pub fn temporal_forward<T: Real>(
    g: &mut Graph<T>,
    p: &Bound<'_, T>,
    cfg: &FastConfig,
    grid: Var,
    mode: &mut Mode,
) -> Result<Var> {
    let shape = g.shape(grid).to_vec();
    let d = cfg.grid_width();
    let [b, s, gd] = shape[..] else {
        return Err(Error::Shape(format!("token grid must be [B, S, D], got {shape:?}")));
    };
    if gd != d {
        return Err(Error::Shape(format!("token grid width {gd}, model expects {d}")));
    }
    if s > cfg.max_segments {
        return Err(Error::Shape(format!(
            "{s} segments exceed the configured maximum of {}",
            cfg.max_segments
        )));
    }
    let position = p.var("temporal.position")?;
    let enc = g.narrow(position, 0, 0, s)?;
    let seq = g.add_bcast(grid, enc)?;
    let cls_pos = g.narrow(position, 0, s, 1)?;
    let cls_pos = g.reshape(cls_pos, &[d])?;
    let cls = g.add(p.var("temporal.cls")?, cls_pos)?;
    let cls = g.expand_lead(cls, b)?;
    let cls = g.reshape(cls, &[b, 1, d])?;
    let mut x = g.concat(&[seq, cls], 1)?;
    for l in 0..cfg.temporal_depth {
        x = encoder_layer(g, p, &format!("temporal.{l}"), x, cfg.temporal_heads, mode)?;
    }
    let last = g.narrow(x, 1, s, 1)?;
    let last = g.reshape(last, &[b, d])?;
    head(g, p, last)
}

/// `LN -> linear -> GELU -> linear` on `[B, M*F]`.
pub fn head<T: Real>(g: &mut Graph<T>, p: &Bound<'_, T>, x: Var) -> Result<Var> {
    let n = p.norm("head.ln")?;
    let x = g.layer_norm(x, n.gamma, n.beta)?;
    let x = g.linear(x, p.var("head.fc1.w")?, Some(p.var("head.fc1.b")?))?;
    let x = g.gelu(x)?;
    g.linear(x, p.var("head.fc2.w")?, Some(p.var("head.fc2.b")?))
}

/// Which parts of the network run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Segment tokens mean-pooled straight into the head.
    NoTransformer,
}

/// Region-token grid for a batch of trials: `[B, C, T]` gives `[B, S, M*F]`
/// (before the spatial projection).
pub fn token_grid<T: Real>(
    g: &mut Graph<T>,
    p: &Bound<'_, T>,
    cfg: &FastConfig,
    regions: &[Vec<usize>],
    trials: Var,
    mode: &mut Mode,
) -> Result<(Var, usize)> {
    let shape = g.shape(trials).to_vec();
    let [_, _, t] = shape[..] else {
        return Err(Error::Shape(format!("trials must be [B, C, T], got {shape:?}")));
    };
    let s = cfg.segments_for(t)?;
    let segs = g.unfold_time(trials, cfg.window_samples, cfg.stride_samples)?;
    let tokens = st_tokens(g, p, cfg, regions, segs, mode)?;
    Ok((tokens, s))
}

/// Logits `[B, n_classes]` for a batch `[B, C, T]` of trials.
pub fn fast_forward<T: Real>(
    g: &mut Graph<T>,
    p: &Bound<'_, T>,
    cfg: &FastConfig,
    regions: &[Vec<usize>],
    trials: Var,
    variant: Variant,
    mode: &mut Mode,
) -> Result<Var> {
    let b = g.shape(trials)[0];
    let (tokens, s) = token_grid(g, p, cfg, regions, trials, mode)?;
    let d = cfg.grid_width();
    match variant {
        Variant::Full => {
            let h = spatial_projection(g, p, cfg, tokens, mode)?;
            let grid = g.reshape(h, &[b, s, d])?;
            temporal_forward(g, p, cfg, grid, mode)
        }
        Variant::NoTransformer => {
            let grid = g.reshape(tokens, &[b, s, d])?;
            let pooled = g.mean_axis(grid, 1)?;
            head(g, p, pooled)
        }
    }
}

fn check_regions(cfg: &FastConfig, regions: &[Vec<usize>]) -> Result<()> {
    let sizes: Vec<usize> = regions.iter().map(Vec::len).collect();
    if sizes != cfg.region_channels {
        return Err(Error::Shape(format!(
            "partition region sizes {sizes:?} do not match the model's {:?}",
            cfg.region_channels
        )));
    }
    Ok(())
}

/// Folds collected batch statistics into the running buffers.
pub fn update_running_stats(
    store: &mut ParamStore<f32>,
    stats: &[(String, BatchStats)],
    momentum: f64,
) -> Result<()> {
    for (pre, s) in stats {
        for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let name = format!("{pre}.{suffix}");
            let i = store
                .position(&name)
                .filter(|&i| store.entries()[i].kind == ParamKind::Buffer)
                .ok_or_else(|| Error::Config(format!("no buffer named {name}")))?;
            let t = &mut store.entry_mut(i).value;
            for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                *r = ((1.0 - momentum) * *r as f64 + momentum * b) as f32;
            }
        }
    }
    Ok(())
}
