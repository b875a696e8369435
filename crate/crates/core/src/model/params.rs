use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{numel, Real, Tensor};

use super::config::FastConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Trainable,
    /// Running statistics; saved and loaded but never differentiated.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T: Real> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Ordered, uniquely named model tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, kind, value });
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.position(name)
            .map(|i| &self.entries[i].value)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.position(name) {
            Some(i) => Ok(&mut self.entries[i].value),
            None => Err(Error::Config(format!("no parameter named {name}"))),
        }
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut ParamEntry<T> {
        &mut self.entries[i]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn n_trainable(&self) -> usize {
        self.trainable().map(|e| e.value.len()).sum()
    }

    /// Number of stored scalars including buffers.
    pub fn n_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
    }

    /// Mutable views of the trainable tensors, in store order.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| &mut e.value)
            .collect()
    }

    /// All trainable values concatenated into one vector.
    pub fn flatten_trainable(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .trainable()
            .flat_map(|e| e.value.data().iter().copied())
            .collect();
        Tensor::from_parts_unchecked(vec![data.len()], data)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Every tensor has the same bit pattern as in `other`.
    pub fn bit_identical(&self, other: &ParamStore<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.kind == b.kind
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

/// How a tensor is filled at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Normal(f64),
    Const(f64),
}

/// Names, kinds, shapes and initializers of every model tensor, in order.
pub(crate) fn layout(cfg: &FastConfig) -> Vec<(String, ParamKind, Vec<usize>, Init)> {
    use Init::*;
    use ParamKind::*;
    let mut out = Vec::new();
    let mut p = |name: String, kind, shape: Vec<usize>, init| out.push((name, kind, shape, init));
    let f = cfg.token_width;
    let ft = cfg.temporal_filters;

    for (j, &ch) in cfg.region_channels.iter().enumerate() {
        let pre = format!("tokenizer.{j}");
        p(format!("{pre}.conv_t.w"), Trainable, vec![ft, 1, cfg.first_kernel], FanIn(cfg.first_kernel));
        p(format!("{pre}.conv_t.b"), Trainable, vec![ft], FanIn(cfg.first_kernel));
        p(format!("{pre}.conv_s.w"), Trainable, vec![f, ft, ch], FanIn(ft * ch));
        p(format!("{pre}.conv_s.b"), Trainable, vec![f], FanIn(ft * ch));
        for l in 1..=cfg.tokenizer_depth {
            if l > 1 {
                let fan = f * cfg.conv_kernel;
                p(format!("{pre}.conv{l}.w"), Trainable, vec![f, f, cfg.conv_kernel], FanIn(fan));
                p(format!("{pre}.conv{l}.b"), Trainable, vec![f], FanIn(fan));
            }
            p(format!("{pre}.bn{l}.gamma"), Trainable, vec![f], Const(1.0));
            p(format!("{pre}.bn{l}.beta"), Trainable, vec![f], Const(0.0));
            p(format!("{pre}.bn{l}.running_mean"), Buffer, vec![f], Const(0.0));
            p(format!("{pre}.bn{l}.running_var"), Buffer, vec![f], Const(1.0));
        }
    }

    let mut encoder = |stack: &str, depth: usize, d: usize| {
        let hidden = d * cfg.ffn_multiplier;
        for l in 0..depth {
            let pre = format!("{stack}.{l}");
            for m in ["wq", "wk", "wv", "wo"] {
                p(format!("{pre}.attn.{m}"), Trainable, vec![d, d], FanIn(d));
            }
            p(format!("{pre}.ffn.w1"), Trainable, vec![d, hidden], FanIn(d));
            p(format!("{pre}.ffn.b1"), Trainable, vec![hidden], FanIn(d));
            p(format!("{pre}.ffn.w2"), Trainable, vec![hidden, d], FanIn(hidden));
            p(format!("{pre}.ffn.b2"), Trainable, vec![d], FanIn(hidden));
            p(format!("{pre}.ln.gamma"), Trainable, vec![d], Const(1.0));
            p(format!("{pre}.ln.beta"), Trainable, vec![d], Const(0.0));
        }
    };
    encoder("spatial", cfg.spatial_depth, f);
    let d = cfg.grid_width();
    encoder("temporal", cfg.temporal_depth, d);

    p("temporal.position".into(), Trainable, vec![cfg.max_segments + 1, d], Normal(0.02));
    p("temporal.cls".into(), Trainable, vec![d], Normal(0.02));
    p("head.ln.gamma".into(), Trainable, vec![d], Const(1.0));
    p("head.ln.beta".into(), Trainable, vec![d], Const(0.0));
    p("head.fc1.w".into(), Trainable, vec![d, cfg.head_hidden], FanIn(d));
    p("head.fc1.b".into(), Trainable, vec![cfg.head_hidden], FanIn(d));
    p("head.fc2.w".into(), Trainable, vec![cfg.head_hidden, cfg.n_classes], FanIn(cfg.head_hidden));
    p("head.fc2.b".into(), Trainable, vec![cfg.n_classes], FanIn(cfg.head_hidden));
    out
}

/// Fresh parameters, a pure function of `(cfg, seed)`.
pub fn init_params(cfg: &FastConfig, seed: u64) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, kind, shape, init) in layout(cfg) {
        let n = numel(&shape);
        let data: Vec<f32> = match init {
            Init::FanIn(fan) => {
                let bound = 1.0 / (fan as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| d.sample(&mut rng) as f32).collect()
            }
            Init::Const(v) => vec![v as f32; n],
        };
        store.push(name, kind, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}

/// Checks that a store holds exactly the tensors `cfg` calls for.
pub fn check_store<T: Real>(cfg: &FastConfig, store: &ParamStore<T>) -> Result<()> {
    let want = layout(cfg);
    if want.len() != store.len() {
        return Err(Error::Format(format!(
            "config needs {} tensors, store has {}",
            want.len(),
            store.len()
        )));
    }
    for ((name, kind, shape, _), e) in want.iter().zip(store.entries()) {
        if *name != e.name || *kind != e.kind || shape[..] != *e.value.shape() {
            return Err(Error::Format(format!(
                "tensor {} {:?} does not match expected {name} {shape:?}",
                e.name,
                e.value.shape()
            )));
        }
    }
    Ok(())
}
