//! Rolling-buffer key/value cache and the autoregressive decode loop.
//!
//! The cache holds at most `window` timesteps per layer; the entry for
//! timestep `i` lives in slot `i mod window`, so once `i >= window` the
//! oldest entry is overwritten and memory never grows with sequence length.
//! Writes for a chunk stay pending until [`RollingKVCache::advance`] commits
//! them, one global timestep counter across all layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{DecoderModel, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tape;

/// One cached timestep: absolute position plus head-split key/value rows.
#[derive(Debug, Clone)]
pub struct KvEntry<T: Scalar> {
    pub pos: usize,
    pub key: Vec<T>,
    pub value: Vec<T>,
}

pub struct RollingKVCache<T: Scalar> {
    window: usize,
    dim: usize,
    slots: Vec<Vec<Option<KvEntry<T>>>>,
    next_pos: usize,
    pending: Vec<usize>,
}

impl<T: Scalar> RollingKVCache<T> {
    pub fn new(n_layers: usize, window: usize, dim: usize) -> Result<Self> {
        if window < 1 {
            return Err(Error::Config(format!("cache window must be >= 1, got {window}")));
        }
        if n_layers == 0 || dim == 0 {
            return Err(Error::Config("cache needs at least one layer and dim > 0".into()));
        }
        Ok(RollingKVCache {
            window,
            dim,
            slots: vec![vec![None; window]; n_layers],
            next_pos: 0,
            pending: vec![0; n_layers],
        })
    }

    /// Cache sized for a model: the sliding window if the variant has one,
    /// otherwise the full context length (ALiBi never evicts).
    pub fn for_model(config: &ModelConfig) -> Result<Self> {
        let window = config.window().unwrap_or(config.max_seq_len);
        Self::new(config.n_layers, window, config.d_model)
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn n_layers(&self) -> usize {
        self.slots.len()
    }

    /// Absolute timestep of the next token.
    pub fn next_pos(&self) -> usize {
        self.next_pos
    }

    /// Committed entries in one layer, never more than `window`.
    pub fn len(&self, layer: usize) -> usize {
        self.slots.get(layer).map_or(0, |s| {
            s.iter().flatten().filter(|e| e.pos < self.next_pos).count()
        })
    }

    pub fn is_empty(&self) -> bool {
        self.next_pos == 0
    }

    /// Write key/value for the next pending timestep of `layer`. The write
    /// lands in slot `pos mod window`; an older occupant is overwritten.
    /// `next_pos` itself only moves on [`advance`](Self::advance).
    pub fn append(&mut self, layer: usize, key: Vec<T>, value: Vec<T>) -> Result<()> {
        if layer >= self.slots.len() {
            return Err(Error::Index(format!(
                "layer {layer} out of range ({} layers)",
                self.slots.len()
            )));
        }
        if key.len() != self.dim || value.len() != self.dim {
            return Err(Error::Dimension {
                op: "cache_append",
                lhs: vec![key.len(), value.len()],
                rhs: vec![self.dim],
            });
        }
        let pos = self.next_pos + self.pending[layer];
        let slot = pos % self.window;
        self.slots[layer][slot] = Some(KvEntry { pos, key, value });
        self.pending[layer] += 1;
        debug_assert!(self.slots[layer].len() == self.window);
        Ok(())
    }

    /// Commit `n` timesteps. Every layer must have appended exactly `n`
    /// entries since the previous advance.
    pub fn advance(&mut self, n: usize) -> Result<()> {
        for (layer, &p) in self.pending.iter().enumerate() {
            if p != n {
                return Err(Error::Contract(format!(
                    "advance({n}) with {p} pending writes in layer {layer}"
                )));
            }
        }
        self.next_pos += n;
        self.pending.iter_mut().for_each(|p| *p = 0);
        Ok(())
    }

    /// Committed entries of one layer in ascending absolute position.
    pub fn gather(&self, layer: usize) -> Result<Vec<KvEntry<T>>> {
        if layer >= self.slots.len() {
            return Err(Error::Index(format!(
                "layer {layer} out of range ({} layers)",
                self.slots.len()
            )));
        }
        let mut out: Vec<KvEntry<T>> = self.slots[layer]
            .iter()
            .flatten()
            .filter(|e| e.pos < self.next_pos)
            .cloned()
            .collect();
        out.sort_by_key(|e| e.pos);
        debug_assert!(out.windows(2).all(|w| w[0].pos < w[1].pos));
        Ok(out)
    }

    /// Committed absolute positions of one layer, ascending.
    pub fn positions(&self, layer: usize) -> Result<Vec<usize>> {
        Ok(self.gather(layer)?.into_iter().map(|e| e.pos).collect())
    }
}

/// How to pick the next token from the final-position logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct GenerationParams {
    pub max_new_tokens: usize,
    pub sampling: Sampling,
    pub stop_token: Option<usize>,
    /// Prompt chunk size for prefill; `None` means the model's window (or
    /// the whole prompt when the variant has no window).
    pub prefill_chunk: Option<usize>,
}

impl GenerationParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        GenerationParams {
            max_new_tokens,
            sampling: Sampling::Greedy,
            stop_token: None,
            prefill_chunk: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Sampling::Temperature { temperature, .. } = self.sampling {
            if temperature.is_nan() || temperature <= 0.0 {
                return Err(Error::Config(format!(
                    "sampling temperature must be > 0, got {temperature}"
                )));
            }
        }
        if self.prefill_chunk == Some(0) {
            return Err(Error::Config("prefill_chunk must be >= 1".into()));
        }
        Ok(())
    }
}

/// Run the prompt through the cache in consecutive chunks and return the
/// final position's logits. Equivalent to token-by-token processing for
/// every chunk size.
pub fn prefill<T: Scalar>(
    model: &DecoderModel<T>,
    cache: &mut RollingKVCache<T>,
    prompt: &[usize],
    chunk: usize,
) -> Result<Vec<T>> {
    if prompt.is_empty() {
        return Err(Error::Contract("prefill on an empty prompt".into()));
    }
    if chunk < 1 {
        return Err(Error::Config("prefill chunk must be >= 1".into()));
    }
    let vocab = model.config().vocab_size;
    let mut last = Vec::new();
    for piece in prompt.chunks(chunk) {
        let tape = Tape::new();
        let logits = model.forward(&tape, piece, Some(cache))?;
        let data = logits.to_vec();
        last = data[(piece.len() - 1) * vocab..].to_vec();
    }
    Ok(last)
}

/// Autoregressive generation with a rolling cache: prefill the prompt, then
/// one forward per new token. Greedy decoding is fully deterministic;
/// temperature sampling is deterministic per seed. The stop token, when
/// hit, is not included in the output.
pub fn generate<T: Scalar>(
    model: &DecoderModel<T>,
    prompt: &[usize],
    params: &GenerationParams,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Contract("generate on an empty prompt".into()));
    }
    params.validate()?;
    let mut cache = RollingKVCache::for_model(model.config())?;
    let chunk = params
        .prefill_chunk
        .or_else(|| model.config().window())
        .unwrap_or(prompt.len());
    let mut logits = prefill(model, &mut cache, prompt, chunk)?;
    let mut rng = match params.sampling {
        Sampling::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Sampling::Greedy => None,
    };
    let mut out = Vec::new();
    for _ in 0..params.max_new_tokens {
        let next = sample_token(&logits, params.sampling, rng.as_mut())?;
        if params.stop_token == Some(next) {
            break;
        }
        out.push(next);
        let tape = Tape::new();
        logits = model.forward(&tape, &[next], Some(&mut cache))?.to_vec();
    }
    Ok(out)
}

fn sample_token<T: Scalar>(
    logits: &[T],
    sampling: Sampling,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<usize> {
    match sampling {
        Sampling::Greedy => {
            let mut best = 0;
            for (i, v) in logits.iter().enumerate() {
                if *v > logits[best] {
                    best = i;
                }
            }
            Ok(best)
        }
        Sampling::Temperature { temperature, .. } => {
            let rng = rng.expect("temperature sampling carries an rng");
            let scaled: Vec<f64> = logits.iter().map(|v| v.as_f64() / temperature).collect();
            let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut draw = rng.gen::<f64>() * total;
            for (i, w) in weights.iter().enumerate() {
                draw -= w;
                if draw <= 0.0 {
                    return Ok(i);
                }
            }
            Ok(weights.len() - 1)
        }
    }
}
