//! Toy decoder-only transformer with two attention variants.
//!
//! `SlidingWindow { window }` restricts causal attention to the `window`
//! most recent positions per layer and applies rotary position encoding to
//! Q/K, so information still propagates up to `window × layer` tokens across
//! the stack. `Alibi` keeps full causal attention, adds a per-head linear
//! distance penalty to the scores, uses no positional embedding at all, and
//! pairs with a layernorm directly after the token embedding.
//!
//! Every projection weight is stored `[out_features × in_features]` and
//! applied as `x · Wᵀ`; the embedding table is `[vocab × d_model]` and used
//! by row gather.

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::RollingKVCache;
use crate::lora::LoraAdapter;
use crate::scalar::Scalar;
use crate::tensor::{shared_buf, SharedBuf, Tape, Tensor};

/// Epsilon for every layer normalization in the model. Small enough that a
/// fresh unit-gain norm leaves per-row variance within 1e-5 of one even for
/// low-variance embedding rows.
pub const LN_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    SlidingWindow { window: usize },
    Alibi,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub attention: AttentionVariant,
    pub embedding_layernorm: bool,
    pub feedforward_mult: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.vocab_size == 0
            || self.max_seq_len == 0
            || self.feedforward_mult == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head_dim {} must be even for rotary pairs",
                self.head_dim()
            )));
        }
        match self.attention {
            AttentionVariant::SlidingWindow { window } if window < 1 => {
                return Err(Error::Config("sliding window must be >= 1".into()));
            }
            AttentionVariant::Alibi if !self.embedding_layernorm => {
                return Err(Error::Config(
                    "alibi attention requires embedding_layernorm".into(),
                ));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn window(&self) -> Option<usize> {
        match self.attention {
            AttentionVariant::SlidingWindow { window } => Some(window),
            AttentionVariant::Alibi => None,
        }
    }

    pub fn feedforward_dim(&self) -> usize {
        self.d_model * self.feedforward_mult
    }
}

/// Named weight with shared storage, so a tape can borrow it without
/// copying and the optimizer can update it in place between steps.
pub struct Param<T: Scalar> {
    name: String,
    data: SharedBuf<T>,
    shape: Vec<usize>,
    trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, data: Vec<T>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Param {
            name: name.into(),
            data: shared_buf(data),
            shape,
            trainable: true,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn values(&self) -> Ref<'_, Vec<T>> {
        self.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.borrow().clone()
    }

    /// Replace the stored values (checkpoint load, optimizer update).
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::Dimension {
                op: "set_data",
                lhs: vec![data.len()],
                rhs: self.shape.clone(),
            });
        }
        *self.data.borrow_mut() = data;
        Ok(())
    }

    pub fn buffer(&self) -> &SharedBuf<T> {
        &self.data
    }

    pub fn leaf(&self, tape: &Tape<T>) -> Tensor<T> {
        tape.param(&self.name, &self.data, &self.shape, self.trainable)
    }
}

impl<T: Scalar> Clone for Param<T> {
    /// Deep copy: the clone owns fresh storage.
    fn clone(&self) -> Self {
        Param {
            name: self.name.clone(),
            data: Rc::new(RefCell::new(self.data.borrow().clone())),
            shape: self.shape.clone(),
            trainable: self.trainable,
        }
    }
}

#[derive(Clone)]
struct Block<T: Scalar> {
    attn_norm_gain: Param<T>,
    attn_norm_bias: Param<T>,
    wq: Param<T>,
    wk: Param<T>,
    wv: Param<T>,
    wo: Param<T>,
    ffn_norm_gain: Param<T>,
    ffn_norm_bias: Param<T>,
    ff_in: Param<T>,
    ff_out: Param<T>,
}

/// Boolean attention mask over (query, key) absolute positions.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    n_query: usize,
    n_key: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Plain causal mask: a query sees keys at positions `<=` its own.
    pub fn causal(query_pos: &[usize], key_pos: &[usize]) -> Self {
        Self::build(query_pos, key_pos, |q, k| k <= q)
    }

    /// Causal mask further restricted to the `window` most recent
    /// positions: query at `i` sees exactly `[i-window+1, i]`.
    pub fn sliding_window(query_pos: &[usize], key_pos: &[usize], window: usize) -> Result<Self> {
        if window < 1 {
            return Err(Error::Config(format!("window must be >= 1, got {window}")));
        }
        Ok(Self::build(query_pos, key_pos, |q, k| {
            k <= q && q - k < window
        }))
    }

    fn build(query_pos: &[usize], key_pos: &[usize], f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(query_pos.len() * key_pos.len());
        for &q in query_pos {
            for &k in key_pos {
                allowed.push(f(q, k));
            }
        }
        AttentionMask {
            n_query: query_pos.len(),
            n_key: key_pos.len(),
            allowed,
        }
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.n_key + key]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_query, self.n_key)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

/// Set score entries outside the sliding window to `-inf`, leaving
/// in-window entries untouched.
pub fn apply_sliding_window_mask<T: Scalar>(
    scores: &Tensor<T>,
    query_pos: &[usize],
    key_pos: &[usize],
    window: usize,
) -> Result<Tensor<T>> {
    let mask = AttentionMask::sliding_window(query_pos, key_pos, window)?;
    scores.mask_fill(mask.as_slice())
}

/// Per-head ALiBi slope: a geometric schedule `2^(-8(h+1)/n_heads)`.
pub fn alibi_slope(head: usize, n_heads: usize) -> f64 {
    2f64.powf(-8.0 * (head + 1) as f64 / n_heads as f64)
}

fn alibi_bias_value<T: Scalar>(slope: f64, q: usize, k: usize) -> T {
    if k <= q {
        T::from_f64(-slope * (q - k) as f64)
    } else {
        T::zero()
    }
}

/// Distance penalty tensor `[n_heads × queries × keys]`:
/// `bias[h][q][k] = -slope(h)·(q_pos - k_pos)` for `k_pos <= q_pos`, zero at
/// distance zero (and on the never-attended upper triangle).
pub fn alibi_bias<T: Scalar>(
    tape: &Tape<T>,
    n_heads: usize,
    query_pos: &[usize],
    key_pos: &[usize],
) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(n_heads * query_pos.len() * key_pos.len());
    for h in 0..n_heads {
        let slope = alibi_slope(h, n_heads);
        for &q in query_pos {
            for &k in key_pos {
                data.push(alibi_bias_value::<T>(slope, q, k));
            }
        }
    }
    tape.constant(data, &[n_heads, query_pos.len(), key_pos.len()])
}

/// Dropout source for training-mode forward passes.
pub enum ForwardMode<'a> {
    Eval,
    Train { dropout_rng: &'a mut ChaCha8Rng },
}

impl<T: Scalar> std::fmt::Debug for DecoderModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DecoderModel")
            .field("config", &self.config)
            .field("params", &self.param_count(false))
            .field("adapters", &self.adapters.len())
            .finish()
    }
}

#[derive(Clone)]
pub struct DecoderModel<T: Scalar> {
    config: ModelConfig,
    embedding: Param<T>,
    embed_norm: Option<(Param<T>, Param<T>)>,
    blocks: Vec<Block<T>>,
    head: Param<T>,
    adapters: BTreeMap<String, LoraAdapter<T>>,
}

impl<T: Scalar> DecoderModel<T> {
    /// Seeded Gaussian init: projections and embeddings at
    /// `std = d_model^(-1/2)`, norm gains one, norm biases zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (config.d_model as f64).powf(-0.5);
        Self::build(config, |n| {
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect()
        })
    }

    /// All projections zero (norm gains still one). Useful as a neutral
    /// fixture: every logit comes out identical.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Self::build(config, |n| vec![T::zero(); n])
    }

    fn build(config: &ModelConfig, mut sample: impl FnMut(usize) -> Vec<T>) -> Result<Self> {
        let d = config.d_model;
        let ff = config.feedforward_dim();
        let mut gaussian =
            |name: &str, shape: Vec<usize>| -> Param<T> {
                let n = shape.iter().product();
                Param::new(name, sample(n), shape)
            };
        let ones = |name: &str, n: usize| Param::new(name, vec![T::one(); n], vec![n]);
        let zeros = |name: &str, n: usize| Param::new(name, vec![T::zero(); n], vec![n]);

        let embedding = gaussian("embedding", vec![config.vocab_size, d]);
        let embed_norm = if config.embedding_layernorm {
            Some((ones("embed_norm.gain", d), zeros("embed_norm.bias", d)))
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |suffix: &str| format!("layers.{i}.{suffix}");
            blocks.push(Block {
                attn_norm_gain: ones(&p("attn_norm.gain"), d),
                attn_norm_bias: zeros(&p("attn_norm.bias"), d),
                wq: gaussian(&p("attn.wq"), vec![d, d]),
                wk: gaussian(&p("attn.wk"), vec![d, d]),
                wv: gaussian(&p("attn.wv"), vec![d, d]),
                wo: gaussian(&p("attn.wo"), vec![d, d]),
                ffn_norm_gain: ones(&p("ffn_norm.gain"), d),
                ffn_norm_bias: zeros(&p("ffn_norm.bias"), d),
                ff_in: gaussian(&p("ffn.w_in"), vec![ff, d]),
                ff_out: gaussian(&p("ffn.w_out"), vec![d, ff]),
            });
        }
        let head = gaussian("head", vec![config.vocab_size, d]);
        Ok(DecoderModel {
            config: config.clone(),
            embedding,
            embed_norm,
            blocks,
            head,
            adapters: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn adapters(&self) -> &BTreeMap<String, LoraAdapter<T>> {
        &self.adapters
    }

    pub(crate) fn adapters_mut(&mut self) -> &mut BTreeMap<String, LoraAdapter<T>> {
        &mut self.adapters
    }

    /// Base parameters in a fixed order (no adapters).
    pub fn base_params(&self) -> Vec<&Param<T>> {
        let mut out: Vec<&Param<T>> = vec![&self.embedding];
        if let Some((g, b)) = &self.embed_norm {
            out.push(g);
            out.push(b);
        }
        for blk in &self.blocks {
            out.extend([
                &blk.attn_norm_gain,
                &blk.attn_norm_bias,
                &blk.wq,
                &blk.wk,
                &blk.wv,
                &blk.wo,
                &blk.ffn_norm_gain,
                &blk.ffn_norm_bias,
                &blk.ff_in,
                &blk.ff_out,
            ]);
        }
        out.push(&self.head);
        out
    }

    fn base_params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = vec![&mut self.embedding];
        if let Some((g, b)) = &mut self.embed_norm {
            out.push(g);
            out.push(b);
        }
        for blk in &mut self.blocks {
            out.extend([
                &mut blk.attn_norm_gain,
                &mut blk.attn_norm_bias,
                &mut blk.wq,
                &mut blk.wk,
                &mut blk.wv,
                &mut blk.wo,
                &mut blk.ffn_norm_gain,
                &mut blk.ffn_norm_bias,
                &mut blk.ff_in,
                &mut blk.ff_out,
            ]);
        }
        out.push(&mut self.head);
        out
    }

    /// Base plus adapter parameters.
    pub fn all_params(&self) -> Vec<&Param<T>> {
        let mut out = self.base_params();
        for adapter in self.adapters.values() {
            out.push(adapter.up_param());
            out.push(adapter.down_param());
        }
        out
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Param<T>> {
        self.all_params().into_iter().find(|p| p.name() == name)
    }

    pub(crate) fn set_base_trainable(&mut self, trainable: bool) {
        for p in self.base_params_mut() {
            p.set_trainable(trainable);
        }
    }

    /// Exact parameter count; `trainable_only` skips frozen tensors.
    pub fn param_count(&self, trainable_only: bool) -> usize {
        self.all_params()
            .into_iter()
            .filter(|p| !trainable_only || p.trainable())
            .map(Param::numel)
            .sum()
    }

    /// Projection targets eligible for low-rank adaptation.
    pub fn projection_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, _) in self.blocks.iter().enumerate() {
            for w in ["wq", "wk", "wv", "wo"] {
                out.push(format!("layers.{i}.attn.{w}"));
            }
        }
        for (i, _) in self.blocks.iter().enumerate() {
            out.push(format!("layers.{i}.ffn.w_in"));
            out.push(format!("layers.{i}.ffn.w_out"));
        }
        out.push("head".to_string());
        out
    }

    /// Default adapter targets: the attention projections of every layer.
    pub fn attention_projection_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, _) in self.blocks.iter().enumerate() {
            for w in ["wq", "wk", "wv", "wo"] {
                out.push(format!("layers.{i}.attn.{w}"));
            }
        }
        out
    }

    fn projection_param(&self, name: &str) -> Option<&Param<T>> {
        self.projection_names()
            .iter()
            .any(|n| n == name)
            .then(|| self.param_by_name(name))
            .flatten()
    }

    pub(crate) fn projection_shape(&self, name: &str) -> Option<(usize, usize)> {
        let p = self.projection_param(name)?;
        Some((p.shape()[0], p.shape()[1]))
    }

    /// `x · Wᵀ` with the adapter branch added when one is attached to `w`.
    fn project(
        &self,
        tape: &Tape<T>,
        x: &Tensor<T>,
        w: &Param<T>,
        mode: &mut ForwardMode<'_>,
    ) -> Result<Tensor<T>> {
        let base = x.matmul(&w.leaf(tape).transpose()?)?;
        match self.adapters.get(w.name()) {
            None => Ok(base),
            Some(adapter) => {
                let branch = adapter.branch(tape, x, mode)?;
                base.add(&branch)
            }
        }
    }

    fn embed(&self, tape: &Tape<T>, tokens: &[usize]) -> Result<Tensor<T>> {
        for &t in tokens {
            if t >= self.config.vocab_size {
                return Err(Error::Index(format!(
                    "token id {t} exceeds vocab size {}",
                    self.config.vocab_size
                )));
            }
        }
        let mut x = self.embedding.leaf(tape).embedding(tokens)?;
        if let Some((gain, bias)) = &self.embed_norm {
            x = x.layer_norm(&gain.leaf(tape), &bias.leaf(tape), T::from_f64(LN_EPS))?;
        }
        Ok(x)
    }

    /// Token embeddings after the optional post-embedding layernorm.
    pub fn embed_tokens(&self, tape: &Tape<T>, tokens: &[usize]) -> Result<Tensor<T>> {
        self.embed(tape, tokens)
    }

    /// Logits `[len(tokens) × vocab]` for the given tokens.
    ///
    /// Without a cache the tokens start at position 0 under the variant's
    /// full attention mask. With a cache the tokens continue at the cache's
    /// next absolute position; per layer, keys/values are appended to the
    /// cache and attention runs over the gathered cache plus the chunk. The
    /// cache timestep counter advances by `len(tokens)` on success.
    pub fn forward(
        &self,
        tape: &Tape<T>,
        tokens: &[usize],
        cache: Option<&mut RollingKVCache<T>>,
    ) -> Result<Tensor<T>> {
        self.forward_mode(tape, tokens, cache, &mut ForwardMode::Eval)
    }

    pub fn forward_mode(
        &self,
        tape: &Tape<T>,
        tokens: &[usize],
        cache: Option<&mut RollingKVCache<T>>,
        mode: &mut ForwardMode<'_>,
    ) -> Result<Tensor<T>> {
        match cache {
            None => self.forward_inner(tape, tokens, None, mode).map(|(l, _)| l),
            Some(cache) => {
                self.check_cache(cache, tokens.len())?;
                let (logits, _) = self.forward_inner(tape, tokens, Some(cache), mode)?;
                Ok(logits)
            }
        }
    }

    /// Cacheless forward that also returns each layer's output states,
    /// ordered layer 0 upward.
    pub fn forward_traced(
        &self,
        tape: &Tape<T>,
        tokens: &[usize],
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        self.forward_inner(tape, tokens, None, &mut ForwardMode::Eval)
    }

    fn check_cache(&self, cache: &RollingKVCache<T>, new_tokens: usize) -> Result<()> {
        let expected = self
            .config
            .window()
            .unwrap_or(self.config.max_seq_len);
        if cache.window() != expected || cache.n_layers() != self.config.n_layers {
            return Err(Error::Config(format!(
                "cache (window {}, layers {}) does not match model (window {}, layers {})",
                cache.window(),
                cache.n_layers(),
                expected,
                self.config.n_layers
            )));
        }
        // Without a window, eviction would silently change attention.
        if self.config.window().is_none() && cache.next_pos() + new_tokens > cache.window() {
            return Err(Error::Length {
                len: cache.next_pos() + new_tokens,
                max: cache.window(),
            });
        }
        Ok(())
    }

    fn forward_inner(
        &self,
        tape: &Tape<T>,
        tokens: &[usize],
        mut cache: Option<&mut RollingKVCache<T>>,
        mode: &mut ForwardMode<'_>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        if tokens.is_empty() {
            return Err(Error::Contract("forward on an empty token sequence".into()));
        }
        let base = cache.as_ref().map_or(0, |c| c.next_pos());
        if cache.is_none() && tokens.len() > self.config.max_seq_len {
            return Err(Error::Length {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        let n = tokens.len();
        let d = self.config.d_model;
        let dh = self.config.head_dim();
        let query_pos: Vec<usize> = (base..base + n).collect();

        let mut x = self.embed(tape, tokens)?;
        let mut traced = Vec::new();

        for (layer, blk) in self.blocks.iter().enumerate() {
            let normed = x.layer_norm(
                &blk.attn_norm_gain.leaf(tape),
                &blk.attn_norm_bias.leaf(tape),
                T::from_f64(LN_EPS),
            )?;
            let q = self.project(tape, &normed, &blk.wq, mode)?;
            let k = self.project(tape, &normed, &blk.wk, mode)?;
            let v = self.project(tape, &normed, &blk.wv, mode)?;

            // Cached context is gathered before this chunk's keys/values are
            // written, so rows early in the chunk still see entries the
            // chunk itself is about to evict. Keys enter the cache already
            // rotated; absolute positions are never re-based.
            let cached = match cache.as_deref_mut() {
                Some(c) => {
                    let ctx = c.gather(layer)?;
                    let kd = k.to_vec();
                    let vd = v.to_vec();
                    let mut pos: Vec<usize> = ctx.iter().map(|e| e.pos).collect();
                    pos.extend(&query_pos);
                    let total = pos.len();
                    let mut k_data = Vec::with_capacity(total * d);
                    let mut v_data = Vec::with_capacity(total * d);
                    for e in &ctx {
                        k_data.extend_from_slice(&e.key);
                        v_data.extend_from_slice(&e.value);
                    }
                    for r in 0..n {
                        let mut k_row = kd[r * d..(r + 1) * d].to_vec();
                        if self.uses_rope() {
                            rope_row_in_place(&mut k_row, query_pos[r], dh);
                        }
                        let v_row = vd[r * d..(r + 1) * d].to_vec();
                        c.append(layer, k_row.clone(), v_row.clone())?;
                        k_data.extend_from_slice(&k_row);
                        v_data.extend_from_slice(&v_row);
                    }
                    let k_all = tape.constant(k_data, &[total, d])?;
                    let v_all = tape.constant(v_data, &[total, d])?;
                    Some((pos, k_all, v_all))
                }
                None => None,
            };
            let using_cache = cached.is_some();
            let (key_pos, k_all, v_all) = match cached {
                Some(triple) => triple,
                None => (query_pos.clone(), k.clone(), v.clone()),
            };

            let mask = match self.config.attention {
                AttentionVariant::SlidingWindow { window } => {
                    AttentionMask::sliding_window(&query_pos, &key_pos, window)?
                }
                AttentionVariant::Alibi => AttentionMask::causal(&query_pos, &key_pos),
            };

            let scale = T::from_f64(1.0 / (dh as f64).sqrt());
            let mut head_outputs = Vec::with_capacity(self.config.n_heads);
            for h in 0..self.config.n_heads {
                let mut q_h = q.slice_cols(h * dh, dh)?;
                let mut k_h = k_all.slice_cols(h * dh, dh)?;
                if self.uses_rope() {
                    q_h = q_h.rope(&query_pos)?;
                    if !using_cache {
                        // with a cache, keys were rotated before caching
                        k_h = k_h.rope(&key_pos)?;
                    }
                }
                let v_h = v_all.slice_cols(h * dh, dh)?;
                let mut scores = q_h.matmul(&k_h.transpose()?)?.scale(scale);
                if matches!(self.config.attention, AttentionVariant::Alibi) {
                    let slope = alibi_slope(h, self.config.n_heads);
                    let mut bias = Vec::with_capacity(n * key_pos.len());
                    for &qp in &query_pos {
                        for &kp in &key_pos {
                            bias.push(alibi_bias_value::<T>(slope, qp, kp));
                        }
                    }
                    let bias = tape.constant(bias, &[n, key_pos.len()])?;
                    scores = scores.add(&bias)?;
                }
                let scores = scores.mask_fill(mask.as_slice())?;
                let attn = scores.softmax_rows()?;
                head_outputs.push(attn.matmul(&v_h)?);
            }
            let merged = Tensor::concat_cols(&head_outputs)?;
            let attn_out = self.project(tape, &merged, &blk.wo, mode)?;
            x = x.add(&attn_out)?;

            let normed2 = x.layer_norm(
                &blk.ffn_norm_gain.leaf(tape),
                &blk.ffn_norm_bias.leaf(tape),
                T::from_f64(LN_EPS),
            )?;
            let hidden = self.project(tape, &normed2, &blk.ff_in, mode)?;
            let hidden = match self.config.attention {
                AttentionVariant::SlidingWindow { .. } => hidden.silu(),
                AttentionVariant::Alibi => hidden.gelu(),
            };
            let ffn_out = self.project(tape, &hidden, &blk.ff_out, mode)?;
            x = x.add(&ffn_out)?;
            traced.push(x.clone());
        }

        let logits = self.project(tape, &x, &self.head, mode)?;
        if let Some(c) = cache {
            c.advance(n)?;
        }
        Ok((logits, traced))
    }

    fn uses_rope(&self) -> bool {
        matches!(self.config.attention, AttentionVariant::SlidingWindow { .. })
    }
}

/// Rotate one `[d_model]` row in place, pair-wise per head.
fn rope_row_in_place<T: Scalar>(row: &mut [T], pos: usize, head_dim: usize) {
    for head_start in (0..row.len()).step_by(head_dim) {
        for pair in 0..head_dim / 2 {
            let theta = (pos as f64)
                * (10_000f64).powf(-2.0 * pair as f64 / head_dim as f64);
            let (sin, cos) = (T::from_f64(theta.sin()), T::from_f64(theta.cos()));
            let i0 = head_start + 2 * pair;
            let i1 = i0 + 1;
            let (x0, x1) = (row[i0], row[i1]);
            row[i0] = x0 * cos - x1 * sin;
            row[i1] = x0 * sin + x1 * cos;
        }
    }
}
