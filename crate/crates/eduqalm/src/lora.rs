//! Low-rank adaptation.
//!
//! For a frozen base weight `W0 [d×k]`, an adapter keeps a trainable pair
//! `W_up [d×r]` (zero at construction) and `W_down [r×k]` (Gaussian at
//! construction), and computes
//!
//! ```text
//! h_out = W0·h_in + (alpha/r) · W_up · (W_down · h_in)
//! ```
//!
//! as two rank-r products, never materializing the `[d×k]` update. Because
//! `W_up` starts at zero the update is exactly zero at attachment, so a
//! freshly adapted model is indistinguishable from its base. After training,
//! [`LoraAdapter::merge`] folds the update into the base weight so inference
//! carries no adapter overhead.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{DecoderModel, ForwardMode, Param};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// Attachment settings. Rank and dropout default to 128 / 0.1; alpha
/// defaults to the rank, making the scale factor one.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Target weight names; `None` selects every attention projection.
    pub targets: Option<Vec<String>>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 128,
            alpha: 128.0,
            dropout: 0.1,
            targets: None,
        }
    }
}

pub struct LoraAdapter<T: Scalar> {
    target: String,
    rank: usize,
    alpha: f64,
    dropout: f64,
    up: Param<T>,
    down: Param<T>,
}

impl<T: Scalar> Clone for LoraAdapter<T> {
    fn clone(&self) -> Self {
        LoraAdapter {
            target: self.target.clone(),
            rank: self.rank,
            alpha: self.alpha,
            dropout: self.dropout,
            up: self.up.clone(),
            down: self.down.clone(),
        }
    }
}

impl<T: Scalar> LoraAdapter<T> {
    /// Fresh adapter for a `[d×k]` base weight: `W_up = 0`,
    /// `W_down ~ N(0, 1/r)`, so the initial update is exactly zero.
    pub fn new(
        target: impl Into<String>,
        d: usize,
        k: usize,
        rank: usize,
        alpha: f64,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if rank == 0 || rank > d.min(k) {
            return Err(Error::Config(format!(
                "rank {rank} must be in [1, min(d={d}, k={k})]"
            )));
        }
        if alpha.is_nan() || alpha <= 0.0 {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0,1), got {dropout}"
            )));
        }
        let target = target.into();
        let normal = Normal::new(0.0, (rank as f64).powf(-0.5)).expect("positive std");
        let down_data: Vec<T> = (0..rank * k)
            .map(|_| T::from_f64(normal.sample(rng)))
            .collect();
        Ok(LoraAdapter {
            up: Param::new(format!("{target}.lora_up"), vec![T::zero(); d * rank], vec![d, rank]),
            down: Param::new(format!("{target}.lora_down"), down_data, vec![rank, k]),
            target,
            rank,
            alpha,
            dropout,
        })
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn up_param(&self) -> &Param<T> {
        &self.up
    }

    pub fn down_param(&self) -> &Param<T> {
        &self.down
    }

    /// `(d, k)` of the base weight this adapter shadows.
    pub fn base_shape(&self) -> (usize, usize) {
        (self.up.shape()[0], self.down.shape()[1])
    }

    pub fn scaling(&self) -> T {
        T::from_f64(self.alpha / self.rank as f64)
    }

    /// Trainable parameters of the pair: `r·(d+k)`.
    pub fn trainable_params(&self) -> usize {
        self.up.numel() + self.down.numel()
    }

    /// `h_out = W0·h_in + (alpha/r)·W_up·(W_down·h_in)` on plain vectors,
    /// factored through the two rank-r products. Eval semantics: no
    /// dropout.
    pub fn apply(&self, w0: &[T], h_in: &[T]) -> Result<Vec<T>> {
        let (d, k) = self.base_shape();
        if w0.len() != d * k || h_in.len() != k {
            return Err(Error::Dimension {
                op: "lora_apply",
                lhs: vec![w0.len(), h_in.len()],
                rhs: vec![d, k],
            });
        }
        let down = self.down.values();
        let up = self.up.values();
        // t = W_down · h  [r]
        let mut t = vec![T::zero(); self.rank];
        for r in 0..self.rank {
            let mut s = T::zero();
            for c in 0..k {
                s += down[r * k + c] * h_in[c];
            }
            t[r] = s;
        }
        let scale = self.scaling();
        let mut out = vec![T::zero(); d];
        for row in 0..d {
            let mut base = T::zero();
            for c in 0..k {
                base += w0[row * k + c] * h_in[c];
            }
            let mut adapt = T::zero();
            for r in 0..self.rank {
                adapt += up[row * self.rank + r] * t[r];
            }
            out[row] = base + scale * adapt;
        }
        Ok(out)
    }

    /// `W0 + (alpha/r)·W_up·W_down`. Merging the same adapter twice adds
    /// the update twice; this is not idempotent by construction.
    pub fn merge(&self, w0: &[T]) -> Result<Vec<T>> {
        let (d, k) = self.base_shape();
        if w0.len() != d * k {
            return Err(Error::Dimension {
                op: "lora_merge",
                lhs: vec![w0.len()],
                rhs: vec![d, k],
            });
        }
        let down = self.down.values();
        let up = self.up.values();
        let scale = self.scaling();
        let mut merged = w0.to_vec();
        for row in 0..d {
            for c in 0..k {
                let mut delta = T::zero();
                for r in 0..self.rank {
                    delta += up[row * self.rank + r] * down[r * k + c];
                }
                merged[row * k + c] += scale * delta;
            }
        }
        Ok(merged)
    }

    /// Tape-side adapter branch for an `[n×k]` activation batch:
    /// `(alpha/r) · (drop(x)·W_downᵀ) · W_upᵀ`. Dropout hits only this
    /// branch's input, and only in training mode.
    pub fn branch(
        &self,
        tape: &Tape<T>,
        x: &Tensor<T>,
        mode: &mut ForwardMode<'_>,
    ) -> Result<Tensor<T>> {
        let input = match mode {
            ForwardMode::Train { dropout_rng } if self.dropout > 0.0 => {
                x.dropout(self.dropout, *dropout_rng)?
            }
            _ => x.clone(),
        };
        let projected = input.matmul(&self.down.leaf(tape).transpose()?)?;
        let lifted = projected.matmul(&self.up.leaf(tape).transpose()?)?;
        Ok(lifted.scale(self.scaling()))
    }
}

/// How many times smaller the adapter pair is than its base weight:
/// `dk / (r·(d+k))`.
pub fn reduction_factor(d: usize, k: usize, r: usize) -> f64 {
    (d as f64 * k as f64) / (r as f64 * (d + k) as f64)
}

/// A human-readable note when the adapter would not actually shrink the
/// trainable parameter count.
pub fn reduction_warning(d: usize, k: usize, r: usize) -> Option<String> {
    let factor = reduction_factor(d, k, r);
    (factor <= 1.0).then(|| {
        format!(
            "rank {r} adapter on a {d}x{k} weight trains {:.2}x the base parameters (reduction factor {factor:.2})",
            1.0 / factor
        )
    })
}

impl<T: Scalar> DecoderModel<T> {
    /// Attach fresh adapters to the named projection weights, freezing every
    /// base parameter. Trainable parameters afterwards: `Σ rᵢ·(dᵢ+kᵢ)`.
    pub fn attach_lora(&mut self, config: &LoraConfig, seed: u64) -> Result<()> {
        let targets = match &config.targets {
            Some(t) => t.clone(),
            None => self.attention_projection_names(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adapters = Vec::with_capacity(targets.len());
        for target in &targets {
            if self.adapters().contains_key(target) {
                return Err(Error::Config(format!("target {target} already adapted")));
            }
            let (d, k) = self.projection_shape(target).ok_or_else(|| {
                Error::Config(format!("unknown adapter target {target}"))
            })?;
            adapters.push(LoraAdapter::new(
                target.clone(),
                d,
                k,
                config.rank,
                config.alpha,
                config.dropout,
                &mut rng,
            )?);
        }
        self.set_base_trainable(false);
        for adapter in adapters {
            self.adapters_mut().insert(adapter.target().to_string(), adapter);
        }
        Ok(())
    }

    /// Fold every adapter into its base weight and return the resulting
    /// plain model (no adapters, all parameters trainable again).
    pub fn merge_adapters(&self) -> Result<DecoderModel<T>> {
        let mut merged = self.clone();
        let adapters: Vec<LoraAdapter<T>> = merged.adapters().values().cloned().collect();
        for adapter in adapters {
            let base = merged
                .param_by_name(adapter.target())
                .ok_or_else(|| Error::Config(format!("missing target {}", adapter.target())))?;
            let new_data = adapter.merge(&base.to_vec())?;
            base.set_data(new_data)?;
        }
        merged.adapters_mut().clear();
        merged.set_base_trainable(true);
        Ok(merged)
    }
}
