//! Toy LLaMA-style causal decoder with adapters grafted onto every linear.
//!
//! Each block is pre-norm: RMSNorm → causal multi-head attention with rotary
//! embeddings → residual, then RMSNorm → gated FFN `W_d(W_u x · silu(W_g x))`
//! → residual. The q/k/v/o projections carry plain LoRA and the three FFN
//! linears carry MoLoRA. The output head is tied to the token embedding.
//! All base tensors are frozen.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{normal_vec, AdaptedLinear, LoraAdapter, MoLoraLayer, Routing};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{causal_attention, no_grad, rmsnorm, rope, silu, Float, Tensor};

/// The three MoLoRA-carrying FFN linears.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnSlot {
    Gate,
    Up,
    Down,
}

impl FfnSlot {
    pub const ALL: [FfnSlot; 3] = [FfnSlot::Gate, FfnSlot::Up, FfnSlot::Down];

    pub fn name(self) -> &'static str {
        match self {
            FfnSlot::Gate => "gate",
            FfnSlot::Up => "up",
            FfnSlot::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|slot| slot.name() == s)
    }
}

impl fmt::Display for FfnSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Routing decisions of one MoLoRA slot for every position of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotRouting {
    pub layer: usize,
    pub slot: FfnSlot,
    pub routing: Routing,
}

/// Whether adapters take part in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Adapted,
    /// Frozen base weights only.
    Base,
}

/// Collected side outputs of a forward pass.
#[derive(Default)]
pub struct ForwardExtras<T: Float> {
    /// Filled when tracing is requested.
    pub routing: Vec<SlotRouting>,
    /// Sum of per-slot balance losses, when requested.
    pub balance_loss: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Block<T: Float> {
    pub attn_norm: Tensor<T>,
    pub q: AdaptedLinear<T>,
    pub k: AdaptedLinear<T>,
    pub v: AdaptedLinear<T>,
    pub o: AdaptedLinear<T>,
    pub ffn_norm: Tensor<T>,
    pub gate: AdaptedLinear<T>,
    pub up: AdaptedLinear<T>,
    pub down: AdaptedLinear<T>,
}

struct Ctx<'a, T: Float> {
    mode: Mode,
    layer: usize,
    trace: bool,
    balance: bool,
    extras: &'a mut ForwardExtras<T>,
}

impl<T: Float> Ctx<'_, T> {
    fn apply(&mut self, lin: &AdaptedLinear<T>, x: &Tensor<T>, slot: Option<FfnSlot>) -> Result<Tensor<T>> {
        if self.mode == Mode::Base {
            return lin.forward_base(x);
        }
        let (y, detail) = lin.forward(x, self.balance)?;
        if let Some(detail) = detail {
            if let Some(aux) = detail.balance_loss {
                self.extras.balance_loss = Some(match self.extras.balance_loss.take() {
                    None => aux,
                    Some(acc) => acc.add(&aux)?,
                });
            }
            if self.trace {
                if let Some(slot) = slot {
                    self.extras.routing.push(SlotRouting {
                        layer: self.layer,
                        slot,
                        routing: detail.routing,
                    });
                }
            }
        }
        Ok(y)
    }
}

impl<T: Float> Block<T> {
    fn attention(&self, cfg: &ModelConfig, x: &Tensor<T>, ctx: &mut Ctx<'_, T>) -> Result<Tensor<T>> {
        let t = x.shape()[0];
        if t > cfg.max_seq_len {
            return Err(Error::Length {
                len: t,
                max: cfg.max_seq_len,
            });
        }
        let q = rope(&ctx.apply(&self.q, x, None)?, cfg.n_heads, cfg.rope_base)?;
        let k = rope(&ctx.apply(&self.k, x, None)?, cfg.n_heads, cfg.rope_base)?;
        let v = ctx.apply(&self.v, x, None)?;
        let a = causal_attention(&q, &k, &v, cfg.n_heads)?;
        ctx.apply(&self.o, &a, None)
    }

    fn ffn(&self, x: &Tensor<T>, ctx: &mut Ctx<'_, T>) -> Result<Tensor<T>> {
        let g = ctx.apply(&self.gate, x, Some(FfnSlot::Gate))?;
        let u = ctx.apply(&self.up, x, Some(FfnSlot::Up))?;
        let h = u.mul(&silu(&g))?;
        ctx.apply(&self.down, &h, Some(FfnSlot::Down))
    }

    /// Causal attention sub-layer (without norm or residual) on `x[T×d]`.
    pub fn attention_forward(&self, cfg: &ModelConfig, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        check_width(x, cfg.model_dim)?;
        let mut extras = ForwardExtras::default();
        let mut ctx = Ctx {
            mode,
            layer: 0,
            trace: false,
            balance: false,
            extras: &mut extras,
        };
        self.attention(cfg, x, &mut ctx)
    }

    /// Gated FFN sub-layer (without norm or residual) on `x[T×d]`.
    pub fn ffn_forward(&self, cfg: &ModelConfig, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        check_width(x, cfg.model_dim)?;
        let mut extras = ForwardExtras::default();
        let mut ctx = Ctx {
            mode,
            layer: 0,
            trace: false,
            balance: false,
            extras: &mut extras,
        };
        self.ffn(x, &mut ctx)
    }

    fn slots(&self) -> [(&'static str, &AdaptedLinear<T>); 7] {
        [
            ("attn.q", &self.q),
            ("attn.k", &self.k),
            ("attn.v", &self.v),
            ("attn.o", &self.o),
            ("ffn.gate", &self.gate),
            ("ffn.up", &self.up),
            ("ffn.down", &self.down),
        ]
    }

    fn slots_mut(&mut self) -> [(&'static str, &mut AdaptedLinear<T>); 7] {
        [
            ("attn.q", &mut self.q),
            ("attn.k", &mut self.k),
            ("attn.v", &mut self.v),
            ("attn.o", &mut self.o),
            ("ffn.gate", &mut self.gate),
            ("ffn.up", &mut self.up),
            ("ffn.down", &mut self.down),
        ]
    }
}

fn check_width<T: Float>(x: &Tensor<T>, d: usize) -> Result<()> {
    if x.shape().len() != 2 || x.shape()[1] != d {
        return Err(Error::Shape {
            op: "decoder input",
            lhs: x.shape().to_vec(),
            rhs: vec![d],
        });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct DecoderModel<T: Float> {
    pub config: ModelConfig,
    /// `V × d`, shared with the output head.
    pub embedding: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Tensor<T>,
}

impl<T: Float> DecoderModel<T> {
    /// Frozen base from `config.base_seed`, fresh adapters from
    /// `adapter_seed`.
    pub fn new(config: ModelConfig, adapter_seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let f = config.ffn_dim();
        let a = &config.adapter;
        let mut base_rng = ChaCha8Rng::seed_from_u64(config.base_seed);
        let mut ad_rng = ChaCha8Rng::seed_from_u64(adapter_seed);

        let mut frozen = |rows: usize, cols: usize, std: f64| -> Result<Tensor<T>> {
            Tensor::new(normal_vec(&mut base_rng, rows * cols, std), &[rows, cols])
        };
        let embedding = frozen(config.vocab_size, d, 1.0)?;
        let mut base_blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let attn_std = 1.0 / (d as f64).sqrt();
            base_blocks.push([
                frozen(d, d, attn_std)?,
                frozen(d, d, attn_std)?,
                frozen(d, d, attn_std)?,
                frozen(d, d, attn_std)?,
                frozen(f, d, attn_std)?,
                frozen(f, d, attn_std)?,
                frozen(d, f, 1.0 / (f as f64).sqrt())?,
            ]);
        }

        let norm = |n: usize| -> Result<Tensor<T>> {
            let t = Tensor::new(vec![T::one(); n], &[n])?;
            t.set_requires_grad(config.train_norms);
            Ok(t)
        };
        let mut blocks = Vec::with_capacity(config.n_layers);
        for [wq, wk, wv, wo, wg, wu, wd] in base_blocks {
            let mut lora = |w: Tensor<T>| -> Result<AdaptedLinear<T>> {
                let (o, i) = (w.shape()[0], w.shape()[1]);
                let adapter = LoraAdapter::init_with(i, o, a.rank, a.alpha, a.a_init_std, &mut ad_rng)?;
                Ok(AdaptedLinear::lora(w, adapter))
            };
            let (q, k, v, o) = (lora(wq)?, lora(wk)?, lora(wv)?, lora(wo)?);
            let mut molora = |w: Tensor<T>| -> Result<AdaptedLinear<T>> {
                let mut m = MoLoraLayer::init_with(
                    w,
                    a.n_experts,
                    a.top_k,
                    a.rank,
                    a.alpha,
                    a.a_init_std,
                    a.router_init_std,
                    &mut ad_rng,
                )?;
                m.set_renormalize(a.renormalize);
                Ok(AdaptedLinear::MoLora(m))
            };
            let (gate, up, down) = (molora(wg)?, molora(wu)?, molora(wd)?);
            blocks.push(Block {
                attn_norm: norm(d)?,
                q,
                k,
                v,
                o,
                ffn_norm: norm(d)?,
                gate,
                up,
                down,
            });
        }
        Ok(Self {
            embedding,
            blocks,
            final_norm: norm(d)?,
            config,
        })
    }

    fn embed(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Length {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        let v = self.config.vocab_size;
        if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "token",
                index: bad,
                bound: v,
            });
        }
        self.embedding.index_rows(tokens)
    }

    /// Logits `[T × V]` for a token sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        self.forward_with(tokens, Mode::Adapted, &mut ForwardExtras::default(), false, false)
    }

    /// Logits of the frozen base model alone.
    pub fn forward_base(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        self.forward_with(tokens, Mode::Base, &mut ForwardExtras::default(), false, false)
    }

    /// Forward pass that also records per-token routing of every MoLoRA slot.
    pub fn forward_traced(&self, tokens: &[usize]) -> Result<(Tensor<T>, Vec<SlotRouting>)> {
        let mut extras = ForwardExtras::default();
        let logits = self.forward_with(tokens, Mode::Adapted, &mut extras, true, false)?;
        Ok((logits, extras.routing))
    }

    pub fn forward_with(
        &self,
        tokens: &[usize],
        mode: Mode,
        extras: &mut ForwardExtras<T>,
        trace: bool,
        balance: bool,
    ) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let eps = T::lit(cfg.norm_eps);
        let mut x = self.embed(tokens)?;
        for (layer, block) in self.blocks.iter().enumerate() {
            let mut ctx = Ctx {
                mode,
                layer,
                trace,
                balance,
                extras: &mut *extras,
            };
            let h = rmsnorm(&x, &block.attn_norm, eps)?;
            x = x.add(&block.attention(cfg, &h, &mut ctx)?)?;
            let h = rmsnorm(&x, &block.ffn_norm, eps)?;
            x = x.add(&block.ffn(&h, &mut ctx)?)?;
        }
        let h = rmsnorm(&x, &self.final_norm, eps)?;
        Ok(h.linear(&self.embedding)?
            .scale(T::one() / T::lit((cfg.model_dim as f64).sqrt())))
    }

    /// Greedy decoding. Returns the prompt followed by up to `max_new`
    /// generated tokens, stopping after `eos` or at `max_seq_len`.
    pub fn generate(&self, prompt: &[usize], max_new: usize, eos: Option<usize>) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::Empty("prompt".into()));
        }
        let mut seq = prompt.to_vec();
        no_grad(|| {
            for _ in 0..max_new {
                if seq.len() >= self.config.max_seq_len {
                    break;
                }
                let logits = self.forward(&seq)?;
                let v = self.config.vocab_size;
                let data = logits.data();
                let last = &data[(seq.len() - 1) * v..seq.len() * v];
                let next = argmax(last);
                drop(data);
                seq.push(next);
                if Some(next) == eos {
                    break;
                }
            }
            Ok(seq)
        })
    }

    /// Trainable tensors with dotted names, in a fixed order.
    pub fn named_trainable(&self) -> Vec<(String, Tensor<T>)> {
        self.named_tensors()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect()
    }

    pub fn trainable_params(&self) -> Vec<Tensor<T>> {
        self.named_trainable().into_iter().map(|(_, t)| t).collect()
    }

    /// Every tensor the model owns: adapters, routers, norms and frozen
    /// base weights.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![("embedding".to_string(), self.embedding.clone())];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), b.attn_norm.clone()));
            out.push((format!("layers.{i}.ffn_norm"), b.ffn_norm.clone()));
            for (name, slot) in b.slots() {
                let prefix = format!("layers.{i}.{name}");
                out.push((format!("{prefix}.weight"), slot.base_weight().clone()));
                out.extend(slot.named_params(&prefix));
            }
        }
        out.push(("final_norm".to_string(), self.final_norm.clone()));
        out
    }

    /// Frozen tensors (never updated by training).
    pub fn frozen_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.named_tensors()
            .into_iter()
            .filter(|(_, t)| !t.requires_grad())
            .collect()
    }

    /// Closed-form count of adapter and router parameters (plus norms when
    /// they are trainable).
    pub fn trainable_param_count(&self) -> usize {
        let mut n: usize = self
            .blocks
            .iter()
            .flat_map(|b| b.slots().map(|(_, s)| s.trainable_param_count()))
            .sum();
        if self.config.train_norms {
            n += (2 * self.blocks.len() + 1) * self.config.model_dim;
        }
        n
    }

    pub fn total_param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Toggle top-K weight renormalisation on every MoLoRA slot.
    pub fn set_renormalize(&mut self, on: bool) {
        self.config.adapter.renormalize = on;
        for b in &mut self.blocks {
            for (_, slot) in b.slots_mut() {
                if let AdaptedLinear::MoLora(m) = slot {
                    m.set_renormalize(on);
                }
            }
        }
    }

    /// Fold every plain-LoRA slot into a dense weight. MoLoRA slots are left
    /// untouched and reported by name.
    pub fn merge_lora(&self) -> Result<(DecoderModel<T>, Vec<String>)> {
        let mut merged = self.clone();
        let mut skipped = Vec::new();
        for (i, b) in merged.blocks.iter_mut().enumerate() {
            for (name, slot) in b.slots_mut() {
                let full = format!("layers.{i}.{name}");
                match slot.merge(&full) {
                    Ok(dense) => *slot = dense,
                    Err(Error::MergeRefused { .. }) => skipped.push(full),
                    Err(e) => return Err(e),
                }
            }
        }
        Ok((merged, skipped))
    }

    /// Dense weights of every merged slot.
    pub fn dense_slots(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, slot) in b.slots() {
                if let AdaptedLinear::Dense { weight } = slot {
                    out.push((format!("layers.{i}.{name}.weight"), weight.clone()));
                }
            }
        }
        out
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Float>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
