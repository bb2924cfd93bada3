//! LoRA and mixture-of-LoRA (MoLoRA) linear adapters.
//!
//! A plain [`LoraAdapter`] adds `(α/r)·B·A·x` to a frozen `W·x`. A
//! [`MoLoraLayer`] holds `N` such experts and a router `W_r`; each token is
//! routed independently to its top-K experts by `softmax(W_r·x)`, and the
//! selected expert outputs are mixed with the (optionally renormalised)
//! router probabilities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{softmax, Float, Tensor};

pub(crate) fn normal_vec<T: Float>(rng: &mut impl Rng, n: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    (0..n).map(|_| T::lit(dist.sample(rng))).collect()
}

/// Low-rank update `ΔW = (α/r)·B·A` for one linear layer.
#[derive(Clone, Debug)]
pub struct LoraAdapter<T: Float> {
    /// `r × d_in`, Gaussian at init.
    pub a: Tensor<T>,
    /// `d_out × r`, zero at init.
    pub b: Tensor<T>,
    rank: usize,
    alpha: f64,
}

impl<T: Float> LoraAdapter<T> {
    /// Fresh adapter seeded from `seed`: `B = 0`, `A ~ N(0, init_std²)`.
    pub fn init(d_in: usize, d_out: usize, rank: usize, alpha: f64, init_std: f64, seed: u64) -> Result<Self> {
        Self::init_with(d_in, d_out, rank, alpha, init_std, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn init_with(
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if rank == 0 || rank >= d_in.min(d_out) {
            return Err(Error::config(
                "adapter.rank",
                format!("rank {rank} must satisfy 1 <= r < min(d_in={d_in}, d_out={d_out})"),
            ));
        }
        if !(init_std > 0.0) || !init_std.is_finite() {
            return Err(Error::config(
                "adapter.a_init_std",
                format!("must be positive, got {init_std}"),
            ));
        }
        if !(alpha > 0.0) {
            return Err(Error::config("adapter.alpha", format!("must be positive, got {alpha}")));
        }
        let a = Tensor::param(normal_vec(rng, rank * d_in, init_std), &[rank, d_in])?;
        let b = Tensor::param(vec![T::zero(); d_out * rank], &[d_out, rank])?;
        Ok(Self { a, b, rank, alpha })
    }

    /// Build from explicit matrices (`a: r×d_in`, `b: d_out×r`).
    pub fn from_parts(a: Tensor<T>, b: Tensor<T>, alpha: f64) -> Result<Self> {
        let (&[rank, _], &[_, rb]) = (a.shape(), b.shape()) else {
            return Err(Error::Shape {
                op: "lora",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        };
        if rank != rb {
            return Err(Error::Shape {
                op: "lora",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(Self { a, b, rank, alpha })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    /// Effective scale `α / r`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `B·(A·x)`, unscaled.
    fn low_rank(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(&self.a)?.linear(&self.b)
    }

    /// `W·x + (α/r)·B·A·x`. `W` is `d_out × d_in`; `x` is `[… × d_in]`.
    pub fn forward(&self, w: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if w.shape() != [self.d_out(), self.d_in()] {
            return Err(Error::Shape {
                op: "lora_forward",
                lhs: w.shape().to_vec(),
                rhs: vec![self.d_out(), self.d_in()],
            });
        }
        let base = x.linear(w)?;
        let delta = self.low_rank(x)?.scale(T::lit(self.scale()));
        base.add(&delta)
    }

    /// Dense `W + (α/r)·B·A`. Pure: merging an already merged weight adds
    /// the update again.
    pub fn merge(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        let delta = self.b.matmul(&self.a)?.scale(T::lit(self.scale()));
        if delta.shape() != w.shape() {
            return Err(Error::Shape {
                op: "lora_merge",
                lhs: w.shape().to_vec(),
                rhs: delta.shape().to_vec(),
            });
        }
        w.detach().add(&delta.detach())
    }

    /// `r · (d_in + d_out)`
    pub fn trainable_param_count(&self) -> usize {
        self.rank * (self.d_in() + self.d_out())
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        vec![
            (format!("{prefix}.lora_a"), self.a.clone()),
            (format!("{prefix}.lora_b"), self.b.clone()),
        ]
    }
}

/// Per-token routing decisions for a batch of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    pub top_k: usize,
    /// `rows × K` expert indices, ascending within each row.
    pub indices: Vec<usize>,
    /// `rows × K` mixing weights aligned with `indices`.
    pub weights: Vec<f64>,
    /// Per row, the gap between the K-th and (K+1)-th router probability;
    /// infinite when K = N.
    pub margins: Vec<f64>,
}

impl Routing {
    pub fn rows(&self) -> usize {
        self.indices.len() / self.top_k.max(1)
    }

    pub fn token(&self, t: usize) -> (&[usize], &[f64]) {
        let k = self.top_k;
        (&self.indices[t * k..(t + 1) * k], &self.weights[t * k..(t + 1) * k])
    }
}

fn selection_margins<T: Float>(probs: &[T], n: usize, k: usize) -> Vec<f64> {
    probs
        .chunks(n)
        .map(|row| {
            if k >= n {
                return f64::INFINITY;
            }
            let mut sorted: Vec<f64> = row.iter().map(|p| p.as_f64()).collect();
            sorted.sort_by(|a, b| b.total_cmp(a));
            sorted[k - 1] - sorted[k]
        })
        .collect()
}

/// Indices of the `k` largest entries, ties broken toward the lower index,
/// returned in ascending index order.
pub fn top_k_indices<T: Float>(p: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&i, &j| {
        p[j].partial_cmp(&p[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut sel = order[..k.min(p.len())].to_vec();
    sel.sort_unstable();
    sel
}

/// Result of a MoLoRA forward pass.
pub struct MoLoraOutput<T: Float> {
    pub output: Tensor<T>,
    pub routing: Routing,
    /// Switch-style balance loss `N · Σ_e f_e · P_e`, when requested.
    pub balance_loss: Option<Tensor<T>>,
}

/// Frozen linear weight plus `N` LoRA experts behind a top-K router.
#[derive(Clone, Debug)]
pub struct MoLoraLayer<T: Float> {
    /// Frozen `d_out × d_in` base weight.
    pub base: Tensor<T>,
    pub experts: Vec<LoraAdapter<T>>,
    /// `N × d_in`, no bias.
    pub router: Tensor<T>,
    top_k: usize,
    renormalize: bool,
}

impl<T: Float> MoLoraLayer<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn init_with(
        base: Tensor<T>,
        n_experts: usize,
        top_k: usize,
        rank: usize,
        alpha: f64,
        a_init_std: f64,
        router_init_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let &[d_out, d_in] = base.shape() else {
            return Err(Error::Shape {
                op: "molora",
                lhs: base.shape().to_vec(),
                rhs: vec![],
            });
        };
        let experts = (0..n_experts)
            .map(|_| LoraAdapter::init_with(d_in, d_out, rank, alpha, a_init_std, rng))
            .collect::<Result<Vec<_>>>()?;
        let router = Tensor::param(normal_vec(rng, n_experts * d_in, router_init_std), &[n_experts, d_in])?;
        Self::from_parts(base, experts, router, top_k)
    }

    /// Assemble a layer from parts. Freezes `base`.
    pub fn from_parts(base: Tensor<T>, experts: Vec<LoraAdapter<T>>, router: Tensor<T>, top_k: usize) -> Result<Self> {
        let n = experts.len();
        if n == 0 {
            return Err(Error::config("adapter.n_experts", "must be at least 1"));
        }
        if top_k == 0 || top_k > n {
            return Err(Error::config(
                "adapter.top_k",
                format!("top_k {top_k} must lie in [1, {n}]"),
            ));
        }
        let (r, alpha) = (experts[0].rank, experts[0].alpha);
        if experts.iter().any(|e| e.rank != r || e.alpha != alpha) {
            return Err(Error::config("adapter", "all experts must share rank and alpha"));
        }
        let &[d_out, d_in] = base.shape() else {
            return Err(Error::Shape {
                op: "molora",
                lhs: base.shape().to_vec(),
                rhs: vec![],
            });
        };
        for e in &experts {
            if e.d_in() != d_in || e.d_out() != d_out {
                return Err(Error::Shape {
                    op: "molora expert",
                    lhs: vec![d_out, d_in],
                    rhs: vec![e.d_out(), e.d_in()],
                });
            }
        }
        if router.shape() != [n, d_in] {
            return Err(Error::Shape {
                op: "molora router",
                lhs: router.shape().to_vec(),
                rhs: vec![n, d_in],
            });
        }
        base.set_requires_grad(false);
        Ok(Self {
            base,
            experts,
            router,
            top_k,
            renormalize: true,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn d_in(&self) -> usize {
        self.base.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.base.shape()[0]
    }

    pub fn renormalize(&self) -> bool {
        self.renormalize
    }

    /// Switch between renormalised top-K weights (default) and raw softmax
    /// probabilities of the selected experts.
    pub fn set_renormalize(&mut self, on: bool) {
        self.renormalize = on;
    }

    /// `α / r` shared by all experts.
    pub fn scale(&self) -> f64 {
        self.experts[0].scale()
    }

    fn as_rows(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.last_dim() != self.d_in() || x.shape().is_empty() {
            return Err(Error::Shape {
                op: "molora_forward",
                lhs: x.shape().to_vec(),
                rhs: vec![self.d_in()],
            });
        }
        if x.shape().len() == 2 {
            Ok(x.clone())
        } else {
            x.reshape(&[x.rows(), self.d_in()])
        }
    }

    /// Router probabilities for each row of `x`, plus the selection.
    fn select(&self, x2: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let probs = softmax(&x2.linear(&self.router)?)?;
        let n = self.n_experts();
        let mut indices = Vec::with_capacity(x2.rows() * self.top_k);
        for row in probs.data().chunks(n) {
            indices.extend(top_k_indices(row, self.top_k));
        }
        Ok((probs, indices))
    }

    /// Top-K experts and mixing weights for every row of `x`.
    pub fn route(&self, x: &Tensor<T>) -> Result<Routing> {
        let x2 = self.as_rows(x)?.detach();
        let (probs, indices) = self.select(&x2)?;
        let weights = self.mixing_weights(&probs, &indices)?;
        let weights = weights.data().iter().map(|w| w.as_f64()).collect();
        let margins = selection_margins(&probs.data(), self.n_experts(), self.top_k);
        Ok(Routing {
            top_k: self.top_k,
            indices,
            weights,
            margins,
        })
    }

    fn mixing_weights(&self, probs: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
        let (n, k) = (self.n_experts(), self.top_k);
        let flat: Vec<usize> = indices.iter().enumerate().map(|(j, &e)| (j / k) * n + e).collect();
        let picked = probs.gather(&flat, &[indices.len() / k, k])?;
        Ok(if self.renormalize {
            picked.row_normalize()
        } else {
            picked
        })
    }

    /// `W·x + (α/r)·Σ_{i∈topK(x)} w_i·B_i·A_i·x`, routed per token.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_detailed(x, false)?.output)
    }

    pub fn forward_detailed(&self, x: &Tensor<T>, balance_loss: bool) -> Result<MoLoraOutput<T>> {
        let x2 = self.as_rows(x)?;
        let t = x2.rows();
        let k = self.top_k;
        let base = x2.linear(&self.base)?;
        let (probs, indices) = self.select(&x2)?;
        let weights = self.mixing_weights(&probs, &indices)?;

        let mut mixed: Option<Tensor<T>> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let slots: Vec<usize> = indices
                .iter()
                .enumerate()
                .filter(|(_, &i)| i == e)
                .map(|(j, _)| j)
                .collect();
            if slots.is_empty() {
                continue;
            }
            let rows: Vec<usize> = slots.iter().map(|j| j / k).collect();
            let w_e = weights.gather(&slots, &[slots.len()])?;
            let h = expert.low_rank(&x2.index_rows(&rows)?)?.scale_rows(&w_e)?;
            let contrib = h.scatter_rows(&rows, t)?;
            mixed = Some(match mixed {
                None => contrib,
                Some(acc) => acc.add(&contrib)?,
            });
        }
        let mixed = mixed.expect("every token selects at least one expert");
        let mut output = base.add(&mixed.scale(T::lit(self.scale())))?;
        if x.shape().len() != 2 {
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = self.d_out();
            output = output.reshape(&shape)?;
        }

        let balance_loss = if balance_loss {
            Some(self.balance_loss(&probs, &indices)?)
        } else {
            None
        };
        let routing = Routing {
            top_k: k,
            weights: weights.data().iter().map(|w| w.as_f64()).collect(),
            margins: selection_margins(&probs.data(), self.n_experts(), k),
            indices,
        };
        Ok(MoLoraOutput {
            output,
            routing,
            balance_loss,
        })
    }

    fn balance_loss(&self, probs: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
        let n = self.n_experts();
        let t = probs.rows();
        let mut frac = vec![T::zero(); n];
        for &e in indices {
            frac[e] += T::one();
        }
        let denom = T::lit(indices.len() as f64);
        // f_e / T, tiled per row, so that sum(probs * tiled) = Σ_e f_e · P_e
        let tiled: Vec<T> = (0..t).flat_map(|_| frac.iter().map(move |f| *f / denom)).collect();
        let tiled = Tensor::new(tiled, &[t, n])?;
        Ok(probs.mul(&tiled)?.sum().scale(T::lit(n as f64 / t as f64)))
    }

    /// `N·r·(d_in + d_out) + N·d_in`
    pub fn trainable_param_count(&self) -> usize {
        let n = self.n_experts();
        n * self.experts[0].trainable_param_count() + n * self.d_in()
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<_> = self
            .experts
            .iter()
            .enumerate()
            .flat_map(|(i, e)| e.named_params(&format!("{prefix}.experts.{i}")))
            .collect();
        out.push((format!("{prefix}.router"), self.router.clone()));
        out
    }
}

/// A frozen linear slot with its adapter: plain LoRA or MoLoRA.
#[derive(Clone, Debug)]
pub enum AdaptedLinear<T: Float> {
    Lora {
        weight: Tensor<T>,
        adapter: LoraAdapter<T>,
    },
    MoLora(MoLoraLayer<T>),
    /// Merged or adapter-free dense weight.
    Dense {
        weight: Tensor<T>,
    },
}

impl<T: Float> AdaptedLinear<T> {
    pub fn lora(weight: Tensor<T>, adapter: LoraAdapter<T>) -> Self {
        weight.set_requires_grad(false);
        AdaptedLinear::Lora { weight, adapter }
    }

    pub fn base_weight(&self) -> &Tensor<T> {
        match self {
            AdaptedLinear::Lora { weight, .. } | AdaptedLinear::Dense { weight } => weight,
            AdaptedLinear::MoLora(m) => &m.base,
        }
    }

    /// Adapter-equipped forward. Routing is returned for MoLoRA slots.
    pub fn forward(&self, x: &Tensor<T>, balance_loss: bool) -> Result<(Tensor<T>, Option<MoLoraOutput<T>>)> {
        match self {
            AdaptedLinear::Lora { weight, adapter } => Ok((adapter.forward(weight, x)?, None)),
            AdaptedLinear::Dense { weight } => Ok((x.linear(weight)?, None)),
            AdaptedLinear::MoLora(m) => {
                let out = m.forward_detailed(x, balance_loss)?;
                Ok((out.output.clone(), Some(out)))
            }
        }
    }

    /// Forward through the frozen weight only.
    pub fn forward_base(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(self.base_weight())
    }

    /// Fold a plain LoRA update into its weight. MoLoRA slots are refused,
    /// since no single dense matrix reproduces input-dependent routing.
    pub fn merge(&self, slot: &str) -> Result<AdaptedLinear<T>> {
        match self {
            AdaptedLinear::Lora { weight, adapter } => Ok(AdaptedLinear::Dense {
                weight: adapter.merge(weight)?,
            }),
            AdaptedLinear::Dense { weight } => Ok(AdaptedLinear::Dense { weight: weight.clone() }),
            AdaptedLinear::MoLora(_) => Err(Error::MergeRefused {
                slots: vec![slot.to_string()],
            }),
        }
    }

    pub fn trainable_param_count(&self) -> usize {
        match self {
            AdaptedLinear::Lora { adapter, .. } => adapter.trainable_param_count(),
            AdaptedLinear::MoLora(m) => m.trainable_param_count(),
            AdaptedLinear::Dense { .. } => 0,
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        match self {
            AdaptedLinear::Lora { adapter, .. } => adapter.named_params(prefix),
            AdaptedLinear::MoLora(m) => m.named_params(prefix),
            AdaptedLinear::Dense { .. } => vec![],
        }
    }
}
