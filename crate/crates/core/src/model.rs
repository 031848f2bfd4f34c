//! Toy language model assembling the attention and expert layers: shared
//! embedding, pre-normalized latent-attention blocks whose expert layer
//! consumes the post-attention state directly (the expert layer carries
//! its own residual), a final norm, and a linear output head.
//!
//! Embedding, head, norms and router affinities always run in full
//! precision; the `LinearMode` knob switches only the projection/FFN
//! matmuls between exact f64 and the emulated low-precision pipeline.

use rand::Rng;

use crate::fp8::LinearMode;
use crate::mla::{Mla, MlaConfig, RMSNORM_EPS};
use crate::moe::{route, ExpertConfig, ExpertFfn, MoeLayer, RoutingDecision};
use crate::tensor::{Param, Tape, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct ModelConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub mla: MlaConfig,
    pub experts: ExpertConfig,
    /// Init standard deviation for all learnable matrices.
    pub init_std: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.mla.validate()?;
        self.experts.validate()?;
        if self.mla.embed_dim != self.embed_dim || self.experts.embed_dim != self.embed_dim {
            return Err(Error::ShapeMismatch {
                op: "ModelConfig",
                expected: format!("embed_dim {}", self.embed_dim),
                got: "sub-config dims differ".into(),
            });
        }
        if self.vocab == 0 || self.layers == 0 {
            return Err(Error::ShapeMismatch {
                op: "ModelConfig",
                expected: "vocab > 0, layers > 0".into(),
                got: format!("{self:?}"),
            });
        }
        Ok(())
    }
}

/// Routing bookkeeping from one expert layer over one sequence, for
/// balance losses, bias updates and load diagnostics.
pub struct MoeTrace {
    /// `[T, N_r]` affinities, still attached to the tape.
    pub affinities: Tensor,
    /// Selected expert indices per token.
    pub selections: Vec<Vec<usize>>,
}

/// FFN half of a block: an expert layer or a plain dense gated FFN.
pub enum BlockFfn {
    Moe(MoeLayer),
    Dense(ExpertFfn),
}

/// Pre-norm attention plus the FFN half.
pub struct TransformerBlock {
    pub attn_norm_gain: Param,
    pub attn: Mla,
    pub ffn: BlockFfn,
}

impl TransformerBlock {
    pub fn init_moe<R: Rng>(cfg: &ModelConfig, gamma: f64, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attn_norm_gain: Param::new(Tensor::ones(&[cfg.embed_dim])),
            attn: Mla::init(cfg.mla, cfg.init_std, rng),
            ffn: BlockFfn::Moe(MoeLayer::init(cfg.experts, cfg.init_std, gamma, rng)?),
        })
    }

    pub fn init_dense<R: Rng>(
        embed_dim: usize,
        ffn_dim: usize,
        mla: MlaConfig,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        let ffn_cfg = ExpertConfig {
            shared_experts: 0,
            routed_experts: 1,
            active_experts: 1,
            embed_dim,
            ffn_dim,
        };
        Self {
            attn_norm_gain: Param::new(Tensor::ones(&[embed_dim])),
            attn: Mla::init(mla, init_std, rng),
            ffn: BlockFfn::Dense(ExpertFfn::init(&ffn_cfg, init_std, rng)),
        }
    }

    /// Causal pass over `[T, d]`. Returns the block output and, for expert
    /// blocks, the routing trace.
    pub fn forward_sequence(
        &self,
        hs: &Tensor,
        start: usize,
        tape: Option<&Tape>,
        mode: LinearMode,
        routing_bias: bool,
    ) -> Result<(Tensor, Option<MoeTrace>)> {
        let normed = hs.rmsnorm(&self.attn_norm_gain.read(tape), RMSNORM_EPS)?;
        let u = hs.add(&self.attn.forward_sequence(&normed, start, tape, mode)?)?;
        match &self.ffn {
            BlockFfn::Dense(ffn) => {
                let out = u.add(&ffn.forward(&u, tape, mode)?)?;
                Ok((out, None))
            }
            BlockFfn::Moe(layer) => {
                let t = u.lead_rows();
                let n = layer.cfg.routed_experts;
                let affinities = layer.router.affinity_batch(&u, tape)?;
                let mut decisions: Vec<RoutingDecision> = Vec::with_capacity(t);
                for i in 0..t {
                    let row = affinities.slice_rows(i, 1)?.reshape(&[n])?;
                    decisions.push(route(&row, &layer.router, &layer.cfg, routing_bias)?);
                }
                let out = layer.forward_batch(&u, &decisions, tape, mode)?;
                let selections = decisions.iter().map(|d| d.experts.clone()).collect();
                Ok((
                    out,
                    Some(MoeTrace {
                        affinities,
                        selections,
                    }),
                ))
            }
        }
    }

    pub fn params(&self) -> Vec<Param> {
        let mut p = vec![self.attn_norm_gain.clone()];
        p.extend(self.attn.params());
        match &self.ffn {
            BlockFfn::Moe(layer) => p.extend(layer.params()),
            BlockFfn::Dense(ffn) => p.extend(ffn.params()),
        }
        p
    }
}

/// The main model. The embedding and output head are independent
/// parameters here; auxiliary prediction stacks share them by cloning the
/// `Param` handles.
pub struct LanguageModel {
    pub cfg: ModelConfig,
    pub embedding: Param,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm_gain: Param,
    /// `[V, d]` output head; logits are `states * head^T`.
    pub head: Param,
}

/// Everything one forward pass produces besides the logits.
pub struct ForwardTrace {
    /// Post-final-norm representations `[T, d]` — the main-model states an
    /// auxiliary prediction stack starts from.
    pub states: Tensor,
    /// One routing trace per expert block.
    pub moe: Vec<MoeTrace>,
}

impl LanguageModel {
    pub fn init<R: Rng>(cfg: ModelConfig, gamma: f64, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            embedding: Param::new(Tensor::randn(&[cfg.vocab, cfg.embed_dim], cfg.init_std, rng)),
            blocks: (0..cfg.layers)
                .map(|_| TransformerBlock::init_moe(&cfg, gamma, rng))
                .collect::<Result<_>>()?,
            final_norm_gain: Param::new(Tensor::ones(&[cfg.embed_dim])),
            head: Param::new(Tensor::randn(&[cfg.vocab, cfg.embed_dim], cfg.init_std, rng)),
            cfg,
        })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput { op: "forward" });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::IndexOutOfRange {
                op: "forward",
                index: bad,
                limit: self.cfg.vocab,
            });
        }
        Ok(())
    }

    pub fn embed(&self, tokens: &[usize], tape: Option<&Tape>) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        self.embedding.read(tape).select_rows(tokens)
    }

    /// Full causal pass producing the final representations and the
    /// per-layer routing traces.
    pub fn forward_trace(
        &self,
        tokens: &[usize],
        tape: Option<&Tape>,
        mode: LinearMode,
        routing_bias: bool,
    ) -> Result<ForwardTrace> {
        let mut h = self.embed(tokens, tape)?;
        let mut moe = Vec::new();
        for block in &self.blocks {
            let (next, trace) = block.forward_sequence(&h, 0, tape, mode, routing_bias)?;
            h = next;
            if let Some(t) = trace {
                moe.push(t);
            }
        }
        let states = h.rmsnorm(&self.final_norm_gain.read(tape), RMSNORM_EPS)?;
        Ok(ForwardTrace { states, moe })
    }

    /// Logits `[T, V]` for every position.
    pub fn logits(&self, tokens: &[usize], tape: Option<&Tape>, mode: LinearMode) -> Result<Tensor> {
        let trace = self.forward_trace(tokens, tape, mode, true)?;
        self.head_logits(&trace.states, tape)
    }

    /// Applies the (full-precision) output head to representations.
    pub fn head_logits(&self, states: &Tensor, tape: Option<&Tape>) -> Result<Tensor> {
        states.matmul(&self.head.read(tape).transpose()?)
    }

    /// Mean next-token cross-entropy over positions `0..T-1` given states
    /// for tokens `0..T`, with targets `tokens[1..]`.
    pub fn next_token_loss(
        &self,
        states: &Tensor,
        tokens: &[usize],
        tape: Option<&Tape>,
    ) -> Result<Tensor> {
        let t = states.lead_rows();
        if tokens.len() != t || t < 2 {
            return Err(Error::ShapeMismatch {
                op: "next_token_loss",
                expected: format!("{t} tokens, T >= 2"),
                got: format!("{}", tokens.len()),
            });
        }
        let logits = self.head_logits(&states.slice_rows(0, t - 1)?, tape)?;
        let probs = logits.softmax_rows();
        let picked = probs.gather_cols(&tokens[1..])?;
        Ok(picked
            .ln_clamped(1e-30)
            .sum()
            .scale(-1.0 / (t - 1) as f64))
    }

    /// Greedy argmax continuation of `prompt` by `steps` tokens (full
    /// recompute per step).
    pub fn generate_greedy(&self, prompt: &[usize], steps: usize) -> Result<Vec<usize>> {
        let mut seq = prompt.to_vec();
        for _ in 0..steps {
            let logits = self.logits(&seq, None, LinearMode::Exact)?;
            seq.push(argmax_row(&logits, seq.len() - 1));
        }
        Ok(seq)
    }

    /// Every trainable parameter, deduplicated by storage identity.
    pub fn params(&self) -> Vec<Param> {
        let mut all = vec![self.embedding.clone()];
        for b in &self.blocks {
            all.extend(b.params());
        }
        all.push(self.final_norm_gain.clone());
        all.push(self.head.clone());
        dedup_params(all)
    }
}

/// Index of the largest entry in row `row`; ties go to the lowest index.
pub fn argmax_row(logits: &Tensor, row: usize) -> usize {
    let n = logits.last_dim();
    let slice = &logits.data()[row * n..(row + 1) * n];
    let mut best = 0usize;
    for (i, &v) in slice.iter().enumerate() {
        if v > slice[best] {
            best = i;
        }
    }
    best
}

/// Removes aliases of the same parameter storage (shared embeddings/heads
/// must be stepped exactly once per update).
pub fn dedup_params(params: Vec<Param>) -> Vec<Param> {
    let mut seen = std::collections::HashSet::new();
    params
        .into_iter()
        .filter(|p| seen.insert(p.value().data().as_ptr() as usize))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_model_config() -> ModelConfig {
        let mut mla = MlaConfig::new(8, 2, 3, 4, 4, 2).unwrap();
        mla.latent_norm = true;
        ModelConfig {
            vocab: 11,
            embed_dim: 8,
            layers: 2,
            mla,
            experts: ExpertConfig {
                shared_experts: 1,
                routed_experts: 4,
                active_experts: 2,
                embed_dim: 8,
                ffn_dim: 12,
            },
            init_std: 0.08,
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = LanguageModel::init(tiny_model_config(), 0.001, &mut rng).unwrap();
        let tokens = [1usize, 3, 5, 7, 2];
        let a = model.logits(&tokens, None, LinearMode::Exact).unwrap();
        let b = model.logits(&tokens, None, LinearMode::Exact).unwrap();
        assert_eq!(a.shape(), &[5, 11]);
        assert_eq!(a.data(), b.data(), "same input must give identical bits");
    }

    #[test]
    fn rejects_out_of_vocab_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = LanguageModel::init(tiny_model_config(), 0.001, &mut rng).unwrap();
        assert!(model.logits(&[], None, LinearMode::Exact).is_err());
        assert!(model.logits(&[11], None, LinearMode::Exact).is_err());
    }

    #[test]
    fn traces_cover_every_expert_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = LanguageModel::init(tiny_model_config(), 0.001, &mut rng).unwrap();
        let trace = model
            .forward_trace(&[1, 2, 3, 4], None, LinearMode::Exact, true)
            .unwrap();
        assert_eq!(trace.moe.len(), 2);
        for t in &trace.moe {
            assert_eq!(t.selections.len(), 4);
            for sel in &t.selections {
                assert_eq!(sel.len(), 2);
            }
        }
    }

    #[test]
    fn training_step_reduces_loss() {
        use crate::tensor::{adamw_step, AdamWConfig, AdamWState, Tape};
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = LanguageModel::init(tiny_model_config(), 0.001, &mut rng).unwrap();
        let tokens = [1usize, 4, 2, 8, 3, 6];
        let params = model.params();
        let mut states: Vec<AdamWState> = params
            .iter()
            .map(|p| {
                AdamWState::new(
                    p.value().numel(),
                    AdamWConfig {
                        learning_rate: 0.02,
                        weight_decay: 0.0,
                        ..Default::default()
                    },
                )
            })
            .collect();
        let loss_at = |model: &LanguageModel| -> f64 {
            let trace = model
                .forward_trace(&tokens, None, LinearMode::Exact, true)
                .unwrap();
            model
                .next_token_loss(&trace.states, &tokens, None)
                .unwrap()
                .item()
                .unwrap()
        };
        let before = loss_at(&model);
        for _ in 0..20 {
            let tape = Tape::new();
            let trace = model
                .forward_trace(&tokens, Some(&tape), LinearMode::Exact, true)
                .unwrap();
            let loss = model
                .next_token_loss(&trace.states, &tokens, Some(&tape))
                .unwrap();
            let grads = loss.backward().unwrap();
            for (p, st) in params.iter().zip(states.iter_mut()) {
                if let Some(g) = grads.wrt_param(p) {
                    let updated = adamw_step(&p.value(), g, st).unwrap();
                    p.set(updated);
                }
            }
        }
        let after = loss_at(&model);
        assert!(
            after < before,
            "training did not reduce loss: {before} -> {after}"
        );
    }

    #[test]
    fn params_dedup_shared_storage() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = LanguageModel::init(tiny_model_config(), 0.001, &mut rng).unwrap();
        let mut params = model.params();
        let n = params.len();
        params.push(model.embedding.clone());
        assert_eq!(dedup_params(params).len(), n);
    }
}
