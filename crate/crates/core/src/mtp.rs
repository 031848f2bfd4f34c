//! Multi-token prediction: a stack of sequential depth-k modules that
//! extend the main model's representations one future token at a time,
//! keeping the full causal chain at every depth. The stack borrows the
//! main model's embedding and output head (the same parameter storage, so
//! gradients and updates are physically shared) and can be discarded at
//! inference without touching the main model.

use rand::Rng;

use crate::fp8::LinearMode;
use crate::mla::RMSNORM_EPS;
use crate::model::{argmax_row, LanguageModel, TransformerBlock};
use crate::tensor::{Param, Tape, Tensor};
use crate::{Error, Result};

/// Probability floor inside the cross-entropy logs.
pub const LOG_FLOOR: f64 = 1e-30;

/// One prediction depth: the 2d -> d combining projection, the two input
/// norms, one transformer block, and a final norm before the shared head.
pub struct MtpModule {
    /// `[d, 2d]` projection applied to `[norm(h_prev); norm(emb)]`.
    pub proj: Param,
    pub prev_norm_gain: Param,
    pub emb_norm_gain: Param,
    pub block: TransformerBlock,
    pub out_norm_gain: Param,
}

/// Depth-D prediction stack sharing the main model's embedding and head.
pub struct MtpStack {
    pub depth: usize,
    /// Loss weight (lambda).
    pub lambda: f64,
    pub modules: Vec<MtpModule>,
    /// Same storage as the main model's embedding.
    pub embedding: Param,
    /// Same storage as the main model's output head.
    pub head: Param,
    pub embed_dim: usize,
    pub vocab: usize,
}

/// Per-depth representations and probability rows.
pub struct MtpOutputs {
    /// Depth k (1-based) holds `[T-k, d]` representations...
    pub reps: Vec<Tensor>,
    /// ...and `[T-k, V]` probability rows (each row sums to 1).
    pub probs: Vec<Tensor>,
}

impl MtpStack {
    /// Builds a stack whose embedding/head PHYSICALLY alias the model's.
    pub fn init<R: Rng>(
        model: &LanguageModel,
        depth: usize,
        lambda: f64,
        dense_ffn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::EmptyInput { op: "MtpStack" });
        }
        let d = model.cfg.embed_dim;
        let modules = (0..depth)
            .map(|_| MtpModule {
                proj: Param::new(Tensor::randn(&[d, 2 * d], model.cfg.init_std, rng)),
                prev_norm_gain: Param::new(Tensor::ones(&[d])),
                emb_norm_gain: Param::new(Tensor::ones(&[d])),
                block: TransformerBlock::init_dense(
                    d,
                    dense_ffn_dim,
                    model.cfg.mla,
                    model.cfg.init_std,
                    rng,
                ),
                out_norm_gain: Param::new(Tensor::ones(&[d])),
            })
            .collect();
        Ok(Self {
            depth,
            lambda,
            modules,
            embedding: model.embedding.clone(),
            head: model.head.clone(),
            embed_dim: d,
            vocab: model.cfg.vocab,
        })
    }

    /// One depth's pass: combine the previous depth's representations with
    /// the embeddings of `emb_tokens` (one per row), run the block, and
    /// produce probability rows through the shared head.
    fn module_forward(
        &self,
        module: &MtpModule,
        prev: &Tensor,
        emb_tokens: &[usize],
        tape: Option<&Tape>,
        mode: LinearMode,
    ) -> Result<(Tensor, Tensor)> {
        let rows = prev.lead_rows();
        if emb_tokens.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "mtp module_forward",
                expected: format!("{rows} embedding tokens"),
                got: format!("{}", emb_tokens.len()),
            });
        }
        let emb = self.embedding.read(tape).select_rows(emb_tokens)?;
        let combined = prev
            .rmsnorm(&module.prev_norm_gain.read(tape), RMSNORM_EPS)?
            .concat_cols(&emb.rmsnorm(&module.emb_norm_gain.read(tape), RMSNORM_EPS)?)?;
        let projected = combined.matmul(&module.proj.read(tape).transpose()?)?;
        let (reps, _) = module.block.forward_sequence(&projected, 0, tape, mode, true)?;
        let normed = reps.rmsnorm(&module.out_norm_gain.read(tape), RMSNORM_EPS)?;
        let probs = normed
            .matmul(&self.head.read(tape).transpose()?)?
            .softmax_rows();
        Ok((reps, probs))
    }

    /// Every stack-owned parameter plus the shared embedding/head handles.
    pub fn params(&self) -> Vec<Param> {
        let mut p = vec![self.embedding.clone(), self.head.clone()];
        for m in &self.modules {
            p.push(m.proj.clone());
            p.push(m.prev_norm_gain.clone());
            p.push(m.emb_norm_gain.clone());
            p.push(m.out_norm_gain.clone());
            p.extend(m.block.params());
        }
        p
    }
}

/// Runs the full stack: depth k consumes the depth-(k-1) representations
/// of positions `0..T-k` combined with the embeddings of tokens shifted k
/// ahead, and predicts the token k+1 ahead of each position. `tokens` must
/// supply `T + depth` entries (the trailing ones feed embeddings and
/// targets).
pub fn mtp_forward(
    main_reps: &Tensor,
    tokens: &[usize],
    stack: &MtpStack,
    tape: Option<&Tape>,
    mode: LinearMode,
) -> Result<MtpOutputs> {
    let t = main_reps.lead_rows();
    if main_reps.last_dim() != stack.embed_dim {
        return Err(Error::ShapeMismatch {
            op: "mtp_forward",
            expected: format!("[T, {}]", stack.embed_dim),
            got: format!("{:?}", main_reps.shape()),
        });
    }
    if tokens.len() < t + stack.depth || stack.depth >= t {
        return Err(Error::ShapeMismatch {
            op: "mtp_forward",
            expected: format!("{} tokens for T={t}, depth={}", t + stack.depth, stack.depth),
            got: format!("{}", tokens.len()),
        });
    }
    let mut reps_out = Vec::with_capacity(stack.depth);
    let mut probs_out = Vec::with_capacity(stack.depth);
    let mut prev = main_reps.clone();
    for (k, module) in stack.modules.iter().enumerate() {
        let k1 = k + 1; // depth, 1-based
        let len = t - k1;
        // Keep the causal chain: depth k sees positions 0..T-k of the
        // previous depth and the embedding of the token k steps ahead.
        let prev_slice = prev.slice_rows(0, len)?;
        let emb_tokens = &tokens[k1..k1 + len];
        let (reps, probs) =
            stack.module_forward(module, &prev_slice, emb_tokens, tape, mode)?;
        prev = reps.clone();
        reps_out.push(reps);
        probs_out.push(probs);
    }
    Ok(MtpOutputs {
        reps: reps_out,
        probs: probs_out,
    })
}

/// Per-depth losses and the weighted total:
/// `L_k = -(1/T) * sum_i log P_k[i][target]` (a depth-k module predicts
/// the token k+1 positions ahead), and `total = lambda/D * sum_k L_k`.
/// Note the 1/T normalizer with T-k summands, taken literally.
pub fn mtp_loss(
    outputs: &MtpOutputs,
    tokens: &[usize],
    stack: &MtpStack,
) -> Result<(Vec<Tensor>, Tensor)> {
    if outputs.probs.len() != stack.depth {
        return Err(Error::ShapeMismatch {
            op: "mtp_loss",
            expected: format!("{} depths", stack.depth),
            got: format!("{}", outputs.probs.len()),
        });
    }
    let mut per_depth = Vec::with_capacity(stack.depth);
    let mut total: Option<Tensor> = None;
    for (k, probs) in outputs.probs.iter().enumerate() {
        let k1 = k + 1;
        let len = probs.lead_rows();
        let t = len + k1;
        // Position i predicts token i + k + 1 (0-based).
        let targets = &tokens[k1 + 1..k1 + 1 + len];
        let picked = probs.gather_cols(targets)?;
        let loss = picked
            .ln_clamped(LOG_FLOOR)
            .sum()
            .scale(-1.0 / t as f64);
        total = Some(match total {
            None => loss.clone(),
            Some(acc) => acc.add(&loss)?,
        });
        per_depth.push(loss);
    }
    let total = total
        .expect("depth >= 1")
        .scale(stack.lambda / stack.depth as f64);
    Ok((per_depth, total))
}

/// Greedy self-speculative agreement: at each generation step the depth-1
/// module drafts the token after the one the main model just emitted; the
/// returned rate is the fraction of drafts the main model then emits
/// itself at the next step.
pub fn speculative_acceptance(
    model: &LanguageModel,
    stack: &MtpStack,
    prompts: &[Vec<usize>],
    length: usize,
) -> Result<f64> {
    if prompts.is_empty() || prompts.iter().any(|p| p.is_empty()) {
        return Err(Error::EmptyInput {
            op: "speculative_acceptance",
        });
    }
    if length < 2 {
        return Err(Error::EmptyInput {
            op: "speculative_acceptance (need length >= 2)",
        });
    }
    let mut accepted = 0usize;
    let mut compared = 0usize;
    for prompt in prompts {
        let mut seq = prompt.clone();
        let mut pending_draft: Option<usize> = None;
        for _ in 0..length {
            let trace = model.forward_trace(&seq, None, LinearMode::Exact, true)?;
            let logits = model.head_logits(&trace.states, None)?;
            let main_next = argmax_row(&logits, seq.len() - 1);
            if let Some(draft) = pending_draft.take() {
                compared += 1;
                if draft == main_next {
                    accepted += 1;
                }
            }
            // Depth-1 draft of the token after main_next: embeddings are
            // the sequence shifted by one with main_next appended.
            let mut emb_tokens: Vec<usize> = seq[1..].to_vec();
            emb_tokens.push(main_next);
            let (_, probs) = stack.module_forward(
                &stack.modules[0],
                &trace.states,
                &emb_tokens,
                None,
                LinearMode::Exact,
            )?;
            pending_draft = Some(argmax_row(&probs, seq.len() - 1));
            seq.push(main_next);
        }
    }
    Ok(accepted as f64 / compared as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mla::MlaConfig;
    use crate::moe::ExpertConfig;
    use crate::model::ModelConfig;
    use crate::tensor::{adamw_step, AdamWConfig, AdamWState, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> (LanguageModel, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mla = MlaConfig::new(6, 1, 3, 2, 2, 2).unwrap();
        let cfg = ModelConfig {
            vocab: 9,
            embed_dim: 6,
            layers: 1,
            mla,
            experts: ExpertConfig {
                shared_experts: 1,
                routed_experts: 2,
                active_experts: 1,
                embed_dim: 6,
                ffn_dim: 8,
            },
            init_std: 0.1,
        };
        let model = LanguageModel::init(cfg, 0.001, &mut rng).unwrap();
        (model, rng)
    }

    #[test]
    fn forward_shapes_follow_depth_slicing() {
        let (model, mut rng) = tiny_model();
        let stack = MtpStack::init(&model, 2, 0.3, 8, &mut rng).unwrap();
        let tokens = [1usize, 2, 3, 4, 5, 6, 7, 8];
        let t = 6;
        let trace = model
            .forward_trace(&tokens[..t], None, LinearMode::Exact, true)
            .unwrap();
        let out = mtp_forward(&trace.states, &tokens, &stack, None, LinearMode::Exact).unwrap();
        // Depth-k representation sequence has length T-k.
        assert_eq!(out.reps[0].shape(), &[5, 6]);
        assert_eq!(out.reps[1].shape(), &[4, 6]);
        assert_eq!(out.probs[0].shape(), &[5, 9]);
        assert_eq!(out.probs[1].shape(), &[4, 9]);
        // Probability rows sum to 1.
        for probs in &out.probs {
            for row in probs.data().chunks(9) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        // The combined projection input is 2d wide, output d wide.
        assert_eq!(stack.modules[0].proj.value().shape(), &[6, 12]);
    }

    #[test]
    fn forward_rejects_short_token_supply() {
        let (model, mut rng) = tiny_model();
        let stack = MtpStack::init(&model, 2, 0.3, 8, &mut rng).unwrap();
        let tokens = [1usize, 2, 3, 4, 5, 6];
        let trace = model
            .forward_trace(&tokens, None, LinearMode::Exact, true)
            .unwrap();
        // Needs T + depth = 8 tokens, only 6 supplied.
        assert!(mtp_forward(&trace.states, &tokens, &stack, None, LinearMode::Exact).is_err());
    }

    #[test]
    fn depth1_tiny_pipeline_matches_hand_computation() {
        // D=1, T=3: verify the combine -> project pipeline against direct
        // vector arithmetic (block and head checked for shape/probability
        // structure elsewhere).
        let (model, mut rng) = tiny_model();
        let stack = MtpStack::init(&model, 1, 0.3, 8, &mut rng).unwrap();
        let tokens = [1usize, 2, 3, 4];
        let trace = model
            .forward_trace(&tokens[..3], None, LinearMode::Exact, true)
            .unwrap();

        // Hand pipeline for module position 0.
        let d = 6usize;
        let prev = &trace.states.data()[..d];
        let emb_row = tokens[1];
        let emb = &model.embedding.value().data()[emb_row * d..(emb_row + 1) * d];
        let norm = |x: &[f64]| -> Vec<f64> {
            let ms = x.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + RMSNORM_EPS).sqrt();
            x.iter().map(|v| v * inv).collect()
        };
        let mut combined = norm(prev);
        combined.extend(norm(emb));
        let proj = stack.modules[0].proj.value();
        let expect: Vec<f64> = (0..d)
            .map(|i| {
                (0..2 * d)
                    .map(|j| proj.data()[i * 2 * d + j] * combined[j])
                    .sum()
            })
            .collect();

        // The same quantity from the module internals.
        let emb_t = stack
            .embedding
            .read(None)
            .select_rows(&[tokens[1], tokens[2]])
            .unwrap();
        let prev_slice = trace.states.slice_rows(0, 2).unwrap();
        let combined_t = prev_slice
            .rmsnorm(&stack.modules[0].prev_norm_gain.read(None), RMSNORM_EPS)
            .unwrap()
            .concat_cols(
                &emb_t
                    .rmsnorm(&stack.modules[0].emb_norm_gain.read(None), RMSNORM_EPS)
                    .unwrap(),
            )
            .unwrap();
        let projected = combined_t
            .matmul(&stack.modules[0].proj.read(None).transpose().unwrap())
            .unwrap();
        for (a, e) in projected.data()[..d].iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_zero_for_one_hot_and_uniform_value() {
        let (model, mut rng) = tiny_model();
        let stack = MtpStack::init(&model, 1, 0.3, 8, &mut rng).unwrap();
        let tokens = [1usize, 2, 3, 4, 5];
        let t = 4;

        // Perfect one-hot predictions: loss 0.
        let v = 9usize;
        let mut onehot = vec![0.0; (t - 1) * v];
        for (i, row) in onehot.chunks_mut(v).enumerate() {
            row[tokens[i + 2]] = 1.0;
        }
        let outputs = MtpOutputs {
            reps: vec![Tensor::zeros(&[t - 1, 6])],
            probs: vec![Tensor::new(onehot, &[t - 1, v]).unwrap()],
        };
        let (per_depth, total) = mtp_loss(&outputs, &tokens, &stack).unwrap();
        assert_eq!(per_depth[0].item().unwrap(), 0.0);
        assert_eq!(total.item().unwrap(), 0.0);

        // Uniform predictions, T=4, k=1, V=8: (3/4) ln 8.
        let stack8 = {
            let mut rng2 = ChaCha8Rng::seed_from_u64(3);
            let mla = MlaConfig::new(6, 1, 3, 2, 2, 2).unwrap();
            let cfg = ModelConfig {
                vocab: 8,
                embed_dim: 6,
                layers: 1,
                mla,
                experts: model.cfg.experts,
                init_std: 0.1,
            };
            let m
                = LanguageModel::init(cfg, 0.001, &mut rng2).unwrap();
            MtpStack::init(&m, 1, 1.0, 8, &mut rng2).unwrap()
        };
        let uniform = MtpOutputs {
            reps: vec![Tensor::zeros(&[3, 6])],
            probs: vec![Tensor::full(&[3, 8], 1.0 / 8.0)],
        };
        let (per_depth, total) = mtp_loss(&uniform, &[0, 1, 2, 3, 4], &stack8).unwrap();
        let expect = 0.75 * (8.0f64).ln();
        assert!((per_depth[0].item().unwrap() - expect).abs() < 1e-12);
        assert!((expect - 1.5596).abs() < 1e-4);
        // lambda = 1, D = 1: total equals the per-depth loss.
        assert!((total.item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn discarding_the_stack_leaves_main_logits_bit_identical() {
        let (model, mut rng) = tiny_model();
        let tokens = [1usize, 2, 3, 4, 5];
        let before = model.logits(&tokens, None, LinearMode::Exact).unwrap();
        let stack = MtpStack::init(&model, 1, 0.3, 8, &mut rng).unwrap();
        let with_stack = model.logits(&tokens, None, LinearMode::Exact).unwrap();
        drop(stack);
        let after = model.logits(&tokens, None, LinearMode::Exact).unwrap();
        assert_eq!(before.data(), with_stack.data());
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn embedding_updates_through_stack_are_visible_to_main_model() {
        let (model, mut rng) = tiny_model();
        let stack = MtpStack::init(&model, 1, 0.5, 8, &mut rng).unwrap();
        assert!(stack.embedding.same_storage(&model.embedding));
        assert!(stack.head.same_storage(&model.head));

        let tokens = [1usize, 2, 3, 4, 5, 6];
        let t = 5;
        let tape = Tape::new();
        let trace = model
            .forward_trace(&tokens[..t], Some(&tape), LinearMode::Exact, true)
            .unwrap();
        let out = mtp_forward(
            &trace.states,
            &tokens,
            &stack,
            Some(&tape),
            LinearMode::Exact,
        )
        .unwrap();
        let (_, total) = mtp_loss(&out, &tokens, &stack).unwrap();
        let grads = total.backward().unwrap();
        let g = grads.wrt_param(&stack.embedding).unwrap().clone();
        assert!(g.data().iter().any(|&v| v != 0.0));

        let before = model.embedding.value();
        let mut st = AdamWState::new(
            before.numel(),
            AdamWConfig {
                learning_rate: 0.1,
                ..Default::default()
            },
        );
        let updated = adamw_step(&before, &g, &mut st).unwrap();
        stack.embedding.set(updated);
        // The main model sees the mutation: same storage.
        assert_ne!(model.embedding.value().data(), before.data());
    }

    #[test]
    fn acceptance_rate_is_one_for_aligned_head_and_zero_for_adversarial() {
        let (model, mut rng) = tiny_model();
        let mut stack = MtpStack::init(&model, 1, 0.3, 8, &mut rng).unwrap();

        // Force the depth-1 module to reproduce the main model's own
        // shifted prediction: make the module the identity on the
        // main-model state (projection keeps the normalized state half,
        // zeroes the embedding half) and strip its block to a no-op.
        // Then the draft equals argmax(head(norm(...))) of a state very
        // close to the main path. Instead of reaching exact identity
        // through the block, pin the comparison by a degenerate model:
        // a model with a constant argmax. Zero head -> logits all equal,
        // argmax = token 0 everywhere, and the module's probabilities are
        // uniform -> draft = token 0 as well.
        model.head.set(Tensor::zeros(&[9, 6]));
        let rate = speculative_acceptance(&model, &stack, &[vec![1, 2, 3]], 6).unwrap();
        assert_eq!(rate, 1.0);

        // Adversarially wrong head on the stack side: bias the module's
        // probabilities away from token 0 by giving the module an output
        // norm gain that flips the (shared-head) logits sign. With the
        // shared head zeroed above that is not possible, so instead
        // restore a head that prefers token 0 for the main model and make
        // the module's final norm huge negative so its argmax moves.
        let mut head = vec![0.0; 9 * 6];
        for (j, h) in head.iter_mut().enumerate().take(6) {
            let _ = j;
            *h = 1.0;
        }
        // head row 0 = ones: main argmax is driven by sum(state) sign;
        // rows 1..: zero. Main model then always emits token 0 when
        // sum(state) > 0, else ties resolve to 0 anyway (all-zero rows).
        model.head.set(Tensor::new(head, &[9, 6]).unwrap());
        stack.modules[0]
            .out_norm_gain
            .set(Tensor::full(&[6], -1000.0));
        let rate = speculative_acceptance(&model, &stack, &[vec![1, 2, 3]], 6).unwrap();
        assert_eq!(rate, 0.0);
    }

    #[test]
    fn acceptance_rejects_empty_prompts() {
        let (model, mut rng) = tiny_model();
        let stack = MtpStack::init(&model, 1, 0.3, 8, &mut rng).unwrap();
        assert!(speculative_acceptance(&model, &stack, &[], 4).is_err());
        assert!(speculative_acceptance(&model, &stack, &[vec![]], 4).is_err());
    }
}
