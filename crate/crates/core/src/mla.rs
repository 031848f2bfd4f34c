//! Multi-head latent attention: keys and values are reconstructed from a
//! low-rank compressed latent, so the decode cache stores one small latent
//! plus one shared rotary key per position instead of full per-head
//! tensors. Queries get the same low-rank treatment for activation
//! savings.

use rand::Rng;

use crate::tensor::{Param, Tape, Tensor};
use crate::{Error, Result};

pub const RMSNORM_EPS: f64 = 1e-6;
pub const DEFAULT_ROPE_BASE: f64 = 10000.0;

/// Dimensions of one latent-attention layer.
#[derive(Debug, Clone, Copy)]
pub struct MlaConfig {
    /// Model embedding width `d`.
    pub embed_dim: usize,
    /// Attention heads `n_h`.
    pub heads: usize,
    /// Per-head content dimension `d_h`.
    pub head_dim: usize,
    /// KV latent width `d_c`.
    pub kv_compression_dim: usize,
    /// Query latent width `d_c'`.
    pub query_compression_dim: usize,
    /// Decoupled rotary key/query width `d_h^R` (even).
    pub rope_head_dim: usize,
    /// Apply RMSNorm to the compressed latents (gain trained, init 1).
    pub latent_norm: bool,
    pub rope_base: f64,
}

impl MlaConfig {
    pub fn new(
        embed_dim: usize,
        heads: usize,
        head_dim: usize,
        kv_compression_dim: usize,
        query_compression_dim: usize,
        rope_head_dim: usize,
    ) -> Result<Self> {
        let cfg = Self {
            embed_dim,
            heads,
            head_dim,
            kv_compression_dim,
            query_compression_dim,
            rope_head_dim,
            latent_norm: true,
            rope_base: DEFAULT_ROPE_BASE,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let all_positive = self.embed_dim > 0
            && self.heads > 0
            && self.head_dim > 0
            && self.kv_compression_dim > 0
            && self.query_compression_dim > 0
            && self.rope_head_dim > 0;
        if !all_positive {
            return Err(Error::ShapeMismatch {
                op: "MlaConfig",
                expected: "positive dimensions".into(),
                got: format!("{self:?}"),
            });
        }
        if self.rope_head_dim % 2 != 0 {
            return Err(Error::OddDimension {
                op: "MlaConfig",
                dim: self.rope_head_dim,
            });
        }
        let full = self.heads * self.head_dim;
        if self.kv_compression_dim >= full || self.query_compression_dim >= full {
            return Err(Error::ShapeMismatch {
                op: "MlaConfig",
                expected: format!("compression dims < n_h*d_h = {full}"),
                got: format!(
                    "d_c={}, d_c'={}",
                    self.kv_compression_dim, self.query_compression_dim
                ),
            });
        }
        Ok(())
    }

    /// Width of one head's key/query including the rotary part.
    pub fn qk_dim(&self) -> usize {
        self.head_dim + self.rope_head_dim
    }

    /// Scalars cached per generated token: the KV latent plus the shared
    /// rotary key.
    pub fn cache_scalars_per_token(&self) -> usize {
        self.kv_compression_dim + self.rope_head_dim
    }

    /// Cache footprint relative to caching full per-head keys and values.
    pub fn cache_ratio_vs_full(&self) -> f64 {
        self.cache_scalars_per_token() as f64 / (2 * self.heads * self.head_dim) as f64
    }
}

/// Projection weights, all trainable.
#[derive(Clone)]
pub struct MlaWeights {
    /// `d_c x d` down-projection for keys/values.
    pub w_dkv: Param,
    /// `n_h*d_h x d_c` key up-projection.
    pub w_uk: Param,
    /// `d_h^R x d` decoupled rotary key projection.
    pub w_kr: Param,
    /// `n_h*d_h x d_c` value up-projection.
    pub w_uv: Param,
    /// `d_c' x d` query down-projection.
    pub w_dq: Param,
    /// `n_h*d_h x d_c'` query up-projection.
    pub w_uq: Param,
    /// `n_h*d_h^R x d_c'` decoupled rotary query projection.
    pub w_qr: Param,
    /// `d x n_h*d_h` output projection.
    pub w_o: Param,
    /// RMSNorm gains for the latents (used when `latent_norm` is on).
    pub gain_ckv: Param,
    pub gain_cq: Param,
}

impl MlaWeights {
    /// Normal(0, std) initialization; norm gains start at 1.
    pub fn init<R: Rng>(cfg: &MlaConfig, std: f64, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let full = cfg.heads * cfg.head_dim;
        let mk = |shape: &[usize], rng: &mut R| Param::new(Tensor::randn(shape, std, rng));
        Self {
            w_dkv: mk(&[cfg.kv_compression_dim, d], rng),
            w_uk: mk(&[full, cfg.kv_compression_dim], rng),
            w_kr: mk(&[cfg.rope_head_dim, d], rng),
            w_uv: mk(&[full, cfg.kv_compression_dim], rng),
            w_dq: mk(&[cfg.query_compression_dim, d], rng),
            w_uq: mk(&[full, cfg.query_compression_dim], rng),
            w_qr: mk(
                &[cfg.heads * cfg.rope_head_dim, cfg.query_compression_dim],
                rng,
            ),
            w_o: mk(&[d, full], rng),
            gain_ckv: Param::new(Tensor::ones(&[cfg.kv_compression_dim])),
            gain_cq: Param::new(Tensor::ones(&[cfg.query_compression_dim])),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        vec![
            self.w_dkv.clone(),
            self.w_uk.clone(),
            self.w_kr.clone(),
            self.w_uv.clone(),
            self.w_dq.clone(),
            self.w_uq.clone(),
            self.w_qr.clone(),
            self.w_o.clone(),
            self.gain_ckv.clone(),
            self.gain_cq.clone(),
        ]
    }
}

/// Append-only decode cache: one compressed latent and one shared rotary
/// key per generated position. Entries are never mutated after the append.
#[derive(Default, Clone)]
pub struct MlaCache {
    latents: Vec<Tensor>,
    rope_keys: Vec<Tensor>,
}

impl MlaCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn latent(&self, pos: usize) -> &Tensor {
        &self.latents[pos]
    }

    pub fn rope_key(&self, pos: usize) -> &Tensor {
        &self.rope_keys[pos]
    }

    fn push(&mut self, latent: Tensor, rope_key: Tensor) {
        self.latents.push(latent.detach());
        self.rope_keys.push(rope_key.detach());
    }
}

/// Per-token compression outputs.
pub struct KvParts {
    /// Compressed latent as cached (after the optional RMSNorm).
    pub latent: Tensor,
    /// Shared decoupled rotary key for this position.
    pub rope_key: Tensor,
    /// Per-head keys `[n_h, d_h + d_h^R]`.
    pub keys: Tensor,
    /// Per-head values `[n_h, d_h]`.
    pub values: Tensor,
}

/// One latent-attention layer.
#[derive(Clone)]
pub struct Mla {
    pub cfg: MlaConfig,
    pub weights: MlaWeights,
}

impl Mla {
    pub fn init<R: Rng>(cfg: MlaConfig, std: f64, rng: &mut R) -> Self {
        let weights = MlaWeights::init(&cfg, std, rng);
        Self { cfg, weights }
    }

    fn check_input(&self, h: &Tensor, op: &'static str) -> Result<()> {
        if h.shape() != [self.cfg.embed_dim] {
            return Err(Error::ShapeMismatch {
                op,
                expected: format!("[{}]", self.cfg.embed_dim),
                got: format!("{:?}", h.shape()),
            });
        }
        Ok(())
    }

    /// Compresses one token into the cached latent and reconstructs its
    /// per-head keys (content part plus the shared rotary key) and values.
    pub fn kv_compress(&self, h: &Tensor, position: usize, tape: Option<&Tape>) -> Result<KvParts> {
        self.check_input(h, "kv_compress")?;
        let cfg = &self.cfg;
        let w = &self.weights;
        let latent_raw = w.w_dkv.read(tape).matvec(h)?;
        let latent = if cfg.latent_norm {
            latent_raw.rmsnorm(&w.gain_ckv.read(tape), RMSNORM_EPS)?
        } else {
            latent_raw
        };
        let rope_key = w.w_kr.read(tape).matvec(h)?.rope(position, cfg.rope_base)?;
        let (keys, values) = self.keys_values_from_latent(&latent, &rope_key, tape)?;
        Ok(KvParts {
            latent,
            rope_key,
            keys,
            values,
        })
    }

    /// Up-projects a cached latent into per-head keys and values.
    pub fn keys_values_from_latent(
        &self,
        latent: &Tensor,
        rope_key: &Tensor,
        tape: Option<&Tape>,
    ) -> Result<(Tensor, Tensor)> {
        let cfg = &self.cfg;
        let w = &self.weights;
        let k_content = w
            .w_uk
            .read(tape)
            .matvec(latent)?
            .reshape(&[cfg.heads, cfg.head_dim])?;
        // The single rotary key is shared across heads.
        let shared =
            Tensor::ones(&[cfg.heads, 1]).matmul(&rope_key.reshape(&[1, cfg.rope_head_dim])?)?;
        let keys = k_content.concat_cols(&shared)?;
        let values = w
            .w_uv
            .read(tape)
            .matvec(latent)?
            .reshape(&[cfg.heads, cfg.head_dim])?;
        Ok((keys, values))
    }

    /// Low-rank query path: `[n_h, d_h + d_h^R]`, with the per-head
    /// decoupled parts rotated for `position`.
    pub fn q_compress(&self, h: &Tensor, position: usize, tape: Option<&Tape>) -> Result<Tensor> {
        self.check_input(h, "q_compress")?;
        let cfg = &self.cfg;
        let w = &self.weights;
        let latent_raw = w.w_dq.read(tape).matvec(h)?;
        let latent = if cfg.latent_norm {
            latent_raw.rmsnorm(&w.gain_cq.read(tape), RMSNORM_EPS)?
        } else {
            latent_raw
        };
        let q_content = w
            .w_uq
            .read(tape)
            .matvec(&latent)?
            .reshape(&[cfg.heads, cfg.head_dim])?;
        let q_rope = w
            .w_qr
            .read(tape)
            .matvec(&latent)?
            .reshape(&[cfg.heads, cfg.rope_head_dim])?
            .rope(position, cfg.rope_base)?;
        q_content.concat_cols(&q_rope)
    }

    /// Attention of one query over the key/value history, with the
    /// `1/sqrt(d_h + d_h^R)` temperature, then the output projection.
    pub fn attend(
        &self,
        queries: &Tensor,
        keys: &[Tensor],
        values: &[Tensor],
        tape: Option<&Tape>,
    ) -> Result<Tensor> {
        if keys.is_empty() || keys.len() != values.len() {
            return Err(Error::EmptyInput { op: "attend" });
        }
        let cfg = &self.cfg;
        if queries.shape() != [cfg.heads, cfg.qk_dim()] {
            return Err(Error::ShapeMismatch {
                op: "attend",
                expected: format!("[{}, {}]", cfg.heads, cfg.qk_dim()),
                got: format!("{:?}", queries.shape()),
            });
        }
        let t = keys.len();
        let scale = 1.0 / (cfg.qk_dim() as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let q = queries.select_rows(&[head])?.reshape(&[cfg.qk_dim(), 1])?;
            let mut k_rows = Vec::with_capacity(t);
            let mut v_rows = Vec::with_capacity(t);
            for (k, v) in keys.iter().zip(values) {
                k_rows.push(k.select_rows(&[head])?.reshape(&[cfg.qk_dim()])?);
                v_rows.push(v.select_rows(&[head])?.reshape(&[cfg.head_dim])?);
            }
            let k_mat = Tensor::stack_rows(&k_rows)?;
            let v_mat = Tensor::stack_rows(&v_rows)?;
            let scores = k_mat.matmul(&q)?.scale(scale).reshape(&[1, t])?;
            let probs = scores.softmax_rows();
            head_outputs.push(probs.matmul(&v_mat)?);
        }
        let mut concat = head_outputs[0].clone();
        for o in &head_outputs[1..] {
            concat = concat.concat_cols(o)?;
        }
        let w_o = self.weights.w_o.read(tape);
        concat.matmul(&w_o.transpose()?)?.reshape(&[cfg.embed_dim])
    }

    /// One incremental decode step: caches this position's latent and
    /// rotary key, reconstructs all keys/values from the cache, and
    /// attends. `position` must equal the number of cached entries.
    pub fn decode_step(&self, h: &Tensor, position: usize, cache: &mut MlaCache) -> Result<Tensor> {
        if position != cache.len() {
            return Err(Error::CachePositionGap {
                cached: cache.len(),
                expected: position,
            });
        }
        let parts = self.kv_compress(h, position, None)?;
        cache.push(parts.latent, parts.rope_key);
        let mut keys = Vec::with_capacity(cache.len());
        let mut values = Vec::with_capacity(cache.len());
        for pos in 0..cache.len() {
            let (k, v) =
                self.keys_values_from_latent(cache.latent(pos), cache.rope_key(pos), None)?;
            keys.push(k);
            values.push(v);
        }
        let queries = self.q_compress(h, position, None)?;
        self.attend(&queries, &keys, &values, None)
    }

    /// Batched causal pass over a `[T, d]` sequence of inputs — the
    /// training path. Row `i` attends to rows `0..=i` at positions
    /// `start + i`.
    pub fn forward_sequence(
        &self,
        hs: &Tensor,
        start: usize,
        tape: Option<&Tape>,
    ) -> Result<Tensor> {
        let cfg = &self.cfg;
        let t = match hs.shape() {
            [t, d] if *d == cfg.embed_dim => *t,
            s => {
                return Err(Error::ShapeMismatch {
                    op: "forward_sequence",
                    expected: format!("[T, {}]", cfg.embed_dim),
                    got: format!("{s:?}"),
                })
            }
        };
        let w = &self.weights;
        let norm = |x: Tensor, gain: &Param| -> Result<Tensor> {
            if cfg.latent_norm {
                x.rmsnorm(&gain.read(tape), RMSNORM_EPS)
            } else {
                Ok(x)
            }
        };
        let c_kv = norm(hs.matmul(&w.w_dkv.read(tape).transpose()?)?, &w.gain_ckv)?;
        let k_rope = hs
            .matmul(&w.w_kr.read(tape).transpose()?)?
            .rope_rows(start, cfg.rope_base)?;
        let c_q = norm(hs.matmul(&w.w_dq.read(tape).transpose()?)?, &w.gain_cq)?;

        let w_uk = w.w_uk.read(tape);
        let w_uv = w.w_uv.read(tape);
        let w_uq = w.w_uq.read(tape);
        let w_qr = w.w_qr.read(tape);
        let scale = 1.0 / (cfg.qk_dim() as f64).sqrt();

        let mut concat: Option<Tensor> = None;
        for head in 0..cfg.heads {
            let uk = w_uk.slice_rows(head * cfg.head_dim, cfg.head_dim)?;
            let uv = w_uv.slice_rows(head * cfg.head_dim, cfg.head_dim)?;
            let uq = w_uq.slice_rows(head * cfg.head_dim, cfg.head_dim)?;
            let qr = w_qr.slice_rows(head * cfg.rope_head_dim, cfg.rope_head_dim)?;

            let k_c = c_kv.matmul(&uk.transpose()?)?; // [T, d_h]
            let v = c_kv.matmul(&uv.transpose()?)?;
            let q_c = c_q.matmul(&uq.transpose()?)?;
            let q_r = c_q
                .matmul(&qr.transpose()?)?
                .rope_rows(start, cfg.rope_base)?;

            let scores = q_c
                .matmul(&k_c.transpose()?)?
                .add(&q_r.matmul(&k_rope.transpose()?)?)?
                .scale(scale);
            let probs = scores.causal_softmax_rows()?;
            let o = probs.matmul(&v)?; // [T, d_h]
            concat = Some(match concat {
                None => o,
                Some(c) => c.concat_cols(&o)?,
            });
        }
        let out = concat.expect("at least one head");
        debug_assert_eq!(out.shape(), [t, cfg.heads * cfg.head_dim]);
        out.matmul(&w.w_o.read(tape).transpose()?)
    }

    pub fn params(&self) -> Vec<Param> {
        self.weights.params()
    }
}
