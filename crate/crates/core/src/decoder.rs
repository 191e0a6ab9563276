//! Decoder-only transformer over `[audio prefix ∥ note tokens]`.
//!
//! The encoder output H is projected to the model width and receives additive
//! sinusoidal position encodings; note tokens carry no absolute position and
//! instead have rotary embeddings applied to their queries and keys. The audio
//! prefix attends to itself bidirectionally and never to tokens; each token
//! attends to the whole prefix and causally to earlier tokens.
//!
//! Because the prefix never reads tokens, its per-layer keys and values are a
//! function of H alone. [`LmDecoder::audio_context`] computes them once and
//! [`LmDecoder::token_logits`] runs the token stream against them; training and
//! incremental decoding share this path.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{dropout, layer_norm, linear, scalar, ParamStore};
use crate::types::{HiddenSeq, TokenSequence, Vocab};

pub const POSITION_BASE: f64 = 10000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    /// Maximum audio frames plus tokens in one forward pass.
    pub max_seq_len: usize,
    /// Width of the incoming H (the encoder's hidden_dim).
    pub audio_dim: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            n_layers: 2,
            n_heads: 4,
            embed_dim: 64,
            vocab_size: Vocab::SIZE,
            max_seq_len: 2048,
            audio_dim: 128,
            ffn_mult: 4,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl DecoderConfig {
    /// Size presets: `tiny` 4/8/512, `small` 6/12/768, `base` 6/16/1024,
    /// `large` 12/32/1024 (layers/heads/width), and the desk-scale `toy` 2/4/64.
    pub fn preset(name: &str) -> Result<Self> {
        let (n_layers, n_heads, embed_dim) = match name {
            "toy" => (2, 4, 64),
            "tiny" => (4, 8, 512),
            "small" => (6, 12, 768),
            "base" => (6, 16, 1024),
            "large" => (12, 32, 1024),
            other => return Err(Error::Config(format!("unknown decoder preset `{other}`"))),
        };
        Ok(DecoderConfig {
            n_layers,
            n_heads,
            embed_dim,
            ..DecoderConfig::default()
        })
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.embed_dim == 0 || self.audio_dim == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!("rotary embeddings need an even head dim, got {}", self.head_dim())));
        }
        if self.vocab_size != Vocab::SIZE {
            return Err(Error::Config(format!("vocab_size must be {}, got {}", Vocab::SIZE, self.vocab_size)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Absolute position encoding: `PE(pos, 2i) = sin(pos / 10000^(2i/d))`,
/// `PE(pos, 2i+1) = cos(pos / 10000^(2i/d))`.
pub fn sinusoidal_pe(pos: usize, dim: usize) -> Vec<f64> {
    assert!(dim % 2 == 0, "position encoding needs an even dimension");
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let angle = pos as f64 / POSITION_BASE.powf((2 * i) as f64 / dim as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    out
}

/// Rotates consecutive pairs `(x_{2i}, x_{2i+1})` by `pos · 10000^(-2i/d)`.
pub fn rope_rotate(vec: &[f64], pos: usize) -> Vec<f64> {
    let d = vec.len();
    assert!(d % 2 == 0, "rotary embeddings need an even dimension");
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let theta = POSITION_BASE.powf(-((2 * i) as f64) / d as f64);
        let (sin, cos) = (pos as f64 * theta).sin_cos();
        let (a, b) = (vec[2 * i], vec[2 * i + 1]);
        out[2 * i] = a * cos - b * sin;
        out[2 * i + 1] = a * sin + b * cos;
    }
    out
}

/// Per-layer keys and values of the audio prefix, each (B, heads, T', head_dim).
#[derive(Debug, Clone)]
pub struct AudioContext {
    layers: Vec<(Tensor, Tensor)>,
    frames: usize,
    batch: usize,
}

impl AudioContext {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Repeats a single-item context `n` times along the batch axis.
    pub fn expand(&self, n: usize) -> Result<AudioContext> {
        if self.batch == n {
            return Ok(self.clone());
        }
        if self.batch != 1 {
            return Err(Error::Shape(format!("cannot expand a batch of {} to {n}", self.batch)));
        }
        let layers = self
            .layers
            .iter()
            .map(|(k, v)| Ok((k.repeat((n, 1, 1, 1))?, v.repeat((n, 1, 1, 1))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(AudioContext {
            layers,
            frames: self.frames,
            batch: n,
        })
    }
}

/// One decoder-only language model (θ). Three independent instances form the hierarchy.
#[derive(Debug)]
pub struct LmDecoder {
    pub cfg: DecoderConfig,
    pub params: ParamStore,
}

impl LmDecoder {
    pub fn new(cfg: DecoderConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = ParamStore::new(dtype);
        let e = cfg.embed_dim;
        let std = 0.02;
        let resid_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        p.normal("audio_proj.weight", (cfg.audio_dim, e), 1.0 / (cfg.audio_dim as f64).sqrt(), &mut rng)?;
        p.constant("audio_proj.bias", e, 0.0)?;
        p.normal("tok_emb", (cfg.vocab_size, e), std, &mut rng)?;
        for i in 0..cfg.n_layers {
            let l = format!("layers.{i}");
            p.constant(&format!("{l}.ln1.gamma"), e, 1.0)?;
            p.constant(&format!("{l}.ln1.beta"), e, 0.0)?;
            for w in ["wq", "wk", "wv"] {
                p.normal(&format!("{l}.attn.{w}"), (e, e), std, &mut rng)?;
            }
            p.normal(&format!("{l}.attn.wo"), (e, e), resid_std, &mut rng)?;
            p.constant(&format!("{l}.ln2.gamma"), e, 1.0)?;
            p.constant(&format!("{l}.ln2.beta"), e, 0.0)?;
            p.normal(&format!("{l}.ffn.w1"), (e, cfg.ffn_mult * e), std, &mut rng)?;
            p.constant(&format!("{l}.ffn.b1"), cfg.ffn_mult * e, 0.0)?;
            p.normal(&format!("{l}.ffn.w2"), (cfg.ffn_mult * e, e), resid_std, &mut rng)?;
            p.constant(&format!("{l}.ffn.b2"), e, 0.0)?;
        }
        p.constant("ln_f.gamma", e, 1.0)?;
        p.constant("ln_f.beta", e, 0.0)?;
        p.normal("readout", (e, cfg.vocab_size), std, &mut rng)?;
        Ok(LmDecoder { cfg, params: p })
    }

    pub fn from_params(cfg: DecoderConfig, params: ParamStore) -> Result<Self> {
        let expected = LmDecoder::new(cfg.clone(), params.dtype())?;
        let shapes: Vec<(String, Vec<usize>)> = expected
            .params
            .to_tensors()
            .into_iter()
            .map(|(k, t)| (k, t.dims().to_vec()))
            .collect();
        params.check_shapes(&shapes)?;
        Ok(LmDecoder { cfg, params })
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(LmDecoder {
            cfg: self.cfg.clone(),
            params: self.params.deep_clone()?,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    fn device(&self) -> &Device {
        self.params.device()
    }

    fn p(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name)
    }

    /// Full forward pass: logits (B, L, V); row `t` scores the token at `t + 1`.
    pub fn forward(&self, audio: &Tensor, tokens: &Tensor) -> Result<Tensor> {
        let ctx = self.audio_context(audio, None)?;
        self.token_logits(&ctx, tokens, None)
    }

    /// Forward pass with dropout driven by `rng`.
    pub fn forward_train(&self, audio: &Tensor, tokens: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let ctx = self.audio_context(audio, Some(rng))?;
        self.token_logits(&ctx, tokens, Some(rng))
    }

    /// Logits for one sequence given H.
    pub fn forward_hidden(&self, hidden: &HiddenSeq, tokens: &[u32]) -> Result<Tensor> {
        let audio = self.hidden_tensor(hidden)?;
        let ids = Tensor::new(tokens, self.device())?.unsqueeze(0)?;
        Ok(self.forward(&audio, &ids)?.squeeze(0)?)
    }

    /// H as a (1, T', D) tensor in the model dtype.
    pub fn hidden_tensor(&self, hidden: &HiddenSeq) -> Result<Tensor> {
        let (t, d) = hidden.vectors.dim();
        let data: Vec<f32> = hidden.vectors.iter().copied().collect();
        Ok(Tensor::from_vec(data, (1, t, d), self.device())?.to_dtype(self.dtype())?)
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        Ok(x.reshape((b, n, self.cfg.n_heads, self.cfg.head_dim()))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    fn merge_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, n, _) = x.dims4()?;
        Ok(x.transpose(1, 2)?.reshape((b, n, self.cfg.embed_dim))?)
    }

    fn drop(&self, x: &Tensor, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        match rng {
            Some(rng) => dropout(x, self.cfg.dropout, rng),
            None => Ok(x.clone()),
        }
    }

    fn ffn(&self, layer: &str, x: &Tensor, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let h = layer_norm(x, self.p(&format!("{layer}.ln2.gamma"))?, self.p(&format!("{layer}.ln2.beta"))?)?;
        let h = linear(&h, self.p(&format!("{layer}.ffn.w1"))?, Some(self.p(&format!("{layer}.ffn.b1"))?))?.gelu()?;
        let h = linear(&h, self.p(&format!("{layer}.ffn.w2"))?, Some(self.p(&format!("{layer}.ffn.b2"))?))?;
        Ok((x + self.drop(&h, rng)?)?)
    }

    fn qkv(&self, layer: &str, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let h = layer_norm(x, self.p(&format!("{layer}.ln1.gamma"))?, self.p(&format!("{layer}.ln1.beta"))?)?;
        let q = self.split_heads(&linear(&h, self.p(&format!("{layer}.attn.wq"))?, None)?)?;
        let k = self.split_heads(&linear(&h, self.p(&format!("{layer}.attn.wk"))?, None)?)?;
        let v = self.split_heads(&linear(&h, self.p(&format!("{layer}.attn.wv"))?, None)?)?;
        Ok((q, k, v))
    }

    fn attend(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        mask: Option<&Tensor>,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let scale = 1.0 / (self.cfg.head_dim() as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?)? * scale)?;
        if let Some(mask) = mask {
            scores = scores.broadcast_add(mask)?;
        }
        let probs = self.drop(&candle_nn::ops::softmax(&scores, D::Minus1)?, rng)?;
        Ok(probs.matmul(v)?)
    }

    /// Runs the audio prefix through every layer and keeps its keys and values.
    pub fn audio_context(&self, audio: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<AudioContext> {
        let (b, frames, width) = audio.dims3()?;
        if width != self.cfg.audio_dim {
            return Err(Error::Shape(format!(
                "audio width {width} does not match the decoder's audio_dim {}",
                self.cfg.audio_dim
            )));
        }
        if frames > self.cfg.max_seq_len {
            return Err(Error::Length {
                len: frames,
                max: self.cfg.max_seq_len,
            });
        }
        let pe = self.position_table(frames)?;
        let mut x = linear(
            &audio.to_dtype(self.dtype())?,
            self.p("audio_proj.weight")?,
            Some(self.p("audio_proj.bias")?),
        )?
        .broadcast_add(&pe)?;
        let mut layers = Vec::with_capacity(self.cfg.n_layers);
        for i in 0..self.cfg.n_layers {
            let l = format!("layers.{i}");
            let (q, k, v) = self.qkv(&l, &x)?;
            let att = self.merge_heads(&self.attend(&q, &k, &v, None, &mut rng)?)?;
            let att = linear(&att, self.p(&format!("{l}.attn.wo"))?, None)?;
            x = (x + self.drop(&att, &mut rng)?)?;
            x = self.ffn(&l, &x, &mut rng)?;
            layers.push((k, v));
        }
        Ok(AudioContext { layers, frames, batch: b })
    }

    /// Token stream against a prepared audio context: logits (B, L, V).
    pub fn token_logits(
        &self,
        ctx: &AudioContext,
        tokens: &Tensor,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let (b, len) = tokens.dims2()?;
        if b != ctx.batch {
            return Err(Error::Shape(format!("{b} token rows for an audio batch of {}", ctx.batch)));
        }
        if len == 0 {
            return Err(Error::Shape("empty token sequence".into()));
        }
        if ctx.frames + len > self.cfg.max_seq_len {
            return Err(Error::Length {
                len: ctx.frames + len,
                max: self.cfg.max_seq_len,
            });
        }
        let ids = tokens.to_dtype(DType::U32)?;
        let max_id = ids.max_all()?.to_scalar::<u32>()?;
        if max_id as usize >= self.cfg.vocab_size {
            return Err(Error::Shape(format!("token id {max_id} outside the vocabulary")));
        }
        let mut x = self
            .p("tok_emb")?
            .index_select(&ids.flatten_all()?, 0)?
            .reshape((b, len, self.cfg.embed_dim))?;
        let (cos, sin) = self.rope_tables(len)?;
        let mask = self.token_mask(ctx.frames, len)?;
        for (i, (ka, va)) in ctx.layers.iter().enumerate() {
            let l = format!("layers.{i}");
            let (q, k, v) = self.qkv(&l, &x)?;
            let q = apply_rope(&q, &cos, &sin)?;
            let k = apply_rope(&k, &cos, &sin)?;
            let keys = Tensor::cat(&[ka, &k], 2)?;
            let values = Tensor::cat(&[va, &v], 2)?;
            let att = self.merge_heads(&self.attend(&q, &keys, &values, Some(&mask), &mut rng)?)?;
            let att = linear(&att, self.p(&format!("{l}.attn.wo"))?, None)?;
            x = (x + self.drop(&att, &mut rng)?)?;
            x = self.ffn(&l, &x, &mut rng)?;
        }
        let h = layer_norm(&x, self.p("ln_f.gamma")?, self.p("ln_f.beta")?)?;
        linear(&h, self.p("readout")?, None)
    }

    /// Additive mask (L, T'+L): audio columns always visible, token columns causal.
    fn token_mask(&self, frames: usize, len: usize) -> Result<Tensor> {
        let width = frames + len;
        let mut m = vec![0.0f64; len * width];
        for i in 0..len {
            for j in (i + 1)..len {
                m[i * width + frames + j] = f64::NEG_INFINITY;
            }
        }
        Ok(Tensor::from_vec(m, (len, width), self.device())?.to_dtype(self.dtype())?)
    }

    fn position_table(&self, frames: usize) -> Result<Tensor> {
        let e = self.cfg.embed_dim;
        let data: Vec<f64> = (0..frames).flat_map(|pos| sinusoidal_pe(pos, e)).collect();
        Ok(Tensor::from_vec(data, (frames, e), self.device())?.to_dtype(self.dtype())?)
    }

    /// cos/sin tables (L, head_dim/2) for token positions 0..L.
    fn rope_tables(&self, len: usize) -> Result<(Tensor, Tensor)> {
        let half = self.cfg.head_dim() / 2;
        let d = self.cfg.head_dim() as f64;
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for pos in 0..len {
            for i in 0..half {
                let theta = POSITION_BASE.powf(-((2 * i) as f64) / d);
                let (s, c) = (pos as f64 * theta).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        let dev = self.device();
        Ok((
            Tensor::from_vec(cos, (len, half), dev)?.to_dtype(self.dtype())?,
            Tensor::from_vec(sin, (len, half), dev)?.to_dtype(self.dtype())?,
        ))
    }

    /// Logits for the token following `tokens`, as plain f32 values.
    pub fn next_logits(&self, ctx: &AudioContext, tokens: &[u32]) -> Result<Vec<f32>> {
        let ids = Tensor::new(tokens, self.device())?.unsqueeze(0)?;
        let logits = self.token_logits(ctx, &ids, None)?;
        let last = logits.get(0)?.get(tokens.len() - 1)?;
        Ok(last.to_dtype(DType::F32)?.to_vec1::<f32>()?)
    }
}

/// Pairwise rotation of (B, H, L, hd) by per-position tables (L, hd/2).
pub fn apply_rope(x: &Tensor, cos: &Tensor, sin: &Tensor) -> Result<Tensor> {
    let (b, h, len, hd) = x.dims4()?;
    let pairs = x.reshape((b, h, len, hd / 2, 2))?;
    let even = pairs.narrow(4, 0, 1)?.squeeze(4)?;
    let odd = pairs.narrow(4, 1, 1)?.squeeze(4)?;
    let rot_even = (even.broadcast_mul(cos)? - odd.broadcast_mul(sin)?)?;
    let rot_odd = (even.broadcast_mul(sin)? + odd.broadcast_mul(cos)?)?;
    Ok(Tensor::stack(&[rot_even, rot_odd], 4)?.reshape((b, h, len, hd))?)
}

/// Mean negative log-likelihood over masked positions.
///
/// `logits` is (B, L, V); `tokens` and `mask` are (B, L). Position `j` with
/// `mask[j]` set is scored by row `j - 1`; position 0 can never carry loss.
pub fn nll_loss(logits: &Tensor, tokens: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (sum, count) = masked_nll_sum(logits, tokens, mask)?;
    if count == 0.0 {
        return Err(Error::EmptyMask);
    }
    Ok((sum / count)?)
}

/// Sum of `-log p` over masked positions, and the number of such positions.
pub fn masked_nll_sum(logits: &Tensor, tokens: &Tensor, mask: &Tensor) -> Result<(Tensor, f64)> {
    let (b, len, _) = logits.dims3()?;
    if tokens.dims() != [b, len] || mask.dims() != [b, len] {
        return Err(Error::Shape(format!(
            "logits {:?}, tokens {:?}, mask {:?}",
            logits.dims(),
            tokens.dims(),
            mask.dims()
        )));
    }
    if len < 2 {
        return Err(Error::EmptyMask);
    }
    let pred = logits.narrow(1, 0, len - 1)?;
    let target = tokens.narrow(1, 1, len - 1)?.to_dtype(DType::U32)?.contiguous()?;
    let weight = mask.narrow(1, 1, len - 1)?.to_dtype(logits.dtype())?;
    let logp = candle_nn::ops::log_softmax(&pred, D::Minus1)?;
    let picked = logp.gather(&target.unsqueeze(2)?, 2)?.squeeze(2)?;
    let count = scalar(&weight.sum_all()?)?;
    let sum = (picked * weight)?.sum_all()?.neg()?;
    Ok((sum, count))
}

/// Padded batch of token sequences with their loss masks.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub tokens: Tensor,
    pub mask: Tensor,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn new(seqs: &[&TokenSequence], dtype: DType) -> Result<Self> {
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if len == 0 {
            return Err(Error::Shape("empty token batch".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend(s.ids.iter().copied());
            ids.extend(std::iter::repeat(Vocab::PAD).take(len - s.len()));
            mask.extend(s.loss_mask.iter().map(|&m| if m { 1.0f64 } else { 0.0 }));
            mask.extend(std::iter::repeat(0.0).take(len - s.len()));
        }
        let dev = Device::Cpu;
        Ok(TokenBatch {
            tokens: Tensor::from_vec(ids, (seqs.len(), len), &dev)?,
            mask: Tensor::from_vec(mask, (seqs.len(), len), &dev)?.to_dtype(dtype)?,
            lengths: seqs.iter().map(|s| s.len()).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW state plus the dropout RNG for one model.
pub struct Trainer {
    opt: AdamW,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(vars: Vec<candle_core::Var>, cfg: &OptimizerConfig, seed: u64) -> Result<Self> {
        let opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr: cfg.learning_rate,
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                eps: cfg.eps,
                weight_decay: cfg.weight_decay,
            },
        )?;
        Ok(Trainer {
            opt,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// One update on a batch; `audio` may carry gradients back into an encoder.
    pub fn train_step(&mut self, model: &LmDecoder, audio: &Tensor, batch: &TokenBatch) -> Result<f64> {
        let logits = model.forward_train(audio, &batch.tokens, &mut self.rng)?;
        let loss = nll_loss(&logits, &batch.tokens, &batch.mask)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                loss: value,
            });
        }
        let grads = crate::encoder::run_with_large_stack(|| loss.backward())?;
        self.apply_gradients(&grads)?;
        Ok(value)
    }

    pub fn apply_gradients(&mut self, grads: &candle_core::backprop::GradStore) -> Result<()> {
        self.opt.step(grads)?;
        self.step += 1;
        Ok(())
    }
}
