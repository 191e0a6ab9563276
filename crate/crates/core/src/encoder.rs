//! Roll-based audio encoder producing the hidden sequence H.
//!
//! Two modes share one interface:
//!
//! * `conv_recurrent`: two 1-D convolutions over time, a bidirectional GRU and a
//!   linear roll readout. H is the GRU output, taken before the readout.
//! * `oracle_roll`: a linear projection of the ground-truth roll, used to test
//!   the decoder in isolation from encoder errors.
//!
//! H can be average-pooled in time to a lower output frame rate.

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{linear, scalar, ParamStore};
use crate::roll::{bce_loss, bce_with_logits, notes_to_roll_at};
use crate::types::{HiddenSeq, PianoRoll, Segment, NUM_KEYS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    OracleRoll,
    ConvRecurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub mode: EncoderMode,
    /// Feature width F of the input matrix.
    pub input_dim: usize,
    /// Roll width K of the pretraining readout.
    pub n_keys: usize,
    /// Width D of H.
    pub hidden_dim: usize,
    pub input_frame_rate_hz: f64,
    pub output_frame_rate_hz: f64,
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    /// GRU width per direction; D is twice this in `conv_recurrent` mode.
    pub recurrent_width: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            mode: EncoderMode::ConvRecurrent,
            input_dim: NUM_KEYS,
            n_keys: NUM_KEYS,
            hidden_dim: 128,
            input_frame_rate_hz: 100.0,
            output_frame_rate_hz: 100.0,
            conv_channels: vec![48, 48],
            kernel_size: 3,
            recurrent_width: 64,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.hidden_dim == 0 || self.input_dim == 0 || self.n_keys == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        let stride = self.input_frame_rate_hz / self.output_frame_rate_hz;
        if !(stride >= 1.0) || (stride - stride.round()).abs() > 1e-9 {
            return bad(format!(
                "output_frame_rate_hz {} must divide input_frame_rate_hz {}",
                self.output_frame_rate_hz, self.input_frame_rate_hz
            ));
        }
        if self.mode == EncoderMode::ConvRecurrent {
            if self.conv_channels.len() != 2 || self.conv_channels.contains(&0) {
                return bad("conv_recurrent needs exactly two positive conv_channels".into());
            }
            if self.kernel_size % 2 == 0 {
                return bad("kernel_size must be odd".into());
            }
            if self.hidden_dim != 2 * self.recurrent_width {
                return bad(format!(
                    "hidden_dim {} must be twice recurrent_width {}",
                    self.hidden_dim, self.recurrent_width
                ));
            }
        }
        Ok(())
    }

    pub fn pool_stride(&self) -> usize {
        (self.input_frame_rate_hz / self.output_frame_rate_hz).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Random crop length in frames; `None` trains on whole segments.
    pub crop_frames: Option<usize>,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            learning_rate: 3e-3,
            batch_size: 4,
            crop_frames: Some(200),
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

impl PretrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

#[derive(Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub params: ParamStore,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = ParamStore::new(dtype);
        match cfg.mode {
            EncoderMode::OracleRoll => {
                let std = 1.0 / (cfg.n_keys as f64).sqrt();
                p.normal("oracle.weight", (cfg.n_keys, cfg.hidden_dim), std, &mut rng)?;
                p.normal("oracle.bias", cfg.hidden_dim, 0.1, &mut rng)?;
            }
            EncoderMode::ConvRecurrent => {
                let k = cfg.kernel_size;
                let mut c_in = cfg.input_dim;
                for (i, &c_out) in cfg.conv_channels.iter().enumerate() {
                    let std = (2.0 / (c_in * k) as f64).sqrt();
                    p.normal(&format!("conv{}.weight", i + 1), (c_out, c_in, k), std, &mut rng)?;
                    p.constant(&format!("conv{}.bias", i + 1), c_out, 0.0)?;
                    c_in = c_out;
                }
                let r = cfg.recurrent_width;
                for dir in ["gru_fwd", "gru_bwd"] {
                    p.normal(&format!("{dir}.w_x"), (c_in, 3 * r), 1.0 / (c_in as f64).sqrt(), &mut rng)?;
                    p.normal(&format!("{dir}.w_h"), (r, 3 * r), 1.0 / (r as f64).sqrt(), &mut rng)?;
                    p.constant(&format!("{dir}.b_x"), 3 * r, 0.0)?;
                    p.constant(&format!("{dir}.b_h"), 3 * r, 0.0)?;
                }
                let std = 1.0 / (cfg.hidden_dim as f64).sqrt();
                p.normal("readout.weight", (cfg.hidden_dim, cfg.n_keys), std, &mut rng)?;
                p.constant("readout.bias", cfg.n_keys, -2.0)?;
            }
        }
        Ok(Encoder { cfg, params: p })
    }

    pub fn from_params(cfg: EncoderConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let expected = Encoder::new(cfg.clone(), params.dtype())?;
        let shapes: Vec<(String, Vec<usize>)> = expected
            .params
            .to_tensors()
            .into_iter()
            .map(|(k, t)| (k, t.dims().to_vec()))
            .collect();
        params.check_shapes(&shapes)?;
        Ok(Encoder { cfg, params })
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Encoder {
            cfg: self.cfg.clone(),
            params: self.params.deep_clone()?,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Encodes one segment into H (T'×D).
    pub fn encode(&self, seg: &Segment) -> Result<HiddenSeq> {
        let h = self.hidden_batch(&[seg])?.squeeze(0)?;
        let (t, d) = h.dims2()?;
        let values = h.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(HiddenSeq {
            vectors: Array2::from_shape_vec((t, d), values).expect("dims from tensor"),
            frame_rate_hz: self.cfg.output_frame_rate_hz,
        })
    }

    /// Differentiable H for a batch of equally long segments: (B, T', D).
    pub fn hidden_batch(&self, segs: &[&Segment]) -> Result<Tensor> {
        let full = match self.cfg.mode {
            EncoderMode::OracleRoll => {
                let rolls = self.roll_input_tensor(segs)?;
                linear(&rolls, self.params.get("oracle.weight")?, Some(self.params.get("oracle.bias")?))?
            }
            EncoderMode::ConvRecurrent => {
                let features = self.features_tensor(segs)?;
                self.recurrent_states(&features)?
            }
        };
        self.pool(&full)
    }

    /// Roll readout logits (B, T, K) from features (B, T, F). `conv_recurrent` only.
    pub fn roll_logits(&self, features: &Tensor) -> Result<Tensor> {
        self.require_conv()?;
        let states = self.recurrent_states(features)?;
        linear(&states, self.params.get("readout.weight")?, Some(self.params.get("readout.bias")?))
    }

    /// Frame-level probabilities for one segment at the input frame rate.
    pub fn predict_roll(&self, seg: &Segment) -> Result<PianoRoll> {
        let features = self.features_tensor(&[seg])?;
        let probs = candle_nn::ops::sigmoid(&self.roll_logits(&features)?)?.squeeze(0)?;
        let (t, k) = probs.dims2()?;
        let values = probs.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(PianoRoll {
            frames: Array2::from_shape_vec((t, k), values).expect("dims from tensor"),
            frame_rate_hz: self.cfg.input_frame_rate_hz,
        })
    }

    /// Mean BCE of the readout against the targets, both (B, T, K).
    pub fn roll_loss(&self, features: &Tensor, target: &Tensor) -> Result<Tensor> {
        bce_with_logits(&self.roll_logits(features)?, target)
    }

    /// Clipped-probability BCE over whole segments, averaged over segments.
    pub fn evaluate_bce(&self, segs: &[Segment]) -> Result<f64> {
        let mut total = 0.0;
        for seg in segs {
            let pred = self.predict_roll(seg)?;
            let target = self.target_roll(seg)?;
            total += bce_loss(&target, &pred)?;
        }
        Ok(total / segs.len().max(1) as f64)
    }

    fn target_roll(&self, seg: &Segment) -> Result<PianoRoll> {
        let t = seg.features.nrows();
        let mut roll = notes_to_roll_at(&seg.notes, seg.duration_s, self.cfg.input_frame_rate_hz)?;
        if roll.num_frames() != t {
            return Err(Error::Shape(format!(
                "segment `{}` has {t} feature frames but its roll has {}",
                seg.source_id,
                roll.num_frames()
            )));
        }
        if roll.num_keys() != self.cfg.n_keys {
            roll.frames = roll.frames.slice(ndarray::s![.., ..self.cfg.n_keys.min(NUM_KEYS)]).to_owned();
        }
        Ok(roll)
    }

    fn require_conv(&self) -> Result<()> {
        if self.cfg.mode != EncoderMode::ConvRecurrent {
            return Err(Error::Config("operation needs a conv_recurrent encoder".into()));
        }
        Ok(())
    }

    pub fn features_tensor(&self, segs: &[&Segment]) -> Result<Tensor> {
        let first = segs.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let (t, f) = first.features.dim();
        if t == 0 || f != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "features of `{}` are {t}×{f}, encoder expects T×{}",
                first.source_id, self.cfg.input_dim
            )));
        }
        let mut data = Vec::with_capacity(segs.len() * t * f);
        for seg in segs {
            if seg.features.dim() != (t, f) {
                return Err(Error::Shape(format!(
                    "features of `{}` are {:?}, batch expects {:?}",
                    seg.source_id,
                    seg.features.dim(),
                    (t, f)
                )));
            }
            data.extend(seg.features.iter().copied());
        }
        Ok(Tensor::from_vec(data, (segs.len(), t, f), self.params.device())?.to_dtype(self.dtype())?)
    }

    fn roll_input_tensor(&self, segs: &[&Segment]) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut frames = None;
        for seg in segs {
            let roll = notes_to_roll_at(&seg.notes, seg.duration_s, self.cfg.input_frame_rate_hz)?;
            if roll.num_keys() != self.cfg.n_keys {
                return Err(Error::Shape(format!("oracle encoder expects {} keys", self.cfg.n_keys)));
            }
            match frames {
                None => frames = Some(roll.num_frames()),
                Some(t) if t != roll.num_frames() => {
                    return Err(Error::Shape("segments in a batch differ in length".into()))
                }
                _ => {}
            }
            data.extend(roll.frames.iter().copied());
        }
        let t = frames.ok_or_else(|| Error::Shape("empty batch".into()))?;
        if t == 0 {
            return Err(Error::Shape("segment has no frames".into()));
        }
        Ok(Tensor::from_vec(data, (segs.len(), t, self.cfg.n_keys), self.params.device())?.to_dtype(self.dtype())?)
    }

    /// Conv stack followed by the bidirectional GRU: (B, T, F) -> (B, T, 2R).
    fn recurrent_states(&self, features: &Tensor) -> Result<Tensor> {
        let pad = self.cfg.kernel_size / 2;
        let mut x = features.transpose(1, 2)?.contiguous()?;
        for i in 1..=2 {
            let w = self.params.get(&format!("conv{i}.weight"))?;
            let b = self.params.get(&format!("conv{i}.bias"))?;
            x = x.conv1d(w, pad, 1, 1, 1)?.broadcast_add(&b.unsqueeze(1)?)?.relu()?;
        }
        let x = x.transpose(1, 2)?.contiguous()?;
        let fwd = self.gru(&x, "gru_fwd", false)?;
        let bwd = self.gru(&x, "gru_bwd", true)?;
        Ok(Tensor::cat(&[fwd, bwd], 2)?)
    }

    fn gru(&self, x: &Tensor, prefix: &str, reverse: bool) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        let r = self.cfg.recurrent_width;
        let w_h = self.params.get(&format!("{prefix}.w_h"))?;
        let b_h = self.params.get(&format!("{prefix}.b_h"))?;
        let gx = linear(
            x,
            self.params.get(&format!("{prefix}.w_x"))?,
            Some(self.params.get(&format!("{prefix}.b_x"))?),
        )?;
        let mut h = Tensor::zeros((b, r), self.dtype(), self.params.device())?;
        let mut outputs = Vec::with_capacity(t);
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in order {
            let gx_t = gx.narrow(1, step, 1)?.squeeze(1)?;
            let gh = linear(&h, w_h, Some(b_h))?;
            let rz = candle_nn::ops::sigmoid(&(gx_t.narrow(1, 0, 2 * r)? + gh.narrow(1, 0, 2 * r)?)?)?;
            let reset = rz.narrow(1, 0, r)?;
            let update = rz.narrow(1, r, r)?;
            let cand = (gx_t.narrow(1, 2 * r, r)? + (reset * gh.narrow(1, 2 * r, r)?)?)?.tanh()?;
            h = (((1.0 - &update)? * cand)? + (update * &h)?)?;
            outputs.push(h.clone());
        }
        if reverse {
            outputs.reverse();
        }
        Ok(Tensor::stack(&outputs, 1)?)
    }

    /// Average pooling in time by the configured stride. Trailing frames that do
    /// not fill a window are dropped.
    fn pool(&self, h: &Tensor) -> Result<Tensor> {
        let stride = self.cfg.pool_stride();
        if stride == 1 {
            return Ok(h.clone());
        }
        let (b, t, d) = h.dims3()?;
        let out = t / stride;
        if out == 0 {
            return Err(Error::Shape(format!("{t} frames is shorter than the pooling stride {stride}")));
        }
        Ok(h.narrow(1, 0, out * stride)?.reshape((b, out, stride, d))?.mean(2)?)
    }

    /// Frame-objective pretraining with AdamW. Losses are recorded per step.
    pub fn pretrain(&mut self, dataset: &[Segment], hyper: &PretrainConfig) -> Result<PretrainReport> {
        self.require_conv()?;
        if dataset.is_empty() {
            return Err(Error::Data("empty pretraining dataset".into()));
        }
        let targets: Vec<PianoRoll> = dataset.iter().map(|s| self.target_roll(s)).collect::<Result<_>>()?;
        let mut opt = AdamW::new(
            self.params.vars(),
            ParamsAdamW {
                lr: hyper.learning_rate,
                weight_decay: hyper.weight_decay,
                ..ParamsAdamW::default()
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let full_batch = hyper.batch_size >= dataset.len() && hyper.crop_frames.is_none();
        let mut report = PretrainReport::default();
        for step in 0..hyper.steps {
            let picks: Vec<usize> = if full_batch {
                (0..dataset.len()).collect()
            } else {
                (0..hyper.batch_size.max(1)).map(|_| rng.random_range(0..dataset.len())).collect()
            };
            let (features, target) = self.crop_batch(dataset, &targets, &picks, hyper.crop_frames, &mut rng)?;
            let loss = self.roll_loss(&features, &target)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            let grads = run_with_large_stack(|| loss.backward())?;
            opt.step(&grads)?;
            report.losses.push(value);
        }
        Ok(report)
    }

    fn crop_batch(
        &self,
        dataset: &[Segment],
        targets: &[PianoRoll],
        picks: &[usize],
        crop: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, Tensor)> {
        let t_full = dataset[picks[0]].features.nrows();
        let len = crop.unwrap_or(t_full).min(t_full);
        let (f, k) = (self.cfg.input_dim, self.cfg.n_keys);
        let mut xs = Vec::with_capacity(picks.len() * len * f);
        let mut ys = Vec::with_capacity(picks.len() * len * k);
        for &i in picks {
            let seg = &dataset[i];
            let t = seg.features.nrows();
            if seg.features.ncols() != f || t < len {
                return Err(Error::Shape(format!("segment `{}` features are {:?}", seg.source_id, seg.features.dim())));
            }
            let start = if len < t { rng.random_range(0..=t - len) } else { 0 };
            xs.extend(seg.features.slice(ndarray::s![start..start + len, ..]).iter().copied());
            ys.extend(targets[i].frames.slice(ndarray::s![start..start + len, ..]).iter().copied());
        }
        let dev = self.params.device();
        let x = Tensor::from_vec(xs, (picks.len(), len, f), dev)?.to_dtype(self.dtype())?;
        let y = Tensor::from_vec(ys, (picks.len(), len, k), dev)?.to_dtype(self.dtype())?;
        Ok((x, y))
    }
}

/// Runs `f` on a helper thread with a large stack; backpropagation through long
/// recurrent graphs recurses once per graph node.
pub(crate) fn run_with_large_stack<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    std::thread::scope(|scope| {
        std::thread::Builder::new()
            .stack_size(1 << 30)
            .spawn_scoped(scope, f)
            .expect("spawn backward thread")
            .join()
            .expect("backward thread panicked")
    })
}
