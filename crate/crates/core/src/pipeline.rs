//! Stage models, their training loop, and constrained autoregressive decoding
//! for the hierarchy and the flattened baseline.

use std::cell::RefCell;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::codec::{sequence_cost, CodecConfig, SequenceCost, Slot, TokenCodec};
use crate::decoder::{masked_nll_sum, AudioContext, DecoderConfig, LmDecoder, OptimizerConfig, TokenBatch, Trainer};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{scalar, ParamStore};
use crate::roll::{roll_to_notes, RollThresholds};
use crate::types::{canonically_sorted, NoteEvent, Segment, SequenceKind, Stage, Token, TokenSequence, Vocab};

pub const LM_CHECKPOINT_KIND: &str = "lm";

/// An encoder copy plus one decoder, trained on one sequence kind.
#[derive(Debug)]
pub struct LmModel {
    pub kind: SequenceKind,
    pub encoder: Encoder,
    pub decoder: LmDecoder,
    pub codec: TokenCodec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LmModelConfig {
    kind: SequenceKind,
    encoder: EncoderConfig,
    decoder: DecoderConfig,
    codec: CodecConfig,
}

impl LmModel {
    pub fn new(kind: SequenceKind, encoder: &Encoder, decoder_cfg: DecoderConfig, codec: CodecConfig) -> Result<Self> {
        if decoder_cfg.audio_dim != encoder.cfg.hidden_dim {
            return Err(Error::Config(format!(
                "decoder audio_dim {} differs from encoder hidden_dim {}",
                decoder_cfg.audio_dim, encoder.cfg.hidden_dim
            )));
        }
        Ok(LmModel {
            kind,
            encoder: encoder.deep_clone()?,
            decoder: LmDecoder::new(decoder_cfg, encoder.dtype())?,
            codec: TokenCodec::new(codec)?,
        })
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(LmModel {
            kind: self.kind,
            encoder: self.encoder.deep_clone()?,
            decoder: self.decoder.deep_clone()?,
            codec: self.codec,
        })
    }

    pub fn sequence(&self, seg: &Segment) -> Result<TokenSequence> {
        self.codec.encode(seg, self.kind)
    }

    /// Detached H for one segment, (1, T', D).
    pub fn hidden(&self, seg: &Segment) -> Result<Tensor> {
        Ok(self.encoder.hidden_batch(&[seg])?.detach())
    }

    pub fn audio_context(&self, seg: &Segment) -> Result<AudioContext> {
        self.decoder.audio_context(&self.hidden(seg)?, None)
    }

    /// Sum of `-log p` over the loss mask of the segment's teacher-forced sequence.
    pub fn sequence_nll(&self, seg: &Segment) -> Result<f64> {
        let seq = self.sequence(seg)?;
        let batch = TokenBatch::new(&[&seq], self.decoder.dtype())?;
        let logits = self.decoder.forward(&self.hidden(seg)?, &batch.tokens)?;
        let (sum, _) = masked_nll_sum(&logits, &batch.tokens, &batch.mask)?;
        scalar(&sum)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = LmModelConfig {
            kind: self.kind,
            encoder: self.encoder.cfg.clone(),
            decoder: self.decoder.cfg.clone(),
            codec: self.codec.cfg,
        };
        let mut tensors = std::collections::BTreeMap::new();
        for (k, t) in self.encoder.params.to_tensors() {
            tensors.insert(format!("encoder.{k}"), t);
        }
        for (k, t) in self.decoder.params.to_tensors() {
            tensors.insert(format!("decoder.{k}"), t);
        }
        Checkpoint::new(LM_CHECKPOINT_KIND, &cfg, tensors)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind(LM_CHECKPOINT_KIND)?;
        let cfg: LmModelConfig = ck.config_as()?;
        let dtype = ck.tensors.values().next().map(|t| t.dtype()).unwrap_or(DType::F32);
        let encoder = Encoder::from_params(cfg.encoder, ParamStore::from_tensors(ck.with_prefix("encoder"), dtype)?)?;
        let decoder = LmDecoder::from_params(cfg.decoder, ParamStore::from_tensors(ck.with_prefix("decoder"), dtype)?)?;
        Ok(LmModel {
            kind: cfg.kind,
            encoder,
            decoder,
            codec: TokenCodec::new(cfg.codec)?,
        })
    }
}

pub const ENCODER_CHECKPOINT_KIND: &str = "encoder";

pub fn save_encoder(encoder: &Encoder, path: &Path) -> Result<()> {
    Checkpoint::new(ENCODER_CHECKPOINT_KIND, &encoder.cfg, encoder.params.to_tensors())?.save(path)
}

pub fn load_encoder(path: &Path) -> Result<Encoder> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(ENCODER_CHECKPOINT_KIND)?;
    let cfg: EncoderConfig = ck.config_as()?;
    let dtype = ck.tensors.values().next().map(|t| t.dtype()).unwrap_or(DType::F32);
    Encoder::from_params(cfg, ParamStore::from_tensors(ck.tensors, dtype)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Validation loss is logged every `eval_interval` steps and after the last one.
    pub eval_interval: usize,
    /// Keep the encoder fixed and train the decoder alone.
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            steps: 2000,
            batch_size: 4,
            optimizer: OptimizerConfig::default(),
            eval_interval: 50,
            freeze_encoder: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub stage: String,
    pub split: String,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub records: Vec<LossRecord>,
}

impl LossLog {
    pub fn push(&mut self, step: usize, stage: SequenceKind, split: &str, loss: f64) {
        self.records.push(LossRecord {
            step,
            stage: stage.name().to_string(),
            split: split.to_string(),
            loss,
        });
    }

    pub fn split(&self, split: &str) -> Vec<&LossRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// CSV with header `step,stage,split,loss`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn stack_hidden(parts: &[&Tensor]) -> Result<Tensor> {
    Ok(Tensor::cat(parts, 0)?)
}

/// Trains `model` in place on teacher-forced sequences of its kind.
pub fn train_lm(model: &mut LmModel, train: &[Segment], valid: &[Segment], cfg: &LmTrainConfig) -> Result<LossLog> {
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if cfg.batch_size == 0 || cfg.eval_interval == 0 {
        return Err(Error::Config("batch_size and eval_interval must be positive".into()));
    }
    let dtype = model.decoder.dtype();
    let train_seqs: Vec<TokenSequence> = train.iter().map(|s| model.sequence(s)).collect::<Result<_>>()?;
    let valid_seqs: Vec<TokenSequence> = valid.iter().map(|s| model.sequence(s)).collect::<Result<_>>()?;
    let frozen: Option<Vec<Tensor>> = if cfg.freeze_encoder {
        Some(train.iter().map(|s| model.hidden(s)).collect::<Result<_>>()?)
    } else {
        None
    };
    let mut vars = model.decoder.params.vars();
    if !cfg.freeze_encoder {
        vars.extend(model.encoder.params.vars());
    }
    let mut trainer = Trainer::new(vars, &cfg.optimizer, cfg.seed)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = Vec::new();
    let mut log = LossLog::default();
    for step in 1..=cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size.min(train.len()) {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut order_rng);
            }
            idx.push(order.pop().expect("refilled"));
        }
        let seqs: Vec<&TokenSequence> = idx.iter().map(|&i| &train_seqs[i]).collect();
        let batch = TokenBatch::new(&seqs, dtype)?;
        let audio = match &frozen {
            Some(h) => stack_hidden(&idx.iter().map(|&i| &h[i]).collect::<Vec<_>>())?,
            None => model.encoder.hidden_batch(&idx.iter().map(|&i| &train[i]).collect::<Vec<_>>())?,
        };
        let loss = trainer.train_step(&model.decoder, &audio, &batch).map_err(|e| match e {
            Error::Diverged { loss, .. } => Error::Diverged { step, loss },
            other => other,
        })?;
        log.push(step, model.kind, "train", loss);
        if !valid.is_empty() && (step % cfg.eval_interval == 0 || step == cfg.steps) {
            log.push(step, model.kind, "valid", mean_nll(model, valid, &valid_seqs, cfg.batch_size)?);
        }
    }
    Ok(log)
}

/// Token-weighted mean NLL over a segment set without dropout.
pub fn mean_nll(model: &LmModel, segs: &[Segment], seqs: &[TokenSequence], chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0.0;
    for (segs, seqs) in segs.chunks(chunk.max(1)).zip(seqs.chunks(chunk.max(1))) {
        let refs: Vec<&Segment> = segs.iter().collect();
        let audio = model.encoder.hidden_batch(&refs)?.detach();
        let batch = TokenBatch::new(&seqs.iter().collect::<Vec<_>>(), model.decoder.dtype())?;
        let logits = model.decoder.forward(&audio, &batch.tokens)?;
        let (sum, n) = masked_nll_sum(&logits, &batch.tokens, &batch.mask)?;
        total += scalar(&sum)?;
        count += n;
    }
    if count == 0.0 {
        return Err(Error::EmptyMask);
    }
    Ok(total / count)
}

/// One independent training job.
pub struct TrainJob<'a> {
    pub model: LmModel,
    pub train: &'a [Segment],
    pub valid: &'a [Segment],
    pub cfg: LmTrainConfig,
}

/// Runs each job on its own thread; results come back in job order.
pub fn train_parallel(jobs: Vec<TrainJob<'_>>) -> Vec<Result<(LmModel, LossLog)>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .into_iter()
            .map(|mut job| {
                scope.spawn(move || {
                    let log = train_lm(&mut job.model, job.train, job.valid, &job.cfg)?;
                    Ok((job.model, log))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Data("training thread panicked".into()))))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// Restrict every slot to the token classes it accepts.
    pub grammar: bool,
    /// Onsets never decrease, and pitch increases among notes sharing an onset.
    pub monotonic: bool,
    pub beam_width: usize,
    /// Upper bound on generated notes, on top of the decoder's length limit.
    pub max_notes: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            grammar: true,
            monotonic: true,
            beam_width: 1,
            max_notes: 512,
        }
    }
}

/// Anything that scores the next token after a batch of equally long prefixes.
pub trait StepModel {
    fn next_logits(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f32>>>;

    /// Longest token sequence the model can take.
    fn max_len(&self) -> usize;
}

/// A decoder bound to one segment's audio context.
pub struct DecoderStep<'a> {
    decoder: &'a LmDecoder,
    ctx: AudioContext,
    expanded: RefCell<Option<AudioContext>>,
}

impl<'a> DecoderStep<'a> {
    pub fn new(decoder: &'a LmDecoder, ctx: AudioContext) -> Self {
        DecoderStep {
            decoder,
            ctx,
            expanded: RefCell::new(None),
        }
    }
}

impl StepModel for DecoderStep<'_> {
    fn next_logits(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f32>>> {
        let n = prefixes.len();
        let len = prefixes[0].len();
        let flat: Vec<u32> = prefixes.iter().flatten().copied().collect();
        let tokens = Tensor::from_vec(flat, (n, len), &Device::Cpu)?;
        let mut cache = self.expanded.borrow_mut();
        if cache.as_ref().map(|c| c.batch()) != Some(n) {
            *cache = Some(self.ctx.expand(n)?);
        }
        let logits = self.decoder.token_logits(cache.as_ref().expect("filled"), &tokens, None)?;
        let last = logits.narrow(1, len - 1, 1)?.squeeze(1)?.to_dtype(DType::F32)?;
        Ok(last.to_vec2::<f32>()?)
    }

    fn max_len(&self) -> usize {
        self.decoder.cfg.max_seq_len.saturating_sub(self.ctx.frames())
    }
}

/// Per-slot legal tokens.
struct Grammar<'a> {
    codec: &'a TokenCodec,
    kind: SequenceKind,
    cfg: &'a DecodeConfig,
}

impl Grammar<'_> {
    fn slot_of(&self, tokens: &[u32], note: usize, slot: Slot) -> Option<u32> {
        let pattern = self.codec.slot_pattern(self.kind);
        let j = pattern.iter().position(|&s| s == slot)?;
        tokens.get(TokenCodec::header_len(self.kind) + note * pattern.len() + j).copied()
    }

    fn time_index(id: u32) -> Option<u16> {
        match Vocab::token(id) {
            Some(Token::Time(t)) => Some(t),
            _ => None,
        }
    }

    /// `None` means every token is allowed.
    fn allowed(&self, tokens: &[u32], note: usize, slot: Slot, free: bool) -> Option<Vec<u32>> {
        if !self.cfg.grammar {
            return None;
        }
        let max_t = self.codec.cfg.max_time_index;
        let mut ids = Vec::new();
        match slot {
            Slot::Onset => {
                if free {
                    ids.push(Vocab::EOS);
                }
                let prev = if note > 0 { self.slot_of(tokens, note - 1, Slot::Onset) } else { None };
                let floor = match prev {
                    Some(id) if self.cfg.monotonic => Self::time_index(id),
                    _ => None,
                };
                if floor.is_none() {
                    ids.push(Vocab::SUSTAIN);
                }
                // The last index is left out so every onset has a later offset index.
                ids.extend((floor.unwrap_or(0)..max_t).map(Vocab::time));
            }
            Slot::Pitch => {
                let mut lo = 0u8;
                if self.cfg.monotonic && note > 0 {
                    let cur = self.slot_of(tokens, note, Slot::Onset).and_then(Self::time_index);
                    let prev = self.slot_of(tokens, note - 1, Slot::Onset).and_then(Self::time_index);
                    if cur.is_some() && cur == prev {
                        if let Some(Token::Pitch(p)) = self.slot_of(tokens, note - 1, Slot::Pitch).and_then(Vocab::token) {
                            lo = p.saturating_add(1);
                            if p == 127 {
                                lo = 0;
                            }
                        }
                    }
                }
                ids.extend((lo..=127).map(Vocab::pitch));
            }
            Slot::Velocity => ids.extend((1..=127).map(Vocab::velocity)),
            Slot::Offset => {
                ids.push(Vocab::SUSTAIN);
                let onset = self.slot_of(tokens, note, Slot::Onset).and_then(Self::time_index).unwrap_or(0);
                ids.extend((onset + 1..=max_t).map(Vocab::time));
            }
        }
        Some(ids)
    }
}

/// Tokens of a note that are given rather than generated (`None` marks a target slot).
pub type SkeletonNote = Vec<Option<u32>>;

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<u32>,
    score: f64,
    done: bool,
}

enum Action {
    Fixed(u32),
    Choose(Option<Vec<u32>>),
}

/// Beam search (greedy at width 1) over one sequence kind.
///
/// Without a skeleton the model decides the number of notes by emitting
/// `<eos>` in an onset slot. With a skeleton, every given slot is copied and
/// only the `None` slots are predicted.
pub fn generate(
    model: &dyn StepModel,
    codec: &TokenCodec,
    kind: SequenceKind,
    skeleton: Option<&[SkeletonNote]>,
    cfg: &DecodeConfig,
) -> Result<TokenSequence> {
    let pattern = codec.slot_pattern(kind);
    let header = TokenCodec::header(kind);
    let h = header.len();
    let note_cap = h + cfg.max_notes * pattern.len() + 1;
    let max_len = model.max_len().min(note_cap.max(h + 1));
    let width = cfg.beam_width.max(1);
    let grammar = Grammar { codec, kind, cfg };
    let mut beam = vec![Hyp {
        tokens: header,
        score: 0.0,
        done: false,
    }];
    while beam.iter().any(|b| !b.done) {
        let mut next: Vec<Hyp> = beam.iter().filter(|b| b.done).cloned().collect();
        let mut choose: Vec<(Hyp, Option<Vec<u32>>)> = Vec::new();
        for hyp in beam.into_iter().filter(|b| !b.done) {
            if hyp.tokens.len() >= max_len {
                continue;
            }
            let k = hyp.tokens.len() - h;
            let (note, j) = (k / pattern.len(), k % pattern.len());
            let action = match skeleton {
                Some(sk) if note >= sk.len() => Action::Fixed(Vocab::EOS),
                Some(sk) => match sk[note].get(j).copied().flatten() {
                    Some(id) => Action::Fixed(id),
                    None => Action::Choose(grammar.allowed(&hyp.tokens, note, pattern[j], false)),
                },
                None => Action::Choose(grammar.allowed(&hyp.tokens, note, pattern[j], true)),
            };
            match action {
                Action::Fixed(id) => {
                    let mut t = hyp.tokens.clone();
                    t.push(id);
                    next.push(Hyp {
                        done: id == Vocab::EOS,
                        tokens: t,
                        score: hyp.score,
                    });
                }
                Action::Choose(allowed) => choose.push((hyp, allowed)),
            }
        }
        if !choose.is_empty() {
            // Hypotheses in one beam always share a length, so one batched call serves them.
            let prefixes: Vec<Vec<u32>> = choose.iter().map(|(h, _)| h.tokens.clone()).collect();
            let logits = model.next_logits(&prefixes)?;
            for ((hyp, allowed), row) in choose.iter().zip(&logits) {
                let logp = log_softmax(row);
                let mut cands: Vec<u32> = match allowed {
                    Some(ids) => ids.clone(),
                    None => (0..row.len() as u32).collect(),
                };
                cands.sort_by(|&a, &b| logp[b as usize].total_cmp(&logp[a as usize]).then(a.cmp(&b)));
                for &id in cands.iter().take(width) {
                    let mut t = hyp.tokens.clone();
                    t.push(id);
                    next.push(Hyp {
                        done: id == Vocab::EOS,
                        tokens: t,
                        score: hyp.score + logp[id as usize],
                    });
                }
            }
        }
        next.sort_by(|a, b| b.score.total_cmp(&a.score));
        next.truncate(width);
        beam = next;
    }
    match beam.into_iter().next() {
        Some(best) => {
            let mask = vec![false; best.tokens.len()];
            TokenSequence::new(best.tokens, kind, mask)
        }
        // Every hypothesis ran past the length limit.
        None => Err(Error::DecodeOverflow { max: max_len }),
    }
}

fn log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row.iter().map(|&x| (f64::from(x) - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&x| f64::from(x) - lse).collect()
}

/// Result of transcribing one segment.
#[derive(Debug, Clone)]
pub struct Transcription {
    pub notes: Vec<NoteEvent>,
    /// Generated sequences, in stage order.
    pub sequences: Vec<TokenSequence>,
    pub cost: SequenceCost,
}

fn finish_notes(codec: &TokenCodec, seq: &TokenSequence, duration_s: f64) -> Result<Vec<NoteEvent>> {
    let step = codec.cfg.time_step_s;
    let notes = codec.decode(seq, duration_s)?;
    Ok(canonically_sorted(notes.iter().map(|n| n.to_note(64, 0.5, step)).collect()))
}

/// Slot tokens of each note in a decoded-by-layout sequence.
fn note_groups(codec: &TokenCodec, seq: &TokenSequence) -> Vec<Vec<u32>> {
    let plen = codec.slot_pattern(seq.kind).len();
    let h = TokenCodec::header_len(seq.kind);
    let body = &seq.ids[h..seq.ids.len().saturating_sub(1)];
    body.chunks(plen).map(<[u32]>::to_vec).collect()
}

/// The three stage models.
#[derive(Debug)]
pub struct Hierarchy {
    pub onset_pitch: LmModel,
    pub velocity: LmModel,
    pub offset: LmModel,
}

impl Hierarchy {
    pub fn new(onset_pitch: LmModel, velocity: LmModel, offset: LmModel) -> Result<Self> {
        let expect = [
            (&onset_pitch, SequenceKind::OnsetPitch),
            (&velocity, SequenceKind::Velocity),
            (&offset, SequenceKind::Offset),
        ];
        for (m, kind) in expect {
            if m.kind != kind {
                return Err(Error::StageMismatch(format!("{} model given for the {} stage", m.kind, kind)));
            }
            if m.codec != onset_pitch.codec {
                return Err(Error::StageMismatch(format!("{} stage uses a different codec configuration", kind)));
            }
            if m.decoder.cfg.vocab_size != Vocab::SIZE {
                return Err(Error::StageMismatch(format!("{} stage has vocabulary {}", kind, m.decoder.cfg.vocab_size)));
            }
        }
        Ok(Hierarchy {
            onset_pitch,
            velocity,
            offset,
        })
    }

    pub fn stage(&self, stage: Stage) -> &LmModel {
        match stage {
            Stage::OnsetPitch => &self.onset_pitch,
            Stage::Velocity => &self.velocity,
            Stage::Offset => &self.offset,
        }
    }

    /// Onset-pitch generation, then velocity and offset on the fixed skeleton.
    pub fn transcribe(&self, seg: &Segment, cfg: &DecodeConfig) -> Result<Transcription> {
        let codec = self.onset_pitch.codec;
        let step1 = DecoderStep::new(&self.onset_pitch.decoder, self.onset_pitch.audio_context(seg)?);
        let b1 = generate(&step1, &codec, SequenceKind::OnsetPitch, None, cfg)?;
        let skeleton: Vec<SkeletonNote> = note_groups(&codec, &b1)
            .into_iter()
            .map(|g| vec![Some(g[0]), Some(g[1]), None])
            .collect();
        let step2 = DecoderStep::new(&self.velocity.decoder, self.velocity.audio_context(seg)?);
        let b2 = generate(&step2, &codec, SequenceKind::Velocity, Some(&skeleton), cfg)?;
        let with_velocity = codec.slot_pattern(SequenceKind::Offset).contains(&Slot::Velocity);
        let skeleton: Vec<SkeletonNote> = note_groups(&codec, &b2)
            .into_iter()
            .map(|g| {
                let mut s: Vec<Option<u32>> = vec![Some(g[0]), Some(g[1])];
                if with_velocity {
                    s.push(Some(g[2]));
                }
                s.push(None);
                s
            })
            .collect();
        let step3 = DecoderStep::new(&self.offset.decoder, self.offset.audio_context(seg)?);
        let b3 = generate(&step3, &codec, SequenceKind::Offset, Some(&skeleton), cfg)?;

        let mut notes = codec.decode(&b3, seg.duration_s)?;
        let velocities = codec.decode(&b2, seg.duration_s)?;
        for (n, v) in notes.iter_mut().zip(&velocities) {
            n.velocity = v.velocity;
        }
        let step = codec.cfg.time_step_s;
        let notes = canonically_sorted(notes.iter().map(|n| n.to_note(64, 0.5, step)).collect());
        let cost = sequence_cost(
            step1.ctx.frames() as u64,
            notes.len() as u64,
            self.onset_pitch.decoder.cfg.embed_dim as u64,
        );
        Ok(Transcription {
            notes,
            sequences: vec![b1, b2, b3],
            cost,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for stage in Stage::ALL {
            self.stage(stage).save(&dir.join(format!("{}.safetensors", stage.name())))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let load = |s: Stage| LmModel::load(&dir.join(format!("{}.safetensors", s.name())));
        Hierarchy::new(load(Stage::OnsetPitch)?, load(Stage::Velocity)?, load(Stage::Offset)?)
    }
}

/// Single-model baseline over the interleaved `(o, p, v, d)` sequence.
pub fn transcribe_flattened(model: &LmModel, seg: &Segment, cfg: &DecodeConfig) -> Result<Transcription> {
    if model.kind != SequenceKind::Flattened {
        return Err(Error::StageMismatch(format!("{} model given to the flattened baseline", model.kind)));
    }
    let step = DecoderStep::new(&model.decoder, model.audio_context(seg)?);
    let seq = generate(&step, &model.codec, SequenceKind::Flattened, None, cfg)?;
    let notes = finish_notes(&model.codec, &seq, seg.duration_s)?;
    let cost = sequence_cost(step.ctx.frames() as u64, notes.len() as u64, model.decoder.cfg.embed_dim as u64);
    Ok(Transcription {
        notes,
        sequences: vec![seq],
        cost,
    })
}

/// Roll baseline: the encoder's frame readout, thresholded into notes.
pub fn transcribe_roll(encoder: &Encoder, seg: &Segment, th: &RollThresholds) -> Result<Vec<NoteEvent>> {
    Ok(roll_to_notes(&encoder.predict_roll(seg)?, th))
}
