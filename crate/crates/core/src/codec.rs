//! Conversion between canonical note lists and token sequences.
//!
//! Four layouts share one grammar: `<sos>`, an optional stage query token,
//! then a fixed slot pattern repeated once per note, then `<eos>`:
//!
//! ```text
//! flattened   <sos>       (o p v d)* <eos>
//! onset_pitch <sos> q_p   (o p)*     <eos>
//! velocity    <sos> q_v   (o p v)*   <eos>
//! offset      <sos> q_f   (o p v d)* <eos>
//! ```
//!
//! Onset and offset slots hold a time token, or `<note-sustain>` when that end
//! of the note lies outside the segment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{canonically_sorted, NoteEvent, Segment, SequenceKind, Stage, Token, TokenSequence, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub time_step_s: f64,
    pub segment_duration_s: f64,
    pub max_time_index: u16,
    /// Whether the offset stage interleaves velocity tokens (o, p, v, d) or
    /// conditions on onset and pitch only (o, p, d).
    pub offset_includes_velocity: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            time_step_s: 0.01,
            segment_duration_s: 10.0,
            max_time_index: 1000,
            offset_includes_velocity: true,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let steps = self.segment_duration_s / self.time_step_s;
        if !(self.time_step_s > 0.0) || (steps - f64::from(self.max_time_index)).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "max_time_index {} must equal segment_duration_s / time_step_s = {steps}",
                self.max_time_index
            )));
        }
        if u32::from(self.max_time_index) >= Vocab::NUM_TIME {
            return Err(Error::Config(format!(
                "max_time_index {} exceeds the {} time tokens",
                self.max_time_index,
                Vocab::NUM_TIME
            )));
        }
        Ok(())
    }

    fn steps_per_second(&self) -> f64 {
        (1.0 / self.time_step_s).round()
    }
}

/// One attribute position inside a note's slot group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Onset,
    Pitch,
    Velocity,
    Offset,
}

/// A note recovered from a token sequence. Fields absent from the layout are `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedNote {
    pub onset_s: f64,
    pub pitch: u8,
    pub velocity: Option<u8>,
    pub offset_s: Option<f64>,
    pub onset_sustained: bool,
    pub offset_sustained: bool,
}

impl DecodedNote {
    /// Completes missing fields and enforces `offset > onset` by extending
    /// degenerate notes to one time step.
    pub fn to_note(&self, default_velocity: u8, default_duration_s: f64, min_duration_s: f64) -> NoteEvent {
        let velocity = self.velocity.unwrap_or(default_velocity).min(127);
        let mut offset = self.offset_s.unwrap_or(self.onset_s + default_duration_s);
        if offset <= self.onset_s {
            offset = self.onset_s + min_duration_s;
        }
        NoteEvent {
            onset_s: self.onset_s,
            offset_s: offset,
            pitch: self.pitch.min(127),
            velocity,
        }
    }
}

/// Bidirectional note/token converter for one codec configuration.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TokenCodec {
    pub cfg: CodecConfig,
}

/// Quantizes seconds to a 10 ms time index with the default configuration.
pub fn quantize_time(t: f64) -> u16 {
    TokenCodec::default().quantize_time(t)
}

impl TokenCodec {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(TokenCodec { cfg })
    }

    /// `round(t / step)` clamped to `[0, max_time_index]`; halves round away from zero.
    pub fn quantize_time(&self, t: f64) -> u16 {
        let idx = (t / self.cfg.time_step_s).round();
        idx.clamp(0.0, f64::from(self.cfg.max_time_index)) as u16
    }

    pub fn time_of_index(&self, index: u16) -> f64 {
        f64::from(index) / self.cfg.steps_per_second()
    }

    /// Slot pattern repeated for each note in a sequence of `kind`.
    pub fn slot_pattern(&self, kind: SequenceKind) -> &'static [Slot] {
        match kind {
            SequenceKind::Flattened => &[Slot::Onset, Slot::Pitch, Slot::Velocity, Slot::Offset],
            SequenceKind::OnsetPitch => &[Slot::Onset, Slot::Pitch],
            SequenceKind::Velocity => &[Slot::Onset, Slot::Pitch, Slot::Velocity],
            SequenceKind::Offset if self.cfg.offset_includes_velocity => {
                &[Slot::Onset, Slot::Pitch, Slot::Velocity, Slot::Offset]
            }
            SequenceKind::Offset => &[Slot::Onset, Slot::Pitch, Slot::Offset],
        }
    }

    /// Number of leading tokens before the first note slot (`<sos>` and the query token).
    pub fn header_len(kind: SequenceKind) -> usize {
        match kind {
            SequenceKind::Flattened => 1,
            _ => 2,
        }
    }

    pub fn header(kind: SequenceKind) -> Vec<u32> {
        match kind.stage() {
            None => vec![Vocab::SOS],
            Some(stage) => vec![Vocab::SOS, Vocab::query(stage)],
        }
    }

    /// Whether a slot of `kind` is a prediction target (carries loss).
    pub fn is_target(kind: SequenceKind, slot: Slot) -> bool {
        match kind {
            SequenceKind::Flattened => true,
            SequenceKind::OnsetPitch => matches!(slot, Slot::Onset | Slot::Pitch),
            SequenceKind::Velocity => slot == Slot::Velocity,
            SequenceKind::Offset => slot == Slot::Offset,
        }
    }

    /// Sequence length for `n` notes, without padding.
    pub fn sequence_len(&self, kind: SequenceKind, n: usize) -> usize {
        Self::header_len(kind) + n * self.slot_pattern(kind).len() + 1
    }

    pub fn encode_flattened(&self, seg: &Segment) -> Result<TokenSequence> {
        self.encode(seg, SequenceKind::Flattened)
    }

    pub fn encode_stage(&self, seg: &Segment, stage: Stage) -> Result<TokenSequence> {
        self.encode(seg, stage.into())
    }

    pub fn encode(&self, seg: &Segment, kind: SequenceKind) -> Result<TokenSequence> {
        let notes = canonically_sorted(seg.notes.clone());
        let pattern = self.slot_pattern(kind);
        let mut ids = Self::header(kind);
        let mut mask = vec![false; ids.len()];
        for note in &notes {
            if note.onset_s > seg.duration_s || note.offset_s < 0.0 {
                return Err(Error::OutOfSegment {
                    onset_s: note.onset_s,
                    duration_s: seg.duration_s,
                });
            }
            for &slot in pattern {
                ids.push(self.slot_token(note, slot, seg.duration_s));
                mask.push(Self::is_target(kind, slot));
            }
        }
        ids.push(Vocab::EOS);
        mask.push(true);
        TokenSequence::new(ids, kind, mask)
    }

    fn slot_token(&self, note: &NoteEvent, slot: Slot, duration_s: f64) -> u32 {
        match slot {
            Slot::Onset if note.onset_s < 0.0 => Vocab::SUSTAIN,
            Slot::Onset => Vocab::time(self.quantize_time(note.onset_s)),
            Slot::Offset if note.offset_s > duration_s => Vocab::SUSTAIN,
            Slot::Offset => Vocab::time(self.quantize_time(note.offset_s)),
            Slot::Pitch => Vocab::pitch(note.pitch),
            Slot::Velocity => Vocab::velocity(note.velocity),
        }
    }

    /// Whether token `id` may fill `slot`.
    pub fn slot_accepts(slot: Slot, id: u32) -> bool {
        match (slot, Vocab::token(id)) {
            (Slot::Onset | Slot::Offset, Some(Token::Time(_) | Token::Sustain)) => true,
            (Slot::Pitch, Some(Token::Pitch(_))) => true,
            (Slot::Velocity, Some(Token::Velocity(_))) => true,
            _ => false,
        }
    }

    /// Parses a sequence back into notes. `duration_s` is the segment length
    /// that `<note-sustain>` offsets resolve to; onsets resolve to 0.
    pub fn decode(&self, seq: &TokenSequence, duration_s: f64) -> Result<Vec<DecodedNote>> {
        let ids = &seq.ids;
        let header = Self::header(seq.kind);
        for (pos, &expected) in header.iter().enumerate() {
            match ids.get(pos) {
                None => return Err(Error::Truncated),
                Some(&id) if id != expected => {
                    return Err(Error::malformed(
                        pos,
                        format!("expected {:?}, found {:?}", Vocab::token(expected), Vocab::token(id)),
                    ))
                }
                Some(_) => {}
            }
        }
        let pattern = self.slot_pattern(seq.kind);
        let mut notes = Vec::new();
        let mut pos = header.len();
        loop {
            match ids.get(pos) {
                None => return Err(Error::Truncated),
                Some(&Vocab::EOS) => break,
                Some(_) => {}
            }
            let mut note = DecodedNote {
                onset_s: 0.0,
                pitch: 0,
                velocity: None,
                offset_s: None,
                onset_sustained: false,
                offset_sustained: false,
            };
            for &slot in pattern {
                let id = *ids.get(pos).ok_or(Error::Truncated)?;
                if !Self::slot_accepts(slot, id) {
                    return Err(Error::malformed(
                        pos,
                        format!("{:?} cannot fill the {slot:?} slot", Vocab::token(id)),
                    ));
                }
                match (slot, Vocab::token(id)) {
                    (Slot::Onset, Some(Token::Sustain)) => {
                        note.onset_s = 0.0;
                        note.onset_sustained = true;
                    }
                    (Slot::Onset, Some(Token::Time(t))) => note.onset_s = self.time_of_index(t),
                    (Slot::Offset, Some(Token::Sustain)) => {
                        note.offset_s = Some(duration_s);
                        note.offset_sustained = true;
                    }
                    (Slot::Offset, Some(Token::Time(t))) => note.offset_s = Some(self.time_of_index(t)),
                    (Slot::Pitch, Some(Token::Pitch(p))) => note.pitch = p,
                    (Slot::Velocity, Some(Token::Velocity(v))) => note.velocity = Some(v),
                    _ => unreachable!("slot_accepts checked the token class"),
                }
                pos += 1;
            }
            notes.push(note);
        }
        if let Some(extra) = ids[pos + 1..].iter().position(|&id| id != Vocab::PAD) {
            return Err(Error::malformed(pos + 1 + extra, "tokens after <eos>"));
        }
        Ok(notes)
    }
}

/// Attention cost of splitting the note sequence across three models versus
/// one model over the full interleaved sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SequenceCost {
    pub hierarchical_cost: f64,
    pub single_model_cost: f64,
    pub ratio: f64,
}

/// `3·(T+N)²·D` for the hierarchy against `(T+3N)²·D` for a single model.
/// The ratio is single over hierarchical; it is 1 when both costs vanish.
pub fn sequence_cost(t_frames: u64, n_notes: u64, dim: u64) -> SequenceCost {
    let (t, n, d) = (t_frames as f64, n_notes as f64, dim as f64);
    let hierarchical_cost = 3.0 * (t + n).powi(2) * d;
    let single_model_cost = (t + 3.0 * n).powi(2) * d;
    let ratio = if hierarchical_cost == 0.0 {
        1.0
    } else {
        single_model_cost / hierarchical_cost
    };
    SequenceCost {
        hierarchical_cost,
        single_model_cost,
        ratio,
    }
}
