//! Shared domain types: notes, segments, the token vocabulary, token
//! sequences, piano rolls and encoder hidden sequences.

use std::fmt;
use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowest MIDI pitch on an 88-key piano (A0).
pub const MIN_PIANO_PITCH: u8 = 21;
/// Highest MIDI pitch on an 88-key piano (C8).
pub const MAX_PIANO_PITCH: u8 = 108;
pub const NUM_KEYS: usize = 88;

/// One played note.
///
/// Serialized with the keys `onset`, `offset`, `pitch`, `velocity`; times are
/// seconds. Deserialization re-checks the invariants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNote")]
pub struct NoteEvent {
    #[serde(rename = "onset")]
    pub onset_s: f64,
    #[serde(rename = "offset")]
    pub offset_s: f64,
    pub pitch: u8,
    pub velocity: u8,
}

#[derive(Deserialize)]
struct RawNote {
    onset: f64,
    offset: f64,
    pitch: u8,
    velocity: u8,
}

impl TryFrom<RawNote> for NoteEvent {
    type Error = Error;

    fn try_from(raw: RawNote) -> Result<Self> {
        NoteEvent::new(raw.onset, raw.pitch, raw.velocity, raw.offset)
    }
}

impl NoteEvent {
    pub fn new(onset_s: f64, pitch: u8, velocity: u8, offset_s: f64) -> Result<Self> {
        let note = NoteEvent {
            onset_s,
            offset_s,
            pitch,
            velocity,
        };
        note.validate()?;
        Ok(note)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.onset_s.is_finite() || !self.offset_s.is_finite() {
            return Err(Error::InvalidNote(format!("non-finite time in {self}")));
        }
        if self.offset_s <= self.onset_s {
            return Err(Error::InvalidNote(format!("offset not after onset in {self}")));
        }
        if self.pitch > 127 || self.velocity > 127 {
            return Err(Error::InvalidNote(format!("MIDI value out of range in {self}")));
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        self.offset_s - self.onset_s
    }

    /// Shift both times by `delta` seconds.
    pub fn shifted(&self, delta: f64) -> NoteEvent {
        NoteEvent {
            onset_s: self.onset_s + delta,
            offset_s: self.offset_s + delta,
            ..*self
        }
    }
}

impl fmt::Display for NoteEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({:.3}s..{:.3}s pitch {} vel {})",
            self.onset_s, self.offset_s, self.pitch, self.velocity
        )
    }
}

/// Stable sort by onset, then pitch. Notes tied on both keys keep their input order.
pub fn canonical_sort(notes: &mut [NoteEvent]) {
    notes.sort_by(|a, b| {
        a.onset_s
            .total_cmp(&b.onset_s)
            .then(a.pitch.cmp(&b.pitch))
    });
}

pub fn canonically_sorted(mut notes: Vec<NoteEvent>) -> Vec<NoteEvent> {
    canonical_sort(&mut notes);
    notes
}

pub fn is_canonical(notes: &[NoteEvent]) -> bool {
    notes.windows(2).all(|w| {
        w[0].onset_s
            .total_cmp(&w[1].onset_s)
            .then(w[0].pitch.cmp(&w[1].pitch))
            .is_le()
    })
}

/// A fixed-length window of a piece: its notes (times relative to the window
/// start) and the T×F feature matrix the encoder consumes.
///
/// Notes that cross a window edge are kept; they may carry a negative onset or
/// an offset past `duration_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub notes: Vec<NoteEvent>,
    pub duration_s: f64,
    pub features: Array2<f32>,
    pub source_id: String,
}

impl Segment {
    pub const DEFAULT_DURATION_S: f64 = 10.0;

    /// Builds a segment, sorting the notes canonically.
    pub fn new(
        notes: Vec<NoteEvent>,
        duration_s: f64,
        features: Array2<f32>,
        source_id: impl Into<String>,
    ) -> Self {
        Segment {
            notes: canonically_sorted(notes),
            duration_s,
            features,
            source_id: source_id.into(),
        }
    }

    /// Segment without features (0×0), for code paths that only need notes.
    pub fn from_notes(notes: Vec<NoteEvent>, duration_s: f64) -> Self {
        Segment::new(notes, duration_s, Array2::zeros((0, 0)), "")
    }
}

/// The three conditional models of the hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    OnsetPitch,
    Velocity,
    Offset,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::OnsetPitch, Stage::Velocity, Stage::Offset];

    pub fn name(self) -> &'static str {
        SequenceKind::from(self).name()
    }
}

/// Layout of a token sequence: the single flattened stream or one hierarchy stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    Flattened,
    OnsetPitch,
    Velocity,
    Offset,
}

impl SequenceKind {
    pub const ALL: [SequenceKind; 4] = [
        SequenceKind::Flattened,
        SequenceKind::OnsetPitch,
        SequenceKind::Velocity,
        SequenceKind::Offset,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SequenceKind::Flattened => "flattened",
            SequenceKind::OnsetPitch => "onset_pitch",
            SequenceKind::Velocity => "velocity",
            SequenceKind::Offset => "offset",
        }
    }

    pub fn stage(self) -> Option<Stage> {
        match self {
            SequenceKind::Flattened => None,
            SequenceKind::OnsetPitch => Some(Stage::OnsetPitch),
            SequenceKind::Velocity => Some(Stage::Velocity),
            SequenceKind::Offset => Some(Stage::Offset),
        }
    }
}

impl From<Stage> for SequenceKind {
    fn from(stage: Stage) -> Self {
        match stage {
            Stage::OnsetPitch => SequenceKind::OnsetPitch,
            Stage::Velocity => SequenceKind::Velocity,
            Stage::Offset => SequenceKind::Offset,
        }
    }
}

impl fmt::Display for SequenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SequenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SequenceKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sequence kind `{s}`")))
    }
}

/// A decoded vocabulary entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Pad,
    Sos,
    Eos,
    Unk,
    Sustain,
    Query(Stage),
    Time(u16),
    Pitch(u8),
    Velocity(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenClass {
    Special,
    Query,
    Sustain,
    Time,
    Pitch,
    Velocity,
}

/// Fixed 1265-entry token dictionary.
///
/// | ids         | tokens                          |
/// |-------------|---------------------------------|
/// | 0..=3       | `<pad>` `<sos>` `<eos>` `<unk>` |
/// | 4           | `<note-sustain>`                |
/// | 5..=7       | `q_p` `q_v` `q_f`               |
/// | 8..=1008    | time 0..=1000 (10 ms steps)     |
/// | 1009..=1136 | pitch 0..=127                   |
/// | 1137..=1264 | velocity 0..=127                |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Vocab;

impl Vocab {
    pub const SIZE: usize = 1265;
    pub const PAD: u32 = 0;
    pub const SOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const UNK: u32 = 3;
    pub const SUSTAIN: u32 = 4;
    pub const QUERY_PITCH: u32 = 5;
    pub const QUERY_VELOCITY: u32 = 6;
    pub const QUERY_OFFSET: u32 = 7;
    pub const TIME_BASE: u32 = 8;
    pub const NUM_TIME: u32 = 1001;
    pub const PITCH_BASE: u32 = Self::TIME_BASE + Self::NUM_TIME;
    pub const VELOCITY_BASE: u32 = Self::PITCH_BASE + 128;

    pub fn ranges() -> [(TokenClass, Range<u32>); 6] {
        [
            (TokenClass::Special, 0..4),
            (TokenClass::Sustain, 4..5),
            (TokenClass::Query, 5..8),
            (TokenClass::Time, Self::TIME_BASE..Self::PITCH_BASE),
            (TokenClass::Pitch, Self::PITCH_BASE..Self::VELOCITY_BASE),
            (TokenClass::Velocity, Self::VELOCITY_BASE..Self::SIZE as u32),
        ]
    }

    pub fn id(token: Token) -> u32 {
        match token {
            Token::Pad => Self::PAD,
            Token::Sos => Self::SOS,
            Token::Eos => Self::EOS,
            Token::Unk => Self::UNK,
            Token::Sustain => Self::SUSTAIN,
            Token::Query(stage) => Self::query(stage),
            Token::Time(t) => {
                assert!(u32::from(t) < Self::NUM_TIME, "time index {t} out of range");
                Self::TIME_BASE + u32::from(t)
            }
            Token::Pitch(p) => {
                assert!(p < 128, "pitch {p} out of range");
                Self::PITCH_BASE + u32::from(p)
            }
            Token::Velocity(v) => {
                assert!(v < 128, "velocity {v} out of range");
                Self::VELOCITY_BASE + u32::from(v)
            }
        }
    }

    pub fn token(id: u32) -> Option<Token> {
        Some(match id {
            0 => Token::Pad,
            1 => Token::Sos,
            2 => Token::Eos,
            3 => Token::Unk,
            4 => Token::Sustain,
            5 => Token::Query(Stage::OnsetPitch),
            6 => Token::Query(Stage::Velocity),
            7 => Token::Query(Stage::Offset),
            id if id < Self::PITCH_BASE => Token::Time((id - Self::TIME_BASE) as u16),
            id if id < Self::VELOCITY_BASE => Token::Pitch((id - Self::PITCH_BASE) as u8),
            id if id < Self::SIZE as u32 => Token::Velocity((id - Self::VELOCITY_BASE) as u8),
            _ => return None,
        })
    }

    pub fn class(id: u32) -> Option<TokenClass> {
        Self::ranges()
            .into_iter()
            .find(|(_, r)| r.contains(&id))
            .map(|(c, _)| c)
    }

    pub fn query(stage: Stage) -> u32 {
        match stage {
            Stage::OnsetPitch => Self::QUERY_PITCH,
            Stage::Velocity => Self::QUERY_VELOCITY,
            Stage::Offset => Self::QUERY_OFFSET,
        }
    }

    pub fn time(index: u16) -> u32 {
        Self::id(Token::Time(index))
    }

    pub fn pitch(p: u8) -> u32 {
        Self::id(Token::Pitch(p))
    }

    pub fn velocity(v: u8) -> u32 {
        Self::id(Token::Velocity(v))
    }
}

/// Token ids with the layout they follow and a per-position training mask.
///
/// `loss_mask[j]` marks token `j` as a prediction target, i.e. the model is
/// scored on predicting `ids[j]` from `ids[..j]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub kind: SequenceKind,
    pub loss_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, kind: SequenceKind, loss_mask: Vec<bool>) -> Result<Self> {
        if ids.len() != loss_mask.len() {
            return Err(Error::Shape(format!(
                "{} ids but {} mask entries",
                ids.len(),
                loss_mask.len()
            )));
        }
        Ok(TokenSequence {
            ids,
            kind,
            loss_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// T×K frame/pitch grid; column `k` is MIDI pitch `21 + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PianoRoll {
    pub frames: Array2<f32>,
    pub frame_rate_hz: f64,
}

impl PianoRoll {
    pub const DEFAULT_FRAME_RATE_HZ: f64 = 100.0;

    pub fn zeros(num_frames: usize, frame_rate_hz: f64) -> Self {
        PianoRoll {
            frames: Array2::zeros((num_frames, NUM_KEYS)),
            frame_rate_hz,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn num_keys(&self) -> usize {
        self.frames.ncols()
    }

    pub fn is_binary(&self) -> bool {
        self.frames.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn is_probability(&self) -> bool {
        self.frames.iter().all(|&v| (0.0..=1.0).contains(&v))
    }
}

/// T'×D encoder output fed to the language-model decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSeq {
    pub vectors: Array2<f32>,
    pub frame_rate_hz: f64,
}

impl HiddenSeq {
    pub fn num_frames(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.vectors.iter().all(|v| v.is_finite())
    }
}
