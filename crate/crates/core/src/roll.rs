//! Frame-level piano-roll targets, the binary cross-entropy objective and
//! threshold-based note extraction (the "Roll" baseline).

use candle_core::Tensor;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{canonically_sorted, NoteEvent, PianoRoll, Segment, MAX_PIANO_PITCH, MIN_PIANO_PITCH, NUM_KEYS};

/// Probabilities are clipped to `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Velocity assigned to notes extracted from a roll.
pub const ROLL_VELOCITY: u8 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RollThresholds {
    pub frame_threshold: f64,
    pub min_note_frames: usize,
}

impl Default for RollThresholds {
    fn default() -> Self {
        RollThresholds {
            frame_threshold: 0.5,
            min_note_frames: 2,
        }
    }
}

impl RollThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_threshold > 0.0 && self.frame_threshold < 1.0) {
            return Err(Error::Config(format!(
                "frame_threshold must lie in (0, 1), got {}",
                self.frame_threshold
            )));
        }
        Ok(())
    }
}

pub fn key_index(pitch: u8) -> Result<usize> {
    if !(MIN_PIANO_PITCH..=MAX_PIANO_PITCH).contains(&pitch) {
        return Err(Error::PitchRange(pitch));
    }
    Ok(usize::from(pitch - MIN_PIANO_PITCH))
}

pub fn num_frames(duration_s: f64, frame_rate_hz: f64) -> usize {
    (duration_s * frame_rate_hz).round().max(0.0) as usize
}

/// Binary roll at 100 Hz: frame `t` of key `k` is on iff some note of that key
/// has `onset <= t / 100 < offset`.
pub fn notes_to_roll(seg: &Segment) -> Result<PianoRoll> {
    notes_to_roll_at(&seg.notes, seg.duration_s, PianoRoll::DEFAULT_FRAME_RATE_HZ)
}

pub fn notes_to_roll_at(notes: &[NoteEvent], duration_s: f64, frame_rate_hz: f64) -> Result<PianoRoll> {
    let t_frames = num_frames(duration_s, frame_rate_hz);
    let mut roll = PianoRoll::zeros(t_frames, frame_rate_hz);
    for note in notes {
        let k = key_index(note.pitch)?;
        let first = (note.onset_s * frame_rate_hz).floor() - 1.0;
        let mut t = first.max(0.0) as usize;
        while t < t_frames {
            let time = t as f64 / frame_rate_hz;
            if time >= note.offset_s {
                break;
            }
            if time >= note.onset_s {
                roll.frames[[t, k]] = 1.0;
            }
            t += 1;
        }
    }
    Ok(roll)
}

fn clip(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// Mean binary cross-entropy over all T·K cells.
pub fn bce_loss(target: &PianoRoll, pred: &PianoRoll) -> Result<f64> {
    check_same_shape(&target.frames, &pred.frames)?;
    let y: Vec<f64> = target.frames.iter().map(|&v| f64::from(v)).collect();
    let p: Vec<f64> = pred.frames.iter().map(|&v| f64::from(v)).collect();
    bce_loss_values(&y, &p)
}

pub fn bce_loss_values(target: &[f64], pred: &[f64]) -> Result<f64> {
    if target.len() != pred.len() {
        return Err(Error::Shape(format!("{} targets vs {} predictions", target.len(), pred.len())));
    }
    if target.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = target
        .iter()
        .zip(pred)
        .map(|(&y, &p)| {
            let p = clip(p);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / target.len() as f64)
}

/// Analytic derivative of [`bce_loss_values`] with respect to each prediction.
/// Cells clipped by the epsilon guard have zero derivative.
pub fn bce_grad_values(target: &[f64], pred: &[f64]) -> Result<Vec<f64>> {
    if target.len() != pred.len() {
        return Err(Error::Shape(format!("{} targets vs {} predictions", target.len(), pred.len())));
    }
    let n = target.len() as f64;
    Ok(target
        .iter()
        .zip(pred)
        .map(|(&y, &p)| {
            if p < BCE_EPS || p > 1.0 - BCE_EPS {
                0.0
            } else {
                (p - y) / (p * (1.0 - p)) / n
            }
        })
        .collect())
}

pub fn bce_grad(target: &PianoRoll, pred: &PianoRoll) -> Result<Array2<f64>> {
    check_same_shape(&target.frames, &pred.frames)?;
    let y: Vec<f64> = target.frames.iter().map(|&v| f64::from(v)).collect();
    let p: Vec<f64> = pred.frames.iter().map(|&v| f64::from(v)).collect();
    let g = bce_grad_values(&y, &p)?;
    Ok(Array2::from_shape_vec(target.frames.dim(), g).expect("shape preserved"))
}

/// Binary cross-entropy on logits, `mean(max(x,0) - x·y + ln(1 + e^{-|x|}))`, for training.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    if logits.dims() != target.dims() {
        return Err(Error::Shape(format!("logits {:?} vs target {:?}", logits.dims(), target.dims())));
    }
    let relu = logits.relu()?;
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let per_cell = ((relu - (logits * target)?)? + softplus)?;
    Ok(per_cell.mean_all()?)
}

fn check_same_shape(a: &Array2<f32>, b: &Array2<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("roll {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Extracts notes from a probability roll. Each maximal run of frames at or
/// above the threshold spanning at least `min_note_frames` frames becomes one
/// note with onset `start / rate` and offset `end / rate` (end exclusive).
pub fn roll_to_notes(pred: &PianoRoll, th: &RollThresholds) -> Vec<NoteEvent> {
    let rate = pred.frame_rate_hz;
    let threshold = th.frame_threshold as f32;
    let min_len = th.min_note_frames.max(1);
    let mut notes = Vec::new();
    for k in 0..pred.num_keys().min(NUM_KEYS) {
        let column = pred.frames.column(k);
        let mut run_start: Option<usize> = None;
        for t in 0..=column.len() {
            let on = t < column.len() && column[t] >= threshold;
            match (on, run_start) {
                (true, None) => run_start = Some(t),
                (false, Some(start)) => {
                    if t - start >= min_len {
                        notes.push(NoteEvent {
                            onset_s: start as f64 / rate,
                            offset_s: t as f64 / rate,
                            pitch: MIN_PIANO_PITCH + k as u8,
                            velocity: ROLL_VELOCITY,
                        });
                    }
                    run_start = None;
                }
                _ => {}
            }
        }
    }
    canonically_sorted(notes)
}
