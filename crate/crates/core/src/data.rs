//! Note-list IO, segmentation of pieces into fixed windows, and the seeded
//! synthetic corpus used for desk-scale experiments.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use midly::{Format, MetaMessage, MidiMessage, Smf, Timing, TrackEventKind};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_matrix, save_matrix};
use crate::codec::TokenCodec;
use crate::error::{Error, Result};
use crate::roll::{key_index, notes_to_roll_at};
use crate::types::{
    canonical_sort, canonically_sorted, NoteEvent, Segment, SequenceKind, TokenSequence, MAX_PIANO_PITCH, MIN_PIANO_PITCH,
    NUM_KEYS,
};

const DEFAULT_TEMPO_US: u32 = 500_000;

/// Reads a Standard MIDI File into canonically sorted notes and the piece duration in seconds.
pub fn load_midi(path: &Path) -> Result<(Vec<NoteEvent>, f64)> {
    let bytes = std::fs::read(path)?;
    parse_midi(&bytes)
}

pub fn parse_midi(bytes: &[u8]) -> Result<(Vec<NoteEvent>, f64)> {
    let smf = Smf::parse(bytes).map_err(|e| Error::MidiParse(e.to_string()))?;
    let ppq = match smf.header.timing {
        Timing::Metrical(t) => f64::from(t.as_int()),
        Timing::Timecode(..) => return Err(Error::MidiUnsupported("SMPTE time division".into())),
    };
    if smf.header.format == Format::Sequential {
        return Err(Error::MidiUnsupported("format 2 (sequential tracks)".into()));
    }
    if ppq <= 0.0 {
        return Err(Error::MidiParse("zero ticks per quarter note".into()));
    }

    // Tempo changes from every track form one global map.
    let mut tempo_changes: BTreeMap<u64, u32> = BTreeMap::new();
    for track in &smf.tracks {
        let mut tick = 0u64;
        for ev in track {
            tick += u64::from(ev.delta.as_int());
            if let TrackEventKind::Meta(MetaMessage::Tempo(t)) = ev.kind {
                tempo_changes.insert(tick, t.as_int());
            }
        }
    }
    let map = TempoMap::new(&tempo_changes, ppq);

    let mut notes = Vec::new();
    let mut end_tick = 0u64;
    for track in &smf.tracks {
        let mut tick = 0u64;
        let mut open: HashMap<(u8, u8), VecDeque<(u64, u8)>> = HashMap::new();
        let close = |notes: &mut Vec<NoteEvent>, key: u8, start: u64, vel: u8, stop: u64| {
            let (on, off) = (map.seconds(start), map.seconds(stop));
            // Zero-length notes carry no duration and are dropped.
            if off > on {
                notes.push(NoteEvent {
                    onset_s: on,
                    offset_s: off,
                    pitch: key,
                    velocity: vel,
                });
            }
        };
        for ev in track {
            tick += u64::from(ev.delta.as_int());
            if let TrackEventKind::Midi { channel, message } = ev.kind {
                let ch = channel.as_int();
                match message {
                    MidiMessage::NoteOn { key, vel } if vel.as_int() > 0 => {
                        open.entry((ch, key.as_int())).or_default().push_back((tick, vel.as_int()));
                    }
                    MidiMessage::NoteOn { key, .. } | MidiMessage::NoteOff { key, .. } => {
                        if let Some((start, vel)) = open.get_mut(&(ch, key.as_int())).and_then(|q| q.pop_front()) {
                            close(&mut notes, key.as_int(), start, vel, tick);
                        }
                    }
                    _ => {}
                }
            }
        }
        for ((_, key), queue) in open {
            for (start, vel) in queue {
                close(&mut notes, key, start, vel, tick);
            }
        }
        end_tick = end_tick.max(tick);
    }
    canonical_sort(&mut notes);
    let last_offset = notes.iter().map(|n| n.offset_s).fold(0.0, f64::max);
    Ok((notes, map.seconds(end_tick).max(last_offset)))
}

struct TempoMap {
    // (tick, seconds at tick, seconds per tick from here on)
    points: Vec<(u64, f64, f64)>,
}

impl TempoMap {
    fn new(changes: &BTreeMap<u64, u32>, ppq: f64) -> Self {
        let spt = |us: u32| f64::from(us) * 1e-6 / ppq;
        let mut points = vec![(0u64, 0.0, spt(DEFAULT_TEMPO_US))];
        for (&tick, &us) in changes {
            let &(t0, s0, rate) = points.last().expect("non-empty");
            let at = s0 + (tick - t0) as f64 * rate;
            if tick == t0 {
                points.pop();
            }
            points.push((tick, at, spt(us)));
        }
        TempoMap { points }
    }

    fn seconds(&self, tick: u64) -> f64 {
        let i = self.points.partition_point(|p| p.0 <= tick).saturating_sub(1);
        let (t0, s0, rate) = self.points[i];
        s0 + (tick - t0) as f64 * rate
    }
}

/// Writes notes as a type-0 file at 480 ticks per quarter and 120 BPM.
pub fn save_midi(path: &Path, notes: &[NoteEvent]) -> Result<()> {
    use midly::num::{u15, u24, u28, u4, u7};
    use midly::{Header, TrackEvent};
    let ppq = 480u16;
    let ticks_per_s = f64::from(ppq) * 1e6 / f64::from(DEFAULT_TEMPO_US);
    let mut events: Vec<(u64, u8, u8, u8)> = Vec::new();
    for n in notes {
        let to_tick = |s: f64| (s.max(0.0) * ticks_per_s).round() as u64;
        // Offsets sort before onsets at the same tick so repeated notes stay paired.
        events.push((to_tick(n.onset_s), 1, n.pitch, n.velocity.max(1)));
        events.push((to_tick(n.offset_s), 0, n.pitch, 0));
    }
    events.sort();
    let mut track = vec![TrackEvent {
        delta: u28::new(0),
        kind: TrackEventKind::Meta(MetaMessage::Tempo(u24::new(DEFAULT_TEMPO_US))),
    }];
    let mut last = 0u64;
    for (tick, is_on, key, vel) in events {
        let message = if is_on == 1 {
            MidiMessage::NoteOn { key: u7::new(key), vel: u7::new(vel.min(127)) }
        } else {
            MidiMessage::NoteOff { key: u7::new(key), vel: u7::new(0) }
        };
        track.push(TrackEvent {
            delta: u28::new((tick - last) as u32),
            kind: TrackEventKind::Midi { channel: u4::new(0), message },
        });
        last = tick;
    }
    track.push(TrackEvent {
        delta: u28::new(0),
        kind: TrackEventKind::Meta(MetaMessage::EndOfTrack),
    });
    let smf = Smf {
        header: Header::new(Format::SingleTrack, Timing::Metrical(u15::new(ppq))),
        tracks: vec![track],
    };
    smf.save(path)?;
    Ok(())
}

/// One JSON object per line with keys `onset`, `offset`, `pitch`, `velocity`, in canonical order.
pub fn write_jsonl<W: Write>(mut out: W, notes: &[NoteEvent]) -> Result<()> {
    for n in canonically_sorted(notes.to_vec()) {
        serde_json::to_writer(&mut out, &n)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<NoteEvent>> {
    let mut notes = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let note: NoteEvent =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        notes.push(note);
    }
    canonical_sort(&mut notes);
    Ok(notes)
}

pub fn save_jsonl(path: &Path, notes: &[NoteEvent]) -> Result<()> {
    write_jsonl(std::io::BufWriter::new(std::fs::File::create(path)?), notes)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<NoteEvent>> {
    read_jsonl(BufReader::new(std::fs::File::open(path)?))
}

/// Cuts a piece into windows of `segment_s` every `hop_s` seconds.
///
/// Produces `max(1, ceil(duration / hop))` windows. A note appears in every
/// window it intersects, with times relative to the window start. Features
/// are left empty.
pub fn segment_piece(notes: &[NoteEvent], duration_s: f64, segment_s: f64, hop_s: f64, piece_id: &str) -> Result<Vec<Segment>> {
    if !(hop_s > 0.0 && segment_s > 0.0) {
        return Err(Error::Config(format!("segment {segment_s} s and hop {hop_s} s must be positive")));
    }
    let count = ((duration_s / hop_s) - 1e-9).ceil().max(1.0) as usize;
    Ok((0..count)
        .map(|k| {
            let start = k as f64 * hop_s;
            let end = start + segment_s;
            let inside: Vec<NoteEvent> = notes
                .iter()
                .filter(|n| n.onset_s < end && n.offset_s > start)
                .map(|n| n.shifted(-start))
                .collect();
            Segment::new(inside, segment_s, Array2::zeros((0, 0)), format!("{piece_id}#{k}"))
        })
        .collect())
}

/// Token sequences for a whole piece, one per `segment_duration_s` window.
pub fn tokenize_piece(codec: &TokenCodec, notes: &[NoteEvent], kind: SequenceKind) -> Result<Vec<TokenSequence>> {
    let window = codec.cfg.segment_duration_s;
    let duration = notes.iter().map(|n| n.offset_s).fold(0.0, f64::max);
    segment_piece(notes, duration, window, window, "piece")?
        .iter()
        .map(|seg| codec.encode(seg, kind))
        .collect()
}

/// Inverse of [`tokenize_piece`]: decodes consecutive windows and joins notes
/// whose sustained offset continues as a sustained onset of the same pitch.
pub fn detokenize_piece(codec: &TokenCodec, seqs: &[TokenSequence]) -> Result<Vec<NoteEvent>> {
    let window = codec.cfg.segment_duration_s;
    let sps = (1.0 / codec.cfg.time_step_s).round();
    let window_steps = (window * sps).round();
    let absolute = |k: usize, t: f64| ((t * sps).round() + k as f64 * window_steps) / sps;
    let mut done = Vec::new();
    // Notes still sounding at the end of the previous window: (onset, pitch, velocity).
    let mut carried: Vec<(f64, u8, u8)> = Vec::new();
    for (k, seq) in seqs.iter().enumerate() {
        let start = k as f64 * window_steps / sps;
        let mut next_carry = Vec::new();
        for n in codec.decode(seq, window)? {
            let velocity = n.velocity.unwrap_or(64);
            let (onset, velocity) = match carried.iter().position(|c| n.onset_sustained && c.1 == n.pitch) {
                Some(i) => {
                    let c = carried.remove(i);
                    (c.0, c.2)
                }
                None => (absolute(k, n.onset_s), velocity),
            };
            match n.offset_s {
                _ if n.offset_sustained => next_carry.push((onset, n.pitch, velocity)),
                Some(off) => done.push(NoteEvent::new(onset, n.pitch, velocity, absolute(k, off))?),
                None => done.push(n.to_note(velocity, 0.5, codec.cfg.time_step_s).shifted(onset - n.onset_s)),
            }
        }
        for (onset, pitch, velocity) in carried.drain(..) {
            done.push(NoteEvent::new(onset, pitch, velocity, start.max(onset + codec.cfg.time_step_s))?);
        }
        carried = next_carry;
    }
    let end = seqs.len() as f64 * window_steps / sps;
    for (onset, pitch, velocity) in carried {
        done.push(NoteEvent::new(onset, pitch, velocity, end)?);
    }
    Ok(canonically_sorted(done))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_segments: usize,
    pub min_notes: usize,
    pub max_notes: usize,
    pub polyphony_cap: usize,
    pub segment_s: f64,
    pub frame_rate_hz: f64,
    pub noise_std: f64,
    pub min_duration_steps: u32,
    pub max_duration_steps: u32,
    pub valid_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            n_segments: 10,
            min_notes: 4,
            max_notes: 12,
            polyphony_cap: 8,
            segment_s: Segment::DEFAULT_DURATION_S,
            frame_rate_hz: 100.0,
            noise_std: 0.1,
            min_duration_steps: 5,
            max_duration_steps: 200,
            valid_fraction: 0.2,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_notes > self.max_notes || self.polyphony_cap == 0 {
            return Err(Error::Config("need min_notes ≤ max_notes and a positive polyphony cap".into()));
        }
        if self.min_duration_steps == 0 || self.min_duration_steps > self.max_duration_steps {
            return Err(Error::Config("invalid duration range".into()));
        }
        if !(self.segment_s > 0.0 && self.frame_rate_hz > 0.0 && self.noise_std >= 0.0) {
            return Err(Error::Config("segment length, frame rate and noise must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return Err(Error::Config("valid_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Features standing in for audio: the note roll scaled by `0.5 + 0.5·v/127`,
/// blurred by one frame on each side and corrupted with Gaussian noise.
pub fn synth_features(notes: &[NoteEvent], duration_s: f64, frame_rate_hz: f64, noise_std: f64, rng: &mut ChaCha8Rng) -> Result<Array2<f32>> {
    let frames = crate::roll::num_frames(duration_s, frame_rate_hz);
    let mut amp = Array2::<f64>::zeros((frames, NUM_KEYS));
    for n in notes {
        let k = key_index(n.pitch)?;
        let single = notes_to_roll_at(std::slice::from_ref(n), duration_s, frame_rate_hz)?;
        let level = 0.5 + 0.5 * f64::from(n.velocity) / 127.0;
        for t in 0..frames {
            if single.frames[[t, k]] > 0.5 {
                amp[[t, k]] = f64::max(amp[[t, k]], level);
            }
        }
    }
    let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Array2::<f32>::zeros((frames, NUM_KEYS));
    for t in 0..frames {
        for k in 0..NUM_KEYS {
            let prev = if t > 0 { amp[[t - 1, k]] } else { 0.0 };
            let next = if t + 1 < frames { amp[[t + 1, k]] } else { 0.0 };
            let blurred = 0.25 * prev + 0.5 * amp[[t, k]] + 0.25 * next;
            let eps = if noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            out[[t, k]] = (blurred + eps) as f32;
        }
    }
    Ok(out)
}

/// Seeded synthetic segments: grid-aligned notes within the segment, no
/// same-pitch overlap, and at most `polyphony_cap` notes sounding per grid step.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Vec<Segment>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps = (cfg.segment_s * 100.0).round() as u32;
    let mut segments = Vec::with_capacity(cfg.n_segments);
    for s in 0..cfg.n_segments {
        let target = rng.random_range(cfg.min_notes..=cfg.max_notes);
        // (onset step, offset step, pitch, velocity)
        let mut placed: Vec<(u32, u32, u8, u8)> = Vec::new();
        let mut attempts = 0;
        while placed.len() < target && attempts < 100 * target.max(1) {
            attempts += 1;
            let on = rng.random_range(0..steps - cfg.min_duration_steps);
            let max_len = cfg.max_duration_steps.min(steps - on);
            let off = on + rng.random_range(cfg.min_duration_steps..=max_len);
            let pitch = rng.random_range(MIN_PIANO_PITCH..=MAX_PIANO_PITCH);
            let vel = rng.random_range(1u8..=127);
            let clash = placed.iter().any(|&(a, b, p, _)| p == pitch && a < off && on < b);
            let busy = (on..off).any(|t| placed.iter().filter(|&&(a, b, _, _)| a <= t && t < b).count() >= cfg.polyphony_cap);
            if !clash && !busy {
                placed.push((on, off, pitch, vel));
            }
        }
        let notes: Vec<NoteEvent> = placed
            .iter()
            .map(|&(on, off, p, v)| NoteEvent::new(f64::from(on) / 100.0, p, v, f64::from(off) / 100.0))
            .collect::<Result<_>>()?;
        let features = synth_features(&notes, cfg.segment_s, cfg.frame_rate_hz, cfg.noise_std, &mut rng)?;
        segments.push(Segment::new(notes, cfg.segment_s, features, format!("seg_{s:04}")));
    }
    Ok(segments)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    path: String,
    split: String,
}

/// Segments with their split, as listed by a manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub segments: Vec<(Segment, Split)>,
}

impl Dataset {
    /// Assigns the last `round(valid_fraction · n)` segments of a seeded shuffle to validation.
    pub fn with_split(segments: Vec<Segment>, valid_fraction: f64, seed: u64) -> Self {
        use rand::seq::SliceRandom;
        let n = segments.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
        let n_valid = (valid_fraction * n as f64).round() as usize;
        let mut split = vec![Split::Train; n];
        for &i in &order[n - n_valid..] {
            split[i] = Split::Valid;
        }
        Dataset {
            segments: segments.into_iter().zip(split).collect(),
        }
    }

    pub fn split(&self, which: Split) -> Vec<Segment> {
        self.segments.iter().filter(|(_, s)| *s == which).map(|(seg, _)| seg.clone()).collect()
    }

    pub fn all(&self) -> Vec<Segment> {
        self.segments.iter().map(|(s, _)| s.clone()).collect()
    }

    /// Writes `manifest.csv` (`path,split`), one `<id>.jsonl` per segment and,
    /// when present, `<id>.features.safetensors`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let manifest = dir.join("manifest.csv");
        let mut w = csv::Writer::from_path(&manifest)?;
        for (seg, split) in &self.segments {
            let id = sanitize(&seg.source_id);
            save_jsonl(&dir.join(format!("{id}.jsonl")), &seg.notes)?;
            if seg.features.len() > 0 {
                save_matrix(&dir.join(format!("{id}.features.safetensors")), "features", &seg.features)?;
            }
            w.serialize(ManifestRow {
                path: format!("{id}.jsonl"),
                split: split.name().to_string(),
            })?;
        }
        w.flush()?;
        Ok(manifest)
    }

    /// Loads a manifest; paths are relative to its directory. Segments are `segment_s` long.
    pub fn load(manifest: &Path, segment_s: f64) -> Result<Self> {
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let mut r = csv::Reader::from_path(manifest)?;
        let mut segments = Vec::new();
        for row in r.deserialize() {
            let row: ManifestRow = row?;
            let path = dir.join(&row.path);
            let notes = load_jsonl(&path)?;
            let stem = row.path.strip_suffix(".jsonl").unwrap_or(&row.path).to_string();
            let feat_path = dir.join(format!("{stem}.features.safetensors"));
            let features = if feat_path.exists() {
                load_matrix(&feat_path, "features")?
            } else {
                Array2::zeros((0, 0))
            };
            segments.push((Segment::new(notes, segment_s, features, stem), row.split.parse()?));
        }
        Ok(Dataset { segments })
    }
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use midly::num::{u15, u24, u28, u4, u7};
    use midly::{Header, TrackEvent};
    use proptest::prelude::*;

    fn note(on: f64, p: u8, v: u8, off: f64) -> NoteEvent {
        NoteEvent::new(on, p, v, off).unwrap()
    }

    fn midi_bytes(format: Format, ppq: u16, tracks: Vec<Vec<(u32, TrackEventKind<'static>)>>) -> Vec<u8> {
        let tracks = tracks
            .into_iter()
            .map(|t| t.into_iter().map(|(d, kind)| TrackEvent { delta: u28::new(d), kind }).collect())
            .collect();
        let smf = Smf {
            header: Header::new(format, Timing::Metrical(u15::new(ppq))),
            tracks,
        };
        let mut out = Vec::new();
        smf.write_std(&mut out).unwrap();
        out
    }

    fn on(key: u8, vel: u8) -> TrackEventKind<'static> {
        TrackEventKind::Midi { channel: u4::new(0), message: MidiMessage::NoteOn { key: u7::new(key), vel: u7::new(vel) } }
    }

    fn off(key: u8) -> TrackEventKind<'static> {
        TrackEventKind::Midi { channel: u4::new(0), message: MidiMessage::NoteOff { key: u7::new(key), vel: u7::new(0) } }
    }

    fn tempo(us: u32) -> TrackEventKind<'static> {
        TrackEventKind::Meta(MetaMessage::Tempo(u24::new(us)))
    }

    #[test]
    fn single_note_fixture() {
        // 480 ppq at 120 BPM: 960 ticks per second.
        let bytes = midi_bytes(Format::SingleTrack, 480, vec![vec![(96, on(60, 64)), (384, off(60))]]);
        let (notes, dur) = parse_midi(&bytes).unwrap();
        assert_eq!(notes.len(), 1);
        let n = notes[0];
        assert!((n.onset_s - 0.1).abs() < 1e-12 && (n.offset_s - 0.5).abs() < 1e-12);
        assert_eq!((n.pitch, n.velocity), (60, 64));
        assert!((dur - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_velocity_note_on_is_note_off() {
        let bytes = midi_bytes(Format::SingleTrack, 480, vec![vec![(0, on(62, 90)), (480, on(62, 0))]]);
        let (notes, _) = parse_midi(&bytes).unwrap();
        assert_eq!(notes, vec![note(0.0, 62, 90, 0.5)]);
    }

    #[test]
    fn unterminated_note_closes_at_track_end() {
        let bytes = midi_bytes(
            Format::SingleTrack,
            480,
            vec![vec![(0, on(64, 70)), (960, TrackEventKind::Meta(MetaMessage::EndOfTrack))]],
        );
        let (notes, dur) = parse_midi(&bytes).unwrap();
        assert_eq!(notes, vec![note(0.0, 64, 70, 1.0)]);
        assert!((dur - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tempo_changes_mid_note_follow_the_map() {
        // Conductor track: 120 BPM, then 60 BPM at tick 480, then 240 BPM at tick 960.
        let conductor = vec![(0, tempo(500_000)), (480, tempo(1_000_000)), (480, tempo(250_000))];
        let music = vec![(240, on(60, 80)), (1200, off(60))];
        let bytes = midi_bytes(Format::Parallel, 480, vec![conductor, music]);
        let (notes, _) = parse_midi(&bytes).unwrap();
        // Manual integration: ticks 240..480 at 0.5 s/qn, 480..960 at 1 s/qn, 960..1440 at 0.25 s/qn.
        let sec = |ticks: f64, us: f64| ticks / 480.0 * us * 1e-6;
        let onset = sec(240.0, 500_000.0);
        let offset = sec(480.0, 500_000.0) + sec(480.0, 1_000_000.0) + sec(480.0, 250_000.0);
        assert!((notes[0].onset_s - onset).abs() < 1e-12);
        assert!((notes[0].offset_s - offset).abs() < 1e-12);
    }

    #[test]
    fn smpte_and_garbage_are_rejected() {
        let smf = Smf {
            header: Header::new(Format::SingleTrack, Timing::Timecode(midly::Fps::Fps25, 40)),
            tracks: vec![vec![]],
        };
        let mut out = Vec::new();
        smf.write_std(&mut out).unwrap();
        assert_eq!(parse_midi(&out).unwrap_err().code(), "E_MIDI_UNSUPPORTED");
        assert_eq!(parse_midi(b"MThd\x00\x00").unwrap_err().code(), "E_MIDI_PARSE");
    }

    #[test]
    fn midi_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let notes = vec![note(0.0, 60, 64, 0.5), note(0.25, 64, 100, 1.0), note(1.0, 60, 30, 1.5)];
        save_midi(&dir.path().join("a.mid"), &notes).unwrap();
        let (loaded, _) = load_midi(&dir.path().join("a.mid")).unwrap();
        save_jsonl(&dir.path().join("a.jsonl"), &loaded).unwrap();
        let back = load_jsonl(&dir.path().join("a.jsonl")).unwrap();
        assert_eq!(back, loaded);
        for (a, b) in notes.iter().zip(&back) {
            assert!((a.onset_s - b.onset_s).abs() < 1e-9 && (a.offset_s - b.offset_s).abs() < 1e-9);
            assert_eq!((a.pitch, a.velocity), (b.pitch, b.velocity));
        }
    }

    #[test]
    fn jsonl_rejects_invalid_notes() {
        let bad = "{\"onset\":1.0,\"offset\":0.5,\"pitch\":60,\"velocity\":64}\n";
        assert_eq!(read_jsonl(bad.as_bytes()).unwrap_err().code(), "E_DATA");
    }

    #[test]
    fn segmentation_examples() {
        let segs = segment_piece(&[], 25.0, 10.0, 10.0, "p").unwrap();
        assert_eq!(segs.len(), 3);
        assert!(segs.iter().all(|s| s.notes.is_empty() && s.duration_s == 10.0));
        let n = note(9.8, 60, 64, 10.4);
        let segs = segment_piece(&[n], 20.0, 10.0, 10.0, "p").unwrap();
        assert_eq!(segs.len(), 2);
        assert!((segs[0].notes[0].offset_s - 10.4).abs() < 1e-12);
        assert!((segs[1].notes[0].onset_s + 0.2).abs() < 1e-9);
        assert_eq!(segment_piece(&[], 0.0, 10.0, 10.0, "p").unwrap().len(), 1);
        assert!(segment_piece(&[], 5.0, 10.0, 0.0, "p").is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_valid() {
        let cfg = SyntheticConfig { n_segments: 3, ..SyntheticConfig::default() };
        let a = gen_synthetic(&cfg).unwrap();
        let b = gen_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        for seg in &a {
            assert_eq!(seg.features.dim(), (1000, NUM_KEYS));
            for n in &seg.notes {
                n.validate().unwrap();
                assert!((21..=108).contains(&n.pitch) && (1..=127).contains(&n.velocity));
                let d = n.duration_s();
                assert!(d >= 0.05 - 1e-9 && d <= 2.0 + 1e-9);
                assert!(((n.onset_s * 100.0).round() - n.onset_s * 100.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn polyphony_cap_holds() {
        let cfg = SyntheticConfig { n_segments: 4, min_notes: 30, max_notes: 40, polyphony_cap: 8, noise_std: 0.0, ..SyntheticConfig::default() };
        for seg in gen_synthetic(&cfg).unwrap() {
            for step in 0..1000 {
                let t = f64::from(step) / 100.0;
                let sounding = seg.notes.iter().filter(|n| n.onset_s <= t && t < n.offset_s).count();
                assert!(sounding <= 8, "{sounding} notes at {t}");
            }
        }
    }

    #[test]
    fn dataset_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let segs = gen_synthetic(&SyntheticConfig { n_segments: 5, ..SyntheticConfig::default() }).unwrap();
        let ds = Dataset::with_split(segs, 0.2, 1);
        assert_eq!(ds.split(Split::Valid).len(), 1);
        let manifest = ds.save(dir.path()).unwrap();
        let back = Dataset::load(&manifest, 10.0).unwrap();
        assert_eq!(back.segments.len(), 5);
        for ((a, sa), (b, sb)) in ds.segments.iter().zip(&back.segments) {
            assert_eq!(sa, sb);
            assert_eq!(a.notes, b.notes);
            assert_eq!(a.features, b.features);
        }
    }

    proptest! {
        #[test]
        fn piece_tokenization_round_trips(raw in proptest::collection::vec((0u32..2500, 1u32..1500, 21u8..109, 1u8..128), 0..25)) {
            let mut notes: Vec<NoteEvent> = Vec::new();
            for &(o, d, p, v) in &raw {
                // Same-pitch notes must not overlap for joins to be unambiguous.
                if notes.iter().any(|n| n.pitch == p && (n.onset_s * 100.0).round() as u32 <= o + d && o <= (n.offset_s * 100.0).round() as u32) {
                    continue;
                }
                notes.push(note(f64::from(o) / 100.0, p, v, f64::from(o + d) / 100.0));
            }
            let notes = canonically_sorted(notes);
            let codec = TokenCodec::default();
            for kind in [SequenceKind::Flattened, SequenceKind::Offset] {
                let seqs = tokenize_piece(&codec, &notes, kind).unwrap();
                prop_assert_eq!(&detokenize_piece(&codec, &seqs).unwrap(), &notes);
            }
        }

        #[test]
        fn segmentation_preserves_notes(raw in proptest::collection::vec((0u32..3000, 1u32..400, 21u8..109), 0..30)) {
            let notes: Vec<NoteEvent> = raw.iter()
                .map(|&(o, d, p)| note(f64::from(o) / 100.0, p, 64, f64::from(o + d) / 100.0))
                .collect();
            let segs = segment_piece(&notes, 34.0, 10.0, 10.0, "x").unwrap();
            let mut expected = 0;
            for n in &notes {
                expected += (0..segs.len()).filter(|&k| {
                    let s = k as f64 * 10.0;
                    n.onset_s < s + 10.0 && n.offset_s > s
                }).count();
            }
            prop_assert_eq!(segs.iter().map(|s| s.notes.len()).sum::<usize>(), expected);
            for (k, seg) in segs.iter().enumerate() {
                for m in &seg.notes {
                    let abs = m.shifted(k as f64 * 10.0);
                    prop_assert!(notes.iter().any(|n| (n.onset_s - abs.onset_s).abs() < 1e-9 && n.pitch == abs.pitch));
                }
            }
        }
    }
}
