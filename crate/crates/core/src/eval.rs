//! Note-level precision, recall and F1 via maximum bipartite matching.
//!
//! Conventions follow the reference transcription tooling: time differences
//! are rounded to four decimals before the (inclusive) window test, offsets use
//! `max(offset_tol_s, offset_ratio · reference duration)`, and velocities are
//! compared on the [0, 1] scale, optionally after an affine rescaling of the
//! estimates fitted over the onset-matched pairs.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::NoteEvent;

const TIME_DECIMALS: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    On,
    OnOff,
    OnOffVel,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::On, Level::OnOff, Level::OnOffVel];

    pub fn name(self) -> &'static str {
        match self {
            Level::On => "on",
            Level::OnOff => "on_off",
            Level::OnOffVel => "on_off_vel",
        }
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityMode {
    Rescaled,
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    pub onset_tol_s: f64,
    /// Kept for completeness; on integer MIDI pitches any window under 100 cents is exact equality.
    pub pitch_tol_cents: f64,
    pub offset_tol_s: f64,
    pub offset_ratio: f64,
    pub velocity_tol: f64,
    pub velocity_mode: VelocityMode,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            onset_tol_s: 0.05,
            pitch_tol_cents: 50.0,
            offset_tol_s: 0.05,
            offset_ratio: 0.2,
            velocity_tol: 0.1,
            velocity_mode: VelocityMode::Rescaled,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.onset_tol_s,
            self.pitch_tol_cents,
            self.offset_tol_s,
            self.offset_ratio,
            self.velocity_tol,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("all matching tolerances must be positive".into()));
        }
        Ok(())
    }
}

fn round_time(x: f64) -> f64 {
    let s = 10f64.powi(TIME_DECIMALS);
    (x * s).round() / s
}

fn norm_velocity(v: u8) -> f64 {
    f64::from(v) / 127.0
}

/// Precision, recall and F1 from match and list sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(matched: usize, n_ref: usize, n_est: usize) -> Prf {
        if n_ref == 0 && n_est == 0 {
            return Prf {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let precision = if n_est == 0 { 0.0 } else { matched as f64 / n_est as f64 };
        let recall = if n_ref == 0 { 0.0 } else { matched as f64 / n_ref as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Matched `(ref index, est index)` pairs, sorted by ref index.
    pub pairs: Vec<(usize, usize)>,
    pub n_ref: usize,
    pub n_est: usize,
    pub scores: Prf,
}

/// Least-squares `(scale, offset)` with `ref ≈ scale · est + offset`.
///
/// Input pairs are `(est, ref)` velocities on the [0, 1] scale. With a single
/// distinct estimate value the slope is undetermined; the fit falls back to
/// scale 1 and the mean difference. An empty input yields the identity.
pub fn rescale_velocities(pairs: &[(f64, f64)]) -> (f64, f64) {
    if pairs.is_empty() {
        return (1.0, 0.0);
    }
    let n = pairs.len() as f64;
    let mean_e = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_r = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mean_e).powi(2)).sum();
    if sxx <= f64::EPSILON * n {
        return (1.0, mean_r - mean_e);
    }
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mean_e) * (p.1 - mean_r)).sum();
    let scale = sxy / sxx;
    (scale, mean_r - scale * mean_e)
}

fn onset_pitch_ok(r: &NoteEvent, e: &NoteEvent, cfg: &MatchConfig) -> bool {
    r.pitch == e.pitch && round_time((r.onset_s - e.onset_s).abs()) <= cfg.onset_tol_s
}

fn offset_ok(r: &NoteEvent, e: &NoteEvent, cfg: &MatchConfig) -> bool {
    let window = cfg.offset_tol_s.max(cfg.offset_ratio * r.duration_s());
    round_time((r.offset_s - e.offset_s).abs()) <= round_time(window)
}

/// For each reference note, the estimated notes it may be matched with at `level`.
pub fn candidate_pairs(reference: &[NoteEvent], est: &[NoteEvent], cfg: &MatchConfig, level: Level) -> Vec<Vec<usize>> {
    let onset_adj = onset_candidates(reference, est, cfg);
    if level == Level::On {
        return onset_adj;
    }
    let mut adj: Vec<Vec<usize>> = onset_adj
        .iter()
        .enumerate()
        .map(|(i, row)| row.iter().copied().filter(|&j| offset_ok(&reference[i], &est[j], cfg)).collect())
        .collect();
    if level == Level::OnOffVel {
        let (scale, offset) = match cfg.velocity_mode {
            VelocityMode::Absolute => (1.0, 0.0),
            VelocityMode::Rescaled => {
                let on = maximum_matching(&onset_adj, est.len());
                let fit: Vec<(f64, f64)> = on
                    .iter()
                    .map(|&(i, j)| (norm_velocity(est[j].velocity), norm_velocity(reference[i].velocity)))
                    .collect();
                rescale_velocities(&fit)
            }
        };
        for (i, row) in adj.iter_mut().enumerate() {
            let vr = norm_velocity(reference[i].velocity);
            row.retain(|&j| (scale * norm_velocity(est[j].velocity) + offset - vr).abs() <= cfg.velocity_tol);
        }
    }
    adj
}

fn onset_candidates(reference: &[NoteEvent], est: &[NoteEvent], cfg: &MatchConfig) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..est.len()).collect();
    order.sort_by(|&a, &b| est[a].onset_s.total_cmp(&est[b].onset_s));
    // Slack so the rounded comparison never misses a candidate at the window edge.
    let reach = cfg.onset_tol_s + 1e-3;
    reference
        .iter()
        .map(|r| {
            let lo = order.partition_point(|&j| est[j].onset_s < r.onset_s - reach);
            let mut row: Vec<usize> = order[lo..]
                .iter()
                .take_while(|&&j| est[j].onset_s <= r.onset_s + reach)
                .copied()
                .filter(|&j| onset_pitch_ok(r, &est[j], cfg))
                .collect();
            row.sort_unstable();
            row
        })
        .collect()
}

/// Maximum-cardinality matching by repeated augmenting paths.
///
/// `adj[i]` lists the right vertices (0..n_right) adjacent to left vertex `i`.
pub fn maximum_matching(adj: &[Vec<usize>], n_right: usize) -> Vec<(usize, usize)> {
    let mut match_right: Vec<Option<usize>> = vec![None; n_right];
    for left in 0..adj.len() {
        let mut seen = vec![false; n_right];
        augment(left, adj, &mut match_right, &mut seen);
    }
    let mut pairs: Vec<(usize, usize)> = match_right
        .iter()
        .enumerate()
        .filter_map(|(j, m)| m.map(|i| (i, j)))
        .collect();
    pairs.sort_unstable();
    pairs
}

// Iterative depth-first search for an augmenting path from `root`.
fn augment(root: usize, adj: &[Vec<usize>], match_right: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    // Stack of (left vertex, next adjacency index, right vertex taken to reach it).
    let mut stack: Vec<(usize, usize, Option<usize>)> = vec![(root, 0, None)];
    while let Some(&mut (left, ref mut next, _)) = stack.last_mut() {
        if *next >= adj[left].len() {
            stack.pop();
            continue;
        }
        let right = adj[left][*next];
        *next += 1;
        if seen[right] {
            continue;
        }
        seen[right] = true;
        match match_right[right] {
            None => {
                // Flip the path: each left vertex on the stack takes the right vertex after it.
                let mut r = right;
                while let Some((l, _, via)) = stack.pop() {
                    match_right[r] = Some(l);
                    match via {
                        Some(v) => r = v,
                        None => break,
                    }
                }
                return true;
            }
            Some(owner) => stack.push((owner, 0, Some(right))),
        }
    }
    false
}

pub fn match_notes(reference: &[NoteEvent], est: &[NoteEvent], cfg: &MatchConfig, level: Level) -> MatchResult {
    let adj = candidate_pairs(reference, est, cfg, level);
    let pairs = maximum_matching(&adj, est.len());
    let scores = Prf::from_counts(pairs.len(), reference.len(), est.len());
    MatchResult {
        pairs,
        n_ref: reference.len(),
        n_est: est.len(),
        scores,
    }
}

/// Scores of one piece at every level.
#[derive(Debug, Clone, PartialEq)]
pub struct PieceReport {
    pub piece_id: String,
    pub results: Vec<(Level, MatchResult)>,
}

impl PieceReport {
    pub fn scores(&self, level: Level) -> Prf {
        self.results.iter().find(|(l, _)| *l == level).map(|(_, r)| r.scores).expect("all levels present")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusReport {
    pub pieces: Vec<PieceReport>,
    /// Note-pooled scores per level.
    pub micro: Vec<(Level, Prf)>,
    /// Piece-averaged scores per level.
    pub macro_avg: Vec<(Level, Prf)>,
}

impl CorpusReport {
    pub fn micro(&self, level: Level) -> Prf {
        self.micro.iter().find(|(l, _)| *l == level).map(|p| p.1).expect("all levels present")
    }

    pub fn macro_avg(&self, level: Level) -> Prf {
        self.macro_avg.iter().find(|(l, _)| *l == level).map(|p| p.1).expect("all levels present")
    }

    /// CSV with columns `piece_id,level,precision,recall,f1`; corpus rows use
    /// the ids `__micro__` and `__macro__`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["piece_id", "level", "precision", "recall", "f1"])?;
        let mut row = |id: &str, level: Level, s: Prf| {
            w.write_record([
                id.to_string(),
                level.name().to_string(),
                format!("{:.6}", s.precision),
                format!("{:.6}", s.recall),
                format!("{:.6}", s.f1),
            ])
        };
        for p in &self.pieces {
            for (level, r) in &p.results {
                row(&p.piece_id, *level, r.scores)?;
            }
        }
        for (level, s) in &self.micro {
            row("__micro__", *level, *s)?;
        }
        for (level, s) in &self.macro_avg {
            row("__macro__", *level, *s)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

pub fn evaluate_piece(piece_id: &str, reference: &[NoteEvent], est: &[NoteEvent], cfg: &MatchConfig) -> PieceReport {
    PieceReport {
        piece_id: piece_id.to_string(),
        results: Level::ALL.iter().map(|&l| (l, match_notes(reference, est, cfg, l))).collect(),
    }
}

/// Evaluates `(piece_id, reference, estimate)` triples.
pub fn evaluate_corpus(pieces: &[(String, Vec<NoteEvent>, Vec<NoteEvent>)], cfg: &MatchConfig) -> Result<CorpusReport> {
    cfg.validate()?;
    let reports: Vec<PieceReport> = pieces.iter().map(|(id, r, e)| evaluate_piece(id, r, e, cfg)).collect();
    let mut micro = Vec::new();
    let mut macro_avg = Vec::new();
    for level in Level::ALL {
        let (mut m, mut nr, mut ne) = (0, 0, 0);
        let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
        for rep in &reports {
            let res = &rep.results.iter().find(|(l, _)| *l == level).expect("level").1;
            m += res.pairs.len();
            nr += res.n_ref;
            ne += res.n_est;
            p += res.scores.precision;
            r += res.scores.recall;
            f += res.scores.f1;
        }
        micro.push((level, Prf::from_counts(m, nr, ne)));
        let n = reports.len().max(1) as f64;
        macro_avg.push((
            level,
            Prf {
                precision: p / n,
                recall: r / n,
                f1: f / n,
            },
        ));
    }
    Ok(CorpusReport {
        pieces: reports,
        micro,
        macro_avg,
    })
}
