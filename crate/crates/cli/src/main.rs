use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hierscribe::codec::{sequence_cost, TokenCodec};
use hierscribe::config::ExperimentConfig;
use hierscribe::data::{self, Dataset, Split};
use hierscribe::encoder::Encoder;
use hierscribe::eval::{evaluate_corpus, Level, VelocityMode};
use hierscribe::pipeline::{self, Hierarchy, LmModel};
use hierscribe::types::{NoteEvent, Segment, SequenceKind, TokenSequence};
use hierscribe::{DType, Error, Result};

#[derive(Parser)]
#[command(name = "hierscribe", version, about = "Hierarchical language-model piano transcription")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Hierarchy,
    Flattened,
    Roll,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Flattened,
    OnsetPitch,
    Velocity,
    Offset,
}

impl From<Kind> for SequenceKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Flattened => SequenceKind::Flattened,
            Kind::OnsetPitch => SequenceKind::OnsetPitch,
            Kind::Velocity => SequenceKind::Velocity,
            Kind::Offset => SequenceKind::Offset,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VelMode {
    Rescaled,
    Absolute,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset (manifest, note files, features).
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Convert a JSONL note file to token-id lines, one line per segment window.
    Tokenize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        stage: Kind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Convert token-id lines back to a JSONL note file.
    Detokenize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        stage: Kind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Pretrain the encoder's frame-level readout on the training split.
    PretrainEncoder {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one language model on a sequence kind and write its loss log.
    TrainLm {
        #[arg(long, value_enum)]
        stage: Kind,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss log path; defaults to `<out>.loss.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Transcribe every segment of a manifest into `<out>/<id>.jsonl`.
    Transcribe {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Directory of stage checkpoints (hierarchy), a flattened checkpoint, or an encoder checkpoint (roll).
        #[arg(long)]
        models: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Score estimated notes against references at all three levels.
    Evaluate {
        /// JSONL file or directory of `<id>.jsonl` files.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum)]
        velocity_mode: Option<VelMode>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the attention-cost comparison as JSON.
    Costmodel {
        #[arg(long)]
        t: u64,
        #[arg(long)]
        n: u64,
        #[arg(long)]
        d: u64,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn read_token_lines(path: &Path, kind: SequenceKind) -> Result<Vec<TokenSequence>> {
    let mut seqs = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ids = line
            .split_whitespace()
            .map(|t| t.parse::<u32>().map_err(|e| Error::Data(format!("line {}: {e}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        let mask = vec![false; ids.len()];
        seqs.push(TokenSequence::new(ids, kind, mask)?);
    }
    Ok(seqs)
}

fn note_files(path: &Path) -> Result<Vec<(String, Vec<NoteEvent>)>> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        entries.sort();
        entries
            .into_iter()
            .map(|p| Ok((stem(&p), data::load_jsonl(&p)?)))
            .collect()
    } else {
        Ok(vec![(stem(path), data::load_jsonl(path)?)])
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn write_notes(dir: &Path, seg: &Segment, notes: &[NoteEvent]) -> Result<()> {
    data::save_jsonl(&dir.join(format!("{}.jsonl", seg.source_id)), notes)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { seed, n, out, config } => {
            let cfg = load_config(&config)?;
            let syn = data::SyntheticConfig {
                seed,
                n_segments: n,
                ..cfg.synthetic
            };
            let segs = data::gen_synthetic(&syn)?;
            let manifest = Dataset::with_split(segs, syn.valid_fraction, seed).save(&out)?;
            println!("{}", manifest.display());
        }
        Command::Tokenize { input, stage, out, config } => {
            let cfg = load_config(&config)?;
            let codec = TokenCodec::new(cfg.codec)?;
            let notes = data::load_jsonl(&input)?;
            let mut w = std::io::BufWriter::new(fs::File::create(&out)?);
            for seq in data::tokenize_piece(&codec, &notes, stage.into())? {
                let line: Vec<String> = seq.ids.iter().map(u32::to_string).collect();
                writeln!(w, "{}", line.join(" "))?;
            }
            w.flush()?;
        }
        Command::Detokenize { input, stage, out, config } => {
            let cfg = load_config(&config)?;
            let codec = TokenCodec::new(cfg.codec)?;
            let seqs = read_token_lines(&input, stage.into())?;
            data::save_jsonl(&out, &data::detokenize_piece(&codec, &seqs)?)?;
        }
        Command::PretrainEncoder { config, data, out, seed } => {
            let cfg = load_config(&config)?;
            let ds = Dataset::load(&data, cfg.codec.segment_duration_s)?;
            let mut enc_cfg = cfg.encoder.clone();
            let mut hyper = cfg.pretrain.clone();
            if let Some(s) = seed {
                enc_cfg.seed = s;
                hyper.seed = s;
            }
            let mut encoder = Encoder::new(enc_cfg, DType::F32)?;
            let report = encoder.pretrain(&ds.split(Split::Train), &hyper)?;
            if let Some(l) = report.final_loss() {
                eprintln!("final training BCE {l:.6}");
            }
            pipeline::save_encoder(&encoder, &out)?;
        }
        Command::TrainLm { stage, encoder, config, data, out, log, seed } => {
            let cfg = load_config(&config)?;
            let ds = Dataset::load(&data, cfg.codec.segment_duration_s)?;
            let encoder = pipeline::load_encoder(&encoder)?;
            let mut dec = cfg.decoder.clone();
            let mut train = cfg.train.clone();
            if let Some(s) = seed {
                dec.seed = s;
                train.seed = s;
            }
            dec.audio_dim = encoder.cfg.hidden_dim;
            let mut model = LmModel::new(stage.into(), &encoder, dec, cfg.codec)?;
            let losses = pipeline::train_lm(&mut model, &ds.split(Split::Train), &ds.split(Split::Valid), &train)?;
            model.save(&out)?;
            let log_path = log.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".loss.csv");
                PathBuf::from(p)
            });
            losses.write_csv(fs::File::create(&log_path)?)?;
            if let Some(last) = losses.split("train").last() {
                eprintln!("final training loss {:.6}", last.loss);
            }
        }
        Command::Transcribe { mode, models, input, out, config, beam } => {
            let cfg = load_config(&config)?;
            let mut decode = cfg.decode.clone();
            if let Some(b) = beam {
                decode.beam_width = b;
            }
            let ds = Dataset::load(&input, cfg.codec.segment_duration_s)?;
            fs::create_dir_all(&out)?;
            match mode {
                Mode::Hierarchy => {
                    let h = Hierarchy::load(&models)?;
                    for (seg, _) in &ds.segments {
                        let t = h.transcribe(seg, &decode)?;
                        eprintln!("{}: {} notes, cost ratio {:.3}", seg.source_id, t.notes.len(), t.cost.ratio);
                        write_notes(&out, seg, &t.notes)?;
                    }
                }
                Mode::Flattened => {
                    let m = LmModel::load(&models)?;
                    for (seg, _) in &ds.segments {
                        let t = pipeline::transcribe_flattened(&m, seg, &decode)?;
                        eprintln!("{}: {} notes, cost ratio {:.3}", seg.source_id, t.notes.len(), t.cost.ratio);
                        write_notes(&out, seg, &t.notes)?;
                    }
                }
                Mode::Roll => {
                    let enc = pipeline::load_encoder(&models)?;
                    for (seg, _) in &ds.segments {
                        write_notes(&out, seg, &pipeline::transcribe_roll(&enc, seg, &cfg.roll)?)?;
                    }
                }
            }
        }
        Command::Evaluate { reference, est, report, velocity_mode, config } => {
            let mut cfg = load_config(&config)?.eval;
            if let Some(m) = velocity_mode {
                cfg.velocity_mode = match m {
                    VelMode::Rescaled => VelocityMode::Rescaled,
                    VelMode::Absolute => VelocityMode::Absolute,
                };
            }
            let refs = note_files(&reference)?;
            let ests = note_files(&est)?;
            let single = refs.len() == 1 && ests.len() == 1;
            let mut pieces = Vec::new();
            for (id, r) in refs {
                let e = if single {
                    ests[0].1.clone()
                } else {
                    ests.iter()
                        .find(|(eid, _)| *eid == id)
                        .map(|(_, e)| e.clone())
                        .ok_or_else(|| Error::Data(format!("no estimate for `{id}`")))?
                };
                pieces.push((id, r, e));
            }
            let rep = evaluate_corpus(&pieces, &cfg)?;
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            writeln!(w, "{:<12} {:>9} {:>9} {:>9} {:>9}", "level", "P", "R", "F1", "F1(macro)")?;
            for level in Level::ALL {
                let m = rep.micro(level);
                writeln!(
                    w,
                    "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                    level.name(),
                    m.precision,
                    m.recall,
                    m.f1,
                    rep.macro_avg(level).f1
                )?;
            }
            if let Some(path) = report {
                rep.save_csv(&path)?;
            }
        }
        Command::Costmodel { t, n, d } => {
            println!("{}", serde_json::to_string(&sequence_cost(t, n, d))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {e}", e.code());
            ExitCode::from(1)
        }
    }
}
