//! `ubgan`: command-line front end for the bandwidth-extension toolkit.
//!
//! Exit codes: 0 success, 1 usage error, 2 malformed input file,
//! 3 inputs that disagree with each other (for example a side-info stream
//! whose frame count does not match the audio), 4 runtime failure or a
//! failed check.

mod output;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use ubgan::adversary::train::end_to_end_gradcheck;
use ubgan::adversary::{toy_train, TraceRow, TrainConfig};
use ubgan::audioio::{self, encode_wav, read_wav, WavEncoding, SWB_RATE, WB_RATE};
use ubgan::conditioning::{mel_stream, MelConfig};
use ubgan::generator::{extend_streaming, system_delay, SWB_FRAME, WB_FRAME};
use ubgan::nnengine::gradcheck::{self, GradCheck};
use ubgan::nnengine::{complexity, save_weights, ComplexityReport, Tensor};
use ubgan::pqmf;
use ubgan::{extend, sideinfo, AudioBuffer, CondSource, ErrorClass, Generator, GeneratorConfig, Mode};

use output::{write_one, Staged};

const EXIT_USAGE: u8 = 1;
const EXIT_FORMAT: u8 = 2;
const EXIT_CONSISTENCY: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

/// Tolerance of the end-to-end generator gradient check.
const E2E_TOLERANCE: f64 = 1e-2;

#[derive(Parser, Debug)]
#[command(name = "ubgan", version, about = "Streaming subband bandwidth extension, 16 kHz to 32 kHz")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Design a PQMF prototype and write it as a weight container.
    DesignPqmf {
        #[arg(long)]
        bands: usize,
        /// Prototype taps per band; the filter has `bands * taps + 1` taps.
        #[arg(long, default_value_t = pqmf::DEFAULT_TAPS_PER_BAND)]
        taps: usize,
        #[arg(long, default_value_t = pqmf::DEFAULT_STOPBAND_DB)]
        stopband_db: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the text report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Seed of the white-noise probe used for the reported SNR.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump log-mel features of a 16 kHz file as raw little-endian f32.
    Features {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode side information (4 bits per 20 ms) from a 32 kHz reference.
    SideinfoEncode {
        #[arg(long, env = "UBGAN_WEIGHTS")]
        weights: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extend 16 kHz files to 32 kHz. Several inputs run in parallel.
    Extend {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, env = "UBGAN_WEIGHTS")]
        weights: Option<PathBuf>,
        /// One side-info file per input (guided mode only).
        #[arg(long)]
        sideinfo: Vec<PathBuf>,
        #[arg(long = "in", required = true)]
        input: Vec<PathBuf>,
        #[arg(long, required = true)]
        out: Vec<PathBuf>,
        /// Feed the streaming extender in chunks of this many samples
        /// instead of one batch pass. Output is identical.
        #[arg(long)]
        chunk: Option<usize>,
        /// Keep the leading algorithmic delay instead of aligning the output
        /// with the input.
        #[arg(long)]
        keep_delay: bool,
        #[arg(long)]
        pcm16: bool,
    },
    /// Print parameter count and GFLOPS with a per-block breakdown.
    ReportComplexity {
        #[arg(long, env = "UBGAN_WEIGHTS")]
        weights: Option<PathBuf>,
        /// Report the freshly constructed architecture instead of a file.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference checks of every op and of the generator loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Overfit a fresh generator on one short 32 kHz clip.
    TrainToy {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = Switch::Off)]
        adversarial: Switch,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare a test file against a reference after delay alignment.
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 4096)]
        max_lag: usize,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Blind,
    Guided,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Blind => Mode::Blind,
            ModeArg::Guided => Mode::Guided,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

/// A flag combination that cannot be run.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Inputs that are valid on their own but do not belong together.
#[derive(Debug)]
struct Inconsistent(String);

impl std::fmt::Display for Inconsistent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Inconsistent {}

/// A check that ran to completion and failed.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    if e.downcast_ref::<Inconsistent>().is_some() {
        return EXIT_CONSISTENCY;
    }
    match e.downcast_ref::<ubgan::Error>().map(ubgan::Error::class) {
        Some(ErrorClass::Format) => EXIT_FORMAT,
        Some(ErrorClass::Consistency) => EXIT_CONSISTENCY,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.to_string();
            let line = rendered.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("ubgan: {} (see --help)", line.trim_start_matches("error: "));
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ubgan: error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::DesignPqmf {
            bands,
            taps,
            stopband_db,
            out,
            report,
            seed,
        } => design_pqmf(bands, taps, stopband_db, &out, report.as_deref(), seed),
        Command::Features { input, out } => features(&input, &out),
        Command::SideinfoEncode { weights, input, out } => sideinfo_encode(weights.as_deref(), &input, &out),
        Command::Extend {
            mode,
            weights,
            sideinfo,
            input,
            out,
            chunk,
            keep_delay,
            pcm16,
        } => {
            let job = ExtendJob {
                mode: mode.into(),
                chunk,
                keep_delay,
                encoding: if pcm16 { WavEncoding::Pcm16 } else { WavEncoding::Float32 },
            };
            run_extend(&job, weights.as_deref(), &sideinfo, &input, &out)
        }
        Command::ReportComplexity { weights, mode, json } => report_complexity(weights.as_deref(), mode, json),
        Command::Gradcheck { seed, json } => run_gradcheck(seed, json),
        Command::TrainToy {
            clip,
            mode,
            steps,
            adversarial,
            out,
            trace,
            seed,
        } => train_toy(&clip, mode.into(), steps, adversarial == Switch::On, &out, trace.as_deref(), seed),
        Command::Metrics {
            reference,
            test,
            max_lag,
            json,
        } => metrics(&reference, &test, max_lag, json),
    }
}

fn require_weights(weights: Option<&Path>) -> Result<&Path> {
    weights.ok_or_else(|| usage("no weights given: pass --weights or set UBGAN_WEIGHTS"))
}

fn load_model(path: &Path) -> Result<Generator> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Generator::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))
}

fn read_audio(path: &Path) -> Result<AudioBuffer> {
    read_wav(path).with_context(|| format!("reading {}", path.display()))
}

/// Zero-pads to a whole number of frames.
fn pad_to(samples: &[f32], frame: usize) -> Vec<f32> {
    let mut v = samples.to_vec();
    v.resize(samples.len().div_ceil(frame) * frame, 0.0);
    v
}

fn design_pqmf(bands: usize, taps: usize, stopband_db: f64, out: &Path, report: Option<&Path>, seed: u64) -> Result<()> {
    if bands != 4 && bands != 8 {
        return Err(usage(format!("--bands must be 4 or 8, got {bands}")));
    }
    if taps < 8 {
        return Err(usage(format!("--taps must be at least 8, got {taps}")));
    }
    let proto = pqmf::design_prototype(bands, taps, stopband_db)?;
    let rate = proto.sample_rate();
    let snr = pqmf::reconstruction_snr(&proto, &pqmf::white_noise(rate as usize, seed))?;
    let text = format!(
        "bands {bands}\ntaps_per_band {taps}\nlength {}\nsample_rate_hz {rate}\ncutoff_nyquist {:.6}\ncutoff_hz {:.2}\nwindow_beta {:.3}\ndelay_samples {}\nreconstruction_snr_db {:.2}\n",
        proto.len(),
        proto.cutoff,
        proto.cutoff * rate as f64 / 2.0,
        proto.window_beta,
        proto.delay(),
        snr,
    );
    let mut staged = Staged::new();
    staged.add(out, &save_weights(&proto.to_store()?))?;
    if let Some(r) = report {
        staged.add(r, text.as_bytes())?;
    }
    staged.commit()?;
    print!("{text}");
    Ok(())
}

fn features(input: &Path, out: &Path) -> Result<()> {
    let x = read_audio(input)?;
    let cfg = MelConfig::default();
    let frames = mel_stream(&x, &cfg)?;
    let bands = cfg.num_mels;
    let mut bytes = Vec::with_capacity(frames.len() * bands * 4);
    for v in &frames {
        for &m in &v.values {
            bytes.extend_from_slice(&m.to_le_bytes());
        }
    }
    let sidecar = format!(
        "rows {}\ncols {bands}\ndtype float32\nendian little\norder row-major\nrow frame\nhop_samples {}\nsample_rate_hz {}\n",
        frames.len(),
        cfg.hop(),
        cfg.sample_rate,
    );
    let mut staged = Staged::new();
    staged.add(out, &bytes)?;
    staged.add(&sidecar_path(out), sidecar.as_bytes())?;
    staged.commit()?;
    println!("{} frames x {bands} bands -> {}", frames.len(), out.display());
    Ok(())
}

/// `feat.f32` -> `feat.f32.txt`.
fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

fn sideinfo_encode(weights: Option<&Path>, input: &Path, out: &Path) -> Result<()> {
    let weights = require_weights(weights)?;
    let model = load_model(weights)?;
    if model.mode() != Mode::Guided {
        return Err(Inconsistent(format!("{} holds a blind model; side-info needs a guided one", weights.display())).into());
    }
    let x = read_audio(input)?;
    x.expect_rate(SWB_RATE)?;
    let padded = AudioBuffer::new(pad_to(&x.samples, SWB_FRAME), SWB_RATE)?;
    let codes = sideinfo::encode(&padded, &model)?;
    write_one(out, &sideinfo::pack(&codes)?)?;
    println!("{} frames, {} payload bits, 200 bit/s -> {}", codes.len(), 4 * codes.len(), out.display());
    Ok(())
}

struct ExtendJob {
    mode: Mode,
    chunk: Option<usize>,
    keep_delay: bool,
    encoding: WavEncoding,
}

fn run_extend(job: &ExtendJob, weights: Option<&Path>, side: &[PathBuf], inputs: &[PathBuf], outs: &[PathBuf]) -> Result<()> {
    if inputs.len() != outs.len() {
        return Err(usage(format!("{} --in files but {} --out files", inputs.len(), outs.len())));
    }
    match job.mode {
        Mode::Guided if side.is_empty() => return Err(usage("guided mode needs --sideinfo")),
        Mode::Guided if side.len() != inputs.len() => {
            return Err(usage(format!("{} --in files but {} --sideinfo files", inputs.len(), side.len())))
        }
        Mode::Blind if !side.is_empty() => return Err(usage("--sideinfo is only used in guided mode")),
        _ => {}
    }
    if job.chunk == Some(0) {
        return Err(usage("--chunk must be positive"));
    }
    for (i, o) in outs.iter().enumerate() {
        if inputs.contains(o) || side.contains(o) || outs[..i].contains(o) {
            return Err(usage(format!("output {} would overwrite an input or another output", o.display())));
        }
    }
    let weights = require_weights(weights)?;
    let model = load_model(weights)?;
    if model.mode() != job.mode {
        return Err(Inconsistent(format!("{} holds a {:?} model, --mode asks for {:?}", weights.display(), model.mode(), job.mode)).into());
    }
    let delay = system_delay()?;

    let rendered: Vec<Vec<u8>> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, path)| -> Result<Vec<u8>> {
            let x = read_audio(path)?;
            x.expect_rate(WB_RATE).with_context(|| path.display().to_string())?;
            let codes = match side.get(i) {
                Some(s) => {
                    let bytes = std::fs::read(s).with_context(|| format!("reading {}", s.display()))?;
                    Some(sideinfo::unpack(&bytes).with_context(|| s.display().to_string())?)
                }
                None => None,
            };
            let source = match &codes {
                Some(c) => CondSource::Guided(c),
                None => CondSource::Blind,
            };
            let padded = AudioBuffer::new(pad_to(&x.samples, WB_FRAME), WB_RATE)?;
            let y = match job.chunk {
                Some(c) => extend_streaming(&padded, source, &model, c),
                None => extend(&padded, source, &model),
            }
            .with_context(|| path.display().to_string())?;
            let samples = if job.keep_delay {
                y.audio.samples
            } else {
                y.audio.samples[delay..delay + 2 * x.len()].to_vec()
            };
            Ok(encode_wav(&AudioBuffer::new(samples, SWB_RATE)?, job.encoding)?)
        })
        .collect::<Result<_>>()?;

    let mut staged = Staged::new();
    for (o, bytes) in outs.iter().zip(&rendered) {
        staged.add(o, bytes)?;
    }
    staged.commit()?;
    for (i, o) in inputs.iter().zip(outs) {
        println!("{} -> {}", i.display(), o.display());
    }
    Ok(())
}

fn report_complexity(weights: Option<&Path>, mode: Option<ModeArg>, json: bool) -> Result<()> {
    let (label, report): (String, ComplexityReport) = match (mode, weights) {
        (Some(m), _) => {
            let cfg = GeneratorConfig::new(m.into());
            (format!("{:?} architecture", Mode::from(m)).to_lowercase(), complexity(&ubgan::generator::layer_specs(&cfg)?)?)
        }
        (None, Some(w)) => {
            let model = load_model(w)?;
            (w.display().to_string(), model.complexity()?)
        }
        (None, None) => return Err(usage("pass --weights (or set UBGAN_WEIGHTS) or --mode")),
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    let mut s = String::new();
    writeln!(s, "model {label}")?;
    writeln!(s, "params {}", report.params)?;
    writeln!(s, "gflops {:.4}", report.gflops)?;
    writeln!(s, "dense_equivalent_gflops {:.4}", report.dense_equivalent_gflops)?;
    writeln!(s, "convention {}", report.convention)?;
    writeln!(s, "{:<16} {:>10} {:>14}", "block", "params", "flops/s")?;
    for b in &report.blocks {
        writeln!(s, "{:<16} {:>10} {:>14}", b.block, b.params, b.flops_per_second)?;
    }
    print!("{s}");
    Ok(())
}

fn run_gradcheck(seed: u64, json: bool) -> Result<()> {
    let mut checks: Vec<GradCheck> = gradcheck::op_suite(seed)?;
    checks.push(end_to_end_gradcheck(seed, E2E_TOLERANCE)?);
    let z = gradcheck::random_tensor(&mut rand_probe(seed), &[64], -3.0, 3.0, 0.0);
    let st = straight_through_check(&z)?;
    checks.push(st);
    let failed = checks.iter().filter(|c| !c.passed).count();
    if json {
        println!("{}", serde_json::to_string_pretty(&checks)?);
    } else {
        for c in &checks {
            println!("{:<28} rel_error {:.3e} tol {:.0e} {}", c.name, c.rel_error, c.tolerance, if c.passed { "PASS" } else { "FAIL" });
        }
        println!("{} of {} checks passed (seed {seed})", checks.len() - failed, checks.len());
    }
    if failed > 0 {
        return Err(CheckFailed(format!("{failed} gradient checks failed")).into());
    }
    Ok(())
}

fn rand_probe(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5717)
}

fn straight_through_check(z: &Tensor) -> Result<GradCheck> {
    let diff = gradcheck::straight_through_matches_tanh(z)? as f64;
    Ok(GradCheck {
        name: "straight_through_vs_tanh".into(),
        rel_error: diff,
        tolerance: 0.0,
        passed: diff == 0.0,
    })
}

fn train_toy(clip: &Path, mode: Mode, steps: usize, adversarial: bool, out: &Path, trace: Option<&Path>, seed: u64) -> Result<()> {
    if steps == 0 {
        return Err(usage("--steps must be positive"));
    }
    let x = read_audio(clip)?;
    x.expect_rate(SWB_RATE)?;
    let padded = AudioBuffer::new(pad_to(&x.samples, SWB_FRAME), SWB_RATE)?;
    let mut cfg = TrainConfig::new(mode, steps);
    cfg.adversarial = adversarial;
    cfg.seed = seed;
    let outcome = toy_train(&padded, &cfg)?;

    let mut staged = Staged::new();
    staged.add(out, &outcome.model.to_bytes())?;
    if let Some(t) = trace {
        let mut csv = String::from(TraceRow::CSV_HEADER);
        csv.push('\n');
        for row in &outcome.trace {
            csv.push_str(&row.to_csv());
            csv.push('\n');
        }
        staged.add(t, csv.as_bytes())?;
    }
    staged.commit()?;
    if let (Some(first), Some(last)) = (outcome.trace.first(), outcome.trace.last()) {
        println!("step {} sc+mag {:.5}", first.step, first.reconstruction());
        println!("step {} sc+mag {:.5}", last.step, last.reconstruction());
    }
    if mode == Mode::Guided {
        let mut distinct = outcome.codes.clone();
        distinct.sort_unstable();
        distinct.dedup();
        println!("distinct codes {}", distinct.len());
    }
    println!("weights -> {}", out.display());
    Ok(())
}

fn metrics(reference: &Path, test: &Path, max_lag: usize, json: bool) -> Result<()> {
    let r = read_audio(reference)?;
    let t = read_audio(test)?;
    let m = audioio::align_and_snr(&r, &t, max_lag)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&m)?);
        return Ok(());
    }
    println!("delay_samples {}", m.delay_samples);
    println!("snr_db {:.2}", m.snr_db);
    for (k, s) in m.band_snr_db.iter().enumerate() {
        println!("band{k}_snr_db {s:.2}");
    }
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.5}"));
    println!("spectral_convergence {}", opt(m.sc));
    println!("log_magnitude {}", opt(m.mag));
    Ok(())
}
