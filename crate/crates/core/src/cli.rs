//! Command-line front end: mix / train / enhance / bench / trace.
//!
//! Exit codes: 0 success, 2 usage, 3 model or training failure, 4 audio
//! I/O or format failure, 5 data or evaluation failure.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::dsp::wav::{dequantize_sample, quantize_sample, read_wav, write_wav};
use crate::dsp::{stft, istft, StftConfig, Waveform, SAMPLE_RATE};
use crate::early_exit::{parse_tau, run_with_early_exit};
use crate::eval::{
    dist_trace, run_bench, write_bench_csv, write_stage_dists, write_trace_csv, BenchConfig,
    BenchItem, MetricHook,
};
use crate::model::io::{load_weights, save_weights};
use crate::model::ModelConfig;
use crate::training::{
    mix_at_snr, read_manifest, resolve_path, train_loop, write_manifest, AdamParams, ManifestRow,
    TrainConfig, TrainExample,
};

pub const DEFAULT_SEED: u64 = 42;
/// Target-SNR range `mix` accepts, inclusive, in dB.
pub const SNR_MIN_DB: f64 = -5.0;
pub const SNR_MAX_DB: f64 = 30.0;
pub const DEFAULT_TAUS: &str = "inf,0.6,0.2,0.08,0.04,0.02,0.01,0";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Model(String),
    Audio(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Model(_) => 3,
            CliError::Audio(_) => 4,
            CliError::Data(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Model(m) => write!(f, "{m}"),
            CliError::Audio(m) => write!(f, "{m}"),
            CliError::Data(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

#[derive(Parser)]
#[command(
    name = "plce",
    version,
    about = "Progressive low-latency speech enhancement with early exit"
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Mix clean/noise WAV pairs at target SNRs into a dataset.
    Mix(MixArgs),
    /// Train a model from a dataset manifest.
    Train(TrainArgs),
    /// Enhance a single WAV with threshold-driven early exit.
    Enhance(EnhanceArgs),
    /// Sweep exit thresholds over a test set and write a CSV report.
    Bench(BenchArgs),
    /// Report mean per-stage exit distances over a test set.
    Trace(TraceArgs),
}

#[derive(clap::Args)]
struct MixArgs {
    /// CSV with header clean_path,noise_path,snr_db; paths are relative
    /// to this file.
    #[arg(long)]
    pairs: PathBuf,
    /// Directory receiving mix_NNNN.wav, noise_NNNN.wav, manifest.csv.
    #[arg(long)]
    out_dir: PathBuf,
    /// Base seed; row i mixes with seed + i.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Dataset manifest (clean_path, noise_path, snr_db, seed per row).
    #[arg(long)]
    manifest: PathBuf,
    /// Held-out manifest for the validation loss; defaults to the
    /// training set.
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    /// Where to write the trained weights.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-epoch loss log (epoch,train_loss,val_loss,lr).
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    stages: usize,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = 5)]
    encoder_depth: usize,
    #[arg(long, default_value_t = 256)]
    lstm_units: usize,
    #[arg(long, default_value_t = 2)]
    lstm_layers: usize,
    /// Disable the inter-stage recurrent gate.
    #[arg(long)]
    no_gate: bool,
    /// Give each stage its own entry block instead of sharing one.
    #[arg(long)]
    no_srnn: bool,
    /// Disable encoder-to-decoder skip connections.
    #[arg(long)]
    no_skip: bool,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

#[derive(clap::Args)]
struct EnhanceArgs {
    #[arg(long)]
    model: PathBuf,
    /// Noisy input WAV (16 kHz mono 16-bit).
    #[arg(long)]
    input: PathBuf,
    /// Enhanced output WAV.
    #[arg(long)]
    output: PathBuf,
    /// Exit threshold; a float, "inf" (always exit after stage 1), or
    /// "0" (never exit early).
    #[arg(long)]
    tau: String,
    /// Optional per-stage distance CSV (stage,dist).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    /// Test-set manifest; rows with a mixture_path are read as-is,
    /// others are mixed in memory from clean + noise at snr_db.
    #[arg(long)]
    manifest: PathBuf,
    /// Report CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated thresholds, swept in the given order.
    #[arg(long, default_value = DEFAULT_TAUS)]
    taus: String,
    /// Add the aggregate-compute speed-up column.
    #[arg(long)]
    speedup_total: bool,
    /// External metric command; {est} and {ref} expand to WAV paths,
    /// first numeric token on stdout is the score.
    #[arg(long)]
    metric_cmd: Option<String>,
    /// Column name for the external metric.
    #[arg(long, default_value = "metric")]
    metric_name: String,
    /// Worker threads; overrides PLCE_THREADS.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(clap::Args)]
struct TraceArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Trace CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Mix(a) => cmd_mix(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Enhance(a) => cmd_enhance(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Trace(a) => cmd_trace(a),
    }
}

fn read_speech_wav(path: &Path) -> Result<Waveform, CliError> {
    let wf = read_wav(path).map_err(|e| CliError::Audio(format!("{}: {e}", path.display())))?;
    if wf.sample_rate != SAMPLE_RATE {
        return Err(CliError::Audio(format!(
            "{}: sample rate {} Hz, expected {SAMPLE_RATE}",
            path.display(),
            wf.sample_rate
        )));
    }
    Ok(wf)
}

fn quantized(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| dequantize_sample(quantize_sample(v)))
        .collect()
}

fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

fn cmd_mix(args: MixArgs) -> Result<(), CliError> {
    let pairs_dir = args
        .pairs
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut rdr = csv::Reader::from_path(&args.pairs)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.pairs.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| CliError::Data(format!("{}: {e}", args.pairs.display())))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (ci, ni, si) = match (col("clean_path"), col("noise_path"), col("snr_db")) {
        (Some(c), Some(n), Some(s)) => (c, n, s),
        _ => {
            return Err(CliError::Data(format!(
                "{}: header must contain clean_path, noise_path, snr_db",
                args.pairs.display()
            )))
        }
    };
    let records: Vec<csv::StringRecord> = rdr
        .records()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Data(format!("{}: {e}", args.pairs.display())))?;
    if records.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no pairs to mix",
            args.pairs.display()
        )));
    }
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.out_dir.display())))?;

    let mut rows: Vec<ManifestRow> = Vec::new();
    let mut failures = 0usize;
    for (i, rec) in records.iter().enumerate() {
        match mix_one(&pairs_dir, rec, ci, ni, si, &args, i) {
            Ok(row) => rows.push(row),
            Err(e) => {
                failures += 1;
                eprintln!("row {}: {e}", i + 1);
            }
        }
    }
    let manifest_path = args.out_dir.join("manifest.csv");
    write_manifest(&manifest_path, &rows)
        .map_err(|e| CliError::Data(format!("{}: {e}", manifest_path.display())))?;
    println!(
        "mixed {} of {} pairs into {}",
        rows.len(),
        records.len(),
        args.out_dir.display()
    );
    if failures > 0 {
        return Err(CliError::Data(format!("{failures} pair(s) failed")));
    }
    Ok(())
}

fn mix_one(
    pairs_dir: &Path,
    rec: &csv::StringRecord,
    ci: usize,
    ni: usize,
    si: usize,
    args: &MixArgs,
    i: usize,
) -> Result<ManifestRow, CliError> {
    let field = |idx: usize, name: &str| -> Result<&str, CliError> {
        rec.get(idx)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| CliError::Data(format!("missing {name}")))
    };
    let clean_path = resolve_path(pairs_dir, Path::new(field(ci, "clean_path")?));
    let noise_path = resolve_path(pairs_dir, Path::new(field(ni, "noise_path")?));
    let snr_db: f64 = field(si, "snr_db")?
        .parse()
        .map_err(|_| CliError::Data(format!("bad snr_db {:?}", rec.get(si).unwrap_or(""))))?;
    if !(SNR_MIN_DB..=SNR_MAX_DB).contains(&snr_db) {
        return Err(CliError::Data(format!(
            "snr_db {snr_db} outside [{SNR_MIN_DB}, {SNR_MAX_DB}]"
        )));
    }
    let clean = read_speech_wav(&clean_path)?;
    let noise = read_speech_wav(&noise_path)?;
    let seed = args.seed + i as u64;
    let mixed = mix_at_snr(&clean.samples, &noise.samples, snr_db, seed)
        .map_err(|e| CliError::Data(e.to_string()))?;

    let mix_name = format!("mix_{i:04}.wav");
    let noise_name = format!("noise_{i:04}.wav");
    let clean_name = format!("clean_{i:04}.wav");
    write_wav(
        &args.out_dir.join(&mix_name),
        &Waveform::new(mixed.mixture.clone(), SAMPLE_RATE),
    )
    .map_err(|e| CliError::Audio(format!("{mix_name}: {e}")))?;
    write_wav(
        &args.out_dir.join(&noise_name),
        &Waveform::new(mixed.scaled_noise.clone(), SAMPLE_RATE),
    )
    .map_err(|e| CliError::Audio(format!("{noise_name}: {e}")))?;
    // Copy the clean source verbatim so every manifest path resolves
    // against the manifest's own directory and the dataset relocates as
    // one unit.
    std::fs::copy(&clean_path, args.out_dir.join(&clean_name))
        .map_err(|e| CliError::Audio(format!("{clean_name}: {e}")))?;

    // Realized SNR of the artifacts on disk: 16-bit quantization moves
    // both signals, so recover speech as quantized mix minus quantized
    // noise and measure that against the quantized noise.
    let qmix = quantized(&mixed.mixture);
    let qnoise = quantized(&mixed.scaled_noise);
    let speech: Vec<f64> = qmix.iter().zip(&qnoise).map(|(m, n)| m - n).collect();
    let realized = 10.0 * (mean_power(&speech) / mean_power(&qnoise)).log10();

    Ok(ManifestRow {
        id: format!("mix_{i:04}"),
        mixture_path: Some(PathBuf::from(mix_name)),
        clean_path: PathBuf::from(clean_name),
        noise_path: Some(PathBuf::from(noise_name)),
        snr_db,
        realized_snr_db: Some(realized),
        seed,
    })
}

fn load_train_examples(manifest: &Path) -> Result<Vec<TrainExample>, CliError> {
    let rows = read_manifest(manifest).map_err(|e| CliError::Data(e.to_string()))?;
    if rows.is_empty() {
        return Err(CliError::Data(format!(
            "{}: empty manifest",
            manifest.display()
        )));
    }
    let base = manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let noise_path = row.noise_path.as_ref().ok_or_else(|| {
            CliError::Data(format!("{}: training needs a noise_path", row.id))
        })?;
        let clean = read_speech_wav(&resolve_path(&base, &row.clean_path))?;
        let noise = read_speech_wav(&resolve_path(&base, noise_path))?;
        out.push(TrainExample {
            id: row.id,
            clean,
            noise,
            snr_db: row.snr_db,
            seed: row.seed,
        });
    }
    Ok(out)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let train = load_train_examples(&args.manifest)?;
    let val = match &args.val_manifest {
        Some(p) => load_train_examples(p)?,
        None => Vec::new(),
    };
    let stft = StftConfig::default();
    let model = ModelConfig {
        stages: args.stages,
        bins: stft.bins(),
        channels: args.channels,
        encoder_depth: args.encoder_depth,
        lstm_layers: args.lstm_layers,
        lstm_units: args.lstm_units,
        gate_enabled: !args.no_gate,
        srnn_enabled: !args.no_srnn,
        skip_connections: !args.no_skip,
        ..ModelConfig::default()
    };
    model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg = TrainConfig {
        model,
        epochs: args.epochs,
        batch_size: args.batch,
        adam: AdamParams {
            lr: args.lr,
            ..AdamParams::default()
        },
        seed: args.seed,
        stft,
    };
    let outcome = train_loop(&cfg, &train, &val).map_err(|e| CliError::Model(e.to_string()))?;
    save_weights(&outcome.weights, &args.out).map_err(|e| CliError::Model(e.to_string()))?;
    if let Some(path) = &args.loss_csv {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let write = (|| -> Result<(), csv::Error> {
            w.write_record(["epoch", "train_loss", "val_loss", "lr"])?;
            for r in &outcome.epochs {
                w.write_record(&[
                    r.epoch.to_string(),
                    format!("{}", r.train_loss),
                    format!("{}", r.val_loss),
                    format!("{}", cfg.adam.lr * r.lr_scale),
                ])?;
            }
            w.flush().map_err(csv::Error::from)
        })();
        write.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    let last = outcome.epochs.last();
    println!(
        "trained {} stages, {} parameters, {} epochs; final val loss {}; wrote {}",
        cfg.model.stages,
        outcome.weights.param_count(),
        outcome.epochs.len(),
        last.map(|r| format!("{:.6}", r.val_loss))
            .unwrap_or_else(|| "n/a".into()),
        args.out.display()
    );
    Ok(())
}

fn cmd_enhance(args: EnhanceArgs) -> Result<(), CliError> {
    let tau = parse_tau(&args.tau).map_err(|e| CliError::Usage(e.to_string()))?;
    let weights = load_weights(&args.model).map_err(|e| CliError::Model(e.to_string()))?;
    let input = read_speech_wav(&args.input)?;
    let stft_cfg = StftConfig::default();
    if weights.config.bins != stft_cfg.bins() {
        return Err(CliError::Model(format!(
            "model expects {} bins but analysis yields {}",
            weights.config.bins,
            stft_cfg.bins()
        )));
    }
    let x = stft(&input.samples, &stft_cfg).map_err(|e| CliError::Audio(e.to_string()))?;
    let (est, rec) =
        run_with_early_exit(&weights, &x, tau).map_err(|e| CliError::Model(e.to_string()))?;
    let samples =
        istft(&est, &stft_cfg, input.samples.len()).map_err(|e| CliError::Audio(e.to_string()))?;
    write_wav(&args.output, &Waveform::new(samples, SAMPLE_RATE))
        .map_err(|e| CliError::Audio(format!("{}: {e}", args.output.display())))?;
    if let Some(path) = &args.trace {
        let mut f = std::fs::File::create(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        write_stage_dists(&mut f, &rec.dists)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    println!(
        "exited at stage {}/{}; wrote {}",
        rec.exit_stage,
        weights.config.stages,
        args.output.display()
    );
    Ok(())
}

fn load_bench_items(manifest: &Path) -> Result<Vec<BenchItem>, CliError> {
    let rows = read_manifest(manifest).map_err(|e| CliError::Data(e.to_string()))?;
    if rows.is_empty() {
        return Err(CliError::Data(format!(
            "{}: empty manifest",
            manifest.display()
        )));
    }
    let base = manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut items = Vec::with_capacity(rows.len());
    for row in rows {
        let clean = read_speech_wav(&resolve_path(&base, &row.clean_path))?;
        let mixture = match &row.mixture_path {
            Some(p) => {
                let m = read_speech_wav(&resolve_path(&base, p))?;
                if m.samples.len() != clean.samples.len() {
                    return Err(CliError::Data(format!(
                        "{}: mixture has {} samples, clean has {}",
                        row.id,
                        m.samples.len(),
                        clean.samples.len()
                    )));
                }
                m.samples
            }
            None => {
                let noise_path = row.noise_path.as_ref().ok_or_else(|| {
                    CliError::Data(format!("{}: needs mixture_path or noise_path", row.id))
                })?;
                let noise = read_speech_wav(&resolve_path(&base, noise_path))?;
                mix_at_snr(&clean.samples, &noise.samples, row.snr_db, row.seed)
                    .map_err(|e| CliError::Data(format!("{}: {e}", row.id)))?
                    .mixture
            }
        };
        items.push(BenchItem {
            id: row.id,
            mixture,
            clean: clean.samples,
            snr_db: row.snr_db,
        });
    }
    Ok(items)
}

fn parse_tau_list(s: &str) -> Result<Vec<f64>, CliError> {
    let taus: Result<Vec<f64>, _> = s.split(',').map(|t| parse_tau(t.trim())).collect();
    let taus = taus.map_err(|e| CliError::Usage(e.to_string()))?;
    if taus.is_empty() {
        return Err(CliError::Usage("no thresholds given".into()));
    }
    Ok(taus)
}

fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    let taus = parse_tau_list(&args.taus)?;
    let weights = load_weights(&args.model).map_err(|e| CliError::Model(e.to_string()))?;
    let items = load_bench_items(&args.manifest)?;
    let cfg = BenchConfig {
        taus,
        stft: StftConfig::default(),
        speedup_total: args.speedup_total,
        metric_hook: args.metric_cmd.as_ref().map(|c| MetricHook {
            name: args.metric_name.clone(),
            command: c.clone(),
        }),
        threads: args.threads.unwrap_or(0),
    };
    let rows = run_bench(&weights, &items, &cfg).map_err(|e| CliError::Data(e.to_string()))?;
    match &args.out {
        Some(path) => {
            let f = std::fs::File::create(path)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            write_bench_csv(f, &rows, &cfg).map_err(|e| CliError::Data(e.to_string()))?;
            println!("wrote {} report rows to {}", rows.len(), path.display());
        }
        None => {
            write_bench_csv(std::io::stdout().lock(), &rows, &cfg)
                .map_err(|e| CliError::Data(e.to_string()))?;
        }
    }
    Ok(())
}

fn cmd_trace(args: TraceArgs) -> Result<(), CliError> {
    let weights = load_weights(&args.model).map_err(|e| CliError::Model(e.to_string()))?;
    let items = load_bench_items(&args.manifest)?;
    let rows = dist_trace(&weights, &items, &StftConfig::default())
        .map_err(|e| CliError::Data(e.to_string()))?;
    match &args.out {
        Some(path) => {
            let f = std::fs::File::create(path)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            write_trace_csv(f, &rows).map_err(|e| CliError::Data(e.to_string()))?;
            println!("wrote {} trace rows to {}", rows.len(), path.display());
        }
        None => {
            write_trace_csv(std::io::stdout().lock(), &rows)
                .map_err(|e| CliError::Data(e.to_string()))?;
        }
    }
    Ok(())
}
