//! Evaluation: scale-invariant SDR, segmental SNR, the threshold-sweep
//! benchmark grid, and per-stage distance traces.

use std::path::PathBuf;
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;

use crate::dsp::{istft, stft, wav::write_wav, DspError, StftConfig, Waveform, SAMPLE_RATE};
use crate::early_exit::{run_with_early_exit, speedup_ratio, speedup_total, ExitError};
use crate::model::{forward_all, ModelError, ModelWeights};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad data: {0}")]
    Data(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Exit(#[from] ExitError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("metric hook failed: {0}")]
    Hook(String),
}

/// Scale-invariant SDR in dB. The reference is rescaled by
/// `alpha = <est, ref> / ||ref||^2` before the energy ratio, so the score
/// ignores broadband gain. Clamped to +/-100 dB so degenerate estimates
/// keep aggregates finite.
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<f64, EvalError> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(EvalError::Data(format!(
            "SI-SDR wants matching nonempty signals, got {} and {}",
            est.len(),
            reference.len()
        )));
    }
    let ref_pow: f64 = reference.iter().map(|v| v * v).sum();
    if ref_pow == 0.0 {
        return Err(EvalError::Data("SI-SDR reference is silent".into()));
    }
    let dot: f64 = est.iter().zip(reference).map(|(e, r)| e * r).sum();
    let alpha = dot / ref_pow;
    let mut target_pow = 0.0;
    let mut noise_pow = 0.0;
    for (e, r) in est.iter().zip(reference) {
        let t = alpha * r;
        let n = e - t;
        target_pow += t * t;
        noise_pow += n * n;
    }
    if noise_pow == 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (target_pow / noise_pow).log10()).clamp(-100.0, 100.0))
}

/// Segmental SNR frame length / hop (20 ms / 10 ms at 16 kHz).
pub const SEG_WIN: usize = 320;
pub const SEG_HOP: usize = 160;
/// Mean-square threshold below which a reference frame is treated as
/// silence and excluded (-60 dBFS).
pub const SEG_SILENCE_FLOOR: f64 = 1e-6;

/// Segmental SNR in dB: per-frame SNR clamped to [-10, 35], averaged over
/// frames whose reference power clears the silence floor.
pub fn seg_snr(est: &[f64], reference: &[f64]) -> Result<f64, EvalError> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(EvalError::Data(format!(
            "segmental SNR wants matching nonempty signals, got {} and {}",
            est.len(),
            reference.len()
        )));
    }
    if est.len() < SEG_WIN {
        return Err(EvalError::Data(format!(
            "signal of {} samples is shorter than one {SEG_WIN}-sample frame",
            est.len()
        )));
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    let mut start = 0usize;
    while start + SEG_WIN <= est.len() {
        let r = &reference[start..start + SEG_WIN];
        let e = &est[start..start + SEG_WIN];
        let rp: f64 = r.iter().map(|v| v * v).sum::<f64>() / SEG_WIN as f64;
        if rp > SEG_SILENCE_FLOOR {
            let np: f64 = e
                .iter()
                .zip(r)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / SEG_WIN as f64;
            let snr = if np == 0.0 {
                35.0
            } else {
                (10.0 * (rp / np).log10()).clamp(-10.0, 35.0)
            };
            acc += snr;
            n += 1;
        }
        start += SEG_HOP;
    }
    if n == 0 {
        return Err(EvalError::Data(
            "no reference frame clears the silence floor".into(),
        ));
    }
    Ok(acc / n as f64)
}

/// External metric command. `command` runs under `sh -c` with `{est}` and
/// `{ref}` replaced by paths to temporary 16-bit WAVs; the first numeric
/// token on stdout is the score.
#[derive(Clone, Debug)]
pub struct MetricHook {
    pub name: String,
    pub command: String,
}

static HOOK_COUNTER: AtomicU64 = AtomicU64::new(0);

fn parse_first_float(s: &str) -> Option<f64> {
    s.split_whitespace()
        .filter_map(|tok| tok.trim_matches(|c: char| ",;:()[]".contains(c)).parse().ok())
        .next()
}

pub fn run_metric_hook(
    hook: &MetricHook,
    est: &[f64],
    reference: &[f64],
) -> Result<f64, EvalError> {
    let tag = HOOK_COUNTER.fetch_add(1, Ordering::Relaxed);
    let dir = std::env::temp_dir();
    let est_path: PathBuf = dir.join(format!("plce-{}-{tag}-est.wav", std::process::id()));
    let ref_path: PathBuf = dir.join(format!("plce-{}-{tag}-ref.wav", std::process::id()));
    write_wav(&est_path, &Waveform::new(est.to_vec(), SAMPLE_RATE))?;
    write_wav(&ref_path, &Waveform::new(reference.to_vec(), SAMPLE_RATE))?;
    let cmd = hook
        .command
        .replace("{est}", &est_path.to_string_lossy())
        .replace("{ref}", &ref_path.to_string_lossy());
    let out = Command::new("sh").arg("-c").arg(&cmd).output();
    let _ = std::fs::remove_file(&est_path);
    let _ = std::fs::remove_file(&ref_path);
    let out = out.map_err(|e| EvalError::Hook(format!("{}: {e}", hook.name)))?;
    if !out.status.success() {
        return Err(EvalError::Hook(format!(
            "{}: exited with {} ({})",
            hook.name,
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    parse_first_float(&stdout).ok_or_else(|| {
        EvalError::Hook(format!(
            "{}: no numeric token in output {:?}",
            hook.name,
            stdout.trim()
        ))
    })
}

/// One evaluation utterance: the degraded input, its reference, and the
/// SNR label the report groups by.
#[derive(Clone, Debug)]
pub struct BenchItem {
    pub id: String,
    pub mixture: Vec<f64>,
    pub clean: Vec<f64>,
    pub snr_db: f64,
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub taus: Vec<f64>,
    pub stft: StftConfig,
    /// Adds the aggregate-compute column to the report.
    pub speedup_total: bool,
    pub metric_hook: Option<MetricHook>,
    /// Worker threads; 0 resolves via `PLCE_THREADS` then the machine.
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            taus: Vec::new(),
            stft: StftConfig::default(),
            speedup_total: false,
            metric_hook: None,
            threads: 0,
        }
    }
}

/// One report row: aggregates over every utterance sharing an SNR label,
/// at one threshold.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub tau: f64,
    pub snr_db: f64,
    pub n: usize,
    pub mean_exit_stage: f64,
    pub speedup: f64,
    pub speedup_total: f64,
    pub si_sdr_db: f64,
    pub seg_snr_db: f64,
    pub metric: Option<f64>,
}

struct TaskResult {
    exit_stage: usize,
    si_sdr_db: f64,
    seg_snr_db: f64,
    metric: Option<f64>,
}

pub fn default_threads() -> usize {
    std::env::var("PLCE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

fn bench_task(
    weights: &ModelWeights,
    item: &BenchItem,
    tau: f64,
    cfg: &BenchConfig,
) -> Result<TaskResult, EvalError> {
    if item.mixture.len() != item.clean.len() {
        return Err(EvalError::Data(format!(
            "{}: mixture ({}) and clean ({}) lengths differ",
            item.id,
            item.mixture.len(),
            item.clean.len()
        )));
    }
    let x = stft(&item.mixture, &cfg.stft)?;
    if x.bins != weights.config.bins {
        return Err(EvalError::Data(format!(
            "analysis yields {} bins but the model expects {}",
            x.bins, weights.config.bins
        )));
    }
    let (est_spec, rec) = run_with_early_exit(weights, &x, tau)?;
    let est = istft(&est_spec, &cfg.stft, item.mixture.len())?;
    let si = si_sdr(&est, &item.clean)?;
    let seg = seg_snr(&est, &item.clean)?;
    let metric = match &cfg.metric_hook {
        Some(h) => Some(run_metric_hook(h, &est, &item.clean)?),
        None => None,
    };
    Ok(TaskResult {
        exit_stage: rec.exit_stage,
        si_sdr_db: si,
        seg_snr_db: seg,
        metric,
    })
}

/// Runs the full (threshold x utterance) grid and aggregates per
/// (threshold, SNR label). Thresholds keep their given order; SNR groups
/// are ascending. Work is sharded over threads into indexed slots, so the
/// reduction order — and the report — is independent of thread count.
pub fn run_bench(
    weights: &ModelWeights,
    items: &[BenchItem],
    cfg: &BenchConfig,
) -> Result<Vec<BenchRow>, EvalError> {
    if items.is_empty() {
        return Err(EvalError::Data("no evaluation utterances".into()));
    }
    if cfg.taus.is_empty() {
        return Err(EvalError::Data("no thresholds given".into()));
    }
    for &t in &cfg.taus {
        crate::early_exit::validate_tau(t)?;
    }
    let threads = if cfg.threads == 0 {
        default_threads()
    } else {
        cfg.threads
    };
    let n_tasks = cfg.taus.len() * items.len();
    let mut slots: Vec<Option<Result<TaskResult, EvalError>>> = Vec::new();
    slots.resize_with(n_tasks, || None);
    let chunk = n_tasks.div_ceil(threads);
    std::thread::scope(|scope| {
        for (ci, slice) in slots.chunks_mut(chunk).enumerate() {
            let base = ci * chunk;
            scope.spawn(move || {
                for (off, slot) in slice.iter_mut().enumerate() {
                    let idx = base + off;
                    let tau = cfg.taus[idx / items.len()];
                    let item = &items[idx % items.len()];
                    *slot = Some(bench_task(weights, item, tau, cfg));
                }
            });
        }
    });
    let mut results = Vec::with_capacity(n_tasks);
    for slot in slots {
        results.push(slot.expect("every slot filled")?);
    }

    let mut snrs: Vec<f64> = Vec::new();
    for item in items {
        if !item.snr_db.is_finite() {
            return Err(EvalError::Data(format!(
                "{}: non-finite SNR label",
                item.id
            )));
        }
        if !snrs.contains(&item.snr_db) {
            snrs.push(item.snr_db);
        }
    }
    snrs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));

    let q = weights.config.stages;
    let mut rows = Vec::new();
    for (ti, &tau) in cfg.taus.iter().enumerate() {
        for &snr in &snrs {
            let mut exits = Vec::new();
            let mut si_acc = 0.0;
            let mut seg_acc = 0.0;
            let mut metric_acc = 0.0;
            for (ii, item) in items.iter().enumerate() {
                if item.snr_db != snr {
                    continue;
                }
                let r = &results[ti * items.len() + ii];
                exits.push(r.exit_stage);
                si_acc += r.si_sdr_db;
                seg_acc += r.seg_snr_db;
                metric_acc += r.metric.unwrap_or(0.0);
            }
            let n = exits.len();
            rows.push(BenchRow {
                tau,
                snr_db: snr,
                n,
                mean_exit_stage: exits.iter().sum::<usize>() as f64 / n as f64,
                speedup: speedup_ratio(&exits, q),
                speedup_total: speedup_total(&exits, q),
                si_sdr_db: si_acc / n as f64,
                seg_snr_db: seg_acc / n as f64,
                metric: cfg.metric_hook.as_ref().map(|_| metric_acc / n as f64),
            });
        }
    }
    Ok(rows)
}

fn format_tau(tau: f64) -> String {
    if tau.is_infinite() {
        "inf".to_string()
    } else {
        format!("{tau}")
    }
}

/// Writes the benchmark report. Base header
/// `tau,snr_db,n,mean_exit_stage,speedup,si_sdr_db,seg_snr_db`, extended
/// by `speedup_total` and/or the hook metric's name when enabled.
pub fn write_bench_csv<W: std::io::Write>(
    out: W,
    rows: &[BenchRow],
    cfg: &BenchConfig,
) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "tau".to_string(),
        "snr_db".to_string(),
        "n".to_string(),
        "mean_exit_stage".to_string(),
        "speedup".to_string(),
        "si_sdr_db".to_string(),
        "seg_snr_db".to_string(),
    ];
    if cfg.speedup_total {
        header.push("speedup_total".to_string());
    }
    if let Some(h) = &cfg.metric_hook {
        header.push(h.name.clone());
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            format_tau(r.tau),
            format!("{}", r.snr_db),
            format!("{}", r.n),
            format!("{:.3}", r.mean_exit_stage),
            format!("{:.3}", r.speedup),
            format!("{:.3}", r.si_sdr_db),
            format!("{:.3}", r.seg_snr_db),
        ];
        if cfg.speedup_total {
            rec.push(format!("{:.3}", r.speedup_total));
        }
        if let Some(m) = r.metric {
            rec.push(format!("{m:.3}"));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

impl From<csv::Error> for EvalError {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => EvalError::Io(io),
            other => EvalError::Data(format!("csv: {other:?}")),
        }
    }
}

/// Mean stage distance for utterances sharing one SNR label.
#[derive(Clone, Debug)]
pub struct TraceRow {
    pub snr_db: f64,
    pub stage: usize,
    pub mean_dist: f64,
}

/// Runs every stage on every utterance and averages the exit statistic
/// per (SNR label, stage). Rows are SNR-ascending, then stage-ascending.
pub fn dist_trace(
    weights: &ModelWeights,
    items: &[BenchItem],
    stft_cfg: &StftConfig,
) -> Result<Vec<TraceRow>, EvalError> {
    if items.is_empty() {
        return Err(EvalError::Data("no evaluation utterances".into()));
    }
    let q_total = weights.config.stages;
    // SNR bit-pattern -> (label, per-stage distance sums, utterance count).
    let mut acc: IndexMap<u64, (f64, Vec<f64>, usize)> = IndexMap::new();
    for item in items {
        if !item.snr_db.is_finite() {
            return Err(EvalError::Data(format!(
                "{}: non-finite SNR label",
                item.id
            )));
        }
        let x = stft(&item.mixture, stft_cfg)?;
        if x.bins != weights.config.bins {
            return Err(EvalError::Data(format!(
                "analysis yields {} bins but the model expects {}",
                x.bins, weights.config.bins
            )));
        }
        let ests = forward_all(weights, &x)?;
        let z = crate::early_exit::noisy_power_norm(&x);
        let mut prev = &x;
        let mut dists = Vec::with_capacity(q_total);
        for est in &ests {
            dists.push(crate::early_exit::stage_distance(est, prev, z)?);
            prev = est;
        }
        let entry = acc
            .entry(item.snr_db.to_bits())
            .or_insert_with(|| (item.snr_db, vec![0.0; q_total], 0));
        for (s, d) in entry.1.iter_mut().zip(&dists) {
            *s += d;
        }
        entry.2 += 1;
    }
    let mut groups: Vec<(f64, Vec<f64>, usize)> = acc.into_values().collect();
    groups.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite"));
    let mut rows = Vec::new();
    for (snr, sums, n) in groups {
        for (qi, s) in sums.iter().enumerate() {
            rows.push(TraceRow {
                snr_db: snr,
                stage: qi + 1,
                mean_dist: s / n as f64,
            });
        }
    }
    Ok(rows)
}

/// Writes the trace report with header
/// `snr_db,stage,mean_dist,log10_mean_dist` (`-inf` for a zero distance).
pub fn write_trace_csv<W: std::io::Write>(out: W, rows: &[TraceRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["snr_db", "stage", "mean_dist", "log10_mean_dist"])?;
    for r in rows {
        let log = if r.mean_dist == 0.0 {
            "-inf".to_string()
        } else {
            format!("{:.6}", r.mean_dist.log10())
        };
        w.write_record(&[
            format!("{}", r.snr_db),
            format!("{}", r.stage),
            format!("{}", r.mean_dist),
            log,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-stage trace of a single utterance, for the enhance subcommand.
pub fn write_stage_dists<W: std::io::Write>(out: &mut W, dists: &[f64]) -> Result<(), EvalError> {
    writeln!(out, "stage,dist")?;
    for (i, d) in dists.iter().enumerate() {
        writeln!(out, "{},{}", i + 1, d)?;
    }
    Ok(())
}
