//! Threshold-driven early exit across refinement stages.
//!
//! After stage `q` produces estimate `S_q`, the runner scores how much the
//! estimate moved: `dist_q = sum |S_q - S_{q-1}|^2 / (Z * L * K)`, with
//! `S_0` the noisy input and `Z` the mean noisy power per cell. Exit fires
//! on the strict test `dist_q < tau`, so `tau = +inf` always exits after
//! stage 1 and `tau = 0` never exits early. Stage `q + 1` is never invoked
//! once the test fires.

use crate::dsp::Spectrogram;
use crate::model::{forward_stage, initial_state, ModelError, ModelWeights};

#[derive(Debug, thiserror::Error)]
pub enum ExitError {
    #[error("invalid threshold: {0}")]
    InvalidTau(String),
    #[error("spectrogram shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Mean noisy power per spectrogram cell: `sum |X|^2 / (L * K)`.
pub fn noisy_power_norm(x: &Spectrogram) -> f64 {
    let n = x.numel();
    if n == 0 {
        return 0.0;
    }
    x.power() / n as f64
}

/// Power distance between consecutive estimates, normalized by the noisy
/// power `z` and the spectrogram extent. A silent input (`z == 0`) yields
/// 0 when the estimates agree exactly and `+inf` otherwise.
pub fn stage_distance(cur: &Spectrogram, prev: &Spectrogram, z: f64) -> Result<f64, ExitError> {
    if cur.bins != prev.bins || cur.frames != prev.frames {
        return Err(ExitError::Shape(format!(
            "[{}, {}] vs [{}, {}]",
            cur.bins, cur.frames, prev.bins, prev.frames
        )));
    }
    let mut num = 0.0f64;
    for i in 0..cur.re.len() {
        let dr = cur.re[i] - prev.re[i];
        let di = cur.im[i] - prev.im[i];
        num += dr * dr + di * di;
    }
    let denom = z * cur.numel() as f64;
    if denom == 0.0 {
        return Ok(if num == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(num / denom)
}

/// Parses a threshold: `inf` (any case, optional `+`) for no refinement
/// beyond stage 1, otherwise a non-negative decimal.
pub fn parse_tau(s: &str) -> Result<f64, ExitError> {
    let t = s.trim();
    let lower = t.to_ascii_lowercase();
    if matches!(lower.as_str(), "inf" | "+inf" | "infinity" | "+infinity") {
        return Ok(f64::INFINITY);
    }
    let v: f64 = t
        .parse()
        .map_err(|_| ExitError::InvalidTau(format!("cannot parse {t:?}")))?;
    validate_tau(v)?;
    Ok(v)
}

pub fn validate_tau(tau: f64) -> Result<(), ExitError> {
    if tau.is_nan() || tau < 0.0 {
        return Err(ExitError::InvalidTau(format!(
            "threshold must be >= 0 or +inf, got {tau}"
        )));
    }
    Ok(())
}

/// What one early-exit run did: where it stopped, every distance it
/// computed along the way, and the normalizer it used.
#[derive(Clone, Debug)]
pub struct ExitRecord {
    /// 1-based stage whose estimate was returned.
    pub exit_stage: usize,
    /// Stages actually invoked; equals `exit_stage` by construction.
    pub stages_run: usize,
    /// `dists[i]` is the distance after stage `i + 1`.
    pub dists: Vec<f64>,
    pub z: f64,
}

/// Core early-exit loop over an arbitrary stage function
/// `stage(q, prev_estimate) -> estimate_q`, `q` counting from 1.
pub fn run_early_exit_with<F>(
    x: &Spectrogram,
    tau: f64,
    stages: usize,
    mut stage: F,
) -> Result<(Spectrogram, ExitRecord), ExitError>
where
    F: FnMut(usize, &Spectrogram) -> Result<Spectrogram, ExitError>,
{
    validate_tau(tau)?;
    if stages == 0 {
        return Err(ExitError::InvalidTau("stage count must be >= 1".into()));
    }
    let z = noisy_power_norm(x);
    let mut prev = x.clone();
    let mut dists = Vec::with_capacity(stages);
    let mut invoked = 0usize;
    for q in 1..=stages {
        let est = stage(q, &prev)?;
        invoked += 1;
        let d = stage_distance(&est, &prev, z)?;
        dists.push(d);
        prev = est;
        if d < tau {
            break;
        }
    }
    let exit_stage = invoked;
    Ok((
        prev,
        ExitRecord {
            exit_stage,
            stages_run: invoked,
            dists,
            z,
        },
    ))
}

/// Early-exit inference with the real model.
pub fn run_with_early_exit(
    w: &ModelWeights,
    x: &Spectrogram,
    tau: f64,
) -> Result<(Spectrogram, ExitRecord), ExitError> {
    let mut st = initial_state(x);
    let stages = w.config.stages;
    let (est, rec) = run_early_exit_with(x, tau, stages, |_q, _prev| {
        let (est, next) = forward_stage(w, x, &st)?;
        st = next;
        Ok(est)
    })?;
    debug_assert_eq!(st.cells_invoked, rec.stages_run);
    Ok((est, rec))
}

/// Mean per-utterance speed-up: `mean(Q / exit_stage)`.
pub fn speedup_ratio(exit_stages: &[usize], q_total: usize) -> f64 {
    if exit_stages.is_empty() {
        return 0.0;
    }
    let sum: f64 = exit_stages
        .iter()
        .map(|&e| q_total as f64 / e as f64)
        .sum();
    sum / exit_stages.len() as f64
}

/// Aggregate-compute speed-up: `Q * N / sum(exit_stage)`. Weighs long
/// exits more than the per-utterance mean does.
pub fn speedup_total(exit_stages: &[usize], q_total: usize) -> f64 {
    if exit_stages.is_empty() {
        return 0.0;
    }
    let sum: usize = exit_stages.iter().sum();
    (q_total * exit_stages.len()) as f64 / sum as f64
}
