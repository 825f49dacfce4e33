//! Python module exposing the enhancement engine: analysis/synthesis,
//! dataset mixing, the model with threshold-driven inference, and the
//! evaluation metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use plce::dsp::{self, Spectrogram, StftConfig, Waveform};
use plce::early_exit;
use plce::eval;
use plce::model::{self, ModelConfig, ModelWeights};
use plce::nn::NormMode;
use plce::training;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn stft_config(win_len: usize, hop: usize, fft_len: usize) -> Result<StftConfig, PyErr> {
    let cfg = StftConfig {
        win_len,
        hop,
        fft_len,
    };
    cfg.validate().map_err(value_err)?;
    Ok(cfg)
}

/// `[bins][frames]` nested lists -> flat spectrogram.
fn spec_from_planes(re: Vec<Vec<f64>>, im: Vec<Vec<f64>>) -> Result<Spectrogram, PyErr> {
    if re.is_empty() || re.len() != im.len() {
        return Err(PyValueError::new_err(
            "re and im must be nonempty with matching bin counts",
        ));
    }
    let frames = re[0].len();
    let bins = re.len();
    let mut s = Spectrogram::zeros(bins, frames);
    for (k, (rr, ir)) in re.iter().zip(&im).enumerate() {
        if rr.len() != frames || ir.len() != frames {
            return Err(PyValueError::new_err("ragged spectrogram rows"));
        }
        for l in 0..frames {
            s.re[k * frames + l] = rr[l];
            s.im[k * frames + l] = ir[l];
        }
    }
    Ok(s)
}

fn spec_to_planes(s: &Spectrogram) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let row = |plane: &[f64], k: usize| plane[k * s.frames..(k + 1) * s.frames].to_vec();
    let re = (0..s.bins).map(|k| row(&s.re, k)).collect();
    let im = (0..s.bins).map(|k| row(&s.im, k)).collect();
    (re, im)
}

/// Windowed transform of a 16 kHz signal; returns (re, im) as
/// [bins][frames] lists.
#[pyfunction]
#[pyo3(signature = (samples, win_len=320, hop=160, fft_len=320))]
fn stft(
    samples: Vec<f64>,
    win_len: usize,
    hop: usize,
    fft_len: usize,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let cfg = stft_config(win_len, hop, fft_len)?;
    let s = dsp::stft(&samples, &cfg).map_err(value_err)?;
    Ok(spec_to_planes(&s))
}

/// Inverse transform back to `out_len` samples.
#[pyfunction]
#[pyo3(signature = (re, im, out_len, win_len=320, hop=160, fft_len=320))]
fn istft(
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
    out_len: usize,
    win_len: usize,
    hop: usize,
    fft_len: usize,
) -> PyResult<Vec<f64>> {
    let cfg = stft_config(win_len, hop, fft_len)?;
    let s = spec_from_planes(re, im)?;
    dsp::istft(&s, &cfg, out_len).map_err(value_err)
}

/// Scales noise to sit `snr_db` below the clean signal and adds it.
/// Returns (mixture, scaled_noise, gain).
#[pyfunction]
fn mix_at_snr(
    clean: Vec<f64>,
    noise: Vec<f64>,
    snr_db: f64,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<f64>, f64)> {
    let m = training::mix_at_snr(&clean, &noise, snr_db, seed).map_err(value_err)?;
    Ok((m.mixture, m.scaled_noise, m.gain))
}

/// Scale-invariant SDR in dB, clamped to +/-100.
#[pyfunction]
fn si_sdr(est: Vec<f64>, reference: Vec<f64>) -> PyResult<f64> {
    eval::si_sdr(&est, &reference).map_err(value_err)
}

/// Segmental SNR in dB over voiced 20 ms frames, clamped to [-10, 35].
#[pyfunction]
fn seg_snr(est: Vec<f64>, reference: Vec<f64>) -> PyResult<f64> {
    eval::seg_snr(&est, &reference).map_err(value_err)
}

/// Reads a mono 16-bit WAV; returns (samples, sample_rate).
#[pyfunction]
fn read_wav(path: PathBuf) -> PyResult<(Vec<f64>, u32)> {
    let wf = dsp::read_wav(&path).map_err(io_err)?;
    Ok((wf.samples, wf.sample_rate))
}

/// Writes samples in [-1, 1] as a mono 16-bit WAV.
#[pyfunction]
#[pyo3(signature = (path, samples, sample_rate=16_000))]
fn write_wav(path: PathBuf, samples: Vec<f64>, sample_rate: u32) -> PyResult<()> {
    dsp::write_wav(&path, &Waveform::new(samples, sample_rate)).map_err(io_err)
}

/// Exit threshold parser: a float, "inf", or "0".
#[pyfunction]
fn parse_tau(text: &str) -> PyResult<f64> {
    early_exit::parse_tau(text).map_err(value_err)
}

/// Multi-stage enhancement model with early-exit inference.
#[pyclass]
struct Model {
    weights: ModelWeights,
}

#[pymethods]
impl Model {
    /// Fresh random weights. `streaming_norm` picks the causal
    /// normalizer; turn it off for whole-utterance statistics.
    #[staticmethod]
    #[pyo3(signature = (
        stages=5, bins=161, channels=64, encoder_depth=5, lstm_layers=2,
        lstm_units=256, gate=true, stage_recurrence=true, skip=true,
        streaming_norm=true, seed=0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn build(
        stages: usize,
        bins: usize,
        channels: usize,
        encoder_depth: usize,
        lstm_layers: usize,
        lstm_units: usize,
        gate: bool,
        stage_recurrence: bool,
        skip: bool,
        streaming_norm: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = ModelConfig {
            stages,
            bins,
            channels,
            encoder_depth,
            lstm_layers,
            lstm_units,
            gate_enabled: gate,
            srnn_enabled: stage_recurrence,
            skip_connections: skip,
            norm: if streaming_norm {
                NormMode::Cumulative
            } else {
                NormMode::Offline
            },
        };
        let weights = model::build_model(&cfg, seed).map_err(value_err)?;
        Ok(Self { weights })
    }

    #[staticmethod]
    #[pyo3(signature = (path, streaming_norm=true))]
    fn load(path: PathBuf, streaming_norm: bool) -> PyResult<Self> {
        let mut weights = model::load_weights(&path).map_err(io_err)?;
        weights.config.norm = if streaming_norm {
            NormMode::Cumulative
        } else {
            NormMode::Offline
        };
        Ok(Self { weights })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_weights(&self.weights, &path).map_err(io_err)
    }

    fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    #[getter]
    fn stages(&self) -> usize {
        self.weights.config.stages
    }

    #[getter]
    fn bins(&self) -> usize {
        self.weights.config.bins
    }

    /// Runs stages until the exit statistic drops below `tau`.
    /// Returns (enhanced_samples, exit_stage, per_stage_distances).
    #[pyo3(signature = (samples, tau, win_len=320, hop=160, fft_len=320))]
    fn enhance(
        &self,
        samples: Vec<f64>,
        tau: f64,
        win_len: usize,
        hop: usize,
        fft_len: usize,
    ) -> PyResult<(Vec<f64>, usize, Vec<f64>)> {
        let cfg = stft_config(win_len, hop, fft_len)?;
        if cfg.bins() != self.weights.config.bins {
            return Err(PyValueError::new_err(format!(
                "analysis yields {} bins but the model expects {}",
                cfg.bins(),
                self.weights.config.bins
            )));
        }
        let x = dsp::stft(&samples, &cfg).map_err(value_err)?;
        let (est, rec) = early_exit::run_with_early_exit(&self.weights, &x, tau)
            .map_err(value_err)?;
        let out = dsp::istft(&est, &cfg, samples.len()).map_err(value_err)?;
        Ok((out, rec.exit_stage, rec.dists))
    }

    /// Runs every stage; returns each stage's time-domain estimate.
    #[pyo3(signature = (samples, win_len=320, hop=160, fft_len=320))]
    fn stage_outputs(
        &self,
        samples: Vec<f64>,
        win_len: usize,
        hop: usize,
        fft_len: usize,
    ) -> PyResult<Vec<Vec<f64>>> {
        let cfg = stft_config(win_len, hop, fft_len)?;
        if cfg.bins() != self.weights.config.bins {
            return Err(PyValueError::new_err(format!(
                "analysis yields {} bins but the model expects {}",
                cfg.bins(),
                self.weights.config.bins
            )));
        }
        let x = dsp::stft(&samples, &cfg).map_err(value_err)?;
        let ests = model::forward_all(&self.weights, &x).map_err(value_err)?;
        ests.iter()
            .map(|est| dsp::istft(est, &cfg, samples.len()).map_err(value_err))
            .collect()
    }
}

#[pymodule]
fn plce_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(stft, m)?)?;
    m.add_function(wrap_pyfunction!(istft, m)?)?;
    m.add_function(wrap_pyfunction!(mix_at_snr, m)?)?;
    m.add_function(wrap_pyfunction!(si_sdr, m)?)?;
    m.add_function(wrap_pyfunction!(seg_snr, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(write_wav, m)?)?;
    m.add_function(wrap_pyfunction!(parse_tau, m)?)?;
    m.add_class::<Model>()?;
    m.add("SAMPLE_RATE", dsp::SAMPLE_RATE)?;
    Ok(())
}
