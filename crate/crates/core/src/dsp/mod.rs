//! Signal front end: framing, FFT analysis/synthesis, WAV I/O.
//!
//! Everything here runs in f64; the model consumes casts. Analysis is
//! causal: the signal is zero-padded one hop on the left, so frame `l`
//! never reads past sample `l * hop + win - hop - 1` of the input.

pub mod wav;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::nn::{NnError, Scalar, Tensor};

pub use wav::{dequantize_sample, quantize_sample, read_wav, write_wav};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, thiserror::Error)]
pub enum DspError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad audio file: {0}")]
    Format(String),
    #[error("unsupported audio: {0}")]
    Unsupported(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// 20 ms windows at 16 kHz with 50% overlap and a matching FFT size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub win_len: usize,
    pub hop: usize,
    pub fft_len: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            win_len: 320,
            hop: 160,
            fft_len: 320,
        }
    }
}

impl StftConfig {
    /// One-sided bin count, `fft_len / 2 + 1`.
    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    pub fn validate(&self) -> Result<(), DspError> {
        if self.hop == 0 || self.win_len == 0 {
            return Err(DspError::Invalid("hop and window must be positive".into()));
        }
        if self.win_len > self.fft_len {
            return Err(DspError::Invalid(format!(
                "window {} exceeds FFT size {}",
                self.win_len, self.fft_len
            )));
        }
        if self.hop > self.win_len {
            return Err(DspError::Invalid(format!(
                "hop {} exceeds window {}; frames would miss samples",
                self.hop, self.win_len
            )));
        }
        Ok(())
    }
}

/// Mono audio at a known rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// One-sided complex spectrogram, `[bins, frames]`, frame index contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub bins: usize,
    pub frames: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Spectrogram {
    pub fn zeros(bins: usize, frames: usize) -> Self {
        Self {
            bins,
            frames,
            re: vec![0.0; bins * frames],
            im: vec![0.0; bins * frames],
        }
    }

    pub fn at(&self, k: usize, l: usize) -> (f64, f64) {
        let i = k * self.frames + l;
        (self.re[i], self.im[i])
    }

    /// Total power `sum |X|^2` over all cells.
    pub fn power(&self) -> f64 {
        let mut acc = 0.0;
        for (&r, &i) in self.re.iter().zip(&self.im) {
            acc += r * r + i * i;
        }
        acc
    }

    pub fn numel(&self) -> usize {
        self.bins * self.frames
    }

    /// Stack real and imaginary planes into a `[2, bins, frames]` tensor.
    pub fn to_ri_tensor<E: Scalar>(&self) -> Tensor<E> {
        let mut data = Vec::with_capacity(2 * self.numel());
        data.extend(self.re.iter().map(|&v| E::from_f64(v)));
        data.extend(self.im.iter().map(|&v| E::from_f64(v)));
        Tensor::new(vec![2, self.bins, self.frames], data).expect("sizes agree")
    }

    pub fn from_ri_tensor<E: Scalar>(t: &Tensor<E>) -> Result<Self, NnError> {
        if t.rank() != 3 || t.dim(0) != 2 {
            return Err(NnError::Shape(format!(
                "expected [2, bins, frames], got {:?}",
                t.shape()
            )));
        }
        let (bins, frames) = (t.dim(1), t.dim(2));
        let n = bins * frames;
        let d = t.data();
        Ok(Self {
            bins,
            frames,
            re: d[..n].iter().map(|v| v.to_f64()).collect(),
            im: d[n..].iter().map(|v| v.to_f64()).collect(),
        })
    }
}

/// Periodic Hann window, `w[t] = 0.5 - 0.5 cos(2 pi t / n)`.
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|t| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * t as f64 / n as f64).cos())
        .collect()
}

/// Number of analysis frames for a signal of `len` samples: `ceil(len / hop)`.
pub fn frame_count(len: usize, cfg: &StftConfig) -> usize {
    len.div_ceil(cfg.hop)
}

/// Windowed one-sided STFT with one hop of left zero padding.
pub fn stft(x: &[f64], cfg: &StftConfig) -> Result<Spectrogram, DspError> {
    cfg.validate()?;
    let l_frames = frame_count(x.len(), cfg);
    let bins = cfg.bins();
    let mut out = Spectrogram::zeros(bins, l_frames);
    if l_frames == 0 {
        return Ok(out);
    }
    let padded_len = (l_frames - 1) * cfg.hop + cfg.win_len;
    let mut padded = vec![0.0f64; padded_len];
    padded[cfg.hop..cfg.hop + x.len()].copy_from_slice(x);

    let window = hann_periodic(cfg.win_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_len);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_len];

    for l in 0..l_frames {
        let start = l * cfg.hop;
        for i in 0..cfg.win_len {
            buf[i] = Complex::new(padded[start + i] * window[i], 0.0);
        }
        for b in buf.iter_mut().skip(cfg.win_len) {
            *b = Complex::new(0.0, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            out.re[k * l_frames + l] = buf[k].re;
            out.im[k * l_frames + l] = buf[k].im;
        }
    }
    Ok(out)
}

/// Weighted overlap-add inverse of [`stft`], cropped to `out_len` samples.
///
/// The one-sided spectrum is mirrored conjugate-symmetrically; any
/// imaginary residue in the reconstructed frames is discarded. Division by
/// the summed squared window makes the round trip exact wherever at least
/// one frame covers a sample.
pub fn istft(s: &Spectrogram, cfg: &StftConfig, out_len: usize) -> Result<Vec<f64>, DspError> {
    cfg.validate()?;
    if s.bins != cfg.bins() {
        return Err(DspError::Invalid(format!(
            "spectrogram has {} bins, config wants {}",
            s.bins,
            cfg.bins()
        )));
    }
    if out_len > s.frames * cfg.hop {
        return Err(DspError::Invalid(format!(
            "{} frames cover at most {} samples, asked for {}",
            s.frames,
            s.frames * cfg.hop,
            out_len
        )));
    }
    if s.frames == 0 {
        return Ok(vec![0.0; out_len]);
    }

    let padded_len = (s.frames - 1) * cfg.hop + cfg.win_len;
    let mut acc = vec![0.0f64; padded_len];
    let mut den = vec![0.0f64; padded_len];
    let window = hann_periodic(cfg.win_len);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(cfg.fft_len);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_len];
    let n = cfg.fft_len;
    let scale = 1.0 / n as f64;

    for l in 0..s.frames {
        for k in 0..s.bins {
            buf[k] = Complex::new(s.re[k * s.frames + l], s.im[k * s.frames + l]);
        }
        for k in 1..s.bins {
            let mirror = n - k;
            if mirror >= s.bins {
                buf[mirror] = buf[k].conj();
            }
        }
        ifft.process(&mut buf);
        let start = l * cfg.hop;
        for i in 0..cfg.win_len {
            acc[start + i] += buf[i].re * scale * window[i];
            den[start + i] += window[i] * window[i];
        }
    }

    let mut out = vec![0.0f64; out_len];
    for (t, o) in out.iter_mut().enumerate() {
        let p = cfg.hop + t;
        if den[p] > 0.0 {
            *o = acc[p] / den[p];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn periodic_hann_small_cases() {
        // w[t] = 0.5 - 0.5 cos(2 pi t / n): periodic, so w[0] = 0 and the
        // peak value 1 appears at t = n/2 for even n.
        let w = hann_periodic(4);
        for (a, b) in w.iter().zip([0.0, 0.5, 1.0, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        let w = hann_periodic(8);
        assert!((w[0]).abs() < 1e-15);
        assert!((w[4] - 1.0).abs() < 1e-15);
        for t in 0..8 {
            let want = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * t as f64 / 8.0).cos();
            assert!((w[t] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn frame_count_is_ceil_of_len_over_hop() {
        let cfg = StftConfig::default();
        assert_eq!(frame_count(1, &cfg), 1);
        assert_eq!(frame_count(160, &cfg), 1);
        assert_eq!(frame_count(161, &cfg), 2);
        assert_eq!(frame_count(16000, &cfg), 100);
        assert_eq!(frame_count(16001, &cfg), 101);
    }

    #[test]
    fn stft_shape_and_bins() {
        let cfg = StftConfig::default();
        let x = vec![0.25; 1000];
        let s = stft(&x, &cfg).unwrap();
        assert_eq!(s.bins, 161);
        assert_eq!(s.frames, 1000usize.div_ceil(160));
    }

    #[test]
    fn dc_bin_equals_windowed_frame_sum() {
        // Bin 0 of frame l is sum_t w[t] * x[l*hop - hop + t] by the
        // analysis definition (one hop of left padding).
        let cfg = StftConfig {
            win_len: 8,
            hop: 4,
            fft_len: 8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = stft(&x, &cfg).unwrap();
        let w = hann_periodic(8);
        for l in 0..s.frames {
            let mut want = 0.0;
            for t in 0..8 {
                let idx = (l * 4 + t) as isize - 4;
                if idx >= 0 && (idx as usize) < x.len() {
                    want += w[t] * x[idx as usize];
                }
            }
            let (re, im) = s.at(0, l);
            assert!((re - want).abs() < 1e-12, "frame {l}: {re} vs {want}");
            assert!(im.abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_error_is_tiny() {
        let cfg = StftConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for len in [320usize, 1000, 4321, 16000] {
            let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = stft(&x, &cfg).unwrap();
            let y = istft(&s, &cfg, len).unwrap();
            let max = x
                .iter()
                .zip(&y)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max < 1e-9, "len {len}: max error {max}");
        }
    }

    #[test]
    fn istft_rejects_impossible_lengths_and_bins() {
        let cfg = StftConfig::default();
        let x = vec![0.5; 800];
        let s = stft(&x, &cfg).unwrap();
        assert!(istft(&s, &cfg, s.frames * cfg.hop + 1).is_err());
        let wrong = Spectrogram::zeros(80, 5);
        assert!(istft(&wrong, &cfg, 400).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_geometry() {
        assert!(StftConfig {
            win_len: 320,
            hop: 0,
            fft_len: 320
        }
        .validate()
        .is_err());
        assert!(StftConfig {
            win_len: 400,
            hop: 160,
            fft_len: 320
        }
        .validate()
        .is_err());
        assert!(StftConfig {
            win_len: 320,
            hop: 400,
            fft_len: 320
        }
        .validate()
        .is_err());
        assert!(StftConfig::default().validate().is_ok());
    }

    #[test]
    fn spectrogram_ri_tensor_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = Spectrogram::zeros(5, 4);
        for v in s.re.iter_mut().chain(s.im.iter_mut()) {
            *v = rng.random_range(-1.0..1.0);
        }
        let t = s.to_ri_tensor::<f64>();
        assert_eq!(t.shape(), &[2, 5, 4]);
        let back = Spectrogram::from_ri_tensor(&t).unwrap();
        assert_eq!(back.re, s.re);
        assert_eq!(back.im, s.im);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn stft_is_linear(
            seed in 0u64..1000,
            len in 50usize..600,
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let cfg = StftConfig { win_len: 32, hop: 16, fft_len: 32 };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
            let sx = stft(&x, &cfg).unwrap();
            let sy = stft(&y, &cfg).unwrap();
            let sm = stft(&mix, &cfg).unwrap();
            for i in 0..sm.re.len() {
                let want_re = a * sx.re[i] + b * sy.re[i];
                let want_im = a * sx.im[i] + b * sy.im[i];
                prop_assert!((sm.re[i] - want_re).abs() < 1e-9);
                prop_assert!((sm.im[i] - want_im).abs() < 1e-9);
            }
        }

        #[test]
        fn round_trip_at_any_length(seed in 0u64..1000, len in 1usize..700) {
            let cfg = StftConfig { win_len: 32, hop: 16, fft_len: 32 };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = stft(&x, &cfg).unwrap();
            prop_assert_eq!(s.frames, len.div_ceil(16));
            let y = istft(&s, &cfg, len).unwrap();
            for (u, v) in x.iter().zip(&y) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }
}
