//! Training: SNR-controlled mixing, progressive targets, stage-weighted
//! loss, Adam, and a deterministic epoch loop.
//!
//! Stage `q` of a `Q`-stage model is trained toward the clean signal plus
//! the mixture noise attenuated by `10 * q` dB (exactly clean at stage
//! `Q`), so successive stages chase progressively quieter noise floors.

pub mod manifest;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{stft, DspError, Spectrogram, StftConfig, Waveform};
use crate::model::{build_model, stage_graph, ModelConfig, ModelError, ModelWeights};
use crate::nn::{NnError, Tape, Tensor, Var};

pub use manifest::{read_manifest, resolve_path, write_manifest, ManifestRow};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad data: {0}")]
    Data(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite {what} (epoch {epoch}, step {step})")]
    NonFinite {
        what: String,
        epoch: usize,
        step: usize,
    },
}

/// A clean/noise pairing to be mixed at a target SNR. `seed` fixes the
/// noise segment choice so the mixture is reproducible.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub id: String,
    pub clean: Waveform,
    pub noise: Waveform,
    pub snr_db: f64,
    pub seed: u64,
}

/// Mixing output; `mixture = clean + scaled_noise` exactly.
#[derive(Clone, Debug)]
pub struct MixedPair {
    pub mixture: Vec<f64>,
    pub scaled_noise: Vec<f64>,
    pub gain: f64,
    pub noise_offset: usize,
}

/// Scales a noise segment so that `10 log10(P_clean / P_noise)` equals
/// `snr_db` exactly: `gain = sqrt(P_clean / (P_noise * 10^(snr/10)))`.
/// Longer noise is cropped at a seeded random offset; shorter noise is
/// tiled cyclically from a seeded start.
pub fn mix_at_snr(
    clean: &[f64],
    noise: &[f64],
    snr_db: f64,
    seed: u64,
) -> Result<MixedPair, TrainError> {
    if clean.is_empty() {
        return Err(TrainError::Data("clean signal is empty".into()));
    }
    if noise.is_empty() {
        return Err(TrainError::Data("noise signal is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = clean.len();
    let (segment, noise_offset): (Vec<f64>, usize) = if noise.len() >= n {
        let offset = rng.random_range(0..=noise.len() - n);
        (noise[offset..offset + n].to_vec(), offset)
    } else {
        let offset = rng.random_range(0..noise.len());
        (
            (0..n).map(|i| noise[(offset + i) % noise.len()]).collect(),
            offset,
        )
    };
    let p_clean = clean.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let p_noise = segment.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if p_clean == 0.0 {
        return Err(TrainError::Data("clean signal is silent".into()));
    }
    if p_noise == 0.0 {
        return Err(TrainError::Data("noise segment is silent".into()));
    }
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled_noise: Vec<f64> = segment.iter().map(|v| v * gain).collect();
    let mixture: Vec<f64> = clean
        .iter()
        .zip(&scaled_noise)
        .map(|(c, s)| c + s)
        .collect();
    Ok(MixedPair {
        mixture,
        scaled_noise,
        gain,
        noise_offset,
    })
}

/// Spectrogram targets for every stage: stage `q < Q` keeps the noise at
/// `-10 q` dB relative to the mixture; stage `Q` is exactly clean.
pub fn synth_targets(
    clean: &[f64],
    scaled_noise: &[f64],
    stages: usize,
    cfg: &StftConfig,
) -> Result<Vec<Spectrogram>, TrainError> {
    if clean.len() != scaled_noise.len() {
        return Err(TrainError::Data(format!(
            "clean ({}) and scaled noise ({}) lengths differ",
            clean.len(),
            scaled_noise.len()
        )));
    }
    if stages == 0 {
        return Err(TrainError::Data("stage count must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(stages);
    for q in 1..=stages {
        if q == stages {
            out.push(stft(clean, cfg)?);
        } else {
            let att = 10f64.powf(-(10.0 * q as f64) / 20.0);
            let wave: Vec<f64> = clean
                .iter()
                .zip(scaled_noise)
                .map(|(c, s)| c + s * att)
                .collect();
            out.push(stft(&wave, cfg)?);
        }
    }
    Ok(out)
}

/// Loss weights `q / sum(1..=Q)`; later stages count more.
pub fn stage_weights(stages: usize) -> Vec<f64> {
    let total: usize = (1..=stages).sum();
    (1..=stages).map(|q| q as f64 / total as f64).collect()
}

/// On-tape `sum_q w_q * mean((est_q - target_q)^2)`, the mean taken
/// jointly over both RI planes.
pub fn weighted_loss_on_tape(
    tape: &mut Tape<f32>,
    ests: &[Var],
    tgts: &[Var],
) -> Result<Var, NnError> {
    if ests.is_empty() || ests.len() != tgts.len() {
        return Err(NnError::Invalid(format!(
            "loss wants matching nonempty stage lists, got {} and {}",
            ests.len(),
            tgts.len()
        )));
    }
    let ws = stage_weights(ests.len());
    let mut acc: Option<Var> = None;
    for ((&e, &t), w) in ests.iter().zip(tgts).zip(ws) {
        let d = tape.sub(e, t)?;
        let m = tape.mean_square(d);
        let term = tape.affine(m, w, 0.0);
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("nonempty"))
}

/// f64 reference of the same weighted loss, for reporting and tests.
pub fn weighted_loss(ests: &[Spectrogram], tgts: &[Spectrogram]) -> Result<f64, TrainError> {
    if ests.is_empty() || ests.len() != tgts.len() {
        return Err(TrainError::Data("mismatched stage lists".into()));
    }
    let ws = stage_weights(ests.len());
    let mut total = 0.0;
    for ((e, t), w) in ests.iter().zip(tgts).zip(ws) {
        if e.bins != t.bins || e.frames != t.frames {
            return Err(TrainError::Data("estimate/target shape mismatch".into()));
        }
        let mut acc = 0.0;
        for i in 0..e.re.len() {
            let dr = e.re[i] - t.re[i];
            let di = e.im[i] - t.im[i];
            acc += dr * dr + di * di;
        }
        total += w * acc / (2 * e.numel()) as f64;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, kept in f64.
#[derive(Default)]
pub struct AdamState {
    pub step: u64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update. `lr_scale` multiplies the base rate
/// (the schedule's halvings land here). Rejects non-finite gradients.
pub fn adam_step(
    params: &mut IndexMap<String, Tensor<f32>>,
    grads: &IndexMap<String, Vec<f32>>,
    state: &mut AdamState,
    hp: &AdamParams,
    lr_scale: f64,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let lr = hp.lr * lr_scale;
    for (name, tensor) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| TrainError::Data(format!("no gradient for parameter {name}")))?;
        if g.len() != tensor.numel() {
            return Err(TrainError::Data(format!(
                "gradient for {name} has {} elements, parameter has {}",
                g.len(),
                tensor.numel()
            )));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let mut data = tensor.to_vec();
        for i in 0..g.len() {
            let gi = g[i] as f64;
            if !gi.is_finite() {
                return Err(TrainError::Data(format!(
                    "non-finite gradient in parameter {name}"
                )));
            }
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] = (data[i] as f64 - lr * mhat / (vhat.sqrt() + hp.eps)) as f32;
        }
        *tensor = Tensor::new(tensor.shape().to_vec(), data)?;
    }
    Ok(())
}

/// Multiplier `0.5^halvings`: a halving fires on every third consecutive
/// validation-loss increase, and the streak resets after each trigger.
pub fn lr_multiplier(val_history: &[f64]) -> f64 {
    let mut streak = 0u32;
    let mut halvings = 0i32;
    for w in val_history.windows(2) {
        if w[1] > w[0] {
            streak += 1;
            if streak == 3 {
                halvings += 1;
                streak = 0;
            }
        } else {
            streak = 0;
        }
    }
    0.5f64.powi(halvings)
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub seed: u64,
    pub stft: StftConfig,
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr_scale: f64,
}

pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub epochs: Vec<EpochRecord>,
}

/// STFT inputs and per-stage targets for one utterance, cast once.
struct Prepped {
    x2: Tensor<f32>,
    targets: Vec<Tensor<f32>>,
}

fn prep(example: &TrainExample, cfg: &TrainConfig) -> Result<Prepped, TrainError> {
    if example.clean.sample_rate != example.noise.sample_rate {
        return Err(TrainError::Data(format!(
            "{}: clean is {} Hz but noise is {} Hz",
            example.id, example.clean.sample_rate, example.noise.sample_rate
        )));
    }
    let mixed = mix_at_snr(
        &example.clean.samples,
        &example.noise.samples,
        example.snr_db,
        example.seed,
    )?;
    let x = stft(&mixed.mixture, &cfg.stft)?;
    let targets = synth_targets(
        &example.clean.samples,
        &mixed.scaled_noise,
        cfg.model.stages,
        &cfg.stft,
    )?;
    Ok(Prepped {
        x2: x.to_ri_tensor(),
        targets: targets.iter().map(|t| t.to_ri_tensor()).collect(),
    })
}

/// Builds the full multi-stage graph for one utterance and returns the
/// loss node plus (when `trainable`) the leaf bound to each parameter.
fn utterance_graph(
    tape: &mut Tape<f32>,
    weights: &ModelWeights,
    utt: &Prepped,
    trainable: bool,
) -> Result<(Var, IndexMap<String, Var>), TrainError> {
    let mut vars: IndexMap<String, Var> = IndexMap::with_capacity(weights.params.len());
    for (name, t) in &weights.params {
        let v = if trainable {
            tape.leaf(t.clone())
        } else {
            tape.constant(t.clone())
        };
        vars.insert(name.clone(), v);
    }
    let mut resolve = |_t: &mut Tape<f32>, name: &str| -> Result<Var, ModelError> {
        vars.get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    };
    let x2 = tape.constant(utt.x2.clone());
    let mut prev = x2;
    let mut hidden = None;
    let mut ests = Vec::with_capacity(weights.config.stages);
    for q in 1..=weights.config.stages {
        let sv = stage_graph(tape, &mut resolve, &weights.config, q, x2, prev, hidden)?;
        ests.push(sv.estimate);
        prev = sv.estimate;
        hidden = sv.hidden;
    }
    let tgts: Vec<Var> = utt
        .targets
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let loss = weighted_loss_on_tape(tape, &ests, &tgts)?;
    Ok((loss, vars))
}

/// One optimizer step over a batch: per-utterance backward passes, summed
/// leaf gradients scaled by `1 / batch`, then Adam. Returns the mean
/// utterance loss. Equivalent to a padded-batch mean because gradients are
/// linear in the loss.
fn batch_step(
    weights: &mut ModelWeights,
    batch: &[&Prepped],
    adam: &mut AdamState,
    hp: &AdamParams,
    lr_scale: f64,
    epoch: usize,
    step: usize,
) -> Result<f64, TrainError> {
    let mut grad_acc: IndexMap<String, Vec<f64>> = weights
        .params
        .iter()
        .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
        .collect();
    let mut loss_sum = 0.0;
    for utt in batch {
        let mut tape = Tape::new();
        let (loss, vars) = utterance_graph(&mut tape, weights, utt, true)?;
        let lv = tape.value(loss).data()[0] as f64;
        if !lv.is_finite() {
            return Err(TrainError::NonFinite {
                what: "loss".into(),
                epoch,
                step,
            });
        }
        loss_sum += lv;
        tape.backward(loss)?;
        for (name, var) in &vars {
            if let Some(g) = tape.grad(*var) {
                let acc = grad_acc.get_mut(name).expect("same key set");
                for (a, &v) in acc.iter_mut().zip(g.data()) {
                    *a += v as f64;
                }
            }
        }
    }
    let b = batch.len() as f64;
    let grads: IndexMap<String, Vec<f32>> = grad_acc
        .into_iter()
        .map(|(n, g)| (n, g.into_iter().map(|v| (v / b) as f32).collect()))
        .collect();
    adam_step(&mut weights.params, &grads, adam, hp, lr_scale)?;
    Ok(loss_sum / b)
}

fn dataset_loss(weights: &ModelWeights, utts: &[Prepped]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for utt in utts {
        let mut tape = Tape::new();
        let (loss, _) = utterance_graph(&mut tape, weights, utt, false)?;
        total += tape.value(loss).data()[0] as f64;
    }
    Ok(total / utts.len().max(1) as f64)
}

/// Deterministic training: same config, data, and seed give bit-identical
/// weights. With no validation set, the training set doubles as one.
pub fn train_loop(
    cfg: &TrainConfig,
    train: &[TrainExample],
    val: &[TrainExample],
) -> Result<TrainOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::Data("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::Data("batch size must be >= 1".into()));
    }
    let mut weights = build_model(&cfg.model, cfg.seed)?;
    let train_prepped: Vec<Prepped> = train
        .iter()
        .map(|e| prep(e, cfg))
        .collect::<Result<_, _>>()?;
    let val_prepped: Vec<Prepped> = if val.is_empty() {
        Vec::new()
    } else {
        val.iter().map(|e| prep(e, cfg)).collect::<Result<_, _>>()?
    };
    let val_view: &[Prepped] = if val_prepped.is_empty() {
        &train_prepped
    } else {
        &val_prepped
    };

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut adam = AdamState::new();
    let mut history: Vec<f64> = Vec::new();
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let lr_scale = lr_multiplier(&history);
        let mut order: Vec<usize> = (0..train_prepped.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_weighted = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Prepped> = chunk.iter().map(|&i| &train_prepped[i]).collect();
            let loss = batch_step(
                &mut weights,
                &batch,
                &mut adam,
                &cfg.adam,
                lr_scale,
                epoch,
                step,
            )?;
            loss_weighted += loss * batch.len() as f64;
        }
        let train_loss = loss_weighted / train_prepped.len() as f64;
        let val_loss = dataset_loss(&weights, val_view)?;
        history.push(val_loss);
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr_scale,
        });
    }
    Ok(TrainOutcome {
        weights,
        epochs: records,
    })
}
