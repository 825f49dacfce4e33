//! End-to-end acceptance checks, one per release gate. Each test prints a
//! single line of measured values (visible with `--nocapture`).

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use plce::dsp::{istft, stft, Spectrogram, StftConfig, Waveform, SAMPLE_RATE};
use plce::early_exit::{
    noisy_power_norm, parse_tau, run_with_early_exit, speedup_ratio, stage_distance,
};
use plce::eval::{dist_trace, run_bench, write_bench_csv, write_trace_csv, BenchConfig, BenchItem};
use plce::model::{
    build_model, decoder_out_pad, forward_all, save_weights, ModelConfig, KERNEL_F, PAD_F,
    STRIDE_F,
};
use plce::nn::gradcheck::{check_gradients, GradCheck};
use plce::nn::{conv_out_f, deconv_out_f, Conv2dCfg, Deconv2dCfg, NnError, NormCfg, NormMode};
use plce::nn::{Scalar, Tape, Tensor, Var};
use plce::training::{
    mix_at_snr, synth_targets, train_loop, weighted_loss, weighted_loss_on_tape, AdamParams,
    stage_weights, TrainConfig, TrainExample,
};

/// Toy analysis geometry: 21 bins, enough frames from short signals.
fn toy_stft() -> StftConfig {
    StftConfig {
        win_len: 40,
        hop: 20,
        fft_len: 40,
    }
}

fn toy_config(stages: usize) -> ModelConfig {
    ModelConfig {
        stages,
        bins: 21,
        channels: 4,
        encoder_depth: 2,
        lstm_layers: 1,
        lstm_units: 6,
        ..ModelConfig::default()
    }
}

fn rand_signal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
}

fn rand_spec(bins: usize, frames: usize, rng: &mut ChaCha8Rng) -> Spectrogram {
    let mut s = Spectrogram::zeros(bins, frames);
    for v in s.re.iter_mut().chain(s.im.iter_mut()) {
        *v = rng.random_range(-1.0..1.0);
    }
    s
}

fn specs_equal(a: &Spectrogram, b: &Spectrogram) -> bool {
    a.bins == b.bins && a.frames == b.frames && a.re == b.re && a.im == b.im
}

#[test]
fn sentinel_thresholds_pin_first_and_last_stage() {
    let t0 = Instant::now();
    let stages = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut exits_inf = Vec::new();
    let mut exits_zero = Vec::new();
    for u in 0..20 {
        // Fresh weights every few utterances: the rule must not care.
        let w = build_model(&toy_config(stages), u as u64 % 4).unwrap();
        let x = stft(&rand_signal(800, &mut rng), &toy_stft()).unwrap();
        let (_, rec) = run_with_early_exit(&w, &x, f64::INFINITY).unwrap();
        exits_inf.push(rec.exit_stage);
        let (_, rec) = run_with_early_exit(&w, &x, 0.0).unwrap();
        exits_zero.push(rec.exit_stage);
    }
    let n_first = exits_inf.iter().filter(|&&e| e == 1).count();
    let n_last = exits_zero.iter().filter(|&&e| e == stages).count();
    let s_inf = speedup_ratio(&exits_inf, stages);
    let s_zero = speedup_ratio(&exits_zero, stages);
    let secs = t0.elapsed().as_secs_f64();
    println!(
        "[ 1/11] sentinel thresholds: tau=inf exits at stage 1 on {n_first}/20 \
         (speedup {s_inf:.2}x), tau=0 at stage {stages} on {n_last}/20 (speedup {s_zero:.2}x), \
         {secs:.2}s"
    );
    assert_eq!(n_first, 20);
    assert_eq!(n_last, 20);
    assert_eq!(s_inf, 5.0);
    assert_eq!(s_zero, 1.0);
    assert!(secs < 60.0, "took {secs:.1}s");
}

#[test]
fn early_exit_matches_the_all_stages_oracle_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0usize;
    for trial in 0..200u64 {
        let stages = rng.random_range(1..=5);
        let mut cfg = toy_config(stages);
        cfg.channels = rng.random_range(2..=4);
        cfg.lstm_units = rng.random_range(3..=6);
        cfg.gate_enabled = rng.random_bool(0.5);
        cfg.srnn_enabled = rng.random_bool(0.5);
        cfg.skip_connections = rng.random_bool(0.5);
        let w = build_model(&cfg, trial).unwrap();
        let x = rand_spec(21, rng.random_range(2..8), &mut rng);
        let tau = match rng.random_range(0..4) {
            0 => f64::INFINITY,
            1 => 0.0,
            _ => 10f64.powf(rng.random_range(-4.0..1.0)),
        };

        // Oracle: run every stage, then scan the exit rule over the list.
        let ests = forward_all(&w, &x).unwrap();
        let z = noisy_power_norm(&x);
        let mut prev = &x;
        let mut want_exit = stages;
        for (qi, est) in ests.iter().enumerate() {
            let d = stage_distance(est, prev, z).unwrap();
            prev = est;
            if d < tau {
                want_exit = qi + 1;
                break;
            }
        }

        let (got, rec) = run_with_early_exit(&w, &x, tau).unwrap();
        assert_eq!(rec.exit_stage, want_exit, "trial {trial}, tau {tau}");
        assert!(
            specs_equal(&got, &ests[want_exit - 1]),
            "trial {trial}: output differs from stage {want_exit}"
        );
        checked += 1;
    }
    println!("[ 2/11] early exit vs all-stages oracle: {checked}/200 triples bit-identical");
}

#[test]
fn exit_depth_is_monotone_down_the_threshold_grid() {
    let grid: Vec<f64> = "inf,0.6,0.2,0.08,0.04,0.02,0.01,0"
        .split(',')
        .map(|s| parse_tau(s).unwrap())
        .collect();
    let w = build_model(&toy_config(5), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // Per-utterance exit stages must be non-decreasing as tau shrinks.
    let mut stage_checks = 0usize;
    for _ in 0..50 {
        let x = rand_spec(21, rng.random_range(3..10), &mut rng);
        let mut last = 0usize;
        for &tau in &grid {
            let (_, rec) = run_with_early_exit(&w, &x, tau).unwrap();
            assert!(
                rec.exit_stage >= last,
                "exit went {last} -> {} when tau dropped to {tau}",
                rec.exit_stage
            );
            last = rec.exit_stage;
            stage_checks += 1;
        }
    }

    // Per-SNR speed-up columns of the report must be non-increasing.
    let items: Vec<BenchItem> = (0..9)
        .map(|i| BenchItem {
            id: format!("u{i}"),
            mixture: rand_signal(480, &mut rng),
            clean: rand_signal(480, &mut rng),
            snr_db: [-5.0, 5.0, 15.0][i % 3],
        })
        .collect();
    let bench_cfg = BenchConfig {
        taus: grid.clone(),
        stft: toy_stft(),
        threads: 2,
        ..BenchConfig::default()
    };
    let rows = run_bench(&w, &items, &bench_cfg).unwrap();
    let mut speed_checks = 0usize;
    for snr in [-5.0, 5.0, 15.0] {
        let col: Vec<f64> = grid
            .iter()
            .map(|&tau| {
                rows.iter()
                    .find(|r| r.tau == tau && r.snr_db == snr)
                    .unwrap()
                    .speedup
            })
            .collect();
        for pair in col.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-12,
                "speedup rose {} -> {} at snr {snr}",
                pair[0],
                pair[1]
            );
            speed_checks += 1;
        }
    }
    println!(
        "[ 3/11] threshold grid monotone: {stage_checks} exit-stage checks and \
         {speed_checks} speed-up column checks, 0 violations"
    );
}

#[test]
fn exit_statistics_match_direct_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
    let mut max_z = 0.0f64;
    let mut max_d = 0.0f64;
    let mut max_s = 0.0f64;
    for _ in 0..1000 {
        let bins = rng.random_range(3..12);
        let frames = rng.random_range(2..10);
        let x = rand_spec(bins, frames, &mut rng);
        let prev = rand_spec(bins, frames, &mut rng);
        let cur = rand_spec(bins, frames, &mut rng);

        let n = (bins * frames) as f64;
        let z_want = x
            .re
            .iter()
            .zip(&x.im)
            .map(|(r, i)| r * r + i * i)
            .sum::<f64>()
            / n;
        let z = noisy_power_norm(&x);
        max_z = max_z.max(rel(z, z_want));

        let num = cur
            .re
            .iter()
            .zip(&cur.im)
            .zip(prev.re.iter().zip(&prev.im))
            .map(|((cr, ci), (pr, pi))| (cr - pr) * (cr - pr) + (ci - pi) * (ci - pi))
            .sum::<f64>();
        let d_want = num / (n * z_want);
        let d = stage_distance(&cur, &prev, z).unwrap();
        max_d = max_d.max(rel(d, d_want));

        // Joint rescaling of the noisy input and both estimates is a no-op.
        let s = 10f64.powf(rng.random_range(-3.0..3.0));
        let scale = |sp: &Spectrogram| {
            let mut out = sp.clone();
            for v in out.re.iter_mut().chain(out.im.iter_mut()) {
                *v *= s;
            }
            out
        };
        let d_scaled = stage_distance(&scale(&cur), &scale(&prev), noisy_power_norm(&scale(&x)))
            .unwrap();
        max_s = max_s.max(rel(d, d_scaled));
    }
    println!(
        "[ 4/11] exit statistics vs direct formulas over 1000 spectrograms: \
         max rel err normalizer {max_z:.2e}, distance {max_d:.2e}, scale invariance {max_s:.2e}"
    );
    assert!(max_z <= 1e-9);
    assert!(max_d <= 1e-9);
    assert!(max_s <= 1e-9);
}

#[test]
fn analysis_synthesis_round_trip_is_transparent() {
    let cfg = StftConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut max_interior = 0.0f64;
    let mut max_full = 0.0f64;
    for _ in 0..100 {
        let x = rand_signal(SAMPLE_RATE as usize, &mut rng);
        let s = stft(&x, &cfg).unwrap();
        let y = istft(&s, &cfg, x.len()).unwrap();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let diff: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let lo = cfg.win_len;
        let hi = x.len() - cfg.win_len;
        max_interior = max_interior.max(norm(&diff[lo..hi]) / norm(&x[lo..hi]));
        max_full = max_full.max(norm(&diff) / norm(&x));
    }
    println!(
        "[ 5/11] analysis/synthesis round trip on 100 one-second signals: \
         max rel err interior {max_interior:.2e}, full {max_full:.2e}"
    );
    assert!(max_interior < 1e-6);
    assert!(max_full < 1e-6);
}

fn rand_tensor<E: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64_slice(shape, &data).unwrap()
}

/// Keeps every component away from a kink (|x| >= 0.05).
fn rand_tensor_off_zero<E: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_f64_slice(shape, &data).unwrap()
}

struct BatteryScore {
    ops: usize,
    max32: f64,
    max64: f64,
}

impl BatteryScore {
    fn new() -> Self {
        Self {
            ops: 0,
            max32: 0.0,
            max64: 0.0,
        }
    }
}

fn run_battery<B32, B64>(
    score: &mut BatteryScore,
    b32: B32,
    b64: B64,
    shapes: &[&[usize]],
    off_zero: bool,
) where
    B32: Fn(&mut Tape<f32>, &[Var]) -> Result<Var, NnError> + Copy,
    B64: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NnError> + Copy,
{
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let inputs32: Vec<Tensor<f32>> = shapes
            .iter()
            .map(|s| {
                if off_zero {
                    rand_tensor_off_zero(s, &mut rng)
                } else {
                    rand_tensor(s, &mut rng)
                }
            })
            .collect();
        let inputs64: Vec<Tensor<f64>> = inputs32
            .iter()
            .map(|t| Tensor::from_f64_slice(t.shape(), &t.to_f64_vec()).unwrap())
            .collect();
        let cfg = GradCheck::for_f32();
        let rep = check_gradients(b32, &inputs32, &cfg).unwrap();
        rep.assert_below(cfg.tol);
        score.max32 = score.max32.max(rep.max_err);
        let cfg = GradCheck::for_f64();
        let rep = check_gradients(b64, &inputs64, &cfg).unwrap();
        rep.assert_below(cfg.tol);
        score.max64 = score.max64.max(rep.max_err);
    }
    score.ops += 1;
}

macro_rules! battery {
    ($score:expr, $build:expr, $shapes:expr, $off_zero:expr) => {
        run_battery($score, $build, $build, $shapes, $off_zero)
    };
}

#[test]
fn every_trainable_layer_passes_finite_difference_checks() {
    let mut score = BatteryScore::new();
    let s = &mut score;

    battery!(
        s,
        |t: &mut Tape<_>, v: &[Var]| {
            let p = t.prelu(v[0], v[1])?;
            Ok(t.mean_square(p))
        },
        &[&[3, 4][..], &[1]],
        true
    );
    battery!(
        s,
        |t: &mut Tape<_>, v: &[Var]| {
            let y = t.linear(v[0], v[1], v[2])?;
            Ok(t.mean_square(y))
        },
        &[&[3, 4][..], &[2, 3], &[2]],
        false
    );
    let conv_cfg = Conv2dCfg {
        stride_f: STRIDE_F,
        pad_f: PAD_F,
    };
    battery!(
        s,
        move |t: &mut Tape<_>, v: &[Var]| {
            let y = t.conv2d(v[0], v[1], v[2], conv_cfg)?;
            Ok(t.mean_square(y))
        },
        &[&[2, 5, 3][..], &[3, 2, 2, 3], &[3]],
        false
    );
    let deconv_cfg = Deconv2dCfg {
        stride_f: STRIDE_F,
        pad_f: PAD_F,
        out_pad_f: 1,
    };
    battery!(
        s,
        move |t: &mut Tape<_>, v: &[Var]| {
            let y = t.deconv2d(v[0], v[1], v[2], deconv_cfg)?;
            Ok(t.mean_square(y))
        },
        &[&[2, 3, 3][..], &[2, 3, 2, 3], &[3]],
        false
    );
    battery!(
        s,
        move |t: &mut Tape<_>, v: &[Var]| {
            let y = t.glu_conv2d(v[0], v[1], v[2], v[3], v[4], conv_cfg)?;
            Ok(t.mean_square(y))
        },
        &[&[2, 5, 3][..], &[2, 2, 2, 3], &[2], &[2, 2, 2, 3], &[2]],
        false
    );
    for mode in [NormMode::Offline, NormMode::Cumulative] {
        let norm_cfg = NormCfg { mode, eps: 1e-5 };
        battery!(
            s,
            move |t: &mut Tape<_>, v: &[Var]| {
                let y = t.instance_norm(v[0], v[1], v[2], norm_cfg)?;
                Ok(t.mean_square(y))
            },
            &[&[2, 3, 4][..], &[2], &[2]],
            false
        );
    }
    battery!(
        s,
        |t: &mut Tape<_>, v: &[Var]| {
            let y = t.lstm(v[0], v[1], v[2], v[3], v[4], v[5])?;
            Ok(t.mean_square(y))
        },
        &[&[3, 4][..], &[8, 3], &[8, 2], &[8], &[2], &[2]],
        false
    );

    // Multi-stage training loss: the production graph in f32, the same
    // composition rebuilt op-by-op in f64.
    let loss_shapes: &[&[usize]] = &[&[2, 3, 4], &[2, 3, 4], &[2, 3, 4], &[2, 3, 4]];
    run_battery(
        s,
        |t: &mut Tape<f32>, v: &[Var]| weighted_loss_on_tape(t, &v[..2], &v[2..]),
        |t: &mut Tape<f64>, v: &[Var]| {
            let ws = stage_weights(2);
            let mut total: Option<Var> = None;
            for q in 0..2 {
                let d = t.sub(v[q], v[q + 2])?;
                let ms = t.mean_square(d);
                let term = t.affine(ms, ws[q], 0.0);
                total = Some(match total {
                    None => term,
                    Some(acc) => t.add(acc, term)?,
                });
            }
            Ok(total.unwrap())
        },
        loss_shapes,
        false,
    );

    println!(
        "[ 6/11] finite-difference checks: {} ops x 100 seeds x 2 dtypes, \
         max rel err {:.2e} (f32, tol 1e-3) / {:.2e} (f64, tol 1e-6)",
        score.ops, score.max32, score.max64
    );
    assert_eq!(score.ops, 9);
}

#[test]
fn streaming_mode_outputs_never_depend_on_future_frames() {
    let mut cfg = toy_config(3);
    cfg.norm = NormMode::Cumulative;
    let w = build_model(&cfg, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let frames = 10;
    let mut trials = 0usize;
    for _ in 0..20 {
        let x = rand_spec(21, frames, &mut rng);
        let base = forward_all(&w, &x).unwrap();
        let t = rng.random_range(1..frames);
        let mut bumped = x.clone();
        for k in 0..bumped.bins {
            let i = k * frames + t;
            bumped.re[i] += rng.random_range(0.1..1.0);
            bumped.im[i] -= rng.random_range(0.1..1.0);
        }
        let got = forward_all(&w, &bumped).unwrap();
        for (qi, (a, b)) in base.iter().zip(&got).enumerate() {
            for k in 0..a.bins {
                for l in 0..t {
                    let i = k * frames + l;
                    assert_eq!(
                        (a.re[i], a.im[i]),
                        (b.re[i], b.im[i]),
                        "stage {} frame {l} (< perturbed frame {t}) moved",
                        qi + 1
                    );
                }
            }
        }
        trials += 1;
    }
    println!(
        "[ 7/11] streaming causality: {trials}/20 trials, every pre-perturbation \
         frame bit-exact at all 3 stages"
    );
}

#[test]
fn reference_scale_shapes_and_parameter_ordering_hold() {
    let full = ModelConfig::default();
    let chain = full.encoder_chain().unwrap();
    assert_eq!(chain, vec![161, 81, 41, 21, 11, 6]);
    // Each decoder block exactly undoes its encoder twin.
    for pair in chain.windows(2) {
        let (f_in, f_out) = (pair[0], pair[1]);
        assert_eq!(conv_out_f(f_in, KERNEL_F, STRIDE_F, PAD_F).unwrap(), f_out);
        let op = decoder_out_pad(f_out, f_in).unwrap();
        let dc = Deconv2dCfg {
            stride_f: STRIDE_F,
            pad_f: PAD_F,
            out_pad_f: op,
        };
        assert_eq!(deconv_out_f(f_out, KERNEL_F, &dc).unwrap(), f_in);
    }

    let w = build_model(&full, 0).unwrap();
    w.verify_shapes().unwrap();
    let frames = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_spec(161, frames, &mut rng);
    let ests = forward_all(&w, &x).unwrap();
    assert_eq!(ests.len(), 5);
    for est in &ests {
        assert_eq!((est.bins, est.frames), (161, frames));
        let t: Tensor<f32> = est.to_ri_tensor();
        assert_eq!(t.shape(), &[2, 161, frames]);
    }

    let count = |gate: bool, srnn: bool| {
        let cfg = ModelConfig {
            gate_enabled: gate,
            srnn_enabled: srnn,
            ..ModelConfig::default()
        };
        build_model(&cfg, 0).unwrap().param_count()
    };
    let n_full = count(true, true);
    let n_gate = count(true, false);
    let n_srnn = count(false, true);
    let n_none = count(false, false);
    println!(
        "[ 8/11] reference scale: chain 161-81-41-21-11-6, 5 outputs of (2,161,{frames}); \
         params full {:.2}M > gate-only {:.2}M > recurrence-only {:.2}M > neither {:.2}M \
         (reference ordering 9.61M > 9.09M > 7.52M > 7.18M)",
        n_full as f64 / 1e6,
        n_gate as f64 / 1e6,
        n_srnn as f64 / 1e6,
        n_none as f64 / 1e6
    );
    assert!(n_full > n_gate && n_gate > n_srnn && n_srnn > n_none);
}

#[test]
fn intermediate_targets_hit_their_snr_ladder() {
    let cfg = StftConfig::default();
    let stages = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut max_dev_db = 0.0f64;
    for trial in 0..100u64 {
        let n = rng.random_range(1600..3200);
        let clean = rand_signal(n, &mut rng);
        let noise = rand_signal(n + 101, &mut rng);
        let snr = rng.random_range(-5.0..30.0);
        let mixed = mix_at_snr(&clean, &noise, snr, trial).unwrap();
        let targets = synth_targets(&clean, &mixed.scaled_noise, stages, &cfg).unwrap();
        let p_clean: f64 = clean.iter().map(|v| v * v).sum();
        for (qi, target) in targets.iter().enumerate().take(stages - 1) {
            let sig = istft(target, &cfg, n).unwrap();
            let p_resid: f64 = sig
                .iter()
                .zip(&clean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let measured = 10.0 * (p_clean / p_resid).log10();
            let prescribed = snr + 10.0 * (qi + 1) as f64;
            max_dev_db = max_dev_db.max((measured - prescribed).abs());
        }
        // Final target is the clean signal itself.
        let last = istft(&targets[stages - 1], &cfg, n).unwrap();
        let p_err: f64 = last
            .iter()
            .zip(&clean)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!(p_err / p_clean < 1e-18);
    }
    println!(
        "[ 9/11] target ladder on 100 mixtures x {} intermediate stages: \
         max deviation {max_dev_db:.2e} dB from the +10 dB/stage ramp",
        stages - 1
    );
    assert!(max_dev_db <= 1e-6);
}

fn toy_train_examples() -> Vec<TrainExample> {
    let n = 500;
    let tone = |freqs: &[f64], amp: f64, phase: f64| -> Vec<f64> {
        (0..n)
            .map(|i| {
                freqs
                    .iter()
                    .map(|f| {
                        amp * (2.0 * std::f64::consts::PI * f * i as f64 / SAMPLE_RATE as f64
                            + phase)
                            .sin()
                    })
                    .sum()
            })
            .collect()
    };
    vec![
        TrainExample {
            id: "a".into(),
            clean: Waveform::new(tone(&[350.0, 700.0], 0.3, 0.0), SAMPLE_RATE),
            noise: Waveform::new(tone(&[1900.0, 2300.0], 0.25, 0.4), SAMPLE_RATE),
            snr_db: 5.0,
            seed: 1,
        },
        TrainExample {
            id: "b".into(),
            clean: Waveform::new(tone(&[250.0, 500.0], 0.35, 0.2), SAMPLE_RATE),
            noise: Waveform::new(tone(&[1500.0, 2700.0], 0.3, 0.9), SAMPLE_RATE),
            snr_db: 10.0,
            seed: 2,
        },
    ]
}

#[test]
fn toy_training_converges_and_orders_stage_distances() {
    let t0 = Instant::now();
    let examples = toy_train_examples();
    let cfg = TrainConfig {
        model: ModelConfig {
            stages: 4,
            bins: 21,
            channels: 8,
            encoder_depth: 2,
            lstm_layers: 1,
            lstm_units: 16,
            ..ModelConfig::default()
        },
        epochs: 500, // batch == dataset, so one step per epoch
        batch_size: 2,
        adam: AdamParams {
            lr: 5e-3,
            ..AdamParams::default()
        },
        seed: 5,
        stft: toy_stft(),
    };

    // Loss of a weight set over the dataset, via the public pipeline.
    let loss_of = |w: &plce::model::ModelWeights| -> f64 {
        let mut total = 0.0;
        for ex in &examples {
            let mixed = mix_at_snr(&ex.clean.samples, &ex.noise.samples, ex.snr_db, ex.seed)
                .unwrap();
            let targets =
                synth_targets(&ex.clean.samples, &mixed.scaled_noise, 4, &cfg.stft).unwrap();
            let x = stft(&mixed.mixture, &cfg.stft).unwrap();
            let ests = forward_all(w, &x).unwrap();
            total += weighted_loss(&ests, &targets).unwrap();
        }
        total / examples.len() as f64
    };

    let initial = loss_of(&build_model(&cfg.model, cfg.seed).unwrap());
    let outcome = train_loop(&cfg, &examples, &[]).unwrap();
    let final_loss = loss_of(&outcome.weights);
    let drop = 1.0 - final_loss / initial;

    // Stage distances of the trained model, grouped by SNR label.
    let items: Vec<BenchItem> = examples
        .iter()
        .map(|ex| {
            let mixed = mix_at_snr(&ex.clean.samples, &ex.noise.samples, ex.snr_db, ex.seed)
                .unwrap();
            BenchItem {
                id: ex.id.clone(),
                mixture: mixed.mixture,
                clean: ex.clean.samples.clone(),
                snr_db: ex.snr_db,
            }
        })
        .collect();
    let rows = dist_trace(&outcome.weights, &items, &cfg.stft).unwrap();
    let mut transitions = 0usize;
    let mut ordered = 0usize;
    for snr in [5.0, 10.0] {
        let col: Vec<f64> = rows
            .iter()
            .filter(|r| r.snr_db == snr)
            .map(|r| r.mean_dist)
            .collect();
        assert_eq!(col.len(), 4);
        for pair in col.windows(2) {
            transitions += 1;
            if pair[1] <= pair[0] {
                ordered += 1;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    println!(
        "[10/11] toy training (500 steps): loss {initial:.5} -> {final_loss:.5} \
         ({:.1}% drop), stage distance non-increasing on {ordered}/{transitions} \
         transitions, {secs:.1}s",
        drop * 100.0
    );
    assert!(drop >= 0.9, "loss fell only {:.1}%", drop * 100.0);
    assert!(
        ordered as f64 >= 0.8 * transitions as f64,
        "only {ordered}/{transitions} ordered"
    );
    assert!(secs < 600.0, "took {secs:.1}s");
}

#[test]
fn identical_seeds_reproduce_identical_artifacts() {
    let examples = toy_train_examples();
    let cfg = TrainConfig {
        model: toy_config(2),
        epochs: 3,
        batch_size: 2,
        adam: AdamParams::default(),
        seed: 9,
        stft: toy_stft(),
    };
    let dir = tempfile::tempdir().unwrap();

    // Weight files.
    let mut wav_bytes: Vec<Vec<u8>> = Vec::new();
    let mut weight_bytes: Vec<Vec<u8>> = Vec::new();
    let mut report_bytes: Vec<Vec<u8>> = Vec::new();
    let mut trace_bytes: Vec<Vec<u8>> = Vec::new();
    for run in 0..2 {
        let outcome = train_loop(&cfg, &examples, &[]).unwrap();
        let wpath = dir.path().join(format!("weights{run}.bin"));
        save_weights(&outcome.weights, &wpath).unwrap();
        weight_bytes.push(std::fs::read(&wpath).unwrap());

        let mixed = mix_at_snr(
            &examples[0].clean.samples,
            &examples[0].noise.samples,
            examples[0].snr_db,
            examples[0].seed,
        )
        .unwrap();
        let x = stft(&mixed.mixture, &cfg.stft).unwrap();
        let (est, _) = run_with_early_exit(&outcome.weights, &x, 0.04).unwrap();
        let y = istft(&est, &cfg.stft, mixed.mixture.len()).unwrap();
        let apath = dir.path().join(format!("enhanced{run}.wav"));
        plce::dsp::write_wav(&apath, &Waveform::new(y, SAMPLE_RATE)).unwrap();
        wav_bytes.push(std::fs::read(&apath).unwrap());

        let items: Vec<BenchItem> = examples
            .iter()
            .map(|ex| {
                let m = mix_at_snr(&ex.clean.samples, &ex.noise.samples, ex.snr_db, ex.seed)
                    .unwrap();
                BenchItem {
                    id: ex.id.clone(),
                    mixture: m.mixture,
                    clean: ex.clean.samples.clone(),
                    snr_db: ex.snr_db,
                }
            })
            .collect();
        let bench_cfg = BenchConfig {
            taus: vec![f64::INFINITY, 0.04, 0.0],
            stft: cfg.stft.clone(),
            speedup_total: true,
            threads: 2,
            ..BenchConfig::default()
        };
        let rows = run_bench(&outcome.weights, &items, &bench_cfg).unwrap();
        let mut buf = Vec::new();
        write_bench_csv(&mut buf, &rows, &bench_cfg).unwrap();
        report_bytes.push(buf);

        let trows = dist_trace(&outcome.weights, &items, &cfg.stft).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &trows).unwrap();
        trace_bytes.push(buf);
    }
    assert_eq!(weight_bytes[0], weight_bytes[1], "weight files differ");
    assert_eq!(wav_bytes[0], wav_bytes[1], "enhanced audio differs");
    assert_eq!(report_bytes[0], report_bytes[1], "benchmark reports differ");
    assert_eq!(trace_bytes[0], trace_bytes[1], "trace reports differ");
    println!(
        "[11/11] determinism: weight files ({} B), enhanced audio ({} B), and \
         reports ({} B + {} B) byte-identical across reruns",
        weight_bytes[0].len(),
        wav_bytes[0].len(),
        report_bytes[0].len(),
        trace_bytes[0].len()
    );
}
