use super::scalar::Scalar;
use super::tensor::Tensor;
use super::NnError;

/// Frequency geometry for [`crate::nn::Tape::conv2d`]. Time is always
/// stride 1 with causal padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dCfg {
    pub stride_f: usize,
    pub pad_f: usize,
}

/// Frequency geometry for [`crate::nn::Tape::deconv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Deconv2dCfg {
    pub stride_f: usize,
    pub pad_f: usize,
    pub out_pad_f: usize,
}

/// Output bins of a strided conv: `floor((f + 2*pad - kf) / stride) + 1`.
pub fn conv_out_f(f: usize, kf: usize, stride_f: usize, pad_f: usize) -> Result<usize, NnError> {
    let padded = f + 2 * pad_f;
    if stride_f == 0 {
        return Err(NnError::Invalid("conv: stride_f must be >= 1".into()));
    }
    if padded < kf {
        return Err(NnError::Shape(format!(
            "conv: kernel {kf} exceeds padded extent {padded}"
        )));
    }
    Ok((padded - kf) / stride_f + 1)
}

/// Output bins of a transposed conv:
/// `(f - 1) * stride - 2*pad + kf + out_pad`.
pub fn deconv_out_f(f: usize, kf: usize, cfg: &Deconv2dCfg) -> Result<usize, NnError> {
    if cfg.stride_f == 0 {
        return Err(NnError::Invalid("deconv: stride_f must be >= 1".into()));
    }
    if f == 0 {
        return Err(NnError::Shape("deconv: empty frequency axis".into()));
    }
    let raw = (f - 1) * cfg.stride_f + kf + cfg.out_pad_f;
    if raw <= 2 * cfg.pad_f {
        return Err(NnError::Shape(format!(
            "deconv: padding {} swallows the whole output ({raw} bins before cropping)",
            cfg.pad_f
        )));
    }
    Ok(raw - 2 * cfg.pad_f)
}

fn conv_check<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
    in_axis: usize,
    out_axis: usize,
) -> Result<(), NnError> {
    if x.rank() != 3 || w.rank() != 4 || b.rank() != 1 {
        return Err(NnError::Shape(format!(
            "conv: want x [C,F,T], w rank 4, b rank 1; got {:?}, {:?}, {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    if w.dim(in_axis) != x.dim(0) {
        return Err(NnError::Shape(format!(
            "conv: input channels {} do not match weight {:?}",
            x.dim(0),
            w.shape()
        )));
    }
    if b.dim(0) != w.dim(out_axis) {
        return Err(NnError::Shape(format!(
            "conv: bias {:?} does not match weight {:?}",
            b.shape(),
            w.shape()
        )));
    }
    Ok(())
}

/// `x [C_in, F, T]`, `w [C_out, C_in, kT, kF]`, `b [C_out]` -> `[C_out, F', T]`.
///
/// Tap `dt` reads frame `t - (kT - 1 - dt)`; the highest tap sees the current
/// frame, so output frame `t` never touches input frames past `t`.
pub(crate) fn conv2d_fwd<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
    cfg: &Conv2dCfg,
) -> Result<Tensor<E>, NnError> {
    conv_check(x, w, b, 1, 0)?;
    let (c_in, f, t) = (x.dim(0), x.dim(1), x.dim(2));
    let (c_out, kt, kf) = (w.dim(0), w.dim(2), w.dim(3));
    let f_out = conv_out_f(f, kf, cfg.stride_f, cfg.pad_f)?;
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut out = vec![E::ZERO; c_out * f_out * t];
    let mut row = vec![0.0f64; t];
    for co in 0..c_out {
        let bias = bd[co].to_f64();
        for fo in 0..f_out {
            row.iter_mut().for_each(|v| *v = bias);
            for ci in 0..c_in {
                for df in 0..kf {
                    let fi = (fo * cfg.stride_f + df) as isize - cfg.pad_f as isize;
                    if fi < 0 || fi >= f as isize {
                        continue;
                    }
                    let xrow = &xd[(ci * f + fi as usize) * t..][..t];
                    for dt in 0..kt {
                        let wv = wd[((co * c_in + ci) * kt + dt) * kf + df].to_f64();
                        let shift = kt - 1 - dt;
                        for ti in shift..t {
                            row[ti] += wv * xrow[ti - shift].to_f64();
                        }
                    }
                }
            }
            let orow = &mut out[(co * f_out + fo) * t..][..t];
            for (o, &v) in orow.iter_mut().zip(row.iter()) {
                *o = E::from_f64(v);
            }
        }
    }
    Tensor::new(vec![c_out, f_out, t], out)
}

type ConvGrads<E> = (Option<Vec<E>>, Option<Vec<E>>, Option<Vec<E>>);

pub(crate) fn conv2d_bwd<E: Scalar>(
    go: &[E],
    x: &Tensor<E>,
    w: &Tensor<E>,
    cfg: &Conv2dCfg,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> ConvGrads<E> {
    let (c_in, f, t) = (x.dim(0), x.dim(1), x.dim(2));
    let (c_out, kt, kf) = (w.dim(0), w.dim(2), w.dim(3));
    let f_out = conv_out_f(f, kf, cfg.stride_f, cfg.pad_f).expect("checked in forward");
    debug_assert_eq!(go.len(), c_out * f_out * t);
    let xd = x.data();
    let wd = w.data();

    let mut dx = if need_x { Some(vec![0.0f64; c_in * f * t]) } else { None };
    let mut dw = if need_w { Some(vec![0.0f64; wd.len()]) } else { None };
    let mut db = if need_b { Some(vec![0.0f64; c_out]) } else { None };

    for co in 0..c_out {
        for fo in 0..f_out {
            let grow = &go[(co * f_out + fo) * t..][..t];
            if let Some(db) = db.as_mut() {
                let mut acc = 0.0f64;
                for g in grow {
                    acc += g.to_f64();
                }
                db[co] += acc;
            }
            if dx.is_none() && dw.is_none() {
                continue;
            }
            for ci in 0..c_in {
                for df in 0..kf {
                    let fi = (fo * cfg.stride_f + df) as isize - cfg.pad_f as isize;
                    if fi < 0 || fi >= f as isize {
                        continue;
                    }
                    let base = (ci * f + fi as usize) * t;
                    for dt in 0..kt {
                        let widx = ((co * c_in + ci) * kt + dt) * kf + df;
                        let shift = kt - 1 - dt;
                        if let Some(dx) = dx.as_mut() {
                            let wv = wd[widx].to_f64();
                            let dst = &mut dx[base..base + t];
                            for ti in shift..t {
                                dst[ti - shift] += wv * grow[ti].to_f64();
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            let xrow = &xd[base..base + t];
                            let mut acc = 0.0f64;
                            for ti in shift..t {
                                acc += grow[ti].to_f64() * xrow[ti - shift].to_f64();
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (
        dx.map(|v| v.into_iter().map(E::from_f64).collect()),
        dw.map(|v| v.into_iter().map(E::from_f64).collect()),
        db.map(|v| v.into_iter().map(E::from_f64).collect()),
    )
}

/// `x [C_in, F, T]`, `w [C_in, C_out, kT, kF]`, `b [C_out]` -> `[C_out, F', T]`.
///
/// Transposed in frequency (`f_out = f_in * stride - pad + df`), causal in
/// time: input frame `t` contributes to output frames `t..t + kT`, and the
/// `kT - 1` frames that would spill past `T - 1` are dropped.
pub(crate) fn deconv2d_fwd<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
    cfg: &Deconv2dCfg,
) -> Result<Tensor<E>, NnError> {
    conv_check(x, w, b, 0, 1)?;
    let (c_in, f, t) = (x.dim(0), x.dim(1), x.dim(2));
    let (c_out, kt, kf) = (w.dim(1), w.dim(2), w.dim(3));
    let f_out = deconv_out_f(f, kf, cfg)?;
    let xd = x.data();
    let wd = w.data();
    let mut acc = vec![0.0f64; c_out * f_out * t];
    for ci in 0..c_in {
        for fi in 0..f {
            let xrow = &xd[(ci * f + fi) * t..][..t];
            for co in 0..c_out {
                for df in 0..kf {
                    let fo = (fi * cfg.stride_f + df) as isize - cfg.pad_f as isize;
                    if fo < 0 || fo >= f_out as isize {
                        continue;
                    }
                    let arow = &mut acc[(co * f_out + fo as usize) * t..][..t];
                    for dt in 0..kt {
                        let wv = wd[((ci * c_out + co) * kt + dt) * kf + df].to_f64();
                        for ti in 0..t.saturating_sub(dt) {
                            arow[ti + dt] += wv * xrow[ti].to_f64();
                        }
                    }
                }
            }
        }
    }
    let bd = b.data();
    let mut out = vec![E::ZERO; acc.len()];
    for co in 0..c_out {
        let bias = bd[co].to_f64();
        let plane = &acc[co * f_out * t..][..f_out * t];
        let dst = &mut out[co * f_out * t..][..f_out * t];
        for (o, &v) in dst.iter_mut().zip(plane) {
            *o = E::from_f64(v + bias);
        }
    }
    Tensor::new(vec![c_out, f_out, t], out)
}

pub(crate) fn deconv2d_bwd<E: Scalar>(
    go: &[E],
    x: &Tensor<E>,
    w: &Tensor<E>,
    cfg: &Deconv2dCfg,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> ConvGrads<E> {
    let (c_in, f, t) = (x.dim(0), x.dim(1), x.dim(2));
    let (c_out, kt, kf) = (w.dim(1), w.dim(2), w.dim(3));
    let f_out = deconv_out_f(f, kf, cfg).expect("checked in forward");
    debug_assert_eq!(go.len(), c_out * f_out * t);
    let xd = x.data();
    let wd = w.data();

    let mut dx = if need_x { Some(vec![0.0f64; c_in * f * t]) } else { None };
    let mut dw = if need_w { Some(vec![0.0f64; wd.len()]) } else { None };

    if dx.is_some() || dw.is_some() {
        for ci in 0..c_in {
            for fi in 0..f {
                let xrow = &xd[(ci * f + fi) * t..][..t];
                let dxbase = (ci * f + fi) * t;
                for co in 0..c_out {
                    for df in 0..kf {
                        let fo = (fi * cfg.stride_f + df) as isize - cfg.pad_f as isize;
                        if fo < 0 || fo >= f_out as isize {
                            continue;
                        }
                        let grow = &go[(co * f_out + fo as usize) * t..][..t];
                        for dt in 0..kt {
                            let widx = ((ci * c_out + co) * kt + dt) * kf + df;
                            if let Some(dx) = dx.as_mut() {
                                let wv = wd[widx].to_f64();
                                let dst = &mut dx[dxbase..dxbase + t];
                                for ti in 0..t.saturating_sub(dt) {
                                    dst[ti] += wv * grow[ti + dt].to_f64();
                                }
                            }
                            if let Some(dw) = dw.as_mut() {
                                let mut acc = 0.0f64;
                                for ti in 0..t.saturating_sub(dt) {
                                    acc += xrow[ti].to_f64() * grow[ti + dt].to_f64();
                                }
                                dw[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
    }

    let db = if need_b {
        let mut db = vec![0.0f64; c_out];
        for co in 0..c_out {
            let plane = &go[co * f_out * t..][..f_out * t];
            let mut acc = 0.0f64;
            for g in plane {
                acc += g.to_f64();
            }
            db[co] = acc;
        }
        Some(db)
    } else {
        None
    };

    (
        dx.map(|v| v.into_iter().map(E::from_f64).collect()),
        dw.map(|v| v.into_iter().map(E::from_f64).collect()),
        db.map(|v| v.into_iter().map(E::from_f64).collect()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::from_f64_slice(shape, &data).unwrap()
    }

    /// Textbook conv oracle: materialize the zero-padded input (past-side
    /// time pad) and gather.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, cfg: &Conv2dCfg) -> Tensor<f64> {
        let (c_in, f, t) = (x.dim(0), x.dim(1), x.dim(2));
        let (c_out, kt, kf) = (w.dim(0), w.dim(2), w.dim(3));
        let (fp, tp) = (f + 2 * cfg.pad_f, t + kt - 1);
        let mut padded = vec![0.0; c_in * fp * tp];
        for c in 0..c_in {
            for fi in 0..f {
                for ti in 0..t {
                    padded[(c * fp + fi + cfg.pad_f) * tp + ti + kt - 1] =
                        x.data()[(c * f + fi) * t + ti];
                }
            }
        }
        let f_out = (fp - kf) / cfg.stride_f + 1;
        let mut out = vec![0.0; c_out * f_out * t];
        for co in 0..c_out {
            for fo in 0..f_out {
                for to in 0..t {
                    let mut acc = b.data()[co];
                    for ci in 0..c_in {
                        for dt in 0..kt {
                            for df in 0..kf {
                                acc += w.data()[((co * c_in + ci) * kt + dt) * kf + df]
                                    * padded[(ci * fp + fo * cfg.stride_f + df) * tp + to + dt];
                            }
                        }
                    }
                    out[(co * f_out + fo) * t + to] = acc;
                }
            }
        }
        Tensor::new(vec![c_out, f_out, t], out).unwrap()
    }

    /// Scatter oracle: paint the full upsampled plane, then crop `pad_f`
    /// rows off the front and the time tail past `T - 1`.
    fn deconv_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        cfg: &Deconv2dCfg,
    ) -> Tensor<f64> {
        let (c_in, f, t) = (x.dim(0), x.dim(1), x.dim(2));
        let (c_out, kt, kf) = (w.dim(1), w.dim(2), w.dim(3));
        let full_f = (f - 1) * cfg.stride_f + kf + cfg.out_pad_f;
        let full_t = t + kt - 1;
        let mut full = vec![0.0; c_out * full_f * full_t];
        for ci in 0..c_in {
            for fi in 0..f {
                for ti in 0..t {
                    let xv = x.data()[(ci * f + fi) * t + ti];
                    for co in 0..c_out {
                        for dt in 0..kt {
                            for df in 0..kf {
                                full[(co * full_f + fi * cfg.stride_f + df) * full_t + ti + dt] +=
                                    w.data()[((ci * c_out + co) * kt + dt) * kf + df] * xv;
                            }
                        }
                    }
                }
            }
        }
        let f_out = full_f - 2 * cfg.pad_f;
        let mut out = vec![0.0; c_out * f_out * t];
        for co in 0..c_out {
            for fo in 0..f_out {
                for to in 0..t {
                    out[(co * f_out + fo) * t + to] =
                        full[(co * full_f + fo + cfg.pad_f) * full_t + to] + b.data()[co];
                }
            }
        }
        Tensor::new(vec![c_out, f_out, t], out).unwrap()
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
        }
    }

    #[test]
    fn conv_out_f_walks_the_analysis_chain() {
        let mut f = 161;
        let want = [81, 41, 21, 11, 6];
        for &next in &want {
            f = conv_out_f(f, 3, 2, 1).unwrap();
            assert_eq!(f, next);
        }
    }

    #[test]
    fn deconv_out_f_inverts_conv_out_f_with_output_padding() {
        for f in 2..200usize {
            let down = conv_out_f(f, 3, 2, 1).unwrap();
            let ok = (0..2).any(|op| {
                let cfg = Deconv2dCfg {
                    stride_f: 2,
                    pad_f: 1,
                    out_pad_f: op,
                };
                deconv_out_f(down, 3, &cfg).unwrap() == f
            });
            assert!(ok, "no out_pad in 0..2 recovers {f}");
        }
    }

    #[test]
    fn conv2d_matches_padded_gather_oracle() {
        for seed in 0..6u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (c_in, c_out, f, t) = (
                rng.random_range(1..4),
                rng.random_range(1..4),
                rng.random_range(3..9),
                rng.random_range(1..7),
            );
            let cfg = Conv2dCfg {
                stride_f: rng.random_range(1..3),
                pad_f: rng.random_range(0..2),
            };
            let (kt, kf) = (rng.random_range(1..4), rng.random_range(1..4));
            if f + 2 * cfg.pad_f < kf {
                continue;
            }
            let x = rand_t(&[c_in, f, t], &mut rng);
            let w = rand_t(&[c_out, c_in, kt, kf], &mut rng);
            let b = rand_t(&[c_out], &mut rng);
            let got = conv2d_fwd(&x, &w, &b, &cfg).unwrap();
            assert_close(&got, &conv_oracle(&x, &w, &b, &cfg), 1e-12);
        }
    }

    #[test]
    fn deconv2d_matches_scatter_oracle() {
        for seed in 0..6u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (c_in, c_out, f, t) = (
                rng.random_range(1..4),
                rng.random_range(1..4),
                rng.random_range(2..7),
                rng.random_range(1..7),
            );
            let (kt, kf) = (rng.random_range(1..4), rng.random_range(1..4));
            let cfg = Deconv2dCfg {
                stride_f: rng.random_range(1..3),
                pad_f: rng.random_range(0..2),
                out_pad_f: rng.random_range(0..2),
            };
            if (f - 1) * cfg.stride_f + kf + cfg.out_pad_f <= 2 * cfg.pad_f {
                continue;
            }
            let x = rand_t(&[c_in, f, t], &mut rng);
            let w = rand_t(&[c_in, c_out, kt, kf], &mut rng);
            let b = rand_t(&[c_out], &mut rng);
            let got = deconv2d_fwd(&x, &w, &b, &cfg).unwrap();
            assert_close(&got, &deconv_oracle(&x, &w, &b, &cfg), 1e-12);
        }
    }

    #[test]
    fn conv2d_hand_literal_two_tap_time_kernel() {
        // w has taps [10 (past), 1 (current)]; out[t] = x[t] + 10 x[t-1].
        let x: Tensor<f64> =
            Tensor::from_f64_slice(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
        let w = Tensor::from_f64_slice(&[1, 1, 2, 1], &[10., 1.]).unwrap();
        let b = Tensor::from_f64_slice(&[1], &[0.]).unwrap();
        let cfg = Conv2dCfg {
            stride_f: 1,
            pad_f: 0,
        };
        let y = conv2d_fwd(&x, &w, &b, &cfg).unwrap();
        assert_eq!(
            y.to_f64_vec(),
            vec![1., 12., 23., 4., 45., 56., 7., 78., 89.]
        );
    }

    #[test]
    fn conv2d_future_frames_cannot_reach_the_present() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = Conv2dCfg {
            stride_f: 2,
            pad_f: 1,
        };
        let x = rand_t(&[2, 7, 6], &mut rng);
        let w = rand_t(&[3, 2, 2, 3], &mut rng);
        let b = rand_t(&[3], &mut rng);
        let full = conv2d_fwd(&x, &w, &b, &cfg).unwrap();
        // Zero everything after frame 2; frames 0..=2 must be untouched.
        let mut cut = x.to_vec();
        for c in 0..2 {
            for fi in 0..7 {
                for ti in 3..6 {
                    cut[(c * 7 + fi) * 6 + ti] = 0.0;
                }
            }
        }
        let cut = Tensor::new(vec![2, 7, 6], cut).unwrap();
        let cut_y = conv2d_fwd(&cut, &w, &b, &cfg).unwrap();
        for co in 0..3 {
            for fo in 0..full.dim(1) {
                for ti in 0..3 {
                    let i = (co * full.dim(1) + fo) * 6 + ti;
                    assert_eq!(full.data()[i], cut_y.data()[i]);
                }
            }
        }
    }

    #[test]
    fn deconv2d_future_frames_cannot_reach_the_present() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = Deconv2dCfg {
            stride_f: 2,
            pad_f: 1,
            out_pad_f: 1,
        };
        let x = rand_t(&[2, 4, 6], &mut rng);
        let w = rand_t(&[2, 3, 2, 3], &mut rng);
        let b = rand_t(&[3], &mut rng);
        let full = deconv2d_fwd(&x, &w, &b, &cfg).unwrap();
        let mut cut = x.to_vec();
        for c in 0..2 {
            for fi in 0..4 {
                for ti in 3..6 {
                    cut[(c * 4 + fi) * 6 + ti] = 0.0;
                }
            }
        }
        let cut = Tensor::new(vec![2, 4, 6], cut).unwrap();
        let cut_y = deconv2d_fwd(&cut, &w, &b, &cfg).unwrap();
        let f_out = full.dim(1);
        for co in 0..3 {
            for fo in 0..f_out {
                for ti in 0..3 {
                    let i = (co * f_out + fo) * 6 + ti;
                    assert_eq!(full.data()[i], cut_y.data()[i]);
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x: Tensor<f64> = Tensor::zeros(&[2, 5, 3]);
        let w: Tensor<f64> = Tensor::zeros(&[4, 3, 2, 3]);
        let b: Tensor<f64> = Tensor::zeros(&[4]);
        let cfg = Conv2dCfg {
            stride_f: 1,
            pad_f: 1,
        };
        assert!(conv2d_fwd(&x, &w, &b, &cfg).is_err());
    }
}
