use super::scalar::Scalar;
use super::tensor::Tensor;
use super::NnError;

/// Statistic extent for [`crate::nn::Tape::instance_norm`].
///
/// `Offline` normalizes each channel with moments of its full `(F, T)`
/// plane. `Cumulative` normalizes frame `t` with moments of frames `0..=t`
/// only, which keeps the layer causal at the cost of per-frame statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Offline,
    Cumulative,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormCfg {
    pub mode: NormMode,
    pub eps: f64,
}

impl Default for NormCfg {
    fn default() -> Self {
        Self {
            mode: NormMode::Cumulative,
            eps: 1e-5,
        }
    }
}

fn norm_check<E: Scalar>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
) -> Result<(usize, usize, usize), NnError> {
    if x.rank() != 3 {
        return Err(NnError::Shape(format!(
            "instance_norm: want x [C,F,T], got {:?}",
            x.shape()
        )));
    }
    let c = x.dim(0);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(NnError::Shape(format!(
            "instance_norm: gamma {:?} / beta {:?} must be [{}]",
            gamma.shape(),
            beta.shape(),
            c
        )));
    }
    Ok((c, x.dim(1), x.dim(2)))
}

/// Per-(channel, frame) mean and inverse stddev, in f64.
/// Offline mode repeats the full-extent moments across frames.
fn channel_stats<E: Scalar>(
    xc: &[E],
    f: usize,
    t: usize,
    cfg: &NormCfg,
) -> (Vec<f64>, Vec<f64>) {
    let mut mu = vec![0.0f64; t];
    let mut r = vec![0.0f64; t];
    match cfg.mode {
        NormMode::Offline => {
            let mut s = 0.0f64;
            let mut s2 = 0.0f64;
            for &v in xc {
                let v = v.to_f64();
                s += v;
                s2 += v * v;
            }
            let n = (f * t) as f64;
            let m = s / n;
            let var = (s2 / n - m * m).max(0.0);
            let inv = 1.0 / (var + cfg.eps).sqrt();
            mu.iter_mut().for_each(|v| *v = m);
            r.iter_mut().for_each(|v| *v = inv);
        }
        NormMode::Cumulative => {
            let mut s = 0.0f64;
            let mut s2 = 0.0f64;
            for ti in 0..t {
                for fi in 0..f {
                    let v = xc[fi * t + ti].to_f64();
                    s += v;
                    s2 += v * v;
                }
                let n = (f * (ti + 1)) as f64;
                let m = s / n;
                let var = (s2 / n - m * m).max(0.0);
                mu[ti] = m;
                r[ti] = 1.0 / (var + cfg.eps).sqrt();
            }
        }
    }
    (mu, r)
}

pub(crate) fn instance_norm_fwd<E: Scalar>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    cfg: &NormCfg,
) -> Result<Tensor<E>, NnError> {
    let (c, f, t) = norm_check(x, gamma, beta)?;
    if f * t == 0 {
        return Err(NnError::Shape("instance_norm: empty plane".into()));
    }
    let xd = x.data();
    let mut out = vec![E::ZERO; c * f * t];
    for ci in 0..c {
        let xc = &xd[ci * f * t..][..f * t];
        let (mu, r) = channel_stats(xc, f, t, cfg);
        let g = gamma.data()[ci].to_f64();
        let b = beta.data()[ci].to_f64();
        let oc = &mut out[ci * f * t..][..f * t];
        for fi in 0..f {
            for ti in 0..t {
                let v = xc[fi * t + ti].to_f64();
                oc[fi * t + ti] = E::from_f64(g * (v - mu[ti]) * r[ti] + b);
            }
        }
    }
    Tensor::new(vec![c, f, t], out)
}

type NormGrads<E> = (Option<Vec<E>>, Option<Vec<E>>, Option<Vec<E>>);

/// Hand-derived reverse pass; statistics are recomputed rather than cached.
///
/// Cumulative mode: with per-frame moments `mu_t`, `r_t` over `n_t = F*(t+1)`
/// samples, `G_t = sum_f dy[f,t]` and `H_t = sum_f dy[f,t]*(x[f,t]-mu_t)`,
/// a sample at frame `s` influences every later frame's statistics, so
///
/// ```text
/// dx[g,s] = gamma * ( r_s*dy[g,s] - A_s - x[g,s]*B_s + C_s )
/// A_s = sum_{t>=s} r_t*G_t/n_t
/// B_s = sum_{t>=s} r_t^3*H_t/n_t
/// C_s = sum_{t>=s} r_t^3*mu_t*H_t/n_t
/// ```
pub(crate) fn instance_norm_bwd<E: Scalar>(
    go: &[E],
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    cfg: &NormCfg,
    need_x: bool,
    need_gamma: bool,
    need_beta: bool,
) -> NormGrads<E> {
    let (c, f, t) = (x.dim(0), x.dim(1), x.dim(2));
    debug_assert_eq!(go.len(), c * f * t);
    let xd = x.data();

    let mut dx = if need_x { Some(vec![E::ZERO; c * f * t]) } else { None };
    let mut dgamma = if need_gamma { Some(vec![E::ZERO; c]) } else { None };
    let mut dbeta = if need_beta { Some(vec![E::ZERO; c]) } else { None };

    for ci in 0..c {
        let xc = &xd[ci * f * t..][..f * t];
        let gc = &go[ci * f * t..][..f * t];
        let (mu, r) = channel_stats(xc, f, t, cfg);
        let gam = gamma.data()[ci].to_f64();

        // Per-frame reductions of the incoming gradient.
        let mut gt = vec![0.0f64; t];
        let mut ht = vec![0.0f64; t];
        for fi in 0..f {
            for ti in 0..t {
                let g = gc[fi * t + ti].to_f64();
                gt[ti] += g;
                ht[ti] += g * (xc[fi * t + ti].to_f64() - mu[ti]);
            }
        }

        if let Some(dg) = dgamma.as_mut() {
            let mut acc = 0.0f64;
            for ti in 0..t {
                acc += r[ti] * ht[ti];
            }
            dg[ci] = E::from_f64(acc);
        }
        if let Some(db) = dbeta.as_mut() {
            let mut acc = 0.0f64;
            for g in gt.iter() {
                acc += g;
            }
            db[ci] = E::from_f64(acc);
        }

        if let Some(dx) = dx.as_mut() {
            let dxc = &mut dx[ci * f * t..][..f * t];
            match cfg.mode {
                NormMode::Offline => {
                    let n = (f * t) as f64;
                    let gsum: f64 = gt.iter().sum();
                    let hsum: f64 = ht.iter().sum();
                    // All frames share mu/r; suffix sums collapse to totals.
                    let m = mu[0];
                    let rv = r[0];
                    let a = rv * gsum / n;
                    let b = rv * rv * rv * hsum / n;
                    for fi in 0..f {
                        for ti in 0..t {
                            let idx = fi * t + ti;
                            let xv = xc[idx].to_f64();
                            let d = rv * gc[idx].to_f64() - a - (xv - m) * b;
                            dxc[idx] = E::from_f64(gam * d);
                        }
                    }
                }
                NormMode::Cumulative => {
                    // Suffix sums over frames >= s.
                    let mut a = vec![0.0f64; t + 1];
                    let mut b = vec![0.0f64; t + 1];
                    let mut csuf = vec![0.0f64; t + 1];
                    for ti in (0..t).rev() {
                        let n = (f * (ti + 1)) as f64;
                        let r3 = r[ti] * r[ti] * r[ti];
                        a[ti] = a[ti + 1] + r[ti] * gt[ti] / n;
                        b[ti] = b[ti + 1] + r3 * ht[ti] / n;
                        csuf[ti] = csuf[ti + 1] + r3 * mu[ti] * ht[ti] / n;
                    }
                    for fi in 0..f {
                        for ti in 0..t {
                            let idx = fi * t + ti;
                            let xv = xc[idx].to_f64();
                            let d = r[ti] * gc[idx].to_f64() - a[ti] - xv * b[ti] + csuf[ti];
                            dxc[idx] = E::from_f64(gam * d);
                        }
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}
