use super::scalar::Scalar;
use super::tensor::Tensor;
use super::NnError;

/// Forward-state snapshot the reverse pass replays. All values are f64:
/// the recurrence runs in f64 end to end and only the output is cast.
/// Layout is time-major `[T, H]`.
pub(crate) struct LstmCache {
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `x [D, T]` -> `y [H, T]` with gate rows ordered input, forget, cell,
/// output in `w_ih [4H, D]`, `w_hh [4H, H]`, `bias [4H]`.
pub(crate) fn lstm_fwd<E: Scalar>(
    x: &Tensor<E>,
    w_ih: &Tensor<E>,
    w_hh: &Tensor<E>,
    bias: &Tensor<E>,
    h0: &Tensor<E>,
    c0: &Tensor<E>,
) -> Result<(Tensor<E>, LstmCache), NnError> {
    if x.rank() != 2 || w_ih.rank() != 2 || w_hh.rank() != 2 {
        return Err(NnError::Shape(format!(
            "lstm: want x [D,T], w_ih [4H,D], w_hh [4H,H]; got {:?}, {:?}, {:?}",
            x.shape(),
            w_ih.shape(),
            w_hh.shape()
        )));
    }
    let (d, t) = (x.dim(0), x.dim(1));
    let h = w_hh.dim(1);
    if w_hh.dim(0) != 4 * h
        || w_ih.dim(0) != 4 * h
        || w_ih.dim(1) != d
        || bias.shape() != [4 * h]
        || h0.shape() != [h]
        || c0.shape() != [h]
    {
        return Err(NnError::Shape(format!(
            "lstm: inconsistent shapes x {:?}, w_ih {:?}, w_hh {:?}, bias {:?}, h0 {:?}, c0 {:?}",
            x.shape(),
            w_ih.shape(),
            w_hh.shape(),
            bias.shape(),
            h0.shape(),
            c0.shape()
        )));
    }

    let xd = x.data();
    let wi = w_ih.data();
    let wh = w_hh.data();
    let bd = bias.data();

    let mut cache = LstmCache {
        i: vec![0.0; t * h],
        f: vec![0.0; t * h],
        g: vec![0.0; t * h],
        o: vec![0.0; t * h],
        c: vec![0.0; t * h],
        tanh_c: vec![0.0; t * h],
        h: vec![0.0; t * h],
    };
    let mut h_prev: Vec<f64> = h0.data().iter().map(|v| v.to_f64()).collect();
    let mut c_prev: Vec<f64> = c0.data().iter().map(|v| v.to_f64()).collect();
    let mut a = vec![0.0f64; 4 * h];
    let mut out = vec![E::ZERO; h * t];

    for ti in 0..t {
        for row in 0..4 * h {
            let mut acc = bd[row].to_f64();
            let wrow = &wi[row * d..(row + 1) * d];
            for di in 0..d {
                acc += wrow[di].to_f64() * xd[di * t + ti].to_f64();
            }
            let urow = &wh[row * h..(row + 1) * h];
            for hi in 0..h {
                acc += urow[hi].to_f64() * h_prev[hi];
            }
            a[row] = acc;
        }
        let base = ti * h;
        for j in 0..h {
            let ig = sigmoid(a[j]);
            let fg = sigmoid(a[h + j]);
            let gg = a[2 * h + j].tanh();
            let og = sigmoid(a[3 * h + j]);
            let cc = fg * c_prev[j] + ig * gg;
            let tc = cc.tanh();
            let hh = og * tc;
            cache.i[base + j] = ig;
            cache.f[base + j] = fg;
            cache.g[base + j] = gg;
            cache.o[base + j] = og;
            cache.c[base + j] = cc;
            cache.tanh_c[base + j] = tc;
            cache.h[base + j] = hh;
            out[j * t + ti] = E::from_f64(hh);
        }
        h_prev.copy_from_slice(&cache.h[base..base + h]);
        c_prev.copy_from_slice(&cache.c[base..base + h]);
    }

    Ok((Tensor::new(vec![h, t], out)?, cache))
}

pub(crate) struct LstmGrads<E> {
    pub dx: Vec<E>,
    pub dw_ih: Vec<E>,
    pub dw_hh: Vec<E>,
    pub dbias: Vec<E>,
    pub dh0: Vec<E>,
    pub dc0: Vec<E>,
}

pub(crate) fn lstm_bwd<E: Scalar>(
    go: &[E],
    x: &Tensor<E>,
    w_ih: &Tensor<E>,
    w_hh: &Tensor<E>,
    h0: &Tensor<E>,
    c0: &Tensor<E>,
    cache: &LstmCache,
) -> LstmGrads<E> {
    let (d, t) = (x.dim(0), x.dim(1));
    let h = w_hh.dim(1);
    debug_assert_eq!(go.len(), h * t);

    let xd = x.data();
    let wi = w_ih.data();
    let wh = w_hh.data();

    let mut dx = vec![0.0f64; d * t];
    let mut dwi = vec![0.0f64; 4 * h * d];
    let mut dwh = vec![0.0f64; 4 * h * h];
    let mut db = vec![0.0f64; 4 * h];
    let mut dh_next = vec![0.0f64; h];
    let mut dc_next = vec![0.0f64; h];
    let mut da = vec![0.0f64; 4 * h];

    for ti in (0..t).rev() {
        let base = ti * h;
        for j in 0..h {
            let dh = go[j * t + ti].to_f64() + dh_next[j];
            let og = cache.o[base + j];
            let tc = cache.tanh_c[base + j];
            let dc = dh * og * (1.0 - tc * tc) + dc_next[j];
            let ig = cache.i[base + j];
            let fg = cache.f[base + j];
            let gg = cache.g[base + j];
            let c_prev = if ti > 0 {
                cache.c[base - h + j]
            } else {
                c0.data()[j].to_f64()
            };
            da[j] = dc * gg * ig * (1.0 - ig);
            da[h + j] = dc * c_prev * fg * (1.0 - fg);
            da[2 * h + j] = dc * ig * (1.0 - gg * gg);
            da[3 * h + j] = dh * tc * og * (1.0 - og);
            dc_next[j] = dc * fg;
        }
        for row in 0..4 * h {
            db[row] += da[row];
            let dv = da[row];
            if dv == 0.0 {
                continue;
            }
            let wrow = &mut dwi[row * d..(row + 1) * d];
            for di in 0..d {
                wrow[di] += dv * xd[di * t + ti].to_f64();
            }
            let urow = &mut dwh[row * h..(row + 1) * h];
            if ti > 0 {
                let hp = &cache.h[base - h..base];
                for hi in 0..h {
                    urow[hi] += dv * hp[hi];
                }
            } else {
                for hi in 0..h {
                    urow[hi] += dv * h0.data()[hi].to_f64();
                }
            }
        }
        for di in 0..d {
            let mut acc = 0.0f64;
            for row in 0..4 * h {
                acc += wi[row * d + di].to_f64() * da[row];
            }
            dx[di * t + ti] = acc;
        }
        for hi in 0..h {
            let mut acc = 0.0f64;
            for row in 0..4 * h {
                acc += wh[row * h + hi].to_f64() * da[row];
            }
            dh_next[hi] = acc;
        }
    }

    LstmGrads {
        dx: dx.into_iter().map(E::from_f64).collect(),
        dw_ih: dwi.into_iter().map(E::from_f64).collect(),
        dw_hh: dwh.into_iter().map(E::from_f64).collect(),
        dbias: db.into_iter().map(E::from_f64).collect(),
        dh0: dh_next.into_iter().map(E::from_f64).collect(),
        dc0: dc_next.into_iter().map(E::from_f64).collect(),
    }
}
