use super::conv::{conv2d_bwd, conv2d_fwd, deconv2d_bwd, deconv2d_fwd, Conv2dCfg, Deconv2dCfg};
use super::norm::{instance_norm_bwd, instance_norm_fwd, NormCfg};
use super::recurrent::{lstm_bwd, lstm_fwd};
use super::scalar::Scalar;
use super::tensor::Tensor;
use super::NnError;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that minted it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackFn<E> = Box<dyn Fn(&[E], &mut GradSink<E>)>;

struct Node<E: Scalar> {
    value: Tensor<E>,
    requires_grad: bool,
    is_leaf: bool,
    grad: Option<Vec<E>>,
    back: Option<BackFn<E>>,
}

/// Collects gradient contributions flowing to parent nodes during backward.
pub struct GradSink<'a, E: Scalar> {
    grads: &'a mut [Option<Vec<E>>],
    needs: &'a [bool],
}

impl<E: Scalar> GradSink<'_, E> {
    /// Whether `v` participates in gradient flow; kernels skip dead branches.
    pub fn wants(&self, v: Var) -> bool {
        v.0 < self.needs.len() && self.needs[v.0]
    }

    /// Accumulate `g` into the slot for `v`. Drops contributions to
    /// non-differentiable nodes.
    pub fn add(&mut self, v: Var, g: Vec<E>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                debug_assert_eq!(acc.len(), g.len());
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }
}

/// Arena of values plus the record needed to run reverse-mode accumulation.
///
/// Nodes whose inputs all have `requires_grad == false` store no backward
/// record, so a tape built purely from constants is a plain evaluation trace.
pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input; its gradient accumulates across backward calls.
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.insert(value, true, true, None)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.insert(value, false, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Accumulated leaf gradient, shaped like the leaf. `None` until a
    /// backward pass has reached the leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor<E>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad matches leaf shape")
        })
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn insert(
        &mut self,
        value: Tensor<E>,
        requires_grad: bool,
        is_leaf: bool,
        back: Option<BackFn<E>>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            is_leaf,
            grad: None,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        value: Tensor<E>,
        parents: &[Var],
        back: impl Fn(&[E], &mut GradSink<E>) + 'static,
    ) -> Var {
        let requires = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let back: Option<BackFn<E>> = if requires { Some(Box::new(back)) } else { None };
        self.insert(value, requires, false, back)
    }

    /// Reverse-mode pass from scalar `root`; leaf gradients accumulate (a
    /// second call doubles them).
    pub fn backward(&mut self, root: Var) -> Result<(), NnError> {
        let rn = &self.nodes[root.0];
        if rn.value.numel() != 1 {
            return Err(NnError::Invalid(format!(
                "backward root must be scalar, got shape {:?}",
                rn.value.shape()
            )));
        }
        if !rn.requires_grad {
            return Err(NnError::Invalid(
                "backward root does not depend on any leaf".into(),
            ));
        }
        let n = root.0 + 1;
        let needs: Vec<bool> = self.nodes[..n].iter().map(|nd| nd.requires_grad).collect();
        let mut grads: Vec<Option<Vec<E>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[root.0] = Some(vec![E::ONE]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !needs[i] {
                continue;
            }
            if self.nodes[i].back.is_some() {
                let (lower, _) = grads.split_at_mut(i);
                let mut sink = GradSink {
                    grads: lower,
                    needs: &needs[..i],
                };
                let back = self.nodes[i].back.as_ref().expect("checked above");
                back(&g, &mut sink);
            } else if self.nodes[i].is_leaf {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn check_same_shape(&self, a: Var, b: Var, op: &str) -> Result<(), NnError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NnError::Shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.check_same_shape(a, b, "add")?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, &[a, b], move |g, sink| {
            sink.add(a, g.to_vec());
            sink.add(b, g.to_vec());
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.check_same_shape(a, b, "sub")?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, &[a, b], move |g, sink| {
            sink.add(a, g.to_vec());
            sink.add(b, g.iter().map(|&v| -v).collect());
        }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.check_same_shape(a, b, "mul")?;
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, &[a, b], move |g, sink| {
            if sink.wants(a) {
                let da = g.iter().zip(bv.data()).map(|(&gv, &y)| gv * y).collect();
                sink.add(a, da);
            }
            if sink.wants(b) {
                let db = g.iter().zip(av.data()).map(|(&gv, &x)| gv * x).collect();
                sink.add(b, db);
            }
        }))
    }

    /// `scale * x + shift` with compile-time constants (not differentiated
    /// through `scale`/`shift`).
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| E::from_f64(scale * v.to_f64() + shift))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, &[x], move |g, sink| {
            if sink.wants(x) {
                sink.add(x, g.iter().map(|&v| E::from_f64(scale * v.to_f64())).collect());
            }
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data: Vec<E> = xv
            .data()
            .iter()
            .map(|&v| E::from_f64(1.0 / (1.0 + (-v.to_f64()).exp())))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let yv = out.clone();
        self.push(out, &[x], move |g, sink| {
            if sink.wants(x) {
                let dx = g
                    .iter()
                    .zip(yv.data())
                    .map(|(&gv, &y)| {
                        let y = y.to_f64();
                        E::from_f64(gv.to_f64() * y * (1.0 - y))
                    })
                    .collect();
                sink.add(x, dx);
            }
        })
    }

    pub fn tanh_act(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data: Vec<E> = xv.data().iter().map(|&v| E::from_f64(v.to_f64().tanh())).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let yv = out.clone();
        self.push(out, &[x], move |g, sink| {
            if sink.wants(x) {
                let dx = g
                    .iter()
                    .zip(yv.data())
                    .map(|(&gv, &y)| {
                        let y = y.to_f64();
                        E::from_f64(gv.to_f64() * (1.0 - y * y))
                    })
                    .collect();
                sink.add(x, dx);
            }
        })
    }

    /// Leaky rectifier with one learnable slope: `x >= 0 ? x : alpha * x`.
    /// `alpha` has shape `[1]`.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var, NnError> {
        let av = self.value(alpha);
        if av.shape() != [1] {
            return Err(NnError::Shape(format!(
                "prelu: alpha must have shape [1], got {:?}",
                av.shape()
            )));
        }
        let al = av.data()[0];
        let xv = self.value(x).clone();
        let data = xv
            .data()
            .iter()
            .map(|&v| if v >= E::ZERO { v } else { al * v })
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, &[x, alpha], move |g, sink| {
            if sink.wants(x) {
                let dx = g
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| if v >= E::ZERO { gv } else { al * gv })
                    .collect();
                sink.add(x, dx);
            }
            if sink.wants(alpha) {
                let mut da = 0.0f64;
                for (&gv, &v) in g.iter().zip(xv.data()) {
                    if v < E::ZERO {
                        da += gv.to_f64() * v.to_f64();
                    }
                }
                sink.add(alpha, vec![E::from_f64(da)]);
            }
        }))
    }

    /// Sum of all elements, shape `[1]`. Accumulates in f64.
    pub fn sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut acc = 0.0f64;
        for &v in xv.data() {
            acc += v.to_f64();
        }
        let n = xv.numel();
        let out = Tensor::scalar(E::from_f64(acc));
        self.push(out, &[x], move |g, sink| {
            if sink.wants(x) {
                sink.add(x, vec![g[0]; n]);
            }
        })
    }

    /// Mean of squared elements, shape `[1]`. Accumulates in f64.
    pub fn mean_square(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let n = xv.numel().max(1);
        let mut acc = 0.0f64;
        for &v in xv.data() {
            let v = v.to_f64();
            acc += v * v;
        }
        let out = Tensor::scalar(E::from_f64(acc / n as f64));
        self.push(out, &[x], move |g, sink| {
            if sink.wants(x) {
                let s = 2.0 * g[0].to_f64() / n as f64;
                let dx = xv.data().iter().map(|&v| E::from_f64(s * v.to_f64())).collect();
                sink.add(x, dx);
            }
        })
    }

    /// View with a new shape over the same flat data.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NnError> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(out, &[x], move |g, sink| {
            sink.add(x, g.to_vec());
        }))
    }

    /// Concatenate along dimension 0; trailing dimensions must match.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        if parts.is_empty() {
            return Err(NnError::Invalid("concat0: no inputs".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        let mut dim0 = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(NnError::Shape(format!(
                    "concat0: incompatible shapes {:?} and {:?}",
                    first, s
                )));
            }
            dim0 += s[0];
        }
        let mut shape = first.clone();
        shape[0] = dim0;
        let mut data = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(shape, data)?;
        let pieces: Vec<(Var, usize)> = parts
            .iter()
            .map(|&p| (p, self.value(p).numel()))
            .collect();
        Ok(self.push(out, parts, move |g, sink| {
            let mut off = 0;
            for &(p, len) in &pieces {
                sink.add(p, g[off..off + len].to_vec());
                off += len;
            }
        }))
    }

    /// Dense layer over a frame axis: `x [D, T]`, `w [O, D]`, `b [O]` -> `[O, T]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let bv = self.value(b).clone();
        if xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1 {
            return Err(NnError::Shape(format!(
                "linear: want x [D,T], w [O,D], b [O]; got {:?}, {:?}, {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let (d, t) = (xv.dim(0), xv.dim(1));
        let o = wv.dim(0);
        if wv.dim(1) != d || bv.dim(0) != o {
            return Err(NnError::Shape(format!(
                "linear: x [{}...], w {:?}, b {:?} inconsistent",
                d,
                wv.shape(),
                bv.shape()
            )));
        }
        let xd = xv.data();
        let wd = wv.data();
        let mut out = vec![E::ZERO; o * t];
        for oi in 0..o {
            let wrow = &wd[oi * d..(oi + 1) * d];
            let bias = bv.data()[oi].to_f64();
            for ti in 0..t {
                let mut acc = bias;
                for di in 0..d {
                    acc += wrow[di].to_f64() * xd[di * t + ti].to_f64();
                }
                out[oi * t + ti] = E::from_f64(acc);
            }
        }
        let out = Tensor::new(vec![o, t], out)?;
        Ok(self.push(out, &[x, w, b], move |g, sink| {
            let xd = xv.data();
            let wd = wv.data();
            if sink.wants(x) {
                let mut dx = vec![0.0f64; d * t];
                for oi in 0..o {
                    let wrow = &wd[oi * d..(oi + 1) * d];
                    let grow = &g[oi * t..(oi + 1) * t];
                    for di in 0..d {
                        let wv = wrow[di].to_f64();
                        let dst = &mut dx[di * t..(di + 1) * t];
                        for ti in 0..t {
                            dst[ti] += wv * grow[ti].to_f64();
                        }
                    }
                }
                sink.add(x, dx.into_iter().map(E::from_f64).collect());
            }
            if sink.wants(w) {
                let mut dw = vec![E::ZERO; o * d];
                for oi in 0..o {
                    let grow = &g[oi * t..(oi + 1) * t];
                    for di in 0..d {
                        let xrow = &xd[di * t..(di + 1) * t];
                        let mut acc = 0.0f64;
                        for ti in 0..t {
                            acc += grow[ti].to_f64() * xrow[ti].to_f64();
                        }
                        dw[oi * d + di] = E::from_f64(acc);
                    }
                }
                sink.add(w, dw);
            }
            if sink.wants(b) {
                let mut db = vec![E::ZERO; o];
                for oi in 0..o {
                    let mut acc = 0.0f64;
                    for ti in 0..t {
                        acc += g[oi * t + ti].to_f64();
                    }
                    db[oi] = E::from_f64(acc);
                }
                sink.add(b, db);
            }
        }))
    }

    /// 2-D convolution over `[C, F, T]`, causal in time (implicit `kT - 1`
    /// zero frames on the past side), strided/padded in frequency.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, cfg: Conv2dCfg) -> Result<Var, NnError> {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let bv = self.value(b).clone();
        let out = conv2d_fwd(&xv, &wv, &bv, &cfg)?;
        Ok(self.push(out, &[x, w, b], move |g, sink| {
            let (dx, dw, db) = conv2d_bwd(
                g,
                &xv,
                &wv,
                &cfg,
                sink.wants(x),
                sink.wants(w),
                sink.wants(b),
            );
            if let Some(d) = dx {
                sink.add(x, d);
            }
            if let Some(d) = dw {
                sink.add(w, d);
            }
            if let Some(d) = db {
                sink.add(b, d);
            }
        }))
    }

    /// Transposed counterpart of [`Tape::conv2d`]: upsamples frequency,
    /// stays causal in time (`t_out = t_in + dt`, tail beyond `T - 1` dropped).
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Var, cfg: Deconv2dCfg) -> Result<Var, NnError> {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let bv = self.value(b).clone();
        let out = deconv2d_fwd(&xv, &wv, &bv, &cfg)?;
        Ok(self.push(out, &[x, w, b], move |g, sink| {
            let (dx, dw, db) = deconv2d_bwd(
                g,
                &xv,
                &wv,
                &cfg,
                sink.wants(x),
                sink.wants(w),
                sink.wants(b),
            );
            if let Some(d) = dx {
                sink.add(x, d);
            }
            if let Some(d) = dw {
                sink.add(w, d);
            }
            if let Some(d) = db {
                sink.add(b, d);
            }
        }))
    }

    /// Gated convolution block: `conv(x; a) * sigmoid(conv(x; g))`, both
    /// branches sharing stride and padding.
    pub fn glu_conv2d(
        &mut self,
        x: Var,
        w_a: Var,
        b_a: Var,
        w_g: Var,
        b_g: Var,
        cfg: Conv2dCfg,
    ) -> Result<Var, NnError> {
        let a = self.conv2d(x, w_a, b_a, cfg)?;
        let g = self.conv2d(x, w_g, b_g, cfg)?;
        let s = self.sigmoid(g);
        self.mul(a, s)
    }

    /// Gated transposed convolution block.
    pub fn glu_deconv2d(
        &mut self,
        x: Var,
        w_a: Var,
        b_a: Var,
        w_g: Var,
        b_g: Var,
        cfg: Deconv2dCfg,
    ) -> Result<Var, NnError> {
        let a = self.deconv2d(x, w_a, b_a, cfg)?;
        let g = self.deconv2d(x, w_g, b_g, cfg)?;
        let s = self.sigmoid(g);
        self.mul(a, s)
    }

    /// Per-channel normalization of `[C, F, T]` with learnable scale/shift.
    /// Offline mode uses full-extent statistics; cumulative mode uses, at
    /// frame `t`, statistics of frames `0..=t` only.
    pub fn instance_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        cfg: NormCfg,
    ) -> Result<Var, NnError> {
        let xv = self.value(x).clone();
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let out = instance_norm_fwd(&xv, &gv, &bv, &cfg)?;
        Ok(self.push(out, &[x, gamma, beta], move |g, sink| {
            let (dx, dg, db) = instance_norm_bwd(
                g,
                &xv,
                &gv,
                &cfg,
                sink.wants(x),
                sink.wants(gamma),
                sink.wants(beta),
            );
            if let Some(d) = dx {
                sink.add(x, d);
            }
            if let Some(d) = dg {
                sink.add(gamma, d);
            }
            if let Some(d) = db {
                sink.add(beta, d);
            }
        }))
    }

    /// Unidirectional LSTM over frames: `x [D, T]` -> `[H, T]`.
    /// Gate rows of `w_ih`/`w_hh`/`bias` are ordered input, forget, cell,
    /// output.
    pub fn lstm(
        &mut self,
        x: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        h0: Var,
        c0: Var,
    ) -> Result<Var, NnError> {
        let xv = self.value(x).clone();
        let wiv = self.value(w_ih).clone();
        let whv = self.value(w_hh).clone();
        let bv = self.value(bias).clone();
        let h0v = self.value(h0).clone();
        let c0v = self.value(c0).clone();
        let (out, cache) = lstm_fwd(&xv, &wiv, &whv, &bv, &h0v, &c0v)?;
        Ok(self.push(out, &[x, w_ih, w_hh, bias, h0, c0], move |g, sink| {
            let grads = lstm_bwd(g, &xv, &wiv, &whv, &h0v, &c0v, &cache);
            sink.add(x, grads.dx);
            sink.add(w_ih, grads.dw_ih);
            sink.add(w_hh, grads.dw_hh);
            sink.add(bias, grads.dbias);
            sink.add(h0, grads.dh0);
            sink.add(c0, grads.dc0);
        }))
    }
}
