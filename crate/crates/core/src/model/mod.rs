//! Multi-stage refinement model.
//!
//! Each stage runs one enhancement cell: a gated conv encoder over
//! `[C, F, T]`, an LSTM bottleneck across frames, and a gated deconv
//! decoder with skip connections back to full frequency resolution. Cells
//! hold unshared weights per stage; a shared entry block plus a ConvGRU
//! recurrent over the *stage index* carries context from one stage to the
//! next. All convolutions are causal in time and every normalization can
//! run in cumulative (streaming-safe) mode, so output frame `t` depends
//! only on input frames `0..=t`.

pub mod io;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::Spectrogram;
use crate::nn::{
    conv_out_f, Conv2dCfg, Deconv2dCfg, NnError, NormCfg, NormMode, Tape, Tensor, Var,
};

pub use io::{crc32, load_weights, save_weights};

pub const KERNEL_T: usize = 2;
pub const KERNEL_F: usize = 3;
pub const STRIDE_F: usize = 2;
pub const PAD_F: usize = 1;
pub const NORM_EPS: f64 = 1e-5;
const PRELU_INIT: f64 = 0.25;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad weight file: {0}")]
    Format(String),
    #[error("weight file checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Architecture hyperparameters. `Default` is the full configuration:
/// 5 stages over 161 bins, 64 channels, 5 encoder blocks, 2x256 LSTM,
/// gating, stage recurrence, and skip connections all on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub stages: usize,
    pub bins: usize,
    pub channels: usize,
    pub encoder_depth: usize,
    pub lstm_layers: usize,
    pub lstm_units: usize,
    pub gate_enabled: bool,
    pub srnn_enabled: bool,
    pub skip_connections: bool,
    pub norm: NormMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stages: 5,
            bins: 161,
            channels: 64,
            encoder_depth: 5,
            lstm_layers: 2,
            lstm_units: 256,
            gate_enabled: true,
            srnn_enabled: true,
            skip_connections: true,
            norm: NormMode::Cumulative,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (v, what) in [
            (self.stages, "stages"),
            (self.channels, "channels"),
            (self.encoder_depth, "encoder_depth"),
            (self.lstm_layers, "lstm_layers"),
            (self.lstm_units, "lstm_units"),
        ] {
            if v == 0 {
                return Err(ModelError::Config(format!("{what} must be >= 1")));
            }
        }
        if self.bins < 2 {
            return Err(ModelError::Config("bins must be >= 2".into()));
        }
        encoder_chain_from(self.bins, self.encoder_depth)?;
        Ok(())
    }

    /// Frequency extent after the input and each encoder block:
    /// `[bins, f1, ..., f_depth]`.
    pub fn encoder_chain(&self) -> Result<Vec<usize>, ModelError> {
        encoder_chain_from(self.bins, self.encoder_depth)
    }
}

/// Frequency sizes along the encoder for any bin count.
pub fn encoder_chain_from(bins: usize, depth: usize) -> Result<Vec<usize>, ModelError> {
    let mut chain = Vec::with_capacity(depth + 1);
    chain.push(bins);
    let mut f = bins;
    for _ in 0..depth {
        f = conv_out_f(f, KERNEL_F, STRIDE_F, PAD_F)?;
        if f == 0 {
            return Err(ModelError::Config(format!(
                "encoder collapses {bins} bins to zero within {depth} blocks"
            )));
        }
        chain.push(f);
    }
    Ok(chain)
}

/// Output padding that makes one decoder block invert one encoder block:
/// `f_target - ((f_in - 1) * stride - 2*pad + kf)`, always 0 or 1 for the
/// floor-divided encoder chain.
pub fn decoder_out_pad(f_in: usize, f_target: usize) -> Result<usize, ModelError> {
    let base = (f_in - 1) * STRIDE_F + KERNEL_F - 2 * PAD_F;
    if f_target < base || f_target - base >= STRIDE_F {
        return Err(ModelError::Config(format!(
            "decoder cannot reach {f_target} bins from {f_in}"
        )));
    }
    Ok(f_target - base)
}

enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
    Const(f64),
    /// Zero bias with the forget-gate quarter set to 1.
    LstmBias { units: usize },
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn spec(name: String, shape: Vec<usize>, init: Init) -> ParamSpec {
    ParamSpec { name, shape, init }
}

fn conv_xavier(c_in: usize, c_out: usize) -> Init {
    Init::Xavier {
        fan_in: c_in * KERNEL_T * KERNEL_F,
        fan_out: c_out * KERNEL_T * KERNEL_F,
    }
}

/// Full parameter enumeration in canonical order. Building, saving, and
/// shape verification all walk this one list, so they cannot drift apart.
fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>, ModelError> {
    cfg.validate()?;
    let c = cfg.channels;
    let u = cfg.lstm_units;
    let chain = cfg.encoder_chain()?;
    let flat = c * chain.last().copied().expect("chain nonempty");
    let mut v = Vec::new();

    let entry = |v: &mut Vec<ParamSpec>, prefix: &str| {
        v.push(spec(
            format!("{prefix}.entry.conv.w"),
            vec![c, 4, KERNEL_T, KERNEL_F],
            conv_xavier(4, c),
        ));
        v.push(spec(format!("{prefix}.entry.conv.b"), vec![c], Init::Zeros));
        v.push(spec(format!("{prefix}.entry.norm.gamma"), vec![c], Init::Ones));
        v.push(spec(format!("{prefix}.entry.norm.beta"), vec![c], Init::Zeros));
        v.push(spec(
            format!("{prefix}.entry.act.alpha"),
            vec![1],
            Init::Const(PRELU_INIT),
        ));
    };

    if cfg.srnn_enabled {
        entry(&mut v, "srnn");
        for gate in ["update", "reset", "cand"] {
            v.push(spec(
                format!("srnn.gru.{gate}.w"),
                vec![c, 2 * c, KERNEL_T, KERNEL_F],
                conv_xavier(2 * c, c),
            ));
            v.push(spec(format!("srnn.gru.{gate}.b"), vec![c], Init::Zeros));
        }
    }

    for q in 1..=cfg.stages {
        let p = format!("cell{q}");
        if !cfg.srnn_enabled {
            entry(&mut v, &p);
        }
        for i in 0..cfg.encoder_depth {
            v.push(spec(
                format!("{p}.enc{i}.conv.w"),
                vec![c, c, KERNEL_T, KERNEL_F],
                conv_xavier(c, c),
            ));
            v.push(spec(format!("{p}.enc{i}.conv.b"), vec![c], Init::Zeros));
            if cfg.gate_enabled {
                v.push(spec(
                    format!("{p}.enc{i}.gate.w"),
                    vec![c, c, KERNEL_T, KERNEL_F],
                    conv_xavier(c, c),
                ));
                v.push(spec(format!("{p}.enc{i}.gate.b"), vec![c], Init::Zeros));
            }
            v.push(spec(format!("{p}.enc{i}.norm.gamma"), vec![c], Init::Ones));
            v.push(spec(format!("{p}.enc{i}.norm.beta"), vec![c], Init::Zeros));
            v.push(spec(
                format!("{p}.enc{i}.act.alpha"),
                vec![1],
                Init::Const(PRELU_INIT),
            ));
        }
        for j in 0..cfg.lstm_layers {
            let d = if j == 0 { flat } else { u };
            v.push(spec(
                format!("{p}.lstm{j}.w_ih"),
                vec![4 * u, d],
                Init::Xavier {
                    fan_in: d,
                    fan_out: 4 * u,
                },
            ));
            v.push(spec(
                format!("{p}.lstm{j}.w_hh"),
                vec![4 * u, u],
                Init::Xavier {
                    fan_in: u,
                    fan_out: 4 * u,
                },
            ));
            v.push(spec(
                format!("{p}.lstm{j}.bias"),
                vec![4 * u],
                Init::LstmBias { units: u },
            ));
        }
        v.push(spec(
            format!("{p}.proj.w"),
            vec![flat, u],
            Init::Xavier {
                fan_in: u,
                fan_out: flat,
            },
        ));
        v.push(spec(format!("{p}.proj.b"), vec![flat], Init::Zeros));

        let dec_in = if cfg.skip_connections { 2 * c } else { c };
        for i in 0..cfg.encoder_depth - 1 {
            v.push(spec(
                format!("{p}.dec{i}.conv.w"),
                vec![dec_in, c, KERNEL_T, KERNEL_F],
                conv_xavier(dec_in, c),
            ));
            v.push(spec(format!("{p}.dec{i}.conv.b"), vec![c], Init::Zeros));
            if cfg.gate_enabled {
                v.push(spec(
                    format!("{p}.dec{i}.gate.w"),
                    vec![dec_in, c, KERNEL_T, KERNEL_F],
                    conv_xavier(dec_in, c),
                ));
                v.push(spec(format!("{p}.dec{i}.gate.b"), vec![c], Init::Zeros));
            }
            v.push(spec(format!("{p}.dec{i}.norm.gamma"), vec![c], Init::Ones));
            v.push(spec(format!("{p}.dec{i}.norm.beta"), vec![c], Init::Zeros));
            v.push(spec(
                format!("{p}.dec{i}.act.alpha"),
                vec![1],
                Init::Const(PRELU_INIT),
            ));
        }
        v.push(spec(
            format!("{p}.out.w"),
            vec![dec_in, 2, KERNEL_T, KERNEL_F],
            conv_xavier(dec_in, 2),
        ));
        v.push(spec(format!("{p}.out.b"), vec![2], Init::Zeros));
    }
    Ok(v)
}

/// Named parameters plus the architecture they instantiate. Map order is
/// canonical and drives weight-file layout.
#[derive(Clone, Debug)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub params: IndexMap<String, Tensor<f32>>,
}

impl ModelWeights {
    pub fn get(&self, name: &str) -> Result<&Tensor<f32>, ModelError> {
        self.params
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Checks that the parameter set matches the config exactly (same
    /// names, same shapes, nothing extra).
    pub fn verify_shapes(&self) -> Result<(), ModelError> {
        let specs = param_specs(&self.config)?;
        if specs.len() != self.params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, found {}",
                specs.len(),
                self.params.len()
            )));
        }
        for s in &specs {
            let t = self.get(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic initialization: Xavier-uniform weights, zero biases
/// (forget gates at 1), unit norm scales. Same config and seed always
/// produce bit-identical parameters.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights, ModelError> {
    let specs = param_specs(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = IndexMap::with_capacity(specs.len());
    for s in specs {
        let numel: usize = s.shape.iter().product();
        let data: Vec<f32> = match s.init {
            Init::Xavier { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..numel)
                    .map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * a) as f32)
                    .collect()
            }
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Const(v) => vec![v as f32; numel],
            Init::LstmBias { units } => {
                let mut b = vec![0.0f32; numel];
                b[units..2 * units].iter_mut().for_each(|v| *v = 1.0);
                b
            }
        };
        params.insert(s.name, Tensor::new(s.shape, data)?);
    }
    Ok(ModelWeights {
        config: cfg.clone(),
        params,
    })
}

/// Reconstructs the architecture from parameter names and shapes. The bin
/// count is recovered by matching the LSTM input width against the encoder
/// chain (161 preferred; otherwise the smallest bin count that fits).
/// Norm mode is not stored in weights and defaults to cumulative.
pub fn infer_config(params: &IndexMap<String, Tensor<f32>>) -> Result<ModelConfig, ModelError> {
    let srnn_enabled = params.contains_key("srnn.entry.conv.w");
    let mut stages = 0usize;
    for name in params.keys() {
        if let Some(rest) = name.strip_prefix("cell") {
            if let Some(dot) = rest.find('.') {
                if let Ok(q) = rest[..dot].parse::<usize>() {
                    stages = stages.max(q);
                }
            }
        }
    }
    if stages == 0 {
        return Err(ModelError::Config("no cell parameters found".into()));
    }
    let enc0 = params
        .get("cell1.enc0.conv.w")
        .ok_or_else(|| ModelError::MissingParam("cell1.enc0.conv.w".into()))?;
    let channels = enc0.dim(0);
    let mut encoder_depth = 0;
    while params.contains_key(&format!("cell1.enc{encoder_depth}.conv.w")) {
        encoder_depth += 1;
    }
    let mut lstm_layers = 0;
    while params.contains_key(&format!("cell1.lstm{lstm_layers}.w_ih")) {
        lstm_layers += 1;
    }
    if lstm_layers == 0 {
        return Err(ModelError::MissingParam("cell1.lstm0.w_ih".into()));
    }
    let w_hh = params
        .get("cell1.lstm0.w_hh")
        .ok_or_else(|| ModelError::MissingParam("cell1.lstm0.w_hh".into()))?;
    let lstm_units = w_hh.dim(1);
    let gate_enabled = params.contains_key("cell1.enc0.gate.w");
    let out_w = params
        .get("cell1.out.w")
        .ok_or_else(|| ModelError::MissingParam("cell1.out.w".into()))?;
    let skip_connections = out_w.dim(0) == 2 * channels;

    let w_ih = params
        .get("cell1.lstm0.w_ih")
        .ok_or_else(|| ModelError::MissingParam("cell1.lstm0.w_ih".into()))?;
    let flat = w_ih.dim(1);
    if channels == 0 || flat % channels != 0 {
        return Err(ModelError::Config(format!(
            "LSTM input width {flat} is not a multiple of {channels} channels"
        )));
    }
    let f_last = flat / channels;
    let chain_end = |bins: usize| -> Option<usize> {
        encoder_chain_from(bins, encoder_depth)
            .ok()
            .and_then(|c| c.last().copied())
    };
    let bins = if chain_end(161) == Some(f_last) {
        161
    } else {
        (2..=20_000)
            .find(|&k| chain_end(k) == Some(f_last))
            .ok_or_else(|| {
                ModelError::Config(format!(
                    "no bin count reaches {f_last} bins after {encoder_depth} encoder blocks"
                ))
            })?
    };

    Ok(ModelConfig {
        stages,
        bins,
        channels,
        encoder_depth,
        lstm_layers,
        lstm_units,
        gate_enabled,
        srnn_enabled,
        skip_connections,
        norm: NormMode::Cumulative,
    })
}

/// Carry-over between stages at inference time.
#[derive(Clone, Debug)]
pub struct StageState {
    /// 1-based index of the stage the next `forward_stage` call will run.
    pub next_stage: usize,
    /// Previous estimate, the stage-zero value being the noisy input itself.
    pub prev: Spectrogram,
    /// ConvGRU hidden state, `None` before the first stage.
    pub hidden: Option<Tensor<f32>>,
    /// How many enhancement cells have actually executed.
    pub cells_invoked: usize,
}

pub fn initial_state(x: &Spectrogram) -> StageState {
    StageState {
        next_stage: 1,
        prev: x.clone(),
        hidden: None,
        cells_invoked: 0,
    }
}

/// On-tape outputs of one stage.
pub struct StageVars {
    pub estimate: Var,
    pub hidden: Option<Var>,
}

/// Builds stage `q` of the refinement graph on `tape`. `resolve` maps a
/// parameter name to a tape node, letting inference bind constants and
/// training bind differentiable leaves through the same code path.
pub fn stage_graph<F>(
    tape: &mut Tape<f32>,
    resolve: &mut F,
    cfg: &ModelConfig,
    q: usize,
    x2: Var,
    prev2: Var,
    hidden: Option<Var>,
) -> Result<StageVars, ModelError>
where
    F: FnMut(&mut Tape<f32>, &str) -> Result<Var, ModelError>,
{
    if q == 0 || q > cfg.stages {
        return Err(ModelError::Config(format!(
            "stage {q} out of range 1..={}",
            cfg.stages
        )));
    }
    let c = cfg.channels;
    let bins = tape.value(x2).dim(1);
    let frames = tape.value(x2).dim(2);
    let chain = encoder_chain_from(bins, cfg.encoder_depth)?;
    let f_last = *chain.last().expect("chain nonempty");

    let same = Conv2dCfg {
        stride_f: 1,
        pad_f: PAD_F,
    };
    let down = Conv2dCfg {
        stride_f: STRIDE_F,
        pad_f: PAD_F,
    };
    let norm_cfg = NormCfg {
        mode: cfg.norm,
        eps: NORM_EPS,
    };

    // Entry block: Cat[X, prev estimate] -> C channels.
    let prefix = if cfg.srnn_enabled {
        "srnn".to_string()
    } else {
        format!("cell{q}")
    };
    let inp = tape.concat0(&[x2, prev2])?;
    let (ew, eb) = (
        resolve(tape, &format!("{prefix}.entry.conv.w"))?,
        resolve(tape, &format!("{prefix}.entry.conv.b"))?,
    );
    let mut e = tape.conv2d(inp, ew, eb, same)?;
    let (gamma, beta) = (
        resolve(tape, &format!("{prefix}.entry.norm.gamma"))?,
        resolve(tape, &format!("{prefix}.entry.norm.beta"))?,
    );
    e = tape.instance_norm(e, gamma, beta, norm_cfg)?;
    let alpha = resolve(tape, &format!("{prefix}.entry.act.alpha"))?;
    e = tape.prelu(e, alpha)?;

    // Stage recurrence.
    let (mut cur, new_hidden) = if cfg.srnn_enabled {
        let h = match hidden {
            Some(h) => h,
            None => tape.constant(Tensor::zeros(&[c, bins, frames])),
        };
        let h2 = conv_gru(tape, resolve, e, h, same)?;
        (h2, Some(h2))
    } else {
        (e, None)
    };

    // Encoder; outputs retained for skip connections.
    let mut skips = Vec::with_capacity(cfg.encoder_depth);
    for i in 0..cfg.encoder_depth {
        let base = format!("cell{q}.enc{i}");
        let (w, b) = (
            resolve(tape, &format!("{base}.conv.w"))?,
            resolve(tape, &format!("{base}.conv.b"))?,
        );
        let mut a = if cfg.gate_enabled {
            let (wg, bg) = (
                resolve(tape, &format!("{base}.gate.w"))?,
                resolve(tape, &format!("{base}.gate.b"))?,
            );
            tape.glu_conv2d(cur, w, b, wg, bg, down)?
        } else {
            tape.conv2d(cur, w, b, down)?
        };
        let (gamma, beta) = (
            resolve(tape, &format!("{base}.norm.gamma"))?,
            resolve(tape, &format!("{base}.norm.beta"))?,
        );
        a = tape.instance_norm(a, gamma, beta, norm_cfg)?;
        let alpha = resolve(tape, &format!("{base}.act.alpha"))?;
        a = tape.prelu(a, alpha)?;
        skips.push(a);
        cur = a;
    }

    // Frame-recurrent bottleneck.
    let w_ih0 = resolve(tape, &format!("cell{q}.lstm0.w_ih"))?;
    if tape.value(w_ih0).dim(1) != c * f_last {
        return Err(ModelError::Config(format!(
            "weights expect LSTM input width {}, but {} bins give {}",
            tape.value(w_ih0).dim(1),
            bins,
            c * f_last
        )));
    }
    let mut r = tape.reshape(cur, vec![c * f_last, frames])?;
    for j in 0..cfg.lstm_layers {
        let base = format!("cell{q}.lstm{j}");
        let w_ih = if j == 0 {
            w_ih0
        } else {
            resolve(tape, &format!("{base}.w_ih"))?
        };
        let w_hh = resolve(tape, &format!("{base}.w_hh"))?;
        let bias = resolve(tape, &format!("{base}.bias"))?;
        let h0 = tape.constant(Tensor::zeros(&[cfg.lstm_units]));
        let c0 = tape.constant(Tensor::zeros(&[cfg.lstm_units]));
        r = tape.lstm(r, w_ih, w_hh, bias, h0, c0)?;
    }
    let (pw, pb) = (
        resolve(tape, &format!("cell{q}.proj.w"))?,
        resolve(tape, &format!("cell{q}.proj.b"))?,
    );
    let proj = tape.linear(r, pw, pb)?;
    cur = tape.reshape(proj, vec![c, f_last, frames])?;

    // Decoder mirrors the encoder back up the chain.
    for i in 0..cfg.encoder_depth - 1 {
        let base = format!("cell{q}.dec{i}");
        let din = if cfg.skip_connections {
            tape.concat0(&[cur, skips[cfg.encoder_depth - 1 - i]])?
        } else {
            cur
        };
        let f_in = chain[cfg.encoder_depth - i];
        let f_target = chain[cfg.encoder_depth - i - 1];
        let up = Deconv2dCfg {
            stride_f: STRIDE_F,
            pad_f: PAD_F,
            out_pad_f: decoder_out_pad(f_in, f_target)?,
        };
        let (w, b) = (
            resolve(tape, &format!("{base}.conv.w"))?,
            resolve(tape, &format!("{base}.conv.b"))?,
        );
        let mut a = if cfg.gate_enabled {
            let (wg, bg) = (
                resolve(tape, &format!("{base}.gate.w"))?,
                resolve(tape, &format!("{base}.gate.b"))?,
            );
            tape.glu_deconv2d(din, w, b, wg, bg, up)?
        } else {
            tape.deconv2d(din, w, b, up)?
        };
        let (gamma, beta) = (
            resolve(tape, &format!("{base}.norm.gamma"))?,
            resolve(tape, &format!("{base}.norm.beta"))?,
        );
        a = tape.instance_norm(a, gamma, beta, norm_cfg)?;
        let alpha = resolve(tape, &format!("{base}.act.alpha"))?;
        cur = tape.prelu(a, alpha)?;
    }

    // Output block: plain deconv to the two RI planes.
    let din = if cfg.skip_connections {
        tape.concat0(&[cur, skips[0]])?
    } else {
        cur
    };
    let up = Deconv2dCfg {
        stride_f: STRIDE_F,
        pad_f: PAD_F,
        out_pad_f: decoder_out_pad(chain[1], chain[0])?,
    };
    let (ow, ob) = (
        resolve(tape, &format!("cell{q}.out.w"))?,
        resolve(tape, &format!("cell{q}.out.b"))?,
    );
    let estimate = tape.deconv2d(din, ow, ob, up)?;
    Ok(StageVars {
        estimate,
        hidden: new_hidden,
    })
}

/// Convolutional GRU cell recurrent over the stage index; gates use the
/// same causal convolution geometry as the entry block.
fn conv_gru<F>(
    tape: &mut Tape<f32>,
    resolve: &mut F,
    x: Var,
    h: Var,
    same: Conv2dCfg,
) -> Result<Var, ModelError>
where
    F: FnMut(&mut Tape<f32>, &str) -> Result<Var, ModelError>,
{
    let xh = tape.concat0(&[x, h])?;
    let (zw, zb) = (
        resolve(tape, "srnn.gru.update.w")?,
        resolve(tape, "srnn.gru.update.b")?,
    );
    let z = tape.conv2d(xh, zw, zb, same)?;
    let z = tape.sigmoid(z);
    let (rw, rb) = (
        resolve(tape, "srnn.gru.reset.w")?,
        resolve(tape, "srnn.gru.reset.b")?,
    );
    let r = tape.conv2d(xh, rw, rb, same)?;
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, h)?;
    let xrh = tape.concat0(&[x, rh])?;
    let (cw, cb) = (
        resolve(tape, "srnn.gru.cand.w")?,
        resolve(tape, "srnn.gru.cand.b")?,
    );
    let cand = tape.conv2d(xrh, cw, cb, same)?;
    let cand = tape.tanh_act(cand);
    let keep = tape.affine(z, -1.0, 1.0);
    let a = tape.mul(keep, h)?;
    let b = tape.mul(z, cand)?;
    Ok(tape.add(a, b)?)
}

/// Runs exactly one stage on a fresh tape with constant-bound weights.
pub fn forward_stage(
    w: &ModelWeights,
    x: &Spectrogram,
    st: &StageState,
) -> Result<(Spectrogram, StageState), ModelError> {
    if st.next_stage > w.config.stages {
        return Err(ModelError::Config(format!(
            "all {} stages already run",
            w.config.stages
        )));
    }
    let mut tape = Tape::new();
    let x2 = tape.constant(x.to_ri_tensor::<f32>());
    let prev2 = tape.constant(st.prev.to_ri_tensor::<f32>());
    let hidden = st.hidden.as_ref().map(|h| tape.constant(h.clone()));
    let mut resolve = |tape: &mut Tape<f32>, name: &str| -> Result<Var, ModelError> {
        let t = w.get(name)?.clone();
        Ok(tape.constant(t))
    };
    let sv = stage_graph(
        &mut tape,
        &mut resolve,
        &w.config,
        st.next_stage,
        x2,
        prev2,
        hidden,
    )?;
    let estimate = Spectrogram::from_ri_tensor(tape.value(sv.estimate))?;
    let hidden = sv.hidden.map(|h| tape.value(h).clone());
    let next = StageState {
        next_stage: st.next_stage + 1,
        prev: estimate.clone(),
        hidden,
        cells_invoked: st.cells_invoked + 1,
    };
    Ok((estimate, next))
}

/// Runs every stage, returning all intermediate estimates in order.
pub fn forward_all(w: &ModelWeights, x: &Spectrogram) -> Result<Vec<Spectrogram>, ModelError> {
    let mut st = initial_state(x);
    let mut out = Vec::with_capacity(w.config.stages);
    for _ in 0..w.config.stages {
        let (est, next) = forward_stage(w, x, &st)?;
        out.push(est);
        st = next;
    }
    Ok(out)
}
