//! Parameterized layers: linear / 1×1 projections, strided conv stacks with
//! batch normalization, an LSTM question encoder, and MLPs with inverted
//! dropout.
//!
//! Parameters live in a [`ParamSet`] owned by the caller; a [`Forward`]
//! context binds them onto a tape on first use, so a fresh tape per step sees
//! the current parameter values and gradient collection walks the same
//! binding list.

use rand_chacha::ChaCha8Rng;

use crate::rng;
use crate::scalar::{s, Scalar};
use crate::tape::{Padding, Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct ParamEntry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Named parameter store. Registration order is fixed, which makes parameter
/// counts, initialization streams, optimizer state layout, and checkpoint
/// layout all deterministic functions of the architecture.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, true)
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn register_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(
            !self.entries.iter().any(|e| e.name == name),
            "parameter {name:?} registered twice"
        );
        self.entries.push(ParamEntry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .map(ParamId)
            .collect()
    }

    /// Total trainable element count.
    pub fn trainable_elements(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Total element count including buffers.
    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

/// Per-step forward context: a tape, the parameter store, lazily created
/// parameter bindings, and the current mode.
pub struct Forward<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a mut ParamSet<T>,
    bound: Vec<Option<Var>>,
    pub mode: Mode,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a mut ParamSet<T>, mode: Mode) -> Self {
        let n = params.len();
        Forward { tape, params, bound: vec![None; n], mode, rng: None }
    }

    /// Train-mode forward with a per-step rng for dropout masks.
    pub fn with_rng(
        tape: &'a mut Tape<T>,
        params: &'a mut ParamSet<T>,
        mode: Mode,
        rng: &'a mut ChaCha8Rng,
    ) -> Self {
        let n = params.len();
        Forward { tape, params, bound: vec![None; n], mode, rng: Some(rng) }
    }

    /// Node for a parameter, created on first use. Trainable parameters are
    /// gradient leaves; buffers are constants.
    pub fn bind(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let var = if self.params.is_trainable(id) {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.0] = Some(var);
        var
    }

    /// All parameter bindings created so far, in registration order.
    pub fn bindings(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|var| (ParamId(i), var)))
            .collect()
    }

    fn rng(&mut self) -> Result<&mut ChaCha8Rng> {
        match self.rng.as_deref_mut() {
            Some(r) => Ok(r),
            None => Err(TensorError::arg(
                "dropout",
                "train-mode forward with dropout requires an rng",
            )),
        }
    }
}

// ── Initialization ────────────────────────────────────────────────────────

/// Uniform in [−s, s] with s = √(6 / (fan_in + fan_out)).
pub fn glorot_uniform<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
) -> Tensor<T> {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(rng::uniform_sym(rng, s))).collect();
    Tensor::new(shape, data).expect("valid init shape")
}

// ── Linear ────────────────────────────────────────────────────────────────

/// Affine map `x[n,in] · w[in,out] + b[1,out]`. Also used as a 1×1
/// convolution by flattening spatial cells into rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = params.register(
            format!("{name}.w"),
            glorot_uniform(rng, vec![in_dim, out_dim], in_dim, out_dim),
        );
        let b = bias.then(|| params.register(format!("{name}.b"), Tensor::zeros(vec![1, out_dim])));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<T>, x: Var) -> Result<Var> {
        let w = fwd.bind(self.w);
        let y = fwd.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = fwd.bind(b);
                fwd.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

// ── Batch normalization ───────────────────────────────────────────────────

/// Per-channel batch normalization over the last axis. Train mode uses batch
/// statistics (biased variance) and updates running statistics with
/// `r ← momentum·r + (1−momentum)·batch`; eval mode uses the running
/// statistics. ε = 1e-5, momentum = 0.9.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        let gamma = params.register(format!("{name}.gamma"), Tensor::filled(vec![1, channels], T::one()));
        let beta = params.register(format!("{name}.beta"), Tensor::zeros(vec![1, channels]));
        let running_mean =
            params.register_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![1, channels]));
        let running_var = params.register_buffer(
            format!("{name}.running_var"),
            Tensor::filled(vec![1, channels], T::one()),
        );
        BatchNorm { gamma, beta, running_mean, running_var, channels, eps: 1e-5, momentum: 0.9 }
    }

    /// `x` is `[batch, .., channels]`; statistics pool over everything except
    /// the channel axis. Train mode requires at least two samples.
    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<T>, x: Var) -> Result<Var> {
        let shape = fwd.tape.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if c != self.channels {
            return Err(TensorError::shape(
                "batch_norm",
                format!("expected {} channels, got {c}", self.channels),
            ));
        }
        let rows: usize = shape.iter().product::<usize>() / c;
        let x2 = fwd.tape.reshape(x, vec![rows, c])?;
        let normalized = match fwd.mode {
            Mode::Train => {
                if shape[0] < 2 {
                    return Err(TensorError::arg(
                        "batch_norm",
                        "train mode requires a batch of at least 2 samples",
                    ));
                }
                let sum = fwd.tape.sum_axis0(x2)?;
                let mean = fwd.tape.scale(sum, 1.0 / rows as f64);
                let centered = fwd.tape.sub(x2, mean)?;
                let sq = fwd.tape.mul(centered, centered)?;
                let var_sum = fwd.tape.sum_axis0(sq)?;
                let var = fwd.tape.scale(var_sum, 1.0 / rows as f64);
                self.update_running(fwd, mean, var);
                let shifted = fwd.tape.add_scalar(var, self.eps);
                let std = fwd.tape.sqrt(shifted);
                let inv = fwd.tape.recip(std);
                fwd.tape.mul(centered, inv)?
            }
            Mode::Eval => {
                let rm = fwd.bind(self.running_mean);
                let rv = fwd.bind(self.running_var);
                let centered = fwd.tape.sub(x2, rm)?;
                let shifted = fwd.tape.add_scalar(rv, self.eps);
                let std = fwd.tape.sqrt(shifted);
                let inv = fwd.tape.recip(std);
                fwd.tape.mul(centered, inv)?
            }
        };
        let gamma = fwd.bind(self.gamma);
        let beta = fwd.bind(self.beta);
        let scaled = fwd.tape.mul(normalized, gamma)?;
        let out = fwd.tape.add(scaled, beta)?;
        fwd.tape.reshape(out, shape)
    }

    fn update_running<T: Scalar>(&self, fwd: &mut Forward<T>, mean: Var, var: Var) {
        let m = s::<T>(self.momentum);
        let one_m = s::<T>(1.0 - self.momentum);
        let batch_mean = fwd.tape.value(mean).to_vec();
        let batch_var = fwd.tape.value(var).to_vec();
        for (id, batch) in [(self.running_mean, batch_mean), (self.running_var, batch_var)] {
            let running = fwd.params.get_mut(id);
            for (r, b) in running.data_mut().iter_mut().zip(batch) {
                *r = m * *r + one_m * b;
            }
        }
    }
}

// ── Convolution stack ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvStackSpec {
    pub layers: Vec<ConvLayerSpec>,
    pub batch_norm: bool,
}

impl ConvStackSpec {
    /// Spatial extent of the output map for a square input, same padding.
    pub fn out_extent(&self, input: usize) -> usize {
        self.layers.iter().fold(input, |e, l| e.div_ceil(l.stride))
    }

    /// Smallest input extent the stack accepts: each stride-s layer needs at
    /// least `s` input pixels so every layer sees a non-degenerate map.
    pub fn min_extent(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.out_channels).unwrap_or(0)
    }
}

struct ConvBlock {
    kernel: ParamId,
    bias: ParamId,
    bn: Option<BatchNorm>,
    stride: usize,
}

/// Image encoder: strided same-padding convolutions, each followed by
/// optional batch normalization and a ReLU.
pub struct ConvStack {
    blocks: Vec<ConvBlock>,
    pub spec: ConvStackSpec,
    pub in_channels: usize,
}

impl ConvStack {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        spec: ConvStackSpec,
    ) -> Self {
        assert!(!spec.layers.is_empty(), "conv stack needs at least one layer");
        let mut blocks = Vec::new();
        let mut c_in = in_channels;
        for (i, layer) in spec.layers.iter().enumerate() {
            let k = layer.kernel;
            let fan_in = k * k * c_in;
            let fan_out = k * k * layer.out_channels;
            let kernel = params.register(
                format!("{name}.{i}.kernel"),
                glorot_uniform(rng, vec![k, k, c_in, layer.out_channels], fan_in, fan_out),
            );
            let bias =
                params.register(format!("{name}.{i}.bias"), Tensor::zeros(vec![1, layer.out_channels]));
            let bn = spec
                .batch_norm
                .then(|| BatchNorm::new(params, &format!("{name}.{i}.bn"), layer.out_channels));
            blocks.push(ConvBlock { kernel, bias, bn, stride: layer.stride });
            c_in = layer.out_channels;
        }
        ConvStack { blocks, spec, in_channels }
    }

    /// Encodes `[batch, h, w, c_in]` images into a `[batch, h', w', c_out]`
    /// feature map.
    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<T>, images: Var) -> Result<Var> {
        let shape = fwd.tape.shape(images).to_vec();
        if shape.len() != 4 || shape[3] != self.in_channels {
            return Err(TensorError::shape(
                "cnn_encode",
                format!("expected [b,h,w,{}], got {shape:?}", self.in_channels),
            ));
        }
        let min = self.spec.min_extent();
        if shape[1] < min || shape[2] < min {
            return Err(TensorError::shape(
                "cnn_encode",
                format!("image {}×{} below the stack minimum {min}×{min}", shape[1], shape[2]),
            ));
        }
        let mut x = images;
        for block in &self.blocks {
            let kernel = fwd.bind(block.kernel);
            let conv = fwd.tape.conv2d(x, kernel, block.stride, Padding::Same)?;
            let bias = fwd.bind(block.bias);
            let mut y = fwd.tape.add(conv, bias)?;
            if let Some(bn) = &block.bn {
                y = bn.forward(fwd, y)?;
            }
            x = fwd.tape.relu(y);
        }
        Ok(x)
    }
}

// ── LSTM ──────────────────────────────────────────────────────────────────

/// Single-layer LSTM over embedded token ids, returning the final hidden
/// state of each sequence. Gate order is [input, forget, cell, output]; the
/// forget-gate bias starts at 1.
pub struct Lstm {
    pub embed: ParamId,
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        vocab: usize,
        embed_dim: usize,
        hidden: usize,
    ) -> Self {
        let embed = params.register(
            format!("{name}.embed"),
            glorot_uniform(rng, vec![vocab, embed_dim], vocab, embed_dim),
        );
        let w = params.register(
            format!("{name}.w"),
            glorot_uniform(rng, vec![embed_dim, 4 * hidden], embed_dim, 4 * hidden),
        );
        let u = params.register(
            format!("{name}.u"),
            glorot_uniform(rng, vec![hidden, 4 * hidden], hidden, 4 * hidden),
        );
        let mut bias = Tensor::zeros(vec![1, 4 * hidden]);
        for i in hidden..2 * hidden {
            bias.data_mut()[i] = T::one();
        }
        let b = params.register(format!("{name}.b"), bias);
        Lstm { embed, w, u, b, vocab, embed_dim, hidden }
    }

    /// Encodes a batch of variable-length sequences, masking finished rows so
    /// each row's state freezes at its own final step.
    pub fn forward_batch<T: Scalar>(&self, fwd: &mut Forward<T>, tokens: &[Vec<u16>]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(TensorError::arg("lstm_encode", "empty batch"));
        }
        for (i, seq) in tokens.iter().enumerate() {
            if seq.is_empty() {
                return Err(TensorError::arg("lstm_encode", format!("sequence {i} is empty")));
            }
            if let Some(&bad) = seq.iter().find(|&&t| t as usize >= self.vocab) {
                return Err(TensorError::arg(
                    "lstm_encode",
                    format!("token id {bad} outside vocabulary of {}", self.vocab),
                ));
            }
        }
        let batch = tokens.len();
        let max_len = tokens.iter().map(|s| s.len()).max().unwrap();
        let h0 = self.hidden;

        let embed = fwd.bind(self.embed);
        let w = fwd.bind(self.w);
        let u = fwd.bind(self.u);
        let b = fwd.bind(self.b);

        let mut h = fwd.tape.constant(Tensor::zeros(vec![batch, h0]));
        let mut c = fwd.tape.constant(Tensor::zeros(vec![batch, h0]));

        for t in 0..max_len {
            let ids: Vec<usize> =
                tokens.iter().map(|seq| *seq.get(t).unwrap_or(&0) as usize).collect();
            let x_t = fwd.tape.gather_rows(embed, &ids)?;
            let xw = fwd.tape.matmul(x_t, w)?;
            let hu = fwd.tape.matmul(h, u)?;
            let lin = fwd.tape.add(xw, hu)?;
            let pre = fwd.tape.add(lin, b)?;
            let i_raw = fwd.tape.slice_cols(pre, 0, h0)?;
            let f_raw = fwd.tape.slice_cols(pre, h0, h0)?;
            let g_raw = fwd.tape.slice_cols(pre, 2 * h0, h0)?;
            let o_raw = fwd.tape.slice_cols(pre, 3 * h0, h0)?;
            let i_g = fwd.tape.sigmoid(i_raw);
            let f_g = fwd.tape.sigmoid(f_raw);
            let g_g = fwd.tape.tanh(g_raw);
            let o_g = fwd.tape.sigmoid(o_raw);
            let keep = fwd.tape.mul(f_g, c)?;
            let write = fwd.tape.mul(i_g, g_g)?;
            let c_next = fwd.tape.add(keep, write)?;
            let c_tanh = fwd.tape.tanh(c_next);
            let h_next = fwd.tape.mul(o_g, c_tanh)?;

            if tokens.iter().all(|seq| seq.len() > t) {
                c = c_next;
                h = h_next;
            } else {
                // Rows whose sequence already ended keep their frozen state.
                let active: Vec<T> = tokens
                    .iter()
                    .map(|seq| if seq.len() > t { T::one() } else { T::zero() })
                    .collect();
                let frozen: Vec<T> = active.iter().map(|&a| T::one() - a).collect();
                let mask = fwd.tape.constant(Tensor::new(vec![batch], active)?);
                let inv = fwd.tape.constant(Tensor::new(vec![batch], frozen)?);
                let c_new = fwd.tape.scale_rows(c_next, mask)?;
                let c_old = fwd.tape.scale_rows(c, inv)?;
                c = fwd.tape.add(c_new, c_old)?;
                let h_new = fwd.tape.scale_rows(h_next, mask)?;
                let h_old = fwd.tape.scale_rows(h, inv)?;
                h = fwd.tape.add(h_new, h_old)?;
            }
        }
        Ok(h)
    }

    /// Encodes one sequence to its final hidden state `[1, hidden]`.
    pub fn encode<T: Scalar>(&self, fwd: &mut Forward<T>, tokens: &[u16]) -> Result<Var> {
        self.forward_batch(fwd, &[tokens.to_vec()])
    }
}

// ── MLP ───────────────────────────────────────────────────────────────────

/// Inverted dropout: train mode keeps each element with probability 1−rate
/// and scales by 1/(1−rate); eval mode is the identity.
pub fn dropout<T: Scalar>(fwd: &mut Forward<T>, x: Var, rate: f64) -> Result<Var> {
    if rate == 0.0 || fwd.mode == Mode::Eval {
        return Ok(x);
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::arg("dropout", format!("rate {rate} outside [0, 1)")));
    }
    let n = fwd.tape.value(x).len();
    let shape = fwd.tape.shape(x).to_vec();
    let keep = 1.0 - rate;
    let inv = T::from_f64(1.0 / keep);
    let rng = fwd.rng()?;
    let mask: Vec<T> = (0..n)
        .map(|_| if rng::unit_f64(rng) < keep { inv } else { T::zero() })
        .collect();
    let mask = fwd.tape.constant(Tensor::new(shape, mask)?);
    fwd.tape.mul(x, mask)
}

/// Affine + ReLU hidden layers with optional dropout after each activation,
/// then an affine-only output layer.
pub struct Mlp {
    pub hidden: Vec<Linear>,
    pub out: Linear,
    pub dropout: f64,
}

impl Mlp {
    /// `dims = [in, h1, .., out]` with at least in and out.
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: &[usize],
        dropout: f64,
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs input and output dims");
        let mut hidden = Vec::new();
        for i in 0..dims.len() - 2 {
            hidden.push(Linear::new(
                params,
                rng,
                &format!("{name}.{i}"),
                dims[i],
                dims[i + 1],
                true,
            ));
        }
        let out = Linear::new(
            params,
            rng,
            &format!("{name}.{}", dims.len() - 2),
            dims[dims.len() - 2],
            dims[dims.len() - 1],
            true,
        );
        Mlp { hidden, out, dropout }
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.hidden {
            let lin = layer.forward(fwd, h)?;
            let act = fwd.tape.relu(lin);
            h = dropout(fwd, act, self.dropout)?;
        }
        self.out.forward(fwd, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn linear_identity() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = stream_rng(0, 0);
        let lin = Linear::new(&mut params, &mut rng, "l", 2, 2, true);
        *params.get_mut(lin.w) = Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &mut params, Mode::Eval);
        let x = fwd.tape.constant(Tensor::from_f64(vec![1, 2], &[3.0, 4.0]).unwrap());
        let y = lin.forward(&mut fwd, x).unwrap();
        assert_eq!(tape.value(y), &[3.0, 4.0]);
    }

    #[test]
    fn mlp_dropout_zero_matches_eval() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = stream_rng(1, 0);
        let mlp = Mlp::new(&mut params, &mut rng, "m", &[3, 5, 2], 0.0);
        let x = Tensor::from_f64(vec![1, 3], &[0.3, -0.2, 0.9]).unwrap();
        let mut out = Vec::new();
        for mode in [Mode::Train, Mode::Eval] {
            let mut tape = Tape::new();
            let mut step_rng = stream_rng(9, 9);
            let mut fwd = Forward::with_rng(&mut tape, &mut params, mode, &mut step_rng);
            let xv = fwd.tape.constant(x.clone());
            let y = mlp.forward(&mut fwd, xv).unwrap();
            out.push(tape.value(y).to_vec());
        }
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn dropout_eval_deterministic() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = stream_rng(2, 0);
        let mlp = Mlp::new(&mut params, &mut rng, "m", &[4, 8, 3], 0.5);
        let x = Tensor::from_f64(vec![1, 4], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut outs = Vec::new();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let mut fwd = Forward::new(&mut tape, &mut params, Mode::Eval);
            let xv = fwd.tape.constant(x.clone());
            let y = mlp.forward(&mut fwd, xv).unwrap();
            outs.push(tape.value(y).to_vec());
        }
        assert_eq!(outs[0], outs[1]);
    }

    #[test]
    fn batch_norm_normalized_input_is_identityish() {
        let mut params = ParamSet::<f64>::new();
        let bn = BatchNorm::new(&mut params, "bn", 1);
        // batch of 2 samples, channel mean 0 and variance 1
        let x = Tensor::from_f64(vec![2, 1], &[1.0, -1.0]).unwrap();
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &mut params, Mode::Train);
        let xv = fwd.tape.constant(x);
        let y = bn.forward(&mut fwd, xv).unwrap();
        for (o, e) in tape.value(y).iter().zip([1.0, -1.0]) {
            assert!((o - e).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_constant_channel_zero_output() {
        let mut params = ParamSet::<f64>::new();
        let bn = BatchNorm::new(&mut params, "bn", 2);
        let x = Tensor::from_f64(vec![3, 2], &[5.0, -2.0, 5.0, -2.0, 5.0, -2.0]).unwrap();
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &mut params, Mode::Train);
        let xv = fwd.tape.constant(x);
        let y = bn.forward(&mut fwd, xv).unwrap();
        assert!(tape.value(y).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn batch_norm_rejects_batch_of_one_in_train() {
        let mut params = ParamSet::<f64>::new();
        let bn = BatchNorm::new(&mut params, "bn", 2);
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &mut params, Mode::Train);
        let xv = fwd.tape.constant(Tensor::zeros(vec![1, 2]));
        assert!(bn.forward(&mut fwd, xv).is_err());
    }

    #[test]
    fn batch_norm_running_stats_match_hand_computation() {
        let mut params = ParamSet::<f64>::new();
        let bn = BatchNorm::new(&mut params, "bn", 1);
        // Two train batches with channel means 2 and 4, biased variances 1 and 4.
        let batches = [
            Tensor::from_f64(vec![2, 1], &[1.0, 3.0]).unwrap(),
            Tensor::from_f64(vec![2, 1], &[2.0, 6.0]).unwrap(),
        ];
        for b in &batches {
            let mut tape = Tape::new();
            let mut fwd = Forward::new(&mut tape, &mut params, Mode::Train);
            let xv = fwd.tape.constant(b.clone());
            bn.forward(&mut fwd, xv).unwrap();
        }
        // r0 = 0, r1 = 0.9·0 + 0.1·2 = 0.2, r2 = 0.9·0.2 + 0.1·4 = 0.58
        let rm = params.get(bn.running_mean).data()[0];
        assert!((rm - 0.58).abs() < 1e-12, "running mean {rm}");
        // v0 = 1, v1 = 0.9·1 + 0.1·1 = 1.0, v2 = 0.9·1.0 + 0.1·4 = 1.3
        let rv = params.get(bn.running_var).data()[0];
        assert!((rv - 1.3).abs() < 1e-12, "running var {rv}");
    }

    #[test]
    fn lstm_zero_weights_zero_output() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = stream_rng(3, 0);
        let lstm = Lstm::new(&mut params, &mut rng, "lstm", 10, 4, 6);
        for id in [lstm.embed, lstm.w, lstm.u, lstm.b] {
            let t = params.get_mut(id);
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &mut params, Mode::Eval);
        let h = lstm.forward_batch(&mut fwd, &[vec![1, 2, 3], vec![4]]).unwrap();
        assert!(tape.value(h).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_rejects_bad_inputs() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = stream_rng(4, 0);
        let lstm = Lstm::new(&mut params, &mut rng, "lstm", 5, 3, 4);
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &mut params, Mode::Eval);
        assert!(lstm.forward_batch(&mut fwd, &[vec![]]).is_err());
        let mut tape2 = Tape::new();
        let mut fwd2 = Forward::new(&mut tape2, &mut params, Mode::Eval);
        assert!(lstm.forward_batch(&mut fwd2, &[vec![5]]).is_err());
    }

    #[test]
    fn lstm_sequence_length_changes_output() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = stream_rng(5, 0);
        let lstm = Lstm::new(&mut params, &mut rng, "lstm", 8, 4, 4);
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &mut params, Mode::Eval);
        let one = lstm.forward_batch(&mut fwd, &[vec![3]]).unwrap();
        let two = lstm.forward_batch(&mut fwd, &[vec![3, 3]]).unwrap();
        let a = tape.value(one).to_vec();
        let b = tape.value(two).to_vec();
        assert_ne!(a, b);
    }
}
