//! SampleCNN-style encoder, projection head, probe heads and checkpoints.

mod spectrum;

use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    kaiming_init, uniform_fan_in, BatchStats, ContainerError, NamedTensors, Scalar, Tape, Tensor, TensorError, Var,
};

pub use spectrum::{filter_spectrum, write_spectra_csv, FilterSpectrum, SpectrumConfig, SpectrumError};

const KERNEL: usize = 3;
const POOL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_length: usize,
    /// Output widths: `channels[0]` for the strided first conv, the rest for
    /// the conv/maxpool blocks. The last entry is the representation size.
    pub channels: Vec<usize>,
    pub projection_dim: usize,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_eps")]
    pub bn_eps: f64,
}

fn pooled(len: usize) -> usize {
    if len >= POOL {
        len / POOL
    } else {
        len
    }
}

fn default_momentum() -> f64 {
    0.1
}

fn default_eps() -> f64 {
    1e-5
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl EncoderConfig {
    /// 59049-sample input, ten downsampling stages, 512-d representation.
    pub fn canonical() -> Self {
        Self {
            input_length: 59049,
            channels: vec![128, 128, 128, 256, 256, 256, 256, 256, 512, 512],
            projection_dim: 128,
            bn_momentum: default_momentum(),
            bn_eps: default_eps(),
        }
    }

    /// 2187-sample input, seven stages, 128-d representation.
    pub fn desk() -> Self {
        Self {
            input_length: 2187,
            channels: vec![32, 32, 64, 64, 64, 128, 128],
            projection_dim: 128,
            bn_momentum: default_momentum(),
            bn_eps: default_eps(),
        }
    }

    /// Same layout with the input length for another sample rate; the final
    /// temporal size is averaged away.
    pub fn with_input_length(mut self, input_length: usize) -> Self {
        self.input_length = input_length;
        self
    }

    pub fn representation_dim(&self) -> usize {
        *self.channels.last().expect("validated config has channels")
    }

    /// Temporal size left after every stage. Pooling is skipped once the
    /// size drops below the pool width, so short crops (lower sample rates)
    /// still fit the full stack.
    pub fn final_length(&self) -> usize {
        self.channels.iter().skip(1).fold(self.input_length / KERNEL, |l, _| pooled(l))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(ModelError::InvalidConfig("channel widths must be positive".into()));
        }
        if self.projection_dim == 0 {
            return Err(ModelError::InvalidConfig("projection_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(ModelError::InvalidConfig("bad batch-norm momentum or eps".into()));
        }
        if self.input_length < KERNEL {
            return Err(ModelError::InvalidConfig(format!("input_length {} too short", self.input_length)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Conv, batch-norm and running statistics of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl ConvLayer {
    fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            weight: kaiming_init(&[out_ch, in_ch, KERNEL], in_ch * KERNEL, rng),
            bias: Tensor::zeros(&[out_ch]),
            gamma: Tensor::full(&[out_ch], 1.0),
            beta: Tensor::zeros(&[out_ch]),
            running_mean: vec![0.0; out_ch],
            running_var: vec![1.0; out_ch],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: uniform_fan_in(&[output, input], input, rng),
            bias: uniform_fan_in(&[output], input, rng),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Tape handles for one linear layer.
#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

fn register_linear<T: Scalar>(tape: &mut Tape<T>, l: &Linear, trainable: bool) -> LinearVars {
    LinearVars {
        weight: tape.leaf(l.weight.map(|v| T::from_f64(v as f64)), trainable),
        bias: tape.leaf(l.bias.map(|v| T::from_f64(v as f64)), trainable),
    }
}

/// `W2 relu(W1 h + b1) + b2`; shared by the projector and the MLP probe.
pub fn two_layer<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    first: LinearVars,
    second: LinearVars,
) -> Result<Var, TensorError> {
    let a = tape.linear(h, first.weight, Some(first.bias))?;
    let a = tape.relu(a);
    tape.linear(a, second.weight, Some(second.bias))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<ConvLayer>,
}

/// Tape handles for the encoder parameters, in layer order.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    layers: Vec<[Var; 4]>,
}

impl EncoderVars {
    pub fn all(&self) -> Vec<Var> {
        self.layers.iter().flatten().copied().collect()
    }
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let mut in_ch = 1;
        let layers = config
            .channels
            .iter()
            .map(|&out| {
                let l = ConvLayer::new(in_ch, out, rng);
                in_ch = out;
                l
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        EncoderVars {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    [&l.weight, &l.bias, &l.gamma, &l.beta].map(|t| tape.leaf(t.clone(), trainable))
                })
                .collect(),
        }
    }

    /// Runs the conv stack on `[B, 1, L]`, stopping after stage `stop`'s
    /// batch norm when given (before its ReLU and pooling).
    fn run(
        &self,
        tape: &mut Tape,
        vars: &EncoderVars,
        x: Var,
        mode: Mode,
        stop: Option<usize>,
    ) -> Result<(Var, Vec<BatchStats>), TensorError> {
        let mut stats = Vec::new();
        let mut h = x;
        for (i, (layer, v)) in self.layers.iter().zip(&vars.layers).enumerate() {
            let [w, b, g, bt] = *v;
            let (stride, padding) = if i == 0 { (KERNEL, 0) } else { (1, 1) };
            h = tape.conv1d(h, w, Some(b), stride, padding)?;
            h = match mode {
                Mode::Train => {
                    let (out, s) = tape.batchnorm_train(h, g, bt, self.config.bn_eps)?;
                    stats.push(s);
                    out
                }
                Mode::Eval => {
                    tape.batchnorm_eval(h, g, bt, &layer.running_mean, &layer.running_var, self.config.bn_eps)?
                }
            };
            if stop == Some(i) {
                return Ok((h, stats));
            }
            h = tape.relu(h);
            if i > 0 && tape.shape(h)[2] >= POOL {
                h = tape.maxpool1d(h, POOL)?;
            }
        }
        Ok((tape.global_avg_pool(h)?, stats))
    }

    /// `[B, 1, input_length] -> [B, representation_dim]`. Training mode
    /// returns the per-layer batch statistics for [`Encoder::update_running_stats`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &EncoderVars,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<BatchStats>), TensorError> {
        let xs = tape.shape(x);
        if xs.len() != 3 || xs[1] != 1 || xs[2] != self.config.input_length {
            return Err(TensorError::ShapeMismatch(format!(
                "encoder expects [B, 1, {}], got {xs:?}",
                self.config.input_length
            )));
        }
        self.run(tape, vars, x, mode, None)
    }

    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        let m = self.config.bn_momentum;
        for (layer, s) in self.layers.iter_mut().zip(stats) {
            for (r, &b) in layer.running_mean.iter_mut().zip(&s.mean) {
                *r = ((1.0 - m) * *r as f64 + m * b) as f32;
            }
            for (r, &b) in layer.running_var.iter_mut().zip(&s.var) {
                *r = ((1.0 - m) * *r as f64 + m * b) as f32;
            }
        }
    }

    /// Frozen eval-mode representations of a `[B, 1, L]` batch.
    pub fn encode(&self, batch: &Tensor) -> Result<Tensor, TensorError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(batch.clone());
        let (h, _) = self.forward(&mut tape, &vars, x, Mode::Eval)?;
        Ok(tape.value(h).clone())
    }

    /// Eval-mode representations of consecutive `input_length` windows in
    /// `samples`, encoded `chunk` windows at a time. Returns `[n, rep]`.
    pub fn encode_windows(&self, samples: &[f32], chunk: usize) -> Result<Tensor, TensorError> {
        let len = self.config.input_length;
        if samples.is_empty() || !samples.len().is_multiple_of(len) {
            return Err(TensorError::ShapeMismatch(format!(
                "{} samples are not a whole number of {len}-sample windows",
                samples.len()
            )));
        }
        let rep = self.config.representation_dim();
        let mut out = Vec::with_capacity(samples.len() / len * rep);
        for part in samples.chunks(len * chunk.max(1)) {
            let batch = Tensor::new(vec![part.len() / len, 1, len], part.to_vec())?;
            out.extend_from_slice(self.encode(&batch)?.data());
        }
        Tensor::new(vec![samples.len() / len, rep], out)
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias, &l.gamma, &l.beta])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias, &mut l.gamma, &mut l.beta])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub first: Linear,
    pub second: Linear,
}

impl Projector {
    pub fn new<R: Rng + ?Sized>(rep_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            first: Linear::new(rep_dim, rep_dim, rng),
            second: Linear::new(rep_dim, out_dim, rng),
        }
    }

    pub fn register<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> [LinearVars; 2] {
        [
            register_linear(tape, &self.first, trainable),
            register_linear(tape, &self.second, trainable),
        ]
    }

    pub fn forward<T: Scalar>(tape: &mut Tape<T>, vars: &[LinearVars; 2], h: Var) -> Result<Var, TensorError> {
        two_layer(tape, h, vars[0], vars[1])
    }

    /// `[B, rep] -> [B, projection_dim]` without gradient tracking.
    pub fn project(&self, h: &Tensor) -> Result<Tensor, TensorError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let h = tape.constant(h.clone());
        let z = Self::forward(&mut tape, &vars, h)?;
        Ok(tape.value(z).clone())
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        vec![&self.first.weight, &self.first.bias, &self.second.weight, &self.second.bias]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.first.weight,
            &mut self.first.bias,
            &mut self.second.weight,
            &mut self.second.bias,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Linear,
    Mlp,
}

pub const MLP_HIDDEN: usize = 512;

/// Classifier trained on frozen representations.
#[derive(Clone, Debug, PartialEq)]
pub enum ProbeHead {
    Linear(Linear),
    Mlp(Linear, Linear),
}

impl ProbeHead {
    pub fn new<R: Rng + ?Sized>(kind: ProbeKind, input: usize, n_tags: usize, hidden: usize, rng: &mut R) -> Self {
        match kind {
            ProbeKind::Linear => Self::Linear(Linear::new(input, n_tags, rng)),
            ProbeKind::Mlp => Self::Mlp(Linear::new(input, hidden, rng), Linear::new(hidden, n_tags, rng)),
        }
    }

    pub fn register<T: Scalar>(&self, tape: &mut Tape<T>) -> Vec<LinearVars> {
        self.layers().into_iter().map(|l| register_linear(tape, l, true)).collect()
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[LinearVars], h: Var) -> Result<Var, TensorError> {
        match self {
            Self::Linear(_) => tape.linear(h, vars[0].weight, Some(vars[0].bias)),
            Self::Mlp(..) => two_layer(tape, h, vars[0], vars[1]),
        }
    }

    /// Logits `[B, n_tags]` for representations `[B, input]`.
    pub fn logits(&self, h: &Tensor) -> Result<Tensor, TensorError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let h = tape.constant(h.clone());
        let out = self.forward(&mut tape, &vars, h)?;
        Ok(tape.value(out).clone())
    }

    pub fn layers(&self) -> Vec<&Linear> {
        match self {
            Self::Linear(l) => vec![l],
            Self::Mlp(a, b) => vec![a, b],
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let layers: Vec<&mut Linear> = match self {
            Self::Linear(l) => vec![l],
            Self::Mlp(a, b) => vec![a, b],
        };
        layers.into_iter().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers().into_iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }
}

/// Encoder plus projection head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: Encoder,
    pub projector: Projector,
}

impl ModelParams {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self, ModelError> {
        let proj_dim = config.projection_dim;
        let encoder = Encoder::new(config, rng)?;
        let projector = Projector::new(encoder.config.representation_dim(), proj_dim, rng);
        Ok(Self { encoder, projector })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.parameters();
        p.extend(self.projector.parameters());
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.parameters_mut();
        p.extend(self.projector.parameters_mut());
        p
    }

    /// Trainable scalars (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.layers.iter().enumerate() {
            let c = l.out_channels();
            out.push((format!("encoder.{i}.weight"), l.weight.clone()));
            out.push((format!("encoder.{i}.bias"), l.bias.clone()));
            out.push((format!("encoder.{i}.gamma"), l.gamma.clone()));
            out.push((format!("encoder.{i}.beta"), l.beta.clone()));
            out.push((
                format!("encoder.{i}.running_mean"),
                Tensor::new(vec![c], l.running_mean.clone()).expect("channel vector"),
            ));
            out.push((
                format!("encoder.{i}.running_var"),
                Tensor::new(vec![c], l.running_var.clone()).expect("channel vector"),
            ));
        }
        out.push(("projector.0.weight".into(), self.projector.first.weight.clone()));
        out.push(("projector.0.bias".into(), self.projector.first.bias.clone()));
        out.push(("projector.1.weight".into(), self.projector.second.weight.clone()));
        out.push(("projector.1.bias".into(), self.projector.second.bias.clone()));
        out
    }

    fn from_named(config: EncoderConfig, nt: &NamedTensors) -> Result<Self, CheckpointError> {
        config.validate()?;
        // build a skeleton for shapes, then overwrite every tensor
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut params = Self::new(config, &mut rng)?;
        let fetch = |name: String, like: &Tensor| -> Result<Tensor, CheckpointError> {
            let t = nt.get(&name)?;
            if t.shape() != like.shape() {
                return Err(CheckpointError::ShapeMismatch(name));
            }
            Ok(t.clone())
        };
        for (i, l) in params.encoder.layers.iter_mut().enumerate() {
            l.weight = fetch(format!("encoder.{i}.weight"), &l.weight)?;
            l.bias = fetch(format!("encoder.{i}.bias"), &l.bias)?;
            l.gamma = fetch(format!("encoder.{i}.gamma"), &l.gamma)?;
            l.beta = fetch(format!("encoder.{i}.beta"), &l.beta)?;
            l.running_mean = fetch(format!("encoder.{i}.running_mean"), &l.beta)?.into_data();
            l.running_var = fetch(format!("encoder.{i}.running_var"), &l.beta)?.into_data();
        }
        let p = &mut params.projector;
        p.first.weight = fetch("projector.0.weight".into(), &p.first.weight)?;
        p.first.bias = fetch("projector.0.bias".into(), &p.first.bias)?;
        p.second.weight = fetch("projector.1.weight".into(), &p.second.weight)?;
        p.second.bias = fetch("projector.1.bias".into(), &p.second.bias)?;
        Ok(params)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("tensor {0} has the wrong shape for the recorded config")]
    ShapeMismatch(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    encoder: EncoderConfig,
    #[serde(default)]
    training: serde_json::Value,
}

/// Model parameters together with the config header and free-form training
/// metadata (step, epoch, seed, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub training: serde_json::Value,
}

impl Checkpoint {
    pub fn to_named_tensors(&self) -> NamedTensors {
        let header = Header {
            encoder: self.params.config().clone(),
            training: self.training.clone(),
        };
        NamedTensors {
            metadata: serde_json::to_string(&header).expect("header serializes"),
            tensors: self.params.named(),
        }
    }

    pub fn from_named_tensors(nt: &NamedTensors) -> Result<Self, CheckpointError> {
        let header: Header = serde_json::from_str(&nt.metadata)?;
        Ok(Self {
            params: ModelParams::from_named(header.encoder, nt)?,
            training: header.training,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        Ok(self.to_named_tensors().write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_named_tensors(&NamedTensors::read(path)?)
    }
}
