//! Encoder and projector networks.
//!
//! Parameters live in plain vectors and are bound to fresh leaf tensors for
//! every forward pass; binding once and reusing the handles across both views
//! makes their gradients accumulate into the same leaves.

pub mod checkpoint;

use ndarray::{Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::stream;
use crate::tensor::{conv_out_extent, BatchNormState, Tensor};

pub use checkpoint::{Checkpoint, NamedTensor, OptimizerState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Cnn,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Convolution channels (cnn).
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub batch_norm: bool,
    /// Layer widths (mlp).
    pub widths: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Cnn,
            channels: vec![16, 32, 64],
            kernel: 3,
            stride: 2,
            batch_norm: true,
            widths: vec![256, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorConfig {
    /// Hidden blocks are linear → batch norm → relu; the last layer is plain
    /// linear. Empty means no projector.
    pub widths: Vec<usize>,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig {
            widths: vec![256, 256, 256],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Conv { w: usize, stride: usize, pad: usize },
    Linear { w: usize, b: Option<usize> },
    BatchNorm { gamma: usize, beta: usize, state: usize },
    Relu,
    GlobalAvgPool,
    Flatten,
}

enum Stats<'a, T> {
    Train(&'a mut [BatchNormState<T>]),
    Eval(&'a [BatchNormState<T>]),
}

/// Parameter handles for one forward/backward pass.
pub struct Bound<T: Real> {
    pub tensors: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real> {
    pub encoder_config: EncoderConfig,
    pub projector_config: ProjectorConfig,
    input: (usize, usize, usize),
    params: Vec<Param<T>>,
    buffers: Vec<BatchNormState<T>>,
    buffer_names: Vec<String>,
    encoder: Vec<Layer>,
    projector: Vec<Layer>,
    embed_dim: usize,
    proj_dim: usize,
}

struct Builder<T: Real> {
    params: Vec<Param<T>>,
    buffers: Vec<BatchNormState<T>>,
    buffer_names: Vec<String>,
    seed: u64,
}

impl<T: Real> Builder<T> {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let n: usize = shape.iter().product();
        let idx = self.params.len();
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Kaiming(fan_in) => {
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut rng = stream(self.seed, "model-init", &[idx as u64]);
                (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
            }
        };
        self.params.push(Param { name, shape, data });
        idx
    }

    fn batch_norm(&mut self, prefix: &str, c: usize) -> Layer {
        let gamma = self.param(format!("{prefix}.gamma"), vec![c], Init::Ones);
        let beta = self.param(format!("{prefix}.beta"), vec![c], Init::Zeros);
        self.buffers.push(BatchNormState::new(c));
        self.buffer_names.push(prefix.to_string());
        Layer::BatchNorm {
            gamma,
            beta,
            state: self.buffers.len() - 1,
        }
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, out: usize, bias: bool) -> Layer {
        let w = self.param(format!("{prefix}.weight"), vec![fan_in, out], Init::Kaiming(fan_in));
        let b = bias.then(|| self.param(format!("{prefix}.bias"), vec![out], Init::Zeros));
        Layer::Linear { w, b }
    }
}

enum Init {
    Zeros,
    Ones,
    Kaiming(usize),
}

impl<T: Real> Model<T> {
    /// Builds and initializes a model for `(C, H, W)` inputs.
    pub fn new(
        encoder_config: &EncoderConfig,
        projector_config: &ProjectorConfig,
        input: (usize, usize, usize),
        seed: u64,
    ) -> Result<Self> {
        let mut b = Builder {
            params: Vec::new(),
            buffers: Vec::new(),
            buffer_names: Vec::new(),
            seed,
        };
        let (c, h, w) = input;
        let mut encoder = Vec::new();
        let embed_dim = match encoder_config.kind {
            EncoderKind::Cnn => {
                let k = encoder_config.kernel;
                let stride = encoder_config.stride;
                if encoder_config.channels.is_empty() || k == 0 || stride == 0 {
                    return Err(Error::Config("cnn encoder needs channels, kernel >= 1 and stride >= 1".into()));
                }
                let pad = k / 2;
                let (mut cin, mut hh, mut ww) = (c, h, w);
                for (i, &cout) in encoder_config.channels.iter().enumerate() {
                    let (Some(nh), Some(nw)) = (conv_out_extent(hh, k, stride, pad), conv_out_extent(ww, k, stride, pad)) else {
                        return Err(Error::Config(format!(
                            "encoder layer {i} receives {hh}x{ww}, too small for kernel {k}"
                        )));
                    };
                    if cout == 0 {
                        return Err(Error::Config("encoder channels must be >= 1".into()));
                    }
                    let prefix = format!("encoder.{i}");
                    let wi = b.param(format!("{prefix}.conv.weight"), vec![cout, cin, k, k], Init::Kaiming(cin * k * k));
                    encoder.push(Layer::Conv { w: wi, stride, pad });
                    if encoder_config.batch_norm {
                        encoder.push(b.batch_norm(&format!("{prefix}.bn"), cout));
                    }
                    encoder.push(Layer::Relu);
                    (cin, hh, ww) = (cout, nh, nw);
                }
                encoder.push(Layer::GlobalAvgPool);
                cin
            }
            EncoderKind::Mlp => {
                if encoder_config.widths.is_empty() {
                    return Err(Error::Config("mlp encoder needs at least one width".into()));
                }
                encoder.push(Layer::Flatten);
                let mut fan_in = c * h * w;
                for (i, &out) in encoder_config.widths.iter().enumerate() {
                    if out == 0 {
                        return Err(Error::Config("encoder widths must be >= 1".into()));
                    }
                    let prefix = format!("encoder.{i}");
                    encoder.push(b.linear(&format!("{prefix}.linear"), fan_in, out, !encoder_config.batch_norm));
                    if encoder_config.batch_norm {
                        encoder.push(b.batch_norm(&format!("{prefix}.bn"), out));
                    }
                    encoder.push(Layer::Relu);
                    fan_in = out;
                }
                fan_in
            }
        };

        let mut projector = Vec::new();
        let mut fan_in = embed_dim;
        let n = projector_config.widths.len();
        for (i, &out) in projector_config.widths.iter().enumerate() {
            if out == 0 {
                return Err(Error::Config("projector widths must be >= 1".into()));
            }
            let prefix = format!("projector.{i}");
            if i + 1 < n {
                projector.push(b.linear(&format!("{prefix}.linear"), fan_in, out, false));
                projector.push(b.batch_norm(&format!("{prefix}.bn"), out));
                projector.push(Layer::Relu);
            } else {
                projector.push(b.linear(&format!("{prefix}.linear"), fan_in, out, true));
            }
            fan_in = out;
        }

        Ok(Model {
            encoder_config: encoder_config.clone(),
            projector_config: projector_config.clone(),
            input,
            params: b.params,
            buffers: b.buffers,
            buffer_names: b.buffer_names,
            encoder,
            projector,
            embed_dim,
            proj_dim: fan_in,
        })
    }

    pub fn input_dims(&self) -> (usize, usize, usize) {
        self.input
    }

    /// Encoder output width `E`.
    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Projector output width `D` (equals `E` without a projector).
    pub fn proj_dim(&self) -> usize {
        self.proj_dim
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[BatchNormState<T>] {
        &self.buffers
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn bind(&self, requires_grad: bool) -> Bound<T> {
        let tensors = self
            .params
            .iter()
            .map(|p| Tensor::leaf(p.data.clone(), &p.shape, requires_grad).expect("parameter shapes are valid"))
            .collect();
        Bound { tensors }
    }

    pub fn pixels_tensor(&self, pixels: &Array4<f32>) -> Result<Tensor<T>> {
        let (_, c, h, w) = pixels.dim();
        if (c, h, w) != self.input {
            return Err(Error::shape(
                "encode",
                &[self.input.0, self.input.1, self.input.2],
                &[c, h, w],
            ));
        }
        let data = pixels.iter().map(|&v| T::of(v as f64)).collect();
        Tensor::new(data, pixels.shape())
    }

    /// Train-mode encoder pass (batch statistics; running stats updated).
    pub fn encode(&mut self, p: &Bound<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        run(&self.encoder, x.clone(), &p.tensors, Stats::Train(&mut self.buffers))
    }

    pub fn project(&mut self, p: &Bound<T>, e: &Tensor<T>) -> Result<Tensor<T>> {
        check_width("project", e, self.embed_dim)?;
        run(&self.projector, e.clone(), &p.tensors, Stats::Train(&mut self.buffers))
    }

    pub fn encode_eval_tensor(&self, p: &Bound<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        run(&self.encoder, x.clone(), &p.tensors, Stats::Eval(&self.buffers))
    }

    pub fn project_eval_tensor(&self, p: &Bound<T>, e: &Tensor<T>) -> Result<Tensor<T>> {
        check_width("project", e, self.embed_dim)?;
        run(&self.projector, e.clone(), &p.tensors, Stats::Eval(&self.buffers))
    }

    /// Eval-mode embeddings, computed in chunks without building a graph.
    /// With `projected` the projector output is returned instead.
    pub fn embed(&self, pixels: &Array4<f32>, projected: bool) -> Result<Array2<f32>> {
        let n = pixels.dim().0;
        let width = if projected { self.proj_dim } else { self.embed_dim };
        let mut out = Array2::zeros((n, width));
        let p = self.bind(false);
        const CHUNK: usize = 256;
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let x = self.pixels_tensor(&pixels.slice(ndarray::s![start..end, .., .., ..]).to_owned())?;
            let mut e = self.encode_eval_tensor(&p, &x)?;
            if projected {
                e = self.project_eval_tensor(&p, &e)?;
            }
            for (i, row) in e.data().chunks(width).enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    out[[start + i, j]] = v.f64() as f32;
                }
            }
        }
        Ok(out)
    }

    /// Order-sensitive digest over parameters and running statistics.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: f64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in &self.params {
            p.data.iter().for_each(|v| feed(v.f64()));
        }
        for s in &self.buffers {
            s.running_mean.iter().chain(&s.running_var).for_each(|v| feed(v.f64()));
        }
        h
    }

    pub(crate) fn buffers_mut(&mut self) -> &mut [BatchNormState<T>] {
        &mut self.buffers
    }
}

fn check_width<T: Real>(op: &'static str, e: &Tensor<T>, width: usize) -> Result<()> {
    if e.ndim() != 2 || e.shape()[1] != width {
        return Err(Error::shape(op, e.shape(), &[e.shape()[0], width]));
    }
    Ok(())
}

fn run<T: Real>(layers: &[Layer], mut x: Tensor<T>, p: &[Tensor<T>], mut stats: Stats<'_, T>) -> Result<Tensor<T>> {
    for layer in layers {
        x = match *layer {
            Layer::Conv { w, stride, pad } => x.conv2d(&p[w], stride, pad)?,
            Layer::Linear { w, b } => {
                let y = x.matmul(&p[w])?;
                match b {
                    Some(b) => y.add(&p[b])?,
                    None => y,
                }
            }
            Layer::BatchNorm { gamma, beta, state } => match &mut stats {
                Stats::Train(s) => s[state].forward(&x, Some(&p[gamma]), Some(&p[beta]), true)?,
                Stats::Eval(s) => s[state].forward_eval(&x, Some(&p[gamma]), Some(&p[beta]))?,
            },
            Layer::Relu => x.relu(),
            Layer::GlobalAvgPool => x.mean_axes(&[2, 3], false)?,
            Layer::Flatten => {
                let b = x.shape()[0];
                let rest = x.numel() / b;
                x.reshape(&[b, rest])?
            }
        };
    }
    Ok(x)
}
