//! The trainable selector: a window encoder, a linear classifier over
//! detectors, and the two projection heads used for metadata alignment.
//!
//! Gradients are derived by hand. [`SelectorModel::backward`] accumulates
//! into a [`Gradients`] buffer so a batch can be summed before one
//! [`Sgd::step`].

mod io;
mod layers;
mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{load_model, read_model, save_model, write_model, FORMAT_VERSION, MAGIC};
pub use layers::softmax;
pub use params::{Gradients, ParamSet, Tensor};

use layers::{conv_backward, conv_forward, dense_backward, dense_forward, relu_backward, relu_in_place};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("numeric fault: {0}")]
    NumericFault(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported model format version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("model file is truncated")]
    Truncated,
    #[error("model file checksum mismatch")]
    Checksum,
    #[error("corrupt model file: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Mlp,
    TemporalConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    /// Input window length.
    pub window: usize,
    /// Number of detectors to choose from.
    pub n_classes: usize,
    /// Text-embedding dimension fed to the text projection.
    pub text_dim: usize,
    /// Shared projection space dimension.
    pub proj_dim: usize,
    pub proj_hidden: usize,
    pub mlp_hidden: Vec<usize>,
    pub conv_channels: Vec<usize>,
    pub conv_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::Mlp,
            window: 64,
            n_classes: crate::detectors::DetectorId::COUNT,
            text_dim: 64,
            proj_dim: 64,
            proj_hidden: 256,
            mlp_hidden: vec![256, 128],
            conv_channels: vec![32, 64, 64],
            conv_kernel: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.window < 2 {
            return bad("window must be >= 2");
        }
        if self.n_classes < 2 {
            return bad("need at least two classes");
        }
        if self.text_dim == 0 || self.proj_dim == 0 || self.proj_hidden == 0 {
            return bad("projection dimensions must be positive");
        }
        match self.encoder {
            EncoderKind::Mlp if self.mlp_hidden.is_empty() || self.mlp_hidden.contains(&0) => {
                bad("mlp_hidden must be non-empty and positive")
            }
            EncoderKind::TemporalConv
                if self.conv_channels.is_empty() || self.conv_channels.contains(&0) || self.conv_kernel.is_multiple_of(2) =>
            {
                bad("conv_channels must be non-empty and positive, kernel odd")
            }
            _ => Ok(()),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self.encoder {
            EncoderKind::Mlp => *self.mlp_hidden.last().unwrap_or(&0),
            EncoderKind::TemporalConv => *self.conv_channels.last().unwrap_or(&0),
        }
    }

    fn encoder_layers(&self) -> usize {
        match self.encoder {
            EncoderKind::Mlp => self.mlp_hidden.len(),
            EncoderKind::TemporalConv => self.conv_channels.len(),
        }
    }

    /// Tensor names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        match self.encoder {
            EncoderKind::Mlp => {
                let mut prev = self.window;
                for (l, &h) in self.mlp_hidden.iter().enumerate() {
                    out.push((format!("enc.{l}.weight"), vec![h, prev]));
                    out.push((format!("enc.{l}.bias"), vec![h]));
                    prev = h;
                }
            }
            EncoderKind::TemporalConv => {
                let mut prev = 1;
                for (l, &c) in self.conv_channels.iter().enumerate() {
                    out.push((format!("conv.{l}.weight"), vec![c, prev, self.conv_kernel]));
                    out.push((format!("conv.{l}.bias"), vec![c]));
                    prev = c;
                }
            }
        }
        let f = self.feature_dim();
        out.push(("cls.weight".into(), vec![self.n_classes, f]));
        out.push(("cls.bias".into(), vec![self.n_classes]));
        for (head, input) in [("proj_t", f), ("proj_k", self.text_dim)] {
            out.push((format!("{head}.0.weight"), vec![self.proj_hidden, input]));
            out.push((format!("{head}.0.bias"), vec![self.proj_hidden]));
            out.push((format!("{head}.1.weight"), vec![self.proj_dim, self.proj_hidden]));
            out.push((format!("{head}.1.bias"), vec![self.proj_dim]));
        }
        out
    }
}

/// Which projection head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Series features into the shared space.
    Series,
    /// Text embeddings into the shared space.
    Text,
}

#[derive(Debug, Clone)]
struct EncoderCache {
    /// Input to each encoder layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each encoder layer.
    pre: Vec<Vec<f64>>,
}

/// Output of [`SelectorModel::forward`] with the activations backprop needs.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    cache: EncoderCache,
}

impl ForwardResult {
    /// Signs of every hidden pre-activation, in layer order.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.cache.pre.iter().flatten().map(|&z| z > 0.0).collect()
    }

    pub fn predicted(&self) -> usize {
        crate::metrics::argmax(&self.logits)
    }
}

/// Loss gradients arriving at the model outputs.
#[derive(Debug, Clone, Default)]
pub struct Upstream {
    /// d loss / d logits.
    pub logits: Vec<f64>,
    /// d loss / d features, from the series projection head.
    pub features: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ProjectionResult {
    pub output: Vec<f64>,
    input: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
}

impl ProjectionResult {
    /// Hidden ReLU signs, then whether the output vanishes, where cosine
    /// similarity has no derivative.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out: Vec<bool> = self.hidden_pre.iter().map(|&z| z > 0.0).collect();
        out.push(self.output.iter().all(|&x| x == 0.0));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    /// Momentum buffer, present once a momentum step has run.
    #[serde(skip)]
    pub velocity: Option<ParamSet>,
    /// Free-form configuration echo stored alongside the parameters.
    #[serde(default)]
    pub echo: serde_json::Value,
}

impl SelectorModel {
    /// Seeded fan-in uniform initialization; biases start at zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let relu_fed = |name: &str| name.starts_with("enc.") || name.starts_with("conv.") || name.ends_with(".0.weight");
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let mut t = Tensor::zeros(name.clone(), shape.clone());
                if name.ends_with("weight") {
                    let fan_in: usize = shape[1..].iter().product();
                    let gain = if relu_fed(&name) { 6.0 } else { 1.0 };
                    let bound = (gain / fan_in as f64).sqrt();
                    t.data.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
                }
                t
            })
            .collect();
        Ok(Self {
            config,
            params: ParamSet { tensors },
            velocity: None,
            echo: serde_json::Value::Null,
        })
    }

    pub fn zero_grads(&self) -> Gradients {
        self.params.zeros_like()
    }

    fn cls_index(&self) -> usize {
        2 * self.config.encoder_layers()
    }

    fn head_index(&self, head: Head) -> usize {
        self.cls_index()
            + 2
            + match head {
                Head::Series => 0,
                Head::Text => 4,
            }
    }

    pub fn forward(&self, window: &[f64]) -> Result<ForwardResult, ModelError> {
        if window.len() != self.config.window {
            return Err(ModelError::Dimension {
                expected: self.config.window,
                got: window.len(),
            });
        }
        let (features, cache) = match self.config.encoder {
            EncoderKind::Mlp => self.mlp_forward(window),
            EncoderKind::TemporalConv => self.conv_encode(window),
        };
        let c = self.cls_index();
        let mut logits = Vec::new();
        dense_forward(self.params.get(c), self.params.get(c + 1), &features, &mut logits);
        let probs = softmax(&logits);
        Ok(ForwardResult {
            features,
            logits,
            probs,
            cache,
        })
    }

    fn mlp_forward(&self, window: &[f64]) -> (Vec<f64>, EncoderCache) {
        let mut cache = EncoderCache {
            inputs: Vec::new(),
            pre: Vec::new(),
        };
        let mut h = window.to_vec();
        for l in 0..self.config.mlp_hidden.len() {
            let mut z = Vec::new();
            dense_forward(self.params.get(2 * l), self.params.get(2 * l + 1), &h, &mut z);
            cache.inputs.push(std::mem::take(&mut h));
            h = z.clone();
            relu_in_place(&mut h);
            cache.pre.push(z);
        }
        (h, cache)
    }

    fn conv_encode(&self, window: &[f64]) -> (Vec<f64>, EncoderCache) {
        let len = self.config.window;
        let k = self.config.conv_kernel;
        let mut cache = EncoderCache {
            inputs: Vec::new(),
            pre: Vec::new(),
        };
        let mut h = window.to_vec();
        let mut in_ch = 1;
        for (l, &out_ch) in self.config.conv_channels.iter().enumerate() {
            let z = conv_forward(self.params.get(2 * l), self.params.get(2 * l + 1), &h, in_ch, k, len);
            cache.inputs.push(std::mem::take(&mut h));
            h = z.clone();
            relu_in_place(&mut h);
            cache.pre.push(z);
            in_ch = out_ch;
        }
        // global average pool over time
        let features = h.chunks(len).map(|c| c.iter().sum::<f64>() / len as f64).collect();
        (features, cache)
    }

    /// Accumulates parameter gradients for one sample into `grads`.
    pub fn backward(&self, fwd: &ForwardResult, upstream: &Upstream, grads: &mut Gradients) -> Result<(), ModelError> {
        let m = self.config.n_classes;
        if upstream.logits.len() != m {
            return Err(ModelError::Dimension {
                expected: m,
                got: upstream.logits.len(),
            });
        }
        let c = self.cls_index();
        let (dw, rest) = grads.tensors.split_at_mut(c + 1);
        let mut dfeat = dense_backward(
            self.params.get(c),
            &fwd.features,
            &upstream.logits,
            &mut dw[c].data,
            &mut rest[0].data,
            true,
        )
        .unwrap_or_default();
        if let Some(extra) = &upstream.features {
            if extra.len() != dfeat.len() {
                return Err(ModelError::Dimension {
                    expected: dfeat.len(),
                    got: extra.len(),
                });
            }
            dfeat.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
        }
        match self.config.encoder {
            EncoderKind::Mlp => self.mlp_backward(fwd, dfeat, grads),
            EncoderKind::TemporalConv => self.conv_backward(fwd, dfeat, grads),
        }
        if !grads.is_finite() {
            return Err(ModelError::NumericFault("non-finite gradient".into()));
        }
        Ok(())
    }

    fn mlp_backward(&self, fwd: &ForwardResult, mut dh: Vec<f64>, grads: &mut Gradients) {
        for l in (0..self.config.mlp_hidden.len()).rev() {
            relu_backward(&fwd.cache.pre[l], &mut dh);
            let (head, tail) = grads.tensors.split_at_mut(2 * l + 1);
            let next = dense_backward(
                self.params.get(2 * l),
                &fwd.cache.inputs[l],
                &dh,
                &mut head[2 * l].data,
                &mut tail[0].data,
                l > 0,
            );
            match next {
                Some(d) => dh = d,
                None => break,
            }
        }
    }

    fn conv_backward(&self, fwd: &ForwardResult, dfeat: Vec<f64>, grads: &mut Gradients) {
        let len = self.config.window;
        let k = self.config.conv_kernel;
        let mut dh: Vec<f64> = dfeat.iter().flat_map(|&g| std::iter::repeat_n(g / len as f64, len)).collect();
        for l in (0..self.config.conv_channels.len()).rev() {
            let in_ch = if l == 0 { 1 } else { self.config.conv_channels[l - 1] };
            relu_backward(&fwd.cache.pre[l], &mut dh);
            let (head, tail) = grads.tensors.split_at_mut(2 * l + 1);
            let next = conv_backward(
                self.params.get(2 * l),
                &fwd.cache.inputs[l],
                &dh,
                in_ch,
                k,
                len,
                &mut head[2 * l].data,
                &mut tail[0].data,
                l > 0,
            );
            match next {
                Some(d) => dh = d,
                None => break,
            }
        }
    }

    /// Two-layer perceptron head: `W1 relu(W0 x + b0) + b1`.
    pub fn project(&self, head: Head, input: &[f64]) -> Result<ProjectionResult, ModelError> {
        let i = self.head_index(head);
        let expected = self.params.tensors[i].shape[1];
        if input.len() != expected {
            return Err(ModelError::Dimension {
                expected,
                got: input.len(),
            });
        }
        let mut hidden_pre = Vec::new();
        dense_forward(self.params.get(i), self.params.get(i + 1), input, &mut hidden_pre);
        let mut hidden = hidden_pre.clone();
        relu_in_place(&mut hidden);
        let mut output = Vec::new();
        dense_forward(self.params.get(i + 2), self.params.get(i + 3), &hidden, &mut output);
        Ok(ProjectionResult {
            output,
            input: input.to_vec(),
            hidden_pre,
            hidden,
        })
    }

    /// Accumulates head gradients and returns d loss / d input.
    pub fn project_backward(
        &self,
        head: Head,
        proj: &ProjectionResult,
        d_output: &[f64],
        grads: &mut Gradients,
    ) -> Vec<f64> {
        let i = self.head_index(head);
        let (a, b) = grads.tensors.split_at_mut(i + 3);
        let mut dh = dense_backward(
            self.params.get(i + 2),
            &proj.hidden,
            d_output,
            &mut a[i + 2].data,
            &mut b[0].data,
            true,
        )
        .unwrap_or_default();
        relu_backward(&proj.hidden_pre, &mut dh);
        let (a, b) = grads.tensors.split_at_mut(i + 1);
        dense_backward(self.params.get(i), &proj.input, &dh, &mut a[i].data, &mut b[0].data, true).unwrap_or_default()
    }
}

/// Plain SGD with global-norm clipping and optional momentum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub learning_rate: f64,
    pub clip_bound: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub applied_norm: f64,
}

/// Rescales `grads` so its global norm is at most `bound`; returns the
/// original norm.
pub fn clip_global_norm(grads: &mut Gradients, bound: f64) -> f64 {
    let norm = grads.global_norm();
    if bound > 0.0 && norm > bound {
        grads.scale(bound / norm);
    }
    norm
}

impl Sgd {
    pub fn new(learning_rate: f64, clip_bound: f64) -> Self {
        Self {
            learning_rate,
            clip_bound,
            momentum: 0.0,
        }
    }

    /// Clips, then applies `theta -= lr * g` (or the momentum update).
    pub fn step(&self, model: &mut SelectorModel, grads: &mut Gradients) -> Result<StepInfo, ModelError> {
        if !grads.is_finite() {
            return Err(ModelError::NumericFault("non-finite gradient".into()));
        }
        let grad_norm = clip_global_norm(grads, self.clip_bound);
        let applied_norm = grads.global_norm();
        if self.momentum > 0.0 {
            let velocity = model.velocity.get_or_insert_with(|| grads.zeros_like());
            velocity.scale(self.momentum);
            velocity.axpy(1.0, grads);
            let v = velocity.clone();
            model.params.axpy(-self.learning_rate, &v);
        } else {
            model.params.axpy(-self.learning_rate, grads);
        }
        Ok(StepInfo {
            grad_norm,
            applied_norm,
        })
    }
}
