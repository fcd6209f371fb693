//! Deterministic differentiable kernel for the fixed encoder–decoder–classifier
//! network: initialization, forward pass with inverted dropout, exact
//! reverse-mode gradients, Adam and parameter averaging.

mod adam;
mod checkpoint;
pub mod loss;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlareError, Result};
use crate::matrix::Matrix;
use crate::metrics;
use crate::rng::{self, FlareRng};

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use loss::{
    argmax, ce_loss, fisher_proxy, recon_loss, softmax_rows, CompositeLoss, FisherVariant,
    LossEvaluation, LossTerms, LossWeights, OutputGrads, PROB_FLOOR,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    #[inline]
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    #[serde(default)]
    pub dropout_rate: f64,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec {
            in_dim,
            out_dim,
            activation,
            dropout_rate: 0.0,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subnet {
    Encoder,
    Decoder,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub encoder: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
    pub classifier: Vec<LayerSpec>,
}

/// Compact description from which a full [`NetworkSpec`] with a mirrored
/// decoder is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Encoder layer widths; the last one is the latent dimension.
    pub encoder: Vec<usize>,
    /// Hidden classifier widths (the output layer of `classes` is appended).
    pub classifier: Vec<usize>,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Dropout after each encoder layer; missing entries mean no dropout.
    #[serde(default)]
    pub encoder_dropout: Vec<f64>,
    /// Dropout after each hidden classifier layer.
    #[serde(default)]
    pub classifier_dropout: Vec<f64>,
}

fn default_classes() -> usize {
    2
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl Architecture {
    pub fn build(&self, input_dim: usize) -> Result<NetworkSpec> {
        if self.encoder.is_empty() {
            return Err(FlareError::InvalidSpec("encoder needs at least one layer".into()));
        }
        let act = self.activation;
        let mut encoder = Vec::new();
        let mut prev = input_dim;
        for (i, &w) in self.encoder.iter().enumerate() {
            let rate = self.encoder_dropout.get(i).copied().unwrap_or(0.0);
            encoder.push(LayerSpec::new(prev, w, act).with_dropout(rate));
            prev = w;
        }
        let latent = prev;

        let mut decoder = Vec::new();
        let mut widths: Vec<usize> = self.encoder.iter().rev().skip(1).copied().collect();
        widths.push(input_dim);
        let mut prev = latent;
        for (i, &w) in widths.iter().enumerate() {
            let last = i + 1 == widths.len();
            let a = if last { Activation::Identity } else { act };
            decoder.push(LayerSpec::new(prev, w, a));
            prev = w;
        }

        let mut classifier = Vec::new();
        let mut prev = latent;
        for (i, &w) in self.classifier.iter().enumerate() {
            let rate = self.classifier_dropout.get(i).copied().unwrap_or(0.0);
            classifier.push(LayerSpec::new(prev, w, act).with_dropout(rate));
            prev = w;
        }
        classifier.push(LayerSpec::new(prev, self.classes, Activation::Identity));

        let spec = NetworkSpec {
            encoder,
            decoder,
            classifier,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl NetworkSpec {
    pub fn input_dim(&self) -> usize {
        self.encoder.first().map_or(0, |l| l.in_dim)
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.last().map_or(0, |l| l.out_dim)
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.last().map_or(0, |l| l.out_dim)
    }

    pub fn num_layers(&self) -> usize {
        self.encoder.len() + self.decoder.len() + self.classifier.len()
    }

    /// Layer specs in canonical order: encoder, decoder, classifier.
    pub fn layers(&self) -> impl Iterator<Item = (Subnet, &LayerSpec)> {
        self.encoder
            .iter()
            .map(|l| (Subnet::Encoder, l))
            .chain(self.decoder.iter().map(|l| (Subnet::Decoder, l)))
            .chain(self.classifier.iter().map(|l| (Subnet::Classifier, l)))
    }

    pub fn validate(&self) -> Result<()> {
        fn chain(name: &str, layers: &[LayerSpec]) -> Result<()> {
            if layers.is_empty() {
                return Err(FlareError::InvalidSpec(format!("{name} has no layers")));
            }
            for (i, l) in layers.iter().enumerate() {
                if l.in_dim == 0 || l.out_dim == 0 {
                    return Err(FlareError::InvalidSpec(format!(
                        "{name} layer {i} has a zero dimension"
                    )));
                }
                if !(0.0..1.0).contains(&l.dropout_rate) {
                    return Err(FlareError::InvalidSpec(format!(
                        "{name} layer {i} dropout {} outside [0, 1)",
                        l.dropout_rate
                    )));
                }
            }
            for (i, pair) in layers.windows(2).enumerate() {
                if pair[0].out_dim != pair[1].in_dim {
                    return Err(FlareError::InvalidSpec(format!(
                        "{name} layer {i} outputs {} but layer {} expects {}",
                        pair[0].out_dim,
                        i + 1,
                        pair[1].in_dim
                    )));
                }
            }
            Ok(())
        }
        chain("encoder", &self.encoder)?;
        chain("decoder", &self.decoder)?;
        chain("classifier", &self.classifier)?;

        let latent = self.latent_dim();
        if self.decoder[0].in_dim != latent {
            return Err(FlareError::InvalidSpec(format!(
                "decoder input {} differs from latent dim {latent}",
                self.decoder[0].in_dim
            )));
        }
        if self.classifier[0].in_dim != latent {
            return Err(FlareError::InvalidSpec(format!(
                "classifier input {} differs from latent dim {latent}",
                self.classifier[0].in_dim
            )));
        }
        let out = self.decoder.last().map(|l| l.out_dim).unwrap_or(0);
        if out != self.input_dim() {
            return Err(FlareError::InvalidSpec(format!(
                "decoder output {out} differs from encoder input {}",
                self.input_dim()
            )));
        }
        if self.num_classes() < 2 {
            return Err(FlareError::InvalidSpec("classifier needs at least 2 outputs".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out_dim × in_dim`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(spec: &LayerSpec) -> Self {
        Layer {
            weights: Matrix::zeros(spec.out_dim, spec.in_dim),
            bias: vec![0.0; spec.out_dim],
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.as_slice().iter().chain(self.bias.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .as_mut_slice()
            .iter_mut()
            .chain(self.bias.iter_mut())
    }

    pub fn len(&self) -> usize {
        self.weights.as_slice().len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Full parameter state of the network. Also used for gradients and Adam
/// moments, which share the shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub spec: NetworkSpec,
    pub encoder: Vec<Layer>,
    pub decoder: Vec<Layer>,
    pub classifier: Vec<Layer>,
}

pub type Gradients = NetworkParams;

impl NetworkParams {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        NetworkParams {
            spec: spec.clone(),
            encoder: spec.encoder.iter().map(Layer::zeros).collect(),
            decoder: spec.decoder.iter().map(Layer::zeros).collect(),
            classifier: spec.classifier.iter().map(Layer::zeros).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.spec)
    }

    /// Layers in canonical order: encoder, decoder, classifier.
    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.encoder
            .iter()
            .chain(self.decoder.iter())
            .chain(self.classifier.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .chain(self.classifier.iter_mut())
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(Layer::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers().flat_map(Layer::values).copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(FlareError::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        for (dst, src) in self.layers_mut().flat_map(Layer::values_mut).zip(flat) {
            *dst = *src;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers().flat_map(Layer::values).all(|v| v.is_finite())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &NetworkParams, scale: f64) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            for (x, y) in a.values_mut().zip(b.values()) {
                *x += scale * y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers()
            .flat_map(Layer::values)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Checks shapes against the embedded spec.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let check = |name: &str, specs: &[LayerSpec], layers: &[Layer]| -> Result<()> {
            if specs.len() != layers.len() {
                return Err(FlareError::ShapeMismatch(format!(
                    "{name}: {} layers for {} specs",
                    layers.len(),
                    specs.len()
                )));
            }
            for (i, (s, l)) in specs.iter().zip(layers).enumerate() {
                if l.weights.shape() != (s.out_dim, s.in_dim) || l.bias.len() != s.out_dim {
                    return Err(FlareError::ShapeMismatch(format!(
                        "{name} layer {i}: weights {:?}, bias {}, expected ({}, {})",
                        l.weights.shape(),
                        l.bias.len(),
                        s.out_dim,
                        s.in_dim
                    )));
                }
            }
            Ok(())
        };
        check("encoder", &self.spec.encoder, &self.encoder)?;
        check("decoder", &self.spec.decoder, &self.decoder)?;
        check("classifier", &self.spec.classifier, &self.classifier)?;
        if !self.is_finite() {
            return Err(FlareError::NonFinite("network parameters".into()));
        }
        Ok(())
    }
}

/// Glorot-uniform weights and zero biases.
pub fn init_network(spec: &NetworkSpec, seed: u64) -> Result<NetworkParams> {
    spec.validate()?;
    let mut rng = rng::stream(seed, &[rng::tags::INIT]);
    let mut params = NetworkParams::zeros(spec);
    let specs: Vec<LayerSpec> = spec.layers().map(|(_, l)| l.clone()).collect();
    for (layer, ls) in params.layers_mut().zip(&specs) {
        let bound = (6.0 / (ls.in_dim + ls.out_dim) as f64).sqrt();
        for w in layer.weights.as_mut_slice() {
            *w = rng.random_range(-bound..=bound);
        }
    }
    Ok(params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Matrix,
    pre: Matrix,
    out: Matrix,
    /// Inverted-dropout multipliers (0 or 1/(1-rate)), train mode only.
    mask: Option<Matrix>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub z: Matrix,
    pub x_recon: Matrix,
    pub logits: Matrix,
    pub probs: Matrix,
    /// Input of the last classifier layer.
    pub h_penult: Matrix,
    encoder: Vec<LayerCache>,
    decoder: Vec<LayerCache>,
    classifier: Vec<LayerCache>,
}

impl ForwardTrace {
    pub fn predictions(&self) -> Vec<usize> {
        self.probs.iter_rows().map(argmax).collect()
    }

    pub fn dropout_masks(&self) -> impl Iterator<Item = Option<&Matrix>> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .chain(&self.classifier)
            .map(|c| c.mask.as_ref())
    }
}

fn run_chain(
    specs: &[LayerSpec],
    layers: &[Layer],
    input: Matrix,
    mode: Mode,
    rng: &mut Option<&mut FlareRng>,
) -> (Matrix, Vec<LayerCache>) {
    let mut caches = Vec::with_capacity(layers.len());
    let mut current = input;
    for (spec, layer) in specs.iter().zip(layers) {
        let mut pre = current.matmul_transposed(&layer.weights);
        for r in 0..pre.rows() {
            for (v, b) in pre.row_mut(r).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        let mut out = pre.clone();
        out.map_inplace(|v| spec.activation.apply(v));
        let mask = match (mode, rng.as_deref_mut()) {
            (Mode::Train, Some(r)) if spec.dropout_rate > 0.0 => {
                let keep = 1.0 - spec.dropout_rate;
                let mut m = Matrix::zeros(out.rows(), out.cols());
                for v in m.as_mut_slice() {
                    *v = if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
                }
                Some(m)
            }
            _ => None,
        };
        let next = match &mask {
            Some(m) => {
                let mut d = out.clone();
                for (v, s) in d.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *v *= s;
                }
                d
            }
            None => out.clone(),
        };
        caches.push(LayerCache {
            input: current,
            pre,
            out,
            mask,
        });
        current = next;
    }
    (current, caches)
}

/// Forward pass. Dropout is applied only in [`Mode::Train`] and only when an
/// RNG is supplied; eval mode is a pure function of its inputs.
pub fn forward(
    params: &NetworkParams,
    batch: &Matrix,
    mode: Mode,
    rng: Option<&mut FlareRng>,
) -> Result<ForwardTrace> {
    let spec = &params.spec;
    if batch.cols() != spec.input_dim() {
        return Err(FlareError::ShapeMismatch(format!(
            "batch has {} columns, network expects {}",
            batch.cols(),
            spec.input_dim()
        )));
    }
    if !batch.is_finite() {
        return Err(FlareError::NonFinite("forward input".into()));
    }
    let mut rng = rng;
    let (z, encoder) = run_chain(&spec.encoder, &params.encoder, batch.clone(), mode, &mut rng);
    let (x_recon, decoder) = run_chain(&spec.decoder, &params.decoder, z.clone(), mode, &mut rng);
    let (logits, classifier) =
        run_chain(&spec.classifier, &params.classifier, z.clone(), mode, &mut rng);
    let h_penult = classifier
        .last()
        .map(|c| c.input.clone())
        .expect("validated spec has a classifier layer");
    let probs = softmax_rows(&logits);
    Ok(ForwardTrace {
        z,
        x_recon,
        logits,
        probs,
        h_penult,
        encoder,
        decoder,
        classifier,
    })
}

/// Backpropagates `upstream` (gradient w.r.t. the chain output) and returns
/// the gradient w.r.t. the chain input. `extra_last_input` is added to the
/// gradient at the input of the last layer.
fn backprop_chain(
    specs: &[LayerSpec],
    layers: &[Layer],
    caches: &[LayerCache],
    grads: &mut [Layer],
    upstream: Matrix,
    extra_last_input: Option<&Matrix>,
) -> Matrix {
    let mut g = upstream;
    let last = layers.len() - 1;
    for l in (0..layers.len()).rev() {
        let cache = &caches[l];
        if let Some(mask) = &cache.mask {
            for (v, s) in g.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *v *= s;
            }
        }
        let act = specs[l].activation;
        for ((v, &pre), &out) in g
            .as_mut_slice()
            .iter_mut()
            .zip(cache.pre.as_slice())
            .zip(cache.out.as_slice())
        {
            *v *= act.derivative(pre, out);
        }
        let dw = g.transpose_matmul(&cache.input);
        for (dst, src) in grads[l].weights.as_mut_slice().iter_mut().zip(dw.as_slice()) {
            *dst += src;
        }
        for row in g.iter_rows() {
            for (db, v) in grads[l].bias.iter_mut().zip(row) {
                *db += v;
            }
        }
        let mut g_in = g.matmul(&layers[l].weights);
        if l == last {
            if let Some(extra) = extra_last_input {
                for (v, e) in g_in.as_mut_slice().iter_mut().zip(extra.as_slice()) {
                    *v += e;
                }
            }
        }
        g = g_in;
    }
    g
}

/// Reverse-mode gradients given the loss gradients at the three network
/// outputs (logits, reconstruction, penultimate classifier activations).
pub fn backward(params: &NetworkParams, trace: &ForwardTrace, out: &OutputGrads) -> Gradients {
    let spec = &params.spec;
    let mut grads = params.zeros_like();
    let dz_cls = backprop_chain(
        &spec.classifier,
        &params.classifier,
        &trace.classifier,
        &mut grads.classifier,
        out.d_logits.clone(),
        out.d_penult.as_ref(),
    );
    let dz_dec = match &out.d_recon {
        Some(d) => Some(backprop_chain(
            &spec.decoder,
            &params.decoder,
            &trace.decoder,
            &mut grads.decoder,
            d.clone(),
            None,
        )),
        None => None,
    };
    let mut dz = dz_cls;
    if let Some(d) = dz_dec {
        for (a, b) in dz.as_mut_slice().iter_mut().zip(d.as_slice()) {
            *a += b;
        }
    }
    backprop_chain(
        &spec.encoder,
        &params.encoder,
        &trace.encoder,
        &mut grads.encoder,
        dz,
        None,
    );
    grads
}

/// Exact gradients of the batch-mean composite loss.
pub fn compute_gradients(
    params: &NetworkParams,
    batch: &Matrix,
    labels: &[usize],
    loss: &dyn CompositeLoss,
    mode: Mode,
    rng: Option<&mut FlareRng>,
) -> Result<(Gradients, LossEvaluation)> {
    if labels.len() != batch.rows() {
        return Err(FlareError::ShapeMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            batch.rows()
        )));
    }
    let trace = forward(params, batch, mode, rng)?;
    let eval = loss.evaluate(batch, labels, &trace)?;
    if !eval.value.is_finite() {
        return Err(FlareError::NonFinite(format!("loss value {}", eval.value)));
    }
    let grads = backward(params, &trace, &eval.output_grads);
    Ok((grads, eval))
}

/// Eval-mode class predictions (argmax, ties to the lowest class).
pub fn predict(params: &NetworkParams, batch: &Matrix) -> Result<Vec<usize>> {
    Ok(forward(params, batch, Mode::Eval, None)?.predictions())
}

pub fn macro_f1_forward(params: &NetworkParams, batch: &Matrix, labels: &[usize]) -> Result<f64> {
    let preds = predict(params, batch)?;
    metrics::macro_f1_labels(labels, &preds)
}

/// Elementwise mean of a set of parameter sets.
///
/// Each coordinate is averaged over its sorted values with a running mean, so
/// the result is independent of input order and identical inputs come back
/// bit-identical.
pub fn average_params(models: &[&NetworkParams]) -> Result<NetworkParams> {
    let first = models
        .first()
        .ok_or_else(|| FlareError::InvalidInput("cannot average an empty model list".into()))?;
    for m in &models[1..] {
        if m.spec != first.spec {
            return Err(FlareError::ShapeMismatch(
                "averaged models have different specs".into(),
            ));
        }
    }
    let flats: Vec<Vec<f64>> = models.iter().map(|m| m.flatten()).collect();
    let mut column = Vec::with_capacity(models.len());
    let mean: Vec<f64> = (0..flats[0].len())
        .map(|i| {
            column.clear();
            column.extend(flats.iter().map(|f| f[i]));
            column.sort_by(f64::total_cmp);
            let mut m = column[0];
            for (k, &v) in column.iter().enumerate().skip(1) {
                m += (v - m) / (k + 1) as f64;
            }
            m
        })
        .collect();
    let mut out = (*first).clone();
    out.set_flat(&mean)?;
    Ok(out)
}
