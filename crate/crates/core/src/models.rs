//! MLP encoder/decoder pairs with a categorical bottleneck.
//!
//! The encoder emits logits of shape `[batch, dims, k]`. The categorical VAE
//! decodes the flattened `[batch, dims * k]` block; the binary autoencoder
//! uses `k = 2` and feeds only channel 0 of each latent downstream, which is
//! one Bernoulli bit per latent.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied inside every logarithm of a probability.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    /// One per linear layer, i.e. `layer_widths.len() - 1` entries.
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    /// ReLU on hidden layers, `last` on the output layer.
    pub fn new(layer_widths: Vec<usize>, last: Activation) -> Self {
        let n = layer_widths.len().saturating_sub(1);
        let mut activations = vec![Activation::Relu; n];
        if let Some(a) = activations.last_mut() {
            *a = last;
        }
        Self {
            layer_widths,
            activations,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 || self.layer_widths.contains(&0) {
            return Err(Error::Config(format!(
                "MLP needs at least two positive widths, got {:?}",
                self.layer_widths
            )));
        }
        if self.activations.len() != self.layer_widths.len() - 1 {
            return Err(Error::Config("one activation per linear layer".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoricalLatentSpec {
    /// Number of categorical variables.
    pub dims: usize,
    /// Categories per variable.
    pub k: usize,
}

impl CategoricalLatentSpec {
    pub fn width(&self) -> usize {
        self.dims * self.k
    }

    /// `k^dims`, saturating.
    pub fn configurations(&self) -> u128 {
        (0..self.dims).fold(1u128, |acc, _| acc.saturating_mul(self.k as u128))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Reconstruction with MSE; latent bits are channel 0 of `k = 2` one-hots.
    BinaryAe,
    /// ELBO with a uniform categorical prior; the reported metric is BCE.
    CategoricalVae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub latent: CategoricalLatentSpec,
    pub encoder: MlpSpec,
    pub decoder: MlpSpec,
    /// KL weight for the VAE; ignored by the autoencoder.
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    1.0
}

impl ModelSpec {
    /// `input -> 256 -> 128 -> bits*2` encoder, mirrored decoder from `bits`.
    pub fn binary_ae(input_dim: usize, bits: usize) -> Self {
        Self {
            kind: ModelKind::BinaryAe,
            latent: CategoricalLatentSpec { dims: bits, k: 2 },
            encoder: MlpSpec::new(vec![input_dim, 256, 128, bits * 2], Activation::None),
            decoder: MlpSpec::new(vec![bits, 128, 256, input_dim], Activation::Sigmoid),
            beta: 0.0,
        }
    }

    /// `input -> 512 -> 256 -> dims*k` encoder, mirrored decoder.
    pub fn categorical_vae(input_dim: usize, dims: usize, k: usize) -> Self {
        let w = dims * k;
        Self {
            kind: ModelKind::CategoricalVae,
            latent: CategoricalLatentSpec { dims, k },
            encoder: MlpSpec::new(vec![input_dim, 512, 256, w], Activation::None),
            decoder: MlpSpec::new(vec![w, 256, 512, input_dim], Activation::Sigmoid),
            beta: 1.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_width()
    }

    pub fn decoder_input_width(&self) -> usize {
        match self.kind {
            ModelKind::BinaryAe => self.latent.dims,
            ModelKind::CategoricalVae => self.latent.width(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.latent.dims == 0 || self.latent.k == 0 {
            return Err(Error::Config("latent dims and k must be positive".into()));
        }
        if self.encoder.output_width() != self.latent.width() {
            return Err(Error::Config(format!(
                "encoder output width {} != dims*k = {}",
                self.encoder.output_width(),
                self.latent.width()
            )));
        }
        if self.decoder.input_width() != self.decoder_input_width() {
            return Err(Error::Config(format!(
                "decoder input width {} != {}",
                self.decoder.input_width(),
                self.decoder_input_width()
            )));
        }
        if self.decoder.output_width() != self.input_dim() {
            return Err(Error::Config("decoder must reconstruct the input width".into()));
        }
        if self.kind == ModelKind::BinaryAe && self.latent.k != 2 {
            return Err(Error::Config("binary autoencoder needs k = 2".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Named weights and biases, all with `requires_grad = true`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

/// Parameters registered as leaves of one graph.
pub struct BoundParams<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> BoundParams<'g> {
    pub fn get(&self, name: &str) -> Var<'g> {
        self.vars[name]
    }
}

fn layer_names(prefix: &str, i: usize) -> (String, String) {
    (format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias"))
}

fn init_mlp(spec: &MlpSpec, prefix: &str, rng: &mut ChaCha8Rng, out: &mut BTreeMap<String, Tensor>) {
    for (i, w) in spec.layer_widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| (2.0 * rng.random::<f64>() - 1.0) * a)
            .collect();
        let (wn, bn) = layer_names(prefix, i);
        out.insert(
            wn,
            Tensor::new(vec![fan_in, fan_out], data).unwrap().with_requires_grad(true),
        );
        out.insert(bn, Tensor::zeros(vec![fan_out]).with_requires_grad(true));
    }
}

/// Glorot-uniform weights, zero biases. Deterministic per seed.
pub fn init_mlp_params(spec: &MlpSpec, prefix: &str, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    init_mlp(spec, prefix, &mut rng, &mut tensors);
    ModelParams { tensors }
}

pub fn init_params(spec: &ModelSpec, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    init_mlp(&spec.encoder, "encoder", &mut rng, &mut tensors);
    init_mlp(&spec.decoder, "decoder", &mut rng, &mut tensors);
    ModelParams { tensors }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    schema_version: u32,
    tensors: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload that follows the header.
    offset: usize,
}

const CHECKPOINT_VERSION: u32 = 1;

impl ModelParams {
    pub fn from_tensors(tensors: impl IntoIterator<Item = (String, Tensor)>) -> Self {
        Self {
            tensors: tensors
                .into_iter()
                .map(|(n, t)| (n, t.with_requires_grad(true)))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every tensor as a leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph) -> BoundParams<'g> {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), graph.leaf(t.clone())))
                .collect(),
        }
    }

    /// Same as [`bind`](Self::bind) but as constants: no parameter gradients.
    pub fn bind_frozen<'g>(&self, graph: &'g Graph) -> BoundParams<'g> {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), graph.constant(t.clone())))
                .collect(),
        }
    }

    /// Adds each bound leaf's gradient into the matching tensor's `grad`.
    pub fn accumulate_grads(&mut self, bound: &BoundParams<'_>) {
        for (name, t) in self.tensors.iter_mut() {
            let Some(g) = bound.vars.get(name).and_then(|v| v.grad()) else {
                continue;
            };
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g.into_data()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Layout: u64 LE header length, JSON header, then every tensor's data as
    /// f64 little-endian in header order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(CheckpointEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len() * 8;
        }
        let header = serde_json::to_vec(&CheckpointHeader {
            schema_version: CHECKPOINT_VERSION,
            tensors: entries,
        })?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for t in self.tensors.values() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 8 {
            return Err(bad("missing header length"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let payload_start = 8usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[8..payload_start])?;
        if header.schema_version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported schema_version {}", header.schema_version)));
        }
        let payload = &bytes[payload_start..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * 8;
            if end > payload.len() {
                return Err(bad(&format!("tensor `{}` runs past end of file", e.name)));
            }
            let data = payload[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(e.name, Tensor::new(e.shape, data)?.with_requires_grad(true));
        }
        Ok(Self { tensors })
    }

    /// Checks that the parameter set matches `spec` exactly.
    pub fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        let expected = init_shapes(spec);
        if expected.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in expected {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Shape {
                        op: "checkpoint",
                        lhs: shape,
                        rhs: t.shape().to_vec(),
                    })
                }
                None => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
            }
        }
        Ok(())
    }
}

fn init_shapes(spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for (prefix, mlp) in [("encoder", &spec.encoder), ("decoder", &spec.decoder)] {
        for (i, w) in mlp.layer_widths.windows(2).enumerate() {
            let (wn, bn) = layer_names(prefix, i);
            out.push((wn, vec![w[0], w[1]]));
            out.push((bn, vec![w[1]]));
        }
    }
    out
}

fn mlp_forward<'g>(spec: &MlpSpec, prefix: &str, params: &BoundParams<'g>, x: Var<'g>) -> Result<Var<'g>> {
    let mut h = x;
    for (i, act) in spec.activations.iter().enumerate() {
        let (wn, bn) = layer_names(prefix, i);
        h = h.matmul(params.get(&wn))?.add(params.get(&bn))?;
        h = match act {
            Activation::Relu => h.relu()?,
            Activation::Sigmoid => h.sigmoid()?,
            Activation::None => h,
        };
    }
    Ok(h)
}

/// Logits `[batch, dims, k]` from inputs `[batch, input_dim]`.
pub fn encode<'g>(spec: &ModelSpec, params: &BoundParams<'g>, x: Var<'g>) -> Result<Var<'g>> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != spec.input_dim() {
        return Err(Error::Shape {
            op: "encode",
            lhs: vec![0, spec.input_dim()],
            rhs: shape,
        });
    }
    let h = mlp_forward(&spec.encoder, "encoder", params, x)?;
    h.reshape(vec![shape[0], spec.latent.dims, spec.latent.k])
}

/// What the decoder actually reads from a `[batch, dims, k]` latent block.
pub fn decoder_input<'g>(spec: &ModelSpec, z: Var<'g>) -> Result<Var<'g>> {
    let shape = z.shape();
    let CategoricalLatentSpec { dims, k } = spec.latent;
    if shape.len() != 3 || shape[1] != dims || shape[2] != k {
        return Err(Error::Shape {
            op: "decode",
            lhs: vec![0, dims, k],
            rhs: shape,
        });
    }
    let batch = shape[0];
    match spec.kind {
        ModelKind::CategoricalVae => z.reshape(vec![batch, dims * k]),
        ModelKind::BinaryAe => {
            let mut pick = Tensor::zeros(vec![k, 1]);
            pick.data_mut()[0] = 1.0;
            let pick = z.graph().constant(pick);
            z.reshape(vec![batch * dims, k])?.matmul(pick)?.reshape(vec![batch, dims])
        }
    }
}

/// Reconstruction in `(0, 1)` of shape `[batch, input_dim]`.
pub fn decode<'g>(spec: &ModelSpec, params: &BoundParams<'g>, z: Var<'g>) -> Result<Var<'g>> {
    let input = decoder_input(spec, z)?;
    mlp_forward(&spec.decoder, "decoder", params, input)
}

fn check_target(op: &'static str, xhat: Var<'_>, x: &Tensor) -> Result<()> {
    let s = xhat.shape();
    if s.as_slice() != x.shape() {
        return Err(Error::Shape {
            op,
            lhs: s,
            rhs: x.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean squared error over batch and pixels.
pub fn mse_loss<'g>(xhat: Var<'g>, x: &Tensor) -> Result<Var<'g>> {
    check_target("mse", xhat, x)?;
    let target = xhat.graph().constant(x.clone());
    let d = xhat.sub(target)?;
    d.mul(d)?.mean()
}

/// Binary cross-entropy summed over pixels, averaged over the batch.
pub fn bce_loss<'g>(xhat: Var<'g>, x: &Tensor) -> Result<Var<'g>> {
    check_target("bce", xhat, x)?;
    let g = xhat.graph();
    let batch = x.shape()[0].max(1) as f64;
    let pos = g.constant(x.clone());
    let neg = g.constant(x.map(|v| 1.0 - v));
    let one = g.constant(Tensor::full(x.shape().to_vec(), 1.0));
    let log_p = xhat.log_clamped(LOG_FLOOR)?;
    let log_q = one.sub(xhat)?.log_clamped(LOG_FLOOR)?;
    pos.mul(log_p)?.add(neg.mul(log_q)?)?.sum()?.scale(-1.0 / batch)
}

/// `Σ_dims KL(p ‖ uniform)` averaged over the batch, for `p` of shape `[batch, dims, k]`.
pub fn kl_to_uniform<'g>(probs: Var<'g>) -> Result<Var<'g>> {
    let shape = probs.shape();
    let (batch, k) = (shape[0].max(1) as f64, *shape.last().unwrap());
    let log_k = probs.graph().constant(Tensor::full(shape, (k as f64).ln()));
    probs
        .mul(probs.log_clamped(LOG_FLOOR)?.add(log_k)?)?
        .sum()?
        .scale(1.0 / batch)
}

/// Negative ELBO: `BCE + beta * KL(p ‖ uniform)`.
pub fn vae_loss<'g>(xhat: Var<'g>, x: &Tensor, probs: Var<'g>, beta: f64) -> Result<Var<'g>> {
    let bce = bce_loss(xhat, x)?;
    if beta == 0.0 {
        return Ok(bce);
    }
    bce.add(kl_to_uniform(probs)?.scale(beta)?)
}

/// Objective minimised during training.
pub fn training_loss<'g>(spec: &ModelSpec, xhat: Var<'g>, x: &Tensor, logits: Var<'g>) -> Result<Var<'g>> {
    match spec.kind {
        ModelKind::BinaryAe => mse_loss(xhat, x),
        ModelKind::CategoricalVae => vae_loss(xhat, x, logits.softmax()?, spec.beta),
    }
}

/// Reconstruction term alone: MSE for the autoencoder, BCE for the VAE.
pub fn reconstruction_loss<'g>(spec: &ModelSpec, xhat: Var<'g>, x: &Tensor) -> Result<Var<'g>> {
    match spec.kind {
        ModelKind::BinaryAe => mse_loss(xhat, x),
        ModelKind::CategoricalVae => bce_loss(xhat, x),
    }
}
