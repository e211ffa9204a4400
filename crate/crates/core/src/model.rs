//! Segmentation network: a 2-D U-Net whose chosen encoder stages are wrapped
//! with cross-patient hypergraph layers.
//!
//! Each encoder stage is two 3x3 same-padded convolutions with relu. Stages
//! listed in `cph_stages` flatten their output into vertices, build the
//! two-pass neighbor hypergraph on detached features, propagate, and fuse the
//! result back through a 1x1 convolution before the features continue to the
//! pool/skip paths. The head emits independent per-class sigmoid maps, since
//! the region classes are nested rather than exclusive.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypergraph::{self, GraphError};
use crate::tensor::tape::{Padding, Var};
use crate::tensor::TensorError;
use crate::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("spatial size {h}x{w} not divisible by {factor}")]
    IndivisibleSpatial { h: usize, w: usize, factor: usize },
    #[error("bad input: {0}")]
    BadInput(String),
    #[error("unknown parameter '{0}'")]
    MissingParam(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Architecture hyperparameters. The parameter set is a pure function of
/// this struct.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub num_classes: usize,
    pub num_modalities: usize,
    /// Encoder stages (1-based) that receive a cross-patient hypergraph.
    pub cph_stages: Vec<usize>,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            base_channels: 8,
            num_classes: 3,
            num_modalities: 4,
            cph_stages: vec![4, 5],
            init_seed: 7,
        }
    }
}

impl ModelConfig {
    /// Small configuration for gradient checks.
    pub fn tiny(cph: bool) -> Self {
        Self {
            depth: 3,
            base_channels: 2,
            num_classes: 2,
            num_modalities: 2,
            cph_stages: if cph { vec![3] } else { vec![] },
            init_seed: 11,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.num_classes == 0
            || self.num_modalities == 0
        {
            return Err(ModelError::ConfigMismatch(
                "depth, channels, classes and modalities must be positive".into(),
            ));
        }
        for &s in &self.cph_stages {
            if s == 0 || s > self.depth {
                return Err(ModelError::ConfigMismatch(format!(
                    "cph stage {s} outside 1..={}",
                    self.depth
                )));
            }
        }
        Ok(())
    }

    pub fn channels_at(&self, stage: usize) -> usize {
        self.base_channels << (stage - 1)
    }

    /// Input spatial sizes must be divisible by this.
    pub fn spatial_factor(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn has_cph(&self, stage: usize) -> bool {
        self.cph_stages.contains(&stage)
    }

    fn sorted_cph(&self) -> Vec<usize> {
        let mut v = self.cph_stages.clone();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Names and shapes of every parameter, in a fixed order.
    pub fn param_spec(&self) -> Vec<(String, Vec<usize>)> {
        let mut spec = Vec::new();
        for s in 1..=self.depth {
            let out = self.channels_at(s);
            let inp = if s == 1 { self.num_modalities } else { self.channels_at(s - 1) };
            spec.push((format!("enc{s}.conv1.weight"), vec![out, inp, 3, 3]));
            spec.push((format!("enc{s}.conv1.bias"), vec![out]));
            spec.push((format!("enc{s}.conv2.weight"), vec![out, out, 3, 3]));
            spec.push((format!("enc{s}.conv2.bias"), vec![out]));
        }
        for s in self.sorted_cph() {
            let ch = self.channels_at(s);
            spec.push((format!("cph{s}.fuse.weight"), vec![ch, 2 * ch, 1, 1]));
            spec.push((format!("cph{s}.fuse.bias"), vec![ch]));
            spec.push((format!("cph{s}.edge_weight"), vec![]));
        }
        for s in (1..self.depth).rev() {
            let ch = self.channels_at(s);
            let above = self.channels_at(s + 1);
            spec.push((format!("dec{s}.up.weight"), vec![ch, above, 3, 3]));
            spec.push((format!("dec{s}.up.bias"), vec![ch]));
            spec.push((format!("dec{s}.conv1.weight"), vec![ch, 2 * ch, 3, 3]));
            spec.push((format!("dec{s}.conv1.bias"), vec![ch]));
            spec.push((format!("dec{s}.conv2.weight"), vec![ch, ch, 3, 3]));
            spec.push((format!("dec{s}.conv2.bias"), vec![ch]));
        }
        spec.push(("head.weight".into(), vec![self.num_classes, self.channels_at(1), 1, 1]));
        spec.push(("head.bias".into(), vec![self.num_classes]));
        spec
    }
}

/// Named parameter tensors in the order of [`ModelConfig::param_spec`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    /// He-style uniform initialization; edge weights start at 1, biases at 0.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut entries = Vec::new();
        for (name, shape) in config.param_spec() {
            let tensor = if name.ends_with("edge_weight") {
                Tensor::scalar(1.0)
            } else if name.ends_with("bias") {
                Tensor::zeros(&shape)
            } else {
                // fan_in = Cin * kh * kw
                let fan_in: usize = shape[1..].iter().product();
                let limit = (6.0 / fan_in as f64).sqrt();
                let numel: usize = shape.iter().product();
                let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-limit..limit)).collect();
                Tensor::from_vec(shape, data)?
            };
            entries.push((name, tensor));
        }
        Ok(Self {
            config: config.clone(),
            entries,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| ModelError::MissingParam(name.into()))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Deep copy for the next training stage; mutating the copy leaves the
    /// source untouched. The target config must match.
    pub fn load_stage_weights(&self, config: &ModelConfig) -> Result<Self> {
        if config != &self.config {
            return Err(ModelError::ConfigMismatch(
                "stage config differs from parameter config".into(),
            ));
        }
        Ok(self.clone())
    }

    /// Bind every parameter onto a tape. With `trainable` the leaves collect
    /// gradients; otherwise they are constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let mut vars = BTreeMap::new();
        for (name, tensor) in &self.entries {
            vars.insert(name.clone(), tape.leaf(tensor.clone(), trainable));
        }
        BoundParams { vars }
    }

    const CKPT_MAGIC: &'static [u8] = b"HSEGCKPT1\n";

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let manifest = CheckpointManifest {
            config: self.config.clone(),
            params: self
                .entries
                .iter()
                .map(|(name, t)| ParamRecord {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let manifest_text = toml::to_string(&manifest)
            .map_err(|e| ModelError::Checkpoint(format!("manifest encode: {e}")))?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(Self::CKPT_MAGIC)?;
        w.write_all(&(manifest_text.len() as u32).to_le_bytes())?;
        w.write_all(manifest_text.as_bytes())?;
        for (_, tensor) in &self.entries {
            tensor.write_to(&mut w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = vec![0u8; Self::CKPT_MAGIC.len()];
        r.read_exact(&mut magic)?;
        if magic != Self::CKPT_MAGIC {
            return Err(ModelError::Checkpoint("wrong magic".into()));
        }
        let mut len4 = [0u8; 4];
        r.read_exact(&mut len4)?;
        let mut manifest_bytes = vec![0u8; u32::from_le_bytes(len4) as usize];
        r.read_exact(&mut manifest_bytes)?;
        let manifest_text = String::from_utf8(manifest_bytes)
            .map_err(|e| ModelError::Checkpoint(format!("manifest utf8: {e}")))?;
        let manifest: CheckpointManifest = toml::from_str(&manifest_text)
            .map_err(|e| ModelError::Checkpoint(format!("manifest parse: {e}")))?;
        manifest.config.validate()?;

        let spec = manifest.config.param_spec();
        if spec.len() != manifest.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} params, manifest lists {}",
                spec.len(),
                manifest.params.len()
            )));
        }
        let mut entries = Vec::with_capacity(spec.len());
        for ((want_name, want_shape), record) in spec.into_iter().zip(&manifest.params) {
            if want_name != record.name || want_shape != record.shape {
                return Err(ModelError::Checkpoint(format!(
                    "param '{}' {:?} does not match expected '{}' {:?}",
                    record.name, record.shape, want_name, want_shape
                )));
            }
            let tensor = Tensor::read_from(&mut r)?;
            if tensor.shape() != record.shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "payload shape {:?} for '{}' does not match manifest {:?}",
                    tensor.shape(),
                    record.name,
                    record.shape
                )));
            }
            entries.push((record.name.clone(), tensor));
        }
        let mut trailing = Vec::new();
        r.read_to_end(&mut trailing)?;
        if !trailing.is_empty() {
            return Err(ModelError::Checkpoint(format!(
                "{} trailing bytes",
                trailing.len()
            )));
        }
        Ok(Self {
            config: manifest.config,
            entries,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    config: ModelConfig,
    params: Vec<ParamRecord>,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
}

/// Tape handles for every parameter of one forward pass.
#[derive(Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Assemble from explicit handles (used by gradient checks that swap a
    /// single parameter for a tracked leaf).
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.into()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }
}

fn double_conv(
    tape: &mut Tape,
    x: Var,
    bound: &BoundParams,
    prefix: &str,
) -> Result<Var> {
    let w1 = bound.get(&format!("{prefix}.conv1.weight"))?;
    let b1 = bound.get(&format!("{prefix}.conv1.bias"))?;
    let x = tape.conv2d(x, w1, Some(b1), Padding::Same)?;
    let x = tape.relu(x);
    let w2 = bound.get(&format!("{prefix}.conv2.weight"))?;
    let b2 = bound.get(&format!("{prefix}.conv2.bias"))?;
    let x = tape.conv2d(x, w2, Some(b2), Padding::Same)?;
    Ok(tape.relu(x))
}

fn cph_block(tape: &mut Tape, x: Var, bound: &BoundParams, stage: usize) -> Result<Var> {
    let vertices = hypergraph::flatten_features(tape, x)?;
    // Topology is built on detached feature values; gradients flow through
    // the propagation only.
    let graph = hypergraph::build_two_pass(tape.value(vertices.features))?;
    let edge_scalar = bound.get(&format!("cph{stage}.edge_weight"))?;
    let edge_vec = tape.repeat_scalar(edge_scalar, graph.vertex_count())?;
    let propagated = hypergraph::hgnn_propagate(tape, &graph, vertices.features, Some(edge_vec))?;
    let fuse_w = bound.get(&format!("cph{stage}.fuse.weight"))?;
    let fuse_b = bound.get(&format!("cph{stage}.fuse.bias"))?;
    hypergraph::fuse(
        tape,
        propagated,
        x,
        vertices.source_dims,
        fuse_w,
        Some(fuse_b),
    )
    .map_err(Into::into)
}

/// Full forward pass: `(B, M, H, W)` to per-class sigmoid maps
/// `(B, num_classes, H, W)`.
pub fn forward(tape: &mut Tape, x: Var, bound: &BoundParams, config: &ModelConfig) -> Result<Var> {
    config.validate()?;
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != config.num_modalities {
        return Err(ModelError::BadInput(format!(
            "expected (B, {}, H, W) input, got {:?}",
            config.num_modalities, shape
        )));
    }
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    if b == 0 {
        return Err(ModelError::BadInput("empty batch".into()));
    }
    let factor = config.spatial_factor();
    if h % factor != 0 || w % factor != 0 || h / factor == 0 || w / factor == 0 {
        return Err(ModelError::IndivisibleSpatial { h, w, factor });
    }
    if b < 2 && !config.cph_stages.is_empty() {
        log::warn!(
            "batch of {b} with cross-patient hypergraph enabled: graph degenerates to within-image structure"
        );
    }

    let mut skips: Vec<Var> = Vec::with_capacity(config.depth - 1);
    let mut cur = x;
    for s in 1..=config.depth {
        if s > 1 {
            cur = tape.max_pool2(cur)?;
        }
        cur = double_conv(tape, cur, bound, &format!("enc{s}"))?;
        if config.has_cph(s) {
            cur = cph_block(tape, cur, bound, s)?;
        }
        if s < config.depth {
            skips.push(cur);
        }
    }
    for s in (1..config.depth).rev() {
        cur = tape.upsample2(cur)?;
        let uw = bound.get(&format!("dec{s}.up.weight"))?;
        let ub = bound.get(&format!("dec{s}.up.bias"))?;
        cur = tape.conv2d(cur, uw, Some(ub), Padding::Same)?;
        cur = tape.relu(cur);
        cur = tape.concat(&[cur, skips[s - 1]], 1)?;
        cur = double_conv(tape, cur, bound, &format!("dec{s}"))?;
    }
    let hw = bound.get("head.weight")?;
    let hb = bound.get("head.bias")?;
    let logits = tape.conv2d(cur, hw, Some(hb), Padding::Valid)?;
    Ok(tape.sigmoid(logits))
}

/// Convenience: bind parameters and run one forward pass.
pub fn forward_from_params(
    tape: &mut Tape,
    input: &Tensor,
    params: &ModelParams,
    trainable: bool,
) -> Result<(Var, BoundParams)> {
    let bound = params.bind(tape, trainable);
    let x = tape.constant(input.clone());
    let y = forward(tape, x, &bound, params.config())?;
    Ok((y, bound))
}
