//! Embedding models and their losses.
//!
//! Two small convolutional architectures map aligned face crops to unit
//! vectors. They are trained with the classic triplet loss; the attack uses
//! an inverted variant whose input gradient drives the heatmap.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    backward_with, forward, read_weights, write_weights, AutodiffError, ComputationGraph,
    GradRequest, Layer, Tensor,
};
use crate::image::Image;
use crate::seeds;

/// Embedding dimension of both architectures.
pub const EMBEDDING_DIM: usize = 64;
/// Margin of the attack loss.
pub const ATTACK_MARGIN: f64 = 0.8;
/// Default margin of the training triplet loss.
pub const DEFAULT_TRIPLET_MARGIN: f64 = 0.2;

#[derive(Debug, Error)]
pub enum EmbedderError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("image is {actual:?}, model expects {expected:?}")]
    ImageShape {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("the positive set is empty")]
    EmptyPositives,
    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Surrogate,
    Target,
}

/// The two network layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// 4x4 stride-4 patch embedding followed by two 3x3 convolutions.
    PatchConv3,
    /// 3x3 stride-2 stem followed by three 3x3 convolutions.
    StrideConv4,
}

impl Architecture {
    pub fn id(self) -> &'static str {
        match self {
            Architecture::PatchConv3 => "patch_conv3",
            Architecture::StrideConv4 => "stride_conv4",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderSpec {
    pub role: ModelRole,
    /// `(height, width)` in pixels.
    pub input_size: (usize, usize),
    pub architecture: Architecture,
    pub seed: u64,
}

impl EmbedderSpec {
    pub fn surrogate(seed: u64) -> Self {
        Self {
            role: ModelRole::Surrogate,
            input_size: (160, 160),
            architecture: Architecture::PatchConv3,
            seed,
        }
    }

    pub fn target(seed: u64) -> Self {
        Self {
            role: ModelRole::Target,
            input_size: (112, 112),
            architecture: Architecture::StrideConv4,
            seed,
        }
    }
}

/// Checks that a surrogate/target pair is not the same model.
pub fn check_distinct(surrogate: &EmbedderSpec, target: &EmbedderSpec) -> Result<(), EmbedderError> {
    if surrogate.architecture == target.architecture && surrogate.seed == target.seed {
        return Err(EmbedderError::InvalidSpec(
            "surrogate and target share architecture and seed".into(),
        ));
    }
    Ok(())
}

/// A unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn squared_distance(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// Mean of several embeddings, re-normalized to unit length.
    pub fn normalized_mean(items: &[Embedding]) -> Option<Embedding> {
        let first = items.first()?;
        let mut acc = vec![0.0; first.0.len()];
        for e in items {
            for (a, v) in acc.iter_mut().zip(&e.0) {
                *a += v;
            }
        }
        let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < 1e-12 {
            return None;
        }
        Some(Embedding(acc.into_iter().map(|v| v / n).collect()))
    }
}

/// A spec together with its computation graph.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    spec: EmbedderSpec,
    graph: ComputationGraph,
}

fn conv(name: &str, stride: usize, padding: usize) -> [Layer; 3] {
    [
        Layer::Conv2d {
            weight: format!("{name}.w"),
            stride,
            padding,
        },
        Layer::BiasAdd {
            bias: format!("{name}.b"),
        },
        Layer::Relu,
    ]
}

/// `(name, out_c, kernel, in_c, stride, padding)` of every convolution, and
/// where max-pools follow.
type ConvPlan = Vec<(&'static str, usize, usize, usize, usize, usize, bool)>;

fn conv_plan(arch: Architecture) -> ConvPlan {
    match arch {
        Architecture::PatchConv3 => vec![
            ("conv1", 10, 4, 3, 4, 0, false),
            ("conv2", 16, 3, 10, 1, 1, true),
            ("conv3", 24, 3, 16, 2, 1, true),
        ],
        Architecture::StrideConv4 => vec![
            ("conv1", 8, 3, 3, 2, 1, true),
            ("conv2", 12, 3, 8, 1, 1, true),
            ("conv3", 16, 3, 12, 1, 1, false),
            ("conv4", 20, 3, 16, 2, 1, false),
        ],
    }
}

fn build_graph(spec: &EmbedderSpec) -> Result<ComputationGraph, EmbedderError> {
    let (h, w) = spec.input_size;
    if h < 16 || w < 16 {
        return Err(EmbedderError::InvalidSpec(format!("input {h}x{w} too small")));
    }
    let mut rng = seeds::rng(seeds::derive(spec.seed, "init", 0));
    let mut layers = Vec::new();
    let mut weights = BTreeMap::new();
    for (name, co, k, ci, stride, pad, pool) in conv_plan(spec.architecture) {
        let fan_in = (k * k * ci) as f64;
        let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let data: Vec<f64> = (0..co * k * k * ci).map(|_| dist.sample(&mut rng)).collect();
        weights.insert(format!("{name}.w"), Tensor::new(vec![co, k, k, ci], data)?);
        weights.insert(format!("{name}.b"), Tensor::zeros(vec![co]));
        layers.extend(conv(name, stride, pad));
        if pool {
            layers.push(Layer::MaxPool { size: 2, stride: 2 });
        }
    }
    layers.push(Layer::Flatten);
    // infer the flattened width from a weightless prefix graph
    let prefix = ComputationGraph::new(vec![h, w, 3], layers.clone(), weights.clone())?;
    let flat = prefix.output_shape()[0];
    let dist = Normal::new(0.0, (1.0 / flat as f64).sqrt()).expect("finite std");
    let data: Vec<f64> = (0..EMBEDDING_DIM * flat).map(|_| dist.sample(&mut rng)).collect();
    weights.insert("fc.w".into(), Tensor::new(vec![EMBEDDING_DIM, flat], data)?);
    layers.push(Layer::Dense {
        weight: "fc.w".into(),
    });
    layers.push(Layer::L2Normalize);
    Ok(ComputationGraph::new(vec![h, w, 3], layers, weights)?)
}

impl EmbeddingModel {
    /// Seeded initialization.
    pub fn init(spec: EmbedderSpec) -> Result<Self, EmbedderError> {
        let graph = build_graph(&spec)?;
        Ok(Self { spec, graph })
    }

    pub fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    pub fn graph(&self) -> &ComputationGraph {
        &self.graph
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.spec.input_size
    }

    fn check_image(&self, image: &Image) -> Result<(), EmbedderError> {
        let actual = (image.height(), image.width());
        if actual != self.spec.input_size {
            return Err(EmbedderError::ImageShape {
                expected: self.spec.input_size,
                actual,
            });
        }
        Ok(())
    }

    pub fn embed(&self, image: &Image) -> Result<Embedding, EmbedderError> {
        self.check_image(image)?;
        let trace = forward(&self.graph, &image.to_tensor())?;
        Ok(Embedding(trace.into_output().into_data()))
    }

    /// Writes `<stem>.fdw` (weights) and `<stem>.json` (spec sidecar).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), EmbedderError> {
        std::fs::create_dir_all(dir)?;
        write_weights(&dir.join(format!("{stem}.fdw")), self.graph.weights())?;
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&self.spec)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, EmbedderError> {
        let spec: EmbedderSpec =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let weights = read_weights(&dir.join(format!("{stem}.fdw")))?;
        let mut model = Self::init(spec)?;
        for (name, t) in weights {
            model.graph.set_weight(&name, t)?;
        }
        Ok(model)
    }
}

/// Classic triplet loss `max(0, |a-p|^2 - |a-n|^2 + alpha)`.
pub fn triplet_loss(a: &Embedding, p: &Embedding, n: &Embedding, alpha: f64) -> f64 {
    (a.squared_distance(p) - a.squared_distance(n) + alpha).max(0.0)
}

/// Attack loss `max(0, |a-n|^2 - |a-p|^2 + 0.8)`: small when the anchor has
/// left its own identity for the negative one.
pub fn attack_loss(a: &Embedding, p: &Embedding, n: &Embedding) -> f64 {
    (a.squared_distance(n) - a.squared_distance(p) + ATTACK_MARGIN).max(0.0)
}

/// Three aligned images with a training margin.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub anchor: Image,
    pub positive: Image,
    pub negative: Image,
    pub margin: f64,
}

impl TripletBatch {
    pub fn loss(&self, model: &EmbeddingModel) -> Result<f64, EmbedderError> {
        if !(self.margin > 0.0) {
            return Err(EmbedderError::InvalidConfig("margin must be positive".into()));
        }
        Ok(triplet_loss(
            &model.embed(&self.anchor)?,
            &model.embed(&self.positive)?,
            &model.embed(&self.negative)?,
            self.margin,
        ))
    }
}

/// Gradient w.r.t. `x` of the mean attack loss over the positive set.
pub fn input_gradient(
    model: &EmbeddingModel,
    x: &Image,
    positives: &[Image],
    negative: &Image,
) -> Result<Tensor, EmbedderError> {
    let pos = positives
        .iter()
        .map(|p| model.embed(p))
        .collect::<Result<Vec<_>, _>>()?;
    let neg = model.embed(negative)?;
    input_gradient_with(model, x, &pos, &neg)
}

/// As [`input_gradient`], with the positive and negative embeddings precomputed.
pub fn input_gradient_with(
    model: &EmbeddingModel,
    x: &Image,
    positives: &[Embedding],
    negative: &Embedding,
) -> Result<Tensor, EmbedderError> {
    if positives.is_empty() {
        return Err(EmbedderError::EmptyPositives);
    }
    model.check_image(x)?;
    let trace = forward(&model.graph, &x.to_tensor())?;
    let a = Embedding(trace.output().data().to_vec());
    let mut g = vec![0.0; a.0.len()];
    let mut active = false;
    let scale = 1.0 / positives.len() as f64;
    for p in positives {
        if attack_loss(&a, p, negative) > 0.0 {
            active = true;
            for ((gi, pi), ni) in g.iter_mut().zip(&p.0).zip(&negative.0) {
                *gi += 2.0 * (pi - ni) * scale;
            }
        }
    }
    if !active {
        return Ok(Tensor::zeros(model.graph.input_shape().to_vec()));
    }
    let out_grad = Tensor::new(vec![g.len()], g)?;
    Ok(backward_with(&model.graph, &trace, &out_grad, GradRequest::INPUT)?.input)
}

/// Aligned training images grouped by identity.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub identities: Vec<Vec<Image>>,
}

impl Dataset {
    pub const MIN_IDENTITIES: usize = 8;
    pub const MIN_IMAGES: usize = 4;

    fn validate(&self, size: (usize, usize)) -> Result<(), EmbedderError> {
        if self.identities.len() < Self::MIN_IDENTITIES {
            return Err(EmbedderError::DatasetTooSmall(format!(
                "{} identities, need {}",
                self.identities.len(),
                Self::MIN_IDENTITIES
            )));
        }
        for (i, imgs) in self.identities.iter().enumerate() {
            if imgs.len() < Self::MIN_IMAGES {
                return Err(EmbedderError::DatasetTooSmall(format!(
                    "identity {i} has {} images, need {}",
                    imgs.len(),
                    Self::MIN_IMAGES
                )));
            }
            for img in imgs {
                if (img.height(), img.width()) != size {
                    return Err(EmbedderError::ImageShape {
                        expected: size,
                        actual: (img.height(), img.width()),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Triplets per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub seed: u64,
    /// Size of the fixed triplet set used to measure the loss trace.
    pub eval_triplets: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            steps_per_epoch: 40,
            batch_size: 8,
            learning_rate: 2e-3,
            margin: DEFAULT_TRIPLET_MARGIN,
            seed: 7,
            eval_triplets: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    /// Mean triplet loss on the evaluation triplets after each epoch.
    pub loss_trace: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.loss_trace.last().copied().unwrap_or(self.initial_loss)
    }
}

type Triplet = ((usize, usize), (usize, usize), (usize, usize));

fn draw_triplet<R: Rng>(data: &Dataset, rng: &mut R) -> Triplet {
    let n = data.identities.len();
    let a_id = rng.random_range(0..n);
    let imgs = data.identities[a_id].len();
    let a = rng.random_range(0..imgs);
    let mut p = rng.random_range(0..imgs - 1);
    if p >= a {
        p += 1;
    }
    let mut n_id = rng.random_range(0..n - 1);
    if n_id >= a_id {
        n_id += 1;
    }
    let ni = rng.random_range(0..data.identities[n_id].len());
    ((a_id, a), (a_id, p), (n_id, ni))
}

fn mean_loss(
    model: &EmbeddingModel,
    data: &Dataset,
    triplets: &[Triplet],
    margin: f64,
) -> Result<f64, EmbedderError> {
    let mut cache: BTreeMap<(usize, usize), Embedding> = BTreeMap::new();
    let mut total = 0.0;
    for t in triplets {
        let mut emb = |k: (usize, usize)| -> Result<Embedding, EmbedderError> {
            if let Some(e) = cache.get(&k) {
                return Ok(e.clone());
            }
            let e = model.embed(&data.identities[k.0][k.1])?;
            cache.insert(k, e.clone());
            Ok(e)
        };
        let (a, p, n) = (emb(t.0)?, emb(t.1)?, emb(t.2)?);
        total += triplet_loss(&a, &p, &n, margin);
    }
    Ok(total / triplets.len().max(1) as f64)
}

struct Adam {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, graph: &mut ComputationGraph, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (name, w) in graph.weights_mut() {
            let g = grads[name].data();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, wi) in w.data_mut().iter_mut().enumerate() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                *wi -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Triplet-loss training with Adam over uniformly drawn triplets.
pub fn train(
    spec: EmbedderSpec,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(EmbeddingModel, TrainReport), EmbedderError> {
    data.validate(spec.input_size)?;
    if config.batch_size == 0 || !(config.learning_rate > 0.0) || !(config.margin > 0.0) {
        return Err(EmbedderError::InvalidConfig(
            "batch size, learning rate and margin must be positive".into(),
        ));
    }
    let mut model = EmbeddingModel::init(spec)?;
    let mut eval_rng = seeds::rng(seeds::derive(config.seed, "eval-triplets", 0));
    let eval: Vec<Triplet> = (0..config.eval_triplets.max(1))
        .map(|_| draw_triplet(data, &mut eval_rng))
        .collect();
    let initial_loss = mean_loss(&model, data, &eval, config.margin)?;
    let mut rng = seeds::rng(seeds::derive(config.seed, "train", 0));
    let mut adam = Adam {
        m: BTreeMap::new(),
        v: BTreeMap::new(),
        t: 0,
    };
    let mut loss_trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        for _ in 0..config.steps_per_epoch {
            let mut acc: BTreeMap<String, Tensor> = model
                .graph
                .weights()
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect();
            let scale = 1.0 / config.batch_size as f64;
            for _ in 0..config.batch_size {
                let (ka, kp, kn) = draw_triplet(data, &mut rng);
                let imgs = [
                    &data.identities[ka.0][ka.1],
                    &data.identities[kp.0][kp.1],
                    &data.identities[kn.0][kn.1],
                ];
                let traces = imgs
                    .iter()
                    .map(|img| forward(&model.graph, &img.to_tensor()))
                    .collect::<Result<Vec<_>, _>>()?;
                let e: Vec<&[f64]> = traces.iter().map(|t| t.output().data()).collect();
                let (a, p, n) = (e[0], e[1], e[2]);
                let d_ap: f64 = a.iter().zip(p).map(|(x, y)| (x - y) * (x - y)).sum();
                let d_an: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum();
                if d_ap - d_an + config.margin <= 0.0 {
                    continue;
                }
                let ga: Vec<f64> = p.iter().zip(n).map(|(pi, ni)| 2.0 * (ni - pi) * scale).collect();
                let gp: Vec<f64> = p.iter().zip(a).map(|(pi, ai)| 2.0 * (pi - ai) * scale).collect();
                let gn: Vec<f64> = a.iter().zip(n).map(|(ai, ni)| 2.0 * (ai - ni) * scale).collect();
                for (trace, g) in traces.iter().zip([ga, gp, gn]) {
                    let og = Tensor::new(vec![g.len()], g)?;
                    let grads = backward_with(&model.graph, trace, &og, GradRequest::PARAMS)?;
                    for (k, t) in grads.params {
                        acc.get_mut(&k).expect("same keys").add_scaled(&t, 1.0);
                    }
                }
            }
            adam.step(&mut model.graph, &acc, config.learning_rate);
        }
        loss_trace.push(mean_loss(&model, data, &eval, config.margin)?);
    }
    Ok((
        model,
        TrainReport {
            initial_loss,
            loss_trace,
        },
    ))
}
