//! The end-to-end experiment: identities, model training, enrollment,
//! attacks, random-makeup baselines, camera walks and the reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attack::{run_attack, AttackConfig, AttackContext, AttackError, AttackResult, Outcome};
use crate::embedder::{
    check_distinct, train, Dataset, EmbedderError, EmbedderSpec, EmbeddingModel, TrainConfig,
    TrainReport,
};
use crate::frpipeline::{
    align, evaluate_stream, format_rate, identify, recognition_rate, Gallery, Pipeline,
    PipelineError, StreamEvaluation, IDENTIFICATION_THRESHOLD, MIN_FACE_SIZE,
    PERSISTENCY_THRESHOLD,
};
use crate::image::Image;
use crate::makeup::{
    composite, intensity, random_makeup, IntensityScore, MakeupError, MakeupLayer, Palette,
    RandomMakeupConfig,
};
use crate::seeds;
use crate::synthface::{
    region_masks, synth_stream, CameraProfile, Cohort, FaceLandmarks, IdentityParams, Range,
    SynthError,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Embedder(#[from] EmbedderError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Makeup(#[from] MakeupError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("image: {0}")]
    Image(#[from] crate::image::ImageError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub identities: u64,
    pub training: u64,
    pub attack: u64,
    pub streams: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub participants: usize,
    pub distractors: usize,
    pub negatives: usize,
    /// Extra identities used only for training the embedders.
    pub training_identities: usize,
    pub images_per_training_identity: usize,
    pub enrollment_images: usize,
    /// Size of the attacker's positive set X.
    pub attacker_images: usize,
    pub frames_per_walk: usize,
    pub seeds: Seeds,
    pub cameras: Vec<CameraProfile>,
    /// Capture conditions of training photos.
    pub training_camera: CameraProfile,
    /// Capture conditions of enrollment and attacker photos.
    pub studio_camera: CameraProfile,
    pub surrogate: EmbedderSpec,
    pub target: EmbedderSpec,
    pub surrogate_training: TrainConfig,
    pub target_training: TrainConfig,
    pub attack: AttackConfig,
    pub random_makeup: RandomMakeupConfig,
    pub palette: Palette,
    pub identification_threshold: f64,
    pub persistency: usize,
    pub min_face: f64,
}

fn default_training_camera() -> CameraProfile {
    CameraProfile {
        id: "training".into(),
        yaw_deg: Range::new(-24.0, 24.0),
        pitch_deg: Range::new(-8.0, 18.0),
        roll_deg: Range::new(-8.0, 8.0),
        brightness: Range::new(-0.08, 0.08),
        ..CameraProfile::corridor_high()
    }
}

/// Triplet margin used when training the experiment's models. Wider than the
/// library default so that identities stay apart on the rendered faces.
pub const EXPERIMENT_MARGIN: f64 = 1.0;

impl Default for ExperimentConfig {
    fn default() -> Self {
        let seeds = Seeds {
            identities: 2024,
            training: 17,
            attack: 5,
            streams: 99,
        };
        let surrogate_training = TrainConfig {
            seed: seeds::derive(seeds.training, "surrogate", 0),
            margin: EXPERIMENT_MARGIN,
            ..TrainConfig::default()
        };
        let target_training = TrainConfig {
            seed: seeds::derive(seeds.training, "target", 0),
            margin: EXPERIMENT_MARGIN,
            ..TrainConfig::default()
        };
        Self {
            participants: 20,
            distractors: 50,
            negatives: 20,
            training_identities: 60,
            images_per_training_identity: 6,
            enrollment_images: 2,
            attacker_images: 4,
            frames_per_walk: 50,
            surrogate: EmbedderSpec::surrogate(seeds::derive(seeds.training, "surrogate-init", 0)),
            target: EmbedderSpec::target(seeds::derive(seeds.training, "target-init", 0)),
            seeds,
            cameras: CameraProfile::defaults(),
            training_camera: default_training_camera(),
            studio_camera: CameraProfile::studio(),
            surrogate_training,
            target_training,
            attack: AttackConfig::default(),
            random_makeup: RandomMakeupConfig::default(),
            palette: Palette::default(),
            identification_threshold: IDENTIFICATION_THRESHOLD,
            persistency: PERSISTENCY_THRESHOLD,
            min_face: MIN_FACE_SIZE,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.to_string()));
        if self.participants == 0 {
            return bad("participants must be >= 1");
        }
        if self.negatives == 0 {
            return bad("negatives must be >= 1");
        }
        if self.enrollment_images == 0 || self.attacker_images == 0 {
            return bad("enrollment and attacker image counts must be >= 1");
        }
        if self.frames_per_walk == 0 {
            return bad("frames_per_walk must be >= 1");
        }
        if self.cameras.is_empty() {
            return bad("at least one camera is required");
        }
        let mut ids: Vec<&str> = self.cameras.iter().map(|c| c.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != self.cameras.len() {
            return bad("camera ids must be unique");
        }
        for c in self.cameras.iter().chain([&self.training_camera, &self.studio_camera]) {
            c.validate(self.min_face)?;
        }
        check_distinct(&self.surrogate, &self.target)?;
        self.attack.validate()?;
        self.palette.validate()?;
        Ok(())
    }

    /// Replaces every seed (population, model init, training, attack,
    /// streams) with one derived from `master`.
    pub fn reseed(&mut self, master: u64) {
        self.seeds = Seeds {
            identities: seeds::derive(master, "identities", 0),
            training: seeds::derive(master, "training", 0),
            attack: seeds::derive(master, "attack", 0),
            streams: seeds::derive(master, "streams", 0),
        };
        let training = self.seeds.training;
        self.surrogate.seed = seeds::derive(training, "surrogate-init", 0);
        self.target.seed = seeds::derive(training, "target-init", 0);
        self.surrogate_training.seed = seeds::derive(training, "surrogate", 0);
        self.target_training.seed = seeds::derive(training, "target", 0);
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// A participant, distractor or negative identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Person {
    pub id: String,
    pub params: IdentityParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub participants: Vec<Person>,
    pub distractors: Vec<Person>,
    pub negatives: Vec<Person>,
    pub training: Vec<Person>,
}

fn people(base: u64, label: &str, prefix: &str, n: usize) -> Vec<Person> {
    (0..n)
        .map(|i| {
            let cohort = if i % 2 == 0 { Cohort::A } else { Cohort::B };
            Person {
                id: format!("{prefix}{:02}", i + 1),
                params: IdentityParams::from_seed(seeds::derive(base, label, i as u64), cohort),
            }
        })
        .collect()
}

pub fn population(config: &ExperimentConfig) -> Population {
    let s = config.seeds.identities;
    Population {
        participants: people(s, "participant", "P", config.participants),
        distractors: people(s, "distractor", "D", config.distractors),
        negatives: people(s, "negative", "N", config.negatives),
        training: people(s, "training", "T", config.training_identities),
    }
}

/// Aligned crops of a face stream.
pub fn aligned_photos(
    person: &IdentityParams,
    camera: &CameraProfile,
    n: usize,
    seed: u64,
    size: (usize, usize),
) -> Result<Vec<(Image, FaceLandmarks)>, HarnessError> {
    let stream = synth_stream(person, camera, n, seed, None)?;
    stream
        .frames
        .iter()
        .map(|f| {
            let gt = f.ground_truth.as_ref().expect("synthetic frames carry ground truth");
            Ok(align(&f.image, &gt.landmarks, size.1, size.0)?)
        })
        .collect()
}

/// Studio photos of one person: enrollment photos, then the attack base
/// photo, then the attacker's positive set.
fn studio_seed(config: &ExperimentConfig, person: &Person) -> u64 {
    seeds::derive(config.seeds.identities, &format!("studio/{}", person.id), 0)
}

fn studio_photos(
    config: &ExperimentConfig,
    person: &Person,
    size: (usize, usize),
) -> Result<Vec<(Image, FaceLandmarks)>, HarnessError> {
    let n = config.enrollment_images + 1 + config.attacker_images;
    aligned_photos(&person.params, &config.studio_camera, n, studio_seed(config, person), size)
}

/// Training images for a model input size.
pub fn training_dataset(
    config: &ExperimentConfig,
    pop: &Population,
    size: (usize, usize),
) -> Result<Dataset, HarnessError> {
    let identities = pop
        .training
        .par_iter()
        .map(|p| {
            let seed = seeds::derive(config.seeds.training, &format!("data/{}", p.id), 0);
            Ok(aligned_photos(
                &p.params,
                &config.training_camera,
                config.images_per_training_identity,
                seed,
                size,
            )?
            .into_iter()
            .map(|(img, _)| img)
            .collect())
        })
        .collect::<Result<Vec<Vec<Image>>, HarnessError>>()?;
    Ok(Dataset { identities })
}

#[derive(Debug, Clone)]
pub struct Models {
    pub surrogate: Arc<EmbeddingModel>,
    pub target: Arc<EmbeddingModel>,
    pub surrogate_report: TrainReport,
    pub target_report: TrainReport,
}

pub fn train_models(config: &ExperimentConfig, pop: &Population) -> Result<Models, HarnessError> {
    let data_s = training_dataset(config, pop, config.surrogate.input_size)?;
    let (surrogate, surrogate_report) = train(config.surrogate, &data_s, &config.surrogate_training)?;
    drop(data_s);
    let data_t = training_dataset(config, pop, config.target.input_size)?;
    let (target, target_report) = train(config.target, &data_t, &config.target_training)?;
    Ok(Models {
        surrogate: Arc::new(surrogate),
        target: Arc::new(target),
        surrogate_report,
        target_report,
    })
}

/// Enrolls participants (black list) and distractors with the target model.
pub fn enroll_gallery(
    config: &ExperimentConfig,
    pop: &Population,
    target: &EmbeddingModel,
) -> Result<Gallery, HarnessError> {
    let size = target.input_size();
    let enrolled = pop
        .participants
        .iter()
        .map(|p| (p, false))
        .chain(pop.distractors.iter().map(|p| (p, true)))
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(p, distractor)| {
            let photos = studio_photos(config, p, size)?;
            let embs = photos[..config.enrollment_images]
                .iter()
                .map(|(img, _)| target.embed(img))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((p.id.clone(), embs, *distractor))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let mut g = Gallery::new();
    for (id, embs, distractor) in enrolled {
        g.enroll(&id, embs, distractor)?;
    }
    Ok(g)
}

/// First studio photo of every negative identity, in population order.
pub fn negative_photos(
    config: &ExperimentConfig,
    pop: &Population,
    size: (usize, usize),
) -> Result<Vec<Image>, HarnessError> {
    pop.negatives
        .iter()
        .map(|n| Ok(studio_photos(config, n, size)?.swap_remove(0).0))
        .collect()
}

/// Attack inputs of one participant on the surrogate's aligned crop.
pub fn attack_context(
    config: &ExperimentConfig,
    pop: &Population,
    person: &Person,
    surrogate: Arc<EmbeddingModel>,
) -> Result<AttackContext, HarnessError> {
    let size = surrogate.input_size();
    let photos = studio_photos(config, person, size)?;
    let (base, base_lm) = photos[config.enrollment_images].clone();
    let positives = photos[config.enrollment_images + 1..]
        .iter()
        .map(|(i, _)| i.clone())
        .collect();
    let negatives = negative_photos(config, pop, size)?;
    let masks = region_masks(&base_lm, size.1, size.0)?;
    let seed = seeds::derive(config.seeds.attack, &person.id, 0);
    Ok(AttackContext::new(
        surrogate,
        base,
        positives,
        negatives,
        masks,
        config.palette.clone(),
        seed,
    )?)
}

/// Resamples a surrogate-aligned crop to the target's aligned size.
pub fn to_target_input(image: &Image, target: &EmbeddingModel) -> Image {
    let (h, w) = target.input_size();
    if (image.height(), image.width()) == (h, w) {
        image.clone()
    } else {
        image.resize(w, h)
    }
}

/// For each image: identified by the target as `identity`? Returns the
/// dodge flags (`true` = not identified as self).
pub fn digital_transfer_check(
    images: &[(String, Image)],
    target: &EmbeddingModel,
    gallery: &Gallery,
    threshold: f64,
) -> Result<Vec<bool>, HarnessError> {
    images
        .iter()
        .map(|(id, img)| {
            let e = target.embed(&to_target_input(img, target))?;
            let m = identify(&e, gallery, threshold)?;
            Ok(m.is_none_or(|m| &m.identity != id))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    None,
    Random,
    Adversarial,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::None, Condition::Random, Condition::Adversarial];

    pub fn label(self) -> &'static str {
        match self {
            Condition::None => "none",
            Condition::Random => "random",
            Condition::Adversarial => "adversarial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraResult {
    pub recognized: usize,
    pub unrecognized: usize,
    pub r_rec: Option<f64>,
    pub alarm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub participant: String,
    pub cohort: Cohort,
    pub condition: Condition,
    /// Pooled over cameras.
    pub all_cam: Option<f64>,
    pub cameras: BTreeMap<String, CameraResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigitalRow {
    pub participant: String,
    pub cohort: Cohort,
    pub surrogate_dodged: bool,
    pub iterations: usize,
    pub initial_distance: f64,
    pub final_distance: f64,
    pub target_dodged_adversarial: bool,
    pub target_dodged_random: bool,
    pub adversarial_intensity: f64,
    pub random_intensity: f64,
    /// Random makeup met the intensity floor.
    pub random_accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigitalSummary {
    pub surrogate_dodge_rate: f64,
    pub target_dodge_rate_adversarial: f64,
    pub target_dodge_rate_random: f64,
    pub mean_adversarial_intensity: f64,
    pub mean_random_intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub surrogate: TrainReport,
    pub target: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub excluded: Vec<String>,
    pub rows: Vec<ReportRow>,
    /// Mean pooled r_rec per condition.
    pub averages: BTreeMap<Condition, Option<f64>>,
    /// Mean pooled r_rec per cohort and condition.
    pub cohort_averages: BTreeMap<Cohort, BTreeMap<Condition, Option<f64>>>,
    pub digital: Vec<DigitalRow>,
    pub digital_summary: DigitalSummary,
    pub training: TrainingSummary,
}

/// Everything an experiment produces, including large artifacts.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: Report,
    pub attacks: Vec<(String, AttackResult)>,
    pub random_layers: Vec<(String, Vec<MakeupLayer>)>,
    pub evaluations: Vec<(String, Condition, StreamEvaluation)>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn rate(flags: impl Iterator<Item = bool>) -> f64 {
    mean(flags.map(|b| if b { 1.0 } else { 0.0 })).unwrap_or(0.0)
}

/// Mean of defined pooled rates per condition over `rows`.
pub fn condition_averages<'a>(
    rows: impl Iterator<Item = &'a ReportRow> + Clone,
) -> BTreeMap<Condition, Option<f64>> {
    Condition::ALL
        .iter()
        .map(|c| {
            (
                *c,
                mean(rows.clone().filter(|r| r.condition == *c).filter_map(|r| r.all_cam)),
            )
        })
        .collect()
}

fn stream_seed(config: &ExperimentConfig, person: &Person, camera: &CameraProfile) -> u64 {
    seeds::derive(config.seeds.streams, &format!("{}/{}", person.id, camera.id), 0)
}

/// One walk of a participant past every camera, concatenated.
pub fn participant_walk(
    config: &ExperimentConfig,
    person: &Person,
    makeup: Option<&[MakeupLayer]>,
) -> Result<crate::synthface::FrameStream, HarnessError> {
    let mut frames = Vec::new();
    for cam in &config.cameras {
        let s = synth_stream(
            &person.params,
            cam,
            config.frames_per_walk,
            stream_seed(config, person, cam),
            makeup,
        )?;
        frames.extend(s.frames);
    }
    Ok(crate::synthface::FrameStream { frames })
}

/// Per-camera recognition counts, rate and alarm of one evaluated walk.
pub fn camera_results(ev: &StreamEvaluation, cameras: &[CameraProfile]) -> BTreeMap<String, CameraResult> {
    let mut cams = BTreeMap::new();
    for cam in cameras {
        let (mut r, mut d) = (0, 0);
        for rec in ev.log.iter().filter(|l| l.camera == cam.id) {
            match rec.outcome.as_str() {
                "recognized" if rec.matched_id.as_deref() == Some(ev.identity.as_str()) => r += 1,
                "recognized" | "detected_unrecognized" => d += 1,
                _ => {}
            }
        }
        cams.insert(
            cam.id.clone(),
            CameraResult {
                recognized: r,
                unrecognized: d,
                r_rec: recognition_rate(r, d),
                alarm: ev.alarms.get(&cam.id).copied().unwrap_or(false),
            },
        );
    }
    cams
}

fn row_from(
    person: &Person,
    condition: Condition,
    ev: &StreamEvaluation,
    cameras: &[CameraProfile],
) -> ReportRow {
    ReportRow {
        participant: person.id.clone(),
        cohort: person.params.cohort,
        condition,
        all_cam: ev.r_rec,
        cameras: camera_results(ev, cameras),
    }
}

/// Surveillance pipeline with the configured threshold, persistency and
/// minimum face size.
pub fn configured_pipeline(config: &ExperimentConfig, target: EmbeddingModel, gallery: Gallery) -> Pipeline {
    let mut pipeline = Pipeline::new(target, gallery);
    pipeline.threshold = config.identification_threshold;
    pipeline.persistency = config.persistency;
    pipeline.min_face = config.min_face;
    pipeline
}

/// Runs the whole protocol with freshly trained models.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    config.validate()?;
    let pop = population(config);
    let models = train_models(config, &pop)?;
    run_experiment_with(config, &pop, &models)
}

/// Runs everything after training.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    pop: &Population,
    models: &Models,
) -> Result<ExperimentOutput, HarnessError> {
    config.validate()?;
    let gallery = enroll_gallery(config, pop, &models.target)?;
    let pipeline = configured_pipeline(config, (*models.target).clone(), gallery);

    // baseline verification on the unmodified attack photo
    let verified = pop
        .participants
        .par_iter()
        .map(|p| {
            let photos = studio_photos(config, p, models.target.input_size())?;
            let e = models.target.embed(&photos[config.enrollment_images].0)?;
            let m = identify(&e, &pipeline.gallery, pipeline.threshold)?;
            Ok(m.is_some_and(|m| m.identity == p.id))
        })
        .collect::<Result<Vec<bool>, HarnessError>>()?;
    let included: Vec<&Person> = pop
        .participants
        .iter()
        .zip(&verified)
        .filter_map(|(p, ok)| ok.then_some(p))
        .collect();
    let excluded: Vec<String> = pop
        .participants
        .iter()
        .zip(&verified)
        .filter_map(|(p, ok)| (!ok).then(|| p.id.clone()))
        .collect();

    struct Crafted {
        attack: AttackResult,
        base: Image,
        random: Vec<MakeupLayer>,
        random_image: Image,
        random_accepted: bool,
    }
    let crafted = included
        .par_iter()
        .map(|p| {
            let ctx = attack_context(config, pop, p, models.surrogate.clone())?;
            let attack = run_attack(&ctx, &config.attack)?;
            let seed = seeds::derive(config.seeds.attack, &format!("random/{}", p.id), 0);
            let (random, random_accepted) = match random_makeup(
                &config.palette,
                ctx.masks(),
                seed,
                IntensityScore {
                    value: attack.intensity,
                },
                ctx.base(),
                &config.random_makeup,
            ) {
                Ok(layers) => (layers, true),
                Err(MakeupError::IntensityNotReached { layers, .. }) => (layers, false),
                Err(e) => return Err(e.into()),
            };
            let random_image = composite(ctx.base(), &random, ctx.masks())?;
            Ok(Crafted {
                attack,
                base: ctx.base().clone(),
                random,
                random_image,
                random_accepted,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;

    let adv_images: Vec<(String, Image)> = included
        .iter()
        .zip(&crafted)
        .map(|(p, c)| {
            (
                p.id.clone(),
                c.attack.final_image.clone().unwrap_or_else(|| c.base.clone()),
            )
        })
        .collect();
    let rnd_images: Vec<(String, Image)> = included
        .iter()
        .zip(&crafted)
        .map(|(p, c)| (p.id.clone(), c.random_image.clone()))
        .collect();
    let adv_dodge =
        digital_transfer_check(&adv_images, &models.target, &pipeline.gallery, pipeline.threshold)?;
    let rnd_dodge =
        digital_transfer_check(&rnd_images, &models.target, &pipeline.gallery, pipeline.threshold)?;

    let mut digital = Vec::new();
    for (i, (p, c)) in included.iter().zip(&crafted).enumerate() {
        digital.push(DigitalRow {
            participant: p.id.clone(),
            cohort: p.params.cohort,
            surrogate_dodged: c.attack.outcome == Outcome::Dodged,
            iterations: c.attack.trace.len(),
            initial_distance: c.attack.initial_distance,
            final_distance: c.attack.final_distance,
            target_dodged_adversarial: adv_dodge[i],
            target_dodged_random: rnd_dodge[i],
            adversarial_intensity: c.attack.intensity,
            random_intensity: intensity(&c.random_image, &c.base)?.value,
            random_accepted: c.random_accepted,
        });
    }

    let jobs: Vec<(usize, Condition)> = (0..included.len())
        .flat_map(|i| Condition::ALL.map(|c| (i, c)))
        .collect();
    let evaluations = jobs
        .par_iter()
        .map(|&(i, condition)| {
            let p = included[i];
            let makeup = match condition {
                Condition::None => None,
                Condition::Random => Some(crafted[i].random.as_slice()),
                Condition::Adversarial => Some(crafted[i].attack.layers.as_slice()),
            };
            let walk = participant_walk(config, p, makeup)?;
            let ev = evaluate_stream(&pipeline, &walk, &p.id)?;
            Ok((p.id.clone(), condition, ev))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let rows: Vec<ReportRow> = evaluations
        .iter()
        .map(|(id, c, ev)| {
            let p = included.iter().find(|p| &p.id == id).expect("participant");
            row_from(p, *c, ev, &config.cameras)
        })
        .collect();
    let averages = condition_averages(rows.iter());
    let cohort_averages = [Cohort::A, Cohort::B]
        .into_iter()
        .map(|c| (c, condition_averages(rows.iter().filter(move |r| r.cohort == c))))
        .collect();
    let digital_summary = DigitalSummary {
        surrogate_dodge_rate: rate(digital.iter().map(|d| d.surrogate_dodged)),
        target_dodge_rate_adversarial: rate(digital.iter().map(|d| d.target_dodged_adversarial)),
        target_dodge_rate_random: rate(digital.iter().map(|d| d.target_dodged_random)),
        mean_adversarial_intensity: mean(digital.iter().map(|d| d.adversarial_intensity))
            .unwrap_or(0.0),
        mean_random_intensity: mean(digital.iter().map(|d| d.random_intensity)).unwrap_or(0.0),
    };
    let report = Report {
        config_hash: config.hash(),
        excluded,
        rows,
        averages,
        cohort_averages,
        digital,
        digital_summary,
        training: TrainingSummary {
            surrogate: models.surrogate_report.clone(),
            target: models.target_report.clone(),
        },
    };
    Ok(ExperimentOutput {
        report,
        attacks: included
            .iter()
            .zip(&crafted)
            .map(|(p, c)| (p.id.clone(), c.attack.clone()))
            .collect(),
        random_layers: included
            .iter()
            .zip(crafted)
            .map(|(p, c)| (p.id.clone(), c.random))
            .collect(),
        evaluations,
    })
}

fn flag(b: bool) -> &'static str {
    if b {
        "T"
    } else {
        "F"
    }
}

impl Report {
    /// One line per participant and method with per-camera rates and alarms.
    pub fn participants_csv(&self, cameras: &[String]) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id".to_string(), "cohort".into(), "method".into(), "all_cam".into()];
        header.extend(cameras.iter().cloned());
        header.extend(cameras.iter().map(|c| format!("alarm_{c}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.participant.clone(),
                r.cohort.label().to_string(),
                r.condition.label().to_string(),
                format_rate(r.all_cam),
            ];
            rec.extend(cameras.iter().map(|c| format_rate(r.cameras.get(c).and_then(|x| x.r_rec))));
            rec.extend(
                cameras
                    .iter()
                    .map(|c| flag(r.cameras.get(c).is_some_and(|x| x.alarm)).to_string()),
            );
            w.write_record(&rec)?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?)
            .expect("utf-8"))
    }

    /// Average recognition rate per cohort and method.
    pub fn averages_csv(&self) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "cohort_a", "cohort_b", "total"])?;
        for c in Condition::ALL {
            let get = |co: Cohort| {
                format_rate(self.cohort_averages.get(&co).and_then(|m| m.get(&c).copied().flatten()))
            };
            w.write_record([
                c.label().to_string(),
                get(Cohort::A),
                get(Cohort::B),
                format_rate(self.averages.get(&c).copied().flatten()),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?)
            .expect("utf-8"))
    }

    pub fn digital_csv(&self) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "id",
            "cohort",
            "surrogate_dodged",
            "iterations",
            "final_distance",
            "target_dodged_adversarial",
            "target_dodged_random",
            "adversarial_intensity",
            "random_intensity",
        ])?;
        for d in &self.digital {
            w.write_record([
                d.participant.clone(),
                d.cohort.label().to_string(),
                flag(d.surrogate_dodged).to_string(),
                d.iterations.to_string(),
                format!("{:.4}", d.final_distance),
                flag(d.target_dodged_adversarial).to_string(),
                flag(d.target_dodged_random).to_string(),
                format!("{:.4}", d.adversarial_intensity),
                format!("{:.4}", d.random_intensity),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?)
            .expect("utf-8"))
    }
}

/// Run manifest: configuration hash, seeds and the SHA-256 of every
/// written file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seeds: Seeds,
    pub files: BTreeMap<String, String>,
}

/// Output directory that records the SHA-256 of every file written
/// through it and finishes with a manifest.
#[derive(Debug)]
pub struct TrackedDir {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl TrackedDir {
    pub fn create(root: &Path) -> Result<Self, HarnessError> {
        std::fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `bytes` to `rel` (a `/`-separated path below the root).
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), HarnessError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.files.insert(rel.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    /// Records a file some other writer already placed below the root.
    pub fn track(&mut self, rel: &str) -> Result<(), HarnessError> {
        let bytes = std::fs::read(self.root.join(rel))?;
        self.files.insert(rel.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), HarnessError> {
        self.write(rel, serde_json::to_string_pretty(value)?.as_bytes())
    }

    /// Writes `manifest.json` and returns it.
    pub fn finish(self, config: &ExperimentConfig) -> Result<Manifest, HarnessError> {
        let manifest = Manifest {
            tool: "facedodge".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config.hash(),
            seeds: config.seeds.clone(),
            files: self.files,
        };
        std::fs::write(
            self.root.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(manifest)
    }
}

impl ExperimentOutput {
    /// Writes reports, stream logs, attack artifacts and the manifest.
    pub fn write(&self, config: &ExperimentConfig, dir: &Path) -> Result<Manifest, HarnessError> {
        let mut out = TrackedDir::create(dir)?;
        let cams: Vec<String> = config.cameras.iter().map(|c| c.id.clone()).collect();
        out.write_json("config.json", config)?;
        out.write_json("report.json", &self.report)?;
        out.write("participants.csv", self.report.participants_csv(&cams)?.as_bytes())?;
        out.write("averages.csv", self.report.averages_csv()?.as_bytes())?;
        out.write("digital.csv", self.report.digital_csv()?.as_bytes())?;
        for (id, cond, ev) in &self.evaluations {
            out.write(&format!("logs/{id}_{}.csv", cond.label()), ev.log_csv()?.as_bytes())?;
        }
        for (id, res) in &self.attacks {
            out.write(&format!("attacks/{id}/result.json"), res.to_json()?.as_bytes())?;
            out.write_json(&format!("attacks/{id}/plan.json"), &res.plan())?;
            if let Some(img) = &res.final_image {
                out.write(&format!("attacks/{id}/final.png"), &img.to_png()?)?;
            }
        }
        for (id, layers) in &self.random_layers {
            let plan = crate::makeup::MakeupPlan::from_layers(layers.clone());
            out.write_json(&format!("random/{id}/plan.json"), &plan)?;
        }
        out.finish(config)
    }
}
