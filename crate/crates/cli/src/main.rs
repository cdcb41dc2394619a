//! `facedodge` command-line tool.
//!
//! Every subcommand reads an optional experiment config (`--config`, JSON,
//! unknown keys rejected), writes its files below `--out/<subcommand>` and
//! finishes with a `manifest.json` holding the config hash, the seeds and
//! the SHA-256 of every file it wrote.
//!
//! Exit codes: 0 on success, 1 on a domain error, 2 on a usage error.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use facedodge::attack::{run_attack, AttackContext};
use facedodge::embedder::EmbeddingModel;
use facedodge::frpipeline::{align, evaluate_stream, format_rate, Gallery, StreamEvaluation};
use facedodge::harness::{
    camera_results, configured_pipeline, digital_transfer_check, enroll_gallery, negative_photos, participant_walk,
    population, run_experiment_with, train_models, ExperimentConfig, Models, Population,
    TrackedDir, TrainingSummary,
};
use facedodge::image::Image;
use facedodge::makeup::{composite, intensity, random_makeup, IntensityScore, MakeupPlan};
use facedodge::seeds;
use facedodge::synthface::{region_masks, FaceLandmarks};
use facedodge_studio::Studio;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "facedodge", version, about = "Makeup dodging attacks against a simulated face recognition pipeline")]
struct Cli {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces every seed in the config with ones derived from this value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; each subcommand writes into its own directory below it.
    #[arg(long, global = true, env = "FACEDODGE_OUT", default_value = "facedodge-out")]
    out: PathBuf,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Format of tabular output.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Progress messages on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Trains the surrogate and target embedders.
    Train,
    /// Enrolls the participants and distractors with the target model.
    Enroll {
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Runs the greedy makeup attack on one photo.
    Attack {
        /// Photo to make up (PNG).
        #[arg(long)]
        image: PathBuf,
        /// Landmarks of the photo (JSON).
        #[arg(long)]
        landmarks: PathBuf,
        /// Further photos of the attacker as `PHOTO.png:LANDMARKS.json`.
        /// The photo itself is used when none are given.
        #[arg(long = "positive")]
        positives: Vec<String>,
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Draws random palette makeup of at least a given intensity.
    RandomMakeup {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        landmarks: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        min_intensity: f64,
    },
    /// Simulates a participant's walk past the cameras and evaluates it.
    EvaluateStream {
        /// Participant id, e.g. P01.
        #[arg(long)]
        identity: String,
        /// Makeup plan (JSON) to wear during the walk.
        #[arg(long)]
        makeup: Option<PathBuf>,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        gallery: Option<PathBuf>,
        /// Also writes every frame of the walk as PNG.
        #[arg(long)]
        frames: bool,
    },
    /// Runs the full experiment.
    Experiment {
        /// Reuses trained models instead of training new ones.
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Checks whether aligned (made-up) crops are identified by the target.
    TransferCheck {
        /// Aligned crops (PNG), e.g. an attack's final.png.
        #[arg(long = "image", required = true)]
        images: Vec<PathBuf>,
        /// Identity the crops belong to.
        #[arg(long)]
        identity: String,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        gallery: Option<PathBuf>,
    },
    /// Serves the interactive studio API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        models: Option<PathBuf>,
    },
}

struct Env {
    config: ExperimentConfig,
    out: PathBuf,
    format: Format,
    verbose: bool,
}

impl Env {
    fn note(&self, msg: &str) {
        if self.verbose {
            eprintln!("{msg}");
        }
    }

    fn dir(&self, name: &str) -> Result<TrackedDir> {
        Ok(TrackedDir::create(&self.out.join(name))?)
    }

    fn models_dir(&self, given: &Option<PathBuf>) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join("models"))
    }

    fn gallery_dir(&self, given: &Option<PathBuf>) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join("gallery"))
    }

    fn table<T: Serialize>(&self, rows: &[T]) -> Result<String> {
        Ok(match self.format {
            Format::Json => serde_json::to_string_pretty(rows)?,
            Format::Csv => {
                let mut writer = csv::Writer::from_writer(Vec::new());
                for row in rows {
                    writer.serialize(row)?;
                }
                String::from_utf8(writer.into_inner()?)?
            }
        })
    }

    fn table_name(&self, stem: &str) -> String {
        match self.format {
            Format::Csv => format!("{stem}.csv"),
            Format::Json => format!("{stem}.json"),
        }
    }
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        config.reseed(s);
    }
    config.validate()?;
    Ok(config)
}

fn load_model(dir: &Path, stem: &str) -> Result<EmbeddingModel> {
    EmbeddingModel::load(dir, stem)
        .with_context(|| format!("loading {stem} model from {} (run `facedodge train` first)", dir.display()))
}

fn load_gallery(dir: &Path) -> Result<Gallery> {
    Gallery::load(dir).with_context(|| format!("loading gallery from {} (run `facedodge enroll` first)", dir.display()))
}

fn read_photo(image: &Path, landmarks: &Path) -> Result<(Image, FaceLandmarks)> {
    let img = Image::load_png(image).with_context(|| format!("reading {}", image.display()))?;
    let text = std::fs::read_to_string(landmarks).with_context(|| format!("reading {}", landmarks.display()))?;
    let lm: FaceLandmarks = serde_json::from_str(&text).with_context(|| format!("parsing {}", landmarks.display()))?;
    lm.validate(img.width(), img.height())?;
    Ok((img, lm))
}

fn aligned_photo(image: &Path, landmarks: &Path, size: (usize, usize)) -> Result<(Image, FaceLandmarks)> {
    let (img, lm) = read_photo(image, landmarks)?;
    Ok(align(&img, &lm, size.1, size.0)?)
}

fn participant<'a>(pop: &'a Population, id: &str) -> Result<&'a facedodge::harness::Person> {
    pop.participants
        .iter()
        .find(|p| p.id == id)
        .with_context(|| format!("unknown participant {id}"))
}

fn train(env: &Env) -> Result<()> {
    let pop = population(&env.config);
    env.note("training surrogate and target");
    let models = train_models(&env.config, &pop)?;
    let mut out = env.dir("models")?;
    models.surrogate.save(out.root(), "surrogate")?;
    models.target.save(out.root(), "target")?;
    for f in ["surrogate.fdw", "surrogate.json", "target.fdw", "target.json"] {
        out.track(f)?;
    }
    let summary = TrainingSummary {
        surrogate: models.surrogate_report.clone(),
        target: models.target_report.clone(),
    };
    out.write_json("training.json", &summary)?;
    out.finish(&env.config)?;
    Ok(())
}

fn enroll(env: &Env, models: &Option<PathBuf>) -> Result<()> {
    let target = load_model(&env.models_dir(models), "target")?;
    let pop = population(&env.config);
    let gallery = enroll_gallery(&env.config, &pop, &target)?;
    let out = env.dir("gallery")?;
    gallery.save(out.root())?;
    let mut out = out;
    for entry in std::fs::read_dir(out.root())? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name != "manifest.json" {
            out.track(&name)?;
        }
    }
    out.finish(&env.config)?;
    println!("enrolled {} identities", gallery.len());
    Ok(())
}

fn attack(env: &Env, image: &Path, landmarks: &Path, positives: &[String], models: &Option<PathBuf>) -> Result<()> {
    let surrogate = Arc::new(load_model(&env.models_dir(models), "surrogate")?);
    let size = surrogate.input_size();
    let (base, base_lm) = aligned_photo(image, landmarks, size)?;
    let mut xs = Vec::new();
    for spec in positives {
        let (img, lm) = spec
            .split_once(':')
            .with_context(|| format!("positive `{spec}` must be PHOTO.png:LANDMARKS.json"))?;
        xs.push(aligned_photo(Path::new(img), Path::new(lm), size)?.0);
    }
    if xs.is_empty() {
        xs.push(base.clone());
    }
    let pop = population(&env.config);
    let negatives = negative_photos(&env.config, &pop, size)?;
    let masks = region_masks(&base_lm, size.1, size.0)?;
    let seed = seeds::derive(env.config.seeds.attack, &image.to_string_lossy(), 0);
    let ctx = AttackContext::new(surrogate, base, xs, negatives, masks, env.config.palette.clone(), seed)?;
    env.note("running attack");
    let result = run_attack(&ctx, &env.config.attack)?;
    let mut out = env.dir("attack")?;
    result.write_artifacts(out.root())?;
    for entry in std::fs::read_dir(out.root())? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name != "manifest.json" {
            out.track(&name)?;
        }
    }
    out.finish(&env.config)?;
    println!(
        "{:?} after {} layers: distance {:.4} (threshold {}), intensity {:.4}",
        result.outcome,
        result.layers.len(),
        result.final_distance,
        result.threshold,
        result.intensity
    );
    Ok(())
}

fn random(env: &Env, image: &Path, landmarks: &Path, min_intensity: f64) -> Result<()> {
    let size = env.config.surrogate.input_size;
    let (base, lm) = aligned_photo(image, landmarks, size)?;
    let masks = region_masks(&lm, size.1, size.0)?;
    let seed = seeds::derive(env.config.seeds.attack, &format!("random/{}", image.to_string_lossy()), 0);
    let layers = random_makeup(
        &env.config.palette,
        &masks,
        seed,
        IntensityScore { value: min_intensity },
        &base,
        &env.config.random_makeup,
    )?;
    let made_up = composite(&base, &layers, &masks)?;
    let score = intensity(&made_up, &base)?;
    let mut plan = MakeupPlan::from_layers(layers);
    plan.intensity = Some(score.value);
    let mut out = env.dir("random")?;
    out.write_json("plan.json", &plan)?;
    out.write("made_up.png", &made_up.to_png()?)?;
    out.finish(&env.config)?;
    println!("{} layers, intensity {:.4}", plan.layers.len(), score.value);
    Ok(())
}

#[derive(Serialize)]
struct StreamRow {
    identity: String,
    camera: String,
    recognized: usize,
    unrecognized: usize,
    r_rec: String,
    alarm: bool,
}

fn stream_rows(ev: &StreamEvaluation, cameras: &[facedodge::synthface::CameraProfile]) -> Vec<StreamRow> {
    let mut rows: Vec<StreamRow> = camera_results(ev, cameras)
        .into_iter()
        .map(|(camera, c)| StreamRow {
            identity: ev.identity.clone(),
            camera,
            recognized: c.recognized,
            unrecognized: c.unrecognized,
            r_rec: format_rate(c.r_rec),
            alarm: c.alarm,
        })
        .collect();
    rows.push(StreamRow {
        identity: ev.identity.clone(),
        camera: "all".into(),
        recognized: ev.recognized,
        unrecognized: ev.unrecognized,
        r_rec: ev.formatted_rate(),
        alarm: ev.alarms.values().any(|a| *a),
    });
    rows
}

fn evaluate(
    env: &Env,
    identity: &str,
    makeup: &Option<PathBuf>,
    models: &Option<PathBuf>,
    gallery: &Option<PathBuf>,
    frames: bool,
) -> Result<()> {
    let target = load_model(&env.models_dir(models), "target")?;
    let gallery = load_gallery(&env.gallery_dir(gallery))?;
    let pop = population(&env.config);
    let person = participant(&pop, identity)?;
    let plan: Option<MakeupPlan> = match makeup {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let plan: MakeupPlan = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            env.config.palette.validate_plan(&plan.layers, env.config.attack.opacity_cap)?;
            Some(plan)
        }
        None => None,
    };
    let walk = participant_walk(&env.config, person, plan.as_ref().map(|p| p.layers.as_slice()))?;
    let pipeline = configured_pipeline(&env.config, target, gallery);
    let ev = evaluate_stream(&pipeline, &walk, identity)?;
    let rows = stream_rows(&ev, &env.config.cameras);
    let table = env.table(&rows)?;
    let mut out = env.dir("stream")?;
    out.write("log.csv", ev.log_csv()?.as_bytes())?;
    if frames {
        for f in &walk.frames {
            out.write(&format!("frames/{}_{:05}.png", f.camera_id, f.index), &f.image.to_png()?)?;
        }
    }
    out.write(&env.table_name("summary"), table.as_bytes())?;
    out.finish(&env.config)?;
    print!("{table}");
    Ok(())
}

fn experiment(env: &Env, models: &Option<PathBuf>) -> Result<()> {
    let pop = population(&env.config);
    let trained = match models {
        Some(dir) => {
            let surrogate = load_model(dir, "surrogate")?;
            let target = load_model(dir, "target")?;
            if surrogate.spec() != &env.config.surrogate || target.spec() != &env.config.target {
                bail!("models in {} were not built from this config", dir.display());
            }
            let untrained = facedodge::embedder::TrainReport {
                initial_loss: f64::NAN,
                loss_trace: Vec::new(),
            };
            Models {
                surrogate: Arc::new(surrogate),
                target: Arc::new(target),
                surrogate_report: untrained.clone(),
                target_report: untrained,
            }
        }
        None => {
            env.note("training surrogate and target");
            train_models(&env.config, &pop)?
        }
    };
    env.note("running attacks and stream evaluations");
    let output = run_experiment_with(&env.config, &pop, &trained)?;
    output.write(&env.config, &env.out.join("experiment"))?;
    let cams: Vec<String> = env.config.cameras.iter().map(|c| c.id.clone()).collect();
    match env.format {
        Format::Csv => print!("{}", output.report.participants_csv(&cams)?),
        Format::Json => println!("{}", serde_json::to_string_pretty(&output.report)?),
    }
    Ok(())
}

#[derive(Serialize)]
struct TransferRow {
    image: String,
    identity: String,
    dodged: bool,
}

fn transfer(env: &Env, images: &[PathBuf], identity: &str, models: &Option<PathBuf>, gallery: &Option<PathBuf>) -> Result<()> {
    let target = load_model(&env.models_dir(models), "target")?;
    let gallery = load_gallery(&env.gallery_dir(gallery))?;
    let loaded = images
        .iter()
        .map(|p| {
            Image::load_png(p)
                .with_context(|| format!("reading {}", p.display()))
                .map(|img| (identity.to_string(), img))
        })
        .collect::<Result<Vec<_>>>()?;
    let flags = digital_transfer_check(&loaded, &target, &gallery, env.config.identification_threshold)?;
    let rows: Vec<TransferRow> = images
        .iter()
        .zip(flags)
        .map(|(p, dodged)| TransferRow {
            image: p.display().to_string(),
            identity: identity.to_string(),
            dodged,
        })
        .collect();
    let table = env.table(&rows)?;
    let mut out = env.dir("transfer")?;
    out.write(&env.table_name("transfer"), table.as_bytes())?;
    out.finish(&env.config)?;
    print!("{table}");
    Ok(())
}

fn serve(env: &Env, host: &str, port: u16, models: &Option<PathBuf>) -> Result<()> {
    let surrogate = Arc::new(load_model(&env.models_dir(models), "surrogate")?);
    let studio = Arc::new(Studio::new(env.config.clone(), surrogate)?);
    let addr: SocketAddr = format!("{host}:{port}").parse().context("invalid host or port")?;
    let mut out = env.dir("serve")?;
    out.write_json("server.json", &BTreeMap::from([("address", addr.to_string())]))?;
    out.finish(&env.config)?;
    eprintln!("studio listening on http://{addr}");
    tokio::runtime::Runtime::new()?.block_on(facedodge_studio::serve(studio, addr))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    let env = Env {
        config: load_config(&cli.config, cli.seed)?,
        out: cli.out,
        format: cli.format,
        verbose: cli.verbose,
    };
    match &cli.command {
        Command::Train => train(&env),
        Command::Enroll { models } => enroll(&env, models),
        Command::Attack {
            image,
            landmarks,
            positives,
            models,
        } => attack(&env, image, landmarks, positives, models),
        Command::RandomMakeup {
            image,
            landmarks,
            min_intensity,
        } => random(&env, image, landmarks, *min_intensity),
        Command::EvaluateStream {
            identity,
            makeup,
            models,
            gallery,
            frames,
        } => evaluate(&env, identity, makeup, models, gallery, *frames),
        Command::Experiment { models } => experiment(&env, models),
        Command::TransferCheck {
            images,
            identity,
            models,
            gallery,
        } => transfer(&env, images, identity, models, gallery),
        Command::Serve { port, host, models } => serve(&env, host, *port, models),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
