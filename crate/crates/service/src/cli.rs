use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use haptex_core::align;
use haptex_core::corpus::{self, Corpus};
use haptex_core::eval::{self, EvalReport, KMEANS_RESTARTS, KMEANS_SEED};
use haptex_core::render::{run_trajectory, ServoSim, TrajectoryScript};
use haptex_core::synth;
use haptex_core::vae::{self, CheckpointMeta, TrainConfig, VaeDims};
use serde::Deserialize;
use serde_json::json;

use crate::bundle::{self, Bundle, Texture, EXTRA_ANCHORS, EXTRA_INDEX};
use crate::error::ServiceError;
use crate::server::{self, ServeConfig};
use crate::session::{DeviceState, Session};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.json";

#[derive(Debug, Parser)]
#[command(name = "haptex", version, about = "Haptic texture corpus, training, rendering and service")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic material corpus with caption embeddings
    GenCorpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        materials: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write an augmented training corpus
    Augment {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 20)]
        augments: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the model and write a checkpoint plus per-epoch metrics
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// caption embeddings; defaults to embeddings.json inside the corpus
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// JSON with optional "train" and "dims" objects
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// augment in memory before training (0 trains on the corpus as given)
        #[arg(long, default_value_t = 0)]
        augments: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render vibration for held (force, speed) states to a WAV file
    Synth {
        #[command(flatten)]
        source: TextureSource,
        /// "force_N,speed_mm_s", one per segment
        #[arg(long = "fv", required = true, value_parser = parse_fv)]
        fv: Vec<(f64, f64)>,
        /// length of each segment
        #[arg(long, default_value_t = 1.0)]
        seconds: f64,
        /// impact speed in mm/s at the start of each segment
        #[arg(long)]
        tap: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        render_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the servo loop over a trajectory script
    Simulate {
        #[command(flatten)]
        source: TextureSource,
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        render_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clustering, retrieval and rating projections for a checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// labelled corpus to embed, usually the augmented training corpus
        #[arg(long)]
        corpus: PathBuf,
        /// materials for caption retrieval; defaults to --corpus
        #[arg(long)]
        source_corpus: Option<PathBuf>,
        /// caption embeddings; retrieval is skipped without them
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// CSV with attribute,a,b,x columns
        #[arg(long)]
        ratings: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Latent for a prompt from the embedding file
    EncodeText {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP and WebSocket API
    Serve {
        #[arg(long, env = "HAPTEX_ADDR", default_value = "127.0.0.1:8731")]
        addr: String,
        #[arg(long, env = "HAPTEX_CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long, env = "HAPTEX_CORPUS")]
        corpus: PathBuf,
        #[arg(long, env = "HAPTEX_EMBEDDINGS")]
        embeddings: PathBuf,
        #[arg(long, env = "HAPTEX_RENDER_CONFIG")]
        render_config: Option<PathBuf>,
    },
}

/// Texture from a corpus material or from a decoded latent.
#[derive(Debug, Args)]
pub struct TextureSource {
    #[arg(long, requires = "corpus", conflicts_with = "latent")]
    material: Option<String>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// JSON latent: a bare array or an object with "z"
    #[arg(long, requires = "checkpoint", required_unless_present = "material")]
    latent: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn parse_fv(s: &str) -> Result<(f64, f64), String> {
    let (f, v) = s.split_once(',').ok_or("expected force,speed")?;
    let f: f64 = f.trim().parse().map_err(|e| format!("force: {e}"))?;
    let v: f64 = v.trim().parse().map_err(|e| format!("speed: {e}"))?;
    if !(f.is_finite() && v.is_finite() && f >= 0.0 && v >= 0.0) {
        return Err("force and speed must be finite and >= 0".into());
    }
    Ok((f, v))
}

/// Parse arguments, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> Result<(), ServiceError> {
    match cmd {
        Command::GenCorpus { seed, materials, out } => gen_corpus(seed, materials, &out),
        Command::Augment { corpus, augments, seed, out } => augment(&corpus, augments, seed, &out),
        Command::Train { corpus, embeddings, config, epochs, seed, augments, out } => {
            train(&corpus, embeddings.as_deref(), config.as_deref(), epochs, seed, augments, &out)
        }
        Command::Synth { source, fv, seconds, tap, seed, render_config, out } => {
            synth_cmd(&source, &fv, seconds, tap, seed, render_config.as_deref(), &out)
        }
        Command::Simulate { source, script, seed, render_config, out } => simulate(&source, &script, seed, render_config.as_deref(), &out),
        Command::Eval { checkpoint, corpus, source_corpus, embeddings, ratings, out } => {
            eval_cmd(&checkpoint, &corpus, source_corpus.as_deref(), embeddings.as_deref(), ratings.as_deref(), &out)
        }
        Command::EncodeText { prompt, embeddings, checkpoint, out } => encode_text(&prompt, &embeddings, &checkpoint, out.as_deref()),
        Command::Serve { addr, checkpoint, corpus, embeddings, render_config } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::serve(ServeConfig { addr, checkpoint, corpus, embeddings, render_config }))
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, ServiceError> {
    File::create(path).map(BufWriter::new).map_err(|e| ServiceError::Io(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), ServiceError> {
    fs::create_dir_all(path).map_err(|e| ServiceError::Io(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, ServiceError> {
    fs::read_to_string(path).map_err(|e| ServiceError::Io(format!("{}: {e}", path.display())))
}

fn gen_corpus(seed: u64, materials: usize, out: &Path) -> Result<(), ServiceError> {
    let c = corpus::generate_synthetic_corpus(seed, materials);
    corpus::save_corpus(&c, out)?;
    let table = corpus::embeddings_for(&c);
    corpus::save_embeddings(&table, &out.join(EMBEDDINGS_FILE))?;
    println!("wrote {} materials and {} caption embeddings to {}", c.len(), table.len(), out.display());
    Ok(())
}

fn augment(dir: &Path, augments: usize, seed: u64, out: &Path) -> Result<(), ServiceError> {
    let source = corpus::load_corpus(dir)?;
    let aug = corpus::build_training_pairs(&source, augments, seed);
    corpus::save_corpus(&aug.corpus, out)?;
    // captions are unchanged, so the embeddings carry over
    let emb = dir.join(EMBEDDINGS_FILE);
    if emb.exists() {
        fs::copy(&emb, out.join(EMBEDDINGS_FILE))?;
    }
    println!(
        "wrote {} records from {} materials to {} ({} bins borrowed from neighbours)",
        aug.corpus.len(),
        source.len(),
        out.display(),
        aug.fallbacks.len()
    );
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    train: TrainConfig,
    dims: VaeDims,
}

fn train(
    dir: &Path,
    embeddings: Option<&Path>,
    config: Option<&Path>,
    epochs: Option<usize>,
    seed: Option<u64>,
    augments: usize,
    out: &Path,
) -> Result<(), ServiceError> {
    let mut file: TrainFile = match config {
        Some(p) => serde_json::from_str(&read_text(p)?)?,
        None => TrainFile::default(),
    };
    if let Some(e) = epochs {
        file.train.epochs = e;
    }
    if let Some(s) = seed {
        file.train.seed = s;
    }
    file.train.validate()?;
    file.dims.validate()?;
    let source = corpus::load_corpus(dir)?;
    if source.is_empty() {
        return Err(ServiceError::Corpus("corpus is empty".into()));
    }
    let training = if augments > 0 { corpus::build_training_pairs(&source, augments, file.train.seed).corpus } else { source };
    let table = corpus::load_embeddings(&embeddings.map(Path::to_path_buf).unwrap_or_else(|| dir.join(EMBEDDINGS_FILE)))?;
    create_dir(out)?;

    let started = Instant::now();
    let total = file.train.epochs;
    let (mut model, stats, log) = align::train_on_corpus::<f32>(&training, &table, file.dims, &file.train, |m| {
        if m.epoch == 1 || m.epoch % 10 == 0 || m.epoch == total {
            eprintln!("epoch {:>4}  rec {:.5}  kl {:.4}  nce {:.4}  align {:.4}", m.epoch, m.rec, m.kl, m.infonce, m.align);
        }
    })?;
    let anchors = align::build_anchor_set(&mut model, &training, &stats)?;
    let (index, _) = align::source_means(&mut model, &training, &stats)?;
    let mut meta = CheckpointMeta { dims: model.dims.clone(), train: Some(file.train.clone()), norm_stats: Some(stats), extra: Default::default() };
    meta.extra.insert(EXTRA_ANCHORS.into(), serde_json::to_value(&anchors)?);
    meta.extra.insert(EXTRA_INDEX.into(), serde_json::to_value(&index)?);
    vae::save_checkpoint(&out.join(CHECKPOINT_FILE), &mut model, &meta)?;
    vae::write_metrics_csv(&log, create(&out.join(METRICS_FILE))?)?;

    let (first, last) = (log.first().map_or(0.0, |m| m.rec), log.last().map_or(0.0, |m| m.rec));
    println!(
        "trained {} parameters on {} records for {} epochs in {:.1} s; reconstruction {:.5} -> {:.5}; wrote {}",
        model.param_count(),
        training.len(),
        log.len(),
        started.elapsed().as_secs_f64(),
        first,
        last,
        out.display()
    );
    Ok(())
}

fn load_texture(source: &TextureSource, render: &haptex_core::render::RenderConfig<f64>) -> Result<Texture, ServiceError> {
    match (&source.material, &source.latent) {
        (Some(id), _) => {
            let dir = source.corpus.as_deref().ok_or_else(|| ServiceError::Usage("--material needs --corpus".into()))?;
            let c: Corpus = corpus::load_corpus(dir)?;
            bundle::find_material(&c, id).map(Texture::from_material).ok_or_else(|| ServiceError::Corpus(format!("unknown material {id:?}")))
        }
        (None, Some(path)) => {
            let ckpt = source.checkpoint.as_deref().ok_or_else(|| ServiceError::Usage("--latent needs --checkpoint".into()))?;
            let z = bundle::parse_latent(&read_text(path)?)?;
            let mut b = Bundle::load(ckpt)?;
            let z = b.check_latent(&z)?;
            b.decode(&z, render)
        }
        (None, None) => Err(ServiceError::Usage("give --material or --latent".into())),
    }
}

fn synth_cmd(
    source: &TextureSource,
    fv: &[(f64, f64)],
    seconds: f64,
    tap: Option<f64>,
    seed: u64,
    render_config: Option<&Path>,
    out: &Path,
) -> Result<(), ServiceError> {
    if !seconds.is_finite() || seconds < 0.0 {
        return Err(ServiceError::Usage("--seconds must be finite and >= 0".into()));
    }
    if tap.is_some_and(|t| !t.is_finite() || t < 0.0) {
        return Err(ServiceError::Usage("--tap must be finite and >= 0".into()));
    }
    let render = bundle::load_render_config(render_config)?;
    let texture = load_texture(source, &render)?;
    let mut session = Session::new(texture.render_model()?, render, seed)?;
    let ticks = (seconds * render.servo_rate as f64).round() as usize;
    let schedule: Vec<(DeviceState, usize)> = fv.iter().map(|&(f, v)| (DeviceState { tap, ..DeviceState::new(f, v) }, ticks)).collect();
    let samples = session.render(&schedule);
    synth::write_wav(out, &samples, render.signal_rate)?;
    let rms = (samples.iter().map(|&s| s.powi(2)).sum::<f64>() / samples.len().max(1) as f64).sqrt();
    println!("wrote {} samples at {} Hz to {} (rms {:.4e}, mu {:.4})", samples.len(), render.signal_rate, out.display(), rms, texture.mu);
    Ok(())
}

fn simulate(source: &TextureSource, script: &Path, seed: u64, render_config: Option<&Path>, out: &Path) -> Result<(), ServiceError> {
    let script = TrajectoryScript::from_json(&read_text(script)?)?;
    script.validate()?;
    let render = bundle::load_render_config(render_config)?;
    let texture = load_texture(source, &render)?;
    let mut sim = ServoSim::new(texture.render_model()?, render, seed)?;
    let log = run_trajectory(&script, &mut sim)?;
    create_dir(out)?;
    log.write_csv(create(&out.join("log.csv"))?)?;
    log.write_wav(&out.join("vibration.wav"))?;
    let summary = json!({
        "ticks": log.rows.len(),
        "samples": log.vibration.len(),
        "signal_rate": log.signal_rate,
        "mu": texture.mu,
        "mean_compute_us": log.mean_compute_us(),
        "p99_compute_us": log.percentile_compute_us(99.0),
    });
    serde_json::to_writer_pretty(create(&out.join("summary.json"))?, &summary)?;
    println!(
        "simulated {} ticks; tick compute mean {:.1} us, p99 {:.1} us; wrote {}",
        log.rows.len(),
        log.mean_compute_us(),
        log.percentile_compute_us(99.0),
        out.display()
    );
    Ok(())
}

fn eval_cmd(
    checkpoint: &Path,
    dir: &Path,
    source_dir: Option<&Path>,
    embeddings: Option<&Path>,
    ratings: Option<&Path>,
    out: &Path,
) -> Result<(), ServiceError> {
    let mut b = Bundle::load(checkpoint)?;
    let c = corpus::load_corpus(dir)?;
    if c.is_empty() {
        return Err(ServiceError::Corpus("corpus is empty".into()));
    }
    let mu = align::posterior_means(&mut b.model, &c, &b.stats)?;
    let labels: Vec<usize> = c.materials.iter().map(|m| m.class_label as usize).collect();
    let clustering = eval::clustering_metrics(&mu, &labels, KMEANS_SEED)?;
    let coords = eval::pca_2d(&mu)?;
    create_dir(out)?;
    let ids: Vec<String> = c.materials.iter().map(|m| m.id.clone()).collect();
    eval::write_pca_csv(&ids, &labels, &coords, create(&out.join("pca.csv"))?)?;

    let retrieval_rate = match embeddings {
        Some(p) => {
            let table = corpus::load_embeddings(p)?;
            let source = match source_dir {
                Some(d) => corpus::load_corpus(d)?,
                None => c.clone(),
            };
            let r = align::caption_retrieval(&mut b.model, &source, &b.stats, &table)?;
            println!("caption retrieval {}/{}", r.hits, r.total);
            Some(r.rate())
        }
        None => None,
    };
    let inside_rates = match ratings {
        Some(p) => {
            let records = eval::read_records(File::open(p).map_err(|e| ServiceError::Io(format!("{}: {e}", p.display())))?)?;
            eval::write_records(&records, create(&out.join("projections.csv"))?)?;
            eval::inside_rate(&records)?
        }
        None => Default::default(),
    };
    let report = EvalReport {
        n_points: c.len(),
        n_classes: c.class_count(),
        kmeans_seed: KMEANS_SEED,
        kmeans_restarts: KMEANS_RESTARTS,
        clustering,
        inside_rates,
        retrieval_rate,
    };
    report.write_json(create(&out.join("report.json"))?)?;
    let m = &report.clustering;
    println!(
        "silhouette {:.3}  CH {:.1}  DB {:.3}  ARI {:.3}  NMI {:.3}; wrote {}",
        m.silhouette,
        m.calinski_harabasz,
        m.davies_bouldin,
        m.adjusted_rand,
        m.nmi,
        out.display()
    );
    Ok(())
}

fn encode_text(prompt: &str, embeddings: &Path, checkpoint: &Path, out: Option<&Path>) -> Result<(), ServiceError> {
    let table = corpus::load_embeddings(embeddings)?;
    let e = table.get(prompt).ok_or_else(|| ServiceError::EmbeddingNotFound(prompt.to_string()))?;
    let mut b = Bundle::load(checkpoint)?;
    let z = align::text_to_latent(Some(&mut b.model), e)?;
    let doc = json!({ "prompt": prompt, "z": z });
    if let Some(p) = out {
        serde_json::to_writer_pretty(create(p)?, &doc)?;
    }
    println!("{doc}");
    Ok(())
}
