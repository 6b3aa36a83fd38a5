//! `panolabel`: operator entry point. Results go to stdout, logs to
//! stderr. Exit status is 0 on success, 1 when the work itself fails and
//! 2 for a bad command line or configuration.

mod stats;

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use panolabel_core::annotation::{GateDecision, Status, VideoAnnotation};
use panolabel_core::metrics::{format_table, j_and_f};
use panolabel_core::pipeline::ingest::raster_path;
use panolabel_core::pipeline::{annotate_video, export_review, import_revisions, ingest_video, AnnotateOptions, Config, Engine};
use panolabel_core::store::Store;
use panolabel_service::ServiceConfig;

#[derive(Debug, Parser)]
#[command(name = "panolabel", version, about = "Automatic annotation of equirectangular 360-degree video")]
struct Cli {
    /// Annotation store root.
    #[arg(long, global = true, default_value = "store")]
    store: PathBuf,
    /// Configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set pipeline.rho=0.99`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only errors on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Admit source videos into the store.
    Ingest {
        #[arg(required = true)]
        sources: Vec<PathBuf>,
        /// Video id; defaults to the source directory name. Only with one source.
        #[arg(long)]
        id: Option<String>,
    },
    /// Ingest (when needed) and annotate source videos.
    Annotate {
        #[arg(required = true)]
        sources: Vec<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run or resume annotation of videos already in the store.
    Refine {
        #[arg(required = true)]
        videos: Vec<String>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Human review: serve the review API, or exchange bundles offline.
    #[command(subcommand)]
    Review(Review),
    /// Score a predicted store against a reference store.
    Metrics {
        pred: PathBuf,
        reference: PathBuf,
        /// Boundary tolerance in pixels; defaults to 0.8% of the diagonal.
        #[arg(long)]
        radius: Option<u32>,
        /// Print full precision instead of three decimals.
        #[arg(long)]
        exact: bool,
    },
    /// Check store invariants for some or all videos.
    Validate { videos: Vec<String> },
    /// Instance, label and coverage distributions.
    Stats { videos: Vec<String> },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Videos annotated in parallel.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: u16,
    /// Stop each video after this many frames (resume later).
    #[arg(long)]
    halt_after: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Review {
    /// Serve the review API (token from PANOLABEL_TOKEN).
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        /// Built review UI to serve at `/`.
        #[arg(long)]
        ui: Option<PathBuf>,
    },
    /// Write a review bundle for a refined video.
    Export { video: String, out: PathBuf },
    /// Apply a revision log (or a bundle holding one) and finalize.
    Import { video: String, log: PathBuf },
}

/// A bad command line or configuration: exit status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            eprintln!("run `panolabel --help` for usage");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest { sources, id } => {
            if id.is_some() && sources.len() > 1 {
                return Err(usage("--id needs exactly one source"));
            }
            let cfg = config(cli)?;
            let store = open_store(&cli.store)?;
            for src in sources {
                let vid = match id {
                    Some(id) => id.clone(),
                    None => video_id(src)?,
                };
                let out = ingest_video(&store, src, &vid, &cfg.ingest).with_context(|| format!("ingesting {}", src.display()))?;
                let cut = if out.truncated() { format!(" (cut from {})", out.source_frames) } else { String::new() };
                println!("ingested {vid}: {} frames{cut}", out.manifest.frame_count);
            }
            Ok(())
        }
        Command::Annotate { sources, run } => {
            let cfg = config(cli)?;
            let store = open_store(&cli.store)?;
            let mut ids = Vec::new();
            for src in sources {
                let vid = video_id(src)?;
                if !ids.contains(&vid) && !store.video_dir(&vid).join("manifest").is_file() {
                    ingest_video(&store, src, &vid, &cfg.ingest).with_context(|| format!("ingesting {}", src.display()))?;
                    log::info!("ingested {vid}");
                }
                ids.push(vid);
            }
            annotate_all(&store, &cfg, &ids, run)
        }
        Command::Refine { videos, run } => {
            let cfg = config(cli)?;
            let store = open_store(&cli.store)?;
            annotate_all(&store, &cfg, videos, run)
        }
        Command::Review(Review::Serve { listen, ui }) => {
            let mut cfg = ServiceConfig::new(&cli.store).with_env_token();
            cfg.ui_dir = ui.clone();
            let addr = panolabel_service::spawn(*listen, cfg).with_context(|| format!("listening on {listen}"))?;
            println!("review service on http://{addr}");
            loop {
                std::thread::park();
            }
        }
        Command::Review(Review::Export { video, out }) => {
            let store = open_store(&cli.store)?;
            let dir = export_review(&store, video, out)?;
            println!("exported {video} to {}", dir.display());
            Ok(())
        }
        Command::Review(Review::Import { video, log }) => {
            let store = open_store(&cli.store)?;
            let v = import_revisions(&store, video, log)?;
            println!("imported revisions into {video}: status {}", v.status.as_str());
            Ok(())
        }
        Command::Metrics { pred, reference, radius, exact } => {
            let p = open_store(pred)?;
            let r = open_store(reference)?;
            let ids = r.list_videos()?;
            if ids.is_empty() {
                bail!("reference store {} holds no videos", reference.display());
            }
            let mut rows = Vec::new();
            for id in ids {
                let ref_v = r.load_current(&id).with_context(|| format!("reference {id}"))?;
                let pred_v = p.load_current(&id).with_context(|| format!("prediction {id}"))?;
                rows.push((id.clone(), j_and_f(&pred_v, &ref_v, *radius).with_context(|| id.clone())?));
            }
            print!("{}", format_table(&rows, (!exact).then_some(3)));
            Ok(())
        }
        Command::Validate { videos } => {
            let store = open_store(&cli.store)?;
            let ids = select(&store, videos)?;
            let mut bad = 0;
            for id in &ids {
                match validate(&store, id) {
                    Ok(v) => println!("ok {id}: {} frames, {} instances, {}", v.frames.len(), v.instances.len(), v.status.as_str()),
                    Err(e) => {
                        bad += 1;
                        println!("invalid {id}: {e:#}");
                    }
                }
            }
            if bad > 0 {
                bail!("{bad} of {} videos failed validation", ids.len());
            }
            Ok(())
        }
        Command::Stats { videos } => {
            let store = open_store(&cli.store)?;
            let ids = select(&store, videos)?;
            let loaded = ids.iter().map(|id| store.load_current(id).with_context(|| id.clone())).collect::<Result<Vec<_>>>()?;
            print!("{}", stats::render(&loaded)?);
            Ok(())
        }
    }
}

fn config(cli: &Cli) -> Result<Config> {
    let path = cli.config.as_ref().ok_or_else(|| usage("this command needs --config"))?;
    Config::load(path, &cli.overrides).map_err(usage)
}

fn open_store(root: &Path) -> Result<Store> {
    Store::open(root).with_context(|| format!("opening store {}", root.display()))
}

fn video_id(src: &Path) -> Result<String> {
    let name = src.canonicalize().ok().and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()));
    name.ok_or_else(|| anyhow!("{}: cannot name a video after this path", src.display()))
}

/// The named videos, or every video in the store.
fn select(store: &Store, videos: &[String]) -> Result<Vec<String>> {
    if videos.is_empty() {
        return Ok(store.list_videos()?);
    }
    let unique: BTreeSet<&String> = videos.iter().collect();
    if unique.len() != videos.len() {
        return Err(usage("a video is named twice"));
    }
    Ok(videos.to_vec())
}

/// Everything a reader relies on: parseable files, frame invariants, a
/// replayable revision log and a raster per frame.
fn validate(store: &Store, id: &str) -> Result<VideoAnnotation> {
    let m = store.manifest(id)?;
    let v = store.load_current(id)?;
    if v.status != Status::Initial && m.progress != m.frame_count {
        bail!("status {} but only {} of {} frames done", v.status.as_str(), m.progress, m.frame_count);
    }
    for i in 0..m.frame_count {
        let p = raster_path(store, &m, i);
        if !p.is_file() {
            bail!("missing raster {}", p.display());
        }
    }
    store.digest(id)?;
    Ok(v)
}

/// Annotates `ids` with up to `jobs` videos in flight, one worker per
/// video. Summaries print in argument order whatever the finishing order.
fn annotate_all(store: &Store, cfg: &Config, ids: &[String], args: &RunArgs) -> Result<()> {
    let opts = AnnotateOptions { halt_after: args.halt_after };
    let next = Mutex::new(0usize);
    let results: Vec<Mutex<Option<Result<String>>>> = ids.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..usize::from(args.jobs).min(ids.len()) {
            s.spawn(|| {
                let engine = Engine::from_config(cfg);
                loop {
                    let i = {
                        let mut n = next.lock().unwrap();
                        *n += 1;
                        *n - 1
                    };
                    let Some(id) = ids.get(i) else { break };
                    let out = match &engine {
                        Ok(e) => annotate_one(store, e, id, opts),
                        Err(e) => Err(anyhow!("{e}")),
                    };
                    *results[i].lock().unwrap() = Some(out);
                }
            });
        }
    });
    let mut failed = 0;
    for (id, r) in ids.iter().zip(results) {
        match r.into_inner().unwrap().expect("every video is visited") {
            Ok(line) => println!("{line}"),
            Err(e) => {
                failed += 1;
                eprintln!("error: {id}: {e:#}");
            }
        }
    }
    if failed > 0 {
        bail!("{failed} of {} videos failed", ids.len());
    }
    Ok(())
}

fn annotate_one(store: &Store, engine: &Engine, id: &str, opts: AnnotateOptions) -> Result<String> {
    log::info!("annotating {id}");
    let v = annotate_video(store, engine, id, opts)?;
    let refined: Vec<String> = v
        .phase_log
        .values()
        .filter(|p| p.gate == GateDecision::Refine)
        .map(|p| p.frame_index.to_string())
        .collect();
    let refined = if refined.is_empty() { "none".to_string() } else { refined.join(",") };
    Ok(format!(
        "{id}: {} frames, {} instances, refined frames {refined}, status {}, digest {}",
        v.frames.len(),
        v.instances.len(),
        v.status.as_str(),
        store.digest(id)?
    ))
}
