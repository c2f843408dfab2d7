//! `aiv` command-line entry point.

use std::path::{Path, PathBuf};
use std::time::Instant;

use aiv_app::server::{self, AppState};
use aiv_app::session::{self, CountMode, CreateSession, SessionDir, SessionState, StateRecord};
use aiv_core::cache::{config_hash, replay, CacheReader, Pacing, VideoIdentity};
use aiv_core::counting::{CountMethod, Counter, ZoneConfig};
use aiv_core::detect::{AdapterSpec, DetectorConfig};
use aiv_core::pipeline::Progress;
use aiv_core::tracking::TrackerParams;
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use tracing::info;

#[derive(Parser)]
#[command(name = "aiv", version, about = "Vehicle tracking and counting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track a detection stream and write a new session directory.
    Run {
        /// Detection stream (`.jsonl`).
        #[arg(long, conflicts_with = "adapter")]
        dets: Option<PathBuf>,
        /// Inference adapter program, used instead of `--dets`.
        #[arg(long, requires = "model")]
        adapter: Option<PathBuf>,
        /// Model artifact handed to the adapter.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Tracker parameters (JSON); defaults apply to missing keys.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Detector configuration (JSON).
        #[arg(long)]
        detector: Option<PathBuf>,
        /// Session directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Directory of frame images.
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Counting zones; when given, counts are computed during the run.
        #[arg(long)]
        zones: Option<PathBuf>,
        /// Register vehicle templates (needs `--frames`).
        #[arg(long)]
        gallery: bool,
        /// Sleep this long per frame to stand in for model inference.
        #[arg(long, default_value_t = 0)]
        simulate_ms: u64,
        #[arg(long)]
        frame_count: Option<u32>,
        #[arg(long)]
        width: Option<u32>,
        #[arg(long)]
        height: Option<u32>,
        #[arg(long)]
        fps: Option<f64>,
    },
    /// Count vehicles in a session.
    Count {
        #[arg(long)]
        session: PathBuf,
        /// Zone configuration (JSON); stored as the session's zones.
        #[arg(long)]
        zone: PathBuf,
        /// Count from the cache instead of re-running the tracker.
        #[arg(long)]
        quick: bool,
        /// Restrict to one method: finish_line or motion_vector.
        #[arg(long, value_parser = parse_method)]
        method: Option<CountMethod>,
    },
    /// Score a session's cache against ground truth.
    Eval {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Print a text table instead of JSON.
        #[arg(long)]
        table: bool,
    },
    /// Replay a session's cache.
    Replay {
        #[arg(long)]
        session: PathBuf,
        /// Playback rate; 0 replays as fast as possible.
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
    },
    /// Print the configuration hash that keys caches.
    HashConfig {
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        detector: Option<PathBuf>,
    },
    /// Start the HTTP service.
    Serve {
        /// Session root; defaults to `AIV_DATA_DIR` or `./aiv-data`.
        #[arg(long, env = "AIV_DATA_DIR", default_value = "aiv-data")]
        data_dir: PathBuf,
        #[arg(long, env = "AIV_BIND", default_value = "127.0.0.1:7070")]
        bind: String,
    },
}

fn parse_method(s: &str) -> Result<CountMethod, String> {
    CountMethod::from_str_opt(s).ok_or_else(|| format!("unknown method {s:?}; use finish_line or motion_vector"))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn read_opt<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn log_progress() -> impl FnMut(Progress) -> bool {
    move |p: Progress| {
        let done = p.frame + 1;
        if done.is_multiple_of(server::PROGRESS_EVERY_FRAMES) || done == p.frames_total {
            info!(frame = done, total = p.frames_total, fps = format!("{:.1}", p.fps), "progress");
        }
        true
    }
}

fn open_session(dir: &Path) -> Result<SessionDir> {
    let dir = SessionDir::new(dir);
    if !dir.exists() {
        bail!("{} is not a session directory", dir.root().display());
    }
    Ok(dir)
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    dets: Option<PathBuf>,
    adapter: Option<PathBuf>,
    model: Option<PathBuf>,
    params: Option<PathBuf>,
    detector: Option<PathBuf>,
    out: PathBuf,
    frames: Option<PathBuf>,
    zones: Option<PathBuf>,
    gallery: bool,
    simulate_ms: u64,
    frame_count: Option<u32>,
    width: Option<u32>,
    height: Option<u32>,
    fps: Option<f64>,
) -> Result<()> {
    let dir = SessionDir::new(&out);
    if dir.exists() {
        bail!("{} already holds a session", out.display());
    }
    let req = CreateSession {
        detections: dets,
        adapter: adapter.map(|program| AdapterSpec { program, args: Vec::new(), model: model.unwrap_or_default() }),
        frames,
        frame_count,
        width,
        height,
        fps,
        tracker: read_opt::<TrackerParams>(params.as_deref())?,
        detector: read_opt::<DetectorConfig>(detector.as_deref())?,
        gallery,
        simulated_latency_ms: simulate_ms,
    };
    let zones: Option<ZoneConfig> = zones.as_deref().map(read_json).transpose()?;
    let session_id = out.file_name().map_or_else(|| "session".to_string(), |n| n.to_string_lossy().into_owned());
    let config = session::create_session(&dir, &session_id, &req)?;
    if let Some(z) = &zones {
        z.validate()?;
        dir.save_zones(z)?;
    }
    dir.save_state(&StateRecord { state: SessionState::Running, message: None, progress: None })?;
    let started = Instant::now();
    let result = session::run_pipeline(&dir, &config, zones.as_ref(), &mut log_progress());
    let out = match result {
        Ok(out) => out,
        Err(e) => {
            dir.save_state(&StateRecord { state: SessionState::Failed, message: Some(e.to_string()), progress: None })?;
            return Err(e.into());
        }
    };
    let elapsed = started.elapsed().as_secs_f64();
    let mut state = SessionState::Cached;
    let mut count_run = None;
    if let (Some(z), Some(counts)) = (&zones, out.counts) {
        count_run = Some(dir.save_count_run(CountMode::Full, z, counts)?);
        state = SessionState::Done;
    }
    dir.save_state(&StateRecord { state, message: None, progress: None })?;
    print_json(&serde_json::json!({
        "session": dir.root(),
        "frames": out.frames.len(),
        "cache_bytes": out.cache_bytes,
        "elapsed_s": elapsed,
        "fps": out.frames.len() as f64 / elapsed.max(1e-9),
        "templates_registered": out.templates_registered,
        "count": count_run,
    }))
}

fn cmd_count(session: &Path, zone: &Path, quick: bool, method: Option<CountMethod>) -> Result<()> {
    let dir = open_session(session)?;
    let config = dir.config()?;
    let zones: ZoneConfig = read_json(zone)?;
    zones.validate()?;
    dir.save_zones(&zones)?;
    let mode = if quick { CountMode::Quick } else { CountMode::Full };
    let run = session::count(&dir, &config, &zones, method, mode, &mut log_progress())?;
    dir.save_state(&StateRecord { state: SessionState::Done, message: None, progress: None })?;
    print_json(&run)
}

fn cmd_eval(session: &Path, gt: &Path, table: bool) -> Result<()> {
    let dir = open_session(session)?;
    let report = session::eval(&dir, gt)?;
    if table {
        print!("{}", report.to_table());
        Ok(())
    } else {
        print_json(&report)
    }
}

fn cmd_replay(session: &Path, fps: f64) -> Result<()> {
    let dir = open_session(session)?;
    let config = dir.config()?;
    let reader = CacheReader::open(dir.cache_path())?;
    reader.header().check_config(&config.config_hash())?;
    if let Some(anchor) = config.frames.as_deref().or(config.mask_anchor()) {
        if let Ok(current) = VideoIdentity::of_path(anchor) {
            if let Some(msg) = reader.header().check_video(&current) {
                tracing::warn!("{msg}");
            }
        }
    }
    let zones = dir.zones()?;
    let mut counter = (!zones.is_empty()).then(|| Counter::new(&zones)).transpose()?;
    let mut tracks_seen = 0usize;
    let mut sink = |rec: &aiv_core::cache::CacheRecord| -> Result<(), String> {
        tracks_seen += rec.tracks.len();
        if let Some(c) = counter.as_mut() {
            c.update(rec.frame, &rec.tracks);
        }
        Ok(())
    };
    let pacing = if fps > 0.0 { Pacing::RealTime(fps) } else { Pacing::AsFast };
    let stats = replay(reader, &mut [&mut sink], pacing)?;
    print_json(&serde_json::json!({
        "frames": stats.frames,
        "elapsed_s": stats.elapsed.as_secs_f64(),
        "fps": stats.fps(),
        "track_boxes": tracks_seen,
        "counts": counter.map(Counter::finish),
    }))
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("AIV_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Run {
            dets,
            adapter,
            model,
            params,
            detector,
            out,
            frames,
            zones,
            gallery,
            simulate_ms,
            frame_count,
            width,
            height,
            fps,
        } => cmd_run(
            dets,
            adapter,
            model,
            params,
            detector,
            out,
            frames,
            zones,
            gallery,
            simulate_ms,
            frame_count,
            width,
            height,
            fps,
        ),
        Command::Count { session, zone, quick, method } => cmd_count(&session, &zone, quick, method),
        Command::Eval { session, gt, table } => cmd_eval(&session, &gt, table),
        Command::Replay { session, fps } => cmd_replay(&session, fps),
        Command::HashConfig { params, detector } => {
            let params: TrackerParams = read_opt(params.as_deref())?;
            let detector: DetectorConfig = read_opt(detector.as_deref())?;
            println!("{}", config_hash(&params, &detector));
            Ok(())
        }
        Command::Serve { data_dir, bind } => {
            let state = AppState::open(&data_dir)?;
            tokio::runtime::Runtime::new()?.block_on(server::serve(state, &bind))?;
            Ok(())
        }
    }
}
