//! `fedbell` command line: run the services, simulate a federation,
//! generate synthetic data and inspect frames and annotations.

pub mod sim;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fedbell_core::synth::{generate_scene, mix_seed, DEFAULT_CLASSES};
use fedbell_core::vision::{
    parse_voc, sample_frames, to_voc_xml, write_pgm, AnnotatedObject, AnnotationRecord, FrameOutcome, FramePipeline,
    FrameSource, PipelineConfig,
};
use fedbell_net::{
    spawn_server, ClientConfig, ClientError, EventService, EventServiceConfig, FederatedClient, ServerConfig,
};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub use sim::{centralized_baseline, simulate, MetricsReport, ScenarioConfig, SimError, SimulationRun};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "fedbell",
    version,
    about = "Federated learning for smart doorbells",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the federation server.
    Serve {
        /// Server config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Exit once the final round is published.
        #[arg(long)]
        until_finished: bool,
        /// With --until-finished, keep serving this long after the final
        /// round so clients can fetch the last model.
        #[arg(long, default_value_t = 2000)]
        linger_ms: u64,
    },
    /// Run a device: ingest annotations, train through the rounds, then
    /// optionally watch a frame directory.
    Client(ClientArgs),
    /// Run the event store service.
    Events {
        /// Event service config JSON.
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a full in-process federation over loopback HTTP.
    Simulate {
        /// Scenario config JSON; defaults are used for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for the event log; a temporary one by default.
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
    /// Write synthetic scenes as PGM frames with VOC annotations.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of classes to cycle through (1 to 4).
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
    /// Run motion gating and background subtraction over a frame directory.
    Pipeline(PipelineArgs),
    /// Validate VOC annotation files.
    AnnotateCheck {
        /// XML files or directories containing them.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ClientArgs {
    /// Client config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Directory with `annotations/*.xml` and `frames/*.pgm`.
    #[arg(long)]
    data: PathBuf,
    /// Stop after this many rounds even if the federation continues.
    #[arg(long)]
    rounds: Option<u64>,
    /// Frame directory to run through the pipeline after training.
    #[arg(long)]
    observe: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    period_ms: u64,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// Directory of PGM frames, processed in file-name order.
    #[arg(long)]
    frames: PathBuf,
    #[arg(long, default_value_t = 1000)]
    period_ms: u64,
    #[arg(long)]
    pixel_delta: Option<u8>,
    #[arg(long)]
    min_fraction: Option<f64>,
    #[arg(long)]
    diff_threshold: Option<u8>,
    #[arg(long)]
    min_area: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Runtime(String),
}

fn fail<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(fail(&path.display().to_string()))?;
    serde_json::from_slice(&bytes).map_err(fail(&path.display().to_string()))
}

fn print_json_line<T: Serialize>(value: &T) {
    if let Ok(s) = serde_json::to_string(value) {
        println!("{s}");
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(fail("tokio runtime"))
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

/// Parses `argv` (including the program name) and runs the subcommand.
/// Returns 0 on success, 1 on usage errors, 2 on runtime errors.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    init_logging();
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Serve {
            config,
            until_finished,
            linger_ms,
        } => serve(&config, until_finished.then_some(linger_ms)),
        Command::Client(args) => client(&args),
        Command::Events { config } => events(&config),
        Command::Simulate {
            config,
            seed,
            out,
            work_dir,
        } => simulate_cmd(config.as_deref(), seed, out.as_deref(), work_dir.as_deref()),
        Command::GenData {
            out,
            count,
            seed,
            classes,
        } => gen_data(&out, count, seed, classes),
        Command::Pipeline(args) => pipeline(&args),
        Command::AnnotateCheck { paths } => annotate_check(&paths),
    }
}

fn serve(config: &Path, until_finished: Option<u64>) -> Result<(), CliError> {
    let cfg: ServerConfig = read_json(config)?;
    runtime()?.block_on(async {
        let server = spawn_server(cfg).await.map_err(fail("server"))?;
        eprintln!("serving on {}", server.url());
        if let Some(linger_ms) = until_finished {
            let mut progress = server.progress();
            tokio::select! {
                _ = async {
                    let _ = progress.wait_for(|s| s.phase == fedbell_core::Phase::Published).await;
                    tokio::time::sleep(std::time::Duration::from_millis(linger_ms)).await;
                } => {}
                _ = tokio::signal::ctrl_c() => {}
            }
        } else {
            let _ = tokio::signal::ctrl_c().await;
        }
        for round in server.history() {
            print_json_line(&serde_json::json!({
                "round": round.model.round,
                "total_samples": round.model.total_samples,
                "contributors": round.contributors.len(),
            }));
        }
        server.shutdown().await;
        Ok(())
    })
}

fn events(config: &Path) -> Result<(), CliError> {
    let cfg: EventServiceConfig = read_json(config)?;
    runtime()?.block_on(async {
        let service = EventService::spawn(cfg).await.map_err(fail("event service"))?;
        eprintln!(
            "event store on {} ({} events replayed)",
            service.url(),
            service.store().len()
        );
        let _ = tokio::signal::ctrl_c().await;
        service.drain_notifications().await;
        service.shutdown().await;
        Ok(())
    })
}

fn xml_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(fail(&p.display().to_string()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "xml"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn client(args: &ClientArgs) -> Result<(), CliError> {
    let cfg: ClientConfig = read_json(&args.config)?;
    let mut records = Vec::new();
    for file in xml_files(&[args.data.join("annotations")])? {
        let text = fs::read_to_string(&file).map_err(fail(&file.display().to_string()))?;
        match parse_voc(&text) {
            Ok(r) => records.push(r),
            Err(e) => eprintln!("skipping {}: {e}", file.display()),
        }
    }
    runtime()?.block_on(async {
        let client = FederatedClient::register(cfg).await.map_err(fail("register"))?;
        let report = client.ingest_annotations(&records, &args.data.join("frames"));
        for (image, reason) in &report.errors {
            eprintln!("annotation for {image} rejected: {reason}");
        }
        eprintln!(
            "{} registered as {}; shard has {} examples",
            client.device_id(),
            client.client_id(),
            client.shard_len()
        );
        let mut done = 0;
        while args.rounds.is_none_or(|r| done < r) {
            match client.run_round().await {
                Ok(model) => {
                    done += 1;
                    print_json_line(&serde_json::json!({
                        "round": model.round,
                        "total_samples": model.total_samples,
                    }));
                }
                Err(ClientError::Finished(_)) => break,
                Err(e) => return Err(fail("round")(e)),
            }
        }
        if let Some(dir) = &args.observe {
            if client.current_model().is_none() {
                client.fetch_model().await.map_err(fail("model"))?;
            }
            let frames = sample_frames(FrameSource::Directory(dir.clone()), args.period_ms).map_err(fail("frames"))?;
            let mut pipeline = FramePipeline::new(PipelineConfig::default());
            for frame in frames {
                let frame = frame.map_err(fail("frame"))?;
                let obs = client
                    .observe_frame(&mut pipeline, &frame)
                    .await
                    .map_err(fail("inference"))?;
                let detail = match &obs.inference {
                    Some(fedbell_net::Inference::Detected(ev)) => {
                        serde_json::json!({"detected": ev.label, "confidence": ev.confidence})
                    }
                    Some(fedbell_net::Inference::Unknown { label, confidence }) => {
                        serde_json::json!({"unknown": label, "confidence": confidence})
                    }
                    None => serde_json::Value::Null,
                };
                print_json_line(&serde_json::json!({
                    "timestamp_ms": frame.timestamp_ms,
                    "outcome": outcome_name(&obs.outcome),
                    "inference": detail,
                }));
            }
        }
        Ok(())
    })
}

fn simulate_cmd(
    config: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
    work_dir: Option<&Path>,
) -> Result<(), CliError> {
    let mut cfg: ScenarioConfig = match config {
        Some(p) => read_json(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let temp;
    let dir = match work_dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(fail(&d.display().to_string()))?;
            d.to_path_buf()
        }
        None => {
            temp = tempfile::tempdir().map_err(fail("work dir"))?;
            temp.path().to_path_buf()
        }
    };
    let run = runtime()?.block_on(simulate(&cfg, &dir)).map_err(fail("simulation"))?;
    let json = run.report.to_json();
    match out {
        Some(p) => fs::write(p, json).map_err(fail(&p.display().to_string()))?,
        None => std::io::stdout().write_all(json.as_bytes()).map_err(fail("stdout"))?,
    }
    Ok(())
}

fn gen_data(out: &Path, count: usize, seed: u64, classes: usize) -> Result<(), CliError> {
    if classes == 0 || classes > DEFAULT_CLASSES.len() {
        return Err(CliError::Runtime(format!(
            "--classes must lie in 1..={}",
            DEFAULT_CLASSES.len()
        )));
    }
    let frames = out.join("frames");
    let annotations = out.join("annotations");
    fs::create_dir_all(&frames).map_err(fail(&frames.display().to_string()))?;
    fs::create_dir_all(&annotations).map_err(fail(&annotations.display().to_string()))?;
    for i in 0..count {
        let class = i % classes;
        let scene = generate_scene(class, mix_seed(seed, i as u64)).map_err(fail("scene"))?;
        let name = format!("scene-{i:05}");
        let image = format!("{name}.pgm");
        fs::write(frames.join(&image), write_pgm(&scene.frame)).map_err(fail(&image))?;
        let record = AnnotationRecord {
            image_filename: image,
            image_width: scene.frame.width(),
            image_height: scene.frame.height(),
            objects: vec![AnnotatedObject {
                label: DEFAULT_CLASSES[class].to_string(),
                bbox: scene.feature_box,
            }],
        };
        let xml = format!("{name}.xml");
        fs::write(annotations.join(&xml), to_voc_xml(&record)).map_err(fail(&xml))?;
    }
    eprintln!("wrote {count} scenes to {}", out.display());
    Ok(())
}

fn outcome_name(o: &FrameOutcome) -> &'static str {
    match o {
        FrameOutcome::Warmup => "warmup",
        FrameOutcome::Dropped => "dropped",
        FrameOutcome::NoRoi => "no_roi",
        FrameOutcome::Roi(_) => "roi",
    }
}

fn pipeline(args: &PipelineArgs) -> Result<(), CliError> {
    let mut cfg = PipelineConfig::default();
    cfg.pixel_delta = args.pixel_delta.unwrap_or(cfg.pixel_delta);
    cfg.min_fraction = args.min_fraction.unwrap_or(cfg.min_fraction);
    cfg.diff_threshold = args.diff_threshold.unwrap_or(cfg.diff_threshold);
    cfg.min_area = args.min_area.unwrap_or(cfg.min_area);
    let frames = sample_frames(FrameSource::Directory(args.frames.clone()), args.period_ms).map_err(fail("frames"))?;
    let mut pipeline = FramePipeline::new(cfg);
    for frame in frames {
        let frame = frame.map_err(fail("frame"))?;
        let outcome = pipeline.process(&frame).map_err(fail("pipeline"))?;
        let bbox = match outcome {
            FrameOutcome::Roi(b) => Some(b.as_array()),
            _ => None,
        };
        print_json_line(&serde_json::json!({
            "timestamp_ms": frame.timestamp_ms,
            "outcome": outcome_name(&outcome),
            "bbox": bbox,
        }));
    }
    Ok(())
}

fn annotate_check(paths: &[PathBuf]) -> Result<(), CliError> {
    let files = xml_files(paths)?;
    let mut bad = 0;
    for file in &files {
        let result = fs::read_to_string(file)
            .map_err(|e| e.to_string())
            .and_then(|text| parse_voc(&text).map_err(|e| e.to_string()));
        match result {
            Ok(r) => println!("ok {} ({} objects)", file.display(), r.objects.len()),
            Err(e) => {
                bad += 1;
                eprintln!("invalid {}: {e}", file.display());
            }
        }
    }
    if bad > 0 {
        return Err(CliError::Runtime(format!(
            "{bad} of {} annotation files invalid",
            files.len()
        )));
    }
    Ok(())
}
