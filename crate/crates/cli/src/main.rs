use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crawlcurate::{corpus, exit, report, run_pipeline, LoadedConfig, PipelineError, RunManifest, Stage};
use crawlcurate_fetcher::{FixtureConfig, FixtureServer};

#[derive(Parser)]
#[command(name = "crawlcurate", version, about = "Image-text dataset curation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArg {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Parse WAT files into deduplicated candidate pairs.
    Extract(ConfigArg),
    /// Detect caption languages and assign buckets.
    Langid(ConfigArg),
    /// Download images through the job store.
    Fetch(ConfigArg),
    /// Embed pairs and apply the similarity threshold.
    Filter(ConfigArg),
    /// Score NSFW, watermark and inappropriate-content tags.
    Tag(ConfigArg),
    /// Write shards, the metadata table and the tag sidecar.
    Pack(ConfigArg),
    /// Compute the statistics report.
    Stats(ConfigArg),
    /// Train and write the nearest-neighbour index.
    Index(ConfigArg),
    /// Run every stage, skipping those that are up to date.
    Run(ConfigArg),
    /// Print the per-stage funnel of a run.
    Report {
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        config: Option<PathBuf>,
        /// Manifest path, instead of locating it through a config.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Serve search, sample, subset export and stats over HTTP.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Static UI bundle served for unmatched paths.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        export_workers: usize,
    },
    /// Write the bundled fixture corpus and its pipeline config.
    GenFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Run the fixture image server in the foreground.
    FixtureServer {
        #[arg(long, default_value_t = 8089)]
        port: u16,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        latency_ms: u64,
    },
}

fn load(path: &std::path::Path) -> Result<LoadedConfig, ExitCode> {
    LoadedConfig::load(path).map_err(|e| {
        eprintln!("{e}");
        ExitCode::from(exit::CONFIG as u8)
    })
}

fn stages(cfg: &LoadedConfig, which: &[Stage]) -> ExitCode {
    match run_pipeline(cfg, which) {
        Ok(run) => {
            for s in &run.skipped {
                eprintln!("{s}: up to date");
            }
            print!("{}", report(&run.manifest));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            let code = match e {
                PipelineError::Config(_) => exit::CONFIG,
                PipelineError::StageFailed { .. } => exit::STAGE,
                PipelineError::Manifest(_) => exit::FAILURE,
            };
            ExitCode::from(code as u8)
        }
    }
}

fn serve(cfg: &LoadedConfig, addr: SocketAddr, ui_dir: Option<PathBuf>, workers: usize) -> ExitCode {
    let p = &cfg.paths;
    let embedder = match cfg.embedder() {
        Ok(e) => e,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(exit::CONFIG as u8);
        }
    };
    let mut sc = crawlcurate_service::ServiceConfig::new(p.index.clone(), p.metadata.clone(), p.exports.clone());
    sc.tags = Some(p.tag_sidecar.clone());
    sc.stats = Some(p.stats.clone());
    sc.embedder = Some(embedder);
    sc.ui_dir = ui_dir;
    sc.export_workers = workers;
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(exit::FAILURE as u8);
        }
    };
    let result = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| e.to_string())?;
        log::info!("serving on {}", listener.local_addr().map_err(|e| e.to_string())?);
        crawlcurate_service::serve(&sc, listener).await.map_err(|e| e.to_string())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(exit::FAILURE as u8)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let single = |arg: &ConfigArg, stage: Stage| match load(&arg.config) {
        Ok(cfg) => stages(&cfg, &[stage]),
        Err(code) => code,
    };
    match cli.command {
        Command::Extract(a) => single(&a, Stage::Extract),
        Command::Langid(a) => single(&a, Stage::Langid),
        Command::Fetch(a) => single(&a, Stage::Fetch),
        Command::Filter(a) => single(&a, Stage::Filter),
        Command::Tag(a) => single(&a, Stage::Tag),
        Command::Pack(a) => single(&a, Stage::Pack),
        Command::Stats(a) => single(&a, Stage::Stats),
        Command::Index(a) => single(&a, Stage::Index),
        Command::Run(a) => match load(&a.config) {
            Ok(cfg) => stages(&cfg, &Stage::ALL),
            Err(code) => code,
        },
        Command::Report { config, manifest } => {
            let path = match (config, manifest) {
                (_, Some(m)) => m,
                (Some(c), None) => match load(&c) {
                    Ok(cfg) => cfg.manifest_path(),
                    Err(code) => return code,
                },
                (None, None) => unreachable!("clap requires one of the two"),
            };
            match RunManifest::load(&path) {
                Ok(m) => {
                    print!("{}", report(&m));
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::from(exit::CONFIG as u8)
                }
            }
        }
        Command::Serve { config, addr, ui_dir, export_workers } => match load(&config) {
            Ok(cfg) => serve(&cfg, addr, ui_dir, export_workers),
            Err(code) => code,
        },
        Command::GenFixture { out, seed } => match corpus::generate(&out, seed) {
            Ok(g) => {
                println!("{}", g.config_path.display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(exit::FAILURE as u8)
            }
        },
        Command::FixtureServer { port, seed, latency_ms } => {
            let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
            rt.block_on(async {
                match FixtureServer::start(FixtureConfig { seed, latency_ms }, port).await {
                    Ok(server) => {
                        println!("fixture server on {}", server.addr());
                        let _ = tokio::signal::ctrl_c().await;
                        ExitCode::SUCCESS
                    }
                    Err(e) => {
                        eprintln!("{e}");
                        ExitCode::from(exit::FAILURE as u8)
                    }
                }
            })
        }
    }
}
