use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand};

use defectforge::backend::conformance;
use defectforge::backend::http::{HttpBackend, RetryPolicy};
use defectforge::backend::MockBackend;
use defectforge::config::Config;
use defectforge::fixtures::{self, FixtureKind};
use defectforge::pipeline::{Pipeline, PipelineError, BACKEND_URL_ENV};

#[derive(Parser, Debug)]
#[command(name = "defectforge", version, about = "Synthetic defect generation and annotation pipeline")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Builtin profile used when no config file is given (bsdata, msd).
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Workspace directory holding one subdirectory per stage.
    #[arg(long, global = true, default_value = "workspace")]
    workspace: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, env = BACKEND_URL_ENV)]
    backend_url: Option<String>,
    /// Dataset root, overriding the config.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Rerun even when upstream stages changed since they were consumed.
    #[arg(long, global = true)]
    force: bool,
    /// Use the deterministic in-process backend.
    #[arg(long, global = true)]
    mock_backend: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Resolution filter, statistics, split, heatmaps and size buckets.
    Analyze,
    /// Context-padded 1024x1024 patches of the training defects.
    ExtractPatches,
    /// Tag the patches and assemble the generation prompt.
    BuildPrompt,
    /// Transformed synthetic masks placed by the configured prior.
    GenMasks,
    /// Inpaint candidates on defect-free backgrounds.
    Generate,
    /// Alignment and k-NN distance scores for every candidate.
    Score,
    /// Rank candidates and keep the top `--target`.
    Select {
        #[arg(long)]
        target: Option<usize>,
    },
    /// Blend selected candidates into backgrounds and export COCO.
    ComposeImages,
    /// Real/synthetic training manifests for three seeds.
    Regimes,
    /// Metric summary table.
    Report {
        /// Extra group as NAME=scores.csv; repeatable.
        #[arg(long = "group", value_parser = parse_group)]
        groups: Vec<(String, PathBuf)>,
    },
    /// Every stage in order.
    Run,
    /// Write a synthetic dataset with known counts.
    MakeFixture {
        #[arg(long, default_value = "bsdata")]
        kind: FixtureKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Protocol conformance checks against a backend.
    CheckBackend,
    /// Print the effective configuration.
    ShowConfig,
}

fn parse_group(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected NAME=PATH, got {s:?}"))?;
    Ok((name.to_string(), PathBuf::from(path)))
}

fn load_config(cli: &Cli) -> Result<Config, PipelineError> {
    let mut cfg = match (&cli.config, &cli.profile) {
        (Some(path), _) => Config::load(path)?,
        (None, Some(p)) => Config::builtin(p)?,
        (None, None) => Config::default(),
    };
    if let (Some(path), Some(p)) = (&cli.config, &cli.profile) {
        if &cfg.profile != p {
            log::warn!("--profile {p} ignored: {} sets profile {}", path.display(), cfg.profile);
        }
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(root) = &cli.dataset {
        cfg.dataset.root = root.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    if let Command::MakeFixture { kind, out } = &cli.command {
        let seed = cli.seed.unwrap_or(11);
        let summary = fixtures::make_fixture(out, *kind, seed).map_err(|e| PipelineError::Failed {
            stage: "make-fixture",
            message: e.to_string(),
        })?;
        println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
        return Ok(());
    }
    let cfg = load_config(&cli)?;
    let mut p = Pipeline::new(cfg, &cli.workspace);
    p.force = cli.force;
    p.backend_url = cli.backend_url.clone();
    p.mock_backend = cli.mock_backend;
    match cli.command {
        Command::Analyze => {
            let stats = p.analyze()?;
            println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
        }
        Command::ExtractPatches => println!("{} patches", p.extract_patches()?.patches.len()),
        Command::BuildPrompt => println!("{}", p.build_prompt()?.text),
        Command::GenMasks => {
            let pool = p.gen_masks()?;
            println!("{} masks, {} placement failures", pool.masks.len(), pool.failures.len());
        }
        Command::Generate => {
            let cp = p.generate()?;
            println!("{} of {} candidates generated", cp.succeeded, cp.attempted);
        }
        Command::Score => println!("{} candidates scored", p.score()?.len()),
        Command::Select { target } => {
            for id in p.select(target)?.ids() {
                println!("{id}");
            }
        }
        Command::ComposeImages => println!("{} images composed", p.compose_images()?.len()),
        Command::Regimes => println!("{} manifests", p.regimes()?.manifests.len()),
        Command::Report { groups } => {
            p.report_groups = groups;
            print!("{}", p.report()?.to_markdown());
        }
        Command::Run => p.run_all()?,
        Command::CheckBackend => check_backend(&p, cli.backend_url.as_deref(), cli.mock_backend)?,
        Command::ShowConfig => print!("{}", p.cfg.to_toml()),
        Command::MakeFixture { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn check_backend(p: &Pipeline, url: Option<&str>, mock: bool) -> Result<(), PipelineError> {
    let results = if mock || p.cfg.backend.mock {
        conformance::run(&MockBackend::new(p.cfg.backend.mock_profile), None, 64)
    } else {
        let url = url
            .map(str::to_string)
            .or_else(|| p.cfg.backend.base_url.clone())
            .ok_or_else(|| PipelineError::Config(defectforge::config::ConfigError::Invalid("no backend URL".into())))?;
        let http = HttpBackend::new(&url, Duration::from_secs(p.cfg.backend.timeout_secs), RetryPolicy::default())
            .map_err(|e| PipelineError::Backend(e.to_string()))?;
        conformance::run(&http, Some(&http), 64)
    };
    let mut failed = 0;
    for r in &results {
        println!("{} {} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(PipelineError::Backend(format!("{failed} conformance checks failed")));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli).context("defectforge failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<PipelineError>().map_or(1, PipelineError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
