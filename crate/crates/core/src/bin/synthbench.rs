use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use synthbench::bench::{
    cmd_evaluate, cmd_infer, cmd_phantom, cmd_preprocess, cmd_rank, collect_summaries, means_from_summaries,
    read_means_csv, ExperimentConfig, RunOptions, RunReport,
};
use synthbench::ingest::Task;
use synthbench::server::{serve, ServerState};
use synthbench::stats::turing::{
    part1_summary, part2_summary, part3_summary, read_responses, write_part1_csv, write_part2_csv, write_part3_csv,
    StudyConfig,
};
use synthbench::{Error, Result};

#[derive(Parser)]
#[command(name = "synthbench", version, about = "Paired 3D image translation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    config: PathBuf,
    /// Subjects processed concurrently; defaults to the number of cores.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Check an experiment config and the files it references.
    Validate {
        config: PathBuf,
    },
    /// Write a seeded phantom dataset and its manifest.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        /// SOURCE-TARGET, e.g. CBCT-CT.
        #[arg(long, default_value = "MRI_T1w-CT")]
        task: String,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// X,Y,Z voxel counts.
        #[arg(long, value_parser = triple::<usize>, default_value = "64,64,64")]
        dims: [usize; 3],
        /// X,Y,Z spacing in mm.
        #[arg(long, value_parser = triple::<f64>, default_value = "1,1,1")]
        spacing: [f64; 3],
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Preprocess(ConfigArgs),
    Infer(ConfigArgs),
    Evaluate(ConfigArgs),
    /// Rank models across tasks with pairwise signed-rank tests.
    Rank {
        /// Result directories holding metrics/<model>/summary.json.
        dirs: Vec<PathBuf>,
        /// Long-format CSV with task,model,psnr_db,ssim instead of result dirs.
        #[arg(long, conflicts_with = "dirs")]
        means_csv: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a reader study.
    TuringServe {
        #[arg(long)]
        study: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory with the browser client build.
        #[arg(long)]
        assets: Option<PathBuf>,
    },
    /// Summarize reader-study responses.
    TuringAnalyze {
        #[arg(long)]
        study: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn triple<T: std::str::FromStr>(s: &str) -> std::result::Result<[T; 3], String> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad value {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    <[T; 3]>::try_from(parts).map_err(|_| format!("expected three comma-separated values, got {s:?}"))
}

fn options(jobs: Option<usize>) -> RunOptions {
    jobs.map_or_else(RunOptions::default, |jobs| RunOptions { jobs })
}

fn report(what: &str, r: RunReport) -> ExitCode {
    eprintln!("{what}: {} succeeded, {} failed", r.succeeded.len(), r.failed.len());
    if r.is_success() {
        return ExitCode::SUCCESS;
    }
    for (id, e) in &r.failed {
        eprintln!("failed subject {id}: {e}");
    }
    ExitCode::from(1)
}

fn validate(path: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(path)?;
    cfg.validate()?;
    let manifest = cfg.manifest()?;
    let mut missing = Vec::new();
    for s in &manifest.subjects {
        let paths = [Some(&s.source_path), Some(&s.target_path), s.body_mask_path.as_ref(), s.lesion_mask_path.as_ref()];
        for p in paths.into_iter().flatten() {
            if !p.is_file() {
                missing.push(format!("{}: {}", s.subject_id, p.display()));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Configuration(format!("missing inputs:\n  {}", missing.join("\n  "))));
    }
    println!("{} ok: {} subjects, model {}", path.display(), manifest.subjects.len(), cfg.model.name);
    Ok(())
}

fn write_to(path: PathBuf, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(&path, buf).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn turing_analyze(study: &Path, responses: &Path, out: &Path) -> Result<()> {
    let study = StudyConfig::load(study)?;
    let file = fs::File::open(responses)?;
    let rows = read_responses(file)?;
    let p1 = part1_summary(&study, &rows)?;
    let p2 = part2_summary(&study, &rows)?;
    let p3 = part3_summary(&study, &rows)?;
    fs::create_dir_all(out)?;
    write_to(out.join("part1.csv"), |b| write_part1_csv(&p1, b))?;
    write_to(out.join("part2.csv"), |b| write_part2_csv(&p2, b))?;
    write_to(out.join("part3.csv"), |b| write_part3_csv(&p3, b))?;
    let summary = serde_json::json!({ "schema_version": 1, "part1": p1, "part2": p2, "part3": p3 });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!(
        "part 1 accuracy {:.1}%, part 2 sanity violations {:.1}%, part 3 sanity violations {:.1}%",
        p1.accuracy, p2.sanity_violation_rate, p3.sanity_violation_rate
    );
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Validate { config } => {
            validate(&config)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Phantom {
            out,
            task,
            count,
            dims,
            spacing,
            seed,
        } => {
            let task: Task = task.parse()?;
            let m = cmd_phantom(&out, task, count, dims, spacing, seed)?;
            println!("wrote {} subjects to {}", m.subjects.len(), out.join("manifest.json").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Preprocess(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            Ok(report("preprocess", cmd_preprocess(&cfg, options(a.jobs))?))
        }
        Command::Infer(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            Ok(report("infer", cmd_infer(&cfg, options(a.jobs))?))
        }
        Command::Evaluate(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            Ok(report("evaluate", cmd_evaluate(&cfg, options(a.jobs))?))
        }
        Command::Rank { dirs, means_csv, out } => {
            let rows = match means_csv {
                Some(p) => read_means_csv(fs::File::open(&p)?)?,
                None => means_from_summaries(&collect_summaries(&dirs)?),
            };
            cmd_rank(&rows, &out)?;
            println!("wrote rank tables to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::TuringServe {
            study,
            responses,
            port,
            host,
            assets,
        } => {
            let study = StudyConfig::load(&study)?;
            let state = Arc::new(ServerState::new(study, responses, assets)?);
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| Error::Configuration(format!("bad address {host}:{port}: {e}")))?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(state, addr))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::TuringAnalyze { study, responses, out } => {
            turing_analyze(&study, &responses, &out)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
