//! Experiment harness CLI: run a scenario from a JSON config, compare two
//! reports, or replay a dumped detection stream.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 1 on I/O failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tagbundle::experiment::{
    compare, detections_jsonl, parse_detections_jsonl, render_compare, render_table, replay,
    report_json, run, ExperimentConfig, Report, SurveyRow,
};

#[derive(Parser)]
#[command(name = "tagbundle", about = "Tag-bundle docking experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment config and write report, table, logs, and dumps.
    Run(RunArgs),
    /// Print side-by-side deltas between two report JSON files.
    Compare { report_a: PathBuf, report_b: PathBuf },
    /// Re-run estimation over a dumped detection stream.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if absent).
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the episode count.
    #[arg(long)]
    episodes: Option<u32>,
    /// Worker pool size for the episode fan-out (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct ReplayArgs {
    /// Detection dump (JSON-lines, meta first).
    #[arg(long)]
    detections: PathBuf,
    /// Optional directory for the re-estimated CSV log.
    #[arg(long)]
    out: Option<PathBuf>,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 1;

fn main() -> ExitCode {
    match Cli::parse().command {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Compare { report_a, report_b } => cmd_compare(&report_a, &report_b),
        Cmd::Replay(args) => cmd_replay(args),
    }
}

fn read_file(path: &Path) -> Result<String, ExitCode> {
    fs::read_to_string(path).map_err(|e| {
        eprintln!("error: cannot read {}: {e}", path.display());
        ExitCode::from(EXIT_IO)
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExitCode> {
    fs::write(path, contents).map_err(|e| {
        eprintln!("error: cannot write {}: {e}", path.display());
        ExitCode::from(EXIT_IO)
    })
}

fn survey_csv(rows: &[SurveyRow]) -> String {
    tagbundle::experiment::survey_csv(rows)
}

fn cmd_run(args: RunArgs) -> ExitCode {
    let text = match read_file(&args.config) {
        Ok(t) => t,
        Err(c) => return c,
    };
    let mut cfg = match ExperimentConfig::from_json_str(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(eps) = args.episodes {
        cfg.episodes = eps;
    }

    let run_it = || run(&cfg);
    let out = match args.workers {
        Some(n) if n >= 1 => {
            let pool = match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("error: cannot build worker pool: {e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            pool.install(run_it)
        }
        Some(_) => {
            eprintln!("error: --workers must be >= 1");
            return ExitCode::from(EXIT_CONFIG);
        }
        None => run_it(),
    };
    let out = match out {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };

    if let Err(e) = fs::create_dir_all(&args.out) {
        eprintln!("error: cannot create {}: {e}", args.out.display());
        return ExitCode::from(EXIT_IO);
    }
    let table = render_table(&[&out.report]);
    let writes = [
        (args.out.join("report.json"), report_json(&out.report)),
        (args.out.join("table.txt"), table.clone()),
        (args.out.join("estimates.csv"), survey_csv(&out.survey_rows)),
        (
            args.out.join("detections.jsonl"),
            detections_jsonl(&out.dump_meta, &out.frame_dumps),
        ),
    ];
    for (path, contents) in &writes {
        if let Err(c) = write_file(path, contents) {
            return c;
        }
    }
    print!("{table}");
    ExitCode::SUCCESS
}

fn cmd_compare(path_a: &Path, path_b: &Path) -> ExitCode {
    let (text_a, text_b) = match (read_file(path_a), read_file(path_b)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(c), _) | (_, Err(c)) => return c,
    };
    let parse = |text: &str, path: &Path| -> Result<Report, ExitCode> {
        serde_json::from_str(text).map_err(|e| {
            eprintln!("error: {} is not a report: {e}", path.display());
            ExitCode::from(EXIT_CONFIG)
        })
    };
    let a = match parse(&text_a, path_a) {
        Ok(r) => r,
        Err(c) => return c,
    };
    let b = match parse(&text_b, path_b) {
        Ok(r) => r,
        Err(c) => return c,
    };
    match compare(&a, &b) {
        Ok(d) => {
            print!("{}", render_table(&[&a, &b]));
            print!("{}", render_compare(&d));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn cmd_replay(args: ReplayArgs) -> ExitCode {
    let text = match read_file(&args.detections) {
        Ok(t) => t,
        Err(c) => return c,
    };
    let (meta, frames) = match parse_detections_jsonl(&text) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let (stats, rows) = replay(&meta, &frames);
    println!(
        "frames {}  detection {:.1}%  yaw RMSE {:.3} deg  yaw max {:.2} deg",
        frames.len(),
        stats.detection_pct,
        stats.yaw_rmse_deg,
        stats.yaw_max_abs_deg
    );
    if let Some(dir) = args.out {
        if let Err(e) = fs::create_dir_all(&dir) {
            eprintln!("error: cannot create {}: {e}", dir.display());
            return ExitCode::from(EXIT_IO);
        }
        if let Err(c) = write_file(&dir.join("estimates.csv"), &survey_csv(&rows)) {
            return c;
        }
    }
    ExitCode::SUCCESS
}
