//! Command-line driver: `run`, `ablate`, `score`, and `gen-data`.
//!
//! Exit codes: 0 on success, 1 for configuration problems (bad flags, bad
//! config files, unknown suites), 2 for runtime failures. The output root
//! defaults to `$MFSB_OUT_DIR`, then `./out`.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, WorldChoice};
use crate::data::write_dataset;
use crate::error::{Error, Result};
use crate::experiment::{
    build_pipeline, default_out_dir, ensure_run_dir, evaluate_model, per_seed_csv,
    run_ablation_suite, run_experiment, OutputFormat, ResultsRow, ResultsTable, Suite,
};
use crate::metrics::EvalReport;
use crate::model::Model;
use crate::train::load_checkpoint;

#[derive(Parser)]
#[command(
    name = "mfsb",
    about = "Compositional zero-shot learning bench: separated prompts with two-stage cross-modal fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key=value config file; all keys default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output root (default: $MFSB_OUT_DIR, then ./out).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Overrides the config's world: open, closed, or both.
    #[arg(long)]
    world: Option<String>,

    /// Result table format: csv or markdown.
    #[arg(long, default_value = "csv")]
    format: String,
}

#[derive(Subcommand)]
enum Command {
    /// Train one experiment and write config/loss/report/checkpoint artifacts.
    Run {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run an ablation suite (prompt_forms, components, fusion) over seeds.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,

        /// Suite name: prompt_forms, components, or fusion.
        #[arg(long)]
        suite: String,

        /// Seed count; cells run on config seed, seed+1, ...
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Re-evaluate the stored checkpoint of a config's run directory.
    Score {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Generate the config's dataset file for external use.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
}

/// Parse and dispatch; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    let mut stdout = std::io::stdout();
    run_to(args, &mut stdout)
}

/// Like [`run`], with output captured by the caller.
pub fn run_to(args: &[String], out: &mut dyn Write) -> i32 {
    let mut argv = vec!["mfsb".to_string()];
    argv.extend_from_slice(args);
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            eprintln!("{e}");
            return 1;
        }
    };
    match dispatch(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                1
            } else {
                2
            }
        }
    }
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(world) = &common.world {
        config.world = WorldChoice::parse(world)?;
        config.validate()?;
    }
    Ok(config)
}

fn out_root(common: &CommonArgs) -> PathBuf {
    common.out.clone().unwrap_or_else(default_out_dir)
}

fn report_row(method: &str, report: &EvalReport) -> ResultsRow {
    ResultsRow {
        method: method.to_string(),
        s: report.seen_acc,
        u: report.unseen_acc,
        hm: report.harmonic_mean,
        auc: report.auc,
    }
}

fn print_reports(
    out: &mut dyn Write,
    method: &str,
    reports: &[EvalReport],
    format: OutputFormat,
) -> Result<()> {
    for report in reports {
        let table =
            ResultsTable { world: report.world, rows: vec![report_row(method, report)] };
        write!(out, "{}", table.emit(format)?)?;
    }
    Ok(())
}

/// One CSV with all worlds' mean rows under a single header.
fn tables_csv(tables: &[ResultsTable]) -> Result<String> {
    let mut combined = String::from(EvalReport::CSV_HEADER);
    combined.push('\n');
    for table in tables {
        let csv = table.to_csv()?;
        for line in csv.lines().skip(1) {
            combined.push_str(line);
            combined.push('\n');
        }
    }
    Ok(combined)
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Run { common } => {
            let config = load_config(&common)?;
            let format = OutputFormat::parse(&common.format)?;
            write!(out, "{}", config.echo())?;
            let artifacts = run_experiment(&config, &out_root(&common))?;
            writeln!(out, "run dir: {}", artifacts.dir.display())?;
            print_reports(out, &config.method_label(), &artifacts.output.reports, format)
        }
        Command::Ablate { common, suite, seeds } => {
            let base = load_config(&common)?;
            let format = OutputFormat::parse(&common.format)?;
            let suite = Suite::parse(&suite)?;
            if seeds == 0 {
                return Err(crate::error::Error::Config("--seeds must be at least 1".into()));
            }
            let seed_list: Vec<u64> = (0..seeds).map(|i| base.seed + i).collect();
            let result = run_ablation_suite(suite, &base, &seed_list)?;

            let dir = out_root(&common)
                .join(format!("ablate-{}-{:016x}", suite.key(), base.hash()));
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("mean.csv"), tables_csv(&result.tables)?)?;
            std::fs::write(dir.join("per_seed.csv"), per_seed_csv(&result))?;

            writeln!(out, "suite dir: {}", dir.display())?;
            for table in &result.tables {
                write!(out, "{}", table.emit(format)?)?;
            }
            Ok(())
        }
        Command::Score { common } => {
            let config = load_config(&common)?;
            let format = OutputFormat::parse(&common.format)?;
            let ckpt = out_root(&common)
                .join(format!("{:016x}", config.hash()))
                .join("model.ckpt");
            let pipeline = build_pipeline(&config)?;
            let mut model = Model::init(&pipeline.space, config.model_config(), config.seed)?;
            if !ckpt.is_file() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("no checkpoint at {} — train it first with `run`", ckpt.display()),
                )));
            }
            load_checkpoint(&ckpt, config.hash(), &mut model.params)?;
            let reports = evaluate_model(&config, &pipeline, &model)?;
            print_reports(out, &config.method_label(), &reports, format)
        }
        Command::GenData { common } => {
            let config = load_config(&common)?;
            let pipeline = build_pipeline(&config)?;
            let dir = ensure_run_dir(&config, &out_root(&common))?;
            let text = write_dataset(
                &pipeline.dataset,
                &pipeline.space,
                config.noise_sigma,
                config.seed,
            );
            let path = dir.join("dataset.txt");
            std::fs::write(&path, text)?;
            writeln!(out, "dataset: {}", path.display())?;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::read_dataset;

    const TINY: &str = "\
space.n_states = 2
space.n_objects = 3
space.samples_per_pair = 2
space.eval_per_pair = 1
space.d_in = 8
space.d = 8
model.prefix_len = 2
train.epochs = 1
train.batch = 8
bias.n_points = 5
world = open
";

    fn dirs() -> (tempfile::TempDir, PathBuf, PathBuf) {
        let tmp = tempfile::tempdir().unwrap();
        let config = tmp.path().join("exp.cfg");
        std::fs::write(&config, TINY).unwrap();
        let out = tmp.path().join("runs");
        (tmp, config, out)
    }

    fn call(args: &[&str]) -> (i32, String) {
        let args: Vec<String> = args.iter().map(|s| s.to_string()).collect();
        let mut captured = Vec::new();
        let code = run_to(&args, &mut captured);
        (code, String::from_utf8(captured).unwrap())
    }

    #[test]
    fn run_prints_the_effective_config_and_writes_artifacts() {
        let (_tmp, config, out) = dirs();
        let (code, stdout) = call(&[
            "run",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "stdout: {stdout}");
        assert!(stdout.contains("space.n_states = 2"), "{stdout}");
        assert!(stdout.contains("run dir: "), "{stdout}");
        assert!(stdout.contains("method,world,S,U,HM,AUC"), "{stdout}");

        let run_dir = out.read_dir().unwrap().next().unwrap().unwrap().path();
        for name in ["config.txt", "loss.csv", "report.csv", "model.ckpt"] {
            assert!(run_dir.join(name).exists(), "missing {name}");
        }
    }

    #[test]
    fn markdown_format_renders_a_table() {
        let (_tmp, config, out) = dirs();
        let (code, stdout) = call(&[
            "run",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--format",
            "markdown",
        ]);
        assert_eq!(code, 0);
        assert!(stdout.contains("| method | S | U | HM | AUC |"), "{stdout}");
    }

    #[test]
    fn configuration_problems_exit_with_code_one() {
        let (code, _) = call(&["run", "--bogus"]);
        assert_eq!(code, 1);

        let (_tmp, config, out) = dirs();
        let (code, _) = call(&[
            "ablate",
            "--suite",
            "nonsense",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 1);

        let bad = _tmp.path().join("bad.cfg");
        std::fs::write(&bad, "space.n_statez = 4\n").unwrap();
        let (code, _) = call(&["run", "--config", bad.to_str().unwrap()]);
        assert_eq!(code, 1);

        let (code, _) = call(&["run", "--config", config.to_str().unwrap(), "--world", "sideways"]);
        assert_eq!(code, 1);
    }

    #[test]
    fn score_needs_a_checkpoint_and_reproduces_the_run_report() {
        let (_tmp, config, out) = dirs();
        let args = ["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];

        // No run yet: runtime failure.
        let (code, _) = call(&[&["score"], &args[..]].concat());
        assert_eq!(code, 2);

        let (code, run_stdout) = call(&[&["run"], &args[..]].concat());
        assert_eq!(code, 0);
        let (code, score_stdout) = call(&[&["score"], &args[..]].concat());
        assert_eq!(code, 0);

        // The scored table row equals the run's report row.
        let row = run_stdout.lines().last().unwrap();
        assert!(score_stdout.contains(row), "run row {row:?} not in {score_stdout:?}");
    }

    #[test]
    fn ablate_writes_mean_and_per_seed_tables() {
        let (tmp, _config, out) = dirs();
        let fast = tmp.path().join("fast.cfg");
        std::fs::write(&fast, format!("{TINY}train.epochs = 0\n")).unwrap();
        let (code, stdout) = call(&[
            "ablate",
            "--suite",
            "fusion",
            "--seeds",
            "2",
            "--config",
            fast.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{stdout}");
        assert!(stdout.contains("No Fusion"), "{stdout}");
        assert!(stdout.contains("1. Inter 2. Intra"), "{stdout}");

        let suite_dir = out.read_dir().unwrap().next().unwrap().unwrap().path();
        let mean = std::fs::read_to_string(suite_dir.join("mean.csv")).unwrap();
        assert_eq!(mean.lines().count(), 1 + 5);
        let per_seed = std::fs::read_to_string(suite_dir.join("per_seed.csv")).unwrap();
        assert_eq!(per_seed.lines().count(), 1 + 2 * 5);
    }

    #[test]
    fn gen_data_emits_a_readable_dataset_file() {
        let (_tmp, config, out) = dirs();
        let (code, stdout) = call(&[
            "gen-data",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        assert!(stdout.contains("dataset: "));
        let run_dir = out.read_dir().unwrap().next().unwrap().unwrap().path();
        let text = std::fs::read_to_string(run_dir.join("dataset.txt")).unwrap();
        let file = read_dataset(&text).unwrap();
        assert_eq!(file.d_in, 8);
        assert!(!file.rows.is_empty());
    }

    #[test]
    fn help_prints_and_exits_cleanly() {
        let (code, stdout) = call(&["--help"]);
        assert_eq!(code, 0);
        for sub in ["run", "ablate", "score", "gen-data"] {
            assert!(stdout.contains(sub), "help missing {sub}: {stdout}");
        }
    }
}
