use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use forwardbench::bench::runner::{load_dataset, prepare_for_seed, tune_seed, write_file};
use forwardbench::bench::{
    compare, render_report, run_experiment, ComparisonRow, ExperimentConfig, ExperimentRecord, ReportFormat, RunMode,
    RunOptions,
};
use forwardbench::train::train;
use forwardbench::verify;

#[derive(Parser)]
#[command(name = "forwardbench", version, about = "Train and compare BP, FF, CaFo and MF under one protocol")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once per seed with the [train] settings, no search.
    Train(RunArgs),
    /// Run the hyperparameter search only.
    Tune(RunArgs),
    /// Search, then train every seed with telemetry.
    Bench(RunArgs),
    /// Compare an alternative run directory against a BP run directory.
    Compare {
        alt: PathBuf,
        baseline: PathBuf,
        #[arg(long, default_value = "markdown")]
        format: String,
        /// Also write the comparison row as JSON here.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Render every saved comparison row in a directory.
    Report {
        dir: PathBuf,
        #[arg(long, default_value = "markdown")]
        format: String,
        /// Write the document here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the kernel and gradient self-checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides run.output.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Overrides run.seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, short)]
    quiet: bool,
}

impl RunArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(o) = &self.output {
            cfg.run.output = o.clone();
        }
        if let Some(s) = &self.seeds {
            cfg.run.seeds = s.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn progress(quiet: bool) -> impl Fn(&str) {
    move |msg: &str| {
        if !quiet {
            eprintln!("{msg}");
        }
    }
}

fn run(args: &RunArgs, mode: RunMode) -> anyhow::Result<()> {
    let cfg = args.load()?;
    let note = progress(args.quiet);
    let opts = RunOptions {
        mode,
        write: true,
        progress: Some(&note),
    };
    let out = run_experiment(&cfg, &opts)?;
    for w in &out.record.warnings {
        eprintln!("warning: {w}");
    }
    let Some(agg) = &out.record.aggregate else {
        bail!("no seed completed");
    };
    println!(
        "{} {} {}: test_acc {:.2}% ± {:.2} over {} seed(s), time {:.1}s, energy {:.4} Wh -> {}",
        out.record.dataset,
        out.record.architecture,
        out.record.algorithm,
        100.0 * agg.test_acc.mean,
        100.0 * agg.test_acc.std,
        agg.completed,
        agg.time_s.mean,
        agg.energy_wh.mean,
        cfg.run.output.join("run.json").display()
    );
    Ok(())
}

fn tune(args: &RunArgs) -> anyhow::Result<()> {
    let cfg = args.load()?;
    if cfg.search.n_trials == 0 {
        bail!("search.n_trials is 0");
    }
    let note = progress(args.quiet);
    let (train_set, test_set) = load_dataset(&cfg)?;
    let arch = cfg.model.architecture(train_set.image_shape, train_set.num_classes)?;
    for &seed in &cfg.run.seeds {
        note(&format!("seed {seed}: {} trials", cfg.search.n_trials));
        let data = prepare_for_seed(&cfg, (&train_set, &test_set), seed)?;
        let outcome = tune_seed(&cfg, &arch, &data, seed, &train)?;
        let dir = cfg.run.output.join(format!("seed_{seed}"));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write_file(&dir.join("trials.jsonl"), outcome.ledger_jsonl()?.as_bytes())?;
        match outcome.best_trial() {
            Some(best) => {
                write_file(&dir.join("best_params.json"), serde_json::to_string_pretty(&best.params)?.as_bytes())?;
                println!("seed {seed}: best val_acc {:.4} with {}", best.objective, serde_json::to_string(&best.params)?);
            }
            None => bail!("seed {seed}: every trial failed"),
        }
    }
    Ok(())
}

fn compare_dirs(alt: &Path, baseline: &Path, format: &str, save: Option<&Path>) -> anyhow::Result<()> {
    let format: ReportFormat = format.parse()?;
    let a = ExperimentRecord::load(alt)?;
    let b = ExperimentRecord::load(baseline)?;
    if a.dataset != b.dataset {
        eprintln!("warning: comparing different datasets ({} vs {})", a.dataset, b.dataset);
    }
    let row = compare(&a.dataset, &a.architecture, &a.algorithm, &a.summary()?, &b.summary()?);
    if let Some(path) = save {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        write_file(path, serde_json::to_string_pretty(&row)?.as_bytes())?;
    }
    print!("{}", render_report(&[row], format)?);
    Ok(())
}

fn report(dir: &Path, format: &str, out: Option<&Path>) -> anyhow::Result<()> {
    let format: ReportFormat = format.parse()?;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut rows = Vec::new();
    for f in &files {
        let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        let row: ComparisonRow = serde_json::from_str(&text).with_context(|| format!("parsing {}", f.display()))?;
        rows.push(row);
    }
    let doc = render_report(&rows, format)?;
    match out {
        Some(p) => write_file(p, doc.as_bytes())?,
        None => print!("{doc}"),
    }
    Ok(())
}

fn verify_all(seed: u64) -> anyhow::Result<()> {
    let results = verify::run_all(seed);
    let mut failed = 0;
    for r in &results {
        println!("{} {:<22} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", results.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(a) => run(a, RunMode::TrainOnly),
        Command::Tune(a) => tune(a),
        Command::Bench(a) => run(a, RunMode::Bench),
        Command::Compare {
            alt,
            baseline,
            format,
            save,
        } => compare_dirs(alt, baseline, format, save.as_deref()),
        Command::Report { dir, format, out } => report(dir, format, out.as_deref()),
        Command::Verify { seed } => verify_all(*seed),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
