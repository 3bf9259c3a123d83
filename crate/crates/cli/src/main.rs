use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rlslab::bigarray::{BigArray, MAGIC};
use rlslab::error::ErrorClass;
use rlslab::experiment::{run_experiment, write_json_atomic, ExperimentConfig, RunReport};
use rlslab::io::{convert_to_bigarray, read_dataset, DataFormat, LabelMap};
use rlslab::pipeline::TaskRegistry;
use rlslab::Error;

#[derive(Parser, Debug)]
#[command(name = "rlslab", version, about = "Regularized least squares experiments")]
struct Cli {
    /// Base seed, overriding the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Where to write the JSON report.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Csv,
    Sparse,
}

impl From<FormatArg> for DataFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => DataFormat::Csv,
            FormatArg::Sparse => DataFormat::Sparse,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run { config: PathBuf },
    /// Convert a CSV or sparse text dataset to a bigarray file.
    Convert {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        chunk_rows: usize,
        /// Label column for CSV input; negative counts from the end.
        #[arg(long, default_value_t = -1, allow_hyphen_values = true)]
        label_col: isize,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
    },
    /// Describe a bigarray file or a dataset.
    Info {
        path: PathBuf,
        #[arg(long, default_value_t = -1, allow_hyphen_values = true)]
        label_col: isize,
    },
    /// Run an experiment several times and report timings.
    Bench {
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        repeat: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> rlslab::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print_summary(r: &RunReport) {
    let h = &r.hyperparameters;
    println!(
        "{}: accuracy {:.2}% on {} test samples (n={}, d={}, T={}), lambda {}, total {:.3}s",
        if r.name.is_empty() { "run" } else { &r.name },
        100.0 * r.performance.accuracy,
        r.performance.n_test,
        r.dataset.n_train,
        r.dataset.d,
        r.dataset.n_classes,
        h.lambda.map_or("-".into(), |l| format!("{l:.4e}")),
        r.timing.total_seconds,
    );
    for s in &r.timing.stages {
        println!("  {:<26} {:>10.4}s", s.name, s.seconds);
    }
}

fn cmd_run(config: &Path, cli: &Cli) -> rlslab::Result<()> {
    let cfg = load_config(config, cli.seed)?;
    let out = cli.output.clone().or_else(|| cfg.output.clone());
    let registry = TaskRegistry::with_builtins();
    cfg.validate(&registry)?;
    match run_experiment(&cfg, &registry) {
        Ok(report) => {
            print_summary(&report);
            match out {
                Some(path) => {
                    write_json_atomic(&report, &path)?;
                    println!("report written to {}", path.display());
                }
                None => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
            }
            Ok(())
        }
        Err(e) => {
            if let Some(path) = out {
                let _ = std::fs::remove_file(path);
            }
            Err(e)
        }
    }
}

fn cmd_bench(config: &Path, repeat: usize, cli: &Cli) -> rlslab::Result<()> {
    if repeat == 0 {
        return Err(Error::Config("--repeat must be >= 1".into()));
    }
    let cfg = load_config(config, cli.seed)?;
    let registry = TaskRegistry::with_builtins();
    cfg.validate(&registry)?;
    let mut totals = Vec::with_capacity(repeat);
    let mut runs = Vec::with_capacity(repeat);
    for k in 0..repeat {
        let r = run_experiment(&cfg, &registry)?;
        println!(
            "repeat {}: {:.4}s, accuracy {:.2}%",
            k + 1,
            r.timing.total_seconds,
            100.0 * r.performance.accuracy
        );
        totals.push(r.timing.total_seconds);
        runs.push(r);
    }
    let mean = totals.iter().sum::<f64>() / repeat as f64;
    let min = totals.iter().copied().fold(f64::INFINITY, f64::min);
    println!("mean {mean:.4}s, min {min:.4}s over {repeat} runs");
    if let Some(path) = &cli.output {
        let doc = serde_json::json!({
            "report_version": rlslab::experiment::REPORT_VERSION,
            "name": cfg.name,
            "repeat": repeat,
            "total_seconds": totals,
            "mean_seconds": mean,
            "min_seconds": min,
            "runs": runs,
        });
        write_json_atomic(&doc, path)?;
    }
    Ok(())
}

fn is_bigarray(path: &Path) -> rlslab::Result<bool> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut magic = [0u8; 4];
    Ok(f.read_exact(&mut magic).is_ok() && magic == MAGIC)
}

fn cmd_info(path: &Path, label_col: isize) -> rlslab::Result<()> {
    if is_bigarray(path)? {
        let ba = BigArray::open(path)?;
        println!("bigarray {}", path.display());
        println!("  rows       {}", ba.rows());
        println!("  cols       {}", ba.cols());
        println!("  chunk_rows {}", ba.chunk_rows());
        println!("  chunks     {}", ba.n_chunks());
        return Ok(());
    }
    let format = DataFormat::from_path(path)?;
    let raw = read_dataset(path, format, label_col)?;
    let map = LabelMap::fit(&raw.labels);
    println!("dataset {}", path.display());
    println!("  n {}", raw.x.rows());
    println!("  d {}", raw.x.cols());
    println!("  T {}", map.n_classes());
    for v in &map.values {
        let count = raw.labels.iter().filter(|&&l| l == *v).count();
        println!("  class {v}: {count}");
    }
    Ok(())
}

fn run(cli: &Cli) -> rlslab::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot configure {n} threads: {e}")))?;
    }
    match &cli.command {
        Command::Run { config } => cmd_run(config, cli),
        Command::Bench { config, repeat } => cmd_bench(config, *repeat, cli),
        Command::Info { path, label_col } => cmd_info(path, *label_col),
        Command::Convert {
            input,
            output,
            chunk_rows,
            label_col,
            format,
        } => {
            let format = match format {
                Some(f) => (*f).into(),
                None => DataFormat::from_path(input)?,
            };
            let (rows, cols) = convert_to_bigarray(input, output, *chunk_rows, format, *label_col)?;
            println!("wrote {rows}x{cols} to {}", output.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
