use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use siw_core::datahub::{generate_corpus, save_dataset, DataFormat};
use siw_core::experiment::{
    analyze_run, evaluate_only, g_il_table, method_file_stem, run_experiment, run_seeds, summary_csv, AnalysisOptions,
    Manifest,
};
use siw_core::{Error, ExperimentConfig, Method, MetricsReport, SyntheticSpec};

#[derive(Parser)]
#[command(name = "siw", version, about = "Memoryless class-incremental learning experiments")]
struct Cli {
    /// Log filter, e.g. `info` or `siw_core=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/test corpus.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        train_per_class: usize,
        #[arg(long, default_value_t = 50)]
        test_per_class: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 1.0)]
        spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Train the chains and evaluate the grid.
    Run {
        /// Experiment file; the desk default is used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Comma-separated seeds; each gets its own run directory.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Comma-separated method names replacing the configured grid.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<Method>,
    },
    /// Re-score a stored run, optionally with extra grid entries.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_delimiter = ',')]
        grid: Vec<Method>,
        /// Defaults to `<run>/evaluate`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// G_IL column of a method-by-dataset accuracy CSV.
    Gil {
        #[arg(long)]
        table: PathBuf,
    },
    /// Magnitude, similarity and weight-distribution plot data.
    Analyze {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to `<run>/analysis`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exemplar memory fractions for the bounded-memory similarity curves, e.g. `0.01,0.02`.
        #[arg(long, value_delimiter = ',')]
        memory: Vec<f64>,
    },
    /// Print the stored reports of a run as one table.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Csv)]
        format: ReportFormat,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Packed,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Json,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::Integrity(_) => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn write(path: &Path, text: &str) -> siw_core::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_reports(reports: &[MetricsReport], grid: &[Method], out: &Path) -> siw_core::Result<()> {
    for (m, r) in grid.iter().zip(reports) {
        write(&out.join(format!("{}.json", method_file_stem(m))), &r.to_json())?;
    }
    write(&out.join("summary.csv"), &summary_csv(reports))
}

fn run(cli: Cli) -> siw_core::Result<()> {
    match cli.command {
        Command::Generate {
            out,
            classes,
            train_per_class,
            test_per_class,
            dim,
            spread,
            seed,
            format,
        } => {
            let corpus = generate_corpus(
                &SyntheticSpec {
                    num_classes: classes,
                    samples_per_class: train_per_class,
                    dim,
                    spread,
                    seed,
                },
                test_per_class,
            )?;
            fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
            let (format, ext) = match format {
                Format::Csv => (DataFormat::Csv, "csv"),
                Format::Packed => (DataFormat::Packed, "bin"),
            };
            save_dataset(&corpus.train, &out.join(format!("train.{ext}")), format)?;
            save_dataset(&corpus.test, &out.join(format!("test.{ext}")), format)?;
            println!(
                "wrote {} train and {} test samples to {}",
                corpus.train.len(),
                corpus.test.len(),
                out.display()
            );
        }
        Command::Run {
            config,
            out,
            seed,
            seeds,
            grid,
        } => {
            let mut cfg = match &config {
                Some(path) => ExperimentConfig::load(path)?,
                None => ExperimentConfig::desk(0),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if !grid.is_empty() {
                cfg.evaluation.grid = grid;
            }
            cfg.validate()?;
            let out = out
                .or_else(|| cfg.output.clone())
                .ok_or_else(|| Error::Config("no output directory: pass --out or set `output`".into()))?;
            if seeds.is_empty() {
                let artifacts = run_experiment(&cfg, &out)?;
                print!("{}", summary_csv(&artifacts.reports));
            } else {
                let stats = run_seeds(&cfg, &seeds, &out)?;
                println!("method,seeds,top1");
                for s in stats {
                    println!("{},{},{:.2} ± {:.2}", s.method, s.seeds, s.mean_top1, s.std_top1);
                }
            }
        }
        Command::Evaluate { run, grid, out } => {
            let reports = evaluate_only(&run, &grid)?;
            let methods: Vec<Method> = reports
                .iter()
                .map(|r| r.method.parse())
                .collect::<siw_core::Result<_>>()?;
            let out = out.unwrap_or_else(|| run.join("evaluate"));
            write_reports(&reports, &methods, &out)?;
            print!("{}", summary_csv(&reports));
        }
        Command::Gil { table } => {
            let text = fs::read_to_string(&table).map_err(|e| io_error(&table, e))?;
            println!("method,G_IL");
            for (name, g) in g_il_table(&text)? {
                println!("{name},{g:.2}");
            }
        }
        Command::Analyze { run, out, memory } => {
            let out = out.unwrap_or_else(|| run.join("analysis"));
            let report = analyze_run(
                &run,
                &out,
                &AnalysisOptions {
                    memory_fractions: memory,
                },
            )?;
            let last = report.magnitude_raw.states.last();
            if let Some(s) = last {
                println!(
                    "last state raw magnitude: new {:.4}, past {}",
                    s.new_mean,
                    s.past_mean.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
                );
            }
            println!("plot data written to {}", out.display());
        }
        Command::Report { run, format } => {
            let manifest = Manifest::load(&run)?;
            manifest.verify(&run)?;
            let cfg = ExperimentConfig::load(&run.join("config.toml"))?;
            let reports = cfg
                .evaluation
                .grid
                .iter()
                .map(|m| {
                    let path = run.join(format!("reports/{}.json", method_file_stem(m)));
                    MetricsReport::from_json(&fs::read_to_string(&path).map_err(|e| io_error(&path, e))?)
                })
                .collect::<siw_core::Result<Vec<_>>>()?;
            match format {
                ReportFormat::Csv => print!("{}", summary_csv(&reports)),
                ReportFormat::Json => {
                    println!("{}", serde_json::to_string_pretty(&reports).expect("reports serialize"))
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
