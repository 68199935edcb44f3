//! `rtlasso`: simulate panels, fit them, and run benchmark sweeps.
//!
//! Exit codes: 0 success, 2 configuration, 3 ingestion, 4 solver or stage
//! failure, 5 I/O.

mod bench;
mod error;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use rtlasso::io::{read_dataset, write_dataset, ResponseColumn};
use rtlasso::simulation::{generate, Method, SimDesign};
use rtlasso::{
    lasso_cv, rlasso, run_oracle, run_rtl, run_selection, DatasetKind, LabeledDataset,
    PipelineConfig,
};

use error::CliError;

#[derive(Parser)]
#[command(
    name = "rtlasso",
    version,
    about = "Robust transfer Lasso with corrupted target labels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic target and source panel.
    Simulate(Common),
    /// Fit a target (and optional sources) and write report.json.
    Fit(FitArgs),
    /// Screen sources only and write selection.json.
    Select(DataArgs),
    /// Fit with a known informative source set.
    Oracle(OracleArgs),
    /// Monte-Carlo sweep over designs and methods.
    Bench(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file; every field has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, 0 for all cores.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Method tag; repeatable for `bench`.
    #[arg(long)]
    method: Vec<String>,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct DataArgs {
    #[command(flatten)]
    common: Common,
    /// Target CSV, response in the last column.
    #[arg(long)]
    target: PathBuf,
    /// Source CSV; repeatable.
    #[arg(long)]
    source: Vec<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Indices of the informative sources, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    known: Vec<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(c) => cmd_simulate(&c),
        Command::Fit(a) => cmd_fit(&a.data),
        Command::Select(a) => cmd_select(&a),
        Command::Oracle(a) => cmd_oracle(&a),
        Command::Bench(c) => bench::cmd_bench(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn log(common: &Common, msg: impl AsRef<str>) {
    if !common.quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn pipeline_config(common: &Common) -> Result<PipelineConfig, CliError> {
    let mut config: PipelineConfig = read_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    write_text(dir, name, &(text + "\n"))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(CliError::io(&path))?;
    Ok(path)
}

/// Runs `f` on a pool of `jobs` threads.
fn with_jobs<T>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, CliError>
where
    T: Send,
{
    let pool =
        rtlasso::simulation::thread_pool(jobs).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(pool.install(f))
}

fn read_panel(args: &DataArgs) -> Result<(LabeledDataset, Vec<LabeledDataset>), CliError> {
    let target = read_dataset(
        "target",
        DatasetKind::Target,
        &args.target,
        ResponseColumn::Last,
        None,
    )?;
    let sources = args
        .source
        .iter()
        .enumerate()
        .map(|(j, p)| {
            read_dataset(
                &format!("source_{j}"),
                DatasetKind::Source,
                p,
                ResponseColumn::Last,
                None,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((target, sources))
}

#[derive(Serialize)]
struct Truth<'a> {
    design: &'a SimDesign,
    truth_beta: &'a rtlasso::SparseCoefficients,
    truth_e: &'a rtlasso::CorruptionVector,
    truth_source_betas: &'a [rtlasso::SparseCoefficients],
    source_shifts: &'a [f64],
}

fn cmd_simulate(common: &Common) -> Result<(), CliError> {
    let mut design: SimDesign = read_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        design.seed = seed;
    }
    design
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let inst = generate(&design).map_err(|e| CliError::Config(e.to_string()))?;
    let out = &common.out;
    fs::create_dir_all(out).map_err(CliError::io(out))?;
    let mut files = vec![("target.csv".to_string(), &inst.target)];
    for (j, s) in inst.sources.iter().enumerate() {
        files.push((format!("source_{j}.csv"), s));
    }
    for (name, data) in files {
        let mut buf = Vec::new();
        write_dataset(&mut buf, data).expect("in-memory write");
        write_text(out, &name, std::str::from_utf8(&buf).expect("ascii"))?;
    }
    write_json(
        out,
        "truth.json",
        &Truth {
            design: &inst.design_echo,
            truth_beta: &inst.truth_beta,
            truth_e: &inst.truth_e,
            truth_source_betas: &inst.truth_source_betas,
            source_shifts: &inst.source_shifts,
        },
    )?;
    log(
        common,
        format!(
            "wrote target and {} sources to {}",
            inst.sources.len(),
            out.display()
        ),
    );
    Ok(())
}

fn single_method(common: &Common, default: Method) -> Result<Method, CliError> {
    match common.method.as_slice() {
        [] => Ok(default),
        [m] => m.parse().map_err(CliError::Config),
        _ => Err(CliError::Config("give at most one --method".into())),
    }
}

fn cmd_fit(args: &DataArgs) -> Result<(), CliError> {
    let common = &args.common;
    let config = pipeline_config(common)?;
    let method = single_method(common, Method::Rtl)?;
    let (target, sources) = read_panel(args)?;
    let path = match method {
        Method::Rtl => {
            let report = with_jobs(common.jobs, || run_rtl(&target, &sources, &config))??;
            log(
                common,
                format!(
                    "mode {}, selected {:?}",
                    serde_json::to_string(&report.mode).expect("serializable"),
                    report.selection.selected
                ),
            );
            write_text(
                &common.out,
                "report.json",
                &(report.canonical_json() + "\n"),
            )?
        }
        Method::Lasso | Method::Rlasso => {
            let fit = with_jobs(common.jobs, || {
                if method == Method::Lasso {
                    lasso_cv(&target, config.folds, config.seed, &config.solver)
                } else {
                    rlasso(&target, config.folds, config.seed, &config.solver)
                }
            })??;
            write_json(&common.out, "report.json", &fit)?
        }
        Method::Oracle => {
            return Err(CliError::Config(
                "use the `oracle` command for oracle fits".into(),
            ))
        }
    };
    log(common, format!("wrote {}", path.display()));
    Ok(())
}

fn cmd_select(args: &DataArgs) -> Result<(), CliError> {
    let common = &args.common;
    let config = pipeline_config(common)?;
    let (target, sources) = read_panel(args)?;
    let report = with_jobs(common.jobs, || run_selection(&target, &sources, &config))??;
    log(common, format!("selected {:?}", report.selection.selected));
    let path = write_json(&common.out, "selection.json", &report)?;
    log(common, format!("wrote {}", path.display()));
    Ok(())
}

fn cmd_oracle(args: &OracleArgs) -> Result<(), CliError> {
    let common = &args.data.common;
    let config = pipeline_config(common)?;
    let (target, sources) = read_panel(&args.data)?;
    let report = with_jobs(common.jobs, || {
        run_oracle(&target, &sources, &args.known, None, &config)
    })??;
    let path = write_text(
        &common.out,
        "report.json",
        &(report.canonical_json() + "\n"),
    )?;
    log(common, format!("wrote {}", path.display()));
    Ok(())
}
