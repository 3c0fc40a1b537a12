//! `pcf`: fit, evaluate, score and export parametrized convex functions, and
//! run the bundled experiments.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pcf_core::data::format_f64;
use pcf_core::experiments::{run_experiment, Scale};
use pcf_core::export::{
    emit_code, load_model, save_model, to_expr_graph, ExportMode, Template, CVXPY_TEMPLATE,
};
use pcf_core::loss::error_rate_of;
use pcf_core::selection::test_metrics;
use pcf_core::{cross_validate, fit, r2_score, rmse, Dataset, PcfError};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "pcf", version, about = "Parametrized convex function fitting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model and print the fit report as JSON.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// JSON run configuration; defaults everywhere when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the model file.
        #[arg(long)]
        out: PathBuf,
        /// Held-out data; otherwise a seeded split of `--data` is used.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Overrides the training seed of the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print predictions for every row as CSV.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Print one score of the model on labelled data.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
    },
    /// Write the model as an expression graph or as generated code.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "symbolic")]
        mode: Mode,
        /// Comma-separated parameter value for `--mode bound`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        theta: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value = "graph")]
        format: Format,
        /// Custom code template (implies code output).
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a bundled experiment and print its metrics.
    Experiment {
        name: String,
        #[arg(long, default_value = "desk")]
        scale: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for metrics, model and CSV artifacts.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Metric {
    R2,
    Rmse,
    ErrorRate,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Symbolic,
    Bound,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    /// Expression graph as JSON.
    Graph,
    /// Python source building a CVXPY expression.
    Cvxpy,
}

/// Exit status 1 for bad input, 2 when a valid request fails at run time.
fn exit_code(e: &PcfError) -> u8 {
    match e {
        PcfError::FitFailed(_)
        | PcfError::SelectionFailed
        | PcfError::NonFiniteIntermediate { .. }
        | PcfError::NotCertified(_)
        | PcfError::Bracket(_) => 2,
        _ => 1,
    }
}

fn read_data(path: &Path) -> pcf_core::Result<Dataset> {
    Dataset::read_csv(path).map_err(|e| match e {
        PcfError::DataFile(m) => PcfError::DataFile(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn write_stdout(text: &str) -> pcf_core::Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn cmd_fit(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    test: Option<&Path>,
    seed: Option<u64>,
) -> pcf_core::Result<()> {
    let all = read_data(data)?;
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.cv.seed = s;
    }
    let (train, held) = match test {
        Some(p) => (all, Some(read_data(p)?)),
        None if cfg.test_fraction > 0.0 => {
            let (tr, te) = all.split(cfg.test_fraction, cfg.train.seed);
            (tr, (!te.is_empty()).then_some(te))
        }
        None => (all, None),
    };
    if train.d == 0 {
        return Err(PcfError::InvalidInput(
            "training data has no y columns".into(),
        ));
    }
    let arch = cfg.architecture.build(train.n, train.p, train.d)?;
    let reg = cfg.regularization.build(train.n, train.d)?;
    let (model, mut report) = if cfg.cv.enabled {
        cross_validate(&arch, &train, &cfg.loss, &reg, &cfg.cv, &cfg.train)?
    } else {
        fit(&arch, &train, &cfg.loss, &reg, &cfg.train)?
    };
    if let Some(t) = &held {
        report.test = Some(test_metrics(&model, t, &cfg.loss)?);
    }
    save_model(&model, out)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write_stdout(&format!("{text}\n"))
}

fn cmd_eval(model: &Path, data: &Path) -> pcf_core::Result<()> {
    let model = load_model(model)?;
    let data = read_data(data)?;
    let pred = model.predict(&data)?;
    let d = model.arch.d;
    let mut text = (0..d)
        .map(|i| format!("pred{i}"))
        .collect::<Vec<_>>()
        .join(",");
    text.push('\n');
    for row in pred.chunks(d) {
        let cells: Vec<String> = row.iter().map(|v| format_f64(*v)).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    write_stdout(&text)
}

fn cmd_score(model: &Path, data: &Path, metric: Metric) -> pcf_core::Result<()> {
    let model = load_model(model)?;
    let data = read_data(data)?;
    if data.d != model.arch.d {
        return Err(PcfError::DimensionMismatch {
            what: "y columns",
            expected: model.arch.d,
            got: data.d,
        });
    }
    let pred = model.predict(&data)?;
    let y = data.y_flat();
    let value = match metric {
        Metric::R2 => r2_score(&pred, y, data.d)?,
        Metric::Rmse => rmse(&pred, y)?,
        Metric::ErrorRate => error_rate_of(&pred, y)?,
    };
    write_stdout(&format!("{}\n", format_f64(value)))
}

fn cmd_export(
    model: &Path,
    mode: Mode,
    theta: Option<Vec<f64>>,
    format: Format,
    template: Option<&Path>,
    out: &Path,
) -> pcf_core::Result<()> {
    let model = load_model(model)?;
    let mode = match (mode, theta) {
        (Mode::Symbolic, None) => ExportMode::SymbolicTheta,
        (Mode::Symbolic, Some(_)) => {
            return Err(PcfError::InvalidInput(
                "--theta only applies to --mode bound".into(),
            ))
        }
        (Mode::Bound, Some(theta)) => ExportMode::BoundTheta { theta },
        (Mode::Bound, None) => {
            return Err(PcfError::InvalidInput("--mode bound needs --theta".into()))
        }
    };
    let graph = to_expr_graph(&model, &mode)?;
    graph.certify()?;
    let text = match (format, template) {
        (Format::Graph, None) => graph.to_json(),
        (_, Some(p)) => {
            let t = std::fs::read_to_string(p)
                .map_err(|e| PcfError::Io(format!("{}: {e}", p.display())))?;
            emit_code(&graph, &Template::parse(&t)?)?
        }
        (Format::Cvxpy, None) => emit_code(&graph, &Template::parse(CVXPY_TEMPLATE)?)?,
    };
    std::fs::write(out, text)?;
    Ok(())
}

fn cmd_experiment(name: &str, scale: &str, seed: u64, out: Option<&Path>) -> pcf_core::Result<()> {
    let scale: Scale = scale.parse()?;
    let doc = run_experiment(name, scale, seed, out)?;
    let text = serde_json::to_string_pretty(&doc).expect("metrics serialize");
    write_stdout(&format!("{text}\n"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit {
            data,
            config,
            out,
            test,
            seed,
        } => cmd_fit(&data, config.as_deref(), &out, test.as_deref(), seed),
        Command::Eval { model, data } => cmd_eval(&model, &data),
        Command::Score {
            model,
            data,
            metric,
        } => cmd_score(&model, &data, metric),
        Command::Export {
            model,
            mode,
            theta,
            format,
            template,
            out,
        } => cmd_export(&model, mode, theta, format, template.as_deref(), &out),
        Command::Experiment {
            name,
            scale,
            seed,
            out,
        } => cmd_experiment(&name, &scale, seed, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
