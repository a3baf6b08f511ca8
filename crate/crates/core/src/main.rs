use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use naim::data::{load_csv, Preprocessor, SchemaSpec};
use naim::experiment::{inject, pct, run_grid, train_one, ExperimentConfig, GridOptions, Method, TrainedModel};
use naim::impute::{apply_knn, apply_mean, fit_knn, fit_mean, DEFAULT_K};
use naim::io::write_atomic;
use naim::train::{positive_scores, EpochRecord};
use naim::Error;

/// Like `println!`, but a closed pipe ends output quietly instead of panicking.
macro_rules! out {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

#[derive(Parser)]
#[command(name = "naim", version, about = "Transformer for tabular data with missing values")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on one fold and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a CSV file.
    Evaluate(EvaluateArgs),
    /// Run a cross-validated grid over missing rates and methods.
    Grid(GridArgs),
    /// Fit an imputer on a CSV file and write the preprocessed, imputed table.
    Impute(ImputeArgs),
    /// Compare every gradient against central finite differences.
    Gradcheck,
}

#[derive(Args)]
struct Overrides {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    /// Print per-epoch progress.
    #[arg(long, short)]
    verbose: bool,
}

impl Overrides {
    fn load(&self) -> naim::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.max_epochs {
            cfg.train.max_epochs = e;
        }
        if let Some(f) = self.folds {
            cfg.folds = f;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Overrides,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "naim")]
    method: String,
    /// Training missing fraction.
    #[arg(long, default_value_t = 0.0)]
    train_missing: f64,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Also write the epoch history here.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV laid out like the training data.
    #[arg(long)]
    data: PathBuf,
    /// Test missing fraction injected before scoring.
    #[arg(long, default_value_t = 0.0)]
    test_missing: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write per-row scores here.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    common: Overrides,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Comma-separated method ids.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Comma-separated training missing fractions.
    #[arg(long, value_delimiter = ',')]
    train_missing: Option<Vec<f64>>,
    /// Comma-separated test missing fractions.
    #[arg(long, value_delimiter = ',')]
    test_missing: Option<Vec<f64>>,
}

#[derive(Args)]
struct ImputeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// `mean` or `knn`.
    #[arg(long, default_value = "mean")]
    method: String,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    /// Missing fraction injected before imputing.
    #[arg(long, default_value_t = 0.0)]
    missing: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn progress(verbose: bool) -> impl FnMut(&EpochRecord) {
    move |r| {
        if verbose {
            eprintln!("epoch {:>4} train {:.5} val {:.5} lr {:e}", r.epoch, r.train_loss, r.val_loss, r.lr);
        }
    }
}

fn train(a: TrainArgs) -> naim::Result<()> {
    let cfg = a.common.load()?;
    let method = Method::parse(&a.method)?;
    let model = train_one(&cfg, method, a.train_missing, a.fold, &mut progress(a.common.verbose))?;
    model.save(&a.out)?;
    if let Some(h) = &a.history {
        model.history.write_csv(h)?;
    }
    let h = &model.history;
    out!("trained {} epochs, best epoch {}, checkpoint {}", h.epochs.len(), h.best_epoch, a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> naim::Result<()> {
    let model = TrainedModel::load(&a.checkpoint)?;
    let raw = load_csv(&a.data, &model.schema)?;
    let raw = inject(raw, a.test_missing, a.seed)?;
    let scored = model.score(&raw)?;
    out!("method {} rows {} auc {:.6} loss {:.6}", model.method.id(), scored.labels.len(), scored.auc, scored.loss);
    if let Some(p) = &a.predictions {
        let mut out = String::from("row,label,score\n");
        for (i, (l, s)) in scored.labels.iter().zip(positive_scores(&scored.probs)).enumerate() {
            let _ = writeln!(out, "{i},{l},{s}");
        }
        write_atomic(p, out.as_bytes())?;
    }
    Ok(())
}

fn grid(a: GridArgs) -> naim::Result<()> {
    let mut cfg = a.common.load()?;
    if let Some(m) = &a.methods {
        cfg.methods = m.iter().map(|s| Method::parse(s)).collect::<naim::Result<_>>()?;
    }
    if let Some(t) = a.train_missing {
        cfg.train_missing = t;
    }
    if let Some(t) = a.test_missing {
        cfg.test_missing = t;
    }
    let opts = GridOptions { jobs: a.jobs, out: Some(a.out.clone()), verbose: a.common.verbose };
    let report = run_grid(&cfg, &opts)?;
    let failed = report.cells.iter().filter(|c| c.error.is_some()).count();
    match report.grid_text() {
        Ok(t) => drop(write!(std::io::stdout(), "{t}")),
        Err(e) => eprintln!("no table: {e}"),
    }
    out!("{} cells, {failed} failed, outputs in {}", report.cells.len(), a.out.display());
    Ok(())
}

fn impute(a: ImputeArgs) -> naim::Result<()> {
    let spec = SchemaSpec::load(&a.schema)?;
    let raw = inject(load_csv(&a.data, &spec)?, a.missing, a.seed)?;
    let pre = Preprocessor::fit(&raw);
    let data = pre.apply(&raw)?;
    let filled = match a.method.as_str() {
        "mean" => apply_mean(&fit_mean(&data), &data)?,
        "knn" => apply_knn(&fit_knn(&data, a.k)?, &data)?,
        other => return Err(Error::Config(format!("unknown imputer {other:?}, expected mean or knn"))),
    };
    let mut out = pre.names.join(",");
    let _ = writeln!(out, ",{}", pre.label);
    for i in 0..filled.n_samples() {
        let row: Vec<String> = filled.row_values(i).iter().map(f64::to_string).collect();
        let _ = writeln!(out, "{},{}", row.join(","), pre.classes[filled.labels()[i]]);
    }
    write_atomic(&a.out, out.as_bytes())?;
    out!(
        "imputed {} of {} cells ({}% missing) into {}",
        data.missing_count(),
        data.present().len(),
        pct(data.missing_count() as f64 / data.present().len() as f64),
        a.out.display()
    );
    Ok(())
}

fn gradcheck() -> ExitCode {
    let results = match naim::gradcheck::run_suite() {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    let mut ok = true;
    for r in &results {
        ok &= r.passed();
        out!("{:<4} {:<44} {:.3e}", if r.passed() { "ok" } else { "FAIL" }, r.name, r.max_relative_error);
    }
    if ok {
        out!("all {} checks below {:e}", results.len(), naim::gradcheck::TOLERANCE);
        ExitCode::SUCCESS
    } else {
        ExitCode::from(3)
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_data_error() { 2 } else { 3 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Grid(a) => grid(a),
        Command::Impute(a) => impute(a),
        Command::Gradcheck => return gradcheck(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
