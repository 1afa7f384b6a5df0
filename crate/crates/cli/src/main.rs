//! Command-line front end: fit, cross-validate, predict, recompute marginal
//! effects and generate synthetic data.

mod tables;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use alphareg::io::{
    load_covariates, margins_from_document, predict_from_document, run_cv, run_fit,
    DocumentMargins, ModelKind, ResultDocument, SeKind, SpatialMode, SyntheticSpec,
};
use alphareg::{generate_synthetic, load_dataset, DatasetSpec, Error, ErrorKind, RunConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

type Result<T> = std::result::Result<T, Error>;

#[derive(Parser)]
#[command(name = "alphareg", version, about = "Regression for compositional data via the α-transformation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select hyper-parameters when unset, fit, and write a result document.
    Fit(FitArgs),
    /// Cross-validation scores over the configured grid.
    Cv(FitArgs),
    /// Predicted compositions for new rows from a result document.
    Predict(PredictArgs),
    /// Per-observation marginal effects of one covariate from a result document.
    Margins(MarginsArgs),
    /// Write a synthetic dataset and its ground truth.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset description (JSON with path and column names).
    #[arg(long, conflicts_with_all = ["data", "composition", "covariates", "lat", "lon"])]
    spec: Option<PathBuf>,
    /// CSV file with a header row.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Composition columns, comma separated; the first is the reference.
    #[arg(long, value_delimiter = ',')]
    composition: Vec<String>,
    /// Covariate columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Latitude column (degrees).
    #[arg(long, requires = "lon")]
    lat: Option<String>,
    /// Longitude column (degrees).
    #[arg(long, requires = "lat")]
    lon: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Alpha,
    Slx,
    Gwar,
}

#[derive(Clone, Copy, ValueEnum)]
enum SeArg {
    None,
    Sandwich,
    Spherical,
    Bootstrap,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON); flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Fixed α; cross-validated when absent.
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    /// Fixed neighbour count (slx).
    #[arg(long)]
    k: Option<usize>,
    /// Fixed bandwidth (gwar), in squared chordal units.
    #[arg(long)]
    h: Option<f64>,
    /// α grid, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    alphas: Vec<f64>,
    /// Neighbour-count grid, comma separated.
    #[arg(long, value_delimiter = ',')]
    ks: Vec<usize>,
    /// Bandwidth grid, comma separated.
    #[arg(long, value_delimiter = ',')]
    hs: Vec<f64>,
    /// Standard errors for the coefficients.
    #[arg(long, value_enum)]
    se: Option<SeArg>,
    /// Bootstrap replicates.
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Levenberg-Marquardt iteration limit.
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Worker threads; all cores by default.
    #[arg(long, env = "ALPHAREG_THREADS")]
    threads: Option<usize>,
}

#[derive(Args)]
struct OutputArgs {
    /// Output file; standard output when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Also write the result tables as CSV files into this directory.
    #[arg(long)]
    tables: Option<PathBuf>,
    /// Record wall-clock time in the result document.
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct ModelSource {
    /// Result document written by `fit`.
    #[arg(long)]
    model: PathBuf,
    /// Training CSV; defaults to the dataset recorded in the document.
    #[arg(long)]
    training: Option<PathBuf>,
    /// Worker threads; all cores by default.
    #[arg(long, env = "ALPHAREG_THREADS")]
    threads: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    source: ModelSource,
    /// CSV with the covariate (and, for spatial models, coordinate) columns.
    #[arg(long)]
    data: PathBuf,
    /// Output CSV; standard output when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct MarginsArgs {
    #[command(flatten)]
    source: ModelSource,
    /// Covariate name or 1-based index.
    #[arg(long)]
    covariate: String,
    /// Output CSV; standard output when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpatialArg {
    None,
    Slx,
    TwoCluster,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    n: usize,
    /// Number of components D.
    #[arg(long, default_value_t = 3)]
    parts: usize,
    /// Number of covariates p.
    #[arg(long, default_value_t = 2)]
    covariates: usize,
    #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
    alpha: f64,
    /// Gaussian noise scale in transformed space.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, value_enum, default_value = "none")]
    spatial: SpatialArg,
    /// Neighbour count for `--spatial slx`.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// File stem: writes `<stem>.csv`, `<stem>.truth.json` and `<stem>.spec.json`.
    #[arg(long, default_value = "synthetic")]
    stem: String,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidOptions(msg.into())
}

fn init_threads(threads: Option<usize>) -> Result<()> {
    if let Some(t) = threads {
        if t == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

impl DataArgs {
    fn resolve(&self) -> Result<DatasetSpec> {
        if let Some(p) = &self.spec {
            return read_json(p);
        }
        let path = self.data.clone().ok_or_else(|| usage("either --spec or --data is required"))?;
        if self.composition.is_empty() || self.covariates.is_empty() {
            return Err(usage("--composition and --covariates are required with --data"));
        }
        Ok(DatasetSpec {
            path,
            composition_columns: self.composition.clone(),
            covariate_columns: self.covariates.clone(),
            lat_column: self.lat.clone(),
            lon_column: self.lon.clone(),
        })
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c: RunConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => RunConfig::default(),
        };
        if let Some(m) = self.model {
            c.model = match m {
                ModelArg::Alpha => ModelKind::Alpha,
                ModelArg::Slx => ModelKind::Slx,
                ModelArg::Gwar => ModelKind::Gwar,
            };
        }
        c.alpha = self.alpha.or(c.alpha);
        c.k = self.k.or(c.k);
        c.h = self.h.or(c.h);
        if !self.alphas.is_empty() {
            c.grid.alphas = self.alphas.clone();
        }
        if !self.ks.is_empty() {
            c.grid.ks = self.ks.clone();
        }
        if !self.hs.is_empty() {
            c.grid.hs = self.hs.clone();
        }
        if let Some(s) = self.se {
            c.standard_errors = match s {
                SeArg::None => SeKind::None,
                SeArg::Sandwich => SeKind::Sandwich,
                SeArg::Spherical => SeKind::Spherical,
                SeArg::Bootstrap => SeKind::Bootstrap,
            };
        }
        c.bootstrap_replicates = self.replicates.unwrap_or(c.bootstrap_replicates);
        c.seed = self.seed.unwrap_or(c.seed);
        c.solver.max_iterations = self.max_iterations.unwrap_or(c.solver.max_iterations);
        c.threads = self.threads.or(c.threads);
        if c.model != ModelKind::Alpha && c.alpha.is_none() && c.grid.alphas.is_empty() {
            return Err(usage("empty alpha grid"));
        }
        Ok(c)
    }
}

fn fit(args: &FitArgs) -> Result<()> {
    let spec = args.data.resolve()?;
    let config = args.config.resolve()?;
    init_threads(config.threads)?;
    let start = Instant::now();
    let data = load_dataset(&spec)?;
    let mut doc = run_fit(&config, &data, Some(&spec))?;
    if args.output.timing {
        doc.timing_seconds = Some(start.elapsed().as_secs_f64());
    }
    if let Some(dir) = &args.output.tables {
        tables::write_fit_tables(dir, &doc)?;
    }
    write_out(args.output.output.as_deref(), &doc.to_json()?)
}

fn cv(args: &FitArgs) -> Result<()> {
    let spec = args.data.resolve()?;
    let config = args.config.resolve()?;
    init_threads(config.threads)?;
    let start = Instant::now();
    let data = load_dataset(&spec)?;
    let result = run_cv(&config, &data)?;
    let mut value = serde_json::to_value(&result)?;
    if args.output.timing {
        value["timing_seconds"] = start.elapsed().as_secs_f64().into();
    }
    if let Some(dir) = &args.output.tables {
        fs::create_dir_all(dir)?;
        tables::write_cv_table(&dir.join("cv.csv"), &result)?;
    }
    write_out(args.output.output.as_deref(), &(serde_json::to_string_pretty(&value)? + "\n"))
}

fn load_source(source: &ModelSource) -> Result<(ResultDocument, DatasetSpec, alphareg::Dataset)> {
    init_threads(source.threads)?;
    let doc: ResultDocument = read_json(&source.model)?;
    let mut spec = doc
        .dataset
        .clone()
        .ok_or_else(|| usage("result document records no dataset; pass --training"))?;
    if let Some(p) = &source.training {
        spec.path = p.clone();
    }
    let training = load_dataset(&spec)?;
    Ok((doc, spec, training))
}

fn predict(args: &PredictArgs) -> Result<()> {
    let (doc, spec, training) = load_source(&args.source)?;
    let new_spec = DatasetSpec { path: args.data.clone(), ..spec };
    let (x, coords) = if doc.model == ModelKind::Alpha {
        let plain = DatasetSpec { lat_column: None, lon_column: None, ..new_spec };
        load_covariates(&plain)?
    } else {
        load_covariates(&new_spec)?
    };
    let pred = predict_from_document(&doc, &training, &x, coords.as_ref())?;
    let mut w = tables::writer(args.output.as_deref())?;
    w.write_record(&doc.composition_names)?;
    for i in 0..pred.n() {
        w.write_record(pred.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn covariate_index(names: &[String], arg: &str) -> Result<usize> {
    if let Some(i) = names.iter().position(|n| n == arg) {
        return Ok(i + 1);
    }
    match arg.parse::<usize>() {
        Ok(k) if (1..=names.len()).contains(&k) => Ok(k),
        _ => Err(usage(format!("unknown covariate `{arg}`"))),
    }
}

fn margins(args: &MarginsArgs) -> Result<()> {
    let (doc, _, training) = load_source(&args.source)?;
    let k = covariate_index(&doc.covariate_names, &args.covariate)?;
    let m = margins_from_document(&doc, &training, k)?;
    let mut w = tables::writer(args.output.as_deref())?;
    let mut header = vec!["row".to_string(), "effect".to_string()];
    header.extend(doc.composition_names.iter().cloned());
    w.write_record(&header)?;
    let mut rows = |label: &str, t: &alphareg::MarginalEffectsTable| -> Result<()> {
        for i in 0..t.values.nrows() {
            let mut rec = vec![i.to_string(), label.to_string()];
            rec.extend(t.values.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        Ok(())
    };
    match &m {
        DocumentMargins::Plain(t) => rows("marginal", t)?,
        DocumentMargins::Local(t) => rows("local", t)?,
        DocumentMargins::Slx(e) => {
            rows("direct", &e.direct)?;
            rows("indirect", &e.indirect)?;
            rows("total", &e.total)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn generate(args: &GenerateArgs) -> Result<()> {
    let spatial = match args.spatial {
        SpatialArg::None => SpatialMode::None,
        SpatialArg::Slx => SpatialMode::Slx { k: args.k },
        SpatialArg::TwoCluster => SpatialMode::TwoCluster,
    };
    let data = generate_synthetic(&SyntheticSpec {
        n: args.n,
        parts: args.parts,
        covariates: args.covariates,
        alpha: args.alpha,
        noise_scale: args.noise,
        spatial,
        seed: args.seed,
    })?;
    fs::create_dir_all(&args.out_dir)?;
    let (csv_path, truth_path, spec) = data.write(&args.out_dir, &args.stem)?;
    let spec_path = args.out_dir.join(format!("{}.spec.json", args.stem));
    fs::write(&spec_path, serde_json::to_string_pretty(&spec)? + "\n")?;
    let summary = serde_json::json!({
        "data": csv_path,
        "truth": truth_path,
        "spec": spec_path,
    });
    write_out(None, &(serde_json::to_string_pretty(&summary)? + "\n"))
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numerical => 3,
    }
}

fn broken_pipe(e: &Error) -> bool {
    let io = match e {
        Error::Io(io) => Some(io),
        Error::Csv(c) => match c.kind() {
            csv::ErrorKind::Io(io) => Some(io),
            _ => None,
        },
        _ => None,
    };
    io.is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Fit(a) => fit(a),
        Command::Cv(a) => cv(a),
        Command::Predict(a) => predict(a),
        Command::Margins(a) => margins(a),
        Command::Generate(a) => generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let kind = match e.kind() {
                ErrorKind::Usage => "usage",
                ErrorKind::Data => "data",
                ErrorKind::Numerical => "numerical",
            };
            eprintln!("{}", serde_json::json!({ "error": kind, "message": e.to_string() }));
            ExitCode::from(code)
        }
    }
}
