use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use markov_conformal::conformal::{DEFAULT_ENUMERATION_CAP, DEFAULT_MAX_PERMUTATIONS};
use markov_conformal::evalsim::{
    forward_forecast, run_backtest, run_simulation_study, synthetic_corpus,
    write_composition_csv, write_membership_csv, CoverageReport, ExperimentGrid, Method,
    PredictorSettings,
};
use markov_conformal::ingest::{
    clean_corpus, conflict_space, derive_population_matrix, label_states, read_fatalities_file,
    read_states_file, write_exclusions, write_states, CleaningConfig, LabeledSeries, YearMonth,
};
use markov_conformal::{
    ConformalConfig, Error, InitialDistribution, Result, ScoreMode, State, StateSpace,
    TransitionMatrix,
};

use crate::manifest::{replayable_args, RunManifest};
use crate::matrix_file::{parse_distribution, read_matrix};

pub enum Failure {
    Usage(clap::Error),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "mcforecast", version, about, args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Label fatality counts with conflict states and apply the cleaning rules.
    Ingest(IngestArgs),
    /// Prediction sets for one country's next months.
    Forecast(ForecastArgs),
    /// Draw a synthetic state corpus from a transition matrix.
    Simulate(SimulateArgs),
    /// Monte Carlo coverage study against a known chain.
    Reliability(ReliabilityArgs),
    /// Coverage of forecasts made at a cutoff month on a state corpus.
    Backtest(BacktestArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Master seed; drawn and recorded when omitted.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on it).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Fatality CSV: country_id,year,month,fatalities
    input: PathBuf,
    #[arg(long, default_value_t = 5)]
    min_nonpeace: usize,
    #[arg(long, default_value_t = 0.99)]
    max_peace_proportion: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Cp,
    Like,
    LikeRand,
    All,
}

fn expand_methods(args: &[MethodArg]) -> Vec<Method> {
    let mut out = Vec::new();
    for a in args {
        match a {
            MethodArg::Cp => out.push(Method::Conformal),
            MethodArg::Like => out.push(Method::Likelihood),
            MethodArg::LikeRand => out.push(Method::LikelihoodRandomized),
            MethodArg::All => out.extend(Method::ALL),
        }
    }
    out.sort();
    out.dedup();
    out
}

#[derive(Args, Debug)]
struct ConformalArgs {
    /// Permutations sampled per candidate when D! exceeds it.
    #[arg(long, default_value_t = DEFAULT_MAX_PERMUTATIONS)]
    max_perms: usize,
    #[arg(long, default_value_t = ScoreMode::OneStep)]
    score_mode: ScoreMode,
    /// Append this state (1-based) after each candidate; bare flag means 1.
    #[arg(long, num_args = 0..=1, require_equals = true, default_missing_value = "1")]
    plus_one: Option<usize>,
    /// Largest candidate universe m^T1 that may be enumerated.
    #[arg(long, default_value_t = DEFAULT_ENUMERATION_CAP)]
    enumeration_cap: u64,
}

impl ConformalArgs {
    fn settings(&self, space: StateSpace) -> Result<PredictorSettings> {
        let plus_one = match self.plus_one {
            None => None,
            Some(s) if (1..=space.size()).contains(&s) => Some((s - 1) as State),
            Some(s) => {
                return Err(Error::InvalidInput(format!(
                    "--plus-one state {s} outside 1..={}",
                    space.size()
                )))
            }
        };
        Ok(PredictorSettings {
            max_permutations: self.max_perms,
            score_mode: self.score_mode,
            plus_one,
            enumeration_cap: self.enumeration_cap,
        })
    }
}

#[derive(Args, Debug)]
struct ForecastArgs {
    /// State CSV: country_id,year,month,state
    states: PathBuf,
    #[arg(long)]
    country: String,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 6)]
    horizon: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "all")]
    method: Vec<MethodArg>,
    #[command(flatten)]
    conformal: ConformalArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false, id = "model")]
struct ModelSource {
    /// Transition matrix file, one row per line.
    #[arg(long)]
    true_matrix: Option<PathBuf>,
    /// Average the per-country estimates of this state CSV.
    #[arg(long)]
    derive_from: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[command(flatten)]
    source: ModelSource,
    /// Initial distribution, comma-separated; uniform when omitted.
    #[arg(long)]
    initial: Option<String>,
}

struct Model {
    p: TransitionMatrix,
    init: InitialDistribution,
    derived: bool,
}

impl ModelArgs {
    fn load(&self, manifest: &mut RunManifest) -> Result<Model> {
        let (p, derived) = if let Some(path) = &self.source.true_matrix {
            manifest.inputs.push(path.display().to_string());
            (read_matrix(path)?, false)
        } else {
            let path = self.source.derive_from.as_ref().expect("clap group is required");
            manifest.inputs.push(path.display().to_string());
            let (p, _) = derive_population_matrix(&read_states_file(path)?)?;
            (p, true)
        };
        let init = match &self.initial {
            None => InitialDistribution::uniform(p.size()),
            Some(text) => {
                let probs = parse_distribution(text)?;
                if probs.len() != p.size() {
                    return Err(Error::InvalidInput(format!(
                        "--initial has {} entries, matrix has {} states",
                        probs.len(),
                        p.size()
                    )));
                }
                InitialDistribution::new(probs)?
            }
        };
        if derived {
            manifest.derived_matrix = Some((0..p.size()).map(|i| p.row(i).to_vec()).collect());
        }
        Ok(Model { p, init, derived })
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 86)]
    countries: usize,
    /// Months per country.
    #[arg(long, default_value_t = 427)]
    length: usize,
    /// First month, YYYY-MM.
    #[arg(long, default_value = "1990-01")]
    start: YearMonth,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct LevelArgs {
    /// Forecast horizons T1.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    horizons: Vec<usize>,
    /// Target coverages 1 - alpha.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0.5,0.55,0.6,0.65,0.7,0.75,0.8,0.85,0.9,0.95,1"
    )]
    levels: Vec<f64>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "all")]
    methods: Vec<MethodArg>,
}

#[derive(Args, Debug)]
struct ReliabilityArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Calibration length T.
    #[arg(long, default_value_t = 200)]
    calibration_length: usize,
    #[arg(long, default_value_t = 500)]
    replications: usize,
    #[command(flatten)]
    levels: LevelArgs,
    #[command(flatten)]
    conformal: ConformalArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct BacktestArgs {
    /// State CSV: country_id,year,month,state
    states: PathBuf,
    /// Last calibration month, YYYY-MM.
    #[arg(long)]
    cutoff: YearMonth,
    #[command(flatten)]
    levels: LevelArgs,
    #[command(flatten)]
    conformal: ConformalArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    manifest: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

pub fn run(args: &[String]) -> std::result::Result<(), Failure> {
    let argv = std::iter::once("mcforecast".to_string()).chain(args.iter().cloned());
    let cli = Cli::try_parse_from(argv).map_err(Failure::Usage)?;
    if let Command::Replay(r) = &cli.command {
        let recorded = RunManifest::read(&r.manifest)?;
        let mut replay = recorded.args.clone();
        if let Some(t) = r.threads {
            replay.extend(["--threads".to_string(), t.to_string()]);
        }
        let out = r.out.clone().unwrap_or_else(|| PathBuf::from(&recorded.out));
        replay.extend(["--out".to_string(), out.display().to_string()]);
        if matches!(replay.first().map(String::as_str), Some("replay")) {
            return Err(Error::InvalidInput("manifest records a replay".into()).into());
        }
        return run(&replay);
    }
    dispatch(cli.command, args).map_err(Failure::Run)
}

fn common(cmd: &Command) -> &Common {
    match cmd {
        Command::Ingest(a) => &a.common,
        Command::Forecast(a) => &a.common,
        Command::Simulate(a) => &a.common,
        Command::Reliability(a) => &a.common,
        Command::Backtest(a) => &a.common,
        Command::Replay(_) => unreachable!("handled before dispatch"),
    }
}

fn dispatch(cmd: Command, raw: &[String]) -> Result<()> {
    let c = common(&cmd);
    let (seed, drawn) = match c.seed {
        Some(s) => (s, false),
        None => (rand::random::<u64>(), true),
    };
    let out = c.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(Error::InvalidInput("--threads must be >= 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot start worker pool: {e}")))?;

    let name = raw.first().cloned().unwrap_or_default();
    let mut manifest = RunManifest::new(&name, seed, drawn, replayable_args(raw, seed), &out);
    pool.install(|| match &cmd {
        Command::Ingest(a) => ingest(a, &out, &mut manifest),
        Command::Forecast(a) => forecast(a, seed, &out, &mut manifest),
        Command::Simulate(a) => simulate(a, seed, &out, &mut manifest),
        Command::Reliability(a) => reliability(a, seed, &out, &mut manifest),
        Command::Backtest(a) => backtest(a, seed, &out, &mut manifest),
        Command::Replay(_) => unreachable!("handled before dispatch"),
    })?;
    manifest.write(&out)?;
    Ok(())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

/// Creates `dir/name`, hands a buffered writer to `body`, records the output.
fn write_output(
    dir: &Path,
    name: &str,
    manifest: &mut RunManifest,
    body: impl FnOnce(&mut BufWriter<File>, &str) -> Result<()>,
) -> Result<()> {
    let path = dir.join(name);
    let label = path.display().to_string();
    let file = File::create(&path).map_err(|e| io_err(&path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w, &label)?;
    w.flush().map_err(|e| io_err(&path, e))?;
    manifest.outputs.push(name.to_string());
    Ok(())
}

fn io_to(label: &str) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: label.to_string(),
        source: e,
    }
}

fn ingest(a: &IngestArgs, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    manifest.inputs.push(a.input.display().to_string());
    let cfg = CleaningConfig {
        min_nonpeace: a.min_nonpeace,
        max_peace_proportion: a.max_peace_proportion,
    };
    if !(0.0..=1.0).contains(&cfg.max_peace_proportion) {
        return Err(Error::InvalidInput("--max-peace-proportion outside [0, 1]".into()));
    }
    let labeled = read_fatalities_file(&a.input)?
        .iter()
        .map(label_states)
        .collect::<Result<Vec<_>>>()?;
    let outcome = clean_corpus(labeled, &cfg);
    write_output(out, "states.csv", manifest, |w, p| write_states(w, &outcome.retained, p))?;
    write_output(out, "exclusions.csv", manifest, |w, p| {
        write_exclusions(w, &outcome.excluded, p)
    })?;
    println!(
        "{} countries retained, {} excluded",
        outcome.retained.len(),
        outcome.excluded.len()
    );
    Ok(())
}

fn find_country<'a>(corpus: &'a [LabeledSeries], id: &str) -> Result<&'a LabeledSeries> {
    corpus
        .iter()
        .find(|s| s.country_id == id)
        .ok_or_else(|| Error::InvalidInput(format!("unknown country {id:?}")))
}

fn forecast(a: &ForecastArgs, seed: u64, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    manifest.inputs.push(a.states.display().to_string());
    let corpus = read_states_file(&a.states)?;
    let series = find_country(&corpus, &a.country)?;
    let space = conflict_space();
    let settings = a.conformal.settings(space)?;
    let cfg = ConformalConfig {
        alpha: a.alpha,
        horizon: a.horizon,
        max_permutations: settings.max_permutations,
        score_mode: settings.score_mode,
        plus_one: settings.plus_one,
        seed,
        enumeration_cap: settings.enumeration_cap,
    };
    let forecasts = forward_forecast(&series.states, space, &cfg, &expand_methods(&a.method))?;
    for f in &forecasts {
        write_output(out, &format!("membership_{}.csv", f.method), manifest, |w, p| {
            write_membership_csv(w, f).map_err(io_to(p))
        })?;
        println!(
            "{}: {} sequences{}",
            f.method,
            f.members.len(),
            if f.mass_deficit { " (mass deficit)" } else { "" }
        );
    }
    write_output(out, "composition.csv", manifest, |w, p| {
        write_composition_csv(w, &forecasts).map_err(io_to(p))
    })
}

fn simulate(a: &SimulateArgs, seed: u64, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    let model = a.model.load(manifest)?;
    if model.p.size() != conflict_space().size() {
        return Err(Error::InvalidInput(format!(
            "state corpora use 4 conflict states, matrix has {}",
            model.p.size()
        )));
    }
    let corpus = synthetic_corpus(&model.p, &model.init, a.countries, a.length, a.start, seed)?;
    write_output(out, "states.csv", manifest, |w, p| write_states(w, &corpus, p))
}

fn write_report(report: &CoverageReport, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    write_output(out, "reliability.csv", manifest, |w, p| {
        report.write_reliability_csv(w).map_err(io_to(p))
    })?;
    write_output(out, "cardinality.csv", manifest, |w, p| {
        report.write_cardinality_csv(w).map_err(io_to(p))
    })
}

fn reliability(
    a: &ReliabilityArgs,
    seed: u64,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    let model = a.model.load(manifest)?;
    let space = StateSpace::new(model.p.size())?;
    let grid = ExperimentGrid {
        levels: a.levels.levels.clone(),
        horizons: a.levels.horizons.clone(),
        replications: a.replications,
        calibration_length: a.calibration_length,
        seed,
    };
    let settings = a.conformal.settings(space)?;
    let report = run_simulation_study(
        &model.p,
        &model.init,
        &grid,
        &expand_methods(&a.levels.methods),
        &settings,
    )?;
    if model.derived {
        println!("simulated from the derived population matrix");
    }
    write_report(&report, out, manifest)
}

fn backtest(a: &BacktestArgs, seed: u64, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    manifest.inputs.push(a.states.display().to_string());
    let corpus = read_states_file(&a.states)?;
    let grid = ExperimentGrid {
        levels: a.levels.levels.clone(),
        horizons: a.levels.horizons.clone(),
        replications: corpus.len().max(1),
        calibration_length: 2,
        seed,
    };
    let settings = a.conformal.settings(conflict_space())?;
    let bt = run_backtest(
        &corpus,
        a.cutoff,
        &grid,
        &expand_methods(&a.levels.methods),
        &settings,
    )?;
    write_report(&bt.report, out, manifest)?;
    write_output(out, "countries.csv", manifest, |w, p| {
        let mut csv = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Csv {
            path: p.to_string(),
            source: e,
        };
        csv.write_record(["country_id", "status", "reason"]).map_err(err)?;
        for c in &bt.evaluated {
            csv.write_record([c.as_str(), "evaluated", ""]).map_err(err)?;
        }
        for (c, why) in &bt.dropped {
            csv.write_record([c.as_str(), "dropped", why.as_str()]).map_err(err)?;
        }
        csv.flush().map_err(io_to(p))
    })?;
    println!(
        "{} countries evaluated, {} dropped",
        bt.evaluated.len(),
        bt.dropped.len()
    );
    Ok(())
}
