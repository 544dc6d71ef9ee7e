mod config;

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use clusterhte::bootstrap::{s1_bootstrap_test, s2_bootstrap_test, BootstrapConfig};
use clusterhte::estimator::ShiftCovariance;
use clusterhte::inference::{both_tests, holm, BandwidthChoice, Method, MtpResult, Report, TestConfig, TestResult};
use clusterhte::simulation::power::{parse_beta_grid, PowerExperiment, PowerTable, Preset, Statistic, TestSpec, Vary};
use clusterhte::simulation::{gen_dgp, ols_cluster_comparison, CateForm, DgpConfig, NOMINAL_LEVELS};
use clusterhte::{
    apply_exposure_mapping, load_clustered_csv, overlap_check, write_clustered_csv, BandwidthRule, BandwidthScale,
    CsvSchema, ErrorClass, ExposureMapping, HteError, Result, Sample,
};

use config::FileConfig;

#[derive(Parser)]
#[command(
    name = "clusterhte",
    version,
    about = "Kernel tests for heterogeneous treatment effects under clustered interference"
)]
struct Cli {
    /// Thread cap for bootstrap and simulation work.
    #[arg(long, global = true, env = "CLUSTERHTE_WORKERS")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test both homogeneity nulls on a data set.
    Test(TestArgs),
    /// Monte Carlo rejection probabilities over a coefficient grid.
    Simulate(SimulateArgs),
    /// Linear interaction regression next to the kernel tests.
    Compare(CompareArgs),
    /// Write one draw of the simulation design as CSV.
    Generate(GenerateArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Input CSV with one row per unit.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    cluster_col: Option<String>,
    #[arg(long)]
    outcome_col: Option<String>,
    #[arg(long)]
    treatment_col: Option<String>,
    /// Comma-separated covariate columns.
    #[arg(long)]
    covariates: Option<String>,
    /// Column holding precomputed exposure values.
    #[arg(long)]
    exposure_col: Option<String>,
    /// Exposure mapping when no exposure column is given: `ratio`, `loo`
    /// or `threshold:<cut>`.
    #[arg(long)]
    exposure: Option<String>,
}

#[derive(Args, Clone)]
struct StatArgs {
    /// Comma-separated bandwidth constants; one result row per value.
    #[arg(long)]
    kappa: Option<String>,
    /// Comma-separated fixed bandwidths, overriding `--kappa`.
    #[arg(long)]
    h: Option<String>,
    /// Count in the bandwidth rule: clusters or units.
    #[arg(long, value_enum)]
    scale: Option<ScaleArg>,
    #[arg(long)]
    grid_points: Option<usize>,
    #[arg(long)]
    min_cell_mass: Option<f64>,
    /// Covariance correction in the `S2` weights.
    #[arg(long, value_enum)]
    shift_covariance: Option<ShiftArg>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    stat: StatArgs,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Bootstrap replications.
    #[arg(long)]
    boot_reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the JSON report here.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Print JSON instead of the table.
    #[arg(long)]
    json: bool,
    /// Directory for bootstrap draws, one CSV per test.
    #[arg(long)]
    draws_dir: Option<PathBuf>,
    /// Flat `key = value` file with defaults for any flag above.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Named design, `paper-a1` to `paper-a6`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_enum)]
    stat: Option<StatArg>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Grid for the exposure coefficient, `start:stop:step` or a list.
    #[arg(long, allow_hyphen_values = true)]
    beta1: Option<String>,
    /// Grid for the covariate coefficient.
    #[arg(long, allow_hyphen_values = true)]
    beta0: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    boot_reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    cluster_size: Option<usize>,
    #[arg(long, value_enum)]
    cate: Option<CateArg>,
    #[command(flatten)]
    stat_args: StatArgs,
    /// Wide CSV output; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Long-format CSV for plotting.
    #[arg(long)]
    plot_data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    stat: StatArgs,
    #[arg(long)]
    json: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 150)]
    clusters: usize,
    #[arg(long, default_value_t = 10)]
    cluster_size: usize,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    beta0: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    beta1: f64,
    #[arg(long, value_enum, default_value_t = CateArg::Linear)]
    cate: CateArg,
    #[arg(long, default_value_t = 1)]
    dimension: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Clusters,
    Units,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShiftArg {
    Absolute,
    Omitted,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Asymptotic,
    Bootstrap,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum StatArg {
    S1,
    S2,
}

#[derive(Clone, Copy, ValueEnum)]
enum CateArg {
    Linear,
    Cosine,
    Multi,
}

fn parse_enum<E: ValueEnum>(v: &str, key: &str) -> Result<E> {
    E::from_str(v, true).map_err(|_| HteError::Config(format!("`{key}`: unknown value `{v}`")))
}

fn pick_enum<E: ValueEnum>(flag: Option<E>, file: &FileConfig, key: &str) -> Result<Option<E>> {
    match (flag, file.raw(key)) {
        (Some(v), _) => Ok(Some(v)),
        (None, Some(v)) => parse_enum(v, key).map(Some),
        (None, None) => Ok(None),
    }
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    path.map(FileConfig::load).transpose().map(Option::unwrap_or_default)
}

fn parse_list(v: &str, what: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| HteError::Config(format!("`{what}`: cannot parse `{s}`")))
        })
        .collect()
}

fn parse_mapping(v: &str) -> Result<ExposureMapping> {
    match v {
        "ratio" => Ok(ExposureMapping::TreatmentRatio),
        "loo" => Ok(ExposureMapping::LeaveOneOutRatio),
        _ => match v.strip_prefix("threshold:").map(str::parse::<f64>) {
            Some(Ok(c)) => Ok(ExposureMapping::Threshold(c)),
            _ => Err(HteError::Config(format!(
                "unknown exposure mapping `{v}` (ratio, loo or threshold:<cut>)"
            ))),
        },
    }
}

fn load_sample(args: &DataArgs, file: &FileConfig) -> Result<Sample> {
    let defaults = CsvSchema::default();
    let covariates = file
        .pick(args.covariates.clone(), "covariates")?
        .map(|c| c.split(',').map(|s| s.trim().to_string()).collect())
        .unwrap_or(defaults.covariates);
    let schema = CsvSchema {
        cluster: file
            .pick(args.cluster_col.clone(), "cluster-col")?
            .unwrap_or(defaults.cluster),
        outcome: file
            .pick(args.outcome_col.clone(), "outcome-col")?
            .unwrap_or(defaults.outcome),
        treatment: file
            .pick(args.treatment_col.clone(), "treatment-col")?
            .unwrap_or(defaults.treatment),
        covariates,
        exposure: file.pick(args.exposure_col.clone(), "exposure-col")?,
        delimiter: defaults.delimiter,
    };
    let sample: Sample = load_clustered_csv(&args.input, &schema)?;
    let sample = if schema.exposure.is_some() {
        sample
    } else {
        let mapping = file
            .pick(args.exposure.clone(), "exposure")?
            .unwrap_or_else(|| "ratio".into());
        apply_exposure_mapping(&sample, parse_mapping(&mapping)?)?
    };
    let overlap = overlap_check(&sample, clusterhte::data::DEFAULT_MIN_SHARE)?;
    for w in &overlap.warnings {
        log::warn!("{w}");
    }
    Ok(sample)
}

/// One test configuration per requested bandwidth.
fn test_configs(args: &StatArgs, file: &FileConfig) -> Result<Vec<TestConfig>> {
    let mut base = TestConfig::default();
    if let Some(a) = file.pick(args.alpha, "alpha")? {
        base.alpha = a;
    }
    if let Some(g) = file.pick(args.grid_points, "grid-points")? {
        base.grid_points = g;
    }
    if let Some(m) = file.pick(args.min_cell_mass, "min-cell-mass")? {
        base.min_cell_mass = m;
    }
    if let Some(s) = pick_enum(args.shift_covariance, file, "shift-covariance")? {
        base.stat.shift_covariance = match s {
            ShiftArg::Absolute => ShiftCovariance::AbsoluteMoment,
            ShiftArg::Omitted => ShiftCovariance::Omitted,
        };
    }
    let scale = match pick_enum(args.scale, file, "scale")? {
        Some(ScaleArg::Units) => BandwidthScale::Units,
        _ => BandwidthScale::Clusters,
    };
    let choices: Vec<BandwidthChoice> = if let Some(h) = file.pick(args.h.clone(), "h")? {
        parse_list(&h, "h")?
            .into_iter()
            .map(|v| BandwidthChoice::Fixed(vec![v]))
            .collect()
    } else {
        let kappas = match file.pick(args.kappa.clone(), "kappa")? {
            Some(k) => parse_list(&k, "kappa")?,
            None => vec![BandwidthRule::default().kappa],
        };
        kappas
            .into_iter()
            .map(|kappa| {
                BandwidthChoice::Rule(BandwidthRule {
                    kappa,
                    scale,
                    ..BandwidthRule::default()
                })
            })
            .collect()
    };
    choices
        .into_iter()
        .map(|bandwidth| {
            let cfg = TestConfig {
                bandwidth,
                ..base.clone()
            };
            cfg.validate()?;
            Ok(cfg)
        })
        .collect()
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_test(args: TestArgs, workers: Option<usize>) -> Result<()> {
    let file = load_config(args.config.as_deref())?;
    let sample = load_sample(&args.data, &file)?;
    let configs = test_configs(&args.stat, &file)?;
    let method = pick_enum(args.method, &file, "method")?.unwrap_or(MethodArg::Asymptotic);
    let boot = BootstrapConfig {
        reps: file
            .pick(args.boot_reps, "boot-reps")?
            .unwrap_or(clusterhte::bootstrap::DEFAULT_REPS),
        seed: file.pick(args.seed, "seed")?.unwrap_or(0),
        workers,
        ..BootstrapConfig::default()
    };
    boot.validate()?;
    if let Some(dir) = &args.draws_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut results: Vec<TestResult<f64>> = Vec::new();
    let mut mtp: Vec<MtpResult> = Vec::new();
    for (i, cfg) in configs.iter().enumerate() {
        if method != MethodArg::Bootstrap {
            let (s1, s2) = both_tests(&sample, cfg)?;
            mtp.push(holm(s1.p_value, s2.p_value, cfg.alpha)?);
            results.extend([s1, s2]);
        }
        if method != MethodArg::Asymptotic {
            let (s1, b1) = s1_bootstrap_test(&sample, cfg, &boot)?;
            let (s2, b2) = s2_bootstrap_test(&sample, cfg, &boot)?;
            if let Some(dir) = &args.draws_dir {
                b1.save_draws_csv(&dir.join(format!("s1-bandwidth{i}.csv")))?;
                b2.save_draws_csv(&dir.join(format!("s2-bandwidth{i}.csv")))?;
            }
            mtp.push(holm(s1.p_value, s2.p_value, cfg.alpha)?);
            results.extend([s1, s2]);
        }
    }
    let report = Report {
        n_units: sample.n_units(),
        n_clusters: sample.n_clusters(),
        levels: sample.levels()?.to_vec(),
        results,
        mtp,
    };
    let json = report.to_json()?;
    if let Some(p) = &args.output {
        std::fs::write(p, format!("{json}\n"))?;
    }
    if args.json {
        println!("{json}");
    } else {
        print!("{}", report.render_table());
    }
    Ok(())
}

fn cate_form(c: CateArg) -> CateForm {
    match c {
        CateArg::Linear => CateForm::Linear,
        CateArg::Cosine => CateForm::CosineNonlinear,
        CateArg::Multi => CateForm::LinearMultiX,
    }
}

fn simulate_experiments(args: &SimulateArgs, file: &FileConfig) -> Result<Vec<PowerExperiment>> {
    if let Some(name) = file.pick(args.preset.clone(), "preset")? {
        return Ok(Preset::parse(&name)?.experiments());
    }
    let stat = pick_enum(args.stat, file, "stat")?.ok_or_else(|| HteError::Config("give --stat or --preset".into()))?;
    let method = pick_enum(args.method, file, "method")?.unwrap_or(MethodArg::Asymptotic);
    let (vary, grid) = match (
        file.pick(args.beta0.clone(), "beta0")?,
        file.pick(args.beta1.clone(), "beta1")?,
    ) {
        (Some(_), Some(_)) => return Err(HteError::Config("vary only one of --beta0 and --beta1".into())),
        (Some(g), None) => (Vary::Beta0, g),
        (None, Some(g)) => (Vary::Beta1, g),
        (None, None) => match stat {
            StatArg::S1 => (Vary::Beta1, "-0.5:0.5:0.05".to_string()),
            StatArg::S2 => (Vary::Beta0, "-0.5:0.5:0.05".to_string()),
        },
    };
    // the other coefficient sits at its null value for the chosen statistic
    let (beta0, beta1) = match stat {
        StatArg::S1 => (1.0, 0.0),
        StatArg::S2 => (0.0, 1.0),
    };
    let mut dgp = DgpConfig {
        beta0,
        beta1,
        ..DgpConfig::default()
    };
    if let Some(c) = file.pick(args.clusters, "clusters")? {
        dgp.clusters = c;
    }
    if let Some(n) = file.pick(args.cluster_size, "cluster-size")? {
        dgp.cluster_size = n;
    }
    if let Some(c) = pick_enum(args.cate, file, "cate")? {
        dgp.cate_form = cate_form(c);
    }
    let mut configs = test_configs(&args.stat_args, file)?;
    if configs.len() != 1 {
        return Err(HteError::Config("simulate takes a single bandwidth".into()));
    }
    let config = configs.remove(0);
    let statistic = match stat {
        StatArg::S1 => Statistic::S1,
        StatArg::S2 => Statistic::S2,
    };
    let test = match method {
        MethodArg::Asymptotic => TestSpec::asymptotic(statistic, config),
        MethodArg::Bootstrap => TestSpec::bootstrap(statistic, config, BootstrapConfig::default()),
        MethodArg::Both => return Err(HteError::Config("simulate runs one method at a time".into())),
    };
    Ok(vec![PowerExperiment {
        name: format!("{}-{}", statistic.label().to_lowercase(), method_label(test.method)),
        dgp,
        vary,
        betas: parse_beta_grid(&grid)?,
        test,
    }])
}

fn method_label(m: Method) -> &'static str {
    match m {
        Method::Asymptotic => "asymptotic",
        Method::Bootstrap => "bootstrap",
    }
}

fn suffixed(path: &Path, name: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("table");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}-{name}.{ext}"))
}

fn cmd_simulate(args: SimulateArgs, workers: Option<usize>) -> Result<()> {
    let file = load_config(args.config.as_deref())?;
    let mut experiments = simulate_experiments(&args, &file)?;
    let reps = file.pick(args.reps, "reps")?.unwrap_or(1000);
    let seed = file.pick(args.seed, "seed")?.unwrap_or(0);
    let boot_reps = file.pick(args.boot_reps, "boot-reps")?;
    if reps == 0 {
        return Err(HteError::Config("need at least one Monte Carlo replication".into()));
    }
    for e in &mut experiments {
        if let Some(b) = boot_reps {
            e.test.bootstrap.reps = b;
        }
        e.dgp.validate()?;
        e.test.bootstrap.validate()?;
    }
    let several = experiments.len() > 1;
    let mut tables: Vec<PowerTable> = Vec::new();
    for e in &experiments {
        log::info!("running {} ({} design points, {reps} reps)", e.name, e.betas.len());
        let table = e.run(reps, &NOMINAL_LEVELS, seed, workers)?;
        let csv = table.to_csv_string()?;
        match &args.output {
            Some(p) if several => std::fs::write(suffixed(p, &e.name), csv)?,
            Some(p) => std::fs::write(p, csv)?,
            None => {
                if several {
                    println!("# {}", e.name);
                }
                print!("{csv}");
            }
        }
        tables.push(table);
    }
    if let Some(p) = &args.plot_data {
        for t in &tables {
            let path = if several { suffixed(p, &t.name) } else { p.clone() };
            t.write_long_csv(File::create(path)?)?;
        }
    }
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let file = load_config(args.config.as_deref())?;
    let sample = load_sample(&args.data, &file)?;
    if sample.d() != 1 {
        return Err(HteError::Data(format!(
            "the regression comparator takes one covariate, found {}",
            sample.d()
        )));
    }
    let ols = ols_cluster_comparison(&sample)?;
    let configs = test_configs(&args.stat, &file)?;
    let mut rows = Vec::new();
    for cfg in &configs {
        let (s1, s2) = both_tests(&sample, cfg)?;
        rows.push((s1, s2));
    }
    if args.json {
        let kernel: Vec<_> = rows
            .iter()
            .map(|(s1, s2)| {
                json!({
                    "bandwidth": s1.bandwidth,
                    "s1": s1.statistic.studentized,
                    "s1_p_value": s1.p_value,
                    "s2": s2.statistic.studentized,
                    "s2_p_value": s2.p_value,
                })
            })
            .collect();
        let out = json!({ "parametric": ols, "kernel": kernel });
        println!(
            "{}",
            serde_json::to_string_pretty(&out).map_err(|e| HteError::Numerical(e.to_string()))?
        );
        return Ok(());
    }
    let mut out = String::from("Linear interaction regression, cluster-robust standard errors\n");
    out.push_str(&ols.render_table());
    out.push_str("\nKernel tests\n");
    out.push_str(&format!(
        "{:>10} {:>10} {:>10} {:>10} {:>10}\n",
        "h", "S1", "p", "S2", "p"
    ));
    for (s1, s2) in &rows {
        out.push_str(&format!(
            "{:>10.4} {:>10.3} {:>10.4} {:>10.3} {:>10.4}\n",
            s1.bandwidth[0], s1.statistic.studentized, s1.p_value, s2.statistic.studentized, s2.p_value
        ));
    }
    write_output(None, &out)
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let dgp = DgpConfig {
        clusters: args.clusters,
        cluster_size: args.cluster_size,
        beta0: args.beta0,
        beta1: args.beta1,
        cate_form: cate_form(args.cate),
        d: args.dimension,
        ..DgpConfig::default()
    };
    let sample = gen_dgp(&dgp, args.seed)?;
    let schema = CsvSchema {
        covariates: if args.dimension == 1 {
            vec!["x".into()]
        } else {
            (1..=args.dimension).map(|j| format!("x{j}")).collect()
        },
        ..CsvSchema::default()
    };
    match &args.output {
        Some(p) => write_clustered_csv(&sample, File::create(p)?, &schema),
        None => write_clustered_csv(&sample, io::stdout().lock(), &schema),
    }
}

fn exit_code(e: &HteError) -> (u8, &'static str) {
    match e.class() {
        ErrorClass::Numerical => (3, "numerical"),
        ErrorClass::Data => (2, "data"),
        ErrorClass::Config => (2, "config"),
        ErrorClass::Io => (2, "io"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error[config]: worker count must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let res = match cli.command {
        Command::Test(a) => cmd_test(a, cli.workers),
        Command::Simulate(a) => cmd_simulate(a, cli.workers),
        Command::Compare(a) => cmd_compare(a),
        Command::Generate(a) => cmd_generate(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, class) = exit_code(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{class}]: {msg}");
            ExitCode::from(code)
        }
    }
}
