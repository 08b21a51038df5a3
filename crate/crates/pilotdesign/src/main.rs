use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pilotdesign::io::{self, DesignMeta, IoError, Layout};
use pilotdesign::plot::boxplot_svg;
use pilotdesign_core::criteria::{are, f_value, mise, CandidateDesign};
use pilotdesign_core::design::{generate_with, verify_hybrid, DesignError, DesignSpec, HybridOptions, Structure};
use pilotdesign_core::fpca::{fit_pace, Bandwidth, FitOptions, FpcaModel};
use pilotdesign_core::search::{search_optimal, threshold_analysis, CandidateTable, SearchMethod};
use pilotdesign_core::sim::{simulate_dataset, sparsify, ExperimentConfig, ExperimentResult, Plan, SimConfig};

/// Pilot-study sampling designs for sparse functional data.
#[derive(Parser)]
#[command(name = "pilotdesign", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or inspect pilot-study designs.
    Design {
        #[command(subcommand)]
        action: DesignCommand,
    },
    /// Simulate dense synthetic functional data, optionally sparsified by a design.
    Simulate(SimulateArgs),
    /// Fit a functional principal component model to a data file.
    Fit(FitArgs),
    /// Evaluate next-study designs under a fitted model.
    Evaluate(EvaluateArgs),
    /// Search for the optimal next-study design.
    Search(SearchArgs),
    /// Run the simulated design comparison.
    Experiment(ExperimentArgs),
    /// Run the design comparison on a dense real data set.
    RealData(RealDataArgs),
}

#[derive(Subcommand)]
enum DesignCommand {
    /// Build a design and write it as CSV with a JSON sidecar.
    Generate(GenerateArgs),
    /// Print the structure and concurrence summary of a design file.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum StructureArg {
    Random,
    Snippet,
    Bibd,
    Hybrid,
}

impl From<StructureArg> for Structure {
    fn from(s: StructureArg) -> Self {
        match s {
            StructureArg::Random => Structure::Random,
            StructureArg::Snippet => Structure::Snippet,
            StructureArg::Bibd => Structure::Bibd,
            StructureArg::Hybrid => Structure::Hybrid,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Design structure.
    #[arg(long, value_enum)]
    structure: StructureArg,
    /// Number of subjects.
    #[arg(long)]
    subjects: usize,
    /// Grid size.
    #[arg(long, default_value_t = 25)]
    grid: usize,
    /// Observations per subject.
    #[arg(long, default_value_t = 5)]
    obs: usize,
    /// Snippet fraction; defaults to 0.2 for hybrid designs and 0 otherwise.
    #[arg(long)]
    snippet_frac: Option<f64>,
    /// Concurrence tolerance of hybrid designs.
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    /// Exclusion radius around snippet clusters.
    #[arg(long, default_value_t = 2)]
    gap: usize,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Make-up iteration budget of the hybrid generator (default 50 n).
    #[arg(long)]
    max_makeup_iterations: Option<usize>,
    /// Size at which the hybrid make-up store is emptied (default 2 n).
    #[arg(long)]
    store_limit: Option<usize>,
    /// Output CSV path; the sidecar goes next to it with a .json extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    /// Design CSV; a sidecar next to it is read when present.
    path: PathBuf,
    /// Also print the design-plot triples (j, k, count), 1-based.
    #[arg(long)]
    plot_data: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment or simulation config (JSON); its model settings are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of subjects.
    #[arg(long, default_value_t = 240)]
    subjects: usize,
    /// 1-based data set number.
    #[arg(long, default_value_t = 1)]
    dataset: usize,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Design to sparsify the noisy data with.
    #[arg(long)]
    design: Option<PathBuf>,
    /// Output directory: dense.csv, truth.csv and, with --design, sparse.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Dense or sparse data file (missing entries are left empty).
    #[arg(long)]
    data: PathBuf,
    /// Data file layout.
    #[arg(long, value_enum, default_value = "wide")]
    layout: Layout,
    /// Fraction of variance explained that selects the component count.
    #[arg(long, default_value_t = 0.95)]
    fve: f64,
    /// Retain exactly this many components.
    #[arg(long)]
    components: Option<usize>,
    /// Upper bound on the component count.
    #[arg(long)]
    max_components: Option<usize>,
    /// Mean bandwidth (default: generalised cross-validation).
    #[arg(long)]
    mean_bandwidth: Option<f64>,
    /// Covariance bandwidth (default: generalised cross-validation).
    #[arg(long)]
    cov_bandwidth: Option<f64>,
    /// Model JSON output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Fitted model JSON.
    #[arg(long)]
    model: PathBuf,
    /// Design as hyphen-joined 1-based grid indices, e.g. 1-7-13-19-25.
    #[arg(long = "design")]
    designs: Vec<String>,
    /// True model; adds the true criterion and the ARE of the model's optimum.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Next-study design size for the ARE search.
    #[arg(long, default_value_t = 5)]
    obs: usize,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MethodArg {
    Exhaustive,
    Heuristic,
}

#[derive(Args)]
struct SearchArgs {
    /// Fitted model JSON.
    #[arg(long)]
    model: PathBuf,
    /// Next-study design size.
    #[arg(long, default_value_t = 5)]
    obs: usize,
    /// Search method.
    #[arg(long, value_enum, default_value = "exhaustive")]
    method: MethodArg,
    /// Heuristic sample count.
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    /// Heuristic seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// True model; enables the efficiency-threshold analysis.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Efficiency thresholds, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.99,0.97,0.95")]
    thresholds: Vec<f64>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON); see docs/config.md. Flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, env = "PILOTDESIGN_THREADS")]
    threads: Option<usize>,
    /// Also write boxplot_<metric>.svg files.
    #[arg(long)]
    plots: bool,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of data sets per subject count.
    #[arg(long)]
    datasets: Option<usize>,
    /// Number of designs per structure and subject count.
    #[arg(long)]
    designs: Option<usize>,
    /// Subject counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    subject_counts: Option<Vec<usize>>,
    /// Design structures to compare, comma separated.
    #[arg(long, value_delimiter = ',', value_enum)]
    structures: Option<Vec<StructureArg>>,
    /// Snippet fraction of hybrid designs.
    #[arg(long)]
    snippet_frac: Option<f64>,
    /// Starting concurrence tolerance of hybrid designs.
    #[arg(long)]
    delta: Option<f64>,
    /// Exclusion radius around snippet clusters.
    #[arg(long)]
    gap: Option<usize>,
    /// Efficiency thresholds, comma separated.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct RealDataArgs {
    /// Dense data file.
    #[arg(long)]
    data: PathBuf,
    /// Data file layout.
    #[arg(long, value_enum, default_value = "wide")]
    layout: Layout,
    #[command(flatten)]
    run: RunArgs,
}

/// Failure classes and their exit codes.
enum Failure {
    Validation(String),
    Construction(String),
    Experiment(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Construction(_) => 3,
            Failure::Experiment(_) => 4,
            Failure::Io(_) => 5,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) | Failure::Construction(m) | Failure::Experiment(m) | Failure::Io(m) => {
                f.write_str(m)
            }
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Io { .. } => Failure::Io(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<DesignError> for Failure {
    fn from(e: DesignError) -> Self {
        match e {
            DesignError::ConstructionFailed { .. } => Failure::Construction(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

fn invalid(e: impl fmt::Display) -> Failure {
    Failure::Validation(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Design { action: DesignCommand::Generate(a) } => design_generate(a),
        Command::Design { action: DesignCommand::Inspect(a) } => design_inspect(a),
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Search(a) => search(a),
        Command::Experiment(a) => experiment(a),
        Command::RealData(a) => real_data(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.code())
        }
    }
}

fn design_generate(a: GenerateArgs) -> Result<(), Failure> {
    let structure = Structure::from(a.structure);
    let w = a.snippet_frac.unwrap_or(if structure == Structure::Hybrid { 0.2 } else { 0.0 });
    let spec = DesignSpec { n: a.subjects, v: a.grid, k: a.obs, w, delta: a.delta, gap: a.gap, seed: a.seed };
    let options = HybridOptions { max_makeup_iterations: a.max_makeup_iterations, store_limit: a.store_limit };
    let design = generate_with(structure, &spec, &options)?;
    let meta = DesignMeta::new(&design, &spec)?;
    io::write_design(&a.out, &design, Some(&meta))?;
    println!("structure  {}", structure);
    println!("subjects   {}  grid {}  obs {}", spec.n, spec.v, spec.k);
    println!(
        "targets    c1 {}  c2 {}  c3 {}  (c3 with C(n-1,2): {})",
        io::fmt_float(meta.targets.c1),
        io::fmt_float(meta.targets.c2),
        io::fmt_float(meta.targets.c3),
        io::fmt_float(meta.targets.c3_literal)
    );
    println!(
        "max |dev|  diagonal {}  adjacent {}  distant {}",
        io::fmt_float(meta.deviations.diagonal),
        io::fmt_float(meta.deviations.adjacent),
        io::fmt_float(meta.deviations.distant)
    );
    println!("wrote      {}", a.out.display());
    Ok(())
}

fn design_inspect(a: InspectArgs) -> Result<(), Failure> {
    let (design, meta) = io::read_design(&a.path)?;
    let rows = design.row_sums();
    let cols = design.column_sums();
    let conc = design.concurrence();
    let band = conc.band_maxima();
    println!("structure   {}", design.structure());
    println!("subjects    {}  grid {}", design.subjects(), design.grid_size());
    println!("row sums    {}..{}", rows.iter().min().unwrap_or(&0), rows.iter().max().unwrap_or(&0));
    println!("col sums    {}..{}", cols.iter().min().unwrap_or(&0), cols.iter().max().unwrap_or(&0));
    println!("trace       {}", conc.trace());
    println!(
        "band max    diagonal {}  adjacent {}  distant {}",
        band.diagonal_max, band.adjacent_max, band.distant_max
    );
    println!("snippet     {}", design.snippet_rows());
    if let Some(m) = &meta {
        println!(
            "targets     c1 {}  c2 {}  c3 {}",
            io::fmt_float(m.targets.c1),
            io::fmt_float(m.targets.c2),
            io::fmt_float(m.targets.c3)
        );
        println!(
            "max |dev|   diagonal {}  adjacent {}  distant {}",
            io::fmt_float(m.deviations.diagonal),
            io::fmt_float(m.deviations.adjacent),
            io::fmt_float(m.deviations.distant)
        );
        if m.structure == Structure::Hybrid {
            match verify_hybrid(&design, &m.spec) {
                Ok(()) => println!("constraints satisfied"),
                Err(v) => println!("constraint violated: {:?}", v),
            }
        }
    }
    if a.plot_data {
        println!("j,k,count");
        for (j, k, c) in design.plot_data() {
            println!("{},{},{}", j, k, c);
        }
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    load_run_config(path).map(|(config, _)| config)
}

/// The config and its optional `out` directory.
fn load_run_config(path: Option<&Path>) -> Result<(ExperimentConfig, Option<PathBuf>), Failure> {
    let Some(path) = path else {
        return Ok((ExperimentConfig::default(), None));
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {}", path.display(), e)))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {}", path.display(), e)))?;
    let out = match value.as_object_mut().and_then(|o| o.remove("out")) {
        None => None,
        Some(serde_json::Value::String(s)) => Some(PathBuf::from(s)),
        Some(_) => return Err(invalid(format!("{}: 'out' must be a string", path.display()))),
    };
    let reference = serde_json::to_value(ExperimentConfig::default()).expect("config serialises");
    check_keys(&value, &reference, "")?;
    let config = serde_json::from_value(value).map_err(|e| invalid(format!("{}: {}", path.display(), e)))?;
    Ok((config, out))
}

/// Rejects keys that the config schema does not know.
fn check_keys(value: &serde_json::Value, reference: &serde_json::Value, prefix: &str) -> Result<(), Failure> {
    if let (Some(obj), Some(known)) = (value.as_object(), reference.as_object()) {
        for (k, v) in obj {
            match known.get(k) {
                None => return Err(invalid(format!("unknown config key '{}{}'", prefix, k))),
                Some(r) => check_keys(v, r, &format!("{}{}.", prefix, k))?,
            }
        }
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<(), Failure> {
    let mut sim: SimConfig = load_config(a.config.as_deref())?.sim;
    if let Some(seed) = a.seed {
        sim.master_seed = seed;
    }
    sim.validate().map_err(invalid)?;
    if a.dataset == 0 || a.subjects == 0 {
        return Err(invalid("--dataset and --subjects must be positive"));
    }
    let data = simulate_dataset(&sim, a.dataset - 1, a.subjects);
    let grid = sim.grid();
    let ids: Vec<String> = (1..=a.subjects).map(|i| i.to_string()).collect();
    let dense = |values: Vec<Vec<f64>>| io::DenseDataset { subject_ids: ids.clone(), grid: grid.clone(), values };
    io::write_dense_csv(&a.out.join("dense.csv"), &dense(data.u.clone()))?;
    io::write_dense_csv(&a.out.join("truth.csv"), &dense(data.x))?;
    if let Some(path) = &a.design {
        let (design, _) = io::read_design(path)?;
        let sparse = sparsify(&data.u, &grid, &design).map_err(invalid)?;
        io::write_sparse_long(&a.out.join("sparse.csv"), &ids, &sparse)?;
    }
    println!("wrote {} subjects to {}", a.subjects, a.out.display());
    Ok(())
}

fn fit(a: FitArgs) -> Result<(), Failure> {
    let data = io::read_dense_csv(&a.data, a.layout)?;
    let options = FitOptions {
        mean_bandwidth: a.mean_bandwidth.map_or(Bandwidth::Gcv, Bandwidth::Fixed),
        cov_bandwidth: a.cov_bandwidth.map_or(Bandwidth::Gcv, Bandwidth::Fixed),
        fve_threshold: a.fve,
        fixed_components: a.components,
        max_components: a.max_components,
        include_diagonal: false,
    };
    let model = fit_pace(&data.to_sparse()?, &options).map_err(invalid)?;
    io::write_model(&a.out, &model)?;
    println!(
        "subjects     {}  grid {}  missing {}",
        data.subjects(),
        data.grid.len(),
        io::fmt_float(data.missing_fraction())
    );
    println!("components   {}  fve {}", model.components(), io::fmt_float(model.fve));
    let lams: Vec<String> = model.eigenvalues.iter().map(|l| io::fmt_float(*l)).collect();
    println!("eigenvalues  {}", lams.join(" "));
    println!("sigma_e2     {}", io::fmt_float(model.sigma_e2));
    println!("wrote        {}", a.out.display());
    Ok(())
}

fn read_model(path: &Path) -> Result<FpcaModel, Failure> {
    Ok(io::read_model(path)?)
}

fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let model = read_model(&a.model)?;
    let truth = a.truth.as_deref().map(read_model).transpose()?;
    if let Some(t) = &truth {
        if t.grid_size() != model.grid_size() {
            return Err(invalid("model and truth use different grids"));
        }
    }
    println!("design,f_hat,mise{}", if truth.is_some() { ",f_true" } else { "" });
    for d in &a.designs {
        let d = CandidateDesign::parse(d, model.grid_size()).map_err(invalid)?;
        let f = f_value(&model, d.indices()).map_err(invalid)?;
        let m = mise(&model, d.indices()).map_err(invalid)?;
        match &truth {
            Some(t) => {
                let ft = f_value(t, d.indices()).map_err(invalid)?;
                println!("{},{},{},{}", d, io::fmt_float(f), io::fmt_float(m), io::fmt_float(ft));
            }
            None => println!("{},{},{}", d, io::fmt_float(f), io::fmt_float(m)),
        }
    }
    if let Some(t) = &truth {
        let r = are(&model, t, a.obs, &SearchMethod::Exhaustive).map_err(invalid)?;
        println!(
            "t_opt {}  t_star {}  F(t_opt) {}  F(t_star) {}  ARE {}",
            r.t_opt,
            r.t_star,
            io::fmt_float(r.f_at_opt),
            io::fmt_float(r.f_at_star),
            io::fmt_float(r.are)
        );
    }
    Ok(())
}

fn search(a: SearchArgs) -> Result<(), Failure> {
    let model = read_model(&a.model)?;
    let method = match a.method {
        MethodArg::Exhaustive => SearchMethod::Exhaustive,
        MethodArg::Heuristic => SearchMethod::WeightedHeuristic { samples: a.samples, seed: a.seed },
    };
    let best = search_optimal(&model, a.obs, &method).map_err(invalid)?;
    println!("best {}  F {}  evaluated {}", best.design, io::fmt_float(best.value), best.evaluated);
    if let Some(path) = &a.truth {
        let truth = read_model(path)?;
        if truth.grid_size() != model.grid_size() {
            return Err(invalid("model and truth use different grids"));
        }
        let est = CandidateTable::build(&model, a.obs).map_err(invalid)?;
        let tru = CandidateTable::build(&truth, a.obs).map_err(invalid)?;
        println!("theta,set_size,t_worst,eff_worst,t_median,eff_median");
        for r in threshold_analysis(&est, &tru, &a.thresholds).map_err(invalid)? {
            println!(
                "{},{},{},{},{},{}",
                io::fmt_float(r.theta),
                r.set_size,
                r.t_worst,
                io::fmt_float(r.eff_worst),
                r.t_median,
                io::fmt_float(r.eff_median)
            );
        }
    }
    Ok(())
}

fn apply_overrides(config: &mut ExperimentConfig, r: &RunArgs) {
    if let Some(s) = r.seed {
        config.sim.master_seed = s;
    }
    if let Some(d) = r.datasets {
        config.sim.n_datasets = d;
    }
    if let Some(d) = r.designs {
        config.sim.n_designs = d;
    }
    if let Some(c) = &r.subject_counts {
        config.sim.subject_counts = c.clone();
    }
    if let Some(s) = &r.structures {
        config.structures = s.iter().map(|&x| x.into()).collect();
    }
    if let Some(w) = r.snippet_frac {
        config.snippet_frac = w;
    }
    if let Some(d) = r.delta {
        config.delta = d;
        config.delta_max = config.delta_max.max(d);
    }
    if let Some(g) = r.gap {
        config.gap = g;
    }
    if let Some(t) = &r.thresholds {
        config.thresholds = t.clone();
    }
}

fn threads(r: &RunArgs) -> usize {
    r.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn finish_run(plan: &Plan, r: &RunArgs, out: &Path) -> Result<(), Failure> {
    let result = pilotdesign::run_plan(plan, threads(r)).map_err(|e| Failure::Experiment(e.to_string()))?;
    io::write_experiment(out, &result)?;
    if r.plots {
        for metric in ["composite", "are", "rrmse"] {
            if let Some(svg) = boxplot_svg(&result.summary, metric) {
                let path = out.join(format!("boxplot_{}.svg", metric));
                fs::write(&path, svg).map_err(|e| Failure::Io(format!("{}: {}", path.display(), e)))?;
            }
        }
    }
    print_table(plan.config(), &result);
    let frac = result.failure_fraction();
    if frac > plan.config().failure_tolerance {
        return Err(Failure::Experiment(format!(
            "{} of {} cells failed (tolerance {}); see failures.csv",
            result.failures.len(),
            result.cells,
            io::fmt_float(plan.config().failure_tolerance)
        )));
    }
    Ok(())
}

fn print_table(config: &ExperimentConfig, result: &ExperimentResult) {
    println!("median composite criterion");
    print!("{:>10}", "n");
    for s in &config.structures {
        print!("{:>12}", s.as_str());
    }
    println!();
    for &n in &config.sim.subject_counts {
        print!("{:>10}", n);
        for &s in &config.structures {
            match result.summary_for(s, n, "composite") {
                Some(r) => print!("{:>12.4}", r.median),
                None => print!("{:>12}", "-"),
            }
        }
        println!();
    }
    if !result.failures.is_empty() {
        println!("{} of {} cells failed", result.failures.len(), result.cells);
    }
}

/// The config with flag overrides applied, and the output directory.
fn run_config(r: &RunArgs) -> Result<(ExperimentConfig, PathBuf), Failure> {
    let (mut config, out) = load_run_config(r.config.as_deref())?;
    apply_overrides(&mut config, r);
    let out =
        r.out.clone().or(out).ok_or_else(|| invalid("no output directory: pass --out or set 'out' in the config"))?;
    Ok((config, out))
}

fn experiment(a: ExperimentArgs) -> Result<(), Failure> {
    let (config, out) = run_config(&a.run)?;
    let plan = Plan::synthetic(&config).map_err(invalid)?;
    finish_run(&plan, &a.run, &out)
}

fn real_data(a: RealDataArgs) -> Result<(), Failure> {
    let (config, out) = run_config(&a.run)?;
    let data = io::read_dense_csv(&a.data, a.layout)?;
    let plan = Plan::real(&data.to_dense_data(), &config).map_err(invalid)?;
    finish_run(&plan, &a.run, &out)
}
