use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use modal_sr::error::{Error, Result};
use modal_sr::experiments::{csv_table, run_monte_carlo, write_sweep_outputs, ExperimentConfig};
use modal_sr::geometry::{build_direction_grid, build_hybrid, DirectionGrid, HybridConfig, MicArray, SubArray, Vec3};
use modal_sr::io::{load_json, read_complex, write_atomic, write_json, write_matrix, Matrix};
use modal_sr::metrics::{score_map, EnergyMap, MismatchKernel};
use modal_sr::modal::{mean_principal_angle, MAX_SH_ORDER, sh_matrix, sh_order_for_modes, svd_decompose, truncate};
use modal_sr::propagation::{plane_wave_matrix, synthesize_scene, ObservationBlock, SceneSpec, SourceTruth};
use modal_sr::solver::{recover, recover_joint, IrlsParams};

#[derive(Parser)]
#[command(name = "modal-sr", version, long_version = LONG_VERSION)]
#[command(about = "Sparse plane-wave recovery for hybrid microphone arrays")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

const LONG_VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("CARGO_PKG_NAME"), ", SFMX v1)");

#[derive(Args)]
struct Common {
    /// JSON configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed; overrides the seed in the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Omit the timestamp header line from CSV outputs
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write microphone positions as CSV (--config: array JSON)
    Geometry,
    /// Write the plane-wave transfer matrix as SFMX (--config: array JSON)
    Dictionary(DictArgs),
    /// Write singular values and the angle to the SH subspace (--config: array JSON)
    Modes(ModesArgs),
    /// Synthesize observations, one SFMX per frequency (--config: scene JSON)
    Simulate(SimulateArgs),
    /// Recover a directional energy map (--config: array JSON)
    Recover(RecoverArgs),
    /// Score an energy map against ground truth
    Evaluate(EvaluateArgs),
    /// Run a Monte-Carlo sweep (--config: experiment JSON, --out: directory)
    Sweep,
}

#[derive(Args)]
struct ArrayArgs {
    /// Use only the spherical sub-array
    #[arg(long)]
    sma_only: bool,
    #[arg(long, default_value_t = 3)]
    grid_level: usize,
}

#[derive(Args)]
struct DictArgs {
    #[arg(long)]
    frequency: f64,
    #[command(flatten)]
    array: ArrayArgs,
}

#[derive(Args)]
struct ModesArgs {
    #[arg(long)]
    frequency: f64,
    #[command(flatten)]
    array: ArrayArgs,
}

#[derive(Args)]
struct SimulateArgs {
    /// Frequencies in Hz, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    freqs: Vec<f64>,
    /// Hybrid array JSON (defaults to the 64 + 4x8 layout)
    #[arg(long)]
    array: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Sma,
    Joint,
    Modal,
}

#[derive(Args)]
struct RecoverArgs {
    /// Observation matrix (M x T complex SFMX) for the full hybrid array
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    frequency: f64,
    #[arg(long, value_enum, default_value = "modal")]
    method: MethodArg,
    #[arg(long, default_value_t = 16)]
    modes: usize,
    /// Final norm exponent
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long, default_value_t = 3)]
    grid_level: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Energy map CSV written by `recover`
    #[arg(long)]
    energy: PathBuf,
    /// Ground truth JSON written by `simulate`
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 3)]
    grid_level: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command, &cli.common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}

fn run(command: Command, common: &Common) -> Result<()> {
    match command {
        Command::Geometry => geometry(common),
        Command::Dictionary(a) => dictionary(common, &a),
        Command::Modes(a) => modes(common, &a),
        Command::Simulate(a) => simulate(common, &a),
        Command::Recover(a) => recover_cmd(common, &a),
        Command::Evaluate(a) => evaluate(common, &a),
        Command::Sweep => sweep(common),
    }
}

fn out_path(common: &Common) -> Result<&Path> {
    common.out.as_deref().ok_or_else(|| Error::InvalidArgument("--out is required".into()))
}

fn header(common: &Common) -> Option<String> {
    if common.deterministic {
        return None;
    }
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    Some(format!("generated by modal-sr {} at unix time {secs}", env!("CARGO_PKG_VERSION")))
}

fn write_csv(common: &Common, path: &Path, columns: &[&str], records: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let text = csv_table(header(common).as_deref(), columns, records)?;
    write_atomic(path, text.as_bytes())
}

fn hybrid_config(path: Option<&Path>) -> Result<HybridConfig> {
    path.map_or_else(|| Ok(HybridConfig::default()), load_json)
}

fn array_from(common: &Common, args: &ArrayArgs) -> Result<MicArray> {
    let mut cfg = hybrid_config(common.config.as_deref())?;
    if args.sma_only {
        cfg = cfg.sma_only();
    }
    build_hybrid(&cfg)
}

fn geometry(common: &Common) -> Result<()> {
    let array = build_hybrid(&hybrid_config(common.config.as_deref())?)?;
    let records = array
        .positions()
        .iter()
        .zip(array.labels())
        .enumerate()
        .map(|(i, (p, l))| vec![i.to_string(), l.to_string(), p.x.to_string(), p.y.to_string(), p.z.to_string()]);
    write_csv(common, out_path(common)?, &["index", "label", "x_m", "y_m", "z_m"], records)
}

fn dictionary(common: &Common, args: &DictArgs) -> Result<()> {
    let array = array_from(common, &args.array)?;
    let grid = build_direction_grid(args.array.grid_level)?;
    let h = plane_wave_matrix(&array, &grid, args.frequency)?;
    write_matrix(out_path(common)?, &Matrix::Complex(h.entries))
}

fn modes(common: &Common, args: &ModesArgs) -> Result<()> {
    let array = array_from(common, &args.array)?;
    let grid = build_direction_grid(args.array.grid_level)?;
    let basis = svd_decompose(&plane_wave_matrix(&array, &grid, args.frequency)?)?;
    let mut records = Vec::new();
    for (i, sigma) in basis.sigma.iter().enumerate() {
        let k = i + 1;
        let angle = match sh_order_for_modes(k).filter(|&o| o <= MAX_SH_ORDER) {
            Some(order) => {
                let sh = sh_matrix(&grid, order)?.to_complex();
                format!("{}", mean_principal_angle(&truncate(&basis, k)?.field_modes(), &sh)?)
            }
            None => String::new(),
        };
        records.push(vec![k.to_string(), sigma.to_string(), angle]);
    }
    write_csv(common, out_path(common)?, &["mode", "sigma", "sh_angle_deg"], records)
}

fn simulate(common: &Common, args: &SimulateArgs) -> Result<()> {
    let path = common.config.as_deref().ok_or_else(|| Error::InvalidArgument("--config (scene JSON) is required".into()))?;
    let mut scene: SceneSpec = load_json(path)?;
    if let Some(seed) = common.seed {
        scene.seed = seed;
    }
    let array = build_hybrid(&hybrid_config(args.array.as_deref())?)?;
    let blocks = synthesize_scene(&scene, &array, &args.freqs, scene.seed)?;
    let dir = out_path(common)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for b in &blocks {
        write_matrix(&dir.join(format!("obs-{}hz.sfmx", b.frequency)), &Matrix::Complex(b.snapshots.clone()))?;
    }
    let truth: &[SourceTruth] = blocks.first().map_or(&[], |b| &b.truth);
    write_json(&dir.join("truth.json"), &truth)
}

fn recover_cmd(common: &Common, args: &RecoverArgs) -> Result<()> {
    let mut cfg = hybrid_config(common.config.as_deref())?;
    if args.method == MethodArg::Sma {
        cfg = cfg.sma_only();
    }
    let full = build_hybrid(&hybrid_config(common.config.as_deref())?)?;
    let array = build_hybrid(&cfg)?;
    let grid = build_direction_grid(args.grid_level)?;
    let mut snapshots = read_complex(&args.input)?;
    if snapshots.nrows() != full.len() {
        return Err(Error::InvalidArgument(format!(
            "observation has {} rows, array has {} microphones",
            snapshots.nrows(),
            full.len()
        )));
    }
    if args.method == MethodArg::Sma {
        snapshots = snapshots.select_rows(full.indices_of(SubArray::Sma).iter());
    }
    let block = ObservationBlock { frequency: args.frequency, snapshots, truth: Vec::new(), seed: common.seed.unwrap_or(0) };
    let mut params = IrlsParams::default();
    if let Some(p) = args.p {
        params.p_final = p;
        params.p_init = params.p_init.max(p);
    }
    if let Some(n) = args.max_iters {
        params.max_iters = n;
    }
    params.validate()?;
    let h = plane_wave_matrix(&array, &grid, args.frequency)?;
    let sol = match args.method {
        MethodArg::Sma | MethodArg::Joint => recover_joint(&block, &h, &params)?,
        MethodArg::Modal => recover(&block, &truncate(&svd_decompose(&h)?, args.modes)?, &params)?,
    };
    log::info!(
        "{} iterations, residual {:.3e}, diffuseness {:.3}",
        sol.diagnostics.iterations,
        sol.diagnostics.residual,
        sol.diagnostics.diffuseness
    );
    write_csv(common, out_path(common)?, &ENERGY_COLUMNS, energy_records(&grid, &sol.energy))
}

const ENERGY_COLUMNS: [&str; 5] = ["index", "x", "y", "z", "power"];

fn energy_records<'a>(grid: &'a DirectionGrid, energy: &'a [f64]) -> impl Iterator<Item = Vec<String>> + 'a {
    grid.directions()
        .iter()
        .zip(energy)
        .enumerate()
        .map(|(i, (d, p))| vec![i.to_string(), d.x.to_string(), d.y.to_string(), d.z.to_string(), p.to_string()])
}

fn parse_energy_csv(path: &Path) -> Result<Vec<f64>> {
    let bad = |msg: String| Error::InvalidArgument(format!("{}: {msg}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?;
    if headers.iter().ne(ENERGY_COLUMNS) {
        return Err(bad(format!("expected columns {}", ENERGY_COLUMNS.join(","))));
    }
    reader
        .records()
        .map(|rec| {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            rec[4].trim().parse::<f64>().map_err(|_| bad(format!("line {}: power is not a number", rec.position().map_or(0, |p| p.line()))))
        })
        .collect()
}

fn evaluate(common: &Common, args: &EvaluateArgs) -> Result<()> {
    let grid = build_direction_grid(args.grid_level)?;
    let power = parse_energy_csv(&args.energy)?;
    if power.len() != grid.len() {
        return Err(Error::InvalidArgument(format!("energy map has {} rows, grid has {}", power.len(), grid.len())));
    }
    let truth: Vec<SourceTruth> = load_json(&args.truth)?;
    let dirs: Vec<Vec3> = truth.iter().map(SourceTruth::direction).collect();
    let score = score_map(&grid, &MismatchKernel::new(&grid), &EnergyMap::new(power, "recovered")?, &dirs)?;
    let columns = ["mismatch", "angular_error_deg", "miss_rate"];
    let record = vec![score.mismatch.to_string(), score.mean_angular_error_deg.to_string(), score.miss_rate.to_string()];
    match &common.out {
        Some(p) => write_csv(common, p, &columns, [record]),
        None => {
            print!("{}", csv_table(None, &columns, [record])?);
            Ok(())
        }
    }
}

fn sweep(common: &Common) -> Result<()> {
    let mut config: ExperimentConfig = match &common.config {
        Some(p) => load_json(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.master_seed = seed;
    }
    let dir = out_path(common)?;
    let table = run_monte_carlo(&config)?;
    let failed = table.rows.iter().filter(|r| !r.is_ok()).count();
    if failed > 0 {
        log::warn!("{failed} of {} rows failed", table.rows.len());
    }
    write_sweep_outputs(dir, &config, &table, header(common).as_deref())?;
    Ok(())
}
