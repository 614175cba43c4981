//! Subcommands of the `nestnet` binary.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nestnet_core::data::synth_bars_split;
use nestnet_core::slicing::{cost_table, select_slice, slice};
use nestnet_core::training::{evaluate, train, LossWeightMatrix, MetricsLog};
use nestnet_core::verify::{run_all, with_corrupted_mask, VerifyConfig, VerifyReport};
use nestnet_core::{ArchDescriptor, Budget, Dataset, Error, Grid, NestedModel, SliceCost, SliceId};

use crate::config::{parse_decay, resolve_arch, ArchSpec, DataSpec, LambdaSpec, PartialRunConfig, RunConfig};
use crate::container::{self, Loaded, Payload};
use crate::csvio::{read_grid, write_grid, write_metrics};
use crate::{cifar, Failure};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  i/o or other runtime error (including a diverged training run)
  2  configuration error (bad flags, config or architecture file)
  3  data error (unreadable dataset, malformed CSV or model file)
  4  no slice satisfies the budget (select)
  5  verification failure (verify)

Environment:
  NESTNET_OUT  default output directory for commands that write files";

#[derive(Debug, Parser)]
#[command(
    name = "nestnet",
    version,
    about = "Train, slice, cost and verify doubly nested convolutional networks",
    after_help = EXIT_CODES
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train all heads jointly and write model, metrics and resolved config.
    Train(TrainArgs),
    /// Evaluate the accuracy grid of a model, optionally against a baseline.
    Grid(GridArgs),
    /// Extract the standalone (d, w) sub-model.
    Slice(SliceArgs),
    /// Write parameter, MAC and peak-activation tables for every slice.
    Cost(CostArgs),
    /// Pick the best-scoring slice that fits a budget.
    Select(SelectArgs),
    /// Run the invariant suite on a model.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Architecture: `toy`, `resnet32` or a TOML architecture file.
    #[arg(long)]
    pub arch: Option<String>,
    /// Dataset: `synth` or `cifar10:DIR`.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Mini-batch size.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Learning-rate decay points as FRACTION:FACTOR pairs, e.g. `0.6:0.1,0.8:0.1`, or `none`.
    #[arg(long)]
    pub decay: Option<String>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Seed for batching and synthetic data.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Loss weights: flat, descend, ascend, custom:FILE (L×C CSV) or pick:L,C,K.
    #[arg(long)]
    pub lambda: Option<String>,
    /// Base of the descend/ascend weights (must exceed 1).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Evaluate every N steps (0: only at the end).
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<String>,
    /// Output directory.
    #[arg(long, env = "NESTNET_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset: `synth` or `cifar10:DIR`.
    #[arg(long, default_value = "synth")]
    pub data: String,
    /// Seed of the synthetic data (its test split uses seed + 1).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 600)]
    pub train_count: usize,
    #[arg(long, default_value_t = 300)]
    pub test_count: usize,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Baseline accuracy grid (L×C CSV); writes `delta.csv` = grid − baseline.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, env = "NESTNET_OUT", default_value = "nestnet-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SliceArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Layer groups to keep.
    #[arg(long)]
    pub d: usize,
    /// Channel groups to keep.
    #[arg(long)]
    pub w: usize,
    /// Output container path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// Model container to cost.
    #[arg(long, conflicts_with = "arch", required_unless_present = "arch")]
    pub model: Option<PathBuf>,
    /// Architecture to cost instead of a model (`toy`, `resnet32` or a file).
    #[arg(long)]
    pub arch: Option<String>,
    /// Input side length (defaults to the architecture's).
    #[arg(long)]
    pub input_hw: Option<usize>,
    #[arg(long, env = "NESTNET_OUT", default_value = "nestnet-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Directory holding params.csv, macs.csv and peak_activation.csv.
    #[arg(long)]
    pub cost: PathBuf,
    /// L×C score table (higher is better), e.g. an accuracy grid.
    #[arg(long)]
    pub score: PathBuf,
    #[arg(long)]
    pub max_macs: Option<u64>,
    #[arg(long)]
    pub max_params: Option<u64>,
    /// Peak live activation scalars.
    #[arg(long)]
    pub max_mem: Option<u64>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Model container to verify.
    #[arg(long, conflicts_with = "fresh", required_unless_present = "fresh")]
    pub model: Option<PathBuf>,
    /// Verify a freshly initialized model of this architecture instead.
    #[arg(long)]
    pub fresh: Option<String>,
    /// Connect every channel of the first block's first convolution before
    /// verifying (negative control: causality must fail).
    #[arg(long)]
    pub corrupt_mask: bool,
    /// Random inputs per equivalence and causality sweep.
    #[arg(long, default_value_t = 100)]
    pub inputs: usize,
    /// Parameters sampled by the gradient check.
    #[arg(long, default_value_t = 300)]
    pub grad_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Slice(a) => cmd_slice(a),
        Command::Cost(a) => cmd_cost(a),
        Command::Select(a) => cmd_select(a),
        Command::Verify(a) => cmd_verify(a),
    }
}

fn core_failure(e: Error) -> Failure {
    match e {
        Error::InvalidDataset(_) | Error::LabelOutOfRange { .. } | Error::NotFrozen | Error::NonCausalMask { .. } => {
            Failure::Data(e.to_string())
        }
        Error::Diverged { .. } | Error::NoForwardPass | Error::BadParameter { .. } => Failure::Io(e.to_string()),
        _ => Failure::Config(e.to_string()),
    }
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(io(dir))
}

/// Merges `--config` with flag overrides into a fully resolved run.
pub fn resolve_train(a: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut p = match &a.config {
        Some(path) => PartialRunConfig::load(path)?,
        None => PartialRunConfig::default(),
    };
    if let Some(arch) = &a.arch {
        p.arch = Some(ArchSpec::from(&resolve_arch(arch)?));
    }
    if let Some(d) = &a.data {
        p.data = Some(DataSpec {
            source: d.clone(),
            ..p.data.unwrap_or_default()
        });
    }
    if let Some(d) = &a.decay {
        p.decay = Some(parse_decay(d).map_err(Failure::Config)?);
    }
    macro_rules! take {
        ($($f:ident),*) => { $( if a.$f.is_some() { p.$f = a.$f.clone(); } )* };
    }
    take!(steps, batch, lr, momentum, weight_decay, seed, lambda, gamma, eval_every, precision, out);
    let cfg = p.resolve(PathBuf::from("nestnet-out"));
    cfg.arch.to_descriptor().map_err(Failure::Config)?;
    cfg.train_config()?;
    cfg.lambda()?;
    Ok(cfg)
}

/// Loads the train and test splits described by `spec` and checks them
/// against the architecture.
pub fn load_data(spec: &DataSpec, arch: &ArchDescriptor, seed: u64) -> Result<(Dataset, Dataset), Failure> {
    let (train, test) = if spec.source == "synth" {
        if arch.input_channels != 1 {
            return Err(Failure::Data(format!(
                "synthetic bars are single-channel, architecture expects {} channels",
                arch.input_channels
            )));
        }
        synth_bars_split(spec.train_count, spec.test_count, arch.input_hw, arch.classes, spec.noise, seed)
            .map_err(|e| Failure::Data(e.to_string()))?
    } else if let Some(dir) = spec.source.strip_prefix("cifar10:") {
        cifar::load_cifar10(Path::new(dir))?
    } else {
        return Err(Failure::Config(format!("unknown data source {:?}; use synth or cifar10:DIR", spec.source)));
    };
    let (c, h, w) = train.image_shape();
    if (c, h, w) != (arch.input_channels, arch.input_hw, arch.input_hw) || train.classes() != arch.classes {
        return Err(Failure::Data(format!(
            "dataset images are {c}x{h}x{w} with {} classes; architecture expects {}x{}x{} with {}",
            train.classes(),
            arch.input_channels,
            arch.input_hw,
            arch.input_hw,
            arch.classes
        )));
    }
    Ok((train, test))
}

fn weights_for(cfg: &RunConfig, layers: usize, groups: usize) -> Result<LossWeightMatrix, Failure> {
    let spec = cfg.lambda()?;
    match &spec {
        LambdaSpec::Custom(path) => {
            let g = read_grid(path, Some((layers, groups)))?;
            LossWeightMatrix::custom(g).map_err(core_failure)
        }
        other => LossWeightMatrix::make(other.kind(cfg.gamma)?, layers, groups).map_err(core_failure),
    }
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let cfg = resolve_train(&a)?;
    let arch = cfg.arch.to_descriptor().map_err(Failure::Config)?;
    let (train_set, test_set) = load_data(&cfg.data, &arch, cfg.seed)?;
    create_dir(&cfg.out)?;
    match cfg.precision.as_str() {
        "f64" => train_and_save::<f64>(&cfg, &arch, &train_set, &test_set),
        _ => train_and_save::<f32>(&cfg, &arch, &train_set, &test_set),
    }
}

fn train_and_save<S: Payload>(cfg: &RunConfig, arch: &ArchDescriptor, tr: &Dataset, te: &Dataset) -> Result<(), Failure> {
    let model = NestedModel::<S>::from_arch(arch).map_err(core_failure)?;
    let weights = weights_for(cfg, model.layers(), model.groups())?;
    let tc = cfg.train_config()?;
    let (model, log) = train(model, tr, Some(te), &tc, &weights).map_err(core_failure)?;
    let out = &cfg.out;
    container::save(&model, &out.join("model.nnet"))?;
    let comments = vec![
        format!("lambda: {}", weights.kind()),
        format!("seed: {}", cfg.seed),
        format!("steps: {}", cfg.steps),
    ];
    write_metrics(&out.join("metrics.csv"), &log, &comments)?;
    if let Some(last) = log.last() {
        write_grid(&out.join("accuracy.csv"), &last.accuracy, &[format!("step {}", last.step)])?;
    }
    write_train_loss(&out.join("train_loss.csv"), &log)?;
    let echo = toml::to_string(cfg).map_err(|e| Failure::Io(e.to_string()))?;
    let path = out.join("config.toml");
    std::fs::write(&path, echo).map_err(io(&path))?;
    if let Some(last) = log.last() {
        let (l, c) = (model.layers(), model.groups());
        println!(
            "trained {} steps; head ({l}, {c}) test accuracy {:.4}; outputs in {}",
            cfg.steps,
            last.accuracy[(l - 1, c - 1)],
            out.display()
        );
    }
    Ok(())
}

fn write_train_loss(path: &Path, log: &MetricsLog) -> Result<(), Failure> {
    let mut text = String::from("step,loss\n");
    for (i, l) in log.train_loss.iter().enumerate() {
        text.push_str(&format!("{},{l}\n", i + 1));
    }
    std::fs::write(path, text).map_err(io(path))
}

fn load_full(path: &Path) -> Result<Loaded, Failure> {
    let loaded = container::load(path)?;
    if loaded.kind() != container::Kind::Full {
        return Err(Failure::Data(format!("{} holds a sliced model; this command needs a full model", path.display())));
    }
    Ok(loaded)
}

fn data_spec(a: &DataArgs) -> DataSpec {
    DataSpec {
        source: a.data.clone(),
        train_count: a.train_count,
        test_count: a.test_count,
        noise: a.noise,
    }
}

fn cmd_grid(a: GridArgs) -> Result<(), Failure> {
    let loaded = load_full(&a.model)?;
    let accuracy = match &loaded {
        Loaded::Full32(m) => grid_of(m, &a)?,
        Loaded::Full64(m) => grid_of(m, &a)?,
        _ => unreachable!("checked by load_full"),
    };
    create_dir(&a.out)?;
    write_grid(&a.out.join("accuracy.csv"), &accuracy, &[format!("model: {}", a.model.display())])?;
    if let Some(base) = &a.baseline {
        let b = read_grid(base, Some((accuracy.rows(), accuracy.cols())))?;
        let delta = Grid::from_fn(accuracy.rows(), accuracy.cols(), |r, c| accuracy[(r, c)] - b[(r, c)]);
        write_grid(&a.out.join("delta.csv"), &delta, &[format!("baseline: {}", base.display())])?;
    }
    for r in 0..accuracy.rows() {
        let row: Vec<String> = accuracy.row(r).iter().map(|v| format!("{v:.3}")).collect();
        println!("{}", row.join(" "));
    }
    Ok(())
}

fn grid_of<S: Payload>(m: &NestedModel<S>, a: &GridArgs) -> Result<Grid<f64>, Failure> {
    let (_, test) = load_data(&data_spec(&a.data), m.arch(), a.data.seed)?;
    Ok(evaluate(m, &test).map_err(core_failure)?.accuracy)
}

fn cmd_slice(a: SliceArgs) -> Result<(), Failure> {
    let id = SliceId { d: a.d, w: a.w };
    let params = match load_full(&a.model)? {
        Loaded::Full32(m) => save_slice(&m, id, &a.out)?,
        Loaded::Full64(m) => save_slice(&m, id, &a.out)?,
        _ => unreachable!("checked by load_full"),
    };
    println!("slice {id}: {params} parameters written to {}", a.out.display());
    Ok(())
}

fn save_slice<S: Payload>(m: &NestedModel<S>, id: SliceId, out: &Path) -> Result<usize, Failure> {
    let s = slice(m, id).map_err(core_failure)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    container::save(&s, out)?;
    Ok(s.param_count())
}

pub const COST_FILES: [&str; 3] = ["params.csv", "macs.csv", "peak_activation.csv"];

fn cmd_cost(a: CostArgs) -> Result<(), Failure> {
    let (arch, groups) = match (&a.model, &a.arch) {
        (Some(path), _) => match load_full(path)? {
            Loaded::Full32(m) => (m.arch().clone(), m.group_spec().clone()),
            Loaded::Full64(m) => (m.arch().clone(), m.group_spec().clone()),
            _ => unreachable!("checked by load_full"),
        },
        (None, Some(spec)) => {
            let arch = resolve_arch(spec)?;
            let groups = nestnet_core::GroupSpec::proportional(&arch.stages, arch.groups).map_err(core_failure)?;
            (arch, groups)
        }
        (None, None) => return Err(Failure::Config("cost needs --model or --arch".into())),
    };
    let hw = a.input_hw.unwrap_or(arch.input_hw);
    let table = cost_table(&arch, &groups, hw).map_err(core_failure)?;
    create_dir(&a.out)?;
    let note = vec![format!("input {hw}x{hw}")];
    write_grid(&a.out.join(COST_FILES[0]), &table.map(|c| c.params), &note)?;
    write_grid(&a.out.join(COST_FILES[1]), &table.map(|c| c.macs), &note)?;
    write_grid(&a.out.join(COST_FILES[2]), &table.map(|c| c.peak_activation), &note)?;
    println!("cost tables ({}x{}) written to {}", table.rows(), table.cols(), a.out.display());
    Ok(())
}

fn integral(g: &Grid<f64>, path: &Path) -> Result<Grid<u64>, Failure> {
    if let Some(((r, c), v)) = g.iter().find(|(_, v)| !(v.fract() == 0.0 && **v >= 0.0 && **v <= u64::MAX as f64)) {
        return Err(Failure::Data(format!(
            "{}: row {}, column {}: {v} is not a non-negative integer",
            path.display(),
            r + 1,
            c + 1
        )));
    }
    Ok(g.map(|&v| v as u64))
}

/// Reads the three cost tables written by `cost`.
pub fn read_cost_dir(dir: &Path) -> Result<Grid<SliceCost>, Failure> {
    let paths: Vec<PathBuf> = COST_FILES.iter().map(|f| dir.join(f)).collect();
    let params = integral(&read_grid(&paths[0], None)?, &paths[0])?;
    let dims = Some((params.rows(), params.cols()));
    let macs = integral(&read_grid(&paths[1], dims)?, &paths[1])?;
    let peak = integral(&read_grid(&paths[2], dims)?, &paths[2])?;
    Ok(Grid::from_fn(params.rows(), params.cols(), |r, c| SliceCost {
        params: params[(r, c)],
        macs: macs[(r, c)],
        peak_activation: peak[(r, c)],
    }))
}

fn cmd_select(a: SelectArgs) -> Result<(), Failure> {
    let costs = read_cost_dir(&a.cost)?;
    let scores = read_grid(&a.score, Some((costs.rows(), costs.cols())))?;
    let budget = Budget {
        max_macs: a.max_macs,
        max_params: a.max_params,
        max_peak_activation: a.max_mem,
    };
    match select_slice(&costs, &scores, &budget).map_err(core_failure)? {
        Some(id) => {
            let c = costs[(id.d - 1, id.w - 1)];
            println!("{} {}", id.d, id.w);
            eprintln!(
                "score {} params {} macs {} peak_activation {}",
                scores[(id.d - 1, id.w - 1)],
                c.params,
                c.macs,
                c.peak_activation
            );
            Ok(())
        }
        None => {
            println!("none");
            Err(Failure::Infeasible(format!("{budget:?}")))
        }
    }
}

fn cmd_verify(a: VerifyArgs) -> Result<(), Failure> {
    let config = VerifyConfig {
        inputs: a.inputs,
        grad_samples: a.grad_samples,
        seed: a.seed,
        ..VerifyConfig::default()
    };
    let report = match (&a.model, &a.fresh) {
        (Some(path), _) => match load_full(path)? {
            Loaded::Full32(m) => verify_model(&m, a.corrupt_mask, &config)?,
            Loaded::Full64(m) => verify_model(&m, a.corrupt_mask, &config)?,
            _ => unreachable!("checked by load_full"),
        },
        (None, Some(spec)) => {
            let m = NestedModel::<f32>::from_arch(&resolve_arch(spec)?).map_err(core_failure)?;
            verify_model(&m, a.corrupt_mask, &config)?
        }
        (None, None) => return Err(Failure::Config("verify needs --model or --fresh".into())),
    };
    for c in &report.checks {
        println!(
            "{} {:<28} max_error={:.3e}  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.max_error,
            c.detail
        );
    }
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        Err(Failure::Verification(failed.join(", ")))
    }
}

fn verify_model<S: Payload>(m: &NestedModel<S>, corrupt: bool, config: &VerifyConfig) -> Result<VerifyReport, Failure> {
    let model = if corrupt {
        with_corrupted_mask(m, config.seed).map_err(core_failure)?
    } else {
        m.clone()
    };
    run_all(&model, config).map_err(core_failure)
}
