use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use nalgebra::DMatrix;

use neuroprune::cluster::{prune_cluster, ClusterConfig, DEFAULT_MDS_DIMS};
use neuroprune::entropy::{mi_matrix_batched, Alpha, MiMatrix};
use neuroprune::experiment::{
    ablate_alpha, ablate_mi_vs_pcc, ablate_sample_fraction, ablate_seed_count, flops_grid, sweep_random, unpruned_row,
    EstimationConfig, SweepConfig, Trained,
};
use neuroprune::metrics::{
    format_metrics_table, keep_for_flops, kl_proxy, relative_flops, write_metrics_csv, Architecture, FfnShape, FlopsScope,
    MetricsRow,
};
use neuroprune::pairwise::{prune_pairwise, prune_pcc, prune_random, prune_weight_magnitude};
use neuroprune::sigma::{tune_all, SigmaSchedule, TuningConfig};
use neuroprune::toy::{synth_task, train_toy_ffn, TrainConfig};
use neuroprune::{ActivationMatrix, PruneMask};

use crate::amx::{AmxFile, AmxMetadata};
use crate::checkpoint::{self, TaskRecipe};
use crate::config::{pick, Config};
use crate::demo::{demo_amx, PLANTED_DUPLICATES};
use crate::error::{CliError, CliResult};
use crate::fsio::{read_json, write_atomic, write_json};
use crate::maskfile::MaskFile;

#[derive(Debug, Parser)]
#[command(name = "neuroprune", version, about = "Label-free FFN neuron pruning driven by kernel mutual information")]
pub struct Cli {
    /// TOML file with defaults; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tune per-neuron kernel widths and write them as JSON.
    TuneSigma(TuneSigmaArgs),
    /// Compute the full pairwise MI matrix as CSV.
    Mi(MiArgs),
    /// Produce a keep/drop mask for one layer.
    #[command(subcommand)]
    Prune(PruneCommand),
    /// Train or evaluate the built-in toy FFN.
    #[command(subcommand)]
    Toy(ToyCommand),
    /// Ablation sweeps on the toy model, written as metrics CSV.
    #[command(subcommand)]
    Ablate(AblateCommand),
    /// Run the pipeline on the shipped demo activations.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// AMX activation file (rows are samples, columns neurons).
    #[arg(long)]
    pub activations: PathBuf,
    /// Random share of rows used for estimation.
    #[arg(long)]
    pub sample_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TuningArgs {
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seed for batch shuffling and row subsampling.
    #[arg(long = "tuning-seed")]
    pub tuning_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TuneSigmaArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub tuning: TuningArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Kernel widths from `tune-sigma`; tuned on the fly when absent.
    #[arg(long)]
    pub sigmas: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[command(flatten)]
    pub tuning: TuningArgs,
}

#[derive(Debug, Args)]
pub struct MiArgs {
    #[command(flatten)]
    pub est: EstimateArgs,
    /// Average MI over row blocks of this size instead of using all rows at once.
    #[arg(long)]
    pub mi_batch: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum PruneCommand {
    /// Randomized pairwise filtering with an MI threshold.
    Pairwise(PairwiseArgs),
    /// MI distance, MDS and k-means at a FLOPs budget.
    Cluster(ClusterArgs),
    /// Uniformly random neurons at a FLOPs budget.
    Random(RandomArgs),
    /// Largest outgoing-weight L1 norms of a toy checkpoint.
    WeightMagnitude(WeightArgs),
    /// Pairwise filtering with an |Pearson| threshold.
    Pcc(PccArgs),
}

#[derive(Debug, Args)]
pub struct PairwiseArgs {
    #[command(flatten)]
    pub est: EstimateArgs,
    #[arg(long)]
    pub threshold_bits: Option<f64>,
    #[arg(long)]
    pub max_itr: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub est: EstimateArgs,
    /// Precomputed MI matrix CSV from `mi`.
    #[arg(long)]
    pub mi: Option<PathBuf>,
    #[arg(long)]
    pub target_flops: Option<f64>,
    #[arg(long)]
    pub mds_dim: Option<usize>,
    /// Number of k-means seeds to try.
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Toy checkpoint used to pick the seed with the smallest KL proxy.
    #[arg(long, requires = "inputs")]
    pub model: Option<PathBuf>,
    /// AMX file of model inputs for the KL proxy.
    #[arg(long, requires = "model")]
    pub inputs: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RandomArgs {
    /// Layer width; read from --activations when omitted.
    #[arg(long, required_unless_present = "activations")]
    pub k: Option<usize>,
    #[arg(long)]
    pub activations: Option<PathBuf>,
    #[arg(long)]
    pub target_flops: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct WeightArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub target_flops: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PccArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// |rho| at or above which the second neuron of a pair is dropped.
    #[arg(long)]
    pub threshold: f64,
    #[arg(long)]
    pub max_itr: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum ToyCommand {
    /// Train on the synthetic task and write a checkpoint.
    Train(ToyTrainArgs),
    /// Score masks (or the unpruned model) on the checkpoint's test split.
    Eval(ToyEvalArgs),
}

#[derive(Debug, Args)]
pub struct TaskArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d_in: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Latent factors behind the inputs; 0 gives independent inputs.
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ToyTrainArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Also dump post-GeLU activations of sampled training rows.
    #[arg(long)]
    pub activations_out: Option<PathBuf>,
    /// Also dump the matching input rows (for the KL proxy).
    #[arg(long)]
    pub inputs_out: Option<PathBuf>,
    /// Rows to dump, drawn from the training split.
    #[arg(long, default_value_t = 200)]
    pub dump_rows: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Scope {
    Ffn,
    WholeModel,
}

impl From<Scope> for FlopsScope {
    fn from(s: Scope) -> Self {
        match s {
            Scope::Ffn => FlopsScope::Ffn,
            Scope::WholeModel => FlopsScope::WholeModel,
        }
    }
}

#[derive(Debug, Args)]
pub struct ToyEvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Mask files to score; may be repeated. The unpruned model is always reported.
    #[arg(long)]
    pub mask: Vec<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Scope::Ffn)]
    pub scope: Scope,
}

#[derive(Debug, Subcommand)]
pub enum AblateCommand {
    /// Entropy order sweep.
    Alpha(AblateArgs),
    /// Share of training rows used for estimation.
    SampleFraction(AblateArgs),
    /// MI against |Pearson| in the pairwise filter; values are score quantiles.
    MiVsPcc(AblateArgs),
    /// Number of candidate k-means seeds.
    Seeds(AblateArgs),
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
    /// Points on the relative-FLOPs grid; 100 gives 1% steps.
    #[arg(long, default_value_t = 10)]
    pub flops_steps: usize,
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Include random-pruning rows for the same FLOPs grid.
    #[arg(long)]
    pub with_random: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Directory for the demo outputs.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Use this AMX file instead of the built-in demo activations.
    #[arg(long)]
    pub activations: Option<PathBuf>,
    #[arg(long, default_value_t = 0.75)]
    pub target_flops: f64,
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> CliResult<()> {
    let cfg = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::TuneSigma(a) => tune_sigma(&cfg, a, stdout),
        Command::Mi(a) => mi(&cfg, a, stdout),
        Command::Prune(p) => match p {
            PruneCommand::Pairwise(a) => prune_pairwise_cmd(&cfg, a, stdout),
            PruneCommand::Cluster(a) => prune_cluster_cmd(&cfg, a, stdout),
            PruneCommand::Random(a) => prune_random_cmd(&cfg, a, stdout),
            PruneCommand::WeightMagnitude(a) => prune_weight_cmd(&cfg, a, stdout),
            PruneCommand::Pcc(a) => prune_pcc_cmd(&cfg, a, stdout),
        },
        Command::Toy(t) => match t {
            ToyCommand::Train(a) => toy_train(&cfg, a, stdout),
            ToyCommand::Eval(a) => toy_eval(a, stdout),
        },
        Command::Ablate(a) => ablate(&cfg, a, stdout),
        Command::Demo(a) => demo(a, stdout),
    }
}

fn out_err(e: std::io::Error) -> CliError {
    CliError::io("writing to stdout", e)
}

struct Loaded {
    x: ActivationMatrix,
    layer_id: String,
}

fn load_activations(cfg: &Config, input: &InputArgs, seed: u64) -> CliResult<Loaded> {
    let file = AmxFile::read(&input.activations)?;
    let meta = file.metadata.clone().unwrap_or_default();
    let layer_id = meta.layer_id.unwrap_or_else(|| "layer".into());
    let recorded = meta.sample_fraction.unwrap_or(1.0);
    let x = ActivationMatrix::new(file.to_matrix(), layer_id.clone(), recorded)
        .map_err(|e| CliError::Data(format!("{}: {e}", input.activations.display())))?;
    let fraction = pick(input.sample_fraction, cfg.estimation.sample_fraction, 1.0);
    let x = x.subsample(fraction, seed)?;
    info!("loaded {} samples x {} neurons from {}", x.n_samples(), x.n_neurons(), input.activations.display());
    Ok(Loaded { x, layer_id })
}

fn tuning_config(cfg: &Config, t: &TuningArgs, alpha: Alpha) -> TuningConfig {
    let d = TuningConfig::default();
    TuningConfig {
        gamma: pick(t.gamma, cfg.tuning.gamma, d.gamma),
        beta: pick(t.beta, cfg.tuning.beta, d.beta),
        batch_size: pick(t.batch_size, cfg.tuning.batch_size, d.batch_size),
        seed: pick(t.tuning_seed, cfg.tuning.seed, d.seed),
        alpha,
        grid: d.grid,
    }
}

fn alpha_of(cfg: &Config, flag: Option<f64>) -> CliResult<Alpha> {
    Ok(Alpha::new(pick(flag, cfg.estimation.alpha, Alpha::DEFAULT.get()))?)
}

fn schedule_for(cfg: &Config, est: &EstimateArgs, x: &ActivationMatrix, alpha: Alpha) -> CliResult<SigmaSchedule> {
    match &est.sigmas {
        Some(path) => {
            let s: SigmaSchedule = read_json(path)?;
            s.validate(x.n_neurons()).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            Ok(s)
        }
        None => Ok(tune_all(x, &tuning_config(cfg, &est.tuning, alpha))?),
    }
}

fn tune_sigma(cfg: &Config, a: TuneSigmaArgs, out: &mut dyn Write) -> CliResult<()> {
    let alpha = alpha_of(cfg, None)?;
    let tc = tuning_config(cfg, &a.tuning, alpha);
    let loaded = load_activations(cfg, &a.input, tc.seed)?;
    let schedule = tune_all(&loaded.x, &tc)?;
    write_json(&a.out, &schedule)?;
    let (lo, hi) = schedule
        .neuron_sigmas
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &s| (l.min(s), h.max(s)));
    writeln!(
        out,
        "tuned {} kernel widths in [{lo:.4}, {hi:.4}] (layer width {:.4}, {} edge hits) -> {}",
        schedule.neuron_sigmas.len(),
        schedule.layer_sigma,
        schedule.endpoint_hits,
        a.out.display()
    )
    .map_err(out_err)
}

fn estimate_mi(cfg: &Config, est: &EstimateArgs, mi_batch: Option<usize>) -> CliResult<(Loaded, SigmaSchedule, MiMatrix, Alpha)> {
    let alpha = alpha_of(cfg, est.alpha)?;
    let seed = pick(est.tuning.tuning_seed, cfg.tuning.seed, 0);
    let loaded = load_activations(cfg, &est.input, seed)?;
    let schedule = schedule_for(cfg, est, &loaded.x, alpha)?;
    let batch = pick(mi_batch, cfg.estimation.mi_batch, loaded.x.n_samples()).min(loaded.x.n_samples());
    let mi = mi_matrix_batched(&loaded.x, &schedule, alpha, None, batch)?;
    Ok((loaded, schedule, mi, alpha))
}

pub fn write_mi_csv(path: &Path, mi: &MiMatrix) -> CliResult<()> {
    let v = mi.values();
    write_atomic(path, |w| {
        for i in 0..v.nrows() {
            let row: Vec<String> = (0..v.ncols()).map(|j| format!("{}", v[(i, j)])).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    })
}

pub fn read_mi_csv(path: &Path, alpha: Alpha) -> CliResult<MiMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|e| CliError::Data(format!("{}: line {}: {e}", path.display(), i + 1))))
                .collect()
        })
        .collect::<CliResult<_>>()?;
    let k = rows.len();
    if k == 0 || rows.iter().any(|r| r.len() != k) {
        return Err(CliError::Data(format!("{}: MI matrix must be square", path.display())));
    }
    let m = DMatrix::from_fn(k, k, |i, j| rows[i][j]);
    MiMatrix::from_full(m, alpha).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn mi(cfg: &Config, a: MiArgs, out: &mut dyn Write) -> CliResult<()> {
    let (loaded, _, mi, alpha) = estimate_mi(cfg, &a.est, a.mi_batch)?;
    write_mi_csv(&a.out, &mi)?;
    let (i, j) = mi.argmax_pair().expect("at least two neurons");
    writeln!(
        out,
        "MI over {} neurons (alpha {}), most redundant pair ({i}, {j}) at {:.4} bits -> {}",
        loaded.x.n_neurons(),
        alpha.get(),
        mi.get(i, j).unwrap_or(f64::NAN),
        a.out.display()
    )
    .map_err(out_err)
}

fn layer_flops(mask: &PruneMask, shape: Option<FfnShape>) -> CliResult<f64> {
    let shape = shape.unwrap_or(FfnShape { d_in: 1, hidden: mask.len(), d_out: 1 });
    Ok(relative_flops(std::slice::from_ref(mask), &Architecture::single(shape), FlopsScope::Ffn)?.relative)
}

fn emit_mask(path: &Path, mask: &PruneMask, layer_id: &str, shape: Option<FfnShape>, out: &mut dyn Write) -> CliResult<()> {
    let rf = layer_flops(mask, shape)?;
    write_json(path, &MaskFile::from_mask(mask, layer_id, rf))?;
    let dropped = mask.dropped_indices();
    writeln!(
        out,
        "{}: kept {}/{} neurons (relative FLOPs {rf:.4}); dropped {:?} -> {}",
        mask.method,
        mask.kept_count(),
        mask.len(),
        dropped,
        path.display()
    )
    .map_err(out_err)
}

fn prune_pairwise_cmd(cfg: &Config, a: PairwiseArgs, out: &mut dyn Write) -> CliResult<()> {
    let threshold = pick(a.threshold_bits, cfg.prune.threshold_bits, f64::NAN);
    if threshold.is_nan() {
        return Err(CliError::Usage("--threshold-bits is required for pairwise pruning".into()));
    }
    let alpha = alpha_of(cfg, a.est.alpha)?;
    let seed = pick(a.seed, cfg.prune.seed, 0);
    let loaded = load_activations(cfg, &a.est.input, pick(a.est.tuning.tuning_seed, cfg.tuning.seed, 0))?;
    let schedule = schedule_for(cfg, &a.est, &loaded.x, alpha)?;
    let max_itr = a.max_itr.or(cfg.prune.max_itr);
    let mask = prune_pairwise(&loaded.x, &schedule, alpha, threshold, max_itr, seed)?;
    info!("pairwise filter ran {} iterations", mask.iterations_used);
    emit_mask(&a.out, &mask, &loaded.layer_id, None, out)
}

fn target_flops(cfg: &Config, flag: Option<f64>) -> CliResult<f64> {
    flag.or(cfg.prune.target_flops)
        .ok_or_else(|| CliError::Usage("--target-flops is required".into()))
}

fn prune_cluster_cmd(cfg: &Config, a: ClusterArgs, out: &mut dyn Write) -> CliResult<()> {
    let target = target_flops(cfg, a.target_flops)?;
    let (layer_id, mi) = match &a.mi {
        Some(path) => {
            let alpha = alpha_of(cfg, a.est.alpha)?;
            let file = AmxFile::read(&a.est.input.activations)?;
            let layer_id = file.metadata.clone().and_then(|m| m.layer_id).unwrap_or_else(|| "layer".into());
            let mi = read_mi_csv(path, alpha)?;
            if mi.n_neurons() != file.k() {
                return Err(CliError::Data(format!("MI matrix covers {} neurons, activations have {}", mi.n_neurons(), file.k())));
            }
            (layer_id, mi)
        }
        None => {
            let (loaded, _, mi, _) = estimate_mi(cfg, &a.est, None)?;
            (loaded.layer_id, mi)
        }
    };
    let k = mi.n_neurons();
    let keep = keep_for_flops(k, target)?;
    let n_seeds = pick(a.seeds, cfg.prune.seeds, 500);
    let mut config = ClusterConfig::new(keep, n_seeds);
    config.mds_dims = Some(pick(a.mds_dim, cfg.prune.mds_dim, DEFAULT_MDS_DIMS.min(k - 1)));

    let (outcome, shape) = match (&a.model, &a.inputs) {
        (Some(model_path), Some(inputs_path)) => {
            let (model, _) = checkpoint::load(model_path)?;
            if model.hidden() != k {
                return Err(CliError::Data(format!("model has {} hidden units, activations have {k}", model.hidden())));
            }
            let inputs = AmxFile::read(inputs_path)?.to_matrix();
            if inputs.ncols() != model.d_in() {
                return Err(CliError::Data(format!("inputs have {} features, model expects {}", inputs.ncols(), model.d_in())));
            }
            let base = model.forward(&inputs)?;
            let eval = |m: &PruneMask| kl_proxy(&base, &model.forward_with_mask(m, &inputs)?);
            (prune_cluster(&mi, &config, Some(eval))?, Some(model.shape()))
        }
        _ => {
            if n_seeds > 1 {
                warn!("no --model/--inputs given: seed selection is skipped and the first seed is used");
            }
            (prune_cluster(&mi, &config, None::<fn(&PruneMask) -> neuroprune::Result<f64>>)?, None)
        }
    };
    if let Some(best) = outcome.scores.iter().find(|s| s.seed == outcome.mask.seed) {
        writeln!(out, "selected seed {} of {} (KL proxy {:.5} bits)", best.seed, outcome.scores.len(), best.loss).map_err(out_err)?;
    }
    emit_mask(&a.out, &outcome.mask, &layer_id, shape, out)
}

fn prune_random_cmd(cfg: &Config, a: RandomArgs, out: &mut dyn Write) -> CliResult<()> {
    let (k, layer_id) = match (a.k, &a.activations) {
        (Some(k), _) => (k, "layer".to_string()),
        (None, Some(p)) => {
            let f = AmxFile::read(p)?;
            (f.k(), f.metadata.and_then(|m| m.layer_id).unwrap_or_else(|| "layer".into()))
        }
        (None, None) => return Err(CliError::Usage("either --k or --activations is required".into())),
    };
    let keep = keep_for_flops(k, target_flops(cfg, a.target_flops)?)?;
    let mask = prune_random(k, keep, pick(a.seed, cfg.prune.seed, 0))?;
    emit_mask(&a.out, &mask, &layer_id, None, out)
}

fn prune_weight_cmd(cfg: &Config, a: WeightArgs, out: &mut dyn Write) -> CliResult<()> {
    let (model, _) = checkpoint::load(&a.model)?;
    let keep = keep_for_flops(model.hidden(), target_flops(cfg, a.target_flops)?)?;
    let mask = prune_weight_magnitude(model.w2(), keep)?;
    emit_mask(&a.out, &mask, "toy.fc1", Some(model.shape()), out)
}

fn prune_pcc_cmd(cfg: &Config, a: PccArgs, out: &mut dyn Write) -> CliResult<()> {
    let seed = pick(a.seed, cfg.prune.seed, 0);
    let loaded = load_activations(cfg, &a.input, seed)?;
    let mask = prune_pcc(&loaded.x, a.threshold, a.max_itr.or(cfg.prune.max_itr), seed)?;
    emit_mask(&a.out, &mask, &loaded.layer_id, None, out)
}

fn task_recipe(cfg: &Config, t: &TaskArgs) -> (TaskRecipe, TrainConfig) {
    let c = &cfg.toy;
    let recipe = TaskRecipe {
        seed: pick(t.seed, c.seed, 0),
        d_in: pick(t.d_in, c.d_in, 16),
        classes: pick(t.classes, c.classes, 4),
        groups: pick(t.groups, c.groups, 4),
        noise: pick(t.noise, c.noise, 0.3),
        n_train: pick(t.n_train, c.n_train, 1000),
        n_test: pick(t.n_test, c.n_test, 1000),
    };
    let d = TrainConfig::default();
    let train = TrainConfig {
        hidden: pick(t.hidden, c.hidden, d.hidden),
        steps: pick(t.steps, c.steps, d.steps),
        lr: pick(t.lr, c.lr, d.lr),
        seed: recipe.seed,
    };
    (recipe, train)
}

fn train_from_recipe(recipe: &TaskRecipe, train: &TrainConfig) -> CliResult<Trained> {
    let data = synth_task(recipe.seed, recipe.n_train + recipe.n_test, recipe.d_in, recipe.classes, recipe.plan())?;
    let (tr, te) = data.split(recipe.n_train)?;
    let report = train_toy_ffn(&tr, train)?;
    Ok(Trained::new(report.model, tr, te)?)
}

fn toy_train(cfg: &Config, a: ToyTrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let (recipe, train) = task_recipe(cfg, &a.task);
    let trained = train_from_recipe(&recipe, &train)?;
    checkpoint::save(&a.out, &trained.model, &recipe)?;
    writeln!(
        out,
        "trained {}-{}-{} toy FFN: train accuracy {:.4}, test accuracy {:.4} -> {}",
        recipe.d_in,
        train.hidden,
        recipe.classes,
        trained.train_accuracy,
        trained.test_accuracy()?,
        a.out.display()
    )
    .map_err(out_err)?;

    if a.activations_out.is_some() || a.inputs_out.is_some() {
        let fraction = (a.dump_rows as f64 / recipe.n_train as f64).min(1.0);
        let rows = trained.sample_rows(fraction, Some(a.dump_rows), recipe.seed)?;
        let inputs = trained.train.inputs.select_rows(rows.iter());
        let share = rows.len() as f64 / recipe.n_train as f64;
        if let Some(p) = &a.activations_out {
            let meta = AmxMetadata {
                layer_id: Some("toy.fc1".into()),
                sample_fraction: Some(share),
                source: Some(format!("toy train seed {}", recipe.seed)),
                extra: Default::default(),
            };
            AmxFile::from_matrix(&trained.model.hidden_activations(&inputs)?, Some(meta))?.write(p)?;
            writeln!(out, "activations ({} rows) -> {}", rows.len(), p.display()).map_err(out_err)?;
        }
        if let Some(p) = &a.inputs_out {
            let meta = AmxMetadata { layer_id: None, sample_fraction: Some(share), source: Some("toy inputs".into()), extra: Default::default() };
            AmxFile::from_matrix(&inputs, Some(meta))?.write(p)?;
            writeln!(out, "inputs ({} rows) -> {}", rows.len(), p.display()).map_err(out_err)?;
        }
    }
    Ok(())
}

fn write_report(path: Option<&Path>, rows: &[MetricsRow], out: &mut dyn Write) -> CliResult<()> {
    write!(out, "{}", format_metrics_table(rows)).map_err(out_err)?;
    if let Some(p) = path {
        write_atomic(p, |w| write_metrics_csv(rows, w).map_err(|e| std::io::Error::other(e.to_string())))?;
        writeln!(out, "report ({} rows) -> {}", rows.len(), p.display()).map_err(out_err)?;
    }
    Ok(())
}

fn toy_eval(a: ToyEvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let (model, recipe) = checkpoint::load(&a.model)?;
    let data = synth_task(recipe.seed, recipe.n_train + recipe.n_test, recipe.d_in, recipe.classes, recipe.plan())?;
    let (train, test) = data.split(recipe.n_train)?;
    if model.d_in() != recipe.d_in || model.n_classes() != recipe.classes {
        return Err(CliError::Data("checkpoint sizes disagree with its task recipe".into()));
    }
    let trained = Trained::new(model, train, test)?;
    let scope: FlopsScope = a.scope.into();
    let arch = trained.model.architecture();
    let mut rows = vec![unpruned_row(&trained)?];
    for path in &a.mask {
        let file: MaskFile = read_json(path)?;
        let mask = file.to_mask().map_err(|e| match e {
            CliError::Usage(m) => CliError::Data(format!("{}: {m}", path.display())),
            CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if mask.len() != trained.model.hidden() {
            return Err(CliError::Data(format!(
                "{}: mask has K = {}, model has {} hidden units",
                path.display(),
                mask.len(),
                trained.model.hidden()
            )));
        }
        let mut row = trained.evaluate(&mask, "")?;
        row.relative_flops = relative_flops(std::slice::from_ref(&mask), &arch, scope)?.relative;
        rows.push(row);
    }
    write_report(a.report.as_deref(), &rows, out)
}

fn ablate(cfg: &Config, cmd: AblateCommand, out: &mut dyn Write) -> CliResult<()> {
    let (kind, a) = match cmd {
        AblateCommand::Alpha(a) => ("alpha", a),
        AblateCommand::SampleFraction(a) => ("sample-fraction", a),
        AblateCommand::MiVsPcc(a) => ("mi-vs-pcc", a),
        AblateCommand::Seeds(a) => ("seeds", a),
    };
    if a.flops_steps == 0 {
        return Err(CliError::Usage("--flops-steps must be positive".into()));
    }
    let (recipe, train) = task_recipe(cfg, &a.task);
    let trained = train_from_recipe(&recipe, &train)?;
    let alpha = alpha_of(cfg, None)?;
    let est = EstimationConfig {
        alpha,
        seed: recipe.seed,
        tuning: tuning_config(cfg, &TuningArgs { gamma: None, beta: None, batch_size: None, tuning_seed: None }, alpha),
        sample_fraction: pick(None, cfg.estimation.sample_fraction, 1.0),
        mi_batch: pick(None, cfg.estimation.mi_batch, 100),
        ..EstimationConfig::default()
    };
    let sweep = SweepConfig {
        flops_targets: flops_grid(a.flops_steps),
        cluster_seeds: (0..pick(a.seeds, cfg.prune.seeds, 20)).collect(),
    };
    let values = |default: &[f64]| if a.values.is_empty() { default.to_vec() } else { a.values.clone() };
    let mut rows = match kind {
        "alpha" => ablate_alpha(&trained, &values(&[0.5, 1.01, 2.0, 5.0]), &est, &sweep)?,
        "sample-fraction" => ablate_sample_fraction(&trained, &values(&[0.01, 0.1, 0.5, 1.0]), &est, &sweep)?,
        "mi-vs-pcc" => {
            let pcc_est = EstimationConfig { max_rows: Some(100), ..est };
            let filter_seeds: Vec<u64> = (0..pick(a.seeds, None, 3)).collect();
            ablate_mi_vs_pcc(&trained, &values(&[0.5, 0.75, 0.9, 0.97, 0.99]), &pcc_est, &filter_seeds)?
        }
        _ => {
            let counts = values(&[1.0, 10.0, 100.0, 500.0]);
            if let Some(bad) = counts.iter().find(|c| c.fract() != 0.0 || **c < 1.0) {
                return Err(CliError::Usage(format!("seed counts must be positive integers, got {bad}")));
            }
            let counts: Vec<u64> = counts.iter().map(|&c| c as u64).collect();
            ablate_seed_count(&trained, &counts, &est, &sweep.flops_targets)?
        }
    };
    if a.with_random {
        rows.extend(sweep_random(&trained, &sweep.flops_targets, &(0..10).collect::<Vec<_>>(), "baseline")?);
    }
    rows.insert(0, unpruned_row(&trained)?);
    write_report(Some(&a.out), &rows, out)
}

fn demo(a: DemoArgs, out: &mut dyn Write) -> CliResult<()> {
    std::fs::create_dir_all(&a.out_dir).map_err(|e| CliError::io(format!("creating {}", a.out_dir.display()), e))?;
    let amx_path = match &a.activations {
        Some(p) => p.clone(),
        None => {
            let p = a.out_dir.join("demo.amx");
            demo_amx()?.write(&p)?;
            p
        }
    };
    let cfg = Config::default();
    let est = EstimateArgs {
        input: InputArgs { activations: amx_path.clone(), sample_fraction: None },
        sigmas: None,
        alpha: None,
        tuning: TuningArgs { gamma: None, beta: None, batch_size: None, tuning_seed: None },
    };
    let (loaded, schedule, mi, _) = estimate_mi(&cfg, &est, None)?;
    write_json(&a.out_dir.join("sigmas.json"), &schedule)?;
    write_mi_csv(&a.out_dir.join("mi.csv"), &mi)?;
    let keep = keep_for_flops(loaded.x.n_neurons(), a.target_flops)?;
    let outcome = prune_cluster(&mi, &ClusterConfig::new(keep, 1), None::<fn(&PruneMask) -> neuroprune::Result<f64>>)?;
    let mask_path = a.out_dir.join("mask.json");
    emit_mask(&mask_path, &outcome.mask, &loaded.layer_id, None, out)?;
    if a.activations.is_none() {
        let dropped = PLANTED_DUPLICATES
            .iter()
            .filter(|(src, dst)| !outcome.mask.keep()[*src] || !outcome.mask.keep()[*dst])
            .count();
        writeln!(out, "planted duplicate pairs thinned: {dropped}/{}", PLANTED_DUPLICATES.len()).map_err(out_err)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(Cli::try_parse_from(["neuroprune", "mi", "--activations", "a", "--out", "b", "--bogus"]).is_err());
    }

    #[test]
    fn mi_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mi.csv");
        let m = DMatrix::from_row_slice(2, 2, &[1.5, 0.1234567890123, 0.1234567890123, 2.0]);
        let mi = MiMatrix::from_full(m, Alpha::DEFAULT).unwrap();
        write_mi_csv(&p, &mi).unwrap();
        assert_eq!(read_mi_csv(&p, Alpha::DEFAULT).unwrap().values(), mi.values());
        std::fs::write(&p, "1,2\n3\n").unwrap();
        assert!(read_mi_csv(&p, Alpha::DEFAULT).is_err());
    }
}
