use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use moe_rebasin::checks;
use moe_rebasin::harness::{
    ensure_same_backbone, evaluator, gen_blobs, load_csv, split_train_test, DatasetSpec, FrozenBackbone, Split,
    TrainConfig,
};
use moe_rebasin::io::{
    export_report, load_checkpoint, load_manifest, save_checkpoint, Checkpoint, ComparisonReport, CsvSource, Format,
    Provenance, RatioRow, Report,
};
use moe_rebasin::matching::{align_moe, AlignmentResult, MatchMethod};
use moe_rebasin::metrics::{
    brute_force_best_permutation, eval_curve, ratio_report, BarrierReport, RankReport, DEFAULT_GRID_POINTS,
};
use moe_rebasin::model::{MoEConfig, MoEParams};
use moe_rebasin::numerics::uniform_grid;

#[derive(Parser)]
#[command(name = "moe-rebasin", version, about = "Align, interpolate and compare mixture-of-experts models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one MoE block on synthetic blobs (or a CSV) and save a checkpoint.
    Train(TrainArgs),
    /// Align checkpoint B to checkpoint A.
    Align(AlignArgs),
    /// Interpolate naively and after alignment; report barriers and ratios.
    Interp(InterpArgs),
    /// Rank the chosen expert order among all orderings by loss barrier.
    Rank(RankArgs),
    /// Check the assignment solver against exhaustive search.
    Oracle(OracleArgs),
    /// Randomised checks of the symmetry invariances.
    InvarianceCheck(InvarianceArgs),
    /// Convert a JSON report to another format.
    Export(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Dense,
    Sparse,
    Shared,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Gate,
    Gram,
}

impl From<MethodArg> for MatchMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Gate => MatchMethod::GateWeights,
            MethodArg::Gram => MatchMethod::ExpertGram,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => Format::Json,
            FormatArg::Csv => Format::Csv,
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "dense")]
    variant: VariantArg,
    /// Number of gated experts (routed experts for the shared variant).
    #[arg(long, default_value_t = 4)]
    experts: usize,
    /// Experts used per input (sparse and shared variants).
    #[arg(long, default_value_t = 2)]
    topk: usize,
    /// Always-active experts (shared variant).
    #[arg(long, default_value_t = 1)]
    shared: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
}

impl ModelArgs {
    fn config(&self) -> MoEConfig {
        match self.variant {
            VariantArg::Dense => MoEConfig::dense(self.experts, self.dim, self.hidden),
            VariantArg::Sparse => MoEConfig::sparse(self.experts, self.topk, self.dim, self.hidden),
            VariantArg::Shared => MoEConfig::shared(self.shared, self.experts, self.topk, self.dim, self.hidden),
        }
    }
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 16)]
    input_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Seed of the generated dataset (or of the train/test split for --csv).
    #[arg(long, default_value_t = 0)]
    dataset_seed: u64,
    /// Train on a CSV with header f0..f{D-1},label instead of generated blobs.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    backbone_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Initialisation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mini-batch order seed.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1.0)]
    init_scale: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AlignArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long, value_enum, default_value = "gram")]
    method: MethodArg,
    /// Where to write the alignment (expert order and hidden permutations).
    #[arg(long)]
    out: PathBuf,
    /// Also save the aligned copy of B as a checkpoint.
    #[arg(long)]
    aligned_out: Option<PathBuf>,
}

#[derive(Args)]
struct InterpArgs {
    #[arg(required_unless_present = "manifest")]
    a: Option<PathBuf>,
    #[arg(required_unless_present = "manifest")]
    b: Option<PathBuf>,
    /// Run every consecutive checkpoint pair listed in a manifest.
    #[arg(long, conflicts_with_all = ["a", "b"])]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "gram")]
    method: MethodArg,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    grid: usize,
    #[arg(long, required_unless_present = "manifest")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
}

#[derive(Args)]
struct RankArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long, value_enum, default_value = "gram")]
    method: MethodArg,
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    grid: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 7)]
    max_n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InvarianceArgs {
    #[arg(long, default_value_t = 500)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Minimum gap between gate scores for sparse checks.
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,
}

#[derive(Args)]
struct ExportArgs {
    /// A JSON report written by interp, rank or a ratio table.
    input: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    #[arg(long)]
    out: PathBuf,
}

fn load(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn dataset_split(data: &DataArgs) -> Result<(Split, Provenance)> {
    if let Some(path) = &data.csv {
        let all = load_csv(path)?;
        let csv = CsvSource {
            path: path.display().to_string(),
            split_seed: data.dataset_seed,
        };
        Ok((
            split_train_test(&all, data.dataset_seed),
            Provenance {
                csv: Some(csv),
                ..Provenance::default()
            },
        ))
    } else {
        let spec = DatasetSpec {
            classes: data.classes,
            samples_per_class: data.samples_per_class,
            input_dim: data.input_dim,
            noise_sigma: data.noise,
            seed: data.dataset_seed,
            ..DatasetSpec::default()
        };
        Ok((
            gen_blobs(&spec)?,
            Provenance {
                dataset: Some(spec),
                ..Provenance::default()
            },
        ))
    }
}

/// Test split and backbone that both checkpoints were trained around.
fn shared_context(a: &Checkpoint, b: &Checkpoint) -> Result<(Split, FrozenBackbone)> {
    ensure_same_backbone(a.backbone_seed, b.backbone_seed)?;
    let (pa, pb) = (&a.provenance, &b.provenance);
    ensure!(
        pa.dataset == pb.dataset && pa.csv == pb.csv,
        "checkpoints were trained on different data"
    );
    let split = match (&pa.dataset, &pa.csv) {
        (Some(spec), _) => gen_blobs(spec)?,
        (None, Some(csv)) => split_train_test(&load_csv(&csv.path)?, csv.split_seed),
        (None, None) => bail!("checkpoint has no dataset provenance; cannot evaluate losses"),
    };
    let backbone = FrozenBackbone::generate(
        a.backbone_seed,
        split.train.input_dim(),
        a.params.config().dim,
        split.train.classes,
    )?;
    Ok((split, backbone))
}

fn compare(a: &Checkpoint, b: &Checkpoint, method: MatchMethod, grid: &[f64]) -> Result<ComparisonReport> {
    let (split, backbone) = shared_context(a, b)?;
    let test = backbone.encode(&split.test)?;
    let eval = evaluator(&backbone, &test);
    let alignment = align_moe(&a.params, &b.params, method)?;
    let aligned_b = alignment.apply(&b.params)?;
    let naive = BarrierReport::from_curve(eval_curve(&a.params, &b.params, &eval, grid)?)?;
    let aligned = BarrierReport::from_curve(eval_curve(&a.params, &aligned_b, &eval, grid)?)?;
    Ok(ComparisonReport {
        method,
        ratios: ratio_report(&aligned, &naive)?,
        naive,
        aligned,
    })
}

fn fmt_ratio(r: Option<f64>) -> String {
    r.map_or("n/a".into(), |v| format!("{v:.1}%"))
}

fn summarize(cmp: &ComparisonReport) -> String {
    format!(
        "{} alignment: loss barrier {:.6} -> {:.6} (ratio {}), loss AUC ratio {}",
        cmp.method,
        cmp.naive.loss_barrier,
        cmp.aligned.loss_barrier,
        fmt_ratio(cmp.ratios.loss_barrier),
        fmt_ratio(cmp.ratios.loss_auc)
    )
}

fn distance(a: &MoEParams, b: &MoEParams) -> f64 {
    a.to_flat().iter().zip(b.to_flat()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn train(args: TrainArgs) -> Result<()> {
    let model = args.model.config();
    model.validate()?;
    let (split, mut provenance) = dataset_split(&args.data)?;
    let backbone =
        FrozenBackbone::generate(args.data.backbone_seed, split.train.input_dim(), model.dim, split.train.classes)?;
    let config = TrainConfig {
        steps: args.steps,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        init_seed: args.seed,
        data_order_seed: args.data_seed,
        init_scale: args.init_scale,
    };
    let outcome = moe_rebasin::harness::train_sgd(&split.train, &backbone, &config, model)?;
    let test = backbone.encode(&split.test)?;
    let stats = evaluator(&backbone, &test)(&outcome.params)?;
    provenance.train = Some(config);
    save_checkpoint(&args.out, &Checkpoint::new(outcome.params, backbone.seed, provenance))?;
    println!(
        "trained {} for {} steps: train loss {:.4} -> {:.4}, test accuracy {:.3}; saved {}",
        model.variant,
        args.steps,
        outcome.initial_loss,
        outcome.final_loss,
        stats.accuracy.unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn align(args: AlignArgs) -> Result<()> {
    let (a, b) = (load(&args.a)?, load(&args.b)?);
    let method = args.method.into();
    let result = align_moe(&a.params, &b.params, method)?;
    let aligned = result.apply(&b.params)?;
    fs::write(&args.out, serde_json::to_string_pretty(&result)?)?;
    if let Some(path) = &args.aligned_out {
        let mut provenance = b.provenance.clone();
        provenance.note = Some(format!("{} aligned to {} ({method})", args.b.display(), args.a.display()));
        save_checkpoint(path, &Checkpoint::new(aligned.clone(), b.backbone_seed, provenance))?;
    }
    println!(
        "{method} alignment: expert order {}, parameter distance {:.6} -> {:.6}; saved {}",
        result.tau,
        distance(&a.params, &b.params),
        distance(&a.params, &aligned),
        args.out.display()
    );
    Ok(())
}

fn interp(args: InterpArgs) -> Result<()> {
    let format: Format = args.format.into();
    let method: MatchMethod = args.method.into();
    if let Some(path) = &args.manifest {
        let manifest = load_manifest(path)?;
        let grid = uniform_grid(manifest.grid)?;
        fs::create_dir_all(&manifest.output_dir)?;
        let mut table = Vec::new();
        for (k, (pa, pb)) in manifest.pairs().into_iter().enumerate() {
            let cmp = compare(&load(pa)?, &load(pb)?, manifest.method, &grid)?;
            let out = manifest.output_dir.join(format!("{}_pair{k}.{format}", manifest.experiment_id));
            export_report(&out, Report::Comparison(&cmp), format)?;
            println!("pair {k}: {}", summarize(&cmp));
            table.push(RatioRow::from_comparison(format!("pair{k}"), &cmp));
        }
        let out = manifest.output_dir.join(format!("{}_ratios.{format}", manifest.experiment_id));
        export_report(&out, Report::Ratios(&table), format)?;
        println!("wrote {}", out.display());
        return Ok(());
    }
    let (Some(pa), Some(pb), Some(out)) = (&args.a, &args.b, &args.out) else {
        bail!("interp needs two checkpoints and --out, or --manifest");
    };
    let cmp = compare(&load(pa)?, &load(pb)?, method, &uniform_grid(args.grid)?)?;
    export_report(out, Report::Comparison(&cmp), format)?;
    println!("{}; saved {}", summarize(&cmp), out.display());
    Ok(())
}

fn rank(args: RankArgs) -> Result<()> {
    let (a, b) = (load(&args.a)?, load(&args.b)?);
    let (split, backbone) = shared_context(&a, &b)?;
    let test = backbone.encode(&split.test)?;
    let method: MatchMethod = args.method.into();
    let chosen = align_moe(&a.params, &b.params, method)?.tau;
    let grid = uniform_grid(args.grid)?;
    let mut report = brute_force_best_permutation(&a.params, &b.params, evaluator(&backbone, &test), &grid, &chosen)?;
    report.method = Some(method);
    export_report(&args.out, Report::Rank(&report), args.format.into())?;
    println!(
        "{method}: order {} has rank {} of {} (barrier {:.6}, best {:.6}, naive {:.6}, normalized {}); saved {}",
        report.chosen_tau,
        report.rank,
        report.permutations.len(),
        report.chosen_barrier,
        report.l_top1,
        report.l_naive,
        report.l_hat.map_or("n/a".into(), |v| format!("{v:.1}")),
        args.out.display()
    );
    Ok(())
}

fn oracle(args: OracleArgs) -> Result<()> {
    ensure!(args.max_n <= 8, "--max-n above 8 makes exhaustive search impractical");
    let outcome = checks::lap_oracle(args.trials, args.max_n, args.seed)?;
    println!(
        "{} assignment oracle: {} trials (n <= {}), {} cost mismatches, {} assignment mismatches",
        if outcome.passed() { "PASS" } else { "FAIL" },
        outcome.trials,
        args.max_n,
        outcome.cost_mismatches,
        outcome.assignment_mismatches
    );
    ensure!(outcome.passed(), "assignment solver disagrees with exhaustive search");
    Ok(())
}

fn invariance_check(args: InvarianceArgs) -> Result<()> {
    let (sparse, omega) = checks::sparse_group_invariance(args.trials, 1000, args.epsilon, args.seed.wrapping_add(1))?;
    let outcomes = [
        checks::dense_group_invariance(args.trials, args.seed)?,
        sparse,
        omega,
        checks::gram_cost_invariance(args.trials.min(200), args.seed.wrapping_add(2))?,
        checks::barrier_translation_invariance(args.trials.clamp(1, 20), args.seed.wrapping_add(3))?,
    ];
    for o in &outcomes {
        println!("{o}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    ensure!(failed == 0, "{failed} invariance check(s) failed");
    Ok(())
}

fn parse_as<T: DeserializeOwned>(text: &str) -> Option<T> {
    serde_json::from_str(text).ok()
}

fn export(args: ExportArgs) -> Result<()> {
    let text = fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let format = args.format.into();
    if let Some(r) = parse_as::<ComparisonReport>(&text) {
        export_report(&args.out, Report::Comparison(&r), format)?;
    } else if let Some(r) = parse_as::<RankReport>(&text) {
        export_report(&args.out, Report::Rank(&r), format)?;
    } else if let Some(r) = parse_as::<BarrierReport>(&text) {
        export_report(&args.out, Report::Barrier(&r), format)?;
    } else if let Some(r) = parse_as::<Vec<RatioRow>>(&text) {
        export_report(&args.out, Report::Ratios(&r), format)?;
    } else if parse_as::<AlignmentResult>(&text).is_some() {
        bail!("{} is an alignment, not a report", args.input.display());
    } else {
        bail!("{} is not a recognised report", args.input.display());
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Align(a) => align(a),
        Command::Interp(a) => interp(a),
        Command::Rank(a) => rank(a),
        Command::Oracle(a) => oracle(a),
        Command::InvarianceCheck(a) => invariance_check(a),
        Command::Export(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
