use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use c2c::evaluation::{bias_sweep, evaluate, export_curve, metrics, read_score_file, EvalReport};
use c2c::io::{
    generate_synthetic, read_annotations, read_features, read_split_document, write_annotations, write_features,
    write_split_document, SyntheticSpec,
};
use c2c::labelspace::{build_sthcom_split, check_split, AnnotationRecord, SourceSplit, Split, SplitConfig, SplitDocument};
use c2c::model::{load_checkpoint, save_checkpoint, C2CModel, InferenceMode, ModelConfig};
use c2c::numerics::{gradcheck, Graph};
use c2c::training::{batch_objective, mix_batch, train_with_progress, write_history, BatchInput, LossContext, TrainConfig};
use c2c::Error;

#[derive(Debug, Parser)]
#[command(name = "c2c", version, about = "Component-to-composition learning for zero-shot compositional action recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic compositional video dataset
    GenSynthetic(GenArgs),
    /// Build seen/unseen splits from a JSON-lines annotation file
    BuildSplit(BuildSplitArgs),
    /// Train a model; writes a checkpoint and a per-epoch loss CSV
    Train(TrainArgs),
    /// Evaluate a checkpoint; writes a metrics JSON and a curve CSV
    Eval(EvalArgs),
    /// Bias sweep of an external score-matrix file
    Curve(CurveArgs),
    /// Compare analytic and finite-difference gradients of the training objective
    Gradcheck(GradcheckArgs),
    /// Evaluate one checkpoint under every inference mode
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Output directory (features.c2cf, split.json, annotations.jsonl)
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON file with generator settings
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_verbs: Option<usize>,
    #[arg(long)]
    num_objects: Option<usize>,
    #[arg(long)]
    unseen: Option<usize>,
    #[arg(long)]
    samples_per_composition: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    domain_variation: Option<f64>,
}

#[derive(Debug, Args)]
struct BuildSplitArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    min_samples: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Checkpoint to write
    #[arg(long)]
    checkpoint: PathBuf,
    /// Loss history CSV (default: next to the checkpoint, `.loss.csv`)
    #[arg(long)]
    history: Option<PathBuf>,
    /// Flat JSON with training settings; flags below take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, conflicts_with = "vanilla")]
    beta: Option<f64>,
    #[arg(long, conflicts_with = "vanilla")]
    gamma: Option<f64>,
    /// CutMix probability
    #[arg(long, conflicts_with = "vanilla")]
    p: Option<f64>,
    /// Train on the composition and component losses only
    #[arg(long)]
    vanilla: bool,
    /// Print one line per epoch to stderr
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// independent, knowledge_agnostic, dynamic_only, static_only or full
    #[arg(long, default_value = "full")]
    mode: String,
    #[arg(long, value_enum, default_value = "test")]
    on: SplitArg,
    /// Curve CSV; the metrics JSON is written next to it
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Metrics JSON (default: stdout)
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CurveArgs {
    /// Score-matrix file (magic C2CS)
    #[arg(long)]
    scores: PathBuf,
    /// Curve CSV; the metrics JSON is written next to it
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    /// Coordinates probed per parameter tensor (0 probes all)
    #[arg(long, default_value_t = 6)]
    per_param: usize,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    on: SplitArg,
    /// Comparison table as CSV (always printed to stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failures that map onto exit codes.
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn require(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("no such file: {}", path.display())))
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::BuildSplit(a) => build_split(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Curve(a) => curve_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}

fn gen_synthetic(a: GenArgs) -> CliResult<()> {
    let mut spec = match &a.config {
        Some(p) => {
            require(p)?;
            serde_json::from_str(&std::fs::read_to_string(p).map_err(Error::from)?)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    macro_rules! apply {
        ($($field:ident <- $flag:expr),*) => {$(if let Some(v) = $flag { spec.$field = v; })*};
    }
    apply!(seed <- a.seed, num_verbs <- a.num_verbs, num_objects <- a.num_objects, unseen_compositions <- a.unseen,
        samples_per_composition <- a.samples_per_composition, noise <- a.noise, domain_variation <- a.domain_variation);
    let data = generate_synthetic(&spec)?;
    std::fs::create_dir_all(&a.out_dir).map_err(Error::from)?;
    write_features(&a.out_dir.join("features.c2cf"), &data.features)?;
    write_split_document(
        &a.out_dir.join("split.json"),
        &SplitDocument {
            space: data.space.clone(),
            split: data.split.clone(),
        },
    )?;
    let mut records: Vec<AnnotationRecord> = Vec::new();
    for (split, source) in [(Split::Train, SourceSplit::Train), (Split::Val, SourceSplit::Test), (Split::Test, SourceSplit::Test)] {
        for s in data.split.samples(split) {
            let (v, o) = data.space.composition(s.composition);
            records.push(AnnotationRecord {
                sample_id: s.sample_id.clone(),
                verb_name: data.space.verbs()[v].clone(),
                object_name: data.space.objects()[o].clone(),
                source_split: source,
            });
        }
    }
    records.sort_by_key(|r| r.sample_id.parse::<usize>().unwrap_or(usize::MAX));
    write_annotations(&a.out_dir.join("annotations.jsonl"), &records)?;
    println!(
        "wrote {} samples ({} train / {} val / {} test) to {}",
        data.features.records.len(),
        data.split.train_samples.len(),
        data.split.val_samples.len(),
        data.split.test_samples.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn build_split(a: BuildSplitArgs) -> CliResult<()> {
    require(&a.annotations)?;
    let records = read_annotations(&a.annotations)?;
    let config = SplitConfig {
        seed: a.seed,
        min_samples: a.min_samples,
        ..SplitConfig::default()
    };
    let (space, split) = build_sthcom_split(&records, &config)?;
    let violations = check_split(&space, &split, a.min_samples);
    if !violations.is_empty() {
        return Err(Error::ConstructionFailed {
            stage: "validation",
            reason: violations[0].to_string(),
        }
        .into());
    }
    println!(
        "{} verbs, {} objects; compositions train {} / val {} / test {}; samples {} / {} / {}",
        space.num_verbs(),
        space.num_objects(),
        split.train_compositions.len(),
        split.val_compositions.len(),
        split.test_compositions.len(),
        split.train_samples.len(),
        split.val_samples.len(),
        split.test_samples.len()
    );
    write_split_document(&a.out, &SplitDocument { space, split })?;
    Ok(())
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => {
            require(p)?;
            TrainConfig::from_json_file(p)?
        }
        None => TrainConfig::default(),
    };
    macro_rules! apply {
        ($($field:ident <- $flag:expr),*) => {$(if let Some(v) = $flag { c.$field = v; })*};
    }
    apply!(seed <- a.seed, epochs <- a.epochs, batch_size <- a.batch_size, learning_rate <- a.lr, tau <- a.tau,
        rho <- a.rho, alpha <- a.alpha, beta <- a.beta, gamma <- a.gamma, cutmix_prob <- a.p);
    if a.vanilla {
        c.enhanced = false;
    }
    c.validate()?;
    Ok(c)
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    require(&a.features)?;
    require(&a.split)?;
    let config = train_config(&a)?;
    let features = read_features(&a.features)?;
    let doc = read_split_document(&a.split)?;
    let verbose = a.verbose;
    let outcome = train_with_progress(&features, &doc.space, &doc.split, &config, |s| {
        if verbose {
            eprintln!(
                "epoch {:>4}  total {:.5}  com {:.5}  comp {:.5}  cutmix {}/{}",
                s.epoch, s.losses.total, s.losses.com, s.losses.comp, s.cutmix_batches, s.batches
            );
        }
    });
    let outcome = match outcome {
        Err(Error::Diverged { epoch, batch, last_good }) => {
            let rescue = a.checkpoint.with_extension("last_good.c2cm");
            save_checkpoint(&last_good, &rescue)?;
            eprintln!("last good parameters saved to {}", rescue.display());
            return Err(Error::Diverged { epoch, batch, last_good }.into());
        }
        other => other?,
    };
    save_checkpoint(&outcome.model, &a.checkpoint)?;
    let history = a.history.clone().unwrap_or_else(|| a.checkpoint.with_extension("loss.csv"));
    write_history(&history, &outcome.history)?;
    if let Some(last) = outcome.history.last() {
        println!("trained {} epochs; final total loss {:.6}", outcome.history.len(), last.losses.total);
    }
    Ok(())
}

fn load_inputs(checkpoint: &Path, features: &Path, split: &Path) -> CliResult<(C2CModel, c2c::io::FeatureSet, SplitDocument)> {
    for p in [checkpoint, features, split] {
        require(p)?;
    }
    Ok((load_checkpoint(checkpoint)?, read_features(features)?, read_split_document(split)?))
}

fn print_report(report: &EvalReport) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(report).map_err(Error::from)?)
}

fn eval_cmd(a: EvalArgs) -> CliResult<()> {
    let mode: InferenceMode = a.mode.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let (model, features, doc) = load_inputs(&a.checkpoint, &a.features, &a.split)?;
    let ev = evaluate(&model, &features, &doc.space, &doc.split, a.on.into(), mode)?;
    if let Some(curve) = &a.curve {
        export_curve(&ev.curve, &ev.report, curve)?;
    }
    let json = print_report(&ev.report)?;
    match &a.report {
        Some(p) => c2c::io::write_atomic(p, json.as_bytes())?,
        None => println!("{json}"),
    }
    Ok(())
}

fn curve_cmd(a: CurveArgs) -> CliResult<()> {
    require(&a.scores)?;
    let m = read_score_file(&a.scores)?;
    let curve = bias_sweep(&m)?;
    let report = metrics(&curve, &m, None)?;
    export_curve(&curve, &report, &a.out)?;
    println!("{}", print_report(&report)?);
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> CliResult<()> {
    if a.precision == Precision::F32 {
        return Err(Failure::Usage("gradients are computed in f64 only; use --precision f64".into()));
    }
    let spec = SyntheticSpec {
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec)?;
    let ctx = LossContext::new(&data.space, &data.split)?;
    let config = TrainConfig::default();
    let model = C2CModel::new(
        ModelConfig::new(data.features.shape.frame_len(), data.space.num_verbs(), data.space.num_objects()),
        a.seed,
    )?;
    let samples: Vec<_> = data.split.train_samples.iter().step_by(17).take(4).cloned().collect();
    let idx = data.features.resolve(&data.space, &samples)?;
    let videos = data.features.batch(&idx)?;
    let labels: Vec<(usize, usize)> = samples.iter().map(|s| data.space.composition(s.composition)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (mixed, mix, _) = mix_batch(&videos, &labels, data.features.shape, &mut rng)?;
    let branches = [
        ("plain", BatchInput { videos, frames: spec.frames, labels: labels.clone(), mix: None }),
        ("cutmix", BatchInput { videos: mixed, frames: spec.frames, labels, mix: Some(mix) }),
    ];
    let per_param = (a.per_param > 0).then_some(a.per_param);
    let mut worst: f64 = 0.0;
    for (name, input) in &branches {
        let report = gradcheck(
            |g: &mut Graph, vars| {
                let bound = model.bind_vars(vars)?;
                batch_objective(g, &bound, input, &ctx, &config).map(|(total, _)| total)
            },
            &model.named_params(),
            a.eps,
            a.tolerance,
            per_param,
        )?;
        for p in &report.params {
            println!("{name:>7} {:<32} probed {:>5}  max rel {:.3e}", p.name, p.checked, p.max_rel_error);
        }
        worst = worst.max(report.max_rel_error());
    }
    println!("max relative error {worst:.3e} (tolerance {:.1e})", a.tolerance);
    if worst < a.tolerance {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(Error::Numerical(format!("gradient mismatch {worst:.3e} exceeds {:.1e}", a.tolerance)).into())
    }
}

fn ablate_cmd(a: AblateArgs) -> CliResult<()> {
    let (model, features, doc) = load_inputs(&a.checkpoint, &a.features, &a.split)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["mode", "verb", "object", "seen", "unseen", "hm", "auc"]).map_err(Error::from)?;
    println!("{:<20} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}", "mode", "verb", "object", "seen", "unseen", "HM", "AUC");
    for mode in InferenceMode::ALL {
        let r = evaluate(&model, &features, &doc.space, &doc.split, a.on.into(), mode)?.report;
        let pct = |x: f64| format!("{:.2}", 100.0 * x);
        let row = [
            mode.name().to_string(),
            pct(r.verb_acc.unwrap_or(f64::NAN)),
            pct(r.object_acc.unwrap_or(f64::NAN)),
            pct(r.best_seen),
            pct(r.best_unseen),
            pct(r.best_hm),
            pct(r.auc),
        ];
        println!("{:<20} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}", row[0], row[1], row[2], row[3], row[4], row[5], row[6]);
        w.write_record(&row).map_err(Error::from)?;
    }
    if let Some(out) = &a.out {
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        c2c::io::write_atomic(out, &bytes)?;
    }
    Ok(())
}
