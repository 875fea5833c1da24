use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use groupmorph::atlas::{self, SubgroupFilter};
use groupmorph::baseline_iter::{self, IterConfig};
use groupmorph::evalkit::{self, EvalSetup, SweepParam, SweepSpec, Variant};
use groupmorph::groupnet::{GroupBatch, NetConfig};
use groupmorph::seed::SeedPath;
use groupmorph::synthgen::{self, SynthConfig};
use groupmorph::tensorio::{self, DatasetManifest};
use groupmorph::trainer::{self, GradcheckSpec, RealPool, TrainConfig, TrainOutput, Trainer};
use groupmorph::Error;

/// Everything a run depends on besides its data. Loaded from `--config`,
/// overridden by flags and written next to the outputs.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    net: NetConfig,
    train: TrainConfig,
    synth: SynthConfig,
    iter: IterConfig,
}

#[derive(Parser)]
#[command(name = "groupmorph", version, about = "Groupwise registration and atlas construction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with a manifest.
    SynthData(SynthDataArgs),
    /// Train the group registration network.
    Train(TrainArgs),
    /// Build an atlas for a subgroup with a trained network.
    BuildAtlas(BuildAtlasArgs),
    /// Build an atlas for a subgroup by iterative optimization.
    BaselineAtlas(BaselineArgs),
    /// Segmentation-transfer metrics of a trained network.
    Evaluate(EvaluateArgs),
    /// Train and compare model ablations.
    Ablate(AblateArgs),
    /// Sweep a loss weight and plot the metrics.
    Sweep(SweepArgs),
    /// Compare tape gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
struct FilterArgs {
    #[arg(long)]
    modality: Option<String>,
    #[arg(long)]
    age_min: Option<f64>,
    #[arg(long)]
    age_max: Option<f64>,
    #[arg(long)]
    diagnosis: Option<String>,
    /// Comma-separated subject ids.
    #[arg(long, value_delimiter = ',')]
    ids: Option<Vec<String>>,
    #[arg(long)]
    max_size: Option<usize>,
}

impl FilterArgs {
    fn filter(&self) -> Option<SubgroupFilter> {
        let f = SubgroupFilter {
            modality: self.modality.clone(),
            age_min: self.age_min,
            age_max: self.age_max,
            diagnosis: self.diagnosis.clone(),
            ids: self.ids.clone(),
            max_size: self.max_size,
        };
        (f != SubgroupFilter::default()).then_some(f)
    }
}

#[derive(Args)]
struct SynthDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 24)]
    subjects: usize,
    /// Number of modalities (one intensity profile each).
    #[arg(long, default_value_t = 2)]
    modalities: usize,
    /// Fraction of each modality placed in the test split.
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Resume from this checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Start from the full-scale training preset.
    #[arg(long)]
    full_preset: bool,
}

#[derive(Args)]
struct BuildAtlasArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, required = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, required = true)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    filter: FilterArgs,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, required = true)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    filter: FilterArgs,
    #[arg(long)]
    outer: Option<usize>,
    #[arg(long)]
    inner: Option<usize>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, required = true)]
    checkpoint: Option<PathBuf>,
    /// Evaluate a manifest subgroup instead of synthetic groups.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    filter: FilterArgs,
    /// Synthetic held-out groups.
    #[arg(long, default_value_t = 10)]
    groups: usize,
    /// Members per synthetic group.
    #[arg(long, default_value_t = 20)]
    m: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Comma-separated variant names; all six by default.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    #[arg(long, default_value_t = 1500)]
    iterations: usize,
    #[arg(long, default_value_t = 10)]
    groups: usize,
    #[arg(long, default_value_t = 20)]
    m: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// lambda_reg or gamma_seg.
    #[arg(long, default_value = "lambda_reg")]
    param: String,
    /// Comma-separated values; the preset grid by default.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1500)]
    iterations: usize,
    #[arg(long, default_value_t = 10)]
    groups: usize,
    #[arg(long, default_value_t = 20)]
    m: usize,
    /// Only redraw the plots of an existing sweep CSV.
    #[arg(long)]
    from_csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    samples: Option<usize>,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_)
            | Error::MissingField { .. }
            | Error::DuplicateId(_)
            | Error::UnknownSplit { .. }
            | Error::EmptySelection(_)
            | Error::MalformedHeader { .. }
            | Error::GridMismatch(_)
            | Error::ShapeMismatch(_)
            | Error::Json(_) => Failure::Validation(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut config = match &common.config {
        None => RunConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Validation(format!("--config {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("--config {}: {e}", path.display())))?
        }
    };
    if let Some(seed) = common.seed {
        config.train.seed = seed;
    }
    Ok(config)
}

fn validate(config: &RunConfig) -> Outcome {
    config.net.validate()?;
    config.train.validate()?;
    config.synth.validate()?;
    config.iter.validate()?;
    if config.synth.grid.dims() != config.net.dims {
        return Err(Failure::Validation(format!(
            "synth grid is {}D but the network is {}D",
            config.synth.grid.dims(),
            config.net.dims
        )));
    }
    Ok(())
}

fn create_out(out: &Path) -> Outcome {
    std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("--out {}: {e}", out.display())))
}

fn write_json(path: &Path, value: &Value) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn write_resolved(out: &Path, command: &str, config: &RunConfig, extra: Value) -> Outcome {
    create_out(out)?;
    write_json(
        &out.join("resolved_config.json"),
        &json!({ "command": command, "config": config, "arguments": extra }),
    )
}

fn manifest(path: &Path) -> Result<DatasetManifest, Failure> {
    Ok(tensorio::load_manifest(path)?)
}

fn select(manifest: &DatasetManifest, filter: &FilterArgs) -> Result<GroupBatch<f32>, Failure> {
    match filter.filter() {
        Some(f) => Ok(atlas::subgroup_select(manifest, &f)?),
        None => Ok(GroupBatch::new(
            manifest.records.iter().map(atlas::load_member).collect::<groupmorph::Result<Vec<_>>>()?,
        )?),
    }
}

fn synth_data(args: &SynthDataArgs) -> Outcome {
    let config = load_config(&args.common)?;
    validate(&config)?;
    if args.subjects == 0 || args.modalities == 0 {
        return Err(Failure::Validation("--subjects and --modalities must be positive".into()));
    }
    if !(0.0..=1.0).contains(&args.test_fraction) {
        return Err(Failure::Validation(format!("--test-fraction must lie in [0, 1], got {}", args.test_fraction)));
    }
    let out = &args.common.out;
    write_resolved(
        out,
        "synth-data",
        &config,
        json!({ "subjects": args.subjects, "modalities": args.modalities, "test_fraction": args.test_fraction }),
    )?;
    for sub in ["images", "segs"] {
        create_out(&out.join(sub))?;
    }
    let root = SeedPath::new(config.train.seed).child(0x5d);
    let mut lines = Vec::new();
    for k in 0..args.modalities {
        let count = args.subjects / args.modalities + usize::from(k < args.subjects % args.modalities);
        if count == 0 {
            continue;
        }
        let path = root.child(k as u64);
        let labelmaps = (0..count)
            .map(|i| synthgen::gen_labelmap::<f32>(&config.synth, path.child(100 + i as u64).seed()))
            .collect::<groupmorph::Result<Vec<_>>>()?;
        let group = synthgen::synth_group(&labelmaps, &config.synth, path.child(1).seed())?;
        let tests = (count as f64 * args.test_fraction).round() as usize;
        let mut rng = path.child(2).rng();
        for (i, member) in group.members().iter().enumerate() {
            let id = format!("m{k}-s{i:03}");
            let image = format!("images/{id}.tensor");
            let seg = format!("segs/{id}.tensor");
            tensorio::write_volume(out.join(&image), &member.image, Map::new())?;
            if let Some(s) = &member.seg {
                tensorio::write_volume(out.join(&seg), s, Map::new())?;
            }
            let split = if i >= count - tests { "test" } else { "train" };
            let age: f64 = rng.random_range(20.0..90.0);
            let diagnosis = if rng.random_bool(0.3) { "patient" } else { "control" };
            lines.push(
                json!({
                    "id": id,
                    "image_path": image,
                    "seg_path": seg,
                    "modality": format!("synthetic-{k}"),
                    "age": (age * 10.0).round() / 10.0,
                    "diagnosis": diagnosis,
                    "split": split,
                })
                .to_string(),
            );
        }
    }
    let path = out.join("manifest.jsonl");
    std::fs::write(&path, lines.join("\n") + "\n").map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    println!("wrote {} subjects to {}", lines.len(), path.display());
    Ok(())
}

fn train(args: &TrainArgs) -> Outcome {
    let mut config = load_config(&args.common)?;
    if args.full_preset {
        let seed = config.train.seed;
        config.train = TrainConfig { seed, ..TrainConfig::full_scale() };
    }
    if let Some(n) = args.iterations {
        config.train.iterations = n;
    }
    validate(&config)?;
    let pool = match &args.manifest {
        Some(p) => RealPool::from_manifest(&manifest(p)?)?,
        None => RealPool::default(),
    };
    let out = TrainOutput { dir: args.common.out.clone() };
    let mut trainer = match &args.checkpoint {
        Some(dir) => {
            let ckpt = tensorio::load_checkpoint(dir)?;
            let log_path = dir.parent().unwrap_or(Path::new(".")).join("loss_log.csv");
            let log = if log_path.exists() { trainer::read_log(&log_path)? } else { Vec::new() };
            let mut t = Trainer::resume(&ckpt, pool, log)?;
            if let Some(n) = args.iterations {
                t.set_iterations(n)?;
            }
            t
        }
        None => Trainer::new(config.train.clone(), config.net.clone(), config.synth.clone(), pool)?,
    };
    let doc = trainer.document();
    let resolved = RunConfig {
        net: doc.net,
        train: doc.train,
        synth: doc.synth,
        iter: config.iter.clone(),
    };
    write_resolved(
        &args.common.out,
        "train",
        &resolved,
        json!({ "manifest": args.manifest, "resume": args.checkpoint }),
    )?;
    let total = resolved.train.iterations;
    trainer::run(&mut trainer, Some(&out), |row| {
        let done = row.iteration as usize + 1;
        if done % 100 == 0 || done == total {
            eprintln!(
                "iteration {done}/{total}: loss {:.5} (sim {:.5}, reg {:.5}, seg {:.5}, m {})",
                row.total, row.sim, row.reg, row.seg, row.m
            );
        }
    })?;
    println!("checkpoint written to {}", out.checkpoint_dir().display());
    Ok(())
}

fn build_atlas(args: &BuildAtlasArgs) -> Outcome {
    let config = load_config(&args.common)?;
    let ckpt = args.checkpoint.as_ref().expect("required by the parser");
    let (params, doc) = trainer::load_model(ckpt)?;
    let data = manifest(args.manifest.as_ref().expect("required by the parser"))?;
    let group = select(&data, &args.filter)?;
    let resolved = RunConfig {
        net: doc.net.clone(),
        train: doc.train.clone(),
        synth: doc.synth.clone(),
        iter: config.iter,
    };
    write_resolved(
        &args.common.out,
        "build-atlas",
        &resolved,
        json!({ "checkpoint": ckpt, "manifest": args.manifest, "filter": args.filter.filter() }),
    )?;
    let result = atlas::build_atlas(&params, &doc.net, &group)?;
    let mut report = evalkit::evaluate_atlas(&result, &group)?;
    report.fingerprint = trainer::fingerprint(&doc);
    atlas::save_atlas(&args.common.out, &result, &json!({ "report": report, "ids": result.ids }))?;
    println!(
        "atlas of {} members in {:.2}s: dice {:.4}, folds {}, centrality {:.3e}",
        group.len(),
        result.seconds,
        report.dice_mean,
        report.folds_total,
        report.centrality
    );
    Ok(())
}

fn baseline_atlas(args: &BaselineArgs) -> Outcome {
    let mut config = load_config(&args.common)?;
    if let Some(v) = args.outer {
        config.iter.outer_iterations = v;
    }
    if let Some(v) = args.inner {
        config.iter.inner_steps = v;
    }
    if let Some(v) = args.step {
        config.iter.step_size = v;
    }
    if let Some(v) = args.lambda {
        config.iter.lambda_reg = v;
    }
    config.iter.validate()?;
    let data = manifest(args.manifest.as_ref().expect("required by the parser"))?;
    let group = select(&data, &args.filter)?;
    write_resolved(
        &args.common.out,
        "baseline-atlas",
        &config,
        json!({ "manifest": args.manifest, "filter": args.filter.filter() }),
    )?;
    let result = baseline_iter::iterative_atlas(&group, &config.iter)?;
    let report = evalkit::evaluate_atlas(&result, &group)?;
    let trace = baseline_iter::objective_trace(&result);
    atlas::save_atlas(
        &args.common.out,
        &result,
        &json!({ "report": report, "ids": result.ids, "trace": trace }),
    )?;
    println!(
        "atlas of {} members in {:.2}s after {} outer iterations: dice {:.4}, folds {}, centrality {:.3e}",
        group.len(),
        result.seconds,
        trace.len() - 1,
        report.dice_mean,
        report.folds_total,
        report.centrality
    );
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> Outcome {
    let config = load_config(&args.common)?;
    let ckpt = args.checkpoint.as_ref().expect("required by the parser");
    let (params, doc) = trainer::load_model(ckpt)?;
    let seed = config.train.seed;
    let summary = match &args.manifest {
        Some(path) => {
            let group = select(&manifest(path)?, &args.filter)?;
            let mut setup = EvalSetup::synthetic(doc.synth.clone(), 0, 2, seed)?;
            setup.heldout = vec![group];
            evalkit::evaluate_heldout(&params, &doc.net, &setup)?
        }
        None => {
            if args.groups == 0 || args.m < 2 {
                return Err(Failure::Validation("--groups must be positive and --m at least 2".into()));
            }
            let setup = EvalSetup::synthetic(doc.synth.clone(), args.groups, args.m, seed)?;
            evalkit::evaluate_heldout(&params, &doc.net, &setup)?
        }
    };
    write_resolved(
        &args.common.out,
        "evaluate",
        &RunConfig {
            net: doc.net.clone(),
            train: doc.train.clone(),
            synth: doc.synth.clone(),
            iter: config.iter,
        },
        json!({ "checkpoint": ckpt, "manifest": args.manifest, "groups": args.groups, "m": args.m, "seed": seed }),
    )?;
    let mut summary = summary;
    let fp = trainer::fingerprint(&doc);
    summary.reports.iter_mut().for_each(|r| r.fingerprint = fp.clone());
    write_json(&args.common.out.join("metrics.json"), &json!(summary))?;
    println!(
        "transfer dice {:.4} ± {:.4} (unregistered {:.4}), folds {:.1}, centrality {:.3e}",
        summary.dice_mean, summary.dice_std, summary.baseline_dice_mean, summary.folds_mean, summary.centrality_mean
    );
    Ok(())
}

fn eval_setup(config: &RunConfig, path: Option<&PathBuf>, groups: usize, m: usize) -> Result<EvalSetup, Failure> {
    if m < 2 || groups == 0 {
        return Err(Failure::Validation("--groups must be positive and --m at least 2".into()));
    }
    match path {
        Some(p) => Ok(EvalSetup::from_manifest(&manifest(p)?, config.synth.clone(), m, config.train.seed)?),
        None => Ok(EvalSetup::synthetic(config.synth.clone(), groups, m, config.train.seed)?),
    }
}

fn ablate(args: &AblateArgs) -> Outcome {
    let mut config = load_config(&args.common)?;
    config.train.iterations = args.iterations;
    validate(&config)?;
    let variants = match &args.variants {
        None => Variant::ALL.to_vec(),
        Some(names) => names.iter().map(|n| Variant::parse(n)).collect::<groupmorph::Result<Vec<_>>>()?,
    };
    let setup = eval_setup(&config, args.manifest.as_ref(), args.groups, args.m)?;
    write_resolved(
        &args.common.out,
        "ablate",
        &config,
        json!({ "variants": variants, "manifest": args.manifest, "groups": args.groups, "m": args.m }),
    )?;
    let rows = evalkit::run_ablations(&variants, &setup, &config.net, &config.train, Some(&args.common.out))?;
    for r in rows {
        println!(
            "{:<16} dice {:.4} ± {:.4}  folds {:.1}  centrality {:.3e}",
            r.variant, r.dice_mean, r.dice_std, r.folds_mean, r.centrality_mean
        );
    }
    Ok(())
}

fn sweep(args: &SweepArgs) -> Outcome {
    if let Some(csv) = &args.from_csv {
        create_out(&args.common.out)?;
        for p in evalkit::plot_sweep(csv, &args.common.out)? {
            println!("{}", p.display());
        }
        return Ok(());
    }
    let config = load_config(&args.common)?;
    validate(&config)?;
    let param = SweepParam::parse(&args.param)?;
    let mut spec = match param {
        SweepParam::LambdaReg => SweepSpec::lambda_preset(args.iterations, config.train.seed),
        SweepParam::GammaSeg => SweepSpec::gamma_preset(args.iterations, config.train.seed),
    };
    if let Some(v) = &args.values {
        spec.values = v.clone();
    }
    spec.validate()?;
    let setup = eval_setup(&config, args.manifest.as_ref(), args.groups, args.m)?;
    write_resolved(
        &args.common.out,
        "sweep",
        &config,
        json!({ "spec": spec, "manifest": args.manifest, "groups": args.groups, "m": args.m }),
    )?;
    let output = evalkit::run_sweep(&spec, &setup, &config.net, &config.train, &args.common.out)?;
    println!("{}", output.csv.display());
    for p in output.plots {
        println!("{}", p.display());
    }
    Ok(())
}

fn gradcheck(args: &GradcheckArgs) -> Outcome {
    let seed = args.common.seed.unwrap_or(0);
    let mut spec = GradcheckSpec::default();
    if let Some(n) = args.samples {
        spec.samples = n;
    }
    let report = trainer::gradcheck(&spec, seed)?;
    println!("max relative error: {:.3e}", report.max_relative_error);
    println!("checked {} coordinates, skipped {}", report.checked, report.skipped);
    if args.common.out != Path::new("out") {
        create_out(&args.common.out)?;
        write_json(&args.common.out.join("gradcheck.json"), &json!({ "seed": seed, "report": report }))?;
    }
    if report.max_relative_error < 1e-3 {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "max relative error {:.3e} exceeds 1e-3",
            report.max_relative_error
        )))
    }
}

fn dispatch(command: &Command) -> Outcome {
    match command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::BuildAtlas(a) => build_atlas(a),
        Command::BaselineAtlas(a) => baseline_atlas(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::Sweep(a) => sweep(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
