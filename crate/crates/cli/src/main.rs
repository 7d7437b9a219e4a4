use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use lesionmetrics::components::{label_components, Connectivity, VolumeUnit};
use lesionmetrics::io::{load_labels, load_volume, save_float_grid, save_int_grid, Dtype, LabelPolicy};
use lesionmetrics::loss::gradcheck;
use lesionmetrics::loss::{configured_loss, ConfiguredLoss, LossConfig, Preset};
use lesionmetrics::overlap::EvaluationOptions;
use lesionmetrics::phantom::{generate, PhantomSpec};
use lesionmetrics::pipeline::{
    compare_tables, evaluate_row, CaseManifest, EvaluateOptions, EvaluationReport, MetricTable,
};
use lesionmetrics::volume::{class_name, parse_class_name, Grid, LabelVolume, ProbVolume};
use lesionmetrics::Scalar;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "lesionmetrics", version, about = "Volume-aware Dice loss and lesion-wise segmentation evaluation")]
struct Cli {
    /// Worker threads for case-level parallelism (0 = all cores).
    #[arg(long, global = true, env = "LESIONMETRICS_THREADS", default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate every manifest row and write the metric table.
    Evaluate(EvaluateArgs),
    /// Compare two metric tables with paired Wilcoxon tests.
    Compare(CompareArgs),
    /// Loss evaluation and gradient checking.
    #[command(subcommand)]
    Loss(LossCommand),
    /// Generate a synthetic phantom.
    Phantom(PhantomArgs),
    /// Connected-component utilities.
    #[command(subcommand)]
    Components(ComponentsCommand),
}

#[derive(Args)]
struct LabelArgs {
    /// Foreground labels present in the volumes (default: 1,2).
    #[arg(long, value_delimiter = ',', conflicts_with = "infer_labels")]
    labels: Option<Vec<u8>>,
    /// Accept any label value found in the files.
    #[arg(long)]
    infer_labels: bool,
}

impl LabelArgs {
    fn policy(&self) -> LabelPolicy {
        match (&self.labels, self.infer_labels) {
            (_, true) => LabelPolicy::Inferred,
            (Some(l), false) => LabelPolicy::Declared(l.clone()),
            (None, false) => LabelPolicy::PtLn,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output metric table (CSV).
    #[arg(long)]
    out_csv: PathBuf,
    /// Output per-case report with lesion match tables (JSON).
    #[arg(long)]
    out_json: Option<PathBuf>,
    /// Output lesion match tables only (JSON).
    #[arg(long)]
    match_table: Option<PathBuf>,
    #[arg(long, default_value_t = Connectivity::Corner26)]
    connectivity: Connectivity,
    /// Surface Dice tolerance in mm.
    #[arg(long, default_value_t = 1.0)]
    tolerance_mm: f64,
    /// Classes to evaluate (labels or PT/LN); defaults to 1,2.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    #[command(flatten)]
    labels: LabelArgs,
    /// Exit with status 2 if any case fails.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Metric table of configuration A.
    #[arg(long)]
    a: PathBuf,
    /// Metric table of configuration B.
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    out_json: Option<PathBuf>,
    /// Write the text table here instead of stdout.
    #[arg(long)]
    out_text: Option<PathBuf>,
}

#[derive(Subcommand)]
enum LossCommand {
    /// Evaluate a configured loss on probability maps.
    Eval(LossEvalArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum UnitArg {
    Voxels,
    Mm3,
}

#[derive(Args)]
struct LossEvalArgs {
    /// Ground-truth label volume.
    #[arg(long)]
    gt: PathBuf,
    /// Probability map per class as `[LABEL=]PATH`; without a label, maps are
    /// assigned to the ground-truth classes in order.
    #[arg(long, required = true)]
    pred: Vec<String>,
    #[arg(long, default_value = "baseline")]
    preset: String,
    #[arg(long, default_value_t = Connectivity::Corner26)]
    connectivity: Connectivity,
    #[arg(long, value_enum, default_value = "voxels")]
    volume_unit: UnitArg,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Numerator constant of the volume-aware loss.
    #[arg(long)]
    numerator_constant: Option<f64>,
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
    #[command(flatten)]
    labels: LabelArgs,
    /// Write per-class gradients as `grad_<CLASS>.json` into this directory.
    #[arg(long)]
    gradient_dir: Option<PathBuf>,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    cases: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum ComponentsCommand {
    /// Label the components of one class and write the id volume.
    Dump(DumpArgs),
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    mask: PathBuf,
    /// Class to extract; all foreground when omitted.
    #[arg(long)]
    class: Option<String>,
    #[arg(long, default_value_t = Connectivity::Corner26)]
    connectivity: Connectivity,
    /// Output id volume (raw or NIfTI, by extension).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    labels: LabelArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INVALID)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Evaluate(a) => evaluate(a, cli.jobs),
        Command::Compare(a) => compare(a),
        Command::Loss(LossCommand::Eval(a)) => loss_eval(a),
        Command::Loss(LossCommand::Gradcheck(a)) => loss_gradcheck(a),
        Command::Phantom(a) => phantom(a),
        Command::Components(ComponentsCommand::Dump(a)) => components_dump(a),
    }
}

fn parse_class(s: &str) -> Result<u8> {
    parse_class_name(s).ok_or_else(|| anyhow!("unknown class {s:?}"))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn evaluate(args: EvaluateArgs, jobs: usize) -> Result<u8> {
    let manifest = CaseManifest::load(&args.manifest)?;
    let classes = match &args.classes {
        Some(c) => c.iter().map(|s| parse_class(s)).collect::<Result<Vec<_>>>()?,
        None => EvaluateOptions::default().classes,
    };
    if !(args.tolerance_mm.is_finite() && args.tolerance_mm >= 0.0) {
        bail!("tolerance must be a non-negative number of mm");
    }
    let opts = EvaluateOptions {
        metrics: EvaluationOptions {
            connectivity: args.connectivity,
            tolerance_mm: args.tolerance_mm,
            ..EvaluationOptions::default()
        },
        classes,
        label_policy: args.labels.policy(),
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let outcomes = pool.install(|| {
        manifest
            .rows
            .par_iter()
            .map(|row| evaluate_row(row, &opts))
            .collect()
    });
    let report = EvaluationReport::assemble(outcomes, &opts);
    write_file(&args.out_csv, &report.to_csv()?)?;
    if let Some(path) = &args.out_json {
        write_file(path, &report.to_json()?)?;
    }
    if let Some(path) = &args.match_table {
        write_file(path, &report.match_tables_json()?)?;
    }
    let failures = report.failures();
    for o in &report.outcomes {
        if let Err(reason) = &o.result {
            eprintln!(
                "case {} (config {}, repeat {}) failed: {reason}",
                o.row.case_id, o.row.config, o.row.repeat
            );
        }
    }
    Ok(match (failures, args.strict) {
        (0, _) => 0,
        (_, true) => EXIT_INVALID,
        (_, false) => EXIT_PARTIAL,
    })
}

fn compare(args: CompareArgs) -> Result<u8> {
    let a = MetricTable::load(&args.a)?;
    let b = MetricTable::load(&args.b)?;
    let report = compare_tables(&a, &b)?;
    let text = report.to_text();
    match &args.out_text {
        Some(path) => write_file(path, &text)?,
        None => print!("{text}"),
    }
    if let Some(path) = &args.out_json {
        write_file(path, &report.to_json()?)?;
    }
    Ok(0)
}

fn pred_assignments(specs: &[String], gt: &LabelVolume) -> Result<Vec<(u8, PathBuf)>> {
    let mut out = Vec::new();
    let mut unlabeled = gt.labels().iter();
    for s in specs {
        match s.split_once('=') {
            Some((label, path)) => out.push((parse_class(label)?, PathBuf::from(path))),
            None => {
                let &label = unlabeled
                    .next()
                    .ok_or_else(|| anyhow!("more probability maps than ground-truth classes"))?;
                out.push((label, PathBuf::from(s)));
            }
        }
    }
    Ok(out)
}

fn loss_eval(args: LossEvalArgs) -> Result<u8> {
    match args.precision {
        Precision::F32 => loss_eval_typed::<f32>(&args),
        Precision::F64 => loss_eval_typed::<f64>(&args),
    }
}

fn loss_eval_typed<T: Scalar>(args: &LossEvalArgs) -> Result<u8> {
    let preset: Preset = args.preset.parse()?;
    let mut cfg = LossConfig::<T>::preset(preset);
    cfg.connectivity = args.connectivity;
    cfg.volume_unit = match args.volume_unit {
        UnitArg::Voxels => VolumeUnit::Voxels,
        UnitArg::Mm3 => VolumeUnit::CubicMillimeters,
    };
    if let Some(e) = args.epsilon {
        cfg.epsilon = T::lit(e);
    }
    if let Some(c) = args.numerator_constant {
        cfg.numerator_constant = T::lit(c);
    }
    let gt = load_labels(&args.gt, &args.labels.policy())?;
    let mut probs = BTreeMap::new();
    for (label, path) in pred_assignments(&args.pred, &gt)? {
        let p = load_volume(&path, &LabelPolicy::Inferred)?
            .into_probabilities()
            .with_context(|| format!("reading probability map {}", path.display()))?;
        let data: Vec<T> = p.data().iter().map(|&v| T::lit(v)).collect();
        let p = ProbVolume::new(p.dims(), p.spacing(), data)?;
        if probs.insert(label, p).is_some() {
            bail!("class {} given twice", class_name(label));
        }
    }
    let result: ConfiguredLoss<T> = configured_loss(&probs, &gt, &cfg)?;
    if let Some(dir) = &args.gradient_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (&label, c) in &result.per_class {
            let grad: Vec<f64> = c.gradient.iter().map(|g| g.to_f64_lossy()).collect();
            let grid = Grid::new(gt.dims(), gt.spacing(), grad)?;
            save_float_grid(dir.join(format!("grad_{}.json", class_name(label))), &grid, Dtype::F64)?;
        }
    }
    if args.json {
        let classes: serde_json::Map<String, serde_json::Value> = result
            .per_class
            .iter()
            .map(|(&label, c)| {
                (
                    class_name(label),
                    json!({
                        "mode": c.mode,
                        "dice": c.dice.value.to_f64_lossy(),
                        "cross_entropy": c.cross_entropy.as_ref().map(|ce| ce.value.to_f64_lossy()),
                    }),
                )
            })
            .collect();
        let doc = json!({
            "preset": preset.to_string(),
            "value": result.combined.to_f64_lossy(),
            "per_class": classes,
        });
        println!("{}", serde_json::to_string_pretty(&doc)?);
    } else {
        println!("preset {preset}: combined loss {}", result.combined);
        for (&label, c) in &result.per_class {
            let ce = c
                .cross_entropy
                .as_ref()
                .map(|ce| format!(", cross-entropy {}", ce.value))
                .unwrap_or_default();
            println!("{} ({:?}): dice term {}{ce}", class_name(label), c.mode, c.dice.value);
        }
    }
    Ok(0)
}

fn loss_gradcheck(args: GradcheckArgs) -> Result<u8> {
    let report = gradcheck::run_suite(args.seed, args.cases)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for (name, s) in [
            ("soft dice", &report.soft_dice),
            ("volume-aware dice", &report.va_dice),
            ("cross-entropy", &report.cross_entropy),
        ] {
            println!(
                "{name}: {} components, {} failures, max rel err {:.3e}, max abs err {:.3e}",
                s.components, s.failures, s.max_relative_error, s.max_absolute_error
            );
        }
        println!("{}", if report.passed() { "PASS" } else { "FAIL" });
    }
    Ok(if report.passed() { 0 } else { EXIT_CHECK_FAILED })
}

fn phantom(args: PhantomArgs) -> Result<u8> {
    let spec = PhantomSpec::load(&args.spec)?;
    let phantom = generate(&spec)?;
    for w in &phantom.warnings {
        eprintln!(
            "warning: lesion {} overwrote {} voxel(s) of lesion {} with a different label",
            w.later, w.voxels, w.earlier
        );
    }
    for path in phantom.save(&args.out_dir)? {
        println!("{}", path.display());
    }
    Ok(0)
}

fn components_dump(args: DumpArgs) -> Result<u8> {
    let vol = load_labels(&args.mask, &args.labels.policy())?;
    let mask = match &args.class {
        Some(c) => vol.extract_class(parse_class(c)?)?,
        None => vol.foreground(),
    };
    let comps = label_components(&mask, args.connectivity);
    save_int_grid(&args.out, comps.ids())?;
    let doc = json!({
        "connectivity": args.connectivity.to_string(),
        "count": comps.count(),
        "volumes": comps.volumes(),
    });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(0)
}
