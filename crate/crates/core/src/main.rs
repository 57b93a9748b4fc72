use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use vesselseg::eval;
use vesselseg::kvol;
use vesselseg::nn::{checkpoint, NetworkConfig};
use vesselseg::phantom::{self, PhantomSpec};
use vesselseg::pipeline::{self, ExperimentConfig};
use vesselseg::seeding::sub_seed;
use vesselseg::stitch::{segment_volume, StitchOptions};
use vesselseg::train::{self, TrainConfig, TrainOutput};
use vesselseg::volume::DEFAULT_CLASSES;

#[derive(Parser, Debug)]
#[command(name = "vesselseg", version, about = "Patch-based 3D vessel segmentation")]
struct Cli {
    /// Worker threads, 0 = one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic phantoms.
    Phantom(PhantomArgs),
    /// Cut training patches from phantoms.
    Slice(SliceArgs),
    /// Train a network on a patch set.
    Train(TrainArgs),
    /// Segment a volume with a trained checkpoint.
    Infer(InferArgs),
    /// Score a segmentation against ground truth.
    Eval(EvalArgs),
    /// Compare weighting schemas on the same phantoms.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct PhantomArgs {
    /// Phantom spec JSON; defaults are used when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "phantom")]
    name: String,
    /// Generate several phantoms named `<name>000`, `<name>001`, ...
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args, Debug)]
struct SliceArgs {
    /// Directory of phantoms written by `phantom`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    patch_size: usize,
    /// Patches per phantom: background, then one count per class.
    #[arg(long, value_delimiter = ',', default_value = "6,6,6,6")]
    counts: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON with optional `network` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Patch index written by `slice`.
    #[arg(long)]
    patches: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the voxel weight maps of every logged step.
    #[arg(long)]
    dump_weights: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Output prefix for `<prefix>_prob.kvol` and `<prefix>_labels.kvol`.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    halo: Option<usize>,
    #[arg(long)]
    tile: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    meta: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CLASSES)]
    classes: usize,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Experiment JSON; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainFile {
    network: NetworkConfig,
    train: TrainConfig,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    subcommand: &'static str,
    config: Value,
    seed: Option<u64>,
    version: &'static str,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    duration_seconds: f64,
}

struct Run {
    subcommand: &'static str,
    config: Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    manifest: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| {
                vesselseg::Error::Parse {
                    path: p.to_path_buf(),
                    detail: e.to_string(),
                }
                .into()
            })
        }
    }
}

/// Writes via a temporary file and rename so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", path.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

fn cmd_phantom(args: &PhantomArgs) -> anyhow::Result<Run> {
    let spec: PhantomSpec = read_json(args.spec.as_deref())?;
    spec.validate()?;
    let jobs: Vec<(String, u64)> = match args.count {
        None => vec![(args.name.clone(), args.seed)],
        Some(n) => (0..n)
            .map(|i| (format!("{}{i:03}", args.name), sub_seed(args.seed, i as u64)))
            .collect(),
    };
    let mut outputs = Vec::new();
    for (name, seed) in &jobs {
        let (volume, labels, meta) = phantom::generate_phantom(&spec, *seed)?;
        let files = phantom::write_phantom(&args.out, name, &volume, &labels, &meta)?;
        outputs.extend([files.image, files.labels, files.meta]);
    }
    Ok(Run {
        subcommand: "phantom",
        config: json!({ "spec": spec, "name": args.name, "count": args.count }),
        seed: Some(args.seed),
        inputs: args.spec.iter().cloned().collect(),
        outputs,
        manifest: args.out.join("phantom.manifest.json"),
    })
}

/// Phantom names in a directory, from their `.meta.json` files, sorted.
fn phantom_names(dir: &Path) -> anyhow::Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".meta.json") {
            names.push(stem.to_string());
        }
    }
    names.sort();
    if names.is_empty() {
        bail!(vesselseg::Error::Config(format!("no phantoms found in {}", dir.display())));
    }
    Ok(names)
}

fn cmd_slice(args: &SliceArgs) -> anyhow::Result<Run> {
    let names = phantom_names(&args.input)?;
    let mut records = Vec::new();
    let mut inputs = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let (volume, labels, meta) = phantom::read_phantom(&args.input, name)?;
        records.extend(phantom::slice_patches(
            &volume,
            &labels,
            &meta,
            args.patch_size,
            &args.counts,
            sub_seed(args.seed, i as u64),
            name,
        )?);
        inputs.push(phantom::PhantomFiles::new(&args.input, name).meta);
    }
    let index = phantom::write_patch_set(&args.out, args.patch_size, &records)?;
    println!("{} patches from {} phantoms -> {}", records.len(), names.len(), index.display());
    Ok(Run {
        subcommand: "slice",
        config: json!({ "patch_size": args.patch_size, "counts": args.counts }),
        seed: Some(args.seed),
        inputs,
        outputs: vec![index],
        manifest: args.out.join("slice.manifest.json"),
    })
}

fn cmd_train(args: &TrainArgs) -> anyhow::Result<Run> {
    let mut file: TrainFile = read_json(args.config.as_deref())?;
    file.train.seed = args.seed;
    let (patch_size, records) = phantom::read_patch_set(&args.patches)?;
    if patch_size != file.network.patch_size {
        bail!(vesselseg::Error::Config(format!(
            "patch set has {patch_size}³ patches, network expects {}³",
            file.network.patch_size
        )));
    }
    let output = TrainOutput { dir: args.out.clone() };
    let every = file.train.checkpoint_every;
    let weights_dir = args.out.join("weights");
    let mut dump_error = None;
    let mut last = (0usize, 0usize);
    let mut dump = |s: &train::PatchStep<'_>| {
        if !s.step.is_multiple_of(every) || dump_error.is_some() {
            return;
        }
        let index = if last.0 == s.step { last.1 + 1 } else { 0 };
        last = (s.step, index);
        if let Err(e) = train::dump_weights(&weights_dir, s.step, index, s.weights) {
            dump_error = Some(e);
        }
    };
    let hook: Option<&mut dyn FnMut(&train::PatchStep<'_>)> = if args.dump_weights { Some(&mut dump) } else { None };
    let outcome = train::train(&records, &file.network, &file.train, None, Some(&output), hook)?;
    if let Some(e) = dump_error {
        return Err(e.into());
    }
    if let Some(entry) = outcome.log.last() {
        println!("step {} loss {:.5} skipped {}", entry.step, entry.loss, entry.skipped);
    }
    let mut outputs = vec![output.checkpoint(), output.log()];
    if args.dump_weights {
        outputs.push(weights_dir);
    }
    Ok(Run {
        subcommand: "train",
        config: serde_json::to_value(&file)?,
        seed: Some(args.seed),
        inputs: vec![args.patches.clone()],
        outputs,
        manifest: args.out.join("train.manifest.json"),
    })
}

fn cmd_infer(args: &InferArgs) -> anyhow::Result<Run> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let config = ckpt.params.config().clone();
    let volume = kvol::read_volume(&args.input)?;
    let options = StitchOptions {
        tile: args.tile,
        halo: args.halo,
        ..StitchOptions::default()
    };
    let (probs, labels) = segment_volume(&ckpt.params, &config, &volume, &options)?;
    let prob_path = with_suffix(&args.output, "_prob.kvol");
    let label_path = with_suffix(&args.output, "_labels.kvol");
    kvol::write_probabilities(&prob_path, &probs, volume.spacing())?;
    kvol::write_labels(&label_path, &labels, volume.spacing())?;
    Ok(Run {
        subcommand: "infer",
        config: json!({ "network": config, "halo": args.halo, "tile": args.tile }),
        seed: None,
        inputs: vec![args.checkpoint.clone(), args.input.clone()],
        outputs: vec![prob_path, label_path],
        manifest: with_suffix(&args.output, ".manifest.json"),
    })
}

fn cmd_eval(args: &EvalArgs) -> anyhow::Result<Run> {
    let (pred, _) = kvol::read_labels(&args.pred)?;
    let (gt, _) = kvol::read_labels(&args.gt)?;
    let meta = phantom::read_meta(&args.meta)?;
    let report = eval::evaluate(&pred, &gt, &meta, args.classes)?;
    write_atomic(&args.out, &serde_json::to_vec_pretty(&report)?)?;
    for c in 1..args.classes as u8 {
        let cell = |region| report.score(c, region).map_or("n/a".to_string(), |s| format!("{:.3}", s.dice));
        println!(
            "{:<8} {} {}  {} {}",
            eval::class_name(c),
            eval::WHOLE_ROI,
            cell(eval::WHOLE_ROI),
            eval::KIDNEY_BOX,
            cell(eval::KIDNEY_BOX)
        );
    }
    Ok(Run {
        subcommand: "eval",
        config: json!({ "classes": args.classes }),
        seed: None,
        inputs: vec![args.pred.clone(), args.gt.clone(), args.meta.clone()],
        outputs: vec![args.out.clone()],
        manifest: args.out.with_extension("manifest.json"),
    })
}

fn cmd_ablate(args: &AblateArgs) -> anyhow::Result<Run> {
    let config: ExperimentConfig = read_json(args.config.as_deref())?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let report = pipeline::ablate(&config, args.seed, Some(&args.out))?;
    let report_path = args.out.join("ablation_report.json");
    let table_path = args.out.join("ablation_table.txt");
    let table = report.table();
    write_atomic(&report_path, &serde_json::to_vec_pretty(&report)?)?;
    write_atomic(&table_path, table.as_bytes())?;
    print!("{table}");
    Ok(Run {
        subcommand: "ablate",
        config: serde_json::to_value(&config)?,
        seed: Some(args.seed),
        inputs: args.config.iter().cloned().collect(),
        outputs: vec![report_path, table_path],
        manifest: args.out.join("ablate.manifest.json"),
    })
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let start = Instant::now();
    let run = match &cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Slice(a) => cmd_slice(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    }?;
    let manifest = RunManifest {
        subcommand: run.subcommand,
        config: run.config,
        seed: run.seed,
        version: env!("CARGO_PKG_VERSION"),
        inputs: run.inputs,
        outputs: run.outputs,
        duration_seconds: start.elapsed().as_secs_f64(),
    };
    write_atomic(&run.manifest, &serde_json::to_vec_pretty(&manifest)?)
}

/// 1 for bad input, 2 for internal faults.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<vesselseg::Error>() {
        Some(e) if !e.is_user_error() => 2,
        _ => 1,
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
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
