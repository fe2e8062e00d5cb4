mod error;
mod overlay;

use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use fusepose::checkpoint::{load_checkpoint, save_checkpoint};
use fusepose::config::{Preset, RunConfig};
use fusepose::evalkit::{self, ablation_csv, curve_csv, curve_svg, run_ablation, score, sweep, sweep_csv, sweep_svg, EvalTarget, Toggle};
use fusepose::fusion::{prepare_all, JOINT_NAMES};
use fusepose::synthdata::{export_jsonl, generate_dataset, read_records, write_records, RecordFile};
use fusepose::training::{train_from, write_atomic, TrainOutputs};
use fusepose::{PoseModel, PreparedSample};

use error::{CliError, Context, Kind, Result};

/// Environment variable overriding the built-in default seed.
const SEED_ENV: &str = "FUSEPOSE_SEED";

#[derive(Parser, Debug)]
#[command(name = "fusepose", version, about = "Camera + LiDAR 3D human pose: data generation, training, evaluation")]
#[command(after_help = "Settings are taken from, in decreasing priority: command-line flags, the --config file, the FUSEPOSE_SEED environment variable (seeds only), built-in defaults.\n\nExit codes: 0 success, 1 i/o error, 2 usage, 3 missing file, 4 schema or format mismatch, 5 training diverged, 6 invalid configuration.")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic record file.
    Synth(SynthArgs),
    /// Train a model; writes checkpoints and metrics.csv per epoch.
    Train(TrainArgs),
    /// Score a checkpoint (or a predictions file) on a record file.
    Eval(EvalArgs),
    /// Predict joints for one record (or all) as JSON lines.
    Infer(InferArgs),
    /// Train the full model and each ablation toggle over several seeds.
    Ablate(AblateArgs),
    /// Validation error over a lambda x 3D-fraction grid.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PresetArg {
    Large,
    Desk,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Large => Preset::Large,
            PresetArg::Desk => Preset::Desk,
        }
    }
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config with [model], [train], [loss] and [synth] sections [default: none].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model size preset.
    #[arg(long, value_enum, default_value_t = PresetArg::Large)]
    preset: PresetArg,
    /// Seed for every random choice (FUSEPOSE_SEED overrides the default).
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Number of samples.
    #[arg(long, default_value_t = defaults().synth.n_samples)]
    n: usize,
    /// Share of samples carrying 3D labels.
    #[arg(long, default_value_t = defaults().synth.fraction_with_3d)]
    fraction3d: f64,
    /// Probability of an occluder per scene.
    #[arg(long, default_value_t = defaults().synth.occlusion_prob)]
    occlusion: f64,
    /// Nearest person distance (m).
    #[arg(long, default_value_t = defaults().synth.min_distance)]
    min_distance: f64,
    /// Farthest person distance (m).
    #[arg(long, default_value_t = defaults().synth.max_distance)]
    max_distance: f64,
    /// Output record file.
    #[arg(long)]
    out: PathBuf,
    /// Also write a JSON-lines dump of the labels here [default: none].
    #[arg(long)]
    jsonl: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainFlags {
    #[command(flatten)]
    common: Common,
    /// Training epochs.
    #[arg(long, default_value_t = defaults().train.epochs)]
    epochs: usize,
    /// Samples per optimiser step.
    #[arg(long, default_value_t = defaults().train.batch_size)]
    batch_size: usize,
    /// Base learning rate.
    #[arg(long, default_value_t = defaults().train.lr)]
    lr: f64,
    /// Learning-rate factor per epoch.
    #[arg(long, default_value_t = defaults().train.lr_decay)]
    lr_decay: f64,
    /// Expected share of each batch drawn from 3D-labelled samples.
    #[arg(long, default_value_t = defaults().train.fraction3d)]
    fraction3d: f64,
    /// Weight of the 2D loss.
    #[arg(long, default_value_t = defaults().loss.lambda)]
    lambda: f64,
    /// Optimiser steps per epoch; 0 means one pass over the training set.
    #[arg(long, default_value_t = 0)]
    steps_per_epoch: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Training record file.
    #[arg(long)]
    data: PathBuf,
    /// Validation record file, scored after every epoch [default: none].
    #[arg(long)]
    val: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out_dir: PathBuf,
    /// Start from this checkpoint instead of a fresh initialisation [default: none].
    #[arg(long)]
    init: Option<PathBuf>,
    /// Keep only latest.fpck instead of one checkpoint per epoch [default: off].
    #[arg(long, default_value_t = false)]
    latest_only: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Record file with labels.
    #[arg(long)]
    data: PathBuf,
    /// Model checkpoint; exactly one of --checkpoint and --preds is required.
    #[arg(long, required_unless_present = "preds", conflicts_with = "preds")]
    checkpoint: Option<PathBuf>,
    /// JSON lines with `id` and world-frame `joints`, e.g. from `infer --all` [default: none].
    #[arg(long)]
    preds: Option<PathBuf>,
    /// Directory for report.csv, curve CSVs and SVG plots [default: none, stdout only].
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Record file.
    #[arg(long)]
    data: PathBuf,
    /// Model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Record index.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Predict every record instead of one [default: off].
    #[arg(long, default_value_t = false)]
    all: bool,
    /// Write an SVG overlay of the (first) prediction here [default: none].
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Training record file.
    #[arg(long)]
    data: PathBuf,
    /// Validation record file.
    #[arg(long)]
    val: PathBuf,
    /// Comma-separated subset of lambda=0, no-rgb, no-depth, no-rff.
    #[arg(long, value_delimiter = ',', default_value = "lambda=0,no-rgb,no-depth,no-rff")]
    toggles: Vec<String>,
    /// Comma-separated training seeds [default: seed, seed+1, seed+2].
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Directory for the CSV table.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Training record file.
    #[arg(long)]
    data: PathBuf,
    /// Validation record file.
    #[arg(long)]
    val: PathBuf,
    /// Comma-separated 2D loss weights.
    #[arg(long, value_delimiter = ',', default_value = "0,0.001,0.01,0.1")]
    lambdas: Vec<f64>,
    /// Comma-separated 3D batch fractions.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5")]
    fractions: Vec<f64>,
    /// Directory for the CSV and SVG outputs.
    #[arg(long)]
    out_dir: PathBuf,
}

fn defaults() -> RunConfig {
    RunConfig::default()
}

fn from_cli(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| CliError::new(Kind::Config, format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Defaults, then preset and env seed, then the config file, then flags.
fn resolve(c: &Common, m: &ArgMatches) -> Result<RunConfig> {
    let text = match &c.config {
        Some(p) => Some(std::fs::read_to_string(p).at(p)?),
        None => None,
    };
    let preset = from_cli(m, "preset").then(|| c.preset.into());
    let mut cfg = RunConfig::resolve(text.as_deref(), preset, env_seed()?).map_err(|e| match &c.config {
        Some(p) => CliError::new(Kind::Schema, format!("{}: {e}", p.display())),
        None => e.into(),
    })?;
    if from_cli(m, "seed") {
        cfg.train.seed = c.seed;
        cfg.synth.seed = c.seed;
    }
    Ok(cfg)
}

fn resolve_train(f: &TrainFlags, m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = resolve(&f.common, m)?;
    let t = &mut cfg.train;
    if from_cli(m, "epochs") {
        t.epochs = f.epochs;
    }
    if from_cli(m, "batch_size") {
        t.batch_size = f.batch_size;
    }
    if from_cli(m, "lr") {
        t.lr = f.lr;
    }
    if from_cli(m, "lr_decay") {
        t.lr_decay = f.lr_decay;
    }
    if from_cli(m, "fraction3d") {
        t.fraction3d = f.fraction3d;
    }
    if from_cli(m, "steps_per_epoch") {
        t.steps_per_epoch = (f.steps_per_epoch > 0).then_some(f.steps_per_epoch);
    }
    if from_cli(m, "lambda") {
        cfg.loss.lambda = f.lambda;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    if !(cfg.loss.lambda >= 0.0 && cfg.loss.epsilon > 0.0) {
        return Err(CliError::new(Kind::Config, "loss needs lambda >= 0 and epsilon > 0"));
    }
    Ok(cfg)
}

fn load_prepared(path: &Path, cfg: &RunConfig) -> Result<(RecordFile, Vec<PreparedSample>)> {
    let file = read_records(path).at(path)?;
    let prepared = prepare_all(&file.samples, &cfg.model)?;
    Ok((file, prepared))
}

fn config_tag(cfg: &RunConfig) -> String {
    format!("{:08x}", crc32fast::hash(cfg.to_toml().as_bytes()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    write_atomic(path, text.as_bytes()).at(path)
}

fn cmd_synth(a: &SynthArgs, m: &ArgMatches) -> Result<()> {
    let mut cfg = resolve(&a.common, m)?;
    let s = &mut cfg.synth;
    if from_cli(m, "n") {
        s.n_samples = a.n;
    }
    if from_cli(m, "fraction3d") {
        s.fraction_with_3d = a.fraction3d;
    }
    if from_cli(m, "occlusion") {
        s.occlusion_prob = a.occlusion;
    }
    if from_cli(m, "min_distance") {
        s.min_distance = a.min_distance;
    }
    if from_cli(m, "max_distance") {
        s.max_distance = a.max_distance;
    }
    let file = generate_dataset(&cfg.synth)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    write_records(&a.out, &file).at(&a.out)?;
    if let Some(p) = &a.jsonl {
        let f = std::fs::File::create(p).at(p)?;
        let mut w = BufWriter::new(f);
        export_jsonl(&file, &mut w).and_then(|_| w.flush()).at(p)?;
    }
    let n3 = file.samples.iter().filter(|s| s.labels3d.is_some()).count();
    println!("wrote {} samples ({} with 3D labels) to {}", file.samples.len(), n3, a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs, m: &ArgMatches) -> Result<()> {
    let mut cfg = resolve_train(&a.flags, m)?;
    let model = match &a.init {
        Some(p) => {
            let model: PoseModel = load_checkpoint(p).at(p)?;
            cfg.model = model.config.clone();
            model
        }
        None => PoseModel::init(&cfg.model, cfg.train.seed)?,
    };
    let (_, data) = load_prepared(&a.data, &cfg)?;
    let val = match &a.val {
        Some(p) => load_prepared(p, &cfg)?.1,
        None => Vec::new(),
    };
    std::fs::create_dir_all(&a.out_dir).at(&a.out_dir)?;
    write_file(&a.out_dir.join("config.toml"), &cfg.to_toml())?;
    let out = TrainOutputs { dir: Some(a.out_dir.clone()), latest_only: a.latest_only };
    let r = train_from(model, &data, &val, &cfg.experiment(), &out)?;
    if cfg.train.epochs == 0 {
        save_checkpoint(&r.model, &a.out_dir.join("latest.fpck")).at(&a.out_dir)?;
    }
    if let Some(last) = r.log.last() {
        let v = last.val_mpjpe3d.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
        println!("epochs={} train_loss={:.6} val_mpjpe3d_cm={v}", r.log.len(), last.train_loss);
    }
    Ok(())
}

fn read_preds(path: &Path, file: &RecordFile) -> Result<Vec<Vec<[f64; 3]>>> {
    #[derive(serde::Deserialize)]
    struct Line {
        id: u64,
        joints: Vec<[f64; 3]>,
    }
    let f = std::fs::File::open(path).at(path)?;
    let mut by_id = HashMap::new();
    for (k, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line).map_err(|e| CliError::new(Kind::Schema, format!("{}:{}: {e}", path.display(), k + 1)))?;
        by_id.insert(l.id, l.joints);
    }
    file.samples
        .iter()
        .map(|s| by_id.remove(&s.id).ok_or_else(|| CliError::new(Kind::Schema, format!("{}: no prediction for sample id {}", path.display(), s.id))))
        .collect()
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let file = read_records(&a.data).at(&a.data)?;
    let targets: Vec<EvalTarget> = file.samples.iter().map(EvalTarget::of_sample).collect();
    let preds = if let Some(p) = &a.checkpoint {
        let model: PoseModel = load_checkpoint(p).at(p)?;
        let data = prepare_all(&file.samples, &model.config)?;
        evalkit::evaluate(&model, &data)?.predictions
    } else {
        read_preds(a.preds.as_ref().expect("clap enforces one source"), &file)?
    };
    let ev = score(&targets, preds)?;
    let r = &ev.report;
    println!(
        "samples={} mpjpe3d_cm={} mpjpe2d_px={} joints3d={} joints2d={}",
        file.samples.len(),
        fmt_opt(r.mpjpe3d),
        fmt_opt(r.mpjpe2d),
        r.n_joints_counted,
        r.n_joints_counted_2d
    );
    if let Some(dir) = &a.out_dir {
        let report = format!(
            "metric,value\nsamples,{}\nmpjpe3d_cm,{}\nmpjpe2d_px,{}\njoints3d,{}\njoints2d,{}\n",
            file.samples.len(),
            fmt_opt(r.mpjpe3d),
            fmt_opt(r.mpjpe2d),
            r.n_joints_counted,
            r.n_joints_counted_2d
        );
        write_file(&dir.join("report.csv"), &report)?;
        write_file(&dir.join("distance_curve.csv"), &curve_csv(&r.distance_curve, "distance_m"))?;
        write_file(&dir.join("visibility_curve.csv"), &curve_csv(&r.visibility_curve, "visible_joints"))?;
        if !r.distance_curve.is_empty() {
            write_file(&dir.join("distance_curve.svg"), &curve_svg(&r.distance_curve, "distance (m)"))?;
        }
        if !r.visibility_curve.is_empty() {
            write_file(&dir.join("visibility_curve.svg"), &curve_svg(&r.visibility_curve, "visible joints"))?;
        }
    }
    Ok(())
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    let file = read_records(&a.data).at(&a.data)?;
    let model: PoseModel = load_checkpoint(&a.checkpoint).at(&a.checkpoint)?;
    let indices: Vec<usize> = if a.all { (0..file.samples.len()).collect() } else { vec![a.index] };
    if let Some(&i) = indices.iter().find(|&&i| i >= file.samples.len()) {
        return Err(CliError::new(Kind::Config, format!("index {i} out of range ({} records)", file.samples.len())));
    }
    let stdout = std::io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let mut first_overlay = None;
    for &i in &indices {
        let s = &file.samples[i];
        let js = model.forward(s)?;
        let joints: Vec<[f64; 3]> = js.positions3d.iter().map(|p| p.map(f64::from)).collect();
        let uv: Vec<[f64; 2]> = js.positions2d.unwrap_or_default().iter().map(|p| p.map(f64::from)).collect();
        let uv_json: Vec<Option<[f64; 2]>> = uv.iter().map(|p| p.iter().all(|v| v.is_finite()).then_some(*p)).collect();
        let names: Vec<&str> = if joints.len() == JOINT_NAMES.len() { JOINT_NAMES.to_vec() } else { Vec::new() };
        let line = serde_json::json!({ "index": i, "id": s.id, "names": names, "joints": joints, "uv": uv_json });
        writeln!(out, "{line}").map_err(|e| CliError::new(Kind::Io, e.to_string()))?;
        if first_overlay.is_none() {
            first_overlay = Some((i, uv));
        }
    }
    out.flush().map_err(|e| CliError::new(Kind::Io, e.to_string()))?;
    if let (Some(p), Some((i, uv))) = (&a.svg, first_overlay) {
        let s = &file.samples[i];
        let label = s.labels2d.as_deref().map(|l| (l, s.visibility.as_slice()));
        write_file(p, &overlay::overlay_svg(&s.image, &uv, label))?;
    }
    Ok(())
}

fn cmd_ablate(a: &AblateArgs, m: &ArgMatches) -> Result<()> {
    let cfg = resolve_train(&a.flags, m)?;
    let toggles = a
        .toggles
        .iter()
        .filter(|t| !t.is_empty())
        .map(|t| Toggle::parse(t).ok_or_else(|| CliError::new(Kind::Config, format!("unknown toggle {t:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let base = cfg.train.seed;
    let seeds = if a.seeds.is_empty() { vec![base, base + 1, base + 2] } else { a.seeds.clone() };
    let (_, data) = load_prepared(&a.data, &cfg)?;
    let (_, val) = load_prepared(&a.val, &cfg)?;
    let rows = run_ablation(&data, &val, &cfg.experiment(), &toggles, &seeds)?;
    let csv = ablation_csv(&rows);
    let path = a.out_dir.join(format!("ablation_{}_seed{}.csv", config_tag(&cfg), seeds[0]));
    write_file(&path, &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_sweep(a: &SweepArgs, m: &ArgMatches) -> Result<()> {
    let cfg = resolve_train(&a.flags, m)?;
    let (_, data) = load_prepared(&a.data, &cfg)?;
    let (_, val) = load_prepared(&a.val, &cfg)?;
    let grid = sweep(&data, &val, &cfg.experiment(), &a.lambdas, &a.fractions, cfg.train.seed)?;
    let stem = format!("sweep_{}_seed{}", config_tag(&cfg), cfg.train.seed);
    let csv = sweep_csv(&grid);
    write_file(&a.out_dir.join(format!("{stem}.csv")), &csv)?;
    write_file(&a.out_dir.join(format!("{stem}.svg")), &sweep_svg(&grid))?;
    print!("{csv}");
    Ok(())
}

fn run(cli: &Cli, m: &ArgMatches) -> Result<()> {
    let (_, sub) = m.subcommand().expect("subcommand is required");
    match &cli.cmd {
        Cmd::Synth(a) => cmd_synth(a, sub),
        Cmd::Train(a) => cmd_train(a, sub),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Ablate(a) => cmd_ablate(a, sub),
        Cmd::Sweep(a) => cmd_sweep(a, sub),
    }
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) => e.exit(),
        Err(e) => {
            let text = e.render().to_string();
            let message = text.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", serde_json::json!({ "error": "usage", "code": 2, "message": message }));
            return ExitCode::from(2);
        }
    };
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    match run(&cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.kind.code() as u8)
        }
    }
}
