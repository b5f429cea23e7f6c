//! `dsatrack` subcommands.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use dsatrack_core::eval::{
    aggregate, generate_sequence, precision_success, run_sequence, sample_inputs, sequence_set, toy_train_with, Attribute,
    SequenceRecord, SequenceSpec,
};
use dsatrack_core::flops::forward_flops;
use dsatrack_core::gradsuite::gradient_suite;
use dsatrack_core::head::BBox;
use dsatrack_core::model::{LayerSpec, Model};
use dsatrack_core::pruning::{
    build_pruned_model, profile_model, profiles_from_table, rank_and_prune, sequential_prune, LayerGroups, PruneSpec, Variant,
    REFERENCE_CONTRIBUTIONS,
};
use dsatrack_core::tracker::Tracker;

use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::parallel_map;
use crate::report::{metrics_csv, metrics_summary, metrics_svg, parse_contributions, prune_doc};
use crate::seqio::{self, FrameFormat};
use crate::weights::{load_model, save_model};

/// Largest accepted gradient-check error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(
    name = "dsatrack",
    version,
    about = "Semantic-aware transformer tracker: train, track, prune, evaluate"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// Flat key=value config file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// DSAW weight file
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Sequences processed in parallel
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory [default: out]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Config override, repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Finite-difference check of every differentiable stage
    Gradcheck,
    /// Write synthetic sequences
    Synth(SynthArgs),
    /// Toy training on synthetic or supplied sequences
    Train(TrainArgs),
    /// Track sequence directories and write results.txt
    Track(TrackArgs),
    /// Layer pruning: profile or read contributions, emit spec and weights
    Prune(PruneArgs),
    /// One-pass evaluation with precision and success curves
    Eval(EvalArgs),
    /// Analytic FLOPs of the full model and pruned variants
    Flops(FlopsArgs),
}

#[derive(Args, Debug, Clone)]
pub struct SynthSource {
    /// Number of synthetic sequences
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Frames per sequence
    #[arg(long, default_value_t = 100)]
    pub length: usize,
    /// Comma-separated attribute tags
    #[arg(long, value_delimiter = ',')]
    pub attributes: Vec<String>,
    /// Seed of the first sequence
    #[arg(long, default_value_t = 1000)]
    pub data_seed: u64,
}

impl SynthSource {
    fn attrs(&self) -> CliResult<Vec<Attribute>> {
        Ok(self
            .attributes
            .iter()
            .map(|a| Attribute::parse(a))
            .collect::<Result<_, _>>()?)
    }

    fn generate(&self) -> CliResult<Vec<SequenceRecord>> {
        Ok(sequence_set(self.count, self.length, self.data_seed, &self.attrs()?)?)
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum FormatArg {
    Ppm,
    Png,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub source: SynthSource,
    /// Constant velocity `vx,vy` in px/frame
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub velocity: Option<Vec<f64>>,
    /// Target size `w,h` in px
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub size: Option<Vec<f64>>,
    /// Camera jitter standard deviation in px
    #[arg(long, default_value_t = 6.0)]
    pub jitter: f64,
    #[arg(long, default_value_t = 320)]
    pub width: usize,
    #[arg(long, default_value_t = 240)]
    pub height: usize,
    #[arg(long, value_enum, default_value_t = FormatArg::Ppm)]
    pub format: FormatArg,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training sequence directories; synthetic sequences when empty
    pub dirs: Vec<PathBuf>,
    #[command(flatten)]
    pub source: SynthSource,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Start from standard blocks everywhere
    #[arg(long)]
    pub standard: bool,
    /// Output weight file name under --out
    #[arg(long, default_value = "model.dsaw")]
    pub name: String,
}

#[derive(Args, Debug)]
pub struct TrackArgs {
    /// Sequence directories; every sequence under the data root when empty
    pub dirs: Vec<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodArg {
    /// Contribution ranking
    Crp,
    /// Fixed-order sequential baseline
    Sp,
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    /// d8, d7, d6 or d4
    #[arg(long, default_value = "d6")]
    pub variant: String,
    #[arg(long, value_enum, default_value_t = MethodArg::Crp)]
    pub method: MethodArg,
    /// JSON contribution table; skips profiling
    #[arg(long)]
    pub contributions: Option<PathBuf>,
    /// Profiling samples
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    #[command(flatten)]
    pub source: SynthSource,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Sequence directories; every sequence under the data root when empty
    pub dirs: Vec<PathBuf>,
    /// Evaluate on freshly generated synthetic sequences
    #[arg(long)]
    pub synthetic: bool,
    #[command(flatten)]
    pub source: SynthSource,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    /// JSON contribution table [default: built-in reference table]
    #[arg(long)]
    pub contributions: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs; returns the exit status.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn resolve_config(common: &Common) -> CliResult<Config> {
    let mut cfg = Config::default();
    if let Ok(d) = std::env::var("DSATRACK_DATA") {
        if !d.is_empty() {
            cfg.data = Some(PathBuf::from(d));
        }
    }
    if let Some(path) = &common.config {
        cfg.apply_text(&fs::read_to_string(path).map_err(|e| CliError::io(path, e))?)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::invalid(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(w) = &common.weights {
        cfg.weights = Some(w.clone());
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(j) = common.jobs {
        cfg.jobs = j;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if cfg.jobs == 0 {
        return Err(CliError::invalid("--jobs must be at least 1"));
    }
    cfg.model.validate()?;
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    let cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::Gradcheck => gradcheck(&cfg),
        Command::Synth(a) => synth(&cfg, &a),
        Command::Train(a) => train(cfg, &a),
        Command::Track(a) => track(&cfg, &a),
        Command::Prune(a) => prune(&cfg, &a),
        Command::Eval(a) => eval(&cfg, &a),
        Command::Flops(a) => flops(&cfg, &a),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Weights from `--weights`, otherwise a model initialized from the seed.
pub fn load_or_init(cfg: &Config) -> CliResult<Model> {
    match &cfg.weights {
        Some(p) => load_model(p),
        None => Ok(Model::new(cfg.model.clone(), cfg.seed)?),
    }
}

fn gradcheck(cfg: &Config) -> CliResult<()> {
    let checks = gradient_suite(cfg.seed)?;
    println!("{:<34} {:>7} {:>12}", "stage", "coords", "max rel err");
    let mut failed = Vec::new();
    for c in &checks {
        let ok = c.max_rel_error < GRADCHECK_TOLERANCE;
        println!(
            "{:<34} {:>7} {:>12.3e} {}",
            c.name,
            c.coordinates,
            c.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn synth(cfg: &Config, a: &SynthArgs) -> CliResult<()> {
    let attrs = a.source.attrs()?;
    let format = match a.format {
        FormatArg::Ppm => FrameFormat::Ppm,
        FormatArg::Png => FrameFormat::Png,
    };
    for i in 0..a.source.count as u64 {
        let mut spec = SequenceSpec::new(a.source.length, a.source.data_seed + i).with(&attrs);
        spec.width = a.width;
        spec.height = a.height;
        spec.jitter = a.jitter;
        spec.velocity = a.velocity.as_ref().map(|v| (v[0], v[1]));
        spec.size = a.size.as_ref().map(|v| (v[0], v[1]));
        let seq = generate_sequence(&spec)?;
        let dir = cfg.out.join(format!("seq-{}", spec.seed));
        seqio::write_sequence(&dir, &seq, format)?;
        println!("{}", dir.display());
    }
    Ok(())
}

fn read_sequences(dirs: &[PathBuf], jobs: usize) -> CliResult<Vec<(String, SequenceRecord)>> {
    parallel_map(dirs, jobs, |d| Ok((dir_name(d), seqio::read_sequence(d)?)))
        .into_iter()
        .collect()
}

fn dir_name(d: &Path) -> String {
    d.file_name()
        .map_or_else(|| "sequence".into(), |n| n.to_string_lossy().into_owned())
}

fn train(mut cfg: Config, a: &TrainArgs) -> CliResult<()> {
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    let seqs: Vec<SequenceRecord> = if a.dirs.is_empty() {
        a.source.generate()?
    } else {
        read_sequences(&a.dirs, cfg.jobs)?.into_iter().map(|p| p.1).collect()
    };
    if a.standard {
        cfg.model = cfg.model.standard();
    }
    let mut model = load_or_init(&cfg)?;
    create_dir(&cfg.out)?;
    let mut log = String::from("step,loss\n");
    let report = toy_train_with(&mut model, &seqs, &cfg.train, |step, loss| {
        log.push_str(&format!("{step},{loss:.6}\n"));
        if step % 100 == 0 {
            eprintln!("step {step:>5}  loss {loss:.4}");
        }
    })?;
    write(&cfg.out.join("train_loss.csv"), &log)?;
    let path = cfg.out.join(&a.name);
    save_model(&model, &path)?;
    if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
        println!("steps {}  first loss {first:.4}  last loss {last:.4}", report.losses.len());
    }
    println!("{}", path.display());
    Ok(())
}

fn sequence_dirs(cfg: &Config, dirs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    if !dirs.is_empty() {
        return Ok(dirs.to_vec());
    }
    let root = cfg
        .data
        .as_ref()
        .ok_or_else(|| CliError::invalid("no sequence directories given and no data root (DSATRACK_DATA or data=)"))?;
    let found = seqio::dataset_sequences(root)?;
    if found.is_empty() {
        return Err(CliError::invalid(format!(
            "{}: no sequences with {}",
            root.display(),
            seqio::GROUNDTRUTH
        )));
    }
    Ok(found)
}

fn track_dir(model: &Model, cfg: &Config, dir: &Path) -> CliResult<(Vec<BBox>, Vec<BBox>)> {
    let frames = seqio::list_frames(dir)?;
    let gt = seqio::read_boxes(&dir.join(seqio::GROUNDTRUTH))?;
    let init = *gt
        .first()
        .ok_or_else(|| CliError::invalid(format!("{}: empty ground truth", dir.display())))?;
    let mut tracker = Tracker::new(model, cfg.tracker.clone());
    tracker.init(&seqio::read_frame(&frames[0])?, init, cfg.seed)?;
    let mut out = vec![init];
    for f in &frames[1..] {
        out.push(tracker.step(&seqio::read_frame(f)?)?.bbox);
    }
    Ok((out, gt))
}

fn track(cfg: &Config, a: &TrackArgs) -> CliResult<()> {
    let dirs = sequence_dirs(cfg, &a.dirs)?;
    let model = load_or_init(cfg)?;
    let results = parallel_map(&dirs, cfg.jobs, |d| track_dir(&model, cfg, d));
    for (d, r) in dirs.iter().zip(results) {
        let (pred, gt) = r?;
        let out = cfg.out.join(dir_name(d));
        create_dir(&out)?;
        let path = out.join(seqio::RESULTS);
        seqio::write_boxes(&path, &pred)?;
        match precision_success(&pred, &gt) {
            Ok(m) => println!(
                "{}  frames {}  precision@20 {:.3}  success AUC {:.3}",
                path.display(),
                pred.len(),
                m.precision_at_20,
                m.success_auc
            ),
            Err(_) => println!("{}  frames {}", path.display(), pred.len()),
        }
    }
    Ok(())
}

fn eval(cfg: &Config, a: &EvalArgs) -> CliResult<()> {
    let named: Vec<(String, SequenceRecord)> = if a.synthetic {
        a.source
            .generate()?
            .into_iter()
            .map(|s| (format!("seq-{}", s.seed), s))
            .collect()
    } else {
        read_sequences(&sequence_dirs(cfg, &a.dirs)?, cfg.jobs)?
    };
    let model = load_or_init(cfg)?;
    let preds = parallel_map(&named, cfg.jobs, |(_, s)| run_sequence(&model, s, &cfg.tracker, cfg.seed));
    let root = cfg.out.join("eval");
    let mut per = Vec::with_capacity(named.len());
    for ((name, seq), pred) in named.iter().zip(preds) {
        let pred = pred?;
        let dir = root.join(name);
        create_dir(&dir)?;
        seqio::write_boxes(&dir.join(seqio::RESULTS), &pred)?;
        per.push((precision_success(&pred, &seq.boxes)?, seq.attributes.clone()));
    }
    let report = aggregate(&per)?;
    write(&root.join("metrics.csv"), &metrics_csv(&report))?;
    write(&root.join("curves.svg"), &metrics_svg(&report))?;
    let summary = metrics_summary(&report);
    write(&root.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    println!(
        "sequences {}  frames {}  precision@20 {:.4}  success AUC {:.4}",
        report.sequences, report.frames, report.precision_at_20, report.success_auc
    );
    for s in &summary.attributes {
        println!(
            "  {:<16} n={:<3} precision@20 {:.4}  success AUC {:.4}",
            s.attribute, s.sequences, s.precision_at_20, s.success_auc
        );
    }
    Ok(())
}

fn parse_variant(s: &str) -> CliResult<Variant> {
    Variant::parse(s).ok_or_else(|| CliError::invalid(format!("unknown variant `{s}` (d8, d7, d6, d4)")))
}

fn read_table(path: &Path) -> CliResult<Vec<(usize, f64)>> {
    parse_contributions(&fs::read_to_string(path).map_err(|e| CliError::io(path, e))?)
}

fn prune(cfg: &Config, a: &PruneArgs) -> CliResult<()> {
    let variant = parse_variant(&a.variant)?;
    let (p_d, p_s) = variant.ratios();
    let model = load_or_init(cfg)?;
    let groups = LayerGroups::from_config(model.config());
    let spec = match (a.method, &a.contributions) {
        (MethodArg::Sp, _) => sequential_prune(&groups, p_d, p_s)?,
        (MethodArg::Crp, Some(path)) => {
            let profiles = profiles_from_table(&groups, &read_table(path)?, 0)?;
            rank_and_prune(&profiles, &groups, p_d, p_s)?
        }
        (MethodArg::Crp, None) => {
            let seqs = a.source.generate()?;
            let inputs = sample_inputs(&seqs, model.config(), a.samples, cfg.seed)?;
            let profiles = profile_model(&model, &inputs)?;
            rank_and_prune(&profiles, &groups, p_d, p_s)?
        }
    };
    create_dir(&cfg.out)?;
    let doc = prune_doc(&spec, Some(variant.name()));
    let spec_path = cfg.out.join("prune_spec.json");
    write(&spec_path, &serde_json::to_string_pretty(&doc)?)?;
    let pruned = build_pruned_model(&model, &spec)?;
    let weights = cfg.out.join(format!("pruned-{}.dsaw", variant.name()));
    save_model(&pruned, &weights)?;
    let join = |v: &[usize]| v.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",");
    println!("removed {}", join(&spec.removed()));
    println!("retained {}", join(&spec.retained));
    println!("{}\n{}", spec_path.display(), weights.display());
    Ok(())
}

fn layer_specs(model: &Model, spec: &PruneSpec) -> Vec<LayerSpec> {
    let removed = spec.removed();
    model
        .layers()
        .iter()
        .copied()
        .filter(|l| !removed.contains(&l.index))
        .collect()
}

fn flops(cfg: &Config, a: &FlopsArgs) -> CliResult<()> {
    let model = load_or_init(cfg)?;
    let mcfg = model.config();
    let groups = LayerGroups::from_config(mcfg);
    let table = match &a.contributions {
        Some(p) => read_table(p)?,
        None => REFERENCE_CONTRIBUTIONS.to_vec(),
    };
    let profiles = profiles_from_table(&groups, &table, 0)?;
    let full = forward_flops(mcfg, model.layers()).total;
    let mut csv = String::from("variant,method,removed,flops\n");
    println!("{:<6} {:<22} {:<28} {:>14}", "model", "method", "removed", "flops");
    println!("{:<6} {:<22} {:<28} {:>14}", "full", "-", "-", full);
    csv.push_str(&format!("full,-,,{full}\n"));
    for v in Variant::ALL {
        let (p_d, p_s) = v.ratios();
        for spec in [
            rank_and_prune(&profiles, &groups, p_d, p_s)?,
            sequential_prune(&groups, p_d, p_s)?,
        ] {
            let f = forward_flops(mcfg, &layer_specs(&model, &spec)).total;
            let removed = spec.removed().iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" ");
            let method = crate::report::method_name(spec.method);
            println!("{:<6} {:<22} {:<28} {:>14}", v.name(), method, removed, f);
            csv.push_str(&format!("{},{method},{removed},{f}\n", v.name()));
        }
    }
    create_dir(&cfg.out)?;
    write(&cfg.out.join("flops.csv"), &csv)
}
