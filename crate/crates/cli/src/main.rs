use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rfshapelet::checkpoint::ModelCheckpoint;
use rfshapelet::config::RunConfig;
use rfshapelet::diffnum::{check_all_ops, GradCheckOptions};
use rfshapelet::explain::{explain, export_explanation, faithfulness_eval, ExportFormat};
use rfshapelet::inference::{evaluate, EvalMode, FewShotProtocol};
use rfshapelet::model::Census;
use rfshapelet::signal::{load_dataset, save_dataset, Dataset, IqFrame};
use rfshapelet::trainer::{loss_gradcheck, train};
use rfshapelet::{Checkpoint64, Model64};

const MANIFEST: &str = "dataset.toml";
const PAYLOAD: &str = "dataset.bin";

#[derive(Parser)]
#[command(name = "rfshapelet", version, about = "Shapelet-augmented RF fingerprinting")]
struct Cli {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration except the fleet seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset into OUT/dataset.toml and OUT/dataset.bin.
    Synth,
    /// Train a model; writes OUT/final.ckpt, OUT/best.ckpt and OUT/train.log.
    Train(DataArg),
    /// Standard accuracy per domain.
    Eval(EvalArgs),
    /// Episodic prototype accuracy per target domain.
    Fewshot(FewshotArgs),
    /// Top-shapelet explanation of one frame.
    Explain(ExplainArgs),
    /// Guided versus random masking accuracy drops.
    Faithfulness(CheckpointArgs),
    /// Finite-difference check of every op and of the full loss.
    Gradcheck(GradcheckArgs),
    /// Parameter census of a checkpoint, or of the configured model.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct DataArg {
    /// Manifest written by `synth`; the configured corpus is synthesized when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum Part {
    /// Held-out source frames plus every target frame.
    Test,
    /// Every frame.
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CheckpointArgs,
    #[arg(long, value_enum, default_value = "test")]
    part: Part,
    /// Comma-separated domain names to report.
    #[arg(long, value_delimiter = ',')]
    domains: Vec<String>,
}

#[derive(Args)]
struct FewshotArgs {
    #[command(flatten)]
    common: CheckpointArgs,
    /// Support examples per class; defaults to the configured value.
    #[arg(long)]
    n_shot: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Svg,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    common: CheckpointArgs,
    /// Index into the dataset's frame list.
    #[arg(long)]
    frame_id: usize,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Frames in the full-loss check.
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Random trials per primitive op.
    #[arg(long, default_value_t = 3)]
    trials: usize,
    /// Coordinates sampled per tensor in the full-loss check.
    #[arg(long, default_value_t = 8)]
    coords: usize,
    /// Include frozen tensors in the full-loss check.
    #[arg(long)]
    all_tensors: bool,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint to inspect; the configured model is counted analytically when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also list every tensor.
    #[arg(long)]
    tensors: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s)?,
        None => cfg,
    })
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Synth => cmd_synth(&cfg, out),
        Command::Train(a) => cmd_train(&cfg, a, out),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Fewshot(a) => cmd_fewshot(&cfg, a),
        Command::Explain(a) => cmd_explain(&cfg, a, out),
        Command::Faithfulness(a) => cmd_faithfulness(&cfg, a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&cfg, a),
        Command::Inspect(a) => cmd_inspect(&cfg, a),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn dataset(cfg: &RunConfig, arg: &DataArg) -> Result<Dataset> {
    match &arg.data {
        Some(p) => Ok(load_dataset(p)?),
        None => Ok(cfg.synth.generate()?.0),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint64> {
    Ok(ModelCheckpoint::load(path)?)
}

fn check_compatible(model: &Model64, ds: &Dataset) -> Result<()> {
    if ds.frame_length() != model.config.frame_length || ds.class_count() != model.config.classes {
        bail!(
            "dataset has {} classes of length {}, checkpoint expects {} of length {}",
            ds.class_count(),
            ds.frame_length(),
            model.config.classes,
            model.config.frame_length
        );
    }
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let (ds, _) = cfg.synth.generate()?;
    let manifest = out.join(MANIFEST);
    save_dataset(&ds, &manifest, &out.join(PAYLOAD))?;
    println!("frames {} classes {} domains {}", ds.len(), ds.class_count(), ds.domains().len());
    for cell in ds.cell_counts() {
        println!("class {} domain {} count {}", cell.class, cell.domain, cell.count);
    }
    println!("manifest {}", manifest.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, a: &DataArg, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let ds = dataset(cfg, a)?;
    let parts = cfg.splits(&ds)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?).context("cannot write config.toml")?;
    let log_path = out.join("train.log");
    let mut log = fs::File::create(&log_path).with_context(|| format!("cannot create {}", log_path.display()))?;
    let mut io_err = None;
    let outcome = train::<f64>(&cfg.model, &cfg.train, parts.train.frames(), parts.val.frames(), |e| {
        println!("{e}");
        if let Err(err) = writeln!(log, "{e}") {
            io_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("cannot write train.log");
    }
    outcome.last.save(&out.join("final.ckpt"))?;
    if let Some(best) = &outcome.best {
        best.save(&out.join("best.ckpt"))?;
        println!("best epoch {} val_acc {:.4}", best.meta.epoch, best.meta.val_accuracy.unwrap_or(f64::NAN));
    }
    println!("checkpoints {}", out.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.common.checkpoint)?;
    let ds = dataset(cfg, &a.common.data)?;
    check_compatible(&ck.model, &ds)?;
    let ds = match a.part {
        Part::All => ds,
        Part::Test => {
            let parts = cfg.splits(&ds)?;
            let frames: Vec<IqFrame> = parts.test.into_frames().into_iter().chain(parts.target.into_frames()).collect();
            Dataset::new(ds.frame_length(), ds.class_count(), ds.domains().to_vec(), frames)?
        }
    };
    let rows = evaluate(&ck.model, &ds, EvalMode::Standard)?;
    for d in &a.domains {
        if !rows.iter().any(|r| &r.name == d) {
            bail!("no frames from domain `{d}`");
        }
    }
    println!("{:<20} {:<7} {:>7} {:>9}", "domain", "role", "frames", "accuracy");
    for r in rows.iter().filter(|r| a.domains.is_empty() || a.domains.contains(&r.name)) {
        println!("{:<20} {:<7} {:>7} {:>9.4}", r.name, format!("{:?}", r.role).to_lowercase(), r.frames, r.accuracy);
    }
    Ok(())
}

fn cmd_fewshot(cfg: &RunConfig, a: &FewshotArgs) -> Result<()> {
    let ck = load_checkpoint(&a.common.checkpoint)?;
    let ds = dataset(cfg, &a.common.data)?;
    check_compatible(&ck.model, &ds)?;
    let protocol = FewShotProtocol {
        n_shot: a.n_shot.unwrap_or(cfg.fewshot.n_shot),
        ..cfg.fewshot
    };
    let target = cfg.splits(&ds)?.target;
    if target.is_empty() {
        bail!("dataset has no target-domain frames");
    }
    let rows = evaluate(&ck.model, &target, EvalMode::FewShot(protocol))?;
    println!(
        "n_shot {} n_query {} repeats {} seed {}",
        protocol.n_shot, protocol.n_query, protocol.repeats, protocol.seed
    );
    println!("{:<20} {:>7} {:>9} {:>8}", "domain", "frames", "mean", "std");
    for r in &rows {
        println!("{:<20} {:>7} {:>9.4} {:>8.4}", r.name, r.frames, r.accuracy, r.std.unwrap_or(0.0));
    }
    Ok(())
}

fn cmd_explain(cfg: &RunConfig, a: &ExplainArgs, out: &Path) -> Result<()> {
    let ck = load_checkpoint(&a.common.checkpoint)?;
    let ds = dataset(cfg, &a.common.data)?;
    check_compatible(&ck.model, &ds)?;
    let Some(frame) = ds.frames().get(a.frame_id) else {
        bail!("frame_id {} out of range for {} frames", a.frame_id, ds.len());
    };
    let expl = explain(&ck.model, frame, a.top_k)?;
    ensure_dir(out)?;
    let (format, ext) = match a.format {
        Format::Csv => (ExportFormat::Csv, "csv"),
        Format::Svg => (ExportFormat::Svg, "svg"),
    };
    let path = out.join(format!("explain_{}.{ext}", a.frame_id));
    export_explanation(&expl, frame, a.frame_id, &path, format)?;
    println!("frame {} device {} predicted {}", a.frame_id, frame.device, expl.predicted);
    println!("{:>5} {:>4} {:>7} {:>12} {:>10}", "S#", "len", "t_star", "activation", "distance");
    for e in &expl.entries {
        println!("{:>5} {:>4} {:>7} {:>12.6} {:>10.6}", e.shapelet, e.length, e.t_star, e.activation, e.distance);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_faithfulness(cfg: &RunConfig, a: &CheckpointArgs, out: &Path) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let ds = dataset(cfg, &a.data)?;
    check_compatible(&ck.model, &ds)?;
    let test = cfg.splits(&ds)?.test;
    let report = faithfulness_eval(&ck.model, test.frames(), &cfg.faithfulness)?;
    ensure_dir(out)?;
    let mut placements = String::from("length,frame,shapelet,guided_start,random_start\n");
    for l in &report.lengths {
        for p in &l.placements {
            placements.push_str(&format!("{},{},{},{},{}\n", l.length, p.frame, p.shapelet, p.guided_start, p.random_start));
        }
    }
    let path = out.join("faithfulness_placements.csv");
    fs::write(&path, placements).with_context(|| format!("cannot write {}", path.display()))?;
    println!("frames {} baseline {:.4}", report.frames, report.baseline_accuracy);
    println!("{:>6} {:>10} {:>10} {:>11} {:>11}", "L", "guided", "random", "guided_drop", "random_drop");
    for l in &report.lengths {
        println!(
            "{:>6} {:>10.4} {:>10.4} {:>11.4} {:>11.4}",
            l.length, l.guided_accuracy, l.random_accuracy, l.guided_drop, l.random_drop
        );
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, a: &GradcheckArgs) -> Result<()> {
    let seed = cfg.train.seed;
    let mut worst = 0.0f64;
    println!("{:<32} {:>12}", "operation", "max_rel_err");
    for c in check_all_ops(a.trials, seed)? {
        println!("{:<32} {:>12.3e}", c.op, c.max_rel_error);
        worst = worst.max(c.max_rel_error);
    }
    let synth = rfshapelet::synth::SynthConfig {
        frames_per_cell: 1,
        ..cfg.synth.clone()
    };
    let (ds, _) = synth.generate()?;
    let batch = a.batch.clamp(1, ds.len() - 1);
    let frames: Vec<&IqFrame> = ds.frames()[..batch].iter().collect();
    // shapelets drawn from the checked frames would sit at the kink of the norm
    let mut model = Model64::init(&cfg.model, &ds.frames()[batch..])?;
    let opts = GradCheckOptions {
        max_coords_per_tensor: Some(a.coords),
        seed,
        trainable_only: !a.all_tensors,
        ..GradCheckOptions::default()
    };
    let report = loss_gradcheck(&mut model, &frames, &cfg.train.loss, &opts)?;
    println!("{:<32} {:>12.3e}", "total_loss", report.max_rel_error);
    worst = worst.max(report.max_rel_error);
    println!("max_rel_err {worst:.3e}");
    Ok(())
}

fn print_census(c: &Census) {
    println!("{:<24} {:>12} {:>10}", "group", "elements", "trainable");
    for g in &c.groups {
        println!("{:<24} {:>12} {:>10}", g.name, g.elements, g.trainable);
    }
    println!("total {} trainable {} ratio {:.4}%", c.total(), c.trainable(), 100.0 * c.ratio());
}

fn cmd_inspect(cfg: &RunConfig, a: &InspectArgs) -> Result<()> {
    match &a.checkpoint {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            let m = &ck.model;
            println!(
                "epoch {} step {} seed {} val_acc {}",
                ck.meta.epoch,
                ck.meta.step,
                ck.meta.seed,
                ck.meta.val_accuracy.map_or("-".to_string(), |v| format!("{v:.4}"))
            );
            if a.tensors {
                for (id, t) in m.store.iter() {
                    println!("{:<40} {:<16} {:?} {}", t.name, t.group, t.value.shape(), m.store.is_trainable(id));
                }
            }
            print_census(&m.census());
        }
        None => print_census(&cfg.model.census()?),
    }
    Ok(())
}
