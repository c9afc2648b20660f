use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use maonet_core::data::{
    generate_synthetic_dataset, load_sod_dataset, load_vos_dataset, load_vos_dataset_with,
    write_sod_dataset, write_vos_dataset, LoadOptions, ANNOTATIONS_DIR, FLOWS_DIR, IMAGES_DIR,
};
use maonet_core::metrics::evaluate_dataset;
use maonet_core::selection::{infer_frame, FrameResult, DEFAULT_H, DEFAULT_THRESHOLD};
use maonet_core::training::train_with_progress;
use maonet_core::{
    load_checkpoint, Error, ErrorClass, EvalReport, InferMode, InferOptions, NetConfig, Network,
    Result, RunConfig, SelectionLog, SynthConfig, TtaConfig, VosSequence,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "maonet", version, about = "Motion-as-option video object segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic moving-shapes VOS dataset and a SOD set
    Synth(SynthArgs),
    /// Train a network from a config file
    Train(TrainArgs),
    /// Predict masks for every frame of a VOS dataset
    Infer(InferArgs),
    /// Score predicted masks against ground truth
    Eval(EvalArgs),
    /// Run every inference mode and tabulate the scores
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    sequences: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Number of static SOD frames
    #[arg(long, default_value_t = 20)]
    sod: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace the contents of a non-empty output directory
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct InferenceOpts {
    /// Processing resolution
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Multi-scale and flip ensemble
    #[arg(long)]
    tta: bool,
    /// Comma-separated ensemble scales
    #[arg(long, value_delimiter = ',', default_values_t = TtaConfig::desk_scale().scales)]
    tta_scales: Vec<usize>,
    /// Confidence threshold h
    #[arg(long, default_value_t = DEFAULT_H)]
    h: f64,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Worker threads for per-frame inference
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// flow_only, image_only, select, input, feature or output
    #[arg(long)]
    mode: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: InferenceOpts,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// JSON report path
    #[arg(long)]
    out: PathBuf,
    /// Also write flat per-frame CSV here
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Print scores grouped by the sequence-name prefix before this character
    #[arg(long)]
    group_sep: Option<char>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: InferenceOpts,
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Usage => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = match e.class() {
                ErrorClass::Usage => "usage",
                ErrorClass::Data => "data",
                ErrorClass::Numeric => "numeric",
            };
            eprintln!("error[{class}]: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    NetConfig::default().check_input(a.resolution, a.resolution)?;
    if a.out.exists() {
        let non_empty = std::fs::read_dir(&a.out)
            .map_err(|e| Error::io(&a.out, e))?
            .next()
            .is_some();
        if non_empty && !a.force {
            return Err(Error::invalid(format!(
                "{} is not empty; pass --force to overwrite",
                a.out.display()
            )));
        }
        for sub in ["vos", "sod"] {
            let p = a.out.join(sub);
            if p.exists() {
                std::fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    let cfg = SynthConfig {
        n_sequences: a.sequences,
        frames_per_seq: a.frames,
        resolution: a.resolution,
        n_sod: a.sod,
        ..Default::default()
    };
    let (vos, sod) = generate_synthetic_dataset(&cfg, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    write_vos_dataset(&a.out.join("vos"), &vos)?;
    if !sod.is_empty() {
        write_sod_dataset(&a.out.join("sod"), &sod)?;
    }
    let frames = a.sequences * a.frames;
    let manifest = json!({
        "seed": a.seed,
        "resolution": a.resolution,
        "sequences": a.sequences,
        "frames_per_sequence": a.frames,
        "vos_root": "vos",
        "sod_root": "sod",
        "files": {
            IMAGES_DIR: frames,
            ANNOTATIONS_DIR: frames,
            FLOWS_DIR: frames,
            "sod_images": sod.len(),
        },
    });
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    write_text(&a.out.join("manifest.json"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let vos_root = cfg
        .vos_root
        .as_ref()
        .ok_or_else(|| Error::invalid("config must set vos_root"))?;
    let out = cfg
        .out_dir
        .as_ref()
        .ok_or_else(|| Error::invalid("config must set out_dir"))?;
    cfg.train.validate()?;
    let vos = load_vos_dataset(vos_root)?;
    let sod = match &cfg.sod_root {
        Some(root) => load_sod_dataset(root)?,
        None if cfg.train.p_sod > 0.0 => {
            return Err(Error::invalid("p_sod > 0 requires sod_root"));
        }
        None => Vec::new(),
    };
    eprintln!(
        "training on {} sequences ({} frames) and {} SOD images for {} steps",
        vos.len(),
        vos.iter().map(VosSequence::len).sum::<usize>(),
        sod.len(),
        cfg.train.steps
    );
    let every = (cfg.train.steps / 20).max(1);
    let (_, report) = train_with_progress(&cfg.train, &vos, &sod, Some(out), |r| {
        if r.step % every == 0 || r.step == 1 {
            eprintln!("step {:>6}  loss {:.5}  sod {:.3}", r.step, r.loss, r.sod_fraction);
        }
    })?;
    for c in &report.checkpoints {
        println!("{}", c.display());
    }
    Ok(())
}

fn infer_options(mode: InferMode, o: &InferenceOpts) -> InferOptions {
    InferOptions {
        mode,
        resolution: o.resolution,
        tta: o.tta.then(|| TtaConfig {
            scales: o.tta_scales.clone(),
            flip: true,
        }),
        h: o.h,
        threshold: o.threshold,
    }
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    if jobs == 0 {
        return Err(Error::invalid("--jobs must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// Runs inference on every frame and writes masks plus selection logs to `out`.
fn run_inference(
    model: &Network<f32>,
    seqs: &[VosSequence],
    opts: &InferOptions,
    pool: &rayon::ThreadPool,
    out: &Path,
) -> Result<SelectionLog> {
    model.config().check_input(opts.resolution, opts.resolution)?;
    let frames: Vec<_> = seqs.iter().flat_map(|s| &s.samples).collect();
    let results: Vec<FrameResult> = pool.install(|| {
        frames
            .par_iter()
            .map(|s| infer_frame(model, &s.name, &s.image, s.flow.as_ref(), opts))
            .collect::<Result<_>>()
    })?;
    let mut log = SelectionLog::default();
    for r in results {
        let path = out.join(format!("{}.png", r.frame));
        if let Some(parent) = path.parent() {
            create_dir(parent)?;
        }
        r.mask.save_png(&path)?;
        log.push(r);
    }
    log.save(out)?;
    Ok(log)
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let mode: InferMode = a.mode.parse()?;
    let opts = infer_options(mode, &a.opts);
    let pool = thread_pool(a.opts.jobs)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let seqs = load_vos_dataset_with(
        &a.data,
        &LoadOptions {
            require_masks: false,
            ..Default::default()
        },
    )?;
    create_dir(&a.out)?;
    let log = run_inference(&model, &seqs, &opts, &pool, &a.out)?;
    let s = log.summary();
    println!(
        "{} frames, mode {mode}: image {:.2}%  flow {:.2}%  fused {:.2}%",
        s.frames, s.image_ratio, s.flow_ratio, s.fused_ratio
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut report = evaluate_dataset(&a.pred, &a.gt)?;
    let summary = a.pred.join("selection_summary.json");
    if summary.is_file() {
        let text = std::fs::read_to_string(&summary).map_err(|e| Error::io(&summary, e))?;
        report.selection_stats = Some(serde_json::from_str(&text)?);
    }
    report.save_json(&a.out)?;
    if let Some(csv) = &a.csv {
        report.save_csv(csv)?;
    }
    let d = report.dataset;
    println!("J {:.4}  F {:.4}  G {:.4}", d.j, d.f, d.g);
    if let Some(sep) = a.group_sep {
        for (group, s) in report.group_by_prefix(sep) {
            println!("{group:<16} J {:.4}  F {:.4}  G {:.4}", s.j, s.f, s.g);
        }
    }
    Ok(())
}

struct AblationRow {
    mode: InferMode,
    report: EvalReport,
}

fn ablation_table(rows: &[AblationRow]) -> (String, String) {
    let mut csv = String::from("mode,j,f,g,image_pct,flow_pct,fused_pct\n");
    let mut txt = format!(
        "{:<12} {:>7} {:>7} {:>7} {:>8} {:>8} {:>8}\n",
        "mode", "J", "F", "G", "image%", "flow%", "fused%"
    );
    for r in rows {
        let d = r.report.dataset;
        let s = r.report.selection_stats.as_ref().expect("ablation rows carry selection stats");
        csv += &format!(
            "{},{},{},{},{},{},{}\n",
            r.mode, d.j, d.f, d.g, s.image_ratio, s.flow_ratio, s.fused_ratio
        );
        txt += &format!(
            "{:<12} {:>7.4} {:>7.4} {:>7.4} {:>8.2} {:>8.2} {:>8.2}\n",
            r.mode.name(),
            d.j,
            d.f,
            d.g,
            s.image_ratio,
            s.flow_ratio,
            s.fused_ratio
        );
    }
    (csv, txt)
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let pool = thread_pool(a.opts.jobs)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let seqs = load_vos_dataset_with(
        &a.data,
        &LoadOptions {
            require_masks: false,
            ..Default::default()
        },
    )?;
    let mut rows = Vec::new();
    for mode in InferMode::ALL {
        let dir = a.out.join(mode.name());
        create_dir(&dir)?;
        let log = run_inference(&model, &seqs, &infer_options(mode, &a.opts), &pool, &dir)?;
        let mut report = evaluate_dataset(&dir, &a.data)?;
        report.selection_stats = Some(log.summary());
        report.save_json(&dir.join("report.json"))?;
        rows.push(AblationRow { mode, report });
    }
    let (csv, txt) = ablation_table(&rows);
    write_text(&a.out.join("ablation.csv"), &csv)?;
    write_text(&a.out.join("ablation.txt"), &txt)?;
    print!("{txt}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(exit_code(&Error::invalid("x")), 2);
        assert_eq!(
            exit_code(&Error::Config {
                line: 1,
                reason: "x".into()
            }),
            2
        );
        assert_eq!(
            exit_code(&Error::EmptyDataset {
                root: PathBuf::from("r")
            }),
            3
        );
        assert_eq!(
            exit_code(&Error::NonFiniteLoss {
                step: 1,
                loss: f64::NAN,
                provenance: String::new()
            }),
            4
        );
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
