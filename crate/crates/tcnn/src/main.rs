//! Command-line entry point: synthetic data generation, anchor clustering,
//! alternating training, detection, metric evaluation and gradient checks.
//!
//! Exit codes: 0 success, 1 assertion/oracle failure, 2 usage or
//! configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tcnn::anchors::kmeans_anchors;
use tcnn::error::TcnnError;
use tcnn::eval::{frame_map, roc_auc, video_classification_accuracy, video_map};
use tcnn::fdcheck;
use tcnn::formats::{
    atomic_write, read_anchors, read_annotations, read_detections, write_anchors,
    write_annotations, write_ap_csv, write_detections, write_loss_csv, write_pr_csv,
    write_roc_csv, PipelineConfig,
};
use tcnn::net::SkipSource;
use tcnn::pipeline::{classify_video, detect_videos, DetectModel, DetectParams};
use tcnn::synth::{generate, SynthSpec, SynthVideo, VideoAnnotation};
use tcnn::training::alternate_train;
use tcnn::FeatureCube;

#[derive(Parser)]
#[command(name = "tcnn", version, about = "Tube CNN action detection pipeline")]
struct Cli {
    /// Master random seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for the data-parallel kernels (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Pipeline configuration file (key=value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Network scale preset (overrides the config file).
    #[arg(long, global = true, value_parser = ["desk", "paper"])]
    scale: Option<String>,

    /// Skip connection source (overrides the config file).
    #[arg(long, global = true)]
    skip_source: Option<SkipSource>,

    /// Comma-separated IoU thresholds for evaluation.
    #[arg(long, global = true, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,

    /// Linked sequences kept per video.
    #[arg(long, global = true)]
    k: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic video dataset.
    Synth(SynthArgs),
    /// Learn anchor boxes by k-means over annotation boxes.
    Anchors(AnchorArgs),
    /// Alternating TPN/recognition training.
    Train(TrainArgs),
    /// Run detection over a dataset.
    Detect(DetectArgs),
    /// Score detections against annotations.
    Eval(EvalArgs),
    /// Finite-difference checks of every backward pass.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    num_videos: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 24)]
    frames: usize,
    #[arg(long, default_value_t = 60)]
    height: usize,
    #[arg(long, default_value_t = 80)]
    width: usize,
    /// Generate untrimmed videos with background segments and distractors.
    #[arg(long)]
    untrimmed: bool,
    #[arg(long, default_value_t = 0.08)]
    noise: f64,
    #[arg(long, default_value_t = 0.8)]
    distractor_rate: f64,
}

#[derive(Args)]
struct AnchorArgs {
    /// Annotation file to cluster.
    #[arg(long)]
    annotations: PathBuf,
    /// Number of anchors.
    #[arg(long, default_value_t = 12)]
    k: usize,
    /// Output anchor file.
    #[arg(long)]
    out: PathBuf,
    /// Frame size the boxes are normalized by, as HxW.
    #[arg(long, default_value = "60x80")]
    frame_size: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from `tcnn synth`).
    #[arg(long)]
    data: PathBuf,
    /// Anchor file (from `tcnn anchors`).
    #[arg(long)]
    anchors: PathBuf,
    /// Output directory for the checkpoint and loss CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    /// Checkpoint directory (from `tcnn train`).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory to detect over.
    #[arg(long)]
    data: PathBuf,
    /// Output directory (detections.txt, classifications.txt).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// Optional per-video classification file for accuracy.
    #[arg(long)]
    classifications: Option<PathBuf>,
    /// Output directory for metric CSVs.
    #[arg(long)]
    out: PathBuf,
    /// ROC curve truncation point.
    #[arg(long, default_value_t = 0.6)]
    fpr_max: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random instances per layer.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// Corrupt one backward pass as a negative control (must exit 1).
    #[arg(long)]
    corrupt: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    #[cfg(feature = "parallel")]
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("tcnn: failed to configure {} threads: {e}", cli.threads);
            return ExitCode::from(2);
        }
    }

    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("tcnn: {e}");
            let code = match e {
                TcnnError::ShapeMismatch(_) | TcnnError::Numerical(_) => 1,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, TcnnError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::read(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    } else {
        cfg.train.seed = cfg.seed;
    }
    if let Some(scale) = &cli.scale {
        cfg.scale = scale.clone();
    }
    if let Some(skip) = cli.skip_source {
        cfg.skip_source = skip;
    }
    if let Some(alphas) = &cli.alpha {
        cfg.alphas = alphas.clone();
    }
    if let Some(k) = cli.k {
        cfg.top_k = k;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode, TcnnError> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(&cfg, a),
        Command::Anchors(a) => cmd_anchors(&cfg, a),
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Detect(a) => cmd_detect(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Gradcheck(a) => cmd_gradcheck(&cfg, a),
    }
}

/// Dataset directory layout: `videos/<id>.tcnt` plus `annotations.txt`.
fn write_dataset(dir: &Path, videos: &[SynthVideo]) -> Result<(), TcnnError> {
    let vdir = dir.join("videos");
    std::fs::create_dir_all(&vdir).map_err(|e| TcnnError::io(&vdir, e))?;
    for v in videos {
        v.frames.write_tcnt(&vdir.join(format!("{}.tcnt", v.id)))?;
    }
    let annots: Vec<VideoAnnotation> = videos.iter().map(|v| v.annotation.clone()).collect();
    write_annotations(&dir.join("annotations.txt"), &annots)
}

fn read_dataset(dir: &Path) -> Result<Vec<SynthVideo>, TcnnError> {
    let annots = read_annotations(&dir.join("annotations.txt"))?;
    let mut out = Vec::with_capacity(annots.len());
    for a in annots {
        let path = dir.join("videos").join(format!("{}.tcnt", a.video_id));
        let frames = FeatureCube::read_tcnt(&path)?;
        out.push(SynthVideo {
            id: a.video_id.clone(),
            frames,
            annotation: a,
        });
    }
    Ok(out)
}

fn cmd_synth(cfg: &PipelineConfig, a: &SynthArgs) -> Result<ExitCode, TcnnError> {
    let spec = SynthSpec {
        num_classes: a.classes,
        frame_height: a.height,
        frame_width: a.width,
        clip_len: 8,
        frames_per_video: a.frames,
        num_videos: a.num_videos,
        untrimmed: a.untrimmed,
        noise_level: a.noise,
        distractor_rate: a.distractor_rate,
        seed: cfg.seed,
    };
    let videos = generate(&spec)?;
    write_dataset(&a.out, &videos)?;
    println!(
        "wrote {} videos ({}x{}, {} frames) to {}",
        videos.len(),
        a.height,
        a.width,
        a.frames,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_anchors(cfg: &PipelineConfig, a: &AnchorArgs) -> Result<ExitCode, TcnnError> {
    let (fh, fw) = a
        .frame_size
        .split_once('x')
        .and_then(|(h, w)| Some((h.parse::<f64>().ok()?, w.parse::<f64>().ok()?)))
        .ok_or_else(|| TcnnError::Config(format!("bad frame size '{}'", a.frame_size)))?;
    let annots = read_annotations(&a.annotations)?;
    let boxes: Vec<(f64, f64)> = annots
        .iter()
        .flat_map(|v| v.frames.iter().flatten())
        .map(|b| (b.width() / fw, b.height() / fh))
        .collect();
    let set = kmeans_anchors(&boxes, a.k, cfg.seed)?;
    write_anchors(&a.out, &set)?;
    println!("wrote {} anchors to {}", set.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(cfg: &PipelineConfig, a: &TrainArgs) -> Result<ExitCode, TcnnError> {
    let videos = read_dataset(&a.data)?;
    let anchors = read_anchors(&a.anchors)?;
    let net = cfg.net_config()?;
    let trained = alternate_train(&videos, &net, &anchors, &cfg.train)?;
    std::fs::create_dir_all(&a.out).map_err(|e| TcnnError::io(&a.out, e))?;
    write_loss_csv(&a.out.join("loss.csv"), &trained.records)?;
    let model = DetectModel::from_trained(trained);
    model.save(&a.out.join("checkpoint"), cfg)?;
    println!("checkpoint written to {}", a.out.join("checkpoint").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_detect(cfg: &PipelineConfig, a: &DetectArgs) -> Result<ExitCode, TcnnError> {
    let (model, saved_cfg) = DetectModel::load(&a.checkpoint)?;
    let mut params = DetectParams::from(&saved_cfg);
    params.actionness_threshold = cfg.actionness_threshold;
    params.nms_threshold = cfg.nms_threshold;
    params.top_k = cfg.top_k;
    let videos = read_dataset(&a.data)?;
    let dets = detect_videos(&model, &videos, &params)?;
    std::fs::create_dir_all(&a.out).map_err(|e| TcnnError::io(&a.out, e))?;
    write_detections(&a.out.join("detections.txt"), &dets)?;

    let mut cls = String::new();
    for v in &videos {
        let c = classify_video(&model, &v.frames)?;
        cls.push_str(&format!("{} {}\n", v.id, c));
    }
    atomic_write(&a.out.join("classifications.txt"), &cls)?;
    println!(
        "{} detections over {} videos written to {}",
        dets.len(),
        videos.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn read_classifications(path: &Path) -> Result<Vec<(String, usize)>, TcnnError> {
    let text = std::fs::read_to_string(path).map_err(|e| TcnnError::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(TcnnError::Parse {
                path: path.to_path_buf(),
                line: ln + 1,
                msg: "expected 'video_id class'".into(),
            });
        }
        out.push((
            toks[0].to_string(),
            toks[1].parse().map_err(|_| TcnnError::Parse {
                path: path.to_path_buf(),
                line: ln + 1,
                msg: "bad class id".into(),
            })?,
        ));
    }
    Ok(out)
}

fn cmd_eval(cfg: &PipelineConfig, a: &EvalArgs) -> Result<ExitCode, TcnnError> {
    let dets = read_detections(&a.detections)?;
    let annots = read_annotations(&a.annotations)?;
    std::fs::create_dir_all(&a.out).map_err(|e| TcnnError::io(&a.out, e))?;
    for &alpha in &cfg.alphas {
        let fm = frame_map(&dets, &annots, alpha);
        let vm = video_map(&dets, &annots, alpha);
        let tag = format!("{alpha}").replace('.', "_");
        write_ap_csv(&a.out.join(format!("frame_map_a{tag}.csv")), "frame_map", &fm)?;
        write_ap_csv(&a.out.join(format!("video_map_a{tag}.csv")), "video_map", &vm)?;
        write_pr_csv(&a.out.join(format!("pr_video_a{tag}.csv")), &vm)?;
        println!(
            "alpha={alpha}: frame-mAP={:.4} video-mAP={:.4}",
            fm.mean, vm.mean
        );
        if !fm.skipped_classes.is_empty() {
            println!(
                "  note: classes {:?} had no ground truth; excluded from the mean",
                fm.skipped_classes
            );
        }
        let roc = roc_auc(&dets, &annots, alpha, a.fpr_max)?;
        write_roc_csv(&a.out.join(format!("roc_a{tag}.csv")), &roc)?;
        println!("alpha={alpha}: AUC={:.4} (fpr <= {})", roc.auc, a.fpr_max);
    }
    if let Some(cpath) = &a.classifications {
        let preds = read_classifications(cpath)?;
        let labels: Vec<(String, usize)> = annots
            .iter()
            .map(|v| (v.video_id.clone(), v.class_label))
            .collect();
        let acc = video_classification_accuracy(&preds, &labels)?;
        atomic_write(
            &a.out.join("classification_accuracy.csv"),
            &format!("metric,value\naccuracy,{acc:.6}\n"),
        )?;
        println!("classification accuracy: {acc:.4}");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(cfg: &PipelineConfig, a: &GradcheckArgs) -> Result<ExitCode, TcnnError> {
    let reports = fdcheck::run_all(cfg.seed, a.instances, a.corrupt)?;
    let mut ok = true;
    for r in &reports {
        let status = if r.layer.contains("corrupted") {
            if r.passed() {
                ok = false;
                "MISSED"
            } else {
                "caught"
            }
        } else if r.passed() {
            "ok"
        } else {
            ok = false;
            "FAIL"
        };
        println!(
            "{:<20} max rel err {:>12.3e}  ({} instances)  {}",
            r.layer, r.max_rel_err, r.checks, status
        );
    }
    if a.corrupt {
        // detecting the corrupted fixture is the failure the caller asked
        // to see; missing it exits 0 and the negative-control test fails
        let caught = reports
            .iter()
            .any(|r| r.layer.contains("corrupted") && !r.passed());
        return Ok(if caught {
            ExitCode::from(1)
        } else {
            ExitCode::SUCCESS
        });
    }
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
