//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::anchors::{kmeans_anchors, load_anchor_file, load_boxes_from_labels, Anchor};
use crate::detection::{detect_image, format_detections, Thresholds};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EVAL_CONF_THRES};
use crate::gradcheck;
use crate::io::{ppm_read, ppm_write, render_detections};
use crate::loss::{GradMode, LossWeights};
use crate::network::{Network, NetworkConfig, WeightHeader};
use crate::training::{load_samples, loss_log_csv, synth_dataset, train, AugmentFlags, DatasetManifest, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "dcspp", version, about = "Dense-connection + pyramid-pooling single-shot detector")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic shapes dataset
    Synth(SynthArgs),
    /// Cluster label box shapes into anchors
    Anchors(AnchorArgs),
    /// Train a model
    Train(TrainArgs),
    /// Detect objects in one image
    Detect(DetectArgs),
    /// Compute per-class AP and mAP over a dataset
    Eval(EvalArgs),
    /// Run the finite-difference gradient checks
    Gradcheck(GradcheckArgs),
    /// Print the layer output shapes
    Shapecheck(ShapecheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 96)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct AnchorArgs {
    /// Directory of label files
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Output grid side; label sizes are scaled by it
    #[arg(long, default_value_t = 13)]
    pub grid: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 300)]
    pub max_iter: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Anchor file produced by `anchors`
    #[arg(long)]
    pub anchors: PathBuf,
    /// Where to write the trained weights
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 96)]
    pub input_size: usize,
    /// Number of classes; defaults to the length of the dataset's class list
    #[arg(long)]
    pub classes: Option<usize>,
    /// Hidden channel multiplier as `num/den`
    #[arg(long, default_value = "1/8", value_parser = parse_scale)]
    pub channel_scale: (u32, u32),
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 600)]
    pub epochs: usize,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Comma-separated `epoch:factor` drops
    #[arg(long, default_value = "400:0.1,500:0.1", value_parser = parse_drops)]
    pub lr_drops: LrDrops,
    #[arg(long, default_value_t = 12_800)]
    pub n_prior: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Loss log CSV
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub no_augment: bool,
    /// Follow the exact gradient of the logged loss instead of the unscaled residuals
    #[arg(long)]
    pub exact_grad: bool,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Anchor file; defaults to `<model>.anchors`
    #[arg(long)]
    pub anchors: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    pub conf: f32,
    #[arg(long, default_value_t = 0.45)]
    pub nms: f64,
    /// Detection lines; stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Annotated copy of the image
    #[arg(long)]
    pub render: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    #[arg(long, default_value_t = 0.45)]
    pub nms: f64,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Worker threads for per-image inference
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
}

#[derive(Args, Debug)]
pub struct ShapecheckArgs {
    #[arg(long, default_value_t = 416)]
    pub input_size: usize,
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 5)]
    pub anchors_k: usize,
    #[arg(long, default_value = "1/1", value_parser = parse_scale)]
    pub channel_scale: (u32, u32),
}

fn parse_scale(s: &str) -> std::result::Result<(u32, u32), String> {
    let (a, b) = s.split_once('/').unwrap_or((s, "1"));
    let num: u32 = a.trim().parse().map_err(|_| format!("bad numerator in {s:?}"))?;
    let den: u32 = b.trim().parse().map_err(|_| format!("bad denominator in {s:?}"))?;
    if num == 0 || den == 0 {
        return Err(format!("scale {s:?} must be positive"));
    }
    Ok((num, den))
}

/// `(epoch, factor)` learning-rate drops.
#[derive(Clone, Debug, PartialEq)]
pub struct LrDrops(pub Vec<(usize, f64)>);

fn parse_drops(s: &str) -> std::result::Result<LrDrops, String> {
    if s.trim().is_empty() {
        return Ok(LrDrops(Vec::new()));
    }
    s.split(',')
        .map(|p| {
            let (e, f) = p.split_once(':').ok_or_else(|| format!("expected epoch:factor, got {p:?}"))?;
            Ok((
                e.trim().parse().map_err(|_| format!("bad epoch {e:?}"))?,
                f.trim().parse().map_err(|_| format!("bad factor {f:?}"))?,
            ))
        })
        .collect::<std::result::Result<_, String>>()
        .map(LrDrops)
}

/// Sidecar anchor path written next to trained weights.
pub fn anchor_sidecar(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".anchors");
    PathBuf::from(s)
}

/// Loads weights plus anchors and rebuilds the network they describe.
pub fn load_model(args: &ModelArgs) -> Result<Network<f32>> {
    let header = WeightHeader::read(&args.model)?;
    let anchor_path = args.anchors.clone().unwrap_or_else(|| anchor_sidecar(&args.model));
    let anchors = load_anchor_file(&anchor_path)?;
    let cfg = header.config(anchors)?;
    let mut net = Network::build(&cfg)?;
    net.load_weights(&args.model)?;
    Ok(net)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn run(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Synth(a) => {
            let m = synth_dataset(a.count, a.size, a.seed, &a.out)?;
            writeln!(out, "wrote {} images to {}", m.entries.len(), a.out.display()).map_err(io_err)?;
        }
        Command::Anchors(a) => {
            let boxes = load_boxes_from_labels(&a.labels, a.grid)?;
            let set = kmeans_anchors(&boxes, a.k, a.seed, a.max_iter)?;
            set.save(&a.out)?;
            write!(out, "{}", set.to_file_string()).map_err(io_err)?;
        }
        Command::Train(a) => {
            let manifest = DatasetManifest::load(&a.manifest)?;
            let classes = match a.classes {
                Some(c) => c,
                None if !manifest.classes.is_empty() => manifest.classes.len(),
                None => return Err(Error::Config("no class list found; pass --classes".into())),
            };
            let anchors: Vec<Anchor> = load_anchor_file(&a.anchors)?;
            let cfg = NetworkConfig::new(a.input_size, classes, anchors)
                .with_channel_scale(a.channel_scale.0, a.channel_scale.1);
            let mut net = Network::build(&cfg)?;
            net.init_weights(a.seed);
            let samples = load_samples(&manifest)?;
            let tc = TrainConfig {
                batch_size: a.batch,
                epochs: a.epochs,
                max_iterations: a.max_iter,
                lr0: a.lr,
                lr_drops: a.lr_drops.0,
                seed: a.seed,
                loss: LossWeights { n_prior: a.n_prior, ..LossWeights::default() },
                augment: if a.no_augment { AugmentFlags::default() } else { AugmentFlags::all() },
                grad_mode: if a.exact_grad { GradMode::Exact } else { GradMode::Delta },
                checkpoint_dir: a.checkpoint_dir,
                checkpoint_every: a.checkpoint_every,
                ..TrainConfig::default()
            };
            let report = train(&mut net, &samples, &tc)?;
            write_file(&a.out, net.weights_to_bytes())?;
            let anchor_text = fs::read(&a.anchors).map_err(|e| Error::io(&a.anchors, e))?;
            write_file(&anchor_sidecar(&a.out), anchor_text)?;
            if let Some(log) = &a.log {
                write_file(log, loss_log_csv(&report.rows))?;
            }
            writeln!(
                out,
                "{} iterations, loss {:.6} -> {:.6}",
                report.rows.len(),
                report.initial_loss().unwrap_or(f64::NAN),
                report.final_loss().unwrap_or(f64::NAN)
            )
            .map_err(io_err)?;
        }
        Command::Detect(a) => {
            let net = load_model(&a.model)?;
            let img = ppm_read(&a.image)?;
            let dets = detect_image(&net, &img, &Thresholds { conf: a.conf, nms: a.nms })?;
            let text = format_detections(&dets);
            match &a.out {
                Some(p) => write_file(p, &text)?,
                None => out.write_all(text.as_bytes()).map_err(io_err)?,
            }
            if let Some(r) = &a.render {
                if let Some(dir) = r.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                ppm_write(r, &render_detections(&img, &dets))?;
            }
        }
        Command::Eval(a) => {
            let net = load_model(&a.model)?;
            let manifest = DatasetManifest::load(&a.manifest)?;
            let th = Thresholds { conf: EVAL_CONF_THRES, nms: a.nms };
            let result = match a.threads {
                Some(n) => rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .map_err(|e| Error::Config(e.to_string()))?
                    .install(|| evaluate(&net, &manifest, &th, a.iou))?,
                None => evaluate(&net, &manifest, &th, a.iou)?,
            };
            write!(out, "{}", result.report(&manifest.classes)).map_err(io_err)?;
            if let Some(p) = &a.csv {
                write_file(p, result.to_csv(&manifest.classes))?;
            }
        }
        Command::Gradcheck(a) => {
            let mut all = gradcheck::check_layers(a.seed)?;
            all.push(gradcheck::check_network(a.seed, a.samples)?);
            all.push(gradcheck::check_loss(a.seed)?);
            let mut failed = 0;
            for r in &all {
                writeln!(
                    out,
                    "{:<30} max_rel_error={:.3e} tol={:.0e} {}",
                    r.name,
                    r.max_rel_error,
                    r.tolerance,
                    if r.passed() { "ok" } else { "FAIL" }
                )
                .map_err(io_err)?;
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(Error::Config(format!("{failed} gradient checks failed")));
            }
        }
        Command::Shapecheck(a) => {
            let anchors = vec![Anchor::new(1.0, 1.0); a.anchors_k];
            let cfg = NetworkConfig::new(a.input_size, a.classes, anchors)
                .with_channel_scale(a.channel_scale.0, a.channel_scale.1);
            for (name, s) in Network::<f32>::shape_table(&cfg)? {
                writeln!(out, "{name:<12} {}x{}x{}", s.h, s.w, s.c).map_err(io_err)?;
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on failure, 2 on usage errors.
pub fn cli_main_with<I, A>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

pub fn cli_main<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    cli_main_with(args, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}
