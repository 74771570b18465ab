use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use svsnet::baseline::ThresholdConfig;
use svsnet::harness::{self, Preset, RunConfig, Split};
use svsnet::{checkpoint, imaging, synth, Error};

#[derive(Parser)]
#[command(
    name = "svsnet",
    version,
    about = "Vessel segmentation with Gaussian attention on synthetic OCTA-like images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a train/test manifest.
    Synth(SynthArgs),
    /// Train a network on a dataset's training split.
    Train(TrainArgs),
    /// Score a checkpoint (or a directory of predicted masks) on the test split.
    Eval(EvalArgs),
    /// Score a thresholding baseline on the test split.
    Baseline(BaselineArgs),
    /// Write the backbone, attention, final probability and mask images for one input.
    Render(RenderArgs),
}

#[derive(Args)]
struct Common {
    /// key=value or JSON settings file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        }
    }
}

impl Common {
    fn resolve(&self) -> svsnet::Result<RunConfig> {
        harness::resolve_config(self.preset.map(Into::into), self.config.as_deref())
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60)]
    count: usize,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss CSV path; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Drop the auxiliary backbone loss.
    #[arg(long)]
    no_aux: bool,
    #[arg(long)]
    no_augment: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Region {
    Np,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "pred", conflicts_with = "pred")]
    ckpt: Option<PathBuf>,
    /// Directory of predicted mask PNGs named like the dataset's images.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, value_enum)]
    region: Option<Region>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Otsu,
    Local,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long)]
    report: PathBuf,
    /// Local window size (odd).
    #[arg(long, default_value_t = 15)]
    window: usize,
    /// Local offset in intensity units.
    #[arg(long, default_value_t = 5)]
    offset: i32,
    #[arg(long, value_enum)]
    region: Option<Region>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn synth_cmd(a: SynthArgs) -> svsnet::Result<()> {
    let mut cfg = a.common.resolve()?;
    if let Some(seed) = a.seed {
        cfg.scene.seed = seed;
    }
    if let Some(size) = a.size {
        cfg.scene.size = size;
    }
    let manifest = synth::generate_dataset(&cfg.scene, a.count, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> svsnet::Result<()> {
    let mut cfg = a.common.resolve()?;
    if let Some(n) = a.iters {
        cfg.training.iterations = n;
    }
    if let Some(seed) = a.seed {
        cfg.set_seed(seed);
    }
    if a.no_aux {
        cfg.network.aux_loss_weight = 0.0;
    }
    if a.no_augment {
        cfg.augment_enabled = false;
    }
    cfg.validate()?;
    let samples = harness::load_split(&a.data, Split::Train)?;
    let total = cfg.training.iterations;
    let (net, rows) = harness::train(&cfg, &samples, |r| {
        if r.step % 50 == 0 || r.step == total {
            eprintln!(
                "step {:>5}/{total}  loss {:.5}  aux {:.5}",
                r.step, r.loss, r.aux_loss
            );
        }
    })?;
    checkpoint::save(&a.out, &net)?;
    let log = a.log.unwrap_or_else(|| a.out.with_extension("csv"));
    harness::write_text(&log, &harness::loss_csv(&rows))?;
    println!("{}", a.out.display());
    println!("{}", log.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> svsnet::Result<()> {
    let samples = harness::load_split(&a.data, Split::Test)?;
    let preds = match (&a.ckpt, &a.pred) {
        (Some(ckpt), _) => harness::predict_all(&checkpoint::load(ckpt)?, &samples)?,
        (None, Some(dir)) => harness::read_predictions(dir, &samples)?,
        (None, None) => unreachable!("clap requires one of --ckpt and --pred"),
    };
    let report = harness::evaluate(&preds, &samples, a.region == Some(Region::Np))?;
    harness::write_text(&a.report, &report.to_json())?;
    println!("{}", a.report.display());
    Ok(())
}

fn masks_dir(report: &Path) -> PathBuf {
    let stem = report
        .file_stem()
        .map_or_else(|| "report".into(), |s| s.to_string_lossy().into_owned());
    report.with_file_name(format!("{stem}_masks"))
}

fn baseline_cmd(a: BaselineArgs) -> svsnet::Result<()> {
    let cfg = match a.method {
        Method::Otsu => ThresholdConfig::default(),
        Method::Local => ThresholdConfig {
            window: a.window,
            offset: a.offset,
            ..ThresholdConfig::local()
        },
    };
    cfg.validate()?;
    let samples = harness::load_split(&a.data, Split::Test)?;
    let preds = harness::threshold_all(&cfg, &samples)?;
    let dir = masks_dir(&a.report);
    harness::write_masks(&dir, &samples, &preds)?;
    let report = harness::evaluate(&preds, &samples, a.region == Some(Region::Np))?;
    harness::write_text(&a.report, &report.to_json())?;
    println!("{}", dir.display());
    println!("{}", a.report.display());
    Ok(())
}

fn render_cmd(a: RenderArgs) -> svsnet::Result<()> {
    let net = checkpoint::load(&a.ckpt)?;
    let image = imaging::read_png(&a.image)?;
    for p in harness::render(&net, &image, &a.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        e if e.is_io() => 3,
        Error::Numerical { .. } | Error::NonFinite { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Baseline(a) => baseline_cmd(a),
        Command::Render(a) => render_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
