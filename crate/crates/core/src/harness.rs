//! Reproducible runs over an on-disk dataset: configuration, training,
//! evaluation, thresholding baselines and attention rendering.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::adam::{AdamConfig, AdamState};
use crate::attention::RenderMode;
use crate::augment::{compose_pipeline, AugmentConfig};
use crate::baseline::ThresholdConfig;
use crate::error::{Error, Result};
use crate::imaging::{
    images_to_tensor, masks_to_tensor, read_mask, read_png, tensor_channel_to_image, write_mask,
    write_png, Image8, Mask,
};
use crate::metrics::{
    aggregate, confusion_from_masks, Aggregation, ConfusionCounts, MetricsReport,
};
use crate::network::{NetworkConfig, SvsNet, TrainingConfig};
use crate::rng::stream_rng;
use crate::synth::{Manifest, SceneConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::invalid(format!(
                "unknown preset `{other}` (expected desk or paper)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    pub augment: AugmentConfig,
    pub augment_enabled: bool,
    pub scene: SceneConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (lr, size) = match preset {
            Preset::Desk => (1e-3, 64),
            Preset::Paper => (1e-5, 304),
        };
        RunConfig {
            preset,
            network: NetworkConfig {
                input_size: size,
                ..Default::default()
            },
            training: TrainingConfig {
                lr,
                batch_size: 2,
                ..Default::default()
            },
            augment: AugmentConfig::for_size(size),
            augment_enabled: true,
            scene: SceneConfig::with_size(size, 0),
        }
    }

    /// Sets every seed in the run.
    pub fn set_seed(&mut self, seed: u64) {
        self.network.seed = seed;
        self.training.seed = seed;
        self.augment.seed = seed;
        self.scene.seed = seed;
    }

    /// Applies one `key=value` setting. The preset's learning rate, batch
    /// size and input size cannot be changed.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse `{value}`")))
        }
        let pinned = |name: &str, current: String| {
            if current == value.trim()
                || num::<f64>(name, value).ok() == num::<f64>(name, &current).ok()
            {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "{name} is fixed to {current} by the {} preset",
                    self.preset
                )))
            }
        };
        match key.trim() {
            "preset" => {
                if value.trim() != self.preset.to_string() {
                    return Err(Error::InvalidConfig(format!(
                        "preset `{}` conflicts with `{}`",
                        value.trim(),
                        self.preset
                    )));
                }
            }
            "lr" => pinned("lr", self.training.lr.to_string())?,
            "batch_size" => pinned("batch_size", self.training.batch_size.to_string())?,
            "input_size" => pinned("input_size", self.network.input_size.to_string())?,
            "iterations" | "iters" => self.training.iterations = num(key, value)?,
            "seed" => self.set_seed(num(key, value)?),
            "base_channels" => self.network.base_channels = num(key, value)?,
            "depth" => self.network.depth = num(key, value)?,
            "aux_loss_weight" => self.network.aux_loss_weight = num(key, value)?,
            "render_mode" => self.network.render_mode = value.parse::<RenderMode>()?,
            "augment" => self.augment_enabled = num(key, value)?,
            "brightness_range" => self.augment.brightness_range = num(key, value)?,
            "gauss_sigma_max" => self.augment.gauss_sigma_max = num(key, value)?,
            "uniform_range" => self.augment.uniform_range = num(key, value)?,
            "pad_fraction_max" => self.augment.pad_fraction_max = num(key, value)?,
            "scene_size" => self.scene.size = num(key, value)?,
            "speckle_gain" => self.scene.speckle_gain = num(key, value)?,
            "speckle_gain_np" => self.scene.speckle_gain_np = num(key, value)?,
            "background_level" => self.scene.background_level = num(key, value)?,
            "vessel_intensity" => self.scene.vessel_intensity = num(key, value)?,
            "mask_threshold" => self.scene.mask_threshold = num(key, value)?,
            "branch_prob" => self.scene.branch_prob = num(key, value)?,
            "n_seeds" => self.scene.n_seeds = num(key, value)?,
            other => return Err(Error::InvalidConfig(format!("unknown setting `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.training.validate()?;
        self.augment.validate()?;
        self.scene.validate()
    }
}

/// Settings from a config file: a flat JSON object, or `key=value` lines
/// with `#` comments.
pub fn read_settings(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_settings(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

pub fn parse_settings(text: &str) -> std::result::Result<Vec<(String, String)>, String> {
    if text.trim_start().starts_with('{') {
        let map: BTreeMap<String, serde_json::Value> =
            serde_json::from_str(text).map_err(|e| e.to_string())?;
        return map
            .into_iter()
            .map(|(k, v)| match v {
                serde_json::Value::String(s) => Ok((k, s)),
                serde_json::Value::Number(n) => Ok((k, n.to_string())),
                serde_json::Value::Bool(b) => Ok((k, b.to_string())),
                other => Err(format!("{k}: unsupported value {other}")),
            })
            .collect();
    }
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value", n + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Preset from the flag, else from the file, else desk; then the file's
/// remaining settings.
pub fn resolve_config(preset_flag: Option<Preset>, file: Option<&Path>) -> Result<RunConfig> {
    let settings = match file {
        Some(p) => read_settings(p)?,
        None => Vec::new(),
    };
    let from_file = settings
        .iter()
        .find(|(k, _)| k == "preset")
        .map(|(_, v)| v.parse::<Preset>())
        .transpose()?;
    let preset = preset_flag.or(from_file).unwrap_or(Preset::Desk);
    let mut cfg = RunConfig::preset(preset);
    for (k, v) in &settings {
        if k != "preset" {
            cfg.set(k, v)?;
        }
    }
    Ok(cfg)
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Image8,
    pub mask: Mask,
    pub region: Mask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

pub fn load_sample(root: &Path, id: &str) -> Result<Sample> {
    let file = format!("{id}.png");
    Ok(Sample {
        id: id.to_string(),
        image: read_png(&root.join("images").join(&file))?,
        mask: read_mask(&root.join("masks").join(&file))?,
        region: read_mask(&root.join("regions").join(&file))?,
    })
}

pub fn load_split(root: &Path, split: Split) -> Result<Vec<Sample>> {
    let manifest = Manifest::load(root)?;
    let ids = match split {
        Split::Train => manifest.train,
        Split::Test => manifest.test,
    };
    if ids.is_empty() {
        return Err(Error::invalid(format!(
            "{}: the {split:?} split is empty",
            root.display()
        )));
    }
    ids.iter().map(|id| load_sample(root, id)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f32,
    pub aux_loss: f32,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("step,loss,aux_loss\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.step, r.loss, r.aux_loss));
    }
    s
}

/// The pair fed to the network at one step: augmented, or only resized.
fn prepare(sample: &Sample, cfg: &RunConfig, step: usize, slot: usize) -> Result<(Image8, Mask)> {
    let n = cfg.network.input_size;
    let aug = if cfg.augment_enabled {
        AugmentConfig {
            crop_size: n,
            ..cfg.augment.clone()
        }
    } else {
        AugmentConfig::disabled(n)
    };
    let stream = (step as u64) << 16 | slot as u64;
    compose_pipeline(
        &sample.image,
        &sample.mask,
        &aug,
        &mut stream_rng(cfg.augment.seed ^ 0x5eed, stream),
    )
}

/// Trains a fresh network for `cfg.training.iterations` steps, calling
/// `on_step` after each one. Any non-finite loss, gradient or parameter
/// aborts with [`Error::Numerical`] naming the step.
pub fn train(
    cfg: &RunConfig,
    samples: &[Sample],
    mut on_step: impl FnMut(&LossRow),
) -> Result<(SvsNet<f32>, Vec<LossRow>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let mut net = SvsNet::<f32>::new(cfg.network.clone())?;
    let mut opt = AdamState::new(AdamConfig::with_lr(cfg.training.lr), net.params())?;
    let mut rows = Vec::with_capacity(cfg.training.iterations);
    for step in 1..=cfg.training.iterations {
        let numerical = |reason: String| Error::Numerical { step, reason };
        let mut pick = stream_rng(cfg.training.seed, step as u64);
        let mut images = Vec::with_capacity(cfg.training.batch_size);
        let mut masks = Vec::with_capacity(cfg.training.batch_size);
        for slot in 0..cfg.training.batch_size {
            let sample = &samples[rand::Rng::gen_range(&mut pick, 0..samples.len())];
            let (img, m) = prepare(sample, cfg, step, slot)?;
            images.push(img);
            masks.push(m);
        }
        let x = images_to_tensor::<f32>(&images.iter().collect::<Vec<_>>())?;
        let y = masks_to_tensor::<f32>(&masks.iter().collect::<Vec<_>>())?;
        let loss = net
            .train_step(&x, &y, &mut opt, &cfg.training)
            .map_err(|e| match e {
                Error::NonFinite { op } => numerical(format!("non-finite value in {op}")),
                other => other,
            })?;
        if !loss.total.is_finite() || !loss.aux.is_finite() {
            return Err(numerical(format!("loss is {}", loss.total)));
        }
        let row = LossRow {
            step,
            loss: loss.total,
            aux_loss: loss.aux,
        };
        on_step(&row);
        rows.push(row);
    }
    Ok((net, rows))
}

/// Predicted mask at the image's own resolution.
pub fn predict(net: &SvsNet<f32>, image: &Image8) -> Result<Mask> {
    let n = net.config().input_size;
    let resized = image.resize_nearest(n, n);
    let x = images_to_tensor::<f32>(&[&resized])?;
    let mask = net.predict_mask(&x)?.remove(0);
    Ok(mask.resize_nearest(image.width(), image.height()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateReport {
    pub micro: MetricsReport,
    #[serde(rename = "macro")]
    pub macro_: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageCounts {
    pub id: String,
    pub counts: ConfusionCounts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub np_counts: Option<ConfusionCounts>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub images: usize,
    pub micro: MetricsReport,
    #[serde(rename = "macro")]
    pub macro_: MetricsReport,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub regions: BTreeMap<String, AggregateReport>,
    pub per_image: Vec<ImageCounts>,
}

impl EvalReport {
    pub fn np_counts(&self) -> ConfusionCounts {
        self.per_image
            .iter()
            .filter_map(|r| r.np_counts)
            .fold(ConfusionCounts::default(), |a, b| a + b)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn aggregate_both(counts: &[ConfusionCounts]) -> Result<AggregateReport> {
    Ok(AggregateReport {
        micro: aggregate(counts, Aggregation::Micro)?,
        macro_: aggregate(counts, Aggregation::Macro)?,
    })
}

/// Scores predictions against each sample's mask; with `np_region` also
/// within each sample's non-perfusion region. Samples whose region is empty
/// contribute no region counts.
pub fn evaluate(preds: &[Mask], samples: &[Sample], np_region: bool) -> Result<EvalReport> {
    if preds.len() != samples.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} samples",
            preds.len(),
            samples.len()
        )));
    }
    let mut per_image = Vec::with_capacity(samples.len());
    for (p, s) in preds.iter().zip(samples) {
        let counts = confusion_from_masks(p, &s.mask, None)?;
        let np_counts = if np_region && s.region.count() > 0 {
            Some(confusion_from_masks(p, &s.mask, Some(&s.region))?)
        } else {
            None
        };
        per_image.push(ImageCounts {
            id: s.id.clone(),
            counts,
            np_counts,
        });
    }
    let all: Vec<_> = per_image.iter().map(|r| r.counts).collect();
    let whole = aggregate_both(&all)?;
    let mut regions = BTreeMap::new();
    if np_region {
        let np: Vec<_> = per_image.iter().filter_map(|r| r.np_counts).collect();
        if !np.is_empty() {
            regions.insert("np".to_string(), aggregate_both(&np)?);
        }
    }
    Ok(EvalReport {
        images: samples.len(),
        micro: whole.micro,
        macro_: whole.macro_,
        regions,
        per_image,
    })
}

pub fn predict_all(net: &SvsNet<f32>, samples: &[Sample]) -> Result<Vec<Mask>> {
    samples.iter().map(|s| predict(net, &s.image)).collect()
}

pub fn threshold_all(cfg: &ThresholdConfig, samples: &[Sample]) -> Result<Vec<Mask>> {
    samples.iter().map(|s| cfg.apply(&s.image)).collect()
}

/// Reads `<dir>/<id>.png` for every sample as a mask.
pub fn read_predictions(dir: &Path, samples: &[Sample]) -> Result<Vec<Mask>> {
    samples
        .iter()
        .map(|s| read_mask(&dir.join(format!("{}.png", s.id))))
        .collect()
}

pub fn write_masks(dir: &Path, samples: &[Sample], masks: &[Mask]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (s, m) in samples.iter().zip(masks) {
        write_mask(&dir.join(format!("{}.png", s.id)), m)?;
    }
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub const RENDER_FILES: [&str; 4] = [
    "backbone_prob.png",
    "attention.png",
    "final_prob.png",
    "mask.png",
];

/// Writes the four inspection images for `image`; returns their paths.
pub fn render(net: &SvsNet<f32>, image: &Image8, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let n = net.config().input_size;
    let x = images_to_tensor::<f32>(&[&image.resize_nearest(n, n)])?;
    let p = net.forward(&x)?;
    let mask = p.masks().remove(0).to_image();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let planes = [
        tensor_channel_to_image(&p.backbone_prob, 0, 0),
        tensor_channel_to_image(&p.attention, 0, 0),
        tensor_channel_to_image(&p.final_prob, 0, 0),
        mask,
    ];
    let mut paths = Vec::new();
    for (name, img) in RENDER_FILES.iter().zip(planes) {
        let path = out_dir.join(name);
        write_png(&path, &img)?;
        paths.push(path);
    }
    Ok(paths)
}
