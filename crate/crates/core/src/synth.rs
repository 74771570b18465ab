//! Procedural OCTA-like scenes: branching vessel trees with Gaussian
//! cross-sections, elliptical non-perfusion holes, and multiplicative speckle
//! that is stronger inside the holes.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{write_mask, write_png, Image8, Mask, Plane};
use crate::rng::stream_rng;

/// `2 sqrt(2 ln 2)`
const FWHM_PER_SD: f64 = 2.354_820_045_030_949;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub size: usize,
    pub n_seeds: usize,
    pub branch_prob: f64,
    pub width_start: (f64, f64),
    pub width_min: f64,
    pub n_nonperfusion: (usize, usize),
    pub np_radius_frac: (f64, f64),
    pub speckle_gain: f64,
    pub speckle_gain_np: f64,
    pub background_level: f64,
    /// Peak brightness added on a vessel centreline.
    pub vessel_intensity: f64,
    pub mask_threshold: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 64,
            n_seeds: 3,
            branch_prob: 0.03,
            width_start: (2.0, 4.0),
            width_min: 0.7,
            n_nonperfusion: (0, 3),
            np_radius_frac: (0.10, 0.25),
            speckle_gain: 0.35,
            speckle_gain_np: 0.6,
            background_level: 30.0,
            vessel_intensity: 110.0,
            mask_threshold: 40.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn with_size(size: usize, seed: u64) -> Self {
        SceneConfig {
            size,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("scene: {m}")));
        let ordered = |(a, b): (f64, f64)| a >= 0.0 && a <= b && b.is_finite();
        if self.size < 8 {
            return bad(format!("size {} is below the minimum of 8", self.size));
        }
        if !ordered(self.width_start) || !ordered(self.np_radius_frac) {
            return bad("ranges must be ordered and non-negative".into());
        }
        if self.n_nonperfusion.0 > self.n_nonperfusion.1 {
            return bad("n_nonperfusion range is reversed".into());
        }
        if !(self.width_min > 0.0) {
            return bad("width_min must be positive".into());
        }
        if self.np_radius_frac.1 >= 0.5 {
            return bad(format!(
                "non-perfusion radius fraction {} would cover the whole image",
                self.np_radius_frac.1
            ));
        }
        if !(0.0..=1.0).contains(&self.branch_prob) {
            return bad("branch_prob must be a probability".into());
        }
        let nonneg = [
            self.speckle_gain,
            self.speckle_gain_np,
            self.background_level,
            self.vessel_intensity,
            self.mask_threshold,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0))
            || self.speckle_gain > 1.0
            || self.speckle_gain_np > 1.0
        {
            return bad("gains must lie in [0, 1] and levels must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image8,
    pub mask: Mask,
    pub np_region: Mask,
    /// Background plus vessels before speckle, unrounded.
    pub clean: Plane<f64>,
}

#[derive(Clone, Copy)]
struct Walker {
    x: f64,
    y: f64,
    heading: f64,
    width: f64,
}

struct Segment {
    a: (f64, f64),
    b: (f64, f64),
    width: f64,
}

fn grow_trees(cfg: &SceneConfig, rng: &mut impl Rng) -> Vec<Segment> {
    let n = cfg.size as f64;
    let turn = Normal::new(0.0, 0.06).expect("valid sd");
    let mut segments = Vec::new();
    let mut stack = Vec::new();
    for _ in 0..cfg.n_seeds {
        let t = rng.gen_range(0.1..0.9) * n;
        let (x, y, inward) = match rng.gen_range(0..4) {
            0 => (t, 0.0, PI / 2.0),
            1 => (n - 1.0, t, PI),
            2 => (t, n - 1.0, -PI / 2.0),
            _ => (0.0, t, 0.0),
        };
        stack.push(Walker {
            x,
            y,
            heading: inward + rng.gen_range(-0.5..0.5),
            width: rng.gen_range(cfg.width_start.0..=cfg.width_start.1),
        });
    }
    let max_branches = 4 * cfg.n_seeds.max(1);
    let mut branches = 0;
    let max_steps = 3 * cfg.size;
    while let Some(mut w) = stack.pop() {
        let mut drift = 0.0;
        for _ in 0..max_steps {
            drift = 0.8 * drift + turn.sample(rng);
            w.heading += drift * 0.5;
            let next = (w.x + w.heading.cos(), w.y + w.heading.sin());
            segments.push(Segment {
                a: (w.x, w.y),
                b: next,
                width: w.width,
            });
            (w.x, w.y) = next;
            w.width = cfg.width_min + (w.width - cfg.width_min) * 0.975;
            if w.x < -2.0 || w.y < -2.0 || w.x > n + 1.0 || w.y > n + 1.0 {
                break;
            }
            if branches < max_branches && rng.gen_bool(cfg.branch_prob) {
                branches += 1;
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                stack.push(Walker {
                    heading: w.heading + side * rng.gen_range(0.4..1.0),
                    width: cfg.width_min.max(w.width * 0.75),
                    ..w
                });
                w.heading -= side * 0.2;
            }
        }
    }
    segments
}

fn distance_to_segment(p: (f64, f64), s: &Segment) -> f64 {
    let (dx, dy) = (s.b.0 - s.a.0, s.b.1 - s.a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - s.a.0) * dx + (p.1 - s.a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (s.a.0 + t * dx, s.a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Vessel brightness above background: the maximum over segments of a
/// Gaussian profile whose full width at half maximum is the vessel width.
/// Thin vessels are dimmer.
fn rasterize(cfg: &SceneConfig, segments: &[Segment]) -> Plane<f64> {
    let n = cfg.size;
    let mut v = Plane::new(n, n, 0.0f64);
    for s in segments {
        let sd = s.width / FWHM_PER_SD;
        let peak = cfg.vessel_intensity * (0.55 + 0.45 * (s.width / 2.0).min(1.0));
        let reach = 3.0 * sd + 1.0;
        let lo = |a: f64, b: f64| ((a.min(b) - reach).floor().max(0.0)) as usize;
        let hi = |a: f64, b: f64| ((a.max(b) + reach).ceil().min(n as f64 - 1.0)).max(-1.0);
        let (x0, x1) = (lo(s.a.0, s.b.0), hi(s.a.0, s.b.0));
        let (y0, y1) = (lo(s.a.1, s.b.1), hi(s.a.1, s.b.1));
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let d = distance_to_segment((x as f64, y as f64), s);
                let val = peak * (-(d * d) / (2.0 * sd * sd)).exp();
                if val > v.get(x, y) {
                    v.set(x, y, val);
                }
            }
        }
    }
    v
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
}

impl Ellipse {
    /// Normalized radius: below 1 inside.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        (u * u + v * v).sqrt()
    }
}

/// A unit-mean Rayleigh variate.
pub fn unit_rayleigh(rng: &mut impl Rng) -> f64 {
    let sigma = (2.0 / PI).sqrt();
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    sigma * (-2.0 * u.ln()).sqrt()
}

/// Multiplies every pixel by `1 + gain (R - 1)` with `R` unit-mean Rayleigh,
/// using the stronger gain inside `np_region`, then rounds and clamps.
pub fn speckle_stress(
    clean: &Plane<f64>,
    np_region: &Mask,
    cfg: &SceneConfig,
    rng: &mut impl Rng,
) -> Result<Image8> {
    if clean.dims() != np_region.dims() {
        return Err(Error::ShapeMismatch {
            op: "speckle_stress",
            left: vec![clean.height(), clean.width()],
            right: vec![np_region.height(), np_region.width()],
        });
    }
    let data = clean
        .data()
        .iter()
        .zip(np_region.data())
        .map(|(&p, &np)| {
            let gain = if np {
                cfg.speckle_gain_np
            } else {
                cfg.speckle_gain
            };
            let r = unit_rayleigh(rng);
            (p * (1.0 + gain * (r - 1.0))).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Plane::from_vec(clean.width(), clean.height(), data)
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    generate_scene_with(cfg, &mut stream_rng(cfg.seed, 0))
}

pub fn generate_scene_with(cfg: &SceneConfig, rng: &mut impl Rng) -> Result<Scene> {
    cfg.validate()?;
    let n = cfg.size;
    let nf = n as f64;
    let segments = grow_trees(cfg, rng);
    let mut vessels = rasterize(cfg, &segments);

    let holes: Vec<Ellipse> = (0..rng.gen_range(cfg.n_nonperfusion.0..=cfg.n_nonperfusion.1))
        .map(|_| Ellipse {
            cx: rng.gen_range(0.15..0.85) * nf,
            cy: rng.gen_range(0.15..0.85) * nf,
            rx: rng.gen_range(cfg.np_radius_frac.0..=cfg.np_radius_frac.1) * nf,
            ry: rng.gen_range(cfg.np_radius_frac.0..=cfg.np_radius_frac.1) * nf,
            angle: rng.gen_range(0.0..TAU),
        })
        .collect();
    let np_region = Mask::from_fn(n, n, |x, y| {
        holes.iter().any(|e| e.radius(x as f64, y as f64) < 1.0)
    });
    // vessels vanish inside a hole and fade over a short rim outside it
    for y in 0..n {
        for x in 0..n {
            let r = holes
                .iter()
                .map(|e| e.radius(x as f64, y as f64))
                .fold(f64::INFINITY, f64::min);
            if r < 1.0 {
                vessels.set(x, y, 0.0);
            } else if r < 1.15 {
                let t = (r - 1.0) / 0.15;
                vessels.set(x, y, vessels.get(x, y) * t * t * (3.0 - 2.0 * t));
            }
        }
    }

    let clean = vessels.map(|v| (cfg.background_level + v).min(255.0));
    let mask = clean.map(|v| v > cfg.mask_threshold);
    let image = speckle_stress(&clean, &np_region, cfg, rng)?;
    Ok(Scene {
        image,
        mask,
        np_region,
        clean,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub size: usize,
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

pub fn scene_id(index: usize) -> String {
    format!("{index:04}")
}

/// Scene `index` of a dataset: its own random stream of the dataset seed.
pub fn dataset_scene(cfg: &SceneConfig, index: usize) -> Result<Scene> {
    generate_scene_with(cfg, &mut stream_rng(cfg.seed, index as u64))
}

/// Writes `count` scenes under `out_dir` and a manifest putting the first
/// half in the training split. Returns the manifest path.
pub fn generate_dataset(
    cfg: &SceneConfig,
    count: usize,
    out_dir: &Path,
) -> Result<std::path::PathBuf> {
    if count < 2 {
        return Err(Error::invalid(format!(
            "a dataset needs at least 2 scenes for a split, got {count}"
        )));
    }
    cfg.validate()?;
    for sub in ["images", "masks", "regions"] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let ids: Vec<String> = (0..count).map(scene_id).collect();
    for (i, id) in ids.iter().enumerate() {
        let scene = dataset_scene(cfg, i)?;
        let file = format!("{id}.png");
        write_png(&out_dir.join("images").join(&file), &scene.image)?;
        write_mask(&out_dir.join("masks").join(&file), &scene.mask)?;
        write_mask(&out_dir.join("regions").join(&file), &scene.np_region)?;
    }
    let n_train = count / 2;
    let manifest = Manifest {
        size: cfg.size,
        seed: cfg.seed,
        train: ids[..n_train].to_vec(),
        test: ids[n_train..].to_vec(),
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
