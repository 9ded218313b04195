//! Synthetic echo-like images and the dataset manifest format.
//!
//! An image is a dark field with a bright fan-shaped sector whose apex sits
//! at the top centre. Inside the sector, each class places its own layout of
//! dark elliptical chambers. Every image jitters the chamber geometry and
//! brightness, then applies multiplicative speckle `x·(1+σg)` clamped to
//! `[0,1]`. The mask marks the union of chamber interiors, evaluated at pixel
//! centres with the same predicate that darkens the image.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{EdmaeError, Result};
use crate::io::{load_t32, save_t32};
use crate::masking::BinaryMask;
use crate::par;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub size: usize,
    pub classes: usize,
    /// Speckle strength σ.
    pub noise: f64,
    /// Patch size the image must tile evenly.
    pub patch: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            size: 64,
            classes: 4,
            noise: 0.15,
            patch: 8,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(EdmaeError::Config(format!("classes must be >= 2, got {}", self.classes)));
        }
        if self.patch == 0 || self.size < 16 || self.size % self.patch != 0 {
            return Err(EdmaeError::Config(format!(
                "image size {} must be >= 16 and divisible by patch {}",
                self.size, self.patch
            )));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(EdmaeError::Config(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        Ok(())
    }
}

/// An ellipse in unit image coordinates (x right, y down).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        u * u + v * v <= 1.0
    }
}

const APEX: (f64, f64) = (0.5, 0.04);
const FAN_RADIUS: f64 = 0.92;
const FAN_HALF_ANGLE: f64 = 0.72;

fn in_fan(x: f64, y: f64) -> bool {
    let (dx, dy) = (x - APEX.0, y - APEX.1);
    dy > 0.0 && dx.hypot(dy) <= FAN_RADIUS && dx.atan2(dy).abs() <= FAN_HALF_ANGLE
}

/// Chamber layout of class `k` before jitter.
pub fn template(k: usize) -> Vec<Ellipse> {
    let e = |cx, cy, rx, ry, angle| Ellipse { cx, cy, rx, ry, angle };
    let base = match k % 4 {
        0 => vec![e(0.5, 0.55, 0.17, 0.24, 0.0)],
        1 => vec![e(0.37, 0.55, 0.1, 0.2, 0.15), e(0.63, 0.55, 0.1, 0.2, -0.15)],
        2 => vec![e(0.5, 0.38, 0.18, 0.09, 0.0), e(0.5, 0.7, 0.18, 0.1, 0.0)],
        _ => vec![
            e(0.38, 0.42, 0.09, 0.11, 0.0),
            e(0.62, 0.42, 0.09, 0.11, 0.0),
            e(0.38, 0.7, 0.09, 0.11, 0.0),
            e(0.62, 0.7, 0.09, 0.11, 0.0),
        ],
    };
    // Classes past the fourth reuse a layout rotated about the sector centre.
    let turn = (k / 4) as f64 * 0.35;
    if turn == 0.0 {
        return base;
    }
    let (s, c) = turn.sin_cos();
    base.into_iter()
        .map(|el| {
            let (dx, dy) = (el.cx - 0.5, el.cy - 0.55);
            Ellipse {
                cx: 0.5 + c * dx - s * dy,
                cy: 0.55 + s * dx + c * dy,
                angle: el.angle + turn,
                ..el
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: usize,
    pub mask: BinaryMask,
    pub chambers: Vec<Ellipse>,
}

/// Renders image `index` of the stream `name`. Pure in `(spec, name, index)`.
pub fn render(spec: &SynthSpec, name: &str, index: u64) -> Result<Sample> {
    spec.validate()?;
    let label = (index % spec.classes as u64) as usize;
    let mut r = rng::stream(rng::derive_indexed(rng::derive(spec.seed, name), "data", index), "image");
    let mut jitter = |amp: f64| r.gen_range(-amp..=amp);
    let (shift_x, shift_y) = (jitter(0.03), jitter(0.03));
    let zoom = 1.0 + jitter(0.08);
    let chambers: Vec<Ellipse> = template(label)
        .into_iter()
        .map(|e| Ellipse {
            cx: 0.5 + (e.cx - 0.5) * zoom + shift_x + jitter(0.01),
            cy: 0.55 + (e.cy - 0.55) * zoom + shift_y + jitter(0.01),
            rx: e.rx * zoom * (1.0 + jitter(0.1)),
            ry: e.ry * zoom * (1.0 + jitter(0.1)),
            angle: e.angle + jitter(0.15),
        })
        .collect();
    let tissue = 0.72 + jitter(0.06);
    let blood = 0.12 + jitter(0.04);
    let n = spec.size;
    let mut pixels = Vec::with_capacity(n * n);
    let mut mask = Vec::with_capacity(n * n);
    for py in 0..n {
        for px in 0..n {
            let (x, y) = ((px as f64 + 0.5) / n as f64, (py as f64 + 0.5) / n as f64);
            let inside = chambers.iter().any(|e| e.contains(x, y));
            let v = if inside {
                blood
            } else if in_fan(x, y) {
                let depth = (x - APEX.0).hypot(y - APEX.1) / FAN_RADIUS;
                tissue * (1.0 - 0.35 * depth)
            } else {
                0.03
            };
            pixels.push(v);
            mask.push(inside);
        }
    }
    if spec.noise > 0.0 {
        for v in &mut pixels {
            let g: f64 = r.sample(StandardNormal);
            *v *= 1.0 + spec.noise * g;
        }
    }
    let image = Tensor::new(vec![1, n, n], pixels.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect())?;
    Ok(Sample {
        image,
        label,
        mask: BinaryMask::new(n, n, mask)?,
        chambers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: Option<usize>,
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Paths are written relative to `dir` when they live inside it.
    pub fn to_text(&self, dir: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(dir).unwrap_or(p).display().to_string();
        let mut s = String::new();
        for e in &self.entries {
            let label = e.label.map_or("-".to_string(), |l| l.to_string());
            let mask = e.mask.as_deref().map_or("-".to_string(), rel);
            s.push_str(&format!("{}\t{}\t{}\n", rel(&e.image), label, mask));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new(""));
        fs::write(path, self.to_text(dir)).map_err(|e| EdmaeError::io(path, e))
    }
}

/// Files named `{name}_{index}.t32` and `{name}_{index}_mask.t32`. The first
/// `round(test_fraction·n)` indices of a seeded shuffle form the test split.
pub fn generate(
    spec: &SynthSpec,
    name: &str,
    n: usize,
    test_fraction: f64,
    dir: &Path,
) -> Result<(DatasetManifest, DatasetManifest)> {
    spec.validate()?;
    if n == 0 {
        return Err(EdmaeError::Config("dataset size must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(EdmaeError::Config(format!("test fraction must be in [0,1), got {test_fraction}")));
    }
    fs::create_dir_all(dir).map_err(|e| EdmaeError::io(dir, e))?;
    let written = par::map(n, |i| -> Result<ManifestEntry> {
        let s = render(spec, name, i as u64)?;
        let image = dir.join(format!("{name}_{i:05}.t32"));
        let mask = dir.join(format!("{name}_{i:05}_mask.t32"));
        save_t32(&image, &s.image)?;
        save_t32(&mask, &s.mask.to_tensor())?;
        Ok(ManifestEntry {
            image,
            label: Some(s.label),
            mask: Some(mask),
        })
    });
    let entries = written.into_iter().collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(rng::derive(spec.seed, name), "split"));
    let n_test = (test_fraction * n as f64).round() as usize;
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let pick = |want: bool, split| DatasetManifest {
        entries: entries.iter().zip(&is_test).filter(|(_, t)| **t == want).map(|(e, _)| e.clone()).collect(),
        split,
    };
    let (train, test) = (pick(false, Split::Train), pick(true, Split::Test));
    train.save(&dir.join(format!("{name}_train.tsv")))?;
    if n_test > 0 {
        test.save(&dir.join(format!("{name}_test.tsv")))?;
    }
    Ok((train, test))
}

/// Relative paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path, split: Split) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| EdmaeError::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new(""));
    let file = path.display().to_string();
    let mut entries = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| EdmaeError::Parse {
            file: file.clone(),
            offset: start,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [image, label, mask] = fields[..] else {
            return Err(bad(format!("expected 3 tab-separated fields, got {}", fields.len())));
        };
        let label = match label {
            "-" => None,
            l => Some(l.parse().map_err(|_| bad(format!("bad label {l:?}")))?),
        };
        let resolve = |p: &str| if Path::new(p).is_absolute() { PathBuf::from(p) } else { dir.join(p) };
        entries.push(ManifestEntry {
            image: resolve(image),
            label,
            mask: (mask != "-").then(|| resolve(mask)),
        });
    }
    Ok(DatasetManifest { entries, split })
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    load_t32(path)
}

/// A manifest loaded into memory: images stacked `[N, 1, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Option<Vec<usize>>,
    pub masks: Option<Vec<BinaryMask>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Labels and masks are kept only when every entry has one.
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        if manifest.is_empty() {
            return Err(EdmaeError::Data("manifest has no entries".into()));
        }
        let mut images = Vec::with_capacity(manifest.len());
        for e in &manifest.entries {
            let t = load_image(&e.image)?;
            let t = match *t.shape() {
                [h, w] => t.reshape(&[1, h, w])?,
                [1, _, _] => t,
                ref s => {
                    return Err(EdmaeError::Data(format!(
                        "{}: expected a [1,H,W] image, got {s:?}",
                        e.image.display()
                    )))
                }
            };
            images.push(t);
        }
        let shape = images[0].shape().to_vec();
        if let Some(bad) = manifest.entries.iter().zip(&images).find(|(_, t)| t.shape() != shape) {
            return Err(EdmaeError::Data(format!(
                "{}: image shape {:?} differs from {:?}",
                bad.0.image.display(),
                bad.1.shape(),
                shape
            )));
        }
        let labels = manifest.entries.iter().map(|e| e.label).collect::<Option<Vec<_>>>();
        let masks = if manifest.entries.iter().all(|e| e.mask.is_some()) {
            let mut out = Vec::with_capacity(manifest.len());
            for e in &manifest.entries {
                let path = e.mask.as_deref().expect("checked above");
                let m = BinaryMask::from_tensor(&load_image(path)?)?;
                if (1, m.height, m.width) != (shape[0], shape[1], shape[2]) {
                    return Err(EdmaeError::Data(format!(
                        "{}: mask {}x{} does not match image {}x{}",
                        path.display(),
                        m.height,
                        m.width,
                        shape[1],
                        shape[2]
                    )));
                }
                out.push(m);
            }
            Some(out)
        } else {
            None
        };
        Ok(Self {
            images: Tensor::stack(&images.iter().collect::<Vec<_>>())?,
            labels,
            masks,
        })
    }

    /// Renders `n` samples straight into memory, skipping the file system.
    pub fn synthesize(spec: &SynthSpec, name: &str, n: usize) -> Result<Self> {
        let samples = par::map(n, |i| render(spec, name, i as u64)).into_iter().collect::<Result<Vec<_>>>()?;
        let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
        Ok(Self {
            images: Tensor::stack(&images)?,
            labels: Some(samples.iter().map(|s| s.label).collect()),
            masks: Some(samples.into_iter().map(|s| s.mask).collect()),
        })
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.gather(idx)?,
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            masks: self.masks.as_ref().map(|m| idx.iter().map(|&i| m[i].clone()).collect()),
        })
    }

    /// Batch of images `[B, 1, H, W]` at `idx`.
    pub fn batch(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        self.images.gather(idx)
    }
}
