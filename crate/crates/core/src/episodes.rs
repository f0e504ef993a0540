//! Datasets on disk, the synthetic cross-domain generator and episode sampling.
//!
//! A dataset root holds `meta.json` plus one `IMG1` file per sample:
//! the 4-byte magic `IMG1`, `u16` LE height, `u16` LE width, `u8` channel
//! count (3), then `H·W·3` raw RGB bytes, row-major. Every file is decoded
//! and validated when the dataset is loaded.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::seed;

pub const MAGIC: &[u8; 4] = b"IMG1";
const HEADER_LEN: usize = 9;

/// One image of a dataset. `id` is unique within the dataset.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: usize,
    pub path: String,
    pub image: Arc<Image>,
}

#[derive(Debug, Clone)]
pub struct ClassRecord {
    pub label: usize,
    pub class_name: String,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub classes: Vec<ClassRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaFile {
    name: String,
    classes: Vec<MetaClass>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaClass {
    label: usize,
    class_name: String,
    samples: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from in-memory images, one list per class.
    pub fn from_images(name: &str, classes: Vec<(String, Vec<Image>)>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Dataset(format!("{name}: empty class list")));
        }
        let mut id = 0;
        let classes = classes
            .into_iter()
            .enumerate()
            .map(|(label, (class_name, images))| {
                let samples = images
                    .into_iter()
                    .enumerate()
                    .map(|(k, image)| {
                        let s = Sample {
                            id,
                            path: format!("c{label:03}/{k:04}.img"),
                            image: Arc::new(image),
                        };
                        id += 1;
                        s
                    })
                    .collect();
                ClassRecord {
                    label,
                    class_name,
                    samples,
                }
            })
            .collect();
        Ok(Dataset {
            name: name.to_string(),
            classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_samples(&self) -> usize {
        self.classes.iter().map(|c| c.samples.len()).sum()
    }

    /// Writes `meta.json` and every sample under `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let mut meta = MetaFile {
            name: self.name.clone(),
            classes: Vec::with_capacity(self.classes.len()),
        };
        for class in &self.classes {
            for s in &class.samples {
                let path = root.join(&s.path);
                if let Some(dir) = path.parent() {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                fs::write(&path, encode_img1(&s.image)?).map_err(|e| Error::io(&path, e))?;
            }
            meta.classes.push(MetaClass {
                label: class.label,
                class_name: class.class_name.clone(),
                samples: class.samples.iter().map(|s| s.path.clone()).collect(),
            });
        }
        let path = root.join("meta.json");
        let json = serde_json::to_string_pretty(&meta)?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }
}

pub fn encode_img1(img: &Image) -> Result<Vec<u8>> {
    let (h, w) = (img.height(), img.width());
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::Invalid(format!("image {h}x{w} too large for IMG1")));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + h * w * CHANNELS);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    out.push(CHANNELS as u8);
    out.extend(img.to_u8());
    Ok(out)
}

pub fn decode_img1(path: &Path, bytes: &[u8]) -> Result<Image> {
    let corrupt = |offset: usize, msg: String| Error::Corrupt {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(bytes.len(), format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let h = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let w = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    if h == 0 || w == 0 {
        return Err(corrupt(4, format!("zero dimension {h}x{w}")));
    }
    if bytes[8] as usize != CHANNELS {
        return Err(corrupt(8, format!("expected {CHANNELS} channels, found {}", bytes[8])));
    }
    let expected = HEADER_LEN + h * w * CHANNELS;
    if bytes.len() < expected {
        return Err(corrupt(
            bytes.len(),
            format!("truncated: {h}x{w} image needs {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(corrupt(expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    Image::from_u8(h, w, &bytes[HEADER_LEN..])
}

/// Reads and validates a dataset root.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let meta_path = root.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: MetaFile =
        serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", meta_path.display())))?;
    if meta.classes.is_empty() {
        return Err(Error::Dataset(format!("{}: empty class list", meta_path.display())));
    }
    let mut order: Vec<usize> = (0..meta.classes.len()).collect();
    order.sort_by_key(|&i| meta.classes[i].label);
    for (expect, &i) in order.iter().enumerate() {
        let label = meta.classes[i].label;
        if label != expect {
            return Err(Error::Dataset(format!(
                "{}: labels must be contiguous from 0, expected {expect}, found {label}",
                meta_path.display()
            )));
        }
    }
    let mut id = 0;
    let mut classes = Vec::with_capacity(order.len());
    for i in order {
        let mc = &meta.classes[i];
        let mut samples = Vec::with_capacity(mc.samples.len());
        for rel in &mc.samples {
            let path: PathBuf = root.join(rel);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            samples.push(Sample {
                id,
                path: rel.clone(),
                image: Arc::new(decode_img1(&path, &bytes)?),
            });
            id += 1;
        }
        classes.push(ClassRecord {
            label: mc.label,
            class_name: mc.class_name.clone(),
            samples,
        });
    }
    Ok(Dataset { name: meta.name, classes })
}

/// Parameters of a synthetic dataset.
///
/// Class `i` is drawn from pattern `class_offset + i`, so two datasets with
/// different offsets have disjoint classes. `domain_shift` in `[0, 1]`
/// rotates and scatters hues, swaps the class background texture for a
/// domain texture, pulls blob shapes toward diamonds and adds distractor
/// blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub name: String,
    pub classes: usize,
    pub samples_per_class: usize,
    pub hw: usize,
    pub domain_shift: f32,
    pub seed: u64,
    pub class_offset: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            name: "source".into(),
            classes: 8,
            samples_per_class: 100,
            hw: 32,
            domain_shift: 0.0,
            seed: 0,
            class_offset: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("synthetic dataset needs at least 2 classes, got {}", self.classes)));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        if !(8..=1024).contains(&self.hw) {
            return Err(Error::Config(format!("image size {} outside [8, 1024]", self.hw)));
        }
        if !(0.0..=1.0).contains(&self.domain_shift) {
            return Err(Error::Config(format!("domain_shift {} outside [0, 1]", self.domain_shift)));
        }
        Ok(())
    }
}

struct Blob {
    center: [f32; 2],
    radius: f32,
    color: [f32; 3],
}

struct BlobStyle {
    radius: f32,
    color: [f32; 3],
}

struct ClassPattern {
    background: [f32; 3],
    freq: f32,
    angle: f32,
    /// Superellipse exponent of the blobs: 1 is a diamond, 2 a disc.
    exponent: f32,
    blobs: Vec<BlobStyle>,
}

fn random_color<R: Rng + ?Sized>(rng: &mut R, lo: f32, hi: f32) -> [f32; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

impl ClassPattern {
    fn new(seed: u64, pattern: usize) -> Self {
        let mut rng = seed::rng(seed, &[0, pattern as u64]);
        let background = random_color(&mut rng, 0.25, 0.75);
        let freq = rng.random_range(1.5..4.5);
        let angle = rng.random_range(0.0..PI);
        let exponent = rng.random_range(0.0f32..1.0).mul_add(2.0, -0.5).exp2();
        let count = rng.random_range(1..=3);
        let blobs = (0..count)
            .map(|_| BlobStyle {
                radius: rng.random_range(0.1..0.25),
                color: random_color(&mut rng, 0.0, 1.0),
            })
            .collect();
        ClassPattern {
            background,
            freq,
            angle,
            exponent,
            blobs,
        }
    }
}

/// Rotates `c` about the gray axis by `angle` radians.
fn rotate_hue(c: [f32; 3], angle: f32) -> [f32; 3] {
    if angle == 0.0 {
        return c;
    }
    let (s, cos) = angle.sin_cos();
    let k = 1.0 / 3f32.sqrt();
    let dot = (c[0] + c[1] + c[2]) * k;
    let cross = [
        k * (c[2] - c[1]),
        k * (c[0] - c[2]),
        k * (c[1] - c[0]),
    ];
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = (c[i] * cos + cross[i] * s + k * dot * (1.0 - cos)).clamp(0.0, 1.0);
    }
    out
}

const HUE_CAST: f32 = 0.7;
const PHOTO_JITTER: f32 = 0.25;

fn render(spec: &SyntheticSpec, pattern: &ClassPattern, index: usize, sample: usize) -> Result<Image> {
    let shift = spec.domain_shift;
    let g = (spec.class_offset + index) as u64;
    let mut rng = seed::rng(spec.seed, &[1, g, sample as u64]);
    // Domain texture, shared by all classes of a domain.
    let mut drng = seed::rng(spec.seed, &[2]);
    let dom_freq: f32 = drng.random_range(5.0..7.0);
    let dom_angle: f32 = drng.random_range(0.0..PI);

    // Per-sample hue cast around the domain rotation and photometric jitter.
    let hue = shift * PI + shift * rng.random_range(-HUE_CAST..HUE_CAST);
    let exponent = pattern.exponent + (1.0 - pattern.exponent) * 0.5 * shift;
    let phase = rng.random_range(0.0..2.0 * PI);
    let dom_phase = rng.random_range(0.0..2.0 * PI);
    let gain = rng.random_range(1.0 - PHOTO_JITTER..1.0 + PHOTO_JITTER);
    let saturation = rng.random_range(1.0 - PHOTO_JITTER..1.0 + PHOTO_JITTER);
    let background = rotate_hue(pattern.background, hue);
    let mut blobs: Vec<Blob> = pattern
        .blobs
        .iter()
        .map(|b| {
            let color = b.color.map(|c| c + rng.random_range(-0.08..0.08));
            Blob {
                center: [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)],
                radius: b.radius * rng.random_range(0.85..1.15),
                color: rotate_hue(color, hue),
            }
        })
        .collect();
    // Class-agnostic distractor blob.
    if rng.random_bool(shift as f64) {
        blobs.push(Blob {
            center: [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)],
            radius: rng.random_range(0.08..0.14),
            color: rotate_hue(random_color(&mut rng, 0.0, 1.0), hue),
        });
    }

    let hw = spec.hw;
    let mut data = Vec::with_capacity(hw * hw * CHANNELS);
    let (ca, sa) = (pattern.angle.cos(), pattern.angle.sin());
    let (cd, sd) = (dom_angle.cos(), dom_angle.sin());
    for y in 0..hw {
        let v = (y as f32 + 0.5) / hw as f32;
        for x in 0..hw {
            let u = (x as f32 + 0.5) / hw as f32;
            let class_tex = (2.0 * PI * pattern.freq * (u * ca + v * sa) + phase).sin();
            let dom_tex = (2.0 * PI * dom_freq * (u * cd + v * sd) + dom_phase).sin().signum();
            let tex = 0.2 * ((1.0 - shift) * class_tex + shift * dom_tex);
            let mut px = background.map(|c| c * (1.0 + tex));
            for b in &blobs {
                let du = ((u - b.center[0]) / b.radius).abs();
                let dv = ((v - b.center[1]) / b.radius).abs();
                let d = du.powf(exponent) + dv.powf(exponent);
                let alpha = ((1.0 - d) * 3.0).clamp(0.0, 1.0);
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - alpha) + b.color[c] * alpha;
                }
            }
            let luma = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            let px = px.map(|c| gain * (luma + saturation * (c - luma)));
            for c in px {
                let noise = rng.random_range(-0.03f32..0.03);
                data.push((c + noise).clamp(0.0, 1.0));
            }
        }
    }
    // Quantize so that in-memory and on-disk datasets agree exactly.
    let img = Image::new(hw, hw, data)?;
    Image::from_u8(hw, hw, &img.to_u8())
}

/// Generates a synthetic dataset in memory.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let classes = (0..spec.classes)
        .map(|i| {
            let pattern = ClassPattern::new(spec.seed, spec.class_offset + i);
            let images = (0..spec.samples_per_class)
                .map(|j| render(spec, &pattern, i, j))
                .collect::<Result<Vec<_>>>()?;
            Ok((format!("pattern_{}", spec.class_offset + i), images))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_images(&spec.name, classes)
}

/// Generates a synthetic dataset and writes it under `root`.
pub fn gen_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<Dataset> {
    let ds = synthesize(spec)?;
    ds.save(root)?;
    Ok(ds)
}

/// One labeled image of an episode.
#[derive(Debug, Clone)]
pub struct EpisodeItem {
    pub sample_id: usize,
    pub local: usize,
    pub global: usize,
    pub image: Arc<Image>,
}

/// A `C`-way task: `N` support and `M` query items per class, grouped by
/// local label. `class_map[local]` is the global label.
#[derive(Debug, Clone)]
pub struct Episode {
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
    pub class_map: Vec<usize>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.class_map.len()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|i| i.local).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|i| i.local).collect()
    }

    pub fn support_images(&self) -> Vec<&Image> {
        self.support.iter().map(|i| i.image.as_ref()).collect()
    }

    pub fn query_images(&self) -> Vec<&Image> {
        self.query.iter().map(|i| i.image.as_ref()).collect()
    }
}

/// Samples classes and then per-class samples, all without replacement.
pub fn sample_episode(ds: &Dataset, ways: usize, shots: usize, queries: usize, seed: u64) -> Result<Episode> {
    if ways == 0 || shots == 0 {
        return Err(Error::Invalid(format!("episode needs ways and shots > 0, got {ways}-way {shots}-shot")));
    }
    if ds.num_classes() < ways {
        return Err(Error::Dataset(format!(
            "{}: {ways}-way episode needs {ways} classes, dataset has {}",
            ds.name,
            ds.num_classes()
        )));
    }
    let per_class = shots + queries;
    if let Some(c) = ds.classes.iter().find(|c| c.samples.len() < per_class) {
        return Err(Error::Dataset(format!(
            "{}: class {} has {} samples, episode needs {per_class}",
            ds.name,
            c.label,
            c.samples.len()
        )));
    }
    let mut rng = seed::rng(seed, &[]);
    let class_map: Vec<usize> = index::sample(&mut rng, ds.num_classes(), ways).into_vec();
    let mut support = Vec::with_capacity(ways * shots);
    let mut query = Vec::with_capacity(ways * queries);
    for (local, &global) in class_map.iter().enumerate() {
        let class = &ds.classes[global];
        let picks = index::sample(&mut rng, class.samples.len(), per_class).into_vec();
        for (k, &p) in picks.iter().enumerate() {
            let s = &class.samples[p];
            let item = EpisodeItem {
                sample_id: s.id,
                local,
                global: class.label,
                image: Arc::clone(&s.image),
            };
            if k < shots {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    Ok(Episode {
        support,
        query,
        class_map,
    })
}
