//! Procedural oral-cavity stand-in images with exact lesion ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BBox, Image, Mask};
use crate::rng::{fill_normal, mix_seed, rng_from, StageRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Palette {
    pub background: [f32; 3],
    pub lesion: [f32; 3],
    /// Amplitude (std) of the smooth background texture.
    pub background_variation: f32,
    /// Amplitude (std) of the lesion texture; larger than the background's.
    pub lesion_variation: f32,
    /// Per-image uniform jitter applied to each mean color channel.
    pub color_jitter: f32,
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            background: [0.86, 0.62, 0.58],
            lesion: [0.58, 0.30, 0.32],
            background_variation: 0.025,
            lesion_variation: 0.045,
            color_jitter: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub n_normal: usize,
    pub n_lesion: usize,
    pub image_size: usize,
    pub lesion_count_range: [usize; 2],
    /// Blob base radius as a fraction of the image size.
    pub lesion_radius_range: [f64; 2],
    pub palette: Palette,
    /// Correlation length of the texture fields, in pixels.
    pub texture_scale: f64,
    /// Required mean absolute per-channel color difference between lesion and background.
    pub min_separation: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            n_normal: 29,
            n_lesion: 127,
            image_size: 64,
            lesion_count_range: [1, 2],
            lesion_radius_range: [0.08, 0.15],
            palette: Palette::default(),
            texture_scale: 2.0,
            min_separation: 0.15,
            seed: 0,
        }
    }
}

/// Relative amplitude bound of the radial perturbation of a blob outline.
const MAX_WOBBLE: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 500;

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 16 {
            return bad(format!("image_size {} < 16", self.image_size));
        }
        let [rmin, rmax] = self.lesion_radius_range;
        if !(rmin > 0.0 && rmin <= rmax && rmax <= 0.5) {
            return bad(format!("lesion_radius_range {rmin}..{rmax} not within (0, 0.5]"));
        }
        let [cmin, cmax] = self.lesion_count_range;
        if cmin == 0 || cmin > cmax {
            return bad(format!("lesion_count_range [{cmin}, {cmax}] is invalid"));
        }
        if self.texture_scale <= 0.0 {
            return bad("texture_scale must be positive".into());
        }
        // the largest blob must fit inside the frame with a one-pixel margin
        let extent = rmax * self.image_size as f64 * (1.0 + MAX_WOBBLE) + 1.0;
        if 2.0 * extent >= self.image_size as f64 {
            return bad(format!(
                "lesion radius {rmax} is too large for a {}px image",
                self.image_size
            ));
        }
        // packing bound for the requested count of worst-case blobs
        let area = std::f64::consts::PI * extent * extent * cmax as f64;
        if area > 0.5 * (self.image_size * self.image_size) as f64 {
            return bad(format!(
                "{cmax} lesions of radius {rmax} cannot fit in a {}px image",
                self.image_size
            ));
        }
        let p = &self.palette;
        let sep = (0..3)
            .map(|c| (p.lesion[c] - p.background[c]).abs() as f64)
            .sum::<f64>()
            / 3.0;
        if sep - 2.0 * f64::from(p.color_jitter) < self.min_separation {
            return bad(format!(
                "palette separation {sep:.3} minus jitter falls below {}",
                self.min_separation
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Lesion,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Normal => 0,
            Label::Lesion => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub label: Label,
    pub masks: Vec<Mask>,
    pub boxes: Vec<BBox>,
}

impl Sample {
    /// Union of all lesion masks (empty mask for normal samples).
    pub fn union_mask(&self) -> Mask {
        let mut m = Mask::new(self.image.width(), self.image.height());
        for lm in &self.masks {
            m = m.union(lm).expect("masks share the image shape");
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub config: PhantomConfig,
    pub seed: u64,
}

impl Dataset {
    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    /// Keep only samples whose id satisfies `keep`, preserving order.
    pub fn filtered(&self, keep: impl Fn(&Sample) -> bool) -> Dataset {
        Dataset {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            config: self.config.clone(),
            seed: self.seed,
        }
    }
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:04}")
}

/// Zero-mean, unit-std smooth random field.
fn smooth_field(rng: &mut StageRng, size: usize, scale: f64) -> Vec<f32> {
    let mut white = vec![0.0f32; size * size * 3];
    fill_normal(rng, &mut white);
    // only channel 0 is used; the image blur helper works on RGB triples
    let img = Image::from_vec(size, size, white).expect("sized");
    let blurred = img.gaussian_blur(scale as f32);
    let plane: Vec<f32> = blurred.data().chunks_exact(3).map(|p| p[0]).collect();
    let mean = plane.iter().sum::<f32>() / plane.len() as f32;
    let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / plane.len() as f32;
    let inv = 1.0 / var.sqrt().max(1e-6);
    plane.into_iter().map(|v| (v - mean) * inv).collect()
}

struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    harmonics: [(f64, f64); 3],
}

impl Blob {
    fn extent(&self) -> f64 {
        self.radius * (1.0 + self.harmonics.iter().map(|h| h.0).sum::<f64>()) + 1.0
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let theta = dy.atan2(dx);
        let wobble: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(k, &(a, phase))| a * ((k as f64 + 2.0) * theta + phase).cos())
            .sum();
        (dx * dx + dy * dy).sqrt() <= self.radius * (1.0 + wobble)
    }
}

fn place_blobs(rng: &mut StageRng, cfg: &PhantomConfig, count: usize) -> Result<Vec<Blob>> {
    let size = cfg.image_size as f64;
    let [rmin, rmax] = cfg.lesion_radius_range;
    let mut blobs: Vec<Blob> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let radius = rng.random_range(rmin..=rmax) * size;
            let mut harmonics = [(0.0, 0.0); 3];
            for h in &mut harmonics {
                *h = (
                    rng.random_range(0.0..MAX_WOBBLE / 3.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                );
            }
            let mut blob = Blob {
                cx: 0.0,
                cy: 0.0,
                radius,
                harmonics,
            };
            let ext = blob.extent();
            if 2.0 * ext >= size {
                continue;
            }
            blob.cx = rng.random_range(ext..size - ext);
            blob.cy = rng.random_range(ext..size - ext);
            let clear = blobs.iter().all(|b| {
                let d = ((b.cx - blob.cx).powi(2) + (b.cy - blob.cy).powi(2)).sqrt();
                d >= b.extent() + blob.extent() + 2.0
            });
            if clear {
                blobs.push(blob);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place {count} non-overlapping lesions in a {}px image",
                cfg.image_size
            )));
        }
    }
    Ok(blobs)
}

fn jittered(rng: &mut StageRng, base: [f32; 3], jitter: f32) -> [f32; 3] {
    let mut c = base;
    if jitter > 0.0 {
        for v in &mut c {
            *v += rng.random_range(-jitter..=jitter);
        }
    }
    c
}

/// Render one phantom. Deterministic in `(seed, config, with_lesion)`.
pub fn render_phantom(id: &str, seed: u64, cfg: &PhantomConfig, with_lesion: bool) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = rng_from(seed);
    let size = cfg.image_size;
    let pal = &cfg.palette;
    let bg_color = jittered(&mut rng, pal.background, pal.color_jitter);
    let lesion_color = jittered(&mut rng, pal.lesion, pal.color_jitter);

    let bg_shared = smooth_field(&mut rng, size, cfg.texture_scale);
    let bg_tint: Vec<Vec<f32>> = (0..3)
        .map(|_| smooth_field(&mut rng, size, cfg.texture_scale * 2.0))
        .collect();
    let mut image = Image::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = bg_color[c] + pal.background_variation * (bg_shared[i] + 0.3 * bg_tint[c][i]);
            }
            image.set_pixel(x, y, px);
        }
    }

    let mut masks = Vec::new();
    if with_lesion {
        let [cmin, cmax] = cfg.lesion_count_range;
        let count = rng.random_range(cmin..=cmax);
        let blobs = place_blobs(&mut rng, cfg, count)?;
        let fine_scale = (cfg.texture_scale * 0.5).max(0.5);
        for blob in &blobs {
            let field = smooth_field(&mut rng, size, fine_scale);
            let tint = smooth_field(&mut rng, size, cfg.texture_scale);
            let mask = Mask::from_fn(size, size, |x, y| blob.contains(x as f64 + 0.5, y as f64 + 0.5));
            for y in 0..size {
                for x in 0..size {
                    if mask.get(x, y) {
                        let i = y * size + x;
                        let mut px = [0.0; 3];
                        for c in 0..3 {
                            let shade = if c == 0 { 0.5 } else { 1.0 };
                            px[c] = lesion_color[c] + pal.lesion_variation * (field[i] + 0.4 * shade * tint[i]);
                        }
                        image.set_pixel(x, y, px);
                    }
                }
            }
            masks.push(mask);
        }
    }
    image.clamp01();
    image.quantize();
    let boxes = masks.iter().filter_map(|m| m.tight_box(0)).collect();
    Ok(Sample {
        id: id.to_string(),
        image,
        label: if with_lesion { Label::Lesion } else { Label::Normal },
        masks,
        boxes,
    })
}

/// `n_normal` normal samples followed by `n_lesion` lesion samples; sample `i`
/// is rendered from `mix_seed(config.seed, i)`.
pub fn generate_dataset(cfg: &PhantomConfig) -> Result<Dataset> {
    cfg.validate()?;
    let total = cfg.n_normal + cfg.n_lesion;
    let samples = (0..total)
        .map(|i| render_phantom(&sample_id(i), mix_seed(cfg.seed, i as u64), cfg, i >= cfg.n_normal))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        config: cfg.clone(),
        seed: cfg.seed,
    })
}

/// Mean absolute per-channel difference between the mean lesion color and
/// the mean background color of a sample.
pub fn color_separation(image: &Image, lesion: &Mask, background: &Mask) -> f64 {
    let mean = |m: &Mask| {
        let mut acc = [0.0f64; 3];
        let mut n = 0usize;
        for y in 0..image.height() {
            for x in 0..image.width() {
                if m.get(x, y) {
                    let p = image.pixel(x, y);
                    for c in 0..3 {
                        acc[c] += p[c] as f64;
                    }
                    n += 1;
                }
            }
        }
        acc.map(|v| v / n.max(1) as f64)
    };
    let (a, b) = (mean(lesion), mean(background));
    (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>() / 3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Stratified k-fold partition.
///
/// Each class is shuffled with `seed` and dealt round-robin into folds; the
/// dealing position carries over between classes so overall fold sizes also
/// differ by at most one.
pub fn split_kfold(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    for (label, members) in &by_class {
        if members.len() < k {
            return Err(Error::Stratification(format!(
                "class {label:?} has {} members, fewer than k = {k}",
                members.len()
            )));
        }
    }
    let mut rng = rng_from(seed);
    let mut fold_of = vec![0usize; dataset.samples.len()];
    let mut cursor = 0usize;
    for members in by_class.values_mut() {
        // Fisher-Yates
        for i in (1..members.len()).rev() {
            let j = rng.random_range(0..=i);
            members.swap(i, j);
        }
        for &m in members.iter() {
            fold_of[m] = cursor % k;
            cursor += 1;
        }
    }
    Ok((0..k)
        .map(|f| {
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for (i, s) in dataset.samples.iter().enumerate() {
                if fold_of[i] == f {
                    test.push(s.id.clone());
                } else {
                    train.push(s.id.clone());
                }
            }
            Fold { train, test }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Directory layout

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub config: PhantomConfig,
    pub seed: u64,
    pub labels: BTreeMap<String, Label>,
}

/// Write `images/`, `labels/`, `masks/` and `meta.json` under `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["images", "labels", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for s in &dataset.samples {
        s.image.save_png(&dir.join("images").join(format!("{}.png", s.id)))?;
        let mut text = String::new();
        for b in &s.boxes {
            text.push_str(&b.to_label_line());
            text.push('\n');
        }
        let lp = dir.join("labels").join(format!("{}.txt", s.id));
        fs::write(&lp, text).map_err(|e| Error::io(&lp, e))?;
        for (j, m) in s.masks.iter().enumerate() {
            m.save_png(&dir.join("masks").join(format!("{}_{j}.png", s.id)))?;
        }
    }
    let meta = DatasetMeta {
        config: dataset.config.clone(),
        seed: dataset.seed,
        labels: dataset.samples.iter().map(|s| (s.id.clone(), s.label)).collect(),
    };
    let mp = dir.join("meta.json");
    fs::write(
        &mp,
        serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n",
    )
    .map_err(|e| Error::io(&mp, e))
}

/// Read a dataset written by [`save_dataset`]. `masks/` may be absent for
/// externally supplied datasets; lesion samples then carry no masks.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mp = dir.join("meta.json");
    if !mp.exists() {
        return Err(Error::MissingInput(mp));
    }
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::format(&mp, e.to_string()))?;
    let mut samples = Vec::with_capacity(meta.labels.len());
    for (id, &label) in &meta.labels {
        let ip = dir.join("images").join(format!("{id}.png"));
        if !ip.exists() {
            return Err(Error::MissingInput(ip));
        }
        let image = Image::load_png(&ip)?;
        let lp = dir.join("labels").join(format!("{id}.txt"));
        let text = fs::read_to_string(&lp).map_err(|e| Error::io(&lp, e))?;
        let boxes = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| BBox::parse_label_line(l).ok_or_else(|| Error::format(&lp, format!("bad label line {l:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let masks = load_indexed_masks(&dir.join("masks"), id)?;
        samples.push(Sample {
            id: id.clone(),
            image,
            label,
            masks,
            boxes,
        });
    }
    Ok(Dataset {
        samples,
        config: meta.config,
        seed: meta.seed,
    })
}

/// Load `{dir}/{id}_0.png`, `{id}_1.png`, ... until the first gap.
pub fn load_indexed_masks(dir: &Path, id: &str) -> Result<Vec<Mask>> {
    let mut masks = Vec::new();
    loop {
        let p = dir.join(format!("{id}_{}.png", masks.len()));
        if !p.exists() {
            break;
        }
        masks.push(Mask::load_png(&p)?);
    }
    Ok(masks)
}
