//! Deterministic synthetic benchmark: person sprites composited onto
//! camera-specific backgrounds with exact ground-truth masks.
//!
//! Every sample is a pure function of (master seed, person id, camera id,
//! image index), so generation is order-independent and byte-reproducible.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::netpbm;
use crate::rng::{sample_seed, SplitMix64};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureKind {
    Stripes,
    Checker,
    Gradient,
    Speckle,
}

/// Camera-specific background recipe: hue, texture, illumination, noise.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub camera_id: usize,
    pub base_rgb: [f32; 3],
    pub alt_rgb: [f32; 3],
    pub texture: TextureKind,
    pub texture_period: f32,
    pub illumination_gain: f32,
    pub noise_amplitude: f32,
}

fn hsv_to_rgb(h_deg: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

const GOLDEN_ANGLE: f32 = 137.50776;

impl SceneSpec {
    /// Two distinct camera ids always differ in hue; texture kind cycles
    /// and illumination gain is seeded per camera.
    pub fn for_camera(camera_id: usize) -> Self {
        let mut rng = SplitMix64::new(0x5CE1E_5EED ^ camera_id as u64);
        let hue = camera_id as f32 * GOLDEN_ANGLE;
        let base_rgb = hsv_to_rgb(hue, 0.45, 0.50);
        let alt_rgb = hsv_to_rgb(hue + 34.0, 0.55, 0.32);
        let texture = match camera_id % 4 {
            0 => TextureKind::Stripes,
            1 => TextureKind::Checker,
            2 => TextureKind::Gradient,
            _ => TextureKind::Speckle,
        };
        Self {
            camera_id,
            base_rgb,
            alt_rgb,
            texture,
            texture_period: rng.uniform(8.0, 16.0) as f32,
            illumination_gain: rng.uniform(0.6, 1.4) as f32,
            noise_amplitude: 0.02,
        }
    }
}

/// Person-specific sprite recipe: three part colors and a body aspect.
#[derive(Debug, Clone)]
pub struct SpriteSpec {
    pub person_id: usize,
    pub head_rgb: [f32; 3],
    pub torso_rgb: [f32; 3],
    pub legs_rgb: [f32; 3],
    pub aspect: f32,
}

impl SpriteSpec {
    pub fn for_person(person_id: usize) -> Self {
        let mut rng = SplitMix64::new(0xB0D1_5EED ^ person_id as u64);
        let hue = person_id as f32 * GOLDEN_ANGLE + 67.0;
        let torso_rgb = hsv_to_rgb(hue, 0.85, rng.uniform(0.65, 0.85) as f32);
        let legs_rgb = hsv_to_rgb(hue + 120.0, 0.70, rng.uniform(0.45, 0.65) as f32);
        let head_rgb = hsv_to_rgb(
            rng.uniform(20.0, 50.0) as f32,
            rng.uniform(0.35, 0.55) as f32,
            rng.uniform(0.70, 0.88) as f32,
        );
        Self {
            person_id,
            head_rgb,
            torso_rgb,
            legs_rgb,
            aspect: rng.uniform(0.30, 0.36) as f32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::Format {
                kind: "manifest",
                detail: format!("unknown split `{other}`"),
            }),
        }
    }
}

/// One rendered benchmark image with its exact foreground mask.
pub struct Sample {
    pub image: Tensor,
    pub person_id: usize,
    pub camera_id: usize,
    pub gt_mask: Tensor,
    pub split: Split,
}

/// Mask coverage bounds every rendered sample must satisfy.
pub const COVERAGE_MIN: f64 = 0.15;
pub const COVERAGE_MAX: f64 = 0.60;

fn sprite_pixel(sprite: &SpriteSpec, px: f32, py: f32) -> Option<[f32; 3]> {
    // px, py in [0,1] relative to the sprite bounding box
    let head_cx = 0.5;
    let head_cy = 0.11;
    let dx = (px - head_cx) / 0.30;
    let dy = (py - head_cy) / 0.11;
    if dx * dx + dy * dy <= 1.0 {
        return Some(sprite.head_rgb);
    }
    if (0.22..0.60).contains(&py) && (0.05..0.95).contains(&px) {
        return Some(sprite.torso_rgb);
    }
    if (0.60..1.0).contains(&py) && ((0.08..0.47).contains(&px) || (0.53..0.92).contains(&px)) {
        return Some(sprite.legs_rgb);
    }
    None
}

fn background_pixel(scene: &SceneSpec, x: usize, y: usize, phase: f32, speckle_seed: u64) -> [f32; 3] {
    let t = match scene.texture {
        TextureKind::Stripes => {
            let band = ((x as f32 + y as f32 + phase) / scene.texture_period).floor() as i64;
            if band.rem_euclid(2) == 0 {
                0.0
            } else {
                1.0
            }
        }
        TextureKind::Checker => {
            let cell = scene.texture_period;
            let cx = ((x as f32 + phase) / cell).floor() as i64;
            let cy = ((y as f32 + phase * 0.5) / cell).floor() as i64;
            if (cx + cy).rem_euclid(2) == 0 {
                0.0
            } else {
                1.0
            }
        }
        TextureKind::Gradient => {
            ((x as f32 + 2.0 * y as f32 + phase) / (3.0 * scene.texture_period)).sin() * 0.5 + 0.5
        }
        TextureKind::Speckle => {
            let h = crate::rng::splitmix64(speckle_seed ^ ((y as u64) << 24 | x as u64));
            (h >> 40) as f32 / (1u64 << 24) as f32
        }
    };
    [
        scene.base_rgb[0] * (1.0 - t) + scene.alt_rgb[0] * t,
        scene.base_rgb[1] * (1.0 - t) + scene.alt_rgb[1] * t,
        scene.base_rgb[2] * (1.0 - t) + scene.alt_rgb[2] * t,
    ]
}

/// Renders one sample: background fill, alpha-composited sprite, exact mask,
/// then illumination gain and pixel noise on the image only. Placement is
/// re-jittered up to 8 times if the sprite leaves the frame or its coverage
/// leaves [0.15, 0.60].
pub fn render_sample(
    scene: &SceneSpec,
    sprite: &SpriteSpec,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    let (h, w) = (height as f32, width as f32);
    let mut rng = SplitMix64::new(seed);

    let mut placed = false;
    let mut mask = vec![0.0f32; height * width];
    let mut sprite_rgb = vec![[0.0f32; 3]; height * width];
    for _attempt in 0..8 {
        // scale 0.5-0.9 of frame height, center jitter +-15%
        let scale = rng.uniform(0.5, 0.9) as f32;
        let dx = rng.uniform(-0.15, 0.15) as f32 * w;
        let dy = rng.uniform(-0.15, 0.15) as f32 * h;
        let hs = scale * h;
        let ws = sprite.aspect * hs;
        let x0 = (w - ws) / 2.0 + dx;
        let y0 = (h - hs) / 2.0 + dy;
        if x0 < 0.0 || y0 < 0.0 || x0 + ws > w || y0 + hs > h {
            continue;
        }
        // rasterize and check coverage
        mask.iter_mut().for_each(|m| *m = 0.0);
        let mut covered = 0usize;
        for y in y0.floor() as usize..(y0 + hs).ceil() as usize {
            for x in x0.floor() as usize..(x0 + ws).ceil() as usize {
                if y >= height || x >= width {
                    continue;
                }
                let px = (x as f32 + 0.5 - x0) / ws;
                let py = (y as f32 + 0.5 - y0) / hs;
                if !(0.0..1.0).contains(&px) || !(0.0..1.0).contains(&py) {
                    continue;
                }
                if let Some(rgb) = sprite_pixel(sprite, px, py) {
                    mask[y * width + x] = 1.0;
                    sprite_rgb[y * width + x] = rgb;
                    covered += 1;
                }
            }
        }
        let coverage = covered as f64 / (height * width) as f64;
        if (COVERAGE_MIN..=COVERAGE_MAX).contains(&coverage) {
            placed = true;
            break;
        }
    }
    if !placed {
        return Err(Error::Contract(format!(
            "sprite placement failed after 8 attempts (person {}, camera {}, seed {seed})",
            sprite.person_id, scene.camera_id
        )));
    }

    let phase = rng.uniform(0.0, 64.0) as f32;
    let speckle_seed = rng.next_u64();
    let gain = scene.illumination_gain;
    let amp = scene.noise_amplitude;

    // the gain models scene illumination: it shades the background fill, so
    // camera identity stays a property of the background pixels only
    let mut image = vec![0.0f32; 3 * height * width];
    let plane = height * width;
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let rgb = if mask[i] > 0.5 {
                sprite_rgb[i]
            } else {
                let bg = background_pixel(scene, x, y, phase, speckle_seed);
                [bg[0] * gain, bg[1] * gain, bg[2] * gain]
            };
            for c in 0..3 {
                let noisy = rgb[c] + (rng.gaussian() as f32) * amp;
                image[c * plane + i] = noisy.clamp(0.0, 1.0);
            }
        }
    }
    Ok((
        Tensor::new(vec![3, height, width], image),
        Tensor::new(vec![1, height, width], mask),
    ))
}

/// Benchmark layout: persons x cameras x images with split policy and seeds.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub n_persons: usize,
    pub n_cameras: usize,
    pub images_per_pair: usize,
    pub height: usize,
    pub width: usize,
    pub master_seed: u64,
    /// When set, the last two cameras are test-only and the rest train-only,
    /// so no test image carries a train camera id.
    pub unseen_scene: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_persons: 32,
            n_cameras: 6,
            images_per_pair: 6,
            height: 128,
            width: 48,
            master_seed: 7,
            unseen_scene: false,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_cameras < 2 {
            return Err(Error::Config(
                "cross-camera matching needs at least 2 cameras".into(),
            ));
        }
        if self.n_persons < 2 {
            return Err(Error::Config(
                "need at least 2 persons (train/test split is person-disjoint)".into(),
            ));
        }
        if self.unseen_scene && self.n_cameras < 3 {
            return Err(Error::Config(
                "unseen-scene mode reserves 2 test cameras and needs at least 1 train camera".into(),
            ));
        }
        if self.images_per_pair == 0 {
            return Err(Error::Config("images_per_pair must be positive".into()));
        }
        Ok(())
    }

    /// Person ids below the midpoint train; the rest are test identities.
    pub fn train_person_count(&self) -> usize {
        self.n_persons / 2
    }

    pub fn train_cameras(&self) -> Vec<usize> {
        if self.unseen_scene {
            (0..self.n_cameras - 2).collect()
        } else {
            (0..self.n_cameras).collect()
        }
    }

    pub fn test_cameras(&self) -> Vec<usize> {
        if self.unseen_scene {
            vec![self.n_cameras - 2, self.n_cameras - 1]
        } else {
            (0..self.n_cameras).collect()
        }
    }

    fn echo(&self) -> String {
        format!(
            "n_persons = {}\nn_cameras = {}\nimages_per_pair = {}\nheight = {}\nwidth = {}\nmaster_seed = {}\nunseen_scene = {}\n",
            self.n_persons,
            self.n_cameras,
            self.images_per_pair,
            self.height,
            self.width,
            self.master_seed,
            self.unseen_scene
        )
    }

    /// Reads back the spec.txt echo written next to a generated dataset.
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("spec.txt"))?;
        let mut spec = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Format {
                kind: "dataset spec",
                detail: format!("line {}: expected key = value", i + 1),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || Error::Format {
                kind: "dataset spec",
                detail: format!("line {}: bad value for {key}", i + 1),
            };
            match key {
                "n_persons" => spec.n_persons = value.parse().map_err(|_| bad())?,
                "n_cameras" => spec.n_cameras = value.parse().map_err(|_| bad())?,
                "images_per_pair" => spec.images_per_pair = value.parse().map_err(|_| bad())?,
                "height" => spec.height = value.parse().map_err(|_| bad())?,
                "width" => spec.width = value.parse().map_err(|_| bad())?,
                "master_seed" => spec.master_seed = value.parse().map_err(|_| bad())?,
                "unseen_scene" => spec.unseen_scene = value.parse().map_err(|_| bad())?,
                other => {
                    return Err(Error::Format {
                        kind: "dataset spec",
                        detail: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        Ok(spec)
    }
}

/// One manifest line: image path, labels, split, mask path.
#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub image: PathBuf,
    pub person_id: usize,
    pub camera_id: usize,
    pub split: Split,
    pub mask: PathBuf,
}

/// Line-oriented index of a generated dataset.
pub struct Manifest {
    pub base_dir: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.tsv"))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::Format {
            kind: "manifest",
            detail: "empty file".into(),
        })?;
        if header != MANIFEST_HEADER {
            return Err(Error::Format {
                kind: "manifest",
                detail: format!("unexpected header `{header}`"),
            });
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(Error::Format {
                    kind: "manifest",
                    detail: format!("line {}: expected 5 columns, got {}", i + 2, cols.len()),
                });
            }
            rows.push(ManifestRow {
                image: PathBuf::from(cols[0]),
                person_id: cols[1].parse().map_err(|_| Error::Format {
                    kind: "manifest",
                    detail: format!("line {}: bad person id", i + 2),
                })?,
                camera_id: cols[2].parse().map_err(|_| Error::Format {
                    kind: "manifest",
                    detail: format!("line {}: bad camera id", i + 2),
                })?,
                split: Split::parse(cols[3])?,
                mask: PathBuf::from(cols[4]),
            });
        }
        Ok(Self {
            base_dir: dir.to_path_buf(),
            rows,
        })
    }

    pub fn rows_in(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn load_image(&self, row: &ManifestRow) -> Result<Tensor> {
        netpbm::read_ppm(&self.base_dir.join(&row.image))
    }

    pub fn load_mask(&self, row: &ManifestRow) -> Result<Tensor> {
        netpbm::read_pgm(&self.base_dir.join(&row.mask))
    }
}

const MANIFEST_HEADER: &str = "relpath\tperson_id\tcamera_id\tsplit\tmask_relpath";

/// Renders the full benchmark to `out_dir`: images/, masks/, manifest.tsv
/// and spec.txt. Train and test person ids are disjoint; each test person
/// appears under at least two cameras; the first image of every test
/// (person, camera) pair is the query, the rest are gallery.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("masks"))?;

    struct Job {
        person_id: usize,
        camera_id: usize,
        index: usize,
        split: Split,
    }
    let mut jobs = Vec::new();
    let train_persons = spec.train_person_count();
    for pid in 0..spec.n_persons {
        let is_train = pid < train_persons;
        let cams = if is_train {
            spec.train_cameras()
        } else {
            spec.test_cameras()
        };
        for cid in cams {
            for idx in 0..spec.images_per_pair {
                let split = if is_train {
                    Split::Train
                } else if idx == 0 {
                    Split::Query
                } else {
                    Split::Gallery
                };
                jobs.push(Job {
                    person_id: pid,
                    camera_id: cid,
                    index: idx,
                    split,
                });
            }
        }
    }

    let rows: Vec<ManifestRow> = jobs
        .par_iter()
        .map(|job| -> Result<ManifestRow> {
            let scene = SceneSpec::for_camera(job.camera_id);
            let sprite = SpriteSpec::for_person(job.person_id);
            let seed = sample_seed(
                spec.master_seed,
                job.person_id as u64,
                job.camera_id as u64,
                job.index as u64,
            );
            let (image, mask) = render_sample(&scene, &sprite, spec.height, spec.width, seed)?;
            let name = format!("p{:03}_c{:02}_i{:02}", job.person_id, job.camera_id, job.index);
            let image_rel = PathBuf::from(format!("images/{name}.ppm"));
            let mask_rel = PathBuf::from(format!("masks/{name}.pgm"));
            netpbm::write_ppm(&out_dir.join(&image_rel), &image)?;
            netpbm::write_pgm(&out_dir.join(&mask_rel), &mask)?;
            Ok(ManifestRow {
                image: image_rel,
                person_id: job.person_id,
                camera_id: job.camera_id,
                split: job.split,
                mask: mask_rel,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut manifest_text = String::from(MANIFEST_HEADER);
    manifest_text.push('\n');
    for r in &rows {
        manifest_text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.image.display(),
            r.person_id,
            r.camera_id,
            r.split.name(),
            r.mask.display()
        ));
    }
    fs::write(out_dir.join("manifest.tsv"), manifest_text)?;
    fs::write(out_dir.join("spec.txt"), spec.echo())?;

    Ok(Manifest {
        base_dir: out_dir.to_path_buf(),
        rows,
    })
}
