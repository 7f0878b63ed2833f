//! Procedural scenes with exact geometry.
//!
//! The camera is orthographic and looks down the negative z axis from the
//! plane `z = 0`; pixel `(row i, col j)` of an `N x N` image casts the ray
//! through `x = -1 + (j + 1/2) 2/N`, `y = 1 - (i + 1/2) 2/N`. Depth `d'` is the
//! distance along the ray and disparity is `1 / d'`. Normals point toward the
//! viewer (`n_z >= 0`).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{decode, encode, CodecSpec, LatentMap};
use crate::error::{Error, Result};
use crate::imageio;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Depth,
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(&self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Base seed every per-sample seed is derived from.
    pub seed: u64,
}

impl SplitSizes {
    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    /// Per-sample seed. The split tag occupies bits 32..34, so seeds of
    /// different splits never coincide.
    pub fn sample_seed(&self, split: Split, index: usize) -> u64 {
        (self.seed << 34) | (split.tag() << 32) | index as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub resolution: usize,
    pub spheres: (usize, usize),
    pub sphere_radius: (f64, f64),
    pub boxes: (usize, usize),
    pub box_half_extent: (f64, f64),
    pub ground_plane: bool,
    /// Plane depth at the image centre.
    pub plane_depth: (f64, f64),
    /// Upper bound on `|dd'/dx| + |dd'/dy|` of the plane.
    pub plane_max_slope: f64,
    pub light_dir: [f64; 3],
    pub ambient: f64,
    pub palette: Vec<[f64; 3]>,
    pub background_albedo: [f64; 3],
    pub depth_range: (f64, f64),
    pub splits: SplitSizes,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            spheres: (1, 3),
            sphere_radius: (0.15, 0.4),
            boxes: (0, 2),
            box_half_extent: (0.1, 0.3),
            ground_plane: true,
            plane_depth: (3.0, 4.0),
            plane_max_slope: 0.8,
            light_dir: [-0.4, 0.5, 0.77],
            ambient: 0.15,
            palette: vec![
                [0.9, 0.3, 0.25],
                [0.3, 0.75, 0.35],
                [0.25, 0.4, 0.9],
                [0.95, 0.85, 0.3],
                [0.7, 0.35, 0.8],
                [0.3, 0.85, 0.85],
                [0.85, 0.85, 0.85],
                [0.55, 0.45, 0.35],
            ],
            background_albedo: [0.1, 0.1, 0.12],
            depth_range: (1.0, 5.0),
            splits: SplitSizes {
                train: 2000,
                val: 200,
                test: 200,
                seed: 0,
            },
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (dmin, dmax) = self.depth_range;
        if !(dmin > 0.0 && dmax > dmin) {
            return Err(Error::Config(format!(
                "invalid depth range {:?}",
                self.depth_range
            )));
        }
        if self.resolution == 0 || self.resolution % 2 != 0 {
            return Err(Error::Config(format!(
                "resolution must be positive and even, got {}",
                self.resolution
            )));
        }
        if self.spheres.0 > self.spheres.1 || self.boxes.0 > self.boxes.1 {
            return Err(Error::Config(
                "primitive count ranges must be ordered".into(),
            ));
        }
        if self.palette.is_empty() {
            return Err(Error::Config("empty albedo palette".into()));
        }
        if self.light_dir.iter().map(|v| v * v).sum::<f64>() == 0.0 {
            return Err(Error::Config("zero light direction".into()));
        }
        if !self.ground_plane && self.spheres.1 == 0 && self.boxes.1 == 0 {
            return Err(Error::Degenerate(
                "scene has no primitives and no ground plane".into(),
            ));
        }
        Ok(())
    }

    fn light(&self) -> [f64; 3] {
        normalize(self.light_dir)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    Sphere {
        /// `(x, y, depth)` of the centre.
        center: [f64; 3],
        radius: f64,
        albedo: [f64; 3],
    },
    /// Axis-aligned box; only the front face is visible orthographically.
    Cuboid {
        center: [f64; 3],
        half_extent: [f64; 3],
        albedo: [f64; 3],
    },
    /// `d'(x, y) = depth + slope[0] x + slope[1] y`.
    Plane {
        depth: f64,
        slope: [f64; 2],
        albedo: [f64; 3],
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub depth: f64,
    pub normal: [f64; 3],
    pub primitive: usize,
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

impl Primitive {
    pub fn albedo(&self) -> [f64; 3] {
        match self {
            Primitive::Sphere { albedo, .. }
            | Primitive::Cuboid { albedo, .. }
            | Primitive::Plane { albedo, .. } => *albedo,
        }
    }

    /// Nearest positive hit of the ray through `(x, y)`.
    pub fn intersect(&self, x: f64, y: f64) -> Option<(f64, [f64; 3])> {
        match *self {
            Primitive::Sphere { center, radius, .. } => {
                let (dx, dy) = (x - center[0], y - center[1]);
                let rho2 = dx * dx + dy * dy;
                let r2 = radius * radius;
                if rho2 > r2 {
                    return None;
                }
                let h = (r2 - rho2).sqrt();
                let depth = center[2] - h;
                (depth > 0.0).then(|| (depth, normalize([dx, dy, h])))
            }
            Primitive::Cuboid {
                center,
                half_extent,
                ..
            } => {
                let inside = (x - center[0]).abs() <= half_extent[0]
                    && (y - center[1]).abs() <= half_extent[1];
                let depth = center[2] - half_extent[2];
                (inside && depth > 0.0).then_some((depth, [0.0, 0.0, 1.0]))
            }
            Primitive::Plane { depth, slope, .. } => {
                let d = depth + slope[0] * x + slope[1] * y;
                (d > 0.0).then(|| (d, normalize([slope[0], slope[1], 1.0])))
            }
        }
    }
}

/// Pixel-centre ray coordinates for an `n x n` image.
pub fn pixel_coords(n: usize, row: usize, col: usize) -> (f64, f64) {
    let s = 2.0 / n as f64;
    (-1.0 + (col as f64 + 0.5) * s, 1.0 - (row as f64 + 0.5) * s)
}

/// Ray casts every pixel against the primitive set; `None` where nothing is hit.
pub fn cast(primitives: &[Primitive], resolution: usize) -> Vec<Option<Hit>> {
    let mut out = Vec::with_capacity(resolution * resolution);
    for row in 0..resolution {
        for col in 0..resolution {
            let (x, y) = pixel_coords(resolution, row, col);
            let mut best: Option<Hit> = None;
            for (id, p) in primitives.iter().enumerate() {
                if let Some((depth, normal)) = p.intersect(x, y) {
                    if best.map_or(true, |b| depth < b.depth) {
                        best = Some(Hit {
                            depth,
                            normal,
                            primitive: id,
                        });
                    }
                }
            }
            out.push(best);
        }
    }
    out
}

/// One rendered example with its exact annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    pub image: LatentMap,
    /// Single channel, `1 / depth`.
    pub disparity: LatentMap,
    pub normal: LatentMap,
    pub mask: Vec<bool>,
    pub primitives: Vec<Primitive>,
}

impl SceneSample {
    pub fn resolution(&self) -> usize {
        self.image.height()
    }
}

fn sample_range<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn sample_primitives(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Primitive> {
    let (dmin, dmax) = config.depth_range;
    let pick_albedo = |rng: &mut ChaCha8Rng| config.palette[rng.gen_range(0..config.palette.len())];
    let mut prims = Vec::new();
    // Objects are kept in front of the plane; hidden behind it they would
    // leave a uniformly shaded image with no depth cue.
    let mut plane = None;
    if config.ground_plane {
        let depth = sample_range(rng, config.plane_depth).clamp(dmin, dmax);
        let budget = config
            .plane_max_slope
            .min(depth - dmin)
            .min(dmax - depth)
            .max(0.0);
        let (mut sx, mut sy) = (0.0, 0.0);
        if budget > 0.0 {
            let share = rng.gen_range(0.0..1.0);
            sx = budget * share * if rng.gen::<bool>() { 1.0 } else { -1.0 };
            sy = budget * (1.0 - share) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
        }
        prims.push(Primitive::Plane {
            depth,
            slope: [sx, sy],
            albedo: pick_albedo(rng),
        });
        plane = Some((depth, sx, sy));
    }
    let limit = |x: f64, y: f64| plane.map_or(dmax, |(d, sx, sy)| (d + sx * x + sy * y).min(dmax));
    let n_spheres = rng.gen_range(config.spheres.0..=config.spheres.1);
    for _ in 0..n_spheres {
        let radius = sample_range(rng, config.sphere_radius);
        let cx = rng.gen_range(-0.8..0.8);
        let cy = rng.gen_range(-0.8..0.8);
        let cz = sample_range(
            rng,
            (dmin + radius, (limit(cx, cy) - radius).max(dmin + radius)),
        );
        prims.push(Primitive::Sphere {
            center: [cx, cy, cz],
            radius,
            albedo: pick_albedo(rng),
        });
    }
    let n_boxes = rng.gen_range(config.boxes.0..=config.boxes.1);
    for _ in 0..n_boxes {
        let half = [
            sample_range(rng, config.box_half_extent),
            sample_range(rng, config.box_half_extent),
            sample_range(rng, config.box_half_extent),
        ];
        let cx = rng.gen_range(-0.8..0.8);
        let cy = rng.gen_range(-0.8..0.8);
        let cz = sample_range(
            rng,
            (
                dmin + half[2],
                (limit(cx, cy) - half[2]).max(dmin + half[2]),
            ),
        );
        prims.push(Primitive::Cuboid {
            center: [cx, cy, cz],
            half_extent: half,
            albedo: pick_albedo(rng),
        });
    }
    prims
}

/// Lambertian radiance: `albedo (ambient + (1 - ambient) max(0, n . l))`.
pub fn shade(albedo: [f64; 3], normal: [f64; 3], light: [f64; 3], ambient: f64) -> [f64; 3] {
    let lambert = (normal[0] * light[0] + normal[1] * light[1] + normal[2] * light[2]).max(0.0);
    let k = ambient + (1.0 - ambient) * lambert;
    [albedo[0] * k, albedo[1] * k, albedo[2] * k]
}

/// Renders a fixed primitive set.
pub fn render(config: &SceneConfig, primitives: Vec<Primitive>, seed: u64) -> Result<SceneSample> {
    let n = config.resolution;
    let light = config.light();
    let far = config.depth_range.1;
    let hits = cast(&primitives, n);
    let mut image = Vec::with_capacity(n * n * 3);
    let mut disparity = Vec::with_capacity(n * n);
    let mut normal = Vec::with_capacity(n * n * 3);
    let mut mask = Vec::with_capacity(n * n);
    for hit in &hits {
        let (depth, nrm, albedo) = match hit {
            Some(h) => (h.depth, h.normal, primitives[h.primitive].albedo()),
            None => (far, [0.0, 0.0, 1.0], config.background_albedo),
        };
        image.extend(shade(albedo, nrm, light, config.ambient));
        disparity.push(1.0 / depth);
        normal.extend(nrm);
        mask.push(hit.is_some());
    }
    Ok(SceneSample {
        seed,
        image: LatentMap::new(n, n, 3, image)?,
        disparity: LatentMap::new(n, n, 1, disparity)?,
        normal: LatentMap::new(n, n, 3, normal)?,
        mask,
        primitives,
    })
}

pub fn generate(config: &SceneConfig, seed: u64) -> Result<SceneSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prims = sample_primitives(config, &mut rng);
    render(config, prims, seed)
}

/// Min-max range used to bring an annotation into `[0, 1]` before encoding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: f64,
    pub max: f64,
}

impl Normalization {
    pub fn of(values: &[f64]) -> Self {
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Self { min, max }
    }

    /// A zero-width range maps everything to 1/2.
    pub fn normalize(&self, v: f64) -> f64 {
        let range = self.max - self.min;
        if range > 0.0 {
            (v - self.min) / range
        } else {
            0.5
        }
    }

    pub fn denormalize(&self, u: f64) -> f64 {
        self.min + u * (self.max - self.min)
    }
}

/// Encoded image/annotation pair ready for flow training.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair {
    pub image: LatentMap,
    pub annotation: LatentMap,
    pub normalization: Normalization,
}

/// Annotation in pixel space (`[0, 1]`, 3 channels) for `task`.
pub fn annotation_pixels(sample: &SceneSample, task: Task) -> Result<(LatentMap, Normalization)> {
    match task {
        Task::Depth => {
            if !sample.mask.iter().any(|&m| m) {
                return Err(Error::Degenerate(
                    "all-background sample has constant disparity".into(),
                ));
            }
            let norm = Normalization::of(sample.disparity.data());
            let unit = sample.disparity.map(|v| norm.normalize(v));
            Ok((unit.replicate_channels(3)?, norm))
        }
        Task::Normal => Ok((
            sample.normal.map(|v| (v + 1.0) / 2.0),
            Normalization {
                min: -1.0,
                max: 1.0,
            },
        )),
    }
}

pub fn to_latents(sample: &SceneSample, task: Task, codec: CodecSpec) -> Result<LatentPair> {
    let (annotation, normalization) = annotation_pixels(sample, task)?;
    Ok(LatentPair {
        image: encode(&sample.image, codec)?,
        annotation: encode(&annotation, codec)?,
        normalization,
    })
}

/// Inverse of [`to_latents`] on the annotation side: decode, then undo the
/// channel mapping. Depth yields a 1-channel disparity map, normals a
/// per-pixel renormalised 3-channel field (zero vectors stay zero).
pub fn annotation_from_latent(
    z: &LatentMap,
    task: Task,
    codec: CodecSpec,
    norm: Normalization,
) -> Result<LatentMap> {
    let pixels = decode(z, codec)?;
    Ok(match task {
        Task::Depth => pixels.channel_mean().map(|u| norm.denormalize(u)),
        Task::Normal => renormalize(&pixels.map(|v| 2.0 * v - 1.0)),
    })
}

pub fn renormalize(field: &LatentMap) -> LatentMap {
    let mut out = field.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let n = (px[0] * px[0] + px[1] * px[1] + px[2] * px[2]).sqrt();
        if n > 0.0 {
            px.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Something that turns an image latent into a coarse annotation latent.
pub trait CoarsePredictor {
    fn predict_coarse(&self, image: &LatentMap) -> Result<LatentMap>;
}

impl<F> CoarsePredictor for F
where
    F: Fn(&LatentMap) -> Result<LatentMap>,
{
    fn predict_coarse(&self, image: &LatentMap) -> Result<LatentMap> {
        self(image)
    }
}

/// Training pair for the sharpener.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarsePair {
    pub coarse: LatentMap,
    pub fine: LatentMap,
}

pub fn make_coarse_pairs<P: CoarsePredictor + ?Sized>(
    core: &P,
    dataset: &[LatentPair],
) -> Result<Vec<CoarsePair>> {
    dataset
        .iter()
        .map(|p| {
            let coarse = core.predict_coarse(&p.image)?;
            coarse.same_shape(&p.annotation)?;
            Ok(CoarsePair {
                coarse,
                fine: p.annotation.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub resolution: usize,
    pub disparity_min: f64,
    pub disparity_max: f64,
    /// Alternating run lengths of the hit mask, starting with a `false` run.
    pub mask_runs: Vec<u32>,
    pub primitives: Vec<Primitive>,
}

pub fn encode_runs(mask: &[bool]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &m in mask {
        if m == current {
            len += 1;
        } else {
            runs.push(len);
            current = m;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn decode_runs(runs: &[u32]) -> Vec<bool> {
    let mut out = Vec::new();
    for (i, &r) in runs.iter().enumerate() {
        out.extend(std::iter::repeat(i % 2 == 1).take(r as usize));
    }
    out
}

pub fn sample_dir(root: &Path, split: Split, index: usize) -> PathBuf {
    root.join(split.name()).join(format!("{index:05}"))
}

pub const IMAGE_FILE: &str = "image.ppm";
pub const DISPARITY_FILE: &str = "disparity.pgm16";
pub const NORMAL_FILE: &str = "normal.ppm16";
pub const META_FILE: &str = "meta.json";

/// Writes `image.ppm`, `disparity.pgm16` (min-max normalised), `normal.ppm16`
/// (components mapped to `[0, 1]`) and `meta.json` into `dir`.
pub fn write_sample(dir: &Path, sample: &SceneSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let norm = Normalization::of(sample.disparity.data());
    imageio::write_pnm(&dir.join(IMAGE_FILE), &sample.image)?;
    imageio::write_pnm(
        &dir.join(DISPARITY_FILE),
        &sample.disparity.map(|v| norm.normalize(v)),
    )?;
    imageio::write_pnm(
        &dir.join(NORMAL_FILE),
        &sample.normal.map(|v| (v + 1.0) / 2.0),
    )?;
    let meta = SampleMeta {
        seed: sample.seed,
        resolution: sample.resolution(),
        disparity_min: norm.min,
        disparity_max: norm.max,
        mask_runs: encode_runs(&sample.mask),
        primitives: sample.primitives.clone(),
    };
    write_json(&dir.join(META_FILE), &meta)
}

pub fn read_meta(dir: &Path) -> Result<SampleMeta> {
    read_json(&dir.join(META_FILE))
}

/// Reads a sample back. Values carry the 16-bit quantisation of the files.
pub fn read_sample(dir: &Path) -> Result<SceneSample> {
    let meta = read_meta(dir)?;
    let norm = Normalization {
        min: meta.disparity_min,
        max: meta.disparity_max,
    };
    let image = imageio::read_pnm(&dir.join(IMAGE_FILE))?;
    let disparity = imageio::read_pnm(&dir.join(DISPARITY_FILE))?.map(|u| norm.denormalize(u));
    let normal = renormalize(&imageio::read_pnm(&dir.join(NORMAL_FILE))?.map(|v| 2.0 * v - 1.0));
    let mask = decode_runs(&meta.mask_runs);
    if mask.len() != image.height() * image.width() {
        return Err(Error::Format(format!(
            "{}: mask has {} entries for a {}x{} image",
            dir.display(),
            mask.len(),
            image.height(),
            image.width()
        )));
    }
    Ok(SceneSample {
        seed: meta.seed,
        image,
        disparity,
        normal,
        mask,
        primitives: meta.primitives,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Generates every split under `root/<split>/<id>/`.
pub fn generate_dataset(config: &SceneConfig, root: &Path) -> Result<()> {
    config.validate()?;
    for split in Split::ALL {
        for i in 0..config.splits.size(split) {
            let seed = config.splits.sample_seed(split, i);
            let sample = generate(config, seed)?;
            write_sample(&sample_dir(root, split, i), &sample)?;
        }
    }
    write_json(&root.join("config.json"), config)
}

/// Generates one split in memory.
pub fn generate_split(config: &SceneConfig, split: Split) -> Result<Vec<SceneSample>> {
    config.validate()?;
    (0..config.splits.size(split))
        .map(|i| generate(config, config.splits.sample_seed(split, i)))
        .collect()
}

/// Sample ids (directory names) of a split on disk, sorted.
pub fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(dir.to_path_buf()),
        _ => Error::io(dir, e),
    })?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn load_split(root: &Path, split: Split) -> Result<Vec<(String, SceneSample)>> {
    let dir = root.join(split.name());
    list_ids(&dir)?
        .into_iter()
        .map(|id| {
            let s = read_sample(&dir.join(&id))?;
            Ok((id, s))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_only(depth: f64) -> SceneConfig {
        SceneConfig {
            resolution: 16,
            spheres: (0, 0),
            boxes: (0, 0),
            plane_depth: (depth, depth),
            plane_max_slope: 0.0,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn flat_plane_geometry() {
        let s = generate(&plane_only(2.0), 3).unwrap();
        assert!(s.mask.iter().all(|&m| m));
        assert!(s.disparity.data().iter().all(|&d| d == 0.5));
        for px in s.normal.data().chunks(3) {
            assert_eq!(px, &[0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn sphere_centre_pixel() {
        let cfg = SceneConfig {
            resolution: 15 + 1,
            ground_plane: false,
            ..plane_only(4.0)
        };
        // Centre the sphere on the ray of pixel (8, 8).
        let (x, y) = pixel_coords(16, 8, 8);
        let (r, dc) = (0.5, 3.0);
        let s = render(
            &cfg,
            vec![Primitive::Sphere {
                center: [x, y, dc],
                radius: r,
                albedo: [1.0; 3],
            }],
            0,
        )
        .unwrap();
        // Oracle: ray (x, y, -s) meets |p - c| = r at s = dc - r on axis.
        assert!((s.disparity.get(8, 8, 0) - 1.0 / (dc - r)).abs() < 1e-15);
        assert_eq!(s.normal.pixel(8, 8), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn degenerate_config_rejected() {
        let cfg = SceneConfig {
            ground_plane: false,
            spheres: (0, 0),
            boxes: (0, 0),
            ..SceneConfig::default()
        };
        assert!(matches!(generate(&cfg, 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = SceneConfig {
            resolution: 32,
            ..SceneConfig::default()
        };
        assert_eq!(generate(&cfg, 17).unwrap(), generate(&cfg, 17).unwrap());
        assert_ne!(
            generate(&cfg, 17).unwrap().primitives,
            generate(&cfg, 18).unwrap().primitives
        );
    }

    #[test]
    fn sample_invariants() {
        let cfg = SceneConfig {
            resolution: 32,
            ..SceneConfig::default()
        };
        let light = normalize(cfg.light_dir);
        for seed in 0..20 {
            let s = generate(&cfg, seed).unwrap();
            let hits = cast(&s.primitives, 32);
            for (p, hit) in hits.iter().enumerate() {
                let (r, c) = (p / 32, p % 32);
                if !s.mask[p] {
                    continue;
                }
                assert!(s.disparity.data()[p] > 0.0);
                let n = s.normal.pixel(r, c);
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                assert!((len - 1.0).abs() < 1e-9);
                assert!(n[2] >= 0.0);
                let albedo = s.primitives[hit.unwrap().primitive].albedo();
                let expect = shade(albedo, [n[0], n[1], n[2]], light, cfg.ambient);
                for ch in 0..3 {
                    assert!((s.image.get(r, c, ch) - expect[ch]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn nearer_primitive_wins() {
        let cfg = plane_only(4.0);
        let prims = vec![
            Primitive::Plane {
                depth: 4.0,
                slope: [0.0, 0.0],
                albedo: [0.5; 3],
            },
            Primitive::Sphere {
                center: [0.0, 0.0, 3.0],
                radius: 0.5,
                albedo: [0.5; 3],
            },
            Primitive::Sphere {
                center: [0.0, 0.0, 2.0],
                radius: 0.3,
                albedo: [0.5; 3],
            },
        ];
        let s = render(&cfg, prims.clone(), 0).unwrap();
        for (p, &d) in s.disparity.data().iter().enumerate() {
            let (x, y) = pixel_coords(16, p / 16, p % 16);
            let best = prims
                .iter()
                .filter_map(|q| q.intersect(x, y))
                .map(|(depth, _)| 1.0 / depth)
                .fold(f64::MIN, f64::max);
            assert_eq!(d, best);
        }
    }

    #[test]
    fn depth_latents_and_inversion() {
        let s = generate(&plane_only(2.0), 0).unwrap();
        let lat = to_latents(&s, Task::Depth, CodecSpec::IDENTITY).unwrap();
        // Constant disparity normalises to 1/2, which encodes to 0.
        assert!(lat.annotation.data().iter().all(|&v| v == 0.0));
        let back = annotation_from_latent(
            &lat.annotation,
            Task::Depth,
            CodecSpec::IDENTITY,
            lat.normalization,
        )
        .unwrap();
        assert!(back.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn normal_latents_round_trip() {
        let cfg = SceneConfig {
            resolution: 32,
            ..SceneConfig::default()
        };
        let s = generate(&cfg, 5).unwrap();
        let lat = to_latents(&s, Task::Normal, CodecSpec::IDENTITY).unwrap();
        let back = annotation_from_latent(
            &lat.annotation,
            Task::Normal,
            CodecSpec::IDENTITY,
            lat.normalization,
        )
        .unwrap();
        assert!(back.max_abs_diff(&s.normal).unwrap() < 1e-9);
    }

    #[test]
    fn min_max_inverse() {
        let cfg = SceneConfig {
            resolution: 32,
            ..SceneConfig::default()
        };
        for seed in 0..10 {
            let s = generate(&cfg, seed).unwrap();
            let norm = Normalization::of(s.disparity.data());
            for &d in s.disparity.data() {
                assert!((norm.denormalize(norm.normalize(d)) - d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_background_rejected_for_depth() {
        let cfg = SceneConfig {
            resolution: 8,
            ground_plane: false,
            ..SceneConfig::default()
        };
        let empty = render(&cfg, vec![], 0).unwrap();
        assert!(to_latents(&empty, Task::Depth, CodecSpec::IDENTITY).is_err());
        assert!(to_latents(&empty, Task::Normal, CodecSpec::IDENTITY).is_ok());
    }

    #[test]
    fn mask_runs_round_trip() {
        let mask = vec![true, true, false, true, false, false, false];
        assert_eq!(encode_runs(&mask), vec![0, 2, 1, 1, 3]);
        assert_eq!(decode_runs(&encode_runs(&mask)), mask);
    }

    #[test]
    fn coarse_pairs_with_oracle_core() {
        let cfg = SceneConfig {
            resolution: 16,
            ..SceneConfig::default()
        };
        let data: Vec<LatentPair> = (0..5)
            .map(|s| {
                to_latents(
                    &generate(&cfg, s).unwrap(),
                    Task::Depth,
                    CodecSpec::IDENTITY,
                )
                .unwrap()
            })
            .collect();
        let lookup = data.clone();
        let oracle = move |z: &LatentMap| {
            Ok(lookup
                .iter()
                .find(|p| &p.image == z)
                .unwrap()
                .annotation
                .clone())
        };
        let pairs = make_coarse_pairs(&oracle, &data).unwrap();
        assert_eq!(pairs.len(), data.len());
        for p in &pairs {
            assert_eq!(p.coarse, p.fine);
            assert!(p
                .fine
                .sub(&p.coarse)
                .unwrap()
                .data()
                .iter()
                .all(|&v| v == 0.0));
        }
    }
}
