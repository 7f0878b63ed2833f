//! Two-stage inference, evaluation and spectrum reports, in memory and on
//! disk.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::container::Container;
use super::train::{data_subset, train_from, Checkpoint, Example};
use crate::codec::{decode, encode, CodecSpec, LatentMap};
use crate::error::{Error, Result};
use crate::flows::{
    euler_sample, gaussian_like, predict_clean, FlowKind, FlowVariant, TimeSchedule,
};
use crate::imageio;
use crate::metrics::{self, MetricsReport, SampleMetrics, SpectrumBin};
use crate::scenes::{self, CoarsePair, LatentPair, Normalization, SceneSample, Split, Task};

/// Largest refinement step count, equal to the sharpener's training grid.
pub const MAX_REFINE_STEPS: usize = 10;

/// Annotation latent predicted from an image latent by any base variant.
/// `noise_seed` only matters for the stochastic variant.
pub fn predict_latent(ckpt: &Checkpoint, image: &LatentMap, noise_seed: u64) -> Result<LatentMap> {
    let cfg = &ckpt.config;
    match cfg.variant.kind {
        FlowKind::CorePredictor => predict_clean(&ckpt.net, cfg.variant, image),
        FlowKind::DeterministicDa if cfg.schedule.inference_steps == 1 => {
            predict_clean(&ckpt.net, cfg.variant, image)
        }
        FlowKind::DeterministicDa => euler_sample(&ckpt.net, image, &cfg.schedule, None),
        FlowKind::StochasticDa => {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let noise = gaussian_like(image, &mut rng);
            euler_sample(&ckpt.net, &noise, &cfg.schedule, Some(image))
        }
        FlowKind::Sharpener => Err(Error::Config(
            "the sharpener refines coarse predictions; it does not predict from images".into(),
        )),
    }
}

/// Euler refinement of a coarse latent with `steps` steps; 0 returns the
/// input unchanged.
pub fn refine(sharpener: &Checkpoint, coarse: &LatentMap, steps: usize) -> Result<LatentMap> {
    if steps > MAX_REFINE_STEPS {
        return Err(Error::Config(format!(
            "refinement uses at most {MAX_REFINE_STEPS} steps, got {steps}"
        )));
    }
    if steps == 0 {
        return Ok(coarse.clone());
    }
    if sharpener.config.variant != FlowVariant::SHARPENER {
        return Err(Error::Config(format!(
            "expected a sharpener checkpoint, got {}",
            sharpener.config.variant.label()
        )));
    }
    let schedule = TimeSchedule::with_inference(sharpener.config.schedule.train_steps, steps)?;
    euler_sample(&sharpener.net, coarse, &schedule, None)
}

/// Annotation pixels in `[0, 1]` from a latent: one channel for depth, three
/// for normals.
pub fn latent_to_unit(z: &LatentMap, task: Task, codec: CodecSpec) -> Result<LatentMap> {
    let pixels = decode(z, codec)?;
    Ok(match task {
        Task::Depth => pixels.channel_mean(),
        Task::Normal => pixels,
    })
}

/// Physical annotation from unit pixels: disparity, or unit normals.
pub fn unit_to_annotation(unit: &LatentMap, task: Task, norm: Normalization) -> LatentMap {
    match task {
        Task::Depth => unit.map(|u| norm.denormalize(u)),
        Task::Normal => scenes::renormalize(&unit.map(|v| 2.0 * v - 1.0)),
    }
}

/// Metrics of one predicted annotation against ground truth.
pub fn sample_metrics(
    id: &str,
    task: Task,
    pred: &LatentMap,
    gt: &SceneSample,
) -> Result<SampleMetrics> {
    match task {
        Task::Depth => {
            let (absrel, delta1) =
                metrics::depth_metrics(pred.data(), gt.disparity.data(), &gt.mask)?;
            Ok(SampleMetrics {
                id: id.to_string(),
                absrel: Some(absrel),
                delta1: Some(delta1),
                mean_angle: None,
                below_11_25: None,
            })
        }
        Task::Normal => {
            let e = metrics::angular_error(pred.data(), gt.normal.data(), &gt.mask)?;
            Ok(SampleMetrics {
                id: id.to_string(),
                absrel: None,
                delta1: None,
                mean_angle: Some(e.mean_deg),
                below_11_25: Some(e.below_11_25),
            })
        }
    }
}

/// Encodes a split for training or evaluation.
pub fn latent_pairs(
    samples: &[SceneSample],
    task: Task,
    codec: CodecSpec,
) -> Result<Vec<LatentPair>> {
    samples
        .iter()
        .map(|s| scenes::to_latents(s, task, codec))
        .collect()
}

pub fn examples_from(pairs: &[LatentPair]) -> Vec<Example> {
    pairs
        .iter()
        .map(|p| Example {
            image: p.image.clone(),
            annotation: p.annotation.clone(),
        })
        .collect()
}

pub fn coarse_examples(pairs: &[CoarsePair]) -> Vec<Example> {
    pairs
        .iter()
        .map(|p| Example {
            image: p.coarse.clone(),
            annotation: p.fine.clone(),
        })
        .collect()
}

/// Coarse pairs from a trained base checkpoint.
pub fn coarse_pairs(core: &Checkpoint, dataset: &[LatentPair]) -> Result<Vec<CoarsePair>> {
    core.require_trained()?;
    let predictor = |z: &LatentMap| predict_latent(core, z, 0);
    scenes::make_coarse_pairs(&predictor, dataset)
}

pub fn save_coarse_pairs(path: &Path, pairs: &[CoarsePair], core_hash: &str) -> Result<String> {
    let mut c = Container::new(serde_json::json!({
        "kind": "coarse_pairs",
        "count": pairs.len(),
        "core": core_hash,
    }));
    for (i, p) in pairs.iter().enumerate() {
        c.push(format!("coarse/{i}"), p.coarse.to_tensor());
        c.push(format!("fine/{i}"), p.fine.to_tensor());
    }
    c.save(path)
}

pub fn load_coarse_pairs(path: &Path) -> Result<Vec<CoarsePair>> {
    let mut c = Container::load(path)?;
    if c.meta["kind"] != "coarse_pairs" {
        return Err(Error::Format(format!(
            "{} is not a coarse-pair file",
            path.display()
        )));
    }
    let count = c.meta["count"]
        .as_u64()
        .ok_or_else(|| Error::Format("coarse-pair file without count".into()))?
        as usize;
    (0..count)
        .map(|i| {
            Ok(CoarsePair {
                coarse: LatentMap::from_tensor(&c.take(&format!("coarse/{i}"))?)?,
                fine: LatentMap::from_tensor(&c.take(&format!("fine/{i}"))?)?,
            })
        })
        .collect()
}

/// Trains the sharpener on a persisted coarse-pair set.
pub fn train_sharpener(
    pairs_path: &Path,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Checkpoint> {
    if config.variant != FlowVariant::SHARPENER {
        return Err(Error::Config(format!(
            "sharpener training needs the sharpener variant, got {}",
            config.variant.label()
        )));
    }
    let pairs = load_coarse_pairs(pairs_path)?;
    let examples = coarse_examples(&pairs);
    train_from(
        Checkpoint::fresh(config)?,
        data_subset(config, &examples),
        out_dir,
    )
}

/// Loads and encodes the training split of an on-disk dataset.
pub fn load_examples(
    root: &Path,
    split: Split,
    task: Task,
    codec: CodecSpec,
) -> Result<Vec<(String, LatentPair)>> {
    scenes::load_split(root, split)?
        .into_iter()
        .map(|(id, s)| Ok((id, scenes::to_latents(&s, task, codec)?)))
        .collect()
}

/// Trains `config` on `<dataset>/train`, writing checkpoints to `out_dir`.
pub fn train_on_disk(config: &TrainConfig, out_dir: &Path) -> Result<(Checkpoint, String)> {
    let root = config
        .dataset
        .as_deref()
        .ok_or_else(|| Error::Config("train config has no dataset path".into()))?;
    let pairs: Vec<LatentPair> = load_examples(root, Split::Train, config.task, config.codec)?
        .into_iter()
        .map(|p| p.1)
        .collect();
    let examples = examples_from(&pairs);
    let ckpt = train_from(
        Checkpoint::fresh(config)?,
        data_subset(config, &examples),
        Some(out_dir),
    )?;
    let hash = ckpt.save(&out_dir.join("final.ckpt"))?;
    Ok((ckpt, hash))
}

/// Prediction sidecar written next to every predicted map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub task: Task,
    pub normalization: Normalization,
    pub core: String,
    pub sharpener: Option<String>,
    pub sharpener_steps: usize,
    pub map_sha256: String,
}

pub const PREDICTION_META: &str = "prediction.json";

pub fn prediction_file(task: Task) -> &'static str {
    match task {
        Task::Depth => scenes::DISPARITY_FILE,
        Task::Normal => scenes::NORMAL_FILE,
    }
}

/// Two-stage inference model.
pub struct Pipeline {
    pub core: Checkpoint,
    pub sharpener: Option<Checkpoint>,
    core_hash: String,
    sharpener_hash: Option<String>,
}

impl Pipeline {
    pub fn new(core: Checkpoint, sharpener: Option<Checkpoint>) -> Result<Self> {
        core.require_trained()?;
        if let Some(s) = &sharpener {
            s.require_trained()?;
            if s.config.codec != core.config.codec || s.config.task != core.config.task {
                return Err(Error::Config(
                    "core and sharpener disagree on codec or task".into(),
                ));
            }
        }
        let core_hash = core.hash()?;
        let sharpener_hash = sharpener.as_ref().map(|s| s.hash()).transpose()?;
        Ok(Self {
            core,
            sharpener,
            core_hash,
            sharpener_hash,
        })
    }

    pub fn load(core: &Path, sharpener: Option<&Path>) -> Result<Self> {
        Self::new(
            Checkpoint::load(core)?,
            sharpener.map(Checkpoint::load).transpose()?,
        )
    }

    /// Coarse and refined latents for an image; `steps == 0` or no sharpener
    /// leaves the coarse latent as the output.
    pub fn predict(&self, image: &LatentMap, steps: usize) -> Result<(LatentMap, LatentMap)> {
        if steps > MAX_REFINE_STEPS {
            return Err(Error::Config(format!(
                "refinement uses at most {MAX_REFINE_STEPS} steps, got {steps}"
            )));
        }
        let cfg = &self.core.config;
        let z = encode(image, cfg.codec)?;
        if let Some(shape) = self.core.latent_shape {
            if z.shape() != shape {
                return Err(Error::Shape(format!(
                    "image encodes to {:?} but the checkpoint was trained on {shape:?}",
                    z.shape()
                )));
            }
        }
        let coarse = predict_latent(&self.core, &z, 0)?;
        let fine = match &self.sharpener {
            Some(s) if steps > 0 => refine(s, &coarse, steps)?,
            _ => coarse.clone(),
        };
        Ok((coarse, fine))
    }

    /// Predicts one image and writes the map and its sidecar into `out_dir`.
    pub fn infer_image(
        &self,
        image: &LatentMap,
        norm: Normalization,
        steps: usize,
        out_dir: &Path,
    ) -> Result<()> {
        let task = self.core.config.task;
        let (_, fine) = self.predict(image, steps)?;
        let unit = latent_to_unit(&fine, task, self.core.config.codec)?;
        let bytes = imageio::to_pnm_bytes(&unit)?;
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join(prediction_file(task));
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        let used = if self.sharpener.is_some() { steps } else { 0 };
        let meta = PredictionMeta {
            task,
            normalization: norm,
            core: self.core_hash.clone(),
            sharpener: self.sharpener_hash.clone().filter(|_| used > 0),
            sharpener_steps: used,
            map_sha256: hex::encode(Sha256::digest(&bytes)),
        };
        scenes::write_json(&out_dir.join(PREDICTION_META), &meta)
    }

    /// Infers every sample under a split directory, a single sample
    /// directory, or a bare `.ppm` image.
    pub fn infer_path(&self, input: &Path, steps: usize, out_dir: &Path) -> Result<Vec<String>> {
        let unit_norm = Normalization { min: 0.0, max: 1.0 };
        let norm_for = |dir: &Path| -> Result<Normalization> {
            match self.core.config.task {
                Task::Depth => match scenes::read_meta(dir) {
                    Ok(m) => Ok(Normalization {
                        min: m.disparity_min,
                        max: m.disparity_max,
                    }),
                    Err(Error::Missing(_)) => Ok(unit_norm),
                    Err(e) => Err(e),
                },
                Task::Normal => Ok(Normalization {
                    min: -1.0,
                    max: 1.0,
                }),
            }
        };
        if input.is_file() {
            let image = imageio::read_pnm(input)?;
            let dir = input.parent().unwrap_or(Path::new("."));
            self.infer_image(&image, norm_for(dir)?, steps, out_dir)?;
            return Ok(vec![input.display().to_string()]);
        }
        if input.join(scenes::IMAGE_FILE).is_file() {
            let image = imageio::read_pnm(&input.join(scenes::IMAGE_FILE))?;
            self.infer_image(&image, norm_for(input)?, steps, out_dir)?;
            return Ok(vec![input.display().to_string()]);
        }
        let ids = scenes::list_ids(input)?;
        for id in &ids {
            let dir = input.join(id);
            let image = imageio::read_pnm(&dir.join(scenes::IMAGE_FILE))?;
            self.infer_image(&image, norm_for(&dir)?, steps, &out_dir.join(id))?;
        }
        Ok(ids)
    }
}

fn check_ids(a: &[String], b: &[String]) -> Result<()> {
    if a != b {
        let mut diff: Vec<String> = a
            .iter()
            .filter(|x| !b.contains(x))
            .chain(b.iter().filter(|x| !a.contains(x)))
            .cloned()
            .collect();
        diff.sort();
        if diff.is_empty() {
            diff.push("id lists differ in order or multiplicity".into());
        }
        return Err(Error::IdMismatch(diff));
    }
    Ok(())
}

/// Reads a prediction directory back as a physical annotation.
pub fn read_prediction(dir: &Path) -> Result<(PredictionMeta, LatentMap)> {
    let meta: PredictionMeta = scenes::read_json(&dir.join(PREDICTION_META))?;
    let unit = imageio::read_pnm(&dir.join(prediction_file(meta.task)))?;
    let ann = unit_to_annotation(&unit, meta.task, meta.normalization);
    Ok((meta, ann))
}

/// Evaluates every prediction under `pred_dir` against `gt_dir` (a split
/// directory) and writes `metrics.csv` and `metrics.json` to `out_dir`.
pub fn evaluate(
    pred_dir: &Path,
    gt_dir: &Path,
    task: Task,
    method: &str,
    out_dir: &Path,
) -> Result<MetricsReport> {
    let pred_ids = scenes::list_ids(pred_dir)?;
    let gt_ids = scenes::list_ids(gt_dir)?;
    check_ids(&pred_ids, &gt_ids)?;
    let mut rows = Vec::new();
    for id in &pred_ids {
        let (meta, pred) = read_prediction(&pred_dir.join(id))?;
        if meta.task != task {
            return Err(Error::Config(format!(
                "{id}: prediction is for {:?}",
                meta.task
            )));
        }
        let gt = scenes::read_sample(&gt_dir.join(id))?;
        rows.push(sample_metrics(id, task, &pred, &gt)?);
    }
    let dataset = gt_dir.display().to_string();
    let report = MetricsReport::new(method, &dataset, rows);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv = out_dir.join("metrics.csv");
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    scenes::write_json(&out_dir.join("metrics.json"), &report)?;
    Ok(report)
}

/// Unit-range annotation maps of a directory: predictions (with sidecars) or
/// ground-truth samples.
fn unit_maps(dir: &Path, task: Task) -> Result<Vec<(String, LatentMap)>> {
    scenes::list_ids(dir)?
        .into_iter()
        .map(|id| {
            let map = imageio::read_pnm(&dir.join(&id).join(prediction_file(task)))?;
            Ok((id, map))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    pub columns: Vec<(String, Vec<SpectrumBin>)>,
}

impl SpectrumReport {
    pub fn to_csv(&self) -> Result<String> {
        let cols: Vec<(&str, &[SpectrumBin])> = self
            .columns
            .iter()
            .map(|(n, b)| (n.as_str(), b.as_slice()))
            .collect();
        metrics::spectrum_csv(&cols)
    }
}

/// Mean radial spectra of the annotation maps in each labelled directory;
/// all directories must hold the same ids.
pub fn spectrum_report(
    dirs: &[(&str, PathBuf)],
    task: Task,
    out_csv: Option<&Path>,
) -> Result<SpectrumReport> {
    let mut columns = Vec::new();
    let mut reference: Option<Vec<String>> = None;
    for (label, dir) in dirs {
        let maps = unit_maps(dir, task)?;
        let ids: Vec<String> = maps.iter().map(|m| m.0.clone()).collect();
        match &reference {
            Some(r) => check_ids(r, &ids)?,
            None => reference = Some(ids),
        }
        let maps: Vec<LatentMap> = maps.into_iter().map(|m| m.1).collect();
        columns.push((label.to_string(), metrics::mean_spectrum(&maps)?));
    }
    let report = SpectrumReport { columns };
    if let Some(path) = out_csv {
        fs::write(path, report.to_csv()?).map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}
